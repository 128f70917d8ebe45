//! Sixteen-joint human skeleton driven by a lean angle and two wrist targets.

type V3 = [f64; 3];

pub const NUM_JOINTS: usize = 16;

pub const PELVIS: usize = 0;
pub const TORSO: usize = 1;
pub const NECK: usize = 2;
pub const HEAD: usize = 3;
pub const L_SHOULDER: usize = 4;
pub const L_ELBOW: usize = 5;
pub const L_WRIST: usize = 6;
pub const R_SHOULDER: usize = 7;
pub const R_ELBOW: usize = 8;
pub const R_WRIST: usize = 9;
pub const L_HIP: usize = 10;
pub const L_KNEE: usize = 11;
pub const L_ANKLE: usize = 12;
pub const R_HIP: usize = 13;
pub const R_KNEE: usize = 14;
pub const R_ANKLE: usize = 15;

pub const UPPER_ARM: f64 = 0.28;
pub const FOREARM: f64 = 0.26;

/// Pelvis of the nominal stance. The human faces -x (towards the robot), so
/// their right-hand side is +y.
pub const PELVIS_REST: V3 = [0.85, 0.0, 0.10];
const SHOULDER_OFFSET: V3 = [0.0, 0.18, 0.47];

/// Degrees of freedom animated per frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HumanParams {
    /// Forward lean about the pelvis, radians (positive towards -x).
    pub lean: f64,
    pub right_wrist: V3,
    pub left_wrist: V3,
}

impl HumanParams {
    pub fn to_vec(self) -> Vec<f64> {
        let mut v = vec![self.lean];
        v.extend_from_slice(&self.right_wrist);
        v.extend_from_slice(&self.left_wrist);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        HumanParams {
            lean: v[0],
            right_wrist: [v[1], v[2], v[3]],
            left_wrist: [v[4], v[5], v[6]],
        }
    }
}

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: V3, b: V3) -> f64 {
    norm(sub(a, b))
}

fn leaned(offset: V3, lean: f64) -> V3 {
    let (s, c) = lean.sin_cos();
    add(
        PELVIS_REST,
        [
            offset[0] - offset[2] * s,
            offset[1],
            offset[2] * c + offset[0] * s,
        ],
    )
}

pub fn shoulder(side: f64, lean: f64) -> V3 {
    leaned(
        [
            SHOULDER_OFFSET[0],
            side * SHOULDER_OFFSET[1],
            SHOULDER_OFFSET[2],
        ],
        lean,
    )
}

/// Wrist target of the relaxed, hanging arm.
pub fn rest_wrist(side: f64) -> V3 {
    add(shoulder(side, 0.0), [-0.06, side * 0.03, -0.49])
}

pub fn rest_params() -> HumanParams {
    HumanParams {
        lean: 0.0,
        right_wrist: rest_wrist(1.0),
        left_wrist: rest_wrist(-1.0),
    }
}

/// Two-link arm; the elbow bends down and outwards. Out-of-reach targets are
/// pulled onto the reachable sphere.
fn arm(shoulder: V3, target: V3, side: f64) -> (V3, V3) {
    let reach = UPPER_ARM + FOREARM - 1e-4;
    let span = sub(target, shoulder);
    let mut d = norm(span);
    let dir = if d > 1e-9 {
        scale(span, 1.0 / d)
    } else {
        [0.0, 0.0, -1.0]
    };
    d = d.clamp((UPPER_ARM - FOREARM).abs() + 1e-4, reach);
    let wrist = add(shoulder, scale(dir, d));
    let along = (UPPER_ARM * UPPER_ARM - FOREARM * FOREARM + d * d) / (2.0 * d);
    let h = (UPPER_ARM * UPPER_ARM - along * along).max(0.0).sqrt();
    let mut pole = [0.0, side * 0.5, -1.0];
    pole = sub(pole, scale(dir, dot(pole, dir)));
    let mut pn = norm(pole);
    if pn < 1e-6 {
        pole = sub([1.0, 0.0, 0.0], scale(dir, dir[0]));
        pn = norm(pole);
    }
    let elbow = add(add(shoulder, scale(dir, along)), scale(pole, h / pn));
    (elbow, wrist)
}

/// Joint positions, row `i` is joint `i`.
pub fn pose(p: &HumanParams) -> [V3; NUM_JOINTS] {
    let mut j = [[0.0; 3]; NUM_JOINTS];
    j[PELVIS] = PELVIS_REST;
    j[TORSO] = leaned([0.0, 0.0, 0.25], p.lean);
    j[NECK] = leaned([0.0, 0.0, 0.50], p.lean);
    j[HEAD] = leaned([0.0, 0.0, 0.65], p.lean);
    for (side, sh, el, wr, target) in [
        (1.0, R_SHOULDER, R_ELBOW, R_WRIST, p.right_wrist),
        (-1.0, L_SHOULDER, L_ELBOW, L_WRIST, p.left_wrist),
    ] {
        j[sh] = shoulder(side, p.lean);
        let (e, w) = arm(j[sh], target, side);
        j[el] = e;
        j[wr] = w;
    }
    for (side, hip, knee, ankle) in [
        (1.0, R_HIP, R_KNEE, R_ANKLE),
        (-1.0, L_HIP, L_KNEE, L_ANKLE),
    ] {
        j[hip] = add(PELVIS_REST, [0.0, side * 0.10, -0.05]);
        j[knee] = add(j[hip], [-0.02, 0.0, -0.42]);
        j[ankle] = add(j[knee], [0.02, 0.0, -0.42]);
    }
    j
}

/// Radius inside which the body is pushed away from the end-effector.
pub const REPULSION_RADIUS: f64 = 0.35;
const REPULSION_GAIN: f64 = 2.1;

/// Displacement applied to every joint so that the torso ends up at distance
/// `d + gain (R - d)^2` from the end-effector. The map is increasing-then-
/// decreasing with minimum ~0.231 m, so the torso never gets closer than that.
pub fn repulsion(torso: V3, ee: V3) -> V3 {
    let diff = sub(torso, ee);
    let d = norm(diff);
    if d >= REPULSION_RADIUS {
        return [0.0; 3];
    }
    let dir = if d > 1e-9 {
        scale(diff, 1.0 / d)
    } else {
        [1.0, 0.0, 0.0]
    };
    let push = REPULSION_GAIN * (REPULSION_RADIUS - d).powi(2);
    scale(dir, push)
}
