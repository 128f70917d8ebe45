//! Serial-chain robot: forward kinematics and the planar solver used to turn
//! Cartesian waypoints into joint targets.

use crate::error::{Error, Result};
use crate::nn::Tensor;

type V3 = [f64; 3];

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn rot_z(t: f64) -> [[f64; 3]; 3] {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rot_y(t: f64) -> [[f64; 3]; 3] {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// Keypoints of the chain. Joint `i` rotates about z for even `i` and about
/// y for odd `i`; each link extends along the local +x axis.
pub fn fk(angles: &[f64], links: &[f64]) -> Vec<V3> {
    debug_assert_eq!(angles.len(), links.len());
    let mut rot = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut p = [0.0; 3];
    let mut out = Vec::with_capacity(links.len() + 1);
    out.push(p);
    for (i, (&a, &l)) in angles.iter().zip(links).enumerate() {
        let r = if i % 2 == 0 { rot_z(a) } else { rot_y(a) };
        rot = mat_mul(&rot, &r);
        for (k, pk) in p.iter_mut().enumerate() {
            *pk += rot[k][0] * l;
        }
        out.push(p);
    }
    out
}

/// `[K-1]` joint angles -> `[K, 3]` keypoints.
pub fn robot_fk(angles: &Tensor<f32>, links: &[f32]) -> Result<Tensor<f32>> {
    if angles.numel() != links.len() {
        return Err(Error::dim(format!(
            "{} joint angles for {} links",
            angles.numel(),
            links.len()
        )));
    }
    let a: Vec<f64> = angles.data().iter().map(|&x| x as f64).collect();
    let l: Vec<f64> = links.iter().map(|&x| x as f64).collect();
    let kp = fk(&a, &l);
    Tensor::new(
        &[kp.len(), 3],
        kp.iter()
            .flat_map(|p| p.iter().map(|&x| x as f32))
            .collect(),
    )
}

/// Joint angles placing the tool tip near `target`, with the last link
/// pointing straight down. Assumes six links whose even joints (after the
/// base yaw) stay at zero, so the arm moves in one vertical plane.
pub fn solve_tool_position(target: V3, links: &[f64]) -> Vec<f64> {
    let (l0, a, b, tool) = (links[0], links[1] + links[2], links[3] + links[4], links[5]);
    let yaw = target[1].atan2(target[0]);
    let r = (target[0] * target[0] + target[1] * target[1]).sqrt();
    let (wr, wz) = (r - l0, target[2] + tool);
    let reach_min = (a - b).abs() + 1e-3;
    let reach_max = a + b - 1e-3;
    let dist = (wr * wr + wz * wz).sqrt().clamp(reach_min, reach_max);
    let cos_q = ((dist * dist - a * a - b * b) / (2.0 * a * b)).clamp(-1.0, 1.0);
    let q = cos_q.acos();
    let base = wz.atan2(wr);
    let e1 = base + (b * q.sin()).atan2(a + b * q.cos());
    let e2 = e1 - q;
    // pitch joints rotate by -elevation
    let (p1, p3, p5) = (-e1, -e2, std::f64::consts::FRAC_PI_2);
    vec![yaw, p1, 0.0, p3 - p1, 0.0, p5 - p3]
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINKS: [f64; 6] = [0.10, 0.25, 0.15, 0.20, 0.15, 0.12];

    #[test]
    fn zero_angles_lie_on_x() {
        let kp = fk(&[0.0; 6], &LINKS);
        let mut acc = 0.0;
        for (i, p) in kp.iter().enumerate() {
            assert!((p[0] - acc).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.0);
            if i < LINKS.len() {
                acc += LINKS[i];
            }
        }
    }

    #[test]
    fn solver_hits_reachable_targets() {
        for target in [
            [0.5, 0.0, 0.35],
            [0.3, -0.3, 0.05],
            [0.6, 0.1, 0.3],
            [0.25, 0.0, 0.35],
        ] {
            let q = solve_tool_position(target, &LINKS);
            let ee = *fk(&q, &LINKS).last().unwrap();
            let err: f64 = (0..3)
                .map(|k| (ee[k] - target[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err < 1e-9, "{target:?} -> {ee:?}");
        }
    }
}
