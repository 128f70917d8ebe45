//! Procedural human-robot collaboration trials.
//!
//! The robot runs a waypoint program per segment (pick/place, handover,
//! intrusion into the shared space, idle). The human reacts with a lag of
//! 30-50 frames: reaching to the free side of the table, taking the part at
//! the handover pose, or retracting and leaning back when the arm comes in.
//! A smooth repulsion field keeps the torso away from the end-effector at all
//! times. Rest poses are shared across trials, so similar observations can be
//! followed by different modes.

pub mod human;
mod io;
pub mod robot;
mod windows;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{decode, encode, read_dataset, write_dataset, DatasetFile, HRCD_MAGIC, HRCD_VERSION};
pub use robot::robot_fk;
pub use windows::{find_similar, split_trials, window_samples, DatasetSplit, WindowRef, Windows};

use crate::error::{Error, Result};
use crate::motion::{Agent, MotionSequence, FRAME_RATE};
use crate::nn::Tensor;
use human::{HumanParams, NUM_JOINTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Reach = 0,
    Handover = 1,
    Avoid = 2,
    Idle = 3,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Reach, Mode::Handover, Mode::Avoid, Mode::Idle];

    pub fn from_u8(v: u8) -> Option<Mode> {
        Mode::ALL.get(v as usize).copied()
    }
}

/// Frames `start..end` of a trial follow one mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: u32,
    pub end: u32,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub j: usize,
    pub k: usize,
    pub link_lengths: Vec<f64>,
    pub trial_length: usize,
    pub num_trials: usize,
    /// Probabilities of reach, handover, avoid, idle.
    pub mode_probs: [f64; 4],
    pub noise_scale: f64,
    pub seed: u64,
    pub history: usize,
    pub horizon: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            j: NUM_JOINTS,
            k: 7,
            link_lengths: vec![0.10, 0.25, 0.15, 0.20, 0.15, 0.12],
            trial_length: 1800,
            num_trials: 32,
            mode_probs: [0.3, 0.3, 0.2, 0.2],
            noise_scale: 0.01,
            seed: 0,
            history: 30,
            horizon: 120,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.j != NUM_JOINTS {
            return Err(Error::config(format!(
                "the skeleton has {NUM_JOINTS} joints, got j={}",
                self.j
            )));
        }
        if self.k != 7 || self.link_lengths.len() != self.k - 1 {
            return Err(Error::config(format!(
                "the robot chain has 7 keypoints and 6 links, got k={} with {} links",
                self.k,
                self.link_lengths.len()
            )));
        }
        if self
            .link_lengths
            .iter()
            .any(|&l| !(l.is_finite() && l > 0.0))
        {
            return Err(Error::config("link lengths must be positive"));
        }
        let total: f64 = self.mode_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.mode_probs.iter().any(|&p| p < 0.0) {
            return Err(Error::config(format!(
                "mode_probs must sum to 1, got {total}"
            )));
        }
        if self.history == 0 || self.trial_length < self.history + self.horizon {
            return Err(Error::config(format!(
                "trial_length {} shorter than history + horizon = {}",
                self.trial_length,
                self.history + self.horizon
            )));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::config("noise_scale must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub human: MotionSequence,
    pub robot: MotionSequence,
    pub segments: Vec<Segment>,
}

impl Trial {
    pub fn len(&self) -> usize {
        self.human.len()
    }

    pub fn is_empty(&self) -> bool {
        self.human.is_empty()
    }

    pub fn mode_at(&self, frame: usize) -> Option<Mode> {
        self.segments
            .iter()
            .find(|s| (s.start as usize) <= frame && frame < s.end as usize)
            .map(|s| s.mode)
    }

    /// Mode covering the most frames of `start..end` (earliest wins ties).
    pub fn dominant_mode(&self, start: usize, end: usize) -> Option<Mode> {
        let mut best: Option<(usize, Mode)> = None;
        for s in &self.segments {
            let a = start.max(s.start as usize);
            let b = end.min(s.end as usize);
            if b > a && best.is_none_or(|(n, _)| b - a > n) {
                best = Some((b - a, s.mode));
            }
        }
        best.map(|(_, m)| m)
    }
}

/// Seed of trial `index` derived from the master seed (order independent).
pub fn trial_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64 + 1))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keyframed vector signal with minimum-jerk blends between keys.
#[derive(Clone, Debug, Default)]
struct Track {
    keys: Vec<(f64, Vec<f64>)>,
}

impl Track {
    fn key(&mut self, frame: f64, value: Vec<f64>) {
        if let Some((last, _)) = self.keys.last() {
            debug_assert!(frame >= *last);
        }
        self.keys.push((frame, value));
    }

    fn last_value(&self) -> &[f64] {
        &self.keys.last().expect("track has a key").1
    }

    fn at(&self, frame: f64) -> Vec<f64> {
        let i = self.keys.partition_point(|(f, _)| *f <= frame);
        if i == 0 {
            return self.keys[0].1.clone();
        }
        if i == self.keys.len() {
            return self.keys[i - 1].1.clone();
        }
        let (f0, a) = &self.keys[i - 1];
        let (f1, b) = &self.keys[i];
        let tau = ((frame - f0) / (f1 - f0).max(1e-9)).clamp(0.0, 1.0);
        let s = tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau);
        a.iter().zip(b).map(|(x, y)| x + (y - x) * s).collect()
    }
}

/// Sum of three sinusoids per channel, amplitude at most `scale`.
struct SmoothNoise {
    terms: Vec<[(f64, f64, f64); 3]>,
}

impl SmoothNoise {
    fn new(rng: &mut ChaCha8Rng, channels: usize, scale: f64) -> Self {
        let terms = (0..channels)
            .map(|_| {
                std::array::from_fn(|_| {
                    let amp = scale / 3.0 * rng.random_range(0.5..1.0);
                    let freq =
                        rng.random_range(0.2..1.0) * std::f64::consts::TAU / FRAME_RATE as f64;
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    (amp, freq, phase)
                })
            })
            .collect();
        SmoothNoise { terms }
    }

    fn at(&self, channel: usize, frame: f64) -> f64 {
        self.terms[channel]
            .iter()
            .map(|(a, w, p)| a * (w * frame + p).sin())
            .sum()
    }
}

fn sample_mode(rng: &mut ChaCha8Rng, probs: &[f64; 4]) -> Mode {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (m, p) in Mode::ALL.iter().zip(probs) {
        acc += p;
        if u < acc {
            return *m;
        }
    }
    Mode::Idle
}

const HOME_EE: [f64; 3] = [0.25, 0.0, 0.35];

fn table_point(rng: &mut ChaCha8Rng, side: f64) -> [f64; 3] {
    let r = rng.random_range(0.30..0.50);
    let yaw = side * rng.random_range(0.35..1.0);
    [
        r * f64::cos(yaw),
        r * f64::sin(yaw),
        rng.random_range(0.02..0.10),
    ]
}

/// Build a trial. Deterministic in `(cfg, seed)`.
pub fn generate_trial(cfg: &ScenarioConfig, seed: u64) -> Result<Trial> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let links = &cfg.link_lengths;
    let len = cfg.trial_length;
    let rest = human::rest_params();
    // where this subject stands; poses are built around the nominal stance
    // and shifted by this offset
    let stance = [
        rng.random_range(-0.06..0.06),
        rng.random_range(-0.15..0.15),
        0.0,
    ];

    let mut robot_track = Track::default();
    let mut human_track = Track::default();
    let home = robot::solve_tool_position(HOME_EE, links);
    robot_track.key(0.0, home.clone());
    human_track.key(0.0, rest.to_vec());

    // Human keys that depend on the robot's realised end-effector position
    // are resolved after the robot track is complete.
    let mut handovers: Vec<(f64, f64, f64, f64)> = Vec::new();

    let mut segments = Vec::new();
    let mut start = 0usize;
    while start < len {
        let seg_len = rng.random_range(210..=260usize);
        let end = (start + seg_len).min(len);
        let mode = sample_mode(&mut rng, &cfg.mode_probs);
        segments.push(Segment {
            start: start as u32,
            end: end as u32,
            mode,
        });
        let s = start as f64;
        let r0 = s + rng.random_range(10.0..30.0);
        let lag = rng.random_range(30.0..50.0);
        match mode {
            Mode::Reach => {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let pick = robot::solve_tool_position(table_point(&mut rng, side), links);
                let place = robot::solve_tool_position(table_point(&mut rng, side), links);
                let t1 = r0 + rng.random_range(45.0..55.0);
                robot_track.key(r0, home.clone());
                robot_track.key(t1, pick);
                robot_track.key(t1 + 15.0, robot_track.last_value().to_vec());
                let t2 = t1 + 15.0 + rng.random_range(35.0..50.0);
                robot_track.key(t2, place);
                robot_track.key(t2 + 10.0, robot_track.last_value().to_vec());
                robot_track.key(t2 + 55.0, home.clone());

                // the human works on the side the robot leaves free
                let hand = -side;
                let target = [
                    rng.random_range(0.50..0.62),
                    hand * rng.random_range(0.12..0.32),
                    rng.random_range(0.0..0.10),
                ];
                let mut p = rest;
                p.lean = rng.random_range(0.30..0.45);
                if hand > 0.0 {
                    p.right_wrist = target;
                } else {
                    p.left_wrist = target;
                }
                let h0 = r0 + lag;
                let h1 = h0 + rng.random_range(50.0..70.0);
                let h2 = h1 + rng.random_range(20.0..40.0);
                human_track.key(h0, rest.to_vec());
                human_track.key(h1, p.to_vec());
                human_track.key(h2, p.to_vec());
                human_track.key(h2 + 50.0, rest.to_vec());
            }
            Mode::Handover => {
                let spot = [
                    stance[0] + rng.random_range(0.48..0.58),
                    stance[1] + rng.random_range(-0.05..0.20),
                    rng.random_range(0.28..0.42),
                ];
                let ta = r0 + 60.0;
                let th = ta + lag;
                let release = th + 20.0;
                robot_track.key(r0, home.clone());
                robot_track.key(ta, robot::solve_tool_position(spot, links));
                robot_track.key(release, robot_track.last_value().to_vec());
                robot_track.key(release + 45.0, home.clone());
                handovers.push((r0 + lag, th, release + 10.0, rng.random_range(0.15..0.25)));
                human_track.key(r0 + lag, rest.to_vec());
                // placeholder, replaced once the end-effector is known
                human_track.key(th, rest.to_vec());
                human_track.key(release + 10.0, rest.to_vec());
                human_track.key(release + 60.0, rest.to_vec());
            }
            Mode::Avoid => {
                let torso = human::pose(&rest)[human::TORSO];
                let target = [
                    torso[0] + stance[0] - rng.random_range(0.17..0.24),
                    torso[1] + stance[1] + rng.random_range(-0.10..0.10),
                    torso[2] - rng.random_range(0.0..0.08),
                ];
                let t1 = r0 + rng.random_range(55.0..70.0);
                robot_track.key(r0, home.clone());
                robot_track.key(t1, robot::solve_tool_position(target, links));
                let hold = t1 + rng.random_range(15.0..30.0);
                robot_track.key(hold, robot_track.last_value().to_vec());
                robot_track.key(hold + 50.0, home.clone());

                let mut p = rest;
                p.lean = -rng.random_range(0.10..0.18);
                let tuck = rng.random_range(0.10..0.14);
                p.right_wrist = [0.74, tuck, 0.30];
                p.left_wrist = [0.74, -tuck, 0.30];
                let h0 = r0 + lag;
                human_track.key(h0, rest.to_vec());
                human_track.key(h0 + 45.0, p.to_vec());
                human_track.key(hold + lag * 0.5, p.to_vec());
                human_track.key(hold + lag * 0.5 + 50.0, rest.to_vec());
            }
            Mode::Idle => {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut ee = HOME_EE;
                ee[1] += side * rng.random_range(0.05..0.12);
                ee[2] += rng.random_range(-0.05..0.05);
                let t1 = r0 + rng.random_range(60.0..90.0);
                robot_track.key(r0, home.clone());
                robot_track.key(t1, robot::solve_tool_position(ee, links));
                robot_track.key(t1 + 60.0, home.clone());
                let mut p = rest;
                p.lean = rng.random_range(-0.02..0.03);
                human_track.key(r0 + lag, rest.to_vec());
                human_track.key(r0 + lag + 60.0, p.to_vec());
                human_track.key(r0 + lag + 120.0, rest.to_vec());
            }
        }
        start = end;
    }

    let human_noise = SmoothNoise::new(&mut rng, 3 * NUM_JOINTS, cfg.noise_scale / 3f64.sqrt());
    let robot_noise = SmoothNoise::new(&mut rng, links.len(), cfg.noise_scale);

    let robot_frames: Vec<Vec<[f64; 3]>> = (0..len)
        .map(|f| {
            let mut q = robot_track.at(f as f64);
            for (i, qi) in q.iter_mut().enumerate() {
                *qi += robot_noise.at(i, f as f64);
            }
            robot::fk(&q, links)
        })
        .collect();
    let ee_at = |f: f64| {
        *robot_frames[(f.round() as usize).min(len - 1)]
            .last()
            .expect("chain")
    };

    // resolve handover keys: wrist meets the end-effector at the handover instant
    for (start_f, th, hold_end, lean) in handovers {
        let ee = ee_at(th);
        if let Some(idx) = human_track
            .keys
            .iter()
            .position(|(f, _)| *f == th && *f > start_f)
        {
            let mut p = rest;
            p.lean = lean;
            p.right_wrist = [ee[0] - stance[0], ee[1] - stance[1], ee[2]];
            human_track.keys[idx].1 = p.to_vec();
            if let Some(k2) = human_track.keys.iter().position(|(f, _)| *f == hold_end) {
                human_track.keys[k2].1 = p.to_vec();
            }
        }
    }

    let mut human_data = Vec::with_capacity(len * 3 * NUM_JOINTS);
    let mut robot_data = Vec::with_capacity(len * 3 * cfg.k);
    for (f, kp) in robot_frames.iter().enumerate() {
        let p = HumanParams::from_slice(&human_track.at(f as f64));
        let mut joints = human::pose(&p);
        for j in joints.iter_mut() {
            j[0] += stance[0];
            j[1] += stance[1];
        }
        let ee = *kp.last().expect("chain");
        let push = human::repulsion(joints[human::TORSO], ee);
        for (ji, j) in joints.iter().enumerate() {
            for c in 0..3 {
                let v = j[c] + push[c] + human_noise.at(3 * ji + c, f as f64);
                human_data.push(v as f32);
            }
        }
        for p in kp {
            robot_data.extend(p.iter().map(|&x| x as f32));
        }
    }

    Ok(Trial {
        human: MotionSequence::new(
            Tensor::new(&[len, 3 * NUM_JOINTS], human_data)?,
            Agent::Human,
        )?,
        robot: MotionSequence::new(Tensor::new(&[len, 3 * cfg.k], robot_data)?, Agent::Robot)?,
        segments,
    })
}

/// All trials of a scenario, generated in parallel from derived seeds.
pub fn generate_dataset(cfg: &ScenarioConfig) -> Result<Vec<Trial>> {
    cfg.validate()?;
    crate::exec::try_map_indexed(cfg.num_trials, |i| {
        generate_trial(cfg, trial_seed(cfg.seed, i))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            trial_length: 900,
            num_trials: 2,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let cfg = small();
        assert_eq!(
            generate_trial(&cfg, 5).unwrap(),
            generate_trial(&cfg, 5).unwrap()
        );
        assert_ne!(
            generate_trial(&cfg, 5).unwrap(),
            generate_trial(&cfg, 6).unwrap()
        );
    }

    #[test]
    fn short_trials_rejected() {
        let cfg = ScenarioConfig {
            trial_length: 149,
            ..ScenarioConfig::default()
        };
        assert!(matches!(generate_trial(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn segments_tile_the_trial() {
        let t = generate_trial(&small(), 1).unwrap();
        assert_eq!(t.segments[0].start, 0);
        assert_eq!(t.segments.last().unwrap().end as usize, t.len());
        for w in t.segments.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }
}
