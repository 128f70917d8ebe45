use serde::{Deserialize, Serialize};

use super::{Mode, Trial};
use crate::error::{Error, Result};
use crate::exec;

/// Window starting at frame `start` of trial `trial`: observation
/// `start..start+T`, future `start+T..start+T+F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub trial: usize,
    pub start: usize,
}

/// Sliding windows borrowed from a set of trials.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    pub trials: &'a [Trial],
    pub history: usize,
    pub horizon: usize,
    pub items: Vec<WindowRef>,
}

impl<'a> Windows<'a> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn human(&self, i: usize, from: usize, to: usize) -> &'a [f32] {
        let w = self.items[i];
        let t = &self.trials[w.trial].human;
        let d = t.dim();
        &t.values.data()[(w.start + from) * d..(w.start + to) * d]
    }

    /// `[T, 3J]` observed human frames.
    pub fn obs_human(&self, i: usize) -> &'a [f32] {
        self.human(i, 0, self.history)
    }

    /// `[F, 3J]` future human frames.
    pub fn future_human(&self, i: usize) -> &'a [f32] {
        self.human(i, self.history, self.history + self.horizon)
    }

    /// `[T+F, 3J]` observation followed by the future.
    pub fn full_human(&self, i: usize) -> &'a [f32] {
        self.human(i, 0, self.history + self.horizon)
    }

    /// `[T, 3K]` observed robot keypoints.
    pub fn obs_robot(&self, i: usize) -> &'a [f32] {
        let w = self.items[i];
        let r = &self.trials[w.trial].robot;
        let d = r.dim();
        &r.values.data()[w.start * d..(w.start + self.history) * d]
    }

    pub fn last_observed(&self, i: usize) -> &'a [f32] {
        self.human(i, self.history - 1, self.history)
    }

    pub fn future_mode(&self, i: usize) -> Mode {
        let w = self.items[i];
        let a = w.start + self.history;
        self.trials[w.trial]
            .dominant_mode(a, a + self.horizon)
            .unwrap_or(Mode::Idle)
    }

    pub fn human_dim(&self) -> usize {
        self.trials.first().map_or(0, |t| t.human.dim())
    }

    pub fn robot_dim(&self) -> usize {
        self.trials.first().map_or(0, |t| t.robot.dim())
    }
}

/// Windows over the trials listed in `trial_ids`, in order. Trials shorter
/// than `T+F` contribute nothing.
pub fn window_samples<'a>(
    trials: &'a [Trial],
    trial_ids: &[usize],
    history: usize,
    horizon: usize,
    stride: usize,
) -> Result<Windows<'a>> {
    if history == 0 || stride == 0 {
        return Err(Error::config("history and stride must be >= 1"));
    }
    let span = history + horizon;
    let mut items = Vec::new();
    for &ti in trial_ids {
        let t = trials
            .get(ti)
            .ok_or_else(|| Error::usage(format!("trial {ti} out of range")))?;
        if t.len() < span {
            continue;
        }
        items.extend(
            (0..=t.len() - span)
                .step_by(stride)
                .map(|start| WindowRef { trial: ti, start }),
        );
    }
    Ok(Windows {
        trials,
        history,
        horizon,
        items,
    })
}

/// For every window, the windows whose last observed human frame lies within
/// `threshold` (L2 over the whole pose vector). Each set contains the window
/// itself and is sorted.
pub fn find_similar(windows: &Windows<'_>, threshold: f64) -> Result<Vec<Vec<usize>>> {
    if !(threshold > 0.0) {
        return Err(Error::usage(format!(
            "similarity threshold must be > 0, got {threshold}"
        )));
    }
    let n = windows.len();
    let last: Vec<&[f32]> = (0..n).map(|i| windows.last_observed(i)).collect();
    let t2 = threshold * threshold;
    Ok(exec::map_indexed(n, |i| {
        (0..n)
            .filter(|&j| {
                let d2: f64 = last[i]
                    .iter()
                    .zip(last[j])
                    .map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum();
                d2 < t2
            })
            .collect()
    }))
}

/// Trial indices for training, validation and testing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Contiguous 24:4:4 split (train first, then validation, then test).
pub fn split_trials(n: usize) -> Result<DatasetSplit> {
    if n < 3 {
        return Err(Error::DegenerateData(format!(
            "need at least 3 trials to split, got {n}"
        )));
    }
    let held = ((n as f64) / 8.0).round().max(1.0) as usize;
    let train = n - 2 * held;
    Ok(DatasetSplit {
        train: (0..train).collect(),
        val: (train..train + held).collect(),
        test: (train + held..n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{Agent, MotionSequence};
    use crate::synth::Segment;

    fn trial(len: usize) -> Trial {
        Trial {
            human: MotionSequence::from_frames(
                (0..len * 3).map(|i| i as f32).collect(),
                3,
                Agent::Human,
            )
            .unwrap(),
            robot: MotionSequence::from_frames(
                (0..len * 3).map(|i| -(i as f32)).collect(),
                3,
                Agent::Robot,
            )
            .unwrap(),
            segments: vec![Segment {
                start: 0,
                end: len as u32,
                mode: Mode::Reach,
            }],
        }
    }

    #[test]
    fn window_counts() {
        let ts = vec![trial(150), trial(159)];
        assert_eq!(window_samples(&ts, &[0], 30, 120, 1).unwrap().len(), 1);
        assert_eq!(window_samples(&ts, &[1], 30, 120, 1).unwrap().len(), 10);
        assert_eq!(window_samples(&ts, &[0, 1], 30, 120, 1).unwrap().len(), 11);
    }

    #[test]
    fn windows_are_aligned() {
        let ts = vec![trial(160)];
        let w = window_samples(&ts, &[0], 30, 120, 5).unwrap();
        assert_eq!(w.obs_human(2)[0], 30.0);
        assert_eq!(w.obs_robot(2)[0], -30.0);
        assert_eq!(w.future_human(2)[0], (40 * 3) as f32);
    }

    #[test]
    fn split_proportions() {
        let s = split_trials(32).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (24, 4, 4));
        assert!(split_trials(2).is_err());
    }
}
