use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(pred: &[f32], gt: &[f32], dim: usize) -> Result<usize> {
    if dim == 0 || pred.len() != gt.len() || !pred.len().is_multiple_of(dim) || pred.is_empty() {
        return Err(Error::dim(format!(
            "metric inputs: {} vs {} values, pose dim {dim}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.len() / dim)
}

fn frame_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean over frames of the L2 distance between `[F, dim]` pose sequences.
pub fn ade(pred: &[f32], gt: &[f32], dim: usize) -> Result<f64> {
    let f = check(pred, gt, dim)?;
    let s: f64 = pred
        .chunks(dim)
        .zip(gt.chunks(dim))
        .map(|(a, b)| frame_dist(a, b))
        .sum();
    Ok(s / f as f64)
}

/// L2 distance of the last frame.
pub fn fde(pred: &[f32], gt: &[f32], dim: usize) -> Result<f64> {
    let f = check(pred, gt, dim)?;
    let at = (f - 1) * dim;
    Ok(frame_dist(&pred[at..], &gt[at..]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseMetric {
    Ade,
    Fde,
}

impl BaseMetric {
    pub fn eval(self, pred: &[f32], gt: &[f32], dim: usize) -> Result<f64> {
        match self {
            BaseMetric::Ade => ade(pred, gt, dim),
            BaseMetric::Fde => fde(pred, gt, dim),
        }
    }
}

/// Mean of `base(pred, gt)` over the futures of a similarity set.
pub fn mm_metric(pred: &[f32], similar: &[&[f32]], dim: usize, base: BaseMetric) -> Result<f64> {
    if similar.is_empty() {
        return Err(Error::usage(
            "multi-modal metric needs a non-empty similarity set",
        ));
    }
    let mut s = 0.0;
    for gt in similar {
        s += base.eval(pred, gt, dim)?;
    }
    Ok(s / similar.len() as f64)
}

/// Best, median and worst of a sample of metric values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bmw {
    pub best: f64,
    pub median: f64,
    pub worst: f64,
}

pub fn bmw(values: &[f64]) -> Result<Bmw> {
    if values.is_empty() {
        return Err(Error::usage("best/median/worst of an empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    Ok(Bmw {
        best: v[0],
        median,
        worst: v[n - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets() {
        let gt = vec![0.0f32; 4 * 6];
        let pred = vec![0.1f32; 4 * 6];
        let want = 0.1 * 6f64.sqrt();
        assert!((ade(&pred, &gt, 6).unwrap() - want).abs() < 1e-6);
        let mut last = gt.clone();
        last[18..].iter_mut().for_each(|v| *v = 0.1);
        assert!((fde(&last, &gt, 6).unwrap() - want).abs() < 1e-6);
        assert!((ade(&last, &gt, 6).unwrap() - want / 4.0).abs() < 1e-6);
        assert!(ade(&pred[..5], &gt[..5], 6).is_err());
    }

    #[test]
    fn bmw_cases() {
        let b = bmw(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((b.best, b.median, b.worst), (1.0, 2.0, 3.0));
        let b = bmw(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((b.best, b.median, b.worst), (1.0, 2.5, 4.0));
        let b = bmw(&[7.0]).unwrap();
        assert_eq!((b.best, b.median, b.worst), (7.0, 7.0, 7.0));
        assert!(bmw(&[]).is_err());
    }

    #[test]
    fn mm_reduces_to_base() {
        let p = [1.0f32, 2.0, 3.0];
        let g = [0.0f32, 2.0, 3.0];
        let single = mm_metric(&p, &[&g], 3, BaseMetric::Ade).unwrap();
        assert_eq!(single, ade(&p, &g, 3).unwrap());
        assert_eq!(
            mm_metric(&p, &[&g, &g], 3, BaseMetric::Ade).unwrap(),
            single
        );
        assert!(mm_metric(&p, &[], 3, BaseMetric::Fde).is_err());
    }
}
