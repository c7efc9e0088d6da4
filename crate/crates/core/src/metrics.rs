//! Angular error statistics for normal maps.

use serde::{Deserialize, Serialize};

use crate::grid::{dot, norm, Image, Mask, NormalMap};
use crate::{Error, Result};

/// Accuracy thresholds in degrees. A pixel counts when its error is strictly
/// below the threshold.
pub const THRESHOLDS: [f64; 3] = [11.25, 22.5, 30.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalMetrics {
    pub mean: f64,
    pub median: f64,
    pub rmse: f64,
    pub acc_1125: f64,
    pub acc_225: f64,
    pub acc_30: f64,
    pub n_valid: usize,
}

/// Per-pixel angle between `pred` and `gt` in degrees; `NaN` outside `mask`.
///
/// Inputs need not be unit length.
pub fn angular_error_map(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<Image> {
    gt.expect_dims("ground truth", pred.height(), pred.width())?;
    mask.expect_dims("mask", pred.height(), pred.width())?;
    let data = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask.data())
        .map(|((&a, &b), &m)| if m { angle_deg(a, b) } else { f64::NAN })
        .collect();
    Image::from_vec(pred.height(), pred.width(), 1, data)
}

/// `atan2(‖a×b‖, a·b)`, which stays accurate near 0° and 180° where
/// `arccos` of the clamped cosine loses digits.
fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let c = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    norm(c).atan2(dot(a, b)).to_degrees()
}

pub fn summarize(errors: &Image, mask: &Mask) -> Result<NormalMetrics> {
    mask.expect_dims("mask", errors.height(), errors.width())?;
    let mut v: Vec<f64> = errors
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|(&e, _)| e)
        .collect();
    summarize_values(&mut v)
}

/// Statistics of a list of angular errors (sorted in place, so the sums do not
/// depend on the input order).
pub fn summarize_values(errors: &mut [f64]) -> Result<NormalMetrics> {
    if errors.is_empty() {
        return Err(Error::EmptyMask);
    }
    errors.sort_by(f64::total_cmp);
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let acc = |t: f64| errors.iter().filter(|&&e| e < t).count() as f64 / n;
    let (acc_1125, acc_225, acc_30) = (acc(THRESHOLDS[0]), acc(THRESHOLDS[1]), acc(THRESHOLDS[2]));
    let k = errors.len();
    let median = if k % 2 == 1 {
        errors[k / 2]
    } else {
        0.5 * (errors[k / 2 - 1] + errors[k / 2])
    };
    Ok(NormalMetrics {
        mean,
        median,
        rmse,
        acc_1125,
        acc_225,
        acc_30,
        n_valid: k,
    })
}

pub fn evaluate(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<NormalMetrics> {
    summarize(&angular_error_map(pred, gt, mask)?, mask)
}

/// Mean angular error in degrees over `mask`.
pub fn mean_angular_error(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<f64> {
    gt.expect_dims("ground truth", pred.height(), pred.width())?;
    mask.expect_dims("mask", pred.height(), pred.width())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for ((&a, &b), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if m {
            sum += angle_deg(a, b);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VectorField;

    fn errs(v: &[f64]) -> NormalMetrics {
        summarize_values(&mut v.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_set() {
        let m = errs(&[20.0, 0.0, 10.0]);
        assert_eq!(m.mean, 10.0);
        assert_eq!(m.median, 10.0);
        assert!((m.rmse - (500.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((m.acc_1125 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.n_valid, 3);
    }

    #[test]
    fn zeros_are_perfect() {
        let m = errs(&[0.0; 5]);
        assert_eq!((m.mean, m.median, m.rmse), (0.0, 0.0, 0.0));
        assert_eq!((m.acc_1125, m.acc_225, m.acc_30), (1.0, 1.0, 1.0));
    }

    #[test]
    fn thresholds_are_strict() {
        assert_eq!(errs(&[30.0]).acc_30, 0.0);
        assert_eq!(errs(&[11.25]).acc_1125, 0.0);
        assert_eq!(errs(&[11.25]).acc_225, 1.0);
    }

    #[test]
    fn even_count_median() {
        assert_eq!(errs(&[4.0, 1.0, 3.0, 2.0]).median, 2.5);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(summarize_values(&mut []), Err(Error::EmptyMask)));
        let e = Image::zeros(2, 2, 1);
        assert!(summarize(&e, &Mask::filled(2, 2, false)).is_err());
    }

    #[test]
    fn error_map_examples() {
        let gt = VectorField::filled(1, 3, [0.0, 0.0, 1.0]);
        let t = 11.25f64.to_radians();
        let pred = VectorField::from_vec(
            1,
            3,
            vec![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [t.sin(), 0.0, t.cos()]],
        )
        .unwrap();
        let mask = Mask::from_vec(1, 3, vec![true, true, true]).unwrap();
        let e = angular_error_map(&pred, &gt, &mask).unwrap();
        assert_eq!(e.data()[0], 0.0);
        assert_eq!(e.data()[1], 180.0);
        assert_eq!(e.data()[2], 11.25);
        assert_eq!(
            summarize(&e, &Mask::from_vec(1, 3, vec![false, false, true]).unwrap())
                .unwrap()
                .acc_1125,
            0.0
        );
        let partial = Mask::from_vec(1, 3, vec![true, false, true]).unwrap();
        assert!(angular_error_map(&pred, &gt, &partial).unwrap().data()[1].is_nan());
    }
}
