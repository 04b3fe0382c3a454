//! Dice overlap, accuracy, learning curves and area under them.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Mask};
use crate::error::{Error, Result};
use crate::nn::ModelBundle;
use crate::probe::{binarize_topn, probe, ProbeMethod};
use crate::Scalar;

/// `2|a ∩ b| / (|a| + |b|)`; two empty masks agree perfectly.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(&[labels.len()], &[predictions.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Argument("accuracy of an empty set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretabilityReport {
    pub mean_dice: f64,
    /// `(sample id, Dice)` for every scored sample.
    pub per_sample: Vec<(String, f64)>,
    /// Samples skipped for lacking a usable ground-truth mask.
    pub excluded: usize,
}

/// Mean Dice between each test sample's ground-truth mask and the model's
/// saliency for the true class, binarized to the ground-truth area.
pub fn interpretability_score<T: Scalar, M: ModelBundle<T> + ?Sized>(
    model: &M,
    test: &Dataset,
    method: ProbeMethod,
) -> Result<InterpretabilityReport> {
    let mut per_sample = Vec::with_capacity(test.len());
    let mut excluded = 0;
    for sample in test.samples() {
        let Some(gt) = sample.human_mask() else {
            excluded += 1;
            continue;
        };
        let n = gt.iter().filter(|&&b| b).count();
        if n == 0 {
            excluded += 1;
            continue;
        }
        let map = probe(model, &sample.image, sample.label, method)?;
        let mask = binarize_topn(map.upsampled().view(), n)?;
        per_sample.push((sample.id.clone(), dice(&mask, gt)?));
    }
    if excluded > 0 {
        log::warn!("{excluded} test samples without ground-truth masks excluded from Dice");
    }
    let mean_dice = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().map(|(_, d)| d).sum::<f64>() / per_sample.len() as f64
    };
    Ok(InterpretabilityReport {
        mean_dice,
        per_sample,
        excluded,
    })
}

/// One point of a run's learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub budget_fraction: f64,
    pub accuracy: f64,
    pub mean_dice: f64,
    pub human_annotation_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveField {
    Accuracy,
    MeanDice,
}

impl CurvePoint {
    pub fn get(&self, field: CurveField) -> f64 {
        match field {
            CurveField::Accuracy => self.accuracy,
            CurveField::MeanDice => self.mean_dice,
        }
    }
}

/// Trapezoidal area under `(x, y)` divided by the x-span, so a constant
/// curve integrates to its value.
pub fn normalized_trapezoid(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape(&[xs.len()], &[ys.len()]));
    }
    if xs.len() < 2 {
        return Err(Error::Argument("area under a curve needs at least two points".into()));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("curve x values must be strictly increasing".into()));
    }
    let area: f64 = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum();
    Ok(area / (xs[xs.len() - 1] - xs[0]))
}

/// Area under the learning curve over budget, normalised by the run's own
/// budget span.
pub fn aulc(points: &[CurvePoint], field: CurveField) -> Result<f64> {
    let xs: Vec<f64> = points.iter().map(|p| p.budget_fraction).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.get(field)).collect();
    normalized_trapezoid(&xs, &ys)
}

/// Mean and sample standard deviation (`n − 1`); std is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dice_edge_cases() {
        let a = array![[true, true], [true, true]];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = array![[true, true], [false, false]];
        let c = array![[false, false], [true, true]];
        assert_eq!(dice(&b, &c).unwrap(), 0.0);
        let empty = Mask::from_elem((2, 2), false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&empty, &b).unwrap(), 0.0);
        assert!(dice(&a, &Mask::from_elem((1, 2), true)).is_err());
    }

    #[test]
    fn dice_half_overlap() {
        let a = Mask::from_shape_fn((2, 4), |(y, _)| y == 0);
        let b = Mask::from_shape_fn((2, 4), |(y, x)| (y == 0 && x < 2) || (y == 1 && x < 2));
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 3], &[0, 1, 2, 3]).unwrap(), 0.75);
    }

    fn curve(points: &[(f64, f64)]) -> Vec<CurvePoint> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(b, y))| CurvePoint {
                iteration: i,
                budget_fraction: b,
                accuracy: y,
                mean_dice: y,
                human_annotation_fraction: 0.0,
            })
            .collect()
    }

    #[test]
    fn aulc_constant_and_linear() {
        let c = curve(&[(0.1, 0.7), (0.35, 0.7), (0.4, 0.7)]);
        assert!((aulc(&c, CurveField::Accuracy).unwrap() - 0.7).abs() < 1e-12);
        let l = curve(&[(0.05, 0.2), (0.45, 0.8)]);
        assert!((aulc(&l, CurveField::MeanDice).unwrap() - 0.5).abs() < 1e-12);
        assert!(aulc(&c[..1], CurveField::Accuracy).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }
}
