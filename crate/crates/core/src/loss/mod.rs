//! Saliency-guided training objective.
//!
//! Per sample the loss is `(1 − α)·L_s(human, model) − α·log p(true class)`
//! where `L_s = (1 − SSIM) + mean |human − model|`. Samples without a mask
//! contribute only the classification term.

mod ssim;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

pub use ssim::{ssim, ssim_with_grad};

/// Probability floor for the log; hits are counted, not fatal.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the classification term; `1 − alpha` weighs saliency.
    pub alpha: f64,
    pub ssim_window: usize,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub dynamic_range: f64,
    /// Use `SSIM + L1` instead of `(1 − SSIM) + L1`. Comparison only: this
    /// rewards structural dissimilarity.
    pub ssim_raw: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            ssim_window: 7,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            dynamic_range: 1.0,
            ssim_raw: false,
        }
    }
}

impl LossConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        LossConfig {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.ssim_window == 0 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!("ssim_window must be odd, got {}", self.ssim_window)));
        }
        Ok(())
    }
}

fn check_shapes<T: Scalar>(h: ArrayView2<T>, m: ArrayView2<T>) -> Result<()> {
    if h.dim() != m.dim() {
        return Err(Error::shape(h.shape(), m.shape()));
    }
    Ok(())
}

/// `(1 − SSIM(h, m)) + mean |h − m|` (or `SSIM + L1` when `ssim_raw`).
pub fn saliency_loss<T: Scalar>(human: ArrayView2<T>, model: ArrayView2<T>, config: &LossConfig) -> Result<T> {
    check_shapes(human, model)?;
    let s = ssim(human, model, config)?;
    let l1 = Zip::from(&human)
        .and(&model)
        .fold(T::zero(), |acc, &h, &m| acc + (h - m).abs())
        / T::from_usize_lossy(human.len());
    let structural = if config.ssim_raw { s } else { T::one() - s };
    Ok(structural + l1)
}

/// Saliency loss and its gradient with respect to the model map.
pub fn saliency_loss_with_grad<T: Scalar>(
    human: ArrayView2<T>,
    model: ArrayView2<T>,
    config: &LossConfig,
) -> Result<(T, Array2<T>)> {
    check_shapes(human, model)?;
    let (s, mut grad) = ssim_with_grad(human, model, config)?;
    if !config.ssim_raw {
        grad.mapv_inplace(|g| -g);
    }
    let n = T::from_usize_lossy(human.len());
    let mut l1 = T::zero();
    Zip::from(&mut grad).and(&human).and(&model).for_each(|g, &h, &m| {
        let d = m - h;
        l1 = l1 + d.abs();
        if d > T::zero() {
            *g = *g + T::one() / n;
        } else if d < T::zero() {
            *g = *g - T::one() / n;
        }
    });
    let structural = if config.ssim_raw { s } else { T::one() - s };
    Ok((structural + l1 / n, grad))
}

/// One sample's inputs to the batch loss.
#[derive(Debug, Clone, Copy)]
pub struct CyborgItem<'a, T> {
    /// Human (or AI) mask resampled to the model map's resolution.
    pub human: Option<ArrayView2<'a, T>>,
    /// Normalised model saliency for the sample's true class.
    pub model: ArrayView2<'a, T>,
    /// Model probability of the true class.
    pub true_prob: T,
}

/// Per-sample loss with the pieces the trainer needs to backpropagate.
#[derive(Debug, Clone)]
pub struct SampleLoss<T> {
    pub loss: T,
    pub saliency: Option<T>,
    pub cross_entropy: T,
    /// `∂loss/∂model_map`; `None` when the sample has no mask.
    pub grad_map: Option<Array2<T>>,
    /// `∂loss/∂log p(true class)`.
    pub grad_log_prob: T,
    pub clamped: bool,
}

pub fn cyborg_sample<T: Scalar>(item: &CyborgItem<'_, T>, config: &LossConfig, want_grad: bool) -> Result<SampleLoss<T>> {
    let alpha = T::lit(config.alpha);
    let floor = T::lit(PROB_FLOOR);
    let clamped = !(item.true_prob >= floor);
    let p = if clamped { floor } else { item.true_prob };
    let cross_entropy = -p.ln();
    let grad_log_prob = if clamped { T::zero() } else { -alpha };
    let mut loss = alpha * cross_entropy;
    let (saliency, grad_map) = match item.human {
        Some(h) => {
            let weight = T::one() - alpha;
            if want_grad {
                let (ls, mut g) = saliency_loss_with_grad(h, item.model, config)?;
                g.mapv_inplace(|v| v * weight);
                loss = loss + weight * ls;
                (Some(ls), Some(g))
            } else {
                let ls = saliency_loss(h, item.model, config)?;
                loss = loss + weight * ls;
                (Some(ls), None)
            }
        }
        None => (None, None),
    };
    Ok(SampleLoss {
        loss,
        saliency,
        cross_entropy,
        grad_map,
        grad_log_prob,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss<T> {
    pub value: T,
    /// Samples whose true-class probability hit the floor.
    pub clamped: usize,
}

/// Batch mean of the per-sample objective.
pub fn cyborg_loss<T: Scalar>(batch: &[CyborgItem<'_, T>], config: &LossConfig) -> Result<BatchLoss<T>> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut total = T::zero();
    let mut clamped = 0;
    for item in batch {
        let s = cyborg_sample(item, config, false)?;
        total = total + s.loss;
        clamped += s.clamped as usize;
    }
    if clamped > 0 {
        log::warn!("{clamped} true-class probabilities clamped to {PROB_FLOOR}");
    }
    Ok(BatchLoss {
        value: total / T::from_usize_lossy(batch.len()),
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn cfg(alpha: f64) -> LossConfig {
        LossConfig {
            alpha,
            ssim_window: 3,
            ..LossConfig::default()
        }
    }

    #[test]
    fn identical_maps_have_zero_saliency_loss() {
        let m = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64 / 15.0);
        assert!(saliency_loss(m.view(), m.view(), &cfg(0.5)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn alpha_one_is_cross_entropy() {
        let h = Array2::<f64>::ones((3, 3));
        let m = Array2::<f64>::zeros((3, 3));
        let batch = [
            CyborgItem { human: Some(h.view()), model: m.view(), true_prob: 0.5 },
            CyborgItem { human: None, model: m.view(), true_prob: 0.25 },
        ];
        let l = cyborg_loss(&batch, &cfg(1.0)).unwrap().value;
        let ce = (-(0.5f64).ln() - (0.25f64).ln()) / 2.0;
        assert!((l - ce).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped_and_counted() {
        let m = Array2::<f64>::zeros((3, 3));
        let batch = [CyborgItem { human: None, model: m.view(), true_prob: 0.0 }];
        let l = cyborg_loss(&batch, &cfg(1.0)).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((l.value + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn ssim_raw_flips_the_structural_term() {
        let h = Array2::from_shape_fn((3, 3), |(y, x)| ((y + x) % 2) as f64);
        let m = Array2::from_shape_fn((3, 3), |(y, _)| y as f64 / 2.0);
        let mut c = cfg(0.0);
        let standard = saliency_loss(h.view(), m.view(), &c).unwrap();
        c.ssim_raw = true;
        let raw = saliency_loss(h.view(), m.view(), &c).unwrap();
        let s = ssim(h.view(), m.view(), &c).unwrap();
        assert!(((standard - raw) - (1.0 - 2.0 * s)).abs() < 1e-12);
    }

    #[test]
    fn saliency_gradient_matches_finite_differences() {
        let h = Array2::from_shape_fn((5, 5), |(y, x)| if (y + 2 * x) % 3 == 0 { 1.0 } else { 0.0 });
        let m = Array2::from_shape_fn((5, 5), |(y, x)| ((y * 7 + x * 3) % 11) as f64 / 10.3 + 0.01);
        let c = cfg(0.3);
        let (_, g) = saliency_loss_with_grad(h.view(), m.view(), &c).unwrap();
        let eps = 1e-7;
        for idx in 0..m.len() {
            let mut p = m.clone();
            let mut q = m.clone();
            p.as_slice_mut().unwrap()[idx] += eps;
            q.as_slice_mut().unwrap()[idx] -= eps;
            let numeric = (saliency_loss(h.view(), p.view(), &c).unwrap() - saliency_loss(h.view(), q.view(), &c).unwrap())
                / (2.0 * eps);
            assert!((numeric - g.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }
}
