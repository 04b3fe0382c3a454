use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::Scalar;

/// 3×3 convolution, zero padding 1, followed by ReLU.
///
/// Weights are stored flattened as `out × (in·9)` so the forward pass is a
/// single matrix product against the im2col expansion of the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConvBlock<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub stride: usize,
}

/// Values cached by [`ConvBlock::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub(crate) cols: Array2<T>,
    /// Post-ReLU output, `out × (ho·wo)`.
    pub(crate) activ: Array2<T>,
    pub(crate) in_shape: (usize, usize, usize),
    pub(crate) out_hw: (usize, usize),
}

pub(crate) fn out_size(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

impl<T: Scalar> ConvBlock<T> {
    pub fn he_init<R: Rng>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        assert!(stride >= 1, "stride must be positive");
        let fan_in = in_ch * 9;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let weight = Array2::from_shape_fn((out_ch, fan_in), |_| T::lit(normal.sample(rng)));
        ConvBlock {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, input: ArrayView3<T>) -> (Array3<T>, ConvCache<T>) {
        let (c, h, w) = input.dim();
        debug_assert_eq!(c, self.in_channels());
        let (ho, wo) = (out_size(h, self.stride), out_size(w, self.stride));
        let cols = im2col(input, self.stride, ho, wo);
        let mut pre = self.weight.dot(&cols);
        for (mut row, &b) in pre.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| (v + b).max(T::zero()));
        }
        let out = pre
            .clone()
            .into_shape_with_order((self.out_channels(), ho, wo))
            .expect("contiguous conv output");
        (
            out,
            ConvCache {
                cols,
                activ: pre,
                in_shape: (c, h, w),
                out_hw: (ho, wo),
            },
        )
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the post-ReLU output),
    /// accumulating parameter gradients and returning the input gradient
    /// when `want_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        grad_out: &Array3<T>,
        grad_w: &mut Array2<T>,
        grad_b: &mut Array1<T>,
        want_input: bool,
    ) -> Option<Array3<T>> {
        let (ho, wo) = cache.out_hw;
        let mut g = grad_out
            .to_owned()
            .into_shape_with_order((self.out_channels(), ho * wo))
            .expect("contiguous grad");
        ndarray::Zip::from(&mut g)
            .and(&cache.activ)
            .for_each(|gv, &a| {
                if a <= T::zero() {
                    *gv = T::zero();
                }
            });
        ndarray::linalg::general_mat_mul(T::one(), &g, &cache.cols.t(), T::one(), grad_w);
        for (gb, row) in grad_b.iter_mut().zip(g.rows()) {
            *gb = *gb + row.sum();
        }
        if !want_input {
            return None;
        }
        let dcols = self.weight.t().dot(&g);
        Some(col2im(&dcols, cache.in_shape, self.stride, ho, wo))
    }
}

fn im2col<T: Scalar>(input: ArrayView3<T>, stride: usize, ho: usize, wo: usize) -> Array2<T> {
    let (c, h, w) = input.dim();
    let mut cols = Array2::zeros((c * 9, ho * wo));
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let mut row = cols.row_mut(ch * 9 + ky * 3 + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[oy * wo + ox] = input[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    cols: &Array2<T>,
    (c, h, w): (usize, usize, usize),
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array3<T> {
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = cols.row(ch * 9 + ky * 3 + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = &mut out[[ch, iy as usize, ix as usize]];
                        *v = *v + row[oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn output_size_matches_padding_one() {
        assert_eq!(out_size(32, 1), 32);
        assert_eq!(out_size(32, 2), 16);
        assert_eq!(out_size(7, 2), 4);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut weight = Array2::<f64>::zeros((1, 9));
        weight[[0, 4]] = 1.0;
        let block = ConvBlock {
            weight,
            bias: Array1::zeros(1),
            stride: 1,
        };
        let x = array![[[1.0, 2.0], [3.0, -4.0]]];
        let (y, _) = block.forward(x.view());
        // ReLU clamps the negative entry.
        assert_eq!(y, array![[[1.0, 2.0], [3.0, 0.0]]]);
    }
}
