use ndarray::{Array2, ArrayView2};

use super::LossConfig;
use crate::error::{Error, Result};
use crate::Scalar;

fn check(a: ArrayView2<'_, impl Scalar>, b: ArrayView2<'_, impl Scalar>, window: usize) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let (h, w) = a.dim();
    if window == 0 || window % 2 == 0 {
        return Err(Error::Argument(format!("SSIM window must be odd, got {window}")));
    }
    if window > h || window > w {
        return Err(Error::Argument(format!("SSIM window {window} exceeds map size {h}×{w}")));
    }
    Ok(())
}

/// Mean SSIM over all valid `window × window` positions (uniform weights,
/// population statistics).
pub fn ssim<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, config: &LossConfig) -> Result<T> {
    Ok(ssim_impl(a, b, config, false)?.0)
}

/// SSIM together with its gradient with respect to `b`.
pub fn ssim_with_grad<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, config: &LossConfig) -> Result<(T, Array2<T>)> {
    let (v, g) = ssim_impl(a, b, config, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl<T: Scalar>(
    a: ArrayView2<T>,
    b: ArrayView2<T>,
    config: &LossConfig,
    want_grad: bool,
) -> Result<(T, Option<Array2<T>>)> {
    let win = config.ssim_window;
    check(a, b, win)?;
    let (h, w) = a.dim();
    let c1 = T::lit((config.ssim_k1 * config.dynamic_range).powi(2));
    let c2 = T::lit((config.ssim_k2 * config.dynamic_range).powi(2));
    let n = T::from_usize_lossy(win * win);
    let two = T::lit(2.0);
    let positions = (h - win + 1) * (w - win + 1);
    let mut grad = want_grad.then(|| Array2::zeros((h, w)));
    let mut total = T::zero();
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut sa, mut sb) = (T::zero(), T::zero());
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    sa = sa + a[[y, x]];
                    sb = sb + b[[y, x]];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (T::zero(), T::zero(), T::zero());
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    let (da, db) = (a[[y, x]] - ma, b[[y, x]] - mb);
                    va = va + da * da;
                    vb = vb + db * db;
                    cov = cov + da * db;
                }
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            let num_l = two * ma * mb + c1;
            let num_c = two * cov + c2;
            let den_l = ma * ma + mb * mb + c1;
            let den_c = va + vb + c2;
            let s = num_l * num_c / (den_l * den_c);
            total = total + s;
            if let Some(g) = grad.as_mut() {
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        let d = two / n
                            * (ma / num_l + (a[[y, x]] - ma) / num_c - mb / den_l - (b[[y, x]] - mb) / den_c);
                        g[[y, x]] = g[[y, x]] + s * d;
                    }
                }
            }
        }
    }
    let count = T::from_usize_lossy(positions);
    if let Some(g) = grad.as_mut() {
        g.mapv_inplace(|v| v / count);
    }
    Ok((total / count, grad))
}
