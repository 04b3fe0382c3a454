use ndarray::{Array2, ArrayView2};

use crate::data::Mask;
use crate::Scalar;

/// Bilinear resize with half-pixel centres, clamped to `[0, 1]`.
pub fn upsample<T: Scalar>(map: ArrayView2<T>, (out_h, out_w): (usize, usize)) -> Array2<T> {
    let (h, w) = map.dim();
    if (h, w) == (out_h, out_w) {
        return map.mapv(|v| v.max(T::zero()).min(T::one()));
    }
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, T) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, T::lit(src - lo as f64))
    };
    let rows: Vec<_> = (0..out_h).map(|y| coord(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| coord(x, w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = map[[y0, x0]] * (T::one() - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (T::one() - fx) + map[[y1, x1]] * fx;
        (top * (T::one() - fy) + bottom * fy).max(T::zero()).min(T::one())
    })
}

/// Area-weighted average pooling onto a coarser grid (fractional overlaps
/// allowed).
pub fn downsample_area<T: Scalar>(map: ArrayView2<T>, (out_h, out_w): (usize, usize)) -> Array2<T> {
    let (h, w) = map.dim();
    let spans = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut cells = Vec::new();
                let mut i = a.floor() as usize;
                while (i as f64) < b && i < n_in {
                    let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        cells.push((i, overlap / scale));
                    }
                    i += 1;
                }
                cells
            })
            .collect()
    };
    let rows = spans(h, out_h);
    let cols = spans(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let mut acc = 0.0;
        for &(iy, wy) in &rows[y] {
            for &(ix, wx) in &cols[x] {
                acc += map[[iy, ix]].as_f64() * wy * wx;
            }
        }
        T::lit(acc)
    })
}

/// Binary mask as a `{0, 1}` float map.
pub fn mask_to_map<T: Scalar>(mask: &Mask) -> Array2<T> {
    mask.mapv(|b| if b { T::one() } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn argmax(a: &Array2<f64>) -> (usize, usize) {
        let mut best = ((0, 0), f64::MIN);
        for (idx, &v) in a.indexed_iter() {
            if v > best.1 {
                best = (idx, v);
            }
        }
        best.0
    }

    #[test]
    fn corner_peak_survives_upsampling() {
        let m = array![[1.0, 0.0], [0.0, 0.0]];
        let up = upsample(m.view(), (4, 4));
        assert_eq!(argmax(&up), (0, 0));
        assert!((up.iter().cloned().fold(f64::MIN, f64::max) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn same_size_is_identity() {
        let m = array![[0.2, 0.7], [1.0, 0.0]];
        assert_eq!(upsample(m.view(), (2, 2)), m);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let mut mask = Mask::from_elem((4, 4), false);
        mask[[0, 0]] = true;
        mask[[0, 1]] = true;
        mask[[3, 3]] = true;
        let d = downsample_area(mask_to_map::<f64>(&mask).view(), (2, 2));
        assert_eq!(d, array![[0.5, 0.0], [0.0, 0.25]]);
    }

    #[test]
    fn area_downsample_handles_fractional_cells() {
        let ones = Array2::<f64>::ones((5, 7));
        let d = downsample_area(ones.view(), (3, 2));
        assert!(d.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
