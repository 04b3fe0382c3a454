use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::Scalar;

/// Jet colormap for `v` in `[0, 1]`.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel = |offset: f64| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0);
    [
        (channel(3.0) * 255.0).round() as u8,
        (channel(2.0) * 255.0).round() as u8,
        (channel(1.0) * 255.0).round() as u8,
    ]
}

/// Blends a jet-coloured heatmap (already at image resolution) over the
/// image; `opacity` is the heatmap weight.
pub fn overlay_heatmap<T: Scalar>(image: &Image, heatmap: ArrayView2<T>, opacity: f64) -> Result<RgbImage> {
    let (h, w, c) = image.dim();
    if heatmap.dim() != (h, w) {
        return Err(Error::shape(&[h, w], heatmap.shape()));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let color = jet(heatmap[[y, x]].as_f64());
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let base = image[[y, x, ch.min(c - 1)]] as f64;
                let v = (1.0 - opacity) * base + opacity * color[ch] as f64 / 255.0;
                px[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(out)
}

pub fn save_overlay<T: Scalar>(path: &Path, image: &Image, heatmap: ArrayView2<T>, opacity: f64) -> Result<()> {
    overlay_heatmap(image, heatmap, opacity)?
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
        assert_eq!(jet(0.5), [128, 255, 128]);
    }
}
