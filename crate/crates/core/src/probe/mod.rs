//! Class-activation saliency probes and mask binarization.

mod overlay;
mod resample;

use std::fmt;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask};
use crate::error::{Error, Result};
use crate::nn::ModelBundle;
use crate::Scalar;

pub use overlay::{jet, overlay_heatmap, save_overlay};
pub use resample::{downsample_area, mask_to_map, upsample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMethod {
    #[default]
    Cam,
    GradCam,
    #[serde(rename = "gradcampp")]
    GradCamPlusPlus,
    HiResCam,
}

impl fmt::Display for ProbeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeMethod::Cam => "cam",
            ProbeMethod::GradCam => "gradcam",
            ProbeMethod::GradCamPlusPlus => "gradcampp",
            ProbeMethod::HiResCam => "hirescam",
        })
    }
}

impl std::str::FromStr for ProbeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cam" => Ok(ProbeMethod::Cam),
            "gradcam" => Ok(ProbeMethod::GradCam),
            "gradcampp" | "gradcam++" | "gradcamplusplus" => Ok(ProbeMethod::GradCamPlusPlus),
            "hirescam" => Ok(ProbeMethod::HiResCam),
            other => Err(Error::Config(format!("unknown probe method {other:?}"))),
        }
    }
}

/// Normalised relevance map at feature-map resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<T> {
    pub values: Array2<T>,
    pub target_class: usize,
    pub method: ProbeMethod,
    /// `(H, W)` of the probed image.
    pub image_size: (usize, usize),
}

impl<T: Scalar> SaliencyMap<T> {
    /// Bilinear upsampling to the image resolution.
    pub fn upsampled(&self) -> Array2<T> {
        upsample(self.values.view(), self.image_size)
    }
}

/// Min-max normalisation to `[0, 1]`; constant maps become all zeros.
pub fn normalize<T: Scalar>(raw: ArrayView2<T>) -> Array2<T> {
    match min_max(raw) {
        Some((lo, _, _, _, range)) => raw.mapv(|v| (v - lo) / range),
        None => Array2::zeros(raw.raw_dim()),
    }
}

/// `(min, max, argmin, argmax, max - min)` for non-degenerate maps; the
/// first occurrence wins on ties.
fn min_max<T: Scalar>(raw: ArrayView2<T>) -> Option<(T, T, usize, usize, T)> {
    let mut it = raw.iter().copied().enumerate();
    let (_, first) = it.next()?;
    let (mut lo, mut hi, mut ilo, mut ihi) = (first, first, 0, 0);
    for (i, v) in it {
        if v < lo {
            lo = v;
            ilo = i;
        }
        if v > hi {
            hi = v;
            ihi = i;
        }
    }
    let range = hi - lo;
    let scale = hi.abs().max(lo.abs()).max(T::one());
    if !(range > T::epsilon() * scale) {
        return None;
    }
    Some((lo, hi, ilo, ihi, range))
}

/// Pulls a gradient on `normalize(raw)` back onto `raw`.
pub fn normalize_backward<T: Scalar>(raw: ArrayView2<T>, grad_out: ArrayView2<T>) -> Array2<T> {
    let Some((lo, _, ilo, ihi, range)) = min_max(raw) else {
        return Array2::zeros(raw.raw_dim());
    };
    let total: T = grad_out.sum();
    let weighted: T = Zip::from(&raw)
        .and(&grad_out)
        .fold(T::zero(), |acc, &r, &g| acc + g * (r - lo) / range);
    let mut grad = grad_out.mapv(|g| g / range);
    let flat = grad.as_slice_mut().expect("fresh array is contiguous");
    flat[ilo] = flat[ilo] - total / range + weighted / range;
    flat[ihi] = flat[ihi] - weighted / range;
    grad
}

/// `Σ_k weights[k] · features[k]`, unclamped.
pub fn cam_raw<T: Scalar>(features: ArrayView3<T>, weights: &Array1<T>) -> Result<Array2<T>> {
    let (k, h, w) = features.dim();
    if weights.len() != k {
        return Err(Error::shape(&[k], &[weights.len()]));
    }
    let mut raw = Array2::zeros((h, w));
    for (fmap, &wk) in features.axis_iter(Axis(0)).zip(weights.iter()) {
        raw.scaled_add(wk, &fmap);
    }
    Ok(raw)
}

fn image_hw(image: &Image) -> (usize, usize) {
    (image.dim().0, image.dim().1)
}

fn relu<T: Scalar>(mut a: Array2<T>) -> Array2<T> {
    a.mapv_inplace(|v| v.max(T::zero()));
    a
}

fn check_class<T: Scalar, M: ModelBundle<T> + ?Sized>(model: &M, class: usize) -> Result<()> {
    if class >= model.num_classes() {
        return Err(Error::Argument(format!(
            "target class {class} outside [0, {})",
            model.num_classes()
        )));
    }
    Ok(())
}

pub fn cam<T: Scalar, M: ModelBundle<T> + ?Sized>(model: &M, image: &Image, target_class: usize) -> Result<SaliencyMap<T>> {
    check_class(model, target_class)?;
    let features = model.feature_maps(image)?;
    let raw = cam_raw(features.view(), &model.head_weights(target_class)?)?;
    Ok(SaliencyMap {
        values: normalize(raw.view()),
        target_class,
        method: ProbeMethod::Cam,
        image_size: image_hw(image),
    })
}

fn feature_and_grads<T: Scalar, M: ModelBundle<T> + ?Sized>(
    model: &M,
    image: &Image,
    target_class: usize,
) -> Result<(Array3<T>, Array3<T>)> {
    check_class(model, target_class)?;
    let features = model.feature_maps(image)?;
    let grads = model.logit_gradients(image, target_class)?;
    if grads.dim() != features.dim() {
        let (a, b, c) = features.dim();
        let (x, y, z) = grads.dim();
        return Err(Error::shape(&[a, b, c], &[x, y, z]));
    }
    Ok((features, grads))
}

/// Channel weights are the spatial mean of the logit gradient.
pub fn gradcam<T: Scalar, M: ModelBundle<T> + ?Sized>(model: &M, image: &Image, target_class: usize) -> Result<SaliencyMap<T>> {
    let (features, grads) = feature_and_grads(model, image, target_class)?;
    let weights = grads
        .mean_axis(Axis(2))
        .and_then(|m| m.mean_axis(Axis(1)))
        .ok_or_else(|| Error::Unsupported("empty feature maps".into()))?;
    let raw = relu(cam_raw(features.view(), &weights)?);
    Ok(SaliencyMap {
        values: normalize(raw.view()),
        target_class,
        method: ProbeMethod::GradCam,
        image_size: image_hw(image),
    })
}

/// Second-order pixel weighting of positive gradients.
pub fn gradcampp<T: Scalar, M: ModelBundle<T> + ?Sized>(model: &M, image: &Image, target_class: usize) -> Result<SaliencyMap<T>> {
    let (features, grads) = feature_and_grads(model, image, target_class)?;
    let eps = T::lit(1e-7);
    let mut weights = Array1::zeros(features.dim().0);
    for (k, (fmap, gmap)) in features.axis_iter(Axis(0)).zip(grads.axis_iter(Axis(0))).enumerate() {
        let act_sum: T = fmap.sum();
        weights[k] = Zip::from(&gmap).fold(T::zero(), |acc, &g| {
            if g == T::zero() {
                return acc;
            }
            let g2 = g * g;
            let a = g2 / (g2 + g2 + act_sum * g2 * g + eps);
            acc + a * g.max(T::zero())
        });
    }
    let raw = relu(cam_raw(features.view(), &weights)?);
    Ok(SaliencyMap {
        values: normalize(raw.view()),
        target_class,
        method: ProbeMethod::GradCamPlusPlus,
        image_size: image_hw(image),
    })
}

/// Element-wise gradient times activation, no spatial averaging.
pub fn hirescam<T: Scalar, M: ModelBundle<T> + ?Sized>(model: &M, image: &Image, target_class: usize) -> Result<SaliencyMap<T>> {
    let (features, grads) = feature_and_grads(model, image, target_class)?;
    let (_, h, w) = features.dim();
    let mut raw = Array2::zeros((h, w));
    for (fmap, gmap) in features.axis_iter(Axis(0)).zip(grads.axis_iter(Axis(0))) {
        Zip::from(&mut raw).and(&fmap).and(&gmap).for_each(|r, &a, &g| *r = *r + a * g);
    }
    let raw = relu(raw);
    Ok(SaliencyMap {
        values: normalize(raw.view()),
        target_class,
        method: ProbeMethod::HiResCam,
        image_size: image_hw(image),
    })
}

pub fn probe<T: Scalar, M: ModelBundle<T> + ?Sized>(
    model: &M,
    image: &Image,
    target_class: usize,
    method: ProbeMethod,
) -> Result<SaliencyMap<T>> {
    match method {
        ProbeMethod::Cam => cam(model, image, target_class),
        ProbeMethod::GradCam => gradcam(model, image, target_class),
        ProbeMethod::GradCamPlusPlus => gradcampp(model, image, target_class),
        ProbeMethod::HiResCam => hirescam(model, image, target_class),
    }
}

/// Sets exactly `n` pixels: the largest values, ties broken by raster order.
pub fn binarize_topn<T: Scalar>(map: ArrayView2<T>, n: usize) -> Result<Mask> {
    let len = map.len();
    if n == 0 || n > len {
        return Err(Error::Argument(format!("top-n count {n} outside [1, {len}]")));
    }
    let values: Vec<T> = map.iter().copied().collect();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = Mask::from_elem(map.raw_dim(), false);
    let flat = mask.as_slice_mut().expect("fresh array is contiguous");
    for &i in &order[..n] {
        flat[i] = true;
    }
    Ok(mask)
}

/// `value > threshold`, strictly.
pub fn binarize_threshold<T: Scalar>(map: ArrayView2<T>, threshold: T) -> Mask {
    map.mapv(|v| v > threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    /// Fixed feature maps and head weights; no backbone.
    struct Fixture {
        features: Array3<f64>,
        weights: Array2<f64>,
    }

    impl ModelBundle<f64> for Fixture {
        fn num_classes(&self) -> usize {
            self.weights.nrows()
        }
        fn probs(&self, _: &Image) -> Result<Array1<f64>> {
            let e = self.embedding_pooled();
            Ok(crate::nn::softmax(&self.weights.dot(&e)))
        }
        fn logits(&self, _: &Image) -> Result<Array1<f64>> {
            Ok(self.weights.dot(&self.embedding_pooled()))
        }
        fn feature_maps(&self, _: &Image) -> Result<Array3<f64>> {
            Ok(self.features.clone())
        }
        fn embedding(&self, _: &Image) -> Result<Array1<f64>> {
            Ok(self.embedding_pooled())
        }
        fn head_weights(&self, class: usize) -> Result<Array1<f64>> {
            Ok(self.weights.row(class).to_owned())
        }
        fn logit_gradients(&self, _: &Image, class: usize) -> Result<Array3<f64>> {
            let (k, h, w) = self.features.dim();
            let area = (h * w) as f64;
            Ok(Array3::from_shape_fn((k, h, w), |(c, _, _)| self.weights[[class, c]] / area))
        }
    }

    impl Fixture {
        fn embedding_pooled(&self) -> Array1<f64> {
            self.features.mean_axis(Axis(2)).unwrap().mean_axis(Axis(1)).unwrap()
        }
    }

    /// Classifier without spatial maps.
    struct Flat;

    impl ModelBundle<f64> for Flat {
        fn num_classes(&self) -> usize {
            2
        }
        fn probs(&self, _: &Image) -> Result<Array1<f64>> {
            Ok(array![0.5, 0.5])
        }
        fn logits(&self, _: &Image) -> Result<Array1<f64>> {
            Ok(array![0.0, 0.0])
        }
        fn feature_maps(&self, _: &Image) -> Result<Array3<f64>> {
            Err(Error::Unsupported("no spatial features".into()))
        }
        fn embedding(&self, _: &Image) -> Result<Array1<f64>> {
            Ok(array![1.0])
        }
        fn head_weights(&self, _: usize) -> Result<Array1<f64>> {
            Ok(array![1.0])
        }
        fn logit_gradients(&self, _: &Image, _: usize) -> Result<Array3<f64>> {
            Err(Error::Unsupported("no spatial features".into()))
        }
    }

    fn img() -> Image {
        Image::zeros((4, 4, 3))
    }

    fn two_channel(weights: Array1<f64>) -> Fixture {
        let mut features = Array3::zeros((2, 2, 2));
        features[[0, 0, 0]] = 1.0;
        features[[1, 1, 1]] = 1.0;
        let mut w = Array2::zeros((2, 2));
        w.row_mut(0).assign(&weights);
        Fixture { features, weights: w }
    }

    #[test]
    fn cam_hand_fixture() {
        let m = cam(&two_channel(array![2.0, 1.0]), &img(), 0).unwrap();
        assert_eq!(m.values, array![[1.0, 0.0], [0.0, 0.5]]);
    }

    #[test]
    fn cam_single_channel_is_the_normalised_feature_map() {
        let features = Array3::from_shape_vec((1, 2, 2), vec![1.0, 3.0, 2.0, 5.0]).unwrap();
        let fx = Fixture {
            features,
            weights: array![[1.0], [0.0]],
        };
        let m = cam(&fx, &img(), 0).unwrap();
        assert_eq!(m.values, array![[0.0, 0.5], [0.25, 1.0]]);
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let m = cam(&two_channel(array![0.0, 0.0]), &img(), 0).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_spatial_models_are_unsupported() {
        assert!(matches!(cam::<f64, _>(&Flat, &img(), 0), Err(Error::Unsupported(_))));
        assert!(matches!(gradcam::<f64, _>(&Flat, &img(), 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn zero_gradients_give_zero_maps() {
        let fx = two_channel(array![0.0, 0.0]);
        for method in [ProbeMethod::GradCam, ProbeMethod::GradCamPlusPlus, ProbeMethod::HiResCam] {
            let m = probe(&fx, &img(), 0, method).unwrap();
            assert!(m.values.iter().all(|&v| v == 0.0), "{method}");
        }
    }

    #[test]
    fn topn_breaks_ties_by_raster_order() {
        let m = binarize_topn(array![[0.9, 0.1], [0.5, 0.5]].view(), 2).unwrap();
        assert_eq!(m, array![[true, false], [true, false]]);
        let c = binarize_topn(Array2::<f64>::from_elem((3, 3), 0.2).view(), 1).unwrap();
        assert!(c[[0, 0]]);
        assert_eq!(c.iter().filter(|&&b| b).count(), 1);
        let all = binarize_topn(array![[0.3, 0.1], [0.2, 0.0]].view(), 4).unwrap();
        assert!(all.iter().all(|&b| b));
        assert!(binarize_topn(array![[0.3]].view(), 0).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(binarize_threshold(array![[0.6, 0.4]].view(), 0.5), array![[true, false]]);
        assert_eq!(binarize_threshold(array![[0.5, 0.5]].view(), 0.5), array![[false, false]]);
        assert!(binarize_threshold(Array2::<f64>::zeros((3, 3)).view(), 0.5).iter().all(|&b| !b));
    }

    #[test]
    fn normalize_is_idempotent() {
        let x = array![[3.0, -1.0], [0.5, 2.0]];
        let once = normalize(x.view());
        assert_eq!(normalize(once.view()), once);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let raw = array![[0.3, -1.2, 0.7], [2.1, 0.4, -0.2]];
        let upstream = array![[0.5, -0.3, 1.1], [0.2, -0.7, 0.9]];
        let f = |r: &Array2<f64>| (normalize(r.view()) * &upstream).sum();
        let analytic = normalize_backward(raw.view(), upstream.view());
        let h = 1e-6;
        for idx in 0..raw.len() {
            let mut plus = raw.clone();
            let mut minus = raw.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((numeric - analytic.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn probe_method_parses_aliases() {
        assert_eq!("GradCAM++".parse::<ProbeMethod>().unwrap(), ProbeMethod::GradCamPlusPlus);
        assert_eq!("hires-cam".parse::<ProbeMethod>().unwrap(), ProbeMethod::HiResCam);
        assert!("rise".parse::<ProbeMethod>().is_err());
    }
}
