use ndarray::{Array1, Array3};

use crate::data::Image;
use crate::error::Result;
use crate::Scalar;

/// What a trained classifier must expose for probing, query selection and
/// evaluation.
///
/// Implementations without spatial feature maps return
/// [`Error::Unsupported`](crate::Error::Unsupported) from the map-related
/// methods; saliency probes propagate that error.
pub trait ModelBundle<T: Scalar> {
    fn num_classes(&self) -> usize;

    /// Class probabilities; sums to one.
    fn probs(&self, image: &Image) -> Result<Array1<T>>;

    fn logits(&self, image: &Image) -> Result<Array1<T>>;

    /// Last spatial feature maps, `K × h × w`.
    fn feature_maps(&self, image: &Image) -> Result<Array3<T>>;

    /// Pooled penultimate representation (length `K`).
    fn embedding(&self, image: &Image) -> Result<Array1<T>>;

    /// Head weight row for `class` (length `K`).
    fn head_weights(&self, class: usize) -> Result<Array1<T>>;

    /// Gradient of the `class` logit with respect to the feature maps.
    fn logit_gradients(&self, image: &Image, class: usize) -> Result<Array3<T>>;
}
