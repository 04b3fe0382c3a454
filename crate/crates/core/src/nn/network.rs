use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::conv::{out_size, ConvBlock, ConvCache};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::Scalar;

/// Shape of the convolutional feature extractor.
///
/// Each entry is one 3×3 conv + ReLU block; the last block's channel count
/// is the embedding width `K` seen by the head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![16, 32, 64, 64],
            strides: vec![1, 2, 2, 1],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "backbone needs matching non-empty channels/strides, got {} and {}",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("backbone channels and strides must be positive".into()));
        }
        Ok(())
    }

    /// Feature-map resolution produced for an `h × w` input.
    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.strides
            .iter()
            .fold((h, w), |(h, w), &s| (out_size(h, s), out_size(w, s)))
    }
}

/// Conv backbone, global-average pool, linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Network<T> {
    pub blocks: Vec<ConvBlock<T>>,
    /// `num_classes × K`.
    pub head_weight: Array2<T>,
    pub head_bias: Array1<T>,
}

/// Forward activations retained for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    caches: Vec<ConvCache<T>>,
    pub features: Array3<T>,
    pub embedding: Array1<T>,
    pub logits: Array1<T>,
    pub probs: Array1<T>,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub blocks: Vec<(Array2<T>, Array1<T>)>,
    pub head_weight: Array2<T>,
    pub head_bias: Array1<T>,
}

pub fn softmax<T: Scalar>(logits: &Array1<T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exp = logits.mapv(|z| (z - max).exp());
    let total = exp.sum();
    exp / total
}

/// Converts an `H × W × C` image in `[0, 1]` to channel-major layout.
pub fn to_chw<T: Scalar>(image: &Image) -> Array3<T> {
    let (h, w, c) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| T::lit(image[[y, x, ch]] as f64))
}

impl<T: Scalar> Network<T> {
    /// He-initialised network. The same `seed` always yields the same
    /// weights, which is what lets every active-learning iteration retrain
    /// from one fixed initialisation.
    pub fn new(in_channels: usize, num_classes: usize, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        backbone.validate()?;
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(backbone.channels.len());
        let mut prev = in_channels;
        for (&ch, &stride) in backbone.channels.iter().zip(&backbone.strides) {
            blocks.push(ConvBlock::he_init(prev, ch, stride, &mut rng));
            prev = ch;
        }
        let normal = Normal::new(0.0, (1.0 / prev as f64).sqrt()).expect("finite std");
        let head_weight = Array2::from_shape_fn((num_classes, prev), |_| T::lit(normal.sample(&mut rng)));
        Ok(Network {
            blocks,
            head_weight,
            head_bias: Array1::zeros(num_classes),
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.head_weight.ncols()
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].in_channels()
    }

    pub fn forward(&self, input: ArrayView3<T>) -> Trace<T> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut x = input.to_owned();
        for block in &self.blocks {
            let (y, cache) = block.forward(x.view());
            caches.push(cache);
            x = y;
        }
        let embedding = x.mean_axis(Axis(2)).and_then(|m| m.mean_axis(Axis(1))).expect("non-empty feature map");
        let logits = self.head_weight.dot(&embedding) + &self.head_bias;
        let probs = softmax(&logits);
        Trace {
            caches,
            features: x,
            embedding,
            logits,
            probs,
        }
    }

    pub fn forward_image(&self, image: &Image) -> Trace<T> {
        self.forward(to_chw::<T>(image).view())
    }

    pub fn zero_grad(&self) -> Gradients<T> {
        Gradients {
            blocks: self
                .blocks
                .iter()
                .map(|b| (Array2::zeros(b.weight.raw_dim()), Array1::zeros(b.bias.raw_dim())))
                .collect(),
            head_weight: Array2::zeros(self.head_weight.raw_dim()),
            head_bias: Array1::zeros(self.head_bias.raw_dim()),
        }
    }

    /// Head backward: accumulates head gradients for `grad_logits` and
    /// returns the resulting gradient on the feature maps.
    pub fn head_backward(&self, trace: &Trace<T>, grad_logits: &Array1<T>, grads: &mut Gradients<T>) -> Array3<T> {
        for (c, &g) in grad_logits.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            grads.head_weight.row_mut(c).scaled_add(g, &trace.embedding);
            grads.head_bias[c] = grads.head_bias[c] + g;
        }
        self.pool_backward(trace, &self.head_weight.t().dot(grad_logits))
    }

    fn pool_backward(&self, trace: &Trace<T>, grad_embedding: &Array1<T>) -> Array3<T> {
        let (k, h, w) = trace.features.dim();
        let area = T::from_usize_lossy(h * w);
        let mut g = Array3::zeros((k, h, w));
        for (ch, &ge) in grad_embedding.iter().enumerate() {
            g.slice_mut(s![ch, .., ..]).fill(ge / area);
        }
        g
    }

    /// Backbone backward from a gradient on the last feature maps.
    pub fn backward(&self, trace: &Trace<T>, grad_features: Array3<T>, grads: &mut Gradients<T>) {
        let mut g = grad_features;
        for (i, (block, cache)) in self.blocks.iter().zip(&trace.caches).enumerate().rev() {
            let (gw, gb) = &mut grads.blocks[i];
            match block.backward(cache, &g, gw, gb, i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    /// Flat mutable views over every parameter tensor, in a fixed order that
    /// matches [`Gradients::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.push(b.weight.as_slice_mut().expect("standard layout"));
            out.push(b.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head_weight.as_slice_mut().expect("standard layout"));
        out.push(self.head_bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.weight.len() + b.bias.len()).sum::<usize>()
            + self.head_weight.len()
            + self.head_bias.len()
    }

    pub fn has_non_finite(&self) -> bool {
        self.blocks
            .iter()
            .flat_map(|b| b.weight.iter().chain(b.bias.iter()))
            .chain(self.head_weight.iter())
            .chain(self.head_bias.iter())
            .any(|v| !v.is_finite())
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for (w, b) in &self.blocks {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out.push(self.head_weight.as_slice().expect("standard layout"));
        out.push(self.head_bias.as_slice().expect("standard layout"));
        out
    }

    pub fn scale(&mut self, factor: T) {
        for (w, b) in &mut self.blocks {
            w.mapv_inplace(|v| v * factor);
            b.mapv_inplace(|v| v * factor);
        }
        self.head_weight.mapv_inplace(|v| v * factor);
        self.head_bias.mapv_inplace(|v| v * factor);
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for ((w, b), (ow, ob)) in self.blocks.iter_mut().zip(&other.blocks) {
            w.zip_mut_with(ow, |a, &b| *a = *a + b);
            b.zip_mut_with(ob, |a, &b| *a = *a + b);
        }
        self.head_weight.zip_mut_with(&other.head_weight, |a, &b| *a = *a + b);
        self.head_bias.zip_mut_with(&other.head_bias, |a, &b| *a = *a + b);
    }

    pub fn norm(&self) -> T {
        self.slices()
            .into_iter()
            .flat_map(|s| s.iter())
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }
}

impl<T: Scalar> ModelBundle<T> for Network<T> {
    fn num_classes(&self) -> usize {
        self.head_weight.nrows()
    }

    fn probs(&self, image: &Image) -> Result<Array1<T>> {
        Ok(self.forward_image(image).probs)
    }

    fn logits(&self, image: &Image) -> Result<Array1<T>> {
        Ok(self.forward_image(image).logits)
    }

    fn feature_maps(&self, image: &Image) -> Result<Array3<T>> {
        Ok(self.forward_image(image).features)
    }

    fn embedding(&self, image: &Image) -> Result<Array1<T>> {
        Ok(self.forward_image(image).embedding)
    }

    fn head_weights(&self, class: usize) -> Result<Array1<T>> {
        if class >= self.num_classes() {
            return Err(Error::Argument(format!("class {class} out of range")));
        }
        Ok(self.head_weight.row(class).to_owned())
    }

    fn logit_gradients(&self, image: &Image, class: usize) -> Result<Array3<T>> {
        if class >= self.num_classes() {
            return Err(Error::Argument(format!("class {class} out of range")));
        }
        let trace = self.forward_image(image);
        let mut onehot = Array1::zeros(self.num_classes());
        onehot[class] = T::one();
        let mut scratch = self.zero_grad();
        Ok(self.head_backward(&trace, &onehot, &mut scratch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Network<f64> {
        let cfg = BackboneConfig {
            channels: vec![3, 4],
            strides: vec![1, 2],
        };
        Network::new(2, 3, &cfg, 7).unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(tiny(), tiny());
    }

    #[test]
    fn probs_are_a_distribution() {
        let net = tiny();
        let x = Array3::from_shape_fn((2, 6, 6), |(c, y, x)| ((c + y * 3 + x) % 5) as f64 / 4.0);
        let t = net.forward(x.view());
        assert!((t.probs.sum() - 1.0).abs() < 1e-12);
        assert_eq!(t.features.dim(), (4, 3, 3));
        assert_eq!(t.embedding.len(), net.embedding_dim());
    }

    #[test]
    fn feature_size_follows_strides() {
        let cfg = BackboneConfig {
            channels: vec![8, 16, 32],
            strides: vec![1, 2, 2],
        };
        assert_eq!(cfg.feature_size(32, 32), (8, 8));
        assert_eq!(cfg.feature_size(24, 20), (6, 5));
    }

    #[test]
    fn rejects_mismatched_backbone() {
        let cfg = BackboneConfig {
            channels: vec![8],
            strides: vec![1, 2],
        };
        assert!(Network::<f32>::new(3, 2, &cfg, 0).is_err());
    }
}
