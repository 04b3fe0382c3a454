//! Small CAM-compatible convolutional classifier with hand-written backprop.

mod bundle;
mod conv;
mod network;

pub use bundle::ModelBundle;
pub use conv::ConvBlock;
pub use network::{softmax, to_chw, BackboneConfig, Gradients, Network, Trace};
