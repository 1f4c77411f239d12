//! Minimal CPU network engine: tensors, layers, optimizer and portable export.

mod adam;
pub mod layers;
mod network;
pub mod onnx;
pub mod ops;
mod tensor;

pub use adam::Adam;
pub use layers::{Cache, Layer, Mode, NamedLayer, TensorRole};
pub use network::{concat_aux, BackboneKind, ModelSpec, NetCache, Network};
pub use tensor::Tensor;
