//! Multi-resolution U-Net style networks for binary segmentation of
//! pyramidal slide images, with the supporting data, training, inference
//! and evaluation pipeline.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod graph;
pub mod models;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod wsi;

pub use error::{Error, ErrorKind, Result};
pub use graph::{Gradients, Graph, Mode, NodeId};
pub use scalar::{DType, Scalar};
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
