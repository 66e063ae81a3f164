//! Sparse attentional graph neural network for two-view keypoint matching.
//!
//! Keypoints of both images are embedded, exchange dense context for a few
//! layers, and then route all further messages through a small set of
//! well-distributed high-matchability bottleneck keypoints per image. A
//! dustbin-augmented Sinkhorn normalization turns final feature similarities
//! into a soft partial assignment from which mutual matches are read off.
//!
//! Everything is generic over the [`Scalar`] type; [`Model32`] is what
//! training and inference use, [`Model64`] is for gradient verification.

pub mod attention;
pub mod bcas;
pub mod bench;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod matching;
pub mod mkaca;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Gradients, Graph, ParamId, ParamStore, Parameter, Tensor, Var};

pub use model::{Ablation, ForwardOptions, Model, ModelConfig, SampleSize};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
