//! Inference-time activation steering on small transformers: contrastive
//! trace collection, reasoning-critical neuron identification, sparse MLP
//! steering, a learned failure gate, probing baselines and trajectory
//! geometry, with planted-circuit models as ground truth.

pub mod error;
pub mod experiment;
pub mod gate;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod rcn;
pub mod tasks;
pub mod traces;
pub mod trajectory;

pub use error::{Error, Result};
