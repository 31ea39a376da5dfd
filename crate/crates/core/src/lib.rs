//! Unsupervised style/content disentanglement by adversarially minimizing a
//! neural estimate of the mutual information between style and content
//! representations, on a synthetic sequence task with an exact recognizer.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod mine;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod selftest;
pub mod train;

pub use autodiff::{Graph, NodeId, OpKind, Pooling, Tensor};
pub use error::{MistError, Result};
