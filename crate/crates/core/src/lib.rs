//! Selective feature adapters on a frozen toy vision transformer.
//!
//! The backbone is a small pre-norm ViT with a dense head. Adaptation trains
//! residual bottleneck adapters together with a progressively selected subset
//! of the backbone's attention and MLP scalars, under a hard parameter budget.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod delta;
pub mod error;
pub mod gradcheck;
pub mod invariants;
pub mod optim;
pub mod report;
pub mod selection;
pub mod store;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
