//! Dense `f64` tensors, a tape-based reverse-mode autodiff graph, an Adam
//! optimizer and a finite-difference gradient checker.
//!
//! Everything is two-dimensional inside the graph: a vector is a `1 x n`
//! matrix and a scalar is `1 x 1`. Parameters live in a [`ParamStore`] and are
//! borrowed (not copied) into a [`Graph`] through [`ParamStore::bind`].

mod check;
mod error;
mod graph;
mod optim;
mod tensor;

pub use check::{grad_check, sample_coords, Coord, GradCheckReport};
pub use error::{NnError, Result};
pub use graph::{BoundParams, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, GradAccumulator};
pub use tensor::{ParamStore, Tensor};
