//! Tensors, reverse-mode autodiff, optimizers, seeded randomness, and the
//! checkpoint tensor format. Everything downstream builds on this module.

pub mod graph;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use graph::{CeReduction, Graph, GraphError, Var};
pub use io::{
    digest_tensors, load_tensor_map, load_tensors, read_tensors, save_tensors, write_tensors,
    TensorIoError,
};
pub use optim::{OptimError, OptimKind, Optimizer};
pub use rng::Rng;
pub use tensor::Tensor;
