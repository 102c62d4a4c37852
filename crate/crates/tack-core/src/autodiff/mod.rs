//! Minimal reverse-mode autodiff over dense tensors.
//!
//! Built for exactly one job: training small convolutional detector networks
//! deterministically on a CPU. Graphs are static and shape-checked at build
//! time ([`graph`]), parameters live in a named store ([`params`]) that
//! serialises to a simple binary format ([`checkpoint`]), and the whole
//! backward pass is validated against central finite differences
//! ([`gradcheck`]). Kernels ([`kernels`]) are plain loops arranged so the
//! compiler can autovectorise them; generic over f32 (training) and f64
//! (oracle tests).

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_params, save_params};
pub use gradcheck::{grad_check, GradCheckEntry};
pub use graph::{backward, Evaluation, Gradients, Graph, Var};
pub use params::{init_conv, init_film, init_linear, ParamStore};
pub use tensor::{AutodiffError, Scalar, Tensor};
