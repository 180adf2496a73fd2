//! Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The engine covers exactly the layers a ConvNeXt-V2 U-Net needs (strided,
//! depthwise and transposed convolutions with circular/zero/reflect padding,
//! channel LayerNorm, GRN, exact GELU) plus elementwise glue and an AdamW
//! optimizer. Gradients are produced for every tensor flagged
//! `requires_grad`, weights and inputs alike.
//!
//! Kernels fan out over batch samples (and planes) on the rayon pool when
//! the `parallel` feature is on; all reductions combine per-sample partials
//! in index order, so results do not depend on the thread count.

pub mod adamw;
pub mod checkpoint;
pub mod conv;
mod error;
pub mod init;
mod norm;
mod par;
mod scalar;
mod tape;
mod tensor;

pub use adamw::{adamw_step, AdamW, AdamWConfig, Moments};
pub use checkpoint::Checkpoint;
pub use conv::{ConvSpec, PaddingMode};
pub use error::AutodiffError;
pub use scalar::{MatRef, Precision, Real};
pub use tape::{Tape, Var};
pub use tensor::{numel, Shape, Tensor};
