//! Dense `f64` tensors, a reverse-mode tape, and finite-difference checks.

mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use gradcheck::{fd_check, fd_report, relative_error, FD_EPS};
pub use linalg::gemm;
pub use tape::{double_center, ordered_sum, sq_dist, GradientReport, Tape, Var};
pub use tensor::{Tensor, MAGIC};
