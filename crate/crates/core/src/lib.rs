//! Small-time diagonal heat-kernel expansion for two-dimensional
//! hypoelliptic operators `L = X0 + ½ X1²` of Kolmogorov type.
//!
//! The crate is organised bottom-up:
//!
//! - [`expr`]: expressions in `x1, x2` with exact symbolic derivatives;
//! - [`gaussian`]: exact kernels of linear-quadratic operators;
//! - [`gauss_algebra`]: Gaussian products and moments;
//! - [`duhamel`]: single and double perturbation convolutions and the
//!   first-order coefficient in chart coordinates;
//! - [`geometry`]: brackets, structure constants, curvature invariants and
//!   the intrinsic form of the coefficient;
//! - [`oracle`]: Monte Carlo and finite-difference cross-checks.

pub mod duhamel;
pub mod expr;
pub mod gauss_algebra;
pub mod gaussian;
pub mod geometry;
pub mod linalg;
pub mod oracle;
pub mod quadrature;

pub use expr::{CompiledExpr, Expr, ExprError, Var};
pub use gaussian::{GaussianError, LQOperator};
pub use linalg::{Mat2, Vec2};
