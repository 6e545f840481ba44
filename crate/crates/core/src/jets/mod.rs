//! Differentiation engine.
//!
//! Two layers that nest:
//!
//! * [`Jet`]: forward Taylor-mode arithmetic in elapsed time. A jet carries a
//!   value and its time derivatives up to a fixed order, which is how the
//!   controller obtains velocities, accelerations and co-state rates from
//!   networks that only output primitive quantities.
//! * [`Tape`] / [`Var`]: reverse-mode recording over scalars. Jets are generic
//!   over [`Scalar`], so a `Jet<Var>` records every coefficient operation and
//!   a single backward sweep yields parameter gradients of losses that mix
//!   time derivatives of the network (reverse-over-forward).

pub mod activation;
mod jet;
mod scalar;
mod tape;

pub use jet::{ArithOp, Jet, UnaryFn, MAX_ORDER};
pub use scalar::Scalar;
pub use tape::{grad_scalar, Adjoints, Tape, Var};
