//! Bilevel learning for variational image restoration.
//!
//! Two learning pipelines share one numerical substrate:
//!
//! * [`foe`] learns the weights and convolution filters of a Field-of-Experts
//!   regularizer. The lower-level problem is solved by a spectral (BB1)
//!   gradient method with Armijo backtracking, and parameter gradients come
//!   from an adjoint solve with conjugate gradients.
//! * [`tvdisc`] learns the interpolation filters that define a discrete total
//!   variation, differentiating a primal-dual solver with a piggyback adjoint
//!   recursion.
//!
//! [`imgcore`] holds images, periodic convolutions, degradation operators and
//! metrics; [`data`] synthesizes training sets and [`metio`] owns every file
//! format.

pub mod data;
pub mod error;
pub mod foe;
pub mod imgcore;
pub mod metio;
pub mod tvdisc;

pub use error::{Error, Result};
pub use imgcore::{DegradationOp, GradientField, Image, Kernel};
