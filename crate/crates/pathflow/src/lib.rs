//! Calculus on the product space `R^d x C([-T, 0))` for path-dependent
//! functionals: lift and restriction operators, the left-shift semigroup and
//! its generator, smoothing operators, analytic Frechet data for several
//! functional families, a Gaussian Kolmogorov model, SDE simulation, and
//! verification drivers for the functional Ito identity.

pub mod error;
pub mod functionals;
pub mod gausskolm;
pub mod pathspace;
pub mod simulate;
pub mod smoothing;
pub mod verify;

pub use error::{PathflowError, Result};
