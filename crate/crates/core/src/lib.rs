//! Limiting singular-value spectra of deep residual-network Jacobians.
//!
//! A depth-`L` residual network with structured skip connections has an
//! input-output Jacobian of the form `Y = prod_l (A_q (x) I_p +
//! sqrt(sigma2_l) W_l)`, a product of deterministic Kronecker skips and
//! Gaussian noise. In the wide limit its singular-value distribution is
//! deterministic and computable: each factor's spectral transform comes
//! out of a Dyson self-consistency equation (scalar for `q = 1`,
//! operator-valued over the `q x q` sector space otherwise), the factors
//! combine through free multiplicative convolution, and a contour
//! inversion turns the resulting resolvent into a density.
//!
//! The crate is organized around that pipeline:
//!
//! - [`dyson_scalar`] and [`dyson_matrix`] solve the one-layer
//!   self-consistency equations;
//! - [`compose`] multiplies layers together, with fast paths for
//!   identical layers and a subordination route for heterogeneous
//!   stacks, and drives whole evaluation grids;
//! - [`density`] recovers densities from resolvents, extrapolates the
//!   broadening to zero, and estimates traces stochastically;
//! - [`monte_carlo`] samples finite-size Jacobians and scores the
//!   empirical spectra against the theory curves;
//! - [`panel`] ties sampling, solving, and scoring into the reference
//!   3 x 4 validation grid of depth x skip-family cells;
//! - [`mixers`] provides the constrained mixing matrices the skips are
//!   drawn from (doubly stochastic, orthogonal, and subspace
//!   projectors) together with fixed-point backward passes for their
//!   projections;
//! - [`activation`] linearizes pointwise nonlinearities into effective
//!   per-layer noise strengths;
//! - [`stalling`] converts a singular-value density into the fraction
//!   of directions an optimizer cannot see.
//!
//! Numerical kernels shared by the solvers live in [`numerics`], and
//! every fallible operation returns the crate-wide
//! [`error::SpectralError`].

pub mod activation;
pub mod compose;
pub mod density;
pub mod dyson_matrix;
pub mod dyson_scalar;
pub mod error;
pub mod mixers;
pub mod monte_carlo;
pub mod numerics;
pub mod stalling;

pub use activation::{ActivationFn, SignalState};
pub use compose::{ComposeOptions, GreenGridResult, LayerSpec, SolverMethod};
pub use density::{Domain, RichardsonOutcome, SpectralDensity};
pub use dyson_matrix::{TwistFamily, TwistMatrix};
pub use dyson_scalar::{GramSpectrum, ScalarDysonProblem};
pub use error::{Result, SpectralError};
pub use monte_carlo::{EmpiricalSpectrum, MCConfig, SpectrumDistance};
pub use numerics::{GreenSample, GreenValue, SpectralGrid};
pub use stalling::{Cutoffs, StallParams};
