//! Stochastic differential geometry on embedded manifolds, finite-dimensional
//! Riemannian submersions, and the Wasserstein space of flat tori.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] — closed-form catalog of embedded manifolds (S¹, T², S², S³)
//!   with projections, second fundamental form, curvature and geodesics.
//! * [`integrators`] — seeded Brownian drivers with dyadic refinement,
//!   projected Itô / Stratonovich–Heun schemes, frame transport along paths.
//! * [`submersion`] — the Hopf fibration S³ → S²(½): vertical/horizontal
//!   splitting, O'Neill tensor, horizontal lifts, transport and the
//!   equivariant factorisation of fiber-invariant diffusions.
//! * [`wasserstein`] — grid densities and particle clouds on S¹/T², circular
//!   and entropic W₂, functionals F_f, H, W with their Otto-calculus
//!   gradients, Lie derivatives and Hessians, measure ODEs.
//! * [`hodge`] — weighted Helmholtz–Hodge splitting (closed form in 1-D,
//!   preconditioned CG in 2-D), the normal tensor and its adjoint, and the
//!   lifted Levi-Civita connection.
//! * [`mckean_vlasov`] — conditional McKean–Vlasov equations under common
//!   noise: Picard iteration on frozen measure paths, step-coupled baseline,
//!   weak-form verification, density SPDE.
//! * [`wtransport`] — discrete diffeomorphisms over the torus, horizontal
//!   lifts of measure diffusions, stochastic parallel transport in Wasserstein
//!   space, connection form and the equivariant decomposition.

pub mod error;
pub mod geometry;
pub mod hodge;
pub mod integrators;
mod la;
pub mod mckean_vlasov;
pub mod spectral;
pub mod submersion;
pub mod wasserstein;
pub mod wtransport;

pub use error::{Error, Result};

pub const TAU: f64 = std::f64::consts::TAU;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

