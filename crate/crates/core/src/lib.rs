//! Generative geolocation on the unit sphere.
//!
//! Conditional distributions over locations are learned with denoising
//! diffusion or flow matching (in R³ or intrinsically on S²), sampled with
//! iterative solvers, and evaluated with exact log-densities obtained from
//! the divergence ODE.

pub mod baselines;
pub mod data;
pub mod density;
pub mod error;
pub mod gen;
pub mod metrics;
pub mod model;
pub mod net;
pub mod ode;
pub mod sampler;
pub mod sched;
pub mod sphere;

pub use error::{GeoError, Result};
