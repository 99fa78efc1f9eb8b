//! Kernel-based approximation of Koopman generator eigenfunctions with an
//! exactly preserved linearization spectrum, Lyapunov candidates built from
//! them, and scenario-certified estimates of the region of attraction.
//!
//! The pipeline is:
//!
//! 1. [`dynsys`]: a vector field `ẋ = F(x)` on a box with a hyperbolic stable
//!    equilibrium at the origin.
//! 2. [`kernel`]: the split exponential kernel `k₂(x,y) = exp(η⟨x,y⟩) − η⟨x,y⟩`
//!    and its Gram matrix on a collocation set.
//! 3. [`generator`]: the block-triangular generator representation and the
//!    recursive eigenfunction solve `(A − λG)v = −Nw`.
//! 4. [`lyapunov`]: `V(x) = Σ |φ_λ(x)|²` and its derivative along the flow.
//! 5. [`scenario`]: sampled shell optimization over `[θ₁, θ₂]` with the
//!    `ε(k)` violation bound.
//! 6. [`odeint`]: adaptive Dormand–Prince integration used as a ground-truth
//!    oracle and for collocation filtering.
//!
//! Kernel Gram matrices at small collocation boxes are far too ill-conditioned
//! for `f64` (condition numbers beyond 1e30 are routine), so the linear algebra
//! and, when needed, eigenfunction evaluation run in MPFR arithmetic with a
//! precision derived from the Gram conditioning. See [`hp`].

pub mod dynsys;
pub mod error;
pub mod generator;
pub mod hp;
pub mod kernel;
pub mod lyapunov;
pub mod monomial;
pub mod odeint;
pub mod par;
pub mod scenario;

pub use error::{Error, Result};
