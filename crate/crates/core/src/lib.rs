//! Numerical laboratory for first-order price-adjustment (tâtonnement) dynamics
//! under weak noise.
//!
//! The crate is organised around the drift `dp/dt = A(p)`:
//!
//! - [`field`]: excess-demand fields, Jacobians and the built-in double-well family.
//! - [`hodge`]: gridded and analytic potential/solenoidal splits `A = -∇V + Ā`.
//! - [`critical`]: Newton multistart root search, index classification, basins.
//! - [`dynamics`]: deterministic and Euler–Maruyama integration, transition
//!   detection, first-passage statistics and the energy identity.
//! - [`paths`]: line integrals, positivity margins, Onsager–Machlup actions and
//!   minimum-action paths.
//! - [`cli`]: scenario files and the batch front end.

pub mod cli;
pub mod critical;
pub mod dynamics;
pub mod field;
pub mod hodge;
pub mod paths;

pub use critical::{CriticalPoint, Stability};
pub use field::{FieldSpec, ParameterVector, PriceVector};
