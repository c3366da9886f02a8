//! Pursuit-evasion games between two spacecraft sharing a periodic orbit of
//! the circular restricted three-body problem.
//!
//! The crate is organised bottom-up:
//!
//! * [`dynamics`] and [`ode`]: normalized CR3BP field, Jacobian, Lagrange
//!   points and the adaptive dense-output integrator.
//! * [`orbit`]: periodic reference orbits, monodromy matrix and the
//!   stable/unstable directions used to shape tracking weights.
//! * [`game`]: 14-state engagement dynamics, game costs and derivatives.
//! * [`ddp`]: continuous-time game-theoretic DDP.
//! * [`lq`]: linear-quadratic pursuit-evasion game and Riccati pursuer.
//! * [`sim`]: receding-horizon engagement harness and log export.

pub mod ddp;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod lq;
pub mod ode;
pub mod orbit;
pub mod sim;

pub use error::{Error, Result};
