//! Controller synthesis and evaluation for storage and PV inverters on
//! radial distribution feeders.
//!
//! The crate builds a linearized feeder model, lifts a finite-horizon
//! scheduling problem over decentralized affine disturbance-feedback
//! policies into a convex quadratic program, and solves two tractable
//! programs that sandwich the best achievable expected cost:
//!
//! * [`synthesis::synthesize_policy`] tightens the inverter reactive-power
//!   set to a box and enforces every operating constraint robustly over
//!   the disturbance support, yielding an implementable policy and an
//!   upper bound `J_in`.
//! * [`synthesis::compute_lower_bound`] relaxes the reactive set to an
//!   outer polytope and the robust constraints to moment conditions,
//!   yielding a lower bound `J_out` that is certified when the per-bus
//!   disturbance blocks are mutually independent.
//!
//! [`simulate`] evaluates policies by Monte Carlo rollout against the
//! exact (non-approximated) operating constraints, on the planning time
//! scale or on a faster intra-period time scale.
//!
//! # Conventions
//!
//! Physical units throughout: MW, Mvar, MVA, MWh, kV, ohm, hours.
//! Squared voltages are carried in kV^2, so `ohm * MW = kV^2` holds
//! without per-unit bookkeeping; per-unit voltage bounds are converted
//! once at network construction. Bus `0` is the substation; controlled
//! buses are `1..=n`. See [`layout`] for the vector index maps.

pub mod assembly;
pub mod error;
pub mod layout;
pub mod network;
pub mod policy;
pub mod qp;
pub mod scenario;
pub mod simulate;
pub mod synthesis;

pub use error::{Error, Result};
