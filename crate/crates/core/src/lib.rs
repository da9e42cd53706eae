//! Highway traffic microsimulation and calibration.
//!
//! The crate simulates multi-lane highway traffic with the Wiedemann99
//! psycho-physical car-following model, calibrates the per-class desired-speed
//! distributions against recorded per-vehicle mean speeds (Gaussian-KDE
//! log-likelihood minimized by multi-start Nelder-Mead), and quantifies
//! traffic criticality through TTC/PET metrics and one-at-a-time parameter
//! sweeps.
//!
//! Everything is deterministic: a run is a pure function of its config
//! (including the seed), calibration restarts and sweep grid points own
//! private simulator instances, and results are identical whether the work
//! runs sequentially or on a thread pool (`parallel` feature, on by default).

pub mod calib;
pub mod carfollow;
pub mod error;
pub mod exec;
pub mod lanechange;
pub mod metrics;
pub mod roadnet;
pub mod sim;
pub mod sweep;
pub mod trajdata;

pub use error::{Error, Result, ValidationError, ValidationKind};

/// km/h per m/s.
pub const KMH_PER_MPS: f64 = 3.6;
