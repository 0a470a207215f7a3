//! Pointwise pseudohermitian geometry on chart models of strictly pseudoconvex
//! CR manifolds.
//!
//! The crate is organised bottom-up:
//!
//! - [`models`]: charts with admissible coframes (Heisenberg group, spheres).
//! - [`connection`]: exterior derivatives and the Webster connection solve.
//! - [`curvature`]: pseudohermitian curvature, Ricci, and the Chern–Moser
//!   quantities `D`, `E`, `φ`.
//! - [`chains`]: the chain ODE, its integrator, and a residual for arbitrary
//!   curves.
//! - [`fefferman`]: the circle bundle `M × S¹`, its Lorentz metric and null
//!   geodesics, and Fefferman lifts of embeddings.
//! - [`embeddings`]: CR maps, adapted coframes, the CR second fundamental form
//!   and the lift / chain-preservation tests built on it.

pub mod chains;
pub mod connection;
pub mod curvature;
pub mod embeddings;
mod error;
pub mod fefferman;
pub mod models;
pub mod numerics;
pub mod ode;

pub use error::{CrError, Result};
pub use nalgebra::{DMatrix, DVector};
pub use num_complex::Complex64 as C64;


pub use connection::{ConnectionEval, FormEval};



pub use models::{ChartPoint, CoframeEval, FrameEval, Model};
pub use chains::{ChainState, CurveSample};
pub use curvature::{ChernMoserEval, CurvatureEval};
pub use embeddings::{AdaptedPair, CrEmbedding, SecondFundamentalForm};
pub use fefferman::{FeffermanState, MetricEval};
