//! Singularly perturbed second-order averaging for high-amplitude,
//! high-frequency oscillatory systems, and a dither-driven 3D source seeker
//! on SO(3) built on top of it.
//!
//! The pipeline, bottom to top:
//!
//! * [`numkit`]: matrix exponential, Simpson quadrature, finite differences, RK4.
//! * [`so3`]: hat map, Rodrigues exponential, the ℝ⁹ frame embedding, projection.
//! * [`system`]: the slow/fast system class and its structural checks.
//! * [`averaging`]: periodic correctors, the reduced system and its bracket average.
//! * [`seeker`]: the source-seeking controller and its closed-form average.
//! * [`harness`]: trajectory comparisons, convergence sweeps, stability probes.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod averaging;
pub mod error;
pub mod harness;
pub mod numkit;
pub mod seeker;
pub mod so3;
pub mod system;

pub use averaging::{AveragedSystem, CorrectorSolution, ReducedSystem};
pub use error::{Error, Result};
pub use harness::{RunRecord, StabilityProbeReport, SweepReport};
pub use numkit::{Matrix, TimeGrid, Vector};
pub use seeker::{AveragedSeekerState, ScalarField, SeekerConfig, SeekerState};
pub use so3::{EmbeddedFrame, Rotation};
pub use system::{FullState, OscillatorySystemSpec, ShiftedState};
