//! Sliding-window visual-inertial estimator with optional GPS and
//! twin-registration factors.

mod factors;
mod preint;
mod session;
mod window;

pub use factors::{
    bias_residual, derive_map_measurement, huber, imu_information, imu_residual, map_residual, visual_residual,
    GpsFactor, ImuEval, KeyframeState, MapEval, MapFactor, StateJacobian, Vector9, VisualEval, WindowPrior, STATE_DIM,
};
pub use preint::{preintegrate, ImuNoise, Matrix9, PreintegratedImu};
pub use session::*;
pub use window::*;

use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("IMU samples do not cover [{t0}, {t1}]")]
    ImuCoverage { t0: f64, t1: f64 },
    #[error("IMU gap of {gap} s at t = {at}")]
    ImuGap { at: f64, gap: f64 },
    #[error("solver diverged: {0}")]
    Diverged(String),
    #[error("invalid estimator input: {0}")]
    InvalidInput(String),
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(u64),
}
