//! Picks the registration weight scale on a calibration run so that map
//! factors are statistically consistent with their actual error.

use serde::Serialize;

use twinloc::estimator::Mode;

use crate::error::CliError;
use crate::pipeline::run_scenario;
use crate::scenario::Scenario;

/// Dimension of the map residual.
const MAP_DOF: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BetaCalibration {
    /// Scale used for the calibration run.
    pub beta_run: f64,
    /// Mean normalized squared error of the map measurements at `beta_run`.
    pub mean_nees: f64,
    pub measurements: usize,
    /// Scale at which the mean error equals the residual dimension.
    pub beta: f64,
}

/// Runs the twin mode once and rescales the configured weight scale so the
/// mean NEES of its map measurements against ground truth becomes 6. The
/// weight is linear in the scale, so one run suffices to first order.
pub fn calibrate_beta(sc: &Scenario) -> Result<BetaCalibration, CliError> {
    let run = run_scenario(sc, Mode::VioTwin, true)?;
    let measurements = &run.session.map_measurements;
    if measurements.is_empty() {
        return Err(CliError::Evaluation("calibration run produced no map factors".into()));
    }
    let truth = &sc.ground_truth;
    let total: f64 = measurements
        .iter()
        .map(|m| {
            let k = truth.partition_point(|g| g.t < m.t).min(truth.len() - 1);
            let k = if k > 0 && (truth[k - 1].t - m.t).abs() < (truth[k].t - m.t).abs() { k - 1 } else { k };
            m.nees(&truth[k].pose)
        })
        .sum();
    let mean_nees = total / measurements.len() as f64;
    let beta_run = sc.config.estimator.weighting.beta;
    Ok(BetaCalibration { beta_run, mean_nees, measurements: measurements.len(), beta: beta_run * MAP_DOF / mean_nees })
}
