use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::GnssError;

const JITTER: f64 = 1e-8;

/// Fixed hyperparameters of the squared-exponential kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self { length_scale: 15.0, signal_variance: 4.0, noise_variance: 1.0 }
    }
}

/// Exact 1-D Gaussian-process regressor of visible-satellite count against
/// height, with a constant prior mean equal to the training mean. Serialized
/// as its training data and refitted on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GpTraining", into = "GpTraining")]
pub struct SatCountGp {
    pub config: GpConfig,
    pub prior_mean: f64,
    pub heights: Vec<f64>,
    pub counts: Vec<f64>,
    /// `(K + noise I)^-1 (y - prior_mean)`.
    pub alpha: Vec<f64>,
    /// Lower Cholesky factor of `K + noise I + jitter I`.
    factor: DMatrix<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GpTraining {
    config: GpConfig,
    heights: Vec<f64>,
    counts: Vec<f64>,
}

impl TryFrom<GpTraining> for SatCountGp {
    type Error = GnssError;

    fn try_from(t: GpTraining) -> Result<Self, GnssError> {
        if t.heights.len() != t.counts.len() {
            return Err(GnssError::InvalidConfig("GP heights and counts differ in length".into()));
        }
        let pairs: Vec<(f64, f64)> = t.heights.into_iter().zip(t.counts).collect();
        fit_gp(&pairs, t.config)
    }
}

impl From<SatCountGp> for GpTraining {
    fn from(gp: SatCountGp) -> Self {
        Self { config: gp.config, heights: gp.heights, counts: gp.counts }
    }
}

impl SatCountGp {
    /// Posterior mean and variance of the latent count at `height`.
    pub fn predict(&self, height: f64) -> (f64, f64) {
        let k: DVector<f64> =
            DVector::from_iterator(self.heights.len(), self.heights.iter().map(|&h| kernel(&self.config, height, h)));
        let mean = self.prior_mean + k.dot(&DVector::from_column_slice(&self.alpha));
        let v = self.factor.solve_lower_triangular(&k).expect("factor is non-singular");
        let var = (self.config.signal_variance - v.dot(&v)).max(0.0);
        (mean, var)
    }
}

fn kernel(cfg: &GpConfig, a: f64, b: f64) -> f64 {
    let d = (a - b) / cfg.length_scale;
    cfg.signal_variance * (-0.5 * d * d).exp()
}

/// Fits the posterior on `(height, count)` pairs.
pub fn fit_gp(pairs: &[(f64, f64)], cfg: GpConfig) -> Result<SatCountGp, GnssError> {
    if pairs.len() < 2 {
        return Err(GnssError::TooFewSamples { needed: 2, got: pairs.len() });
    }
    if !(cfg.length_scale > 0.0 && cfg.signal_variance > 0.0 && cfg.noise_variance >= 0.0) {
        return Err(GnssError::InvalidConfig("GP hyperparameters must be positive".into()));
    }
    if cfg.noise_variance == 0.0 {
        let mut hs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        hs.sort_by(f64::total_cmp);
        if hs.windows(2).any(|w| w[0] == w[1]) {
            return Err(GnssError::SingularKernel);
        }
    }
    let n = pairs.len();
    let prior_mean = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let mut k = DMatrix::from_fn(n, n, |i, j| kernel(&cfg, pairs[i].0, pairs[j].0));
    for i in 0..n {
        k[(i, i)] += cfg.noise_variance + JITTER;
    }
    let chol = k.cholesky().ok_or(GnssError::SingularKernel)?;
    let y = DVector::from_iterator(n, pairs.iter().map(|p| p.1 - prior_mean));
    let alpha = chol.solve(&y);
    Ok(SatCountGp {
        config: cfg,
        prior_mean,
        heights: pairs.iter().map(|p| p.0).collect(),
        counts: pairs.iter().map(|p| p.1).collect(),
        alpha: alpha.iter().copied().collect(),
        factor: chol.l(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_shrinks_toward_prior() {
        // With two identical-height pairs the posterior at that height is the
        // mean shrunk by s / (s + noise / 2).
        let cfg = GpConfig { length_scale: 5.0, signal_variance: 4.0, noise_variance: 0.5 };
        let gp = fit_gp(&[(10.0, 7.0), (10.0, 7.0)], cfg).unwrap();
        let (m, v) = gp.predict(10.0);
        assert!((m - 7.0).abs() < 1e-9);
        assert!(v < 4.0);
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let gp = fit_gp(&[(0.0, 3.0), (5.0, 9.0), (10.0, 6.0)], GpConfig::default()).unwrap();
        let (m, v) = gp.predict(1e4);
        assert!((m - 6.0).abs() < 1e-12);
        assert!((v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_heights_without_noise_rejected() {
        let cfg = GpConfig { noise_variance: 0.0, ..Default::default() };
        assert_eq!(fit_gp(&[(1.0, 2.0), (1.0, 3.0)], cfg), Err(GnssError::SingularKernel));
    }

    #[test]
    fn matches_dense_reference_solve() {
        let pairs: Vec<(f64, f64)> = (0..25)
            .map(|i| {
                let h = i as f64 * 3.7 % 50.0;
                (h, (4.0 + 6.0 * (h / 20.0).tanh() + ((i * 7) % 3) as f64 - 1.0).round())
            })
            .collect();
        let cfg = GpConfig::default();
        let gp = fit_gp(&pairs, cfg).unwrap();
        let n = pairs.len();
        let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let mut k = DMatrix::from_fn(n, n, |i, j| kernel(&cfg, pairs[i].0, pairs[j].0));
        for i in 0..n {
            k[(i, i)] += cfg.noise_variance + JITTER;
        }
        let y = DVector::from_iterator(n, pairs.iter().map(|p| p.1 - mean));
        let w = k.clone().lu().solve(&y).unwrap();
        for (i, &(h, c)) in pairs.iter().enumerate() {
            let ks = DVector::from_fn(n, |j, _| kernel(&cfg, h, pairs[j].0));
            let expected = mean + ks.dot(&w);
            let (m, v) = gp.predict(h);
            assert!((m - expected).abs() < 1e-8);
            assert!(v <= cfg.signal_variance && v >= 0.0);
            assert!((m - c).abs() <= 3.0 * (v + cfg.noise_variance).sqrt() + 1e-9, "pair {i}");
        }
    }

    #[test]
    fn serde_round_trip_refits_identically() {
        let pairs = [(1.0, 4.0), (12.0, 6.0), (30.0, 9.0), (55.0, 11.0)];
        let gp = fit_gp(&pairs, GpConfig::default()).unwrap();
        let json = serde_json::to_string(&gp).unwrap();
        assert!(!json.contains("alpha"));
        let back: SatCountGp = serde_json::from_str(&json).unwrap();
        assert_eq!(gp, back);
    }
}
