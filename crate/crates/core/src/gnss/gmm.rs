use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::GnssError;
use crate::rng::substream;

const MIN_VARIANCE: f64 = 1e-6;
const MAX_ITERATIONS: usize = 200;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

/// One-dimensional Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm1d {
    pub components: Vec<GmmComponent>,
}

/// Result of an EM fit including the log-likelihood after each iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub gmm: Gmm1d,
    pub log_likelihood: Vec<f64>,
}

impl Gmm1d {
    pub fn log_likelihood(&self, data: &[f64]) -> f64 {
        data.iter().map(|&x| self.log_density(x)).sum()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self.components.iter().map(|c| c.weight.ln() + log_normal(x, c.mean, c.variance)).collect();
        log_sum_exp(&terms)
    }

    /// Picks a component by weight, then draws from its Gaussian.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = self.components[pick];
        Normal::new(c.mean, c.variance.sqrt()).map(|n| n.sample(rng)).unwrap_or(c.mean)
    }
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// k-means++ seeding: first center uniform, the rest with probability
/// proportional to squared distance to the nearest chosen center.
fn kmeans_pp(data: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = vec![data[rng.random_range(0..data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            data[rng.random_range(0..data.len())]
        } else {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = data.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            data[pick]
        };
        centers.push(next);
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min((x - next).powi(2));
        }
    }
    centers
}

/// Expectation-maximization with k-means++ initialization. Stops when the
/// log-likelihood gain falls below `1e-10` relative or after 200 iterations.
pub fn fit_gmm(data: &[f64], k: usize, seed: u64) -> Result<GmmFit, GnssError> {
    if k == 0 {
        return Err(GnssError::InvalidConfig("mixture needs at least one component".into()));
    }
    if data.len() < 10 * k {
        return Err(GnssError::TooFewSamples { needed: 10 * k, got: data.len() });
    }
    let n = data.len() as f64;
    let mut rng = substream(seed, "gmm-init");
    let centers = kmeans_pp(data, k, &mut rng);

    // Hard-assign to the nearest center for the initial parameters.
    let mut resp = vec![vec![0.0; data.len()]; k];
    for (i, x) in data.iter().enumerate() {
        let best = (0..k).min_by(|&a, &b| (x - centers[a]).abs().total_cmp(&(x - centers[b]).abs())).unwrap();
        resp[best][i] = 1.0;
    }
    let global_mean = data.iter().sum::<f64>() / n;
    let global_var = data.iter().map(|x| (x - global_mean).powi(2)).sum::<f64>() / n;
    let mut gmm = m_step(data, &resp, global_var)?;

    let mut history = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..MAX_ITERATIONS {
        // E step.
        let mut ll = 0.0;
        let mut logs = vec![0.0; k];
        for (i, &x) in data.iter().enumerate() {
            for (j, c) in gmm.components.iter().enumerate() {
                logs[j] = c.weight.ln() + log_normal(x, c.mean, c.variance);
            }
            let lse = log_sum_exp(&logs);
            ll += lse;
            for j in 0..k {
                resp[j][i] = (logs[j] - lse).exp();
            }
        }
        history.push(ll);
        if (ll - prev).abs() <= 1e-10 * ll.abs().max(1.0) {
            break;
        }
        prev = ll;
        gmm = m_step(data, &resp, global_var)?;
    }
    // The final E step evaluated the current parameters.
    Ok(GmmFit { gmm, log_likelihood: history })
}

fn m_step(data: &[f64], resp: &[Vec<f64>], fallback_var: f64) -> Result<Gmm1d, GnssError> {
    let n = data.len() as f64;
    let mut components = Vec::with_capacity(resp.len());
    for r in resp {
        let nk: f64 = r.iter().sum();
        if nk <= 0.0 {
            // Empty cluster: keep a broad component with negligible weight.
            components.push(GmmComponent { weight: 1e-12, mean: 0.0, variance: fallback_var.max(1.0) });
            continue;
        }
        let mean = r.iter().zip(data).map(|(w, x)| w * x).sum::<f64>() / nk;
        let var = r.iter().zip(data).map(|(w, x)| w * (x - mean).powi(2)).sum::<f64>() / nk;
        if !(var >= MIN_VARIANCE) {
            return Err(GnssError::DegenerateComponent { mean, variance: var });
        }
        components.push(GmmComponent { weight: nk / n, mean, variance: var });
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    for c in &mut components {
        c.weight /= total;
    }
    Ok(Gmm1d { components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn two_component(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Normal::new(0.0, 1.0).unwrap();
        let b = Normal::new(15.0, 1.0).unwrap();
        (0..n).map(|_| if rng.random::<f64>() < 0.7 { a.sample(&mut rng) } else { b.sample(&mut rng) }).collect()
    }

    #[test]
    fn single_component_is_sample_moments() {
        let data = two_component(500, 2);
        let fit = fit_gmm(&data, 1, 0).unwrap();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let c = fit.gmm.components[0];
        assert!((c.mean - mean).abs() < 1e-9);
        assert!((c.variance - var).abs() < 1e-9);
        assert!((c.weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_known_generator() {
        let data = two_component(5000, 11);
        let fit = fit_gmm(&data, 2, 3).unwrap();
        let mut c = fit.gmm.components.clone();
        c.sort_by(|a, b| a.mean.total_cmp(&b.mean));
        assert!(c[0].mean.abs() < 0.5 && (c[1].mean - 15.0).abs() < 0.5);
        assert!((c[0].weight - 0.7).abs() < 0.05 && (c[1].weight - 0.3).abs() < 0.05);
    }

    #[test]
    fn log_likelihood_monotone() {
        let data = two_component(800, 5);
        let fit = fit_gmm(&data, 3, 9).unwrap();
        assert!(fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        let sum: f64 = fit.gmm.components.iter().map(|c| c.weight).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_data_is_degenerate() {
        let data = vec![2.0; 100];
        assert!(matches!(fit_gmm(&data, 1, 0), Err(GnssError::DegenerateComponent { .. })));
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(fit_gmm(&[1.0; 15], 2, 0), Err(GnssError::TooFewSamples { .. })));
    }
}
