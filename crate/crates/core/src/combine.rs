//! Linear pooling of agent point forecasts: equal weights, Bayesian model
//! averaging on sequential predictive scores, and Mallows-criterion
//! weights over the unit simplex.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

const SIMPLEX_TOL: f64 = 1e-12;

/// Pooling weights on the unit simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Validates simplex membership (entries in `[0, 1]`, sum 1 within 1e-12).
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Empty("weight vector"));
        }
        if w.iter()
            .any(|v| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(v))
        {
            return Err(Error::Domain(format!("weights outside [0, 1]: {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(w))
    }

    /// Clamps tiny negatives and renormalizes before validating.
    fn from_raw(mut w: Vec<f64>) -> Result<Self> {
        w.iter_mut().for_each(|v| *v = v.max(0.0));
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Numerical("weights vanished".into()));
        }
        w.iter_mut().for_each(|v| *v /= sum);
        Self::new(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn equal_weights(j: usize) -> Result<WeightVector> {
    if j == 0 {
        return Err(Error::Empty("agent set"));
    }
    WeightVector::new(vec![1.0 / j as f64; j])
}

/// Cumulative log predictive score per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmaScoreState {
    pub scores: Vec<f64>,
}

impl BmaScoreState {
    pub fn new(j: usize) -> Self {
        Self {
            scores: vec![0.0; j],
        }
    }

    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("cumulative scores".into()));
        }
        Ok(Self { scores })
    }

    /// Posterior model probabilities implied by the current scores.
    pub fn weights(&self) -> Result<WeightVector> {
        softmax(&self.scores)
    }
}

fn softmax(scores: &[f64]) -> Result<WeightVector> {
    if scores.is_empty() {
        return Err(Error::Empty("score vector"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    WeightVector::from_raw(w)
}

/// Adds one round of log predictive densities and returns the new weights.
pub fn bma_update(
    state: &BmaScoreState,
    log_pred_density: &[f64],
) -> Result<(BmaScoreState, WeightVector)> {
    ensure_dim(state.scores.len(), log_pred_density.len())?;
    if let Some(bad) = log_pred_density.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("log predictive density {bad}")));
    }
    let scores: Vec<f64> = state
        .scores
        .iter()
        .zip(log_pred_density)
        .map(|(s, l)| s + l)
        .collect();
    let next = BmaScoreState::from_scores(scores)?;
    let w = next.weights()?;
    Ok((next, w))
}

/// Mallows criterion `sum_s (y_s - sum_j w_j yhat_js)^2 + 2 sigma2 sum_j w_j k_j`.
pub fn mallows_criterion(
    w: &[f64],
    point_forecasts: &[Vec<f64>],
    realized: &[f64],
    k: &[usize],
    sigma2_hat: f64,
) -> f64 {
    let sse: f64 = realized
        .iter()
        .enumerate()
        .map(|(s, y)| {
            let pooled: f64 = w.iter().zip(point_forecasts).map(|(wj, f)| wj * f[s]).sum();
            (y - pooled).powi(2)
        })
        .sum();
    let penalty: f64 = w.iter().zip(k).map(|(wj, kj)| wj * *kj as f64).sum();
    sse + 2.0 * sigma2_hat * penalty
}

/// Simplex weights minimizing the Mallows criterion over a forecast window.
///
/// Two agents are solved in closed form; larger sets use pairwise
/// coordinate descent (mass moved between two coordinates at a time, which
/// stays on the simplex) from equal weights until no pair improves the
/// criterion by more than 1e-10.
pub fn mallows_weights(
    point_forecasts: &[Vec<f64>],
    realized: &[f64],
    k: &[usize],
    sigma2_hat: f64,
) -> Result<WeightVector> {
    let j = point_forecasts.len();
    if j == 0 {
        return Err(Error::Empty("agent set"));
    }
    ensure_dim(j, k.len())?;
    let n = realized.len();
    if n == 0 {
        return Err(Error::Empty("forecast window"));
    }
    for f in point_forecasts {
        ensure_dim(n, f.len())?;
    }
    if !(sigma2_hat >= 0.0) || !sigma2_hat.is_finite() {
        return Err(Error::Domain(format!(
            "sigma2_hat must be >= 0, got {sigma2_hat}"
        )));
    }
    if realized
        .iter()
        .chain(point_forecasts.iter().flatten())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("forecast window".into()));
    }
    if j == 1 {
        return WeightVector::new(vec![1.0]);
    }

    // Quadratic form: C(w) = w'Qw - 2 b'w + const.
    let mut q = vec![0.0; j * j];
    let mut b = vec![0.0; j];
    for a in 0..j {
        for c in a..j {
            let v: f64 = point_forecasts[a]
                .iter()
                .zip(&point_forecasts[c])
                .map(|(x, y)| x * y)
                .sum();
            q[a * j + c] = v;
            q[c * j + a] = v;
        }
        let cross: f64 = point_forecasts[a]
            .iter()
            .zip(realized)
            .map(|(x, y)| x * y)
            .sum();
        b[a] = cross - sigma2_hat * k[a] as f64;
    }

    if j == 2 {
        let d2 = q[0] - 2.0 * q[1] + q[3];
        // Linear coefficient of w1 after substituting w2 = 1 - w1, halved.
        let lin = (b[0] - b[1]) - (q[1] - q[3]);
        let w1 = if d2 > 0.0 {
            (lin / d2).clamp(0.0, 1.0)
        } else if lin > 0.0 {
            1.0
        } else if lin < 0.0 {
            0.0
        } else {
            0.5
        };
        return WeightVector::from_raw(vec![w1, 1.0 - w1]);
    }

    let mut w = vec![1.0 / j as f64; j];
    // gradient / 2 = Q w - b
    let mut g: Vec<f64> = (0..j)
        .map(|a| (0..j).map(|c| q[a * j + c] * w[c]).sum::<f64>() - b[a])
        .collect();
    for _sweep in 0..10_000 {
        let mut best_gain = 0.0f64;
        for a in 0..j {
            for c in (a + 1)..j {
                // Move t units of mass from c to a.
                let curv = q[a * j + a] + q[c * j + c] - 2.0 * q[a * j + c];
                let slope = g[a] - g[c];
                let (lo, hi) = (-w[a], w[c]);
                let t = if curv > 0.0 {
                    (-slope / curv).clamp(lo, hi)
                } else if slope < 0.0 {
                    hi
                } else if slope > 0.0 {
                    lo
                } else {
                    0.0
                };
                if t == 0.0 {
                    continue;
                }
                let gain = -(2.0 * slope * t + curv * t * t);
                if gain <= 0.0 {
                    continue;
                }
                best_gain = best_gain.max(gain);
                w[a] += t;
                w[c] -= t;
                for (r, gr) in g.iter_mut().enumerate() {
                    *gr += t * (q[r * j + a] - q[r * j + c]);
                }
            }
        }
        if best_gain < 1e-10 {
            break;
        }
    }
    WeightVector::from_raw(w)
}

/// Pooled point forecast `sum_j w_j means_j`.
pub fn pool_point(w: &WeightVector, means: &[f64]) -> Result<f64> {
    ensure_dim(w.len(), means.len())?;
    Ok(w.as_slice().iter().zip(means).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn equal_weight_cases() {
        assert_eq!(equal_weights(2).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(equal_weights(1).unwrap().as_slice(), &[1.0]);
        assert_eq!(equal_weights(4).unwrap().as_slice(), &[0.25; 4]);
        assert!(equal_weights(0).is_err());
    }

    #[test]
    fn bma_cases() {
        let st = BmaScoreState::new(2);
        let (_, w) = bma_update(&st, &[0.3, 0.3]).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
        let (_, w) = bma_update(&st, &[0.0, 3f64.ln()]).unwrap();
        assert_abs_diff_eq!(w.as_slice()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(w.as_slice()[1], 0.75, epsilon = 1e-15);
        let (_, w) = bma_update(&st, &[0.0, -1e4]).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
        assert!(bma_update(&st, &[f64::NAN, 0.0]).is_err());
        assert!(bma_update(&st, &[0.0]).is_err());
    }

    #[test]
    fn mallows_cases() {
        let y = [1.0, 0.0];
        let f = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let w = mallows_weights(&f, &y, &[1, 1], 0.0).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
        let w = mallows_weights(&f, &y, &[2, 1], 0.5).unwrap();
        assert_abs_diff_eq!(w.as_slice()[0], 0.5, epsilon = 1e-15);
        let same = vec![vec![0.3, 0.1, 0.5], vec![0.3, 0.1, 0.5]];
        let w = mallows_weights(&same, &[0.2, 0.2, 0.2], &[2, 2], 0.1).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
        assert!(mallows_weights(&[vec![], vec![]], &[], &[1, 1], 0.1).is_err());
    }

    #[test]
    fn mallows_three_agents_picks_exact_agent() {
        let y: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = vec![
            y.iter().map(|v| v + 0.3).collect(),
            y.clone(),
            y.iter().map(|v| -v).collect(),
        ];
        let w = mallows_weights(&f, &y, &[1, 1, 1], 0.0).unwrap();
        assert!((w.as_slice()[1] - 1.0).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn pool_cases() {
        let w = WeightVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(pool_point(&w, &[2.0, 4.0]).unwrap(), 3.0);
        let w = WeightVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(pool_point(&w, &[2.0, 4.0]).unwrap(), 2.0);
        let w = WeightVector::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(pool_point(&w, &[0.0, 4.0]).unwrap(), 3.0);
        assert!(pool_point(&w, &[1.0]).is_err());
    }
}
