//! Seeded random streams and the handful of scalar distributions the
//! forecasting pipeline samples from or evaluates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT as StatrsT};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// A reproducible random stream keyed by `(master_seed, stream_id)`.
///
/// Backed by ChaCha, whose 64-bit stream selector gives every id its own
/// independent keystream. Replication `r` can therefore own stream `r` no
/// matter which thread runs it.
#[derive(Debug, Clone)]
pub struct RandomStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha12Rng,
}

impl RandomStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream sharing this master seed.
    pub fn sibling(&self, stream_id: u64) -> Self {
        Self::new(self.master_seed, stream_id)
    }

    /// A child stream whose id is a hash of this stream's id and `tag`.
    ///
    /// Lets nested work (replication, method, forecast origin) own a stream
    /// without a global id table.
    pub fn derive(&self, tag: u64) -> Self {
        let mut z = self.stream_id ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Self::new(self.master_seed, z ^ (z >> 31))
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform draw on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Gamma draw with a pre-validated shape and rate.
    #[inline]
    pub(crate) fn gamma_unchecked(&mut self, shape: f64, rate: f64) -> f64 {
        Gamma::new(shape, 1.0 / rate)
            .expect("validated gamma parameters")
            .sample(&mut self.rng)
    }
}

/// Draw from `N(mean, variance)`. A zero variance returns `mean` exactly.
pub fn sample_normal(stream: &mut RandomStream, mean: f64, variance: f64) -> Result<f64> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::Domain(format!(
            "normal variance must be >= 0, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(mean);
    }
    Ok(mean + variance.sqrt() * stream.standard_normal())
}

/// Draw from the gamma distribution with the given shape and rate (mean `shape / rate`).
pub fn sample_gamma(stream: &mut RandomStream, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Domain(format!(
            "gamma needs shape > 0 and rate > 0, got shape={shape}, rate={rate}"
        )));
    }
    Ok(stream.gamma_unchecked(shape, rate))
}

/// Draw from `Beta(a, b)` as a ratio of gammas.
pub fn sample_beta(stream: &mut RandomStream, a: f64, b: f64) -> Result<f64> {
    let x = sample_gamma(stream, a, 1.0)?;
    let y = sample_gamma(stream, b, 1.0)?;
    Ok(x / (x + y))
}

/// Location-scale Student-t. `scale` is variance-like: for large `dof` the
/// density approaches `N(location, scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentT {
    pub location: f64,
    pub scale: f64,
    pub dof: f64,
}

impl StudentT {
    pub fn new(location: f64, scale: f64, dof: f64) -> Result<Self> {
        if !location.is_finite() {
            return Err(Error::NonFinite(format!("student-t location {location}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!(
                "student-t scale must be > 0, got {scale}"
            )));
        }
        if !(dof > 0.0) || dof.is_nan() {
            return Err(Error::Domain(format!(
                "student-t dof must be > 0, got {dof}"
            )));
        }
        Ok(Self {
            location,
            scale,
            dof,
        })
    }

    /// Variance of the distribution; infinite for `dof <= 2`.
    pub fn variance(&self) -> f64 {
        if self.dof > 2.0 {
            self.scale * self.dof / (self.dof - 2.0)
        } else {
            f64::INFINITY
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let z = (x - self.location) / self.scale.sqrt();
        StatrsT::new(0.0, 1.0, self.dof)
            .map(|t| t.cdf(z))
            .unwrap_or(f64::NAN)
    }

    /// Scale-mixture draw: `location + z * sqrt(scale / lambda)` with
    /// `lambda ~ G(dof/2, dof/2)`.
    pub fn sample(&self, stream: &mut RandomStream) -> f64 {
        let lambda = stream.gamma_unchecked(0.5 * self.dof, 0.5 * self.dof);
        self.location + stream.standard_normal() * (self.scale / lambda).sqrt()
    }
}

/// One-step predictive density emitted by a forecasting agent.
pub type ForecastDensity = StudentT;

/// Log density of the location-scale Student-t at `x`.
pub fn student_t_logpdf(x: f64, d: &StudentT) -> f64 {
    let nu = d.dof;
    let z2 = (x - d.location).powi(2) / d.scale;
    ln_gamma(0.5 * (nu + 1.0))
        - ln_gamma(0.5 * nu)
        - 0.5 * (nu * std::f64::consts::PI * d.scale).ln()
        - 0.5 * (nu + 1.0) * (z2 / nu).ln_1p()
}

/// `KL(N(mean1, var1) || N(mean2, var2))`.
pub fn kl_normal(mean1: f64, var1: f64, mean2: f64, var2: f64) -> Result<f64> {
    if !(var1 > 0.0) || !(var2 > 0.0) {
        return Err(Error::Domain(format!(
            "kl_normal variances must be > 0, got {var1} and {var2}"
        )));
    }
    Ok(0.5 * ((var2 / var1).ln() + var1 / var2 + (mean1 - mean2).powi(2) / var2 - 1.0))
}

/// Log density of `N(mean, var)`.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}
