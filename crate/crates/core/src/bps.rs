//! Bayesian predictive synthesis with a dynamic-linear-model synthesis
//! function
//!
//! ```text
//! y_t = theta_{0,t} + x_t' theta_{1:J,t} + e_t,   e_t ~ N(0, v_t)
//! ```
//!
//! where `x_t` is a latent draw from the agents' one-step predictive
//! densities. The sampler alternates between the coefficient/volatility
//! paths (forward filter, backward sample), the Student-t mixing weights of
//! each agent density, and the latent agent values.

use serde::{Deserialize, Serialize};

use crate::dlm::{self, Discounts, FfbsScratch, FilterHistory, NigState, Trajectory};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg;
use crate::statdist::{ForecastDensity, RandomStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpsConfig {
    /// Prior coefficient mean `(intercept, agent 1, .., agent J)`. `None`
    /// means `(0, 1/J, .., 1/J)`.
    pub m0: Option<Vec<f64>>,
    /// The prior coefficient scale is `c0 * I`.
    pub c0: f64,
    pub s0: f64,
    pub n0: f64,
    pub discounts: Discounts,
    pub burn_in: usize,
    pub kept_draws: usize,
    pub warm_start_burn: usize,
}

impl Default for BpsConfig {
    fn default() -> Self {
        Self {
            m0: None,
            c0: 1.0,
            s0: 0.002,
            n0: 10.0,
            discounts: Discounts {
                delta: 0.99,
                beta: 0.95,
            },
            burn_in: 2000,
            kept_draws: 3000,
            warm_start_burn: 500,
        }
    }
}

impl BpsConfig {
    pub fn validate(&self) -> Result<()> {
        self.discounts.validate()?;
        for (name, v) in [("c0", self.c0), ("s0", self.s0), ("n0", self.n0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!(
                    "bps {name} must be positive, got {v}"
                )));
            }
        }
        if self.kept_draws == 0 {
            return Err(Error::Domain("bps kept_draws must be at least 1".into()));
        }
        if let Some(m0) = &self.m0 {
            if m0.len() < 2 {
                return Err(Error::Domain(
                    "bps m0 needs an intercept and at least one agent".into(),
                ));
            }
            if m0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("bps m0".into()));
            }
        }
        Ok(())
    }

    /// Initial coefficient prior for `j` agents.
    pub fn prior(&self, j: usize) -> Result<NigState> {
        self.validate()?;
        if j == 0 {
            return Err(Error::Empty("agent panel"));
        }
        let m0 = match &self.m0 {
            Some(m) => {
                ensure_dim(j + 1, m.len())?;
                m.clone()
            }
            None => std::iter::once(0.0)
                .chain(std::iter::repeat_n(1.0 / j as f64, j))
                .collect(),
        };
        NigState::isotropic(m0, self.c0, self.n0, self.s0)
    }
}

/// How much of each kept draw to retain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathStorage {
    /// Whole coefficient, volatility and latent-agent paths.
    #[default]
    Full,
    /// Only what one-step prediction needs.
    TerminalOnly,
}

/// Latent agent values and mixing weights at the end of a chain, row-major
/// `T x J`. Seeds the next chain under the warm-start protocol.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainState {
    j: usize,
    x: Vec<f64>,
    lambda: Vec<f64>,
}

impl ChainState {
    pub fn len(&self) -> usize {
        self.x.len().checked_div(self.j).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self, t: usize) -> &[f64] {
        &self.x[t * self.j..(t + 1) * self.j]
    }
}

/// Kept Gibbs draws. Time index `t` runs over `1..=T`; `theta(k, 0)` is the
/// draw at the initial prior.
#[derive(Debug, Clone)]
pub struct SynthesisDraws {
    j: usize,
    len: usize,
    kept: usize,
    storage: PathStorage,
    // Terminal quantities, one entry (or block) per draw.
    term_theta: Vec<f64>,
    term_v: Vec<f64>,
    term_c: Vec<f64>,
    term_s: Vec<f64>,
    term_n: Vec<f64>,
    // Full paths, present under `PathStorage::Full`.
    theta: Vec<f64>,
    v: Vec<f64>,
    x: Vec<f64>,
    chain: ChainState,
}

impl SynthesisDraws {
    pub fn n_agents(&self) -> usize {
        self.j
    }

    /// Number of observations `T` the chain was fitted on.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.kept == 0
    }

    pub fn n_draws(&self) -> usize {
        self.kept
    }

    pub fn has_paths(&self) -> bool {
        self.storage == PathStorage::Full
    }

    fn p(&self) -> usize {
        self.j + 1
    }

    pub fn terminal_theta(&self, k: usize) -> &[f64] {
        let p = self.p();
        &self.term_theta[k * p..(k + 1) * p]
    }

    pub fn terminal_v(&self, k: usize) -> f64 {
        self.term_v[k]
    }

    /// Coefficients `(intercept, agents..)` of draw `k` at time `t` (`0..=T`).
    ///
    /// # Panics
    /// If paths were not stored.
    pub fn theta(&self, k: usize, t: usize) -> &[f64] {
        assert!(self.has_paths(), "draws were kept without paths");
        let p = self.p();
        let off = (k * (self.len + 1) + t) * p;
        &self.theta[off..off + p]
    }

    /// Observation variance of draw `k` at time `t` (`1..=T`).
    pub fn v(&self, k: usize, t: usize) -> f64 {
        assert!(self.has_paths(), "draws were kept without paths");
        self.v[k * self.len + t - 1]
    }

    /// Latent agent values of draw `k` at time `t` (`1..=T`).
    pub fn x(&self, k: usize, t: usize) -> &[f64] {
        assert!(self.has_paths(), "draws were kept without paths");
        let off = (k * self.len + t - 1) * self.j;
        &self.x[off..off + self.j]
    }

    /// Posterior mean of the coefficients at time `t` (`0..=T`).
    pub fn theta_mean(&self, t: usize) -> Vec<f64> {
        let p = self.p();
        let mut out = vec![0.0; p];
        for k in 0..self.kept {
            let th = if t == self.len {
                self.terminal_theta(k)
            } else {
                self.theta(k, t)
            };
            for (o, v) in out.iter_mut().zip(th) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.kept as f64);
        out
    }

    /// Chain state after the last sweep.
    pub fn chain_state(&self) -> &ChainState {
        &self.chain
    }
}

/// Panel of agent densities flattened into parallel arrays.
struct Panel {
    j: usize,
    loc: Vec<f64>,
    scale: Vec<f64>,
    dof: Vec<f64>,
}

impl Panel {
    fn new(h: &[Vec<ForecastDensity>]) -> Result<Self> {
        let j = h.first().map(Vec::len).unwrap_or(0);
        if j == 0 {
            return Err(Error::Empty("agent panel"));
        }
        let mut panel = Panel {
            j,
            loc: Vec::with_capacity(h.len() * j),
            scale: Vec::with_capacity(h.len() * j),
            dof: Vec::with_capacity(h.len() * j),
        };
        for (t, row) in h.iter().enumerate() {
            ensure_dim(j, row.len())?;
            for d in row {
                if !(d.location.is_finite() && d.scale.is_finite() && d.dof.is_finite()) {
                    return Err(Error::NonFinite(format!("agent density at t={}", t + 1)));
                }
                if !(d.scale > 0.0 && d.dof > 0.0) {
                    return Err(Error::Domain(format!(
                        "degenerate agent density at t={}",
                        t + 1
                    )));
                }
                panel.loc.push(d.location);
                panel.scale.push(d.scale);
                panel.dof.push(d.dof);
            }
        }
        Ok(panel)
    }
}

/// Options beyond the configuration for a single chain.
#[derive(Debug, Clone, Copy, Default)]
pub struct GibbsOptions<'a> {
    pub storage: PathStorage,
    /// Start from a previous chain (rows beyond it start at the agent
    /// locations) and burn only `warm_start_burn` sweeps.
    pub warm: Option<&'a ChainState>,
}

/// Runs the sampler with full path storage and a cold start.
pub fn gibbs_run(
    y: &[f64],
    h: &[Vec<ForecastDensity>],
    cfg: &BpsConfig,
    stream: &mut RandomStream,
) -> Result<SynthesisDraws> {
    gibbs_run_with(y, h, cfg, stream, GibbsOptions::default())
}

pub fn gibbs_run_with(
    y: &[f64],
    h: &[Vec<ForecastDensity>],
    cfg: &BpsConfig,
    stream: &mut RandomStream,
    opts: GibbsOptions<'_>,
) -> Result<SynthesisDraws> {
    let big_t = y.len();
    if big_t < 2 {
        return Err(Error::Domain(format!(
            "synthesis needs at least 2 observations, got {big_t}"
        )));
    }
    ensure_dim(big_t, h.len())?;
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("target at t={}", i + 1)));
    }
    let panel = Panel::new(h)?;
    let j = panel.j;
    let p = j + 1;
    let prior = cfg.prior(j)?;
    let d = cfg.discounts;

    let mut x = panel.loc.clone();
    let mut lambda = vec![1.0; big_t * j];
    let burn = match opts.warm {
        Some(w) if !w.is_empty() => {
            ensure_dim(j, w.j)?;
            let rows = w.len().min(big_t);
            x[..rows * j].copy_from_slice(&w.x[..rows * j]);
            lambda[..rows * j].copy_from_slice(&w.lambda[..rows * j]);
            cfg.warm_start_burn
        }
        _ => cfg.burn_in,
    };

    let kept = cfg.kept_draws;
    let full = opts.storage == PathStorage::Full;
    let mut out = SynthesisDraws {
        j,
        len: big_t,
        kept,
        storage: opts.storage,
        term_theta: Vec::with_capacity(kept * p),
        term_v: Vec::with_capacity(kept),
        term_c: Vec::with_capacity(kept * p * p),
        term_s: Vec::with_capacity(kept),
        term_n: Vec::with_capacity(kept),
        theta: Vec::with_capacity(if full { kept * (big_t + 1) * p } else { 0 }),
        v: Vec::with_capacity(if full { kept * big_t } else { 0 }),
        x: Vec::with_capacity(if full { kept * big_t * j } else { 0 }),
        chain: ChainState::default(),
    };

    let mut sweeper = Sweeper::new(big_t, j);
    for sweep in 0..burn + kept {
        sweeper.sweep(y, &panel, &prior, d, &mut x, &mut lambda, stream)?;
        if sweep < burn {
            continue;
        }
        let hist = &sweeper.hist;
        let traj = &sweeper.traj;
        out.term_theta.extend_from_slice(traj.theta(big_t));
        out.term_v.push(traj.v(big_t));
        out.term_c.extend_from_slice(hist.posterior_scale(big_t));
        out.term_s.push(hist.posterior_s(big_t));
        out.term_n.push(hist.posterior_dof(big_t));
        if full {
            for t in 0..=big_t {
                out.theta.extend_from_slice(traj.theta(t));
            }
            out.v.extend_from_slice(&traj.volatilities()[1..]);
            out.x.extend_from_slice(&sweeper.x_used);
        }
    }
    out.chain = ChainState { j, x, lambda };
    Ok(out)
}

/// Buffers reused across sweeps.
struct Sweeper {
    j: usize,
    reg: Vec<f64>,
    x_used: Vec<f64>,
    hist: FilterHistory,
    traj: Trajectory,
    scratch: FfbsScratch,
    prec: Vec<f64>,
    rhs: Vec<f64>,
    z: Vec<f64>,
}

impl Sweeper {
    fn new(big_t: usize, j: usize) -> Self {
        Self {
            j,
            reg: vec![0.0; big_t * (j + 1)],
            x_used: vec![0.0; big_t * j],
            hist: FilterHistory::default(),
            traj: Trajectory::default(),
            scratch: FfbsScratch::default(),
            prec: vec![0.0; j * j],
            rhs: vec![0.0; j],
            z: vec![0.0; j],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn sweep(
        &mut self,
        y: &[f64],
        panel: &Panel,
        prior: &NigState,
        d: Discounts,
        x: &mut [f64],
        lambda: &mut [f64],
        stream: &mut RandomStream,
    ) -> Result<()> {
        let j = self.j;
        let p = j + 1;
        for (t, row) in self.reg.chunks_exact_mut(p).enumerate() {
            row[0] = 1.0;
            row[1..].copy_from_slice(&x[t * j..(t + 1) * j]);
        }
        // The coefficients below are drawn given these x values, so they are
        // the latent values that belong with this sweep's draw.
        self.x_used.copy_from_slice(x);
        dlm::filter_into(&mut self.hist, y, &self.reg, prior, d)?;
        dlm::ffbs_into(&self.hist, d, stream, &mut self.traj, &mut self.scratch)?;

        for (t, &yt) in y.iter().enumerate() {
            let theta = self.traj.theta(t + 1);
            let v = self.traj.v(t + 1);
            let (theta0, w) = (theta[0], &theta[1..]);
            let row = t * j..(t + 1) * j;
            let (xt, lt) = (&mut x[row.clone()], &mut lambda[row.clone()]);
            let (f, q, dof) = (
                &panel.loc[row.clone()],
                &panel.scale[row.clone()],
                &panel.dof[row],
            );

            for i in 0..j {
                let e = xt[i] - f[i];
                lt[i] = stream.gamma_unchecked(0.5 * (dof[i] + 1.0), 0.5 * (dof[i] + e * e / q[i]));
            }
            conditional_x(f, q, lt, w, theta0, v, yt, &mut self.prec, &mut self.rhs)?;
            for zi in self.z.iter_mut() {
                *zi = stream.standard_normal();
            }
            linalg::solve_lower_transpose(&self.prec, &mut self.z);
            for i in 0..j {
                xt[i] = self.rhs[i] + self.z[i];
            }
        }
        Ok(())
    }
}

/// Conditional normal of the latent agent values at one time point.
///
/// On return `prec` holds the lower Cholesky factor of the precision
/// `diag(lambda / q) + w w' / v` and `mean` the conditional mean.
#[allow(clippy::too_many_arguments)]
fn conditional_x(
    f: &[f64],
    q: &[f64],
    lambda: &[f64],
    w: &[f64],
    theta0: f64,
    v: f64,
    y: f64,
    prec: &mut [f64],
    mean: &mut [f64],
) -> Result<()> {
    let j = f.len();
    let resid = (y - theta0) / v;
    for a in 0..j {
        for b in 0..j {
            prec[a * j + b] = w[a] * w[b] / v;
        }
        let d = lambda[a] / q[a];
        prec[a * j + a] += d;
        mean[a] = d * f[a] + w[a] * resid;
    }
    linalg::cholesky_strict(prec, j)?;
    linalg::cholesky_solve(prec, mean);
    Ok(())
}

/// One-step-ahead predictive simulation: one target draw per kept draw.
///
/// Returns the predictive mean (the point forecast) and the draws.
pub fn predict_next(
    draws: &SynthesisDraws,
    h_next: &[ForecastDensity],
    d: Discounts,
    stream: &mut RandomStream,
) -> Result<(f64, Vec<f64>)> {
    d.validate()?;
    if draws.is_empty() {
        return Err(Error::Empty("synthesis draws"));
    }
    ensure_dim(draws.j, h_next.len())?;
    let p = draws.p();
    let pp = p * p;
    let w_scale = (1.0 - d.delta) / d.delta;
    let mut chol = vec![0.0; pp];
    let mut theta = vec![0.0; p];
    let mut samples = Vec::with_capacity(draws.kept);
    for k in 0..draws.kept {
        let n = draws.term_n[k];
        let s = draws.term_s[k];
        let mut v = draws.term_v[k];
        if d.beta < 1.0 {
            let a = stream.gamma_unchecked(0.5 * d.beta * n, 1.0);
            let b = stream.gamma_unchecked(0.5 * (1.0 - d.beta) * n, 1.0);
            let gamma = a / (a + b);
            // phi_{T+1} = phi_T * gamma / beta
            v *= d.beta / gamma;
        }
        theta.copy_from_slice(draws.terminal_theta(k));
        let factor = v * w_scale / s;
        if factor > 0.0 {
            for (ch, c) in chol.iter_mut().zip(&draws.term_c[k * pp..(k + 1) * pp]) {
                *ch = c * factor;
            }
            linalg::cholesky_in_place(&mut chol, p)?;
            let z: Vec<f64> = (0..p).map(|_| stream.standard_normal()).collect();
            for i in 0..p {
                theta[i] += (0..=i).map(|c| chol[i * p + c] * z[c]).sum::<f64>();
            }
        }
        let mut mean = theta[0];
        for (i, hd) in h_next.iter().enumerate() {
            mean += theta[i + 1] * hd.sample(stream);
        }
        let yk = mean + v.sqrt() * stream.standard_normal();
        if !yk.is_finite() {
            return Err(Error::Numerical("non-finite predictive draw".into()));
        }
        samples.push(yk);
    }
    let point = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok((point, samples))
}

/// Refitting protocol across forecast origins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Cold start with `burn_in` sweeps at every origin.
    FullRerun,
    /// Continue from the previous origin's chain with `warm_start_burn` sweeps.
    #[default]
    WarmStart,
}

/// Output of [`sequential_bps`], one entry per forecast origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialForecasts {
    pub points: Vec<f64>,
    /// Posterior mean of `(intercept, agent coefficients)` at the last
    /// observation of each fit.
    pub coefficient_means: Vec<Vec<f64>>,
}

/// Rolling one-step synthesis forecasts.
///
/// For each origin `t` in `first_origin..h.len()` the sampler is fitted on
/// `y[..t]` and `h[..t]` and the forecast of `y[t]` uses `h[t]`. `y` may be
/// one shorter than `h` (the final target need not be known). Origin `t`
/// draws from `stream.derive(t)`.
pub fn sequential_bps(
    y: &[f64],
    h: &[Vec<ForecastDensity>],
    first_origin: usize,
    cfg: &BpsConfig,
    protocol: Protocol,
    stream: &RandomStream,
) -> Result<SequentialForecasts> {
    if first_origin < 2 {
        return Err(Error::Domain(format!(
            "first forecast origin must be >= 2, got {first_origin}"
        )));
    }
    if h.len() <= first_origin {
        return Err(Error::Empty("forecast origins"));
    }
    if y.len() + 1 < h.len() {
        return Err(Error::Dimension {
            expected: h.len() - 1,
            got: y.len(),
        });
    }
    let mut out = SequentialForecasts {
        points: Vec::with_capacity(h.len() - first_origin),
        coefficient_means: Vec::with_capacity(h.len() - first_origin),
    };
    let mut chain: Option<ChainState> = None;
    for t in first_origin..h.len() {
        let mut s = stream.derive(t as u64);
        let opts = GibbsOptions {
            storage: PathStorage::TerminalOnly,
            warm: match protocol {
                Protocol::WarmStart => chain.as_ref(),
                Protocol::FullRerun => None,
            },
        };
        let draws = gibbs_run_with(&y[..t], &h[..t], cfg, &mut s, opts)?;
        let (point, _) = predict_next(&draws, &h[t], cfg.discounts, &mut s)?;
        out.points.push(point);
        out.coefficient_means.push(draws.theta_mean(t));
        if protocol == Protocol::WarmStart {
            chain = Some(draws.chain);
        }
    }
    Ok(out)
}
