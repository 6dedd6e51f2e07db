//! Conjugate random-walk dynamic linear model with discount factors.
//!
//! Scale convention: given the observation variance `v`, the state is
//! `theta | v ~ N(m, C v / s)`. `delta` discounts the state scale
//! (`R = C / delta`) and `beta` discounts the volatility degrees of freedom
//! (`n -> beta n`).

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg;
use crate::statdist::{ForecastDensity, RandomStream, StudentT};

/// State (`delta`) and volatility (`beta`) discount factors, both in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discounts {
    pub delta: f64,
    pub beta: f64,
}

impl Discounts {
    pub fn new(delta: f64, beta: f64) -> Result<Self> {
        let d = Self { delta, beta };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta", self.delta), ("beta", self.beta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Domain(format!(
                    "discount {name} must lie in (0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Normal-inverse-gamma posterior summary at one time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NigState {
    /// State mean, length `p`.
    pub m: Vec<f64>,
    /// Row-major `p x p` state scale.
    pub c: Vec<f64>,
    /// Volatility degrees of freedom.
    pub n: f64,
    /// Volatility point estimate.
    pub s: f64,
}

impl NigState {
    pub fn new(m: Vec<f64>, c: Vec<f64>, n: f64, s: f64) -> Result<Self> {
        let p = m.len();
        if p == 0 {
            return Err(Error::Empty("state mean"));
        }
        ensure_dim(p * p, c.len())?;
        if !(n > 0.0) || !(s > 0.0) {
            return Err(Error::Domain(format!(
                "need n > 0 and s > 0, got n={n}, s={s}"
            )));
        }
        if m.iter().chain(&c).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state moments".into()));
        }
        Ok(Self { m, c, n, s })
    }

    /// Prior with mean `m`, scale `c_diag * I`, and volatility prior `(n, s)`.
    pub fn isotropic(m: Vec<f64>, c_diag: f64, n: f64, s: f64) -> Result<Self> {
        let p = m.len();
        let mut c = linalg::identity(p);
        c.iter_mut().for_each(|v| *v *= c_diag);
        Self::new(m, c, n, s)
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }
}

/// One-step prior after evolution: `a = m`, `R = C / delta`, `n = beta n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorState {
    pub a: Vec<f64>,
    pub r: Vec<f64>,
    pub n: f64,
    pub s: f64,
}

/// Evolves `state` one step and forms the Student-t forecast for regressor `f`.
pub fn evolve_forecast(
    state: &NigState,
    f: &[f64],
    d: Discounts,
) -> Result<(PriorState, ForecastDensity)> {
    let p = state.dim();
    ensure_dim(p, f.len())?;
    let a = state.m.clone();
    let r: Vec<f64> = state.c.iter().map(|v| v / d.delta).collect();
    let n = d.beta * state.n;
    let loc = linalg::dot(f, &a);
    let q = linalg::quad_form(&r, f) + state.s;
    let forecast = StudentT::new(loc, q, n)?;
    Ok((
        PriorState {
            a,
            r,
            n,
            s: state.s,
        },
        forecast,
    ))
}

/// Conjugate update of `prior` after observing `y` at regressor `f`.
pub fn update(
    prior: &PriorState,
    forecast: &ForecastDensity,
    f: &[f64],
    y: f64,
) -> Result<NigState> {
    let p = prior.a.len();
    ensure_dim(p, f.len())?;
    let q = forecast.scale;
    if !(q > 0.0) {
        return Err(Error::Numerical(format!(
            "forecast scale must be > 0, got {q}"
        )));
    }
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("observation {y}")));
    }
    let mut m = vec![0.0; p];
    let mut c = vec![0.0; p * p];
    let (n, s) = update_kernel(
        &prior.a,
        &prior.r,
        prior.n,
        prior.s,
        f,
        forecast.location,
        q,
        y,
        &mut m,
        &mut c,
    );
    Ok(NigState { m, c, n, s })
}

/// Allocation-free update core shared with the sequential filter.
#[allow(clippy::too_many_arguments)]
#[inline]
fn update_kernel(
    a: &[f64],
    r: &[f64],
    n_prior: f64,
    s_prior: f64,
    f: &[f64],
    loc: f64,
    q: f64,
    y: f64,
    m_out: &mut [f64],
    c_out: &mut [f64],
) -> (f64, f64) {
    let p = a.len();
    let e = y - loc;
    let n = n_prior + 1.0;
    let s = s_prior * (n_prior + e * e / q) / n;
    let ratio = s / s_prior;
    // A = R F / q, written into m_out first and then turned into the mean.
    linalg::mat_vec(r, f, m_out);
    for i in 0..p {
        let ai = m_out[i] / q;
        for j in 0..p {
            c_out[i * p + j] = r[i * p + j];
        }
        m_out[i] = ai;
    }
    for i in 0..p {
        for j in 0..p {
            c_out[i * p + j] = ratio * (c_out[i * p + j] - m_out[i] * m_out[j] * q);
        }
    }
    linalg::symmetrize(c_out, p);
    for i in 0..p {
        m_out[i] = a[i] + m_out[i] * e;
    }
    (n, s)
}

/// Complete record of one forward-filtering pass over `len` observations.
///
/// Index `0` of the posterior arrays holds the initial prior; index `t`
/// (`1..=len`) holds the posterior after observation `t`.
#[derive(Debug, Clone, Default)]
pub struct FilterHistory {
    p: usize,
    len: usize,
    regressors: Vec<f64>,
    observations: Vec<f64>,
    prior_r: Vec<f64>,
    forecast_loc: Vec<f64>,
    forecast_scale: Vec<f64>,
    forecast_dof: Vec<f64>,
    post_m: Vec<f64>,
    post_c: Vec<f64>,
    post_n: Vec<f64>,
    post_s: Vec<f64>,
}

impl FilterHistory {
    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Posterior at time `t` (`0` is the initial prior).
    pub fn posterior(&self, t: usize) -> NigState {
        let p = self.p;
        NigState {
            m: self.post_m[t * p..(t + 1) * p].to_vec(),
            c: self.post_c[t * p * p..(t + 1) * p * p].to_vec(),
            n: self.post_n[t],
            s: self.post_s[t],
        }
    }

    pub fn posterior_mean(&self, t: usize) -> &[f64] {
        &self.post_m[t * self.p..(t + 1) * self.p]
    }

    pub fn posterior_scale(&self, t: usize) -> &[f64] {
        let pp = self.p * self.p;
        &self.post_c[t * pp..(t + 1) * pp]
    }

    pub fn posterior_dof(&self, t: usize) -> f64 {
        self.post_n[t]
    }

    pub fn posterior_s(&self, t: usize) -> f64 {
        self.post_s[t]
    }

    /// Regressor used for observation `t` (`1..=len`).
    pub fn regressor(&self, t: usize) -> &[f64] {
        &self.regressors[(t - 1) * self.p..t * self.p]
    }

    /// Prior scale `R_t` for observation `t` (`1..=len`).
    pub fn prior_scale(&self, t: usize) -> &[f64] {
        let pp = self.p * self.p;
        &self.prior_r[(t - 1) * pp..t * pp]
    }

    /// One-step forecast made before observation `t` (`1..=len`).
    pub fn forecast(&self, t: usize) -> ForecastDensity {
        StudentT {
            location: self.forecast_loc[t - 1],
            scale: self.forecast_scale[t - 1],
            dof: self.forecast_dof[t - 1],
        }
    }

    pub fn forecasts(&self) -> Vec<ForecastDensity> {
        (1..=self.len).map(|t| self.forecast(t)).collect()
    }

    pub fn observation(&self, t: usize) -> f64 {
        self.observations[t - 1]
    }

    fn reset(&mut self, p: usize, len: usize) {
        self.p = p;
        self.len = len;
        for (buf, n) in [
            (&mut self.regressors, len * p),
            (&mut self.prior_r, len * p * p),
            (&mut self.post_m, (len + 1) * p),
            (&mut self.post_c, (len + 1) * p * p),
        ] {
            buf.clear();
            buf.resize(n, 0.0);
        }
        for (buf, n) in [
            (&mut self.observations, len),
            (&mut self.forecast_loc, len),
            (&mut self.forecast_scale, len),
            (&mut self.forecast_dof, len),
            (&mut self.post_n, len + 1),
            (&mut self.post_s, len + 1),
        ] {
            buf.clear();
            buf.resize(n, 0.0);
        }
    }
}

/// Runs the forward filter over `y` with row-major regressors (`len x p`).
pub fn filter(
    y: &[f64],
    regressors: &[f64],
    prior: &NigState,
    d: Discounts,
) -> Result<FilterHistory> {
    let mut h = FilterHistory::default();
    filter_into(&mut h, y, regressors, prior, d)?;
    Ok(h)
}

/// [`filter`] writing into a reusable history buffer.
pub fn filter_into(
    h: &mut FilterHistory,
    y: &[f64],
    regressors: &[f64],
    prior: &NigState,
    d: Discounts,
) -> Result<()> {
    d.validate()?;
    let p = prior.dim();
    let len = y.len();
    if len == 0 {
        return Err(Error::Empty("observation series"));
    }
    ensure_dim(len * p, regressors.len())?;
    h.reset(p, len);
    h.regressors.copy_from_slice(regressors);
    h.observations.copy_from_slice(y);
    h.post_m[..p].copy_from_slice(&prior.m);
    h.post_c[..p * p].copy_from_slice(&prior.c);
    h.post_n[0] = prior.n;
    h.post_s[0] = prior.s;
    let pp = p * p;
    for t in 1..=len {
        let f = &regressors[(t - 1) * p..t * p];
        let (before, after) = h.post_m.split_at_mut(t * p);
        let a = &before[(t - 1) * p..];
        let m_out = &mut after[..p];
        let r = &mut h.prior_r[(t - 1) * pp..t * pp];
        let c_prev = &h.post_c[(t - 1) * pp..t * pp];
        for (ri, ci) in r.iter_mut().zip(c_prev) {
            *ri = ci / d.delta;
        }
        let n_prior = d.beta * h.post_n[t - 1];
        let s_prior = h.post_s[t - 1];
        let loc = linalg::dot(f, a);
        let q = linalg::quad_form(r, f) + s_prior;
        if !(q > 0.0) || !q.is_finite() || !loc.is_finite() {
            return Err(Error::Numerical(format!(
                "invalid forecast at t={t}: f={loc}, q={q}"
            )));
        }
        let yt = y[t - 1];
        if !yt.is_finite() {
            return Err(Error::NonFinite(format!("observation at t={t}")));
        }
        h.forecast_loc[t - 1] = loc;
        h.forecast_scale[t - 1] = q;
        h.forecast_dof[t - 1] = n_prior;
        let (c_before, c_after) = h.post_c.split_at_mut(t * pp);
        let _ = c_before;
        let (n, s) = update_kernel(
            a,
            r,
            n_prior,
            s_prior,
            f,
            loc,
            q,
            yt,
            m_out,
            &mut c_after[..pp],
        );
        h.post_n[t] = n;
        h.post_s[t] = s;
    }
    Ok(())
}

/// Filters one agent whose regressor at `t` is `(1, x_t)`.
///
/// Returns the filter record and the one-step forecasts made before each
/// `y_t` was revealed.
pub fn run_agent(
    y: &[f64],
    x: &[f64],
    prior: &NigState,
    d: Discounts,
) -> Result<(FilterHistory, Vec<ForecastDensity>)> {
    if y.is_empty() {
        return Err(Error::Empty("agent series"));
    }
    ensure_dim(y.len(), x.len())?;
    ensure_dim(2, prior.dim())?;
    let regressors: Vec<f64> = x.iter().flat_map(|&xi| [1.0, xi]).collect();
    let h = filter(y, &regressors, prior, d)?;
    let forecasts = h.forecasts();
    Ok((h, forecasts))
}

/// One backward-sampled trajectory: states for `t = 0..=len` and the
/// matching observation variances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    p: usize,
    theta: Vec<f64>,
    v: Vec<f64>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn theta(&self, t: usize) -> &[f64] {
        &self.theta[t * self.p..(t + 1) * self.p]
    }

    pub fn v(&self, t: usize) -> f64 {
        self.v[t]
    }

    pub fn volatilities(&self) -> &[f64] {
        &self.v
    }
}

/// Scratch space reused across backward-sampling passes.
#[derive(Debug, Clone, Default)]
pub(crate) struct FfbsScratch {
    chol: Vec<f64>,
    mean: Vec<f64>,
    z: Vec<f64>,
}

/// Forward-filtering backward-sampling draw of `theta_{0:T}` and `v_{0:T}`.
pub fn ffbs_sample(
    h: &FilterHistory,
    d: Discounts,
    stream: &mut RandomStream,
) -> Result<Trajectory> {
    let mut out = Trajectory::default();
    let mut scratch = FfbsScratch::default();
    ffbs_into(h, d, stream, &mut out, &mut scratch)?;
    Ok(out)
}

pub(crate) fn ffbs_into(
    h: &FilterHistory,
    d: Discounts,
    stream: &mut RandomStream,
    out: &mut Trajectory,
    scratch: &mut FfbsScratch,
) -> Result<()> {
    d.validate()?;
    if h.is_empty() {
        return Err(Error::Empty("filter history"));
    }
    let p = h.p;
    let pp = p * p;
    let big_t = h.len;
    out.p = p;
    out.theta.clear();
    out.theta.resize((big_t + 1) * p, 0.0);
    out.v.clear();
    out.v.resize(big_t + 1, 0.0);
    scratch.chol.resize(pp, 0.0);
    scratch.mean.resize(p, 0.0);
    scratch.z.resize(p, 0.0);

    // Volatility: precision phi_T from the terminal gamma, then the
    // beta-discount backward recursion.
    let n_t = h.post_n[big_t];
    let s_t = h.post_s[big_t];
    let mut phi = stream.gamma_unchecked(0.5 * n_t, 0.5 * n_t * s_t);
    out.v[big_t] = 1.0 / phi;
    for t in (0..big_t).rev() {
        let n = h.post_n[t];
        let s = h.post_s[t];
        let eta = if d.beta < 1.0 {
            stream.gamma_unchecked(0.5 * (1.0 - d.beta) * n, 0.5 * n * s)
        } else {
            0.0
        };
        phi = d.beta * phi + eta;
        out.v[t] = 1.0 / phi;
    }
    if out.v.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Numerical("non-positive sampled volatility".into()));
    }

    // States.
    for t in (0..=big_t).rev() {
        let m = &h.post_m[t * p..(t + 1) * p];
        let c = &h.post_c[t * pp..(t + 1) * pp];
        let scale_factor;
        if t == big_t {
            scratch.mean.copy_from_slice(m);
            scale_factor = out.v[t] / h.post_s[t];
        } else {
            let next = &out.theta[(t + 1) * p..(t + 2) * p];
            for i in 0..p {
                scratch.mean[i] = (1.0 - d.delta) * m[i] + d.delta * next[i];
            }
            scale_factor = (1.0 - d.delta) * out.v[t] / h.post_s[t];
        }
        let dst = &mut out.theta[t * p..(t + 1) * p];
        if scale_factor == 0.0 {
            dst.copy_from_slice(&scratch.mean);
            continue;
        }
        for (ch, ci) in scratch.chol.iter_mut().zip(c) {
            *ch = ci * scale_factor;
        }
        linalg::cholesky_in_place(&mut scratch.chol, p)?;
        for zi in scratch.z.iter_mut() {
            *zi = stream.standard_normal();
        }
        for i in 0..p {
            let mut acc = scratch.mean[i];
            for k in 0..=i {
                acc += scratch.chol[i * p + k] * scratch.z[k];
            }
            dst[i] = acc;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_state() -> NigState {
        NigState::new(vec![0.0], vec![1.0], 1.0, 1.0).unwrap()
    }

    #[test]
    fn scalar_forecast_and_update() {
        let d = Discounts::new(1.0, 1.0).unwrap();
        let (prior, fc) = evolve_forecast(&unit_state(), &[1.0], d).unwrap();
        assert_eq!((fc.location, fc.scale, fc.dof), (0.0, 2.0, 1.0));
        let post = update(&prior, &fc, &[1.0], 1.0).unwrap();
        assert_abs_diff_eq!(post.m[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(post.c[0], 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(post.n, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(post.s, 0.75, epsilon = 1e-15);
    }

    #[test]
    fn state_discount_inflates_scale() {
        let d = Discounts::new(0.5, 1.0).unwrap();
        let (_, fc) = evolve_forecast(&unit_state(), &[1.0], d).unwrap();
        assert_abs_diff_eq!(fc.scale, 3.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_regressor_leaves_observation_scale() {
        let st = NigState::isotropic(vec![0.3, -0.2], 2.0, 4.0, 0.7).unwrap();
        let d = Discounts::new(0.9, 0.8).unwrap();
        let (_, fc) = evolve_forecast(&st, &[0.0, 0.0], d).unwrap();
        assert_eq!(fc.location, 0.0);
        assert_abs_diff_eq!(fc.scale, 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(fc.dof, 0.8 * 4.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_error_keeps_mean() {
        let st = NigState::isotropic(vec![0.4], 1.0, 3.0, 0.5).unwrap();
        let d = Discounts::new(0.95, 0.9).unwrap();
        let (prior, fc) = evolve_forecast(&st, &[1.0], d).unwrap();
        let post = update(&prior, &fc, &[1.0], fc.location).unwrap();
        assert_abs_diff_eq!(post.m[0], 0.4, epsilon = 1e-15);
        let bn = 0.9 * 3.0;
        assert_abs_diff_eq!(post.s, 0.5 * bn / (bn + 1.0), epsilon = 1e-15);
    }

    #[test]
    fn repeated_observation_concentrates() {
        let d = Discounts::new(1.0, 1.0).unwrap();
        // Static conjugate posterior mean is (m0 s0/C0 + sum y) / (s0/C0 + t),
        // so a vague prior is needed for the prior weight to vanish.
        let mut st = NigState::new(vec![0.0], vec![1e8], 1.0, 1.0).unwrap();
        for _ in 0..1000 {
            let (prior, fc) = evolve_forecast(&st, &[1.0], d).unwrap();
            st = update(&prior, &fc, &[1.0], 2.5).unwrap();
        }
        let k = 1.0 / 1e8;
        assert_abs_diff_eq!(st.m[0], 2500.0 / (k + 1000.0), epsilon = 1e-10);
        assert!((st.m[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let d = Discounts::new(1.0, 1.0).unwrap();
        assert!(matches!(
            evolve_forecast(&unit_state(), &[1.0, 2.0], d),
            Err(Error::Dimension { .. })
        ));
        assert!(Discounts::new(0.0, 1.0).is_err());
        assert!(Discounts::new(1.0, 1.2).is_err());
    }

    #[test]
    fn agent_single_point_matches_evolve() {
        let prior = NigState::isotropic(vec![0.0, 0.0], 1.0, 2.0, 0.01).unwrap();
        let d = Discounts::new(0.95, 0.99).unwrap();
        let (_, fcs) = run_agent(&[0.3], &[0.1], &prior, d).unwrap();
        let (_, expected) = evolve_forecast(&prior, &[1.0, 0.1], d).unwrap();
        assert_eq!(fcs, vec![expected]);
        assert!(run_agent(&[], &[], &prior, d).is_err());
    }

    #[test]
    fn agent_tracks_constant() {
        let prior = NigState::isotropic(vec![0.0, 0.0], 1.0, 2.0, 0.01).unwrap();
        let d = Discounts::new(0.95, 0.99).unwrap();
        let c = 1.3;
        let y = vec![c; 201];
        let x = vec![0.0; 201];
        let (_, fcs) = run_agent(&y, &x, &prior, d).unwrap();
        assert!((fcs[200].location - c).abs() < c.abs() * 1e-2);
    }

    #[test]
    fn static_limit_gives_constant_draw() {
        let prior = NigState::isotropic(vec![0.0, 0.0], 1.0, 2.0, 0.5).unwrap();
        let d = Discounts::new(1.0, 1.0).unwrap();
        let y = [0.2, -0.1, 0.4, 0.3];
        let regs = [1.0, 0.5, 1.0, -0.2, 1.0, 0.9, 1.0, 0.1];
        let h = filter(&y, &regs, &prior, d).unwrap();
        let mut s = RandomStream::new(3, 1);
        let tr = ffbs_sample(&h, d, &mut s).unwrap();
        for t in 0..tr.len() {
            assert_eq!(tr.theta(t), tr.theta(h.len()));
            assert_eq!(tr.v(t), tr.v(h.len()));
        }
    }
}
