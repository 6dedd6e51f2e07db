//! Numerical checks of the theory behind synthesis: optimal linear weights
//! versus an added intercept, KL-risk constancy of the flat-prior
//! random-walk predictor under parameter shifts, and convergence of proper
//! priors to the flat prior.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg;
use crate::statdist::{normal_logpdf, RandomStream};

/// Two agents tracking a target whose increments share independent unit
/// noise components: `dy = mu dt + dxi1 + dxi2 + dxi3` and
/// `dx_j = mu_j dt + dxi_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub mu: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub step: f64,
    pub n_samples: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            mu1: 0.0,
            mu2: 0.0,
            step: 1.0,
            n_samples: 1_000_000,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1000 {
            return Err(Error::Domain(format!(
                "n_samples must be >= 1000, got {}",
                self.n_samples
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Domain(format!(
                "step must be positive, got {}",
                self.step
            )));
        }
        if ![self.mu, self.mu1, self.mu2].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("toy model drift".into()));
        }
        Ok(())
    }

    /// Draws `n_samples` increments `(dy, dx1, dx2)`.
    pub fn sample(&self, stream: &mut RandomStream) -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
        self.validate()?;
        let sd = self.step.sqrt();
        let mut dy = Vec::with_capacity(self.n_samples);
        let mut dx = Vec::with_capacity(self.n_samples);
        for _ in 0..self.n_samples {
            let xi = [0; 3].map(|_| sd * stream.standard_normal());
            dy.push(self.mu * self.step + xi[0] + xi[1] + xi[2]);
            dx.push([self.mu1 * self.step + xi[0], self.mu2 * self.step + xi[1]]);
        }
        Ok((dy, dx))
    }
}

/// Unconstrained least-squares weights from the sample normal equations
/// `E[dx dx'] w = E[dx dy]` (no intercept, no centering).
pub fn optimal_linear_weights<X: AsRef<[f64]>>(dy: &[f64], dx: &[X]) -> Result<Vec<f64>> {
    if dy.is_empty() {
        return Err(Error::Empty("increment sample"));
    }
    ensure_dim(dy.len(), dx.len())?;
    let j = dx[0].as_ref().len();
    if j == 0 {
        return Err(Error::Empty("agent increments"));
    }
    let mut m = vec![0.0; j * j];
    let mut b = vec![0.0; j];
    for (y, x) in dy.iter().zip(dx) {
        let x = x.as_ref();
        ensure_dim(j, x.len())?;
        for a in 0..j {
            b[a] += x[a] * y;
            for c in 0..j {
                m[a * j + c] += x[a] * x[c];
            }
        }
    }
    let n = dy.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    b.iter_mut().for_each(|v| *v /= n);
    let eig = linalg::symmetric_eigenvalues(&m, j);
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
        (lo.min(e), hi.max(e.abs()))
    });
    if !(lo > 0.0) || hi / lo > 1e12 {
        return Err(Error::Singular(format!(
            "second-moment matrix of agent increments is singular or ill-conditioned \
             (eigenvalues {lo:e} .. {hi:e})"
        )));
    }
    linalg::cholesky_strict(&mut m, j)?;
    linalg::cholesky_solve(&m, &mut b);
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapEstimate {
    pub weights: Vec<f64>,
    /// Mean residual of the linear combination.
    pub mu_star: f64,
    pub mu_star_se: f64,
    pub mse_linear: f64,
    pub mse_with_intercept: f64,
    /// `mse_linear - mse_with_intercept`.
    pub gap: f64,
    pub gap_se: f64,
}

/// Squared-error gain from adding the mean residual as an intercept to the
/// optimal linear combination.
pub fn theorem2_gap(cfg: &ToyModelConfig, stream: &mut RandomStream) -> Result<GapEstimate> {
    let (dy, dx) = cfg.sample(stream)?;
    let w = optimal_linear_weights(&dy, &dx)?;
    let r: Vec<f64> = dy
        .iter()
        .zip(&dx)
        .map(|(y, x)| y - w[0] * x[0] - w[1] * x[1])
        .collect();
    let n = r.len() as f64;
    let mu_star = r.iter().sum::<f64>() / n;
    let mse_linear = r.iter().map(|v| v * v).sum::<f64>() / n;
    let mse_with_intercept = r.iter().map(|v| (v - mu_star).powi(2)).sum::<f64>() / n;
    let resid_var = mse_with_intercept * n / (n - 1.0);
    // Per-sample gap r^2 - (r - mu*)^2 = 2 r mu* - mu*^2.
    let d_var = 4.0 * mu_star * mu_star * resid_var;
    Ok(GapEstimate {
        weights: w,
        mu_star,
        mu_star_se: (resid_var / n).sqrt(),
        mse_linear,
        mse_with_intercept,
        gap: mse_linear - mse_with_intercept,
        gap_se: (d_var / n).sqrt(),
    })
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl RiskEstimate {
    fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            value: mean,
            std_error: (var / n).sqrt(),
            n_paths: samples.len(),
        }
    }
}

/// One-step predictive density produced by a predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Predictive {
    Normal {
        mean: f64,
        var: f64,
    },
    /// Not normalizable (for example a flat prior before enough data);
    /// treated as density zero.
    Improper,
}

impl Predictive {
    pub fn ln_pdf(&self, y: f64) -> f64 {
        match *self {
            Predictive::Normal { mean, var } => normal_logpdf(y, mean, var),
            Predictive::Improper => f64::NEG_INFINITY,
        }
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.ln_pdf(y).exp()
    }
}

const QUAD_POINTS: usize = 2001;
const QUAD_HALF_WIDTH_SD: f64 = 8.0;
const QUAD_TAIL_TOL: f64 = 1e-8;

/// `KL(N(mean, var) || q)` by composite Simpson quadrature over the truth's
/// `+-8` standard deviations. The range is widened when the truth's mass
/// on the grid falls short of one by more than 1e-8.
pub fn kl_quadrature(mean: f64, var: f64, q: &Predictive) -> Result<f64> {
    if !(var > 0.0) || !var.is_finite() || !mean.is_finite() {
        return Err(Error::Domain(format!(
            "invalid true density N({mean}, {var})"
        )));
    }
    if matches!(q, Predictive::Improper) {
        return Ok(f64::INFINITY);
    }
    let sd = var.sqrt();
    let mut half = QUAD_HALF_WIDTH_SD * sd;
    for _ in 0..4 {
        let lo = mean - half;
        let h = 2.0 * half / (QUAD_POINTS - 1) as f64;
        let mut mass = 0.0;
        let mut kl = 0.0;
        for i in 0..QUAD_POINTS {
            let y = lo + h * i as f64;
            let w = if i == 0 || i == QUAD_POINTS - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let lp = normal_logpdf(y, mean, var);
            let p = lp.exp();
            mass += w * p;
            if p > 0.0 {
                kl += w * p * (lp - q.ln_pdf(y));
            }
        }
        mass *= h / 3.0;
        kl *= h / 3.0;
        if (1.0 - mass).abs() <= QUAD_TAIL_TOL {
            return Ok(kl);
        }
        half *= 1.5;
    }
    Err(Error::Numerical(
        "KL quadrature did not capture the true density".into(),
    ))
}

/// Information-form Kalman filter for `y_t = F_t' theta_t + e_t`,
/// `e_t ~ N(0, V)`, with `theta_{t+1} = phi theta_t + w_t`,
/// `w_t ~ N(0, w I)`. A zero initial precision is the flat prior.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoFilter {
    p: usize,
    phi: f64,
    w: f64,
    v: f64,
    prec: Vec<f64>,
    info: Vec<f64>,
}

impl InfoFilter {
    /// `prior_var = None` gives the flat prior; otherwise `N(0, prior_var I)`.
    pub fn new(p: usize, phi: f64, w: f64, v: f64, prior_var: Option<f64>) -> Result<Self> {
        if p == 0 {
            return Err(Error::Empty("state"));
        }
        if !(phi != 0.0 && phi.is_finite()) || !(w > 0.0) || !(v > 0.0) {
            return Err(Error::Domain(format!(
                "need phi != 0, w > 0, v > 0; got phi={phi}, w={w}, v={v}"
            )));
        }
        let mut prec = vec![0.0; p * p];
        if let Some(s2) = prior_var {
            if !(s2 > 0.0) {
                return Err(Error::Domain(format!(
                    "prior variance must be positive, got {s2}"
                )));
            }
            for i in 0..p {
                prec[i * p + i] = 1.0 / s2;
            }
        }
        Ok(Self {
            p,
            phi,
            w,
            v,
            prec,
            info: vec![0.0; p],
        })
    }

    /// Moves the state one step ahead.
    pub fn evolve(&mut self) -> Result<()> {
        let p = self.p;
        let phi2 = self.phi * self.phi;
        // S = (P + phi^2 W^{-1})^{-1}; P' = (P - P S P) / phi^2;
        // z' = (z - P S z) / phi.
        let mut s = self.prec.clone();
        for i in 0..p {
            s[i * p + i] += phi2 / self.w;
        }
        linalg::cholesky_strict(&mut s, p)?;
        let mut sp = vec![0.0; p * p];
        let mut col = vec![0.0; p];
        for c in 0..p {
            for r in 0..p {
                col[r] = self.prec[r * p + c];
            }
            linalg::cholesky_solve(&s, &mut col);
            for r in 0..p {
                sp[r * p + c] = col[r];
            }
        }
        let mut sz = self.info.clone();
        linalg::cholesky_solve(&s, &mut sz);
        let mut new_prec = vec![0.0; p * p];
        for r in 0..p {
            for c in 0..p {
                let psp: f64 = (0..p).map(|k| self.prec[r * p + k] * sp[k * p + c]).sum();
                new_prec[r * p + c] = (self.prec[r * p + c] - psp) / phi2;
            }
        }
        linalg::symmetrize(&mut new_prec, p);
        let mut new_info = vec![0.0; p];
        for r in 0..p {
            let psz: f64 = (0..p).map(|k| self.prec[r * p + k] * sz[k]).sum();
            new_info[r] = (self.info[r] - psz) / self.phi;
        }
        self.prec = new_prec;
        self.info = new_info;
        Ok(())
    }

    pub fn observe(&mut self, f: &[f64], y: f64) -> Result<()> {
        ensure_dim(self.p, f.len())?;
        let p = self.p;
        for a in 0..p {
            self.info[a] += f[a] * y / self.v;
            for b in 0..p {
                self.prec[a * p + b] += f[a] * f[b] / self.v;
            }
        }
        Ok(())
    }

    /// Predictive of the next observation with regressor `f`, for the
    /// current (already evolved) state.
    pub fn predictive(&self, f: &[f64]) -> Result<Predictive> {
        ensure_dim(self.p, f.len())?;
        let p = self.p;
        // Directions the data have not reached keep zero precision up to
        // rounding; relative to the largest eigenvalue they are still flat.
        let eig = linalg::symmetric_eigenvalues(&self.prec, p);
        let max = eig.iter().copied().fold(0.0, f64::max);
        if eig.iter().any(|&e| !(e > 1e-10 * max)) {
            return Ok(Predictive::Improper);
        }
        let mut l = self.prec.clone();
        linalg::cholesky_strict(&mut l, p)?;
        let mut mean = self.info.clone();
        linalg::cholesky_solve(&l, &mut mean);
        let mut cf = f.to_vec();
        linalg::cholesky_solve(&l, &mut cf);
        let var = self.v + linalg::dot(f, &cf);
        Ok(Predictive::Normal {
            mean: linalg::dot(f, &mean),
            var,
        })
    }
}

/// Increment model `y_{t+1} = y_t + a + theta' dx_{t+1} + e`, `e ~ N(0, V)`,
/// with `dx ~ N(0, I)` for two agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncrementModel {
    /// Observations before the predicted one.
    pub path_len: usize,
    pub noise_var: f64,
    /// Predictor state evolution variance per coordinate.
    pub state_var: f64,
}

impl Default for IncrementModel {
    fn default() -> Self {
        Self {
            path_len: 20,
            noise_var: 1.0,
            state_var: 0.01,
        }
    }
}

/// Predictor for the increment model: a Gaussian state-space regression of
/// `dy` on `(1, dx)` under a flat initial prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StateDynamics {
    /// `theta_{t+1} = theta_t + w`.
    RandomWalk,
    /// `theta_{t+1} = phi theta_t + w` with `|phi| < 1`.
    Stationary { phi: f64 },
}

impl StateDynamics {
    pub fn name(&self) -> String {
        match self {
            StateDynamics::RandomWalk => "random_walk".into(),
            StateDynamics::Stationary { phi } => format!("stationary_phi{phi}"),
        }
    }

    fn phi(&self) -> f64 {
        match *self {
            StateDynamics::RandomWalk => 1.0,
            StateDynamics::Stationary { phi } => phi,
        }
    }
}

/// True parameters `(a, theta)` of the increment model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub a: f64,
    pub theta: [f64; 2],
}

/// KL risk of the flat-prior state-space predictor against the true
/// one-step transition density, averaged over simulated histories.
///
/// Path `i` draws from `stream.derive(i)`, so calls that differ only in
/// `shift` or `dynamics` use common random numbers.
pub fn kl_risk_mc(
    shift: Shift,
    dynamics: StateDynamics,
    model: &IncrementModel,
    n_paths: usize,
    stream: &RandomStream,
) -> Result<RiskEstimate> {
    let per_path = path_kls(shift, dynamics, model, n_paths, stream)?;
    Ok(RiskEstimate::from_samples(&per_path))
}

fn path_kls(
    shift: Shift,
    dynamics: StateDynamics,
    model: &IncrementModel,
    n_paths: usize,
    stream: &RandomStream,
) -> Result<Vec<f64>> {
    if n_paths == 0 {
        return Err(Error::Empty("paths"));
    }
    if model.path_len == 0 {
        return Err(Error::Empty("path"));
    }
    (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = stream.derive(i);
            let mut filt =
                InfoFilter::new(3, dynamics.phi(), model.state_var, model.noise_var, None)?;
            let sd = model.noise_var.sqrt();
            let mut y = 0.0;
            for t in 0..=model.path_len {
                let dx = [s.standard_normal(), s.standard_normal()];
                let mean_dy = shift.a + shift.theta[0] * dx[0] + shift.theta[1] * dx[1];
                let eps = sd * s.standard_normal();
                let f = [1.0, dx[0], dx[1]];
                if t > 0 {
                    filt.evolve()?;
                }
                if t == model.path_len {
                    let q = match filt.predictive(&f)? {
                        Predictive::Normal { mean, var } => Predictive::Normal {
                            mean: y + mean,
                            var,
                        },
                        Predictive::Improper => Predictive::Improper,
                    };
                    return kl_quadrature(y + mean_dy, model.noise_var, &q);
                }
                let dy = mean_dy + eps;
                filt.observe(&f, dy)?;
                y += dy;
            }
            unreachable!("loop returns at the final step")
        })
        .collect()
}

/// Risk at each shift plus the largest pairwise difference in units of the
/// paired standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstancyReport {
    pub dynamics: StateDynamics,
    pub shifts: Vec<Shift>,
    pub risks: Vec<RiskEstimate>,
    /// `max |R_i - R_k| / se(R_i - R_k)` over pairs; zero for one shift.
    /// A difference of exactly zero counts as zero standard errors.
    pub max_z: f64,
}

impl ConstancyReport {
    pub fn is_constant(&self, z: f64) -> bool {
        self.max_z <= z
    }
}

/// Risk estimates for each shift under common random numbers.
pub fn lemma2_constancy(
    shifts: &[Shift],
    dynamics: StateDynamics,
    model: &IncrementModel,
    n_paths: usize,
    stream: &RandomStream,
) -> Result<ConstancyReport> {
    if shifts.is_empty() {
        return Err(Error::Empty("shifts"));
    }
    let per: Vec<Vec<f64>> = shifts
        .iter()
        .map(|s| path_kls(*s, dynamics, model, n_paths, stream))
        .collect::<Result<_>>()?;
    let mut max_z: f64 = 0.0;
    for i in 0..per.len() {
        for k in i + 1..per.len() {
            let d: Vec<f64> = per[i].iter().zip(&per[k]).map(|(a, b)| a - b).collect();
            let est = RiskEstimate::from_samples(&d);
            let z = if est.value == 0.0 {
                0.0
            } else if est.std_error == 0.0 {
                f64::INFINITY
            } else {
                est.value.abs() / est.std_error
            };
            max_z = max_z.max(z);
        }
    }
    Ok(ConstancyReport {
        dynamics,
        shifts: shifts.to_vec(),
        risks: per.iter().map(|v| RiskEstimate::from_samples(v)).collect(),
        max_z,
    })
}

/// A fixed levels path `y_t = theta_{0,t} + theta_{1,t} x_t + e_t` for the
/// prior-convergence experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelsPath {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    /// Regressor value for the predicted observation.
    pub x_next: f64,
    pub noise_var: f64,
    pub state_var: f64,
}

impl LevelsPath {
    pub fn simulate(len: usize, stream: &mut RandomStream) -> Self {
        let mut theta = [0.3, 0.8];
        let mut y = Vec::with_capacity(len);
        let mut x = Vec::with_capacity(len);
        for _ in 0..len {
            theta[0] += 0.1 * stream.standard_normal();
            theta[1] += 0.1 * stream.standard_normal();
            let xt = stream.standard_normal();
            y.push(theta[0] + theta[1] * xt + stream.standard_normal());
            x.push(xt);
        }
        Self {
            y,
            x,
            x_next: stream.standard_normal(),
            noise_var: 1.0,
            state_var: 0.01,
        }
    }

    /// One-step predictive after the whole path, under `N(0, prior_var I)`
    /// or the flat prior.
    pub fn predictive(&self, prior_var: Option<f64>) -> Result<Predictive> {
        ensure_dim(self.y.len(), self.x.len())?;
        let mut f = InfoFilter::new(2, 1.0, self.state_var, self.noise_var, prior_var)?;
        for (y, x) in self.y.iter().zip(&self.x) {
            f.evolve()?;
            f.observe(&[1.0, *x], *y)?;
        }
        f.evolve()?;
        f.predictive(&[1.0, self.x_next])
    }
}

/// Evaluation grid covering the flat-prior predictive (or the widest proper
/// one when the flat prior is improper) by `+-8` sd.
pub fn default_eval_grid(path: &LevelsPath, sigmas: &[f64], points: usize) -> Result<Vec<f64>> {
    let mut ref_pred = path.predictive(None)?;
    if let (Predictive::Improper, Some(s)) = (ref_pred, sigmas.last()) {
        ref_pred = path.predictive(Some(s * s))?;
    }
    let (mean, var) = match ref_pred {
        Predictive::Normal { mean, var } => (mean, var),
        Predictive::Improper => (0.0, 1.0),
    };
    let half = 8.0 * var.sqrt();
    let n = points.max(2);
    Ok((0..n)
        .map(|i| mean - half + 2.0 * half * i as f64 / (n - 1) as f64)
        .collect())
}

/// Sup over `grid` of `|q_sigma(y) - q_flat(y)|` for each prior scale
/// `sigma` (prior `N(0, sigma^2 I)`).
pub fn corollary2_convergence(sigmas: &[f64], path: &LevelsPath, grid: &[f64]) -> Result<Vec<f64>> {
    if sigmas.is_empty() {
        return Err(Error::Empty("sigma grid"));
    }
    if grid.is_empty() {
        return Err(Error::Empty("evaluation grid"));
    }
    if sigmas.windows(2).any(|w| !(w[1] > w[0])) || !(sigmas[0] > 0.0) {
        return Err(Error::Domain(
            "sigma grid must be positive and increasing".into(),
        ));
    }
    let flat = path.predictive(None)?;
    sigmas
        .iter()
        .map(|s| {
            let q = path.predictive(Some(s * s))?;
            Ok(grid
                .iter()
                .map(|&y| (q.pdf(y) - flat.pdf(y)).abs())
                .fold(0.0, f64::max))
        })
        .collect()
}

/// Formats a float with 17 significant digits.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_theorem2_csv<W: Write>(
    rows: &[(ToyModelConfig, GapEstimate)],
    mut w: W,
) -> io::Result<()> {
    writeln!(
        w,
        "mu,mu1,mu2,step,n_samples,w1,w2,mu_star,mse_linear,mse_with_intercept,gap,gap_se"
    )?;
    for (c, g) in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt(c.mu),
            fmt(c.mu1),
            fmt(c.mu2),
            fmt(c.step),
            c.n_samples,
            fmt(g.weights[0]),
            fmt(g.weights[1]),
            fmt(g.mu_star),
            fmt(g.mse_linear),
            fmt(g.mse_with_intercept),
            fmt(g.gap),
            fmt(g.gap_se)
        )?;
    }
    Ok(())
}

pub fn write_lemma2_csv<W: Write>(
    reports: &[ConstancyReport],
    model: &IncrementModel,
    mut w: W,
) -> io::Result<()> {
    writeln!(
        w,
        "predictor,a,theta1,theta2,path_len,noise_var,state_var,n_paths,risk,std_error"
    )?;
    for r in reports {
        for (s, e) in r.shifts.iter().zip(&r.risks) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.dynamics.name(),
                fmt(s.a),
                fmt(s.theta[0]),
                fmt(s.theta[1]),
                model.path_len,
                fmt(model.noise_var),
                fmt(model.state_var),
                e.n_paths,
                fmt(e.value),
                fmt(e.std_error)
            )?;
        }
    }
    Ok(())
}

pub fn write_corollary2_csv<W: Write>(
    sigmas: &[f64],
    diffs: &[f64],
    path_len: usize,
    grid_points: usize,
    mut w: W,
) -> io::Result<()> {
    writeln!(w, "sigma,sup_abs_diff,path_len,grid_points")?;
    for (s, d) in sigmas.iter().zip(diffs) {
        writeln!(w, "{},{},{},{}", fmt(*s), fmt(*d), path_len, grid_points)?;
    }
    Ok(())
}
