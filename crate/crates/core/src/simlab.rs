//! Simulation study: a drifting-coefficient data-generating process with
//! correlated regressors, two misspecified DLM agents, and the four
//! combination methods scored by mean squared forecast error.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bps::{self, BpsConfig, Protocol};
use crate::combine::{self, BmaScoreState};
use crate::dlm::{self, Discounts, NigState};
use crate::error::{Error, Result};
use crate::statdist::{student_t_logpdf, ForecastDensity, RandomStream};

/// How the noise magnitudes in [`DgpConfig`] are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// Values are variances.
    #[default]
    Variance,
    /// Values are standard deviations.
    StdDev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    /// Noise of the target, the intercept and coefficient walks, and `xi3`.
    pub noise_var: f64,
    pub coef13: f64,
    pub coef23: f64,
    pub var1: f64,
    pub var2: f64,
    pub theta_init: f64,
    pub a_init: f64,
    pub burn: usize,
    pub total_after_burn: usize,
    pub noise_scale: NoiseScale,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            noise_var: 0.01,
            coef13: 1.0 / 3.0,
            coef23: 1.0 / 5.0,
            var1: 0.01 * 2.0 / 3.0,
            var2: 0.01 * 4.0 / 5.0,
            theta_init: 1.0,
            a_init: 0.0,
            burn: 50,
            total_after_burn: 350,
            noise_scale: NoiseScale::Variance,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("noise_var", self.noise_var),
            ("var1", self.var1),
            ("var2", self.var2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("dgp {name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("coef13", self.coef13),
            ("coef23", self.coef23),
            ("theta_init", self.theta_init),
            ("a_init", self.a_init),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("dgp {name}")));
            }
        }
        Ok(())
    }

    fn sd(&self, v: f64) -> f64 {
        match self.noise_scale {
            NoiseScale::Variance => v.sqrt(),
            NoiseScale::StdDev => v,
        }
    }
}

/// One realized path after the burn-in is discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPath {
    pub y: Vec<f64>,
    pub xi1: Vec<f64>,
    pub xi2: Vec<f64>,
    pub xi3: Vec<f64>,
    pub a: Vec<f64>,
    pub theta_dgp: Vec<[f64; 3]>,
}

impl SimPath {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub fn generate_path(cfg: &DgpConfig, stream: &mut RandomStream) -> Result<SimPath> {
    cfg.validate()?;
    let n = cfg.total_after_burn;
    let mut path = SimPath {
        y: Vec::with_capacity(n),
        xi1: Vec::with_capacity(n),
        xi2: Vec::with_capacity(n),
        xi3: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        theta_dgp: Vec::with_capacity(n),
    };
    let sd_noise = cfg.sd(cfg.noise_var);
    let (sd1, sd2) = (cfg.sd(cfg.var1), cfg.sd(cfg.var2));
    let mut a = cfg.a_init;
    let mut theta = [cfg.theta_init; 3];
    for t in 0..cfg.burn + n {
        a += sd_noise * stream.standard_normal();
        for th in theta.iter_mut() {
            *th += sd_noise * stream.standard_normal();
        }
        let xi3 = sd_noise * stream.standard_normal();
        let xi1 = cfg.coef13 * xi3 + sd1 * stream.standard_normal();
        let xi2 = cfg.coef23 * xi3 + sd2 * stream.standard_normal();
        let nu = sd_noise * stream.standard_normal();
        let y = a + theta[0] * xi1 + theta[1] * xi2 + theta[2] * xi3 + nu;
        if t < cfg.burn {
            continue;
        }
        path.y.push(y);
        path.xi1.push(xi1);
        path.xi2.push(xi2);
        path.xi3.push(xi3);
        path.a.push(a);
        path.theta_dgp.push(theta);
    }
    Ok(path)
}

/// Prior and discounts shared by the forecasting agents. Each agent
/// regresses the target on its own covariate, plus an intercept when
/// `intercept` is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub intercept: bool,
    pub c0: f64,
    pub n0: f64,
    pub s0: f64,
    pub discounts: Discounts,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            intercept: false,
            c0: 1.0,
            n0: 2.0,
            s0: 0.01,
            discounts: Discounts {
                delta: 0.95,
                beta: 0.99,
            },
        }
    }
}

impl AgentConfig {
    pub fn prior(&self) -> Result<NigState> {
        self.discounts.validate()?;
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return Err(Error::Domain(format!(
                "agent c0 must be positive, got {}",
                self.c0
            )));
        }
        let p = if self.intercept { 2 } else { 1 };
        NigState::isotropic(vec![0.0; p], self.c0, self.n0, self.s0)
    }

    /// One-step forecasts of `y` from an agent observing `x`.
    pub fn forecasts(&self, y: &[f64], x: &[f64]) -> Result<Vec<ForecastDensity>> {
        let prior = self.prior()?;
        if self.intercept {
            Ok(dlm::run_agent(y, x, &prior, self.discounts)?.1)
        } else {
            Ok(dlm::filter(y, x, &prior, self.discounts)?.forecasts())
        }
    }
}

/// Full study configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub dgp: DgpConfig,
    pub agents: AgentConfig,
    pub bps: BpsConfig,
    pub protocol: Protocol,
    /// Observations used before the first forecast.
    pub training: usize,
    /// First index of the window used to calibrate the combiners.
    pub calibration_start: usize,
    /// Cumulative MSFE checkpoints, counted in forecasts.
    pub checkpoints: Vec<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            agents: AgentConfig::default(),
            bps: BpsConfig::default(),
            protocol: Protocol::WarmStart,
            training: 50,
            calibration_start: 25,
            checkpoints: vec![100, 200, 300],
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.agents.prior()?;
        self.bps.validate()?;
        let n = self.dgp.total_after_burn;
        if self.training >= n {
            return Err(Error::Domain(format!(
                "training length {} leaves no forecasts in {n} observations",
                self.training
            )));
        }
        if self.calibration_start + 2 > self.training {
            return Err(Error::Domain(format!(
                "calibration window [{}, {}) needs at least 2 observations",
                self.calibration_start, self.training
            )));
        }
        let horizon = n - self.training;
        if self.checkpoints.is_empty() {
            return Err(Error::Empty("checkpoints"));
        }
        for &c in &self.checkpoints {
            if c == 0 || c > horizon {
                return Err(Error::Domain(format!(
                    "checkpoint {c} outside 1..={horizon}"
                )));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.dgp.total_after_burn - self.training
    }

    /// Shortened chains for quick end-to-end runs of [`SMOKE_REPLICATIONS`]
    /// replications.
    pub fn smoke(mut self) -> Self {
        self.bps.burn_in = 500;
        self.bps.kept_draws = 1000;
        self.bps.warm_start_burn = 100;
        self
    }
}

/// Replication count of the smoke preset.
pub const SMOKE_REPLICATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Ew,
    Bma,
    Cp,
    Bps,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ew, Method::Bma, Method::Cp, Method::Bps];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ew => "EW",
            Method::Bma => "BMA",
            Method::Cp => "Cp",
            Method::Bps => "BPS",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Forecasts and per-origin summaries of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutput {
    pub rep_id: u64,
    /// Realized targets over the forecast window.
    pub realized: Vec<f64>,
    /// Point forecasts per method, indexed like [`Method::ALL`].
    pub forecasts: [Vec<f64>; 4],
    pub bma_weights: Vec<Vec<f64>>,
    pub cp_weights: Vec<Vec<f64>>,
    /// Posterior mean of `(intercept, agent 1, agent 2)` per origin.
    pub bps_coefficients: Vec<Vec<f64>>,
}

impl ReplicationOutput {
    pub fn forecast(&self, m: Method) -> &[f64] {
        &self.forecasts[m.index()]
    }

    /// Cumulative MSFE over the first `t` forecasts.
    pub fn msfe(&self, m: Method, t: usize) -> f64 {
        cumulative_msfe(self.forecast(m), &self.realized, t)
    }
}

fn cumulative_msfe(forecast: &[f64], realized: &[f64], t: usize) -> f64 {
    let sse: f64 = forecast[..t]
        .iter()
        .zip(&realized[..t])
        .map(|(f, y)| (y - f).powi(2))
        .sum();
    sse / t as f64
}

// Stream purposes within a replication.
const STREAM_DGP: u64 = 1;
const STREAM_BPS: u64 = 2;

/// Stream owned by `(rep_id, purpose)` under one master seed.
pub fn replication_stream(master_seed: u64, rep_id: u64, purpose: u64) -> RandomStream {
    RandomStream::new(master_seed, 0)
        .derive(rep_id)
        .derive(purpose)
}

/// Agent one-step forecasts for every observation of a path, as a `T x 2`
/// panel.
pub fn agent_panel(path: &SimPath, agents: &AgentConfig) -> Result<Vec<Vec<ForecastDensity>>> {
    let f1 = agents.forecasts(&path.y, &path.xi1)?;
    let f2 = agents.forecasts(&path.y, &path.xi2)?;
    Ok(f1.into_iter().zip(f2).map(|(a, b)| vec![a, b]).collect())
}

pub fn run_replication(
    rep_id: u64,
    cfg: &StudyConfig,
    master_seed: u64,
) -> Result<ReplicationOutput> {
    cfg.validate()?;
    let mut dgp_stream = replication_stream(master_seed, rep_id, STREAM_DGP);
    let path = generate_path(&cfg.dgp, &mut dgp_stream)?;
    let h = agent_panel(&path, &cfg.agents)?;
    let bps_stream = replication_stream(master_seed, rep_id, STREAM_BPS);
    run_on_panel(rep_id, &path.y, &h, cfg, &bps_stream)
}

/// Runs all four combiners on a fixed target series and agent panel.
pub fn run_on_panel(
    rep_id: u64,
    y: &[f64],
    h: &[Vec<ForecastDensity>],
    cfg: &StudyConfig,
    bps_stream: &RandomStream,
) -> Result<ReplicationOutput> {
    let n = y.len();
    if h.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: h.len(),
        });
    }
    let start = cfg.calibration_start;
    let first = cfg.training;
    let j = h.first().map(Vec::len).unwrap_or(0);
    let horizon = n - first;
    let mut out = ReplicationOutput {
        rep_id,
        realized: y[first..].to_vec(),
        forecasts: Default::default(),
        bma_weights: Vec::with_capacity(horizon),
        cp_weights: Vec::with_capacity(horizon),
        bps_coefficients: Vec::new(),
    };

    let ew = combine::equal_weights(j)?;
    let mut bma = BmaScoreState::new(j);
    for t in start..first {
        let lpd: Vec<f64> = h[t].iter().map(|d| student_t_logpdf(y[t], d)).collect();
        bma = combine::bma_update(&bma, &lpd)?.0;
    }
    let k = vec![if cfg.agents.intercept { 2usize } else { 1 }; j];
    for t in first..n {
        let means: Vec<f64> = h[t].iter().map(|d| d.location).collect();
        out.forecasts[Method::Ew.index()].push(combine::pool_point(&ew, &means)?);

        let w_bma = bma.weights()?;
        out.forecasts[Method::Bma.index()].push(combine::pool_point(&w_bma, &means)?);
        out.bma_weights.push(w_bma.into_inner());

        let window: Vec<Vec<f64>> = (0..j)
            .map(|i| h[start..t].iter().map(|row| row[i].location).collect())
            .collect();
        let realized = &y[start..t];
        let sigma2 = window
            .iter()
            .map(|f| cumulative_msfe(f, realized, realized.len()))
            .fold(f64::INFINITY, f64::min);
        let w_cp = combine::mallows_weights(&window, realized, &k, sigma2)?;
        out.forecasts[Method::Cp.index()].push(combine::pool_point(&w_cp, &means)?);
        out.cp_weights.push(w_cp.into_inner());

        let lpd: Vec<f64> = h[t].iter().map(|d| student_t_logpdf(y[t], d)).collect();
        bma = combine::bma_update(&bma, &lpd)?.0;
    }

    // The synthesis sees the calibration window onward; the last target is
    // withheld since nothing is fitted on it.
    let seq = bps::sequential_bps(
        &y[start..n - 1],
        &h[start..],
        first - start,
        &cfg.bps,
        cfg.protocol,
        bps_stream,
    )?;
    out.forecasts[Method::Bps.index()] = seq.points;
    out.bps_coefficients = seq.coefficient_means;
    Ok(out)
}

/// Runs replications `0..reps` in parallel. The result is independent of
/// the thread count.
pub fn run_study(
    cfg: &StudyConfig,
    master_seed: u64,
    reps: usize,
) -> Result<Vec<ReplicationOutput>> {
    cfg.validate()?;
    if reps == 0 {
        return Err(Error::Domain("replications must be at least 1".into()));
    }
    (0..reps as u64)
        .into_par_iter()
        .map(|r| run_replication(r, cfg, master_seed))
        .collect()
}

/// Aggregated MSFE over replications.
#[derive(Debug, Clone, PartialEq)]
pub struct MsfeReport {
    pub checkpoints: Vec<usize>,
    /// `msfe[method][checkpoint]`, averaged over replications.
    pub msfe: [Vec<f64>; 4],
    /// `ratio_pct[method][checkpoint]`: mean over replications of
    /// `100 * MSFE_BPS / MSFE_method`.
    pub ratio_pct: [Vec<f64>; 4],
    /// `per_rep_msfe[rep][method][checkpoint]`.
    pub per_rep_msfe: Vec<[Vec<f64>; 4]>,
    pub rep_ids: Vec<u64>,
}

impl MsfeReport {
    pub fn msfe(&self, m: Method, checkpoint: usize) -> Option<f64> {
        let c = self.checkpoints.iter().position(|&c| c == checkpoint)?;
        Some(self.msfe[m.index()][c])
    }

    pub fn ratio(&self, m: Method, checkpoint: usize) -> Option<f64> {
        let c = self.checkpoints.iter().position(|&c| c == checkpoint)?;
        Some(self.ratio_pct[m.index()][c])
    }

    /// Per-replication `100 * MSFE_BPS / MSFE_method`.
    pub fn rep_ratio(&self, rep: usize, m: Method, c: usize) -> f64 {
        let row = &self.per_rep_msfe[rep];
        100.0 * row[Method::Bps.index()][c] / row[m.index()][c]
    }
}

pub fn aggregate(reps: &[ReplicationOutput], checkpoints: &[usize]) -> Result<MsfeReport> {
    if reps.is_empty() {
        return Err(Error::Empty("replications"));
    }
    if checkpoints.is_empty() {
        return Err(Error::Empty("checkpoints"));
    }
    for r in reps {
        for &c in checkpoints {
            if c == 0 || c > r.realized.len() {
                return Err(Error::Domain(format!(
                    "checkpoint {c} outside the {}-point forecast window",
                    r.realized.len()
                )));
            }
        }
    }
    let per_rep: Vec<[Vec<f64>; 4]> = reps
        .iter()
        .map(|r| Method::ALL.map(|m| checkpoints.iter().map(|&c| r.msfe(m, c)).collect()))
        .collect();
    let nrep = reps.len() as f64;
    let mut report = MsfeReport {
        checkpoints: checkpoints.to_vec(),
        msfe: Default::default(),
        ratio_pct: Default::default(),
        per_rep_msfe: per_rep,
        rep_ids: reps.iter().map(|r| r.rep_id).collect(),
    };
    for m in Method::ALL {
        for c in 0..checkpoints.len() {
            let mean = report
                .per_rep_msfe
                .iter()
                .map(|r| r[m.index()][c])
                .sum::<f64>()
                / nrep;
            let ratio = (0..reps.len())
                .map(|r| report.rep_ratio(r, m, c))
                .sum::<f64>()
                / nrep;
            report.msfe[m.index()].push(mean);
            report.ratio_pct[m.index()].push(ratio);
        }
    }
    Ok(report)
}

/// One value of a coefficient or weight trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Forecast index, starting at 1.
    pub t: usize,
    pub method: Method,
    pub coefficient_name: String,
    pub value: f64,
}

/// BMA weights, Mallows weights and synthesis coefficient means over the
/// forecast window of one replication.
pub fn coefficient_trace(rep: &ReplicationOutput) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for (method, series) in [
        (Method::Bma, &rep.bma_weights),
        (Method::Cp, &rep.cp_weights),
    ] {
        for (i, w) in series.iter().enumerate() {
            for (a, v) in w.iter().enumerate() {
                rows.push(TraceRow {
                    t: i + 1,
                    method,
                    coefficient_name: format!("agent{}", a + 1),
                    value: *v,
                });
            }
        }
    }
    for (i, theta) in rep.bps_coefficients.iter().enumerate() {
        for (a, v) in theta.iter().enumerate() {
            let name = if a == 0 {
                "intercept".to_string()
            } else {
                format!("agent{a}")
            };
            rows.push(TraceRow {
                t: i + 1,
                method: Method::Bps,
                coefficient_name: name,
                value: *v,
            });
        }
    }
    rows
}

/// Mean absolute synthesis intercept and mean absolute agent coefficient
/// over the forecast window.
pub fn intercept_prominence(rep: &ReplicationOutput) -> (f64, f64) {
    let mut icpt = 0.0;
    let mut coef = 0.0;
    let mut n_coef = 0usize;
    for theta in &rep.bps_coefficients {
        icpt += theta[0].abs();
        for v in &theta[1..] {
            coef += v.abs();
            n_coef += 1;
        }
    }
    let n = rep.bps_coefficients.len().max(1) as f64;
    (icpt / n, coef / n_coef.max(1) as f64)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_msfe_report<W: Write>(report: &MsfeReport, mut w: W) -> io::Result<()> {
    writeln!(w, "method,checkpoint,msfe,ratio_vs_bps_pct")?;
    for m in Method::ALL {
        for (c, cp) in report.checkpoints.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{}",
                m.name(),
                cp,
                fmt_f64(report.msfe[m.index()][c]),
                fmt_f64(report.ratio_pct[m.index()][c])
            )?;
        }
    }
    Ok(())
}

pub fn write_ratios_by_rep<W: Write>(report: &MsfeReport, mut w: W) -> io::Result<()> {
    writeln!(w, "rep,method,checkpoint,ratio")?;
    for (r, id) in report.rep_ids.iter().enumerate() {
        for m in [Method::Ew, Method::Bma, Method::Cp] {
            for (c, cp) in report.checkpoints.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    id,
                    m.name(),
                    cp,
                    fmt_f64(report.rep_ratio(r, m, c))
                )?;
            }
        }
    }
    Ok(())
}

pub fn write_trace<W: Write>(rows: &[TraceRow], mut w: W) -> io::Result<()> {
    writeln!(w, "t,method,coefficient_name,value")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{}",
            row.t,
            row.method.name(),
            row.coefficient_name,
            fmt_f64(row.value)
        )?;
    }
    Ok(())
}
