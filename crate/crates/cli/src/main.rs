mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use bps_core::bps::Protocol;
use bps_core::simlab::{self, Method};
use bps_core::statdist::RandomStream;
use bps_core::theorylab::{self, LevelsPath, StateDynamics, ToyModelConfig};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "bps",
    version,
    about = "Forecast synthesis simulation study and theory checks"
)]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Print debug progress.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// TOML config file, or a JSON summary from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Full,
    Warm,
}

#[derive(clap::Args, Debug, Clone)]
struct McmcArgs {
    #[arg(long)]
    protocol: Option<ProtocolArg>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    kept_draws: Option<usize>,
    #[arg(long)]
    warm_start_burn: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the replicated simulation study and write MSFE reports.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mcmc: McmcArgs,
        /// Number of replications.
        #[arg(long)]
        reps: Option<usize>,
        /// Ten replications with a shortened chain; explicit flags still win.
        #[arg(long)]
        smoke: bool,
    },
    /// Run one theory experiment: theorem2, lemma2 or corollary2.
    Theory {
        experiment: String,
        #[command(flatten)]
        common: Common,
        /// Sample size of the headline theorem2 configuration.
        #[arg(long)]
        n: Option<usize>,
        /// Number of random theorem2 configurations.
        #[arg(long)]
        random_configs: Option<usize>,
        /// Simulated paths per lemma2 shift.
        #[arg(long)]
        paths: Option<usize>,
        /// Path length for lemma2 and corollary2.
        #[arg(long)]
        path_len: Option<usize>,
        /// Comma-separated prior scales for corollary2.
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
    },
    /// Write coefficient and weight trajectories of one replication.
    Trace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mcmc: McmcArgs,
        /// Replication index.
        #[arg(long, default_value_t = 0)]
        rep: usize,
        /// Number of replications the index must fall within.
        #[arg(long)]
        reps: Option<usize>,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn config_err(err: anyhow::Error) -> Failure {
    Failure { code: 1, err }
}

fn runtime_err(err: anyhow::Error) -> Failure {
    Failure { code: 2, err }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet {
        "error"
    } else if cli.verbose {
        "debug"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            common,
            mcmc,
            reps,
            smoke,
        } => {
            let mut cfg = load_config(&common, &McmcArgs::empty())?;
            if smoke {
                cfg.run.replications = simlab::SMOKE_REPLICATIONS;
                cfg.bps = cfg.study().smoke().bps;
            }
            apply_mcmc(&mut cfg, &mcmc);
            if let Some(r) = reps {
                cfg.run.replications = r;
            }
            cfg.validate().map_err(config_err)?;
            setup_threads(cfg.run.threads)?;
            cmd_simulate(&cfg).map_err(runtime_err)
        }
        Command::Theory {
            experiment,
            common,
            n,
            random_configs,
            paths,
            path_len,
            sigmas,
        } => {
            let mut cfg = load_config(&common, &McmcArgs::empty())?;
            let th = &mut cfg.theory;
            if let Some(n) = n {
                th.theorem2.toy.n_samples = n;
            }
            if let Some(k) = random_configs {
                th.theorem2.random_configs = k;
            }
            if let Some(p) = paths {
                th.lemma2.n_paths = p;
            }
            if let Some(l) = path_len {
                th.lemma2.model.path_len = l;
                th.corollary2.path_len = l;
            }
            if let Some(s) = sigmas {
                th.corollary2.sigmas = s;
            }
            let exp = Experiment::parse(&experiment).map_err(config_err)?;
            exp.validate(&cfg).map_err(config_err)?;
            setup_threads(cfg.run.threads)?;
            cmd_theory(exp, &cfg).map_err(runtime_err)
        }
        Command::Trace {
            common,
            mcmc,
            rep,
            reps,
        } => {
            let mut cfg = load_config(&common, &mcmc)?;
            if let Some(r) = reps {
                cfg.run.replications = r;
            }
            cfg.validate().map_err(config_err)?;
            if rep >= cfg.run.replications {
                return Err(config_err(anyhow!(
                    "rep index {rep} out of range for {} replication(s)",
                    cfg.run.replications
                )));
            }
            setup_threads(cfg.run.threads)?;
            cmd_trace(&cfg, rep).map_err(runtime_err)
        }
    }
}

impl McmcArgs {
    fn empty() -> Self {
        Self {
            protocol: None,
            burn_in: None,
            kept_draws: None,
            warm_start_burn: None,
        }
    }
}

fn load_config(common: &Common, mcmc: &McmcArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(config_err)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.run.master_seed = s;
    }
    if let Some(t) = common.threads {
        cfg.run.threads = t;
    }
    if let Some(o) = &common.out {
        cfg.run.output_dir = o.clone();
    }
    apply_mcmc(&mut cfg, mcmc);
    Ok(cfg)
}

fn apply_mcmc(cfg: &mut RunConfig, mcmc: &McmcArgs) {
    if let Some(p) = mcmc.protocol {
        cfg.run.protocol = match p {
            ProtocolArg::Full => Protocol::FullRerun,
            ProtocolArg::Warm => Protocol::WarmStart,
        };
    }
    if let Some(b) = mcmc.burn_in {
        cfg.bps.burn_in = b;
    }
    if let Some(k) = mcmc.kept_draws {
        cfg.bps.kept_draws = k;
    }
    if let Some(w) = mcmc.warm_start_burn {
        cfg.bps.warm_start_burn = w;
    }
}

fn setup_threads(threads: usize) -> Result<(), Failure> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| runtime_err(anyhow!("thread pool: {e}")))?;
    }
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_file(
    dir: &Path,
    name: &str,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<PathBuf> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write_summary(
    dir: &Path,
    name: &str,
    command: &str,
    cfg: &RunConfig,
    started: Instant,
    results: serde_json::Value,
) -> Result<()> {
    let summary = json!({
        "command": command,
        "config": cfg,
        "seed": cfg.run.master_seed,
        "git_describe": git_describe(),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "results": results,
    });
    write_file(dir, name, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        writeln!(w)
    })?;
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let study = cfg.study();
    let dir = &cfg.run.output_dir;
    create_out(dir)?;
    info!(
        "simulating {} replication(s), seed {}, {:?}",
        cfg.run.replications, cfg.run.master_seed, study.protocol
    );
    let reps = simlab::run_study(&study, cfg.run.master_seed, cfg.run.replications)?;
    let report = simlab::aggregate(&reps, &study.checkpoints)?;
    write_file(dir, "msfe_report.csv", |w| {
        simlab::write_msfe_report(&report, w)
    })?;
    write_file(dir, "ratios_by_rep.csv", |w| {
        simlab::write_ratios_by_rep(&report, w)
    })?;

    println!(
        "{:>10} {:>12} {:>12} {:>12} {:>12}",
        "checkpoint", "EW", "BMA", "Cp", "BPS"
    );
    let mut rows = Vec::new();
    for (c, cp) in report.checkpoints.iter().enumerate() {
        let m = |m: Method| report.msfe[m as usize][c];
        let r = |m: Method| report.ratio_pct[m as usize][c];
        println!(
            "{:>10} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            cp,
            m(Method::Ew),
            m(Method::Bma),
            m(Method::Cp),
            m(Method::Bps)
        );
        println!(
            "{:>10} {:>12.2} {:>12.2} {:>12.2} {:>12}",
            "(%)",
            r(Method::Ew),
            r(Method::Bma),
            r(Method::Cp),
            "--"
        );
        let msfe: serde_json::Map<_, _> = Method::ALL
            .iter()
            .map(|&x| (x.name().to_string(), json!(m(x))))
            .collect();
        let ratios: serde_json::Map<_, _> = [Method::Ew, Method::Bma, Method::Cp]
            .iter()
            .map(|&x| (x.name().to_string(), json!(r(x))))
            .collect();
        rows.push(json!({ "checkpoint": cp, "msfe": msfe, "ratio_vs_bps_pct": ratios }));
    }
    write_summary(dir, "summary.json", "simulate", cfg, started, json!(rows))
}

#[derive(Clone, Copy, Debug)]
enum Experiment {
    Theorem2,
    Lemma2,
    Corollary2,
}

impl Experiment {
    const NAMES: [&'static str; 3] = ["theorem2", "lemma2", "corollary2"];

    fn parse(s: &str) -> Result<Self> {
        match s {
            "theorem2" => Ok(Self::Theorem2),
            "lemma2" => Ok(Self::Lemma2),
            "corollary2" => Ok(Self::Corollary2),
            _ => Err(anyhow!(
                "unknown experiment '{s}'; valid experiments: {}",
                Self::NAMES.join(", ")
            )),
        }
    }

    fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }

    fn validate(self, cfg: &RunConfig) -> Result<()> {
        let th = &cfg.theory;
        match self {
            Self::Theorem2 => {
                th.theorem2.toy.validate().context("theory.theorem2.toy")?;
                if th.theorem2.random_configs > 0 && th.theorem2.random_samples < 1000 {
                    anyhow::bail!("theory.theorem2.random_samples must be >= 1000");
                }
            }
            Self::Lemma2 => {
                if th.lemma2.n_paths < 2 {
                    anyhow::bail!("theory.lemma2.n_paths must be at least 2");
                }
                if th.lemma2.shifts.is_empty() {
                    anyhow::bail!("theory.lemma2.shifts must not be empty");
                }
                if th.lemma2.model.path_len == 0 {
                    anyhow::bail!("theory.lemma2.model.path_len must be at least 1");
                }
            }
            Self::Corollary2 => {
                let s = &th.corollary2.sigmas;
                if s.is_empty() || s[0] <= 0.0 || s.windows(2).any(|w| w[1] <= w[0]) {
                    anyhow::bail!(
                        "theory.corollary2.sigmas must be positive and strictly increasing"
                    );
                }
                if th.corollary2.grid_points < 2 {
                    anyhow::bail!("theory.corollary2.grid_points must be at least 2");
                }
            }
        }
        Ok(())
    }
}

// Stream ids of the theory experiments.
const STREAM_THEOREM2: u64 = 101;
const STREAM_LEMMA2: u64 = 102;
const STREAM_COROLLARY2: u64 = 103;

fn cmd_theory(exp: Experiment, cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let dir = &cfg.run.output_dir;
    create_out(dir)?;
    let root = RandomStream::new(cfg.run.master_seed, 0);
    let (pass, results) = match exp {
        Experiment::Theorem2 => run_theorem2(cfg, &root.derive(STREAM_THEOREM2), dir)?,
        Experiment::Lemma2 => run_lemma2(cfg, &root.derive(STREAM_LEMMA2), dir)?,
        Experiment::Corollary2 => run_corollary2(cfg, &root.derive(STREAM_COROLLARY2), dir)?,
    };
    write_summary(
        dir,
        &format!("{}_summary.json", exp.name()),
        &format!("theory {}", exp.name()),
        cfg,
        started,
        results,
    )?;
    println!("RESULT: {}", if pass { "PASS" } else { "FAIL" });
    Ok(())
}

fn run_theorem2(
    cfg: &RunConfig,
    stream: &RandomStream,
    dir: &Path,
) -> Result<(bool, serde_json::Value)> {
    let th = &cfg.theory.theorem2;
    let mut configs = vec![th.toy];
    let mut pick = stream.derive(0);
    for _ in 0..th.random_configs {
        let mut u = || 2.0 * pick.uniform() - 1.0;
        configs.push(ToyModelConfig {
            mu: u(),
            mu1: u(),
            mu2: u(),
            step: th.toy.step,
            n_samples: th.random_samples,
        });
    }
    // Pure-martingale configuration for the equality case.
    configs.push(ToyModelConfig {
        mu: 0.0,
        mu1: 0.0,
        mu2: 0.0,
        step: th.toy.step,
        n_samples: th.random_samples.max(1000),
    });
    let mut rows = Vec::with_capacity(configs.len());
    let mut pass = true;
    for (i, c) in configs.iter().enumerate() {
        let g = theorylab::theorem2_gap(c, &mut stream.derive(i as u64 + 1))?;
        if g.gap < -3.0 * g.gap_se {
            pass = false;
        }
        let martingale = c.mu == 0.0 && c.mu1 == 0.0 && c.mu2 == 0.0;
        if martingale && (g.mu_star.abs() >= 3.0 * g.mu_star_se || g.gap.abs() >= 3.0 * g.gap_se) {
            pass = false;
        }
        rows.push((*c, g));
    }
    write_file(dir, "theorem2_gap.csv", |w| {
        theorylab::write_theorem2_csv(&rows, w)
    })?;
    let head = &rows[0].1;
    let toy = &rows[0].0;
    // Closed form: the omitted drift enters the linear fit's MSE as mu^2.
    if toy.mu1 == 0.0 && toy.mu2 == 0.0 && (head.gap - toy.mu * toy.mu).abs() > 0.01 {
        pass = false;
    }
    println!(
        "headline: mse_linear {:.6}, mse_with_intercept {:.6}, gap {:.6} (s.e. {:.2e})",
        head.mse_linear, head.mse_with_intercept, head.gap, head.gap_se
    );
    let min_z = rows
        .iter()
        .filter(|(_, g)| g.gap_se > 0.0)
        .map(|(_, g)| g.gap / g.gap_se)
        .fold(f64::INFINITY, f64::min);
    println!("configs: {}, smallest gap / s.e.: {:.3}", rows.len(), min_z);
    Ok((
        pass,
        json!({ "headline": head, "n_configs": rows.len(), "min_gap_z": min_z, "pass": pass }),
    ))
}

fn run_lemma2(
    cfg: &RunConfig,
    stream: &RandomStream,
    dir: &Path,
) -> Result<(bool, serde_json::Value)> {
    let l = &cfg.theory.lemma2;
    let rw = theorylab::lemma2_constancy(
        &l.shifts,
        StateDynamics::RandomWalk,
        &l.model,
        l.n_paths,
        stream,
    )?;
    let st = theorylab::lemma2_constancy(
        &l.shifts,
        StateDynamics::Stationary {
            phi: l.stationary_phi,
        },
        &l.model,
        l.n_paths,
        stream,
    )?;
    write_file(dir, "lemma2_risks.csv", |w| {
        theorylab::write_lemma2_csv(&[rw.clone(), st.clone()], &l.model, w)
    })?;
    for r in [&rw, &st] {
        println!(
            "{}: max pairwise |difference| / s.e. = {:.3}",
            r.dynamics.name(),
            r.max_z
        );
    }
    // One shift cannot violate constancy, so only the random-walk half applies.
    let pass = rw.is_constant(3.0) && (l.shifts.len() < 2 || !st.is_constant(3.0));
    Ok((
        pass,
        json!({
            "random_walk_max_z": rw.max_z,
            "stationary_max_z": st.max_z,
            "random_walk_risks": rw.risks,
            "stationary_risks": st.risks,
            "pass": pass,
        }),
    ))
}

fn run_corollary2(
    cfg: &RunConfig,
    stream: &RandomStream,
    dir: &Path,
) -> Result<(bool, serde_json::Value)> {
    let c = &cfg.theory.corollary2;
    let path = LevelsPath::simulate(c.path_len, &mut stream.derive(0));
    let grid = theorylab::default_eval_grid(&path, &c.sigmas, c.grid_points)?;
    let diffs = theorylab::corollary2_convergence(&c.sigmas, &path, &grid)?;
    write_file(dir, "corollary2_curve.csv", |w| {
        theorylab::write_corollary2_csv(&c.sigmas, &diffs, c.path_len, c.grid_points, w)
    })?;
    for (s, d) in c.sigmas.iter().zip(&diffs) {
        println!("sigma {s:>10e}: sup |difference| {d:.3e}");
    }
    let monotone = diffs
        .windows(2)
        .all(|w| w[1] < w[0] || (w[0] <= 1e-12 && w[1] <= w[0] + 1e-12));
    let limit_ok = c
        .sigmas
        .iter()
        .zip(&diffs)
        .all(|(s, d)| *s < 1e6 || *d < 1e-6);
    let pass = monotone && limit_ok;
    Ok((
        pass,
        json!({ "sigmas": c.sigmas, "sup_abs_diff": diffs, "pass": pass }),
    ))
}

fn cmd_trace(cfg: &RunConfig, rep: usize) -> Result<()> {
    let started = Instant::now();
    let dir = &cfg.run.output_dir;
    create_out(dir)?;
    let out = simlab::run_replication(rep as u64, &cfg.study(), cfg.run.master_seed)?;
    let rows = simlab::coefficient_trace(&out);
    for m in [Method::Bma, Method::Cp, Method::Bps] {
        let mine: Vec<_> = rows.iter().filter(|r| r.method == m).cloned().collect();
        let name = format!("coeff_trace_rep{rep}_{}.csv", m.name());
        write_file(dir, &name, |w| simlab::write_trace(&mine, w))?;
    }
    let (icpt, coef) = simlab::intercept_prominence(&out);
    println!("mean |intercept| {icpt:.6}, mean |agent coefficient| {coef:.6}");
    println!(
        "intercept prominence: {}",
        if icpt > coef {
            "intercept dominates"
        } else {
            "agent coefficients dominate"
        }
    );
    write_summary(
        dir,
        &format!("trace_rep{rep}_summary.json"),
        "trace",
        cfg,
        started,
        json!({ "rep": rep, "mean_abs_intercept": icpt, "mean_abs_agent_coefficient": coef }),
    )
}
