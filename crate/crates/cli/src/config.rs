//! Run configuration: a TOML file with `[run]`, `[dgp]`, `[agents]`,
//! `[bps]`, `[study]` and `[theory]` sections. Every key is optional.
//!
//! A JSON summary written by an earlier run is accepted as well; its
//! `config` object is read back in place of the TOML document.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bps_core::bps::{BpsConfig, Protocol};
use bps_core::simlab::{AgentConfig, DgpConfig, StudyConfig};
use bps_core::theorylab::{IncrementModel, Shift, ToyModelConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub master_seed: u64,
    pub replications: usize,
    pub output_dir: PathBuf,
    pub protocol: Protocol,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            master_seed: 20190101,
            replications: 100,
            output_dir: PathBuf::from("out"),
            protocol: Protocol::WarmStart,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub training: usize,
    pub calibration_start: usize,
    pub checkpoints: Vec<usize>,
}

impl Default for StudySection {
    fn default() -> Self {
        let s = StudyConfig::default();
        Self {
            training: s.training,
            calibration_start: s.calibration_start,
            checkpoints: s.checkpoints,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem2Section {
    /// The headline toy configuration.
    pub toy: ToyModelConfig,
    /// Extra configurations with drifts drawn uniformly from `[-1, 1]`.
    pub random_configs: usize,
    pub random_samples: usize,
}

impl Default for Theorem2Section {
    fn default() -> Self {
        Self {
            toy: ToyModelConfig::default(),
            random_configs: 100,
            random_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lemma2Section {
    pub model: IncrementModel,
    pub n_paths: usize,
    pub shifts: Vec<Shift>,
    /// State coefficient of the stationary comparison predictor.
    pub stationary_phi: f64,
}

impl Default for Lemma2Section {
    fn default() -> Self {
        Self {
            model: IncrementModel::default(),
            n_paths: 500,
            shifts: vec![
                Shift {
                    a: 0.0,
                    theta: [0.0, 0.0],
                },
                Shift {
                    a: 1.0,
                    theta: [2.0, -1.0],
                },
                Shift {
                    a: -0.5,
                    theta: [0.3, 1.5],
                },
            ],
            stationary_phi: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Corollary2Section {
    pub sigmas: Vec<f64>,
    pub path_len: usize,
    pub grid_points: usize,
}

impl Default for Corollary2Section {
    fn default() -> Self {
        Self {
            sigmas: vec![1.0, 10.0, 100.0, 1e4, 1e6],
            path_len: 10,
            grid_points: 2001,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub theorem2: Theorem2Section,
    pub lemma2: Lemma2Section,
    pub corollary2: Corollary2Section,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dgp: DgpConfig,
    pub agents: AgentConfig,
    pub bps: BpsConfig,
    pub study: StudySection,
    pub theory: TheorySection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let is_json =
            path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        if is_json {
            let mut v: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            let inner = v
                .get_mut("config")
                .map(serde_json::Value::take)
                .unwrap_or(v);
            serde_json::from_value(inner)
                .with_context(|| format!("parsing config in {}", path.display()))
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        }
    }

    pub fn study(&self) -> StudyConfig {
        StudyConfig {
            dgp: self.dgp.clone(),
            agents: self.agents.clone(),
            bps: self.bps.clone(),
            protocol: self.run.protocol,
            training: self.study.training,
            calibration_start: self.study.calibration_start,
            checkpoints: self.study.checkpoints.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.replications == 0 {
            bail!("run.replications must be at least 1");
        }
        self.study()
            .validate()
            .context("invalid study configuration")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let c: RunConfig = toml::from_str(
            r#"
            [run]
            master_seed = 7
            replications = 3
            protocol = "full_rerun"

            [dgp]
            noise_scale = "std_dev"

            [bps]
            burn_in = 10
            [bps.discounts]
            delta = 0.98
            beta = 0.9

            [theory.corollary2]
            sigmas = [1.0, 2.0]
            "#,
        )
        .unwrap();
        assert_eq!(c.run.master_seed, 7);
        assert_eq!(c.run.protocol, Protocol::FullRerun);
        assert_eq!(c.bps.burn_in, 10);
        assert_eq!(c.bps.discounts.beta, 0.9);
        assert_eq!(c.theory.corollary2.sigmas, vec![1.0, 2.0]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = toml::from_str::<RunConfig>("[run]\nreplicashuns = 3\n").unwrap_err();
        assert!(err.to_string().contains("replicashuns"));
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        let v = serde_json::json!({ "config": c, "seed": 1 });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("summary.json");
        std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), c);
    }
}
