//! Experiment configuration: a TOML file whose every key is optional, with
//! command-line flags layered on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steerlab::gate::GateConfig;
use steerlab::model::ModelConfig;
use steerlab::probe::CvConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum WorldKind {
    Planted,
    MixedHarm,
    Arithmetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GateChoice {
    Off,
    Oracle,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Md,
    Probe,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Probe,
    GateTrain,
    GateVal,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/suite.json`.
    pub suite: Option<PathBuf>,
    /// Overrides the model file named by the suite.
    pub model: Option<PathBuf>,
    /// Defaults to `<out_dir>/split.json`.
    pub split: Option<PathBuf>,
    pub fractions: [f64; 4],

    // suite construction
    pub world: WorldKind,
    pub model_shape: ModelConfig,
    pub planted: usize,
    pub instances: usize,
    pub corrupt_rate: f64,
    pub noise: f64,

    // trace collection
    pub samples: usize,
    pub temperature: f64,
    pub balance: Option<[usize; 2]>,

    // identification and evaluation
    pub k: usize,
    pub polarity_filter: bool,
    /// Strength written into the spec; `None` uses the suite's calibrated
    /// strength when it has one, else the middle of `alphas`.
    pub alpha: Option<f64>,
    pub alphas: Vec<f64>,
    pub gate: GateChoice,
    pub baseline: Baseline,
    pub eval_split: SplitName,

    pub sweep_alphas: Vec<f64>,
    pub sweep_ks: Vec<usize>,

    pub include_prompt: bool,

    pub gate_training: GateConfig,
    pub probe_cv: CvConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            suite: None,
            model: None,
            split: None,
            fractions: [0.15, 0.25, 0.10, 0.50],
            world: WorldKind::Planted,
            model_shape: ModelConfig {
                n_layers: 4,
                d_model: 16,
                d_mlp: 32,
                n_heads: 2,
                vocab_size: 512,
                max_seq: 8,
            },
            planted: 5,
            instances: 200,
            corrupt_rate: 0.5,
            noise: 0.3,
            samples: 8,
            temperature: 1.0,
            balance: None,
            k: 50,
            polarity_filter: true,
            alpha: None,
            alphas: vec![0.1, 0.2, 0.3],
            gate: GateChoice::Off,
            baseline: Baseline::Md,
            eval_split: SplitName::Test,
            sweep_alphas: steerlab::experiment::DEFAULT_ALPHA_GRID.to_vec(),
            sweep_ks: steerlab::experiment::DEFAULT_K_GRID.to_vec(),
            include_prompt: false,
            gate_training: GateConfig::default(),
            probe_cv: CvConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if let Some(a) = self.alphas.iter().chain(&self.sweep_alphas).chain(self.alpha.as_ref()).find(|a| !(**a >= 0.0) || !a.is_finite()) {
            return bad(format!("steering strength {a} must be a finite value >= 0"));
        }
        if self.alphas.is_empty() {
            return bad("alphas must not be empty".into());
        }
        if self.k == 0 {
            return bad("K must be >= 1".into());
        }
        if self.samples == 0 {
            return bad("samples must be >= 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("sampling temperature must be > 0, got {}", self.temperature));
        }
        Ok(())
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn suite_path(&self) -> PathBuf {
        self.suite.clone().unwrap_or_else(|| self.out("suite.json"))
    }

    pub fn split_path(&self) -> PathBuf {
        self.split.clone().unwrap_or_else(|| self.out("split.json"))
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            seed: self.seed,
            ..self.gate_training.clone()
        }
    }
}
