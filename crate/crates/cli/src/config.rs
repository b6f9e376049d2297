//! Experiment configuration files.
//!
//! TOML with one section per command plus `[run]` and `[shampoo]`. Every key
//! is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use qshampoo_core::metrics::FidelityConfig;
use qshampoo_core::quant::OffDiagNorm;
use qshampoo_core::state::DiagonalPolicy;
use qshampoo_core::{BaseOptimizerKind, CodebookKind, QuantError, Quantizer, ShampooConfig, StateMode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version of both the config file and the output schema.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("writing config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("unsupported schema version {0}, expected {SCHEMA_VERSION}")]
    Schema(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
pub enum Format {
    #[default]
    #[serde(rename = "csv")]
    #[value(name = "csv")]
    Csv,
    #[serde(rename = "json")]
    #[value(name = "json")]
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum Mode {
    #[serde(rename = "full32")]
    #[value(name = "full32")]
    Full32,
    #[serde(rename = "vq4")]
    #[value(name = "vq4")]
    Vq4,
    #[serde(rename = "cq4")]
    #[value(name = "cq4")]
    Cq4,
    #[serde(rename = "cq4ef")]
    #[value(name = "cq4ef")]
    Cq4Ef,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full32, Mode::Vq4, Mode::Cq4, Mode::Cq4Ef];
}

impl From<Mode> for StateMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full32 => StateMode::Full32,
            Mode::Vq4 => StateMode::Vq4,
            Mode::Cq4 => StateMode::Cq4,
            Mode::Cq4Ef => StateMode::Cq4Ef,
        }
    }
}

impl From<StateMode> for Mode {
    fn from(m: StateMode) -> Self {
        match m {
            StateMode::Full32 => Mode::Full32,
            StateMode::Vq4 => Mode::Vq4,
            StateMode::Cq4 => Mode::Cq4,
            StateMode::Cq4Ef => Mode::Cq4Ef,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codebook {
    Linear,
    Linear2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diagonal {
    Full,
    Quantized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScope {
    Offdiag,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Quadratic,
    Logistic,
    MlpTanh,
    MlpRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgdm,
    Adamw,
    Rmsprop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub format: Format,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Record wall-clock time; off by default so outputs stay reproducible.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, format: Format::Csv, out: None, timing: false }
    }
}

/// Optional replacements for [`ShampooConfig`] fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShampooOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_e: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t1: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t2: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_order: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exemption: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grafting: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codebook: Option<Codebook>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagonal: Option<Diagonal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offdiag_norm: Option<NormScope>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_first_update: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power_tol: Option<f64>,
}

impl ShampooOverrides {
    pub fn apply(&self, base: &ShampooConfig) -> ShampooConfig {
        let mut c = base.clone();
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            beta,
            beta_e,
            eps,
            t1,
            t2,
            bits,
            block,
            max_order,
            exemption,
            grafting,
            exact,
            force_first_update,
            power_iters,
            power_tol
        );
        if let Some(m) = self.mode {
            c.mode = m.into();
        }
        if let Some(cb) = self.codebook {
            c.codebook = match cb {
                Codebook::Linear => CodebookKind::Linear,
                Codebook::Linear2 => CodebookKind::Linear2,
            };
        }
        if let Some(d) = self.diagonal {
            c.diagonal = match d {
                Diagonal::Full => DiagonalPolicy::FullPrecision,
                Diagonal::Quantized => DiagonalPolicy::Quantized,
            };
        }
        if let Some(s) = self.offdiag_norm {
            c.offdiag_norm = match s {
                NormScope::Offdiag => OffDiagNorm::OffDiagonal,
                NormScope::Block => OffDiagNorm::FullBlock,
            };
        }
        c
    }

    pub fn shampoo(&self) -> ShampooConfig {
        self.apply(&ShampooConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatStudyConfig {
    pub n_matrices: usize,
    pub order: usize,
    /// One study per seed; `--seed` replaces the list.
    pub seeds: Vec<u64>,
    pub lam_lo: f64,
    pub lam_hi: f64,
    pub root_eps: f64,
}

impl Default for MatStudyConfig {
    fn default() -> Self {
        Self { n_matrices: 100, order: 64, seeds: vec![0], lam_lo: 1e-3, lam_hi: 1e3, root_eps: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub problem: ProblemKind,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: u64,
    /// Minibatch size; full batch when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    pub log_every: u64,
    pub weight_decay: f64,
    /// Quadratic: parameter rows and columns, condition number of each factor.
    pub rows: usize,
    pub cols: usize,
    pub cond: f64,
    /// Logistic and MLP: input width and sample count.
    pub dim: usize,
    pub samples: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            problem: ProblemKind::Quadratic,
            optimizer: OptimizerKind::Sgdm,
            lr: 0.01,
            steps: 500,
            batch: None,
            log_every: 10,
            weight_decay: 0.0,
            rows: 16,
            cols: 16,
            cond: 10.0,
            dim: 8,
            samples: 256,
            hidden: 16,
            outputs: 4,
            l2: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn base_kind(&self) -> BaseOptimizerKind {
        let kind = match self.optimizer {
            OptimizerKind::Sgdm => BaseOptimizerKind::sgdm(),
            OptimizerKind::Adamw => BaseOptimizerKind::adamw(),
            OptimizerKind::Rmsprop => BaseOptimizerKind::rmsprop(),
        };
        let weight_decay = self.weight_decay;
        match kind {
            BaseOptimizerKind::Sgdm { momentum, .. } => BaseOptimizerKind::Sgdm { momentum, weight_decay },
            BaseOptimizerKind::AdamW { beta1, beta2, eps, .. } => {
                BaseOptimizerKind::AdamW { beta1, beta2, eps, weight_decay }
            }
            k => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemReportConfig {
    pub shapes: Vec<Vec<usize>>,
    pub modes: Vec<Mode>,
}

impl Default for MemReportConfig {
    fn default() -> Self {
        Self { shapes: vec![vec![64, 64], vec![256, 256], vec![1024, 1024]], modes: Mode::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub run: RunConfig,
    pub shampoo: ShampooOverrides,
    pub matstudy: MatStudyConfig,
    pub train: TrainConfig,
    pub memreport: MemReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            run: RunConfig::default(),
            shampoo: ShampooOverrides::default(),
            matstudy: MatStudyConfig::default(),
            train: TrainConfig::default(),
            memreport: MemReportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        if cfg.schema != SCHEMA_VERSION {
            return Err(ConfigError::Schema(cfg.schema));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.shampoo.shampoo().validate() {
            return bad(e.to_string());
        }
        let m = &self.matstudy;
        if m.order < 4 {
            return bad(format!("matstudy.order must be at least 4, got {}", m.order));
        }
        if !(m.lam_lo > 0.0 && m.lam_lo <= m.lam_hi) {
            return bad("matstudy eigenvalue range must satisfy 0 < lam_lo <= lam_hi".into());
        }
        let t = &self.train;
        if t.log_every == 0 || t.steps == 0 {
            return bad("train.steps and train.log_every must be at least 1".into());
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return bad("train.lr must be finite and non-negative".into());
        }
        if t.batch == Some(0) {
            return bad("train.batch must be at least 1".into());
        }
        if t.rows == 0 || t.cols == 0 || t.dim == 0 || t.samples == 0 || t.hidden == 0 || t.outputs == 0 {
            return bad("train problem sizes must be at least 1".into());
        }
        if t.cond.is_nan() || t.cond < 1.0 {
            return bad("train.cond must be at least 1".into());
        }
        if self.memreport.shapes.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return bad("memreport shapes must be non-empty with positive dimensions".into());
        }
        Ok(())
    }

    pub fn shampoo_config(&self) -> ShampooConfig {
        self.shampoo.shampoo()
    }

    pub fn fidelity_config(&self) -> Result<FidelityConfig, QuantError> {
        let s = self.shampoo_config();
        let quantizer: Quantizer = s.quantizer()?;
        Ok(FidelityConfig { quantizer, diagonal: s.diagonal, root_eps: self.matstudy.root_eps, chol_eps: 0.0 })
    }
}
