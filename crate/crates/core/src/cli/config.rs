use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::hmc::{GradientMode, HmcConfig};
use crate::kernel::KernelHyper;
use crate::pde::{make_problem, ProblemOverrides, ProblemSpec};
use crate::pretrain::{AdamConfig, LossWeights, PretrainConfig};

/// A config problem tied to the key that caused it.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl SchemaError {
    fn new(path: &str, message: impl Into<String>) -> Self {
        Self {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    pub dim: Option<usize>,
    pub phi_true: Option<Vec<f64>>,
    pub prior_lo: Option<Vec<f64>>,
    pub prior_hi: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(rename = "N_u")]
    pub n_u: usize,
    /// Defaults to `N_col`.
    #[serde(rename = "N_f")]
    pub n_f: Option<usize>,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_u: 50,
            n_f: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(rename = "N_col")]
    pub n_col: usize,
    pub n_iter: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub feature_dim: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub phi_init: Option<Vec<f64>>,
    pub psi_init: Option<KernelHyper>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let c = PretrainConfig::default();
        let a = AdamConfig::default();
        Self {
            n_col: c.n_col,
            n_iter: c.n_iter,
            seed: 1,
            hidden: c.hidden,
            feature_dim: None,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weights: LossWeights::default(),
            phi_init: None,
            psi_init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcSection {
    pub n_warmup: usize,
    pub n_samples: usize,
    pub n_leapfrog: usize,
    pub step_size: f64,
    pub step_jitter: f64,
    pub target_accept: f64,
    pub mass: Option<Vec<f64>>,
    pub seed: u64,
    /// Standard deviation of the log-normal kernel hyperparameter priors.
    pub psi_prior_sd: f64,
    pub n_chains: usize,
    pub gradient: GradientMode,
}

impl Default for HmcSection {
    fn default() -> Self {
        let h = HmcConfig::default();
        Self {
            n_warmup: h.n_warmup,
            n_samples: h.n_samples,
            n_leapfrog: h.n_leapfrog,
            step_size: h.step_size,
            step_jitter: h.step_jitter,
            target_accept: h.target_accept,
            mass: None,
            seed: 2,
            psi_prior_sd: 0.5,
            n_chains: 1,
            gradient: GradientMode::Tape,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub enabled: bool,
    pub thinning: usize,
    pub n_space: usize,
    pub n_time: usize,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            enabled: true,
            thinning: 10,
            n_space: 21,
            n_time: 21,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    pub enabled: bool,
    /// Diagonal of the Gaussian prior covariance around the pretrained `φ`.
    pub prior_var: f64,
    pub max_iter: usize,
}

impl Default for MapSection {
    fn default() -> Self {
        Self {
            enabled: false,
            prior_var: 0.25,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub hmc: HmcSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub map: MapSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Every optional key, for reporting which ones fell back to defaults.
const OPTIONAL_KEYS: &[&str] = &[
    "problem.dim",
    "problem.phi_true",
    "problem.prior_lo",
    "problem.prior_hi",
    "data.N_u",
    "data.N_f",
    "data.seed",
    "pretrain.N_col",
    "pretrain.n_iter",
    "pretrain.seed",
    "pretrain.hidden",
    "pretrain.feature_dim",
    "pretrain.lr",
    "pretrain.beta1",
    "pretrain.beta2",
    "pretrain.eps",
    "pretrain.weights",
    "pretrain.phi_init",
    "pretrain.psi_init",
    "hmc.n_warmup",
    "hmc.n_samples",
    "hmc.n_leapfrog",
    "hmc.step_size",
    "hmc.step_jitter",
    "hmc.target_accept",
    "hmc.mass",
    "hmc.seed",
    "hmc.psi_prior_sd",
    "hmc.n_chains",
    "hmc.gradient",
    "predict.enabled",
    "predict.thinning",
    "predict.n_space",
    "predict.n_time",
    "map.enabled",
    "map.prior_var",
    "map.max_iter",
    "output.dir",
];

/// A parsed and checked config with the keys that were left at defaults.
#[derive(Clone, Debug)]
pub struct Validated {
    pub config: ExperimentConfig,
    pub problem: ProblemSpec,
    pub defaulted: Vec<String>,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, SchemaError> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.message().to_string();
        SchemaError {
            path: if path == "." { "<root>".into() } else { path },
            message,
        }
    })
}

fn defaulted_keys(text: &str) -> Vec<String> {
    let Ok(value) = text.parse::<toml::Table>() else {
        return vec![];
    };
    OPTIONAL_KEYS
        .iter()
        .filter(|k| {
            let mut cur: Option<&toml::Value> = None;
            let mut table = Some(&value);
            for part in k.split('.') {
                cur = table.and_then(|t| t.get(part));
                table = cur.and_then(|v| v.as_table());
            }
            cur.is_none()
        })
        .map(|k| k.to_string())
        .collect()
}

impl ExperimentConfig {
    pub fn n_f(&self) -> usize {
        self.data.n_f.unwrap_or(self.pretrain.n_col)
    }

    pub fn overrides(&self) -> ProblemOverrides {
        ProblemOverrides {
            dim: self.problem.dim,
            phi_true: self.problem.phi_true.clone(),
            prior_lo: self.problem.prior_lo.clone(),
            prior_hi: self.problem.prior_hi.clone(),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            n_col: p.n_col,
            weights: p.weights,
            adam: AdamConfig {
                lr: p.lr,
                beta1: p.beta1,
                beta2: p.beta2,
                eps: p.eps,
            },
            n_iter: p.n_iter,
            seed: p.seed,
            hidden: p.hidden.clone(),
            feature_dim: p.feature_dim,
            phi_init: p.phi_init.clone(),
            psi_init: p.psi_init.clone(),
        }
    }

    /// Sampler settings of chain `c`.
    pub fn hmc_config(&self, c: usize) -> HmcConfig {
        let h = &self.hmc;
        HmcConfig {
            n_warmup: h.n_warmup,
            n_samples: h.n_samples,
            n_leapfrog: h.n_leapfrog,
            step_size: h.step_size,
            target_accept: h.target_accept,
            mass: h.mass.clone(),
            step_jitter: h.step_jitter,
            seed: h.seed.wrapping_add(c as u64),
        }
    }

    /// Sets the data, pretraining and sampler seeds to `s`, `s + 1`, `s + 2`.
    pub fn override_seed(&mut self, s: u64) {
        self.data.seed = s;
        self.pretrain.seed = s.wrapping_add(1);
        self.hmc.seed = s.wrapping_add(2);
    }

    /// Checks everything the types alone do not.
    pub fn check(&self) -> Result<ProblemSpec, SchemaError> {
        let positive = [
            ("data.N_u", self.data.n_u),
            ("pretrain.N_col", self.pretrain.n_col),
            ("data.N_f", self.n_f()),
            ("hmc.n_samples", self.hmc.n_samples),
            ("hmc.n_leapfrog", self.hmc.n_leapfrog),
            ("hmc.n_chains", self.hmc.n_chains),
            ("predict.thinning", self.predict.thinning),
            ("predict.n_space", self.predict.n_space),
            ("predict.n_time", self.predict.n_time),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(SchemaError::new(path, "must be positive"));
            }
        }
        if self.pretrain.hidden.is_empty() || self.pretrain.hidden.contains(&0) {
            return Err(SchemaError::new("pretrain.hidden", "needs at least one non-zero width"));
        }
        if self.pretrain.feature_dim == Some(0) {
            return Err(SchemaError::new("pretrain.feature_dim", "must be positive"));
        }
        if !(self.pretrain.lr > 0.0) {
            return Err(SchemaError::new("pretrain.lr", "must be positive"));
        }
        for (path, b) in [("pretrain.beta1", self.pretrain.beta1), ("pretrain.beta2", self.pretrain.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(SchemaError::new(path, "must lie in [0, 1)"));
            }
        }
        if !(self.pretrain.eps > 0.0) {
            return Err(SchemaError::new("pretrain.eps", "must be positive"));
        }
        self.pretrain
            .weights
            .validate()
            .map_err(|e| SchemaError::new("pretrain.weights", e.to_string()))?;
        if !(self.hmc.step_size > 0.0) {
            return Err(SchemaError::new("hmc.step_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.hmc.step_jitter) {
            return Err(SchemaError::new("hmc.step_jitter", "must lie in [0, 1)"));
        }
        if !(self.hmc.target_accept > 0.4 && self.hmc.target_accept < 0.99) {
            return Err(SchemaError::new("hmc.target_accept", "must lie in (0.4, 0.99)"));
        }
        if !(self.hmc.psi_prior_sd > 0.0) {
            return Err(SchemaError::new("hmc.psi_prior_sd", "must be positive"));
        }
        if let Some(m) = &self.hmc.mass {
            if m.iter().any(|v| !(*v > 0.0)) {
                return Err(SchemaError::new("hmc.mass", "entries must be positive"));
            }
        }
        if !(self.map.prior_var > 0.0) {
            return Err(SchemaError::new("map.prior_var", "must be positive"));
        }
        let problem = make_problem(&self.problem.name, &self.overrides()).map_err(|e| {
            let path = match e {
                crate::Error::UnknownProblem(_) => "problem.name",
                _ => "problem",
            };
            SchemaError::new(path, e.to_string())
        })?;
        if let Some(phi) = &self.pretrain.phi_init {
            if phi.len() != problem.n_phi() {
                return Err(SchemaError::new(
                    "pretrain.phi_init",
                    format!("expected {} values", problem.n_phi()),
                ));
            }
        }
        if let Some(m) = &self.hmc.mass {
            let p = self
                .pretrain
                .feature_dim
                .unwrap_or(if problem.dx == 1 { 2 } else { 4 });
            let dim = problem.n_phi() + 1 + p;
            if m.len() != dim {
                return Err(SchemaError::new("hmc.mass", format!("expected {dim} values")));
            }
        }
        Ok(problem)
    }
}

/// Parses, checks and lists the defaulted keys.
pub fn validate_text(text: &str) -> Result<Validated, SchemaError> {
    let config = parse_config(text)?;
    let problem = config.check()?;
    Ok(Validated {
        config,
        problem,
        defaulted: defaulted_keys(text),
    })
}

pub fn validate_file(path: &Path) -> Result<Validated, SchemaError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SchemaError::new("<file>", format!("cannot read {}: {e}", path.display())))?;
    validate_text(&text)
}
