//! Declarative run configuration.
//!
//! A run is fully described by a [`RunConfig`]: where the data comes from,
//! the model shape, and the training schedule. Configs are stored as TOML;
//! every key mirrors a struct field and omitted keys take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PpouError, Result};
use crate::mixture::Architecture;
use crate::nn::Activation;
use crate::poly_basis::BasisFamily;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Number of hidden layers.
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub residual: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 8,
            activation: Activation::Tanh,
            residual: true,
        }
    }
}

impl NetConfig {
    pub fn new(depth: usize, width: usize, residual: bool) -> Self {
        Self {
            depth,
            width,
            activation: Activation::Tanh,
            residual,
        }
    }

    /// Layer widths for a net mapping `input` to `output`.
    pub fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.depth + 2);
        w.push(input);
        w.extend(std::iter::repeat_n(self.width, self.depth));
        w.push(output);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Number of clusters `J`.
    pub clusters: usize,
    pub degree: usize,
    pub family: BasisFamily,
    /// Latent dimension for serial/parallel models. Basic models use the
    /// input dimension and must leave this unset (or equal to it).
    pub latent_dim: Option<usize>,
    pub encoder: NetConfig,
    pub classifier: NetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Basic,
            clusters: 4,
            degree: 2,
            family: BasisFamily::Chebyshev,
            latent_dim: None,
            encoder: NetConfig::new(4, 16, false),
            classifier: NetConfig::new(4, 8, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Em,
    Alternative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Must equal the model's cluster count when set.
    pub kmeans_clusters: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Cluster on encoder outputs (serial models) instead of raw inputs.
    pub cluster_on_latent: bool,
    pub max_lloyd_iters: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            kmeans_clusters: None,
            epochs: 300,
            learning_rate: 1e-2,
            cluster_on_latent: false,
            max_lloyd_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Defaults to the alternative loss for basic and noise-model runs and
    /// to the EM loss otherwise.
    pub loss: Option<LossKind>,
    pub max_em_iters: usize,
    pub grad_steps_per_m: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub pretrain: Option<PretrainConfig>,
    pub rel_elbo_tol: f64,
    pub patience: usize,
    pub noise_model: bool,
    /// Background noise variance; only used when `noise_model` is set.
    pub sigma0_2: f64,
    /// Use `σ_j² + σ₀²` in the noise-model responsibilities.
    pub convolved_responsibilities: bool,
    /// Variance floor relative to the sample variance of the targets.
    pub sigma_floor_rel: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: None,
            max_em_iters: 500,
            grad_steps_per_m: 10,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pretrain: None,
            rel_elbo_tol: 1e-8,
            patience: 20,
            noise_model: false,
            sigma0_2: 0.0,
            convolved_responsibilities: false,
            sigma_floor_rel: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn loss_kind(&self, architecture: Architecture) -> LossKind {
        self.loss.unwrap_or(if self.noise_model || architecture == Architecture::Basic {
            LossKind::Alternative
        } else {
            LossKind::Em
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RollSampling {
    #[default]
    Grid,
    Jittered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Sine {
        n: usize,
        alpha: f64,
    },
    Trefoil {
        n: usize,
    },
    Swissroll {
        n: usize,
        #[serde(default = "default_t1_range")]
        t1_range: [f64; 2],
        #[serde(default = "default_t2_range")]
        t2_range: [f64; 2],
        #[serde(default)]
        sampling: RollSampling,
    },
    Rings {
        dim: usize,
        rings: usize,
        n: usize,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default = "one")]
        spacing: f64,
    },
    Csv {
        path: PathBuf,
        /// Input column names; defaults to every `x<i>` column in order.
        #[serde(default)]
        inputs: Option<Vec<String>>,
        #[serde(default = "default_target")]
        target: String,
        #[serde(default)]
        group: Option<String>,
        #[serde(default)]
        noise_floor: Option<String>,
        #[serde(default)]
        clean: Option<String>,
    },
}

fn one() -> f64 {
    1.0
}

fn default_target() -> String {
    "y".into()
}

pub fn default_t1_range() -> [f64; 2] {
    [1.5 * std::f64::consts::PI, 4.5 * std::f64::consts::PI]
}

pub fn default_t2_range() -> [f64; 2] {
    [0.0, 10.0]
}

impl DataSource {
    pub fn name(&self) -> &'static str {
        match self {
            DataSource::Sine { .. } => "sine",
            DataSource::Trefoil { .. } => "trefoil",
            DataSource::Swissroll { .. } => "swissroll",
            DataSource::Rings { .. } => "rings",
            DataSource::Csv { .. } => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `1` gives bitwise reproducibility.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Fraction of samples held out for testing (0 disables the split).
    #[serde(default)]
    pub test_fraction: f64,
    pub dataset: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn new(dataset: DataSource, model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            seed: 0,
            workers: None,
            out: default_out(),
            test_fraction: 0.0,
            dataset,
            model,
            train,
        }
    }

    /// Heterogeneous-noise sine: residual classifier of depth 4 and width 8,
    /// 4 quadratic experts, identity encoder.
    pub fn sine_benchmark() -> Self {
        let model = ModelConfig {
            architecture: Architecture::Basic,
            clusters: 4,
            degree: 2,
            family: BasisFamily::Chebyshev,
            latent_dim: None,
            classifier: NetConfig::new(4, 8, true),
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            pretrain: Some(PretrainConfig::default()),
            ..TrainConfig::default()
        };
        Self::new(DataSource::Sine { n: 1024, alpha: 0.1 }, model, train)
    }

    /// Trefoil knot encoded to one latent dimension: encoder depth 4 width
    /// 16, residual classifier depth 12 width 8, 8 quadratic experts.
    pub fn trefoil_benchmark() -> Self {
        let model = ModelConfig {
            architecture: Architecture::Serial,
            clusters: 8,
            degree: 2,
            family: BasisFamily::Chebyshev,
            latent_dim: Some(1),
            encoder: NetConfig::new(4, 16, false),
            classifier: NetConfig::new(12, 8, true),
        };
        Self::new(DataSource::Trefoil { n: 2048 }, model, TrainConfig::default())
    }

    /// Swiss roll encoded to two latent dimensions: encoder depth 4 width 32,
    /// residual classifier depth 12 width 8, 8 quadratic experts.
    pub fn swissroll_benchmark() -> Self {
        let model = ModelConfig {
            architecture: Architecture::Serial,
            clusters: 8,
            degree: 2,
            family: BasisFamily::Chebyshev,
            latent_dim: Some(2),
            encoder: NetConfig::new(4, 32, false),
            classifier: NetConfig::new(12, 8, true),
        };
        Self::new(
            DataSource::Swissroll {
                n: 2048,
                t1_range: default_t1_range(),
                t2_range: default_t2_range(),
                sampling: RollSampling::Grid,
            },
            model,
            TrainConfig::default(),
        )
    }

    /// Randomly oriented rings: encoder depth 4 width 16 into two latent
    /// dimensions, residual classifier depth 4 width 8, 4 linear experts.
    pub fn rings_benchmark(dim: usize) -> Self {
        let model = ModelConfig {
            architecture: Architecture::Parallel,
            clusters: 4,
            degree: 1,
            family: BasisFamily::Chebyshev,
            latent_dim: Some(2),
            encoder: NetConfig::new(4, 16, false),
            classifier: NetConfig::new(4, 8, true),
        };
        let mut cfg = Self::new(
            DataSource::Rings {
                dim,
                rings: 4,
                n: 1024,
                radius: 1.0,
                spacing: 1.0,
            },
            model,
            TrainConfig::default(),
        );
        cfg.test_fraction = 0.2;
        cfg.train.grad_steps_per_m = 50;
        cfg.train.max_em_iters = 300;
        cfg
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| PpouError::config("<document>", e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| PpouError::config("<document>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| PpouError::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// Input dimension implied by the data source, reading only the header
    /// of CSV sources.
    pub fn input_dim(&self) -> Result<usize> {
        Ok(match &self.dataset {
            DataSource::Sine { .. } => 1,
            DataSource::Trefoil { .. } | DataSource::Swissroll { .. } => 3,
            DataSource::Rings { dim, .. } => *dim,
            DataSource::Csv { path, inputs, .. } => match inputs {
                Some(cols) => cols.len(),
                None => crate::data::csv_input_columns(path)?.len(),
            },
        })
    }

    /// Latent dimension of the polynomial basis.
    pub fn latent_dim(&self, input_dim: usize) -> usize {
        match self.model.architecture {
            Architecture::Basic => input_dim,
            _ => self.model.latent_dim.unwrap_or(0),
        }
    }

    /// Rejects inconsistent configurations before any data is generated.
    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim()?;
        self.validate_with_input_dim(d)
    }

    pub fn validate_with_input_dim(&self, input_dim: usize) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        if input_dim == 0 {
            return Err(PpouError::config("dataset", "input dimension is zero"));
        }
        if m.clusters == 0 {
            return Err(PpouError::config("model.clusters", "must be >= 1"));
        }
        match m.architecture {
            Architecture::Basic => {
                if let Some(l) = m.latent_dim {
                    if l != input_dim {
                        return Err(PpouError::config(
                            "model.latent_dim",
                            format!("basic architecture uses the input dimension {input_dim}, got {l}"),
                        ));
                    }
                }
            }
            Architecture::Serial | Architecture::Parallel => {
                match m.latent_dim {
                    None | Some(0) => {
                        return Err(PpouError::config(
                            "model.latent_dim",
                            "serial/parallel architectures need latent_dim >= 1",
                        ))
                    }
                    Some(_) => {}
                }
                check_net("model.encoder", &m.encoder)?;
            }
        }
        check_net("model.classifier", &m.classifier)?;
        if t.max_em_iters == 0 {
            return Err(PpouError::config("train.max_em_iters", "must be >= 1"));
        }
        if t.patience == 0 {
            return Err(PpouError::config("train.patience", "must be >= 1"));
        }
        for (name, v) in [
            ("train.learning_rate", t.learning_rate),
            ("train.rel_elbo_tol", t.rel_elbo_tol),
            ("train.adam_eps", t.adam_eps),
            ("train.sigma_floor_rel", t.sigma_floor_rel),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(PpouError::config(name, "must be finite and > 0"));
            }
        }
        for (name, v) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(PpouError::config(name, "must lie in [0, 1)"));
            }
        }
        if !(t.sigma0_2 >= 0.0) || !t.sigma0_2.is_finite() {
            return Err(PpouError::config("train.sigma0_2", "must be finite and >= 0"));
        }
        if let Some(p) = &t.pretrain {
            if let Some(k) = p.kmeans_clusters {
                if k != m.clusters {
                    return Err(PpouError::config(
                        "train.pretrain.kmeans_clusters",
                        format!("must equal model.clusters = {}", m.clusters),
                    ));
                }
            }
            if !(p.learning_rate > 0.0) {
                return Err(PpouError::config("train.pretrain.learning_rate", "must be > 0"));
            }
            if p.cluster_on_latent && m.architecture != Architecture::Serial {
                return Err(PpouError::config(
                    "train.pretrain.cluster_on_latent",
                    "only serial models feed latents to the classifier",
                ));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(PpouError::config("test_fraction", "must lie in [0, 1)"));
        }
        if self.workers == Some(0) {
            return Err(PpouError::config("workers", "must be >= 1"));
        }
        match &self.dataset {
            DataSource::Sine { n, alpha } => {
                if *n < 2 {
                    return Err(PpouError::config("dataset.n", "sine needs n >= 2"));
                }
                if !(*alpha >= 0.0) {
                    return Err(PpouError::config("dataset.alpha", "must be >= 0"));
                }
            }
            DataSource::Trefoil { n } => {
                if *n < 2 {
                    return Err(PpouError::config("dataset.n", "trefoil needs n >= 2"));
                }
            }
            DataSource::Swissroll { n, t1_range, t2_range, .. } => {
                if *n < 4 {
                    return Err(PpouError::config("dataset.n", "swiss roll needs n >= 4"));
                }
                if !(t1_range[1] > t1_range[0]) || !(t2_range[1] > t2_range[0]) {
                    return Err(PpouError::config("dataset.t1_range", "ranges must be increasing"));
                }
            }
            DataSource::Rings { dim, rings, n, .. } => {
                if *dim < 3 {
                    return Err(PpouError::config("dataset.dim", "rings need dim >= 3"));
                }
                if *rings == 0 || n % rings != 0 || *n == 0 {
                    return Err(PpouError::config("dataset.n", "n must be a positive multiple of rings"));
                }
            }
            DataSource::Csv { .. } => {}
        }
        Ok(())
    }
}

fn check_net(field: &str, net: &NetConfig) -> Result<()> {
    if net.depth == 0 {
        return Err(PpouError::config(format!("{field}.depth"), "must be >= 1"));
    }
    if net.width == 0 {
        return Err(PpouError::config(format!("{field}.width"), "must be >= 1"));
    }
    Ok(())
}
