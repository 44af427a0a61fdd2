//! The probabilistic partition-of-unity model.
//!
//! Given an input `x`, the model computes a standardized input `x̂`, a latent
//! point `z = ψ(x̂)`, partition weights `φ(·)` from the classifier, and one
//! polynomial mean `μ_j(z) = c_j · p(z)` per cluster. The predictive
//! distribution is the Gaussian mixture `Σ_j φ_j N(μ_j, σ_j² + σ₀²)`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Standardizer;
use crate::error::{PpouError, Result};
use crate::nn::{box_init, DenseNet, InputBox, OutputTransform};
use crate::par::map_chunks;
use crate::poly_basis::PolyBasis;
use crate::wls::EMPTY_CLUSTER_REL;

/// Half-width of the 95% Gaussian interval in standard deviations.
pub const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Identity encoder; the basis lives on the standardized input.
    #[default]
    Basic,
    /// Classifier reads the latent point.
    Serial,
    /// Classifier reads the standardized input.
    Parallel,
}

#[derive(Debug, Clone)]
pub struct PpouModel {
    pub architecture: Architecture,
    pub input_map: Standardizer,
    /// `None` for the basic architecture.
    pub encoder: Option<DenseNet>,
    pub classifier: DenseNet,
    pub basis: PolyBasis,
    /// `J × K`; row `j` holds the coefficients of expert `j`.
    pub coeffs: Array2<f64>,
    pub sigma2: Vec<f64>,
    pub sigma0_2: f64,
    /// Lower bound applied to every `σ_j²` update.
    pub sigma_floor: f64,
}

/// Per-point model state.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEval {
    pub latent: Vec<f64>,
    pub phi: Vec<f64>,
    pub mu: Vec<f64>,
}

/// Model state over a batch of points (rows).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    pub latent: Array2<f64>,
    pub phi: Array2<f64>,
    pub mu: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub var: f64,
    pub lower: f64,
    pub upper: f64,
    pub argmax_partition: usize,
}

/// Posterior cluster weights from an E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    /// `N × J`, rows sum to one.
    pub w: Array2<f64>,
    /// Noise variant: shrunken targets `b_j^(n)`.
    pub b: Option<Array2<f64>>,
    /// Noise variant: posterior variances `B_j`, stored per sample so a
    /// per-sample noise floor is possible. Rows agree for constant `σ₀²`.
    pub b_var: Option<Array2<f64>>,
    /// Samples whose weights all underflowed and fell back to `φ`.
    pub underflow_fallbacks: usize,
}

impl Responsibilities {
    pub fn len(&self) -> usize {
        self.w.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.w.nrows() == 0
    }

    /// `Σ_n w_j^(n)` for each cluster.
    pub fn occupancy(&self) -> Vec<f64> {
        (0..self.w.ncols()).map(|j| self.w.column(j).iter().sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaUpdate {
    pub sigma2: Vec<f64>,
    /// Clusters whose total weight fell below the emptiness threshold; their
    /// variance was left unchanged.
    pub empty: Vec<bool>,
}

/// `Σ_j φ_j μ_j`.
#[inline]
pub fn mixture_mean(phi: &[f64], mu: &[f64]) -> f64 {
    phi.iter().zip(mu).map(|(p, m)| p * m).sum()
}

/// `Σ_j φ_j (σ_j² + σ₀² + μ_j²) − (Σ_j φ_j μ_j)²`, evaluated as the sum of
/// within- and between-cluster parts so it never goes negative.
#[inline]
pub fn mixture_var(phi: &[f64], mu: &[f64], sigma2: &[f64], sigma0_2: f64) -> f64 {
    let mean = mixture_mean(phi, mu);
    let mut v = 0.0;
    for j in 0..phi.len() {
        let d = mu[j] - mean;
        v += phi[j] * (sigma2[j] + sigma0_2 + d * d);
    }
    v
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn prediction_from(phi: &[f64], mu: &[f64], sigma2: &[f64], sigma0_2: f64) -> Prediction {
    let mean = mixture_mean(phi, mu);
    let var = mixture_var(phi, mu, sigma2, sigma0_2);
    let half = Z95 * var.sqrt();
    Prediction {
        mean,
        var,
        lower: mean - half,
        upper: mean + half,
        argmax_partition: argmax(phi),
    }
}

/// Draws one sample from `Σ_j φ_j N(μ_j, σ_j² + σ₀²)`.
pub fn sample_mixture(phi: &[f64], mu: &[f64], sigma2: &[f64], sigma0_2: f64, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut j = phi.len() - 1;
    for (i, p) in phi.iter().enumerate() {
        acc += p;
        if u < acc {
            j = i;
            break;
        }
    }
    let e: f64 = rng.sample(StandardNormal);
    mu[j] + (sigma2[j] + sigma0_2).sqrt() * e
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PpouModel {
    /// Fresh model: box-initialized networks, zero coefficients, unit
    /// variances, zero background noise.
    pub fn from_config(cfg: &ModelConfig, input_map: Standardizer, seed: u64) -> Result<Self> {
        let d = input_map.dim();
        if d == 0 {
            return Err(PpouError::invalid("input dimension must be >= 1"));
        }
        let j = cfg.clusters;
        if j == 0 {
            return Err(PpouError::invalid("cluster count must be >= 1"));
        }
        let unit = InputBox::symmetric_unit(d);
        let (encoder, latent_dim) = match cfg.architecture {
            Architecture::Basic => {
                if cfg.latent_dim.is_some_and(|l| l != d) {
                    return Err(PpouError::invalid("basic architecture latent dimension must equal input dimension"));
                }
                (None, d)
            }
            Architecture::Serial | Architecture::Parallel => {
                let l = cfg.latent_dim.filter(|l| *l > 0).ok_or_else(|| {
                    PpouError::invalid("serial/parallel architectures need latent_dim >= 1")
                })?;
                let widths = cfg.encoder.widths(d, l);
                let enc = box_init(
                    &widths,
                    &unit,
                    cfg.encoder.activation,
                    cfg.encoder.residual,
                    OutputTransform::Tanh,
                    derive_seed(seed, 1),
                )?
                .net;
                (Some(enc), l)
            }
        };
        let cls_in = match cfg.architecture {
            Architecture::Serial => latent_dim,
            _ => d,
        };
        let classifier = box_init(
            &cfg.classifier.widths(cls_in, j),
            &InputBox::symmetric_unit(cls_in),
            cfg.classifier.activation,
            cfg.classifier.residual,
            OutputTransform::Softmax,
            derive_seed(seed, 2),
        )?
        .net;
        let basis = PolyBasis::new(latent_dim, cfg.degree, cfg.family)?;
        let k = basis.len();
        Ok(Self {
            architecture: cfg.architecture,
            input_map,
            encoder,
            classifier,
            basis,
            coeffs: Array2::zeros((j, k)),
            sigma2: vec![1.0; j],
            sigma0_2: 0.0,
            sigma_floor: f64::MIN_POSITIVE,
        })
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let d = self.input_map.dim();
        let j = self.clusters();
        let dl = self.basis.latent_dim();
        match (&self.architecture, &self.encoder) {
            (Architecture::Basic, None) => {
                if dl != d {
                    return Err(PpouError::invalid("basic model basis dimension must equal input dimension"));
                }
            }
            (Architecture::Basic, Some(_)) => {
                return Err(PpouError::invalid("basic model must not carry an encoder"))
            }
            (_, None) => return Err(PpouError::invalid("serial/parallel model needs an encoder")),
            (_, Some(enc)) => {
                if enc.input_dim() != d || enc.output_dim() != dl {
                    return Err(PpouError::invalid("encoder widths do not match input/latent dimensions"));
                }
            }
        }
        let cls_in = if self.architecture == Architecture::Serial { dl } else { d };
        if self.classifier.input_dim() != cls_in || self.classifier.output_dim() != j {
            return Err(PpouError::invalid("classifier widths do not match the model"));
        }
        if self.classifier.output_transform() != OutputTransform::Softmax {
            return Err(PpouError::invalid("classifier must end in a softmax"));
        }
        if self.coeffs.ncols() != self.basis.len() || self.sigma2.len() != j {
            return Err(PpouError::invalid("coefficient or variance shape does not match the model"));
        }
        if !(self.sigma_floor > 0.0) || !self.sigma_floor.is_finite() {
            return Err(PpouError::invalid("sigma floor must be finite and > 0"));
        }
        if self.sigma2.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(PpouError::invalid("cluster variances must be finite and > 0"));
        }
        if !(self.sigma0_2 >= 0.0) || !self.sigma0_2.is_finite() {
            return Err(PpouError::invalid("background noise variance must be finite and >= 0"));
        }
        if self.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(PpouError::invalid("coefficients must be finite"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_map.dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.basis.latent_dim()
    }

    pub fn clusters(&self) -> usize {
        self.coeffs.nrows()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(PpouError::invalid(format!(
                "model expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PpouError::invalid("input contains non-finite values"));
        }
        Ok(())
    }

    /// Latent point of an already standardized input.
    pub fn latent_of_standardized(&self, xhat: &[f64]) -> Result<Vec<f64>> {
        match &self.encoder {
            None => Ok(xhat.to_vec()),
            Some(enc) => Ok(enc.forward(xhat)?.0),
        }
    }

    pub fn latent(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.latent_of_standardized(&self.input_map.apply(x))
    }

    /// Partition weights `φ(x)`.
    pub fn phi(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval_point(x)?.phi)
    }

    /// `μ_j(z) = c_j · p(z)` at a latent point.
    pub fn means_at_latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        let p = self.basis.eval(z)?;
        Ok(self.coeffs.rows().into_iter().map(|c| c.iter().zip(&p).map(|(a, b)| a * b).sum()).collect())
    }

    pub fn cluster_means(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval_point(x)?.mu)
    }

    pub fn eval_standardized(&self, xhat: &[f64]) -> Result<PointEval> {
        let latent = self.latent_of_standardized(xhat)?;
        let cls_in = if self.architecture == Architecture::Serial { &latent[..] } else { xhat };
        let phi = self.classifier.forward(cls_in)?.0;
        let mu = self.means_at_latent(&latent)?;
        Ok(PointEval { latent, phi, mu })
    }

    pub fn eval_point(&self, x: &[f64]) -> Result<PointEval> {
        self.check_input(x)?;
        self.eval_standardized(&self.input_map.apply(x))
    }

    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        let e = self.eval_point(x)?;
        Ok(mixture_mean(&e.phi, &e.mu))
    }

    pub fn predict_var(&self, x: &[f64]) -> Result<f64> {
        let e = self.eval_point(x)?;
        Ok(mixture_var(&e.phi, &e.mu, &self.sigma2, self.sigma0_2))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let e = self.eval_point(x)?;
        Ok(prediction_from(&e.phi, &e.mu, &self.sigma2, self.sigma0_2))
    }

    fn eval_rows(&self, x: ArrayView2<'_, f64>, standardized: bool) -> Result<BatchEval> {
        if x.ncols() != self.input_dim() {
            return Err(PpouError::invalid(format!(
                "model expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let n = x.nrows();
        let parts = map_chunks(n, |range| -> Result<Vec<PointEval>> {
            range
                .map(|i| {
                    let row = x.row(i).to_vec();
                    if standardized {
                        self.eval_standardized(&row)
                    } else {
                        self.eval_point(&row)
                    }
                })
                .collect()
        });
        let (dl, j) = (self.latent_dim(), self.clusters());
        let mut out = BatchEval {
            latent: Array2::zeros((n, dl)),
            phi: Array2::zeros((n, j)),
            mu: Array2::zeros((n, j)),
        };
        let mut i = 0;
        for part in parts {
            for e in part? {
                out.latent.row_mut(i).iter_mut().zip(&e.latent).for_each(|(a, b)| *a = *b);
                out.phi.row_mut(i).iter_mut().zip(&e.phi).for_each(|(a, b)| *a = *b);
                out.mu.row_mut(i).iter_mut().zip(&e.mu).for_each(|(a, b)| *a = *b);
                i += 1;
            }
        }
        Ok(out)
    }

    /// Evaluates every row of raw inputs.
    pub fn eval_batch(&self, x: ArrayView2<'_, f64>) -> Result<BatchEval> {
        self.eval_rows(x, false)
    }

    /// Evaluates rows that were already passed through `input_map`.
    pub fn eval_batch_standardized(&self, xhat: ArrayView2<'_, f64>) -> Result<BatchEval> {
        self.eval_rows(xhat, true)
    }

    pub fn predictions(&self, eval: &BatchEval) -> Vec<Prediction> {
        (0..eval.phi.nrows())
            .map(|i| {
                prediction_from(
                    eval.phi.row(i).as_slice().expect("contiguous"),
                    eval.mu.row(i).as_slice().expect("contiguous"),
                    &self.sigma2,
                    self.sigma0_2,
                )
            })
            .collect()
    }

    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<Prediction>> {
        Ok(self.predictions(&self.eval_batch(x)?))
    }

    pub fn e_step(&self, x: ArrayView2<'_, f64>, y: &[f64]) -> Result<Responsibilities> {
        self.e_step_from(&self.eval_batch(x)?, y)
    }

    /// E-step from a precomputed evaluation of the training inputs.
    pub fn e_step_from(&self, eval: &BatchEval, y: &[f64]) -> Result<Responsibilities> {
        let (w, fallbacks) = responsibilities(eval, y, &self.sigma2, None)?;
        Ok(Responsibilities {
            w,
            b: None,
            b_var: None,
            underflow_fallbacks: fallbacks,
        })
    }

    pub fn e_step_noise(
        &self,
        x: ArrayView2<'_, f64>,
        y: &[f64],
        noise_floor: Option<&[f64]>,
        convolved: bool,
    ) -> Result<Responsibilities> {
        self.e_step_noise_from(&self.eval_batch(x)?, y, noise_floor, convolved)
    }

    /// Background-noise E-step. `noise_floor` overrides `σ₀²` per sample.
    /// With `convolved` the densities use `σ_j² + σ₀²` instead of `σ_j²`.
    pub fn e_step_noise_from(
        &self,
        eval: &BatchEval,
        y: &[f64],
        noise_floor: Option<&[f64]>,
        convolved: bool,
    ) -> Result<Responsibilities> {
        let n = y.len();
        let j = self.clusters();
        if let Some(nf) = noise_floor {
            if nf.len() != n {
                return Err(PpouError::invalid("noise floor length does not match targets"));
            }
        }
        let s0 = |i: usize| noise_floor.map_or(self.sigma0_2, |nf| nf[i]);
        let (w, fallbacks) = if convolved {
            let extra: Vec<f64> = (0..n).map(s0).collect();
            responsibilities(eval, y, &self.sigma2, Some(&extra))?
        } else {
            responsibilities(eval, y, &self.sigma2, None)?
        };
        let mut b = Array2::zeros((n, j));
        let mut b_var = Array2::zeros((n, j));
        for i in 0..n {
            let s = s0(i);
            for c in 0..j {
                let s2 = self.sigma2[c];
                let mu = eval.mu[(i, c)];
                let shrink = s / (s2 + s);
                // b = μ + σ²/(σ²+σ₀²)(y−μ), written so that σ₀² = 0 gives y exactly.
                b[(i, c)] = y[i] - shrink * (y[i] - mu);
                // B = σ² − σ⁴/(σ²+σ₀²) = σ²σ₀²/(σ²+σ₀²).
                b_var[(i, c)] = s2 * shrink;
            }
        }
        Ok(Responsibilities {
            w,
            b: Some(b),
            b_var: Some(b_var),
            underflow_fallbacks: fallbacks,
        })
    }

    pub fn update_sigma(&self, resp: &Responsibilities, x: ArrayView2<'_, f64>, y: &[f64]) -> Result<SigmaUpdate> {
        self.update_sigma_from(resp, &self.eval_batch(x)?.mu, y)
    }

    /// `σ_j² = Σ_n w (y − μ_j)² / Σ_n w`, floored. `mu` holds the current
    /// cluster means (`N × J`).
    pub fn update_sigma_from(&self, resp: &Responsibilities, mu: &Array2<f64>, y: &[f64]) -> Result<SigmaUpdate> {
        self.sigma_update(resp, mu, y, false)
    }

    pub fn update_sigma_noise(&self, resp: &Responsibilities, x: ArrayView2<'_, f64>, y: &[f64]) -> Result<SigmaUpdate> {
        self.update_sigma_noise_from(resp, &self.eval_batch(x)?.mu, y)
    }

    /// `σ_j² = Σ_n w ((b − μ_j)² + B_j) / Σ_n w`, floored.
    pub fn update_sigma_noise_from(&self, resp: &Responsibilities, mu: &Array2<f64>, y: &[f64]) -> Result<SigmaUpdate> {
        if resp.b.is_none() || resp.b_var.is_none() {
            return Err(PpouError::InvalidState(
                "noise variance update needs responsibilities from the noise E-step".into(),
            ));
        }
        self.sigma_update(resp, mu, y, true)
    }

    fn sigma_update(&self, resp: &Responsibilities, mu: &Array2<f64>, y: &[f64], noise: bool) -> Result<SigmaUpdate> {
        let n = y.len();
        let j = self.clusters();
        if resp.w.dim() != (n, j) || mu.dim() != (n, j) {
            return Err(PpouError::invalid("responsibility/mean shapes do not match the targets"));
        }
        let threshold = EMPTY_CLUSTER_REL * n as f64;
        let per_cluster: Vec<(f64, bool)> = (0..j)
            .into_par_iter()
            .map(|c| {
                let mut sw = 0.0;
                let mut acc = 0.0;
                for i in 0..n {
                    let w = resp.w[(i, c)];
                    let term = if noise {
                        let b = resp.b.as_ref().expect("checked")[(i, c)];
                        let bv = resp.b_var.as_ref().expect("checked")[(i, c)];
                        let r = b - mu[(i, c)];
                        r * r + bv
                    } else {
                        let r = y[i] - mu[(i, c)];
                        r * r
                    };
                    sw += w;
                    acc += w * term;
                }
                if sw < threshold {
                    (self.sigma2[c], true)
                } else {
                    ((acc / sw).max(self.sigma_floor), false)
                }
            })
            .collect();
        if let Some(c) = per_cluster.iter().position(|(s, _)| !s.is_finite()) {
            return Err(PpouError::numeric("variance update", format!("non-finite variance for cluster {c}")));
        }
        Ok(SigmaUpdate {
            sigma2: per_cluster.iter().map(|p| p.0).collect(),
            empty: per_cluster.iter().map(|p| p.1).collect(),
        })
    }
}

/// Normalized posterior weights computed in log space. `extra_var`, when
/// given, is added to every cluster variance of the matching sample.
fn responsibilities(
    eval: &BatchEval,
    y: &[f64],
    sigma2: &[f64],
    extra_var: Option<&[f64]>,
) -> Result<(Array2<f64>, usize)> {
    let n = y.len();
    let j = sigma2.len();
    if eval.phi.dim() != (n, j) || eval.mu.dim() != (n, j) {
        return Err(PpouError::invalid("evaluation shape does not match targets"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(PpouError::invalid("targets contain non-finite values"));
    }
    let parts = map_chunks(n, |range| {
        let mut rows = Vec::with_capacity(range.len() * j);
        let mut fallbacks = 0usize;
        let mut logw = vec![0.0; j];
        for i in range {
            let mut max = f64::NEG_INFINITY;
            for c in 0..j {
                let s2 = sigma2[c] + extra_var.map_or(0.0, |e| e[i]);
                let r = y[i] - eval.mu[(i, c)];
                logw[c] = eval.phi[(i, c)].ln() - 0.5 * s2.ln() - r * r / (2.0 * s2);
                if logw[c] > max {
                    max = logw[c];
                }
            }
            if !max.is_finite() {
                fallbacks += 1;
                rows.extend(eval.phi.row(i).iter().copied());
                continue;
            }
            let mut sum = 0.0;
            for v in logw.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            rows.extend(logw.iter().map(|v| v / sum));
        }
        (rows, fallbacks)
    });
    let mut data = Vec::with_capacity(n * j);
    let mut fallbacks = 0;
    for (rows, f) in parts {
        data.extend(rows);
        fallbacks += f;
    }
    if fallbacks > 0 {
        log::warn!("E-step: {fallbacks} samples fell back to classifier weights");
    }
    Ok((Array2::from_shape_vec((n, j), data).expect("shape"), fallbacks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetConfig;
    use crate::nn::Activation;
    use crate::poly_basis::BasisFamily;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(arch: Architecture, d: usize, j: usize, seed: u64) -> PpouModel {
        let cfg = ModelConfig {
            architecture: arch,
            clusters: j,
            degree: 2,
            family: BasisFamily::Chebyshev,
            latent_dim: if arch == Architecture::Basic { None } else { Some(2) },
            encoder: NetConfig::new(2, 6, false),
            classifier: NetConfig::new(2, 5, true),
        };
        let mut m = PpouModel::from_config(&cfg, Standardizer::identity(d), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        m.coeffs.iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
        m.sigma2.iter_mut().for_each(|s| *s = rng.random_range(0.01..0.5));
        m.sigma_floor = 1e-10;
        m
    }

    /// Model whose classifier always outputs `φ` and whose experts are constants `μ`.
    fn constant_model(phi: &[f64], mu: &[f64], sigma2: &[f64]) -> PpouModel {
        let j = phi.len();
        let cfg = ModelConfig {
            clusters: j,
            degree: 0,
            classifier: NetConfig::new(0, 1, false),
            ..ModelConfig::default()
        };
        let mut m = PpouModel::from_config(&cfg, Standardizer::identity(1), 0).unwrap();
        let (w, b) = m.classifier.layer_mut(0);
        w.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..j {
            b[c] = phi[c].ln();
        }
        for c in 0..j {
            m.coeffs[(c, 0)] = mu[c];
        }
        m.sigma2 = sigma2.to_vec();
        m.sigma_floor = 1e-8;
        m
    }

    #[test]
    fn basic_latent_is_identity() {
        let m = model(Architecture::Basic, 3, 3, 1);
        let x = [0.3, -0.2, 0.9];
        assert_eq!(m.latent(&x).unwrap(), x.to_vec());
        assert!(m.latent(&[0.1]).is_err());
    }

    #[test]
    fn zero_encoder_gives_zero_latent() {
        let mut m = model(Architecture::Serial, 3, 3, 2);
        m.encoder.as_mut().unwrap().params_mut().iter_mut().for_each(|p| *p = 0.0);
        assert_eq!(m.latent(&[0.5, 0.1, -0.4]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn serial_latent_matches_encoder() {
        let m = model(Architecture::Serial, 3, 3, 3);
        let x = [0.2, 0.7, -0.1];
        assert_eq!(m.latent(&x).unwrap(), m.encoder.as_ref().unwrap().forward(&x).unwrap().0);
        let e = m.eval_point(&x).unwrap();
        assert_eq!(e.phi, m.classifier.forward(&e.latent).unwrap().0);
    }

    #[test]
    fn cluster_means_examples() {
        let mut m = model(Architecture::Parallel, 2, 3, 4);
        let x = [0.1, -0.3];
        let z = m.latent(&x).unwrap();
        let p = m.basis.eval(&z).unwrap();
        let mu = m.cluster_means(&x).unwrap();
        for c in 0..3 {
            let naive: f64 = (0..p.len()).map(|k| m.coeffs[(c, k)] * p[k]).sum();
            assert!((mu[c] - naive).abs() < 1e-14);
        }
        m.coeffs.fill(0.0);
        assert_eq!(m.cluster_means(&x).unwrap(), vec![0.0; 3]);

        let c = constant_model(&[1.0], &[3.5], &[0.2]);
        assert_eq!(c.cluster_means(&[0.4]).unwrap(), vec![3.5]);
        assert_eq!(c.predict_mean(&[0.4]).unwrap(), 3.5);
        assert_eq!(c.predict_var(&[0.4]).unwrap(), 0.2);
    }

    #[test]
    fn symmetric_two_cluster_moments() {
        let m = constant_model(&[0.5, 0.5], &[-1.0, 1.0], &[1e-8, 1e-8]);
        assert!(m.predict_mean(&[0.0]).unwrap().abs() < 1e-15);
        assert!((m.predict_var(&[0.0]).unwrap() - (1.0 + 1e-8)).abs() < 1e-14);
        let p = m.predict(&[0.0]).unwrap();
        assert!(p.lower < -1.9 && p.upper > 1.9);
    }

    #[test]
    fn partition_of_unity_and_nonnegative_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (s, arch) in [Architecture::Basic, Architecture::Serial, Architecture::Parallel].into_iter().enumerate() {
            let m = model(arch, 3, 5, s as u64);
            for _ in 0..100 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
                let phi = m.phi(&x).unwrap();
                assert!((phi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(phi.iter().all(|p| *p >= 0.0));
                assert!(m.predict_var(&x).unwrap() >= -1e-12);
            }
        }
    }

    #[test]
    fn e_step_examples() {
        let m = constant_model(&[0.5, 0.5], &[0.0, 1.0], &[1.0, 1.0]);
        let x = array![[0.0]];
        let r = m.e_step(x.view(), &[1.0]).unwrap();
        assert!((r.w[(0, 0)] - 0.37754066879814546).abs() < 1e-5);
        assert!((r.w[(0, 1)] - 0.6224593312018546).abs() < 1e-5);
        let r = m.e_step(x.view(), &[0.5]).unwrap();
        assert!((r.w[(0, 0)] - 0.5).abs() < 1e-15);

        let one = constant_model(&[1.0], &[2.0], &[0.3]);
        let r = one.e_step(array![[0.0], [0.5]].view(), &[10.0, -4.0]).unwrap();
        assert_eq!(r.w.column(0).to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn e_step_survives_tiny_variance() {
        let m = constant_model(&[0.5, 0.5], &[0.0, 1.0], &[1e-300, 1e-300]);
        let r = m.e_step(array![[0.0]].view(), &[100.0]).unwrap();
        assert!((r.w.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(r.underflow_fallbacks, 0);
    }

    #[test]
    fn e_step_noise_examples() {
        let mut m = constant_model(&[1.0], &[0.0], &[1.0]);
        m.sigma0_2 = 1.0;
        let r = m.e_step_noise(array![[0.0]].view(), &[2.0], None, false).unwrap();
        assert_eq!(r.b.as_ref().unwrap()[(0, 0)], 1.0);
        assert_eq!(r.b_var.as_ref().unwrap()[(0, 0)], 0.5);

        m.sigma0_2 = 1e12;
        m.coeffs[(0, 0)] = 0.7;
        let r = m.e_step_noise(array![[0.0]].view(), &[3.0], None, false).unwrap();
        assert!((r.b.as_ref().unwrap()[(0, 0)] - 0.7).abs() < 1e-10);
        assert!((r.b_var.as_ref().unwrap()[(0, 0)] - 1.0).abs() < 1e-10);

        m.sigma0_2 = 0.0;
        let r = m.e_step_noise(array![[0.0], [1.0]].view(), &[3.0, -2.0], None, false).unwrap();
        assert_eq!(r.b.as_ref().unwrap().column(0).to_vec(), vec![3.0, -2.0]);
        assert_eq!(r.b_var.as_ref().unwrap().column(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn noise_variant_reduces_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for s in 0..5 {
            let m = model(Architecture::Serial, 2, 4, s);
            let x = Array2::from_shape_fn((20, 2), |_| rng.random_range(-1.0..1.0));
            let y: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = m.e_step(x.view(), &y).unwrap();
            let b = m.e_step_noise(x.view(), &y, None, false).unwrap();
            assert_eq!(a.w, b.w);
            assert_eq!(b.b.as_ref().unwrap().column(0).to_vec(), y);
            let sa = m.update_sigma(&a, x.view(), &y).unwrap();
            let sb = m.update_sigma_noise(&b, x.view(), &y).unwrap();
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn shrinkage_lies_between_mean_and_target() {
        let mut m = model(Architecture::Parallel, 2, 3, 5);
        m.sigma0_2 = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((30, 2), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
        let r = m.e_step_noise(x.view(), &y, None, false).unwrap();
        let eval = m.eval_batch(x.view()).unwrap();
        let (b, bv) = (r.b.as_ref().unwrap(), r.b_var.as_ref().unwrap());
        for i in 0..30 {
            for c in 0..3 {
                let (lo, hi) = if y[i] < eval.mu[(i, c)] { (y[i], eval.mu[(i, c)]) } else { (eval.mu[(i, c)], y[i]) };
                assert!(b[(i, c)] >= lo - 1e-12 && b[(i, c)] <= hi + 1e-12);
                assert!(bv[(i, c)] >= 0.0 && bv[(i, c)] <= m.sigma2[c]);
            }
        }
    }

    #[test]
    fn update_sigma_examples() {
        let m = constant_model(&[1.0], &[0.0], &[0.5]);
        let x = array![[0.0], [0.0]];
        let r = m.e_step(x.view(), &[1.0, -1.0]).unwrap();
        assert_eq!(m.update_sigma(&r, x.view(), &[1.0, -1.0]).unwrap().sigma2, vec![1.0]);
        let r = m.e_step(x.view(), &[0.0, 0.0]).unwrap();
        assert_eq!(m.update_sigma(&r, x.view(), &[0.0, 0.0]).unwrap().sigma2, vec![m.sigma_floor]);

        let mut m = constant_model(&[1.0], &[0.4], &[0.5]);
        m.sigma0_2 = 0.3;
        let r = m.e_step_noise(array![[0.0]].view(), &[0.4], None, false).unwrap();
        let s = m.update_sigma_noise(&r, array![[0.0]].view(), &[0.4]).unwrap();
        let bv: f64 = 0.5 * 0.3 / 0.8;
        assert!((s.sigma2[0] - bv.max(m.sigma_floor)).abs() < 1e-15);
    }

    #[test]
    fn update_sigma_matches_weighted_average() {
        let m = model(Architecture::Basic, 1, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Array2::from_shape_fn((15, 1), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = m.e_step(x.view(), &y).unwrap();
        let s = m.update_sigma(&r, x.view(), &y).unwrap();
        for c in 0..3 {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..15 {
                let mu = m.cluster_means(&x.row(i).to_vec()).unwrap()[c];
                num += r.w[(i, c)] * (y[i] - mu).powi(2);
                den += r.w[(i, c)];
            }
            assert!((s.sigma2[c] - num / den).abs() < 1e-12 * (num / den));
        }
    }

    #[test]
    fn empty_cluster_keeps_variance() {
        let m = constant_model(&[0.5, 0.5], &[0.0, 1.0], &[0.3, 0.4]);
        let mut r = m.e_step(array![[0.0], [0.0]].view(), &[0.0, 0.1]).unwrap();
        r.w.column_mut(1).fill(0.0);
        r.w.column_mut(0).fill(1.0);
        let s = m.update_sigma(&r, array![[0.0], [0.0]].view(), &[0.0, 0.1]).unwrap();
        assert_eq!(s.empty, vec![false, true]);
        assert_eq!(s.sigma2[1], 0.4);
    }

    #[test]
    fn batch_matches_pointwise() {
        let m = model(Architecture::Serial, 3, 4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((70, 3), |_| rng.random_range(-1.0..1.0));
        let b = m.predict_batch(x.view()).unwrap();
        for i in 0..70 {
            assert_eq!(b[i], m.predict(&x.row(i).to_vec()).unwrap());
        }
    }

    #[test]
    fn relu_activation_is_supported() {
        let cfg = ModelConfig {
            architecture: Architecture::Parallel,
            latent_dim: Some(1),
            encoder: NetConfig { activation: Activation::Relu, ..NetConfig::new(2, 4, false) },
            ..ModelConfig::default()
        };
        let m = PpouModel::from_config(&cfg, Standardizer::identity(2), 0).unwrap();
        m.validate().unwrap();
        assert!(m.predict(&[0.1, 0.2]).unwrap().var > 0.0);
    }
}
