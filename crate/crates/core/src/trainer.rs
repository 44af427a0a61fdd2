//! EM training.
//!
//! Each iteration runs an E-step, a few full-batch Adam steps on the network
//! parameters, one weighted least-squares solve per cluster for the
//! polynomial coefficients, and the closed-form variance update. Gradients
//! are summed over samples in fixed-size chunks combined in order, so a run
//! is reproducible for any worker count.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::{LossKind, PretrainConfig, RunConfig, TrainConfig};
use crate::data::{split, Dataset, Standardizer};
use crate::error::{PpouError, Result};
use crate::kmeans::{kmeans, lloyd_step};
use crate::mixture::{mixture_mean, Architecture, BatchEval, PpouModel, Responsibilities};
use crate::nn::{AdamState, Tape};
use crate::par::map_chunks;
use crate::poly_basis::{BasisFamily, PolyBasis};
use crate::wls::{self, WlsOutcome, WlsProblem};

/// `log φ` is clamped at `log(PHI_FLOOR)` in the losses.
pub const PHI_FLOOR: f64 = 1e-300;

/// Training inputs after standardization.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub xhat: Array2<f64>,
    pub y: Vec<f64>,
    pub noise_floor: Option<Vec<f64>>,
}

impl TrainData {
    pub fn new(input_map: &Standardizer, ds: &Dataset) -> Self {
        let mut xhat = Array2::zeros(ds.x.dim());
        for (src, mut dst) in ds.x.rows().into_iter().zip(xhat.rows_mut()) {
            input_map.apply_into(&src.to_vec(), dst.as_slice_mut().expect("standard layout"));
        }
        Self {
            xhat,
            y: ds.y.clone(),
            noise_floor: ds.noise_floor.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Loss value and gradients with respect to the encoder and classifier
/// parameters (flat, in network layout).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub encoder: Vec<f64>,
    pub classifier: Vec<f64>,
}

/// Per-sample quantities handed to a loss.
struct SampleView<'a> {
    phi: &'a [f64],
    mu: &'a [f64],
}

fn standardized(model: &PpouModel, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.input_dim() {
        return Err(PpouError::invalid(format!(
            "model expects {} input columns, got {}",
            model.input_dim(),
            x.ncols()
        )));
    }
    let mut xhat = Array2::zeros(x.dim());
    for (src, mut dst) in x.rows().into_iter().zip(xhat.rows_mut()) {
        model.input_map.apply_into(&src.to_vec(), dst.as_slice_mut().expect("standard layout"));
    }
    Ok(xhat)
}

/// Sums a per-sample loss and its parameter gradient over all rows.
///
/// `per_sample(i, view, g_phi, g_mu)` returns the loss of sample `i` and
/// writes its cotangents with respect to `φ` and `μ`.
fn accumulate<F>(model: &PpouModel, xhat: ArrayView2<'_, f64>, per_sample: F) -> Result<LossGrad>
where
    F: Fn(usize, &SampleView<'_>, &mut [f64], &mut [f64]) -> f64 + Sync,
{
    let n = xhat.nrows();
    let j = model.clusters();
    let k = model.basis.len();
    let dl = model.latent_dim();
    let enc_len = model.encoder.as_ref().map_or(0, |e| e.num_params());
    let cls_len = model.classifier.num_params();
    let serial = model.architecture == Architecture::Serial;
    let parts = map_chunks(n, |range| -> Result<LossGrad> {
        let mut out = LossGrad {
            value: 0.0,
            encoder: vec![0.0; enc_len],
            classifier: vec![0.0; cls_len],
        };
        let mut enc_tape = Tape::default();
        let mut cls_tape = Tape::default();
        let mut p = vec![0.0; k];
        let mut jac = vec![0.0; k * dl];
        let mut mu = vec![0.0; j];
        let mut g_phi = vec![0.0; j];
        let mut g_mu = vec![0.0; j];
        let mut v = vec![0.0; k];
        let mut g_z = vec![0.0; dl];
        let mut cls_in_grad = vec![0.0; model.classifier.input_dim()];
        let mut enc_in_grad = vec![0.0; model.input_dim()];
        for i in range {
            let xh = xhat.row(i).to_vec();
            let z: Vec<f64> = match &model.encoder {
                Some(enc) => {
                    enc.forward_into(&xh, &mut enc_tape)?;
                    enc_tape.output().to_vec()
                }
                None => xh.clone(),
            };
            model.classifier.forward_into(if serial { &z } else { &xh }, &mut cls_tape)?;
            let phi = cls_tape.output();
            model.basis.eval_into(&z, &mut p, Some(&mut jac));
            for c in 0..j {
                mu[c] = model.coeffs.row(c).iter().zip(&p).map(|(a, b)| a * b).sum();
            }
            g_phi.iter_mut().for_each(|g| *g = 0.0);
            g_mu.iter_mut().for_each(|g| *g = 0.0);
            out.value += per_sample(i, &SampleView { phi, mu: &mu }, &mut g_phi, &mut g_mu);
            model
                .classifier
                .backward_into(&cls_tape, &g_phi, &mut out.classifier, &mut cls_in_grad)?;
            if let Some(enc) = &model.encoder {
                for kk in 0..k {
                    v[kk] = (0..j).map(|c| g_mu[c] * model.coeffs[(c, kk)]).sum();
                }
                for a in 0..dl {
                    g_z[a] = (0..k).map(|kk| v[kk] * jac[kk * dl + a]).sum();
                    if serial {
                        g_z[a] += cls_in_grad[a];
                    }
                }
                enc.backward_into(&enc_tape, &g_z, &mut out.encoder, &mut enc_in_grad)?;
            }
        }
        Ok(out)
    });
    let mut total = LossGrad {
        value: 0.0,
        encoder: vec![0.0; enc_len],
        classifier: vec![0.0; cls_len],
    };
    for part in parts {
        let part = part?;
        total.value += part.value;
        total.encoder.iter_mut().zip(&part.encoder).for_each(|(a, b)| *a += b);
        total.classifier.iter_mut().zip(&part.classifier).for_each(|(a, b)| *a += b);
    }
    Ok(total)
}

/// `−Σ_j w_j log φ_j` with the clamp, writing `∂/∂φ` into `g_phi`.
#[inline]
fn cross_entropy_term(w: &[f64], phi: &[f64], g_phi: &mut [f64]) -> f64 {
    let mut l = 0.0;
    for c in 0..phi.len() {
        if w[c] == 0.0 {
            continue;
        }
        if phi[c] > PHI_FLOOR {
            l -= w[c] * phi[c].ln();
            g_phi[c] -= w[c] / phi[c];
        } else {
            l -= w[c] * PHI_FLOOR.ln();
        }
    }
    l
}

fn check_resp(resp: &Responsibilities, n: usize, j: usize) -> Result<()> {
    if resp.w.dim() != (n, j) {
        return Err(PpouError::invalid(format!(
            "responsibilities are {:?}, expected ({n}, {j})",
            resp.w.dim()
        )));
    }
    Ok(())
}

/// Loss and gradients on already standardized inputs.
pub fn loss_and_grad_standardized(
    model: &PpouModel,
    kind: LossKind,
    resp: &Responsibilities,
    xhat: ArrayView2<'_, f64>,
    y: &[f64],
) -> Result<LossGrad> {
    let n = xhat.nrows();
    check_resp(resp, n, model.clusters())?;
    if y.len() != n {
        return Err(PpouError::invalid("target length does not match inputs"));
    }
    let sigma2 = &model.sigma2;
    let out = accumulate(model, xhat, |i, s, g_phi, g_mu| {
        let w = resp.w.row(i);
        let w = w.as_slice().expect("standard layout");
        let mut l = cross_entropy_term(w, s.phi, g_phi);
        match kind {
            LossKind::Em => {
                for c in 0..s.mu.len() {
                    let r = y[i] - s.mu[c];
                    l += w[c] * r * r / (2.0 * sigma2[c]);
                    g_mu[c] = -w[c] * r / sigma2[c];
                }
            }
            LossKind::Alternative => {
                let r = y[i] - mixture_mean(s.phi, s.mu);
                l += r * r;
                for c in 0..s.mu.len() {
                    g_phi[c] -= 2.0 * r * s.mu[c];
                    g_mu[c] = -2.0 * r * s.phi[c];
                }
            }
        }
        l
    })?;
    if !out.value.is_finite() {
        let smin = sigma2.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(PpouError::numeric(
            "loss",
            format!("loss is {} (N={n}, J={}, min σ²={smin:e})", out.value, model.clusters()),
        ));
    }
    Ok(out)
}

/// EM loss `L = −Σ w log φ + Σ_j (1/2σ_j²) Σ_n w (y − μ_j)²` on raw inputs.
pub fn em_loss(model: &PpouModel, resp: &Responsibilities, x: ArrayView2<'_, f64>, y: &[f64]) -> Result<LossGrad> {
    loss_and_grad_standardized(model, LossKind::Em, resp, standardized(model, x)?.view(), y)
}

/// Alternative loss `L̃ = −Σ w log φ + Σ_n (y − Σ_j φ_j μ_j)²` on raw inputs.
pub fn alt_loss(model: &PpouModel, resp: &Responsibilities, x: ArrayView2<'_, f64>, y: &[f64]) -> Result<LossGrad> {
    loss_and_grad_standardized(model, LossKind::Alternative, resp, standardized(model, x)?.view(), y)
}

/// Loss value from a precomputed evaluation.
pub fn loss_value(kind: LossKind, eval: &BatchEval, resp: &Responsibilities, y: &[f64], sigma2: &[f64]) -> f64 {
    let j = sigma2.len();
    let parts = map_chunks(y.len(), |range| {
        let mut scratch = vec![0.0; j];
        let mut l = 0.0;
        for i in range {
            let w = resp.w.row(i);
            let w = w.as_slice().expect("standard layout");
            let phi = eval.phi.row(i);
            let phi = phi.as_slice().expect("standard layout");
            let mu = eval.mu.row(i);
            let mu = mu.as_slice().expect("standard layout");
            l += cross_entropy_term(w, phi, &mut scratch);
            match kind {
                LossKind::Em => {
                    for c in 0..j {
                        let r = y[i] - mu[c];
                        l += w[c] * r * r / (2.0 * sigma2[c]);
                    }
                }
                LossKind::Alternative => {
                    let r = y[i] - mixture_mean(phi, mu);
                    l += r * r;
                }
            }
        }
        l
    });
    parts.into_iter().sum()
}

#[inline]
fn log_normal(y: f64, mu: f64, s2: f64) -> f64 {
    let r = y - mu;
    -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - r * r / (2.0 * s2)
}

/// `Σ_n Σ_j w (log φ_j + log N(y | μ_j, σ_j²)) − Σ_n Σ_j w log w`.
pub fn elbo_from(eval: &BatchEval, resp: &Responsibilities, y: &[f64], sigma2: &[f64]) -> f64 {
    let j = sigma2.len();
    let parts = map_chunks(y.len(), |range| {
        let mut total = 0.0;
        for i in range {
            for c in 0..j {
                let w = resp.w[(i, c)];
                if w > 0.0 {
                    let lp = eval.phi[(i, c)].max(PHI_FLOOR).ln();
                    total += w * (lp + log_normal(y[i], eval.mu[(i, c)], sigma2[c]) - w.ln());
                }
            }
        }
        total
    });
    parts.into_iter().sum()
}

pub fn elbo(model: &PpouModel, resp: &Responsibilities, x: ArrayView2<'_, f64>, y: &[f64]) -> Result<f64> {
    let eval = model.eval_batch(x)?;
    check_resp(resp, y.len(), model.clusters())?;
    Ok(elbo_from(&eval, resp, y, &model.sigma2))
}

/// Exact marginal log-likelihood `Σ_n log Σ_j φ_j N(y | μ_j, σ_j²)`.
pub fn log_likelihood_from(eval: &BatchEval, y: &[f64], sigma2: &[f64]) -> f64 {
    let j = sigma2.len();
    let parts = map_chunks(y.len(), |range| {
        let mut total = 0.0;
        let mut terms = vec![0.0; j];
        for i in range {
            for c in 0..j {
                terms[c] = eval.phi[(i, c)].ln() + log_normal(y[i], eval.mu[(i, c)], sigma2[c]);
            }
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            total += m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        }
        total
    });
    parts.into_iter().sum()
}

pub fn log_likelihood(model: &PpouModel, x: ArrayView2<'_, f64>, y: &[f64]) -> Result<f64> {
    Ok(log_likelihood_from(&model.eval_batch(x)?, y, &model.sigma2))
}

/// One record of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub elbo: f64,
    pub loss: f64,
    pub train_rel_l2: f64,
    pub test_rel_l2: Option<f64>,
    pub occupancy: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub empty_clusters: Vec<usize>,
    pub underflow_fallbacks: usize,
    pub auto_ridge_solves: usize,
}

pub trait MetricsSink {
    fn record(&mut self, rec: &IterRecord) -> Result<()>;
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write> {
    writer: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(writer: W) -> Self {
        Self { writer }
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, rec: &IterRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| PpouError::Format(e.to_string()))?;
        writeln!(self.writer, "{line}")
            .and_then(|_| self.writer.flush())
            .map_err(|e| PpouError::io("<metrics>", e))
    }
}

impl MetricsSink for Vec<IterRecord> {
    fn record(&mut self, rec: &IterRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Optimizer and convergence bookkeeping carried across iterations.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamState,
    pub iter: usize,
    pub last_elbo: Option<f64>,
    pub stalled: usize,
    pub converged: bool,
}

impl TrainState {
    pub fn new(model: &PpouModel, cfg: &TrainConfig) -> Self {
        let n = model.encoder.as_ref().map_or(0, |e| e.num_params()) + model.classifier.num_params();
        Self {
            adam: AdamState::with_betas(n, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps),
            iter: 0,
            last_elbo: None,
            stalled: 0,
            converged: false,
        }
    }
}

fn param_path(model: &PpouModel, i: usize) -> String {
    let enc_len = model.encoder.as_ref().map_or(0, |e| e.num_params());
    match &model.encoder {
        Some(enc) if i < enc_len => format!("encoder.{}", enc.param_path(i)),
        _ => format!("classifier.{}", model.classifier.param_path(i - enc_len)),
    }
}

/// One Adam step on all network parameters.
fn apply_adam(model: &mut PpouModel, adam: &mut AdamState, g: &LossGrad) -> Result<()> {
    let mut params: Vec<f64> = model.encoder.as_ref().map_or(Vec::new(), |e| e.params().to_vec());
    params.extend_from_slice(model.classifier.params());
    let mut grads = g.encoder.clone();
    grads.extend_from_slice(&g.classifier);
    {
        let m: &PpouModel = model;
        adam.step(&mut params, &grads, |i| param_path(m, i))?;
    }
    let enc_len = g.encoder.len();
    if let Some(enc) = model.encoder.as_mut() {
        enc.set_params(&params[..enc_len])?;
    }
    model.classifier.set_params(&params[enc_len..])
}

/// `μ` for every row of a design matrix, in the same summation order as
/// pointwise evaluation.
fn means_from_design(design: &Array2<f64>, coeffs: &Array2<f64>) -> Array2<f64> {
    let (n, j) = (design.nrows(), coeffs.nrows());
    Array2::from_shape_fn((n, j), |(i, c)| {
        coeffs.row(c).iter().zip(design.row(i)).map(|(a, b)| a * b).sum()
    })
}

/// Solves the `J` weighted least-squares problems; returns indices of empty
/// clusters and the number of solves that needed the automatic ridge.
fn solve_coefficients(model: &mut PpouModel, resp: &Responsibilities, design: &Array2<f64>, y: &[f64]) -> Result<(Vec<usize>, usize)> {
    let j = model.clusters();
    let columns: Vec<Vec<f64>> = (0..j).map(|c| resp.w.column(c).to_vec()).collect();
    let outcomes: Vec<Result<WlsOutcome>> = (0..j)
        .into_par_iter()
        .map(|c| {
            wls::solve(&WlsProblem {
                design: design.view(),
                weights: &columns[c],
                targets: y,
                ridge: 0.0,
            })
        })
        .collect();
    let mut empty = Vec::new();
    let mut ridged = 0;
    for (c, outcome) in outcomes.into_iter().enumerate() {
        match outcome? {
            WlsOutcome::Solved { coeffs, diagnostics } => {
                if diagnostics.used_ridge {
                    ridged += 1;
                }
                model.coeffs.row_mut(c).iter_mut().zip(&coeffs).for_each(|(a, b)| *a = *b);
            }
            WlsOutcome::EmptyCluster { total_weight } => {
                log::debug!("cluster {c} is empty (total weight {total_weight:e}); coefficients kept");
                empty.push(c);
            }
        }
    }
    Ok((empty, ridged))
}

fn relative_l2(pred: &[f64], truth: &[f64]) -> (f64, f64, bool) {
    let num: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = truth.iter().map(|b| b * b).sum::<f64>().sqrt();
    if den > 0.0 {
        (num / den, num, false)
    } else {
        (num, num, true)
    }
}

/// One EM iteration: E-step, gradient steps, coefficient solves, variance
/// update. `test` is only used for the recorded test error.
pub fn em_iteration(
    model: &mut PpouModel,
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    test: Option<&TrainData>,
) -> Result<IterRecord> {
    let kind = cfg.loss_kind(model.architecture);
    let eval = model.eval_batch_standardized(data.xhat.view())?;
    let resp = if cfg.noise_model {
        model.e_step_noise_from(&eval, &data.y, data.noise_floor.as_deref(), cfg.convolved_responsibilities)?
    } else {
        model.e_step_from(&eval, &data.y)?
    };

    for _ in 0..cfg.grad_steps_per_m {
        let g = loss_and_grad_standardized(model, kind, &resp, data.xhat.view(), &data.y)?;
        apply_adam(model, &mut state.adam, &g)?;
    }
    let mut eval = if cfg.grad_steps_per_m > 0 {
        model.eval_batch_standardized(data.xhat.view())?
    } else {
        eval
    };

    let design = model.basis.design_matrix(eval.latent.view())?;
    let (empty_wls, ridged) = solve_coefficients(model, &resp, &design, &data.y)?;
    eval.mu = means_from_design(&design, &model.coeffs);

    let update = if cfg.noise_model {
        model.update_sigma_noise_from(&resp, &eval.mu, &data.y)?
    } else {
        model.update_sigma_from(&resp, &eval.mu, &data.y)?
    };
    model.sigma2 = update.sigma2;
    let mut empty: Vec<usize> = empty_wls;
    for (c, e) in update.empty.iter().enumerate() {
        if *e && !empty.contains(&c) {
            empty.push(c);
        }
    }
    empty.sort_unstable();

    let elbo = elbo_from(&eval, &resp, &data.y, &model.sigma2);
    let loss = loss_value(kind, &eval, &resp, &data.y, &model.sigma2);
    if !elbo.is_finite() || !loss.is_finite() {
        return Err(PpouError::numeric(
            "em iteration",
            format!("iteration {}: elbo={elbo}, loss={loss}, σ²={:?}", state.iter + 1, model.sigma2),
        ));
    }
    let pred: Vec<f64> = (0..data.len())
        .map(|i| mixture_mean(eval.phi.row(i).as_slice().unwrap(), eval.mu.row(i).as_slice().unwrap()))
        .collect();
    let train_rel_l2 = relative_l2(&pred, &data.y).0;
    let test_rel_l2 = match test {
        Some(t) => {
            let te = model.eval_batch_standardized(t.xhat.view())?;
            let p: Vec<f64> = (0..t.len())
                .map(|i| mixture_mean(te.phi.row(i).as_slice().unwrap(), te.mu.row(i).as_slice().unwrap()))
                .collect();
            Some(relative_l2(&p, &t.y).0)
        }
        None => None,
    };

    state.iter += 1;
    if let Some(prev) = state.last_elbo {
        let rel = (elbo - prev) / prev.abs().max(f64::MIN_POSITIVE);
        if rel < cfg.rel_elbo_tol {
            state.stalled += 1;
        } else {
            state.stalled = 0;
        }
    }
    state.last_elbo = Some(elbo);
    state.converged = state.stalled >= cfg.patience;

    Ok(IterRecord {
        iter: state.iter,
        elbo,
        loss,
        train_rel_l2,
        test_rel_l2,
        occupancy: resp.occupancy(),
        sigma2: model.sigma2.clone(),
        empty_clusters: empty,
        underflow_fallbacks: resp.underflow_fallbacks,
        auto_ridge_solves: ridged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub labels: Vec<usize>,
    pub lloyd_iterations: usize,
    /// Fraction of samples whose dominant partition matches its label.
    pub agreement: f64,
}

/// Clusters the classifier inputs with k-means and fits the classifier to
/// the labels by cross-entropy (through the encoder for serial models).
pub fn kmeans_pretrain(model: &mut PpouModel, data: &TrainData, cfg: &PretrainConfig, seed: u64) -> Result<PretrainReport> {
    let j = model.clusters();
    let n = data.len();
    if let Some(k) = cfg.kmeans_clusters {
        if k != j {
            return Err(PpouError::invalid(format!("pretrain clusters {k} must equal model clusters {j}")));
        }
    }
    if j > n {
        return Err(PpouError::invalid(format!("cannot form {j} clusters from {n} samples")));
    }
    if j == 1 {
        return Ok(PretrainReport {
            labels: vec![0; n],
            lloyd_iterations: 0,
            agreement: 1.0,
        });
    }
    let on_latent = cfg.cluster_on_latent && model.architecture == Architecture::Serial;
    let points = if on_latent {
        model.eval_batch_standardized(data.xhat.view())?.latent
    } else {
        data.xhat.clone()
    };
    let km = kmeans(points.view(), j, cfg.max_lloyd_iters, seed)?;
    let mut labels = km.labels;
    let mut centroids = km.centroids;
    let enc_len = model.encoder.as_ref().map_or(0, |e| e.num_params());
    let cls_len = model.classifier.num_params();
    let mut adam = AdamState::new(enc_len + cls_len, cfg.learning_rate);
    for _ in 0..cfg.epochs {
        if on_latent {
            let latent = model.eval_batch_standardized(data.xhat.view())?.latent;
            lloyd_step(latent.view(), &mut centroids, &mut labels);
        }
        let lab = &labels;
        let g = accumulate(model, data.xhat.view(), |i, s, g_phi, _| {
            let c = lab[i];
            let p = s.phi[c];
            if p > PHI_FLOOR {
                g_phi[c] = -1.0 / p;
                -p.ln()
            } else {
                -PHI_FLOOR.ln()
            }
        })?;
        if !g.value.is_finite() {
            return Err(PpouError::numeric("pretrain", format!("cross-entropy is {}", g.value)));
        }
        apply_adam(model, &mut adam, &g)?;
    }
    let eval = model.eval_batch_standardized(data.xhat.view())?;
    let hits = (0..n)
        .filter(|&i| {
            let row = eval.phi.row(i);
            let best = (0..j).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == labels[i]
        })
        .count();
    Ok(PretrainReport {
        labels,
        lloyd_iterations: km.iterations,
        agreement: hits as f64 / n as f64,
    })
}

/// Error metrics of a model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    /// `‖ŷ − y‖₂ / ‖y‖₂` (absolute when `‖y‖₂ = 0`).
    pub rel_l2: f64,
    pub abs_l2: f64,
    pub mae: f64,
    pub normalization_skipped: bool,
    /// Error against the noise-free signal, when available.
    pub rel_l2_clean: Option<f64>,
    /// Fraction of targets inside the 95% interval.
    pub coverage: f64,
    /// Set when coverage carries no information: every interval has zero
    /// width, or the targets are noise-free.
    pub coverage_degenerate: bool,
}

pub fn evaluate(model: &PpouModel, x: ArrayView2<'_, f64>, y: &[f64], clean: Option<&[f64]>) -> Result<EvalMetrics> {
    if x.nrows() != y.len() {
        return Err(PpouError::invalid("input rows and targets differ in length"));
    }
    if clean.is_some_and(|c| c.len() != y.len()) {
        return Err(PpouError::invalid("clean column length differs from targets"));
    }
    let preds = model.predict_batch(x)?;
    Ok(metrics_from_predictions(&preds, y, clean))
}

pub fn metrics_from_predictions(preds: &[crate::mixture::Prediction], y: &[f64], clean: Option<&[f64]>) -> EvalMetrics {
    let n = y.len();
    let mean: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let (rel_l2, abs_l2, skipped) = relative_l2(&mean, y);
    let mae = if n > 0 {
        mean.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64
    } else {
        0.0
    };
    let covered = preds.iter().zip(y).filter(|(p, t)| **t >= p.lower && **t <= p.upper).count();
    let zero_width = preds.iter().all(|p| p.upper - p.lower == 0.0);
    let noise_free = clean.is_some_and(|c| c == y);
    EvalMetrics {
        n,
        rel_l2,
        abs_l2,
        mae,
        normalization_skipped: skipped,
        rel_l2_clean: clean.map(|c| relative_l2(&mean, c).0),
        coverage: if n > 0 { covered as f64 / n as f64 } else { 0.0 },
        coverage_degenerate: zero_width || noise_free,
    }
}

fn population_var(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

/// Final summary of a training run; deterministic for a fixed seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub architecture: Architecture,
    pub clusters: usize,
    pub loss: LossKind,
    pub iterations: usize,
    pub converged: bool,
    pub final_elbo: f64,
    pub final_loss: f64,
    pub sigma2: Vec<f64>,
    pub sigma0_2: f64,
    pub occupancy: Vec<f64>,
    pub underflow_fallbacks: usize,
    pub empty_cluster_events: usize,
    pub auto_ridge_solves: usize,
    pub pretrain: Option<PretrainReport>,
    pub train: EvalMetrics,
    pub test: Option<EvalMetrics>,
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub model: PpouModel,
    pub summary: Summary,
    pub history: Vec<IterRecord>,
    pub wall_seconds: f64,
}

/// Builds an untrained model for `train`: fitted input map, box-initialized
/// networks, zero coefficients, `σ_j² = Var(y)`.
pub fn init_model(cfg: &RunConfig, train: &Dataset) -> Result<PpouModel> {
    cfg.validate_with_input_dim(train.dim())?;
    if train.is_empty() {
        return Err(PpouError::invalid("training set is empty"));
    }
    let input_map = Standardizer::fit(train.x.view());
    let mut model = PpouModel::from_config(&cfg.model, input_map, cfg.seed)?;
    let var = population_var(&train.y);
    let rel = cfg.train.sigma_floor_rel;
    model.sigma_floor = if var > 0.0 { rel * var } else { rel };
    model.sigma2 = vec![var.max(model.sigma_floor); model.clusters()];
    model.sigma0_2 = if cfg.train.noise_model { cfg.train.sigma0_2 } else { 0.0 };
    Ok(model)
}

/// Trains a model. The test set is `test` when given, otherwise a seeded
/// split of `ds` when `cfg.test_fraction > 0`.
pub fn train_run(
    cfg: &RunConfig,
    ds: &Dataset,
    test: Option<&Dataset>,
    mut sink: Option<&mut dyn MetricsSink>,
) -> Result<Fit> {
    let start = Instant::now();
    ds.validate()?;
    let (train, test_owned): (Dataset, Option<Dataset>) = match test {
        Some(t) => (ds.clone(), Some(t.clone())),
        None if cfg.test_fraction > 0.0 => {
            let (a, b) = split(ds, cfg.test_fraction, cfg.seed)?;
            (a, Some(b))
        }
        None => (ds.clone(), None),
    };
    let mut model = init_model(cfg, &train)?;
    let data = TrainData::new(&model.input_map, &train);
    let test_data = test_owned.as_ref().map(|t| TrainData::new(&model.input_map, t));

    let pretrain = match &cfg.train.pretrain {
        Some(p) => Some(kmeans_pretrain(&mut model, &data, p, cfg.seed)?),
        None => None,
    };

    let mut state = TrainState::new(&model, &cfg.train);
    let mut history = Vec::new();
    let mut fallbacks = 0;
    let mut empty_events = 0;
    let mut ridged = 0;
    while state.iter < cfg.train.max_em_iters && !state.converged {
        let rec = em_iteration(&mut model, &mut state, &data, &cfg.train, test_data.as_ref())?;
        fallbacks += rec.underflow_fallbacks;
        empty_events += rec.empty_clusters.len();
        ridged += rec.auto_ridge_solves;
        if let Some(s) = sink.as_deref_mut() {
            s.record(&rec)?;
        }
        history.push(rec);
    }
    let last = history.last().expect("at least one iteration");
    let train_metrics = evaluate(&model, train.x.view(), &train.y, train.clean.as_deref())?;
    let test_metrics = match &test_owned {
        Some(t) => Some(evaluate(&model, t.x.view(), &t.y, t.clean.as_deref())?),
        None => None,
    };
    let summary = Summary {
        seed: cfg.seed,
        architecture: model.architecture,
        clusters: model.clusters(),
        loss: cfg.train.loss_kind(model.architecture),
        iterations: state.iter,
        converged: state.converged,
        final_elbo: last.elbo,
        final_loss: last.loss,
        sigma2: model.sigma2.clone(),
        sigma0_2: model.sigma0_2,
        occupancy: last.occupancy.clone(),
        underflow_fallbacks: fallbacks,
        empty_cluster_events: empty_events,
        auto_ridge_solves: ridged,
        pretrain,
        train: train_metrics,
        test: test_metrics,
    };
    Ok(Fit {
        model,
        summary,
        history,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Seeded shuffle of `0..n` cut into `k` contiguous folds whose sizes
/// differ by at most one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(PpouError::invalid("cross-validation needs k >= 2"));
    }
    if n < k {
        return Err(PpouError::invalid(format!("cannot split {n} samples into {k} non-empty folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub iterations: usize,
    pub train_rel_l2: f64,
    pub test_rel_l2: f64,
    pub test: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub mean_test_rel_l2: f64,
    pub std_test_rel_l2: f64,
    /// Student-t 95% interval of the mean fold error.
    pub ci95: [f64; 2],
}

/// Mean and two-sided 95% Student-t interval of `values`.
pub fn mean_ci95(values: &[f64]) -> (f64, f64, [f64; 2]) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0, [mean, mean]);
    }
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    let t = StudentsT::new(0.0, 1.0, k - 1.0).expect("dof > 0").inverse_cdf(0.975);
    let half = t * sd / k.sqrt();
    (mean, sd, [mean - half, mean + half])
}

pub fn cross_validate(ds: &Dataset, cfg: &RunConfig, k: usize) -> Result<CvReport> {
    let folds = kfold_indices(ds.len(), k, cfg.seed)?;
    let mut fold_cfg = cfg.clone();
    fold_cfg.test_fraction = 0.0;
    let mut results = Vec::with_capacity(k);
    for (f, test_idx) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        let train = ds.subset(&train_idx);
        let test = ds.subset(test_idx);
        let fit = train_run(&fold_cfg, &train, Some(&test), None)?;
        let tm = fit.summary.test.clone().expect("test set given");
        log::info!("fold {f}: test rel l2 {:.4e}", tm.rel_l2);
        results.push(FoldResult {
            fold: f,
            n_train: train.len(),
            n_test: test.len(),
            iterations: fit.summary.iterations,
            train_rel_l2: fit.summary.train.rel_l2,
            test_rel_l2: tm.rel_l2,
            test: tm,
        });
    }
    let errs: Vec<f64> = results.iter().map(|r| r.test_rel_l2).collect();
    let (mean, sd, ci) = mean_ci95(&errs);
    Ok(CvReport {
        k,
        seed: cfg.seed,
        folds: results,
        mean_test_rel_l2: mean,
        std_test_rel_l2: sd,
        ci95: ci,
    })
}

/// Global Chebyshev least-squares fit of 1D data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFit {
    pub degree: usize,
    pub input_map: Standardizer,
    pub coeffs: Vec<f64>,
    pub rel_l2: f64,
    pub abs_l2: f64,
    pub normalization_skipped: bool,
}

impl BaselineFit {
    pub fn predict(&self, x: f64) -> Result<f64> {
        let basis = PolyBasis::new(1, self.degree, BasisFamily::Chebyshev)?;
        let p = basis.eval(&self.input_map.apply(&[x]))?;
        Ok(p.iter().zip(&self.coeffs).map(|(a, b)| a * b).sum())
    }
}

/// Maps `x` affinely onto `[-1, 1]` and fits an unweighted Chebyshev
/// expansion of the given degree.
pub fn fit_global_poly(x: &[f64], y: &[f64], degree: usize) -> Result<BaselineFit> {
    if x.len() != y.len() || x.is_empty() {
        return Err(PpouError::invalid("baseline needs matching, non-empty x and y"));
    }
    let xs = Array2::from_shape_vec((x.len(), 1), x.to_vec()).expect("shape");
    let input_map = Standardizer::fit(xs.view());
    let xhat = xs.mapv(|v| (v - input_map.center[0]) / input_map.half_range[0]);
    let basis = PolyBasis::new(1, degree, BasisFamily::Chebyshev)?;
    let design = basis.design_matrix(xhat.view())?;
    let weights = vec![1.0; x.len()];
    let coeffs = match wls::solve(&WlsProblem {
        design: design.view(),
        weights: &weights,
        targets: y,
        ridge: 0.0,
    })? {
        WlsOutcome::Solved { coeffs, .. } => coeffs,
        WlsOutcome::EmptyCluster { .. } => unreachable!("unit weights"),
    };
    let pred: Vec<f64> = design
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&coeffs).map(|(a, b)| a * b).sum())
        .collect();
    let (rel, abs, skipped) = relative_l2(&pred, y);
    Ok(BaselineFit {
        degree,
        input_map,
        coeffs,
        rel_l2: rel,
        abs_l2: abs,
        normalization_skipped: skipped,
    })
}
