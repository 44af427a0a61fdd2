//! Small dense networks with exact reverse-mode gradients.
//!
//! Layout: `widths = [in, h_1, .., h_D, out]`. Each hidden layer applies an
//! affine map and the activation; when `residual` is set, hidden layers whose
//! input and output widths agree add the skip path (`h + act(W h + b)`).
//! The last layer is affine followed by the output transform.
//!
//! All parameters of a net live in one flat vector so that optimizers and
//! serialization can treat them uniformly. Layer `l` stores its weight
//! (row-major, `rows = widths[l + 1]`, `cols = widths[l]`) followed by its
//! bias.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PpouError, Result};

static STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputTransform {
    Identity,
    Softmax,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    rows: usize,
    cols: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone)]
pub struct DenseNet {
    widths: Vec<usize>,
    activation: Activation,
    residual: bool,
    output: OutputTransform,
    layers: Vec<LayerShape>,
    params: Vec<f64>,
    stamp: u64,
}

/// Activation record of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    stamp: u64,
    /// Input to each layer, concatenated.
    inputs: Vec<f64>,
    /// Pre-activation of each layer, concatenated.
    pre: Vec<f64>,
    output: Vec<f64>,
    in_offsets: Vec<usize>,
    pre_offsets: Vec<usize>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGradient {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// Axis-aligned bounds of the input domain.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn symmetric_unit(dim: usize) -> Self {
        Self {
            lower: vec![-1.0; dim],
            upper: vec![1.0; dim],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoxInit {
    pub net: DenseNet,
    /// One anchor point per first-layer neuron; its hyperplane passes through it.
    pub anchors: Vec<Vec<f64>>,
}

impl DenseNet {
    /// A net with all parameters zero.
    pub fn zeros(
        widths: &[usize],
        activation: Activation,
        residual: bool,
        output: OutputTransform,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(PpouError::invalid(format!(
                "network widths must have >= 2 positive entries, got {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut off = 0;
        for w in widths.windows(2) {
            let (cols, rows) = (w[0], w[1]);
            layers.push(LayerShape {
                rows,
                cols,
                w_off: off,
                b_off: off + rows * cols,
            });
            off += rows * cols + rows;
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            residual,
            output,
            layers,
            params: vec![0.0; off],
            stamp: fresh_stamp(),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("nonempty widths")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn output_transform(&self) -> OutputTransform {
        self.output
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the parameters; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.stamp = fresh_stamp();
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(PpouError::invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    /// `(weight, bias)` slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let s = self.layers[l];
        (
            &self.params[s.w_off..s.b_off],
            &self.params[s.b_off..s.b_off + s.rows],
        )
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        self.stamp = fresh_stamp();
        let s = self.layers[l];
        let (w, rest) = self.params[s.w_off..].split_at_mut(s.rows * s.cols);
        (w, &mut rest[..s.rows])
    }

    /// Human-readable location of flat parameter `idx`.
    pub fn param_path(&self, idx: usize) -> String {
        for (l, s) in self.layers.iter().enumerate() {
            if idx < s.b_off {
                let local = idx - s.w_off;
                return format!("layers[{l}].weight[{},{}]", local / s.cols, local % s.cols);
            }
            if idx < s.b_off + s.rows {
                return format!("layers[{l}].bias[{}]", idx - s.b_off);
            }
        }
        format!("<out of range {idx}>")
    }

    /// Names and shapes of every parameter array, in storage order.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (l, s) in self.layers.iter().enumerate() {
            out.push((
                format!("layers.{l}.weight"),
                vec![s.rows, s.cols],
                &self.params[s.w_off..s.b_off],
            ));
            out.push((
                format!("layers.{l}.bias"),
                vec![s.rows],
                &self.params[s.b_off..s.b_off + s.rows],
            ));
        }
        out
    }

    fn is_skip_layer(&self, l: usize) -> bool {
        let s = self.layers[l];
        self.residual && l > 0 && l + 1 < self.layers.len() && s.rows == s.cols
    }

    fn tape_layout(&self, tape: &mut Tape) {
        if tape.in_offsets.len() == self.layers.len() && tape.inputs.len() == self.in_total() {
            return;
        }
        tape.in_offsets.clear();
        tape.pre_offsets.clear();
        let (mut i, mut p) = (0, 0);
        for s in &self.layers {
            tape.in_offsets.push(i);
            tape.pre_offsets.push(p);
            i += s.cols;
            p += s.rows;
        }
        tape.inputs = vec![0.0; i];
        tape.pre = vec![0.0; p];
    }

    fn in_total(&self) -> usize {
        self.layers.iter().map(|s| s.cols).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let mut tape = Tape::default();
        self.forward_into(x, &mut tape)?;
        Ok((tape.output.clone(), tape))
    }

    /// Forward pass reusing the buffers of `tape`.
    pub fn forward_into(&self, x: &[f64], tape: &mut Tape) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(PpouError::invalid(format!(
                "network expects input of width {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        self.tape_layout(tape);
        tape.stamp = self.stamp;
        tape.inputs[..x.len()].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, s) in self.layers.iter().enumerate() {
            let in_off = tape.in_offsets[l];
            let pre_off = tape.pre_offsets[l];
            let w = &self.params[s.w_off..s.b_off];
            let b = &self.params[s.b_off..s.b_off + s.rows];
            for r in 0..s.rows {
                let row = &w[r * s.cols..(r + 1) * s.cols];
                let h = &tape.inputs[in_off..in_off + s.cols];
                let mut acc = b[r];
                for (wi, hi) in row.iter().zip(h) {
                    acc += wi * hi;
                }
                tape.pre[pre_off + r] = acc;
            }
            if l < last {
                let next_off = tape.in_offsets[l + 1];
                let skip = self.is_skip_layer(l);
                for r in 0..s.rows {
                    let mut v = self.activation.apply(tape.pre[pre_off + r]);
                    if skip {
                        v += tape.inputs[in_off + r];
                    }
                    tape.inputs[next_off + r] = v;
                }
            }
        }
        let s = self.layers[last];
        let pre = &tape.pre[tape.pre_offsets[last]..tape.pre_offsets[last] + s.rows];
        tape.output.clear();
        match self.output {
            OutputTransform::Identity => tape.output.extend_from_slice(pre),
            OutputTransform::Tanh => tape.output.extend(pre.iter().map(|a| a.tanh())),
            OutputTransform::Softmax => {
                let max = pre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                tape.output.extend(pre.iter().map(|a| (a - max).exp()));
                let sum: f64 = tape.output.iter().sum();
                for v in tape.output.iter_mut() {
                    *v /= sum;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `cotangent · output` with respect to parameters and input.
    pub fn backward(&self, tape: &Tape, cotangent: &[f64]) -> Result<NetGradient> {
        let mut params = vec![0.0; self.params.len()];
        let mut input = vec![0.0; self.input_dim()];
        self.backward_into(tape, cotangent, &mut params, &mut input)?;
        Ok(NetGradient { params, input })
    }

    /// Like [`backward`](Self::backward) but accumulates the parameter
    /// gradient into `grad` and overwrites `input_grad`.
    pub fn backward_into(
        &self,
        tape: &Tape,
        cotangent: &[f64],
        grad: &mut [f64],
        input_grad: &mut [f64],
    ) -> Result<()> {
        if tape.stamp != self.stamp || tape.in_offsets.len() != self.layers.len() {
            return Err(PpouError::InvalidState(
                "tape was not produced by the current parameters of this network".into(),
            ));
        }
        if cotangent.len() != self.output_dim()
            || grad.len() != self.params.len()
            || input_grad.len() != self.input_dim()
        {
            return Err(PpouError::invalid("backward buffer sizes do not match the network"));
        }
        let last = self.layers.len() - 1;
        let mut g: Vec<f64> = match self.output {
            OutputTransform::Identity => cotangent.to_vec(),
            OutputTransform::Tanh => cotangent
                .iter()
                .zip(&tape.output)
                .map(|(c, y)| c * (1.0 - y * y))
                .collect(),
            OutputTransform::Softmax => {
                let dot: f64 = cotangent.iter().zip(&tape.output).map(|(c, y)| c * y).sum();
                cotangent
                    .iter()
                    .zip(&tape.output)
                    .map(|(c, y)| y * (c - dot))
                    .collect()
            }
        };
        let mut g_in = Vec::new();
        for l in (0..=last).rev() {
            let s = self.layers[l];
            let in_off = tape.in_offsets[l];
            let pre_off = tape.pre_offsets[l];
            // g holds d/d(layer output); turn it into d/d(pre-activation).
            let g_pre: Vec<f64> = if l < last {
                (0..s.rows)
                    .map(|r| g[r] * self.activation.derivative(tape.pre[pre_off + r]))
                    .collect()
            } else {
                g.clone()
            };
            let h = &tape.inputs[in_off..in_off + s.cols];
            let w = &self.params[s.w_off..s.b_off];
            g_in.clear();
            g_in.resize(s.cols, 0.0);
            for r in 0..s.rows {
                let gr = g_pre[r];
                if gr == 0.0 {
                    continue;
                }
                let gw = &mut grad[s.w_off + r * s.cols..s.w_off + (r + 1) * s.cols];
                for (gwi, hi) in gw.iter_mut().zip(h) {
                    *gwi += gr * hi;
                }
                grad[s.b_off + r] += gr;
                let row = &w[r * s.cols..(r + 1) * s.cols];
                for (gi, wi) in g_in.iter_mut().zip(row) {
                    *gi += gr * wi;
                }
            }
            if l < last && self.is_skip_layer(l) {
                for (gi, go) in g_in.iter_mut().zip(&g) {
                    *gi += go;
                }
            }
            std::mem::swap(&mut g, &mut g_in);
        }
        input_grad.copy_from_slice(&g);
        Ok(())
    }
}

/// Box initialization.
///
/// Every first-layer neuron gets a uniformly random unit normal `w` and an
/// anchor `a` drawn uniformly from the input box; the bias is `-w·a`, so the
/// neuron's zero level set cuts through the box. Remaining layers use Glorot
/// uniform weights and zero biases.
pub fn box_init(
    widths: &[usize],
    input_box: &InputBox,
    activation: Activation,
    residual: bool,
    output: OutputTransform,
    seed: u64,
) -> Result<BoxInit> {
    let mut net = DenseNet::zeros(widths, activation, residual, output)?;
    let d = net.input_dim();
    if input_box.lower.len() != d || input_box.upper.len() != d {
        return Err(PpouError::invalid(format!(
            "input box dimension does not match network input width {d}"
        )));
    }
    if input_box
        .lower
        .iter()
        .zip(&input_box.upper)
        .any(|(lo, hi)| !(hi > lo) || !lo.is_finite() || !hi.is_finite())
    {
        return Err(PpouError::invalid("input box has zero volume"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors = Vec::with_capacity(widths[1]);
    {
        let (w, b) = net.layer_mut(0);
        for r in 0..widths[1] {
            let row = &mut w[r * d..(r + 1) * d];
            loop {
                for v in row.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    row.iter_mut().for_each(|v| *v /= norm);
                    break;
                }
            }
            let anchor: Vec<f64> = input_box
                .lower
                .iter()
                .zip(&input_box.upper)
                .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                .collect();
            b[r] = -row.iter().zip(&anchor).map(|(wi, ai)| wi * ai).sum::<f64>();
            anchors.push(anchor);
        }
    }
    for l in 1..net.num_layers() {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let (w, _) = net.layer_mut(l);
        for v in w.iter_mut() {
            *v = rng.random_range(-limit..limit);
        }
    }
    Ok(BoxInit { net, anchors })
}

/// Adam optimizer state over one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self::with_betas(num_params, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(num_params: usize, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step_count: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One bias-corrected Adam update. `path` names parameter `i` in error
    /// messages; nothing is modified when an error is returned.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        path: impl Fn(usize) -> String,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(PpouError::invalid(format!(
                "adam shape mismatch: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(PpouError::numeric(
                "adam step",
                format!("non-finite gradient {} at {}", grads[i], path(i)),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_net(widths: &[usize], residual: bool, output: OutputTransform, seed: u64) -> DenseNet {
        let mut net = DenseNet::zeros(widths, Activation::Tanh, residual, output).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.params_mut() {
            *p = rng.random_range(-0.8..0.8);
        }
        net
    }

    /// Straightforward re-evaluation used as an oracle for `forward`.
    fn naive_forward(net: &DenseNet, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = net.num_layers();
        for l in 0..n {
            let (w, b) = net.layer(l);
            let cols = h.len();
            let rows = b.len();
            let mut a = vec![0.0; rows];
            for r in 0..rows {
                a[r] = b[r] + (0..cols).map(|c| w[r * cols + c] * h[c]).sum::<f64>();
            }
            if l + 1 < n {
                let skip = net.residual() && l > 0 && rows == cols;
                h = (0..rows)
                    .map(|r| a[r].tanh() + if skip { h[r] } else { 0.0 })
                    .collect();
            } else {
                h = match net.output_transform() {
                    OutputTransform::Identity => a,
                    OutputTransform::Tanh => a.iter().map(|v| v.tanh()).collect(),
                    OutputTransform::Softmax => {
                        let e: Vec<f64> = a.iter().map(|v| v.exp()).collect();
                        let s: f64 = e.iter().sum();
                        e.iter().map(|v| v / s).collect()
                    }
                };
            }
        }
        h
    }

    #[test]
    fn zero_softmax_net_is_uniform() {
        let net = DenseNet::zeros(&[3, 5, 4], Activation::Tanh, false, OutputTransform::Softmax).unwrap();
        let (out, _) = net.forward(&[0.3, -1.0, 2.0]).unwrap();
        for v in out {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = DenseNet::zeros(&[3, 3], Activation::Tanh, false, OutputTransform::Identity).unwrap();
        {
            let (w, _) = net.layer_mut(0);
            for i in 0..3 {
                w[i * 3 + i] = 1.0;
            }
        }
        let x = [0.2, -7.0, 3.5];
        let (out, _) = net.forward(&x).unwrap();
        assert_eq!(out, x.to_vec());
    }

    #[test]
    fn forward_matches_naive_oracle() {
        for (residual, out) in [
            (false, OutputTransform::Identity),
            (true, OutputTransform::Softmax),
            (true, OutputTransform::Tanh),
        ] {
            let net = random_net(&[4, 6, 6, 6, 3], residual, out, 11);
            let x = [0.3, -0.2, 0.9, -0.5];
            let (got, _) = net.forward(&x).unwrap();
            let want = naive_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-14, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = random_net(&[2, 3, 1], false, OutputTransform::Identity, 1);
        assert!(matches!(net.forward(&[1.0]), Err(PpouError::InvalidArgument(_))));
    }

    #[test]
    fn linear_net_input_gradient_is_weight_row() {
        let net = random_net(&[3, 2], false, OutputTransform::Identity, 5);
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let g = net.backward(&tape, &[1.0, 0.0]).unwrap();
        let (w, _) = net.layer(0);
        assert_eq!(g.input, w[0..3].to_vec());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let net = random_net(&[3, 5, 5, 2], true, OutputTransform::Softmax, 9);
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let g = net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = random_net(&[2, 3, 1], false, OutputTransform::Identity, 1);
        let (_, tape) = net.forward(&[0.5, 0.5]).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(matches!(net.backward(&tape, &[1.0]), Err(PpouError::InvalidState(_))));
        let other = random_net(&[2, 3, 1], false, OutputTransform::Identity, 1);
        assert!(other.backward(&tape, &[1.0]).is_err());
    }

    fn fd_check(widths: &[usize], residual: bool, output: OutputTransform, seed: u64) {
        let net = random_net(widths, residual, output, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cot: Vec<f64> = (0..*widths.last().unwrap())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (_, tape) = net.forward(&x).unwrap();
        let g = net.backward(&tape, &cot).unwrap();
        let scalar = |n: &DenseNet, x: &[f64]| -> f64 {
            let (o, _) = n.forward(x).unwrap();
            o.iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let scale = g.params.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let mut worst: f64 = 0.0;
        for i in 0..net.num_params() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let fp = scalar(&p, &x);
            p.params_mut()[i] -= 2.0 * h;
            let fm = scalar(&p, &x);
            let fd = (fp - fm) / (2.0 * h);
            let denom = g.params[i].abs().max(fd.abs()).max(1e-3 * scale);
            worst = worst.max((fd - g.params[i]).abs() / denom);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (scalar(&net, &xp) - scalar(&net, &xm)) / (2.0 * h);
            let denom = g.input[i].abs().max(fd.abs()).max(1e-12);
            worst = worst.max((fd - g.input[i]).abs() / denom);
        }
        assert!(worst <= 1e-5, "{widths:?} residual={residual}: worst rel err {worst:e}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(&[3, 5, 2], false, OutputTransform::Identity, 2);
        fd_check(&[2, 8, 8, 8, 4], true, OutputTransform::Softmax, 3);
        fd_check(&[4, 6, 6, 2], false, OutputTransform::Tanh, 4);
    }

    #[test]
    fn gradients_match_finite_differences_deep_wide() {
        let mut widths = vec![5];
        widths.extend(std::iter::repeat_n(32, 12));
        widths.push(6);
        fd_check(&widths, true, OutputTransform::Softmax, 21);
        fd_check(&widths, false, OutputTransform::Identity, 22);
    }

    #[test]
    fn softmax_is_partition_of_unity_for_large_logits() {
        let mut net = DenseNet::zeros(&[1, 5], Activation::Tanh, false, OutputTransform::Softmax).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            for p in net.params_mut() {
                *p = rng.random_range(-1e3..1e3);
            }
            let (out, _) = net.forward(&[rng.random_range(-1.0..1.0)]).unwrap();
            assert!(out.iter().all(|&v| v >= 0.0 && v.is_finite()));
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn residual_with_zero_branch_is_identity_on_hidden_state() {
        let mut net = random_net(&[2, 4, 4, 4, 1], true, OutputTransform::Identity, 13);
        // Zero the branches of hidden layers 1 and 2 (the skip layers).
        for l in 1..3 {
            let (w, b) = net.layer_mut(l);
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = [0.4, -0.3];
        let (_, tape) = net.forward(&x).unwrap();
        let h1 = &tape.inputs[tape.in_offsets[1]..tape.in_offsets[1] + 4];
        let h3 = &tape.inputs[tape.in_offsets[3]..tape.in_offsets[3] + 4];
        assert_eq!(h1, h3);
    }

    #[test]
    fn box_init_hyperplanes_pass_through_anchors() {
        let ib = InputBox {
            lower: vec![-1.0, 0.0, 2.0],
            upper: vec![1.0, 0.5, 5.0],
        };
        let init = box_init(&[3, 8, 8, 2], &ib, Activation::Tanh, true, OutputTransform::Softmax, 42).unwrap();
        let (w, b) = init.net.layer(0);
        for r in 0..8 {
            let row = &w[r * 3..(r + 1) * 3];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            let a = &init.anchors[r];
            for i in 0..3 {
                assert!(a[i] >= ib.lower[i] && a[i] <= ib.upper[i]);
            }
            let level = row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() + b[r];
            assert!(level.abs() < 1e-12);
        }
    }

    #[test]
    fn box_init_is_deterministic() {
        let ib = InputBox::symmetric_unit(2);
        let a = box_init(&[2, 8, 8, 4], &ib, Activation::Tanh, true, OutputTransform::Softmax, 7).unwrap();
        let b = box_init(&[2, 8, 8, 4], &ib, Activation::Tanh, true, OutputTransform::Softmax, 7).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        let c = box_init(&[2, 8, 8, 4], &ib, Activation::Tanh, true, OutputTransform::Softmax, 8).unwrap();
        assert_ne!(a.net.params(), c.net.params());
    }

    #[test]
    fn box_init_rejects_degenerate_box() {
        let ib = InputBox {
            lower: vec![0.0, 1.0],
            upper: vec![1.0, 1.0],
        };
        assert!(box_init(&[2, 4, 1], &ib, Activation::Tanh, false, OutputTransform::Identity, 0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut st = AdamState::new(1, 0.01);
        let mut p = [1.0];
        let g = 0.37;
        st.step(&mut p, &[g], |i| i.to_string()).unwrap();
        let expected = 1.0 - 0.01 * g / (g.abs() + st.eps);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((1.0 - p[0] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut st = AdamState::new(3, 0.1);
        let mut p = [1.0, -2.0, 3.0];
        for _ in 0..50 {
            st.step(&mut p, &[0.0; 3], |i| i.to_string()).unwrap();
        }
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert_eq!(st.step_count(), 50);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut st = AdamState::new(1, 0.1);
        let mut w = [1.0];
        for _ in 0..100 {
            let g = [2.0 * w[0]];
            st.step(&mut w, &g, |i| i.to_string()).unwrap();
        }
        assert!(w[0].abs() < 0.1, "w = {}", w[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let net = DenseNet::zeros(&[2, 3, 1], Activation::Tanh, false, OutputTransform::Identity).unwrap();
        let mut st = AdamState::new(net.num_params(), 0.1);
        let mut p = net.params().to_vec();
        let mut g = vec![0.0; p.len()];
        g[7] = f64::NAN;
        let err = st.step(&mut p, &g, |i| net.param_path(i)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layers[0].bias[1]"), "{msg}");
        assert_eq!(st.step_count(), 0);
    }
}
