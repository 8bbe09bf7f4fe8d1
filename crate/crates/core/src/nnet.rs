//! Minimal differentiable core with hand-written backward passes.
//!
//! Everything is 64-bit and row-major: a [`Tensor`] is a `(batch, width)`
//! matrix. Layers cache what their backward pass needs in explicit cache
//! structs rather than in the layer itself, so a model can be evaluated
//! through `&self`.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stack equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("ragged rows: {} vs {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Column-wise concatenation.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::Shape("concatenating tensors with different batch sizes".into()));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(i);
            for p in parts {
                dst[off..off + p.cols].copy_from_slice(p.row(i));
                off += p.cols;
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::concat_cols`]: split into blocks of the given widths.
    pub fn split_cols(&self, widths: &[usize]) -> Vec<Tensor> {
        debug_assert_eq!(widths.iter().sum::<usize>(), self.cols);
        let mut off = 0;
        widths
            .iter()
            .map(|&w| {
                let mut t = Tensor::zeros(self.rows, w);
                for i in 0..self.rows {
                    t.row_mut(i).copy_from_slice(&self.row(i)[off..off + w]);
                }
                off += w;
                t
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x.max(0.0)).collect(),
        }
    }

    /// Zero the entries of `grad` where the ReLU output was inactive.
    pub fn relu_backward(&self, activated: &Tensor) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&activated.data)
                .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Affine map `y = x W + b` with `W` stored as an `(inputs, outputs)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            grad_weight: vec![0.0; inputs * outputs],
            grad_bias: vec![0.0; outputs],
        }
    }

    /// Weights uniform in `±sqrt(6 / (inputs + outputs))`, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut SplitMix64) -> Self {
        let mut layer = Self::zeros(inputs, outputs);
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        for w in &mut layer.weight {
            *w = (2.0 * rng.next_f64() - 1.0) * limit;
        }
        layer
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols != self.inputs {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                self.inputs, x.cols
            )));
        }
        let mut y = Tensor::zeros(x.rows, self.outputs);
        for i in 0..x.rows {
            let out = y.row_mut(i);
            out.copy_from_slice(&self.bias);
            for (k, &xk) in x.row(i).iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let w = &self.weight[k * self.outputs..(k + 1) * self.outputs];
                for (o, &wj) in out.iter_mut().zip(w) {
                    *o += xk * wj;
                }
            }
        }
        Ok(y)
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        let mut grad_in = Tensor::zeros(x.rows, self.inputs);
        for i in 0..x.rows {
            let g = grad_out.row(i);
            for (b, &gj) in self.grad_bias.iter_mut().zip(g) {
                *b += gj;
            }
            let xi = x.row(i);
            let gin = grad_in.row_mut(i);
            for k in 0..self.inputs {
                let w = &self.weight[k * self.outputs..(k + 1) * self.outputs];
                let gw = &mut self.grad_weight[k * self.outputs..(k + 1) * self.outputs];
                let xk = xi[k];
                let mut acc = 0.0;
                for j in 0..self.outputs {
                    gw[j] += xk * g[j];
                    acc += w[j] * g[j];
                }
                gin[k] = acc;
            }
        }
        grad_in
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    pub fn append_grads(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.grad_weight);
        out.extend_from_slice(&self.grad_bias);
    }

    /// Load parameters from the front of `src`, returning the rest.
    pub fn load_params<'a>(&mut self, src: &'a [f64]) -> &'a [f64] {
        let (w, rest) = src.split_at(self.weight.len());
        let (b, rest) = rest.split_at(self.bias.len());
        self.weight.copy_from_slice(w);
        self.bias.copy_from_slice(b);
        rest
    }
}

/// Stack of Linear+ReLU blocks. With dense connectivity each block reads the
/// concatenation of the original input and every earlier block's output, and
/// the features are the concatenation of the input and all block outputs.
/// Without it the blocks form a plain chain and the features are the last
/// block's output.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub dense: bool,
    pub blocks: Vec<LinearLayer>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    input: Tensor,
    block_inputs: Vec<Tensor>,
    block_outputs: Vec<Tensor>,
}

impl Backbone {
    pub fn block_input_width(input_dim: usize, widths: &[usize], dense: bool, k: usize) -> usize {
        match (dense, k) {
            (_, 0) => input_dim,
            (true, k) => input_dim + widths[..k].iter().sum::<usize>(),
            (false, k) => widths[k - 1],
        }
    }

    pub fn feature_width(input_dim: usize, widths: &[usize], dense: bool) -> usize {
        if dense {
            input_dim + widths.iter().sum::<usize>()
        } else {
            widths.last().copied().unwrap_or(input_dim)
        }
    }

    pub fn new(input_dim: usize, widths: &[usize], dense: bool, rng: &mut SplitMix64) -> Self {
        let blocks = (0..widths.len())
            .map(|k| LinearLayer::init(Self::block_input_width(input_dim, widths, dense, k), widths[k], rng))
            .collect();
        Self {
            input_dim,
            widths: widths.to_vec(),
            dense,
            blocks,
        }
    }

    pub fn output_width(&self) -> usize {
        Self::feature_width(self.input_dim, &self.widths, self.dense)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, BackboneCache)> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "backbone expects {} features, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_outputs: Vec<Tensor> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = if self.dense {
                let mut parts = vec![x];
                parts.extend(block_outputs.iter());
                Tensor::concat_cols(&parts)?
            } else {
                block_outputs.last().unwrap_or(x).clone()
            };
            let out = block.forward(&input)?.relu();
            block_inputs.push(input);
            block_outputs.push(out);
        }
        let features = if self.dense {
            let mut parts = vec![x];
            parts.extend(block_outputs.iter());
            Tensor::concat_cols(&parts)?
        } else {
            block_outputs.last().unwrap_or(x).clone()
        };
        Ok((
            features,
            BackboneCache {
                input: x.clone(),
                block_inputs,
                block_outputs,
            },
        ))
    }

    /// Accumulate parameter gradients given the gradient of the features.
    pub fn backward(&mut self, cache: &BackboneCache, grad_features: &Tensor) {
        let n = self.blocks.len();
        if n == 0 {
            return;
        }
        let rows = cache.input.rows();
        let mut grad_outputs: Vec<Tensor> = self.widths.iter().map(|&w| Tensor::zeros(rows, w)).collect();
        if self.dense {
            let mut widths = vec![self.input_dim];
            widths.extend(&self.widths);
            let parts = grad_features.split_cols(&widths);
            for (g, p) in grad_outputs.iter_mut().zip(parts.into_iter().skip(1)) {
                g.add_assign(&p);
            }
        } else {
            grad_outputs[n - 1].add_assign(grad_features);
        }
        for k in (0..n).rev() {
            let grad_pre = grad_outputs[k].relu_backward(&cache.block_outputs[k]);
            let grad_in = self.blocks[k].backward(&cache.block_inputs[k], &grad_pre);
            if k == 0 {
                break;
            }
            if self.dense {
                let mut widths = vec![self.input_dim];
                widths.extend(&self.widths[..k]);
                let parts = grad_in.split_cols(&widths);
                for (j, p) in parts.into_iter().skip(1).enumerate() {
                    grad_outputs[j].add_assign(&p);
                }
            } else {
                grad_outputs[k - 1].add_assign(&grad_in);
            }
        }
    }
}

/// Row-wise softmax with max-shift stabilization.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(z)[target]`, computed as `logsumexp(z) - z[target]`.
fn neg_log_softmax(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Class-weighted softmax cross-entropy, averaged over the rows with a
/// target. Rows whose target is `None` contribute neither loss nor gradient.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn weighted_ce_masked(logits: &Tensor, targets: &[Option<usize>], weights: &[f64]) -> Result<(f64, Tensor)> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} targets for {} rows",
            targets.len(),
            logits.rows()
        )));
    }
    if weights.len() != logits.cols() {
        return Err(Error::Shape(format!(
            "{} class weights for {} logits",
            weights.len(),
            logits.cols()
        )));
    }
    let mut grad = Tensor::zeros(logits.rows(), logits.cols());
    let active = targets.iter().filter(|t| t.is_some()).count();
    if active == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / active as f64;
    let mut loss = 0.0;
    for (i, target) in targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        let z = logits.row(i);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits of row {i}")));
        }
        if y >= z.len() {
            return Err(Error::Shape(format!("target {y} out of range for {} classes", z.len())));
        }
        let w = weights[y];
        loss += w * neg_log_softmax(z, y);
        let p = softmax_row(z);
        let g = grad.row_mut(i);
        for (j, (gj, pj)) in g.iter_mut().zip(&p).enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            *gj = scale * w * (pj - onehot);
        }
    }
    Ok((loss * scale, grad))
}

/// Class-weighted softmax cross-entropy averaged over all rows.
pub fn weighted_ce(logits: &Tensor, targets: &[usize], weights: &[f64]) -> Result<(f64, Tensor)> {
    let t: Vec<Option<usize>> = targets.iter().map(|&y| Some(y)).collect();
    weighted_ce_masked(logits, &t, weights)
}

/// Adam moments over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state has {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Step decay: `initial * factor^floor(epoch / period)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.01,
            factor: 1.0 / 3.0,
            period: 20,
        }
    }
}

impl LrSchedule {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch / self.period.max(1)) as i32)
    }
}

/// Something with a flat parameter vector and a differentiable scalar loss.
pub trait Objective {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);
    fn loss(&self) -> Result<f64>;
    fn loss_and_grad(&mut self) -> Result<(f64, Vec<f64>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter index where the maximum was attained.
    pub worst_param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub num_params: usize,
}

/// Relative error guarded against vanishing magnitudes.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compare analytic gradients against central differences with step `h`.
pub fn grad_check(obj: &mut dyn Objective, h: f64) -> Result<GradCheckReport> {
    let (_, analytic) = obj.loss_and_grad()?;
    let base = obj.params();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        analytic: 0.0,
        numeric: 0.0,
        num_params: base.len(),
    };
    let mut theta = base.clone();
    for i in 0..base.len() {
        theta[i] = base[i] + h;
        obj.set_params(&theta);
        let plus = obj.loss()?;
        theta[i] = base[i] - h;
        obj.set_params(&theta);
        let minus = obj.loss()?;
        theta[i] = base[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err {
            report = GradCheckReport {
                max_rel_err: err,
                worst_param: i,
                analytic: analytic[i],
                numeric,
                num_params: base.len(),
            };
        }
    }
    obj.set_params(&base);
    Ok(report)
}
