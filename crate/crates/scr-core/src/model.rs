//! Dilated temporal-convolution acoustic model with a hand-derived backward
//! pass. Each block is a dilated 1-D convolution over time, batch
//! normalization, ReLU and dropout; selected blocks are causal (left context
//! only). A linear output layer produces per-frame scores over emission
//! states plus blank.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{softmax_log_into, Matrix};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.99;

/// Network shape and behavior knobs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub kernel_size: usize,
    pub channels: usize,
    /// Per-block dilation rates; length must equal `num_blocks`.
    pub dilations: Vec<usize>,
    /// Blocks restricted to left context only.
    pub causal_blocks: BTreeSet<usize>,
    /// Input feature dimension F.
    pub input_dim: usize,
    /// Output units U: emission states plus trailing blank.
    pub output_units: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Full-size configuration: 16 blocks of 128 channels, kernel 3, the
    /// multi-scale dilation cycle [1,2,4,4,2,1,...], four causal blocks in
    /// the middle, 40-dimensional input features.
    pub fn full(output_units: usize) -> ModelConfig {
        ModelConfig {
            num_blocks: 16,
            kernel_size: 3,
            channels: 128,
            dilations: vec![1, 2, 4, 4, 2, 1, 1, 2, 4, 4, 2, 1, 1, 2, 4, 4],
            causal_blocks: [6, 7, 8, 9].into_iter().collect(),
            input_dim: 40,
            output_units,
            dropout_rate: 0.1,
        }
    }

    /// Small configuration for tests and toy corpora.
    pub fn tiny(input_dim: usize, output_units: usize) -> ModelConfig {
        ModelConfig {
            num_blocks: 1,
            kernel_size: 3,
            channels: 8,
            dilations: vec![1],
            causal_blocks: BTreeSet::new(),
            input_dim,
            output_units,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be >= 1".into()));
        }
        if self.dilations.len() != self.num_blocks {
            return Err(Error::Config(format!(
                "{} dilation rates for {} blocks",
                self.dilations.len(),
                self.num_blocks
            )));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::Config("dilation rates must be >= 1".into()));
        }
        if let Some(&bad) = self.causal_blocks.iter().find(|&&b| b >= self.num_blocks) {
            return Err(Error::Config(format!(
                "causal block index {bad} out of range"
            )));
        }
        if self.channels == 0 || self.input_dim == 0 {
            return Err(Error::Config("channels and input_dim must be >= 1".into()));
        }
        if self.output_units < 2 {
            return Err(Error::Config("output_units must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn block_in_dim(&self, block: usize) -> usize {
        if block == 0 {
            self.input_dim
        } else {
            self.channels
        }
    }
}

/// Frames of context each output frame can see.
///
/// Causal blocks contribute `dilation * (kernel-1)` on the left only;
/// non-causal blocks split `dilation * (kernel-1)` evenly between the sides.
pub fn receptive_field(config: &ModelConfig) -> (usize, usize) {
    let half = (config.kernel_size - 1) / 2;
    let mut left = 0;
    let mut right = 0;
    for (b, &d) in config.dilations.iter().enumerate() {
        if config.causal_blocks.contains(&b) {
            left += d * (config.kernel_size - 1);
        } else {
            left += d * half;
            right += d * half;
        }
    }
    (left, right)
}

/// Weights of one convolution block. The convolution weight is stored
/// row-major as `[out_channel][kernel_tap][in_channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub bn_scale: Vec<f64>,
    pub bn_shift: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
}

/// All model parameters, batch-norm running statistics included.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub blocks: Vec<BlockParams>,
    /// Output projection, row-major `[unit][channel]`.
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

impl ModelParameters {
    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_len(config: &ModelConfig) -> usize {
        let mut n = 0;
        for b in 0..config.num_blocks {
            let c_in = config.block_in_dim(b);
            n += config.channels * config.kernel_size * c_in; // conv_w
            n += config.channels * 3; // conv_b, bn_scale, bn_shift
        }
        n + config.output_units * config.channels + config.output_units
    }

    /// Trainable parameters flattened in checkpoint tensor order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for b in &self.blocks {
            flat.extend_from_slice(&b.conv_w);
            flat.extend_from_slice(&b.conv_b);
            flat.extend_from_slice(&b.bn_scale);
            flat.extend_from_slice(&b.bn_shift);
        }
        flat.extend_from_slice(&self.out_w);
        flat.extend_from_slice(&self.out_b);
        flat
    }

    /// Writes a flat trainable vector (as produced by [`Self::flat_trainable`])
    /// back into the parameter tensors.
    pub fn load_trainable(&mut self, flat: &[f64]) {
        let mut pos = 0;
        let take = |dst: &mut Vec<f64>, pos: &mut usize| {
            let len = dst.len();
            dst.copy_from_slice(&flat[*pos..*pos + len]);
            *pos += len;
        };
        for b in &mut self.blocks {
            take(&mut b.conv_w, &mut pos);
            take(&mut b.conv_b, &mut pos);
            take(&mut b.bn_scale, &mut pos);
            take(&mut b.bn_shift, &mut pos);
        }
        take(&mut self.out_w, &mut pos);
        take(&mut self.out_b, &mut pos);
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }
}

/// Initializes convolution and output weights uniformly in
/// ±√(6/(fan_in+fan_out)), biases at zero, batch-norm at identity with
/// running statistics (0, 1).
pub fn init_parameters(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelParameters> {
    config.validate()?;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for b in 0..config.num_blocks {
        let c_in = config.block_in_dim(b);
        let c_out = config.channels;
        let k = config.kernel_size;
        let bound = (6.0 / ((c_in * k + c_out * k) as f64)).sqrt();
        let conv_w = (0..c_out * k * c_in)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        blocks.push(BlockParams {
            conv_w,
            conv_b: vec![0.0; c_out],
            bn_scale: vec![1.0; c_out],
            bn_shift: vec![0.0; c_out],
            bn_running_mean: vec![0.0; c_out],
            bn_running_var: vec![1.0; c_out],
        });
    }
    let u = config.output_units;
    let c = config.channels;
    let bound = (6.0 / ((c + u) as f64)).sqrt();
    let out_w = (0..u * c).map(|_| rng.gen_range(-bound..bound)).collect();
    Ok(ModelParameters {
        blocks,
        out_w,
        out_b: vec![0.0; u],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-frame output scores and their log-softmax view.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// T x U pre-softmax scores.
    pub logits: Matrix,
    /// T x U log-posteriors (per-frame log-softmax of `logits`).
    pub log_post: Matrix,
}

struct BlockCache {
    /// Input to the block's convolution (T x C_in).
    conv_in: Matrix,
    /// Normalized pre-scale activations (T x C).
    x_hat: Matrix,
    /// Batch statistics used for normalization (train mode).
    mean: Vec<f64>,
    var: Vec<f64>,
    /// Dropout multipliers (0 or 1/(1-p)); empty when dropout was inactive.
    dropout: Vec<f64>,
}

/// Everything the backward pass needs to reproduce the forward computation.
pub struct ForwardCache {
    config: ModelConfig,
    mode: Mode,
    blocks: Vec<BlockCache>,
    /// Output of the last block (input to the projection).
    hidden: Matrix,
}

fn conv_tap_offsets(config: &ModelConfig, block: usize) -> Vec<isize> {
    let k = config.kernel_size as isize;
    let d = config.dilations[block] as isize;
    if config.causal_blocks.contains(&block) {
        (0..k).map(|j| (j - (k - 1)) * d).collect()
    } else {
        (0..k).map(|j| (j - (k - 1) / 2) * d).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs the network over one utterance. Same-length contract: the output has
/// exactly as many frames as the input (zero padding outside the sequence).
///
/// Train mode normalizes with batch statistics over the utterance's frames
/// and applies dropout (requires `rng` when the rate is positive); infer mode
/// uses running statistics and no dropout. `forward` itself never mutates the
/// parameters — fold the cached batch statistics into the running estimates
/// with [`update_running_stats`] after each training forward.
pub fn forward(
    params: &ModelParameters,
    config: &ModelConfig,
    features: &Matrix,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(ModelOutput, ForwardCache)> {
    config.validate()?;
    if features.cols() != config.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "features have {} columns, model expects {}",
            features.cols(),
            config.input_dim
        )));
    }
    if features.rows() == 0 {
        return Err(Error::ShapeMismatch("empty utterance".into()));
    }
    if params.blocks.len() != config.num_blocks {
        return Err(Error::ShapeMismatch(format!(
            "parameters have {} blocks, config expects {}",
            params.blocks.len(),
            config.num_blocks
        )));
    }
    let dropout_active = mode == Mode::Train && config.dropout_rate > 0.0;
    if dropout_active && rng.is_none() {
        return Err(Error::Config(
            "train-mode forward with dropout requires an rng".into(),
        ));
    }

    let t_len = features.rows();
    let c_out = config.channels;
    let mut x = features.clone();
    let mut caches = Vec::with_capacity(config.num_blocks);

    for (b, bp) in params.blocks.iter().enumerate() {
        let c_in = config.block_in_dim(b);
        debug_assert_eq!(x.cols(), c_in);
        let offsets = conv_tap_offsets(config, b);
        let k = config.kernel_size;

        // Dilated convolution with zero padding.
        let mut conv = Matrix::zeros(t_len, c_out);
        for t in 0..t_len {
            let out_row = conv.row_mut(t);
            for (o, out) in out_row.iter_mut().enumerate() {
                let w_o = &bp.conv_w[o * k * c_in..(o + 1) * k * c_in];
                let mut acc = bp.conv_b[o];
                for (j, &off) in offsets.iter().enumerate() {
                    let src = t as isize + off;
                    if src >= 0 && (src as usize) < t_len {
                        acc += dot(&w_o[j * c_in..(j + 1) * c_in], x.row(src as usize));
                    }
                }
                *out = acc;
            }
        }

        // Batch normalization over the time axis.
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c_out];
                let mut var = vec![0.0; c_out];
                for t in 0..t_len {
                    let row = conv.row(t);
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= t_len as f64;
                }
                for t in 0..t_len {
                    let row = conv.row(t);
                    for (c, v) in var.iter_mut().enumerate() {
                        let d = row[c] - mean[c];
                        *v += d * d;
                    }
                }
                for v in &mut var {
                    *v /= t_len as f64;
                }
                (mean, var)
            }
            Mode::Infer => (bp.bn_running_mean.clone(), bp.bn_running_var.clone()),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = Matrix::zeros(t_len, c_out);
        for t in 0..t_len {
            let src = conv.row(t);
            let dst = x_hat.row_mut(t);
            for c in 0..c_out {
                dst[c] = (src[c] - mean[c]) * inv_std[c];
            }
        }

        // Scale/shift, ReLU, dropout.
        let mut dropout = Vec::new();
        if dropout_active {
            let keep = 1.0 - config.dropout_rate;
            let rng = rng.as_deref_mut().expect("checked above");
            dropout.reserve(t_len * c_out);
            for _ in 0..t_len * c_out {
                let kept = rng.gen::<f64>() >= config.dropout_rate;
                dropout.push(if kept { 1.0 / keep } else { 0.0 });
            }
        }
        let mut out = Matrix::zeros(t_len, c_out);
        for t in 0..t_len {
            let xh = x_hat.row(t);
            let dst = out.row_mut(t);
            for c in 0..c_out {
                let y = bp.bn_scale[c] * xh[c] + bp.bn_shift[c];
                let mut v = y.max(0.0);
                if dropout_active {
                    v *= dropout[t * c_out + c];
                }
                dst[c] = v;
            }
        }

        caches.push(BlockCache {
            conv_in: x,
            x_hat,
            mean,
            var,
            dropout,
        });
        x = out;
    }

    // Output projection and per-frame log-softmax.
    let u = config.output_units;
    let mut logits = Matrix::zeros(t_len, u);
    for t in 0..t_len {
        let h = x.row(t);
        let row = logits.row_mut(t);
        for (o, out) in row.iter_mut().enumerate() {
            *out = params.out_b[o] + dot(&params.out_w[o * c_out..(o + 1) * c_out], h);
        }
    }
    let mut log_post = Matrix::zeros(t_len, u);
    for t in 0..t_len {
        softmax_log_into(logits.row(t), log_post.row_mut(t));
    }

    Ok((
        ModelOutput { logits, log_post },
        ForwardCache {
            config: config.clone(),
            mode,
            blocks: caches,
            hidden: x,
        },
    ))
}

/// Flat-index ranges of the per-block convolution biases within the
/// [`ModelParameters::flat_trainable`] order.
///
/// With batch statistics, a convolution bias shifts every frame equally and
/// the batch mean absorbs it, so these coordinates have structurally zero
/// gradients in train mode. Finite differences observe only roundoff there;
/// gradient checks assert them as exact zeros instead of relative errors.
pub fn conv_bias_ranges(config: &ModelConfig) -> Vec<std::ops::Range<usize>> {
    let mut ranges = Vec::with_capacity(config.num_blocks);
    let mut pos = 0;
    for b in 0..config.num_blocks {
        let c_in = config.block_in_dim(b);
        pos += config.channels * config.kernel_size * c_in;
        ranges.push(pos..pos + config.channels);
        pos += config.channels * 3;
    }
    ranges
}

/// Adjusts batch-norm shifts so that on `features` every pre-ReLU activation
/// is at least `margin` away from zero, block by block. Finite-difference
/// gradient checks probe a neighborhood of the evaluation point; this keeps
/// that neighborhood free of ReLU kinks while leaving activation signs mixed.
pub fn nudge_activations_from_kinks(
    params: &mut ModelParameters,
    config: &ModelConfig,
    features: &Matrix,
    margin: f64,
) -> Result<()> {
    for b in 0..config.num_blocks {
        let (_, cache) = forward(params, config, features, Mode::Train, None)?;
        let bc = &cache.blocks[b];
        let t_len = bc.x_hat.rows();
        let c_out = config.channels;
        for c in 0..c_out {
            let scale = params.blocks[b].bn_scale[c];
            let shift = params.blocks[b].bn_shift[c];
            let ys: Vec<f64> = (0..t_len).map(|t| scale * bc.x_hat[(t, c)] + shift).collect();
            let worst = ys.iter().map(|y| y.abs()).fold(f64::INFINITY, f64::min);
            if worst >= margin {
                continue;
            }
            // Candidate shifts put zero either outside the value range or in
            // the middle of a gap between sorted activations; pick the one
            // clearing the margin with the smallest adjustment.
            let mut sorted = ys.clone();
            sorted.sort_by(f64::total_cmp);
            let mut candidates = vec![
                -(sorted[0] - 2.0 * margin),
                -(sorted[t_len - 1] + 2.0 * margin),
            ];
            for w in sorted.windows(2) {
                candidates.push(-(w[0] + w[1]) / 2.0);
            }
            let mut best: Option<f64> = None;
            for delta in candidates {
                let clearance = ys.iter().map(|y| (y + delta).abs()).fold(f64::INFINITY, f64::min);
                if clearance >= margin {
                    let better = match best {
                        None => true,
                        Some(prev) => delta.abs() < prev.abs(),
                    };
                    if better {
                        best = Some(delta);
                    }
                }
            }
            let delta = best.ok_or_else(|| {
                Error::Invalid(format!(
                    "no kink-free shift with margin {margin} for block {b} channel {c}"
                ))
            })?;
            params.blocks[b].bn_shift[c] += delta;
        }
    }
    Ok(())
}

/// Folds the batch statistics recorded in a train-mode cache into the
/// running estimates: `running = 0.99 * running + 0.01 * batch`.
pub fn update_running_stats(params: &mut ModelParameters, cache: &ForwardCache) {
    debug_assert_eq!(cache.mode, Mode::Train);
    for (bp, bc) in params.blocks.iter_mut().zip(&cache.blocks) {
        for (r, &m) in bp.bn_running_mean.iter_mut().zip(&bc.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in bp.bn_running_var.iter_mut().zip(&bc.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

/// Gradients for every trainable tensor plus the input features.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
    pub d_input: Matrix,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub bn_scale: Vec<f64>,
    pub bn_shift: Vec<f64>,
}

impl Gradients {
    pub fn zeros(config: &ModelConfig) -> Gradients {
        let blocks = (0..config.num_blocks)
            .map(|b| {
                let c_in = config.block_in_dim(b);
                BlockGrads {
                    conv_w: vec![0.0; config.channels * config.kernel_size * c_in],
                    conv_b: vec![0.0; config.channels],
                    bn_scale: vec![0.0; config.channels],
                    bn_shift: vec![0.0; config.channels],
                }
            })
            .collect();
        Gradients {
            blocks,
            out_w: vec![0.0; config.output_units * config.channels],
            out_b: vec![0.0; config.output_units],
            d_input: Matrix::zeros(0, 0),
        }
    }

    /// Accumulates `w * other` into self (input gradient excluded).
    pub fn add_scaled(&mut self, other: &Gradients, w: f64) {
        fn axpy(dst: &mut [f64], src: &[f64], w: f64) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            axpy(&mut a.conv_w, &b.conv_w, w);
            axpy(&mut a.conv_b, &b.conv_b, w);
            axpy(&mut a.bn_scale, &b.bn_scale, w);
            axpy(&mut a.bn_shift, &b.bn_shift, w);
        }
        axpy(&mut self.out_w, &other.out_w, w);
        axpy(&mut self.out_b, &other.out_b, w);
    }

    /// Flattened in the same order as [`ModelParameters::flat_trainable`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for b in &self.blocks {
            flat.extend_from_slice(&b.conv_w);
            flat.extend_from_slice(&b.conv_b);
            flat.extend_from_slice(&b.bn_scale);
            flat.extend_from_slice(&b.bn_shift);
        }
        flat.extend_from_slice(&self.out_w);
        flat.extend_from_slice(&self.out_b);
        flat
    }
}

/// Exact reverse-mode gradients of an upstream scalar with respect to every
/// trainable parameter and the input, given that scalar's gradient at the
/// logits. The cache must come from a matching train-mode forward call.
pub fn backward(
    params: &ModelParameters,
    config: &ModelConfig,
    cache: &ForwardCache,
    grad_logits: &Matrix,
) -> Result<Gradients> {
    if cache.config != *config {
        return Err(Error::ShapeMismatch(
            "forward cache was produced under a different config".into(),
        ));
    }
    if cache.mode != Mode::Train {
        return Err(Error::ShapeMismatch(
            "backward requires a train-mode forward cache".into(),
        ));
    }
    let t_len = cache.hidden.rows();
    let c_mid = config.channels;
    let u = config.output_units;
    if grad_logits.rows() != t_len || grad_logits.cols() != u {
        return Err(Error::ShapeMismatch(format!(
            "grad_logits is {}x{}, expected {}x{}",
            grad_logits.rows(),
            grad_logits.cols(),
            t_len,
            u
        )));
    }

    let mut grads = Gradients::zeros(config);

    // Output projection.
    let mut d = Matrix::zeros(t_len, c_mid);
    for t in 0..t_len {
        let g = grad_logits.row(t);
        let h = cache.hidden.row(t);
        let d_row = d.row_mut(t);
        for o in 0..u {
            let go = g[o];
            if go == 0.0 {
                continue;
            }
            grads.out_b[o] += go;
            let w_row = &mut grads.out_w[o * c_mid..(o + 1) * c_mid];
            for c in 0..c_mid {
                w_row[c] += go * h[c];
            }
            let w = &params.out_w[o * c_mid..(o + 1) * c_mid];
            for c in 0..c_mid {
                d_row[c] += go * w[c];
            }
        }
    }

    // Blocks in reverse.
    for b in (0..config.num_blocks).rev() {
        let bp = &params.blocks[b];
        let bc = &cache.blocks[b];
        let bg = &mut grads.blocks[b];
        let c_in = config.block_in_dim(b);
        let c_out = config.channels;
        let k = config.kernel_size;

        // Dropout.
        if !bc.dropout.is_empty() {
            for t in 0..t_len {
                let row = d.row_mut(t);
                for c in 0..c_out {
                    row[c] *= bc.dropout[t * c_out + c];
                }
            }
        }

        // ReLU through y = scale * x_hat + shift.
        for t in 0..t_len {
            let xh = bc.x_hat.row(t);
            let row = d.row_mut(t);
            for c in 0..c_out {
                let y = bp.bn_scale[c] * xh[c] + bp.bn_shift[c];
                if y <= 0.0 {
                    row[c] = 0.0;
                }
            }
        }

        // Batch normalization (batch statistics over T frames).
        let inv_std: Vec<f64> = bc.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut sum_d = vec![0.0; c_out];
        let mut sum_dxhat = vec![0.0; c_out];
        for t in 0..t_len {
            let row = d.row(t);
            let xh = bc.x_hat.row(t);
            for c in 0..c_out {
                sum_d[c] += row[c];
                sum_dxhat[c] += row[c] * xh[c];
            }
        }
        for c in 0..c_out {
            bg.bn_scale[c] += sum_dxhat[c];
            bg.bn_shift[c] += sum_d[c];
        }
        let t_f = t_len as f64;
        for t in 0..t_len {
            let xh = bc.x_hat.row(t);
            let row = d.row_mut(t);
            for c in 0..c_out {
                row[c] = bp.bn_scale[c]
                    * inv_std[c]
                    * (row[c] - sum_d[c] / t_f - xh[c] * sum_dxhat[c] / t_f);
            }
        }

        // Convolution: weight, bias and input gradients.
        let offsets = conv_tap_offsets(config, b);
        let mut d_in = Matrix::zeros(t_len, c_in);
        for t in 0..t_len {
            let g = d.row(t);
            for o in 0..c_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                bg.conv_b[o] += go;
                let wg_o = &mut bg.conv_w[o * k * c_in..(o + 1) * k * c_in];
                let w_o = &bp.conv_w[o * k * c_in..(o + 1) * k * c_in];
                for (j, &off) in offsets.iter().enumerate() {
                    let src = t as isize + off;
                    if src < 0 || src as usize >= t_len {
                        continue;
                    }
                    let src = src as usize;
                    let x_row = bc.conv_in.row(src);
                    let wg_j = &mut wg_o[j * c_in..(j + 1) * c_in];
                    for c in 0..c_in {
                        wg_j[c] += go * x_row[c];
                    }
                    let w_j = &w_o[j * c_in..(j + 1) * c_in];
                    let din_row = d_in.row_mut(src);
                    for c in 0..c_in {
                        din_row[c] += go * w_j[c];
                    }
                }
            }
        }
        d = d_in;
    }

    grads.d_input = d;
    Ok(grads)
}

/// Element-wise arithmetic mean of parameter sets with identical shapes;
/// running batch-norm statistics are averaged like weights.
pub fn average_parameters(params: &[ModelParameters]) -> Result<ModelParameters> {
    let first = params
        .first()
        .ok_or_else(|| Error::Config("nothing to average".into()))?;
    let mut avg = first.clone();
    let scale = 1.0 / params.len() as f64;

    let mean_into = |dst: &mut [f64], srcs: &[&[f64]]| -> Result<()> {
        for src in srcs {
            if src.len() != dst.len() {
                return Err(Error::ShapeMismatch(
                    "checkpoints have different shapes".into(),
                ));
            }
            for (d, s) in dst.iter_mut().zip(*src) {
                *d += s;
            }
        }
        for d in dst {
            *d *= scale;
        }
        Ok(())
    };

    for (i, block) in avg.blocks.iter_mut().enumerate() {
        let others: Vec<&BlockParams> = params[1..]
            .iter()
            .map(|p| {
                p.blocks
                    .get(i)
                    .ok_or_else(|| Error::ShapeMismatch("checkpoints have different shapes".into()))
            })
            .collect::<Result<_>>()?;
        let col = |f: fn(&BlockParams) -> &[f64]| -> Vec<&[f64]> {
            others.iter().map(|b| f(b)).collect()
        };
        mean_into(&mut block.conv_w, &col(|b| &b.conv_w))?;
        mean_into(&mut block.conv_b, &col(|b| &b.conv_b))?;
        mean_into(&mut block.bn_scale, &col(|b| &b.bn_scale))?;
        mean_into(&mut block.bn_shift, &col(|b| &b.bn_shift))?;
        mean_into(&mut block.bn_running_mean, &col(|b| &b.bn_running_mean))?;
        mean_into(&mut block.bn_running_var, &col(|b| &b.bn_running_var))?;
    }
    let rest_w: Vec<&[f64]> = params[1..].iter().map(|p| p.out_w.as_slice()).collect();
    let rest_b: Vec<&[f64]> = params[1..].iter().map(|p| p.out_b.as_slice()).collect();
    mean_into(&mut avg.out_w, &rest_w)?;
    mean_into(&mut avg.out_b, &rest_b)?;
    Ok(avg)
}

// ---------------------------------------------------------------------------
// Checkpoint format: little-endian, magic "MSCE", u32 version = 1,
// u64 config length, config JSON, then per block the tensors
// conv_w [out, kernel, in] / conv_b / bn_scale / bn_shift / bn_running_mean /
// bn_running_var, followed by out_w [units, channels] and out_b. Every tensor
// is (u32 rank, u32 dims..., f32 data).
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MSCE";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_tensor(w: &mut impl Write, dims: &[u32], data: &[f64]) -> Result<()> {
    debug_assert_eq!(dims.iter().product::<u32>() as usize, data.len());
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Truncated(what.to_string()))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read, expect_dims: &[u32], what: &str) -> Result<Vec<f64>> {
    let rank = read_u32(r, what)?;
    if rank as usize != expect_dims.len() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: rank {rank}, expected {}",
            expect_dims.len()
        )));
    }
    let mut len = 1usize;
    for &want in expect_dims {
        let got = read_u32(r, what)?;
        if got != want {
            return Err(Error::ShapeMismatch(format!(
                "{what}: dim {got}, expected {want}"
            )));
        }
        len *= got as usize;
    }
    let mut data = Vec::with_capacity(len);
    let mut b = [0u8; 4];
    for _ in 0..len {
        read_exact(r, &mut b, what)?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    Ok(data)
}

/// Serializes parameters and config to the checkpoint format. Weights are
/// stored as f32; a save/load/save round trip is byte-identical.
pub fn save_checkpoint(
    params: &ModelParameters,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config_json = serde_json::to_vec(config)?;
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(&config_json)?;

    let k = config.kernel_size as u32;
    let c = config.channels as u32;
    for (b, bp) in params.blocks.iter().enumerate() {
        let c_in = config.block_in_dim(b) as u32;
        write_tensor(&mut w, &[c, k, c_in], &bp.conv_w)?;
        write_tensor(&mut w, &[c], &bp.conv_b)?;
        write_tensor(&mut w, &[c], &bp.bn_scale)?;
        write_tensor(&mut w, &[c], &bp.bn_shift)?;
        write_tensor(&mut w, &[c], &bp.bn_running_mean)?;
        write_tensor(&mut w, &[c], &bp.bn_running_var)?;
    }
    let u = config.output_units as u32;
    write_tensor(&mut w, &[u, c], &params.out_w)?;
    write_tensor(&mut w, &[u], &params.out_b)?;
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back. Bad magic, wrong version, truncation and shape
/// mismatches each produce their own error.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParameters, ModelConfig)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut len_bytes = [0u8; 8];
    read_exact(&mut r, &mut len_bytes, "config length")?;
    let config_len = u64::from_le_bytes(len_bytes) as usize;
    let mut config_json = vec![0u8; config_len];
    read_exact(&mut r, &mut config_json, "config blob")?;
    let config: ModelConfig = serde_json::from_slice(&config_json)?;
    config.validate()?;

    let k = config.kernel_size as u32;
    let c = config.channels as u32;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for b in 0..config.num_blocks {
        let c_in = config.block_in_dim(b) as u32;
        let what = format!("block {b}");
        blocks.push(BlockParams {
            conv_w: read_tensor(&mut r, &[c, k, c_in], &what)?,
            conv_b: read_tensor(&mut r, &[c], &what)?,
            bn_scale: read_tensor(&mut r, &[c], &what)?,
            bn_shift: read_tensor(&mut r, &[c], &what)?,
            bn_running_mean: read_tensor(&mut r, &[c], &what)?,
            bn_running_var: read_tensor(&mut r, &[c], &what)?,
        });
    }
    let u = config.output_units as u32;
    let out_w = read_tensor(&mut r, &[u, c], "output weights")?;
    let out_b = read_tensor(&mut r, &[u], "output bias")?;
    Ok((
        ModelParameters {
            blocks,
            out_w,
            out_b,
        },
        config,
    ))
}

/// Loads several checkpoints, verifies they share one config, and returns
/// their element-wise average.
pub fn average_checkpoints(paths: &[impl AsRef<Path>]) -> Result<(ModelParameters, ModelConfig)> {
    if paths.is_empty() {
        return Err(Error::Config("no checkpoints to average".into()));
    }
    let mut all = Vec::with_capacity(paths.len());
    let mut config: Option<ModelConfig> = None;
    for p in paths {
        let (params, cfg) = load_checkpoint(p)?;
        match &config {
            None => config = Some(cfg),
            Some(existing) if *existing == cfg => {}
            Some(_) => {
                return Err(Error::Config(format!(
                    "checkpoint {} has a different config",
                    p.as_ref().display()
                )))
            }
        }
        all.push(params);
    }
    Ok((average_parameters(&all)?, config.unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, stream_rng, streams, Matrix};
    use rand::Rng;

    fn random_features(t: usize, f: usize, seed: u64) -> Matrix {
        let mut rng = stream_rng(seed, streams::TEST);
        Matrix::from_fn(t, f, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::tiny(5, 4);
        let a = init_parameters(&cfg, &mut stream_rng(9, streams::INIT)).unwrap();
        let b = init_parameters(&cfg, &mut stream_rng(9, streams::INIT)).unwrap();
        assert_eq!(a, b);
        assert!(a.blocks[0].bn_scale.iter().all(|&v| v == 1.0));
        let bound = (6.0 / ((5 * 3 + 8 * 3) as f64)).sqrt();
        assert!(a.blocks[0].conv_w.iter().all(|&w| w.abs() <= bound));
    }

    #[test]
    fn same_length_contract() {
        let cfg = ModelConfig::tiny(3, 4);
        let params = init_parameters(&cfg, &mut stream_rng(1, streams::INIT)).unwrap();
        for t in [1usize, 2, 9] {
            let x = random_features(t, 3, 50 + t as u64);
            let (out, _) = forward(&params, &cfg, &x, Mode::Infer, None).unwrap();
            assert_eq!(out.logits.rows(), t);
        }
    }

    #[test]
    fn train_mode_single_frame_has_no_nan() {
        let cfg = ModelConfig::tiny(3, 4);
        let params = init_parameters(&cfg, &mut stream_rng(1, streams::INIT)).unwrap();
        let x = random_features(1, 3, 55);
        let (out, _) = forward(&params, &cfg, &x, Mode::Train, None).unwrap();
        assert!(out.logits.is_finite());
    }

    #[test]
    fn infer_mode_is_deterministic() {
        let mut cfg = ModelConfig::tiny(4, 5);
        cfg.dropout_rate = 0.5;
        let params = init_parameters(&cfg, &mut stream_rng(2, streams::INIT)).unwrap();
        let x = random_features(6, 4, 60);
        let (a, _) = forward(&params, &cfg, &x, Mode::Infer, None).unwrap();
        let (b, _) = forward(&params, &cfg, &x, Mode::Infer, None).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn train_mode_determined_by_seed() {
        let mut cfg = ModelConfig::tiny(4, 5);
        cfg.dropout_rate = 0.3;
        let params = init_parameters(&cfg, &mut stream_rng(2, streams::INIT)).unwrap();
        let x = random_features(6, 4, 61);
        let mut r1 = stream_rng(7, streams::DROPOUT);
        let mut r2 = stream_rng(7, streams::DROPOUT);
        let (a, _) = forward(&params, &cfg, &x, Mode::Train, Some(&mut r1)).unwrap();
        let (b, _) = forward(&params, &cfg, &x, Mode::Train, Some(&mut r2)).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn dependency_footprint_of_single_noncausal_block() {
        // Kernel 3, dilation 4: output frame t may depend only on inputs
        // {t-4, t, t+4}. Perturb every frame and check exactly that set moves.
        let mut cfg = ModelConfig::tiny(3, 4);
        cfg.dilations = vec![4];
        let params = init_parameters(&cfg, &mut stream_rng(3, streams::INIT)).unwrap();
        let t_len = 12;
        let base = random_features(t_len, 3, 70);
        let (out_base, _) = forward(&params, &cfg, &base, Mode::Infer, None).unwrap();
        let probe_t = 6usize;
        for perturbed in 0..t_len {
            let mut x = base.clone();
            x[(perturbed, 1)] += 0.75;
            let (out, _) = forward(&params, &cfg, &x, Mode::Infer, None).unwrap();
            let changed = out.logits.row(probe_t) != out_base.logits.row(probe_t);
            let in_footprint =
                perturbed + 4 == probe_t || perturbed == probe_t || perturbed == probe_t + 4;
            assert_eq!(
                changed, in_footprint,
                "frame {perturbed} -> output {probe_t}: changed={changed}"
            );
        }
    }

    #[test]
    fn causal_block_ignores_future_frames() {
        let mut cfg = ModelConfig::tiny(3, 4);
        cfg.causal_blocks = [0].into_iter().collect();
        cfg.dilations = vec![2];
        let params = init_parameters(&cfg, &mut stream_rng(4, streams::INIT)).unwrap();
        let base = random_features(10, 3, 80);
        let (out_base, _) = forward(&params, &cfg, &base, Mode::Infer, None).unwrap();
        for probe_t in 0..9 {
            let mut x = base.clone();
            x[(probe_t + 1, 0)] += 1.0;
            let (out, _) = forward(&params, &cfg, &x, Mode::Infer, None).unwrap();
            assert_eq!(
                out.logits.row(probe_t),
                out_base.logits.row(probe_t),
                "future frame {} leaked into output {probe_t}",
                probe_t + 1
            );
        }
    }

    #[test]
    fn receptive_field_default_config() {
        let mut cfg = ModelConfig::full(10);
        cfg.causal_blocks.clear();
        assert_eq!(receptive_field(&cfg), (39, 39));
    }

    #[test]
    fn receptive_field_all_causal() {
        let mut cfg = ModelConfig::full(10);
        cfg.causal_blocks = (0..16).collect();
        let (left, right) = receptive_field(&cfg);
        assert_eq!(right, 0);
        assert_eq!(left, 78); // 2 * sum(dilations)
    }

    #[test]
    fn receptive_field_causal_moves_right_into_left() {
        let mut none = ModelConfig::full(10);
        none.causal_blocks.clear();
        let (l0, r0) = receptive_field(&none);
        let mut some = none.clone();
        some.causal_blocks = [7, 8].into_iter().collect();
        let (l1, r1) = receptive_field(&some);
        let moved: usize = [7usize, 8].iter().map(|&b| some.dilations[b]).sum();
        assert_eq!(l1, l0 + moved);
        assert_eq!(r1, r0 - moved);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let cfg = ModelConfig::tiny(3, 4);
        let params = init_parameters(&cfg, &mut stream_rng(5, streams::INIT)).unwrap();
        let x = random_features(5, 3, 90);
        let (_, cache) = forward(&params, &cfg, &x, Mode::Train, None).unwrap();
        let grads = backward(&params, &cfg, &cache, &Matrix::zeros(5, 4)).unwrap();
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_infer_cache() {
        let cfg = ModelConfig::tiny(3, 4);
        let params = init_parameters(&cfg, &mut stream_rng(5, streams::INIT)).unwrap();
        let x = random_features(5, 3, 91);
        let (_, cache) = forward(&params, &cfg, &x, Mode::Infer, None).unwrap();
        assert!(backward(&params, &cfg, &cache, &Matrix::zeros(5, 4)).is_err());
    }

    #[test]
    fn backward_rejects_mismatched_config() {
        let cfg = ModelConfig::tiny(3, 4);
        let params = init_parameters(&cfg, &mut stream_rng(5, streams::INIT)).unwrap();
        let x = random_features(5, 3, 92);
        let (_, cache) = forward(&params, &cfg, &x, Mode::Train, None).unwrap();
        let mut other = cfg.clone();
        other.dropout_rate = 0.25;
        assert!(backward(&params, &other, &cache, &Matrix::zeros(5, 4)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_one_block() {
        // Scalar = fixed random functional of the logits; dropout disabled.
        // The evaluation point is nudged away from ReLU kinks first so the
        // difference quotients probe a differentiable neighborhood.
        let mut cfg = ModelConfig::tiny(3, 4);
        cfg.channels = 6;
        cfg.dilations = vec![2];
        let mut params = init_parameters(&cfg, &mut stream_rng(6, streams::INIT)).unwrap();
        let x = random_features(5, 3, 100);
        let probe = random_features(5, 4, 101);
        nudge_activations_from_kinks(&mut params, &cfg, &x, 5e-3).unwrap();

        let (_, cache) = forward(&params, &cfg, &x, Mode::Train, None).unwrap();
        let grads = backward(&params, &cfg, &cache, &probe).unwrap();

        let flat = params.flat_trainable();
        let gflat = grads.to_flat();
        let bias_coords: Vec<usize> = conv_bias_ranges(&cfg).into_iter().flatten().collect();
        // Conv biases are no-ops under batch statistics: zero up to the
        // cancellation roundoff of the mean subtraction.
        for &i in &bias_coords {
            assert!(gflat[i].abs() < 1e-12, "conv bias coord {i}: {}", gflat[i]);
        }
        let active: Vec<usize> = (0..flat.len())
            .filter(|i| !bias_coords.contains(i))
            .collect();
        let err = crate::numerics::finite_diff_check_at(
            |p| {
                let mut probe_params = params.clone();
                probe_params.load_trainable(p);
                let (o, _) = forward(&probe_params, &cfg, &x, Mode::Train, None).unwrap();
                o.logits
                    .as_slice()
                    .iter()
                    .zip(probe.as_slice())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &gflat,
            &flat,
            1e-5,
            &active,
        );
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut cfg = ModelConfig::tiny(3, 4);
        cfg.causal_blocks = [0].into_iter().collect();
        let mut params = init_parameters(&cfg, &mut stream_rng(8, streams::INIT)).unwrap();
        let x = random_features(4, 3, 110);
        let probe = random_features(4, 4, 111);
        nudge_activations_from_kinks(&mut params, &cfg, &x, 5e-3).unwrap();
        let (_, cache) = forward(&params, &cfg, &x, Mode::Train, None).unwrap();
        let grads = backward(&params, &cfg, &cache, &probe).unwrap();
        let err = finite_diff_check(
            |flat| {
                let m = Matrix::from_vec(4, 3, flat.to_vec());
                let (o, _) = forward(&params, &cfg, &m, Mode::Train, None).unwrap();
                o.logits
                    .as_slice()
                    .iter()
                    .zip(probe.as_slice())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            grads.d_input.as_slice(),
            x.as_slice(),
            1e-5,
        );
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn running_stats_fold_with_momentum() {
        let cfg = ModelConfig::tiny(3, 4);
        let mut params = init_parameters(&cfg, &mut stream_rng(5, streams::INIT)).unwrap();
        let x = random_features(8, 3, 120);
        let (_, cache) = forward(&params, &cfg, &x, Mode::Train, None).unwrap();
        let batch_mean = cache.blocks[0].mean.clone();
        update_running_stats(&mut params, &cache);
        for (r, m) in params.blocks[0].bn_running_mean.iter().zip(&batch_mean) {
            assert!((r - 0.01 * m).abs() < 1e-12); // started at 0
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny(3, 4);
        let params = init_parameters(&cfg, &mut stream_rng(30, streams::INIT)).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&params, &cfg, &p1).unwrap();
        let (loaded, cfg2) = load_checkpoint(&p1).unwrap();
        assert_eq!(cfg, cfg2);
        save_checkpoint(&loaded, &cfg2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny(3, 4);
        let params = init_parameters(&cfg, &mut stream_rng(31, streams::INIT)).unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&path, &corrupted).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));

        bytes[4] = 2; // version + 1
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::BadVersion {
                expected: 1,
                found: 2
            })
        ));
    }

    #[test]
    fn checkpoint_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny(3, 4);
        let params = init_parameters(&cfg, &mut stream_rng(32, streams::INIT)).unwrap();
        let path = dir.path().join("d.ckpt");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn averaging_rejects_mismatched_configs() {
        let dir = tempfile::tempdir().unwrap();
        let a_cfg = ModelConfig::tiny(3, 4);
        let mut b_cfg = ModelConfig::tiny(3, 4);
        b_cfg.channels = 16;
        let a = init_parameters(&a_cfg, &mut stream_rng(40, streams::INIT)).unwrap();
        let b = init_parameters(&b_cfg, &mut stream_rng(41, streams::INIT)).unwrap();
        let pa = dir.path().join("a.ckpt");
        let pb = dir.path().join("b.ckpt");
        save_checkpoint(&a, &a_cfg, &pa).unwrap();
        save_checkpoint(&b, &b_cfg, &pb).unwrap();
        assert!(matches!(
            average_checkpoints(&[&pa, &pb]),
            Err(Error::Config(_))
        ));
        let (avg, cfg) = average_checkpoints(&[&pa, &pa]).unwrap();
        assert_eq!(cfg, a_cfg);
        let (reload, _) = load_checkpoint(&pa).unwrap();
        assert_eq!(avg, reload);
    }

    #[test]
    fn averaging_identities() {
        let cfg = ModelConfig::tiny(3, 4);
        let p = init_parameters(&cfg, &mut stream_rng(33, streams::INIT)).unwrap();
        let avg1 = average_parameters(std::slice::from_ref(&p)).unwrap();
        assert_eq!(avg1, p);
        let avg2 = average_parameters(&[p.clone(), p.clone()]).unwrap();
        assert_eq!(avg2, p);

        let mut neg = p.clone();
        let flat: Vec<f64> = p.flat_trainable().iter().map(|v| -v).collect();
        neg.load_trainable(&flat);
        for b in &mut neg.blocks {
            for v in b
                .bn_running_mean
                .iter_mut()
                .chain(b.bn_running_var.iter_mut())
            {
                *v = -*v;
            }
        }
        let zeros = average_parameters(&[p, neg]).unwrap();
        assert!(zeros.flat_trainable().iter().all(|&v| v == 0.0));
        assert!(zeros.blocks[0].bn_running_var.iter().all(|&v| v == 0.0));
    }
}
