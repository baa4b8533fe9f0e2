//! Convolutional majorness regressor.
//!
//! Input log-mel frames are average-pooled over (time, mel) and standardized,
//! passed through a stem convolution and one Inception-style block of
//! parallel square-kernel branches, globally averaged and mapped to a scalar
//! by an affine head. Backpropagation is written out by hand.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::audio::MelSpectrogram;

/// 80 dB expressed as a natural-log power ratio.
pub const DB80: f64 = 18.420_680_743_952_367;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub n_mels: usize,
    pub pool_time: usize,
    pub pool_mel: usize,
    /// Log-energy values more than this far below the clip maximum are raised
    /// to that level before pooling (natural-log units of power).
    pub dynamic_range: Option<f64>,
    pub standardize_input: bool,
    /// Standardize pooled features with training-set statistics refreshed
    /// at the start of every epoch.
    pub feature_norm: bool,
    pub stem_channels: usize,
    pub stem_kernel_time: usize,
    pub stem_kernel_mel: usize,
    /// Square kernel size of each parallel branch.
    pub branch_kernels: Vec<usize>,
    /// Output channels of each branch, same length as `branch_kernels`.
    pub branch_channels: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            n_mels: 299,
            pool_time: 16,
            pool_mel: 2,
            dynamic_range: Some(DB80),
            standardize_input: true,
            feature_norm: true,
            stem_channels: 8,
            stem_kernel_time: 3,
            stem_kernel_mel: 9,
            branch_kernels: vec![1, 3, 5],
            branch_channels: vec![4, 4, 4],
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_mels == 0 || self.pool_time == 0 || self.pool_mel == 0 {
            return err("n_mels and pooling factors must be positive");
        }
        if self.pool_mel > self.n_mels {
            return err("pool_mel exceeds n_mels");
        }
        if self.dynamic_range.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return err("dynamic_range must be positive");
        }
        if self.stem_channels == 0 {
            return err("stem_channels must be positive");
        }
        for k in [self.stem_kernel_time, self.stem_kernel_mel].iter().chain(&self.branch_kernels) {
            if *k == 0 || k % 2 == 0 {
                return err("kernel sizes must be odd and positive");
            }
        }
        if self.branch_kernels.is_empty() || self.branch_kernels.len() != self.branch_channels.len() {
            return err("branch_kernels and branch_channels must be nonempty and of equal length");
        }
        if self.branch_channels.contains(&0) {
            return err("zero-width branch");
        }
        Ok(())
    }

    pub fn min_frames(&self) -> usize {
        self.pool_time
    }

    pub fn pooled_mels(&self) -> usize {
        self.n_mels / self.pool_mel
    }

    pub fn feature_count(&self) -> usize {
        self.branch_channels.iter().sum()
    }

    fn layout(&self) -> Layout {
        let mut off = 0;
        let mut take = |n: usize| {
            let start = off;
            off += n;
            start
        };
        let c0 = self.stem_channels;
        let stem = Conv { w: take(c0 * self.stem_kernel_time * self.stem_kernel_mel), b: take(c0), ic: 1, oc: c0, kt: self.stem_kernel_time, km: self.stem_kernel_mel };
        let branches = self
            .branch_kernels
            .iter()
            .zip(&self.branch_channels)
            .map(|(&k, &oc)| Conv { w: take(oc * c0 * k * k), b: take(oc), ic: c0, oc, kt: k, km: k })
            .collect();
        let head_w = take(self.feature_count());
        let head_b = take(1);
        Layout { stem, branches, head_w, head_b, total: off }
    }

    pub fn weight_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    ic: usize,
    oc: usize,
    kt: usize,
    km: usize,
}

impl Conv {
    fn w_len(&self) -> usize {
        self.oc * self.ic * self.kt * self.km
    }
}

#[derive(Debug, Clone)]
struct Layout {
    stem: Conv,
    branches: Vec<Conv>,
    head_w: usize,
    head_b: usize,
    total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub seed: u64,
    pub weights: Vec<f64>,
    /// Per-feature offset and multiplier applied before the head. Not trained
    /// by gradient descent.
    pub feature_shift: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

impl ModelParams {
    pub fn head_bias(&self) -> f64 {
        self.weights[self.arch.layout().head_b]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.arch.validate()?;
        if self.weights.len() != self.arch.weight_count() {
            return Err(ModelError::Config(format!(
                "weight count {} does not match architecture ({})",
                self.weights.len(),
                self.arch.weight_count()
            )));
        }
        if !self.is_finite() {
            return Err(ModelError::Config("non-finite weight".into()));
        }
        let nf = self.arch.feature_count();
        if self.feature_shift.len() != nf || self.feature_scale.len() != nf {
            return Err(ModelError::Config("feature normalization length does not match architecture".into()));
        }
        if self.feature_shift.iter().any(|v| !v.is_finite()) || self.feature_scale.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(ModelError::Config("feature normalization must be finite with positive scales".into()));
        }
        Ok(())
    }
}

const CONV_BIAS_INIT: f64 = 0.01;

/// He-normal convolution weights, small positive convolution biases, and a
/// head bias that starts at `target_mean` when given.
pub fn init_model(arch: &ArchConfig, seed: u64, target_mean: Option<f64>) -> Result<ModelParams, ModelError> {
    arch.validate()?;
    if target_mean.is_some_and(|m| !m.is_finite()) {
        return Err(ModelError::Parameter("target mean must be finite".into()));
    }
    let layout = arch.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = vec![0.0; layout.total];
    for conv in std::iter::once(&layout.stem).chain(&layout.branches) {
        let fan_in = (conv.ic * conv.kt * conv.km) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in &mut weights[conv.w..conv.w + conv.w_len()] {
            *w = normal.sample(&mut rng);
        }
        weights[conv.b..conv.b + conv.oc].fill(CONV_BIAS_INIT);
    }
    let nf = arch.feature_count();
    let normal = Normal::new(0.0, (1.0 / nf as f64).sqrt()).expect("positive std");
    for w in &mut weights[layout.head_w..layout.head_w + nf] {
        *w = normal.sample(&mut rng);
    }
    weights[layout.head_b] = target_mean.unwrap_or(0.0);
    Ok(ModelParams { arch: arch.clone(), seed, weights, feature_shift: vec![0.0; nf], feature_scale: vec![1.0; nf] })
}

/// Channel-major feature map `[c][t][m]`.
#[derive(Debug, Clone, PartialEq)]
struct Map {
    c: usize,
    t: usize,
    m: usize,
    data: Vec<f64>,
}

impl Map {
    fn zeros(c: usize, t: usize, m: usize) -> Self {
        Self { c, t, m, data: vec![0.0; c * t * m] }
    }

    fn row(&self, c: usize, t: usize) -> &[f64] {
        let s = (c * self.t + t) * self.m;
        &self.data[s..s + self.m]
    }

    fn row_mut(&mut self, c: usize, t: usize) -> &mut [f64] {
        let s = (c * self.t + t) * self.m;
        &mut self.data[s..s + self.m]
    }

    fn channel_mean(&self, c: usize) -> f64 {
        let n = self.t * self.m;
        self.data[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64
    }
}

/// Pooled (and optionally standardized) network input.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput(Map);

impl PreparedInput {
    pub fn frames(&self) -> usize {
        self.0.t
    }
}

pub fn prepare_input(arch: &ArchConfig, mel: &MelSpectrogram) -> Result<PreparedInput, ModelError> {
    arch.validate()?;
    if mel.n_mels != arch.n_mels {
        return Err(ModelError::Shape(format!("input has {} mel bands, model expects {}", mel.n_mels, arch.n_mels)));
    }
    if mel.frames < arch.min_frames() {
        return Err(ModelError::Shape(format!("input has {} frames, model needs at least {}", mel.frames, arch.min_frames())));
    }
    if mel.values.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Shape("non-finite input value".into()));
    }
    let (pt, pm) = (arch.pool_time, arch.pool_mel);
    let (t_out, m_out) = (mel.frames / pt, arch.pooled_mels());
    let mut map = Map::zeros(1, t_out, m_out);
    let scale = 1.0 / (pt * pm) as f64;
    let floor = match arch.dynamic_range {
        Some(range) => mel.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64)) - range,
        None => f64::NEG_INFINITY,
    };
    for t in 0..t_out {
        let row = map.row_mut(0, t);
        for dt in 0..pt {
            let frame = mel.frame(t * pt + dt);
            for (m, cell) in row.iter_mut().enumerate() {
                *cell += frame[m * pm..(m + 1) * pm].iter().map(|&v| (v as f64).max(floor)).sum::<f64>() * scale;
            }
        }
    }
    if arch.standardize_input {
        let n = map.data.len() as f64;
        let mean = map.data.iter().sum::<f64>() / n;
        let var = map.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        for v in &mut map.data {
            *v = (*v - mean) * inv;
        }
    }
    Ok(PreparedInput(map))
}

/// Index range `lo..hi` of output positions whose shifted source stays inside `0..len`.
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn conv_relu(input: &Map, w: &[f64], conv: &Conv) -> Map {
    let (t_len, m_len) = (input.t, input.m);
    let mut out = Map::zeros(conv.oc, t_len, m_len);
    let (ht, hm) = ((conv.kt / 2) as isize, (conv.km / 2) as isize);
    let (ws, bs) = (&w[conv.w..conv.w + conv.w_len()], &w[conv.b..conv.b + conv.oc]);
    for o in 0..conv.oc {
        for t in 0..t_len {
            out.row_mut(o, t).fill(bs[o]);
        }
        for i in 0..conv.ic {
            for dt in 0..conv.kt {
                let st = dt as isize - ht;
                let (t_lo, t_hi) = valid_range(t_len, st);
                for dm in 0..conv.km {
                    let sm = dm as isize - hm;
                    let (m_lo, m_hi) = valid_range(m_len, sm);
                    let wv = ws[((o * conv.ic + i) * conv.kt + dt) * conv.km + dm];
                    if wv == 0.0 {
                        continue;
                    }
                    for t in t_lo..t_hi {
                        let src_t = (t as isize + st) as usize;
                        let src_s = (i * t_len + src_t) * m_len;
                        let dst_s = (o * t_len + t) * m_len;
                        let src = &input.data[src_s + (m_lo as isize + sm) as usize..src_s + (m_hi as isize + sm) as usize];
                        let dst = &mut out.data[dst_s + m_lo..dst_s + m_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    for v in &mut out.data {
        *v = v.max(0.0);
    }
    out
}

/// Backward pass of `conv_relu`. `dout` arrives as the gradient with respect to
/// the post-ReLU output and is masked in place.
fn conv_relu_backward(input: &Map, output: &Map, dout: &mut Map, w: &[f64], conv: &Conv, grad: &mut [f64], mut din: Option<&mut Map>) {
    let (t_len, m_len) = (input.t, input.m);
    for (g, o) in dout.data.iter_mut().zip(&output.data) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
    let (ht, hm) = ((conv.kt / 2) as isize, (conv.km / 2) as isize);
    for o in 0..conv.oc {
        grad[conv.b + o] += (0..t_len).map(|t| dout.row(o, t).iter().sum::<f64>()).sum::<f64>();
        for i in 0..conv.ic {
            for dt in 0..conv.kt {
                let st = dt as isize - ht;
                let (t_lo, t_hi) = valid_range(t_len, st);
                for dm in 0..conv.km {
                    let sm = dm as isize - hm;
                    let (m_lo, m_hi) = valid_range(m_len, sm);
                    let widx = ((o * conv.ic + i) * conv.kt + dt) * conv.km + dm;
                    let wv = w[conv.w + widx];
                    let mut acc = 0.0;
                    for t in t_lo..t_hi {
                        let src_t = (t as isize + st) as usize;
                        let src_s = (i * t_len + src_t) * m_len;
                        let src_range = src_s + (m_lo as isize + sm) as usize..src_s + (m_hi as isize + sm) as usize;
                        let g = &dout.row(o, t)[m_lo..m_hi];
                        acc += g.iter().zip(&input.data[src_range.clone()]).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(din) = din.as_deref_mut() {
                            for (d, gv) in din.data[src_range].iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                    grad[conv.w + widx] += acc;
                }
            }
        }
    }
}

struct Activations {
    stem: Map,
    branches: Vec<Map>,
    /// Normalized pooled features.
    features: Vec<f64>,
    output: f64,
}

fn run(params: &ModelParams, layout: &Layout, x: &PreparedInput) -> Activations {
    let w = &params.weights;
    let stem = conv_relu(&x.0, w, &layout.stem);
    let branches: Vec<Map> = layout.branches.iter().map(|conv| conv_relu(&stem, w, conv)).collect();
    let features: Vec<f64> = branches
        .iter()
        .flat_map(|b| (0..b.c).map(|c| b.channel_mean(c)))
        .zip(params.feature_shift.iter().zip(&params.feature_scale))
        .map(|(g, (m, s))| (g - m) * s)
        .collect();
    let output = w[layout.head_b] + features.iter().zip(&w[layout.head_w..]).map(|(f, h)| f * h).sum::<f64>();
    Activations { stem, branches, features, output }
}

fn forward_prepared(params: &ModelParams, x: &PreparedInput) -> f64 {
    run(params, &params.arch.layout(), x).output
}

/// Predicted mean rating for one spectrogram.
pub fn forward(params: &ModelParams, mel: &MelSpectrogram) -> Result<f64, ModelError> {
    params.validate()?;
    let x = prepare_input(&params.arch, mel)?;
    Ok(forward_prepared(params, &x))
}

fn loss_grad_prepared(params: &ModelParams, layout: &Layout, x: &PreparedInput, target: f64) -> (f64, Vec<f64>) {
    let acts = run(params, layout, x);
    let w = &params.weights;
    let mut grad = vec![0.0; layout.total];
    let err = acts.output - target;
    let dy = 2.0 * err;
    grad[layout.head_b] = dy;
    for (k, f) in acts.features.iter().enumerate() {
        grad[layout.head_w + k] = dy * f;
    }
    let mut dstem = Map::zeros(acts.stem.c, acts.stem.t, acts.stem.m);
    let cells = (acts.stem.t * acts.stem.m) as f64;
    let mut feature = 0;
    for (conv, out) in layout.branches.iter().zip(&acts.branches) {
        let mut dout = Map::zeros(out.c, out.t, out.m);
        for c in 0..out.c {
            let g = dy * w[layout.head_w + feature] * params.feature_scale[feature] / cells;
            feature += 1;
            let n = out.t * out.m;
            dout.data[c * n..(c + 1) * n].fill(g);
        }
        conv_relu_backward(&acts.stem, out, &mut dout, w, conv, &mut grad, Some(&mut dstem));
    }
    conv_relu_backward(&x.0, &acts.stem, &mut dstem, w, &layout.stem, &mut grad, None);
    (err * err, grad)
}

/// Squared error of one sample and its gradient with respect to every weight.
pub fn loss_and_gradient(params: &ModelParams, mel: &MelSpectrogram, target: f64) -> Result<(f64, Vec<f64>), ModelError> {
    params.validate()?;
    let x = prepare_input(&params.arch, mel)?;
    Ok(loss_grad_prepared(params, &params.arch.layout(), &x, target))
}

/// Largest relative difference between the analytic gradient and central
/// finite differences over at least 100 randomly chosen weights (all of them
/// when the model has fewer).
pub fn grad_check(params: &ModelParams, mel: &MelSpectrogram, target: f64, epsilon: f64) -> Result<f64, ModelError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(ModelError::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    params.validate()?;
    let x = prepare_input(&params.arch, mel)?;
    let layout = params.arch.layout();
    let (_, analytic) = loss_grad_prepared(params, &layout, &x, target);
    let mut idx: Vec<usize> = (0..layout.total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);
    idx.shuffle(&mut rng);
    idx.truncate(layout.total.min(100.max(layout.total / 10)));
    let mut probe = params.clone();
    let loss_at = |p: &ModelParams| {
        let y = forward_prepared(p, &x);
        (y - target) * (y - target)
    };
    let mut worst: f64 = 0.0;
    for &i in &idx {
        let orig = probe.weights[i];
        probe.weights[i] = orig + epsilon;
        let plus = loss_at(&probe);
        probe.weights[i] = orig - epsilon;
        let minus = loss_at(&probe);
        probe.weights[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-3, batch_size: 16, epochs: 60, seed: 0, optimizer: Optimizer::Adam }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Parameter(format!("learning rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Parameter("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean training loss per epoch, measured before each batch's update.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

const MIN_FEATURE_STD: f64 = 1e-4;

/// Resets feature normalization to the mean and standard deviation over
/// `inputs`, adjusting the head so every prediction is unchanged. Returns the
/// per-feature ratio old_scale / new_scale.
fn refresh_feature_norm(params: &mut ModelParams, layout: &Layout, inputs: &[(PreparedInput, f64)]) -> Vec<f64> {
    let nf = params.arch.feature_count();
    let raw: Vec<Vec<f64>> = inputs
        .par_iter()
        .map(|(x, _)| {
            let acts = run(params, layout, x);
            acts.features.iter().zip(params.feature_shift.iter().zip(&params.feature_scale)).map(|(z, (m, s))| z / s + m).collect()
        })
        .collect();
    let n = raw.len() as f64;
    let mut ratios = vec![1.0; nf];
    for c in 0..nf {
        let mean = raw.iter().map(|f| f[c]).sum::<f64>() / n;
        let std = (raw.iter().map(|f| (f[c] - mean) * (f[c] - mean)).sum::<f64>() / n).sqrt();
        let (old_m, old_s) = (params.feature_shift[c], params.feature_scale[c]);
        let new_s = 1.0 / std.max(MIN_FEATURE_STD);
        let w = params.weights[layout.head_w + c];
        params.weights[layout.head_b] += w * old_s * (mean - old_m);
        params.weights[layout.head_w + c] = w * old_s / new_s;
        params.feature_shift[c] = mean;
        params.feature_scale[c] = new_s;
        ratios[c] = old_s / new_s;
    }
    ratios
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Minibatch training on squared error against raw targets.
pub fn train(params: ModelParams, dataset: &[(MelSpectrogram, f64)], config: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    params.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::Parameter("empty training set".into()));
    }
    if let Some((mel, t)) = dataset.iter().find(|(_, t)| !(1.0..=10.0).contains(t)) {
        return Err(ModelError::Parameter(format!("target {t} of item {} outside [1, 10]", mel.item_id)));
    }
    let inputs = dataset
        .par_iter()
        .map(|(mel, t)| prepare_input(&params.arch, mel).map(|x| (x, *t)))
        .collect::<Result<Vec<_>, _>>()?;
    train_prepared(params, &inputs, config)
}

fn train_prepared(mut params: ModelParams, inputs: &[(PreparedInput, f64)], config: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    let layout = params.arch.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut adam = Adam { m: vec![0.0; layout.total], v: vec![0.0; layout.total], t: 0 };
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        if params.arch.feature_norm && config.learning_rate > 0.0 && inputs.len() > 1 {
            let ratios = refresh_feature_norm(&mut params, &layout, inputs);
            for (c, r) in ratios.iter().enumerate() {
                adam.m[layout.head_w + c] *= r;
                adam.v[layout.head_w + c] *= r * r;
            }
        }
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; inputs.len()];
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<f64>)> =
                batch.par_iter().map(|&i| loss_grad_prepared(&params, &layout, &inputs[i].0, inputs[i].1)).collect();
            let mut grad = vec![0.0; layout.total];
            for (&i, (loss, g)) in batch.iter().zip(&results) {
                if !loss.is_finite() {
                    return Err(ModelError::NonFinite { epoch, learning_rate: config.learning_rate, loss: *loss });
                }
                losses[i] = *loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let lr = config.learning_rate;
            match config.optimizer {
                Optimizer::Sgd => {
                    for (w, g) in params.weights.iter_mut().zip(&grad) {
                        *w -= lr * g * scale;
                    }
                }
                Optimizer::Adam => {
                    adam.t += 1;
                    let (c1, c2) = (1.0 - b1.powi(adam.t), 1.0 - b2.powi(adam.t));
                    for k in 0..layout.total {
                        let g = grad[k] * scale;
                        adam.m[k] = b1 * adam.m[k] + (1.0 - b1) * g;
                        adam.v[k] = b2 * adam.v[k] + (1.0 - b2) * g * g;
                        params.weights[k] -= lr * (adam.m[k] / c1) / ((adam.v[k] / c2).sqrt() + eps);
                    }
                }
            }
            steps += 1;
            if !params.is_finite() {
                return Err(ModelError::NonFinite { epoch, learning_rate: config.learning_rate, loss: f64::NAN });
            }
        }
        loss_trace.push(losses.iter().sum::<f64>() / inputs.len() as f64);
    }
    Ok(TrainOutcome { params, loss_trace, steps })
}

/// Uniform random spectrogram with values in `[lo, hi)`, for tests and demos.
pub fn random_mel<R: Rng>(rng: &mut R, item_id: &str, frames: usize, n_mels: usize, lo: f32, hi: f32) -> MelSpectrogram {
    let values = (0..frames * n_mels).map(|_| rng.random_range(lo..hi)).collect();
    MelSpectrogram::new(item_id, frames, n_mels, values)
}
