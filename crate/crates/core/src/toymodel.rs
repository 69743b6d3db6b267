//! A desk-scale masked-prediction network.
//!
//! Frames are standardised, masked frames are replaced by a learned mask
//! embedding, and each frame's input is the concatenation of its `2c + 1`
//! neighbouring frames (zero outside the utterance) plus the mean of the
//! utterance's unmasked frames. A stack of tanh layers and a linear output
//! layer produce per-frame log-probabilities over the codebook. The loss is
//! the mean cross-entropy over masked frames only, optimised with Adam under
//! a linear warmup.
//!
//! All parameters live in one flat vector:
//! `[mask_embedding | W_1 | b_1 | ... | W_out | b_out]`, weights row-major
//! `in x out`.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::labels::ByteReader;
use crate::masking::MaskSpec;
use crate::seed::derived_rng;
use crate::{Error, Result};

/// Full-scale optimiser settings, kept for reference. Desk runs use the
/// much shorter defaults of [`ToyModelConfig`].
pub const REFERENCE_PEAK_LEARNING_RATE: f64 = 5e-4;
pub const REFERENCE_WARMUP_STEPS: u64 = 32_000;

pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
/// Networks above this size are checked on a seeded subset of coordinates.
pub const GRAD_CHECK_FULL_LIMIT: usize = 10_000;
const GRAD_CHECK_SUBSET: usize = 3_000;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// Neighbouring frames seen on each side.
    pub context: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            input_dim: crate::labels::FEATURE_DIM,
            hidden_dims: vec![256, 256],
            num_classes: crate::labels::DEFAULT_K,
            context: 2,
            learning_rate: 1e-3,
            warmup_steps: 100,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig(
                "input_dim and num_classes must be positive".into(),
            ));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(
                "hidden_dims must be non-empty with positive widths".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Width of the first layer's input.
    pub fn encoder_input_dim(&self) -> usize {
        (2 * self.context + 2) * self.input_dim
    }

    /// `(in, out)` for every layer including the output layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.encoder_input_dim()];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.input_dim
            + self
                .layer_shapes()
                .iter()
                .map(|(i, o)| i * o + o)
                .sum::<usize>()
    }

    /// Learning rate at 1-based optimiser step `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone)]
struct Layout {
    input_dim: usize,
    context: usize,
    /// `(weight offset, bias offset, in, out)`
    layers: Vec<(usize, usize, usize, usize)>,
}

impl Layout {
    fn new(cfg: &ToyModelConfig) -> Self {
        let mut off = cfg.input_dim;
        let layers = cfg
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| {
                let w = off;
                let b = w + i * o;
                off = b + o;
                (w, b, i, o)
            })
            .collect();
        Layout {
            input_dim: cfg.input_dim,
            context: cfg.context,
            layers,
        }
    }

    fn weight<'p>(&self, params: &'p [f64], l: usize) -> ArrayView2<'p, f64> {
        let (w, _, i, o) = self.layers[l];
        ArrayView2::from_shape((i, o), &params[w..w + i * o]).expect("layout matches params")
    }

    fn bias<'p>(&self, params: &'p [f64], l: usize) -> ArrayView1<'p, f64> {
        let (_, b, _, o) = self.layers[l];
        ArrayView1::from(&params[b..b + o])
    }
}

/// One utterance as the model sees it.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [u32],
    pub mask: &'a MaskSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelState {
    pub config: ToyModelConfig,
    pub params: Vec<f64>,
    /// Per-dimension standardisation applied before anything else.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub step: u64,
}

impl ToyModelState {
    /// Xavier-uniform weights, zero biases, uniform mask embedding.
    pub fn init(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = derived_rng(config.seed, &[&"toymodel-init"]);
        let mut params = vec![0.0; config.num_params()];
        for p in &mut params[..config.input_dim] {
            *p = rng.random_range(-1.0..1.0);
        }
        for &(w, _, i, o) in &layout.layers {
            let a = (6.0 / (i + o) as f64).sqrt();
            for p in &mut params[w..w + i * o] {
                *p = rng.random_range(-a..a);
            }
        }
        Ok(ToyModelState {
            input_mean: vec![0.0; config.input_dim],
            input_std: vec![1.0; config.input_dim],
            config,
            params,
            step: 0,
        })
    }

    /// Sets the standardisation from pooled training frames.
    pub fn fit_input_normalization(&mut self, frames: ArrayView2<f64>) -> Result<()> {
        if frames.ncols() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                found: frames.ncols(),
            });
        }
        if frames.nrows() == 0 {
            return Ok(());
        }
        let mean = frames.mean_axis(Axis(0)).expect("non-empty");
        let std = frames.std_axis(Axis(0), 0.0);
        self.input_mean = mean.to_vec();
        self.input_std = std.iter().map(|&s| if s > 1e-8 { s } else { 1.0 }).collect();
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn max_abs_param(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.abs()))
    }

    fn check_sample(&self, s: &Sample<'_>) -> Result<()> {
        check_inputs(&self.config, s.features, s.mask)?;
        if s.labels.len() != s.features.nrows() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: s.features.nrows(),
                found: s.labels.len(),
            });
        }
        if let Some(&bad) = s.labels.iter().find(|&&l| l as usize >= self.config.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                k: self.config.num_classes,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut buf = Vec::with_capacity(64 + 8 * (self.params.len() + 2 * c.input_dim));
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for v in [c.input_dim, c.num_classes, c.context, c.hidden_dims.len()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &h in &c.hidden_dims {
            buf.extend_from_slice(&(h as u32).to_le_bytes());
        }
        buf.extend_from_slice(&c.learning_rate.to_le_bytes());
        buf.extend_from_slice(&c.warmup_steps.to_le_bytes());
        buf.extend_from_slice(&c.seed.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self
            .input_mean
            .iter()
            .chain(&self.input_std)
            .chain(&self.params)
        {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Format("bad model magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let input_dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let context = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let hidden_dims = (0..layers)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let learning_rate = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let warmup_steps = r.u64()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let n = r.u64()? as usize;
        let config = ToyModelConfig {
            input_dim,
            hidden_dims,
            num_classes,
            context,
            learning_rate,
            warmup_steps,
            seed,
        };
        config.validate()?;
        if n != config.num_params() {
            return Err(Error::Format(format!(
                "model declares {n} parameters, architecture needs {}",
                config.num_params()
            )));
        }
        let input_mean = r.f64s(input_dim)?;
        let input_std = r.f64s(input_dim)?;
        let params = r.f64s(n)?;
        r.finish()?;
        Ok(ToyModelState {
            config,
            params,
            input_mean,
            input_std,
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"SFTM";
const MODEL_VERSION: u32 = 1;

fn check_inputs(cfg: &ToyModelConfig, features: ArrayView2<f64>, mask: &MaskSpec) -> Result<()> {
    if features.ncols() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.input_dim,
            found: features.ncols(),
        });
    }
    if mask.num_frames != features.nrows() {
        return Err(Error::LengthMismatch {
            what: "mask",
            expected: features.nrows(),
            found: mask.num_frames,
        });
    }
    Ok(())
}

/// Encoder inputs for the requested rows of one utterance.
fn encoder_inputs(
    layout: &Layout,
    params: &[f64],
    mean: &[f64],
    std: &[f64],
    features: ArrayView2<f64>,
    mask: &MaskSpec,
    rows: &[usize],
) -> Array2<f64> {
    let d = layout.input_dim;
    let c = layout.context;
    let t = features.nrows();
    let flags = mask.to_flags();
    let emb = &params[..d];

    let mut normed = Array2::zeros((t, d));
    for (mut out, row) in normed.rows_mut().into_iter().zip(features.rows()) {
        for j in 0..d {
            out[j] = (row[j] - mean[j]) / std[j];
        }
    }
    let mut global = Array1::zeros(d);
    let unmasked = flags.iter().filter(|m| !**m).count();
    if unmasked > 0 {
        for (i, row) in normed.rows().into_iter().enumerate() {
            if !flags[i] {
                global += &row;
            }
        }
        global /= unmasked as f64;
    }

    let width = (2 * c + 2) * d;
    let mut z = Array2::zeros((rows.len(), width));
    for (r, &frame) in rows.iter().enumerate() {
        for k in 0..=2 * c {
            let Some(src) = (frame + k).checked_sub(c).filter(|&s| s < t) else {
                continue;
            };
            let mut block = z.slice_mut(s![r, k * d..(k + 1) * d]);
            if flags[src] {
                block.assign(&ArrayView1::from(emb));
            } else {
                block.assign(&normed.row(src));
            }
        }
        z.slice_mut(s![r, (2 * c + 1) * d..]).assign(&global);
    }
    z
}

/// Layer activations: `acts[0]` is the encoder input, `acts[l]` the output of
/// hidden layer `l`; the final entry holds log-probabilities.
fn run_layers(layout: &Layout, params: &[f64], z: Array2<f64>) -> Vec<Array2<f64>> {
    let n = layout.layers.len();
    let mut acts = Vec::with_capacity(n + 1);
    acts.push(z);
    for l in 0..n {
        let mut pre = acts[l].dot(&layout.weight(params, l));
        pre += &layout.bias(params, l);
        if l + 1 < n {
            pre.mapv_inplace(f64::tanh);
        } else {
            log_softmax_rows(&mut pre);
        }
        acts.push(pre);
    }
    acts
}

fn log_softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

/// Per-frame log-probabilities `T x K`.
pub fn forward(state: &ToyModelState, features: ArrayView2<f64>, mask: &MaskSpec) -> Result<Array2<f64>> {
    check_inputs(&state.config, features, mask)?;
    let layout = Layout::new(&state.config);
    let rows: Vec<usize> = (0..features.nrows()).collect();
    let z = encoder_inputs(
        &layout,
        &state.params,
        &state.input_mean,
        &state.input_std,
        features,
        mask,
        &rows,
    );
    Ok(run_layers(&layout, &state.params, z).pop().expect("at least one layer"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub masked_frames: usize,
    /// Set when no frame was masked; `value` is then 0.
    pub empty_mask: bool,
}

/// Mean negative log-probability of the true label over masked frames.
pub fn loss(logp: ArrayView2<f64>, labels: &[u32], mask: &MaskSpec) -> Result<LossValue> {
    if labels.len() != logp.nrows() || mask.num_frames != logp.nrows() {
        return Err(Error::LengthMismatch {
            what: "labels/mask",
            expected: logp.nrows(),
            found: if labels.len() != logp.nrows() {
                labels.len()
            } else {
                mask.num_frames
            },
        });
    }
    let k = logp.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::LabelOutOfRange { label: bad, k });
    }
    if mask.is_empty() {
        return Ok(LossValue {
            value: 0.0,
            masked_frames: 0,
            empty_mask: true,
        });
    }
    let total: f64 = mask
        .masked()
        .iter()
        .map(|&t| -logp[[t, labels[t] as usize]])
        .sum();
    Ok(LossValue {
        value: total / mask.num_masked() as f64,
        masked_frames: mask.num_masked(),
        empty_mask: false,
    })
}

struct MaskedForward {
    acts: Vec<Array2<f64>>,
    targets: Vec<usize>,
    /// `(sample index, frame)` for every row of the activations.
    origin: Vec<(usize, usize)>,
}

fn masked_forward(
    layout: &Layout,
    params: &[f64],
    state: &ToyModelState,
    samples: &[Sample<'_>],
) -> MaskedForward {
    let mut blocks = Vec::with_capacity(samples.len());
    let mut targets = Vec::new();
    let mut origin = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        let rows = s.mask.masked();
        blocks.push(encoder_inputs(
            layout,
            params,
            &state.input_mean,
            &state.input_std,
            s.features,
            s.mask,
            rows,
        ));
        targets.extend(rows.iter().map(|&t| s.labels[t] as usize));
        origin.extend(rows.iter().map(|&t| (si, t)));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let z = if views.is_empty() {
        Array2::zeros((0, layout.layers[0].2))
    } else {
        ndarray::concatenate(Axis(0), &views).expect("blocks share width")
    };
    MaskedForward {
        acts: run_layers(layout, params, z),
        targets,
        origin,
    }
}

fn masked_loss(fwd: &MaskedForward) -> f64 {
    let logp = fwd.acts.last().expect("output layer");
    if fwd.targets.is_empty() {
        return 0.0;
    }
    let total: f64 = fwd
        .targets
        .iter()
        .enumerate()
        .map(|(r, &y)| -logp[[r, y]])
        .sum();
    total / fwd.targets.len() as f64
}

/// Loss over the masked frames of all samples, and its gradient with
/// respect to every parameter.
fn loss_and_grad(
    state: &ToyModelState,
    params: &[f64],
    samples: &[Sample<'_>],
) -> (f64, Vec<f64>, MaskedForward) {
    let layout = Layout::new(&state.config);
    let fwd = masked_forward(&layout, params, state, samples);
    let mut grad = vec![0.0; params.len()];
    let m = fwd.targets.len();
    let loss = masked_loss(&fwd);
    if m == 0 {
        return (loss, grad, fwd);
    }

    let n = layout.layers.len();
    // d loss / d logits = softmax - onehot, averaged over masked rows
    let mut delta = fwd.acts[n].mapv(f64::exp);
    for (r, &y) in fwd.targets.iter().enumerate() {
        delta[[r, y]] -= 1.0;
    }
    delta /= m as f64;

    for l in (0..n).rev() {
        let (w, b, i, o) = layout.layers[l];
        let input = &fwd.acts[l];
        let dw = input.t().dot(&delta);
        grad[w..w + i * o].copy_from_slice(dw.as_slice().expect("standard layout"));
        let db = delta.sum_axis(Axis(0));
        grad[b..b + o].copy_from_slice(db.as_slice().expect("standard layout"));
        let mut back = delta.dot(&layout.weight(params, l).t());
        if l > 0 {
            // through tanh: h' = 1 - h^2
            ndarray::Zip::from(&mut back)
                .and(input)
                .for_each(|g, &h| *g *= 1.0 - h * h);
        }
        delta = back;
    }

    // `delta` is now d loss / d encoder input; route the context blocks that
    // hold the mask embedding back onto it.
    let d = layout.input_dim;
    let c = layout.context;
    let flags: Vec<Vec<bool>> = samples.iter().map(|s| s.mask.to_flags()).collect();
    for (r, &(si, frame)) in fwd.origin.iter().enumerate() {
        let t = flags[si].len();
        for k in 0..=2 * c {
            let Some(src) = (frame + k).checked_sub(c).filter(|&s| s < t) else {
                continue;
            };
            if flags[si][src] {
                for j in 0..d {
                    grad[j] += delta[[r, k * d + j]];
                }
            }
        }
    }
    (loss, grad, fwd)
}

/// Adam moments; reset at each stage boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Adam {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            steps: 0,
        }
    }

    pub fn for_state(state: &ToyModelState) -> Self {
        Self::new(state.params.len())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub accuracy: f64,
    pub masked_frames: usize,
    pub learning_rate: f64,
}

/// One Adam step on the masked-frame loss of `samples`.
pub fn train_step(state: &mut ToyModelState, opt: &mut Adam, samples: &[Sample<'_>]) -> Result<StepReport> {
    if !state.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            loss: f64::NAN,
            max_abs_param: state.max_abs_param(),
        });
    }
    for s in samples {
        state.check_sample(s)?;
    }
    if opt.m.len() != state.params.len() {
        return Err(Error::DimensionMismatch {
            expected: state.params.len(),
            found: opt.m.len(),
        });
    }
    let (loss, grad, fwd) = loss_and_grad(state, &state.params, samples);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            loss,
            max_abs_param: state.max_abs_param(),
        });
    }
    let m = fwd.targets.len();
    state.step += 1;
    if m == 0 {
        return Ok(StepReport {
            loss: 0.0,
            accuracy: 0.0,
            masked_frames: 0,
            learning_rate: 0.0,
        });
    }
    let logp = fwd.acts.last().expect("output layer");
    let correct = fwd
        .targets
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(logp.row(*r)) == y)
        .count();

    opt.steps += 1;
    let lr = state.config.learning_rate_at(opt.steps);
    let bc1 = 1.0 - ADAM_BETA1.powi(opt.steps as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(opt.steps as i32);
    for (i, g) in grad.iter().enumerate() {
        opt.m[i] = ADAM_BETA1 * opt.m[i] + (1.0 - ADAM_BETA1) * g;
        opt.v[i] = ADAM_BETA2 * opt.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let update = lr * (opt.m[i] / bc1) / ((opt.v[i] / bc2).sqrt() + ADAM_EPS);
        state.params[i] -= update;
    }
    if !state.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            loss,
            max_abs_param: state.max_abs_param(),
        });
    }
    Ok(StepReport {
        loss,
        accuracy: correct as f64 / m as f64,
        masked_frames: m,
        learning_rate: lr,
    })
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Masked-frame accuracy without updating anything.
pub fn masked_accuracy(state: &ToyModelState, samples: &[Sample<'_>]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples {
        state.check_sample(s)?;
        let logp = forward(state, s.features, s.mask)?;
        for &t in s.mask.masked() {
            total += 1;
            if argmax(logp.row(t)) == s.labels[t] as usize {
                correct += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Largest [`relative_error`] between `analytic[i]` and the central
/// difference of `objective` at `params[i]`, over `indices`.
pub fn finite_difference_check<F>(
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    mut objective: F,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = work[i];
        work[i] = orig + h;
        let plus = objective(&work);
        work[i] = orig - h;
        let minus = objective(&work);
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Coordinates checked by [`grad_check`]: all of them for small networks,
/// otherwise the mask embedding, every bias, and a seeded sample of weights.
pub fn grad_check_indices(config: &ToyModelConfig) -> Vec<usize> {
    let n = config.num_params();
    if n <= GRAD_CHECK_FULL_LIMIT {
        return (0..n).collect();
    }
    let layout = Layout::new(config);
    let mut picked: Vec<usize> = (0..config.input_dim).collect();
    let mut weights = Vec::new();
    for &(w, b, i, o) in &layout.layers {
        picked.extend(b..b + o);
        weights.push((w, i * o));
    }
    let mut rng = derived_rng(config.seed, &[&"grad-check"]);
    let total_w: usize = weights.iter().map(|(_, len)| len).sum();
    let budget = GRAD_CHECK_SUBSET.saturating_sub(picked.len()).max(weights.len());
    for &(w, len) in &weights {
        let share = (budget * len).div_ceil(total_w).max(1);
        picked.extend((0..share).map(|_| w + rng.random_range(0..len)));
    }
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Max relative error of the analytic gradient against central finite
/// differences with step [`GRAD_CHECK_STEP`].
pub fn grad_check(state: &ToyModelState, samples: &[Sample<'_>]) -> Result<f64> {
    for s in samples {
        state.check_sample(s)?;
    }
    let (_, analytic, _) = loss_and_grad(state, &state.params, samples);
    let layout = Layout::new(&state.config);
    let indices = grad_check_indices(&state.config);
    Ok(finite_difference_check(
        &state.params,
        &analytic,
        &indices,
        GRAD_CHECK_STEP,
        |p| masked_loss(&masked_forward(&layout, p, state, samples)),
    ))
}
