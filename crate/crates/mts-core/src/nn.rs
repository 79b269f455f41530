//! Compact convolutional regressor and from-scratch training loop.
//!
//! Architecture: Conv(3x3, pad 1) -> ReLU -> MaxPool(2) -> Conv(3x3, pad 1)
//! -> ReLU -> MaxPool(2) -> Flatten -> Dense -> ReLU -> Dense(3). Parameters
//! and activations are f32; inner-product and loss reductions accumulate in
//! f64. Training is plain mini-batch SGD with step decay, fully serial so
//! identical seeds reproduce identical weights bit for bit.

use crate::dataset::DatasetSplit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss at epoch {epoch}; aborting instead of saving degraded weights")]
    NonFiniteLoss { epoch: usize },
    #[error("model file unreadable: {0}")]
    Parse(String),
    #[error("model architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major value block with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }
}

/// Layer widths; `Default` is the full-size regressor for 3x32x32 inputs.
/// Two 2x pools fix the dense input at conv2_out * (h/4) * (w/4).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input: (usize, usize, usize),
    pub conv1_out: usize,
    pub conv2_out: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self { input: (3, 32, 32), conv1_out: 8, conv2_out: 16, hidden: 64, output: 3 }
    }
}

impl ModelShape {
    pub fn fc1_in(&self) -> usize {
        let (_, h, w) = self.input;
        self.conv2_out * (h / 4) * (w / 4)
    }

    fn validate(&self) -> Result<(), NnError> {
        let (c, h, w) = self.input;
        if c == 0 || h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
            return Err(NnError::ArchitectureMismatch(format!(
                "input {c}x{h}x{w} must have h, w >= 4 and divisible by 4"
            )));
        }
        if self.conv1_out == 0 || self.conv2_out == 0 || self.hidden == 0 {
            return Err(NnError::ArchitectureMismatch("zero-width layer".into()));
        }
        if self.output != 3 {
            return Err(NnError::ArchitectureMismatch(format!(
                "output dimension must be 3, got {}",
                self.output
            )));
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 8] = [
    "conv1_weight",
    "conv1_bias",
    "conv2_weight",
    "conv2_bias",
    "fc1_weight",
    "fc1_bias",
    "fc2_weight",
    "fc2_bias",
];

#[derive(Clone, Debug)]
pub struct Model {
    pub shape: ModelShape,
    /// Per-channel input statistics applied as (value - mean) / std before
    /// the first layer. Identity (0, 1) on a fresh model; [`train`] sets
    /// them from the training images and they persist through save/load so
    /// inference preprocesses exactly like training.
    pub input_mean: Vec<f32>,
    pub input_std: Vec<f32>,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

/// Uniform draw in [-bound, bound] with bound = sqrt(6 / (fan_in + fan_out)).
fn xavier_fill(rng: &mut ChaCha8Rng, tensor: &mut Tensor, fan_in: usize, fan_out: usize) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in &mut tensor.data {
        let u: f64 = rng.gen();
        *v = ((2.0 * u - 1.0) * bound) as f32;
    }
}

impl Model {
    /// Seeded initialization: weights Xavier-uniform in declaration order,
    /// biases zero. Equal seeds give identical models.
    pub fn new(shape: ModelShape, init_seed: u64) -> Result<Self, NnError> {
        shape.validate()?;
        let (c_in, _, _) = shape.input;
        let mut model = Self {
            shape,
            input_mean: vec![0.0; c_in],
            input_std: vec![1.0; c_in],
            conv1_w: Tensor::zeros(&[shape.conv1_out, c_in, 3, 3]),
            conv1_b: Tensor::zeros(&[shape.conv1_out]),
            conv2_w: Tensor::zeros(&[shape.conv2_out, shape.conv1_out, 3, 3]),
            conv2_b: Tensor::zeros(&[shape.conv2_out]),
            fc1_w: Tensor::zeros(&[shape.hidden, shape.fc1_in()]),
            fc1_b: Tensor::zeros(&[shape.hidden]),
            fc2_w: Tensor::zeros(&[shape.output, shape.hidden]),
            fc2_b: Tensor::zeros(&[shape.output]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        xavier_fill(&mut rng, &mut model.conv1_w, c_in * 9, shape.conv1_out * 9);
        xavier_fill(&mut rng, &mut model.conv2_w, shape.conv1_out * 9, shape.conv2_out * 9);
        xavier_fill(&mut rng, &mut model.fc1_w, shape.fc1_in(), shape.hidden);
        xavier_fill(&mut rng, &mut model.fc2_w, shape.hidden, shape.output);
        Ok(model)
    }

    pub fn param(&self, name: &str) -> &Tensor {
        match name {
            "conv1_weight" => &self.conv1_w,
            "conv1_bias" => &self.conv1_b,
            "conv2_weight" => &self.conv2_w,
            "conv2_bias" => &self.conv2_b,
            "fc1_weight" => &self.fc1_w,
            "fc1_bias" => &self.fc1_b,
            "fc2_weight" => &self.fc2_w,
            "fc2_bias" => &self.fc2_b,
            _ => panic!("unknown parameter {name}"),
        }
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        match name {
            "conv1_weight" => &mut self.conv1_w,
            "conv1_bias" => &mut self.conv1_b,
            "conv2_weight" => &mut self.conv2_w,
            "conv2_bias" => &mut self.conv2_b,
            "fc1_weight" => &mut self.fc1_w,
            "fc1_bias" => &mut self.fc1_b,
            "fc2_weight" => &mut self.fc2_w,
            "fc2_bias" => &mut self.fc2_b,
            _ => panic!("unknown parameter {name}"),
        }
    }

    fn input_len(&self) -> usize {
        let (c, h, w) = self.shape.input;
        c * h * w
    }

    fn check_input(&self, image: &[f32]) -> Result<(), NnError> {
        if image.len() != self.input_len() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} values, model expects {:?}",
                image.len(),
                self.shape.input
            )));
        }
        Ok(())
    }

    /// Regress one image to its 3-component gradient.
    pub fn predict(&self, image: &[f32]) -> Result<[f32; 3], NnError> {
        self.check_input(image)?;
        Ok(self.forward_one(image).out)
    }

    fn forward_one(&self, x: &[f32]) -> Cache {
        let (c_in, h, w) = self.shape.input;
        let s = &self.shape;
        // Apply the stored per-channel normalization; the normalized values
        // are what backpropagation must see, so they go into the cache.
        let plane = h * w;
        let xn: Vec<f32> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                (v - self.input_mean[c]) / self.input_std[c]
            })
            .collect();
        let c1 = conv3x3(&xn, c_in, h, w, &self.conv1_w.data, &self.conv1_b.data, s.conv1_out);
        let r1: Vec<f32> = c1.iter().map(|&v| v.max(0.0)).collect();
        let (p1, idx1) = maxpool2(&r1, s.conv1_out, h, w);
        let (h2, w2) = (h / 2, w / 2);
        let c2 = conv3x3(&p1, s.conv1_out, h2, w2, &self.conv2_w.data, &self.conv2_b.data, s.conv2_out);
        let r2: Vec<f32> = c2.iter().map(|&v| v.max(0.0)).collect();
        let (p2, idx2) = maxpool2(&r2, s.conv2_out, h2, w2);
        let h1 = dense(&p2, &self.fc1_w.data, &self.fc1_b.data, s.hidden);
        let rh1: Vec<f32> = h1.iter().map(|&v| v.max(0.0)).collect();
        let out_v = dense(&rh1, &self.fc2_w.data, &self.fc2_b.data, s.output);
        let mut out = [0.0f32; 3];
        out.copy_from_slice(&out_v);
        Cache { x: xn, c1, p1, idx1, c2, p2, idx2, h1, out }
    }
}

/// Forward activations retained for backpropagation.
struct Cache {
    x: Vec<f32>,
    c1: Vec<f32>,
    p1: Vec<f32>,
    idx1: Vec<u32>,
    c2: Vec<f32>,
    p2: Vec<f32>,
    idx2: Vec<u32>,
    h1: Vec<f32>,
    out: [f32; 3],
}

/// 3x3 same-size convolution, stride 1, zero padding 1. f64 accumulation.
fn conv3x3(
    input: &[f32],
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    out_ch: usize,
) -> Vec<f32> {
    let plane = h * w;
    let mut acc = vec![0.0f64; out_ch * plane];
    for (o, &b) in bias.iter().enumerate() {
        acc[o * plane..(o + 1) * plane].fill(f64::from(b));
    }
    for o in 0..out_ch {
        let out_plane = &mut acc[o * plane..(o + 1) * plane];
        for i in 0..in_ch {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = f64::from(weight[((o * in_ch + i) * 3 + ky) * 3 + kx]);
                    if wv == 0.0 {
                        continue;
                    }
                    // Source row y + ky - 1 and column x + kx - 1 must be in
                    // bounds; everything outside is zero padding.
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1 - ky).min(h);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for y in y_lo..y_hi {
                        let src = (y + ky - 1) * w;
                        let dst = y * w;
                        for x in x_lo..x_hi {
                            out_plane[dst + x] += wv * f64::from(in_plane[src + x + kx - 1]);
                        }
                    }
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Gradients of a 3x3 convolution: accumulates parameter gradients into
/// `dw`/`db` and, when requested, the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f32],
    in_ch: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    out_ch: usize,
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let plane = h * w;
    for o in 0..out_ch {
        let dout_plane = &dout[o * plane..(o + 1) * plane];
        db[o] += dout_plane.iter().sum::<f64>();
        for i in 0..in_ch {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..3usize {
                let y_lo = 1usize.saturating_sub(ky);
                let y_hi = (h + 1 - ky).min(h);
                for kx in 0..3usize {
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    let mut sum = 0.0f64;
                    for y in y_lo..y_hi {
                        let src = (y + ky - 1) * w;
                        let dst = y * w;
                        for x in x_lo..x_hi {
                            sum += dout_plane[dst + x] * f64::from(in_plane[src + x + kx - 1]);
                        }
                    }
                    dw[((o * in_ch + i) * 3 + ky) * 3 + kx] += sum;
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = f64::from(weight[((o * in_ch + i) * 3 + ky) * 3 + kx]);
                        if wv != 0.0 {
                            let dx_plane = &mut dx[i * plane..(i + 1) * plane];
                            for y in y_lo..y_hi {
                                let src = (y + ky - 1) * w;
                                let dst = y * w;
                                for x in x_lo..x_hi {
                                    dx_plane[src + x + kx - 1] += wv * dout_plane[dst + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping 2x2 max pooling; also returns the flat argmax index per
/// cell (first-wins on ties, so results are order-deterministic).
fn maxpool2(input: &[f32], ch: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(ch * oh * ow);
    let mut idx = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let candidates = [
                    (2 * y) * w + 2 * x,
                    (2 * y) * w + 2 * x + 1,
                    (2 * y + 1) * w + 2 * x,
                    (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = candidates[0];
                for &cand in &candidates[1..] {
                    if plane[cand] > plane[best] {
                        best = cand;
                    }
                }
                out.push(plane[best]);
                idx.push((c * h * w + best) as u32);
            }
        }
    }
    (out, idx)
}

/// Fully connected layer, f64 accumulation.
fn dense(input: &[f32], weight: &[f32], bias: &[f32], out_n: usize) -> Vec<f32> {
    let in_n = input.len();
    let mut out = Vec::with_capacity(out_n);
    for j in 0..out_n {
        let row = &weight[j * in_n..(j + 1) * in_n];
        let mut acc = f64::from(bias[j]);
        for (wv, xv) in row.iter().zip(input) {
            acc += f64::from(*wv) * f64::from(*xv);
        }
        out.push(acc as f32);
    }
    out
}

/// Parameter gradients of the batch-mean MSE, f32 (accumulated in f64).
#[derive(Clone, Debug)]
pub struct Gradients {
    tensors: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }
}

/// f64 gradient accumulation buffers, one per parameter tensor.
struct GradAccum {
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: Vec<f64>,
    fc1_w: Vec<f64>,
    fc1_b: Vec<f64>,
    fc2_w: Vec<f64>,
    fc2_b: Vec<f64>,
}

impl GradAccum {
    fn zeros_like(model: &Model) -> Self {
        Self {
            conv1_w: vec![0.0; model.conv1_w.data.len()],
            conv1_b: vec![0.0; model.conv1_b.data.len()],
            conv2_w: vec![0.0; model.conv2_w.data.len()],
            conv2_b: vec![0.0; model.conv2_b.data.len()],
            fc1_w: vec![0.0; model.fc1_w.data.len()],
            fc1_b: vec![0.0; model.fc1_b.data.len()],
            fc2_w: vec![0.0; model.fc2_w.data.len()],
            fc2_b: vec![0.0; model.fc2_b.data.len()],
        }
    }
}

fn backward_one(model: &Model, cache: &Cache, dout: [f64; 3], acc: &mut GradAccum) {
    let s = &model.shape;
    let (c_in, h, w) = s.input;
    let (h2, w2) = (h / 2, w / 2);
    let hidden = s.hidden;
    let fc1_in = s.fc1_in();

    // Dense head.
    let rh1: Vec<f64> = cache.h1.iter().map(|&v| f64::from(v.max(0.0))).collect();
    let mut dh1 = vec![0.0f64; hidden];
    for j in 0..s.output {
        acc.fc2_b[j] += dout[j];
        let row = &model.fc2_w.data[j * hidden..(j + 1) * hidden];
        let grow = &mut acc.fc2_w[j * hidden..(j + 1) * hidden];
        for k in 0..hidden {
            grow[k] += dout[j] * rh1[k];
            dh1[k] += f64::from(row[k]) * dout[j];
        }
    }
    for (k, d) in dh1.iter_mut().enumerate() {
        if cache.h1[k] <= 0.0 {
            *d = 0.0;
        }
    }
    let mut dp2 = vec![0.0f64; fc1_in];
    for k in 0..hidden {
        acc.fc1_b[k] += dh1[k];
        if dh1[k] == 0.0 {
            continue;
        }
        let row = &model.fc1_w.data[k * fc1_in..(k + 1) * fc1_in];
        let grow = &mut acc.fc1_w[k * fc1_in..(k + 1) * fc1_in];
        for i in 0..fc1_in {
            grow[i] += dh1[k] * f64::from(cache.p2[i]);
            dp2[i] += f64::from(row[i]) * dh1[k];
        }
    }

    // Unpool 2 and ReLU mask back onto conv2 pre-activations.
    let mut dc2 = vec![0.0f64; s.conv2_out * h2 * w2];
    for (cell, &src) in cache.idx2.iter().enumerate() {
        if cache.c2[src as usize] > 0.0 {
            dc2[src as usize] += dp2[cell];
        }
    }
    let mut dp1 = vec![0.0f64; s.conv1_out * h2 * w2];
    conv3x3_backward(
        &cache.p1,
        s.conv1_out,
        h2,
        w2,
        &model.conv2_w.data,
        s.conv2_out,
        &dc2,
        &mut acc.conv2_w,
        &mut acc.conv2_b,
        Some(&mut dp1),
    );

    // Unpool 1 and ReLU mask back onto conv1 pre-activations.
    let mut dc1 = vec![0.0f64; s.conv1_out * h * w];
    for (cell, &src) in cache.idx1.iter().enumerate() {
        if cache.c1[src as usize] > 0.0 {
            dc1[src as usize] += dp1[cell];
        }
    }
    conv3x3_backward(
        &cache.x,
        c_in,
        h,
        w,
        &model.conv1_w.data,
        s.conv1_out,
        &dc1,
        &mut acc.conv1_w,
        &mut acc.conv1_b,
        None,
    );
}

/// Forward a batch; output order matches input order.
pub fn forward(model: &Model, images: &[&[f32]]) -> Result<Vec<[f32; 3]>, NnError> {
    images
        .iter()
        .map(|x| {
            model.check_input(x)?;
            Ok(model.forward_one(x).out)
        })
        .collect()
}

/// Mean squared error over batch and output components, f64 accumulation.
pub fn mse_loss(predictions: &[[f32; 3]], targets: &[[f32; 3]]) -> Result<f64, NnError> {
    if predictions.len() != targets.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(NnError::ShapeMismatch("empty batch".into()));
    }
    let mut sum = 0.0f64;
    for (p, t) in predictions.iter().zip(targets) {
        for j in 0..3 {
            let d = f64::from(p[j]) - f64::from(t[j]);
            sum += d * d;
        }
    }
    Ok(sum / (predictions.len() as f64 * 3.0))
}

fn batch_gradients(
    model: &Model,
    images: &[&[f32]],
    targets: &[[f32; 3]],
) -> Result<(GradAccum, [f64; 3]), NnError> {
    if images.len() != targets.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} images vs {} targets",
            images.len(),
            targets.len()
        )));
    }
    if images.is_empty() {
        return Err(NnError::ShapeMismatch("empty batch".into()));
    }
    let norm = 1.0 / (images.len() as f64 * 3.0);
    let mut acc = GradAccum::zeros_like(model);
    let mut sse = [0.0f64; 3];
    for (x, t) in images.iter().zip(targets) {
        model.check_input(x)?;
        let cache = model.forward_one(x);
        let mut dout = [0.0f64; 3];
        for j in 0..3 {
            let d = f64::from(cache.out[j]) - f64::from(t[j]);
            sse[j] += d * d;
            dout[j] = 2.0 * d * norm;
        }
        backward_one(model, &cache, dout, &mut acc);
    }
    Ok((acc, sse))
}

/// Exact analytic gradients of [`mse_loss`] over the batch with respect to
/// every parameter tensor.
pub fn backward(model: &Model, images: &[&[f32]], targets: &[[f32; 3]]) -> Result<Gradients, NnError> {
    let (acc, _sse) = batch_gradients(model, images, targets)?;
    let mk = |shape: &Tensor, data: &[f64]| Tensor {
        shape: shape.shape.clone(),
        data: data.iter().map(|&v| v as f32).collect(),
    };
    let mut tensors = BTreeMap::new();
    tensors.insert("conv1_weight".into(), mk(&model.conv1_w, &acc.conv1_w));
    tensors.insert("conv1_bias".into(), mk(&model.conv1_b, &acc.conv1_b));
    tensors.insert("conv2_weight".into(), mk(&model.conv2_w, &acc.conv2_w));
    tensors.insert("conv2_bias".into(), mk(&model.conv2_b, &acc.conv2_b));
    tensors.insert("fc1_weight".into(), mk(&model.fc1_w, &acc.fc1_w));
    tensors.insert("fc1_bias".into(), mk(&model.fc1_b, &acc.fc1_b));
    tensors.insert("fc2_weight".into(), mk(&model.fc2_w, &acc.fc2_w));
    tensors.insert("fc2_bias".into(), mk(&model.fc2_b, &acc.fc2_b));
    Ok(Gradients { tensors })
}

fn sgd_update(model: &mut Model, acc: &GradAccum, lr: f64) {
    let apply = |param: &mut Tensor, grad: &[f64]| {
        for (p, g) in param.data.iter_mut().zip(grad) {
            *p -= (lr * g) as f32;
        }
    };
    apply(&mut model.conv1_w, &acc.conv1_w);
    apply(&mut model.conv1_b, &acc.conv1_b);
    apply(&mut model.conv2_w, &acc.conv2_w);
    apply(&mut model.conv2_b, &acc.conv2_b);
    apply(&mut model.fc1_w, &acc.fc1_w);
    apply(&mut model.fc1_b, &acc.fc1_b);
    apply(&mut model.fc2_w, &acc.fc2_w);
    apply(&mut model.fc2_b, &acc.fc2_b);
}

/// Training hyperparameters. The learning rate is multiplied by
/// `decay_factor` every `decay_every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub shuffle_seed: u64,
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            decay_factor: 0.01,
            decay_every: 25,
            shuffle_seed: 1,
            init_seed: 2,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), NnError> {
        if self.epochs < 1 || self.batch_size < 1 || self.decay_every < 1 {
            return Err(NnError::ShapeMismatch(
                "epochs, batch_size, and decay_every must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_factor > 0.0) {
            return Err(NnError::ShapeMismatch(
                "learning_rate and decay_factor must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

fn dataset_sse(
    model: &Model,
    samples: &[crate::dataset::Sample],
    targets: &[[f32; 3]],
    batch_size: usize,
) -> Result<[f64; 3], NnError> {
    let mut sse = [0.0f64; 3];
    for (chunk, chunk_t) in samples.chunks(batch_size).zip(targets.chunks(batch_size)) {
        let images: Vec<&[f32]> = chunk.iter().map(|s| s.image.data.as_slice()).collect();
        let preds = forward(model, &images)?;
        for (p, t) in preds.iter().zip(chunk_t) {
            for j in 0..3 {
                let d = f64::from(p[j]) - f64::from(t[j]);
                sse[j] += d * d;
            }
        }
    }
    Ok(sse)
}

/// Standardized-space squared-error sums converted to a raw-unit MSE. The
/// conversion is exact: standardization is affine, so the raw-unit error is
/// the standardized error times the component's scale.
fn raw_mse(sse: &[f64; 3], scale: &[f64; 3], n: usize) -> f64 {
    sse.iter().zip(scale).map(|(&s, &k)| s * k * k).sum::<f64>() / (n as f64 * 3.0)
}

/// Per-channel mean and standard deviation over all training image pixels.
/// The deviation is floored at 1e-6 so constant channels (the renders carry
/// an all-zero blue plane) standardize to zero instead of dividing by zero.
fn image_stats(samples: &[crate::dataset::Sample], input: (usize, usize, usize)) -> (Vec<f32>, Vec<f32>) {
    let (c_in, h, w) = input;
    let plane = h * w;
    let count = (samples.len() * plane) as f64;
    let mut mean = vec![0.0f64; c_in];
    for s in samples {
        for (c, m) in mean.iter_mut().enumerate() {
            for &v in &s.image.data[c * plane..(c + 1) * plane] {
                *m += f64::from(v);
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0f64; c_in];
    for s in samples {
        for (c, acc) in var.iter_mut().enumerate() {
            for &v in &s.image.data[c * plane..(c + 1) * plane] {
                let d = f64::from(v) - mean[c];
                *acc += d * d;
            }
        }
    }
    let std = var.iter().map(|&v| ((v / count).sqrt().max(1e-6)) as f32).collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

/// Per-component mean and standard deviation of the training targets. The
/// deviation is floored at 1e-6 so constant components standardize to zero
/// instead of dividing by zero.
fn target_stats(samples: &[crate::dataset::Sample]) -> ([f64; 3], [f64; 3]) {
    let n = samples.len() as f64;
    let mut mean = [0.0f64; 3];
    for s in samples {
        for c in 0..3 {
            mean[c] += f64::from(s.target[c]);
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = [0.0f64; 3];
    for s in samples {
        for c in 0..3 {
            let d = f64::from(s.target[c]) - mean[c];
            var[c] += d * d;
        }
    }
    let scale = std::array::from_fn(|c| (var[c] / n).sqrt().max(1e-6));
    (mean, scale)
}

/// Mini-batch SGD over the training split. Per epoch: seeded shuffle,
/// sequential batches (final partial batch kept), then a no-update pass over
/// the validation split. The reported train MSE is the sample-weighted mean
/// of the minibatch losses seen during the epoch.
///
/// Two normalizations frame the optimization. Inputs are standardized per
/// channel with statistics from the training images, stored on the model so
/// inference preprocesses identically. Targets are standardized per
/// component (zero mean, unit deviation over the training split) for the
/// duration of training, so all three gradient components carry equal
/// weight in the loss; otherwise the large always-positive forward
/// component dominates and the small lateral components — the avoidance
/// signal — are barely fitted. The inverse target affine is folded into
/// the output layer before returning, so the trained model predicts
/// raw-unit targets; loss curves are likewise reported in raw target units
/// (standardized errors rescaled back, which is exact because the
/// standardization is affine).
pub fn train(
    mut model: Model,
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<(Model, Vec<EpochLoss>), NnError> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(NnError::EmptyTrainingSet);
    }
    for s in split.train.iter().chain(&split.validation) {
        model.check_input(&s.image.data)?;
    }
    let (px_mean, px_std) = image_stats(&split.train, model.shape.input);
    model.input_mean = px_mean;
    model.input_std = px_std;
    let (t_mean, t_scale) = target_stats(&split.train);
    let standardize = |t: [f32; 3]| -> [f32; 3] {
        std::array::from_fn(|c| ((f64::from(t[c]) - t_mean[c]) / t_scale[c]) as f32)
    };
    let train_targets: Vec<[f32; 3]> = split.train.iter().map(|s| standardize(s.target)).collect();
    let val_targets: Vec<[f32; 3]> = split.validation.iter().map(|s| standardize(s.target)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut curves = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = config.learning_rate * config.decay_factor.powi(((epoch - 1) / config.decay_every) as i32);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut sse_sum = [0.0f64; 3];
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<&[f32]> = chunk.iter().map(|&i| split.train[i].image.data.as_slice()).collect();
            let targets: Vec<[f32; 3]> = chunk.iter().map(|&i| train_targets[i]).collect();
            let (acc, sse) = batch_gradients(&model, &images, &targets)?;
            sgd_update(&mut model, &acc, lr);
            for (total, part) in sse_sum.iter_mut().zip(sse) {
                *total += part;
            }
        }
        let train_mse = raw_mse(&sse_sum, &t_scale, split.train.len());
        let val_mse = if split.validation.is_empty() {
            None
        } else {
            let sse = dataset_sse(&model, &split.validation, &val_targets, config.batch_size)?;
            Some(raw_mse(&sse, &t_scale, split.validation.len()))
        };
        if !train_mse.is_finite() || val_mse.is_some_and(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteLoss { epoch });
        }
        curves.push(EpochLoss { epoch, train_mse, val_mse });
    }
    // Fold the de-standardization into the final linear layer: the network
    // learned y_std = W h + b, and y = y_std * scale + mean is again linear
    // in h, so the returned model predicts raw-unit targets directly.
    let hidden = model.shape.hidden;
    for c in 0..model.shape.output {
        for w in &mut model.fc2_w.data[c * hidden..(c + 1) * hidden] {
            *w = (f64::from(*w) * t_scale[c]) as f32;
        }
        model.fc2_b.data[c] = (f64::from(model.fc2_b.data[c]) * t_scale[c] + t_mean[c]) as f32;
    }
    Ok((model, curves))
}

/// Loss curves as CSV: epoch, train_mse, val_mse (blank when no validation
/// split exists).
pub fn write_loss_csv(curves: &[EpochLoss], path: &Path) -> Result<(), NnError> {
    let mut out = String::from("epoch,train_mse,val_mse\n");
    for c in curves {
        match c.val_mse {
            Some(v) => writeln!(out, "{},{},{}", c.epoch, c.train_mse, v).unwrap(),
            None => writeln!(out, "{},{},", c.epoch, c.train_mse).unwrap(),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub const MODEL_FORMAT: &str = "mts-model";
pub const MODEL_VERSION: u32 = 1;

/// Format an f32 with 9 significant digits — lossless for 32-bit values, so
/// a JSON round trip reproduces predictions bit-exactly.
fn fmt_f32(v: f32) -> String {
    format!("{v:.8e}")
}

/// Model JSON: architecture descriptors, parameter tensors, and a
/// caller-provided metadata block (training config, seeds, provenance).
pub fn save_model(model: &Model, path: &Path, metadata: &serde_json::Value) -> Result<(), NnError> {
    let mut s = String::new();
    s.push_str("{\n");
    let _ = writeln!(s, "  \"format\": \"{MODEL_FORMAT}\",");
    let _ = writeln!(s, "  \"version\": {MODEL_VERSION},");
    let arch = serde_json::to_string(&model.shape).expect("shape serializes");
    let _ = writeln!(s, "  \"architecture\": {arch},");
    let mean: Vec<String> = model.input_mean.iter().map(|&v| fmt_f32(v)).collect();
    let std: Vec<String> = model.input_std.iter().map(|&v| fmt_f32(v)).collect();
    let _ = writeln!(
        s,
        "  \"input_normalization\": {{\"mean\": [{}], \"std\": [{}]}},",
        mean.join(", "),
        std.join(", ")
    );
    s.push_str("  \"params\": {\n");
    for (i, name) in PARAM_NAMES.iter().enumerate() {
        let t = model.param(name);
        let shape = serde_json::to_string(&t.shape).expect("shape serializes");
        let data: Vec<String> = t.data.iter().map(|&v| fmt_f32(v)).collect();
        let _ = write!(s, "    \"{name}\": {{\"shape\": {shape}, \"data\": [{}]}}", data.join(", "));
        s.push_str(if i + 1 < PARAM_NAMES.len() { ",\n" } else { "\n" });
    }
    s.push_str("  },\n");
    let meta = serde_json::to_string(metadata).expect("metadata serializes");
    let _ = writeln!(s, "  \"metadata\": {meta}");
    s.push_str("}\n");
    let mut file = std::fs::File::create(path)?;
    file.write_all(s.as_bytes())?;
    Ok(())
}

#[derive(Deserialize)]
struct TensorJson {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct NormalizationJson {
    mean: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Deserialize)]
struct ModelFileJson {
    format: String,
    version: u32,
    architecture: ModelShape,
    input_normalization: NormalizationJson,
    params: BTreeMap<String, TensorJson>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Load a model written by [`save_model`], returning it with its metadata.
pub fn load_model(path: &Path) -> Result<(Model, serde_json::Value), NnError> {
    let bytes = std::fs::read(path)?;
    let file: ModelFileJson = serde_json::from_slice(&bytes).map_err(|e| NnError::Parse(e.to_string()))?;
    if file.format != MODEL_FORMAT {
        return Err(NnError::Parse(format!("unexpected format field {:?}", file.format)));
    }
    if file.version != MODEL_VERSION {
        return Err(NnError::Parse(format!("unsupported model version {}", file.version)));
    }
    file.architecture.validate()?;
    let mut model = Model::new(file.architecture, 0)?;
    let c_in = model.shape.input.0;
    let norm = &file.input_normalization;
    if norm.mean.len() != c_in || norm.std.len() != c_in {
        return Err(NnError::ArchitectureMismatch(format!(
            "input normalization carries {}/{} channel statistics, expected {c_in}",
            norm.mean.len(),
            norm.std.len()
        )));
    }
    if norm.std.iter().any(|&v| !(v > 0.0)) {
        return Err(NnError::ArchitectureMismatch(
            "input normalization std values must be positive".into(),
        ));
    }
    model.input_mean = norm.mean.iter().map(|&v| v as f32).collect();
    model.input_std = norm.std.iter().map(|&v| v as f32).collect();
    for name in PARAM_NAMES {
        let loaded = file
            .params
            .get(name)
            .ok_or_else(|| NnError::ArchitectureMismatch(format!("missing parameter {name}")))?;
        let target = model.param_mut(name);
        if loaded.shape != target.shape {
            return Err(NnError::ArchitectureMismatch(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                loaded.shape, target.shape
            )));
        }
        if loaded.data.len() != target.data.len() {
            return Err(NnError::ArchitectureMismatch(format!(
                "parameter {name} has {} values, expected {}",
                loaded.data.len(),
                target.data.len()
            )));
        }
        for (dst, &src) in target.data.iter_mut().zip(&loaded.data) {
            *dst = src as f32;
        }
    }
    Ok((model, file.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::render::ColorImage;

    fn small_shape() -> ModelShape {
        ModelShape { input: (3, 8, 8), conv1_out: 4, conv2_out: 8, hidden: 32, output: 3 }
    }

    fn random_image(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
        (0..len).map(|_| rng.gen::<f32>()).collect()
    }

    fn zeroed(mut model: Model) -> Model {
        for name in PARAM_NAMES {
            model.param_mut(name).data.fill(0.0);
        }
        model
    }

    #[test]
    fn identity_kernel_convolution_is_identity() {
        let input: Vec<f32> = (0..16).map(|i| i as f32 * 0.5 - 3.0).collect();
        let mut weight = vec![0.0f32; 9];
        weight[4] = 1.0; // center tap
        let out = conv3x3(&input, 1, 4, 4, &weight, &[0.0], 1);
        assert_eq!(out, input);
    }

    #[test]
    fn relu_and_pool_semantics() {
        assert_eq!((-1.0f32).max(0.0), 0.0);
        assert_eq!(2.5f32.max(0.0), 2.5);
        let plane = vec![1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (out, idx) = maxpool2(&plane, 1, 4, 4);
        assert_eq!(out, vec![4.0, 4.0, 0.0, 0.0]);
        // Ties keep the first candidate in scan order.
        assert_eq!(idx[0], 4);
        assert_eq!(idx[1], 3);
        assert_eq!(idx[2], 8);
    }

    #[test]
    fn zero_model_predicts_zero() {
        let model = zeroed(Model::new(small_shape(), 1).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 3 * 8 * 8);
        assert_eq!(model.predict(&x).unwrap(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn init_is_seeded_bounded_xavier() {
        let a = Model::new(small_shape(), 7).unwrap();
        let b = Model::new(small_shape(), 7).unwrap();
        let c = Model::new(small_shape(), 8).unwrap();
        assert_eq!(a.conv1_w, b.conv1_w);
        assert_eq!(a.fc2_w, b.fc2_w);
        assert_ne!(a.conv1_w, c.conv1_w);
        assert!(a.conv1_b.data.iter().all(|&v| v == 0.0));
        let bound = (6.0f64 / ((3 * 9 + 4 * 9) as f64)).sqrt() as f32;
        assert!(a.conv1_w.data.iter().all(|&v| v.abs() <= bound));
        assert!(a.conv1_w.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[[1.0, 2.0, 3.0]], &[[1.0, 2.0, 3.0]]).unwrap(), 0.0);
        let l = mse_loss(&[[1.0, 0.0, 0.0]], &[[0.0, 0.0, 0.0]]).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
        assert!(mse_loss(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn model_rejects_wrong_input_shape() {
        let model = Model::new(small_shape(), 1).unwrap();
        assert!(matches!(model.predict(&[0.0; 10]), Err(NnError::ShapeMismatch(_))));
        assert!(Model::new(ModelShape { output: 4, ..small_shape() }, 1).is_err());
        assert!(Model::new(ModelShape { input: (3, 6, 6), ..small_shape() }, 1).is_err());
    }

    #[test]
    fn duplicated_batch_leaves_gradients_unchanged() {
        let model = Model::new(small_shape(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_image(&mut rng, 3 * 8 * 8);
        let t = [[0.5f32, -1.0, 2.0]];
        let single = backward(&model, &[&x], &t).unwrap();
        let double = backward(&model, &[&x, &x], &[t[0], t[0]]).unwrap();
        for name in PARAM_NAMES {
            assert_eq!(single.get(name).data, double.get(name).data, "{name}");
        }
    }

    #[test]
    fn zero_loss_means_zero_final_bias_gradient() {
        let model = zeroed(Model::new(small_shape(), 1).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 3 * 8 * 8);
        // Zero model predicts zero; zero targets give zero loss.
        let grads = backward(&model, &[&x], &[[0.0; 3]]).unwrap();
        assert!(grads.get("fc2_bias").data.iter().all(|&v| v == 0.0));
    }

    /// Every parameter, central differences at h = 1e-3 on the 32-bit
    /// forward path. Relative error uses a 0.02 denominator floor so
    /// near-zero gradients are judged against the 32-bit noise scale rather
    /// than dividing by zero. The seeds are chosen so no ReLU pre-activation
    /// or pool argmax flips inside the probe interval; with them fixed, the
    /// sweep is fully deterministic.
    #[test]
    fn gradients_match_central_differences_on_reduced_net() {
        let mut model = Model::new(small_shape(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs: Vec<Vec<f32>> = (0..2).map(|_| random_image(&mut rng, 3 * 8 * 8)).collect();
        let images: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
        let targets = [[1.5f32, -2.0, 0.7], [-0.9, 1.1, 2.2]];
        let analytic = backward(&model, &images, &targets).unwrap();
        let h = 1e-3f32;
        let mut checked = 0usize;
        for name in PARAM_NAMES {
            let n = model.param(name).data.len();
            for i in 0..n {
                let orig = model.param(name).data[i];
                model.param_mut(name).data[i] = orig + h;
                let lp = mse_loss(&forward(&model, &images).unwrap(), &targets).unwrap();
                model.param_mut(name).data[i] = orig - h;
                let lm = mse_loss(&forward(&model, &images).unwrap(), &targets).unwrap();
                model.param_mut(name).data[i] = orig;
                let fd = (lp - lm) / (2.0 * f64::from(h));
                let a = f64::from(analytic.get(name).data[i]);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(0.02);
                assert!(rel < 1e-3, "{name}[{i}]: analytic {a} vs finite-difference {fd} (rel {rel:.2e})");
                checked += 1;
            }
        }
        assert_eq!(checked, 1563, "expected to sweep the full reduced net");
    }

    fn linear_task(n: usize) -> DatasetSplit {
        // Targets are a fixed linear map of the mean pixel intensity, so the
        // task is solvable by construction.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mk = |rng: &mut ChaCha8Rng, id: u32| {
            let v: f32 = rng.gen();
            Sample {
                image: ColorImage { width: 8, height: 8, data: vec![v; 3 * 64] },
                target: [2.0 * v - 1.0, 0.5 * v, -v],
                trajectory_id: id,
                step_index: 0,
            }
        };
        let train: Vec<Sample> = (0..n as u32).map(|i| mk(&mut rng, i)).collect();
        let validation: Vec<Sample> = (0..(n / 4) as u32).map(|i| mk(&mut rng, 1000 + i)).collect();
        DatasetSplit { train, validation, split_seed: 0 }
    }

    #[test]
    fn training_learns_a_linear_task() {
        let split = linear_task(64);
        let config = TrainConfig {
            epochs: 120,
            batch_size: 8,
            learning_rate: 2e-2,
            decay_factor: 0.1,
            decay_every: 80,
            shuffle_seed: 4,
            init_seed: 5,
        };
        let model = Model::new(small_shape(), config.init_seed).unwrap();
        let (trained, curves) = train(model, &split, &config).unwrap();
        assert_eq!(curves.len(), 120);
        let first = curves.first().unwrap().train_mse;
        let last = curves.last().unwrap().train_mse;
        assert!(last < 0.1 * first, "train MSE {first} -> {last}");
        assert!(curves.iter().all(|c| c.val_mse.is_some()));
        // Spot-check a prediction.
        let s = &split.validation[0];
        let p = trained.predict(&s.image.data).unwrap();
        let err: f32 = (0..3).map(|j| (p[j] - s.target[j]).abs()).fold(0.0, f32::max);
        assert!(err < 0.35, "worst component error {err}");
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty() {
        let split = linear_task(24);
        let config = TrainConfig { epochs: 3, batch_size: 8, ..TrainConfig::default() };
        let m1 = Model::new(small_shape(), config.init_seed).unwrap();
        let m2 = Model::new(small_shape(), config.init_seed).unwrap();
        let (t1, c1) = train(m1, &split, &config).unwrap();
        let (t2, c2) = train(m2, &split, &config).unwrap();
        assert_eq!(c1, c2);
        for name in PARAM_NAMES {
            assert_eq!(t1.param(name).data, t2.param(name).data);
        }
        let empty = DatasetSplit { train: vec![], validation: vec![], split_seed: 0 };
        assert!(matches!(train(t1, &empty, &config), Err(NnError::EmptyTrainingSet)));
    }

    #[test]
    fn save_load_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = Model::new(small_shape(), 21).unwrap();
        model.input_mean = vec![0.125, 0.25, 0.0];
        model.input_std = vec![0.5, 1.25, 1.0];
        save_model(&model, &path, &serde_json::json!({"note": "probe"})).unwrap();
        let (loaded, meta) = load_model(&path).unwrap();
        assert_eq!(meta["note"], "probe");
        assert_eq!(model.input_mean, loaded.input_mean);
        assert_eq!(model.input_std, loaded.input_std);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..5 {
            let x = random_image(&mut rng, 3 * 8 * 8);
            assert_eq!(model.predict(&x).unwrap(), loaded.predict(&x).unwrap());
        }
        for name in PARAM_NAMES {
            assert_eq!(model.param(name).data, loaded.param(name).data, "{name}");
        }
        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.json");
        save_model(&loaded, &path2, &serde_json::json!({"note": "probe"})).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn input_normalization_matches_manual_preprocessing() {
        let raw = Model::new(small_shape(), 9).unwrap();
        let mut normed = raw.clone();
        normed.input_mean = vec![0.2, 0.5, 0.1];
        normed.input_std = vec![0.8, 1.5, 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..4 {
            let x = random_image(&mut rng, 3 * 8 * 8);
            let manual: Vec<f32> = x
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = i / 64;
                    (v - normed.input_mean[c]) / normed.input_std[c]
                })
                .collect();
            assert_eq!(normed.predict(&x).unwrap(), raw.predict(&manual).unwrap());
        }
    }

    #[test]
    fn trained_model_predicts_in_raw_target_units() {
        // Constant targets standardize to zero (deviation floored), so the
        // folded output affine must restore the constants exactly no matter
        // where optimization left the network head.
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let train_set: Vec<Sample> = (0..16u32)
            .map(|i| Sample {
                image: ColorImage { width: 8, height: 8, data: random_image(&mut rng, 3 * 64) },
                target: [0.25, -1.5, 3.0],
                trajectory_id: i,
                step_index: 0,
            })
            .collect();
        let split = DatasetSplit { train: train_set, validation: vec![], split_seed: 0 };
        let config = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let model = Model::new(small_shape(), 6).unwrap();
        let (trained, curves) = train(model, &split, &config).unwrap();
        assert_eq!(curves.len(), 2);
        let p = trained.predict(&split.train[0].image.data).unwrap();
        for (a, b) in p.iter().zip([0.25f32, -1.5, 3.0]) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        // Training images vary, so the stored input statistics are real.
        assert!(trained.input_std.iter().any(|&s| (s - 1.0).abs() > 1e-3));
        assert!(trained.input_mean.iter().any(|&m| m.abs() > 1e-3));
    }

    #[test]
    fn malformed_model_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = Model::new(small_shape(), 21).unwrap();
        save_model(&model, &path, &serde_json::Value::Null).unwrap();
        let good = std::fs::read_to_string(&path).unwrap();

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(NnError::Parse(_))));

        let bad_output = good.replace("\"output\":3", "\"output\":4");
        assert_ne!(bad_output, good);
        std::fs::write(&path, bad_output).unwrap();
        assert!(matches!(load_model(&path), Err(NnError::ArchitectureMismatch(_))));

        let bad_shape = good.replace("\"conv1_weight\": {\"shape\": [4,3,3,3]", "\"conv1_weight\": {\"shape\": [4,3,3]");
        assert_ne!(bad_shape, good);
        std::fs::write(&path, bad_shape).unwrap();
        assert!(matches!(load_model(&path), Err(NnError::ArchitectureMismatch(_))));

        let missing_norm = good.replace("\"input_normalization\"", "\"input_norm\"");
        assert_ne!(missing_norm, good);
        std::fs::write(&path, missing_norm).unwrap();
        assert!(matches!(load_model(&path), Err(NnError::Parse(_))));

        let bad_std = good.replace(
            "\"std\": [1.00000000e0, 1.00000000e0, 1.00000000e0]",
            "\"std\": [1.00000000e0, 0.00000000e0, 1.00000000e0]",
        );
        assert_ne!(bad_std, good);
        std::fs::write(&path, bad_std).unwrap();
        assert!(matches!(load_model(&path), Err(NnError::ArchitectureMismatch(_))));
    }
}
