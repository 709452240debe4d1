//! Multinomial logistic regression over 28x28 images, trained with local SGD.
//!
//! Parameter layout: the 784x10 weight matrix flattened row-major (pixel
//! major, so weight `(p, c)` sits at `p * 10 + c`), followed by the 10 class
//! biases. Coordinate selection works on this flat order.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::SimRng;

pub const IMAGE_PIXELS: usize = 28 * 28;
pub const NUM_CLASSES: usize = 10;
pub const WEIGHT_COUNT: usize = IMAGE_PIXELS * NUM_CLASSES;
pub const PARAM_DIM: usize = WEIGHT_COUNT + NUM_CLASSES;

const EVAL_CHUNK: usize = 512;

/// Map from raw pixel bytes to model features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PixelScaling {
    /// `byte / 255`, features in [0, 1].
    Unit,
    /// `byte / 127.5 - 1`, features in [-1, 1].
    #[default]
    Symmetric,
    /// `(byte / 255 - 0.1307) / 0.3081`, the usual MNIST mean/std standardization.
    Standardized,
}

impl PixelScaling {
    pub const ALL: [PixelScaling; 3] = [
        PixelScaling::Unit,
        PixelScaling::Symmetric,
        PixelScaling::Standardized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PixelScaling::Unit => "unit",
            PixelScaling::Symmetric => "symmetric",
            PixelScaling::Standardized => "standardized",
        }
    }

    pub fn apply(self, byte: u8) -> f64 {
        let unit = f64::from(byte) / 255.0;
        match self {
            PixelScaling::Unit => unit,
            PixelScaling::Symmetric => f64::from(byte) / 127.5 - 1.0,
            PixelScaling::Standardized => (unit - 0.1307) / 0.3081,
        }
    }

    fn table(self) -> [f64; 256] {
        let mut t = [0.0; 256];
        for (b, v) in t.iter_mut().enumerate() {
            *v = self.apply(b as u8);
        }
        t
    }
}

impl std::str::FromStr for PixelScaling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        PixelScaling::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("expected one of unit, symmetric, standardized; got `{s}`"))
    }
}

/// Labelled images held as raw bytes; features are produced on the fly by
/// the dataset's [`PixelScaling`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    scaling: PixelScaling,
}

impl ClientDataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, scaling: PixelScaling) -> Result<Self> {
        if pixels.len() != labels.len() * IMAGE_PIXELS {
            return Err(Error::DimensionMismatch {
                context: "dataset pixels",
                expected: labels.len() * IMAGE_PIXELS,
                found: pixels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= NUM_CLASSES) {
            return Err(Error::invalid("label", format!("{bad} is not a digit class")));
        }
        Ok(Self {
            pixels,
            labels,
            scaling,
        })
    }

    pub fn empty(scaling: PixelScaling) -> Self {
        Self {
            pixels: Vec::new(),
            labels: Vec::new(),
            scaling,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn scaling(&self) -> PixelScaling {
        self.scaling
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    /// Scaled feature vector of sample `i`.
    pub fn features(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&b| self.scaling.apply(b)).collect()
    }

    /// New dataset holding the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            pixels,
            labels,
            scaling: self.scaling,
        }
    }

    /// Concatenation of several datasets sharing one scaling.
    pub fn concat(parts: &[ClientDataset]) -> Self {
        let scaling = parts.first().map(|p| p.scaling).unwrap_or_default();
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            pixels.extend_from_slice(&p.pixels);
            labels.extend_from_slice(&p.labels);
        }
        Self {
            pixels,
            labels,
            scaling,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    theta: Vec<f64>,
}

impl GlobalModel {
    pub fn zeros() -> Self {
        Self {
            theta: vec![0.0; PARAM_DIM],
        }
    }

    pub fn from_params(theta: Vec<f64>) -> Result<Self> {
        if theta.len() != PARAM_DIM {
            return Err(Error::DimensionMismatch {
                context: "model parameters",
                expected: PARAM_DIM,
                found: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "model parameters",
            });
        }
        Ok(Self { theta })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    /// `theta += delta`. The model is left untouched if the result would
    /// contain a non-finite entry.
    pub fn apply_update(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                context: "model update",
                expected: self.theta.len(),
                found: delta.len(),
            });
        }
        if self.theta.iter().zip(delta).any(|(t, d)| !(t + d).is_finite()) {
            return Err(Error::NonFinite {
                context: "model update",
            });
        }
        for (t, d) in self.theta.iter_mut().zip(delta) {
            *t += d;
        }
        Ok(())
    }
}

impl Default for GlobalModel {
    fn default() -> Self {
        Self::zeros()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub delta: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSchedule {
    pub eta: f64,
    pub tau: usize,
    pub batch_size: usize,
    pub rounds: usize,
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::invalid("eta", format!("must be > 0, got {}", self.eta)));
        }
        if self.tau == 0 {
            return Err(Error::invalid("tau", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

fn logits(theta: &[f64], x: &[f64]) -> [f64; NUM_CLASSES] {
    let mut z = [0.0; NUM_CLASSES];
    z.copy_from_slice(&theta[WEIGHT_COUNT..]);
    for (p, &xp) in x.iter().enumerate() {
        if xp != 0.0 {
            let row = &theta[p * NUM_CLASSES..(p + 1) * NUM_CLASSES];
            for (zc, w) in z.iter_mut().zip(row) {
                *zc += xp * w;
            }
        }
    }
    z
}

/// Softmax probabilities (in place) and the log-sum-exp of the logits.
fn softmax(z: &mut [f64; NUM_CLASSES]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

fn argmax(z: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if z[c] > z[best] {
            best = c;
        }
    }
    best
}

/// Cross-entropy loss of one sample.
pub fn sample_loss(theta: &[f64], x: &[f64], label: u8) -> f64 {
    let mut z = logits(theta, x);
    let y = z[usize::from(label)];
    softmax(&mut z) - y
}

/// Adds `weight * grad f(theta; x, label)` into `grad` and returns the loss.
pub fn accumulate_sample_gradient(
    theta: &[f64],
    x: &[f64],
    label: u8,
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    let mut p = logits(theta, x);
    let y = usize::from(label);
    let zy = p[y];
    let loss = softmax(&mut p) - zy;
    p[y] -= 1.0;
    for v in p.iter_mut() {
        *v *= weight;
    }
    for (xp, row) in x.iter().zip(grad[..WEIGHT_COUNT].chunks_exact_mut(NUM_CLASSES)) {
        if *xp != 0.0 {
            for (g, pc) in row.iter_mut().zip(&p) {
                *g += xp * pc;
            }
        }
    }
    for (g, pc) in grad[WEIGHT_COUNT..].iter_mut().zip(&p) {
        *g += pc;
    }
    loss
}

/// Mean cross-entropy gradient over the listed samples. Returns (gradient, mean loss).
pub fn batch_gradient(theta: &[f64], data: &ClientDataset, batch: &[usize]) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let table = data.scaling.table();
    let weight = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut x = [0.0; IMAGE_PIXELS];
    let mut loss = 0.0;
    for &i in batch {
        for (xp, &b) in x.iter_mut().zip(data.image(i)) {
            *xp = table[usize::from(b)];
        }
        loss += accumulate_sample_gradient(theta, &x, data.label(i), weight, &mut grad);
    }
    Ok((grad, loss * weight))
}

/// Mini-batches drawn without replacement from a shuffled epoch; the order
/// is reshuffled whenever fewer than a full batch remains.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, rng: &mut SimRng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self {
            order,
            cursor: 0,
            batch: batch.min(n),
        }
    }

    fn next(&mut self, rng: &mut SimRng) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..self.cursor]
    }
}

/// Runs `tau` mini-batch SGD steps from `model` and returns the parameter
/// change. `rng` must be the client's own stream for the round.
pub fn local_sgd(
    model: &GlobalModel,
    data: &ClientDataset,
    sched: &TrainingSchedule,
    client_id: usize,
    rng: &mut SimRng,
) -> Result<LocalUpdate> {
    local_sgd_traced(model, data, sched, client_id, rng).map(|(u, _)| u)
}

/// [`local_sgd`], also returning the largest squared mini-batch gradient norm
/// seen over the `tau` steps.
pub fn local_sgd_traced(
    model: &GlobalModel,
    data: &ClientDataset,
    sched: &TrainingSchedule,
    client_id: usize,
    rng: &mut SimRng,
) -> Result<(LocalUpdate, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    sched.validate()?;
    let mut theta = model.theta.clone();
    let mut sampler = BatchSampler::new(data.len(), sched.batch_size, rng);
    let mut max_norm_sq = 0.0f64;
    for step in 0..sched.tau {
        let batch = sampler.next(rng);
        let (grad, _) = batch_gradient(&theta, data, batch)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step });
        }
        max_norm_sq = max_norm_sq.max(grad.iter().map(|g| g * g).sum());
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= sched.eta * g;
        }
    }
    let delta = theta.iter().zip(&model.theta).map(|(new, old)| new - old).collect();
    Ok((LocalUpdate { client_id, delta }, max_norm_sq))
}

/// Mean cross-entropy and argmax accuracy (ties go to the lowest class).
pub fn evaluate(model: &GlobalModel, data: &ClientDataset, exec: Execution) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let table = data.scaling.table();
    let theta = model.params();
    let chunks = data.len().div_ceil(EVAL_CHUNK);
    let partial = exec.map(chunks, |c| {
        let mut x = [0.0; IMAGE_PIXELS];
        let mut loss = 0.0;
        let mut correct = 0usize;
        for i in c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(data.len()) {
            for (xp, &b) in x.iter_mut().zip(data.image(i)) {
                *xp = table[usize::from(b)];
            }
            let mut z = logits(theta, &x);
            let y = usize::from(data.label(i));
            if argmax(&z) == y {
                correct += 1;
            }
            let zy = z[y];
            loss += softmax(&mut z) - zy;
        }
        (loss, correct)
    });
    let (loss, correct) = partial
        .into_iter()
        .fold((0.0, 0usize), |(l, c), (pl, pc)| (l + pl, c + pc));
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Element-wise mean of equal-length vectors, summed in list order.
pub(crate) fn mean_of<'a, I>(vectors: I, context: &'static str) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next().ok_or_else(|| Error::invalid("updates", "need at least one"))?;
    let mut sum = first.to_vec();
    let mut count = 1usize;
    for v in iter {
        if v.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                context,
                expected: sum.len(),
                found: v.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        count += 1;
    }
    let m = count as f64;
    for s in &mut sum {
        *s /= m;
    }
    Ok(sum)
}

/// Unweighted average of the client updates.
pub fn fedavg_aggregate(updates: &[LocalUpdate]) -> Result<Vec<f64>> {
    mean_of(updates.iter().map(|u| u.delta.as_slice()), "fedavg updates")
}
