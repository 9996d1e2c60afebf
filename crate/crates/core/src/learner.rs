//! Small differentiable classifiers with explicit gradients, plain SGD with
//! weight decay, weight copying for population search, and the blind
//! temporal-coherence baseline.
//!
//! Two architectures are supported: a softmax-linear model and a one-hidden-
//! layer ReLU MLP. Gradients are analytic (softmax minus one-hot at the
//! output, chain rule through ReLU with subgradient 0 at 0), and cross-entropy
//! is computed through a max-shifted log-sum-exp so saturated logits stay
//! finite.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{OclError, Result};

/// Model family. Parameter counts: softmax-linear `(D+1)*C`,
/// one-hidden-layer MLP `(D+1)*h + (h+1)*C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    SoftmaxLinear,
    Mlp1 { hidden: usize },
}

impl Architecture {
    pub fn param_count(&self, input_dim: usize, num_classes: usize) -> usize {
        match *self {
            Architecture::SoftmaxLinear => (input_dim + 1) * num_classes,
            Architecture::Mlp1 { hidden } => (input_dim + 1) * hidden + (hidden + 1) * num_classes,
        }
    }
}

/// Outcome of one SGD step: the mean cross-entropy and the argmax predictions
/// from the training forward pass (computed before the parameter update).
#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub predictions: Vec<usize>,
}

/// A classifier with a flat parameter vector.
///
/// `init_seed` is the 64-bit state that seeded initialization; it is
/// deliberately excluded from both `copy_weights_from` and checkpoints, so
/// population members keep their identities after weight copies.
#[derive(Debug, Clone)]
pub struct Learner {
    arch: Architecture,
    input_dim: usize,
    num_classes: usize,
    weight_decay: f64,
    params: Vec<f64>,
    init_seed: u64,
}

impl Learner {
    /// Builds a learner with uniform(-a, a) initialization per layer, where
    /// `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn new(
        arch: Architecture,
        input_dim: usize,
        num_classes: usize,
        weight_decay: f64,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(OclError::config("input_dim and num_classes must be >= 1"));
        }
        if let Architecture::Mlp1 { hidden } = arch {
            if hidden == 0 {
                return Err(OclError::config("mlp hidden width must be >= 1"));
            }
        }
        if !(weight_decay >= 0.0) {
            return Err(OclError::config("weight_decay must be >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.param_count(input_dim, num_classes));
        match arch {
            Architecture::SoftmaxLinear => {
                init_layer(&mut params, &mut rng, input_dim, num_classes);
            }
            Architecture::Mlp1 { hidden } => {
                init_layer(&mut params, &mut rng, input_dim, hidden);
                init_layer(&mut params, &mut rng, hidden, num_classes);
            }
        }
        Ok(Learner {
            arch,
            input_dim,
            num_classes,
            weight_decay,
            params,
            init_seed: seed,
        })
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Logits and argmax labels for a batch of feature rows.
    ///
    /// Pure in the parameters; ties resolve to the lowest class index.
    pub fn predict_batch(&self, rows: &[&[f64]]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut logits = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for row in rows {
            let z = self.forward(row)?;
            labels.push(argmax(&z));
            logits.push(z);
        }
        Ok((logits, labels))
    }

    /// Mean cross-entropy of the batch under the current parameters
    /// (regularization excluded).
    pub fn loss(&self, rows: &[&[f64]], labels: &[usize]) -> Result<f64> {
        self.check_batch(rows, labels)?;
        let mut total = 0.0;
        for (row, &label) in rows.iter().zip(labels) {
            let z = self.forward(row)?;
            total += cross_entropy(&z, label);
        }
        Ok(total / rows.len() as f64)
    }

    /// Analytic gradient of the mean cross-entropy (no weight decay term).
    pub fn gradient(&self, rows: &[&[f64]], labels: &[usize]) -> Result<Vec<f64>> {
        Ok(self.gradient_with_stats(rows, labels)?.0)
    }

    /// One SGD step with decoupled-from-nothing, classic L2 decay:
    /// `theta <- theta - lr * (grad + weight_decay * theta)`.
    ///
    /// Biases decay together with weights. Returns the loss and predictions
    /// of the forward pass that produced the gradient.
    pub fn sgd_step(&mut self, rows: &[&[f64]], labels: &[usize], lr: f64) -> Result<StepStats> {
        if !(lr >= 0.0) {
            return Err(OclError::config(format!("learning rate {lr} must be >= 0")));
        }
        let (grad, stats) = self.gradient_with_stats(rows, labels)?;
        if !stats.loss.is_finite() {
            return Err(OclError::numerical(format!(
                "non-finite training loss {}",
                stats.loss
            )));
        }
        for (p, g) in self.params.iter_mut().zip(&grad) {
            *p -= lr * (g + self.weight_decay * *p);
        }
        Ok(stats)
    }

    /// Copies parameters from `src`; RNG streams stay distinct.
    pub fn copy_weights_from(&mut self, src: &Learner) -> Result<()> {
        if self.arch != src.arch
            || self.input_dim != src.input_dim
            || self.num_classes != src.num_classes
        {
            return Err(OclError::config("copy_weights requires identical architectures"));
        }
        self.params.copy_from_slice(&src.params);
        Ok(())
    }

    fn check_batch(&self, rows: &[&[f64]], labels: &[usize]) -> Result<()> {
        if rows.is_empty() {
            return Err(OclError::shape("empty batch"));
        }
        if rows.len() != labels.len() {
            return Err(OclError::shape(format!(
                "{} feature rows vs {} labels",
                rows.len(),
                labels.len()
            )));
        }
        for row in rows {
            if row.len() != self.input_dim {
                return Err(OclError::shape(format!(
                    "feature row of length {} against input_dim {}",
                    row.len(),
                    self.input_dim
                )));
            }
        }
        for &label in labels {
            if label >= self.num_classes {
                return Err(OclError::shape(format!(
                    "label {label} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    fn forward(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.input_dim {
            return Err(OclError::shape(format!(
                "feature row of length {} against input_dim {}",
                row.len(),
                self.input_dim
            )));
        }
        match self.arch {
            Architecture::SoftmaxLinear => {
                let (w, b) = self.linear_layer(0, self.input_dim, self.num_classes);
                Ok(affine(w, b, row, self.num_classes, self.input_dim))
            }
            Architecture::Mlp1 { hidden } => {
                let (w1, b1) = self.linear_layer(0, self.input_dim, hidden);
                let pre = affine(w1, b1, row, hidden, self.input_dim);
                let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                let off = (self.input_dim + 1) * hidden;
                let (w2, b2) = self.linear_layer(off, hidden, self.num_classes);
                Ok(affine(w2, b2, &act, self.num_classes, hidden))
            }
        }
    }

    fn linear_layer(&self, offset: usize, fan_in: usize, fan_out: usize) -> (&[f64], &[f64]) {
        let w_end = offset + fan_in * fan_out;
        (&self.params[offset..w_end], &self.params[w_end..w_end + fan_out])
    }

    fn gradient_with_stats(&self, rows: &[&[f64]], labels: &[usize]) -> Result<(Vec<f64>, StepStats)> {
        self.check_batch(rows, labels)?;
        let n = rows.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut total_loss = 0.0;
        let mut predictions = Vec::with_capacity(rows.len());

        match self.arch {
            Architecture::SoftmaxLinear => {
                let d = self.input_dim;
                let c = self.num_classes;
                for (row, &label) in rows.iter().zip(labels) {
                    let z = self.forward(row)?;
                    predictions.push(argmax(&z));
                    total_loss += cross_entropy(&z, label);
                    let mut dz = softmax(&z);
                    dz[label] -= 1.0;
                    for (k, &dzk) in dz.iter().enumerate() {
                        let scaled = dzk / n;
                        let w_row = k * d;
                        for (j, &x) in row.iter().enumerate() {
                            grad[w_row + j] += scaled * x;
                        }
                        grad[c * d + k] += scaled;
                    }
                }
            }
            Architecture::Mlp1 { hidden } => {
                let d = self.input_dim;
                let h = hidden;
                let c = self.num_classes;
                let w1_len = h * d;
                let layer1_len = w1_len + h;
                let w2_off = layer1_len;
                let w2_len = c * h;
                let b2_off = w2_off + w2_len;
                let (w2, _) = self.linear_layer(w2_off, h, c);
                for (row, &label) in rows.iter().zip(labels) {
                    let (w1, b1) = self.linear_layer(0, d, h);
                    let pre = affine(w1, b1, row, h, d);
                    let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                    let (w2s, b2s) = self.linear_layer(w2_off, h, c);
                    let z = affine(w2s, b2s, &act, c, h);
                    predictions.push(argmax(&z));
                    total_loss += cross_entropy(&z, label);
                    let mut dz = softmax(&z);
                    dz[label] -= 1.0;
                    // Output layer.
                    for (k, &dzk) in dz.iter().enumerate() {
                        let scaled = dzk / n;
                        let w_row = w2_off + k * h;
                        for (j, &a) in act.iter().enumerate() {
                            grad[w_row + j] += scaled * a;
                        }
                        grad[b2_off + k] += scaled;
                    }
                    // Backprop into the hidden layer; ReLU subgradient at 0 is 0.
                    for j in 0..h {
                        if pre[j] <= 0.0 {
                            continue;
                        }
                        let mut da = 0.0;
                        for (k, &dzk) in dz.iter().enumerate() {
                            da += w2[k * h + j] * dzk;
                        }
                        let scaled = da / n;
                        let w_row = j * d;
                        for (i, &x) in row.iter().enumerate() {
                            grad[w_row + i] += scaled * x;
                        }
                        grad[w1_len + j] += scaled;
                    }
                }
            }
        }

        let loss = total_loss / n;
        Ok((grad, StepStats { loss, predictions }))
    }

    /// Writes the checkpoint format: a header followed by one parameter per
    /// line with 17 significant digits (exact f64 round-trip).
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "oclckpt 1")?;
        let arch = match self.arch {
            Architecture::SoftmaxLinear => "linear".to_string(),
            Architecture::Mlp1 { hidden } => format!("mlp {hidden}"),
        };
        writeln!(w, "arch = {arch}")?;
        writeln!(w, "input_dim = {}", self.input_dim)?;
        writeln!(w, "classes = {}", self.num_classes)?;
        writeln!(w, "weight_decay = {:.16e}", self.weight_decay)?;
        writeln!(w, "params = {}", self.params.len())?;
        for p in &self.params {
            writeln!(w, "{p:.16e}")?;
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`Learner::write_checkpoint`]. The
    /// restored learner carries a fresh RNG stream.
    pub fn read_checkpoint(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| OclError::integrity(format!("checkpoint truncated before {what}")))
        };
        if next("magic")?.trim() != "oclckpt 1" {
            return Err(OclError::integrity("bad checkpoint magic"));
        }
        let arch_line = next("arch")?;
        let arch_val = header_value(&arch_line, "arch")?;
        let arch = match arch_val.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["linear"] => Architecture::SoftmaxLinear,
            ["mlp", h] => Architecture::Mlp1 {
                hidden: h
                    .parse()
                    .map_err(|_| OclError::integrity("bad mlp hidden width"))?,
            },
            _ => return Err(OclError::integrity(format!("unknown arch '{arch_val}'"))),
        };
        let input_dim: usize = header_value(&next("input_dim")?, "input_dim")?
            .parse()
            .map_err(|_| OclError::integrity("bad input_dim"))?;
        let num_classes: usize = header_value(&next("classes")?, "classes")?
            .parse()
            .map_err(|_| OclError::integrity("bad classes"))?;
        let weight_decay: f64 = header_value(&next("weight_decay")?, "weight_decay")?
            .parse()
            .map_err(|_| OclError::integrity("bad weight_decay"))?;
        let count: usize = header_value(&next("params")?, "params")?
            .parse()
            .map_err(|_| OclError::integrity("bad param count"))?;
        if count != arch.param_count(input_dim, num_classes) {
            return Err(OclError::integrity(format!(
                "param count {count} does not match architecture"
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next("parameter")?;
            params.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|_| OclError::integrity(format!("bad parameter '{line}'")))?,
            );
        }
        Ok(Learner {
            arch,
            input_dim,
            num_classes,
            weight_decay,
            params,
            init_seed: 0,
        })
    }
}

fn header_value<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| OclError::integrity(format!("expected '{key} = ...', got '{line}'")))?;
    if k.trim() != key {
        return Err(OclError::integrity(format!(
            "expected header key '{key}', got '{}'",
            k.trim()
        )));
    }
    Ok(v.trim())
}

fn init_layer(params: &mut Vec<f64>, rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for _ in 0..(fan_in + 1) * fan_out {
        params.push(rng.random_range(-bound..bound));
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut acc = b[r];
        let row = &w[r * cols..(r + 1) * cols];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        out.push(acc);
    }
    out
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(z: &[f64], label: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// The blind classifier: predicts the modal label of the last `k` observed
/// labels, ignoring features entirely.
#[derive(Debug, Clone)]
pub struct BlindState {
    window: VecDeque<usize>,
    k: usize,
}

impl BlindState {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(OclError::config("blind window size must be >= 1"));
        }
        Ok(BlindState {
            window: VecDeque::with_capacity(k),
            k,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Modal label of the window; ties go to the most recently seen label,
    /// and an empty window predicts 0.
    pub fn predict(&self) -> usize {
        if self.window.is_empty() {
            return 0;
        }
        let mut stats: HashMap<usize, (usize, usize)> = HashMap::new();
        for (pos, &label) in self.window.iter().enumerate() {
            let entry = stats.entry(label).or_insert((0, 0));
            entry.0 += 1;
            entry.1 = pos;
        }
        let mut best_label = 0;
        let mut best = (0usize, 0usize);
        for (&label, &key) in &stats {
            if key > best {
                best = key;
                best_label = label;
            }
        }
        best_label
    }

    /// Appends an observed label, evicting the oldest beyond `k`.
    pub fn update(&mut self, label: usize) {
        if self.window.len() == self.k {
            self.window.pop_front();
        }
        self.window.push_back(label);
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "oclblind 1")?;
        writeln!(w, "k = {}", self.k)?;
        let labels: Vec<String> = self.window.iter().map(|l| l.to_string()).collect();
        writeln!(w, "window = {}", labels.join(","))?;
        Ok(())
    }
}
