//! The built-in differentiable classifier and the 2-phase training
//! procedure: Phase-I vanilla cross-entropy on all data; Phase-II on the
//! balanced set with knowledge distillation from the frozen Phase-I teacher.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{duplicate_tail, oversample_tail, render_recipe, AugmentParams, TailItem};
use crate::data::{ClassId, Dataset, EmbeddingMatrix, HeadTailSplit, SampleId};
use crate::data::split_head_tail;
use crate::error::{Error, Result};
use crate::herding::{undersample_heads, SelectionResult};
use crate::ltt1;
use crate::tensor::{tempered_softmax, ProbVector, Vector};

/// Resampling arm selector; mirrors the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Phase-I only; Phase-II is a no-op control arm.
    Baseline,
    /// Random undersampling of heads to `floor(m)`.
    Rus,
    /// Random oversampling: tails duplicated up to `floor(m)`.
    Ros,
    /// Herding undersampling of heads.
    Hus,
    /// Herding undersampling plus knowledge distillation.
    HusKd,
    /// CutMix oversampling of tails with random source images.
    CmoRandom,
    /// CutMix oversampling with visual-aware (cosine top-k) sources.
    CmoVisual,
    /// The whole method: herding + KD + visual-aware multi-image CutMix.
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Baseline,
        Strategy::Rus,
        Strategy::Ros,
        Strategy::Hus,
        Strategy::HusKd,
        Strategy::CmoRandom,
        Strategy::CmoVisual,
        Strategy::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Rus => "rus",
            Strategy::Ros => "ros",
            Strategy::Hus => "hus",
            Strategy::HusKd => "hus_kd",
            Strategy::CmoRandom => "cmo_random",
            Strategy::CmoVisual => "cmo_visual",
            Strategy::Full => "full",
        }
    }

    /// Does the arm undersample head classes to `floor(m)`?
    fn undersamples(self) -> bool {
        matches!(
            self,
            Strategy::Rus | Strategy::Hus | Strategy::HusKd | Strategy::Full
        )
    }

    fn uses_herding(self) -> bool {
        matches!(self, Strategy::Hus | Strategy::HusKd | Strategy::Full)
    }

    fn uses_kd(self) -> bool {
        matches!(self, Strategy::HusKd | Strategy::Full)
    }

    fn mixes_tail(self) -> bool {
        matches!(
            self,
            Strategy::CmoRandom | Strategy::CmoVisual | Strategy::Full
        )
    }

    fn visual_aware(self) -> bool {
        matches!(self, Strategy::CmoVisual | Strategy::Full)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Strategy::Baseline),
            "rus" => Ok(Strategy::Rus),
            "ros" => Ok(Strategy::Ros),
            "hus" => Ok(Strategy::Hus),
            "hus_kd" => Ok(Strategy::HusKd),
            "cmo_random" => Ok(Strategy::CmoRandom),
            "cmo_visual" => Ok(Strategy::CmoVisual),
            "full" => Ok(Strategy::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy `{other}` (expected one of baseline|rus|ros|hus|hus_kd|cmo_random|cmo_visual|full)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// All training hyperparameters. The flat `key = value` config file uses
/// exactly these names (`T` for the temperature, `batch_size_Br` for the
/// head-batch size).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs_phase1: u32,
    pub epochs_phase2: u32,
    pub lr0: f64,
    /// Phase-II initial learning rate for its own cosine schedule. Phase-II
    /// fine-tunes the warm-started student; the reduced default keeps the
    /// teacher's head-class knowledge intact while the balanced set
    /// reshapes the tail boundaries.
    pub lr0_phase2: f64,
    pub momentum: f64,
    /// Distillation temperature (config key `T`).
    pub temperature: f64,
    pub lambda_kd: f64,
    pub k: usize,
    pub batch_size_br: usize,
    pub s_lo: f64,
    pub s_hi: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub hidden_dim: usize,
    /// Keep the pure tail one-hot label on mixed samples.
    pub hard_tail_label: bool,
    /// Classic distillation T^2 gradient rescaling (off: verbatim loss).
    pub kd_t2_rescale: bool,
    /// Train Phase-II from a fresh initialization instead of warm-starting.
    pub scratch_phase2: bool,
    /// Apply KD to every Phase-II sample, not just head-selected ones.
    pub kd_all_samples: bool,
    /// L2-normalize features before herding.
    pub l2_normalize_herding: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_phase1: 50,
            epochs_phase2: 100,
            lr0: 0.1,
            lr0_phase2: 0.01,
            momentum: 0.9,
            temperature: 0.5,
            lambda_kd: 1.0,
            k: 1,
            batch_size_br: 64,
            s_lo: 0.1,
            s_hi: 0.5,
            batch_size: 64,
            seed: 0,
            strategy: Strategy::Full,
            hidden_dim: 128,
            hard_tail_label: false,
            kd_t2_rescale: false,
            scratch_phase2: false,
            kd_all_samples: false,
            l2_normalize_herding: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidArgument(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.lr0_phase2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lr0_phase2 must be > 0, got {}",
                self.lr0_phase2
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "T must be positive, got {}",
                self.temperature
            )));
        }
        if self.lambda_kd < 0.0 {
            return Err(Error::InvalidArgument("lambda_kd must be >= 0".into()));
        }
        if self.epochs_phase1 < 1 {
            return Err(Error::InvalidArgument("epochs_phase1 must be >= 1".into()));
        }
        if self.batch_size < 1 || self.hidden_dim < 1 {
            return Err(Error::InvalidArgument(
                "batch_size and hidden_dim must be >= 1".into(),
            ));
        }
        self.augment_params().validate()
    }

    pub fn augment_params(&self) -> AugmentParams {
        AugmentParams {
            k: self.k,
            batch_size_br: self.batch_size_br,
            s_lo: self.s_lo,
            s_hi: self.s_hi,
            visual_aware: self.strategy.visual_aware(),
            hard_tail_label: self.hard_tail_label,
        }
    }

    /// Parse the flat `key = value` config format. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are errors.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::InvalidArgument(format!(
                    "config line {}: bad {what} value `{value}`",
                    lineno + 1
                ))
            };
            match key {
                "epochs_phase1" => cfg.epochs_phase1 = value.parse().map_err(|_| bad(key))?,
                "epochs_phase2" => cfg.epochs_phase2 = value.parse().map_err(|_| bad(key))?,
                "lr0" => cfg.lr0 = value.parse().map_err(|_| bad(key))?,
                "lr0_phase2" => cfg.lr0_phase2 = value.parse().map_err(|_| bad(key))?,
                "momentum" => cfg.momentum = value.parse().map_err(|_| bad(key))?,
                "T" => cfg.temperature = value.parse().map_err(|_| bad(key))?,
                "lambda_kd" => cfg.lambda_kd = value.parse().map_err(|_| bad(key))?,
                "k" => cfg.k = value.parse().map_err(|_| bad(key))?,
                "batch_size_Br" => cfg.batch_size_br = value.parse().map_err(|_| bad(key))?,
                "s_lo" => cfg.s_lo = value.parse().map_err(|_| bad(key))?,
                "s_hi" => cfg.s_hi = value.parse().map_err(|_| bad(key))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad(key))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
                "strategy" => cfg.strategy = value.parse()?,
                "hidden_dim" => cfg.hidden_dim = value.parse().map_err(|_| bad(key))?,
                "hard_tail_label" => cfg.hard_tail_label = parse_bool(value).ok_or_else(|| bad(key))?,
                "kd_t2_rescale" => cfg.kd_t2_rescale = parse_bool(value).ok_or_else(|| bad(key))?,
                "scratch_phase2" => cfg.scratch_phase2 = parse_bool(value).ok_or_else(|| bad(key))?,
                "kd_all_samples" => cfg.kd_all_samples = parse_bool(value).ok_or_else(|| bad(key))?,
                "l2_normalize_herding" => {
                    cfg.l2_normalize_herding = parse_bool(value).ok_or_else(|| bad(key))?
                }
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "config line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable sub-stream seeds so shuffling, augmentation, and initialization
/// draw from independent deterministic streams.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x243F_6A88_85A3_08D3u64;
    for p in parts {
        acc = splitmix64(acc ^ *p);
    }
    acc
}

const STREAM_MODEL_INIT: u64 = 1;
const STREAM_P1_SHUFFLE: u64 = 2;
const STREAM_P2_SHUFFLE: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_RUS: u64 = 5;
const STREAM_P2_INIT: u64 = 6;

/// Two-layer ReLU perceptron with explicit parameter and momentum buffers.
/// The hidden activation is the sample embedding used by herding and the
/// visual-aware source selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    vw1: Array2<f64>,
    vb1: Array1<f64>,
    vw2: Array2<f64>,
    vb2: Array1<f64>,
}

/// Parameter gradients matching [`Model`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Model {
    /// Xavier-uniform weights, zero biases and momentum.
    pub fn init(input_dim: usize, hidden_dim: usize, class_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Array2::from_shape_vec((rows, cols), data).expect("shape")
        };
        let w1 = uniform(hidden_dim, input_dim);
        let w2 = uniform(class_count, hidden_dim);
        Model {
            vw1: Array2::zeros(w1.raw_dim()),
            vb1: Array1::zeros(hidden_dim),
            vw2: Array2::zeros(w2.raw_dim()),
            vb2: Array1::zeros(class_count),
            w1,
            b1: Array1::zeros(hidden_dim),
            w2,
            b2: Array1::zeros(class_count),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.w2.nrows()
    }

    /// Single-sample forward pass: `(logits, embedding)` where the
    /// embedding is the hidden ReLU activation.
    pub fn forward(&self, x: &Vector) -> Result<(Vector, Vector)> {
        if x.dim() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input dim {} != model input dim {}",
                x.dim(),
                self.input_dim()
            )));
        }
        let xs = x.as_slice();
        let mut hidden = vec![0.0; self.hidden_dim()];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut acc = self.b1[j];
            for (i, xv) in xs.iter().enumerate() {
                acc += self.w1[[j, i]] * xv;
            }
            *h = acc.max(0.0);
        }
        let mut logits = vec![0.0; self.class_count()];
        for (c, z) in logits.iter_mut().enumerate() {
            let mut acc = self.b2[c];
            for (j, hv) in hidden.iter().enumerate() {
                acc += self.w2[[c, j]] * hv;
            }
            *z = acc;
        }
        Ok((Vector::new(logits)?, Vector::new(hidden)?))
    }

    /// Batched forward: rows are samples. Returns `(logits, hidden)`.
    pub fn forward_batch(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let z1 = x.dot(&self.w1.t()) + &self.b1;
        let hidden = z1.mapv(|v| v.max(0.0));
        let logits = hidden.dot(&self.w2.t()) + &self.b2;
        (logits, hidden)
    }

    /// Backprop through the batched forward. `dlogits` is dLoss/dlogits.
    /// Returns parameter grads and dLoss/dx.
    pub fn backward_batch(
        &self,
        x: &Array2<f64>,
        hidden: &Array2<f64>,
        dlogits: &Array2<f64>,
    ) -> (Grads, Array2<f64>) {
        let dw2 = dlogits.t().dot(hidden);
        let db2 = dlogits.sum_axis(Axis(0));
        let dh = dlogits.dot(&self.w2);
        let dz1 = &dh * &hidden.mapv(|h| if h > 0.0 { 1.0 } else { 0.0 });
        let dw1 = dz1.t().dot(x);
        let db1 = dz1.sum_axis(Axis(0));
        let dx = dz1.dot(&self.w1);
        (
            Grads {
                w1: dw1,
                b1: db1,
                w2: dw2,
                b2: db2,
            },
            dx,
        )
    }

    /// Heavyball SGD update: `v <- momentum*v + g; p <- p - lr*v`.
    /// A non-finite gradient aborts with diagnostics.
    pub fn sgd_step(&mut self, grads: &Grads, lr: f64, momentum: f64) -> Result<()> {
        let finite = grads.w1.iter().all(|v| v.is_finite())
            && grads.b1.iter().all(|v| v.is_finite())
            && grads.w2.iter().all(|v| v.is_finite())
            && grads.b2.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Diverged(
                "non-finite gradient reached the optimizer".into(),
            ));
        }
        self.vw1.zip_mut_with(&grads.w1, |v, g| *v = momentum * *v + g);
        self.vb1.zip_mut_with(&grads.b1, |v, g| *v = momentum * *v + g);
        self.vw2.zip_mut_with(&grads.w2, |v, g| *v = momentum * *v + g);
        self.vb2.zip_mut_with(&grads.b2, |v, g| *v = momentum * *v + g);
        self.w1.zip_mut_with(&self.vw1, |p, v| *p -= lr * v);
        self.b1.zip_mut_with(&self.vb1, |p, v| *p -= lr * v);
        self.w2.zip_mut_with(&self.vw2, |p, v| *p -= lr * v);
        self.b2.zip_mut_with(&self.vb2, |p, v| *p -= lr * v);
        Ok(())
    }

    /// All parameters flattened in a fixed order (w1, b1, w2, b2); used by
    /// gradient checking and the bundle format.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expect = self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len();
        if flat.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "expected {expect} parameters, got {}",
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for p in self.w1.iter_mut() {
            *p = *it.next().unwrap();
        }
        for p in self.b1.iter_mut() {
            *p = *it.next().unwrap();
        }
        for p in self.w2.iter_mut() {
            *p = *it.next().unwrap();
        }
        for p in self.b2.iter_mut() {
            *p = *it.next().unwrap();
        }
        Ok(())
    }

    /// Order-sensitive checksum of the parameter bits; used to verify the
    /// frozen teacher never changes.
    pub fn param_checksum(&self) -> u64 {
        let mut acc = 0xCBF2_9CE4_8422_2325u64;
        for v in self.params_flat() {
            acc = acc.rotate_left(5) ^ v.to_bits();
            acc = acc.wrapping_mul(0x100_0000_01B3);
        }
        acc
    }

    /// Save as a rank-1 LTT1 bundle: `[input_dim, hidden_dim, class_count,
    /// w1 row-major, b1, w2 row-major, b2]`. Payloads are `f32` per the
    /// repo-wide format, so a reloaded model is `f32`-rounded.
    pub fn save_bundle(&self, path: &Path) -> Result<()> {
        let mut payload = vec![
            self.input_dim() as f64,
            self.hidden_dim() as f64,
            self.class_count() as f64,
        ];
        payload.extend(self.params_flat());
        ltt1::write_file(path, &[payload.len() as u32], &payload)
    }

    pub fn load_bundle(path: &Path) -> Result<Model> {
        let (dims, payload) = ltt1::read_file(path)?;
        if dims.len() != 1 || payload.len() < 3 {
            return Err(Error::MalformedTensor(format!(
                "{}: not a model bundle",
                path.display()
            )));
        }
        let input_dim = payload[0] as usize;
        let hidden_dim = payload[1] as usize;
        let class_count = payload[2] as usize;
        let expect = input_dim * hidden_dim + hidden_dim + hidden_dim * class_count + class_count;
        if payload.len() != 3 + expect {
            return Err(Error::MalformedTensor(format!(
                "{}: bundle payload {} != header shapes ({expect} params)",
                path.display(),
                payload.len() - 3
            )));
        }
        let mut model = Model::init(input_dim, hidden_dim, class_count, 0);
        model.set_params_flat(&payload[3..])?;
        model.vw1.fill(0.0);
        model.vb1.fill(0.0);
        model.vw2.fill(0.0);
        model.vb2.fill(0.0);
        Ok(model)
    }
}

/// Cross-entropy against a soft label, with the gradient wrt logits
/// (`softmax(logits) - label`). Computed via log-sum-exp for stability.
pub fn ce_loss(logits: &Vector, soft_label: &ProbVector) -> Result<(f64, Vector)> {
    if logits.dim() != soft_label.dim() {
        return Err(Error::ShapeMismatch(format!(
            "ce_loss: {} logits vs {} label entries",
            logits.dim(),
            soft_label.dim()
        )));
    }
    let z = logits.as_slice();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z.len());
    for (zi, yi) in z.iter().zip(soft_label.as_slice()) {
        loss += yi * (lse - zi);
        grad.push((zi - lse).exp() - yi);
    }
    Ok((loss, Vector::new(grad)?))
}

/// Distillation loss: cross-entropy between the tempered teacher and
/// tempered student distributions, verbatim (no `T^2` rescaling unless
/// `t2_rescale`). Gradient wrt student logits is
/// `(softmax(student/T) - softmax(teacher/T)) / T`.
pub fn kd_loss(
    teacher_logits: &Vector,
    student_logits: &Vector,
    t: f64,
    t2_rescale: bool,
) -> Result<(f64, Vector)> {
    if teacher_logits.dim() != student_logits.dim() {
        return Err(Error::ShapeMismatch(format!(
            "kd_loss: {} teacher vs {} student logits",
            teacher_logits.dim(),
            student_logits.dim()
        )));
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {t}"
        )));
    }
    let p_teacher = tempered_softmax(teacher_logits, t)?;
    let zs: Vec<f64> = student_logits.as_slice().iter().map(|v| v / t).collect();
    let max = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + zs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let scale = if t2_rescale { t * t } else { 1.0 };
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(zs.len());
    for (zi, pt) in zs.iter().zip(p_teacher.as_slice()) {
        loss += pt * (lse - zi);
        let ps = (zi - lse).exp();
        grad.push(scale * (ps - pt) / t);
    }
    Ok((scale * loss, Vector::new(grad)?))
}

/// Cosine learning-rate schedule: `0.5 * lr0 * (1 + cos(pi * t / t_total))`.
pub fn cosine_lr(lr0: f64, step: u64, total_steps: u64) -> f64 {
    let frac = step as f64 / total_steps.max(1) as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One `log.csv` row: per-epoch mean losses and the epoch's starting lr.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: u32,
    pub phase: u8,
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub lr: f64,
}

pub fn write_log_csv(logs: &[EpochLog], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["epoch", "phase", "loss_ce", "loss_kd", "lr"])?;
    for log in logs {
        writer.write_record([
            log.epoch.to_string(),
            log.phase.to_string(),
            format!("{:.6}", log.loss_ce),
            format!("{:.6}", log.loss_kd),
            format!("{:.6}", log.lr),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Penultimate-layer (hidden ReLU) embeddings of every train sample, rows
/// in manifest train order.
pub fn compute_embeddings(model: &Model, dataset: &Dataset) -> Result<EmbeddingMatrix> {
    let train = dataset.train_indices();
    let dim = dataset.input_dim();
    if dim != model.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset input dim {dim} != model input dim {}",
            model.input_dim()
        )));
    }
    let mut ids = Vec::with_capacity(train.len());
    let mut data = Vec::with_capacity(train.len() * model.hidden_dim());
    for chunk in train.chunks(256) {
        let mut x = Array2::zeros((chunk.len(), dim));
        for (r, &pos) in chunk.iter().enumerate() {
            let s = dataset.sample(pos);
            ids.push(s.id.clone());
            for (c, v) in s.payload.flat().iter().enumerate() {
                x[[r, c]] = *v;
            }
        }
        let (_, hidden) = model.forward_batch(&x);
        data.extend(hidden.iter());
    }
    EmbeddingMatrix::new(ids, model.hidden_dim(), data)
}

/// One training example in an epoch plan.
#[derive(Debug, Clone)]
pub(crate) struct EpochItem {
    pub features: Vec<f64>,
    pub label: Vec<f64>,
    /// Class the item counts toward for balance accounting.
    #[allow(dead_code)]
    pub class_id: ClassId,
    /// Whether the distillation term applies to this item.
    pub kd: bool,
}

fn one_hot(class_id: ClassId, class_count: u32) -> Vec<f64> {
    let mut v = vec![0.0; class_count as usize];
    v[(class_id - 1) as usize] = 1.0;
    v
}

/// Random head undersampling (the RUS arm): per head class, a seeded
/// without-replacement draw of `floor(m)` samples.
fn random_head_selection(
    dataset: &Dataset,
    split: &HeadTailSplit,
    seed: u64,
) -> BTreeMap<ClassId, SelectionResult> {
    let budget = split.floor_m() as usize;
    let mut out = BTreeMap::new();
    for &class_id in split.head_classes() {
        let indices = dataset.class_train_indices(class_id);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_RUS, class_id as u64]));
        let picked = rand::seq::index::sample(&mut rng, indices.len(), budget);
        let mut chosen = vec![false; indices.len()];
        let mut selected = Vec::with_capacity(budget);
        for i in picked.iter() {
            chosen[i] = true;
            selected.push(dataset.sample(indices[i]).id.clone());
        }
        let removed = indices
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen[*i])
            .map(|(_, pos)| dataset.sample(*pos).id.clone())
            .collect();
        out.insert(
            class_id,
            SelectionResult { selected, removed },
        );
    }
    out
}

/// Everything Phase-II produced besides the model itself.
pub struct Phase2Outcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub selection: BTreeMap<ClassId, SelectionResult>,
    pub ros_fallback: bool,
}

/// Assemble one Phase-II epoch's training set for the configured strategy.
/// Mixing strategies regenerate fresh recipes (new head batches and masks)
/// every epoch.
pub(crate) fn build_epoch_plan(
    dataset: &Dataset,
    split: &HeadTailSplit,
    selection: &BTreeMap<ClassId, SelectionResult>,
    embeddings: &EmbeddingMatrix,
    teacher: &Model,
    cfg: &TrainConfig,
    epoch: u32,
) -> Result<(Vec<EpochItem>, bool)> {
    let n = dataset.distribution().class_count();
    let strategy = cfg.strategy;
    let mut items = Vec::new();
    let kd_selected = strategy.uses_kd() && !cfg.kd_all_samples;
    let push_real = |items: &mut Vec<EpochItem>, pos: usize, kd: bool| {
        let s = dataset.sample(pos);
        items.push(EpochItem {
            features: s.payload.flat().to_vec(),
            label: one_hot(s.class_id, n),
            class_id: s.class_id,
            kd,
        });
    };
    // head classes: selected subset (undersampling arms) or everything
    for &class_id in split.head_classes() {
        if strategy.undersamples() {
            let sel = selection.get(&class_id).ok_or_else(|| {
                Error::InvalidArgument(format!("no selection for head class {class_id}"))
            })?;
            for id in &sel.selected {
                let s = dataset.lookup(id).ok_or_else(|| {
                    Error::InvalidArgument(format!("selected id {id} not in dataset"))
                })?;
                items.push(EpochItem {
                    features: s.payload.flat().to_vec(),
                    label: one_hot(s.class_id, n),
                    class_id: s.class_id,
                    kd: kd_selected || (strategy.uses_kd() && cfg.kd_all_samples),
                });
            }
        } else {
            for &pos in dataset.class_train_indices(class_id) {
                push_real(&mut items, pos, strategy.uses_kd() && cfg.kd_all_samples);
            }
        }
    }
    // boundary classes are never resampled
    for &class_id in split.boundary_classes() {
        for &pos in dataset.class_train_indices(class_id) {
            push_real(&mut items, pos, strategy.uses_kd() && cfg.kd_all_samples);
        }
    }
    // tail classes: real samples, plus strategy-dependent oversampling
    for &class_id in split.tail_classes() {
        for &pos in dataset.class_train_indices(class_id) {
            push_real(&mut items, pos, strategy.uses_kd() && cfg.kd_all_samples);
        }
    }
    let mut ros_fallback = false;
    if strategy == Strategy::Ros {
        let plan = duplicate_tail(dataset, split);
        for item in plan.items {
            let TailItem::Duplicate { base_id, class_id } = item else {
                unreachable!()
            };
            let s = dataset.lookup(&base_id).unwrap();
            items.push(EpochItem {
                features: s.payload.flat().to_vec(),
                label: one_hot(class_id, n),
                class_id,
                kd: false,
            });
        }
    } else if strategy.mixes_tail() {
        // source pool: the removed head pool for the full method,
        // all head samples for the CMO arms (which keep heads intact)
        let pool: Vec<SampleId> = if strategy.undersamples() {
            selection
                .values()
                .flat_map(|sel| sel.removed.iter().cloned())
                .collect()
        } else {
            split
                .head_classes()
                .iter()
                .flat_map(|c| dataset.class_train_indices(*c))
                .map(|pos| dataset.sample(*pos).id.clone())
                .collect()
        };
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, STREAM_AUGMENT, epoch as u64]));
        let mut teacher_embed = |payload: &crate::data::Payload| -> Result<Vector> {
            let x = Vector::new(payload.flat().to_vec())?;
            let (_, embedding) = teacher.forward(&x)?;
            Ok(embedding)
        };
        let plan = oversample_tail(
            dataset,
            split,
            &pool,
            embeddings,
            &mut teacher_embed,
            &cfg.augment_params(),
            &mut rng,
        )?;
        ros_fallback = plan.ros_fallback;
        let kd_mixed = strategy.uses_kd() && cfg.kd_all_samples;
        for item in plan.items {
            match item {
                TailItem::Mixed(recipe) => {
                    let (payload, label) = render_recipe(&recipe, dataset)?;
                    items.push(EpochItem {
                        features: payload.flat().to_vec(),
                        label: label.as_slice().to_vec(),
                        class_id: recipe.base_class,
                        kd: kd_mixed,
                    });
                }
                TailItem::Duplicate { base_id, class_id } => {
                    let s = dataset.lookup(&base_id).unwrap();
                    items.push(EpochItem {
                        features: s.payload.flat().to_vec(),
                        label: one_hot(class_id, n),
                        class_id,
                        kd: kd_mixed,
                    });
                }
            }
        }
    }
    Ok((items, ros_fallback))
}

struct BatchStats {
    ce_sum: f64,
    kd_sum: f64,
    kd_count: u64,
}

/// Run one optimization pass over `items` (already shuffled), returning
/// accumulated loss statistics.
fn train_epoch(
    model: &mut Model,
    teacher: Option<&Model>,
    items: &[EpochItem],
    order: &[usize],
    cfg: &TrainConfig,
    lr0: f64,
    step: &mut u64,
    total_steps: u64,
    phase: u8,
    epoch: u32,
) -> Result<BatchStats> {
    let n_classes = model.class_count();
    let dim = model.input_dim();
    let mut stats = BatchStats {
        ce_sum: 0.0,
        kd_sum: 0.0,
        kd_count: 0,
    };
    for chunk in order.chunks(cfg.batch_size) {
        let b = chunk.len();
        let mut x = Array2::zeros((b, dim));
        let mut y = Array2::zeros((b, n_classes));
        for (r, &idx) in chunk.iter().enumerate() {
            let item = &items[idx];
            for (c, v) in item.features.iter().enumerate() {
                x[[r, c]] = *v;
            }
            for (c, v) in item.label.iter().enumerate() {
                y[[r, c]] = *v;
            }
        }
        let (logits, hidden) = model.forward_batch(&x);
        let mut dlogits = Array2::zeros((b, n_classes));
        let mut batch_loss = 0.0;
        // per-row CE via log-sum-exp; mean over the batch
        for r in 0..b {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..n_classes {
                let p = (row[c] - lse).exp();
                dlogits[[r, c]] = (p - y[[r, c]]) / b as f64;
                batch_loss += y[[r, c]] * (lse - row[c]) / b as f64;
            }
        }
        stats.ce_sum += batch_loss * b as f64;
        let any_kd = chunk.iter().any(|&idx| items[idx].kd);
        if let (Some(teacher), true) = (teacher, any_kd) {
            let (t_logits, _) = teacher.forward_batch(&x);
            let t = cfg.temperature;
            let scale = if cfg.kd_t2_rescale { t * t } else { 1.0 };
            for (r, &idx) in chunk.iter().enumerate() {
                if !items[idx].kd {
                    continue;
                }
                let zt = t_logits.row(r);
                let zs = logits.row(r);
                let max_t = zt.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
                let lse_t = max_t
                    + zt.iter()
                        .map(|v| (v / t - max_t).exp())
                        .sum::<f64>()
                        .ln();
                let max_s = zs.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
                let lse_s = max_s
                    + zs.iter()
                        .map(|v| (v / t - max_s).exp())
                        .sum::<f64>()
                        .ln();
                let mut kd_row = 0.0;
                for c in 0..n_classes {
                    let pt = (zt[c] / t - lse_t).exp();
                    let ps = (zs[c] / t - lse_s).exp();
                    kd_row += pt * (lse_s - zs[c] / t);
                    dlogits[[r, c]] +=
                        cfg.lambda_kd * scale * (ps - pt) / t / b as f64;
                }
                stats.kd_sum += scale * kd_row;
                stats.kd_count += 1;
                batch_loss += cfg.lambda_kd * scale * kd_row / b as f64;
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "phase {phase} epoch {epoch} step {step}: loss = {batch_loss}"
            )));
        }
        let (grads, _) = model.backward_batch(&x, &hidden, &dlogits);
        let lr = cosine_lr(lr0, *step, total_steps);
        model.sgd_step(&grads, lr, cfg.momentum)?;
        *step += 1;
    }
    Ok(stats)
}

fn shuffled(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..len).collect();
    // Fisher-Yates
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Phase-I: vanilla cross-entropy training on the full imbalanced train
/// split. Deterministic given `cfg.seed`.
pub fn train_phase1(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    cfg.validate()?;
    let train = dataset.train_indices();
    if train.is_empty() {
        return Err(Error::InvalidArgument("train split is empty".into()));
    }
    let n = dataset.distribution().class_count();
    let items: Vec<EpochItem> = train
        .iter()
        .map(|&pos| {
            let s = dataset.sample(pos);
            EpochItem {
                features: s.payload.flat().to_vec(),
                label: one_hot(s.class_id, n),
                class_id: s.class_id,
                kd: false,
            }
        })
        .collect();
    let mut model = Model::init(
        dataset.input_dim(),
        cfg.hidden_dim,
        n as usize,
        derive_seed(&[cfg.seed, STREAM_MODEL_INIT]),
    );
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs_phase1 as u64;
    let mut step = 0u64;
    let mut logs = Vec::with_capacity(cfg.epochs_phase1 as usize);
    for epoch in 0..cfg.epochs_phase1 {
        let lr_start = cosine_lr(cfg.lr0, step, total_steps);
        let order = shuffled(
            items.len(),
            derive_seed(&[cfg.seed, STREAM_P1_SHUFFLE, epoch as u64]),
        );
        let stats = train_epoch(
            &mut model,
            None,
            &items,
            &order,
            cfg,
            cfg.lr0,
            &mut step,
            total_steps,
            1,
            epoch,
        )?;
        logs.push(EpochLog {
            epoch: epoch + 1,
            phase: 1,
            loss_ce: stats.ce_sum / items.len() as f64,
            loss_kd: 0.0,
            lr: lr_start,
        });
    }
    Ok((model, logs))
}

/// Phase-II: rebalanced training with the frozen Phase-I teacher. The
/// student warm-starts from the teacher (unless `scratch_phase2`); per
/// epoch the balanced set is herding-selected head samples plus real tail
/// samples plus freshly generated mixed recipes, per the strategy. The
/// distillation term applies to head-selected samples (all samples with
/// `kd_all_samples`).
pub fn train_phase2(dataset: &Dataset, teacher: &Model, cfg: &TrainConfig) -> Result<Phase2Outcome> {
    cfg.validate()?;
    if cfg.strategy == Strategy::Baseline {
        return Ok(Phase2Outcome {
            model: teacher.clone(),
            log: Vec::new(),
            selection: BTreeMap::new(),
            ros_fallback: false,
        });
    }
    let split = split_head_tail(dataset.distribution());
    let embeddings = compute_embeddings(teacher, dataset)?;
    let selection = if !cfg.strategy.undersamples() {
        BTreeMap::new()
    } else if cfg.strategy.uses_herding() {
        undersample_heads(dataset, &embeddings, &split, cfg.l2_normalize_herding)?
    } else {
        random_head_selection(dataset, &split, cfg.seed)
    };
    let mut model = if cfg.scratch_phase2 {
        Model::init(
            dataset.input_dim(),
            cfg.hidden_dim,
            dataset.distribution().class_count() as usize,
            derive_seed(&[cfg.seed, STREAM_P2_INIT]),
        )
    } else {
        teacher.clone()
    };
    let (first_plan, mut ros_fallback) =
        build_epoch_plan(dataset, &split, &selection, &embeddings, teacher, cfg, 0)?;
    let steps_per_epoch = first_plan.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs_phase2 as u64;
    let mut step = 0u64;
    let mut logs = Vec::with_capacity(cfg.epochs_phase2 as usize);
    let mut plan = first_plan;
    for epoch in 0..cfg.epochs_phase2 {
        if epoch > 0 {
            let (next, fallback) =
                build_epoch_plan(dataset, &split, &selection, &embeddings, teacher, cfg, epoch)?;
            plan = next;
            ros_fallback |= fallback;
        }
        if plan.is_empty() {
            return Err(Error::InvalidArgument(
                "phase-II epoch set is empty".into(),
            ));
        }
        let lr_start = cosine_lr(cfg.lr0_phase2, step, total_steps);
        let order = shuffled(
            plan.len(),
            derive_seed(&[cfg.seed, STREAM_P2_SHUFFLE, epoch as u64]),
        );
        let stats = train_epoch(
            &mut model,
            Some(teacher),
            &plan,
            &order,
            cfg,
            cfg.lr0_phase2,
            &mut step,
            total_steps,
            2,
            epoch,
        )?;
        logs.push(EpochLog {
            epoch: epoch + 1,
            phase: 2,
            loss_ce: stats.ce_sum / plan.len() as f64,
            loss_kd: if stats.kd_count > 0 {
                stats.kd_sum / stats.kd_count as f64
            } else {
                0.0
            },
            lr: lr_start,
        });
    }
    Ok(Phase2Outcome {
        model,
        log: logs,
        selection,
        ros_fallback,
    })
}
