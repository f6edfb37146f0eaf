//! Minimal dense numeric types and the shared math kernels (tempered
//! softmax, cosine similarity, class means) used by every other module.
//!
//! All arithmetic is in `f64`; file payloads are `f32` (see [`crate::ltt1`]).
//! Everything here is a pure function over immutable inputs.

use crate::error::{Error, Result};

/// Dense feature vector. Nonempty, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("vector must be nonempty".into()));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "vector entries must be finite, got {bad}"
            )));
        }
        Ok(Vector { data })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch(format!(
                "dot: dims {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Rescale to unit L2 norm. Errors on a zero-norm vector.
    pub fn normalized(&self) -> Result<Vector> {
        let n = self.l2_norm();
        if n == 0.0 {
            return Err(Error::DegenerateInput(
                "cannot normalize a zero-norm vector".into(),
            ));
        }
        Vector::new(self.data.iter().map(|v| v / n).collect())
    }
}

/// Image payload: `H x W x C` row-major, entries in `[0, 1]`.
///
/// Index `(y, x, c)` maps to `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: u32,
    height: u32,
    channels: u32,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidArgument(
                "image dimensions must be positive".into(),
            ));
        }
        let expect = width as usize * height as usize * channels as usize;
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "image payload length {} != {}x{}x{} = {}",
                data.len(),
                height,
                width,
                channels,
                expect
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "image entries must lie in [0, 1], got {bad}"
            )));
        }
        Ok(ImageTensor {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: u32, x: u32, c: u32) -> f64 {
        let idx = ((y as usize * self.width as usize) + x as usize) * self.channels as usize
            + c as usize;
        self.data[idx]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn from_parts_unchecked(
        width: u32,
        height: u32,
        channels: u32,
        data: Vec<f64>,
    ) -> Self {
        ImageTensor {
            width,
            height,
            channels,
            data,
        }
    }
}

/// Discrete probability distribution over classes: entries in `[0, 1]`
/// summing to 1 within 1e-9.
///
/// Softmax outputs are strictly inside `(0, 1)` mathematically; the closed
/// interval admits one-hot labels and area-weighted soft labels whose
/// off-support entries are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    data: Vec<f64>,
}

impl ProbVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument(
                "probability vector must be nonempty".into(),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "probabilities must lie in [0, 1], got {bad}"
            )));
        }
        let sum: f64 = data.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities must sum to 1 within 1e-9, got {sum}"
            )));
        }
        Ok(ProbVector { data })
    }

    /// One-hot distribution with probability 1 at `index`.
    pub fn one_hot(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::InvalidArgument(format!(
                "one-hot index {index} out of range for dim {dim}"
            )));
        }
        let mut data = vec![0.0; dim];
        data[index] = 1.0;
        Ok(ProbVector { data })
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Shannon entropy in nats. Zero entries contribute zero.
    pub fn entropy(&self) -> f64 {
        self.data
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / t`, computed with max-subtraction for overflow
/// safety. `t` is the distillation temperature; smaller `t` sharpens the
/// distribution.
pub fn tempered_softmax(logits: &Vector, t: f64) -> Result<ProbVector> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    let scaled: Vec<f64> = logits.as_slice().iter().map(|z| z / t).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector::new(exps.iter().map(|e| e / sum).collect())
}

/// Cosine similarity `<a,b> / (|a| |b|)`, in `[-1, 1]` within rounding.
/// A zero-norm input is a degenerate-input error, never a silent 0.
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "cosine: dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero-norm vector is undefined".into(),
        ));
    }
    Ok(a.dot(b)? / (na * nb))
}

/// Componentwise arithmetic mean of a nonempty list of equal-dim vectors.
pub fn class_mean(features: &[Vector]) -> Result<Vector> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidArgument("class_mean of an empty list".into()))?;
    let dim = first.dim();
    let mut sum = vec![0.0; dim];
    for f in features {
        if f.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "class_mean: dims {} vs {}",
                f.dim(),
                dim
            )));
        }
        for (s, v) in sum.iter_mut().zip(f.as_slice()) {
            *s += v;
        }
    }
    let n = features.len() as f64;
    Vector::new(sum.into_iter().map(|s| s / n).collect())
}
