//! Dataset model, manifest/tensor I/O, long-tail distribution synthesis
//! (Pareto and frequency-matched), head/tail splitting, and the synthetic
//! Gaussian-cluster dataset generator used for desk-scale experiments.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltt1;
use crate::tensor::{ImageTensor, Vector};

/// Class ids are 1-based; class `i` lives at index `i - 1` in count and
/// label arrays.
pub type ClassId = u32;

/// Sample identifier as it appears in manifests and derived CSVs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub String);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SampleId {
    fn from(s: &str) -> Self {
        SampleId(s.to_string())
    }
}

/// Per-class training-sample counts plus the balanced test-split size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    name: String,
    counts: Vec<u64>,
    test_per_class: u64,
}

impl ClassDistribution {
    pub fn new(name: &str, counts: Vec<u64>, test_per_class: u64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument(
                "distribution needs at least one class".into(),
            ));
        }
        if counts.iter().any(|c| *c < 1) {
            return Err(Error::InvalidArgument(
                "every class must keep at least one training sample".into(),
            ));
        }
        Ok(ClassDistribution {
            name: name.to_string(),
            counts,
            test_per_class,
        })
    }

    pub fn with_test_per_class(mut self, test_per_class: u64) -> Self {
        self.test_per_class = test_per_class;
        self
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_count(&self) -> u32 {
        self.counts.len() as u32
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, class_id: ClassId) -> u64 {
        self.counts[(class_id - 1) as usize]
    }

    pub fn total_train(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn test_per_class(&self) -> u64 {
        self.test_per_class
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        1..=self.class_count()
    }
}

/// Rank-frequency long-tail synthesis following a Pareto profile:
/// `n_i = n_min + round((n_max - n_min) * ((n - i)/(n - 1))^alpha)` for rank
/// `i = 1..n`. Counts are non-increasing and hit both endpoints exactly.
///
/// The returned counts are in rank order (class 1 is the largest). `seed`
/// is reserved for shuffling which real-world label gets which rank when a
/// distribution is attached to named classes; it does not affect counts.
/// The test split defaults to 250 per class.
pub fn make_pareto_longtail(
    class_count: u32,
    n_max: u64,
    n_min: u64,
    alpha: f64,
    _seed: u64,
) -> Result<ClassDistribution> {
    if class_count < 2 {
        return Err(Error::InvalidArgument(
            "need at least two classes for a long-tail profile".into(),
        ));
    }
    if n_min < 1 || n_max <= n_min {
        return Err(Error::InvalidArgument(format!(
            "need n_max > n_min >= 1, got n_max={n_max}, n_min={n_min}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let n = class_count as f64;
    let span = (n_max - n_min) as f64;
    let counts: Vec<u64> = (1..=class_count)
        .map(|i| {
            let frac = (n - i as f64) / (n - 1.0);
            n_min + (span * frac.powf(alpha)).round() as u64
        })
        .collect();
    ClassDistribution::new("pareto-longtail", counts, 250)
}

/// Non-negative per-class consumption frequencies; at least one positive.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    freqs: Vec<f64>,
}

impl FrequencyTable {
    pub fn new(freqs: Vec<f64>) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::InvalidArgument("frequency table is empty".into()));
        }
        if freqs.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidArgument(
                "frequencies must be finite and non-negative".into(),
            ));
        }
        if freqs.iter().all(|f| *f == 0.0) {
            return Err(Error::InvalidArgument(
                "frequency table must contain a positive entry".into(),
            ));
        }
        Ok(FrequencyTable { freqs })
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn f_max(&self) -> f64 {
        self.freqs.iter().cloned().fold(0.0, f64::max)
    }

    /// Read a `class_id,frequency` CSV. Rows must cover class ids 1..n.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != vec!["class_id", "frequency"] {
            return Err(Error::MalformedManifest(format!(
                "frequency table header must be `class_id,frequency`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries: BTreeMap<u32, f64> = BTreeMap::new();
        for record in reader.records() {
            let record = record?;
            let id: u32 = record
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::MalformedManifest("bad class_id in frequency table".into()))?;
            let f: f64 = record
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::MalformedManifest("bad frequency value".into()))?;
            entries.insert(id, f);
        }
        let n = entries.len() as u32;
        if n == 0 || entries.keys().last() != Some(&n) || *entries.keys().next().unwrap() != 1 {
            return Err(Error::MalformedManifest(
                "frequency table must cover class ids 1..n".into(),
            ));
        }
        FrequencyTable::new(entries.into_values().collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["class_id", "frequency"])?;
        for (i, f) in self.freqs.iter().enumerate() {
            writer.write_record([(i + 1).to_string(), format!("{f}")])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Scale per-class counts by matched consumption frequency:
/// `s_i = max(1, round(n_i * f_i / f_max))` (round half up, floored at one
/// so no class vanishes).
pub fn frequency_match_counts(original: &[u64], freqs: &FrequencyTable) -> Result<Vec<u64>> {
    if original.len() != freqs.freqs().len() {
        return Err(Error::InvalidArgument(format!(
            "count/frequency length mismatch: {} vs {}",
            original.len(),
            freqs.freqs().len()
        )));
    }
    if original.iter().any(|c| *c < 1) {
        return Err(Error::InvalidArgument(
            "original counts must all be >= 1".into(),
        ));
    }
    let f_max = freqs.f_max();
    Ok(original
        .iter()
        .zip(freqs.freqs())
        .map(|(n_i, f_i)| ((*n_i as f64 * f_i / f_max).round() as u64).max(1))
        .collect())
}

/// Head/tail partition around the mean training count `m = D / n`.
/// Comparisons are strict, so classes sitting exactly on `m` form a
/// separate boundary group (left unresampled, reported with head).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTailSplit {
    m: f64,
    floor_m: u64,
    head: Vec<ClassId>,
    tail: Vec<ClassId>,
    boundary: Vec<ClassId>,
}

impl HeadTailSplit {
    pub fn m(&self) -> f64 {
        self.m
    }

    /// Per-class balancing budget (`m` rounded down).
    pub fn floor_m(&self) -> u64 {
        self.floor_m
    }

    pub fn head_classes(&self) -> &[ClassId] {
        &self.head
    }

    pub fn tail_classes(&self) -> &[ClassId] {
        &self.tail
    }

    pub fn boundary_classes(&self) -> &[ClassId] {
        &self.boundary
    }

    pub fn is_head(&self, class_id: ClassId) -> bool {
        self.head.binary_search(&class_id).is_ok()
    }

    pub fn is_tail(&self, class_id: ClassId) -> bool {
        self.tail.binary_search(&class_id).is_ok()
    }
}

/// Partition classes by comparing each count against `m = D / n`. The
/// comparison is done in exact integer arithmetic (`count * n` vs `D`).
pub fn split_head_tail(dist: &ClassDistribution) -> HeadTailSplit {
    let n = dist.class_count() as u64;
    let total = dist.total_train();
    let mut head = Vec::new();
    let mut tail = Vec::new();
    let mut boundary = Vec::new();
    for (i, count) in dist.counts().iter().enumerate() {
        let id = (i + 1) as ClassId;
        match (count * n).cmp(&total) {
            std::cmp::Ordering::Greater => head.push(id),
            std::cmp::Ordering::Less => tail.push(id),
            std::cmp::Ordering::Equal => boundary.push(id),
        }
    }
    HeadTailSplit {
        m: total as f64 / n as f64,
        floor_m: total / n,
        head,
        tail,
        boundary,
    }
}

/// Maximum over minimum per-class training count.
pub fn imbalance_ratio(dist: &ClassDistribution) -> f64 {
    let max = *dist.counts().iter().max().unwrap();
    let min = *dist.counts().iter().min().unwrap();
    max as f64 / min as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::MalformedManifest(format!(
                "split must be `train` or `test`, got `{other}`"
            ))),
        }
    }
}

/// Sample payload: either a raw feature vector or an image tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Features(Vector),
    Image(ImageTensor),
}

impl Payload {
    /// Spatial extent used by the mixing machinery: images are `(W, H)`,
    /// feature vectors are treated as `1 x dim x 1` images, i.e. `(dim, 1)`.
    pub fn mix_extent(&self) -> (u32, u32) {
        match self {
            Payload::Features(v) => (v.dim() as u32, 1),
            Payload::Image(img) => (img.width(), img.height()),
        }
    }

    pub fn flat(&self) -> &[f64] {
        match self {
            Payload::Features(v) => v.as_slice(),
            Payload::Image(img) => img.data(),
        }
    }

    pub fn flat_len(&self) -> usize {
        self.flat().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub class_id: ClassId,
    pub split: SplitKind,
    pub payload: Payload,
}

/// Sample records plus their governing distribution. Per-class train counts
/// match the distribution exactly, ids are unique, payload shapes are
/// uniform, and the test split is balanced at `test_per_class`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    distribution: ClassDistribution,
    samples: Vec<Sample>,
    index: BTreeMap<SampleId, usize>,
    train_by_class: Vec<Vec<usize>>,
    test_by_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(distribution: ClassDistribution, samples: Vec<Sample>) -> Result<Self> {
        let n = distribution.class_count();
        let mut index = BTreeMap::new();
        let mut train_by_class = vec![Vec::new(); n as usize];
        let mut test_by_class = vec![Vec::new(); n as usize];
        let mut shape: Option<(bool, usize, (u32, u32, u32))> = None;
        for (pos, s) in samples.iter().enumerate() {
            if s.class_id < 1 || s.class_id > n {
                return Err(Error::InvalidArgument(format!(
                    "sample {} has class id {} outside 1..={n}",
                    s.id, s.class_id
                )));
            }
            if index.insert(s.id.clone(), pos).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate sample id {}",
                    s.id
                )));
            }
            let sig = match &s.payload {
                Payload::Features(v) => (false, v.dim(), (0, 0, 0)),
                Payload::Image(img) => (
                    true,
                    0,
                    (img.width(), img.height(), img.channels()),
                ),
            };
            match &shape {
                None => shape = Some(sig),
                Some(existing) if *existing != sig => {
                    return Err(Error::ShapeMismatch(format!(
                        "sample {} payload shape differs from the rest of the dataset",
                        s.id
                    )));
                }
                _ => {}
            }
            let bucket = (s.class_id - 1) as usize;
            match s.split {
                SplitKind::Train => train_by_class[bucket].push(pos),
                SplitKind::Test => test_by_class[bucket].push(pos),
            }
        }
        for (i, idxs) in train_by_class.iter().enumerate() {
            let expect = distribution.counts()[i];
            if idxs.len() as u64 != expect {
                return Err(Error::MalformedManifest(format!(
                    "class {} has {} train samples, distribution says {expect}",
                    i + 1,
                    idxs.len()
                )));
            }
        }
        for (i, idxs) in test_by_class.iter().enumerate() {
            if idxs.len() as u64 != distribution.test_per_class() {
                return Err(Error::MalformedManifest(format!(
                    "class {} has {} test samples, expected balanced {}",
                    i + 1,
                    idxs.len(),
                    distribution.test_per_class()
                )));
            }
        }
        Ok(Dataset {
            distribution,
            samples,
            index,
            train_by_class,
            test_by_class,
        })
    }

    pub fn distribution(&self) -> &ClassDistribution {
        &self.distribution
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, pos: usize) -> &Sample {
        &self.samples[pos]
    }

    pub fn lookup(&self, id: &SampleId) -> Option<&Sample> {
        self.index.get(id).map(|pos| &self.samples[*pos])
    }

    /// Train sample positions in manifest order.
    pub fn train_indices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.train_by_class.iter().flatten().cloned().collect();
        out.sort_unstable();
        out
    }

    pub fn test_indices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.test_by_class.iter().flatten().cloned().collect();
        out.sort_unstable();
        out
    }

    /// Train positions of one class, in manifest order.
    pub fn class_train_indices(&self, class_id: ClassId) -> &[usize] {
        &self.train_by_class[(class_id - 1) as usize]
    }

    /// Flattened payload width (feature dim, or `W*H*C` for images).
    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.payload.flat_len())
    }
}

/// Synthesize a Gaussian-cluster classification dataset: one mean per class
/// drawn uniformly on the sphere of radius `class_sep`, unit-variance
/// spherical samples around it. Train counts follow the distribution
/// exactly; the test split is balanced. Fully deterministic given `seed`.
///
/// Feature values are rounded through `f32` at construction so an LTT1
/// write/read round-trip reproduces the dataset bit-for-bit.
pub fn synth_gaussian_dataset(
    dist: &ClassDistribution,
    feature_dim: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if feature_dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "feature_dim must be >= 2, got {feature_dim}"
        )));
    }
    if !(class_sep > 0.0) || !class_sep.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "class_sep must be positive, got {class_sep}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dist.class_count();
    let mut means = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let raw: Vec<f64> = (0..feature_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        means.push(
            raw.into_iter()
                .map(|v| v / norm * class_sep)
                .collect::<Vec<f64>>(),
        );
    }
    let draw = |mean: &[f64], rng: &mut ChaCha8Rng| -> Result<Vector> {
        Vector::new(
            mean.iter()
                .map(|m| ltt1::quantize(m + rng.sample::<f64, _>(StandardNormal)))
                .collect(),
        )
    };
    let mut samples = Vec::new();
    for class_id in dist.class_ids() {
        let mean = &means[(class_id - 1) as usize];
        for i in 0..dist.count(class_id) {
            samples.push(Sample {
                id: SampleId(format!("c{class_id:03}_train_{i:04}")),
                class_id,
                split: SplitKind::Train,
                payload: Payload::Features(draw(mean, &mut rng)?),
            });
        }
    }
    for class_id in dist.class_ids() {
        let mean = &means[(class_id - 1) as usize];
        for i in 0..dist.test_per_class() {
            samples.push(Sample {
                id: SampleId(format!("c{class_id:03}_test_{i:04}")),
                class_id,
                split: SplitKind::Test,
                payload: Payload::Features(draw(mean, &mut rng)?),
            });
        }
    }
    Dataset::new(dist.clone(), samples)
}

pub const MANIFEST_HEADER: [&str; 4] = ["sample_id", "class_id", "split", "payload_path"];

/// Write `manifest.csv` (exact header `sample_id,class_id,split,payload_path`,
/// UTF-8, LF), one LTT1 payload file per sample under `payloads/`, and
/// `distribution.json` so a read round-trips the dataset losslessly.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("payloads"))?;
    let mut writer = csv::Writer::from_path(dir.join("manifest.csv"))?;
    writer.write_record(MANIFEST_HEADER)?;
    for s in dataset.samples() {
        let rel = format!("payloads/{}.ltt1", s.id);
        let (dims, data): (Vec<u32>, &[f64]) = match &s.payload {
            Payload::Features(v) => (vec![v.dim() as u32], v.as_slice()),
            Payload::Image(img) => (
                vec![img.height(), img.width(), img.channels()],
                img.data(),
            ),
        };
        ltt1::write_file(&dir.join(&rel), &dims, data)?;
        writer.write_record([
            s.id.0.as_str(),
            &s.class_id.to_string(),
            s.split.as_str(),
            &rel,
        ])?;
    }
    writer.flush()?;
    let json = serde_json::to_string_pretty(dataset.distribution())
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(dir.join("distribution.json"), json + "\n")?;
    Ok(())
}

/// Read a dataset directory produced by [`write_manifest`] (or assembled by
/// hand to the same contract). Distinct failures: malformed CSV, a missing
/// payload file (named), and a payload whose LTT1 header has an unexpected
/// rank or inconsistent shape.
pub fn read_manifest(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("manifest.csv");
    if !manifest.exists() {
        return Err(Error::MalformedManifest(format!(
            "no manifest.csv in {}",
            dir.display()
        )));
    }
    let mut reader = csv::Reader::from_path(&manifest)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::MalformedManifest(format!(
            "manifest header must be `{}`, got `{}`",
            MANIFEST_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut samples = Vec::new();
    let mut train_counts: BTreeMap<ClassId, u64> = BTreeMap::new();
    let mut test_counts: BTreeMap<ClassId, u64> = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 4 {
            return Err(Error::MalformedManifest(format!(
                "row {}: expected 4 fields, got {}",
                row + 2,
                record.len()
            )));
        }
        let id = SampleId(record[0].to_string());
        if id.0.is_empty() {
            return Err(Error::MalformedManifest(format!("row {}: empty sample id", row + 2)));
        }
        let class_id: ClassId = record[1].parse().map_err(|_| {
            Error::MalformedManifest(format!("row {}: bad class id `{}`", row + 2, &record[1]))
        })?;
        if class_id < 1 {
            return Err(Error::MalformedManifest(format!(
                "row {}: class ids are 1-based",
                row + 2
            )));
        }
        let split = SplitKind::parse(&record[2])?;
        let payload_path = dir.join(&record[3]);
        let (dims, data) = ltt1::read_file(&payload_path)?;
        let payload = match dims.len() {
            1 => Payload::Features(Vector::new(data)?),
            3 => {
                if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::MalformedTensor(format!(
                        "{}: image entries must lie in [0, 1]",
                        payload_path.display()
                    )));
                }
                Payload::Image(ImageTensor::new(dims[1], dims[0], dims[2], data)?)
            }
            rank => {
                return Err(Error::ShapeMismatch(format!(
                    "{}: payload rank {rank} unsupported (rank 1 features or rank 3 images)",
                    payload_path.display()
                )))
            }
        };
        *match split {
            SplitKind::Train => train_counts.entry(class_id).or_insert(0),
            SplitKind::Test => test_counts.entry(class_id).or_insert(0),
        } += 1;
        samples.push(Sample {
            id,
            class_id,
            split,
            payload,
        });
    }
    if samples.is_empty() {
        return Err(Error::MalformedManifest("manifest has no samples".into()));
    }
    let n = *train_counts.keys().last().unwrap_or(&0);
    let mut counts = Vec::with_capacity(n as usize);
    for class_id in 1..=n {
        match train_counts.get(&class_id) {
            Some(c) => counts.push(*c),
            None => {
                return Err(Error::MalformedManifest(format!(
                    "class {class_id} has no train samples"
                )))
            }
        }
    }
    let test_per_class = test_counts.values().next().cloned().unwrap_or(0);
    let distribution = match fs::read_to_string(dir.join("distribution.json")) {
        Ok(json) => {
            let dist: ClassDistribution = serde_json::from_str(&json)
                .map_err(|e| Error::MalformedManifest(format!("distribution.json: {e}")))?;
            if dist.counts() != counts.as_slice() {
                return Err(Error::MalformedManifest(
                    "distribution.json counts disagree with manifest rows".into(),
                ));
            }
            dist
        }
        Err(_) => ClassDistribution::new("ingested", counts, test_per_class)?,
    };
    Dataset::new(distribution, samples)
}

/// Feature vectors keyed by sample id; rows are stored in the order the ids
/// were supplied (the manifest train order, in the pipeline).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<SampleId>,
    index: BTreeMap<SampleId, usize>,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<SampleId>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        if ids.len() * dim != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids x dim {} != {} values",
                ids.len(),
                dim,
                data.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate embedding id {id}")));
            }
        }
        Ok(EmbeddingMatrix {
            ids,
            index,
            dim,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &SampleId) -> Option<&[f64]> {
        self.index
            .get(id)
            .map(|i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn vector(&self, id: &SampleId) -> Result<Vector> {
        match self.get(id) {
            Some(row) => Vector::new(row.to_vec()),
            None => Err(Error::InvalidArgument(format!(
                "missing embedding for sample {id}"
            ))),
        }
    }

    /// Rank-2 LTT1 `[rows, dim]`; row order is the stored id order.
    pub fn write_ltt1(&self, path: &Path) -> Result<()> {
        ltt1::write_file(path, &[self.ids.len() as u32, self.dim as u32], &self.data)
    }

    /// Load embeddings whose rows align with `ids` (manifest train order).
    pub fn read_ltt1(path: &Path, ids: Vec<SampleId>) -> Result<Self> {
        let (dims, data) = ltt1::read_file(path)?;
        if dims.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "embeddings must be rank 2, got rank {}",
                dims.len()
            )));
        }
        if dims[0] as usize != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "embeddings have {} rows, manifest has {} train samples",
                dims[0],
                ids.len()
            )));
        }
        EmbeddingMatrix::new(ids, dims[1] as usize, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pareto_endpoints_forced_for_two_classes() {
        for alpha in [0.5, 1.0, 6.0, 20.0] {
            let d = make_pareto_longtail(2, 10, 5, alpha, 0).unwrap();
            assert_eq!(d.counts(), &[10, 5]);
        }
    }

    #[test]
    fn pareto_food101_reference_numbers() {
        let d = make_pareto_longtail(101, 750, 5, 6.0, 0).unwrap();
        assert_eq!(*d.counts().iter().max().unwrap(), 750);
        assert_eq!(*d.counts().iter().min().unwrap(), 5);
        assert_eq!(imbalance_ratio(&d), 150.0);
        // frozen by direct summation of the rank formula
        assert_eq!(d.total_train(), 11523);
        let split = split_head_tail(&d);
        assert_eq!(split.head_classes().len(), 28);
        assert_eq!(split.tail_classes().len(), 73);
        assert_eq!(split.boundary_classes().len(), 0);
    }

    #[test]
    fn pareto_rejects_bad_ranges() {
        assert!(make_pareto_longtail(2, 5, 5, 6.0, 0).is_err());
        assert!(make_pareto_longtail(2, 5, 0, 6.0, 0).is_err());
        assert!(make_pareto_longtail(1, 5, 1, 6.0, 0).is_err());
        assert!(make_pareto_longtail(3, 5, 1, 0.0, 0).is_err());
    }

    #[test]
    fn frequency_match_examples() {
        let f = FrequencyTable::new(vec![2.0, 2.0, 2.0]).unwrap();
        assert_eq!(
            frequency_match_counts(&[7, 9, 11], &f).unwrap(),
            vec![7, 9, 11]
        );
        let f = FrequencyTable::new(vec![0.5, 1.0]).unwrap();
        assert_eq!(frequency_match_counts(&[350, 350], &f).unwrap(), vec![175, 350]);
        let f = FrequencyTable::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(frequency_match_counts(&[100, 100], &f).unwrap(), vec![1, 100]);
        assert!(FrequencyTable::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn frequency_match_is_monotone() {
        let f = FrequencyTable::new(vec![0.1, 0.4, 0.4, 0.9, 1.3]).unwrap();
        let s = frequency_match_counts(&[200, 200, 200, 200, 200], &f).unwrap();
        for w in s.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn split_examples() {
        let d = ClassDistribution::new("t", vec![10, 6, 2], 0).unwrap();
        let s = split_head_tail(&d);
        assert_eq!(s.m(), 6.0);
        assert_eq!(s.head_classes(), &[1]);
        assert_eq!(s.boundary_classes(), &[2]);
        assert_eq!(s.tail_classes(), &[3]);

        let d = ClassDistribution::new("t", vec![4, 4, 4], 0).unwrap();
        let s = split_head_tail(&d);
        assert!(s.head_classes().is_empty());
        assert!(s.tail_classes().is_empty());
        assert_eq!(s.boundary_classes(), &[1, 2, 3]);
    }

    #[test]
    fn split_partition_reproduces_mean() {
        let d = make_pareto_longtail(17, 301, 3, 4.5, 0).unwrap();
        let s = split_head_tail(&d);
        let all: usize =
            s.head_classes().len() + s.tail_classes().len() + s.boundary_classes().len();
        assert_eq!(all, 17);
        let total: u64 = s
            .head_classes()
            .iter()
            .chain(s.tail_classes())
            .chain(s.boundary_classes())
            .map(|c| d.count(*c))
            .sum();
        assert_eq!(total as f64 / 17.0, s.m());
    }

    #[test]
    fn imbalance_examples() {
        let d = ClassDistribution::new("t", vec![750, 400, 5], 0).unwrap();
        assert_eq!(imbalance_ratio(&d), 150.0);
        let d = ClassDistribution::new("t", vec![288, 4, 1], 0).unwrap();
        assert_eq!(imbalance_ratio(&d), 288.0);
        let d = ClassDistribution::new("t", vec![7, 7], 0).unwrap();
        assert_eq!(imbalance_ratio(&d), 1.0);
    }

    #[test]
    fn synth_counts_and_determinism() {
        let dist = ClassDistribution::new("t", vec![3, 3], 2).unwrap();
        let ds = synth_gaussian_dataset(&dist, 4, 2.0, 9).unwrap();
        assert_eq!(ds.train_indices().len(), 6);
        assert_eq!(ds.test_indices().len(), 4);
        let ds2 = synth_gaussian_dataset(&dist, 4, 2.0, 9).unwrap();
        assert_eq!(ds, ds2);
        let ds3 = synth_gaussian_dataset(&dist, 4, 2.0, 10).unwrap();
        assert_ne!(ds, ds3);
    }

    #[test]
    fn synth_sanity_nearest_mean_oracle() {
        // balanced 20-way problem at sep 8: a linear nearest-mean rule
        // trained on the train split must clear 95% on the test split
        let dist = ClassDistribution::new("sanity", vec![30; 20], 20).unwrap();
        let ds = synth_gaussian_dataset(&dist, 10, 8.0, 3).unwrap();
        let mut means = vec![vec![0.0; 10]; 20];
        for &pos in &ds.train_indices() {
            let s = ds.sample(pos);
            for (m, v) in means[(s.class_id - 1) as usize]
                .iter_mut()
                .zip(s.payload.flat())
            {
                *m += v / 30.0;
            }
        }
        let mut hits = 0usize;
        let test = ds.test_indices();
        for &pos in &test {
            let s = ds.sample(pos);
            let x = s.payload.flat();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, mean) in means.iter().enumerate() {
                let d: f64 = mean.iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best as u32 + 1 == s.class_id {
                hits += 1;
            }
        }
        let acc = hits as f64 / test.len() as f64;
        assert!(acc > 0.95, "nearest-mean accuracy {acc}");
    }

    #[test]
    fn manifest_round_trip() {
        let dist = ClassDistribution::new("rt", vec![2, 3], 1).unwrap();
        let ds = synth_gaussian_dataset(&dist, 5, 2.0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&ds, dir.path()).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn manifest_byte_determinism() {
        let dist = ClassDistribution::new("det", vec![2, 2], 1).unwrap();
        let ds = synth_gaussian_dataset(&dist, 3, 2.0, 7).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_manifest(&ds, d1.path()).unwrap();
        write_manifest(&ds, d2.path()).unwrap();
        let m1 = fs::read(d1.path().join("manifest.csv")).unwrap();
        let m2 = fs::read(d2.path().join("manifest.csv")).unwrap();
        assert_eq!(m1, m2);
        let p1 = fs::read(d1.path().join("payloads/c001_train_0000.ltt1")).unwrap();
        let p2 = fs::read(d2.path().join("payloads/c001_train_0000.ltt1")).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn manifest_missing_payload_names_path() {
        let dist = ClassDistribution::new("mp", vec![1], 0).unwrap();
        let ds = synth_gaussian_dataset(&dist, 3, 2.0, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&ds, dir.path()).unwrap();
        let victim = dir.path().join("payloads/c001_train_0000.ltt1");
        fs::remove_file(&victim).unwrap();
        match read_manifest(dir.path()) {
            Err(Error::MissingPayload(p)) => assert_eq!(p, victim),
            other => panic!("expected MissingPayload, got {other:?}"),
        }
    }

    #[test]
    fn manifest_rank2_payload_is_shape_mismatch() {
        let dist = ClassDistribution::new("r2", vec![1], 0).unwrap();
        let ds = synth_gaussian_dataset(&dist, 3, 2.0, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&ds, dir.path()).unwrap();
        ltt1::write_file(
            &dir.path().join("payloads/c001_train_0000.ltt1"),
            &[1, 3],
            &[0.0, 0.0, 0.0],
        )
        .unwrap();
        assert!(matches!(
            read_manifest(dir.path()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn duplicate_sample_ids_rejected() {
        let dist = ClassDistribution::new("dup", vec![2], 0).unwrap();
        let ds = synth_gaussian_dataset(&dist, 3, 2.0, 0).unwrap();
        let mut samples = ds.samples().to_vec();
        samples[1].id = samples[0].id.clone();
        let err = Dataset::new(dist, samples).unwrap_err();
        assert!(err.to_string().contains("duplicate sample id"));
    }

    #[test]
    fn mixed_payload_shapes_rejected() {
        let dist = ClassDistribution::new("mix", vec![2], 0).unwrap();
        let ds = synth_gaussian_dataset(&dist, 3, 2.0, 0).unwrap();
        let mut samples = ds.samples().to_vec();
        samples[1].payload = Payload::Features(Vector::new(vec![0.0; 5]).unwrap());
        assert!(matches!(
            Dataset::new(dist, samples),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn frequency_csv_requires_contiguous_ids_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(&path, "class,freq\n1,1.0\n").unwrap();
        assert!(matches!(
            FrequencyTable::read_csv(&path),
            Err(Error::MalformedManifest(_))
        ));
        fs::write(&path, "class_id,frequency\n1,1.0\n3,2.0\n").unwrap();
        assert!(matches!(
            FrequencyTable::read_csv(&path),
            Err(Error::MalformedManifest(_))
        ));
        fs::write(&path, "class_id,frequency\n1,1.5\n2,0.5\n").unwrap();
        let table = FrequencyTable::read_csv(&path).unwrap();
        assert_eq!(table.freqs(), &[1.5, 0.5]);
        let out = dir.path().join("rt.csv");
        table.write_csv(&out).unwrap();
        assert_eq!(FrequencyTable::read_csv(&out).unwrap(), table);
    }

    #[test]
    fn manifest_bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("manifest.csv"),
            "id,class,split,path\na,1,train,p.ltt1\n",
        )
        .unwrap();
        assert!(matches!(
            read_manifest(dir.path()),
            Err(Error::MalformedManifest(_))
        ));
    }

    #[test]
    fn embedding_matrix_lookup_and_io() {
        let ids = vec![SampleId::from("a"), SampleId::from("b")];
        let m = EmbeddingMatrix::new(ids.clone(), 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.get(&SampleId::from("b")).unwrap(), &[3.0, 4.0]);
        assert!(m.vector(&SampleId::from("zz")).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ltt1");
        m.write_ltt1(&path).unwrap();
        let back = EmbeddingMatrix::read_ltt1(&path, ids).unwrap();
        assert_eq!(m, back);
    }

    proptest! {
        #[test]
        fn pareto_counts_monotone_with_exact_endpoints(
            n in 2u32..60,
            n_min in 1u64..50,
            extra in 1u64..950,
            alpha in 0.1f64..12.0,
        ) {
            let n_max = n_min + extra;
            let d = make_pareto_longtail(n, n_max, n_min, alpha, 0).unwrap();
            prop_assert_eq!(d.counts()[0], n_max);
            prop_assert_eq!(d.counts()[(n - 1) as usize], n_min);
            for w in d.counts().windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }

        #[test]
        fn frequency_match_monotone_under_equal_counts(
            base in 1u64..500,
            mut freqs in proptest::collection::vec(0.0f64..10.0, 2..12),
        ) {
            freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if freqs.iter().all(|f| *f == 0.0) {
                freqs[0] = 1.0;
                freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
            let table = FrequencyTable::new(freqs.clone()).unwrap();
            let counts = vec![base; freqs.len()];
            let s = frequency_match_counts(&counts, &table).unwrap();
            for w in s.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }
}
