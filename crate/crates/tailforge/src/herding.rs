//! Herding-based exemplar selection: partitions each head class into the
//! retained representative set and the removed pool that later feeds the
//! tail-class augmentation.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{ClassId, Dataset, EmbeddingMatrix, HeadTailSplit, SampleId};
use crate::error::{Error, Result};
use crate::tensor::{class_mean, Vector};

/// One class's selection outcome: `selected` in herding pick order,
/// `removed` in input order. The two partition the class's sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub selected: Vec<SampleId>,
    pub removed: Vec<SampleId>,
}

/// Greedy herding. Let `mu` be the class mean of `features`; at step
/// `t = 1..budget` pick the remaining sample minimizing
/// `|mu - (x + sum of previous picks) / t|_2`, ties to the lowest index.
pub fn herd_select(
    ids: &[SampleId],
    features: &[Vector],
    budget: usize,
) -> Result<SelectionResult> {
    if ids.len() != features.len() {
        return Err(Error::InvalidArgument(format!(
            "herding: {} ids vs {} feature rows",
            ids.len(),
            features.len()
        )));
    }
    if budget < 1 || budget > features.len() {
        return Err(Error::InvalidArgument(format!(
            "herding budget {budget} out of range 1..={}",
            features.len()
        )));
    }
    let mu = class_mean(features)?;
    let dim = mu.dim();
    let mut taken = vec![false; features.len()];
    let mut running_sum = vec![0.0f64; dim];
    let mut picks = Vec::with_capacity(budget);
    for t in 1..=budget {
        let mut best: Option<(usize, f64)> = None;
        for (i, x) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let mut dist_sq = 0.0;
            for d in 0..dim {
                let candidate_mean = (running_sum[d] + x.as_slice()[d]) / t as f64;
                let diff = mu.as_slice()[d] - candidate_mean;
                dist_sq += diff * diff;
            }
            // strict < keeps the lowest index on exact ties
            if best.map_or(true, |(_, b)| dist_sq < b) {
                best = Some((i, dist_sq));
            }
        }
        let (pick, _) = best.expect("budget <= remaining candidates");
        taken[pick] = true;
        for (s, v) in running_sum.iter_mut().zip(features[pick].as_slice()) {
            *s += v;
        }
        picks.push(pick);
    }
    let selected = picks.iter().map(|i| ids[*i].clone()).collect();
    let removed = ids
        .iter()
        .enumerate()
        .filter(|(i, _)| !taken[*i])
        .map(|(_, id)| id.clone())
        .collect();
    Ok(SelectionResult { selected, removed })
}

/// Run herding on every head class with budget `floor(m)`. Tail and
/// boundary classes are untouched. `normalize` rescales each feature to
/// unit L2 norm before herding (off by default in the pipeline).
pub fn undersample_heads(
    dataset: &Dataset,
    embeddings: &EmbeddingMatrix,
    split: &HeadTailSplit,
    normalize: bool,
) -> Result<BTreeMap<ClassId, SelectionResult>> {
    let budget = split.floor_m() as usize;
    let mut out = BTreeMap::new();
    for &class_id in split.head_classes() {
        let mut ids = Vec::new();
        let mut features = Vec::new();
        for &pos in dataset.class_train_indices(class_id) {
            let sample = dataset.sample(pos);
            let v = embeddings.vector(&sample.id)?;
            let v = if normalize { v.normalized()? } else { v };
            ids.push(sample.id.clone());
            features.push(v);
        }
        out.insert(class_id, herd_select(&ids, &features, budget)?);
    }
    Ok(out)
}

pub const SELECTION_HEADER: [&str; 4] = ["class_id", "sample_id", "rank", "kept"];

/// Write `class_id,sample_id,rank,kept` rows for every head-class sample:
/// kept samples carry their 1-based herding pick order, removed ones -1.
pub fn write_selection_csv(
    selection: &BTreeMap<ClassId, SelectionResult>,
    path: &Path,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(SELECTION_HEADER)?;
    for (class_id, result) in selection {
        for (rank, id) in result.selected.iter().enumerate() {
            writer.write_record([
                class_id.to_string(),
                id.0.clone(),
                (rank + 1).to_string(),
                "1".to_string(),
            ])?;
        }
        for id in &result.removed {
            writer.write_record([
                class_id.to_string(),
                id.0.clone(),
                "-1".to_string(),
                "0".to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn read_selection_csv(path: &Path) -> Result<BTreeMap<ClassId, SelectionResult>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != SELECTION_HEADER {
        return Err(Error::MalformedManifest(format!(
            "selection header must be `{}`",
            SELECTION_HEADER.join(",")
        )));
    }
    let mut ranked: BTreeMap<ClassId, Vec<(i64, SampleId)>> = BTreeMap::new();
    let mut removed: BTreeMap<ClassId, Vec<SampleId>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let class_id: ClassId = record[0]
            .parse()
            .map_err(|_| Error::MalformedManifest("bad class_id in selection".into()))?;
        let id = SampleId(record[1].to_string());
        let rank: i64 = record[2]
            .parse()
            .map_err(|_| Error::MalformedManifest("bad rank in selection".into()))?;
        let kept = &record[3] == "1";
        if kept {
            ranked.entry(class_id).or_default().push((rank, id));
        } else {
            removed.entry(class_id).or_default().push(id);
        }
    }
    let mut out = BTreeMap::new();
    for (class_id, mut rows) in ranked {
        rows.sort_by_key(|(rank, _)| *rank);
        out.insert(
            class_id,
            SelectionResult {
                selected: rows.into_iter().map(|(_, id)| id).collect(),
                removed: removed.remove(&class_id).unwrap_or_default(),
            },
        );
    }
    // classes with nothing kept (shouldn't happen, but don't drop rows)
    for (class_id, rem) in removed {
        out.insert(
            class_id,
            SelectionResult {
                selected: Vec::new(),
                removed: rem,
            },
        );
    }
    Ok(out)
}
