//! Visual-aware multi-image CutMix oversampling of tail classes: mask
//! sampling, top-k similar head-image selection from the removed pool,
//! pixel mixing, and area-weighted soft-label construction.
//!
//! Feature-vector datasets participate by treating a `dim`-vector as a
//! `1 x dim x 1` image, so a mask becomes a contiguous coordinate span.

use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::data::{ClassId, Dataset, EmbeddingMatrix, HeadTailSplit, Payload, SampleId};
use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, ImageTensor, ProbVector, Vector};

/// Largest supported number of mixed source images per recipe.
pub const K_MAX: usize = 10;

/// Axis-aligned paste rectangle with its mixing ratio `s`. Extents satisfy
/// `w = round(s*W)`, `h = round(s*H)` and the rectangle lies fully inside
/// the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskRect {
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
    pub s: f64,
}

impl MaskRect {
    /// Pasted-area fraction of a `width x height` image.
    pub fn area_fraction(&self, width: u32, height: u32) -> f64 {
        (self.w as u64 * self.h as u64) as f64 / (width as u64 * height as u64) as f64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x0.checked_add(self.w).is_some_and(|x| x <= width)
            && self.y0.checked_add(self.h).is_some_and(|y| y <= height)
    }
}

fn mask_extents(width: u32, height: u32, s: f64) -> Result<(u32, u32)> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mixing ratio must satisfy 0 < s < 1, got {s}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("image extent must be positive".into()));
    }
    Ok(((s * width as f64).round() as u32, (s * height as f64).round() as u32))
}

fn place(width: u32, height: u32, w: u32, h: u32, s: f64, rng: &mut impl Rng) -> MaskRect {
    let x0 = rng.random_range(0..=(width - w));
    let y0 = rng.random_range(0..=(height - h));
    MaskRect { x0, y0, w, h, s }
}

/// Uniformly random placement of a `round(s*W) x round(s*H)` rectangle
/// fully inside the image. A zero extent on either axis is a degenerate
/// rectangle and an invalid-argument error.
pub fn sample_mask(width: u32, height: u32, s: f64, rng: &mut impl Rng) -> Result<MaskRect> {
    let (w, h) = mask_extents(width, height, s)?;
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate zero-extent mask: {w}x{h} from s={s} on {width}x{height}"
        )));
    }
    Ok(place(width, height, w, h, s, rng))
}

/// Pipeline variant of [`sample_mask`] that clamps each extent up to one
/// pixel, so thin payloads (feature vectors seen as height-1 images) keep a
/// valid mask for any `s`.
pub fn sample_mask_clamped(
    width: u32,
    height: u32,
    s: f64,
    rng: &mut impl Rng,
) -> Result<MaskRect> {
    let (w, h) = mask_extents(width, height, s)?;
    Ok(place(width, height, w.max(1), h.max(1), s, rng))
}

/// Sample a mask for an arbitrary payload extent. A 2-D mask at ratio `s`
/// pastes an area fraction of `s^2`; height-1 payloads (feature vectors)
/// therefore use a span of `round(s^2 * dim)` coordinates so the pasted
/// fraction matches what the same `s` would paste on an image. The stored
/// ratio is the effective linear one.
pub fn sample_payload_mask(
    width: u32,
    height: u32,
    s: f64,
    rng: &mut impl Rng,
) -> Result<MaskRect> {
    if height == 1 {
        sample_mask_clamped(width, 1, s * s, rng)
    } else {
        sample_mask_clamped(width, height, s, rng)
    }
}

/// A randomly drawn batch from the head-class source pool plus the
/// embeddings used for similarity ranking.
#[derive(Debug, Clone)]
pub struct HeadBatch {
    ids: Vec<SampleId>,
    embeddings: Vec<Vector>,
}

impl HeadBatch {
    pub fn new(ids: Vec<SampleId>, embeddings: Vec<Vector>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("head batch must be nonempty".into()));
        }
        if ids.len() != embeddings.len() {
            return Err(Error::InvalidArgument(format!(
                "head batch: {} ids vs {} embeddings",
                ids.len(),
                embeddings.len()
            )));
        }
        Ok(HeadBatch { ids, embeddings })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }
}

/// The `k` batch members most similar to the tail embedding by cosine
/// similarity, in descending order, ties to the lowest batch index.
pub fn topk_similar(
    tail_embedding: &Vector,
    batch: &HeadBatch,
    k: usize,
) -> Result<Vec<SampleId>> {
    if k < 1 || k > batch.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} out of range 1..={}",
            batch.len()
        )));
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(batch.len());
    for (i, e) in batch.embeddings.iter().enumerate() {
        scored.push((i, cosine_similarity(tail_embedding, e)?));
    }
    scored.sort_by(|(ia, sa), (ib, sb)| {
        sb.partial_cmp(sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(ib))
    });
    Ok(scored[..k].iter().map(|(i, _)| batch.ids[*i].clone()).collect())
}

/// Per-pixel ownership after pasting `masks` in order onto a base image:
/// 0 means the base survives, `j >= 1` means mask `j - 1` painted last.
/// Returns the ownership map and visible pixel counts per owner.
fn paint_ownership(width: u32, height: u32, masks: &[MaskRect]) -> (Vec<u8>, Vec<u64>) {
    let mut owner = vec![0u8; width as usize * height as usize];
    for (j, m) in masks.iter().enumerate() {
        for y in m.y0..m.y0 + m.h {
            let row = y as usize * width as usize;
            for x in m.x0..m.x0 + m.w {
                owner[row + x as usize] = (j + 1) as u8;
            }
        }
    }
    let mut counts = vec![0u64; masks.len() + 1];
    for o in &owner {
        counts[*o as usize] += 1;
    }
    (owner, counts)
}

/// Mix flat row-major payloads (`channels` values per pixel) according to
/// the ownership map produced by [`paint_ownership`].
fn splice_flat(base: &[f64], sources: &[&[f64]], owner: &[u8], channels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(base.len());
    for (pix, o) in owner.iter().enumerate() {
        let src = if *o == 0 { base } else { sources[*o as usize - 1] };
        out.extend_from_slice(&src[pix * channels..(pix + 1) * channels]);
    }
    out
}

fn area_soft_label(
    counts: &[u64],
    total_pixels: u64,
    base_class: ClassId,
    source_classes: &[ClassId],
    class_count: u32,
) -> Result<ProbVector> {
    let mut label = vec![0.0f64; class_count as usize];
    label[(base_class - 1) as usize] += counts[0] as f64 / total_pixels as f64;
    for (j, class) in source_classes.iter().enumerate() {
        label[(*class - 1) as usize] += counts[j + 1] as f64 / total_pixels as f64;
    }
    ProbVector::new(label)
}

/// Paste `sources` onto `base` in order (later pastes overwrite earlier
/// ones in overlap regions). Every output pixel comes from exactly one
/// input; the soft label weights each class by its visible-pixel fraction.
pub fn multi_cutmix(
    base: &ImageTensor,
    sources: &[(ImageTensor, MaskRect)],
    base_class: ClassId,
    source_classes: &[ClassId],
    class_count: u32,
) -> Result<(ImageTensor, ProbVector)> {
    if sources.is_empty() || sources.len() > K_MAX {
        return Err(Error::InvalidArgument(format!(
            "need 1..={K_MAX} sources, got {}",
            sources.len()
        )));
    }
    if source_classes.len() != sources.len() {
        return Err(Error::InvalidArgument(
            "one source class per source image required".into(),
        ));
    }
    for (img, mask) in sources {
        if !img.same_shape(base) {
            return Err(Error::ShapeMismatch(
                "source image shape differs from base".into(),
            ));
        }
        if !mask.fits(base.width(), base.height()) {
            return Err(Error::InvalidArgument(format!(
                "mask {mask:?} does not fit a {}x{} image",
                base.width(),
                base.height()
            )));
        }
    }
    let masks: Vec<MaskRect> = sources.iter().map(|(_, m)| *m).collect();
    let (owner, counts) = paint_ownership(base.width(), base.height(), &masks);
    let flats: Vec<&[f64]> = sources.iter().map(|(img, _)| img.data()).collect();
    let mixed = splice_flat(base.data(), &flats, &owner, base.channels() as usize);
    let label = area_soft_label(
        &counts,
        base.width() as u64 * base.height() as u64,
        base_class,
        source_classes,
        class_count,
    )?;
    let out = ImageTensor::from_parts_unchecked(base.width(), base.height(), base.channels(), mixed);
    Ok((out, label))
}

/// [`multi_cutmix`] over generic payloads. Feature vectors mix as height-1
/// single-channel images (contiguous coordinate spans).
pub fn mix_payloads(
    base: &Payload,
    sources: &[(&Payload, MaskRect)],
    base_class: ClassId,
    source_classes: &[ClassId],
    class_count: u32,
) -> Result<(Payload, ProbVector)> {
    if sources.is_empty() || sources.len() > K_MAX {
        return Err(Error::InvalidArgument(format!(
            "need 1..={K_MAX} sources, got {}",
            sources.len()
        )));
    }
    match base {
        Payload::Image(img) => {
            let srcs: Vec<(ImageTensor, MaskRect)> = sources
                .iter()
                .map(|(p, m)| match p {
                    Payload::Image(i) => Ok((i.clone(), *m)),
                    Payload::Features(_) => Err(Error::ShapeMismatch(
                        "cannot mix a feature vector into an image".into(),
                    )),
                })
                .collect::<Result<_>>()?;
            let (mixed, label) =
                multi_cutmix(img, &srcs, base_class, source_classes, class_count)?;
            Ok((Payload::Image(mixed), label))
        }
        Payload::Features(v) => {
            let (width, height) = (v.dim() as u32, 1u32);
            for (p, mask) in sources {
                match p {
                    Payload::Features(sv) if sv.dim() == v.dim() => {}
                    _ => {
                        return Err(Error::ShapeMismatch(
                            "source payload shape differs from base".into(),
                        ))
                    }
                }
                if !mask.fits(width, height) {
                    return Err(Error::InvalidArgument(format!(
                        "mask {mask:?} does not fit a dim-{} vector",
                        v.dim()
                    )));
                }
            }
            let masks: Vec<MaskRect> = sources.iter().map(|(_, m)| *m).collect();
            let (owner, counts) = paint_ownership(width, height, &masks);
            let flats: Vec<&[f64]> = sources.iter().map(|(p, _)| p.flat()).collect();
            let mixed = splice_flat(v.as_slice(), &flats, &owner, 1);
            let label = area_soft_label(
                &counts,
                width as u64,
                base_class,
                source_classes,
                class_count,
            )?;
            Ok((Payload::Features(Vector::new(mixed)?), label))
        }
    }
}

/// One augmented sample's provenance: the base tail sample, the pasted
/// sources in paste order (most similar pasted last), and the soft label.
#[derive(Debug, Clone, PartialEq)]
pub struct MixRecipe {
    pub base_id: SampleId,
    pub base_class: ClassId,
    pub sources: Vec<(SampleId, ClassId, MaskRect)>,
    pub soft_label: ProbVector,
}

/// One oversampled tail item: a mixed recipe, or a plain duplicate when the
/// source pool is empty (random-oversampling fallback) or for ROS arms.
#[derive(Debug, Clone, PartialEq)]
pub enum TailItem {
    Mixed(MixRecipe),
    Duplicate { base_id: SampleId, class_id: ClassId },
}

impl TailItem {
    pub fn base_id(&self) -> &SampleId {
        match self {
            TailItem::Mixed(r) => &r.base_id,
            TailItem::Duplicate { base_id, .. } => base_id,
        }
    }
}

/// Everything one oversampling pass produced. `ros_fallback` is set when an
/// empty head-source pool forced plain duplication.
#[derive(Debug, Clone, PartialEq)]
pub struct OversamplePlan {
    pub items: Vec<TailItem>,
    pub ros_fallback: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    pub k: usize,
    pub batch_size_br: usize,
    pub s_lo: f64,
    pub s_hi: f64,
    /// Rank sources by cosine similarity (vs. random batch order).
    pub visual_aware: bool,
    /// Keep the pure tail one-hot label instead of area weighting.
    pub hard_tail_label: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            k: 1,
            batch_size_br: 64,
            s_lo: 0.1,
            s_hi: 0.5,
            visual_aware: true,
            hard_tail_label: false,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k > K_MAX {
            return Err(Error::InvalidArgument(format!(
                "k must be in 1..={K_MAX}, got {}",
                self.k
            )));
        }
        if self.batch_size_br < 1 {
            return Err(Error::InvalidArgument("batch_size_Br must be >= 1".into()));
        }
        if !(self.s_lo > 0.0 && self.s_hi < 1.0 && self.s_lo <= self.s_hi) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < s_lo <= s_hi < 1, got [{}, {}]",
                self.s_lo, self.s_hi
            )));
        }
        Ok(())
    }
}

fn draw_s(lo: f64, hi: f64, rng: &mut impl Rng) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Generate tail-class oversampling items: each tail class receives
/// `floor(m) - n_i` items, base samples cycling round-robin through the
/// class's real samples in manifest order. Each mixed item draws a fresh
/// head batch from `source_pool`, ranks it (visual-aware or random),
/// samples one mask per source, and pastes in ascending-similarity order.
///
/// `teacher_embed` supplies embeddings for samples missing from
/// `embeddings`. An empty `source_pool` falls back to plain duplication
/// and sets the plan's warning flag.
pub fn oversample_tail(
    dataset: &Dataset,
    split: &HeadTailSplit,
    source_pool: &[SampleId],
    embeddings: &EmbeddingMatrix,
    teacher_embed: &mut dyn FnMut(&Payload) -> Result<Vector>,
    params: &AugmentParams,
    rng: &mut impl Rng,
) -> Result<OversamplePlan> {
    params.validate()?;
    let floor_m = split.floor_m();
    let class_count = dataset.distribution().class_count();
    let mut items = Vec::new();
    let mut ros_fallback = false;
    let embed_of = |id: &SampleId,
                    payload: &Payload,
                    teacher_embed: &mut dyn FnMut(&Payload) -> Result<Vector>|
     -> Result<Vector> {
        match embeddings.get(id) {
            Some(row) => Vector::new(row.to_vec()),
            None => teacher_embed(payload),
        }
    };
    for &class_id in split.tail_classes() {
        let real = dataset.class_train_indices(class_id);
        if real.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "tail class {class_id} has no real samples"
            )));
        }
        let n_i = real.len() as u64;
        let deficit = floor_m.saturating_sub(n_i);
        for r in 0..deficit {
            let base_pos = real[(r % n_i) as usize];
            let base = dataset.sample(base_pos);
            if source_pool.is_empty() {
                ros_fallback = true;
                items.push(TailItem::Duplicate {
                    base_id: base.id.clone(),
                    class_id,
                });
                continue;
            }
            // fresh head batch per recipe
            let take = params.batch_size_br.min(source_pool.len());
            let picked = index_sample(rng, source_pool.len(), take);
            let mut batch_ids = Vec::with_capacity(take);
            let mut batch_embs = Vec::with_capacity(take);
            for idx in picked.iter() {
                let id = &source_pool[idx];
                let s = dataset.lookup(id).ok_or_else(|| {
                    Error::InvalidArgument(format!("source pool id {id} not in dataset"))
                })?;
                batch_ids.push(id.clone());
                batch_embs.push(embed_of(id, &s.payload, teacher_embed)?);
            }
            let batch = HeadBatch::new(batch_ids, batch_embs)?;
            let k_eff = params.k.min(batch.len());
            let tail_emb = embed_of(&base.id, &base.payload, teacher_embed)?;
            let chosen: Vec<SampleId> = if params.visual_aware {
                let rankable = tail_emb.l2_norm() > 0.0
                    && batch.embeddings.iter().all(|e| e.l2_norm() > 0.0);
                if rankable {
                    topk_similar(&tail_emb, &batch, k_eff)?
                } else {
                    // no usable similarity signal; keep the random batch order
                    batch.ids()[..k_eff].to_vec()
                }
            } else {
                batch.ids()[..k_eff].to_vec()
            };
            // paste least-similar first so the most similar source stays on top
            let (w, h) = base.payload.mix_extent();
            let mut sources = Vec::with_capacity(k_eff);
            for id in chosen.iter().rev() {
                let s = draw_s(params.s_lo, params.s_hi, rng);
                let mask = sample_payload_mask(w, h, s, rng)?;
                let class = dataset.lookup(id).unwrap().class_id;
                sources.push((id.clone(), class, mask));
            }
            let masks: Vec<MaskRect> = sources.iter().map(|(_, _, m)| *m).collect();
            let (_, counts) = paint_ownership(w, h, &masks);
            let soft_label = if params.hard_tail_label {
                ProbVector::one_hot(class_count as usize, (class_id - 1) as usize)?
            } else {
                let source_classes: Vec<ClassId> = sources.iter().map(|(_, c, _)| *c).collect();
                area_soft_label(
                    &counts,
                    w as u64 * h as u64,
                    class_id,
                    &source_classes,
                    class_count,
                )?
            };
            items.push(TailItem::Mixed(MixRecipe {
                base_id: base.id.clone(),
                base_class: class_id,
                sources,
                soft_label,
            }));
        }
    }
    Ok(OversamplePlan {
        items,
        ros_fallback,
    })
}

/// Deterministic round-robin duplication of tail samples up to `floor(m)`
/// (the classic random-oversampling arm).
pub fn duplicate_tail(dataset: &Dataset, split: &HeadTailSplit) -> OversamplePlan {
    let floor_m = split.floor_m();
    let mut items = Vec::new();
    for &class_id in split.tail_classes() {
        let real = dataset.class_train_indices(class_id);
        let n_i = real.len() as u64;
        for r in 0..floor_m.saturating_sub(n_i) {
            items.push(TailItem::Duplicate {
                base_id: dataset.sample(real[(r % n_i) as usize]).id.clone(),
                class_id,
            });
        }
    }
    OversamplePlan {
        items,
        ros_fallback: false,
    }
}

/// Materialize a recipe: look up payloads and splice them per the stored
/// masks. The returned label is the recipe's stored soft label.
pub fn render_recipe(recipe: &MixRecipe, dataset: &Dataset) -> Result<(Payload, ProbVector)> {
    let base = dataset
        .lookup(&recipe.base_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown base id {}", recipe.base_id)))?;
    let mut payloads = Vec::with_capacity(recipe.sources.len());
    for (id, _, _) in &recipe.sources {
        let s = dataset
            .lookup(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown source id {id}")))?;
        payloads.push(&s.payload);
    }
    let sources: Vec<(&Payload, MaskRect)> = payloads
        .iter()
        .zip(&recipe.sources)
        .map(|(p, (_, _, m))| (*p, *m))
        .collect();
    let source_classes: Vec<ClassId> = recipe.sources.iter().map(|(_, c, _)| *c).collect();
    let (mixed, _) = mix_payloads(
        &base.payload,
        &sources,
        recipe.base_class,
        &source_classes,
        dataset.distribution().class_count(),
    )?;
    Ok((mixed, recipe.soft_label.clone()))
}

pub const RECIPES_HEADER: [&str; 4] = ["base_id", "source_ids", "mask_rects", "label_weights"];

/// Write `base_id,source_ids,mask_rects,label_weights`. Lists are
/// `;`-joined; masks encode as `x0:y0:w:h:s`, label weights as
/// `class:weight`. Duplicates have empty source and mask fields.
pub fn write_recipes_csv(plan: &OversamplePlan, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(RECIPES_HEADER)?;
    for item in &plan.items {
        match item {
            TailItem::Mixed(r) => {
                let ids: Vec<String> = r.sources.iter().map(|(id, _, _)| id.0.clone()).collect();
                let masks: Vec<String> = r
                    .sources
                    .iter()
                    .map(|(_, _, m)| format!("{}:{}:{}:{}:{:.6}", m.x0, m.y0, m.w, m.h, m.s))
                    .collect();
                let weights: Vec<String> = r
                    .soft_label
                    .as_slice()
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w > 0.0)
                    .map(|(i, w)| format!("{}:{:.6}", i + 1, w))
                    .collect();
                writer.write_record([
                    r.base_id.0.clone(),
                    ids.join(";"),
                    masks.join(";"),
                    weights.join(";"),
                ])?;
            }
            TailItem::Duplicate { base_id, class_id } => {
                writer.write_record([
                    base_id.0.clone(),
                    String::new(),
                    String::new(),
                    format!("{class_id}:1.000000"),
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}
