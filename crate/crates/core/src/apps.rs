//! Downstream uses of the trained models: the loss-complementarity
//! experiment on manipulated masks, multi-atlas segmentation, registration
//! based quality estimation (reverse classification accuracy), and anatomy
//! code export.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMask, NUM_CLASSES};
use crate::losses::{ae_loss, ce_loss};
use crate::metrics::dice;
use crate::models::{AnatomyCode, Autoencoder, VectorCnn};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::warp::{hard_labels, warp_onehot_tensor};
use crate::seeded_rng;

/// Pixel budget of the plausibility experiment.
pub const PLAUSIBILITY_BUDGET: usize = 120;
/// Estimated Dice at or above which a segmentation is accepted.
pub const RCA_ACCEPT_THRESHOLD: f64 = 0.92;
pub const DEFAULT_ATLASES: usize = 5;

/// A labelled image used as atlas or reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    pub id: String,
    pub image: Image,
    pub mask: LabelMask,
}

fn is_border(mask: &LabelMask, r: usize, c: usize) -> bool {
    let l = mask.at(r, c);
    let (h, w) = (mask.height, mask.width);
    (r > 0 && mask.at(r - 1, c) != l)
        || (r + 1 < h && mask.at(r + 1, c) != l)
        || (c > 0 && mask.at(r, c - 1) != l)
        || (c + 1 < w && mask.at(r, c + 1) != l)
}

/// Set exactly `k` foreground pixels to background by peeling structure
/// boundaries layer by layer. Each layer is the set of foreground pixels with
/// a differently labelled 4-neighbour, in scan order; when a layer holds more
/// pixels than the remaining budget, an evenly spaced subset of it is taken so
/// the erosion spreads over all structures.
pub fn erode_boundary(mask: &LabelMask, k: usize) -> Result<LabelMask> {
    let mut out = mask.clone();
    let mut remaining = k;
    while remaining > 0 {
        let layer: Vec<(usize, usize)> = (0..out.height)
            .flat_map(|r| (0..out.width).map(move |c| (r, c)))
            .filter(|&(r, c)| out.at(r, c) != 0 && is_border(&out, r, c))
            .collect();
        if layer.is_empty() {
            return Err(Error::Infeasible(format!("only {} foreground pixels can be eroded, {k} requested", k - remaining)));
        }
        let take = remaining.min(layer.len());
        for i in 0..take {
            let (r, c) = layer[(2 * i + 1) * layer.len() / (2 * take)];
            out.set(r, c, 0);
        }
        remaining -= take;
    }
    Ok(out)
}

/// Block shapes of exactly `k` pixels, most square first.
fn block_shapes(k: usize) -> Vec<(usize, usize)> {
    let mut shapes: Vec<(usize, usize)> = (1..=k).filter(|h| k % h == 0).map(|h| (h, k / h)).collect();
    shapes.sort_by_key(|&(h, w)| (h.max(w) - h.min(w), h));
    shapes
}

/// Axis-aligned block of `k` pixels lying entirely inside `label`, avoiding
/// `taken`, at a seeded random admissible position. Tries near-square shapes first.
fn find_block(mask: &LabelMask, label: u8, k: usize, taken: &[(usize, usize, usize, usize)], rng: &mut impl Rng) -> Option<(usize, usize, usize, usize)> {
    let overlaps = |(r, c, h, w): (usize, usize, usize, usize)| taken.iter().any(|&(r2, c2, h2, w2)| r < r2 + h2 && r2 < r + h && c < c2 + w2 && c2 < c + w);
    for (bh, bw) in block_shapes(k).into_iter().take(10) {
        if bh > mask.height || bw > mask.width {
            continue;
        }
        let spots: Vec<_> = (0..=mask.height - bh)
            .flat_map(|r| (0..=mask.width - bw).map(move |c| (r, c, bh, bw)))
            .filter(|&(r, c, h, w)| (r..r + h).all(|y| (c..c + w).all(|x| mask.at(y, x) == label)) && !overlaps((r, c, h, w)))
            .collect();
        if !spots.is_empty() {
            return Some(spots[rng.gen_range(0..spots.len())]);
        }
    }
    None
}

/// One row of the plausibility table.
#[derive(Clone, Debug, PartialEq)]
pub struct PlausibilityRow {
    pub mask_id: usize,
    /// 'a' boundary erosion (plausible); 'b', 'c', 'd' block removal.
    pub variant: char,
    pub ce: f64,
    pub ae: f64,
}

/// The four manipulated versions of `mask`, each differing from it in exactly `k` pixels.
pub fn plausibility_variants(mask: &LabelMask, k: usize, seed: u64) -> Result<[LabelMask; 4]> {
    let a = erode_boundary(mask, k)?;
    let mut rng = seeded_rng(seed);
    let mut taken = Vec::new();
    let mut blocks = Vec::with_capacity(3);
    for preferred in 1..=3u8 {
        let order = std::iter::once(preferred).chain((1..NUM_CLASSES as u8).filter(move |&l| l != preferred));
        let block = order
            .filter_map(|label| find_block(mask, label, k, &taken, &mut rng))
            .next()
            .ok_or_else(|| Error::Infeasible(format!("no free {k}-pixel block inside any structure (variant {})", (b'a' + preferred) as char)))?;
        taken.push(block);
        let (r, c, h, w) = block;
        let mut m = mask.clone();
        for y in r..r + h {
            for x in c..c + w {
                m.set(y, x, 0);
            }
        }
        blocks.push(m);
    }
    let [b, c, d]: [LabelMask; 3] = blocks.try_into().expect("three blocks");
    Ok([a, b, c, d])
}

/// Cross-entropy and code distance of every manipulated variant against its original.
pub fn plausibility_experiment<T: Scalar>(masks: &[LabelMask], k: usize, dae: &Autoencoder<T>, seed: u64) -> Result<Vec<PlausibilityRow>> {
    if !dae.params.is_frozen() {
        return Err(Error::EncoderNotFrozen);
    }
    let mut rows = Vec::with_capacity(4 * masks.len());
    for (id, mask) in masks.iter().enumerate() {
        let variants = plausibility_variants(mask, k, seed.wrapping_add(id as u64))
            .map_err(|e| match e {
                Error::Infeasible(msg) => Error::Infeasible(format!("mask {id}: {msg}")),
                other => other,
            })?;
        let target = mask.to_onehot::<T>(NUM_CLASSES)?;
        for (v, m) in variants.iter().enumerate() {
            let tape = Tape::new();
            let warped = tape.constant(m.to_onehot::<T>(NUM_CLASSES)?);
            let tgt = tape.constant(target.clone());
            let ce = ce_loss(warped, tgt)?.item().to_f64c();
            let ae = ae_loss(warped, tgt, dae)?.item().to_f64c();
            rows.push(PlausibilityRow { mask_id: id, variant: (b'a' + v as u8) as char, ce, ae });
        }
    }
    Ok(rows)
}

pub fn plausibility_csv(rows: &[PlausibilityRow]) -> String {
    let mut s = String::from("mask_id,variant,ce,ae\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.9e},{:.9e}", r.mask_id, r.variant, r.ce, r.ae);
    }
    s
}

/// Global normalized cross-correlation of two images (1 = identical up to affine intensity).
pub fn image_ncc(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape("image_ncc", "images differ in size"));
    }
    let n = a.data.len() as f64;
    let ma = a.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok(sab / (saa * sbb + 1e-8).sqrt())
}

/// Per-pixel majority vote; ties go to the lowest class index.
pub fn majority_vote(labels: &[LabelMask]) -> Result<LabelMask> {
    let first = labels.first().ok_or_else(|| Error::Empty("label maps to fuse".into()))?;
    if labels.iter().any(|m| (m.height, m.width) != (first.height, first.width)) {
        return Err(Error::shape("majority_vote", "label maps differ in size"));
    }
    let fused = (0..first.labels.len())
        .map(|i| {
            let mut counts = [0usize; 256];
            for m in labels {
                counts[m.labels[i] as usize] += 1;
            }
            // max_by_key returns the last maximum; scan in reverse so the lowest index wins.
            (0..256).rev().max_by_key(|&k| counts[k]).expect("nonempty") as u8
        })
        .collect();
    LabelMask::new(first.height, first.width, fused)
}

/// Register `source` onto `target` and carry `mask` along (soft warp, then argmax).
pub fn propagate_labels<T: Scalar>(net: &VectorCnn<T>, source: &Image, mask: &LabelMask, target: &Image) -> Result<LabelMask> {
    let field = net.predict_field(source, target)?;
    hard_labels(&warp_onehot_tensor(&mask.to_onehot::<T>(NUM_CLASSES)?, &field)?, 0)
}

/// Atlas indices ranked by image NCC with `target`, best first, ties by id.
pub fn rank_atlases(target: &Image, atlases: &[Atlas]) -> Result<Vec<usize>> {
    let scores = atlases.iter().map(|a| image_ncc(&a.image, target)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..atlases.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then_with(|| atlases[i].id.cmp(&atlases[j].id)));
    Ok(order)
}

/// Segment `target` by registering its `n_atlases` most similar atlases to it
/// and fusing their propagated labels by majority vote.
pub fn multi_atlas_segment<T: Scalar>(target: &Image, atlases: &[Atlas], net: &VectorCnn<T>, n_atlases: usize) -> Result<LabelMask> {
    if atlases.is_empty() {
        return Err(Error::Empty("atlas set".into()));
    }
    if n_atlases == 0 || n_atlases > atlases.len() {
        return Err(Error::arg("multi_atlas_segment", format!("{n_atlases} atlases requested from a set of {}", atlases.len())));
    }
    let order = rank_atlases(target, atlases)?;
    let labels = order[..n_atlases]
        .iter()
        .map(|&i| propagate_labels(net, &atlases[i].image, &atlases[i].mask, target))
        .collect::<Result<Vec<_>>>()?;
    majority_vote(&labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcaEstimate {
    /// Dice per foreground class against the best reference.
    pub per_class: Vec<f64>,
    /// Mean foreground Dice against the best reference: the estimate.
    pub mean: f64,
    pub best_reference: String,
}

impl RcaEstimate {
    pub fn accepted(&self) -> bool {
        self.mean >= RCA_ACCEPT_THRESHOLD
    }
}

/// Reverse classification accuracy: propagate `predicted` from `image` onto
/// every reference and score it against that reference's ground truth; the
/// best score estimates the quality of `predicted`.
pub fn rca_estimate<T: Scalar>(image: &Image, predicted: &LabelMask, references: &[Atlas], net: &VectorCnn<T>) -> Result<RcaEstimate> {
    if references.is_empty() {
        return Err(Error::Empty("reference set".into()));
    }
    let mut best: Option<RcaEstimate> = None;
    for r in references {
        let warped = propagate_labels(net, image, predicted, &r.image)?;
        let per_class = (1..NUM_CLASSES as u8).map(|k| dice(&warped, &r.mask, k)).collect::<Result<Vec<_>>>()?;
        let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
        if best.as_ref().map_or(true, |b| mean > b.mean) {
            best = Some(RcaEstimate { per_class, mean, best_reference: r.id.clone() });
        }
    }
    Ok(best.expect("nonempty references"))
}

pub fn rca_csv(rows: &[(String, RcaEstimate)]) -> String {
    let mut s = String::from("id,estimate,best_reference,accepted\n");
    for (id, e) in rows {
        let _ = writeln!(s, "{id},{:.6},{},{}", e.mean, e.best_reference, e.accepted());
    }
    s
}

/// Anatomy codes of label masks (eval-mode encoder).
pub fn extract_codes<T: Scalar>(masks: &[LabelMask], dae: &Autoencoder<T>) -> Result<Vec<AnatomyCode>> {
    let mut codes = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(32) {
        let batch = chunk.iter().map(|m| m.to_onehot::<T>(NUM_CLASSES)).collect::<Result<Vec<_>>>()?;
        codes.extend(dae.encode(&Tensor::stack_batch(&batch)?)?);
    }
    Ok(codes)
}

/// CSV with an id column followed by one column per code entry.
pub fn codes_csv(ids: &[String], codes: &[AnatomyCode]) -> Result<String> {
    if ids.len() != codes.len() {
        return Err(Error::shape("codes_csv", format!("{} ids for {} codes", ids.len(), codes.len())));
    }
    let width = codes.first().map_or(0, |c| c.len());
    let mut s = String::from("id");
    for i in 0..width {
        let _ = write!(s, ",h{i}");
    }
    s.push('\n');
    for (id, c) in ids.iter().zip(codes) {
        s.push_str(id);
        for v in c {
            let _ = write!(s, ",{v:.9e}");
        }
        s.push('\n');
    }
    Ok(s)
}
