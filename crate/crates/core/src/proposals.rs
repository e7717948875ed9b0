//! Localization-quality proposal machinery: anchor assignment, minibatch
//! sampling, regression targets, the composite proposal loss, objectness
//! scoring, and pseudo-unknown label generation.
//!
//! The guiding idea: proposal quality is judged by localization cues
//! (centerness and IoU) rather than category confidence, and well-localized
//! proposals that overlap no annotated object are emitted as candidate
//! unknown instances.

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{centerness, iou, ltrb_encode, BBox, LtrbOffsets, Proposal};
use crate::numerics::smooth_l1;

/// IoU below which an anchor is a negative sample.
pub const NEGATIVE_IOU_THRESHOLD: f64 = 0.3;

/// IoU at or above which an anchor is a positive sample (first stage).
pub const POSITIVE_IOU_THRESHOLD: f64 = 0.7;

/// Smooth-L1 transition point used for every box regression term.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Result of matching one anchor against the ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorAssignment {
    pub label: AnchorLabel,
    /// Index of the matched ground-truth box; present for positives.
    pub matched_gt: Option<usize>,
    pub max_iou: f64,
}

/// Minibatch sampling knobs for one proposal stage.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub pro_num: usize,
    pub pos_iou: f64,
    pub pos_ratio: f64,
}

impl SamplingConfig {
    pub fn new(pro_num: usize, pos_iou: f64, pos_ratio: f64) -> Result<Self> {
        let cfg = SamplingConfig {
            pro_num,
            pos_iou,
            pos_ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pro_num == 0 {
            return Err(Error::invalid("pro_num must be at least 1"));
        }
        if !(self.pos_iou > NEGATIVE_IOU_THRESHOLD && self.pos_iou < 1.0) {
            return Err(Error::invalid(format!(
                "pos_iou must lie in ({NEGATIVE_IOU_THRESHOLD}, 1), got {}",
                self.pos_iou
            )));
        }
        if !(self.pos_ratio > 0.0 && self.pos_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "pos_ratio must lie in (0, 1], got {}",
                self.pos_ratio
            )));
        }
        Ok(())
    }

    /// First-stage defaults: 256 proposals, positive at IoU 0.7, half the
    /// quota reserved for positives.
    pub fn stage1() -> Self {
        SamplingConfig {
            pro_num: 256,
            pos_iou: 0.7,
            pos_ratio: 0.5,
        }
    }

    /// Refinement-stage defaults: 512 proposals, positive at IoU 0.5, a
    /// quarter of the quota reserved for positives.
    pub fn stage2() -> Self {
        SamplingConfig {
            pro_num: 512,
            pos_iou: 0.5,
            pos_ratio: 0.25,
        }
    }
}

/// Weights of the four composite-loss terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 8.0,
            lambda3: 1.0,
            lambda4: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid("at least one loss weight must be non-zero"));
        }
        Ok(())
    }
}

/// A high-objectness proposal that overlaps no annotated object, emitted as a
/// candidate unknown instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub bbox: BBox,
    pub objectness: f64,
    /// Identifier of the originating scene.
    pub source: String,
}

/// Labels every anchor positive / negative / ignore by its best IoU against
/// the ground truth.
///
/// Positive at `max_iou >= pos_thresh` (ties to the lowest-index ground
/// truth), negative below `neg_thresh`, ignore in between. With no ground
/// truth at all, every anchor is negative with `max_iou` 0.
pub fn assign_anchors(
    anchors: &[BBox],
    gt: &[BBox],
    pos_thresh: f64,
    neg_thresh: f64,
) -> Result<Vec<AnchorAssignment>> {
    if !(pos_thresh > neg_thresh) {
        return Err(Error::invalid(format!(
            "positive threshold {pos_thresh} must exceed negative threshold {neg_thresh}"
        )));
    }
    Ok(anchors
        .iter()
        .map(|anchor| {
            let mut max_iou = 0.0;
            let mut best = None;
            for (gi, g) in gt.iter().enumerate() {
                let v = iou(anchor, g);
                if v > max_iou {
                    max_iou = v;
                    best = Some(gi);
                }
            }
            if max_iou >= pos_thresh && best.is_some() {
                AnchorAssignment {
                    label: AnchorLabel::Positive,
                    matched_gt: best,
                    max_iou,
                }
            } else if max_iou < neg_thresh {
                AnchorAssignment {
                    label: AnchorLabel::Negative,
                    matched_gt: None,
                    max_iou,
                }
            } else {
                AnchorAssignment {
                    label: AnchorLabel::Ignore,
                    matched_gt: None,
                    max_iou,
                }
            }
        })
        .collect())
}

/// Samples a training minibatch of anchor indices: up to
/// `pro_num * pos_ratio` positives uniformly without replacement, the
/// remainder filled with negatives up to `pro_num` total. Ignore-labeled
/// anchors are never sampled. Deterministic for a given generator state.
pub fn sample_minibatch<R: Rng>(
    assignments: &[AnchorAssignment],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let positives: Vec<usize> = assignments
        .iter()
        .enumerate()
        .filter(|(_, a)| a.label == AnchorLabel::Positive)
        .map(|(i, _)| i)
        .collect();
    let negatives: Vec<usize> = assignments
        .iter()
        .enumerate()
        .filter(|(_, a)| a.label == AnchorLabel::Negative)
        .map(|(i, _)| i)
        .collect();

    let pos_quota = ((cfg.pro_num as f64) * cfg.pos_ratio).floor() as usize;
    let n_pos = positives.len().min(pos_quota);
    let n_neg = negatives.len().min(cfg.pro_num - n_pos);

    let mut pick = |pool: &[usize], n: usize| -> Vec<usize> {
        if n == pool.len() {
            return pool.to_vec();
        }
        let mut chosen: Vec<usize> = index_sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        chosen.sort_unstable();
        chosen
    };

    let pos = pick(&positives, n_pos);
    let neg = pick(&negatives, n_neg);
    (pos, neg)
}

/// Regression targets of a location inside a ground-truth box: the ltrb
/// offsets plus their centerness.
pub fn regression_targets(location: (f64, f64), gt_box: &BBox) -> Result<(LtrbOffsets, f64)> {
    let offsets = ltrb_encode(location, gt_box)?;
    let c = centerness(&offsets)?;
    Ok((offsets, c))
}

/// Center/size box offsets of `target` relative to `proposal`, normalized by
/// the proposal's size: `(dx/w, dy/h, dw/w, dh/h)`.
pub fn xywh_offsets(proposal: &BBox, target: &BBox) -> [f64; 4] {
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - pcx) / proposal.width(),
        (tcy - pcy) / proposal.height(),
        (target.width() - proposal.width()) / proposal.width(),
        (target.height() - proposal.height()) / proposal.height(),
    ]
}

/// First-stage regression batch: ltrb offsets and centerness predictions
/// against their targets, index-aligned.
#[derive(Debug, Clone, Default)]
pub struct Stage1Batch {
    pub ltrb_preds: Vec<LtrbOffsets>,
    pub ltrb_targets: Vec<LtrbOffsets>,
    pub centerness_preds: Vec<f64>,
    pub centerness_targets: Vec<f64>,
}

/// Refinement-stage batch: normalized xywh offsets and IoU predictions
/// against their targets, index-aligned.
#[derive(Debug, Clone, Default)]
pub struct Stage2Batch {
    pub xywh_preds: Vec<[f64; 4]>,
    pub xywh_targets: Vec<[f64; 4]>,
    pub iou_preds: Vec<f64>,
    pub iou_targets: Vec<f64>,
}

/// Per-term breakdown of the composite proposal loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub box1: f64,
    pub ctr: f64,
    pub box2: f64,
    pub iou: f64,
    pub total: f64,
}

/// Centerness regression penalty: binary cross-entropy measured relative to
/// the target's own entropy (the binary KL divergence), so the term is zero
/// exactly when prediction equals target.
fn centerness_penalty(pred: f64, target: f64) -> f64 {
    if pred == target {
        return 0.0;
    }
    let p = pred.clamp(1e-12, 1.0 - 1e-12);
    let mut loss = 0.0;
    if target > 0.0 {
        loss += target * (target / p).ln();
    }
    if target < 1.0 {
        loss += (1.0 - target) * ((1.0 - target) / (1.0 - p)).ln();
    }
    loss
}

fn mean_or_zero(sum: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Composite proposal loss
/// `lambda1 * L_box1 + lambda2 * L_ctr + lambda3 * L_box2 + lambda4 * L_iou`.
///
/// Box terms are mean smooth-L1 over all coordinates, the centerness term is
/// the mean binary cross-entropy penalty, and the IoU term is mean smooth-L1
/// over the IoU predictions. Empty terms contribute zero.
pub fn proposal_loss(
    stage1: &Stage1Batch,
    stage2: &Stage2Batch,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    if stage1.ltrb_preds.len() != stage1.ltrb_targets.len() {
        return Err(Error::invalid("ltrb preds/targets length mismatch"));
    }
    if stage1.centerness_preds.len() != stage1.centerness_targets.len() {
        return Err(Error::invalid("centerness preds/targets length mismatch"));
    }
    if stage2.xywh_preds.len() != stage2.xywh_targets.len() {
        return Err(Error::invalid("xywh preds/targets length mismatch"));
    }
    if stage2.iou_preds.len() != stage2.iou_targets.len() {
        return Err(Error::invalid("iou preds/targets length mismatch"));
    }

    let box1_sum: f64 = stage1
        .ltrb_preds
        .iter()
        .zip(&stage1.ltrb_targets)
        .flat_map(|(p, t)| {
            p.as_array()
                .into_iter()
                .zip(t.as_array())
                .map(|(pv, tv)| smooth_l1(pv, tv, SMOOTH_L1_BETA))
                .collect::<Vec<_>>()
        })
        .sum();
    let box1 = mean_or_zero(box1_sum, stage1.ltrb_preds.len() * 4);

    let ctr_sum: f64 = stage1
        .centerness_preds
        .iter()
        .zip(&stage1.centerness_targets)
        .map(|(&p, &t)| centerness_penalty(p, t))
        .sum();
    let ctr = mean_or_zero(ctr_sum, stage1.centerness_preds.len());

    let box2_sum: f64 = stage2
        .xywh_preds
        .iter()
        .zip(&stage2.xywh_targets)
        .flat_map(|(p, t)| {
            p.iter()
                .zip(t)
                .map(|(&pv, &tv)| smooth_l1(pv, tv, SMOOTH_L1_BETA))
                .collect::<Vec<_>>()
        })
        .sum();
    let box2 = mean_or_zero(box2_sum, stage2.xywh_preds.len() * 4);

    let iou_sum: f64 = stage2
        .iou_preds
        .iter()
        .zip(&stage2.iou_targets)
        .map(|(&p, &t)| smooth_l1(p, t, SMOOTH_L1_BETA))
        .sum();
    let iou_term = mean_or_zero(iou_sum, stage2.iou_preds.len());

    Ok(LossBreakdown {
        box1,
        ctr,
        box2,
        iou: iou_term,
        total: w.lambda1 * box1 + w.lambda2 * ctr + w.lambda3 * box2 + w.lambda4 * iou_term,
    })
}

/// Turns raw head outputs into scored proposals. Centerness and IoU
/// predictions may overshoot [0, 1]; they are clamped before the geometric
/// mean. Input order is preserved.
pub fn score_proposals(raw: &[(BBox, f64, f64)]) -> Vec<Proposal> {
    raw.iter()
        .map(|&(bbox, c, b)| {
            let c = c.clamp(0.0, 1.0);
            let b = b.clamp(0.0, 1.0);
            Proposal::new(bbox, c, b).expect("clamped scores are always valid")
        })
        .collect()
}

/// Selects pseudo-unknown labels: proposals with objectness at least `min_s`
/// whose IoU with every ground-truth box stays below `overlap_cap`, sorted by
/// objectness (ties to the lower input index), at most `top_k` of them.
pub fn generate_pseudo_labels(
    proposals: &[Proposal],
    gt: &[BBox],
    top_k: usize,
    overlap_cap: f64,
    min_s: f64,
    source: &str,
) -> Vec<PseudoLabel> {
    let mut qualifying: Vec<(usize, &Proposal)> = proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| p.objectness() >= min_s)
        .filter(|(_, p)| gt.iter().all(|g| iou(p.bbox(), g) < overlap_cap))
        .collect();
    qualifying.sort_by(|(ia, pa), (ib, pb)| {
        pb.objectness()
            .partial_cmp(&pa.objectness())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(ib))
    });
    qualifying
        .into_iter()
        .take(top_k)
        .map(|(_, p)| PseudoLabel {
            bbox: *p.bbox(),
            objectness: p.objectness(),
            source: source.to_string(),
        })
        .collect()
}
