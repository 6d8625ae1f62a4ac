//! Metrics: proposal recall, false-negative and foreground counts, and
//! VOC-style AP50 over the synthetic test scenes.

use crate::corpn::{self, CorpnError};
use crate::geometry::{iou, nms, AnchorLabel, Bbox};
use crate::linalg::{self, Matrix};
use crate::rng::{derive_rng, tag};
use crate::simworld::CategoryId;
use crate::train::{anchors_in_box, pooled_feature, sample_minibatch, ModelState, SceneData};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub nms_iou: f64,
    pub max_proposals: usize,
    pub recall_top_k: usize,
    /// Foreground anchors scored below this count as false negatives.
    pub fn_threshold: f64,
    pub match_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { nms_iou: 0.7, max_proposals: 300, recall_top_k: 10, fn_threshold: 0.5, match_iou: 0.5 }
    }
}

/// One row per seed in the experiment CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub novel_ap50: f64,
    pub base_ap50: f64,
    pub avg_fn: f64,
    pub avg_fg: f64,
    pub proposal_recall: f64,
    pub logdet_cov: f64,
}

/// Scores scenes either with one trained model or by stacking the
/// single-classifier outputs of separately trained ensemble members.
pub enum Scorer<'a> {
    Unified(&'a ModelState),
    Ensemble(&'a [ModelState]),
}

impl Scorer<'_> {
    /// N x N_A probability matrix for one scene.
    pub fn scene_probs(&self, data: &SceneData) -> Result<Matrix, CorpnError> {
        match self {
            Scorer::Unified(state) => {
                let x = state.extract(&data.raw_features);
                Ok(corpn::forward(&state.head, &x)?.probs)
            }
            Scorer::Ensemble(states) => {
                let n_a = data.raw_features.cols();
                let mut probs = Matrix::zeros(states.len(), n_a);
                for (j, state) in states.iter().enumerate() {
                    let x = state.extract(&data.raw_features);
                    let out = corpn::forward(&state.head, &x)?;
                    probs.row_mut(j).copy_from_slice(out.probs.row(0));
                }
                Ok(probs)
            }
        }
    }

    pub fn n_rows(&self) -> usize {
        match self {
            Scorer::Unified(state) => state.head.n_rpns(),
            Scorer::Ensemble(states) => states.len(),
        }
    }
}

/// A scored box that survived NMS, in descending score order.
#[derive(Debug, Clone, Copy)]
pub struct Proposal {
    pub anchor: usize,
    pub bbox: Bbox,
    pub score: f64,
    pub foreground: bool,
}

/// Score every anchor with the most-certain rule, run NMS, keep the top
/// `max_proposals`.
pub fn propose(probs: &Matrix, anchors: &[Bbox], cfg: &EvalConfig) -> Vec<Proposal> {
    let n_a = probs.cols();
    debug_assert_eq!(anchors.len(), n_a);
    let mut scores = Vec::with_capacity(n_a);
    let mut foreground = Vec::with_capacity(n_a);
    for i in 0..n_a {
        let col: Vec<f64> = (0..probs.rows()).map(|j| probs.at(j, i)).collect();
        let (s, fg) = corpn::score_box(&col);
        scores.push(s);
        foreground.push(fg);
    }
    let kept = nms(anchors, &scores, cfg.nms_iou);
    kept.into_iter()
        .take(cfg.max_proposals)
        .map(|i| Proposal { anchor: i, bbox: anchors[i], score: scores[i], foreground: foreground[i] })
        .collect()
}

/// Mean per scene of foreground-labeled anchors whose box score falls below
/// the threshold.
pub fn avg_false_negatives(
    scene_probs: &[Matrix],
    scene_labels: &[Vec<AnchorLabel>],
    threshold: f64,
) -> f64 {
    assert_eq!(scene_probs.len(), scene_labels.len());
    if scene_probs.is_empty() {
        return 0.0;
    }
    let mut total = 0usize;
    for (probs, labels) in scene_probs.iter().zip(scene_labels) {
        for (i, &label) in labels.iter().enumerate() {
            if label != AnchorLabel::Foreground {
                continue;
            }
            let col: Vec<f64> = (0..probs.rows()).map(|j| probs.at(j, i)).collect();
            let (score, _) = corpn::score_box(&col);
            if score < threshold {
                total += 1;
            }
        }
    }
    total as f64 / scene_probs.len() as f64
}

/// Mean per scene of NMS survivors classified foreground.
pub fn avg_foreground_after_nms(per_scene: &[Vec<Proposal>]) -> f64 {
    if per_scene.is_empty() {
        return 0.0;
    }
    let total: usize = per_scene.iter().map(|p| p.iter().filter(|q| q.foreground).count()).sum();
    total as f64 / per_scene.len() as f64
}

/// Matched/total ground-truth counts for recall@top_k.
pub fn recall_counts(
    proposals: &[Proposal],
    gt: &[Bbox],
    iou_thresh: f64,
    top_k: usize,
) -> (usize, usize) {
    let head = &proposals[..proposals.len().min(top_k)];
    let matched = gt
        .iter()
        .filter(|g| head.iter().any(|p| iou(&p.bbox, g) >= iou_thresh))
        .count();
    (matched, gt.len())
}

/// Fraction of ground-truth boxes covered by the top-k proposals. Defined as
/// 1 when there is no ground truth.
pub fn proposal_recall(proposals: &[Proposal], gt: &[Bbox], iou_thresh: f64, top_k: usize) -> f64 {
    let (matched, total) = recall_counts(proposals, gt, iou_thresh, top_k);
    if total == 0 {
        1.0
    } else {
        matched as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub scene: u64,
    pub bbox: Bbox,
    pub score: f64,
    pub category: CategoryId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub scene: u64,
    pub bbox: Bbox,
    pub category: CategoryId,
}

/// Per-category average precision.
#[derive(Debug, Clone)]
pub struct ApResult {
    pub per_category: BTreeMap<CategoryId, f64>,
}

impl ApResult {
    /// Mean over the listed categories, skipping those without ground truth.
    pub fn mean_over(&self, categories: &[CategoryId]) -> f64 {
        let values: Vec<f64> =
            categories.iter().filter_map(|c| self.per_category.get(c)).copied().collect();
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    }
}

/// VOC-style AP at the given IOU threshold, all-points interpolation.
///
/// Detections are processed per category in descending score (ties keep
/// input order); each is greedily matched to the highest-IOU unmatched
/// ground-truth box of its category in its scene. Categories without ground
/// truth are omitted from the result.
pub fn ap50(detections: &[Detection], gt: &[GtBox], iou_thresh: f64) -> ApResult {
    let mut categories: Vec<CategoryId> = gt.iter().map(|g| g.category).collect();
    categories.sort_unstable();
    categories.dedup();

    let mut per_category = BTreeMap::new();
    for cat in categories {
        let cat_gt: Vec<&GtBox> = gt.iter().filter(|g| g.category == cat).collect();
        let mut cat_dets: Vec<&Detection> =
            detections.iter().filter(|d| d.category == cat).collect();
        cat_dets.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("scores must not be NaN"));

        let mut matched = vec![false; cat_gt.len()];
        let mut tp_flags = Vec::with_capacity(cat_dets.len());
        for det in &cat_dets {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in cat_gt.iter().enumerate() {
                if matched[gi] || g.scene != det.scene {
                    continue;
                }
                let v = iou(&det.bbox, &g.bbox);
                if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                matched[gi] = true;
                tp_flags.push(true);
            } else {
                tp_flags.push(false);
            }
        }

        per_category.insert(cat, average_precision(&tp_flags, cat_gt.len()));
    }
    ApResult { per_category }
}

/// All-points average precision from an ordered TP/FP sequence.
fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope: running max from the right.
    let mut envelope = precisions.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..recalls.len() {
        ap += (recalls[k] - prev_recall) * envelope[k];
        prev_recall = recalls[k];
    }
    ap
}

/// Run proposals through the category classifier of `tuned` and collect
/// detections plus ground truth for AP.
pub fn detect_scenes(
    tuned: &ModelState,
    scorer: &Scorer,
    scene_data: &[SceneData],
    anchors: &[Bbox],
    cfg: &EvalConfig,
) -> Result<(Vec<Detection>, Vec<GtBox>), CorpnError> {
    let mut detections = Vec::new();
    let mut gt = Vec::new();
    for data in scene_data {
        let probs = scorer.scene_probs(data)?;
        let proposals = propose(&probs, anchors, cfg);
        let features = tuned.extract(&data.raw_features);
        let background = tuned.classifier.background_row();
        for p in &proposals {
            let members = anchors_in_box(anchors, &p.bbox);
            let pooled = pooled_feature(&features, &members);
            let logits = tuned.classifier.logits(&pooled);
            let (category, prob) = softmax_argmax(&logits);
            if category == background {
                continue;
            }
            // Detections rank by classifier confidence; the proposal score
            // only decided what reached the classifier.
            detections.push(Detection { scene: data.scene_id, bbox: p.bbox, score: prob, category });
        }
        for (cat, bbox) in &data.gt {
            gt.push(GtBox { scene: data.scene_id, bbox: *bbox, category: *cat });
        }
    }
    Ok((detections, gt))
}

fn softmax_argmax(logits: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = k;
        }
    }
    let max = logits[best];
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    (best, 1.0 / z)
}

/// Mean log-determinant of the probability covariance over held-out scene
/// minibatches: the diversity the ensemble actually achieves at convergence.
pub fn mean_holdout_logdet(
    scorer: &Scorer,
    scene_data: &[SceneData],
    batch: usize,
    fg_fraction: f64,
    ridge: f64,
    seed: u64,
) -> Result<f64, CorpnError> {
    if scene_data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for data in scene_data {
        let mut rng = derive_rng(seed, &[tag::HOLDOUT, data.scene_id]);
        let (indices, _) = sample_minibatch(&mut rng, data, batch, fg_fraction);
        let probs = scorer.scene_probs(data)?.select_columns(&indices);
        let sigma = linalg::covariance(&probs)?;
        total += linalg::logdet_psd(&sigma, ridge)?;
    }
    Ok(total / scene_data.len() as f64)
}
