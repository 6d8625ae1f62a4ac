//! Two-phase optimization.
//!
//! Phase 1 trains the shared linear extractor, the classifier ensemble head,
//! and the category classifier on base-class scenes. Phase 2 freezes
//! everything up to and including the proposal scorer and fine-tunes only the
//! category classifier on the few-shot support instances.
//!
//! A reference single-classifier trainer lives in [`reference`]; with one
//! classifier and both extra losses disabled, the ensemble trainer must
//! reproduce it bitwise.

use crate::corpn::{self, CoRpnHead, ForwardOutput, LossBreakdown, LossConfig};
use crate::geometry::{generate_anchors, iou, label_anchors, AnchorLabel, Bbox};
use crate::linalg::Matrix;
use crate::rng::{self, derive_rng, tag};
use crate::simworld::{CategoryId, Episode, Scene, World, WorldError};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} loss at step {step}")]
    NonFinite { step: usize, term: &'static str },
    #[error("non-finite gradient passed to sgd_step")]
    NonFiniteGradient,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Corpn(#[from] corpn::CorpnError),
}

/// Anchor tiling and labeling thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub stride: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            stride: 8.0,
            scales: vec![24.0, 34.0, 48.0],
            ratios: vec![0.5, 1.0, 2.0],
            fg_iou: 0.7,
            bg_iou: 0.3,
        }
    }
}

/// The anchor grid covering a square extent.
pub fn anchor_grid(extent: f64, cfg: &AnchorConfig) -> Vec<Bbox> {
    let cells = ((extent / cfg.stride).floor() as usize).max(1);
    generate_anchors(cells, cells, cfg.stride, &cfg.scales, &cfg.ratios)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase2Mode {
    NovelOnly,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierVariant {
    Fc,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub scenes_per_step: usize,
    pub steps_phase1: usize,
    pub steps_phase2: usize,
    pub minibatch_anchors: usize,
    /// Target fraction of foreground anchors in a minibatch; the rest is
    /// filled with background.
    pub fg_fraction: f64,
    pub seed: u64,
    pub phase2_mode: Phase2Mode,
    pub classifier: ClassifierVariant,
    pub n_rpns: usize,
    pub extractor_dim: usize,
    pub init_std: f64,
    pub anchors: AnchorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            momentum: 0.9,
            scenes_per_step: 2,
            steps_phase1: 300,
            steps_phase2: 100,
            minibatch_anchors: 64,
            fg_fraction: 0.25,
            seed: 0,
            phase2_mode: Phase2Mode::Balanced,
            classifier: ClassifierVariant::Fc,
            n_rpns: 5,
            extractor_dim: 16,
            init_std: 0.3,
            anchors: AnchorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.minibatch_anchors <= self.n_rpns {
            return Err(TrainError::InvalidConfig(format!(
                "minibatch of {} anchors cannot condition a covariance over {} classifiers",
                self.minibatch_anchors, self.n_rpns
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig("momentum must lie in [0,1)".into()));
        }
        if !(self.fg_fraction > 0.0 && self.fg_fraction <= 1.0) {
            return Err(TrainError::InvalidConfig("fg_fraction must lie in (0,1]".into()));
        }
        if self.n_rpns < 1 || self.scenes_per_step < 1 || self.extractor_dim < 1 {
            return Err(TrainError::InvalidConfig(
                "n_rpns, scenes_per_step and extractor_dim must be at least 1".into(),
            ));
        }
        if self.anchors.fg_iou <= self.anchors.bg_iou {
            return Err(TrainError::InvalidConfig("fg_iou must exceed bg_iou".into()));
        }
        Ok(())
    }
}

/// Per-category classifier over pooled box features, plus one background row
/// (always the last row) that lets detection reject junk proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub variant: ClassifierVariant,
    weights: Matrix,
    biases: Vec<f64>,
    cosine_scale: f64,
}

impl ClassifierHead {
    pub fn random<R: Rng>(
        variant: ClassifierVariant,
        n_categories: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut weights = Matrix::zeros(n_categories + 1, dim);
        rng::fill_normal(rng, weights.data_mut(), 0.05);
        Self { variant, weights, biases: vec![0.0; n_categories + 1], cosine_scale: 16.0 }
    }

    /// Insert freshly initialized rows for `extra` new categories, keeping the
    /// background row last.
    pub fn expand<R: Rng>(&self, extra: usize, rng: &mut R) -> Self {
        let dim = self.weights.cols();
        let old_cats = self.n_categories();
        let mut weights = Matrix::zeros(old_cats + extra + 1, dim);
        let keep = old_cats * dim;
        weights.data_mut()[..keep].copy_from_slice(&self.weights.data()[..keep]);
        let mut fresh = vec![0.0; extra * dim];
        rng::fill_normal(rng, &mut fresh, 0.05);
        weights.data_mut()[keep..keep + fresh.len()].copy_from_slice(&fresh);
        let bg = self.weights.row(old_cats).to_vec();
        weights.data_mut()[keep + fresh.len()..].copy_from_slice(&bg);
        let mut biases = self.biases[..old_cats].to_vec();
        biases.extend(std::iter::repeat(0.0).take(extra));
        biases.push(self.biases[old_cats]);
        Self { variant: self.variant, weights, biases, cosine_scale: self.cosine_scale }
    }

    /// Row index of the background class.
    pub fn background_row(&self) -> usize {
        self.weights.rows() - 1
    }

    /// Reassemble a classifier from stored parts.
    pub fn from_parts(
        variant: ClassifierVariant,
        weights: Matrix,
        biases: Vec<f64>,
        cosine_scale: f64,
    ) -> Self {
        assert_eq!(weights.rows(), biases.len(), "one bias per category");
        Self { variant, weights, biases, cosine_scale }
    }

    /// Object categories only; the background row is not counted.
    pub fn n_categories(&self) -> usize {
        self.weights.rows() - 1
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn cosine_scale(&self) -> f64 {
        self.cosine_scale
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let c = self.weights.rows();
        let mut out = vec![0.0; c];
        match self.variant {
            ClassifierVariant::Fc => {
                for k in 0..c {
                    let w = self.weights.row(k);
                    let mut acc = 0.0;
                    for d in 0..w.len() {
                        acc += w[d] * x[d];
                    }
                    out[k] = acc + self.biases[k];
                }
            }
            ClassifierVariant::Cosine => {
                let nx = norm(x);
                if nx < 1e-12 {
                    return out;
                }
                for k in 0..c {
                    let w = self.weights.row(k);
                    let nw = norm(w);
                    if nw < 1e-12 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for d in 0..w.len() {
                        dot += w[d] * x[d];
                    }
                    out[k] = self.cosine_scale * dot / (nw * nx);
                }
            }
        }
        out
    }

    /// Softmax cross-entropy against `target`; gradients are accumulated into
    /// `d_weights`/`d_biases`. The pooled feature is treated as a constant.
    pub fn ce_accumulate(
        &self,
        x: &[f64],
        target: CategoryId,
        d_weights: &mut Matrix,
        d_biases: &mut [f64],
    ) -> f64 {
        let logits = self.logits(x);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &l in &logits {
            sum += (l - max).exp();
        }
        let log_z = max + sum.ln();
        let loss = log_z - logits[target];
        let nx = norm(x);
        for k in 0..self.weights.rows() {
            let p = (logits[k] - log_z).exp();
            let dl = p - if k == target { 1.0 } else { 0.0 };
            match self.variant {
                ClassifierVariant::Fc => {
                    let row = d_weights.row_mut(k);
                    for d in 0..row.len() {
                        row[d] += dl * x[d];
                    }
                    d_biases[k] += dl;
                }
                ClassifierVariant::Cosine => {
                    if nx < 1e-12 {
                        continue;
                    }
                    let w = self.weights.row(k);
                    let nw = norm(w);
                    if nw < 1e-12 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for d in 0..w.len() {
                        dot += w[d] * x[d];
                    }
                    let cos = dot / (nw * nx);
                    let row = d_weights.row_mut(k);
                    for d in 0..row.len() {
                        row[d] += dl * self.cosine_scale * (x[d] / (nw * nx) - cos * w[d] / (nw * nw));
                    }
                }
            }
        }
        loss
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Everything phase 1 trains: extractor, scorer head, category classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub extractor: Matrix,
    pub head: CoRpnHead,
    pub classifier: ClassifierHead,
}

impl ModelState {
    pub fn init(world: &World, cfg: &TrainConfig) -> Self {
        let d_w = world.config.feature_dim;
        let d_f = cfg.extractor_dim;
        let mut extractor = Matrix::zeros(d_f, d_w);
        let mut e_rng = derive_rng(cfg.seed, &[tag::EXTRACTOR_INIT]);
        rng::fill_normal(&mut e_rng, extractor.data_mut(), 1.0 / (d_w as f64).sqrt());
        let mut h_rng = derive_rng(cfg.seed, &[tag::HEAD_INIT]);
        let head = CoRpnHead::random(cfg.n_rpns, d_f, cfg.init_std, &mut h_rng);
        let mut c_rng = derive_rng(cfg.seed, &[tag::CLASSIFIER_INIT, 1]);
        let classifier =
            ClassifierHead::random(cfg.classifier, world.config.n_base, d_f, &mut c_rng);
        Self { extractor, head, classifier }
    }

    /// Extracted feature matrix for a whole scene.
    pub fn extract(&self, raw_features: &Matrix) -> Matrix {
        self.extractor.matmul(raw_features)
    }
}

/// Precomputed per-scene tensors shared by training and evaluation.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub scene_id: u64,
    pub raw_features: Matrix,
    pub labels: Vec<AnchorLabel>,
    pub fg_indices: Vec<usize>,
    pub bg_indices: Vec<usize>,
    /// Background anchors that still touch an object: the hard negatives the
    /// category classifier must learn to reject.
    pub hard_bg_indices: Vec<usize>,
    pub gt: Vec<(CategoryId, Bbox)>,
    /// Per ground-truth box: anchors pooled for its crop feature.
    pub gt_members: Vec<Vec<usize>>,
}

/// Anchors lying inside the box (at least 90% of the anchor's area is
/// covered); if none qualify, the max-IOU anchor. Containment rather than
/// center membership keeps a small box from pooling features of much larger
/// anchors that happen to share its center.
pub fn anchors_in_box(anchors: &[Bbox], bbox: &Bbox) -> Vec<usize> {
    let inside: Vec<usize> = anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            let ix = (a.x2.min(bbox.x2) - a.x1.max(bbox.x1)).max(0.0);
            let iy = (a.y2.min(bbox.y2) - a.y1.max(bbox.y1)).max(0.0);
            let area = a.area();
            area > 0.0 && ix * iy >= 0.9 * area
        })
        .map(|(i, _)| i)
        .collect();
    if !inside.is_empty() {
        return inside;
    }
    let mut best = 0;
    let mut best_iou = -1.0;
    for (i, a) in anchors.iter().enumerate() {
        let v = iou(a, bbox);
        if v > best_iou {
            best_iou = v;
            best = i;
        }
    }
    vec![best]
}

/// Mean of the feature columns pooled for a box.
pub fn pooled_feature(features: &Matrix, members: &[usize]) -> Vec<f64> {
    let dim = features.rows();
    let mut out = vec![0.0; dim];
    for &i in members {
        for d in 0..dim {
            out[d] += features.at(d, i);
        }
    }
    let inv = 1.0 / members.len() as f64;
    for v in &mut out {
        *v *= inv;
    }
    out
}

/// Render features and labels for a batch of scenes. Scene order is
/// preserved, so the parallelism cannot affect results.
pub fn prepare_scenes(world: &World, scenes: &[Scene], anchors: &[Bbox], ac: &AnchorConfig) -> Vec<SceneData> {
    scenes
        .par_iter()
        .map(|scene| {
            let raw_features = crate::simworld::render_features(world, scene, anchors);
            let gt_boxes = scene.gt_boxes();
            let labels = label_anchors(anchors, &gt_boxes, ac.fg_iou, ac.bg_iou);
            let fg_indices: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == AnchorLabel::Foreground)
                .map(|(i, _)| i)
                .collect();
            let bg_indices: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == AnchorLabel::Background)
                .map(|(i, _)| i)
                .collect();
            let hard_bg_indices: Vec<usize> = bg_indices
                .iter()
                .copied()
                .filter(|&i| gt_boxes.iter().any(|g| iou(&anchors[i], g) > 0.05))
                .collect();
            let gt: Vec<(CategoryId, Bbox)> =
                scene.objects.iter().map(|o| (o.category, o.bbox)).collect();
            let gt_members = gt.iter().map(|(_, b)| anchors_in_box(anchors, b)).collect();
            SceneData {
                scene_id: scene.id,
                raw_features,
                labels,
                fg_indices,
                bg_indices,
                hard_bg_indices,
                gt,
                gt_members,
            }
        })
        .collect()
}

/// Sample a foreground/background minibatch: up to `fg_fraction` of the batch
/// from foreground anchors, the rest background, both without replacement.
pub fn sample_minibatch<R: Rng>(
    rng: &mut R,
    data: &SceneData,
    batch: usize,
    fg_fraction: f64,
) -> (Vec<usize>, Vec<bool>) {
    let fg_target = ((batch as f64) * fg_fraction).round() as usize;
    let n_fg = data.fg_indices.len().min(fg_target);
    let n_bg = data.bg_indices.len().min(batch - n_fg);
    let mut indices = Vec::with_capacity(n_fg + n_bg);
    let mut labels = Vec::with_capacity(n_fg + n_bg);
    indices.extend(choose(rng, &data.fg_indices, n_fg));
    labels.extend(std::iter::repeat(true).take(n_fg));
    indices.extend(choose(rng, &data.bg_indices, n_bg));
    labels.extend(std::iter::repeat(false).take(n_bg));
    (indices, labels)
}

/// First `k` of a partial Fisher-Yates shuffle.
fn choose<R: Rng>(rng: &mut R, pool: &[usize], k: usize) -> Vec<usize> {
    let mut pool = pool.to_vec();
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// One SGD-with-momentum update: `v = momentum*v - lr*g; p += v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] - lr * grads[i];
        params[i] += velocity[i];
    }
    Ok(())
}

struct Velocity {
    extractor: Matrix,
    head_w: Matrix,
    head_b: Vec<f64>,
    cls_w: Matrix,
    cls_b: Vec<f64>,
}

impl Velocity {
    fn zeros_like(state: &ModelState) -> Self {
        Self {
            extractor: Matrix::zeros(state.extractor.rows(), state.extractor.cols()),
            head_w: Matrix::zeros(state.head.weights().rows(), state.head.weights().cols()),
            head_b: vec![0.0; state.head.biases().len()],
            cls_w: Matrix::zeros(state.classifier.weights.rows(), state.classifier.weights.cols()),
            cls_b: vec![0.0; state.classifier.biases.len()],
        }
    }
}

/// Trained state plus everything the experiment harness inspects.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub state: ModelState,
    pub loss_history: Vec<LossBreakdown>,
    pub classifier_loss_history: Vec<f64>,
    /// How often each classifier was the per-anchor selection during phase 1.
    pub selection_counts: Vec<u64>,
    /// Minibatch columns whose routed gradient did not have exactly one
    /// nonzero entry at the selected row. Should be zero.
    pub routing_violations: u64,
}

impl TrainReport {
    pub fn selection_fractions(&self) -> Vec<f64> {
        let total: u64 = self.selection_counts.iter().sum();
        if total == 0 {
            return vec![0.0; self.selection_counts.len()];
        }
        self.selection_counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

enum RpnPath {
    Ensemble(LossConfig),
    ReferenceSingle,
}

fn check_finite(step: usize, b: &LossBreakdown) -> Result<(), TrainError> {
    for (term, v) in [("ce", b.ce), ("div", b.div), ("coop", b.coop), ("total", b.total)] {
        if !v.is_finite() {
            return Err(TrainError::NonFinite { step, term });
        }
    }
    Ok(())
}

fn run_phase1(
    world: &World,
    episode: &Episode,
    cfg: &TrainConfig,
    path: RpnPath,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if let RpnPath::Ensemble(loss_cfg) = &path {
        loss_cfg.validate()?;
    }
    if episode.base_train.is_empty() {
        return Err(TrainError::InvalidConfig("episode has no base training scenes".into()));
    }
    let anchors = anchor_grid(world.config.extent, &cfg.anchors);
    let scene_data = prepare_scenes(world, &episode.base_train, &anchors, &cfg.anchors);

    let mut state = ModelState::init(world, cfg);
    let mut velocity = Velocity::zeros_like(&state);
    let mut loss_history = Vec::with_capacity(cfg.steps_phase1);
    let mut classifier_loss_history = Vec::with_capacity(cfg.steps_phase1);
    let mut selection_counts = vec![0u64; cfg.n_rpns];
    let mut routing_violations = 0u64;

    for step in 0..cfg.steps_phase1 {
        let d_f = cfg.extractor_dim;
        let d_w = world.config.feature_dim;
        let mut d_extractor = Matrix::zeros(d_f, d_w);
        let mut d_head_w = Matrix::zeros(cfg.n_rpns, d_f);
        let mut d_head_b = vec![0.0; cfg.n_rpns];
        let mut d_cls_w =
            Matrix::zeros(state.classifier.weights.rows(), state.classifier.weights.cols());
        let mut d_cls_b = vec![0.0; state.classifier.biases.len()];
        let mut step_losses = LossBreakdown { ce: 0.0, div: 0.0, coop: 0.0, total: 0.0 };
        let mut cls_loss = 0.0;
        let mut n_crops = 0usize;

        for slot in 0..cfg.scenes_per_step {
            let idx = (step * cfg.scenes_per_step + slot) % scene_data.len();
            let data = &scene_data[idx];
            let mut mb_rng = derive_rng(cfg.seed, &[tag::MINIBATCH, step as u64, slot as u64]);
            let (mb_idx, mb_labels) =
                sample_minibatch(&mut mb_rng, data, cfg.minibatch_anchors, cfg.fg_fraction);
            let full_x = state.extract(&data.raw_features);
            let x_mb = full_x.select_columns(&mb_idx);

            let (breakdown, grads) = match &path {
                RpnPath::Ensemble(loss_cfg) => {
                    let out = corpn::forward(&state.head, &x_mb)?;
                    for &j in &out.selected {
                        selection_counts[j] += 1;
                    }
                    routing_violations += count_routing_violations(&out, &mb_labels);
                    corpn::total_loss(&state.head, &x_mb, &out, &mb_labels, loss_cfg)?
                }
                RpnPath::ReferenceSingle => {
                    selection_counts[0] += mb_idx.len() as u64;
                    reference::single_rpn_grads(&state.head, &x_mb, &mb_labels)
                }
            };
            check_finite(step, &breakdown)?;
            step_losses.ce += breakdown.ce;
            step_losses.div += breakdown.div;
            step_losses.coop += breakdown.coop;
            step_losses.total += breakdown.total;

            d_head_w.add_scaled(&grads.d_weights, 1.0);
            for (a, b) in d_head_b.iter_mut().zip(&grads.d_biases) {
                *a += b;
            }
            // d_features is for the minibatch columns; chain onto the extractor.
            let raw_mb = data.raw_features.select_columns(&mb_idx);
            d_extractor.add_scaled(&grads.d_features.matmul_bt(&raw_mb), 1.0);

            // Category classifier on ground-truth crops plus as many
            // background crops, pooled features detached from the extractor.
            for (g, (cat, _)) in data.gt.iter().enumerate() {
                let pooled = pooled_feature(&full_x, &data.gt_members[g]);
                cls_loss += state.classifier.ce_accumulate(&pooled, *cat, &mut d_cls_w, &mut d_cls_b);
                n_crops += 1;
            }
            let mut crop_rng = derive_rng(cfg.seed, &[tag::BG_CROP, step as u64, slot as u64]);
            let bg_row = state.classifier.background_row();
            let n_hard = data.gt.len().min(data.hard_bg_indices.len());
            let n_easy = data.gt.len().min(data.bg_indices.len());
            let mut bg_picks = choose(&mut crop_rng, &data.hard_bg_indices, n_hard);
            bg_picks.extend(choose(&mut crop_rng, &data.bg_indices, n_easy));
            for &i in &bg_picks {
                let members = anchors_in_box(&anchors, &anchors[i]);
                let pooled = pooled_feature(&full_x, &members);
                cls_loss += state.classifier.ce_accumulate(&pooled, bg_row, &mut d_cls_w, &mut d_cls_b);
                n_crops += 1;
            }
        }

        let inv_scenes = 1.0 / cfg.scenes_per_step as f64;
        d_extractor.scale_in_place(inv_scenes);
        d_head_w.scale_in_place(inv_scenes);
        for v in &mut d_head_b {
            *v *= inv_scenes;
        }
        step_losses.ce *= inv_scenes;
        step_losses.div *= inv_scenes;
        step_losses.coop *= inv_scenes;
        step_losses.total *= inv_scenes;
        if n_crops > 0 {
            let inv_crops = 1.0 / n_crops as f64;
            d_cls_w.scale_in_place(inv_crops);
            for v in &mut d_cls_b {
                *v *= inv_crops;
            }
            cls_loss *= inv_crops;
        }

        sgd_step(
            state.extractor.data_mut(),
            d_extractor.data(),
            velocity.extractor.data_mut(),
            cfg.learning_rate,
            cfg.momentum,
        )?;
        sgd_step(
            state.head.weights_mut().data_mut(),
            d_head_w.data(),
            velocity.head_w.data_mut(),
            cfg.learning_rate,
            cfg.momentum,
        )?;
        sgd_step(
            state.head.biases_mut(),
            &d_head_b,
            &mut velocity.head_b,
            cfg.learning_rate,
            cfg.momentum,
        )?;
        sgd_step(
            state.classifier.weights.data_mut(),
            d_cls_w.data(),
            velocity.cls_w.data_mut(),
            cfg.learning_rate,
            cfg.momentum,
        )?;
        sgd_step(
            &mut state.classifier.biases,
            &d_cls_b,
            &mut velocity.cls_b,
            cfg.learning_rate,
            cfg.momentum,
        )?;

        loss_history.push(step_losses);
        classifier_loss_history.push(cls_loss);
    }

    Ok(TrainReport {
        state,
        loss_history,
        classifier_loss_history,
        selection_counts,
        routing_violations,
    })
}

fn count_routing_violations(out: &ForwardOutput, labels: &[bool]) -> u64 {
    let (_, grad) = corpn::ce_loss_selected(out, labels);
    let mut violations = 0;
    for i in 0..grad.cols() {
        let mut nonzero_rows = Vec::new();
        for j in 0..grad.rows() {
            if grad.at(j, i) != 0.0 {
                nonzero_rows.push(j);
            }
        }
        if nonzero_rows.len() != 1 || nonzero_rows[0] != out.selected[i] {
            violations += 1;
        }
    }
    violations
}

/// Phase 1: train extractor, ensemble head, and classifier on base scenes.
pub fn phase1_train(
    world: &World,
    episode: &Episode,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainReport, TrainError> {
    run_phase1(world, episode, cfg, RpnPath::Ensemble(*loss_cfg))
}

/// Support instances consumed by phase 2 under the given mode, in
/// deterministic order (novel first, then base for balanced mode).
pub fn support_instances(episode: &Episode) -> Vec<(CategoryId, u64, Bbox)> {
    episode
        .novel_support
        .iter()
        .map(|s| {
            let o = &s.objects[0];
            (o.category, s.id, o.bbox)
        })
        .collect()
}

/// Phase 2: freeze extractor and scorer head, expand the classifier with
/// novel rows, and fine-tune only the classifier on support instances.
pub fn phase2_finetune(
    world: &World,
    episode: &Episode,
    state: &ModelState,
    cfg: &TrainConfig,
) -> Result<ModelState, TrainError> {
    cfg.validate()?;
    let anchors = anchor_grid(world.config.extent, &cfg.anchors);
    let mut instances = support_instances(episode);
    if cfg.phase2_mode == Phase2Mode::Balanced {
        instances.extend(episode.base_support_instances());
    }

    // Pooled features once, from the frozen extractor.
    let scene_of = |id: u64| -> &Scene {
        episode
            .base_train
            .iter()
            .chain(&episode.novel_support)
            .chain(&episode.test)
            .find(|s| s.id == id)
            .expect("support instance references a known scene")
    };
    let pooled: Vec<(CategoryId, Vec<f64>)> = instances
        .iter()
        .map(|(cat, scene_id, bbox)| {
            let scene = scene_of(*scene_id);
            let raw = crate::simworld::render_features(world, scene, &anchors);
            let x = state.extract(&raw);
            let members = anchors_in_box(&anchors, bbox);
            (*cat, pooled_feature(&x, &members))
        })
        .collect();

    let mut c_rng = derive_rng(cfg.seed, &[tag::CLASSIFIER_INIT, 2]);
    let mut classifier = state.classifier.expand(world.config.n_novel, &mut c_rng);
    let mut vel_w = Matrix::zeros(classifier.weights.rows(), classifier.weights.cols());
    let mut vel_b = vec![0.0; classifier.biases.len()];

    for _step in 0..cfg.steps_phase2 {
        let mut d_w = Matrix::zeros(classifier.weights.rows(), classifier.weights.cols());
        let mut d_b = vec![0.0; classifier.biases.len()];
        for (cat, x) in &pooled {
            classifier.ce_accumulate(x, *cat, &mut d_w, &mut d_b);
        }
        let inv = 1.0 / pooled.len().max(1) as f64;
        d_w.scale_in_place(inv);
        for v in &mut d_b {
            *v *= inv;
        }
        sgd_step(classifier.weights.data_mut(), d_w.data(), vel_w.data_mut(), cfg.learning_rate, cfg.momentum)?;
        sgd_step(&mut classifier.biases, &d_b, &mut vel_b, cfg.learning_rate, cfg.momentum)?;
    }

    Ok(ModelState { extractor: state.extractor.clone(), head: state.head.clone(), classifier })
}

/// N single-classifier models trained separately with plain cross-entropy,
/// each from a different initialization. Member 0 uses the base seed, so a
/// one-member ensemble is exactly the single baseline.
pub fn train_naive_ensemble(
    world: &World,
    episode: &Episode,
    cfg: &TrainConfig,
    n_members: usize,
) -> Result<Vec<TrainReport>, TrainError> {
    if n_members < 1 {
        return Err(TrainError::InvalidConfig("ensemble needs at least one member".into()));
    }
    let plain = LossConfig { lambda_d: 0.0, lambda_c: 0.0, ..LossConfig::default() };
    (0..n_members)
        .map(|m| {
            let seed =
                if m == 0 { cfg.seed } else { rng::mix(cfg.seed, &[0x6e61_6976_6531u64, m as u64]) };
            let member_cfg = TrainConfig { n_rpns: 1, seed, ..cfg.clone() };
            phase1_train(world, episode, &member_cfg, &plain)
        })
        .collect()
}

pub mod reference {
    //! Plain single-classifier trainer used as the reduction oracle.
    //!
    //! The scorer gradient path below never touches selection, routing, or
    //! the combined loss; it is the textbook mean binary cross-entropy over
    //! the minibatch, written out directly.

    use super::*;
    use crate::corpn::{sigmoid, softplus, HeadGrads};

    pub(super) fn single_rpn_grads(
        head: &CoRpnHead,
        x_mb: &Matrix,
        labels: &[bool],
    ) -> (LossBreakdown, HeadGrads) {
        assert_eq!(head.n_rpns(), 1, "reference trainer is single-classifier");
        let mut raw = head.weights().matmul(x_mb);
        let bias = head.biases()[0];
        for v in raw.row_mut(0) {
            *v += bias;
        }
        let m = x_mb.cols();
        let inv_m = 1.0 / m as f64;
        let mut loss = 0.0;
        let mut d_raw = Matrix::zeros(1, m);
        for i in 0..m {
            let r = raw.at(0, i);
            let y = if labels[i] { 1.0 } else { 0.0 };
            loss += y * softplus(-r) + (1.0 - y) * softplus(r);
            d_raw.set(0, i, (sigmoid(r) - y) * inv_m);
        }
        loss *= inv_m;
        let d_weights = d_raw.matmul_bt(x_mb);
        let d_biases = vec![d_raw.row(0).iter().sum()];
        let d_features = head.weights().matmul_at(&d_raw);
        (
            LossBreakdown { ce: loss, div: 0.0, coop: 0.0, total: loss },
            HeadGrads { d_weights, d_biases, d_features },
        )
    }

    /// Phase 1 with a single plain classifier head.
    pub fn phase1_train_single(
        world: &World,
        episode: &Episode,
        cfg: &TrainConfig,
    ) -> Result<TrainReport, TrainError> {
        let cfg = TrainConfig { n_rpns: 1, ..cfg.clone() };
        run_phase1(world, episode, &cfg, RpnPath::ReferenceSingle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff_grad, max_rel_err};
    use crate::simworld::{make_episode, WorldConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_world() -> World {
        World::generate(3, WorldConfig { n_base: 4, n_novel: 2, ..WorldConfig::default() })
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            steps_phase1: 40,
            steps_phase2: 20,
            scenes_per_step: 2,
            n_rpns: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 + 0.1]);
    }

    #[test]
    fn sgd_velocity_decays_geometrically_on_zero_gradient() {
        let mut p = vec![0.0];
        let mut v = vec![1.0];
        for k in 1..=4 {
            sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.5).unwrap();
            assert_abs_diff_eq!(v[0], 0.5f64.powi(k), epsilon = 1e-15);
        }
    }

    #[test]
    fn sgd_two_steps_match_hand_recurrence() {
        // v1 = -lr*g1, p1 = p0 + v1; v2 = m*v1 - lr*g2, p2 = p1 + v2.
        let (lr, m, g1, g2) = (0.2, 0.9, 1.0, -0.5);
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[g1], &mut v, lr, m).unwrap();
        sgd_step(&mut p, &[g2], &mut v, lr, m).unwrap();
        let v1 = -lr * g1;
        let p1 = 1.0 + v1;
        let v2 = m * v1 - lr * g2;
        assert_abs_diff_eq!(p[0], p1 + v2, epsilon = 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        assert!(matches!(
            sgd_step(&mut p, &[f64::NAN], &mut v, 0.1, 0.9),
            Err(TrainError::NonFiniteGradient)
        ));
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        for variant in [ClassifierVariant::Fc, ClassifierVariant::Cosine] {
            let mut rng = derive_rng(5, &[tag::CLASSIFIER_INIT, 9]);
            let cls = ClassifierHead::random(variant, 4, 6, &mut rng);
            let mut x = vec![0.0; 6];
            rng::fill_normal(&mut rng, &mut x, 1.0);
            let target = 2;

            let rows = cls.weights.rows();
            let n_w = rows * 6;
            let mut d_w = Matrix::zeros(rows, 6);
            let mut d_b = vec![0.0; rows];
            cls.ce_accumulate(&x, target, &mut d_w, &mut d_b);

            let mut point: Vec<f64> = cls.weights.data().to_vec();
            point.extend_from_slice(&cls.biases);
            let numeric = central_diff_grad(
                |p| {
                    let mut probe = cls.clone();
                    probe.weights.data_mut().copy_from_slice(&p[..n_w]);
                    probe.biases.copy_from_slice(&p[n_w..]);
                    let logits = probe.logits(&x);
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                    max + z.ln() - logits[target]
                },
                &point,
                1e-6,
            );
            let mut analytic: Vec<f64> = d_w.data().to_vec();
            analytic.extend_from_slice(&d_b);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-6, "{variant:?}: rel err {err}");
        }
    }

    #[test]
    fn zero_steps_leave_state_at_init() {
        let world = tiny_world();
        let episode = make_episode(&world, 1, 8, 2, 3).unwrap();
        let cfg = TrainConfig { steps_phase1: 0, ..tiny_cfg() };
        let report = phase1_train(&world, &episode, &cfg, &LossConfig::default()).unwrap();
        assert_eq!(report.state, ModelState::init(&world, &cfg));
        assert!(report.loss_history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let world = tiny_world();
        let episode = make_episode(&world, 1, 8, 2, 3).unwrap();
        let cfg = tiny_cfg();
        let a = phase1_train(&world, &episode, &cfg, &LossConfig::default()).unwrap();
        let b = phase1_train(&world, &episode, &cfg, &LossConfig::default()).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.selection_counts, b.selection_counts);
    }

    #[test]
    fn reduced_ensemble_matches_reference_bitwise() {
        let world = tiny_world();
        let episode = make_episode(&world, 1, 8, 2, 3).unwrap();
        let cfg = TrainConfig { n_rpns: 1, steps_phase1: 60, ..tiny_cfg() };
        let reduced = LossConfig { lambda_d: 0.0, lambda_c: 0.0, ..LossConfig::default() };
        let ours = phase1_train(&world, &episode, &cfg, &reduced).unwrap();
        let reference = reference::phase1_train_single(&world, &episode, &cfg).unwrap();
        assert_eq!(ours.state, reference.state);
        for (a, b) in ours.loss_history.iter().zip(&reference.loss_history) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn routing_is_exact_during_training() {
        let world = tiny_world();
        let episode = make_episode(&world, 1, 8, 2, 3).unwrap();
        let report = phase1_train(&world, &episode, &tiny_cfg(), &LossConfig::default()).unwrap();
        assert_eq!(report.routing_violations, 0);
        let total: u64 = report.selection_counts.iter().sum();
        assert!(total > 0);
    }

    #[test]
    fn phase2_freezes_extractor_and_head() {
        let world = tiny_world();
        let episode = make_episode(&world, 1, 8, 2, 3).unwrap();
        let cfg = tiny_cfg();
        let report = phase1_train(&world, &episode, &cfg, &LossConfig::default()).unwrap();
        let tuned = phase2_finetune(&world, &episode, &report.state, &cfg).unwrap();
        assert_eq!(tuned.head, report.state.head);
        assert_eq!(tuned.extractor, report.state.extractor);
        assert_ne!(tuned.classifier.weights().data(), report.state.classifier.weights().data());
        assert_eq!(tuned.classifier.n_categories(), world.n_categories());
    }

    #[test]
    fn balanced_mode_consumes_shots_per_category() {
        let world = tiny_world();
        let episode = make_episode(&world, 2, 30, 2, 3).unwrap();
        let mut instances = support_instances(&episode);
        instances.extend(episode.base_support_instances());
        for cat in 0..world.n_categories() {
            let count = instances.iter().filter(|(c, _, _)| *c == cat).count();
            assert_eq!(count, 2, "category {cat}");
        }
    }

    #[test]
    fn novel_only_mode_touches_no_base_instances() {
        let world = tiny_world();
        let episode = make_episode(&world, 1, 8, 2, 3).unwrap();
        let instances = support_instances(&episode);
        assert!(instances.iter().all(|(c, _, _)| episode.split.novel.contains(c)));
    }

    #[test]
    fn naive_ensemble_members_are_distinct_and_first_matches_baseline() {
        let world = tiny_world();
        let episode = make_episode(&world, 1, 8, 2, 3).unwrap();
        let cfg = TrainConfig { steps_phase1: 30, ..tiny_cfg() };
        let members = train_naive_ensemble(&world, &episode, &cfg, 3).unwrap();
        assert_eq!(members.len(), 3);
        for a in 0..3 {
            for b in (a + 1)..3 {
                let wa = members[a].state.head.weights().data();
                let wb = members[b].state.head.weights().data();
                let dist: f64 = wa.iter().zip(wb).map(|(x, y)| (x - y) * (x - y)).sum();
                assert!(dist > 0.0, "members {a} and {b} coincide");
            }
        }
        let single_cfg = TrainConfig { n_rpns: 1, ..cfg.clone() };
        let plain = LossConfig { lambda_d: 0.0, lambda_c: 0.0, ..LossConfig::default() };
        let single = phase1_train(&world, &episode, &single_cfg, &plain).unwrap();
        assert_eq!(members[0].state, single.state);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let cfg = TrainConfig { minibatch_anchors: 3, n_rpns: 5, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { momentum: 1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
