//! Cooperating ensemble of binary foreground/background classifiers.
//!
//! N linear classifiers share one feature space. Per anchor, the most certain
//! classifier (probability closest to 0 or 1) supplies the score and receives
//! the routed cross-entropy gradient. Two extra losses shape the ensemble: a
//! negative log-determinant of the covariance of the probability matrix keeps
//! the classifiers responding differently, and a hinge keeps every classifier
//! from firmly rejecting foreground anchors. Both extra losses reach all
//! classifiers; only the cross-entropy term is routed.

use crate::linalg::{self, LinalgError, Matrix};
use crate::rng;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpnError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cosine diversity needs at least 2 classifiers, got {0}")]
    NeedsTwoRows(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// N binary classifiers over a shared D-dimensional feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct CoRpnHead {
    weights: Matrix,
    biases: Vec<f64>,
}

impl CoRpnHead {
    pub fn new(weights: Matrix, biases: Vec<f64>) -> Self {
        assert_eq!(weights.rows(), biases.len(), "one bias per classifier");
        assert!(weights.rows() >= 1, "need at least one classifier");
        Self { weights, biases }
    }

    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn random<R: Rng>(n_rpns: usize, feature_dim: usize, std: f64, rng: &mut R) -> Self {
        let mut weights = Matrix::zeros(n_rpns, feature_dim);
        rng::fill_normal(rng, weights.data_mut(), std);
        Self::new(weights, vec![0.0; n_rpns])
    }

    pub fn n_rpns(&self) -> usize {
        self.weights.rows()
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

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }
}

/// Raw scores, probabilities, and the per-anchor selected classifier.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub raw: Matrix,
    pub probs: Matrix,
    pub selected: Vec<usize>,
}

/// Which diversity term the combined loss uses. The log-determinant is the
/// primary mechanism; pairwise cosine similarity is the ablation baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityKind {
    LogDet,
    Cosine,
}

/// Trade-off hyperparameters of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Hinge threshold: no classifier may assign a foreground anchor less.
    pub phi: f64,
    /// Weight of the diversity term.
    pub lambda_d: f64,
    /// Weight of the cooperation term.
    pub lambda_c: f64,
    /// Ridge added to the covariance before the log-determinant.
    pub ridge: f64,
    pub diversity: DiversityKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { phi: 0.3, lambda_d: 0.05, lambda_c: 1.0, ridge: 1e-6, diversity: DiversityKind::LogDet }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), CorpnError> {
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(CorpnError::InvalidConfig(format!(
                "phi must lie in (0,1), got {}",
                self.phi
            )));
        }
        if self.lambda_d < 0.0 || self.lambda_c < 0.0 || self.ridge < 0.0 {
            return Err(CorpnError::InvalidConfig(
                "lambda_d, lambda_c and ridge must be nonnegative".into(),
            ));
        }
        if self.phi >= 0.5 {
            log::warn!("phi = {} is at or above 0.5; the hinge now pushes past uncertainty", self.phi);
        }
        Ok(())
    }
}

/// Per-term loss values; `total = ce + lambda_d*div + lambda_c*coop`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub div: f64,
    pub coop: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.div.is_finite() && self.coop.is_finite() && self.total.is_finite()
    }
}

/// Gradients of the combined loss with respect to head parameters and to the
/// input features (for the shared extractor).
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub d_weights: Matrix,
    pub d_biases: Vec<f64>,
    pub d_features: Matrix,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_matrix(raw: &Matrix) -> Matrix {
    let mut probs = raw.clone();
    for v in probs.data_mut() {
        *v = sigmoid(*v);
    }
    probs
}

/// Index of the most certain classifier: the probability closest to the edge
/// of [0,1]. Ties go to the lowest index.
pub fn select_rpn(f_col: &[f64]) -> usize {
    let mut best = 0;
    let mut best_certainty = f64::INFINITY;
    for (j, &f) in f_col.iter().enumerate() {
        let c = f.min(1.0 - f);
        if c < best_certainty {
            best_certainty = c;
            best = j;
        }
    }
    best
}

/// Per-column selection over an N x N_A probability matrix.
pub fn select_columns(probs: &Matrix) -> Vec<usize> {
    let (n, m) = (probs.rows(), probs.cols());
    let mut selected = Vec::with_capacity(m);
    for i in 0..m {
        let mut best = 0;
        let mut best_certainty = f64::INFINITY;
        for j in 0..n {
            let f = probs.at(j, i);
            let c = f.min(1.0 - f);
            if c < best_certainty {
                best_certainty = c;
                best = j;
            }
        }
        selected.push(best);
    }
    selected
}

/// Linear forward pass: raw scores, probabilities, per-anchor selection.
pub fn forward(head: &CoRpnHead, features: &Matrix) -> Result<ForwardOutput, CorpnError> {
    if features.rows() != head.feature_dim() {
        return Err(CorpnError::DimMismatch(format!(
            "features have {} rows, head expects {}",
            features.rows(),
            head.feature_dim()
        )));
    }
    let mut raw = head.weights.matmul(features);
    for j in 0..raw.rows() {
        let b = head.biases[j];
        for v in raw.row_mut(j) {
            *v += b;
        }
    }
    let probs = sigmoid_matrix(&raw);
    let selected = select_columns(&probs);
    Ok(ForwardOutput { raw, probs, selected })
}

/// Mean binary cross-entropy where each anchor contributes only through its
/// selected classifier. The gradient lives in raw-score space and is zero
/// everywhere except position `(selected[i], i)`, where it is `(f - y)/M`.
pub fn ce_loss_from_raw(raw: &Matrix, selected: &[usize], fg_labels: &[bool]) -> (f64, Matrix) {
    let m = raw.cols();
    assert_eq!(selected.len(), m);
    assert_eq!(fg_labels.len(), m);
    let mut grad = Matrix::zeros(raw.rows(), m);
    if m == 0 {
        return (0.0, grad);
    }
    let inv_m = 1.0 / m as f64;
    let mut loss = 0.0;
    for i in 0..m {
        let j = selected[i];
        let r = raw.at(j, i);
        let y = if fg_labels[i] { 1.0 } else { 0.0 };
        // BCE(sigmoid(r), y) = y*softplus(-r) + (1-y)*softplus(r)
        loss += y * softplus(-r) + (1.0 - y) * softplus(r);
        grad.set(j, i, (sigmoid(r) - y) * inv_m);
    }
    (loss * inv_m, grad)
}

/// Routed cross-entropy of a forward pass.
pub fn ce_loss_selected(out: &ForwardOutput, fg_labels: &[bool]) -> (f64, Matrix) {
    ce_loss_from_raw(&out.raw, &out.selected, fg_labels)
}

/// Diversity loss `-log det(Sigma(F) + ridge I)` and its gradient with respect
/// to the probabilities. The gradient reaches every classifier row.
pub fn diversity_loss(probs: &Matrix, ridge: f64) -> Result<(f64, Matrix), CorpnError> {
    let sigma = linalg::covariance(probs)?;
    let loss = -linalg::logdet_psd(&sigma, ridge)?;
    let g = linalg::grad_logdet(&sigma, ridge)?;
    let mut grad = linalg::chain_covariance_grad(probs, &g)?;
    grad.scale_in_place(-1.0);
    Ok((loss, grad))
}

/// Cooperation hinge `max(0, phi - f)` averaged over every (foreground
/// anchor, classifier) pair. Zero when there are no foreground anchors; the
/// subgradient at `f == phi` is taken from the inactive side.
pub fn coop_loss(probs: &Matrix, fg_mask: &[bool], phi: f64) -> (f64, Matrix) {
    let (n, m) = (probs.rows(), probs.cols());
    assert_eq!(fg_mask.len(), m);
    let mut grad = Matrix::zeros(n, m);
    let n_fg = fg_mask.iter().filter(|&&b| b).count();
    if n_fg == 0 {
        return (0.0, grad);
    }
    let denom = (n * n_fg) as f64;
    let mut loss = 0.0;
    for i in 0..m {
        if !fg_mask[i] {
            continue;
        }
        for j in 0..n {
            let f = probs.at(j, i);
            if f < phi {
                loss += phi - f;
                grad.set(j, i, -1.0 / denom);
            }
        }
    }
    (loss / denom, grad)
}

/// Mean pairwise cosine similarity of the mean-centered classifier rows, with
/// its gradient. Minimizing it drives the rows apart. A pair involving a
/// zero-norm centered row contributes nothing.
pub fn cosine_diversity_loss(probs: &Matrix) -> Result<(f64, Matrix), CorpnError> {
    let n = probs.rows();
    if n < 2 {
        return Err(CorpnError::NeedsTwoRows(n));
    }
    let m = probs.cols();
    let centered = probs.center_rows();
    let norms: Vec<f64> = (0..n)
        .map(|j| centered.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let pairs = (n * (n - 1) / 2) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, m);
    for a in 0..n {
        for b in (a + 1)..n {
            if norms[a] < 1e-12 || norms[b] < 1e-12 {
                continue;
            }
            let ua = centered.row(a);
            let ub = centered.row(b);
            let dot: f64 = ua.iter().zip(ub).map(|(x, y)| x * y).sum();
            let cos = dot / (norms[a] * norms[b]);
            loss += cos;
            for i in 0..m {
                grad.add_at(a, i, (ub[i] / (norms[a] * norms[b]) - cos * ua[i] / (norms[a] * norms[a])) / pairs);
                grad.add_at(b, i, (ua[i] / (norms[a] * norms[b]) - cos * ub[i] / (norms[b] * norms[b])) / pairs);
            }
        }
    }
    // The gradient rows are centered by construction, so no extra projection
    // through the centering is needed.
    Ok((loss / pairs, grad))
}

fn combined_terms(
    raw: &Matrix,
    probs: &Matrix,
    selected: &[usize],
    fg_labels: &[bool],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Matrix), CorpnError> {
    let (ce, mut d_raw) = ce_loss_from_raw(raw, selected, fg_labels);
    let mut div = 0.0;
    let mut coop = 0.0;
    // Terms with zero weight are skipped entirely so that reduced
    // configurations execute the identical float sequence to a plain
    // single-classifier trainer.
    if cfg.lambda_d > 0.0 {
        let (v, d_probs) = match cfg.diversity {
            DiversityKind::LogDet => diversity_loss(probs, cfg.ridge)?,
            DiversityKind::Cosine => cosine_diversity_loss(probs)?,
        };
        div = v;
        add_through_sigmoid(&mut d_raw, &d_probs, probs, cfg.lambda_d);
    }
    if cfg.lambda_c > 0.0 {
        let (v, d_probs) = coop_loss(probs, fg_labels, cfg.phi);
        coop = v;
        add_through_sigmoid(&mut d_raw, &d_probs, probs, cfg.lambda_c);
    }
    let total = ce + cfg.lambda_d * div + cfg.lambda_c * coop;
    Ok((LossBreakdown { ce, div, coop, total }, d_raw))
}

/// `d_raw += weight * d_probs .* f .* (1 - f)`, the sigmoid chain rule.
fn add_through_sigmoid(d_raw: &mut Matrix, d_probs: &Matrix, probs: &Matrix, weight: f64) {
    for (k, v) in d_raw.data_mut().iter_mut().enumerate() {
        let f = probs.data()[k];
        *v += weight * d_probs.data()[k] * f * (1.0 - f);
    }
}

/// Combined loss and parameter gradients for one minibatch.
///
/// `fg_labels` doubles as the cross-entropy target (foreground = 1) and as
/// the cooperation mask. The cross-entropy gradient is routed per anchor to
/// the selected classifier; diversity and cooperation gradients reach all
/// classifiers, and everything is mapped onto weights, biases, and the input
/// features of the shared extractor.
pub fn total_loss(
    head: &CoRpnHead,
    features: &Matrix,
    out: &ForwardOutput,
    fg_labels: &[bool],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, HeadGrads), CorpnError> {
    if features.cols() != out.raw.cols() || fg_labels.len() != out.raw.cols() {
        return Err(CorpnError::DimMismatch(format!(
            "features {}x{}, output {} anchors, {} labels",
            features.rows(),
            features.cols(),
            out.raw.cols(),
            fg_labels.len()
        )));
    }
    let (breakdown, d_raw) = combined_terms(&out.raw, &out.probs, &out.selected, fg_labels, cfg)?;
    let d_weights = d_raw.matmul_bt(features);
    let d_biases: Vec<f64> = (0..d_raw.rows()).map(|j| d_raw.row(j).iter().sum()).collect();
    let d_features = head.weights.matmul_at(&d_raw);
    Ok((breakdown, HeadGrads { d_weights, d_biases, d_features }))
}

/// Loss values recomputed from parameters with the per-anchor selection held
/// fixed. This is the smooth function finite differences are taken through.
pub fn eval_losses_frozen(
    head: &CoRpnHead,
    features: &Matrix,
    selected: &[usize],
    fg_labels: &[bool],
    cfg: &LossConfig,
) -> Result<LossBreakdown, CorpnError> {
    let mut raw = head.weights.matmul(features);
    for j in 0..raw.rows() {
        let b = head.biases[j];
        for v in raw.row_mut(j) {
            *v += b;
        }
    }
    let probs = sigmoid_matrix(&raw);
    Ok(combined_terms(&raw, &probs, selected, fg_labels, cfg)?.0)
}

/// Test-time score of one box: the most certain classifier's probability,
/// plus the foreground decision. A box is foreground when the highest
/// probability is closer to one than the lowest is to zero, equivalently when
/// the most certain classifier votes foreground.
pub fn score_box(f_col: &[f64]) -> (f64, bool) {
    let score = f_col[select_rpn(f_col)];
    let max = f_col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = f_col.iter().cloned().fold(f64::INFINITY, f64::min);
    (score, max + min > 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff_grad, max_rel_err};
    use crate::rng::{derive_rng, fill_normal, tag};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_probs(n: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = derive_rng(seed, &[99, n as u64, m as u64]);
        let mut f = Matrix::zeros(n, m);
        for v in f.data_mut() {
            *v = rng.gen_range(0.05..0.95);
        }
        f
    }

    #[test]
    fn zero_head_is_maximally_uncertain() {
        let head = CoRpnHead::new(Matrix::zeros(3, 4), vec![0.0; 3]);
        let features = Matrix::from_vec(4, 2, vec![1.0; 8]);
        let out = forward(&head, &features).unwrap();
        assert!(out.probs.data().iter().all(|&f| f == 0.5));
        assert_eq!(out.selected, vec![0, 0]);
    }

    #[test]
    fn single_classifier_always_selected() {
        let mut rng = derive_rng(3, &[tag::HEAD_INIT]);
        let head = CoRpnHead::random(1, 4, 0.5, &mut rng);
        let mut features = Matrix::zeros(4, 6);
        fill_normal(&mut rng, features.data_mut(), 1.0);
        let out = forward(&head, &features).unwrap();
        assert!(out.selected.iter().all(|&j| j == 0));
    }

    #[test]
    fn forward_rejects_feature_dim_mismatch() {
        let head = CoRpnHead::new(Matrix::zeros(2, 4), vec![0.0; 2]);
        let features = Matrix::zeros(3, 5);
        assert!(matches!(forward(&head, &features), Err(CorpnError::DimMismatch(_))));
    }

    #[test]
    fn selection_picks_most_certain() {
        assert_eq!(select_rpn(&[0.5, 0.5]), 0);
        assert_eq!(select_rpn(&[0.05, 0.95]), 0);
        assert_eq!(select_rpn(&[0.4, 0.99, 0.2]), 1);
        // certainties 0.1, 0.4, 0.3
        assert_eq!(select_rpn(&[0.9, 0.6, 0.3]), 0);
    }

    proptest! {
        #[test]
        fn selection_invariant_under_complement(
            col in proptest::collection::vec(0.001f64..0.999, 1..8)
        ) {
            let complemented: Vec<f64> = col.iter().map(|f| 1.0 - f).collect();
            prop_assert_eq!(select_rpn(&col), select_rpn(&complemented));
        }

        #[test]
        fn score_box_criteria_agree(
            col in proptest::collection::vec(0.001f64..0.999, 1..8)
        ) {
            let (_, via_sum) = score_box(&col);
            let j = select_rpn(&col);
            prop_assert_eq!(via_sum, col[j] > 0.5);
        }
    }

    #[test]
    fn ce_is_small_at_confident_correct_outputs() {
        let raw = Matrix::from_rows(&[vec![40.0, -40.0]]);
        let (loss, _) = ce_loss_from_raw(&raw, &[0, 0], &[true, false]);
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn ce_at_half_is_ln_two() {
        let raw = Matrix::from_rows(&[vec![0.0]]);
        let (loss, _) = ce_loss_from_raw(&raw, &[0], &[true]);
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn ce_gradient_is_routed_exactly() {
        let mut rng = derive_rng(17, &[tag::GRADCHECK]);
        let mut raw = Matrix::zeros(4, 9);
        fill_normal(&mut rng, raw.data_mut(), 1.0);
        let probs = sigmoid_matrix(&raw);
        let selected = select_columns(&probs);
        let labels: Vec<bool> = (0..9).map(|i| i % 2 == 0).collect();
        let (_, grad) = ce_loss_from_raw(&raw, &selected, &labels);
        for i in 0..9 {
            for j in 0..4 {
                if j == selected[i] {
                    assert!(grad.at(j, i) != 0.0);
                } else {
                    assert_eq!(grad.at(j, i), 0.0);
                }
            }
        }
    }

    #[test]
    fn diversity_loss_on_rank_deficient_probs_is_ridge_dominated() {
        // Identical rows: covariance [[v, v], [v, v]] with v = 0.06, so
        // det(Sigma + eI) = e(2v + e).
        let f = Matrix::from_rows(&[vec![0.2, 0.8, 0.5], vec![0.2, 0.8, 0.5]]);
        let ridge = 1e-6;
        let (loss, _) = diversity_loss(&f, ridge).unwrap();
        let v: f64 = 0.06;
        let expected = -(ridge * (2.0 * v + ridge)).ln();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-9);
        assert!(loss > 13.8);
    }

    #[test]
    fn diversity_loss_matches_determinant_arithmetic() {
        let f = Matrix::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.5, 0.9, 0.1]]);
        let (loss, _) = diversity_loss(&f, 0.0).unwrap();
        let v: f64 = 0.32 / 3.0;
        let c: f64 = 0.16 / 3.0;
        assert_abs_diff_eq!(loss, -(v * v - c * c).ln(), epsilon = 1e-12);
    }

    #[test]
    fn diversity_gradient_reaches_all_rows() {
        let f = random_probs(3, 8, 5);
        let (_, grad) = diversity_loss(&f, 1e-6).unwrap();
        for j in 0..3 {
            assert!(grad.row(j).iter().any(|&v| v != 0.0), "row {j} has no gradient");
        }
    }

    #[test]
    fn diversity_is_translation_invariant_per_row() {
        let f = random_probs(3, 8, 6);
        let mut shifted = f.clone();
        for v in shifted.row_mut(1) {
            *v += 0.37;
        }
        let (l0, g0) = diversity_loss(&f, 1e-6).unwrap();
        let (l1, g1) = diversity_loss(&shifted, 1e-6).unwrap();
        assert_abs_diff_eq!(l0, l1, epsilon = 1e-9);
        for (a, b) in g0.data().iter().zip(g1.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn coop_inactive_when_all_foregrounds_clear_threshold() {
        let f = Matrix::from_rows(&[vec![0.4, 0.9], vec![0.31, 0.5]]);
        let (loss, grad) = coop_loss(&f, &[true, true], 0.3);
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coop_matches_direct_formula() {
        // phi = 0.3, fg probs [[0.2, 0.5], [0.4, 0.1]]: (0.1 + 0 + 0 + 0.2)/4.
        let f = Matrix::from_rows(&[vec![0.2, 0.5], vec![0.4, 0.1]]);
        let (loss, grad) = coop_loss(&f, &[true, true], 0.3);
        assert_abs_diff_eq!(loss, 0.075, epsilon = 1e-15);
        assert_eq!(grad.at(0, 0), -0.25);
        assert_eq!(grad.at(0, 1), 0.0);
        assert_eq!(grad.at(1, 0), 0.0);
        assert_eq!(grad.at(1, 1), -0.25);
    }

    #[test]
    fn coop_ignores_background_columns_and_empty_masks() {
        let f = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.05, 0.2]]);
        let (loss, grad) = coop_loss(&f, &[false, false], 0.3);
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));

        // Background column values must not matter.
        let a = Matrix::from_rows(&[vec![0.2, 0.9], vec![0.1, 0.8]]);
        let b = Matrix::from_rows(&[vec![0.2, 0.01], vec![0.1, 0.02]]);
        let mask = [true, false];
        assert_eq!(coop_loss(&a, &mask, 0.3).0, coop_loss(&b, &mask, 0.3).0);
    }

    #[test]
    fn coop_is_nonincreasing_in_foreground_probability() {
        let mask = [true];
        let phi = 0.4;
        let mut prev = f64::INFINITY;
        for p in [0.05, 0.2, 0.39, 0.41, 0.9] {
            let f = Matrix::from_rows(&[vec![p]]);
            let (loss, _) = coop_loss(&f, &mask, phi);
            assert!(loss <= prev);
            prev = loss;
        }
    }

    #[test]
    fn score_box_examples() {
        assert_eq!(score_box(&[0.9, 0.6]), (0.9, true));
        assert_eq!(score_box(&[0.1, 0.45]), (0.1, false));
    }

    #[test]
    fn cosine_of_identical_rows_is_one() {
        let f = Matrix::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.1, 0.5, 0.9]]);
        let (loss, _) = cosine_diversity_loss(&f).unwrap();
        assert_abs_diff_eq!(loss, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_of_anticorrelated_rows_is_minus_one() {
        let f = Matrix::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.9, 0.5, 0.1]]);
        let (loss, _) = cosine_diversity_loss(&f).unwrap();
        assert_abs_diff_eq!(loss, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_skips_zero_norm_rows() {
        let f = Matrix::from_rows(&[vec![0.4, 0.4, 0.4], vec![0.1, 0.5, 0.9]]);
        let (loss, grad) = cosine_diversity_loss(&f).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_rejects_single_row() {
        let f = Matrix::from_rows(&[vec![0.1, 0.5]]);
        assert!(matches!(cosine_diversity_loss(&f), Err(CorpnError::NeedsTwoRows(1))));
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let f = random_probs(3, 8, 300 + seed);
            let (_, grad) = cosine_diversity_loss(&f).unwrap();
            let numeric = central_diff_grad(
                |x| cosine_diversity_loss(&Matrix::from_vec(3, 8, x.to_vec())).unwrap().0,
                f.data(),
                1e-5,
            );
            let err = max_rel_err(grad.data(), &numeric);
            assert!(err <= 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn total_loss_reduces_to_ce_when_weights_are_zero() {
        let mut rng = derive_rng(21, &[tag::HEAD_INIT]);
        let head = CoRpnHead::random(3, 5, 0.4, &mut rng);
        let mut features = Matrix::zeros(5, 12);
        fill_normal(&mut rng, features.data_mut(), 1.0);
        let labels: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let out = forward(&head, &features).unwrap();
        let cfg = LossConfig { lambda_d: 0.0, lambda_c: 0.0, ..LossConfig::default() };
        let (breakdown, grads) = total_loss(&head, &features, &out, &labels, &cfg).unwrap();
        assert_eq!(breakdown.total, breakdown.ce);
        assert_eq!(breakdown.div, 0.0);
        assert_eq!(breakdown.coop, 0.0);

        let (_, d_raw) = ce_loss_from_raw(&out.raw, &out.selected, &labels);
        let expected = d_raw.matmul_bt(&features);
        assert_eq!(grads.d_weights, expected);
    }

    #[test]
    fn total_loss_breakdown_is_consistent() {
        let mut rng = derive_rng(22, &[tag::HEAD_INIT]);
        let head = CoRpnHead::random(3, 5, 0.4, &mut rng);
        let mut features = Matrix::zeros(5, 16);
        fill_normal(&mut rng, features.data_mut(), 1.0);
        let labels: Vec<bool> = (0..16).map(|i| i % 4 == 0).collect();
        let out = forward(&head, &features).unwrap();
        let cfg = LossConfig::default();
        let (breakdown, _) = total_loss(&head, &features, &out, &labels, &cfg).unwrap();
        assert_abs_diff_eq!(
            breakdown.total,
            breakdown.ce + cfg.lambda_d * breakdown.div + cfg.lambda_c * breakdown.coop,
            epsilon = 1e-15
        );
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { phi: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { lambda_d: -0.1, ..LossConfig::default() }.validate().is_err());
        // phi above 0.5 warns but validates: the sweep goes up to 0.9.
        assert!(LossConfig { phi: 0.9, ..LossConfig::default() }.validate().is_ok());
    }
}
