//! Experiment orchestration: method comparisons, hyperparameter sweeps,
//! seed-parallel execution, and statistical aggregation.
//!
//! Every seed derives its own world and episode, and every method comparison
//! reuses the same seeds, so per-seed differences isolate the method.

use crate::corpn::{DiversityKind, LossConfig};
use crate::eval::{self, EvalConfig, MetricsRecord, Scorer};
use crate::simworld::{make_episode, World, WorldConfig};
use crate::train::{
    self, phase1_train, phase2_finetune, train_naive_ensemble, ModelState, Phase2Mode,
    TrainConfig, TrainError,
};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{failed} of {total} seeds failed (budget is 10%); first error: {first_error}")]
    TooManyFailures { failed: usize, total: usize, first_error: String },
    #[error("paired aggregation needs equal lengths, got {0} and {1}")]
    PairingMismatch(usize, usize),
    #[error("sweep list must not be empty")]
    EmptySweep,
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Single,
    Corpn,
    NaiveEnsemble,
    CosineDiv,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::Corpn => "corpn",
            Method::NaiveEnsemble => "naive_ensemble",
            Method::CosineDiv => "cosine_div",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "single" => Some(Method::Single),
            "corpn" => Some(Method::Corpn),
            "naive_ensemble" => Some(Method::NaiveEnsemble),
            "cosine_div" => Some(Method::CosineDiv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub method: Method,
    pub n_rpns: usize,
    pub loss: LossConfig,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub n_train_scenes: usize,
    pub n_test_scenes: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidSpec("need at least one seed".into()));
        }
        if self.n_rpns < 1 {
            return Err(HarnessError::InvalidSpec("n_rpns must be at least 1".into()));
        }
        Ok(())
    }

    /// A single-classifier baseline always runs with one classifier.
    pub fn effective_n_rpns(&self) -> usize {
        if self.method == Method::Single {
            1
        } else {
            self.n_rpns
        }
    }
}

/// Per-run observability beyond the metric record.
#[derive(Debug, Clone)]
pub struct RunDiagnostics {
    pub selection_fractions: Vec<f64>,
    pub routing_violations: u64,
    /// True when some classifier received under 1% of selections.
    pub selection_collapsed: bool,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub metrics: MetricsRecord,
    pub diagnostics: RunDiagnostics,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub result: Result<SeedRun, String>,
}

/// Full two-phase pipeline for one seed.
pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedRun, TrainError> {
    let world = World::generate(seed, spec.world.clone());
    let episode = make_episode(&world, spec.shots, spec.n_train_scenes, spec.n_test_scenes, seed)?;
    let train_cfg = TrainConfig { seed, n_rpns: spec.effective_n_rpns(), ..spec.train.clone() };

    let (member_states, tuned, diagnostics) = match spec.method {
        Method::NaiveEnsemble => {
            let members = train_naive_ensemble(&world, &episode, &train_cfg, spec.n_rpns)?;
            let tuned = phase2_finetune(&world, &episode, &members[0].state, &train_cfg)?;
            let counts: Vec<u64> =
                members.iter().map(|m| m.selection_counts.iter().sum()).collect();
            let total: u64 = counts.iter().sum();
            let fractions: Vec<f64> =
                counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect();
            let violations = members.iter().map(|m| m.routing_violations).sum();
            let states: Vec<ModelState> = members.into_iter().map(|m| m.state).collect();
            let collapsed = fractions.iter().any(|&f| f < 0.01);
            (
                states,
                tuned,
                RunDiagnostics {
                    selection_fractions: fractions,
                    routing_violations: violations,
                    selection_collapsed: collapsed,
                },
            )
        }
        method => {
            let loss_cfg = match method {
                Method::Single => {
                    LossConfig { lambda_d: 0.0, lambda_c: 0.0, ..spec.loss }
                }
                Method::CosineDiv => LossConfig { diversity: DiversityKind::Cosine, ..spec.loss },
                _ => LossConfig { diversity: DiversityKind::LogDet, ..spec.loss },
            };
            let report = phase1_train(&world, &episode, &train_cfg, &loss_cfg)?;
            let tuned = phase2_finetune(&world, &episode, &report.state, &train_cfg)?;
            let fractions = report.selection_fractions();
            let collapsed = fractions.iter().any(|&f| f < 0.01);
            if collapsed {
                log::warn!(
                    "seed {seed}: selection collapsed, fractions {fractions:?} (lambda_d = {})",
                    loss_cfg.lambda_d
                );
            }
            (
                Vec::new(),
                tuned,
                RunDiagnostics {
                    selection_fractions: fractions,
                    routing_violations: report.routing_violations,
                    selection_collapsed: collapsed,
                },
            )
        }
    };

    let scorer = if spec.method == Method::NaiveEnsemble {
        Scorer::Ensemble(&member_states)
    } else {
        Scorer::Unified(&tuned)
    };

    let anchors = train::anchor_grid(world.config.extent, &train_cfg.anchors);
    let support_data = train::prepare_scenes(&world, &episode.novel_support, &anchors, &train_cfg.anchors);
    let test_data = train::prepare_scenes(&world, &episode.test, &anchors, &train_cfg.anchors);

    // Proposal-level metrics on the support scenes, scorer frozen.
    let mut support_probs = Vec::with_capacity(support_data.len());
    let mut support_proposals = Vec::with_capacity(support_data.len());
    for data in &support_data {
        let probs = scorer.scene_probs(data)?;
        support_proposals.push(eval::propose(&probs, &anchors, &spec.eval));
        support_probs.push(probs);
    }
    let support_labels: Vec<_> = support_data.iter().map(|d| d.labels.clone()).collect();
    let avg_fn = eval::avg_false_negatives(&support_probs, &support_labels, spec.eval.fn_threshold);
    let avg_fg = eval::avg_foreground_after_nms(&support_proposals);
    let (matched, total) = support_data.iter().zip(&support_proposals).fold(
        (0usize, 0usize),
        |(m, t), (data, proposals)| {
            let gt: Vec<_> = data.gt.iter().map(|(_, b)| *b).collect();
            let (mm, tt) =
                eval::recall_counts(proposals, &gt, spec.eval.match_iou, spec.eval.recall_top_k);
            (m + mm, t + tt)
        },
    );
    let proposal_recall = if total == 0 { 1.0 } else { matched as f64 / total as f64 };

    // Category-level AP on the held-out test scenes.
    let (detections, gt) = eval::detect_scenes(&tuned, &scorer, &test_data, &anchors, &spec.eval)?;
    let ap = eval::ap50(&detections, &gt, spec.eval.match_iou);
    let novel_ap50 = ap.mean_over(&episode.split.novel);
    let base_ap50 = ap.mean_over(&episode.split.base);

    let logdet_cov = eval::mean_holdout_logdet(
        &scorer,
        &test_data,
        train_cfg.minibatch_anchors,
        train_cfg.fg_fraction,
        spec.loss.ridge,
        seed,
    )?;

    Ok(SeedRun {
        metrics: MetricsRecord { novel_ap50, base_ap50, avg_fn, avg_fg, proposal_recall, logdet_cov },
        diagnostics,
    })
}

/// Run every seed of the spec; seeds execute in parallel and results come
/// back in seed order. Failures are recorded, not propagated.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<RunOutcome>, HarnessError> {
    spec.validate()?;
    Ok(spec
        .seeds
        .par_iter()
        .map(|&seed| RunOutcome {
            seed,
            result: run_seed(spec, seed).map_err(|e| e.to_string()),
        })
        .collect())
}

/// Enforce the failure budget: more than 10% failed seeds fails the whole
/// experiment.
pub fn check_failure_budget(outcomes: &[RunOutcome]) -> Result<(), HarnessError> {
    let failed: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.result.is_err()).collect();
    if failed.len() * 10 > outcomes.len() {
        return Err(HarnessError::TooManyFailures {
            failed: failed.len(),
            total: outcomes.len(),
            first_error: failed[0].result.as_ref().err().cloned().unwrap_or_default(),
        });
    }
    for o in failed {
        log::warn!("seed {} failed: {}", o.seed, o.result.as_ref().err().unwrap());
    }
    Ok(())
}

pub fn successful_runs(outcomes: &[RunOutcome]) -> Vec<(u64, &SeedRun)> {
    outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok().map(|r| (o.seed, r)))
        .collect()
}

/// Sweep the cooperation threshold. Fine-tuning runs on novel classes only,
/// which is the regime the false-negative and foreground counts describe.
pub fn sweep_phi(
    base: &ExperimentSpec,
    phis: &[f64],
) -> Result<Vec<(f64, Vec<RunOutcome>)>, HarnessError> {
    if phis.is_empty() {
        return Err(HarnessError::EmptySweep);
    }
    phis.iter()
        .map(|&phi| {
            let mut spec = base.clone();
            spec.loss.phi = phi;
            spec.train.phase2_mode = Phase2Mode::NovelOnly;
            run_experiment(&spec).map(|o| (phi, o))
        })
        .collect()
}

/// Sweep the number of classifiers.
pub fn sweep_n_rpns(
    base: &ExperimentSpec,
    ns: &[usize],
) -> Result<Vec<(usize, Vec<RunOutcome>)>, HarnessError> {
    if ns.is_empty() {
        return Err(HarnessError::EmptySweep);
    }
    ns.iter()
        .map(|&n| {
            let mut spec = base.clone();
            spec.n_rpns = n;
            spec.method = if n == 1 { Method::Single } else { base.method };
            run_experiment(&spec).map(|o| (n, o))
        })
        .collect()
}

/// Run several methods over the same seeds.
pub fn compare_methods(
    base: &ExperimentSpec,
    methods: &[Method],
) -> Result<Vec<(Method, Vec<RunOutcome>)>, HarnessError> {
    if methods.is_empty() {
        return Err(HarnessError::EmptySweep);
    }
    methods
        .iter()
        .map(|&method| {
            let mut spec = base.clone();
            spec.method = method;
            run_experiment(&spec).map(|o| (method, o))
        })
        .collect()
}

/// Mean, unbiased standard deviation, and standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub stddev: f64,
    pub stderr: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate { n: 0, mean: 0.0, stddev: 0.0, stderr: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Aggregate { n, mean, stddev: 0.0, stderr: 0.0 };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let stddev = var.sqrt();
    Aggregate { n, mean, stddev, stderr: stddev / (n as f64).sqrt() }
}

/// Aggregate of per-seed differences `a[i] - b[i]`.
pub fn paired_diff(a: &[f64], b: &[f64]) -> Result<Aggregate, HarnessError> {
    if a.len() != b.len() {
        return Err(HarnessError::PairingMismatch(a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(aggregate(&diffs))
}

pub const CSV_HEADER: &str = "run_id,method,n_rpn,phi,lambda_d,lambda_c,shot,seed,novel_ap50,base_ap50,avg_fn,avg_fg,proposal_recall,logdet_cov";

/// One CSV line per successful seed, fixed six fractional digits.
pub fn csv_rows(spec: &ExperimentSpec, outcomes: &[RunOutcome]) -> Vec<String> {
    let method = spec.method.name();
    let n = spec.effective_n_rpns();
    successful_runs(outcomes)
        .into_iter()
        .map(|(seed, run)| {
            let m = &run.metrics;
            format!(
                "{method}_n{n}_phi{phi:.2}_k{shot}_s{seed},{method},{n},{phi:.6},{ld:.6},{lc:.6},{shot},{seed},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                m.novel_ap50,
                m.base_ap50,
                m.avg_fn,
                m.avg_fg,
                m.proposal_recall,
                m.logdet_cov,
                phi = spec.loss.phi,
                ld = spec.loss.lambda_d,
                lc = spec.loss.lambda_c,
                shot = spec.shots,
            )
        })
        .collect()
}
