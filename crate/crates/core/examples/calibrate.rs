//! Scratch calibration runs (temporary; removed before release).

use corpn_core::corpn::LossConfig;
use corpn_core::eval::EvalConfig;
use corpn_core::harness::*;
use corpn_core::simworld::WorldConfig;
use corpn_core::train::{Phase2Mode, TrainConfig};
use std::time::Instant;

fn base_spec(seeds: usize) -> ExperimentSpec {
    ExperimentSpec {
        method: Method::Corpn,
        n_rpns: 5,
        loss: LossConfig::default(),
        shots: 1,
        seeds: (0..seeds as u64).collect(),
        world: WorldConfig::default(),
        train: TrainConfig::default(),
        eval: EvalConfig::default(),
        n_train_scenes: 40,
        n_test_scenes: 30,
    }
}

fn summarize(name: &str, outcomes: &[RunOutcome]) {
    let runs = successful_runs(outcomes);
    let get = |f: fn(&corpn_core::eval::MetricsRecord) -> f64| -> Aggregate {
        aggregate(&runs.iter().map(|(_, r)| f(&r.metrics)).collect::<Vec<_>>())
    };
    let fnr = get(|m| m.avg_fn);
    let rec = get(|m| m.proposal_recall);
    let fg = get(|m| m.avg_fg);
    let nap = get(|m| m.novel_ap50);
    let bap = get(|m| m.base_ap50);
    let ld = get(|m| m.logdet_cov);
    let min_sel = runs
        .iter()
        .map(|(_, r)| {
            r.diagnostics
                .selection_fractions
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min);
    println!(
        "{name:24} fn={:.3}±{:.3} rec={:.3}±{:.3} fg={:.2}±{:.2} nAP={:.3}±{:.3} bAP={:.3}±{:.3} logdet={:.2} minsel={:.4} ok={}",
        fnr.mean, fnr.stderr, rec.mean, rec.stderr, fg.mean, fg.stderr,
        nap.mean, nap.stderr, bap.mean, bap.stderr, ld.mean, min_sel, runs.len()
    );
}

fn paired(metric: fn(&corpn_core::eval::MetricsRecord) -> f64, a: &[RunOutcome], b: &[RunOutcome]) -> Aggregate {
    let av: Vec<f64> = a.iter().map(|o| metric(&o.result.as_ref().unwrap().metrics)).collect();
    let bv: Vec<f64> = b.iter().map(|o| metric(&o.result.as_ref().unwrap().metrics)).collect();
    paired_diff(&av, &bv).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("headline");
    let seeds: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);

    match mode {
        "shift" => {
            // How novel_shift moves single-classifier novel recall.
            for shift in [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0] {
                let mut spec = base_spec(seeds);
                spec.method = Method::Single;
                spec.world.novel_shift = shift;
                let outcomes = run_experiment(&spec).unwrap();
                summarize(&format!("single shift={shift}"), &outcomes);
            }
        }
        "alpha" => {
            // Objectness weight vs single-classifier transfer, shift fixed.
            for alpha in [0.0, 0.2, 0.35, 0.5, 0.65, 0.8] {
                let mut spec = base_spec(seeds);
                spec.method = Method::Single;
                spec.world.objectness = alpha;
                let outcomes = run_experiment(&spec).unwrap();
                summarize(&format!("single alpha={alpha}"), &outcomes);
            }
        }
        "grid" => {
            // Joint (alpha, shift) probe for corpn vs single.
            for alpha in [0.3, 0.5] {
                for shift in [1.0, 2.0, 3.0] {
                    let mut single = base_spec(seeds);
                    single.method = Method::Single;
                    single.world.objectness = alpha;
                    single.world.novel_shift = shift;
                    let so = run_experiment(&single).unwrap();
                    let mut corpn = single.clone();
                    corpn.method = Method::Corpn;
                    let co = run_experiment(&corpn).unwrap();
                    summarize(&format!("single a={alpha} s={shift}"), &so);
                    summarize(&format!("corpn  a={alpha} s={shift}"), &co);
                    let d_fn = paired(|m| m.avg_fn, &co, &so);
                    let d_rec = paired(|m| m.proposal_recall, &co, &so);
                    println!(
                        "  paired: d_fn {:.3}±{:.3}  d_rec {:.3}±{:.3}",
                        d_fn.mean, d_fn.stderr, d_rec.mean, d_rec.stderr
                    );
                }
            }
        }
        "sanity" => {
            // Noise-free, shift-free world must be learnable.
            let mut spec = base_spec(seeds.min(5));
            spec.method = Method::Single;
            spec.world.noise_sigma = 0.0;
            spec.world.novel_shift = 0.0;
            let outcomes = run_experiment(&spec).unwrap();
            summarize("single sigma=0 shift=0", &outcomes);
        }
        "headline" => {
            let t0 = Instant::now();
            let base = base_spec(seeds);
            let mut single = base.clone();
            single.method = Method::Single;
            let so = run_experiment(&single).unwrap();
            summarize("single", &so);
            let co = run_experiment(&base).unwrap();
            summarize("corpn n=5", &co);
            let d_fn = paired(|m| m.avg_fn, &co, &so);
            let d_rec = paired(|m| m.proposal_recall, &co, &so);
            println!(
                "paired corpn-single: d_fn {:.4}±{:.4} (want < -2se) d_rec {:.4}±{:.4} (want > +2se)",
                d_fn.mean, d_fn.stderr, d_rec.mean, d_rec.stderr
            );
            println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
        }
        "ablation" => {
            let t0 = Instant::now();
            let base = base_spec(seeds);
            for n in [2usize, 5] {
                let mut corpn = base.clone();
                corpn.n_rpns = n;
                let c = run_experiment(&corpn).unwrap();
                summarize(&format!("corpn n={n}"), &c);
                let mut naive = base.clone();
                naive.method = Method::NaiveEnsemble;
                naive.n_rpns = n;
                let nv = run_experiment(&naive).unwrap();
                summarize(&format!("naive n={n}"), &nv);
                let d = paired(|m| m.novel_ap50, &c, &nv);
                println!("paired nAP corpn-naive n={n}: {:.4}±{:.4}", d.mean, d.stderr);
            }
            println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
        }
        "phi" => {
            let t0 = Instant::now();
            let base = base_spec(seeds);
            let mut single = base.clone();
            single.method = Method::Single;
            single.train.phase2_mode = Phase2Mode::NovelOnly;
            let so = run_experiment(&single).unwrap();
            summarize("single (novel_only)", &so);
            for (phi, outcomes) in sweep_phi(&base, &[0.1, 0.3, 0.5, 0.7, 0.9]).unwrap() {
                summarize(&format!("corpn phi={phi}"), &outcomes);
            }
            println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
        }
        "lambda" => {
            let base = base_spec(seeds);
            let mut nodiv = base.clone();
            nodiv.loss.lambda_d = 0.0;
            let a = run_experiment(&base).unwrap();
            let b = run_experiment(&nodiv).unwrap();
            summarize("corpn lambda_d=0.05", &a);
            summarize("corpn lambda_d=0", &b);
            // per-seed logdet comparison
            let mut all = true;
            for (x, y) in a.iter().zip(&b) {
                let lx = x.result.as_ref().unwrap().metrics.logdet_cov;
                let ly = y.result.as_ref().unwrap().metrics.logdet_cov;
                if lx <= ly {
                    all = false;
                    println!("  seed {}: corpn {lx:.2} <= ablation {ly:.2}", x.seed);
                }
            }
            println!("logdet higher on every seed: {all}");
            let min_sel = a
                .iter()
                .flat_map(|o| o.result.as_ref().unwrap().diagnostics.selection_fractions.clone())
                .fold(f64::INFINITY, f64::min);
            println!("min selection fraction with lambda_d>0: {min_sel:.4}");
        }
        "tune" => {
            let combos: Vec<(f64, f64, usize)> = vec![
                (0.05, 0.3, 300),
                (0.01, 0.3, 300),
                (0.05, 0.1, 300),
                (0.01, 0.1, 300),
                (0.05, 0.3, 600),
                (0.01, 0.1, 600),
            ];
            for (ld, std, steps) in combos {
                let mut single = base_spec(seeds);
                single.method = Method::Single;
                single.train.init_std = std;
                single.train.steps_phase1 = steps;
                let so = run_experiment(&single).unwrap();
                let mut corpn = single.clone();
                corpn.method = Method::Corpn;
                corpn.loss.lambda_d = ld;
                let co = run_experiment(&corpn).unwrap();
                summarize(&format!("single std={std} T={steps}"), &so);
                summarize(&format!("corpn ld={ld} std={std} T={steps}"), &co);
                let d_fn = paired(|m| m.avg_fn, &co, &so);
                let d_rec = paired(|m| m.proposal_recall, &co, &so);
                println!(
                    "  paired: d_fn {:.3}±{:.3}  d_rec {:.3}±{:.3}",
                    d_fn.mean, d_fn.stderr, d_rec.mean, d_rec.stderr
                );
            }
        }
        "lambda_d" => {
            let mut single = base_spec(seeds);
            single.method = Method::Single;
            single.world.objectness = 0.4;
            let so = run_experiment(&single).unwrap();
            summarize("single a=0.4", &so);
            for ld in [0.01, 0.02, 0.03, 0.05, 0.08] {
                let mut corpn = single.clone();
                corpn.method = Method::Corpn;
                corpn.loss.lambda_d = ld;
                let co = run_experiment(&corpn).unwrap();
                summarize(&format!("corpn ld={ld}"), &co);
                let d_fn = paired(|m| m.avg_fn, &co, &so);
                let d_rec = paired(|m| m.proposal_recall, &co, &so);
                println!(
                    "  paired: d_fn {:.3}±{:.3}  d_rec {:.3}±{:.3}",
                    d_fn.mean, d_fn.stderr, d_rec.mean, d_rec.stderr
                );
            }
        }
        "batch" => {
            for (mb, steps) in [(64usize, 300usize), (128, 300), (256, 300), (256, 500), (512, 300)] {
                let mut single = base_spec(seeds);
                single.method = Method::Single;
                single.world.objectness = 0.4;
                single.train.minibatch_anchors = mb;
                single.train.steps_phase1 = steps;
                let so = run_experiment(&single).unwrap();
                let mut corpn = single.clone();
                corpn.method = Method::Corpn;
                let co = run_experiment(&corpn).unwrap();
                summarize(&format!("single mb={mb} T={steps}"), &so);
                summarize(&format!("corpn  mb={mb} T={steps}"), &co);
                let d_fn = paired(|m| m.avg_fn, &co, &so);
                let d_rec = paired(|m| m.proposal_recall, &co, &so);
                println!(
                    "  paired: d_fn {:.3}±{:.3}  d_rec {:.3}±{:.3}",
                    d_fn.mean, d_fn.stderr, d_rec.mean, d_rec.stderr
                );
            }
        }
        "probe3" => {
            use corpn_core::eval::{ap50, detect_scenes, GtBox, Scorer};
            use corpn_core::geometry::iou;
            use corpn_core::simworld::{make_episode, World};
            use corpn_core::train::*;
            let mut wc = WorldConfig::default();
            wc.objectness = 0.4;
            let method = args.get(2).map(String::as_str).unwrap_or("single");
            let world = World::generate(0, wc);
            let episode = make_episode(&world, 1, 40, 10, 0).unwrap();
            let n = if method == "single" { 1 } else { 5 };
            let cfg = TrainConfig { n_rpns: n, seed: 0, ..TrainConfig::default() };
            let loss = if method == "single" {
                LossConfig { lambda_d: 0.0, lambda_c: 0.0, ..LossConfig::default() }
            } else {
                LossConfig::default()
            };
            let report = phase1_train(&world, &episode, &cfg, &loss).unwrap();
            let tuned = phase2_finetune(&world, &episode, &report.state, &cfg).unwrap();
            let anchors = anchor_grid(world.config.extent, &cfg.anchors);
            let test_data = prepare_scenes(&world, &episode.test, &anchors, &cfg.anchors);
            // classifier accuracy on gt crops
            let mut correct = 0usize;
            let mut total = 0usize;
            let mut bg_called = 0usize;
            for d in &test_data {
                let x = tuned.extract(&d.raw_features);
                for (g, (cat, _)) in d.gt.iter().enumerate() {
                    let pooled = pooled_feature(&x, &d.gt_members[g]);
                    let logits = tuned.classifier.logits(&pooled);
                    let mut best = 0;
                    for (k, &l) in logits.iter().enumerate() {
                        if l > logits[best] {
                            best = k;
                        }
                    }
                    total += 1;
                    if best == *cat {
                        correct += 1;
                    }
                    if best == tuned.classifier.background_row() {
                        bg_called += 1;
                    }
                }
            }
            println!("{method}: gt-crop accuracy {correct}/{total}, bg-called {bg_called}");
            let scorer = Scorer::Unified(&tuned);
            let ecfg = corpn_core::eval::EvalConfig::default();
            let (dets, gt) = detect_scenes(&tuned, &scorer, &test_data, &anchors, &ecfg).unwrap();
            println!("detections/scene: {:.1}", dets.len() as f64 / test_data.len() as f64);
            // how many detections are junk (IOU < 0.5 with every gt of any category)
            let junk = dets
                .iter()
                .filter(|det| {
                    !gt.iter().any(|g: &GtBox| {
                        g.scene == det.scene && iou(&g.bbox, &det.bbox) >= 0.5
                    })
                })
                .count();
            println!("junk detections: {junk}/{}", dets.len());
            let ap = ap50(&dets, &gt, 0.5);
            println!(
                "nAP {:.3} bAP {:.3}",
                ap.mean_over(&episode.split.novel),
                ap.mean_over(&episode.split.base)
            );
        }
        "probe2" => {
            use corpn_core::eval::Scorer;
            use corpn_core::simworld::{make_episode, World};
            use corpn_core::train::*;
            let mut wc = WorldConfig::default();
            wc.objectness = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.4);
            let world = World::generate(0, wc);
            let episode = make_episode(&world, 1, 40, 10, 0).unwrap();
            let cfg = TrainConfig { n_rpns: 5, seed: 0, ..TrainConfig::default() };
            let loss = LossConfig::default();
            let report = phase1_train(&world, &episode, &cfg, &loss).unwrap();
            println!("head biases: {:?}", report.state.head.biases());
            println!("selection fractions: {:?}", report.selection_fractions());
            let anchors = anchor_grid(world.config.extent, &cfg.anchors);
            let data = prepare_scenes(&world, &episode.test, &anchors, &cfg.anchors);
            let scorer = Scorer::Unified(&report.state);
            let mut bg_fg_votes = 0usize;
            let mut bg_n = 0usize;
            let mut winner_hist = vec![0usize; 5];
            let mut example = true;
            for d in &data {
                let probs = scorer.scene_probs(d).unwrap();
                for &i in &d.bg_indices {
                    bg_n += 1;
                    let col: Vec<f64> = (0..5).map(|j| probs.at(j, i)).collect();
                    let (_, fg) = corpn_core::corpn::score_box(&col);
                    let j = corpn_core::corpn::select_rpn(&col);
                    winner_hist[j] += 1;
                    if fg {
                        bg_fg_votes += 1;
                        if example && bg_n % 997 == 0 {
                            println!("bg col voted fg: {col:?}");
                            example = bg_n < 5000;
                        }
                    }
                }
            }
            println!("bg anchors voting fg: {bg_fg_votes}/{bg_n}  bg winner hist {winner_hist:?}");
        }
        "probe" => {
            use corpn_core::corpn::forward;
            use corpn_core::eval::Scorer;
            use corpn_core::simworld::{make_episode, World};
            use corpn_core::train::*;
            let mut world_cfg = WorldConfig::default();
            world_cfg.noise_sigma = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
            world_cfg.novel_shift = 0.0;
            let world = World::generate(0, world_cfg);
            let episode = make_episode(&world, 1, 40, 10, 0).unwrap();
            let cfg = TrainConfig { n_rpns: 1, seed: 0, ..TrainConfig::default() };
            let plain = LossConfig { lambda_d: 0.0, lambda_c: 0.0, ..LossConfig::default() };
            let report = phase1_train(&world, &episode, &cfg, &plain).unwrap();
            let h = &report.loss_history;
            for k in [0, 10, 50, 100, 200, 299] {
                println!("step {k}: ce={:.4}", h[k].ce);
            }
            // fg/bg score stats on the base training scenes
            let anchors = anchor_grid(world.config.extent, &cfg.anchors);
            let data = prepare_scenes(&world, &episode.base_train, &anchors, &cfg.anchors);
            let scorer = Scorer::Unified(&report.state);
            let mut fg_scores = Vec::new();
            let mut bg_hi = 0usize;
            let mut bg_n = 0usize;
            let mut fg_per_scene = Vec::new();
            for d in &data {
                let probs = scorer.scene_probs(d).unwrap();
                fg_per_scene.push(d.fg_indices.len());
                for &i in &d.fg_indices {
                    fg_scores.push(probs.at(0, i));
                }
                for &i in &d.bg_indices {
                    bg_n += 1;
                    if probs.at(0, i) > 0.5 {
                        bg_hi += 1;
                    }
                }
            }
            fg_scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |p: f64| fg_scores[((fg_scores.len() - 1) as f64 * p) as usize];
            println!(
                "fg anchors/scene: min={} max={} mean={:.1}",
                fg_per_scene.iter().min().unwrap(),
                fg_per_scene.iter().max().unwrap(),
                fg_per_scene.iter().sum::<usize>() as f64 / fg_per_scene.len() as f64
            );
            println!(
                "fg scores: p10={:.3} p50={:.3} p90={:.3}  bg>0.5: {bg_hi}/{bg_n}",
                q(0.1), q(0.5), q(0.9)
            );
            let x = report.state.extract(&data[0].raw_features);
            let out = forward(&report.state.head, &x).unwrap();
            let w = report.state.head.weights();
            println!(
                "head |w|={:.3} b={:.3} probs range [{:.3},{:.3}]",
                w.row(0).iter().map(|v| v * v).sum::<f64>().sqrt(),
                report.state.head.biases()[0],
                out.probs.data().iter().cloned().fold(f64::INFINITY, f64::min),
                out.probs.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            );
        }
        other => eprintln!("unknown mode {other}"),
    }
}
