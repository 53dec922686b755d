//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fail.

mod common;

use std::time::Instant;

use concept_autodiff::{grad_check, Padding, Result as AdResult, Tape, Tensor, Var};
use concept_explain::distill::{
    lambda_schedule, prepare_samples, prior_loss_ce, prior_loss_l2, train, DistillConfig,
    OptimizerKind, PriorKind,
};
use concept_explain::harness::report::{CONTRIBUTIONS_CSV, CURVES_CSV, REPORT_JSON, SUMMARY_CSV};
use concept_explain::harness::{
    emit_report, generate_dataset, load_model, pretrain_performer, run_experiment, save_model,
    Checkpoint, ExperimentConfig, ExperimentResult, PretrainConfig, SyntheticSpec,
};
use concept_explain::metrics::{entropy, evaluate, EvalSubset};
use concept_explain::models::{CaseTag, ExplainerModel, InputSource};
use concept_explain::prior::{prior_case2_graph, SharedFeature};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn weighted_sum(t: &mut Tape, v: Var, weights: &Tensor) -> AdResult<Var> {
    let y = t.flatten(v)?;
    let w = t.constant(Tensor::vector(weights.data()));
    t.dot(y, w)
}

/// Worst gradient error over every op and three three-layer networks.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut check = |f: &dyn Fn(&mut Tape, Var) -> AdResult<Var>, x: &Tensor| {
        worst = worst.max(grad_check(f, x, GRAD_STEP).unwrap_or(f64::INFINITY));
    };

    let v = Tensor::vector(&[0.7, -1.3, 0.4, -0.6, 1.1]);
    let pos = Tensor::vector(&[0.7, 1.3, 0.4, 0.6, 1.1]);
    let other = Tensor::vector(&[-0.5, 0.8, 1.4, -1.1, 0.3]);
    let w5 = random(&[5], &mut rng, -1.0, 1.0);
    check(
        &|t, x| {
            let y = t.relu(x)?;
            weighted_sum(t, y, &w5)
        },
        &v,
    );
    check(
        &|t, x| {
            let y = t.softplus(x)?;
            weighted_sum(t, y, &w5)
        },
        &v,
    );
    check(
        &|t, x| {
            let y = t.square(x)?;
            weighted_sum(t, y, &w5)
        },
        &v,
    );
    check(
        &|t, x| {
            let y = t.ln(x)?;
            weighted_sum(t, y, &w5)
        },
        &pos,
    );
    check(
        &|t, x| {
            let y = t.scale(x, -2.5)?;
            weighted_sum(t, y, &w5)
        },
        &v,
    );
    check(
        &|t, x| {
            let y = t.offset(x, 0.7)?;
            t.dot(y, y)
        },
        &v,
    );
    check(
        &|t, x| {
            let o = t.constant(other.clone());
            let y = t.add(x, o)?;
            t.dot(y, y)
        },
        &v,
    );
    check(
        &|t, x| {
            let o = t.constant(other.clone());
            let y = t.sub(o, x)?;
            t.dot(y, y)
        },
        &v,
    );
    check(
        &|t, x| {
            let y = t.mul(x, x)?;
            weighted_sum(t, y, &w5)
        },
        &v,
    );
    check(
        &|t, x| {
            let o = t.constant(other.clone());
            t.dot(x, o)
        },
        &v,
    );
    check(&|t, x| t.sum(x), &v);
    check(&|t, x| t.l1norm(x), &v);
    check(&|t, x| t.l2norm(x), &v);
    check(
        &|t, x| {
            let n = t.l2norm(x)?;
            let y = t.div_scalar(x, n)?;
            weighted_sum(t, y, &w5)
        },
        &v,
    );
    check(
        &|t, x| {
            let n = t.l1norm(x)?;
            let y = t.mul_scalar(x, n)?;
            weighted_sum(t, y, &w5)
        },
        &v,
    );

    let map = random(&[4, 4, 2], &mut rng, -1.0, 1.0);
    let w32 = random(&[32], &mut rng, -1.0, 1.0);
    let w8 = random(&[8], &mut rng, -1.0, 1.0);
    check(
        &|t, x| {
            let y = t.spatial_sum(x)?;
            weighted_sum(t, y, &Tensor::vector(&[0.3, -1.2]))
        },
        &map,
    );
    check(
        &|t, x| {
            let y = t.sum_pool(x, 2)?;
            weighted_sum(t, y, &w8)
        },
        &map,
    );
    check(
        &|t, x| {
            let y = t.reshape(x, &[32])?;
            weighted_sum(t, y, &w32)
        },
        &map,
    );

    let x3 = random(&[3], &mut rng, -1.0, 1.0);
    let w43 = random(&[4, 3], &mut rng, -1.0, 1.0);
    let b4 = random(&[4], &mut rng, -1.0, 1.0);
    let o4 = random(&[4], &mut rng, -1.0, 1.0);
    check(
        &|t, v| {
            let (w, b) = (t.constant(w43.clone()), t.constant(b4.clone()));
            let y = t.dense(v, w, b)?;
            weighted_sum(t, y, &o4)
        },
        &x3,
    );
    check(
        &|t, v| {
            let (x, b) = (t.constant(x3.clone()), t.constant(b4.clone()));
            let y = t.dense(x, v, b)?;
            weighted_sum(t, y, &o4)
        },
        &w43,
    );
    check(
        &|t, v| {
            let (x, w) = (t.constant(x3.clone()), t.constant(w43.clone()));
            let y = t.dense(x, w, v)?;
            weighted_sum(t, y, &o4)
        },
        &b4,
    );

    let img = random(&[5, 5, 2], &mut rng, -1.0, 1.0);
    let k = random(&[3, 3, 2, 3], &mut rng, -1.0, 1.0);
    let kb = random(&[3], &mut rng, -1.0, 1.0);
    for (pad, len) in [(Padding::Valid, 27), (Padding::Same, 75)] {
        let ow = random(&[len], &mut rng, -1.0, 1.0);
        check(
            &|t, v| {
                let (kc, bc) = (t.constant(k.clone()), t.constant(kb.clone()));
                let y = t.conv2d(v, kc, bc, pad)?;
                weighted_sum(t, y, &ow)
            },
            &img,
        );
        check(
            &|t, v| {
                let (xc, bc) = (t.constant(img.clone()), t.constant(kb.clone()));
                let y = t.conv2d(xc, v, bc, pad)?;
                weighted_sum(t, y, &ow)
            },
            &k,
        );
        check(
            &|t, v| {
                let (xc, kc) = (t.constant(img.clone()), t.constant(k.clone()));
                let y = t.conv2d(xc, kc, v, pad)?;
                weighted_sum(t, y, &ow)
            },
            &kb,
        );
    }

    type Net = Box<dyn Fn(&mut Tape, &[Var]) -> AdResult<Var>>;
    let nets: Vec<(Tensor, Vec<Tensor>, Net)> = vec![
        (
            random(&[4], &mut rng, -1.0, 1.0),
            vec![
                random(&[6, 4], &mut rng, -1.0, 1.0),
                random(&[6], &mut rng, -1.0, 1.0),
                random(&[5, 6], &mut rng, -1.0, 1.0),
                random(&[5], &mut rng, -1.0, 1.0),
                random(&[2, 5], &mut rng, -1.0, 1.0),
                random(&[2], &mut rng, -1.0, 1.0),
            ],
            Box::new(|t, p| {
                let h = t.dense(p[0], p[1], p[2])?;
                let h = t.relu(h)?;
                let h = t.dense(h, p[3], p[4])?;
                let h = t.softplus(h)?;
                let o = t.dense(h, p[5], p[6])?;
                t.dot(o, o)
            }),
        ),
        (
            random(&[6, 6, 1], &mut rng, -1.0, 1.0),
            vec![
                random(&[3, 3, 1, 3], &mut rng, -1.0, 1.0),
                random(&[3], &mut rng, -1.0, 1.0),
                random(&[3, 3, 3, 2], &mut rng, -1.0, 1.0),
                random(&[2], &mut rng, -1.0, 1.0),
                random(&[1, 2], &mut rng, -1.0, 1.0),
                random(&[1], &mut rng, -1.0, 1.0),
            ],
            Box::new(|t, p| {
                let h = t.conv2d(p[0], p[1], p[2], Padding::Same)?;
                let h = t.relu(h)?;
                let h = t.conv2d(h, p[3], p[4], Padding::Valid)?;
                let h = t.softplus(h)?;
                let s = t.spatial_sum(h)?;
                let o = t.dense(s, p[5], p[6])?;
                t.sum(o)
            }),
        ),
        (
            random(&[6, 6, 2], &mut rng, -1.0, 1.0),
            vec![
                random(&[3, 3, 2, 2], &mut rng, -1.0, 1.0),
                random(&[2], &mut rng, -1.0, 1.0),
                random(&[4, 8], &mut rng, -1.0, 1.0),
                random(&[4], &mut rng, -1.0, 1.0),
                random(&[3, 4], &mut rng, -1.0, 1.0),
                random(&[3], &mut rng, -1.0, 1.0),
            ],
            Box::new(|t, p| {
                let h = t.conv2d(p[0], p[1], p[2], Padding::Valid)?;
                let h = t.sum_pool(h, 2)?;
                let h = t.flatten(h)?;
                let h = t.dense(h, p[3], p[4])?;
                let h = t.relu(h)?;
                let o = t.dense(h, p[5], p[6])?;
                let n = t.l2norm(o)?;
                let o = t.div_scalar(o, n)?;
                let c = t.constant(Tensor::vector(&[0.2, -0.5, 0.9]));
                let d = t.sub(o, c)?;
                t.dot(d, d)
            }),
        ),
    ];
    for (x, params, net) in &nets {
        let mut all = vec![x.clone()];
        all.extend(params.iter().cloned());
        for target in 0..all.len() {
            let f = |t: &mut Tape, leaf: Var| {
                let vals: Vec<Var> = all
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        if i == target {
                            leaf
                        } else {
                            t.constant(v.clone())
                        }
                    })
                    .collect();
                net(t, &vals)
            };
            check(&f, &all[target]);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < GRAD_TOL && secs < 10.0,
        format!("max rel err {worst:.2e}, {secs:.2}s"),
    )
}

fn schedule_exactness() -> Outcome {
    let mut pass = true;
    for beta in [0.2, 1.0, 10.0, 3.7] {
        pass &= lambda_schedule(1, beta).unwrap() == beta;
        pass &= lambda_schedule(4, beta).unwrap() == beta / 2.0;
        let mut prev = lambda_schedule(1, beta).unwrap();
        for t in 2..100_000 {
            let next = lambda_schedule(t, beta).unwrap();
            pass &= next < prev;
            prev = next;
        }
    }
    outcome(pass, "λ(1)=β, λ(4)=β/2, strictly decreasing to t=1e5")
}

fn prior_loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_l2: f64 = 0.0;
    let mut worst_gibbs: f64 = 0.0;
    let mut worst_at_target: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..10);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..5.0)).collect();
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..5.0)).collect();
        let c = rng.random_range(0.01..100.0);
        let signed: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let scaled: Vec<f64> = signed.iter().map(|v| v * c).collect();
        worst_l2 = worst_l2.max(
            prior_loss_l2(&scaled, &signed)
                .unwrap()
                .unwrap_or(f64::INFINITY),
        );

        let sum: f64 = w.iter().sum();
        let target: Vec<f64> = w.iter().map(|v| v / sum).collect();
        let h = entropy(&target).unwrap();
        let ce = prior_loss_ce(&alpha, &w).unwrap().unwrap();
        worst_gibbs = worst_gibbs.max(h - ce);
        let at = prior_loss_ce(&target, &w).unwrap().unwrap();
        worst_at_target = worst_at_target.max((at - h).abs());
    }
    outcome(
        worst_l2 < 1e-9 && worst_gibbs < 1e-9 && worst_at_target < 1e-9,
        format!("max L2(cw,w) {worst_l2:.1e}, max H-CE {worst_gibbs:.1e}, max |CE(ŵ)-H| {worst_at_target:.1e}"),
    )
}

fn case2_linear_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(2..12);
        let n = rng.random_range(1..8);
        let a = random(&[1, d], &mut rng, -2.0, 2.0);
        let heads: Vec<Tensor> = (0..n)
            .map(|_| random(&[1, d], &mut rng, -2.0, 2.0))
            .collect();
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[d], &mut rng, -1.0, 1.0));
        let zero = tape.constant(Tensor::zeros(&[1]));
        let av = tape.constant(a.clone());
        let target = tape.dense(x, av, zero).unwrap();
        let concepts: Vec<Var> = heads
            .iter()
            .map(|h| {
                let hv = tape.constant(h.clone());
                tape.dense(x, hv, zero).unwrap()
            })
            .collect();
        let w = prior_case2_graph(&tape, x, target, &concepts).unwrap();
        for (wi, h) in w.w.iter().zip(&heads) {
            let dot: f64 = a.data().iter().zip(h.data()).map(|(p, q)| p * q).sum();
            let nn: f64 = h.data().iter().map(|v| v * v).sum();
            worst = worst.max((wi - dot / nn).abs());
        }
    }
    outcome(
        worst < 1e-10,
        format!("max abs err {worst:.1e} over 200 constructions"),
    )
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let a = [1.0, 2.0, 0.5, 1.5];
    let (performer, bank) = common::additive_performer(&a, 0.0, 4);
    let images = common::additive_images(4, 4, 128, 4);
    let labels = common::median_labels(&performer, &images);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = ExplainerModel::new(4, &[], 4, false, InputSource::TopMap, 0, &mut rng);
    let samples = prepare_samples(
        &performer,
        &bank,
        &g,
        &images,
        PriorKind::None,
        SharedFeature::Hidden,
    )
    .unwrap();
    let cfg = DistillConfig {
        prior: PriorKind::None,
        positivity: false,
        epochs: 300,
        batch_size: 16,
        learning_rate: 1e-2,
        optimizer: OptimizerKind::Adam,
        ..DistillConfig::default()
    };
    let state = train(&mut g, &samples, &cfg).unwrap();
    let loss = state.final_distill_loss().unwrap();
    let report = evaluate(&performer, &bank, &g, &images, &labels, EvalSubset::All).unwrap();
    let err = report.contribution_error.mean;
    let dev = report.mean_relative_deviation;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        loss < 1e-4 && err < 1e-2 && dev < 1e-2 && secs < 120.0,
        format!("loss {loss:.1e}, contribution error {err:.1e}, deviation {dev:.1e}, {secs:.1}s"),
    )
}

struct PresetRun {
    result: ExperimentResult,
    secs: f64,
}

fn case1_preset() -> PresetRun {
    let mut config = ExperimentConfig::case1_preset();
    config.sweep = Some(vec![2, 4, 8]);
    let start = Instant::now();
    let result = run_experiment(&config).expect("case1 preset");
    PresetRun {
        result,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn wins(
    run: &PresetRun,
    metric: impl Fn(&concept_explain::metrics::MetricsReport) -> f64,
    ours_better: fn(f64, f64) -> bool,
) -> (usize, usize, Vec<String>) {
    let mut won = 0;
    let mut notes = Vec::new();
    let done: Vec<_> = run.result.completed().collect();
    for r in &done {
        let (b, o) = (metric(&r.baseline.metrics), metric(&r.ours.metrics));
        if ours_better(o, b) {
            won += 1;
        }
        notes.push(format!("{b:.3}/{o:.3}"));
    }
    (won, done.len(), notes)
}

fn bias_reproduction(run: &PresetRun) -> Outcome {
    let (won, total, notes) = wins(run, |m| m.mean_entropy, |o, b| o > b);
    outcome(
        total == 5 && won >= 4 && run.secs < 900.0,
        format!(
            "entropy ours > baseline in {won}/{total} (baseline/ours {}), {:.0}s",
            notes.join(" "),
            run.secs
        ),
    )
}

fn contribution_error_reproduction(run: &PresetRun) -> Outcome {
    let (won, total, notes) = wins(run, |m| m.contribution_error.mean, |o, b| o <= b);
    outcome(
        total == 5 && won >= 4,
        format!(
            "error ours <= baseline in {won}/{total} (baseline/ours {})",
            notes.join(" ")
        ),
    )
}

fn accuracy_preservation(run: &PresetRun) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for r in run.result.completed() {
        let m = &r.ours.metrics;
        worst = worst.max((m.explainer_accuracy - m.performer_accuracy).abs());
        count += 1;
    }
    outcome(
        count > 0 && worst <= 0.05,
        format!(
            "max |explainer - performer| accuracy {:.1} pp over {count} replicates",
            worst * 100.0
        ),
    )
}

fn capacity_sweep(run: &PresetRun) -> Outcome {
    let done: Vec<_> = run.result.completed().collect();
    let means: Vec<(usize, f64)> = [2, 4, 8]
        .iter()
        .map(|&n| {
            let vals: Vec<f64> = done
                .iter()
                .filter_map(|r| r.sweep.iter().find(|p| p.n_concepts == n))
                .map(|p| p.mean_relative_deviation)
                .collect();
            (n, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let pass = !done.is_empty() && means.windows(2).all(|w| w[1].1 <= w[0].1);
    let shown: Vec<String> = means
        .iter()
        .map(|(n, d)| format!("n={n}: {d:.4}"))
        .collect();
    outcome(
        pass,
        format!("mean relative deviation {}", shown.join(", ")),
    )
}

fn determinism() -> Outcome {
    let mut config = ExperimentConfig::case1_preset();
    config.spec = SyntheticSpec {
        train: 96,
        eval: 48,
        seed: 11,
        ..SyntheticSpec::default()
    };
    config.distill.epochs = 5;
    config.replicates = vec![0, 1];
    let dir = tempfile::tempdir().unwrap();
    let mut same_reports = true;
    let dirs = [dir.path().join("a"), dir.path().join("b")];
    for d in &dirs {
        emit_report(&run_experiment(&config).unwrap(), d).unwrap();
    }
    for name in [REPORT_JSON, SUMMARY_CSV, CURVES_CSV, CONTRIBUTIONS_CSV] {
        same_reports &= std::fs::read(dirs[0].join(name)).unwrap()
            == std::fs::read(dirs[1].join(name)).unwrap();
    }

    let dataset = generate_dataset(&config.spec).unwrap();
    let pre = pretrain_performer(&dataset, &PretrainConfig::default(), CaseTag::Case1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let explainer = ExplainerModel::new(8, &[4], 8, true, InputSource::TopMap, 0, &mut rng);
    let ckpt = Checkpoint::new(pre.performer, pre.bank, Some(explainer), 11);
    let path = dir.path().join("model.json");
    save_model(&path, &ckpt).unwrap();
    let back = load_model(&path).unwrap();
    let mut same_probe = back == ckpt;
    for img in dataset.eval.images.iter().take(16) {
        let (a, b) = (
            ckpt.performer.forward(img).unwrap(),
            back.performer.forward(img).unwrap(),
        );
        same_probe &= a.score.to_bits() == b.score.to_bits();
        let (ya, yb) = (
            ckpt.concepts.scores_from(&a).unwrap(),
            back.concepts.scores_from(&b).unwrap(),
        );
        same_probe &= ya
            .data()
            .iter()
            .zip(yb.data())
            .all(|(p, q)| p.to_bits() == q.to_bits());
    }
    outcome(
        same_reports && same_probe,
        format!("reports identical: {same_reports}, checkpoint probe identical: {same_probe}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, o: Outcome| {
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    report("gradient correctness", gradient_correctness());
    report("schedule exactness", schedule_exactness());
    report("prior-loss identities", prior_loss_identities());
    report(
        "shared-feature prior exact on linear networks",
        case2_linear_exactness(),
    );
    report("oracle equivalence", oracle_equivalence());
    let preset = case1_preset();
    report("bias-interpreting reproduction", bias_reproduction(&preset));
    report(
        "contribution-error reproduction",
        contribution_error_reproduction(&preset),
    );
    report("accuracy preservation", accuracy_preservation(&preset));
    report("capacity sweep", capacity_sweep(&preset));
    report("determinism and persistence", determinism());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
