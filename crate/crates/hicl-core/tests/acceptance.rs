//! Acceptance checks: one test per promise the crate makes, each printing
//! a single PASS/FAIL line (run with `--nocapture` to see them on success).
//!
//! The heavier checks share one trained run of `configs/desk.json`,
//! memoized for the whole test process. Checkpoints and scratch configs go
//! under the target tmpdir, never into the source tree.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use hicl_core::analysis::{jaccard_analysis, prototype_similarity_matrix};
use hicl_core::config::DatasetConfig;
use hicl_core::gradcheck::check_against;
use hicl_core::objectives::{
    compose_full, compose_phase1, cross_entropy, loss_contrastive_phase2, loss_distill, loss_ewc,
    loss_intra, loss_replay, loss_sparsity, Phase1Terms,
};
use hicl_core::rng::{substream, Rng};
use hicl_core::tensor::{backward, concat, layer_norm, log_softmax, softmax, Tensor};
use hicl_core::trainer::{build_stream, run_stream};
use hicl_core::{
    CheckpointData, EncoderConfig, FisherInfo, GatingMode, HiclModel, MetricsReport, Prototype,
    ReplayItem, RunConfig,
};
use rand::Rng as _;

// ── shared plumbing ──────────────────────────────────────────────────

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {n} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance {n} ({name}) failed: {detail}");
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    RunConfig::load(&path).expect("benchmark config parses")
}

struct DeskRun {
    report: MetricsReport,
    dir: PathBuf,
    train_secs: f64,
}

/// Train the benchmark stream once per test process; later tests reuse the
/// report and the checkpoints it wrote.
fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_desk");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).expect("tmpdir is writable");
        let t0 = Instant::now();
        let (report, _) = run_stream(&desk_config(), Some(&dir)).expect("benchmark run completes");
        DeskRun {
            report,
            dir,
            train_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

/// Model state after the last task of the shared run. Restored per test:
/// tensors are not shared across threads.
fn restore_final_model() -> HiclModel {
    let last = desk_config();
    let n_tasks = match last.dataset {
        DatasetConfig::Synthetic { n_tasks, .. } => n_tasks,
        _ => panic!("benchmark config is synthetic"),
    };
    let path = desk_run().dir.join(format!("task_{}.ckpt", n_tasks - 1));
    CheckpointData::load(&path)
        .expect("checkpoint loads")
        .restore()
        .expect("checkpoint restores")
        .model
}

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero so kinked ops (relu, abs) stay locally
/// linear under the finite-difference probe.
fn off_kink(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = 0.05 + rng.gen_range(0.0..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

// ── 1: every backward rule against central differences ───────────────

const FD_STEP: f64 = 1e-5;

/// Random projection of a tensor to a scalar, so full-Jacobian ops reduce
/// to one backward pass.
fn weighted_sum(y: &Tensor, w: &[f64]) -> Tensor {
    let wt = Tensor::from_vec(w.to_vec(), y.shape()).unwrap();
    y.mul(&wt).unwrap().sum().unwrap()
}

fn check_unary<F>(x: &[f64], shape: &[usize], proj: &[f64], op: F) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    let xt = Tensor::param(x.to_vec(), shape).unwrap();
    let s = weighted_sum(&op(&xt), proj);
    backward(&s).unwrap();
    let analytic = xt.grad().unwrap();
    check_against(
        |v| {
            let t = Tensor::from_vec(v.to_vec(), shape).unwrap();
            weighted_sum(&op(&t), proj).item().unwrap()
        },
        x,
        &analytic,
        FD_STEP,
    )
}

/// For ops that already produce a scalar (sum, mean, pick).
fn check_unary_scalar<F>(x: &[f64], shape: &[usize], op: F) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    let xt = Tensor::param(x.to_vec(), shape).unwrap();
    let s = op(&xt);
    backward(&s).unwrap();
    let analytic = xt.grad().unwrap();
    check_against(
        |v| {
            let t = Tensor::from_vec(v.to_vec(), shape).unwrap();
            op(&t).item().unwrap()
        },
        x,
        &analytic,
        FD_STEP,
    )
}

/// Both operands of a binary op checked in one joint probe.
fn check_binary<F>(
    a: &[f64],
    sa: &[usize],
    b: &[f64],
    sb: &[usize],
    proj: &[f64],
    op: F,
) -> f64
where
    F: Fn(&Tensor, &Tensor) -> Tensor,
{
    let at = Tensor::param(a.to_vec(), sa).unwrap();
    let bt = Tensor::param(b.to_vec(), sb).unwrap();
    let s = weighted_sum(&op(&at, &bt), proj);
    backward(&s).unwrap();
    let mut analytic = at.grad().unwrap();
    analytic.extend(bt.grad().unwrap());
    let joint: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    check_against(
        |v| {
            let (va, vb) = v.split_at(a.len());
            let ta = Tensor::from_vec(va.to_vec(), sa).unwrap();
            let tb = Tensor::from_vec(vb.to_vec(), sb).unwrap();
            weighted_sum(&op(&ta, &tb), proj).item().unwrap()
        },
        &joint,
        &analytic,
        FD_STEP,
    )
}

/// One finite-difference pass over every tensor op, inputs drawn per seed.
fn op_suite(seed: u64) -> f64 {
    let mut rng = substream(seed, "fd-ops");
    let n = 6;
    let mut worst: f64 = 0.0;
    let mut track = |e: f64| worst = worst.max(e);

    let any = |rng: &mut Rng| uniform(rng, n, -1.0, 1.0);
    let proj = uniform(&mut rng, n, -1.0, 1.0);

    track(check_binary(&any(&mut rng), &[n], &any(&mut rng), &[n], &proj, |a, b| a.add(b).unwrap()));
    track(check_binary(&any(&mut rng), &[n], &any(&mut rng), &[n], &proj, |a, b| a.sub(b).unwrap()));
    track(check_binary(&any(&mut rng), &[n], &any(&mut rng), &[n], &proj, |a, b| a.mul(b).unwrap()));
    track(check_binary(
        &any(&mut rng),
        &[n],
        &off_kink(&mut rng, n), // denominator away from zero
        &[n],
        &proj,
        |a, b| a.div(b).unwrap(),
    ));
    track(check_unary(&any(&mut rng), &[n], &proj, |t| t.scale(1.7).unwrap()));
    track(check_unary(&any(&mut rng), &[n], &proj, |t| t.add_scalar(0.37).unwrap()));
    track(check_unary(&any(&mut rng), &[n], &proj, |t| t.neg().unwrap()));
    track(check_unary(&off_kink(&mut rng, n), &[n], &proj, |t| t.relu().unwrap()));
    track(check_unary(&uniform(&mut rng, n, -3.0, 3.0), &[n], &proj, |t| t.sin().unwrap()));
    track(check_unary(&any(&mut rng), &[n], &proj, |t| t.exp().unwrap()));
    track(check_unary(&uniform(&mut rng, n, 0.5, 2.0), &[n], &proj, |t| t.ln().unwrap()));
    track(check_unary(&uniform(&mut rng, n, 0.5, 2.0), &[n], &proj, |t| t.sqrt().unwrap()));
    track(check_unary(&uniform(&mut rng, n, -3.0, 3.0), &[n], &proj, |t| t.sigmoid().unwrap()));
    track(check_unary(&any(&mut rng), &[n], &proj, |t| t.square().unwrap()));
    track(check_unary(&off_kink(&mut rng, n), &[n], &proj, |t| t.abs().unwrap()));
    track(check_unary(&any(&mut rng), &[2, 3], &proj, |t| t.flatten().unwrap()));
    track(check_unary_scalar(&any(&mut rng), &[n], |t| t.sum().unwrap()));
    track(check_unary_scalar(&any(&mut rng), &[n], |t| t.mean().unwrap()));
    track(check_unary_scalar(&any(&mut rng), &[n], |t| t.pick(2).unwrap()));

    // matmul, matrix×vector and matrix×matrix
    let proj3 = uniform(&mut rng, 3, -1.0, 1.0);
    track(check_binary(
        &uniform(&mut rng, 12, -1.0, 1.0),
        &[3, 4],
        &uniform(&mut rng, 4, -1.0, 1.0),
        &[4],
        &proj3,
        |a, b| a.matmul(b).unwrap(),
    ));
    track(check_binary(
        &uniform(&mut rng, 12, -1.0, 1.0),
        &[3, 4],
        &uniform(&mut rng, 8, -1.0, 1.0),
        &[4, 2],
        &proj,
        |a, b| a.matmul(b).unwrap(),
    ));

    // top_k: spaced values keep the straight-through mask stable under ±h
    let mut spaced: Vec<f64> = (0..8)
        .map(|i| i as f64 * 0.17 + rng.gen_range(-0.02..0.02))
        .collect();
    for i in (1..spaced.len()).rev() {
        spaced.swap(i, rng.gen_range(0..=i));
    }
    let proj8 = uniform(&mut rng, 8, -1.0, 1.0);
    track(check_unary(&spaced, &[8], &proj8, |t| t.top_k(3).unwrap().0));

    track(check_binary(
        &uniform(&mut rng, 3, -1.0, 1.0),
        &[3],
        &uniform(&mut rng, 4, -1.0, 1.0),
        &[4],
        &uniform(&mut rng, 7, -1.0, 1.0),
        |a, b| concat(&[a, b]).unwrap(),
    ));
    track(check_unary(&any(&mut rng), &[n], &proj, |t| softmax(t, 0.7).unwrap()));
    track(check_unary(&any(&mut rng), &[n], &proj, |t| log_softmax(t).unwrap()));

    // layer_norm over input, gain, and bias jointly
    let x = uniform(&mut rng, n, -1.0, 1.0);
    let g = uniform(&mut rng, n, 0.5, 1.5);
    let b = uniform(&mut rng, n, -0.5, 0.5);
    let joint: Vec<f64> = x.iter().chain(&g).chain(&b).copied().collect();
    let (xt, gt, bt) = (
        Tensor::param(x.clone(), &[n]).unwrap(),
        Tensor::param(g.clone(), &[n]).unwrap(),
        Tensor::param(b.clone(), &[n]).unwrap(),
    );
    let s = weighted_sum(&layer_norm(&xt, &gt, &bt, 1e-5).unwrap(), &proj);
    backward(&s).unwrap();
    let mut analytic = xt.grad().unwrap();
    analytic.extend(gt.grad().unwrap());
    analytic.extend(bt.grad().unwrap());
    track(check_against(
        |v| {
            let tx = Tensor::from_vec(v[..n].to_vec(), &[n]).unwrap();
            let tg = Tensor::from_vec(v[n..2 * n].to_vec(), &[n]).unwrap();
            let tb = Tensor::from_vec(v[2 * n..].to_vec(), &[n]).unwrap();
            weighted_sum(&layer_norm(&tx, &tg, &tb, 1e-5).unwrap(), &proj)
                .item()
                .unwrap()
        },
        &joint,
        &analytic,
        FD_STEP,
    ));

    worst
}

/// Joint finite-difference probe over a list of 1-D inputs feeding one loss.
fn check_loss<F>(inputs: &[Vec<f64>], build: F) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|v| Tensor::param(v.clone(), &[v.len()]).unwrap())
        .collect();
    let loss = build(&params);
    backward(&loss).unwrap();
    let mut analytic = Vec::new();
    for p in &params {
        analytic.extend(p.grad().unwrap_or_else(|| vec![0.0; p.len()]));
    }
    let joint: Vec<f64> = inputs.iter().flatten().copied().collect();
    check_against(
        |v| {
            let mut ts = Vec::with_capacity(inputs.len());
            let mut off = 0;
            for inp in inputs {
                ts.push(Tensor::from_vec(v[off..off + inp.len()].to_vec(), &[inp.len()]).unwrap());
                off += inp.len();
            }
            build(&ts).item().unwrap()
        },
        &joint,
        &analytic,
        FD_STEP,
    )
}

/// One finite-difference pass over every loss term and the composed
/// objectives, inputs drawn per seed.
fn loss_suite(seed: u64) -> f64 {
    let mut rng = substream(seed, "fd-losses");
    let mut worst: f64 = 0.0;
    let mut track = |e: f64| worst = worst.max(e);

    // classification: mean cross-entropy over a 4-sample batch
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    let logits: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, 5, -2.0, 2.0)).collect();
    track(check_loss(&logits, |ts| {
        let mut acc = cross_entropy(&ts[0], labels[0]).unwrap();
        for i in 1..4 {
            acc = acc.add(&cross_entropy(&ts[i], labels[i]).unwrap()).unwrap();
        }
        acc.scale(0.25).unwrap()
    }));

    // within-task pull/push on codes
    let codes: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, 12, -1.0, 1.0)).collect();
    track(check_loss(&codes, |ts| {
        loss_intra(ts, &[0, 0, 1, 1], 1.0, 0.2).unwrap()
    }));

    // feature distillation against fixed snapshots
    let feats: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, 8, -1.0, 1.0)).collect();
    let snaps: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, 8, -1.0, 1.0)).collect();
    track(check_loss(&feats, |ts| {
        let frozen: Vec<Tensor> = snaps
            .iter()
            .map(|v| Tensor::from_vec(v.clone(), &[v.len()]).unwrap())
            .collect();
        loss_distill(ts, &frozen).unwrap()
    }));

    // quadratic anchoring
    let pa = uniform(&mut rng, 4, -1.0, 1.0);
    let pb = uniform(&mut rng, 3, -1.0, 1.0);
    let fisher = vec![
        ("enc.w".to_string(), uniform(&mut rng, 4, 0.0, 1.0)),
        ("head.w".to_string(), uniform(&mut rng, 3, 0.0, 1.0)),
    ];
    let anchor = vec![
        ("enc.w".to_string(), uniform(&mut rng, 4, -1.0, 1.0)),
        ("head.w".to_string(), uniform(&mut rng, 3, -1.0, 1.0)),
    ];
    let info = FisherInfo::new(0, fisher, anchor, uniform(&mut rng, 12, 0.0, 1.0)).unwrap();
    track(check_loss(&[pa, pb], |ts| {
        let named = vec![
            ("enc.w".to_string(), ts[0].clone()),
            ("head.w".to_string(), ts[1].clone()),
        ];
        loss_ewc(&named, std::slice::from_ref(&info)).unwrap()
    }));

    // activation-fraction penalty; inputs near the sigmoid's live region
    let pre: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, 10, -0.05, 0.05)).collect();
    track(check_loss(&pre, |ts| loss_sparsity(ts, 0.05, 0.02).unwrap()));

    // consolidation loss, both cross-term variants
    let ccodes: Vec<Vec<f64>> = (0..3).map(|_| uniform(&mut rng, 12, -1.0, 1.0)).collect();
    let protos: Vec<Prototype> = (0..3)
        .map(|i| Prototype {
            expert_id: i,
            vector: uniform(&mut rng, 12, -1.0, 1.0),
            update_count: 5,
            ema_rate: 0.01,
        })
        .collect();
    for cross in [false, true] {
        track(check_loss(&ccodes, |ts| {
            loss_contrastive_phase2(ts, &protos, 1, 0.3, cross).unwrap()
        }));
    }

    // composition of scalar terms
    let w = desk_config().weights;
    let terms: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.gen_range(0.0..2.0)]).collect();
    track(check_loss(&terms, |ts| {
        compose_phase1(
            &w,
            &Phase1Terms {
                cls: ts[0].clone(),
                intra: ts[1].clone(),
                replay: ts[2].clone(),
                distill: ts[3].clone(),
                ewc: ts[4].clone(),
                sparsity: ts[5].clone(),
            },
        )
        .unwrap()
    }));
    let full_terms: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen_range(0.0..2.0)]).collect();
    track(check_loss(&full_terms, |ts| {
        compose_full(&w, &ts[0], &ts[1], &ts[2], &ts[3]).unwrap()
    }));

    worst
}

/// Replay loss differentiated end to end through a small model: every
/// named parameter probed against central differences.
fn replay_suite(seed: u64) -> f64 {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.n_experts = 2;
    cfg.encoder = EncoderConfig {
        input_dim: 4,
        backbone_widths: vec![],
        grid_units: 2,
        grid_dim: 4,
        dg_dim: 16,
        sparsity_rho: 0.25,
        ca3_widths: (8, 6),
        ca1_widths: vec![6],
        ln_eps: 1e-5,
    };
    let mut model = HiclModel::new(&cfg, 4, 2).unwrap();
    model.assign_task(0, &[0, 1]).unwrap();
    model.assign_task(1, &[2, 3]).unwrap();

    // Central differences only measure a derivative where the top-k active
    // set is locally constant; redraw the batch until every item clears the
    // selection boundary with room for the probe step.
    let k = cfg.encoder.k();
    let mut items = Vec::new();
    for attempt in 0..64u64 {
        let mut rng = hicl_core::rng::substream_indexed(seed, "fd-replay", attempt);
        let candidate: Vec<ReplayItem> = (0..4)
            .map(|i| ReplayItem {
                input: uniform(&mut rng, 4, -0.5, 0.5),
                label: i % 2,
                task_id: i % 2,
                priority: 1.0,
                last_loss: 0.0,
            })
            .collect();
        let min_gap = candidate
            .iter()
            .map(|item| {
                let expert = model.expert_for_task(item.task_id);
                let (code, _) = model.forced_forward(&item.input, expert).unwrap();
                let mut pre = code.pre_topk.to_vec();
                pre.sort_by(|a, b| b.partial_cmp(a).unwrap());
                pre[k - 1] - pre[k]
            })
            .fold(f64::INFINITY, f64::min);
        if min_gap >= 1e-3 {
            items = candidate;
            break;
        }
    }
    assert!(!items.is_empty(), "no batch cleared the selection margin");

    let (loss, _, _) = loss_replay(&model, &items).unwrap();
    backward(&loss).unwrap();

    let mut worst: f64 = 0.0;
    for (_, p) in model.named_parameters() {
        let x = p.to_vec();
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; x.len()]);
        let err = check_against(
            |v| {
                p.set_data(v).unwrap();
                let (l, _, _) = loss_replay(&model, &items).unwrap();
                l.item().unwrap()
            },
            &x,
            &analytic,
            FD_STEP,
        );
        p.set_data(&x).unwrap();
        worst = worst.max(err);
    }
    worst
}

#[test]
fn a1_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let seeds = 24u64;
    let mut worst_op: f64 = 0.0;
    let mut worst_loss: f64 = 0.0;
    for seed in 0..seeds {
        worst_op = worst_op.max(op_suite(seed));
        worst_loss = worst_loss.max(loss_suite(seed)).max(replay_suite(seed));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_op <= 1e-4 && worst_loss <= 1e-3 && secs < 60.0;
    verdict(
        1,
        "gradients match finite differences",
        pass,
        &format!(
            "{seeds} seeds, max op err {worst_op:.2e} (≤1e-4), max loss err {worst_loss:.2e} (≤1e-3), {secs:.1}s (<60s)"
        ),
    );
}

// ── 2: exact code sparsity at scale ───────────────────────────────────

#[test]
fn a2_codes_keep_exact_sparsity() {
    let mut cfg = desk_config();
    cfg.n_experts = 1;
    cfg.encoder.dg_dim = 1024;
    cfg.encoder.sparsity_rho = 0.05;
    let k = cfg.encoder.k();
    assert_eq!(k, 51, "⌊0.05·1024⌋");

    let model = HiclModel::new(&cfg, 2, 2).unwrap();
    let mut rng = substream(0xC0DE, "sparsity-audit");
    let n_forwards = 10_000;
    let mut violations = 0usize;
    for _ in 0..n_forwards {
        let x = uniform(&mut rng, cfg.encoder.input_dim, -0.5, 0.5);
        let f = model.backbone_features(&x).unwrap();
        let code = model.encode_all(&f).unwrap().remove(0);
        let nonzeros = code.values.to_vec().iter().filter(|v| **v != 0.0).count();
        if nonzeros != k || code.active_set.len() != k {
            violations += 1;
        }
    }
    verdict(
        2,
        "codes keep exact sparsity",
        violations == 0,
        &format!("{n_forwards} forwards at 1024 units, every code exactly {k} nonzero ({violations} violations)"),
    );
}

// ── 3: routing on the benchmark stream ────────────────────────────────

#[test]
fn a3_routing_recovers_task_identity() {
    let run = desk_run();
    let pass = run.report.routing_accuracy >= 0.95 && run.train_secs < 600.0;
    verdict(
        3,
        "routing recovers task identity",
        pass,
        &format!(
            "routing {:.3} (≥0.95) after a {:.0}s run (<600s)",
            run.report.routing_accuracy, run.train_secs
        ),
    );
}

// ── 4: code overlap structure and prototype separation ───────────────

#[test]
fn a4_codes_separate_and_prototypes_stay_distinct() {
    let run = desk_run();
    let model = restore_final_model();
    let stream = build_stream(&desk_config()).unwrap();
    let j = jaccard_analysis(&model, &stream, 200, 0).unwrap();
    let gap = j.intra - j.inter;

    let sims = prototype_similarity_matrix(&model);
    let mut max_off = f64::NEG_INFINITY;
    for (i, row) in sims.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            if i != k {
                max_off = max_off.max(v);
            }
        }
    }
    let pass = gap >= 0.1 && max_off <= 0.3;
    // keep the shared run alive in the output for context
    let _ = &run.report;
    verdict(
        4,
        "codes separate, prototypes stay distinct",
        pass,
        &format!(
            "jaccard intra−inter {gap:.3} (≥0.1), prototype max off-diagonal {max_off:.3} (≤0.3)"
        ),
    );
}

// ── 5: the anti-forgetting machinery earns its keep ───────────────────

#[test]
fn a5_full_system_beats_ablation_without_forgetting() {
    let full = &desk_run().report;

    let mut cfg = desk_config();
    cfg.n_experts = 1;
    cfg.weights.alpha_rep = 0.0;
    cfg.weights.alpha_dist = 0.0;
    cfg.weights.alpha_ewc = 0.0;
    let (ablated, _) = run_stream(&cfg, None).expect("ablated run completes");

    let gap = full.mean_task_il - ablated.mean_task_il;
    let worst_forget = full
        .forgetting_per_task
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let pass = gap >= 0.15 && worst_forget <= 0.05;
    verdict(
        5,
        "full system beats ablation without forgetting",
        pass,
        &format!(
            "mean task accuracy {:.3} vs ablated {:.3}, gap {:.3} (≥0.15); worst per-task forgetting {:.3} (≤0.05)",
            full.mean_task_il, ablated.mean_task_il, gap, worst_forget
        ),
    );
}

// ── 6: more replay never hurts ────────────────────────────────────────

#[test]
fn a6_task_accuracy_monotone_in_buffer_size() {
    let mut tils = Vec::new();
    for cap in [20usize, 50] {
        let mut cfg = desk_config();
        cfg.replay.capacity = cap;
        let (report, _) = run_stream(&cfg, None).expect("sweep point completes");
        tils.push(report.mean_task_il);
    }
    let base = desk_config();
    assert_eq!(base.replay.capacity, 100, "benchmark config is the B=100 point");
    tils.push(desk_run().report.mean_task_il);

    let pass = tils[1] >= tils[0] - 0.02 && tils[2] >= tils[1] - 0.02;
    verdict(
        6,
        "task accuracy monotone in buffer size",
        pass,
        &format!(
            "capacity 20/50/100 → {:.3}/{:.3}/{:.3} (non-decreasing within 0.02)",
            tils[0], tils[1], tils[2]
        ),
    );
}

// ── 7: conditional execution is free of approximation ─────────────────

#[test]
fn a7_conditional_matches_dense_and_flops_identity() {
    let model = restore_final_model();
    let mut rng = substream(0xF10, "dense-audit");
    let n_inputs = 1_000;
    let mut mismatches = 0usize;
    for _ in 0..n_inputs {
        let x = uniform(&mut rng, 64, -0.5, 0.5);
        let (cond, _) = model.moe_forward(&x, GatingMode::Hard, true).unwrap();
        let (dense, _) = model.moe_forward(&x, GatingMode::Hard, false).unwrap();
        let same = cond.len() == dense.len()
            && cond
                .iter()
                .zip(&dense)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatches += 1;
        }
    }

    let flops = &desk_run().report.flops;
    let per_expert_tail = flops.ca3_flops + flops.ca1_flops + flops.head_flops;
    let exact = flops.dense_total - flops.conditional_total
        == (flops.n_experts - 1) * per_expert_tail;
    let pass = mismatches == 0 && flops.identity_holds() && exact;
    verdict(
        7,
        "conditional matches dense, flops identity exact",
        pass,
        &format!(
            "{n_inputs} inputs bit-identical ({mismatches} mismatches); dense−conditional = {} = (N−1)·(ca3+ca1+head) = {}",
            flops.dense_total - flops.conditional_total,
            (flops.n_experts - 1) * per_expert_tail
        ),
    );
}

// ── 8: bit-reproducible training through the CLI ──────────────────────

#[test]
fn a8_training_runs_are_bit_reproducible() {
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_repeat");
    let _ = std::fs::remove_dir_all(&base);
    std::fs::create_dir_all(&base).unwrap();

    // a small two-task stream keeps the double run quick
    let mut cfg = desk_config();
    cfg.n_experts = 2;
    cfg.encoder.input_dim = 16;
    cfg.encoder.grid_units = 2;
    cfg.encoder.grid_dim = 8;
    cfg.encoder.dg_dim = 64;
    cfg.encoder.ca3_widths = (32, 16);
    cfg.encoder.ca1_widths = vec![16];
    cfg.schedule.epochs_phase1 = 3;
    cfg.schedule.epochs_phase2 = 1;
    cfg.schedule.batch_size = 8;
    cfg.schedule.replay_batch_size = 8;
    cfg.replay.capacity = 20;
    cfg.dataset = DatasetConfig::Synthetic {
        n_tasks: 2,
        classes_per_task: 2,
        dim: 16,
        separation: 10.0,
        train_per_class: 30,
        eval_per_class: 15,
    };
    let cfg_path = base.join("repeat.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let mut stdouts = Vec::new();
    for leg in ["a", "b"] {
        let out = Command::new(env!("CARGO_BIN_EXE_hicl"))
            .arg("train")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(base.join(leg))
            .output()
            .expect("train subprocess spawns");
        assert!(
            out.status.success(),
            "train leg {leg} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        stdouts.push(out.stdout);
    }

    let files = [
        "metrics.jsonl",
        "report.json",
        "report.csv",
        "report_detail.csv",
        "task_0.ckpt",
        "task_1.ckpt",
    ];
    let mut differing = Vec::new();
    for f in files {
        let a = std::fs::read(base.join("a").join(f)).unwrap_or_default();
        let b = std::fs::read(base.join("b").join(f)).unwrap_or_default();
        if a.is_empty() || a != b {
            differing.push(f);
        }
    }
    let stdout_same = stdouts[0] == stdouts[1];
    let pass = differing.is_empty() && stdout_same;
    verdict(
        8,
        "training runs are bit-reproducible",
        pass,
        &format!(
            "two CLI runs: {} output files byte-identical{}",
            files.len(),
            if pass {
                String::new()
            } else {
                format!(" except {differing:?} (stdout match: {stdout_same})")
            }
        ),
    );
}
