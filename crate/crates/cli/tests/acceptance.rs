//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The exact criteria (1-4, 9-11) fail the test when they fail. The
//! directional training experiments (5-8) only report their outcome.
//!
//! Lines go straight to stderr so they survive libtest's output capture.
//! `SOCVAE_ACCEPTANCE_EPOCHS` overrides the training length for quick runs.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use socvae::diagnostics::{
    agent_ratio_of, agent_ratio_thresholded_of, delta_grid, evaluate_scenes, min_ade_fde, tau_g_from_blocks,
    MeanStd, MetricsRow, Requested,
};
use socvae::entmax::{entmax15, entmax15_bisect, entmax15_vjp, pad_batch, verify_prop2, Prop2Statement, ThresholdScan};
use socvae::graph_nets::{Aggregator, ContextGraph, GampLayer, NodeInfo, NodeKind};
use socvae::map::{roi_graph_search, LaneGraph, LaneSegment, RoiConfig};
use socvae::model::{Model, ModelConfig, PreparedScene, Variant};
use socvae::params::{Bound, ParamStore};
use socvae::seq_encoders::{GruCell, TrackEncoder, TrackScale};
use socvae::tensor::{finite_diff_check, Segments, Tape, Tensor, Var};
use socvae::trainer::{train, BetaSchedule, TrainConfig};
use socvae::world::{generate, FrameMode, ScenarioTemplate, Template};

const HIDDEN: usize = 32;
const EPOCHS: usize = 300;
const TRIALS: usize = 5;
const ABLATION_TRIALS: usize = 3;
const TRAIN_SCENES: usize = 200;
const VAL_SCENES: usize = 50;
const TEST_SCENES: usize = 50;
const K: usize = 6;

struct Outcome {
    id: usize,
    exact: bool,
    pass: bool,
    detail: String,
}

macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stderr(), $($t)*);
    }};
}

fn report(id: usize, exact: bool, pass: bool, detail: String) -> Outcome {
    say!("criterion {id:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, exact, pass, detail }
}

fn epochs() -> usize {
    std::env::var("SOCVAE_ACCEPTANCE_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(EPOCHS)
}

// ---------------------------------------------------------------- exact suites

fn entmax_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_sum) = (0.0_f64, 0.0_f64);
    for _ in 0..10_000 {
        let d = rng.random_range(1..=8);
        let s: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p = entmax15(&s).unwrap();
        let q = entmax15_bisect(&s, 200).unwrap();
        for (a, b) in p.iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        1,
        true,
        worst <= 1e-8 && worst_sum <= 1e-9 && secs < 10.0,
        format!("10000 vectors, max |sort - bisect| {worst:.2e}, max |sum - 1| {worst_sum:.2e}, {secs:.2} s"),
    )
}

fn prop2_suite() -> Outcome {
    let t0 = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (st, seed) in [(Prop2Statement::LowAppend, 11), (Prop2Statement::ThresholdIff, 12)] {
        let r = verify_prop2(st, 1000, 9, seed).unwrap();
        ok &= r.passed() && r.boundary_probes > 0;
        parts.push(format!("{st:?}: {} trials, {} boundary probes, {} violations", r.trials, r.boundary_probes, r.violations));
    }
    let secs = t0.elapsed().as_secs_f64();
    report(2, true, ok && secs < 10.0, format!("{}, {secs:.2} s", parts.join("; ")))
}

fn padding_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..2000)
        .map(|_| (0..rng.random_range(1..=8)).map(|_| rng.random_range(-4.0..4.0)).collect())
        .collect();
    let out = pad_batch(&rows).unwrap().entmax_rows().unwrap();
    let (mut worst, mut pad_ok) = (0.0_f64, true);
    for (row, got) in rows.iter().zip(&out) {
        let q = entmax15(row).unwrap();
        for (a, b) in got.iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
        pad_ok &= got[row.len()..].iter().all(|&v| v == 0.0);
    }
    report(
        3,
        true,
        worst <= 1e-9 && pad_ok,
        format!("2000 ragged rows, max deviation {worst:.2e}, padded slots exactly 0: {pad_ok}"),
    )
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Max relative FD error over the parameters of `store` and the `inputs`,
/// with the output reduced by fixed random weights.
fn component_error<F>(store: &ParamStore, inputs: &[Tensor], step: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Var,
{
    let n = store.numel();
    let mut point = store.flatten();
    for t in inputs {
        point.extend_from_slice(t.data());
    }
    let mut work = store.clone();
    let f = |x: &[f64]| {
        work.unflatten(&x[..n]);
        let mut tape = Tape::new();
        let p = work.bind(&mut tape);
        let mut off = n;
        let leaves: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let v = tape.leaf(Tensor::new(t.shape().to_vec(), x[off..off + t.len()].to_vec()).unwrap());
                off += t.len();
                v
            })
            .collect();
        let out = build(&mut tape, &p, &leaves);
        let shape = tape.shape(out).to_vec();
        let w = tape.constant(random_tensor(shape[0], shape[1], &mut ChaCha8Rng::seed_from_u64(99)));
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        let mut grad: Vec<f64> = work.collect_grads(&g, &p).into_iter().flatten().collect();
        for (&l, t) in leaves.iter().zip(inputs) {
            grad.extend(g.wrt(l).map_or(vec![0.0; t.len()], |d| d.to_vec()));
        }
        (tape.value(loss).item(), grad)
    };
    finite_diff_check(f, &point, step).max_rel_error
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    // entmax backward at support-stable points
    let mut ent = 0.0_f64;
    let mut probes = 0;
    while probes < 200 {
        let d = rng.random_range(2..=8);
        let s: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scan = ThresholdScan::new(&s).unwrap();
        if s.iter().any(|v| (v / 2.0 - scan.threshold).abs() < 1e-2) {
            continue;
        }
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |x: &[f64]| {
            let p = entmax15(x).unwrap();
            (p.iter().zip(&w).map(|(a, b)| a * b).sum(), entmax15_vjp(&p, &w))
        };
        ent = ent.max(finite_diff_check(f, &s, 1e-3).max_rel_error);
        probes += 1;
    }
    let seg = Rc::new(Segments::new(vec![0, 0, 0, 1, 1, 2, 2], 3).unwrap());
    let scores = [random_tensor(7, 1, &mut rng)];
    ent = ent.max(component_error(&ParamStore::new(), &scores, 1e-5, |tape, _, v| {
        tape.segment_entmax(v[0], seg.clone()).unwrap()
    }));

    // cells
    let mut cells = 0.0_f64;
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
    let inputs = [random_tensor(2, 4, &mut rng), random_tensor(2, 3, &mut rng)];
    cells = cells.max(component_error(&store, &inputs, 1e-4, |t, p, v| gru.step(t, p, v[0], v[1]).unwrap()));
    let mut store = ParamStore::new();
    let enc = TrackEncoder::new(&mut store, "track", 4, &mut rng);
    let scale = TrackScale { position: 10.0, step: 1.0 };
    let inputs = [random_tensor(3, 10, &mut rng)];
    cells = cells.max(component_error(&store, &inputs, 1e-4, |t, p, v| enc.encode(t, p, v[0], 5, scale).unwrap()));
    let node = |kind, id| NodeInfo { kind, id, scene: 0 };
    let graph = ContextGraph::build(
        vec![node(NodeKind::Agent, 0), node(NodeKind::Agent, 1), node(NodeKind::Agent, 2), node(NodeKind::Lanelet, 9)],
        vec![0, 1],
    )
    .unwrap();
    for mode in [Aggregator::Entmax, Aggregator::Softmax, Aggregator::Max] {
        let mut store = ParamStore::new();
        let layer = GampLayer::new(&mut store, "gamp", 4, &mut rng);
        let inputs = [random_tensor(4, 4, &mut rng), random_tensor(graph.edges.len(), 5, &mut rng)];
        cells = cells.max(component_error(&store, &inputs, 1e-5, |t, p, v| {
            layer.forward(t, p, &graph, v[0], v[1], mode).unwrap().context
        }));
    }
    let mut tiny = ModelConfig::driving(Variant::SocialCvae);
    tiny.hidden = 4;
    tiny.latent = 2;
    let model = Model::new(tiny, 5).unwrap();
    let inputs = [random_tensor(2, 4, &mut rng), random_tensor(2, 2, &mut rng), random_tensor(2, 2, &mut rng)];
    cells = cells.max(component_error(&model.params, &inputs, 1e-4, |t, p, v| {
        model.decode_vars(t, p, v[0], v[1], v[2]).unwrap()
    }));
    cells = cells.max(component_error(&model.params, &inputs, 1e-4, |t, p, v| {
        model.aux_decode_vars(t, p, v[0], v[1], v[2]).unwrap()
    }));

    // full social-CVAE loss
    let scenes: Vec<PreparedScene> = generate(&ScenarioTemplate::new(Template::Merge), 2, 11)
        .unwrap()
        .iter()
        .map(|s| PreparedScene::new(s).unwrap())
        .collect();
    let batch: Vec<&PreparedScene> = scenes.iter().collect();
    let mut work = model.clone();
    let f = |x: &[f64]| {
        work.params.unflatten(x);
        let (parts, g) = work.loss_and_grads(&batch, 3).unwrap();
        (parts.total, g.into_iter().flatten().collect())
    };
    let full = finite_diff_check(f, &model.params.flatten(), 1e-5).max_rel_error;

    let secs = t0.elapsed().as_secs_f64();
    report(
        4,
        true,
        ent <= 1e-4 && cells <= 1e-5 && full <= 1e-3 && secs < 120.0,
        format!("max rel error: entmax {ent:.1e} (tol 1e-4), cells {cells:.1e} (tol 1e-5), full loss {full:.1e} (tol 1e-3), {secs:.1} s"),
    )
}

fn straight(id: u32, x0: f64, len: f64, y: f64) -> LaneSegment {
    LaneSegment {
        id,
        centerline: vec![[x0, y], [x0 + len, y]],
        left: vec![[x0, y + 2.0], [x0 + len, y + 2.0]],
        right: vec![[x0, y - 2.0], [x0 + len, y - 2.0]],
        left_type: 1.0,
        right_type: 1.0,
        stop_sign: false,
        adjacent: vec![],
        predecessors: vec![],
        successors: vec![],
    }
}

fn roi_trace() -> Outcome {
    // F(4) -> A(10) -> B(20) -> C(30) on y = 0; D(10) -> E(6) beside A
    let mut a = straight(1, 0.0, 10.0, 0.0);
    let mut b = straight(2, 10.0, 20.0, 0.0);
    let mut c = straight(3, 30.0, 30.0, 0.0);
    let mut d = straight(4, 0.0, 10.0, 4.0);
    let mut e = straight(5, 10.0, 6.0, 4.0);
    let mut f = straight(6, -4.0, 4.0, 0.0);
    (a.predecessors, a.successors, a.adjacent) = (vec![6], vec![2], vec![4]);
    (b.predecessors, b.successors) = (vec![1], vec![3]);
    c.predecessors = vec![2];
    (d.adjacent, d.successors) = (vec![1], vec![5]);
    e.predecessors = vec![4];
    f.successors = vec![1];
    let map = LaneGraph::new(vec![a, b, c, d, e, f]).unwrap();
    let got: Vec<(u32, f64)> = roi_graph_search([5.0, 0.0], RoiConfig::new(16.0, 1.0).unwrap(), &map)
        .into_iter()
        .collect();
    let expected = vec![(1, 0.0), (2, 15.0), (4, 0.0), (5, 8.0), (6, 7.0)];

    let mut chain_a = straight(1, 0.0, 10.0, 0.0);
    let mut chain_b = straight(2, 10.0, 20.0, 0.0);
    let mut chain_c = straight(3, 30.0, 30.0, 0.0);
    chain_a.successors = vec![2];
    (chain_b.predecessors, chain_b.successors) = (vec![1], vec![3]);
    chain_c.predecessors = vec![2];
    let chain = LaneGraph::new(vec![chain_a, chain_b, chain_c]).unwrap();
    let chain_got: Vec<(u32, f64)> = roi_graph_search([5.0, 0.0], RoiConfig::new(16.0, 1.0).unwrap(), &chain)
        .into_iter()
        .collect();
    report(
        9,
        true,
        got == expected && chain_got == vec![(1, 0.0), (2, 15.0)],
        format!("six-segment ROI {got:?}, chain ROI {chain_got:?}"),
    )
}

fn metric_definitions() -> Outcome {
    let mut checks = Vec::new();
    let truth = vec![[0.0, 0.0], [0.0, 0.0]];
    let a = vec![[0.0, 0.0], [0.4, 0.0]];
    let b = vec![[1.3, 0.0], [0.3, 0.0]];
    checks.push(("minADE of argmin-FDE sample", min_ade_fde(&[a, b], &truth).unwrap() == (0.8, 0.3)));
    let w = [0.3, 0.0, 0.7, 0.0, 1e-300];
    checks.push(("AR arithmetic", agent_ratio_of(&w) == Some(60.0) && agent_ratio_of(&[]).is_none()));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = delta_grid();
    let monotone = (0..1000).all(|_| {
        let w: Vec<f64> = (0..rng.random_range(1..10))
            .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        let c = agent_ratio_thresholded_of(&w, &grid).unwrap();
        c.windows(2).all(|p| p[1] <= p[0])
    });
    checks.push(("AR_delta monotone", monotone));
    checks.push(("tau_g linear probe = 2", tau_g_from_blocks(&[vec![1.0; 20]], 5) == Some(2.0)));
    let ok = checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|(n, p)| format!("{n}: {}", if *p { "ok" } else { "wrong" }))
        .collect::<Vec<_>>()
        .join(", ");
    report(10, true, ok, detail)
}

fn cli_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_socvae");
    let run = |dir: &Path| {
        let p = |s: &str| dir.join(s).to_str().unwrap().to_string();
        let steps: Vec<Vec<String>> = vec![
            vec!["gen-data", "--template", "merge", "--count", "16", "--seed", "5", "--out", &p("d.jsonl")]
                .into_iter()
                .map(String::from)
                .collect(),
            [
                "train", "--data", &p("d.jsonl"), "--variant", "social-cvae", "--trials", "2", "--epochs", "3",
                "--hidden", "8", "--latent", "4", "--out", &p("runs"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            [
                "evaluate",
                "--data",
                &p("d.jsonl"),
                "--checkpoints",
                &format!("{},{}", p("runs/trial-0/best.ckpt"), p("runs/trial-1/best.ckpt")),
                "--out",
                &p("eval"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            ["diagnose", "--data", &p("d.jsonl"), "--checkpoint", &p("runs/trial-0/final.ckpt"), "--out", &p("diag.tsv")]
                .into_iter()
                .map(String::from)
                .collect(),
        ];
        steps
            .iter()
            .all(|args| Command::new(bin).args(args).output().map(|o| o.status.success()).unwrap_or(false))
    };
    let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ran = run(x.path()) && run(y.path());
    let files = [
        "d.jsonl",
        "runs/trial-0/loss.tsv",
        "runs/trial-1/best.ckpt",
        "eval/metrics.tsv",
        "eval/aggregate.tsv",
        "eval/ar_curve-social-cvae-entmax.tsv",
        "diag.tsv",
    ];
    let same: Vec<bool> = files
        .iter()
        .map(|f| match (std::fs::read(x.path().join(f)), std::fs::read(y.path().join(f))) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        })
        .collect();
    let ok = ran && same.iter().all(|&s| s);
    report(
        11,
        true,
        ok,
        format!(
            "gen-data, train, evaluate, diagnose run twice: {} of {} output files byte-identical",
            same.iter().filter(|&&s| s).count(),
            files.len()
        ),
    )
}

// ------------------------------------------------------- training experiments

struct Data {
    train: Vec<PreparedScene>,
    val: Vec<PreparedScene>,
    test: Vec<PreparedScene>,
}

fn data(template: Template) -> Data {
    let tpl = ScenarioTemplate::new(template);
    let prep = |n, seed| -> Vec<PreparedScene> {
        generate(&tpl, n, seed)
            .unwrap()
            .iter()
            .map(|s| PreparedScene::new(s).unwrap())
            .collect()
    };
    Data {
        train: prep(TRAIN_SCENES, 1),
        val: prep(VAL_SCENES, 100_000),
        test: prep(TEST_SCENES, 200_000),
    }
}

/// Trains `trials` seeded models and evaluates their best-validation
/// checkpoints on the test scenes.
fn trials(
    d: &Data,
    mode: FrameMode,
    variant: Variant,
    aggregator: Aggregator,
    schedule: Option<BetaSchedule>,
    count: usize,
) -> Vec<MetricsRow> {
    let mut cfg = ModelConfig::for_mode(mode, variant);
    cfg.hidden = HIDDEN;
    cfg.aggregator = aggregator;
    let rows: Vec<MetricsRow> = (0..count)
        .into_par_iter()
        .map(|k| {
            let seed = k as u64;
            let model = Model::new(cfg.clone(), seed).unwrap();
            let tc = TrainConfig {
                epochs: epochs(),
                seed,
                beta_schedule: schedule,
                ..TrainConfig::for_mode(mode)
            };
            let out = train(&model, &d.train, &d.val, &tc, |_| {}).unwrap();
            let want = Requested {
                ar: aggregator.has_attention(),
                ..Requested::ALL
            };
            let agents = evaluate_scenes(&out.best, &d.test, &[K], 7, want).unwrap();
            MetricsRow::summarize(k, variant, aggregator, &agents).unwrap()
        })
        .collect();
    for r in &rows {
        say!(
            "    {variant} {aggregator}{} trial {}: AR {} minFDE@{K} {:.3} tau_g {:.4} looADE {:.4}",
            if schedule.is_some() { " cyclical" } else { "" },
            r.trial,
            r.ar.map_or("-".into(), |v| format!("{v:.1}%")),
            r.min_fde(K).unwrap(),
            r.tau_g.unwrap_or(f64::NAN),
            r.loo_ade.unwrap_or(f64::NAN),
        );
    }
    rows
}

fn stat(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> Option<f64>) -> MeanStd {
    let v: Vec<f64> = rows.iter().filter_map(f).collect();
    MeanStd::of(&v).expect("metric present")
}

fn ar(r: &MetricsRow) -> Option<f64> {
    r.ar
}
fn fde(r: &MetricsRow) -> Option<f64> {
    r.min_fde(K)
}
fn tau(r: &MetricsRow) -> Option<f64> {
    r.tau_g
}
fn loo(r: &MetricsRow) -> Option<f64> {
    r.loo_ade
}

fn collapse_reproduction(merge: &Data) -> (Outcome, Vec<MetricsRow>) {
    let t0 = Instant::now();
    let run = |v| trials(merge, FrameMode::Driving, v, Aggregator::Entmax, None, TRIALS);
    let (vae, cvae, social) = (run(Variant::Vae), run(Variant::Cvae), run(Variant::SocialCvae));
    let (a_v, a_c, a_s) = (stat(&vae, ar), stat(&cvae, ar), stat(&social, ar));
    let (f_v, f_s) = (stat(&vae, fde), stat(&social, fde));
    let min_vae_ar = vae.iter().filter_map(ar).fold(f64::INFINITY, f64::min);
    let ar_order = a_s.mean > a_c.mean && a_s.mean > a_v.mean;
    let collapsed_trial = min_vae_ar < 5.0;
    let gain = 1.0 - f_s.mean / f_v.mean;
    let secs = t0.elapsed().as_secs_f64();
    let out = report(
        5,
        false,
        ar_order && collapsed_trial && gain >= 0.10 && secs < 1800.0,
        format!(
            "mean AR vae {:.1}% cvae {:.1}% social {:.1}% (social highest: {ar_order}); min VAE trial AR {min_vae_ar:.1}% (< 5%: {collapsed_trial}); minFDE@6 vae {:.3} social {:.3} ({:.0}% lower, need 10%); {:.0} s",
            a_v.mean,
            a_c.mean,
            a_s.mean,
            f_v.mean,
            f_s.mean,
            100.0 * gain,
            secs
        ),
    );
    (out, social)
}

fn control_condition() -> Outcome {
    let field = data(Template::OpenField);
    let run = |v| trials(&field, FrameMode::Pedestrian, v, Aggregator::Entmax, None, TRIALS);
    let (cvae, social) = (run(Variant::Cvae), run(Variant::SocialCvae));
    let (c, s) = (stat(&cvae, fde), stat(&social, fde));
    let pooled = ((c.std * c.std + s.std * s.std) / 2.0).sqrt();
    let diff = c.mean - s.mean;
    report(
        6,
        false,
        diff.abs() <= pooled,
        format!(
            "open-field minFDE@6 cvae {:.3} ± {:.3}, social {:.3} ± {:.3}; difference {diff:.3}, pooled std {pooled:.3}",
            c.mean, c.std, s.mean, s.std
        ),
    )
}

fn aggregator_ablation(merge: &Data) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for aggregator in [Aggregator::Softmax, Aggregator::Max] {
        let run = |v| trials(merge, FrameMode::Driving, v, aggregator, None, ABLATION_TRIALS);
        let (vae, cvae, social) = (run(Variant::Vae), run(Variant::Cvae), run(Variant::SocialCvae));
        for (name, f) in [("tau_g", tau as fn(&MetricsRow) -> Option<f64>), ("looADE", loo)] {
            let (v, c, s) = (stat(&vae, f).mean, stat(&cvae, f).mean, stat(&social, f).mean);
            let ordered = s > c && c > v;
            ok &= ordered;
            parts.push(format!("{aggregator} {name} social {s:.4} > cvae {c:.4} > vae {v:.4}: {ordered}"));
        }
    }
    report(7, false, ok, parts.join("; "))
}

fn annealing_ablation(merge: &Data, social: &[MetricsRow]) -> Outcome {
    let beta = ModelConfig::driving(Variant::Vae).beta;
    let schedule = BetaSchedule::Cyclical {
        max: beta,
        cycle: socvae::trainer::DEFAULT_CYCLE,
    };
    let cyc = trials(merge, FrameMode::Driving, Variant::Vae, Aggregator::Entmax, Some(schedule), TRIALS);
    let (a_c, a_s) = (stat(&cyc, ar).mean, stat(social, ar).mean);
    let (f_c, f_s) = (stat(&cyc, fde).mean, stat(social, fde).mean);
    let ok = a_c < a_s && f_c >= f_s;
    report(
        8,
        false,
        ok,
        format!("cyclical-beta VAE mean AR {a_c:.1}% vs social {a_s:.1}%; mean minFDE@6 {f_c:.3} vs social {f_s:.3}"),
    )
}

#[test]
fn acceptance() {
    say!("acceptance suite (training: hidden {HIDDEN}, {} epochs)", epochs());
    let mut outcomes = vec![
        entmax_oracle(),
        prop2_suite(),
        padding_equivalence(),
        gradient_integrity(),
    ];
    let merge = data(Template::Merge);
    let (c5, social) = collapse_reproduction(&merge);
    outcomes.push(c5);
    outcomes.push(control_condition());
    outcomes.push(aggregator_ablation(&merge));
    outcomes.push(annealing_ablation(&merge, &social));
    outcomes.push(roi_trace());
    outcomes.push(metric_definitions());
    outcomes.push(cli_determinism());

    outcomes.sort_by_key(|o| o.id);
    say!("\nsummary");
    for o in &outcomes {
        say!(
            "criterion {:>2}: {} ({})",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            if o.exact { "exact" } else { "directional" }
        );
    }
    let broken: Vec<String> = outcomes
        .iter()
        .filter(|o| o.exact && !o.pass)
        .map(|o| format!("{}: {}", o.id, o.detail))
        .collect();
    assert!(broken.is_empty(), "exact criteria failed: {broken:?}");
}
