use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use socvae::graph_nets::{Aggregator, ContextGraph, GampLayer, NodeInfo, NodeKind};
use socvae::model::{kl_diag, Model, ModelConfig, PreparedScene, Variant};
use socvae::params::{Bound, ParamStore};
use socvae::seq_encoders::{lanelet_inputs, Boundary, GruCell, LaneletEncoder, TrackEncoder, TrackScale};
use socvae::tensor::{finite_diff_check, GradCheckReport, Tape, Tensor, Var};
use socvae::world::{generate, ScenarioTemplate, Template};

const CELL_TOL: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-3;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `v` to a scalar with fixed pseudo-random weights.
fn project(tape: &mut Tape, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = random(shape[0], shape[1], &mut rng);
    let c = tape.constant(w);
    let prod = tape.mul(v, c).unwrap();
    tape.sum(prod)
}

/// Checks gradients with respect to every parameter of `store` and every
/// tensor in `inputs`. `build` maps bound parameters and input leaves to an
/// output that is projected to a scalar.
fn check<F>(store: &ParamStore, inputs: &[Tensor], step: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Var,
{
    let n_params = store.numel();
    let mut point = store.flatten();
    for t in inputs {
        point.extend_from_slice(t.data());
    }
    let mut work = store.clone();
    let f = |x: &[f64]| {
        work.unflatten(&x[..n_params]);
        let mut tape = Tape::new();
        let p = work.bind(&mut tape);
        let mut off = n_params;
        let leaves: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let data = x[off..off + t.len()].to_vec();
                off += t.len();
                tape.leaf(Tensor::new(t.shape().to_vec(), data).unwrap())
            })
            .collect();
        let out = build(&mut tape, &p, &leaves);
        let loss = project(&mut tape, out);
        let g = tape.backward(loss).unwrap();
        let mut grad: Vec<f64> = work.collect_grads(&g, &p).into_iter().flatten().collect();
        for (&l, t) in leaves.iter().zip(inputs) {
            match g.wrt(l) {
                Some(d) => grad.extend_from_slice(d),
                None => grad.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        (tape.value(loss).item(), grad)
    };
    let r = finite_diff_check(f, &point, step);
    assert!(r.checked > 0, "nothing checked");
    r
}

#[test]
fn gru_cell_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
    let inputs = [random(2, 4, &mut rng), random(2, 3, &mut rng)];
    let r = check(&store, &inputs, 1e-4, |tape, p, v| cell.step(tape, p, v[0], v[1]).unwrap());
    assert!(r.max_rel_error <= CELL_TOL, "{r:?}");
}

#[test]
fn track_encoder_over_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let enc = TrackEncoder::new(&mut store, "track", 4, &mut rng);
    let scale = TrackScale { position: 10.0, step: 1.0 };
    let inputs = [random(3, 10, &mut rng)];
    let r = check(&store, &inputs, 1e-4, |tape, p, v| enc.encode(tape, p, v[0], 5, scale).unwrap());
    assert!(r.max_rel_error <= CELL_TOL, "{r:?}");
}

#[test]
fn lanelet_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let enc = LaneletEncoder::new(&mut store, "lane", 4, &mut rng);
    let boundary = |rng: &mut ChaCha8Rng| -> Boundary {
        (0..4)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 1.0, 0.0])
            .collect()
    };
    let (l1, r1, l2, r2) = (boundary(&mut rng), boundary(&mut rng), boundary(&mut rng), boundary(&mut rng));
    let (x, b) = lanelet_inputs(&[(&l1, &r1), (&l2, &r2)], 10.0).unwrap();
    let r = check(&store, &[x], 1e-4, |tape, p, v| enc.encode(tape, p, v[0], 2, b).unwrap());
    assert!(r.max_rel_error <= CELL_TOL, "{r:?}");
}

fn small_graph() -> ContextGraph {
    let node = |kind, id| NodeInfo { kind, id, scene: 0 };
    let nodes = vec![
        node(NodeKind::Agent, 0),
        node(NodeKind::Agent, 1),
        node(NodeKind::Agent, 2),
        node(NodeKind::Lanelet, 10),
        node(NodeKind::Lanelet, 11),
    ];
    ContextGraph::build(nodes, vec![0, 1]).unwrap()
}

#[test]
fn gamp_layer_all_aggregators() {
    let graph = small_graph();
    for mode in [Aggregator::Entmax, Aggregator::Softmax, Aggregator::Max] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let layer = GampLayer::new(&mut store, "gamp", 4, &mut rng);
        let inputs = [random(5, 4, &mut rng), random(graph.edges.len(), 5, &mut rng)];
        let r = check(&store, &inputs, 1e-5, |tape, p, v| {
            layer.forward(tape, p, &graph, v[0], v[1], mode).unwrap().context
        });
        assert!(r.max_rel_error <= CELL_TOL, "{mode:?}: {r:?}");
    }
}

fn tiny(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::driving(variant);
    cfg.hidden = 4;
    cfg.latent = 2;
    cfg
}

#[test]
fn decoder_rollout() {
    let model = Model::new(tiny(Variant::SocialCvae), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(2, 4, &mut rng), random(2, 2, &mut rng), random(2, 2, &mut rng)];
    let r = check(&model.params, &inputs, 1e-4, |tape, p, v| {
        model.decode_vars(tape, p, v[0], v[1], v[2]).unwrap()
    });
    assert!(r.max_rel_error <= CELL_TOL, "{r:?}");
    let r = check(&model.params, &inputs, 1e-4, |tape, p, v| {
        model.aux_decode_vars(tape, p, v[0], v[1], v[2]).unwrap()
    });
    assert!(r.max_rel_error <= CELL_TOL, "{r:?}");
}

#[test]
fn gaussian_heads_and_kl() {
    let model = Model::new(tiny(Variant::Cvae), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random(3, 4, &mut rng), random(3, 60, &mut rng)];
    let r = check(&model.params, &inputs, 1e-4, |tape, p, v| {
        let (mq, lq) = model.posterior_vars(tape, p, v[0], v[1]).unwrap();
        let (mp, lp) = model.prior_vars(tape, p, v[0]).unwrap();
        kl_diag(tape, mq, lq, mp, lp).unwrap()
    });
    assert!(r.max_rel_error <= CELL_TOL, "{r:?}");
}

fn scenes() -> Vec<PreparedScene> {
    generate(&ScenarioTemplate::new(Template::Merge), 2, 11)
        .unwrap()
        .iter()
        .map(|s| PreparedScene::new(s).unwrap())
        .collect()
}

#[test]
fn full_loss_every_variant() {
    let prepared = scenes();
    let batch: Vec<&PreparedScene> = prepared.iter().collect();
    for variant in [Variant::Vae, Variant::Cvae, Variant::SocialCvae] {
        let model = Model::new(tiny(variant), 7).unwrap();
        let mut work = model.clone();
        let f = |x: &[f64]| {
            work.params.unflatten(x);
            let (parts, grads) = work.loss_and_grads(&batch, 3).unwrap();
            (parts.total, grads.into_iter().flatten().collect())
        };
        let r = finite_diff_check(f, &model.params.flatten(), 1e-5);
        assert!(r.checked > 100, "{r:?}");
        assert!(r.max_rel_error <= LOSS_TOL, "{variant}: {r:?}");
    }
}

#[test]
fn full_loss_wrt_histories() {
    let prepared = scenes();
    let batch: Vec<&PreparedScene> = prepared.iter().collect();
    let model = Model::new(tiny(Variant::SocialCvae), 8).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let vars = model.loss_vars(&mut tape, &p, &batch, 4).unwrap();
    let h = tape.value(vars.context.history).clone();

    let f = |x: &[f64]| {
        let mut shifted = prepared.clone();
        let mut off = 0;
        for ps in &mut shifted {
            for a in &mut ps.scene.agents {
                for pt in &mut a.history {
                    *pt = [x[off], x[off + 1]];
                    off += 2;
                }
            }
        }
        let b: Vec<&PreparedScene> = shifted.iter().collect();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let v = model.loss_vars(&mut tape, &p, &b, 4).unwrap();
        let kl = tape.scale(v.kl, model.config.beta);
        let t = tape.add(v.recon, kl).unwrap();
        let aux = tape.scale(v.aux.unwrap(), model.config.alpha);
        let total = tape.add(t, aux).unwrap();
        let g = tape.backward(total).unwrap();
        (tape.value(total).item(), g.wrt(v.context.history).unwrap().to_vec())
    };
    let r = finite_diff_check(f, h.data(), 1e-5);
    assert!(r.max_rel_error <= LOSS_TOL, "{r:?}");
}
