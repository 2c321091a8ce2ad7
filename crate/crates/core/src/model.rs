//! The three latent-variable model variants and their shared building blocks.
//!
//! Parameter names are grouped by prefix: `context.` (history and lanelet
//! encoders, message passing), `posterior.` (future encoder and posterior
//! head), `decoder.`, `prior.` (conditional prior, CVAE variants only) and
//! `aux.` (auxiliary decoder, social-CVAE only).
//!
//! # Model checkpoint
//!
//! ```text
//! socvae-model 1
//! config {"variant":"social-cvae","aggregator":"entmax",...}
//! <parameter records, see the params module>
//! ```

use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_nets::{Aggregator, AttentionReport, ContextGraph, GampLayer, GampOutput, NodeInfo, NodeKind};
use crate::map::{resample, Point};
use crate::nn::{Linear, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::seq_encoders::{lanelet_inputs, Boundary, GruCell, LaneletEncoder, TrackEncoder, TrackScale, BOUNDARY_POINTS};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::world::{FrameMode, Scene};

pub const MODEL_MAGIC: &str = "socvae-model 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vae,
    Cvae,
    SocialCvae,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vae => "vae",
            Variant::Cvae => "cvae",
            Variant::SocialCvae => "social-cvae",
        }
    }

    pub fn has_prior(self) -> bool {
        self != Variant::Vae
    }

    pub fn has_aux(self) -> bool {
        self == Variant::SocialCvae
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Variant::Vae),
            "cvae" => Ok(Variant::Cvae),
            "social-cvae" => Ok(Variant::SocialCvae),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant `{other}` (expected vae, cvae or social-cvae)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub aggregator: Aggregator,
    pub hidden: usize,
    pub latent: usize,
    pub beta: f64,
    pub alpha: f64,
    /// Fixed variance of the Gaussian trajectory likelihood.
    pub output_variance: f64,
    /// Divisor for absolute coordinates entering the network (m).
    pub position_scale: f64,
    /// Divisor for per-step displacements entering or leaving the network (m).
    pub step_scale: f64,
    pub history: usize,
    pub future: usize,
}

impl ModelConfig {
    /// Vehicle settings: latent 16, β 0.03, α 0.3 for the social-CVAE.
    pub fn driving(variant: Variant) -> Self {
        ModelConfig {
            variant,
            aggregator: Aggregator::Entmax,
            hidden: 64,
            latent: 16,
            beta: 0.03,
            alpha: if variant.has_aux() { 0.3 } else { 0.0 },
            output_variance: 1.0,
            position_scale: 10.0,
            step_scale: 1.0,
            history: 10,
            future: 30,
        }
    }

    /// Pedestrian settings: latent 32, β 0.01, α 0.2 for the social-CVAE.
    pub fn pedestrian(variant: Variant) -> Self {
        ModelConfig {
            variant,
            aggregator: Aggregator::Entmax,
            hidden: 64,
            latent: 32,
            beta: 0.01,
            alpha: if variant.has_aux() { 0.2 } else { 0.0 },
            output_variance: 1.0,
            position_scale: 5.0,
            step_scale: 0.5,
            history: 8,
            future: 12,
        }
    }

    pub fn for_mode(mode: FrameMode, variant: Variant) -> Self {
        match mode {
            FrameMode::Driving => ModelConfig::driving(variant),
            FrameMode::Pedestrian => ModelConfig::pedestrian(variant),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.alpha < 0.0 || (self.alpha > 0.0 && !self.variant.has_aux()) {
            return bad(format!("alpha {} not allowed for {}", self.alpha, self.variant));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.hidden == 0 || self.latent == 0 {
            return bad("hidden and latent sizes must be positive".into());
        }
        if self.history < 2 || self.future == 0 {
            return bad(format!("need history ≥ 2 and future ≥ 1, got {}/{}", self.history, self.future));
        }
        if !(self.output_variance > 0.0 && self.position_scale > 0.0 && self.step_scale > 0.0) {
            return bad("variance and scales must be positive".into());
        }
        Ok(())
    }

    fn track_scale(&self) -> TrackScale {
        TrackScale {
            position: self.position_scale,
            step: self.step_scale,
        }
    }
}

/// Diagonal Gaussian given by mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    /// `KL(self ‖ other)` in closed form.
    pub fn kl(&self, other: &DiagGaussian) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(other.mean.iter().zip(&other.log_var))
            .map(|((mq, lq), (mp, lp))| 0.5 * (lp - lq + (lq.exp() + (mq - mp).powi(2)) / lp.exp() - 1.0))
            .sum()
    }

    /// `mean + exp(log_var / 2) ⊙ eps`.
    pub fn sample(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect()
    }
}

/// Elementwise KL between diagonal Gaussians given as tape variables.
pub fn kl_diag(tape: &mut Tape, mq: Var, lq: Var, mp: Var, lp: Var) -> Result<Var> {
    let d = tape.sub(mq, mp)?;
    let d2 = tape.square(d);
    let vq = tape.exp(lq);
    let num = tape.add(vq, d2)?;
    let neg_lp = tape.scale(lp, -1.0);
    let inv_vp = tape.exp(neg_lp);
    let ratio = tape.mul(num, inv_vp)?;
    let log_ratio = tape.sub(lp, lq)?;
    let s = tape.add(log_ratio, ratio)?;
    let s = tape.add_const(s, -1.0);
    Ok(tape.scale(s, 0.5))
}

/// GRU decoder rolled out autonomously from `(T, z)`: the initial state and
/// the constant per-step input are both functions of `[T, z]`; each step emits
/// a displacement.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub init: Linear,
    pub gru: GruCell,
    pub out: Linear,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, hidden: usize, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        Decoder {
            init: Linear::new(store, &format!("{name}.init"), hidden + latent, hidden, rng),
            gru: GruCell::new(store, &format!("{name}.gru"), hidden + latent, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, 2, rng),
        }
    }

    /// `[R, 2·steps]` positions (m) starting from `last` (`[R, 2]`, m).
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        t: Var,
        z: Var,
        last: Var,
        steps: usize,
        step_scale: f64,
    ) -> Result<Var> {
        if steps == 0 {
            return Err(Error::InvalidArgument("decoding horizon must be positive".into()));
        }
        let tz = tape.concat_cols(&[t, z])?;
        let h0 = self.init.forward(tape, p, tz)?;
        let mut h = tape.tanh(h0);
        let gx = self.gru.project_input(tape, p, tz)?;
        let mut pos = last;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            h = self.gru.step_projected(tape, p, h, gx)?;
            let d = self.out.forward(tape, p, h)?;
            let d = tape.scale(d, step_scale);
            pos = tape.add(pos, d)?;
            out.push(pos);
        }
        tape.concat_cols(&out)
    }
}

/// MLP followed by a linear map to `[mean | log-variance]`.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mlp: Mlp,
    pub out: Linear,
}

impl GaussianHead {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        GaussianHead {
            mlp: Mlp::new(store, &format!("{name}.mlp"), input, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, 2 * latent, rng),
        }
    }

    /// `(mean, log_var)`, each `[R, latent]`.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, latent: usize) -> Result<(Var, Var)> {
        let h = self.mlp.forward(tape, p, x)?;
        let o = self.out.forward(tape, p, h)?;
        Ok((tape.slice_cols(o, 0, latent)?, tape.slice_cols(o, latent, 2 * latent)?))
    }
}

/// Parameter groups of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Context,
    Posterior,
    Decoder,
    Prior,
    Aux,
}

impl Group {
    pub fn prefix(self) -> &'static str {
        match self {
            Group::Context => "context.",
            Group::Posterior => "posterior.",
            Group::Decoder => "decoder.",
            Group::Prior => "prior.",
            Group::Aux => "aux.",
        }
    }
}

#[derive(Debug, Clone)]
struct Parts {
    track: TrackEncoder,
    lanelet: LaneletEncoder,
    gamp: GampLayer,
    future: TrackEncoder,
    posterior: GaussianHead,
    decoder: Decoder,
    prior: Option<GaussianHead>,
    aux: Option<Decoder>,
}

/// A scene in its normalized frame with lanelet inputs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: Scene,
    lanelets: Vec<(Boundary, Boundary)>,
    lane_pose: Vec<(Point, f64)>,
}

fn boundary(points: &[Point], flag: f64, stop: bool) -> Boundary {
    resample(points, BOUNDARY_POINTS)
        .into_iter()
        .map(|p| [p[0], p[1], flag, if stop { 1.0 } else { 0.0 }])
        .collect()
}

impl PreparedScene {
    /// Normalizes `scene` around its target and resamples lane boundaries.
    pub fn new(scene: &Scene) -> Result<Self> {
        scene.validate()?;
        PreparedScene::from_normalized(scene.normalize(scene.target)?)
    }

    /// Wraps a scene that is already in its normalized frame.
    pub fn from_normalized(scene: Scene) -> Result<Self> {
        let mut lanelets = Vec::with_capacity(scene.lanes.len());
        let mut lane_pose = Vec::with_capacity(scene.lanes.len());
        for l in &scene.lanes {
            let left = boundary(&l.left, l.left_type, l.stop_sign);
            let right = boundary(&l.right, l.right_type, l.stop_sign);
            let c = resample(&l.centerline, BOUNDARY_POINTS);
            let n = c.len() as f64;
            let centroid = [c.iter().map(|p| p[0]).sum::<f64>() / n, c.iter().map(|p| p[1]).sum::<f64>() / n];
            let (a, b) = (c[0], c[c.len() - 1]);
            lane_pose.push((centroid, (b[1] - a[1]).atan2(b[0] - a[0])));
            lanelets.push((left, right));
        }
        Ok(PreparedScene {
            scene,
            lanelets,
            lane_pose,
        })
    }

    /// The same scene with agent `index` removed, keeping lanes and frame.
    /// Removing a pedestrian target hands the role to the first remaining agent.
    pub fn without_agent(&self, index: usize) -> Result<Self> {
        let mut scene = self.scene.clone();
        if index >= scene.agents.len() || scene.agents.len() < 2 {
            return Err(Error::InvalidArgument(format!("cannot remove agent {index}")));
        }
        let removed = scene.agents.remove(index);
        if removed.id == scene.target {
            if scene.mode == FrameMode::Driving {
                return Err(Error::InvalidArgument("cannot remove the target vehicle".into()));
            }
            scene.target = scene.agents[0].id;
        }
        Ok(PreparedScene {
            scene,
            lanelets: self.lanelets.clone(),
            lane_pose: self.lane_pose.clone(),
        })
    }
}

/// Context encoding of a batch of scenes recorded on a tape.
pub struct Context {
    /// `[agents, 2·T_h]` histories (m), a differentiable leaf.
    pub history: Var,
    /// `[receivers, hidden]`.
    pub t: Var,
    pub graph: ContextGraph,
    pub gamp: GampOutput,
    /// `(scene, agent)` of each receiver row.
    pub receivers: Vec<(usize, usize)>,
    /// Global agent row of each receiver.
    pub receiver_rows: Vec<usize>,
    /// First global agent row of each scene.
    pub agent_offset: Vec<usize>,
}

/// Loss components recorded on a tape.
pub struct LossVars {
    pub recon: Var,
    pub kl: Var,
    pub aux: Option<Var>,
    pub context: Context,
}

/// Loss value and its components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub aux: f64,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    parts: Parts,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

impl Model {
    /// Fresh parameters drawn from `seed`. Groups are created in the order
    /// context, posterior, decoder, prior, aux, so variants sharing a seed
    /// share the initial values of their common groups.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (h, l) = (config.hidden, config.latent);
        let parts = Parts {
            track: TrackEncoder::new(&mut store, "context.track", h, &mut rng),
            lanelet: LaneletEncoder::new(&mut store, "context.lanelet", h, &mut rng),
            gamp: GampLayer::new(&mut store, "context.gamp", h, &mut rng),
            future: TrackEncoder::new(&mut store, "posterior.future", h, &mut rng),
            posterior: GaussianHead::new(&mut store, "posterior", 2 * h, h, l, &mut rng),
            decoder: Decoder::new(&mut store, "decoder", h, l, &mut rng),
            prior: config
                .variant
                .has_prior()
                .then(|| GaussianHead::new(&mut store, "prior", h, h, l, &mut rng)),
            aux: config
                .variant
                .has_aux()
                .then(|| Decoder::new(&mut store, "aux", h, l, &mut rng)),
        };
        Ok(Model {
            config,
            params: store,
            parts,
        })
    }

    pub fn group(&self, g: Group) -> Vec<ParamId> {
        self.params.ids_with_prefix(g.prefix()).collect()
    }

    /// Parameter ids of the message function and attention score (the path
    /// by which other agents' histories reach a receiver).
    pub fn edge_params(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix("context.gamp.").collect()
    }

    fn check_scene(&self, s: &Scene) -> Result<()> {
        if s.history_len() != self.config.history || s.future_len() != self.config.future {
            return Err(Error::InvalidArgument(format!(
                "scene {} has horizons {}/{}, model expects {}/{}",
                s.id,
                s.history_len(),
                s.future_len(),
                self.config.history,
                self.config.future
            )));
        }
        Ok(())
    }

    /// Encodes histories and lanelets of all scenes and runs one round of
    /// message passing into every predicted agent.
    pub fn encode_context(&self, tape: &mut Tape, p: &Bound, scenes: &[&PreparedScene]) -> Result<Context> {
        let cfg = &self.config;
        let th = cfg.history;
        let mut hist = Vec::new();
        let mut nodes = Vec::new();
        let mut agent_offset = Vec::with_capacity(scenes.len());
        let mut receivers = Vec::new();
        let mut receiver_rows = Vec::new();
        for (si, ps) in scenes.iter().enumerate() {
            self.check_scene(&ps.scene)?;
            agent_offset.push(nodes.len());
            for a in &ps.scene.agents {
                hist.extend(a.history.iter().flatten().copied());
                nodes.push(NodeInfo {
                    kind: NodeKind::Agent,
                    id: a.id,
                    scene: ps.scene.id,
                });
            }
            for ai in ps.scene.predicted()? {
                receivers.push((si, ai));
                receiver_rows.push(agent_offset[si] + ai);
            }
        }
        let n_agents = nodes.len();
        let history = tape.leaf(Tensor::matrix(n_agents, 2 * th, hist)?);
        let agent_h = self.parts.track.encode(tape, p, history, th, cfg.track_scale())?;

        let mut lane_refs = Vec::new();
        let mut lane_pos = Vec::new();
        let mut lane_head = Vec::new();
        for ps in scenes {
            for (((l, r), (c, h)), lane) in ps.lanelets.iter().zip(&ps.lane_pose).zip(&ps.scene.lanes) {
                lane_refs.push((l, r));
                lane_pos.extend_from_slice(c);
                lane_head.push(*h);
                nodes.push(NodeInfo {
                    kind: NodeKind::Lanelet,
                    id: lane.id,
                    scene: ps.scene.id,
                });
            }
        }
        let n_lanes = lane_refs.len();
        let h = if n_lanes > 0 {
            let (inputs, b) = lanelet_inputs(&lane_refs, cfg.position_scale)?;
            let x = tape.constant(inputs);
            let lane_h = self.parts.lanelet.encode(tape, p, x, n_lanes, b)?;
            tape.concat_rows(&[agent_h, lane_h])?
        } else {
            agent_h
        };

        let graph = ContextGraph::build(nodes, receivers.iter().zip(&receiver_rows).map(|(_, &r)| r).collect())?;

        // node poses: agents from the differentiable history, lanelets constant
        let last = tape.slice_cols(history, 2 * th - 2, 2 * th)?;
        let prev = tape.slice_cols(history, 2 * th - 4, 2 * th - 2)?;
        let vel = tape.sub(last, prev)?;
        let vx = tape.slice_cols(vel, 0, 1)?;
        let vy = tape.slice_cols(vel, 1, 2)?;
        let agent_head = tape.atan2(vy, vx)?;
        let (pos, head) = if n_lanes > 0 {
            let lp = tape.constant(Tensor::matrix(n_lanes, 2, lane_pos)?);
            let lh = tape.constant(Tensor::matrix(n_lanes, 1, lane_head)?);
            (tape.concat_rows(&[last, lp])?, tape.concat_rows(&[agent_head, lh])?)
        } else {
            (last, agent_head)
        };
        let src = Rc::new(graph.sources());
        let dst = Rc::new(graph.targets());
        let ps_ = tape.gather_rows(pos, src.clone())?;
        let pd = tape.gather_rows(pos, dst.clone())?;
        let hs = tape.gather_rows(head, src)?;
        let hd = tape.gather_rows(head, dst)?;
        let d = tape.sub(ps_, pd)?;
        let dx = tape.slice_cols(d, 0, 1)?;
        let dy = tape.slice_cols(d, 1, 2)?;
        let c = tape.cos(hd);
        let s = tape.sin(hd);
        let cx = tape.mul(c, dx)?;
        let sy = tape.mul(s, dy)?;
        let rx = tape.add(cx, sy)?;
        let cy = tape.mul(c, dy)?;
        let sx = tape.mul(s, dx)?;
        let ry = tape.sub(cy, sx)?;
        let rel = tape.concat_cols(&[rx, ry])?;
        let rel = tape.scale(rel, 1.0 / cfg.position_scale);
        let dh = tape.sub(hs, hd)?;
        let rh = tape.wrap_angle(dh);
        let kinds: Vec<f64> = graph
            .edges
            .iter()
            .flat_map(|e| match graph.nodes[e.source].kind {
                NodeKind::Agent => [1.0, 0.0],
                NodeKind::Lanelet => [0.0, 1.0],
            })
            .collect();
        let kind = tape.constant(Tensor::matrix(graph.edges.len(), 2, kinds)?);
        let u = tape.concat_cols(&[rel, rh, kind])?;

        let gamp = self.parts.gamp.forward(tape, p, &graph, h, u, cfg.aggregator)?;
        Ok(Context {
            history,
            t: gamp.context,
            graph,
            gamp,
            receivers,
            receiver_rows,
            agent_offset,
        })
    }

    /// Last observed positions of the receivers, `[R, 2]`.
    fn receiver_last(&self, tape: &mut Tape, ctx: &Context) -> Result<Var> {
        let th = self.config.history;
        let rows = tape.gather_rows(ctx.history, Rc::new(ctx.receiver_rows.clone()))?;
        tape.slice_cols(rows, 2 * th - 2, 2 * th)
    }

    fn futures(&self, scenes: &[&PreparedScene], ctx: &Context) -> Result<Tensor> {
        let tp = self.config.future;
        let data = ctx
            .receivers
            .iter()
            .flat_map(|&(s, a)| scenes[s].scene.agents[a].future.iter().flatten().copied())
            .collect();
        Tensor::matrix(ctx.receivers.len(), 2 * tp, data)
    }

    /// Posterior `q(z | T, y)` for each receiver.
    pub fn posterior_vars(&self, tape: &mut Tape, p: &Bound, t: Var, future: Var) -> Result<(Var, Var)> {
        let f = self
            .parts
            .future
            .encode(tape, p, future, self.config.future, self.config.track_scale())?;
        let x = tape.concat_cols(&[t, f])?;
        self.parts.posterior.forward(tape, p, x, self.config.latent)
    }

    /// Conditional prior `p(z | T)`; rejected for the VAE.
    pub fn prior_vars(&self, tape: &mut Tape, p: &Bound, t: Var) -> Result<(Var, Var)> {
        let head = self.parts.prior.as_ref().ok_or_else(|| Error::WrongVariant {
            op: "conditional_prior",
            variant: self.config.variant.to_string(),
        })?;
        head.forward(tape, p, t, self.config.latent)
    }

    /// Prior used for sampling: conditional for CVAE variants, N(0, I) otherwise.
    fn sampling_prior(&self, tape: &mut Tape, p: &Bound, t: Var) -> Result<(Var, Var)> {
        if self.config.variant.has_prior() {
            self.prior_vars(tape, p, t)
        } else {
            let r = tape.value(t).rows();
            let z = tape.constant(Tensor::zeros(&[r, self.config.latent]));
            Ok((z, z))
        }
    }

    pub fn decode_vars(&self, tape: &mut Tape, p: &Bound, t: Var, z: Var, last: Var) -> Result<Var> {
        self.parts
            .decoder
            .forward(tape, p, t, z, last, self.config.future, self.config.step_scale)
    }

    /// Auxiliary decoder; rejected unless the variant is the social-CVAE.
    pub fn aux_decode_vars(&self, tape: &mut Tape, p: &Bound, t: Var, z: Var, last: Var) -> Result<Var> {
        let dec = self.parts.aux.as_ref().ok_or_else(|| Error::WrongVariant {
            op: "aux_decode",
            variant: self.config.variant.to_string(),
        })?;
        dec.forward(tape, p, t, z, last, self.config.future, self.config.step_scale)
    }

    /// Records the training objective for a batch. `noise_seed` fixes the
    /// reparameterization draws.
    pub fn loss_vars(
        &self,
        tape: &mut Tape,
        p: &Bound,
        scenes: &[&PreparedScene],
        noise_seed: u64,
    ) -> Result<LossVars> {
        let cfg = &self.config;
        let ctx = self.encode_context(tape, p, scenes)?;
        let r = ctx.receivers.len();
        let truth = self.futures(scenes, &ctx)?;
        let future = tape.constant(truth.clone());
        let (mq, lq) = self.posterior_vars(tape, p, ctx.t, future)?;
        let (mp, lp) = self.sampling_prior(tape, p, ctx.t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let eps = tape.constant(normal_matrix(r, cfg.latent, &mut rng));
        let eps_aux = tape.constant(normal_matrix(r, cfg.latent, &mut rng));

        let half = tape.scale(lq, 0.5);
        let sd = tape.exp(half);
        let noise = tape.mul(sd, eps)?;
        let z = tape.add(mq, noise)?;
        let last = self.receiver_last(tape, &ctx)?;
        let y_hat = self.decode_vars(tape, p, ctx.t, z, last)?;
        let diff = tape.sub(y_hat, future)?;
        let sq = tape.square(diff);
        let mse = tape.mean(sq);
        let recon = tape.scale(mse, 1.0 / cfg.output_variance);

        let kl_all = kl_diag(tape, mq, lq, mp, lp)?;
        let kl = tape.mean(kl_all);

        let aux = if cfg.variant.has_aux() {
            let half = tape.scale(lp, 0.5);
            let sd = tape.exp(half);
            let noise = tape.mul(sd, eps_aux)?;
            let zp = tape.add(mp, noise)?;
            let y_aux = self.aux_decode_vars(tape, p, ctx.t, zp, last)?;
            let diff = tape.sub(y_aux, future)?;
            let sq = tape.square(diff);
            let mse = tape.mean(sq);
            Some(tape.scale(mse, 1.0 / cfg.output_variance))
        } else {
            None
        };
        Ok(LossVars { recon, kl, aux, context: ctx })
    }

    /// Objective value, components and per-parameter gradients at the
    /// configured β.
    pub fn loss_and_grads(&self, scenes: &[&PreparedScene], noise_seed: u64) -> Result<(LossParts, Vec<Vec<f64>>)> {
        self.loss_and_grads_at(scenes, noise_seed, self.config.beta)
    }

    pub fn loss_and_grads_at(
        &self,
        scenes: &[&PreparedScene],
        noise_seed: u64,
        beta: f64,
    ) -> Result<(LossParts, Vec<Vec<f64>>)> {
        let (tape, p, total, parts) = self.loss_tape(scenes, noise_seed, beta)?;
        let grads = tape.backward(total)?;
        Ok((parts, self.params.collect_grads(&grads, &p)))
    }

    /// Builds the loss with KL weight `beta` on a fresh tape; returns the
    /// tape, the bound parameters, the total and its components.
    pub fn loss_tape(
        &self,
        scenes: &[&PreparedScene],
        noise_seed: u64,
        beta: f64,
    ) -> Result<(Tape, Bound, Var, LossParts)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let LossVars { recon, kl, aux, .. } = self.loss_vars(&mut tape, &p, scenes, noise_seed)?;
        let bkl = tape.scale(kl, beta);
        let mut total = tape.add(recon, bkl)?;
        if let Some(a) = aux {
            let aa = tape.scale(a, self.config.alpha);
            total = tape.add(total, aa)?;
        }
        let parts = LossParts {
            total: tape.value(total).item(),
            recon: tape.value(recon).item(),
            kl: tape.value(kl).item(),
            aux: aux.map_or(0.0, |a| tape.value(a).item()),
        };
        Ok((tape, p, total, parts))
    }

    pub fn loss(&self, scenes: &[&PreparedScene], noise_seed: u64) -> Result<LossParts> {
        Ok(self.loss_tape(scenes, noise_seed, self.config.beta)?.3)
    }

    /// `K` predicted tracks per receiver of each scene: with `K = 1` the
    /// prior mean is decoded; otherwise `K − 1` prior draws followed by the
    /// prior mean. Returns `[receiver][sample][step]`.
    pub fn sample_trajectories(&self, scenes: &[&PreparedScene], k: usize, seed: u64) -> Result<Vec<Vec<Vec<Point>>>> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let ctx = self.encode_context(&mut tape, &p, scenes)?;
        let r = ctx.receivers.len();
        let l = self.config.latent;
        let (mp, lp) = self.sampling_prior(&mut tape, &p, ctx.t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Vec::with_capacity(k * r * l);
        let (mv, lv) = (tape.value(mp).data().to_vec(), tape.value(lp).data().to_vec());
        for s in 0..k {
            for i in 0..r {
                for j in 0..l {
                    let m = mv[i * l + j];
                    if s + 1 == k {
                        z.push(m);
                    } else {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        z.push(m + (0.5 * lv[i * l + j]).exp() * e);
                    }
                }
            }
        }
        let zv = tape.constant(Tensor::matrix(k * r, l, z)?);
        let rows: Vec<usize> = (0..k).flat_map(|_| 0..r).collect();
        let t = tape.gather_rows(ctx.t, Rc::new(rows.clone()))?;
        let last = self.receiver_last(&mut tape, &ctx)?;
        let last = tape.gather_rows(last, Rc::new(rows))?;
        let y = self.decode_vars(&mut tape, &p, t, zv, last)?;
        let yv = tape.value(y);
        Ok((0..r)
            .map(|i| {
                (0..k)
                    .map(|s| yv.row_slice(s * r + i).chunks(2).map(|c| [c[0], c[1]]).collect())
                    .collect()
            })
            .collect())
    }

    /// Mean-latent prediction for every receiver.
    pub fn predict_mean(&self, scenes: &[&PreparedScene]) -> Result<Vec<Vec<Point>>> {
        Ok(self
            .sample_trajectories(scenes, 1, 0)?
            .into_iter()
            .map(|mut s| s.remove(0))
            .collect())
    }

    /// Attention (or max-win) weights of one forward pass.
    pub fn attention(&self, scenes: &[&PreparedScene]) -> Result<AttentionReport> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let ctx = self.encode_context(&mut tape, &p, scenes)?;
        Ok(AttentionReport::new(&ctx.graph, &ctx.gamp.weights))
    }

    /// Jacobian of each receiver's final mean-latent position with respect to
    /// every agent history of its scene: `[receiver][coord] → [agents × 2T_h]`
    /// flattened over the scene's agent rows.
    pub fn final_point_jacobian(&self, scene: &PreparedScene) -> Result<Vec<[Vec<f64>; 2]>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let ctx = self.encode_context(&mut tape, &p, &[scene])?;
        let (mp, _) = self.sampling_prior(&mut tape, &p, ctx.t)?;
        let last = self.receiver_last(&mut tape, &ctx)?;
        let y = self.decode_vars(&mut tape, &p, ctx.t, mp, last)?;
        let tp = self.config.future;
        let mut out = Vec::new();
        for r in 0..ctx.receivers.len() {
            let row = tape.slice_rows(y, r, r + 1)?;
            let mut coords: [Vec<f64>; 2] = Default::default();
            for (c, slot) in coords.iter_mut().enumerate() {
                let v = tape.slice_cols(row, 2 * tp - 2 + c, 2 * tp - 1 + c)?;
                let g: Gradients = tape.backward(v)?;
                *slot = g
                    .wrt(ctx.history)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(ctx.history).len()]);
            }
            out.push(coords);
        }
        Ok(out)
    }

    /// Per-agent closed-form building blocks on plain vectors, for probing a
    /// single agent outside a batch.
    pub fn posterior(&self, t: &[f64], future: &[Point]) -> Result<DiagGaussian> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let tv = tape.constant(Tensor::row(t.to_vec()));
        let f = tape.constant(Tensor::row(future.iter().flatten().copied().collect()));
        let (m, l) = self.posterior_vars(&mut tape, &p, tv, f)?;
        Ok(DiagGaussian {
            mean: tape.value(m).data().to_vec(),
            log_var: tape.value(l).data().to_vec(),
        })
    }

    /// Conditional prior for a context vector; N(0, I) is not returned here
    /// for the VAE, which rejects the call.
    pub fn conditional_prior(&self, t: &[f64]) -> Result<DiagGaussian> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let tv = tape.constant(Tensor::row(t.to_vec()));
        let (m, l) = self.prior_vars(&mut tape, &p, tv)?;
        Ok(DiagGaussian {
            mean: tape.value(m).data().to_vec(),
            log_var: tape.value(l).data().to_vec(),
        })
    }

    /// The prior the variant samples from.
    pub fn prior(&self, t: &[f64]) -> Result<DiagGaussian> {
        if self.config.variant.has_prior() {
            self.conditional_prior(t)
        } else {
            Ok(DiagGaussian::standard(self.config.latent))
        }
    }

    fn decode_plain(&self, aux: bool, t: &[f64], z: &[f64], last: Point, horizon: usize) -> Result<Vec<Point>> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("decoding horizon must be positive".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let tv = tape.constant(Tensor::row(t.to_vec()));
        let zv = tape.constant(Tensor::row(z.to_vec()));
        let lv = tape.constant(Tensor::row(last.to_vec()));
        let dec = if aux {
            self.parts.aux.as_ref().ok_or_else(|| Error::WrongVariant {
                op: "aux_decode",
                variant: self.config.variant.to_string(),
            })?
        } else {
            &self.parts.decoder
        };
        let y = dec.forward(&mut tape, &p, tv, zv, lv, horizon, self.config.step_scale)?;
        Ok(tape.value(y).data().chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn decode(&self, t: &[f64], z: &[f64], last: Point, horizon: usize) -> Result<Vec<Point>> {
        self.decode_plain(false, t, z, last, horizon)
    }

    pub fn aux_decode(&self, t: &[f64], z: &[f64], last: Point, horizon: usize) -> Result<Vec<Point>> {
        self.decode_plain(true, t, z, last, horizon)
    }

    /// Context vectors `T_i` of the receivers of one scene.
    pub fn context_vectors(&self, scene: &PreparedScene) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let ctx = self.encode_context(&mut tape, &p, &[scene])?;
        let t = tape.value(ctx.t);
        Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MODEL_MAGIC}\nconfig {}\n", serde_json::to_string(&self.config).expect("serializable"));
        out.push_str(&self.params.to_text());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MODEL_MAGIC) {
            return Err(Error::parse(path, 1, "magic", format!("expected `{MODEL_MAGIC}`")));
        }
        let cfg_line = lines.next().unwrap_or_default();
        let json = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| Error::parse(path, 2, "config", "expected `config <json>`"))?;
        let config: ModelConfig = serde_json::from_str(json).map_err(|e| Error::parse(path, 2, "config", e.to_string()))?;
        let params = ParamStore::from_lines(&mut lines, path, 3)?;
        let mut model = Model::new(config, 0).map_err(|e| Error::parse(path, 2, "config", e.to_string()))?;
        if model.params.len() != params.len() {
            return Err(Error::parse(
                path,
                4,
                "count",
                format!("config implies {} parameters, file has {}", model.params.len(), params.len()),
            ));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let other = params
                .id(&name)
                .ok_or_else(|| Error::parse(path, 3, name.clone(), "missing parameter"))?;
            let value = params.get(other);
            if value.shape() != model.params.get(id).shape() {
                return Err(Error::parse(path, 3, name, "shape does not match config"));
            }
            *model.params.get_mut(id) = value.clone();
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_text(&text, path)
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            parts: self.parts.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate, ScenarioTemplate, Template};

    fn tiny(variant: Variant) -> ModelConfig {
        let mut c = ModelConfig::driving(variant);
        c.hidden = 6;
        c.latent = 3;
        c
    }

    fn scenes(n: usize) -> Vec<PreparedScene> {
        generate(&ScenarioTemplate::new(Template::Merge), n, 4)
            .unwrap()
            .iter()
            .map(|s| PreparedScene::new(s).unwrap())
            .collect()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Vae, Variant::Cvae, Variant::SocialCvae] {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("gsnn".parse::<Variant>().is_err());
    }

    #[test]
    fn alpha_only_for_social_cvae() {
        let mut c = tiny(Variant::Cvae);
        c.alpha = 0.1;
        assert!(Model::new(c, 0).is_err());
    }

    #[test]
    fn groups_present_per_variant() {
        let vae = Model::new(tiny(Variant::Vae), 0).unwrap();
        assert!(vae.group(Group::Prior).is_empty() && vae.group(Group::Aux).is_empty());
        let cvae = Model::new(tiny(Variant::Cvae), 0).unwrap();
        assert!(!cvae.group(Group::Prior).is_empty() && cvae.group(Group::Aux).is_empty());
        let s = Model::new(tiny(Variant::SocialCvae), 0).unwrap();
        assert!(!s.group(Group::Aux).is_empty());
        assert!(vae.conditional_prior(&[0.0; 6]).is_err());
        assert!(cvae.aux_decode(&[0.0; 6], &[0.0; 3], [0.0, 0.0], 3).is_err());
    }

    #[test]
    fn loss_components_sum_to_total() {
        let sc = scenes(3);
        let refs: Vec<&PreparedScene> = sc.iter().collect();
        let m = Model::new(tiny(Variant::SocialCvae), 1).unwrap();
        let l = m.loss(&refs, 9).unwrap();
        let sum = l.recon + m.config.beta * l.kl + m.config.alpha * l.aux;
        assert!((l.total - sum).abs() < 1e-12);
        assert!(l.kl >= 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(tiny(Variant::Cvae), 2).unwrap();
        let text = m.to_text();
        let back = Model::from_text(&text, Path::new("m")).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn sampling_reproducible_and_mean_last() {
        let sc = scenes(2);
        let refs: Vec<&PreparedScene> = sc.iter().collect();
        let m = Model::new(tiny(Variant::Cvae), 3).unwrap();
        let a = m.sample_trajectories(&refs, 6, 5).unwrap();
        assert_eq!(a, m.sample_trajectories(&refs, 6, 5).unwrap());
        let mean = m.sample_trajectories(&refs, 1, 99).unwrap();
        assert_eq!(a[0][5], mean[0][0]);
        assert!(m.sample_trajectories(&refs, 0, 5).is_err());
    }

    #[test]
    fn batched_context_matches_single() {
        let sc = scenes(3);
        let refs: Vec<&PreparedScene> = sc.iter().collect();
        let m = Model::new(tiny(Variant::Vae), 4).unwrap();
        let batch = m.sample_trajectories(&refs, 1, 0).unwrap();
        for (i, s) in sc.iter().enumerate() {
            let one = m.sample_trajectories(&[s], 1, 0).unwrap();
            for (p, q) in one[0][0].iter().zip(&batch[i][0]) {
                assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
            }
        }
    }
}
