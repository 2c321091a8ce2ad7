//! Sparse graph-attention message passing over agent and lanelet nodes.
//!
//! One round: every node embedding goes through a shared node MLP, each edge
//! builds a message from `[f(h_src), f(h_dst), u]` with a second MLP, and each
//! receiving agent aggregates its incoming messages. Scalar edge scores for
//! the entmax and softmax aggregators come from a linear head on the message.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Segments, Tape, Var};

/// Edge-feature width: relative displacement (2), wrapped relative heading
/// (1) and a source-kind one-hot (2).
pub const EDGE_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Agent,
    Lanelet,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Agent => "agent",
            NodeKind::Lanelet => "lanelet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Entmax,
    Softmax,
    Max,
}

impl Aggregator {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::Entmax => "entmax",
            Aggregator::Softmax => "softmax",
            Aggregator::Max => "max",
        }
    }

    /// Whether per-edge weights are attention weights (as opposed to the
    /// diagnostic coordinate-win fractions reported under `Max`).
    pub fn has_attention(self) -> bool {
        self != Aggregator::Max
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entmax" => Ok(Aggregator::Entmax),
            "softmax" => Ok(Aggregator::Softmax),
            "max" => Ok(Aggregator::Max),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregator `{other}` (expected entmax, softmax or max)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeInfo {
    pub kind: NodeKind,
    /// Agent or lanelet id inside its scene.
    pub id: u32,
    pub scene: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub source: usize,
    /// Index into [`ContextGraph::receivers`].
    pub receiver: usize,
}

/// Directed context graph, possibly spanning several scenes. Node indices
/// refer to rows of the node-embedding matrix; edges are grouped by receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextGraph {
    pub nodes: Vec<NodeInfo>,
    /// Agent nodes whose context embedding is computed, in output row order.
    pub receivers: Vec<usize>,
    pub edges: Vec<Edge>,
}

impl ContextGraph {
    /// Connects every receiver to all other agents of its scene and to all
    /// lanelets of its scene; when its scene has no lanelets it also gets a
    /// self-edge. Nodes of different scenes are never connected.
    pub fn build(nodes: Vec<NodeInfo>, receivers: Vec<usize>) -> Result<Self> {
        let mut edges = Vec::new();
        for (r, &dst) in receivers.iter().enumerate() {
            let target = nodes
                .get(dst)
                .ok_or_else(|| Error::InvalidArgument(format!("receiver {dst} out of range")))?;
            if target.kind != NodeKind::Agent {
                return Err(Error::InvalidArgument(format!("receiver {dst} is not an agent")));
            }
            let has_lanes = nodes
                .iter()
                .any(|n| n.scene == target.scene && n.kind == NodeKind::Lanelet);
            for (src, n) in nodes.iter().enumerate() {
                if n.scene != target.scene {
                    continue;
                }
                if src != dst || !has_lanes {
                    edges.push(Edge { source: src, receiver: r });
                }
            }
        }
        Ok(ContextGraph {
            nodes,
            receivers,
            edges,
        })
    }

    pub fn segments(&self) -> Result<Segments> {
        Segments::new(
            self.edges.iter().map(|e| e.receiver).collect(),
            self.receivers.len(),
        )
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.source).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.edges.iter().map(|e| self.receivers[e.receiver]).collect()
    }

    pub fn is_self_edge(&self, e: &Edge) -> bool {
        e.source == self.receivers[e.receiver]
    }
}

/// Parameters of one sparse-GAMP layer.
#[derive(Debug, Clone)]
pub struct GampLayer {
    pub node: Mlp,
    pub edge: Mlp,
    pub score: Linear,
    pub hidden: usize,
}

/// Result of one layer application.
#[derive(Debug, Clone)]
pub struct GampOutput {
    /// `[receivers, hidden]` context embeddings.
    pub context: Var,
    /// `[edges, hidden]` messages.
    pub messages: Var,
    /// Per-edge weights (attention, or coordinate-win fraction under `Max`).
    pub weights: Vec<f64>,
    /// The `[edges, 1]` weight variable for the attention aggregators.
    pub weight_var: Option<Var>,
}

impl GampLayer {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut impl Rng) -> Self {
        GampLayer {
            node: Mlp::new(store, &format!("{name}.node"), hidden, hidden, rng),
            edge: Mlp::new(store, &format!("{name}.edge"), 2 * hidden + EDGE_FEATURES, hidden, rng),
            score: Linear::new(store, &format!("{name}.score"), hidden, 1, rng),
            hidden,
        }
    }

    /// `h_(i,j)` for every edge: `h` is `[nodes, hidden]`, `u` is `[edges, 5]`.
    pub fn edge_messages(&self, tape: &mut Tape, p: &Bound, graph: &ContextGraph, h: Var, u: Var) -> Result<Var> {
        let f = self.node.forward(tape, p, h)?;
        let src = tape.gather_rows(f, Rc::new(graph.sources()))?;
        let dst = tape.gather_rows(f, Rc::new(graph.targets()))?;
        let cat = tape.concat_cols(&[src, dst, u])?;
        self.edge.forward(tape, p, cat)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &ContextGraph,
        h: Var,
        u: Var,
        mode: Aggregator,
    ) -> Result<GampOutput> {
        let seg = Rc::new(graph.segments()?);
        let messages = self.edge_messages(tape, p, graph, h, u)?;
        aggregate(tape, p, &self.score, messages, seg, mode)
    }
}

/// Combines messages within each receiver's neighborhood.
pub fn aggregate(
    tape: &mut Tape,
    p: &Bound,
    score: &Linear,
    messages: Var,
    seg: Rc<Segments>,
    mode: Aggregator,
) -> Result<GampOutput> {
    match mode {
        Aggregator::Entmax | Aggregator::Softmax => {
            let s = score.forward(tape, p, messages)?;
            let w = if mode == Aggregator::Entmax {
                tape.segment_entmax(s, seg.clone())?
            } else {
                tape.segment_softmax(s, seg.clone())?
            };
            let context = tape.segment_weighted_sum(messages, w, seg)?;
            Ok(GampOutput {
                context,
                messages,
                weights: tape.value(w).data().to_vec(),
                weight_var: Some(w),
            })
        }
        Aggregator::Max => {
            let context = tape.segment_max(messages, seg.clone())?;
            let winners = tape.segment_max_winners(context).expect("segment max node");
            let cols = tape.value(messages).cols();
            let mut weights = vec![0.0; seg.rows()];
            for &row in winners {
                weights[row] += 1.0 / cols as f64;
            }
            Ok(GampOutput {
                context,
                messages,
                weights,
                weight_var: None,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub scene: u64,
    pub target: u32,
    pub source: u32,
    pub kind: NodeKind,
    pub self_edge: bool,
    pub weight: f64,
}

/// Per-edge weights labelled with scene, receiving agent and source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionReport {
    pub rows: Vec<AttentionRow>,
}

impl AttentionReport {
    pub fn new(graph: &ContextGraph, weights: &[f64]) -> Self {
        let rows = graph
            .edges
            .iter()
            .zip(weights)
            .map(|(e, &w)| {
                let dst = graph.nodes[graph.receivers[e.receiver]];
                let src = graph.nodes[e.source];
                AttentionRow {
                    scene: dst.scene,
                    target: dst.id,
                    source: src.id,
                    kind: src.kind,
                    self_edge: graph.is_self_edge(e),
                    weight: w,
                }
            })
            .collect();
        AttentionReport { rows }
    }

    /// Rows for one receiving agent of one scene.
    pub fn incoming(&self, scene: u64, target: u32) -> impl Iterator<Item = &AttentionRow> {
        self.rows
            .iter()
            .filter(move |r| r.scene == scene && r.target == target)
    }

    /// Tab-separated text with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("scene\ttarget\tsource\tkind\tweight\n");
        for r in &self.rows {
            let kind = if r.self_edge { "self" } else { r.kind.as_str() };
            out.push_str(&format!("{}\t{}\t{}\t{}\t{:e}\n", r.scene, r.target, r.source, kind, r.weight));
        }
        out
    }
}
