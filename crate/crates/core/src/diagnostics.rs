//! Prediction metrics and the collapse diagnostics: agent ratio (AR and its
//! thresholded curve), gradient importance τ_g and leave-one-out ADE.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_nets::{Aggregator, AttentionReport, NodeKind};
use crate::map::Point;
use crate::model::{Model, PreparedScene, Variant};
use crate::world::FrameMode;

/// Displacement errors of a single track against the truth.
pub fn ade_fde(pred: &[Point], truth: &[Point]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "horizon mismatch: {} predicted vs {} true steps",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("track"));
    }
    let d: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
        .collect();
    Ok((d.iter().sum::<f64>() / d.len() as f64, d[d.len() - 1]))
}

/// `(minADE, minFDE)`: the ADE reported is that of the sample with the
/// smallest FDE, ties going to the lowest index.
pub fn min_ade_fde(samples: &[Vec<Point>], truth: &[Point]) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for s in samples {
        let (ade, fde) = ade_fde(s, truth)?;
        if best.is_none_or(|(_, f)| fde < f) {
            best = Some((ade, fde));
        }
    }
    best.ok_or(Error::EmptyInput("samples"))
}

fn neighbor_weights(report: &AttentionReport, scene: u64, target: u32) -> Vec<f64> {
    report
        .incoming(scene, target)
        .filter(|r| r.kind == NodeKind::Agent && !r.self_edge)
        .map(|r| r.weight)
        .collect()
}

/// AR in percent from the weights on the edges from the `n − 1` surrounding
/// agents; `None` without neighbors.
pub fn agent_ratio_of(weights: &[f64]) -> Option<f64> {
    if weights.is_empty() {
        return None;
    }
    let hits = weights.iter().filter(|&&w| w != 0.0).count();
    Some(100.0 * hits as f64 / weights.len() as f64)
}

/// AR_δ in percent for each threshold (`weight ≥ δ`).
pub fn agent_ratio_thresholded_of(weights: &[f64], deltas: &[f64]) -> Option<Vec<f64>> {
    if weights.is_empty() {
        return None;
    }
    Some(
        deltas
            .iter()
            .map(|&d| 100.0 * weights.iter().filter(|&&w| w >= d).count() as f64 / weights.len() as f64)
            .collect(),
    )
}

pub fn agent_ratio(report: &AttentionReport, scene: u64, target: u32) -> Option<f64> {
    agent_ratio_of(&neighbor_weights(report, scene, target))
}

pub fn agent_ratio_thresholded(report: &AttentionReport, scene: u64, target: u32, deltas: &[f64]) -> Option<Vec<f64>> {
    agent_ratio_thresholded_of(&neighbor_weights(report, scene, target), deltas)
}

/// `0` followed by 50 log-spaced thresholds from `1e-3` to `1`.
pub fn delta_grid() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((0..50).map(|i| 10f64.powf(-3.0 + 3.0 * i as f64 / 49.0)))
        .collect()
}

/// τ_g from the Jacobian blocks of the final predicted point with respect to
/// each of the `n − 1` other agents' histories (each block holds both output
/// coordinates, `2 × 2T_h` entries).
pub fn tau_g_from_blocks(blocks: &[Vec<f64>], history: usize) -> Option<f64> {
    if blocks.is_empty() {
        return None;
    }
    let total: f64 = blocks.iter().flatten().map(|v| v.abs()).sum();
    Some(total / (2.0 * blocks.len() as f64 * history as f64))
}

/// τ_g of every predicted agent of the scene, decoded at the prior mean.
pub fn gradient_importance(model: &Model, scene: &PreparedScene) -> Result<Vec<Option<f64>>> {
    let th = model.config.history;
    let jac = model.final_point_jacobian(scene)?;
    let n = scene.scene.agents.len();
    let receivers = scene.scene.predicted()?;
    Ok(receivers
        .iter()
        .zip(&jac)
        .map(|(&i, [jx, jy])| {
            let blocks: Vec<Vec<f64>> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let r = j * 2 * th..(j + 1) * 2 * th;
                    jx[r.clone()].iter().chain(&jy[r]).copied().collect()
                })
                .collect();
            tau_g_from_blocks(&blocks, th)
        })
        .collect())
}

/// looADE from a normal prediction and the predictions with each of the
/// `n − 1` neighbors masked.
pub fn loo_ade_of(normal: &[Point], masked: &[Vec<Point>]) -> Result<Option<f64>> {
    if masked.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for m in masked {
        sum += ade_fde(m, normal)?.0;
    }
    Ok(Some(sum / masked.len() as f64))
}

/// looADE of every predicted agent; masking removes the neighbor's node and
/// all its edges.
pub fn leave_one_out_ade(model: &Model, scene: &PreparedScene) -> Result<Vec<Option<f64>>> {
    let receivers = scene.scene.predicted()?;
    let normal = model.predict_mean(&[scene])?;
    let n = scene.scene.agents.len();
    let mut masked: Vec<Vec<Vec<Point>>> = vec![Vec::new(); receivers.len()];
    for j in 0..n {
        if scene.scene.mode == FrameMode::Driving && scene.scene.agents[j].id == scene.scene.target {
            continue;
        }
        let reduced = scene.without_agent(j)?;
        let pred = model.predict_mean(&[&reduced])?;
        let reduced_receivers = reduced.scene.predicted()?;
        for (ri, &i) in receivers.iter().enumerate() {
            if i == j {
                continue;
            }
            let id = scene.scene.agents[i].id;
            if let Some(k) = reduced_receivers.iter().position(|&a| reduced.scene.agents[a].id == id) {
                masked[ri].push(pred[k].clone());
            }
        }
    }
    receivers
        .iter()
        .enumerate()
        .map(|(ri, _)| loo_ade_of(&normal[ri], &masked[ri]))
        .collect()
}

/// Which of the optional diagnostics to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requested {
    pub ar: bool,
    pub tau_g: bool,
    pub loo_ade: bool,
}

impl Requested {
    pub const ALL: Requested = Requested {
        ar: true,
        tau_g: true,
        loo_ade: true,
    };
    pub const NONE: Requested = Requested {
        ar: false,
        tau_g: false,
        loo_ade: false,
    };
}

/// Metrics of one predicted agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub scene: u64,
    pub agent: u32,
    pub neighbors: usize,
    pub ar: Option<f64>,
    pub ar_delta: Option<Vec<f64>>,
    /// `(K, minADE, minFDE)` per requested K.
    pub min: Vec<(usize, f64, f64)>,
    pub tau_g: Option<f64>,
    pub loo_ade: Option<f64>,
}

/// Per-agent metrics over a set of scenes. AR is only available for
/// attention aggregators; requesting it under max aggregation is refused.
pub fn evaluate_scenes(
    model: &Model,
    scenes: &[PreparedScene],
    ks: &[usize],
    seed: u64,
    want: Requested,
) -> Result<Vec<AgentMetrics>> {
    if want.ar && !model.config.aggregator.has_attention() {
        return Err(Error::InvalidArgument(format!(
            "agent ratio needs attention weights; `{}` aggregation has none",
            model.config.aggregator
        )));
    }
    let deltas = delta_grid();
    let mut out = Vec::new();
    for (si, ps) in scenes.iter().enumerate() {
        let s = &ps.scene;
        let receivers = s.predicted()?;
        let report = if want.ar { Some(model.attention(&[ps])?) } else { None };
        let mut samples: Vec<Vec<Vec<Vec<Point>>>> = Vec::with_capacity(ks.len());
        for (ki, &k) in ks.iter().enumerate() {
            samples.push(model.sample_trajectories(&[ps], k, seed ^ ((si as u64) << 8) ^ ki as u64)?);
        }
        let tau = if want.tau_g {
            gradient_importance(model, ps)?
        } else {
            vec![None; receivers.len()]
        };
        let loo = if want.loo_ade {
            leave_one_out_ade(model, ps)?
        } else {
            vec![None; receivers.len()]
        };
        for (ri, &i) in receivers.iter().enumerate() {
            let agent = &s.agents[i];
            let mut min = Vec::with_capacity(ks.len());
            for (ki, &k) in ks.iter().enumerate() {
                let (a, f) = min_ade_fde(&samples[ki][ri], &agent.future)?;
                min.push((k, a, f));
            }
            let (ar, ar_delta) = match &report {
                Some(r) => (
                    agent_ratio(r, s.id, agent.id),
                    agent_ratio_thresholded(r, s.id, agent.id, &deltas),
                ),
                None => (None, None),
            };
            out.push(AgentMetrics {
                scene: s.id,
                agent: agent.id,
                neighbors: s.agents.len() - 1,
                ar,
                ar_delta,
                min,
                tau_g: tau[ri],
                loo_ade: loo[ri],
            });
        }
    }
    Ok(out)
}

/// Per-agent diagnostics table: scene, agent, AR, τ_g, looADE (`-` where absent).
pub fn agent_table(rows: &[AgentMetrics]) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    let mut out = String::from("scene\tagent\tneighbors\tar\ttau_g\tloo_ade\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.scene,
            r.agent,
            r.neighbors,
            opt(r.ar),
            opt(r.tau_g),
            opt(r.loo_ade)
        ));
    }
    out
}

/// Summary of one trial over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub trial: usize,
    pub variant: Variant,
    pub aggregator: Aggregator,
    pub ar: Option<f64>,
    pub ar_delta: Option<Vec<f64>>,
    /// `(K, minADE, minFDE)`.
    pub min: Vec<(usize, f64, f64)>,
    pub tau_g: Option<f64>,
    pub loo_ade: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsRow {
    pub fn summarize(trial: usize, variant: Variant, aggregator: Aggregator, agents: &[AgentMetrics]) -> Result<Self> {
        let first = agents.first().ok_or(Error::EmptyInput("agent metrics"))?;
        let min = (0..first.min.len())
            .map(|ki| {
                let n = agents.len() as f64;
                (
                    first.min[ki].0,
                    agents.iter().map(|a| a.min[ki].1).sum::<f64>() / n,
                    agents.iter().map(|a| a.min[ki].2).sum::<f64>() / n,
                )
            })
            .collect();
        let curves: Vec<&Vec<f64>> = agents.iter().filter_map(|a| a.ar_delta.as_ref()).collect();
        let ar_delta = curves.first().map(|c| {
            (0..c.len())
                .map(|i| curves.iter().map(|v| v[i]).sum::<f64>() / curves.len() as f64)
                .collect()
        });
        Ok(MetricsRow {
            trial,
            variant,
            aggregator,
            ar: mean_of(agents.iter().map(|a| a.ar)),
            ar_delta,
            min,
            tau_g: mean_of(agents.iter().map(|a| a.tau_g)),
            loo_ade: mean_of(agents.iter().map(|a| a.loo_ade)),
        })
    }

    pub fn min_fde(&self, k: usize) -> Option<f64> {
        self.min.iter().find(|m| m.0 == k).map(|m| m.2)
    }

    pub fn min_ade(&self, k: usize) -> Option<f64> {
        self.min.iter().find(|m| m.0 == k).map(|m| m.1)
    }

    /// Named scalar metrics in a fixed order.
    pub fn scalars(&self) -> Vec<(String, Option<f64>)> {
        let mut v = vec![("ar".to_string(), self.ar)];
        for &(k, a, f) in &self.min {
            v.push((format!("minADE@{k}"), Some(a)));
            v.push((format!("minFDE@{k}"), Some(f)));
        }
        v.push(("tau_g".into(), self.tau_g));
        v.push(("loo_ade".into(), self.loo_ade));
        v
    }

    pub fn tsv_header(&self) -> String {
        let names: Vec<String> = self.scalars().into_iter().map(|(n, _)| n).collect();
        format!("trial\tvariant\taggregator\t{}", names.join("\t"))
    }

    pub fn tsv_line(&self) -> String {
        let vals: Vec<String> = self
            .scalars()
            .into_iter()
            .map(|(_, v)| v.map_or("-".into(), |x| format!("{x:.6}")))
            .collect();
        format!("{}\t{}\t{}\t{}", self.trial, self.variant, self.aggregator, vals.join("\t"))
    }
}

/// Rows as a tab-separated table with a header line.
pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut out = first.tsv_header();
    out.push('\n');
    for r in rows {
        out.push_str(&r.tsv_line());
        out.push('\n');
    }
    out
}

/// Mean and sample standard deviation of one metric over trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// `(n − 1)`-denominator standard deviation; a single value gets std 0.
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }

    /// Fewer than two trials: the std is a convention, not an estimate.
    pub fn single(&self) -> bool {
        self.n < 2
    }
}

/// Per-metric mean ± std over trial rows; metrics absent in every row are
/// left out.
pub fn aggregate_trials(rows: &[MetricsRow]) -> Result<BTreeMap<String, MeanStd>> {
    let first = rows.first().ok_or(Error::EmptyInput("metrics rows"))?;
    let mut out = BTreeMap::new();
    for (i, (name, _)) in first.scalars().into_iter().enumerate() {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.scalars().get(i).and_then(|s| s.1)).collect();
        if let Some(ms) = MeanStd::of(&vals) {
            out.insert(name, ms);
        }
    }
    Ok(out)
}

/// Aggregate table: metric, mean, std, trials (flagged `*` when single).
pub fn aggregate_table(agg: &BTreeMap<String, MeanStd>) -> String {
    let mut out = String::from("metric\tmean\tstd\ttrials\n");
    for (name, m) in agg {
        out.push_str(&format!(
            "{name}\t{:.6}\t{:.6}\t{}{}\n",
            m.mean,
            m.std,
            m.n,
            if m.single() { "*" } else { "" }
        ));
    }
    out
}

/// `(δ, AR_δ)` pairs, one per line.
pub fn ar_curve_table(deltas: &[f64], curve: &[f64]) -> String {
    let mut out = String::from("delta\tar_delta\n");
    for (d, v) in deltas.iter().zip(curve) {
        out.push_str(&format!("{d:e}\t{v:.6}\n"));
    }
    out
}
