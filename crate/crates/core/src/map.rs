//! Lane graphs, region-of-interest search and heading smoothing.
//!
//! # Lane-graph file
//!
//! A lane graph is stored as JSON (`LaneGraph` serialized with serde):
//!
//! ```text
//! { "segments": [ { "id": 3,
//!                   "centerline": [[x, y], ..],
//!                   "left": [[x, y], ..], "right": [[x, y], ..],
//!                   "left_type": 1.0, "right_type": 0.0, "stop_sign": false,
//!                   "adjacent": [4], "predecessors": [2], "successors": [5] }, .. ] }
//! ```
//!
//! `left_type`/`right_type` are boundary-type flags (1 = solid, 0 = dashed).
//! The same segment records are embedded in scene files.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub id: u32,
    pub centerline: Vec<Point>,
    pub left: Vec<Point>,
    pub right: Vec<Point>,
    #[serde(default)]
    pub left_type: f64,
    #[serde(default)]
    pub right_type: f64,
    #[serde(default)]
    pub stop_sign: bool,
    #[serde(default)]
    pub adjacent: Vec<u32>,
    #[serde(default)]
    pub predecessors: Vec<u32>,
    #[serde(default)]
    pub successors: Vec<u32>,
}

pub fn polyline_length(points: &[Point]) -> f64 {
    points
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .sum()
}

/// `n` points spaced uniformly by arc length along a polyline.
pub fn resample(points: &[Point], n: usize) -> Vec<Point> {
    if points.len() < 2 || n < 2 {
        return vec![points.first().copied().unwrap_or([0.0, 0.0]); n];
    }
    let total = polyline_length(points);
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut walked = 0.0;
    for k in 0..n {
        let target = total * k as f64 / (n - 1) as f64;
        loop {
            let (a, b) = (points[seg], points[seg + 1]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            if walked + len >= target - 1e-12 || seg + 2 == points.len() {
                let f = if len > 0.0 { ((target - walked) / len).clamp(0.0, 1.0) } else { 0.0 };
                out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
                break;
            }
            walked += len;
            seg += 1;
        }
    }
    out
}

impl LaneSegment {
    pub fn length(&self) -> f64 {
        polyline_length(&self.centerline)
    }

    /// Polygon formed by the left boundary and the reversed right boundary.
    fn polygon(&self) -> Vec<Point> {
        self.left
            .iter()
            .copied()
            .chain(self.right.iter().rev().copied())
            .collect()
    }

    pub fn contains(&self, x: Point) -> bool {
        let poly = self.polygon();
        let mut inside = false;
        let mut j = poly.len().wrapping_sub(1);
        for i in 0..poly.len() {
            let (pi, pj) = (poly[i], poly[j]);
            if (pi[1] > x[1]) != (pj[1] > x[1])
                && x[0] < (pj[0] - pi[0]) * (x[1] - pi[1]) / (pj[1] - pi[1]) + pi[0]
            {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn bbox(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in self.left.iter().chain(&self.right).chain(&self.centerline) {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        b
    }
}

/// Lane graph with a bounding-box index for point queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneGraph {
    segments: Vec<LaneSegment>,
    #[serde(skip)]
    by_id: HashMap<u32, usize>,
    #[serde(skip)]
    boxes: Vec<[f64; 4]>,
}

impl LaneGraph {
    /// Builds and validates a graph: ids unique, adjacency symmetric,
    /// predecessor/successor lists mutually consistent, centerlines non-degenerate.
    pub fn new(segments: Vec<LaneSegment>) -> Result<Self> {
        let mut by_id = HashMap::new();
        for (i, s) in segments.iter().enumerate() {
            if by_id.insert(s.id, i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate segment id {}", s.id)));
            }
        }
        for s in &segments {
            if !(s.length() > 0.0) {
                return Err(Error::InvalidArgument(format!("segment {} has zero-length centerline", s.id)));
            }
            let get = |id: &u32| {
                by_id
                    .get(id)
                    .map(|&i| &segments[i])
                    .ok_or_else(|| Error::InvalidArgument(format!("segment {} references unknown {id}", s.id)))
            };
            for a in &s.adjacent {
                if !get(a)?.adjacent.contains(&s.id) {
                    return Err(Error::InvalidArgument(format!("adjacency {}–{a} not symmetric", s.id)));
                }
            }
            for p in &s.predecessors {
                if !get(p)?.successors.contains(&s.id) {
                    return Err(Error::InvalidArgument(format!("{p} precedes {} but lacks it as successor", s.id)));
                }
            }
            for n in &s.successors {
                if !get(n)?.predecessors.contains(&s.id) {
                    return Err(Error::InvalidArgument(format!("{n} succeeds {} but lacks it as predecessor", s.id)));
                }
            }
        }
        let boxes = segments.iter().map(LaneSegment::bbox).collect();
        Ok(LaneGraph {
            segments,
            by_id,
            boxes,
        })
    }

    pub fn segments(&self) -> &[LaneSegment] {
        &self.segments
    }

    pub fn segment(&self, id: u32) -> Option<&LaneSegment> {
        self.by_id.get(&id).map(|&i| &self.segments[i])
    }

    pub fn segments_containing(&self, x: Point) -> Vec<u32> {
        self.segments
            .iter()
            .zip(&self.boxes)
            .filter(|(_, b)| x[0] >= b[0] && x[0] <= b[2] && x[1] >= b[1] && x[1] <= b[3])
            .filter(|(s, _)| s.contains(x))
            .map(|(s, _)| s.id)
            .collect()
    }

    /// Segments whose bounding box meets the square of half-width `d` around `x`.
    pub fn segments_in_box(&self, x: Point, d: f64) -> Vec<u32> {
        self.segments
            .iter()
            .zip(&self.boxes)
            .filter(|(_, b)| x[0] + d >= b[0] && x[0] - d <= b[2] && x[1] + d >= b[1] && x[1] - d <= b[3])
            .map(|(s, _)| s.id)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            segments: Vec<LaneSegment>,
        }
        let raw: Raw = serde_json::from_str(text)
            .map_err(|e| Error::parse(path, e.line(), "segments", e.to_string()))?;
        LaneGraph::new(raw.segments)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LaneGraph::from_json(&text, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiConfig {
    pub d_max: f64,
    pub d_init: f64,
}

impl RoiConfig {
    pub fn new(d_max: f64, d_init: f64) -> Result<Self> {
        if !(d_init > 0.0 && d_init <= d_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < d_init ≤ d_max, got d_init={d_init}, d_max={d_max}"
            )));
        }
        Ok(RoiConfig { d_max, d_init })
    }
}

#[derive(Debug, Clone, Copy)]
struct SearchNode {
    segment: u32,
    length: f64,
    distance: f64,
}

/// Traveling-distance bounded expansion over the lane graph.
///
/// Seeds are the segments containing `x` (or, failing that, those in a
/// bounding box of half-width `d_init`, doubled while below `d_max`). Adjacent
/// segments inherit the current distance; predecessors and successors add the
/// mean of both centerline lengths and are kept only within `d_max`. Returns
/// the minimum distance found per segment.
pub fn roi_graph_search(x: Point, config: RoiConfig, map: &LaneGraph) -> BTreeMap<u32, f64> {
    let mut seeds = map.segments_containing(x);
    let mut d_init = config.d_init;
    while seeds.is_empty() && d_init < config.d_max {
        seeds = map.segments_in_box(x, d_init);
        d_init *= 2.0;
    }
    let mut pool: VecDeque<SearchNode> = seeds
        .iter()
        .filter_map(|&id| map.segment(id))
        .map(|s| SearchNode {
            segment: s.id,
            length: s.length(),
            distance: 0.0,
        })
        .collect();
    let mut roi: BTreeMap<u32, f64> = BTreeMap::new();
    while let Some(node) = pool.pop_front() {
        let improved = match roi.get(&node.segment) {
            None => true,
            Some(&d) => d >= node.distance,
        };
        if !improved {
            continue;
        }
        let expand = roi.get(&node.segment).is_none_or(|&d| d > node.distance);
        roi.insert(node.segment, node.distance);
        if !expand {
            continue;
        }
        let Some(seg) = map.segment(node.segment) else { continue };
        for &child in &seg.adjacent {
            if let Some(c) = map.segment(child) {
                pool.push_back(SearchNode {
                    segment: child,
                    length: c.length(),
                    distance: node.distance,
                });
            }
        }
        for &child in seg.predecessors.iter().chain(&seg.successors) {
            if let Some(c) = map.segment(child) {
                let length = c.length();
                let distance = 0.5 * (length + node.length) + node.distance;
                if distance <= config.d_max {
                    pool.push_back(SearchNode {
                        segment: child,
                        length,
                        distance,
                    });
                }
            }
        }
    }
    roi
}

/// Per-frame headings from consecutive displacements; the first frame copies
/// the second.
pub fn frame_headings(track: &[Point]) -> Vec<f64> {
    let mut out: Vec<f64> = track
        .windows(2)
        .map(|w| (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]))
        .collect();
    if let Some(&first) = out.first() {
        out.insert(0, first);
    } else if !track.is_empty() {
        out.push(0.0);
    }
    out
}

/// Exponentially weighted heading estimate at the last frame.
///
/// Weights `λ^(T-1-t)` are normalized and applied to unit vectors, so a
/// constant heading is a fixed point and wrap-around is respected.
pub fn smooth_heading(headings: &[f64], lambda: f64) -> Result<f64> {
    if headings.is_empty() {
        return Err(Error::EmptyInput("smooth_heading"));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("forgetting factor must be in (0,1), got {lambda}")));
    }
    let last = headings.len() - 1;
    let (mut c, mut s) = (0.0, 0.0);
    let mut w = 1.0;
    for k in 0..=last {
        let psi = headings[last - k];
        c += w * psi.cos();
        s += w * psi.sin();
        w *= lambda;
    }
    Ok(s.atan2(c))
}

pub const DEFAULT_FORGETTING: f64 = 0.9;
