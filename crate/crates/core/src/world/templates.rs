//! Seeded scenario templates.
//!
//! Vehicles in the driving templates move along lane centerlines with
//! one-dimensional longitudinal dynamics. Interaction is delayed: a follower
//! reacts to its leader's state `reaction_delay` frames ago, and a yielding
//! vehicle judges the crossing vehicle's arrival from equally stale
//! observations. The leader or crossing vehicle changes its acceleration
//! during the observed window, so the interacting agent's history carries
//! information about the target's future that the target's own history lacks.
//!
//! Merge scenes bend the road by a random curvature a few meters ahead of the
//! target's last observed position, so the upcoming lane geometry is visible
//! in the map but not in the target's history.
//!
//! Masking a neighbor for the interactivity certificate removes it from the
//! target's perception for the whole episode (the target then cruises or
//! drives freely); all random draws stay identical.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Agent, FrameMode, Scene};
use crate::error::{Error, Result};
use crate::map::{roi_graph_search, LaneGraph, LaneSegment, Point, RoiConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    Merge,
    Intersection,
    OpenField,
}

impl Template {
    pub fn as_str(self) -> &'static str {
        match self {
            Template::Merge => "merge",
            Template::Intersection => "intersection",
            Template::OpenField => "open-field",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merge" => Ok(Template::Merge),
            "intersection" => Ok(Template::Intersection),
            "open-field" => Ok(Template::OpenField),
            other => Err(Error::InvalidArgument(format!(
                "unknown template `{other}` (expected merge, intersection or open-field)"
            ))),
        }
    }
}

/// Behavior and timing parameters of a template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTemplate {
    pub template: Template,
    pub dt: f64,
    pub history: usize,
    pub future: usize,
    pub min_agents: usize,
    pub max_agents: usize,
    /// Frames between a neighbor's state and the reaction to it.
    pub reaction_delay: usize,
    /// Speed-matching gain (1/s).
    pub following_gain: f64,
    /// Gap-keeping gain (1/s²).
    pub gap_gain: f64,
    /// Standard deviation of per-frame acceleration (or heading) noise.
    pub noise_scale: f64,
    /// Standard deviation of position observation noise (m).
    pub position_noise: f64,
    /// Largest road curvature (1/m) of the bend ahead of the target.
    pub max_curvature: f64,
}

impl ScenarioTemplate {
    pub fn new(template: Template) -> Self {
        match template {
            Template::Merge | Template::Intersection => ScenarioTemplate {
                template,
                dt: 0.1,
                history: 10,
                future: 30,
                min_agents: if template == Template::Merge { 4 } else { 3 },
                max_agents: if template == Template::Merge { 5 } else { 4 },
                reaction_delay: 6,
                following_gain: 0.8,
                gap_gain: 0.25,
                noise_scale: 0.15,
                position_noise: 0.01,
                max_curvature: if template == Template::Merge { 1.0 / 80.0 } else { 0.0 },
            },
            Template::OpenField => ScenarioTemplate {
                template,
                dt: 0.4,
                history: 8,
                future: 12,
                min_agents: 3,
                max_agents: 6,
                reaction_delay: 0,
                following_gain: 0.0,
                gap_gain: 0.0,
                noise_scale: 0.08,
                position_noise: 0.0,
                max_curvature: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.history < 2 || self.future < 1 {
            return bad(format!("need history ≥ 2 and future ≥ 1, got {}/{}", self.history, self.future));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        let (min, max) = match self.template {
            Template::Merge => (2, 5),
            Template::Intersection => (2, 4),
            Template::OpenField => (1, usize::MAX),
        };
        if self.min_agents < min || self.min_agents > self.max_agents || self.max_agents > max {
            return bad(format!(
                "agent range {}..={} invalid for {}",
                self.min_agents, self.max_agents, self.template
            ));
        }
        if self.template != Template::OpenField && self.reaction_delay < 1 {
            return bad("reaction delay must be at least one frame".into());
        }
        if self.noise_scale < 0.0 || self.position_noise < 0.0 || self.max_curvature < 0.0 {
            return bad("noise scales and curvature must be non-negative".into());
        }
        Ok(())
    }

    fn frames(&self) -> usize {
        self.history + self.future
    }
}

/// Polyline parametrized by arc length, extrapolated linearly past its ends.
#[derive(Debug, Clone)]
struct Path {
    points: Vec<Point>,
    cum: Vec<f64>,
}

impl Path {
    fn new(points: Vec<Point>) -> Self {
        let mut cum = vec![0.0];
        for w in points.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cum.push(cum.last().unwrap() + d);
        }
        Path { points, cum }
    }

    fn at(&self, s: f64) -> Point {
        let k = match self.cum.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => self.points.len() - 2,
        };
        let (a, b) = (self.points[k], self.points[k + 1]);
        let len = self.cum[k + 1] - self.cum[k];
        let f = (s - self.cum[k]) / len;
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    /// Arc length of the point closest to `x` among the polyline vertices'
    /// segments (used for conflict points that lie on the path).
    fn locate(&self, x: Point) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (k, w) in self.points.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let f = (((x[0] - a[0]) * d[0] + (x[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
            let p = [a[0] + f * d[0], a[1] + f * d[1]];
            let dist = (p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2);
            if dist < best.0 {
                best = (dist, self.cum[k] + f * len2.sqrt());
            }
        }
        best.1
    }
}

#[derive(Debug, Clone)]
enum Control {
    /// Constant speed until `onset`, then constant acceleration.
    Profile { onset: usize, accel: f64 },
    /// Delayed car following of vehicle `leader`.
    Follow { leader: usize, headway: f64 },
    /// Yields to vehicle `crossing` at a conflict point.
    Yield {
        crossing: usize,
        conflict: f64,
        crossing_conflict: f64,
        desired: f64,
    },
    Cruise,
}

#[derive(Debug, Clone)]
struct Vehicle {
    path: Path,
    s0: f64,
    v0: f64,
    control: Control,
    noise: Vec<f64>,
}

const MIN_GAP: f64 = 2.0;

/// Longitudinal states `(s, v)` per vehicle and frame. Vehicle `masked` is
/// invisible to every other vehicle's controller.
fn simulate(vehicles: &[Vehicle], tpl: &ScenarioTemplate, masked: Option<usize>) -> Vec<Vec<(f64, f64)>> {
    let frames = tpl.frames();
    let dt = tpl.dt;
    let delay = tpl.reaction_delay;
    let mut state: Vec<Vec<(f64, f64)>> = vehicles.iter().map(|v| vec![(v.s0, v.v0)]).collect();
    for t in 0..frames - 1 {
        let seen = t.saturating_sub(delay);
        let mut next = Vec::with_capacity(vehicles.len());
        for (i, veh) in vehicles.iter().enumerate() {
            let (s, v) = state[i][t];
            let visible = |j: usize| masked != Some(j);
            let a = match veh.control {
                Control::Profile { onset, accel } => {
                    if t >= onset {
                        accel
                    } else {
                        0.0
                    }
                }
                Control::Follow { leader, headway } if visible(leader) => {
                    let (sl, vl) = state[leader][seen];
                    let gap = sl - state[i][seen].0;
                    let a = tpl.following_gain * (vl - v) + tpl.gap_gain * (gap - MIN_GAP - headway * v);
                    a.clamp(-8.0, 3.0)
                }
                Control::Yield {
                    crossing,
                    conflict,
                    crossing_conflict,
                    desired,
                } => {
                    let free = (tpl.following_gain * (desired - v)).clamp(-3.0, 2.0);
                    let to_conflict = conflict - s;
                    if !visible(crossing) || to_conflict < 2.0 {
                        free
                    } else {
                        let (sc, vc) = state[crossing][seen];
                        let cleared = sc > crossing_conflict + 4.0;
                        let eta_c = ((crossing_conflict - sc) / vc.max(0.3) - delay as f64 * dt).max(0.0);
                        let eta_t = to_conflict / v.max(0.3);
                        if !cleared && eta_c < eta_t + 1.5 {
                            let to_stop = to_conflict - 8.0;
                            if to_stop > 0.5 {
                                (-v * v / (2.0 * to_stop)).clamp(-7.0, 0.0)
                            } else {
                                -7.0
                            }
                        } else {
                            free
                        }
                    }
                }
                Control::Follow { .. } | Control::Cruise => 0.0,
            } + veh.noise[t];
            let v1 = (v + a * dt).max(0.0);
            next.push((s + v1 * dt, v1));
        }
        for (i, st) in next.into_iter().enumerate() {
            state[i].push(st);
        }
    }
    state
}

fn tracks(vehicles: &[Vehicle], states: &[Vec<(f64, f64)>], obs: &[Vec<Point>], bend: &Bend) -> Vec<Vec<Point>> {
    vehicles
        .iter()
        .zip(states)
        .zip(obs)
        .map(|((veh, st), noise)| {
            st.iter()
                .zip(noise)
                .map(|(&(s, _), n)| {
                    let p = bend.apply(veh.path.at(s));
                    [p[0] + n[0], p[1] + n[1]]
                })
                .collect()
        })
        .collect()
}

const LANE_WIDTH: f64 = 3.6;

/// Bends a straight road: points with `x > start` are wrapped onto an arc of
/// curvature `kappa`, keeping their lateral offset `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Bend {
    start: f64,
    kappa: f64,
}

const BEND_STEP: f64 = 2.0;

impl Bend {
    const NONE: Bend = Bend { start: 0.0, kappa: 0.0 };

    fn apply(&self, p: Point) -> Point {
        let dx = p[0] - self.start;
        if dx <= 0.0 || self.kappa == 0.0 {
            return p;
        }
        let (s, c) = (self.kappa * dx).sin_cos();
        [self.start + s / self.kappa - p[1] * s, (1.0 - c) / self.kappa + p[1] * c]
    }

    /// Densifies `points` so the bent polyline follows the arc.
    fn polyline(&self, points: &[Point]) -> Vec<Point> {
        if self.kappa == 0.0 {
            return points.to_vec();
        }
        let mut out = vec![self.apply(points[0])];
        for w in points.windows(2) {
            let len = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            let n = (len / BEND_STEP).ceil().max(1.0) as usize;
            for k in 1..=n {
                let f = k as f64 / n as f64;
                out.push(self.apply([w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])]));
            }
        }
        out
    }

    fn map(&self, map: &LaneGraph) -> LaneGraph {
        if self.kappa == 0.0 {
            return map.clone();
        }
        let segs = map
            .segments()
            .iter()
            .map(|s| LaneSegment {
                centerline: self.polyline(&s.centerline),
                left: self.polyline(&s.left),
                right: self.polyline(&s.right),
                ..s.clone()
            })
            .collect();
        LaneGraph::new(segs).expect("bending keeps the graph consistent")
    }
}

/// Lane segment along a polyline, boundaries offset by half a lane width.
fn lane(id: u32, centerline: Vec<Point>, left_type: f64, right_type: f64, stop_sign: bool) -> LaneSegment {
    let h = LANE_WIDTH / 2.0;
    let offset = |side: f64| -> Vec<Point> {
        centerline
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let (a, b) = if k + 1 < centerline.len() {
                    (centerline[k], centerline[k + 1])
                } else {
                    (centerline[k - 1], centerline[k])
                };
                let d = [b[0] - a[0], b[1] - a[1]];
                let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
                [p[0] - side * h * d[1] / n, p[1] + side * h * d[0] / n]
            })
            .collect()
    };
    LaneSegment {
        id,
        left: offset(1.0),
        right: offset(-1.0),
        centerline,
        left_type,
        right_type,
        stop_sign,
        adjacent: vec![],
        predecessors: vec![],
        successors: vec![],
    }
}

fn link(segs: &mut [LaneSegment], from: u32, to: u32) {
    for s in segs.iter_mut() {
        if s.id == from {
            s.successors.push(to);
        }
        if s.id == to {
            s.predecessors.push(from);
        }
    }
}

fn adjoin(segs: &mut [LaneSegment], a: u32, b: u32) {
    for s in segs.iter_mut() {
        if s.id == a {
            s.adjacent.push(b);
        }
        if s.id == b {
            s.adjacent.push(a);
        }
    }
}

const MERGE_SEGMENTS: usize = 10;
const MERGE_SEG_LEN: f64 = 30.0;
const MERGE_X0: f64 = -150.0;

/// Two-lane road with an on-ramp joining the right lane.
pub fn merge_map() -> LaneGraph {
    let mut segs = Vec::new();
    for k in 0..MERGE_SEGMENTS {
        let x0 = MERGE_X0 + MERGE_SEG_LEN * k as f64;
        let x1 = x0 + MERGE_SEG_LEN;
        let ramp_side = k == 3 || k == 4;
        segs.push(lane(100 + k as u32, vec![[x0, 0.0], [x1, 0.0]], 0.0, if ramp_side { 0.0 } else { 1.0 }, false));
        segs.push(lane(200 + k as u32, vec![[x0, LANE_WIDTH], [x1, LANE_WIDTH]], 1.0, 0.0, false));
    }
    segs.push(lane(300, vec![[-120.0, -15.0], [-90.0, -8.0], [-60.0, -LANE_WIDTH]], 1.0, 1.0, false));
    segs.push(lane(301, vec![[-60.0, -LANE_WIDTH], [-30.0, -LANE_WIDTH]], 0.0, 1.0, false));
    segs.push(lane(302, vec![[-30.0, -LANE_WIDTH], [0.0, -LANE_WIDTH]], 0.0, 1.0, false));
    for k in 0..MERGE_SEGMENTS as u32 {
        if k + 1 < MERGE_SEGMENTS as u32 {
            link(&mut segs, 100 + k, 101 + k);
            link(&mut segs, 200 + k, 201 + k);
        }
        adjoin(&mut segs, 100 + k, 200 + k);
    }
    link(&mut segs, 300, 301);
    link(&mut segs, 301, 302);
    link(&mut segs, 302, 105);
    adjoin(&mut segs, 103, 301);
    adjoin(&mut segs, 104, 302);
    LaneGraph::new(segs).expect("merge map is consistent")
}

const BOX: f64 = 6.0;
const APPROACH: f64 = 30.0;

/// Four-way intersection of two two-way roads, right-hand traffic. The
/// west approach carries a stop sign.
pub fn intersection_map() -> LaneGraph {
    let h = LANE_WIDTH / 2.0;
    let stations = [-BOX - 2.0 * APPROACH, -BOX - APPROACH, -BOX, BOX, BOX + APPROACH, BOX + 2.0 * APPROACH];
    // (base id, direction unit vector, lateral offset vector)
    let roads: [(u32, Point, Point); 4] = [
        (10, [1.0, 0.0], [0.0, -h]),
        (20, [-1.0, 0.0], [0.0, h]),
        (30, [0.0, 1.0], [h, 0.0]),
        (40, [0.0, -1.0], [-h, 0.0]),
    ];
    let mut segs = Vec::new();
    for (base, d, off) in roads {
        for k in 0..5 {
            let a = stations[k];
            let b = stations[k + 1];
            let p = |s: f64| [d[0] * s + off[0], d[1] * s + off[1]];
            let stop = base == 10 && k == 1;
            let solid = if k == 2 { 0.0 } else { 1.0 };
            segs.push(lane(base + k as u32, vec![p(a), p(b)], 0.0, solid, stop));
        }
    }
    for (base, opposite) in [(10u32, 20u32), (30, 40)] {
        for k in 0..5u32 {
            if k < 4 {
                link(&mut segs, base + k, base + k + 1);
                link(&mut segs, opposite + k, opposite + k + 1);
            }
            adjoin(&mut segs, base + k, opposite + 4 - k);
        }
    }
    LaneGraph::new(segs).expect("intersection map is consistent")
}

fn centerline_path(map: &LaneGraph, ids: &[u32]) -> Path {
    let mut pts: Vec<Point> = Vec::new();
    for id in ids {
        for &p in &map.segment(*id).expect("segment").centerline {
            if pts.last() != Some(&p) {
                pts.push(p);
            }
        }
    }
    Path::new(pts)
}

struct Draw<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Draw<'_> {
    fn u(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    fn int(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    fn normals(&mut self, n: usize, sd: f64) -> Vec<f64> {
        if sd == 0.0 {
            return vec![0.0; n];
        }
        let d = Normal::new(0.0, sd).expect("finite sd");
        (0..n).map(|_| d.sample(self.rng)).collect()
    }

    fn points(&mut self, n: usize, sd: f64) -> Vec<Point> {
        let xs = self.normals(2 * n, sd);
        xs.chunks(2).map(|c| [c[0], c[1]]).collect()
    }
}

/// A sampled scene before masking: vehicles plus the index of the neighbor
/// whose history drives the target.
struct Sampled {
    vehicles: Vec<Vehicle>,
    obs: Vec<Vec<Point>>,
    neighbor: usize,
    /// Distance of the bend beyond the target's last observed position and
    /// its curvature.
    bend: (f64, f64),
}

fn sample_merge(d: &mut Draw, tpl: &ScenarioTemplate, map: &LaneGraph) -> Sampled {
    let frames = tpl.frames();
    let main: Vec<u32> = (100..100 + MERGE_SEGMENTS as u32).collect();
    let left: Vec<u32> = (200..200 + MERGE_SEGMENTS as u32).collect();
    let main_path = centerline_path(map, &main);
    let left_path = centerline_path(map, &left);
    let ramp_path = Path::new(vec![[-120.0, -15.0], [-90.0, -8.0], [-60.0, -LANE_WIDTH], [0.0, -LANE_WIDTH], [30.0, 0.0], [150.0, 0.0]]);
    let n = d.int(tpl.min_agents, tpl.max_agents);
    let latest_onset = tpl.history.saturating_sub(4).max(2);

    let s_t = d.u(70.0, 110.0);
    let v_t = d.u(8.0, 14.0);
    let h_t = d.u(0.8, 1.6);
    let s_l = s_t + MIN_GAP + h_t * v_t + d.u(-3.0, 5.0);
    let v_l = v_t + d.u(-1.5, 1.5);
    let onset_l = d.int(2, latest_onset);
    let accel_l = d.u(-4.0, 1.5);
    let s_b = s_t - d.u(12.0, 25.0);
    let v_b = v_t + d.u(-1.0, 1.0);
    let h_b = d.u(0.8, 1.6);
    let s_s = s_t + d.u(-25.0, 30.0);
    let v_s = d.u(8.0, 15.0);
    let onset_s = d.int(2, latest_onset);
    let accel_s = d.u(-3.0, 1.5);
    let s_r = d.u(20.0, 60.0);
    let v_r = d.u(8.0, 14.0);

    let mut vehicles = vec![
        Vehicle { path: main_path.clone(), s0: s_t, v0: v_t, control: Control::Follow { leader: 1, headway: h_t }, noise: vec![] },
        Vehicle { path: main_path.clone(), s0: s_l, v0: v_l, control: Control::Profile { onset: onset_l, accel: accel_l }, noise: vec![] },
        Vehicle { path: main_path, s0: s_b, v0: v_b, control: Control::Follow { leader: 0, headway: h_b }, noise: vec![] },
        Vehicle { path: left_path, s0: s_s, v0: v_s, control: Control::Profile { onset: onset_s, accel: accel_s }, noise: vec![] },
        Vehicle { path: ramp_path, s0: s_r, v0: v_r, control: Control::Cruise, noise: vec![] },
    ];
    vehicles.truncate(n);
    for v in &mut vehicles {
        v.noise = d.normals(frames, tpl.noise_scale);
    }
    let obs = vehicles.iter().map(|_| d.points(frames, tpl.position_noise)).collect();
    let bend = (d.u(0.0, 10.0), tpl.max_curvature * d.u(-1.0, 1.0));
    Sampled { vehicles, obs, neighbor: 1, bend }
}

fn sample_intersection(d: &mut Draw, tpl: &ScenarioTemplate, map: &LaneGraph) -> Sampled {
    let frames = tpl.frames();
    let path = |base: u32| centerline_path(map, &(base..base + 5).collect::<Vec<_>>());
    let (east, west, north) = (path(10), path(20), path(30));
    let start = 2.0 * APPROACH + BOX;
    let h = LANE_WIDTH / 2.0;
    let conflict = east.locate([h, -h]);
    let crossing_conflict = north.locate([h, -h]);
    let n = d.int(tpl.min_agents, tpl.max_agents);
    let latest_onset = tpl.history.saturating_sub(4).max(2);

    let s_t = start - d.u(35.0, 50.0);
    let v_t = d.u(6.0, 10.0);
    let desired = v_t + d.u(0.0, 2.0);
    let s_c = start - d.u(20.0, 45.0);
    let v_c = d.u(5.0, 11.0);
    let onset = d.int(2, latest_onset);
    let accel = d.u(-2.5, 2.5);
    let s_o = start - d.u(10.0, 50.0);
    let v_o = d.u(6.0, 11.0);
    let s_n = start + d.u(8.0, 30.0);
    let v_n = d.u(6.0, 11.0);

    let mut vehicles = vec![
        Vehicle {
            path: east,
            s0: s_t,
            v0: v_t,
            control: Control::Yield { crossing: 1, conflict, crossing_conflict, desired },
            noise: vec![],
        },
        Vehicle { path: north.clone(), s0: s_c, v0: v_c, control: Control::Profile { onset, accel }, noise: vec![] },
        Vehicle { path: west, s0: s_o, v0: v_o, control: Control::Cruise, noise: vec![] },
        Vehicle { path: north, s0: s_n, v0: v_n, control: Control::Cruise, noise: vec![] },
    ];
    vehicles.truncate(n);
    for v in &mut vehicles {
        v.noise = d.normals(frames, tpl.noise_scale);
    }
    let obs = vehicles.iter().map(|_| d.points(frames, tpl.position_noise)).collect();
    Sampled { vehicles, obs, neighbor: 1, bend: (0.0, 0.0) }
}

/// Independent walkers with persistent turn rates.
fn open_field_tracks(d: &mut Draw, tpl: &ScenarioTemplate) -> Vec<Vec<Point>> {
    let frames = tpl.frames();
    let n = d.int(tpl.min_agents, tpl.max_agents);
    (0..n)
        .map(|_| {
            let mut p = [d.u(-6.0, 6.0), d.u(-6.0, 6.0)];
            let mut heading = d.u(0.0, std::f64::consts::TAU);
            let mut speed = d.u(0.5, 1.6);
            let turn = d.u(-0.2, 0.2);
            let dh = d.normals(frames, tpl.noise_scale);
            let dv = d.normals(frames, tpl.noise_scale * 0.6);
            let mut track = Vec::with_capacity(frames);
            for t in 0..frames {
                track.push(p);
                heading += turn * tpl.dt + dh[t];
                speed = (speed + dv[t]).clamp(0.1, 2.2);
                p = [p[0] + speed * tpl.dt * heading.cos(), p[1] + speed * tpl.dt * heading.sin()];
            }
            track
        })
        .collect()
}

fn scene_from_tracks(id: u64, tpl: &ScenarioTemplate, tracks: Vec<Vec<Point>>, map: Option<&LaneGraph>) -> Scene {
    let agents: Vec<Agent> = tracks
        .into_iter()
        .enumerate()
        .map(|(i, t)| Agent {
            id: i as u32,
            history: t[..tpl.history].to_vec(),
            future: t[tpl.history..].to_vec(),
        })
        .collect();
    let lanes = map
        .map(|m| {
            let h = &agents[0].history;
            let last = *h.last().expect("history");
            let travelled = h.windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).sum::<f64>();
            let config = RoiConfig::new(20.0 + 3.0 * travelled, 1.0).expect("positive budget");
            roi_graph_search(last, config, m)
                .keys()
                .filter_map(|&sid| m.segment(sid).cloned())
                .collect()
        })
        .unwrap_or_default();
    Scene {
        id,
        template: tpl.template,
        mode: if tpl.template == Template::OpenField { FrameMode::Pedestrian } else { FrameMode::Driving },
        dt: tpl.dt,
        target: 0,
        frame: super::Frame::IDENTITY,
        agents,
        lanes,
    }
}

fn map_for(template: Template) -> Option<LaneGraph> {
    match template {
        Template::Merge => Some(merge_map()),
        Template::Intersection => Some(intersection_map()),
        Template::OpenField => None,
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64))
}

/// Actual and neighbor-masked tracks for scene `index`, with the scene's
/// bend.
fn sample_pair(tpl: &ScenarioTemplate, map: Option<&LaneGraph>, seed: u64, index: usize) -> (Vec<Vec<Point>>, Vec<Vec<Point>>, Bend) {
    let mut rng = scene_rng(seed, index);
    let mut d = Draw { rng: &mut rng };
    match tpl.template {
        Template::OpenField => {
            let t = open_field_tracks(&mut d, tpl);
            (t.clone(), t, Bend::NONE)
        }
        Template::Merge | Template::Intersection => {
            let m = map.expect("driving templates have maps");
            let s = if tpl.template == Template::Merge {
                sample_merge(&mut d, tpl, m)
            } else {
                sample_intersection(&mut d, tpl, m)
            };
            let states = simulate(&s.vehicles, tpl, None);
            let bend = if s.bend.1 == 0.0 {
                Bend::NONE
            } else {
                let last = s.vehicles[0].path.at(states[0][tpl.history - 1].0);
                Bend {
                    start: last[0] + s.bend.0,
                    kappa: s.bend.1,
                }
            };
            let actual = tracks(&s.vehicles, &states, &s.obs, &bend);
            let masked = tracks(&s.vehicles, &simulate(&s.vehicles, tpl, Some(s.neighbor)), &s.obs, &bend);
            (actual, masked, bend)
        }
    }
}

/// Generates `count` scenes in world coordinates; scene `i` is seeded with
/// `seed + i`.
pub fn generate(tpl: &ScenarioTemplate, count: usize, seed: u64) -> Result<Vec<Scene>> {
    tpl.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("scene count must be at least 1".into()));
    }
    let map = map_for(tpl.template);
    Ok((0..count)
        .map(|i| {
            let (actual, _, bend) = sample_pair(tpl, map.as_ref(), seed, i);
            let bent = map.as_ref().map(|m| bend.map(m));
            scene_from_tracks(i as u64, tpl, actual, bent.as_ref())
        })
        .collect())
}

/// Ground-truth sensitivity of the target's future to its key neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub template: Template,
    pub scenes: usize,
    /// Mean final displacement between actual and neighbor-masked futures (m).
    pub mean_fde: f64,
    pub threshold: f64,
}

impl Certificate {
    /// Interactive templates must exceed the threshold; the open-field control
    /// must be exactly insensitive.
    pub fn passed(&self) -> bool {
        match self.template {
            Template::OpenField => self.mean_fde == 0.0,
            _ => self.mean_fde > self.threshold,
        }
    }
}

pub const CERTIFICATE_THRESHOLD: f64 = 0.5;

/// Re-simulates scenes `0..count` of `seed` with the target's key neighbor
/// masked and compares target futures.
pub fn certificate(tpl: &ScenarioTemplate, count: usize, seed: u64) -> Result<Certificate> {
    tpl.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("scene count must be at least 1".into()));
    }
    let map = map_for(tpl.template);
    let total: f64 = (0..count)
        .map(|i| {
            let (a, m, _) = sample_pair(tpl, map.as_ref(), seed, i);
            let (p, q) = (a[0].last().unwrap(), m[0].last().unwrap());
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        })
        .sum();
    Ok(Certificate {
        template: tpl.template,
        scenes: count,
        mean_fde: total / count as f64,
        threshold: CERTIFICATE_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_are_consistent() {
        assert_eq!(merge_map().segments().len(), 23);
        assert_eq!(intersection_map().segments().len(), 20);
    }

    #[test]
    fn generation_is_deterministic() {
        for t in [Template::Merge, Template::Intersection, Template::OpenField] {
            let tpl = ScenarioTemplate::new(t);
            let a = generate(&tpl, 3, 11).unwrap();
            assert_eq!(a, generate(&tpl, 3, 11).unwrap());
            assert_ne!(a, generate(&tpl, 3, 12).unwrap());
            for s in &a {
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn scene_seeds_are_offsets() {
        let tpl = ScenarioTemplate::new(Template::Merge);
        let a = generate(&tpl, 3, 5).unwrap();
        let b = generate(&tpl, 2, 6).unwrap();
        assert_eq!(a[1].agents, b[0].agents);
    }

    #[test]
    fn certificates() {
        let merge = certificate(&ScenarioTemplate::new(Template::Merge), 40, 1).unwrap();
        assert!(merge.passed(), "{merge:?}");
        let inter = certificate(&ScenarioTemplate::new(Template::Intersection), 40, 1).unwrap();
        assert!(inter.passed(), "{inter:?}");
        let open = certificate(&ScenarioTemplate::new(Template::OpenField), 40, 1).unwrap();
        assert_eq!(open.mean_fde, 0.0);
    }

    #[test]
    fn driving_scenes_carry_lanes() {
        let s = generate(&ScenarioTemplate::new(Template::Merge), 5, 2).unwrap();
        assert!(s.iter().all(|s| !s.lanes.is_empty()));
        let p = generate(&ScenarioTemplate::new(Template::OpenField), 5, 2).unwrap();
        assert!(p.iter().all(|s| s.lanes.is_empty() && s.mode == FrameMode::Pedestrian));
    }

    #[test]
    fn zero_count_and_bad_templates_rejected() {
        assert!(generate(&ScenarioTemplate::new(Template::Merge), 0, 1).is_err());
        let mut t = ScenarioTemplate::new(Template::Merge);
        t.reaction_delay = 0;
        assert!(generate(&t, 1, 1).is_err());
        assert!("roundabout".parse::<Template>().is_err());
    }

    #[test]
    fn bend_keeps_offsets_and_arc_length() {
        let b = Bend { start: 10.0, kappa: 0.02 };
        assert_eq!(b.apply([5.0, 1.0]), [5.0, 1.0]);
        let r = 1.0 / b.kappa;
        for x in [20.0, 60.0, 120.0] {
            for y in [-3.6, 0.0, 3.6] {
                let p = b.apply([x, y]);
                let dist = ((p[0] - b.start).powi(2) + (p[1] - r).powi(2)).sqrt();
                assert!((dist - (r - y)).abs() < 1e-9);
            }
        }
        let line = b.polyline(&[[0.0, 0.0], [60.0, 0.0]]);
        let len: f64 = line.windows(2).map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt()).sum();
        assert!((len - 60.0).abs() < 0.05);
        assert_eq!(Bend::NONE.apply([3.0, 4.0]), [3.0, 4.0]);
    }

    #[test]
    fn path_interpolates_and_extrapolates() {
        let p = Path::new(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]);
        assert_eq!(p.at(5.0), [5.0, 0.0]);
        assert_eq!(p.at(15.0), [10.0, 5.0]);
        assert_eq!(p.at(25.0), [10.0, 15.0]);
        assert_eq!(p.at(-1.0), [-1.0, 0.0]);
        assert!((p.locate([10.0, 3.0]) - 13.0).abs() < 1e-12);
    }
}
