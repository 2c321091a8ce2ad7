//! Scenes, coordinate frames and the scene dataset format.
//!
//! # Dataset file
//!
//! UTF-8, one JSON document per line. Line 1 is the header:
//!
//! ```text
//! {"format":"socvae-scenes","version":1,"count":N,"template":"merge","seed":7,
//!  "rng":"ChaCha8 (rand_chacha 0.9) seeded with seed_from_u64(seed + index)"}
//! ```
//!
//! Each of the following `count` lines is one [`Scene`]:
//!
//! ```text
//! {"id":0,"template":"merge","mode":"driving","dt":0.1,"target":0,
//!  "frame":{"origin":[x,y],"rotation":r},
//!  "agents":[{"id":0,"history":[[x,y],..],"future":[[x,y],..]},..],
//!  "lanes":[<lane segment, see map module>,..]}
//! ```
//!
//! `frame` maps scene coordinates back to world coordinates:
//! `world = R(rotation) · p + origin`. Generated scenes are written in world
//! coordinates (identity frame). Floats are written with round-trip precision.

mod templates;

pub use templates::{certificate, generate, intersection_map, merge_map, Certificate, ScenarioTemplate, Template};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{frame_headings, smooth_heading, LaneSegment, Point, DEFAULT_FORGETTING};

pub const DATASET_FORMAT: &str = "socvae-scenes";
pub const DATASET_VERSION: u32 = 1;
pub const RNG_DESCRIPTION: &str = "ChaCha8 (rand_chacha 0.9) seeded with seed_from_u64(seed + index)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u32,
    pub history: Vec<Point>,
    pub future: Vec<Point>,
}

/// Driving scenes are target-centric and predict the target only;
/// pedestrian scenes are mean-centred and predict every agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    Driving,
    Pedestrian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub origin: Point,
    pub rotation: f64,
}

impl Frame {
    pub const IDENTITY: Frame = Frame {
        origin: [0.0, 0.0],
        rotation: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub template: Template,
    pub mode: FrameMode,
    pub dt: f64,
    pub target: u32,
    pub frame: Frame,
    pub agents: Vec<Agent>,
    #[serde(default)]
    pub lanes: Vec<LaneSegment>,
}

fn rotate(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

impl Scene {
    pub fn history_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.history.len())
    }

    pub fn future_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.future.len())
    }

    pub fn agent_index(&self, id: u32) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    pub fn target_index(&self) -> Result<usize> {
        self.agent_index(self.target)
            .ok_or_else(|| Error::InvalidArgument(format!("scene {}: target {} missing", self.id, self.target)))
    }

    /// Indices of agents whose futures are predicted.
    pub fn predicted(&self) -> Result<Vec<usize>> {
        match self.mode {
            FrameMode::Driving => Ok(vec![self.target_index()?]),
            FrameMode::Pedestrian => Ok((0..self.agents.len()).collect()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (th, tp) = (self.history_len(), self.future_len());
        if th < 2 || tp < 1 {
            return Err(Error::InvalidArgument(format!(
                "scene {}: need history ≥ 2 and future ≥ 1, got {th} and {tp}",
                self.id
            )));
        }
        for a in &self.agents {
            if a.history.len() != th || a.future.len() != tp {
                return Err(Error::InvalidArgument(format!(
                    "scene {}: agent {} has horizons {}/{} instead of {th}/{tp}",
                    self.id,
                    a.id,
                    a.history.len(),
                    a.future.len()
                )));
            }
        }
        for l in &self.lanes {
            if l.left.len() < 2 || l.right.len() < 2 {
                return Err(Error::InvalidArgument(format!("scene {}: lane {} lacks boundaries", self.id, l.id)));
            }
        }
        self.target_index().map(|_| ())
    }

    /// Applies `p ↦ R(angle)·p + shift` to every coordinate.
    fn map_points(&mut self, angle: f64, shift: Point) {
        let f = |p: &mut Point| {
            let r = rotate(*p, angle);
            *p = [r[0] + shift[0], r[1] + shift[1]];
        };
        for a in &mut self.agents {
            a.history.iter_mut().chain(a.future.iter_mut()).for_each(f);
        }
        for l in &mut self.lanes {
            l.centerline.iter_mut().chain(l.left.iter_mut()).chain(l.right.iter_mut()).for_each(f);
        }
    }

    /// Re-expresses the scene in its normalized frame: target-centric with
    /// zero smoothed heading (driving) or centred on the mean last observed
    /// position (pedestrian). The composed inverse is kept in `frame`.
    pub fn normalize(&self, target: u32) -> Result<Scene> {
        let ti = self
            .agent_index(target)
            .ok_or_else(|| Error::InvalidArgument(format!("scene {}: target {target} missing", self.id)))?;
        let (origin, heading) = match self.mode {
            FrameMode::Driving => {
                let h = &self.agents[ti].history;
                let last = *h.last().ok_or(Error::EmptyInput("target history"))?;
                (last, smooth_heading(&frame_headings(h), DEFAULT_FORGETTING)?)
            }
            FrameMode::Pedestrian => {
                let n = self.agents.len() as f64;
                let mut m = [0.0, 0.0];
                for a in &self.agents {
                    let p = a.history.last().ok_or(Error::EmptyInput("agent history"))?;
                    m[0] += p[0] / n;
                    m[1] += p[1] / n;
                }
                (m, 0.0)
            }
        };
        let mut out = self.clone();
        out.target = target;
        out.map_points(0.0, [-origin[0], -origin[1]]);
        out.map_points(-heading, [0.0, 0.0]);
        let o = rotate(origin, self.frame.rotation);
        out.frame = Frame {
            origin: [self.frame.origin[0] + o[0], self.frame.origin[1] + o[1]],
            rotation: self.frame.rotation + heading,
        };
        Ok(out)
    }

    /// Back to world coordinates with the identity frame.
    pub fn denormalize(&self) -> Scene {
        let mut out = self.clone();
        out.map_points(self.frame.rotation, self.frame.origin);
        out.frame = Frame::IDENTITY;
        out
    }

    /// Rotates all coordinates by `angle` about the frame origin.
    pub fn rotated(&self, angle: f64) -> Scene {
        let mut out = self.clone();
        out.map_points(angle, [0.0, 0.0]);
        out.frame.rotation -= angle;
        out
    }

    /// Rotation by an angle drawn uniformly from `[0, 2π)` with `seed`.
    pub fn augment_rotate(&self, seed: u64) -> Scene {
        let angle = ChaCha8Rng::seed_from_u64(seed).random_range(0.0..std::f64::consts::TAU);
        self.rotated(angle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub template: Option<Template>,
    pub seed: Option<u64>,
    pub rng: String,
}

impl DatasetHeader {
    pub fn new(count: usize, template: Option<Template>, seed: Option<u64>) -> Self {
        DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            count,
            template,
            seed,
            rng: RNG_DESCRIPTION.into(),
        }
    }
}

pub fn dataset_to_string(header: &DatasetHeader, scenes: &[Scene]) -> String {
    let mut out = serde_json::to_string(header).expect("serializable");
    out.push('\n');
    for s in scenes {
        out.push_str(&serde_json::to_string(s).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, template: Option<Template>, seed: Option<u64>, scenes: &[Scene]) -> Result<()> {
    let header = DatasetHeader::new(scenes.len(), template, seed);
    crate::io::write_atomic(path, dataset_to_string(&header, scenes).as_bytes())
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, path: &Path, lineno: usize) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::parse(path, lineno, &field, e.into_inner().to_string())
    })
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<(DatasetHeader, Vec<Scene>)> {
    let mut lines = text.lines();
    let header: DatasetHeader = parse_line(
        lines.next().ok_or_else(|| Error::parse(path, 1, "header", "empty file"))?,
        path,
        1,
    )?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::parse(
            path,
            1,
            "format",
            format!("expected {DATASET_FORMAT} version {DATASET_VERSION}"),
        ));
    }
    let mut scenes = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = parse_line(line, path, lineno)?;
        scene
            .validate()
            .map_err(|e| Error::parse(path, lineno, "scene", e.to_string()))?;
        scenes.push(scene);
    }
    if scenes.len() != header.count {
        return Err(Error::parse(
            path,
            text.lines().count() + 1,
            "count",
            format!("header promises {} scenes, found {} (truncated?)", header.count, scenes.len()),
        ));
    }
    Ok((header, scenes))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Scene>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_dataset(&text, path)?.1)
}
