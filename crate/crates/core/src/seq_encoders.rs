//! GRU sequence encoders for agent tracks and lanelet boundaries.
//!
//! Track inputs are the absolute first point followed by per-step
//! displacements, in the scene's normalized frame. The first point is divided
//! by the position scale and displacements by the (smaller) step scale so both
//! enter the network at order one. Lanelet inputs concatenate the left and
//! right boundary features point by point.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Boundary points sampled per lanelet side.
pub const BOUNDARY_POINTS: usize = 8;
/// Features per boundary point: x, y, boundary-type flag, stop-sign flag.
pub const BOUNDARY_FEATURES: usize = 4;

/// Gated recurrent unit with fused gate matrices (reset | update | candidate).
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_x: ParamId,
    pub b_x: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_x = store.add_uniform(format!("{name}.w_x"), input, 3 * hidden, rng);
        let b_x = store.add(format!("{name}.b_x"), Tensor::zeros(&[1, 3 * hidden]));
        let w_h = store.add_uniform(format!("{name}.w_h"), hidden, 3 * hidden, rng);
        let b_h = store.add(format!("{name}.b_h"), Tensor::zeros(&[1, 3 * hidden]));
        GruCell {
            w_x,
            b_x,
            w_h,
            b_h,
            input,
            hidden,
        }
    }

    /// Input projection `x W_x + b_x` for any number of stacked rows.
    pub fn project_input(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, p.var(self.w_x))?;
        tape.add_row(xw, p.var(self.b_x))
    }

    /// One step from a precomputed input projection.
    pub fn step_projected(&self, tape: &mut Tape, p: &Bound, h: Var, gx: Var) -> Result<Var> {
        let hw = tape.matmul(h, p.var(self.w_h))?;
        let gh = tape.add_row(hw, p.var(self.b_h))?;
        tape.gru_gates(gx, gh, h)
    }

    /// `h' = GRU(h, x)`.
    pub fn step(&self, tape: &mut Tape, p: &Bound, h: Var, x: Var) -> Result<Var> {
        let gx = self.project_input(tape, p, x)?;
        self.step_projected(tape, p, h, gx)
    }

    /// Runs over `steps` blocks of `rows` stacked time-major in `inputs`
    /// (`[steps * rows, input]`) from a zero state; returns the final state.
    pub fn run(&self, tape: &mut Tape, p: &Bound, inputs: Var, rows: usize, steps: usize) -> Result<Var> {
        if steps == 0 {
            return Err(Error::EmptyInput("gru sequence"));
        }
        let gx_all = self.project_input(tape, p, inputs)?;
        let mut h = tape.constant(Tensor::zeros(&[rows, self.hidden]));
        for t in 0..steps {
            let gx = tape.slice_rows(gx_all, t * rows, (t + 1) * rows)?;
            h = self.step_projected(tape, p, h, gx)?;
        }
        Ok(h)
    }
}

/// Input scaling for tracks: absolute positions and per-step displacements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackScale {
    pub position: f64,
    pub step: f64,
}

impl TrackScale {
    pub const UNIT: TrackScale = TrackScale {
        position: 1.0,
        step: 1.0,
    };
}

/// Builds time-major GRU inputs from `[n, 2T]` position rows
/// (`x0 y0 x1 y1 ..`): step 0 is the first point, later steps the displacement.
pub fn track_inputs(tape: &mut Tape, positions: Var, steps: usize, scale: TrackScale) -> Result<Var> {
    if steps == 0 {
        return Err(Error::EmptyInput("track"));
    }
    if tape.value(positions).cols() != 2 * steps {
        return Err(Error::ShapeMismatch {
            op: "track_inputs",
            left: tape.shape(positions).to_vec(),
            right: vec![2 * steps],
        });
    }
    let mut blocks = Vec::with_capacity(steps);
    let mut prev = tape.slice_cols(positions, 0, 2)?;
    blocks.push(tape.scale(prev, 1.0 / scale.position));
    for t in 1..steps {
        let cur = tape.slice_cols(positions, 2 * t, 2 * t + 2)?;
        let d = tape.sub(cur, prev)?;
        blocks.push(tape.scale(d, 1.0 / scale.step));
        prev = cur;
    }
    tape.concat_rows(&blocks)
}

/// GRU encoder over agent tracks.
#[derive(Debug, Clone)]
pub struct TrackEncoder {
    pub gru: GruCell,
}

impl TrackEncoder {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut impl Rng) -> Self {
        TrackEncoder {
            gru: GruCell::new(store, name, 2, hidden, rng),
        }
    }

    /// Encodes `[n, 2T]` track rows into `[n, hidden]` embeddings.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, positions: Var, steps: usize, scale: TrackScale) -> Result<Var> {
        let rows = tape.value(positions).rows();
        let inputs = track_inputs(tape, positions, steps, scale)?;
        self.gru.run(tape, p, inputs, rows, steps)
    }

    /// Embedding of a single `T × 2` track.
    pub fn encode_track(&self, store: &ParamStore, points: &[[f64; 2]], scale: TrackScale) -> Result<Vec<f64>> {
        if points.is_empty() {
            return Err(Error::EmptyInput("track"));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let flat = points.iter().flatten().copied().collect();
        let pos = tape.constant(Tensor::matrix(1, 2 * points.len(), flat)?);
        let h = self.encode(&mut tape, &p, pos, points.len(), scale)?;
        Ok(tape.value(h).data().to_vec())
    }
}

/// Per-point boundary features, `[B, F]`.
pub type Boundary = Vec<[f64; BOUNDARY_FEATURES]>;

/// Time-major rows `[B * n, 2F]` for lanelets given as (left, right) boundaries.
/// Coordinates are divided by `scale`; flags pass through unchanged.
pub fn lanelet_inputs(lanelets: &[(&Boundary, &Boundary)], scale: f64) -> Result<(Tensor, usize)> {
    let first = lanelets.first().ok_or(Error::EmptyInput("lanelets"))?;
    let b = first.0.len();
    if b == 0 {
        return Err(Error::EmptyInput("lanelet boundary"));
    }
    for (l, r) in lanelets {
        if l.len() != r.len() || l.len() != b {
            return Err(Error::ShapeMismatch {
                op: "encode_lanelet",
                left: vec![l.len(), BOUNDARY_FEATURES],
                right: vec![r.len(), BOUNDARY_FEATURES],
            });
        }
    }
    let n = lanelets.len();
    let width = 2 * BOUNDARY_FEATURES;
    let mut data = Vec::with_capacity(b * n * width);
    for t in 0..b {
        for (l, r) in lanelets {
            for side in [&l[t], &r[t]] {
                data.extend_from_slice(&[side[0] / scale, side[1] / scale, side[2], side[3]]);
            }
        }
    }
    Ok((Tensor::matrix(b * n, width, data)?, b))
}

/// GRU encoder over lanelet boundary pairs.
#[derive(Debug, Clone)]
pub struct LaneletEncoder {
    pub gru: GruCell,
}

impl LaneletEncoder {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut impl Rng) -> Self {
        LaneletEncoder {
            gru: GruCell::new(store, name, 2 * BOUNDARY_FEATURES, hidden, rng),
        }
    }

    /// Encodes time-major lanelet inputs (see [`lanelet_inputs`]).
    pub fn encode(&self, tape: &mut Tape, p: &Bound, inputs: Var, lanelets: usize, points: usize) -> Result<Var> {
        self.gru.run(tape, p, inputs, lanelets, points)
    }

    /// Embedding of one lanelet.
    pub fn encode_lanelet(&self, store: &ParamStore, left: &Boundary, right: &Boundary, scale: f64) -> Result<Vec<f64>> {
        let (inputs, b) = lanelet_inputs(&[(left, right)], scale)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(inputs);
        let h = self.encode(&mut tape, &p, x, 1, b)?;
        Ok(tape.value(h).data().to_vec())
    }
}
