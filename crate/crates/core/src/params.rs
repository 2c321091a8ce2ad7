//! Named parameter collections and their checkpoint layout.
//!
//! # Checkpoint layout
//!
//! Plain UTF-8 text, one record per line:
//!
//! ```text
//! socvae-params 1
//! count <n>
//! <name> <rank> <d1> .. <dk> : <v1> <v2> ..
//! ```
//!
//! Records appear in insertion order. Values are written in shortest
//! round-trip scientific notation (`{:e}`), so a save/load cycle is exact and
//! identical parameters always produce identical bytes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const PARAMS_MAGIC: &str = "socvae-params 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Parameters recorded on one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Adds a `[rows, cols]` matrix drawn uniformly from `±1/sqrt(rows)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data).expect("sized"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|t| tape.param(t))
                .collect(),
        }
    }

    /// Per-parameter gradients from a backward pass (zeros where unreached).
    pub fn collect_grads(&self, grads: &Gradients, bound: &Bound) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| match grads.wrt(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.len()],
            })
            .collect()
    }

    /// All values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.numel());
        let mut off = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{PARAMS_MAGIC}").unwrap();
        writeln!(out, "count {}", self.values.len()).unwrap();
        for (name, t) in self.names.iter().zip(&self.values) {
            write!(out, "{name} {}", t.shape().len()).unwrap();
            for d in t.shape() {
                write!(out, " {d}").unwrap();
            }
            out.push_str(" :");
            for v in t.data() {
                write!(out, " {v:e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses the layout written by [`ParamStore::to_text`]. `first_line` is
    /// the 1-based line number of the magic line inside `path`, for messages.
    pub fn from_lines<'a>(
        lines: &mut impl Iterator<Item = &'a str>,
        path: &Path,
        first_line: usize,
    ) -> Result<Self> {
        let mut lineno = first_line;
        let magic = lines
            .next()
            .ok_or_else(|| Error::parse(path, lineno, "magic", "missing header"))?;
        if magic.trim() != PARAMS_MAGIC {
            return Err(Error::parse(path, lineno, "magic", format!("expected `{PARAMS_MAGIC}`")));
        }
        lineno += 1;
        let count_line = lines
            .next()
            .ok_or_else(|| Error::parse(path, lineno, "count", "missing"))?;
        let count: usize = count_line
            .strip_prefix("count ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::parse(path, lineno, "count", "expected `count <n>`"))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            lineno += 1;
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(path, lineno, "record", "truncated checkpoint"))?;
            let (head, vals) = line
                .split_once(" :")
                .ok_or_else(|| Error::parse(path, lineno, "record", "missing ` :` separator"))?;
            let mut it = head.split_whitespace();
            let name = it
                .next()
                .ok_or_else(|| Error::parse(path, lineno, "name", "missing"))?;
            let rank: usize = it
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| Error::parse(path, lineno, "rank", "not an integer"))?;
            let shape: Vec<usize> = it
                .map(|d| d.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, lineno, "shape", "not an integer"))?;
            if shape.len() != rank {
                return Err(Error::parse(path, lineno, "shape", format!("expected {rank} extents")));
            }
            let data: Vec<f64> = vals
                .split_whitespace()
                .map(|v| v.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, lineno, name, "bad value"))?;
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::parse(path, lineno, name, e.to_string()))?;
            store.add(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        ParamStore::from_lines(&mut lines, path, 1)
    }
}
