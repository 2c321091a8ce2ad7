//! Exact 1.5-entmax.
//!
//! `p = [s/2 - τ]₊²` where `τ` is the unique threshold making `p` sum to one.
//! The threshold is found exactly by sorting the half-scores and scanning
//! support sizes with the running top-ρ mean and unnormalized variance:
//!
//! ```text
//! M(ρ) = mean of the top ρ half-scores
//! S(ρ) = Σ_{j≤ρ} (x_[j] - M(ρ))²
//! τ(ρ) = M(ρ) - sqrt((1 - S(ρ)) / ρ)   if S(ρ) ≤ 1, else +∞
//! ```
//!
//! The support size is the largest ρ with `τ(ρ) ≤ x_[ρ]`.
//!
//! Appending a coordinate at least 2 below the current minimum never changes
//! the output and receives exactly zero mass, which is what makes padding
//! variable-degree neighborhoods with a dummy value safe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{argsort_desc, Segments};

/// Sorted threshold scan of one score vector.
///
/// All statistics are computed on the half-scores `x = s / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdScan {
    /// Original indices in descending score order (ties by ascending index).
    pub order: Vec<usize>,
    /// Half-scores in descending order.
    pub sorted: Vec<f64>,
    /// `mean[ρ-1] = M(ρ)`.
    pub mean: Vec<f64>,
    /// `var[ρ-1] = S(ρ)`.
    pub var: Vec<f64>,
    /// `tau[ρ-1] = τ(ρ)`, `+∞` where `S(ρ) > 1`.
    pub tau: Vec<f64>,
    /// Selected support size ρ*.
    pub support: usize,
    /// The threshold τ(ρ*).
    pub threshold: f64,
}

impl ThresholdScan {
    pub fn new(s: &[f64]) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::EmptyInput("entmax15"));
        }
        let order = argsort_desc(s);
        let sorted: Vec<f64> = order.iter().map(|&i| s[i] / 2.0).collect();
        let d = sorted.len();
        let mut mean = Vec::with_capacity(d);
        let mut var = Vec::with_capacity(d);
        let mut tau = Vec::with_capacity(d);
        let (mut m, mut ss) = (0.0_f64, 0.0_f64);
        let mut support = 1;
        for (k, &x) in sorted.iter().enumerate() {
            let rho = (k + 1) as f64;
            // Welford update of the running mean and sum of squared deviations.
            let prev = m;
            m += (x - prev) / rho;
            ss += (x - prev) * (x - m);
            mean.push(m);
            var.push(ss);
            let t = if ss <= 1.0 {
                m - ((1.0 - ss) / rho).sqrt()
            } else {
                f64::INFINITY
            };
            tau.push(t);
            if t <= x {
                support = k + 1;
            }
        }
        let threshold = tau[support - 1];
        Ok(ThresholdScan {
            order,
            sorted,
            mean,
            var,
            tau,
            support,
            threshold,
        })
    }
}

/// 1.5-entmax of a score vector.
pub fn entmax15(s: &[f64]) -> Result<Vec<f64>> {
    let scan = ThresholdScan::new(s)?;
    Ok(s
        .iter()
        .map(|&v| {
            let u = v / 2.0 - scan.threshold;
            if u > 0.0 {
                u * u
            } else {
                0.0
            }
        })
        .collect())
}

/// Reference 1.5-entmax by bisection on the threshold: `Σ [s/2 - τ]₊²` is
/// decreasing in `τ` and equals one somewhere in `[max/2 - 1, max/2]`.
pub fn entmax15_bisect(s: &[f64], iterations: usize) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    let half: Vec<f64> = s.iter().map(|v| v / 2.0).collect();
    let max = half.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mass = |tau: f64| half.iter().map(|&x| (x - tau).max(0.0).powi(2)).sum::<f64>();
    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    let p: Vec<f64> = half.iter().map(|&x| (x - tau).max(0.0).powi(2)).collect();
    let z: f64 = p.iter().sum();
    Ok(p.into_iter().map(|v| v / z).collect())
}

/// Vector-Jacobian product of 1.5-entmax at output `p`.
///
/// With `g = sqrt(p)` the Jacobian is `diag(g) - g gᵀ / Σg`, so
/// `ds = g ⊙ upstream - g · (gᵀ upstream) / Σg`. Coordinates sitting exactly
/// on the threshold have `p = 0` and are treated as inactive, which selects the
/// smaller-support one-sided derivative.
pub fn entmax15_vjp(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = p.iter().map(|v| v.max(0.0).sqrt()).collect();
    let gsum: f64 = g.iter().sum();
    if gsum == 0.0 {
        return vec![0.0; p.len()];
    }
    let q = g.iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>() / gsum;
    g.iter()
        .zip(upstream)
        .map(|(gi, ui)| gi * ui - gi * q)
        .collect()
}

/// Variable-width score rows padded to a common width with a dummy value.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedScoreBatch {
    /// Row-major `[rows, width]` scores.
    pub values: Vec<f64>,
    pub degrees: Vec<usize>,
    pub width: usize,
    pub dummy: f64,
}

impl PaddedScoreBatch {
    pub fn rows(&self) -> usize {
        self.degrees.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.width..(r + 1) * self.width]
    }

    /// Row-wise 1.5-entmax over the padded matrix.
    pub fn entmax_rows(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.rows()).map(|r| entmax15(self.row(r))).collect()
    }
}

/// Pads rows to the widest degree using `min(all entries) - 2` as the filler.
pub fn pad_batch(rows: &[Vec<f64>]) -> Result<PaddedScoreBatch> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("pad_batch"));
    }
    if let Some(r) = rows.iter().position(|r| r.is_empty()) {
        return Err(Error::EmptySegment(r));
    }
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let dummy = rows
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min)
        - 2.0;
    let mut values = Vec::with_capacity(rows.len() * width);
    for r in rows {
        values.extend_from_slice(r);
        values.extend(std::iter::repeat_n(dummy, width - r.len()));
    }
    Ok(PaddedScoreBatch {
        values,
        degrees: rows.iter().map(Vec::len).collect(),
        width,
        dummy,
    })
}

/// 1.5-entmax applied independently within each segment of per-edge scores.
///
/// Segments are gathered into a padded batch and transformed row-wise.
pub fn segmented_entmax(scores: &[f64], segments: &Segments) -> Result<Vec<f64>> {
    if scores.len() != segments.rows() {
        return Err(Error::ShapeMismatch {
            op: "segmented_entmax",
            left: vec![scores.len()],
            right: vec![segments.rows()],
        });
    }
    let rows: Vec<Vec<f64>> = segments
        .members()
        .iter()
        .map(|m| m.iter().map(|&e| scores[e]).collect())
        .collect();
    let batch = pad_batch(&rows)?;
    let probs = batch.entmax_rows()?;
    let mut out = vec![0.0; scores.len()];
    for (m, p) in segments.members().iter().zip(&probs) {
        for (k, &e) in m.iter().enumerate() {
            out[e] = p[k];
        }
    }
    Ok(out)
}

/// Which half of the augmentation property to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prop2Statement {
    /// A coordinate appended at or below `s_[d] - 2` changes nothing and gets zero mass.
    LowAppend,
    /// With full support, the appended coordinate gets zero mass iff it is at most `2 τ(d)`.
    ThresholdIff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Report {
    pub statement: Prop2Statement,
    pub trials: usize,
    pub boundary_probes: usize,
    pub violations: usize,
    pub first_violation: Option<String>,
}

impl Prop2Report {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Slack on threshold comparisons.
const SLACK: f64 = 1e-9;

fn unchanged(p: &[f64], q: &[f64]) -> bool {
    p.iter().zip(q).all(|(a, b)| (a - b).abs() <= SLACK)
}

/// Zero mass up to the threshold slack: `(x - τ)² ≤ SLACK²`.
fn is_zero(v: f64) -> bool {
    v <= SLACK * SLACK
}

/// Randomized brute-force check of the augmentation property.
///
/// Every trial draws a score vector of dimension `1..max_d`, appends one
/// coordinate and compares `entmax15` before and after. Every fourth trial
/// places the appended value exactly on the boundary of the condition.
pub fn verify_prop2(
    statement: Prop2Statement,
    trials: usize,
    max_d: usize,
    seed: u64,
) -> Result<Prop2Report> {
    if max_d < 2 {
        return Err(Error::InvalidArgument(format!("max_d must be ≥ 2, got {max_d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Prop2Report {
        statement,
        trials,
        boundary_probes: 0,
        violations: 0,
        first_violation: None,
    };
    for trial in 0..trials {
        let d = rng.random_range(1..max_d);
        let boundary = trial % 4 == 0;
        let (s, appended, ok) = match statement {
            Prop2Statement::LowAppend => {
                let s: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let min = s.iter().copied().fold(f64::INFINITY, f64::min);
                let gap = if boundary { 0.0 } else { rng.random_range(0.0..3.0) };
                let extra = min - 2.0 - gap;
                let p = entmax15(&s)?;
                let mut s2 = s.clone();
                s2.push(extra);
                let q = entmax15(&s2)?;
                let ok = unchanged(&p, &q[..d]) && is_zero(q[d]);
                (s, extra, ok)
            }
            Prop2Statement::ThresholdIff => {
                // Draw until the support is full: a spread below 1 guarantees it
                // for d = 1 and usually for larger d.
                let (s, p) = loop {
                    let s: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8..0.8)).collect();
                    let p = entmax15(&s)?;
                    if p.iter().all(|&v| v > 0.0) {
                        break (s, p);
                    }
                };
                let scan = ThresholdScan::new(&s)?;
                let bound = 2.0 * scan.tau[d - 1];
                let extra = if boundary {
                    bound
                } else {
                    bound + rng.random_range(-2.0..2.0)
                };
                let mut s2 = s.clone();
                s2.push(extra);
                let q = entmax15(&s2)?;
                let lhs = unchanged(&p, &q[..d]) && is_zero(q[d]);
                let ok = if extra <= bound + SLACK && extra >= bound - SLACK {
                    // On the boundary the closed side must hold.
                    lhs
                } else {
                    lhs == (extra <= bound)
                };
                (s, extra, ok)
            }
        };
        if boundary {
            report.boundary_probes += 1;
        }
        if !ok {
            report.violations += 1;
            if report.first_violation.is_none() {
                report.first_violation = Some(format!(
                    "trial {trial}: s = {s:?}, appended = {appended}"
                ));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn two_equal_scores_split_evenly() {
        assert!(close(&entmax15(&[0.0, 0.0]).unwrap(), &[0.5, 0.5], 1e-12));
    }

    #[test]
    fn constant_vector_is_uniform() {
        for c in [-7.5, 0.0, 3.25, 1e3] {
            let p = entmax15(&[c; 4]).unwrap();
            assert!(close(&p, &[0.25; 4], 1e-12), "{c}: {p:?}");
        }
    }

    #[test]
    fn large_gap_is_one_hot() {
        let scan = ThresholdScan::new(&[4.0, 0.0]).unwrap();
        assert_eq!(scan.support, 1);
        assert!((scan.threshold - 1.0).abs() < 1e-15);
        assert_eq!(entmax15(&[4.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(entmax15(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn scan_statistics_match_prefix_recomputation() {
        let s = [0.3, -1.2, 2.2, 0.9, 0.91, -0.4];
        let scan = ThresholdScan::new(&s).unwrap();
        for rho in 1..=s.len() {
            let top = &scan.sorted[..rho];
            let m = top.iter().sum::<f64>() / rho as f64;
            let v: f64 = top.iter().map(|x| (x - m) * (x - m)).sum();
            assert!((scan.mean[rho - 1] - m).abs() < 1e-12);
            assert!((scan.var[rho - 1] - v).abs() < 1e-12);
            if v > 1.0 {
                assert!(scan.tau[rho - 1].is_infinite());
            }
        }
    }

    #[test]
    fn vjp_zero_upstream() {
        let p = entmax15(&[0.2, 0.1, -0.3]).unwrap();
        assert_eq!(entmax15_vjp(&p, &[0.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn vjp_inactive_coordinate_gets_nothing() {
        let p = entmax15(&[4.0, 0.0]).unwrap();
        let d = entmax15_vjp(&p, &[0.7, -1.3]);
        assert_eq!(d[1], 0.0);
        // one-hot output is locally constant
        assert!(d[0].abs() < 1e-15);
    }

    #[test]
    fn pad_batch_places_dummy() {
        let b = pad_batch(&[vec![1.0, 0.5], vec![0.0, 2.0, 1.0]]).unwrap();
        assert_eq!(b.width, 3);
        assert_eq!(b.dummy, -2.0);
        assert_eq!(b.row(0), &[1.0, 0.5, -2.0]);
    }

    #[test]
    fn padded_slot_gets_zero() {
        let b = pad_batch(&[vec![1.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(b.row(0), &[1.0, 0.0, -2.0]);
        let rows = b.entmax_rows().unwrap();
        let direct = entmax15(&[1.0, 0.0]).unwrap();
        assert_eq!(&rows[0][..2], &direct[..]);
        assert_eq!(rows[0][2], 0.0);
        assert!(close(&rows[1], &[1.0 / 3.0; 3], 1e-12));
    }

    #[test]
    fn equal_rows_padded() {
        let b = pad_batch(&[vec![0.5; 2], vec![0.5; 4]]).unwrap();
        let rows = b.entmax_rows().unwrap();
        assert!(close(&rows[0], &[0.5, 0.5, 0.0, 0.0], 1e-12));
        assert_eq!(&rows[0][2..], &[0.0, 0.0]);
    }

    #[test]
    fn segmented_single_edge() {
        let seg = Segments::new(vec![0], 1).unwrap();
        assert_eq!(segmented_entmax(&[-3.7], &seg).unwrap(), vec![1.0]);
    }

    #[test]
    fn segmented_uniform_within_segments() {
        let seg = Segments::new(vec![0, 1, 0, 1, 1], 2).unwrap();
        let w = segmented_entmax(&[2.0, -1.0, 2.0, -1.0, -1.0], &seg).unwrap();
        let third = 1.0 / 3.0;
        assert!(close(&w, &[0.5, third, 0.5, third, third], 1e-12));
    }

    #[test]
    fn prop2_single_coordinate_append() {
        let p = entmax15(&[1.5, -0.5]).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn prop2_small_runs_clean() {
        for st in [Prop2Statement::LowAppend, Prop2Statement::ThresholdIff] {
            let r = verify_prop2(st, 200, 6, 3).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(r.boundary_probes > 0);
        }
        assert!(verify_prop2(Prop2Statement::LowAppend, 1, 1, 0).is_err());
    }
}
