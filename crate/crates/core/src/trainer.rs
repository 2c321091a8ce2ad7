//! Seeded training loop: Adam, β schedules, batching, validation and
//! checkpoint selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossParts, Model, PreparedScene};
use crate::params::ParamStore;
use crate::world::FrameMode;

/// KL weight per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSchedule {
    Constant(f64),
    /// Linear ramp from 0 to `max` over the first half of each `cycle`
    /// epochs, then flat.
    Cyclical { max: f64, cycle: usize },
}

pub const DEFAULT_CYCLE: usize = 25;

impl BetaSchedule {
    pub fn beta_at(&self, epoch: usize) -> f64 {
        match *self {
            BetaSchedule::Constant(b) => b,
            BetaSchedule::Cyclical { max, cycle } => {
                let phase = (epoch % cycle) as f64 / (cycle as f64 / 2.0);
                max * phase.min(1.0)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BetaSchedule::Constant(b) => b >= 0.0,
            BetaSchedule::Cyclical { max, cycle } => max >= 0.0 && cycle >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid beta schedule `{self}`")))
        }
    }
}

impl fmt::Display for BetaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaSchedule::Constant(b) => write!(f, "constant:{b}"),
            BetaSchedule::Cyclical { max, cycle } if *cycle == DEFAULT_CYCLE => write!(f, "cyclical:{max}"),
            BetaSchedule::Cyclical { max, cycle } => write!(f, "cyclical:{max}:{cycle}"),
        }
    }
}

/// `constant:B`, `cyclical:B` or `cyclical:B:CYCLE`.
impl FromStr for BetaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad beta schedule `{s}` (expected constant:B or cyclical:B[:CYCLE])"));
        let mut it = s.split(':');
        let kind = it.next().ok_or_else(bad)?;
        let value: f64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let sched = match kind {
            "constant" => BetaSchedule::Constant(value),
            "cyclical" => BetaSchedule::Cyclical {
                max: value,
                cycle: match it.next() {
                    Some(c) => c.parse().map_err(|_| bad())?,
                    None => DEFAULT_CYCLE,
                },
            },
            _ => return Err(bad()),
        };
        if it.next().is_some() {
            return Err(bad());
        }
        sched.validate()?;
        Ok(sched)
    }
}

impl Serialize for BetaSchedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BetaSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `None` uses the model's β as a constant.
    pub beta_schedule: Option<BetaSchedule>,
    pub seed: u64,
    /// Random rotation of every training scene each epoch.
    pub augment_rotation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 40,
            learning_rate: 1e-3,
            beta_schedule: None,
            seed: 0,
            augment_rotation: false,
        }
    }
}

impl TrainConfig {
    /// Batch 40 and no augmentation for vehicles; batch 20 with rotation
    /// augmentation for pedestrians.
    pub fn for_mode(mode: FrameMode) -> Self {
        match mode {
            FrameMode::Driving => TrainConfig::default(),
            FrameMode::Pedestrian => TrainConfig {
                batch_size: 20,
                augment_rotation: true,
                ..TrainConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(s) = &self.beta_schedule {
            s.validate()?;
        }
        Ok(())
    }

    fn schedule(&self, model: &Model) -> BetaSchedule {
        self.beta_schedule.unwrap_or(BetaSchedule::Constant(model.config.beta))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Seed-stable split of `n` items: a shuffled `fraction` (rounded, at least
/// one when `n ≥ 2`) goes to validation. Returns `(train, validation)`
/// indices, each sorted.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = if n >= 2 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut val = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub beta: f64,
    pub train: Components,
    pub val: Option<Components>,
}

/// Batch-averaged loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Components {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub aux: f64,
}

impl Components {
    fn accumulate(&mut self, l: &LossParts, w: f64) {
        self.total += w * l.total;
        self.recon += w * l.recon;
        self.kl += w * l.kl;
        self.aux += w * l.aux;
    }
}

pub const LOG_HEADER: &str = "epoch\tbeta\ttrain_total\ttrain_recon\ttrain_kl\ttrain_aux\tval_total\tval_recon\tval_kl\tval_aux";

impl EpochLog {
    pub fn tsv_line(&self) -> String {
        let c = |x: &Components| format!("{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}", x.total, x.recon, x.kl, x.aux);
        let val = self.val.as_ref().map_or_else(|| "-\t-\t-\t-".to_string(), c);
        format!("{}\t{}\t{}\t{}", self.epoch, self.beta, c(&self.train), val)
    }
}

pub fn log_table(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for l in log {
        out.push_str(&l.tsv_line());
        out.push('\n');
    }
    out
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters at the epoch with the lowest validation loss (the final
    /// ones when there is no validation set).
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

const VAL_NOISE: u64 = 0x5eed;

/// Mean validation loss at the model's nominal β with fixed noise.
pub fn validation_loss(model: &Model, val: &[PreparedScene], batch_size: usize) -> Result<Components> {
    let mut c = Components::default();
    let n = val.len() as f64;
    for (b, chunk) in val.chunks(batch_size).enumerate() {
        let refs: Vec<&PreparedScene> = chunk.iter().collect();
        let l = model.loss(&refs, mix(VAL_NOISE, b as u64, 0))?;
        c.accumulate(&l, chunk.len() as f64 / n);
    }
    Ok(c)
}

/// Trains `model` in place of a copy; `on_epoch` sees every log line as it is
/// produced.
pub fn train(
    model: &Model,
    train_set: &[PreparedScene],
    val_set: &[PreparedScene],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let schedule = config.schedule(model);
    let mut model = model.clone();
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, model.clone(), 0);
    for epoch in 0..config.epochs {
        let beta = schedule.beta_at(epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 1)));
        let augmented: Vec<PreparedScene>;
        let pool: &[PreparedScene] = if config.augment_rotation {
            augmented = order
                .iter()
                .map(|&i| {
                    let s = train_set[i].scene.augment_rotate(mix(config.seed, epoch as u64, 2 + i as u64));
                    PreparedScene::from_normalized(s)
                })
                .collect::<Result<_>>()?;
            &augmented
        } else {
            train_set
        };
        let mut comps = Components::default();
        let n = train_set.len() as f64;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&PreparedScene> = if config.augment_rotation {
                let start = b * config.batch_size;
                pool[start..start + chunk.len()].iter().collect()
            } else {
                chunk.iter().map(|&i| &pool[i]).collect()
            };
            let (l, grads) = model.loss_and_grads_at(&refs, mix(config.seed, epoch as u64, 3 + b as u64), beta)?;
            if !l.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam.step(&mut model.params, &grads);
            comps.accumulate(&l, chunk.len() as f64 / n);
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(validation_loss(&model, val_set, config.batch_size)?)
        };
        let entry = EpochLog {
            epoch,
            beta,
            train: comps,
            val,
        };
        on_epoch(&entry);
        log.push(entry);
        if let Some(v) = val {
            if v.total < best.0 {
                best = (v.total, model.clone(), epoch);
            }
        }
    }
    let (best, best_epoch) = if val_set.is_empty() {
        (model.clone(), config.epochs - 1)
    } else {
        (best.1, best.2)
    };
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        log,
    })
}
