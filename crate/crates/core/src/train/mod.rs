//! Optimization schedule, Adam, resumable training state and the
//! train/predict/evaluate drivers.

mod driver;
mod optim;
mod state;

pub use driver::{
    epoch_order, predict_case, run_evaluation, run_prediction, run_preprocess, run_training, train_steps,
    PatchRef, TrainOutcome, TrainingSet, CHECKPOINT_FILE, LOSS_LOG_FILE,
};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use state::{LossStats, TrainState};

use crate::data::{DEFAULT_PATCH_EXTENT, DEFAULT_PATCH_STRIDES};
use crate::error::{Error, Result};
use crate::loss::ClassWeights;
use crate::model::{parse_key_values, MENetConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: MENetConfig,
    pub initial_lr: f64,
    /// `(step, lr)` pairs with increasing steps.
    pub lr_milestones: Vec<(u64, f64)>,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Reshuffle case and patch order every epoch.
    pub shuffle: bool,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_every: u64,
    /// `[x, y, z]`.
    pub patch_extent: [usize; 3],
    /// `[x, y, z]`.
    pub patch_strides: [usize; 3],
    /// Share of each case's patches visited per epoch, in `(0, 1]`.
    pub patch_fraction: f64,
    pub class_weights: ClassWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: MENetConfig::default(),
            initial_lr: 1e-4,
            lr_milestones: vec![(200_000, 3e-5), (400_000, 1e-5)],
            total_steps: 450_000,
            batch_size: 1,
            seed: 0,
            shuffle: true,
            checkpoint_every: 1000,
            patch_extent: DEFAULT_PATCH_EXTENT,
            patch_strides: DEFAULT_PATCH_STRIDES,
            patch_fraction: 1.0,
            class_weights: ClassWeights::default(),
        }
    }
}

fn parse_triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(format!("{key} = {v}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Parse(format!("{key} = {v}: expected three values")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Parse(format!("{key} = {v}: expected a boolean"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        self.model.validate()?;
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return fail(format!("initial_lr {} must be finite and >= 0", self.initial_lr));
        }
        let mut prev = (0u64, self.initial_lr);
        for (i, &(step, lr)) in self.lr_milestones.iter().enumerate() {
            if (i > 0 && step <= prev.0) || !(lr >= 0.0 && lr <= prev.1) {
                return fail(format!(
                    "lr_milestones must have increasing steps and non-increasing rates: {:?}",
                    self.lr_milestones
                ));
            }
            prev = (step, lr);
        }
        if self.total_steps == 0 {
            return fail("total_steps must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.patch_fraction > 0.0 && self.patch_fraction <= 1.0) {
            return fail(format!("patch_fraction {} outside (0, 1]", self.patch_fraction));
        }
        if self.patch_strides.contains(&0) {
            return fail("patch_strides must be positive".into());
        }
        let [x, y, z] = self.patch_extent;
        self.model.validate_extent([z, y, x])
    }

    /// `key = value` text covering the model and training keys.
    pub fn to_text(&self) -> String {
        let triple = |t: [usize; 3]| format!("{},{},{}", t[0], t[1], t[2]);
        let milestones = self
            .lr_milestones
            .iter()
            .map(|(s, lr)| format!("{s}:{lr:?}"))
            .collect::<Vec<_>>()
            .join(",");
        let w = self.class_weights.0;
        format!(
            "{}initial_lr = {:?}\nlr_milestones = {milestones}\ntotal_steps = {}\nbatch_size = {}\nseed = {}\nshuffle = {}\ncheckpoint_every = {}\npatch_extent = {}\npatch_strides = {}\npatch_fraction = {:?}\nclass_weights = {:?},{:?},{:?},{:?}\n",
            self.model.to_text(),
            self.initial_lr,
            self.total_steps,
            self.batch_size,
            self.seed,
            self.shuffle,
            self.checkpoint_every,
            triple(self.patch_extent),
            triple(self.patch_strides),
            self.patch_fraction,
            w[0],
            w[1],
            w[2],
            w[3],
        )
    }

    /// Parses `key = value` text over the defaults; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, v) in parse_key_values(text)? {
            if cfg.model.apply_key(&key, &v)? {
                continue;
            }
            let num = |e: &dyn std::fmt::Display| Error::Parse(format!("{key} = {v}: {e}"));
            match key.as_str() {
                "initial_lr" => cfg.initial_lr = v.parse().map_err(|e| num(&e))?,
                "lr_milestones" => {
                    cfg.lr_milestones = v
                        .split(',')
                        .filter(|p| !p.trim().is_empty())
                        .map(|pair| {
                            let (s, lr) = pair
                                .split_once(':')
                                .ok_or_else(|| num(&"expected step:lr pairs"))?;
                            Ok((
                                s.trim().parse().map_err(|e| num(&e))?,
                                lr.trim().parse().map_err(|e| num(&e))?,
                            ))
                        })
                        .collect::<Result<_>>()?;
                }
                "total_steps" => cfg.total_steps = v.parse().map_err(|e| num(&e))?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|e| num(&e))?,
                "seed" => cfg.seed = v.parse().map_err(|e| num(&e))?,
                "shuffle" | "epochs_shuffle" => cfg.shuffle = parse_bool(&key, &v)?,
                "checkpoint_every" => cfg.checkpoint_every = v.parse().map_err(|e| num(&e))?,
                "patch_extent" => cfg.patch_extent = parse_triple(&key, &v)?,
                "patch_strides" => cfg.patch_strides = parse_triple(&key, &v)?,
                "patch_fraction" => cfg.patch_fraction = v.parse().map_err(|e| num(&e))?,
                "class_weights" => {
                    let w: Vec<f64> = v
                        .split(',')
                        .map(|x| x.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| num(&e))?;
                    let w: [f64; 4] = w
                        .try_into()
                        .map_err(|_| num(&"expected four weights"))?;
                    cfg.class_weights = ClassWeights::new(w)?;
                }
                _ => return Err(Error::Parse(format!("unknown configuration key `{key}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `[1, z, y, x, 4]` patch tensor extents as `[d, h, w]`.
    pub fn patch_dhw(&self) -> [usize; 3] {
        let [x, y, z] = self.patch_extent;
        [z, y, x]
    }
}

/// Piecewise-constant rate: `initial_lr` before the first milestone, each
/// milestone's rate from its step on.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr_milestones
        .iter()
        .take_while(|(s, _)| step >= *s)
        .last()
        .map_or(cfg.initial_lr, |&(_, lr)| lr)
}
