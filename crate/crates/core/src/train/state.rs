use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{lr_at, Adam, TrainConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{
    build_menet, read_records, record_loss, write_atomic, write_records, ModelParams, Record, RecordFile,
};
use crate::tensor::{Mode, Tensor};

/// Loss statistics over all completed steps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub count: u64,
    pub sum: f64,
    pub last: f64,
    pub min: f64,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }

    fn push(&mut self, loss: f64) {
        self.min = if self.count == 0 { loss } else { self.min.min(loss) };
        self.count += 1;
        self.sum += loss;
        self.last = loss;
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: ModelParams,
    pub adam: Adam,
    /// Source of per-step dropout seeds.
    pub rng: ChaCha8Rng,
    pub loss: LossStats,
}

fn param_norm_report(params: &ModelParams) -> String {
    let mut rows: Vec<(String, f64)> = params
        .store
        .params()
        .map(|(n, t)| (n.to_string(), t.norm()))
        .collect();
    rows.sort_by(|a, b| match (a.1.is_finite(), b.1.is_finite()) {
        (false, true) => std::cmp::Ordering::Less,
        (true, false) => std::cmp::Ordering::Greater,
        _ => b.1.total_cmp(&a.1),
    });
    rows.iter()
        .take(8)
        .map(|(n, v)| format!("{n}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl TrainState {
    /// Fresh network initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = build_menet(&config.model, config.seed)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd1b5_4a32_d192_ed03);
        Ok(Self {
            config,
            step: 0,
            params,
            adam: Adam::new(),
            rng,
            loss: LossStats::default(),
        })
    }

    /// One forward in training mode, backward, and Adam update at
    /// `lr_at(step)`. Returns the loss of that forward pass.
    ///
    /// `input` and `target` are `[b, d, h, w, 4]`.
    pub fn train_step(&mut self, input: &Tensor, target: &Tensor) -> Result<f64> {
        let lr = lr_at(self.step, &self.config);
        let dropout_seed = self.rng.next_u64();
        let (loss, grads, updates) = {
            let mut tape = Tape::new(&self.params.store, Mode::Train, dropout_seed);
            let (loss_id, _) = record_loss(
                &mut tape,
                &self.params.config,
                input,
                target,
                self.config.class_weights,
            )?;
            let loss = tape.value_of(loss_id).data()[0];
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    diagnostic: param_norm_report(&self.params),
                });
            }
            let grads = tape.backward(loss_id, &Tensor::scalar(1.0))?;
            (loss, grads, tape.into_stat_updates())
        };
        self.adam
            .step(&mut self.params.store, &grads, lr, self.step + 1)?;
        self.params.store.apply_stat_updates(&updates)?;
        self.step += 1;
        self.loss.push(loss);
        Ok(loss)
    }

    pub fn to_record_file(&self) -> RecordFile {
        let mut file = self.params.to_record_file();
        file.config = self.config.to_text();
        for (name, t) in &self.adam.m {
            file.records.push(Record::f64(format!("adam.m:{name}"), t));
        }
        for (name, t) in &self.adam.v {
            file.records.push(Record::f64(format!("adam.v:{name}"), t));
        }
        let seed = self.rng.get_seed();
        let mut meta = vec![self.step];
        meta.extend(seed.chunks(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))));
        let pos = self.rng.get_word_pos();
        meta.extend([self.rng.get_stream(), pos as u64, (pos >> 64) as u64]);
        file.records.push(Record::u64("train.meta", meta));
        let l = self.loss;
        file.records.push(Record::f64(
            "train.loss",
            &Tensor::new(&[4], vec![l.count as f64, l.sum, l.last, l.min]).expect("4 values"),
        ));
        file
    }

    pub fn from_record_file(file: &RecordFile) -> Result<Self> {
        let config = TrainConfig::from_text(&file.config)?;
        let params = ModelParams::from_record_file(file)?;
        let mut adam = Adam::new();
        for rec in &file.records {
            if let Some(name) = rec.name.strip_prefix("adam.m:") {
                adam.m.insert(name.to_string(), rec.to_tensor()?);
            } else if let Some(name) = rec.name.strip_prefix("adam.v:") {
                adam.v.insert(name.to_string(), rec.to_tensor()?);
            }
        }
        let missing = |what: &str| Error::Checkpoint(format!("missing `{what}` record"));
        let meta = file.get("train.meta").ok_or_else(|| missing("train.meta"))?.as_u64()?;
        if meta.len() != 8 {
            return Err(Error::Checkpoint(format!("train.meta has {} words", meta.len())));
        }
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_mut(8).zip(&meta[1..5]) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta[5]);
        rng.set_word_pos(meta[6] as u128 | (meta[7] as u128) << 64);
        let l = file
            .get("train.loss")
            .ok_or_else(|| missing("train.loss"))?
            .to_tensor()?;
        let l = l.data();
        if l.len() != 4 {
            return Err(Error::Checkpoint("train.loss must hold 4 values".into()));
        }
        Ok(Self {
            config,
            step: meta[0],
            params,
            adam,
            rng,
            loss: LossStats {
                count: l[0] as u64,
                sum: l[1],
                last: l[2],
                min: l[3],
            },
        })
    }

    /// Atomic write: a crash never leaves a partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &write_records(&self.to_record_file())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_record_file(&read_records(&std::fs::read(path).map_err(Error::at(path))?)?)
    }
}
