use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lr_at, TrainConfig, TrainState};
use crate::data::{
    extract_patch, load_case, make_patch_grid, stitch_patches, write_case, write_nifti, LabelVolume, Manifest,
    MultiModalCase, PatchGrid,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, MetricsReport};
use crate::model::{predict_patch, read_records, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_LOG_FILE: &str = "loss.log";

/// One patch of one case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRef {
    pub case: usize,
    pub patch: usize,
}

enum Slot {
    Loaded(MultiModalCase),
    OnDisk(crate::data::ManifestEntry),
}

/// Labelled training cases with their patch grids. Cases read from a
/// manifest are loaded on demand, one at a time.
pub struct TrainingSet {
    slots: Vec<Slot>,
    grids: Vec<PatchGrid>,
    cache: Option<(usize, MultiModalCase)>,
}

impl TrainingSet {
    /// Z-scores each case and tiles it with the configured patch geometry.
    pub fn from_cases(cases: Vec<MultiModalCase>, cfg: &TrainConfig) -> Result<Self> {
        let mut slots = Vec::new();
        let mut grids = Vec::new();
        for case in cases {
            if case.labels.is_none() {
                return Err(Error::MissingLabels(case.case_id));
            }
            grids.push(make_patch_grid(case.dims(), cfg.patch_extent, cfg.patch_strides)?);
            slots.push(Slot::Loaded(case.normalized()));
        }
        Self::finish(slots, grids)
    }

    pub fn from_manifest(manifest: &Manifest, cfg: &TrainConfig) -> Result<Self> {
        let mut slots = Vec::new();
        let mut grids = Vec::new();
        for entry in &manifest.entries {
            if entry.labels.is_none() {
                return Err(Error::MissingLabels(entry.case_id.clone()));
            }
            let dims = crate::data::read_nifti(&entry.modalities[0])?.dims;
            grids.push(make_patch_grid(dims, cfg.patch_extent, cfg.patch_strides)?);
            slots.push(Slot::OnDisk(entry.clone()));
        }
        Self::finish(slots, grids)
    }

    fn finish(slots: Vec<Slot>, grids: Vec<PatchGrid>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self {
            slots,
            grids,
            cache: None,
        })
    }

    pub fn num_cases(&self) -> usize {
        self.slots.len()
    }

    pub fn patches_per_case(&self) -> Vec<usize> {
        self.grids.iter().map(PatchGrid::len).collect()
    }

    fn case(&mut self, i: usize) -> Result<&MultiModalCase> {
        if let Slot::OnDisk(entry) = &self.slots[i] {
            if self.cache.as_ref().map(|(k, _)| *k) != Some(i) {
                self.cache = Some((i, load_case(entry)?.normalized()));
            }
        }
        Ok(match &self.slots[i] {
            Slot::Loaded(c) => c,
            Slot::OnDisk(_) => &self.cache.as_ref().expect("cached above").1,
        })
    }

    /// `[b, d, h, w, 4]` inputs and one-hot targets for `refs`.
    pub fn batch(&mut self, refs: &[PatchRef]) -> Result<(Tensor, Tensor)> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut shape = Vec::new();
        for r in refs {
            let grid = &self.grids[r.case];
            let (origin, extent) = (grid.origins[r.patch], grid.patch_extent);
            let patch = extract_patch(self.case(r.case)?, origin, extent, true)?;
            shape = patch.input.shape().to_vec();
            inputs.extend_from_slice(patch.input.data());
            targets.extend_from_slice(patch.target.expect("training extraction").data());
        }
        if refs.is_empty() {
            return Err(Error::EmptyInput);
        }
        shape[0] = refs.len();
        Ok((Tensor::new(&shape, inputs)?, Tensor::new(&shape, targets)?))
    }
}

/// Visiting order for one epoch: cases shuffled, each case's patches
/// shuffled and truncated to `ceil(fraction · n)`. Depends only on the
/// arguments, so any epoch can be regenerated when resuming.
pub fn epoch_order(
    seed: u64,
    epoch: u64,
    patches_per_case: &[usize],
    shuffle: bool,
    fraction: f64,
) -> Vec<PatchRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut cases: Vec<usize> = (0..patches_per_case.len()).collect();
    if shuffle {
        cases.shuffle(&mut rng);
    }
    let mut order = Vec::new();
    for c in cases {
        let n = patches_per_case[c];
        let mut patches: Vec<usize> = (0..n).collect();
        if shuffle {
            patches.shuffle(&mut rng);
        }
        let keep = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        order.extend(patches[..keep].iter().map(|&patch| PatchRef { case: c, patch }));
    }
    order
}

/// Patch references for the batch of optimizer step `step`.
fn batch_refs(cfg: &TrainConfig, set: &TrainingSet, step: u64, epoch_cache: &mut Option<(u64, Vec<PatchRef>)>) -> Vec<PatchRef> {
    let counts = set.patches_per_case();
    let b = cfg.batch_size as u64;
    let mut refs = Vec::with_capacity(cfg.batch_size);
    for k in step * b..(step + 1) * b {
        let len = match epoch_cache {
            Some((_, order)) => order.len() as u64,
            None => epoch_order(cfg.seed, 0, &counts, cfg.shuffle, cfg.patch_fraction).len() as u64,
        };
        let epoch = k / len;
        if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            *epoch_cache = Some((
                epoch,
                epoch_order(cfg.seed, epoch, &counts, cfg.shuffle, cfg.patch_fraction),
            ));
        }
        let order = &epoch_cache.as_ref().expect("filled above").1;
        refs.push(order[(k % len) as usize]);
    }
    refs
}

/// Steps `state` until `until` completed steps, calling `on_step(state, lr,
/// loss)` after each one.
pub fn train_steps<F>(state: &mut TrainState, set: &mut TrainingSet, until: u64, mut on_step: F) -> Result<()>
where
    F: FnMut(&TrainState, f64, f64) -> Result<()>,
{
    let mut epoch_cache = None;
    while state.step < until {
        let refs = batch_refs(&state.config, set, state.step, &mut epoch_cache);
        let (input, target) = set.batch(&refs)?;
        let lr = lr_at(state.step, &state.config);
        let loss = state.train_step(&input, &target)?;
        on_step(state, lr, loss)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub steps: u64,
    pub final_loss: f64,
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig {
        total_steps: 1,
        checkpoint_every: 0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

/// Keeps the first `lines` lines of the log.
fn truncate_log(path: &Path, lines: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = BufReader::new(fs::File::open(path)?)
        .lines()
        .take(lines as usize)
        .collect::<std::io::Result<_>>()?;
    if (kept.len() as u64) < lines {
        return Err(Error::Checkpoint(format!(
            "{} holds {} lines, checkpoint is at step {lines}",
            path.display(),
            kept.len()
        )));
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Trains on `set`, writing `checkpoint.ckpt` and `loss.log` into
/// `out_dir`. An existing checkpoint there with the same configuration
/// (apart from `total_steps` and `checkpoint_every`) is resumed.
pub fn run_training(set: &mut TrainingSet, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let mut state = if ckpt.exists() {
        let mut s = TrainState::load(&ckpt)?;
        if !same_run(&s.config, config) {
            return Err(Error::InvalidConfig(format!(
                "{} was written with a different configuration",
                ckpt.display()
            )));
        }
        s.config = config.clone();
        truncate_log(&log_path, s.step)?;
        s
    } else {
        if log_path.exists() {
            fs::remove_file(&log_path)?;
        }
        TrainState::new(config.clone())?
    };

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let every = config.checkpoint_every;
    train_steps(&mut state, set, config.total_steps, |s, lr, loss| {
        writeln!(log, "{}\t{lr}\t{loss}", s.step - 1)?;
        if every > 0 && s.step % every == 0 {
            log.flush()?;
            s.save(&ckpt)?;
        }
        Ok(())
    })?;
    log.flush()?;
    state.save(&ckpt)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        loss_log: log_path,
        steps: state.step,
        final_loss: state.loss.last,
    })
}

/// Tiles a z-scored case, predicts every patch and stitches the argmax
/// labels.
pub fn predict_case(params: &ModelParams, case: &MultiModalCase, patch_extent: [usize; 3], strides: [usize; 3]) -> Result<LabelVolume> {
    let grid = make_patch_grid(case.dims(), patch_extent, strides)?;
    let probs = grid
        .origins
        .iter()
        .map(|&o| predict_patch(params, &extract_patch(case, o, patch_extent, false)?.input))
        .collect::<Result<Vec<_>>>()?;
    stitch_patches(&grid, &probs)?.to_labels(case.spacing())
}

/// Writes `<case_id>.nii.gz` label volumes for every manifest case using
/// the checkpoint's network and patch geometry.
pub fn run_prediction(checkpoint: &Path, manifest: &Manifest, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let file = read_records(&fs::read(checkpoint).map_err(Error::at(checkpoint))?)?;
    let geometry = TrainConfig::from_text(&file.config)?;
    let params = ModelParams::from_record_file(&file)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for entry in &manifest.entries {
        let case = load_case(entry)?;
        let labels = predict_case(
            &params,
            &case.normalized(),
            geometry.patch_extent,
            geometry.patch_strides,
        )?;
        let mut volume = labels.to_volume();
        volume.orientation = case.modalities[0].orientation.clone();
        let path = out_dir.join(format!("{}.nii.gz", entry.case_id));
        write_nifti(&volume, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn prediction_path(pred_dir: &Path, case_id: &str) -> Option<PathBuf> {
    [".nii.gz", ".nii"]
        .iter()
        .map(|ext| pred_dir.join(format!("{case_id}{ext}")))
        .find(|p| p.exists())
}

/// Scores `<case_id>.nii[.gz]` predictions against the manifest labels.
pub fn run_evaluation(pred_dir: &Path, truth: &Manifest) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for entry in &truth.entries {
        let label_path = entry
            .labels
            .as_ref()
            .ok_or_else(|| Error::MissingLabels(entry.case_id.clone()))?;
        let truth_vol = crate::data::read_nifti(label_path)?;
        let truth_labels = LabelVolume::from_volume(&truth_vol)?;
        let pred_path = prediction_path(pred_dir, &entry.case_id)
            .ok_or_else(|| Error::MissingCase(entry.case_id.clone()))?;
        let pred = LabelVolume::from_volume(&crate::data::read_nifti(&pred_path)?)?;
        reports.push(evaluate_case(
            &entry.case_id,
            &pred,
            &truth_labels,
            truth_vol.spacing,
        )?);
    }
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(reports)
}

/// Writes z-scored copies of every case plus `manifest.tsv` into `out_dir`.
pub fn run_preprocess(manifest: &Manifest, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let mut out = Manifest::default();
    for entry in &manifest.entries {
        let case = load_case(entry)?.normalized();
        out.entries.push(write_case(&case, out_dir)?);
    }
    out.write(&out_dir.join("manifest.tsv"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_reshuffle() {
        let counts = [1; 5];
        let orders: Vec<Vec<PatchRef>> = (0..3).map(|e| epoch_order(4, e, &counts, true, 1.0)).collect();
        assert!(orders[0] != orders[1] || orders[1] != orders[2]);
        assert_eq!(orders[0], epoch_order(4, 0, &counts, true, 1.0));
        let fixed = epoch_order(4, 7, &counts, false, 1.0);
        assert_eq!(fixed.iter().map(|r| r.case).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(epoch_order(1, 0, &[10, 3], true, 0.5).len(), 5 + 2);
    }
}
