//! The multi-encoder network.
//!
//! Topology, for `S = num_stages` resolution levels and base width `C`:
//!
//! - Four independent encoders, one per modality. Encoder stage `s` runs
//!   `convs_per_encoder_stage[s]` conv(3³)+BN+ReLU layers at width
//!   `C·2^s`, adds a residual short-circuit (1³-projected when the width
//!   changes) and, below the last stage, downsamples with a stride-2
//!   conv(3³)+BN+ReLU that doubles the width.
//! - At every stage the four encoders' block outputs are concatenated and
//!   reduced by a 1³ conv to the fused width `2·C·2^s`. The deepest fused
//!   map is the bottleneck and passes through dropout.
//! - Decoder stage `s` (from `S−2` down to 0) upsamples with a stride-2
//!   transposed conv(2³)+BN+ReLU that halves the width, concatenates the
//!   fused map of stage `s`, runs `convs_per_decoder_stage[s]`
//!   conv(3³)+BN+ReLU layers and adds the upsampled map back.
//! - A 1³ conv head maps to four class logits; softmax gives probabilities.

mod checkpoint;

pub use checkpoint::{read_records, write_atomic, write_records, Record, RecordData, RecordFile};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Eager, Graph, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::loss::{ClassWeights, SMOOTH};
use crate::tensor::{slice_channels, ConvSpec, Mode, Tensor};

pub const NUM_MODALITIES: usize = 4;
pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct MENetConfig {
    pub num_stages: usize,
    pub base_channels: usize,
    pub num_modalities: usize,
    pub num_classes: usize,
    /// One entry per stage, each in `1..=3`.
    pub convs_per_encoder_stage: Vec<usize>,
    /// One entry per decoder stage (`num_stages − 1`), each in `2..=3`.
    pub convs_per_decoder_stage: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for MENetConfig {
    fn default() -> Self {
        Self {
            num_stages: 4,
            base_channels: 16,
            num_modalities: NUM_MODALITIES,
            num_classes: NUM_CLASSES,
            convs_per_encoder_stage: vec![1, 2, 3, 3],
            convs_per_decoder_stage: vec![2, 3, 3],
            dropout_rate: 0.5,
        }
    }
}

impl MENetConfig {
    /// Two stages, base width 4: small enough for gradient checks and
    /// desk-scale overfitting.
    pub fn tiny() -> Self {
        Self {
            num_stages: 2,
            base_channels: 4,
            convs_per_encoder_stage: vec![1, 1],
            convs_per_decoder_stage: vec![2],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_stages < 2 {
            return fail(format!("num_stages must be >= 2, got {}", self.num_stages));
        }
        if self.base_channels == 0 {
            return fail("base_channels must be positive".into());
        }
        if self.num_modalities != NUM_MODALITIES || self.num_classes != NUM_CLASSES {
            return fail(format!(
                "the network is fixed to {NUM_MODALITIES} modalities and {NUM_CLASSES} classes"
            ));
        }
        if self.convs_per_encoder_stage.len() != self.num_stages
            || self.convs_per_encoder_stage.iter().any(|n| !(1..=3).contains(n))
        {
            return fail(format!(
                "convs_per_encoder_stage needs {} entries in 1..=3, got {:?}",
                self.num_stages, self.convs_per_encoder_stage
            ));
        }
        if self.convs_per_decoder_stage.len() != self.num_stages - 1
            || self.convs_per_decoder_stage.iter().any(|n| !(2..=3).contains(n))
        {
            return fail(format!(
                "convs_per_decoder_stage needs {} entries in 2..=3, got {:?}",
                self.num_stages - 1,
                self.convs_per_decoder_stage
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Patch extents `[d, h, w]` must be divisible by `2^num_stages`.
    pub fn validate_extent(&self, extent: [usize; 3]) -> Result<()> {
        let unit = 1usize << self.num_stages;
        if extent.iter().any(|&e| e == 0 || e % unit != 0) {
            return Err(Error::shape(format!(
                "patch extent {extent:?} not divisible by {unit}"
            )));
        }
        Ok(())
    }

    pub fn encoder_width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn fused_width(&self, stage: usize) -> usize {
        2 * self.encoder_width(stage)
    }

    /// `key = value` lines, parsed back by [`MENetConfig::apply_key`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "num_stages = {}\nbase_channels = {}\nnum_modalities = {}\nnum_classes = {}\nconvs_per_encoder_stage = {}\nconvs_per_decoder_stage = {}\ndropout_rate = {:?}\n",
            self.num_stages,
            self.base_channels,
            self.num_modalities,
            self.num_classes,
            list(&self.convs_per_encoder_stage),
            list(&self.convs_per_decoder_stage),
            self.dropout_rate,
        )
    }

    /// Applies one recognised key; returns `Ok(false)` for foreign keys.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |e: &dyn std::fmt::Display| Error::Parse(format!("{key} = {value}: {e}"));
        let list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|x| x.trim().parse::<usize>().map_err(|e| bad(&e)))
                .collect()
        };
        match key {
            "num_stages" => self.num_stages = value.parse().map_err(|e| bad(&e))?,
            "base_channels" => self.base_channels = value.parse().map_err(|e| bad(&e))?,
            "num_modalities" => self.num_modalities = value.parse().map_err(|e| bad(&e))?,
            "num_classes" => self.num_classes = value.parse().map_err(|e| bad(&e))?,
            "convs_per_encoder_stage" => self.convs_per_encoder_stage = list(value)?,
            "convs_per_decoder_stage" => self.convs_per_decoder_stage = list(value)?,
            "dropout_rate" | "dropout" => self.dropout_rate = value.parse().map_err(|e| bad(&e))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_key_values(text)? {
            cfg.apply_key(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// All learnable state of one network plus its batch-norm running
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: MENetConfig,
    pub store: ParamStore,
}

fn conv3(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec::cube(3, 1, 1, cin, cout)
}

fn down(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec::cube(3, 2, 1, cin, cout)
}

fn up(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec::cube(2, 2, 0, cin, cout)
}

fn pointwise(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec::cube(1, 1, 0, cin, cout)
}

/// One layer of the network as laid out in the parameter store.
#[derive(Clone, Debug)]
struct LayerPlan {
    prefix: String,
    spec: ConvSpec,
    transposed: bool,
    /// Followed by batch norm (no bias) rather than carrying a bias.
    normalized: bool,
}

fn encoder_prefix(m: usize, s: usize) -> String {
    format!("encoder{m}.stage{s}")
}

fn layer_plan(cfg: &MENetConfig) -> Vec<LayerPlan> {
    let mut plan = Vec::new();
    let bn = |prefix: String, spec: ConvSpec, transposed: bool| LayerPlan {
        prefix,
        spec,
        transposed,
        normalized: true,
    };
    let biased = |prefix: String, spec: ConvSpec| LayerPlan {
        prefix,
        spec,
        transposed: false,
        normalized: false,
    };
    let s_max = cfg.num_stages;
    for m in 0..cfg.num_modalities {
        for s in 0..s_max {
            let p = encoder_prefix(m, s);
            let width = cfg.encoder_width(s);
            let cin = if s == 0 { 1 } else { width };
            for j in 0..cfg.convs_per_encoder_stage[s] {
                let c = if j == 0 { cin } else { width };
                plan.push(bn(format!("{p}.conv{j}"), conv3(c, width), false));
            }
            if cin != width {
                plan.push(biased(format!("{p}.proj"), pointwise(cin, width)));
            }
            if s + 1 < s_max {
                plan.push(bn(format!("{p}.down"), down(width, 2 * width), false));
            }
        }
    }
    for s in 0..s_max {
        plan.push(biased(
            format!("fuse.stage{s}"),
            pointwise(cfg.num_modalities * cfg.encoder_width(s), cfg.fused_width(s)),
        ));
    }
    for s in (0..s_max - 1).rev() {
        let width = cfg.fused_width(s);
        let p = format!("decoder.stage{s}");
        plan.push(bn(format!("{p}.up"), up(cfg.fused_width(s + 1), width), true));
        for j in 0..cfg.convs_per_decoder_stage[s] {
            let c = if j == 0 { 2 * width } else { width };
            plan.push(bn(format!("{p}.conv{j}"), conv3(c, width), false));
        }
    }
    plan.push(biased(
        "head".into(),
        pointwise(cfg.fused_width(0), cfg.num_classes),
    ));
    plan
}

/// Creates a network with He-normal conv weights (`std = sqrt(2 / fan_in)`),
/// zero biases, unit gamma, zero beta and running statistics (0, 1).
pub fn build_menet(config: &MENetConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for layer in layer_plan(config) {
        let spec = &layer.spec;
        let (shape, fan_in) = if layer.transposed {
            let taps_per_output = (spec.kernel_volume()
                / spec.stride.iter().product::<usize>())
            .max(1);
            (spec.transpose_weight_shape(), spec.in_channels * taps_per_output)
        } else {
            (spec.conv_weight_shape(), spec.in_channels * spec.kernel_volume())
        };
        let std = (2.0 / fan_in as f64).sqrt();
        store.insert_param(
            format!("{}.weight", layer.prefix),
            Tensor::normal(&shape, std, &mut rng),
        );
        let c = spec.out_channels;
        if layer.normalized {
            store.insert_param(format!("{}.gamma", layer.prefix), Tensor::ones(&[c]));
            store.insert_param(format!("{}.beta", layer.prefix), Tensor::zeros(&[c]));
            store.insert_buffer(format!("{}.running_mean", layer.prefix), Tensor::zeros(&[c]));
            store.insert_buffer(format!("{}.running_var", layer.prefix), Tensor::ones(&[c]));
        } else {
            store.insert_param(format!("{}.bias", layer.prefix), Tensor::zeros(&[c]));
        }
    }
    Ok(ModelParams {
        config: config.clone(),
        store,
    })
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &write_records(&self.to_record_file())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::at(path))?;
        Self::from_record_file(&read_records(&bytes)?)
    }

    pub fn to_record_file(&self) -> RecordFile {
        let mut records = Vec::new();
        for (name, t) in self.store.params() {
            records.push(Record::f64(format!("param:{name}"), t));
        }
        for (name, t) in self.store.buffers() {
            records.push(Record::f64(format!("buffer:{name}"), t));
        }
        RecordFile {
            config: self.config.to_text(),
            records,
        }
    }

    /// Reads the `param:` and `buffer:` records; other records are ignored.
    pub fn from_record_file(file: &RecordFile) -> Result<Self> {
        let config = MENetConfig::from_text(&file.config)?;
        let mut store = ParamStore::new();
        for rec in &file.records {
            if let Some(name) = rec.name.strip_prefix("param:") {
                store.insert_param(name, rec.to_tensor()?);
            } else if let Some(name) = rec.name.strip_prefix("buffer:") {
                store.insert_buffer(name, rec.to_tensor()?);
            }
        }
        let expected = build_menet(&config, 0)?;
        for (name, t) in expected.store.params().chain(expected.store.buffers()) {
            let found = store
                .param(name)
                .or_else(|_| store.buffer(name))
                .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if found.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, config implies {:?}",
                    found.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { config, store })
    }
}

/// Per-stage encoder outputs.
#[derive(Clone, Debug)]
pub struct EncoderFeatures<V> {
    /// `per_encoder[m][s]`: block output of encoder `m` at stage `s`, before
    /// downsampling.
    pub per_encoder: Vec<Vec<V>>,
    /// `fused[s]`: 1³-reduced concatenation of the four stage-`s` maps.
    pub fused: Vec<V>,
}

fn conv_bn_relu<G: Graph>(g: &mut G, x: &G::Var, prefix: &str, spec: &ConvSpec, transposed: bool) -> Result<G::Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let y = if transposed {
        g.conv_transpose3d(x, &w, None, spec)?
    } else {
        g.conv3d(x, &w, None, spec)?
    };
    let y = g.batch_norm(&y, prefix)?;
    g.relu(&y)
}

fn biased_conv<G: Graph>(g: &mut G, x: &G::Var, prefix: &str, spec: &ConvSpec) -> Result<G::Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    g.conv3d(x, &w, Some(&b), spec)
}

/// Runs the four encoders and the per-stage fusion on any [`Graph`].
pub fn encode<G: Graph>(g: &mut G, cfg: &MENetConfig, inputs: &[G::Var]) -> Result<EncoderFeatures<G::Var>> {
    if inputs.len() != cfg.num_modalities {
        return Err(Error::shape(format!(
            "expected {} modality inputs, got {}",
            cfg.num_modalities,
            inputs.len()
        )));
    }
    let (b0, ext0, _) = g.value(&inputs[0]).dims5()?;
    for x in inputs {
        let (b, ext, c) = g.value(x).dims5()?;
        if b != b0 || ext != ext0 || c != 1 {
            return Err(Error::shape(format!(
                "modality inputs must share [b, d, h, w] and have 1 channel, got {:?}",
                g.value(x).shape()
            )));
        }
    }
    cfg.validate_extent(ext0)?;

    let s_max = cfg.num_stages;
    let mut per_encoder = Vec::with_capacity(inputs.len());
    for (m, input) in inputs.iter().enumerate() {
        let mut stages = Vec::with_capacity(s_max);
        let mut x = input.clone();
        for s in 0..s_max {
            let p = encoder_prefix(m, s);
            let width = cfg.encoder_width(s);
            let cin = g.value(&x).channels();
            let mut h = x.clone();
            for j in 0..cfg.convs_per_encoder_stage[s] {
                let c = g.value(&h).channels();
                h = conv_bn_relu(g, &h, &format!("{p}.conv{j}"), &conv3(c, width), false)?;
            }
            let shortcut = if cin != width {
                biased_conv(g, &x, &format!("{p}.proj"), &pointwise(cin, width))?
            } else {
                x.clone()
            };
            let block = g.add(&h, &shortcut)?;
            if s + 1 < s_max {
                x = conv_bn_relu(g, &block, &format!("{p}.down"), &down(width, 2 * width), false)?;
            }
            stages.push(block);
        }
        per_encoder.push(stages);
    }

    let mut fused = Vec::with_capacity(s_max);
    for s in 0..s_max {
        let parts: Vec<G::Var> = per_encoder.iter().map(|e| e[s].clone()).collect();
        let cat = g.concat_channels(&parts)?;
        let spec = pointwise(cfg.num_modalities * cfg.encoder_width(s), cfg.fused_width(s));
        fused.push(biased_conv(g, &cat, &format!("fuse.stage{s}"), &spec)?);
    }
    Ok(EncoderFeatures { per_encoder, fused })
}

/// Runs the decoder and the 1³ head; returns pre-softmax logits.
pub fn decode<G: Graph>(g: &mut G, cfg: &MENetConfig, fused: &[G::Var]) -> Result<G::Var> {
    let s_max = cfg.num_stages;
    if fused.len() != s_max {
        return Err(Error::shape(format!(
            "expected {s_max} fused maps, got {}",
            fused.len()
        )));
    }
    for (s, f) in fused.iter().enumerate() {
        let c = g.value(f).channels();
        if c != cfg.fused_width(s) {
            return Err(Error::shape(format!(
                "fused map {s} has {c} channels, expected {}",
                cfg.fused_width(s)
            )));
        }
    }
    let mut h = g.dropout(&fused[s_max - 1], cfg.dropout_rate)?;
    for s in (0..s_max - 1).rev() {
        let p = format!("decoder.stage{s}");
        let width = cfg.fused_width(s);
        let upsampled = conv_bn_relu(g, &h, &format!("{p}.up"), &up(cfg.fused_width(s + 1), width), true)?;
        let mut x = g.concat_channels(&[upsampled.clone(), fused[s].clone()])?;
        for j in 0..cfg.convs_per_decoder_stage[s] {
            let c = g.value(&x).channels();
            x = conv_bn_relu(g, &x, &format!("{p}.conv{j}"), &conv3(c, width), false)?;
        }
        h = g.add(&x, &upsampled)?;
    }
    biased_conv(g, &h, "head", &pointwise(cfg.fused_width(0), cfg.num_classes))
}

/// Splits a `[b, d, h, w, 4]` patch into the four single-channel encoder
/// inputs, in FLAIR, T1, T1-CE, T2 order.
pub fn split_modalities(patch: &Tensor) -> Result<Vec<Tensor>> {
    let (_, _, c) = patch.dims5()?;
    if c != NUM_MODALITIES {
        return Err(Error::shape(format!(
            "patch has {c} channels, expected {NUM_MODALITIES}"
        )));
    }
    (0..c).map(|m| slice_channels(patch, m, 1)).collect()
}

/// Logits for a `[b, d, h, w, 4]` patch on any [`Graph`].
pub fn forward<G: Graph>(g: &mut G, cfg: &MENetConfig, patch: &Tensor) -> Result<G::Var> {
    let inputs: Vec<G::Var> = split_modalities(patch)?
        .into_iter()
        .map(|t| g.constant(t))
        .collect();
    let feats = encode(g, cfg, &inputs)?;
    decode(g, cfg, &feats.fused)
}

/// Records the training objective on `tape`: softmax probabilities and the
/// categorical Dice loss against a one-hot `target`.
pub fn record_loss(
    tape: &mut Tape<'_>,
    cfg: &MENetConfig,
    patch: &Tensor,
    target: &Tensor,
    weights: ClassWeights,
) -> Result<(NodeId, NodeId)> {
    let logits = forward(tape, cfg, patch)?;
    if tape.value_of(logits).shape() != target.shape() {
        return Err(Error::shape(format!(
            "target {:?} vs logits {:?}",
            target.shape(),
            tape.value_of(logits).shape()
        )));
    }
    let probs = tape.softmax_channels(&logits)?;
    let loss = tape.categorical_dice_loss(probs, target.clone(), weights, SMOOTH)?;
    Ok((loss, probs))
}

/// Eager encoder pass over four `[b, d, h, w, 1]` modality tensors.
pub fn encoder_forward(params: &ModelParams, inputs: &[Tensor], mode: Mode) -> Result<EncoderFeatures<Tensor>> {
    let mut g = Eager::new(&params.store, mode, 0);
    encode(&mut g, &params.config, inputs)
}

/// Eager decoder pass; `seed` drives dropout in training mode.
pub fn decoder_forward(params: &ModelParams, fused: &[Tensor], mode: Mode, seed: u64) -> Result<Tensor> {
    let mut g = Eager::new(&params.store, mode, seed);
    decode(&mut g, &params.config, fused)
}

/// Class probabilities for a `[1, d, h, w, 4]` z-scored patch, in
/// inference mode.
pub fn predict_patch(params: &ModelParams, patch: &Tensor) -> Result<Tensor> {
    let mut g = Eager::new(&params.store, Mode::Infer, 0);
    let logits = forward(&mut g, &params.config, patch)?;
    g.softmax_channels(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(MENetConfig::default().validate().is_ok());
        assert!(MENetConfig::tiny().validate().is_ok());
        let mut bad = MENetConfig::tiny();
        bad.convs_per_decoder_stage = vec![1];
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        let mut bad = MENetConfig::tiny();
        bad.num_modalities = 2;
        assert!(bad.validate().is_err());
        let mut bad = MENetConfig::tiny();
        bad.convs_per_encoder_stage = vec![1, 4];
        assert!(bad.validate().is_err());
        assert!(build_menet(&bad, 0).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = MENetConfig::default();
        assert_eq!(MENetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn extent_divisibility() {
        let cfg = MENetConfig::default();
        assert!(cfg.validate_extent([64, 128, 128]).is_ok());
        assert!(cfg.validate_extent([64, 120, 128]).is_err());
    }

    #[test]
    fn default_kernel_extents() {
        let params = build_menet(&MENetConfig::default(), 0).unwrap();
        for (name, t) in params.store.params() {
            if !name.ends_with(".weight") {
                continue;
            }
            let k = &t.shape()[..3];
            if name.starts_with("fuse.") || name.starts_with("head") || name.ends_with("proj.weight") {
                assert_eq!(k, [1, 1, 1], "{name}");
            } else if name.ends_with("up.weight") {
                assert_eq!(k, [2, 2, 2], "{name}");
            } else {
                assert_eq!(k, [3, 3, 3], "{name}");
            }
        }
    }
}
