//! Conv/BN/linear encoder, its parameter store and forward graph.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{BatchStats, Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Error, Result};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Side length of the square input crops.
    pub input_size: usize,
    pub in_channels: usize,
    pub stages: Vec<ConvStage>,
    /// Odd convolution kernel size shared by all stages.
    pub kernel_size: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub use_batchnorm: bool,
    /// Weight of the newest batch when updating BN running statistics.
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 32,
            in_channels: 3,
            stages: [16, 32, 64, 128]
                .into_iter()
                .map(|channels| ConvStage { channels, stride: 2 })
                .collect(),
            kernel_size: 3,
            latent_dim: 128,
            num_classes: 10,
            use_batchnorm: true,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(invalid!("latent_dim must be at least 2, got {}", self.latent_dim));
        }
        if self.num_classes < 2 {
            return Err(invalid!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.stages.is_empty() {
            return Err(invalid!("encoder needs at least one conv stage"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(invalid!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.input_size == 0 || self.in_channels == 0 {
            return Err(invalid!("input must have positive size and channel count"));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(invalid!("conv stages need positive channels and stride"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(invalid!("bn_momentum must lie in [0, 1], got {}", self.bn_momentum));
        }
        let mut side = self.input_size;
        for s in &self.stages {
            if side + 2 * self.padding() < self.kernel_size {
                return Err(invalid!("input_size {} too small for the stage stack", self.input_size));
            }
            side = (side + 2 * self.padding() - self.kernel_size) / s.stride + 1;
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    fn pooled_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }
}

/// A named parameter array. Values are held in single precision, which is
/// also the on-disk format, so saved states reload exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err!("parameter shape {shape:?} needs {} values", data.len()));
        }
        Ok(ParamTensor { shape, data })
    }

    fn filled(shape: &[usize], v: f32) -> Self {
        ParamTensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("consistent shape")
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

pub const CLASSIFIER_PREFIX: &str = "classifier.";

fn stage_key(i: usize, rest: &str) -> String {
    format!("stage{i}.{rest}")
}

/// Whether the optimizer updates `name`. BN running statistics are buffers.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

/// Parameters of one encoder (student or teacher), keyed by layer name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EncoderState {
    params: BTreeMap<String, ParamTensor>,
}

impl EncoderState {
    /// He-normal conv kernels, unit BN scale, uniform linear layers.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let k = config.kernel_size;
        let mut in_c = config.in_channels;
        for (i, s) in config.stages.iter().enumerate() {
            let fan_in = in_c * k * k;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let w: Vec<f32> = (0..s.channels * fan_in).map(|_| normal.sample(&mut rng) as f32).collect();
            params.insert(stage_key(i, "conv.weight"), ParamTensor::new(vec![s.channels, in_c, k, k], w)?);
            if config.use_batchnorm {
                let c = [s.channels];
                params.insert(stage_key(i, "bn.weight"), ParamTensor::filled(&c, 1.0));
                params.insert(stage_key(i, "bn.bias"), ParamTensor::filled(&c, 0.0));
                params.insert(stage_key(i, "bn.running_mean"), ParamTensor::filled(&c, 0.0));
                params.insert(stage_key(i, "bn.running_var"), ParamTensor::filled(&c, 1.0));
            } else {
                params.insert(stage_key(i, "conv.bias"), ParamTensor::filled(&[s.channels], 0.0));
            }
            in_c = s.channels;
        }
        let mut linear = |name: &str, out: usize, inp: usize| -> Result<()> {
            let bound = 1.0 / (inp as f64).sqrt();
            let w = (0..out * inp).map(|_| rng.random_range(-bound..bound) as f32).collect();
            let b = (0..out).map(|_| rng.random_range(-bound..bound) as f32).collect();
            params.insert(format!("{name}.weight"), ParamTensor::new(vec![out, inp], w)?);
            params.insert(format!("{name}.bias"), ParamTensor::new(vec![out], b)?);
            Ok(())
        };
        let pooled = config.pooled_dim();
        linear("proj", config.latent_dim, pooled)?;
        linear("classifier", config.num_classes, pooled)?;
        Ok(EncoderState { params })
    }

    pub fn from_params(params: BTreeMap<String, ParamTensor>) -> Self {
        EncoderState { params }
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ParamTensor) {
        self.params.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn has_classifier(&self) -> bool {
        self.params.keys().any(|k| k.starts_with(CLASSIFIER_PREFIX))
    }

    /// The prompt path only: everything except the classifier head.
    pub fn without_classifier(&self) -> EncoderState {
        EncoderState {
            params: self
                .params
                .iter()
                .filter(|(k, _)| !k.starts_with(CLASSIFIER_PREFIX))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Checks that every parameter needed by `config` is present with the
    /// right shape. The classifier may be absent.
    pub fn check(&self, config: &EncoderConfig) -> Result<()> {
        config.validate()?;
        let reference = EncoderState::init(config, 0)?;
        for (name, p) in &reference.params {
            match self.params.get(name) {
                Some(q) if q.shape == p.shape => {}
                Some(q) => {
                    return Err(shape_err!("parameter {name}: expected {:?}, found {:?}", p.shape, q.shape))
                }
                None if name.starts_with(CLASSIFIER_PREFIX) => {}
                None => return Err(Error::Data(format!("missing parameter {name}"))),
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::Data(format!("unexpected parameter {extra}")));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("encoder state contains non-finite values".into()));
        }
        for (name, p) in &self.params {
            if name.ends_with(".running_var") && p.data.iter().any(|&v| v <= 0.0) {
                return Err(Error::Data(format!("{name} has non-positive entries")));
            }
        }
        Ok(())
    }

    /// Blends in the batch statistics of a training-mode forward pass.
    pub(crate) fn update_running_stats(&mut self, stats: &[(usize, BatchStats)], momentum: f64) {
        for (i, s) in stats {
            for (key, batch) in [("bn.running_mean", &s.mean), ("bn.running_var", &s.var)] {
                if let Some(p) = self.params.get_mut(&stage_key(*i, key)) {
                    for (r, b) in p.data.iter_mut().zip(batch) {
                        *r = ((1.0 - momentum) * f64::from(*r) + momentum * b) as f32;
                    }
                }
            }
        }
    }
}

/// `θ_t ← m·θ_t + (1−m)·θ_s` for every tensor, buffers included. The blend
/// is evaluated in double precision and rounded once to storage precision.
pub fn momentum_update(teacher: &EncoderState, student: &EncoderState, m: f64) -> Result<EncoderState> {
    if !(0.0..=1.0).contains(&m) {
        return Err(invalid!("momentum must lie in [0, 1], got {m}"));
    }
    if teacher.params.len() != student.params.len() {
        return Err(shape_err!(
            "teacher has {} tensors, student {}",
            teacher.params.len(),
            student.params.len()
        ));
    }
    let mut out = BTreeMap::new();
    for (name, t) in &teacher.params {
        let s = student
            .params
            .get(name)
            .ok_or_else(|| shape_err!("student lacks {name}"))?;
        if s.shape != t.shape {
            return Err(shape_err!("{name}: teacher {:?} vs student {:?}", t.shape, s.shape));
        }
        let data = t
            .data
            .iter()
            .zip(&s.data)
            .map(|(&a, &b)| (m * f64::from(a) + (1.0 - m) * f64::from(b)) as f32)
            .collect();
        out.insert(name.clone(), ParamTensor::new(t.shape.clone(), data)?);
    }
    Ok(EncoderState { params: out })
}

/// Output of the encoder for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    /// Unit-norm latent code.
    pub latent_code: Vec<f64>,
    /// Post-activation output of every stage, `[C, H, W]`.
    pub feature_maps: Vec<Tensor>,
    /// Absent when the state carries no classifier (exported encoders).
    pub class_logits: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN layers.
    Train,
    /// Running statistics in BN layers.
    Eval,
}

/// A recorded forward pass.
pub(crate) struct Graph {
    pub tape: Tape,
    pub params: BTreeMap<String, Var>,
    pub latent: Var,
    pub features: Vec<Var>,
    pub logits: Option<Var>,
    pub batch_stats: Vec<(usize, BatchStats)>,
}

/// Packs same-size images into an `[N, C, H, W]` batch. Gray images are
/// replicated across channels when the encoder expects colour.
pub fn images_to_tensor(config: &EncoderConfig, images: &[ImageTensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(invalid!("encoder input batch is empty"));
    }
    let s = config.input_size;
    let c = config.in_channels;
    let mut data = Vec::with_capacity(images.len() * c * s * s);
    for img in images {
        if img.height() != s || img.width() != s {
            return Err(shape_err!(
                "encoder expects {s}x{s} input, got {}x{}",
                img.width(),
                img.height()
            ));
        }
        let ic = img.channels();
        if ic != c && ic != 1 {
            return Err(shape_err!("encoder expects {c} channels, got {ic}"));
        }
        for ch in 0..c {
            let src = if ic == 1 { 0 } else { ch };
            for y in 0..s {
                for x in 0..s {
                    data.push(f64::from(img.get(y, x, src)));
                }
            }
        }
    }
    Tensor::new(vec![images.len(), c, s, s], data)
}

pub(crate) fn build_graph(state: &EncoderState, config: &EncoderConfig, input: Tensor, mode: Mode) -> Result<Graph> {
    let mut tape = Tape::new();
    let mut params = BTreeMap::new();
    for (name, p) in &state.params {
        if is_trainable(name) {
            params.insert(name.clone(), tape.leaf(p.to_tensor()));
        }
    }
    let param = |params: &BTreeMap<String, Var>, name: &str| -> Result<Var> {
        params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    };
    let mut x = tape.leaf(input);
    let mut features = Vec::with_capacity(config.stages.len());
    let mut batch_stats = Vec::new();
    for (i, s) in config.stages.iter().enumerate() {
        let w = param(&params, &stage_key(i, "conv.weight"))?;
        if config.use_batchnorm {
            let h = tape.conv2d(x, w, None, s.stride, config.padding())?;
            let g = param(&params, &stage_key(i, "bn.weight"))?;
            let b = param(&params, &stage_key(i, "bn.bias"))?;
            let (y, stats) = match mode {
                Mode::Train => tape.batch_norm(h, g, b, None)?,
                Mode::Eval => {
                    let rm = running(state, &stage_key(i, "bn.running_mean"))?;
                    let rv = running(state, &stage_key(i, "bn.running_var"))?;
                    tape.batch_norm(h, g, b, Some((&rm, &rv)))?
                }
            };
            if let Some(st) = stats {
                batch_stats.push((i, st));
            }
            x = tape.relu(y);
        } else {
            let b = param(&params, &stage_key(i, "conv.bias"))?;
            let h = tape.conv2d(x, w, Some(b), s.stride, config.padding())?;
            x = tape.relu(h);
        }
        features.push(x);
    }
    let pooled = tape.global_avg_pool(x)?;
    let z = tape.linear(pooled, param(&params, "proj.weight")?, param(&params, "proj.bias")?)?;
    let latent = tape.l2_normalize(z)?;
    let logits = match (params.get("classifier.weight"), params.get("classifier.bias")) {
        (Some(&w), Some(&b)) => Some(tape.linear(pooled, w, b)?),
        _ => None,
    };
    Ok(Graph {
        tape,
        params,
        latent,
        features,
        logits,
        batch_stats,
    })
}

fn running(state: &EncoderState, name: &str) -> Result<Vec<f64>> {
    state
        .get(name)
        .map(ParamTensor::to_f64)
        .ok_or_else(|| Error::Data(format!("missing buffer {name}")))
}

fn bundles(graph: &Graph) -> Vec<PromptBundle> {
    let latent = graph.tape.value(graph.latent);
    (0..latent.dim(0))
        .map(|i| PromptBundle {
            latent_code: latent.row(i).to_vec(),
            feature_maps: graph.features.iter().map(|&f| graph.tape.value(f).item(i)).collect(),
            class_logits: graph.logits.map(|l| graph.tape.value(l).row(i).to_vec()),
        })
        .collect()
}

/// Eval-mode forward pass of a batch.
pub fn encoder_forward_batch(
    state: &EncoderState,
    config: &EncoderConfig,
    images: &[ImageTensor],
) -> Result<Vec<PromptBundle>> {
    let input = images_to_tensor(config, images)?;
    let graph = build_graph(state, config, input, Mode::Eval)?;
    Ok(bundles(&graph))
}

/// Eval-mode forward pass of one image.
pub fn encoder_forward(state: &EncoderState, config: &EncoderConfig, image: &ImageTensor) -> Result<PromptBundle> {
    let mut out = encoder_forward_batch(state, config, std::slice::from_ref(image))?;
    Ok(out.remove(0))
}
