//! Student/teacher pre-training step and loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::encoder::{
    build_graph, encoder_forward_batch, images_to_tensor, momentum_update, EncoderConfig, EncoderState, Mode,
};
use super::losses::{content_loss, cross_entropy, dot, info_nce, kl_distill, style_loss};
use super::optim::{adamw_step, cosine_lr, AdamState, TrainConfig};
use super::queue::NegativeQueue;
use super::tensor::Tensor;
use super::toy::ToyDataset;
use crate::degrade::{batch_policy, child_seed, rng_from_seed, PolicyConfig};
use crate::error::{invalid, Error, Result};
use crate::image::ImageTensor;

const QUEUE_STREAM: u64 = 0x7175_6575;
const BATCH_STREAM: u64 = 0x6261_7463;
const DEGRADE_STREAM: u64 = 0x6465_6772;
const TEACHER_STREAM: u64 = 0x7465_6163;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_infonce: f64,
    pub w_content: f64,
    pub w_ce: f64,
    pub w_kl: f64,
    pub w_style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_infonce: 1.0,
            w_content: 1.0,
            w_ce: 1.0,
            w_kl: 1.0,
            w_style: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_infonce, self.w_content, self.w_ce, self.w_kl, self.w_style];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid!("loss weights must be finite and non-negative: {self:?}"));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step, plus their weighted sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub infonce: f64,
    pub content: f64,
    pub ce: f64,
    pub kl: f64,
    pub style: f64,
    /// Mean positive minus mean negative cosine similarity of the queries.
    pub pos_neg_gap: f64,
}

/// Everything that evolves during pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub student: EncoderState,
    pub teacher: EncoderState,
    pub queue: NegativeQueue,
    pub optimizer: AdamState,
    /// Completed iterations.
    pub iter: usize,
}

impl PretrainState {
    /// Fresh student, a teacher copied from it, and a queue of random unit
    /// keys.
    pub fn new(encoder: &EncoderConfig, train: &TrainConfig, seed: u64) -> Result<Self> {
        train.validate()?;
        let student = EncoderState::init(encoder, seed)?;
        let mut rng = rng_from_seed(child_seed(seed, QUEUE_STREAM));
        let queue = NegativeQueue::random(train.queue_capacity, encoder.latent_dim, &mut rng)?;
        Ok(PretrainState {
            teacher: student.clone(),
            student,
            queue,
            optimizer: AdamState::default(),
            iter: 0,
        })
    }
}

fn ensure_finite(name: &str, v: f64, acc: &mut Vec<String>) {
    if !v.is_finite() {
        acc.push(format!("{name}={v}"));
    }
}

/// One optimisation step on a batch of clean images and their labels.
///
/// The student sees the degraded batch in training mode; the teacher sees
/// the clean batch with running BN statistics and receives no gradient.
/// State is only modified when every loss term is finite.
pub fn pretrain_step(
    state: &mut PretrainState,
    encoder: &EncoderConfig,
    batch: &[ImageTensor],
    labels: &[usize],
    weights: &LossWeights,
    config: &TrainConfig,
    policy: &PolicyConfig,
    seed: u64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(invalid!("pretrain_step needs a non-empty batch"));
    }
    if labels.len() != batch.len() {
        return Err(invalid!("{} labels for {} images", labels.len(), batch.len()));
    }
    weights.validate()?;
    config.validate()?;
    let n = batch.len();
    let nf = n as f64;
    let lr = cosine_lr(state.iter.min(config.total_iters), config)?;

    let student_input = if config.degrade {
        let items = batch_policy(batch, seed, policy)?;
        items.into_iter().map(|d| d.image).collect::<Vec<_>>()
    } else {
        batch.to_vec()
    };
    let graph = build_graph(&state.student, encoder, images_to_tensor(encoder, &student_input)?, Mode::Train)?;
    let teacher = build_graph(&state.teacher, encoder, images_to_tensor(encoder, batch)?, Mode::Eval)?;

    let q = graph.tape.value(graph.latent);
    let k = teacher.tape.value(teacher.latent);
    let d = q.dim(1);

    let mut infonce = 0.0;
    let mut g_latent = Vec::with_capacity(n * d);
    let mut pos = 0.0;
    for i in 0..n {
        let (l, g) = info_nce(q.row(i), k.row(i), &state.queue, config.temperature)?;
        infonce += l / nf;
        g_latent.extend(g.into_iter().map(|v| v / nf));
        pos += dot(q.row(i), k.row(i)) / nf;
    }
    let mut neg = 0.0;
    for i in 0..n {
        for key in state.queue.iter() {
            neg += dot(q.row(i), key);
        }
    }
    neg /= nf * state.queue.len() as f64;

    let fs: Vec<Tensor> = graph.features.iter().map(|&v| graph.tape.value(v).clone()).collect();
    let ft: Vec<Tensor> = teacher.features.iter().map(|&v| teacher.tape.value(v).clone()).collect();
    let (content, g_content) = content_loss(&fs, &ft)?;
    let (style, g_style) = if weights.w_style > 0.0 {
        let (l, g) = style_loss(&fs, &ft)?;
        (l, Some(g))
    } else {
        (0.0, None)
    };

    let (mut ce, mut kl) = (0.0, 0.0);
    let mut g_logits = None;
    if let (Some(ls), Some(lt)) = (graph.logits, teacher.logits) {
        let (ls, lt) = (graph.tape.value(ls), teacher.tape.value(lt));
        let classes = ls.dim(1);
        let mut g = vec![0.0; n * classes];
        for i in 0..n {
            let (l, gc) = cross_entropy(ls.row(i), labels[i])?;
            ce += l / nf;
            let (lk, gk) = kl_distill(lt.row(i), ls.row(i), config.kl_temperature)?;
            kl += lk / nf;
            for ((dst, a), b) in g[i * classes..(i + 1) * classes].iter_mut().zip(&gc).zip(&gk) {
                *dst = (weights.w_ce * a + weights.w_kl * b) / nf;
            }
        }
        g_logits = Some(Tensor::new(ls.shape().to_vec(), g)?);
    } else if weights.w_ce > 0.0 || weights.w_kl > 0.0 {
        return Err(Error::Data("classification losses need a classifier head".into()));
    }

    let total = weights.w_infonce * infonce
        + weights.w_content * content
        + weights.w_ce * ce
        + weights.w_kl * kl
        + weights.w_style * style;
    let breakdown = LossBreakdown {
        total,
        infonce,
        content,
        ce,
        kl,
        style,
        pos_neg_gap: pos - neg,
    };
    let mut bad = Vec::new();
    for (name, v) in [
        ("total", total),
        ("infonce", infonce),
        ("content", content),
        ("ce", ce),
        ("kl", kl),
        ("style", style),
    ] {
        ensure_finite(name, v, &mut bad);
    }
    if !bad.is_empty() {
        return Err(Error::NonFinite(format!("iteration {}: {}", state.iter + 1, bad.join(", "))));
    }

    let mut seeds = Vec::new();
    if weights.w_infonce > 0.0 {
        let g = Tensor::new(q.shape().to_vec(), g_latent)?.scale(weights.w_infonce);
        seeds.push((graph.latent, g));
    }
    for (i, &fv) in graph.features.iter().enumerate() {
        let mut g = Tensor::zeros(fs[i].shape());
        let mut used = false;
        if weights.w_content > 0.0 {
            g.add_scaled(&g_content[i], weights.w_content);
            used = true;
        }
        if let Some(gs) = &g_style {
            g.add_scaled(&gs[i], weights.w_style);
            used = true;
        }
        if used {
            seeds.push((fv, g));
        }
    }
    if let (Some(lv), Some(g)) = (graph.logits, g_logits) {
        if weights.w_ce > 0.0 || weights.w_kl > 0.0 {
            seeds.push((lv, g));
        }
    }
    let mut grads = graph.tape.backward(seeds)?;
    let mut param_grads = BTreeMap::new();
    for (name, &v) in &graph.params {
        let g = grads
            .take(v)
            .unwrap_or_else(|| Tensor::zeros(graph.tape.value(v).shape()));
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("iteration {}: gradient of {name}", state.iter + 1)));
        }
        param_grads.insert(name.clone(), g);
    }
    let keys: Vec<Vec<f64>> = (0..n).map(|i| k.row(i).to_vec()).collect();

    adamw_step(&mut state.student, &param_grads, &mut state.optimizer, lr, config)?;
    state.student.update_running_stats(&graph.batch_stats, encoder.bn_momentum);
    state.teacher = momentum_update(&state.teacher, &state.student, config.momentum)?;
    for key in &keys {
        state.queue.enqueue(key)?;
    }
    state.iter += 1;
    Ok(breakdown)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_infonce: f64,
    pub loss_content: f64,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub pos_neg_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDataConfig {
    pub per_class: usize,
    pub heldout_per_class: usize,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        ToyDataConfig {
            per_class: 64,
            heldout_per_class: 20,
        }
    }
}

pub const PRETRAIN_SCHEMA_VERSION: u32 = 1;

/// Complete description of a pre-training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub policy: PolicyConfig,
    pub data: ToyDataConfig,
    /// Write a full checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            schema_version: PRETRAIN_SCHEMA_VERSION,
            seed: 0,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            policy: PolicyConfig::default(),
            data: ToyDataConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    /// Settings for the built-in texture task: 500 iterations with a faster
    /// teacher than the large-scale default.
    pub fn toy() -> Self {
        PretrainConfig {
            train: TrainConfig {
                total_iters: 500,
                lr_max: 1e-3,
                momentum: 0.99,
                ..TrainConfig::default()
            },
            ..PretrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != PRETRAIN_SCHEMA_VERSION {
            return Err(invalid!(
                "unsupported pretrain schema_version {} (expected {PRETRAIN_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.encoder.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        if self.encoder.num_classes < super::toy::TOY_CLASSES {
            return Err(invalid!(
                "toy data has {} classes but the classifier has {}",
                super::toy::TOY_CLASSES,
                self.encoder.num_classes
            ));
        }
        if self.data.per_class == 0 {
            return Err(invalid!("data.per_class must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PretrainConfig = serde_json::from_str(text).map_err(|e| Error::json("pretrain config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_set(&self) -> Result<ToyDataset> {
        ToyDataset::generate(self.data.per_class, self.encoder.input_size, self.seed)
    }

    pub fn heldout_set(&self) -> Result<ToyDataset> {
        ToyDataset::generate(
            self.data.heldout_per_class.max(1),
            self.encoder.input_size,
            child_seed(self.seed, TEACHER_STREAM),
        )
    }
}

/// Where and how often to write checkpoints during [`pretrain_loop`].
#[derive(Clone, Debug)]
pub struct CheckpointPlan {
    pub dir: PathBuf,
    pub every: usize,
}

pub struct PretrainOutcome {
    pub state: PretrainState,
    pub log: Vec<LogRecord>,
    pub skipped_steps: usize,
}

/// Runs `config.train.total_iters` steps over `dataset`. Batch composition
/// and degradations depend only on `config.seed` and the iteration number.
/// Each log record is also written as one JSON line to `log_sink`.
pub fn pretrain_loop(
    dataset: &ToyDataset,
    config: &PretrainConfig,
    mut log_sink: Option<&mut dyn Write>,
    checkpoints: Option<&CheckpointPlan>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid!("pretrain_loop needs a non-empty dataset"));
    }
    let train = &config.train;
    let mut state = PretrainState::new(&config.encoder, train, config.seed)?;
    let mut log = Vec::with_capacity(train.total_iters);
    let mut streak = 0;
    let mut skipped = 0;
    for t in 0..train.total_iters {
        let mut rng = rng_from_seed(child_seed(config.seed ^ BATCH_STREAM, t as u64));
        let bs = train.batch_size.min(dataset.len());
        let idx = sample(&mut rng, dataset.len(), bs).into_vec();
        let images: Vec<ImageTensor> = idx.iter().map(|&i| dataset.images[i].clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
        let lr = cosine_lr(state.iter.min(train.total_iters), train)?;
        let degrade_seed = child_seed(config.seed ^ DEGRADE_STREAM, t as u64);
        match pretrain_step(
            &mut state,
            &config.encoder,
            &images,
            &labels,
            &config.weights,
            train,
            &config.policy,
            degrade_seed,
        ) {
            Ok(b) => {
                streak = 0;
                let rec = LogRecord {
                    iter: t + 1,
                    lr,
                    loss_total: b.total,
                    loss_infonce: b.infonce,
                    loss_content: b.content,
                    loss_ce: b.ce,
                    loss_kl: b.kl,
                    pos_neg_gap: b.pos_neg_gap,
                };
                if let Some(sink) = log_sink.as_deref_mut() {
                    let line = serde_json::to_string(&rec).expect("log record serializes");
                    writeln!(sink, "{line}").map_err(|e| Error::io("training log", e))?;
                }
                log.push(rec);
            }
            Err(e) if e.is_numerical() => {
                streak += 1;
                skipped += 1;
                log::warn!("skipping iteration {}: {e}", t + 1);
                if streak > train.max_nonfinite_streak {
                    return Err(Error::NonFinite(format!(
                        "{streak} consecutive non-finite steps, last at iteration {}: {e}",
                        t + 1
                    )));
                }
                state.iter += 1;
            }
            Err(e) => return Err(e),
        }
        if let Some(plan) = checkpoints {
            if plan.every > 0 && (t + 1) % plan.every == 0 {
                let path = plan.dir.join(format!("checkpoint_{:06}.safetensors", t + 1));
                super::export::save_checkpoint(&state, config, &path)?;
            }
        }
    }
    Ok(PretrainOutcome {
        state,
        log,
        skipped_steps: skipped,
    })
}

/// Top-1 accuracy of the classifier head in eval mode.
pub fn classifier_accuracy(state: &EncoderState, config: &EncoderConfig, data: &ToyDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid!("accuracy needs a non-empty dataset"));
    }
    let mut correct = 0usize;
    for (imgs, labels) in data.images.chunks(64).zip(data.labels.chunks(64)) {
        for (b, &label) in encoder_forward_batch(state, config, imgs)?.iter().zip(labels) {
            let logits = b
                .class_logits
                .as_ref()
                .ok_or_else(|| Error::Data("state has no classifier head".into()))?;
            let argmax = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            correct += usize::from(argmax == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean `q·k⁺ − q·k⁻` on `data`: queries from the student on degraded
/// images, positives from the teacher on the clean originals, negatives from
/// the queue. Both encoders run in eval mode.
pub fn contrastive_gap(
    state: &PretrainState,
    config: &EncoderConfig,
    data: &ToyDataset,
    policy: &PolicyConfig,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || state.queue.is_empty() {
        return Err(invalid!("contrastive_gap needs data and a non-empty queue"));
    }
    let degraded: Vec<ImageTensor> = batch_policy(&data.images, seed, policy)?
        .into_iter()
        .map(|d| d.image)
        .collect();
    let q = encoder_forward_batch(&state.student, config, &degraded)?;
    let k = encoder_forward_batch(&state.teacher, config, &data.images)?;
    let (mut pos, mut neg) = (0.0, 0.0);
    for (qi, ki) in q.iter().zip(&k) {
        pos += dot(&qi.latent_code, &ki.latent_code);
        neg += state.queue.iter().map(|key| dot(&qi.latent_code, key)).sum::<f64>() / state.queue.len() as f64;
    }
    Ok((pos - neg) / data.len() as f64)
}
