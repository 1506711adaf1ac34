//! Pretraining: AdamW, the step learning-rate schedule, the paired-view
//! training loop, metrics logging and DCC1 checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::skd::write_atomic;
use crate::data::{sample_positive_pair, AugmentationConfig, Dataset, ModalityBundle, PairSampler};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::{baseline_loss_grad, total_loss_grad, GlobalProjection, LossBreakdown, LossConfig, ModalityProjections, ProjectedFeatures};
use crate::model::{assemble_projections, sample_gradient, Architecture, BatchProjections, Model, ModelConfig, SampleForward};
use crate::nn::ParamBuf;

/// Samples whose gradients are accumulated into one buffer before the
/// ordered cross-chunk reduction.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub base_lr: f64,
    pub drop_lr: f64,
    pub drop_epoch: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub multiview: bool,
    pub loss: LossConfig,
    pub augment: AugmentationConfig,
    pub model: ModelConfig,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Also log one metrics line per optimizer step.
    #[serde(default)]
    pub log_steps: bool,
}

impl TrainConfig {
    /// CPU-sized run on the synthetic benchmark.
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        Self {
            batch_size: 64,
            max_epochs: 30,
            base_lr: 5e-4,
            drop_lr: 5e-5,
            drop_epoch: 24,
            weight_decay: 1e-5,
            seed: 0,
            multiview: true,
            loss: LossConfig::default(),
            augment: AugmentationConfig {
                t_out: model.t_out,
                ..AugmentationConfig::default()
            },
            model,
            checkpoint_every: 0,
            log_steps: false,
        }
    }

    /// NTU-60 / NTU-120 schedule: 450 epochs, drop at 350, batch 512.
    pub fn ntu() -> Self {
        let model = ModelConfig::full_scale();
        Self {
            batch_size: 512,
            max_epochs: 450,
            drop_epoch: 350,
            augment: AugmentationConfig {
                t_out: model.t_out,
                ..AugmentationConfig::default()
            },
            model,
            ..Self::desk()
        }
    }

    /// PKU-MMD schedule: drop at 800.
    pub fn pku() -> Self {
        Self {
            max_epochs: 1000,
            drop_epoch: 800,
            ..Self::ntu()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "ntu" => Ok(Self::ntu()),
            "pku" => Ok(Self::pku()),
            _ => Err(Error::config(format!("unknown preset {name:?} (desk, ntu, pku)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.drop_epoch == 0 || self.drop_epoch > self.max_epochs {
            return Err(Error::config(format!(
                "drop_epoch ({}) must be in 1..=max_epochs ({})",
                self.drop_epoch, self.max_epochs
            )));
        }
        for (name, v) in [("base_lr", self.base_lr), ("drop_lr", self.drop_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.augment.t_out != self.model.t_out {
            return Err(Error::config(format!(
                "augment.t_out ({}) differs from model.t_out ({})",
                self.augment.t_out, self.model.t_out
            )));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.model.validate()
    }
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.drop_epoch {
        cfg.base_lr
    } else {
        cfg.drop_lr
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let update = (m / c1) / ((v / c2).sqrt() + self.eps) + self.weight_decay * params[i] as f64;
            params[i] = (params[i] as f64 - lr * update) as f32;
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step {
        step: u64,
        epoch: usize,
        #[serde(rename = "L_d_t")]
        l_d_t: f64,
        #[serde(rename = "L_d_s")]
        l_d_s: f64,
        #[serde(rename = "L_d")]
        l_d: f64,
        #[serde(rename = "L_c")]
        l_c: f64,
        #[serde(rename = "L_reg")]
        l_reg: f64,
        total: f64,
        lr: f64,
    },
    Epoch {
        epoch: usize,
        steps: usize,
        #[serde(rename = "L_d_t")]
        l_d_t: f64,
        #[serde(rename = "L_d_s")]
        l_d_s: f64,
        #[serde(rename = "L_d")]
        l_d: f64,
        #[serde(rename = "L_c")]
        l_c: f64,
        #[serde(rename = "L_reg")]
        l_reg: f64,
        total: f64,
        lr: f64,
        seconds: f64,
    },
}

impl MetricRecord {
    fn step(step: u64, epoch: usize, b: &LossBreakdown, lr: f64) -> Self {
        MetricRecord::Step {
            step,
            epoch,
            l_d_t: b.l_d_t,
            l_d_s: b.l_d_s,
            l_d: b.l_d,
            l_c: b.l_c,
            l_reg: b.l_reg,
            total: b.total,
            lr,
        }
    }

    pub fn total(&self) -> f64 {
        match self {
            MetricRecord::Step { total, .. } | MetricRecord::Epoch { total, .. } => *total,
        }
    }
}

/// Metrics kept in memory and optionally appended to a JSON-lines file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
    writer: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            records: Vec::new(),
            writer: Some(BufWriter::new(f)),
        })
    }

    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &r)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn epochs(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(|r| matches!(r, MetricRecord::Epoch { .. }))
    }

    pub fn steps(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(|r| matches!(r, MetricRecord::Step { .. }))
    }
}

/// Replaces the target side (unimodal and composed projections) of `preds`
/// with those of `targets`.
fn cross(targets: &BatchProjections, preds: &BatchProjections) -> BatchProjections {
    match (targets, preds) {
        (BatchProjections::Full(t), BatchProjections::Full(p)) => BatchProjections::Full(ProjectedFeatures {
            modalities: t
                .modalities
                .iter()
                .zip(&p.modalities)
                .map(|(a, b)| ModalityProjections {
                    modality: a.modality,
                    unimodal: a.unimodal.clone(),
                    decomposed: b.decomposed.clone(),
                })
                .collect(),
            composed: t.composed.clone(),
            fused: p.fused.clone(),
        }),
        (BatchProjections::Baseline(t), BatchProjections::Baseline(p)) => BatchProjections::Baseline(
            t.iter()
                .zip(p)
                .map(|(a, b)| GlobalProjection {
                    modality: a.modality,
                    unimodal: a.unimodal.clone(),
                    decomposed: b.decomposed.clone(),
                })
                .collect(),
        ),
        _ => unreachable!("both pair elements come from one model"),
    }
}

fn scale(p: &mut BatchProjections, k: f64) {
    match p {
        BatchProjections::Full(f) => {
            for m in f.matrices_mut() {
                *m *= k;
            }
        }
        BatchProjections::Baseline(v) => {
            for g in v {
                g.unimodal *= k;
                g.decomposed *= k;
            }
        }
    }
}

/// Loss and projection gradients for one batch.
pub fn objective(p: &BatchProjections, cfg: &LossConfig) -> Result<(LossBreakdown, BatchProjections)> {
    match p {
        BatchProjections::Full(f) => {
            let (b, g) = total_loss_grad(f, cfg)?;
            Ok((b, BatchProjections::Full(g)))
        }
        BatchProjections::Baseline(v) => {
            let (b, g) = baseline_loss_grad(v, cfg)?;
            let g = v
                .iter()
                .zip(g)
                .map(|(m, (u, d))| GlobalProjection {
                    modality: m.modality,
                    unimodal: u,
                    decomposed: d,
                })
                .collect();
            Ok((b, BatchProjections::Baseline(g)))
        }
    }
}

/// Symmetrized pair objective. Each element takes its decomposition and
/// composition targets from the other element; the two directional losses
/// are averaged. Returns the breakdown and the projection gradients of the
/// first and second elements.
pub fn pair_objective(a: &BatchProjections, b: &BatchProjections, cfg: &LossConfig) -> Result<(LossBreakdown, BatchProjections, BatchProjections)> {
    let (la, ga) = objective(&cross(b, a), cfg)?;
    let (lb, gb) = objective(&cross(a, b), cfg)?;
    let mut grad_a = cross(&gb, &ga);
    let mut grad_b = cross(&ga, &gb);
    scale(&mut grad_a, 0.5);
    scale(&mut grad_b, 0.5);
    Ok((LossBreakdown::mean(&[la, lb]), grad_a, grad_b))
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::config(format!("invalid rng seed {:?}", self.seed));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

pub const CHECKPOINT_FORMAT: &str = "DCC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    step: u64,
    rng_state: Option<RngState>,
    adam_t: u64,
    /// Parameter tensors in blob order. When `has_optimizer` the Adam first
    /// and second moments follow in the same order.
    tensors: Vec<TensorEntry>,
    has_optimizer: bool,
}

/// Model parameters plus, optionally, optimizer and loop state.
///
/// File layout: one line of UTF-8 JSON header terminated by `\n`, then every
/// tensor as little-endian `f32` in header order (parameters, then Adam `m`,
/// then Adam `v`).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng_state: Option<RngState>,
    pub params: Vec<f32>,
    pub optimizer: Option<AdamW>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Self {
            model: model.config().clone(),
            train: None,
            epoch: 0,
            step: 0,
            rng_state: None,
            params: model.params.data.clone(),
            optimizer: None,
            tensors: tensor_entries(&model.arch),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            step: self.step,
            rng_state: self.rng_state.clone(),
            adam_t: self.optimizer.as_ref().map_or(0, |o| o.t),
            tensors: self.tensors.clone(),
            has_optimizer: self.optimizer.is_some(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        let mut put = |xs: &[f32]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(&self.params);
        if let Some(o) = &self.optimizer {
            put(&o.m);
            put(&o.v);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let nl = buf
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(0, "checkpoint header line is not terminated"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&buf[..nl]).map_err(|e| Error::format(0, format!("invalid checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format(0, format!("format {:?}, expected {CHECKPOINT_FORMAT}", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(0, format!("version {}, expected {CHECKPOINT_VERSION}", header.version)));
        }
        let n: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let blobs = if header.has_optimizer { 3 } else { 1 };
        let body = &buf[nl + 1..];
        if body.len() != n * blobs * 4 {
            return Err(Error::format(
                (nl + 1) as u64,
                format!("tensor data is {} bytes, header declares {}", body.len(), n * blobs * 4),
            ));
        }
        let floats: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let params = floats[..n].to_vec();
        let optimizer = header.has_optimizer.then(|| {
            let wd = header.train.as_ref().map_or(0.0, |t| t.weight_decay);
            let mut o = AdamW::new(n, wd);
            o.m = floats[n..2 * n].to_vec();
            o.v = floats[2 * n..].to_vec();
            o.t = header.adam_t;
            o
        });
        Ok(Self {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            step: header.step,
            rng_state: header.rng_state,
            params,
            optimizer,
            tensors: header.tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Checks the stored tensors against `arch`, naming the first mismatch.
    pub fn check_compatible(&self, arch: &Architecture) -> Result<()> {
        let want = tensor_entries(arch);
        for (i, w) in want.iter().enumerate() {
            match self.tensors.get(i) {
                Some(t) if t == w => {}
                Some(t) => {
                    return Err(Error::Schema(format!(
                        "checkpoint tensor {} has shape {:?}, model expects {} with shape {:?}",
                        t.name, t.shape, w.name, w.shape
                    )))
                }
                None => return Err(Error::Schema(format!("checkpoint lacks tensor {} {:?}", w.name, w.shape))),
            }
        }
        if let Some(extra) = self.tensors.get(want.len()) {
            return Err(Error::Schema(format!("checkpoint has unexpected tensor {} {:?}", extra.name, extra.shape)));
        }
        Ok(())
    }

    /// Model with the stored configuration and parameters.
    pub fn to_model(&self) -> Result<Model<f32>> {
        self.to_model_as(&self.model)
    }

    /// Loads the parameters into a model built from `cfg`.
    pub fn to_model_as(&self, cfg: &ModelConfig) -> Result<Model<f32>> {
        let arch = Architecture::new(cfg)?;
        self.check_compatible(&arch)?;
        let arch = std::sync::Arc::new(arch);
        let mut params = ParamBuf::zeros(arch.layout().clone());
        params.data.copy_from_slice(&self.params);
        Ok(Model { arch, params })
    }
}

fn tensor_entries(arch: &Architecture) -> Vec<TensorEntry> {
    arch.layout()
        .specs()
        .iter()
        .map(|s| TensorEntry {
            name: s.name.clone(),
            shape: s.shape.clone(),
        })
        .collect()
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    Checkpoint::load(path)?.to_model()
}

/// Pretraining state: model, optimizer, epoch counter and the loop rng.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub opt: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    rng: ChaCha8Rng,
    exec: Execution,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        init.set_stream(1);
        let model = Model::new(&cfg.model, &mut init)?;
        let opt = AdamW::new(model.params.data.len(), cfg.weight_decay);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            exec: Execution::default(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// schedule (`max_epochs` and friends) is taken from `cfg`; the model
    /// configuration must match the stored one.
    pub fn resume(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.model = ckpt.to_model_as(&cfg.model)?;
        let mut opt = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::Schema("checkpoint has no optimizer state".into()))?;
        opt.weight_decay = cfg.weight_decay;
        t.opt = opt;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        t.rng = ckpt
            .rng_state
            .as_ref()
            .ok_or_else(|| Error::Schema("checkpoint has no rng state".into()))?
            .restore()?;
        Ok(t)
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            train: Some(self.cfg.clone()),
            epoch: self.epoch,
            step: self.step,
            rng_state: Some(RngState::capture(&self.rng)),
            optimizer: Some(self.opt.clone()),
            ..Checkpoint::from_model(&self.model)
        }
    }

    fn batch_bundles(&self, data: &Dataset, sampler: &PairSampler, perf: &[usize], seed: u64) -> Result<Vec<(ModalityBundle, ModalityBundle)>> {
        let mods = &self.cfg.model.modalities;
        let aug = &self.cfg.augment;
        self.exec
            .map_range(perf.len(), |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let (a, b) = sample_positive_pair(data, sampler, perf[i], aug, &mut rng)?;
                Ok((
                    ModalityBundle::from_joints(a.coords.view(), &data.topology, mods)?,
                    ModalityBundle::from_joints(b.coords.view(), &data.topology, mods)?,
                ))
            })
            .into_iter()
            .collect()
    }

    /// Forward, symmetric pair loss and backward for one batch of
    /// performances. Returns the loss and the summed parameter gradient.
    pub fn batch_gradient(&self, pairs: &[(ModalityBundle, ModalityBundle)]) -> Result<(LossBreakdown, ParamBuf<f32>)> {
        let model = &self.model;
        let n = pairs.len();
        let fwd: Vec<SampleForward<f32>> = self
            .exec
            .map_range(2 * n, |i| {
                let (a, b) = &pairs[i / 2];
                model.forward_sample(if i % 2 == 0 { a } else { b })
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let mods = &self.cfg.model.modalities;
        let side = |k: usize| {
            let p: Vec<_> = fwd.iter().skip(k).step_by(2).map(|f| f.projections()).collect();
            assemble_projections(mods, &p)
        };
        let (pa, pb) = (side(0)?, side(1)?);
        let (loss, ga, gb) = pair_objective(&pa, &pb, &self.cfg.loss)?;
        if !loss.is_finite() {
            return Ok((loss, model.zero_grads()));
        }
        let n_chunks = (2 * n).div_ceil(GRAD_CHUNK);
        let partial: Vec<ParamBuf<f32>> = self
            .exec
            .map_range(n_chunks, |c| {
                let mut g = model.zero_grads();
                for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(2 * n) {
                    let dz = sample_gradient(if i % 2 == 0 { &ga } else { &gb }, i / 2);
                    model.backward_sample(&fwd[i], &dz, &mut g)?;
                }
                Ok(g)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let mut it = partial.into_iter();
        let mut total = it.next().expect("nonempty batch");
        for g in it {
            total.add_assign(&g);
        }
        Ok((loss, total))
    }

    /// Runs one epoch, pushing step (optional) and epoch records.
    pub fn run_epoch(&mut self, data: &Dataset, sampler: &PairSampler, log: &mut MetricsLog) -> Result<LossBreakdown> {
        let started = Instant::now();
        let bs = self.cfg.batch_size;
        if sampler.len() < bs {
            return Err(Error::config(format!(
                "dataset has {} performances, fewer than batch_size {bs}",
                sampler.len()
            )));
        }
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.cfg);
        let mut order: Vec<usize> = (0..sampler.len()).collect();
        order.shuffle(&mut self.rng);
        let mut parts = Vec::new();
        for (batch_id, perf) in order.chunks_exact(bs).enumerate() {
            let seed: u64 = self.rng.random();
            let pairs = self.batch_bundles(data, sampler, perf, seed)?;
            let (loss, grads) = self.batch_gradient(&pairs)?;
            if !loss.is_finite() || grads.data.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss in epoch {epoch} batch {batch_id} (step {}): {}",
                    self.step,
                    serde_json::to_string(&loss).unwrap_or_default()
                )));
            }
            self.opt.step(&mut self.model.params.data, &grads.data, lr);
            self.step += 1;
            if self.cfg.log_steps {
                log.push(MetricRecord::step(self.step, epoch, &loss, lr))?;
            }
            parts.push(loss);
        }
        let mean = LossBreakdown::mean(&parts);
        self.epoch += 1;
        log.push(MetricRecord::Epoch {
            epoch,
            steps: parts.len(),
            l_d_t: mean.l_d_t,
            l_d_s: mean.l_d_s,
            l_d: mean.l_d,
            l_c: mean.l_c,
            l_reg: mean.l_reg,
            total: mean.total,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        })?;
        log::info!("epoch {epoch}: total {:.5} lr {lr:e}", mean.total);
        Ok(mean)
    }

    /// Trains until `max_epochs`, writing checkpoints to `checkpoint` at the
    /// configured cadence and after the last epoch.
    pub fn fit(&mut self, data: &Dataset, log: &mut MetricsLog, checkpoint: Option<&Path>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::config("cannot pretrain on an empty dataset"));
        }
        data.validate()?;
        if data.topology.n_joints() != self.cfg.model.n_joints {
            return Err(Error::shape(format!(
                "dataset has {} joints, model expects {}",
                data.topology.n_joints(),
                self.cfg.model.n_joints
            )));
        }
        let sampler = PairSampler::new(data, self.cfg.multiview);
        while self.epoch < self.cfg.max_epochs {
            self.run_epoch(data, &sampler, log)?;
            let every = self.cfg.checkpoint_every;
            let last = self.epoch == self.cfg.max_epochs;
            if let Some(path) = checkpoint {
                if last || (every > 0 && self.epoch % every == 0) {
                    self.checkpoint().save(path)?;
                }
            }
        }
        Ok(())
    }
}

/// Trains a fresh model on `data`.
pub fn pretrain(data: &Dataset, cfg: &TrainConfig, log: &mut MetricsLog, checkpoint: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(cfg)?;
    t.fit(data, log, checkpoint)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::losses::fixtures::random_projected as random_batch;
    use crate::model::Objective;

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.model.d_model = 16;
        cfg.model.t_out = 8;
        cfg.augment.t_out = 8;
        cfg.batch_size = 8;
        cfg.max_epochs = 3;
        cfg.drop_epoch = 2;
        cfg.log_steps = true;
        cfg
    }

    fn small_data(seed: u64) -> Dataset {
        synth_generate(&SynthConfig {
            n_performances: 24,
            n_frames: 12,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn schedule_examples() {
        let ntu = TrainConfig::ntu();
        assert_eq!(lr_schedule(0, &ntu), 5e-4);
        assert_eq!(lr_schedule(349, &ntu), 5e-4);
        assert_eq!(lr_schedule(350, &ntu), 5e-5);
        let pku = TrainConfig::pku();
        assert_eq!(lr_schedule(800, &pku), 5e-5);
        assert_eq!(lr_schedule(799, &pku), 5e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::ntu().validate().is_ok());
        let mut c = TrainConfig::desk();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.drop_epoch = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.drop_epoch = c.max_epochs + 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.augment.t_out = 32;
        assert!(c.validate().is_err());
        assert!(TrainConfig::preset("bogus").is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = TrainConfig::ntu();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
    }

    #[test]
    fn adamw_matches_hand_computation() {
        let mut opt = AdamW::new(2, 0.1);
        let mut p = vec![1.0f32, -2.0];
        opt.step(&mut p, &[0.5, 0.0], 0.01);
        // First step: m_hat = g, v_hat = g^2, so the Adam update is sign(g).
        assert!((p[0] - (1.0 - 0.01 * (1.0 + 0.1))).abs() < 1e-6);
        assert!((p[1] - (-2.0 - 0.01 * (-0.2))).abs() < 1e-6);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn degenerate_pair_reduces_to_single_input_objective() {
        let p = random_batch(3, 6, 8, 1);
        let bp = BatchProjections::Full(p.clone());
        let (l, ga, gb) = pair_objective(&bp, &bp, &LossConfig::default()).unwrap();
        let (single, g) = total_loss_grad(&p, &LossConfig::default()).unwrap();
        assert!((l.total - single.total).abs() <= 1e-12 * single.total.max(1.0));
        // Each element receives half of the single-input gradient.
        let (BatchProjections::Full(ga), BatchProjections::Full(gb)) = (ga, gb) else { panic!() };
        for ((x, y), z) in ga.matrices().iter().zip(gb.matrices()).zip(g.matrices()) {
            let sum = x.1 + y.1;
            assert!((&sum - z.1).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let a = random_batch(2, 5, 4, 2);
        let b = random_batch(2, 5, 4, 3);
        let (_, ga, _) = pair_objective(&BatchProjections::Full(a.clone()), &BatchProjections::Full(b.clone()), &cfg).unwrap();
        let BatchProjections::Full(ga) = ga else { panic!() };
        let h = 1e-5;
        let n_mats = a.matrices().len();
        for mi in 0..n_mats {
            for idx in [(0, 0), (3, 2)] {
                let eval = |delta: f64| {
                    let mut a2 = a.clone();
                    a2.matrices_mut()[mi][idx] += delta;
                    let (l, _, _) = pair_objective(&BatchProjections::Full(a2), &BatchProjections::Full(b.clone()), &cfg).unwrap();
                    l.total
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = ga.matrices()[mi].1[idx];
                assert!((num - ana).abs() <= 1e-5 * (1.0 + num.abs()), "matrix {mi}: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn training_logs_satisfy_loss_identity_and_moves_parameters() {
        let data = small_data(1);
        let cfg = small_cfg();
        let mut log = MetricsLog::in_memory();
        let init = Trainer::new(&cfg).unwrap().model.params.data;
        let t = pretrain(&data, &cfg, &mut log, None).unwrap();
        assert_eq!(log.epochs().count(), 3);
        assert_eq!(log.steps().count(), 9);
        for r in log.steps() {
            let MetricRecord::Step { l_d, l_c, l_reg, total, .. } = r else { unreachable!() };
            let recomposed = l_d + l_c + l_reg;
            assert!((recomposed - total).abs() <= 1e-6 * total.abs());
        }
        assert_ne!(init, t.model.params.data);
    }

    #[test]
    fn zero_weights_still_move_parameters() {
        let data = small_data(2);
        let mut cfg = small_cfg();
        cfg.loss.alpha = 0.0;
        cfg.loss.beta = 0.0;
        cfg.max_epochs = 1;
        cfg.drop_epoch = 1;
        let mut log = MetricsLog::in_memory();
        let init = Trainer::new(&cfg).unwrap().model.params.data;
        let t = pretrain(&data, &cfg, &mut log, None).unwrap();
        let MetricRecord::Step { l_d, l_c, l_reg, total, .. } = log.steps().next().unwrap().clone() else { unreachable!() };
        assert!(l_d > 0.0 && l_c > 0.0);
        assert_eq!(total, l_reg);
        assert_ne!(init, t.model.params.data);
    }

    #[test]
    fn sequential_and_parallel_runs_are_identical() {
        let data = small_data(3);
        let mut cfg = small_cfg();
        cfg.max_epochs = 1;
        cfg.drop_epoch = 1;
        let run = |exec| {
            let mut t = Trainer::new(&cfg).unwrap().with_execution(exec);
            let mut log = MetricsLog::in_memory();
            t.fit(&data, &mut log, None).unwrap();
            let steps: Vec<MetricRecord> = log.steps().cloned().collect();
            (t.model.params.data, steps)
        };
        let a = run(Execution::Sequential);
        let b = run(Execution::default());
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_objective_trains() {
        let data = small_data(4);
        let mut cfg = small_cfg();
        cfg.model.objective = Objective::Baseline;
        cfg.max_epochs = 1;
        cfg.drop_epoch = 1;
        let mut log = MetricsLog::in_memory();
        pretrain(&data, &cfg, &mut log, None).unwrap();
        let MetricRecord::Step { l_c, total, l_d, l_reg, .. } = log.steps().next().unwrap().clone() else { unreachable!() };
        assert_eq!(l_c, 0.0);
        assert!((total - (l_d + l_reg)).abs() <= 1e-9 * total);
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let data = small_data(5);
        let mut cfg = small_cfg();
        cfg.batch_size = 64;
        assert!(matches!(pretrain(&data, &cfg, &mut MetricsLog::in_memory(), None), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let data = small_data(6);
        let mut cfg = small_cfg();
        cfg.max_epochs = 1;
        cfg.drop_epoch = 1;
        let t = pretrain(&data, &cfg, &mut MetricsLog::in_memory(), None).unwrap();
        let ck = t.checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&t.model.params.data));
        assert_eq!(bits(&back.optimizer.as_ref().unwrap().m), bits(&t.opt.m));
        // Header is plain JSON on the first line.
        let line = bytes.split(|&b| b == b'\n').next().unwrap();
        let v: serde_json::Value = serde_json::from_slice(line).unwrap();
        assert_eq!(v["format"], "DCC1");
        assert_eq!(v["epoch"], 1);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dcc");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn mismatched_config_names_first_shape() {
        let cfg = small_cfg();
        let t = Trainer::new(&cfg).unwrap();
        let ck = t.checkpoint();
        let mut other = cfg.model.clone();
        other.d_model = 32;
        let err = ck.to_model_as(&other).unwrap_err().to_string();
        assert!(err.contains("embed.joint.temporal.fc1.weight"), "{err}");
        assert!(err.contains("[33, 16]"), "{err}");
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = small_data(7);
        let cfg = small_cfg();
        let mut full_log = MetricsLog::in_memory();
        let full = pretrain(&data, &cfg, &mut full_log, None).unwrap();

        let mut first = cfg.clone();
        first.max_epochs = 1;
        first.drop_epoch = 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dcc");
        let mut log1 = MetricsLog::in_memory();
        pretrain(&data, &first, &mut log1, Some(&path)).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        let mut resumed = Trainer::resume(&cfg, &ck).unwrap();
        let mut log2 = MetricsLog::in_memory();
        resumed.fit(&data, &mut log2, None).unwrap();

        let tail: Vec<_> = full_log.steps().skip(3).map(|r| r.total()).collect();
        let got: Vec<_> = log2.steps().map(|r| r.total()).collect();
        assert_eq!(tail.len(), got.len());
        for (a, b) in tail.iter().zip(&got) {
            assert!((a - b).abs() <= 1e-4 * a.abs());
        }
        assert_eq!(full.model.params.data, resumed.model.params.data);
    }

    #[test]
    fn metrics_file_is_json_lines() {
        let data = small_data(8);
        let mut cfg = small_cfg();
        cfg.max_epochs = 1;
        cfg.drop_epoch = 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut log = MetricsLog::to_file(&path).unwrap();
        pretrain(&data, &cfg, &mut log, None).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        for key in ["step", "L_d_t", "L_d_s", "L_c", "L_reg", "total", "lr"] {
            assert!(lines[0].get(key).is_some(), "{key}");
        }
        assert_eq!(lines[3]["kind"], "epoch");
    }
}
