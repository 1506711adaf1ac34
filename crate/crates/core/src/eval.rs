//! Downstream protocols on unified features: linear probe, KNN retrieval,
//! semi-supervised fine-tuning and cross-dataset transfer, plus FBK1
//! feature banks and CSV result export.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::skd::{write_atomic, write_f32s, ByteReader};
use crate::data::{resample_uniform, Dataset, ModalityBundle, ModalitySet, SkeletonSequence};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::Model;
use crate::nn::ParamBuf;
use crate::train::AdamW;

pub const FBK_MAGIC: &[u8; 8] = b"FBKSET\x01\x00";
pub const FBK_VERSION: u32 = 1;
const UNLABELED: u32 = u32::MAX;

/// One unified feature row per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub features: Array2<f32>,
    pub labels: Vec<Option<u32>>,
    pub split: String,
    pub modality_subset: ModalitySet,
    pub class_names: Vec<String>,
}

impl FeatureBank {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    /// Labels, failing if any row is unlabeled.
    pub fn require_labels(&self) -> Result<Vec<u32>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Schema(format!("{} bank row {i} is unlabeled", self.split))))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if let Some(i) = self.features.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("bank row {i} is not finite")));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifest {
    version: u32,
    count: usize,
    width: usize,
    modality_subset: ModalitySet,
    class_names: Vec<String>,
    split: String,
}

/// FBK1 layout: magic `FBKSET\x01\x00`, `u32` manifest length, JSON manifest,
/// `count * width` little-endian `f32` (row major), then `count` `u32`
/// labels (`0xFFFFFFFF` = unlabeled).
pub fn bank_to_bytes(bank: &FeatureBank) -> Result<Vec<u8>> {
    bank.validate()?;
    let mut out = Vec::new();
    crate::data::skd::write_header(
        &mut out,
        FBK_MAGIC,
        &BankManifest {
            version: FBK_VERSION,
            count: bank.len(),
            width: bank.width(),
            modality_subset: bank.modality_subset.clone(),
            class_names: bank.class_names.clone(),
            split: bank.split.clone(),
        },
    )?;
    write_f32s(&mut out, bank.features.iter().copied())?;
    for l in &bank.labels {
        out.extend_from_slice(&l.unwrap_or(UNLABELED).to_le_bytes());
    }
    Ok(out)
}

pub fn bank_from_bytes(buf: &[u8]) -> Result<FeatureBank> {
    let mut r = ByteReader::new(buf);
    let m: BankManifest = r.header(FBK_MAGIC)?;
    if m.version != FBK_VERSION {
        return Err(Error::format(8, format!("unsupported FBK version {}", m.version)));
    }
    let data = r.f32_vec(m.count * m.width, "feature rows")?;
    let mut labels = Vec::with_capacity(m.count);
    for i in 0..m.count {
        let l = r.u32(&format!("label {i}"))?;
        labels.push((l != UNLABELED).then_some(l));
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    let features = Array2::from_shape_vec((m.count, m.width), data).map_err(|e| Error::shape(e.to_string()))?;
    Ok(FeatureBank {
        features,
        labels,
        split: m.split,
        modality_subset: m.modality_subset,
        class_names: m.class_names,
    })
}

pub fn write_bank(bank: &FeatureBank, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &bank_to_bytes(bank)?)
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<FeatureBank> {
    bank_from_bytes(&fs::read(path)?)
}

fn check_joints(model: &Model<f32>, data: &Dataset) -> Result<()> {
    let want = model.config().n_joints;
    if data.topology.n_joints() != want {
        return Err(Error::shape(format!(
            "dataset has {} joints, model expects {want}",
            data.topology.n_joints()
        )));
    }
    Ok(())
}

/// Evaluation preprocessing: uniform resampling to the model's frame count
/// and modality derivation.
pub fn eval_bundle(model: &Model<f32>, data: &Dataset, seq: &SkeletonSequence, subset: &ModalitySet) -> Result<ModalityBundle> {
    let s = resample_uniform(seq, model.config().t_out);
    ModalityBundle::from_joints(s.coords.view(), &data.topology, subset)
}

pub fn extract_bank(model: &Model<f32>, data: &Dataset, subset: &ModalitySet, split: &str) -> Result<FeatureBank> {
    extract_bank_with(model, data, subset, split, Execution::default())
}

pub fn extract_bank_with(model: &Model<f32>, data: &Dataset, subset: &ModalitySet, split: &str, exec: Execution) -> Result<FeatureBank> {
    check_joints(model, data)?;
    if !subset.is_subset_of(&model.config().modalities) {
        return Err(Error::config(format!(
            "modalities {subset} not available in a {} model",
            model.config().modalities
        )));
    }
    let rows: Vec<Array1<f32>> = exec
        .map(&data.sequences, |s| model.extract_unified(&eval_bundle(model, data, s, subset)?, subset))
        .into_iter()
        .collect::<Result<_>>()?;
    let width = 2 * model.config().d_model;
    let mut features = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        features.row_mut(i).assign(r);
    }
    let bank = FeatureBank {
        features,
        labels: data.sequences.iter().map(|s| s.label).collect(),
        split: split.to_string(),
        modality_subset: subset.clone(),
        class_names: data.class_names.clone(),
    };
    bank.validate()?;
    Ok(bank)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 1e-2 }
    }
}

fn n_classes(train: &[u32], test: &[u32], names: usize) -> usize {
    let max = train.iter().chain(test).copied().max().map_or(0, |m| m as usize + 1);
    max.max(names)
}

fn check_classes(train: &[u32], test: &[u32]) -> Result<()> {
    let set: std::collections::BTreeSet<u32> = train.iter().copied().collect();
    if set.len() < 2 {
        return Err(Error::config("training labels contain a single class"));
    }
    if !test.iter().any(|l| set.contains(l)) {
        return Err(Error::config("test classes do not overlap training classes"));
    }
    Ok(())
}

/// Softmax cross-entropy gradient with respect to the logits, averaged over
/// rows. Returns the mean loss.
fn softmax_xent(logits: &Array2<f64>, labels: &[u32]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        loss -= row[y as usize].max(1e-300).ln();
        row[y as usize] -= 1.0;
    }
    grad /= n;
    (loss / n, grad)
}

fn argmax(row: ndarray::ArrayView1<f64>) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn accuracy(pred: &[u32], truth: &[u32]) -> f64 {
    let hit = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hit as f64 / truth.len() as f64
}

/// Frozen-feature linear classifier trained full-batch with Adam on
/// features standardized by the training statistics. Returns top-1 test
/// accuracy.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &ProbeConfig) -> Result<f64> {
    let ytr = train.require_labels()?;
    let yte = test.require_labels()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::config("linear probe needs nonempty banks"));
    }
    if train.width() != test.width() {
        return Err(Error::shape(format!("bank widths {} vs {}", train.width(), test.width())));
    }
    check_classes(&ytr, &yte)?;
    let k = n_classes(&ytr, &yte, train.class_names.len());
    let xtr = train.features.mapv(|v| v as f64);
    let xte = test.features.mapv(|v| v as f64);
    let mean = xtr.mean_axis(Axis(0)).unwrap();
    let std = xtr.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let xtr = (&xtr - &mean) / &std;
    let xte = (&xte - &mean) / &std;

    let d = xtr.ncols();
    let mut w = Array2::<f64>::zeros((d, k));
    let mut b = Array1::<f64>::zeros(k);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let (mut mw, mut vw) = (w.clone(), w.clone());
    let (mut mb, mut vb) = (b.clone(), b.clone());
    for t in 1..=cfg.epochs {
        let logits = xtr.dot(&w) + &b;
        let (_, g) = softmax_xent(&logits, &ytr);
        let gw = xtr.t().dot(&g);
        let gb = g.sum_axis(Axis(0));
        let c1 = 1.0 - f64::powi(b1, t as i32);
        let c2 = 1.0 - f64::powi(b2, t as i32);
        mw.zip_mut_with(&gw, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        vw.zip_mut_with(&gw, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        mb.zip_mut_with(&gb, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        vb.zip_mut_with(&gb, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        ndarray::Zip::from(&mut w).and(&mw).and(&vw).for_each(|p, &m, &v| *p -= cfg.lr * (m / c1) / ((v / c2).sqrt() + eps));
        ndarray::Zip::from(&mut b).and(&mb).and(&vb).for_each(|p, &m, &v| *p -= cfg.lr * (m / c1) / ((v / c2).sqrt() + eps));
    }
    let logits = xte.dot(&w) + &b;
    let pred: Vec<u32> = logits.rows().into_iter().map(argmax).collect();
    Ok(accuracy(&pred, &yte))
}

fn normalized(x: &Array2<f32>) -> Array2<f64> {
    let mut x = x.mapv(|v| v as f64);
    for mut r in x.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r /= n;
        }
    }
    x
}

/// Majority label among the `k` most similar rows; ties go to the label
/// whose best-ranked neighbor comes first.
fn vote(sims: &[(f64, usize)], labels: &[u32], k: usize) -> u32 {
    let mut counts: Vec<(u32, usize, usize)> = Vec::new();
    for (rank, &(_, j)) in sims.iter().take(k).enumerate() {
        match counts.iter_mut().find(|c| c.0 == labels[j]) {
            Some(c) => c.1 += 1,
            None => counts.push((labels[j], 1, rank)),
        }
    }
    counts.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2))).unwrap().0
}

fn knn_predict(train: &Array2<f64>, ytr: &[u32], query: &Array2<f64>, k: usize, exclude_self: bool) -> Vec<u32> {
    let sims = query.dot(&train.t());
    Execution::default().map_range(query.nrows(), |i| {
        let mut order: Vec<(f64, usize)> = sims
            .row(i)
            .iter()
            .enumerate()
            .filter(|(j, _)| !(exclude_self && *j == i))
            .map(|(j, &s)| (s, j))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        vote(&order, ytr, k)
    })
}

/// Cosine-similarity k-nearest-neighbor classification accuracy.
pub fn knn_retrieve(train: &FeatureBank, test: &FeatureBank, k: usize) -> Result<f64> {
    let ytr = train.require_labels()?;
    let yte = test.require_labels()?;
    if train.is_empty() {
        return Err(Error::config("KNN needs a nonempty training bank"));
    }
    if k == 0 || k > train.len() {
        return Err(Error::config(format!("k = {k} outside 1..={}", train.len())));
    }
    if test.is_empty() {
        return Err(Error::config("KNN needs a nonempty query bank"));
    }
    if train.width() != test.width() {
        return Err(Error::shape(format!("bank widths {} vs {}", train.width(), test.width())));
    }
    let pred = knn_predict(&normalized(&train.features), &ytr, &normalized(&test.features), k, false);
    Ok(accuracy(&pred, &yte))
}

/// KNN of every bank row against all other rows.
pub fn knn_leave_one_out(bank: &FeatureBank, k: usize) -> Result<f64> {
    let y = bank.require_labels()?;
    if k == 0 || k + 1 > bank.len() {
        return Err(Error::config(format!("k = {k} outside 1..={}", bank.len().saturating_sub(1))));
    }
    let x = normalized(&bank.features);
    let pred = knn_predict(&x, &y, &x, k, true);
    Ok(accuracy(&pred, &y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub modalities: ModalitySet,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 1e-5,
            seed: 0,
            modalities: ModalitySet::all(),
        }
    }
}

/// Linear classification head on the unified feature.
#[derive(Debug, Clone)]
struct Head {
    w: Array2<f32>,
    b: Array1<f32>,
}

impl Head {
    fn new(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / d as f64).sqrt() as f32;
        Self {
            w: Array2::from_shape_fn((d, k), |_| rng.random_range(-bound..bound)),
            b: Array1::zeros(k),
        }
    }

    fn logits(&self, f: &Array1<f32>) -> Array1<f64> {
        (f.dot(&self.w) + &self.b).mapv(|v| v as f64)
    }

    fn flat_len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

fn predict(model: &Model<f32>, head: &Head, data: &Dataset, subset: &ModalitySet) -> Result<Vec<u32>> {
    Execution::default()
        .map(&data.sequences, |s| {
            let f = model.extract_unified(&eval_bundle(model, data, s, subset)?, subset)?;
            Ok(argmax(head.logits(&f).view()))
        })
        .into_iter()
        .collect()
}

/// Fine-tunes every backbone parameter plus a fresh linear head on `train`
/// and reports test accuracy.
pub fn finetune(mut model: Model<f32>, train: &Dataset, test: &Dataset, cfg: &FinetuneConfig) -> Result<f64> {
    check_joints(&model, train)?;
    check_joints(&model, test)?;
    let subset = &cfg.modalities;
    if !subset.is_subset_of(&model.config().modalities) {
        return Err(Error::config(format!("modalities {subset} not in the model")));
    }
    let label = |d: &Dataset| -> Result<Vec<u32>> {
        d.sequences
            .iter()
            .enumerate()
            .map(|(i, s)| s.label.ok_or_else(|| Error::Schema(format!("sequence {i} is unlabeled"))))
            .collect()
    };
    let ytr = label(train)?;
    let yte = label(test)?;
    if ytr.is_empty() || yte.is_empty() {
        return Err(Error::config("fine-tuning needs nonempty train and test sets"));
    }
    let k = n_classes(&ytr, &yte, train.class_names.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = 2 * model.config().d_model;
    let mut head = Head::new(d, k, &mut rng);
    let mut opt = AdamW::new(model.params.data.len(), cfg.weight_decay);
    let mut head_opt = AdamW::new(head.flat_len(), 0.0);
    let bundles: Vec<ModalityBundle> = Execution::default()
        .map(&train.sequences, |s| eval_bundle(&model, train, s, subset))
        .into_iter()
        .collect::<Result<_>>()?;
    let bs = cfg.batch_size.max(1).min(bundles.len());
    let mut order: Vec<usize> = (0..bundles.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(bs) {
            let n = batch.len() as f32;
            let m = &model;
            let h = &head;
            let per: Vec<(ParamBuf<f32>, Array2<f32>, Array1<f32>)> = Execution::default()
                .map(batch, |&i| {
                    let (f, cache) = m.unified_forward(&bundles[i], subset)?;
                    let logits = h.logits(&f).insert_axis(Axis(0));
                    let (_, g) = softmax_xent(&logits, &[ytr[i]]);
                    let g = g.row(0).mapv(|v| v as f32 / n);
                    let mut grads = m.zero_grads();
                    m.unified_backward(&cache, h.w.dot(&g).view(), &mut grads);
                    let gw = f.view().insert_axis(Axis(1)).dot(&g.view().insert_axis(Axis(0)));
                    Ok((grads, gw, g))
                })
                .into_iter()
                .collect::<Result<_>>()?;
            let mut it = per.into_iter();
            let (mut g, mut gw, mut gb) = it.next().expect("nonempty batch");
            for (a, b, c) in it {
                g.add_assign(&a);
                gw += &b;
                gb += &c;
            }
            if g.data.iter().chain(gw.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite fine-tuning gradient in epoch {epoch}")));
            }
            opt.step(&mut model.params.data, &g.data, cfg.lr);
            let mut hp: Vec<f32> = head.w.iter().chain(head.b.iter()).copied().collect();
            let hg: Vec<f32> = gw.iter().chain(gb.iter()).copied().collect();
            head_opt.step(&mut hp, &hg, cfg.lr);
            let nw = head.w.len();
            head.w = Array2::from_shape_vec(head.w.dim(), hp[..nw].to_vec()).expect("head shape");
            head.b = Array1::from_vec(hp[nw..].to_vec());
        }
    }
    let pred = predict(&model, &head, test, subset)?;
    Ok(accuracy(&pred, &yte))
}

/// Seeded labeled-subset selection: `floor(fraction * count_c)` per class,
/// falling back to `floor(fraction * n)` over all rows when some class would
/// get no sample. Returns sorted indices and whether stratification held.
pub fn select_fraction(data: &Dataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, bool)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, s) in data.sequences.iter().enumerate() {
        let l = s.label.ok_or_else(|| Error::Schema(format!("sequence {i} is unlabeled")))?;
        by_class.entry(l).or_default().push(i);
    }
    let take = |n: usize| (fraction * n as f64 + 1e-9).floor() as usize;
    let stratified = by_class.values().all(|v| take(v.len()) > 0);
    let mut out = Vec::new();
    if stratified {
        for idx in by_class.values() {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            out.extend_from_slice(&idx[..take(idx.len())]);
        }
    } else {
        log::warn!("fraction {fraction} leaves some class without samples; selecting without stratification");
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        let n = take(data.len());
        if n == 0 {
            return Err(Error::config(format!("fraction {fraction} selects no samples from {}", data.len())));
        }
        out.extend_from_slice(&idx[..n]);
    }
    out.sort_unstable();
    Ok((out, stratified))
}

fn subset_of(data: &Dataset, idx: &[usize]) -> Dataset {
    let mut d = Dataset::new(data.topology.clone(), data.class_names.clone());
    d.sequences = idx.iter().map(|&i| data.sequences[i].clone()).collect();
    d
}

/// Fine-tunes on a labeled fraction of `train`.
pub fn semi_supervised(model: Model<f32>, train: &Dataset, test: &Dataset, fraction: f64, cfg: &FinetuneConfig) -> Result<f64> {
    let (idx, _) = select_fraction(train, fraction, cfg.seed)?;
    finetune(model, &subset_of(train, &idx), test, cfg)
}

/// Reorders joints so that model joint `i` reads dataset joint `map[i]`.
pub fn remap_joints(data: &Dataset, map: &[usize], target: crate::data::Topology) -> Result<Dataset> {
    if map.len() != target.n_joints() {
        return Err(Error::config(format!("joint map has {} entries, target has {} joints", map.len(), target.n_joints())));
    }
    if let Some(&bad) = map.iter().find(|&&j| j >= data.topology.n_joints()) {
        return Err(Error::config(format!("joint map entry {bad} outside the source's {} joints", data.topology.n_joints())));
    }
    let mut out = Dataset::new(target, data.class_names.clone());
    out.sequences = data
        .sequences
        .iter()
        .map(|s| SkeletonSequence {
            coords: s.coords.select(Axis(1), map),
            ..s.clone()
        })
        .collect();
    Ok(out)
}

/// Fine-tunes a model pretrained elsewhere on dataset B with a fresh head.
/// When joint counts differ a mapping from model joints to B's joints is
/// required.
pub fn transfer(model: Model<f32>, train: &Dataset, test: &Dataset, joint_map: Option<&[usize]>, cfg: &FinetuneConfig) -> Result<f64> {
    let v = model.config().n_joints;
    match joint_map {
        Some(map) => {
            let topo = crate::data::Topology::for_joints(v);
            finetune(model, &remap_joints(train, map, topo.clone())?, &remap_joints(test, map, topo)?, cfg)
        }
        None if train.topology.n_joints() != v || test.topology.n_joints() != v => Err(Error::config(format!(
            "model has {v} joints, target dataset {}; supply a joint map",
            train.topology.n_joints()
        ))),
        None => finetune(model, train, test, cfg),
    }
}

/// One accuracy measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub protocol: String,
    pub dataset: String,
    pub modality_subset: String,
    pub fraction: Option<f64>,
    pub seed: u64,
    pub accuracy: f64,
}

pub const CSV_HEADER: &str = "protocol,dataset,modality_subset,fraction,seed,accuracy";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            csv_field(&self.protocol),
            csv_field(&self.dataset),
            csv_field(&self.modality_subset),
            self.fraction.map(|f| f.to_string()).unwrap_or_default(),
            self.seed,
            self.accuracy
        )
    }
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_csv(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut text = String::new();
    if fresh {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes())?;
    Ok(())
}
