//! The GID training procedures: IND pretraining, the k-means and DeepAligned
//! pipelines, DeepAligned-Mix, and the end-to-end swapped-prediction method.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::assignment::align_clusters;
use crate::benchmark::GidSplit;
use crate::clustering::{kmeans, nearest, silhouette, KMeansConfig};
use crate::data::SampleRecord;
use crate::error::{config_err, data_err, Result};
use crate::evaluation::{evaluate_gid_with, MappingScope, MetricsReport};
use crate::neural::{
    batch_cross_entropy, dropout_mask, lr_at, JointModel, ModelDims, OptimizerState, ScheduleConfig,
};
use crate::rng;
use crate::transport::{sinkhorn_pseudo_labels, SinkhornProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    KmeansPipeline,
    DeepalignedPipeline,
    DeepalignedMix,
    E2e,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::KmeansPipeline,
        Method::DeepalignedPipeline,
        Method::DeepalignedMix,
        Method::E2e,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::KmeansPipeline => "kmeans_pipeline",
            Method::DeepalignedPipeline => "deepaligned_pipeline",
            Method::DeepalignedMix => "deepaligned_mix",
            Method::E2e => "e2e",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| config_err!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub batch_size: usize,
    /// Epochs of the main stage (outer iterations for the DeepAligned loops).
    pub epochs: usize,
    /// IND pretraining epochs; `None` uses `epochs`.
    pub pretrain_epochs: Option<usize>,
    /// `total_epochs` is overwritten per stage.
    pub schedule: ScheduleConfig,
    pub dropout_p: f64,
    pub epsilon: f64,
    pub sk_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs without validation-SC improvement before stopping.
    pub patience: usize,
    pub kmeans_restarts: usize,
    pub encoder_layers: usize,
    /// Encoder output width; `None` keeps the input width.
    pub repr_dim: Option<usize>,
    /// Train e2e against argmax pseudo-labels instead of soft transport targets.
    pub hard_pseudo_labels: bool,
    /// Standardize each batch's OOD logits before the transport solve.
    pub sk_standardize: bool,
    /// DeepAligned-Mix: give IND samples their gold label instead of a cluster id.
    pub mix_gold_ind: bool,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            seed,
            batch_size: 512,
            epochs: 100,
            pretrain_epochs: None,
            schedule: ScheduleConfig::default(),
            dropout_p: 0.5,
            epsilon: crate::transport::DEFAULT_EPSILON,
            sk_iters: crate::transport::DEFAULT_SK_ITERS,
            momentum: 0.9,
            weight_decay: 1e-4,
            patience: 10,
            kmeans_restarts: 10,
            encoder_layers: 1,
            repr_dim: None,
            hard_pseudo_labels: false,
            sk_standardize: true,
            mix_gold_ind: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config_err!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(config_err!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(config_err!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.kmeans_restarts == 0 || self.encoder_layers == 0 {
            return Err(config_err!("kmeans_restarts and encoder_layers must be positive"));
        }
        if self.repr_dim == Some(0) {
            return Err(config_err!("repr_dim must be positive"));
        }
        ScheduleConfig {
            total_epochs: self.schedule.warmup_epochs + 1,
            ..self.schedule
        }
        .validate()
    }

    fn schedule_for(&self, epochs: usize) -> ScheduleConfig {
        ScheduleConfig {
            total_epochs: epochs,
            warmup_epochs: self.schedule.warmup_epochs.min(epochs.saturating_sub(1)),
            ..self.schedule
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_sc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub metrics: MetricsReport,
    /// Main-stage curve.
    pub loss_curve: Vec<EpochRecord>,
    pub pretrain_curve: Vec<EpochRecord>,
    /// Purity of the OOD training pseudo-labels against the hidden gold
    /// classes, per clustering round or epoch. Diagnostic only.
    pub purity_trace: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub selected_epoch: Option<usize>,
    pub checkpoint: Option<String>,
    #[serde(skip)]
    pub elapsed: std::time::Duration,
}

/// Test-set predictions next to their gold labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPredictions {
    pub ids: Vec<String>,
    pub gold: Vec<usize>,
    pub predicted: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub model: JointModel,
    pub predictions: TestPredictions,
}

// rng streams
const S_INIT: u64 = 1;
const S_PRETRAIN: u64 = 2;
const S_OOD_HEAD: u64 = 3;
const S_CLUSTER: u64 = 4;
const S_STAGE1: u64 = 5;
const S_STAGE2: u64 = 6;
const S_E2E: u64 = 7;

pub(crate) fn to_matrix(samples: &[SampleRecord], dim: usize) -> Array2<f64> {
    let mut x = Array2::zeros((samples.len(), dim));
    for (mut row, s) in x.axis_iter_mut(Axis(0)).zip(samples) {
        for (r, &v) in row.iter_mut().zip(&s.vector) {
            *r = v as f64;
        }
    }
    x
}

fn to_rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}

fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Argmax of the evaluation-mode joint logits; ties go to the lowest index.
pub fn predict(model: &JointModel, x: &Array2<f64>) -> Result<Vec<usize>> {
    let logits = model.logits(x)?;
    Ok(logits.axis_iter(Axis(0)).map(|r| argmax(r.iter().copied())).collect())
}

fn input_dim(split: &GidSplit) -> Result<usize> {
    split
        .ind_train
        .iter()
        .chain(&split.ood_train)
        .map(|s| s.vector.len())
        .next()
        .ok_or_else(|| data_err!("split has no training samples"))
}

fn new_model(split: &GidSplit, cfg: &TrainConfig, stream: u64) -> Result<JointModel> {
    let input = input_dim(split)?;
    let dims = ModelDims {
        repr: cfg.repr_dim.unwrap_or(input),
        encoder_layers: cfg.encoder_layers,
        ..ModelDims::new(input, split.n_ind_classes, split.n_ood_classes)
    };
    let mut seed_rng = rng::derive(cfg.seed, stream);
    JointModel::new(dims, rand::Rng::random(&mut seed_rng))
}

fn one_hot(labels: &[usize], offset: usize, width: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), width));
    for (i, &l) in labels.iter().enumerate() {
        t[[i, offset + l]] = 1.0;
    }
    t
}

/// One epoch of minibatch SGD on soft targets over the logit columns
/// `cols`. Returns the mean per-sample loss.
#[allow(clippy::too_many_arguments)]
fn supervised_epoch(
    model: &mut JointModel,
    opt: &mut OptimizerState,
    x: &Array2<f64>,
    targets: &Array2<f64>,
    cols: std::ops::Range<usize>,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut rng::GidRng,
) -> Result<f64> {
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut grads = vec![0.0; model.params.len()];
    for chunk in order.chunks(cfg.batch_size) {
        let xb = x.select(Axis(0), chunk);
        let tb = targets.select(Axis(0), chunk);
        let mask = dropout_mask((chunk.len(), model.dims.repr), cfg.dropout_p, rng)?;
        let fwd = model.forward_masked(&xb, Some(mask))?;
        let sub = fwd.logits.slice(s![.., cols.clone()]).to_owned();
        let (loss, g) = batch_cross_entropy(&sub, &tb);
        let mut dlogits = Array2::zeros(fwd.logits.dim());
        dlogits.slice_mut(s![.., cols.clone()]).assign(&(g / chunk.len() as f64));
        grads.fill(0.0);
        model.backward(&fwd, &dlogits, &mut grads);
        opt.step(&mut model.params, &grads, lr);
        check_loss(loss)?;
        total += loss;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

fn check_loss(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(data_err!("training loss became non-finite; lower the learning rate"))
    }
}

fn ind_accuracy(model: &JointModel, x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let n = model.dims.n_ind;
    let logits = model.logits(x)?;
    let hits = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(r, &l)| argmax(r.iter().take(n).copied()) == l)
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

fn gold_labels(samples: &[SampleRecord]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| s.label.ok_or_else(|| data_err!("sample {} has no label", s.id)))
        .collect()
}

/// Train encoder and IND head with N-way cross-entropy on `ind_train`,
/// keeping the epoch with the best `ind_val` accuracy.
pub fn pretrain_ind(split: &GidSplit, cfg: &TrainConfig) -> Result<(JointModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if split.ind_train.is_empty() {
        return Err(data_err!("no IND training samples"));
    }
    let mut model = new_model(split, cfg, S_INIT)?;
    let epochs = cfg.pretrain_epochs.unwrap_or(cfg.epochs);
    if epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let n = split.n_ind_classes;
    let dim = model.dims.input;
    let x = to_matrix(&split.ind_train, dim);
    let targets = one_hot(&gold_labels(&split.ind_train)?, 0, n);
    let xv = to_matrix(&split.ind_val, dim);
    let yv = gold_labels(&split.ind_val)?;

    let schedule = cfg.schedule_for(epochs);
    let mut opt = OptimizerState::new(model.params.len(), cfg.momentum, cfg.weight_decay);
    let mut rng = rng::derive(cfg.seed, S_PRETRAIN);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;
    let mut curve = Vec::new();
    for epoch in 0..epochs {
        let lr = lr_at(&schedule, epoch)?;
        let loss = supervised_epoch(&mut model, &mut opt, &x, &targets, 0..n, cfg, lr, &mut rng)?;
        curve.push(EpochRecord {
            epoch,
            loss,
            lr,
            val_sc: None,
        });
        if yv.is_empty() {
            continue;
        }
        let acc = ind_accuracy(&model, &xv, &yv)?;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::debug!("pretraining stopped at epoch {epoch}");
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, curve))
}

/// Silhouette of OOD validation representations under `labels`, with
/// collapsed labelings scored as the worst possible value.
fn val_silhouette(reps: &[Vec<f64>], labels: &[usize], n_ood: usize) -> Result<Option<f64>> {
    if reps.len() < 2 {
        return Ok(None);
    }
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Ok(Some(if n_ood == 1 { 0.0 } else { -1.0 }));
    }
    silhouette(reps, labels).map(Some)
}

fn purity(labels: &[usize], samples: &[SampleRecord], split: &GidSplit) -> f64 {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut n = 0;
    for (&l, s) in labels.iter().zip(samples) {
        if let Some(g) = split.hidden_gold(&s.id) {
            *counts.entry((l, g)).or_default() += 1;
            n += 1;
        }
    }
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for ((l, _), c) in counts {
        let b = best.entry(l).or_default();
        *b = (*b).max(c);
    }
    if n == 0 {
        0.0
    } else {
        best.values().sum::<usize>() as f64 / n as f64
    }
}

/// Tracks the best validation score and the patience counter.
struct Selector {
    best: Option<(f64, usize, Vec<f64>)>,
    stale: usize,
    patience: usize,
}

impl Selector {
    fn new(patience: usize) -> Self {
        Selector {
            best: None,
            stale: 0,
            patience,
        }
    }

    /// Record an epoch; returns true when training should stop. Ties favour
    /// the later epoch.
    fn observe(&mut self, score: Option<f64>, epoch: usize, params: &[f64]) -> bool {
        let Some(score) = score else {
            self.best = Some((f64::NEG_INFINITY, epoch, params.to_vec()));
            return false;
        };
        match &self.best {
            Some((b, _, _)) if score < *b => {
                self.stale += 1;
                self.stale >= self.patience
            }
            Some((b, _, _)) if score == *b => {
                self.best = Some((score, epoch, params.to_vec()));
                self.stale += 1;
                self.stale >= self.patience
            }
            _ => {
                self.best = Some((score, epoch, params.to_vec()));
                self.stale = 0;
                false
            }
        }
    }
}

struct Stage1 {
    model: JointModel,
    labels: Vec<usize>,
    purity: Vec<f64>,
}

/// k-means (`aligned = false`) or the DeepAligned loop over OOD training
/// representations.
fn cluster_ood(split: &GidSplit, cfg: &TrainConfig, pre: JointModel, aligned: bool) -> Result<Stage1> {
    let m = split.n_ood_classes;
    let n = split.n_ind_classes;
    let dim = pre.dims.input;
    let x = to_matrix(&split.ood_train, dim);
    if x.nrows() < m {
        return Err(data_err!("{} OOD training samples for {m} clusters", x.nrows()));
    }
    let km = |reps: &[Vec<f64>], round: u64| {
        let mut seed_rng = rng::derive(cfg.seed, S_CLUSTER ^ (round << 8));
        kmeans(
            reps,
            &KMeansConfig {
                restarts: cfg.kmeans_restarts,
                ..KMeansConfig::new(m, rand::Rng::random(&mut seed_rng))
            },
        )
    };
    if !aligned || cfg.epochs == 0 {
        let fit = km(&to_rows(&pre.encode(&x)?), 0)?;
        let p = purity(&fit.labels, &split.ood_train, split);
        return Ok(Stage1 {
            model: pre,
            labels: fit.labels,
            purity: vec![p],
        });
    }

    let mut model = pre;
    let xv = to_matrix(&split.ood_val, dim);
    let schedule = cfg.schedule_for(cfg.epochs);
    let mut opt = OptimizerState::new(model.params.len(), cfg.momentum, cfg.weight_decay);
    let mut rng = rng::derive(cfg.seed, S_STAGE1);
    let mut prev: Option<Vec<Vec<f64>>> = None;
    let mut selector = Selector::new(cfg.patience);
    let mut best_labels = Vec::new();
    let mut purity_trace = Vec::new();
    for epoch in 0..cfg.epochs {
        let reps = to_rows(&model.encode(&x)?);
        let fit = km(&reps, epoch as u64 + 1)?;
        let (labels, centroids) = match &prev {
            None => (fit.labels, fit.centroids),
            Some(p) => {
                // current cluster perm[i] takes id i
                let perm = align_clusters(p, &fit.centroids)?.perm;
                let mut new_id = vec![0; m];
                for (i, &c) in perm.iter().enumerate() {
                    new_id[c] = i;
                }
                let labels = fit.labels.iter().map(|&l| new_id[l]).collect();
                let centroids = perm.iter().map(|&c| fit.centroids[c].clone()).collect();
                (labels, centroids)
            }
        };
        purity_trace.push(purity(&labels, &split.ood_train, split));

        let lr = lr_at(&schedule, epoch)?;
        let targets = one_hot(&labels, 0, m);
        supervised_epoch(&mut model, &mut opt, &x, &targets, n..n + m, cfg, lr, &mut rng)?;

        let vreps = to_rows(&model.encode(&xv)?);
        let vlabels: Vec<usize> = vreps.iter().map(|r| nearest(r, &centroids).0).collect();
        let sc = val_silhouette(&vreps, &vlabels, m)?;
        let improved_before = selector.best.as_ref().map(|b| b.1);
        let stop = selector.observe(sc, epoch, &model.params);
        if selector.best.as_ref().map(|b| b.1) != improved_before {
            best_labels = labels.clone();
        }
        prev = Some(centroids);
        if stop {
            log::debug!("DeepAligned loop stopped at epoch {epoch}");
            break;
        }
    }
    if let Some((_, _, params)) = selector.best {
        model.params = params;
    }
    Ok(Stage1 {
        model,
        labels: best_labels,
        purity: purity_trace,
    })
}

/// Fresh joint classifier on the stage-1 encoder with zeroed heads, trained
/// on gold IND labels and hard OOD pseudo-labels.
fn train_joint(
    split: &GidSplit,
    cfg: &TrainConfig,
    encoder: &JointModel,
    ood_labels: &[usize],
) -> Result<(JointModel, Vec<EpochRecord>)> {
    let (n, m) = (split.n_ind_classes, split.n_ood_classes);
    let mut model = new_model(split, cfg, S_STAGE2)?;
    model.copy_encoder_from(encoder)?;
    model.zero_heads();
    let dim = model.dims.input;
    let samples: Vec<SampleRecord> = split.ind_train.iter().chain(&split.ood_train).cloned().collect();
    let x = to_matrix(&samples, dim);
    let mut labels = gold_labels(&split.ind_train)?;
    labels.extend(ood_labels.iter().map(|&l| n + l));
    let targets = one_hot(&labels, 0, n + m);
    let xv = to_matrix(&split.ood_val, dim);

    let schedule = cfg.schedule_for(cfg.epochs);
    let mut opt = OptimizerState::new(model.params.len(), cfg.momentum, cfg.weight_decay);
    let mut rng = rng::derive(cfg.seed, S_STAGE2);
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(&schedule, epoch)?;
        let loss = supervised_epoch(&mut model, &mut opt, &x, &targets, 0..n + m, cfg, lr, &mut rng)?;
        let val_sc = ood_head_silhouette(&model, &xv)?;
        curve.push(EpochRecord { epoch, loss, lr, val_sc });
    }
    Ok((model, curve))
}

/// Silhouette of OOD validation representations labeled by the OOD head.
fn ood_head_silhouette(model: &JointModel, xv: &Array2<f64>) -> Result<Option<f64>> {
    if xv.nrows() == 0 {
        return Ok(None);
    }
    let n = model.dims.n_ind;
    let fwd = model.forward_masked(xv, None)?;
    let labels: Vec<usize> = fwd
        .logits
        .axis_iter(Axis(0))
        .map(|r| argmax(r.iter().skip(n).copied()))
        .collect();
    val_silhouette(&to_rows(fwd.representation()), &labels, model.dims.n_ood)
}

fn finish(
    split: &GidSplit,
    cfg: &TrainConfig,
    model: JointModel,
    scope: MappingScope,
    parts: ReportParts,
    started: std::time::Instant,
) -> Result<RunOutput> {
    let test = split.test();
    let x = to_matrix(test, model.dims.input);
    let predicted = predict(&model, &x)?;
    let gold = gold_labels(test)?;
    let metrics = evaluate_gid_with(&predicted, &gold, split.n_ind_classes, split.n_ood_classes, scope)?;
    Ok(RunOutput {
        report: RunReport {
            method: cfg.method,
            seed: cfg.seed,
            metrics,
            loss_curve: parts.curve,
            pretrain_curve: parts.pretrain_curve,
            purity_trace: parts.purity,
            selected_epoch: parts.selected_epoch,
            checkpoint: None,
            elapsed: started.elapsed(),
        },
        model,
        predictions: TestPredictions {
            ids: test.iter().map(|s| s.id.clone()).collect(),
            gold,
            predicted,
        },
    })
}

struct ReportParts {
    curve: Vec<EpochRecord>,
    pretrain_curve: Vec<EpochRecord>,
    purity: Vec<f64>,
    selected_epoch: Option<usize>,
}

/// Two-stage pipeline: cluster OOD representations, then train a joint
/// classifier on the pseudo-labels. `relabel`, when given, permutes the
/// pseudo-label ids before the second stage.
pub fn run_pipeline_with(split: &GidSplit, cfg: &TrainConfig, relabel: Option<&[usize]>) -> Result<RunOutput> {
    let started = std::time::Instant::now();
    let aligned = match cfg.method {
        Method::KmeansPipeline => false,
        Method::DeepalignedPipeline => true,
        other => return Err(config_err!("{other} is not a pipeline method")),
    };
    let (pre, pretrain_curve) = pretrain_ind(split, cfg)?;
    let stage1 = cluster_ood(split, cfg, pre, aligned)?;
    let mut labels = stage1.labels;
    if let Some(perm) = relabel {
        let m = split.n_ood_classes;
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(config_err!("relabel must be a permutation of 0..{m}"));
        }
        labels = labels.iter().map(|&l| perm[l]).collect();
    }
    let (model, curve) = train_joint(split, cfg, &stage1.model, &labels)?;
    let selected_epoch = cfg.epochs.checked_sub(1);
    finish(
        split,
        cfg,
        model,
        MappingScope::Ood,
        ReportParts {
            curve,
            pretrain_curve,
            purity: stage1.purity,
            selected_epoch,
        },
        started,
    )
}

pub fn run_pipeline(split: &GidSplit, cfg: &TrainConfig) -> Result<RunOutput> {
    run_pipeline_with(split, cfg, None)
}

/// Cluster IND and OOD training data together into N+M groups each round
/// and train the whole classifier on the cluster ids.
pub fn run_deepaligned_mix(split: &GidSplit, cfg: &TrainConfig) -> Result<RunOutput> {
    let started = std::time::Instant::now();
    if cfg.method != Method::DeepalignedMix {
        return Err(config_err!("run_deepaligned_mix called with {}", cfg.method));
    }
    let (n, m) = (split.n_ind_classes, split.n_ood_classes);
    let k = n + m;
    let (pre, pretrain_curve) = pretrain_ind(split, cfg)?;
    let mut model = new_model(split, cfg, S_STAGE2)?;
    model.copy_encoder_from(&pre)?;
    model.zero_heads();
    let dim = model.dims.input;
    let samples: Vec<SampleRecord> = split.ind_train.iter().chain(&split.ood_train).cloned().collect();
    if samples.len() < k {
        return Err(data_err!("{} training samples for {k} clusters", samples.len()));
    }
    let x = to_matrix(&samples, dim);
    let gold_ind = gold_labels(&split.ind_train)?;
    let n_ind_train = gold_ind.len();
    // every validation sample was clustered, so all of them are scored
    let val: Vec<SampleRecord> = split.ind_val.iter().chain(&split.ood_val).cloned().collect();
    let xv = to_matrix(&val, dim);

    let schedule = cfg.schedule_for(cfg.epochs);
    let mut opt = OptimizerState::new(model.params.len(), cfg.momentum, cfg.weight_decay);
    let mut rng = rng::derive(cfg.seed, S_STAGE1);
    let mut prev: Option<Vec<Vec<f64>>> = None;
    let mut selector = Selector::new(cfg.patience);
    let mut curve = Vec::new();
    let mut purity_trace = Vec::new();
    for epoch in 0..cfg.epochs {
        let reps = to_rows(&model.encode(&x)?);
        let mut seed_rng = rng::derive(cfg.seed, S_CLUSTER ^ ((epoch as u64 + 1) << 8));
        let fit = kmeans(
            &reps,
            &KMeansConfig {
                restarts: cfg.kmeans_restarts,
                ..KMeansConfig::new(k, rand::Rng::random(&mut seed_rng))
            },
        )?;
        let (mut labels, centroids): (Vec<usize>, Vec<Vec<f64>>) = match &prev {
            None => (fit.labels, fit.centroids),
            Some(p) => {
                let perm = align_clusters(p, &fit.centroids)?.perm;
                let mut new_id = vec![0; k];
                for (i, &c) in perm.iter().enumerate() {
                    new_id[c] = i;
                }
                (
                    fit.labels.iter().map(|&l| new_id[l]).collect(),
                    perm.iter().map(|&c| fit.centroids[c].clone()).collect(),
                )
            }
        };
        purity_trace.push(purity(&labels[n_ind_train..], &split.ood_train, split));
        if cfg.mix_gold_ind {
            labels[..n_ind_train].copy_from_slice(&gold_ind);
        }
        let lr = lr_at(&schedule, epoch)?;
        let targets = one_hot(&labels, 0, k);
        let loss = supervised_epoch(&mut model, &mut opt, &x, &targets, 0..k, cfg, lr, &mut rng)?;

        let vreps = to_rows(&model.encode(&xv)?);
        let vlabels: Vec<usize> = vreps.iter().map(|r| nearest(r, &centroids).0).collect();
        let val_sc = val_silhouette(&vreps, &vlabels, k)?;
        curve.push(EpochRecord { epoch, loss, lr, val_sc });
        prev = Some(centroids);
        if selector.observe(val_sc, epoch, &model.params) {
            log::debug!("DeepAligned-Mix stopped at epoch {epoch}");
            break;
        }
    }
    let mut selected_epoch = None;
    if let Some((_, e, params)) = selector.best {
        model.params = params;
        selected_epoch = Some(e);
    }
    finish(
        split,
        cfg,
        model,
        MappingScope::All,
        ReportParts {
            curve,
            pretrain_curve,
            purity: purity_trace,
            selected_epoch,
        },
        started,
    )
}

/// Split `0..len` (already shuffled as `order`) into `parts` contiguous
/// chunks whose sizes differ by at most one.
fn even_chunks(order: &[usize], parts: usize) -> Vec<&[usize]> {
    let len = order.len();
    (0..parts)
        .map(|b| &order[b * len / parts..(b + 1) * len / parts])
        .collect()
}

/// End-to-end training: gold cross-entropy on IND samples plus swapped
/// prediction on OOD samples, where each dropout view is trained against
/// the transport pseudo-labels of the other view.
pub fn run_e2e(split: &GidSplit, cfg: &TrainConfig) -> Result<RunOutput> {
    let started = std::time::Instant::now();
    if cfg.method != Method::E2e {
        return Err(config_err!("run_e2e called with {}", cfg.method));
    }
    let (n, m) = (split.n_ind_classes, split.n_ood_classes);
    if cfg.batch_size < m {
        log::warn!("batch_size {} is below the number of OOD classes {m}", cfg.batch_size);
    }
    let (mut model, pretrain_curve) = pretrain_ind(split, cfg)?;
    let mut head_seed = rng::derive(cfg.seed, S_OOD_HEAD);
    model.reinit_ood_head(rand::Rng::random(&mut head_seed));
    let dim = model.dims.input;
    let xi = to_matrix(&split.ind_train, dim);
    let ti = one_hot(&gold_labels(&split.ind_train)?, 0, n + m);
    let xo = to_matrix(&split.ood_train, dim);
    let xv = to_matrix(&split.ood_val, dim);
    let total = xi.nrows() + xo.nrows();

    let schedule = cfg.schedule_for(cfg.epochs);
    let mut opt = OptimizerState::new(model.params.len(), cfg.momentum, cfg.weight_decay);
    let mut rng = rng::derive(cfg.seed, S_E2E);
    let mut selector = Selector::new(cfg.patience);
    let mut curve = Vec::new();
    let mut purity_trace = Vec::new();
    let mut grads = vec![0.0; model.params.len()];
    for epoch in 0..cfg.epochs {
        let lr = lr_at(&schedule, epoch)?;
        let mut ind_order: Vec<usize> = (0..xi.nrows()).collect();
        let mut ood_order: Vec<usize> = (0..xo.nrows()).collect();
        ind_order.shuffle(&mut rng);
        ood_order.shuffle(&mut rng);
        let n_batches = total.div_ceil(cfg.batch_size).max(1);
        let mut epoch_loss = 0.0;
        for (ib, ob) in even_chunks(&ind_order, n_batches)
            .into_iter()
            .zip(even_chunks(&ood_order, n_batches))
        {
            let bsz = (ib.len() + ob.len()) as f64;
            if bsz == 0.0 {
                continue;
            }
            grads.fill(0.0);
            let mut loss = 0.0;
            if !ib.is_empty() {
                let xb = xi.select(Axis(0), ib);
                let mask = dropout_mask((ib.len(), model.dims.repr), cfg.dropout_p, &mut rng)?;
                let fwd = model.forward_masked(&xb, Some(mask))?;
                let (l, g) = batch_cross_entropy(&fwd.logits, &ti.select(Axis(0), ib));
                model.backward(&fwd, &(g / bsz), &mut grads);
                loss += l;
            }
            if !ob.is_empty() {
                let xb = xo.select(Axis(0), ob);
                let views = [0, 1].map(|_| {
                    dropout_mask((ob.len(), model.dims.repr), cfg.dropout_p, &mut rng)
                        .and_then(|mask| model.forward_masked(&xb, Some(mask)))
                });
                let [v1, v2] = views;
                let views = [v1?, v2?];
                let targets = views
                    .iter()
                    .map(|f| self_labels(f.logits.slice(s![.., n..]).t().to_owned(), n, cfg))
                    .collect::<Result<Vec<_>>>()?;
                // view v learns from the other view's plan
                for (v, fwd) in views.iter().enumerate() {
                    let (l, g) = batch_cross_entropy(&fwd.logits, &targets[1 - v]);
                    model.backward(fwd, &(g / (2.0 * bsz)), &mut grads);
                    loss += 0.5 * l;
                }
            }
            check_loss(loss)?;
            opt.step(&mut model.params, &grads, lr);
            epoch_loss += loss;
        }

        let train_labels = ood_head_labels(&model, &xo)?;
        purity_trace.push(purity(&train_labels, &split.ood_train, split));
        let val_sc = ood_head_silhouette(&model, &xv)?;
        curve.push(EpochRecord {
            epoch,
            loss: epoch_loss / total.max(1) as f64,
            lr,
            val_sc,
        });
        if selector.observe(val_sc, epoch, &model.params) {
            log::debug!("e2e stopped at epoch {epoch}");
            break;
        }
    }
    let mut selected_epoch = None;
    if let Some((_, e, params)) = selector.best {
        model.params = params;
        selected_epoch = Some(e);
    }
    finish(
        split,
        cfg,
        model,
        MappingScope::Ood,
        ReportParts {
            curve,
            pretrain_curve,
            purity: purity_trace,
            selected_epoch,
        },
        started,
    )
}

/// (B × (N+M)) targets `[0_N; ŷ]` from an M × B block of OOD logits.
fn self_labels(ood_logits: Array2<f64>, n: usize, cfg: &TrainConfig) -> Result<Array2<f64>> {
    let (m, b) = ood_logits.dim();
    let ood_logits = if cfg.sk_standardize {
        standardize(ood_logits)
    } else {
        ood_logits
    };
    let plan = sinkhorn_pseudo_labels(
        &SinkhornProblem::new(ood_logits)
            .with_epsilon(cfg.epsilon)
            .with_iters(cfg.sk_iters),
    )?;
    let mut t = Array2::zeros((b, n + m));
    if cfg.hard_pseudo_labels {
        for (j, c) in plan.hard_labels().into_iter().enumerate() {
            t[[j, n + c]] = 1.0;
        }
    } else {
        t.slice_mut(s![.., n..]).assign(&plan.targets.t());
    }
    Ok(t)
}

/// Zero mean, unit standard deviation over the whole block, so ε acts on a
/// fixed logit scale however large the head's weights grow.
fn standardize(l: Array2<f64>) -> Array2<f64> {
    let mean = l.mean().unwrap_or(0.0);
    let sd = l.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0).sqrt();
    if sd > 1e-12 {
        l.mapv(|v| (v - mean) / sd)
    } else {
        l.mapv(|_| 0.0)
    }
}

fn ood_head_labels(model: &JointModel, x: &Array2<f64>) -> Result<Vec<usize>> {
    let n = model.dims.n_ind;
    Ok(model
        .logits(x)?
        .axis_iter(Axis(0))
        .map(|r| argmax(r.iter().skip(n).copied()))
        .collect())
}

/// Run the configured method. The test partition is read once, after
/// training.
pub fn run(split: &GidSplit, cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if split.n_ood_classes == 0 {
        return Err(data_err!("split has no OOD classes"));
    }
    match cfg.method {
        Method::KmeansPipeline | Method::DeepalignedPipeline => run_pipeline(split, cfg),
        Method::DeepalignedMix => run_deepaligned_mix(split, cfg),
        Method::E2e => run_e2e(split, cfg),
    }
}
