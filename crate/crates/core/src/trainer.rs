//! Two-stage optimization.
//!
//! Stage 1 aligns the hidden features ν with per-category knowledge vectors
//! ξ through one injection head per enabled scale, using a cosine loss with
//! optional negative categories. Stage 2 freezes everything but the MLP head
//! and trains it with cross-entropy on cached ν. The baseline skips stage 1
//! and trains backbone and head end to end.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kiemb::EmbeddingFile;
use crate::linalg;
use crate::net::{ModelConfig, ModelState, NetError, ParamGroup};
use crate::rng;
use crate::scale::{Scale, ScaleMask};
use crate::synth::{Dataset, Split};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no knowledge scale enabled")]
    NoScaleEnabled,
    #[error("knowledge bundle has no {0} vectors")]
    MissingScale(Scale),
    #[error("{scale} knowledge has no vector for {category}")]
    MissingCategory { scale: Scale, category: String },
    #[error("label {label} out of range for {classes} categories")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid training plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleKnowledge {
    pub dim: usize,
    /// Unit vectors indexed like the bundle's categories.
    pub vectors: Vec<Vec<f32>>,
}

/// Per-category knowledge vectors ξ for each available scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBundle {
    categories: Vec<String>,
    scales: BTreeMap<Scale, ScaleKnowledge>,
}

impl KnowledgeBundle {
    pub fn new(categories: Vec<String>) -> Self {
        Self {
            categories,
            scales: BTreeMap::new(),
        }
    }

    /// Adds one scale. Every category needs a nonzero vector of a common
    /// dimension; vectors are L2-normalized on the way in.
    pub fn insert(&mut self, scale: Scale, named: &[(String, Vec<f32>)]) -> Result<(), TrainError> {
        let lookup: BTreeMap<&str, &[f32]> = named.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
        let mut dim = None;
        let mut vectors = Vec::with_capacity(self.categories.len());
        for c in &self.categories {
            let v = lookup.get(c.as_str()).ok_or_else(|| TrainError::MissingCategory {
                scale,
                category: c.clone(),
            })?;
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(TrainError::DimensionMismatch {
                    expected: d,
                    found: v.len(),
                });
            }
            if linalg::norm(v) == 0.0 {
                return Err(TrainError::ZeroVector);
            }
            vectors.push(linalg::normalized_f32(v));
        }
        let dim = dim.ok_or_else(|| TrainError::InvalidPlan("bundle has no categories".into()))?;
        self.scales.insert(scale, ScaleKnowledge { dim, vectors });
        Ok(())
    }

    pub fn insert_file(&mut self, file: &EmbeddingFile) -> Result<(), TrainError> {
        self.insert(file.scale, &file.rows)
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn scales(&self) -> Vec<Scale> {
        self.scales.keys().copied().collect()
    }

    pub fn dim(&self, scale: Scale) -> Option<usize> {
        self.scales.get(&scale).map(|k| k.dim)
    }

    pub fn scale_dims(&self) -> Vec<(Scale, usize)> {
        self.scales.iter().map(|(&s, k)| (s, k.dim)).collect()
    }

    pub fn vector(&self, scale: Scale, category: usize) -> Option<&[f32]> {
        self.scales.get(&scale)?.vectors.get(category).map(Vec::as_slice)
    }

    fn knowledge(&self, scale: Scale) -> Result<&ScaleKnowledge, TrainError> {
        self.scales.get(&scale).ok_or(TrainError::MissingScale(scale))
    }

    /// Every scale in `mask` must be present.
    pub fn covers(&self, mask: ScaleMask) -> Result<(), TrainError> {
        for s in mask.scales() {
            self.knowledge(s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub knowledge_epochs: usize,
    pub classification_epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub scales: ScaleMask,
    /// Wrong categories sampled per example (m).
    pub negatives: usize,
    /// Weight of the negative term (λ).
    pub negative_weight: f64,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            knowledge_epochs: 30,
            classification_epochs: 30,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            scales: ScaleMask::ALL,
            negatives: 4,
            negative_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidPlan("batch_size must be positive".into()));
        }
        if !(self.negative_weight >= 0.0 && self.negative_weight.is_finite()) {
            return Err(TrainError::InvalidPlan("negative_weight must be finite and non-negative".into()));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(TrainError::InvalidPlan("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `−⟨ν, ξ⟩ / (‖ν‖‖ξ‖)`
pub fn cosine_loss(nu: &[f32], xi: &[f32]) -> Result<f64, TrainError> {
    if nu.len() != xi.len() {
        return Err(TrainError::DimensionMismatch {
            expected: xi.len(),
            found: nu.len(),
        });
    }
    let (a, b) = (linalg::norm(nu), linalg::norm(xi));
    if a == 0.0 || b == 0.0 {
        return Err(TrainError::ZeroVector);
    }
    Ok(-linalg::dot(nu, xi) / (a * b))
}

/// Up to `m` distinct wrong categories, uniformly; all of them when
/// `m ≥ classes − 1`.
pub fn sample_negatives<R: Rng>(label: usize, classes: usize, m: usize, rng: &mut R) -> Vec<usize> {
    let others: Vec<usize> = (0..classes).filter(|&c| c != label).collect();
    if m >= others.len() {
        return others;
    }
    let mut picked: Vec<usize> = others.choose_multiple(rng, m).copied().collect();
    picked.sort_unstable();
    picked
}

/// Knowledge loss of one example given its head outputs per scale:
/// `Σ_s [cosine_loss(h_s, ξ_s[label]) + λ · mean_neg cos(h_s, ξ_s[neg])]`.
pub fn knowledge_loss<R: Rng>(
    heads: &[(Scale, &[f32])],
    label: usize,
    bundle: &KnowledgeBundle,
    mask: ScaleMask,
    m: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<f64, TrainError> {
    if mask.is_empty() {
        return Err(TrainError::NoScaleEnabled);
    }
    let classes = bundle.categories.len();
    if label >= classes {
        return Err(TrainError::LabelOutOfRange { label, classes });
    }
    let mut total = 0.0;
    for s in mask.scales() {
        let k = bundle.knowledge(s)?;
        let h = heads
            .iter()
            .find(|(hs, _)| *hs == s)
            .map(|(_, v)| *v)
            .ok_or(TrainError::MissingScale(s))?;
        total += cosine_loss(h, &k.vectors[label])?;
        if lambda > 0.0 && m > 0 {
            let negs = sample_negatives(label, classes, m, rng);
            if !negs.is_empty() {
                let mut acc = 0.0;
                for &n in &negs {
                    acc -= cosine_loss(h, &k.vectors[n])?;
                }
                total += lambda * acc / negs.len() as f64;
            }
        }
    }
    Ok(total)
}

/// Rows `λ · mean ξ[neg] − ξ[label]`, so that `⟨n̂, row⟩` is the per-example
/// loss for a unit head output n̂.
fn batch_targets<R: Rng>(labels: &[usize], k: &ScaleKnowledge, m: usize, lambda: f64, rng: &mut R) -> Tensor<f32> {
    let classes = k.vectors.len();
    let mut out = Vec::with_capacity(labels.len() * k.dim);
    for &l in labels {
        let mut row: Vec<f64> = k.vectors[l].iter().map(|&v| -f64::from(v)).collect();
        if lambda > 0.0 && m > 0 {
            let negs = sample_negatives(l, classes, m, rng);
            let w = lambda / negs.len().max(1) as f64;
            for &n in &negs {
                for (r, &v) in row.iter_mut().zip(&k.vectors[n]) {
                    *r += w * f64::from(v);
                }
            }
        }
        out.extend(row.into_iter().map(|v| v as f32));
    }
    Tensor::new(vec![labels.len(), k.dim], out).expect("rows match dim")
}

/// Batch knowledge loss on a tape from raw (unnormalized) head outputs.
/// Negatives for scale `s` are drawn from `rngs[s]`.
pub fn knowledge_loss_on_tape<R: Rng>(
    tape: &mut Tape<f32>,
    heads: &[(Scale, Var)],
    labels: &[usize],
    bundle: &KnowledgeBundle,
    m: usize,
    lambda: f64,
    rngs: &mut [R],
) -> Result<Var, TrainError> {
    if heads.is_empty() {
        return Err(TrainError::NoScaleEnabled);
    }
    let classes = bundle.categories.len();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::LabelOutOfRange { label, classes });
    }
    let inv_batch = 1.0 / labels.len().max(1) as f64;
    let mut total: Option<Var> = None;
    for (i, &(s, h)) in heads.iter().enumerate() {
        let k = bundle.knowledge(s)?;
        let width = tape.shape(h).get(1).copied().unwrap_or(0);
        if width != k.dim {
            return Err(TrainError::DimensionMismatch {
                expected: k.dim,
                found: width,
            });
        }
        let unit = tape.l2_normalize_rows(h)?;
        let target = tape.constant(batch_targets(labels, k, m, lambda, &mut rngs[i]));
        let prod = tape.mul(unit, target)?;
        let sum = tape.sum(prod);
        let term = tape.scale(sum, inv_batch);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one head"))
}

/// Shuffled example order for one epoch. Baseline and injected runs share
/// this stream, so equal seeds give equal data order.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag("data-order"), epoch as u64]));
    order
}

fn digest_order(digest: &mut u64, order: &[usize]) {
    for &i in order {
        *digest = rng::splitmix64(*digest ^ i as u64);
    }
}

const EVAL_BATCH: usize = 64;

fn batched<F>(n: usize, f: F) -> Result<Vec<Tensor<f32>>, TrainError>
where
    F: Fn(&[usize]) -> Result<Tensor<f32>, NetError> + Sync,
{
    let idx: Vec<usize> = (0..n).collect();
    idx.par_chunks(EVAL_BATCH).map(|c| f(c).map_err(TrainError::from)).collect()
}

fn concat_rows(parts: Vec<Tensor<f32>>, width: usize) -> Tensor<f32> {
    let rows: usize = parts.iter().map(|t| t.shape()[0]).sum();
    let data: Vec<f32> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![rows, width], data).expect("row widths agree")
}

/// Eval-mode ν for a whole split.
pub fn hidden_features(model: &ModelState, split: &Split) -> Result<Tensor<f32>, TrainError> {
    let parts = batched(split.len(), |c| model.hidden_features(&split.images.gather_rows(c)))?;
    Ok(concat_rows(parts, model.config().backbone.hidden_dim()))
}

/// Eval-mode unit head outputs for precomputed ν.
pub fn projections(model: &ModelState, nu: &Tensor<f32>, scale: Scale) -> Result<Tensor<f32>, TrainError> {
    let dim = model.config().head(scale).ok_or(NetError::UnknownScale(scale))?.dim;
    let parts = batched(nu.shape()[0], |c| model.injection_features(&nu.gather_rows(c), scale))?;
    Ok(concat_rows(parts, dim))
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i)
}

fn accuracy_of(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().enumerate().filter(|&(i, &l)| argmax(logits.row(i)) == l).count();
    hits as f64 / labels.len() as f64
}

/// Top-1 accuracy from precomputed ν.
pub fn accuracy_from_hidden(model: &ModelState, nu: &Tensor<f32>, labels: &[usize]) -> Result<f64, TrainError> {
    let parts = batched(nu.shape()[0], |c| model.logits_from_hidden(&nu.gather_rows(c)))?;
    Ok(accuracy_of(&concat_rows(parts, model.config().classes), labels))
}

pub fn accuracy(model: &ModelState, split: &Split) -> Result<f64, TrainError> {
    accuracy_from_hidden(model, &hidden_features(model, split)?, &split.labels)
}

/// Mean eval-mode cosine between head output and the correct ξ.
pub fn alignment(
    model: &ModelState,
    nu: &Tensor<f32>,
    labels: &[usize],
    bundle: &KnowledgeBundle,
    scale: Scale,
) -> Result<f64, TrainError> {
    let k = bundle.knowledge(scale)?;
    let p = projections(model, nu, scale)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| linalg::cosine(p.row(i), &k.vectors[l]))
        .sum();
    Ok(sum / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Mean correct-category cosine seen by the training batches (dropout on).
    pub train_alignment: BTreeMap<Scale, f64>,
    /// Eval-mode correct-category cosine on the validation split.
    pub val_alignment: BTreeMap<Scale, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeReport {
    pub scales: ScaleMask,
    pub epochs: Vec<KnowledgeEpoch>,
    pub first_epoch_batch_losses: Vec<f64>,
    pub data_order_digest: u64,
}

impl KnowledgeReport {
    /// Final validation alignment averaged over enabled scales.
    pub fn final_alignment(&self) -> Option<f64> {
        let last = self.epochs.last()?;
        let v = &last.val_alignment;
        (!v.is_empty()).then(|| v.values().sum::<f64>() / v.len() as f64)
    }
}

fn check_labels(split: &Split, classes: usize) -> Result<(), TrainError> {
    match split.labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(TrainError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Stage 1: trains backbone and the enabled injection heads; the
/// classification head and disabled heads stay frozen.
pub fn run_knowledge_stage(
    model: &mut ModelState,
    train: &Split,
    val: &Split,
    bundle: &KnowledgeBundle,
    plan: &TrainPlan,
) -> Result<KnowledgeReport, TrainError> {
    plan.validate()?;
    let scales: Vec<Scale> = plan.scales.scales().collect();
    if scales.is_empty() {
        return Err(TrainError::NoScaleEnabled);
    }
    bundle.covers(plan.scales)?;
    let classes = bundle.categories.len();
    check_labels(train, classes)?;
    check_labels(val, classes)?;
    for &s in &scales {
        let head = model.config().head(s).ok_or(NetError::UnknownScale(s))?;
        let dim = bundle.knowledge(s)?.dim;
        if head.dim != dim {
            return Err(TrainError::DimensionMismatch {
                expected: dim,
                found: head.dim,
            });
        }
    }
    model.unfreeze_all();
    model.freeze(ParamGroup::Classifier);
    for h in model.config().heads.clone() {
        if !plan.scales.contains(h.scale) {
            model.freeze(ParamGroup::Injection(h.scale));
        }
    }

    let mut opt = Adam::new(plan.optimizer);
    let mut report = KnowledgeReport {
        scales: plan.scales,
        epochs: Vec::new(),
        first_epoch_batch_losses: Vec::new(),
        data_order_digest: 0,
    };
    for epoch in 0..plan.knowledge_epochs {
        let order = epoch_order(plan.seed, epoch, train.len());
        digest_order(&mut report.data_order_digest, &order);
        let mut loss_sum = 0.0;
        let mut align_sum: BTreeMap<Scale, f64> = BTreeMap::new();
        for (bi, chunk) in order.chunks(plan.batch_size).enumerate() {
            let (x, labels) = train.batch(chunk);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xv = tape.constant(x);
            let hidden = model.forward_hidden(&mut tape, &bound, xv)?;
            let mut heads = Vec::with_capacity(scales.len());
            let mut rngs = Vec::with_capacity(scales.len());
            for &s in &scales {
                let ids = [epoch as u64, bi as u64, s.index() as u64];
                let drop_seed = rng::derive_seed(plan.seed, &[rng::tag("dropout"), ids[0], ids[1], ids[2]]);
                heads.push((s, model.forward_injection(&mut tape, &bound, hidden.nu, s, true, drop_seed)?));
                rngs.push(rng::stream(plan.seed, &[rng::tag("negatives"), ids[0], ids[1], ids[2]]));
            }
            let loss = knowledge_loss_on_tape(&mut tape, &heads, &labels, bundle, plan.negatives, plan.negative_weight, &mut rngs)?;
            for &(s, h) in &heads {
                let k = bundle.knowledge(s)?;
                let out = tape.value(h);
                let sum: f64 = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| linalg::cosine(out.row(i), &k.vectors[l]))
                    .sum();
                *align_sum.entry(s).or_default() += sum;
            }
            tape.backward(loss)?;
            model.apply_grads(&tape, &bound, &mut opt)?;
            let l = f64::from(tape.value(loss).data()[0]);
            loss_sum += l * chunk.len() as f64;
            if epoch == 0 {
                report.first_epoch_batch_losses.push(l);
            }
        }
        let n = train.len().max(1) as f64;
        let nu_val = hidden_features(model, val)?;
        let mut val_alignment = BTreeMap::new();
        for &s in &scales {
            val_alignment.insert(s, alignment(model, &nu_val, &val.labels, bundle, s)?);
        }
        let rec = KnowledgeEpoch {
            epoch,
            loss: loss_sum / n,
            train_alignment: align_sum.into_iter().map(|(s, v)| (s, v / n)).collect(),
            val_alignment,
        };
        log::info!(
            "knowledge epoch {epoch}: loss {:.4} val alignment {:?}",
            rec.loss,
            rec.val_alignment
        );
        report.epochs.push(rec);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassificationMode {
    /// Backbone and injection heads frozen; only the MLP head trains.
    Injected,
    /// End-to-end training with nothing frozen.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub mode: ClassificationMode,
    pub initial_val_accuracy: f64,
    pub epochs: Vec<ClassificationEpoch>,
    pub final_val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub data_order_digest: u64,
}

/// Stage 2, or the baseline when `mode` is [`ClassificationMode::Baseline`].
pub fn run_classification_stage(
    model: &mut ModelState,
    train: &Split,
    val: &Split,
    plan: &TrainPlan,
    mode: ClassificationMode,
) -> Result<ClassificationReport, TrainError> {
    plan.validate()?;
    let classes = model.config().classes;
    check_labels(train, classes)?;
    check_labels(val, classes)?;
    model.unfreeze_all();
    for h in model.config().heads.clone() {
        model.freeze(ParamGroup::Injection(h.scale));
    }
    if mode == ClassificationMode::Injected {
        model.freeze(ParamGroup::Backbone);
    }

    // With a frozen backbone ν never changes, so it is computed once.
    let cached = match mode {
        ClassificationMode::Injected => Some((hidden_features(model, train)?, hidden_features(model, val)?)),
        ClassificationMode::Baseline => None,
    };
    let val_accuracy = |model: &ModelState| match &cached {
        Some((_, nu_val)) => accuracy_from_hidden(model, nu_val, &val.labels),
        None => accuracy(model, val),
    };
    let initial = val_accuracy(model)?;
    let mut opt = Adam::new(plan.optimizer);
    let mut report = ClassificationReport {
        mode,
        initial_val_accuracy: initial,
        epochs: Vec::new(),
        final_val_accuracy: initial,
        best_val_accuracy: initial,
        data_order_digest: 0,
    };
    for epoch in 0..plan.classification_epochs {
        let order = epoch_order(plan.seed, epoch, train.len());
        digest_order(&mut report.data_order_digest, &order);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(plan.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let nu = match &cached {
                Some((nu_train, _)) => tape.constant(nu_train.gather_rows(chunk)),
                None => {
                    let x = tape.constant(train.images.gather_rows(chunk));
                    model.forward_hidden(&mut tape, &bound, x)?.nu
                }
            };
            let logits = model.forward_mlp(&mut tape, &bound, nu)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            model.apply_grads(&tape, &bound, &mut opt)?;
            let out = tape.value(logits);
            hits += labels.iter().enumerate().filter(|&(i, &l)| argmax(out.row(i)) == l).count();
            loss_sum += f64::from(tape.value(loss).data()[0]) * chunk.len() as f64;
        }
        let n = train.len().max(1) as f64;
        let acc = val_accuracy(model)?;
        log::info!("classification epoch {epoch} ({mode:?}): val accuracy {acc:.4}");
        report.epochs.push(ClassificationEpoch {
            epoch,
            loss: loss_sum / n,
            train_accuracy: hits as f64 / n,
            val_accuracy: acc,
        });
        report.final_val_accuracy = acc;
        report.best_val_accuracy = report.best_val_accuracy.max(acc);
    }
    Ok(report)
}

/// One complete pipeline for a single mask.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub mask: ScaleMask,
    pub model: ModelState,
    pub knowledge: Option<KnowledgeReport>,
    pub classification: ClassificationReport,
}

/// Fresh model from `config` seeded by the plan; an empty mask runs the
/// baseline, any other mask both stages.
pub fn run_pipeline(
    data: &Dataset,
    bundle: &KnowledgeBundle,
    config: &ModelConfig,
    mask: ScaleMask,
    plan: &TrainPlan,
) -> Result<PipelineRun, TrainError> {
    let mut model = ModelState::new(config.clone(), plan.seed)?;
    let plan = TrainPlan {
        scales: mask,
        ..plan.clone()
    };
    if mask.is_empty() {
        let classification = run_classification_stage(&mut model, &data.train, &data.val, &plan, ClassificationMode::Baseline)?;
        return Ok(PipelineRun {
            mask,
            model,
            knowledge: None,
            classification,
        });
    }
    let knowledge = run_knowledge_stage(&mut model, &data.train, &data.val, bundle, &plan)?;
    let classification = run_classification_stage(&mut model, &data.train, &data.val, &plan, ClassificationMode::Injected)?;
    Ok(PipelineRun {
        mask,
        model,
        knowledge: Some(knowledge),
        classification,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: ScaleMask,
    pub ki_s: bool,
    pub ki_m: bool,
    pub ki_l: bool,
    pub final_val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub knowledge_alignment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub backbone: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mark = |b: bool| if b { "✓" } else { "×" };
        w.write_record([
            "backbone",
            "KI-S",
            "KI-M",
            "KI-L",
            "val_accuracy",
            "best_val_accuracy",
            "knowledge_alignment",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                self.backbone.as_str(),
                mark(r.ki_s),
                mark(r.ki_m),
                mark(r.ki_l),
                &format!("{:.4}", r.final_val_accuracy),
                &format!("{:.4}", r.best_val_accuracy),
                &r.knowledge_alignment.map_or(String::new(), |a| format!("{a:.4}")),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is UTF-8")
    }

    pub fn row(&self, mask: ScaleMask) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mask == mask)
    }
}

/// Runs the full pipeline once per mask, every run from the same seed.
pub fn ablation_run(
    data: &Dataset,
    bundle: &KnowledgeBundle,
    config: &ModelConfig,
    backbone_name: &str,
    masks: &[ScaleMask],
    plan: &TrainPlan,
) -> Result<(AblationTable, Vec<PipelineRun>), TrainError> {
    let mut runs = Vec::with_capacity(masks.len());
    for &mask in masks {
        log::info!("ablation: scales {mask}");
        runs.push(run_pipeline(data, bundle, config, mask, plan)?);
    }
    let rows = runs
        .iter()
        .map(|r| AblationRow {
            mask: r.mask,
            ki_s: r.mask.contains(Scale::Small),
            ki_m: r.mask.contains(Scale::Medium),
            ki_l: r.mask.contains(Scale::Large),
            final_val_accuracy: r.classification.final_val_accuracy,
            best_val_accuracy: r.classification.best_val_accuracy,
            knowledge_alignment: r.knowledge.as_ref().and_then(KnowledgeReport::final_alignment),
        })
        .collect();
    Ok((
        AblationTable {
            backbone: backbone_name.to_string(),
            seed: plan.seed,
            rows,
        },
        runs,
    ))
}
