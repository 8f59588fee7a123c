//! Training loop, optimizer, learning-rate schedule and inference.

mod outputs;

pub use outputs::{read_metrics, TrainOutputs};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};

use crate::data::{feature_matrix, split, Augmenter, BatchIterator, DomainDataset, Sample, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::{keep_rate, pl_accuracy};
use crate::modulator::init_from_variance;
use crate::network::{Checkpoint, ExtractorConfig, ForwardMode, Model};
use crate::numerics::{argmax, Array2, ParamId, ParamSet};
use crate::objective::{total_loss, ColMaxTargets, LossBatch, LossBreakdown, LossWeights};
use crate::pseudolabel::{
    baseline_pseudo_label, block_diagonals, plain_probabilities, predict_matrix, pseudo_label,
    PseudoLabelRecord, BASELINE_THRESHOLD,
};
use crate::rng::{self, tag};
use crate::sarproto::SarBank;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Method {
    /// Modulated features, MC-dropout pseudo-labels and all four loss terms.
    #[default]
    Fm,
    /// Plain classifier with fixed-threshold pseudo-labels.
    FixmatchBaseline,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm" => Ok(Method::Fm),
            "fixmatch-baseline" => Ok(Method::FixmatchBaseline),
            other => Err(Error::Parameter(format!(
                "unknown mode {other:?}, expected fm or fixmatch-baseline"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fm => "fm",
            Method::FixmatchBaseline => "fixmatch-baseline",
        })
    }
}

/// Extractor shape; the input width comes from the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ExtractorConfig::new(1);
        ModelConfig {
            hidden_dims: d.hidden_dims,
            feature_dim: d.feature_dim,
            residual: d.residual,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_main: f64,
    pub lr_modulator: f64,
    pub momentum: f64,
    pub tau: f64,
    pub mc_samples: usize,
    pub weights: LossWeights,
    pub per_domain_labeled: usize,
    pub per_domain_unlabeled: usize,
    pub dropout_p: f64,
    /// Joint gradient norm cap applied before each update; `None` disables it.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub method: Method,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr_main: 0.03,
            lr_modulator: 0.03,
            momentum: 0.9,
            tau: 0.75,
            mc_samples: 5,
            weights: LossWeights::default(),
            per_domain_labeled: 16,
            per_domain_unlabeled: 16,
            dropout_p: 0.05,
            max_grad_norm: None,
            seed: 0,
            method: Method::Fm,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr_main > 0.0) || !(self.lr_modulator > 0.0) {
            return bad(format!("learning rates must be positive ({}, {})", self.lr_main, self.lr_modulator));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (0, 1)", self.tau));
        }
        if self.mc_samples < 2 {
            return bad(format!("mc_samples {} below 2", self.mc_samples));
        }
        if self.weights.beta < 0.0 || self.weights.gamma < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.per_domain_labeled == 0 || self.per_domain_unlabeled == 0 {
            return bad("per-domain batch sizes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("max_grad_norm {c} must be positive"));
            }
        }
        Ok(())
    }

    fn extractor(&self, input_dim: usize) -> ExtractorConfig {
        ExtractorConfig {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            feature_dim: self.model.feature_dim,
            dropout_p: self.dropout_p,
            residual: self.model.residual,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean over the epoch's optimizer steps.
    pub losses: LossBreakdown,
    pub keep_rate: f64,
    /// Absent when no pseudo-label was kept during the epoch.
    pub pl_accuracy: Option<f64>,
    pub target_accuracy: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Optimizer steps taken in the epoch.
    pub steps: usize,
}

/// `base · ½ · (1 + cos(π · step / total))`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (PI * t).cos())
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Array2>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: params
                .iter()
                .map(|(_, p)| Array2::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    /// Updates every learnable parameter with its own learning rate.
    pub fn step(&mut self, params: &mut ParamSet, lr: impl Fn(ParamId) -> f64) {
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            if !p.learnable {
                continue;
            }
            let rate = lr(id);
            let v = &mut self.velocity[id.index()];
            for ((vi, &g), w) in v
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(p.value.data_mut().iter_mut())
            {
                *vi = self.momentum * *vi + g;
                *w -= rate * *vi;
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter(|(_, p)| p.learnable)
        .map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            params.get_mut(id).grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Learned artifacts of one run.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: Model,
    /// Bank of the final epoch; `None` for the baseline.
    pub bank: Option<SarBank>,
    pub method: Method,
    pub reports: Vec<EpochReport>,
}

impl TrainResult {
    pub fn to_checkpoint(&self) -> Checkpoint {
        checkpoint(&self.model, self.bank.as_ref(), self.method, self.reports.len())
    }
}

fn checkpoint(model: &Model, bank: Option<&SarBank>, method: Method, epochs_done: usize) -> Checkpoint {
    let mut ck = model.to_checkpoint();
    ck.push_meta("method", method);
    ck.push_meta("epochs_done", epochs_done);
    if let Some(b) = bank {
        ck.push_meta("bank_epoch", b.epoch);
        ck.arrays.push(("bank.prototypes".into(), b.prototypes.clone()));
        ck.arrays.push(("bank.similarity".into(), b.similarity.clone()));
        ck.arrays.push(("bank.sar".into(), b.sar.clone()));
    }
    ck
}

/// Model, optional SAR matrix and method read back from a checkpoint.
pub fn load_artifacts(ck: &Checkpoint) -> Result<(Model, Option<Array2>, Method)> {
    let model = Model::from_checkpoint(ck)?;
    let method: Method = ck
        .meta("method")
        .ok_or_else(|| Error::Checkpoint("missing meta method".into()))?
        .parse()?;
    let sar = match method {
        Method::Fm => Some(
            ck.array("bank.sar")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing array bank.sar".into()))?,
        ),
        Method::FixmatchBaseline => None,
    };
    Ok((model, sar, method))
}

/// Predicted classes: argmax of the block diagonal of the modulated
/// prediction matrix with `sar`, plain argmax without. Ties go to the
/// smaller class id.
pub fn infer(model: &Model, sar: Option<&Array2>, x: &Array2) -> Result<Vec<usize>> {
    if x.rows() == 0 {
        return Ok(Vec::new());
    }
    match sar {
        Some(r) => {
            let s = predict_matrix(model, r, x, false, &mut rng::seeded(0))?;
            let d = block_diagonals(&s, model.num_classes());
            Ok((0..d.rows()).map(|i| argmax(d.row(i))).collect())
        }
        None => {
            let p = plain_probabilities(model, x)?;
            Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
        }
    }
}

/// Top-1 accuracy over `samples`.
pub fn evaluate(model: &Model, sar: Option<&Array2>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let pred = infer(model, sar, &feature_matrix(samples))?;
    let correct = pred.iter().zip(samples).filter(|(p, s)| **p == s.class_id).count();
    Ok(correct as f64 / samples.len() as f64)
}

fn rows_of(pool: &[Sample], idx: &[usize], f: impl FnMut(&[f64]) -> Vec<f64>) -> Array2 {
    let mut f = f;
    let cols = pool.first().map_or(0, |s| s.features.len());
    let data: Vec<f64> = idx.iter().flat_map(|&i| f(&pool[i].features)).collect();
    Array2::from_vec(idx.len(), cols, data).expect("rows share one width")
}

/// Runs the full training procedure on the leave-one-domain-out split.
pub fn train(
    dataset: &DomainDataset,
    plan: &SplitPlan,
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainResult> {
    config.validate()?;
    let sp = split(dataset, plan)?;
    let c = sp.num_classes;
    let seed = config.seed;
    let augmenter = Augmenter::fit(&sp.unlabeled);
    let mut model = Model::new(
        config.extractor(dataset.input_dim),
        c,
        &mut rng::stream(seed, &[tag::INIT]),
    )?;
    let mut batches = BatchIterator::new(
        &sp.labeled,
        &sp.unlabeled,
        config.per_domain_labeled,
        config.per_domain_unlabeled,
        seed,
    );
    let steps_per_epoch = batches.batches_per_epoch();
    let total_steps = config.epochs * steps_per_epoch;
    let x_labeled = feature_matrix(&sp.labeled);
    let y_labeled: Vec<usize> = sp.labeled.iter().map(|s| s.class_id).collect();
    let modulator = model.modulator;
    let mut sgd = Sgd::new(&model.params, config.momentum);
    let mut writer = outputs.open()?;

    let mut reports = Vec::with_capacity(config.epochs);
    let mut bank = None;
    let mut best = f64::NEG_INFINITY;
    let mut step = 0usize;
    let mut lr = config.lr_main;
    for epoch in 0..config.epochs {
        if config.method == Method::Fm {
            let feats = model.features(&x_labeled, ForwardMode::Eval, &mut rng::seeded(0))?;
            if epoch == 0 {
                let init = init_from_variance(&feats, &y_labeled, c)?;
                model.set_modulation(init.matrix)?;
            }
            bank = Some(SarBank::build(&feats, &y_labeled, c, epoch)?);
        }
        let sar = bank.as_ref().map(|b| &b.sar);

        let mut losses = Vec::with_capacity(steps_per_epoch);
        let mut records: Vec<PseudoLabelRecord> = Vec::new();
        let mut truth = Vec::new();
        let mut slots = Vec::new();
        for _ in 0..steps_per_epoch {
            let idx = batches.next_batch();
            let mut arng = rng::stream(seed, &[tag::AUGMENT, step as u64]);
            let xl = rows_of(&sp.labeled, &idx.labeled, |x| augmenter.weak(x, &mut arng));
            let yl: Vec<usize> = idx.labeled.iter().map(|&i| sp.labeled[i].class_id).collect();
            let xu_weak = rows_of(&sp.unlabeled, &idx.unlabeled, |x| augmenter.weak(x, &mut arng));
            let xu_strong = rows_of(&sp.unlabeled, &idx.unlabeled, |x| augmenter.strong(x, &mut arng));

            let recs = match sar {
                Some(r) => pseudo_label(
                    &model,
                    r,
                    &xu_weak,
                    config.mc_samples,
                    config.tau,
                    &mut rng::stream(seed, &[tag::PSEUDO_LABEL, step as u64]),
                )?,
                None => baseline_pseudo_label(&model, &xu_weak, BASELINE_THRESHOLD)?,
            };
            let batch = LossBatch {
                labeled_x: &xl,
                labels: &yl,
                unlabeled_x: &xu_strong,
                records: &recs,
            };
            let built = total_loss(
                &model,
                &model.params,
                sar,
                &batch,
                config.weights,
                &mut ColMaxTargets::live(),
                &mut rng::stream(seed, &[tag::TRAIN_DROPOUT, step as u64]),
            );
            let built = match built {
                Ok(b) => b,
                Err(e @ Error::NonFinite(_)) => {
                    writer.abort(&checkpoint(&model, bank.as_ref(), config.method, epoch), epoch, step, &e)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            model.params.zero_grad();
            built.graph.backward(built.total, &mut model.params)?;
            if let Some((_, p)) = model.params.iter().find(|(_, p)| !p.grad.all_finite()) {
                let e = Error::NonFinite(format!("gradient of {}", p.name));
                writer.abort(&checkpoint(&model, bank.as_ref(), config.method, epoch), epoch, step, &e)?;
                return Err(e);
            }
            if let Some(c) = config.max_grad_norm {
                clip_grad_norm(&mut model.params, c);
            }
            lr = cosine_lr(config.lr_main, step, total_steps);
            let lr_m = cosine_lr(config.lr_modulator, step, total_steps);
            sgd.step(&mut model.params, |id| if id == modulator { lr_m } else { lr });
            debug!("epoch {epoch} step {step} loss {:?}", built.breakdown);

            losses.push(built.breakdown);
            truth.extend(idx.unlabeled.iter().map(|&i| sp.unlabeled[i].class_id));
            slots.extend_from_slice(&idx.unlabeled);
            records.extend(recs);
            step += 1;
        }

        let target_accuracy = evaluate(&model, sar, &sp.target_test)?;
        let report = EpochReport {
            epoch,
            losses: LossBreakdown::mean(&losses).expect("at least one step per epoch"),
            keep_rate: keep_rate(&records)?,
            pl_accuracy: pl_accuracy(&records, &truth)?,
            target_accuracy,
            lr,
            steps: losses.len(),
        };
        info!(
            "seed {seed} epoch {epoch}: loss {:.4} keep {:.3} pl_acc {:?} target_acc {:.4}",
            report.losses.total, report.keep_rate, report.pl_accuracy, report.target_accuracy
        );
        writer.epoch(&report, &records, &slots, &truth, bank.as_ref(), model.modulation())?;
        if target_accuracy > best {
            best = target_accuracy;
            writer.checkpoint("best.ckpt", &checkpoint(&model, bank.as_ref(), config.method, epoch + 1))?;
        }
        reports.push(report);
    }

    let result = TrainResult {
        model,
        bank,
        method: config.method,
        reports,
    };
    writer.checkpoint("final.ckpt", &result.to_checkpoint())?;
    Ok(result)
}
