//! Minibatch SGD training, model selection and evaluation for every scheme.
//!
//! Epochs are counted from 1. The learning rate of epoch `e` is
//! `lr0 · factor^floor((e − 1) / period)`, so decay starts after `period`
//! completed epochs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{
    balance_by_augmentation, derive_seed, rng_for, Dataset, LabeledSample, Scenario, Split,
};
use crate::error::{Error, Result};
use crate::eval::{f1_report, heatmap_to_bbox, iou, localization_report, MetricsReport};
use crate::losses::{
    class_weights, softmax_wce, stl_total_loss, sup_loc_loss, AlphaSchedule, ClassWeights,
};
use crate::model::{
    warp_box, ConvSpec, Model, ModelConfig, ParamGroup, ParamStore, Scheme, StlHead,
};
use crate::stn::BBoxParams;
use crate::tensor::{PoolingConfig, Tape, Tensor, Var};

const STREAM_INIT: u64 = 16;
const STREAM_SHUFFLE: u64 = 17;

/// Batch size used for validation and evaluation passes.
pub const EVAL_BATCH: usize = 64;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_CSV: &str = "losses.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr0: f64,
    pub factor: f64,
    /// Epochs between decays; `None` keeps the rate constant.
    pub period: Option<usize>,
}

impl Schedule {
    pub const fn constant(lr0: f64) -> Self {
        Schedule {
            lr0,
            factor: 1.0,
            period: None,
        }
    }

    pub const fn step(lr0: f64, factor: f64, period: usize) -> Self {
        Schedule {
            lr0,
            factor,
            period: Some(period),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr0
            )));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay factor must lie in (0, 1], got {}",
                self.factor
            )));
        }
        if self.period == Some(0) {
            return Err(Error::Config("decay period must be positive".into()));
        }
        Ok(())
    }

    /// Rate after `completed` epochs.
    pub fn lr_after(&self, completed: usize) -> f64 {
        match self.period {
            Some(p) => self.lr0 * self.factor.powi((completed / p) as i32),
            None => self.lr0,
        }
    }

    /// Rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_after(epoch.saturating_sub(1))
    }
}

/// Classic momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_update(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::dim(
            "sgd_step",
            format!(
                "param {}, grad {}, velocity {}",
                param.len(),
                grad.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    /// Current rate per parameter group; groups without an entry are frozen.
    pub lr: BTreeMap<ParamGroup, f64>,
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        OptimizerState {
            momentum,
            lr: BTreeMap::new(),
            velocity: store
                .params
                .iter()
                .map(|p| vec![0.0; p.tensor.numel()])
                .collect(),
        }
    }

    pub fn set_lr(&mut self, group: ParamGroup, lr: f64) {
        self.lr.insert(group, lr);
    }
}

/// Applies one momentum step to every parameter of `store` using its
/// accumulated gradient. Parameters of frozen groups are left untouched.
pub fn sgd_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::dim(
            "sgd_step",
            format!(
                "{} velocity buffers for {} parameters",
                state.velocity.len(),
                store.len()
            ),
        ));
    }
    for (p, v) in store.params.iter_mut().zip(&mut state.velocity) {
        let Some(&lr) = state.lr.get(&p.group) else {
            continue;
        };
        let grad = p
            .tensor
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; v.len()]);
        sgd_update(p.tensor.data_mut(), &grad, v, lr, state.momentum)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Imbalance {
    /// Augmented copies balance the training classes.
    Augment,
    /// Inverse-frequency weighted cross-entropy.
    Wce,
    None,
}

impl std::str::FromStr for Imbalance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "augment" | "augment-balance" => Ok(Imbalance::Augment),
            "wce" => Ok(Imbalance::Wce),
            "none" | "ce" => Ok(Imbalance::None),
            _ => Err(Error::Usage(format!(
                "unknown imbalance handling `{s}` (augment, wce, none)"
            ))),
        }
    }
}

/// Architecture knobs shared by all schemes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub backbone: Vec<ConvSpec>,
    pub roi_size: usize,
    pub stl_size: usize,
    pub transition_dim: usize,
    pub stl_shared_layers: usize,
    pub stl_head: StlHead,
    pub pooling: PoolingConfig,
}

impl Default for Arch {
    fn default() -> Self {
        let m = ModelConfig::new(Scheme::Lbm, 2);
        Arch {
            backbone: m.backbone,
            roi_size: m.roi_size,
            stl_size: m.stl_size,
            transition_dim: m.transition_dim,
            stl_shared_layers: m.stl_shared_layers,
            stl_head: m.stl_head,
            pooling: m.pooling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scheme: Scheme,
    pub scenario: Scenario,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub imbalance: Imbalance,
    /// Loss blend of the two-branch scheme.
    pub alpha: f64,
    pub flip_epoch: Option<usize>,
    pub momentum: f64,
    /// Classifier rates (every scheme's main network).
    pub schedule: Schedule,
    /// Localizer rates for the attention and supervised-localizer schemes.
    pub localizer_schedule: Schedule,
    pub arch: Arch,
}

impl RunConfig {
    pub const DEFAULT_EPOCHS: usize = 30;
    pub const DEFAULT_BATCH: usize = 32;
    pub const DEFAULT_FLIP_EPOCH: usize = 15;

    /// Desk-scale defaults for a scheme.
    pub fn new(scheme: Scheme, scenario: Scenario) -> Self {
        let schedule = match scheme {
            Scheme::Stl => Schedule::step(3e-2, 0.1, 15),
            Scheme::GlobalPool => Schedule::constant(1e-3),
            _ => Schedule::step(1e-2, 0.5, 4),
        };
        let localizer_schedule = match scheme {
            Scheme::SupLoc => Schedule::constant(1e-2),
            _ => Schedule::step(1e-6, 0.5, 9),
        };
        RunConfig {
            scheme,
            scenario,
            epochs: Self::DEFAULT_EPOCHS,
            batch_size: Self::DEFAULT_BATCH,
            seed: 0,
            imbalance: Imbalance::Wce,
            alpha: 0.6,
            flip_epoch: None,
            momentum: 0.9,
            schedule,
            localizer_schedule,
            arch: Arch::default(),
        }
        .with_alpha(0.6)
    }

    /// Sets `α` and the default flip: epoch 15 for interior values, none
    /// at the endpoints (where complementing would swap the branches).
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self.flip_epoch = (alpha > 0.0 && alpha < 1.0).then_some(Self::DEFAULT_FLIP_EPOCH);
        self
    }

    pub fn alpha_schedule(&self) -> Result<AlphaSchedule> {
        AlphaSchedule::new(self.alpha, self.flip_epoch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        self.schedule.validate()?;
        self.localizer_schedule.validate()?;
        self.alpha_schedule()?;
        Ok(())
    }

    pub fn model_config(&self, image_size: usize) -> ModelConfig {
        let a = &self.arch;
        ModelConfig {
            scheme: self.scheme,
            classes: self.scenario.classes(),
            in_channels: 1,
            image_size,
            roi_size: a.roi_size,
            stl_size: a.stl_size,
            backbone: a.backbone.clone(),
            transition_dim: a.transition_dim,
            stl_shared_layers: a.stl_shared_layers,
            stl_head: a.stl_head,
            pooling: a.pooling,
            init_seed: derive_seed(self.seed, STREAM_INIT, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Main,
    /// Box regressor of the supervised-localizer scheme.
    Localizer,
    /// ROI classifier of the supervised-localizer scheme.
    Classifier,
}

/// One row of the loss CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub split: Split,
    pub loss_class: Option<f64>,
    pub loss_uloc: Option<f64>,
    pub loss_total: f64,
    pub alpha_eff: Option<f64>,
    pub stage: Stage,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights at the selected epoch of every stage.
    pub model: Model,
    pub stages: Vec<StageResult>,
    pub history: Vec<LossRow>,
}

impl TrainOutcome {
    /// Selection of the last stage, which determines the reported checkpoint.
    pub fn best(&self) -> &StageResult {
        self.stages.last().expect("at least one stage")
    }

    pub fn csv(&self) -> Result<String> {
        loss_csv(&self.history)
    }
}

pub fn loss_csv(rows: &[LossRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Evaluation(format!("loss csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Evaluation(format!("loss csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, Copy, Default)]
struct LossSums {
    class: f64,
    uloc: f64,
    total: f64,
    n: usize,
}

impl LossSums {
    fn add(&mut self, class: f64, uloc: f64, total: f64, n: usize) {
        self.class += class * n as f64;
        self.uloc += uloc * n as f64;
        self.total += total * n as f64;
        self.n += n;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        (self.class / n, self.uloc / n, self.total / n)
    }
}

struct Batch {
    input: Tensor,
    targets: Vec<usize>,
    boxes: Vec<BBoxParams>,
}

/// Stage inputs and targets of a sample list, prepared once.
struct Prepared {
    inputs: Vec<Tensor>,
    targets: Vec<usize>,
    boxes: Vec<BBoxParams>,
}

impl Prepared {
    fn new(
        trainer: &Trainer,
        model: &Model,
        stage: Stage,
        samples: &[&LabeledSample],
    ) -> Result<Self> {
        let scenario = trainer.cfg.scenario;
        Ok(Prepared {
            inputs: samples
                .iter()
                .map(|s| trainer.input(model, stage, s))
                .collect::<Result<_>>()?,
            targets: samples
                .iter()
                .map(|s| {
                    scenario
                        .class_of(s.label6)
                        .expect("filtered to the scenario")
                })
                .collect(),
            boxes: samples.iter().map(|s| s.roi).collect(),
        })
    }

    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn batches(&self, order: &[usize], size: usize) -> Result<Vec<Batch>> {
        order
            .chunks(size)
            .map(|idx| {
                Ok(Batch {
                    input: Tensor::stack(
                        &idx.iter().map(|&i| &self.inputs[i]).collect::<Vec<_>>(),
                    )?,
                    targets: idx.iter().map(|&i| self.targets[i]).collect(),
                    boxes: idx.iter().map(|&i| self.boxes[i]).collect(),
                })
            })
            .collect()
    }
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    weights: Option<ClassWeights>,
    alpha: AlphaSchedule,
}

struct StepLoss {
    class: f64,
    uloc: f64,
    total: f64,
}

impl Trainer<'_> {
    /// Stage input of one sample: the ground-truth crop for the ROI
    /// classifier, the scheme's main input otherwise.
    fn input(&self, model: &Model, stage: Stage, sample: &LabeledSample) -> Result<Tensor> {
        match stage {
            Stage::Classifier => model.roi_crop(sample, &sample.roi),
            _ => model.prepare_sample(sample),
        }
    }

    /// Records the stage loss for a batch; returns the total loss handle and
    /// plain values of its parts.
    fn loss(
        &self,
        model: &Model,
        stage: Stage,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        epoch: usize,
    ) -> Result<(Var, StepLoss)> {
        let w = self.weights.as_ref();
        let x = tape.constant(&batch.input);
        match stage {
            Stage::Localizer => {
                let out = model.record(tape, vars, x)?;
                let l = sup_loc_loss(tape, out.warp.expect("box regressor"), &batch.boxes)?;
                let v = tape.scalar_value(l);
                Ok((
                    l,
                    StepLoss {
                        class: 0.0,
                        uloc: v,
                        total: v,
                    },
                ))
            }
            Stage::Classifier => {
                let logits = model.record_roi_classifier(tape, vars, x)?;
                let l = softmax_wce(tape, logits, &batch.targets, w)?;
                let v = tape.scalar_value(l);
                Ok((
                    l,
                    StepLoss {
                        class: v,
                        uloc: 0.0,
                        total: v,
                    },
                ))
            }
            Stage::Main => {
                let out = model.record(tape, vars, x)?;
                let lc = softmax_wce(tape, out.logits, &batch.targets, w)?;
                match out.loc_logits {
                    Some(loc) => {
                        let lu = softmax_wce(tape, loc, &batch.targets, w)?;
                        let total = stl_total_loss(tape, lc, lu, &self.alpha, epoch)?;
                        let parts = StepLoss {
                            class: tape.scalar_value(lc),
                            uloc: tape.scalar_value(lu),
                            total: tape.scalar_value(total),
                        };
                        Ok((total, parts))
                    }
                    None => {
                        let v = tape.scalar_value(lc);
                        Ok((
                            lc,
                            StepLoss {
                                class: v,
                                uloc: 0.0,
                                total: v,
                            },
                        ))
                    }
                }
            }
        }
    }

    fn groups(&self, stage: Stage) -> Vec<(ParamGroup, Schedule)> {
        let cls = self.cfg.schedule;
        let loc = self.cfg.localizer_schedule;
        match (stage, self.cfg.scheme) {
            (Stage::Localizer, _) => vec![(ParamGroup::Localizer, loc)],
            (Stage::Classifier, _) => vec![(ParamGroup::Classifier, cls)],
            (Stage::Main, s) if s.is_stn() => {
                vec![(ParamGroup::Classifier, cls), (ParamGroup::Localizer, loc)]
            }
            (Stage::Main, _) => vec![
                (ParamGroup::Shared, cls),
                (ParamGroup::Classifier, cls),
                (ParamGroup::LocBranch, cls),
            ],
        }
    }

    fn row(&self, stage: Stage, epoch: usize, split: Split, lr: f64, sums: &LossSums) -> LossRow {
        let (class, uloc, total) = sums.mean();
        let stl = self.cfg.scheme == Scheme::Stl;
        LossRow {
            stage,
            epoch,
            split,
            lr,
            loss_class: (stage != Stage::Localizer).then_some(class),
            loss_uloc: (stl || stage == Stage::Localizer).then_some(uloc),
            loss_total: total,
            alpha_eff: stl.then(|| self.alpha.alpha_at(epoch)),
        }
    }
}

/// Samples of `split` whose label belongs to the scenario.
pub fn scenario_samples(data: &Dataset, split: Split, scenario: Scenario) -> Vec<&LabeledSample> {
    data.samples
        .iter()
        .filter(|s| s.split == split && scenario.includes(s.label6))
        .collect()
}

fn check_finite(epoch: usize, stage: Stage, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            detail: format!("{what} loss is {v} in the {stage:?} stage"),
        })
    }
}

/// Trains `cfg` on the train split, selecting each stage's weights at its
/// minimum validation loss (ties keep the earliest epoch).
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    for split in [Split::Train, Split::Val, Split::Test] {
        if scenario_samples(data, split, cfg.scenario).is_empty() {
            return Err(Error::Config(format!(
                "dataset has no {split:?} samples for the {}-class scenario",
                cfg.scenario.classes()
            )));
        }
    }
    let balanced;
    let train_data = match cfg.imbalance {
        Imbalance::Augment => {
            balanced = balance_by_augmentation(data, cfg.scenario);
            &balanced
        }
        _ => data,
    };
    let train_set = scenario_samples(train_data, Split::Train, cfg.scenario);
    let val_set = scenario_samples(data, Split::Val, cfg.scenario);
    let weights = match cfg.imbalance {
        Imbalance::Wce => {
            let mut freqs = vec![0; cfg.scenario.classes()];
            for s in &train_set {
                freqs[cfg.scenario.class_of(s.label6).expect("filtered")] += 1;
            }
            Some(class_weights(&freqs)?)
        }
        _ => None,
    };
    let trainer = Trainer {
        cfg,
        weights,
        alpha: cfg.alpha_schedule()?,
    };
    let mut model = Model::new(cfg.model_config(data.image_size()))?;
    let stages = match cfg.scheme {
        Scheme::SupLoc => vec![Stage::Localizer, Stage::Classifier],
        _ => vec![Stage::Main],
    };

    let mut history = Vec::new();
    let mut results = Vec::new();
    for (si, &stage) in stages.iter().enumerate() {
        let groups = trainer.groups(stage);
        let train_in = Prepared::new(&trainer, &model, stage, &train_set)?;
        let val_in = Prepared::new(&trainer, &model, stage, &val_set)?;
        let val_batches = val_in.batches(&(0..val_in.len()).collect::<Vec<_>>(), EVAL_BATCH)?;
        let mut opt = OptimizerState::new(&model.store, cfg.momentum);
        let mut best: Option<(usize, f64, ParamStore)> = None;
        for epoch in 1..=cfg.epochs {
            for (g, s) in &groups {
                opt.set_lr(*g, s.lr_at(epoch));
            }
            let lr = groups[0].1.lr_at(epoch);
            let mut order: Vec<usize> = (0..train_in.len()).collect();
            order.shuffle(&mut rng_for(
                cfg.seed,
                STREAM_SHUFFLE,
                ((si as u64) << 32) | epoch as u64,
            ));
            let mut sums = LossSums::default();
            for batch in train_in.batches(&order, cfg.batch_size)? {
                let mut tape = Tape::new();
                let vars = model.store.bind(&mut tape);
                let (loss, parts) = trainer.loss(&model, stage, &mut tape, &vars, &batch, epoch)?;
                check_finite(epoch, stage, "training", parts.total)?;
                let grads = tape.backward(loss)?;
                model.store.zero_grad();
                model.store.accumulate(&grads, &vars)?;
                sgd_step(&mut model.store, &mut opt)?;
                sums.add(parts.class, parts.uloc, parts.total, batch.targets.len());
            }
            history.push(trainer.row(stage, epoch, Split::Train, lr, &sums));

            let mut vsums = LossSums::default();
            for batch in &val_batches {
                let mut tape = Tape::new();
                let vars = model.store.bind(&mut tape);
                let (_, parts) = trainer.loss(&model, stage, &mut tape, &vars, batch, epoch)?;
                vsums.add(parts.class, parts.uloc, parts.total, batch.targets.len());
            }
            let (_, _, val_total) = vsums.mean();
            check_finite(epoch, stage, "validation", val_total)?;
            history.push(trainer.row(stage, epoch, Split::Val, lr, &vsums));
            if best.as_ref().is_none_or(|(_, b, _)| val_total < *b) {
                best = Some((epoch, val_total, model.store.clone()));
            }
        }
        let (best_epoch, best_val_loss, store) = best.expect("at least one epoch");
        model.store = store;
        model.store.zero_grad();
        results.push(StageResult {
            stage,
            best_epoch,
            best_val_loss,
        });
    }
    Ok(TrainOutcome {
        model,
        stages: results,
        history,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Report name; defaults to the scheme name.
    pub name: Option<String>,
    /// Skip classification metrics.
    pub loc_only: bool,
}

/// Predictions of a model on a list of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub classes: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    /// Predicted box and degenerate flag per sample, for localizing schemes.
    pub boxes: Option<Vec<(BBoxParams, bool)>>,
    /// GT-class heatmap per sample (`S×S`, row-major) for score-map schemes.
    pub heatmaps: Option<Vec<Vec<f64>>>,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |b, (i, &v)| if v > b.1 { (i, v) } else { b },
        )
        .0
}

/// Runs `model` over `samples`. Heatmaps take the channel of each sample's
/// true class.
pub fn predict(
    model: &Model,
    samples: &[&LabeledSample],
    scenario: Scenario,
) -> Result<Predictions> {
    let cfg = &model.config;
    if cfg.classes != scenario.classes() {
        return Err(Error::Evaluation(format!(
            "{} checkpoint has {} classes, data scenario has {}",
            cfg.scheme,
            cfg.classes,
            scenario.classes()
        )));
    }
    let c = cfg.classes;
    let mut out = Predictions {
        classes: Vec::with_capacity(samples.len()),
        probs: Vec::with_capacity(samples.len()),
        boxes: cfg.scheme.localizes().then(Vec::new),
        heatmaps: matches!(cfg.scheme, Scheme::Stl | Scheme::GlobalPool).then(Vec::new),
    };
    for chunk in samples.chunks(EVAL_BATCH) {
        let truth: Vec<usize> = chunk
            .iter()
            .map(|s| {
                scenario.class_of(s.label6).ok_or_else(|| {
                    Error::Evaluation(format!("label {} outside the scenario", s.label6.name()))
                })
            })
            .collect::<Result<_>>()?;
        let input = model.prepare_input(chunk)?;
        let n = cfg.input_size();
        let (probs, boxes, maps) = match cfg.scheme {
            Scheme::Lbm => (model.forward_lbm(&input)?, None, None),
            Scheme::Ubm => (model.forward_ubm(&input)?, None, None),
            Scheme::SupLoc => {
                let b = model.forward_suploc(&input)?;
                let crops = model.roi_crops(chunk, &b)?;
                let p = model.forward_ubm(&crops)?;
                (
                    p,
                    Some(b.into_iter().map(|b| (b, false)).collect::<Vec<_>>()),
                    None,
                )
            }
            Scheme::AStn | Scheme::AffStn => {
                let (p, warps) = model.forward_ustn(&input)?;
                let b = warps
                    .iter()
                    .map(|w| warp_box(w).map_or((BBoxParams::FULL, true), |b| (b, false)))
                    .collect();
                (p, Some(b), None)
            }
            Scheme::Stl => {
                let f = model.forward_stl(&input)?;
                (f.probs, None, Some(f.score_maps))
            }
            Scheme::GlobalPool => {
                let (p, maps) = model.forward_globalpool(&input)?;
                (p, None, Some(maps))
            }
        };
        for row in probs.data().chunks_exact(c) {
            out.classes.push(argmax(row));
            out.probs.push(row.to_vec());
        }
        if let Some(b) = boxes {
            out.boxes.as_mut().expect("localizing scheme").extend(b);
        }
        if let Some(maps) = maps {
            for (m, &t) in maps.iter().zip(&truth) {
                let ch = m.channel(t);
                let hb = heatmap_to_bbox(&ch, m.size, m.size, n, n)?;
                out.boxes
                    .as_mut()
                    .expect("localizing scheme")
                    .push((hb.bbox, hb.degenerate));
                out.heatmaps.as_mut().expect("score-map scheme").push(ch);
            }
        }
    }
    Ok(out)
}

/// Metrics on one split: classification over every sample of the scenario,
/// localization over fractured samples only.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let scenario = Scenario::from_classes(model.config.classes)?;
    let samples = scenario_samples(data, split, scenario);
    if samples.is_empty() {
        return Err(Error::Evaluation(format!(
            "no {split:?} samples match the {}-class scenario",
            scenario.classes()
        )));
    }
    let pred = predict(model, &samples, scenario)?;
    let truth: Vec<usize> = samples
        .iter()
        .map(|s| scenario.class_of(s.label6).expect("filtered"))
        .collect();
    let classification = if opts.loc_only {
        None
    } else {
        Some(f1_report(&truth, &pred.classes, scenario.classes())?)
    };
    let localization = match &pred.boxes {
        Some(boxes) => {
            let (mut ious, mut degenerate) = (Vec::new(), 0);
            for (s, (b, d)) in samples.iter().zip(boxes) {
                if s.label6.is_fracture() {
                    ious.push(iou(&s.roi, b));
                    degenerate += usize::from(*d);
                }
            }
            if ious.is_empty() {
                None
            } else {
                Some(localization_report(ious, degenerate)?)
            }
        }
        None => None,
    };
    Ok(MetricsReport {
        name: opts
            .name
            .clone()
            .unwrap_or_else(|| model.config.scheme.name().to_string()),
        class_names: scenario.class_names(),
        samples: samples.len(),
        classification,
        localization,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub dataset_hash: String,
    pub stages: Vec<StageResult>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test_metrics: MetricsReport,
}

/// Paths written by [`train_to_dir`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub losses: PathBuf,
    pub summary: PathBuf,
}

/// Trains and writes the selected checkpoint, the loss CSV and a run
/// summary with test metrics under `dir`.
pub fn train_to_dir(
    cfg: &RunConfig,
    data: &Dataset,
    dir: impl AsRef<Path>,
) -> Result<(TrainOutcome, RunSummary, RunArtifacts)> {
    let dir = dir.as_ref();
    let outcome = train(cfg, data)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let best = outcome.best().clone();
    let artifacts = RunArtifacts {
        checkpoint: dir.join(CHECKPOINT_DIR),
        losses: dir.join(LOSS_CSV),
        summary: dir.join(SUMMARY_FILE),
    };
    outcome
        .model
        .save_checkpoint(&artifacts.checkpoint, best.best_epoch, best.best_val_loss)?;
    fs::write(&artifacts.losses, outcome.csv()?).map_err(|e| Error::io(&artifacts.losses, e))?;
    let test_metrics = evaluate(&outcome.model, data, Split::Test, &EvalOptions::default())?;
    let summary = RunSummary {
        config: cfg.clone(),
        dataset_hash: data.config.hash(),
        stages: outcome.stages.clone(),
        best_epoch: best.best_epoch,
        best_val_loss: best.best_val_loss,
        test_metrics,
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(&artifacts.summary, json).map_err(|e| Error::io(&artifacts.summary, e))?;
    Ok((outcome, summary, artifacts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig, Profile};
    use proptest::prelude::*;

    fn tiny_data(scenario: Scenario, seed: u64) -> Dataset {
        generate(&GenConfig {
            total: 120,
            profile: Profile::Uniform,
            scenario,
            image_size: 32,
            radius_min: 4.0,
            radius_max: 6.0,
            distractors: 2,
            seed,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn tiny_run(scheme: Scheme, scenario: Scenario) -> RunConfig {
        let mut cfg = RunConfig::new(scheme, scenario);
        cfg.epochs = 2;
        cfg.batch_size = 16;
        cfg.arch.backbone = vec![ConvSpec::new(4, 3, 2), ConvSpec::new(8, 3, 2)];
        cfg.arch.roi_size = 16;
        cfg.arch.stl_size = 40;
        cfg.arch.stl_shared_layers = 1;
        cfg.arch.transition_dim = 8;
        cfg
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_velocity() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.5, 1.0];
        sgd_update(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(v, vec![0.45, 0.9]);
        let mut p2 = vec![1.0, -2.0];
        let mut v2 = vec![0.0, 0.0];
        sgd_update(&mut p2, &[0.0, 0.0], &mut v2, 0.1, 0.9).unwrap();
        assert_eq!(p2, vec![1.0, -2.0]);
        p[0] = 0.0;
        assert!(sgd_update(&mut p, &[0.0], &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn no_momentum_is_plain_descent() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_update(&mut p, &[2.0], &mut v, 0.25, 0.0).unwrap();
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn two_momentum_steps() {
        let (lr, g) = (0.1, 0.5);
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        for _ in 0..2 {
            sgd_update(&mut p, &[g], &mut v, lr, 0.9).unwrap();
        }
        // v1 = g, v2 = 0.9 g + g
        assert!((-p[0] - lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let model = Model::new(ModelConfig::new(Scheme::AStn, 2)).unwrap();
        let mut store = model.store.clone();
        for p in &mut store.params {
            let ones = vec![1.0; p.tensor.numel()];
            p.tensor.accumulate_grad(&ones).unwrap();
        }
        let mut opt = OptimizerState::new(&store, 0.9);
        opt.set_lr(ParamGroup::Classifier, 0.1);
        sgd_step(&mut store, &mut opt).unwrap();
        for (a, b) in store.params.iter().zip(&model.store.params) {
            assert_eq!(
                a.tensor.data() == b.tensor.data(),
                a.group == ParamGroup::Localizer,
                "{}",
                a.name
            );
        }
    }

    #[test]
    fn schedule_decay() {
        let s = Schedule::step(1e-2, 0.5, 4);
        assert_eq!(s.lr_at(1), 1e-2);
        assert_eq!(s.lr_at(4), 1e-2);
        assert_eq!(s.lr_at(5), 5e-3);
        for k in 0..6 {
            assert_eq!(s.lr_after(4 * k), 1e-2 * 0.5f64.powi(k as i32));
        }
        assert_eq!(Schedule::constant(3e-3).lr_at(100), 3e-3);
        assert!(Schedule::step(1e-2, 0.0, 4).validate().is_err());
        assert!(Schedule::step(1e-2, 0.5, 0).validate().is_err());
    }

    proptest! {
        #[test]
        fn schedule_positive_and_non_increasing(lr0 in 1e-6f64..1.0, factor in 0.05f64..=1.0, period in 1usize..20, e in 1usize..200) {
            let s = Schedule::step(lr0, factor, period);
            prop_assert!(s.lr_at(e) > 0.0);
            prop_assert!(s.lr_at(e + 1) <= s.lr_at(e));
        }
    }

    #[test]
    fn endpoint_alphas_do_not_flip() {
        let scn = Scenario::Three;
        assert_eq!(
            RunConfig::new(Scheme::Stl, scn).with_alpha(0.0).flip_epoch,
            None
        );
        assert_eq!(
            RunConfig::new(Scheme::Stl, scn).with_alpha(1.0).flip_epoch,
            None
        );
        assert_eq!(
            RunConfig::new(Scheme::Stl, scn).with_alpha(0.6).flip_epoch,
            Some(15)
        );
    }

    #[test]
    fn zero_learning_rate_keeps_initial_weights() {
        let data = tiny_data(Scenario::Two, 1);
        let mut cfg = tiny_run(Scheme::Lbm, Scenario::Two);
        cfg.epochs = 1;
        cfg.schedule = Schedule::constant(0.0);
        let out = train(&cfg, &data).unwrap();
        let init = Model::new(cfg.model_config(32)).unwrap();
        for (a, b) in out.model.store.params.iter().zip(&init.store.params) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data = tiny_data(Scenario::Three, 2);
        let cfg = tiny_run(Scheme::Stl, Scenario::Three);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.csv().unwrap(), b.csv().unwrap());
        let ra = evaluate(&a.model, &data, Split::Test, &EvalOptions::default()).unwrap();
        let rb = evaluate(&b.model, &data, Split::Test, &EvalOptions::default()).unwrap();
        assert_eq!(ra.to_json().unwrap(), rb.to_json().unwrap());
    }

    #[test]
    fn selected_epoch_has_minimum_validation_loss() {
        let data = tiny_data(Scenario::Two, 3);
        let mut cfg = tiny_run(Scheme::Lbm, Scenario::Two);
        cfg.epochs = 4;
        let out = train(&cfg, &data).unwrap();
        let val: Vec<(usize, f64)> = out
            .history
            .iter()
            .filter(|r| r.split == Split::Val)
            .map(|r| (r.epoch, r.loss_total))
            .collect();
        let best = out.best();
        let min = val.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        assert_eq!(best.best_val_loss, min);
        let first = val.iter().find(|v| v.1 == min).unwrap().0;
        assert_eq!(best.best_epoch, first);
    }

    #[test]
    fn csv_has_header_and_row_per_split_epoch() {
        let data = tiny_data(Scenario::Two, 4);
        let mut cfg = tiny_run(Scheme::Stl, Scenario::Two).with_alpha(0.6);
        cfg.flip_epoch = Some(2);
        let csv = train(&cfg, &data).unwrap().csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("epoch,split,loss_class,loss_uloc,loss_total,alpha_eff"));
        assert_eq!(lines.len(), 1 + 2 * 2);
        assert!(lines[1].contains(",0.6,"));
        assert!(lines[3].contains(",0.4,"));
    }

    fn branch_grads(alpha: f64) -> BTreeMap<ParamGroup, f64> {
        let data = tiny_data(Scenario::Three, 5);
        let cfg = tiny_run(Scheme::Stl, Scenario::Three).with_alpha(alpha);
        let model = Model::new(cfg.model_config(32)).unwrap();
        let samples = scenario_samples(&data, Split::Train, Scenario::Three);
        let trainer = Trainer {
            cfg: &cfg,
            weights: None,
            alpha: cfg.alpha_schedule().unwrap(),
        };
        let prep = Prepared::new(&trainer, &model, Stage::Main, &samples[..8]).unwrap();
        let batch = prep
            .batches(&(0..8).collect::<Vec<_>>(), 8)
            .unwrap()
            .remove(0);
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape);
        let (loss, _) = trainer
            .loss(&model, Stage::Main, &mut tape, &vars, &batch, 1)
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut norms = BTreeMap::new();
        for (p, v) in model.store.params.iter().zip(&vars) {
            let g = grads
                .get(*v)
                .map_or(0.0, |g| g.iter().map(|x| x.abs()).sum());
            *norms.entry(p.group).or_insert(0.0) += g;
        }
        norms
    }

    #[test]
    fn two_branch_gradient_routing() {
        let class_only = branch_grads(0.0);
        assert_eq!(class_only[&ParamGroup::LocBranch], 0.0);
        assert!(class_only[&ParamGroup::Classifier] > 0.0);
        assert!(class_only[&ParamGroup::Shared] > 0.0);
        let loc_only = branch_grads(1.0);
        assert_eq!(loc_only[&ParamGroup::Classifier], 0.0);
        assert!(loc_only[&ParamGroup::LocBranch] > 0.0);
        assert!(loc_only[&ParamGroup::Shared] > 0.0);
        let both = branch_grads(0.6);
        assert!(both.values().all(|&g| g > 0.0));
    }

    #[test]
    fn missing_split_is_rejected() {
        let mut data = tiny_data(Scenario::Two, 6);
        data.samples.retain(|s| s.split != Split::Val);
        let cfg = tiny_run(Scheme::Lbm, Scenario::Two);
        assert!(matches!(train(&cfg, &data), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut data = tiny_data(Scenario::Two, 7);
        let i = data
            .samples
            .iter()
            .position(|s| s.split == Split::Train)
            .unwrap();
        data.samples[i].image.data_mut()[0] = f64::NAN;
        let cfg = tiny_run(Scheme::Lbm, Scenario::Two);
        let r = train(&cfg, &data);
        assert!(
            matches!(r, Err(Error::NonFiniteLoss { epoch: 1, .. })),
            "{:?}",
            r.err()
        );
    }

    #[test]
    fn evaluation_contracts() {
        let data = tiny_data(Scenario::Two, 8);
        let ubm = Model::new(tiny_run(Scheme::Ubm, Scenario::Two).model_config(32)).unwrap();
        let test = scenario_samples(&data, Split::Test, Scenario::Two);
        assert!(predict(&ubm, &test, Scenario::Two).unwrap().boxes.is_none());
        let r = evaluate(&ubm, &data, Split::Test, &EvalOptions::default()).unwrap();
        assert!(r.localization.is_none());
        assert_eq!(r.samples, test.len());

        let stn = Model::new(tiny_run(Scheme::AStn, Scenario::Two).model_config(32)).unwrap();
        let r = evaluate(
            &stn,
            &data,
            Split::Test,
            &EvalOptions {
                name: None,
                loc_only: true,
            },
        )
        .unwrap();
        assert!(r.classification.is_none());
        let loc = r.localization.unwrap();
        let fractured = test.iter().filter(|s| s.label6.is_fracture()).count();
        assert_eq!(loc.ious.len(), fractured);
        let brute: f64 = crate::eval::IOU_THRESHOLDS
            .iter()
            .map(|&t| loc.ious.iter().filter(|&&v| v > t).count() as f64 / loc.ious.len() as f64)
            .sum::<f64>()
            / 5.0;
        assert!((loc.map - brute).abs() < 1e-12);

        let six = Model::new(tiny_run(Scheme::Lbm, Scenario::Six).model_config(32)).unwrap();
        assert!(matches!(
            predict(&six, &test, Scenario::Two),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn supervised_localizer_trains_both_stages() {
        let data = tiny_data(Scenario::Two, 9);
        let cfg = tiny_run(Scheme::SupLoc, Scenario::Two);
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.stages.len(), 2);
        assert!(out.history.iter().any(|r| r.stage == Stage::Localizer));
        let r = evaluate(&out.model, &data, Split::Test, &EvalOptions::default()).unwrap();
        assert!(r.classification.is_some() && r.localization.is_some());
    }

    #[test]
    fn run_directory_round_trip() {
        let data = tiny_data(Scenario::Two, 10);
        let cfg = tiny_run(Scheme::GlobalPool, Scenario::Two);
        let dir = tempfile::tempdir().unwrap();
        let (_, summary, art) = train_to_dir(&cfg, &data, dir.path()).unwrap();
        let (model, meta) = Model::load_checkpoint(&art.checkpoint).unwrap();
        assert_eq!(meta.epoch, summary.best_epoch);
        let again = evaluate(&model, &data, Split::Test, &EvalOptions::default()).unwrap();
        assert_eq!(again, summary.test_metrics);
        assert!(fs::read_to_string(&art.losses)
            .unwrap()
            .starts_with("epoch,"));
    }
}
