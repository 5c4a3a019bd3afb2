//! Epoch loop with per-epoch validation and best-epoch selection, bag-set
//! evaluation, and few-shot adaptation of the heads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{balanced_sample, BagRecord, DataError, Label};
use crate::metrics::{accuracy, auc, c_index, MetricError};
use crate::model::{Model, ModelError, Task};
use crate::optim::{cosine_lr, Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("frozen parameter {0} changed during adaptation")]
    FrozenChanged(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-4,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Averages over one epoch, plus the validation metric after it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub task_loss: f64,
    pub reg_loss: f64,
    pub val_metric: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,task_loss,reg_loss,val_metric,lr";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.task_loss, r.reg_loss, r.val_metric, r.lr
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `auc` or `c_index`.
    pub metric_name: &'static str,
    pub metric: f64,
    pub accuracy: Option<f64>,
    pub mean_loss: f64,
    pub bags: usize,
}

/// Per-bag inference scores: class-1 probability or cumulative hazard.
pub fn scores(model: &Model, bags: &[BagRecord]) -> Result<Vec<f64>, ModelError> {
    bags.iter().map(|b| Ok(model.predict(&b.features)?.score)).collect()
}

/// Inference-mode metrics over a bag set. Classification reports ROC AUC
/// (one-vs-rest macro average beyond two classes); survival reports the
/// c-index of the cumulative hazard against the time bins.
pub fn evaluate(model: &Model, bags: &[BagRecord]) -> Result<Evaluation, TrainError> {
    if bags.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut preds = Vec::with_capacity(bags.len());
    let mut loss = 0.0;
    for b in bags {
        let out = model.forward(&b.features, false, Some(&b.label))?;
        loss += out.task_loss.unwrap_or(0.0);
        preds.push(crate::model::Prediction::from_logits(
            model.config.task,
            out.logits.data(),
        ));
    }
    let mean_loss = loss / bags.len() as f64;
    match model.config.task {
        Task::Classification { classes } => {
            let labels: Vec<usize> = bags
                .iter()
                .map(|b| match b.label {
                    Label::Class(c) => c,
                    Label::Survival(_) => unreachable!("labels checked by forward"),
                })
                .collect();
            let metric = if classes == 2 {
                let s: Vec<f64> = preds.iter().map(|p| p.score).collect();
                auc(&s, &labels.iter().map(|&l| l == 1).collect::<Vec<_>>())?
            } else {
                let mut total = 0.0;
                let mut used = 0;
                for k in 0..classes {
                    let s: Vec<f64> = preds.iter().map(|p| p.probabilities[k]).collect();
                    match auc(&s, &labels.iter().map(|&l| l == k).collect::<Vec<_>>()) {
                        Ok(a) => {
                            total += a;
                            used += 1;
                        }
                        Err(MetricError::SingleClass) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
                if used == 0 {
                    return Err(MetricError::SingleClass.into());
                }
                total / used as f64
            };
            let predicted: Vec<usize> = preds.iter().map(|p| p.class).collect();
            Ok(Evaluation {
                metric_name: "auc",
                metric,
                accuracy: Some(accuracy(&predicted, &labels)?),
                mean_loss,
                bags: bags.len(),
            })
        }
        Task::Survival { .. } => {
            let (times, censored): (Vec<f64>, Vec<bool>) = bags
                .iter()
                .map(|b| match b.label {
                    Label::Survival(s) => (s.time_bin as f64, s.censored),
                    Label::Class(_) => unreachable!("labels checked by forward"),
                })
                .unzip();
            let risks: Vec<f64> = preds.iter().map(|p| p.score).collect();
            Ok(Evaluation {
                metric_name: "c_index",
                metric: c_index(&risks, &times, &censored)?,
                accuracy: None,
                mean_loss,
                bags: bags.len(),
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Model and optimizer state after the best validation epoch; the
    /// initial state when no epoch ran.
    pub model: Model,
    pub optimizer: Adam,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Runs `epochs` seeded shuffled passes of batch-size-1 steps under a
/// cosine schedule over the whole run. Calls `after_epoch` with each record.
fn run_epochs(
    model: &mut Model,
    opt: &mut Adam,
    train: &[BagRecord],
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(&Model, &Adam, usize, (f64, f64, f64), f64) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    let total = (cfg.epochs * train.len()) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let first_lr = cosine_lr(step, total, cfg.lr).map_err(ModelError::from)?;
        let (mut tot, mut task, mut reg) = (0.0, 0.0, 0.0);
        for &i in &order {
            let lr = cosine_lr(step, total, cfg.lr).map_err(ModelError::from)?;
            let l = model.train_step(&train[i], opt, lr)?;
            tot += l.total;
            task += l.task;
            reg += l.reg;
            step += 1;
        }
        let n = train.len() as f64;
        after_epoch(model, opt, epoch, (tot / n, task / n, reg / n), first_lr)?;
    }
    Ok(())
}

/// Trains with per-epoch validation and keeps the best epoch; ties go to
/// the earlier epoch.
pub fn fit(model: Model, train: &[BagRecord], val: &[BagRecord], cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut opt = Adam::new(&model.store, cfg.adam());
    let mut best = FitResult {
        model: model.clone(),
        optimizer: opt.clone(),
        best_epoch: None,
        best_val: None,
        history: Vec::new(),
    };
    let mut model = model;
    let mut history = Vec::with_capacity(cfg.epochs);
    run_epochs(&mut model, &mut opt, train, cfg, |m, o, epoch, (tot, task, reg), lr| {
        let val_metric = evaluate(m, val)?.metric;
        history.push(EpochRecord {
            epoch,
            train_loss: tot,
            task_loss: task,
            reg_loss: reg,
            val_metric,
            lr,
        });
        if best.best_val.is_none_or(|b| val_metric > b) {
            best.model = m.clone();
            best.optimizer = o.clone();
            best.best_epoch = Some(epoch);
            best.best_val = Some(val_metric);
        }
        Ok(())
    })?;
    best.history = history;
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationPlan {
    pub shots: usize,
    /// Also adapt the prompt tokens (and their EMA).
    pub train_prompts: bool,
    /// Class count of the target task; the head is re-initialized when it
    /// differs from the source.
    pub classes: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AdaptationPlan {
    fn default() -> Self {
        Self {
            shots: 20,
            train_prompts: false,
            classes: None,
            epochs: 20,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub model: Model,
    pub optimizer: Adam,
    pub selected: Vec<String>,
    pub trainable: Vec<String>,
    /// Number of arrays verified bitwise unchanged.
    pub frozen_verified: usize,
    pub history: Vec<EpochRecord>,
}

/// Fine-tunes only the task head, the merge score head and optionally the
/// prompts on `plan.shots` class-balanced bags drawn from `pool`. Every
/// other array is checked bitwise unchanged afterwards.
pub fn few_shot_adapt(
    model: &Model,
    optimizer: &Adam,
    pool: &[BagRecord],
    plan: &AdaptationPlan,
) -> Result<Adapted, TrainError> {
    let selected = balanced_sample(pool, plan.shots, plan.seed)?;
    let ids: Vec<String> = selected.iter().map(|b| b.id.clone()).collect();
    let mut m = model.clone();
    if let Some(k) = plan.classes {
        if m.config.task != (Task::Classification { classes: k }) {
            m.reset_head(Task::Classification { classes: k }, plan.seed)?;
        }
    }
    m.store.set_all_frozen(true);
    let mut trainable = m.head_ids();
    if plan.train_prompts {
        trainable.extend(m.prompts_id());
    }
    for &id in &trainable {
        m.store.get_mut(id).frozen = false;
    }
    let trainable_names: Vec<String> = trainable.iter().map(|&id| m.store.get(id).name.clone()).collect();
    if plan.epochs == 0 || selected.is_empty() {
        return Ok(Adapted {
            model: model.clone(),
            optimizer: optimizer.clone(),
            selected: ids,
            trainable: trainable_names,
            frozen_verified: model.store.len() - trainable.len(),
            history: Vec::new(),
        });
    }
    let snapshot = m.clone();
    let cfg = TrainConfig {
        epochs: plan.epochs,
        lr: plan.lr,
        weight_decay: 0.0,
        seed: plan.seed,
    };
    let mut opt = Adam::new(&m.store, cfg.adam());
    let mut history = Vec::new();
    run_epochs(
        &mut m,
        &mut opt,
        &selected,
        &cfg,
        |_, _, epoch, (tot, task, reg), lr| {
            history.push(EpochRecord {
                epoch,
                train_loss: tot,
                task_loss: task,
                reg_loss: reg,
                val_metric: f64::NAN,
                lr,
            });
            Ok(())
        },
    )?;
    if !plan.train_prompts {
        m.ema = snapshot.ema.clone();
    }
    let mut verified = 0;
    for ((_, after), (_, before)) in m.store.iter().zip(snapshot.store.iter()) {
        if before.frozen {
            let same = after.value.shape() == before.value.shape()
                && after
                    .value
                    .data()
                    .iter()
                    .zip(before.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(TrainError::FrozenChanged(after.name.clone()));
            }
            verified += 1;
        }
    }
    m.store.set_all_frozen(false);
    Ok(Adapted {
        model: m,
        optimizer: opt,
        selected: ids,
        trainable: trainable_names,
        frozen_verified: verified,
        history,
    })
}
