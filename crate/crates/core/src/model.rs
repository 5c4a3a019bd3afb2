//! The full aggregator: embedding, global layer over [cls, prompts, patches],
//! prompt assignment and partition, cluster-wise refinement, merging,
//! pooling and the task head.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{BagRecord, Label, TaskKind};
use crate::heads::{cross_entropy, pool_and_predict, survival_nll, with_regularizer, HazardVector, PoolingMode};
use crate::nn::{xavier_uniform_init, Bound, EncoderLayer, Linear, ParamId, ParamStore};
use crate::optim::{Adam, OptimError};
use crate::prompt::{
    assign, init_prompts, partition, reg_loss, AssignmentMatrix, ClusterPartition, PromptEma, PromptError,
};
use crate::prototype::{build_prototypes, ScoreHead};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification { classes: usize },
    Survival { bins: usize },
}

impl Task {
    pub fn out_dim(self) -> usize {
        match self {
            Task::Classification { classes } => classes,
            Task::Survival { bins } => bins,
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            Task::Classification { .. } => TaskKind::Classification,
            Task::Survival { .. } => TaskKind::Survival,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub dim: usize,
    pub clusters: usize,
    pub heads: usize,
    pub pooling: PoolingMode,
    pub clustering: bool,
    pub merging: bool,
    pub task: Task,
    pub alpha: f64,
    pub theta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            dim: 32,
            clusters: 5,
            heads: 4,
            pooling: PoolingMode::ProCls,
            clustering: true,
            merging: true,
            task: Task::Classification { classes: 2 },
            alpha: 0.1,
            theta: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |key: &'static str, reason: String| Err(ModelError::Config { key, reason });
        if self.d_in == 0 {
            return bad("d_in", "must be at least 1".into());
        }
        if self.dim == 0 {
            return bad("dim", "must be at least 1".into());
        }
        if self.clusters == 0 || self.clusters > self.dim {
            return bad("clusters", format!("need 1 <= clusters <= dim ({})", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("heads", format!("{} does not divide dim {}", self.heads, self.dim));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("{} must be non-negative", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad("theta", format!("{} not in [0, 1]", self.theta));
        }
        match self.task {
            Task::Classification { classes } if classes < 2 => bad("classes", "need at least 2 classes".into()),
            Task::Survival { bins } if bins < 2 => bad("bins", "need at least 2 bins".into()),
            _ => Ok(()),
        }
    }

    /// Label naming the ablation, e.g. `w/o clustering`.
    pub fn variant(&self) -> String {
        if !self.clustering {
            "w/o clustering".into()
        } else if !self.merging {
            format!("w/o merging, pooling {}", self.pooling)
        } else {
            format!("full, pooling {}", self.pooling)
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid value for `{key}`: {reason}")]
    Config { key: &'static str, reason: String },
    #[error("bag has no instances")]
    EmptyBag,
    #[error("bag has feature width {got}, model expects {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("label {label:?} does not fit a {task:?} model")]
    LabelMismatch { label: Label, task: Task },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("parameter mismatch: {0}")]
    Params(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Detached results of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub assignment: Option<AssignmentMatrix>,
    pub partition: Option<ClusterPartition>,
    pub prototypes: Option<Tensor>,
    pub cls: Tensor,
    pub task_loss: Option<f64>,
    pub reg: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub task: f64,
    pub reg: f64,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub logits: Var,
    pub cls: Var,
    pub assignment: Option<Var>,
    pub partition: Option<ClusterPartition>,
    pub prototypes: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct LossTape {
    pub total: Var,
    pub task: Var,
    pub reg: Option<Var>,
    pub tape: Tape,
}

#[derive(Debug, Clone)]
struct Clustering {
    prompts: ParamId,
    local: EncoderLayer,
    score: Option<ScoreHead>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// EMA of the prompts; present iff clustering is on.
    pub ema: Option<PromptEma>,
    embed: Linear,
    cls: ParamId,
    global: EncoderLayer,
    clustering: Option<Clustering>,
    head: Linear,
}

impl Model {
    /// Registry layout and initial values are a pure function of
    /// `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let embed = Linear::new(&mut store, "embed", config.d_in, d, true, &mut rng);
        let cls = store.register("cls", xavier_uniform_init(1, d, &mut rng));
        let bank = if config.clustering {
            Some(init_prompts(config.clusters, d, config.theta, &mut rng)?)
        } else {
            None
        };
        let prompts = bank.as_ref().map(|b| store.register("prompts", b.prompts.clone()));
        let global = EncoderLayer::new(&mut store, "global", d, config.heads, &mut rng);
        let clustering = match prompts {
            Some(prompts) => {
                let local = EncoderLayer::new(&mut store, "local", d, config.heads, &mut rng);
                let score = config.merging.then(|| ScoreHead::new(&mut store, "score", d, &mut rng));
                Some(Clustering { prompts, local, score })
            }
            None => None,
        };
        let head = Linear::new(&mut store, "head", d, config.task.out_dim(), true, &mut rng);
        Ok(Self {
            config,
            store,
            ema: bank.map(|b| b.ema),
            embed,
            cls,
            global,
            clustering,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn prompts_id(&self) -> Option<ParamId> {
        self.clustering.as_ref().map(|c| c.prompts)
    }

    /// Ids of the task head and the merge score head.
    pub fn head_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.head.weight];
        ids.extend(self.head.bias);
        if let Some(s) = self.clustering.as_ref().and_then(|c| c.score.as_ref()) {
            ids.push(s.linear.weight);
            ids.extend(s.linear.bias);
        }
        ids
    }

    /// Replaces the task head with a freshly initialized one for `task`.
    pub fn reset_head(&mut self, task: Task, seed: u64) -> Result<(), ModelError> {
        let config = ModelConfig {
            task,
            ..self.config.clone()
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = task.out_dim();
        self.store.get_mut(self.head.weight).value = xavier_uniform_init(k, self.config.dim, &mut rng);
        if let Some(b) = self.head.bias {
            self.store.get_mut(b).value = Tensor::zeros(1, k);
        }
        self.head.out_dim = k;
        self.config = config;
        Ok(())
    }

    fn check_features(&self, features: &Tensor) -> Result<(), ModelError> {
        if features.shape().len() != 2 || features.rows() == 0 {
            return Err(ModelError::EmptyBag);
        }
        if features.cols() != self.config.d_in {
            return Err(ModelError::FeatureWidth {
                expected: self.config.d_in,
                got: features.cols(),
            });
        }
        Ok(())
    }

    pub fn check_label(&self, label: &Label) -> Result<(), ModelError> {
        let ok = match (self.config.task, label) {
            (Task::Classification { classes }, Label::Class(c)) => *c < classes,
            (Task::Survival { bins }, Label::Survival(s)) => s.time_bin < bins,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::LabelMismatch {
                label: *label,
                task: self.config.task,
            })
        }
    }

    /// Forward pass on the tape. `prompts` are the C×D prompt tokens placed
    /// in the sequence; required iff clustering is on.
    pub fn forward_tape(
        &self,
        g: &mut Graph,
        p: &Bound,
        features: Var,
        prompts: Option<Var>,
    ) -> Result<Tape, ModelError> {
        let x = self.embed.forward(g, p, features)?;
        let cls0 = p.var(self.cls);
        let (Some(cl), Some(prompts)) = (&self.clustering, prompts) else {
            let tokens = g.concat_rows(&[cls0, x])?;
            let y = self.global.forward(g, p, tokens)?;
            let cls = g.gather_rows(y, &[0])?;
            let logits = pool_and_predict(g, p, cls, None, PoolingMode::Cls, &self.head)?;
            return Ok(Tape {
                logits,
                cls,
                assignment: None,
                partition: None,
                prototypes: None,
            });
        };
        let c = self.config.clusters;
        let n = g.value(x).rows();
        let tokens = g.concat_rows(&[cls0, prompts, x])?;
        let y = self.global.forward(g, p, tokens)?;
        let cls = g.gather_rows(y, &[0])?;
        let p1 = g.gather_rows(y, &(1..=c).collect::<Vec<_>>())?;
        let e1 = g.gather_rows(y, &(c + 1..c + 1 + n).collect::<Vec<_>>())?;
        let a = assign(g, e1, p1)?;
        let part = partition(&AssignmentMatrix(g.value(a).clone()));
        let stage = build_prototypes(g, p, &cl.local, cl.score.as_ref(), p1, e1, &part)?;
        let logits = pool_and_predict(g, p, cls, Some(stage.prototypes), self.config.pooling, &self.head)?;
        Ok(Tape {
            logits,
            cls,
            assignment: Some(a),
            partition: Some(part),
            prototypes: Some(stage.prototypes),
        })
    }

    /// Training-mode loss: task loss plus `alpha · reg(P̄)`, where P̄ is the
    /// EMA after blending in the current prompts. `ema` is updated in place.
    pub fn loss_tape(
        &self,
        g: &mut Graph,
        p: &Bound,
        ema: Option<&mut PromptEma>,
        features: Var,
        label: &Label,
    ) -> Result<LossTape, ModelError> {
        self.check_label(label)?;
        let prompts = self.prompts_id().map(|id| p.var(id));
        let tape = self.forward_tape(g, p, features, prompts)?;
        let task = match label {
            Label::Class(c) => cross_entropy(g, tape.logits, *c)?,
            Label::Survival(s) => survival_nll(g, tape.logits, *s)?,
        };
        let reg = match (prompts, ema) {
            (Some(pv), Some(ema)) => {
                let p_bar = ema.update(g, pv)?;
                Some(reg_loss(g, p_bar)?)
            }
            (Some(_), None) => return Err(ModelError::Params("clustering model without prompt EMA".into())),
            _ => None,
        };
        let total = with_regularizer(g, task, reg, self.config.alpha)?;
        Ok(LossTape { total, task, reg, tape })
    }

    /// Detached forward pass. Training mode assigns with the current prompts
    /// and reports the loss the next step would see; inference mode runs the
    /// EMA prompts through the global layer.
    pub fn forward(
        &self,
        features: &Tensor,
        training: bool,
        label: Option<&Label>,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_features(features)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(features.clone());
        let (tape, task_loss, reg) = match (training, label) {
            (true, Some(label)) => {
                let mut ema = self.ema.clone();
                let lt = self.loss_tape(&mut g, &p, ema.as_mut(), x, label)?;
                let task = g.value(lt.task).data()[0];
                let reg = lt.reg.map(|r| g.value(r).data()[0]);
                (lt.tape, Some(task), reg)
            }
            (true, None) => {
                let prompts = self.prompts_id().map(|id| p.var(id));
                (self.forward_tape(&mut g, &p, x, prompts)?, None, None)
            }
            (false, _) => {
                let prompts = self.ema.as_ref().map(|e| g.constant(e.p_bar.clone()));
                let tape = self.forward_tape(&mut g, &p, x, prompts)?;
                let task = match label {
                    Some(l) => {
                        self.check_label(l)?;
                        let t = match l {
                            Label::Class(c) => cross_entropy(&mut g, tape.logits, *c)?,
                            Label::Survival(s) => survival_nll(&mut g, tape.logits, *s)?,
                        };
                        Some(g.value(t).data()[0])
                    }
                    None => None,
                };
                (tape, task, None)
            }
        };
        Ok(ForwardOutput {
            logits: g.value(tape.logits).clone(),
            assignment: tape.assignment.map(|a| AssignmentMatrix(g.value(a).clone())),
            partition: tape.partition,
            prototypes: tape.prototypes.map(|h| g.value(h).clone()),
            cls: g.value(tape.cls).clone(),
            task_loss,
            reg,
        })
    }

    /// Inference-mode prediction.
    pub fn predict(&self, features: &Tensor) -> Result<Prediction, ModelError> {
        let out = self.forward(features, false, None)?;
        Ok(Prediction::from_logits(self.config.task, out.logits.data()))
    }

    /// One batch-size-1 optimization step. The EMA is committed only when
    /// the optimizer step succeeds.
    pub fn train_step(&mut self, bag: &BagRecord, opt: &mut Adam, lr: f64) -> Result<StepLoss, ModelError> {
        self.check_features(&bag.features)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(bag.features.clone());
        let mut ema = self.ema.clone();
        let lt = self.loss_tape(&mut g, &p, ema.as_mut(), x, &bag.label)?;
        let loss = StepLoss {
            total: g.value(lt.total).data()[0],
            task: g.value(lt.task).data()[0],
            reg: lt.reg.map_or(0.0, |r| g.value(r).data()[0]),
        };
        if !loss.total.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        let mut grads = g.backward(lt.total)?;
        let grads: Vec<Tensor> = p.vars().iter().map(|&v| grads.take(v)).collect();
        opt.step(&mut self.store, &grads, lr)?;
        self.ema = ema;
        Ok(loss)
    }

    /// Training loss as a function of every parameter array, for gradient
    /// checking. Leaves follow registry order; the EMA is not committed.
    pub fn loss_closure<'a>(
        &'a self,
        bag: &'a BagRecord,
    ) -> impl FnMut(&mut Graph, &[Var]) -> Result<Var, ModelError> + 'a {
        move |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let x = g.constant(bag.features.clone());
            let mut ema = self.ema.clone();
            Ok(self.loss_tape(g, &p, ema.as_mut(), x, &bag.label)?.total)
        }
    }
}

/// Inference summary of one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// Predicted class (classification) or highest-hazard bin (survival).
    pub class: usize,
    /// Probability of class 1 for classification, cumulative hazard for
    /// survival.
    pub score: f64,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(task: Task, logits: &[f64]) -> Self {
        let argmax = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, &z)| if z > logits[best] { i } else { best });
        match task {
            Task::Classification { .. } => {
                let mut probs = logits.to_vec();
                crate::tensor::softmax_rows_in_place(&mut probs, logits.len());
                Self {
                    logits: logits.to_vec(),
                    class: argmax,
                    score: probs[1],
                    probabilities: probs,
                }
            }
            Task::Survival { .. } => {
                let hv = HazardVector::from_logits(logits);
                Self {
                    logits: logits.to_vec(),
                    class: argmax,
                    score: hv.risk(),
                    probabilities: hv.hazards,
                }
            }
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Classification { classes } => write!(f, "classification ({classes} classes)"),
            Task::Survival { bins } => write!(f, "survival ({bins} bins)"),
        }
    }
}
