//! Pooling over the final token set and the two task objectives.

use std::fmt;
use std::str::FromStr;

use crate::nn::{Bound, Linear};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Which tokens are averaged before the task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolingMode {
    /// Prototypes only.
    Pro,
    /// Refined class token only.
    Cls,
    /// Class token followed by the prototypes.
    ProCls,
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::Pro => "pro",
            PoolingMode::Cls => "cls",
            PoolingMode::ProCls => "pro+cls",
        })
    }
}

impl FromStr for PoolingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "pro" => Ok(PoolingMode::Pro),
            "cls" => Ok(PoolingMode::Cls),
            "pro+cls" | "cls+pro" => Ok(PoolingMode::ProCls),
            other => Err(format!("unknown pooling mode {other:?} (expected pro, cls or pro+cls)")),
        }
    }
}

/// Mean of the selected tokens, 1×d. Without prototypes every mode reduces
/// to the class token.
pub fn pool(g: &mut Graph, cls: Var, prototypes: Option<Var>, mode: PoolingMode) -> Result<Var> {
    let tokens = match (mode, prototypes) {
        (PoolingMode::Cls, _) | (_, None) => cls,
        (PoolingMode::Pro, Some(h)) => h,
        (PoolingMode::ProCls, Some(h)) => g.concat_rows(&[cls, h])?,
    };
    g.mean_rows(tokens)
}

pub fn pool_and_predict(
    g: &mut Graph,
    p: &Bound,
    cls: Var,
    prototypes: Option<Var>,
    mode: PoolingMode,
    head: &Linear,
) -> Result<Var> {
    let pooled = pool(g, cls, prototypes, mode)?;
    head.forward(g, p, pooled)
}

/// Softmax cross-entropy of a 1×K logit row against class `label`.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let k = g.value(logits).cols();
    if label >= k {
        return Err(TensorError::IndexOutOfRange {
            op: "cross_entropy",
            index: label,
            extent: k,
        });
    }
    let ls = g.log_softmax_rows(logits)?;
    let mut onehot = vec![0.0; k];
    onehot[label] = -1.0;
    let mask = g.constant(Tensor::row_vector(onehot));
    let picked = g.mul(ls, mask)?;
    Ok(g.sum(picked))
}

/// `task + α·reg`; `reg` is absent when clustering is disabled.
pub fn with_regularizer(g: &mut Graph, task: Var, reg: Option<Var>, alpha: f64) -> Result<Var> {
    match reg {
        Some(r) if alpha != 0.0 => {
            let w = g.scale(r, alpha);
            g.add(task, w)
        }
        _ => Ok(task),
    }
}

pub fn classification_loss(g: &mut Graph, logits: Var, label: usize, reg: Option<Var>, alpha: f64) -> Result<Var> {
    let ce = cross_entropy(g, logits, label)?;
    with_regularizer(g, ce, reg, alpha)
}

/// Discrete-time survival label: event (or censoring) bin and censorship
/// flag (`censored = true` means alive past follow-up).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SurvivalLabel {
    pub time_bin: usize,
    pub censored: bool,
}

/// Per-bin conditional hazards and the survival curve they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardVector {
    pub hazards: Vec<f64>,
    pub survival: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl HazardVector {
    pub fn from_hazards(hazards: Vec<f64>) -> Self {
        let survival = hazards
            .iter()
            .scan(1.0, |s, h| {
                *s *= 1.0 - h;
                Some(*s)
            })
            .collect();
        Self { hazards, survival }
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        Self::from_hazards(logits.iter().map(|&z| sigmoid(z)).collect())
    }

    /// Survival past bin `r`; bin −1 survives with probability 1.
    pub fn surv(&self, r: isize) -> f64 {
        if r < 0 {
            1.0
        } else {
            self.survival[r as usize]
        }
    }

    /// Scalar risk used for ranking: the cumulative hazard over all bins.
    pub fn risk(&self) -> f64 {
        self.hazards.iter().sum()
    }
}

/// Negative log-likelihood of one patient under the discrete hazard model.
pub fn survival_loss(hv: &HazardVector, label: SurvivalLabel) -> f64 {
    let y = label.time_bin as isize;
    if label.censored {
        -hv.surv(y).ln()
    } else {
        -hv.surv(y - 1).ln() - hv.hazards[label.time_bin].ln()
    }
}

/// [`survival_loss`] on the tape, from hazard logits. Uses
/// `ln(1 − σ(z)) = ln σ(−z)` so every label stays finite.
pub fn survival_nll(g: &mut Graph, logits: Var, label: SurvivalLabel) -> Result<Var> {
    let bins = g.value(logits).cols();
    if label.time_bin >= bins {
        return Err(TensorError::IndexOutOfRange {
            op: "survival_nll",
            index: label.time_bin,
            extent: bins,
        });
    }
    let neg = g.scale(logits, -1.0);
    let log_surv_step = g.log_sigmoid(neg);
    let log_hazard = g.log_sigmoid(logits);
    // Weights pick the terms: survival steps 0..=Y when censored, 0..Y plus
    // the hazard at Y otherwise.
    let y = label.time_bin;
    let mut w_surv = vec![0.0; bins];
    let mut w_haz = vec![0.0; bins];
    if label.censored {
        w_surv[..=y].iter_mut().for_each(|w| *w = -1.0);
    } else {
        w_surv[..y].iter_mut().for_each(|w| *w = -1.0);
        w_haz[y] = -1.0;
    }
    let ws = g.constant(Tensor::row_vector(w_surv));
    let wh = g.constant(Tensor::row_vector(w_haz));
    let a = g.mul(log_surv_step, ws)?;
    let b = g.mul(log_hazard, wh)?;
    let both = g.add(a, b)?;
    Ok(g.sum(both))
}
