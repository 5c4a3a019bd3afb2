//! Mean-pooling logistic probe: a bag-level baseline that sees only the
//! average instance.

use crate::data::{BagRecord, Label};
use crate::metrics::{auc, MetricError};

#[derive(Debug, Clone, PartialEq)]
pub struct MeanPoolProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub fn mean_features(bag: &BagRecord) -> Vec<f64> {
    let n = bag.n_instances() as f64;
    let mut out = vec![0.0; bag.dim()];
    for i in 0..bag.n_instances() {
        for (o, x) in out.iter_mut().zip(bag.features.row(i)) {
            *o += x / n;
        }
    }
    out
}

fn is_positive(b: &BagRecord) -> bool {
    matches!(b.label, Label::Class(c) if c == 1)
}

impl MeanPoolProbe {
    /// Full-batch gradient descent on the L2-regularized logistic loss over
    /// standardized mean features.
    pub fn fit(train: &[BagRecord], iterations: usize, lr: f64, l2: f64) -> Self {
        let xs: Vec<Vec<f64>> = train.iter().map(mean_features).collect();
        let d = xs.first().map_or(0, Vec::len);
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut probe = Self {
            mean,
            scale,
            weights: vec![0.0; d],
            bias: 0.0,
        };
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| probe.standardize(x)).collect();
        let ys: Vec<f64> = train.iter().map(|b| f64::from(u8::from(is_positive(b)))).collect();
        for _ in 0..iterations {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (z, y) in zs.iter().zip(&ys) {
                let err = sigmoid(probe.logit_std(z)) - y;
                gw.iter_mut().zip(z).for_each(|(g, zi)| *g += err * zi / n);
                gb += err / n;
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= lr * (g + l2 * *w);
            }
            probe.bias -= lr * gb;
        }
        probe
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn logit_std(&self, z: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn score(&self, bag: &BagRecord) -> f64 {
        self.logit_std(&self.standardize(&mean_features(bag)))
    }

    pub fn auc(&self, bags: &[BagRecord]) -> Result<f64, MetricError> {
        let s: Vec<f64> = bags.iter().map(|b| self.score(b)).collect();
        let l: Vec<bool> = bags.iter().map(is_positive).collect();
        auc(&s, &l)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
