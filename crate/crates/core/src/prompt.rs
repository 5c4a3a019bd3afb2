//! Learnable prompt tokens used as cluster proxies.
//!
//! Patches are softly assigned to prompts by a softmax over inner products,
//! then hard-partitioned by argmax. Prompts start row-orthonormal and are
//! tracked by an exponential moving average that feeds the anti-collapse
//! regularizer and the inference-time assignment.

use rand::Rng;
use thiserror::Error;

use crate::nn::xavier_uniform_init;
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Gram-Schmidt residuals below this norm count as linearly dependent.
pub const DEGENERATE_RESIDUAL: f64 = 1e-12;
const MAX_REDRAWS: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("cannot place {clusters} orthonormal prompts in dimension {dim}")]
    TooManyClusters { clusters: usize, dim: usize },
    #[error("cluster count must be at least 1")]
    NoClusters,
    #[error("row {row} stayed linearly dependent after {attempts} redraws")]
    Degenerate { row: usize, attempts: usize },
    #[error("decay factor {0} outside [0, 1]")]
    BadTheta(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Exponential moving average of the prompt parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEma {
    pub p_bar: Tensor,
    pub theta: f64,
    /// Number of updates applied so far.
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    /// Current C×D prompts; trainable.
    pub prompts: Tensor,
    pub ema: PromptEma,
}

fn check_theta(theta: f64) -> Result<(), PromptError> {
    if (0.0..=1.0).contains(&theta) {
        Ok(())
    } else {
        Err(PromptError::BadTheta(theta))
    }
}

impl PromptEma {
    pub fn new(p_bar: Tensor, theta: f64) -> Result<Self, PromptError> {
        check_theta(theta)?;
        Ok(Self { p_bar, theta, steps: 0 })
    }

    /// `θ·P̄ + (1−θ)·current` as a tape node. The history term is a constant,
    /// so gradient reaches `current` only. Commits the new value and bumps the
    /// step counter.
    pub fn update(&mut self, g: &mut Graph, current: Var) -> Result<Var, PromptError> {
        check_theta(self.theta)?;
        let cur_shape = g.value(current).shape().to_vec();
        if cur_shape != self.p_bar.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ema_update",
                lhs: self.p_bar.shape().to_vec(),
                rhs: cur_shape,
            }
            .into());
        }
        let history = g.constant(scaled(&self.p_bar, self.theta));
        let fresh = g.scale(current, 1.0 - self.theta);
        let blended = g.add(history, fresh)?;
        self.p_bar = g.value(blended).clone();
        self.steps += 1;
        Ok(blended)
    }

    /// Value-only form of [`PromptEma::update`].
    pub fn update_value(&mut self, current: &Tensor) -> Result<(), PromptError> {
        let mut g = Graph::new();
        let c = g.constant(current.clone());
        self.update(&mut g, c).map(|_| ())
    }
}

fn scaled(t: &Tensor, s: f64) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= s);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormalizes the rows in order. On failure returns the index of the
/// first row whose residual collapses.
pub fn gram_schmidt(rows: &Tensor) -> Result<Tensor, usize> {
    let (n, d) = (rows.rows(), rows.cols());
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut u = rows.row(i).to_vec();
        // Second sweep re-orthogonalizes against rounding drift.
        for _ in 0..2 {
            for b in &basis {
                let coef = dot(b, &u) / dot(b, b);
                u.iter_mut().zip(b).for_each(|(x, y)| *x -= coef * y);
            }
        }
        let norm = dot(&u, &u).sqrt();
        if norm < DEGENERATE_RESIDUAL {
            return Err(i);
        }
        u.iter_mut().for_each(|x| *x /= norm);
        basis.push(u);
    }
    Ok(Tensor::matrix(n, d, basis.concat()).expect("same shape as input"))
}

/// Xavier-uniform draw followed by Gram-Schmidt; `P̄` starts equal to `P`.
pub fn init_prompts<R: Rng + ?Sized>(
    clusters: usize,
    dim: usize,
    theta: f64,
    rng: &mut R,
) -> Result<PromptBank, PromptError> {
    if clusters == 0 {
        return Err(PromptError::NoClusters);
    }
    if clusters > dim {
        return Err(PromptError::TooManyClusters { clusters, dim });
    }
    check_theta(theta)?;
    let mut raw = xavier_uniform_init(clusters, dim, rng);
    let mut attempts = 0;
    let prompts = loop {
        match gram_schmidt(&raw) {
            Ok(p) => break p,
            Err(row) => {
                attempts += 1;
                if attempts > MAX_REDRAWS {
                    return Err(PromptError::Degenerate {
                        row,
                        attempts: MAX_REDRAWS,
                    });
                }
                let fresh = xavier_uniform_init(1, dim, rng);
                raw.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(fresh.data());
            }
        }
    };
    Ok(PromptBank {
        ema: PromptEma::new(prompts.clone(), theta)?,
        prompts,
    })
}

/// N×C row-stochastic patch→cluster probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix(pub Tensor);

impl AssignmentMatrix {
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn clusters(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// `softmax(E₁ P₁ᵀ)` over clusters, on the tape.
pub fn assign(g: &mut Graph, patches: Var, prompts: Var) -> Result<Var, TensorError> {
    let pt = g.transpose(prompts)?;
    let scores = g.matmul(patches, pt)?;
    g.softmax_rows(scores)
}

pub fn assignment_matrix(patches: &Tensor, prompts: &Tensor) -> Result<AssignmentMatrix, TensorError> {
    let mut g = Graph::new();
    let e = g.constant(patches.clone());
    let p = g.constant(prompts.clone());
    let a = assign(&mut g, e, p)?;
    Ok(AssignmentMatrix(g.value(a).clone()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterPartition {
    /// Cluster index per patch.
    pub labels: Vec<usize>,
    /// Member patch indices per cluster, in original patch order.
    pub groups: Vec<Vec<usize>>,
    pub empty: Vec<bool>,
}

/// Hard argmax per row; ties go to the lowest cluster index.
pub fn partition(a: &AssignmentMatrix) -> ClusterPartition {
    let c = a.clusters();
    let mut groups = vec![Vec::new(); c];
    let labels: Vec<usize> = (0..a.n())
        .map(|i| {
            let row = a.row(i);
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            groups[best].push(i);
            best
        })
        .collect();
    let empty = groups.iter().map(Vec::is_empty).collect();
    ClusterPartition { labels, groups, empty }
}

/// `‖PᵀP − I_D‖_F` on the tape.
pub fn reg_loss(g: &mut Graph, prompts: Var) -> Result<Var, TensorError> {
    let d = g.value(prompts).cols();
    let pt = g.transpose(prompts)?;
    let gram = g.matmul(pt, prompts)?;
    let eye = g.constant(Tensor::identity(d));
    let diff = g.sub(gram, eye)?;
    Ok(g.frobenius(diff))
}

pub fn reg_loss_value(prompts: &Tensor) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(prompts.clone());
    let r = reg_loss(&mut g, p).expect("2-d prompts");
    g.value(r).data()[0]
}

/// `‖PPᵀ − I_C‖_F`: zero exactly when the rows are orthonormal.
pub fn orthogonality_defect(prompts: &Tensor) -> f64 {
    let gram = prompts.matmul(&prompts.transpose().expect("2-d")).expect("conformable");
    let c = gram.rows();
    let mut acc = 0.0;
    for i in 0..c {
        for j in 0..c {
            let target = if i == j { 1.0 } else { 0.0 };
            acc += (gram.get(i, j) - target).powi(2);
        }
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn textbook_gram_schmidt() {
        let raw = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let p = gram_schmidt(&raw).unwrap();
        assert!(p.max_abs_diff(&Tensor::identity(2)) < 1e-15);
    }

    #[test]
    fn dependent_rows_are_reported() {
        let raw = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(gram_schmidt(&raw), Err(1));
    }

    #[test]
    fn init_is_orthonormal_and_ema_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (c, d) in [(1, 1), (2, 4), (4, 8), (8, 32), (16, 32), (5, 5)] {
            let bank = init_prompts(c, d, 0.9, &mut rng).unwrap();
            assert!(orthogonality_defect(&bank.prompts) < 1e-10);
            assert_eq!(bank.ema.p_bar, bank.prompts);
            assert_eq!(bank.ema.steps, 0);
        }
    }

    #[test]
    fn init_rejects_too_many_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            init_prompts(3, 2, 0.9, &mut rng).unwrap_err(),
            PromptError::TooManyClusters { clusters: 3, dim: 2 }
        );
        assert!(init_prompts(2, 2, 1.5, &mut rng).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_prompts(4, 8, 0.9, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_prompts(4, 8, 0.9, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reg_loss_at_its_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // exactly representable square orthonormal matrices
        let h = 0.5;
        let hadamard = Tensor::from_rows(&[
            vec![h, h, h, h],
            vec![h, -h, h, -h],
            vec![h, h, -h, -h],
            vec![h, -h, -h, h],
        ])
        .unwrap();
        let swap = Tensor::from_rows(&[vec![0.0, -1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap();
        for p in [Tensor::identity(5), hadamard, swap] {
            assert!(reg_loss_value(&p) < 1e-18);
        }
        // square draw: zero up to rounding
        let bank = init_prompts(6, 6, 0.9, &mut rng).unwrap();
        assert!(reg_loss_value(&bank.prompts) < 1e-14);
        // C < D: PᵀP is a rank-C projection, so the floor is sqrt(D − C)
        let bank = init_prompts(3, 7, 0.9, &mut rng).unwrap();
        assert!((reg_loss_value(&bank.prompts) - 4f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn reg_loss_hand_values() {
        assert!((reg_loss_value(&Tensor::zeros(2, 2)) - 2f64.sqrt()).abs() < 1e-15);
        let twin = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        // 2e₁e₁ᵀ − I = diag(1, −1)
        assert!((reg_loss_value(&twin) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn assignment_examples() {
        let e = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap();
        let one = Tensor::row_vector(vec![0.7, 0.2]);
        let a = assignment_matrix(&e, &one).unwrap();
        assert_eq!(a.0.data(), &[1.0, 1.0]);

        let p = Tensor::identity(2);
        let patch = Tensor::row_vector(vec![3f64.ln(), 0.0]);
        let a = assignment_matrix(&patch, &p).unwrap();
        assert!((a.row(0)[0] - 0.75).abs() < 1e-12);
        assert!((a.row(0)[1] - 0.25).abs() < 1e-12);

        let p3 = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let orth = Tensor::row_vector(vec![0.0, 0.0, 4.0]);
        let a = assignment_matrix(&orth, &p3).unwrap();
        assert_eq!(a.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn partition_examples() {
        let a = AssignmentMatrix(Tensor::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap());
        let p = partition(&a);
        assert_eq!(p.labels, vec![1, 0]);
        let a = AssignmentMatrix(Tensor::from_rows(&[vec![0.9, 0.05, 0.05], vec![0.6, 0.3, 0.1]]).unwrap());
        let p = partition(&a);
        assert_eq!(p.groups, vec![vec![0, 1], vec![], vec![]]);
        assert_eq!(p.empty, vec![false, true, true]);
    }

    #[test]
    fn ema_examples() {
        let mut ema = PromptEma::new(Tensor::zeros(2, 3), 0.9).unwrap();
        ema.update_value(&Tensor::full(2, 3, 1.0)).unwrap();
        assert!(ema.p_bar.data().iter().all(|v| (v - 0.1).abs() < 1e-15));
        assert_eq!(ema.steps, 1);

        let start = Tensor::full(2, 3, 0.4);
        let mut frozen = PromptEma::new(start.clone(), 1.0).unwrap();
        frozen.update_value(&Tensor::full(2, 3, -5.0)).unwrap();
        assert_eq!(frozen.p_bar, start);

        let mut bad = PromptEma::new(Tensor::zeros(1, 1), 0.5).unwrap();
        bad.theta = 1.2;
        assert!(matches!(
            bad.update_value(&Tensor::zeros(1, 1)),
            Err(PromptError::BadTheta(_))
        ));
    }

    #[test]
    fn ema_gradient_flows_through_current_term_only() {
        let mut ema = PromptEma::new(Tensor::full(1, 2, 3.0), 0.9).unwrap();
        let mut g = Graph::new();
        let cur = g.leaf(Tensor::row_vector(vec![1.0, -1.0]));
        let out = ema.update(&mut g, cur).unwrap();
        let s = g.sum(out);
        let grads = g.backward(s).unwrap();
        let gc = grads.get(cur);
        assert!(gc.data().iter().all(|v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn assign_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = xavier_uniform_init(6, 5, &mut rng);
        let p = xavier_uniform_init(3, 5, &mut rng);
        let w = xavier_uniform_init(6, 3, &mut rng);
        let rep = finite_diff_check::<_, TensorError>(&[e, p], 1e-5, |g, v| {
            let a = assign(g, v[0], v[1])?;
            let wv = g.constant(w.clone());
            let m = g.mul(a, wv)?;
            Ok(g.sum(m))
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn reg_loss_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = xavier_uniform_init(4, 8, &mut rng);
        let rep = finite_diff_check::<_, TensorError>(&[p], 1e-5, |g, v| reg_loss(g, v[0])).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    fn matrix_strategy(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor> {
        (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
            prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn partition_ignores_positive_row_scaling(a in matrix_strategy(8, 5), scales in prop::collection::vec(0.1f64..10.0, 8)) {
            let base = AssignmentMatrix(a.clone());
            let mut scaled = a.clone();
            let c = a.cols();
            for (r, row) in scaled.data_mut().chunks_mut(c).enumerate() {
                row.iter_mut().for_each(|v| *v *= scales[r]);
            }
            prop_assert_eq!(partition(&base).labels, partition(&AssignmentMatrix(scaled)).labels);
        }

        #[test]
        fn partition_is_permutation_equivariant(a in matrix_strategy(8, 4), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let n = a.rows();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let base = partition(&AssignmentMatrix(a.clone()));
            let moved = partition(&AssignmentMatrix(a.gather_rows(&perm).unwrap()));
            let expect: Vec<usize> = perm.iter().map(|&i| base.labels[i]).collect();
            prop_assert_eq!(moved.labels, expect);
        }

        #[test]
        fn partition_covers_every_patch_once(a in matrix_strategy(10, 4)) {
            let p = partition(&AssignmentMatrix(a.clone()));
            let mut all: Vec<usize> = p.groups.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..a.rows()).collect::<Vec<_>>());
            for (c, g) in p.groups.iter().enumerate() {
                prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(p.empty[c], g.is_empty());
            }
        }
    }
}
