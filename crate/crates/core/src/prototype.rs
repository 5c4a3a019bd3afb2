//! Cluster-wise refinement with a shared local layer, then merging each
//! cluster's refined members into one prototype.

use rand::Rng;

use crate::nn::{Bound, EncoderLayer, Linear, ParamStore};
use crate::prompt::ClusterPartition;
use crate::tensor::{Graph, Result, Var};

/// Scores each refined member token; the softmax of the scores gives the
/// merge weights. Shared across clusters.
#[derive(Debug, Clone)]
pub struct ScoreHead {
    pub linear: Linear,
}

impl ScoreHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, name, dim, 1, true, rng),
        }
    }

    /// One score per row, as an Nᶜ×1 column.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        self.linear.forward(g, p, tokens)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RefinedCluster {
    /// Refined prompt token, 1×d.
    pub prompt: Var,
    /// Refined members, Nᶜ×d; `None` for an empty cluster.
    pub members: Option<Var>,
}

/// Prepends each cluster's prompt token to its members and runs the shared
/// layer. Empty clusters run on the prompt token alone.
pub fn local_refine(
    g: &mut Graph,
    p: &Bound,
    layer: &EncoderLayer,
    prompts: Var,
    patches: Var,
    partition: &ClusterPartition,
) -> Result<Vec<RefinedCluster>> {
    partition
        .groups
        .iter()
        .enumerate()
        .map(|(c, group)| {
            let prompt = g.gather_rows(prompts, &[c])?;
            if group.is_empty() {
                let out = layer.forward(g, p, prompt)?;
                return Ok(RefinedCluster {
                    prompt: out,
                    members: None,
                });
            }
            let members = g.gather_rows(patches, group)?;
            let tokens = g.concat_rows(&[prompt, members])?;
            let out = layer.forward(g, p, tokens)?;
            let rest: Vec<usize> = (1..=group.len()).collect();
            Ok(RefinedCluster {
                prompt: g.gather_rows(out, &[0])?,
                members: Some(g.gather_rows(out, &rest)?),
            })
        })
        .collect()
}

/// Softmax(scores)-weighted mean of the member rows; 1×d.
pub fn merge(g: &mut Graph, members: Var, scores: Var) -> Result<Var> {
    let row = g.transpose(scores)?;
    let weights = g.softmax_rows(row)?;
    g.matmul(weights, members)
}

#[derive(Debug, Clone)]
pub struct PrototypeStage {
    /// C×d prototypes.
    pub prototypes: Var,
    /// C×d refined prompt tokens.
    pub refined_prompts: Var,
    pub empty: Vec<bool>,
}

/// Runs refinement and merging for every cluster. Without a score head the
/// refined prompt tokens serve as the prototypes. An empty cluster always
/// falls back to its refined prompt token.
pub fn build_prototypes(
    g: &mut Graph,
    p: &Bound,
    layer: &EncoderLayer,
    scorer: Option<&ScoreHead>,
    prompts: Var,
    patches: Var,
    partition: &ClusterPartition,
) -> Result<PrototypeStage> {
    let refined = local_refine(g, p, layer, prompts, patches, partition)?;
    let prompt_rows: Vec<Var> = refined.iter().map(|r| r.prompt).collect();
    let refined_prompts = g.concat_rows(&prompt_rows)?;
    let prototypes = match scorer {
        None => refined_prompts,
        Some(head) => {
            let mut protos = Vec::with_capacity(refined.len());
            for r in &refined {
                protos.push(match r.members {
                    Some(m) => {
                        let s = head.forward(g, p, m)?;
                        merge(g, m, s)?
                    }
                    None => r.prompt,
                });
            }
            g.concat_rows(&protos)?
        }
    };
    Ok(PrototypeStage {
        prototypes,
        refined_prompts,
        empty: partition.empty.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::xavier_uniform_init;
    use crate::prompt::{assignment_matrix, partition};
    use crate::tensor::{finite_diff_check, Tensor, TensorError};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn merge_value(members: &Tensor, scores: &[f64]) -> Tensor {
        let mut g = Graph::new();
        let m = g.constant(members.clone());
        let s = g.constant(Tensor::matrix(scores.len(), 1, scores.to_vec()).unwrap());
        let out = merge(&mut g, m, s).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn merge_examples() {
        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let h = merge_value(&m, &[3f64.ln(), 0.0]);
        assert!((h.data()[0] - 0.75).abs() < 1e-12 && (h.data()[1] - 0.25).abs() < 1e-12);

        let m = Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, -2.0], vec![2.0, 1.0]]).unwrap();
        let h = merge_value(&m, &[0.7, 0.7, 0.7]);
        assert!((h.data()[0] - 2.0).abs() < 1e-12 && (h.data()[1] - 1.0).abs() < 1e-12);

        let single = Tensor::row_vector(vec![0.3, -0.9, 2.5]);
        assert_eq!(merge_value(&single, &[-4.0]), single);
    }

    proptest! {
        #[test]
        fn merge_is_convex_and_shift_invariant(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..7),
            raw_scores in prop::collection::vec(-4.0f64..4.0, 7),
            shift in -20.0f64..20.0,
        ) {
            let m = Tensor::from_rows(&rows).unwrap();
            let scores = &raw_scores[..rows.len()];
            let h = merge_value(&m, scores);
            for j in 0..3 {
                let lo = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(h.data()[j] >= lo - 1e-12 && h.data()[j] <= hi + 1e-12);
            }
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            prop_assert!(merge_value(&m, &shifted).max_abs_diff(&h) < 1e-12);
        }
    }

    struct Fixture {
        store: ParamStore,
        layer: EncoderLayer,
        scorer: ScoreHead,
        prompts: Tensor,
        patches: Tensor,
    }

    fn fixture(seed: u64, n: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "local", 8, 2, &mut rng);
        let scorer = ScoreHead::new(&mut store, "score", 8, &mut rng);
        Fixture {
            store,
            layer,
            scorer,
            prompts: crate::prompt::init_prompts(3, 8, 0.9, &mut rng).unwrap().prompts,
            patches: xavier_uniform_init(n, 8, &mut rng),
        }
    }

    fn run_stage(f: &Fixture, patches: &Tensor) -> (Tensor, Tensor, Vec<bool>) {
        let part = partition(&assignment_matrix(patches, &f.prompts).unwrap());
        let mut g = Graph::new();
        let p = f.store.bind(&mut g);
        let pr = g.constant(f.prompts.clone());
        let pa = g.constant(patches.clone());
        let st = build_prototypes(&mut g, &p, &f.layer, Some(&f.scorer), pr, pa, &part).unwrap();
        (
            g.value(st.prototypes).clone(),
            g.value(st.refined_prompts).clone(),
            st.empty,
        )
    }

    #[test]
    fn empty_cluster_is_singleton_prompt() {
        let f = fixture(1, 4);
        let part = ClusterPartition {
            labels: vec![0, 0, 2, 2],
            groups: vec![vec![0, 1], vec![], vec![2, 3]],
            empty: vec![false, true, false],
        };
        let mut g = Graph::new();
        let p = f.store.bind(&mut g);
        let pr = g.constant(f.prompts.clone());
        let pa = g.constant(f.patches.clone());
        let refined = local_refine(&mut g, &p, &f.layer, pr, pa, &part).unwrap();
        assert!(refined[1].members.is_none());
        assert_eq!(g.value(refined[1].prompt).shape(), &[1, 8]);
        assert_eq!(g.value(refined[0].members.unwrap()).shape(), &[2, 8]);

        let p1 = g.gather_rows(pr, &[1]).unwrap();
        let alone = f.layer.forward(&mut g, &p, p1).unwrap();
        assert_eq!(g.value(alone), g.value(refined[1].prompt));

        let st = build_prototypes(&mut g, &p, &f.layer, Some(&f.scorer), pr, pa, &part).unwrap();
        let protos = g.value(st.prototypes).clone();
        let prompts = g.value(st.refined_prompts).clone();
        assert_eq!(protos.row(1), prompts.row(1));
    }

    #[test]
    fn member_reordering_inside_a_cluster() {
        let f = fixture(2, 5);
        let base = ClusterPartition {
            labels: vec![0; 5],
            groups: vec![vec![0, 1, 2, 3, 4], vec![], vec![]],
            empty: vec![false, true, true],
        };
        let mut swapped = base.clone();
        swapped.groups[0] = vec![3, 0, 4, 2, 1];
        let run = |part: &ClusterPartition| {
            let mut g = Graph::new();
            let p = f.store.bind(&mut g);
            let pr = g.constant(f.prompts.clone());
            let pa = g.constant(f.patches.clone());
            let r = local_refine(&mut g, &p, &f.layer, pr, pa, part).unwrap();
            (g.value(r[0].prompt).clone(), g.value(r[0].members.unwrap()).clone())
        };
        let (p_a, m_a) = run(&base);
        let (p_b, m_b) = run(&swapped);
        assert!(p_a.max_abs_diff(&p_b) < 1e-9);
        assert!(m_a.gather_rows(&[3, 0, 4, 2, 1]).unwrap().max_abs_diff(&m_b) < 1e-9);
    }

    #[test]
    fn stage_is_invariant_to_patch_order() {
        let f = fixture(3, 9);
        let (h, _, _) = run_stage(&f, &f.patches);
        let perm = [8, 2, 5, 0, 7, 1, 3, 6, 4];
        let (hp, _, _) = run_stage(&f, &f.patches.gather_rows(&perm).unwrap());
        assert!(h.max_abs_diff(&hp) < 1e-9);
    }

    #[test]
    fn merging_off_uses_refined_prompts() {
        let f = fixture(4, 6);
        let part = partition(&assignment_matrix(&f.patches, &f.prompts).unwrap());
        let mut g = Graph::new();
        let p = f.store.bind(&mut g);
        let pr = g.constant(f.prompts.clone());
        let pa = g.constant(f.patches.clone());
        let st = build_prototypes(&mut g, &p, &f.layer, None, pr, pa, &part).unwrap();
        assert_eq!(st.prototypes, st.refined_prompts);
    }

    #[test]
    fn refine_and_merge_gradcheck() {
        let f = fixture(5, 7);
        let part = partition(&assignment_matrix(&f.patches, &f.prompts).unwrap());
        let readout = xavier_uniform_init(3, 8, &mut ChaCha8Rng::seed_from_u64(6));
        let mut leaves = f.store.values();
        let n = leaves.len();
        leaves.push(f.prompts.clone());
        leaves.push(f.patches.clone());
        let rep = finite_diff_check::<_, TensorError>(&leaves, 1e-5, |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let st = build_prototypes(g, &p, &f.layer, Some(&f.scorer), v[n], v[n + 1], &part)?;
            let r = g.constant(readout.clone());
            let m = g.mul(st.prototypes, r)?;
            Ok(g.sum(m))
        })
        .unwrap();
        // the score bias cancels in the softmax, so its gradient is zero up to rounding
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
