use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptcmil::data::{BagRecord, Label};
use ptcmil::heads::SurvivalLabel;
use ptcmil::metrics::{auc, c_index};
use ptcmil::model::{Model, ModelConfig, Task};
use ptcmil::nn::xavier_uniform_init;
use ptcmil::optim::{Adam, AdamConfig};
use ptcmil::tensor::Tensor;

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

fn brute_c_index(risks: &[f64], times: &[f64], censored: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if times[i] < times[j] && !censored[i] {
                pairs += 1.0;
                if risks[i] > risks[j] {
                    num += 1.0;
                } else if risks[i] == risks[j] {
                    num += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

/// Scores drawn from a small grid so ties are common.
fn gridded(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.random_range(0..6u8)) * 0.5).collect()
}

#[test]
fn auc_matches_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 100 {
        let n = rng.random_range(2..=50);
        let scores = gridded(&mut rng, n);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            assert!(auc(&scores, &labels).is_err());
            continue;
        }
        assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        checked += 1;
    }
}

#[test]
fn c_index_matches_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut checked = 0;
    while checked < 100 {
        let n = rng.random_range(2..=50);
        let risks = gridded(&mut rng, n);
        let times: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8))).collect();
        let censored: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        match brute_c_index(&risks, &times, &censored) {
            Some(expected) => {
                assert_eq!(c_index(&risks, &times, &censored).unwrap(), expected);
                checked += 1;
            }
            None => assert!(c_index(&risks, &times, &censored).is_err()),
        }
    }
}

fn small_config(task: Task) -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        clusters: 3,
        task,
        ..ModelConfig::default()
    }
}

fn random_bag(rng: &mut ChaCha8Rng, n: usize, label: Label) -> BagRecord {
    let mut x = xavier_uniform_init(n, 16, rng);
    x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    BagRecord::new("b", x, label).unwrap()
}

fn no_decay() -> AdamConfig {
    AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    }
}

fn losses(model: &mut Model, bag: &BagRecord, steps: usize, lr: f64) -> Vec<f64> {
    let mut opt = Adam::new(&model.store, no_decay());
    (0..steps)
        .map(|_| model.train_step(bag, &mut opt, lr).unwrap().total)
        .collect()
}

#[test]
fn single_step_lowers_loss() {
    let mut lowered = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let task = if seed % 2 == 0 {
            Task::Classification { classes: 2 }
        } else {
            Task::Survival { bins: 4 }
        };
        let label = match task {
            Task::Classification { .. } => Label::Class((seed / 2 % 2) as usize),
            Task::Survival { .. } => Label::Survival(SurvivalLabel {
                time_bin: (seed % 4) as usize,
                censored: seed % 3 == 0,
            }),
        };
        let n = rng.random_range(8..20);
        let bag = random_bag(&mut rng, n, label);
        let mut model = Model::new(small_config(task), seed).unwrap();
        let l = losses(&mut model, &bag, 2, 1e-3);
        if l[1] < l[0] {
            lowered += 1;
        }
    }
    assert!(lowered >= 95, "lowered in {lowered}/100");
}

#[test]
fn repeated_bag_loss_is_monotone_on_the_smooth_path() {
    let mut monotone = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let bag = random_bag(&mut rng, 12, Label::Class((seed % 2) as usize));
        let cfg = ModelConfig {
            clustering: false,
            ..small_config(Task::Classification { classes: 2 })
        };
        let mut model = Model::new(cfg, seed).unwrap();
        let l = losses(&mut model, &bag, 51, 1e-3);
        if l.windows(2).all(|w| w[1] <= w[0] + 1e-12) {
            monotone += 1;
        }
    }
    assert!(monotone >= 18, "monotone in {monotone}/20 seeds");
}

/// The hard cluster partition makes the loss piecewise smooth; a step may
/// land across a boundary. Every rise must coincide with a partition change.
#[test]
fn full_model_loss_rises_only_across_partition_changes() {
    let mut rises = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let bag = random_bag(&mut rng, 12, Label::Class((seed % 2) as usize));
        let mut model = Model::new(small_config(Task::Classification { classes: 2 }), seed).unwrap();
        let mut opt = Adam::new(&model.store, no_decay());
        let mut prev: Option<(f64, Vec<usize>)> = None;
        for _ in 0..51 {
            let part = model
                .forward(&bag.features, true, None)
                .unwrap()
                .partition
                .unwrap()
                .labels;
            let l = model.train_step(&bag, &mut opt, 1e-3).unwrap().total;
            if let Some((pl, pp)) = &prev {
                if l > pl + 1e-6 {
                    rises += 1;
                    assert_ne!(*pp, part, "seed {seed}: loss rose by {} with a fixed partition", l - pl);
                }
            }
            prev = Some((l, part));
        }
    }
    assert!(rises > 0);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bag = random_bag(&mut rng, 10, Label::Class(1));
    let mut model = Model::new(small_config(Task::Classification { classes: 2 }), 5).unwrap();
    let before = model.store.values();
    let mut opt = Adam::new(&model.store, AdamConfig::default());
    model.train_step(&bag, &mut opt, 0.0).unwrap();
    for (a, b) in before.iter().zip(model.store.values()) {
        assert_eq!(a.data(), b.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_are_finite_and_normalized(seed in 0u64..1000, n in 1usize..30, scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = xavier_uniform_init(n, 16, &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let model = Model::new(small_config(Task::Classification { classes: 3 }), seed).unwrap();
        let p = model.predict(&x).unwrap();
        prop_assert!(p.logits.iter().all(|z| z.is_finite()));
        prop_assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.class < 3);
    }

    #[test]
    fn survival_outputs_are_valid_hazards(seed in 0u64..1000, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = xavier_uniform_init(n, 16, &mut rng);
        let model = Model::new(small_config(Task::Survival { bins: 4 }), seed).unwrap();
        let p = model.predict(&x).unwrap();
        prop_assert!(p.probabilities.iter().all(|h| *h > 0.0 && *h < 1.0));
        prop_assert!((p.score - p.probabilities.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn reversing_instances_keeps_predicted_class(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = xavier_uniform_init(9, 16, &mut rng);
        let rows: Vec<Vec<f64>> = (0..9).rev().map(|i| x.row(i).to_vec()).collect();
        let model = Model::new(small_config(Task::Classification { classes: 2 }), seed).unwrap();
        let a = model.predict(&x).unwrap();
        let b = model.predict(&Tensor::from_rows(&rows).unwrap()).unwrap();
        prop_assert_eq!(a.class, b.class);
    }
}
