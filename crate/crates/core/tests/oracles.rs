use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use siimil::abmil::{monte_carlo_cv, train_fold, CvConfig, LabeledBag, TrainConfig};
use siimil::data::{EmbeddingMatrix, KeyMatrix};
use siimil::eval::{bootstrap_ci, grouped_recall, tir, BootstrapConfig, Metric, TirBucket};
use siimil::sii::{sii_bag, SiiConfig};

/// Negative bags hold instances near the origin; positive bags add a few
/// instances shifted far along the first axis.
fn separable_bags(n_per_class: usize, seed: u64) -> Vec<LabeledBag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags = Vec::new();
    for i in 0..2 * n_per_class {
        let label = (i >= n_per_class) as u8;
        let n = 20;
        let mut v = Vec::with_capacity(4 * n);
        for j in 0..n {
            for d in 0..4 {
                let shift = if label == 1 && j < 3 && d == 0 {
                    6.0
                } else {
                    0.0
                };
                v.push((shift + rng.sample::<f64, _>(StandardNormal)) as f32);
            }
        }
        bags.push(LabeledBag {
            id: format!("b{i:03}"),
            label,
            instances: EmbeddingMatrix::new(4, n, v).unwrap(),
        });
    }
    bags
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        max_epochs: 15,
        patience: 15,
        attention_dim: 8,
        ..Default::default()
    }
}

#[test]
fn training_separates_separable_bags() {
    let bags = separable_bags(12, 1);
    let (val, train): (Vec<_>, Vec<_>) = bags
        .into_iter()
        .partition(|b| b.id.ends_with('0') || b.id.ends_with('5'));
    let t = train_fold(&train, &val, &quick_train()).unwrap();
    let losses: Vec<f64> = t.log.iter().map(|r| r.train_loss).collect();
    assert!(losses[4] < losses[0], "train loss did not fall: {losses:?}");
    let best = t.log.iter().find(|r| r.epoch == t.best_epoch).unwrap();
    assert_eq!(best.val_auc, Some(1.0));
}

#[test]
fn training_is_deterministic() {
    let bags = separable_bags(6, 2);
    let (val, train): (Vec<_>, Vec<_>) = bags
        .into_iter()
        .partition(|b| b.id.ends_with('0') || b.id.ends_with('7'));
    let a = train_fold(&train, &val, &quick_train()).unwrap();
    let b = train_fold(&train, &val, &quick_train()).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
}

#[test]
fn monte_carlo_cv_splits_and_selects_best_fold() {
    let bags = separable_bags(10, 3);
    let cfg = CvConfig {
        folds: 4,
        seed: 11,
        sii: None,
        train: TrainConfig {
            max_epochs: 3,
            ..quick_train()
        },
        ..Default::default()
    };
    let cv = monte_carlo_cv(&bags, &cfg).unwrap();
    assert_eq!(cv.folds.len(), 4);
    for f in &cv.folds {
        assert_eq!((f.train_ids.len(), f.val_ids.len()), (18, 2));
        let val_pos = f
            .val_ids
            .iter()
            .filter(|id| bags.iter().any(|b| &b.id == *id && b.label == 1))
            .count();
        assert_eq!(val_pos, 1);
        assert!(f.val_ids.iter().all(|id| !f.train_ids.contains(id)));
    }
    let best = cv
        .folds
        .iter()
        .map(|f| f.val_auc.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let first_best = cv
        .folds
        .iter()
        .position(|f| f.val_auc == Some(best))
        .unwrap();
    assert_eq!(cv.selected, first_best);
}

#[test]
fn keys_are_learned_per_fold_from_training_negatives() {
    let bags = separable_bags(10, 4);
    let cfg = CvConfig {
        folds: 2,
        seed: 5,
        train: TrainConfig {
            max_epochs: 2,
            ..quick_train()
        },
        ..Default::default()
    };
    let cv = monte_carlo_cv(&bags, &cfg).unwrap();
    for f in &cv.folds {
        let negatives: Vec<EmbeddingMatrix> = bags
            .iter()
            .filter(|b| b.label == 0 && f.train_ids.contains(&b.id))
            .map(|b| b.instances.clone())
            .collect();
        let want = siimil::keylearn::build_key_matrix(&negatives, &cfg.keys).unwrap();
        assert_eq!(f.keys.as_ref(), Some(&want));
    }
}

fn normal_cdf(x: f64) -> f64 {
    // Abramowitz and Stegun 7.1.26 for erf.
    let z = x / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * z.abs());
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-z * z).exp();
    0.5 * (1.0 + erf.copysign(z))
}

#[test]
fn bootstrap_interval_covers_true_auc() {
    // Unit-variance normals one apart: AUC = Φ(1/√2).
    let truth = normal_cdf(1.0 / std::f64::consts::SQRT_2);
    let mut covered = 0;
    for run in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + run);
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..160 {
            let l = (i % 2) as u8;
            scores.push(l as f64 + rng.sample::<f64, _>(StandardNormal));
            labels.push(l);
        }
        let cfg = BootstrapConfig {
            n: 400,
            level: 0.95,
            seed: run,
        };
        let (lo, hi) = bootstrap_ci(&scores, &labels, Metric::Auc, 0.5, &cfg).unwrap();
        assert!(lo <= hi);
        covered += (lo <= truth && truth <= hi) as usize;
    }
    // Binomial(50, 0.95) falls below 42 with probability under 0.2%.
    assert!(covered >= 42, "coverage {covered}/50");
}

#[test]
fn grouped_recall_matches_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut scores = Vec::new();
    let mut bag_labels = Vec::new();
    let mut inst: Vec<Vec<u8>> = Vec::new();
    for _ in 0..300 {
        let label = rng.random_range(0..=1u8);
        let n = rng.random_range(100..=1000);
        let k = if label == 1 {
            rng.random_range(1..=n / 4)
        } else {
            0
        };
        let mut l = vec![0u8; n];
        l[..k].iter_mut().for_each(|x| *x = 1);
        inst.push(l);
        bag_labels.push(label);
        scores.push(rng.random::<f64>());
    }
    let refs: Vec<Option<&[u8]>> = inst.iter().map(|l| Some(l.as_slice())).collect();
    let groups = grouped_recall(&scores, &bag_labels, &refs, 0.5).unwrap();
    for g in &groups {
        let (lo, hi) = g.bucket.bounds();
        let members: Vec<usize> = (0..scores.len())
            .filter(|&i| {
                let t = inst[i].iter().filter(|&&x| x == 1).count() as f64 / inst[i].len() as f64;
                bag_labels[i] == 1 && t >= lo && (t < hi || (hi == 1.0 && t <= hi))
            })
            .collect();
        let detected = members.iter().filter(|&&i| scores[i] >= 0.5).count();
        assert_eq!(g.n_bags, members.len(), "{:?}", g.bucket);
        assert_eq!(g.n_detected, detected);
        assert_eq!(
            g.recall,
            (!members.is_empty()).then(|| detected as f64 / members.len() as f64)
        );
    }
    assert_eq!(
        groups.iter().map(|g| g.n_bags).sum::<usize>(),
        bag_labels.iter().filter(|&&l| l == 1).count()
    );
    assert_eq!(TirBucket::of(0.005), TirBucket::From0p5To1);
    assert_eq!(TirBucket::of(0.1), TirBucket::AtLeast10);
}

#[test]
fn salient_bags_keep_labels_of_selected_instances() {
    let cfg = siimil::synth::SynthConfig {
        dim: 8,
        bags_per_class: 6,
        instances: siimil::synth::InstanceCount::Range(200, 400),
        positive_rates: vec![0.05, 0.2],
        seed: 7,
        ..Default::default()
    };
    let bags = siimil::synth::generate_dataset(&cfg).unwrap();
    let negatives: Vec<EmbeddingMatrix> = bags
        .iter()
        .filter(|b| b.label == 0)
        .map(|b| b.instances.clone())
        .collect();
    let keys: KeyMatrix =
        siimil::keylearn::build_key_matrix(&negatives, &Default::default()).unwrap();
    for b in bags.iter().filter(|b| b.label == 1) {
        let s = sii_bag(&b.instances, &keys, &SiiConfig::default(), &b.id).unwrap();
        let source = b.instances.instance_labels().unwrap();
        let kept = s.embeddings.instance_labels().unwrap();
        let recount: Vec<u8> = s.selected_indices.iter().map(|&i| source[i]).collect();
        assert_eq!(kept, recount.as_slice());
        assert_eq!(
            tir(kept).unwrap(),
            recount.iter().filter(|&&l| l == 1).count() as f64 / recount.len() as f64
        );
        for (j, &i) in s.selected_indices.iter().enumerate() {
            assert_eq!(s.embeddings.column(j), b.instances.column(i));
        }
    }
}
