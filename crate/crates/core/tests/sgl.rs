use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vessel_core::augment::AugmentationConfig;
use vessel_core::nn::{joint_bce, loss_bce, sigmoid, ModelConfig, OptimizerConfig, Segmenter};
use vessel_core::raster::{Mask, Plane, RgbImage};
use vessel_core::sgl::{
    check_no_leakage, infer_pseudo, run_sgl, split_folds, train_model, PseudoForm, PseudoLabelSet, RunManifest,
    SglConfig, TrainItem,
};
use vessel_core::{Error, Result};

fn ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{i:02}")).collect()
}

/// Answers a fixed value and reports a fixed training list.
struct Stub {
    value: f32,
    trained_on: Vec<String>,
}

impl Segmenter for Stub {
    fn predict(&self, image: &RgbImage) -> Result<(RgbImage, Plane)> {
        let (w, h) = image.dims();
        Ok((image.clone(), Plane::filled(w, h, self.value)))
    }

    fn trained_on(&self) -> &[String] {
        &self.trained_on
    }
}

fn image(seed: u64, n: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(n, n, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_the_training_set(n in 8usize..40, k_pow in 1u32..4, seed in any::<u64>()) {
        let k = 2usize.pow(k_pow);
        let all = ids(n);
        let a = split_folds(&all, k, seed).unwrap();
        a.validate(&all).unwrap();
        prop_assert_eq!(a.folds.len(), k);
        let sizes: Vec<usize> = a.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let union: BTreeSet<&String> = a.folds.iter().flatten().collect();
        prop_assert_eq!(union.len(), n);
        for f in 0..k {
            let comp = a.complement(f);
            prop_assert_eq!(comp.len() + a.folds[f].len(), n);
            prop_assert!(a.folds[f].iter().all(|id| !comp.contains(id)));
            for id in &a.folds[f] {
                prop_assert_eq!(a.fold_of(id), Some(f));
            }
        }
        prop_assert_eq!(split_folds(&all, k, seed).unwrap(), a);
    }

    #[test]
    fn fold_split_ignores_input_order(seed in any::<u64>()) {
        let all = ids(20);
        let mut rev = all.clone();
        rev.reverse();
        prop_assert_eq!(split_folds(&all, 4, seed).unwrap(), split_folds(&rev, 4, seed).unwrap());
    }
}

fn pseudo_setup(
    n: usize,
    k: usize,
) -> (
    Vec<String>,
    BTreeMap<String, RgbImage>,
    vessel_core::sgl::FoldAssignment,
) {
    let all = ids(n);
    let images = all
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), image(i as u64, 16)))
        .collect();
    let a = split_folds(&all, k, 11).unwrap();
    (all, images, a)
}

#[test]
fn each_member_labels_exactly_its_fold() {
    let (all, images, a) = pseudo_setup(20, 4);
    let members: Vec<Stub> = (0..4)
        .map(|k| Stub {
            value: k as f32 / 4.0,
            trained_on: a.complement(k),
        })
        .collect();
    let refs: Vec<&dyn Segmenter> = members.iter().map(|m| m as &dyn Segmenter).collect();
    let imgs: BTreeMap<String, &RgbImage> = images.iter().map(|(k, v)| (k.clone(), v)).collect();
    let set = infer_pseudo(&a, &refs, &imgs, PseudoForm::Soft).unwrap();
    assert_eq!(set.maps.len(), 20);
    let mut per_fold = [0usize; 4];
    for id in &all {
        let k = set.producer[id];
        per_fold[k] += 1;
        assert_eq!(a.fold_of(id), Some(k));
        // The map is the producer's output, so it identifies the producer.
        assert!(set.maps[id].data().iter().all(|&v| v == k as f32 / 4.0));
    }
    assert_eq!(per_fold, [5, 5, 5, 5]);
    let trained: Vec<Vec<String>> = members.iter().map(|m| m.trained_on.clone()).collect();
    check_no_leakage(&set.producer, &trained).unwrap();
}

#[test]
fn hard_pseudo_labels_are_binary() {
    let (_, images, a) = pseudo_setup(6, 2);
    let members: Vec<Stub> = (0..2)
        .map(|k| Stub {
            value: 0.3 + 0.4 * k as f32,
            trained_on: a.complement(k),
        })
        .collect();
    let refs: Vec<&dyn Segmenter> = members.iter().map(|m| m as &dyn Segmenter).collect();
    let imgs: BTreeMap<String, &RgbImage> = images.iter().map(|(k, v)| (k.clone(), v)).collect();
    let set = infer_pseudo(&a, &refs, &imgs, PseudoForm::Hard { threshold: 0.5 }).unwrap();
    for (id, map) in &set.maps {
        let want = if set.producer[id] == 1 { 1.0 } else { 0.0 };
        assert!(map.data().iter().all(|&v| v == want));
    }
}

#[test]
fn member_that_saw_its_fold_is_rejected() {
    let (all, images, a) = pseudo_setup(8, 2);
    let members = [
        Stub {
            value: 0.5,
            trained_on: all.clone(),
        },
        Stub {
            value: 0.5,
            trained_on: a.complement(1),
        },
    ];
    let refs: Vec<&dyn Segmenter> = members.iter().map(|m| m as &dyn Segmenter).collect();
    let imgs: BTreeMap<String, &RgbImage> = images.iter().map(|(k, v)| (k.clone(), v)).collect();
    match infer_pseudo(&a, &refs, &imgs, PseudoForm::Soft) {
        Err(Error::Leakage { fold, .. }) => assert_eq!(fold, 0),
        other => panic!("expected a leakage error, got {other:?}"),
    }
    let refs: Vec<&dyn Segmenter> = vec![&members[1]];
    assert!(matches!(
        infer_pseudo(&a, &refs, &imgs, PseudoForm::Soft),
        Err(Error::Contract(_))
    ));
}

fn random_maps(seed: u64, n: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = (0..n).map(|_| rng.gen_range(0.01f32..0.99)).collect();
    let y = (0..n).map(|_| rng.gen_bool(0.3) as u8 as f32).collect();
    let q = (0..n).map(|_| rng.gen::<f32>()).collect();
    (p, y, q)
}

#[test]
fn eight_by_eight_cross_entropy_matches_hand_sum() {
    let (p, y, _) = random_maps(64, 64);
    let mut sum = 0.0f64;
    for i in 0..64 {
        let (pi, yi) = (p[i] as f64, y[i] as f64);
        sum -= yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln();
    }
    assert!((loss_bce(&p, &y, None).unwrap() - sum / 64.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn joint_loss_is_linear_in_lambda(seed in any::<u64>(), lambda in 0.0f64..4.0) {
        let (p, y, q) = random_maps(seed, 64);
        let base = joint_bce(&p, &y, &q, 0.0).unwrap();
        prop_assert!((base - loss_bce(&p, &y, None).unwrap()).abs() < 1e-12);
        let ce = loss_bce(&p, &q, None).unwrap();
        prop_assert!((joint_bce(&p, &y, &q, lambda).unwrap() - (base + lambda * ce)).abs() < 1e-6);
    }

    #[test]
    fn pseudo_equal_to_label_doubles_the_loss(seed in any::<u64>()) {
        let (p, y, _) = random_maps(seed, 64);
        let single = loss_bce(&p, &y, None).unwrap();
        prop_assert!((joint_bce(&p, &y, &y, 1.0).unwrap() - 2.0 * single).abs() < 1e-9);
    }

    #[test]
    fn logit_loss_agrees_with_probability_loss(seed in any::<u64>(), lambda in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..64).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let y: Vec<f64> = (0..64).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
        let q: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let (l, g) = vessel_core::nn::bce_logits(&z, &[(&y, 1.0), (&q, lambda)]).unwrap();
        let p: Vec<f32> = z.iter().map(|&v| sigmoid(v) as f32).collect();
        let yf: Vec<f32> = y.iter().map(|&v| v as f32).collect();
        let qf: Vec<f32> = q.iter().map(|&v| v as f32).collect();
        prop_assert!((l - joint_bce(&p, &yf, &qf, lambda).unwrap()).abs() < 1e-5);
        // Central differences on the f64 path.
        for i in [0usize, 17, 63] {
            let h = 1e-6;
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let lp = vessel_core::nn::bce_logits(&zp, &[(&y, 1.0), (&q, lambda)]).unwrap().0;
            let lm = vessel_core::nn::bce_logits(&zm, &[(&y, 1.0), (&q, lambda)]).unwrap().0;
            prop_assert!(((lp - lm) / (2.0 * h) - g[i]).abs() < 1e-7);
        }
    }
}

fn tiny_config(k: usize) -> SglConfig {
    SglConfig {
        k,
        lambda: 1.0,
        member_epochs: 1,
        final_epochs: 1,
        patches_per_image: 1,
        optimizer: OptimizerConfig {
            batch_size: 2,
            ..OptimizerConfig::default()
        },
        model: ModelConfig {
            base_channels: 2,
            ..ModelConfig::default()
        },
        augmentation: AugmentationConfig::identity(16),
        ..SglConfig::default()
    }
}

fn tiny_items(n: usize) -> Vec<TrainItem> {
    (0..n)
        .map(|i| TrainItem {
            id: format!("{:02}", i + 1),
            image: image(100 + i as u64, 20),
            label: Mask::from_fn(20, 20, |x, y| (x + i) % 5 == 0 || y == 10),
        })
        .collect()
}

#[test]
fn zero_lambda_trains_exactly_like_the_baseline() {
    let items = tiny_items(3);
    let cfg = tiny_config(1);
    let pseudo = PseudoLabelSet {
        maps: items
            .iter()
            .map(|it| (it.id.clone(), Plane::filled(20, 20, 0.8)))
            .collect(),
        producer: BTreeMap::new(),
    };
    let on: Vec<String> = items.iter().map(|it| it.id.clone()).collect();
    let (base, _) = train_model(&items, None, 0.0, 3, &cfg, "final", on.clone(), None).unwrap();
    let (zero, _) = train_model(&items, Some(&pseudo), 0.0, 3, &cfg, "final", on.clone(), None).unwrap();
    let (one, _) = train_model(&items, Some(&pseudo), 1.0, 3, &cfg, "final", on, None).unwrap();
    assert_eq!(base.weights, zero.weights);
    assert_ne!(base.weights, one.weights);
}

#[test]
fn missing_pseudo_label_is_a_contract_error() {
    let items = tiny_items(2);
    let pseudo = PseudoLabelSet::default();
    let r = train_model(&items, Some(&pseudo), 1.0, 1, &tiny_config(1), "final", vec![], None);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn full_run_records_folds_and_resumes_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let items = tiny_items(4);
    let cfg = tiny_config(2);
    let m = run_sgl(&items, &cfg, dir.path()).unwrap();
    assert_eq!(m.members.len(), 2);
    assert_eq!(m.pseudo_producer.len(), 4);
    for (id, &k) in &m.pseudo_producer {
        assert!(!m.members[k].trained_on.contains(id));
        assert_eq!(m.folds.fold_of(id), Some(k));
    }
    assert_eq!(m.final_model.trained_on, ids(4));
    assert!(m.members.iter().all(|r| r.log.is_some()));
    assert_eq!(RunManifest::load(dir.path()).unwrap(), m);

    let final_bytes = std::fs::read(&m.final_model.checkpoint).unwrap();
    let again = run_sgl(&items, &cfg, dir.path()).unwrap();
    assert_eq!(again, m);
    assert_eq!(std::fs::read(&m.final_model.checkpoint).unwrap(), final_bytes);
}

#[test]
fn single_fold_run_has_no_members() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_sgl(&tiny_items(3), &tiny_config(1), dir.path()).unwrap();
    assert!(m.members.is_empty());
    assert!(m.pseudo_producer.is_empty());
    assert!(!dir.path().join("maps").exists());
}
