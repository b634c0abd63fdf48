// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeSet;
use std::path::Path;

use common::{write_uniform_dataset, Lcg};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resscale::ablate::*;
use resscale::datahub::{load_dataset, sweep_center_activations, DatasetSlice, EvalScaleTransform};
use resscale::netgraph::arch::RESNET_MINI;
use resscale::netgraph::synthetic::{center_classifier, center_readout};
use resscale::netgraph::{NetworkHandle, Preprocess};
use resscale::{BlockAddress, Error, TapPoint, Tensor};

const BLOCK: BlockAddress = BlockAddress { stage: 1, block: 0 };

const STEM_ROWS: [[f64; 3]; 6] = [
    [1.0 / 3.0; 3],
    [1.0 / 3.0; 3],
    [1.0 / 3.0; 3],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
];

fn head_rows() -> Vec<Vec<f64>> {
    vec![vec![0.0; 6], vec![2.0, 1.0, 1.0, 0.0, 0.0, 0.3]]
}

const HEAD_BIAS: [f64; 2] = [0.0, -2.15];

fn readout() -> NetworkHandle<f64> {
    NetworkHandle::new("readout", 16, Preprocess::identity(3), center_readout(&STEM_ROWS, &head_rows(), &HEAD_BIAS)).unwrap()
}

/// Uniform-color images labeled by luminance, with every seventh label
/// flipped. Returns the colors in slice order.
fn luminance_dataset(root: &Path, n: usize, seed: u64) -> Vec<([u8; 3], usize)> {
    let mut rng = Lcg(seed);
    let mut classes: [Vec<[u8; 3]>; 2] = Default::default();
    for i in 0..n {
        let rgb = [0, 1, 2].map(|_| (rng.next_f64() * 255.0) as u8);
        let lum = rgb.iter().map(|&v| v as f64).sum::<f64>() / 765.0;
        let label = usize::from(lum > 0.5) ^ usize::from(i % 7 == 3);
        classes[label].push(rgb);
    }
    write_uniform_dataset(root, &[("a", classes[0].clone()), ("b", classes[1].clone())], 20);
    classes[0].iter().map(|&c| (c, 0)).chain(classes[1].iter().map(|&c| (c, 1))).collect()
}

/// Center Post values of the readout network for a uniform color.
fn oracle_post(rgb: [u8; 3]) -> Vec<f64> {
    STEM_ROWS.iter().map(|row| (0..3).map(|k| row[k] * rgb[k] as f64 / 255.0).sum::<f64>().max(0.0)).collect()
}

fn oracle_means(data: &[([u8; 3], usize)]) -> Vec<f64> {
    let mut m = [0.0; 6];
    for (rgb, _) in data {
        oracle_post(*rgb).iter().enumerate().for_each(|(c, v)| m[c] += v);
    }
    m.iter().map(|v| v / data.len() as f64).collect()
}

fn oracle_accuracy(data: &[([u8; 3], usize)], ablated: &[usize], means: &[f64]) -> f64 {
    let rows = head_rows();
    let correct = data
        .iter()
        .filter(|(rgb, label)| {
            let mut post = oracle_post(*rgb);
            ablated.iter().for_each(|&c| post[c] = means[c]);
            let logits: Vec<f64> = rows.iter().zip(HEAD_BIAS).map(|(r, b)| r.iter().zip(&post).map(|(w, x)| w * x).sum::<f64>() + b).collect();
            usize::from(logits[1] > logits[0]) == *label
        })
        .count();
    correct as f64 / data.len() as f64
}

fn subsets(pool: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &c) in pool.iter().enumerate() {
        for mut rest in subsets(&pool[i + 1..], k - 1) {
            rest.insert(0, c);
            out.push(rest);
        }
    }
    out
}

fn setup(n: usize, seed: u64) -> (tempfile::TempDir, DatasetSlice, Vec<([u8; 3], usize)>) {
    let dir = tempfile::tempdir().unwrap();
    let data = luminance_dataset(dir.path(), n, seed);
    let slice = load_dataset(dir.path(), 1.0, 0).unwrap();
    (dir, slice, data)
}

#[test]
fn ablation_only_touches_listed_channels() {
    let h = NetworkHandle::new("mini", 32, Preprocess::imagenet(), RESNET_MINI.random_init::<f64>(2)).unwrap();
    let addr = BlockAddress::new(2, 0);
    let mut rng = Lcg(9);
    let x = Tensor::from_fn([2, 3, 32, 32], |_, _, _, _| rng.next_f64());
    let means: Vec<f64> = (0..16).map(|c| 0.1 * c as f64).collect();
    let spec = AblationSpec::from_means(addr, [3, 7, 11], &means).unwrap();
    let net = apply_mean_ablation(&h, &spec).unwrap();
    let post = h.resolve_tap(addr, TapPoint::Post).unwrap();
    let clean = h.observe(&x, post, &[]).unwrap();
    let ablated = net.observe(&x, post).unwrap();
    for b in 0..2 {
        for c in 0..16 {
            if spec.channels.contains(&c) {
                assert!(ablated.plane(b, c).iter().all(|&v| v == means[c]));
            } else {
                assert_eq!(ablated.plane(b, c), clean.plane(b, c));
            }
        }
    }
    // Upstream taps are untouched; downstream ones change.
    let upstream = h.resolve_tap(BlockAddress::new(1, 1), TapPoint::Post).unwrap();
    assert_eq!(net.observe(&x, upstream).unwrap(), h.observe(&x, upstream, &[]).unwrap());
    assert_ne!(net.logits(&x).unwrap(), h.logits(&x, &[]).unwrap());

    // Idempotent, order-free, and a no-op when empty.
    let twice = net.ablate(&spec).unwrap();
    assert_eq!(twice.logits(&x).unwrap(), net.logits(&x).unwrap());
    let shuffled = AblationSpec::from_means(addr, [11, 3, 7, 3], &means).unwrap();
    assert_eq!(shuffled, spec);
    let empty = AblationSpec::from_means(addr, [], &means).unwrap();
    assert_eq!(apply_mean_ablation(&h, &empty).unwrap().logits(&x).unwrap(), h.logits(&x, &[]).unwrap());
}

#[test]
fn invalid_specs_are_rejected() {
    let h = readout();
    let means = vec![0.5; 6];
    assert!(matches!(apply_mean_ablation(&h, &AblationSpec::from_means(BLOCK, [6], &[0.5; 7]).unwrap()), Err(Error::InvalidChannel { .. })));
    assert!(matches!(AblationSpec::from_means(BLOCK, [6], &means), Err(Error::MissingMean(6))));
    let (_dir, slice, _) = setup(10, 1);
    let pre = sweep_center_activations(&h, &slice, BLOCK, TapPoint::Pre, None, 4).unwrap();
    assert!(matches!(AblationSpec::from_cache(BLOCK, [0], &pre), Err(Error::AddressMismatch { .. })));
    let post = sweep_center_activations(&h, &slice, BLOCK, TapPoint::Post, None, 4).unwrap();
    assert_eq!(AblationSpec::from_cache(BLOCK, [0], &post).unwrap().channel_means[&0], post.channel_means()[0]);
}

#[test]
fn accuracy_matches_closed_form_oracle() {
    let (_dir, slice, data) = setup(40, 2);
    let h = readout();
    let means = post_center_means(&h, &slice, BLOCK, 8, None).unwrap();
    let want = oracle_means(&data);
    for c in 0..6 {
        assert!((means[c] - want[c]).abs() < 1e-6);
    }
    for set in [vec![], vec![0], vec![1, 2], vec![0, 5], vec![3, 4, 5]] {
        let net = apply_mean_ablation(&h, &AblationSpec::from_means(BLOCK, set.iter().copied(), &means).unwrap()).unwrap();
        for p in [0, 10, 50] {
            let acc = evaluate_accuracy(&net, &slice, &EvalScaleTransform::new(p).with_resolutions(18, 16), 7).unwrap();
            assert_eq!(acc, oracle_accuracy(&data, &set, &want), "set {set:?} at {p}%");
        }
    }
}

#[test]
fn center_classifier_ablation_collapses_to_one_class() {
    let dir = tempfile::tempdir().unwrap();
    write_uniform_dataset(dir.path(), &[("dark", vec![[10, 20, 30], [60, 60, 60], [100, 90, 80]]), ("light", vec![[200, 210, 220], [250, 250, 250]])], 12);
    let slice = load_dataset(dir.path(), 1.0, 0).unwrap();
    let h = NetworkHandle::new("cc", 8, Preprocess::identity(3), center_classifier::<f32>()).unwrap();
    let t = EvalScaleTransform::canonical().with_resolutions(9, 8);
    assert_eq!(evaluate_accuracy(&AblatedNetwork::unablated(&h), &slice, &t, 2).unwrap(), 1.0);
    // Ablating luminance with a dark mean predicts "dark" everywhere.
    let dark = apply_mean_ablation(&h, &AblationSpec::from_means(BLOCK, [0], &[0.3, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    assert_eq!(evaluate_accuracy(&dark, &slice, &t, 2).unwrap(), 0.6);
    let light = apply_mean_ablation(&h, &AblationSpec::from_means(BLOCK, [0], &[0.7, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    assert_eq!(evaluate_accuracy(&light, &slice, &t, 2).unwrap(), 0.4);
    let unused = apply_mean_ablation(&h, &AblationSpec::from_means(BLOCK, [1, 2, 3], &[0.0; 4]).unwrap()).unwrap();
    assert_eq!(evaluate_accuracy(&unused, &slice, &t, 2).unwrap(), 1.0);
}

#[test]
fn screening_agrees_with_exhaustive_enumeration() {
    let (_dir, slice, data) = setup(30, 3);
    let h = readout();
    let means = post_center_means(&h, &slice, BLOCK, 8, None).unwrap();
    let oracle = oracle_means(&data);
    let evaluator = Evaluator::new(&h, &slice, &[], 8, true).unwrap();
    for (passing, target, relaxation) in [
        (vec![0], None, 0.0),
        (vec![0, 5], None, 0.0),
        (vec![1], None, 0.05),
        (vec![0], Some(0.0), 0.0),
        (vec![0, 3], Some(0.0), 0.01),
    ] {
        let passing: BTreeSet<usize> = passing.into_iter().collect();
        let ps: Vec<usize> = passing.iter().copied().collect();
        let target = target.unwrap_or_else(|| oracle_accuracy(&data, &ps, &oracle));
        let pool: Vec<usize> = (0..6).filter(|c| !passing.contains(c)).collect();
        let all = subsets(&pool, passing.len());
        let valid: Vec<&Vec<usize>> = all.iter().filter(|s| oracle_accuracy(&data, s, &oracle) <= target + relaxation).collect();
        let screening = ControlScreening { relaxation, budget: 200 };
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match screen_random_control(&h, &evaluator, BLOCK, passing.len(), &passing, &means, target, &screening, &mut rng) {
                Ok(set) => {
                    assert!(valid.contains(&&set.channels), "{passing:?}: {set:?} not among {valid:?}");
                    assert_eq!(set.accuracy, oracle_accuracy(&data, &set.channels, &oracle));
                    assert!(set.attempts >= 1 && set.attempts <= all.len());
                }
                Err(Error::ScreeningExhausted { attempts, best, bound }) => {
                    assert!(valid.is_empty(), "{passing:?}: exhausted although {valid:?} qualify");
                    assert_eq!(attempts, all.len());
                    assert_eq!(bound, target + relaxation);
                    let min = all.iter().map(|s| oracle_accuracy(&data, s, &oracle)).fold(f64::INFINITY, f64::min);
                    assert_eq!(best, min);
                }
                Err(e) => panic!("{e}"),
            }
        }
    }
}

#[test]
fn screening_budget_and_pool_limits() {
    let (_dir, slice, _) = setup(12, 4);
    let h = readout();
    let means = vec![0.5; 6];
    let evaluator = Evaluator::new(&h, &slice, &[], 8, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let passing: BTreeSet<usize> = [0, 1, 2, 3].into();
    let err = screen_random_control(&h, &evaluator, BLOCK, 3, &passing, &means, 1.0, &ControlScreening::default(), &mut rng).unwrap_err();
    assert!(matches!(err, Error::PoolTooSmall { pool: 2, k: 3 }));
    let passing: BTreeSet<usize> = [0].into();
    let tight = ControlScreening { relaxation: 0.0, budget: 2 };
    let err = screen_random_control(&h, &evaluator, BLOCK, 1, &passing, &means, -1.0, &tight, &mut rng).unwrap_err();
    assert!(matches!(err, Error::ScreeningExhausted { attempts: 2, .. }));
    let none = screen_random_control(&h, &evaluator, BLOCK, 0, &BTreeSet::new(), &means, 0.7, &tight, &mut rng).unwrap();
    assert!(none.channels.is_empty() && none.accuracy == 0.7);
}

#[test]
fn experiment_is_reproducible_and_consistent() {
    let (dir, slice, data) = setup(30, 5);
    let h = readout();
    let means = post_center_means(&h, &slice, BLOCK, 8, None).unwrap();
    let passing: BTreeSet<usize> = [0].into();
    let config = AblationConfig {
        trials: 4,
        percentages: vec![10, 30],
        seed: 7,
        screening: ControlScreening { relaxation: 0.05, budget: 50 },
        batch_size: 8,
        preload: true,
    };
    let a = run_ablation_experiment(&h, &slice, BLOCK, &passing, &means, &config).unwrap();
    let b = run_ablation_experiment(&h, &slice, BLOCK, &passing, &means, &AblationConfig { preload: false, ..config.clone() }).unwrap();
    assert_eq!(a, b);
    let c = run_ablation_experiment(&h, &slice, BLOCK, &passing, &means, &AblationConfig { seed: 8, ..config.clone() }).unwrap();
    assert_ne!(a.trial_seeds, c.trial_seeds);

    let oracle = oracle_means(&data);
    assert_eq!(a.no_scale_acc, oracle_accuracy(&data, &[0], &oracle));
    assert_eq!(a.unablated_acc[&0], oracle_accuracy(&data, &[], &oracle));
    assert_eq!(a.control_sets.len(), 4);
    for (set, accs) in a.control_sets.iter().zip(&a.rand_ablate_accs) {
        assert_eq!(set.channels.len(), 1);
        assert!(!passing.contains(&set.channels[0]));
        assert!(set.accuracy <= a.no_scale_acc + 0.05 + 1e-12);
        assert_eq!(accs.keys().copied().collect::<Vec<_>>(), [10, 30]);
    }
    for p in [10, 30] {
        let per: Vec<f64> = a.rand_ablate_accs.iter().map(|m| a.scale_ablate_acc[&p] / m[&p]).collect();
        assert!((a.ratios[&p] - per.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        assert!((a.ratio_standard_errors[&p] - standard_error(&per)).abs() < 1e-12);
    }

    let json = dir.path().join("report.json");
    a.write_json(&json).unwrap();
    assert_eq!(AblationReport::read_json(&json).unwrap(), a);
    let csv_path = dir.path().join("trials.csv");
    a.write_csv(&csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "block,trial,percentage,scale_ablate_acc,rand_ablate_acc,ratio");
    assert_eq!(text.lines().count(), 1 + 4 * 3);

    assert!(matches!(run_ablation_experiment(&h, &slice, BLOCK, &passing, &means[..5], &config), Err(Error::MissingMean(5))));
    assert!(run_ablation_experiment(&h, &slice, BLOCK, &passing, &means, &AblationConfig { trials: 0, ..config }).is_err());
}

#[test]
fn default_relaxation_per_block() {
    assert_eq!(default_relaxation(BlockAddress::new(2, 1)), 0.0);
    assert_eq!(default_relaxation(BlockAddress::new(3, 1)), 0.01);
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
}

proptest! {
    #[test]
    fn ratio_is_the_mean_of_per_trial_ratios(scale in 0.0f64..1.0, rand in prop::collection::vec(0.01f64..1.0, 1..12), lambda in 0.1f64..10.0) {
        let want = rand.iter().map(|r| scale / r).sum::<f64>() / rand.len() as f64;
        prop_assert!((aggregate_ratio(scale, &rand) - want).abs() < 1e-9);
        prop_assert!((aggregate_ratio(lambda * scale, &rand) - lambda * aggregate_ratio(scale, &rand)).abs() < 1e-9);
        if rand.len() >= 2 {
            let mean = rand.iter().sum::<f64>() / rand.len() as f64;
            let sd = (rand.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rand.len() - 1) as f64).sqrt();
            prop_assert!((standard_error(&rand) - sd / (rand.len() as f64).sqrt()).abs() < 1e-12);
        }
    }
}
