mod common;

use common::fixture::{student, teachers, tiny_benchmark, tiny_config};
use med2n::autodiff::{argmax, Tensor};
use med2n::data::{sample_episode, DatasetSplit};
use med2n::evaluator::{
    combine_paths, episode_rng, evaluate, evaluate_many, evaluate_source, mean_ci95, EvalSettings, Strategy,
};
use med2n::gate::Domain;
use med2n::trainer::{ModelBundle, Stage, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn settings(episodes: usize) -> EvalSettings {
    EvalSettings { n_way: 3, k_shot: 2, m_query: 3, episodes, seed: 77 }
}

fn trained_student() -> (med2n::data::Benchmark, ModelBundle) {
    let b = tiny_benchmark();
    let cfg = TrainConfig { student_epochs: 1, ..tiny_config() };
    let t = teachers(&b, &cfg);
    let mut s = student(&t, &b, &cfg);
    med2n::trainer::train_student(&mut s, &t.st, &t.tt, &b.source_train, &b.target_aux, &cfg, &mut |_, _| Ok(()))
        .unwrap();
    (b, s)
}

fn noise_split(seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 5;
    let per_class = 12;
    let shape = [3, 32, 32];
    let n = classes * per_class;
    let images = (0..n * 3 * 32 * 32).map(|_| rng.random::<f32>()).collect();
    let labels = (0..n).map(|i| 100 + i % classes).collect();
    DatasetSplit::new("noise", Domain::Target, shape, (100..100 + classes).collect(), images, labels).unwrap()
}

#[test]
fn identical_paths_make_both_equal_either() {
    let lp = Tensor::new([2, 3], vec![-0.2f32, -2.0, -3.0, -1.5, -0.4, -2.2]).unwrap();
    let both = combine_paths(&lp, &lp).unwrap();
    for (p, l) in both.data().iter().zip(lp.data()) {
        assert_eq!(*p, l.exp());
    }
    for row in both.data().chunks_exact(3) {
        assert_eq!(argmax(row), argmax(&row.iter().map(|v| v.ln()).collect::<Vec<_>>()));
    }
}

#[test]
fn untrained_model_on_uninformative_images_is_at_chance() {
    let cfg = tiny_config();
    let mut rng = cfg.stream(Stage::Init);
    let split = noise_split(3);
    let model = ModelBundle::new_pretrained(&cfg, &split.class_ids, &mut rng).unwrap();
    let s = EvalSettings { n_way: 5, k_shot: 2, m_query: 4, episodes: 300, seed: 5 };
    let r = evaluate(&model, &split, Strategy::Std, &s).unwrap();
    assert!((r.mean - 20.0).abs() < 3.0 * r.ci95, "{} ± {}", r.mean, r.ci95);
}

#[test]
fn report_statistics_follow_their_definitions() {
    let (b, s) = trained_student();
    for r in evaluate_many(&s, &b.target_test, &Strategy::ALL, &settings(40)).unwrap() {
        assert_eq!(r.per_episode.len(), 40);
        let mean = r.per_episode.iter().sum::<f64>() / 40.0;
        let var = r.per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 39.0;
        assert!((r.mean - mean).abs() < 1e-9);
        assert!((r.ci95 - 1.96 * (var / 40.0).sqrt()).abs() < 1e-9);
        assert!(r.per_episode.iter().all(|a| (0.0..=100.0).contains(a)));
        assert_eq!(r.domain, Domain::Target);
    }
}

/// Brute-force reference: each episode is redrawn from its substream,
/// both paths are predicted separately, probabilities are averaged query
/// by query.
#[test]
fn both_strategy_matches_a_per_query_oracle() {
    let (b, s) = trained_student();
    let set = settings(30);
    let report = evaluate(&s, &b.target_test, Strategy::Both, &set).unwrap();
    let masks = s.gates.as_ref().unwrap().infer_masks(Domain::Target);
    for (i, got) in report.per_episode.iter().enumerate() {
        let mut rng = episode_rng(set.seed, i);
        let ep = sample_episode(&b.target_test, set.n_way, set.k_shot, set.m_query, &mut rng).unwrap();
        let std = s.predict(&ep, None).unwrap();
        let dsg = s.predict(&ep, Some(&masks)).unwrap();
        let mut hits = 0;
        for q in 0..ep.query_labels.len() {
            let row = |t: &Tensor| t.data()[q * set.n_way..(q + 1) * set.n_way].to_vec();
            let (a, c) = (row(&std), row(&dsg));
            let soft = |r: &[f32]| {
                let z: f64 = r.iter().map(|v| (*v as f64).exp()).sum();
                r.iter().map(|v| (*v as f64).exp() / z).collect::<Vec<f64>>()
            };
            let (pa, pc) = (soft(&a), soft(&c));
            let avg: Vec<f64> = pa.iter().zip(&pc).map(|(x, y)| 0.5 * (x + y)).collect();
            let best = (0..set.n_way).fold(0, |bi, k| if avg[k] > avg[bi] { k } else { bi });
            if best == ep.query_labels[q] {
                hits += 1;
            }
        }
        let expected = 100.0 * hits as f64 / ep.query_labels.len() as f64;
        assert_eq!(*got, expected, "episode {i}");
    }
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let (b, s) = trained_student();
    let before = s.clone();
    let a = evaluate_many(&s, &b.target_test, &Strategy::ALL, &settings(20)).unwrap();
    let c = evaluate_many(&s, &b.target_test, &Strategy::ALL, &settings(20)).unwrap();
    assert_eq!(a, c);
    assert_eq!(s.params(), before.params());
    assert_eq!(s.buffers(), before.buffers());
}

#[test]
fn gated_strategies_need_a_gate_matrix() {
    let b = tiny_benchmark();
    let cfg = tiny_config();
    let t = teachers(&b, &cfg);
    assert!(evaluate(&t.st, &b.target_test, Strategy::Std, &settings(2)).is_ok());
    let err = evaluate(&t.st, &b.target_test, Strategy::Both, &settings(2)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn source_evaluation_uses_the_source_mask_and_rejects_target_splits() {
    let (b, s) = trained_student();
    assert!(evaluate_source(&s, &b.target_test, Strategy::Both, &settings(2)).is_err());
    let r = evaluate_source(&s, &b.source_test, Strategy::Dsg, &settings(10)).unwrap();
    assert_eq!(r.domain, Domain::Source);
    let masks = s.gates.as_ref().unwrap().infer_masks(Domain::Source);
    let set = settings(10);
    for (i, got) in r.per_episode.iter().enumerate() {
        let mut rng = episode_rng(set.seed, i);
        let ep = sample_episode(&b.source_test, set.n_way, set.k_shot, set.m_query, &mut rng).unwrap();
        let lp = s.predict(&ep, Some(&masks)).unwrap();
        let hits = lp
            .data()
            .chunks_exact(set.n_way)
            .zip(&ep.query_labels)
            .filter(|(row, l)| argmax(row) == **l)
            .count();
        assert_eq!(*got, 100.0 * hits as f64 / ep.query_labels.len() as f64);
    }
}

#[test]
fn confidence_of_a_constant_sample_is_zero() {
    assert_eq!(mean_ci95(&[40.0; 10]), (40.0, 0.0));
    assert_eq!(mean_ci95(&[]), (0.0, 0.0));
}

proptest! {
    #[test]
    fn combined_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = |rng: &mut ChaCha8Rng| {
            let mut t = Tensor::from_fn([rows, cols], |_| rng.random_range(-5.0f32..5.0));
            for row in t.data_mut().chunks_exact_mut(cols) {
                let m = row.iter().cloned().fold(f32::MIN, f32::max);
                let z = row.iter().map(|v| (v - m).exp()).sum::<f32>().ln() + m;
                row.iter_mut().for_each(|v| *v -= z);
            }
            t
        };
        let (a, c) = (lp(&mut rng), lp(&mut rng));
        let both = combine_paths(&a, &c).unwrap();
        for row in both.data().chunks_exact(cols) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
