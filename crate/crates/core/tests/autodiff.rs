mod common;

use common::gradcheck::{max_rel_error, Case};
use med2n::autodiff::{adam_step, gumbel_noise, AdamConfig, AdamState, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn matmul_gradient_of_sum_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let case = Case {
        inputs: vec![random(&mut rng, &[3, 3]), random(&mut rng, &[3, 3])],
        build: Box::new(|t, v| {
            let p = t.matmul(v[0], v[1])?;
            Ok(t.sum(p))
        }),
    };
    assert!(max_rel_error(&case, 0).unwrap() < 1e-6);
}

#[test]
fn conv_kernel_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[1, 1, 4, 4]);
    let case = Case {
        inputs: vec![random(&mut rng, &[2, 1, 3, 3])],
        build: Box::new(move |t, v| {
            let xv = t.constant(x.clone());
            t.conv2d(xv, v[0], 1, 1)
        }),
    };
    assert!(max_rel_error(&case, 1).unwrap() < 1e-6);
}

#[test]
fn composite_conv_relu_linear_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 2, 5, 5]);
    let case = Case {
        inputs: vec![
            random(&mut rng, &[3, 2, 3, 3]),
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[4]),
        ],
        build: Box::new(move |t, v| {
            let xv = t.constant(x.clone());
            let h = t.conv2d(xv, v[0], 1, 1)?;
            let h = t.relu(h);
            let p = t.global_avg_pool(h)?;
            let logits = t.matmul(p, v[1])?;
            let bias = t.reshape(v[2], &[1, 4])?;
            let ones = t.constant(Tensor::full([2, 1], 1.0));
            let bias = t.matmul(ones, bias)?;
            let logits = t.add(logits, bias)?;
            let lp = t.log_softmax(logits)?;
            t.cross_entropy(lp, &[1, 3])
        }),
    };
    assert!(max_rel_error(&case, 2).unwrap() < 1e-5);
}

#[test]
fn cross_entropy_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lp = random(&mut rng, &[4, 3]);
    let labels = [2, 0, 1, 1];
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(lp.clone());
    let ce = tape.cross_entropy(v, &labels).unwrap();
    let mut expected = 0.0;
    for (i, l) in labels.iter().enumerate() {
        expected -= lp.data()[i * 3 + l];
    }
    expected /= 4.0;
    assert!((tape.value(ce).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn kl_divergence_matches_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(&mut rng, &[3, 4]);
    let mut teacher = Tensor::from_fn([3, 4], |_| rng.random_range(0.01..1.0));
    for row in teacher.data_mut().chunks_exact_mut(4) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(logits.clone());
    let lp = tape.log_softmax(x).unwrap();
    let kl = tape.kl_div(lp, &teacher).unwrap();
    let got = tape.value(kl).data()[0];

    let mut total = 0.0;
    for r in 0..3 {
        let z = &logits.data()[r * 4..r * 4 + 4];
        let norm: f64 = z.iter().map(|v| v.exp()).sum();
        for c in 0..4 {
            let q = z[c].exp() / norm;
            let p = teacher.data()[r * 4 + c];
            total += p * (p / q).ln();
        }
    }
    let expected = total / 3.0;
    assert!(((got - expected) / expected).abs() < 1e-10, "{got} vs {expected}");
}

#[test]
fn gumbel_argmax_is_fair_for_equal_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = 10_000;
    let mut first = 0usize;
    for _ in 0..draws {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros([1, 2]));
        let s = tape.gumbel_softmax(l, 1.0, &mut rng, true).unwrap();
        if tape.value(s).data()[0] == 1.0 {
            first += 1;
        }
    }
    let freq = first as f64 / draws as f64;
    assert!((freq - 0.5).abs() < 0.02, "{freq}");
}

#[test]
fn saturated_logits_always_pick_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::new([1, 2], vec![1000.0, -1000.0]).unwrap());
        let s = tape.gumbel_softmax(l, 1.0, &mut rng, true).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0]);
    }
}

#[test]
fn straight_through_gradient_equals_soft_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let logits = random(&mut rng, &[5, 2]);
        let noise = gumbel_noise::<f64, _>(&[5, 2], &mut rng);
        let w = random(&mut rng, &[5, 2]);
        let grad = |hard: bool| {
            let mut tape = Tape::<f64>::new();
            let l = tape.leaf(logits.clone(), true);
            let s = tape.gumbel_softmax_with_noise(l, noise.clone(), 0.7, hard).unwrap();
            let wv = tape.constant(w.clone());
            let p = tape.mul(s, wv).unwrap();
            let loss = tape.sum(p);
            tape.backward(loss).unwrap();
            (tape.value(s).clone(), tape.grad(l).unwrap().to_vec())
        };
        let (hard_val, hard_grad) = grad(true);
        let (_, soft_grad) = grad(false);
        assert_eq!(hard_grad, soft_grad);
        for row in hard_val.data().chunks_exact(2) {
            assert!(row == [1.0, 0.0] || row == [0.0, 1.0]);
        }
    }
}

/// With a constant gradient both bias-corrected moments are exact, so each
/// step moves a parameter by `-lr * g / (|g| + eps)`.
#[test]
fn adam_two_steps_match_closed_form() {
    let cfg = AdamConfig::default();
    let g = vec![0.5, -2.0, 1e-3, 3.0];
    let mut p = Tensor::<f64>::new([4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
    let start = p.clone();
    let mut state = AdamState::new(&[&p]);
    for _ in 0..2 {
        adam_step(&mut [&mut p], &[&g], &mut state, &cfg).unwrap();
    }
    for ((w, w0), gi) in p.data().iter().zip(start.data()).zip(&g) {
        let expected = w0 - 2.0 * cfg.lr * gi / (gi.abs() + cfg.eps);
        assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let cfg = AdamConfig::with_lr(0.001);
    let mut p = Tensor::<f64>::new([1], vec![1.0]).unwrap();
    let mut state = AdamState::new(&[&p]);
    adam_step(&mut [&mut p], &[&[1.0]], &mut state, &cfg).unwrap();
    let delta = p.data()[0] - 1.0;
    assert!((delta + 0.001 / (1.0 + cfg.eps)).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_populates_every_reachable_leaf(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(random(&mut rng, &[rows, cols]), true);
        let b = tape.leaf(random(&mut rng, &[cols, rows]), true);
        let m = tape.matmul(a, b).unwrap();
        let s = tape.softmax(m).unwrap();
        let loss = tape.mean(s);
        tape.backward(loss).unwrap();
        prop_assert_eq!(tape.grad(a).unwrap().len(), rows * cols);
        prop_assert_eq!(tape.grad(b).unwrap().len(), rows * cols);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([rows, cols], |_| rng.random_range(-50.0..50.0)));
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks_exact(cols) {
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative(rows in 1usize..4, cols in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&mut rng, &[rows, cols]));
        let lp = tape.log_softmax(x).unwrap();
        let y = tape.constant(random(&mut rng, &[rows, cols]));
        let t = tape.softmax(y).unwrap();
        let teacher = tape.value(t).clone();
        let kl = tape.kl_div(lp, &teacher).unwrap();
        prop_assert!(tape.value(kl).data()[0] >= -1e-12);
    }
}
