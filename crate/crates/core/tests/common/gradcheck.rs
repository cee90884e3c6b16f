//! Central finite-difference gradient checks in double precision.

use med2n::autodiff::{Tape, Tensor, Var};
use med2n::backbone::{EmbeddingNet, Mode};
use med2n::heads::fsl_predict;
use med2n::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES_PER_PRIMITIVE: usize = 50;
pub const REL_TOL: f64 = 1e-5;
const STEP: f64 = 1e-5;
/// Below this norm both gradients count as zero.
const ZERO_NORM: f64 = 1e-9;

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One gradient-check problem: inputs and a function of them on the tape.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so kinks sit far from the FD stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// A shuffled ladder of distinct values so every max has a clear margin.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn distribution_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f64> {
    let mut v: Vec<f64> = (0..n * c).map(|_| rng.random_range(0.05..1.0)).collect();
    for row in v.chunks_exact_mut(c) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::new([n, c], v).unwrap()
}

/// Scalar `sum(out * w)` with a fixed random `w`, so every output element
/// contributes a distinct weight.
fn scalar_loss(case: &Case, inputs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>, seed: u64) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        uniform(&mut rng, &shape)
    });
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss))
}

/// Largest relative error `|g_a - g_n| / max(|g_a|, |g_n|)` (vector norms,
/// one per input) between backprop and central differences.
pub fn max_rel_error(case: &Case, seed: u64) -> Result<f64> {
    let mut weights = None;
    let (mut tape, vars, loss) = scalar_loss(case, &case.inputs, &mut weights, seed)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(v, t)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let eval = |inputs: &[Tensor<f64>], w: &mut Option<Tensor<f64>>| -> Result<f64> {
        let (tape, _, loss) = scalar_loss(case, inputs, w, seed)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        let mut inputs = case.inputs.clone();
        for (j, n) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + STEP;
            let up = eval(&inputs, &mut weights)?;
            inputs[i].data_mut()[j] = x0 - STEP;
            let down = eval(&inputs, &mut weights)?;
            inputs[i].data_mut()[j] = x0;
            *n = (up - down) / (2.0 * STEP);
        }
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < ZERO_NORM { 0.0 } else { diff / denom };
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Random case generator for each differentiable primitive.
pub fn primitives() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> Case)> {
    vec![
        ("add", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 5)];
            Case { inputs: vec![uniform(r, &s), uniform(r, &s)], build: Box::new(|t, v| t.add(v[0], v[1])) }
        }),
        ("add_channel_broadcast", |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 3), dims(r, 1, 3)];
            Case {
                inputs: vec![uniform(r, &s), uniform(r, &[s[1]])],
                build: Box::new(|t, v| t.add(v[0], v[1])),
            }
        }),
        ("add_scalar_broadcast", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            Case { inputs: vec![uniform(r, &s), uniform(r, &[1])], build: Box::new(|t, v| t.add(v[0], v[1])) }
        }),
        ("sub", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 5)];
            Case { inputs: vec![uniform(r, &s), uniform(r, &s)], build: Box::new(|t, v| t.sub(v[0], v[1])) }
        }),
        ("mul", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 5)];
            Case { inputs: vec![uniform(r, &s), uniform(r, &s)], build: Box::new(|t, v| t.mul(v[0], v[1])) }
        }),
        ("mul_channel_broadcast", |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 3), dims(r, 1, 3)];
            Case {
                inputs: vec![uniform(r, &s), uniform(r, &[s[1]])],
                build: Box::new(|t, v| t.mul(v[0], v[1])),
            }
        }),
        ("mul_scalar_broadcast", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            Case { inputs: vec![uniform(r, &s), uniform(r, &[1])], build: Box::new(|t, v| t.mul(v[0], v[1])) }
        }),
        ("scale", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 5)];
            let c = r.random_range(-3.0..3.0);
            Case { inputs: vec![uniform(r, &s)], build: Box::new(move |t, v| Ok(t.scale(v[0], c))) }
        }),
        ("relu", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 6)];
            Case { inputs: vec![off_zero(r, &s)], build: Box::new(|t, v| Ok(t.relu(v[0]))) }
        }),
        ("exp", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 5)];
            Case { inputs: vec![uniform(r, &s)], build: Box::new(|t, v| Ok(t.exp(v[0]))) }
        }),
        ("sum", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 5)];
            Case { inputs: vec![uniform(r, &s)], build: Box::new(|t, v| Ok(t.sum(v[0]))) }
        }),
        ("mean", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 5)];
            Case { inputs: vec![uniform(r, &s)], build: Box::new(|t, v| Ok(t.mean(v[0]))) }
        }),
        ("reshape", |r| {
            let (a, b) = (dims(r, 1, 4), dims(r, 1, 5));
            Case { inputs: vec![uniform(r, &[a, b])], build: Box::new(move |t, v| t.reshape(v[0], &[b, a])) }
        }),
        ("flatten", |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)];
            Case { inputs: vec![uniform(r, &s)], build: Box::new(|t, v| t.flatten(v[0])) }
        }),
        ("concat", |r| {
            let c = dims(r, 1, 4);
            let (a, b) = (dims(r, 1, 3), dims(r, 1, 3));
            Case {
                inputs: vec![uniform(r, &[a, c]), uniform(r, &[b, c])],
                build: Box::new(|t, v| t.concat(&[v[0], v[1]])),
            }
        }),
        ("narrow", |r| {
            let rows = dims(r, 2, 6);
            let start = r.random_range(0..rows);
            let len = r.random_range(1..=rows - start);
            let c = dims(r, 1, 4);
            Case { inputs: vec![uniform(r, &[rows, c])], build: Box::new(move |t, v| t.narrow(v[0], start, len)) }
        }),
        ("column", |r| {
            let (rows, cols) = (dims(r, 1, 6), dims(r, 1, 4));
            let col = r.random_range(0..cols);
            Case { inputs: vec![uniform(r, &[rows, cols])], build: Box::new(move |t, v| t.column(v[0], col)) }
        }),
        ("matmul", |r| {
            let (m, k, n) = (dims(r, 1, 5), dims(r, 1, 5), dims(r, 1, 5));
            Case {
                inputs: vec![uniform(r, &[m, k]), uniform(r, &[k, n])],
                build: Box::new(|t, v| t.matmul(v[0], v[1])),
            }
        }),
        ("sq_dist", |r| {
            let (m, n, d) = (dims(r, 1, 5), dims(r, 1, 5), dims(r, 1, 6));
            Case {
                inputs: vec![uniform(r, &[m, d]), uniform(r, &[n, d])],
                build: Box::new(|t, v| t.sq_dist(v[0], v[1])),
            }
        }),
        ("conv2d", |r| {
            let (b, c, o) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3));
            let k = [1, 3][r.random_range(0..2)];
            let stride = dims(r, 1, 2);
            let pad = r.random_range(0..=k / 2);
            let (h, w) = (dims(r, k.max(2), 6), dims(r, k.max(2), 6));
            Case {
                inputs: vec![uniform(r, &[b, c, h, w]), uniform(r, &[o, c, k, k])],
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)),
            }
        }),
        ("max_pool_2d", |r| {
            let s = [dims(r, 1, 2), dims(r, 1, 3), dims(r, 2, 7), dims(r, 2, 7)];
            let size = r.random_range(1..=2);
            Case { inputs: vec![distinct(r, &s)], build: Box::new(move |t, v| t.max_pool_2d(v[0], size)) }
        }),
        ("global_avg_pool", |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4)];
            Case { inputs: vec![uniform(r, &s)], build: Box::new(|t, v| t.global_avg_pool(v[0])) }
        }),
        ("batch_norm_train", |r| {
            let c = dims(r, 1, 3);
            let s = [dims(r, 2, 4), c, dims(r, 1, 3), dims(r, 1, 3)];
            Case {
                inputs: vec![uniform(r, &s), uniform(r, &[c]), uniform(r, &[c])],
                build: Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2])?.0)),
            }
        }),
        ("batch_norm_eval", |r| {
            let c = dims(r, 1, 3);
            let s = [dims(r, 1, 3), c, dims(r, 1, 3), dims(r, 1, 3)];
            let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
            Case {
                inputs: vec![uniform(r, &s), uniform(r, &[c]), uniform(r, &[c])],
                build: Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var)),
            }
        }),
        ("log_softmax", |r| {
            let s = [dims(r, 1, 4), dims(r, 2, 6)];
            Case { inputs: vec![uniform(r, &s)], build: Box::new(|t, v| t.log_softmax(v[0])) }
        }),
        ("softmax", |r| {
            let s = [dims(r, 1, 4), dims(r, 2, 6)];
            Case { inputs: vec![uniform(r, &s)], build: Box::new(|t, v| t.softmax(v[0])) }
        }),
        ("cross_entropy", |r| {
            let (n, c) = (dims(r, 1, 5), dims(r, 2, 5));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
            Case {
                inputs: vec![uniform(r, &[n, c])],
                build: Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
            }
        }),
        ("kl_div", |r| {
            let (n, c) = (dims(r, 1, 5), dims(r, 2, 5));
            let teacher = distribution_rows(r, n, c);
            Case {
                inputs: vec![uniform(r, &[n, c])],
                build: Box::new(move |t, v| t.kl_div(v[0], &teacher)),
            }
        }),
        ("gumbel_softmax_soft", |r| {
            let (n, c) = (dims(r, 1, 6), 2);
            let mut nr = ChaCha8Rng::seed_from_u64(r.random());
            let noise = med2n::autodiff::gumbel_noise::<f64, _>(&[n, c], &mut nr);
            let tau = r.random_range(0.5..2.0);
            Case {
                inputs: vec![uniform(r, &[n, c])],
                build: Box::new(move |t, v| t.gumbel_softmax_with_noise(v[0], noise.clone(), tau, false)),
            }
        }),
    ]
}

/// Runs every primitive for [`CASES_PER_PRIMITIVE`] random cases and
/// returns `(name, cases, worst relative error)`.
pub fn run_primitive_suite(seed: u64) -> Result<Vec<(&'static str, usize, f64)>> {
    let mut out = Vec::new();
    for (pi, (name, gen)) in primitives().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(pi as u64));
        let mut worst = 0.0f64;
        for case_ix in 0..CASES_PER_PRIMITIVE {
            let case = gen(&mut rng);
            worst = worst.max(max_rel_error(&case, case_ix as u64)?);
        }
        out.push((name, CASES_PER_PRIMITIVE, worst));
    }
    Ok(out)
}

/// Full composite model on a 2-way 1-shot micro-episode: a small backbone
/// with two gated blocks with soft gate masks, prototype head and cross-entropy,
/// differentiated with respect to every parameter at once.
pub fn composite_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = EmbeddingNet::<f64>::build(&[2, 3, 3, 4], 2, [3, 8, 8], &mut rng).unwrap();
    for b in &mut net.blocks {
        b.gamma = Tensor::from_fn(b.gamma.shape().to_vec(), |_| rng.random_range(0.5..1.5));
        b.beta = Tensor::from_fn(b.beta.shape().to_vec(), |_| rng.random_range(-0.2..0.2));
    }
    let images = uniform(&mut rng, &[4, 3, 8, 8]);
    let gate_logits = uniform(&mut rng, &[7, 2]);
    let noise = med2n::autodiff::gumbel_noise::<f64, _>(&[7, 2], &mut rng);
    let mut inputs: Vec<Tensor<f64>> = net.params().into_iter().cloned().collect();
    let n_net = inputs.len();
    inputs.push(Tensor::scalar(rng.random_range(-0.5..0.5)));
    inputs.push(gate_logits);
    let build = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let mut local = net.clone();
        for (p, var) in local.params_mut().into_iter().zip(v) {
            *p = t.value(*var).clone();
        }
        let nv = med2n::backbone::NetVars {
            blocks: v[..n_net]
                .chunks_exact(3)
                .map(|c| med2n::backbone::BlockVars { weight: c[0], gamma: c[1], beta: c[2] })
                .collect(),
        };
        let log_t = v[n_net];
        let soft = t.gumbel_softmax_with_noise(v[n_net + 1], noise.clone(), 1.0, false)?;
        let col = t.column(soft, 1)?;
        let masks = [t.narrow(col, 0, 3)?, t.narrow(col, 3, 4)?];
        let x = t.constant(images.clone());
        let feats = local.forward(t, &nv, x, Some(&masks), Mode::Train)?;
        let s = t.narrow(feats, 0, 2)?;
        let q = t.narrow(feats, 2, 2)?;
        let lp = fsl_predict(t, log_t, s, &[0, 1], q, 2)?;
        t.cross_entropy(lp, &[0, 1])
    };
    Case { inputs, build: Box::new(build) }
}
