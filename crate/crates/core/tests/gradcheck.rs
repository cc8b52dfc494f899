//! Analytic gradients against central finite differences in f64.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use elastic_core::autodiff::{Tape, Var};
use elastic_core::graph::{GraphBuilder, ModelGraph, ParamKey};
use elastic_core::{Result, Tensor};

const H: f64 = 1e-4;
const TOL: f64 = 1e-5;

/// Reduces any op output to a scalar with fixed pseudo-random weights so
/// every output coordinate contributes a distinct amount.
fn scalar_loss(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let v = tape.value(out);
    if v.numel() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let w: Vec<f64> = (0..v.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(v.shape(), w)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn loss_at(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = scalar_loss(&mut tape, out).unwrap();
    tape.value(loss).data()[0]
}

/// Largest norm-wise relative error `‖a − n‖ / (‖a‖ + ‖n‖)` over inputs.
fn worst_error(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = scalar_loss(&mut tape, out).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads[v].data();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for j in 0..inputs[i].numel() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] += H;
            let up = loss_at(&shifted, build);
            shifted[i].data_mut()[j] -= 2.0 * H;
            let down = loss_at(&shifted, build);
            let numeric = (up - down) / (2.0 * H);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
        let denom = na.sqrt() + nn.sqrt();
        if denom > 1e-12 {
            worst = worst.max(diff.sqrt() / denom);
        }
    }
    worst
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero (ReLU kink).
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, rng).map(|v| v.signum() * (0.05 + v.abs()))
}

/// Distinct values at least 0.01 apart (max-pool ties).
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, order.iter().map(|&k| k as f64 * 0.01 - 0.3).collect()).unwrap()
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, rng).map(|v| 0.5 + v.abs())
}

fn assert_close(kind: &str, err: f64) {
    assert!(err <= TOL, "{}: relative gradient error {:e}", kind, err);
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 48,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x6ead),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn conv2d(n in 1usize..3, cin in 1usize..4, cout in 1usize..4, hw in 3usize..6, k in 1usize..4,
              stride in 1usize..3, pad in 0usize..2, bias: bool, seed: u64) {
        prop_assume!(k <= hw + 2 * pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = vec![random(&[n, cin, hw, hw + 1], &mut rng), random(&[cout, cin, k, k], &mut rng)];
        if bias {
            inputs.push(random(&[cout], &mut rng));
        }
        let build = move |t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad);
        assert_close("conv2d", worst_error(&inputs, &build));
    }

    #[test]
    fn linear(n in 1usize..4, fin in 1usize..6, fout in 1usize..5, bias: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = vec![random(&[n, fin], &mut rng), random(&[fout, fin], &mut rng)];
        if bias {
            inputs.push(random(&[fout], &mut rng));
        }
        let build = |t: &mut Tape<f64>, v: &[Var]| t.linear(v[0], v[1], v.get(2).copied());
        assert_close("linear", worst_error(&inputs, &build));
    }

    #[test]
    fn batchnorm(n in 2usize..4, c in 1usize..4, hw in 1usize..4, training: bool, fixed_bits: u8, seed: u64) {
        // with fewer than four values per channel the normalized output is
        // nearly constant and the check compares rounding noise
        prop_assume!(!training || n * hw * hw >= 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&[n, c, hw, hw], &mut rng), random(&[c], &mut rng), random(&[c], &mut rng)];
        let mean = random(&[c], &mut rng);
        let var = positive(&[c], &mut rng);
        let fixed: Vec<bool> = (0..c).map(|i| fixed_bits >> i & 1 == 1).collect();
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            t.batchnorm2d_fixed(v[0], v[1], v[2], &mean, &var, training, Some(&fixed))
        };
        assert_close("batchnorm2d", worst_error(&inputs, &build));
    }

    #[test]
    fn relu(shape in proptest::collection::vec(1usize..4, 1..4), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![off_zero(&shape, &mut rng)];
        let build = |t: &mut Tape<f64>, v: &[Var]| Ok(t.relu(v[0]));
        assert_close("relu", worst_error(&inputs, &build));
    }

    #[test]
    fn pools(n in 1usize..3, c in 1usize..3, hw in 2usize..6, k in 1usize..3, stride in 1usize..3, seed: u64) {
        prop_assume!(k <= hw);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![distinct(&[n, c, hw, hw], &mut rng)];
        let max = move |t: &mut Tape<f64>, v: &[Var]| t.maxpool2d(v[0], k, stride);
        assert_close("maxpool2d", worst_error(&inputs, &max));
        let avg = move |t: &mut Tape<f64>, v: &[Var]| t.avgpool2d(v[0], k, stride);
        assert_close("avgpool2d", worst_error(&inputs, &avg));
    }

    #[test]
    fn add_mul_flatten(n in 1usize..3, c in 1usize..3, hw in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&[n, c, hw, hw], &mut rng), random(&[n, c, hw, hw], &mut rng)];
        let build = |t: &mut Tape<f64>, v: &[Var]| {
            let s = t.add(v[0], v[1])?;
            let p = t.mul(s, v[0])?;
            Ok(t.flatten(p))
        };
        assert_close("add/mul/flatten", worst_error(&inputs, &build));
    }

    #[test]
    fn cross_entropy(n in 1usize..5, classes in 2usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&[n, classes], &mut rng).map(|v| 3.0 * v)];
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let build = move |t: &mut Tape<f64>, v: &[Var]| t.cross_entropy(v[0], &labels);
        assert_close("cross_entropy", worst_error(&inputs, &build));
    }
}

/// Whole-graph check through `loss_gradients`, which runs in eval mode.
fn graph_error(model: &ModelGraph<f64>, batch: &Tensor<f64>, labels: &[usize], keys: &[ParamKey]) -> f64 {
    let (_, grads) = model.loss_gradients(batch, labels).unwrap();
    let loss = |m: &ModelGraph<f64>| {
        let logits = m.predict(batch).unwrap();
        elastic_core::trainer::cross_entropy(&logits, labels).unwrap()
    };
    let mut worst: f64 = 0.0;
    for key in keys {
        let analytic = grads[key].data();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for j in 0..analytic.len() {
            let mut m = model.clone();
            m.param_mut(*key).unwrap().data_mut()[j] += H;
            let up = loss(&m);
            m.param_mut(*key).unwrap().data_mut()[j] -= 2.0 * H;
            let down = loss(&m);
            let numeric = (up - down) / (2.0 * H);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
        worst = worst.max(diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-12));
    }
    worst
}

#[test]
fn residual_graph_parameters() {
    let mut b = GraphBuilder::new(2, 6, 6);
    let x = b.input();
    let c1 = b.conv(x, 3, 3, 1, 1, false);
    let n1 = b.batchnorm(c1);
    let r1 = b.relu(n1);
    let c2 = b.conv(r1, 3, 3, 1, 1, true);
    let sum = b.add(c2, r1);
    let m = b.maxpool(sum, 2, 1);
    let p = b.avgpool(m, 5, 5);
    let f = b.flatten(p);
    let out = b.linear(f, 3, true);
    let mut model: ModelGraph<f64> = b.finish(out, 5).unwrap();
    // non-trivial running statistics
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let keys: Vec<ParamKey> = model.params().map(|(k, _)| *k).collect();
    for key in &keys {
        if key.role.is_buffer() {
            let t = model.param_mut(*key).unwrap();
            let shape = t.shape().to_vec();
            *t = positive(&shape, &mut rng);
        }
    }
    let batch = random(&[3, 2, 6, 6], &mut rng);
    let trainable: Vec<ParamKey> = keys.into_iter().filter(|k| !k.role.is_buffer()).collect();
    assert_close("graph", graph_error(&model, &batch, &[0, 2, 1], &trainable));
}
