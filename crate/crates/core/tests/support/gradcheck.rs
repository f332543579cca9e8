//! Central finite-difference checks of every differentiable layer, in f64.
//! Each check returns the worst relative error over its shapes.
#![allow(dead_code)]

use kwsf::model::{self, NetworkConfig};
use kwsf::nn::loss::{cross_entropy, kl_consistency, KlDirection};
use kwsf::nn::ops::{self, NormMode};
use kwsf::nn::{ParameterSet, Tensor};
use kwsf::seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Largest relative error between analytic and central-difference gradients
/// of `f` at `x`. Entries whose gradients are both tiny are compared on an
/// absolute scale.
fn max_rel_error(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + H;
        let up = f(&probe);
        probe.data_mut()[i] = orig - H;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

/// Projection weights so the scalar objective touches every output.
fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rng(tag: u64) -> ChaCha8Rng {
    seed::rng(seed::derive(0x6ead, &[tag]))
}

const SHAPES4: [[usize; 4]; 5] = [[2, 1, 4, 5], [3, 2, 3, 3], [2, 3, 5, 4], [4, 2, 2, 6], [2, 4, 6, 6]];

pub fn conv2d_gradients() -> f64 {
    let mut worst = 0.0f64;
    for (s, &[n, c, h, w]) in SHAPES4.iter().enumerate() {
        let mut r = rng(s as u64);
        let o = 1 + s % 3;
        let k = [1, 3, 5][s % 3].min(2 * h.min(w) - 1) | 1;
        let x = rand_tensor(&mut r, &[n, c, h, w], 1.0);
        let wt = rand_tensor(&mut r, &[o, c, k, k], 0.5);
        let b = rand_tensor(&mut r, &[o], 0.5);
        let proj = rand_tensor(&mut r, &[n, o, h, w], 1.0);
        let g = ops::conv2d_backward(&x, &wt, &proj).unwrap();
        let ex = max_rel_error(&x, &g.input, |x| dot(&ops::conv2d(x, &wt, Some(&b)).unwrap(), &proj));
        let ew = max_rel_error(&wt, &g.weight, |wt| dot(&ops::conv2d(&x, wt, Some(&b)).unwrap(), &proj));
        let eb = max_rel_error(&b, &g.bias, |b| dot(&ops::conv2d(&x, &wt, Some(b)).unwrap(), &proj));
        worst = worst.max(ex).max(ew).max(eb);
    }
    worst
}

pub fn pointwise_gradients() -> f64 {
    let mut worst = 0.0f64;
    for (s, shape) in SHAPES4.iter().enumerate() {
        let mut r = rng(10 + s as u64);
        let x = rand_tensor(&mut r, shape, 2.0);
        let y = rand_tensor(&mut r, shape, 2.0);
        let proj = rand_tensor(&mut r, shape, 1.0);

        let e = max_rel_error(&x, &ops::relu_backward(&x, &proj), |x| dot(&ops::relu(x), &proj));
        worst = worst.max(e);

        let sig = ops::sigmoid(&x);
        let e = max_rel_error(&x, &ops::sigmoid_backward(&sig, &proj), |x| dot(&ops::sigmoid(x), &proj));
        worst = worst.max(e);

        let (da, db) = ops::elementwise_mul_backward(&x, &y, &proj).unwrap();
        let ea = max_rel_error(&x, &da, |x| dot(&ops::elementwise_mul(x, &y).unwrap(), &proj));
        let eb = max_rel_error(&y, &db, |y| dot(&ops::elementwise_mul(&x, y).unwrap(), &proj));
        worst = worst.max(ea).max(eb);
    }
    worst
}

pub fn batch_norm_gradients() -> f64 {
    let mut worst = 0.0f64;
    for (s, &shape) in SHAPES4.iter().enumerate() {
        let mut r = rng(20 + s as u64);
        let c = shape[1];
        let x = rand_tensor(&mut r, &shape, 2.0);
        let scale = rand_tensor(&mut r, &[c], 1.5);
        let offset = rand_tensor(&mut r, &[c], 1.0);
        let proj = rand_tensor(&mut r, &shape, 1.0);
        let (_, cache) = ops::batch_norm_train(&x, &scale, &offset, 1e-5).unwrap();
        let g = ops::batch_norm_backward(&cache, &scale, &proj).unwrap();
        let f = |x: &Tensor<f64>, sc: &Tensor<f64>, of: &Tensor<f64>| {
            dot(&ops::batch_norm_train(x, sc, of, 1e-5).unwrap().0, &proj)
        };
        let ex = max_rel_error(&x, &g.input, |x| f(x, &scale, &offset));
        let es = max_rel_error(&scale, &g.scale, |sc| f(&x, sc, &offset));
        let eo = max_rel_error(&offset, &g.offset, |of| f(&x, &scale, of));
        worst = worst.max(ex).max(es).max(eo);
    }
    worst
}

pub fn dropout_gradient_with_frozen_mask() -> f64 {
    let mut worst = 0.0f64;
    for (s, shape) in SHAPES4.iter().enumerate() {
        let mut r = rng(30 + s as u64);
        let x = rand_tensor(&mut r, shape, 2.0);
        let proj = rand_tensor(&mut r, shape, 1.0);
        let (_, mask) = ops::dropout(&x, 0.3, NormMode::Train, s as u64);
        let grad = ops::apply_mask(&proj, mask.as_deref());
        let e = max_rel_error(&x, &grad, |x| dot(&ops::dropout(x, 0.3, NormMode::Train, s as u64).0, &proj));
        worst = worst.max(e);
    }
    worst
}

pub fn maxpool_gradients() -> f64 {
    let mut worst = 0.0f64;
    for (s, &[n, c, h, w]) in SHAPES4.iter().enumerate() {
        let mut r = rng(40 + s as u64);
        // Distinct values spaced well beyond the probe step.
        let numel = n * c * h * w;
        let mut vals: Vec<f64> = (0..numel).map(|i| i as f64 * 0.01).collect();
        use rand::seq::SliceRandom;
        vals.shuffle(&mut r);
        let x = Tensor::from_vec(&[n, c, h, w], vals).unwrap();
        let (y, cache) = ops::maxpool2(&x).unwrap();
        let proj = rand_tensor(&mut r, y.shape(), 1.0);
        let g = ops::maxpool2_backward(&cache, &proj);
        let e = max_rel_error(&x, &g, |x| dot(&ops::maxpool2(x).unwrap().0, &proj));
        worst = worst.max(e);
    }
    worst
}

pub fn linear_gradients() -> f64 {
    let mut worst = 0.0f64;
    for (s, &(n, d, k)) in [(1, 3, 2), (4, 5, 3), (2, 8, 12), (6, 2, 7), (3, 10, 4)].iter().enumerate() {
        let mut r = rng(50 + s as u64);
        let x = rand_tensor(&mut r, &[n, d], 1.0);
        let w = rand_tensor(&mut r, &[d, k], 1.0);
        let b = rand_tensor(&mut r, &[k], 1.0);
        let proj = rand_tensor(&mut r, &[n, k], 1.0);
        let g = ops::linear_backward(&x, &w, &proj).unwrap();
        let ex = max_rel_error(&x, &g.input, |x| dot(&ops::linear(x, &w, &b).unwrap(), &proj));
        let ew = max_rel_error(&w, &g.weight, |w| dot(&ops::linear(&x, w, &b).unwrap(), &proj));
        let eb = max_rel_error(&b, &g.bias, |b| dot(&ops::linear(&x, &w, b).unwrap(), &proj));
        worst = worst.max(ex).max(ew).max(eb);
    }
    worst
}

pub fn loss_gradients() -> f64 {
    let mut worst = 0.0f64;
    for (s, &(n, k)) in [(1, 2), (3, 12), (5, 4), (2, 7), (8, 12)].iter().enumerate() {
        let mut r = rng(60 + s as u64);
        let logits = rand_tensor(&mut r, &[n, k], 3.0);
        let other = rand_tensor(&mut r, &[n, k], 3.0);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let e = max_rel_error(&logits, &g, |l| cross_entropy(l, &labels).unwrap().0);
        worst = worst.max(e);
        for dir in [KlDirection::TeacherStudent, KlDirection::StudentTeacher] {
            let (_, g) = kl_consistency(&other, &logits, dir).unwrap();
            let e = max_rel_error(&logits, &g, |l| kl_consistency(&other, l, dir).unwrap().0);
            worst = worst.max(e);
        }
    }
    worst
}

fn tiny_net(channels: Vec<usize>, input: [usize; 2], residual: bool) -> NetworkConfig {
    NetworkConfig {
        n_blocks: channels.len(),
        channels,
        fc_hidden: 5,
        input_shape: input,
        residual,
        dropout_rate: 0.2,
        ..NetworkConfig::full()
    }
}

/// Randomize every trainable tensor so biases, scales and offsets are
/// non-trivial.
fn randomized(cfg: &NetworkConfig, tag: u64) -> ParameterSet<f64> {
    let mut p = model::build_network::<f64>(cfg, tag).unwrap();
    let mut r = rng(1000 + tag);
    for (name, prm) in p.iter_mut() {
        if !prm.trainable {
            continue;
        }
        let scale = if name.ends_with(".weight") { 0.0 } else { 0.5 };
        for v in prm.value.data_mut() {
            *v += r.gen_range(-0.5..0.5) * scale + if name.ends_with(".scale") { 0.5 } else { 0.0 };
        }
    }
    p
}

pub fn attention_subblock_gradients() -> f64 {
    let mut worst = 0.0f64;
    let cases: [(usize, usize, [usize; 4], bool); 5] = [
        (1, 2, [2, 1, 4, 4], false),
        (2, 2, [3, 2, 3, 5], true),
        (2, 3, [2, 2, 4, 3], false),
        (3, 3, [2, 3, 5, 5], true),
        (1, 4, [4, 1, 3, 4], true),
    ];
    for (s, &(c_in, c_out, shape, residual)) in cases.iter().enumerate() {
        let mut r = rng(70 + s as u64);
        let mut params = ParameterSet::<f64>::new();
        for path in ["filter", "gate"] {
            params.insert(format!("b.{path}.weight"), rand_tensor(&mut r, &[c_out, c_in, 3, 3], 0.6), true).unwrap();
            params.insert(format!("b.{path}.bias"), rand_tensor(&mut r, &[c_out], 0.3), true).unwrap();
        }
        params.insert("b.bn.scale", rand_tensor(&mut r, &[c_out], 1.0).map(|v| v + 1.5), true).unwrap();
        params.insert("b.bn.offset", rand_tensor(&mut r, &[c_out], 0.5), true).unwrap();
        params.insert("b.bn.running_mean", Tensor::zeros(&[c_out]), false).unwrap();
        params.insert("b.bn.running_var", Tensor::full(&[c_out], 1.0), false).unwrap();
        let x = rand_tensor(&mut r, &shape, 1.0);
        let out_shape = [shape[0], c_out, shape[2], shape[3]];
        let proj = rand_tensor(&mut r, &out_shape, 1.0);
        let run = |p: &ParameterSet<f64>, x: &Tensor<f64>| {
            model::attention_subblock_forward(x, p, "b", NormMode::Train, 0.25, 99, residual, 1e-5).unwrap()
        };
        let (_, cache) = run(&params, &x);
        let mut grads = params.zeros_like();
        let dx = model::attention_subblock_backward(&cache, &params, "b", &proj, &mut grads).unwrap();
        let e = max_rel_error(&x, &dx, |x| dot(&run(&params, x).0, &proj));
        worst = worst.max(e);
        let names: Vec<String> = params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect();
        for name in names {
            let e = max_rel_error(params.get(&name), grads.get(&name), |t| {
                let mut p = params.clone();
                *p.get_mut(&name) = t.clone();
                dot(&run(&p, &x).0, &proj)
            });
            worst = worst.max(e);
        }
    }
    worst
}

pub fn whole_network_gradients() -> f64 {
    let mut worst = 0.0f64;
    let cases = [
        (vec![2], [4, 6], true),
        (vec![2, 3], [4, 4], true),
        (vec![3], [5, 7], false),
        (vec![2, 2], [6, 4], true),
        (vec![1, 2], [4, 8], false),
    ];
    for (s, (channels, input, residual)) in cases.into_iter().enumerate() {
        let cfg = tiny_net(channels, input, residual);
        let params = randomized(&cfg, s as u64);
        let mut r = rng(80 + s as u64);
        let x = rand_tensor(&mut r, &[3, 1, input[0], input[1]], 1.0);
        let labels = vec![0, 5, 11];
        let loss = |p: &ParameterSet<f64>| {
            let logits = model::forward(p, &cfg, &x, NormMode::Train, 7).unwrap();
            cross_entropy(&logits, &labels).unwrap().0
        };
        let (logits, cache) = model::forward_with_cache(&params, &cfg, &x, NormMode::Train, 7).unwrap();
        let (_, dl) = cross_entropy(&logits, &labels).unwrap();
        let grads = model::backward(&params, &cfg, &cache, &dl).unwrap();
        let names: Vec<String> = params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect();
        for name in names {
            let e = max_rel_error(params.get(&name), grads.get(&name), |t| {
                let mut p = params.clone();
                *p.get_mut(&name) = t.clone();
                loss(&p)
            });
            worst = worst.max(e);
        }
    }
    worst
}

pub fn suite() -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", conv2d_gradients()),
        ("pointwise", pointwise_gradients()),
        ("batch norm", batch_norm_gradients()),
        ("dropout", dropout_gradient_with_frozen_mask()),
        ("maxpool", maxpool_gradients()),
        ("linear", linear_gradients()),
        ("losses", loss_gradients()),
        ("attention sub-block", attention_subblock_gradients()),
        ("whole network", whole_network_gradients()),
    ]
}
