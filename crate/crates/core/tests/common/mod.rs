//! Finite-difference oracles and random fixtures shared by integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snipspot::autodiff::{Padding, Tape, Var};
use snipspot::error::Result;
use snipspot::loss::{dice_loss, focal_loss, loss_values, total_loss, LossConfig};
use snipspot::model::{predict, SpotterConfig, SpotterParams};
use snipspot::pipeline::{sample_gradient, Sample};
use snipspot::preprocess::{pad_to_fixed, FeatureSequence};
use snipspot::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values kept at least `gap` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = p[i];
            p[i] = v + FD_STEP;
            let up = f(&p);
            p[i] = v - FD_STEP;
            let down = f(&p);
            p[i] = v;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

type Build<'a> = &'a dyn Fn(&Tape, &[Var]) -> Result<Var>;

/// Worst relative error over every input of `build`, whose output is reduced
/// to a scalar by a fixed random weighting so that no direction cancels.
pub fn check_op(rng: &mut ChaCha8Rng, inputs: &[Tensor], build: Build) -> f64 {
    let out_len = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&tape, &vars).unwrap();
        let n = tape.value(out).len();
        n
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let reduce = |tape: &Tape, out: Var| -> Var {
        let w = tape.mul_const(out, &weights).unwrap();
        tape.sum(w).unwrap()
    };
    let eval = |ts: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&tape, &vars).unwrap();
        let s = reduce(&tape, out);
        tape.item(s)
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&tape, &vars).unwrap();
    let s = reduce(&tape, out);
    let grads = tape.backward(s).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).unwrap().to_vec();
        let numeric = numeric_grad(x.data(), |p| {
            let mut ts = inputs.to_vec();
            ts[i] = Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap();
            eval(&ts)
        });
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// Worst relative error of each differentiable operation on random inputs.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let r = &mut r;
    let mut out = Vec::new();
    let a = uniform(r, vec![4, 5], -1.0, 1.0);
    let b = uniform(r, vec![4, 5], -1.0, 1.0);
    let pos = uniform(r, vec![4, 5], 0.5, 2.0);
    let row = uniform(r, vec![5], -1.0, 1.0);
    let c: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let mask = [true, false, true, true];

    out.push(("add", check_op(r, &[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]))));
    out.push(("sub", check_op(r, &[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]))));
    out.push(("mul", check_op(r, &[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]))));
    out.push(("div", check_op(r, &[a.clone(), pos.clone()], &|t, v| t.div(v[0], v[1]))));
    out.push(("add_bias", check_op(r, &[a.clone(), row.clone()], &|t, v| t.add_bias(v[0], v[1]))));
    out.push(("mul_const", check_op(r, std::slice::from_ref(&a), &|t, v| t.mul_const(v[0], &c))));
    out.push(("affine", check_op(r, std::slice::from_ref(&a), &|t, v| t.affine(v[0], -1.5, 0.25))));
    out.push(("mask_rows", check_op(r, std::slice::from_ref(&a), &|t, v| t.mask_rows(v[0], &mask))));
    let kinked = away_from_zero(r, vec![4, 5], 1e-2);
    out.push(("relu", check_op(r, &[kinked], &|t, v| t.relu(v[0]))));
    let wide = uniform(r, vec![4, 5], -3.0, 3.0);
    out.push(("gelu", check_op(r, std::slice::from_ref(&wide), &|t, v| t.gelu(v[0]))));
    out.push(("sigmoid", check_op(r, std::slice::from_ref(&wide), &|t, v| t.sigmoid(v[0]))));
    out.push(("ln", check_op(r, std::slice::from_ref(&pos), &|t, v| t.ln(v[0]))));
    out.push(("powf", check_op(r, std::slice::from_ref(&pos), &|t, v| t.powf(v[0], 2.5))));
    out.push(("clamp", check_op(r, std::slice::from_ref(&a), &|t, v| t.clamp(v[0], -0.5, 0.5))));
    out.push(("sum", check_op(r, std::slice::from_ref(&a), &|t, v| t.sum(v[0]))));
    out.push(("mean", check_op(r, std::slice::from_ref(&a), &|t, v| t.mean(v[0]))));
    out.push(("reshape", check_op(r, std::slice::from_ref(&a), &|t, v| t.reshape(v[0], vec![2, 10]))));
    let m = uniform(r, vec![5, 3], -1.0, 1.0);
    out.push(("matmul", check_op(r, &[a.clone(), m], &|t, v| t.matmul(v[0], v[1]))));
    out.push(("transpose", check_op(r, std::slice::from_ref(&a), &|t, v| t.transpose(v[0]))));
    out.push(("slice_rows", check_op(r, std::slice::from_ref(&a), &|t, v| t.slice_rows(v[0], 1, 2))));
    out.push(("slice_cols", check_op(r, std::slice::from_ref(&a), &|t, v| t.slice_cols(v[0], 2, 3))));
    out.push(("concat_cols", check_op(r, &[a.clone(), b.clone()], &|t, v| t.concat_cols(&[v[0], v[1]]))));
    out.push(("concat_rows", check_op(r, &[a.clone(), b.clone()], &|t, v| t.concat_rows(&[v[0], v[1]]))));
    out.push(("repeat_rows", check_op(r, std::slice::from_ref(&a), &|t, v| t.repeat_rows(v[0], 2, 7))));
    let smask = [true, true, false, true, false];
    out.push(("softmax", check_op(r, &[wide], &|t, v| t.softmax_lastdim(v[0], Some(&smask)))));
    let gain = uniform(r, vec![5], 0.5, 1.5);
    out.push(("layer_norm", check_op(r, &[a.clone(), gain, row.clone()], &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))));
    let x = uniform(r, vec![7, 3], -1.0, 1.0);
    let k = uniform(r, vec![3, 3, 2], -1.0, 1.0);
    out.push(("conv1d", check_op(r, &[x.clone(), k.clone()], &|t, v| t.conv1d(v[0], v[1], 1, Padding::Same))));
    out.push(("conv1d_stride2", check_op(r, &[x.clone(), k.clone()], &|t, v| t.conv1d(v[0], v[1], 2, Padding::Same))));
    out.push(("conv1d_valid", check_op(r, &[x, k], &|t, v| t.conv1d(v[0], v[1], 1, Padding::Valid))));
    let q = uniform(r, vec![7, 4], -1.0, 1.0);
    let kk = uniform(r, vec![7, 4], -1.0, 1.0);
    let vv = uniform(r, vec![7, 4], -1.0, 1.0);
    let kmask = [true, true, true, false, true, true, false];
    out.push((
        "windowed_attention",
        check_op(r, &[q, kk, vv], &|t, v| t.windowed_attention(v[0], v[1], v[2], &kmask, 3, 2, 0.5)),
    ));
    let probs = uniform(r, vec![12], 0.05, 0.95);
    let labels: Vec<f64> = (0..12).map(|i| f64::from(i % 3 == 0)).collect();
    let lmask: Vec<bool> = (0..12).map(|i| i < 10).collect();
    let cfg = LossConfig::default();
    out.push(("focal", check_op(r, std::slice::from_ref(&probs), &|t, v| focal_loss(t, v[0], &labels, &lmask, &cfg))));
    out.push(("dice", check_op(r, std::slice::from_ref(&probs), &|t, v| dice_loss(t, v[0], &labels, &lmask, &cfg))));
    out.push((
        "total_loss",
        check_op(r, &[probs], &|t, v| Ok(total_loss(t, v[0], &labels, &lmask, &cfg)?.total)),
    ));
    out
}

pub fn tiny_config() -> SpotterConfig {
    SpotterConfig {
        input_dim: 6,
        embed_dim: 8,
        embed_blocks: 1,
        transformer_blocks: 1,
        pyramid_blocks: 1,
        heads: 2,
        window: 6,
        duration: 24,
        ..Default::default()
    }
}

/// Initialised parameters with every tensor perturbed, so biases and norms
/// are not at their trivial starting values.
pub fn perturbed_params(cfg: &SpotterConfig, seed: u64) -> SpotterParams {
    let mut params = SpotterParams::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    params
}

pub fn random_sequence(r: &mut ChaCha8Rng, width: usize, valid: usize, duration: usize) -> FeatureSequence {
    pad_to_fixed(&uniform(r, vec![valid, width], -1.0, 1.0), duration).unwrap()
}

pub fn random_sample(cfg: &SpotterConfig, seed: u64) -> Sample {
    let mut r = rng(seed);
    let valid = r.random_range(cfg.duration * 2 / 3..=cfg.duration);
    let seq = random_sequence(&mut r, cfg.input_dim, valid, cfg.duration);
    let labels = (0..cfg.duration)
        .map(|t| f64::from(t < valid && r.random_bool(0.3)))
        .collect();
    Sample {
        video_id: format!("case{seed}"),
        seq,
        labels,
    }
}

/// Worst relative error between backpropagated and finite-difference
/// gradients of the total loss, over every model parameter.
pub fn model_gradcheck(cfg: &SpotterConfig, seed: u64) -> f64 {
    let params = perturbed_params(cfg, seed);
    let sample = random_sample(cfg, seed);
    let loss = LossConfig::default();
    let analytic = sample_gradient(&params, &sample, &loss).unwrap();
    let mut worst = 0.0f64;
    for (i, t) in params.tensors().iter().enumerate() {
        let numeric = numeric_grad(t.data(), |p| {
            let mut q = params.clone();
            q.tensors_mut()[i].data_mut().copy_from_slice(p);
            let probs = predict(&q, &sample.seq).unwrap();
            loss_values(&probs, &sample.labels, &sample.seq.mask, &loss).unwrap().0
        });
        worst = worst.max(max_rel_err(&analytic.grads[i], &numeric));
    }
    worst
}
