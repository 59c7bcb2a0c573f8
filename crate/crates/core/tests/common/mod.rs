//! Finite-difference helpers shared by the gradient and acceptance suites.
//!
//! Each check builds a graph producing a tensor `y`, contracts it with fixed
//! random weights `r` and compares `d(Σ r·y)/dx` from backward against
//! `(f(x + h) - f(x - h)) / 2h`, with the contraction done in f64.
#![allow(dead_code)]

use spkv::attention::{build_bias, gated_attention, MaskSpec};
use spkv::gating::{soft_gate_bias, PredictorVars, UtilityPredictor};
use spkv::tape::{Tape, Var};
use spkv::{Rng, Tensor};

pub const H: f32 = 1e-3;

/// Analytic gradients of `Σ r·y` for every input, plus the weights `r`.
pub fn analytic(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var, seed: u64) -> (Vec<Vec<f32>>, Tensor) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let y = build(&mut tape, &vars);
    let r = Tensor::randn(tape.shape(y), 1.0, &mut Rng::new(seed));
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    (g, r)
}

/// Norm-wise relative error between `analytic` and central differences of `eval`.
pub fn compare(inputs: &[Tensor], analytic: &[Vec<f32>], eval: &dyn Fn(&[Tensor]) -> f64, h: f32, richardson: bool) -> Vec<f64> {
    let mut xs = inputs.to_vec();
    let central = |xs: &mut Vec<Tensor>, i: usize, j: usize, h: f32| {
        let orig = xs[i].data()[j];
        xs[i].data_mut()[j] = orig + h;
        let up = eval(xs);
        xs[i].data_mut()[j] = orig - h;
        let down = eval(xs);
        xs[i].data_mut()[j] = orig;
        (up - down) / (2.0 * h as f64)
    };
    let mut errors = Vec::new();
    for i in 0..inputs.len() {
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for j in 0..inputs[i].numel() {
            let mut fd = central(&mut xs, i, j, h);
            if richardson {
                fd = (4.0 * fd - central(&mut xs, i, j, 2.0 * h)) / 3.0;
            }
            let a = analytic[i][j] as f64;
            diff += (fd - a).powi(2);
            norm += (a * a).max(fd * fd);
        }
        errors.push(if norm < 1e-12 { diff.sqrt() } else { (diff / norm).sqrt() });
    }
    errors
}

/// Checks the tape against differences of its own f32 forward.
pub fn fd_errors(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var, seed: u64) -> Vec<f64> {
    let (g, r) = analytic(inputs, build, seed);
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = build(&mut t, &vs);
        t.value(y).data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
    };
    compare(inputs, &g, &eval, H, false)
}

/// Plain f64 soft-gated attention with the utility predictor, shapes as in
/// the test below (batch 1).
#[allow(clippy::too_many_arguments)]
pub fn reference_attention(x: &[Tensor], t: usize, d: usize, hkv: usize, groups: usize, dm: usize, window: usize) -> Vec<f64> {
    let f = |i: usize| -> Vec<f64> { x[i].data().iter().map(|&v| v as f64).collect() };
    let (q, k, v, h, w1, b1, w2, b2) = (f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7));
    // u[kv][s]
    let mut u = vec![vec![0.0; t]; hkv];
    for s in 0..t {
        let hid: Vec<f64> = (0..dm)
            .map(|j| {
                let a = b1[j] + (0..dm).map(|i| h[s * dm + i] * w1[i * dm + j]).sum::<f64>();
                a / (1.0 + (-a).exp())
            })
            .collect();
        for kv in 0..hkv {
            let a = b2[kv] + (0..dm).map(|j| hid[j] * w2[j * hkv + kv]).sum::<f64>();
            u[kv][s] = 1.0 / (1.0 + (-a).exp());
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; hkv * groups * t * d];
    for head in 0..hkv * groups {
        let kv = head / groups;
        for ti in 0..t {
            let logits: Vec<f64> = (0..=ti)
                .map(|s| {
                    let dot: f64 = (0..d).map(|c| q[(head * t + ti) * d + c] * k[(kv * t + s) * d + c]).sum();
                    let bias = if ti - s < window { 0.0 } else { (u[kv][s] + 1e-8).ln() };
                    dot * scale + bias
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                out[(head * t + ti) * d + c] = (0..=ti).map(|s| e[s] / z * v[(kv * t + s) * d + c]).sum();
            }
        }
    }
    out
}

/// Soft-gated attention with the utility predictor for one random draw:
/// `(max relative error over inputs, max forward deviation from the f64 reference)`.
pub fn gated_attention_check(seed: u64, t: usize, d: usize, window: usize) -> (Vec<f64>, f64) {
    let (hkv, groups, dm) = (2usize, 2usize, 8usize);
    let mut rng = Rng::new(seed);
    let inputs = vec![
        Tensor::randn(&[1, hkv * groups, t, d], 1.0, &mut rng),
        Tensor::randn(&[1, hkv, t, d], 1.0, &mut rng),
        Tensor::randn(&[1, hkv, t, d], 1.0, &mut rng),
        Tensor::randn(&[1, t, dm], 1.0, &mut rng),
        Tensor::randn(&[dm, dm], 0.5, &mut rng),
        Tensor::randn(&[dm], 0.5, &mut rng),
        Tensor::randn(&[dm, hkv], 0.5, &mut rng),
        Tensor::randn(&[hkv], 0.5, &mut rng),
    ];
    let build = move |tape: &mut Tape, v: &[Var]| {
        let pv = PredictorVars { w1: v[4], b1: v[5], w2: v[6], b2: v[7] };
        let u = UtilityPredictor::forward(tape, &pv, v[3]).unwrap();
        let gb = soft_gate_bias(tape, u);
        let bias = build_bias(tape, &MaskSpec::new(t, window, groups).unwrap(), gb).unwrap();
        let k = tape.repeat_heads(v[1], groups).unwrap();
        let vv = tape.repeat_heads(v[2], groups).unwrap();
        gated_attention(tape, v[0], k, vv, bias).unwrap()
    };
    let (g, r) = analytic(&inputs, &build, seed ^ 0xabc);
    let mut tape = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = build(&mut tape, &vs);
    let reference = reference_attention(&inputs, t, d, hkv, groups, dm, window);
    let forward = tape.value(y).data().iter().zip(&reference).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
    let eval = |xs: &[Tensor]| -> f64 {
        reference_attention(xs, t, d, hkv, groups, dm, window).iter().zip(r.data()).map(|(a, &b)| a * b as f64).sum()
    };
    (compare(&inputs, &g, &eval, H, false), forward)
}
