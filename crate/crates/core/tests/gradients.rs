mod common;

use common::*;

use std::sync::Arc;

use proptest::prelude::*;
use spkv::gating::{GateConfig, GateMode};
use spkv::model::{AttentionKind, Model, ModelConfig};
use spkv::tape::{RopeTable, Tape, Var};
use spkv::{Rng, Tensor};

fn assert_close(errors: &[f64], tol: f64, what: &str) {
    for (i, e) in errors.iter().enumerate() {
        assert!(*e < tol, "{what}: input {i} relative error {e}");
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn soft_gated_attention_gradients(seed in 0u64..1_000_000, t in 2usize..=16, d in 1usize..=4, window in 1usize..=16) {
        let (errors, forward) = gated_attention_check(seed, t, 2 * d, window.min(t));
        prop_assert!(forward < 1e-4, "forward deviation {}", forward);
        for (i, e) in errors.iter().enumerate() {
            prop_assert!(*e < 1e-3, "input {} relative error {}", i, e);
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = Rng::new(1);
    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[3, 4], &mut rng);
    let bias = randn(&[4], &mut rng);
    let ins = [a.clone(), b.clone(), bias];
    assert_close(&fd_errors(&ins, &|t, v| t.add(v[0], v[1]).unwrap(), 2), 1e-3, "add");
    assert_close(&fd_errors(&ins, &|t, v| t.mul(v[0], v[1]).unwrap(), 3), 1e-3, "mul");
    assert_close(&fd_errors(&ins, &|t, v| t.add_bias(v[0], v[2]).unwrap(), 4), 1e-3, "add_bias");
    assert_close(&fd_errors(&ins[..1], &|t, v| t.scale(v[0], -1.7), 5), 1e-3, "scale");
    assert_close(&fd_errors(&ins[..1], &|t, v| t.sigmoid(v[0]), 6), 1e-3, "sigmoid");
    assert_close(&fd_errors(&ins[..1], &|t, v| t.silu(v[0]), 7), 1e-3, "silu");
    let pos = Tensor::new(&[6], vec![0.3, 0.9, 0.05, 0.5, 0.7, 0.2]).unwrap();
    assert_close(&fd_errors(&[pos.clone()], &|t, v| t.log_eps(v[0], 1e-8), 8), 1e-3, "log");
    assert_close(&fd_errors(&[pos.clone()], &|t, v| t.anneal(v[0], 0.45, 0.3), 9), 1e-3, "anneal");
    assert_close(&fd_errors(&ins[..1], &|t, v| t.mean(v[0]), 10), 1e-3, "mean");
}

#[test]
fn matrix_ops() {
    let mut rng = Rng::new(2);
    let a = randn(&[2, 3, 5], &mut rng);
    let w = randn(&[5, 4], &mut rng);
    let wt = randn(&[4, 5], &mut rng);
    assert_close(&fd_errors(&[a.clone(), w], &|t, v| t.matmul(v[0], v[1]).unwrap(), 1), 1e-3, "matmul");
    assert_close(&fd_errors(&[a, wt], &|t, v| t.matmul_t(v[0], v[1]).unwrap(), 2), 1e-3, "matmul_t");
    let x = randn(&[2, 2, 3, 4], &mut rng);
    let y = randn(&[2, 2, 4, 5], &mut rng);
    let z = randn(&[2, 2, 6, 4], &mut rng);
    assert_close(&fd_errors(&[x.clone(), y], &|t, v| t.bmm(v[0], v[1], false).unwrap(), 3), 1e-3, "bmm");
    assert_close(&fd_errors(&[x, z], &|t, v| t.bmm(v[0], v[1], true).unwrap(), 4), 1e-3, "bmm_t");
}

#[test]
fn layout_ops() {
    let mut rng = Rng::new(3);
    let x = randn(&[2, 3, 4, 2], &mut rng);
    assert_close(&fd_errors(&[x.clone()], &|t, v| t.permute(v[0], &[0, 2, 1, 3]).unwrap(), 1), 1e-3, "permute");
    assert_close(&fd_errors(&[x.clone()], &|t, v| t.reshape(v[0], &[6, 8]).unwrap(), 2), 1e-3, "reshape");
    assert_close(&fd_errors(&[x.clone()], &|t, v| t.repeat_heads(v[0], 3).unwrap(), 3), 1e-3, "repeat_heads");
    let table = Arc::new(RopeTable::new(2, 16, 10_000.0));
    assert_close(&fd_errors(&[x], &|t, v| t.rope(v[0], &table, 5).unwrap(), 4), 1e-3, "rope");
    let g = randn(&[2, 3, 5], &mut rng);
    let scores = randn(&[2, 6, 5, 5], &mut rng);
    let window_then_softmax = |t: &mut Tape, v: &[Var]| {
        let b = t.window_bias(v[0], 2, 2).unwrap();
        let s = t.constant(scores.clone());
        t.softmax_lastdim(s, b).unwrap()
    };
    assert_close(&fd_errors(&[g.clone()], &window_then_softmax, 5), 1e-3, "window_bias");
    assert_close(
        &fd_errors(&[g], &|t, v| t.override_heads(v[0], &[None, Some(0.0), None]).unwrap(), 6),
        1e-3,
        "override_heads",
    );
}

#[test]
fn normalization_and_losses() {
    let mut rng = Rng::new(4);
    let x = randn(&[3, 6], &mut rng);
    let w = randn(&[6], &mut rng);
    assert_close(&fd_errors(&[x.clone(), w], &|t, v| t.rms_norm(v[0], v[1], 1e-5).unwrap(), 1), 1e-3, "rms_norm");
    let table = randn(&[7, 3], &mut rng);
    assert_close(&fd_errors(&[table], &|t, v| t.embedding(v[0], &[1, 6, 1, 0], &[2, 2]).unwrap(), 2), 1e-3, "embedding");
    let bias = Tensor::new(&[3, 6], (0..18).map(|i| if i % 5 == 0 { f32::NEG_INFINITY } else { (i as f32) * 0.1 }).collect()).unwrap();
    assert_close(&fd_errors(&[x.clone()], &|t, v| {
        let b = t.constant(bias.clone());
        t.softmax_lastdim(v[0], b).unwrap()
    }, 3), 1e-3, "softmax");
    let logits = randn(&[4, 5], &mut rng);
    assert_close(&fd_errors(&[logits], &|t, v| t.cross_entropy(v[0], &[0, 4, 2, 2], &[1.0, 0.0, 2.0, 1.0]).unwrap(), 4), 1e-3, "cross_entropy");
}

#[test]
fn whole_model_gradients() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_q_heads: 4,
        n_kv_heads: 2,
        d_head: 2,
        d_ffn: 12,
        vocab_size: 9,
        max_seq_len: 16,
        layer_kinds: vec![AttentionKind::SelfPrunedKV, AttentionKind::Global],
        head_overrides: vec![],
        rope_base: 10_000.0,
        norm_eps: 1e-5,
    };
    let mut rng = Rng::new(5);
    let mut model = Model::new(cfg.clone(), 1.0, &mut rng).unwrap();
    model.layers[0].predictor.w2 = Tensor::randn(&[8, 2], 0.5, &mut rng);
    // Unit-scale embeddings keep the step small next to the norm input.
    model.embed = Tensor::randn(&[9, 8], 1.0, &mut rng);
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let tokens: Vec<usize> = (0..14).map(|_| rng.below(9)).collect();
    let gate = GateConfig { window: 3, mode: GateMode::Soft, ..GateConfig::default() };
    let build = |tape: &mut Tape, v: &[Var]| {
        let m = Model::from_params(cfg.clone(), v.iter().map(|&x| tape.value(x).clone()).collect()).unwrap();
        let bound = spkv::model::BoundParams { vars: v.to_vec() };
        m.forward(tape, &bound, &tokens, 2, &gate, &mut Rng::new(0)).unwrap().logits
    };
    // f32 forward noise swamps h = 1e-3 here, so a wider Richardson step.
    let (g, r) = analytic(&params, &build, 6);
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = build(&mut t, &vs);
        t.value(y).data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
    };
    let errors = compare(&params, &g, &eval, 1e-2, true);
    // The global layer's predictor gets exactly zero from both routes.
    assert_close(&errors, 5e-3, "model");
}

