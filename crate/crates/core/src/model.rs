//! Toy decoder-only transformer with grouped-query attention and per-layer
//! (or per-head) attention kinds.
//!
//! Parameter order, used by checkpoints and the optimizer:
//! `embed [V, d]`, then for every layer `attn_norm [d]`, `wq [d, Hq·D]`,
//! `wk [d, Hkv·D]`, `wv [d, Hkv·D]`, `wo [Hq·D, d]`, `ffn_norm [d]`,
//! `w1 [d, F]`, `w2 [F, d]`, `pred_w1 [d, d]`, `pred_b1 [d]`,
//! `pred_w2 [d, Hkv]`, `pred_b2 [Hkv]`; finally `final_norm [d]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{build_bias, gated_attention, MaskSpec};
use crate::error::{Error, Result};
use crate::gating::{gate_bias, GateConfig, GateField, PredictorVars, UtilityPredictor};
use crate::tape::{RopeTable, Tape, Var};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    Global,
    SlidingWindowOnly,
    SelfPrunedKV,
}

/// Per-(layer, kv head) attention kind taking precedence over the layer kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadOverride {
    pub layer: usize,
    pub kv_head: usize,
    pub kind: AttentionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layer_kinds: Vec<AttentionKind>,
    #[serde(default)]
    pub head_overrides: Vec<HeadOverride>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
}

fn default_rope_base() -> f32 {
    10_000.0
}

fn default_norm_eps() -> f32 {
    1e-5
}

impl ModelConfig {
    /// 4 layers, d_model 128, 8 query / 2 kv heads of width 16, FFN 512,
    /// vocab 128, 256 positions.
    pub fn toy(kind: AttentionKind) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_q_heads: 8,
            n_kv_heads: 2,
            d_head: 16,
            d_ffn: 512,
            vocab_size: 128,
            max_seq_len: 256,
            layer_kinds: vec![kind; 4],
            head_overrides: Vec::new(),
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_kv_heads == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("layers, kv heads, vocab and max_seq_len must be positive".into());
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return bad(format!("{} query heads not divisible by {} kv heads", self.n_q_heads, self.n_kv_heads));
        }
        if self.d_model != self.n_q_heads * self.d_head {
            return bad(format!("d_model {} != n_q_heads {} x d_head {}", self.d_model, self.n_q_heads, self.d_head));
        }
        if self.d_head % 2 != 0 {
            return bad("d_head must be even for rotary embeddings".into());
        }
        if self.layer_kinds.len() != self.n_layers {
            return bad(format!("{} layer kinds for {} layers", self.layer_kinds.len(), self.n_layers));
        }
        for o in &self.head_overrides {
            if o.layer >= self.n_layers || o.kv_head >= self.n_kv_heads {
                return bad(format!("head override out of range: layer {} head {}", o.layer, o.kv_head));
            }
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn head_kind(&self, layer: usize, kv_head: usize) -> AttentionKind {
        self.head_overrides
            .iter()
            .rev()
            .find(|o| o.layer == layer && o.kv_head == kv_head)
            .map_or(self.layer_kinds[layer], |o| o.kind)
    }

    pub fn layer_uses_gates(&self, layer: usize) -> bool {
        (0..self.n_kv_heads).any(|k| self.head_kind(layer, k) == AttentionKind::SelfPrunedKV)
    }

    pub fn uses_gates(&self) -> bool {
        (0..self.n_layers).any(|l| self.layer_uses_gates(l))
    }

    /// Count of non-embedding weights excluding the utility predictors.
    pub fn non_embedding_params(&self) -> usize {
        let d = self.d_model;
        let attn = d * self.n_q_heads * self.d_head * 2 + d * self.n_kv_heads * self.d_head * 2;
        let ffn = 2 * d * self.d_ffn;
        self.n_layers * (attn + ffn + 2 * d) + d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub predictor: UtilityPredictor,
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Base,
    Predictor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    rope: Arc<RopeTable>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embed == other.embed
            && self.layers == other.layers
            && self.final_norm == other.final_norm
    }
}

/// Per-layer gate outputs of a forward pass (`None` for gate-free layers).
#[derive(Debug, Clone)]
pub struct LayerGates {
    /// Utilities `[B, H_kv, T]` on the tape.
    pub u: Var,
    /// Binary decisions, when the gate mode produces them.
    pub z: Option<Tensor>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[B, T, V]`.
    pub logits: Var,
    pub gates: Vec<Option<LayerGates>>,
}

impl ForwardOutput {
    pub fn gate_fields(&self, tape: &Tape) -> Vec<Option<GateField>> {
        self.gates
            .iter()
            .map(|g| g.as_ref().map(|g| GateField { u: tape.value(g.u).clone(), z: g.z.clone() }))
            .collect()
    }
}

/// Tape handles for every parameter, in checkpoint order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

struct LayerVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_norm: Var,
    w1: Var,
    w2: Var,
    predictor: PredictorVars,
}

const PARAMS_PER_LAYER: usize = 12;

impl Model {
    pub fn new(config: ModelConfig, init_bias: f32, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let qd = config.n_q_heads * config.d_head;
        let kvd = config.n_kv_heads * config.d_head;
        let resid_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let embed = Tensor::randn(&[config.vocab_size, d], 0.02, rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let std_in = 1.0 / (d as f32).sqrt();
            layers.push(LayerParams {
                attn_norm: Tensor::full(&[d], 1.0),
                wq: Tensor::randn(&[d, qd], std_in, rng),
                wk: Tensor::randn(&[d, kvd], std_in, rng),
                wv: Tensor::randn(&[d, kvd], std_in, rng),
                wo: Tensor::randn(&[qd, d], resid_scale / (qd as f32).sqrt(), rng),
                ffn_norm: Tensor::full(&[d], 1.0),
                w1: Tensor::randn(&[d, config.d_ffn], std_in, rng),
                w2: Tensor::randn(&[config.d_ffn, d], resid_scale / (config.d_ffn as f32).sqrt(), rng),
                predictor: UtilityPredictor::new(d, d, config.n_kv_heads, init_bias, rng),
            });
        }
        let rope = Arc::new(RopeTable::new(config.d_head, config.max_seq_len, config.rope_base));
        Ok(Self { embed, layers, final_norm: Tensor::full(&[d], 1.0), rope, config })
    }

    /// Rebuilds a model from parameters in checkpoint order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(0);
        let mut model = Self::new(config, 0.0, &mut rng)?;
        if params.len() != model.param_count() {
            return Err(Error::Format(format!("expected {} tensors, got {}", model.param_count(), params.len())));
        }
        for (slot, p) in model.params_mut().into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::Format(format!("tensor shape {:?} != expected {:?}", p.shape(), slot.shape())));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn rope(&self) -> &Arc<RopeTable> {
        &self.rope
    }

    pub fn param_count(&self) -> usize {
        2 + PARAMS_PER_LAYER * self.layers.len()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string()];
        for l in 0..self.layers.len() {
            for n in [
                "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w2", "pred_w1", "pred_b1", "pred_w2",
                "pred_b2",
            ] {
                names.push(format!("layers.{l}.{n}"));
            }
        }
        names.push("final_norm".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.extend([&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w1, &l.w2]);
            out.extend(l.predictor.params());
        }
        out.push(&self.final_norm);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w1,
                &mut l.w2,
            ]);
            out.extend(l.predictor.params_mut());
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut out = vec![ParamGroup::Base];
        for _ in &self.layers {
            out.extend([ParamGroup::Base; 8]);
            out.extend([ParamGroup::Predictor; 4]);
        }
        out.push(ParamGroup::Base);
        out
    }

    /// Whether each parameter is a matrix (weight decay applies to these only).
    pub fn param_is_matrix(&self) -> Vec<bool> {
        self.params().iter().map(|p| p.shape().len() == 2).collect()
    }

    pub fn set_predictors_frozen(&mut self, frozen: bool) {
        for l in &mut self.layers {
            l.predictor.frozen = frozen;
        }
    }

    /// Fresh predictor for `layer`, fully open at `σ(init_bias)`.
    pub fn reset_predictor(&mut self, layer: usize, init_bias: f32, rng: &mut Rng) {
        let c = &self.config;
        self.layers[layer].predictor = UtilityPredictor::new(c.d_model, c.d_model, c.n_kv_heads, init_bias, rng);
    }

    /// Places parameters on the tape. `trainable` decides, per group, whether
    /// gradients are tracked; frozen predictors never are.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> BoundParams {
        let mut vars = Vec::with_capacity(self.param_count());
        for (p, g) in self.params().into_iter().zip(self.param_groups()) {
            let mut t = p.clone();
            let frozen_pred = g == ParamGroup::Predictor && self.layers.iter().any(|l| l.predictor.frozen);
            t.requires_grad = trainable(g) && !frozen_pred;
            vars.push(tape.leaf(t));
        }
        BoundParams { vars }
    }

    fn layer_vars(&self, bound: &BoundParams, layer: usize) -> LayerVars {
        let v = &bound.vars[1 + layer * PARAMS_PER_LAYER..1 + (layer + 1) * PARAMS_PER_LAYER];
        LayerVars {
            attn_norm: v[0],
            wq: v[1],
            wk: v[2],
            wv: v[3],
            wo: v[4],
            ffn_norm: v[5],
            w1: v[6],
            w2: v[7],
            predictor: PredictorVars { w1: v[8], b1: v[9], w2: v[10], b2: v[11] },
        }
    }

    /// Full-sequence forward over `tokens` laid out as `[batch, T]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        tokens: &[usize],
        batch: usize,
        gate: &GateConfig,
        rng: &mut Rng,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if batch == 0 || tokens.len() % batch != 0 {
            return Err(Error::Input(format!("{} tokens do not split into {} rows", tokens.len(), batch)));
        }
        let t = tokens.len() / batch;
        if t == 0 || t > c.max_seq_len {
            return Err(Error::Input(format!("sequence length {t} outside 1..={}", c.max_seq_len)));
        }
        gate.validate()?;
        let (dh, hq, hkv) = (c.d_head, c.n_q_heads, c.n_kv_heads);
        let mask = MaskSpec::new(t, gate.window, c.groups())?;

        let mut x = tape.embedding(bound.vars[0], tokens, &[batch, t])?;
        let mut gates = Vec::with_capacity(c.n_layers);
        for layer in 0..c.n_layers {
            let lv = self.layer_vars(bound, layer);
            let h = tape.rms_norm(x, lv.attn_norm, c.norm_eps)?;

            let q = tape.matmul(h, lv.wq)?;
            let q = tape.reshape(q, &[batch, t, hq, dh])?;
            let q = tape.permute(q, &[0, 2, 1, 3])?;
            let q = tape.rope(q, &self.rope, 0)?;
            let k = tape.matmul(h, lv.wk)?;
            let k = tape.reshape(k, &[batch, t, hkv, dh])?;
            let k = tape.permute(k, &[0, 2, 1, 3])?;
            let k = tape.rope(k, &self.rope, 0)?;
            let v = tape.matmul(h, lv.wv)?;
            let v = tape.reshape(v, &[batch, t, hkv, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;

            let (gb, layer_gates) = self.layer_gate_bias(tape, &lv, h, layer, batch, t, gate, rng)?;
            gates.push(layer_gates);
            let bias = build_bias(tape, &mask, gb)?;
            let k = tape.repeat_heads(k, c.groups())?;
            let v = tape.repeat_heads(v, c.groups())?;
            let o = gated_attention(tape, q, k, v, bias)?;
            let o = tape.permute(o, &[0, 2, 1, 3])?;
            let o = tape.reshape(o, &[batch, t, hq * dh])?;
            let o = tape.matmul(o, lv.wo)?;
            x = tape.add(x, o)?;

            let h = tape.rms_norm(x, lv.ffn_norm, c.norm_eps)?;
            let f = tape.matmul(h, lv.w1)?;
            let f = tape.silu(f);
            let f = tape.matmul(f, lv.w2)?;
            x = tape.add(x, f)?;
        }
        let last = *bound.vars.last().unwrap();
        let x = tape.rms_norm(x, last, c.norm_eps)?;
        let logits = tape.matmul_t(x, bound.vars[0])?;
        debug_assert_eq!(tape.shape(logits), &[batch, t, c.vocab_size]);
        Ok(ForwardOutput { logits, gates })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_gate_bias(
        &self,
        tape: &mut Tape,
        lv: &LayerVars,
        h: Var,
        layer: usize,
        batch: usize,
        t: usize,
        gate: &GateConfig,
        rng: &mut Rng,
    ) -> Result<(Var, Option<LayerGates>)> {
        let c = &self.config;
        let overrides: Vec<Option<f32>> = (0..c.n_kv_heads)
            .map(|k| match c.head_kind(layer, k) {
                AttentionKind::Global => Some(0.0),
                AttentionKind::SlidingWindowOnly => Some(f32::NEG_INFINITY),
                AttentionKind::SelfPrunedKV => None,
            })
            .collect();
        if overrides.iter().all(Option::is_some) {
            let mut data = Vec::with_capacity(batch * c.n_kv_heads * t);
            for _ in 0..batch {
                for o in &overrides {
                    data.extend(std::iter::repeat(o.unwrap()).take(t));
                }
            }
            let gb = tape.constant(Tensor::new(&[batch, c.n_kv_heads, t], data)?);
            return Ok((gb, None));
        }
        let u = UtilityPredictor::forward(tape, &lv.predictor, h)?;
        let (gb, z) = gate_bias(tape, u, gate, rng)?;
        let gb = if overrides.iter().any(Option::is_some) { tape.override_heads(gb, &overrides)? } else { gb };
        Ok((gb, Some(LayerGates { u, z })))
    }

    /// Gradient-free forward returning logits `[B, T, V]` and per-layer gates.
    pub fn logits(
        &self,
        tokens: &[usize],
        batch: usize,
        gate: &GateConfig,
        rng: &mut Rng,
    ) -> Result<(Tensor, Vec<Option<GateField>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let out = self.forward(&mut tape, &bound, tokens, batch, gate, rng)?;
        Ok((tape.value(out.logits).clone(), out.gate_fields(&tape)))
    }
}

/// Mean cross-entropy over positions with nonzero `loss_mask`.
pub fn next_token_loss(tape: &mut Tape, logits: Var, targets: &[usize], loss_mask: &[f32]) -> Result<Var> {
    tape.cross_entropy(logits, targets, loss_mask)
}
