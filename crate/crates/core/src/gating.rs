//! Utility predictor and gate transformations.
//!
//! The predictor maps each hidden state to one utility `u ∈ (0, 1)` per kv
//! head. Training turns utilities into an additive attention bias in one of
//! four ways: soft (`ln(u + ε)`), hard (`0` / `-inf` at threshold `τ`),
//! annealed (log of an interpolation between the two) or a Bernoulli sample
//! with straight-through gradients.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tape::{sigmoid, silu, Tape, Var};
use crate::tensor::{Rng, Tensor};

/// Added inside every logarithm of a utility.
pub const LOG_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GateMode {
    Soft,
    Hard,
    /// Interpolation weight toward the hard gate, in `[0, 1]`.
    Annealed(f32),
    BernoulliSte,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub window: usize,
    pub tau: f32,
    pub mode: GateMode,
    pub p_min: f32,
    pub aux_weight: f32,
    pub init_bias: f32,
    pub predictor_lr_mult: f32,
    pub predictor_weight_decay: f32,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            window: 128,
            tau: 0.5,
            mode: GateMode::Soft,
            p_min: 0.0,
            aux_weight: 0.0,
            init_bias: 5.0,
            predictor_lr_mult: 5.0,
            predictor_weight_decay: 0.1,
        }
    }
}

impl GateConfig {
    /// Desk-scale defaults (window 32).
    pub fn toy() -> Self {
        Self { window: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(0.0..0.5).contains(&self.p_min) {
            return Err(Error::Config(format!("p_min {} outside [0, 0.5)", self.p_min)));
        }
        if self.aux_weight < 0.0 {
            return Err(Error::Config("aux_weight must be non-negative".into()));
        }
        if let GateMode::Annealed(a) = self.mode {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("anneal alpha {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Utilities `u` `[B, H_kv, T]` and optional binary decisions `z` of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GateField {
    pub u: Tensor,
    pub z: Option<Tensor>,
}

impl GateField {
    pub fn new(u: Tensor) -> Self {
        Self { u, z: None }
    }

    /// Thresholds utilities: `z = 1[u >= τ]`.
    pub fn hard_gate(&self, tau: f32) -> GateField {
        let z: Vec<f32> = self.u.data().iter().map(|&u| if u >= tau { 1.0 } else { 0.0 }).collect();
        GateField {
            u: self.u.clone(),
            z: Some(Tensor::new(self.u.shape(), z).expect("same shape")),
        }
    }

    pub fn mean_utility(&self) -> f32 {
        let d = self.u.data();
        d.iter().sum::<f32>() / d.len().max(1) as f32
    }

    /// Fraction of ones in `z`, if decisions are present.
    pub fn z_density(&self) -> Option<f32> {
        self.z.as_ref().map(|z| z.data().iter().sum::<f32>() / z.numel().max(1) as f32)
    }
}

/// Two-layer SiLU MLP emitting one utility logit per kv head.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityPredictor {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub frozen: bool,
}

/// Tape handles for one predictor's parameters.
#[derive(Debug, Clone, Copy)]
pub struct PredictorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl UtilityPredictor {
    /// `W2` starts at zero so every initial utility is exactly `σ(init_bias)`.
    pub fn new(d_model: usize, d_hidden: usize, n_kv_heads: usize, init_bias: f32, rng: &mut Rng) -> Self {
        Self {
            w1: Tensor::randn(&[d_model, d_hidden], 1.0 / (d_model as f32).sqrt(), rng),
            b1: Tensor::zeros(&[d_hidden]),
            w2: Tensor::zeros(&[d_hidden, n_kv_heads]),
            b2: Tensor::full(&[n_kv_heads], init_bias),
            frozen: false,
        }
    }

    pub fn n_kv_heads(&self) -> usize {
        self.b2.numel()
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Places the parameters on the tape; frozen predictors are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> PredictorVars {
        let mut leaf = |t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable && !self.frozen;
            tape.leaf(t)
        };
        PredictorVars { w1: leaf(&self.w1), b1: leaf(&self.b1), w2: leaf(&self.w2), b2: leaf(&self.b2) }
    }

    /// `h [B, T, d_model] -> u [B, H_kv, T]`.
    pub fn forward(tape: &mut Tape, vars: &PredictorVars, h: Var) -> Result<Var> {
        let s = tape.shape(h).to_vec();
        if s.len() != 3 {
            return Err(shape_err!("predictor input must be [B, T, d], got {:?}", s));
        }
        let hidden = tape.matmul(h, vars.w1)?;
        let hidden = tape.add_bias(hidden, vars.b1)?;
        let hidden = tape.silu(hidden);
        let logits = tape.matmul(hidden, vars.w2)?;
        let logits = tape.add_bias(logits, vars.b2)?;
        let u = tape.sigmoid(logits);
        tape.permute(u, &[0, 2, 1])
    }

    /// Value-level prediction on `h [B, T, d_model]`.
    pub fn predict_utilities(&self, h: &Tensor) -> Result<GateField> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let hv = tape.constant(h.clone());
        let u = Self::forward(&mut tape, &vars, hv)?;
        Ok(GateField::new(tape.value(u).clone()))
    }

    /// Utilities for a single hidden row.
    pub fn predict_row(&self, h: &[f32]) -> Vec<f32> {
        let (d, dh) = (self.w1.shape()[0], self.w1.shape()[1]);
        let mut hidden = self.b1.data().to_vec();
        crate::tape::matmul_into(h, self.w1.data(), &mut hidden, 1, d, dh, false);
        for (x, b) in hidden.iter_mut().zip(self.b1.data()) {
            *x = silu(*x + b);
        }
        let k = self.n_kv_heads();
        let mut out = vec![0.0; k];
        crate::tape::matmul_into(&hidden, self.w2.data(), &mut out, 1, dh, k, false);
        out.iter_mut().zip(self.b2.data()).map(|(x, b)| sigmoid(*x + b)).collect()
    }
}

/// `ln(u + ε)`, differentiable in `u`.
pub fn soft_gate_bias(tape: &mut Tape, u: Var) -> Var {
    tape.log_eps(u, LOG_EPS)
}

/// Binary gate bias: `0` where `u >= τ`, `-inf` otherwise. Carries no gradient.
pub fn hard_gate_bias(tape: &mut Tape, u: Var, tau: f32) -> (Var, Tensor) {
    let uv = tape.value(u);
    let z: Vec<f32> = uv.data().iter().map(|&x| if x >= tau { 1.0 } else { 0.0 }).collect();
    let z = Tensor::new(uv.shape(), z).expect("same shape");
    let bias = tape.constant(z_to_bias(&z));
    (bias, z)
}

/// `ũ = (1 - α) u + α 1[u >= τ]`.
pub fn annealed_gate(tape: &mut Tape, u: Var, tau: f32, alpha: f32) -> Var {
    tape.anneal(u, tau, alpha)
}

/// Samples `z ~ Bernoulli(clip(u, p_min, 1 - p_min))`; the forward bias is
/// the hard mask of `z`, the backward pass is that of `ln(u + ε)`.
pub fn bernoulli_ste_gate(tape: &mut Tape, u: Var, p_min: f32, rng: &mut Rng) -> Result<(Var, Tensor)> {
    let uv = tape.value(u);
    let z: Vec<f32> = uv
        .data()
        .iter()
        .map(|&x| {
            let p = x.clamp(p_min, 1.0 - p_min);
            if rng.uniform() < p {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let z = Tensor::new(uv.shape(), z)?;
    let surrogate = soft_gate_bias(tape, u);
    let bias = tape.straight_through(z_to_bias(&z), surrogate)?;
    Ok((bias, z))
}

/// `-λ · mean(u)` over every utility in `us`.
pub fn aux_density_loss(tape: &mut Tape, us: &[Var], lambda: f32) -> Result<Var> {
    let mut total = None;
    let mut count = 0usize;
    for &u in us {
        count += tape.value(u).numel();
        let s = tape.sum(u);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    match total {
        Some(t) if count > 0 => Ok(tape.scale(t, -lambda / count as f32)),
        _ => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// `0` for open gates, `-inf` for closed ones.
pub fn z_to_bias(z: &Tensor) -> Tensor {
    let d = z.data().iter().map(|&v| if v > 0.5 { 0.0 } else { f32::NEG_INFINITY }).collect();
    Tensor::new(z.shape(), d).expect("same shape")
}

/// Gate bias for `u` under `cfg.mode`, plus the binary decisions when the
/// mode produces them.
pub fn gate_bias(tape: &mut Tape, u: Var, cfg: &GateConfig, rng: &mut Rng) -> Result<(Var, Option<Tensor>)> {
    Ok(match cfg.mode {
        GateMode::Soft => (soft_gate_bias(tape, u), None),
        GateMode::Hard => {
            let (b, z) = hard_gate_bias(tape, u, cfg.tau);
            (b, Some(z))
        }
        GateMode::Annealed(alpha) if alpha >= 1.0 => {
            let (b, z) = hard_gate_bias(tape, u, cfg.tau);
            (b, Some(z))
        }
        GateMode::Annealed(alpha) => {
            let blended = annealed_gate(tape, u, cfg.tau, alpha);
            (soft_gate_bias(tape, blended), None)
        }
        GateMode::BernoulliSte => {
            let (b, z) = bernoulli_ste_gate(tape, u, cfg.p_min, rng)?;
            (b, Some(z))
        }
    })
}
