//! Training loop: AdamW with a separate predictor group, warmup-stable-cosine
//! schedule, and the gate modes used across dense, continued and from-scratch
//! runs.

use std::io::Write;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::analysis::evicted_density;
use crate::checkpoint::{AdamState, Checkpoint};
use crate::error::{Error, Result};
use crate::gating::{aux_density_loss, GateConfig, GateMode};
use crate::model::{next_token_loss, AttentionKind, Model, ParamGroup};
use crate::tape::Tape;
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[serde(rename = "dense")]
    DenseBaseline,
    #[serde(rename = "soft-cpt")]
    SoftGatedCpt,
    Tahg,
    BernoulliSte,
    #[serde(rename = "from-scratch")]
    FromScratchGated,
    FrozenLlm,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::DenseBaseline,
        TrainMode::SoftGatedCpt,
        TrainMode::Tahg,
        TrainMode::BernoulliSte,
        TrainMode::FromScratchGated,
        TrainMode::FrozenLlm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::DenseBaseline => "dense",
            TrainMode::SoftGatedCpt => "soft-cpt",
            TrainMode::Tahg => "tahg",
            TrainMode::BernoulliSte => "bernoulli-ste",
            TrainMode::FromScratchGated => "from-scratch",
            TrainMode::FrozenLlm => "frozen-llm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Modes that start from a dense checkpoint and convert its global layers.
    pub fn converts_dense(self) -> bool {
        matches!(self, TrainMode::SoftGatedCpt | TrainMode::Tahg | TrainMode::BernoulliSte | TrainMode::FrozenLlm)
    }

    fn two_phase(self) -> bool {
        matches!(self, TrainMode::Tahg | TrainMode::FromScratchGated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub decay_start_step: usize,
    pub peak_lr: f32,
    pub final_lr_fraction: f32,
    pub batch_size: usize,
    pub phase2_start_fraction: f32,
    pub anneal_steps: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            warmup_steps: 100,
            decay_start_step: 500,
            peak_lr: 3e-3,
            final_lr_fraction: 0.01,
            batch_size: 8,
            phase2_start_fraction: 0.75,
            anneal_steps: 500,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            mode: TrainMode::DenseBaseline,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be positive");
        }
        if !(self.warmup_steps <= self.decay_start_step && self.decay_start_step <= self.total_steps) {
            return bad("need warmup_steps <= decay_start_step <= total_steps");
        }
        if !(self.phase2_start_fraction > 0.0 && self.phase2_start_fraction <= 1.0) {
            return bad("phase2_start_fraction must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) || self.peak_lr <= 0.0 {
            return bad("need peak_lr > 0 and final_lr_fraction in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("invalid Adam hyperparameters");
        }
        Ok(())
    }

    fn decay_span(&self) -> usize {
        self.total_steps - self.decay_start_step
    }

    /// First step of threshold-aware hard gating.
    pub fn phase2_boundary(&self) -> usize {
        self.decay_start_step + (self.phase2_start_fraction as f64 * self.decay_span() as f64).round() as usize
    }

    /// `anneal_steps`, shrunk to 10% of the decay span when it does not fit.
    pub fn effective_anneal_steps(&self) -> usize {
        if self.anneal_steps > self.decay_span() {
            (self.decay_span() as f64 * 0.1).round() as usize
        } else {
            self.anneal_steps
        }
    }
}

/// Linear warmup from 0, flat at peak, then cosine down to
/// `final_lr_fraction · peak`, reached exactly at `total_steps - 1`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f32 {
    let peak = cfg.peak_lr as f64;
    if step < cfg.warmup_steps {
        return (peak * step as f64 / cfg.warmup_steps as f64) as f32;
    }
    if step < cfg.decay_start_step {
        return cfg.peak_lr;
    }
    let floor = peak * cfg.final_lr_fraction as f64;
    let span = cfg.total_steps.saturating_sub(1).saturating_sub(cfg.decay_start_step);
    if span == 0 {
        return if step == cfg.decay_start_step { cfg.peak_lr } else { floor as f32 };
    }
    let progress = ((step - cfg.decay_start_step) as f64 / span as f64).min(1.0);
    (floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Dense,
    Soft,
    Annealed,
    Hard,
    Ste,
}

/// Schedule of the two-phase protocol: soft before the boundary, then an
/// annealed ramp of `α` to 1, then hard gates.
pub fn phase_of(step: usize, cfg: &TrainConfig) -> (Phase, f32) {
    let boundary = cfg.phase2_boundary();
    if step < boundary {
        return (Phase::Soft, 0.0);
    }
    let ramp = cfg.effective_anneal_steps();
    let alpha = if ramp == 0 { 1.0 } else { ((step - boundary) as f32 / ramp as f32).clamp(0.0, 1.0) };
    if alpha >= 1.0 {
        (Phase::Hard, 1.0)
    } else {
        (Phase::Annealed, alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
    pub aux: f32,
    pub mean_u: Option<f32>,
    pub rho: Option<f32>,
    pub phase: Phase,
    pub alpha: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// One training batch: `inputs` and `targets` are `[batch, seq_len]`, and
/// `loss_mask` weights each target.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<f32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Splits full sequences `[batch, L]` with a per-token mask into
    /// next-token inputs/targets of length `L - 1`.
    pub fn from_sequences(tokens: &[usize], mask: &[f32], batch: usize) -> Result<Self> {
        if batch == 0 || tokens.len() % batch != 0 || mask.len() != tokens.len() {
            return Err(Error::Input("sequence buffer does not match batch size".into()));
        }
        let len = tokens.len() / batch;
        if len < 2 {
            return Err(Error::Input("sequences need at least two tokens".into()));
        }
        let (mut inputs, mut targets, mut loss_mask) = (Vec::new(), Vec::new(), Vec::new());
        for b in 0..batch {
            let row = &tokens[b * len..(b + 1) * len];
            inputs.extend_from_slice(&row[..len - 1]);
            targets.extend_from_slice(&row[1..]);
            loss_mask.extend_from_slice(&mask[b * len + 1..(b + 1) * len]);
        }
        Ok(Self { inputs, targets, loss_mask, batch, seq_len: len - 1 })
    }
}

pub trait DataSource {
    fn next_batch(&mut self, batch: usize, rng: &mut Rng) -> Result<Batch>;
}

/// Prepares `model` for `mode`: continued-training modes turn global layers
/// into gated ones with fresh, fully open predictors.
pub fn prepare_model(model: &mut Model, mode: TrainMode, gate: &GateConfig, rng: &mut Rng) -> Result<()> {
    if mode.converts_dense() {
        for l in 0..model.config.n_layers {
            if model.config.layer_kinds[l] == AttentionKind::Global {
                model.config.layer_kinds[l] = AttentionKind::SelfPrunedKV;
                model.reset_predictor(l, gate.init_bias, rng);
            }
        }
    }
    if mode != TrainMode::DenseBaseline && !model.config.uses_gates() {
        return Err(Error::Config(format!("mode {} needs at least one gated head", mode.name())));
    }
    if mode == TrainMode::DenseBaseline && model.config.uses_gates() {
        return Err(Error::Config("dense mode needs a model without gated heads".into()));
    }
    model.set_predictors_frozen(false);
    Ok(())
}

struct AdamW<'a> {
    cfg: &'a TrainConfig,
    gate: &'a GateConfig,
    groups: Vec<ParamGroup>,
    decays: Vec<bool>,
    state: AdamState,
}

impl AdamW<'_> {
    fn step(&mut self, model: &mut Model, grads: &[Option<Vec<f32>>], lr: f32) {
        let c = self.cfg;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in model.params_mut().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (plr, wd) = match self.groups[i] {
                ParamGroup::Base => (lr, c.weight_decay),
                ParamGroup::Predictor => (lr * self.gate.predictor_lr_mult, self.gate.predictor_weight_decay),
            };
            let wd = if self.decays[i] { wd } else { 0.0 };
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w -= plr * (update + wd * *w);
            }
        }
    }
}

fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f32) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|&x| (x as f64) * (x as f64)).sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
}

/// Runs `cfg.total_steps` optimizer steps (or until `on_step` breaks).
/// `model` must already be prepared for the mode (see [`prepare_model`]).
/// `on_step` sees every record, including the diagnostic record written
/// before a non-finite loss aborts the run.
pub fn train_with(
    mut model: Model,
    data: &mut dyn DataSource,
    cfg: &TrainConfig,
    gate: &GateConfig,
    rng: &mut Rng,
    on_step: &mut dyn FnMut(&Model, &LogRecord) -> ControlFlow<()>,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    gate.validate()?;
    let mut data_rng = rng.fork();
    let mut gate_rng = rng.fork();
    let gated = model.config.uses_gates();
    let mut opt = AdamW {
        cfg,
        gate,
        groups: model.param_groups(),
        decays: model.param_is_matrix(),
        state: AdamState::zeros(&model),
    };
    let mut log = TrainLog::default();
    for step in 0..cfg.total_steps {
        let lr = lr_at(step, cfg);
        let (phase, alpha, mode) = if !gated {
            (Phase::Dense, 0.0, gate.mode)
        } else if cfg.mode.two_phase() {
            match phase_of(step, cfg) {
                (Phase::Soft, a) => (Phase::Soft, a, GateMode::Soft),
                (Phase::Annealed, a) => (Phase::Annealed, a, GateMode::Annealed(a)),
                (p, a) => (p, a, GateMode::Hard),
            }
        } else if cfg.mode == TrainMode::BernoulliSte {
            (Phase::Ste, 0.0, GateMode::BernoulliSte)
        } else {
            (Phase::Soft, 0.0, GateMode::Soft)
        };
        if cfg.mode.two_phase() && step >= cfg.phase2_boundary() {
            model.set_predictors_frozen(true);
        }
        let step_gate = GateConfig { mode, ..gate.clone() };

        let batch = data.next_batch(cfg.batch_size, &mut data_rng)?;
        let mut tape = Tape::new();
        let frozen_base = cfg.mode == TrainMode::FrozenLlm;
        let bound = model.bind(&mut tape, |g| !(frozen_base && g == ParamGroup::Base));
        let out = model.forward(&mut tape, &bound, &batch.inputs, batch.batch, &step_gate, &mut gate_rng)?;
        let loss = next_token_loss(&mut tape, out.logits, &batch.targets, &batch.loss_mask)?;
        let us: Vec<_> = out.gates.iter().flatten().map(|g| g.u).collect();
        let (total, aux) = if gated && gate.aux_weight > 0.0 {
            let aux = aux_density_loss(&mut tape, &us, gate.aux_weight)?;
            (tape.add(loss, aux)?, tape.value(aux).item())
        } else {
            (loss, 0.0)
        };
        let loss_value = tape.value(loss).item();

        let (mean_u, rho) = if us.is_empty() {
            (None, None)
        } else {
            let (mut sum, mut n) = (0.0f64, 0usize);
            let mut rhos = Vec::new();
            for &u in &us {
                let t = tape.value(u);
                sum += t.data().iter().map(|&x| x as f64).sum::<f64>();
                n += t.numel();
                rhos.push(evicted_density(t, gate.tau, gate.window));
            }
            let rho = rhos.iter().sum::<f64>() / rhos.len() as f64;
            (Some((sum / n as f64) as f32), Some(rho as f32))
        };
        let record = LogRecord { step, lr, loss: loss_value, aux, mean_u, rho, phase, alpha };
        if !loss_value.is_finite() || !aux.is_finite() {
            let _ = on_step(&model, &record);
            log.records.push(record);
            return Err(Error::NonFinite { step, loss: loss_value });
        }

        let mut grads = tape.backward(total)?;
        let mut flat: Vec<Option<Vec<f32>>> = bound.vars.iter().map(|&v| grads.take(v)).collect();
        clip_global_norm(&mut flat, cfg.grad_clip);
        opt.step(&mut model, &flat, lr);

        let flow = on_step(&model, &record);
        log.records.push(record);
        if flow.is_break() {
            break;
        }
    }
    let step = log.records.len() as u64;
    let checkpoint = Checkpoint { model, gate: gate.clone(), step, rng: rng.clone(), optimizer: Some(opt.state) };
    Ok((checkpoint, log))
}

/// Prepares `model` for `cfg.mode` and trains it to completion.
pub fn train(
    mut model: Model,
    data: &mut dyn DataSource,
    cfg: &TrainConfig,
    gate: &GateConfig,
    rng: &mut Rng,
) -> Result<(Checkpoint, TrainLog)> {
    prepare_model(&mut model, cfg.mode, gate, rng)?;
    train_with(model, data, cfg, gate, rng, &mut |_, _| ControlFlow::Continue(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: usize, warmup: usize, decay: usize) -> TrainConfig {
        TrainConfig { total_steps: total, warmup_steps: warmup, decay_start_step: decay, peak_lr: 1e-3, ..Default::default() }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg(1000, 100, 400);
        assert_eq!(lr_at(0, &c), 0.0);
        assert!((lr_at(50, &c) - 5e-4).abs() < 1e-9);
        assert_eq!(lr_at(100, &c), 1e-3);
        assert_eq!(lr_at(400, &c), 1e-3);
        let last = lr_at(999, &c);
        assert!((last - 1e-5).abs() <= 0.01 * 1e-5, "{last}");
        // Midpoint of the cosine: halfway between peak and floor.
        let mid = lr_at(400 + 599 / 2, &c) as f64;
        let oracle = 1e-5 + (1e-3 - 1e-5) * 0.5 * (1.0 + (std::f64::consts::PI * 299.0 / 599.0).cos());
        assert!((mid - oracle).abs() < 1e-9);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let c = cfg(300, 20, 120);
        for s in 20..299 {
            assert!(lr_at(s + 1, &c) <= lr_at(s, &c));
        }
    }

    #[test]
    fn phase_schedule() {
        let mut c = cfg(2000, 100, 1000);
        c.anneal_steps = 200;
        assert_eq!(c.phase2_boundary(), 1750);
        assert_eq!(phase_of(1749, &c), (Phase::Soft, 0.0));
        assert_eq!(phase_of(1750, &c), (Phase::Annealed, 0.0));
        assert_eq!(phase_of(1850, &c), (Phase::Annealed, 0.5));
        assert_eq!(phase_of(1950, &c), (Phase::Hard, 1.0));
        assert_eq!(phase_of(1999, &c), (Phase::Hard, 1.0));
        c.anneal_steps = 0;
        assert_eq!(phase_of(1750, &c), (Phase::Hard, 1.0));
    }

    #[test]
    fn anneal_span_scales_down_when_too_long() {
        let c = cfg(600, 50, 200);
        assert_eq!(c.effective_anneal_steps(), 40);
        let c = cfg(3000, 50, 1000);
        assert_eq!(c.effective_anneal_steps(), 500);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(100, 10, 50).validate().is_ok());
        assert!(cfg(100, 60, 50).validate().is_err());
        assert!(cfg(100, 10, 150).validate().is_err());
        let mut c = cfg(100, 10, 50);
        c.phase2_start_fraction = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(TrainMode::parse(m.name()), Some(m));
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
    }

    #[test]
    fn batch_split_shifts_mask() {
        let b = Batch::from_sequences(&[1, 2, 3, 4, 5, 6], &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(b.inputs, vec![1, 2, 4, 5]);
        assert_eq!(b.targets, vec![2, 3, 5, 6]);
        assert_eq!(b.loss_mask, vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(vec![3.0, 0.0]), None, Some(vec![4.0])];
        clip_global_norm(&mut g, 1.0);
        let n: f32 = g.iter().flatten().flatten().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_jsonl_field_names() {
        let log = TrainLog {
            records: vec![LogRecord {
                step: 3,
                lr: 0.5,
                loss: 1.0,
                aux: 0.0,
                mean_u: None,
                rho: Some(0.25),
                phase: Phase::Annealed,
                alpha: 0.5,
            }],
        };
        let mut out = Vec::new();
        log.write_jsonl(&mut out).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec!["step", "lr", "loss", "aux", "mean_u", "rho", "phase", "alpha"];
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
        assert_eq!(v["phase"], "annealed");
        assert_eq!(TrainLog::read_jsonl(std::str::from_utf8(&out).unwrap()).unwrap(), log);
    }
}
