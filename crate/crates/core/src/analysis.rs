//! Gate-density metrics, head selection for hybrid layouts, cost models and
//! the scaling-law fit.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{GateConfig, GateMode};
use crate::model::Model;
use crate::tape::row_nll;
use crate::tensor::{Rng, Tensor};

/// Fraction of gates with `x >= threshold` over positions that have left the
/// window by the end of the sequence (`s < T - window`), for a `[B, H, T]`
/// tensor of utilities or decisions. When no position has left the window
/// every position counts.
pub fn evicted_density(x: &Tensor, threshold: f32, window: usize) -> f64 {
    let t = *x.shape().last().unwrap_or(&0);
    if t == 0 {
        return 0.0;
    }
    let limit = if t > window { t - window } else { t };
    let (mut on, mut n) = (0u64, 0u64);
    for row in x.data().chunks(t) {
        on += row[..limit].iter().filter(|&&v| v >= threshold).count() as u64;
        n += limit as u64;
    }
    on as f64 / n as f64
}

/// Per-(layer, kv head) retained counts over evicted positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    /// `D[l][k]`, retained / tokens (0 where no tokens were seen).
    pub density: Vec<Vec<f64>>,
    pub retained: Vec<Vec<u64>>,
    pub tokens: Vec<Vec<u64>>,
    /// Token-weighted mean of `D`.
    pub rho: f64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl DensityReport {
    pub fn empty(n_layers: usize, n_kv_heads: usize) -> Self {
        Self {
            n_layers,
            n_kv_heads,
            density: vec![vec![0.0; n_kv_heads]; n_layers],
            retained: vec![vec![0; n_kv_heads]; n_layers],
            tokens: vec![vec![0; n_kv_heads]; n_layers],
            rho: 0.0,
            metadata: BTreeMap::new(),
        }
    }

    /// Report with the given density matrix and an equal token count per head.
    pub fn from_matrix(density: Vec<Vec<f64>>, tokens_per_head: u64) -> Result<Self> {
        let n_layers = density.len();
        let n_kv_heads = density.first().map_or(0, Vec::len);
        if n_layers == 0 || n_kv_heads == 0 || density.iter().any(|r| r.len() != n_kv_heads) {
            return Err(Error::Input("density matrix must be non-empty and rectangular".into()));
        }
        let mut r = Self::empty(n_layers, n_kv_heads);
        for l in 0..n_layers {
            for k in 0..n_kv_heads {
                let d = density[l][k];
                if !(0.0..=1.0).contains(&d) {
                    return Err(Error::Input(format!("density {d} outside [0, 1]")));
                }
                r.tokens[l][k] = tokens_per_head;
                r.retained[l][k] = (d * tokens_per_head as f64).round() as u64;
            }
        }
        r.finalize();
        r.density = density;
        Ok(r)
    }

    /// Adds decisions `z` `[B, H_kv, T]` of one layer; only positions that
    /// have left the window (`s < T - window`) count.
    pub fn accumulate(&mut self, layer: usize, z: &Tensor, window: usize) -> Result<()> {
        let s = z.shape();
        if s.len() != 3 || s[1] != self.n_kv_heads || layer >= self.n_layers {
            return Err(Error::Shape(format!("z {:?} for layer {layer} of a {}x{} report", s, self.n_layers, self.n_kv_heads)));
        }
        let t = s[2];
        let limit = t.saturating_sub(window);
        for (i, row) in z.data().chunks(t).enumerate() {
            let k = i % self.n_kv_heads;
            self.retained[layer][k] += row[..limit].iter().filter(|&&v| v > 0.5).count() as u64;
            self.tokens[layer][k] += limit as u64;
        }
        self.finalize();
        Ok(())
    }

    fn finalize(&mut self) {
        let (mut on, mut n) = (0u64, 0u64);
        for l in 0..self.n_layers {
            for k in 0..self.n_kv_heads {
                let (r, t) = (self.retained[l][k], self.tokens[l][k]);
                self.density[l][k] = if t == 0 { 0.0 } else { r as f64 / t as f64 };
                on += r;
                n += t;
            }
        }
        self.rho = if n == 0 { 0.0 } else { on as f64 / n as f64 };
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens.iter().flatten().sum()
    }

    fn weight(&self, l: usize, k: usize) -> f64 {
        self.density[l][k] * self.tokens[l][k] as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        let rows_ok = |lens: Vec<usize>| lens.len() == r.n_layers && lens.iter().all(|&n| n == r.n_kv_heads);
        if !rows_ok(r.density.iter().map(Vec::len).collect())
            || !rows_ok(r.retained.iter().map(Vec::len).collect())
            || !rows_ok(r.tokens.iter().map(Vec::len).collect())
        {
            return Err(Error::Format("density report matrices do not match its dimensions".into()));
        }
        Ok(r)
    }
}

/// Gate density over all layers, heads and evicted positions of `z` traces
/// (one `[B, H_kv, T]` tensor per layer).
pub fn density(z_traces: &[Tensor], window: usize) -> Result<DensityReport> {
    let h = z_traces.first().map_or(0, |z| z.shape().get(1).copied().unwrap_or(0));
    let mut report = DensityReport::empty(z_traces.len(), h);
    for (l, z) in z_traces.iter().enumerate() {
        report.accumulate(l, z, window)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "A_3to1_early")]
    A3to1Early,
    #[serde(rename = "B_3to1_offset")]
    B3to1Offset,
    #[serde(rename = "C_random")]
    CRandom,
    #[serde(rename = "D_densest")]
    DDensest,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Some(Strategy::A3to1Early),
            "b" => Some(Strategy::B3to1Offset),
            "c" => Some(Strategy::CRandom),
            "d" => Some(Strategy::DDensest),
            _ => None,
        }
    }
}

/// Heads (layer, kv head) that stay global in a hybrid layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub strategy: Strategy,
    pub budget: usize,
    pub heads: Vec<(usize, usize)>,
}

/// Global layers of a 3:1 pattern, in the order they are granted: the last
/// layer first, then ascending.
fn pattern_layers(n_layers: usize, offset: usize) -> Vec<usize> {
    let last = n_layers - 1;
    let mut layers = vec![last];
    layers.extend((0..last).filter(|l| l % 4 == offset));
    layers
}

pub fn select_heads(
    strategy: Strategy,
    budget: usize,
    report: &DensityReport,
    n_layers: usize,
    n_heads: usize,
    rng: &mut Rng,
) -> Result<HeadSelection> {
    if n_layers == 0 || n_heads == 0 || budget > n_layers * n_heads {
        return Err(Error::Input(format!("budget {budget} exceeds {n_layers}x{n_heads} heads")));
    }
    let mut heads = match strategy {
        Strategy::A3to1Early | Strategy::B3to1Offset => {
            if budget % n_heads != 0 {
                return Err(Error::Input(format!("budget {budget} is not a whole number of layers")));
            }
            let offset = if strategy == Strategy::A3to1Early { 0 } else { 3 };
            let pattern = pattern_layers(n_layers, offset);
            let m = budget / n_heads;
            if m > pattern.len() {
                return Err(Error::Input(format!("3:1 pattern has only {} global layers, {m} requested", pattern.len())));
            }
            pattern[..m].iter().flat_map(|&l| (0..n_heads).map(move |k| (l, k))).collect()
        }
        Strategy::CRandom => {
            let mut all: Vec<(usize, usize)> = (0..n_layers).flat_map(|l| (0..n_heads).map(move |k| (l, k))).collect();
            rng.shuffle(&mut all);
            all.truncate(budget);
            all
        }
        Strategy::DDensest => {
            if report.n_layers != n_layers || report.n_kv_heads != n_heads {
                return Err(Error::Input("report dimensions differ from the model".into()));
            }
            let mut all: Vec<(usize, usize)> = (0..n_layers).flat_map(|l| (0..n_heads).map(move |k| (l, k))).collect();
            all.sort_by(|&(al, ak), &(bl, bk)| {
                report.density[bl][bk].total_cmp(&report.density[al][ak]).then((al, ak).cmp(&(bl, bk)))
            });
            all.truncate(budget);
            all
        }
    };
    heads.sort_unstable();
    Ok(HeadSelection { strategy, budget, heads })
}

/// Share of the report's retained gate mass that falls on the selected heads.
pub fn coverage(selection: &HeadSelection, report: &DensityReport) -> Result<f64> {
    let total: f64 = (0..report.n_layers).flat_map(|l| (0..report.n_kv_heads).map(move |k| (l, k))).map(|(l, k)| report.weight(l, k)).sum();
    if total <= 0.0 {
        return Err(Error::Input("report has no retained gates".into()));
    }
    let mut picked = 0.0;
    for &(l, k) in &selection.heads {
        if l >= report.n_layers || k >= report.n_kv_heads {
            return Err(Error::Input(format!("head ({l}, {k}) outside the report")));
        }
        picked += report.weight(l, k);
    }
    Ok(picked / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    /// Non-embedding parameters.
    pub n_params: f64,
    pub n_layers: f64,
    pub n_ctx: f64,
    /// Total attention width.
    pub d_attn: f64,
    pub density: f64,
}

/// Forward FLOPs per token: `2N + 2·n_layers·n_ctx·d_attn`, with the
/// attention term scaled by the density when `sparse`.
pub fn flops_per_token(m: &FlopsModel, sparse: bool) -> f64 {
    let attn = 2.0 * m.n_layers * m.n_ctx * m.d_attn;
    if sparse {
        2.0 * m.n_params + m.density * attn
    } else {
        2.0 * m.n_params + attn
    }
}

/// Decode-time KV reads relative to dense attention for sequence length `t`:
/// `(min(w, T) + ρ_h · max(T - w, 0)) / T`, averaged over the given heads.
pub fn memory_traffic_model(head_densities: &[f64], seq_len: usize, window: usize) -> f64 {
    if seq_len == 0 || head_densities.is_empty() {
        return 1.0;
    }
    let t = seq_len as f64;
    let local = window.min(seq_len) as f64;
    let far = seq_len.saturating_sub(window) as f64;
    head_densities.iter().map(|rho| (local + rho * far) / t).sum::<f64>() / head_densities.len() as f64
}

/// Per-head densities of a report (all layers, row-major).
pub fn head_densities(report: &DensityReport) -> Vec<f64> {
    report.density.iter().flatten().copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSkipStats {
    /// (head, query tile, key block) triples lying fully outside the window.
    pub candidates: u64,
    /// Candidates whose gates are all zero.
    pub skippable: u64,
}

impl BlockSkipStats {
    pub fn fraction(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.skippable as f64 / self.candidates as f64
        }
    }
}

/// Counts key blocks of `block` positions that a tiled kernel could skip:
/// for a query tile starting at `q0`, a key block ending at `e` is outside
/// the window for every query in the tile iff `q0 - e >= window`, and it is
/// skippable when all its gates are zero. `z` holds one trace per head.
pub fn block_skip_stats(z: &[Vec<bool>], window: usize, block: usize) -> BlockSkipStats {
    let mut stats = BlockSkipStats { candidates: 0, skippable: 0 };
    if block == 0 {
        return stats;
    }
    for trace in z {
        let t = trace.len();
        let n_blocks = t.div_ceil(block);
        let zero_block: Vec<bool> = (0..n_blocks).map(|b| trace[b * block..((b + 1) * block).min(t)].iter().all(|&x| !x)).collect();
        for q_tile in 0..n_blocks {
            let q0 = q_tile * block;
            for b in 0..q_tile {
                let end = (b + 1) * block - 1;
                if q0 - end >= window {
                    stats.candidates += 1;
                    if zero_block[b] {
                        stats.skippable += 1;
                    }
                }
            }
        }
    }
    stats
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub l_inf: f64,
    pub a: f64,
    pub alpha: f64,
    pub rss: f64,
    pub r2: f64,
}

impl PowerLawFit {
    pub fn predict(&self, c: f64) -> f64 {
        self.l_inf + self.a * c.powf(-self.alpha)
    }
}

/// Log-linear least squares for a fixed `l_inf`; `None` when some point is
/// not above it.
fn fit_at(points: &[(f64, f64)], l_inf: f64) -> Option<PowerLawFit> {
    if points.iter().any(|&(_, y)| y <= l_inf) {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| (p.1 - l_inf).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = (my - slope * mx).exp();
    let mut fit = PowerLawFit { l_inf, a, alpha: -slope, rss: 0.0, r2: 0.0 };
    fit.rss = points.iter().map(|&(c, y)| (y - fit.predict(c)).powi(2)).sum();
    Some(fit)
}

/// Fits `L(C) = L_inf + A·C^(-alpha)`: a 1000-point grid over `L_inf` in
/// `(0, min NLL)`, then a second 1000-point grid between the neighbours of
/// the best candidate. Candidates are ranked by residual sum of squares in
/// NLL space.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 4 {
        return Err(Error::Input(format!("need at least 4 points, got {}", points.len())));
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) || points.iter().any(|p| !(p.0 > 0.0) || !p.1.is_finite()) {
        return Err(Error::Input("compute values must be positive and strictly increasing".into()));
    }
    let min_y = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    if min_y <= 0.0 {
        return Err(Error::Input("loss values must be positive".into()));
    }
    const GRID: usize = 1000;
    let search = |lo: f64, hi: f64| {
        let mut best: Option<PowerLawFit> = None;
        for i in 1..=GRID {
            let l = lo + (hi - lo) * i as f64 / (GRID + 1) as f64;
            if let Some(f) = fit_at(points, l) {
                if best.map_or(true, |b| f.rss < b.rss) {
                    best = Some(f);
                }
            }
        }
        best
    };
    let coarse = search(0.0, min_y).ok_or_else(|| Error::Input("no admissible asymptote".into()))?;
    let step = min_y / (GRID + 1) as f64;
    let lo = (coarse.l_inf - step).max(0.0);
    let hi = (coarse.l_inf + step).min(min_y);
    let mut best = match search(lo, hi) {
        Some(f) if f.rss < coarse.rss => f,
        _ => coarse,
    };
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let tss: f64 = points.iter().map(|p| (p.1 - mean).powi(2)).sum();
    best.r2 = if tss > 0.0 { 1.0 - best.rss / tss } else { 1.0 };
    Ok(best)
}

/// Formats with 9 significant digits.
pub fn fmt9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..9).contains(&mag) {
        return format!("{x:.8e}");
    }
    let decimals = (8 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub rho: f64,
    pub nll: f64,
}

/// Writes `tau,rho,nll` rows after checking that density never increases
/// with the threshold.
pub fn write_sweep_csv(rows: &[SweepRow], out: &mut impl Write) -> Result<()> {
    for w in rows.windows(2) {
        if w[1].tau < w[0].tau {
            return Err(Error::Contract("sweep rows must be sorted by tau".into()));
        }
        if w[1].rho > w[0].rho {
            return Err(Error::Contract(format!("density rises from {} to {} between tau {} and {}", w[0].rho, w[1].rho, w[0].tau, w[1].tau)));
        }
    }
    writeln!(out, "tau,rho,nll")?;
    for r in rows {
        writeln!(out, "{},{},{}", fmt9(r.tau), fmt9(r.rho), fmt9(r.nll))?;
    }
    Ok(())
}

pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if vals.len() != 3 {
            return Err(Error::Format(format!("line {}: expected 3 columns", i + 1)));
        }
        rows.push(SweepRow { tau: vals[0], rho: vals[1], nll: vals[2] });
    }
    Ok(rows)
}

/// Held-out sequences `[n, len]` with per-token loss masks over the full
/// sequence (targets are the next tokens).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub tokens: Vec<usize>,
    pub mask: Vec<f32>,
    pub seq_len: usize,
}

impl EvalSet {
    pub fn n_seqs(&self) -> usize {
        self.tokens.len() / self.seq_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Mean NLL over masked targets.
    pub nll: f64,
    pub n_targets: u64,
    /// Per-layer density report when the model has gates and the mode yields
    /// decisions.
    pub report: Option<DensityReport>,
}

/// Evaluates `model` on `set` with the given gate configuration.
pub fn evaluate(model: &Model, set: &EvalSet, gate: &GateConfig, batch: usize) -> Result<EvalResult> {
    let c = &model.config;
    let len = set.seq_len;
    if len < 2 || set.tokens.len() % len != 0 || set.mask.len() != set.tokens.len() {
        return Err(Error::Input("evaluation set layout is inconsistent".into()));
    }
    let mut rng = Rng::new(0);
    let mut report = DensityReport::empty(c.n_layers, c.n_kv_heads);
    let mut has_z = false;
    let (mut total, mut count) = (0.0f64, 0u64);
    let n = set.n_seqs();
    let batch = batch.max(1);
    for start in (0..n).step_by(batch) {
        let b = batch.min(n - start);
        let mut inputs = Vec::with_capacity(b * (len - 1));
        for s in start..start + b {
            inputs.extend_from_slice(&set.tokens[s * len..(s + 1) * len - 1]);
        }
        let (logits, fields) = model.logits(&inputs, b, gate, &mut rng)?;
        let v = c.vocab_size;
        for (i, s) in (start..start + b).enumerate() {
            for p in 0..len - 1 {
                let w = set.mask[s * len + p + 1];
                if w > 0.0 {
                    let row = &logits.data()[((i * (len - 1)) + p) * v..((i * (len - 1)) + p + 1) * v];
                    total += row_nll(row, set.tokens[s * len + p + 1]) as f64;
                    count += 1;
                }
            }
        }
        for (l, f) in fields.iter().enumerate() {
            if let Some(z) = f.as_ref().and_then(|f| f.z.as_ref()) {
                report.accumulate(l, z, gate.window)?;
                has_z = true;
            }
        }
    }
    if count == 0 {
        return Err(Error::Contract("evaluation set has no supervised targets".into()));
    }
    Ok(EvalResult { nll: total / count as f64, n_targets: count, report: has_z.then_some(report) })
}

/// NLL and density of a gated model under hard gating at each threshold.
pub fn sweep_tau(model: &Model, set: &EvalSet, gate: &GateConfig, taus: &[f64], batch: usize) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
        }
        let g = GateConfig { tau: tau as f32, mode: GateMode::Hard, ..gate.clone() };
        let r = evaluate(model, set, &g, batch)?;
        let rho = r.report.as_ref().map_or(1.0, |rep| rep.rho);
        rows.push(SweepRow { tau, rho, nll: r.nll });
    }
    Ok(rows)
}
