//! `spkv`: train, evaluate and inspect self-pruned KV attention models.

mod config;

use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use spkv::analysis::{
    coverage, evaluate, fit_power_law, fmt9, memory_traffic_model, select_heads, sweep_tau, write_sweep_csv,
    DensityReport, EvalSet, Strategy,
};
use spkv::baselines::{chunked_prefill_eval, write_records, BaselineRecord, EvictionPolicy, PolicyKind};
use spkv::checkpoint::Checkpoint;
use spkv::gating::{GateConfig, GateMode};
use spkv::kvcache::{CacheConfig, DecodeState};
use spkv::model::Model;
use spkv::tasks::{gen_palindrome_batch, PalindromeSource};
use spkv::training::{prepare_model, train_with, TrainLog, TrainMode};
use spkv::{Error, Rng};

use config::{write_snapshot, RunFile};

pub enum CliError {
    /// Bad flags, config or inputs: exit code 2.
    Usage(anyhow::Error),
    /// Failure while running: exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => CliError::Usage(e),
            _ => CliError::Runtime(e),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(anyhow!("{msg}"))
}

#[derive(Parser)]
#[command(name = "spkv", version, about = "Self-pruned KV attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the palindrome task.
    Train(TrainArgs),
    /// Write a held-out palindrome evaluation set.
    GenData(GenDataArgs),
    /// Hard-gate NLL and density over a list of thresholds.
    SweepTau(SweepArgs),
    /// Per-(layer, kv head) gate density of a checkpoint on an evaluation set.
    DensityReport(ReportArgs),
    /// Incremental decoding with the paged cache.
    CacheSim(CacheSimArgs),
    /// Choose global heads from a density report.
    Nas(NasArgs),
    /// Post-hoc eviction baselines on a dense checkpoint.
    Baselines(BaselineArgs),
    /// Fit L = L_inf + a * C^-alpha to (flops, nll) points.
    FitScaling(FitArgs),
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// dense, soft-cpt, tahg, bernoulli-ste, from-scratch or frozen-llm; overrides the config.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_seqs: usize,
    #[arg(long, default_value_t = 12345)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated thresholds in [0, 1].
    #[arg(long)]
    taus: String,
    #[arg(long)]
    eval_set: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    eval_set: PathBuf,
    /// Defaults to the checkpoint's threshold.
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct CacheSimArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt_tokens: usize,
    #[arg(long)]
    gen_tokens: usize,
    #[arg(long)]
    tau: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed page pool size; the pool grows on demand when absent.
    #[arg(long)]
    pages: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct NasArgs {
    #[arg(long)]
    report: PathBuf,
    /// a, b, c or d.
    #[arg(long)]
    strategy: String,
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BaselineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    eval_set: PathBuf,
    /// none, streaming-llm, h2o or random.
    #[arg(long)]
    policy: String,
    /// Kept fraction of positions outside the window (h2o, random).
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value_t = 4)]
    sinks: usize,
    /// Defaults to the checkpoint's gate window.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 16)]
    chunk: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct FitArgs {
    /// CSV with a header line and `flops,nll` rows.
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::SweepTau(a) => cmd_sweep(a),
        Command::DensityReport(a) => cmd_report(a),
        Command::CacheSim(a) => cmd_cache_sim(a),
        Command::Nas(a) => cmd_nas(a),
        Command::Baselines(a) => cmd_baselines(a),
        Command::FitScaling(a) => cmd_fit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display())).map_err(CliError::Runtime)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display())).map_err(CliError::Runtime)
}

fn load_eval_set(path: &Path) -> CliResult<EvalSet> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read eval set {}", path.display())).map_err(CliError::Usage)?;
    let set: EvalSet = serde_json::from_str(&text).with_context(|| format!("invalid eval set {}", path.display())).map_err(CliError::Usage)?;
    if set.seq_len < 2 || set.tokens.len() % set.seq_len != 0 || set.mask.len() != set.tokens.len() {
        return Err(usage(format!("eval set {} has an inconsistent layout", path.display())));
    }
    Ok(set)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display())).map_err(CliError::Runtime)
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut run = RunFile::load(&a.config)?;
    if let Some(m) = &a.mode {
        run.train.mode = TrainMode::parse(m).ok_or_else(|| usage(format!("unknown mode {m:?}")))?;
    }
    if let Some(s) = a.seed {
        run.seed = s;
    }
    let mode = run.train.mode;
    let mut rng = Rng::new(run.seed);
    let mut model = match &a.init_checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            run.model = ck.model.config.clone();
            ck.model
        }
        None if mode.converts_dense() => {
            return Err(usage(format!("mode {} continues from a dense model and needs --init-checkpoint", mode.name())));
        }
        None => Model::new(run.model.clone(), run.gate.init_bias, &mut rng)?,
    };
    run.validate().map_err(CliError::Usage)?;
    prepare_model(&mut model, mode, &run.gate, &mut rng).map_err(|e| match e {
        Error::Config(_) => usage(e),
        e => e.into(),
    })?;
    run.model = model.config.clone();
    out_dir(&a.out)?;
    write_snapshot(&a.out, "train", a, Some(&run))?;

    let mut source = PalindromeSource { spec: run.task.clone() };
    let mut log = TrainLog::default();
    let result = train_with(model, &mut source, &run.train, &run.gate, &mut rng, &mut |_, r| {
        log.records.push(r.clone());
        ControlFlow::Continue(())
    });
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf)?;
    write_file(&a.out.join("train_log.jsonl"), &buf)?;
    let (ck, _) = result.context("training failed")?;
    ck.save(&a.out.join("checkpoint.bin")).context("cannot save checkpoint")?;
    if let Some(r) = log.records.last() {
        println!("steps {}", log.records.len());
        println!("final_loss {}", fmt9(r.loss as f64));
        if let (Some(u), Some(rho)) = (r.mean_u, r.rho) {
            println!("final_mean_u {}", fmt9(u as f64));
            println!("final_rho {}", fmt9(rho as f64));
        }
    }
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> CliResult<()> {
    let run = RunFile::load(&a.config)?;
    if a.n_seqs == 0 {
        return Err(usage("--n-seqs must be positive"));
    }
    let (tokens, mask) = gen_palindrome_batch(&run.task, a.n_seqs, &mut Rng::new(a.seed))?;
    let set = EvalSet { tokens, mask, seq_len: run.task.seq_len() };
    out_dir(&a.out)?;
    write_snapshot(&a.out, "gen-data", a, Some(&run))?;
    write_file(&a.out.join("eval_set.json"), serde_json::to_string(&set).context("serialize")?.as_bytes())?;
    println!("sequences {}", a.n_seqs);
    Ok(())
}

fn parse_taus(list: &str) -> CliResult<Vec<f64>> {
    let mut taus = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let t: f64 = item.parse().map_err(|_| usage(format!("invalid tau {item:?}")))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(usage(format!("tau {item} outside [0, 1]")));
        }
        taus.push(t);
    }
    if taus.is_empty() {
        return Err(usage("--taus is empty"));
    }
    if taus.windows(2).any(|w| w[1] < w[0]) {
        eprintln!("warning: tau list is not sorted; sorting it");
        taus.sort_by(f64::total_cmp);
    }
    Ok(taus)
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let taus = parse_taus(&a.taus)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let set = load_eval_set(&a.eval_set)?;
    let rows = sweep_tau(&ck.model, &set, &ck.gate, &taus, a.batch)?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf)?;
    out_dir(&a.out)?;
    write_snapshot(&a.out, "sweep-tau", a, None)?;
    write_file(&a.out.join("sweep.csv"), &buf)?;
    std::io::stdout().write_all(&buf).context("stdout")?;
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if !ck.model.config.uses_gates() {
        return Err(usage("checkpoint has no gated heads"));
    }
    let set = load_eval_set(&a.eval_set)?;
    let gate = GateConfig { tau: a.tau.unwrap_or(ck.gate.tau), mode: GateMode::Hard, ..ck.gate.clone() };
    let result = evaluate(&ck.model, &set, &gate, 8)?;
    let report = result.report.ok_or_else(|| CliError::Runtime(anyhow!("evaluation produced no gate decisions")))?;
    out_dir(&a.out)?;
    write_snapshot(&a.out, "density-report", a, None)?;
    write_file(&a.out.join("density_report.json"), report.to_json()?.as_bytes())?;
    println!("rho {}", fmt9(report.rho));
    println!("nll {}", fmt9(result.nll));
    Ok(())
}

#[derive(Serialize)]
struct CacheSimOutput {
    tokens: usize,
    residual: f64,
    traffic_ratio: f64,
    memory: spkv::kvcache::MemoryReport,
}

fn cmd_cache_sim(a: &CacheSimArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.tau) {
        return Err(usage(format!("tau {} outside [0, 1]", a.tau)));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = &ck.model;
    let c = &model.config;
    let n = a.prompt_tokens + a.gen_tokens;
    if a.prompt_tokens == 0 || n > c.max_seq_len {
        return Err(usage(format!("need 1 <= prompt + generated tokens <= {}", c.max_seq_len)));
    }
    let gate = GateConfig { tau: a.tau, mode: GateMode::Hard, ..ck.gate.clone() };
    let cache = match a.pages {
        Some(p) => CacheConfig { initial_pages: p, growable: false, ..CacheConfig::default() },
        None => CacheConfig::default(),
    };
    let mut rng = Rng::new(a.seed);
    let mut tokens: Vec<usize> = (0..a.prompt_tokens).map(|_| rng.below(c.vocab_size)).collect();
    let mut state = DecodeState::new(model, &gate, cache)?;
    let mut step_logits = Vec::with_capacity(n);
    for i in 0..n {
        let logits = state.decode_step(tokens[i])?;
        state.check_invariants()?;
        if i + 1 >= a.prompt_tokens && tokens.len() < n {
            let next = logits.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).map_or(0, |(j, _)| j);
            tokens.push(next);
        }
        step_logits.push(logits);
    }
    let (full, _) = model.logits(&tokens, 1, &gate, &mut Rng::new(0))?;
    let v = c.vocab_size;
    let residual = step_logits
        .iter()
        .enumerate()
        .flat_map(|(t, row)| row.iter().zip(&full.data()[t * v..(t + 1) * v]).map(|(x, y)| (x - y).abs() as f64))
        .fold(0.0, f64::max);
    let far = n.saturating_sub(gate.window);
    let densities: Vec<f64> = (0..c.n_layers)
        .flat_map(|l| (0..c.n_kv_heads).map(move |k| (l, k)))
        .map(|(l, k)| if far == 0 { 1.0 } else { state.head(l, k).retained_count() as f64 / far as f64 })
        .collect();
    let out = CacheSimOutput {
        tokens: n,
        residual,
        traffic_ratio: memory_traffic_model(&densities, n, gate.window),
        memory: state.memory_report(),
    };
    out_dir(&a.out)?;
    write_snapshot(&a.out, "cache-sim", a, None)?;
    write_file(&a.out.join("cache_sim.json"), serde_json::to_string_pretty(&out).context("serialize")?.as_bytes())?;
    println!("tokens {n}");
    println!("residual {}", fmt9(out.residual));
    println!("traffic_ratio {}", fmt9(out.traffic_ratio));
    println!("density {}", fmt9(out.memory.density));
    println!("bytes_window {}", out.memory.bytes_window);
    println!("bytes_longterm {}", out.memory.bytes_longterm);
    println!("pages_used {}", out.memory.pages_used);
    println!("headroom_grows {}", out.memory.headroom_grows);
    Ok(())
}

fn cmd_nas(a: &NasArgs) -> CliResult<()> {
    let strategy = Strategy::parse(&a.strategy).ok_or_else(|| usage(format!("unknown strategy {:?}", a.strategy)))?;
    let text = fs::read_to_string(&a.report).with_context(|| format!("cannot read report {}", a.report.display())).map_err(CliError::Usage)?;
    let report = DensityReport::from_json(&text).map_err(|e| usage(format!("invalid report {}: {e}", a.report.display())))?;
    let selection = select_heads(strategy, a.budget, &report, report.n_layers, report.n_kv_heads, &mut Rng::new(a.seed))
        .map_err(|e| usage(e))?;
    let cov = coverage(&selection, &report)?;
    out_dir(&a.out)?;
    write_snapshot(&a.out, "nas", a, None)?;
    let json = serde_json::json!({ "selection": selection, "coverage": cov });
    write_file(&a.out.join("selection.json"), serde_json::to_string_pretty(&json).context("serialize")?.as_bytes())?;
    println!("heads {:?}", selection.heads);
    println!("coverage {}", fmt9(cov));
    Ok(())
}

/// Target-weighted mean NLL and mean density of `policy` over the set.
fn prefill_eval(model: &Model, set: &EvalSet, policy: &EvictionPolicy) -> CliResult<(f64, f64)> {
    let (mut nll, mut count, mut density) = (0.0, 0usize, 0.0);
    let len = set.seq_len;
    for s in 0..set.n_seqs() {
        let tokens = &set.tokens[s * len..(s + 1) * len];
        let mask = &set.mask[s * len..(s + 1) * len];
        let r = chunked_prefill_eval(model, tokens, policy)?;
        let n = mask[1..].iter().filter(|&&m| m > 0.0).count();
        if let Some(m) = r.masked_nll(mask) {
            nll += m * n as f64;
            count += n;
        }
        density += r.density;
    }
    if count == 0 {
        return Err(usage("eval set has no supervised targets"));
    }
    Ok((nll / count as f64, density / set.n_seqs() as f64))
}

fn cmd_baselines(a: &BaselineArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let set = load_eval_set(&a.eval_set)?;
    let kind = match a.policy.as_str() {
        "none" => PolicyKind::None,
        "streaming-llm" => PolicyKind::StreamingLlm { n_sinks: a.sinks },
        "h2o" => PolicyKind::H2o { budget_fraction: a.fraction, n_sinks: a.sinks },
        "random" => PolicyKind::Random { keep_fraction: a.fraction, seed: a.seed, n_sinks: a.sinks },
        p => return Err(usage(format!("unknown policy {p:?}"))),
    };
    let window = a.window.unwrap_or(ck.gate.window);
    let policy = EvictionPolicy { kind, window, chunk_size: a.chunk };
    let (dense, _) = prefill_eval(&ck.model, &set, &EvictionPolicy { kind: PolicyKind::None, ..policy })?;
    let (nll, density) = prefill_eval(&ck.model, &set, &policy)?;
    let record = BaselineRecord { policy: policy.name(), density, nll, delta_nll_vs_dense: nll - dense };
    let mut buf = Vec::new();
    write_records(std::slice::from_ref(&record), &mut buf)?;
    out_dir(&a.out)?;
    write_snapshot(&a.out, "baselines", a, None)?;
    write_file(&a.out.join("baselines.jsonl"), &buf)?;
    println!("policy {}", record.policy);
    println!("density {}", fmt9(record.density));
    println!("nll {}", fmt9(record.nll));
    println!("dense_nll {}", fmt9(dense));
    println!("delta_nll {}", fmt9(record.delta_nll_vs_dense));
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.points).with_context(|| format!("cannot read {}", a.points.display())).map_err(CliError::Usage)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| usage(format!("{}:{}: expected two numbers", a.points.display(), i + 1)))?;
        if vals.len() != 2 {
            return Err(usage(format!("{}:{}: expected flops,nll", a.points.display(), i + 1)));
        }
        points.push((vals[0], vals[1]));
    }
    let fit = fit_power_law(&points).map_err(|e| usage(e))?;
    out_dir(&a.out)?;
    write_snapshot(&a.out, "fit-scaling", a, None)?;
    write_file(&a.out.join("fit.json"), serde_json::to_string_pretty(&fit).context("serialize")?.as_bytes())?;
    println!("l_inf {}", fmt9(fit.l_inf));
    println!("a {}", fmt9(fit.a));
    println!("alpha {}", fmt9(fit.alpha));
    println!("rss {}", fmt9(fit.rss));
    println!("r2 {}", fmt9(fit.r2));
    Ok(())
}
