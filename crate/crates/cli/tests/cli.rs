use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spkv::analysis::{evaluate, DensityReport, EvalSet};
use spkv::checkpoint::Checkpoint;
use spkv::gating::{GateConfig, GateMode};
use spkv::model::AttentionKind;
use spkv::training::TrainLog;
use tempfile::TempDir;

const TINY: &str = r#"
seed = 3

[model]
n_layers = 2
d_model = 16
n_q_heads = 2
n_kv_heads = 1
d_head = 8
d_ffn = 32
vocab_size = 128
max_seq_len = 48
layer_kinds = ["Global", "Global"]

[train]
total_steps = 12
warmup_steps = 2
decay_start_step = 6
batch_size = 4
anneal_steps = 2

[gate]
window = 4

[task]
n_numbers = 3
instruction_len = 10
"#;

fn spkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spkv")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, mode: &str, init: Option<&str>) -> PathBuf {
        let cfg = self.path("tiny.toml");
        let dir = self.path(out);
        let mut args = vec!["train", "--config", p(&cfg), "--mode", mode, "--out", p(&dir)];
        let init_path;
        if let Some(i) = init {
            init_path = self.path(i).join("checkpoint.bin");
            args.extend(["--init-checkpoint", p(&init_path)]);
        }
        ok(&spkv(&args));
        dir
    }

    fn eval_set(&self) -> PathBuf {
        let cfg = self.path("tiny.toml");
        let dir = self.path("data");
        ok(&spkv(&["gen-data", "--config", p(&cfg), "--n-seqs", "6", "--out", p(&dir)]));
        dir.join("eval_set.json")
    }
}

fn read_log(dir: &Path) -> TrainLog {
    TrainLog::read_jsonl(&std::fs::read_to_string(dir.join("train_log.jsonl")).unwrap()).unwrap()
}

fn stdout_value(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse::<f64>().unwrap()))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let out = spkv(&["train", "--config", "/nonexistent/run.toml", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let f = Fixture::new();
    let bad = f.path("bad.toml");
    std::fs::write(&bad, TINY.replace("window = 4", "window = 4\nwindw = 5")).unwrap();
    let out = spkv(&["train", "--config", p(&bad), "--out", p(&f.path("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let stray = f.path("stray.toml");
    std::fs::write(&stray, format!("{TINY}\n[extra]\nx = 1\n")).unwrap();
    assert_eq!(spkv(&["train", "--config", p(&stray), "--out", p(&f.path("o"))]).status.code(), Some(2));
}

#[test]
fn continued_training_modes_need_an_initial_checkpoint() {
    let f = Fixture::new();
    let cfg = f.path("tiny.toml");
    let out = spkv(&["train", "--config", p(&cfg), "--mode", "soft-cpt", "--out", p(&f.path("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = spkv(&["train", "--config", p(&cfg), "--mode", "sideways", "--out", p(&f.path("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dense_then_soft_cpt_starts_fully_open() {
    let f = Fixture::new();
    let dense = f.train("dense", "dense", None);
    assert!(dense.join("run.toml").exists());
    let cpt = f.train("cpt", "soft-cpt", Some("dense"));
    let log = read_log(&cpt);
    assert_eq!(log.records.len(), 12);
    assert_eq!(log.records[0].rho, Some(1.0));
    let ck = Checkpoint::load(&cpt.join("checkpoint.bin")).unwrap();
    assert!(ck.model.config.layer_kinds.iter().all(|&k| k == AttentionKind::SelfPrunedKV));
    let snapshot = std::fs::read_to_string(cpt.join("run.toml")).unwrap();
    assert!(snapshot.contains("SelfPrunedKV"), "{snapshot}");
}

#[test]
fn frozen_llm_leaves_base_weights_untouched() {
    let f = Fixture::new();
    let dense = f.train("dense", "dense", None);
    let frozen = f.train("frozen", "frozen-llm", Some("dense"));
    let before = Checkpoint::load(&dense.join("checkpoint.bin")).unwrap();
    let after = Checkpoint::load(&frozen.join("checkpoint.bin")).unwrap();
    let base = |ck: &Checkpoint| -> Vec<u32> {
        let m = &ck.model;
        let mut bits: Vec<u32> = m.embed.data().iter().chain(m.final_norm.data()).map(|v| v.to_bits()).collect();
        for l in &m.layers {
            for t in [&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w1, &l.w2] {
                bits.extend(t.data().iter().map(|v| v.to_bits()));
            }
        }
        bits
    };
    assert_eq!(base(&before), base(&after));
    assert_ne!(after.model.layers[0].predictor.b2, before.model.layers[0].predictor.b2);
}

#[test]
fn training_is_reproducible() {
    let f = Fixture::new();
    let a = f.train("a", "dense", None);
    let b = f.train("b", "dense", None);
    for name in ["checkpoint.bin", "train_log.jsonl"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn sweep_sorts_taus_and_rejects_out_of_range() {
    let f = Fixture::new();
    f.train("dense", "dense", None);
    let cpt = f.train("cpt", "tahg", Some("dense"));
    let set = f.eval_set();
    let ck = cpt.join("checkpoint.bin");
    let out_dir = f.path("sweep");
    let out = spkv(&["sweep-tau", "--checkpoint", p(&ck), "--taus", "0.9,0,0.5,0.1,0.99", "--eval-set", p(&set), "--out", p(&out_dir)]);
    let stdout = ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let rows = spkv::analysis::read_sweep_csv(&stdout).unwrap();
    assert_eq!(rows.iter().map(|r| r.tau).collect::<Vec<_>>(), vec![0.0, 0.1, 0.5, 0.9, 0.99]);
    assert!(rows.windows(2).all(|w| w[1].rho <= w[0].rho));
    assert_eq!(std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap(), stdout);

    // tau = 0 keeps every gate: same NLL as the model with global attention.
    assert_eq!(rows[0].rho, 1.0);
    let ck = Checkpoint::load(&ck).unwrap();
    let data: EvalSet = serde_json::from_str(&std::fs::read_to_string(&set).unwrap()).unwrap();
    let mut global = ck.model.clone();
    global.config.layer_kinds = vec![AttentionKind::Global; 2];
    let dense = evaluate(&global, &data, &ck.gate, 8).unwrap().nll;
    assert!((rows[0].nll - dense).abs() < 1e-5, "{} vs {dense}", rows[0].nll);

    let out = spkv(&["sweep-tau", "--checkpoint", p(&cpt.join("checkpoint.bin")), "--taus", "0.5,1.000001", "--eval-set", p(&set), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cache_sim_matches_the_full_forward() {
    let f = Fixture::new();
    f.train("dense", "dense", None);
    let cpt = f.train("cpt", "soft-cpt", Some("dense"));
    let ck = cpt.join("checkpoint.bin");
    let run = |tau: &str, dir: &str| {
        let d = f.path(dir);
        ok(&spkv(&["cache-sim", "--checkpoint", p(&ck), "--prompt-tokens", "20", "--gen-tokens", "20", "--tau", tau, "--out", p(&d)]))
    };
    let s = run("0.5", "sim");
    assert!(stdout_value(&s, "residual") < 1e-4);
    let s = run("0", "sim0");
    assert_eq!(stdout_value(&s, "traffic_ratio"), 1.0);
    assert_eq!(stdout_value(&s, "density"), 1.0);
    // Every utility is below 1, so tau = 1 keeps only the window.
    let s = run("1", "sim1");
    assert!((stdout_value(&s, "traffic_ratio") - 4.0 / 40.0).abs() < 1e-9);
    assert_eq!(stdout_value(&s, "bytes_longterm"), 0.0);

    let out = spkv(&["cache-sim", "--checkpoint", p(&ck), "--prompt-tokens", "40", "--gen-tokens", "9", "--tau", "0", "--out", p(&f.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = spkv(&["cache-sim", "--checkpoint", p(&ck), "--prompt-tokens", "40", "--gen-tokens", "0", "--tau", "0", "--pages", "1", "--out", p(&f.path("y"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("capacity"));
}

#[test]
fn nas_densest_beats_random_on_a_skewed_report() {
    let f = Fixture::new();
    let density = vec![vec![0.9, 0.1], vec![0.05, 0.7], vec![0.2, 0.3], vec![0.6, 0.01]];
    let report = DensityReport::from_matrix(density, 100).unwrap();
    let path = f.path("report.json");
    std::fs::write(&path, report.to_json().unwrap()).unwrap();
    let cov = |strategy: &str, seed: &str| {
        let s = ok(&spkv(&["nas", "--report", p(&path), "--strategy", strategy, "--budget", "3", "--seed", seed, "--out", p(&f.path(strategy))]));
        stdout_value(&s, "coverage")
    };
    let d = cov("d", "0");
    for seed in ["0", "1", "2", "3"] {
        assert!(d >= cov("c", seed));
    }
    assert!((d - (0.9 + 0.7 + 0.6) / 2.86).abs() < 1e-8);
    let out = spkv(&["nas", "--report", p(&path), "--strategy", "e", "--budget", "2", "--out", p(&f.path("e"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn baselines_without_eviction_reproduce_dense_nll() {
    let f = Fixture::new();
    let dense = f.train("dense", "dense", None);
    let set = f.eval_set();
    let ck = dense.join("checkpoint.bin");
    let s = ok(&spkv(&["baselines", "--checkpoint", p(&ck), "--eval-set", p(&set), "--policy", "none", "--out", p(&f.path("b"))]));
    assert_eq!(stdout_value(&s, "delta_nll"), 0.0);
    let model = Checkpoint::load(&ck).unwrap();
    let data: EvalSet = serde_json::from_str(&std::fs::read_to_string(&set).unwrap()).unwrap();
    let full = evaluate(&model.model, &data, &GateConfig { mode: GateMode::Soft, ..model.gate.clone() }, 8).unwrap().nll;
    assert!((stdout_value(&s, "nll") - full).abs() < 1e-5);
    let s = ok(&spkv(&["baselines", "--checkpoint", p(&ck), "--eval-set", p(&set), "--policy", "h2o", "--fraction", "0.2", "--out", p(&f.path("h"))]));
    assert!(stdout_value(&s, "density") < 1.0);
    assert!(f.path("h").join("baselines.jsonl").exists());
}

#[test]
fn fit_scaling_on_the_reference_ladder() {
    let f = Fixture::new();
    let flops = [3.9e18, 7.7e18, 1.4e19, 3.4e19, 6.8e19, 1.5e20, 3.4e20, 6.6e20, 1.4e21, 3.1e21, 6.0e21];
    let nll = [3.17, 3.05, 2.95, 2.79, 2.69, 2.57, 2.48, 2.39, 2.30, 2.21, 2.14];
    let csv: String = std::iter::once("flops,nll\n".to_string()).chain(flops.iter().zip(nll).map(|(c, l)| format!("{c},{l}\n"))).collect();
    let path = f.path("points.csv");
    std::fs::write(&path, csv).unwrap();
    let s = ok(&spkv(&["fit-scaling", "--points", p(&path), "--out", p(&f.path("fit"))]));
    assert!(stdout_value(&s, "r2") > 0.99);
    let alpha = stdout_value(&s, "alpha");
    assert!(alpha > 0.05 && alpha < 0.2, "{alpha}");
    std::fs::write(&path, "flops,nll\n1e18,abc\n").unwrap();
    assert_eq!(spkv(&["fit-scaling", "--points", p(&path), "--out", p(&f.path("fit"))]).status.code(), Some(2));
}
