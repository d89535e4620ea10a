//! Drives the `ddo-lab` binary end to end on small configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddo_core::models::AnyModel;
use ddo_core::selfplay::validate_lineage;
use ddo_lab::config::ExperimentConfig;
use ddo_lab::pipeline::{grid_mass, Setup};
use serde_json::Value;

const CATEGORICAL: &str = r#"
seed = 4

[model]
kind = "categorical"
num_states = 6

[dataset]
n_samples = 100

[dataset.target]
kind = "categorical"
probs = [0.35, 0.05, 0.2, 0.1, 0.25, 0.05]

[pretrain]
steps = 600
lr = 0.05
batch_size = 1
warmup_frac = 0.0

[ddo]
alphas = [1.0]
betas = [1.0]

[ddo.train]
steps = 2000
lr = 0.05
batch_size = 1
eval_every = 250
cache_size = 1
"#;

const MARKOV: &str = r#"
seed = 2

[model]
kind = "ar"
vocab_size = 3
seq_len = 3
hidden = 2

[dataset]
n_samples = 2000

[dataset.target]
kind = "markov_chain"
seq_len = 3
initial = [0.5, 0.3, 0.2]
transition = [[0.8, 0.1, 0.1], [0.2, 0.6, 0.2], [0.3, 0.3, 0.4]]

[pretrain]
steps = 200
lr = 0.01
batch_size = 128

[ddo]
rounds = 2
alphas = [10.0, 30.0]

[ddo.train]
steps = 40
batch_size = 64
lr = 0.002
eval_every = 20
cache_size = 256
"#;

const DIFFUSION: &str = r#"
seed = 1

[model]
kind = "diffusion"
hidden = [16, 16]

[dataset]
n_samples = 2000

[dataset.target]
kind = "gmm2d"
weights = [0.7, 0.3]
means = [[0.0, 0.0], [1.0, 0.5]]
covs = [[[0.03, 0.01], [0.01, 0.02]], [[0.02, 0.0], [0.0, 0.01]]]

[pretrain]
steps = 150
lr = 0.003
batch_size = 128

[ddo]
alphas = [0.5]
betas = [0.05]

[ddo.train]
steps = 10
batch_size = 64
lr = 0.0005
eval_every = 5
cache_size = 128

[eval]
samples = 4000
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ddo-lab"));
    c.env_remove("DDO_LAB_OUT").env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("JSON on stdout")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrain(cfg: &str, out: &Path) -> PathBuf {
    let o = run(&["pretrain", "--config", cfg, "--out", s(out)]);
    json(&o);
    out.join("pretrain/model.ddo")
}

fn eval_metric(cfg: &str, ckpt: &Path) -> f64 {
    json(&run(&["eval", "--config", cfg, "--ckpt", s(ckpt)]))["metric"].as_f64().unwrap()
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["verify", "theorem1", "--trials", "0"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let typo = write_config(dir.path(), "typo.toml", &CATEGORICAL.replace("[pretrain]", "[pretrain]\nsteeps = 3"));
    let o = run(&["pretrain", "--config", &typo, "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("steeps"));

    let cfg = write_config(dir.path(), "c.toml", CATEGORICAL);
    let missing = dir.path().join("nope.ddo");
    assert_eq!(code(&run(&["eval", "--config", &cfg, "--ckpt", s(&missing)])), 1);

    // A checkpoint of the wrong kind for the configured model.
    let ar_cfg = write_config(dir.path(), "m.toml", &MARKOV.replace("steps = 200", "steps = 0"));
    let ar_ckpt = pretrain(&ar_cfg, &dir.path().join("ar"));
    assert_eq!(code(&run(&["eval", "--config", &cfg, "--ckpt", s(&ar_ckpt)])), 1);
}

#[test]
fn verify_suites_pass() {
    for suite in ["theorem1", "theorem2", "theorem3", "identity", "gradcheck", "guidance", "jensen"] {
        let o = run(&["verify", suite, "--trials", "6", "--seed", "3"]);
        let r = json(&o);
        assert_eq!(r["passed"], Value::Bool(true), "{suite}");
        assert_eq!(r["failures"], 0, "{suite}");
        assert_eq!(r["results"].as_array().unwrap().len(), 6);
    }
}

#[test]
fn verify_report_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.json");
    let o = run(&["verify", "guidance", "--trials", "4", "--report", s(&p)]);
    let printed = json(&o);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(printed, saved);
}

#[test]
fn divergent_pretraining_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "d.toml",
        &DIFFUSION.replace("steps = 150\nlr = 0.003", "steps = 50\nlr = 1e200"),
    );
    let o = run(&["pretrain", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(code(&o), 3, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn categorical_pipeline_reaches_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", CATEGORICAL);
    let ckpt = pretrain(&cfg, &dir.path().join("a"));
    assert!(eval_metric(&cfg, &ckpt) < 1e-4);

    // Self-play from the untrained (uniform) model.
    let init_cfg = write_config(dir.path(), "c0.toml", &CATEGORICAL.replace("steps = 600", "steps = 0"));
    let out = dir.path().join("b");
    let init = pretrain(&init_cfg, &out);
    let summary = json(&run(&["ddo", "--config", &cfg, "--out", s(&out), "--rounds", "1"]));
    let winner = out.join("ddo").join(summary["final_checkpoint"].as_str().unwrap());
    assert!(eval_metric(&cfg, &init) > 0.1);
    assert!(eval_metric(&cfg, &winner) < 1e-3);
    validate_lineage(&out.join("ddo")).unwrap();

    let plot = json(&run(&["plotdata", "--config", &cfg, "--out", s(&out), "--ckpt", s(&winner)]));
    assert_eq!(plot["files"].as_array().unwrap().len(), 1);
    let mut rows = csv::Reader::from_path(out.join("plot/pmf.csv")).unwrap();
    assert_eq!(rows.headers().unwrap(), vec!["index", "data", "ddo"]);
    assert_eq!(rows.records().count(), 6);
}

#[test]
fn zero_step_pretraining_saves_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let text = MARKOV.replace("steps = 200", "steps = 0");
    let cfg = write_config(dir.path(), "m.toml", &text);
    let ckpt = pretrain(&cfg, dir.path());
    let (saved, _) = AnyModel::load(&ckpt).unwrap();
    let (setup, _) = Setup::build(&ExperimentConfig::from_toml(&text).unwrap()).unwrap();
    assert_eq!(saved.params(), setup.model().params());
}

#[test]
fn sequence_pipeline_is_deterministic_and_chains_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.toml", MARKOV);
    let mut metric_files = Vec::new();
    for run_dir in ["x", "y"] {
        let out = dir.path().join(run_dir);
        pretrain(&cfg, &out);
        json(&run(&["ddo", "--config", &cfg, "--out", s(&out), "--jobs", "2"]));
        let mut files = vec![std::fs::read(out.join("pretrain/metrics.csv")).unwrap()];
        for r in 1..=2 {
            files.push(std::fs::read(out.join(format!("ddo/rounds/{r}/metrics.csv"))).unwrap());
        }
        files.push(std::fs::read(out.join("ddo/lineage.json")).unwrap());
        metric_files.push(files);
    }
    assert_eq!(metric_files[0], metric_files[1]);

    let out = dir.path().join("x");
    let lineage = validate_lineage(&out.join("ddo")).unwrap();
    assert_eq!(lineage.rounds.len(), 2);
    assert_eq!(lineage.rounds[1].reference_id, lineage.rounds[0].winner_id);
    assert!(lineage.rounds[1].metric <= lineage.rounds[0].metric);
    assert!(lineage.rounds[0].metric <= lineage.base.metric);

    let o = run(&["sweep-report", "--dir", s(&out.join("ddo"))]);
    assert_eq!(code(&o), 0);
    let mut rdr = csv::Reader::from_reader(o.stdout.as_slice());
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rdr.headers().unwrap().get(0), Some("round"));

    // The same report through the out-dir default.
    let o = bin().args(["sweep-report"]).env("DDO_LAB_OUT", &out).output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(csv::Reader::from_reader(o.stdout.as_slice()).records().count(), 4);
}

#[test]
fn zero_learning_rate_round_keeps_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let text = MARKOV.replace("lr = 0.002", "lr = 0.0");
    let cfg = write_config(dir.path(), "m.toml", &text);
    let ckpt = pretrain(&cfg, dir.path());
    let summary = json(&run(&["ddo", "--config", &cfg, "--out", s(dir.path()), "--rounds", "1"]));
    let lineage = &summary["lineage"];
    assert_eq!(lineage["rounds"][0]["winner_id"], lineage["base"]["id"]);
    assert_eq!(summary["round_metrics"][0], summary["base_metric"]);
    let winner = dir.path().join("ddo").join(summary["final_checkpoint"].as_str().unwrap());
    assert_eq!(std::fs::read(winner).unwrap(), std::fs::read(ckpt).unwrap());
}

#[test]
fn sampling_is_seeded_and_allows_zero_draws() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.toml", &MARKOV.replace("steps = 200", "steps = 20"));
    let ckpt = pretrain(&cfg, dir.path());
    let sample = |n: &str, seed: &str| {
        let o = run(&["sample", "--config", &cfg, "--out", s(dir.path()), "--ckpt", s(&ckpt), "--n", n, "--seed", seed]);
        assert_eq!(code(&o), 0);
        std::fs::read_to_string(dir.path().join("samples.csv")).unwrap()
    };
    let empty = sample("0", "1");
    assert_eq!(empty.lines().count(), 1, "header only: {empty:?}");
    let a = sample("50", "1");
    assert_eq!(a.lines().count(), 51);
    assert_eq!(sample("50", "1"), a);
    assert_ne!(sample("50", "2"), a);
}

#[test]
fn diffusion_plot_grids_integrate_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d.toml", DIFFUSION);
    let ckpt = pretrain(&cfg, dir.path());
    json(&run(&["ddo", "--config", &cfg, "--out", s(dir.path())]));
    let plot = json(&run(&[
        "plotdata", "--config", &cfg, "--out", s(dir.path()), "--baseline", s(&ckpt), "--scatter", "300",
    ]));
    assert_eq!(plot["files"].as_array().unwrap().len(), 4);

    let text = std::fs::read_to_string(&cfg).unwrap();
    let (setup, _) = Setup::build(&ExperimentConfig::from_toml(&text).unwrap()).unwrap();
    let Setup::Diffusion(task, _) = setup else { panic!("diffusion setup expected") };
    for name in ["data_density.csv", "mle_density.csv"] {
        let mass = grid_mass(&dir.path().join("plot").join(name), &task.grid).unwrap();
        assert!((mass - 1.0).abs() < 0.02, "{name}: {mass}");
    }
    let scatter = std::fs::read_to_string(dir.path().join("plot/mle_samples.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 301);

    let o = run(&["sample", "--config", &cfg, "--out", s(dir.path()), "--ckpt", s(&ckpt), "--n", "7"]);
    assert_eq!(code(&o), 0);
    let mut rdr = csv::Reader::from_path(dir.path().join("samples.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["x", "y", "label"]);
    assert_eq!(rdr.records().count(), 7);
}
