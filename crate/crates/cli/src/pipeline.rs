//! Config-driven pretraining, self-play, evaluation, sampling and plot data.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ddo_core::data::{Dataset, Items, SyntheticTarget};
use ddo_core::grad::Tensor;
use ddo_core::metrics::{hist_kl_2d, GridSpec};
use ddo_core::models::{
    AnyModel, ArModel, CategoricalDistribution, CategoricalModel, DiffusionConfig, DiffusionModel, LikelihoodModel,
    NoiseSchedule, TrainableModel,
};
use ddo_core::rng::{derive_seed, derived};
use ddo_core::selfplay::{
    pretrain, read_json, read_metrics, round_dir, run_experiment, validate_lineage, write_pretrain_log,
    DiffusionTask, ExactCategoricalTask, ExperimentPlan, Lineage, RoundTask, SequenceTask, Winner,
};
use ddo_core::ddo::DdoHyperParams;
use serde::Serialize;

use crate::config::{ExperimentConfig, ModelSpec};
use crate::error::{CliError, CliResult};

const INIT_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;

/// A task and the model it trains, for each model family.
#[derive(Clone, Debug)]
pub enum Setup {
    Categorical(ExactCategoricalTask, CategoricalModel),
    Ar(SequenceTask, ArModel),
    Diffusion(DiffusionTask, DiffusionModel),
}

/// Runs `$body` with `$task` and `$model` bound to the concrete pair.
macro_rules! with_setup {
    ($setup:expr, |$task:ident, $model:ident| $body:expr) => {
        match $setup {
            Setup::Categorical($task, $model) => $body,
            Setup::Ar($task, $model) => $body,
            Setup::Diffusion($task, $model) => $body,
        }
    };
}

impl Setup {
    /// Generates the dataset and builds the task together with the freshly
    /// initialised model.
    pub fn build(cfg: &ExperimentConfig) -> CliResult<(Self, Dataset)> {
        let data = cfg.dataset.target.generate(cfg.dataset.n_samples, cfg.dataset_seed())?;
        let mut rng = derived(cfg.seed, &[INIT_STREAM]);
        let setup = match (&cfg.model, &cfg.dataset.target) {
            (ModelSpec::Categorical { num_states }, target) => {
                let task = ExactCategoricalTask {
                    data: target.exact_pmf()?,
                };
                Setup::Categorical(task, CategoricalModel::uniform(*num_states))
            }
            (ModelSpec::Ar { .. }, target) => {
                let ar = cfg.model.ar_config().expect("ar model");
                let exact = match target {
                    SyntheticTarget::ConditionalMarkov { seq_len, chains } => chains
                        .iter()
                        .map(|c| c.distribution(*seq_len))
                        .collect::<ddo_core::Result<Vec<_>>>()?,
                    t => vec![t.exact_pmf()?],
                };
                let Items::Sequences(seqs) = &data.items else {
                    return Err(CliError::Config("AR model needs a sequence dataset".into()));
                };
                let labels = if ar.num_classes == 0 {
                    vec![None; seqs.len()]
                } else {
                    data.labels.clone()
                };
                let task = SequenceTask {
                    data: seqs.clone(),
                    labels,
                    exact,
                    mle_label_dropout: cfg.pretrain.label_dropout,
                };
                Setup::Ar(task, ArModel::init(ar, &mut rng)?)
            }
            (
                ModelSpec::Diffusion {
                    hidden,
                    num_classes,
                    activation,
                    sigma_data,
                },
                SyntheticTarget::Gmm2d { mixture },
            ) => {
                let Items::Points(x) = &data.items else {
                    return Err(CliError::Config("diffusion model needs a point dataset".into()));
                };
                let mut schedule = NoiseSchedule::for_data_std(sigma_data.unwrap_or_else(|| mixture.std()));
                schedule.p_mean = cfg.pretrain.p_mean;
                schedule.p_std = cfg.pretrain.p_std;
                let dcfg = DiffusionConfig {
                    data_dim: 2,
                    hidden: hidden.clone(),
                    num_classes: *num_classes,
                    activation: *activation,
                    schedule,
                };
                let labels = if *num_classes == 0 {
                    vec![None; data.len()]
                } else {
                    data.labels.clone()
                };
                let grid = match &cfg.eval.grid {
                    Some(g) => g.clone(),
                    None => GridSpec::around(x)?,
                };
                let task = DiffusionTask {
                    data: x.clone(),
                    labels,
                    density: mixture.clone(),
                    grid,
                    eval_samples: cfg.eval.samples,
                    sample_steps: cfg.eval.sample_steps,
                    eval_seed: cfg.eval.seed.unwrap_or_else(|| derive_seed(cfg.seed, &[EVAL_STREAM])),
                    mle_label_dropout: cfg.pretrain.label_dropout,
                };
                Setup::Diffusion(task, DiffusionModel::init(dcfg, &mut rng)?)
            }
            (m, _) => {
                return Err(CliError::Config(format!(
                    "{} model has no evaluator for this dataset",
                    m.kind()
                )))
            }
        };
        Ok((setup, data))
    }

    pub fn model(&self) -> AnyModel {
        with_setup!(self, |_t, m| m.to_any())
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            Setup::Diffusion(..) => "hist_kl",
            _ => "exact_kl",
        }
    }

    /// Replaces the model by a checkpointed one with identical architecture.
    pub fn with_model(self, any: AnyModel) -> CliResult<Self> {
        let compatible = |a: &[Tensor], b: &[Tensor]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        let mismatch = |kind: &str| CliError::Config(format!("{kind} checkpoint does not match the configured model"));
        Ok(match self {
            Setup::Categorical(t, m) => {
                let c = CategoricalModel::from_any(any).map_err(|e| CliError::Config(e.to_string()))?;
                if !compatible(m.params(), c.params()) {
                    return Err(mismatch("categorical"));
                }
                Setup::Categorical(t, c)
            }
            Setup::Ar(t, m) => {
                let c = ArModel::from_any(any).map_err(|e| CliError::Config(e.to_string()))?;
                if c.config() != m.config() {
                    return Err(mismatch("ar"));
                }
                Setup::Ar(t, c)
            }
            Setup::Diffusion(t, m) => {
                let c = DiffusionModel::from_any(any).map_err(|e| CliError::Config(e.to_string()))?;
                if c.config() != m.config() {
                    return Err(mismatch("diffusion"));
                }
                Setup::Diffusion(t, c)
            }
        })
    }

    pub fn load(cfg: &ExperimentConfig, ckpt: &Path) -> CliResult<(Self, Dataset)> {
        let (setup, data) = Self::build(cfg)?;
        let (any, _) = AnyModel::load(ckpt).map_err(|e| CliError::Config(format!("{}: {e}", ckpt.display())))?;
        Ok((setup.with_model(any)?, data))
    }

    pub fn metric(&self) -> CliResult<f64> {
        Ok(with_setup!(self, |t, m| t.metric(m))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub metric_name: &'static str,
    pub metric: f64,
}

fn write_config(cfg: &ExperimentConfig, path: &Path) -> CliResult<()> {
    fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    fs::write(path, cfg.to_toml()?)?;
    Ok(())
}

/// MLE pretraining. Writes `model.ddo`, `metrics.csv` (step, loss),
/// `dataset.ddo` and the resolved `config.toml` under `out`.
pub fn run_pretrain(cfg: &ExperimentConfig, out: &Path) -> CliResult<PretrainSummary> {
    fs::create_dir_all(out)?;
    let (setup, data) = Setup::build(cfg)?;
    data.save(&out.join("dataset.ddo"))?;
    write_config(cfg, &out.join("config.toml"))?;
    let schedule = cfg.pretrain.schedule();
    let (trained, log) = match setup {
        Setup::Categorical(t, m) => {
            let (m, log) = pretrain(&t, m, &schedule, cfg.seed)?;
            (Setup::Categorical(t, m), log)
        }
        Setup::Ar(t, m) => {
            let (m, log) = pretrain(&t, m, &schedule, cfg.seed)?;
            (Setup::Ar(t, m), log)
        }
        Setup::Diffusion(t, m) => {
            let (m, log) = pretrain(&t, m, &schedule, cfg.seed)?;
            (Setup::Diffusion(t, m), log)
        }
    };
    write_pretrain_log(&out.join("metrics.csv"), &log)?;
    let path = out.join("model.ddo");
    let id = trained.model().save(&path, cfg.seed, 0)?;
    Ok(PretrainSummary {
        checkpoint: path,
        checkpoint_id: id,
        steps: log.len(),
        final_loss: log.last().map(|r| r.loss),
        metric_name: trained.metric_name(),
        metric: trained.metric()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DdoSummary {
    pub dir: PathBuf,
    pub metric_name: &'static str,
    pub base_metric: f64,
    pub round_metrics: Vec<f64>,
    pub final_checkpoint: String,
    pub lineage: Lineage,
}

/// Multi-round self-play from `ckpt` into the experiment directory `out`.
pub fn run_ddo(cfg: &ExperimentConfig, ckpt: &Path, out: &Path, rounds: Option<u32>, jobs: usize) -> CliResult<DdoSummary> {
    let (setup, _) = Setup::load(cfg, ckpt)?;
    fs::create_dir_all(out)?;
    write_config(cfg, &out.join("config.toml"))?;
    let plan = ExperimentPlan {
        rounds: rounds.unwrap_or(cfg.ddo.rounds),
        grid: cfg.ddo.grid(&cfg.model),
        train: cfg.ddo.train.clone(),
        seed: cfg.seed,
        jobs,
        min_rel_improvement: cfg.ddo.min_rel_improvement,
    };
    let metric_name = setup.metric_name();
    let (base_metric, round_metrics, lineage) = with_setup!(&setup, |task, model| {
        let r = run_experiment(task, model, &plan, out)?;
        (
            r.base_metric,
            r.rounds.iter().map(|x| x.winner.metric).collect::<Vec<_>>(),
            r.lineage,
        )
    });
    let final_checkpoint = lineage
        .rounds
        .last()
        .map_or(lineage.base.path.clone(), |r| r.winner.clone());
    Ok(DdoSummary {
        dir: out.to_path_buf(),
        metric_name,
        base_metric,
        round_metrics,
        final_checkpoint,
        lineage,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub kind: &'static str,
    pub metric_name: &'static str,
    pub metric: f64,
}

pub fn run_eval(cfg: &ExperimentConfig, ckpt: &Path) -> CliResult<EvalReport> {
    let (setup, _) = Setup::load(cfg, ckpt)?;
    Ok(EvalReport {
        checkpoint: ckpt.to_path_buf(),
        kind: setup.model().kind(),
        metric_name: setup.metric_name(),
        metric: setup.metric()?,
    })
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn label_cell(l: Option<usize>) -> String {
    l.map_or(String::new(), |c| c.to_string())
}

fn sample_labels(classes: usize, label: Option<usize>, n: usize, rng: &mut ddo_core::rng::Rng) -> CliResult<Vec<Option<usize>>> {
    match label {
        Some(c) if c >= classes => Err(CliError::Usage(format!("label {c} out of range for {classes} classes"))),
        Some(c) => Ok(vec![Some(c); n]),
        None if classes == 0 => Ok(vec![None; n]),
        None => Ok(ddo_core::selfplay::reference_labels(classes, n, false, rng)?),
    }
}

/// Draws `n` samples into a CSV file with a header row. Deterministic in
/// `seed`.
pub fn run_sample(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    n: usize,
    label: Option<usize>,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let (setup, _) = Setup::load(cfg, ckpt)?;
    let mut rng = derived(seed, &[SAMPLE_STREAM]);
    let mut w = csv_writer(out)?;
    match &setup {
        Setup::Categorical(_, m) => {
            w.write_record(&["state"])?;
            let d = m.distribution();
            for _ in 0..n {
                w.write_record(&[d.sample(&mut rng).to_string()])?;
            }
        }
        Setup::Ar(_, m) => {
            let d = m.config().seq_len;
            let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
            header.push("label".into());
            w.write_record(&header)?;
            for l in sample_labels(m.num_classes(), label, n, &mut rng)? {
                let mut row: Vec<String> = m.sample(l, &mut rng).iter().map(usize::to_string).collect();
                row.push(label_cell(l));
                w.write_record(&row)?;
            }
        }
        Setup::Diffusion(t, m) => {
            w.write_record(&["x", "y", "label"])?;
            let labels = sample_labels(m.num_classes(), label, n, &mut rng)?;
            if n > 0 {
                let x = m.sample(&labels, t.sample_steps, &mut rng)?;
                for (i, l) in labels.iter().enumerate() {
                    let r = x.row(i);
                    w.write_record(&[r[0].to_string(), r[1].to_string(), label_cell(*l)])?;
                }
            }
        }
    }
    Ok(w.flush()?)
}

/// Histogram density (count / (N · cell area)) on `grid`.
pub fn histogram_density(points: &Tensor, grid: &GridSpec) -> Vec<f64> {
    let mut counts = vec![0.0; grid.cells()];
    let n = points.shape()[0];
    for i in 0..n {
        let r = points.row(i);
        counts[grid.locate(r[0], r[1]).0] += 1.0;
    }
    let norm = n.max(1) as f64 * grid.cell_area();
    counts.iter().map(|c| c / norm).collect()
}

fn write_grid(path: &Path, grid: &GridSpec, density: &[f64]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(&["x", "y", "density"])?;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let (x, y) = grid.center(ix, iy);
            w.write_record(&[x.to_string(), y.to_string(), density[iy * grid.nx + ix].to_string()])?;
        }
    }
    Ok(w.flush()?)
}

fn write_points(path: &Path, x: &Tensor) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(&["x", "y"])?;
    for i in 0..x.shape()[0] {
        let r = x.row(i);
        w.write_record(&[r[0].to_string(), r[1].to_string()])?;
    }
    Ok(w.flush()?)
}

/// Files written by [`run_plotdata`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlotFiles {
    pub files: Vec<PathBuf>,
}

/// Gridded densities and sample scatters for the data and each named
/// checkpoint. Continuous models get `<name>_density.csv` (x, y, density)
/// and `<name>_samples.csv`; enumerable models share one `pmf.csv`.
pub fn run_plotdata(cfg: &ExperimentConfig, models: &[(String, PathBuf)], scatter: usize, out: &Path) -> CliResult<PlotFiles> {
    fs::create_dir_all(out)?;
    let (base, data) = Setup::build(cfg)?;
    let mut files = Vec::new();
    let mut loaded = Vec::new();
    for (name, path) in models {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(CliError::Usage(format!("invalid model name {name:?}")));
        }
        let (any, _) = AnyModel::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        loaded.push((name.clone(), base.clone().with_model(any)?));
    }
    match &base {
        Setup::Diffusion(task, _) => {
            let grid = &task.grid;
            let density: Vec<f64> = (0..grid.ny)
                .flat_map(|iy| (0..grid.nx).map(move |ix| (ix, iy)))
                .map(|(ix, iy)| {
                    let (x, y) = grid.center(ix, iy);
                    task.density.density(x, y)
                })
                .collect();
            let p = out.join("data_density.csv");
            write_grid(&p, grid, &density)?;
            files.push(p);
            if let Items::Points(x) = &data.items {
                let k = scatter.min(x.shape()[0]);
                let head = Tensor::matrix(k, 2, x.data()[..2 * k].to_vec())?;
                let p = out.join("data_samples.csv");
                write_points(&p, &head)?;
                files.push(p);
            }
            for (name, s) in &loaded {
                let Setup::Diffusion(t, m) = s else { unreachable!() };
                let x = t.eval_draws(m)?;
                let p = out.join(format!("{name}_density.csv"));
                write_grid(&p, grid, &histogram_density(&x, grid))?;
                files.push(p);
                let k = scatter.min(x.shape()[0]);
                let head = Tensor::matrix(k, 2, x.data()[..2 * k].to_vec())?;
                let p = out.join(format!("{name}_samples.csv"));
                write_points(&p, &head)?;
                files.push(p);
            }
        }
        _ => {
            let data_pmf = match &base {
                Setup::Categorical(t, _) => t.data.clone(),
                Setup::Ar(t, _) => unconditional(&t.exact)?,
                Setup::Diffusion(..) => unreachable!(),
            };
            let mut cols = vec![data_pmf];
            for (_, s) in &loaded {
                cols.push(match s {
                    Setup::Categorical(_, m) => m.distribution(),
                    Setup::Ar(_, m) => ar_marginal(m)?,
                    Setup::Diffusion(..) => unreachable!(),
                });
            }
            let p = out.join("pmf.csv");
            let mut w = csv_writer(&p)?;
            let mut header = vec!["index".to_string(), "data".to_string()];
            header.extend(loaded.iter().map(|(n, _)| n.clone()));
            w.write_record(&header)?;
            for i in 0..cols[0].len() {
                let mut row = vec![i.to_string()];
                row.extend(cols.iter().map(|c| c.prob(i).to_string()));
                w.write_record(&row)?;
            }
            w.flush()?;
            files.push(p);
        }
    }
    Ok(PlotFiles { files })
}

fn unconditional(parts: &[CategoricalDistribution]) -> CliResult<CategoricalDistribution> {
    let k = parts.len() as f64;
    let w: Vec<f64> = (0..parts[0].len())
        .map(|i| parts.iter().map(|p| p.prob(i)).sum::<f64>() / k)
        .collect();
    Ok(CategoricalDistribution::from_weights(&w)?)
}

/// Unconditional pmf, or the uniform class mixture for conditional models.
fn ar_marginal(m: &ArModel) -> CliResult<CategoricalDistribution> {
    if m.num_classes() == 0 {
        return Ok(m.enumerate(None)?);
    }
    let parts = (0..m.num_classes())
        .map(|c| m.enumerate(Some(c)))
        .collect::<ddo_core::Result<Vec<_>>>()?;
    unconditional(&parts)
}

/// One row per grid point and round, like a table of training curves.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub round: u32,
    pub grid_index: usize,
    pub alpha: f64,
    pub beta: f64,
    pub best_step: Option<usize>,
    pub best_metric: Option<f64>,
    pub final_metric: Option<f64>,
    pub winner: bool,
    pub disqualified: bool,
}

/// Tabulates every round of an experiment directory after validating its
/// lineage.
pub fn run_sweep_report(dir: &Path) -> CliResult<Vec<SweepRow>> {
    let lineage = validate_lineage(dir)?;
    let mut rows = Vec::new();
    for r in &lineage.rounds {
        let rdir = round_dir(dir, r.round);
        let grid: Vec<DdoHyperParams> = read_json(&rdir.join("grid.json"))?;
        let winner: Winner = read_json(&rdir.join("winner.json"))?;
        let records = read_metrics(&rdir.join("metrics.csv"))?;
        for (i, hp) in grid.iter().enumerate() {
            let mine: Vec<_> = records.iter().filter(|x| x.grid_index == i).collect();
            let best = mine
                .iter()
                .min_by(|a, b| a.metric.total_cmp(&b.metric).then(a.step.cmp(&b.step)));
            rows.push(SweepRow {
                round: r.round,
                grid_index: i,
                alpha: hp.alpha,
                beta: hp.beta,
                best_step: best.map(|b| b.step),
                best_metric: best.map(|b| b.metric),
                final_metric: mine.iter().max_by_key(|x| x.step).map(|x| x.metric),
                winner: winner.grid_index == i,
                disqualified: winner.disqualified.iter().any(|d| d.grid_index == i),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_report(rows: &[SweepRow], mut out: impl std::io::Write) -> CliResult<()> {
    writeln!(
        out,
        "round,grid_index,alpha,beta,best_step,best_metric,final_metric,winner,disqualified"
    )?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            r.grid_index,
            r.alpha,
            r.beta,
            opt(r.best_step.map(|v| v.to_string())),
            opt(r.best_metric.map(|v| v.to_string())),
            opt(r.final_metric.map(|v| v.to_string())),
            r.winner,
            r.disqualified
        )?;
    }
    Ok(())
}

/// Sum of `density × cell area`, used to check plot grids.
pub fn grid_mass(path: &Path, grid: &GridSpec) -> CliResult<f64> {
    let mut reader = csv::Reader::from_path(path)?;
    let col = reader
        .headers()?
        .iter()
        .position(|h| h == "density")
        .ok_or_else(|| CliError::Config(format!("{} has no density column", path.display())))?;
    let mut total = 0.0;
    for row in reader.records() {
        let row = row?;
        let d: f64 = row[col]
            .parse()
            .map_err(|_| CliError::Config(format!("bad density {:?} in {}", &row[col], path.display())))?;
        total += d;
    }
    Ok(total * grid.cell_area())
}

/// Histogram KL of arbitrary points against the configured mixture.
pub fn points_hist_kl(task: &DiffusionTask, x: &Tensor) -> CliResult<f64> {
    Ok(hist_kl_2d(x, |a, b| task.density.density(a, b), &task.grid)?.value)
}

pub fn print_json<S: Serialize>(value: &S) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::io::stdout().write_all(s.as_bytes())?;
    Ok(())
}
