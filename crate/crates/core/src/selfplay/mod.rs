//! Multi-round refinement: freeze a reference, sweep loss hyperparameters,
//! keep the best EMA checkpoint and promote it to the next round's reference.
//!
//! Experiment directory layout:
//!
//! ```text
//! base.ddo
//! lineage.json
//! rounds/<n>/metrics.csv
//! rounds/<n>/winner.json
//! rounds/<n>/grid.json
//! rounds/<n>/grid_<i>/ckpt_<step>.ddo
//! ```

mod ema;
mod tasks;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ema::EmaState;
pub use tasks::{
    generate_diffusion_cache, generate_reference_cache, reference_labels, DiffusionTask, ExactCategoricalTask,
    RoundTask, SequenceCache, SequenceTask,
};

use crate::ddo::DdoHyperParams;
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::models::{AnyModel, Checkpoint, TrainableModel};
use crate::nn::{grads_finite, warmup_lr, Adam};
use crate::rng::{derive_seed, derived};

const CACHE_STREAM: u64 = u64::MAX;

/// Per-round training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub eval_every: usize,
    /// In training examples; `None` means 10% of the round's examples.
    pub ema_half_life: Option<f64>,
    pub cache_size: usize,
    pub class_balance: bool,
    /// Sample reference items on the fly instead of from a cache
    /// (sequence models only).
    pub online_ref: bool,
    /// Record elapsed seconds in the metrics log. Off by default so reruns
    /// are byte-identical.
    pub record_wallclock: bool,
    /// Persist every evaluated checkpoint, not only the round winner.
    pub save_all_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 256,
            lr: 1e-3,
            warmup_frac: 0.1,
            eval_every: 50,
            ema_half_life: None,
            cache_size: 8192,
            class_balance: true,
            online_ref: false,
            record_wallclock: false,
            save_all_checkpoints: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.cache_size == 0 {
            return Err(Error::invalid("batch_size, eval_every and cache_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid(format!("invalid lr {} or warmup_frac {}", self.lr, self.warmup_frac)));
        }
        if let Some(h) = self.ema_half_life {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::invalid(format!("EMA half-life must be positive, got {h}")));
            }
        }
        Ok(())
    }

    pub fn half_life(&self) -> f64 {
        self.ema_half_life
            .unwrap_or_else(|| (0.1 * (self.steps * self.batch_size) as f64).max(1.0))
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).ceil() as usize
    }

    /// Steps after which the EMA weights are evaluated.
    pub fn eval_steps(&self) -> Vec<usize> {
        let mut s: Vec<usize> = (1..=self.steps / self.eval_every).map(|k| k * self.eval_every).collect();
        if self.steps > 0 && s.last() != Some(&self.steps) {
            s.push(self.steps);
        }
        s
    }
}

/// One row of `metrics.csv`. `loss` is the mean minibatch loss since the
/// previous evaluation and is empty at step 0 (the untouched reference).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub round: u32,
    pub grid_index: usize,
    pub step: usize,
    pub loss: Option<f64>,
    pub metric: f64,
    pub wallclock: f64,
}

/// Lowest finite metric; ties go to the smallest `(grid_index, step)`.
pub fn select_winner(records: &[EvalRecord]) -> Option<&EvalRecord> {
    records
        .iter()
        .filter(|r| r.metric.is_finite())
        .min_by(|a, b| {
            a.metric
                .total_cmp(&b.metric)
                .then(a.grid_index.cmp(&b.grid_index))
                .then(a.step.cmp(&b.step))
        })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disqualified {
    pub grid_index: usize,
    pub reason: String,
}

/// Contents of `winner.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Winner {
    pub round: u32,
    pub grid_index: usize,
    pub step: usize,
    pub metric: f64,
    /// Path relative to the experiment directory.
    pub checkpoint: String,
    pub checkpoint_id: String,
    pub alpha: f64,
    pub beta: f64,
    pub disqualified: Vec<Disqualified>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineageBase {
    pub path: String,
    pub id: String,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineageRound {
    pub round: u32,
    pub reference: String,
    pub reference_id: String,
    pub winner: String,
    pub winner_id: String,
    pub grid_index: usize,
    pub step: usize,
    pub metric: f64,
}

/// Contents of `lineage.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lineage {
    pub base: LineageBase,
    pub rounds: Vec<LineageRound>,
}

/// The frozen reference entering a round.
#[derive(Clone, Debug)]
pub struct RoundState<M> {
    pub round: u32,
    pub reference: M,
    /// Relative to the experiment directory.
    pub reference_path: String,
    pub reference_id: String,
}

/// What a finished round produced.
#[derive(Clone, Debug)]
pub struct RoundReport<M> {
    pub winner: Winner,
    pub records: Vec<EvalRecord>,
    /// Metric of the reference itself (step 0).
    pub reference_metric: f64,
    pub next: RoundState<M>,
}

struct Snapshot<M> {
    step: usize,
    model: M,
}

struct GridOutcome<M> {
    records: Vec<EvalRecord>,
    snapshots: Vec<Snapshot<M>>,
    failure: Option<Error>,
}

fn finite_loss(loss: f64, grads: &[Tensor]) -> Result<()> {
    if loss.is_finite() && grads_finite(grads) {
        Ok(())
    } else {
        Err(Error::Diverged(format!("non-finite loss or gradient (loss {loss})")))
    }
}

fn ema_model<M: TrainableModel>(template: &M, shadow: &[Tensor]) -> M {
    let mut m = template.clone();
    for (p, s) in m.params_mut().iter_mut().zip(shadow) {
        *p = s.clone();
    }
    m
}

#[allow(clippy::too_many_arguments)]
fn train_grid_point<T: RoundTask>(
    task: &T,
    reference: &T::Model,
    cache: &T::Cache,
    hp: &DdoHyperParams,
    cfg: &TrainConfig,
    round: u32,
    grid_index: usize,
    seed: u64,
) -> GridOutcome<T::Model> {
    let mut out = GridOutcome {
        records: Vec::new(),
        snapshots: Vec::new(),
        failure: None,
    };
    let mut best = f64::INFINITY;
    let result = (|| -> Result<()> {
        let mut rng = derived(seed, &[round as u64, grid_index as u64]);
        let mut model = reference.clone();
        let mut ema = EmaState::new(model.params(), cfg.half_life())?;
        let mut opt = Adam::new();
        let warmup = cfg.warmup_steps();
        let evals = cfg.eval_steps();
        let mut next_eval = evals.iter().peekable();
        let start = Instant::now();
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for step in 1..=cfg.steps {
            let (loss, grads) = task.ddo_step(&model, reference, cache, hp, cfg.batch_size, &mut rng)?;
            finite_loss(loss, &grads)?;
            opt.step(model.params_mut(), &grads, warmup_lr(cfg.lr, step, warmup));
            ema.update(model.params(), cfg.batch_size as f64);
            loss_sum += loss;
            loss_n += 1;
            if next_eval.peek() == Some(&&step) {
                next_eval.next();
                let snapshot = ema_model(&model, ema.shadow());
                let metric = task.metric(&snapshot)?;
                if !metric.is_finite() {
                    return Err(Error::Diverged(format!("non-finite metric at step {step}")));
                }
                let wallclock = if cfg.record_wallclock {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                };
                out.records.push(EvalRecord {
                    round,
                    grid_index,
                    step,
                    loss: Some(loss_sum / loss_n as f64),
                    metric,
                    wallclock,
                });
                (loss_sum, loss_n) = (0.0, 0);
                if cfg.save_all_checkpoints {
                    out.snapshots.push(Snapshot { step, model: snapshot });
                } else if metric < best {
                    best = metric;
                    out.snapshots = vec![Snapshot { step, model: snapshot }];
                }
            }
        }
        Ok(())
    })();
    out.failure = result.err();
    out
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn file_digest(path: &Path) -> Result<String> {
    Checkpoint::read(path)?.digest()
}

pub fn round_dir(dir: &Path, round: u32) -> PathBuf {
    dir.join("rounds").join(round.to_string())
}

/// One self-play round: every grid point starts from the reference, trains
/// on its own rng stream and is evaluated on EMA weights. The best evaluated
/// checkpoint (including the reference itself at step 0) becomes the next
/// reference.
#[allow(clippy::too_many_arguments)]
pub fn run_round<T: RoundTask>(
    task: &T,
    state: &RoundState<T::Model>,
    grid: &[DdoHyperParams],
    cfg: &TrainConfig,
    seed: u64,
    jobs: usize,
    dir: &Path,
) -> Result<RoundReport<T::Model>> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    cfg.validate()?;
    for hp in grid {
        hp.validate()?;
    }
    let round = state.round;
    let reference_file = dir.join(&state.reference_path);
    let before = file_digest(&reference_file)?;
    if before != state.reference_id {
        return Err(Error::Checkpoint(format!(
            "reference {} does not match recorded id",
            state.reference_path
        )));
    }

    let reference_metric = task.metric(&state.reference)?;
    let mut cache_rng = derived(seed, &[round as u64, CACHE_STREAM]);
    let cache = task.reference_cache(&state.reference, cfg, &mut cache_rng)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let mut outcomes: Vec<GridOutcome<T::Model>> = pool.install(|| {
        grid.par_iter()
            .enumerate()
            .map(|(i, hp)| train_grid_point(task, &state.reference, &cache, hp, cfg, round, i, seed))
            .collect()
    });

    if file_digest(&reference_file)? != before {
        return Err(Error::Checkpoint("reference checkpoint changed during the round".into()));
    }

    let mut records = Vec::new();
    let mut disqualified = Vec::new();
    for (i, o) in outcomes.iter_mut().enumerate() {
        if let Some(e) = o.failure.take_if(|e| !e.is_numeric()) {
            return Err(e);
        }
        if let Some(e) = &o.failure {
            let reason = e.to_string();
            log::warn!("round {round} grid point {i} disqualified: {reason}");
            disqualified.push(Disqualified {
                grid_index: i,
                reason,
            });
            continue;
        }
        records.push(EvalRecord {
            round,
            grid_index: i,
            step: 0,
            loss: None,
            metric: reference_metric,
            wallclock: 0.0,
        });
        records.extend(o.records.iter().cloned());
    }
    if disqualified.len() == grid.len() {
        let reasons: Vec<String> = disqualified
            .iter()
            .map(|d| format!("grid {}: {}", d.grid_index, d.reason))
            .collect();
        return Err(Error::Diverged(format!(
            "all grid points diverged in round {round}: {}",
            reasons.join("; ")
        )));
    }

    let rdir = round_dir(dir, round);
    fs::create_dir_all(&rdir)?;
    write_csv(&rdir.join("metrics.csv"), &records)?;
    write_json(&rdir.join("grid.json"), &grid)?;

    let best = select_winner(&records)
        .cloned()
        .ok_or_else(|| Error::Diverged(format!("no finite metric in round {round}")))?;
    let mut winner_model = state.reference.clone();
    let (mut winner_path, mut winner_id) = (state.reference_path.clone(), state.reference_id.clone());
    for (i, o) in outcomes.iter().enumerate() {
        if o.failure.is_some() {
            continue;
        }
        for s in &o.snapshots {
            let rel = format!("rounds/{round}/grid_{i}/ckpt_{}.ddo", s.step);
            let is_winner = i == best.grid_index && s.step == best.step;
            if cfg.save_all_checkpoints || is_winner {
                let id = s.model.to_any().save(&dir.join(&rel), seed, round)?;
                if is_winner {
                    winner_model = s.model.clone();
                    (winner_path, winner_id) = (rel, id);
                }
            }
        }
    }
    let hp = grid[best.grid_index];
    let winner = Winner {
        round,
        grid_index: best.grid_index,
        step: best.step,
        metric: best.metric,
        checkpoint: winner_path.clone(),
        checkpoint_id: winner_id.clone(),
        alpha: hp.alpha,
        beta: hp.beta,
        disqualified,
    };
    write_json(&rdir.join("winner.json"), &winner)?;
    Ok(RoundReport {
        winner,
        records,
        reference_metric,
        next: RoundState {
            round: round + 1,
            reference: winner_model,
            reference_path: winner_path,
            reference_id: winner_id,
        },
    })
}

/// Settings for a multi-round run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub rounds: u32,
    pub grid: Vec<DdoHyperParams>,
    pub train: TrainConfig,
    pub seed: u64,
    pub jobs: usize,
    /// Stop early once a round improves the metric by less than this
    /// relative amount.
    pub min_rel_improvement: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport<M> {
    pub base_metric: f64,
    pub rounds: Vec<RoundReport<M>>,
    pub lineage: Lineage,
}

impl<M> ExperimentReport<M> {
    pub fn final_metric(&self) -> f64 {
        self.rounds.last().map_or(self.base_metric, |r| r.winner.metric)
    }

    pub fn final_model(&self) -> Option<&M> {
        self.rounds.last().map(|r| &r.next.reference)
    }
}

/// Saves `base` as `base.ddo` and chains rounds, rewriting `lineage.json`
/// after each one.
pub fn run_experiment<T: RoundTask>(
    task: &T,
    base: &T::Model,
    plan: &ExperimentPlan,
    dir: &Path,
) -> Result<ExperimentReport<T::Model>> {
    fs::create_dir_all(dir)?;
    let base_path = "base.ddo".to_string();
    let base_id = base.to_any().save(&dir.join(&base_path), plan.seed, 0)?;
    let mut state = RoundState {
        round: 1,
        reference: base.clone(),
        reference_path: base_path.clone(),
        reference_id: base_id.clone(),
    };
    let mut lineage = Lineage {
        base: LineageBase {
            path: base_path,
            id: base_id,
            metric: f64::NAN,
        },
        rounds: Vec::new(),
    };
    let mut reports = Vec::new();
    for _ in 0..plan.rounds {
        let report = run_round(task, &state, &plan.grid, &plan.train, plan.seed, plan.jobs, dir)?;
        if lineage.rounds.is_empty() {
            lineage.base.metric = report.reference_metric;
        }
        lineage.rounds.push(LineageRound {
            round: state.round,
            reference: state.reference_path.clone(),
            reference_id: state.reference_id.clone(),
            winner: report.winner.checkpoint.clone(),
            winner_id: report.winner.checkpoint_id.clone(),
            grid_index: report.winner.grid_index,
            step: report.winner.step,
            metric: report.winner.metric,
        });
        write_json(&dir.join("lineage.json"), &lineage)?;
        log::info!(
            "round {} winner grid {} step {} metric {:.6e}",
            state.round,
            report.winner.grid_index,
            report.winner.step,
            report.winner.metric
        );
        let improvement = (report.reference_metric - report.winner.metric) / report.reference_metric.abs();
        state = report.next.clone();
        reports.push(report);
        if let Some(thr) = plan.min_rel_improvement {
            if !(improvement >= thr) {
                log::info!("relative improvement {improvement:.3e} below {thr:.3e}; stopping");
                break;
            }
        }
    }
    if reports.is_empty() {
        lineage.base.metric = task.metric(base)?;
        write_json(&dir.join("lineage.json"), &lineage)?;
    }
    Ok(ExperimentReport {
        base_metric: lineage.base.metric,
        rounds: reports,
        lineage,
    })
}

/// Checks a finished experiment directory: every recorded id matches its
/// file, each round's reference is the previous winner, and re-running
/// selection on each persisted metrics log reproduces `winner.json`.
pub fn validate_lineage(dir: &Path) -> Result<Lineage> {
    let lineage: Lineage = read_json(&dir.join("lineage.json"))?;
    let bad = |msg: String| Err(Error::Checkpoint(msg));
    if file_digest(&dir.join(&lineage.base.path))? != lineage.base.id {
        return bad("base checkpoint does not match its id".into());
    }
    let (mut prev_path, mut prev_id) = (lineage.base.path.clone(), lineage.base.id.clone());
    for (k, r) in lineage.rounds.iter().enumerate() {
        if r.round as usize != k + 1 {
            return bad(format!("round {} out of sequence", r.round));
        }
        if r.reference != prev_path || r.reference_id != prev_id {
            return bad(format!("round {} reference is not the previous winner", r.round));
        }
        if file_digest(&dir.join(&r.winner))? != r.winner_id {
            return bad(format!("round {} winner does not match its id", r.round));
        }
        let rdir = round_dir(dir, r.round);
        let winner: Winner = read_json(&rdir.join("winner.json"))?;
        let records = read_metrics(&rdir.join("metrics.csv"))?;
        let Some(best) = select_winner(&records) else {
            return bad(format!("round {} has no finite metric", r.round));
        };
        if (best.grid_index, best.step) != (winner.grid_index, winner.step)
            || winner.checkpoint_id != r.winner_id
            || (winner.grid_index, winner.step) != (r.grid_index, r.step)
        {
            return bad(format!("round {} winner is not the argmin of its metrics log", r.round));
        }
        (prev_path, prev_id) = (r.winner.clone(), r.winner_id.clone());
    }
    Ok(lineage)
}

/// Likelihood pretraining schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_frac: f64,
    /// Return EMA weights with this half-life (in examples) instead of the
    /// raw iterate.
    pub ema_half_life: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 3e-3,
            batch_size: 256,
            warmup_frac: 0.02,
            ema_half_life: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
}

/// MLE training from `model`; one loss record per step.
pub fn pretrain<T: RoundTask>(
    task: &T,
    mut model: T::Model,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(T::Model, Vec<PretrainRecord>)> {
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr >= 0.0) || !(0.0..=1.0).contains(&cfg.warmup_frac) {
        return Err(Error::invalid(format!("invalid pretraining config {cfg:?}")));
    }
    let mut rng = derived(derive_seed(seed, &[0x5052_4554]), &[]);
    let mut ema = match cfg.ema_half_life {
        Some(h) => Some(EmaState::new(model.params(), h)?),
        None => None,
    };
    let mut opt = Adam::new();
    let warmup = (cfg.warmup_frac * cfg.steps as f64).ceil() as usize;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let (loss, grads) = task.mle_step(&model, cfg.batch_size, &mut rng)?;
        if !(loss.is_finite() && grads_finite(&grads)) {
            return Err(Error::Diverged(format!("pretraining loss {loss} at step {step}")));
        }
        opt.step(model.params_mut(), &grads, warmup_lr(cfg.lr, step, warmup));
        if let Some(e) = ema.as_mut() {
            e.update(model.params(), cfg.batch_size as f64);
        }
        log.push(PretrainRecord { step, loss });
    }
    if let Some(e) = ema {
        model = ema_model(&model, e.shadow());
    }
    Ok((model, log))
}

/// Writes `pretrain.csv` with columns `step,loss`.
pub fn write_pretrain_log(path: &Path, log: &[PretrainRecord]) -> Result<()> {
    write_csv(path, log)
}

/// Loads a checkpoint as a specific model type.
pub fn load_model<M: TrainableModel>(path: &Path) -> Result<(M, Checkpoint)> {
    let (any, ckpt) = AnyModel::load(path)?;
    Ok((M::from_any(any)?, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(grid_index: usize, step: usize, metric: f64) -> EvalRecord {
        EvalRecord {
            round: 1,
            grid_index,
            step,
            loss: None,
            metric,
            wallclock: 0.0,
        }
    }

    #[test]
    fn selection_breaks_ties_by_grid_then_step() {
        let r = vec![rec(1, 0, 0.5), rec(0, 50, 0.5), rec(0, 100, 0.5), rec(2, 50, f64::NAN)];
        let w = select_winner(&r).unwrap();
        assert_eq!((w.grid_index, w.step), (0, 50));
        assert!(select_winner(&[rec(0, 0, f64::NAN)]).is_none());
    }

    #[test]
    fn eval_schedule_ends_at_the_last_step() {
        let cfg = TrainConfig {
            steps: 120,
            eval_every: 50,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.eval_steps(), vec![50, 100, 120]);
        assert_eq!(cfg.warmup_steps(), 12);
        assert_eq!(TrainConfig::default().half_life(), 51_200.0);
    }

    #[test]
    fn metrics_csv_round_trips_with_empty_loss() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![rec(0, 0, 0.25), EvalRecord { loss: Some(1.5), ..rec(0, 50, 0.125) }];
        write_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("round,grid_index,step,loss,metric,wallclock\n1,0,0,,0.25,0.0\n"));
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }
}
