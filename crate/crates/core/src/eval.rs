//! Evaluation protocol: per-task query MSE at the prior, post-modulation and
//! post-adaptation stages, aggregated per mode.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, AutodiffError, Tensor, Var};
use crate::error::{Error, Result};
use crate::meta::{inner_adapt, loss_on, LearnerParams, Model, ModelKind, TrainingConfig};
use crate::modulation::{encode, TaskEmbedding};
use crate::task_net::ModulationSet;
use crate::tasks::{ModeSet, Points, RngStream, TaskDistribution, TaskSample};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Query MSE of one task at each stage the model has.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub mode_label: usize,
    pub prior: f64,
    pub post_modulation: Option<f64>,
    pub post_adaptation: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMse {
    pub prior: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_modulation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_adaptation: Option<f64>,
}

impl StageMse {
    /// The model's final-stage error: post-adaptation when it adapts,
    /// otherwise post-modulation, otherwise the prior.
    pub fn headline(&self) -> f64 {
        self.post_adaptation.or(self.post_modulation).unwrap_or(self.prior)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: String,
    pub tasks: usize,
    /// Tasks whose adaptation overflowed; their post-adaptation error is infinite.
    pub diverged: usize,
    #[serde(flatten)]
    pub mse: StageMse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub model: ModelKind,
    pub trained_iterations: usize,
    pub seed: u64,
    pub tasks_per_mode: usize,
    pub total_tasks: usize,
    pub eval_inner_steps: usize,
    pub per_mode: Vec<ModeReport>,
    pub overall: StageMse,
    pub notes: Vec<String>,
    pub config: TrainingConfig,
}

/// Missing stages propagate: all records of one model share the same set.
fn mean_stage(records: &[TaskRecord]) -> StageMse {
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&TaskRecord) -> Option<f64>| -> Option<f64> {
        records.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    StageMse {
        prior: records.iter().map(|r| r.prior).sum::<f64>() / n,
        post_modulation: mean(&|r| r.post_modulation),
        post_adaptation: mean(&|r| r.post_adaptation),
    }
}

/// Task-count-weighted mean of per-mode values.
pub fn weighted_overall(per_mode: &[ModeReport]) -> StageMse {
    let total: usize = per_mode.iter().map(|m| m.tasks).sum();
    let total = total as f64;
    let w = |f: &dyn Fn(&StageMse) -> Option<f64>| -> Option<f64> {
        per_mode.iter().map(|m| f(&m.mse).map(|v| v * m.tasks as f64)).sum::<Option<f64>>().map(|s| s / total)
    };
    StageMse {
        prior: w(&|s| Some(s.prior)).unwrap_or(f64::NAN),
        post_modulation: w(&|s| s.post_modulation),
        post_adaptation: w(&|s| s.post_adaptation),
    }
}

fn scalar(v: Var) -> f64 {
    v.value().item().expect("scalar loss")
}

/// Stage losses of one task under `model`. Multi-MAML routes by the task's
/// ground-truth mode label.
pub fn evaluate_task(model: &Model, task: &TaskSample) -> Result<TaskRecord> {
    let member = model.member_for(task.mode_label);
    let params: &LearnerParams<Tensor> = &member.params;
    let theta = params.theta.try_map(&mut |t| Var::param(t.clone()))?;
    let identity = ModulationSet::identity(params.theta.layers.len() - 1);

    let prior = no_grad(|| loss_on(&theta, &identity, &task.query)).map(scalar)?;
    let tau = match &params.modulation {
        Some(_) => {
            let constants = params.to_constants()?;
            Some(no_grad(|| crate::meta::modulate(&constants, &task.support, model.operator()))?)
        }
        None => None,
    };
    let post_modulation = match &tau {
        Some(t) => Some(no_grad(|| loss_on(&theta, t, &task.query)).map(scalar)?),
        None => None,
    };
    let post_adaptation = if model.kind.adapts() {
        let t = tau.as_ref().unwrap_or(&identity);
        let adapted = inner_adapt(&theta, t, &task.support, model.config.inner_lr, model.eval_inner_steps(), false)
            .and_then(|a| no_grad(|| loss_on(&a, t, &task.query)).map(scalar));
        Some(match adapted {
            // adaptation overflowed: the task counts with unbounded error
            Err(Error::Autodiff(AutodiffError::NonFinite { .. })) => f64::INFINITY,
            other => other?,
        })
    } else {
        None
    };
    Ok(TaskRecord { mode_label: task.mode_label, prior, post_modulation, post_adaptation })
}

/// Which parameters a prediction uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prior,
    PostModulation,
    PostAdaptation,
}

/// Network outputs at `x` after conditioning on `support` up to `stage`.
/// `member` picks the Multi-MAML learner and is ignored otherwise.
pub fn predict(model: &Model, member: usize, support: &Points, x: &[f64], stage: Stage) -> Result<Vec<f64>> {
    let learner = model.member_for(member.min(model.members.len() - 1));
    let params = &learner.params;
    let theta = params.theta.try_map(&mut |t| Var::param(t.clone()))?;
    let mut tau = ModulationSet::identity(params.theta.layers.len() - 1);
    if stage != Stage::Prior && params.modulation.is_some() {
        if support.is_empty() {
            return Err(Error::EmptySupport);
        }
        tau = no_grad(|| crate::meta::modulate(&params.to_constants()?, support, model.operator()))?;
    }
    let theta = if stage == Stage::PostAdaptation && model.kind.adapts() {
        inner_adapt(&theta, &tau, support, model.config.inner_lr, model.eval_inner_steps(), false)?
    } else {
        theta
    };
    let input = Var::constant(Tensor::vector(x.to_vec()))?;
    let out = no_grad(|| crate::task_net::forward(&input, &theta, &tau))?;
    Ok(out.value().data().to_vec())
}

/// Task `index` of mode `label`, drawn from its own stream.
pub fn eval_task(dist: &TaskDistribution, seed: u64, label: usize, index: usize) -> TaskSample {
    let mut rng = RngStream::new(seed).substream(((label as u64) << 32) | index as u64);
    dist.sample_labelled(label, &mut rng)
}

/// Per-task records, grouped by mode in mode-set order.
pub fn evaluate_records(model: &Model, modes: &ModeSet, tasks_per_mode: usize, seed: u64) -> Result<Vec<Vec<TaskRecord>>> {
    let cfg = &model.config;
    let dist = TaskDistribution::new(modes.clone(), cfg.k, cfg.l, cfg.noise_sigma)?;
    (0..modes.len())
        .map(|label| {
            (0..tasks_per_mode)
                .into_par_iter()
                .map(|i| evaluate_task(model, &route(model, eval_task(&dist, seed, label, i))))
                .collect()
        })
        .collect()
}

/// Re-labels a task against the model's own mode set so Multi-MAML picks
/// the right member when evaluated on a different ordering.
fn route(model: &Model, mut task: TaskSample) -> TaskSample {
    if model.kind == ModelKind::MultiMaml {
        if let Some(label) = model.config.modes.label_of(task.spec.mode()) {
            task.mode_label = label;
        }
    }
    task
}

/// Full evaluation report.
pub fn evaluate(model: &Model, modes: &ModeSet, tasks_per_mode: usize, seed: u64) -> Result<EvalReport> {
    if tasks_per_mode == 0 {
        return Err(Error::Config("tasks_per_mode must be at least 1".into()));
    }
    if model.kind == ModelKind::MultiMaml {
        if let Some(m) = modes.modes().iter().find(|m| model.config.modes.label_of(**m).is_none()) {
            return Err(Error::Config(format!("multi-maml has no member for mode {m}")));
        }
    }
    let records = evaluate_records(model, modes, tasks_per_mode, seed)?;
    let per_mode: Vec<ModeReport> = modes
        .modes()
        .iter()
        .zip(&records)
        .map(|(m, r)| ModeReport {
            mode: m.name().to_string(),
            tasks: r.len(),
            diverged: r.iter().filter(|t| t.post_adaptation.is_some_and(f64::is_infinite)).count(),
            mse: mean_stage(r),
        })
        .collect();
    let mut notes = Vec::new();
    let diverged: usize = per_mode.iter().map(|m| m.diverged).sum();
    if diverged > 0 {
        notes.push(format!("{diverged} tasks diverged during adaptation"));
    }
    if !model.kind.has_modulation() {
        notes.push(format!("{} has no modulation network; post_modulation omitted", model.kind));
    }
    if !model.kind.adapts() {
        notes.push(format!("{} takes no gradient steps; post_adaptation omitted", model.kind));
    }
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        model: model.kind,
        trained_iterations: model.iteration,
        seed,
        tasks_per_mode,
        total_tasks: tasks_per_mode * modes.len(),
        eval_inner_steps: model.eval_inner_steps(),
        overall: weighted_overall(&per_mode),
        per_mode,
        notes,
        config: model.config.clone(),
    })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "mode,tasks,prior,post_modulation,post_adaptation";

    /// One row per mode plus an `overall` row; absent stages are empty cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER.split(',')).map_err(csv_err)?;
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let rows = self.per_mode.iter().map(|m| (m.mode.as_str(), m.tasks, m.mse)).chain([("overall", self.total_tasks, self.overall)]);
        for (mode, tasks, s) in rows {
            w.write_record([mode.to_string(), tasks.to_string(), s.prior.to_string(), cell(s.post_modulation), cell(s.post_adaptation)])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Column names of the embedding export.
pub fn embedding_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["task_id", "mode_label", "mode", "A", "w", "c", "b"].map(String::from).into();
    h.extend((0..dim).map(|i| format!("u{i}")));
    h
}

/// One exported row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub task_id: usize,
    pub task: TaskSample,
    pub embedding: TaskEmbedding,
}

/// Embeds `n_tasks` tasks drawn from `modes`.
pub fn embed_tasks(model: &Model, modes: &ModeSet, n_tasks: usize, seed: u64) -> Result<Vec<EmbeddingRow>> {
    let modulation = match &model.members[0].params.modulation {
        Some(m) if model.has_encoder() => m,
        _ => return Err(Error::NoEncoder(model.kind.to_string())),
    };
    let cfg = &model.config;
    let dist = TaskDistribution::new(modes.clone(), cfg.k, cfg.l, cfg.noise_sigma)?;
    (0..n_tasks)
        .into_par_iter()
        .map(|i| {
            let task = dist.sample(&mut RngStream::new(seed).substream(i as u64));
            let encoder = modulation.encoder.try_map(&mut |t| Var::constant(t.clone()))?;
            let upsilon = no_grad(|| encode(&task.support, &encoder))?;
            Ok(EmbeddingRow { task_id: i, task, embedding: TaskEmbedding::from_var(&upsilon) })
        })
        .collect()
}

pub fn write_embeddings<W: Write>(rows: &[EmbeddingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = rows.first().map_or(crate::modulation::EMBEDDING_DIM, |r| r.embedding.dim());
    w.write_record(embedding_header(dim)).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let p = r.task.spec.params();
        let mut rec = vec![
            r.task_id.to_string(),
            r.task.mode_label.to_string(),
            r.task.spec.mode().name().to_string(),
            p.a.to_string(),
            opt(p.w),
            opt(p.c),
            p.b.to_string(),
        ];
        rec.extend(r.embedding.values.iter().map(f64::to_string));
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Embeds tasks and writes them to `path` atomically.
pub fn export_embeddings(model: &Model, modes: &ModeSet, n_tasks: usize, seed: u64, path: &Path) -> Result<Vec<EmbeddingRow>> {
    let rows = embed_tasks(model, modes, n_tasks, seed)?;
    let mut buf = Vec::new();
    write_embeddings(&rows, &mut buf)?;
    crate::checkpoint::write_atomic(path, &buf)?;
    Ok(rows)
}

/// Fits centroids on the first half of `rows` and reports accuracy of
/// nearest-centroid mode prediction on the second half.
pub fn nearest_centroid_accuracy(rows: &[EmbeddingRow], n_modes: usize) -> f64 {
    let split = rows.len() / 2;
    let (fit, test) = rows.split_at(split);
    let dim = rows.first().map_or(0, |r| r.embedding.dim());
    let mut sums = vec![vec![0.0; dim]; n_modes];
    let mut counts = vec![0usize; n_modes];
    for r in fit {
        counts[r.task.mode_label] += 1;
        for (s, v) in sums[r.task.mode_label].iter_mut().zip(&r.embedding.values) {
            *s += v;
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let correct = test
        .iter()
        .filter(|r| {
            let dist = |c: &Vec<f64>| c.iter().zip(&r.embedding.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = centroids
                .iter()
                .enumerate()
                .filter_map(|(i, c)| c.as_ref().map(|c| (i, dist(c))))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i);
            best == Some(r.task.mode_label)
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
