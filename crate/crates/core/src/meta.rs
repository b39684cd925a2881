//! Meta-training: modulation, inner-loop adaptation and the outer update,
//! plus the MAML, Multi-MAML and LSTM-learner baselines.
//!
//! Per task, the support set is encoded and turned into modulation vectors,
//! the task network takes a few gradient steps on the support loss with the
//! modulation held fixed, and the adapted network is scored on the query
//! set. The query losses of a meta-batch are summed and one Adam step is
//! taken jointly over the task network, encoder and generators.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, grad_tensors, AutodiffError, Tensor, Var};
use crate::error::{Error, Result};
use crate::modulation::{init_encoder, init_generators, zero_generators, ModulationNetwork};
use crate::nn::{init_mlp, join, Mlp, Params};
use crate::optim::{clip_global_norm, global_norm, AdamState};
use crate::task_net::{forward, mse_loss, ModulationSet, Operator};
use crate::tasks::{ModeSet, Points, RngStream, TaskDistribution, TaskSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mmaml,
    Maml,
    MultiMaml,
    LstmLearner,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mmaml => "mmaml",
            ModelKind::Maml => "maml",
            ModelKind::MultiMaml => "multi-maml",
            ModelKind::LstmLearner => "lstm-learner",
        }
    }

    pub fn has_modulation(self) -> bool {
        matches!(self, ModelKind::Mmaml | ModelKind::LstmLearner)
    }

    pub fn adapts(self) -> bool {
        !matches!(self, ModelKind::LstmLearner)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmaml" => Ok(ModelKind::Mmaml),
            "maml" => Ok(ModelKind::Maml),
            "multi-maml" => Ok(ModelKind::MultiMaml),
            "lstm-learner" => Ok(ModelKind::LstmLearner),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// Meta-training hyper-parameters. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Inner-loop step size.
    pub inner_lr: f64,
    /// Adam learning rate for the outer update.
    pub meta_lr: f64,
    pub inner_steps_train: usize,
    pub inner_steps_eval: usize,
    /// Tasks per meta-batch (per member for Multi-MAML).
    pub meta_batch_size: usize,
    pub iterations: usize,
    /// Modulation operator for MMAML; the LSTM learner always uses FiLM.
    pub operator: Operator,
    pub modes: ModeSet,
    pub noise_sigma: f64,
    pub k: usize,
    pub l: usize,
    pub seed: u64,
    /// Drop the second-order term of the meta-gradient.
    pub first_order: bool,
    /// Global-norm clip for the outer gradient; `<= 0` disables clipping.
    pub clip_norm: f64,
    /// Task network hidden widths.
    pub hidden_dims: Vec<usize>,
    pub encoder_hidden: usize,
    pub generator_hidden: usize,
    /// Start generators at zero instead of a random hidden layer.
    pub zero_init_generators: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.01,
            meta_lr: 0.001,
            inner_steps_train: 1,
            inner_steps_eval: 5,
            meta_batch_size: 25,
            iterations: 10_000,
            operator: Operator::Film,
            modes: ModeSet::with_count(2).expect("two modes"),
            noise_sigma: crate::tasks::DEFAULT_NOISE_SIGMA,
            k: crate::tasks::DEFAULT_K,
            l: crate::tasks::DEFAULT_L,
            seed: 0,
            first_order: false,
            clip_norm: 10.0,
            hidden_dims: vec![100, 100, 100],
            encoder_hidden: crate::modulation::ENCODER_HIDDEN,
            generator_hidden: crate::modulation::GENERATOR_HIDDEN,
            zero_init_generators: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.inner_lr.is_finite() && self.inner_lr > 0.0) {
            return bad("inner_lr must be > 0");
        }
        if !(self.meta_lr.is_finite() && self.meta_lr > 0.0) {
            return bad("meta_lr must be > 0");
        }
        if self.meta_batch_size == 0 {
            return bad("meta_batch_size must be >= 1");
        }
        if self.k == 0 || self.l == 0 {
            return bad("k and l must be >= 1");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad("hidden_dims must be non-empty and positive");
        }
        if self.encoder_hidden == 0 || self.generator_hidden == 0 {
            return bad("encoder_hidden and generator_hidden must be >= 1");
        }
        if self.operator == Operator::Identity {
            return bad("operator must be film, softmax-attention or sigmoid-gating");
        }
        Ok(())
    }

    pub fn task_net_dims(&self) -> Vec<usize> {
        let mut dims = vec![1];
        dims.extend(&self.hidden_dims);
        dims.push(1);
        dims
    }

    fn distribution(&self, modes: ModeSet) -> TaskDistribution {
        TaskDistribution::new(modes, self.k, self.l, self.noise_sigma).expect("validated config")
    }
}

/// Parameters of one learner: the task network and, for modulated models,
/// the encoder and generators.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerParams<T> {
    pub theta: Mlp<T>,
    pub modulation: Option<ModulationNetwork<T>>,
}

impl<T> LearnerParams<T> {
    pub fn try_map<U, E>(&self, f: &mut dyn FnMut(&T) -> std::result::Result<U, E>) -> std::result::Result<LearnerParams<U>, E> {
        Ok(LearnerParams {
            theta: self.theta.try_map(f)?,
            modulation: self.modulation.as_ref().map(|m| m.try_map(f)).transpose()?,
        })
    }

    /// Leaf counts of (task network, encoder, generators).
    pub fn group_sizes(&self) -> (usize, usize, usize) {
        let theta = self.theta.leaves().len();
        match &self.modulation {
            Some(m) => (theta, m.encoder.leaves().len(), m.generators.leaves().len()),
            None => (theta, 0, 0),
        }
    }
}

impl<T> Params<T> for LearnerParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.theta.visit(&join(prefix, "theta"), f);
        if let Some(m) = &self.modulation {
            m.visit(prefix, f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.theta.visit_mut(&join(prefix, "theta"), f);
        if let Some(m) = &mut self.modulation {
            m.visit_mut(prefix, f);
        }
    }
}

impl LearnerParams<Tensor> {
    pub fn to_vars(&self) -> Result<LearnerParams<Var>> {
        Ok(self.try_map(&mut |t| Var::param(t.clone()))?)
    }

    /// Graph constants: nothing is differentiated.
    pub fn to_constants(&self) -> Result<LearnerParams<Var>> {
        Ok(self.try_map(&mut |t| Var::constant(t.clone()))?)
    }
}

/// Modulation for one support set, or identity when the learner has no
/// modulation network.
pub fn modulate(params: &LearnerParams<Var>, support: &Points, operator: Operator) -> Result<ModulationSet<Var>> {
    match &params.modulation {
        Some(net) => Ok(net.modulate(support, operator)?.1),
        None => Ok(ModulationSet::identity(params.theta.layers.len() - 1)),
    }
}

fn points_to_vars(points: &Points) -> Result<(Var, Var)> {
    Ok((Var::constant(Tensor::vector(points.x.clone()))?, Var::constant(Tensor::vector(points.y.clone()))?))
}

/// MSE of the modulated network on `points`.
pub fn loss_on(theta: &Mlp<Var>, tau: &ModulationSet<Var>, points: &Points) -> Result<Var> {
    let (x, y) = points_to_vars(points)?;
    mse_loss(&forward(&x, theta, tau)?, &y)
}

/// `steps` full-batch gradient steps on the support loss, with `tau` fixed.
///
/// With `track_meta_graph` the adapted parameters stay differentiable through
/// the inner gradients (second order); otherwise the inner gradients are
/// constants and the adapted parameters depend on `theta` only by identity.
pub fn inner_adapt(
    theta: &Mlp<Var>,
    tau: &ModulationSet<Var>,
    support: &Points,
    alpha: f64,
    steps: usize,
    track_meta_graph: bool,
) -> Result<Mlp<Var>> {
    if alpha == 0.0 || steps == 0 {
        return Ok(theta.clone());
    }
    let mut current = theta.clone();
    for _ in 0..steps {
        let loss = loss_on(&current, tau, support)?;
        let leaves: Vec<Var> = current.leaves().into_iter().cloned().collect();
        let grads = grad(&loss, &leaves, track_meta_graph)?;
        let mut it = leaves.iter().zip(grads);
        current = current.try_map(&mut |_| {
            let (p, g) = it.next().expect("leaf count");
            p.sub(&g.scale(alpha)?)
        })?;
    }
    Ok(current)
}

/// Controls for one meta-gradient evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub alpha: f64,
    pub inner_steps: usize,
    pub operator: Operator,
    pub second_order: bool,
}

/// Query loss after modulation and adaptation, as a graph over `params`.
pub fn task_query_loss(params: &LearnerParams<Var>, task: &TaskSample, s: &StepSettings) -> Result<Var> {
    let tau = modulate(params, &task.support, s.operator)?;
    let adapted = inner_adapt(&params.theta, &tau, &task.support, s.alpha, s.inner_steps, s.second_order)?;
    loss_on(&adapted, &tau, &task.query)
}

/// Per-task query losses and the meta-gradient of their sum.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub task_losses: Vec<f64>,
    pub grads: Vec<Tensor>,
}

fn diverged(iteration: usize, task: &TaskSample, e: Error) -> Error {
    match e {
        Error::Autodiff(source @ AutodiffError::NonFinite { .. }) => {
            Error::Diverged { iteration, task: format!("{:?}", task.spec), source }
        }
        other => other,
    }
}

/// Gradient of the summed query loss over `batch` w.r.t. every leaf of `params`.
pub fn meta_gradient(params: &LearnerParams<Tensor>, batch: &[TaskSample], s: &StepSettings, iteration: usize) -> Result<MetaGradient> {
    if batch.is_empty() {
        return Err(Error::Config("meta-batch is empty".into()));
    }
    let per_task: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|task| {
            let vars = params.to_vars()?;
            let leaves: Vec<Var> = vars.leaves().into_iter().cloned().collect();
            let loss = task_query_loss(&vars, task, s)?;
            let g = grad_tensors(&loss, &leaves)?;
            Ok((loss.value().item().expect("scalar loss"), g))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .zip(batch)
        .map(|(r, task)| r.map_err(|e| diverged(iteration, task, e)))
        .collect::<Result<_>>()?;

    let mut iter = per_task.into_iter();
    let (first_loss, mut grads) = iter.next().expect("non-empty batch");
    let mut task_losses = vec![first_loss];
    for (loss, g) in iter {
        task_losses.push(loss);
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    Ok(MetaGradient { task_losses, grads })
}

/// One learner: parameters, optimizer state and the modes it trains on.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub params: LearnerParams<Tensor>,
    pub adam: AdamState,
    pub modes: ModeSet,
    /// Base seed of this learner's training task stream.
    pub task_seed: u64,
}

/// Summary of one outer update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub mean_query_loss: f64,
    pub per_mode_loss: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_encoder: f64,
    pub grad_norm_generators: f64,
    pub clipped: bool,
}

impl Learner {
    fn settings(&self, kind: ModelKind, cfg: &TrainingConfig) -> StepSettings {
        StepSettings {
            alpha: cfg.inner_lr,
            inner_steps: if kind.adapts() { cfg.inner_steps_train } else { 0 },
            operator: operator_for(kind, cfg),
            second_order: !cfg.first_order,
        }
    }

    /// Tasks for meta-iteration `iteration`.
    pub fn batch(&self, cfg: &TrainingConfig, iteration: usize) -> Vec<TaskSample> {
        let dist = cfg.distribution(self.modes.clone());
        let mut rng = RngStream::new(self.task_seed).substream(iteration as u64);
        (0..cfg.meta_batch_size).map(|_| dist.sample(&mut rng)).collect()
    }

    /// Encoder and generator gradients are zero-length for unmodulated learners.
    fn group_norms(&self, grads: &[Tensor]) -> (f64, f64, f64) {
        let (nt, ne, _) = self.params.group_sizes();
        (global_norm(&grads[..nt]), global_norm(&grads[nt..nt + ne]), global_norm(&grads[nt + ne..]))
    }

    /// Meta-gradient on `batch` and one Adam step.
    pub fn meta_train_step(&mut self, kind: ModelKind, cfg: &TrainingConfig, batch: &[TaskSample], iteration: usize) -> Result<StepMetrics> {
        let s = self.settings(kind, cfg);
        let MetaGradient { task_losses, mut grads } = meta_gradient(&self.params, batch, &s, iteration)?;
        let (gt, ge, gg) = self.group_norms(&grads);
        let grad_norm = if cfg.clip_norm > 0.0 { clip_global_norm(&mut grads, cfg.clip_norm) } else { global_norm(&grads) };
        self.adam.update(&mut self.params.leaves_mut(), &grads);

        let mut per_mode: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (task, loss) in batch.iter().zip(&task_losses) {
            let e = per_mode.entry(task.spec.mode().name().to_string()).or_default();
            e.0 += loss;
            e.1 += 1;
        }
        Ok(StepMetrics {
            mean_query_loss: task_losses.iter().sum::<f64>() / task_losses.len() as f64,
            per_mode_loss: per_mode.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            grad_norm,
            grad_norm_theta: gt,
            grad_norm_encoder: ge,
            grad_norm_generators: gg,
            clipped: cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm,
        })
    }
}

/// The operator a model kind actually uses.
pub fn operator_for(kind: ModelKind, cfg: &TrainingConfig) -> Operator {
    match kind {
        ModelKind::Mmaml => cfg.operator,
        ModelKind::LstmLearner => Operator::Film,
        ModelKind::Maml | ModelKind::MultiMaml => Operator::Identity,
    }
}

/// Seed offset between Multi-MAML members.
const MEMBER_SEED_STRIDE: u64 = 1_000_003;
/// Separates the task stream from the initialization stream.
const TASK_STREAM_SALT: u64 = 0x7a5c_9e37_79b9_7f4a;

/// A trained or training model of some kind. Multi-MAML has one member per
/// mode; every other kind has exactly one member.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub config: TrainingConfig,
    pub members: Vec<Learner>,
    /// Completed outer updates.
    pub iteration: usize,
}

/// Metrics of one meta-iteration across all members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_query_loss: f64,
    pub per_mode_loss: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_encoder: f64,
    pub grad_norm_generators: f64,
    pub clipped: bool,
}

impl Model {
    pub fn init(kind: ModelKind, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let member_modes: Vec<ModeSet> = match kind {
            ModelKind::MultiMaml => config.modes.modes().iter().map(|&m| ModeSet::single(m)).collect(),
            _ => vec![config.modes.clone()],
        };
        let dims = config.task_net_dims();
        let members = member_modes
            .into_iter()
            .enumerate()
            .map(|(i, modes)| {
                let seed = config.seed.wrapping_add(i as u64 * MEMBER_SEED_STRIDE);
                let mut rng = RngStream::new(seed);
                let theta = init_mlp(&mut rng, &dims);
                let modulation = if kind.has_modulation() {
                    let op = operator_for(kind, &config);
                    let encoder = init_encoder(&mut rng, config.encoder_hidden);
                    let emb = 2 * config.encoder_hidden;
                    let generators = if config.zero_init_generators {
                        zero_generators(op, &config.hidden_dims, emb, config.generator_hidden)?
                    } else {
                        init_generators(&mut rng, op, &config.hidden_dims, emb, config.generator_hidden)?
                    };
                    Some(ModulationNetwork { encoder, generators })
                } else {
                    None
                };
                let params = LearnerParams { theta, modulation };
                let shapes: Vec<&[usize]> = params.leaves().into_iter().map(Tensor::shape).collect();
                let adam = AdamState::new(config.meta_lr, &shapes);
                Ok(Learner { params, adam, modes, task_seed: seed ^ TASK_STREAM_SALT })
            })
            .collect::<Result<_>>()?;
        Ok(Self { kind, config, members, iteration: 0 })
    }

    pub fn operator(&self) -> Operator {
        operator_for(self.kind, &self.config)
    }

    pub fn has_encoder(&self) -> bool {
        self.kind.has_modulation()
    }

    /// Inner steps used at evaluation; zero for the LSTM learner.
    pub fn eval_inner_steps(&self) -> usize {
        if self.kind.adapts() {
            self.config.inner_steps_eval
        } else {
            0
        }
    }

    /// The learner responsible for a task with this mode label.
    pub fn member_for(&self, mode_label: usize) -> &Learner {
        match self.kind {
            ModelKind::MultiMaml => &self.members[mode_label],
            _ => &self.members[0],
        }
    }

    /// Runs one meta-iteration for every member.
    pub fn step(&mut self) -> Result<IterationMetrics> {
        let iteration = self.iteration;
        let (kind, cfg) = (self.kind, self.config.clone());
        let mut all = Vec::with_capacity(self.members.len());
        for member in &mut self.members {
            let batch = member.batch(&cfg, iteration);
            all.push(member.meta_train_step(kind, &cfg, &batch, iteration)?);
        }
        self.iteration += 1;
        let n = all.len() as f64;
        let sq = |f: fn(&StepMetrics) -> f64| all.iter().map(|m| f(m).powi(2)).sum::<f64>().sqrt();
        let mut per_mode = BTreeMap::new();
        for m in &all {
            per_mode.extend(m.per_mode_loss.iter().map(|(k, v)| (k.clone(), *v)));
        }
        Ok(IterationMetrics {
            iteration,
            mean_query_loss: all.iter().map(|m| m.mean_query_loss).sum::<f64>() / n,
            per_mode_loss: per_mode,
            grad_norm: sq(|m| m.grad_norm),
            grad_norm_theta: sq(|m| m.grad_norm_theta),
            grad_norm_encoder: sq(|m| m.grad_norm_encoder),
            grad_norm_generators: sq(|m| m.grad_norm_generators),
            clipped: all.iter().any(|m| m.clipped),
        })
    }

    /// Trains until `config.iterations` updates are done, reporting each one.
    pub fn train_with(&mut self, mut on_iteration: impl FnMut(&IterationMetrics, &Model) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            let metrics = self.step()?;
            on_iteration(&metrics, self)?;
        }
        Ok(())
    }
}

/// Trains a model of `kind` from scratch.
pub fn run_baseline(kind: ModelKind, cfg: TrainingConfig) -> Result<Model> {
    let mut model = Model::init(kind, cfg)?;
    model.train_with(|_, _| Ok(()))?;
    Ok(model)
}
