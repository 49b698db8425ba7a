//! The training step in all four modes and the end-to-end experiment loop.
//!
//! * `single_task`: one independent copy of the initial model per task,
//!   each trained on its own task only.
//! * `joint`: one shared model updated with the gradient of the summed
//!   loss, from a single backward pass.
//! * `ortho_flat` / `ortho_structured`: per-task gradients, conflict
//!   projection over the whole adapter vector or per constituent matrix,
//!   then the summed result goes to AdamW.

use serde::{Deserialize, Serialize};

use crate::config::{streams, ExperimentConfig};
use crate::dense::{Matrix, Rng};
use crate::error::{Error, Result};
use crate::model::{MultiTaskModel, TaskBatch, TaskGradient, TaskKind, Targets, Update};
use crate::optim::{linear_decay_lr, AdamWConfig, AdamWState};
use crate::surgery::{conflict_report, merge, surgery, ConflictRecord, ConflictReport, ProjectAgainst, ProjectionScope};
use crate::synth::{SyntheticTaskSet, TaskPool};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SingleTask,
    Joint,
    OrthoFlat,
    OrthoStructured,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::SingleTask,
        TrainMode::Joint,
        TrainMode::OrthoFlat,
        TrainMode::OrthoStructured,
    ];

    pub fn all_vec() -> Vec<TrainMode> {
        Self::ALL.to_vec()
    }

    pub fn label(&self) -> &'static str {
        match self {
            TrainMode::SingleTask => "single_task",
            TrainMode::Joint => "joint",
            TrainMode::OrthoFlat => "ortho_flat",
            TrainMode::OrthoStructured => "ortho_structured",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label() == s)
    }

    pub fn shares_model(&self) -> bool {
        !matches!(self, TrainMode::SingleTask)
    }
}

/// Backward passes one training step performs to produce its update.
pub fn count_backward_passes(mode: TrainMode, tasks: usize) -> usize {
    match mode {
        TrainMode::Joint => 1,
        TrainMode::SingleTask | TrainMode::OrthoFlat | TrainMode::OrthoStructured => tasks,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerOptions {
    pub structured_scope: ProjectionScope,
    pub project_against: ProjectAgainst,
    pub joint_diagnostics: bool,
    pub weights: Option<Vec<f64>>,
}

impl Default for TrainerOptions {
    fn default() -> Self {
        Self {
            structured_scope: ProjectionScope::PerMatrix,
            project_against: ProjectAgainst::Original,
            joint_diagnostics: true,
            weights: None,
        }
    }
}

/// What one step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Pre-update loss per task.
    pub losses: Vec<f64>,
    /// Conflicts among the raw task gradients, when computed.
    pub report: Option<ConflictReport>,
    /// Update handed to AdamW, one per trained model.
    pub updates: Vec<Update>,
    pub backward_passes: usize,
    pub diagnostic_backward_passes: usize,
    pub projections: usize,
    pub surgery_floats_touched: usize,
}

pub struct Trainer {
    mode: TrainMode,
    options: TrainerOptions,
    models: Vec<MultiTaskModel>,
    optimizers: Vec<AdamWState>,
    surgery_rng: Rng,
}

impl Trainer {
    pub fn new(
        mode: TrainMode,
        initial: MultiTaskModel,
        hyper: AdamWConfig,
        options: TrainerOptions,
        surgery_rng: Rng,
    ) -> Result<Self> {
        let tasks = initial.num_tasks();
        if let Some(w) = &options.weights {
            if w.len() != tasks {
                return Err(Error::param(format!("{} weights for {tasks} tasks", w.len())));
            }
        }
        if options.structured_scope == ProjectionScope::Flat {
            return Err(Error::param("structured scope cannot be flat"));
        }
        let copies = if mode.shares_model() { 1 } else { tasks };
        Ok(Self {
            mode,
            options,
            models: vec![initial; copies],
            optimizers: vec![AdamWState::new(hyper); copies],
            surgery_rng,
        })
    }

    pub fn mode(&self) -> TrainMode {
        self.mode
    }

    pub fn models(&self) -> &[MultiTaskModel] {
        &self.models
    }

    /// The model that serves `task`.
    pub fn model_for(&self, task: usize) -> &MultiTaskModel {
        if self.mode.shares_model() {
            &self.models[0]
        } else {
            &self.models[task]
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.models[0].num_tasks()
    }

    fn weight(&self, task: usize) -> f64 {
        self.options.weights.as_ref().map_or(1.0, |w| w[task])
    }

    fn weighted_gradient(&self, model: &MultiTaskModel, batch: &TaskBatch) -> Result<(f64, TaskGradient)> {
        let loss = model.task_loss(batch)?;
        let mut g = model.task_gradient(batch)?;
        let w = self.weight(batch.task);
        if w != 1.0 {
            g.blocks.values_mut().for_each(|m| m.scale_in_place(w));
        }
        Ok((loss, g))
    }

    /// One training step. `batches[t]` must hold task `t`.
    pub fn train_step(&mut self, batches: &[TaskBatch], step: usize, lr: f64) -> Result<StepOutcome> {
        let tasks = self.num_tasks();
        if batches.len() != tasks {
            return Err(Error::param(format!("{} batches for {tasks} tasks", batches.len())));
        }
        if let Some((t, b)) = batches.iter().enumerate().find(|(t, b)| b.task != *t) {
            return Err(Error::param(format!("batch {t} is labelled as task {}", b.task)));
        }

        let mut outcome = StepOutcome {
            losses: vec![0.0; tasks],
            report: None,
            updates: Vec::new(),
            backward_passes: 0,
            diagnostic_backward_passes: 0,
            projections: 0,
            surgery_floats_touched: 0,
        };

        match self.mode {
            TrainMode::SingleTask => {
                for (t, batch) in batches.iter().enumerate() {
                    let (loss, g) = self.weighted_gradient(&self.models[t], batch)?;
                    outcome.losses[t] = loss;
                    outcome.backward_passes += 1;
                    let update = merge(std::slice::from_ref(&g))?;
                    self.optimizers[t].apply(&mut self.models[t], &update, lr)?;
                    outcome.updates.push(update);
                }
            }
            TrainMode::Joint => {
                let model = &self.models[0];
                let (losses, update) = model.joint_gradient(batches, self.options.weights.as_deref())?;
                outcome.backward_passes = 1;
                if self.options.joint_diagnostics {
                    let grads = batches
                        .iter()
                        .map(|b| self.weighted_gradient(model, b).map(|(_, g)| g))
                        .collect::<Result<Vec<_>>>()?;
                    outcome.diagnostic_backward_passes = tasks;
                    check_linearity(&update, &grads)?;
                    outcome.report = Some(conflict_report(step, &grads, self.options.structured_scope)?);
                }
                outcome.losses = losses;
                self.optimizers[0].apply(&mut self.models[0], &update, lr)?;
                outcome.updates.push(update);
            }
            TrainMode::OrthoFlat | TrainMode::OrthoStructured => {
                let scope = if self.mode == TrainMode::OrthoFlat {
                    ProjectionScope::Flat
                } else {
                    self.options.structured_scope
                };
                let model = &self.models[0];
                let mut grads = Vec::with_capacity(tasks);
                for (t, batch) in batches.iter().enumerate() {
                    let (loss, g) = self.weighted_gradient(model, batch)?;
                    outcome.losses[t] = loss;
                    grads.push(g);
                }
                outcome.backward_passes = tasks;
                outcome.report = Some(conflict_report(step, &grads, scope)?);
                let projected = surgery(&grads, scope, self.options.project_against, &mut self.surgery_rng)?;
                outcome.projections = projected.projections;
                outcome.surgery_floats_touched = projected.floats_touched;
                let update = merge(&projected.grads)?;
                self.optimizers[0].apply(&mut self.models[0], &update, lr)?;
                outcome.updates.push(update);
            }
        }
        Ok(outcome)
    }

    /// Held-out metric per task (accuracy or MSE).
    pub fn evaluate(&self, pools: &[TaskPool]) -> Result<Vec<f64>> {
        pools
            .iter()
            .enumerate()
            .map(|(t, pool)| eval_metric(self.model_for(t), t, pool))
            .collect()
    }
}

/// Checks that the single-backward joint gradient equals the sum of the
/// per-task gradients.
fn check_linearity(joint: &Update, grads: &[TaskGradient]) -> Result<()> {
    let summed = merge(grads)?;
    for (id, m) in &joint.blocks {
        let other = summed
            .get(*id)
            .ok_or_else(|| Error::Numeric(format!("joint gradient has extra block {id}")))?;
        let scale: f64 = grads.iter().filter_map(|g| g.get(*id)).map(Matrix::frob_norm).sum();
        let diff = m.sub(other)?.frob_norm();
        if diff > 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Numeric(format!(
                "joint gradient block {id} differs from the per-task sum by {diff:e}"
            )));
        }
    }
    Ok(())
}

/// Accuracy for classification, mean squared error per entry for regression.
pub fn eval_metric(model: &MultiTaskModel, task: usize, pool: &TaskPool) -> Result<f64> {
    let out = model.predict(task, &pool.x)?;
    Ok(match &pool.y {
        Targets::Classes(labels) => {
            let correct = labels
                .iter()
                .enumerate()
                .filter(|&(j, &label)| {
                    let best = (0..out.rows()).fold(0, |b, c| if out.get(c, j) > out.get(b, j) { c } else { b });
                    best == label
                })
                .count();
            correct as f64 / labels.len() as f64
        }
        Targets::Values(y) => {
            let d = out.sub(y)?;
            d.flat_dot(&d)? / d.len() as f64
        }
    })
}

/// Whether larger values of the task's eval metric are better.
pub fn higher_is_better(kind: &TaskKind) -> bool {
    kind.is_classification()
}

/// Per-task minibatches drawn in lockstep: one shuffled index order is
/// shared by every task, and a fresh order is drawn whenever it runs out.
pub struct Sampler {
    pool_len: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl Sampler {
    pub fn new(pool_len: usize, batch_size: usize, mut rng: Rng) -> Result<Self> {
        if pool_len == 0 || batch_size == 0 {
            return Err(Error::param("sampler needs a nonempty pool and batch"));
        }
        let order = rng.permutation(pool_len);
        Ok(Self {
            pool_len,
            batch_size,
            order,
            cursor: 0,
            rng,
        })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.pool_len {
                self.order = self.rng.permutation(self.pool_len);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn next_batches(&mut self, pools: &[TaskPool]) -> Result<Vec<TaskBatch>> {
        let idx = self.next_indices();
        pools.iter().enumerate().map(|(t, p)| p.batch(t, &idx)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub task: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConflictRow {
    pub step: usize,
    pub lr: f64,
    pub scope: ProjectionScope,
    pub record: ConflictRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub mode: TrainMode,
    pub task: usize,
    pub metric: f64,
}

/// Append-only log of one run in one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub mode: TrainMode,
    pub task_kinds: Vec<TaskKind>,
    pub steps: Vec<StepRecord>,
    pub conflicts: Vec<ConflictRow>,
    pub evals: Vec<EvalRecord>,
    pub backward_passes: usize,
    pub diagnostic_backward_passes: usize,
    pub projections: usize,
    pub surgery_floats_touched: usize,
}

impl MetricsLog {
    pub fn new(mode: TrainMode, task_kinds: Vec<TaskKind>) -> Self {
        Self {
            mode,
            task_kinds,
            steps: Vec::new(),
            conflicts: Vec::new(),
            evals: Vec::new(),
            backward_passes: 0,
            diagnostic_backward_passes: 0,
            projections: 0,
            surgery_floats_touched: 0,
        }
    }

    pub fn last_step(&self) -> Option<usize> {
        self.steps.last().map(|r| r.step)
    }

    /// Appends one step's records; `step` must exceed every earlier step.
    pub fn record_step(&mut self, step: usize, lr: f64, outcome: &StepOutcome) -> Result<()> {
        if self.last_step().is_some_and(|last| step <= last) {
            return Err(Error::param(format!("step {step} is not after step {:?}", self.last_step())));
        }
        for (task, &loss) in outcome.losses.iter().enumerate() {
            self.steps.push(StepRecord { step, task, loss, lr });
        }
        if let Some(report) = &outcome.report {
            for record in &report.pairs {
                self.conflicts.push(ConflictRow {
                    step,
                    lr,
                    scope: report.scope,
                    record: record.clone(),
                });
            }
        }
        self.backward_passes += outcome.backward_passes;
        self.diagnostic_backward_passes += outcome.diagnostic_backward_passes;
        self.projections += outcome.projections;
        self.surgery_floats_touched += outcome.surgery_floats_touched;
        Ok(())
    }

    pub fn record_eval(&mut self, epoch: usize, metrics: &[f64]) {
        for (task, &metric) in metrics.iter().enumerate() {
            self.evals.push(EvalRecord {
                epoch,
                mode: self.mode,
                task,
                metric,
            });
        }
    }

    pub fn final_epoch(&self) -> Option<usize> {
        self.evals.last().map(|e| e.epoch)
    }

    /// Per-task metrics at the last evaluated epoch.
    pub fn final_metrics(&self) -> Vec<f64> {
        let Some(epoch) = self.final_epoch() else {
            return Vec::new();
        };
        self.evals.iter().filter(|e| e.epoch == epoch).map(|e| e.metric).collect()
    }

    pub fn final_average(&self) -> f64 {
        let m = self.final_metrics();
        m.iter().sum::<f64>() / m.len() as f64
    }

    /// Mean training loss over all tasks at the final step.
    pub fn final_train_loss(&self) -> Option<f64> {
        let last = self.last_step()?;
        let losses: Vec<f64> = self.steps.iter().filter(|r| r.step == last).map(|r| r.loss).collect();
        Some(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Fraction of steps whose conflict report has any negative dot.
    pub fn conflicted_step_fraction(&self) -> Option<f64> {
        let mut steps: std::collections::BTreeMap<usize, bool> = Default::default();
        for row in &self.conflicts {
            *steps.entry(row.step).or_default() |= row.record.conflicted;
        }
        if steps.is_empty() {
            return None;
        }
        Some(steps.values().filter(|&&c| c).count() as f64 / steps.len() as f64)
    }
}

/// Everything one training run produces, plus its final models.
pub struct RunResult {
    pub log: MetricsLog,
    pub trainer: Trainer,
}

pub fn trainer_options(config: &ExperimentConfig) -> TrainerOptions {
    TrainerOptions {
        structured_scope: config.surgery.structured_scope,
        project_against: config.surgery.project_against,
        joint_diagnostics: config.surgery.joint_diagnostics,
        weights: config.tasks.weights.clone(),
    }
}

/// Trains one mode on an already generated task set.
pub fn run_mode_on(config: &ExperimentConfig, mode: TrainMode, set: &SyntheticTaskSet) -> Result<RunResult> {
    let initial = config.initial_model(set)?;
    let mut trainer = Trainer::new(
        mode,
        initial,
        config.optimizer,
        trainer_options(config),
        Rng::with_stream(config.seed, streams::SURGERY),
    )?;
    let pool_len = set.train[0].len();
    let mut sampler = Sampler::new(pool_len, config.schedule.batch_size, Rng::with_stream(config.seed, streams::SAMPLER))?;
    let mut log = MetricsLog::new(mode, set.kinds.clone());
    log.record_eval(0, &trainer.evaluate(&set.eval)?);

    let steps_per_epoch = config.steps_per_epoch();
    let total = config.schedule.epochs * steps_per_epoch;
    let mut step = 0;
    for epoch in 1..=config.schedule.epochs {
        for _ in 0..steps_per_epoch {
            let lr = linear_decay_lr(step, total, config.optimizer.lr)?;
            let batches = sampler.next_batches(&set.train)?;
            let outcome = trainer.train_step(&batches, step, lr)?;
            log.record_step(step, lr, &outcome)?;
            step += 1;
        }
        log.record_eval(epoch, &trainer.evaluate(&set.eval)?);
    }
    Ok(RunResult { log, trainer })
}

pub fn run_mode(config: &ExperimentConfig, mode: TrainMode) -> Result<MetricsLog> {
    config.validate()?;
    let set = config.task_set()?;
    Ok(run_mode_on(config, mode, &set)?.log)
}

/// Runs every configured mode on the same task set and initial model.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsLog>> {
    config.validate()?;
    let set = config.task_set()?;
    config
        .modes
        .iter()
        .map(|&mode| run_mode_on(config, mode, &set).map(|r| r.log))
        .collect()
}
