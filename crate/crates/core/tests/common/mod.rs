//! Oracles and builders shared by the integration tests.
#![allow(dead_code)]

use ortho_lora::model::ModelShape;
use ortho_lora::trainer::{Sampler, TrainerOptions};
use ortho_lora::{
    BlockId, ExperimentConfig, Matrix, MultiTaskModel, Rng, TaskBatch, TaskKind, Targets, TrainMode, Trainer,
};

/// Central differences on one parameter block, entry by entry.
pub fn central_difference(model: &MultiTaskModel, batch: &TaskBatch, id: BlockId, h: f64) -> Matrix {
    let shape = model.param(id).expect("block exists").shape();
    let mut out = Matrix::zeros(shape.0, shape.1);
    let mut probe = model.clone();
    for r in 0..shape.0 {
        for c in 0..shape.1 {
            let orig = probe.param(id).unwrap().get(r, c);
            probe.param_mut(id).unwrap().set(r, c, orig + h);
            let up = probe.task_loss(batch).unwrap();
            probe.param_mut(id).unwrap().set(r, c, orig - h);
            let down = probe.task_loss(batch).unwrap();
            probe.param_mut(id).unwrap().set(r, c, orig);
            out.set(r, c, (up - down) / (2.0 * h));
        }
    }
    out
}

/// `|a - b| / max(|a|, |b|)` with a floor for all-zero blocks.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.sub(b).unwrap().frob_norm();
    let scale = a.frob_norm().max(b.frob_norm());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// A model with every adapter block random so no gradient is trivially zero.
pub fn random_model(layer_dims: &[usize], rank: usize, kinds: &[TaskKind], rng: &mut Rng) -> MultiTaskModel {
    let shape = ModelShape {
        layer_dims: layer_dims.to_vec(),
        rank,
        alpha: 2.0 * rank as f64,
        sigma_init: 0.3,
        head_sigma: 0.5,
        shared_head_init: false,
    };
    let mut model = MultiTaskModel::build(&shape, kinds, rng).unwrap();
    for id in model.adapter_block_ids() {
        let p = model.param_mut(id).unwrap();
        *p = Matrix::gaussian(p.rows(), p.cols(), 0.4, rng).unwrap();
    }
    model
}

pub fn random_batch(model: &MultiTaskModel, task: usize, n: usize, rng: &mut Rng) -> TaskBatch {
    let x = Matrix::gaussian(model.in_dim(), n, 1.0, rng).unwrap();
    let y = match model.tasks()[task] {
        TaskKind::Classification { classes } => Targets::Classes((0..n).map(|_| rng.below(classes as u64) as usize).collect()),
        TaskKind::Regression { outputs } => Targets::Values(Matrix::gaussian(outputs, n, 1.0, rng).unwrap()),
    };
    TaskBatch::new(task, x, y).unwrap()
}

/// Flattened adapter parameters, in block order.
pub fn adapter_vector(model: &MultiTaskModel) -> Vec<f64> {
    model
        .adapter_block_ids()
        .into_iter()
        .flat_map(|id| model.param(id).unwrap().data().to_vec())
        .collect()
}

/// Adds `step * direction` to the adapter blocks.
pub fn shift_adapters(model: &MultiTaskModel, direction: &[f64], step: f64) -> MultiTaskModel {
    let mut out = model.clone();
    let mut offset = 0;
    for id in out.adapter_block_ids() {
        let p = out.param_mut(id).unwrap();
        for v in p.data_mut() {
            *v += step * direction[offset];
            offset += 1;
        }
    }
    assert_eq!(offset, direction.len());
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Trains `modes` in lockstep on the same batches and hands each step's
/// trainers to `check`.
pub fn lockstep(cfg: &ExperimentConfig, modes: &[TrainMode], mut check: impl FnMut(usize, &[Trainer], &[Vec<f64>])) {
    let set = cfg.task_set().unwrap();
    let initial = cfg.initial_model(&set).unwrap();
    let options = TrainerOptions {
        structured_scope: cfg.surgery.structured_scope,
        project_against: cfg.surgery.project_against,
        joint_diagnostics: cfg.surgery.joint_diagnostics,
        weights: None,
    };
    let mut trainers: Vec<Trainer> = modes
        .iter()
        .map(|&m| Trainer::new(m, initial.clone(), cfg.optimizer, options.clone(), Rng::new(99)).unwrap())
        .collect();
    let mut sampler = Sampler::new(set.train[0].len(), cfg.schedule.batch_size, Rng::new(cfg.seed)).unwrap();
    let total = cfg.schedule.epochs * cfg.steps_per_epoch();
    for step in 0..total {
        let lr = ortho_lora::optim::linear_decay_lr(step, total, cfg.optimizer.lr).unwrap();
        let batches = sampler.next_batches(&set.train).unwrap();
        let losses: Vec<Vec<f64>> = trainers
            .iter_mut()
            .map(|t| t.train_step(&batches, step, lr).unwrap().losses)
            .collect();
        check(step, &trainers, &losses);
    }
}

/// Largest entry-wise gap between the trainable blocks of two models.
pub fn max_param_gap(a: &MultiTaskModel, b: &MultiTaskModel) -> f64 {
    let mut ids = a.adapter_block_ids();
    ids.extend((0..a.num_tasks()).map(BlockId::head));
    ids.into_iter()
        .map(|id| a.param(id).unwrap().sub(b.param(id).unwrap()).unwrap().max_abs())
        .fold(0.0, f64::max)
}
