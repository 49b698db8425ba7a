//! Synthetic task families with a tunable amount of gradient conflict.
//!
//! Every task reads the same inputs `x ~ N(0, I)`. Task `t` has teacher
//! `W_t = W_shared + s_t·c·U`, where `s_t` alternates `+1, −1, +1, …`, `c`
//! is the conflict level and `U = u·vᵀ` is a random rank-one direction.
//! Regression targets are `W_t x + σε`; classification labels are the
//! argmax of the same noisy logits. The noise draw `ε` is shared by all
//! tasks, so `c = 0` yields literally identical tasks.
//!
//! Classification sets are checked for degenerate labels: every class must
//! cover at least `min(10%, 1/(2·classes))` of each task's pool. A set that
//! fails is regenerated from `seed + 1`, `seed + 2`, … and the seed actually
//! used is recorded in [`SyntheticTaskSet::seed_used`].

use std::io::Write;
use std::path::Path;

use crate::dense::{Matrix, Rng};
use crate::error::{Error, Result};
use crate::model::{TaskBatch, TaskKind, Targets};

const MAX_SEED_BUMPS: u64 = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskPool {
    pub x: Matrix,
    pub y: Targets,
}

impl TaskPool {
    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, task: usize, indices: &[usize]) -> Result<TaskBatch> {
        TaskBatch::new(task, self.x.select_columns(indices)?, self.y.select(indices)?)
    }

    pub fn full_batch(&self, task: usize) -> TaskBatch {
        TaskBatch::new(task, self.x.clone(), self.y.clone()).expect("pool invariant")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConflictParams {
    pub in_dim: usize,
    pub tasks: usize,
    pub conflict_level: f64,
    pub noise_sigma: f64,
    /// Multiplier on `W_shared`; `0` makes the teachers purely `±c·U`.
    pub shared_scale: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSet {
    pub kinds: Vec<TaskKind>,
    pub teachers: Vec<Matrix>,
    pub conflict_level: f64,
    pub noise_sigma: f64,
    pub train: Vec<TaskPool>,
    pub eval: Vec<TaskPool>,
    pub seed_used: u64,
}

impl SyntheticTaskSet {
    pub fn num_tasks(&self) -> usize {
        self.kinds.len()
    }

    /// Writes every example as one CSV row: `split,task,example,x…,y…`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let in_dim = self.train[0].x.rows();
        let y_cols = match self.kinds[0] {
            TaskKind::Classification { .. } => 1,
            TaskKind::Regression { outputs } => outputs,
        };
        let mut header = vec!["split".to_string(), "task".into(), "example".into()];
        header.extend((0..in_dim).map(|i| format!("x{i}")));
        header.extend((0..y_cols).map(|i| format!("y{i}")));
        let io = |e| Error::io(path, e);
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for (split, pools) in [("train", &self.train), ("eval", &self.eval)] {
            for (t, pool) in pools.iter().enumerate() {
                for j in 0..pool.len() {
                    let mut row = vec![split.to_string(), t.to_string(), j.to_string()];
                    row.extend((0..in_dim).map(|i| format!("{:.16e}", pool.x.get(i, j))));
                    match &pool.y {
                        Targets::Classes(c) => row.push(c[j].to_string()),
                        Targets::Values(v) => row.extend((0..v.rows()).map(|i| format!("{:.16e}", v.get(i, j)))),
                    }
                    writeln!(out, "{}", row.join(",")).map_err(io)?;
                }
            }
        }
        out.flush().map_err(io)
    }
}

fn validate(p: &ConflictParams, out_dim: usize) -> Result<()> {
    if p.in_dim == 0 || out_dim == 0 {
        return Err(Error::param("task dimensions must be positive"));
    }
    if p.tasks == 0 {
        return Err(Error::param("need at least one task"));
    }
    if !(0.0..=1.0).contains(&p.conflict_level) {
        return Err(Error::param(format!("conflict_level {} outside [0, 1]", p.conflict_level)));
    }
    if p.conflict_level > 0.0 && p.tasks < 2 {
        return Err(Error::param("conflict_level > 0 needs at least 2 tasks"));
    }
    if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) {
        return Err(Error::param(format!("noise_sigma {} must be >= 0", p.noise_sigma)));
    }
    if !(p.shared_scale >= 0.0 && p.shared_scale.is_finite()) {
        return Err(Error::param(format!("shared_scale {} must be >= 0", p.shared_scale)));
    }
    if p.n_train == 0 || p.n_eval == 0 {
        return Err(Error::param("n_train and n_eval must be positive"));
    }
    Ok(())
}

/// Inputs, teachers and noisy teacher outputs for every task.
struct Draw {
    x: Matrix,
    teachers: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

fn draw(p: &ConflictParams, out_dim: usize, rng: &mut Rng) -> Result<Draw> {
    let in_scale = 1.0 / (p.in_dim as f64).sqrt();
    let shared = if p.shared_scale > 0.0 {
        Matrix::gaussian(out_dim, p.in_dim, p.shared_scale * in_scale, rng)?
    } else {
        Matrix::zeros(out_dim, p.in_dim)
    };
    let u = Matrix::gaussian(out_dim, 1, 1.0, rng)?;
    let v = Matrix::gaussian(1, p.in_dim, in_scale, rng)?;
    let direction = u.matmul(&v)?;
    let teachers: Vec<Matrix> = (0..p.tasks)
        .map(|t| {
            let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
            let mut w = shared.clone();
            w.axpy(sign * p.conflict_level, &direction).unwrap();
            w
        })
        .collect();
    let n = p.n_train + p.n_eval;
    let x = Matrix::gaussian(p.in_dim, n, 1.0, rng)?;
    let noise = if p.noise_sigma > 0.0 {
        Some(Matrix::gaussian(out_dim, n, p.noise_sigma, rng)?)
    } else {
        None
    };
    let outputs = teachers
        .iter()
        .map(|w| {
            let mut y = w.matmul(&x)?;
            if let Some(e) = &noise {
                y.axpy(1.0, e)?;
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Draw { x, teachers, outputs })
}

fn split(p: &ConflictParams, x: &Matrix, y: Targets) -> Result<(TaskPool, TaskPool)> {
    let train_idx: Vec<usize> = (0..p.n_train).collect();
    let eval_idx: Vec<usize> = (p.n_train..p.n_train + p.n_eval).collect();
    Ok((
        TaskPool {
            x: x.select_columns(&train_idx)?,
            y: y.select(&train_idx)?,
        },
        TaskPool {
            x: x.select_columns(&eval_idx)?,
            y: y.select(&eval_idx)?,
        },
    ))
}

pub fn make_regression_conflict(params: &ConflictParams, outputs: usize, seed: u64) -> Result<SyntheticTaskSet> {
    validate(params, outputs)?;
    let mut rng = Rng::new(seed);
    let d = draw(params, outputs, &mut rng)?;
    let mut train = Vec::with_capacity(params.tasks);
    let mut eval = Vec::with_capacity(params.tasks);
    for y in d.outputs {
        let (tr, ev) = split(params, &d.x, Targets::Values(y))?;
        train.push(tr);
        eval.push(ev);
    }
    Ok(SyntheticTaskSet {
        kinds: vec![TaskKind::Regression { outputs }; params.tasks],
        teachers: d.teachers,
        conflict_level: params.conflict_level,
        noise_sigma: params.noise_sigma,
        train,
        eval,
        seed_used: seed,
    })
}

/// Minimum class share accepted by the degenerate-label guard.
pub fn min_class_share(classes: usize) -> f64 {
    0.10f64.min(0.5 / classes as f64)
}

pub fn make_classification_conflict(params: &ConflictParams, classes: usize, seed: u64) -> Result<SyntheticTaskSet> {
    if classes < 2 {
        return Err(Error::param(format!("classification needs at least 2 classes, got {classes}")));
    }
    validate(params, classes)?;
    let n = params.n_train + params.n_eval;
    let min_count = (min_class_share(classes) * n as f64).ceil() as usize;
    for bump in 0..MAX_SEED_BUMPS {
        let seed_used = seed.wrapping_add(bump);
        let mut rng = Rng::new(seed_used);
        let d = draw(params, classes, &mut rng)?;
        let labels: Vec<Vec<usize>> = d.outputs.iter().map(argmax_columns).collect();
        let balanced = labels.iter().all(|l| {
            let mut counts = vec![0usize; classes];
            l.iter().for_each(|&c| counts[c] += 1);
            counts.iter().all(|&c| c >= min_count)
        });
        if !balanced {
            continue;
        }
        let mut train = Vec::with_capacity(params.tasks);
        let mut eval = Vec::with_capacity(params.tasks);
        for l in labels {
            let (tr, ev) = split(params, &d.x, Targets::Classes(l))?;
            train.push(tr);
            eval.push(ev);
        }
        return Ok(SyntheticTaskSet {
            kinds: vec![TaskKind::Classification { classes }; params.tasks],
            teachers: d.teachers,
            conflict_level: params.conflict_level,
            noise_sigma: params.noise_sigma,
            train,
            eval,
            seed_used,
        });
    }
    Err(Error::param(format!(
        "no balanced label set found in {MAX_SEED_BUMPS} seeds starting at {seed}"
    )))
}

fn argmax_columns(m: &Matrix) -> Vec<usize> {
    (0..m.cols())
        .map(|j| {
            (0..m.rows())
                .fold((0, f64::NEG_INFINITY), |(bi, bv), i| {
                    let v = m.get(i, j);
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
