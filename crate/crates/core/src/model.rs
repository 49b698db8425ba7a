//! A small multi-task network: frozen linear backbone layers with LoRA
//! adapters, `tanh` after every backbone layer, and one linear head per
//! task. Gradients are computed by hand-written reverse mode; a
//! central-difference oracle ([`fd_gradient`]) checks them.

use std::collections::BTreeMap;
use std::fmt;

use crate::dense::{Matrix, Rng};
use crate::error::{Error, Result};
use crate::lora::{FrozenLayer, LoraAdapter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression { outputs: usize },
}

impl TaskKind {
    pub fn out_dim(&self) -> usize {
        match *self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression { outputs } => outputs,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One class index per example.
    Classes(Vec<usize>),
    /// `outputs × n`, one column per example.
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(m) => m.cols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Result<Targets> {
        Ok(match self {
            Targets::Classes(c) => {
                Targets::Classes(indices.iter().map(|&i| c[i]).collect())
            }
            Targets::Values(m) => Targets::Values(m.select_columns(indices)?),
        })
    }
}

/// Examples for one task; `x` is `in_dim × n` with one example per column.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub task: usize,
    pub x: Matrix,
    pub y: Targets,
}

impl TaskBatch {
    pub fn new(task: usize, x: Matrix, y: Targets) -> Result<Self> {
        if y.len() != x.cols() {
            return Err(Error::param(format!(
                "batch for task {task} has {} inputs but {} targets",
                x.cols(),
                y.len()
            )));
        }
        Ok(Self { task, x, y })
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AdapterMatrix {
    A,
    B,
}

/// Names one trainable matrix. Adapter blocks order before heads, so a
/// `BTreeMap<BlockId, _>` iterates layer by layer, then heads by task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockId {
    Adapter { layer: usize, matrix: AdapterMatrix },
    Head(usize),
}

impl BlockId {
    pub fn a(layer: usize) -> Self {
        BlockId::Adapter {
            layer,
            matrix: AdapterMatrix::A,
        }
    }

    pub fn b(layer: usize) -> Self {
        BlockId::Adapter {
            layer,
            matrix: AdapterMatrix::B,
        }
    }

    pub fn head(task: usize) -> Self {
        BlockId::Head(task)
    }

    pub fn is_adapter(&self) -> bool {
        matches!(self, BlockId::Adapter { .. })
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Adapter { layer, matrix } => write!(f, "L{layer}.{matrix:?}"),
            BlockId::Head(t) => write!(f, "HEAD{t}"),
        }
    }
}

/// Gradient of one task's loss, keyed by block.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGradient {
    pub task: usize,
    pub blocks: BTreeMap<BlockId, Matrix>,
}

impl TaskGradient {
    pub fn get(&self, id: BlockId) -> Option<&Matrix> {
        self.blocks.get(&id)
    }

    pub fn adapter_blocks(&self) -> impl Iterator<Item = (BlockId, &Matrix)> {
        self.blocks.iter().filter(|(id, _)| id.is_adapter()).map(|(id, m)| (*id, m))
    }

    pub fn adapter_len(&self) -> usize {
        self.adapter_blocks().map(|(_, m)| m.len()).sum()
    }

    /// Concatenated adapter entries in block order.
    pub fn flat_adapter(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.adapter_len());
        for (_, m) in self.adapter_blocks() {
            out.extend_from_slice(m.data());
        }
        out
    }
}

/// A blockwise parameter update (sum of task gradients).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Update {
    pub blocks: BTreeMap<BlockId, Matrix>,
}

impl Update {
    pub fn get(&self, id: BlockId) -> Option<&Matrix> {
        self.blocks.get(&id)
    }

    /// Largest entrywise difference, over blocks present in both.
    /// Differing key sets count as infinitely far apart.
    pub fn max_abs_diff(&self, other: &Update) -> f64 {
        if self.blocks.len() != other.blocks.len() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for (id, m) in &self.blocks {
            match other.blocks.get(id) {
                Some(o) if o.shape() == m.shape() => worst = worst.max(m.sub(o).unwrap().max_abs()),
                _ => return f64::INFINITY,
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.values().fold(0.0, |w, m| w.max(m.max_abs()))
    }
}

/// How to build a fresh model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    /// `[in, h1, …, hL]`; each consecutive pair is one adapted layer.
    pub layer_dims: Vec<usize>,
    pub rank: usize,
    pub alpha: f64,
    pub sigma_init: f64,
    pub head_sigma: f64,
    /// When set, every head starts from the same random matrix.
    pub shared_head_init: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskModel {
    layers: Vec<FrozenLayer>,
    heads: Vec<Matrix>,
    tasks: Vec<TaskKind>,
}

/// Activations saved by the forward pass.
struct Trace {
    /// Input to each layer (`inputs[0]` is the batch).
    inputs: Vec<Matrix>,
    /// `A·input` per layer.
    latents: Vec<Matrix>,
    /// `tanh` output per layer; the last one feeds the heads.
    outputs: Vec<Matrix>,
}

impl Trace {
    fn features(&self) -> &Matrix {
        self.outputs.last().expect("at least one layer")
    }
}

impl MultiTaskModel {
    /// Random frozen backbone (`W₀ ~ N(0, 1/k)`), fresh adapters, random heads.
    pub fn build(shape: &ModelShape, tasks: &[TaskKind], rng: &mut Rng) -> Result<Self> {
        if shape.layer_dims.len() < 2 {
            return Err(Error::param("layer_dims needs at least an input and one layer width"));
        }
        if tasks.is_empty() {
            return Err(Error::param("model needs at least one task"));
        }
        let mut layers = Vec::with_capacity(shape.layer_dims.len() - 1);
        for pair in shape.layer_dims.windows(2) {
            let (k, d) = (pair[0], pair[1]);
            if k == 0 || d == 0 {
                return Err(Error::param("layer widths must be positive"));
            }
            let w0 = Matrix::gaussian(d, k, 1.0 / (k as f64).sqrt(), rng)?;
            let adapter = LoraAdapter::init(d, k, shape.rank, shape.sigma_init, shape.alpha, rng)?;
            layers.push(FrozenLayer::new(w0, adapter)?);
        }
        let feat = *shape.layer_dims.last().unwrap();
        let mut heads = Vec::with_capacity(tasks.len());
        for (t, kind) in tasks.iter().enumerate() {
            let head = match (shape.shared_head_init, heads.first()) {
                (true, Some(first)) if tasks[0].out_dim() == kind.out_dim() => Matrix::clone(first),
                _ => Matrix::gaussian(kind.out_dim(), feat, shape.head_sigma, rng)?,
            };
            debug_assert_eq!(head.rows(), tasks[t].out_dim());
            heads.push(head);
        }
        Self::from_parts(layers, heads, tasks.to_vec())
    }

    pub fn from_parts(layers: Vec<FrozenLayer>, heads: Vec<Matrix>, tasks: Vec<TaskKind>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("model needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::param(format!(
                    "layer {l} outputs {} features but layer {} expects {}",
                    pair[0].out_dim(),
                    l + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if heads.len() != tasks.len() {
            return Err(Error::param(format!("{} heads for {} tasks", heads.len(), tasks.len())));
        }
        let feat = layers.last().unwrap().out_dim();
        for (t, (h, kind)) in heads.iter().zip(&tasks).enumerate() {
            if h.shape() != (kind.out_dim(), feat) {
                return Err(Error::param(format!(
                    "head {t} is {:?}, expected {:?}",
                    h.shape(),
                    (kind.out_dim(), feat)
                )));
            }
            if let TaskKind::Classification { classes } = kind {
                if *classes < 2 {
                    return Err(Error::param(format!("task {t} needs at least 2 classes")));
                }
            }
        }
        Ok(Self { layers, heads, tasks })
    }

    pub fn layers(&self) -> &[FrozenLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FrozenLayer] {
        &mut self.layers
    }

    pub fn heads(&self) -> &[Matrix] {
        &self.heads
    }

    pub fn tasks(&self) -> &[TaskKind] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Every adapter block, layer by layer, A before B.
    pub fn adapter_block_ids(&self) -> Vec<BlockId> {
        (0..self.layers.len())
            .flat_map(|l| [BlockId::a(l), BlockId::b(l)])
            .collect()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.adapter().num_params()).sum()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w0().len()).sum()
    }

    pub fn param(&self, id: BlockId) -> Option<&Matrix> {
        match id {
            BlockId::Adapter { layer, matrix } => self.layers.get(layer).map(|l| match matrix {
                AdapterMatrix::A => l.adapter().a(),
                AdapterMatrix::B => l.adapter().b(),
            }),
            BlockId::Head(t) => self.heads.get(t),
        }
    }

    /// Mutable access to a trainable block. There is no block id for `W₀`.
    pub fn param_mut(&mut self, id: BlockId) -> Option<&mut Matrix> {
        match id {
            BlockId::Adapter { layer, matrix } => self.layers.get_mut(layer).map(|l| match matrix {
                AdapterMatrix::A => l.adapter_mut().a_mut(),
                AdapterMatrix::B => l.adapter_mut().b_mut(),
            }),
            BlockId::Head(t) => self.heads.get_mut(t),
        }
    }

    fn trace(&self, x: &Matrix) -> Result<Trace> {
        if x.rows() != self.in_dim() {
            return Err(Error::Shape {
                op: "model input",
                left: x.shape(),
                right: (self.in_dim(), x.cols()),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut latents = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { x.clone() } else { outputs[l - 1].clone() };
            let (pre, latent) = layer.forward_with_latent(&input)?;
            if !pre.is_finite() {
                return Err(Error::Numeric(format!("layer {l} pre-activation")));
            }
            inputs.push(input);
            latents.push(latent);
            outputs.push(pre.map(f64::tanh));
        }
        Ok(Trace {
            inputs,
            latents,
            outputs,
        })
    }

    /// Backbone features (`feature_dim × n`).
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.trace(x)?.outputs.pop().unwrap())
    }

    /// Head outputs for `task` (logits or regression predictions).
    pub fn predict(&self, task: usize, x: &Matrix) -> Result<Matrix> {
        let head = self.head(task)?;
        let out = head.matmul(&self.features(x)?)?;
        if !out.is_finite() {
            return Err(Error::Numeric(format!("head {task} output")));
        }
        Ok(out)
    }

    fn head(&self, task: usize) -> Result<&Matrix> {
        self.heads
            .get(task)
            .ok_or_else(|| Error::param(format!("task {task} outside 0..{}", self.heads.len())))
    }

    fn check_batch(&self, batch: &TaskBatch) -> Result<()> {
        let kind = self
            .tasks
            .get(batch.task)
            .ok_or_else(|| Error::param(format!("task {} outside 0..{}", batch.task, self.tasks.len())))?;
        if batch.is_empty() {
            return Err(Error::param(format!("empty batch for task {}", batch.task)));
        }
        match (kind, &batch.y) {
            (TaskKind::Classification { classes }, Targets::Classes(c)) => {
                if let Some(&bad) = c.iter().find(|&&y| y >= *classes) {
                    return Err(Error::param(format!(
                        "task {} label {bad} outside 0..{classes}",
                        batch.task
                    )));
                }
            }
            (TaskKind::Regression { outputs }, Targets::Values(v)) => {
                if v.rows() != *outputs {
                    return Err(Error::param(format!(
                        "task {} targets have {} rows, head has {outputs}",
                        batch.task,
                        v.rows()
                    )));
                }
            }
            _ => {
                return Err(Error::param(format!(
                    "task {} target kind does not match its head",
                    batch.task
                )))
            }
        }
        Ok(())
    }

    /// Mean per-example loss of one task.
    pub fn task_loss(&self, batch: &TaskBatch) -> Result<f64> {
        self.check_batch(batch)?;
        let out = self.predict(batch.task, &batch.x)?;
        Ok(loss_and_grad(&out, &batch.y, false).0)
    }

    /// `Σ_t w_t·ℒ_t`; `weights = None` means uniform weights of 1.
    pub fn joint_loss(&self, batches: &[TaskBatch], weights: Option<&[f64]>) -> Result<f64> {
        let weights = self.resolve_weights(batches, weights)?;
        let mut total = 0.0;
        for batch in batches {
            total += weights[batch.task] * self.task_loss(batch)?;
        }
        Ok(total)
    }

    fn resolve_weights(&self, batches: &[TaskBatch], weights: Option<&[f64]>) -> Result<Vec<f64>> {
        let t = self.num_tasks();
        let mut seen = vec![false; t];
        for b in batches {
            if b.task >= t {
                return Err(Error::param(format!("task {} outside 0..{t}", b.task)));
            }
            if std::mem::replace(&mut seen[b.task], true) {
                return Err(Error::param(format!("two batches for task {}", b.task)));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::param(format!("missing batch for task {missing}")));
        }
        match weights {
            None => Ok(vec![1.0; t]),
            Some(w) if w.len() == t => Ok(w.to_vec()),
            Some(w) => Err(Error::param(format!("{} weights for {t} tasks", w.len()))),
        }
    }

    /// Analytic gradient of `task_loss(batch)` w.r.t. every adapter block
    /// and the batch's own head.
    pub fn task_gradient(&self, batch: &TaskBatch) -> Result<TaskGradient> {
        self.check_batch(batch)?;
        let trace = self.trace(&batch.x)?;
        let head = self.head(batch.task)?;
        let out = head.matmul(trace.features())?;
        if !out.is_finite() {
            return Err(Error::Numeric(format!("head {} output", batch.task)));
        }
        let (_, d_out) = loss_and_grad(&out, &batch.y, true);
        let d_out = d_out.unwrap();
        let mut blocks = BTreeMap::new();
        blocks.insert(BlockId::head(batch.task), d_out.matmul_t(trace.features())?);
        let d_features = head.t_matmul(&d_out)?;
        self.backward_backbone(&trace, d_features, &mut blocks)?;
        Ok(TaskGradient {
            task: batch.task,
            blocks,
        })
    }

    /// Gradient of the weighted joint loss from a single backward pass:
    /// all task batches go through the backbone as one concatenated batch.
    /// Returns the per-task losses and the gradient of their weighted sum.
    pub fn joint_gradient(&self, batches: &[TaskBatch], weights: Option<&[f64]>) -> Result<(Vec<f64>, Update)> {
        let weights = self.resolve_weights(batches, weights)?;
        for b in batches {
            self.check_batch(b)?;
        }
        let xs: Vec<&Matrix> = batches.iter().map(|b| &b.x).collect();
        let x = Matrix::hcat(&xs)?;
        let trace = self.trace(&x)?;
        let features = trace.features();

        let mut losses = vec![0.0; self.num_tasks()];
        let mut blocks = BTreeMap::new();
        let mut d_parts = Vec::with_capacity(batches.len());
        let mut offset = 0;
        for batch in batches {
            let n = batch.len();
            let feat = features.columns(offset, n)?;
            offset += n;
            let head = &self.heads[batch.task];
            let out = head.matmul(&feat)?;
            if !out.is_finite() {
                return Err(Error::Numeric(format!("head {} output", batch.task)));
            }
            let (loss, d_out) = loss_and_grad(&out, &batch.y, true);
            let d_out = d_out.unwrap().scale(weights[batch.task]);
            losses[batch.task] = loss;
            blocks.insert(BlockId::head(batch.task), d_out.matmul_t(&feat)?);
            d_parts.push(head.t_matmul(&d_out)?);
        }
        let refs: Vec<&Matrix> = d_parts.iter().collect();
        let d_features = Matrix::hcat(&refs)?;
        self.backward_backbone(&trace, d_features, &mut blocks)?;
        Ok((losses, Update { blocks }))
    }

    fn backward_backbone(
        &self,
        trace: &Trace,
        mut d_h: Matrix,
        blocks: &mut BTreeMap<BlockId, Matrix>,
    ) -> Result<()> {
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let adapter = layer.adapter();
            let scale = adapter.scale();
            // through tanh
            let act = &trace.outputs[l];
            let mut d_pre = d_h;
            for (g, &y) in d_pre.data_mut().iter_mut().zip(act.data()) {
                *g *= 1.0 - y * y;
            }
            let input = &trace.inputs[l];
            let latent = &trace.latents[l];
            let grad_b = d_pre.matmul_t(latent)?.scale(scale);
            let d_latent = adapter.b().t_matmul(&d_pre)?.scale(scale);
            let grad_a = d_latent.matmul_t(input)?;
            if !grad_a.is_finite() || !grad_b.is_finite() {
                return Err(Error::Numeric(format!("layer {l} gradient")));
            }
            blocks.insert(BlockId::a(l), grad_a);
            blocks.insert(BlockId::b(l), grad_b);
            if l > 0 {
                let mut d_in = layer.w0().t_matmul(&d_pre)?;
                d_in.axpy(1.0, &adapter.a().t_matmul(&d_latent)?)?;
                d_h = d_in;
            } else {
                break;
            }
        }
        Ok(())
    }
}

/// Mean loss over the batch and, optionally, its gradient w.r.t. `out`.
fn loss_and_grad(out: &Matrix, y: &Targets, want_grad: bool) -> (f64, Option<Matrix>) {
    let n = out.cols();
    let inv_n = 1.0 / n as f64;
    match y {
        Targets::Classes(labels) => {
            let classes = out.rows();
            let mut total = 0.0;
            let mut grad = want_grad.then(|| Matrix::zeros(classes, n));
            for (j, &label) in labels.iter().enumerate() {
                let max = (0..classes).map(|c| out.get(c, j)).fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = (0..classes).map(|c| (out.get(c, j) - max).exp()).sum();
                let lse = max + sum_exp.ln();
                total += lse - out.get(label, j);
                if let Some(g) = grad.as_mut() {
                    for c in 0..classes {
                        let p = (out.get(c, j) - lse).exp();
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        g.set(c, j, (p - onehot) * inv_n);
                    }
                }
            }
            (total * inv_n, grad)
        }
        Targets::Values(target) => {
            let diff = out.sub(target).expect("targets checked against head");
            let loss = 0.5 * diff.flat_dot(&diff).unwrap() * inv_n;
            (loss, want_grad.then(|| diff.scale(inv_n)))
        }
    }
}

/// Free-function form of [`MultiTaskModel::task_loss`].
pub fn task_loss(model: &MultiTaskModel, batch: &TaskBatch) -> Result<f64> {
    model.task_loss(batch)
}

/// Free-function form of [`MultiTaskModel::joint_loss`].
pub fn joint_loss(model: &MultiTaskModel, batches: &[TaskBatch], weights: Option<&[f64]>) -> Result<f64> {
    model.joint_loss(batches, weights)
}

/// Free-function form of [`MultiTaskModel::task_gradient`].
pub fn task_gradient(model: &MultiTaskModel, batch: &TaskBatch) -> Result<TaskGradient> {
    model.task_gradient(batch)
}

/// Central-difference gradient of `task_loss(batch)` w.r.t. one block.
pub fn fd_gradient(model: &MultiTaskModel, batch: &TaskBatch, block: BlockId, h: f64) -> Result<Matrix> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::param(format!("finite-difference step must be positive, got {h}")));
    }
    let base = model
        .param(block)
        .ok_or_else(|| Error::param(format!("model has no block {block}")))?;
    let mut out = Matrix::zeros(base.rows(), base.cols());
    let mut probe = model.clone();
    for idx in 0..base.len() {
        let orig = base.data()[idx];
        probe.param_mut(block).unwrap().data_mut()[idx] = orig + h;
        let plus = probe.task_loss(batch)?;
        probe.param_mut(block).unwrap().data_mut()[idx] = orig - h;
        let minus = probe.task_loss(batch)?;
        probe.param_mut(block).unwrap().data_mut()[idx] = orig;
        out.data_mut()[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}
