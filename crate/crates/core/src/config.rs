//! Declarative experiment description, read from JSON.
//!
//! Unknown keys are rejected at every level and every field is validated
//! before any compute starts. A minimal file looks like:
//!
//! ```json
//! {
//!   "version": 1,
//!   "seed": 7,
//!   "model": { "hidden_dims": [16], "rank": 4, "alpha": 8.0 },
//!   "schedule": { "epochs": 10, "batch_size": 32 },
//!   "tasks": { "kind": "regression", "count": 3, "outputs": 2, "in_dim": 32,
//!              "conflict_level": 0.8, "n_train": 800, "n_eval": 200 }
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dense::Rng;
use crate::error::{Error, Result};
use crate::model::{ModelShape, MultiTaskModel};
use crate::optim::AdamWConfig;
use crate::surgery::{ProjectAgainst, ProjectionScope};
use crate::synth::{make_classification_conflict, make_regression_conflict, ConflictParams, SyntheticTaskSet};
use crate::trainer::TrainMode;

pub const CONFIG_VERSION: u32 = 1;

/// Random substreams derived from the experiment seed.
pub(crate) mod streams {
    pub const MODEL: u64 = 1;
    pub const SAMPLER: u64 = 2;
    pub const SURGERY: u64 = 3;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default = "TrainMode::all_vec")]
    pub modes: Vec<TrainMode>,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub tasks: TaskConfig,
    #[serde(default)]
    pub surgery: SurgeryConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Widths of the adapted backbone layers; the input width comes from
    /// `tasks.in_dim`.
    pub hidden_dims: Vec<usize>,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "default_sigma_init")]
    pub sigma_init: f64,
    /// Heads start as N(0, head_sigma²); defaults to `1/√feature_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_sigma: Option<f64>,
    #[serde(default = "default_true")]
    pub shared_head_init: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to one pass over the largest training pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskFamily,
    pub count: usize,
    /// Classes per task (classification only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// Output width per task (regression only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<usize>,
    pub in_dim: usize,
    pub conflict_level: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_one")]
    pub shared_scale: f64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Loss weights `w_t`; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurgeryConfig {
    /// Granularity used by `ortho_structured`: `per_matrix` or `per_role_concat`.
    pub structured_scope: ProjectionScope,
    pub project_against: ProjectAgainst,
    /// Also compute per-task gradients under `joint` to log conflicts.
    pub joint_diagnostics: bool,
}

impl Default for SurgeryConfig {
    fn default() -> Self {
        Self {
            structured_scope: ProjectionScope::PerMatrix,
            project_against: ProjectAgainst::Original,
            joint_diagnostics: true,
        }
    }
}

fn default_sigma_init() -> f64 {
    crate::lora::DEFAULT_SIGMA
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

impl ExperimentConfig {
    /// The conflict-heavy reference setup: three conflicting regression
    /// tasks at conflict level 0.8 and rank 4. The 32-wide input passes
    /// through a 16-wide frozen layer, so the adapter has to compete for
    /// the directions the backbone squeezes out.
    pub fn conflict_heavy() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            modes: TrainMode::all_vec(),
            model: ModelConfig {
                hidden_dims: vec![16],
                rank: 4,
                alpha: 8.0,
                sigma_init: default_sigma_init(),
                head_sigma: None,
                shared_head_init: true,
            },
            optimizer: AdamWConfig {
                lr: 5e-3,
                ..AdamWConfig::default()
            },
            schedule: ScheduleConfig {
                epochs: 10,
                batch_size: 32,
                steps_per_epoch: None,
            },
            tasks: TaskConfig {
                kind: TaskFamily::Regression,
                count: 3,
                classes: None,
                outputs: Some(2),
                in_dim: 32,
                conflict_level: 0.8,
                noise_sigma: 0.0,
                shared_scale: 1.0,
                n_train: 800,
                n_eval: 200,
                weights: None,
            },
            surgery: SurgeryConfig::default(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("<json>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        if self.modes.is_empty() {
            return Err(Error::config("modes", "must list at least one mode"));
        }
        for (i, m) in self.modes.iter().enumerate() {
            if self.modes[..i].contains(m) {
                return Err(Error::config("modes", format!("`{}` listed twice", m.label())));
            }
        }

        let m = &self.model;
        if m.hidden_dims.is_empty() {
            return Err(Error::config("model.hidden_dims", "needs at least one layer"));
        }
        if m.hidden_dims.contains(&0) {
            return Err(Error::config("model.hidden_dims", "widths must be positive"));
        }
        let dims = self.layer_dims();
        let max_rank = dims.iter().copied().min().unwrap_or(0);
        if m.rank == 0 || m.rank > max_rank {
            return Err(Error::config(
                "model.rank",
                format!("{} outside 1..={max_rank} for layer dims {dims:?}", m.rank),
            ));
        }
        positive("model.alpha", m.alpha)?;
        positive("model.sigma_init", m.sigma_init)?;
        if let Some(s) = m.head_sigma {
            positive("model.head_sigma", s)?;
        }

        self.optimizer.validate()?;

        let s = &self.schedule;
        if s.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be positive"));
        }
        if s.steps_per_epoch == Some(0) {
            return Err(Error::config("schedule.steps_per_epoch", "must be positive"));
        }

        let t = &self.tasks;
        if t.count == 0 {
            return Err(Error::config("tasks.count", "must be positive"));
        }
        if t.in_dim == 0 {
            return Err(Error::config("tasks.in_dim", "must be positive"));
        }
        match t.kind {
            TaskFamily::Classification => {
                match t.classes {
                    Some(c) if c >= 2 => {}
                    Some(c) => return Err(Error::config("tasks.classes", format!("needs at least 2, got {c}"))),
                    None => return Err(Error::config("tasks.classes", "required for classification")),
                }
                if t.outputs.is_some() {
                    return Err(Error::config("tasks.outputs", "only valid for regression"));
                }
            }
            TaskFamily::Regression => {
                match t.outputs {
                    Some(o) if o >= 1 => {}
                    _ => return Err(Error::config("tasks.outputs", "required and positive for regression")),
                }
                if t.classes.is_some() {
                    return Err(Error::config("tasks.classes", "only valid for classification"));
                }
            }
        }
        if !(0.0..=1.0).contains(&t.conflict_level) {
            return Err(Error::config("tasks.conflict_level", "must be in [0, 1]"));
        }
        if t.conflict_level > 0.0 && t.count < 2 {
            return Err(Error::config("tasks.conflict_level", "needs at least 2 tasks when > 0"));
        }
        non_negative("tasks.noise_sigma", t.noise_sigma)?;
        non_negative("tasks.shared_scale", t.shared_scale)?;
        if t.n_train == 0 {
            return Err(Error::config("tasks.n_train", "must be positive"));
        }
        if t.n_eval == 0 {
            return Err(Error::config("tasks.n_eval", "must be positive"));
        }
        if let Some(w) = &t.weights {
            if w.len() != t.count {
                return Err(Error::config("tasks.weights", format!("{} weights for {} tasks", w.len(), t.count)));
            }
            for &x in w {
                non_negative("tasks.weights", x)?;
            }
        }
        if self.surgery.structured_scope == ProjectionScope::Flat {
            return Err(Error::config(
                "surgery.structured_scope",
                "must be per_matrix or per_role_concat (flat is its own mode)",
            ));
        }
        Ok(())
    }

    /// `[in_dim, hidden…]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.tasks.in_dim)
            .chain(self.model.hidden_dims.iter().copied())
            .collect()
    }

    pub fn model_shape(&self) -> ModelShape {
        let feat = *self.model.hidden_dims.last().unwrap();
        ModelShape {
            layer_dims: self.layer_dims(),
            rank: self.model.rank,
            alpha: self.model.alpha,
            sigma_init: self.model.sigma_init,
            head_sigma: self.model.head_sigma.unwrap_or(1.0 / (feat as f64).sqrt()),
            shared_head_init: self.model.shared_head_init,
        }
    }

    pub fn conflict_params(&self) -> ConflictParams {
        let t = &self.tasks;
        ConflictParams {
            in_dim: t.in_dim,
            tasks: t.count,
            conflict_level: t.conflict_level,
            noise_sigma: t.noise_sigma,
            shared_scale: t.shared_scale,
            n_train: t.n_train,
            n_eval: t.n_eval,
        }
    }

    pub fn task_set(&self) -> Result<SyntheticTaskSet> {
        let p = self.conflict_params();
        match self.tasks.kind {
            TaskFamily::Classification => make_classification_conflict(&p, self.tasks.classes.unwrap(), self.seed),
            TaskFamily::Regression => make_regression_conflict(&p, self.tasks.outputs.unwrap(), self.seed),
        }
    }

    pub fn initial_model(&self, set: &SyntheticTaskSet) -> Result<MultiTaskModel> {
        let mut rng = Rng::with_stream(self.seed, streams::MODEL);
        MultiTaskModel::build(&self.model_shape(), &set.kinds, &mut rng)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.schedule
            .steps_per_epoch
            .unwrap_or_else(|| self.tasks.n_train.div_ceil(self.schedule.batch_size))
    }

    /// Output root: the config's `output_dir`, else `$ORTHO_LORA_OUT`, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os("ORTHO_LORA_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be finite and > 0, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be finite and >= 0, got {v}")))
    }
}
