//! Metrics persistence and summary statistics.
//!
//! Two CSV schemas hold everything a run produces:
//!
//! * step files, `step,task,loss,lr,scope,pair_i,pair_j,block,dot,cosine,conflicted`,
//!   one loss row per task per step followed by that step's conflict rows;
//! * eval files, `epoch,mode,task,metric`, one row per task per evaluation
//!   plus an `avg` row per mode and epoch.
//!
//! Floats are written with 17 significant digits so reading a file back
//! reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::surgery::{ConflictRecord, ProjectionScope};
use crate::trainer::{run_experiment, ConflictRow, MetricsLog, StepRecord, TrainMode};

pub const STEPS_HEADER: [&str; 11] = [
    "step", "task", "loss", "lr", "scope", "pair_i", "pair_j", "block", "dot", "cosine", "conflicted",
];
pub const EVALS_HEADER: [&str; 4] = ["epoch", "mode", "task", "metric"];
pub const SUMMARY_HEADER: [&str; 6] = ["task", "single_task", "joint", "ortho_flat", "ortho_structured", "recovery"];
pub const RANK_HEADER: [&str; 4] = ["rank", "joint", "ortho", "delta"];

pub const EVALS_FILE: &str = "evals.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RANK_FILE: &str = "rank_sweep.csv";
const AVG: &str = "avg";

/// Serializes a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, what: &'static str) -> Result<f64> {
    s.parse().map_err(|_| Error::Format {
        what,
        msg: format!("bad number `{s}`"),
    })
}

fn parse_usize(s: &str, what: &'static str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format {
        what,
        msg: format!("bad integer `{s}`"),
    })
}

/// Share of the single-task vs joint gap that ortho closes, in percent.
///
/// The sign convention cancels, so the same formula serves metrics where
/// lower is better.
pub fn recovery(single: f64, joint: f64, ortho: f64) -> Result<f64> {
    if single == joint {
        return Err(Error::UndefinedRecovery(single));
    }
    Ok(100.0 * (ortho - joint) / (single - joint))
}

/// Fraction of logged (step, pair, block) records with a negative dot.
pub fn conflict_frequency(log: &MetricsLog) -> Result<f64> {
    conflict_frequency_of(log.conflicts.iter().map(|r| &r.record))
}

fn conflict_frequency_of<'a>(records: impl Iterator<Item = &'a ConflictRecord>) -> Result<f64> {
    let (mut total, mut negative) = (0usize, 0usize);
    for r in records {
        total += 1;
        if r.dot < 0.0 {
            negative += 1;
        }
    }
    if total == 0 {
        return Err(Error::param("no conflict records to count"));
    }
    Ok(negative as f64 / total as f64)
}

/// Task column of an eval row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EvalTask {
    Index(usize),
    Avg,
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalTask::Index(t) => write!(f, "{t}"),
            EvalTask::Avg => f.write_str(AVG),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub epoch: usize,
    pub mode: TrainMode,
    pub task: EvalTask,
    pub metric: f64,
}

/// Eval rows for one log, including an `avg` row after each epoch.
pub fn eval_rows(log: &MetricsLog) -> Vec<EvalRow> {
    let mut by_epoch: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for e in &log.evals {
        by_epoch.entry(e.epoch).or_default().push(e.metric);
    }
    let mut rows = Vec::with_capacity(log.evals.len() + by_epoch.len());
    for (epoch, metrics) in by_epoch {
        for (t, &metric) in metrics.iter().enumerate() {
            rows.push(EvalRow {
                epoch,
                mode: log.mode,
                task: EvalTask::Index(t),
                metric,
            });
        }
        rows.push(EvalRow {
            epoch,
            mode: log.mode,
            task: EvalTask::Avg,
            metric: mean(&metrics),
        });
    }
    rows
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn write_evals_csv<W: Write>(logs: &[MetricsLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVALS_HEADER)?;
    for log in logs {
        for row in eval_rows(log) {
            w.write_record([
                row.epoch.to_string(),
                row.mode.label().to_string(),
                row.task.to_string(),
                fmt_f64(row.metric),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<evals>", e))?;
    Ok(())
}

pub fn read_evals_csv<R: Read>(input: R) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_reader(input);
    check_header(r.headers()?, &EVALS_HEADER, "eval csv")?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let what = "eval csv";
        let mode = TrainMode::parse(&rec[1]).ok_or_else(|| Error::Format {
            what,
            msg: format!("unknown mode `{}`", &rec[1]),
        })?;
        let task = match &rec[2] {
            AVG => EvalTask::Avg,
            t => EvalTask::Index(parse_usize(t, what)?),
        };
        rows.push(EvalRow {
            epoch: parse_usize(&rec[0], what)?,
            mode,
            task,
            metric: parse_f64(&rec[3], what)?,
        });
    }
    Ok(rows)
}

fn check_header(found: &csv::StringRecord, expected: &[&str], what: &'static str) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(Error::Format {
            what,
            msg: format!("header {:?}, expected {:?}", found.iter().collect::<Vec<_>>(), expected),
        });
    }
    Ok(())
}

/// Writes loss rows and conflict rows interleaved by step.
pub fn write_steps_csv<W: Write>(log: &MetricsLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STEPS_HEADER)?;
    let mut conflicts = log.conflicts.iter().peekable();
    let mut losses = log.steps.iter().peekable();
    while let Some(step) = [losses.peek().map(|r| r.step), conflicts.peek().map(|c| c.step)]
        .into_iter()
        .flatten()
        .min()
    {
        while let Some(r) = losses.next_if(|r| r.step == step) {
            let fields = [
                r.step.to_string(),
                r.task.to_string(),
                fmt_f64(r.loss),
                fmt_f64(r.lr),
            ];
            w.write_record(fields.iter().map(String::as_str).chain([""; 7]))?;
        }
        while let Some(c) = conflicts.next_if(|c| c.step == step) {
            let rec = &c.record;
            w.write_record([
                c.step.to_string(),
                String::new(),
                String::new(),
                fmt_f64(c.lr),
                c.scope.label().to_string(),
                rec.pair_i.to_string(),
                rec.pair_j.to_string(),
                rec.block.clone(),
                fmt_f64(rec.dot),
                if rec.degenerate { String::new() } else { fmt_f64(rec.cosine) },
                rec.conflicted.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<steps>", e))?;
    Ok(())
}

/// Loss and conflict rows read back from a step file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepRows {
    pub losses: Vec<StepRecord>,
    pub conflicts: Vec<ConflictRow>,
}

impl StepRows {
    pub fn conflict_frequency(&self) -> Result<f64> {
        conflict_frequency_of(self.conflicts.iter().map(|r| &r.record))
    }
}

pub fn read_steps_csv<R: Read>(input: R) -> Result<StepRows> {
    let what = "step csv";
    let mut r = csv::Reader::from_reader(input);
    check_header(r.headers()?, &STEPS_HEADER, what)?;
    let mut rows = StepRows::default();
    for rec in r.records() {
        let rec = rec?;
        let step = parse_usize(&rec[0], what)?;
        let lr = parse_f64(&rec[3], what)?;
        if !rec[1].is_empty() {
            rows.losses.push(StepRecord {
                step,
                task: parse_usize(&rec[1], what)?,
                loss: parse_f64(&rec[2], what)?,
                lr,
            });
            continue;
        }
        let scope = ProjectionScope::parse(&rec[4]).ok_or_else(|| Error::Format {
            what,
            msg: format!("unknown scope `{}`", &rec[4]),
        })?;
        let degenerate = rec[9].is_empty();
        let conflicted = match &rec[10] {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Format {
                    what,
                    msg: format!("bad flag `{other}`"),
                })
            }
        };
        rows.conflicts.push(ConflictRow {
            step,
            lr,
            scope,
            record: ConflictRecord {
                pair_i: parse_usize(&rec[5], what)?,
                pair_j: parse_usize(&rec[6], what)?,
                block: rec[7].to_string(),
                dot: parse_f64(&rec[8], what)?,
                cosine: if degenerate { 0.0 } else { parse_f64(&rec[9], what)? },
                degenerate,
                conflicted,
            },
        });
    }
    Ok(rows)
}

pub fn steps_file_name(mode: TrainMode) -> String {
    format!("steps_{}.csv", mode.label())
}

/// Final per-task metrics of one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSummary {
    pub mode: TrainMode,
    pub per_task: Vec<f64>,
    pub average: f64,
}

/// One row of a rank sweep, each value averaged over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankRow {
    pub rank: usize,
    pub joint: f64,
    pub ortho: f64,
    /// `ortho - joint` in raw metric units.
    pub delta: f64,
}

impl RankRow {
    /// Delta signed so positive always means ortho did better.
    pub fn gain(&self, higher_is_better: bool) -> f64 {
        if higher_is_better {
            self.delta
        } else {
            -self.delta
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SummaryTable {
    pub modes: Vec<ModeSummary>,
    /// Per-task recovery; `None` where single and joint coincide.
    pub recovery_per_task: Vec<Option<f64>>,
    pub recovery_avg: Option<f64>,
    pub rank_rows: Vec<RankRow>,
}

impl SummaryTable {
    /// Builds the table from final-epoch metrics of each mode.
    pub fn from_finals(modes: Vec<ModeSummary>) -> Self {
        let mut table = SummaryTable {
            modes,
            ..Default::default()
        };
        let single = table.mode(TrainMode::SingleTask).cloned();
        let joint = table.mode(TrainMode::Joint).cloned();
        let ortho = table.ortho().cloned();
        if let (Some(s), Some(j), Some(o)) = (single, joint, ortho) {
            let tasks = s.per_task.len().min(j.per_task.len()).min(o.per_task.len());
            table.recovery_per_task = (0..tasks)
                .map(|t| recovery(s.per_task[t], j.per_task[t], o.per_task[t]).ok())
                .collect();
            table.recovery_avg = recovery(s.average, j.average, o.average).ok();
        }
        table
    }

    pub fn from_logs(logs: &[MetricsLog]) -> Self {
        let rows: Vec<EvalRow> = logs.iter().flat_map(eval_rows).collect();
        Self::from_eval_rows(&rows)
    }

    /// Uses the last epoch of each mode; `avg` rows win over recomputing.
    pub fn from_eval_rows(rows: &[EvalRow]) -> Self {
        let mut last: BTreeMap<TrainMode, usize> = BTreeMap::new();
        for r in rows {
            let e = last.entry(r.mode).or_insert(r.epoch);
            *e = (*e).max(r.epoch);
        }
        let modes = TrainMode::ALL
            .into_iter()
            .filter_map(|mode| {
                let epoch = *last.get(&mode)?;
                let at_end = rows.iter().filter(|r| r.mode == mode && r.epoch == epoch);
                let mut per_task: BTreeMap<usize, f64> = BTreeMap::new();
                let mut avg = None;
                for r in at_end {
                    match r.task {
                        EvalTask::Index(t) => {
                            per_task.insert(t, r.metric);
                        }
                        EvalTask::Avg => avg = Some(r.metric),
                    }
                }
                let per_task: Vec<f64> = per_task.into_values().collect();
                let average = avg.unwrap_or_else(|| mean(&per_task));
                Some(ModeSummary { mode, per_task, average })
            })
            .collect();
        Self::from_finals(modes)
    }

    pub fn mode(&self, mode: TrainMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// The structured variant when present, else the flat one.
    pub fn ortho(&self) -> Option<&ModeSummary> {
        self.mode(TrainMode::OrthoStructured)
            .or_else(|| self.mode(TrainMode::OrthoFlat))
    }

    fn task_count(&self) -> usize {
        self.modes.iter().map(|m| m.per_task.len()).max().unwrap_or(0)
    }

    /// Writes per-task rows then an `avg` row. Missing cells are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SUMMARY_HEADER)?;
        let cell = |mode: TrainMode, t: Option<usize>| -> String {
            self.mode(mode)
                .and_then(|m| match t {
                    Some(t) => m.per_task.get(t).copied(),
                    None => Some(m.average),
                })
                .map(fmt_f64)
                .unwrap_or_default()
        };
        let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        for t in 0..self.task_count() {
            let mut row = vec![t.to_string()];
            row.extend(TrainMode::ALL.iter().map(|&m| cell(m, Some(t))));
            row.push(opt(self.recovery_per_task.get(t).copied().flatten()));
            w.write_record(&row)?;
        }
        if !self.modes.is_empty() {
            let mut row = vec![AVG.to_string()];
            row.extend(TrainMode::ALL.iter().map(|&m| cell(m, None)));
            row.push(opt(self.recovery_avg));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<summary>", e))?;
        Ok(())
    }
}

impl fmt::Display for SummaryTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.modes.is_empty() {
            write!(f, "{:<18}", "mode")?;
            for t in 0..self.task_count() {
                write!(f, "{:>10}", format!("task{t}"))?;
            }
            writeln!(f, "{:>10}", "avg")?;
            for m in &self.modes {
                write!(f, "{:<18}", m.mode.label())?;
                for v in &m.per_task {
                    write!(f, "{v:>10.4}")?;
                }
                writeln!(f, "{:>10.4}", m.average)?;
            }
            if !self.recovery_per_task.is_empty() || self.recovery_avg.is_some() {
                write!(f, "{:<18}", "recovery %")?;
                for r in &self.recovery_per_task {
                    match r {
                        Some(r) => write!(f, "{r:>10.1}")?,
                        None => write!(f, "{:>10}", "-")?,
                    }
                }
                match self.recovery_avg {
                    Some(r) => writeln!(f, "{r:>10.1}")?,
                    None => writeln!(f, "{:>10}", "-")?,
                }
            }
        }
        if !self.rank_rows.is_empty() {
            writeln!(f, "{:>6}{:>12}{:>12}{:>12}", "rank", "joint", "ortho", "delta")?;
            for r in &self.rank_rows {
                writeln!(f, "{:>6}{:>12.4}{:>12.4}{:>12.4}", r.rank, r.joint, r.ortho, r.delta)?;
            }
        }
        Ok(())
    }
}

/// Final averages of JOINT and ORTHO_STRUCTURED for one rank and seed.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub rank: usize,
    pub seed: u64,
    pub logs: Vec<MetricsLog>,
}

/// Config for one sweep cell: the base config at a given rank and seed.
pub fn sweep_config(base: &ExperimentConfig, rank: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.model.rank = rank;
    cfg.seed = seed;
    cfg.modes = vec![TrainMode::Joint, TrainMode::OrthoStructured];
    cfg
}

/// Runs JOINT and ORTHO_STRUCTURED for every rank and seed.
///
/// Cells are independent and run in parallel; results come back in
/// (rank, seed) order so output is deterministic.
pub fn rank_sweep_runs(base: &ExperimentConfig, ranks: &[usize], seeds: &[u64]) -> Result<Vec<SweepRun>> {
    if ranks.is_empty() || seeds.is_empty() {
        return Err(Error::param("rank sweep needs at least one rank and one seed"));
    }
    let mut ranks = ranks.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    for &rank in &ranks {
        sweep_config(base, rank, seeds[0]).validate()?;
    }
    let cells: Vec<(usize, u64)> = ranks
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(rank, seed)| {
            let logs = run_experiment(&sweep_config(base, rank, seed))?;
            Ok(SweepRun { rank, seed, logs })
        })
        .collect()
}

/// Averages sweep runs into rows sorted by rank.
pub fn rank_rows(runs: &[SweepRun]) -> Vec<RankRow> {
    let mut acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for run in runs {
        let avg = |mode| run.logs.iter().find(|l| l.mode == mode).map(MetricsLog::final_average);
        if let (Some(j), Some(o)) = (avg(TrainMode::Joint), avg(TrainMode::OrthoStructured)) {
            let e = acc.entry(run.rank).or_insert((0.0, 0.0, 0));
            e.0 += j;
            e.1 += o;
            e.2 += 1;
        }
    }
    acc.into_iter()
        .map(|(rank, (j, o, n))| {
            let (joint, ortho) = (j / n as f64, o / n as f64);
            RankRow {
                rank,
                joint,
                ortho,
                delta: ortho - joint,
            }
        })
        .collect()
}

pub fn rank_sweep(base: &ExperimentConfig, ranks: &[usize], seeds: &[u64]) -> Result<Vec<RankRow>> {
    Ok(rank_rows(&rank_sweep_runs(base, ranks, seeds)?))
}

pub fn write_rank_csv<W: Write>(rows: &[RankRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RANK_HEADER)?;
    for r in rows {
        w.write_record([r.rank.to_string(), fmt_f64(r.joint), fmt_f64(r.ortho), fmt_f64(r.delta)])?;
    }
    w.flush().map_err(|e| Error::io("<rank sweep>", e))?;
    Ok(())
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::io(path, e))
}

/// Writes `evals.csv`, one step file per mode and `summary.csv` into `dir`.
pub fn write_run_dir(dir: &Path, logs: &[MetricsLog]) -> Result<SummaryTable> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_evals_csv(logs, create(&dir.join(EVALS_FILE))?)?;
    for log in logs {
        write_steps_csv(log, create(&dir.join(steps_file_name(log.mode)))?)?;
    }
    let table = SummaryTable::from_logs(logs);
    table.write_csv(create(&dir.join(SUMMARY_FILE))?)?;
    Ok(table)
}

pub fn rank_dir(root: &Path, rank: usize, seed: u64) -> PathBuf {
    root.join(format!("rank_{rank}")).join(format!("seed_{seed}"))
}

/// Writes every sweep cell to its own subdirectory plus `rank_sweep.csv`.
pub fn write_sweep_dir(root: &Path, runs: &[SweepRun]) -> Result<Vec<RankRow>> {
    for run in runs {
        write_run_dir(&rank_dir(root, run.rank, run.seed), &run.logs)?;
    }
    let rows = rank_rows(runs);
    write_rank_csv(&rows, create(&root.join(RANK_FILE))?)?;
    Ok(rows)
}

/// Recomputes the summary from CSVs under `dir`.
///
/// A top-level `evals.csv` fills the mode table. `rank_*/seed_*/evals.csv`
/// files fill the rank rows.
pub fn summarize_dir(dir: &Path) -> Result<SummaryTable> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let evals = dir.join(EVALS_FILE);
    let mut table = if evals.is_file() {
        SummaryTable::from_eval_rows(&read_evals_csv(open(&evals)?)?)
    } else {
        SummaryTable::default()
    };
    let mut acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for (rank, seed_dir) in sweep_cells(dir)? {
        let sub = SummaryTable::from_eval_rows(&read_evals_csv(open(&seed_dir.join(EVALS_FILE))?)?);
        if let (Some(j), Some(o)) = (sub.mode(TrainMode::Joint), sub.mode(TrainMode::OrthoStructured)) {
            let e = acc.entry(rank).or_insert((0.0, 0.0, 0));
            e.0 += j.average;
            e.1 += o.average;
            e.2 += 1;
        }
    }
    table.rank_rows = acc
        .into_iter()
        .map(|(rank, (j, o, n))| {
            let (joint, ortho) = (j / n as f64, o / n as f64);
            RankRow {
                rank,
                joint,
                ortho,
                delta: ortho - joint,
            }
        })
        .collect();
    if table.modes.is_empty() && table.rank_rows.is_empty() {
        return Err(Error::Format {
            what: "run directory",
            msg: format!("no {EVALS_FILE} found under {}", dir.display()),
        });
    }
    Ok(table)
}

fn sweep_cells(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut cells = Vec::new();
    for rank_entry in read_dir_sorted(dir)? {
        let Some(rank) = rank_entry
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("rank_"))
            .and_then(|r| r.parse().ok())
        else {
            continue;
        };
        for seed_dir in read_dir_sorted(&rank_entry)? {
            let is_seed = seed_dir
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("seed_"));
            if is_seed && seed_dir.join(EVALS_FILE).is_file() {
                cells.push((rank, seed_dir));
            }
        }
    }
    Ok(cells)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskFamily;
    use crate::model::TaskKind;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn recovery_examples() {
        assert!(close(recovery(87.4, 85.9, 87.1).unwrap(), 80.0, 1e-9));
        assert!(close(recovery(88.1, 86.5, 87.9).unwrap(), 87.5, 1e-9));
        assert_eq!(recovery(3.0, 1.0, 3.0).unwrap(), 100.0);
        assert_eq!(recovery(3.0, 1.0, 1.0).unwrap(), 0.0);
        assert!(matches!(recovery(2.0, 2.0, 5.0), Err(Error::UndefinedRecovery(_))));
    }

    #[test]
    fn recovery_is_direction_free() {
        // losses: single 0.1, joint 0.3, ortho 0.15 closes three quarters
        assert!(close(recovery(0.1, 0.3, 0.15).unwrap(), 75.0, 1e-9));
    }

    fn log_with_dots(dots: &[f64]) -> MetricsLog {
        let mut log = MetricsLog::new(TrainMode::Joint, vec![]);
        for (step, &dot) in dots.iter().enumerate() {
            log.conflicts.push(ConflictRow {
                step,
                lr: 0.1,
                scope: ProjectionScope::PerMatrix,
                record: ConflictRecord {
                    pair_i: 0,
                    pair_j: 1,
                    block: "L0.A".into(),
                    dot,
                    cosine: dot.signum(),
                    degenerate: false,
                    conflicted: dot < 0.0,
                },
            });
        }
        log
    }

    #[test]
    fn conflict_frequency_counts() {
        assert_eq!(conflict_frequency(&log_with_dots(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(conflict_frequency(&log_with_dots(&[-1.0, -2.0])).unwrap(), 1.0);
        let dots = [1.0, -1.0, 2.0, -0.5, 3.0, 4.0, -2.0, 0.5];
        assert_eq!(conflict_frequency(&log_with_dots(&dots)).unwrap(), 0.375);
        assert!(matches!(conflict_frequency(&log_with_dots(&[])), Err(Error::Param(_))));
    }

    #[test]
    fn floats_round_trip_through_text() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 89.9, f64::MAX, 5e-324] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    fn small_logs() -> Vec<MetricsLog> {
        let mut cfg = ExperimentConfig::conflict_heavy();
        cfg.model.hidden_dims = vec![6];
        cfg.model.rank = 2;
        cfg.tasks.in_dim = 5;
        cfg.tasks.n_train = 24;
        cfg.tasks.n_eval = 8;
        cfg.schedule.batch_size = 8;
        cfg.schedule.epochs = 2;
        run_experiment(&cfg).unwrap()
    }

    #[test]
    fn step_csv_round_trips() {
        for log in small_logs() {
            let mut buf = Vec::new();
            write_steps_csv(&log, &mut buf).unwrap();
            let rows = read_steps_csv(buf.as_slice()).unwrap();
            assert_eq!(rows.losses, log.steps);
            assert_eq!(rows.conflicts, log.conflicts);
            if !log.conflicts.is_empty() {
                assert_eq!(rows.conflict_frequency().unwrap(), conflict_frequency(&log).unwrap());
            }
        }
    }

    #[test]
    fn step_csv_header_is_exact() {
        let mut buf = Vec::new();
        write_steps_csv(&small_logs()[1], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,task,loss,lr,scope,pair_i,pair_j,block,dot,cosine,conflicted\n"));
    }

    #[test]
    fn summary_from_csv_matches_memory() {
        let logs = small_logs();
        let mut buf = Vec::new();
        write_evals_csv(&logs, &mut buf).unwrap();
        assert!(buf.starts_with(b"epoch,mode,task,metric\n"));
        let back = SummaryTable::from_eval_rows(&read_evals_csv(buf.as_slice()).unwrap());
        assert_eq!(back, SummaryTable::from_logs(&logs));
    }

    #[test]
    fn avg_rows_override_per_task_mean() {
        let text = "epoch,mode,task,metric\n\
                    1,single_task,0,1.0\n1,single_task,avg,89.9\n\
                    1,joint,0,1.0\n1,joint,avg,88.4\n\
                    1,ortho_structured,0,1.0\n1,ortho_structured,avg,89.6\n";
        let table = SummaryTable::from_eval_rows(&read_evals_csv(text.as_bytes()).unwrap());
        assert!(close(table.recovery_avg.unwrap(), 80.0, 1e-9));
        assert_eq!(table.recovery_per_task, vec![None]);
    }

    #[test]
    fn bad_headers_and_values_are_rejected() {
        assert!(read_evals_csv("epoch,mode,task\n".as_bytes()).is_err());
        assert!(read_evals_csv("epoch,mode,task,metric\n1,bogus,0,1.0\n".as_bytes()).is_err());
        assert!(read_evals_csv("epoch,mode,task,metric\n1,joint,0,abc\n".as_bytes()).is_err());
    }

    #[test]
    fn rank_rows_sorted_and_averaged() {
        let logs = |j: f64, o: f64| {
            let mut a = MetricsLog::new(TrainMode::Joint, vec![TaskKind::Regression { outputs: 1 }]);
            a.record_eval(1, &[j]);
            let mut b = MetricsLog::new(TrainMode::OrthoStructured, vec![TaskKind::Regression { outputs: 1 }]);
            b.record_eval(1, &[o]);
            vec![a, b]
        };
        let runs = vec![
            SweepRun { rank: 8, seed: 0, logs: logs(1.0, 2.0) },
            SweepRun { rank: 2, seed: 0, logs: logs(1.0, 3.0) },
            SweepRun { rank: 2, seed: 1, logs: logs(3.0, 3.0) },
        ];
        let rows = rank_rows(&runs);
        assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![2, 8]);
        assert_eq!(rows[0], RankRow { rank: 2, joint: 2.0, ortho: 3.0, delta: 1.0 });
        assert_eq!(rows[1].gain(false), -1.0);
    }

    #[test]
    fn single_rank_single_seed_gives_one_row() {
        let mut cfg = ExperimentConfig::conflict_heavy();
        cfg.tasks.kind = TaskFamily::Regression;
        cfg.model.hidden_dims = vec![4];
        cfg.tasks.in_dim = 4;
        cfg.tasks.n_train = 16;
        cfg.tasks.n_eval = 4;
        cfg.schedule.batch_size = 8;
        cfg.schedule.epochs = 1;
        let rows = rank_sweep(&cfg, &[2], &[0]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].rank, 2);
        assert!(rank_sweep(&cfg, &[], &[0]).is_err());
        assert!(rank_sweep(&cfg, &[9], &[0]).is_err());
    }
}
