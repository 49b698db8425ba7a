//! Generate conflicting task families and measure how often the task
//! gradients disagree at initialization as the conflict level rises.
//!
//! Pass a path to also dump the c = 0.8 set as CSV:
//! `cargo run --example synthetic_tasks -- /tmp/tasks.csv`

use ortho_lora::surgery::conflict_report;
use ortho_lora::ExperimentConfig;

fn main() -> ortho_lora::Result<()> {
    let mut cfg = ExperimentConfig::conflict_heavy();
    for c in [0.0, 0.4, 0.8, 1.0] {
        cfg.tasks.conflict_level = c;
        let set = cfg.task_set()?;
        let mut model = cfg.initial_model(&set)?;
        // one step of plain descent on B so its gradient is informative
        let batches: Vec<_> = (0..set.num_tasks()).map(|t| set.train[t].full_batch(t)).collect();
        let (_, update) = model.joint_gradient(&batches, None)?;
        for id in model.adapter_block_ids() {
            model.param_mut(id).expect("adapter").axpy(-0.05, update.get(id).expect("block"))?;
        }
        let grads: Vec<_> = batches.iter().map(|b| model.task_gradient(b)).collect::<Result<_, _>>()?;
        let report = conflict_report(0, &grads, cfg.surgery.structured_scope)?;
        let teacher_gap = set.teachers[0].sub(&set.teachers[1])?.frob_norm();
        println!(
            "c = {c:.1}: |W_0 - W_1|_F = {teacher_gap:.3}, conflicted (pair, block) records {}/{}",
            report.conflicts(),
            report.pairs.len()
        );
    }
    if let Some(path) = std::env::args().nth(1) {
        cfg.tasks.conflict_level = 0.8;
        cfg.task_set()?.write_csv(&path)?;
        println!("wrote {path}");
    }
    Ok(())
}
