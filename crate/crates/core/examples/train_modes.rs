//! Train the conflict-heavy setup in all four modes and print the summary
//! table with per-task recovery.
//!
//! `cargo run --release --example train_modes -- [seed]`

use ortho_lora::report::{conflict_frequency, SummaryTable};
use ortho_lora::trainer::run_experiment;
use ortho_lora::ExperimentConfig;

fn main() -> ortho_lora::Result<()> {
    let mut cfg = ExperimentConfig::conflict_heavy();
    if let Some(seed) = std::env::args().nth(1) {
        cfg.seed = seed.parse().expect("seed must be an integer");
    }
    let logs = run_experiment(&cfg)?;
    for log in &logs {
        let freq = conflict_frequency(log).map(|f| format!("{f:.3}")).unwrap_or_else(|_| "-".into());
        println!(
            "{:<17} backward passes {:>5}  projections {:>5}  conflict frequency {freq}",
            log.mode.label(),
            log.backward_passes,
            log.projections
        );
    }
    println!("\n(eval metric: per-entry MSE, lower is better)\n{}", SummaryTable::from_logs(&logs));
    Ok(())
}
