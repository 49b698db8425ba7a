//! Compare JOINT against ORTHO_STRUCTURED across adapter ranks.
//!
//! `cargo run --release --example rank_sweep -- [seeds]`

use ortho_lora::report::{rank_sweep, SummaryTable};
use ortho_lora::ExperimentConfig;

fn main() -> ortho_lora::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(3, |s| s.parse().expect("seed count"));
    let cfg = ExperimentConfig::conflict_heavy();
    let seeds: Vec<u64> = (0..seeds).collect();
    let rows = rank_sweep(&cfg, &[2, 4, 8, 16], &seeds)?;
    let table = SummaryTable {
        rank_rows: rows,
        ..Default::default()
    };
    println!("mean eval MSE over {} seeds (negative delta favours ortho)\n{table}", seeds.len());
    Ok(())
}
