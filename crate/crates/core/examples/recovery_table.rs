//! Recovery arithmetic, and recomputing a summary from an eval CSV.

use ortho_lora::report::{read_evals_csv, recovery, SummaryTable};

const EVALS: &str = "\
epoch,mode,task,metric
10,single_task,avg,89.9
10,joint,avg,88.4
10,ortho_structured,avg,89.6
";

fn main() -> ortho_lora::Result<()> {
    for (name, s, j, o) in [("A", 87.4, 85.9, 87.1), ("B", 88.1, 86.5, 87.9), ("C", 94.2, 92.8, 93.9)] {
        println!("{name}: single {s} joint {j} ortho {o} -> recovery {:.1}%", recovery(s, j, o)?);
    }
    match recovery(1.0, 1.0, 2.0) {
        Err(e) => println!("no gap: {e}"),
        Ok(r) => println!("unexpected {r}"),
    }
    let table = SummaryTable::from_eval_rows(&read_evals_csv(EVALS.as_bytes())?);
    println!("\n{table}");
    Ok(())
}
