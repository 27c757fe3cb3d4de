//! Priming strategy against downstream fine-tuning strategy on the quick
//! config.

use priming::harness::{matrix_settings, render_matrix, Experiment, MatrixResult, RunConfig};

fn main() -> priming::Result<()> {
    let cfg = RunConfig::from_toml(include_str!("../configs/quick.toml"))?;
    let seeds = cfg.seeds.clone();
    let mut exp = Experiment::new(cfg)?;
    let reports = exp.run_grid(&matrix_settings(), &seeds, |_| Ok(()))?;
    println!("{}", render_matrix(&MatrixResult::from_reports(&reports)));
    Ok(())
}
