//! Runs the main fine-tuning settings on every target language of the quick
//! config and prints the F1 table.

use priming::finetune::FineTuneSetting;
use priming::harness::{render_table, Experiment, RunConfig};

fn main() -> priming::Result<()> {
    let cfg = RunConfig::from_toml(include_str!("../configs/quick.toml"))?;
    let seeds = cfg.seeds.clone();
    let mut exp = Experiment::new(cfg)?;
    let settings = FineTuneSetting::TABLE;
    let reports = exp.run_grid(&settings, &seeds, |r| {
        eprintln!("{:24} {:6} F1 {:.2} (best step {})", r.setting.name(), r.language, r.f1, r.best_step);
        Ok(())
    })?;
    println!("{}", render_table(&reports));
    Ok(())
}
