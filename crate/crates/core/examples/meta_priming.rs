//! Primes a quickly pretrained encoder with the PE-simulating inner loop and
//! with plain multi-task fine-tuning, and prints how their query losses move.

use priming::data::build_meta_dataset;
use priming::finetune::PrimingKind;
use priming::harness::{Experiment, RunConfig};
use priming::meta::{ft_prime, prime};
use priming::params::Partition;

fn mean_loss(log: &[priming::meta::StepLog], steps: std::ops::RangeInclusive<usize>) -> f64 {
    let v: Vec<f64> = log.iter().filter(|r| steps.contains(&r.outer_step)).map(|r| r.query_loss).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> priming::Result<()> {
    let cfg = RunConfig::from_toml(include_str!("../configs/quick.toml"))?;
    let mut exp = Experiment::new(cfg)?;
    let loss = exp.pretrained()?;
    println!("pretrained encoder: {} parameters", loss.registry().total_count());

    let tasks = build_meta_dataset(&exp.data.sources, &exp.cfg.data.split)?;
    let start = exp.priming_start(0)?;
    let n = exp.cfg.priming.outer_steps;
    for kind in [PrimingKind::Meta, PrimingKind::MamlLoop, PrimingKind::Finetune] {
        let pcfg = exp.priming_config(kind, 0);
        let out = match kind {
            PrimingKind::Finetune => ft_prime(&start, &tasks, &pcfg)?,
            _ => prime(&start, &tasks, &pcfg)?,
        };
        println!(
            "{:9} query loss: first 10 steps {:.3}, last 10 steps {:.3}; |Δθ_p|max {:.2e}, |Δθ_a|max {:.2e}",
            kind.name(),
            mean_loss(&out.log, 1..=10),
            mean_loss(&out.log, n - 9..=n),
            out.model.registry().max_abs_diff(start.registry(), Partition::Pretrained),
            out.model.registry().max_abs_diff(start.registry(), Partition::Lightweight),
        );
    }
    Ok(())
}
