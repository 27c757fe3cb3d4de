//! Finite-difference check of every parameter of a small encoder with an
//! adapter and a tagging head.

use std::time::Instant;

use priming::data::{Example, PAD_ID};
use priming::gradcheck::finite_difference_check;
use priming::model::{AdapterInit, ModelConfig, PartitionedModel};
use priming::params::Partition;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> priming::Result<()> {
    let config = ModelConfig {
        vocab_size: 64,
        n_layers: 1,
        d_model: 16,
        d_ff: 32,
        adapter_bottleneck: 4,
        ..ModelConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = PartitionedModel::new_encoder(config.clone(), &mut rng)?;
    // Non-zero up-projection so the adapter actually shapes the loss.
    model.add_adapter(AdapterInit { down_scale: 0.3, up_scale: 0.3 }, &mut rng)?;
    model.add_head("demo", &mut rng)?;

    let batch = vec![
        Example { tokens: vec![5, 9, 33, 12, PAD_ID], labels: vec![1, 2, 0, 3, 0] },
        Example { tokens: vec![40, 41, 7, 8, 60], labels: vec![0, 5, 6, 0, 1] },
    ];
    let start = Instant::now();
    let report = finite_difference_check(
        |reg| PartitionedModel::from_registry(config.clone(), reg.clone())?.loss_tape(&batch, "demo", &Partition::ALL),
        model.registry(),
        1e-5,
        1e-4,
    )?;
    println!("{} elements in {:.1}s", report.elements_checked, start.elapsed().as_secs_f64());
    for p in &report.per_param {
        println!("{:40} {:.2e}", p.id, p.max_rel_error);
    }
    println!("max relative error {:.2e}, passed: {}", report.max_rel_error(), report.passed());
    Ok(())
}
