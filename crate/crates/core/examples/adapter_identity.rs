//! A residual adapter whose up-projection starts at zero leaves the encoder
//! output untouched, so adding it does not move the pretrained model.

use priming::model::{AdapterInit, ModelConfig, PartitionedModel};
use priming::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> priming::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = PartitionedModel::new_encoder(ModelConfig::desk(), &mut rng)?;
    model.add_head("demo", &mut rng)?;
    let tokens = [4, 18, 77, 150, 9];

    let logits = |m: &PartitionedModel| -> priming::Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, &[]);
        let v = m.logits(&mut tape, &b, &tokens, "demo")?;
        Ok(tape.value(v).data().to_vec())
    };
    let bare = logits(&model)?;

    model.add_adapter(AdapterInit::default(), &mut rng)?;
    let fresh = logits(&model)?;
    println!("fresh adapter, bit-identical logits: {}", bare == fresh);

    let mut perturbed = model.clone();
    perturbed.remove_adapter();
    perturbed.add_adapter(AdapterInit { down_scale: 0.5, up_scale: 0.5 }, &mut rng)?;
    let moved = logits(&perturbed)?;
    let diff = bare.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("random up-projection, max logit change: {diff:.4}");
    Ok(())
}
