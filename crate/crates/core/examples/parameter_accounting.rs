//! Trainable-parameter fractions per fine-tuning setting, at the desk size and
//! at multilingual-BERT-base size.

use priming::finetune::FineTuneSetting;
use priming::model::{count_trainable_fraction, ModelConfig};

fn main() {
    for (name, config) in [("desk", ModelConfig::desk()), ("mbert-like", ModelConfig::mbert_like())] {
        println!(
            "{name}: encoder {}, adapter {}, head {}",
            config.pretrained_count(),
            config.adapter_count(),
            config.head_count()
        );
        for setting in FineTuneSetting::ALL {
            let f = count_trainable_fraction(&config, setting);
            println!("  {:28} {:>12} / {:<12} {}", setting.label(), f.trainable, f.total, f.display_percent());
        }
    }
}
