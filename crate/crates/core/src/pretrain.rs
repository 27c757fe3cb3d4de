//! Masked-token pretraining of the encoder on unlabeled text of every
//! language, standing in for a multilingual pretrained checkpoint.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MASK_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::finetune::seeded;
use crate::model::{ModelConfig, PartitionedModel};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::params::{ParameterRegistry, Partition};
use crate::tape::Tape;
use crate::tensor::Tensor;

const OUTPUT_BIAS: &str = "mlm.bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_prob: f64,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            mask_prob: 0.15,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Masks positions of one sentence: of the chosen positions 80% become
/// `MASK_ID`, 10% a random non-special id and 10% stay. At least one
/// position is always chosen.
fn mask_sentence(tokens: &[usize], vocab: usize, p: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut input = tokens.to_vec();
    let mut targets = vec![None; tokens.len()];
    let mut chosen: Vec<usize> = (0..tokens.len()).filter(|_| rng.gen_bool(p)).collect();
    if chosen.is_empty() {
        chosen.push(rng.gen_range(0..tokens.len()));
    }
    for i in chosen {
        targets[i] = Some(tokens[i]);
        let r: f64 = rng.gen();
        if r < 0.8 {
            input[i] = MASK_ID;
        } else if r < 0.9 {
            input[i] = rng.gen_range(MASK_ID + 1..vocab);
        }
    }
    (input, targets)
}

/// Predicts masked tokens through the tied token-embedding matrix.
fn mlm_loss(
    model: &PartitionedModel,
    bias: &Tensor,
    batch: &[(Vec<usize>, Vec<Option<usize>>)],
) -> Result<(Tape, crate::tape::Var)> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &[Partition::Pretrained]);
    let bias = tape.param(OUTPUT_BIAS, bias, true);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (input, t) in batch {
        let h = model.encode(&mut tape, &b, input)?;
        let idx: Vec<usize> = (0..t.len()).filter(|&i| t[i].is_some()).collect();
        rows.push(tape.gather_rows(h, &idx)?);
        targets.extend(idx.iter().map(|&i| t[i]));
    }
    let h = tape.concat_rows(&rows)?;
    let emb = b.get("encoder.embed.tokens")?;
    let et = tape.transpose(emb)?;
    let logits = tape.matmul(h, et)?;
    let logits = tape.add_bias(logits, bias)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok((tape, loss))
}

/// Trains a fresh encoder (seeded by `cfg.seed`) on `text` and returns it with
/// the loss trace. The output bias is discarded.
pub fn pretrain_encoder(
    config: &ModelConfig,
    text: &[Vec<usize>],
    cfg: &PretrainConfig,
    mut on_log: impl FnMut(&PretrainLog),
) -> Result<(PartitionedModel, Vec<PretrainLog>)> {
    let mut rng = seeded(cfg.seed, 10);
    let mut model = PartitionedModel::new_encoder(config.clone(), &mut rng)?;
    let text: Vec<&Vec<usize>> = text.iter().filter(|s| !s.is_empty()).collect();
    if cfg.steps == 0 {
        return Ok((model, Vec::new()));
    }
    if text.is_empty() {
        return Err(Error::Data("no pretraining text".into()));
    }
    if config.vocab_size <= MASK_ID + 1 {
        return Err(Error::Config("vocab too small for masked pretraining".into()));
    }
    let mut bias_reg = ParameterRegistry::new();
    bias_reg.add(OUTPUT_BIAS, Tensor::zeros(&[config.vocab_size]), Partition::Pretrained)?;
    let mut opt = AdamW::new(cfg.adamw);
    let mut bias_opt = AdamW::new(cfg.adamw);
    let schedule = LinearSchedule::new(cfg.lr, cfg.steps);
    let mut order: Vec<usize> = (0..text.len()).collect();
    order.shuffle(&mut rng);
    let mut pos = 0;
    let mut log = Vec::new();
    let mut window = Vec::new();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if pos == order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            let s = text[order[pos]];
            let s = &s[..s.len().min(config.max_seq_len)];
            debug_assert!(!s.contains(&PAD_ID));
            batch.push(mask_sentence(s, config.vocab_size, cfg.mask_prob, &mut rng));
            pos += 1;
        }
        let (tape, loss) = mlm_loss(&model, bias_reg.value(OUTPUT_BIAS)?, &batch)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("pretraining step {}", step + 1),
                loss: value,
            });
        }
        let mut grads = tape.backward(loss)?;
        let lr = schedule.at(step);
        if let Some(g) = grads.remove(OUTPUT_BIAS) {
            let mut gb = crate::tape::Gradients::new();
            gb.insert(OUTPUT_BIAS, g);
            bias_opt.step(&mut bias_reg, &gb, lr, &[Partition::Pretrained])?;
        }
        opt.step(model.registry_mut(), &grads, lr, &[Partition::Pretrained])?;
        window.push(value);
        if (step + 1) % 100 == 0 || step + 1 == cfg.steps {
            let entry = PretrainLog {
                step: step + 1,
                loss: window.iter().sum::<f64>() / window.len() as f64,
                lr,
            };
            window.clear();
            on_log(&entry);
            log.push(entry);
        }
    }
    Ok((model, log))
}
