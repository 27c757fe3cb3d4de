//! Tiny Transformer encoder `f`, single top adapter `g` and per-task linear
//! heads `h`, composed as `h(g(f(x)))`.
//!
//! Parameters live in one [`ParameterRegistry`] and are tagged by partition:
//! everything under `encoder.` is pretrained, `adapter.` is lightweight and
//! `head.<task>.` is a task head.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ConfigHash;
use crate::data::{Example, PAD_ID};
use crate::error::{Error, Result};
use crate::finetune::FineTuneSetting;
use crate::params::{ParameterRegistry, Partition};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Gelu,
}

fn default_ln_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub n_labels: usize,
    pub adapter_bottleneck: usize,
    pub adapter_nonlinearity: Nonlinearity,
    pub adapter_residual: bool,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small enough for whole-model finite-difference checks.
    pub fn desk() -> Self {
        Self {
            vocab_size: 200,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 32,
            n_labels: 7,
            adapter_bottleneck: 8,
            adapter_nonlinearity: Nonlinearity::Relu,
            adapter_residual: true,
            layer_norm_eps: default_ln_eps(),
        }
    }

    /// Multilingual-BERT-base dimensions with a 64-wide adapter.
    pub fn mbert_like() -> Self {
        Self {
            vocab_size: 119_547,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            max_seq_len: 512,
            n_labels: 7,
            adapter_bottleneck: 64,
            adapter_nonlinearity: Nonlinearity::Relu,
            adapter_residual: true,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= PAD_ID {
            return fail(format!("vocab_size {} leaves no room for special ids", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.adapter_bottleneck < 1 {
            return fail("adapter_bottleneck must be at least 1".into());
        }
        if self.n_labels < 2 {
            return fail(format!("n_labels {} must be at least 2", self.n_labels));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return fail("d_ff and max_seq_len must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> ConfigHash {
        ConfigHash::of(self).expect("model config serializes")
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn pretrained_count(&self) -> u64 {
        let (v, d, f, t) = (
            self.vocab_size as u64,
            self.d_model as u64,
            self.d_ff as u64,
            self.max_seq_len as u64,
        );
        let embeddings = v * d + t * d + 2 * d;
        let attention = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let norms = 4 * d;
        embeddings + self.n_layers as u64 * (attention + ffn + norms)
    }

    pub fn adapter_count(&self) -> u64 {
        let (d, b) = (self.d_model as u64, self.adapter_bottleneck as u64);
        d * b + b + b * d + d
    }

    pub fn head_count(&self) -> u64 {
        let (d, n) = (self.d_model as u64, self.n_labels as u64);
        d * n + n
    }
}

/// An exact `trainable / total` parameter ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamFraction {
    pub trainable: u64,
    pub total: u64,
}

impl ParamFraction {
    pub fn value(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.value()
    }

    /// Percentage rendered the way parameter budgets are usually quoted:
    /// `100%`, two decimals down to 0.01%, one significant digit below.
    pub fn display_percent(&self) -> String {
        let p = self.percent();
        if self.trainable == self.total {
            "100%".to_string()
        } else if p >= 0.01 {
            format!("{p:.2}%")
        } else {
            format!("{p:.0e}%")
        }
    }
}

impl fmt::Display for ParamFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({})", self.trainable, self.total, self.display_percent())
    }
}

/// Trainable fraction of a single-task model under `setting`, counted
/// analytically from the config so it works at full-size dimensions.
pub fn count_trainable_fraction(config: &ModelConfig, setting: FineTuneSetting) -> ParamFraction {
    let p = config.pretrained_count();
    let a = if setting.has_adapter() { config.adapter_count() } else { 0 };
    let h = config.head_count();
    let trainable_parts = setting.trainable_partitions();
    let mut trainable = 0;
    for part in trainable_parts {
        trainable += match part {
            Partition::Pretrained => p,
            Partition::Lightweight => a,
            Partition::Head => h,
        };
    }
    ParamFraction {
        trainable,
        total: p + a + h,
    }
}

/// How fresh adapter weights are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterInit {
    /// Down-projection weights are uniform in `±down_scale`.
    pub down_scale: f64,
    /// Up-projection weights are uniform in `±up_scale`; zero starts the
    /// residual adapter at the identity.
    pub up_scale: f64,
}

impl Default for AdapterInit {
    fn default() -> Self {
        Self {
            down_scale: 1e-2,
            up_scale: 0.0,
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = if scale == 0.0 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub fn head_weight_id(task: &str) -> String {
    format!("head.{task}.weight")
}

pub fn head_bias_id(task: &str) -> String {
    format!("head.{task}.bias")
}

const ADAPTER_DOWN_W: &str = "adapter.down.weight";
const ADAPTER_DOWN_B: &str = "adapter.down.bias";
const ADAPTER_UP_W: &str = "adapter.up.weight";
const ADAPTER_UP_B: &str = "adapter.up.bias";

/// Parameter values bound as leaves on one tape.
pub struct Bound {
    ids: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: &str) -> Result<Var> {
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|k| self.vars[k])
            .ok_or_else(|| Error::Lookup {
                kind: "parameter",
                id: id.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedModel {
    config: ModelConfig,
    registry: ParameterRegistry,
}

impl PartitionedModel {
    /// Encoder only, randomly initialized.
    pub fn new_encoder(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut reg = ParameterRegistry::new();
        let (v, d, f, t) = (config.vocab_size, config.d_model, config.d_ff, config.max_seq_len);
        let pt = Partition::Pretrained;
        reg.add("encoder.embed.tokens", uniform(rng, &[v, d], 0.5), pt)?;
        reg.add("encoder.embed.positions", uniform(rng, &[t, d], 0.5), pt)?;
        reg.add("encoder.embed.ln.gain", Tensor::filled(&[d], 1.0), pt)?;
        reg.add("encoder.embed.ln.bias", Tensor::zeros(&[d]), pt)?;
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        for l in 0..config.n_layers {
            let p = format!("encoder.layer{l}");
            for m in ["q", "k", "v", "o"] {
                reg.add(format!("{p}.attn.{m}.weight"), uniform(rng, &[d, d], sd), pt)?;
                reg.add(format!("{p}.attn.{m}.bias"), Tensor::zeros(&[d]), pt)?;
            }
            reg.add(format!("{p}.ln1.gain"), Tensor::filled(&[d], 1.0), pt)?;
            reg.add(format!("{p}.ln1.bias"), Tensor::zeros(&[d]), pt)?;
            reg.add(format!("{p}.ffn.in.weight"), uniform(rng, &[d, f], sd), pt)?;
            reg.add(format!("{p}.ffn.in.bias"), Tensor::zeros(&[f]), pt)?;
            reg.add(format!("{p}.ffn.out.weight"), uniform(rng, &[f, d], sf), pt)?;
            reg.add(format!("{p}.ffn.out.bias"), Tensor::zeros(&[d]), pt)?;
            reg.add(format!("{p}.ln2.gain"), Tensor::filled(&[d], 1.0), pt)?;
            reg.add(format!("{p}.ln2.bias"), Tensor::zeros(&[d]), pt)?;
        }
        Ok(Self {
            config,
            registry: reg,
        })
    }

    /// Wraps an existing registry after checking every expected shape.
    pub fn from_registry(config: ModelConfig, registry: ParameterRegistry) -> Result<Self> {
        config.validate()?;
        let reference = Self::new_encoder(config.clone(), &mut rand::rngs::mock::StepRng::new(0, 0))?;
        for p in reference.registry.iter() {
            let got = registry.get(p.id()).ok_or_else(|| Error::Lookup {
                kind: "parameter",
                id: p.id().to_string(),
            })?;
            if got.value.shape() != p.value.shape() || got.partition() != p.partition() {
                return Err(Error::shape(
                    "model",
                    format!("{}: {:?} vs expected {:?}", p.id(), got.value.shape(), p.value.shape()),
                ));
            }
        }
        let model = Self { config, registry };
        for p in model.registry.iter() {
            if model.expected_shape(p.id()).as_deref() != Some(p.value.shape()) {
                return Err(Error::shape("model", format!("unexpected parameter {}", p.id())));
            }
        }
        Ok(model)
    }

    fn expected_shape(&self, id: &str) -> Option<Vec<usize>> {
        let c = &self.config;
        let (d, b, n) = (c.d_model, c.adapter_bottleneck, c.n_labels);
        match id {
            ADAPTER_DOWN_W => Some(vec![d, b]),
            ADAPTER_DOWN_B => Some(vec![b]),
            ADAPTER_UP_W => Some(vec![b, d]),
            ADAPTER_UP_B => Some(vec![d]),
            _ if id.starts_with("head.") && id.ends_with(".weight") => Some(vec![d, n]),
            _ if id.starts_with("head.") && id.ends_with(".bias") => Some(vec![n]),
            _ if id.starts_with("encoder.") => {
                // Encoder shapes were already checked against the reference.
                self.registry.get(id).map(|p| p.value.shape().to_vec())
            }
            _ => None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParameterRegistry {
        &mut self.registry
    }

    pub fn into_registry(self) -> ParameterRegistry {
        self.registry
    }

    pub fn has_adapter(&self) -> bool {
        self.registry.contains(ADAPTER_DOWN_W)
    }

    pub fn add_adapter(&mut self, init: AdapterInit, rng: &mut impl Rng) -> Result<()> {
        let (d, b) = (self.config.d_model, self.config.adapter_bottleneck);
        let lw = Partition::Lightweight;
        self.registry.add(ADAPTER_DOWN_W, uniform(rng, &[d, b], init.down_scale), lw)?;
        self.registry.add(ADAPTER_DOWN_B, Tensor::zeros(&[b]), lw)?;
        self.registry.add(ADAPTER_UP_W, uniform(rng, &[b, d], init.up_scale), lw)?;
        self.registry.add(ADAPTER_UP_B, Tensor::zeros(&[d]), lw)?;
        Ok(())
    }

    pub fn remove_adapter(&mut self) {
        for id in [ADAPTER_DOWN_W, ADAPTER_DOWN_B, ADAPTER_UP_W, ADAPTER_UP_B] {
            self.registry.remove(id);
        }
    }

    /// Adds a randomly initialized head: weights uniform in `±1/√d_model`,
    /// zero bias.
    pub fn add_head(&mut self, task: &str, rng: &mut impl Rng) -> Result<()> {
        let (d, n) = (self.config.d_model, self.config.n_labels);
        let scale = 1.0 / (d as f64).sqrt();
        self.registry
            .add(head_weight_id(task), uniform(rng, &[d, n], scale), Partition::Head)?;
        self.registry
            .add(head_bias_id(task), Tensor::zeros(&[n]), Partition::Head)?;
        Ok(())
    }

    pub fn has_head(&self, task: &str) -> bool {
        self.registry.contains(&head_weight_id(task))
    }

    /// Task ids with a head, in registry order.
    pub fn head_tasks(&self) -> Vec<String> {
        self.registry
            .ids()
            .filter_map(|id| id.strip_prefix("head.")?.strip_suffix(".weight"))
            .map(str::to_string)
            .collect()
    }

    pub fn remove_heads(&mut self) {
        for task in self.head_tasks() {
            self.registry.remove(&head_weight_id(&task));
            self.registry.remove(&head_bias_id(&task));
        }
    }

    /// Binds every parameter; gradients flow only into `grad_partitions`.
    pub fn bind(&self, tape: &mut Tape, grad_partitions: &[Partition]) -> Bound {
        let mut ids = Vec::with_capacity(self.registry.len());
        let mut vars = Vec::with_capacity(self.registry.len());
        for p in self.registry.iter() {
            let rg = grad_partitions.contains(&p.partition());
            vars.push(tape.param(p.id(), &p.value, rg));
            ids.push(p.id().to_string());
        }
        Bound { ids, vars }
    }

    fn linear(&self, tape: &mut Tape, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let w = b.get(&format!("{prefix}.weight"))?;
        let bias = b.get(&format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, bias)
    }

    fn ln(&self, tape: &mut Tape, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let g = b.get(&format!("{prefix}.gain"))?;
        let bias = b.get(&format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, bias, self.config.layer_norm_eps)
    }

    /// `f`: per-token hidden states `[seq_len × d_model]`. Keys at padding
    /// positions are masked out of every attention head.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, tokens: &[usize]) -> Result<Var> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > c.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                c.max_seq_len
            )));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.embedding(b.get("encoder.embed.tokens")?, tokens)?;
        let pos = tape.gather_rows(b.get("encoder.embed.positions")?, &positions)?;
        let x = tape.add(tok, pos)?;
        let mut x = self.ln(tape, b, x, "encoder.embed.ln")?;
        x = tape.dropout(x);

        let mask: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        let dh = c.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..c.n_layers {
            let p = format!("encoder.layer{l}");
            let q = self.linear(tape, b, x, &format!("{p}.attn.q"))?;
            let k = self.linear(tape, b, x, &format!("{p}.attn.k"))?;
            let v = self.linear(tape, b, x, &format!("{p}.attn.v"))?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for h in 0..c.n_heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt);
                let probs = tape.softmax(scores, Some(&mask))?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let attn = tape.concat_cols(&heads)?;
            let attn = self.linear(tape, b, attn, &format!("{p}.attn.o"))?;
            let attn = tape.dropout(attn);
            let r = tape.add(x, attn)?;
            x = self.ln(tape, b, r, &format!("{p}.ln1"))?;

            let hdn = self.linear(tape, b, x, &format!("{p}.ffn.in"))?;
            let hdn = tape.gelu(hdn);
            let out = self.linear(tape, b, hdn, &format!("{p}.ffn.out"))?;
            let out = tape.dropout(out);
            let r = tape.add(x, out)?;
            x = self.ln(tape, b, r, &format!("{p}.ln2"))?;
        }
        Ok(x)
    }

    /// `g`: `hidden + up(σ(down(hidden)))`, or without the residual term
    /// when `adapter_residual` is off.
    pub fn adapt(&self, tape: &mut Tape, b: &Bound, hidden: Var) -> Result<Var> {
        let width = tape.value(hidden).cols();
        if width != self.config.d_model {
            return Err(Error::shape(
                "adapter",
                format!("hidden width {width}, d_model {}", self.config.d_model),
            ));
        }
        let down = self.linear(tape, b, hidden, "adapter.down")?;
        let act = match self.config.adapter_nonlinearity {
            Nonlinearity::Relu => tape.relu(down),
            Nonlinearity::Gelu => tape.gelu(down),
        };
        let up = self.linear(tape, b, act, "adapter.up")?;
        if self.config.adapter_residual {
            tape.add(hidden, up)
        } else {
            Ok(up)
        }
    }

    /// `h`: per-token logits from the head of `task`.
    pub fn classify(&self, tape: &mut Tape, b: &Bound, hidden: Var, task: &str) -> Result<Var> {
        if !self.has_head(task) {
            return Err(Error::Lookup {
                kind: "task head",
                id: task.to_string(),
            });
        }
        self.linear(tape, b, hidden, &format!("head.{task}"))
    }

    /// Full composition; the adapter is skipped when the model has none.
    pub fn logits(&self, tape: &mut Tape, b: &Bound, tokens: &[usize], task: &str) -> Result<Var> {
        let h = self.encode(tape, b, tokens)?;
        let h = if self.has_adapter() {
            self.adapt(tape, b, h)?
        } else {
            h
        };
        self.classify(tape, b, h, task)
    }

    /// Mean token cross-entropy over a batch, skipping padding positions.
    pub fn loss_tape(
        &self,
        batch: &[Example],
        task: &str,
        grad_partitions: &[Partition],
    ) -> Result<(Tape, Var)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, grad_partitions);
        let mut all_logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for ex in batch {
            if ex.tokens.len() != ex.labels.len() {
                return Err(Error::Contract(format!(
                    "{} tokens with {} labels",
                    ex.tokens.len(),
                    ex.labels.len()
                )));
            }
            all_logits.push(self.logits(&mut tape, &b, &ex.tokens, task)?);
            targets.extend(
                ex.tokens
                    .iter()
                    .zip(&ex.labels)
                    .map(|(&t, &l)| (t != PAD_ID).then_some(l)),
            );
        }
        let logits = tape.concat_rows(&all_logits)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok((tape, loss))
    }

    pub fn loss_and_grad(
        &self,
        batch: &[Example],
        task: &str,
        grad_partitions: &[Partition],
    ) -> Result<(f64, Gradients)> {
        let (tape, loss) = self.loss_tape(batch, task, grad_partitions)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }

    pub fn loss(&self, batch: &[Example], task: &str) -> Result<f64> {
        let (tape, loss) = self.loss_tape(batch, task, &[])?;
        Ok(tape.value(loss).item())
    }

    /// Arg-max label per token.
    pub fn predict(&self, tokens: &[usize], task: &str) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, &[]);
        let logits = self.logits(&mut tape, &b, tokens, task)?;
        let v = tape.value(logits);
        Ok((0..v.rows())
            .map(|i| {
                let row = v.row(i);
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}
