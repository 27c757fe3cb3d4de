//! Priming: first-order, partition-aware meta-learning between pretraining
//! and parameter-efficient fine-tuning, plus the multi-task fine-tuning
//! baseline that sees the same data.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchCursor, Example, MetaTask};
use crate::error::{Error, Result};
use crate::finetune::seeded;
use crate::model::{head_bias_id, head_weight_id, PartitionedModel};
use crate::optim::{sgd_step, AdamW, AdamWConfig, LinearSchedule};
use crate::params::{ParameterRegistry, Partition};
use crate::tape::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InnerMode {
    /// Inner loop updates θ_a and θ_h only, as PE fine-tuning would.
    PeSim,
    /// Inner loop updates every partition (standard MAML).
    FullMaml,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrimingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub inner_mode: InnerMode,
    /// Inner learning rate for all partitions under `FullMaml`.
    pub alpha_full: f64,
    pub tasks_per_outer_batch: usize,
    pub outer_steps: usize,
    pub support_batch: usize,
    pub query_batch: usize,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for PrimingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            beta: 5e-5,
            inner_steps: 5,
            inner_mode: InnerMode::PeSim,
            alpha_full: 1e-4,
            tasks_per_outer_batch: 2,
            outer_steps: 200,
            support_batch: 8,
            query_batch: 8,
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl PrimingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha_full > 0.0) {
            return fail("priming learning rates must be positive");
        }
        if self.tasks_per_outer_batch == 0 {
            return fail("tasks_per_outer_batch must be at least 1");
        }
        if self.support_batch == 0 || self.query_batch == 0 {
            return fail("support_batch and query_batch must be positive");
        }
        Ok(())
    }

    pub fn inner_partitions(&self) -> Vec<Partition> {
        match self.inner_mode {
            InnerMode::PeSim => vec![Partition::Lightweight, Partition::Head],
            InnerMode::FullMaml => Partition::ALL.to_vec(),
        }
    }

    pub fn inner_lr(&self) -> f64 {
        match self.inner_mode {
            InnerMode::PeSim => self.alpha,
            InnerMode::FullMaml => self.alpha_full,
        }
    }
}

/// Partitions that receive the meta-gradient.
pub const OUTER_PARTITIONS: [Partition; 2] = [Partition::Pretrained, Partition::Lightweight];

/// Data drawn for one task of one outer step.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub task_id: String,
    pub support: Vec<Vec<Example>>,
    pub query: Vec<Example>,
}

/// Seeded task sampling and per-task batch cursors.
#[derive(Clone, Debug)]
pub struct TaskStreams {
    sampler: ChaCha8Rng,
    support: Vec<BatchCursor>,
    query: Vec<BatchCursor>,
}

impl TaskStreams {
    pub fn new(tasks: &[MetaTask], cfg: &PrimingConfig) -> Result<Self> {
        let mut support = Vec::new();
        let mut query = Vec::new();
        for (i, t) in tasks.iter().enumerate() {
            if t.support.is_empty() {
                return Err(Error::Data(format!("task `{}` has an empty support set", t.task_id)));
            }
            support.push(BatchCursor::new(t.support.len(), cfg.support_batch, seeded(cfg.seed, 1000 + 2 * i as u64).gen())?);
            query.push(BatchCursor::new(t.query.len(), cfg.query_batch, seeded(cfg.seed, 1001 + 2 * i as u64).gen())?);
        }
        Ok(Self {
            sampler: seeded(cfg.seed, 1),
            support,
            query,
        })
    }

    /// Task indices for one outer step: distinct when the batch fits in the
    /// task pool, with replacement otherwise.
    pub fn sample(&mut self, n_tasks: usize, k: usize) -> Vec<usize> {
        if k <= n_tasks {
            index::sample(&mut self.sampler, n_tasks, k).into_vec()
        } else {
            (0..k).map(|_| self.sampler.gen_range(0..n_tasks)).collect()
        }
    }

    pub fn next(&mut self, tasks: &[MetaTask], cfg: &PrimingConfig) -> Vec<TaskBatch> {
        self.sample(tasks.len(), cfg.tasks_per_outer_batch)
            .into_iter()
            .map(|i| {
                let t = &tasks[i];
                TaskBatch {
                    task_id: t.task_id.clone(),
                    support: (0..cfg.inner_steps).map(|_| self.support[i].next_batch(&t.support)).collect(),
                    query: self.query[i].next_batch(&t.query),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct InnerResult {
    pub adapted: PartitionedModel,
    pub support_losses: Vec<f64>,
}

/// S steps of SGD on the task's support batches from a copy of `model`,
/// cycling through `support` if it holds fewer than S batches.
pub fn inner_adapt(
    model: &PartitionedModel,
    task_id: &str,
    support: &[Vec<Example>],
    cfg: &PrimingConfig,
) -> Result<InnerResult> {
    let mut adapted = model.clone();
    let mut support_losses = Vec::with_capacity(cfg.inner_steps);
    if cfg.inner_steps == 0 {
        return Ok(InnerResult {
            adapted,
            support_losses,
        });
    }
    if support.is_empty() || support.iter().any(Vec::is_empty) {
        return Err(Error::Data(format!("task `{task_id}` has no support data")));
    }
    let parts = cfg.inner_partitions();
    let lr = cfg.inner_lr();
    for s in 0..cfg.inner_steps {
        let (loss, grads) = adapted.loss_and_grad(&support[s % support.len()], task_id, &parts)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("task {task_id}, inner step {s}"),
                loss,
            });
        }
        support_losses.push(loss);
        sgd_step(adapted.registry_mut(), &grads, lr, &parts)?;
    }
    Ok(InnerResult {
        adapted,
        support_losses,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub pretrained: f64,
    pub lightweight: f64,
    pub head: f64,
}

impl GradNorms {
    pub fn of(grads: &Gradients, registry: &ParameterRegistry) -> Self {
        let norm = |p: Partition| grads.norm_where(|id| registry.partition_of(id) == Some(p));
        Self {
            pretrained: norm(Partition::Pretrained),
            lightweight: norm(Partition::Lightweight),
            head: norm(Partition::Head),
        }
    }
}

/// One JSONL record per task per outer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub outer_step: usize,
    pub task_id: String,
    pub support_loss_per_inner_step: Vec<f64>,
    pub query_loss: f64,
    pub grad_norms: GradNorms,
    pub beta_current: f64,
}

#[derive(Clone, Debug)]
pub struct OuterStepResult {
    /// Σ_i ∇L(θ^i; D^ts_i) over θ_p and θ_a, summed in batch order.
    pub meta_grad: Gradients,
    pub records: Vec<StepLog>,
}

/// One outer iteration: adapt every task from the same θ, sum the query
/// gradients taken at the adapted points, apply them to θ_p and θ_a with
/// AdamW, then hand the first task's adapted head back to θ_h.
pub fn outer_step(
    model: &mut PartitionedModel,
    batch: &[TaskBatch],
    cfg: &PrimingConfig,
    opt: &mut AdamW,
    lr: f64,
    step: usize,
) -> Result<OuterStepResult> {
    if batch.is_empty() {
        return Err(Error::Contract("outer step with an empty task batch".into()));
    }
    let query_parts = [Partition::Pretrained, Partition::Lightweight, Partition::Head];
    let base = &*model;
    let per_task: Vec<(InnerResult, f64, Gradients)> = batch
        .par_iter()
        .map(|t| -> Result<_> {
            let inner = inner_adapt(base, &t.task_id, &t.support, cfg)?;
            let (loss, grads) = inner.adapted.loss_and_grad(&t.query, &t.task_id, &query_parts)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("outer step {step}, task {}, query", t.task_id),
                    loss,
                });
            }
            Ok((inner, loss, grads))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::NonFinite { context, loss } => Error::NonFinite {
                context: format!("outer step {step}: {context}"),
                loss,
            },
            other => other,
        })?;

    let registry = model.registry();
    let mut meta_grad = Gradients::new();
    let mut records = Vec::with_capacity(batch.len());
    for (t, (inner, loss, grads)) in batch.iter().zip(&per_task) {
        records.push(StepLog {
            outer_step: step,
            task_id: t.task_id.clone(),
            support_loss_per_inner_step: inner.support_losses.clone(),
            query_loss: *loss,
            grad_norms: GradNorms::of(grads, registry),
            beta_current: lr,
        });
        let mut g = grads.clone();
        g.retain(|id| registry.partition_of(id).is_some_and(|p| OUTER_PARTITIONS.contains(&p)));
        if meta_grad.is_empty() {
            meta_grad = g;
        } else {
            meta_grad.add_assign(&g)?;
        }
    }
    opt.step(model.registry_mut(), &meta_grad, lr, &OUTER_PARTITIONS)?;

    let first = &batch[0].task_id;
    let adapted = per_task[0].0.adapted.registry();
    for id in [head_weight_id(first), head_bias_id(first)] {
        model.registry_mut().get_mut(&id).expect("head exists").value = adapted.value(&id)?.clone();
    }
    Ok(OuterStepResult { meta_grad, records })
}

#[derive(Clone, Debug)]
pub struct PrimingOutcome {
    /// The input model with primed θ_p and θ_a; its heads are untouched.
    pub model: PartitionedModel,
    /// Final per-source heads, kept for inspection only.
    pub heads: ParameterRegistry,
    pub log: Vec<StepLog>,
}

fn with_source_heads(model: &PartitionedModel, tasks: &[MetaTask], seed: u64) -> Result<PartitionedModel> {
    if tasks.is_empty() {
        return Err(Error::Data("priming needs at least one source task".into()));
    }
    if !model.has_adapter() {
        return Err(Error::Contract("priming needs a model with an adapter".into()));
    }
    let mut work = model.clone();
    work.remove_heads();
    let mut rng = seeded(seed, 2);
    for t in tasks {
        if !work.has_head(&t.task_id) {
            work.add_head(&t.task_id, &mut rng)?;
        }
    }
    Ok(work)
}

fn finish(input: &PartitionedModel, work: PartitionedModel, log: Vec<StepLog>) -> Result<PrimingOutcome> {
    let mut model = input.clone();
    model.registry_mut().copy_from(work.registry(), &OUTER_PARTITIONS)?;
    let mut heads = ParameterRegistry::new();
    for p in work.registry().iter() {
        if p.partition() == Partition::Head {
            heads.insert(p.clone())?;
        }
    }
    Ok(PrimingOutcome { model, heads, log })
}

/// Runs `cfg.outer_steps` outer iterations with fresh per-source heads.
/// `on_step` sees each step's records as they are produced.
pub fn prime_with(
    model: &PartitionedModel,
    tasks: &[MetaTask],
    cfg: &PrimingConfig,
    mut on_step: impl FnMut(&[StepLog]) -> Result<()>,
) -> Result<PrimingOutcome> {
    cfg.validate()?;
    let mut work = with_source_heads(model, tasks, cfg.seed)?;
    let mut streams = TaskStreams::new(tasks, cfg)?;
    let mut opt = AdamW::new(cfg.adamw);
    let schedule = LinearSchedule::new(cfg.beta, cfg.outer_steps);
    let mut log = Vec::new();
    for step in 0..cfg.outer_steps {
        let batch = streams.next(tasks, cfg);
        let r = outer_step(&mut work, &batch, cfg, &mut opt, schedule.at(step), step + 1)?;
        on_step(&r.records)?;
        log.extend(r.records);
    }
    finish(model, work, log)
}

pub fn prime(model: &PartitionedModel, tasks: &[MetaTask], cfg: &PrimingConfig) -> Result<PrimingOutcome> {
    prime_with(model, tasks, cfg, |_| Ok(()))
}

/// Multi-task AdamW on all partitions over each source's support and query
/// data, one batch per sampled task per step, same schedule and step budget
/// as priming.
pub fn ft_prime_with(
    model: &PartitionedModel,
    tasks: &[MetaTask],
    cfg: &PrimingConfig,
    mut on_step: impl FnMut(&[StepLog]) -> Result<()>,
) -> Result<PrimingOutcome> {
    cfg.validate()?;
    let mut work = with_source_heads(model, tasks, cfg.seed)?;
    let pooled: Vec<Vec<Example>> = tasks
        .iter()
        .map(|t| t.support.iter().chain(&t.query).cloned().collect())
        .collect();
    let mut cursors = pooled
        .iter()
        .enumerate()
        .map(|(i, d)| BatchCursor::new(d.len(), cfg.support_batch, seeded(cfg.seed, 1000 + 2 * i as u64).gen()))
        .collect::<Result<Vec<_>>>()?;
    let mut streams = TaskStreams::new(tasks, cfg)?;
    let mut opt = AdamW::new(cfg.adamw);
    let schedule = LinearSchedule::new(cfg.beta, cfg.outer_steps);
    let parts = Partition::ALL;
    let mut log = Vec::new();
    for step in 0..cfg.outer_steps {
        let lr = schedule.at(step);
        let picks = streams.sample(tasks.len(), cfg.tasks_per_outer_batch);
        let batches: Vec<_> = picks.iter().map(|&i| cursors[i].next_batch(&pooled[i])).collect();
        let results = picks
            .par_iter()
            .zip(&batches)
            .map(|(&i, b)| work.loss_and_grad(b, &tasks[i].task_id, &parts))
            .collect::<Result<Vec<_>>>()?;
        let mut total = Gradients::new();
        let mut records = Vec::new();
        for (&i, (loss, grads)) in picks.iter().zip(&results) {
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("fine-tuning priming step {}, task {}", step + 1, tasks[i].task_id),
                    loss: *loss,
                });
            }
            records.push(StepLog {
                outer_step: step + 1,
                task_id: tasks[i].task_id.clone(),
                support_loss_per_inner_step: Vec::new(),
                query_loss: *loss,
                grad_norms: GradNorms::of(grads, work.registry()),
                beta_current: lr,
            });
            if total.is_empty() {
                total = grads.clone();
            } else {
                total.add_assign(grads)?;
            }
        }
        opt.step(work.registry_mut(), &total, lr, &parts)?;
        on_step(&records)?;
        log.extend(records);
    }
    finish(model, work, log)
}

pub fn ft_prime(model: &PartitionedModel, tasks: &[MetaTask], cfg: &PrimingConfig) -> Result<PrimingOutcome> {
    ft_prime_with(model, tasks, cfg, |_| Ok(()))
}
