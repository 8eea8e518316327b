//! Sequential task training and evaluation.
//!
//! One `SequenceState` owns everything a task sequence mutates: the model,
//! the mask store, the attention parameters, and the optimizer. Training a
//! task walks its batches with the annealing schedule, builds every task
//! view, assembles the objectives under the ablation flags, protects
//! gradients of units claimed by earlier tasks, and finalizes the task's
//! masks at the end. Evaluation runs without task ids (every test example
//! under the last task's gates) or with them (each task under its own).
//!
//! Independent sequence seeds and ablation cells run in parallel when the
//! `parallel` feature is on; each holds fully isolated state and the
//! results are sorted by seed before aggregation.

use crate::attention::{cks_view, AttentionParams};
use crate::data::{batch_iter, BatchMode, EncodedBatch, Example, TaskDataset};
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, ced_loss, cks_loss, csc_loss, total_loss, LossWeights, Reduction,
};
use crate::masks::{protect_bias_gradient, protect_weight_gradient, protection_factor, MaskStore, TaskEmbedding};
use crate::metrics::{accuracy, macro_f1, MetricsReport, PhaseMetrics, SequenceReport, TaskMetrics};
use crate::model::{AdapterModel, MaskedBy, ModelConfig, ParamId, TaskView};
use crate::optim::{clip_grad_norm, Adam, AdamConfig, SlotId};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    /// Masks, protection, and all contrastive objectives.
    Classic,
    /// Same architecture, sequential training, cross entropy only, no
    /// masks, no protection.
    Ncl,
    /// A fresh model per task, cross entropy only; forward metrics only.
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// No task id at test time: every example under the last task's gates.
    Dil,
    /// Task id given: each task's test set under its own gates.
    Til,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_csc: bool,
    pub no_ced: bool,
    pub no_cks: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub ablation: AblationFlags,
    pub baseline: BaselineMode,
    pub eval_mode: EvalMode,
    pub teacher_grad: bool,
    pub s_max: f64,
    pub loss_reduction: Reduction,
    pub sequence_seeds: Vec<u64>,
    /// Early stop on validation cross entropy with this patience;
    /// 0 disables it and the paper's fixed epoch count applies.
    pub early_stop_patience: usize,
    /// Clip task-embedding gradients to unit norm.
    pub clip_embedding_grad: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            ablation: AblationFlags::default(),
            baseline: BaselineMode::Classic,
            eval_mode: EvalMode::Dil,
            teacher_grad: false,
            s_max: 400.0,
            loss_reduction: Reduction::Sum,
            sequence_seeds: vec![1, 2, 3, 4, 5],
            early_stop_patience: 0,
            clip_embedding_grad: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidArg("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArg("batch_size must be >= 2".into()));
        }
        if self.s_max <= 0.0 {
            return Err(Error::InvalidArg("s_max must be positive".into()));
        }
        if self.sequence_seeds.is_empty() {
            return Err(Error::InvalidArg("at least one sequence seed is required".into()));
        }
        Ok(())
    }

    /// Stable digest of the full configuration, for the metrics document.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub task: usize,
    pub epoch: usize,
    pub batch: usize,
    pub ce: f64,
    pub csc: Option<f64>,
    pub ced: Option<f64>,
    pub cks: Option<f64>,
    pub total: f64,
    pub s: f64,
}

/// A task's splits as held by the harness. The training split is dropped
/// the moment its task finishes: continual learning retains no old
/// training data.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    train: Option<Vec<Example>>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    pub fn from_dataset(d: &TaskDataset) -> Self {
        TaskData {
            name: d.name.clone(),
            train: Some(d.train.clone()),
            valid: d.valid.clone(),
            test: d.test.clone(),
        }
    }

    pub fn train_retained(&self) -> bool {
        self.train.is_some()
    }
}

fn sub_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut r = Rng::new(seed);
    for &t in tags {
        r = r.fork(t);
    }
    r.next_u64()
}

/// Everything one task sequence mutates.
pub struct SequenceState {
    pub config: RunConfig,
    pub sequence_seed: u64,
    pub model: AdapterModel,
    pub mask_store: MaskStore,
    pub attention: AttentionParams,
    optimizer: Adam,
    model_slots: BTreeMap<ParamId, SlotId>,
    attention_slots: [SlotId; 5],
    pub logs: Vec<LogRow>,
}

impl SequenceState {
    pub fn new(config: RunConfig, sequence_seed: u64) -> Result<Self> {
        config.validate()?;
        let model = AdapterModel::init(config.model.clone())?;
        let mask_store = MaskStore::new(model.mask_layout().clone());
        let mut att_rng = Rng::new(config.model.seed).fork(0x4154_544e);
        let attention = AttentionParams::init(config.model.d_model, &mut att_rng);
        Self::assemble(config, sequence_seed, model, mask_store, attention)
    }

    /// Rebuild a state from checkpoint parts (fresh optimizer; evaluation
    /// and reporting only).
    pub fn from_checkpoint_parts(
        config: RunConfig,
        sequence_seed: u64,
        model: AdapterModel,
        mask_store: MaskStore,
        attention: AttentionParams,
    ) -> Result<Self> {
        Self::assemble(config, sequence_seed, model, mask_store, attention)
    }

    fn assemble(
        config: RunConfig,
        sequence_seed: u64,
        model: AdapterModel,
        mask_store: MaskStore,
        attention: AttentionParams,
    ) -> Result<Self> {
        let mut optimizer = Adam::new(AdamConfig { ..config.adam });
        let mut model_slots = BTreeMap::new();
        for (id, p) in model.params.iter() {
            if p.trainable {
                model_slots.insert(id, optimizer.register(p.value.len()));
            }
        }
        let attention_slots = [
            optimizer.register(attention.w_f.len()),
            optimizer.register(attention.w_g.len()),
            optimizer.register(attention.w_v.len()),
            optimizer.register(attention.w_q.len()),
            optimizer.register(attention.gamma.len()),
        ];
        Ok(SequenceState {
            config,
            sequence_seed,
            model,
            mask_store,
            attention,
            optimizer,
            model_slots,
            attention_slots,
            logs: Vec::new(),
        })
    }

    /// Per-element gradient scale for every masked adapter parameter,
    /// derived from the accumulated protection mask. Exact zeros mark
    /// protected elements.
    pub fn protection_factors(&self) -> BTreeMap<ParamId, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (id, p) in self.model.params.iter() {
            if let MaskedBy::Units { layer, in_dim } = p.masked_by {
                let acc = self.mask_store.accumulated(layer);
                let width = acc.len();
                let mut factors = Vec::with_capacity(in_dim * width);
                for _ in 0..in_dim {
                    factors.extend(acc.iter().map(|&m| protection_factor(m)));
                }
                debug_assert_eq!(factors.len(), p.value.len());
                out.insert(id, factors);
            }
        }
        out
    }

    fn uses_masks(&self) -> bool {
        self.config.baseline == BaselineMode::Classic
    }

    /// Live annealed gates for the current task's embeddings.
    fn live_masks(
        &self,
        tape: &mut Tape,
        embedding: &TaskEmbedding,
        s: f64,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut emb_vars = Vec::with_capacity(embedding.layers.len());
        let mut mask_vars = Vec::with_capacity(embedding.layers.len());
        for e in &embedding.layers {
            let leaf = tape.leaf(crate::tensor::Tensor::from_vec(e.clone()));
            let scaled = tape.scale(leaf, s)?;
            let gate = tape.sigmoid(scaled)?;
            emb_vars.push(leaf);
            mask_vars.push(gate);
        }
        Ok((emb_vars, mask_vars))
    }

    /// Train one task (position `t` in the sequence). The training split is
    /// consumed; the harness keeps no reference to it afterwards.
    pub fn train_task(&mut self, data: &mut TaskData, t: usize) -> Result<()> {
        let train = data
            .train
            .take()
            .ok_or_else(|| Error::InvalidArg(format!("training data for {} already consumed", data.name)))?;
        let cfg = self.config.clone();
        let classic = self.uses_masks();

        let mut embedding = if classic {
            let mut rng = Rng::new(self.sequence_seed).fork(0x454d_4200).fork(t as u64);
            Some(TaskEmbedding::init(t, self.model.mask_layout(), &mut rng))
        } else {
            None
        };
        let embedding_slots: Vec<SlotId> = match &embedding {
            Some(e) => e.layers.iter().map(|l| self.optimizer.register(l.len())).collect(),
            None => Vec::new(),
        };
        let factors = self.protection_factors();
        // moments of newly protected elements are stale ballast; clear them
        for (id, f) in &factors {
            self.optimizer.reset_protected(self.model_slots[id], f);
        }

        let mut best_val = f64::INFINITY;
        let mut since_best = 0usize;
        'epochs: for epoch in 0..cfg.epochs {
            let shuffle = sub_seed(self.sequence_seed, &[0xba7c_4000, t as u64, epoch as u64]);
            let (batches, _) = batch_iter(
                &train,
                t,
                cfg.batch_size,
                cfg.model.vocab_buckets,
                cfg.model.max_len,
                BatchMode::Train,
                shuffle,
            )?;
            let total_batches = batches.len();
            for (bi, batch) in batches.iter().enumerate() {
                let b = bi + 1;
                let s = crate::masks::anneal(b, total_batches, cfg.s_max)?;
                let mut step_rng = Rng::new(sub_seed(
                    self.sequence_seed,
                    &[0xd809_0000, t as u64, epoch as u64, b as u64],
                ));
                let row = self.train_step(batch, t, embedding.as_mut(), &embedding_slots, &factors, s, epoch, b, &mut step_rng)?;
                self.logs.push(row);
            }

            if cfg.early_stop_patience > 0 {
                let val_ce = self.validation_ce(&data.valid, t, embedding.as_ref())?;
                if val_ce + 1e-12 < best_val {
                    best_val = val_ce;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.early_stop_patience {
                        break 'epochs;
                    }
                }
            }
        }

        if let Some(e) = embedding {
            self.mask_store.finalize_task(&e, cfg.s_max)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &mut self,
        batch: &EncodedBatch,
        t: usize,
        embedding: Option<&mut TaskEmbedding>,
        embedding_slots: &[SlotId],
        factors: &BTreeMap<ParamId, Vec<f64>>,
        s: f64,
        epoch: usize,
        b: usize,
        rng: &mut Rng,
    ) -> Result<LogRow> {
        let cfg = self.config.clone();
        let classic = self.uses_masks();
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);

        let (emb_vars, views): (Vec<Var>, Vec<TaskView>) = if classic {
            let e = embedding.as_ref().unwrap();
            let (emb_vars, mask_vars) = self.live_masks(&mut tape, e, s)?;
            let views = bound.multi_view_forward(
                &mut tape,
                batch,
                &self.mask_store,
                t,
                Some(&mask_vars),
                cfg.teacher_grad,
                true,
                rng,
            )?;
            (emb_vars, views)
        } else {
            let view = bound.forward(&mut tape, batch, t, None, true, rng)?;
            (Vec::new(), vec![view])
        };
        let current = *views.last().unwrap();

        let ce = ce_loss(&mut tape, current.z, &batch.labels)?;
        let csc = if classic && !cfg.ablation.no_csc {
            Some(csc_loss(&mut tape, current.h, &batch.labels, cfg.weights.tau, cfg.loss_reduction)?)
        } else {
            None
        };
        let ced = if classic && !cfg.ablation.no_ced {
            Some(ced_loss(&mut tape, &views, cfg.weights.tau, cfg.teacher_grad, cfg.loss_reduction)?)
        } else {
            None
        };
        let (cks, att_bound) = if classic && !cfg.ablation.no_cks {
            let att = self.attention.bind(&mut tape);
            let hs: Vec<Var> = views.iter().map(|v| v.h).collect();
            let shared = cks_view(&mut tape, &hs, &att)?;
            (
                Some(cks_loss(&mut tape, shared.h, current.h, &batch.labels, cfg.weights.tau, cfg.loss_reduction)?),
                Some(att),
            )
        } else {
            (None, None)
        };
        let (total, breakdown) = total_loss(&mut tape, ce, csc, ced, cks, &cfg.weights)?;
        tape.backward(total)?;

        // gather gradients while the tape and binding are alive, apply
        // protection, then release the model borrow before mutating
        let mut updates: Vec<(ParamId, SlotId, Vec<f64>, bool)> = Vec::with_capacity(self.model_slots.len());
        for (&id, &slot) in &self.model_slots {
            let var = bound.var(id);
            let mut grad = tape.grad_or_zeros(var);
            let protected = classic && factors.contains_key(&id);
            if protected {
                if let MaskedBy::Units { layer, in_dim } = self.model.params.get(id).masked_by {
                    let acc = self.mask_store.accumulated(layer).to_vec();
                    if in_dim == 1 {
                        protect_bias_gradient(&mut grad, &acc)?;
                    } else {
                        protect_weight_gradient(&mut grad, in_dim, acc.len(), &acc)?;
                    }
                }
            }
            updates.push((id, slot, grad, protected));
        }
        let att_grads = att_bound.map(|att| {
            [
                tape.grad_or_zeros(att.w_f),
                tape.grad_or_zeros(att.w_g),
                tape.grad_or_zeros(att.w_v),
                tape.grad_or_zeros(att.w_q),
                tape.grad_or_zeros(att.gamma),
            ]
        });
        drop(bound);

        self.optimizer.step_begin();
        for (id, slot, grad, protected) in updates {
            let f = if protected { factors.get(&id).map(|f| f.as_slice()) } else { None };
            let value = self.model.params.get_mut(id).value.data_mut();
            self.optimizer.update(slot, value, &grad, f);
        }
        // attention parameters train only when the sharing objective ran
        if let Some(grads) = att_grads {
            let tensors = [
                &mut self.attention.w_f,
                &mut self.attention.w_g,
                &mut self.attention.w_v,
                &mut self.attention.w_q,
                &mut self.attention.gamma,
            ];
            for ((tensor, grad), &slot) in tensors.into_iter().zip(&grads).zip(&self.attention_slots) {
                self.optimizer.update(slot, tensor.data_mut(), grad, None);
            }
        }
        // the current task's gate embeddings
        if let Some(e) = embedding {
            for ((layer, &var), &slot) in e.layers.iter_mut().zip(&emb_vars).zip(embedding_slots) {
                let mut grad = tape.grad_or_zeros(var);
                if cfg.clip_embedding_grad {
                    clip_grad_norm(&mut grad, 1.0);
                }
                self.optimizer.update(slot, layer, &grad, None);
            }
        }

        Ok(LogRow {
            task: t,
            epoch,
            batch: b,
            ce: breakdown.ce,
            csc: breakdown.csc,
            ced: breakdown.ced,
            cks: breakdown.cks,
            total: breakdown.total,
            s,
        })
    }

    /// Cross entropy on a validation split under the current task's gates
    /// evaluated at s_max (test-time semantics), dropout off.
    fn validation_ce(
        &self,
        valid: &[Example],
        t: usize,
        embedding: Option<&TaskEmbedding>,
    ) -> Result<f64> {
        let cfg = &self.config;
        let (batches, _) = batch_iter(
            valid,
            t,
            cfg.batch_size,
            cfg.model.vocab_buckets,
            cfg.model.max_len,
            BatchMode::Eval,
            0,
        )?;
        let mut rng = Rng::new(0);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            let mut tape = Tape::new();
            tape.set_grad_enabled(false);
            let bound = self.model.bind(&mut tape);
            let masks = match embedding {
                Some(e) => {
                    let (_, m) = self.live_masks(&mut tape, e, cfg.s_max)?;
                    Some(m)
                }
                None => None,
            };
            let view = bound.forward(&mut tape, batch, t, masks.as_deref(), false, &mut rng)?;
            let ce = ce_loss(&mut tape, view.z, &batch.labels)?;
            total += tape.value(ce).item() * batch.n as f64;
            count += batch.n;
        }
        Ok(total / count.max(1) as f64)
    }

    /// Predictions for one task's examples under a stored mask (None means
    /// the unmasked forward).
    fn predict(&self, examples: &[Example], task_for_mask: Option<usize>) -> Result<Vec<usize>> {
        let cfg = &self.config;
        let (batches, _) = batch_iter(
            examples,
            task_for_mask.unwrap_or(0),
            cfg.batch_size,
            cfg.model.vocab_buckets,
            cfg.model.max_len,
            BatchMode::Eval,
            0,
        )?;
        let mut rng = Rng::new(0);
        let mut predictions = Vec::with_capacity(examples.len());
        for batch in &batches {
            let mut tape = Tape::new();
            tape.set_grad_enabled(false);
            let bound = self.model.bind(&mut tape);
            let masks = match task_for_mask {
                Some(id) => Some(bound.stored_mask_vars(&mut tape, &self.mask_store, id)?),
                None => None,
            };
            let view = bound.forward(&mut tape, batch, batch.task_id, masks.as_deref(), false, &mut rng)?;
            for row in tape.value(view.z).data().chunks(3) {
                let mut best = 0usize;
                for c in 1..3 {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                predictions.push(best);
            }
        }
        Ok(predictions)
    }

    /// The masked `[CLS]` representation of a fixed probe batch under a
    /// finalized task's stored gates. Used to verify that earlier tasks'
    /// views are untouched by later training.
    pub fn masked_representation(&self, batch: &EncodedBatch, task_id: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let bound = self.model.bind(&mut tape);
        let masks = bound.stored_mask_vars(&mut tape, &self.mask_store, task_id)?;
        let mut rng = Rng::new(0);
        let view = bound.forward(&mut tape, batch, task_id, Some(&masks), false, &mut rng)?;
        Ok(tape.value(view.h).data().to_vec())
    }

    /// Evaluate finalized state over the given tasks.
    ///
    /// Domain-incremental mode classifies everything under the last task's
    /// gates; task-incremental mode uses each task's own gates.
    pub fn evaluate(&self, tasks: &[TaskData], mode: EvalMode) -> Result<PhaseMetrics> {
        let mask_tasks: Vec<Option<usize>> = match (self.uses_masks(), mode) {
            (false, _) => vec![None; tasks.len()],
            (true, EvalMode::Dil) => {
                let last = self.mask_store.task_ids().into_iter().max().ok_or_else(|| {
                    Error::InvalidArg("evaluate needs at least one finalized task".into())
                })?;
                vec![Some(last); tasks.len()]
            }
            (true, EvalMode::Til) => {
                let ids = self.mask_store.task_ids();
                if ids.len() < tasks.len() {
                    return Err(Error::InvalidArg(format!(
                        "task-incremental evaluation needs every task finalized: {} of {}",
                        ids.len(),
                        tasks.len()
                    )));
                }
                ids.into_iter().take(tasks.len()).map(Some).collect()
            }
        };
        let mut per_task = Vec::with_capacity(tasks.len());
        for (task, mask) in tasks.iter().zip(mask_tasks) {
            let predictions = self.predict(&task.test, mask)?;
            let gold: Vec<usize> = task.test.iter().map(|e| e.label).collect();
            per_task.push(TaskMetrics {
                task: task.name.clone(),
                accuracy: accuracy(&predictions, &gold)?,
                macro_f1: macro_f1(&predictions, &gold)?,
                examples: gold.len(),
            });
        }
        Ok(PhaseMetrics::from_tasks(per_task))
    }

    /// Metrics for a single task right after it was learned.
    pub fn evaluate_current(&self, task: &TaskData, t: usize) -> Result<TaskMetrics> {
        let mask = if self.uses_masks() { Some(t) } else { None };
        let predictions = self.predict(&task.test, mask)?;
        let gold: Vec<usize> = task.test.iter().map(|e| e.label).collect();
        Ok(TaskMetrics {
            task: task.name.clone(),
            accuracy: accuracy(&predictions, &gold)?,
            macro_f1: macro_f1(&predictions, &gold)?,
            examples: gold.len(),
        })
    }
}

/// The outcome of one full sequence.
pub struct TrainedSequence {
    pub state: SequenceState,
    pub report: SequenceReport,
    pub tasks: Vec<TaskData>,
}

/// Train every task once, in the order drawn from `seed`.
pub fn train_sequence(config: &RunConfig, suite: &[TaskDataset], seed: u64) -> Result<TrainedSequence> {
    config.validate()?;
    if suite.is_empty() {
        return Err(Error::InvalidArg("no tasks to train".into()));
    }
    let order = Rng::new(seed).fork(0x6f72_6465).permutation(suite.len());
    let mut tasks: Vec<TaskData> =
        order.iter().map(|&i| TaskData::from_dataset(&suite[i])).collect();
    let order_names: Vec<String> = tasks.iter().map(|t| t.name.clone()).collect();

    let mut forward = Vec::with_capacity(tasks.len());
    match config.baseline {
        BaselineMode::One => {
            // a separate model per task; no sequence-level final metrics
            let mut logs = Vec::new();
            let mut last_state = None;
            for (t, task) in tasks.iter_mut().enumerate() {
                let mut state = SequenceState::new(config.clone(), seed)?;
                state.train_task(task, t)?;
                forward.push(state.evaluate_current(task, t)?);
                logs.append(&mut state.logs);
                last_state = Some(state);
            }
            let mut state = last_state.unwrap();
            state.logs = logs;
            Ok(TrainedSequence {
                state,
                report: SequenceReport {
                    seed,
                    order: order_names,
                    forward: PhaseMetrics::from_tasks(forward),
                    final_: None,
                },
                tasks,
            })
        }
        _ => {
            let mut state = SequenceState::new(config.clone(), seed)?;
            for (t, task) in tasks.iter_mut().enumerate() {
                state.train_task(task, t)?;
                forward.push(state.evaluate_current(task, t)?);
                debug_assert!(!task.train_retained());
            }
            let final_ = state.evaluate(&tasks, config.eval_mode)?;
            Ok(TrainedSequence {
                state,
                report: SequenceReport {
                    seed,
                    order: order_names,
                    forward: PhaseMetrics::from_tasks(forward),
                    final_: Some(final_),
                },
                tasks,
            })
        }
    }
}

/// The result of a full run over every configured sequence seed.
pub struct RunOutput {
    pub report: MetricsReport,
    pub sequences: Vec<TrainedSequence>,
}

fn mode_name(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Dil => "dil",
        EvalMode::Til => "til",
    }
}

fn baseline_name(mode: BaselineMode) -> &'static str {
    match mode {
        BaselineMode::Classic => "classic",
        BaselineMode::Ncl => "ncl",
        BaselineMode::One => "one",
    }
}

/// Run every sequence seed (in parallel when available) and aggregate.
pub fn run(config: &RunConfig, suite: &[TaskDataset]) -> Result<RunOutput> {
    config.validate()?;
    let mut seeds = config.sequence_seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();

    #[cfg(feature = "parallel")]
    let results: Vec<Result<TrainedSequence>> =
        seeds.par_iter().map(|&seed| train_sequence(config, suite, seed)).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<TrainedSequence>> =
        seeds.iter().map(|&seed| train_sequence(config, suite, seed)).collect();

    let mut sequences = Vec::with_capacity(results.len());
    for r in results {
        sequences.push(r?);
    }
    sequences.sort_by_key(|s| s.report.seed);
    let report = MetricsReport::assemble(
        config.digest(),
        mode_name(config.eval_mode).to_string(),
        baseline_name(config.baseline).to_string(),
        sequences.iter().map(|s| s.report.clone()).collect(),
    );
    Ok(RunOutput { report, sequences })
}

/// The ablation grid: the full model plus every combination of removed
/// contrastive objectives.
pub fn ablation_grid() -> Vec<(&'static str, AblationFlags)> {
    vec![
        ("full", AblationFlags { no_csc: false, no_ced: false, no_cks: false }),
        ("-CSC", AblationFlags { no_csc: true, no_ced: false, no_cks: false }),
        ("-CKS", AblationFlags { no_csc: false, no_ced: false, no_cks: true }),
        ("-CED", AblationFlags { no_csc: false, no_ced: true, no_cks: false }),
        ("-CKS,-CED", AblationFlags { no_csc: false, no_ced: true, no_cks: true }),
        ("-CKS,-CSC", AblationFlags { no_csc: true, no_ced: false, no_cks: true }),
        ("-CED,-CSC", AblationFlags { no_csc: true, no_ced: true, no_cks: false }),
        ("-CED,-CKS,-CSC", AblationFlags { no_csc: true, no_ced: true, no_cks: true }),
    ]
}

/// One run per ablation row, shared seeds.
pub fn ablate(config: &RunConfig, suite: &[TaskDataset]) -> Result<Vec<(String, MetricsReport)>> {
    let mut out = Vec::new();
    for (name, flags) in ablation_grid() {
        let cell = RunConfig { ablation: flags, ..config.clone() };
        let result = run(&cell, suite)?;
        out.push((name.to_string(), result.report));
    }
    Ok(out)
}

/// Attention weights over tasks for a probe batch (the first evaluation
/// batch of the last-trained task's test split), as a JSON value.
pub fn dump_attention(state: &SequenceState, tasks: &[TaskData]) -> Result<serde_json::Value> {
    let ids = state.mask_store.task_ids();
    if ids.is_empty() {
        return Err(Error::InvalidArg("attention dump needs at least one finalized task".into()));
    }
    let probe_task = *ids.last().unwrap();
    let cfg = &state.config;
    let test = &tasks
        .get(probe_task)
        .ok_or_else(|| Error::InvalidArg(format!("no task data at position {probe_task}")))?
        .test;
    let (batches, _) = batch_iter(
        test,
        probe_task,
        cfg.batch_size,
        cfg.model.vocab_buckets,
        cfg.model.max_len,
        BatchMode::Eval,
        0,
    )?;
    let batch = &batches[0];

    let mut tape = Tape::new();
    tape.set_grad_enabled(false);
    let bound = state.model.bind(&mut tape);
    let mut rng = Rng::new(0);
    let mut views = Vec::with_capacity(ids.len());
    for &id in &ids {
        let masks = bound.stored_mask_vars(&mut tape, &state.mask_store, id)?;
        let view = bound.forward(&mut tape, batch, id, Some(&masks), false, &mut rng)?;
        views.push(view.h);
    }
    let att = state.attention.bind(&mut tape);
    let shared = cks_view(&mut tape, &views, &att)?;

    let alpha: Vec<Vec<Vec<f64>>> = shared
        .alpha
        .iter()
        .map(|a| a.data().chunks(ids.len()).map(|row| row.to_vec()).collect())
        .collect();
    Ok(serde_json::json!({
        "tasks": ids,
        "probe_task": probe_task,
        "batch_size": batch.n,
        "gamma": state.attention.gamma.item(),
        "alpha": alpha,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_suite, SyntheticSpec};

    fn tiny_config() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                vocab_buckets: 128,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                ffn_dim: 32,
                adapter_dim: 12,
                max_len: 24,
                dropout_p: 0.1,
                train_layer_norm: true,
                seed: 7,
            backbone_file: None,
            },
            epochs: 2,
            batch_size: 16,
            adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
            sequence_seeds: vec![1],
            ..RunConfig::default()
        }
    }

    fn tiny_suite() -> Vec<TaskDataset> {
        generate_synthetic_suite(&SyntheticSpec {
            seed: 21,
            n_tasks: 2,
            examples_per_task: 48,
            flip_fraction: 0.5,
        })
        .unwrap()
    }

    #[test]
    fn classic_sequence_trains_and_reports() {
        let suite = tiny_suite();
        let out = run(&tiny_config(), &suite).unwrap();
        assert_eq!(out.report.per_sequence.len(), 1);
        let seq = &out.report.per_sequence[0];
        assert_eq!(seq.forward.per_task.len(), 2);
        assert!(seq.final_.is_some());
        assert_eq!(out.sequences[0].state.mask_store.len(), 2);
        // training data consumed, evaluation data retained
        for task in &out.sequences[0].tasks {
            assert!(!task.train_retained());
            assert!(!task.test.is_empty());
        }
        // log rows carry every component for the classic baseline
        let row = &out.sequences[0].state.logs[0];
        assert!(row.csc.is_some() && row.ced.is_some() && row.cks.is_some());
        // first task: distillation has no teachers yet
        assert_eq!(row.ced, Some(0.0));
    }

    #[test]
    fn ncl_is_ce_only_and_maskless() {
        let suite = tiny_suite();
        let config = RunConfig { baseline: BaselineMode::Ncl, ..tiny_config() };
        let out = run(&config, &suite).unwrap();
        let state = &out.sequences[0].state;
        assert_eq!(state.mask_store.len(), 0);
        for row in &state.logs {
            assert!(row.csc.is_none() && row.ced.is_none() && row.cks.is_none());
            assert_eq!(row.total, row.ce);
        }
        assert!(out.report.final_.is_some());
    }

    #[test]
    fn one_baseline_reports_forward_only() {
        let suite = tiny_suite();
        let config = RunConfig { baseline: BaselineMode::One, ..tiny_config() };
        let out = run(&config, &suite).unwrap();
        assert!(out.report.final_.is_none());
        assert_eq!(out.report.per_sequence[0].forward.per_task.len(), 2);
    }

    #[test]
    fn all_ablation_flags_reduce_total_to_ce() {
        let suite = tiny_suite();
        let config = RunConfig {
            ablation: AblationFlags { no_csc: true, no_ced: true, no_cks: true },
            ..tiny_config()
        };
        let out = run(&config, &suite).unwrap();
        for row in &out.sequences[0].state.logs {
            assert_eq!(row.total.to_bits(), row.ce.to_bits());
        }
        // masks still trained and finalized: masks-only ablation
        assert_eq!(out.sequences[0].state.mask_store.len(), 2);
    }

    #[test]
    fn early_stopping_cuts_epochs() {
        // zero learning rate keeps validation loss flat, so training must
        // stop after exactly patience non-improving epochs
        let suite = tiny_suite();
        let config = RunConfig {
            epochs: 40,
            early_stop_patience: 2,
            adam: AdamConfig { learning_rate: 0.0, ..AdamConfig::default() },
            ..tiny_config()
        };
        let out = run(&config, &suite).unwrap();
        let state = &out.sequences[0].state;
        let epochs_run = state
            .logs
            .iter()
            .filter(|r| r.task == 0)
            .map(|r| r.epoch)
            .max()
            .unwrap()
            + 1;
        assert_eq!(epochs_run, 3, "first epoch sets the best, two stale epochs stop it");
        // masks still finalized for both tasks
        assert_eq!(state.mask_store.len(), 2);
    }

    #[test]
    fn runs_are_deterministic() {
        let suite = tiny_suite();
        let a = run(&tiny_config(), &suite).unwrap();
        let b = run(&tiny_config(), &suite).unwrap();
        let ja = serde_json::to_string(&a.report).unwrap();
        let jb = serde_json::to_string(&b.report).unwrap();
        assert_eq!(ja, jb);
        let la = serde_json::to_string(&a.sequences[0].state.logs).unwrap();
        let lb = serde_json::to_string(&b.sequences[0].state.logs).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn single_task_dil_and_til_coincide() {
        let suite = vec![tiny_suite().remove(0)];
        let mut config = tiny_config();
        config.sequence_seeds = vec![3];
        let out = run(&config, &suite).unwrap();
        let state = &out.sequences[0].state;
        let tasks = &out.sequences[0].tasks;
        let dil = state.evaluate(tasks, EvalMode::Dil).unwrap();
        let til = state.evaluate(tasks, EvalMode::Til).unwrap();
        assert_eq!(dil.per_task[0].accuracy, til.per_task[0].accuracy);
        assert_eq!(dil.per_task[0].macro_f1, til.per_task[0].macro_f1);
    }

    #[test]
    fn backbone_is_bit_identical_after_training() {
        let suite = tiny_suite();
        let config = tiny_config();
        let before = AdapterModel::init(config.model.clone()).unwrap().backbone_checksum();
        let out = run(&config, &suite).unwrap();
        assert_eq!(out.sequences[0].state.model.backbone_checksum(), before);
    }

    #[test]
    fn forward_metric_equals_final_metric_right_after_training() {
        // train a single-task sequence: the forward entry must match a
        // fresh evaluation of the same state
        let suite = vec![tiny_suite().remove(0)];
        let mut config = tiny_config();
        config.sequence_seeds = vec![9];
        let out = run(&config, &suite).unwrap();
        let seq = &out.report.per_sequence[0];
        let final_ = seq.final_.as_ref().unwrap();
        assert_eq!(seq.forward.per_task[0].accuracy, final_.per_task[0].accuracy);
    }
}
