//! Frozen transformer encoder with two trainable adapters per layer, a
//! shared 3-class head, and mask-conditioned forward passes.
//!
//! The backbone (embeddings, attention, feed-forward) is randomly
//! initialized from the seed and never updated; adapters start as exact
//! identities (zero up-projection plus skip) so early training rides on the
//! frozen features. Each adapter exposes two maskable unit layers: the
//! bottleneck output (after the ReLU) and the up-projection output. The
//! mask vector for a layer multiplies its activations elementwise, and the
//! overall masked adapter output rejoins the residual stream through the
//! skip-connection.

use crate::data::{EncodedBatch, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::masks::{MaskLayout, MaskStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const LN_EPS: f64 = 1e-5;
const ATTN_MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_buckets: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub adapter_dim: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub train_layer_norm: bool,
    pub seed: u64,
    /// Optional JSON file of named tensors substituted for the random
    /// backbone after initialization.
    #[serde(default)]
    pub backbone_file: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_buckets: 512,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 64,
            adapter_dim: 64,
            max_len: 32,
            dropout_p: 0.5,
            train_layer_norm: true,
            seed: 0,
            backbone_file: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArg(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.adapter_dim < 2 {
            return Err(Error::InvalidArg(format!(
                "adapter_dim must be >= 2, got {}",
                self.adapter_dim
            )));
        }
        if self.vocab_buckets < 16 {
            return Err(Error::InvalidArg(format!(
                "vocab_buckets must be >= 16, got {}",
                self.vocab_buckets
            )));
        }
        if self.max_len < 4 || self.max_len > 128 {
            return Err(Error::InvalidArg(format!(
                "max_len must be in 4..=128, got {}",
                self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArg(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

pub type ParamId = usize;

/// Which maskable unit layer, if any, owns a parameter's output units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskedBy {
    None,
    /// (mask layer index, incoming dimension); biases use in_dim = 1.
    Units { layer: usize, in_dim: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub masked_by: MaskedBy,
}

/// All model parameters, indexed by id with stable name lookup.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    fn add(
        &mut self,
        name: String,
        value: Tensor,
        trainable: bool,
        masked_by: MaskedBy,
    ) -> ParamId {
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable, masked_by });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterIds {
    down_w: ParamId,
    down_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
    bottleneck_mask: usize,
    output_mask: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerIds {
    // per-head projections
    wq: Vec<ParamId>,
    bq: Vec<ParamId>,
    wk: Vec<ParamId>,
    bk: Vec<ParamId>,
    wv: Vec<ParamId>,
    bv: Vec<ParamId>,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    adapters: [AdapterIds; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Structure {
    tok_emb: ParamId,
    pos_emb: ParamId,
    ln0_g: ParamId,
    ln0_b: ParamId,
    layers: Vec<LayerIds>,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    structure: Structure,
    mask_layout: MaskLayout,
}

/// One task's masked forward result: the `[CLS]` representation after the
/// final layer and the shared head's logits.
#[derive(Debug, Clone, Copy)]
pub struct TaskView {
    pub task_id: usize,
    pub h: Var,
    pub z: Var,
}

fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let scale = (2.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gauss() * scale).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

impl AdapterModel {
    /// Build a model from the config: backbone randomly initialized then
    /// frozen, adapters as exact identities, head small random.
    pub fn init(config: ModelConfig) -> Result<AdapterModel> {
        config.validate()?;
        let mut rng = Rng::new(config.seed).fork(0x4d4f_4445_4c00_0001);
        let d = config.d_model;
        let dh = d / config.n_heads;
        let mut store = ParamStore::default();
        let mut widths = Vec::new();

        // lexical content carries the signal; positions are mild hints
        let tok_emb = store.add(
            "tok_emb".into(),
            Tensor::new(
                vec![config.vocab_buckets, d],
                (0..config.vocab_buckets * d).map(|_| rng.gauss()).collect(),
            )?,
            false,
            MaskedBy::None,
        );
        let pos_emb = store.add(
            "pos_emb".into(),
            Tensor::new(
                vec![config.max_len, d],
                (0..config.max_len * d).map(|_| rng.gauss() * 0.1).collect(),
            )?,
            false,
            MaskedBy::None,
        );
        let ln0_g = store.add(
            "ln0.gamma".into(),
            Tensor::full(vec![d], 1.0),
            config.train_layer_norm,
            MaskedBy::None,
        );
        let ln0_b =
            store.add("ln0.beta".into(), Tensor::zeros(vec![d]), config.train_layer_norm, MaskedBy::None);

        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut wq = Vec::new();
            let mut bq = Vec::new();
            let mut wk = Vec::new();
            let mut bk = Vec::new();
            let mut wv = Vec::new();
            let mut bv = Vec::new();
            for h in 0..config.n_heads {
                wq.push(store.add(
                    format!("layer{l}.attn.head{h}.wq"),
                    xavier(&mut rng, d, dh),
                    false,
                    MaskedBy::None,
                ));
                bq.push(store.add(
                    format!("layer{l}.attn.head{h}.bq"),
                    Tensor::zeros(vec![dh]),
                    false,
                    MaskedBy::None,
                ));
                wk.push(store.add(
                    format!("layer{l}.attn.head{h}.wk"),
                    xavier(&mut rng, d, dh),
                    false,
                    MaskedBy::None,
                ));
                bk.push(store.add(
                    format!("layer{l}.attn.head{h}.bk"),
                    Tensor::zeros(vec![dh]),
                    false,
                    MaskedBy::None,
                ));
                wv.push(store.add(
                    format!("layer{l}.attn.head{h}.wv"),
                    xavier(&mut rng, d, dh),
                    false,
                    MaskedBy::None,
                ));
                bv.push(store.add(
                    format!("layer{l}.attn.head{h}.bv"),
                    Tensor::zeros(vec![dh]),
                    false,
                    MaskedBy::None,
                ));
            }
            let wo =
                store.add(format!("layer{l}.attn.wo"), xavier(&mut rng, d, d), false, MaskedBy::None);
            let bo = store.add(
                format!("layer{l}.attn.bo"),
                Tensor::zeros(vec![d]),
                false,
                MaskedBy::None,
            );
            let ln1_g = store.add(
                format!("layer{l}.ln1.gamma"),
                Tensor::full(vec![d], 1.0),
                config.train_layer_norm,
                MaskedBy::None,
            );
            let ln1_b = store.add(
                format!("layer{l}.ln1.beta"),
                Tensor::zeros(vec![d]),
                config.train_layer_norm,
                MaskedBy::None,
            );
            let ffn_w1 = store.add(
                format!("layer{l}.ffn.w1"),
                xavier(&mut rng, d, config.ffn_dim),
                false,
                MaskedBy::None,
            );
            let ffn_b1 = store.add(
                format!("layer{l}.ffn.b1"),
                Tensor::zeros(vec![config.ffn_dim]),
                false,
                MaskedBy::None,
            );
            let ffn_w2 = store.add(
                format!("layer{l}.ffn.w2"),
                xavier(&mut rng, config.ffn_dim, d),
                false,
                MaskedBy::None,
            );
            let ffn_b2 = store.add(
                format!("layer{l}.ffn.b2"),
                Tensor::zeros(vec![d]),
                false,
                MaskedBy::None,
            );
            let ln2_g = store.add(
                format!("layer{l}.ln2.gamma"),
                Tensor::full(vec![d], 1.0),
                config.train_layer_norm,
                MaskedBy::None,
            );
            let ln2_b = store.add(
                format!("layer{l}.ln2.beta"),
                Tensor::zeros(vec![d]),
                config.train_layer_norm,
                MaskedBy::None,
            );

            let mut adapters = Vec::with_capacity(2);
            for a in 0..2 {
                let bottleneck_mask = widths.len();
                widths.push(config.adapter_dim);
                let output_mask = widths.len();
                widths.push(d);
                let down_w = store.add(
                    format!("layer{l}.adapter{a}.down_w"),
                    xavier(&mut rng, d, config.adapter_dim),
                    true,
                    MaskedBy::Units { layer: bottleneck_mask, in_dim: d },
                );
                let down_b = store.add(
                    format!("layer{l}.adapter{a}.down_b"),
                    Tensor::zeros(vec![config.adapter_dim]),
                    true,
                    MaskedBy::Units { layer: bottleneck_mask, in_dim: 1 },
                );
                // zero up-projection: the adapter starts as the identity
                let up_w = store.add(
                    format!("layer{l}.adapter{a}.up_w"),
                    Tensor::zeros(vec![config.adapter_dim, d]),
                    true,
                    MaskedBy::Units { layer: output_mask, in_dim: config.adapter_dim },
                );
                let up_b = store.add(
                    format!("layer{l}.adapter{a}.up_b"),
                    Tensor::zeros(vec![d]),
                    true,
                    MaskedBy::Units { layer: output_mask, in_dim: 1 },
                );
                adapters.push(AdapterIds {
                    down_w,
                    down_b,
                    up_w,
                    up_b,
                    bottleneck_mask,
                    output_mask,
                });
            }

            layers.push(LayerIds {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_g,
                ln1_b,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                ln2_g,
                ln2_b,
                adapters: [adapters.remove(0), adapters.remove(0)],
            });
        }

        let head_w = store.add(
            "head.w".into(),
            Tensor::new(
                vec![d, NUM_CLASSES],
                (0..d * NUM_CLASSES).map(|_| rng.gauss() * 0.1).collect(),
            )?,
            true,
            MaskedBy::None,
        );
        let head_b = store.add("head.b".into(), Tensor::zeros(vec![NUM_CLASSES]), true, MaskedBy::None);

        let mut model = AdapterModel {
            config,
            params: store,
            structure: Structure { tok_emb, pos_emb, ln0_g, ln0_b, layers, head_w, head_b },
            mask_layout: MaskLayout { widths },
        };
        if let Some(path) = model.config.backbone_file.clone() {
            model.load_backbone(std::path::Path::new(&path))?;
        }
        Ok(model)
    }

    pub fn mask_layout(&self) -> &MaskLayout {
        &self.mask_layout
    }

    /// Combined bit checksum of every frozen backbone parameter.
    pub fn backbone_checksum(&self) -> u64 {
        let mut h: u64 = 0;
        for (_, p) in self.params.iter() {
            if !p.trainable {
                h = h.rotate_left(7) ^ p.value.bit_checksum();
            }
        }
        h
    }

    /// Replace backbone tensors by name from a JSON file of
    /// `{name: {shape, data}}`. Shapes must match; trainable parameters are
    /// not replaceable this way.
    pub fn load_backbone(&mut self, path: &std::path::Path) -> Result<usize> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let named: BTreeMap<String, Tensor> = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("backbone file: {e}")))?;
        let mut replaced = 0;
        for (name, tensor) in named {
            let id = self
                .params
                .id_of(&name)
                .ok_or_else(|| Error::Config(format!("backbone file names unknown parameter {name}")))?;
            let p = self.params.get_mut(id);
            if p.trainable {
                return Err(Error::Config(format!("{name} is trainable, not a backbone parameter")));
            }
            if p.value.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_backbone",
                    lhs: p.value.shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            p.value = tensor;
            replaced += 1;
        }
        Ok(replaced)
    }

    /// Register every parameter on the tape: trainable ones as gradient
    /// leaves (constants while grad is disabled), frozen ones as constants.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundModel<'m> {
        let vars = self
            .params
            .iter()
            .map(|(_, p)| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        BoundModel { model: self, vars }
    }
}

/// A model whose parameters are registered on a tape.
pub struct BoundModel<'m> {
    pub model: &'m AdapterModel,
    vars: Vec<Var>,
}

impl<'m> BoundModel<'m> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id]
    }

    fn adapter(
        &self,
        tape: &mut Tape,
        ids: &AdapterIds,
        input: Var,
        masks: Option<&[Var]>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let cfg = &self.model.config;
        let pre = tape.matmul(input, self.vars[ids.down_w])?;
        let pre = tape.add_bias(pre, self.vars[ids.down_b])?;
        let mut act = tape.relu(pre)?;
        if let Some(m) = masks {
            act = tape.mul_row(act, m[ids.bottleneck_mask])?;
        }
        let act = tape.dropout(act, 1.0 - cfg.dropout_p, training, rng)?;
        let up = tape.matmul(act, self.vars[ids.up_w])?;
        let mut up = tape.add_bias(up, self.vars[ids.up_b])?;
        if let Some(m) = masks {
            up = tape.mul_row(up, m[ids.output_mask])?;
        }
        tape.add(input, up)
    }

    /// Full masked forward pass over one batch. `masks` holds one vector
    /// per maskable layer in layout order; `None` disables gating entirely
    /// (the unmasked baselines).
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &EncodedBatch,
        task_id: usize,
        masks: Option<&[Var]>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<TaskView> {
        let cfg = &self.model.config;
        let st = &self.model.structure;
        if let Some(m) = masks {
            if m.len() != self.model.mask_layout.len() {
                return Err(Error::ShapeMismatch {
                    op: "forward_masked",
                    lhs: vec![m.len()],
                    rhs: vec![self.model.mask_layout.len()],
                });
            }
            for (i, &mv) in m.iter().enumerate() {
                if tape.shape(mv) != [self.model.mask_layout.widths[i]] {
                    return Err(Error::ShapeMismatch {
                        op: "forward_masked",
                        lhs: tape.shape(mv).to_vec(),
                        rhs: vec![self.model.mask_layout.widths[i]],
                    });
                }
            }
        }
        let (n, len) = (batch.n, batch.len);
        if len > cfg.max_len {
            return Err(Error::InvalidArg(format!(
                "batch length {len} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let dh = cfg.d_model / cfg.n_heads;

        let tok = tape.embedding(self.vars[st.tok_emb], &batch.tokens)?;
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let pos = tape.embedding(self.vars[st.pos_emb], &pos_ids)?;
        let summed = tape.add(tok, pos)?;
        let mut x = tape.layer_norm(summed, self.vars[st.ln0_g], self.vars[st.ln0_b], LN_EPS)?;

        // additive attention mask: padded keys get a large negative score
        let mut attn_mask = vec![0.0; n * len * len];
        for s in 0..n {
            for key in 0..len {
                if batch.pad_mask[s * len + key] == 0.0 {
                    for q in 0..len {
                        attn_mask[s * len * len + q * len + key] = ATTN_MASK_NEG;
                    }
                }
            }
        }
        let attn_mask = tape.constant(Tensor::new(vec![n, len, len], attn_mask)?);

        for layer in &st.layers {
            // multi-head self-attention over the frozen backbone
            let mut head_outputs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let q = tape.matmul(x, self.vars[layer.wq[h]])?;
                let q = tape.add_bias(q, self.vars[layer.bq[h]])?;
                let k = tape.matmul(x, self.vars[layer.wk[h]])?;
                let k = tape.add_bias(k, self.vars[layer.bk[h]])?;
                let v = tape.matmul(x, self.vars[layer.wv[h]])?;
                let v = tape.add_bias(v, self.vars[layer.bv[h]])?;
                let q3 = tape.reshape(q, vec![n, len, dh])?;
                let k3 = tape.reshape(k, vec![n, len, dh])?;
                let v3 = tape.reshape(v, vec![n, len, dh])?;
                let scores = tape.matmul_nt(q3, k3)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let scores = tape.add(scores, attn_mask)?;
                let attn = tape.softmax(scores)?;
                let ctx = tape.matmul(attn, v3)?;
                head_outputs.push(tape.reshape(ctx, vec![n * len, dh])?);
            }
            let ctx = tape.concat(&head_outputs, 1)?;
            let attn_out = tape.matmul(ctx, self.vars[layer.wo])?;
            let attn_out = tape.add_bias(attn_out, self.vars[layer.bo])?;
            let adapted = self.adapter(tape, &layer.adapters[0], attn_out, masks, training, rng)?;
            let residual = tape.add(x, adapted)?;
            x = tape.layer_norm(residual, self.vars[layer.ln1_g], self.vars[layer.ln1_b], LN_EPS)?;

            let f = tape.matmul(x, self.vars[layer.ffn_w1])?;
            let f = tape.add_bias(f, self.vars[layer.ffn_b1])?;
            let f = tape.relu(f)?;
            let f = tape.matmul(f, self.vars[layer.ffn_w2])?;
            let ffn_out = tape.add_bias(f, self.vars[layer.ffn_b2])?;
            let adapted = self.adapter(tape, &layer.adapters[1], ffn_out, masks, training, rng)?;
            let residual = tape.add(x, adapted)?;
            x = tape.layer_norm(residual, self.vars[layer.ln2_g], self.vars[layer.ln2_b], LN_EPS)?;
        }

        let cls_rows: Vec<usize> = (0..n).map(|s| s * len).collect();
        let h = tape.select_rows(x, &cls_rows)?;
        let z = tape.matmul(h, self.vars[st.head_w])?;
        let z = tape.add_bias(z, self.vars[st.head_b])?;
        Ok(TaskView { task_id, h, z })
    }

    /// Put a finalized task's stored gates on the tape as constants.
    pub fn stored_mask_vars(
        &self,
        tape: &mut Tape,
        store: &MaskStore,
        task_id: usize,
    ) -> Result<Vec<Var>> {
        let stored = store.get(task_id).ok_or_else(|| {
            Error::InvalidArg(format!("no stored mask for task {task_id}"))
        })?;
        Ok(stored
            .hard
            .iter()
            .map(|m| tape.constant(Tensor::from_vec(m.clone())))
            .collect())
    }

    /// One masked forward per task: finalized tasks 1..t-1 under their
    /// stored gates, the current task under its live (annealed) gates.
    /// With `teacher_grad` false the previous-task views are recorded as
    /// constants and contribute nothing to any gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_view_forward(
        &self,
        tape: &mut Tape,
        batch: &EncodedBatch,
        mask_store: &MaskStore,
        current_task: usize,
        live_masks: Option<&[Var]>,
        teacher_grad: bool,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Vec<TaskView>> {
        let mut views = Vec::with_capacity(mask_store.len() + 1);
        for task_id in mask_store.task_ids() {
            if task_id == current_task {
                return Err(Error::InvalidArg(format!(
                    "task {task_id} is already finalized; cannot be the current task"
                )));
            }
            let view = if teacher_grad {
                let m = self.stored_mask_vars(tape, mask_store, task_id)?;
                self.forward(tape, batch, task_id, Some(&m), training, rng)?
            } else {
                // detach the whole teacher pass
                let was = tape.grad_enabled();
                tape.set_grad_enabled(false);
                let result = self
                    .stored_mask_vars(tape, mask_store, task_id)
                    .and_then(|m| self.forward(tape, batch, task_id, Some(&m), training, rng));
                tape.set_grad_enabled(was);
                result?
            };
            views.push(view);
        }
        views.push(self.forward(tape, batch, current_task, live_masks, training, rng)?);
        Ok(views)
    }
}
