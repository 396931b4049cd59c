//! Encoder, prompt interaction layers and the two decoding heads.
//!
//! One encoder pass over the prompted sequence yields slot and sentence
//! encodings; interaction layers mix slots of the same kind across prompts
//! and attend from slots to the sentence; a classifier fills each type slot
//! and a pair of boundary heads fills each position slot. Decoding reads all
//! entities off the filled slots at once.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::nn::{masked_attention, NnError, Scalar, Tape, Tensor, VarId};
use crate::template::PromptedSequence;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("sequence length {len} exceeds encoder maximum {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("sequence was built for {seq} prompts but the model has {model}")]
    PromptCountMismatch { seq: usize, model: usize },
    #[error("invalid model config: {reason}")]
    BadConfig { reason: String },
}

/// Architecture hyperparameters. `types` excludes the no-entity class; the
/// classifier is `types + 1` wide, with the last class meaning "emit nothing".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub interaction: usize,
    pub prompts: usize,
    pub types: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults; paper-scale values remain valid settings.
    pub fn desk_default(types: usize) -> Self {
        ModelConfig {
            hidden: 64,
            layers: 2,
            heads: 4,
            interaction: 3,
            prompts: 12,
            types,
            max_len: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::BadConfig { reason });
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "heads ({}) must divide hidden size ({})",
                self.heads, self.hidden
            ));
        }
        if self.prompts == 0 {
            return fail("prompt count must be at least 1".into());
        }
        if self.types == 0 {
            return fail("type count must be at least 1".into());
        }
        if self.max_len < 4 {
            return fail(format!("max_len {} is too small", self.max_len));
        }
        Ok(())
    }

    /// Width of the feed-forward sublayer.
    pub fn ffn_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Classifier width: entity types plus the no-entity class.
    pub fn classes(&self) -> usize {
        self.types + 1
    }

    /// Class index of the no-entity label.
    pub fn empty_class(&self) -> usize {
        self.types
    }
}

// ---- parameters -----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AttnParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    /// No key bias: softmax is invariant to a per-query constant shift, so
    /// a key bias is inert and its gradient identically zero.
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderBlockParams<T> {
    pub attn: AttnParams<T>,
    pub ln1: LayerNormParams<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub ln2: LayerNormParams<T>,
}

#[derive(Clone, Debug)]
pub struct InteractionBlockParams<T> {
    pub self_attn: AttnParams<T>,
    pub ln1: LayerNormParams<T>,
    pub cross_attn: AttnParams<T>,
    pub ln2: LayerNormParams<T>,
}

/// Separate weight triple per boundary side.
#[derive(Clone, Debug)]
pub struct BoundaryHeadParams<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    pub w3: Tensor<T>,
}

/// Every learnable array of the model.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub token_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<EncoderBlockParams<T>>,
    /// Identity embeddings binding the two slots of each prompt.
    pub e_id: Tensor<T>,
    pub interaction_p: Vec<InteractionBlockParams<T>>,
    pub interaction_t: Vec<InteractionBlockParams<T>>,
    pub classifier_w: Tensor<T>,
    pub classifier_b: Tensor<T>,
    pub left: BoundaryHeadParams<T>,
    pub right: BoundaryHeadParams<T>,
}

const INIT_STD: f64 = 0.02;

fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    let dist = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            data.push(T::from_f64(v));
        }
    }
    Tensor::new(shape, data).expect("init shape")
}

fn plain_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    let dist = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("init shape")
}

fn ones<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    Tensor::new(shape, vec![T::one(); numel]).expect("init shape")
}

fn init_attn<T: Scalar>(rng: &mut ChaCha8Rng, h: usize) -> AttnParams<T> {
    AttnParams {
        wq: trunc_normal(rng, vec![h, h]),
        bq: Tensor::zeros(vec![1, h]),
        wk: trunc_normal(rng, vec![h, h]),
        wv: trunc_normal(rng, vec![h, h]),
        bv: Tensor::zeros(vec![1, h]),
        wo: trunc_normal(rng, vec![h, h]),
        bo: Tensor::zeros(vec![1, h]),
    }
}

fn init_ln<T: Scalar>(h: usize) -> LayerNormParams<T> {
    LayerNormParams {
        gain: ones(vec![1, h]),
        bias: Tensor::zeros(vec![1, h]),
    }
}

fn init_interaction<T: Scalar>(rng: &mut ChaCha8Rng, h: usize) -> InteractionBlockParams<T> {
    InteractionBlockParams {
        self_attn: init_attn(rng, h),
        ln1: init_ln(h),
        cross_attn: init_attn(rng, h),
        ln2: init_ln(h),
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let f = cfg.ffn_dim();
        let blocks = (0..cfg.layers)
            .map(|_| EncoderBlockParams {
                attn: init_attn(&mut rng, h),
                ln1: init_ln(h),
                ffn_w1: trunc_normal(&mut rng, vec![h, f]),
                ffn_b1: Tensor::zeros(vec![1, f]),
                ffn_w2: trunc_normal(&mut rng, vec![f, h]),
                ffn_b2: Tensor::zeros(vec![1, h]),
                ln2: init_ln(h),
            })
            .collect();
        ModelParams {
            token_emb: trunc_normal(&mut rng, vec![vocab_size, h]),
            pos_emb: trunc_normal(&mut rng, vec![cfg.max_len, h]),
            blocks,
            e_id: plain_normal(&mut rng, vec![cfg.prompts, h]),
            interaction_p: (0..cfg.interaction)
                .map(|_| init_interaction(&mut rng, h))
                .collect(),
            interaction_t: (0..cfg.interaction)
                .map(|_| init_interaction(&mut rng, h))
                .collect(),
            classifier_w: trunc_normal(&mut rng, vec![h, cfg.classes()]),
            classifier_b: Tensor::zeros(vec![1, cfg.classes()]),
            left: BoundaryHeadParams {
                w1: trunc_normal(&mut rng, vec![h, h]),
                w2: trunc_normal(&mut rng, vec![h, h]),
                w3: trunc_normal(&mut rng, vec![h, h]),
            },
            right: BoundaryHeadParams {
                w1: trunc_normal(&mut rng, vec![h, h]),
                w2: trunc_normal(&mut rng, vec![h, h]),
                w3: trunc_normal(&mut rng, vec![h, h]),
            },
        }
    }

    /// Named views of every array, in the canonical (checkpoint) order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.push(("token_emb".into(), &self.token_emb));
        out.push(("pos_emb".into(), &self.pos_emb));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("enc.{i}");
            push_attn(&mut out, &format!("{p}.attn"), &b.attn);
            push_ln(&mut out, &format!("{p}.ln1"), &b.ln1);
            out.push((format!("{p}.ffn.w1"), &b.ffn_w1));
            out.push((format!("{p}.ffn.b1"), &b.ffn_b1));
            out.push((format!("{p}.ffn.w2"), &b.ffn_w2));
            out.push((format!("{p}.ffn.b2"), &b.ffn_b2));
            push_ln(&mut out, &format!("{p}.ln2"), &b.ln2);
        }
        out.push(("e_id".into(), &self.e_id));
        for (kind, blocks) in [("p", &self.interaction_p), ("t", &self.interaction_t)] {
            for (i, b) in blocks.iter().enumerate() {
                let p = format!("inter.{kind}.{i}");
                push_attn(&mut out, &format!("{p}.self"), &b.self_attn);
                push_ln(&mut out, &format!("{p}.ln1"), &b.ln1);
                push_attn(&mut out, &format!("{p}.cross"), &b.cross_attn);
                push_ln(&mut out, &format!("{p}.ln2"), &b.ln2);
            }
        }
        out.push(("cls.w".into(), &self.classifier_w));
        out.push(("cls.b".into(), &self.classifier_b));
        for (side, head) in [("left", &self.left), ("right", &self.right)] {
            out.push((format!("{side}.w1"), &head.w1));
            out.push((format!("{side}.w2"), &head.w2));
            out.push((format!("{side}.w3"), &head.w3));
        }
        out
    }

    /// Mutable views, in the same order as [`Self::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("token_emb".into(), &mut self.token_emb));
        out.push(("pos_emb".into(), &mut self.pos_emb));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("enc.{i}");
            push_attn_mut(&mut out, &format!("{p}.attn"), &mut b.attn);
            push_ln_mut(&mut out, &format!("{p}.ln1"), &mut b.ln1);
            out.push((format!("{p}.ffn.w1"), &mut b.ffn_w1));
            out.push((format!("{p}.ffn.b1"), &mut b.ffn_b1));
            out.push((format!("{p}.ffn.w2"), &mut b.ffn_w2));
            out.push((format!("{p}.ffn.b2"), &mut b.ffn_b2));
            push_ln_mut(&mut out, &format!("{p}.ln2"), &mut b.ln2);
        }
        out.push(("e_id".into(), &mut self.e_id));
        for (kind, blocks) in [
            ("p", &mut self.interaction_p),
            ("t", &mut self.interaction_t),
        ] {
            for (i, b) in blocks.iter_mut().enumerate() {
                let p = format!("inter.{kind}.{i}");
                push_attn_mut(&mut out, &format!("{p}.self"), &mut b.self_attn);
                push_ln_mut(&mut out, &format!("{p}.ln1"), &mut b.ln1);
                push_attn_mut(&mut out, &format!("{p}.cross"), &mut b.cross_attn);
                push_ln_mut(&mut out, &format!("{p}.ln2"), &mut b.ln2);
            }
        }
        out.push(("cls.w".into(), &mut self.classifier_w));
        out.push(("cls.b".into(), &mut self.classifier_b));
        for (side, head) in [("left", &mut self.left), ("right", &mut self.right)] {
            out.push((format!("{side}.w1"), &mut head.w1));
            out.push((format!("{side}.w2"), &mut head.w2));
            out.push((format!("{side}.w3"), &mut head.w3));
        }
        out
    }

    /// Whether a named array belongs to the sentence encoder (frozen during
    /// locate-only warmup training).
    pub fn is_encoder_param(name: &str) -> bool {
        name == "token_emb" || name == "pos_emb" || name.starts_with("enc.")
    }

    /// All arrays cloned out, in [`Self::named`] order.
    pub fn flatten(&self) -> Vec<Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Overwrite every array from a slice in [`Self::named`] order.
    pub fn assign(&mut self, tensors: &[Tensor<T>]) {
        let mut named = self.named_mut();
        assert_eq!(named.len(), tensors.len(), "parameter count mismatch");
        for (dst, src) in named.iter_mut().zip(tensors) {
            assert_eq!(dst.1.shape(), src.shape(), "parameter shape mismatch");
            *dst.1 = src.clone();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            token_emb: self.token_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlockParams {
                    attn: cast_attn(&b.attn),
                    ln1: cast_ln(&b.ln1),
                    ffn_w1: b.ffn_w1.cast(),
                    ffn_b1: b.ffn_b1.cast(),
                    ffn_w2: b.ffn_w2.cast(),
                    ffn_b2: b.ffn_b2.cast(),
                    ln2: cast_ln(&b.ln2),
                })
                .collect(),
            e_id: self.e_id.cast(),
            interaction_p: self.interaction_p.iter().map(cast_inter).collect(),
            interaction_t: self.interaction_t.iter().map(cast_inter).collect(),
            classifier_w: self.classifier_w.cast(),
            classifier_b: self.classifier_b.cast(),
            left: cast_head(&self.left),
            right: cast_head(&self.right),
        }
    }

    /// Register every array on a tape, as trainable leaves or constants.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let mut reg = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let reg_attn = |reg: &mut dyn FnMut(&Tensor<T>) -> VarId, a: &AttnParams<T>| AttnVars {
            wq: reg(&a.wq),
            bq: reg(&a.bq),
            wk: reg(&a.wk),
            wv: reg(&a.wv),
            bv: reg(&a.bv),
            wo: reg(&a.wo),
            bo: reg(&a.bo),
        };
        let reg_ln = |reg: &mut dyn FnMut(&Tensor<T>) -> VarId, l: &LayerNormParams<T>| LnVars {
            gain: reg(&l.gain),
            bias: reg(&l.bias),
        };
        ParamVars {
            token_emb: reg(&self.token_emb),
            pos_emb: reg(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlockVars {
                    attn: reg_attn(&mut reg, &b.attn),
                    ln1: reg_ln(&mut reg, &b.ln1),
                    ffn_w1: reg(&b.ffn_w1),
                    ffn_b1: reg(&b.ffn_b1),
                    ffn_w2: reg(&b.ffn_w2),
                    ffn_b2: reg(&b.ffn_b2),
                    ln2: reg_ln(&mut reg, &b.ln2),
                })
                .collect(),
            e_id: reg(&self.e_id),
            interaction_p: self
                .interaction_p
                .iter()
                .map(|b| InteractionBlockVars {
                    self_attn: reg_attn(&mut reg, &b.self_attn),
                    ln1: reg_ln(&mut reg, &b.ln1),
                    cross_attn: reg_attn(&mut reg, &b.cross_attn),
                    ln2: reg_ln(&mut reg, &b.ln2),
                })
                .collect(),
            interaction_t: self
                .interaction_t
                .iter()
                .map(|b| InteractionBlockVars {
                    self_attn: reg_attn(&mut reg, &b.self_attn),
                    ln1: reg_ln(&mut reg, &b.ln1),
                    cross_attn: reg_attn(&mut reg, &b.cross_attn),
                    ln2: reg_ln(&mut reg, &b.ln2),
                })
                .collect(),
            classifier_w: reg(&self.classifier_w),
            classifier_b: reg(&self.classifier_b),
            left: BoundaryHeadVars {
                w1: reg(&self.left.w1),
                w2: reg(&self.left.w2),
                w3: reg(&self.left.w3),
            },
            right: BoundaryHeadVars {
                w1: reg(&self.right.w1),
                w2: reg(&self.right.w2),
                w3: reg(&self.right.w3),
            },
        }
    }
}

fn push_attn<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, a: &'a AttnParams<T>) {
    out.push((format!("{prefix}.wq"), &a.wq));
    out.push((format!("{prefix}.bq"), &a.bq));
    out.push((format!("{prefix}.wk"), &a.wk));
    out.push((format!("{prefix}.wv"), &a.wv));
    out.push((format!("{prefix}.bv"), &a.bv));
    out.push((format!("{prefix}.wo"), &a.wo));
    out.push((format!("{prefix}.bo"), &a.bo));
}

fn push_attn_mut<'a, T>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    a: &'a mut AttnParams<T>,
) {
    out.push((format!("{prefix}.wq"), &mut a.wq));
    out.push((format!("{prefix}.bq"), &mut a.bq));
    out.push((format!("{prefix}.wk"), &mut a.wk));
    out.push((format!("{prefix}.wv"), &mut a.wv));
    out.push((format!("{prefix}.bv"), &mut a.bv));
    out.push((format!("{prefix}.wo"), &mut a.wo));
    out.push((format!("{prefix}.bo"), &mut a.bo));
}

fn push_ln<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, l: &'a LayerNormParams<T>) {
    out.push((format!("{prefix}.gain"), &l.gain));
    out.push((format!("{prefix}.bias"), &l.bias));
}

fn push_ln_mut<'a, T>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    l: &'a mut LayerNormParams<T>,
) {
    out.push((format!("{prefix}.gain"), &mut l.gain));
    out.push((format!("{prefix}.bias"), &mut l.bias));
}

fn cast_attn<T: Scalar, U: Scalar>(a: &AttnParams<T>) -> AttnParams<U> {
    AttnParams {
        wq: a.wq.cast(),
        bq: a.bq.cast(),
        wk: a.wk.cast(),
        wv: a.wv.cast(),
        bv: a.bv.cast(),
        wo: a.wo.cast(),
        bo: a.bo.cast(),
    }
}

fn cast_ln<T: Scalar, U: Scalar>(l: &LayerNormParams<T>) -> LayerNormParams<U> {
    LayerNormParams {
        gain: l.gain.cast(),
        bias: l.bias.cast(),
    }
}

fn cast_inter<T: Scalar, U: Scalar>(b: &InteractionBlockParams<T>) -> InteractionBlockParams<U> {
    InteractionBlockParams {
        self_attn: cast_attn(&b.self_attn),
        ln1: cast_ln(&b.ln1),
        cross_attn: cast_attn(&b.cross_attn),
        ln2: cast_ln(&b.ln2),
    }
}

fn cast_head<T: Scalar, U: Scalar>(h: &BoundaryHeadParams<T>) -> BoundaryHeadParams<U> {
    BoundaryHeadParams {
        w1: h.w1.cast(),
        w2: h.w2.cast(),
        w3: h.w3.cast(),
    }
}

// ---- tape-side parameter handles -------------------------------------------

#[derive(Clone, Copy)]
pub struct AttnVars {
    pub wq: VarId,
    pub bq: VarId,
    pub wk: VarId,
    pub wv: VarId,
    pub bv: VarId,
    pub wo: VarId,
    pub bo: VarId,
}

#[derive(Clone, Copy)]
pub struct LnVars {
    pub gain: VarId,
    pub bias: VarId,
}

#[derive(Clone)]
pub struct EncoderBlockVars {
    pub attn: AttnVars,
    pub ln1: LnVars,
    pub ffn_w1: VarId,
    pub ffn_b1: VarId,
    pub ffn_w2: VarId,
    pub ffn_b2: VarId,
    pub ln2: LnVars,
}

#[derive(Clone)]
pub struct InteractionBlockVars {
    pub self_attn: AttnVars,
    pub ln1: LnVars,
    pub cross_attn: AttnVars,
    pub ln2: LnVars,
}

#[derive(Clone, Copy)]
pub struct BoundaryHeadVars {
    pub w1: VarId,
    pub w2: VarId,
    pub w3: VarId,
}

#[derive(Clone)]
pub struct ParamVars {
    pub token_emb: VarId,
    pub pos_emb: VarId,
    pub blocks: Vec<EncoderBlockVars>,
    pub e_id: VarId,
    pub interaction_p: Vec<InteractionBlockVars>,
    pub interaction_t: Vec<InteractionBlockVars>,
    pub classifier_w: VarId,
    pub classifier_b: VarId,
    pub left: BoundaryHeadVars,
    pub right: BoundaryHeadVars,
}

impl ParamVars {
    /// Leaves in the same order as [`ModelParams::named`].
    pub fn ordered(&self) -> Vec<VarId> {
        let mut out = Vec::new();
        let attn = |out: &mut Vec<VarId>, a: &AttnVars| {
            out.extend([a.wq, a.bq, a.wk, a.wv, a.bv, a.wo, a.bo]);
        };
        let ln = |out: &mut Vec<VarId>, l: &LnVars| {
            out.extend([l.gain, l.bias]);
        };
        out.push(self.token_emb);
        out.push(self.pos_emb);
        for b in &self.blocks {
            attn(&mut out, &b.attn);
            ln(&mut out, &b.ln1);
            out.extend([b.ffn_w1, b.ffn_b1, b.ffn_w2, b.ffn_b2]);
            ln(&mut out, &b.ln2);
        }
        out.push(self.e_id);
        for blocks in [&self.interaction_p, &self.interaction_t] {
            for b in blocks {
                attn(&mut out, &b.self_attn);
                ln(&mut out, &b.ln1);
                attn(&mut out, &b.cross_attn);
                ln(&mut out, &b.ln2);
            }
        }
        out.push(self.classifier_w);
        out.push(self.classifier_b);
        for h in [&self.left, &self.right] {
            out.extend([h.w1, h.w2, h.w3]);
        }
        out
    }
}

// ---- forward passes ---------------------------------------------------------

/// Attention sublayer with learned projections, residual and layer norm.
fn attn_sublayer<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    kv_src: VarId,
    vars: &AttnVars,
    ln: &LnVars,
    heads: usize,
    mask: Option<&crate::nn::AttentionMask>,
) -> Result<VarId, NnError> {
    let q = tape.linear(x, vars.wq, vars.bq)?;
    let k = tape.matmul(kv_src, vars.wk)?;
    let v = tape.linear(kv_src, vars.wv, vars.bv)?;
    let mixed = masked_attention(tape, q, k, v, heads, mask)?;
    let proj = tape.linear(mixed, vars.wo, vars.bo)?;
    let res = tape.add(x, proj)?;
    tape.layer_norm(res, ln.gain, ln.bias)
}

/// Slot and sentence encodings from one encoder pass.
pub struct Encoded {
    /// Sentence word rows, `[N, h]`.
    pub hx: VarId,
    /// Position-slot rows, `[M, h]`.
    pub hp: VarId,
    /// Type-slot rows, `[M, h]`.
    pub ht: VarId,
}

pub fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    seq: &PromptedSequence,
    use_mask: bool,
) -> Result<Encoded, ModelError> {
    if seq.len() > cfg.max_len {
        return Err(ModelError::LengthOverflow {
            len: seq.len(),
            max: cfg.max_len,
        });
    }
    if seq.prompts() != cfg.prompts {
        return Err(ModelError::PromptCountMismatch {
            seq: seq.prompts(),
            model: cfg.prompts,
        });
    }
    let ids: Vec<usize> = seq.token_ids.iter().map(|&id| id as usize).collect();
    let emb = tape.gather_rows(vars.token_emb, &ids)?;
    // Sentence-side positions start at 0 on [CLS]; prompt tokens carry no
    // position embedding, so the sentence encoding cannot depend on k.
    let sent_positions: Vec<usize> = (0..=seq.n_words).collect();
    let pos_rows = tape.gather_rows(vars.pos_emb, &sent_positions)?;
    let zeros = tape.constant(Tensor::zeros(vec![seq.prompt_len, cfg.hidden]));
    let pos_full = tape.concat_rows(&[zeros, pos_rows])?;
    let mut x = tape.add(emb, pos_full)?;

    let mask = use_mask.then(|| seq.prompt_agnostic_mask());
    for block in &vars.blocks {
        x = attn_sublayer(tape, x, x, &block.attn, &block.ln1, cfg.heads, mask.as_ref())?;
        let pre = tape.linear(x, block.ffn_w1, block.ffn_b1)?;
        let act = tape.sigmoid(pre);
        let ffn = tape.linear(act, block.ffn_w2, block.ffn_b2)?;
        let res = tape.add(x, ffn)?;
        x = tape.layer_norm(res, block.ln2.gain, block.ln2.bias)?;
    }

    let word_indices: Vec<usize> = (1..=seq.n_words).map(|w| seq.word_token_index(w)).collect();
    Ok(Encoded {
        hx: tape.gather_rows(x, &word_indices)?,
        hp: tape.gather_rows(x, &seq.position_slots)?,
        ht: tape.gather_rows(x, &seq.type_slots)?,
    })
}

/// Run the interaction stack for one slot kind.
fn interact_stack<T: Scalar>(
    tape: &mut Tape<T>,
    mut s: VarId,
    hx: VarId,
    blocks: &[InteractionBlockVars],
    heads: usize,
) -> Result<VarId, NnError> {
    for b in blocks {
        s = attn_sublayer(tape, s, s, &b.self_attn, &b.ln1, heads, None)?;
        s = attn_sublayer(tape, s, hx, &b.cross_attn, &b.ln2, heads, None)?;
    }
    Ok(s)
}

/// Final slot encodings: identity embeddings added, then `I` blocks of slot
/// self-attention and sentence-to-slot cross-attention per slot kind.
/// With `I = 0` this is a pass-through of `H + E_id`.
pub fn prompt_interaction_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    encoded: &Encoded,
) -> Result<(VarId, VarId), ModelError> {
    let p0 = tape.add(encoded.hp, vars.e_id)?;
    let t0 = tape.add(encoded.ht, vars.e_id)?;
    let p = interact_stack(tape, p0, encoded.hx, &vars.interaction_p, cfg.heads)?;
    let t = interact_stack(tape, t0, encoded.hx, &vars.interaction_t, cfg.heads)?;
    Ok((p, t))
}

/// Type distributions for every prompt: `softmax(linear(ĤT))`, `[M, C+1]`.
pub fn type_probs_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    ht_hat: VarId,
) -> Result<VarId, NnError> {
    let logits = tape.linear(ht_hat, vars.classifier_w, vars.classifier_b)?;
    tape.softmax_rows(logits)
}

/// Boundary probabilities for one side, `[M, N]`, independent sigmoids.
///
/// For prompt `i`: fuse `W1 ĤP_i` (broadcast) with `W2 H^X`, reduce each
/// word's fused vector through `W3` to a scalar, squash.
pub fn boundary_probs_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    head: &BoundaryHeadVars,
    hp_hat: VarId,
    hx: VarId,
) -> Result<VarId, NnError> {
    let base = tape.matmul(hx, head.w2)?;
    let projected = tape.matmul(hp_hat, head.w1)?;
    let prompts = tape.value(projected).dims2()?.0;
    let mut rows = Vec::with_capacity(prompts);
    for i in 0..prompts {
        let prow = tape.gather_rows(projected, &[i])?;
        let fused = tape.add_row_broadcast(base, prow)?;
        let reduced = tape.matmul(fused, head.w3)?;
        let scalar_per_word = tape.sum_rows(reduced)?;
        rows.push(tape.sigmoid(scalar_per_word));
    }
    tape.concat_rows(&rows)
}

/// Everything the heads produce for one sentence.
pub struct ForwardVars {
    pub hx: VarId,
    pub hp: VarId,
    pub ht: VarId,
    pub hp_hat: VarId,
    pub ht_hat: VarId,
    /// `[M, C+1]` type distributions.
    pub type_probs: VarId,
    /// `[M, N]` left-boundary probabilities (1-based words on columns).
    pub left: VarId,
    /// `[M, N]` right-boundary probabilities.
    pub right: VarId,
}

pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    seq: &PromptedSequence,
    use_mask: bool,
) -> Result<ForwardVars, ModelError> {
    let encoded = encode_on_tape(tape, vars, cfg, seq, use_mask)?;
    let (hp_hat, ht_hat) = prompt_interaction_on_tape(tape, vars, cfg, &encoded)?;
    let type_probs = type_probs_on_tape(tape, vars, ht_hat)?;
    let left = boundary_probs_on_tape(tape, &vars.left, hp_hat, encoded.hx)?;
    let right = boundary_probs_on_tape(tape, &vars.right, hp_hat, encoded.hx)?;
    Ok(ForwardVars {
        hx: encoded.hx,
        hp: encoded.hp,
        ht: encoded.ht,
        hp_hat,
        ht_hat,
        type_probs,
        left,
        right,
    })
}

// ---- prediction values -------------------------------------------------------

/// Per-prompt distributions captured off the tape.
#[derive(Clone, Debug)]
pub struct PredictionSet<T> {
    /// `[M, C+1]`; the last class is the no-entity label.
    pub type_probs: Tensor<T>,
    /// `[M, N]` sigmoid probabilities per word, 1-based words on columns.
    pub left: Tensor<T>,
    /// `[M, N]`.
    pub right: Tensor<T>,
}

impl<T: Scalar> PredictionSet<T> {
    pub fn from_tape(tape: &Tape<T>, fw: &ForwardVars) -> Self {
        PredictionSet {
            type_probs: tape.value(fw.type_probs).clone(),
            left: tape.value(fw.left).clone(),
            right: tape.value(fw.right).clone(),
        }
    }

    pub fn prompts(&self) -> usize {
        self.type_probs.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.type_probs.shape()[1]
    }

    pub fn n_words(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn type_prob(&self, prompt: usize, class: usize) -> f64 {
        self.type_probs.at2(prompt, class).as_f64()
    }

    /// Probability that 1-based `word` is the left boundary of prompt `i`.
    pub fn left_prob(&self, prompt: usize, word: usize) -> f64 {
        self.left.at2(prompt, word - 1).as_f64()
    }

    pub fn right_prob(&self, prompt: usize, word: usize) -> f64 {
        self.right.at2(prompt, word - 1).as_f64()
    }
}

/// One decoded entity with its decode-time score.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedEntity {
    /// 1-based inclusive word span.
    pub left: usize,
    pub right: usize,
    pub type_id: usize,
    pub score: f64,
}

fn argmax_row<T: Scalar>(t: &Tensor<T>, row: usize) -> usize {
    let mut best = 0;
    let mut best_v = t.at2(row, 0);
    for (c, &v) in t.row(row).iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

/// Read the entity set off a filled prediction set.
///
/// Per prompt the argmax boundary pair and argmax type are taken; prompts
/// whose type argmax is the no-entity class emit nothing and inverted spans
/// are dropped. Identical (l, r, t) triples collapse to one, and of several
/// candidates sharing a span with different types only the highest-scoring
/// survives. Overlapping or nested spans all stay.
pub fn decode_entities<T: Scalar>(pred: &PredictionSet<T>) -> Vec<DecodedEntity> {
    let empty_class = pred.classes() - 1;
    let mut candidates: Vec<DecodedEntity> = Vec::new();
    for i in 0..pred.prompts() {
        let t = argmax_row(&pred.type_probs, i);
        if t == empty_class {
            continue;
        }
        let l = argmax_row(&pred.left, i) + 1;
        let r = argmax_row(&pred.right, i) + 1;
        if l > r {
            continue;
        }
        let score = pred.type_prob(i, t) * pred.left_prob(i, l) * pred.right_prob(i, r);
        candidates.push(DecodedEntity {
            left: l,
            right: r,
            type_id: t,
            score,
        });
    }
    // Highest score per (l, r) span wins; ties break toward the lower type id
    // so decoding stays deterministic.
    candidates.sort_by(|a, b| {
        (a.left, a.right)
            .cmp(&(b.left, b.right))
            .then(b.score.partial_cmp(&a.score).expect("finite scores"))
            .then(a.type_id.cmp(&b.type_id))
    });
    let mut out: Vec<DecodedEntity> = Vec::new();
    for c in candidates {
        if let Some(last) = out.last() {
            if last.left == c.left && last.right == c.right {
                continue;
            }
        }
        out.push(c);
    }
    out
}

// ---- the model ---------------------------------------------------------------

/// Config, parameters, and an encoder-pass counter (used to demonstrate that
/// decoding a sentence costs exactly one pass).
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ModelParams<T>,
    passes: AtomicU64,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg, vocab_size, seed);
        Ok(Model {
            cfg,
            params,
            passes: AtomicU64::new(0),
        })
    }

    pub fn from_params(cfg: ModelConfig, params: ModelParams<T>) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Model {
            cfg,
            params,
            passes: AtomicU64::new(0),
        })
    }

    pub fn encoder_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_encoder_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    fn note_pass(&self) {
        self.passes.fetch_add(1, Ordering::Relaxed);
    }

    /// Full forward pass on a caller-provided tape (used by training).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        seq: &PromptedSequence,
        use_mask: bool,
    ) -> Result<ForwardVars, ModelError> {
        self.note_pass();
        forward_on_tape(tape, vars, &self.cfg, seq, use_mask)
    }

    /// Inference: one encoder pass, values only.
    pub fn predict(
        &self,
        seq: &PromptedSequence,
        use_mask: bool,
    ) -> Result<PredictionSet<T>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let fw = self.forward_on_tape(&mut tape, &vars, seq, use_mask)?;
        Ok(PredictionSet::from_tape(&tape, &fw))
    }

    /// Sentence encoding values, for invariance checks.
    pub fn encode_values(
        &self,
        seq: &PromptedSequence,
        use_mask: bool,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), ModelError> {
        self.note_pass();
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let encoded = encode_on_tape(&mut tape, &vars, &self.cfg, seq, use_mask)?;
        Ok((
            tape.value(encoded.hx).clone(),
            tape.value(encoded.hp).clone(),
            tape.value(encoded.ht).clone(),
        ))
    }
}
