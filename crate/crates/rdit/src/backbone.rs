//! Pixel-space diffusion transformer backbone.
//!
//! The model patchifies an image, adds fixed 2-D sinusoidal positional
//! embeddings, runs `depth` pre-norm transformer blocks with adaLN
//! modulation, and projects back to pixels through an un-modulated RMSNorm
//! and a zero-initialized linear head. Auxiliary tokens (free registers or
//! duplicated class embeddings) are prepended at block `reg_start` and
//! dropped after block `reg_end`, so they never reach the head or the loss.
//!
//! Parameter and FLOP accounting is done symbolically from the config in
//! [`count_params`] / [`estimate_flops`]; tests pin the symbolic counts to
//! the actually allocated parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::config::{CondMode, DualComponent, DualMode, ModelConfig};
use crate::dualstream;
use crate::error::{RditError, Result};
use crate::numerics::tensor::{cast, Element, Tensor};
use crate::numerics::{Tape, Var};

/// RMSNorm epsilon used everywhere in the backbone.
pub const RMSNORM_EPS: f64 = 1e-6;
/// Sinusoidal feature width fed to the timestep MLP.
pub const TIME_FREQ_DIM: usize = 256;
/// Timestep values are scaled by this before featurization.
pub const TIME_SCALE: f64 = 1000.0;
/// LoRA branch scale.
pub const LORA_ALPHA: f64 = 1.0;

// ---------------------------------------------------------------------------
// Parameter layout.
// ---------------------------------------------------------------------------

/// One named parameter tensor plus its weight-decay flag.
#[derive(Clone, Debug)]
pub struct NamedTensor<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub enum MlpDualSlots {
    /// Complete second SwiGLU for register rows.
    Full { in_w: usize, out_w: usize },
    /// Shared first projection, register-specific output projection.
    Compact { out_reg_w: usize },
}

#[derive(Clone, Debug)]
pub enum AdalnDualSlots {
    /// Complete second modulation projection for register rows.
    Full { w: usize, b: usize },
    /// Shared projection refined by a LoRA branch on the raw condition.
    Lora { a: usize, b: usize },
}

#[derive(Clone, Debug)]
pub enum AttnDualSlots {
    /// Stream-specific qkv and output projections (joint attention).
    Full { qkv_w: usize, qkv_b: usize, out_w: usize, out_b: usize },
    /// Shared qkv with a LoRA delta on register-row qkv outputs.
    Lora { a: usize, b: usize },
}

/// Register-stream parameter slots of one block; only components listed in
/// `DualConfig.dualize` exist.
#[derive(Clone, Debug, Default)]
pub struct DualBlockSlots {
    pub norm1_reg_w: Option<usize>,
    pub norm2_reg_w: Option<usize>,
    pub mlp: Option<MlpDualSlots>,
    pub adaln: Option<AdalnDualSlots>,
    pub attn: Option<AttnDualSlots>,
}

impl DualBlockSlots {
    pub fn is_empty(&self) -> bool {
        self.norm1_reg_w.is_none()
            && self.norm2_reg_w.is_none()
            && self.mlp.is_none()
            && self.adaln.is_none()
            && self.attn.is_none()
    }
}

/// Parameter slots of one transformer block (indices into the param list).
#[derive(Clone, Debug)]
pub struct BlockSlots {
    pub norm1_w: usize,
    pub norm2_w: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub attn_out_w: usize,
    pub attn_out_b: usize,
    pub mlp_in_w: usize,
    pub mlp_out_w: usize,
    pub adaln_w: usize,
    pub adaln_b: usize,
    pub dual: DualBlockSlots,
}

#[derive(Clone, Debug)]
pub struct ModelSlots {
    pub patch_w: usize,
    pub patch_b: usize,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub class_emb: usize,
    pub ctx_emb: Option<usize>,
    pub registers: Option<usize>,
    pub blocks: Vec<BlockSlots>,
    pub head_norm_w: usize,
    pub head_w: usize,
    pub head_b: usize,
}

struct ParamBuilder<E: Element> {
    params: Vec<NamedTensor<E>>,
    rng: ChaCha8Rng,
}

impl<E: Element> ParamBuilder<E> {
    fn push(&mut self, name: String, tensor: Tensor<E>, decay: bool) -> usize {
        self.params.push(NamedTensor { name, tensor, decay });
        self.params.len() - 1
    }

    fn normal(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64, decay: bool) -> usize {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.push(name.into(), t, decay)
    }

    fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>, decay: bool) -> usize {
        self.push(name.into(), Tensor::zeros(shape), decay)
    }

    fn ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        self.push(name.into(), Tensor::full(shape, E::one()), false)
    }

    /// Duplicate of an existing parameter, so a dual copy starts tied to the
    /// shared weights.
    fn copy_of(&mut self, name: impl Into<String>, src: usize, decay: bool) -> usize {
        let t = self.params[src].tensor.clone();
        self.push(name.into(), t, decay)
    }
}

/// Whether a block carries dual (register-stream) parameters.
fn block_has_dual(cfg: &ModelConfig, layer: usize) -> bool {
    if cfg.dual.mode == DualMode::Single {
        return false;
    }
    let in_window = cfg.n_reg > 0 && layer >= cfg.reg_start && layer <= cfg.reg_end;
    if in_window {
        return true;
    }
    // Full-dual adaLN may keep a (dormant) copy in every layer.
    cfg.dual.mode == DualMode::FullDual
        && cfg.dual.has(DualComponent::Adaln)
        && cfg.dual.adaln_full_dual_all_layers
}

fn build_dual_slots<E: Element>(
    b: &mut ParamBuilder<E>,
    cfg: &ModelConfig,
    layer: usize,
    shared: &BlockSlots,
) -> DualBlockSlots {
    let mut dual = DualBlockSlots::default();
    if cfg.dual.mode == DualMode::Single {
        return dual;
    }
    let w = cfg.width;
    let r = cfg.lora_rank;
    let in_window = cfg.n_reg > 0 && layer >= cfg.reg_start && layer <= cfg.reg_end;
    let p = |suffix: &str| format!("block{layer}.dual.{suffix}");

    if cfg.dual.has(DualComponent::Adaln) {
        let all_layers =
            cfg.dual.mode == DualMode::FullDual && cfg.dual.adaln_full_dual_all_layers;
        if in_window || all_layers {
            dual.adaln = Some(match cfg.dual.mode {
                DualMode::FullDual => AdalnDualSlots::Full {
                    w: b.copy_of(p("adaln.w"), shared.adaln_w, true),
                    b: b.copy_of(p("adaln.b"), shared.adaln_b, false),
                },
                DualMode::CompactDual => AdalnDualSlots::Lora {
                    a: b.normal(p("adaln_lora.a"), vec![w, r], 0.02, true),
                    b: b.zeros(p("adaln_lora.b"), vec![r, 6 * w], true),
                },
                DualMode::Single => unreachable!(),
            });
        }
    }
    if in_window {
        if cfg.dual.has(DualComponent::Rmsnorm) {
            dual.norm1_reg_w = Some(b.copy_of(p("norm1.w"), shared.norm1_w, false));
            dual.norm2_reg_w = Some(b.copy_of(p("norm2.w"), shared.norm2_w, false));
        }
        if cfg.dual.has(DualComponent::Mlp) {
            dual.mlp = Some(match cfg.dual.mode {
                DualMode::FullDual => MlpDualSlots::Full {
                    in_w: b.copy_of(p("mlp_in.w"), shared.mlp_in_w, true),
                    out_w: b.copy_of(p("mlp_out.w"), shared.mlp_out_w, true),
                },
                DualMode::CompactDual => MlpDualSlots::Compact {
                    out_reg_w: b.copy_of(p("mlp_out_reg.w"), shared.mlp_out_w, true),
                },
                DualMode::Single => unreachable!(),
            });
        }
        if cfg.dual.has(DualComponent::Attention) {
            dual.attn = Some(match cfg.dual.mode {
                DualMode::FullDual => AttnDualSlots::Full {
                    qkv_w: b.copy_of(p("qkv.w"), shared.qkv_w, true),
                    qkv_b: b.copy_of(p("qkv.b"), shared.qkv_b, false),
                    out_w: b.copy_of(p("attn_out.w"), shared.attn_out_w, true),
                    out_b: b.copy_of(p("attn_out.b"), shared.attn_out_b, false),
                },
                DualMode::CompactDual => AttnDualSlots::Lora {
                    a: b.normal(p("attn_lora.a"), vec![w, r], 0.02, true),
                    b: b.zeros(p("attn_lora.b"), vec![r, 3 * w], true),
                },
                DualMode::Single => unreachable!(),
            });
        }
    }
    dual
}

// ---------------------------------------------------------------------------
// Model.
// ---------------------------------------------------------------------------

/// A token sequence on the tape plus its stream split: rows `[0, split)` are
/// auxiliary tokens, rows `[split, n)` are patch tokens.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    pub var: Var,
    pub split: usize,
}

/// Activations of one block: `[batch, tokens, width]` with the stream split.
#[derive(Clone, Debug)]
pub struct TokenBatch<E: Element> {
    pub data: Tensor<E>,
    pub split: usize,
}

/// Per-block capture of activations and attention weights.
#[derive(Clone, Debug)]
pub struct ActivationTrace<E: Element> {
    /// Post-block token activations, one entry per block.
    pub blocks: Vec<TokenBatch<E>>,
    /// Post-softmax attention weights `[batch, heads, n, n]` per block.
    pub attn: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Default for ActivationTrace<E> {
    fn default() -> Self {
        ActivationTrace { blocks: Vec::new(), attn: Vec::new() }
    }
}

/// What a forward pass should record.
#[derive(Clone, Copy, Debug, Default)]
pub struct Capture {
    pub activations: bool,
    pub attention: bool,
}

impl Capture {
    pub fn none() -> Self {
        Capture::default()
    }
    pub fn all() -> Self {
        Capture { activations: true, attention: true }
    }
    fn any(&self) -> bool {
        self.activations || self.attention
    }
}

pub struct Model<E: Element> {
    pub cfg: ModelConfig,
    pub slots: ModelSlots,
    pub params: Vec<NamedTensor<E>>,
    pos_embed: Tensor<E>,
}

impl<E: Element> Model<E> {
    /// Initialize parameters from a seed. Projection weights are N(0, 0.02),
    /// norm gains start at one, and the adaLN projections, LoRA `B` matrices,
    /// and output head start at zero, so the freshly built model is the
    /// identity-plus-head map and every dual branch is tied to the shared
    /// weights.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let fdim = cfg.patch * cfg.patch * cfg.channels;
        let mut b = ParamBuilder::<E> {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let patch_w = b.normal("patch_embed.w", vec![fdim, w], 0.02, true);
        let patch_b = b.zeros("patch_embed.b", vec![w], false);
        let time_w1 = b.normal("time_mlp.w1", vec![TIME_FREQ_DIM, w], 0.02, true);
        let time_b1 = b.zeros("time_mlp.b1", vec![w], false);
        let time_w2 = b.normal("time_mlp.w2", vec![w, w], 0.02, true);
        let time_b2 = b.zeros("time_mlp.b2", vec![w], false);
        let class_emb = b.normal("class_emb", vec![cfg.num_classes + 1, w], 0.02, false);
        let ctx_emb = (cfg.cond_mode == CondMode::InContext)
            .then(|| b.normal("ctx_emb", vec![cfg.num_classes + 1, w], 0.02, false));
        let registers = (cfg.cond_mode == CondMode::Registers && cfg.n_reg > 0)
            .then(|| b.normal("registers", vec![cfg.n_reg, w], 0.02, false));

        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = |suffix: &str| format!("block{l}.{suffix}");
            let mut slots = BlockSlots {
                norm1_w: b.ones(p("norm1.w"), vec![w]),
                norm2_w: b.ones(p("norm2.w"), vec![w]),
                qkv_w: b.normal(p("qkv.w"), vec![w, 3 * w], 0.02, true),
                qkv_b: b.zeros(p("qkv.b"), vec![3 * w], false),
                attn_out_w: b.normal(p("attn_out.w"), vec![w, w], 0.02, true),
                attn_out_b: b.zeros(p("attn_out.b"), vec![w], false),
                mlp_in_w: b.normal(p("mlp_in.w"), vec![w, 2 * cfg.mlp_hidden], 0.02, true),
                mlp_out_w: b.normal(p("mlp_out.w"), vec![cfg.mlp_hidden, w], 0.02, true),
                adaln_w: b.zeros(p("adaln.w"), vec![w, 6 * w], true),
                adaln_b: b.zeros(p("adaln.b"), vec![6 * w], false),
                dual: DualBlockSlots::default(),
            };
            if block_has_dual(cfg, l) {
                slots.dual = build_dual_slots(&mut b, cfg, l, &slots);
            }
            blocks.push(slots);
        }

        let head_norm_w = b.ones("head.norm.w", vec![w]);
        let head_w = b.zeros("head.w", vec![w, fdim], true);
        let head_b = b.zeros("head.b", vec![fdim], false);

        let slots = ModelSlots {
            patch_w,
            patch_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            class_emb,
            ctx_emb,
            registers,
            blocks,
            head_norm_w,
            head_w,
            head_b,
        };
        let pos_embed = pos_embed_2d(cfg.image / cfg.patch, w);
        Ok(Model { cfg: cfg.clone(), slots, params: b.params, pos_embed })
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.tensor.numel() as u64).sum()
    }

    /// Bind all parameters onto a tape as differentiable leaves. The
    /// returned vars are index-aligned with `self.params`.
    pub fn bind(&self, tape: &mut Tape<E>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone()))
            .collect()
    }

    /// Bind parameters as constants (inference: no gradient bookkeeping).
    pub fn bind_frozen(&self, tape: &mut Tape<E>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.constant(p.tensor.clone()))
            .collect()
    }

    /// Replace all parameter tensors (shape-checked, e.g. swapping in EMA
    /// weights).
    pub fn set_params(&mut self, tensors: &[Tensor<E>]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(RditError::shape(
                "set_params",
                format!("{} tensors", self.params.len()),
                format!("{}", tensors.len()),
            ));
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(RditError::shape(
                    format!("set_params `{}`", p.name),
                    format!("{:?}", p.tensor.shape()),
                    format!("{:?}", t.shape()),
                ));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }

    /// Build the condition vector c = timestep embedding + class embedding,
    /// returning `(c, silu(c))`.
    pub fn condition(
        &self,
        tape: &mut Tape<E>,
        vars: &[Var],
        t: &[f64],
        labels: &[usize],
    ) -> Result<(Var, Var)> {
        if t.len() != labels.len() {
            return Err(RditError::shape(
                "condition",
                format!("{} timesteps", labels.len()),
                format!("{}", t.len()),
            ));
        }
        for &l in labels {
            if l > self.cfg.num_classes {
                return Err(RditError::shape(
                    "condition labels",
                    format!("label <= {}", self.cfg.num_classes),
                    format!("{l}"),
                ));
            }
        }
        let feats = timestep_features::<E>(t);
        let fv = tape.constant(feats);
        let h = tape.matmul(fv, vars[self.slots.time_w1]);
        let h = tape.add_bias(h, vars[self.slots.time_b1]);
        let h = tape.silu(h);
        let h = tape.matmul(h, vars[self.slots.time_w2]);
        let temb = tape.add_bias(h, vars[self.slots.time_b2]);
        let cemb = tape.gather_rows(vars[self.slots.class_emb], labels);
        let c = tape.add(temb, cemb);
        let cs = tape.silu(c);
        Ok((c, cs))
    }

    /// Full forward pass on an existing tape. Returns the predicted clean
    /// image var; fills `trace` if capture is requested.
    pub fn forward_on(
        &self,
        tape: &mut Tape<E>,
        vars: &[Var],
        x_t: &Tensor<E>,
        t: &[f64],
        labels: &[usize],
        capture: Capture,
        trace: &mut Option<ActivationTrace<E>>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let batch = labels.len();
        let expect = [batch, cfg.channels, cfg.image, cfg.image];
        if x_t.shape() != expect {
            return Err(RditError::shape("model input", format!("{expect:?}"), format!("{:?}", x_t.shape())));
        }
        if !x_t.all_finite() {
            return Err(RditError::NonFinite("model input".into()));
        }
        *trace = capture.any().then(ActivationTrace::default);

        let (c, cs) = self.condition(tape, vars, t, labels)?;

        let img = tape.constant(x_t.clone());
        let tokens = tape.patchify(img, cfg.patch);
        let tokens = tape.matmul(tokens, vars[self.slots.patch_w]);
        let tokens = tape.add_bias(tokens, vars[self.slots.patch_b]);
        let tokens = tape.add_broadcast_const(tokens, &self.pos_embed);
        let mut seq = TokenSeq { var: tokens, split: 0 };

        for l in 0..cfg.depth {
            if cfg.n_reg > 0 && cfg.cond_mode != CondMode::None && l == cfg.reg_start {
                seq = self.insert_aux_tokens(tape, vars, seq, l, labels)?;
            }
            let dual_here = seq.split > 0
                && cfg.dual.mode != DualMode::Single
                && l >= cfg.reg_start
                && l <= cfg.reg_end;
            let bl = &self.slots.blocks[l];
            let (next, probs) = if dual_here {
                dualstream::dual_block_forward(
                    tape, vars, bl, &cfg.dual, seq, c, cs, cfg.heads, capture.attention,
                )
            } else {
                block_forward(tape, vars, bl, seq, cs, cfg.heads, capture.attention)
            };
            seq = next;
            if !tape.value(seq.var).all_finite() {
                return Err(RditError::NonFinite(format!("block {l} output")));
            }
            if let Some(tr) = trace.as_mut() {
                if capture.activations {
                    tr.blocks.push(TokenBatch {
                        data: tape.value(seq.var).clone(),
                        split: seq.split,
                    });
                }
                tr.attn.push(if capture.attention {
                    probs.map(|p| p.as_ref().clone())
                } else {
                    None
                });
            }
            if cfg.n_reg > 0 && cfg.cond_mode != CondMode::None && l == cfg.reg_end {
                seq = self.remove_aux_tokens(tape, seq, l + 1)?;
            }
        }

        let x = tape.rmsnorm(seq.var, vars[self.slots.head_norm_w], RMSNORM_EPS);
        let x = tape.matmul(x, vars[self.slots.head_w]);
        let x = tape.add_bias(x, vars[self.slots.head_b]);
        let x_pred = tape.unpatchify(x, cfg.channels, cfg.image, cfg.patch);
        Ok(x_pred)
    }

    /// Prepend auxiliary tokens at block `layer` (must equal `reg_start`).
    pub fn insert_aux_tokens(
        &self,
        tape: &mut Tape<E>,
        vars: &[Var],
        seq: TokenSeq,
        layer: usize,
        labels: &[usize],
    ) -> Result<TokenSeq> {
        let cfg = &self.cfg;
        if cfg.cond_mode == CondMode::None {
            return Err(RditError::ConfigInvalid {
                field: "cond_mode".into(),
                message: "insert_aux_tokens with cond_mode none".into(),
            });
        }
        if layer != cfg.reg_start {
            return Err(RditError::ConfigInvalid {
                field: "reg_start".into(),
                message: format!("insert_aux_tokens at layer {layer}, expected {}", cfg.reg_start),
            });
        }
        if seq.split != 0 {
            return Err(RditError::ConfigInvalid {
                field: "split".into(),
                message: "auxiliary tokens already present".into(),
            });
        }
        if cfg.n_reg == 0 {
            return Ok(seq);
        }
        let batch = labels.len();
        let aux = match cfg.cond_mode {
            CondMode::Registers => {
                let regs = vars[self.slots.registers.expect("registers slot")];
                tape.broadcast_to_batch(regs, batch)
            }
            CondMode::InContext => {
                // n_reg copies of each item's label embedding.
                let table = vars[self.slots.ctx_emb.expect("ctx_emb slot")];
                let mut idx = Vec::with_capacity(batch * cfg.n_reg);
                for &l in labels {
                    idx.extend(std::iter::repeat(l).take(cfg.n_reg));
                }
                let rows = tape.gather_rows(table, &idx);
                tape.reshape(rows, vec![batch, cfg.n_reg, cfg.width])
            }
            CondMode::None => unreachable!(),
        };
        let var = tape.concat_tokens(aux, seq.var);
        Ok(TokenSeq { var, split: cfg.n_reg })
    }

    /// Drop auxiliary tokens; `layer` must be `reg_end + 1` (or `depth` when
    /// the window runs to the final block).
    pub fn remove_aux_tokens(&self, tape: &mut Tape<E>, seq: TokenSeq, layer: usize) -> Result<TokenSeq> {
        let cfg = &self.cfg;
        if cfg.n_reg > 0 && seq.split == 0 {
            return Err(RditError::ConfigInvalid {
                field: "split".into(),
                message: "remove_aux_tokens with no auxiliary tokens present".into(),
            });
        }
        if layer != cfg.reg_end + 1 {
            return Err(RditError::ConfigInvalid {
                field: "reg_end".into(),
                message: format!("remove_aux_tokens at layer {layer}, expected {}", cfg.reg_end + 1),
            });
        }
        if seq.split == 0 {
            return Ok(seq);
        }
        let n = tape.value(seq.var).shape()[1];
        let var = tape.narrow_tokens(seq.var, seq.split, n - seq.split);
        Ok(TokenSeq { var, split: 0 })
    }

    /// Inference forward: fresh tape, frozen parameters.
    pub fn predict(
        &self,
        x_t: &Tensor<E>,
        t: &[f64],
        labels: &[usize],
        capture: Capture,
    ) -> Result<(Tensor<E>, Option<ActivationTrace<E>>)> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let mut trace = None;
        let out = self.forward_on(&mut tape, &vars, x_t, t, labels, capture, &mut trace)?;
        Ok((tape.value(out).clone(), trace))
    }
}

// ---------------------------------------------------------------------------
// Single-stream block.
// ---------------------------------------------------------------------------

/// Six adaLN chunks: shift/scale/gate for the attention and MLP sub-layers.
pub(crate) struct Modulation {
    pub shift_attn: Var,
    pub scale_attn: Var,
    pub gate_attn: Var,
    pub shift_mlp: Var,
    pub scale_mlp: Var,
    pub gate_mlp: Var,
}

pub(crate) fn split_modulation<E: Element>(tape: &mut Tape<E>, m: Var, width: usize) -> Modulation {
    Modulation {
        shift_attn: tape.narrow_last(m, 0, width),
        scale_attn: tape.narrow_last(m, width, width),
        gate_attn: tape.narrow_last(m, 2 * width, width),
        shift_mlp: tape.narrow_last(m, 3 * width, width),
        scale_mlp: tape.narrow_last(m, 4 * width, width),
        gate_mlp: tape.narrow_last(m, 5 * width, width),
    }
}

/// `x * (1 + scale) + shift`, broadcast over the token axis.
pub(crate) fn modulate<E: Element>(tape: &mut Tape<E>, x: Var, shift: Var, scale: Var) -> Var {
    let s1 = tape.add_scalar(scale, 1.0);
    let y = tape.mul_rowvec(x, s1);
    tape.add_rowvec(y, shift)
}

/// Shared attention core: token-space qkv -> joint attention -> merge.
pub(crate) fn attention_core<E: Element>(
    tape: &mut Tape<E>,
    qkv: Var,
    heads: usize,
    width: usize,
) -> (Var, Rc<Tensor<E>>) {
    let q = tape.narrow_last(qkv, 0, width);
    let k = tape.narrow_last(qkv, width, width);
    let v = tape.narrow_last(qkv, 2 * width, width);
    let qh = tape.to_heads(q, heads);
    let kh = tape.to_heads(k, heads);
    let vh = tape.to_heads(v, heads);
    let (oh, probs) = tape.attention(qh, kh, vh);
    (tape.from_heads(oh), probs)
}

/// Standard adaLN-modulated pre-norm block on all tokens (no stream split).
///
/// x += gate1 * Attn(modulate(RMSNorm(x))); x += gate2 * MLP(modulate(RMSNorm(x))).
pub fn block_forward<E: Element>(
    tape: &mut Tape<E>,
    vars: &[Var],
    bl: &BlockSlots,
    seq: TokenSeq,
    csilu: Var,
    heads: usize,
    capture_attn: bool,
) -> (TokenSeq, Option<Rc<Tensor<E>>>) {
    let width = tape.value(seq.var).last_dim();
    let m = tape.matmul(csilu, vars[bl.adaln_w]);
    let m = tape.add_bias(m, vars[bl.adaln_b]);
    let md = split_modulation(tape, m, width);

    // Attention sub-layer.
    let xn = tape.rmsnorm(seq.var, vars[bl.norm1_w], RMSNORM_EPS);
    let xm = modulate(tape, xn, md.shift_attn, md.scale_attn);
    let qkv = tape.matmul(xm, vars[bl.qkv_w]);
    let qkv = tape.add_bias(qkv, vars[bl.qkv_b]);
    let (attn, probs) = attention_core(tape, qkv, heads, width);
    let attn = tape.matmul(attn, vars[bl.attn_out_w]);
    let attn = tape.add_bias(attn, vars[bl.attn_out_b]);
    let attn = tape.mul_rowvec(attn, md.gate_attn);
    let x = tape.add(seq.var, attn);

    // MLP sub-layer.
    let xn2 = tape.rmsnorm(x, vars[bl.norm2_w], RMSNORM_EPS);
    let xm2 = modulate(tape, xn2, md.shift_mlp, md.scale_mlp);
    let mlp = swiglu(tape, xm2, vars[bl.mlp_in_w], vars[bl.mlp_out_w]);
    let mlp = tape.mul_rowvec(mlp, md.gate_mlp);
    let x = tape.add(x, mlp);

    (
        TokenSeq { var: x, split: seq.split },
        capture_attn.then_some(probs),
    )
}

/// SwiGLU MLP: silu(x1) * x2 from two chunks, then an output projection.
pub(crate) fn swiglu<E: Element>(tape: &mut Tape<E>, x: Var, in_w: Var, out_w: Var) -> Var {
    let h = tape.matmul(x, in_w);
    let m = tape.value(h).last_dim() / 2;
    let h1 = tape.narrow_last(h, 0, m);
    let h2 = tape.narrow_last(h, m, m);
    let g = tape.silu(h1);
    let hh = tape.mul(g, h2);
    tape.matmul(hh, out_w)
}

// ---------------------------------------------------------------------------
// Fixed embeddings.
// ---------------------------------------------------------------------------

/// Sinusoidal featurization of scalar timesteps (pre-MLP): `[sin(s*w_i)...,
/// cos(s*w_i)...]` with log-spaced frequencies, s = t * TIME_SCALE.
pub fn timestep_features<E: Element>(t: &[f64]) -> Tensor<E> {
    let half = TIME_FREQ_DIM / 2;
    let mut data = Vec::with_capacity(t.len() * TIME_FREQ_DIM);
    for &ti in t {
        let s = ti * TIME_SCALE;
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            data.push(cast::<E>((s * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            data.push(cast::<E>((s * freq).cos()));
        }
    }
    Tensor::new(vec![t.len(), TIME_FREQ_DIM], data)
}

/// Fixed 2-D sinusoidal positional embedding over a `grid x grid` patch
/// layout: one quarter of the width each for sin/cos of y and x. Widths not
/// divisible by 4 leave the remainder dims at zero.
pub fn pos_embed_2d<E: Element>(grid: usize, width: usize) -> Tensor<E> {
    let quarter = width / 4;
    let mut data = vec![E::zero(); grid * grid * width];
    for gy in 0..grid {
        for gx in 0..grid {
            let base = (gy * grid + gx) * width;
            for i in 0..quarter {
                let freq = (-(10000.0f64.ln()) * i as f64 / quarter as f64).exp();
                data[base + i] = cast((gy as f64 * freq).sin());
                data[base + quarter + i] = cast((gy as f64 * freq).cos());
                data[base + 2 * quarter + i] = cast((gx as f64 * freq).sin());
                data[base + 3 * quarter + i] = cast((gx as f64 * freq).cos());
            }
        }
    }
    Tensor::new(vec![grid * grid, width], data)
}

// ---------------------------------------------------------------------------
// Parameter and FLOP accounting.
// ---------------------------------------------------------------------------

/// Exact parameter counts by component, derived from shapes only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct ParamCounts {
    pub embeddings: u64,
    pub attn: u64,
    pub mlp: u64,
    pub adaln: u64,
    pub norm: u64,
    pub head: u64,
    pub registers: u64,
    pub dual_extras: u64,
    pub total: u64,
}

impl ParamCounts {
    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

pub fn count_params(cfg: &ModelConfig) -> ParamCounts {
    let w = cfg.width as u64;
    let m = cfg.mlp_hidden as u64;
    let fdim = (cfg.patch * cfg.patch * cfg.channels) as u64;
    let classes = cfg.num_classes as u64 + 1;

    let mut c = ParamCounts::default();
    c.embeddings = fdim * w + w                       // patch embed
        + TIME_FREQ_DIM as u64 * w + w + w * w + w    // timestep MLP
        + classes * w; // class embedding (adaLN)
    if cfg.cond_mode == CondMode::InContext {
        c.embeddings += classes * w; // in-context embedding table
    }
    if cfg.cond_mode == CondMode::Registers {
        c.registers = (cfg.n_reg as u64) * w;
    }
    let depth = cfg.depth as u64;
    let attn_block = w * 3 * w + 3 * w + w * w + w;
    let mlp_block = w * 2 * m + m * w;
    let adaln_block = w * 6 * w + 6 * w;
    c.attn = depth * attn_block;
    c.mlp = depth * mlp_block;
    c.adaln = depth * adaln_block;
    c.norm = depth * 2 * w;
    c.head = w + w * fdim + fdim;

    // Register-stream extras.
    if cfg.dual.mode != DualMode::Single {
        let aux_blocks = if cfg.n_reg > 0 {
            (cfg.reg_end - cfg.reg_start + 1) as u64
        } else {
            0
        };
        let r = cfg.lora_rank as u64;
        if cfg.dual.has(DualComponent::Rmsnorm) {
            c.dual_extras += aux_blocks * 2 * w;
        }
        if cfg.dual.has(DualComponent::Mlp) {
            c.dual_extras += match cfg.dual.mode {
                DualMode::FullDual => aux_blocks * mlp_block,
                _ => aux_blocks * m * w,
            };
        }
        if cfg.dual.has(DualComponent::Adaln) {
            c.dual_extras += match cfg.dual.mode {
                DualMode::FullDual => {
                    let covered = if cfg.dual.adaln_full_dual_all_layers { depth } else { aux_blocks };
                    covered * adaln_block
                }
                _ => aux_blocks * (w * r + r * 6 * w),
            };
        }
        if cfg.dual.has(DualComponent::Attention) {
            c.dual_extras += match cfg.dual.mode {
                DualMode::FullDual => aux_blocks * attn_block,
                _ => aux_blocks * (w * r + r * 3 * w),
            };
        }
    }

    c.total = c.embeddings + c.attn + c.mlp + c.adaln + c.norm + c.head + c.registers + c.dual_extras;
    c
}

/// Forward compute per image, reported in GFLOPs under the convention of
/// common FLOP counters: one multiply-accumulate counts as one FLOP.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct FlopsBreakdown {
    pub embed: f64,
    pub qkv: f64,
    pub attn_scores: f64,
    pub attn_apply: f64,
    pub attn_out: f64,
    pub mlp: f64,
    pub adaln: f64,
    pub time_mlp: f64,
    pub head: f64,
    pub total: f64,
}

pub fn estimate_flops(cfg: &ModelConfig) -> FlopsBreakdown {
    let w = cfg.width as f64;
    let m = cfg.mlp_hidden as f64;
    let np = cfg.n_patch() as f64;
    let fdim = (cfg.patch * cfg.patch * cfg.channels) as f64;
    let r = cfg.lora_rank as f64;

    let mut f = FlopsBreakdown::default();
    f.embed = np * fdim * w;
    f.head = np * w * fdim;
    f.time_mlp = TIME_FREQ_DIM as f64 * w + w * w;

    for l in 0..cfg.depth {
        let n = cfg.tokens_at(l) as f64;
        f.qkv += n * w * 3.0 * w;
        f.attn_scores += n * n * w;
        f.attn_apply += n * n * w;
        f.attn_out += n * w * w;
        f.mlp += n * w * 2.0 * m + n * m * w;
        f.adaln += w * 6.0 * w;
        let dual_here = cfg.dual.mode != DualMode::Single && cfg.aux_at(l);
        if dual_here && cfg.dual.mode == DualMode::CompactDual {
            // LoRA branches are the only extra multiplies; full duplication
            // routes the same row count through different weights.
            if cfg.dual.has(DualComponent::Adaln) {
                f.adaln += w * r + r * 6.0 * w;
            }
            if cfg.dual.has(DualComponent::Attention) {
                f.qkv += cfg.n_reg as f64 * (w * r + r * 3.0 * w);
            }
        }
    }
    let macs = f.embed + f.qkv + f.attn_scores + f.attn_apply + f.attn_out + f.mlp + f.adaln + f.time_mlp + f.head;
    f = FlopsBreakdown {
        embed: f.embed / 1e9,
        qkv: f.qkv / 1e9,
        attn_scores: f.attn_scores / 1e9,
        attn_apply: f.attn_apply / 1e9,
        attn_out: f.attn_out / 1e9,
        mlp: f.mlp / 1e9,
        adaln: f.adaln / 1e9,
        time_mlp: f.time_mlp / 1e9,
        head: f.head / 1e9,
        total: macs / 1e9,
    };
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, DualConfig};
    use crate::numerics::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            depth: 3,
            width: 8,
            heads: 2,
            mlp_hidden: 6,
            patch: 4,
            image: 8,
            channels: 3,
            num_classes: 3,
            cond_mode: CondMode::Registers,
            n_reg: 2,
            reg_start: 1,
            reg_end: 2,
            dual: DualConfig::default(),
            lora_rank: 2,
        }
    }

    #[test]
    fn patchify_token_counts() {
        let b16 = preset("B/16").unwrap();
        assert_eq!(b16.n_patch(), 256);
        let mut one = tiny_cfg();
        one.image = 32;
        one.patch = 32;
        assert_eq!(one.n_patch(), 1);
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::<f64>::randn(vec![1, 3, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(img.clone());
        let tok = tape.patchify(v, 4);
        assert_eq!(tape.value(tok).shape(), &[1, 1, 48]);
        // Channel-major layout equals the raw [c, h, w] buffer.
        assert_eq!(tape.value(tok).data(), img.data());
    }

    #[test]
    fn timestep_features_at_zero() {
        let f = timestep_features::<f64>(&[0.0]);
        let half = TIME_FREQ_DIM / 2;
        for i in 0..half {
            assert_eq!(f.data()[i], 0.0, "sin part {i}");
            assert_eq!(f.data()[half + i], 1.0, "cos part {i}");
        }
    }

    #[test]
    fn timestep_features_deterministic_and_match_reference() {
        let a = timestep_features::<f64>(&[0.37]);
        let b = timestep_features::<f64>(&[0.37]);
        assert_eq!(a.data(), b.data());
        let half = TIME_FREQ_DIM / 2;
        for i in (0..half).step_by(17) {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            let want = (0.37 * TIME_SCALE * freq).sin();
            assert!((a.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn model_init_is_identity_plus_head() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(vec![2, 3, 8, 8], 0.5, &mut rng);
        let (pred, trace) = model
            .predict(&x, &[0.3, 0.9], &[0, 2], Capture { activations: true, attention: false })
            .unwrap();
        // Zero-initialized head -> output is exactly zero.
        assert!(pred.data().iter().all(|&v| v == 0.0));
        // Zero adaLN gates -> every block is the identity.
        let tr = trace.unwrap();
        for lb in 1..tr.blocks.len() {
            let (a, b) = (&tr.blocks[lb - 1], &tr.blocks[lb]);
            if a.split == b.split {
                assert_eq!(a.data.data(), b.data.data(), "block {lb} not identity");
            }
        }
    }

    #[test]
    fn sequence_length_schedule_matches_window() {
        let cfg = tiny_cfg();
        let model = Model::<f32>::init(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(vec![1, 3, 8, 8], 0.5, &mut rng);
        let (_, trace) = model
            .predict(&x, &[0.5], &[1], Capture { activations: true, attention: false })
            .unwrap();
        let tr = trace.unwrap();
        for (l, tb) in tr.blocks.iter().enumerate() {
            let want = cfg.tokens_at(l);
            assert_eq!(tb.data.shape()[1], want, "layer {l}");
            assert_eq!(tb.split, if cfg.aux_at(l) { cfg.n_reg } else { 0 });
        }
    }

    #[test]
    fn output_shape_matches_input_for_presets() {
        for name in ["toy"] {
            let mut cfg = preset(name).unwrap();
            cfg.depth = 2;
            cfg.reg_start = 0;
            cfg.reg_end = 1;
            let model = Model::<f32>::init(&cfg, 1).unwrap();
            let x = Tensor::<f32>::zeros(vec![1, cfg.channels, cfg.image, cfg.image]);
            let (pred, _) = model.predict(&x, &[0.5], &[0], Capture::none()).unwrap();
            assert_eq!(pred.shape(), x.shape());
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let cfg = preset("toy").unwrap();
        let model = Model::<f32>::init(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn(vec![2, 3, 32, 32], 0.7, &mut rng);
        let (a, _) = model.predict(&x, &[0.2, 0.8], &[1, 3], Capture::none()).unwrap();
        let (b, _) = model.predict(&x, &[0.2, 0.8], &[1, 3], Capture::none()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn in_context_rows_equal_label_embedding() {
        let mut cfg = tiny_cfg();
        cfg.cond_mode = CondMode::InContext;
        let model = Model::<f64>::init(&cfg, 9).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, 3, 8, 8]);
        let (_, trace) = model
            .predict(&x, &[0.5], &[2], Capture { activations: true, attention: false })
            .unwrap();
        let tr = trace.unwrap();
        // Post-block of reg_start with identity blocks: aux rows equal the
        // class embedding row for label 2.
        let tb = &tr.blocks[cfg.reg_start];
        assert_eq!(tb.split, cfg.n_reg);
        let table = &model.params[model.slots.ctx_emb.unwrap()].tensor;
        let want = &table.data()[2 * cfg.width..3 * cfg.width];
        for r in 0..cfg.n_reg {
            let got = &tb.data.data()[r * cfg.width..(r + 1) * cfg.width];
            assert_eq!(got, want, "aux row {r}");
        }
    }

    #[test]
    fn insert_and_remove_are_inverse_on_patch_rows() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind_frozen(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(vec![2, cfg.n_patch(), cfg.width], 1.0, &mut rng);
        let seq = TokenSeq { var: tape.constant(x.clone()), split: 0 };
        let ins = model
            .insert_aux_tokens(&mut tape, &vars, seq, cfg.reg_start, &[0, 1])
            .unwrap();
        assert_eq!(tape.value(ins.var).shape()[1], cfg.n_patch() + cfg.n_reg);
        let rem = model.remove_aux_tokens(&mut tape, ins, cfg.reg_end + 1).unwrap();
        assert_eq!(tape.value(rem.var).data(), x.data());
        assert_eq!(rem.split, 0);
    }

    #[test]
    fn insert_errors_at_wrong_layer_and_none_mode() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind_frozen(&mut tape);
        let x = Tensor::<f64>::zeros(vec![1, cfg.n_patch(), cfg.width]);
        let seq = TokenSeq { var: tape.constant(x), split: 0 };
        assert!(model
            .insert_aux_tokens(&mut tape, &vars, seq, cfg.reg_start + 1, &[0])
            .is_err());

        let mut none_cfg = cfg.clone();
        none_cfg.cond_mode = CondMode::None;
        none_cfg.n_reg = 0;
        let none_model = Model::<f64>::init(&none_cfg, 3).unwrap();
        let mut tape2 = Tape::new();
        let vars2 = none_model.bind_frozen(&mut tape2);
        let x2 = Tensor::<f64>::zeros(vec![1, none_cfg.n_patch(), none_cfg.width]);
        let seq2 = TokenSeq { var: tape2.constant(x2), split: 0 };
        assert!(none_model
            .insert_aux_tokens(&mut tape2, &vars2, seq2, 0, &[0])
            .is_err());
    }

    #[test]
    fn remove_errors_with_zero_split() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::<f64>::zeros(vec![1, cfg.n_patch(), cfg.width]);
        let seq = TokenSeq { var: tape.constant(x), split: 0 };
        assert!(model.remove_aux_tokens(&mut tape, seq, cfg.reg_end + 1).is_err());
    }

    #[test]
    fn count_params_matches_allocated_parameters() {
        let mut configs = vec![tiny_cfg()];
        let mut compact = tiny_cfg();
        compact.dual = DualConfig {
            mode: DualMode::CompactDual,
            dualize: vec![
                DualComponent::Adaln,
                DualComponent::Mlp,
                DualComponent::Attention,
                DualComponent::Rmsnorm,
            ],
            adaln_full_dual_all_layers: false,
        };
        configs.push(compact);
        let mut full = tiny_cfg();
        full.dual = DualConfig {
            mode: DualMode::FullDual,
            dualize: vec![
                DualComponent::Adaln,
                DualComponent::Mlp,
                DualComponent::Attention,
                DualComponent::Rmsnorm,
            ],
            adaln_full_dual_all_layers: true,
        };
        configs.push(full);
        let mut in_ctx = tiny_cfg();
        in_ctx.cond_mode = CondMode::InContext;
        configs.push(in_ctx);

        for cfg in configs {
            let model = Model::<f32>::init(&cfg, 0).unwrap();
            let counted = count_params(&cfg);
            assert_eq!(counted.total, model.param_count(), "cfg: {cfg:?}");
        }
    }

    #[test]
    fn count_params_extras_bucket_is_zero_without_dual() {
        let c = count_params(&tiny_cfg());
        assert_eq!(c.dual_extras, 0);
        let single = count_params(&preset("B/16").unwrap());
        let mut compact_cfg = preset("B/16").unwrap();
        compact_cfg.dual = DualConfig {
            mode: DualMode::CompactDual,
            dualize: vec![DualComponent::Adaln, DualComponent::Mlp, DualComponent::Rmsnorm],
            adaln_full_dual_all_layers: false,
        };
        let compact = count_params(&compact_cfg);
        assert_eq!(compact.total - compact.dual_extras, single.total);
    }

    #[test]
    fn b16_param_table_rows() {
        let base = preset("B/16").unwrap();
        let count_m = |cfg: &ModelConfig| count_params(cfg).millions();
        let single = count_m(&base);
        assert!((single - 131.0).abs() / 131.0 < 0.03, "single = {single}");

        let dual = |mode: DualMode, parts: &[DualComponent]| {
            let mut cfg = base.clone();
            cfg.dual = DualConfig {
                mode,
                dualize: parts.to_vec(),
                adaln_full_dual_all_layers: true,
            };
            count_m(&cfg)
        };
        use DualComponent::*;
        let full_all = dual(DualMode::FullDual, &[Adaln, Mlp, Attention, Rmsnorm]);
        assert!((full_all - 230.0).abs() / 230.0 < 0.03, "full_all = {full_all}");
        let compact = dual(DualMode::CompactDual, &[Adaln, Mlp, Rmsnorm]);
        assert!((compact - 149.0).abs() / 149.0 < 0.03, "compact = {compact}");
        let ratio = compact / single;
        assert!((1.10..=1.18).contains(&ratio), "compact ratio = {ratio}");
        let naive_ratio = full_all / single;
        assert!((1.70..=1.82).contains(&naive_ratio), "naive ratio = {naive_ratio}");
    }

    #[test]
    fn toy_preset_is_small() {
        let c = count_params(&preset("toy").unwrap());
        assert!(c.total < 2_000_000, "toy = {}", c.total);
    }

    #[test]
    fn l16_param_total() {
        let c = count_params(&preset("L/16").unwrap()).millions();
        assert!((c - 459.0).abs() / 459.0 < 0.03, "L/16 = {c}");
    }

    #[test]
    fn flops_b16_and_l16() {
        let b = estimate_flops(&preset("B/16").unwrap()).total;
        assert!((b - 23.8).abs() / 23.8 < 0.10, "B/16 = {b}");
        let l = estimate_flops(&preset("L/16").unwrap()).total;
        assert!((l - 84.2).abs() / 84.2 < 0.10, "L/16 = {l}");
    }

    #[test]
    fn flops_double_depth_doubles_block_terms() {
        let cfg = preset("toy").unwrap();
        let f1 = estimate_flops(&cfg).total;
        let mut doubled = cfg.clone();
        doubled.depth *= 2;
        doubled.reg_start = cfg.reg_start * 2;
        doubled.reg_end = cfg.reg_end * 2 + 1;
        let f2 = estimate_flops(&doubled).total;
        let ratio = f2 / f1;
        assert!((ratio - 2.0).abs() < 0.02 * 2.0, "ratio = {ratio}");
    }

    #[test]
    fn pos_embed_rows_are_distinct() {
        let pe = pos_embed_2d::<f64>(4, 16);
        assert_eq!(pe.shape(), &[16, 16]);
        for a in 0..16 {
            for b in (a + 1)..16 {
                let ra = &pe.data()[a * 16..(a + 1) * 16];
                let rb = &pe.data()[b * 16..(b + 1) * 16];
                assert_ne!(ra, rb, "rows {a} and {b} identical");
            }
        }
    }
}
