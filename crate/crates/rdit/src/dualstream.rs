//! Dual-stream transformer components: register and patch tokens get
//! (partially) separate parameters while still attending jointly.
//!
//! Compact variants keep the expensive projections shared:
//! - RMSNorm: a second gain vector for register rows.
//! - SwiGLU MLP: shared first projection and gating, stream-specific output
//!   projections.
//! - adaLN: shared modulation projection plus a LoRA branch on the raw
//!   condition vector for register rows.
//! - Attention: shared qkv and output projections, with a LoRA delta added
//!   to register-row qkv outputs.
//!
//! Full variants duplicate the entire component for register rows. In every
//! variant attention runs jointly over the concatenated sequence, so the
//! streams keep interacting.

use std::rc::Rc;

use crate::backbone::{
    attention_core, modulate, split_modulation, swiglu, AdalnDualSlots, AttnDualSlots,
    BlockSlots, MlpDualSlots, Modulation, TokenSeq, LORA_ALPHA, RMSNORM_EPS,
};
use crate::config::DualConfig;
use crate::numerics::tensor::{Element, Tensor};
use crate::numerics::{Tape, Var};

fn split_streams<E: Element>(tape: &mut Tape<E>, x: Var, split: usize) -> (Var, Var) {
    let n = tape.value(x).shape()[1];
    let reg = tape.narrow_tokens(x, 0, split);
    let patch = tape.narrow_tokens(x, split, n - split);
    (reg, patch)
}

/// RMS-normalize patch and register rows with separate weights, preserving
/// row order. `split == 0` makes the register branch a no-op.
pub fn dual_rmsnorm<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    split: usize,
    w_patch: Var,
    w_reg: Var,
    eps_patch: f64,
    eps_reg: f64,
) -> Var {
    if split == 0 {
        return tape.rmsnorm(x, w_patch, eps_patch);
    }
    let (reg, patch) = split_streams(tape, x, split);
    let reg = tape.rmsnorm(reg, w_reg, eps_reg);
    let patch = tape.rmsnorm(patch, w_patch, eps_patch);
    tape.concat_tokens(reg, patch)
}

/// SwiGLU with a shared hidden latent and stream-specific output
/// projections: hidden = silu(x1) * x2 on all tokens, then register rows go
/// through `out_reg_w` and patch rows through `out_patch_w`.
pub fn dual_swiglu<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    split: usize,
    in_w: Var,
    out_patch_w: Var,
    out_reg_w: Var,
) -> Var {
    let h = tape.matmul(x, in_w);
    let two_m = tape.value(h).last_dim();
    assert_eq!(two_m % 2, 0, "first projection must split into two chunks");
    let m = two_m / 2;
    let h1 = tape.narrow_last(h, 0, m);
    let h2 = tape.narrow_last(h, m, m);
    let g = tape.silu(h1);
    let hidden = tape.mul(g, h2);
    if split == 0 {
        return tape.matmul(hidden, out_patch_w);
    }
    let (hr, hp) = split_streams(tape, hidden, split);
    let yr = tape.matmul(hr, out_reg_w);
    let yp = tape.matmul(hp, out_patch_w);
    tape.concat_tokens(yr, yp)
}

/// Shared adaLN modulation plus a LoRA refinement for register rows:
/// m = shared(silu(c)), m_reg = m + alpha * (c @ A) @ B.
///
/// Returns `(m, m_reg)`, each `[batch, 6 * width]`.
pub fn dual_adaln<E: Element>(
    tape: &mut Tape<E>,
    c: Var,
    shared_w: Var,
    shared_b: Var,
    lora_a: Var,
    lora_b: Var,
    alpha: f64,
) -> (Var, Var) {
    let cs = tape.silu(c);
    let m = tape.matmul(cs, shared_w);
    let m = tape.add_bias(m, shared_b);
    let xr = tape.matmul(c, lora_a);
    let delta = tape.matmul(xr, lora_b);
    let delta = tape.mul_scalar(delta, alpha);
    let m_reg = tape.add(m, delta);
    (m, m_reg)
}

/// Joint attention with shared qkv/out projections and a LoRA delta on the
/// qkv outputs of register rows.
pub fn lora_attention<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    split: usize,
    heads: usize,
    qkv_w: Var,
    qkv_b: Var,
    out_w: Var,
    out_b: Var,
    lora_a: Var,
    lora_b: Var,
    alpha: f64,
) -> (Var, Rc<Tensor<E>>) {
    let width = tape.value(x).last_dim();
    let qkv = tape.matmul(x, qkv_w);
    let mut qkv = tape.add_bias(qkv, qkv_b);
    if split > 0 {
        let reg_in = tape.narrow_tokens(x, 0, split);
        let xr = tape.matmul(reg_in, lora_a);
        let delta = tape.matmul(xr, lora_b);
        let delta = tape.mul_scalar(delta, alpha);
        qkv = tape.add_to_tokens(qkv, delta, 0);
    }
    let (merged, probs) = attention_core(tape, qkv, heads, width);
    let out = tape.matmul(merged, out_w);
    let out = tape.add_bias(out, out_b);
    (out, probs)
}

struct StreamMods {
    patch: Modulation,
    reg: Option<Modulation>,
}

/// Normalize and modulate, with optional register-specific norm weights and
/// modulations.
fn norm_mod<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    split: usize,
    norm_w: Var,
    norm_reg_w: Option<Var>,
    shift: Var,
    scale: Var,
    reg_shift_scale: Option<(Var, Var)>,
) -> Var {
    if split == 0 || (norm_reg_w.is_none() && reg_shift_scale.is_none()) {
        let n = tape.rmsnorm(x, norm_w, RMSNORM_EPS);
        return modulate(tape, n, shift, scale);
    }
    let (reg, patch) = split_streams(tape, x, split);
    let reg_n = tape.rmsnorm(reg, norm_reg_w.unwrap_or(norm_w), RMSNORM_EPS);
    let patch_n = tape.rmsnorm(patch, norm_w, RMSNORM_EPS);
    let (rs, rc) = reg_shift_scale.unwrap_or((shift, scale));
    let reg_m = modulate(tape, reg_n, rs, rc);
    let patch_m = modulate(tape, patch_n, shift, scale);
    tape.concat_tokens(reg_m, patch_m)
}

/// Gate a residual delta per stream.
fn gate_streams<E: Element>(
    tape: &mut Tape<E>,
    delta: Var,
    split: usize,
    gate: Var,
    gate_reg: Option<Var>,
) -> Var {
    match gate_reg {
        Some(gr) if split > 0 => {
            let (reg, patch) = split_streams(tape, delta, split);
            let reg = tape.mul_rowvec(reg, gr);
            let patch = tape.mul_rowvec(patch, gate);
            tape.concat_tokens(reg, patch)
        }
        _ => tape.mul_rowvec(delta, gate),
    }
}

/// Block forward with each component replaced by its dual variant per the
/// block's dual slots. Topology matches [`crate::backbone::block_forward`];
/// attention stays joint over both streams.
pub fn dual_block_forward<E: Element>(
    tape: &mut Tape<E>,
    vars: &[Var],
    bl: &BlockSlots,
    _dual_cfg: &DualConfig,
    seq: TokenSeq,
    c: Var,
    csilu: Var,
    heads: usize,
    capture_attn: bool,
) -> (TokenSeq, Option<Rc<Tensor<E>>>) {
    let width = tape.value(seq.var).last_dim();
    let split = seq.split;

    // Modulations for the two streams.
    let m = tape.matmul(csilu, vars[bl.adaln_w]);
    let m = tape.add_bias(m, vars[bl.adaln_b]);
    let m_reg = match &bl.dual.adaln {
        None => None,
        Some(AdalnDualSlots::Lora { a, b }) => {
            let xr = tape.matmul(c, vars[*a]);
            let delta = tape.matmul(xr, vars[*b]);
            let delta = tape.mul_scalar(delta, LORA_ALPHA);
            Some(tape.add(m, delta))
        }
        Some(AdalnDualSlots::Full { w, b }) => {
            let mr = tape.matmul(csilu, vars[*w]);
            Some(tape.add_bias(mr, vars[*b]))
        }
    };
    let md = split_modulation(tape, m, width);
    let md_reg = m_reg.map(|mr| split_modulation(tape, mr, width));
    let mods = StreamMods { patch: md, reg: md_reg };

    // Attention sub-layer.
    let xm = norm_mod(
        tape,
        seq.var,
        split,
        vars[bl.norm1_w],
        bl.dual.norm1_reg_w.map(|s| vars[s]),
        mods.patch.shift_attn,
        mods.patch.scale_attn,
        mods.reg.as_ref().map(|r| (r.shift_attn, r.scale_attn)),
    );
    let (attn, probs) = match &bl.dual.attn {
        None => {
            let qkv = tape.matmul(xm, vars[bl.qkv_w]);
            let qkv = tape.add_bias(qkv, vars[bl.qkv_b]);
            let (o, p) = attention_core(tape, qkv, heads, width);
            let o = tape.matmul(o, vars[bl.attn_out_w]);
            (tape.add_bias(o, vars[bl.attn_out_b]), p)
        }
        Some(AttnDualSlots::Lora { a, b }) => lora_attention(
            tape,
            xm,
            split,
            heads,
            vars[bl.qkv_w],
            vars[bl.qkv_b],
            vars[bl.attn_out_w],
            vars[bl.attn_out_b],
            vars[*a],
            vars[*b],
            LORA_ALPHA,
        ),
        Some(AttnDualSlots::Full { qkv_w, qkv_b, out_w, out_b }) => {
            let (reg, patch) = split_streams(tape, xm, split);
            let qr = tape.matmul(reg, vars[*qkv_w]);
            let qr = tape.add_bias(qr, vars[*qkv_b]);
            let qp = tape.matmul(patch, vars[bl.qkv_w]);
            let qp = tape.add_bias(qp, vars[bl.qkv_b]);
            let qkv = tape.concat_tokens(qr, qp);
            let (o, p) = attention_core(tape, qkv, heads, width);
            let (or, op) = split_streams(tape, o, split);
            let or = tape.matmul(or, vars[*out_w]);
            let or = tape.add_bias(or, vars[*out_b]);
            let op = tape.matmul(op, vars[bl.attn_out_w]);
            let op = tape.add_bias(op, vars[bl.attn_out_b]);
            (tape.concat_tokens(or, op), p)
        }
    };
    let attn = gate_streams(
        tape,
        attn,
        split,
        mods.patch.gate_attn,
        mods.reg.as_ref().map(|r| r.gate_attn),
    );
    let x = tape.add(seq.var, attn);

    // MLP sub-layer.
    let xm2 = norm_mod(
        tape,
        x,
        split,
        vars[bl.norm2_w],
        bl.dual.norm2_reg_w.map(|s| vars[s]),
        mods.patch.shift_mlp,
        mods.patch.scale_mlp,
        mods.reg.as_ref().map(|r| (r.shift_mlp, r.scale_mlp)),
    );
    let mlp = match &bl.dual.mlp {
        None => swiglu(tape, xm2, vars[bl.mlp_in_w], vars[bl.mlp_out_w]),
        Some(MlpDualSlots::Compact { out_reg_w }) => dual_swiglu(
            tape,
            xm2,
            split,
            vars[bl.mlp_in_w],
            vars[bl.mlp_out_w],
            vars[*out_reg_w],
        ),
        Some(MlpDualSlots::Full { in_w, out_w }) => {
            let (reg, patch) = split_streams(tape, xm2, split);
            let yr = swiglu(tape, reg, vars[*in_w], vars[*out_w]);
            let yp = swiglu(tape, patch, vars[bl.mlp_in_w], vars[bl.mlp_out_w]);
            tape.concat_tokens(yr, yp)
        }
    };
    let mlp = gate_streams(
        tape,
        mlp,
        split,
        mods.patch.gate_mlp,
        mods.reg.as_ref().map(|r| r.gate_mlp),
    );
    let x = tape.add(x, mlp);

    (
        TokenSeq { var: x, split },
        capture_attn.then_some(probs),
    )
}
