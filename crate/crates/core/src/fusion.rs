//! Vision-language fusion layers: multi-head self- and cross-attention,
//! the decoder layer (visual queries attending to linguistic memory), and
//! the joint-sequence encoder layer used as the complexity baseline.
//!
//! Weight containers are generic over their leaf type so the same struct
//! holds plain tensors (storage, optimizer) or tape variables (forward
//! passes). `map`/`visit`/`visit_mut` all traverse fields in one fixed
//! order; serialization, gradient collection and optimizer updates rely
//! on that order agreeing.

use crate::elimination::TokenSet;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default layer-norm epsilon used across the stack.
pub const LN_EPS: f64 = 1e-5;

// ── weight containers ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&T)) {
        f(&self.w);
        f(&self.b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.w);
        f(&mut self.b);
    }

    pub fn visit_named(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }
}

impl<F: Scalar> Linear<Tensor<F>> {
    /// Xavier-uniform weight, zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Linear {
            w: Tensor::xavier(d_in, d_out, rng),
            b: Tensor::zeros(vec![d_out]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LnParams<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T> LnParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LnParams<U> {
        LnParams {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&T)) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    pub fn visit_named(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }
}

impl<F: Scalar> LnParams<Tensor<F>> {
    pub fn init(c: usize) -> Self {
        LnParams {
            gamma: Tensor::full(vec![c], F::one()),
            beta: Tensor::zeros(vec![c]),
        }
    }
}

/// Projections for one attention block: W_Q, W_K, W_V, W_O, each C×C with
/// bias, split into `heads` heads of dimension C/heads.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub heads: usize,
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
            heads: self.heads,
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&T)) {
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.o.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.o.visit_mut(f);
    }

    pub fn visit_named(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        self.q.visit_named(&format!("{prefix}.q"), f);
        self.k.visit_named(&format!("{prefix}.k"), f);
        self.v.visit_named(&format!("{prefix}.v"), f);
        self.o.visit_named(&format!("{prefix}.o"), f);
    }
}

impl<F: Scalar> AttentionParams<Tensor<F>> {
    pub fn init(c: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "head count {heads} must divide channel dim {c}"
            )));
        }
        Ok(AttentionParams {
            q: Linear::init(c, c, rng),
            k: Linear::init(c, c, rng),
            v: Linear::init(c, c, rng),
            o: Linear::init(c, c, rng),
            heads,
        })
    }
}

/// One decoder layer: MSA over [loc; visual], MCA into linguistic memory,
/// position-wise FFN; post-norm layer norms after each residual add.
#[derive(Debug, Clone)]
pub struct LayerWeights<T> {
    pub msa: AttentionParams<T>,
    pub mca: AttentionParams<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
    pub ln1: LnParams<T>,
    pub ln2: LnParams<T>,
    pub ln3: LnParams<T>,
}

impl<T> LayerWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerWeights<U> {
        LayerWeights {
            msa: self.msa.map(f),
            mca: self.mca.map(f),
            ffn1: self.ffn1.map(f),
            ffn2: self.ffn2.map(f),
            ln1: self.ln1.map(f),
            ln2: self.ln2.map(f),
            ln3: self.ln3.map(f),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&T)) {
        self.msa.visit(f);
        self.mca.visit(f);
        self.ffn1.visit(f);
        self.ffn2.visit(f);
        self.ln1.visit(f);
        self.ln2.visit(f);
        self.ln3.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.msa.visit_mut(f);
        self.mca.visit_mut(f);
        self.ffn1.visit_mut(f);
        self.ffn2.visit_mut(f);
        self.ln1.visit_mut(f);
        self.ln2.visit_mut(f);
        self.ln3.visit_mut(f);
    }

    pub fn visit_named(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        self.msa.visit_named(&format!("{prefix}.msa"), f);
        self.mca.visit_named(&format!("{prefix}.mca"), f);
        self.ffn1.visit_named(&format!("{prefix}.ffn1"), f);
        self.ffn2.visit_named(&format!("{prefix}.ffn2"), f);
        self.ln1.visit_named(&format!("{prefix}.ln1"), f);
        self.ln2.visit_named(&format!("{prefix}.ln2"), f);
        self.ln3.visit_named(&format!("{prefix}.ln3"), f);
    }
}

impl<F: Scalar> LayerWeights<Tensor<F>> {
    pub fn init(c: usize, d_ffn: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(LayerWeights {
            msa: AttentionParams::init(c, heads, rng)?,
            mca: AttentionParams::init(c, heads, rng)?,
            ffn1: Linear::init(c, d_ffn, rng),
            ffn2: Linear::init(d_ffn, c, rng),
            ln1: LnParams::init(c),
            ln2: LnParams::init(c),
            ln3: LnParams::init(c),
        })
    }
}

/// One encoder layer over the joint [loc; linguistic; visual] sequence:
/// MSA + FFN with post-norm.
#[derive(Debug, Clone)]
pub struct EncoderLayerWeights<T> {
    pub msa: AttentionParams<T>,
    pub ffn1: Linear<T>,
    pub ffn2: Linear<T>,
    pub ln1: LnParams<T>,
    pub ln2: LnParams<T>,
}

impl<T> EncoderLayerWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderLayerWeights<U> {
        EncoderLayerWeights {
            msa: self.msa.map(f),
            ffn1: self.ffn1.map(f),
            ffn2: self.ffn2.map(f),
            ln1: self.ln1.map(f),
            ln2: self.ln2.map(f),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&T)) {
        self.msa.visit(f);
        self.ffn1.visit(f);
        self.ffn2.visit(f);
        self.ln1.visit(f);
        self.ln2.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.msa.visit_mut(f);
        self.ffn1.visit_mut(f);
        self.ffn2.visit_mut(f);
        self.ln1.visit_mut(f);
        self.ln2.visit_mut(f);
    }

    pub fn visit_named(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        self.msa.visit_named(&format!("{prefix}.msa"), f);
        self.ffn1.visit_named(&format!("{prefix}.ffn1"), f);
        self.ffn2.visit_named(&format!("{prefix}.ffn2"), f);
        self.ln1.visit_named(&format!("{prefix}.ln1"), f);
        self.ln2.visit_named(&format!("{prefix}.ln2"), f);
    }
}

impl<F: Scalar> EncoderLayerWeights<Tensor<F>> {
    pub fn init(c: usize, d_ffn: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(EncoderLayerWeights {
            msa: AttentionParams::init(c, heads, rng)?,
            ffn1: Linear::init(c, d_ffn, rng),
            ffn2: Linear::init(d_ffn, c, rng),
            ln1: LnParams::init(c),
            ln2: LnParams::init(c),
        })
    }
}

// ── runtime state ────────────────────────────────────────────────────

/// Token state flowing through the decoder stack. The location token is
/// logically index 0 of the query sequence; `visual` holds the N′
/// surviving visual tokens; `token_set` maps them to original patch
/// positions.
#[derive(Debug, Clone)]
pub struct FusionState {
    pub location: Var,
    pub visual: Var,
    pub memory: Var,
    pub pad_mask: Vec<bool>,
    pub token_set: TokenSet,
}

impl FusionState {
    pub fn n_visual<F: Scalar>(&self, t: &Tape<F>) -> usize {
        t.shape(self.visual)[0]
    }
}

// ── attention ops ────────────────────────────────────────────────────

fn check_heads<F: Scalar>(t: &Tape<F>, x: Var, heads: usize) -> Result<usize> {
    let c = *t.shape(x).last().unwrap();
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "head count {heads} must divide channel dim {c}"
        )));
    }
    Ok(c / heads)
}

/// Shared h-head attention core. Computes softmax(QKᵀ/√d)·V per head,
/// concatenates heads and applies the output projection. Returns the
/// projected output and each head's post-softmax probability matrix.
fn attention_core<F: Scalar>(
    t: &mut Tape<F>,
    x_q: Var,
    x_kv: Var,
    mask: Option<&[bool]>,
    p: &AttentionParams<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = check_heads(t, x_q, p.heads)?;
    let q = t.linear(x_q, p.q.w, p.q.b);
    let k = t.linear(x_kv, p.k.w, p.k.b);
    let v = t.linear(x_kv, p.v.w, p.v.b);
    let inv_sqrt_d = F::lit(1.0 / (d as f64).sqrt());
    let mut probs_per_head = Vec::with_capacity(p.heads);
    let mut ctx: Option<Var> = None;
    for h in 0..p.heads {
        let (lo, hi) = (h * d, (h + 1) * d);
        let qh = t.slice_cols(q, lo, hi);
        let kh = t.slice_cols(k, lo, hi);
        let vh = t.slice_cols(v, lo, hi);
        let kt = t.transpose(kh);
        let logits = t.matmul(qh, kt);
        let scaled = t.scale(logits, inv_sqrt_d);
        let probs = t.softmax_rows_masked(scaled, mask.map(|m| m.to_vec()));
        probs_per_head.push(probs);
        let ctx_h = t.matmul(probs, vh);
        ctx = Some(match ctx {
            None => ctx_h,
            Some(c) => t.concat_cols(c, ctx_h),
        });
    }
    let out = t.linear(ctx.unwrap(), p.o.w, p.o.b);
    Ok((out, probs_per_head))
}

/// Plain multi-head self-attention over all rows of `x` (no location-row
/// bookkeeping); this is the encoder's attention. An optional key mask
/// (length = row count, `true` = attendable) hides padding columns.
pub fn self_attention<F: Scalar>(
    t: &mut Tape<F>,
    x: Var,
    mask: Option<&[bool]>,
    p: &AttentionParams<Var>,
) -> Result<Var> {
    if let Some(m) = mask {
        let rows = t.shape(x)[0];
        if m.len() != rows {
            return Err(Error::Dim(format!(
                "key mask length {} vs sequence length {rows}",
                m.len()
            )));
        }
    }
    let (out, _) = attention_core(t, x, x, mask, p)?;
    Ok(out)
}

/// Decoder MSA over [loc; visual] rows (row 0 = location token).
///
/// Besides the attended output, returns each head's post-softmax attention
/// row from the location query to the N′ visual keys as an h×N′ tensor.
/// The location key's own score is dropped, so rows sum to ≤ 1.
pub fn multi_head_self_attention<F: Scalar>(
    t: &mut Tape<F>,
    x: Var,
    p: &AttentionParams<Var>,
) -> Result<(Var, Var)> {
    let m = t.shape(x)[0];
    if m < 2 {
        return Err(Error::Precondition(format!(
            "self-attention over location + visual tokens needs at least 2 rows, got {m}"
        )));
    }
    let (out, probs) = attention_core(t, x, x, None, p)?;
    let mut loc_rows = Vec::with_capacity(probs.len());
    for pr in probs {
        let row0 = t.gather_rows(pr, vec![0]);
        loc_rows.push(t.slice_cols(row0, 1, m));
    }
    let mut stacked = loc_rows[0];
    for &r in &loc_rows[1..] {
        stacked = t.concat_rows(stacked, r);
    }
    Ok((out, stacked))
}

/// Cross-attention: queries from the fused sequence, keys/values from the
/// linguistic memory. `mask[j] = true` marks real (attendable) memory
/// positions; masked logits are −∞ so padding never leaks in.
pub fn multi_head_cross_attention<F: Scalar>(
    t: &mut Tape<F>,
    query: Var,
    memory: Var,
    mask: &[bool],
    p: &AttentionParams<Var>,
) -> Result<Var> {
    let l = t.shape(memory)[0];
    if mask.len() != l {
        return Err(Error::Dim(format!(
            "padding mask length {} vs memory length {l}",
            mask.len()
        )));
    }
    if l == 0 || !mask.iter().any(|&b| b) {
        return Err(Error::Precondition(
            "cross-attention memory has no unmasked position".into(),
        ));
    }
    let (out, _) = attention_core(t, query, memory, Some(mask), p)?;
    Ok(out)
}

// ── layers ───────────────────────────────────────────────────────────

fn residual_ln<F: Scalar>(t: &mut Tape<F>, x: Var, branch: Var, ln: &LnParams<Var>) -> Var {
    let s = t.add(x, branch);
    t.layer_norm(s, ln.gamma, ln.beta, LN_EPS)
}

/// One decoder layer: MSA + residual + LN, MCA + residual + LN, FFN +
/// residual + LN. Token count is unchanged; elimination is a separate op.
///
/// Returns the new state, the per-head location rows (h×N′), and their
/// head mean (1×N′) — the layer's token score vector.
///
/// A zero-length linguistic memory skips the whole MCA sub-layer (used by
/// structural baselines); a nonempty but fully masked memory is an error.
pub fn decoder_layer_forward<F: Scalar>(
    t: &mut Tape<F>,
    state: &FusionState,
    w: &LayerWeights<Var>,
) -> Result<(FusionState, Var, Var)> {
    let n = state.n_visual(t);
    let x = t.concat_rows(state.location, state.visual);
    let (attn, loc_heads) = multi_head_self_attention(t, x, &w.msa)?;
    let mut h = residual_ln(t, x, attn, &w.ln1);
    if t.shape(state.memory)[0] > 0 {
        let cross = multi_head_cross_attention(t, h, state.memory, &state.pad_mask, &w.mca)?;
        h = residual_ln(t, h, cross, &w.ln2);
    }
    let f1 = t.linear(h, w.ffn1.w, w.ffn1.b);
    let g = t.gelu(f1);
    let f2 = t.linear(g, w.ffn2.w, w.ffn2.b);
    let out = residual_ln(t, h, f2, &w.ln3);

    let location = t.gather_rows(out, vec![0]);
    let visual = t.gather_rows(out, (1..=n).collect());
    // Head mean of the location rows: (1/h)·1ᵀ · loc_heads.
    let heads = t.shape(loc_heads)[0];
    let avg = t.constant(Tensor::full(vec![1, heads], F::lit(1.0 / heads as f64)));
    let loc_mean = t.matmul(avg, loc_heads);

    Ok((
        FusionState {
            location,
            visual,
            memory: state.memory,
            pad_mask: state.pad_mask.clone(),
            token_set: state.token_set.clone(),
        },
        loc_heads,
        loc_mean,
    ))
}

/// One encoder layer over the joint [loc; linguistic; visual] sequence.
/// `mask` (if given) spans that whole sequence and hides padding keys.
pub fn encoder_layer_forward<F: Scalar>(
    t: &mut Tape<F>,
    x: Var,
    mask: Option<&[bool]>,
    w: &EncoderLayerWeights<Var>,
) -> Result<Var> {
    let attn = self_attention(t, x, mask, &w.msa)?;
    let h = residual_ln(t, x, attn, &w.ln1);
    let f1 = t.linear(h, w.ffn1.w, w.ffn1.b);
    let g = t.gelu(f1);
    let f2 = t.linear(g, w.ffn2.w, w.ffn2.b);
    Ok(residual_ln(t, h, f2, &w.ln2))
}

// ── analytic flop counts ─────────────────────────────────────────────
//
// Multiply-add counted as 2 flops; an (a×b)·(b×c) matmul is 2abc.
// Projections dominate; softmax/LN/bias terms are omitted consistently
// on both sides.

/// One decoder layer on q = 1+N′ fused tokens against L memory tokens:
/// MSA projections 8qC² + attention 4q²C, MCA 4qC² + 4LC² + 4qLC
/// (skipped when L = 0), FFN 4qC·D. Linear in L at fixed N′.
pub fn decoder_layer_flops(n_visual: usize, l: usize, c: usize, d_ffn: usize) -> u64 {
    let q = (1 + n_visual) as u64;
    let (l, c, d) = (l as u64, c as u64, d_ffn as u64);
    let msa = 8 * q * c * c + 4 * q * q * c;
    let mca = if l > 0 {
        4 * q * c * c + 4 * l * c * c + 4 * q * l * c
    } else {
        0
    };
    let ffn = 4 * q * c * d;
    msa + mca + ffn
}

/// One encoder layer on the joint sequence T = 1+L+N:
/// projections 8TC² + attention 4T²C + FFN 4TC·D. Quadratic in L.
pub fn encoder_layer_flops(n_visual: usize, l: usize, c: usize, d_ffn: usize) -> u64 {
    let t = (1 + l + n_visual) as u64;
    let (c, d) = (c as u64, d_ffn as u64);
    8 * t * c * c + 4 * t * t * c + 4 * t * c * d
}
