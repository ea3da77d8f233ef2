//! Full model assembly: toy backbone embeddings → modality projections →
//! decoder stack with per-layer token elimination → detection and mask
//! heads. Also the all-to-all encoder baseline used for cost comparisons.

use crate::config::EevgConfig;
use crate::elimination::{
    adaptive_spatial_attention, eliminate_tokens, location_attention_scores, minmax_normalize,
    static_eliminate, AttentionScoreMap, TokenSet,
};
use crate::error::{Error, Result};
use crate::fusion::{
    decoder_layer_flops, decoder_layer_forward, encoder_layer_flops, encoder_layer_forward,
    EncoderLayerWeights, FusionState, LayerWeights, Linear,
};
use crate::heads::{detection_head, sparse_mask_head, HeadWeights, MaskPrediction};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// ── weights ──────────────────────────────────────────────────────────

/// Toy backbone: a linear patch embedding over raw pixels (rows are
/// flattened P×P×3 patches) and a token-id lookup table (vocab × C_l).
#[derive(Debug, Clone)]
pub struct EmbedWeights<T> {
    pub patch: Linear<T>,
    pub token: T,
}

impl<T> EmbedWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EmbedWeights<U> {
        EmbedWeights {
            patch: self.patch.map(f),
            token: f(&self.token),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&T)) {
        self.patch.visit(f);
        f(&self.token);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.patch.visit_mut(f);
        f(&mut self.token);
    }

    pub fn visit_named(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        self.patch.visit_named(&format!("{prefix}.patch"), f);
        f(&format!("{prefix}.token"), &self.token);
    }
}

/// Every trainable tensor of the decoder-based model, generic over the
/// container so the same structure holds `Tensor<F>` (storage) or `Var`
/// (taped parameters). All traversals visit fields in declaration order;
/// serialization and the optimizer both rely on that order being stable.
#[derive(Debug, Clone)]
pub struct ModelWeights<T> {
    pub embed: EmbedWeights<T>,
    pub visual_proj: Linear<T>,
    pub linguistic_proj: Linear<T>,
    /// 1×C learnable location query.
    pub location_token: T,
    /// N×C positional embedding added to projected visual tokens.
    pub pos_embed: T,
    pub layers: Vec<LayerWeights<T>>,
    pub heads: HeadWeights<T>,
}

impl<T> ModelWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelWeights<U> {
        ModelWeights {
            embed: self.embed.map(f),
            visual_proj: self.visual_proj.map(f),
            linguistic_proj: self.linguistic_proj.map(f),
            location_token: f(&self.location_token),
            pos_embed: f(&self.pos_embed),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            heads: self.heads.map(f),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&T)) {
        self.embed.visit(f);
        self.visual_proj.visit(f);
        self.linguistic_proj.visit(f);
        f(&self.location_token);
        f(&self.pos_embed);
        for l in &self.layers {
            l.visit(f);
        }
        self.heads.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.embed.visit_mut(f);
        self.visual_proj.visit_mut(f);
        self.linguistic_proj.visit_mut(f);
        f(&mut self.location_token);
        f(&mut self.pos_embed);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        self.heads.visit_mut(f);
    }

    pub fn visit_named(&self, f: &mut impl FnMut(&str, &T)) {
        self.embed.visit_named("embed", f);
        self.visual_proj.visit_named("visual_proj", f);
        self.linguistic_proj.visit_named("linguistic_proj", f);
        f("location_token", &self.location_token);
        f("pos_embed", &self.pos_embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_named(&format!("layers.{i}"), f);
        }
        self.heads.visit_named("heads", f);
    }
}

/// Fixed 2-D sin/cos position code: the first half of the channels
/// encodes the row, the second half the column, each as sin/cos pairs
/// over a geometric frequency ladder (temperature 10⁴). Used to
/// *initialize* the learnable positional embedding so that token
/// position is linearly decodable from the very first step — the box
/// head has to read the referent's position out of pooled token
/// features, and a noise-initialized embedding gives it nothing to
/// read until one is learned from scratch.
fn sinusoidal_pos_embed<F: Scalar>(gh: usize, gw: usize, c: usize) -> Tensor<F> {
    let half = c / 2;
    let pairs = half / 2;
    let mut data = vec![F::zero(); gh * gw * c];
    for r in 0..gh {
        for col in 0..gw {
            let base = (r * gw + col) * c;
            for (offset, pos) in [(0, r), (half, col)] {
                for j in 0..pairs {
                    let omega = 10_000f64.powf(-(j as f64) / pairs as f64);
                    let theta = pos as f64 * omega;
                    data[base + offset + j] = F::lit(theta.sin());
                    data[base + offset + pairs + j] = F::lit(theta.cos());
                }
            }
        }
    }
    Tensor {
        shape: vec![gh * gw, c],
        data,
    }
}

impl<F: Scalar> ModelWeights<Tensor<F>> {
    /// Fresh weights: xavier-uniform matrices, zero biases, unit/zero
    /// layer norms, sinusoidal positional embedding. Random draws match
    /// traversal order.
    pub fn init(cfg: &EevgConfig, vocab: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if vocab == 0 {
            return Err(Error::Config("vocabulary must be non-empty".into()));
        }
        let patch_dim = cfg.patch * cfg.patch * 3;
        let embed = EmbedWeights {
            patch: Linear::init(patch_dim, cfg.c_v, rng),
            token: Tensor::xavier(vocab, cfg.c_l, rng),
        };
        let visual_proj = Linear::init(cfg.c_v, cfg.c, rng);
        let linguistic_proj = Linear::init(cfg.c_l, cfg.c, rng);
        let location_token = Tensor::xavier(1, cfg.c, rng);
        let pos_embed = sinusoidal_pos_embed(cfg.gh(), cfg.gw(), cfg.c);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights::init(cfg.c, cfg.ffn, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let heads = HeadWeights::init(cfg.c, cfg.patch, rng);
        Ok(ModelWeights {
            embed,
            visual_proj,
            linguistic_proj,
            location_token,
            pos_embed,
            layers,
            heads,
        })
    }

    pub fn count_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.data.len());
        n
    }

    /// Registers every tensor as a differentiable leaf on the tape.
    pub fn bind(&self, t: &mut Tape<F>) -> ModelWeights<Var> {
        self.map(&mut |w| t.leaf(w.clone()))
    }

    /// Registers every tensor as a constant (inference/benchmarks).
    pub fn bind_const(&self, t: &mut Tape<F>) -> ModelWeights<Var> {
        self.map(&mut |w| t.constant(w.clone()))
    }
}

/// The encoder baseline's weights: identical embeddings/projections and
/// heads, but fusion layers that self-attend over the whole joint
/// [location; linguistic; visual] sequence.
#[derive(Debug, Clone)]
pub struct EncoderModelWeights<T> {
    pub embed: EmbedWeights<T>,
    pub visual_proj: Linear<T>,
    pub linguistic_proj: Linear<T>,
    pub location_token: T,
    pub pos_embed: T,
    pub layers: Vec<EncoderLayerWeights<T>>,
    pub heads: HeadWeights<T>,
}

impl<T> EncoderModelWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderModelWeights<U> {
        EncoderModelWeights {
            embed: self.embed.map(f),
            visual_proj: self.visual_proj.map(f),
            linguistic_proj: self.linguistic_proj.map(f),
            location_token: f(&self.location_token),
            pos_embed: f(&self.pos_embed),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            heads: self.heads.map(f),
        }
    }
}

impl<F: Scalar> EncoderModelWeights<Tensor<F>> {
    pub fn init(cfg: &EevgConfig, vocab: usize, d_ffn: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if vocab == 0 {
            return Err(Error::Config("vocabulary must be non-empty".into()));
        }
        let patch_dim = cfg.patch * cfg.patch * 3;
        Ok(EncoderModelWeights {
            embed: EmbedWeights {
                patch: Linear::init(patch_dim, cfg.c_v, rng),
                token: Tensor::xavier(vocab, cfg.c_l, rng),
            },
            visual_proj: Linear::init(cfg.c_v, cfg.c, rng),
            linguistic_proj: Linear::init(cfg.c_l, cfg.c, rng),
            location_token: Tensor::xavier(1, cfg.c, rng),
            pos_embed: Tensor::xavier(cfg.n(), cfg.c, rng),
            layers: (0..cfg.layers)
                .map(|_| EncoderLayerWeights::init(cfg.c, d_ffn, cfg.heads, rng))
                .collect::<Result<Vec<_>>>()?,
            heads: HeadWeights::init(cfg.c, cfg.patch, rng),
        })
    }

    pub fn bind_const(&self, t: &mut Tape<F>) -> EncoderModelWeights<Var> {
        self.map(&mut |w| t.constant(w.clone()))
    }
}

// ── embeddings ───────────────────────────────────────────────────────

/// Flattens an H×W×3 image (row-major, channel-last, values in [0,1])
/// into the N×(P²·3) patch matrix: patches ordered row-major over the
/// grid, pixels row-major within the patch, channels innermost.
pub fn patch_matrix<F: Scalar>(image: &[f64], cfg: &EevgConfig) -> Result<Tensor<F>> {
    let (h, w, p) = (cfg.height, cfg.width, cfg.patch);
    if image.len() != h * w * 3 {
        return Err(Error::Dim(format!(
            "image has {} values, expected {}x{}x3 = {}",
            image.len(),
            h,
            w,
            h * w * 3
        )));
    }
    let (gh, gw) = (cfg.gh(), cfg.gw());
    let mut data = Vec::with_capacity(gh * gw * p * p * 3);
    for py in 0..gh {
        for px in 0..gw {
            for v in 0..p {
                for u in 0..p {
                    let pixel = ((py * p + v) * w + (px * p + u)) * 3;
                    for ch in 0..3 {
                        data.push(F::lit(image[pixel + ch]));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p * 3], data)
}

/// Toy visual backbone: linear embedding of raw patches → N×C_v.
pub fn embed_visual<F: Scalar>(
    t: &mut Tape<F>,
    image: &[f64],
    cfg: &EevgConfig,
    embed: &EmbedWeights<Var>,
) -> Result<Var> {
    let patches = t.constant(patch_matrix::<F>(image, cfg)?);
    Ok(t.linear(patches, embed.patch.w, embed.patch.b))
}

/// Toy linguistic backbone: table lookup of the (padded) id sequence →
/// L_max×C_l. Ids must lie inside the table.
pub fn embed_tokens<F: Scalar>(
    t: &mut Tape<F>,
    ids: &[u32],
    embed: &EmbedWeights<Var>,
) -> Result<Var> {
    let vocab = t.shape(embed.token)[0];
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
        return Err(Error::Index(format!(
            "token id {bad} outside vocabulary of {vocab}"
        )));
    }
    Ok(t.gather_rows(embed.token, ids.iter().map(|&i| i as usize).collect()))
}

// ── forward passes ───────────────────────────────────────────────────

/// Token-elimination policy for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElimMode {
    /// Threshold the normalized score map at α after every layer.
    Dynamic,
    /// Remove a fixed number of lowest-scoring tokens after every layer.
    Static(usize),
    /// Keep all tokens (ablation / benchmarks).
    Off,
}

/// Per-layer elimination trace.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Surviving token count after this layer's elimination.
    pub keep_count: usize,
    /// The min-max-normalized score map that drove the decision (defined
    /// over the tokens alive *before* this layer's elimination).
    pub scores: AttentionScoreMap,
    /// Tokens alive after this layer, as original patch indices.
    pub tokens: TokenSet,
    /// `scores` scattered onto the full gh×gw grid (eliminated cells 0),
    /// row-major — ready to render as an image.
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub layers: Vec<LayerTrace>,
}

impl Diagnostics {
    pub fn final_keep_count(&self) -> usize {
        self.layers.last().map(|l| l.keep_count).unwrap_or(0)
    }
}

/// Model outputs: box in center format ([1,4], normalized coordinates),
/// the dense mask stack, and the final 1×C location feature the
/// detection head read (kept for analysis/visualization).
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub bbox: Var,
    pub mask: MaskPrediction,
    pub location: Var,
}

fn check_features<F: Scalar>(
    t: &Tape<F>,
    f_v: Var,
    f_l: Var,
    pad_mask: &[bool],
    cfg: &EevgConfig,
) -> Result<()> {
    let sv = t.shape(f_v).to_vec();
    if sv != [cfg.n(), cfg.c_v] {
        return Err(Error::Dim(format!(
            "visual features {sv:?}, expected [{}, {}]",
            cfg.n(),
            cfg.c_v
        )));
    }
    let sl = t.shape(f_l).to_vec();
    if sl.len() != 2 || sl[1] != cfg.c_l {
        return Err(Error::Dim(format!(
            "linguistic features {sl:?}, expected [*, {}]",
            cfg.c_l
        )));
    }
    if pad_mask.len() != sl[0] {
        return Err(Error::Dim(format!(
            "padding mask length {} vs {} linguistic tokens",
            pad_mask.len(),
            sl[0]
        )));
    }
    Ok(())
}

/// Runs the decoder stack over projected features. After every layer the
/// location token's attention over surviving visual tokens is averaged
/// across heads, spatially smoothed, min-max normalized, and used to
/// eliminate tokens per `mode`; gradients flow only through survivors.
pub fn eevg_forward<F: Scalar>(
    t: &mut Tape<F>,
    f_v: Var,
    f_l: Var,
    pad_mask: &[bool],
    w: &ModelWeights<Var>,
    cfg: &EevgConfig,
    mode: ElimMode,
) -> Result<(Prediction, Diagnostics)> {
    check_features(t, f_v, f_l, pad_mask, cfg)?;
    let (gh, gw) = (cfg.gh(), cfg.gw());

    let projected = t.linear(f_v, w.visual_proj.w, w.visual_proj.b);
    let visual = t.add(projected, w.pos_embed);
    let memory = t.linear(f_l, w.linguistic_proj.w, w.linguistic_proj.b);
    let mut state = FusionState {
        location: w.location_token,
        visual,
        memory,
        pad_mask: pad_mask.to_vec(),
        token_set: TokenSet::full(cfg.n()),
    };

    let mut diag = Diagnostics::default();
    for lw in &w.layers {
        let (next, loc_heads, _) = decoder_layer_forward(t, &state, lw)?;
        let raw = location_attention_scores(t.val(loc_heads), gh, gw);
        let smoothed = adaptive_spatial_attention(&raw, &next.token_set, cfg.k)?;
        let norm = minmax_normalize(&smoothed);
        let grid = norm.to_grid(&next.token_set)?;
        state = match mode {
            ElimMode::Dynamic => eliminate_tokens(t, &next, &norm, cfg.alpha)?,
            ElimMode::Static(m) if m > 0 => static_eliminate(t, &next, &norm, m)?,
            _ => next,
        };
        diag.layers.push(LayerTrace {
            keep_count: state.token_set.len(),
            scores: norm,
            tokens: state.token_set.clone(),
            grid,
        });
    }

    let bbox = detection_head(t, state.location, &w.heads);
    let mask = sparse_mask_head(t, state.visual, &state.token_set, &w.heads, gh, gw, cfg.patch)?;
    Ok((
        Prediction {
            bbox,
            mask,
            location: state.location,
        },
        diag,
    ))
}

/// All-to-all baseline: self-attention over the joint
/// [location; linguistic; visual] sequence, no elimination, same heads.
pub fn encoder_baseline_forward<F: Scalar>(
    t: &mut Tape<F>,
    f_v: Var,
    f_l: Var,
    pad_mask: &[bool],
    w: &EncoderModelWeights<Var>,
    cfg: &EevgConfig,
) -> Result<Prediction> {
    check_features(t, f_v, f_l, pad_mask, cfg)?;
    let n = cfg.n();
    let l = pad_mask.len();

    let projected = t.linear(f_v, w.visual_proj.w, w.visual_proj.b);
    let visual = t.add(projected, w.pos_embed);
    let memory = t.linear(f_l, w.linguistic_proj.w, w.linguistic_proj.b);
    let front = t.concat_rows(w.location_token, memory);
    let mut x = t.concat_rows(front, visual);

    let mut mask = Vec::with_capacity(1 + l + n);
    mask.push(true);
    mask.extend_from_slice(pad_mask);
    mask.extend(std::iter::repeat_n(true, n));
    if !mask.iter().any(|&b| b) {
        return Err(Error::Precondition("fully masked joint sequence".into()));
    }
    for lw in &w.layers {
        x = encoder_layer_forward(t, x, Some(&mask), lw)?;
    }

    let loc = t.gather_rows(x, vec![0]);
    let vis = t.gather_rows(x, (1 + l..1 + l + n).collect());
    let bbox = detection_head(t, loc, &w.heads);
    let full = TokenSet::full(n);
    let mask_pred = sparse_mask_head(t, vis, &full, &w.heads, cfg.gh(), cfg.gw(), cfg.patch)?;
    Ok(Prediction {
        bbox,
        mask: mask_pred,
        location: loc,
    })
}

// ── analytic cost ────────────────────────────────────────────────────

/// Fusion-stack flops for a full decoder forward at expression length
/// `l`, without elimination (all N visual tokens alive in every layer).
pub fn decoder_model_flops(cfg: &EevgConfig, l: usize) -> u64 {
    cfg.layers as u64 * decoder_layer_flops(cfg.n(), l, cfg.c, cfg.ffn)
}

/// Fusion-stack flops for the encoder baseline with hidden width `d_ffn`.
pub fn encoder_model_flops(cfg: &EevgConfig, l: usize, d_ffn: usize) -> u64 {
    cfg.layers as u64 * encoder_layer_flops(cfg.n(), l, cfg.c, d_ffn)
}
