//! Task heads: box regression from the location token and the sparse
//! mask head that decodes only surviving visual tokens.
//!
//! The mask head predicts P² patch logits per surviving token, scatters
//! them back to original patch positions (zeros at eliminated rows —
//! "map & pad"), tiles the patches into a dense H×W logit map, and
//! applies a single-channel 5×5 convolution followed by a sigmoid.

use crate::elimination::TokenSet;
use crate::error::{Error, Result};
use crate::fusion::Linear;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CONV_KERNEL_SIZE: usize = 5;

/// Axis-aligned box, all components normalized to [0, 1]:
/// (center x, center y, width, height).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> Self {
        assert_eq!(t.len(), 4, "box tensor must have 4 components");
        BBox {
            cx: t.data[0].to_f64x(),
            cy: t.data[1].to_f64x(),
            w: t.data[2].to_f64x(),
            h: t.data[3].to_f64x(),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.cx, self.cy, self.w, self.h]
    }

    /// Corner form (x1, y1, x2, y2).
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Plain-arithmetic IoU (evaluation only; not differentiable).
    pub fn iou(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Mask-head output. `patch_logits` is the N×P² map-&-pad matrix (zero
/// rows at eliminated indices), `dense_logits` its H×W tiling,
/// `conv_logits` the convolved map, `mask` its sigmoid in (0,1).
#[derive(Debug, Clone, Copy)]
pub struct MaskPrediction {
    pub patch_logits: Var,
    pub dense_logits: Var,
    pub conv_logits: Var,
    pub mask: Var,
}

/// Both heads' parameters: detection MLP C→C→4, mask MLP C→C→P²,
/// 5×5 conv kernel with scalar bias.
#[derive(Debug, Clone)]
pub struct HeadWeights<T> {
    pub det1: Linear<T>,
    pub det2: Linear<T>,
    pub mask1: Linear<T>,
    pub mask2: Linear<T>,
    pub conv_k: T,
    pub conv_b: T,
}

impl<T> HeadWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> HeadWeights<U> {
        HeadWeights {
            det1: self.det1.map(f),
            det2: self.det2.map(f),
            mask1: self.mask1.map(f),
            mask2: self.mask2.map(f),
            conv_k: f(&self.conv_k),
            conv_b: f(&self.conv_b),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&T)) {
        self.det1.visit(f);
        self.det2.visit(f);
        self.mask1.visit(f);
        self.mask2.visit(f);
        f(&self.conv_k);
        f(&self.conv_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.det1.visit_mut(f);
        self.det2.visit_mut(f);
        self.mask1.visit_mut(f);
        self.mask2.visit_mut(f);
        f(&mut self.conv_k);
        f(&mut self.conv_b);
    }

    pub fn visit_named(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        self.det1.visit_named(&format!("{prefix}.det1"), f);
        self.det2.visit_named(&format!("{prefix}.det2"), f);
        self.mask1.visit_named(&format!("{prefix}.mask1"), f);
        self.mask2.visit_named(&format!("{prefix}.mask2"), f);
        f(&format!("{prefix}.conv.k"), &self.conv_k);
        f(&format!("{prefix}.conv.b"), &self.conv_b);
    }
}

impl<F: Scalar> HeadWeights<Tensor<F>> {
    pub fn init(c: usize, p: usize, rng: &mut Rng) -> Self {
        let s = CONV_KERNEL_SIZE;
        HeadWeights {
            det1: Linear::init(c, c, rng),
            det2: Linear::init(c, 4, rng),
            mask1: Linear::init(c, c, rng),
            mask2: Linear::init(c, p * p, rng),
            conv_k: Tensor::xavier(s, s, rng),
            conv_b: Tensor::zeros(vec![1]),
        }
    }

    /// Exact scalar count of the mask head (MLP + conv).
    pub fn mask_head_params(&self) -> usize {
        self.mask1.w.len()
            + self.mask1.b.len()
            + self.mask2.w.len()
            + self.mask2.b.len()
            + self.conv_k.len()
            + self.conv_b.len()
    }

    /// Exact scalar count of the detection head.
    pub fn detection_head_params(&self) -> usize {
        self.det1.w.len() + self.det1.b.len() + self.det2.w.len() + self.det2.b.len()
    }

    pub fn count_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t: &Tensor<F>| n += t.len());
        n
    }
}

/// Two-layer MLP with GELU, sigmoid on the 4 outputs → (cx, cy, w, h)
/// as a 1×4 tape variable.
pub fn detection_head<F: Scalar>(t: &mut Tape<F>, loc: Var, w: &HeadWeights<Var>) -> Var {
    assert_eq!(t.shape(loc)[0], 1, "detection head expects a single row");
    let h = t.linear(loc, w.det1.w, w.det1.b);
    let g = t.gelu(h);
    let raw = t.linear(g, w.det2.w, w.det2.b);
    t.sigmoid(raw)
}

/// Decodes surviving tokens into a dense mask. `gh`×`gw` is the patch
/// grid of the token universe; `p` the patch size in pixels.
pub fn sparse_mask_head<F: Scalar>(
    t: &mut Tape<F>,
    tokens: Var,
    token_set: &TokenSet,
    w: &HeadWeights<Var>,
    gh: usize,
    gw: usize,
    p: usize,
) -> Result<MaskPrediction> {
    let n_alive = t.shape(tokens)[0];
    if gh * gw != token_set.n_total() {
        return Err(Error::Dim(format!(
            "patch grid {gh}x{gw} vs token universe {}",
            token_set.n_total()
        )));
    }
    if n_alive != token_set.len() {
        return Err(Error::Dim(format!(
            "{n_alive} token rows vs {} surviving indices",
            token_set.len()
        )));
    }
    let pp = t.shape(w.mask2.w)[1];
    if pp != p * p {
        return Err(Error::Dim(format!(
            "mask MLP emits {pp} logits per token, patch needs {}",
            p * p
        )));
    }
    let h = t.linear(tokens, w.mask1.w, w.mask1.b);
    let g = t.gelu(h);
    let logits = t.linear(g, w.mask2.w, w.mask2.b);
    let patch_logits = t.scatter_rows(logits, token_set.kept().to_vec(), token_set.n_total());
    let dense_logits = t.patches_to_image(patch_logits, gh, gw, p);
    let conv_logits = t.conv2d_same(dense_logits, w.conv_k, w.conv_b);
    let mask = t.sigmoid(conv_logits);
    Ok(MaskPrediction {
        patch_logits,
        dense_logits,
        conv_logits,
        mask,
    })
}
