//! Task losses: smooth-L1 + GIoU for the box, focal + dice for the mask,
//! and their weighted joint sum. All losses are built from tape ops so
//! one backward pass differentiates the full objective.

use crate::heads::BBox;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Loss weights and shape parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_det: f64,
    pub lambda_seg: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_det: 0.1,
            lambda_seg: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_det < 0.0 || self.lambda_seg < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("focal gamma must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("focal alpha must lie in [0,1]".into()));
        }
        if self.dice_eps <= 0.0 {
            return Err(Error::Config("dice smoothing must be positive".into()));
        }
        Ok(())
    }
}

/// Reference annotation for one sample: tight box and binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub mask: Vec<f64>,
    pub mask_h: usize,
    pub mask_w: usize,
}

impl GroundTruth {
    pub fn new(bbox: BBox, mask: Vec<f64>, mask_h: usize, mask_w: usize) -> Result<Self> {
        if mask.len() != mask_h * mask_w {
            return Err(Error::Dim(format!(
                "mask has {} values for {mask_h}x{mask_w}",
                mask.len()
            )));
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Precondition("ground-truth mask must be binary".into()));
        }
        Ok(GroundTruth {
            bbox,
            mask,
            mask_h,
            mask_w,
        })
    }

    pub fn mask_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: vec![self.mask_h, self.mask_w],
            data: self.mask.iter().map(|&v| F::lit(v)).collect(),
        }
    }

    pub fn box_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: vec![1, 4],
            data: self.bbox.to_vec().iter().map(|&v| F::lit(v)).collect(),
        }
    }
}

/// All loss terms of one sample; `det = smooth + giou`,
/// `seg = focal + dice`, `total = λ_det·det + λ_seg·seg`.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub smooth: Var,
    pub giou: Var,
    pub focal: Var,
    pub dice: Var,
    pub det: Var,
    pub seg: Var,
    pub total: Var,
}

impl LossBundle {
    /// Component values as plain floats, in bundle order
    /// (smooth, giou, focal, dice, det, seg, total).
    pub fn values<F: Scalar>(&self, t: &Tape<F>) -> [f64; 7] {
        [
            t.val(self.smooth).item().to_f64x(),
            t.val(self.giou).item().to_f64x(),
            t.val(self.focal).item().to_f64x(),
            t.val(self.dice).item().to_f64x(),
            t.val(self.det).item().to_f64x(),
            t.val(self.seg).item().to_f64x(),
            t.val(self.total).item().to_f64x(),
        ]
    }
}

/// Mean over the 4 components of the elementwise smooth-L1 distance.
pub fn smooth_l1_loss<F: Scalar>(t: &mut Tape<F>, b: Var, b_gt: Var) -> Var {
    let d = t.smooth_l1(b, b_gt);
    t.mean_all(d)
}

fn split_box<F: Scalar>(t: &mut Tape<F>, b: Var) -> (Var, Var, Var, Var) {
    (
        t.slice_cols(b, 0, 1),
        t.slice_cols(b, 1, 2),
        t.slice_cols(b, 2, 3),
        t.slice_cols(b, 3, 4),
    )
}

fn box_corners<F: Scalar>(t: &mut Tape<F>, b: Var) -> (Var, Var, Var, Var, Var) {
    let (cx, cy, w, h) = split_box(t, b);
    let hw = t.scale(w, F::lit(0.5));
    let hh = t.scale(h, F::lit(0.5));
    let x1 = t.sub(cx, hw);
    let x2 = t.add(cx, hw);
    let y1 = t.sub(cy, hh);
    let y2 = t.add(cy, hh);
    let area = t.mul(w, h);
    (x1, y1, x2, y2, area)
}

/// GIoU loss 1 − [IoU − |hull \ union| / |hull|] on center-format boxes
/// with nonnegative extents; ranges over [0, 2]. The degenerate case of
/// two zero-area boxes is defined as loss 1.
pub fn giou_loss<F: Scalar>(t: &mut Tape<F>, b: Var, b_gt: Var) -> Var {
    let (ax1, ay1, ax2, ay2, area_a) = box_corners(t, b);
    let (bx1, by1, bx2, by2, area_b) = box_corners(t, b_gt);
    if t.val(area_a).item() == F::zero() && t.val(area_b).item() == F::zero() {
        // IoU defined 0, hull term 0 → loss 1. No useful gradient exists.
        return t.scalar_const(F::one());
    }
    let ix1 = t.max_elem(ax1, bx1);
    let iy1 = t.max_elem(ay1, by1);
    let ix2 = t.min_elem(ax2, bx2);
    let iy2 = t.min_elem(ay2, by2);
    let iwr = t.sub(ix2, ix1);
    let ihr = t.sub(iy2, iy1);
    let iw = t.relu(iwr);
    let ih = t.relu(ihr);
    let inter = t.mul(iw, ih);
    let sum_areas = t.add(area_a, area_b);
    let union = t.sub(sum_areas, inter);
    let iou = t.div(inter, union);

    let hx1 = t.min_elem(ax1, bx1);
    let hy1 = t.min_elem(ay1, by1);
    let hx2 = t.max_elem(ax2, bx2);
    let hy2 = t.max_elem(ay2, by2);
    let hw_ = t.sub(hx2, hx1);
    let hh_ = t.sub(hy2, hy1);
    let hull = t.mul(hw_, hh_);
    let slack = t.sub(hull, union);
    let penalty = t.div(slack, hull);
    let giou = t.sub(iou, penalty);
    let neg = t.neg(giou);
    let loss = t.add_scalar(neg, F::one());
    t.reshape(loss, vec![1])
}

/// Mean over pixels of −α_t (1−p_t)^γ ln(p_t), where p_t is the predicted
/// probability of the true class. `m` holds probabilities in (0,1); the
/// log argument is clamped below at 1e−12 so saturated pixels cannot
/// produce infinities.
pub fn focal_loss<F: Scalar>(
    t: &mut Tape<F>,
    m: Var,
    m_gt: &Tensor<F>,
    gamma: f64,
    alpha_f: f64,
) -> Var {
    let shape = t.shape(m).to_vec();
    assert_eq!(shape, m_gt.shape, "focal: prediction/target shapes differ");
    let af = F::lit(alpha_f);
    // p_t = gt·p + (1−gt)(1−p) = (2gt−1)·p + (1−gt); α_t analogous.
    let two = F::lit(2.0);
    let sign = t.constant(m_gt.map_data(|g| two * g - F::one()));
    let offset = t.constant(m_gt.map_data(|g| F::one() - g));
    let alpha_t = t.constant(m_gt.map_data(|g| af * g + (F::one() - af) * (F::one() - g)));
    let signed = t.mul(m, sign);
    let p_t = t.add(signed, offset);
    let floor = t.constant(Tensor {
        shape: shape.clone(),
        data: vec![F::lit(1e-12); m_gt.len()],
    });
    let p_safe = t.max_elem(p_t, floor);
    let ln_pt = t.ln(p_safe);
    let neg_pt = t.neg(p_t);
    let one_minus = t.add_scalar(neg_pt, F::one());
    let focus = t.powf(one_minus, gamma);
    let weighted = t.mul(alpha_t, focus);
    let px = t.mul(weighted, ln_pt);
    let mean = t.mean_all(px);
    t.neg(mean)
}

/// Dice loss 1 − (2·ΣM·M_gt + ε) / (ΣM + ΣM_gt + ε).
pub fn dice_loss<F: Scalar>(t: &mut Tape<F>, m: Var, m_gt: &Tensor<F>, eps: f64) -> Var {
    assert_eq!(t.shape(m), &m_gt.shape[..], "dice: shapes differ");
    let gt = t.constant(m_gt.clone());
    let prod = t.mul(m, gt);
    let s_inter = t.sum_all(prod);
    let s_m = t.sum_all(m);
    let s_gt = t.sum_all(gt);
    let e = F::lit(eps);
    let num_core = t.scale(s_inter, F::lit(2.0));
    let num = t.add_scalar(num_core, e);
    let den_core = t.add(s_m, s_gt);
    let den = t.add_scalar(den_core, e);
    let ratio = t.div(num, den);
    let neg = t.neg(ratio);
    t.add_scalar(neg, F::one())
}

/// Full objective for one sample: box prediction (1×4 probabilities) and
/// mask prediction (H×W probabilities) against the ground truth.
pub fn joint_loss<F: Scalar>(
    t: &mut Tape<F>,
    box_pred: Var,
    mask_pred: Var,
    gt: &GroundTruth,
    cfg: &LossConfig,
) -> LossBundle {
    let b_gt = t.constant(gt.box_tensor::<F>());
    let m_gt = gt.mask_tensor::<F>();
    let smooth = smooth_l1_loss(t, box_pred, b_gt);
    let giou = giou_loss(t, box_pred, b_gt);
    let focal = focal_loss(t, mask_pred, &m_gt, cfg.focal_gamma, cfg.focal_alpha);
    let dice = dice_loss(t, mask_pred, &m_gt, cfg.dice_eps);
    let det = t.add(smooth, giou);
    let seg = t.add(focal, dice);
    let det_w = t.scale(det, F::lit(cfg.lambda_det));
    let seg_w = t.scale(seg, F::lit(cfg.lambda_seg));
    let total = t.add(det_w, seg_w);
    LossBundle {
        smooth,
        giou,
        focal,
        dice,
        det,
        seg,
        total,
    }
}
