//! Renders one synthetic sample through a trained model: per-layer
//! token-score maps, predicted vs ground-truth masks, and the input
//! image as portable graymaps, plus box/retention numbers.

use std::path::{Path, PathBuf};

use eevg_core::config::EevgConfig;
use eevg_core::heads::BBox;
use eevg_core::model::{eevg_forward, embed_tokens, embed_visual, ElimMode, ModelWeights};
use eevg_core::pgm::write_pgm;
use eevg_core::synthgen::{generate_sample, vocab_size};
use eevg_core::{Result, Tape, Tensor};

use crate::check_weight_shapes;
use crate::eval::mask_iou;

#[derive(Debug, Clone)]
pub struct DemoReport {
    pub expression: String,
    pub pred_box: BBox,
    pub gt_box: BBox,
    pub box_iou: f64,
    pub mask_iou: f64,
    /// Surviving token count after each fusion layer.
    pub keep_counts: Vec<usize>,
    /// Every file written, in write order.
    pub files: Vec<PathBuf>,
}

/// Grayscale view of an H×W×3 image (Rec. 601 luma).
fn luma(image: &[f64]) -> Vec<f64> {
    image
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

/// Generates sample `seed`, runs the model with dynamic elimination, and
/// writes `input.pgm`, `scores_layer<i>.pgm`, `mask_pred.pgm`, and
/// `mask_gt.pgm` into `out_dir` (created if missing).
pub fn run_demo(
    w: &ModelWeights<Tensor<f32>>,
    cfg: &EevgConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<DemoReport> {
    check_weight_shapes(w, cfg, vocab_size())?;
    let sample = generate_sample(seed, cfg)?;

    let mut t = Tape::<f32>::no_grad();
    let wb = w.bind_const(&mut t);
    let f_v = embed_visual(&mut t, &sample.image, cfg, &wb.embed)?;
    let f_l = embed_tokens(&mut t, &sample.ids, &wb.embed)?;
    let (pred, diag) = eevg_forward(
        &mut t,
        f_v,
        f_l,
        &sample.pad_mask(),
        &wb,
        cfg,
        ElimMode::Dynamic,
    )?;

    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut emit = |name: String, w_px: usize, h_px: usize, values: &[f64]| -> Result<()> {
        let path = out_dir.join(name);
        write_pgm(&path, w_px, h_px, values)?;
        files.push(path);
        Ok(())
    };

    emit(
        "input.pgm".into(),
        cfg.width,
        cfg.height,
        &luma(&sample.image),
    )?;
    for (i, layer) in diag.layers.iter().enumerate() {
        emit(format!("scores_layer{i}.pgm"), cfg.gw(), cfg.gh(), &layer.grid)?;
    }
    let mask: Vec<f64> = t
        .val(pred.mask.mask)
        .data
        .iter()
        .map(|v| *v as f64)
        .collect();
    emit("mask_pred.pgm".into(), cfg.width, cfg.height, &mask)?;
    emit(
        "mask_gt.pgm".into(),
        sample.gt.mask_w,
        sample.gt.mask_h,
        &sample.gt.mask,
    )?;

    let pred_box = BBox::from_tensor(t.val(pred.bbox));
    Ok(DemoReport {
        expression: sample.expression(),
        pred_box,
        gt_box: sample.gt.bbox,
        box_iou: pred_box.iou(&sample.gt.bbox),
        mask_iou: mask_iou(&mask, &sample.gt.mask),
        keep_counts: diag.layers.iter().map(|l| l.keep_count).collect(),
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use eevg_core::pgm::read_pgm;
    use eevg_core::rng::Rng;

    #[test]
    fn demo_writes_all_expected_images() {
        let cfg = EevgConfig::default();
        let mut rng = Rng::new(21);
        let w = ModelWeights::<Tensor<f32>>::init(&cfg, vocab_size(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let report = run_demo(&w, &cfg, 42, dir.path()).unwrap();
        assert_eq!(report.files.len(), 3 + cfg.layers);
        assert!(!report.expression.is_empty());
        assert_eq!(report.keep_counts.len(), cfg.layers);

        for f in &report.files {
            assert!(f.exists(), "missing {f:?}");
        }
        let (w_px, h_px, vals) = read_pgm(&dir.path().join("scores_layer0.pgm")).unwrap();
        assert_eq!((w_px, h_px), (cfg.gw(), cfg.gh()));
        assert_eq!(vals.len(), cfg.n());
        let (mw, mh, mask) = read_pgm(&dir.path().join("mask_pred.pgm")).unwrap();
        assert_eq!((mw, mh), (cfg.width, cfg.height));
        assert!(mask.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // The ground-truth mask round-trips to exactly {0, 1}.
        let (_, _, gt) = read_pgm(&dir.path().join("mask_gt.pgm")).unwrap();
        assert!(gt.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn mismatched_weights_are_refused_before_any_io() {
        let cfg = EevgConfig::default();
        let mut small = cfg;
        small.c = 32;
        small.ffn = 43;
        let mut rng = Rng::new(3);
        let w = ModelWeights::<Tensor<f32>>::init(&small, vocab_size(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("never");
        assert!(run_demo(&w, &cfg, 1, &out).is_err());
        assert!(!out.exists());
    }
}
