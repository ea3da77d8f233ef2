//! Grounding metrics: P@0.5 on boxes, mean mask IoU, and per-layer
//! token-retention statistics over a dataset slice.

use eevg_core::dataset::Record;
use eevg_core::heads::BBox;
use eevg_core::model::{eevg_forward, embed_tokens, embed_visual, ElimMode, ModelWeights};
use eevg_core::config::EevgConfig;
use eevg_core::{Error, Result, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// Number of samples evaluated.
    pub n: usize,
    /// Fraction of samples whose predicted box has IoU strictly > 0.5
    /// with the ground truth.
    pub p_at_05: f64,
    /// Mean IoU of the binarized (0.5) predicted mask vs ground truth.
    pub miou: f64,
    /// Mean and standard deviation of the final surviving token count.
    pub mean_final_keep: f64,
    pub std_final_keep: f64,
    /// Final keep count per sample, in input order.
    pub per_sample_keep: Vec<usize>,
    /// Mean keep count after each fusion layer.
    pub per_layer_mean_keep: Vec<f64>,
}

/// IoU of two soft masks after binarizing both at 0.5. An empty union
/// (both masks blank) counts as a perfect match.
pub fn mask_iou(pred: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mask length mismatch");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

/// Runs the model over `records` without gradients and aggregates
/// detection, segmentation, and retention metrics.
pub fn evaluate(
    w: &ModelWeights<Tensor<f32>>,
    cfg: &EevgConfig,
    records: &[Record],
    mode: ElimMode,
) -> Result<EvalOutcome> {
    if records.is_empty() {
        return Err(Error::Precondition("cannot evaluate an empty slice".into()));
    }
    let mut correct = 0usize;
    let mut iou_sum = 0.0;
    let mut per_sample_keep = Vec::with_capacity(records.len());
    let mut layer_sums = vec![0.0; cfg.layers];

    for r in records {
        let mut t = Tape::<f32>::no_grad();
        let wb = w.bind_const(&mut t);
        let f_v = embed_visual(&mut t, &r.image, cfg, &wb.embed)?;
        let f_l = embed_tokens(&mut t, &r.ids, &wb.embed)?;
        let (pred, diag) = eevg_forward(&mut t, f_v, f_l, &r.pad_mask(), &wb, cfg, mode)?;

        let pred_box = BBox::from_tensor(t.val(pred.bbox));
        if pred_box.iou(&r.gt.bbox) > 0.5 {
            correct += 1;
        }
        let mask: Vec<f64> = t.val(pred.mask.mask).data.iter().map(|v| *v as f64).collect();
        iou_sum += mask_iou(&mask, &r.gt.mask);

        per_sample_keep.push(diag.final_keep_count());
        for (sum, layer) in layer_sums.iter_mut().zip(&diag.layers) {
            *sum += layer.keep_count as f64;
        }
    }

    let keeps: Vec<f64> = per_sample_keep.iter().map(|&k| k as f64).collect();
    let (mean_final_keep, std_final_keep) = mean_std(&keeps);
    Ok(EvalOutcome {
        n: records.len(),
        p_at_05: correct as f64 / records.len() as f64,
        miou: iou_sum / records.len() as f64,
        mean_final_keep,
        std_final_keep,
        per_sample_keep,
        per_layer_mean_keep: layer_sums
            .iter()
            .map(|s| s / records.len() as f64)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use eevg_core::rng::Rng;
    use eevg_core::synthgen::{generate_dataset, vocab_size};

    #[test]
    fn box_iou_exactly_one_third_is_not_correct() {
        // Corner form (0,0)-(1,1) vs (0.5,0)-(1.5,1): overlap 0.5, union
        // 1.5, IoU = 1/3 — on the wrong side of the strict > 0.5 rule.
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        let b = BBox::new(1.0, 0.5, 1.0, 1.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert!(a.iou(&b) <= 0.5);
        // Identical boxes are correct under the same rule.
        assert!(a.iou(&a) > 0.5);
    }

    #[test]
    fn mask_iou_identities() {
        let a = vec![1.0, 0.0, 1.0, 0.0];
        let b = vec![1.0, 1.0, 0.0, 0.0];
        assert_eq!(mask_iou(&a, &a), 1.0);
        assert!((mask_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_iou(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(mask_iou(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        // Binarization at 0.5: 0.49 is background, 0.51 foreground.
        assert_eq!(mask_iou(&[0.49], &[1.0]), 0.0);
        assert_eq!(mask_iou(&[0.51], &[1.0]), 1.0);
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert!((m - 5.0).abs() < 1e-12);
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_order_invariant_in_aggregate() {
        let cfg = EevgConfig::default();
        let mut rng = Rng::new(5);
        let w = ModelWeights::<Tensor<f32>>::init(&cfg, vocab_size(), &mut rng).unwrap();
        let samples = generate_dataset(400, 6, &cfg).unwrap();
        let mut records: Vec<Record> = samples.iter().map(Record::from).collect();

        let a = evaluate(&w, &cfg, &records, ElimMode::Dynamic).unwrap();
        records.reverse();
        let b = evaluate(&w, &cfg, &records, ElimMode::Dynamic).unwrap();

        assert_eq!(a.n, 6);
        assert_eq!(a.p_at_05, b.p_at_05);
        assert_eq!(a.miou, b.miou);
        assert_eq!(a.mean_final_keep, b.mean_final_keep);
        assert_eq!(
            a.per_sample_keep.iter().rev().copied().collect::<Vec<_>>(),
            b.per_sample_keep
        );
        assert_eq!(a.per_layer_mean_keep.len(), cfg.layers);
        // Retention is monotone: later layers keep no more than earlier.
        for w2 in a.per_layer_mean_keep.windows(2) {
            assert!(w2[1] <= w2[0] + 1e-12);
        }
    }

    #[test]
    fn static_mode_keep_counts_are_constant_dynamic_varies_more() {
        let cfg = EevgConfig::default();
        let mut rng = Rng::new(9);
        let w = ModelWeights::<Tensor<f32>>::init(&cfg, vocab_size(), &mut rng).unwrap();
        let samples = generate_dataset(900, 8, &cfg).unwrap();
        let records: Vec<Record> = samples.iter().map(Record::from).collect();

        let st = evaluate(&w, &cfg, &records, ElimMode::Static(5)).unwrap();
        assert_eq!(st.std_final_keep, 0.0);
        let expected = cfg.n() - 5 * cfg.layers;
        assert!(st.per_sample_keep.iter().all(|&k| k == expected));
    }
}
