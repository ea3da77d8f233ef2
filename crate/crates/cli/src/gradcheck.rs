//! The gradient verification suite: finite differences against the
//! analytic backward pass, first over a battery of primitive ops and
//! losses, then end-to-end through the full model (embeddings, fusion
//! layers, dynamic token elimination, both heads, joint loss) on
//! synthetic grounding samples at a micro configuration.

use eevg_core::config::EevgConfig;
use eevg_core::gradcheck::{central_diff_check, GradCheckReport};
use eevg_core::losses::{dice_loss, focal_loss, giou_loss, smooth_l1_loss, LossConfig};
use eevg_core::model::{eevg_forward, embed_tokens, embed_visual, ElimMode, ModelWeights};
use eevg_core::rng::Rng;
use eevg_core::synthgen::{generate_sample, vocab_size, SynthSample};
use eevg_core::losses::joint_loss;
use eevg_core::tape::{Tape, Var};
use eevg_core::{Error, Result, Tensor};

/// One checked graph: its label, worst relative error, and how many
/// scalar derivatives were compared.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl SuiteOutcome {
    fn from_report(name: &str, r: &GradCheckReport) -> Self {
        SuiteOutcome {
            name: name.to_string(),
            max_rel_err: if r.loss.is_finite() {
                r.max_rel_err
            } else {
                f64::INFINITY
            },
            checked: r.checked,
        }
    }
}

/// The micro configuration the suite runs at: 16×16 images in a 4×4
/// patch grid (N = 16), C = 16, two heads, two fusion layers.
pub fn micro_config() -> EevgConfig {
    EevgConfig {
        height: 16,
        width: 16,
        patch: 4,
        l_max: 4,
        c: 16,
        c_v: 12,
        c_l: 8,
        heads: 2,
        layers: 2,
        ffn: 24,
        ..EevgConfig::default()
    }
}

const EPS: f64 = 1e-5;

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect()
}

/// Values in ±[margin, 1]: keeps finite differences away from the kinks
/// of relu/min/max and from saturating regions.
fn away_from_zero(rng: &mut Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            sign * (margin + (1.0 - margin) * rng.uniform())
        })
        .collect()
}

/// Finite-difference checks for every differentiable primitive the model
/// relies on, each on small random-but-seeded inputs.
pub fn primitive_battery(seed: u64) -> Vec<SuiteOutcome> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let mut run = |name: &str,
                   inputs: Vec<(Vec<usize>, Vec<f64>)>,
                   build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var| {
        let report = central_diff_check(&inputs, build, EPS);
        out.push(SuiteOutcome::from_report(name, &report));
    };

    let a = (vec![3, 4], uniform(&mut rng, 12, -1.0, 1.0));
    let b = (vec![4, 5], uniform(&mut rng, 20, -1.0, 1.0));
    let c = (vec![5, 2], uniform(&mut rng, 10, -1.0, 1.0));
    run("matmul_chain", vec![a, b, c], &|t, v| {
        let ab = t.matmul(v[0], v[1]);
        let abc = t.matmul(ab, v[2]);
        t.sum_all(abc)
    });

    let x = (vec![4, 6], uniform(&mut rng, 24, -1.0, 1.0));
    run("transpose_slice_concat", vec![x], &|t, v| {
        let xt = t.transpose(v[0]); // 6×4
        let left = t.slice_cols(xt, 0, 2);
        let right = t.slice_cols(xt, 1, 4);
        let cat = t.concat_cols(left, right); // 6×5
        let sq = t.mul(cat, cat);
        t.sum_all(sq)
    });

    let x = (vec![3, 5], uniform(&mut rng, 15, -2.0, 2.0));
    let w = (vec![3, 5], uniform(&mut rng, 15, 0.1, 1.0));
    run("masked_softmax", vec![x, w], &|t, v| {
        let sm = t.softmax_rows_masked(v[0], Some(vec![true, true, false, true, false]));
        let weighted = t.mul(sm, v[1]);
        t.sum_all(weighted)
    });

    let x = (vec![4, 6], uniform(&mut rng, 24, -1.5, 1.5));
    let gamma = (vec![6], uniform(&mut rng, 6, 0.5, 1.5));
    let beta = (vec![6], uniform(&mut rng, 6, -0.3, 0.3));
    run("layer_norm", vec![x, gamma, beta], &|t, v| {
        let ln = t.layer_norm(v[0], v[1], v[2], 1e-5);
        let sq = t.mul(ln, ln);
        t.sum_all(sq)
    });

    let x = (vec![2, 7], uniform(&mut rng, 14, -2.0, 2.0));
    let y = (vec![2, 7], uniform(&mut rng, 14, -2.0, 2.0));
    run("gelu_sigmoid", vec![x, y], &|t, v| {
        let g = t.gelu(v[0]);
        let s = t.sigmoid(v[1]);
        let prod = t.mul(g, s);
        t.sum_all(prod)
    });

    let x = (vec![3, 3], away_from_zero(&mut rng, 9, 0.05));
    run("relu_log_sigmoid", vec![x], &|t, v| {
        let r = t.relu(v[0]);
        let ls = t.log_sigmoid(v[0]);
        let s = t.add(r, ls);
        t.sum_all(s)
    });

    let x = (vec![2, 4], uniform(&mut rng, 8, 0.2, 2.0));
    run("powf_ln", vec![x], &|t, v| {
        let p = t.powf(v[0], 1.7);
        let l = t.ln(v[0]);
        let s = t.add(p, l);
        t.sum_all(s)
    });

    let img = (vec![5, 6], uniform(&mut rng, 30, -1.0, 1.0));
    let ker = (vec![3, 3], uniform(&mut rng, 9, -0.5, 0.5));
    let bias = (vec![1], uniform(&mut rng, 1, -0.2, 0.2));
    run("conv2d_same", vec![img, ker, bias], &|t, v| {
        let y = t.conv2d_same(v[0], v[1], v[2]);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    });

    let x = (vec![5, 3], uniform(&mut rng, 15, -1.0, 1.0));
    run("gather_scatter_rows", vec![x], &|t, v| {
        let g = t.gather_rows(v[0], vec![4, 0, 2]);
        let s = t.scatter_rows(g, vec![1, 5, 0], 7);
        let sq = t.mul(s, s);
        t.sum_all(sq)
    });

    let patches = (vec![4, 4], uniform(&mut rng, 16, -1.0, 1.0));
    run("patches_to_image", vec![patches], &|t, v| {
        let img = t.patches_to_image(v[0], 2, 2, 2);
        let sq = t.mul(img, img);
        t.sum_all(sq)
    });

    let a = (vec![2, 5], away_from_zero(&mut rng, 10, 0.02));
    let b = (vec![2, 5], away_from_zero(&mut rng, 10, 0.02));
    run("min_max_elem", vec![a, b], &|t, v| {
        let hi = t.max_elem(v[0], v[1]);
        let lo = t.min_elem(v[0], v[1]);
        let d = t.sub(hi, lo);
        t.sum_all(d)
    });

    let x = (vec![2, 6], uniform(&mut rng, 12, -1.0, 1.0));
    let bias = (vec![6], uniform(&mut rng, 6, -0.5, 0.5));
    run("add_row_reshape_mean", vec![x, bias], &|t, v| {
        let y = t.add_row(v[0], v[1]);
        let r = t.reshape(y, vec![3, 4]);
        t.mean_all(r)
    });

    // Loss battery. Predictions pass through a sigmoid so probabilities
    // stay strictly inside (0, 1) under perturbation.
    let gt_box = Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.4, 0.3]).unwrap();
    let x = (vec![1, 4], uniform(&mut rng, 4, -0.8, 0.8));
    {
        let gt = gt_box.clone();
        run("smooth_l1_loss", vec![x.clone()], &move |t, v| {
            let pred = t.sigmoid(v[0]);
            let g = t.constant(gt.clone());
            smooth_l1_loss(t, pred, g)
        });
    }
    {
        let gt = gt_box.clone();
        run("giou_loss", vec![x], &move |t, v| {
            let pred = t.sigmoid(v[0]);
            let g = t.constant(gt.clone());
            giou_loss(t, pred, g)
        });
    }

    let gt_mask = Tensor::new(
        vec![4, 4],
        (0..16).map(|i| f64::from(i % 3 == 0)).collect(),
    )
    .unwrap();
    let logits = (vec![4, 4], uniform(&mut rng, 16, -1.5, 1.5));
    {
        let gt = gt_mask.clone();
        run("focal_loss", vec![logits.clone()], &move |t, v| {
            let prob = t.sigmoid(v[0]);
            focal_loss(t, prob, &gt, 2.0, 0.25)
        });
    }
    {
        let gt = gt_mask;
        run("dice_loss", vec![logits], &move |t, v| {
            let prob = t.sigmoid(v[0]);
            dice_loss(t, prob, &gt, 1.0)
        });
    }

    out
}

/// True when every layer's normalized token score clears the threshold
/// by a margin, so finite differences cannot flip a keep decision.
fn elimination_margin_ok(
    weights: &ModelWeights<Tensor<f64>>,
    cfg: &EevgConfig,
    sample: &SynthSample,
) -> Result<bool> {
    let mut t = Tape::<f64>::no_grad();
    let w = weights.bind_const(&mut t);
    let f_v = embed_visual(&mut t, &sample.image, cfg, &w.embed)?;
    let f_l = embed_tokens(&mut t, &sample.ids, &w.embed)?;
    let (_, diag) = eevg_forward(&mut t, f_v, f_l, &sample.pad_mask(), &w, cfg, ElimMode::Dynamic)?;
    Ok(diag
        .layers
        .iter()
        .all(|l| l.scores.values.iter().all(|&s| (s - cfg.alpha).abs() > 1e-3)))
}

/// End-to-end check for one seed: a synthetic sample and fresh weights,
/// joint loss differentiated against every weight scalar with dynamic
/// elimination active.
///
/// Seeds whose elimination decision sits within 1e-3 of the threshold
/// are deterministically re-derived (finite differences would straddle
/// the discontinuity); the outcome records the seed actually used.
pub fn pipeline_check(seed: u64) -> Result<SuiteOutcome> {
    let cfg = micro_config();
    for attempt in 0..50u64 {
        let s = seed.wrapping_add(attempt.wrapping_mul(1_000_003));
        let sample = generate_sample(s, &cfg)?;
        let mut rng = Rng::new(s ^ 0x9e37_79b9_7f4a_7c15);
        let weights = ModelWeights::<Tensor<f64>>::init(&cfg, vocab_size(), &mut rng)?;
        if !elimination_margin_ok(&weights, &cfg, &sample)? {
            continue;
        }

        let mut inputs = Vec::new();
        weights.visit(&mut |w: &Tensor<f64>| inputs.push((w.shape.clone(), w.data.clone())));
        let loss_cfg = LossConfig::default();
        let report = central_diff_check(
            &inputs,
            |t, vars| {
                let mut i = 0;
                let w = weights.map(&mut |_| {
                    let v = vars[i];
                    i += 1;
                    v
                });
                let f_v = embed_visual(t, &sample.image, &cfg, &w.embed).unwrap();
                let f_l = embed_tokens(t, &sample.ids, &w.embed).unwrap();
                let (pred, _) =
                    eevg_forward(t, f_v, f_l, &sample.pad_mask(), &w, &cfg, ElimMode::Dynamic)
                        .unwrap();
                joint_loss(t, pred.bbox, pred.mask.mask, &sample.gt, &loss_cfg).total
            },
            EPS,
        );
        return Ok(SuiteOutcome::from_report(
            &format!("pipeline[seed {s}]"),
            &report,
        ));
    }
    Err(Error::Precondition(format!(
        "no sample near seed {seed} gives a margin-safe elimination decision"
    )))
}

/// The whole suite: primitive battery plus one end-to-end check per seed.
pub fn run_micro_suite(seeds: &[u64]) -> Result<Vec<SuiteOutcome>> {
    if seeds.is_empty() {
        return Err(Error::Precondition("need at least one seed".into()));
    }
    let mut out = primitive_battery(0xba77e51);
    for &s in seeds {
        out.push(pipeline_check(s)?);
    }
    Ok(out)
}
