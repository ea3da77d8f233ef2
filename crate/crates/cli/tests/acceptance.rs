//! The project's acceptance gate: nine criteria covering gradients,
//! cost scaling, head sizing, elimination behavior, losses, the
//! end-to-end toy task, and weight serialization. Runs without the
//! default test harness so each criterion prints exactly one PASS/FAIL
//! line; any failure exits nonzero.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use eevg_cli::bench::{bench_fusion_scaling, BenchRow, BenchSettings, FusionKind};
use eevg_cli::eval::{evaluate, EvalOutcome};
use eevg_cli::fit::{fit_linear, fit_quadratic};
use eevg_cli::gradcheck::run_micro_suite;
use eevg_cli::train::{run_training, EarlyStop, TrainOptions};
use eevg_core::config::EevgConfig;
use eevg_core::dataset::Record;
use eevg_core::elimination::{
    adaptive_spatial_attention, compose_index_maps, keep_positions, minmax_normalize,
    AttentionScoreMap, TokenSet,
};
use eevg_core::heads::HeadWeights;
use eevg_core::losses::{dice_loss, focal_loss, giou_loss, joint_loss, smooth_l1_loss, GroundTruth,
    LossConfig};
use eevg_core::model::{eevg_forward, embed_tokens, embed_visual, ElimMode, ModelWeights};
use eevg_core::rng::Rng;
use eevg_core::synthgen::{generate_dataset, generate_sample, vocab_size};
use eevg_core::weights_io::{from_bytes, to_bytes};
use eevg_core::{Error, Tape, Tensor, Var};

/// Artifacts criterion 7 hands to criterion 8.
struct Trained {
    weights: ModelWeights<Tensor<f32>>,
    cfg: EevgConfig,
    test: Vec<Record>,
    dynamic: EvalOutcome,
}

#[derive(Default)]
struct Ctx {
    trained: Option<Trained>,
}

// ── criterion 1: gradient suite ──────────────────────────────────────

fn criterion_1(_: &mut Ctx) -> String {
    let t0 = Instant::now();
    let outcomes = run_micro_suite(&[1, 2, 3, 4, 5]).expect("gradient suite failed to run");
    let pipelines = outcomes
        .iter()
        .filter(|o| o.name.starts_with("pipeline"))
        .count();
    assert_eq!(pipelines, 5, "expected 5 end-to-end checks");
    let mut worst = 0.0f64;
    let mut derivatives = 0;
    for o in &outcomes {
        assert!(
            o.max_rel_err <= 1e-4,
            "{}: rel err {:.3e} exceeds 1e-4",
            o.name,
            o.max_rel_err
        );
        worst = worst.max(o.max_rel_err);
        derivatives += o.checked;
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 120.0, "suite took {secs:.1}s, budget is 120s");
    format!(
        "{} graphs / {derivatives} derivatives, worst rel err {worst:.2e}, {secs:.1}s",
        outcomes.len()
    )
}

// ── criterion 2: fusion cost scaling ─────────────────────────────────

fn series(rows: &[BenchRow], kind: FusionKind) -> (Vec<usize>, Vec<f64>) {
    let mut pairs: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.kind == kind)
        .map(|r| (r.l, r.median_ms))
        .collect();
    pairs.sort_unstable_by_key(|&(l, _)| l);
    pairs.into_iter().unzip()
}

fn criterion_2(_: &mut Ctx) -> String {
    let t0 = Instant::now();
    let settings = BenchSettings::default();
    assert_eq!(
        (settings.n, settings.c, settings.layers),
        (196, 192, 3),
        "benchmark operating point"
    );
    assert_eq!(settings.l_list, vec![64, 128, 256, 512, 1024]);
    let out = bench_fusion_scaling(&[FusionKind::Decoder, FusionKind::Encoder], &settings)
        .expect("benchmark failed to run");
    for w in &out.warnings {
        eprintln!("  bench warning: {w}");
    }
    let (dl, dt) = series(&out.rows, FusionKind::Decoder);
    let (el, et) = series(&out.rows, FusionKind::Encoder);
    let dec = fit_linear("decoder", &dl, &dt).unwrap();
    let enc_lin = fit_linear("encoder", &el, &et).unwrap();
    let enc_quad = fit_quadratic("encoder", settings.n, &el, &et).unwrap();
    assert!(
        dec.r2 >= 0.98,
        "decoder linear fit R² {:.4} below 0.98",
        dec.r2
    );
    assert!(
        enc_quad.r2 > enc_lin.r2,
        "encoder quadratic R² {:.4} not above linear R² {:.4}",
        enc_quad.r2,
        enc_lin.r2
    );
    let ratio_lo = et.first().unwrap() / dt.first().unwrap();
    let ratio_hi = et.last().unwrap() / dt.last().unwrap();
    assert!(
        ratio_hi > ratio_lo,
        "encoder/decoder ratio should grow with L: {ratio_lo:.2} -> {ratio_hi:.2}"
    );
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 300.0, "benchmark took {secs:.1}s, budget is 300s");
    format!(
        "decoder linear R²={:.4}, encoder quadratic R²={:.4} > linear {:.4}, \
         enc/dec ratio {ratio_lo:.2}->{ratio_hi:.2} over L=64..1024, {secs:.0}s",
        dec.r2, enc_quad.r2, enc_lin.r2
    )
}

// ── criterion 3: mask head size ──────────────────────────────────────

fn criterion_3(_: &mut Ctx) -> String {
    let (c, p) = (768usize, 16usize);
    let heads = HeadWeights::<Tensor<f32>>::init(c, p, &mut Rng::new(0));
    let mask = heads.mask_head_params();
    // Independent closed form: C→C MLP, C→P² projection, 5×5 conv + bias.
    let expected = (c * c + c) + (c * p * p + p * p) + 25 + 1;
    assert_eq!(mask, expected, "mask head parameter count formula");
    assert_eq!(mask, 787_482, "mask head parameter count");
    let label = format!("{:.2}M", mask as f64 / 1e6);
    assert_eq!(label, "0.79M");
    format!("mask head at C={c}, P={p}: {mask} parameters = {label}")
}

// ── criterion 4: elimination invariants ──────────────────────────────

fn criterion_4(_: &mut Ctx) -> String {
    let alpha = EevgConfig::default().alpha;
    let mut rng = Rng::new(0xe11);

    for trial in 0..1000 {
        let gh = 2 + rng.below(7);
        let gw = 2 + rng.below(7);
        let n = gh * gw;
        let mut kept: Vec<usize> = (0..n).filter(|_| rng.uniform() < 0.8).collect();
        if kept.len() < 2 {
            kept = vec![0, n - 1];
        }
        let ts = TokenSet::new(kept.clone(), n).unwrap();
        let raw = AttentionScoreMap::new(
            gh,
            gw,
            (0..kept.len()).map(|_| rng.uniform() * 5.0).collect(),
        );
        let norm = minmax_normalize(&raw);

        let lo = norm.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = norm.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo >= 0.0 && hi <= 1.0, "trial {trial}: range [{lo}, {hi}]");
        assert_eq!(hi, 1.0, "trial {trial}: max must normalize to exactly 1");
        for (i, &a) in raw.values.iter().enumerate() {
            for (j, &b) in raw.values.iter().enumerate() {
                assert_eq!(
                    a < b,
                    norm.values[i] < norm.values[j],
                    "trial {trial}: normalization must preserve order"
                );
            }
        }

        let keep = keep_positions(&norm, alpha);
        assert!(!keep.is_empty(), "trial {trial}: elimination emptied the set");
        assert!(keep.windows(2).all(|w| w[0] < w[1]), "keep must be sorted");
        let argmax = norm
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(keep.contains(&argmax), "trial {trial}: argmax must survive");
        for (pos, &v) in norm.values.iter().enumerate() {
            assert_eq!(
                keep.contains(&pos),
                v >= alpha,
                "trial {trial}: threshold rule violated at position {pos}"
            );
        }

        let composed = compose_index_maps(&ts, &keep).unwrap();
        let want: Vec<usize> = keep.iter().map(|&p| ts.kept()[p]).collect();
        assert_eq!(composed.kept(), &want[..], "trial {trial}: index map");
        assert_eq!(composed.n_total(), n);
    }

    // Forward-pass invariants under dynamic elimination.
    let cfg = EevgConfig::default();
    let mut wrng = Rng::new(0xf0a);
    let mut min_final = usize::MAX;
    for i in 0..100u64 {
        let w = ModelWeights::<Tensor<f32>>::init(&cfg, vocab_size(), &mut wrng).unwrap();
        let sample = generate_sample(40_000 + i, &cfg).unwrap();
        let mut t = Tape::<f32>::no_grad();
        let wb = w.bind_const(&mut t);
        let f_v = embed_visual(&mut t, &sample.image, &cfg, &wb.embed).unwrap();
        let f_l = embed_tokens(&mut t, &sample.ids, &wb.embed).unwrap();
        let (_, diag) =
            eevg_forward(&mut t, f_v, f_l, &sample.pad_mask(), &wb, &cfg, ElimMode::Dynamic)
                .unwrap();
        assert_eq!(diag.layers.len(), cfg.layers);

        let mut prev = TokenSet::full(cfg.n());
        for trace in &diag.layers {
            assert_eq!(trace.scores.values.len(), prev.len());
            assert_eq!(trace.keep_count, trace.tokens.len());
            assert!(trace.keep_count >= 1);
            assert!(trace.keep_count <= prev.len(), "retention must be monotone");
            for (pos, &v) in trace.scores.values.iter().enumerate() {
                let original = prev.kept()[pos];
                let survived = trace.tokens.position_of(original).is_some();
                assert_eq!(survived, v >= cfg.alpha, "forward {i}: threshold rule");
            }
            prev = trace.tokens.clone();
        }
        min_final = min_final.min(diag.final_keep_count());
    }
    format!(
        "1000 score maps and 100 forwards hold every invariant (final keep never below {min_final})"
    )
}

// ── criterion 5: spatial attention vs brute force ────────────────────

fn criterion_5(_: &mut Ctx) -> String {
    let mut rng = Rng::new(0xa5a);
    let mut max_diff = 0.0f64;
    for _ in 0..200 {
        let gh = 1 + rng.below(12);
        let gw = 1 + rng.below(12);
        let n = gh * gw;
        let mut kept: Vec<usize> = (0..n).filter(|_| rng.uniform() < 0.7).collect();
        if kept.is_empty() {
            kept.push(rng.below(n));
        }
        let ts = TokenSet::new(kept.clone(), n).unwrap();
        let values: Vec<f64> = (0..ts.len()).map(|_| rng.uniform() * 3.0).collect();
        let k = 1 + rng.below(2);

        let got = adaptive_spatial_attention(&AttentionScoreMap::new(gh, gw, values.clone()), &ts, k)
            .unwrap();

        // Brute force straight from the definition: sum the scores of
        // surviving in-bounds neighbors in the (2k+1)² window; missing
        // cells contribute zero; the denominator never shrinks.
        let mut grid = vec![0.0; n];
        for (j, &o) in kept.iter().enumerate() {
            grid[o] = values[j];
        }
        for (j, &o) in kept.iter().enumerate() {
            let (r, c) = (o / gw, o % gw);
            let mut acc = 0.0;
            for rr in r.saturating_sub(k)..=(r + k).min(gh - 1) {
                for cc in c.saturating_sub(k)..=(c + k).min(gw - 1) {
                    acc += grid[rr * gw + cc];
                }
            }
            let want = acc / ((2 * k + 1) * (2 * k + 1)) as f64;
            max_diff = max_diff.max((got.values[j] - want).abs());
        }
    }
    assert!(max_diff <= 1e-10, "max |Δ| = {max_diff:.3e} exceeds 1e-10");
    format!("200 grids up to 12×12 match brute force, max |Δ| = {max_diff:.2e}")
}

// ── criterion 6: loss identities ─────────────────────────────────────

fn scalar_of(build: impl Fn(&mut Tape<f64>) -> Var) -> f64 {
    let mut t = Tape::<f64>::no_grad();
    let v = build(&mut t);
    t.val(v).item()
}

fn box_pair(t: &mut Tape<f64>, a: [f64; 4], b: [f64; 4]) -> (Var, Var) {
    (
        t.constant(Tensor::new(vec![1, 4], a.to_vec()).unwrap()),
        t.constant(Tensor::new(vec![1, 4], b.to_vec()).unwrap()),
    )
}

fn criterion_6(_: &mut Ctx) -> String {
    // Identical boxes: both box losses vanish.
    let same = scalar_of(|t| {
        let (a, b) = box_pair(t, [0.5, 0.5, 0.4, 0.3], [0.5, 0.5, 0.4, 0.3]);
        giou_loss(t, a, b)
    });
    assert!(same.abs() < 1e-12, "identical boxes: giou loss {same}");

    // Diagonally separated unit boxes: hull 4, union 2, IoU 0 → loss 1.5.
    let disjoint = scalar_of(|t| {
        let (a, b) = box_pair(t, [0.5, 0.5, 1.0, 1.0], [1.5, 1.5, 1.0, 1.0]);
        giou_loss(t, a, b)
    });
    assert!(
        (disjoint - 1.5).abs() <= 1e-9,
        "disjoint diagonal unit boxes: giou loss {disjoint}, want 1.5"
    );

    // Two zero-area boxes: defined as loss exactly 1.
    let degenerate = scalar_of(|t| {
        let (a, b) = box_pair(t, [0.3, 0.3, 0.0, 0.0], [0.7, 0.7, 0.0, 0.0]);
        giou_loss(t, a, b)
    });
    assert_eq!(degenerate, 1.0, "zero-area boxes define giou loss 1");

    // GIoU loss stays within [0, 2] across random box pairs.
    let mut rng = Rng::new(0x910);
    for _ in 0..100 {
        let mut draw = || {
            [
                rng.uniform(),
                rng.uniform(),
                0.05 + 0.75 * rng.uniform(),
                0.05 + 0.75 * rng.uniform(),
            ]
        };
        let (ba, bb) = (draw(), draw());
        let v = scalar_of(|t| {
            let (a, b) = box_pair(t, ba, bb);
            giou_loss(t, a, b)
        });
        assert!((0.0..=2.0).contains(&v), "giou loss {v} out of [0,2]");
    }

    // Smooth-L1: quadratic inside the unit diff, linear outside,
    // averaged over the 4 components.
    let quad = scalar_of(|t| {
        let (a, b) = box_pair(t, [0.5, 0.5, 0.5, 0.5], [0.0, 0.0, 0.0, 0.0]);
        smooth_l1_loss(t, a, b)
    });
    assert!((quad - 0.125).abs() < 1e-12, "smooth-l1 quadratic region: {quad}");
    let lin = scalar_of(|t| {
        let (a, b) = box_pair(t, [2.0, 2.0, 2.0, 2.0], [0.0, 0.0, 0.0, 0.0]);
        smooth_l1_loss(t, a, b)
    });
    assert!((lin - 1.5).abs() < 1e-12, "smooth-l1 linear region: {lin}");

    // Focal at p = 0.5: −α_t·0.25·ln(0.5) per pixel.
    let gt1 = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
    let f1 = scalar_of(|t| {
        let p = t.constant(Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap());
        focal_loss(t, p, &gt1, 2.0, 0.25)
    });
    let want1 = 0.25 * 0.25 * 0.5f64.ln().abs();
    assert!((f1 - want1).abs() < 1e-12, "focal on foreground: {f1} vs {want1}");
    let gt0 = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
    let f0 = scalar_of(|t| {
        let p = t.constant(Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap());
        focal_loss(t, p, &gt0, 2.0, 0.25)
    });
    let want0 = 0.75 * 0.25 * 0.5f64.ln().abs();
    assert!((f0 - want0).abs() < 1e-12, "focal on background: {f0} vs {want0}");

    // Dice: exact match → 0; empty prediction against S foreground
    // pixels → 1 − ε/(S+ε).
    let gt = Tensor::new(vec![2, 4], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let exact = scalar_of(|t| {
        let p = t.constant(gt.clone());
        dice_loss(t, p, &gt, 1.0)
    });
    assert!(exact.abs() < 1e-12, "dice on exact match: {exact}");
    let blank = scalar_of(|t| {
        let p = t.constant(Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap());
        dice_loss(t, p, &gt, 1.0)
    });
    assert!((blank - 0.8).abs() < 1e-12, "dice on empty prediction: {blank}");

    // Joint composition: det = smooth + giou, seg = focal + dice,
    // total = 0.1·det + 1.0·seg under the default weights.
    let cfg = LossConfig::default();
    assert_eq!((cfg.lambda_det, cfg.lambda_seg), (0.1, 1.0));
    let gt = GroundTruth::new(
        eevg_core::heads::BBox::new(0.4, 0.6, 0.3, 0.2),
        vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        3,
        4,
    )
    .unwrap();
    let mut t = Tape::<f64>::no_grad();
    let raw_b = t.constant(Tensor::new(vec![1, 4], vec![0.2, -0.3, 0.5, -0.8]).unwrap());
    let pred_b = t.sigmoid(raw_b);
    let raw_m = t.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64) / 6.0 - 1.0).collect()).unwrap());
    let pred_m = t.sigmoid(raw_m);
    let bundle = joint_loss(&mut t, pred_b, pred_m, &gt, &cfg);
    let v = bundle.values(&t);
    assert!((v[4] - (v[0] + v[1])).abs() < 1e-12, "det = smooth + giou");
    assert!((v[5] - (v[2] + v[3])).abs() < 1e-12, "seg = focal + dice");
    assert!(
        (v[6] - (0.1 * v[4] + 1.0 * v[5])).abs() < 1e-12,
        "total = 0.1·det + seg"
    );

    "giou identities (0 / 1.5 / 1, bounded), smooth-l1 regions, focal and dice \
     hand values, joint composition all hold"
        .to_string()
}

// ── criterion 7: toy grounding task ──────────────────────────────────

fn criterion_7(ctx: &mut Ctx) -> String {
    let t0 = Instant::now();
    let cfg = EevgConfig::default();
    let to_records = |samples: Vec<eevg_core::synthgen::SynthSample>| -> Vec<Record> {
        samples.iter().map(Record::from).collect()
    };
    let train = to_records(generate_dataset(0, 5000, &cfg).expect("train generation"));
    let val = to_records(generate_dataset(20_000, 100, &cfg).expect("val generation"));
    let test = to_records(generate_dataset(10_000, 500, &cfg).expect("test generation"));

    let opts = TrainOptions {
        epochs: 30,
        lr: 1e-3,
        weight_decay: 1e-4,
        batch: 8,
        warmup_steps: 100,
        dense_epochs: 2,
        seed: 0,
        log: true,
        early_stop: Some(EarlyStop {
            min_epochs: 2,
            p_at_05: 0.93,
            miou: 0.78,
            keep_frac: 0.65,
            val,
        }),
    };
    let out = run_training(&cfg, &train, &opts).expect("training");
    assert!(out.logs.len() <= 30, "epoch budget exceeded");
    let dynamic = evaluate(&out.weights, &cfg, &test, ElimMode::Dynamic).expect("evaluation");
    let secs = t0.elapsed().as_secs_f64();

    assert!(
        dynamic.p_at_05 >= 0.90,
        "P@0.5 = {:.4} below 0.90",
        dynamic.p_at_05
    );
    assert!(dynamic.miou >= 0.75, "mIoU = {:.4} below 0.75", dynamic.miou);
    let keep_budget = 0.7 * cfg.n() as f64;
    assert!(
        dynamic.mean_final_keep < keep_budget,
        "final keep {:.2} not below {keep_budget:.1}",
        dynamic.mean_final_keep
    );
    assert!(secs <= 1800.0, "took {secs:.0}s, budget is 1800s");

    let detail = format!(
        "5000 train / 500 eval: P@0.5 {:.3} ≥ 0.90, mIoU {:.3} ≥ 0.75, final keep {:.1} < {:.1} \
         of {} tokens, {} epochs, {:.0}s",
        dynamic.p_at_05,
        dynamic.miou,
        dynamic.mean_final_keep,
        keep_budget,
        cfg.n(),
        out.logs.len(),
        secs
    );
    ctx.trained = Some(Trained {
        weights: out.weights,
        cfg,
        test,
        dynamic,
    });
    detail
}

// ── criterion 8: dynamic vs static elimination ───────────────────────

fn criterion_8(ctx: &mut Ctx) -> String {
    let art = ctx
        .trained
        .as_ref()
        .expect("needs the trained model from criterion 7");
    let n = art.cfg.n();
    let dynamic = &art.dynamic;
    assert!(
        dynamic.std_final_keep > 0.0,
        "dynamic elimination should adapt its keep count per sample"
    );

    let removed = n as f64 - dynamic.mean_final_keep;
    let m = ((removed / art.cfg.layers as f64).floor() as usize).max(1);
    let stat = evaluate(&art.weights, &art.cfg, &art.test, ElimMode::Static(m))
        .expect("static-mode evaluation");
    assert_eq!(
        stat.std_final_keep, 0.0,
        "static elimination must keep a fixed count"
    );
    let fixed = n - m * art.cfg.layers;
    assert!(
        stat.per_sample_keep.iter().all(|&k| k == fixed),
        "static keep counts must all equal {fixed}"
    );

    format!(
        "same weights, matched budgets: dynamic keep {:.1}±{:.1} (varies), static({m}/layer) \
         keep {fixed}±0.0; mIoU {:.3} vs {:.3}, P@0.5 {:.3} vs {:.3}",
        dynamic.mean_final_keep,
        dynamic.std_final_keep,
        dynamic.miou,
        stat.miou,
        dynamic.p_at_05,
        stat.p_at_05
    )
}

// ── criterion 9: weight serialization ────────────────────────────────

fn criterion_9(_: &mut Ctx) -> String {
    let mut rng = Rng::new(0x10ad);
    let base = EevgConfig {
        height: 16,
        width: 16,
        patch: 4,
        l_max: 4,
        c_v: 12,
        c_l: 8,
        ffn: 24,
        ..EevgConfig::default()
    };
    for i in 0..100 {
        let mut cfg = base;
        cfg.c = [8, 16, 24][rng.below(3)];
        cfg.heads = [1, 2][rng.below(2)];
        cfg.layers = 1 + rng.below(3);
        let w = ModelWeights::<Tensor<f32>>::init(&cfg, vocab_size(), &mut rng).unwrap();
        let bytes = to_bytes(&w);
        let back = from_bytes(&bytes).unwrap_or_else(|e| panic!("round-trip {i}: {e}"));
        let again = to_bytes(&back);
        assert_eq!(bytes, again, "round-trip {i}: bytes changed");
        let mut data_a = Vec::new();
        w.visit(&mut |t| data_a.extend(t.data.iter().map(|v| v.to_bits())));
        let mut data_b = Vec::new();
        back.visit(&mut |t| data_b.extend(t.data.iter().map(|v| v.to_bits())));
        assert_eq!(data_a, data_b, "round-trip {i}: values not bitwise equal");
    }

    // Three corruption classes, each rejected with a located error.
    let w = ModelWeights::<Tensor<f32>>::init(&base, vocab_size(), &mut Rng::new(7)).unwrap();
    let bytes = to_bytes(&w);

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    match from_bytes(&bad_magic) {
        Err(Error::Format { offset: 0, .. }) => {}
        other => panic!("bad magic: expected format error at offset 0, got {other:?}"),
    }

    let cut = &bytes[..bytes.len() - 3];
    match from_bytes(cut) {
        Err(Error::Format { offset, .. }) => assert_eq!(
            offset,
            cut.len() as u64,
            "truncation should be reported at the cut"
        ),
        other => panic!("truncation: expected format error, got {other:?}"),
    }

    let mut bad_name = bytes.clone();
    bad_name[14] ^= 0xff; // inside the first tensor's name
    match from_bytes(&bad_name) {
        Err(Error::Format { .. }) => {}
        other => panic!("tampered name: expected format error, got {other:?}"),
    }

    "100 bitwise round-trips; magic, truncation, and name corruption all rejected \
     with byte offsets"
        .to_string()
}

// ── runner ───────────────────────────────────────────────────────────

fn main() {
    let criteria: &[(&str, fn(&mut Ctx) -> String)] = &[
        ("criterion 1 (gradient suite)", criterion_1),
        ("criterion 2 (fusion cost scaling)", criterion_2),
        ("criterion 3 (mask head size)", criterion_3),
        ("criterion 4 (elimination invariants)", criterion_4),
        ("criterion 5 (spatial attention oracle)", criterion_5),
        ("criterion 6 (loss identities)", criterion_6),
        ("criterion 7 (toy grounding task)", criterion_7),
        ("criterion 8 (dynamic vs static elimination)", criterion_8),
        ("criterion 9 (weight serialization)", criterion_9),
    ];

    // Assertion messages become the FAIL line; silence the default hook.
    std::panic::set_hook(Box::new(|_| {}));

    let mut ctx = Ctx::default();
    let mut failures = 0;
    for (label, f) in criteria {
        match catch_unwind(AssertUnwindSafe(|| f(&mut ctx))) {
            Ok(detail) => println!("PASS {label}: {detail}"),
            Err(payload) => {
                failures += 1;
                let msg = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panicked without a message".into());
                println!("FAIL {label}: {msg}");
            }
        }
    }

    if failures > 0 {
        eprintln!("{failures} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} acceptance criteria hold", criteria.len());
}
