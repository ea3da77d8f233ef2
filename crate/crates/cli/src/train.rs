//! Single-threaded training loop: AdamW on gradients accumulated over
//! small batches, linear learning-rate warmup, and a few dense epochs
//! before dynamic token elimination switches on (eliminating tokens
//! with a still-random attention map starves the mask head of the very
//! tokens it needs to learn from).

use std::time::Instant;

use eevg_core::config::EevgConfig;
use eevg_core::dataset::Record;
use eevg_core::losses::joint_loss;
use eevg_core::model::{eevg_forward, embed_tokens, embed_visual, ElimMode, ModelWeights};
use eevg_core::optim::{AdamW, OptimState};
use eevg_core::rng::Rng;
use eevg_core::synthgen::vocab_size;
use eevg_core::{Error, Result, Tape, Tensor, Var};

use crate::eval::evaluate;

/// Stop once the validation slice clears every bar (checked after each
/// epoch from `min_epochs` on).
#[derive(Debug, Clone)]
pub struct EarlyStop {
    pub min_epochs: usize,
    pub p_at_05: f64,
    pub miou: f64,
    /// Mean final keep count must drop below `keep_frac · N`.
    pub keep_frac: f64,
    pub val: Vec<Record>,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Samples per optimizer step (gradient accumulation).
    pub batch: usize,
    /// Optimizer steps over which the learning rate ramps 0 → `lr`;
    /// after the ramp it cosine-decays to 5% of `lr` by the last
    /// planned step.
    pub warmup_steps: usize,
    /// Epochs trained with elimination off before it becomes dynamic.
    pub dense_epochs: usize,
    pub seed: u64,
    /// Print one line per epoch to stdout.
    pub log: bool,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch: 8,
            warmup_steps: 100,
            dense_epochs: 2,
            seed: 0,
            log: false,
            early_stop: None,
        }
    }
}

/// Per-epoch means: losses in bundle order
/// [smooth, giou, focal, dice, det, seg, total] plus retention.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: [f64; 7],
    pub mean_layer_keep: Vec<f64>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights<Tensor<f32>>,
    pub logs: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// In-place Fisher–Yates shuffle driven by the training RNG.
pub fn shuffle<T>(xs: &mut [T], rng: &mut Rng) {
    for i in (1..xs.len()).rev() {
        xs.swap(i, rng.below(i + 1));
    }
}

/// Forward/backward on one sample, adding its gradient (scaled by
/// `scale`) into the flat accumulator. Returns the loss bundle values
/// and the per-layer keep counts.
fn accumulate_sample(
    storage: &ModelWeights<Tensor<f32>>,
    acc: &mut [Vec<f32>],
    scale: f32,
    cfg: &EevgConfig,
    r: &Record,
    mode: ElimMode,
) -> Result<([f64; 7], Vec<usize>)> {
    let mut t = Tape::<f32>::new();
    let mut vars: Vec<Var> = Vec::new();
    let wb = storage.map(&mut |w| {
        let v = t.leaf(w.clone());
        vars.push(v);
        v
    });
    let f_v = embed_visual(&mut t, &r.image, cfg, &wb.embed)?;
    let f_l = embed_tokens(&mut t, &r.ids, &wb.embed)?;
    let (pred, diag) = eevg_forward(&mut t, f_v, f_l, &r.pad_mask(), &wb, cfg, mode)?;
    let bundle = joint_loss(&mut t, pred.bbox, pred.mask.mask, &r.gt, &cfg.loss);
    let grads = t.backward(bundle.total);

    for (i, a) in acc.iter_mut().enumerate() {
        for (s, &g) in a.iter_mut().zip(grads.get(vars[i])) {
            *s += scale * g;
        }
    }
    let keeps = diag.layers.iter().map(|l| l.keep_count).collect();
    Ok((bundle.values(&t), keeps))
}

/// Learning-rate schedule: linear ramp over `warmup` steps, then cosine
/// decay to `MIN_LR_FRAC` of the peak at `total` steps. `step` is
/// 1-based.
const MIN_LR_FRAC: f64 = 0.05;

fn lr_at(step: u64, warmup: usize, total: u64) -> f64 {
    let (s, w) = (step as f64, warmup as f64);
    if warmup > 0 && s < w {
        return s / w;
    }
    let span = (total as f64 - w).max(1.0);
    let frac = ((s - w) / span).clamp(0.0, 1.0);
    MIN_LR_FRAC + (1.0 - MIN_LR_FRAC) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Applies one AdamW step from the accumulated mean gradient under the
/// warmup + cosine-decay schedule.
fn apply_step(
    storage: &mut ModelWeights<Tensor<f32>>,
    opt: &AdamW,
    state: &mut OptimState<f32>,
    warmup_steps: usize,
    total_steps: u64,
    acc: &[Vec<f32>],
) {
    let step = state.begin_step();
    let opt = AdamW {
        lr: opt.lr * lr_at(step, warmup_steps, total_steps),
        ..*opt
    };
    let mut i = 0;
    storage.visit_mut(&mut |w| {
        let n = w.data.len();
        opt.update(step, state.slot(i, n), &mut w.data, &acc[i]);
        i += 1;
    });
}

/// Trains a fresh model on `records`. Weights are initialized from
/// `opts.seed`; the same seed and data reproduce the run exactly.
pub fn run_training(
    cfg: &EevgConfig,
    records: &[Record],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if records.is_empty() {
        return Err(Error::Precondition("cannot train on an empty slice".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Precondition("batch size must be positive".into()));
    }
    cfg.validate()?;
    let mut rng = Rng::new(opts.seed);
    let mut storage = ModelWeights::<Tensor<f32>>::init(cfg, vocab_size(), &mut rng)?;
    let opt = AdamW {
        lr: opts.lr,
        weight_decay: opts.weight_decay,
        ..AdamW::default()
    };
    let mut state = OptimState::<f32>::new();
    let mut acc: Vec<Vec<f32>> = Vec::new();
    storage.visit(&mut |w| acc.push(vec![0.0; w.data.len()]));
    let mut logs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let steps_per_epoch = records.len().div_ceil(opts.batch) as u64;
    let total_steps = steps_per_epoch * opts.epochs as u64;

    for epoch in 0..opts.epochs {
        let start = Instant::now();
        let mode = if epoch < opts.dense_epochs {
            ElimMode::Off
        } else {
            ElimMode::Dynamic
        };
        shuffle(&mut order, &mut rng);
        let mut loss_sums = [0.0; 7];
        let mut keep_sums = vec![0.0; cfg.layers];
        for chunk in order.chunks(opts.batch) {
            for a in &mut acc {
                a.fill(0.0);
            }
            let scale = 1.0 / chunk.len() as f32;
            for &idx in chunk {
                let (losses, keeps) =
                    accumulate_sample(&storage, &mut acc, scale, cfg, &records[idx], mode)?;
                for (s, l) in loss_sums.iter_mut().zip(losses) {
                    *s += l;
                }
                for (s, k) in keep_sums.iter_mut().zip(keeps) {
                    *s += k as f64;
                }
            }
            apply_step(
                &mut storage,
                &opt,
                &mut state,
                opts.warmup_steps,
                total_steps,
                &acc,
            );
        }
        let n = records.len() as f64;
        let log = EpochLog {
            epoch,
            losses: loss_sums.map(|s| s / n),
            mean_layer_keep: keep_sums.iter().map(|s| s / n).collect(),
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        if opts.log {
            println!(
                "epoch {:>3}: total {:.4}  det {:.4}  seg {:.4}  keep {:.1?}  ({:.1}s)",
                log.epoch, log.losses[6], log.losses[4], log.losses[5], log.mean_layer_keep,
                log.elapsed_s
            );
        }
        logs.push(log);

        if let Some(es) = &opts.early_stop {
            if epoch + 1 >= es.min_epochs {
                let out = evaluate(&storage, cfg, &es.val, ElimMode::Dynamic)?;
                if opts.log {
                    println!(
                        "  val: P@0.5 {:.3}  mIoU {:.3}  keep {:.1}/{}",
                        out.p_at_05,
                        out.miou,
                        out.mean_final_keep,
                        cfg.n()
                    );
                }
                if out.p_at_05 >= es.p_at_05
                    && out.miou >= es.miou
                    && out.mean_final_keep < es.keep_frac * cfg.n() as f64
                {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        weights: storage,
        logs,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use eevg_core::synthgen::generate_dataset;

    fn micro_config() -> EevgConfig {
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

    fn micro_records(start: u64, count: usize) -> Vec<Record> {
        let cfg = micro_config();
        generate_dataset(start, count, &cfg)
            .unwrap()
            .iter()
            .map(Record::from)
            .collect()
    }

    #[test]
    fn loss_decreases_on_a_tiny_run() {
        let cfg = micro_config();
        let records = micro_records(100, 8);
        let opts = TrainOptions {
            epochs: 4,
            seed: 1,
            batch: 2,
            warmup_steps: 0,
            dense_epochs: 0,
            ..TrainOptions::default()
        };
        let out = run_training(&cfg, &records, &opts).unwrap();
        assert_eq!(out.logs.len(), 4);
        assert!(!out.stopped_early);
        let first = out.logs[0].losses[6];
        let last = out.logs[3].losses[6];
        assert!(
            last < first,
            "mean total loss should drop: {first} -> {last}"
        );
        for l in &out.logs {
            assert!(l.losses.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn same_seed_reproduces_logs_and_weights() {
        let cfg = micro_config();
        let records = micro_records(300, 5);
        let opts = TrainOptions {
            epochs: 2,
            seed: 11,
            batch: 2,
            warmup_steps: 3,
            dense_epochs: 1,
            ..TrainOptions::default()
        };
        let a = run_training(&cfg, &records, &opts).unwrap();
        let b = run_training(&cfg, &records, &opts).unwrap();
        for (x, y) in a.logs.iter().zip(&b.logs) {
            assert_eq!(x.losses, y.losses);
            assert_eq!(x.mean_layer_keep, y.mean_layer_keep);
        }
        let mut equal = true;
        let mut rhs = Vec::new();
        b.weights.visit(&mut |w| rhs.push(w.clone()));
        let mut i = 0;
        a.weights.visit(&mut |w| {
            equal &= w.data == rhs[i].data;
            i += 1;
        });
        assert!(equal, "weights diverged between identical runs");
    }

    #[test]
    fn trivial_early_stop_halts_after_min_epochs() {
        let cfg = micro_config();
        let records = micro_records(700, 4);
        let opts = TrainOptions {
            epochs: 10,
            seed: 2,
            early_stop: Some(EarlyStop {
                min_epochs: 1,
                p_at_05: 0.0,
                miou: 0.0,
                keep_frac: 2.0,
                val: micro_records(900, 3),
            }),
            ..TrainOptions::default()
        };
        let out = run_training(&cfg, &records, &opts).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.logs.len(), 1);
    }

    #[test]
    fn lr_schedule_ramps_then_decays_to_floor() {
        assert_eq!(lr_at(5, 10, 100), 0.5, "halfway through warmup");
        assert_eq!(lr_at(10, 10, 100), 1.0, "peak at end of warmup");
        let mid = lr_at(55, 10, 100);
        assert!((mid - 0.525).abs() < 1e-12, "cosine midpoint: {mid}");
        assert!((lr_at(100, 10, 100) - 0.05).abs() < 1e-12, "floor at end");
        assert!((lr_at(400, 10, 100) - 0.05).abs() < 1e-12, "stays at floor");
        let first = lr_at(1, 0, 10);
        assert!(
            (0.95..=1.0).contains(&first),
            "no warmup starts near peak: {first}"
        );
        for t in 11..100 {
            assert!(lr_at(t + 1, 10, 100) < lr_at(t, 10, 100), "monotone decay");
        }
    }

    #[test]
    fn shuffle_is_a_permutation_and_seed_dependent() {
        let mut a: Vec<usize> = (0..50).collect();
        let mut b: Vec<usize> = (0..50).collect();
        shuffle(&mut a, &mut Rng::new(4));
        shuffle(&mut b, &mut Rng::new(4));
        assert_eq!(a, b);
        let mut c: Vec<usize> = (0..50).collect();
        shuffle(&mut c, &mut Rng::new(5));
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
