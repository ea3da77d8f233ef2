//! `eevg` — decoder-fusion visual grounding from the command line:
//! gradient verification, cost benchmarks, data generation, training,
//! evaluation, and sample rendering.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use eevg_cli::bench::{bench_fusion_scaling, to_csv, BenchRow, BenchSettings, FusionKind};
use eevg_cli::check_weight_shapes;
use eevg_cli::demo::run_demo;
use eevg_cli::eval::evaluate;
use eevg_cli::fit::{fit_linear, fit_quadratic};
use eevg_cli::gradcheck::run_micro_suite;
use eevg_cli::train::{run_training, EarlyStop, TrainOptions};
use eevg_core::config::EevgConfig;
use eevg_core::dataset::{read_dataset, write_dataset, Dataset};
use eevg_core::heads::HeadWeights;
use eevg_core::model::ElimMode;
use eevg_core::rng::Rng;
use eevg_core::synthgen::{generate_dataset, vocab_size};
use eevg_core::weights_io::{load_weights, save_weights};
use eevg_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "eevg",
    about = "Decoder-fusion visual grounding: train, benchmark, inspect",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify analytic gradients against finite differences
    Gradcheck {
        /// End-to-end check seeds, comma-separated
        #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Maximum tolerated relative error
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Time decoder vs encoder fusion as expression length grows
    Bench {
        /// Which stack(s) to time: decoder, encoder, or both
        #[arg(long, default_value = "both")]
        fusion: String,
        /// Visual token count N
        #[arg(long, default_value_t = 196)]
        n: usize,
        /// Channel dimension C
        #[arg(long, default_value_t = 192)]
        c: usize,
        /// Fusion depth
        #[arg(long, default_value_t = 3)]
        layers: usize,
        /// Expression lengths to sweep, comma-separated
        #[arg(long = "l-list", default_value = "64,128,256,512,1024", value_delimiter = ',')]
        l_list: Vec<usize>,
        /// Also write the CSV here
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        warmups: usize,
        #[arg(long, default_value_t = 9)]
        reps: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Fit scaling hypotheses to a benchmark CSV
    Fit {
        /// CSV produced by `eevg bench`
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate a synthetic grounding dataset
    Gen {
        #[arg(long)]
        count: usize,
        /// First sample seed; samples use consecutive seeds
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Config file (key = value); defaults otherwise
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write a human-readable manifest next to the dataset
        #[arg(long)]
        manifest: bool,
    },
    /// Train a model on a generated dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Where to save the trained weights
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long = "weight-decay", default_value_t = 1e-4)]
        weight_decay: f64,
        /// Samples per optimizer step (gradient accumulation)
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Optimizer steps of linear learning-rate warmup
        #[arg(long = "warmup-steps", default_value_t = 100)]
        warmup_steps: usize,
        /// Epochs without token elimination before it turns dynamic
        #[arg(long = "dense-epochs", default_value_t = 2)]
        dense_epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Validation dataset; enables early stopping
        #[arg(long = "val-data")]
        val_data: Option<PathBuf>,
    },
    /// Evaluate saved weights on a dataset
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// dynamic, off, or static:<m> (remove m tokens per layer)
        #[arg(long, default_value = "dynamic")]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render one sample's predictions as PGM images
    Demo {
        #[arg(long)]
        weights: PathBuf,
        /// Sample seed to generate and run
        #[arg(long)]
        sample: u64,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print prediction-head parameter counts at a given size
    Params {
        /// Channel dimension
        #[arg(long, default_value_t = 768)]
        c: usize,
        /// Patch size
        #[arg(long, default_value_t = 16)]
        p: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<EevgConfig> {
    let cfg = match path {
        Some(p) => EevgConfig::from_text(&std::fs::read_to_string(p)?)?,
        None => EevgConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mode(s: &str) -> Result<ElimMode> {
    match s {
        "dynamic" => Ok(ElimMode::Dynamic),
        "off" => Ok(ElimMode::Off),
        other => match other.strip_prefix("static:") {
            Some(m) => Ok(ElimMode::Static(m.parse().map_err(|_| {
                Error::Config(format!("bad static count in mode `{other}`"))
            })?)),
            None => Err(Error::Config(format!(
                "unknown mode `{other}` (expected dynamic|off|static:<m>)"
            ))),
        },
    }
}

fn parse_kinds(s: &str) -> Result<Vec<FusionKind>> {
    match s {
        "both" => Ok(vec![FusionKind::Decoder, FusionKind::Encoder]),
        one => Ok(vec![one.parse()?]),
    }
}

/// Refuses datasets whose geometry disagrees with the config.
fn check_dataset(ds: &Dataset, cfg: &EevgConfig, what: &str) -> Result<()> {
    if ds.height != cfg.height || ds.width != cfg.width || ds.l_max != cfg.l_max {
        return Err(Error::Config(format!(
            "{what} is {}x{} with l_max {}, config says {}x{} with l_max {}",
            ds.height, ds.width, ds.l_max, cfg.height, cfg.width, cfg.l_max
        )));
    }
    Ok(())
}

fn read_checked(path: &Path, cfg: &EevgConfig, what: &str) -> Result<Dataset> {
    let ds = read_dataset(path)?;
    check_dataset(&ds, cfg, what)?;
    Ok(ds)
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn cmd_gradcheck(seeds: &[u64], tol: f64) -> Result<()> {
    let outcomes = run_micro_suite(seeds)?;
    let mut failed = 0;
    for o in &outcomes {
        let ok = o.max_rel_err <= tol;
        failed += usize::from(!ok);
        println!(
            "{:<24} max rel err {:.3e} over {:>6} derivatives  {}",
            o.name,
            o.max_rel_err,
            o.checked,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!(
        "suite: {}/{} graphs within {tol:.0e}",
        outcomes.len() - failed,
        outcomes.len()
    );
    if failed > 0 {
        return Err(Error::Precondition(format!(
            "{failed} graph(s) exceeded the gradient tolerance"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    fusion: &str,
    n: usize,
    c: usize,
    layers: usize,
    l_list: Vec<usize>,
    out: Option<PathBuf>,
    warmups: usize,
    reps: usize,
    seed: u64,
) -> Result<()> {
    let kinds = parse_kinds(fusion)?;
    let settings = BenchSettings {
        n,
        c,
        layers,
        heads: BenchSettings::default().heads,
        l_list,
        warmups,
        reps,
        seed,
    };
    let result = bench_fusion_scaling(&kinds, &settings)?;
    let csv = to_csv(&result.rows);
    print!("{csv}");
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = out {
        std::fs::write(&path, csv)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn rows_of(rows: &[BenchRow], kind: FusionKind) -> (Vec<usize>, Vec<f64>) {
    let mut pairs: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.kind == kind)
        .map(|r| (r.l, r.median_ms))
        .collect();
    pairs.sort_unstable_by_key(|&(l, _)| l);
    pairs.into_iter().unzip()
}

fn cmd_fit(input: &Path) -> Result<()> {
    let rows = eevg_cli::bench::parse_csv(&std::fs::read_to_string(input)?)?;
    if rows.is_empty() {
        return Err(Error::Precondition("no rows to fit".into()));
    }
    let n = rows[0].n;
    println!("kind,a,b,r2,zero_variance");
    let (dec_l, dec_t) = rows_of(&rows, FusionKind::Decoder);
    if !dec_l.is_empty() {
        println!("{}", fit_linear("decoder", &dec_l, &dec_t)?.csv_row());
    }
    let (enc_l, enc_t) = rows_of(&rows, FusionKind::Encoder);
    if !enc_l.is_empty() {
        println!("{}", fit_linear("encoder", &enc_l, &enc_t)?.csv_row());
        println!("{}", fit_quadratic("encoder", n, &enc_l, &enc_t)?.csv_row());
    }
    if let (Some(&l), true) = (dec_l.last(), !enc_l.is_empty()) {
        if enc_l.last() == Some(&l) {
            let ratio = enc_t.last().unwrap() / dec_t.last().unwrap();
            println!("# encoder/decoder median ratio at L={l}: {ratio:.2}");
        }
    }
    Ok(())
}

fn cmd_gen(
    count: usize,
    seed: u64,
    out: &Path,
    config: &Option<PathBuf>,
    manifest: bool,
) -> Result<()> {
    let cfg = load_config(config)?;
    let samples = generate_dataset(seed, count, &cfg)?;
    write_dataset(out, &samples, manifest)?;
    println!(
        "wrote {count} samples (seeds {seed}..{}) to {}",
        seed + count as u64,
        out.display()
    );
    if manifest {
        println!("manifest: {}.manifest", out.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    config: &Option<PathBuf>,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    batch: usize,
    warmup_steps: usize,
    dense_epochs: usize,
    seed: u64,
    val_data: &Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = read_checked(data, &cfg, "training data")?;
    let early_stop = match val_data {
        Some(p) => Some(EarlyStop {
            min_epochs: 2,
            p_at_05: 0.93,
            miou: 0.78,
            keep_frac: 0.65,
            val: read_checked(p, &cfg, "validation data")?.records,
        }),
        None => None,
    };
    let opts = TrainOptions {
        epochs,
        lr,
        weight_decay,
        batch,
        warmup_steps,
        dense_epochs,
        seed,
        log: true,
        early_stop,
    };
    let outcome = run_training(&cfg, &ds.records, &opts)?;
    save_weights(&outcome.weights, out)?;
    println!(
        "trained {} epoch(s){}; weights -> {}",
        outcome.logs.len(),
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        },
        out.display()
    );
    Ok(())
}

fn cmd_eval(weights: &Path, data: &Path, mode: &str, config: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let w = load_weights(weights)?;
    check_weight_shapes(&w, &cfg, vocab_size())?;
    let ds = read_checked(data, &cfg, "evaluation data")?;
    let mode = parse_mode(mode)?;
    let out = evaluate(&w, &cfg, &ds.records, mode)?;
    println!("samples:    {}", out.n);
    println!("P@0.5:      {:.4}", out.p_at_05);
    println!("mIoU:       {:.4}", out.miou);
    println!(
        "final keep: {:.2} ± {:.2} of {} tokens",
        out.mean_final_keep,
        out.std_final_keep,
        cfg.n()
    );
    println!(
        "layer keep: {}",
        out.per_layer_mean_keep
            .iter()
            .map(|k| format!("{k:.2}"))
            .collect::<Vec<_>>()
            .join(" -> ")
    );
    Ok(())
}

fn cmd_demo(weights: &Path, sample: u64, out_dir: &Path, config: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let w = load_weights(weights)?;
    let report = run_demo(&w, &cfg, sample, out_dir)?;
    println!("expression: \"{}\"", report.expression);
    println!(
        "pred box:   ({:.3}, {:.3}, {:.3}, {:.3})",
        report.pred_box.cx, report.pred_box.cy, report.pred_box.w, report.pred_box.h
    );
    println!(
        "gt box:     ({:.3}, {:.3}, {:.3}, {:.3})",
        report.gt_box.cx, report.gt_box.cy, report.gt_box.w, report.gt_box.h
    );
    println!("box IoU:    {:.4}", report.box_iou);
    println!("mask IoU:   {:.4}", report.mask_iou);
    println!("keep:       {:?}", report.keep_counts);
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_params(c: usize, p: usize) -> Result<()> {
    let heads = HeadWeights::<Tensor<f32>>::init(c, p, &mut Rng::new(0));
    let mask = heads.mask_head_params();
    let det = heads.detection_head_params();
    println!("C = {c}, P = {p}");
    println!("mask head parameters:      {mask} ({})", millions(mask));
    println!("detection head parameters: {det} ({})", millions(det));
    println!(
        "both heads:                {} ({})",
        mask + det,
        millions(mask + det)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gradcheck { seeds, tol } => cmd_gradcheck(&seeds, tol),
        Cmd::Bench {
            fusion,
            n,
            c,
            layers,
            l_list,
            out,
            warmups,
            reps,
            seed,
        } => cmd_bench(&fusion, n, c, layers, l_list, out, warmups, reps, seed),
        Cmd::Fit { input } => cmd_fit(&input),
        Cmd::Gen {
            count,
            seed,
            out,
            config,
            manifest,
        } => cmd_gen(count, seed, &out, &config, manifest),
        Cmd::Train {
            data,
            out,
            config,
            epochs,
            lr,
            weight_decay,
            batch,
            warmup_steps,
            dense_epochs,
            seed,
            val_data,
        } => cmd_train(
            &data,
            &out,
            &config,
            epochs,
            lr,
            weight_decay,
            batch,
            warmup_steps,
            dense_epochs,
            seed,
            &val_data,
        ),
        Cmd::Eval {
            weights,
            data,
            mode,
            config,
        } => cmd_eval(&weights, &data, &mode, &config),
        Cmd::Demo {
            weights,
            sample,
            out_dir,
            config,
        } => cmd_demo(&weights, sample, &out_dir, &config),
        Cmd::Params { c, p } => cmd_params(c, p),
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
