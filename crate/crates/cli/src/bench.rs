//! Single-threaded fusion-cost microbenchmark.
//!
//! Times forward-only passes of the decoder stack (location + visual
//! queries, linguistic memory) against the all-to-all encoder baseline
//! over a range of expression lengths L. Encoder and decoder runs are
//! interleaved (A,B,A,B,…) so thermal/frequency drift hits both equally;
//! each median comes from ≥ 9 repetitions after ≥ 3 warmups. FFN widths
//! follow the full-scale models (decoder 4C/3, encoder 8C/3), keeping
//! the two parameter counts comparable.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use eevg_core::elimination::TokenSet;
use eevg_core::fusion::{
    decoder_layer_flops, decoder_layer_forward, encoder_layer_flops, encoder_layer_forward,
    EncoderLayerWeights, FusionState, LayerWeights,
};
use eevg_core::rng::Rng;
use eevg_core::{Error, Result, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Decoder,
    Encoder,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Decoder => "decoder",
            FusionKind::Encoder => "encoder",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(FusionKind::Decoder),
            "encoder" => Ok(FusionKind::Encoder),
            other => Err(Error::Config(format!(
                "unknown fusion kind `{other}` (expected decoder|encoder)"
            ))),
        }
    }
}

/// Decoder FFN hidden width for channel dim `c` (full scale: 768→1024).
pub fn decoder_ffn(c: usize) -> usize {
    (c * 4).div_ceil(3)
}

/// Encoder FFN hidden width for channel dim `c` (full scale: 768→2048).
pub fn encoder_ffn(c: usize) -> usize {
    (c * 8).div_ceil(3)
}

#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub n: usize,
    pub c: usize,
    pub layers: usize,
    pub heads: usize,
    pub l_list: Vec<usize>,
    pub warmups: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            n: 196,
            c: 192,
            layers: 3,
            heads: 4,
            l_list: vec![64, 128, 256, 512, 1024],
            warmups: 3,
            reps: 9,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kind: FusionKind,
    pub n: usize,
    pub l: usize,
    pub c: usize,
    pub layers: usize,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub flops: u64,
}

pub const CSV_HEADER: &str = "kind,N,L,C,layers,median_ms,iqr_ms,flops";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{}",
            self.kind, self.n, self.l, self.c, self.layers, self.median_ms, self.iqr_ms, self.flops
        )
    }
}

/// Parses the bench CSV (header + rows as written by [`to_csv`]).
pub fn parse_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.lines().enumerate() {
        let at = offset;
        offset += line.len() as u64 + 1;
        if i == 0 {
            if line.trim() != CSV_HEADER {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("expected header `{CSV_HEADER}`, got `{line}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Format {
                offset: at,
                msg: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let bad = |what: &str| Error::Format {
            offset: at,
            msg: format!("unparseable {what} in `{line}`"),
        };
        rows.push(BenchRow {
            kind: fields[0].parse()?,
            n: fields[1].parse().map_err(|_| bad("N"))?,
            l: fields[2].parse().map_err(|_| bad("L"))?,
            c: fields[3].parse().map_err(|_| bad("C"))?,
            layers: fields[4].parse().map_err(|_| bad("layers"))?,
            median_ms: fields[5].parse().map_err(|_| bad("median_ms"))?,
            iqr_ms: fields[6].parse().map_err(|_| bad("iqr_ms"))?,
            flops: fields[7].parse().map_err(|_| bad("flops"))?,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub rows: Vec<BenchRow>,
    pub warnings: Vec<String>,
}

/// Median and interquartile range (linear-interpolation quantiles).
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    assert!(!samples.is_empty());
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let pos = p * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

/// Smallest observable nonzero interval of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..8 {
        let t0 = Instant::now();
        let mut d = t0.elapsed();
        while d.is_zero() {
            d = t0.elapsed();
        }
        best = best.min(d);
    }
    best
}

struct DecoderSetup {
    layers: Vec<LayerWeights<Tensor<f32>>>,
    location: Tensor<f32>,
    visual: Tensor<f32>,
}

struct EncoderSetup {
    layers: Vec<EncoderLayerWeights<Tensor<f32>>>,
    location: Tensor<f32>,
    visual: Tensor<f32>,
}

fn decoder_forward_once(s: &DecoderSetup, memory: &Tensor<f32>, n: usize) -> Result<Duration> {
    let start = Instant::now();
    let mut t = Tape::<f32>::no_grad();
    let lw: Vec<LayerWeights<eevg_core::Var>> = s
        .layers
        .iter()
        .map(|l| l.map(&mut |x| t.constant(x.clone())))
        .collect();
    let mut state = FusionState {
        location: t.constant(s.location.clone()),
        visual: t.constant(s.visual.clone()),
        memory: t.constant(memory.clone()),
        pad_mask: vec![true; memory.shape[0]],
        token_set: TokenSet::full(n),
    };
    for l in &lw {
        state = decoder_layer_forward(&mut t, &state, l)?.0;
    }
    std::hint::black_box(t.val(state.visual).data[0]);
    Ok(start.elapsed())
}

fn encoder_forward_once(s: &EncoderSetup, memory: &Tensor<f32>) -> Result<Duration> {
    let start = Instant::now();
    let mut t = Tape::<f32>::no_grad();
    let lw: Vec<EncoderLayerWeights<eevg_core::Var>> = s
        .layers
        .iter()
        .map(|l| l.map(&mut |x| t.constant(x.clone())))
        .collect();
    // Joint sequence [loc; linguistic; visual].
    let loc = t.constant(s.location.clone());
    let mem = t.constant(memory.clone());
    let vis = t.constant(s.visual.clone());
    let front = t.concat_rows(loc, mem);
    let mut x = t.concat_rows(front, vis);
    for l in &lw {
        x = encoder_layer_forward(&mut t, x, None, l)?;
    }
    std::hint::black_box(t.val(x).data[0]);
    Ok(start.elapsed())
}

/// Runs the interleaved scaling benchmark. Rows are grouped by kind and
/// sorted by L; the flop column is the analytic per-forward cost.
pub fn bench_fusion_scaling(kinds: &[FusionKind], s: &BenchSettings) -> Result<BenchOutput> {
    if s.warmups < 3 || s.reps < 9 {
        return Err(Error::Precondition(format!(
            "need >= 3 warmups and >= 9 repetitions, got {} and {}",
            s.warmups, s.reps
        )));
    }
    if kinds.is_empty() || s.l_list.is_empty() {
        return Err(Error::Precondition("nothing to benchmark".into()));
    }
    let mut l_list = s.l_list.clone();
    l_list.sort_unstable();
    l_list.dedup();

    let mut rng = Rng::new(s.seed);
    let dec = DecoderSetup {
        layers: (0..s.layers)
            .map(|_| LayerWeights::init(s.c, decoder_ffn(s.c), s.heads, &mut rng))
            .collect::<Result<_>>()?,
        location: Tensor::uniform(vec![1, s.c], -0.5, 0.5, &mut rng),
        visual: Tensor::uniform(vec![s.n, s.c], -0.5, 0.5, &mut rng),
    };
    let enc = EncoderSetup {
        layers: (0..s.layers)
            .map(|_| EncoderLayerWeights::init(s.c, encoder_ffn(s.c), s.heads, &mut rng))
            .collect::<Result<_>>()?,
        location: Tensor::uniform(vec![1, s.c], -0.5, 0.5, &mut rng),
        visual: Tensor::uniform(vec![s.n, s.c], -0.5, 0.5, &mut rng),
    };

    let resolution_ms = timer_resolution().as_secs_f64() * 1e3;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut samples: Vec<Vec<Vec<f64>>> =
        vec![vec![Vec::with_capacity(s.reps); l_list.len()]; kinds.len()];

    for (li, &l) in l_list.iter().enumerate() {
        let memory = Tensor::uniform(vec![l, s.c], -0.5, 0.5, &mut rng);
        for rep in 0..s.warmups + s.reps {
            for (ki, &kind) in kinds.iter().enumerate() {
                let elapsed = match kind {
                    FusionKind::Decoder => decoder_forward_once(&dec, &memory, s.n)?,
                    FusionKind::Encoder => encoder_forward_once(&enc, &memory)?,
                };
                if rep >= s.warmups {
                    samples[ki][li].push(elapsed.as_secs_f64() * 1e3);
                }
            }
        }
    }

    for (ki, &kind) in kinds.iter().enumerate() {
        for (li, &l) in l_list.iter().enumerate() {
            let (median_ms, iqr_ms) = median_iqr(&samples[ki][li]);
            if resolution_ms > median_ms * 0.01 {
                warnings.push(format!(
                    "timer resolution {resolution_ms:.6} ms exceeds 1% of the \
                     {median_ms:.6} ms median for {kind} at L={l}; treat this row as noisy"
                ));
            }
            let flops = s.layers as u64
                * match kind {
                    FusionKind::Decoder => decoder_layer_flops(s.n, l, s.c, decoder_ffn(s.c)),
                    FusionKind::Encoder => encoder_layer_flops(s.n, l, s.c, encoder_ffn(s.c)),
                };
            rows.push(BenchRow {
                kind,
                n: s.n,
                l,
                c: s.c,
                layers: s.layers,
                median_ms,
                iqr_ms,
                flops,
            });
        }
    }
    Ok(BenchOutput { rows, warnings })
}
