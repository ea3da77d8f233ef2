//! Binary dataset export/import plus a human-readable manifest.
//!
//! Layout (little-endian): magic `EVGD` · u32 version · u32 count ·
//! u32 height · u32 width · u32 l_max, then per sample:
//! u64 seed · u32 expression length · l_max×u32 token ids ·
//! 4×f32 box (cx, cy, w, h) · H·W·3×f32 image · run-length-encoded
//! mask (u32 run count, then u32 runs alternating zeros-first).
//!
//! Floats are stored at f32 precision. Malformed input is rejected with
//! a format error naming the byte offset.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::heads::BBox;
use crate::losses::GroundTruth;
use crate::synthgen::SynthSample;

pub const MAGIC: [u8; 4] = *b"EVGD";
pub const VERSION: u32 = 1;

/// One stored sample: everything training and evaluation need.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub seed: u64,
    pub ids: Vec<u32>,
    pub expr_len: usize,
    /// H×W×3 row-major, channel-last, values in [0,1].
    pub image: Vec<f64>,
    pub gt: GroundTruth,
}

impl Record {
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.expr_len).collect()
    }
}

impl From<&SynthSample> for Record {
    fn from(s: &SynthSample) -> Self {
        Record {
            seed: s.seed,
            ids: s.ids.clone(),
            expr_len: s.expr_len,
            image: s.image.clone(),
            gt: s.gt.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub l_max: usize,
    pub records: Vec<Record>,
}

// ── RLE ──────────────────────────────────────────────────────────────

/// Runs of equal values, starting with the count of leading zeros (which
/// may be 0). Exact for binary masks.
pub fn rle_encode(mask: &[f64]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0u8; // zeros first
    let mut len = 0u32;
    for &v in mask {
        let bit = (v > 0.5) as u8;
        if bit == current {
            len += 1;
        } else {
            runs.push(len);
            current = bit;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[u32], expected: usize) -> Result<Vec<f64>> {
    let mut mask = Vec::with_capacity(expected);
    for (i, &run) in runs.iter().enumerate() {
        let value = (i % 2) as f64;
        mask.extend(std::iter::repeat_n(value, run as usize));
    }
    if mask.len() != expected {
        return Err(Error::Format {
            offset: 0,
            msg: format!("mask runs cover {} pixels, expected {expected}", mask.len()),
        });
    }
    Ok(mask)
}

// ── encoding ─────────────────────────────────────────────────────────

fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest");
    PathBuf::from(os)
}

pub fn to_bytes(height: usize, width: usize, l_max: usize, records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for v in [height, width, l_max] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for r in records {
        if r.ids.len() != l_max {
            return Err(Error::Dim(format!(
                "record has {} token slots, dataset declares {l_max}",
                r.ids.len()
            )));
        }
        if r.image.len() != height * width * 3 {
            return Err(Error::Dim(format!(
                "record image has {} floats, dataset declares {}",
                r.image.len(),
                height * width * 3
            )));
        }
        out.extend_from_slice(&r.seed.to_le_bytes());
        out.extend_from_slice(&(r.expr_len as u32).to_le_bytes());
        for &id in &r.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for v in r.gt.bbox.to_vec() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in &r.image {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let runs = rle_encode(&r.gt.mask);
        out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
        for run in runs {
            out.extend_from_slice(&run.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes the binary dataset to `path` and one manifest line per sample
/// to `path.manifest`.
pub fn write_dataset(path: &Path, samples: &[SynthSample], manifest: bool) -> Result<()> {
    let (height, width, l_max) = match samples.first() {
        Some(s) => (s.gt.mask_h, s.gt.mask_w, s.ids.len()),
        None => return Err(Error::Precondition("refusing to write an empty dataset".into())),
    };
    let records: Vec<Record> = samples.iter().map(Record::from).collect();
    std::fs::write(path, to_bytes(height, width, l_max, &records)?)?;
    if manifest {
        let mut text = String::new();
        for s in samples {
            text.push_str(&s.manifest_line());
            text.push('\n');
        }
        std::fs::write(manifest_path(path), text)?;
    }
    Ok(())
}

// ── decoding ─────────────────────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes at offset {}",
                    self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:02x?}, expected `EVGD`"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = r.u32("sample count")? as usize;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let l_max = r.u32("l_max")? as usize;
    if height == 0 || width == 0 || l_max == 0 {
        return Err(Error::Format {
            offset: 12,
            msg: format!("degenerate dataset geometry {height}x{width}, l_max {l_max}"),
        });
    }

    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let at = r.pos as u64;
        let seed = r.u64("seed")?;
        let expr_len = r.u32("expression length")? as usize;
        if expr_len > l_max {
            return Err(Error::Format {
                offset: at,
                msg: format!("sample {i}: expression length {expr_len} exceeds l_max {l_max}"),
            });
        }
        let mut ids = Vec::with_capacity(l_max);
        for _ in 0..l_max {
            ids.push(r.u32("token id")?);
        }
        let b = [
            r.f32("box cx")? as f64,
            r.f32("box cy")? as f64,
            r.f32("box w")? as f64,
            r.f32("box h")? as f64,
        ];
        let mut image = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width * 3 {
            image.push(r.f32("image value")? as f64);
        }
        let run_count = r.u32("mask run count")? as usize;
        let runs_at = r.pos as u64;
        let mut runs = Vec::with_capacity(run_count);
        for _ in 0..run_count {
            runs.push(r.u32("mask run")?);
        }
        let mask = rle_decode(&runs, height * width).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                offset: runs_at,
                msg: format!("sample {i}: {msg}"),
            },
            other => other,
        })?;
        let gt = GroundTruth::new(BBox::new(b[0], b[1], b[2], b[3]), mask, height, width)
            .map_err(|e| Error::Format {
                offset: at,
                msg: format!("sample {i}: {e}"),
            })?;
        records.push(Record {
            seed,
            ids,
            expr_len,
            image,
            gt,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes after final sample", buf.len() - r.pos),
        });
    }
    Ok(Dataset {
        height,
        width,
        l_max,
        records,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    from_bytes(&std::fs::read(path)?)
}
