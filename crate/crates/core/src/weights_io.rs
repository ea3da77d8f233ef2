//! Weight-file serialization.
//!
//! Layout (all integers little-endian):
//!   magic `EEVG` · u32 version · u32 tensor count, then per tensor:
//!   u16 name length · UTF-8 name · u8 rank · u32 extent per axis ·
//!   raw f32 values.
//!
//! Tensors appear in the model's canonical traversal order, preceded by a
//! rank-1 `meta` tensor holding `[head count]` (the only structural fact
//! not recoverable from tensor shapes). Every malformed input is rejected
//! with a format error naming the byte offset at which parsing failed.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{AttentionParams, LayerWeights, Linear, LnParams};
use crate::heads::HeadWeights;
use crate::model::{EmbedWeights, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"EEVG";
pub const VERSION: u32 = 1;

// ── encoding ─────────────────────────────────────────────────────────

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    let bytes = name.as_bytes();
    assert!(bytes.len() <= u16::MAX as usize, "tensor name too long");
    assert!(shape.len() <= u8::MAX as usize, "tensor rank too large");
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes weights; values are stored as f32 regardless of `F`.
pub fn to_bytes<F: Scalar>(w: &ModelWeights<Tensor<F>>) -> Vec<u8> {
    let heads = w
        .layers
        .first()
        .map(|l| l.msa.heads)
        .expect("a model has at least one layer");
    let mut tensors = 1u32; // meta
    w.visit(&mut |_| tensors += 1);

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&tensors.to_le_bytes());
    push_tensor(&mut out, "meta", &[1], std::iter::once(heads as f32));
    w.visit_named(&mut |name, tensor| {
        push_tensor(
            &mut out,
            name,
            &tensor.shape,
            tensor.data.iter().map(|v| v.to_f32x()),
        );
    });
    out
}

pub fn save_weights<F: Scalar>(w: &ModelWeights<Tensor<F>>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(w))?;
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

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor<f32>)> {
    let name_at = r.pos;
    let name_len = r.u16("tensor name length")? as usize;
    let name = std::str::from_utf8(r.bytes(name_len, "tensor name")?)
        .map_err(|_| Error::Format {
            offset: name_at as u64,
            msg: "tensor name is not valid UTF-8".into(),
        })?
        .to_string();
    let rank = r.u8("tensor rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let e = r.u32("tensor extent")? as u64;
        count = count.saturating_mul(e);
        shape.push(e as usize);
    }
    if count > (u32::MAX as u64) {
        return Err(Error::Format {
            offset: name_at as u64,
            msg: format!("tensor `{name}` declares an implausible {count} values"),
        });
    }
    let raw = r.bytes(count as usize * 4, "tensor values")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Tensor { shape, data }))
}

struct Table {
    map: HashMap<String, Tensor<f32>>,
    end: u64,
}

impl Table {
    fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        self.map.remove(name).ok_or_else(|| Error::Format {
            offset: self.end,
            msg: format!("weight file is missing tensor `{name}`"),
        })
    }

    fn linear(&mut self, prefix: &str) -> Result<Linear<Tensor<f32>>> {
        Ok(Linear {
            w: self.take(&format!("{prefix}.w"))?,
            b: self.take(&format!("{prefix}.b"))?,
        })
    }

    fn ln(&mut self, prefix: &str) -> Result<LnParams<Tensor<f32>>> {
        Ok(LnParams {
            gamma: self.take(&format!("{prefix}.gamma"))?,
            beta: self.take(&format!("{prefix}.beta"))?,
        })
    }

    fn attention(&mut self, prefix: &str, heads: usize) -> Result<AttentionParams<Tensor<f32>>> {
        Ok(AttentionParams {
            q: self.linear(&format!("{prefix}.q"))?,
            k: self.linear(&format!("{prefix}.k"))?,
            v: self.linear(&format!("{prefix}.v"))?,
            o: self.linear(&format!("{prefix}.o"))?,
            heads,
        })
    }

    fn layer(&mut self, prefix: &str, heads: usize) -> Result<LayerWeights<Tensor<f32>>> {
        Ok(LayerWeights {
            msa: self.attention(&format!("{prefix}.msa"), heads)?,
            mca: self.attention(&format!("{prefix}.mca"), heads)?,
            ffn1: self.linear(&format!("{prefix}.ffn1"))?,
            ffn2: self.linear(&format!("{prefix}.ffn2"))?,
            ln1: self.ln(&format!("{prefix}.ln1"))?,
            ln2: self.ln(&format!("{prefix}.ln2"))?,
            ln3: self.ln(&format!("{prefix}.ln3"))?,
        })
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelWeights<Tensor<f32>>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:02x?}, expected `EEVG`"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let tensor_count = r.u32("tensor count")? as usize;

    let mut map = HashMap::with_capacity(tensor_count);
    let mut layer_count = 0usize;
    for _ in 0..tensor_count {
        let at = r.pos;
        let (name, tensor) = read_tensor(&mut r)?;
        if let Some(rest) = name.strip_prefix("layers.") {
            if let Some(idx) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
                layer_count = layer_count.max(idx + 1);
            }
        }
        if map.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("duplicate tensor `{name}`"),
            });
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes after final tensor", buf.len() - r.pos),
        });
    }

    let mut table = Table { map, end: r.pos as u64 };
    let meta = table.take("meta")?;
    let heads_f = *meta.data.first().ok_or_else(|| Error::Format {
        offset: table.end,
        msg: "meta tensor is empty".into(),
    })?;
    if heads_f < 1.0 || heads_f.fract() != 0.0 {
        return Err(Error::Format {
            offset: table.end,
            msg: format!("meta head count {heads_f} is not a positive integer"),
        });
    }
    let heads = heads_f as usize;
    if layer_count == 0 {
        return Err(Error::Format {
            offset: table.end,
            msg: "weight file contains no fusion layers".into(),
        });
    }

    let w = ModelWeights {
        embed: EmbedWeights {
            patch: table.linear("embed.patch")?,
            token: table.take("embed.token")?,
        },
        visual_proj: table.linear("visual_proj")?,
        linguistic_proj: table.linear("linguistic_proj")?,
        location_token: table.take("location_token")?,
        pos_embed: table.take("pos_embed")?,
        layers: (0..layer_count)
            .map(|i| table.layer(&format!("layers.{i}"), heads))
            .collect::<Result<Vec<_>>>()?,
        heads: HeadWeights {
            det1: table.linear("heads.det1")?,
            det2: table.linear("heads.det2")?,
            mask1: table.linear("heads.mask1")?,
            mask2: table.linear("heads.mask2")?,
            conv_k: table.take("heads.conv.k")?,
            conv_b: table.take("heads.conv.b")?,
        },
    };
    if let Some(name) = table.map.keys().next() {
        return Err(Error::Format {
            offset: table.end,
            msg: format!("unrecognized tensor `{name}`"),
        });
    }
    let c = *w.location_token.shape.last().unwrap_or(&0);
    if c == 0 || c % heads != 0 {
        return Err(Error::Format {
            offset: table.end,
            msg: format!("head count {heads} incompatible with channel dim {c}"),
        });
    }
    Ok(w)
}

pub fn load_weights(path: &Path) -> Result<ModelWeights<Tensor<f32>>> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EevgConfig;
    use crate::rng::Rng;

    fn small_cfg() -> EevgConfig {
        let mut cfg = EevgConfig::default();
        cfg.height = 16;
        cfg.width = 16;
        cfg.patch = 4;
        cfg.c = 8;
        cfg.c_v = 6;
        cfg.c_l = 5;
        cfg.heads = 2;
        cfg.layers = 2;
        cfg.ffn = 12;
        cfg.l_max = 4;
        cfg
    }

    fn sample_weights(seed: u64) -> ModelWeights<Tensor<f32>> {
        let mut rng = Rng::new(seed);
        ModelWeights::init(&small_cfg(), 7, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_stable() {
        let w = sample_weights(1);
        let bytes = to_bytes(&w);
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&loaded), bytes);

        let mut original = Vec::new();
        w.visit(&mut |t| original.push((t.shape.clone(), t.data.clone())));
        let mut reread = Vec::new();
        loaded.visit(&mut |t| reread.push((t.shape.clone(), t.data.clone())));
        assert_eq!(original, reread);
    }

    #[test]
    fn f64_weights_load_back_as_their_f32_projection() {
        let mut rng = Rng::new(9);
        let w64 = ModelWeights::<Tensor<f64>>::init(&small_cfg(), 7, &mut rng).unwrap();
        let loaded = from_bytes(&to_bytes(&w64)).unwrap();
        let mut pairs = Vec::new();
        w64.visit(&mut |t| pairs.push(t.data.clone()));
        let mut i = 0;
        loaded.visit(&mut |t| {
            for (a, b) in pairs[i].iter().zip(&t.data) {
                assert_eq!(*a as f32, *b);
            }
            i += 1;
        });
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.eevg");
        let w = sample_weights(2);
        save_weights(&w, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(to_bytes(&loaded), to_bytes(&w));
    }

    #[test]
    fn bad_magic_is_reported_at_offset_zero() {
        let mut bytes = to_bytes(&sample_weights(3));
        bytes[0] = b'X';
        match from_bytes(&bytes) {
            Err(Error::Format { offset: 0, msg }) => assert!(msg.contains("magic")),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_version_is_reported_at_offset_four() {
        let mut bytes = to_bytes(&sample_weights(4));
        bytes[4] = 99;
        match from_bytes(&bytes) {
            Err(Error::Format { offset: 4, msg }) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_reported_at_end_of_buffer() {
        let bytes = to_bytes(&sample_weights(5));
        let cut = &bytes[..bytes.len() - 7];
        match from_bytes(cut) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, cut.len() as u64);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage_and_tampered_names_are_rejected() {
        let mut bytes = to_bytes(&sample_weights(6));
        bytes.extend_from_slice(&[0, 1, 2]);
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { .. })));

        let mut bytes = to_bytes(&sample_weights(6));
        // The first tensor's name starts right after the 12-byte header
        // and its 2-byte length; corrupting it leaves an unknown name.
        bytes[14] = b'q';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_weights(Path::new("/nonexistent/weights.eevg")),
            Err(Error::Io(_))
        ));
    }
}
