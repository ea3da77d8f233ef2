//! Command-line harness library: benchmark, curve fitting, training,
//! evaluation, data generation, and rendering around `eevg-core`.

pub mod bench;
pub mod demo;
pub mod eval;
pub mod fit;
pub mod gradcheck;
pub mod train;

use eevg_core::config::EevgConfig;
use eevg_core::model::ModelWeights;
use eevg_core::{Error, Result, Tensor};

/// Confirms that loaded weights structurally match a config before any
/// forward pass (weight files carry no config, only tensor shapes).
pub fn check_weight_shapes(
    w: &ModelWeights<Tensor<f32>>,
    cfg: &EevgConfig,
    vocab: usize,
) -> Result<()> {
    cfg.validate()?;
    let mut problems = Vec::new();
    let mut expect = |what: &str, got: &[usize], want: &[usize]| {
        if got != want {
            problems.push(format!("{what}: shape {got:?}, config implies {want:?}"));
        }
    };
    let p2 = cfg.patch * cfg.patch;
    expect("embed.patch.w", &w.embed.patch.w.shape, &[p2 * 3, cfg.c_v]);
    expect("embed.token", &w.embed.token.shape, &[vocab, cfg.c_l]);
    expect("visual_proj.w", &w.visual_proj.w.shape, &[cfg.c_v, cfg.c]);
    expect(
        "linguistic_proj.w",
        &w.linguistic_proj.w.shape,
        &[cfg.c_l, cfg.c],
    );
    expect("pos_embed", &w.pos_embed.shape, &[cfg.n(), cfg.c]);
    expect("heads.mask2.w", &w.heads.mask2.w.shape, &[cfg.c, p2]);
    if w.layers.len() != cfg.layers {
        problems.push(format!(
            "found {} fusion layers, config says {}",
            w.layers.len(),
            cfg.layers
        ));
    }
    for (i, l) in w.layers.iter().enumerate() {
        if l.msa.heads != cfg.heads {
            problems.push(format!(
                "layers.{i}.msa has {} heads, config says {}",
                l.msa.heads, cfg.heads
            ));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "weights do not match the config: {}",
            problems.join("; ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use eevg_core::rng::Rng;
    use eevg_core::synthgen::vocab_size;

    #[test]
    fn matching_weights_pass_mismatched_fail() {
        let cfg = EevgConfig::default();
        let mut rng = Rng::new(1);
        let w = ModelWeights::<Tensor<f32>>::init(&cfg, vocab_size(), &mut rng).unwrap();
        assert!(check_weight_shapes(&w, &cfg, vocab_size()).is_ok());

        let mut other = cfg;
        other.c = cfg.c * 2;
        other.ffn = cfg.ffn * 2;
        let err = check_weight_shapes(&w, &other, vocab_size()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let mut fewer = cfg;
        fewer.layers = cfg.layers + 1;
        assert!(check_weight_shapes(&w, &fewer, vocab_size()).is_err());
    }
}
