//! Model/pipeline configuration and the plain-text `key = value` config
//! file format (`#` starts a comment; keys match the struct field names).

use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EevgConfig {
    /// Image height in pixels.
    pub height: usize,
    /// Image width in pixels.
    pub width: usize,
    /// Patch size in pixels; divides both extents.
    pub patch: usize,
    /// Maximum expression length in tokens.
    pub l_max: usize,
    /// Fusion channel dimension.
    pub c: usize,
    /// Visual backbone output dimension.
    pub c_v: usize,
    /// Linguistic backbone output dimension.
    pub c_l: usize,
    /// Attention head count; divides `c`.
    pub heads: usize,
    /// Decoder depth.
    pub layers: usize,
    /// Feed-forward hidden dimension.
    pub ffn: usize,
    /// Elimination threshold on min-max-normalized scores.
    pub alpha: f64,
    /// Spatial-attention window radius.
    pub k: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for EevgConfig {
    /// Desk-scale defaults: 64×64 images in an 8×8 patch grid.
    fn default() -> Self {
        EevgConfig {
            height: 64,
            width: 64,
            patch: 8,
            l_max: 6,
            c: 64,
            c_v: 48,
            c_l: 32,
            heads: 4,
            layers: 3,
            ffn: 86, // c·4/3, mirroring the full-scale 768→1024 ratio
            alpha: 0.015,
            k: 1,
            loss: LossConfig::default(),
            seed: 7,
        }
    }
}

impl EevgConfig {
    /// Patch-grid height.
    pub fn gh(&self) -> usize {
        self.height / self.patch
    }

    /// Patch-grid width.
    pub fn gw(&self) -> usize {
        self.width / self.patch
    }

    /// Visual token count N.
    pub fn n(&self) -> usize {
        self.gh() * self.gw()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} must divide image {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if self.heads == 0 || self.c % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide channels {}",
                self.heads, self.c
            )));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0,1), got {}",
                self.alpha
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer required".into()));
        }
        if self.l_max == 0 {
            return Err(Error::Config("l_max must be positive".into()));
        }
        if self.n() < 2 {
            return Err(Error::Config("need at least two visual tokens".into()));
        }
        self.loss.validate()
    }

    /// Parses `key = value` lines. Unknown keys are errors; omitted keys
    /// keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = EevgConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::Config(format!("line {}: {key} is not a valid {what}: `{value}`", lineno + 1))
            };
            macro_rules! set {
                ($field:expr, $ty:ty, $what:expr) => {
                    $field = value.parse::<$ty>().map_err(|_| bad($what))?
                };
            }
            match key {
                "height" => set!(cfg.height, usize, "integer"),
                "width" => set!(cfg.width, usize, "integer"),
                "patch" => set!(cfg.patch, usize, "integer"),
                "l_max" => set!(cfg.l_max, usize, "integer"),
                "c" => set!(cfg.c, usize, "integer"),
                "c_v" => set!(cfg.c_v, usize, "integer"),
                "c_l" => set!(cfg.c_l, usize, "integer"),
                "heads" => set!(cfg.heads, usize, "integer"),
                "layers" => set!(cfg.layers, usize, "integer"),
                "ffn" => set!(cfg.ffn, usize, "integer"),
                "alpha" => set!(cfg.alpha, f64, "number"),
                "k" => set!(cfg.k, usize, "integer"),
                "lambda_det" => set!(cfg.loss.lambda_det, f64, "number"),
                "lambda_seg" => set!(cfg.loss.lambda_seg, f64, "number"),
                "focal_gamma" => set!(cfg.loss.focal_gamma, f64, "number"),
                "focal_alpha" => set!(cfg.loss.focal_alpha, f64, "number"),
                "dice_eps" => set!(cfg.loss.dice_eps, f64, "number"),
                "seed" => set!(cfg.seed, u64, "integer"),
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the full configuration in the file format.
    pub fn to_text(&self) -> String {
        format!(
            "height = {}\nwidth = {}\npatch = {}\nl_max = {}\nc = {}\nc_v = {}\nc_l = {}\nheads = {}\nlayers = {}\nffn = {}\nalpha = {}\nk = {}\nlambda_det = {}\nlambda_seg = {}\nfocal_gamma = {}\nfocal_alpha = {}\ndice_eps = {}\nseed = {}\n",
            self.height,
            self.width,
            self.patch,
            self.l_max,
            self.c,
            self.c_v,
            self.c_l,
            self.heads,
            self.layers,
            self.ffn,
            self.alpha,
            self.k,
            self.loss.lambda_det,
            self.loss.lambda_seg,
            self.loss.focal_gamma,
            self.loss.focal_alpha,
            self.loss.dice_eps,
            self.seed
        )
    }
}
