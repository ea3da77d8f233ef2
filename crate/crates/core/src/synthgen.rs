//! Deterministic synthetic referring-grounding task.
//!
//! Each sample is an image of 2–4 non-overlapping colored shapes plus a
//! token "expression" (`[position?] color shape`) that refers to exactly
//! one of them, with a tight ground-truth box and a binary mask. Colors
//! and shapes are drawn uniformly; a relative-position token is added
//! only when color+shape alone is ambiguous. Generation is a pure
//! function of (seed, config), so datasets are reproducible elementwise.

use crate::config::EevgConfig;
use crate::error::{Error, Result};
use crate::heads::BBox;
use crate::losses::GroundTruth;
use crate::rng::Rng;

// ── vocabulary ───────────────────────────────────────────────────────

pub const PAD: u32 = 0;

/// Token strings; index = token id. Id 0 is padding.
pub const VOCAB: [&str; 11] = [
    "<pad>", "red", "green", "blue", "square", "circle", "triangle", "left", "right", "top",
    "bottom",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn token_name(id: u32) -> Option<&'static str> {
    VOCAB.get(id as usize).copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn token_id(self) -> u32 {
        1 + self as u32
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.15, 0.1],
            Color::Green => [0.1, 1.0, 0.15],
            Color::Blue => [0.15, 0.1, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn token_id(self) -> u32 {
        4 + self as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
}

impl Position {
    pub fn token_id(self) -> u32 {
        7 + self as u32
    }
}

// ── scene model ──────────────────────────────────────────────────────

/// A shape occupying the pixel box [x0, x0+size) × [y0, y0+size); every
/// kind's rasterization touches all four box edges, so this box is also
/// the tight bounding box of the mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub color: Color,
    pub kind: ShapeKind,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl PlacedShape {
    pub fn cx(&self) -> f64 {
        self.x0 as f64 + self.size as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.y0 as f64 + self.size as f64 / 2.0
    }

    /// True if the pixel (x, y) belongs to the shape. Pixel centers are
    /// at (x+0.5, y+0.5); edges are hard (exactly binary masks).
    pub fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || x >= self.x0 + self.size || y < self.y0 || y >= self.y0 + self.size {
            return false;
        }
        let dx = x as f64 + 0.5 - self.cx();
        let dy = y as f64 + 0.5 - self.cy();
        let s = self.size as f64;
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Circle => dx * dx + dy * dy <= (s / 2.0) * (s / 2.0),
            ShapeKind::Triangle => {
                // Upward isoceles: apex on the top row, full-width base.
                let progress = (y - self.y0 + 1) as f64 / s;
                dx.abs() <= progress * s / 2.0
            }
        }
    }

    fn expanded_box(&self, pad: usize) -> (i64, i64, i64, i64) {
        (
            self.x0 as i64 - pad as i64,
            self.y0 as i64 - pad as i64,
            (self.x0 + self.size + pad) as i64,
            (self.y0 + self.size + pad) as i64,
        )
    }

    fn overlaps_with_gap(&self, other: &PlacedShape) -> bool {
        let (ax0, ay0, ax1, ay1) = self.expanded_box(1);
        let (bx0, by0, bx1, by1) = other.expanded_box(0);
        ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
    }
}

/// One training/eval sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub seed: u64,
    /// H×W×3 row-major, channel-last, values in [0,1].
    pub image: Vec<f64>,
    /// Token ids padded with 0 to `l_max`.
    pub ids: Vec<u32>,
    pub expr_len: usize,
    pub gt: GroundTruth,
    pub shapes: Vec<PlacedShape>,
    pub referent: usize,
}

impl SynthSample {
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.expr_len).collect()
    }

    pub fn expression(&self) -> String {
        self.ids[..self.expr_len]
            .iter()
            .filter_map(|&id| token_name(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One human-readable line for the dataset manifest.
    pub fn manifest_line(&self) -> String {
        let b = &self.gt.bbox;
        format!(
            "seed={} expr=\"{}\" objects={} referent={} box=({:.4},{:.4},{:.4},{:.4})",
            self.seed,
            self.expression(),
            self.shapes.len(),
            self.referent,
            b.cx,
            b.cy,
            b.w,
            b.h
        )
    }
}

// ── matcher oracle ───────────────────────────────────────────────────

/// Exhaustive expression matcher. Filters shapes by the color and kind
/// tokens; if a position token is present, keeps only the strict extreme
/// along that axis (ties keep all tied shapes, i.e. stay ambiguous).
/// Returns indices of all matching shapes.
pub fn find_referents(shapes: &[PlacedShape], ids: &[u32]) -> Vec<usize> {
    let mut color = None;
    let mut kind = None;
    let mut pos = None;
    for &id in ids {
        match id {
            0 => {}
            1..=3 => color = Some(Color::ALL[(id - 1) as usize]),
            4..=6 => kind = Some(ShapeKind::ALL[(id - 4) as usize]),
            7 => pos = Some(Position::Left),
            8 => pos = Some(Position::Right),
            9 => pos = Some(Position::Top),
            10 => pos = Some(Position::Bottom),
            _ => return Vec::new(),
        }
    }
    let mut matched: Vec<usize> = (0..shapes.len())
        .filter(|&i| {
            color.is_none_or(|c| shapes[i].color == c)
                && kind.is_none_or(|k| shapes[i].kind == k)
        })
        .collect();
    if let Some(p) = pos {
        let key = |i: usize| match p {
            Position::Left | Position::Right => shapes[i].cx(),
            Position::Top | Position::Bottom => shapes[i].cy(),
        };
        let better = |a: f64, b: f64| match p {
            Position::Left | Position::Top => a < b,
            Position::Right | Position::Bottom => a > b,
        };
        if let Some(&first) = matched.first() {
            let mut best = key(first);
            for &i in &matched {
                if better(key(i), best) {
                    best = key(i);
                }
            }
            matched.retain(|&i| key(i) == best);
        }
    }
    matched
}

// ── generation ───────────────────────────────────────────────────────

fn size_range(cfg: &EevgConfig) -> (usize, usize) {
    let side = cfg.height.min(cfg.width);
    let smin = (side / 8).max(4);
    let smax = (side / 4).max(smin);
    (smin, smax)
}

fn rasterize(shapes: &[PlacedShape], referent: usize, cfg: &EevgConfig) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (cfg.height, cfg.width);
    let mut image = vec![0.0; h * w * 3];
    let mut mask = vec![0.0; h * w];
    for (i, s) in shapes.iter().enumerate() {
        let rgb = s.color.rgb();
        for y in s.y0..s.y0 + s.size {
            for x in s.x0..s.x0 + s.size {
                if s.covers(x, y) {
                    let px = (y * w + x) * 3;
                    image[px..px + 3].copy_from_slice(&rgb);
                    if i == referent {
                        mask[y * w + x] = 1.0;
                    }
                }
            }
        }
    }
    (image, mask)
}

fn tight_bbox(mask: &[f64], w: usize, h: usize) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    assert!(x0 < x1 && y0 < y1, "mask must be non-empty");
    BBox::new(
        (x0 + x1) as f64 / 2.0 / w as f64,
        (y0 + y1) as f64 / 2.0 / h as f64,
        (x1 - x0) as f64 / w as f64,
        (y1 - y0) as f64 / h as f64,
    )
}

/// Builds the minimal expression for `referent`: color+shape, plus one
/// position token when another shape shares both attributes. The twin is
/// disambiguated along the axis with the larger center separation.
fn build_expression(shapes: &[PlacedShape], referent: usize) -> Vec<u32> {
    let me = &shapes[referent];
    let twin = shapes
        .iter()
        .enumerate()
        .find(|(i, s)| *i != referent && s.color == me.color && s.kind == me.kind);
    let mut ids = Vec::with_capacity(3);
    if let Some((_, t)) = twin {
        let dx = me.cx() - t.cx();
        let dy = me.cy() - t.cy();
        let pos = if dx.abs() >= dy.abs() {
            if dx < 0.0 { Position::Left } else { Position::Right }
        } else if dy < 0.0 {
            Position::Top
        } else {
            Position::Bottom
        };
        ids.push(pos.token_id());
    }
    ids.push(me.color.token_id());
    ids.push(me.kind.token_id());
    ids
}

/// Generates one sample. Deterministic in (seed, cfg). Placement retries
/// are bounded; exhausting them is a generation error, never a silent
/// degradation.
pub fn generate_sample(seed: u64, cfg: &EevgConfig) -> Result<SynthSample> {
    cfg.validate()?;
    let (smin, smax) = size_range(cfg);
    if cfg.width < 2 * smin + 3 || cfg.height < smin + 2 || cfg.l_max < 3 {
        return Err(Error::Generation(format!(
            "a {}x{} image with l_max {} cannot host two shapes of size >= {smin}",
            cfg.width, cfg.height, cfg.l_max
        )));
    }
    let mut rng = Rng::new(seed ^ 0x5eed_c0de);

    'sample: for _ in 0..40 {
        let n_obj = 2 + rng.below(3);

        // Geometry first: disjoint boxes with at least a 1-pixel gap.
        let mut placed: Vec<PlacedShape> = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let mut ok = false;
            for _ in 0..120 {
                let size = smin + rng.below(smax - smin + 1);
                if cfg.width < size + 2 || cfg.height < size + 2 {
                    continue;
                }
                let x0 = 1 + rng.below(cfg.width - size - 1);
                let y0 = 1 + rng.below(cfg.height - size - 1);
                let cand = PlacedShape {
                    color: Color::Red,
                    kind: ShapeKind::Square,
                    x0,
                    y0,
                    size,
                };
                if placed.iter().all(|p| !cand.overlaps_with_gap(p)) {
                    placed.push(cand);
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'sample;
            }
        }

        // Attributes: uniform, but at most two shapes may share a
        // (color, kind) pair so one position token always disambiguates.
        let mut ok_attrs = false;
        'attrs: for _ in 0..60 {
            for p in placed.iter_mut() {
                p.color = Color::ALL[rng.below(3)];
                p.kind = ShapeKind::ALL[rng.below(3)];
            }
            for i in 0..placed.len() {
                let same = placed
                    .iter()
                    .filter(|s| s.color == placed[i].color && s.kind == placed[i].kind)
                    .count();
                if same > 2 {
                    continue 'attrs;
                }
            }
            ok_attrs = true;
            break;
        }
        if !ok_attrs {
            continue 'sample;
        }

        let referent = rng.below(placed.len());
        let expr = build_expression(&placed, referent);
        if find_referents(&placed, &expr) != vec![referent] {
            // Unreachable by construction; fail loud if it ever regresses.
            return Err(Error::Generation(format!(
                "expression `{expr:?}` does not uniquely identify shape {referent}"
            )));
        }

        let (image, mask) = rasterize(&placed, referent, cfg);
        let bbox = tight_bbox(&mask, cfg.width, cfg.height);
        let gt = GroundTruth::new(bbox, mask, cfg.height, cfg.width)?;
        let expr_len = expr.len();
        let mut ids = expr;
        ids.resize(cfg.l_max, PAD);
        return Ok(SynthSample {
            seed,
            image,
            ids,
            expr_len,
            gt,
            shapes: placed,
            referent,
        });
    }
    Err(Error::Generation(format!(
        "failed to place 2+ disjoint shapes in a {}x{} image after bounded retries",
        cfg.width, cfg.height
    )))
}

/// Samples `count` scenes with consecutive seeds `start..start+count`.
pub fn generate_dataset(start: u64, count: usize, cfg: &EevgConfig) -> Result<Vec<SynthSample>> {
    (0..count)
        .map(|i| generate_sample(start + i as u64, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EevgConfig {
        EevgConfig::default()
    }

    #[test]
    fn fixed_seed_reproduces_identical_samples() {
        let a = generate_sample(42, &cfg()).unwrap();
        let b = generate_sample(42, &cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(43, &cfg()).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn dataset_is_elementwise_reproducible() {
        let ds = generate_dataset(100, 8, &cfg()).unwrap();
        for (i, s) in ds.iter().enumerate() {
            assert_eq!(*s, generate_sample(100 + i as u64, &cfg()).unwrap());
        }
    }

    #[test]
    fn matcher_oracle_finds_exactly_one_referent() {
        let c = cfg();
        let mut with_pos = 0;
        let mut without_pos = 0;
        for seed in 0..2000 {
            let s = generate_sample(seed, &c).unwrap();
            assert_eq!(
                find_referents(&s.shapes, &s.ids[..s.expr_len]),
                vec![s.referent],
                "seed {seed}"
            );
            assert!(s.ids.iter().all(|&id| (id as usize) < vocab_size()));
            assert!(s.expr_len <= c.l_max);
            match s.expr_len {
                2 => without_pos += 1,
                3 => with_pos += 1,
                other => panic!("unexpected expression length {other}"),
            }
        }
        assert!(with_pos > 50, "ambiguous scenes should occur ({with_pos})");
        assert!(without_pos > 500, "unambiguous scenes dominate ({without_pos})");
    }

    #[test]
    fn referent_classes_are_balanced_over_10k_samples() {
        let c = cfg();
        let mut colors = [0usize; 3];
        let mut kinds = [0usize; 3];
        let total = 10_000;
        for seed in 0..total {
            let s = generate_sample(seed, &c).unwrap();
            let r = &s.shapes[s.referent];
            colors[r.color as usize] += 1;
            kinds[r.kind as usize] += 1;
        }
        for count in colors.iter().chain(kinds.iter()) {
            let freq = *count as f64 / total as f64;
            assert!(
                (0.2..=0.45).contains(&freq),
                "referent class frequency {freq} outside [0.2, 0.45]"
            );
        }
    }

    #[test]
    fn box_is_tight_over_mask_and_strictly_inside_image() {
        let c = cfg();
        for seed in 500..700 {
            let s = generate_sample(seed, &c).unwrap();
            let area: f64 = s.gt.mask.iter().sum();
            assert!(area >= 1.0);

            // Tight box: recompute from the mask and compare exactly.
            let recomputed = tight_bbox(&s.gt.mask, c.width, c.height);
            let b = &s.gt.bbox;
            assert_eq!(recomputed.to_vec(), b.to_vec(), "seed {seed}");

            // The referent's placement box equals the mask's tight box.
            let r = &s.shapes[s.referent];
            assert_eq!(
                (
                    (r.x0 as f64 + r.size as f64 / 2.0) / c.width as f64,
                    (r.size as f64) / c.width as f64
                ),
                (b.cx, b.w)
            );

            let (x0, y0, x1, y1) = b.corners();
            assert!(x0 > 0.0 && y0 > 0.0 && x1 < 1.0 && y1 < 1.0);

            // Mask pixels lie inside the box region.
            for y in 0..c.height {
                for x in 0..c.width {
                    if s.gt.mask[y * c.width + x] > 0.5 {
                        let fx = (x as f64 + 0.5) / c.width as f64;
                        let fy = (y as f64 + 0.5) / c.height as f64;
                        assert!(fx > x0 && fx < x1 && fy > y0 && fy < y1);
                    }
                }
            }
        }
    }

    #[test]
    fn shapes_never_overlap_or_touch() {
        let c = cfg();
        for seed in 900..1100 {
            let s = generate_sample(seed, &c).unwrap();
            for i in 0..s.shapes.len() {
                for j in i + 1..s.shapes.len() {
                    assert!(!s.shapes[i].overlaps_with_gap(&s.shapes[j]));
                }
            }
        }
    }

    #[test]
    fn triangle_and_circle_rasterizations_touch_all_box_edges() {
        for kind in ShapeKind::ALL {
            for size in [4usize, 5, 8, 11] {
                let s = PlacedShape {
                    color: Color::Red,
                    kind,
                    x0: 3,
                    y0: 2,
                    size,
                };
                let covered: Vec<(usize, usize)> = (0..20)
                    .flat_map(|y| (0..20).map(move |x| (x, y)))
                    .filter(|&(x, y)| s.covers(x, y))
                    .collect();
                let xs: Vec<usize> = covered.iter().map(|&(x, _)| x).collect();
                let ys: Vec<usize> = covered.iter().map(|&(_, y)| y).collect();
                assert_eq!(*xs.iter().min().unwrap(), 3, "{kind:?} size {size}");
                assert_eq!(*xs.iter().max().unwrap(), 3 + size - 1);
                assert_eq!(*ys.iter().min().unwrap(), 2);
                assert_eq!(*ys.iter().max().unwrap(), 2 + size - 1);
            }
        }
    }

    #[test]
    fn impossible_geometry_is_a_generation_error() {
        let mut c = cfg();
        c.height = 8;
        c.width = 8;
        c.patch = 4;
        assert!(matches!(
            generate_sample(1, &c),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn manifest_line_is_human_readable() {
        let s = generate_sample(7, &cfg()).unwrap();
        let line = s.manifest_line();
        assert!(line.starts_with("seed=7 expr=\""));
        assert!(line.contains("box=("));
        for id in &s.ids[..s.expr_len] {
            assert!(line.contains(token_name(*id).unwrap()));
        }
    }
}
