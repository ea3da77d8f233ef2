//! Dynamic visual-token elimination.
//!
//! Per decoder layer: the location token's attention row is averaged over
//! heads, smoothed over the patch grid (adaptive spatial attention),
//! min-max normalized, and thresholded; tokens scoring below α are
//! dropped for all later layers. Selection is hard — gradients flow
//! through survivors only. A fixed-count variant serves as the static
//! ablation baseline.

use crate::error::{Error, Result};
use crate::fusion::FusionState;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which original patch indices are still alive, in increasing order.
/// The inverse map (original index → current position) is a binary search
/// over `kept`, defined exactly on surviving indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSet {
    kept: Vec<usize>,
    n_total: usize,
}

impl TokenSet {
    /// All N tokens alive.
    pub fn full(n: usize) -> Self {
        TokenSet {
            kept: (0..n).collect(),
            n_total: n,
        }
    }

    pub fn new(kept: Vec<usize>, n_total: usize) -> Result<Self> {
        if kept.is_empty() {
            return Err(Error::Precondition("token set must keep at least one".into()));
        }
        for w in kept.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Index(format!(
                    "kept indices not strictly increasing at {} .. {}",
                    w[0], w[1]
                )));
            }
        }
        if *kept.last().unwrap() >= n_total {
            return Err(Error::Index(format!(
                "kept index {} out of range {n_total}",
                kept.last().unwrap()
            )));
        }
        Ok(TokenSet { kept, n_total })
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    /// Current position of an original index, if it survived.
    pub fn position_of(&self, original: usize) -> Option<usize> {
        self.kept.binary_search(&original).ok()
    }

    /// Boolean keep-mask over all original positions.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_total];
        for &i in &self.kept {
            m[i] = true;
        }
        m
    }
}

/// Composes an outer token set with positions (into the outer list) that
/// survive a further elimination round.
pub fn compose_index_maps(outer: &TokenSet, inner_kept: &[usize]) -> Result<TokenSet> {
    let mut kept = Vec::with_capacity(inner_kept.len());
    for w in inner_kept.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Index(format!(
                "inner positions not strictly increasing at {} .. {}",
                w[0], w[1]
            )));
        }
    }
    for &p in inner_kept {
        let Some(&orig) = outer.kept.get(p) else {
            return Err(Error::Index(format!(
                "inner position {p} out of range {}",
                outer.len()
            )));
        };
        kept.push(orig);
    }
    TokenSet::new(kept, outer.n_total)
}

/// One score per surviving token, with the patch-grid shape the tokens
/// came from (gh × gw = N original positions).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScoreMap {
    pub gh: usize,
    pub gw: usize,
    pub values: Vec<f64>,
}

impl AttentionScoreMap {
    pub fn new(gh: usize, gw: usize, values: Vec<f64>) -> Self {
        AttentionScoreMap { gh, gw, values }
    }

    fn check(&self, token_set: &TokenSet) -> Result<()> {
        if self.gh * self.gw != token_set.n_total() {
            return Err(Error::Dim(format!(
                "grid {}x{} vs token universe {}",
                self.gh,
                self.gw,
                token_set.n_total()
            )));
        }
        if self.values.len() != token_set.len() {
            return Err(Error::Dim(format!(
                "{} scores vs {} surviving tokens",
                self.values.len(),
                token_set.len()
            )));
        }
        Ok(())
    }

    /// Scores scattered onto the full grid; eliminated positions are 0.
    /// Useful for rendering and for the spatial-window pass.
    pub fn to_grid(&self, token_set: &TokenSet) -> Result<Vec<f64>> {
        self.check(token_set)?;
        let mut grid = vec![0.0; self.gh * self.gw];
        for (j, &orig) in token_set.kept().iter().enumerate() {
            grid[orig] = self.values[j];
        }
        Ok(grid)
    }
}

/// Head-mean of the per-head location attention rows (h × N′).
pub fn location_attention_scores<F: Scalar>(
    loc_heads: &Tensor<F>,
    gh: usize,
    gw: usize,
) -> AttentionScoreMap {
    let (h, n) = loc_heads.rows_cols();
    assert!(h >= 1, "need at least one head row");
    let mut values = vec![0.0; n];
    for row in 0..h {
        let head = &loc_heads.data[row * n..(row + 1) * n];
        for (v, x) in values.iter_mut().zip(head) {
            *v += x.to_f64x();
        }
    }
    for v in &mut values {
        *v /= h as f64;
    }
    AttentionScoreMap::new(gh, gw, values)
}

/// Windowed average on the patch grid: every cell becomes the sum of its
/// (2k+1)² neighborhood divided by (2k+1)² — the denominator is constant,
/// so out-of-grid and eliminated cells contribute zero. Scores are
/// scattered to original positions first and gathered back after.
pub fn adaptive_spatial_attention(
    scores: &AttentionScoreMap,
    token_set: &TokenSet,
    k: usize,
) -> Result<AttentionScoreMap> {
    let grid = scores.to_grid(token_set)?;
    let (gh, gw) = (scores.gh, scores.gw);
    let denom = ((2 * k + 1) * (2 * k + 1)) as f64;
    let ki = k as isize;
    let mut smoothed = vec![0.0; gh * gw];
    for i in 0..gh as isize {
        for j in 0..gw as isize {
            let mut acc = 0.0;
            for di in -ki..=ki {
                let ii = i + di;
                if ii < 0 || ii >= gh as isize {
                    continue;
                }
                for dj in -ki..=ki {
                    let jj = j + dj;
                    if jj < 0 || jj >= gw as isize {
                        continue;
                    }
                    acc += grid[ii as usize * gw + jj as usize];
                }
            }
            smoothed[(i * gw as isize + j) as usize] = acc / denom;
        }
    }
    let values = token_set.kept().iter().map(|&o| smoothed[o]).collect();
    Ok(AttentionScoreMap::new(gh, gw, values))
}

/// Affine rescale to [0, 1]. A constant map (max = min) normalizes to all
/// ones — the keep-everything degenerate case.
pub fn minmax_normalize(scores: &AttentionScoreMap) -> AttentionScoreMap {
    assert!(!scores.values.is_empty(), "empty score map");
    let min = scores.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores
        .values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let values = if max == min {
        vec![1.0; scores.values.len()]
    } else {
        scores
            .values
            .iter()
            .map(|&v| (v - min) / (max - min))
            .collect()
    };
    AttentionScoreMap::new(scores.gh, scores.gw, values)
}

/// Positions (into the current token list) whose normalized score clears
/// the threshold.
pub fn keep_positions(norm: &AttentionScoreMap, alpha: f64) -> Vec<usize> {
    norm.values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= alpha)
        .map(|(j, _)| j)
        .collect()
}

/// Drops every token with normalized score below α. The max-score token
/// normalizes to exactly 1, so at least one token always survives.
pub fn eliminate_tokens<F: Scalar>(
    t: &mut Tape<F>,
    state: &FusionState,
    norm: &AttentionScoreMap,
    alpha: f64,
) -> Result<FusionState> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "elimination threshold must satisfy 0 <= alpha < 1, got {alpha}"
        )));
    }
    norm.check(&state.token_set)?;
    debug_assert!(
        norm.values.iter().all(|&v| (0.0..=1.0).contains(&v)),
        "scores must be min-max normalized"
    );
    let keep = keep_positions(norm, alpha);
    retain(t, state, &keep)
}

/// Static ablation baseline: removes exactly `m` lowest-scoring tokens.
/// Ties eliminate the lower original index first.
pub fn static_eliminate<F: Scalar>(
    t: &mut Tape<F>,
    state: &FusionState,
    scores: &AttentionScoreMap,
    m: usize,
) -> Result<FusionState> {
    scores.check(&state.token_set)?;
    let n = scores.values.len();
    if m >= n {
        return Err(Error::Precondition(format!(
            "cannot remove {m} of {n} tokens"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Ascending score; equal scores order by original index, and the
    // earliest of those are removed first.
    order.sort_by(|&a, &b| {
        scores.values[a]
            .partial_cmp(&scores.values[b])
            .unwrap()
            .then(state.token_set.kept()[a].cmp(&state.token_set.kept()[b]))
    });
    let mut drop = vec![false; n];
    for &p in order.iter().take(m) {
        drop[p] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&p| !drop[p]).collect();
    retain(t, state, &keep)
}

fn retain<F: Scalar>(t: &mut Tape<F>, state: &FusionState, keep: &[usize]) -> Result<FusionState> {
    assert!(!keep.is_empty(), "elimination must leave at least one token");
    let token_set = compose_index_maps(&state.token_set, keep)?;
    if keep.len() == state.token_set.len() {
        return Ok(FusionState {
            token_set,
            ..state.clone()
        });
    }
    let visual = t.gather_rows(state.visual, keep.to_vec());
    Ok(FusionState {
        location: state.location,
        visual,
        memory: state.memory,
        pad_mask: state.pad_mask.clone(),
        token_set,
    })
}
