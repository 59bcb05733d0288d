//! Exact linear sum assignment and the list-domain cycle costs.
//!
//! The solver is the shortest-augmenting-path form of Jonker–Volgenant:
//! rows are inserted one at a time, each by a Dijkstra search over reduced
//! costs, with dual variables kept feasible throughout. Among optimal
//! assignments the lexicographically smallest permutation is returned; it
//! is found as the lexicographically first perfect matching in the
//! equality subgraph of the final duals.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::list::{ObjectEntry, ObjectList};
use crate::selection::PatchGeometry;
use crate::tensor::{Real, Tensor};

/// Square matrix of finite costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    size: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        let mut data = Vec::with_capacity(size * size);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != size {
                return Err(Error::NonSquare {
                    rows: size,
                    cols: row.len(),
                });
            }
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteCost { row: r, col: c });
                }
            }
            data.extend_from_slice(row);
        }
        Ok(CostMatrix { size, data })
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut rows = Vec::with_capacity(size);
        for i in 0..size {
            rows.push((0..size).map(|j| f(i, j)).collect());
        }
        Self::new(rows)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.size + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    /// `permutation[row]` is the column assigned to `row`.
    pub permutation: Vec<usize>,
    pub total_cost: f64,
    pub pair_costs: Vec<f64>,
}

/// Minimum-cost perfect matching of a square cost matrix.
pub fn solve_lsa(cost: &CostMatrix) -> AssignmentResult {
    let n = cost.size();
    if n == 0 {
        return AssignmentResult {
            permutation: vec![],
            total_cost: 0.0,
            pair_costs: vec![],
        };
    }
    let (col4row, u, v) = shortest_augmenting_path(cost);
    let permutation = lexicographic_refine(cost, &u, &v).unwrap_or(col4row);
    let pair_costs: Vec<f64> = permutation
        .iter()
        .enumerate()
        .map(|(r, &c)| cost.get(r, c))
        .collect();
    AssignmentResult {
        total_cost: pair_costs.iter().sum(),
        permutation,
        pair_costs,
    }
}

fn shortest_augmenting_path(cost: &CostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    const NONE: usize = usize::MAX;
    let n = cost.size();
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut col4row = vec![NONE; n];
    let mut row4col = vec![NONE; n];
    let mut path = vec![NONE; n];
    let mut spc = vec![f64::INFINITY; n];
    let mut seen_row = vec![false; n];
    let mut seen_col = vec![false; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);

    for cur in 0..n {
        // Dijkstra over reduced costs from row `cur` to a free column
        spc.iter_mut().for_each(|c| *c = f64::INFINITY);
        seen_row.iter_mut().for_each(|s| *s = false);
        seen_col.iter_mut().for_each(|s| *s = false);
        remaining.clear();
        remaining.extend((0..n).rev());
        let mut min_val = 0.0;
        let mut i = cur;
        let sink = loop {
            seen_row[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = NONE;
            for (it, &j) in remaining.iter().enumerate() {
                let r = min_val + cost.get(i, j) - u[i] - v[j];
                if r < spc[j] {
                    path[j] = i;
                    spc[j] = r;
                }
                if spc[j] < lowest || (spc[j] == lowest && row4col[j] == NONE) {
                    lowest = spc[j];
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining.swap_remove(index);
            seen_col[j] = true;
            if row4col[j] == NONE {
                break j;
            }
            i = row4col[j];
        };

        u[cur] += min_val;
        for r in 0..n {
            if seen_row[r] && r != cur {
                u[r] += min_val - spc[col4row[r]];
            }
        }
        for c in 0..n {
            if seen_col[c] {
                v[c] -= min_val - spc[c];
            }
        }
        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur {
                break;
            }
        }
    }
    (col4row, u, v)
}

/// Lexicographically first perfect matching among edges of (numerically)
/// zero reduced cost. Every such matching is optimal.
fn lexicographic_refine(cost: &CostMatrix, u: &[f64], v: &[f64]) -> Option<Vec<usize>> {
    let n = cost.size();
    let scale = cost.data.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-10 * scale;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| cost.get(i, j) - u[i] - v[j] <= tol).collect())
        .collect();
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut col_used = vec![false; n];
    for i in 0..n {
        let mut chosen = None;
        for j in 0..n {
            if col_used[j] || !tight[i][j] {
                continue;
            }
            col_used[j] = true;
            if has_perfect_matching(&tight, i + 1, &col_used) {
                chosen = Some(j);
                break;
            }
            col_used[j] = false;
        }
        fixed.push(chosen?);
    }
    Some(fixed)
}

/// Kuhn's augmenting paths on rows `from..n` against unused columns.
fn has_perfect_matching(tight: &[Vec<bool>], from: usize, col_used: &[bool]) -> bool {
    let n = tight.len();
    let mut match_col = vec![usize::MAX; n];
    fn augment(
        r: usize,
        tight: &[Vec<bool>],
        col_used: &[bool],
        visited: &mut [bool],
        match_col: &mut [usize],
    ) -> bool {
        for c in 0..tight.len() {
            if col_used[c] || visited[c] || !tight[r][c] {
                continue;
            }
            visited[c] = true;
            if match_col[c] == usize::MAX || augment(match_col[c], tight, col_used, visited, match_col) {
                match_col[c] = r;
                return true;
            }
        }
        false
    }
    for r in from..n {
        let mut visited = vec![false; n];
        if !augment(r, tight, col_used, &mut visited, &mut match_col) {
            return false;
        }
    }
    true
}

/// Pixel extents used by the pair cost: the padded image size and the
/// normalizer `W = max(padded width, padded height)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostScale {
    pub width_px: f64,
    pub height_px: f64,
    pub w: f64,
}

impl CostScale {
    pub fn from_geometry(g: &PatchGeometry) -> Self {
        let (wp, hp) = (g.padded_width() as f64, g.padded_height() as f64);
        CostScale {
            width_px: wp,
            height_px: hp,
            w: wp.max(hp),
        }
    }

    /// Positions already in pixel units.
    pub fn pixels(w: f64) -> Self {
        CostScale {
            width_px: 1.0,
            height_px: 1.0,
            w,
        }
    }
}

/// `α_i / W² · ‖p_i − p_j‖² + λ_pres · (α_i − α_j)²` with positions scaled to
/// pixels by `scale`.
pub fn pair_cost(a: &ObjectEntry, b: &ObjectEntry, scale: &CostScale, lambda_pres: f64) -> f64 {
    let dx = (a.x - b.x) * scale.width_px;
    let dy = (a.y - b.y) * scale.height_px;
    let da = a.alpha - b.alpha;
    a.alpha / (scale.w * scale.w) * (dx * dx + dy * dy) + lambda_pres * da * da
}

/// Full per-pair term of the list cycle loss: the pair cost plus the mean
/// squared feature difference.
pub fn pair_loss(a: &ObjectEntry, b: &ObjectEntry, scale: &CostScale, lambda_pres: f64) -> f64 {
    let e = a.eta.len().max(1) as f64;
    let feat: f64 = a.eta.iter().zip(&b.eta).map(|(x, y)| (x - y) * (x - y)).sum();
    pair_cost(a, b, scale, lambda_pres) + feat / e
}

/// Optimal matching of `original` rows onto `cycled` rows under
/// [`pair_loss`].
pub fn match_lists(
    original: &ObjectList,
    cycled: &ObjectList,
    scale: &CostScale,
    lambda_pres: f64,
) -> Result<AssignmentResult> {
    if original.len() != cycled.len() {
        return Err(Error::LengthMismatch {
            left: original.len(),
            right: cycled.len(),
        });
    }
    let cm = CostMatrix::from_fn(original.len(), |i, j| {
        pair_loss(&original.entries[i], &cycled.entries[j], scale, lambda_pres)
    })?;
    Ok(solve_lsa(&cm))
}

/// Scorer target over the patch grid: per cell, the max over objects of
/// `α · exp(−d² / (2·stride²))`, `d` being the distance from the cell centre.
pub fn build_scorer_target(list: &ObjectList, geometry: &PatchGeometry) -> Vec<f64> {
    let s2 = 2.0 * (geometry.stride as f64).powi(2);
    let objs: Vec<(f64, f64, f64)> = list
        .entries
        .iter()
        .map(|e| {
            let (x, y) = geometry.denormalize(e.x, e.y);
            (x, y, e.alpha)
        })
        .collect();
    (0..geometry.count())
        .map(|i| {
            let (cx, cy) = geometry.center(i);
            objs.iter()
                .map(|&(x, y, a)| a * (-((cx - x).powi(2) + (cy - y).powi(2)) / s2).exp())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Weights of the two terms of the list cycle loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ListLossWeights {
    pub lambda_pres: f64,
    pub lambda_loc: f64,
}

impl Default for ListLossWeights {
    fn default() -> Self {
        ListLossWeights {
            lambda_pres: 2.0,
            lambda_loc: 1.0,
        }
    }
}

/// List cycle loss on the tape.
///
/// `original` holds the source lists (constants), `cycled` is `[N, k, F]`
/// on the tape, `scores` is the scorer output `[N, n]` and `targets` the
/// matching scorer targets. Rows are matched per sample with [`solve_lsa`]
/// on detached values; the matched per-pair losses are then evaluated on
/// the tape. Returns the batch mean.
pub fn list_cycle_loss<T: Real>(
    g: &mut Graph<T>,
    original: &[ObjectList],
    cycled: Var,
    scores: Var,
    targets: &Tensor<T>,
    scale: &CostScale,
    weights: ListLossWeights,
) -> Result<Var> {
    let shape = g.shape(cycled).to_vec();
    if shape.len() != 3 || shape[0] != original.len() {
        return Err(Error::Shape {
            op: "list_cycle_loss",
            detail: format!("cycled {shape:?} vs {} lists", original.len()),
        });
    }
    let (n, k, f) = (shape[0], shape[1], shape[2]);
    let e = f - 3;
    let cycled_lists = ObjectList::from_tensor(g.value(cycled))?;
    let mut perms = Vec::with_capacity(n);
    for (orig, cyc) in original.iter().zip(&cycled_lists) {
        if orig.len() != k || orig.eta_dim() != e {
            return Err(Error::LengthMismatch {
                left: orig.len(),
                right: k,
            });
        }
        perms.push(match_lists(orig, cyc, scale, weights.lambda_pres)?.permutation);
    }
    let aligned = g.gather_rows(cycled, perms)?;
    let orig_t = g.constant(ObjectList::batch_to_tensor::<T>(original)?);

    let diff = g.sub(orig_t, aligned)?;
    // positions in pixels
    let dpos = g.slice_last(diff, 0, 2)?;
    let px = g.constant(
        Tensor::new(
            vec![2],
            vec![T::lit(scale.width_px), T::lit(scale.height_px)],
        )
        .expect("scale"),
    );
    let dpos = g.reshape(dpos, &[n * k, 2])?;
    let sq = g.square(dpos);
    let px2 = g.square(px);
    let px_b = broadcast_row(g, px2, n * k)?;
    let sq = g.mul(sq, px_b)?;
    let dist2 = g.sum_axis(sq, 1)?; // [n·k]
    let alpha_orig = g.slice_last(orig_t, 2, 1)?;
    let alpha_orig = g.reshape(alpha_orig, &[n * k])?;
    let loc = g.mul(dist2, alpha_orig)?;
    let loc = g.scale(loc, 1.0 / (scale.w * scale.w));

    let dalpha = g.slice_last(diff, 2, 1)?;
    let dalpha = g.reshape(dalpha, &[n * k])?;
    let pres = g.square(dalpha);
    let pres = g.scale(pres, weights.lambda_pres);

    let mut per_pair = g.add(loc, pres)?;
    if e > 0 {
        let deta = g.slice_last(diff, 3, e)?;
        let deta = g.square(deta);
        let deta = g.reshape(deta, &[n * k, e])?;
        let feat = g.mean_axis(deta, 1)?;
        per_pair = g.add(per_pair, feat)?;
    }
    let cycle = g.mean(per_pair);

    let t = g.constant(targets.clone());
    if g.shape(t) != g.shape(scores) {
        return Err(Error::Shape {
            op: "list_cycle_loss",
            detail: format!("scores {:?} vs targets {:?}", g.shape(scores), targets.shape()),
        });
    }
    let ds = g.sub(scores, t)?;
    let ds = g.square(ds);
    let aux = g.mean(ds);
    let aux = g.scale(aux, weights.lambda_loc);
    g.add(cycle, aux)
}

/// Repeats a `[d]` vector into `[rows, d]` on the tape.
fn broadcast_row<T: Real>(g: &mut Graph<T>, v: Var, rows: usize) -> Result<Var> {
    let d = g.value(v).len();
    let zeros = g.constant(Tensor::zeros(&[rows, d]));
    g.add_bias(zeros, v, 1)
}
