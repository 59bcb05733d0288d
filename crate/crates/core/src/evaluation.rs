//! Detection metrics, feature-space separability, latent sweeps and list
//! manipulation.

use serde::{Deserialize, Serialize};

use crate::assignment::{solve_lsa, CostMatrix};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::generators::{ImageGenerator, ListGenerator};
use crate::image::ImageTensor;
use crate::list::{ObjectEntry, ObjectList};
use crate::scenes::GroundTruthRecord;
use crate::selection::PatchGeometry;

/// Presence threshold for counting a predicted row.
pub const PRESENCE: f64 = 0.5;

/// Default matching radius `0.05 · max(h, w)` pixels.
pub fn default_tau(height: usize, width: usize) -> f64 {
    0.05 * height.max(width) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(prediction, ground truth, distance)` for every true positive.
    pub pairs: Vec<(usize, usize, f64)>,
    pub tau: f64,
}

/// One-to-one matching of predicted and true points (pixels). Pairs farther
/// apart than `tau` cost a sentinel larger than any sum of admissible
/// distances, so the optimum first maximizes the number of pairs within
/// `tau` and then minimizes their total distance.
pub fn match_points(pred: &[(f64, f64)], gt: &[(f64, f64)], tau: f64) -> Result<MatchReport> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let n = pred.len().max(gt.len());
    let sentinel = (n as f64 + 1.0) * tau + 1.0;
    let dist = |i: usize, j: usize| (pred[i].0 - gt[j].0).hypot(pred[i].1 - gt[j].1);
    let cost = CostMatrix::from_fn(n, |i, j| {
        if i < pred.len() && j < gt.len() {
            let d = dist(i, j);
            if d <= tau {
                d
            } else {
                sentinel
            }
        } else {
            sentinel
        }
    })?;
    let sol = solve_lsa(&cost);
    let pairs: Vec<(usize, usize, f64)> = sol
        .permutation
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < pred.len() && j < gt.len() && dist(i, j) <= tau)
        .map(|(i, &j)| (i, j, dist(i, j)))
        .collect();
    let tp = pairs.len();
    Ok(MatchReport {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
        pairs,
        tau,
    })
}

/// Active rows of `list` in image pixels.
pub fn active_pixels(list: &ObjectList, geometry: &PatchGeometry) -> Vec<(f64, f64)> {
    list.active(PRESENCE).map(|e| geometry.to_image_pixels(e.x, e.y)).collect()
}

/// Matches the predicted rows with `α > 0.5` against the true rows with
/// `α > 0.5`; both lists are in normalized coordinates of `geometry`.
pub fn match_detections(pred: &ObjectList, gt: &ObjectList, geometry: &PatchGeometry, tau: f64) -> Result<MatchReport> {
    match_points(&active_pixels(pred, geometry), &active_pixels(gt, geometry), tau)
}

/// `(precision, recall, F1)` with `0/0 = 0`.
pub fn prf1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

impl MatchReport {
    pub fn prf1(&self) -> (f64, f64, f64) {
        prf1(self.tp, self.fp, self.fn_)
    }
}

/// Davies–Bouldin index with Euclidean distances and mean-distance scatter.
pub fn davies_bouldin(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 || features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::Clustering("features must be finite vectors of one positive length".into()));
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Clustering(format!("need at least two groups, got {}", ids.len())));
    }
    let mut centroids = vec![vec![0.0; dim]; ids.len()];
    let mut counts = vec![0usize; ids.len()];
    let group = |l: usize| ids.binary_search(&l).expect("label listed");
    for (f, &l) in features.iter().zip(labels) {
        let g = group(l);
        counts[g] += 1;
        for (c, v) in centroids[g].iter_mut().zip(f) {
            *c += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut scatter = vec![0.0; ids.len()];
    for (f, &l) in features.iter().zip(labels) {
        let g = group(l);
        scatter[g] += dist(f, &centroids[g]);
    }
    for (s, &n) in scatter.iter_mut().zip(&counts) {
        *s /= n as f64;
    }
    let mut total = 0.0;
    for i in 0..ids.len() {
        let mut worst = 0.0f64;
        for j in 0..ids.len() {
            if i == j {
                continue;
            }
            let d = dist(&centroids[i], &centroids[j]);
            if d == 0.0 {
                return Err(Error::Clustering(format!("groups {} and {} share a centroid", ids[i], ids[j])));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / ids.len() as f64)
}

/// Renders `grid_n × grid_n` images of one centred object, varying η
/// dimensions `dims.0` (down) and `dims.1` (across) over `[0, 1]` with every
/// other dimension at 0.5, and tiles them into one image.
#[allow(clippy::too_many_arguments)]
pub fn latent_sweep(
    image_gen: &ImageGenerator,
    store: &ParamStore<f32>,
    dims: (usize, usize),
    grid_n: usize,
    k: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<ImageTensor> {
    let e = image_gen.cfg.eta_dim;
    if grid_n == 0 || k == 0 || dims.0 >= e || dims.1 >= e || dims.0 == dims.1 {
        return Err(Error::InvalidArgument(format!(
            "sweep needs grid_n, k > 0 and two distinct dimensions below {e}"
        )));
    }
    let geometry = PatchGeometry::new(height, width, image_gen.cfg.patch, image_gen.cfg.pad)?;
    let (cx, cy) = geometry.from_image_pixels((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let coord = |i: usize| if grid_n == 1 { 0.5 } else { i as f64 / (grid_n - 1) as f64 };
    let mut grid = ImageTensor::filled(grid_n * height, grid_n * width, &vec![0.0; image_gen.cfg.channels]);
    for a in 0..grid_n {
        for b in 0..grid_n {
            let mut eta = vec![0.5; e];
            eta[dims.0] = coord(a);
            eta[dims.1] = coord(b);
            let mut rows = vec![ObjectEntry::new(cx, cy, 1.0, eta)];
            rows.extend((1..k).map(|_| ObjectEntry::new(cx, cy, 0.0, vec![0.5; e])));
            let img = image_gen.render_image(store, &ObjectList::new(rows), height, width, seed)?;
            for y in 0..height {
                for x in 0..width {
                    for c in 0..img.channels {
                        grid.set(a * height + y, b * width + x, c, img.get(y, x, c));
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Replacement values for one row; absent fields stay unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowEdit {
    pub index: usize,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub alpha: Option<f64>,
    pub eta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Edit {
    Identity,
    /// Moves active rows to `centre + factor · (p − centre)`.
    TranslateTowardCenter(f64),
    /// Each active row takes the η of its counterclockwise neighbour around
    /// the centroid of the active rows.
    CyclicEtaSwap,
    Rows(Vec<RowEdit>),
}

impl Edit {
    /// `identity`, `translate:<factor>`, `swap`, or `rows:<json array>`.
    pub fn parse(s: &str) -> Result<Self> {
        let (head, arg) = s.split_once(':').unwrap_or((s, ""));
        match (head, arg) {
            ("identity", "") => Ok(Edit::Identity),
            ("swap", "") => Ok(Edit::CyclicEtaSwap),
            ("translate", f) => f
                .parse::<f64>()
                .ok()
                .filter(|f| f.is_finite())
                .map(Edit::TranslateTowardCenter)
                .ok_or_else(|| Error::UnknownEdit(s.to_string())),
            ("rows", json) => Ok(Edit::Rows(serde_json::from_str(json)?)),
            _ => Err(Error::UnknownEdit(s.to_string())),
        }
    }
}

pub fn apply_edit(list: &ObjectList, edit: &Edit, geometry: &PatchGeometry) -> Result<ObjectList> {
    let mut out = list.clone();
    let active: Vec<usize> = (0..list.len()).filter(|&i| list.entries[i].alpha > PRESENCE).collect();
    match edit {
        Edit::Identity => {}
        Edit::TranslateTowardCenter(f) => {
            let (cx, cy) = geometry.from_image_pixels(
                (geometry.width as f64 - 1.0) / 2.0,
                (geometry.height as f64 - 1.0) / 2.0,
            );
            for &i in &active {
                let e = &mut out.entries[i];
                e.x = cx + f * (e.x - cx);
                e.y = cy + f * (e.y - cy);
            }
        }
        Edit::CyclicEtaSwap => {
            if active.len() > 1 {
                let n = active.len() as f64;
                let mx = active.iter().map(|&i| list.entries[i].x).sum::<f64>() / n;
                let my = active.iter().map(|&i| list.entries[i].y).sum::<f64>() / n;
                let mut order = active.clone();
                // image y points down, so increasing atan2(−y, x) is counterclockwise on screen
                let angle = |i: usize| (-(list.entries[i].y - my)).atan2(list.entries[i].x - mx);
                order.sort_by(|&a, &b| angle(a).total_cmp(&angle(b)).then(a.cmp(&b)));
                for (j, &i) in order.iter().enumerate() {
                    let next = order[(j + 1) % order.len()];
                    out.entries[i].eta = list.entries[next].eta.clone();
                }
            }
        }
        Edit::Rows(edits) => {
            for r in edits {
                let e = out
                    .entries
                    .get_mut(r.index)
                    .ok_or_else(|| Error::InvalidArgument(format!("row {} out of range", r.index)))?;
                if let Some(x) = r.x {
                    e.x = x;
                }
                if let Some(y) = r.y {
                    e.y = y;
                }
                if let Some(a) = r.alpha {
                    e.alpha = a;
                }
                if let Some(eta) = &r.eta {
                    if eta.len() != e.eta.len() {
                        return Err(Error::InvalidArgument("edited η has the wrong length".into()));
                    }
                    e.eta = eta.clone();
                }
            }
        }
    }
    Ok(out)
}

/// `generate_list`, edit, `render_image`. Returns the edited list and the
/// rendering.
#[allow(clippy::too_many_arguments)]
pub fn manipulate_and_render(
    list_gen: &ListGenerator,
    image_gen: &ImageGenerator,
    store: &ParamStore<f32>,
    image: &ImageTensor,
    k: usize,
    edit: &Edit,
    seed: u64,
) -> Result<(ObjectList, ImageTensor)> {
    let list = list_gen.generate_list(store, image, k, seed)?;
    let geometry = list_gen.geometry(image.height, image.width)?;
    let edited = apply_edit(&list, edit, &geometry)?;
    let img = image_gen.render_image(store, &edited, image.height, image.width, seed)?;
    Ok((edited, img))
}

/// One CSV row of a detection evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SceneMetrics {
    pub fn new(scene: impl Into<String>, r: &MatchReport) -> Self {
        let (precision, recall, f1) = r.prf1();
        SceneMetrics {
            scene: scene.into(),
            tp: r.tp,
            fp: r.fp,
            fn_: r.fn_,
            precision,
            recall,
            f1,
        }
    }
}

/// Scores predicted points (pixels) against ground-truth records, one
/// `(scene name, points)` entry per record. The final row pools the counts
/// of all scenes.
pub fn evaluate(preds: &[(String, Vec<(f64, f64)>)], truths: &[GroundTruthRecord], tau: f64) -> Result<Vec<SceneMetrics>> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truths.len(),
        });
    }
    let mut rows = Vec::with_capacity(preds.len() + 1);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for ((name, pred), truth) in preds.iter().zip(truths) {
        let gt: Vec<(f64, f64)> = truth.active().map(|r| (r.x, r.y)).collect();
        let r = match_points(pred, &gt, tau)?;
        tp += r.tp;
        fp += r.fp;
        fn_ += r.fn_;
        rows.push(SceneMetrics::new(name.clone(), &r));
    }
    let (precision, recall, f1) = prf1(tp, fp, fn_);
    rows.push(SceneMetrics {
        scene: "all".into(),
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
    });
    Ok(rows)
}

#[cfg(test)]
mod tests;
