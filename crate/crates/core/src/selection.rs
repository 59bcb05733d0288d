//! Patch geometry and selection: overlapping patch grids, non-maximum
//! suppression on the score grid, perturbed-optimizer top-k and the
//! composition of global object positions from patch centres and offsets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, PerturbedSelection};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::{Real, Tensor};

/// Patch stride for a given patch width: `⌈p_w / 8⌉`.
pub fn stride_for_patch(patch: usize) -> usize {
    patch.div_ceil(8)
}

/// Default NMS neighbourhood in grid cells, about one patch width.
pub fn default_nms_window(patch: usize, stride: usize) -> usize {
    2 * (patch / (2 * stride)) + 1
}

/// Placement of the overlapping patch grid on a (padded) image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub stride: usize,
    pub pad: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGeometry {
    pub fn new(height: usize, width: usize, patch: usize, pad: usize) -> Result<Self> {
        if patch == 0 || patch > height + 2 * pad || patch > width + 2 * pad {
            return Err(Error::InvalidArgument(format!(
                "patch {patch} does not fit a {height}x{width} image padded by {pad}"
            )));
        }
        let stride = stride_for_patch(patch);
        Ok(PatchGeometry {
            height,
            width,
            patch,
            stride,
            pad,
            rows: (height + 2 * pad - patch) / stride + 1,
            cols: (width + 2 * pad - patch) / stride + 1,
        })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn padded_height(&self) -> usize {
        self.height + 2 * self.pad
    }

    pub fn padded_width(&self) -> usize {
        self.width + 2 * self.pad
    }

    /// Centre of patch `index` in padded-image pixel coordinates `(x, y)`;
    /// pixel centres sit at integer coordinates.
    pub fn center(&self, index: usize) -> (f64, f64) {
        let (r, c) = (index / self.cols, index % self.cols);
        let half = (self.patch as f64 - 1.0) / 2.0;
        (
            (c * self.stride) as f64 + half,
            (r * self.stride) as f64 + half,
        )
    }

    pub fn centers(&self) -> Vec<(f64, f64)> {
        (0..self.count()).map(|i| self.center(i)).collect()
    }

    /// Padded pixel coordinates to normalized `[0, 1]` coordinates.
    pub fn normalize(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x + 0.5) / self.padded_width() as f64,
            (y + 0.5) / self.padded_height() as f64,
        )
    }

    /// Normalized coordinates to padded pixel coordinates.
    pub fn denormalize(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x * self.padded_width() as f64 - 0.5,
            y * self.padded_height() as f64 - 0.5,
        )
    }

    /// Normalized coordinates to pixel coordinates of the unpadded image.
    pub fn to_image_pixels(&self, x: f64, y: f64) -> (f64, f64) {
        let (px, py) = self.denormalize(x, y);
        (px - self.pad as f64, py - self.pad as f64)
    }

    pub fn from_image_pixels(&self, x: f64, y: f64) -> (f64, f64) {
        self.normalize(x + self.pad as f64, y + self.pad as f64)
    }

    pub fn nms_window(&self) -> usize {
        default_nms_window(self.patch, self.stride)
    }
}

/// Patches cut from one image together with their grid placement.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub geometry: PatchGeometry,
    /// One `p × p × c` image per grid cell, row-major grid order.
    pub patches: Vec<ImageTensor>,
    pub centers: Vec<(f64, f64)>,
}

/// Cuts `image` into overlapping `p_w × p_w` patches after replicate padding.
pub fn extract_patches(image: &ImageTensor, patch: usize, pad: usize) -> Result<PatchGrid> {
    let geometry = PatchGeometry::new(image.height, image.width, patch, pad)?;
    let mut g = Graph::<f32>::new();
    let x = g.constant(image.to_nchw());
    let p = g.extract_patches(x, patch, geometry.stride, pad)?;
    let c = image.channels;
    let flat = g.value(p).data();
    let per = c * patch * patch;
    let patches = flat
        .chunks(per)
        .map(|chw| {
            let t = Tensor::new(vec![1, c, patch, patch], chw.to_vec()).expect("patch shape");
            ImageTensor::from_nchw(&t).expect("patch image").remove(0)
        })
        .collect();
    Ok(PatchGrid {
        geometry,
        patches,
        centers: geometry.centers(),
    })
}

/// Mask of cells that survive NMS on a `rows × cols` grid: a cell is kept
/// iff it beats every other cell in its `window × window` neighbourhood,
/// where ties go to the lower linear index.
pub fn nms_mask(scores: &[f64], rows: usize, cols: usize, window: usize) -> Vec<bool> {
    assert_eq!(scores.len(), rows * cols);
    let half = (window / 2) as isize;
    let mut keep = vec![false; scores.len()];
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            let i = (r * cols as isize + c) as usize;
            let si = scores[i];
            let mut best = true;
            'scan: for dr in -half..=half {
                for dc in -half..=half {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                        continue;
                    }
                    let j = (rr * cols as isize + cc) as usize;
                    if j == i {
                        continue;
                    }
                    let sj = scores[j];
                    if sj > si || (sj == si && j < i) {
                        best = false;
                        break 'scan;
                    }
                }
            }
            keep[i] = best;
        }
    }
    keep
}

/// NMS returning the masked scores, suppressed entries set to `-∞`.
pub fn nms(scores: &[f64], rows: usize, cols: usize, window: usize) -> Vec<f64> {
    nms_mask(scores, rows, cols, window)
        .into_iter()
        .zip(scores)
        .map(|(k, &s)| if k { s } else { f64::NEG_INFINITY })
        .collect()
}

/// Indices of the `k` largest finite scores, by descending score then
/// ascending index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    if k > idx.len() {
        return Err(Error::TooFewCandidates {
            k,
            available: idx.len(),
        });
    }
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Output of [`diff_topk`].
#[derive(Clone, Debug)]
pub struct SelectionWeights {
    /// Soft indicator per score: the Monte-Carlo average of perturbed hard
    /// indicators (exactly the hard indicator at zero noise).
    pub weights: Vec<f64>,
    /// Hard winners of the clean scores, by descending score.
    pub indices: Vec<usize>,
    pub noise_scale: f64,
    pub samples: usize,
    pub(crate) perturbed: Vec<Vec<usize>>,
    pub(crate) noise: Vec<Vec<f64>>,
}

impl SelectionWeights {
    /// Selection record for the tape op.
    pub fn to_perturbed<T: Real>(&self) -> PerturbedSelection<T> {
        PerturbedSelection {
            hard: self.indices.clone(),
            sample_indices: self.perturbed.clone(),
            sample_noise: self
                .noise
                .iter()
                .map(|z| z.iter().map(|&v| T::lit(v)).collect())
                .collect(),
            noise_scale: T::lit(self.noise_scale),
        }
    }
}

/// Differentiable top-k by the perturbed-optimizer estimator. Non-finite
/// scores (NMS-suppressed cells) are never selected.
pub fn diff_topk(scores: &[f64], k: usize, noise_scale: f64, samples: usize, seed: u64) -> Result<SelectionWeights> {
    let indices = top_k_indices(scores, k)?;
    let n = scores.len();
    let mut weights = vec![0.0; n];
    let mut perturbed = Vec::new();
    let mut noise = Vec::new();
    if noise_scale == 0.0 || samples == 0 {
        for &i in &indices {
            weights[i] = 1.0;
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = vec![0.0; n];
        for _ in 0..samples {
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            for i in 0..n {
                buf[i] = scores[i] + noise_scale * z[i];
            }
            let win = top_k_indices(&buf, k)?;
            for &i in &win {
                weights[i] += 1.0;
            }
            perturbed.push(win);
            noise.push(z);
        }
        let inv = 1.0 / samples as f64;
        weights.iter_mut().for_each(|w| *w *= inv);
    }
    Ok(SelectionWeights {
        weights,
        indices,
        noise_scale,
        samples,
        perturbed,
        noise,
    })
}

/// Global position from a patch centre and a predicted offset: the offset
/// is clipped to `±stride`, added to the centre, and normalized over the
/// padded image.
pub fn compose_location(
    center: (f64, f64),
    offset: (f64, f64),
    stride: usize,
    geometry: &PatchGeometry,
) -> (f64, f64) {
    let s = stride as f64;
    let x = center.0 + offset.0.clamp(-s, s);
    let y = center.1 + offset.1.clamp(-s, s);
    geometry.normalize(x, y)
}
