//! The two generators.
//!
//! `G_L` (image → list): overlapping patches are scored by a small shared
//! convolutional scorer, suppressed by NMS, and the best `k` are picked by
//! the perturbed top-k. A feature network reads each picked patch plus one
//! noise channel and predicts an offset from the patch centre, a presence
//! `α` and features `η`.
//!
//! `G_I` (list → image): rows are splatted as isotropic Gaussian blobs whose
//! channel weights are `α · ζ(η)`, a noise channel is appended, and a U-Net
//! turns the blob canvas into an image.

use rand::{Rng, SeedableRng};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::list::ObjectList;
use crate::nn::{init_conv, init_dense, Layers, LEAK, NORM_EPS};
use crate::seed::derive_seed;
use crate::selection::{diff_topk, nms_mask, top_k_indices, PatchGeometry};
use crate::tensor::{Real, Tensor};

/// Score handicap for NMS-suppressed cells. Scores live in `(0, 1)`, so a
/// suppressed cell is only picked when fewer than `k` cells survive.
const SUPPRESSED_PENALTY: f64 = 2.0;

/// Most patches scored in one tape during chunked inference.
const SCORE_CHUNK: usize = 4096;

/// `ζ(η) = normalize(concat(2η − 1, 1))`.
pub fn project_eta(eta: &[f64]) -> Vec<f64> {
    let mut z: Vec<f64> = eta.iter().map(|&e| 2.0 * e - 1.0).collect();
    z.push(1.0);
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    z.iter().map(|v| v / n).collect()
}

/// Blob image over the unpadded image, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobCanvas {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl BlobCanvas {
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Renders `list` as `Σ_i α_i ζ(η_i)_j exp(−‖p − p_i‖² / 2σ²)` at the pixel
/// centres of the unpadded image described by `geometry`.
pub fn splat_blobs(list: &ObjectList, geometry: &PatchGeometry, sigma: f64) -> Result<BlobCanvas> {
    let mut g = Graph::<f64>::new();
    let l = g.constant(ObjectList::batch_to_tensor(std::slice::from_ref(list))?);
    let canvas = blob_canvas(&mut g, l, geometry, sigma)?;
    let t = g.value(canvas);
    Ok(BlobCanvas {
        channels: t.shape()[1],
        height: geometry.height,
        width: geometry.width,
        data: t.data().to_vec(),
    })
}

/// Tape version of [`splat_blobs`]: `[N, k, 3 + E]` → `[N, E + 1, h, w]`.
fn blob_canvas<T: Real>(g: &mut Graph<T>, list: Var, geometry: &PatchGeometry, sigma: f64) -> Result<Var> {
    let s = g.shape(list).to_vec();
    if s.len() != 3 || s[2] < 3 {
        return Err(Error::Shape {
            op: "blob_canvas",
            detail: format!("{s:?}"),
        });
    }
    let (n, k, e) = (s[0], s[1], s[2] - 3);
    let pos = g.slice_last(list, 0, 2)?;
    let to_px = g.constant(diag2(
        geometry.padded_width() as f64,
        geometry.padded_height() as f64,
    ));
    let pos = g.matmul(pos, to_px)?;
    let pos = g.add_scalar(pos, -0.5 - geometry.pad as f64);

    let ones = g.constant(Tensor::full(&[n, k, 1], T::one()));
    let zeta = if e > 0 {
        let eta = g.slice_last(list, 3, e)?;
        let eta = g.scale(eta, 2.0);
        let eta = g.add_scalar(eta, -1.0);
        let z = g.concat(&[eta, ones], 2)?;
        g.normalize_last(z)
    } else {
        ones
    };
    let alpha = g.slice_last(list, 2, 1)?;
    let alpha = g.reshape(alpha, &[n * k])?;
    let weights = g.scale_rows(zeta, alpha)?;
    g.splat(pos, weights, geometry.height, geometry.width, sigma)
}

fn diag2<T: Real>(a: f64, b: f64) -> Tensor<T> {
    Tensor::from_f64(&[2, 2], &[a, 0.0, 0.0, b]).expect("2x2")
}

fn conv_out(size: usize, stride: usize) -> usize {
    (size + 2 - 3) / stride + 1
}

/// Tape outputs of [`ListGenerator::forward`].
pub struct ListOutput {
    /// `[N, k, 3 + E]`.
    pub list: Var,
    /// Scorer output over the patch grid, `[N, n]`.
    pub scores: Var,
    pub geometry: PatchGeometry,
    /// Hard selections per sample, by descending score.
    pub selected: Vec<Vec<usize>>,
}

/// Image → list generator `G_L`.
#[derive(Clone, Debug)]
pub struct ListGenerator {
    pub cfg: ModelConfig,
}

impl ListGenerator {
    pub fn new(cfg: ModelConfig) -> Self {
        ListGenerator { cfg }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ParamStore<f32>> {
        let c = &self.cfg;
        let (sw, fw) = (c.scorer_width, c.feature_width);
        let mut s = ParamStore::new();
        init_conv(&mut s, "gl.score0", sw, c.channels, 3, rng)?;
        init_conv(&mut s, "gl.score1", 2 * sw, sw, 3, rng)?;
        init_conv(&mut s, "gl.score2", 2 * sw, 2 * sw, 3, rng)?;
        init_dense(&mut s, "gl.score_head", 2 * sw, 1, rng)?;
        init_conv(&mut s, "gl.feat0", fw, c.channels + 1, 3, rng)?;
        init_conv(&mut s, "gl.feat1", fw, fw, 3, rng)?;
        init_conv(&mut s, "gl.feat2", 2 * fw, fw, 3, rng)?;
        init_conv(&mut s, "gl.feat3", 2 * fw, 2 * fw, 3, rng)?;
        let q = conv_out(conv_out(c.patch, 2), 2);
        init_dense(&mut s, "gl.feat_hidden", 2 * fw * q * q, 4 * fw, rng)?;
        init_dense(&mut s, "gl.feat_head", 4 * fw, 3 + c.eta_dim, rng)?;
        Ok(s)
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<PatchGeometry> {
        PatchGeometry::new(height, width, self.cfg.patch, self.cfg.pad)
    }

    /// Scorer `s_φ` on `[M, C, p, p]` patches; returns `[M]` scores in `(0, 1)`.
    fn scorer<T: Real>(&self, l: &Layers<T>, g: &mut Graph<T>, patches: Var) -> Result<Var> {
        let m = g.shape(patches)[0];
        let mut h = l.conv(g, "gl.score0", patches, 1, 1)?;
        h = g.leaky_relu(h, LEAK);
        h = l.conv(g, "gl.score1", h, 2, 1)?;
        h = g.leaky_relu(h, LEAK);
        h = l.conv(g, "gl.score2", h, 2, 1)?;
        h = g.leaky_relu(h, LEAK);
        let s = g.shape(h).to_vec();
        let h = g.reshape(h, &[m, s[1], s[2] * s[3]])?;
        let pooled = g.mean_axis(h, 2)?;
        let out = l.dense(g, "gl.score_head", pooled)?;
        let out = g.reshape(out, &[m])?;
        Ok(g.sigmoid(out))
    }

    /// Feature network `f_θ` plus location composition. `patches` is
    /// `[M, C, p, p]`, `centers` the matching patch centres `[M, 2]` in
    /// padded pixels. Returns `[M, 3 + E]` rows.
    fn decode<T: Real>(
        &self,
        l: &Layers<T>,
        g: &mut Graph<T>,
        patches: Var,
        centers: Var,
        geometry: &PatchGeometry,
        noise_seed: u64,
    ) -> Result<Var> {
        let p = self.cfg.patch;
        let e = self.cfg.eta_dim;
        let m = g.shape(patches)[0];
        let noise = g.noise(&[m, 1, p, p], noise_seed);
        let x = g.concat(&[patches, noise], 1)?;
        let mut h = l.conv(g, "gl.feat0", x, 1, 1)?;
        h = g.leaky_relu(h, LEAK);
        h = l.conv(g, "gl.feat1", h, 2, 1)?;
        h = g.leaky_relu(h, LEAK);
        h = l.conv(g, "gl.feat2", h, 2, 1)?;
        h = g.leaky_relu(h, LEAK);
        h = l.conv(g, "gl.feat3", h, 1, 1)?;
        h = g.leaky_relu(h, LEAK);
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[m, flat])?;
        let h = l.dense(g, "gl.feat_hidden", h)?;
        let h = g.leaky_relu(h, LEAK);
        let head = l.dense(g, "gl.feat_head", h)?;

        // tanh · stride keeps the offset strictly inside the clip range
        let off = g.slice_last(head, 0, 2)?;
        let off = g.tanh(off);
        let off = g.scale(off, geometry.stride as f64);
        let pos = g.add(centers, off)?;
        let pos = g.add_scalar(pos, 0.5);
        let norm = g.constant(diag2(
            1.0 / geometry.padded_width() as f64,
            1.0 / geometry.padded_height() as f64,
        ));
        let pos = g.matmul(pos, norm)?;
        let alpha = g.slice_last(head, 2, 1)?;
        let alpha = g.sigmoid(alpha);
        let mut cols = vec![pos, alpha];
        if e > 0 {
            let eta = g.slice_last(head, 3, e)?;
            cols.push(g.sigmoid(eta));
        }
        g.concat(&cols, 1)
    }

    /// NMS-masked scores: suppressed cells keep their order but rank below
    /// every survivor.
    fn masked_scores(&self, raw: &[f64], geometry: &PatchGeometry) -> Vec<f64> {
        let keep = nms_mask(raw, geometry.rows, geometry.cols, geometry.nms_window());
        raw.iter()
            .zip(keep)
            .map(|(&s, k)| if k { s } else { s - SUPPRESSED_PENALTY })
            .collect()
    }

    /// Full differentiable pass over an image batch `[N, C, H, W]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
        k: usize,
        seed: u64,
    ) -> Result<ListOutput> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.cfg.channels {
            return Err(Error::Shape {
                op: "generate_list",
                detail: format!("images {s:?}, {} channels expected", self.cfg.channels),
            });
        }
        let (batch, c) = (s[0], s[1]);
        let geometry = self.geometry(s[2], s[3])?;
        let n = geometry.count();
        if k > n {
            return Err(Error::TooFewCandidates { k, available: n });
        }
        let l = Layers::plain(store);
        let p = self.cfg.patch;
        let patches = g.extract_patches(images, p, geometry.stride, geometry.pad)?;
        let flat = g.reshape(patches, &[batch * n, c, p, p])?;
        let scores = self.scorer(&l, g, flat)?;
        let scores = g.reshape(scores, &[batch, n])?;

        let raw: Vec<f64> = g.value(scores).data().iter().map(|v| v.as_f64()).collect();
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss("patch_scores".into()));
        }
        let mut selections = Vec::with_capacity(batch);
        let mut selected = Vec::with_capacity(batch);
        for b in 0..batch {
            let masked = self.masked_scores(&raw[b * n..(b + 1) * n], &geometry);
            let sel = diff_topk(
                &masked,
                k,
                self.cfg.topk_noise,
                self.cfg.topk_samples,
                derive_seed(seed, &[0, b as u64]),
            )?;
            selected.push(sel.indices.clone());
            selections.push(sel.to_perturbed::<T>());
        }
        let pick = g.select_topk(scores, selections)?;
        let chosen = g.matmul(pick, patches)?;
        let chosen = g.reshape(chosen, &[batch * k, c, p, p])?;
        let centers: Vec<f64> = geometry.centers().iter().flat_map(|&(x, y)| [x, y]).collect();
        let centers = g.constant(Tensor::from_f64(&[n, 2], &centers)?);
        let centers = g.matmul(pick, centers)?;
        let centers = g.reshape(centers, &[batch * k, 2])?;
        let rows = self.decode(&l, g, chosen, centers, &geometry, derive_seed(seed, &[1]))?;
        let width = 3 + self.cfg.eta_dim;
        let list = g.reshape(rows, &[batch, k, width])?;
        Ok(ListOutput {
            list,
            scores,
            geometry,
            selected,
        })
    }

    /// Scorer output for every patch of one image, computed in bounded
    /// chunks of grid rows so arbitrarily large images fit in memory.
    pub fn score_patches(&self, store: &ParamStore<f32>, image: &ImageTensor) -> Result<(PatchGeometry, Vec<f64>)> {
        let geometry = self.geometry(image.height, image.width)?;
        let padded = replicate_pad(image, geometry.pad);
        let l = Layers::plain(store);
        let (p, stride) = (self.cfg.patch, geometry.stride);
        let rows_per_chunk = (SCORE_CHUNK / geometry.cols).max(1);
        let mut scores = Vec::with_capacity(geometry.count());
        let mut r0 = 0;
        while r0 < geometry.rows {
            let r1 = (r0 + rows_per_chunk).min(geometry.rows);
            let y0 = r0 * stride;
            let y1 = (r1 - 1) * stride + p;
            let strip = crop_rows(&padded, y0, y1);
            let mut g = Graph::<f32>::new();
            let x = g.constant(strip.to_nchw());
            let patches = g.extract_patches(x, p, stride, 0)?;
            let m = (r1 - r0) * geometry.cols;
            let flat = g.reshape(patches, &[m, image.channels, p, p])?;
            let s = self.scorer(&l, &mut g, flat)?;
            scores.extend(g.value(s).data().iter().map(|&v| v as f64));
            r0 = r1;
        }
        Ok((geometry, scores))
    }

    /// Inference: exactly `k` rows for an image of any size `≥ p_w`.
    pub fn generate_list(&self, store: &ParamStore<f32>, image: &ImageTensor, k: usize, seed: u64) -> Result<ObjectList> {
        let (geometry, raw) = self.score_patches(store, image)?;
        if k > geometry.count() {
            return Err(Error::TooFewCandidates {
                k,
                available: geometry.count(),
            });
        }
        let masked = self.masked_scores(&raw, &geometry);
        let picked = top_k_indices(&masked, k)?;
        let padded = replicate_pad(image, geometry.pad);
        let (p, c) = (self.cfg.patch, image.channels);
        let mut data = Vec::with_capacity(k * c * p * p);
        let mut centers = Vec::with_capacity(2 * k);
        for &i in &picked {
            let (r, q) = (i / geometry.cols, i % geometry.cols);
            let (y0, x0) = (r * geometry.stride, q * geometry.stride);
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        data.push(padded.get(y0 + y, x0 + x, ch));
                    }
                }
            }
            let (cx, cy) = geometry.center(i);
            centers.extend([cx, cy]);
        }
        let l = Layers::plain(store);
        let mut g = Graph::<f32>::new();
        let patches = g.constant(Tensor::new(vec![k, c, p, p], data)?);
        let centers = g.constant(Tensor::from_f64(&[k, 2], &centers)?);
        let rows = self.decode(&l, &mut g, patches, centers, &geometry, derive_seed(seed, &[1]))?;
        let width = 3 + self.cfg.eta_dim;
        let t = g.value(rows).clone().reshape(&[1, k, width])?;
        Ok(ObjectList::from_tensor(&t)?.remove(0))
    }
}

fn replicate_pad(image: &ImageTensor, pad: usize) -> ImageTensor {
    if pad == 0 {
        return image.clone();
    }
    let (h, w) = (image.height + 2 * pad, image.width + 2 * pad);
    let mut out = ImageTensor::filled(h, w, &vec![0.0; image.channels]);
    for y in 0..h {
        let sy = y.saturating_sub(pad).min(image.height - 1);
        for x in 0..w {
            let sx = x.saturating_sub(pad).min(image.width - 1);
            for c in 0..image.channels {
                out.set(y, x, c, image.get(sy, sx, c));
            }
        }
    }
    out
}

fn crop_rows(image: &ImageTensor, y0: usize, y1: usize) -> ImageTensor {
    let row = image.width * image.channels;
    ImageTensor::new(y1 - y0, image.width, image.channels, image.data[y0 * row..y1 * row].to_vec())
        .expect("crop within bounds")
}

/// List → image generator `G_I`.
#[derive(Clone, Debug)]
pub struct ImageGenerator {
    pub cfg: ModelConfig,
}

impl ImageGenerator {
    pub fn new(cfg: ModelConfig) -> Self {
        ImageGenerator { cfg }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ParamStore<f32>> {
        let c = &self.cfg;
        let w = c.unet_width;
        let mut s = ParamStore::new();
        // blob channels + noise
        init_conv(&mut s, "gi.enc0", w, c.eta_dim + 2, 3, rng)?;
        init_conv(&mut s, "gi.down1", 2 * w, w, 3, rng)?;
        init_conv(&mut s, "gi.down2", 2 * w, 2 * w, 3, rng)?;
        init_conv(&mut s, "gi.down3", 2 * w, 2 * w, 3, rng)?;
        init_conv(&mut s, "gi.up2", 2 * w, 4 * w, 3, rng)?;
        init_conv(&mut s, "gi.up1", 2 * w, 4 * w, 3, rng)?;
        init_conv(&mut s, "gi.up0", w, 3 * w, 3, rng)?;
        init_conv(&mut s, "gi.out", c.channels, w, 1, rng)?;
        Ok(s)
    }

    /// Renders `[N, k, 3 + E]` lists into `[N, C, h, w]` images in `[-1, 1]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        list: Var,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<Var> {
        let s = g.shape(list).to_vec();
        if s.len() != 3 || s[2] != 3 + self.cfg.eta_dim {
            return Err(Error::Shape {
                op: "render_image",
                detail: format!("list {s:?}, |η| = {}", self.cfg.eta_dim),
            });
        }
        let geometry = PatchGeometry::new(height, width, self.cfg.patch, self.cfg.pad)?;
        let canvas = blob_canvas(g, list, &geometry, self.cfg.sigma())?;
        let noise = g.noise(&[s[0], 1, height, width], derive_seed(seed, &[2]));
        let x = g.concat(&[canvas, noise], 1)?;
        self.unet(&Layers::plain(store), g, x)
    }

    fn unet<T: Real>(&self, l: &Layers<T>, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let down = |g: &mut Graph<T>, name: &str, x: Var| -> Result<Var> {
            let h = l.conv(g, name, x, 2, 1)?;
            let h = g.instance_norm(h, NORM_EPS)?;
            Ok(g.leaky_relu(h, LEAK))
        };
        let up = |g: &mut Graph<T>, name: &str, x: Var, skip: Var| -> Result<Var> {
            let s = g.shape(skip).to_vec();
            let u = g.upsample_nearest(x, s[2], s[3])?;
            let cat = g.concat(&[u, skip], 1)?;
            let h = l.conv(g, name, cat, 1, 1)?;
            let h = g.instance_norm(h, NORM_EPS)?;
            Ok(g.leaky_relu(h, LEAK))
        };
        let e0 = l.conv(g, "gi.enc0", x, 1, 1)?;
        let e0 = g.leaky_relu(e0, LEAK);
        let d1 = down(g, "gi.down1", e0)?;
        let d2 = down(g, "gi.down2", d1)?;
        let d3 = down(g, "gi.down3", d2)?;
        let u2 = up(g, "gi.up2", d3, d2)?;
        let u1 = up(g, "gi.up1", u2, d1)?;
        let u0 = up(g, "gi.up0", u1, e0)?;
        let out = l.conv(g, "gi.out", u0, 1, 0)?;
        Ok(g.tanh(out))
    }

    /// Inference: one list to one `height × width` image.
    pub fn render_image(
        &self,
        store: &ParamStore<f32>,
        list: &ObjectList,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<ImageTensor> {
        let mut g = Graph::<f32>::new();
        let l = g.constant(ObjectList::batch_to_tensor(std::slice::from_ref(list))?);
        let img = self.forward(&mut g, store, l, height, width, seed)?;
        Ok(ImageTensor::from_nchw(g.value(img))?.remove(0))
    }
}

/// Finite-difference check of the full image → list → image cycle in double
/// precision on a `size × size` random image with k = 3 and |η| = 2. The
/// top-k perturbation is switched off so the selection is locally constant.
/// Returns the worst relative error over all input pixels.
pub fn cycle_grad_check(size: usize, seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        patch: 8,
        pad: 2,
        k: 3,
        eta_dim: 2,
        topk_noise: 0.0,
        scorer_width: 4,
        feature_width: 4,
        unet_width: 4,
        ..ModelConfig::default()
    };
    let gl = ListGenerator::new(cfg.clone());
    let gi = ImageGenerator::new(cfg);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let sl = gl.init(&mut rng)?.cast::<f64>();
    let si = gi.init(&mut rng)?.cast::<f64>();
    let img = Tensor::<f64>::randn(&[1, 3, size, size], derive_seed(seed, &[1])).map(|v| v.tanh());
    let weights = Tensor::<f64>::randn(&[1, 3, size, size], derive_seed(seed, &[2]));
    crate::autodiff::grad_check(
        |g, x| {
            let out = gl.forward(g, &sl, x, 3, derive_seed(seed, &[3]))?;
            let back = gi.forward(g, &si, out.list, size, size, derive_seed(seed, &[4]))?;
            let w = g.constant(weights.clone());
            let p = g.mul(back, w)?;
            Ok(g.sum(p))
        },
        &img,
        1e-5,
    )
}
