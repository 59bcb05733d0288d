//! Discriminators: a PatchGAN over images and a permutation-invariant
//! attention network over lists. Every weight matrix of both passes through
//! spectral normalization.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::list::ObjectList;
use crate::nn::{init_conv, init_dense, Layers, SpectralState, LEAK};
use crate::tensor::{Real, Tensor};

/// Multiplier on normalized relative positions before the relative-position
/// MLP, bringing typical offsets to order one.
const REL_SCALE: f64 = 8.0;
const REL_HIDDEN: usize = 16;
const ATTENTION_BLOCKS: usize = 2;

/// Image discriminator: three 4×4 stride-2 convolutions with leaky ReLU and
/// a 3×3 convolution to one channel. Output `[N, 1, h', w']`, no pooling.
#[derive(Clone, Debug)]
pub struct PatchGan {
    pub cfg: ModelConfig,
}

impl PatchGan {
    pub fn new(cfg: ModelConfig) -> Self {
        PatchGan { cfg }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ParamStore<f32>> {
        let w = self.cfg.patchgan_width;
        let mut s = ParamStore::new();
        init_conv(&mut s, "di.conv0", w, self.cfg.channels, 4, rng)?;
        init_conv(&mut s, "di.conv1", 2 * w, w, 4, rng)?;
        init_conv(&mut s, "di.conv2", 4 * w, 2 * w, 4, rng)?;
        init_conv(&mut s, "di.out", 1, 4 * w, 3, rng)?;
        Ok(s)
    }

    /// Side of the score map for a square input of side `n`.
    pub fn output_size(n: usize) -> usize {
        let down = |n: usize| (n + 2 - 4) / 2 + 1;
        down(down(down(n)))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        spectral: &SpectralState<T>,
        images: Var,
    ) -> Result<Var> {
        let l = Layers::spectral(store, spectral);
        let mut h = images;
        for name in ["di.conv0", "di.conv1", "di.conv2"] {
            h = l.conv(g, name, h, 2, 1)?;
            h = g.leaky_relu(h, LEAK);
        }
        l.conv(g, "di.out", h, 1, 1)
    }
}

/// List discriminator: per-row embedding, two self-attention blocks whose
/// logits carry an additive term computed from pairwise position
/// differences, mean pooling over rows and a scalar head. Nothing depends on
/// row order. Output `[N]`.
#[derive(Clone, Debug)]
pub struct ListDiscriminator {
    pub cfg: ModelConfig,
}

impl ListDiscriminator {
    pub fn new(cfg: ModelConfig) -> Self {
        ListDiscriminator { cfg }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ParamStore<f32>> {
        let d = self.cfg.list_disc_width;
        let mut s = ParamStore::new();
        init_dense(&mut s, "dl.embed0", 3 + self.cfg.eta_dim, d, rng)?;
        init_dense(&mut s, "dl.embed1", d, d, rng)?;
        for b in 0..ATTENTION_BLOCKS {
            for part in ["q", "k", "v", "o", "ff0", "ff1"] {
                init_dense(&mut s, &format!("dl.block{b}.{part}"), d, d, rng)?;
            }
            init_dense(&mut s, &format!("dl.block{b}.rel0"), 2, REL_HIDDEN, rng)?;
            init_dense(&mut s, &format!("dl.block{b}.rel1"), REL_HIDDEN, 1, rng)?;
        }
        init_dense(&mut s, "dl.head", d, 1, rng)?;
        Ok(s)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        spectral: &SpectralState<T>,
        list: Var,
    ) -> Result<Var> {
        let s = g.shape(list).to_vec();
        if s.len() != 3 || s[2] != 3 + self.cfg.eta_dim {
            return Err(Error::Shape {
                op: "list_disc",
                detail: format!("list {s:?}, |η| = {}", self.cfg.eta_dim),
            });
        }
        let (n, k) = (s[0], s[1]);
        let d = self.cfg.list_disc_width;
        let l = Layers::spectral(store, spectral);

        let mut h = l.dense(g, "dl.embed0", list)?;
        h = g.leaky_relu(h, LEAK);
        h = l.dense(g, "dl.embed1", h)?;

        let pos = g.slice_last(list, 0, 2)?;
        let rel = g.pairwise_diff(pos)?;
        let rel = g.scale(rel, REL_SCALE);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for b in 0..ATTENTION_BLOCKS {
            let name = |p: &str| format!("dl.block{b}.{p}");
            let q = l.dense(g, &name("q"), h)?;
            let kk = l.dense(g, &name("k"), h)?;
            let v = l.dense(g, &name("v"), h)?;
            let kt = g.transpose_last2(kk)?;
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, inv_sqrt_d);
            let r = l.dense(g, &name("rel0"), rel)?;
            let r = g.leaky_relu(r, LEAK);
            let r = l.dense(g, &name("rel1"), r)?;
            let r = g.reshape(r, &[n, k, k])?;
            let logits = g.add(logits, r)?;
            let attn = g.softmax_last(logits);
            let mixed = g.matmul(attn, v)?;
            let mixed = l.dense(g, &name("o"), mixed)?;
            h = g.add(h, mixed)?;
            let f = l.dense(g, &name("ff0"), h)?;
            let f = g.leaky_relu(f, LEAK);
            let f = l.dense(g, &name("ff1"), f)?;
            h = g.add(h, f)?;
        }
        let pooled = g.mean_axis(h, 1)?;
        let out = l.dense(g, "dl.head", pooled)?;
        g.reshape(out, &[n])
    }

    /// Scalar score of one list.
    pub fn score(&self, store: &ParamStore<f32>, spectral: &SpectralState<f32>, list: &ObjectList) -> Result<f64> {
        let mut g = Graph::<f32>::new();
        let l = g.constant(ObjectList::batch_to_tensor(std::slice::from_ref(list))?);
        let out = self.forward(&mut g, store, spectral, l)?;
        Ok(g.value(out).item() as f64)
    }
}

/// Matrix view `[rows, cols]` of a weight: the first axis against the rest.
fn matrix_dims(t: &Tensor<f32>) -> (usize, usize) {
    let rows = t.shape()[0];
    (rows, t.len() / rows)
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    x.iter_mut().for_each(|v| *v /= n);
}

/// `iters` power-iteration steps `v ← Wᵀu/‖·‖, u ← Wv/‖·‖` on a row-major
/// matrix; returns the estimate `uᵀWv`.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, u: &mut [f64], v: &mut [f64], iters: usize) -> f64 {
    for _ in 0..iters {
        v.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..rows {
            for c in 0..cols {
                v[c] += w[r * cols + c] * u[r];
            }
        }
        normalize(v);
        for r in 0..rows {
            u[r] = (0..cols).map(|c| w[r * cols + c] * v[c]).sum();
        }
        normalize(u);
    }
    (0..rows)
        .map(|r| u[r] * (0..cols).map(|c| w[r * cols + c] * v[c]).sum::<f64>())
        .sum()
}

/// Iteration cap for [`converge_power_iteration`].
pub const MAX_INIT_ITERS: usize = 20_000;

/// Runs at least `min_iters` power-iteration steps, then continues until the
/// estimate changes by less than `1e-10` relative per step (or the cap is
/// reached). Near-degenerate leading singular values make a fixed small
/// iteration count unreliable.
pub fn converge_power_iteration(
    w: &[f64],
    rows: usize,
    cols: usize,
    u: &mut [f64],
    v: &mut [f64],
    min_iters: usize,
) -> f64 {
    let mut sigma = power_iteration(w, rows, cols, u, v, min_iters.max(1));
    for _ in min_iters..MAX_INIT_ITERS {
        let next = power_iteration(w, rows, cols, u, v, 1);
        let done = (next - sigma).abs() <= 1e-10 * next.abs();
        sigma = next;
        if done {
            break;
        }
    }
    sigma
}

/// Starting left vector for the power iteration: the unit vector of the
/// row with the largest norm. Its overlap with the top left singular
/// vector is bounded below by `σ_max / (√rows · max row norm)`-type terms,
/// unlike a random start which can be nearly orthogonal to it.
pub fn power_iteration_start(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let norms: Vec<f64> = (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().map(|x| x * x).sum())
        .collect();
    let best = (0..rows).fold(0, |b, r| if norms[r] > norms[b] { r } else { b });
    let mut u = vec![0.0; rows];
    u[best] = 1.0;
    u
}

/// Names of the weights that receive spectral normalization.
pub fn spectral_names(store: &ParamStore<f32>) -> Vec<String> {
    store
        .names()
        .filter(|n| (n.starts_with("di.") || n.starts_with("dl.")) && n.ends_with(".w"))
        .cloned()
        .collect()
}

/// Fresh power-iteration state for every discriminator weight in `store`,
/// iterated to convergence (at least `min_iters` steps).
pub fn init_spectral(store: &ParamStore<f32>, min_iters: usize) -> SpectralState<f32> {
    let mut state = SpectralState::default();
    for name in spectral_names(store) {
        let t = store.get(&name).expect("listed");
        let (rows, cols) = matrix_dims(t);
        let w: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
        let mut u = power_iteration_start(&w, rows, cols);
        let mut v = vec![0.0; cols];
        converge_power_iteration(&w, rows, cols, &mut u, &mut v, min_iters);
        let f = |x: &Vec<f64>| x.iter().map(|&x| x as f32).collect();
        state.vectors.insert(name, (f(&u), f(&v)));
    }
    state
}

/// Advances every power iteration by `iters` steps against the current
/// weights.
pub fn refresh_spectral(store: &ParamStore<f32>, state: &mut SpectralState<f32>, iters: usize) {
    for (name, (u, v)) in state.vectors.iter_mut() {
        let t = store.get(name).expect("spectral weight present");
        let (rows, cols) = matrix_dims(t);
        let w: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
        let mut u64: Vec<f64> = u.iter().map(|&x| x as f64).collect();
        let mut v64: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        power_iteration(&w, rows, cols, &mut u64, &mut v64, iters);
        *u = u64.iter().map(|&x| x as f32).collect();
        *v = v64.iter().map(|&x| x as f32).collect();
    }
}

/// Current estimate `σ̂ = uᵀWv` for one weight.
pub fn sigma_estimate(store: &ParamStore<f32>, state: &SpectralState<f32>, name: &str) -> Result<f64> {
    let t = store
        .get(name)
        .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))?;
    let (u, v) = state.get(name)?;
    let (rows, cols) = matrix_dims(t);
    Ok((0..rows)
        .map(|r| {
            u[r] as f64
                * (0..cols)
                    .map(|c| t.data()[r * cols + c] as f64 * v[c] as f64)
                    .sum::<f64>()
        })
        .sum())
}
