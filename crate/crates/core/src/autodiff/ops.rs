//! Forward definitions and vector-Jacobian products for every tape op.

use super::graph::{Graph, Var};
use super::kernels::{self, col2im, gemm_a_bt, gemm_acc, gemm_at_b, im2col, split_axis, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<T> {
    Relu,
    LeakyRelu(T),
    Sigmoid,
    Tanh,
    Exp,
    Abs,
    Square,
    Sqrt,
}

/// Hard and Monte-Carlo perturbed top-k selections for one sample, consumed
/// by [`Graph::select_topk`].
#[derive(Clone, Debug)]
pub struct PerturbedSelection<T> {
    /// Winners of the clean scores, sorted by descending score.
    pub hard: Vec<usize>,
    /// Winners (sorted) of each perturbed draw.
    pub sample_indices: Vec<Vec<usize>>,
    /// The standard-normal draw behind each perturbed selection.
    pub sample_noise: Vec<Vec<T>>,
    pub noise_scale: T,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, b: Var, axis: usize },
    ScaleRows { x: Var, s: Var },
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary<T>),
    Clamp { x: Var, lo: T, hi: T },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    TransposeLast2 { x: Var, m: usize, n: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom, out_c: usize },
    Upsample { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize, mean: bool },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    InstanceNorm { x: Var, xhat: Vec<T>, inv_std: Vec<T>, group: usize },
    Reshape(Var),
    Permute { x: Var, index: Vec<usize> },
    ExtractPatches { x: Var, index: Vec<usize> },
    Splat { pos: Var, weights: Var, sigma: T },
    SpectralNorm { w: Var, u: Vec<T>, v: Vec<T>, sigma: T },
    SelectTopK { scores: Var, selections: Vec<PerturbedSelection<T>> },
    GatherRows { x: Var, perms: Vec<Vec<usize>> },
    PairwiseDiff(Var),
    SliceLast { x: Var, start: usize, len: usize },
    NormalizeLast { x: Var, norms: Vec<T> },
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn tensor<T: Real>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("op produced consistent shape")
}

impl<T: Real> Graph<T> {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(tensor(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a vector `b` along `axis` of `x` (bias broadcast).
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.value(b).len() != shape[axis] {
            return Err(shape_err(
                "add_bias",
                format!("x {:?}, bias {:?}, axis {axis}", shape, self.shape(b)),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let mut out = xv.to_vec();
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bv[d];
                }
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(tensor(shape, out), Op::AddBias { x, b, axis }, rg))
    }

    /// Multiplies each row (last axis) of `x` by the matching entry of `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        let rows = self.value(x).len() / cols;
        if self.value(s).len() != rows {
            return Err(shape_err(
                "scale_rows",
                format!("x {:?}, s {:?}", shape, self.shape(s)),
            ));
        }
        let sv = self.value(s).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(cols)
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
            .collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(tensor(shape, out), Op::ScaleRows { x, s }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn unary(&mut self, x: Var, kind: Unary<T>) -> Var {
        let f = move |v: T| -> T {
            match kind {
                Unary::Relu => v.max(T::zero()),
                Unary::LeakyRelu(s) => {
                    if v > T::zero() {
                        v
                    } else {
                        v * s
                    }
                }
                Unary::Sigmoid => T::one() / (T::one() + (-v).exp()),
                Unary::Tanh => v.tanh(),
                Unary::Exp => v.exp(),
                Unary::Abs => v.abs(),
                Unary::Square => v * v,
                Unary::Sqrt => v.sqrt(),
            }
        };
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, Op::Unary(x, kind), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(T::lit(slope)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(&[x]);
        self.push(t, Op::Clamp { x, lo, hi }, rg)
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either a shared
    /// `[k, n]` matrix or `[.., k, n]` with the same leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || shape_err("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(err());
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let bslice = if shared_b {
                bv
            } else {
                &bv[bi * k * n..(bi + 1) * k * n]
            };
            gemm_acc(
                &av[bi * m * k..(bi + 1) * m * k],
                bslice,
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            tensor(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose", format!("{s:?}")));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (blk_in, blk_out) in xv.chunks(m * n).zip(out.chunks_mut(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    blk_out[j * m + i] = blk_in[i * n + j];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(shape, out), Op::TransposeLast2 { x, m, n }, rg))
    }

    /// 2-D convolution over `[N, C, H, W]` with weight `[O, C, kh, kw]` and
    /// zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(shape_err("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(shape_err(
                "conv2d",
                format!("kernel {sw:?} larger than padded input {sx:?}"),
            ));
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
        };
        let (n, out_c) = (sx[0], sw[0]);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let ohw = oh * ow;
        let rows = geom.col_rows();
        let in_sz = sx[1] * sx[2] * sx[3];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * out_c * ohw];
        let mut col = vec![T::zero(); rows * ohw];
        for s in 0..n {
            im2col(&xv[s * in_sz..(s + 1) * in_sz], &geom, &mut col);
            gemm_acc(
                wv,
                &col,
                &mut out[s * out_c * ohw..(s + 1) * out_c * ohw],
                out_c,
                rows,
                ohw,
            );
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            tensor(vec![n, out_c, oh, ow], out),
            Op::Conv2d { x, w, geom, out_c },
            rg,
        ))
    }

    /// Nearest-neighbour resize of `[N, C, H, W]` to `[N, C, oh, ow]`.
    pub fn upsample_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || oh == 0 || ow == 0 {
            return Err(shape_err("upsample", format!("{s:?} -> ({oh}, {ow})")));
        }
        let (h, w) = (s[2], s[3]);
        let xv = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                let si = i * h / oh;
                for j in 0..ow {
                    out.push(plane[si * w + j * w / ow]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(vec![s[0], s[1], oh, ow], out), Op::Upsample { x }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                let data = self.value(v).data();
                out.extend_from_slice(&data[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            tensor(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(&[x]);
        self.push(tensor(s, out), Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} of {s:?}")));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &xv[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (a, &b) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        if mean {
            let inv = T::one() / T::lit(dim as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape: Vec<usize> = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(shape, out), Op::SumAxis { x, axis, mean }, rg))
    }

    /// Sums out one axis (the axis is removed from the shape).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// 2×2 max-pooling with stride 2 (floor on odd extents).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("max_pool2", format!("{s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            tensor(vec![s[0], s[1], oh, ow], out),
            Op::MaxPool2 { x, argmax },
            rg,
        ))
    }

    /// Per-sample, per-channel normalization over the spatial extent
    /// (no affine terms).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("instance_norm", format!("{s:?}")));
        }
        let group = s[2] * s[3];
        let eps = T::lit(eps);
        let inv_n = T::one() / T::lit(group as f64);
        let xv = self.value(x).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(s[0] * s[1]);
        for chunk in xv.chunks(group) {
            let mu: T = chunk.iter().copied().sum::<T>() * inv_n;
            let var: T = chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(chunk.iter().map(|&v| (v - mu) * is));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            tensor(s, xhat.clone()),
            Op::InstanceNorm {
                x,
                xhat,
                inv_std,
                group,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{s:?} by {perm:?}")));
        }
        let index = kernels::permute_index(&s, perm);
        let xv = self.value(x).data();
        let out = index.iter().map(|&i| xv[i]).collect();
        let shape = perm.iter().map(|&p| s[p]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(shape, out), Op::Permute { x, index }, rg))
    }

    /// Cuts `[N, C, H, W]` into overlapping `p×p` patches on a `stride` grid
    /// after replicate-padding by `pad`. Output `[N, rows·cols, C·p·p]`,
    /// patches in row-major grid order.
    pub fn extract_patches(&mut self, x: Var, p: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || stride == 0 || p == 0 || p > s[2] + 2 * pad || p > s[3] + 2 * pad {
            return Err(shape_err(
                "extract_patches",
                format!("input {s:?}, patch {p}, pad {pad}"),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let rows = (h + 2 * pad - p) / stride + 1;
        let cols = (w + 2 * pad - p) / stride + 1;
        let per_patch = c * p * p;
        let mut index = Vec::with_capacity(n * rows * cols * per_patch);
        for b in 0..n {
            for r in 0..rows {
                for q in 0..cols {
                    for ch in 0..c {
                        for i in 0..p {
                            let yy = (r * stride + i) as isize - pad as isize;
                            let yy = yy.clamp(0, h as isize - 1) as usize;
                            for j in 0..p {
                                let xx = (q * stride + j) as isize - pad as isize;
                                let xx = xx.clamp(0, w as isize - 1) as usize;
                                index.push(((b * c + ch) * h + yy) * w + xx);
                            }
                        }
                    }
                }
            }
        }
        let xv = self.value(x).data();
        let out = index.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            tensor(vec![n, rows * cols, per_patch], out),
            Op::ExtractPatches { x, index },
            rg,
        ))
    }

    /// Isotropic Gaussian splatting. `pos` is `[N, k, 2]` (x, y in pixel
    /// units, pixel centres at integer coordinates); `weights` is
    /// `[N, k, C]`. Output `[N, C, h, w]`.
    pub fn splat(&mut self, pos: Var, weights: Var, h: usize, w: usize, sigma: f64) -> Result<Var> {
        let sp = self.shape(pos).to_vec();
        let sw = self.shape(weights).to_vec();
        if sp.len() != 3 || sp[2] != 2 || sw.len() != 3 || sw[..2] != sp[..2] || sigma <= 0.0 {
            return Err(shape_err("splat", format!("pos {sp:?}, weights {sw:?}")));
        }
        let (n, k, c) = (sp[0], sp[1], sw[2]);
        let sigma = T::lit(sigma);
        let pv = self.value(pos).data();
        let wv = self.value(weights).data();
        let mut out = vec![T::zero(); n * c * h * w];
        let mut ex = vec![T::zero(); w];
        let mut ey = vec![T::zero(); h];
        for b in 0..n {
            for i in 0..k {
                let (x0, y0) = (pv[(b * k + i) * 2], pv[(b * k + i) * 2 + 1]);
                gauss_profile(x0, sigma, &mut ex);
                gauss_profile(y0, sigma, &mut ey);
                for ch in 0..c {
                    let a = wv[(b * k + i) * c + ch];
                    if a == T::zero() {
                        continue;
                    }
                    let plane = &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for (py, &gy) in ey.iter().enumerate() {
                        let ay = a * gy;
                        for (o, &gx) in plane[py * w..(py + 1) * w].iter_mut().zip(&ex) {
                            *o += ay * gx;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[pos, weights]);
        Ok(self.push(
            tensor(vec![n, c, h, w], out),
            Op::Splat {
                pos,
                weights,
                sigma,
            },
            rg,
        ))
    }

    /// `w / σ̂` with `σ̂ = uᵀ W v` for the matrix view `[out, rest]` of `w`.
    /// `u` and `v` are treated as constants.
    pub fn spectral_norm(&mut self, w: Var, u: &[T], v: &[T]) -> Result<Var> {
        let s = self.shape(w).to_vec();
        let rows = s[0];
        let cols = self.value(w).len() / rows;
        if u.len() != rows || v.len() != cols {
            return Err(shape_err(
                "spectral_norm",
                format!("w {s:?}, u {}, v {}", u.len(), v.len()),
            ));
        }
        let wv = self.value(w).data();
        let mut sigma = T::zero();
        for (r, &ur) in u.iter().enumerate() {
            sigma += ur * kernels::dot(&wv[r * cols..(r + 1) * cols], v);
        }
        let inv = T::one() / sigma;
        let t = self.value(w).map(|x| x * inv);
        let rg = self.rg(&[w]);
        Ok(self.push(
            t,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            rg,
        ))
    }

    /// One-hot selection matrices `[N, k, n]` from per-sample hard winners.
    /// The backward pass uses the perturbed-optimizer estimator
    /// `E[(Y(s + εZ) − Y(s)) Zᵀ] / ε`; with `ε = 0` it is zero.
    pub fn select_topk(&mut self, scores: Var, selections: Vec<PerturbedSelection<T>>) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        if s.len() != 2 || selections.len() != s[0] {
            return Err(shape_err(
                "select_topk",
                format!("scores {s:?}, {} selections", selections.len()),
            ));
        }
        let (batch, n) = (s[0], s[1]);
        let k = selections[0].hard.len();
        let mut out = vec![T::zero(); batch * k * n];
        for (b, sel) in selections.iter().enumerate() {
            if sel.hard.len() != k || sel.hard.iter().any(|&i| i >= n) {
                return Err(shape_err("select_topk", "inconsistent winners".into()));
            }
            for (j, &i) in sel.hard.iter().enumerate() {
                out[(b * k + j) * n + i] = T::one();
            }
        }
        let rg = self.rg(&[scores]);
        Ok(self.push(
            tensor(vec![batch, k, n], out),
            Op::SelectTopK { scores, selections },
            rg,
        ))
    }

    /// Reorders rows: `out[b, j] = x[b, perms[b][j]]` for `x` of shape `[N, k, F]`.
    pub fn gather_rows(&mut self, x: Var, perms: Vec<Vec<usize>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || perms.len() != s[0] || perms.iter().any(|p| p.len() != s[1] || p.iter().any(|&i| i >= s[1])) {
            return Err(shape_err("gather_rows", format!("{s:?}")));
        }
        let (k, f) = (s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        for (b, p) in perms.iter().enumerate() {
            for &src in p {
                out.extend_from_slice(&xv[(b * k + src) * f..(b * k + src + 1) * f]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(s, out), Op::GatherRows { x, perms }, rg))
    }

    /// `[N, k, D] -> [N, k, k, D]` with `out[b, i, j] = x[b, i] − x[b, j]`.
    pub fn pairwise_diff(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("pairwise_diff", format!("{s:?}")));
        }
        let (n, k, d) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * k * k * d);
        for b in 0..n {
            for i in 0..k {
                for j in 0..k {
                    for c in 0..d {
                        out.push(xv[(b * k + i) * d + c] - xv[(b * k + j) * d + c]);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(vec![n, k, k, d], out), Op::PairwiseDiff(x), rg))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if len == 0 || start + len > d {
            return Err(shape_err("slice_last", format!("{s:?} [{start}..{}]", start + len)));
        }
        let out = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(shape, out), Op::SliceLast { x, start, len }, rg))
    }

    /// Scales every row of the last axis to unit Euclidean norm.
    pub fn normalize_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(d) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / nrm));
        }
        let rg = self.rg(&[x]);
        self.push(tensor(s, out), Op::NormalizeLast { x, norms }, rg)
    }

    pub(crate) fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, |ga| add_into(ga, g));
                self.accumulate_with(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, *a, |ga| add_into(ga, g));
                self.accumulate_with(grads, *b, |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate_with(grads, *a, |ga| {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                });
            }
            Op::AddBias { x, b, axis } => {
                self.accumulate_with(grads, *x, |gx| add_into(gx, g));
                let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                self.accumulate_with(grads, *b, |gb| {
                    for o in 0..outer {
                        for d in 0..dim {
                            let base = (o * dim + d) * inner;
                            gb[d] += g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let cols = *node.value.shape().last().unwrap();
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                self.accumulate_with(grads, *x, |gx| {
                    for ((gr, row), &k) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(sv) {
                        for (d, &v) in gr.iter_mut().zip(row) {
                            *d += v * k;
                        }
                    }
                });
                self.accumulate_with(grads, *s, |gs| {
                    for (r, d) in gs.iter_mut().enumerate() {
                        *d += kernels::dot(&g[r * cols..(r + 1) * cols], &xv[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate_with(grads, *x, |gx| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s * *c;
                    }
                });
            }
            Op::AddScalar(x) => self.accumulate_with(grads, *x, |gx| add_into(gx, g)),
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let kind = *kind;
                self.accumulate_with(grads, *x, |gx| {
                    for (((d, &s), &xi), &yi) in gx.iter_mut().zip(g).zip(xv).zip(y) {
                        let deriv = match kind {
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::LeakyRelu(sl) => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    sl
                                }
                            }
                            Unary::Sigmoid => yi * (T::one() - yi),
                            Unary::Tanh => T::one() - yi * yi,
                            Unary::Exp => yi,
                            Unary::Abs => {
                                if xi > T::zero() {
                                    T::one()
                                } else if xi < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Square => xi + xi,
                            Unary::Sqrt => T::lit(0.5) / yi,
                        };
                        *d += s * deriv;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                self.accumulate_with(grads, *x, |gx| {
                    for ((d, &s), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi >= *lo && xi <= *hi {
                            *d += s;
                        }
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate_with(grads, *a, |ga| {
                    for bi in 0..batch {
                        let bs = if *shared_b { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        gemm_a_bt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            bs,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for bi in 0..batch {
                        let dst = if *shared_b {
                            &mut gb[..]
                        } else {
                            &mut gb[bi * k * n..(bi + 1) * k * n]
                        };
                        gemm_at_b(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            dst,
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::TransposeLast2 { x, m, n } => {
                let (m, n) = (*m, *n);
                self.accumulate_with(grads, *x, |gx| {
                    for (blk_g, blk_x) in g.chunks(m * n).zip(gx.chunks_mut(m * n)) {
                        for i in 0..m {
                            for j in 0..n {
                                blk_x[i * n + j] += blk_g[j * m + i];
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom, out_c } => {
                let n = self.shape(*x)[0];
                let out_c = *out_c;
                let ohw = geom.out_h() * geom.out_w();
                let rows = geom.col_rows();
                let in_sz = geom.channels * geom.height * geom.width;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.requires_grad(*x);
                let need_w = self.requires_grad(*w);
                let mut col = vec![T::zero(); rows * ohw];
                if need_w {
                    self.accumulate_with(grads, *w, |gw| {
                        for s in 0..n {
                            im2col(&xv[s * in_sz..(s + 1) * in_sz], geom, &mut col);
                            gemm_a_bt(&g[s * out_c * ohw..(s + 1) * out_c * ohw], &col, gw, out_c, ohw, rows);
                        }
                    });
                }
                if need_x {
                    self.accumulate_with(grads, *x, |gx| {
                        for s in 0..n {
                            col.iter_mut().for_each(|v| *v = T::zero());
                            gemm_at_b(wv, &g[s * out_c * ohw..(s + 1) * out_c * ohw], &mut col, out_c, rows, ohw);
                            col2im(&col, geom, &mut gx[s * in_sz..(s + 1) * in_sz]);
                        }
                    });
                }
            }
            Op::Upsample { x } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let planes = s[0] * s[1];
                self.accumulate_with(grads, *x, |gx| {
                    for p in 0..planes {
                        for i in 0..oh {
                            let si = i * h / oh;
                            for j in 0..ow {
                                gx[p * h * w + si * w + j * w / ow] += g[(p * oh + i) * ow + j];
                            }
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let d = self.shape(v)[*axis];
                    self.accumulate_with(grads, v, |gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            add_into(&mut gv[o * d * inner..(o + 1) * d * inner], src);
                        }
                    });
                    offset += d;
                }
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                self.accumulate_with(grads, *x, |gx| {
                    for ((gr, yr), dst) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dotp = kernels::dot(gr, yr);
                        for ((o, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dotp);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.accumulate_with(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let s = g[0] / T::lit(n as f64);
                self.accumulate_with(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += s));
            }
            Op::SumAxis { x, axis, mean } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let scale = if *mean {
                    T::one() / T::lit(dim as f64)
                } else {
                    T::one()
                };
                self.accumulate_with(grads, *x, |gx| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            let dst = &mut gx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            for (a, &b) in dst.iter_mut().zip(src) {
                                *a += b * scale;
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate_with(grads, *x, |gx| {
                    for (&idx, &s) in argmax.iter().zip(g) {
                        gx[idx] += s;
                    }
                });
            }
            Op::InstanceNorm {
                x,
                xhat,
                inv_std,
                group,
            } => {
                let m = T::lit(*group as f64);
                self.accumulate_with(grads, *x, |gx| {
                    for (((gr, xr), dst), &is) in g
                        .chunks(*group)
                        .zip(xhat.chunks(*group))
                        .zip(gx.chunks_mut(*group))
                        .zip(inv_std)
                    {
                        let sg: T = gr.iter().copied().sum();
                        let sgx = kernels::dot(gr, xr);
                        for ((o, &gi), &xi) in dst.iter_mut().zip(gr).zip(xr) {
                            *o += is * (m * gi - sg - xi * sgx) / m;
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate_with(grads, *x, |gx| add_into(gx, g)),
            Op::Permute { x, index } | Op::ExtractPatches { x, index } => {
                self.accumulate_with(grads, *x, |gx| {
                    for (&src, &s) in index.iter().zip(g) {
                        gx[src] += s;
                    }
                });
            }
            Op::Splat {
                pos,
                weights,
                sigma,
            } => {
                let os = node.value.shape();
                self.splat_backward(*pos, *weights, *sigma, (os[2], os[3]), g, grads)
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = self.value(*w).data();
                let cols = v.len();
                let inv = T::one() / *sigma;
                let gw_dot = kernels::dot(g, wv);
                let coef = gw_dot * inv * inv;
                self.accumulate_with(grads, *w, |gw| {
                    for (r, &ur) in u.iter().enumerate() {
                        for (c, &vc) in v.iter().enumerate() {
                            let idx = r * cols + c;
                            gw[idx] += g[idx] * inv - coef * ur * vc;
                        }
                    }
                });
            }
            Op::SelectTopK { scores, selections } => {
                let n = self.shape(*scores)[1];
                let k = selections[0].hard.len();
                self.accumulate_with(grads, *scores, |gs| {
                    for (b, sel) in selections.iter().enumerate() {
                        if sel.noise_scale == T::zero() || sel.sample_indices.is_empty() {
                            continue;
                        }
                        let gb = &g[b * k * n..(b + 1) * k * n];
                        let pick = |idx: &[usize]| -> T {
                            idx.iter().enumerate().map(|(j, &i)| gb[j * n + i]).sum()
                        };
                        let base = pick(&sel.hard);
                        let scale = T::one() / (sel.noise_scale * T::lit(sel.sample_indices.len() as f64));
                        let dst = &mut gs[b * n..(b + 1) * n];
                        for (idx, z) in sel.sample_indices.iter().zip(&sel.sample_noise) {
                            let c = (pick(idx) - base) * scale;
                            if c != T::zero() {
                                kernels::axpy(c, z, dst);
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, perms } => {
                let s = self.shape(*x);
                let (k, f) = (s[1], s[2]);
                self.accumulate_with(grads, *x, |gx| {
                    for (b, p) in perms.iter().enumerate() {
                        for (j, &src) in p.iter().enumerate() {
                            add_into(
                                &mut gx[(b * k + src) * f..(b * k + src + 1) * f],
                                &g[(b * k + j) * f..(b * k + j + 1) * f],
                            );
                        }
                    }
                });
            }
            Op::PairwiseDiff(x) => {
                let s = self.shape(*x);
                let (n, k, d) = (s[0], s[1], s[2]);
                self.accumulate_with(grads, *x, |gx| {
                    for b in 0..n {
                        for i in 0..k {
                            for j in 0..k {
                                for c in 0..d {
                                    let v = g[((b * k + i) * k + j) * d + c];
                                    gx[(b * k + i) * d + c] += v;
                                    gx[(b * k + j) * d + c] -= v;
                                }
                            }
                        }
                    }
                });
            }
            Op::SliceLast { x, start, len } => {
                let d = *self.shape(*x).last().unwrap();
                self.accumulate_with(grads, *x, |gx| {
                    for (dst, src) in gx.chunks_mut(d).zip(g.chunks(*len)) {
                        add_into(&mut dst[*start..*start + *len], src);
                    }
                });
            }
            Op::NormalizeLast { x, norms } => {
                let d = *node.value.shape().last().unwrap();
                self.accumulate_with(grads, *x, |gx| {
                    for (((dst, gr), yr), &nrm) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)).zip(norms) {
                        let gy = kernels::dot(gr, yr);
                        for ((o, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *o += (gi - yi * gy) / nrm;
                        }
                    }
                });
            }
        }
    }

    fn splat_backward(
        &self,
        pos: Var,
        weights: Var,
        sigma: T,
        (h, w): (usize, usize),
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let sp = self.shape(pos);
        let (n, k) = (sp[0], sp[1]);
        let c = self.shape(weights)[2];
        let pv = self.value(pos).data();
        let wv = self.value(weights).data();
        let inv_s2 = T::one() / (sigma * sigma);
        let mut ex = vec![T::zero(); w];
        let mut ey = vec![T::zero(); h];
        let mut gpos = vec![T::zero(); n * k * 2];
        let mut gw = vec![T::zero(); n * k * c];
        for b in 0..n {
            for i in 0..k {
                let (x0, y0) = (pv[(b * k + i) * 2], pv[(b * k + i) * 2 + 1]);
                gauss_profile(x0, sigma, &mut ex);
                gauss_profile(y0, sigma, &mut ey);
                let mut dx = T::zero();
                let mut dy = T::zero();
                for ch in 0..c {
                    let a = wv[(b * k + i) * c + ch];
                    let plane = &g[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    // s0 = Σ g·e, sx = Σ g·e·(px − x0), sy = Σ g·e·(py − y0)
                    let mut s0 = T::zero();
                    let mut sx = T::zero();
                    let mut sy = T::zero();
                    for (py, &gy) in ey.iter().enumerate() {
                        let row = &plane[py * w..(py + 1) * w];
                        let mut r0 = T::zero();
                        let mut rx = T::zero();
                        for (px, (&gv, &gx)) in row.iter().zip(&ex).enumerate() {
                            let t = gv * gx;
                            r0 += t;
                            rx += t * (T::lit(px as f64) - x0);
                        }
                        s0 += r0 * gy;
                        sx += rx * gy;
                        sy += r0 * gy * (T::lit(py as f64) - y0);
                    }
                    gw[(b * k + i) * c + ch] = s0;
                    dx += a * sx * inv_s2;
                    dy += a * sy * inv_s2;
                }
                gpos[(b * k + i) * 2] = dx;
                gpos[(b * k + i) * 2 + 1] = dy;
            }
        }
        self.accumulate_with(grads, pos, |d| add_into(d, &gpos));
        self.accumulate_with(grads, weights, |d| add_into(d, &gw));
    }
}

fn gauss_profile<T: Real>(center: T, sigma: T, out: &mut [T]) {
    let inv = T::one() / (T::lit(2.0) * sigma * sigma);
    for (p, o) in out.iter_mut().enumerate() {
        let d = T::lit(p as f64) - center;
        *o = (-(d * d) * inv).exp();
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

