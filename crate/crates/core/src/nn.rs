//! Layer helpers shared by the generators and discriminators: parameter
//! initialization and tape-side binding of convolutions and dense layers,
//! optionally through spectral normalization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LEAK: f64 = 0.2;

/// Variance floor of instance normalization.
pub const NORM_EPS: f64 = 1e-5;

fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Registers `{name}.w` of shape `[out, in, k, k]` and a zero `{name}.b`.
pub fn init_conv<R: Rng>(
    store: &mut ParamStore<f32>,
    name: &str,
    out: usize,
    inp: usize,
    kernel: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(
        format!("{name}.w"),
        he_normal(&[out, inp, kernel, kernel], inp * kernel * kernel, rng),
    )?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]))
}

/// Registers `{name}.w` of shape `[in, out]` and a zero `{name}.b`.
pub fn init_dense<R: Rng>(
    store: &mut ParamStore<f32>,
    name: &str,
    inp: usize,
    out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{name}.w"), he_normal(&[inp, out], inp, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]))
}

/// Power-iteration vectors per spectrally normalized weight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpectralState<T> {
    pub vectors: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> SpectralState<T> {
    pub fn get(&self, name: &str) -> Result<(&[T], &[T])> {
        self.vectors
            .get(name)
            .map(|(u, v)| (u.as_slice(), v.as_slice()))
            .ok_or_else(|| Error::InvalidArgument(format!("no spectral state for `{name}`")))
    }

    pub fn cast<U: Real>(&self) -> SpectralState<U> {
        let c = |x: &Vec<T>| x.iter().map(|v| U::lit(v.as_f64())).collect();
        SpectralState {
            vectors: self
                .vectors
                .iter()
                .map(|(k, (u, v))| (k.clone(), (c(u), c(v))))
                .collect(),
        }
    }
}

/// Binds a network's parameters onto a tape.
pub struct Layers<'a, T> {
    pub store: &'a ParamStore<T>,
    pub spectral: Option<&'a SpectralState<T>>,
}

impl<'a, T: Real> Layers<'a, T> {
    pub fn plain(store: &'a ParamStore<T>) -> Self {
        Layers {
            store,
            spectral: None,
        }
    }

    pub fn spectral(store: &'a ParamStore<T>, state: &'a SpectralState<T>) -> Self {
        Layers {
            store,
            spectral: Some(state),
        }
    }

    /// Weight `{name}.w`, divided by its spectral-norm estimate when
    /// spectral state is attached.
    pub fn weight(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let key = format!("{name}.w");
        let w = g.param(self.store, &key)?;
        match self.spectral {
            Some(s) => {
                let (u, v) = s.get(&key)?;
                g.spectral_norm(w, u, v)
            }
            None => Ok(w),
        }
    }

    pub fn conv(&self, g: &mut Graph<T>, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.weight(g, name)?;
        let b = g.param(self.store, &format!("{name}.b"))?;
        let y = g.conv2d(x, w, stride, pad)?;
        g.add_bias(y, b, 1)
    }

    /// Dense layer over the last axis of `x`.
    pub fn dense(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.weight(g, name)?;
        let b = g.param(self.store, &format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        let axis = g.shape(y).len() - 1;
        g.add_bias(y, b, axis)
    }
}
