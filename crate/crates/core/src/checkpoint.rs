//! Binary checkpoints. All integers and floats are little-endian.
//!
//! ```text
//! "ORGN"  u32 version  u32 len + RunConfig JSON  u64 step
//! section params    section adam_m    section adam_v    section spectral
//! section := u32 count, then per tensor:
//!            u32 name len, UTF-8 name, u32 rank, rank × u32 dims, f32 values
//! ```
//!
//! Tensors are written in name order and spectral vectors as rank-1 tensors
//! named `{weight}#u` / `{weight}#v`, so save → load → save is byte-identical.

use crate::autodiff::ParamStore;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::SpectralState;
use crate::tensor::Tensor;
use crate::training::ModelState;

pub const MAGIC: &[u8; 4] = b"ORGN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: ModelState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_section<'a>(out: &mut Vec<u8>, tensors: impl ExactSizeIterator<Item = (&'a str, &'a [usize], &'a [f32])>) -> Result<()> {
    put_u32(out, tensors.len())?;
    for (name, dims, values) in tensors {
        put_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(out, dims.len())?;
        for &d in dims {
            put_u32(out, d)?;
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn store_section(out: &mut Vec<u8>, store: &ParamStore<f32>) -> Result<()> {
    put_section(
        out,
        store
            .iter()
            .map(|(n, t)| (n.as_str(), t.shape(), t.data()))
            .collect::<Vec<_>>()
            .into_iter(),
    )
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.state.step.to_le_bytes());
        store_section(&mut out, &self.state.params)?;
        store_section(&mut out, &self.state.adam_m)?;
        store_section(&mut out, &self.state.adam_v)?;
        let names: Vec<(String, usize, &[f32])> = self
            .state
            .spectral
            .vectors
            .iter()
            .flat_map(|(n, (u, v))| [(format!("{n}#u"), u.len(), u.as_slice()), (format!("{n}#v"), v.len(), v.as_slice())])
            .collect();
        let dims: Vec<[usize; 1]> = names.iter().map(|n| [n.1]).collect();
        put_section(
            &mut out,
            names
                .iter()
                .zip(&dims)
                .map(|(n, d)| (n.0.as_str(), d.as_slice(), n.2))
                .collect::<Vec<_>>()
                .into_iter(),
        )?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {VERSION}"
            )));
        }
        let len = r.u32()? as usize;
        let config = RunConfig::from_json(r.take(len)?)?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let params = r.store()?;
        let adam_m = r.store()?;
        let adam_v = r.store()?;
        let raw = r.section()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        for (name, moments) in [("adam_m", &adam_m), ("adam_v", &adam_v)] {
            let same = moments.len() == params.len()
                && moments
                    .iter()
                    .zip(params.iter())
                    .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
            if !same {
                return Err(Error::Checkpoint(format!("{name} does not match the parameters")));
            }
        }
        let mut spectral = SpectralState::default();
        let mut it = raw.into_iter();
        while let Some((un, ut)) = it.next() {
            let (vn, vt) = it
                .next()
                .ok_or_else(|| Error::Checkpoint("spectral vectors come in pairs".into()))?;
            let weight = un
                .strip_suffix("#u")
                .filter(|w| vn.strip_suffix("#v") == Some(w))
                .ok_or_else(|| Error::Checkpoint(format!("bad spectral pair `{un}`, `{vn}`")))?;
            let w = params
                .get(weight)
                .ok_or_else(|| Error::Checkpoint(format!("spectral state for unknown weight `{weight}`")))?;
            let rows = w.shape().first().copied().unwrap_or(0);
            if ut.len() != rows || rows * vt.len() != w.len() {
                return Err(Error::Checkpoint(format!("spectral vectors of `{weight}` have the wrong size")));
            }
            spectral.vectors.insert(weight.to_string(), (ut.into_data(), vt.into_data()));
        }
        Ok(Checkpoint {
            config,
            state: ModelState {
                params,
                adam_m,
                adam_v,
                spectral,
                step,
            },
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn section(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32()? as usize;
        // every tensor needs at least its two length fields
        if count > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::Checkpoint("tensor count exceeds file size".into()));
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = self.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
                dims.push(d);
            }
            let raw = self.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?,
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push((name, Tensor::new(dims, values)?));
        }
        Ok(out)
    }

    fn store(&mut self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        let mut last: Option<String> = None;
        for (name, t) in self.section()? {
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(Error::Checkpoint(format!("tensor `{name}` out of order or repeated")));
            }
            last = Some(name.clone());
            store.insert(name, t)?;
        }
        Ok(store)
    }
}

pub fn save(path: &std::path::Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, RunConfig};
    use crate::scenes::scene_at;
    use crate::training::{train, Models, TrainData};

    fn tiny() -> RunConfig {
        let mut run = RunConfig::mini_tetrominoes();
        run.model = ModelConfig {
            patch: 12,
            pad: 2,
            k: 3,
            eta_dim: 3,
            scorer_width: 4,
            feature_width: 4,
            unet_width: 4,
            patchgan_width: 4,
            list_disc_width: 8,
            topk_samples: 2,
            ..ModelConfig::default()
        };
        run.train.batch = 2;
        run.train.warmup_steps = 2;
        run
    }

    fn run_to(run: &RunConfig, state: &mut ModelState, until: u64) {
        let images: Vec<_> = (0..6).map(|i| scene_at(&run.scene, 3, i).unwrap().image).collect();
        let data = TrainData {
            images: &images,
            scene: &run.scene,
        };
        train(&Models::new(&run.model), state, run, &data, until, |_, _| Ok(())).unwrap();
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let run = tiny();
        let mut state = ModelState::init(&Models::new(&run.model), &run.train).unwrap();
        run_to(&run, &mut state, 1);
        let ck = Checkpoint { config: run, state };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn resume_equals_uninterrupted_run() {
        let run = tiny();
        let models = Models::new(&run.model);
        let mut full = ModelState::init(&models, &run.train).unwrap();
        run_to(&run, &mut full, 2);
        let mut half = ModelState::init(&models, &run.train).unwrap();
        run_to(&run, &mut half, 1);
        let bytes = Checkpoint { config: run.clone(), state: half }.to_bytes().unwrap();
        let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().state;
        run_to(&run, &mut resumed, 2);
        assert_eq!(resumed, full);
    }

    #[test]
    fn rejects_bad_headers_and_truncation() {
        let run = tiny();
        let state = ModelState::init(&Models::new(&run.model), &run.train).unwrap();
        let bytes = Checkpoint { config: run, state }.to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[4] = 2;
        let err = Checkpoint::from_bytes(&wrong).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
