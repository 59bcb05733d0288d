//! Loss assembly and the alternating optimization loop.
//!
//! One step updates the image critic, then the list critic, then both
//! generators jointly, then advances every spectral-norm power iteration by
//! one step. Per-step randomness (batch indices, list-prior samples, noise
//! tensors, top-k perturbations) is derived from `(seed, step)` alone, so a
//! run resumed from a checkpoint replays the uninterrupted run bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversaries::{init_spectral, refresh_spectral, ListDiscriminator, PatchGan};
use crate::assignment::{build_scorer_target, list_cycle_loss, CostScale, ListLossWeights};
use crate::autodiff::{Gradients, Graph, ParamStore, Var};
use crate::config::{LossWeights, ModelConfig, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::generators::{ImageGenerator, ListGenerator};
use crate::image::ImageTensor;
use crate::list::ObjectList;
use crate::nn::SpectralState;
use crate::scenes::{sample_list_prior, SceneSpec};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};

/// Parameter-name prefixes of the two optimizer groups.
pub const GENERATOR_PREFIXES: [&str; 2] = ["gl.", "gi."];
pub const IMAGE_CRITIC_PREFIX: &str = "di.";
pub const LIST_CRITIC_PREFIX: &str = "dl.";

/// Least-squares generator loss `mean((fake − 1)²)`.
pub fn lsgan_gen<T: Real>(g: &mut Graph<T>, fake: Var) -> Var {
    let d = g.add_scalar(fake, -1.0);
    let d = g.square(d);
    g.mean(d)
}

/// Least-squares critic loss `½·mean((real − 1)²) + ½·mean(fake²)`.
pub fn lsgan_disc<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let r = lsgan_gen(g, real);
    let f = g.square(fake);
    let f = g.mean(f);
    let s = g.add(r, f)?;
    Ok(g.scale(s, 0.5))
}

/// `(generator loss, critic loss)` for one pair of critic outputs.
pub fn lsgan_losses<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<(Var, Var)> {
    Ok((lsgan_gen(g, fake), lsgan_disc(g, real, fake)?))
}

/// Mean absolute error between two images of equal shape.
pub fn image_cycle_loss<T: Real>(g: &mut Graph<T>, original: Var, cycled: Var) -> Result<Var> {
    if g.shape(original) != g.shape(cycled) {
        return Err(Error::Shape {
            op: "image_cycle_loss",
            detail: format!("{:?} vs {:?}", g.shape(original), g.shape(cycled)),
        });
    }
    let d = g.sub(original, cycled)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// The four generator objective terms, each a scalar on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorParts {
    pub dis_l: Var,
    pub dis_i: Var,
    pub cyc_i: Var,
    pub cyc_l: Var,
}

pub fn total_generator_loss<T: Real>(g: &mut Graph<T>, parts: GeneratorParts, w: &LossWeights) -> Result<Var> {
    let terms = [
        (parts.dis_l, w.dis_l),
        (parts.dis_i, w.dis_i),
        (parts.cyc_i, w.cyc_i),
        (parts.cyc_l, w.cyc_l),
    ];
    let mut total = g.scale(terms[0].0, terms[0].1);
    for &(v, lambda) in &terms[1..] {
        let s = g.scale(v, lambda);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Linear warm-up `base · min(1, step / warmup)`.
pub fn warmup_lr(base_lr: f64, step: u64, warmup: u64) -> f64 {
    base_lr * (step as f64 / warmup.max(1) as f64).min(1.0)
}

/// The four networks of one configuration.
#[derive(Clone, Debug)]
pub struct Models {
    pub list_gen: ListGenerator,
    pub image_gen: ImageGenerator,
    pub image_critic: PatchGan,
    pub list_critic: ListDiscriminator,
}

impl Models {
    pub fn new(cfg: &ModelConfig) -> Self {
        Models {
            list_gen: ListGenerator::new(cfg.clone()),
            image_gen: ImageGenerator::new(cfg.clone()),
            image_critic: PatchGan::new(cfg.clone()),
            list_critic: ListDiscriminator::new(cfg.clone()),
        }
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.list_gen.cfg
    }
}

/// All trainable state: parameters of the four networks under their
/// prefixes, Adam moments with the same names, power-iteration vectors, and
/// the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: ParamStore<f32>,
    pub adam_m: ParamStore<f32>,
    pub adam_v: ParamStore<f32>,
    pub spectral: SpectralState<f32>,
    pub step: u64,
}

fn zeros_like(store: &ParamStore<f32>) -> ParamStore<f32> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        out.insert(name.clone(), Tensor::zeros(t.shape())).expect("unique names");
    }
    out
}

impl ModelState {
    /// Fresh initialization; each network draws from its own derived seed.
    pub fn init(models: &Models, train: &TrainConfig) -> Result<Self> {
        let rng = |i: u64| ChaCha8Rng::seed_from_u64(derive_seed(train.seed, &[100, i]));
        let mut params = models.list_gen.init(&mut rng(0))?;
        params.extend(models.image_gen.init(&mut rng(1))?)?;
        params.extend(models.image_critic.init(&mut rng(2))?)?;
        params.extend(models.list_critic.init(&mut rng(3))?)?;
        let spectral = init_spectral(&params, train.spectral_init_iters);
        Ok(ModelState {
            adam_m: zeros_like(&params),
            adam_v: zeros_like(&params),
            params,
            spectral,
            step: 0,
        })
    }
}

/// Per-step losses and learning rates, one CSV row each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub critic_image: f64,
    pub critic_list: f64,
    pub adv_image: f64,
    pub adv_list: f64,
    pub cycle_image: f64,
    pub cycle_list: f64,
    pub total: f64,
    pub lr_gen: f64,
    pub lr_critic: f64,
}

/// One unpaired batch and the seed of its noise tensors.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub images: Vec<ImageTensor>,
    pub lists: Vec<ObjectList>,
    pub seed: u64,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(name.to_string()))
    }
}

/// Generator outputs are checked before they feed the next network, so a
/// failure is reported against the loss term that consumes them.
fn check_finite(g: &Graph<f32>, v: Var, term: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss(term.to_string()))
    }
}

/// Adam on every parameter whose name starts with one of `prefixes`.
/// Arithmetic runs in double precision; `t` is the 1-based step.
fn adam_update(
    state: &mut ModelState,
    grads: &Gradients<f32>,
    prefixes: &[&str],
    lr: f64,
    cfg: &TrainConfig,
    t: u64,
) -> Result<()> {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let names: Vec<String> = state
        .params
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .cloned()
        .collect();
    for name in names {
        let Some(grad) = grads.param(&name) else { continue };
        let m = state.adam_m.get_mut(&name).expect("moment per parameter").data_mut();
        let v = state.adam_v.get_mut(&name).expect("moment per parameter").data_mut();
        let p = state.params.get_mut(&name).expect("listed").data_mut();
        for i in 0..p.len() {
            let gi = grad.data()[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.adam_eps);
            p[i] = (p[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

fn critic_step(
    state: &mut ModelState,
    cfg: &TrainConfig,
    lr: f64,
    prefix: &str,
    t: u64,
    forward: impl Fn(&mut Graph<f32>, &ParamStore<f32>, &SpectralState<f32>) -> Result<(Var, Var)>,
    name: &str,
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let (real, fake) = forward(&mut g, &state.params, &state.spectral)?;
    let loss = lsgan_disc(&mut g, real, fake)?;
    let value = finite(name, g.value(loss).item() as f64)?;
    let grads = g.backward(loss)?;
    adam_update(state, &grads, &[prefix], lr, cfg, t)?;
    Ok(value)
}

/// One full training step. On error `state` is left untouched.
pub fn train_step(
    models: &Models,
    state: &mut ModelState,
    batch: &StepBatch,
    loss: &LossWeights,
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    Ok(train_step_traced(models, state, batch, loss, cfg)?.record)
}

/// A step's loss record with the hard patch selections of both list
/// generator passes (real images first, then rendered prior lists).
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub record: LossRecord,
    pub selections: Vec<Vec<usize>>,
}

pub fn train_step_traced(
    models: &Models,
    state: &mut ModelState,
    batch: &StepBatch,
    loss: &LossWeights,
    cfg: &TrainConfig,
) -> Result<StepTrace> {
    let mcfg = models.cfg();
    let n = batch.images.len();
    if n == 0 || batch.lists.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: batch.lists.len(),
        });
    }
    let k = mcfg.k;
    if batch.lists.iter().any(|l| l.len() != k || l.eta_dim() != mcfg.eta_dim) {
        return Err(Error::InvalidArgument(format!(
            "list batch must hold {k} rows with {} features each",
            mcfg.eta_dim
        )));
    }
    let (h, w) = (batch.images[0].height, batch.images[0].width);
    let mut next = state.clone();
    let t = state.step + 1;
    let lr_gen = cfg.lr;
    let lr_critic = warmup_lr(cfg.disc_lr, state.step, cfg.warmup_steps);
    let seed = |i: u64| derive_seed(batch.seed, &[i]);

    // generator forward passes
    let mut g = Graph::<f32>::new();
    let real_img = g.constant(ImageTensor::batch_to_nchw(&batch.images)?);
    let real_list = g.constant(ObjectList::batch_to_tensor(&batch.lists)?);
    let fwd = models.list_gen.forward(&mut g, &state.params, real_img, k, seed(0))?;
    let fake_list = fwd.list;
    check_finite(&g, fake_list, "adv_list")?;
    let cyc_img = models.image_gen.forward(&mut g, &state.params, fake_list, h, w, seed(1))?;
    check_finite(&g, cyc_img, "cycle_image")?;
    let fake_img = models.image_gen.forward(&mut g, &state.params, real_list, h, w, seed(2))?;
    check_finite(&g, fake_img, "adv_image")?;
    let back = models.list_gen.forward(&mut g, &state.params, fake_img, k, seed(3))?;
    check_finite(&g, back.list, "cycle_list")?;

    // critics on detached fakes
    let real_img_t = g.value(real_img).clone();
    let fake_img_t = g.value(fake_img).clone();
    let critic_image = critic_step(
        &mut next,
        cfg,
        lr_critic,
        IMAGE_CRITIC_PREFIX,
        t,
        |cg, p, s| {
            let r = cg.constant(real_img_t.clone());
            let f = cg.constant(fake_img_t.clone());
            Ok((
                models.image_critic.forward(cg, p, s, r)?,
                models.image_critic.forward(cg, p, s, f)?,
            ))
        },
        "critic_image",
    )?;
    let real_list_t = g.value(real_list).clone();
    let fake_list_t = g.value(fake_list).clone();
    let critic_list = critic_step(
        &mut next,
        cfg,
        lr_critic,
        LIST_CRITIC_PREFIX,
        t,
        |cg, p, s| {
            let r = cg.constant(real_list_t.clone());
            let f = cg.constant(fake_list_t.clone());
            Ok((
                models.list_critic.forward(cg, p, s, r)?,
                models.list_critic.forward(cg, p, s, f)?,
            ))
        },
        "critic_list",
    )?;

    // generator objective against the updated critics
    let d_img = models.image_critic.forward(&mut g, &next.params, &next.spectral, fake_img)?;
    let adv_image = lsgan_gen(&mut g, d_img);
    let d_list = models.list_critic.forward(&mut g, &next.params, &next.spectral, fake_list)?;
    let adv_list = lsgan_gen(&mut g, d_list);
    let cycle_image = image_cycle_loss(&mut g, real_img, cyc_img)?;
    let targets: Vec<f64> = batch
        .lists
        .iter()
        .flat_map(|l| build_scorer_target(l, &back.geometry))
        .collect();
    let targets = Tensor::from_f64(&[n, back.geometry.count()], &targets)?;
    let cycle_list = list_cycle_loss(
        &mut g,
        &batch.lists,
        back.list,
        back.scores,
        &targets,
        &CostScale::from_geometry(&back.geometry),
        ListLossWeights {
            lambda_pres: loss.pres,
            lambda_loc: loss.loc,
        },
    )?;
    let parts = GeneratorParts {
        dis_l: adv_list,
        dis_i: adv_image,
        cyc_i: cycle_image,
        cyc_l: cycle_list,
    };
    let total = total_generator_loss(&mut g, parts, loss)?;
    let val = |g: &Graph<f32>, v: Var| g.value(v).item() as f64;
    let record = LossRecord {
        step: t,
        critic_image,
        critic_list,
        adv_image: finite("adv_image", val(&g, adv_image))?,
        adv_list: finite("adv_list", val(&g, adv_list))?,
        cycle_image: finite("cycle_image", val(&g, cycle_image))?,
        cycle_list: finite("cycle_list", val(&g, cycle_list))?,
        total: finite("total", val(&g, total))?,
        lr_gen,
        lr_critic,
    };
    let grads = g.backward(total)?;
    adam_update(&mut next, &grads, &GENERATOR_PREFIXES, lr_gen, cfg, t)?;
    refresh_spectral(&next.params, &mut next.spectral, 1);
    next.step = t;
    *state = next;
    Ok(StepTrace {
        record,
        selections: fwd.selected.into_iter().chain(back.selected).collect(),
    })
}

/// Image-domain data: a fixed pool of scenes sampled uniformly per step.
pub struct TrainData<'a> {
    pub images: &'a [ImageTensor],
    pub scene: &'a SceneSpec,
}

/// The batch used at `step` (0-based) of a run.
pub fn batch_for_step(models: &Models, cfg: &TrainConfig, data: &TrainData, step: u64) -> Result<StepBatch> {
    if data.images.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one image".into()));
    }
    let (h, w) = (data.images[0].height, data.images[0].width);
    if data.images.iter().any(|i| i.height != h || i.width != w) {
        return Err(Error::InvalidArgument("training images must share one size".into()));
    }
    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[step, 10]));
    let images = (0..cfg.batch)
        .map(|_| data.images[pick.random_range(0..data.images.len())].clone())
        .collect();
    let geometry = models.list_gen.geometry(h, w)?;
    let mut prior = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[step, 11]));
    let lists = (0..cfg.batch)
        .map(|_| sample_list_prior(data.scene, &geometry, models.cfg().eta_dim, &mut prior))
        .collect::<Result<_>>()?;
    Ok(StepBatch {
        images,
        lists,
        seed: derive_seed(cfg.seed, &[step, 12]),
    })
}

/// Runs steps until `state.step == until`, calling `on_step` after each.
pub fn train(
    models: &Models,
    state: &mut ModelState,
    run: &RunConfig,
    data: &TrainData,
    until: u64,
    mut on_step: impl FnMut(&ModelState, &LossRecord) -> Result<()>,
) -> Result<()> {
    while state.step < until {
        let batch = batch_for_step(models, &run.train, data, state.step)?;
        let record = train_step(models, state, &batch, &run.loss, &run.train)?;
        on_step(state, &record)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
