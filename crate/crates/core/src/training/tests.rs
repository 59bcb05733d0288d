use super::*;
use crate::scenes::{gen_scene, SceneKind};

fn tiny_run() -> RunConfig {
    let scene = SceneSpec {
        kind: SceneKind::Tetrominoes,
        height: 16,
        width: 16,
        k: 2,
        count_weights: vec![0.0, 1.0, 1.0],
        min_distance: 5.0,
        palette: vec![[230, 40, 40], [40, 200, 60]],
        background: [0, 0, 0],
        block: 2,
        shapes: vec![],
        sizes: vec![],
    };
    RunConfig {
        model: ModelConfig {
            patch: 8,
            pad: 2,
            k: 2,
            eta_dim: 2,
            scorer_width: 4,
            feature_width: 4,
            unet_width: 4,
            patchgan_width: 4,
            list_disc_width: 8,
            topk_samples: 2,
            ..ModelConfig::default()
        },
        scene,
        loss: LossWeights::default(),
        train: TrainConfig {
            batch: 2,
            warmup_steps: 4,
            ..TrainConfig::default()
        },
        dataset: None,
        out: None,
    }
}

fn pool(run: &RunConfig, n: u64) -> Vec<ImageTensor> {
    (0..n)
        .map(|i| gen_scene(&run.scene, &mut ChaCha8Rng::seed_from_u64(i)).unwrap().image)
        .collect()
}

fn scalar(g: &mut Graph<f64>, v: f64) -> Var {
    g.input(Tensor::scalar(v))
}

#[test]
fn lsgan_examples() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(Tensor::full(&[2, 3], 1.0));
    let zeros = g.constant(Tensor::zeros(&[2, 3]));
    let (gen, _) = lsgan_losses(&mut g, zeros, ones).unwrap();
    assert_eq!(g.value(gen).item(), 0.0);
    let (_, disc) = lsgan_losses(&mut g, ones, zeros).unwrap();
    assert_eq!(g.value(disc).item(), 0.0);
    let (_, disc) = lsgan_losses(&mut g, zeros, ones).unwrap();
    assert_eq!(g.value(disc).item(), 1.0);
}

#[test]
fn image_cycle_loss_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::randn(&[2, 3, 4, 5], 1));
    let b = g.add_scalar(a, 0.5);
    let same = image_cycle_loss(&mut g, a, a).unwrap();
    assert_eq!(g.value(same).item(), 0.0);
    let half = image_cycle_loss(&mut g, a, b).unwrap();
    assert!((g.value(half).item() - 0.5).abs() < 1e-12);

    let c = g.constant(Tensor::randn(&[2, 3, 4, 5], 2));
    let l = image_cycle_loss(&mut g, a, c).unwrap();
    let (x, y) = (g.value(a).data().to_vec(), g.value(c).data().to_vec());
    let oracle = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64;
    assert!((g.value(l).item() - oracle).abs() < 1e-7);

    let d = g.constant(Tensor::zeros(&[2, 3, 4, 4]));
    assert!(image_cycle_loss(&mut g, a, d).is_err());
}

fn parts_of(g: &mut Graph<f64>, vals: [f64; 4]) -> GeneratorParts {
    GeneratorParts {
        dis_l: scalar(g, vals[0]),
        dis_i: scalar(g, vals[1]),
        cyc_i: scalar(g, vals[2]),
        cyc_l: scalar(g, vals[3]),
    }
}

#[test]
fn total_generator_loss_examples() {
    let mut g = Graph::<f64>::new();
    let p = parts_of(&mut g, [0.5, 0.25, 0.1, 0.2]);
    let w = LossWeights {
        dis_l: 1.0,
        dis_i: 2.0,
        cyc_i: 10.0,
        cyc_l: 10.0,
        ..LossWeights::default()
    };
    let t = total_generator_loss(&mut g, p, &w).unwrap();
    assert!((g.value(t).item() - 4.0).abs() < 1e-12);

    let ones = LossWeights {
        dis_l: 1.0,
        dis_i: 1.0,
        cyc_i: 1.0,
        cyc_l: 1.0,
        ..LossWeights::default()
    };
    let t = total_generator_loss(&mut g, p, &ones).unwrap();
    assert!((g.value(t).item() - 1.05).abs() < 1e-12);
    let zero = LossWeights {
        dis_l: 0.0,
        dis_i: 0.0,
        cyc_i: 0.0,
        cyc_l: 0.0,
        ..LossWeights::default()
    };
    let t = total_generator_loss(&mut g, p, &zero).unwrap();
    assert_eq!(g.value(t).item(), 0.0);
}

#[test]
fn total_loss_gradient_is_weighted_sum_of_part_gradients() {
    let w = LossWeights {
        dis_l: 0.5,
        dis_i: 2.0,
        cyc_i: 4.0,
        cyc_l: 0.25,
        ..LossWeights::default()
    };
    let x0 = Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap();
    let build = |g: &mut Graph<f64>| {
        let x = g.input(x0.clone());
        let sq = g.square(x);
        let a = g.sum(sq);
        let b = g.sum(x);
        let c = g.mul(x, sq).unwrap();
        let c = g.sum(c);
        let d = g.scale(a, 3.0);
        (x, [a, b, c, d])
    };
    let mut g = Graph::<f64>::new();
    let (x, p) = build(&mut g);
    let parts = GeneratorParts {
        dis_l: p[0],
        dis_i: p[1],
        cyc_i: p[2],
        cyc_l: p[3],
    };
    let t = total_generator_loss(&mut g, parts, &w).unwrap();
    let total_grad = g.backward(t).unwrap().wrt(x);
    let lambdas = [w.dis_l, w.dis_i, w.cyc_i, w.cyc_l];
    let mut expect = [0.0; 3];
    for (i, &lambda) in lambdas.iter().enumerate() {
        let mut g = Graph::<f64>::new();
        let (x, p) = build(&mut g);
        let gr = g.backward(p[i]).unwrap().wrt(x);
        for j in 0..3 {
            expect[j] += lambda * gr.data()[j];
        }
    }
    assert_eq!(total_grad.data(), &expect);
}

#[test]
fn warmup_examples() {
    assert_eq!(warmup_lr(2e-4, 0, 2000), 0.0);
    assert_eq!(warmup_lr(2e-4, 1000, 2000), 1e-4);
    assert_eq!(warmup_lr(2e-4, 2000, 2000), 2e-4);
    assert_eq!(warmup_lr(2e-4, 5000, 2000), 2e-4);
}

fn setup(run: &RunConfig) -> (Models, ModelState) {
    let models = Models::new(&run.model);
    let state = ModelState::init(&models, &run.train).unwrap();
    (models, state)
}

#[test]
fn step_is_deterministic() {
    let run = tiny_run();
    let images = pool(&run, 8);
    let data = TrainData {
        images: &images,
        scene: &run.scene,
    };
    let go = || {
        let (models, mut state) = setup(&run);
        let mut records = vec![];
        train(&models, &mut state, &run, &data, 3, |_, r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
        (state, records)
    };
    let (a, ra) = go();
    let (b, rb) = go();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(a.step, 3);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut run = tiny_run();
    run.train.lr = 0.0;
    run.train.disc_lr = 0.0;
    let images = pool(&run, 4);
    let data = TrainData {
        images: &images,
        scene: &run.scene,
    };
    let (models, mut state) = setup(&run);
    let before = state.params.clone();
    train(&models, &mut state, &run, &data, 2, |_, _| Ok(())).unwrap();
    assert_eq!(state.params, before);
}

#[test]
fn first_step_reaches_every_parameter() {
    let mut run = tiny_run();
    run.train.warmup_steps = 1;
    let images = pool(&run, 4);
    let data = TrainData {
        images: &images,
        scene: &run.scene,
    };
    let (models, mut state) = setup(&run);
    let batch = batch_for_step(&models, &run.train, &data, 0).unwrap();
    let rec = train_step(&models, &mut state, &batch, &run.loss, &run.train).unwrap();
    for v in [rec.critic_image, rec.critic_list, rec.adv_image, rec.adv_list, rec.cycle_image, rec.cycle_list] {
        assert!(v.is_finite());
    }
    // a parameter received a gradient iff its first moment moved
    for (name, m) in state.adam_m.iter() {
        assert!(m.data().iter().any(|&x| x != 0.0), "no gradient reached `{name}`");
    }
    assert_eq!(rec.lr_critic, 0.0);
    assert_eq!(rec.lr_gen, run.train.lr);
}

#[test]
fn non_finite_loss_names_the_term_and_keeps_state() {
    let run = tiny_run();
    let images = pool(&run, 4);
    let data = TrainData {
        images: &images,
        scene: &run.scene,
    };
    let (models, mut state) = setup(&run);
    state.params.get_mut("gi.out.b").unwrap().data_mut()[0] = f32::NAN;
    let before = state.clone();
    let batch = batch_for_step(&models, &run.train, &data, 0).unwrap();
    let err = train_step(&models, &mut state, &batch, &run.loss, &run.train).unwrap_err();
    match err {
        Error::NonFiniteLoss(term) => assert_eq!(term, "cycle_image"),
        e => panic!("unexpected error {e}"),
    }
    assert_eq!(state.step, before.step);
    assert!(state.params.get("gi.out.b").unwrap().data()[0].is_nan());
}

#[test]
fn pure_reconstruction_decreases_cycle_losses() {
    let mut run = tiny_run();
    run.model.topk_noise = 0.0;
    run.loss.dis_l = 0.0;
    run.loss.dis_i = 0.0;
    run.train.disc_lr = 0.0;
    run.train.lr = 2e-4;
    let images = pool(&run, 4);
    let data = TrainData {
        images: &images,
        scene: &run.scene,
    };
    let (models, mut state) = setup(&run);
    let batch = batch_for_step(&models, &run.train, &data, 0).unwrap();
    // Changes of the hard patch selection are discontinuities of the
    // objective; only rises between steps with equal selections count.
    let mut losses = vec![];
    let mut selections = vec![];
    for _ in 0..200 {
        let t = train_step_traced(&models, &mut state, &batch, &run.loss, &run.train).unwrap();
        losses.push(t.record.cycle_image + t.record.cycle_list);
        selections.push(t.selections);
    }
    let rises = (1..200)
        .filter(|&i| selections[i] == selections[i - 1] && losses[i] > losses[i - 1])
        .count();
    let switches = (1..200).filter(|&i| selections[i] != selections[i - 1]).count();
    assert!(rises <= 10, "{rises} non-monotone steps ({switches} selection changes)");
    assert!(losses[199] < losses[0]);
}
