use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::ModelConfig;

fn pts(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| (rng.random_range(0.0..extent), rng.random_range(0.0..extent)))
        .collect()
}

/// Largest number of disjoint pairs within `tau`, by exhaustive search.
fn brute_max_matching(pred: &[(f64, f64)], gt: &[(f64, f64)], tau: f64) -> usize {
    fn go(i: usize, pred: &[(f64, f64)], gt: &[(f64, f64)], used: &mut Vec<bool>, tau: f64) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, gt, used, tau);
        for j in 0..gt.len() {
            let d = (pred[i].0 - gt[j].0).hypot(pred[i].1 - gt[j].1);
            if !used[j] && d <= tau {
                used[j] = true;
                best = best.max(1 + go(i + 1, pred, gt, used, tau));
                used[j] = false;
            }
        }
        best
    }
    go(0, pred, gt, &mut vec![false; gt.len()], tau)
}

#[test]
fn prf1_examples() {
    assert_eq!(prf1(1, 0, 0), (1.0, 1.0, 1.0));
    let (p, r, f) = prf1(2, 2, 0);
    assert_eq!((p, r), (0.5, 1.0));
    assert!((f - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(prf1(0, 0, 0), (0.0, 0.0, 0.0));
}

#[test]
fn perfect_and_empty_predictions() {
    let gt = vec![(3.0, 4.0), (10.0, 10.0), (20.0, 5.0)];
    let r = match_points(&gt, &gt, 2.0).unwrap();
    assert_eq!(r.prf1(), (1.0, 1.0, 1.0));
    let r = match_points(&[], &gt, 2.0).unwrap();
    assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 3));
    assert_eq!(r.prf1(), (0.0, 0.0, 0.0));
    assert!(match_points(&gt, &gt, 0.0).is_err());
}

#[test]
fn matching_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (np, ng) = (rng.random_range(0..7), rng.random_range(0..7));
        let pred = pts(&mut rng, np, 20.0);
        let gt = pts(&mut rng, ng, 20.0);
        let tau = rng.random_range(1.0..8.0);
        let r = match_points(&pred, &gt, tau).unwrap();
        assert_eq!(r.tp, brute_max_matching(&pred, &gt, tau));
        assert_eq!(r.tp + r.fn_, ng);
        assert_eq!(r.tp + r.fp, np);
        assert!(r.pairs.iter().all(|p| p.2 <= tau));
    }
}

#[test]
fn matching_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let pred = pts(&mut rng, 5, 15.0);
        let gt = pts(&mut rng, 4, 15.0);
        let a = match_points(&pred, &gt, 3.0).unwrap();
        let b = match_points(&gt, &pred, 3.0).unwrap();
        assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fn_, b.fp));
    }
}

proptest! {
    #[test]
    fn f1_ignores_row_order(seed in 0u64..10_000, shift in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = pts(&mut rng, 6, 12.0);
        let gt = pts(&mut rng, 5, 12.0);
        let mut p2 = pred.clone();
        p2.rotate_left(shift);
        let mut g2 = gt.clone();
        g2.reverse();
        let a = match_points(&pred, &gt, 3.0).unwrap();
        let b = match_points(&p2, &g2, 3.0).unwrap();
        prop_assert_eq!(a.prf1(), b.prf1());
    }
}

#[test]
fn list_matching_uses_presence_threshold() {
    let geom = PatchGeometry::new(32, 32, 8, 2).unwrap();
    let at = |x: f64, y: f64, a: f64| {
        let (nx, ny) = geom.from_image_pixels(x, y);
        ObjectEntry::new(nx, ny, a, vec![])
    };
    let gt = ObjectList::new(vec![at(5.0, 5.0, 1.0), at(20.0, 20.0, 1.0), at(9.0, 9.0, 0.0)]);
    let pred = ObjectList::new(vec![at(6.0, 5.0, 0.9), at(9.0, 9.0, 0.4), at(30.0, 2.0, 0.6)]);
    let r = match_detections(&pred, &gt, &geom, 2.0).unwrap();
    assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 1));
    assert!((r.pairs[0].2 - 1.0).abs() < 1e-9);
}

#[test]
fn dbi_hand_case() {
    let f = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
    let dbi = davies_bouldin(&f, &[0, 0, 1, 1]).unwrap();
    assert!((dbi - 0.1).abs() < 1e-12);
    let tight = vec![vec![0.0], vec![0.0], vec![1e6], vec![1e6]];
    assert_eq!(davies_bouldin(&tight, &[3, 3, 8, 8]).unwrap(), 0.0);
}

/// Textbook form: R_ij = (S_i + S_j) / M_ij, D_i = max_j R_ij, DBI = mean D_i.
fn dbi_oracle(features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let groups: std::collections::BTreeMap<usize, Vec<DVector<f64>>> =
        labels.iter().zip(features).fold(Default::default(), |mut m, (&l, f)| {
            m.entry(l).or_insert_with(Vec::new).push(DVector::from_vec(f.clone()));
            m
        });
    let stats: Vec<(DVector<f64>, f64)> = groups
        .values()
        .map(|members| {
            let c = members.iter().fold(DVector::zeros(members[0].len()), |a, b| a + b) / members.len() as f64;
            let s = members.iter().map(|m| (m - &c).norm()).sum::<f64>() / members.len() as f64;
            (c, s)
        })
        .collect();
    let d: Vec<f64> = (0..stats.len())
        .map(|i| {
            (0..stats.len())
                .filter(|&j| j != i)
                .map(|j| (stats[i].1 + stats[j].1) / (&stats[i].0 - &stats[j].0).norm())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    d.iter().sum::<f64>() / d.len() as f64
}

#[test]
fn dbi_matches_textbook_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let n = rng.random_range(4..40);
        let dim = rng.random_range(1..6);
        let groups = rng.random_range(2..5);
        let labels: Vec<usize> = (0..n).map(|i| if i < groups { i } else { rng.random_range(0..groups) }).collect();
        let f: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let got = davies_bouldin(&f, &labels).unwrap();
        assert!((got - dbi_oracle(&f, &labels)).abs() < 1e-6);
    }
}

#[test]
fn dbi_is_similarity_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let f: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let (th, c, t) = (rng.random_range(0.0..6.3f64), rng.random_range(0.1..10.0), (3.0, -7.0));
        let g: Vec<Vec<f64>> = f
            .iter()
            .map(|v| {
                let (x, y) = (v[0] * th.cos() - v[1] * th.sin(), v[0] * th.sin() + v[1] * th.cos());
                vec![c * x + t.0, c * y + t.1]
            })
            .collect();
        let (a, b) = (davies_bouldin(&f, &labels).unwrap(), davies_bouldin(&g, &labels).unwrap());
        assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }
}

#[test]
fn dbi_rejects_degenerate_input() {
    assert!(davies_bouldin(&[vec![1.0], vec![2.0]], &[0, 0]).is_err());
    assert!(davies_bouldin(&[vec![1.0]], &[0, 1]).is_err());
    assert!(davies_bouldin(&[vec![1.0], vec![1.0]], &[0, 1]).is_err());
    assert!(davies_bouldin(&[vec![1.0], vec![1.0, 2.0]], &[0, 1]).is_err());
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        patch: 8,
        pad: 2,
        k: 3,
        eta_dim: 3,
        scorer_width: 4,
        feature_width: 4,
        unet_width: 4,
        ..ModelConfig::default()
    }
}

fn nets() -> (ListGenerator, ImageGenerator, ParamStore<f32>) {
    let cfg = small_cfg();
    let (gl, gi) = (ListGenerator::new(cfg.clone()), ImageGenerator::new(cfg));
    let mut store = gl.init(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    store.extend(gi.init(&mut ChaCha8Rng::seed_from_u64(2)).unwrap()).unwrap();
    (gl, gi, store)
}

fn centred(gi: &ImageGenerator, eta: Vec<f64>, k: usize, n: usize) -> ObjectList {
    let geom = PatchGeometry::new(n, n, gi.cfg.patch, gi.cfg.pad).unwrap();
    let (cx, cy) = geom.from_image_pixels((n as f64 - 1.0) / 2.0, (n as f64 - 1.0) / 2.0);
    let mut rows = vec![ObjectEntry::new(cx, cy, 1.0, eta)];
    rows.extend((1..k).map(|_| ObjectEntry::new(cx, cy, 0.0, vec![0.5; 3])));
    ObjectList::new(rows)
}

#[test]
fn sweep_grid_contract() {
    let (_, gi, store) = nets();
    let one = latent_sweep(&gi, &store, (0, 1), 1, 3, 16, 16, 4).unwrap();
    let direct = gi.render_image(&store, &centred(&gi, vec![0.5; 3], 3, 16), 16, 16, 4).unwrap();
    assert_eq!(one, direct);

    let grid = latent_sweep(&gi, &store, (0, 2), 3, 3, 16, 16, 4).unwrap();
    assert_eq!((grid.height, grid.width), (48, 48));
    let corner = gi.render_image(&store, &centred(&gi, vec![1.0, 0.5, 0.0], 3, 16), 16, 16, 4).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            assert_eq!(grid.pixel(32 + y, x), corner.pixel(y, x));
        }
    }
    assert_eq!(grid, latent_sweep(&gi, &store, (0, 2), 3, 3, 16, 16, 4).unwrap());
    assert!(latent_sweep(&gi, &store, (1, 1), 3, 3, 16, 16, 4).is_err());
}

fn random_image(n: usize, seed: u64) -> ImageTensor {
    let t = crate::tensor::Tensor::<f32>::randn(&[1, 3, n, n], seed).map(|v| v.tanh());
    ImageTensor::from_nchw(&t).unwrap().remove(0)
}

#[test]
fn identity_edit_equals_plain_cycle() {
    let (gl, gi, store) = nets();
    let img = random_image(24, 3);
    let (list, out) = manipulate_and_render(&gl, &gi, &store, &img, 3, &Edit::Identity, 9).unwrap();
    let plain_list = gl.generate_list(&store, &img, 3, 9).unwrap();
    assert_eq!(list, plain_list);
    assert_eq!(out, gi.render_image(&store, &plain_list, 24, 24, 9).unwrap());
}

#[test]
fn edits_behave_as_defined() {
    let geom = PatchGeometry::new(32, 32, 8, 2).unwrap();
    let list = ObjectList::new(vec![
        ObjectEntry::new(0.2, 0.3, 1.0, vec![0.1, 0.2]),
        ObjectEntry::new(0.7, 0.4, 0.9, vec![0.3, 0.4]),
        ObjectEntry::new(0.5, 0.8, 0.8, vec![0.5, 0.6]),
        ObjectEntry::new(0.1, 0.1, 0.1, vec![0.7, 0.8]),
    ]);
    let swap = |l: &ObjectList| apply_edit(l, &Edit::CyclicEtaSwap, &geom).unwrap();
    let once = swap(&list);
    assert_ne!(once, list);
    assert_eq!(once.entries[3], list.entries[3]);
    assert_eq!(swap(&swap(&once)), list);

    let moved = apply_edit(&list, &Edit::TranslateTowardCenter(0.0), &geom).unwrap();
    let c = geom.from_image_pixels(15.5, 15.5);
    for e in moved.active(PRESENCE) {
        assert!((e.x - c.0).abs() < 1e-12 && (e.y - c.1).abs() < 1e-12);
    }
    assert_eq!(moved.entries[3], list.entries[3]);

    let edited = apply_edit(&list, &Edit::parse(r#"rows:[{"index":1,"alpha":0.0}]"#).unwrap(), &geom).unwrap();
    assert_eq!(edited.entries[1].alpha, 0.0);
    assert_eq!(Edit::parse("translate:0.5").unwrap(), Edit::TranslateTowardCenter(0.5));
    for bad in ["rotate", "translate:x", "swap:2", ""] {
        assert!(matches!(Edit::parse(bad), Err(Error::UnknownEdit(_))), "{bad}");
    }
}
