use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, seed)
}

/// `Σ r ⊙ op(x)` with a fixed random `r`, as a scalar loss.
fn weighted<F>(op: F, out_seed: u64) -> impl Fn(&mut Graph<f64>, Var) -> crate::Result<Var>
where
    F: Fn(&mut Graph<f64>, Var) -> crate::Result<Var>,
{
    move |g: &mut Graph<f64>, x: Var| {
        let y = op(g, x)?;
        let r = g.noise(&g.shape(y).to_vec(), out_seed);
        let p = g.mul(y, r)?;
        Ok(g.sum(p))
    }
}

#[test]
fn square_gradient_at_three() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).item(), 6.0);
}

#[test]
fn sum_gives_ones_and_zero_scale_gives_zeros() {
    let mut g = Graph::<f64>::new();
    let w = g.input(rand_t(&[3, 4], 1));
    let s = g.sum(w);
    assert!(g.backward(s).unwrap().wrt(w).data().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f64>::new();
    let w = g.input(rand_t(&[3, 4], 1));
    let z = g.scale(w, 0.0);
    let s = g.sum(z);
    assert!(g.backward(s).unwrap().wrt(w).data().iter().all(|&v| v == 0.0));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.input(rand_t(&[2], 1));
    let b = g.input(rand_t(&[5], 2));
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert!(!grads.reached(b));
    assert_eq!(grads.wrt(b).data(), &[0.0; 5]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let a = g.input(rand_t(&[2], 1));
    assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut g = Graph::<f64>::new();
    let a = g.input(rand_t(&[2], 1));
    let b = g.input(rand_t(&[3], 1));
    match g.add(a, b) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "add");
            assert!(detail.contains("[2]") && detail.contains("[3]"));
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn identity_one_by_one_conv_is_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_t(&[2, 3, 5, 4], 3));
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let w = g.constant(w);
    let y = g.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn linearity_over_two_paths() {
    // d/dx [f(x) + h(x)] == d/dx f(x) + d/dx h(x), exactly
    let x0 = rand_t(&[6], 5);
    let grad_of = |which: u8| {
        let mut g = Graph::<f64>::new();
        let x = g.input(x0.clone());
        let a = g.tanh(x);
        let b = g.square(x);
        let out = match which {
            0 => g.sum(a),
            1 => g.sum(b),
            _ => {
                let c = g.add(a, b).unwrap();
                g.sum(c)
            }
        };
        g.backward(out).unwrap().wrt(x)
    };
    let (ga, gb, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..6 {
        assert_eq!(gc.data()[i], ga.data()[i] + gb.data()[i]);
    }
}

#[test]
fn forward_backward_is_bit_reproducible() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::randn(&[2, 3, 8, 8], 9));
        let w = g.input(Tensor::randn(&[4, 3, 3, 3], 10));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let n = g.noise(&[2, 4, 8, 8], 77);
        let y = g.add(y, n).unwrap();
        let y = g.instance_norm(y, 1e-5).unwrap();
        let s = g.sum(y);
        let sq = g.square(s);
        let gr = g.backward(sq).unwrap();
        (gr.wrt(x), gr.wrt(w))
    };
    assert_eq!(run(), run());
}

#[test]
fn grad_check_of_constant_is_zero() {
    let x = rand_t(&[4], 2);
    let err = grad_check(
        |g, _x| Ok(g.constant(Tensor::scalar(3.5))),
        &x,
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_sigmoid() {
    let x = rand_t(&[20], 4);
    let err = grad_check(weighted(|g, x| Ok(g.sigmoid(x)), 99), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn op_gradients_match_finite_differences() {
    for (name, err) in op_gradient_errors().unwrap() {
        assert!(err < 1e-5, "{name}: relative error {err:e}");
    }
}

#[test]
fn composite_conv_norm_pool_matches_finite_differences() {
    let x = rand_t(&[2, 2, 8, 8], 21);
    let f = |g: &mut Graph<f64>, x: Var| {
        let w1 = g.noise(&[4, 2, 3, 3], 1);
        let y = g.conv2d(x, w1, 1, 1)?;
        let y = g.instance_norm(y, 1e-5)?;
        let y = g.leaky_relu(y, 0.2);
        let y = g.max_pool2(y)?;
        let w2 = g.noise(&[3, 4, 3, 3], 2);
        let y = g.conv2d(y, w2, 2, 1)?;
        let y = g.tanh(y);
        let r = g.noise(g.shape(y).to_vec().as_slice(), 3);
        let p = g.mul(y, r)?;
        Ok(g.sum(p))
    };
    let err = grad_check(f, &x, 1e-5).unwrap();
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn two_layer_perceptron_parameter_gradients() {
    // gradient w.r.t. the first-layer weight through a 2-layer MLP
    let w = rand_t(&[5, 7], 31);
    let f = |g: &mut Graph<f64>, w: Var| {
        let x = g.noise(&[4, 5], 32);
        let h = g.matmul(x, w)?;
        let b = g.noise(&[7], 33);
        let h = g.add_bias(h, b, 1)?;
        let h = g.tanh(h);
        let w2 = g.noise(&[7, 3], 34);
        let o = g.matmul(h, w2)?;
        let o = g.square(o);
        Ok(g.mean(o))
    };
    let err = grad_check(f, &w, 1e-5).unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn noise_source_is_seeded() {
    let mut g = Graph::<f32>::new();
    let a = g.noise(&[10], 3);
    let b = g.noise(&[10], 3);
    let c = g.noise(&[10], 4);
    assert_eq!(g.value(a), g.value(b));
    assert_ne!(g.value(a), g.value(c));
    assert!(!g.requires_grad(a));
}

#[test]
fn param_binding_reuses_leaf() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", rand_t(&[3], 1)).unwrap();
    assert!(store.insert("w", rand_t(&[3], 1)).is_err());
    let mut g = Graph::new();
    let a = g.param(&store, "w").unwrap();
    let b = g.param(&store, "w").unwrap();
    assert_eq!(a, b);
    let s = g.add(a, b).unwrap();
    let s = g.sum(s);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.param("w").unwrap().data(), &[2.0, 2.0, 2.0]);
}
