use super::graph::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences, coordinate by coordinate, and returns the worst relative
/// error. `f` must be deterministic; it receives a fresh graph and the input
/// leaf on every call.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    let analytic = g.backward(loss)?.wrt(xv);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - step;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// `Σ r ⊙ op(x)` with a fixed random `r`, as a scalar loss.
fn weighted<'a>(
    op: &'a dyn Fn(&mut Graph<f64>, Var) -> Result<Var>,
    out_seed: u64,
) -> impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'a {
    move |g: &mut Graph<f64>, x: Var| {
        let y = op(g, x)?;
        let r = g.noise(&g.shape(y).to_vec(), out_seed);
        let p = g.mul(y, r)?;
        Ok(g.sum(p))
    }
}

/// Worst relative error of every differentiable op against central
/// differences (step 1e-5), each probed at random points until at least 100
/// coordinates have been compared. `select_topk` is absent: its forward is
/// piecewise constant and its backward is an estimator, not a derivative.
pub fn op_gradient_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let mut check = |name: &'static str, shape: &[usize], op: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>| -> Result<()> {
        let (mut probes, mut seed, mut worst) = (0, 11, 0.0f64);
        while probes < 100 {
            let x = Tensor::randn(shape, seed);
            worst = worst.max(grad_check(weighted(op, seed + 1000), &x, 1e-5)?);
            probes += x.len();
            seed += 1;
        }
        out.push((name, worst));
        Ok(())
    };

    check("add", &[3, 4], &|g, x| {
        let c = g.noise(&[3, 4], 5);
        g.add(x, c)
    })?;
    check("sub", &[3, 4], &|g, x| {
        let c = g.noise(&[3, 4], 5);
        g.sub(c, x)
    })?;
    check("mul", &[3, 4], &|g, x| {
        let t = g.tanh(x);
        g.mul(x, t)
    })?;
    check("add_bias", &[2, 3, 2, 2], &|g, x| {
        let b = g.slice_last(x, 0, 1)?;
        let b = g.reshape(b, &[2, 3, 2])?;
        let b = g.mean_axis(b, 0)?;
        let b = g.mean_axis(b, 1)?;
        g.add_bias(x, b, 1)
    })?;
    check("scale_rows", &[4, 3], &|g, x| {
        let s = g.sum_axis(x, 1)?;
        g.scale_rows(x, s)
    })?;
    check("scale/add_scalar", &[5], &|g, x| {
        let y = g.scale(x, -2.5);
        Ok(g.add_scalar(y, 0.3))
    })?;
    check("relu", &[50], &|g, x| Ok(g.relu(x)))?;
    check("leaky_relu", &[50], &|g, x| Ok(g.leaky_relu(x, 0.2)))?;
    check("sigmoid", &[50], &|g, x| Ok(g.sigmoid(x)))?;
    check("tanh", &[50], &|g, x| Ok(g.tanh(x)))?;
    check("exp", &[50], &|g, x| Ok(g.exp(x)))?;
    check("abs", &[50], &|g, x| Ok(g.abs(x)))?;
    check("square", &[50], &|g, x| Ok(g.square(x)))?;
    check("sqrt", &[50], &|g, x| {
        let s = g.square(x);
        let s = g.add_scalar(s, 0.5);
        Ok(g.sqrt(s))
    })?;
    check("clamp", &[50], &|g, x| Ok(g.clamp(x, -0.7, 0.9)))?;
    check("matmul shared", &[2, 3, 4], &|g, x| {
        let b = g.noise(&[4, 5], 3);
        g.matmul(x, b)
    })?;
    check("matmul batched", &[2, 3, 4], &|g, x| {
        let t = g.transpose_last2(x)?;
        g.matmul(x, t)
    })?;
    check("conv2d", &[2, 3, 6, 5], &|g, x| {
        let w = g.noise(&[4, 3, 3, 3], 8);
        g.conv2d(x, w, 2, 1)
    })?;
    check("conv2d weight", &[4, 2, 3, 3], &|g, w| {
        let x = g.noise(&[2, 2, 7, 7], 8);
        g.conv2d(x, w, 1, 0)
    })?;
    check("upsample", &[1, 2, 3, 3], &|g, x| g.upsample_nearest(x, 7, 5))?;
    check("concat", &[2, 3, 2], &|g, x| {
        let t = g.tanh(x);
        g.concat(&[x, t, x], 1)
    })?;
    check("softmax", &[4, 5], &|g, x| Ok(g.softmax_last(x)))?;
    check("sum/mean", &[3, 3], &|g, x| {
        let a = g.sum(x);
        let b = g.mean(x);
        let c = g.mul(a, b)?;
        Ok(c)
    })?;
    check("sum_axis", &[2, 3, 4], &|g, x| g.sum_axis(x, 1))?;
    check("mean_axis", &[2, 3, 4], &|g, x| g.mean_axis(x, 2))?;
    check("max_pool2", &[2, 2, 5, 4], &|g, x| g.max_pool2(x))?;
    check("instance_norm", &[2, 3, 4, 4], &|g, x| g.instance_norm(x, 1e-5))?;
    check("reshape", &[2, 6], &|g, x| {
        let y = g.reshape(x, &[3, 4])?;
        let t = g.noise(&[4, 2], 1);
        g.matmul(y, t)
    })?;
    check("permute", &[2, 3, 4], &|g, x| {
        let y = g.permute(x, &[2, 0, 1])?;
        let s = g.tanh(y);
        g.mul(y, s)
    })?;
    check("extract_patches", &[1, 2, 6, 7], &|g, x| g.extract_patches(x, 3, 2, 1))?;
    check("splat", &[2, 3, 2], &|g, p| {
        let p = g.scale(p, 2.0);
        let p = g.add_scalar(p, 4.0);
        let w = g.noise(&[2, 3, 2], 4);
        g.splat(p, w, 8, 9, 1.3)
    })?;
    check("splat weights", &[2, 3, 2], &|g, w| {
        let p = g.constant(Tensor::from_f64(&[2, 3, 2], &[1.0, 2.0, 5.5, 3.0, 2.2, 6.0, 4.0, 4.0, 0.5, 0.5, 7.0, 1.0]).unwrap());
        g.splat(p, w, 8, 9, 1.1)
    })?;
    check("spectral_norm", &[3, 4], &|g, w| {
        let u = [0.6, 0.0, 0.8];
        let v = [0.5, 0.5, 0.5, 0.5];
        g.spectral_norm(w, &u, &v)
    })?;
    check("gather_rows", &[2, 3, 2], &|g, x| {
        let y = g.gather_rows(x, vec![vec![2, 0, 1], vec![1, 1, 0]])?;
        let t = g.tanh(y);
        g.mul(y, t)
    })?;
    check("pairwise_diff", &[2, 3, 2], &|g, x| g.pairwise_diff(x))?;
    check("slice_last", &[3, 5], &|g, x| g.slice_last(x, 1, 3))?;
    check("normalize_last", &[4, 3], &|g, x| Ok(g.normalize_last(x)))?;
    Ok(out)
}
