//! Central finite-difference verification of tape gradients.

use ndarray::ArrayD;

use super::tape::{Tape, Var};

/// Numerical gradient of `f` at `inputs` by central differences.
pub fn finite_diff_grads<B>(build: B, inputs: &[ArrayD<f64>], eps: f64) -> Vec<ArrayD<f64>>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |points: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.scalar_value(out)
    };
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = ArrayD::<f64>::zeros(inputs[i].raw_dim());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += eps;
            minus[i].as_slice_mut().unwrap()[j] -= eps;
            g.as_slice_mut().unwrap()[j] = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Largest elementwise deviation between autodiff and finite differences,
/// normalized by `max(1, |a|, |n|)` so the bound reads as a relative error
/// for large entries and an absolute one near zero.
pub fn max_grad_error<B>(build: B, inputs: &[ArrayD<f64>], eps: f64) -> f64
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var + Copy,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&mut tape, &vars);
    let auto = tape.grad(out, &vars);
    let numeric = finite_diff_grads(build, inputs, eps);
    let mut worst = 0.0f64;
    for (a, n) in auto.iter().zip(numeric.iter()) {
        let av = tape.value(*a);
        for (x, y) in av.iter().zip(n.iter()) {
            let denom = 1.0f64.max(x.abs()).max(y.abs());
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Assert the autodiff/finite-difference agreement for a scalar-valued graph.
pub fn assert_grads_close<B>(build: B, inputs: &[ArrayD<f64>], eps: f64, tol: f64, what: &str)
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var + Copy,
{
    let err = max_grad_error(build, inputs, eps);
    assert!(
        err <= tol,
        "{what}: gradient mismatch {err:.3e} exceeds tolerance {tol:.1e}"
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn tensor(shape: &[usize], f: impl Fn(usize) -> f64) -> ArrayD<f64> {
        let len: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..len).map(f).collect()).unwrap()
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = tensor(&[2, 3], |i| 0.3 + 0.17 * i as f64);
        let y = tensor(&[2, 3], |i| -0.4 + 0.23 * i as f64);
        assert_grads_close(
            |t, v| {
                let a = t.mul(v[0], v[1]);
                let b = t.tanh(a);
                let c = t.exp(b);
                let d = t.sqrt(c);
                let e = t.ln(d);
                let f = t.recip(e);
                let g = t.abs(f);
                let h = t.leaky_relu(g, 0.2);
                t.sum_all(h)
            },
            &[x, y],
            1e-6,
            1e-6,
            "elementwise chain",
        );
    }

    #[test]
    fn matmul_and_reductions_match_finite_differences() {
        let a = tensor(&[3, 4], |i| 0.1 * i as f64 - 0.5);
        let b = tensor(&[4, 2], |i| 0.07 * i as f64 - 0.2);
        assert_grads_close(
            |t, v| {
                let m = t.matmul(v[0], v[1]);
                let s = t.mul(m, m);
                let r = t.sum_rows(s);
                let q = t.broadcast_row(r, 2);
                let u = t.mul(q, m);
                t.mean_all(u)
            },
            &[a, b],
            1e-6,
            1e-6,
            "matmul chain",
        );
    }

    #[test]
    fn conv_ops_match_finite_differences() {
        let x = tensor(&[2, 2, 5, 5], |i| ((i * 31 % 17) as f64 - 8.0) * 0.1);
        let w = tensor(&[3, 2, 3, 3], |i| ((i * 13 % 11) as f64 - 5.0) * 0.1);
        assert_grads_close(
            |t, v| {
                let y = t.conv2d(v[0], v[1], 2, 1);
                let s = t.mul(y, y);
                t.sum_all(s)
            },
            &[x.clone(), w.clone()],
            1e-6,
            1e-6,
            "conv2d",
        );
        assert_grads_close(
            |t, v| {
                let y = t.conv2d_input_grad(v[0], v[1], 2, 1, (10, 10));
                let s = t.mul(y, y);
                t.sum_all(s)
            },
            &[x, w],
            1e-6,
            1e-6,
            "conv2d_input_grad",
        );
    }

    #[test]
    fn second_order_gradients_match_finite_differences() {
        // E(w) = || d/dx sum(conv(x, w)^2) ||^2 exercises grad-of-grad: the
        // same structure the gradient penalty needs.
        let x = tensor(&[1, 2, 4, 4], |i| ((i * 7 % 13) as f64 - 6.0) * 0.15);
        let w = tensor(&[2, 2, 3, 3], |i| ((i * 5 % 9) as f64 - 4.0) * 0.2);
        assert_grads_close(
            |t, v| {
                let xleaf = t.detach(v[0]);
                let y = t.conv2d(xleaf, v[1], 1, 1);
                let act = t.leaky_relu(y, 0.1);
                let s2 = t.mul(act, act);
                let score = t.sum_all(s2);
                let gx = t.grad(score, &[xleaf])[0];
                let g2 = t.mul(gx, gx);
                t.sum_all(g2)
            },
            &[x, w],
            1e-6,
            5e-6,
            "double backprop through conv",
        );
    }

    #[test]
    fn batched_matmul_matches_finite_differences() {
        let a = tensor(&[2, 3, 4], |i| 0.05 * i as f64 - 0.3);
        let b = tensor(&[2, 4, 2], |i| 0.04 * i as f64 - 0.2);
        assert_grads_close(
            |t, v| {
                let m = t.batch_matmul(v[0], v[1]);
                let mt = t.batch_transpose(m);
                let s = t.mul(mt, mt);
                t.sum_all(s)
            },
            &[a, b],
            1e-6,
            1e-6,
            "batch matmul",
        );
    }

    #[test]
    fn gather_scatter_concat_match_finite_differences() {
        let a = tensor(&[3, 5], |i| 0.2 * i as f64 - 1.0);
        let img = tensor(&[2, 3, 2, 2], |i| 0.1 * i as f64 - 0.5);
        assert_grads_close(
            |t, v| {
                let picked = t.select_classes(v[0], &[4, 0, 2]);
                let sc = t.scatter_classes(picked, &[1, 3, 0], 5);
                let sq = t.mul(sc, sc);
                t.sum_all(sq)
            },
            &[a],
            1e-6,
            1e-6,
            "select/scatter",
        );
        assert_grads_close(
            |t, v| {
                let lo = t.slice_chan(v[0], 0, 1);
                let hi = t.slice_chan(v[0], 1, 3);
                let cat = t.concat_chan(hi, lo);
                let s = t.sum_hw(cat);
                let b = t.broadcast_hw(s, (2, 2));
                let m = t.mul(b, cat);
                t.sum_all(m)
            },
            &[img],
            1e-6,
            1e-6,
            "slice/concat/sum_hw",
        );
    }
}
