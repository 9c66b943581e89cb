//! Central finite differences for gradient verification.

use crate::tensor::Mat;

/// Numerically differentiate `f` at `inputs` by central differences with
/// step `h`, returning one gradient matrix per input.
pub fn finite_diff(f: &mut dyn FnMut(&[Mat]) -> f64, inputs: &[Mat], h: f64) -> Vec<Mat> {
    let mut work: Vec<Mat> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Mat::zeros(inputs[k].dim());
        for i in 0..inputs[k].nrows() {
            for j in 0..inputs[k].ncols() {
                let orig = work[k][(i, j)];
                work[k][(i, j)] = orig + h;
                let fp = f(&work);
                work[k][(i, j)] = orig - h;
                let fm = f(&work);
                work[k][(i, j)] = orig;
                g[(i, j)] = (fp - fm) / (2.0 * h);
            }
        }
        grads.push(g);
    }
    grads
}

/// Largest elementwise relative error between two matrices, with the
/// denominator floored so near-zero gradients compare absolutely.
pub fn max_rel_err(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim(), "max_rel_err shape");
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(1e-6);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

/// Relative error between two scalars with a floored denominator.
pub fn rel_err_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x²) has gradient 2x.
        let x = Mat::from_shape_vec((2, 2), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut f = |xs: &[Mat]| xs[0].iter().map(|v| v * v).sum();
        let g = finite_diff(&mut f, &[x.clone()], 1e-5);
        let expect = &x * 2.0;
        assert!(max_rel_err(&g[0], &expect) < 1e-9);
    }
}
