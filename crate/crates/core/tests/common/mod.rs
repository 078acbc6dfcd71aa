#![allow(dead_code)]

use trajdistill::ndgrad::{Mat, NodeId, Tape};

/// Central difference step used by every gradient check.
pub const EPS: f64 = 1e-6;

/// `max |g_ad - g_fd| / max |g_fd|` of a scalar function of `x`.
/// `build` turns a tape and one tracked input into a scalar.
pub fn input_gradient_error<'p>(x: &Mat, build: impl Fn(&mut Tape<'p>, NodeId) -> NodeId) -> f64 {
    let eval = |m: &Mat| -> (f64, Option<Mat>) {
        let mut t = Tape::new();
        let xi = t.input(m.clone());
        let root = build(&mut t, xi);
        let v = t.scalar(root);
        let g = t.backward(root).unwrap();
        (v, g.wrt(xi).cloned())
    };
    let (_, ad) = eval(x);
    let ad = ad.unwrap_or_else(|| Mat::zeros(x.rows(), x.cols()));
    let mut fd = Vec::with_capacity(x.data().len());
    let mut p = x.clone();
    for i in 0..x.data().len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + EPS;
        let (lp, _) = eval(&p);
        p.data_mut()[i] = orig - EPS;
        let (lm, _) = eval(&p);
        p.data_mut()[i] = orig;
        fd.push((lp - lm) / (2.0 * EPS));
    }
    relative_error(ad.data(), &fd)
}

/// Sup-norm error relative to the sup norm of the reference.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale.max(1e-300)
}
