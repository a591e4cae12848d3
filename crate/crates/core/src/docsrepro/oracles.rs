//! Brute-force reference implementations written as plain loops over
//! scalar formulas, independent of the graph code they are compared with.

use ndarray::{Array2, ArrayView1};

use crate::autograd::Mat;

fn cos(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn h(a: ArrayView1<f64>, b: ArrayView1<f64>, tau: f64) -> f64 {
    (cos(a, b) / tau).exp()
}

/// Consistency loss summed over segments. The denominator sums `h` over
/// the whole batch and, unless `dedup`, again over the batch without the
/// anchor.
pub fn ec_loss(p: &Mat, v: &Mat, tau: f64, dedup: bool) -> f64 {
    let n = p.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut den_p = 0.0;
        let mut den_v = 0.0;
        for j in 0..n {
            let times = if dedup || j == i { 1.0 } else { 2.0 };
            den_p += times * h(p.row(i), v.row(j), tau);
            den_v += times * h(v.row(i), p.row(j), tau);
        }
        let num = h(p.row(i), v.row(i), tau);
        total -= (num / den_p).ln() + (num / den_v).ln();
    }
    total
}

/// Symmetric InfoNCE: mean over anchors plus mean over counterparts.
pub fn infonce_loss(a: &Mat, c: &Mat, tau: f64) -> f64 {
    let n = a.nrows();
    let dir = |x: &Mat, y: &Mat| {
        let mut s = 0.0;
        for i in 0..n {
            let den: f64 = (0..n).map(|j| h(x.row(i), y.row(j), tau)).sum();
            s -= (h(x.row(i), y.row(i), tau) / den).ln();
        }
        s / n as f64
    };
    dir(a, c) + dir(c, a)
}

pub fn correlation_matrix(a: &Mat, b: &Mat) -> Mat {
    let k = a.ncols();
    Array2::from_shape_fn((k, k), |(i, j)| {
        let mut num = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for r in 0..a.nrows() {
            num += a[[r, i]] * b[[r, j]];
            na += a[[r, i]] * a[[r, i]];
            nb += b[[r, j]] * b[[r, j]];
        }
        num / (na.sqrt() * nb.sqrt())
    })
}

pub fn cgra_loss(a: &Mat, b: &Mat, lambda: f64) -> f64 {
    let c = correlation_matrix(a, b);
    let mut on = 0.0;
    let mut off = 0.0;
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            if i == j {
                on += (1.0 - c[[i, j]]).powi(2);
            } else {
                off += c[[i, j]].powi(2);
            }
        }
    }
    on + lambda * off
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn ce_loss(probs: &[f64], labels: &[f64], eps: f64) -> f64 {
    let mut s = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.max(eps).min(1.0 - eps);
        s -= if y == 1.0 { p.ln() } else { (1.0 - p).ln() };
    }
    s / probs.len() as f64
}

/// Fraction of (positive, negative) pairs ranked correctly, ties ½.
pub fn auc_pairs(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0usize;
    for (i, &a) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &b) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            den += 1;
            if a > b {
                num += 1.0;
            } else if a == b {
                num += 0.5;
            }
        }
    }
    (den > 0).then(|| num / den as f64)
}
