//! Central-difference verification of analytic parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Mode, ParamId, ParamStore, Session};

/// Entries whose analytic and numeric gradients are both below this are
/// counted as zero-gradient and not compared.
pub const ZERO_GRAD: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct WorstEntry {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub zero_gradient: usize,
    /// Entries whose ±step evaluations fall on a different side of a ReLU or
    /// clamp than the base point; a central difference is meaningless there.
    pub kinked: usize,
    pub step: f64,
    pub worst: Option<WorstEntry>,
}

/// Compares analytic gradients of `loss` with central differences at up to
/// `per_tensor` sampled entries of each parameter in `ids`.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, 0.01·g)` where
/// `g` is the largest analytic magnitude among all sampled entries.
/// Entries whose perturbation crosses a kink are counted, not compared.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    per_tensor: usize,
    step: f64,
    mode: Mode,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::new(store, mode);
    let root = loss(&mut s)?;
    let base_kinks = s.graph.kink_signature();
    let mut grads = s.graph.backward(root);
    let analytic: Vec<(ParamId, ndarray::Array2<f64>)> = s.param_grads(&mut grads);
    drop(s);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let eval = |st: &ParamStore| -> Result<(f64, u64)> {
        let mut s = Session::new(st, mode);
        let v = loss(&mut s)?;
        Ok((s.graph.scalar(v), s.graph.kink_signature()))
    };

    let mut entries = Vec::new();
    let mut kinked = 0;
    for &id in ids {
        let value = store.get(id);
        let (rows, cols) = value.dim();
        let n = rows * cols;
        if n == 0 {
            continue;
        }
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_tensor).into_vec()
        };
        let grad = analytic.iter().find(|(g, _)| *g == id).map(|(_, m)| m);
        for flat in picks {
            let (r, c) = (flat / cols, flat % cols);
            let a = grad.map_or(0.0, |g| g[[r, c]]);
            let orig = value[[r, c]];
            work.get_mut(id)[[r, c]] = orig + step;
            let (up, k_up) = eval(&work)?;
            work.get_mut(id)[[r, c]] = orig - step;
            let (down, k_down) = eval(&work)?;
            work.get_mut(id)[[r, c]] = orig;
            if k_up != base_kinks || k_down != base_kinks {
                kinked += 1;
                continue;
            }
            let num = (up - down) / (2.0 * step);
            if !num.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
            entries.push((id, r, c, a, num));
        }
    }

    let scale = entries.iter().map(|e| e.3.abs()).fold(0.0, f64::max);
    let floor = 1e-2 * scale;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        zero_gradient: 0,
        kinked,
        step,
        worst: None,
    };
    for (id, r, c, a, n) in entries {
        if a.abs() < ZERO_GRAD && n.abs() < ZERO_GRAD {
            report.zero_gradient += 1;
            continue;
        }
        report.checked += 1;
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(WorstEntry {
                param: store.name(id).to_string(),
                row: r,
                col: c,
                analytic: a,
                numeric: n,
            });
        }
    }
    Ok(report)
}
