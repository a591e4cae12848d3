//! Loss functions: the segment-wise consistency contrast, symmetric InfoNCE,
//! correlation alignment, cross-entropy and their combinations.
//!
//! Every loss has a matrix form that validates its inputs and a graph form
//! used during training. The matrix forms run the graph forms on constants,
//! so the two cannot drift apart.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

/// Denominator of the consistency contrast. `Literal` adds the negatives
/// twice (once over the whole batch, once over the batch minus the anchor);
/// `Dedup` counts the positive and each negative once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    #[default]
    Literal,
    Dedup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcOptions {
    pub denominator: Denominator,
    pub reduction: Reduction,
}

impl Default for EcOptions {
    fn default() -> Self {
        Self {
            denominator: Denominator::Literal,
            reduction: Reduction::Sum,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_rows(m: &Mat, what: &str) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    for (i, row) in m.rows().into_iter().enumerate() {
        if row.iter().all(|&x| x == 0.0) {
            return Err(Error::Domain(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// `exp(cos(x, y)/τ)`.
pub fn pair_similarity(x: &[f64], y: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if x.len() != y.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", x.len(), y.len())));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Domain("similarity of a zero-norm vector".into()));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny) / tau).exp())
}

/// Paired phoneme and viseme vectors, one row per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastBatch {
    pub phon: Mat,
    pub vis: Mat,
    pub tau: f64,
}

impl ContrastBatch {
    pub fn new(phon: Mat, vis: Mat, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if phon.nrows() == 0 {
            return Err(Error::EmptyInput("contrast batch has no segments".into()));
        }
        if phon.dim() != vis.dim() {
            return Err(Error::Shape(format!("phoneme batch {:?} vs viseme batch {:?}", phon.dim(), vis.dim())));
        }
        check_rows(&phon, "phoneme batch")?;
        check_rows(&vis, "viseme batch")?;
        Ok(Self { phon, vis, tau })
    }

    pub fn len(&self) -> usize {
        self.phon.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.phon.nrows() == 0
    }
}

/// `N×N` matrix of cosine similarities divided by `τ`.
pub fn scaled_cosines(g: &mut Graph, a: Var, b: Var, tau: f64) -> Var {
    let an = g.normalize_rows(a);
    let bn = g.normalize_rows(b);
    let bt = g.transpose(bn);
    let s = g.matmul(an, bt);
    g.scale(s, 1.0 / tau)
}

/// `ln Σ_j c_ij·exp(S_ij)` per row, with `c_ii = 1` and `c_ij = mult` off the
/// diagonal, evaluated stably as a log-sum-exp.
fn weighted_lse_rows(g: &mut Graph, s: Var, off_diag_mult: f64) -> Var {
    let n = g.shape(s).0;
    if off_diag_mult == 1.0 {
        return g.log_sum_exp_rows(s);
    }
    let lw = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { off_diag_mult.ln() });
    let lw = g.constant(lw);
    let shifted = g.add(s, lw);
    g.log_sum_exp_rows(shifted)
}

fn diagonal(g: &mut Graph, s: Var) -> Var {
    let n = g.shape(s).0;
    let eye = g.constant(Array2::eye(n));
    let d = g.mul(s, eye);
    g.sum_cols(d)
}

/// Per-segment consistency contrast terms `(L^p, L^v)`, each `N×1`.
pub fn ec_terms_graph(g: &mut Graph, phon: Var, vis: Var, tau: f64, denominator: Denominator) -> (Var, Var) {
    let s = scaled_cosines(g, phon, vis, tau);
    let mult = match denominator {
        Denominator::Literal => 2.0,
        Denominator::Dedup => 1.0,
    };
    let diag = diagonal(g, s);
    let lse_p = weighted_lse_rows(g, s, mult);
    let st = g.transpose(s);
    let lse_v = weighted_lse_rows(g, st, mult);
    let lp = g.sub(lse_p, diag);
    let lv = g.sub(lse_v, diag);
    (lp, lv)
}

pub fn ec_loss_graph(g: &mut Graph, phon: Var, vis: Var, tau: f64, opts: EcOptions) -> Var {
    let n = g.shape(phon).0;
    let (lp, lv) = ec_terms_graph(g, phon, vis, tau, opts.denominator);
    let both = g.add(lp, lv);
    let total = g.sum_all(both);
    match opts.reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, 1.0 / n as f64),
    }
}

pub fn ec_loss(batch: &ContrastBatch, opts: EcOptions) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(batch.phon.clone());
    let v = g.constant(batch.vis.clone());
    let l = ec_loss_graph(&mut g, p, v, batch.tau, opts);
    Ok(g.scalar(l))
}

/// One direction of InfoNCE: mean over rows of `−S_ii + ln Σ_j exp(S_ij)`.
pub fn infonce_directional_graph(g: &mut Graph, anchors: Var, counterparts: Var, tau: f64) -> Var {
    let n = g.shape(anchors).0;
    let s = scaled_cosines(g, anchors, counterparts, tau);
    let diag = diagonal(g, s);
    let lse = g.log_sum_exp_rows(s);
    let terms = g.sub(lse, diag);
    let total = g.sum_all(terms);
    g.scale(total, 1.0 / n as f64)
}

/// Symmetric InfoNCE: anchor→counterpart plus counterpart→anchor.
pub fn infonce_graph(g: &mut Graph, anchors: Var, counterparts: Var, tau: f64) -> Var {
    let a = infonce_directional_graph(g, anchors, counterparts, tau);
    let b = infonce_directional_graph(g, counterparts, anchors, tau);
    g.add(a, b)
}

pub fn infonce_loss(anchors: &Mat, counterparts: &Mat, tau: f64) -> Result<f64> {
    let batch = ContrastBatch::new(anchors.clone(), counterparts.clone(), tau)?;
    let mut g = Graph::new();
    let a = g.constant(batch.phon);
    let c = g.constant(batch.vis);
    let l = infonce_graph(&mut g, a, c, tau);
    Ok(g.scalar(l))
}

/// `k×k` cross-correlation of batch-normalized columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix(pub Mat);

fn check_columns(m: &Mat, what: &str) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    for (j, col) in m.columns().into_iter().enumerate() {
        if col.iter().all(|&x| x == 0.0) {
            return Err(Error::Domain(format!("{what} column {j} is all zero")));
        }
    }
    Ok(())
}

pub fn check_alignment_inputs(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("alignment inputs {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() < 2 {
        return Err(Error::Domain(format!("correlation needs a batch of at least 2, got {}", a.nrows())));
    }
    check_columns(a, "first alignment input")?;
    check_columns(b, "second alignment input")
}

/// `C_ij = Σ_b A_bi·B_bj / (‖A_·i‖·‖B_·j‖)`.
pub fn correlation_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let at = g.transpose(a);
    let an = g.normalize_rows(at);
    let bt = g.transpose(b);
    let bn = g.normalize_rows(bt);
    let bnt = g.transpose(bn);
    g.matmul(an, bnt)
}

pub fn correlation_matrix(a: &Mat, b: &Mat) -> Result<CorrelationMatrix> {
    check_alignment_inputs(a, b)?;
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = correlation_graph(&mut g, av, bv);
    Ok(CorrelationMatrix(g.value(c).clone()))
}

/// `Σ_i (1 − C_ii)² + λ·Σ_{i≠j} C_ij²`.
pub fn cgra_graph(g: &mut Graph, a: Var, b: Var, lambda: f64) -> Var {
    let c = correlation_graph(g, a, b);
    let k = g.shape(c).0;
    let eye = g.constant(Array2::eye(k));
    let d = g.sub(c, eye);
    let sq = g.mul(d, d);
    let w = g.constant(Array2::from_shape_fn((k, k), |(i, j)| if i == j { 1.0 } else { lambda }));
    let weighted = g.mul(sq, w);
    g.sum_all(weighted)
}

pub fn cgra_loss(a: &Mat, b: &Mat, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("λ must be positive, got {lambda}")));
    }
    check_alignment_inputs(a, b)?;
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = cgra_graph(&mut g, av, bv, lambda);
    Ok(g.scalar(l))
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1−ε]`.
pub fn ce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    if probs.is_empty() {
        return Err(Error::EmptyInput("no probabilities".into()));
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Domain(format!("label {y} is not binary")));
    }
    let mut g = Graph::new();
    let p = g.constant(Array2::from_shape_vec((probs.len(), 1), probs.to_vec()).expect("column"));
    let l = g.binary_cross_entropy(p, labels, PROB_EPS);
    Ok(g.scalar(l))
}

/// `P(fake)` per row of `N×2` logits (column 1 is fake), as an `N×1` column.
pub fn fake_probability_graph(g: &mut Graph, logits: Var) -> Var {
    let lse = g.log_sum_exp_rows(logits);
    let fake = g.slice_cols(logits, 1, 2);
    let lp = g.sub(fake, lse);
    g.exp(lp)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ec: f64,
    pub info: f64,
    pub cor: f64,
    pub ce: f64,
}

/// `L_EC + L_Info + L_cor`.
pub fn pretrain_loss(parts: &LossParts) -> f64 {
    parts.ec + parts.info + parts.cor
}

/// `L_pre + w·L_ce`.
pub fn finetune_loss(parts: &LossParts, w: f64) -> f64 {
    pretrain_loss(parts) + w * parts.ce
}
