//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; vectors are `1×n` rows. A [`Graph`] is a
//! tape: nodes are appended in evaluation order and [`Graph::backward`]
//! walks them in reverse. Operations that need intermediate results for the
//! backward pass (normalizations, attention) cache them inside the node.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Neighbour table for depthwise convolution: `taps[s][o]` is the input row
/// read by output row `s` through kernel tap `o`, `None` for zero padding.
#[derive(Debug, Clone)]
pub struct TapTable {
    pub n_taps: usize,
    pub taps: Vec<Vec<Option<usize>>>,
}

/// Boolean attention mask, row-major `S×S`; `allowed[i*S + j]` lets query `i`
/// attend to key `j`.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub len: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(len: usize) -> Self {
        Self {
            len,
            allowed: vec![true; len * len],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    LogSumExpRows(Var),
    RowNorm {
        x: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    ColNorm {
        x: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        taps: Arc<TapTable>,
    },
    BinaryCrossEntropy {
        p: Var,
        labels: Vec<f64>,
        eps: f64,
    },
}

struct Node {
    value: Arc<Mat>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kinks: u64,
}

fn assert_same_shape(a: &Mat, b: &Mat, op: &str) {
    assert_eq!(a.dim(), b.dim(), "{op}: operand shapes differ");
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every branch taken at a non-differentiable point so far (ReLU
    /// signs, BCE clamps). Two evaluations with equal signatures lie in the
    /// same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn mark_kinks(&mut self, bits: impl Iterator<Item = bool>) {
        for b in bits {
            self.kinks = (self.kinks ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5);
        }
        self.kinks = self.kinks.wrapping_add(0x9e37_79b9_7f4a_7c15);
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Mat>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf sharing storage with the caller (parameters).
    pub fn input_shared(&mut self, value: Arc<Mat>, requires_grad: bool) -> Var {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dimensions differ");
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(self.value(a), self.value(b), "add");
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(self.value(a), self.value(b), "sub");
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(self.value(a), self.value(b), "mul");
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.dim(), (1, va.ncols()), "add_row: bad row shape");
        let out = va + vr;
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// `a (m×n) ⊙ row (1×n)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.dim(), (1, va.ncols()), "mul_row: bad row shape");
        let out = va * vr;
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// `a (m×n) ⊙ col (m×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.dim(), (va.nrows(), 1), "mul_col: bad column shape");
        let out = va * vc;
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let signs: Vec<bool> = self.value(a).iter().map(|&x| x > 0.0).collect();
        self.mark_kinks(signs.into_iter());
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Ln(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a), rg)
    }

    /// Sum over rows: `m×n → 1×n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    /// Sum over columns: `m×n → m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a).nrows() as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m)
    }

    /// Row-wise `log Σ_j exp(a_ij)`: `m×n → m×1`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Array2::zeros((va.nrows(), 1));
        for (i, row) in va.rows().into_iter().enumerate() {
            let mx = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let s: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            out[[i, 0]] = mx + s.ln();
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSumExpRows(a), rg)
    }

    /// Normalize each row to zero mean and unit variance (layer norm
    /// without affine parameters).
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let n = va.ncols() as f64;
        let mut xhat = va.clone();
        let mut inv_std = Vec::with_capacity(va.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(a);
        let out = xhat.clone();
        self.push(out, Op::RowNorm { x: a, xhat, inv_std }, rg)
    }

    /// Normalize each column over the rows (batch-norm statistics, biased
    /// variance, no affine parameters).
    pub fn col_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let m = va.nrows() as f64;
        let mut xhat = va.clone();
        let mut inv_std = Vec::with_capacity(va.ncols());
        for mut col in xhat.columns_mut() {
            let mean = col.sum() / m;
            let var = col.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            col.mapv_inplace(|x| (x - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(a);
        let out = xhat.clone();
        self.push(out, Op::ColNorm { x: a, xhat, inv_std }, rg)
    }

    /// Scale every row to unit Euclidean norm. Panics on a zero row; callers
    /// validate norms first.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        let mut norms = Vec::with_capacity(va.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            assert!(n > 0.0, "normalize_rows: zero-norm row");
            row.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(out, Op::NormalizeRows { x: a, norms }, rg)
    }

    /// Multi-head scaled dot-product attention with a boolean mask. `q`, `k`,
    /// `v` are `S×d`; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (s_len, d) = vq.dim();
        assert_eq!(vk.dim(), (s_len, d), "attention: k shape");
        assert_eq!(vv.dim(), (s_len, d), "attention: v shape");
        assert_eq!(mask.len, s_len, "attention: mask length");
        assert!(heads >= 1 && d % heads == 0, "attention: heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((s_len, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = vq.slice(cols);
            let kh = vk.slice(cols);
            let vh = vv.slice(cols);
            let mut p = qh.dot(&kh.t()) * scale;
            for i in 0..s_len {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..s_len {
                    if mask.get(i, j) {
                        mx = mx.max(p[[i, j]]);
                    }
                }
                let mut total = 0.0;
                for j in 0..s_len {
                    let e = if mask.get(i, j) { (p[[i, j]] - mx).exp() } else { 0.0 };
                    p[[i, j]] = e;
                    total += e;
                }
                for j in 0..s_len {
                    p[[i, j]] /= total;
                }
            }
            out.slice_mut(cols).assign(&p.dot(&vh));
            probs.push(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Depthwise convolution over rows: `y[s,c] = Σ_o kernel[o,c]·x[tap(s,o),c]`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, taps: Arc<TapTable>) -> Var {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let (s_len, c) = vx.dim();
        assert_eq!(vk.dim(), (taps.n_taps, c), "depthwise_conv: kernel shape");
        assert_eq!(taps.taps.len(), s_len, "depthwise_conv: tap table length");
        let mut out = Array2::zeros((s_len, c));
        for (srow, row_taps) in taps.taps.iter().enumerate() {
            let mut orow = out.row_mut(srow);
            for (o, tap) in row_taps.iter().enumerate() {
                if let Some(src) = *tap {
                    Zip::from(&mut orow)
                        .and(vk.row(o))
                        .and(vx.row(src))
                        .for_each(|y, &kk, &xx| *y += kk * xx);
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        self.push(out, Op::DepthwiseConv { x, kernel, taps }, rg)
    }

    /// Mean binary cross-entropy of probabilities `p` (any shape with N
    /// entries) against labels, with probabilities clamped to `[eps, 1-eps]`.
    pub fn binary_cross_entropy(&mut self, p: Var, labels: &[f64], eps: f64) -> Var {
        let vp = self.value(p);
        assert_eq!(vp.len(), labels.len(), "binary_cross_entropy: label count");
        let n = labels.len() as f64;
        let mut total = 0.0;
        let mut clamped = Vec::with_capacity(labels.len());
        for (&pi, &y) in vp.iter().zip(labels) {
            let pc = pi.clamp(eps, 1.0 - eps);
            clamped.push(pc != pi);
            total += y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        self.mark_kinks(clamped.into_iter());
        let rg = self.rg(p);
        self.push(
            Array2::from_elem((1, 1), -total / n),
            Op::BinaryCrossEntropy {
                p,
                labels: labels.to_vec(),
                eps,
            },
            rg,
        )
    }

    /// Backward pass from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        self.backward_seeded(&[(root, Array2::ones((1, 1)))])
    }

    /// Backward pass from arbitrary upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "backward: seed shape");
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let y = &*node.value;
        let mut send = |v: Var, gv: Mat| {
            if self.rg(v) {
                accumulate(grads, v, gv);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    send(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g * self.value(*b));
                }
                if self.rg(*b) {
                    send(*b, g * self.value(*a));
                }
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone());
                if self.rg(*r) {
                    send(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.rg(*a) {
                    send(*a, g * self.value(*r));
                }
                if self.rg(*r) {
                    let prod = g * self.value(*a);
                    send(*r, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, c) => {
                if self.rg(*a) {
                    send(*a, g * self.value(*c));
                }
                if self.rg(*c) {
                    let prod = g * self.value(*a);
                    send(*c, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, c) => send(*a, g * *c),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gg, &x| {
                        if x <= 0.0 {
                            *gg = 0.0
                        }
                    });
                send(*a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(y).for_each(|gg, &t| *gg *= 1.0 - t * t);
                send(*a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gg, &x| *gg *= gelu_grad(x));
                send(*a, ga);
            }
            Op::Exp(a) => send(*a, g * y),
            Op::Ln(a) => send(*a, g / self.value(*a)),
            Op::Transpose(a) => send(*a, g.t().to_owned()),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.rg(p) {
                        send(p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    if self.rg(p) {
                        send(p, g.slice(s![.., start..start + n]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(self.value(*a).dim());
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                send(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(self.value(*a).dim());
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                send(*a, ga);
            }
            Op::SumAll(a) => send(*a, Array2::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::SumRows(a) => {
                let dim = self.value(*a).dim();
                send(*a, g.broadcast(dim).expect("sum_rows grad").to_owned());
            }
            Op::SumCols(a) => {
                let dim = self.value(*a).dim();
                send(*a, g.broadcast(dim).expect("sum_cols grad").to_owned());
            }
            Op::LogSumExpRows(a) => {
                let va = self.value(*a);
                let mut ga = Array2::zeros(va.dim());
                for i in 0..va.nrows() {
                    let lse = y[[i, 0]];
                    for j in 0..va.ncols() {
                        ga[[i, j]] = g[[i, 0]] * (va[[i, j]] - lse).exp();
                    }
                }
                send(*a, ga);
            }
            Op::RowNorm { x, xhat, inv_std } => {
                let n = xhat.ncols() as f64;
                let mut gx = Array2::zeros(xhat.dim());
                for i in 0..xhat.nrows() {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let mg = gr.sum() / n;
                    let mgx = gr.dot(&xr) / n;
                    for j in 0..xhat.ncols() {
                        gx[[i, j]] = inv_std[i] * (gr[j] - mg - xr[j] * mgx);
                    }
                }
                send(*x, gx);
            }
            Op::ColNorm { x, xhat, inv_std } => {
                let m = xhat.nrows() as f64;
                let mut gx = Array2::zeros(xhat.dim());
                for j in 0..xhat.ncols() {
                    let gc = g.column(j);
                    let xc = xhat.column(j);
                    let mg = gc.sum() / m;
                    let mgx = gc.dot(&xc) / m;
                    for i in 0..xhat.nrows() {
                        gx[[i, j]] = inv_std[j] * (gc[i] - mg - xc[i] * mgx);
                    }
                }
                send(*x, gx);
            }
            Op::NormalizeRows { x, norms } => {
                let mut gx = Array2::zeros(y.dim());
                for i in 0..y.nrows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let proj = gr.dot(&yr);
                    for j in 0..y.ncols() {
                        gx[[i, j]] = (gr[j] - yr[j] * proj) / norms[i];
                    }
                }
                send(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (s_len, d) = vq.dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Array2::zeros((s_len, d));
                let mut gk = Array2::zeros((s_len, d));
                let mut gv = Array2::zeros((s_len, d));
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    gv.slice_mut(cols).assign(&p.t().dot(&go));
                    let gp = go.dot(&vv.slice(cols).t());
                    let mut gs = Array2::zeros((s_len, s_len));
                    for i in 0..s_len {
                        let dot: f64 = (0..s_len).map(|j| gp[[i, j]] * p[[i, j]]).sum();
                        for j in 0..s_len {
                            gs[[i, j]] = p[[i, j]] * (gp[[i, j]] - dot) * scale;
                        }
                    }
                    gq.slice_mut(cols).assign(&gs.dot(&vk.slice(cols)));
                    gk.slice_mut(cols).assign(&gs.t().dot(&vq.slice(cols)));
                }
                send(*q, gq);
                send(*k, gk);
                send(*v, gv);
            }
            Op::DepthwiseConv { x, kernel, taps } => {
                let (vx, vk) = (self.value(*x), self.value(*kernel));
                let mut gx = Array2::zeros(vx.dim());
                let mut gk = Array2::zeros(vk.dim());
                for (srow, row_taps) in taps.taps.iter().enumerate() {
                    let gr = g.row(srow);
                    for (o, tap) in row_taps.iter().enumerate() {
                        if let Some(src) = *tap {
                            Zip::from(gx.row_mut(src))
                                .and(vk.row(o))
                                .and(gr)
                                .for_each(|gxx, &kk, &gg| *gxx += kk * gg);
                            Zip::from(gk.row_mut(o))
                                .and(vx.row(src))
                                .and(gr)
                                .for_each(|gkk, &xx, &gg| *gkk += xx * gg);
                        }
                    }
                }
                send(*x, gx);
                send(*kernel, gk);
            }
            Op::BinaryCrossEntropy { p, labels, eps } => {
                let vp = self.value(*p);
                let n = labels.len() as f64;
                let mut gp = Array2::zeros(vp.dim());
                for ((gg, &pi), &yv) in gp.iter_mut().zip(vp.iter()).zip(labels) {
                    if pi > *eps && pi < 1.0 - eps {
                        *gg = -g[[0, 0]] / n * (yv / pi - (1.0 - yv) / (1.0 - pi));
                    }
                }
                send(*p, gp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            xp[[i, j]] += h;
            xm[[i, j]] -= h;
            g[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Mat) {
        let f = |m: &Mat| {
            let mut g = Graph::new();
            let v = g.input(m.clone());
            let out = build(&mut g, v);
            let s = g.sum_all(out);
            g.scalar(s)
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let s = g.sum_all(out);
        let grads = g.backward(s);
        let analytic = grads.wrt(v).unwrap();
        let numeric = numeric_grad(f, &x, 1e-5);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5], [-0.9, 0.2, 1.6]]
    }

    #[test]
    fn elementwise_grads() {
        check(|g, x| g.tanh(x), sample());
        check(|g, x| g.gelu(x), sample());
        check(|g, x| g.exp(x), sample());
        check(
            |g, x| {
                let e = g.exp(x);
                g.ln(e)
            },
            sample(),
        );
        check(
            |g, x| {
                let t = g.transpose(x);
                let m = g.matmul(x, t);
                g.mul(m, m)
            },
            sample(),
        );
    }

    #[test]
    fn normalization_grads() {
        let w = array![[0.5, -2.0, 1.0], [1.5, 0.3, -0.7], [0.2, 0.9, 2.0]];
        check(
            move |g, x| {
                let n = g.row_norm(x, 1e-5);
                let c = g.constant(w.clone());
                g.mul(n, c)
            },
            sample(),
        );
        let w2 = array![[0.5, -2.0, 1.0], [1.5, 0.3, -0.7], [0.2, 0.9, 2.0]];
        check(
            move |g, x| {
                let n = g.col_norm(x, 1e-5);
                let c = g.constant(w2.clone());
                g.mul(n, c)
            },
            sample(),
        );
        let w3 = array![[0.5, -2.0, 1.0], [1.5, 0.3, -0.7], [0.2, 0.9, 2.0]];
        check(
            move |g, x| {
                let n = g.normalize_rows(x);
                let c = g.constant(w3.clone());
                g.mul(n, c)
            },
            sample(),
        );
        check(|g, x| g.log_sum_exp_rows(x), sample());
    }

    #[test]
    fn attention_grads_all_inputs() {
        let mut mask = AttnMask::full(3);
        mask.allowed[2] = false; // query 0 cannot see key 2
        let w = array![[0.5, -2.0, 1.0, 0.1], [1.5, 0.3, -0.7, 0.4], [0.2, 0.9, 2.0, -1.0]];
        let x = array![[0.3, -1.2, 0.7, 0.2], [1.1, 0.4, -0.5, 0.8], [-0.9, 0.2, 1.6, -0.3]];
        check(
            move |g, x| {
                let k = g.scale(x, 0.7);
                let v = g.tanh(x);
                let a = g.attention(x, k, v, 2, &mask);
                let c = g.constant(w.clone());
                g.mul(a, c)
            },
            x,
        );
    }

    #[test]
    fn slicing_and_concat_grads() {
        check(
            |g, x| {
                let a = g.slice_rows(x, 0, 2);
                let b = g.slice_cols(x, 1, 3);
                let at = g.transpose(a);
                let r = g.concat_rows(&[at, b]);
                let c = g.concat_cols(&[r, r]);
                g.mul(c, c)
            },
            sample(),
        );
    }

    #[test]
    fn depthwise_conv_grads() {
        let taps = Arc::new(TapTable {
            n_taps: 3,
            taps: vec![
                vec![None, Some(0), Some(1)],
                vec![Some(0), Some(1), Some(2)],
                vec![Some(1), Some(2), None],
            ],
        });
        let kernel = array![[0.2, -0.4, 0.9], [1.0, 0.5, -0.3], [0.3, 0.7, 0.1]];
        check(
            move |g, x| {
                let k = g.constant(kernel.clone());
                let y = g.depthwise_conv(x, k, taps.clone());
                g.mul(y, y)
            },
            sample(),
        );
    }

    #[test]
    fn bce_clamps_and_differentiates() {
        let p = array![[0.2, 0.7, 0.55]];
        check(|g, x| g.binary_cross_entropy(x, &[0.0, 1.0, 1.0], 1e-7), p);
        let mut g = Graph::new();
        let x = g.input(array![[0.0, 1.0]]);
        let l = g.binary_cross_entropy(x, &[0.0, 1.0], 1e-7);
        assert!(g.scalar(l) < 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(sample());
        let b = g.input(sample());
        let m = g.matmul(a, b);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert!(grads.wrt(a).is_none());
        assert!(grads.wrt(b).is_some());
    }
}
