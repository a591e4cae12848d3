//! Cross-attention fusion (CAFM) of the phoneme and viseme sequences and the
//! batch alignment pair consumed by the correlation loss.
//!
//! Features run along rows and the sequence along columns: `X_p` is `d_p×S`
//! and `X_v` is `d_v×S`. With `J = [X_p; X_v]` and `d = d_p + d_v`,
//!
//! ```text
//! M_p   = tanh(X_pᵀ·W_jp·J / √d)          S×S,  W_jp: d_p×d
//! M_v   = tanh(X_vᵀ·W_jv·J / √d)          S×S,  W_jv: d_v×d
//! H_p   = ReLU(W_p·X_p + W_mp·M_pᵀ)       k×S,  W_p: k×d_p, W_mp: k×S
//! H_v   = ReLU(W_v·X_v + W_mv·M_vᵀ)       k×S
//! Att_p = W_hp·H_p + X_p                  d_p×S, W_hp: d_p×k
//! Att_v = W_hv·H_v + X_v
//! X_att = [Att_p; Att_v]
//! ```

use rand::Rng;

use crate::autograd::{Mat, Var};
use crate::error::{Error, Result};
use crate::params::{normal_init, Mode, ParamId, ParamKind, ParamStore, Session};

#[derive(Debug, Clone, Copy)]
pub struct CafmParams {
    pub w_jp: ParamId,
    pub w_jv: ParamId,
    pub w_p: ParamId,
    pub w_v: ParamId,
    pub w_mp: ParamId,
    pub w_mv: ParamId,
    pub w_hp: ParamId,
    pub w_hv: ParamId,
    pub d_p: usize,
    pub d_v: usize,
    pub k: usize,
    pub seq_len: usize,
}

impl CafmParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_p: usize,
        d_v: usize,
        k: usize,
        seq_len: usize,
    ) -> Self {
        let d = d_p + d_v;
        let mut reg = |n: &str, r: usize, c: usize, std: f64| {
            store.register(format!("{name}.{n}"), ParamKind::Weight, normal_init(rng, r, c, std))
        };
        let inv = |n: usize| (1.0 / n as f64).sqrt();
        Self {
            w_jp: reg("w_jp", d_p, d, inv(d)),
            w_jv: reg("w_jv", d_v, d, inv(d)),
            w_p: reg("w_p", k, d_p, inv(d_p)),
            w_v: reg("w_v", k, d_v, inv(d_v)),
            w_mp: reg("w_mp", k, seq_len, inv(seq_len)),
            w_mv: reg("w_mv", k, seq_len, inv(seq_len)),
            w_hp: reg("w_hp", d_p, k, inv(k)),
            w_hv: reg("w_hv", d_v, k, inv(k)),
            d_p,
            d_v,
            k,
            seq_len,
        }
    }

    /// `(Att_p, Att_v)` for one sample.
    pub fn forward(&self, s: &mut Session, xp: Var, xv: Var) -> Result<(Var, Var)> {
        let (rp, sp) = s.graph.shape(xp);
        let (rv, sv) = s.graph.shape(xv);
        if sp != sv {
            return Err(Error::Shape(format!("phoneme sequence has {sp} steps, viseme sequence {sv}")));
        }
        if sp != self.seq_len {
            return Err(Error::Shape(format!("fusion expects {} steps, got {sp}", self.seq_len)));
        }
        if rp != self.d_p || rv != self.d_v {
            return Err(Error::Shape(format!(
                "fusion expects widths ({}, {}), got ({rp}, {rv})",
                self.d_p, self.d_v
            )));
        }
        let g = &mut s.graph;
        let j = g.concat_rows(&[xp, xv]);
        let scale = 1.0 / ((self.d_p + self.d_v) as f64).sqrt();
        let w_jp = s.param(self.w_jp);
        let w_jv = s.param(self.w_jv);
        let w_p = s.param(self.w_p);
        let w_v = s.param(self.w_v);
        let w_mp = s.param(self.w_mp);
        let w_mv = s.param(self.w_mv);
        let w_hp = s.param(self.w_hp);
        let w_hv = s.param(self.w_hv);
        let g = &mut s.graph;
        let mut branch = |x: Var, w_j: Var, w_x: Var, w_m: Var, w_h: Var| {
            let xt = g.transpose(x);
            let a = g.matmul(xt, w_j);
            let a = g.matmul(a, j);
            let a = g.scale(a, scale);
            let m = g.tanh(a);
            let mt = g.transpose(m);
            let h1 = g.matmul(w_x, x);
            let h2 = g.matmul(w_m, mt);
            let h = g.add(h1, h2);
            let h = g.relu(h);
            let att = g.matmul(w_h, h);
            g.add(att, x)
        };
        let att_p = branch(xp, w_jp, w_p, w_mp, w_hp);
        let att_v = branch(xv, w_jv, w_v, w_mv, w_hv);
        Ok((att_p, att_v))
    }

    /// The `S×S` maps `(M_p, M_v)`, for inspection.
    pub fn correlation_maps(&self, store: &ParamStore, xp: &Mat, xv: &Mat) -> (Mat, Mat) {
        let j = ndarray::concatenate(ndarray::Axis(0), &[xp.view(), xv.view()]).expect("same sequence length");
        let scale = 1.0 / ((self.d_p + self.d_v) as f64).sqrt();
        let mp = (xp.t().dot(store.get(self.w_jp)).dot(&j) * scale).mapv(f64::tanh);
        let mv = (xv.t().dot(store.get(self.w_jv)).dot(&j) * scale).mapv(f64::tanh);
        (mp, mv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    /// `d_p×S`.
    pub att_p: Mat,
    /// `d_v×S`.
    pub att_v: Mat,
    /// `(d_p+d_v)×S`.
    pub x_att: Mat,
    /// `1×d_p` mean over the sequence axis.
    pub pooled_p: Mat,
    /// `1×d_v`.
    pub pooled_v: Mat,
}

fn col_mean(m: &Mat) -> Mat {
    m.mean_axis(ndarray::Axis(1)).expect("non-empty sequence").insert_axis(ndarray::Axis(0))
}

pub fn cafm(store: &ParamStore, params: &CafmParams, xp: &Mat, xv: &Mat) -> Result<FusedRepresentation> {
    let mut s = Session::inference(store);
    let (p, v) = (s.constant(xp.clone()), s.constant(xv.clone()));
    let (ap, av) = params.forward(&mut s, p, v)?;
    let att_p = s.value(ap).clone();
    let att_v = s.value(av).clone();
    let x_att = ndarray::concatenate(ndarray::Axis(0), &[att_p.view(), att_v.view()]).expect("same sequence length");
    Ok(FusedRepresentation {
        pooled_p: col_mean(&att_p),
        pooled_v: col_mean(&att_v),
        att_p,
        att_v,
        x_att,
    })
}

/// Maps the wider of two pooled streams down to the narrower width so the
/// correlation matrix is square.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentAdapter {
    pub w: ParamId,
    /// True when the adapter applies to the phoneme stream.
    pub on_phoneme: bool,
}

impl AlignmentAdapter {
    /// `None` when the widths already agree.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_p: usize, d_v: usize) -> Option<Self> {
        if d_p == d_v {
            return None;
        }
        let (wide, narrow) = (d_p.max(d_v), d_p.min(d_v));
        let w = store.register(
            format!("{name}.w"),
            ParamKind::Weight,
            normal_init(rng, wide, narrow, (1.0 / wide as f64).sqrt()),
        );
        Some(Self { w, on_phoneme: d_p > d_v })
    }
}

/// Pooled attended features of a batch, ready for the correlation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPair {
    /// `b×k`.
    pub phon: Mat,
    /// `b×k`.
    pub vis: Mat,
    /// All rows of one side proportional to each other, so every column is a
    /// multiple of the same vector and the correlation is degenerate.
    pub rank_one: bool,
}

/// Stacks `1×d` rows into the aligned `b×k` pair, applying the adapter.
pub fn align_graph(s: &mut Session, adapter: Option<&AlignmentAdapter>, phon_rows: Var, vis_rows: Var) -> (Var, Var) {
    match adapter {
        None => (phon_rows, vis_rows),
        Some(a) => {
            let w = s.param(a.w);
            if a.on_phoneme {
                (s.graph.matmul(phon_rows, w), vis_rows)
            } else {
                (phon_rows, s.graph.matmul(vis_rows, w))
            }
        }
    }
}

/// True when every nonzero row is a multiple of the first nonzero row.
pub fn rows_rank_one(m: &Mat) -> bool {
    let Some(first) = m.rows().into_iter().find(|r| r.iter().any(|&x| x != 0.0)) else {
        return true;
    };
    let nf = first.dot(&first).sqrt();
    m.rows().into_iter().all(|r| {
        let nr = r.dot(&r).sqrt();
        nr == 0.0 || (r.dot(&first).abs() / (nr * nf) - 1.0).abs() < 1e-9
    })
}

/// Runs CAFM on every sample and builds the alignment pair. Requires at
/// least two samples when `alignment` is set.
pub fn pvam_forward(
    store: &ParamStore,
    params: &CafmParams,
    adapter: Option<&AlignmentAdapter>,
    samples: &[(Mat, Mat)],
    alignment: bool,
) -> Result<(Vec<FusedRepresentation>, Option<AlignmentPair>)> {
    if alignment && samples.len() < 2 {
        return Err(Error::Domain(format!(
            "alignment needs a batch of at least 2 samples, got {}",
            samples.len()
        )));
    }
    let fused = samples
        .iter()
        .map(|(xp, xv)| cafm(store, params, xp, xv))
        .collect::<Result<Vec<_>>>()?;
    if !alignment {
        return Ok((fused, None));
    }
    let stack = |f: fn(&FusedRepresentation) -> &Mat| {
        let views: Vec<_> = fused.iter().map(|r| f(r).view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
    };
    let (pp, pv) = (stack(|r| &r.pooled_p), stack(|r| &r.pooled_v));
    let mut s = Session::new(store, Mode::Eval);
    let (a, b) = (s.constant(pp), s.constant(pv));
    let (a, b) = align_graph(&mut s, adapter, a, b);
    let phon = s.value(a).clone();
    let vis = s.value(b).clone();
    let rank_one = rows_rank_one(&phon) || rows_rank_one(&vis);
    Ok((fused, Some(AlignmentPair { phon, vis, rank_one })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::objectives::{cgra_graph, correlation_matrix};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn setup(seed: u64, d_p: usize, d_v: usize, k: usize, s: usize) -> (ParamStore, CafmParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = CafmParams::new(&mut store, &mut rng, "cafm", d_p, d_v, k, s);
        // full-size residual branch for testing
        store.set(p.w_hp, rand_mat(&mut rng, d_p, k));
        store.set(p.w_hv, rand_mat(&mut rng, d_v, k));
        (store, p, rng)
    }

    fn mm(a: &Mat, b: &Mat) -> Mat {
        let mut out = Array2::zeros((a.nrows(), b.ncols()));
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut acc = 0.0;
                for t in 0..a.ncols() {
                    acc += a[[i, t]] * b[[t, j]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    }

    fn oracle(store: &ParamStore, p: &CafmParams, xp: &Mat, xv: &Mat) -> (Mat, Mat) {
        let (dp, dv, s) = (xp.nrows(), xv.nrows(), xp.ncols());
        let mut j = Array2::zeros((dp + dv, s));
        for c in 0..s {
            for r in 0..dp {
                j[[r, c]] = xp[[r, c]];
            }
            for r in 0..dv {
                j[[dp + r, c]] = xv[[r, c]];
            }
        }
        let sd = ((dp + dv) as f64).sqrt();
        let branch = |x: &Mat, wj, wx, wm, wh| {
            let mut xt = Array2::zeros((x.ncols(), x.nrows()));
            for a in 0..x.nrows() {
                for b in 0..x.ncols() {
                    xt[[b, a]] = x[[a, b]];
                }
            }
            let m = mm(&mm(&xt, store.get(wj)), &j).mapv(|v| (v / sd).tanh());
            let mut mt = m.clone();
            for a in 0..s {
                for b in 0..s {
                    mt[[a, b]] = m[[b, a]];
                }
            }
            let h = (mm(store.get(wx), x) + mm(store.get(wm), &mt)).mapv(|v| v.max(0.0));
            mm(store.get(wh), &h) + x
        };
        (
            branch(xp, p.w_jp, p.w_p, p.w_mp, p.w_hp),
            branch(xv, p.w_jv, p.w_v, p.w_mv, p.w_hv),
        )
    }

    #[test]
    fn cafm_matches_nested_loop_oracle() {
        let (store, p, mut rng) = setup(1, 4, 4, 2, 3);
        let (xp, xv) = (rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 3));
        let f = cafm(&store, &p, &xp, &xv).unwrap();
        let (op, ov) = oracle(&store, &p, &xp, &xv);
        for (a, b) in f.att_p.iter().zip(op.iter()).chain(f.att_v.iter().zip(ov.iter())) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(f.x_att.dim(), (8, 3));
        assert_eq!(f.x_att.slice(ndarray::s![..4, ..]), f.att_p);
        assert_eq!(f.x_att.slice(ndarray::s![4.., ..]), f.att_v);
        for i in 0..4 {
            assert!((f.pooled_p[[0, i]] - f.att_p.row(i).sum() / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unequal_widths_match_oracle() {
        let (store, p, mut rng) = setup(2, 5, 3, 4, 2);
        let (xp, xv) = (rand_mat(&mut rng, 5, 2), rand_mat(&mut rng, 3, 2));
        let f = cafm(&store, &p, &xp, &xv).unwrap();
        let (op, ov) = oracle(&store, &p, &xp, &xv);
        assert!((&f.att_p - &op).iter().all(|x| x.abs() < 1e-10));
        assert!((&f.att_v - &ov).iter().all(|x| x.abs() < 1e-10));
        assert_eq!(f.x_att.dim(), (8, 2));
    }

    #[test]
    fn zero_output_weights_give_identity() {
        let (mut store, p, mut rng) = setup(3, 4, 4, 3, 5);
        store.set(p.w_hp, Array2::zeros((4, 3)));
        store.set(p.w_hv, Array2::zeros((4, 3)));
        let (xp, xv) = (rand_mat(&mut rng, 4, 5), rand_mat(&mut rng, 4, 5));
        let f = cafm(&store, &p, &xp, &xv).unwrap();
        assert_eq!(f.att_p, xp);
        assert_eq!(f.att_v, xv);
    }

    #[test]
    fn correlation_maps_stay_inside_unit_interval() {
        let (store, p, mut rng) = setup(4, 4, 4, 2, 3);
        for scale in [1.0, 1e3, 1e8] {
            let (xp, xv) = (rand_mat(&mut rng, 4, 3) * scale, rand_mat(&mut rng, 4, 3) * scale);
            let (mp, mv) = p.correlation_maps(&store, &xp, &xv);
            assert!(mp.iter().chain(mv.iter()).all(|x| x.is_finite() && x.abs() <= 1.0));
            if scale == 1.0 {
                assert!(mp.iter().chain(mv.iter()).all(|x| x.abs() < 1.0));
            }
            let f = cafm(&store, &p, &xp, &xv).unwrap();
            assert!(f.x_att.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn sequence_mismatch_is_a_shape_error() {
        let (store, p, mut rng) = setup(5, 4, 4, 2, 3);
        let r = cafm(&store, &p, &rand_mat(&mut rng, 4, 3), &rand_mat(&mut rng, 4, 2));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn identical_batch_is_rank_one() {
        let (store, p, mut rng) = setup(6, 4, 4, 2, 3);
        let x = (rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 3));
        let (_, pair) = pvam_forward(&store, &p, None, &[x.clone(), x.clone(), x], true).unwrap();
        let pair = pair.unwrap();
        assert!(pair.rank_one);
        let c = correlation_matrix(&pair.phon, &pair.vis).unwrap();
        for j in 1..4 {
            assert!((&c.0.column(j).mapv(f64::abs) - &c.0.column(0).mapv(f64::abs)).iter().all(|x| x.abs() < 1e-12));
        }
        let y: Vec<_> = (0..3).map(|_| (rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 3))).collect();
        assert!(!pvam_forward(&store, &p, None, &y, true).unwrap().1.unwrap().rank_one);
    }

    #[test]
    fn small_batch_with_alignment_is_rejected() {
        let (store, p, mut rng) = setup(7, 4, 4, 2, 3);
        let x = (rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 3));
        assert!(matches!(pvam_forward(&store, &p, None, &[x.clone()], true), Err(Error::Domain(_))));
        assert!(pvam_forward(&store, &p, None, &[x], false).is_ok());
    }

    #[test]
    fn adapter_squares_the_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let p = CafmParams::new(&mut store, &mut rng, "cafm", 6, 4, 3, 2);
        let ad = AlignmentAdapter::new(&mut store, &mut rng, "adapt", 6, 4).unwrap();
        assert!(ad.on_phoneme);
        let xs: Vec<_> = (0..3).map(|_| (rand_mat(&mut rng, 6, 2), rand_mat(&mut rng, 4, 2))).collect();
        let pair = pvam_forward(&store, &p, Some(&ad), &xs, true).unwrap().1.unwrap();
        assert_eq!(pair.phon.dim(), (3, 4));
        assert_eq!(pair.vis.dim(), (3, 4));
        assert!(AlignmentAdapter::new(&mut store, &mut rng, "none", 4, 4).is_none());
    }

    #[test]
    fn cafm_plus_cgra_gradients_match_finite_differences() {
        let (mut store, p, mut rng) = setup(9, 4, 4, 2, 3);
        let inputs: Vec<(ParamId, ParamId)> = (0..3)
            .map(|i| {
                (
                    store.register(format!("xp{i}"), ParamKind::Weight, rand_mat(&mut rng, 4, 3)),
                    store.register(format!("xv{i}"), ParamKind::Weight, rand_mat(&mut rng, 4, 3)),
                )
            })
            .collect();
        let ids: Vec<ParamId> = store.learnable_ids().collect();
        let r = check_params(&store, &ids, 32, 1e-3, Mode::Train, 3, |s| {
            let mut rows_p = Vec::new();
            let mut rows_v = Vec::new();
            for &(a, b) in &inputs {
                let (xp, xv) = (s.param(a), s.param(b));
                let (ap, av) = p.forward(s, xp, xv)?;
                let tp = s.graph.transpose(ap);
                let tv = s.graph.transpose(av);
                rows_p.push(s.graph.mean_rows(tp));
                rows_v.push(s.graph.mean_rows(tv));
            }
            let a = s.graph.concat_rows(&rows_p);
            let b = s.graph.concat_rows(&rows_v);
            Ok(cgra_graph(&mut s.graph, a, b, 0.2))
        })
        .unwrap();
        assert!(r.checked > 50, "{r:?}");
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
