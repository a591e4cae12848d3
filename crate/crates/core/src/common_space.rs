//! Projection heads into the phoneme-viseme space `S_pv` and the
//! phoneme-face space `S_pf`. Rows of every input are samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Linear};
use crate::params::{Mode, ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Pv,
    Pf,
}

/// Which `S_pv` vector feeds the `S_pf` anchor head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PfAnchor {
    /// The phoneme vector projected into `S_pv`.
    #[default]
    Phoneme,
    /// The viseme vector projected into `S_pv`.
    Viseme,
}

/// `Linear → BN → ReLU → Linear → BN`.
#[derive(Debug, Clone, Copy)]
pub struct TwoLayerHead {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
}

impl TwoLayerHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, d_out, true),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), d_out),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), d_out, d_out, true),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), d_out),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.fc1.forward(s, x);
        let h = self.bn1.forward(s, h);
        let h = s.graph.relu(h);
        let h = self.fc2.forward(s, h);
        self.bn2.forward(s, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionHeads {
    pub p_pv: Linear,
    pub v_pv: TwoLayerHead,
    pub p_pf: Linear,
    pub f_pf: TwoLayerHead,
    pub pf_anchor: PfAnchor,
    pub d: usize,
    pub d_c: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommonSpacePair {
    /// `N×d_c`.
    pub anchor: Mat,
    /// `N×d_c`.
    pub counterpart: Mat,
    pub space: Space,
}

impl ProjectionHeads {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, d_c: usize, pf_anchor: PfAnchor) -> Self {
        Self {
            p_pv: Linear::new(store, rng, &format!("{name}.p_pv"), d, d_c, true),
            v_pv: TwoLayerHead::new(store, rng, &format!("{name}.v_pv"), d, d_c),
            p_pf: Linear::new(store, rng, &format!("{name}.p_pf"), d_c, d_c, true),
            f_pf: TwoLayerHead::new(store, rng, &format!("{name}.f_pf"), d, d_c),
            pf_anchor,
            d,
            d_c,
        }
    }

    fn check(&self, s: &Session, v: Var, width: usize, what: &str) -> Result<()> {
        let w = s.graph.shape(v).1;
        if w != width {
            return Err(Error::Shape(format!("{what} has width {w}, head expects {width}")));
        }
        Ok(())
    }

    /// `(g_p_pv(phon), g_v_pv(vis))`.
    pub fn to_pv(&self, s: &mut Session, phon: Var, vis: Var) -> Result<(Var, Var)> {
        self.check(s, phon, self.d, "phoneme embedding")?;
        self.check(s, vis, self.d, "viseme embedding")?;
        if s.graph.shape(phon).0 != s.graph.shape(vis).0 {
            return Err(Error::Shape("phoneme and viseme batches differ in size".into()));
        }
        let a = self.p_pv.forward(s, phon);
        let c = self.v_pv.forward(s, vis);
        Ok((a, c))
    }

    /// `(g_p_pf(pv), g_f_pf(face))` where `pv` is the `S_pv` vector selected
    /// by [`PfAnchor`].
    pub fn to_pf(&self, s: &mut Session, pv: Var, face: Var) -> Result<(Var, Var)> {
        self.check(s, pv, self.d_c, "S_pv vector")?;
        self.check(s, face, self.d, "face embedding")?;
        if s.graph.shape(pv).0 != s.graph.shape(face).0 {
            return Err(Error::Shape("S_pv and face batches differ in size".into()));
        }
        let a = self.p_pf.forward(s, pv);
        let c = self.f_pf.forward(s, face);
        Ok((a, c))
    }

    /// Both spaces at once: `(pv anchor, pv counterpart, pf anchor, pf counterpart)`.
    pub fn project(&self, s: &mut Session, phon: Var, vis: Var, face: Var) -> Result<[Var; 4]> {
        let (pa, pc) = self.to_pv(s, phon, vis)?;
        let src = match self.pf_anchor {
            PfAnchor::Phoneme => pa,
            PfAnchor::Viseme => pc,
        };
        let (fa, fc) = self.to_pf(s, src, face)?;
        Ok([pa, pc, fa, fc])
    }
}

fn run<F>(store: &ParamStore, mode: Mode, f: F) -> Result<(Mat, Mat)>
where
    F: FnOnce(&mut Session) -> Result<(Var, Var)>,
{
    let mut s = Session::new(store, mode);
    let (a, c) = f(&mut s)?;
    Ok((s.value(a).clone(), s.value(c).clone()))
}

/// Matrix form of [`ProjectionHeads::to_pv`].
pub fn to_pv(store: &ParamStore, heads: &ProjectionHeads, phon: &Mat, vis: &Mat, mode: Mode) -> Result<CommonSpacePair> {
    let (anchor, counterpart) = run(store, mode, |s| {
        let p = s.constant(phon.clone());
        let v = s.constant(vis.clone());
        heads.to_pv(s, p, v)
    })?;
    Ok(CommonSpacePair {
        anchor,
        counterpart,
        space: Space::Pv,
    })
}

/// Matrix form of [`ProjectionHeads::to_pf`].
pub fn to_pf(store: &ParamStore, heads: &ProjectionHeads, pv: &Mat, face: &Mat, mode: Mode) -> Result<CommonSpacePair> {
    let (anchor, counterpart) = run(store, mode, |s| {
        let p = s.constant(pv.clone());
        let f = s.constant(face.clone());
        heads.to_pf(s, p, f)
    })?;
    Ok(CommonSpacePair {
        anchor,
        counterpart,
        space: Space::Pf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::NORM_EPS;
    use crate::params::ParamId;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn setup(seed: u64, d: usize, d_c: usize) -> (ParamStore, ProjectionHeads, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let heads = ProjectionHeads::new(&mut store, &mut rng, "heads", d, d_c, PfAnchor::Phoneme);
        // non-trivial biases and running statistics
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let (r, c) = store.get(id).dim();
            let name = store.name(id).to_string();
            let m = if name.ends_with("running_var") {
                Array2::from_shape_fn((r, c), |_| rng.random_range(0.5..2.0))
            } else {
                rand_mat(&mut rng, r, c)
            };
            store.set(id, m);
        }
        (store, heads, rng)
    }

    fn affine(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
        let (w, b) = (store.get(l.w), store.get(l.b.unwrap()));
        let mut y = Array2::zeros((x.nrows(), w.ncols()));
        for n in 0..x.nrows() {
            for j in 0..w.ncols() {
                y[[n, j]] = b[[0, j]] + (0..w.nrows()).map(|i| x[[n, i]] * w[[i, j]]).sum::<f64>();
            }
        }
        y
    }

    fn bn_eval(store: &ParamStore, bn: &BatchNorm, x: &Mat) -> Mat {
        let (m, v) = (store.get(bn.running_mean), store.get(bn.running_var));
        let (g, b) = (store.get(bn.gamma), store.get(bn.beta));
        Array2::from_shape_fn(x.dim(), |(n, j)| g[[0, j]] * (x[[n, j]] - m[[0, j]]) / (v[[0, j]] + NORM_EPS).sqrt() + b[[0, j]])
    }

    fn two_layer(store: &ParamStore, h: &TwoLayerHead, x: &Mat) -> Mat {
        let a = bn_eval(store, &h.bn1, &affine(store, &h.fc1, x)).mapv(|v| v.max(0.0));
        bn_eval(store, &h.bn2, &affine(store, &h.fc2, &a))
    }

    fn close(a: &Mat, b: &Mat, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn pv_and_pf_match_algebra_oracle() {
        let (store, heads, mut rng) = setup(1, 6, 5);
        let (p, v, f) = (rand_mat(&mut rng, 3, 6), rand_mat(&mut rng, 3, 6), rand_mat(&mut rng, 3, 6));
        let pv = to_pv(&store, &heads, &p, &v, Mode::Eval).unwrap();
        close(&pv.anchor, &affine(&store, &heads.p_pv, &p), 1e-10);
        close(&pv.counterpart, &two_layer(&store, &heads.v_pv, &v), 1e-10);
        let pf = to_pf(&store, &heads, &pv.anchor, &f, Mode::Eval).unwrap();
        close(&pf.anchor, &affine(&store, &heads.p_pf, &pv.anchor), 1e-10);
        close(&pf.counterpart, &two_layer(&store, &heads.f_pf, &f), 1e-10);
        assert_eq!(pf.space, Space::Pf);
    }

    #[test]
    fn zero_inputs_and_biases_give_zero_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let heads = ProjectionHeads::new(&mut store, &mut rng, "h", 4, 4, PfAnchor::Phoneme);
        let z = Array2::zeros((2, 4));
        let pv = to_pv(&store, &heads, &z, &z, Mode::Eval).unwrap();
        assert!(pv.anchor.iter().chain(pv.counterpart.iter()).all(|&x| x == 0.0));
        let pf = to_pf(&store, &heads, &pv.anchor, &z, Mode::Eval).unwrap();
        assert!(pf.anchor.iter().chain(pf.counterpart.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn identity_head_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let heads = ProjectionHeads::new(&mut store, &mut rng, "h", 4, 4, PfAnchor::Phoneme);
        store.set(heads.p_pv.w, Array2::eye(4));
        let p = rand_mat(&mut rng, 2, 4);
        let pv = to_pv(&store, &heads, &p, &p, Mode::Eval).unwrap();
        assert_eq!(pv.anchor, p);
    }

    #[test]
    fn composed_phoneme_path_is_linear_without_biases() {
        let (mut store, heads, mut rng) = setup(4, 5, 5);
        for b in [heads.p_pv.b.unwrap(), heads.p_pf.b.unwrap()] {
            store.set(b, Array2::zeros((1, 5)));
        }
        let p = rand_mat(&mut rng, 2, 5);
        let f = rand_mat(&mut rng, 2, 5);
        let a1 = to_pf(&store, &heads, &to_pv(&store, &heads, &p, &p, Mode::Eval).unwrap().anchor, &f, Mode::Eval).unwrap();
        let p3 = &p * -2.5;
        let a3 = to_pf(&store, &heads, &to_pv(&store, &heads, &p3, &p, Mode::Eval).unwrap().anchor, &f, Mode::Eval).unwrap();
        close(&a3.anchor, &(&a1.anchor * -2.5), 1e-12);
    }

    #[test]
    fn pf_anchor_depends_only_on_pv_phoneme_vector() {
        let (mut store, heads, mut rng) = setup(5, 6, 4);
        // make the last two input channels invisible to g_p_pv
        let mut w = store.get(heads.p_pv.w).clone();
        w.row_mut(4).fill(0.0);
        w.row_mut(5).fill(0.0);
        store.set(heads.p_pv.w, w);
        let (p, v, f) = (rand_mat(&mut rng, 3, 6), rand_mat(&mut rng, 3, 6), rand_mat(&mut rng, 3, 6));
        let mut p2 = p.clone();
        p2.column_mut(4).mapv_inplace(|x| x + 3.0);
        p2.column_mut(5).mapv_inplace(|x| x - 1.0);
        let project = |p: &Mat| {
            let mut s = Session::new(&store, Mode::Eval);
            let (pv, vv, fv) = (s.constant(p.clone()), s.constant(v.clone()), s.constant(f.clone()));
            let [pa, _, fa, _] = heads.project(&mut s, pv, vv, fv).unwrap();
            (s.value(pa).clone(), s.value(fa).clone())
        };
        let (pa1, fa1) = project(&p);
        let (pa2, fa2) = project(&p2);
        assert_eq!(pa1, pa2);
        assert_eq!(fa1, fa2);
        // replaying from the probed intermediate alone reproduces the anchor
        let direct = to_pf(&store, &heads, &pa1, &f, Mode::Eval).unwrap();
        assert_eq!(direct.anchor, fa1);
    }

    #[test]
    fn frozen_unit_statistics_reduce_heads_to_affine_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let heads = ProjectionHeads::new(&mut store, &mut rng, "h", 4, 3, PfAnchor::Phoneme);
        let v = rand_mat(&mut rng, 2, 4);
        let pv = to_pv(&store, &heads, &v, &v, Mode::Eval).unwrap();
        let s = 1.0 / (1.0 + NORM_EPS).sqrt();
        let h1 = (affine(&store, &heads.v_pv.fc1, &v) * s).mapv(|x| x.max(0.0));
        let expect = affine(&store, &heads.v_pv.fc2, &h1) * s;
        close(&pv.counterpart, &expect, 1e-12);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let (store, heads, mut rng) = setup(7, 4, 3);
        let bad = rand_mat(&mut rng, 2, 5);
        let ok = rand_mat(&mut rng, 2, 4);
        assert!(matches!(to_pv(&store, &heads, &bad, &ok, Mode::Eval), Err(Error::Shape(_))));
        assert!(matches!(to_pf(&store, &heads, &ok, &ok, Mode::Eval), Err(Error::Shape(_))));
    }
}
