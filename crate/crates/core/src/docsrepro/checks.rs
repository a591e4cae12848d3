//! Executable versions of the numeric acceptance checks: oracle agreement,
//! hand-derived values, finite-difference gradients and structural
//! identities. Each returns named measurements.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles;
use crate::autograd::Mat;
use crate::clip::{FakeMode, Label};
use crate::common_space::{PfAnchor, ProjectionHeads};
use crate::encoder::{tap_table, window_mask, zero_params, AttentionLayer, EncoderConfig, Layout, Lfa, StreamEncoder};
use crate::error::Result;
use crate::gradcheck::{check_params, GradCheckReport};
use crate::objectives::{
    ce_loss, cgra_graph, cgra_loss, correlation_matrix, ec_loss, ec_loss_graph, infonce_graph, infonce_loss, ContrastBatch,
    Denominator, EcOptions, Reduction, PROB_EPS,
};
use crate::params::{Mode, ParamId, ParamKind, ParamStore, Session};
use crate::pipeline::{auc, grad_check_pretrain, ModelConfig, ModelParams};
use crate::pvam::{cafm, CafmParams};
use crate::screening::{filter_noncritical, PhonemeSegment, SegmentTimeline};
use crate::synthcorpus::{generate_clip, GenConfig};
use crate::tokenizer::{PatchSpec, VideoGrid};

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = store.learnable_ids().collect();
    for id in ids {
        let (r, c) = store.get(id).dim();
        let m = rand_mat(rng, r, c, scale);
        store.set(id, m);
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Largest disagreement between each loss and its loop oracle over
/// `instances` random small cases.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 7];
    for _ in 0..instances {
        let n = rng.random_range(1..8);
        let d = rng.random_range(2..7);
        let tau = rng.random_range(0.05..2.0);
        let p = rand_mat(&mut rng, n, d, 1.0);
        let v = rand_mat(&mut rng, n, d, 1.0);
        for (dedup, den) in [(false, Denominator::Literal), (true, Denominator::Dedup)] {
            let opts = EcOptions {
                denominator: den,
                reduction: Reduction::Sum,
            };
            let got = ec_loss(&ContrastBatch::new(p.clone(), v.clone(), tau)?, opts)?;
            worst[0] = worst[0].max(rel(got, oracles::ec_loss(&p, &v, tau, dedup)));
        }
        worst[1] = worst[1].max(rel(infonce_loss(&p, &v, tau)?, oracles::infonce_loss(&p, &v, tau)));

        let b = rng.random_range(2..9);
        let k = rng.random_range(1..6);
        let a = rand_mat(&mut rng, b, k, 1.0);
        let c = rand_mat(&mut rng, b, k, 1.0);
        let lambda = rng.random_range(1e-3..2.0);
        let got = correlation_matrix(&a, &c)?;
        let want = oracles::correlation_matrix(&a, &c);
        let diff = got.0.iter().zip(want.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst[2] = worst[2].max(diff);
        worst[3] = worst[3].max(rel(cgra_loss(&a, &c, lambda)?, oracles::cgra_loss(&a, &c, lambda)));

        let m = rng.random_range(1..20);
        let probs: Vec<f64> = (0..m)
            .map(|_| if rng.random_bool(0.1) { rng.random_range(0.0..1e-8) } else { rng.random_range(0.0..1.0) })
            .collect();
        let labels: Vec<f64> = (0..m).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        worst[4] = worst[4].max(rel(ce_loss(&probs, &labels)?, oracles::ce_loss(&probs, &labels, PROB_EPS)));

        let m = rng.random_range(2..120);
        let levels = rng.random_range(2..12);
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let pos: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        match (auc(&scores, &pos), oracles::auc_pairs(&scores, &pos)) {
            (Some(x), Some(y)) => worst[5] = worst[5].max((x - y).abs()),
            (None, None) => {}
            _ => worst[6] = 1.0,
        }
    }
    Ok(vec![
        ("ec_loss".into(), worst[0]),
        ("infonce_loss".into(), worst[1]),
        ("correlation_matrix".into(), worst[2]),
        ("cgra_loss".into(), worst[3]),
        ("ce_loss".into(), worst[4]),
        ("auc".into(), worst[5]),
        ("auc_definedness".into(), worst[6]),
    ])
}

/// Absolute errors of the two closed-form cases.
pub fn hand_values() -> Result<Vec<(String, f64)>> {
    let eye: Mat = Array2::eye(2);
    let ec = ec_loss(&ContrastBatch::new(eye.clone(), eye.clone(), 1.0)?, EcOptions::default())?;
    let want = 4.0 * (1.0 + 2.0 / std::f64::consts::E).ln();
    let cg = cgra_loss(&eye, &(-&eye), 5e-3)?;
    Ok(vec![
        ("ec_n2_orthonormal".into(), (ec - want).abs()),
        ("cgra_negative_identity".into(), (cg - 8.0).abs()),
    ])
}

fn sum_sq(s: &mut Session, v: crate::autograd::Var) -> crate::autograd::Var {
    let sq = s.graph.mul(v, v);
    s.graph.sum_all(sq)
}

/// Loss inputs registered as parameters so their gradients are checked.
fn input_store(rng: &mut ChaCha8Rng, shapes: &[(usize, usize)]) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.register(format!("x{i}"), ParamKind::Weight, rand_mat(rng, r, c, 1.0)))
        .collect();
    (store, ids)
}

const STEP: f64 = 1e-3;

/// Finite-difference checks of every differentiable component.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (name, layout) in [
        ("lfa_apply_line", Layout::Line(9)),
        ("lfa_apply_grid", Layout::Grid(VideoGrid { slots: 2, rows: 3, cols: 3 })),
    ] {
        let mut store = ParamStore::new();
        let lfa = Lfa::new(&mut store, &mut rng, "lfa", 8, 3, layout.n_taps(3));
        randomize(&mut store, &mut rng, 0.4);
        let x = rand_mat(&mut rng, layout.len(), 8, 1.0);
        let taps = Arc::new(tap_table(layout, 3));
        let ids: Vec<ParamId> = store.learnable_ids().collect();
        let r = check_params(&store, &ids, 8, STEP, Mode::Train, seed, |s| {
            let xv = s.constant(x.clone());
            let y = lfa.forward(s, xv, layout, &taps)?;
            Ok(sum_sq(s, y))
        })?;
        out.push((name.to_string(), r));
    }

    for shifted in [false, true] {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, &mut rng, "attn", 8, 2);
        randomize(&mut store, &mut rng, 0.4);
        let x = rand_mat(&mut rng, 10, 8, 1.0);
        let mask = window_mask(10, 4, if shifted { 2 } else { 0 });
        let ids: Vec<ParamId> = store.learnable_ids().collect();
        let r = check_params(&store, &ids, 8, STEP, Mode::Eval, seed, |s| {
            let xv = s.constant(x.clone());
            let y = layer.forward(s, xv, &mask);
            Ok(sum_sq(s, y))
        })?;
        out.push((format!("window_attention{}", if shifted { "_shifted" } else { "" }), r));
    }

    {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            n_blocks: 2,
            n_heads: 2,
            d: 8,
            window: 4,
            shift: 2,
            max_tokens: 16,
            ..EncoderConfig::default()
        };
        let enc = StreamEncoder::new(&mut store, &mut rng, "enc", cfg, true)?;
        randomize(&mut store, &mut rng, 0.3);
        let layout = Layout::Grid(VideoGrid { slots: 2, rows: 2, cols: 2 });
        let x = rand_mat(&mut rng, 8, 8, 1.0);
        let ids: Vec<ParamId> = store.learnable_ids().collect();
        let r = check_params(&store, &ids, 4, STEP, Mode::Train, seed, |s| {
            let xv = s.constant(x.clone());
            let y = enc.forward(s, xv, layout)?;
            let p = s.graph.mean_rows(y);
            Ok(sum_sq(s, p))
        })?;
        out.push(("encoder".into(), r));
    }

    {
        let mut store = ParamStore::new();
        let heads = ProjectionHeads::new(&mut store, &mut rng, "heads", 6, 5, PfAnchor::Phoneme);
        let (p, v, f) = (rand_mat(&mut rng, 4, 6, 1.0), rand_mat(&mut rng, 4, 6, 1.0), rand_mat(&mut rng, 4, 6, 1.0));
        let ids: Vec<ParamId> = store.learnable_ids().collect();
        let r = check_params(&store, &ids, 8, STEP, Mode::Train, seed, |s| {
            let (a, b, c) = (s.constant(p.clone()), s.constant(v.clone()), s.constant(f.clone()));
            let outs = heads.project(s, a, b, c)?;
            let mut total = sum_sq(s, outs[0]);
            for &o in &outs[1..] {
                let t = sum_sq(s, o);
                total = s.graph.add(total, t);
            }
            Ok(total)
        })?;
        out.push(("projection_heads".into(), r));
    }

    {
        let mut store = ParamStore::new();
        let p = CafmParams::new(&mut store, &mut rng, "cafm", 5, 4, 3, 6);
        randomize(&mut store, &mut rng, 0.5);
        let (xp, xv) = (rand_mat(&mut rng, 5, 6, 1.0), rand_mat(&mut rng, 4, 6, 1.0));
        let ids: Vec<ParamId> = store.learnable_ids().collect();
        let r = check_params(&store, &ids, 8, STEP, Mode::Eval, seed, |s| {
            let (a, b) = (s.constant(xp.clone()), s.constant(xv.clone()));
            let (ap, av) = p.forward(s, a, b)?;
            let l1 = sum_sq(s, ap);
            let l2 = sum_sq(s, av);
            Ok(s.graph.add(l1, l2))
        })?;
        out.push(("cafm".into(), r));
    }

    for denominator in [Denominator::Literal, Denominator::Dedup] {
        let (store, ids) = input_store(&mut rng, &[(5, 4), (5, 4)]);
        let opts = EcOptions {
            denominator,
            reduction: Reduction::Sum,
        };
        let r = check_params(&store, &ids, 20, STEP, Mode::Eval, seed, |s| {
            let (a, b) = (s.param(ids[0]), s.param(ids[1]));
            Ok(ec_loss_graph(&mut s.graph, a, b, 0.5, opts))
        })?;
        out.push((format!("ec_loss_{denominator:?}").to_lowercase(), r));
    }
    {
        let (store, ids) = input_store(&mut rng, &[(5, 4), (5, 4)]);
        let r = check_params(&store, &ids, 20, STEP, Mode::Eval, seed, |s| {
            let (a, b) = (s.param(ids[0]), s.param(ids[1]));
            Ok(infonce_graph(&mut s.graph, a, b, 0.5))
        })?;
        out.push(("infonce_loss".into(), r));
    }
    {
        let (store, ids) = input_store(&mut rng, &[(6, 3), (6, 3)]);
        let r = check_params(&store, &ids, 18, STEP, Mode::Eval, seed, |s| {
            let (a, b) = (s.param(ids[0]), s.param(ids[1]));
            Ok(cgra_graph(&mut s.graph, a, b, 0.3))
        })?;
        out.push(("cgra_loss".into(), r));
    }
    {
        let (store, ids) = input_store(&mut rng, &[(6, 2)]);
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let r = check_params(&store, &ids, 12, STEP, Mode::Eval, seed, |s| {
            let z = s.param(ids[0]);
            let p = crate::objectives::fake_probability_graph(&mut s.graph, z);
            Ok(s.graph.binary_cross_entropy(p, &labels, PROB_EPS))
        })?;
        out.push(("ce_loss".into(), r));
    }

    {
        let params = ModelParams::init(micro_model())?;
        let mut p = params.clone();
        randomize_nonzero(&mut p.store, &mut rng);
        let gen = GenConfig::default();
        let clips = [
            generate_clip(&gen, "g0", seed, Label::Real, FakeMode::None)?,
            generate_clip(&gen, "g1", seed + 1, Label::Real, FakeMode::None)?,
        ];
        out.push(("pretrain_loss_micro_batch".into(), grad_check_pretrain(&p, &clips, 2, STEP, seed)?));
    }
    Ok(out)
}

/// A small model for checks that run the full loss.
pub fn micro_model() -> ModelConfig {
    let enc = EncoderConfig {
        n_blocks: 2,
        n_heads: 2,
        d: 8,
        window: 8,
        shift: 4,
        max_tokens: 64,
        ..EncoderConfig::default()
    };
    ModelConfig {
        patch: PatchSpec {
            d: 8,
            ..PatchSpec::default()
        },
        phoneme: enc.clone(),
        viseme: enc.clone(),
        face: enc,
        d_c: 6,
        fusion_k: 4,
        ..ModelConfig::default()
    }
}

/// Replaces the zero-initialized branches with small random values so that
/// every parameter receives gradient.
fn randomize_nonzero(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.learnable_ids().collect();
    for id in ids {
        if store.get(id).iter().all(|&x| x == 0.0) {
            let (r, c) = store.get(id).dim();
            let m = rand_mat(rng, r, c, 0.2);
            store.set(id, m);
        }
    }
}

/// Structural identities; each value is the largest violation observed and
/// should be 0 (or within rounding).
pub fn structural_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // zero-weight encoder: pooled output equals the token mean
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            n_blocks: 2,
            n_heads: 2,
            d: 8,
            window: 4,
            shift: 2,
            max_tokens: 32,
            ..EncoderConfig::default()
        };
        let enc = StreamEncoder::new(&mut store, &mut rng, "enc", cfg, false)?;
        zero_params(&mut store, "enc");
        let n = rng.random_range(1..20);
        let x = rand_mat(&mut rng, n, 8, 2.0);
        let mut s = Session::inference(&store);
        let xv = s.constant(x.clone());
        let y = enc.forward(&mut s, xv, Layout::Line(n))?;
        worst = worst.max(s.value(y).iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    out.push(("encoder_zero_weight_identity".into(), worst));

    // CAFM with zero output maps returns its inputs
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut store = ParamStore::new();
        let p = CafmParams::new(&mut store, &mut rng, "cafm", 4, 3, 5, 6);
        store.set(p.w_hp, Array2::zeros((4, 5)));
        store.set(p.w_hv, Array2::zeros((3, 5)));
        let (xp, xv) = (rand_mat(&mut rng, 4, 6, 2.0), rand_mat(&mut rng, 3, 6, 2.0));
        let f = cafm(&store, &p, &xp, &xv)?;
        let d = f.att_p.iter().zip(xp.iter()).chain(f.att_v.iter().zip(xv.iter()));
        worst = worst.max(d.map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        // tanh maps stay inside the open unit interval
        let (mp, mv) = p.correlation_maps(&store, &xp, &xv);
        if mp.iter().chain(mv.iter()).any(|x| x.abs() > 1.0) {
            worst = f64::INFINITY;
        }
    }
    out.push(("cafm_zero_weight_identity_and_tanh_bounds".into(), worst));

    // filter idempotence
    let mut violations = 0.0;
    for _ in 0..50 {
        let pool = ["m", "aa", "iy", "sh", "l", "r", "ah", "n", "f", "t"];
        let mut segs = Vec::new();
        let mut t = 0;
        for _ in 0..rng.random_range(0..12) {
            let len = rng.random_range(10..200);
            segs.push(PhonemeSegment::new(pool[rng.random_range(0..pool.len())], t, t + len)?);
            t += len + rng.random_range(0..30);
        }
        let tl = SegmentTimeline::new("p", t.max(1), segs)?;
        let once = filter_noncritical(&tl);
        if filter_noncritical(&once) != once || once.segments().iter().any(|s| s.is_critical()) {
            violations += 1.0;
        }
    }
    out.push(("filter_idempotence".into(), violations));

    // cosine scale invariance of the contrastive losses
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let n = rng.random_range(2..6);
        let p = rand_mat(&mut rng, n, 4, 1.0);
        let v = rand_mat(&mut rng, n, 4, 1.0);
        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(0.1..10.0));
        let base = ec_loss(&ContrastBatch::new(p.clone(), v.clone(), 0.2)?, EcOptions::default())?;
        let scaled = ec_loss(&ContrastBatch::new(&p * a, &v * b, 0.2)?, EcOptions::default())?;
        worst = worst.max(rel(base, scaled));
        let base = infonce_loss(&p, &v, 0.2)?;
        let scaled = infonce_loss(&(&p * a), &(&v * b), 0.2)?;
        worst = worst.max(rel(base, scaled));
    }
    out.push(("contrastive_scale_invariance".into(), worst));

    // correlation entries inside [-1, 1]
    let mut excess: f64 = 0.0;
    for _ in 0..50 {
        let b = rng.random_range(2..10);
        let k = rng.random_range(1..6);
        let c = correlation_matrix(&rand_mat(&mut rng, b, k, 3.0), &rand_mat(&mut rng, b, k, 3.0))?;
        excess = excess.max(c.0.iter().map(|x| x.abs() - 1.0).fold(0.0, f64::max));
    }
    out.push(("correlation_in_unit_interval".into(), excess.max(0.0)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suite_is_tight() {
        for (name, v) in oracle_suite(30, 3).unwrap() {
            assert!(v < 1e-10, "{name}: {v}");
        }
    }

    #[test]
    fn structural_suite_is_clean() {
        for (name, v) in structural_suite(4).unwrap() {
            assert!(v < 1e-12, "{name}: {v}");
        }
    }
}
