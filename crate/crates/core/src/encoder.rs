//! Windowed self-attention encoder with a local feature aggregation (LFA)
//! block in every layer. One encoder instance per stream.
//!
//! A block computes, with pre-normalization,
//!
//! ```text
//! X_mid = X + Attn(LN(X))          (windowed, alternating shift)
//! X_lfa = X_mid + PW(BN(PW(DW(BN(X_mid)))))
//! X_out = X_lfa + FFN(LN(X_lfa))
//! ```
//!
//! or with the LFA step moved before attention when
//! [`LfaPosition::PreAttn`] is selected.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Mat, TapTable, Var};
use crate::error::{Error, Result};
use crate::layers::{ChannelNorm, LayerNorm, Linear};
use crate::params::{normal_init, ParamId, ParamKind, ParamStore, Session};
use crate::tokenizer::{TokenSequence, VideoGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LfaPosition {
    PreAttn,
    #[default]
    PostAttn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d: usize,
    pub window: usize,
    pub shift: usize,
    pub lfa_kernel: usize,
    pub lfa_position: LfaPosition,
    /// FFN hidden width as a multiple of `d`.
    pub ffn_mult: usize,
    pub max_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            n_heads: 4,
            d: 64,
            window: 16,
            shift: 8,
            lfa_kernel: 3,
            lfa_position: LfaPosition::PostAttn,
            ffn_mult: 2,
            max_tokens: 128,
        }
    }
}

impl EncoderConfig {
    /// Twelve blocks with eight heads, the larger identity-stream setting.
    pub fn identity_stream(d: usize, max_tokens: usize) -> Self {
        Self {
            n_blocks: 12,
            n_heads: 8,
            d,
            max_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.d, self.n_heads)));
        }
        if self.window < 2 {
            return Err(Error::Config(format!("window must be ≥ 2, got {}", self.window)));
        }
        if self.shift >= self.window {
            return Err(Error::Config(format!("shift {} must be below window {}", self.shift, self.window)));
        }
        if self.lfa_kernel % 2 == 0 {
            return Err(Error::Config(format!("lfa_kernel must be odd, got {}", self.lfa_kernel)));
        }
        if self.ffn_mult == 0 || self.max_tokens == 0 {
            return Err(Error::Config("ffn_mult and max_tokens must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Spatial arrangement of a token sequence, used for LFA neighbourhoods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Audio tokens on a line.
    Line(usize),
    /// Video tokens ordered (slot, row, col).
    Grid(VideoGrid),
}

impl Layout {
    pub fn len(&self) -> usize {
        match self {
            Layout::Line(n) => *n,
            Layout::Grid(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_taps(&self, k: usize) -> usize {
        match self {
            Layout::Line(_) => k,
            Layout::Grid(_) => k * k,
        }
    }
}

/// Depthwise-convolution neighbour table: a `k`-tap line for [`Layout::Line`],
/// a `k×k` patch within each temporal slot for [`Layout::Grid`]. Out-of-range
/// neighbours are zero padding.
pub fn tap_table(layout: Layout, k: usize) -> TapTable {
    let half = (k / 2) as isize;
    let taps = match layout {
        Layout::Line(n) => (0..n)
            .map(|i| {
                (0..k)
                    .map(|o| {
                        let j = i as isize + o as isize - half;
                        (0..n as isize).contains(&j).then_some(j as usize)
                    })
                    .collect()
            })
            .collect(),
        Layout::Grid(g) => {
            let mut all = Vec::with_capacity(g.len());
            for slot in 0..g.slots {
                for y in 0..g.rows {
                    for x in 0..g.cols {
                        let mut row = Vec::with_capacity(k * k);
                        for dy in 0..k {
                            for dx in 0..k {
                                let yy = y as isize + dy as isize - half;
                                let xx = x as isize + dx as isize - half;
                                let inside = (0..g.rows as isize).contains(&yy) && (0..g.cols as isize).contains(&xx);
                                row.push(inside.then(|| (slot * g.rows + yy as usize) * g.cols + xx as usize));
                            }
                        }
                        all.push(row);
                    }
                }
            }
            all
        }
    };
    TapTable { n_taps: layout.n_taps(k), taps }
}

/// Attention mask for windows of `window` tokens. With a shift, the first
/// `shift` tokens (those a cyclic roll would wrap around) form their own
/// group and the remaining windows start at `shift`. The shift is ignored
/// when the whole sequence fits one window. A trailing partial window acts
/// as a padded window whose padding is masked out.
pub fn window_mask(len: usize, window: usize, shift: usize) -> AttnMask {
    let shift = if len <= window { 0 } else { shift };
    let group = |p: usize| -> usize {
        if p < shift {
            0
        } else {
            1 + (p - shift) / window
        }
    };
    let groups: Vec<usize> = (0..len).map(group).collect();
    let mut allowed = vec![false; len * len];
    for i in 0..len {
        for j in 0..len {
            allowed[i * len + j] = groups[i] == groups[j];
        }
    }
    AttnMask { len, allowed }
}

#[derive(Debug, Clone, Copy)]
pub struct Lfa {
    pub norm1: ChannelNorm,
    /// `n_taps × d` depthwise kernel.
    pub dw: ParamId,
    pub pw1: Linear,
    pub norm2: ChannelNorm,
    /// Zero-initialized so a fresh block is the identity.
    pub pw2: Linear,
    pub kernel: usize,
    pub d: usize,
}

impl Lfa {
    /// `n_taps` is `k` for a line layout and `k²` for a grid layout.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, kernel: usize, n_taps: usize) -> Self {
        Self {
            norm1: ChannelNorm::new(store, &format!("{name}.bn1"), d),
            dw: store.register(
                format!("{name}.dw"),
                ParamKind::Weight,
                normal_init(rng, n_taps, d, (1.0 / n_taps as f64).sqrt()),
            ),
            pw1: Linear::new(store, rng, &format!("{name}.pw1"), d, d, true),
            norm2: ChannelNorm::new(store, &format!("{name}.bn2"), d),
            pw2: Linear::zeroed(store, &format!("{name}.pw2"), d, d, true),
            kernel,
            d,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, layout: Layout, taps: &Arc<TapTable>) -> Result<Var> {
        let (n, c) = s.graph.shape(x);
        if c != self.d {
            return Err(Error::Shape(format!("LFA has {} channels, input has {c}", self.d)));
        }
        if n != layout.len() || taps.taps.len() != n {
            return Err(Error::Shape(format!("LFA layout covers {} tokens, input has {n}", layout.len())));
        }
        let k = s.param(self.dw);
        if s.graph.shape(k).0 != taps.n_taps {
            return Err(Error::Shape(format!(
                "LFA kernel has {} taps, layout needs {}",
                s.graph.shape(k).0,
                taps.n_taps
            )));
        }
        let h = self.norm1.forward(s, x);
        let h = s.graph.depthwise_conv(h, k, taps.clone());
        let h = self.pw1.forward(s, h);
        let h = self.norm2.forward(s, h);
        let h = self.pw2.forward(s, h);
        Ok(s.graph.add(x, h))
    }
}

/// Pre-normalized multi-head attention with residual.
#[derive(Debug, Clone, Copy)]
pub struct AttentionLayer {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Zero-initialized output projection.
    pub o: Linear,
    pub heads: usize,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, true),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, true),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, true),
            o: Linear::zeroed(store, &format!("{name}.o"), d, d, true),
            heads,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, mask: &AttnMask) -> Var {
        let h = self.norm.forward(s, x);
        let q = self.q.forward(s, h);
        let k = self.k.forward(s, h);
        let v = self.v.forward(s, h);
        let a = s.graph.attention(q, k, v, self.heads, mask);
        let a = self.o.forward(s, a);
        s.graph.add(x, a)
    }
}

/// `X + W₂·GELU(W₁·LN(X))`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d, true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.norm.forward(s, x);
        let h = self.fc1.forward(s, h);
        let h = s.graph.gelu(h);
        let h = self.fc2.forward(s, h);
        s.graph.add(x, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    pub attn: AttentionLayer,
    pub lfa: Lfa,
    pub ffn: FeedForward,
    pub shifted: bool,
}

#[derive(Debug, Clone)]
pub struct StreamEncoder {
    pub config: EncoderConfig,
    pub blocks: Vec<EncoderBlock>,
}

/// Encoder output: the token sequence and its row mean.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamEmbedding {
    pub sequence: Mat,
    /// `1×d`.
    pub pooled: Mat,
}

impl StreamEncoder {
    /// `grid` selects 2-D LFA neighbourhoods (video) over 1-D ones (audio).
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, config: EncoderConfig, grid: bool) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let k = config.lfa_kernel;
        let n_taps = if grid { k * k } else { k };
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let p = format!("{name}.block{i}");
                EncoderBlock {
                    attn: AttentionLayer::new(store, rng, &format!("{p}.attn"), d, config.n_heads),
                    lfa: Lfa::new(store, rng, &format!("{p}.lfa"), d, k, n_taps),
                    ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, d * config.ffn_mult),
                    shifted: i % 2 == 1,
                }
            })
            .collect();
        Ok(Self { config, blocks })
    }

    fn check_input(&self, s: &Session, x: Var, layout: Layout) -> Result<()> {
        let (n, d) = s.graph.shape(x);
        if n == 0 {
            return Err(Error::EmptyInput("encoder input has no tokens".into()));
        }
        if d != self.config.d {
            return Err(Error::Shape(format!("encoder width {} but tokens have {d}", self.config.d)));
        }
        if n > self.config.max_tokens {
            return Err(Error::Capacity {
                what: "encoder input".into(),
                got: n,
                max: self.config.max_tokens,
            });
        }
        if layout.len() != n {
            return Err(Error::Shape(format!("layout covers {} tokens, input has {n}", layout.len())));
        }
        Ok(())
    }

    /// Encodes an `S×d` token map, returning the `S×d` output sequence.
    pub fn forward(&self, s: &mut Session, x: Var, layout: Layout) -> Result<Var> {
        self.check_input(s, x, layout)?;
        let n = layout.len();
        let taps = Arc::new(tap_table(layout, self.config.lfa_kernel));
        let plain = window_mask(n, self.config.window, 0);
        let shifted = window_mask(n, self.config.window, self.config.shift);
        let mut h = x;
        for b in &self.blocks {
            let mask = if b.shifted { &shifted } else { &plain };
            h = match self.config.lfa_position {
                LfaPosition::PostAttn => {
                    let m = b.attn.forward(s, h, mask);
                    b.lfa.forward(s, m, layout, &taps)?
                }
                LfaPosition::PreAttn => {
                    let l = b.lfa.forward(s, h, layout, &taps)?;
                    b.attn.forward(s, l, mask)
                }
            };
            h = b.ffn.forward(s, h);
        }
        Ok(h)
    }

    /// Parameter-free inference on a token sequence.
    pub fn encode_stream(&self, store: &ParamStore, tokens: &TokenSequence, layout: Layout) -> Result<StreamEmbedding> {
        let mut s = Session::inference(store);
        let x = s.constant(tokens.tokens.clone());
        let y = self.forward(&mut s, x, layout)?;
        let sequence = s.value(y).clone();
        let pooled = mean_row(&sequence);
        Ok(StreamEmbedding { sequence, pooled })
    }
}

fn mean_row(m: &Mat) -> Mat {
    (m.sum_axis(ndarray::Axis(0)) / m.nrows() as f64).insert_axis(ndarray::Axis(0))
}

/// Windowed attention sublayer on a bare matrix; `shifted` selects the
/// shifted window partition.
pub fn window_attention(
    store: &ParamStore,
    layer: &AttentionLayer,
    tokens: &Mat,
    window: usize,
    shift: usize,
    shifted: bool,
) -> Result<Mat> {
    let d = store.get(layer.q.w).nrows();
    if tokens.ncols() != d {
        return Err(Error::Shape(format!("attention width {d}, tokens have {}", tokens.ncols())));
    }
    let mask = window_mask(tokens.nrows(), window, if shifted { shift } else { 0 });
    let mut s = Session::inference(store);
    let x = s.constant(tokens.clone());
    let y = layer.forward(&mut s, x, &mask);
    Ok(s.value(y).clone())
}

/// LFA on a bare matrix.
pub fn lfa_apply(store: &ParamStore, lfa: &Lfa, x: &Mat, layout: Layout) -> Result<Mat> {
    let taps = Arc::new(tap_table(layout, lfa.kernel));
    let mut s = Session::inference(store);
    let xv = s.constant(x.clone());
    let y = lfa.forward(&mut s, xv, layout, &taps)?;
    Ok(s.value(y).clone())
}

/// Zeroes every learnable tensor whose name starts with `prefix`.
pub fn zero_params(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        if store.kind(id).learnable() {
            let shape = store.get(id).dim();
            store.set(id, Array2::zeros(shape));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::params::Mode;
    use crate::tokenizer::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
        let ids: Vec<ParamId> = store.learnable_ids().collect();
        for id in ids {
            let shape = store.get(id).dim();
            let m = rand_mat(rng, shape.0, shape.1, scale);
            store.set(id, m);
        }
    }

    fn small_config(d: usize, n_blocks: usize) -> EncoderConfig {
        EncoderConfig {
            n_blocks,
            n_heads: 2,
            d,
            window: 4,
            shift: 2,
            max_tokens: 32,
            ..EncoderConfig::default()
        }
    }

    fn layer_norm(x: &Mat) -> Mat {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.mapv_inplace(|v| (v - mean) / (var + crate::layers::NORM_EPS).sqrt());
        }
        out
    }

    fn lin(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
        let mut y = x.dot(store.get(l.w));
        if let Some(b) = l.b {
            y += &store.get(b).row(0);
        }
        y
    }

    fn softmax_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
        let (n, d) = q.dim();
        let dh = d / heads;
        let mut out = Array2::zeros((n, d));
        for h in 0..heads {
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for j in 0..n {
                    logits[j] = (0..dh).map(|c| q[[i, h * dh + c]] * k[[j, h * dh + c]]).sum::<f64>() / (dh as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for j in 0..n {
                    let p = (logits[j] - mx).exp() / z;
                    for c in 0..dh {
                        out[[i, h * dh + c]] += p * v[[j, h * dh + c]];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_lfa_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lfa = Lfa::new(&mut store, &mut rng, "lfa", 8, 3, 3);
        zero_params(&mut store, "lfa");
        let x = rand_mat(&mut rng, 6, 8, 1.0);
        let y = lfa_apply(&store, &lfa, &x, Layout::Line(6)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn lfa_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lfa = Lfa::new(&mut store, &mut rng, "lfa", 8, 3, 3);
        let x = Array2::zeros((4, 6));
        assert!(matches!(lfa_apply(&store, &lfa, &x, Layout::Line(4)), Err(Error::Shape(_))));
    }

    #[test]
    fn depthwise_grid_matches_nested_loop_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 3;
        let grid = VideoGrid { slots: 1, rows: 5, cols: 5 };
        let layout = Layout::Grid(grid);
        let x = rand_mat(&mut rng, 25, c, 1.0);
        let kernel = rand_mat(&mut rng, 9, c, 1.0);
        let mut g = crate::autograd::Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(kernel.clone());
        let y = g.depthwise_conv(xv, kv, Arc::new(tap_table(layout, 3)));
        let got = g.value(y);
        for ch in 0..c {
            for yy in 0..5i32 {
                for xx in 0..5i32 {
                    let mut acc = 0.0;
                    for dy in -1..=1i32 {
                        for dx in -1..=1i32 {
                            let (sy, sx) = (yy + dy, xx + dx);
                            if (0..5).contains(&sy) && (0..5).contains(&sx) {
                                let w = kernel[[((dy + 1) * 3 + dx + 1) as usize, ch]];
                                acc += w * x[[(sy * 5 + sx) as usize, ch]];
                            }
                        }
                    }
                    assert!((got[[(yy * 5 + xx) as usize, ch]] - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn depthwise_constant_input_is_constant_in_interior() {
        let grid = VideoGrid { slots: 2, rows: 5, cols: 5 };
        let layout = Layout::Grid(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kernel = rand_mat(&mut rng, 9, 2, 1.0);
        let mut g = crate::autograd::Graph::new();
        let xv = g.constant(Array2::from_elem((50, 2), 1.5));
        let kv = g.constant(kernel);
        let y = g.depthwise_conv(xv, kv, Arc::new(tap_table(layout, 3)));
        let out = g.value(y);
        let interior: Vec<usize> = (0..2)
            .flat_map(|s| (1..4).flat_map(move |r| (1..4).map(move |c| (s * 5 + r) * 5 + c)))
            .collect();
        for &i in &interior {
            for ch in 0..2 {
                assert!((out[[i, ch]] - out[[interior[0], ch]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_single_head_attention_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = crate::autograd::Graph::new();
        let q = rand_mat(&mut rng, 2, 3, 1.0);
        let k = rand_mat(&mut rng, 2, 3, 1.0);
        let v = rand_mat(&mut rng, 2, 3, 1.0);
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let y = g.attention(qv, kv, vv, 1, &AttnMask::full(2));
        let out = g.value(y);
        let sc = 1.0 / 3f64.sqrt();
        for i in 0..2 {
            let l0 = q.row(i).dot(&k.row(0)) * sc;
            let l1 = q.row(i).dot(&k.row(1)) * sc;
            let p0 = 1.0 / (1.0 + (l1 - l0).exp());
            for c in 0..3 {
                let expect = p0 * v[[0, c]] + (1.0 - p0) * v[[1, c]];
                assert!((out[[i, c]] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn full_window_equals_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, &mut rng, "a", 8, 2);
        randomize(&mut store, &mut rng, 0.5);
        let x = rand_mat(&mut rng, 6, 8, 1.0);
        let got = window_attention(&store, &layer, &x, 6, 3, true).unwrap();
        let h = layer_norm(&x) * &store.get(layer.norm.gamma).row(0) + &store.get(layer.norm.beta).row(0);
        let a = softmax_attention(&lin(&store, &layer.q, &h), &lin(&store, &layer.k, &h), &lin(&store, &layer.v, &h), 2);
        let expect = &x + &lin(&store, &layer.o, &a);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn windows_are_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, &mut rng, "a", 4, 1);
        randomize(&mut store, &mut rng, 0.5);
        let x = rand_mat(&mut rng, 12, 4, 1.0);
        let base = window_attention(&store, &layer, &x, 4, 0, false).unwrap();
        // change tokens outside the first window; its outputs must not move
        let mut x2 = x.clone();
        for i in 4..12 {
            for c in 0..4 {
                x2[[i, c]] += 1.0;
            }
        }
        let moved = window_attention(&store, &layer, &x2, 4, 0, false).unwrap();
        for i in 0..4 {
            assert_eq!(base.row(i), moved.row(i));
        }
        // permuting tokens inside window 2 permutes its outputs the same way
        let mut x3 = x.clone();
        let perm = [8usize, 10, 9, 11];
        for (dst, &src) in (8..12).zip(perm.iter()) {
            x3.row_mut(dst).assign(&x.row(src));
        }
        let p = window_attention(&store, &layer, &x3, 4, 0, false).unwrap();
        for (dst, &src) in (8..12).zip(perm.iter()) {
            for c in 0..4 {
                assert!((p[[dst, c]] - base[[src, c]]).abs() < 1e-12);
            }
        }
        for i in 0..8 {
            assert_eq!(p.row(i), base.row(i));
        }
    }

    #[test]
    fn shifted_mask_groups() {
        let m = window_mask(10, 4, 2);
        assert!(m.get(0, 1) && !m.get(1, 2));
        assert!(m.get(2, 5) && !m.get(5, 6));
        assert!(m.get(6, 9));
        // whole sequence in one window: shift ignored
        let m = window_mask(4, 4, 2);
        assert!(m.allowed.iter().all(|&a| a));
    }

    fn encoder_setup(seed: u64, d: usize, blocks: usize, grid: bool) -> (ParamStore, StreamEncoder, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = StreamEncoder::new(&mut store, &mut rng, "enc", small_config(d, blocks), grid).unwrap();
        (store, enc, rng)
    }

    fn seq(tokens: Mat) -> TokenSequence {
        let n = tokens.nrows();
        TokenSequence {
            tokens,
            positions: (0..n).collect(),
            modality: Modality::Phoneme,
        }
    }

    #[test]
    fn zero_network_pools_to_token_mean() {
        let (mut store, enc, mut rng) = encoder_setup(7, 8, 2, false);
        zero_params(&mut store, "enc");
        let x = rand_mat(&mut rng, 9, 8, 1.0);
        let out = enc.encode_stream(&store, &seq(x.clone()), Layout::Line(9)).unwrap();
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        for (a, b) in out.pooled.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_encoder_is_identity_plus_ffn() {
        let (store, enc, mut rng) = encoder_setup(8, 8, 2, false);
        let x = rand_mat(&mut rng, 7, 8, 1.0);
        let out = enc.encode_stream(&store, &seq(x.clone()), Layout::Line(7)).unwrap();
        let mut h = x;
        for b in &enc.blocks {
            let n = layer_norm(&h) * &store.get(b.ffn.norm.gamma).row(0) + &store.get(b.ffn.norm.beta).row(0);
            let hid = lin(&store, &b.ffn.fc1, &n).mapv(crate::autograd::gelu);
            h = &h + &lin(&store, &b.ffn.fc2, &hid);
        }
        for (a, b) in out.sequence.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_block_without_lfa_is_plain_transformer_block() {
        let (mut store, mut enc, mut rng) = encoder_setup(9, 8, 1, false);
        enc.config.window = 6;
        randomize(&mut store, &mut rng, 0.4);
        zero_params(&mut store, "enc.block0.lfa");
        let x = rand_mat(&mut rng, 6, 8, 1.0);
        let out = enc.encode_stream(&store, &seq(x.clone()), Layout::Line(6)).unwrap();
        let b = &enc.blocks[0];
        let ln = |x: &Mat, l: &LayerNorm| layer_norm(x) * &store.get(l.gamma).row(0) + &store.get(l.beta).row(0);
        let h = ln(&x, &b.attn.norm);
        let a = softmax_attention(&lin(&store, &b.attn.q, &h), &lin(&store, &b.attn.k, &h), &lin(&store, &b.attn.v, &h), 2);
        let m = &x + &lin(&store, &b.attn.o, &a);
        let hid = lin(&store, &b.ffn.fc1, &ln(&m, &b.ffn.norm)).mapv(crate::autograd::gelu);
        let expect = &m + &lin(&store, &b.ffn.fc2, &hid);
        for (a, b) in out.sequence.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn encoding_is_deterministic_and_shape_preserving() {
        let (mut store, enc, mut rng) = encoder_setup(10, 8, 2, true);
        randomize(&mut store, &mut rng, 0.3);
        let grid = VideoGrid { slots: 2, rows: 2, cols: 3 };
        let x = rand_mat(&mut rng, 12, 8, 1.0);
        let a = enc.encode_stream(&store, &seq(x.clone()), Layout::Grid(grid)).unwrap();
        let b = enc.encode_stream(&store, &seq(x), Layout::Grid(grid)).unwrap();
        assert_eq!(a.sequence.dim(), (12, 8));
        assert_eq!(a, b);
        let mean = a.sequence.mean_axis(ndarray::Axis(0)).unwrap();
        for (p, m) in a.pooled.iter().zip(mean.iter()) {
            assert!((p - m).abs() < 1e-12);
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let (store, enc, _) = encoder_setup(11, 8, 1, false);
        let x = Array2::zeros((33, 8));
        assert!(matches!(
            enc.encode_stream(&store, &seq(x), Layout::Line(33)),
            Err(Error::Capacity { got: 33, max: 32, .. })
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            EncoderConfig { n_heads: 3, ..EncoderConfig::default() },
            EncoderConfig { window: 1, shift: 0, ..EncoderConfig::default() },
            EncoderConfig { lfa_kernel: 4, ..EncoderConfig::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    fn gradcheck_encoder(position: LfaPosition, layout: Layout) {
        let grid = matches!(layout, Layout::Grid(_));
        let (mut store, mut enc, mut rng) = encoder_setup(12, 16, 2, grid);
        enc.config.lfa_position = position;
        randomize(&mut store, &mut rng, 0.3);
        let x = rand_mat(&mut rng, layout.len(), 16, 1.0);
        let ids: Vec<ParamId> = store.learnable_ids().collect();
        let report = check_params(&store, &ids, 6, 1e-3, Mode::Train, 1, |s| {
            let xv = s.constant(x.clone());
            let y = enc.forward(s, xv, layout)?;
            let p = s.graph.mean_rows(y);
            let sq = s.graph.mul(p, p);
            Ok(s.graph.sum_all(sq))
        })
        .unwrap();
        assert!(report.checked > 100, "{report:?}");
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        gradcheck_encoder(LfaPosition::PostAttn, Layout::Line(10));
        gradcheck_encoder(LfaPosition::PreAttn, Layout::Grid(VideoGrid { slots: 2, rows: 2, cols: 2 }));
    }
}
