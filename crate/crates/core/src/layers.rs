//! Small building blocks shared by the encoder, projection heads and the
//! classifier.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::Var;
use crate::params::{normal_init, Mode, ParamId, ParamKind, ParamStore, Session};

pub const NORM_EPS: f64 = 1e-5;

/// Affine map `y = x·W + b` on row vectors; `W` is `in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = store.register(format!("{name}.w"), ParamKind::Weight, normal_init(rng, fan_in, fan_out, std));
        let b = bias.then(|| store.register(format!("{name}.b"), ParamKind::NoDecay, Array2::zeros((1, fan_out))));
        Self { w, b, fan_in, fan_out }
    }

    /// Same layout, every value zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.register(format!("{name}.w"), ParamKind::Weight, Array2::zeros((fan_in, fan_out)));
        let b = bias.then(|| store.register(format!("{name}.b"), ParamKind::NoDecay, Array2::zeros((1, fan_out))));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.w);
        let y = s.graph.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Per-row normalization over channels with learned gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), ParamKind::NoDecay, Array2::ones((1, width))),
            beta: store.register(format!("{name}.beta"), ParamKind::NoDecay, Array2::zeros((1, width))),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let n = s.graph.row_norm(x, NORM_EPS);
        affine(s, n, self.gamma, self.beta)
    }
}

/// Per-channel normalization using the statistics of the rows it is given
/// (the tokens of one feature map), in training and inference alike.
#[derive(Debug, Clone, Copy)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), ParamKind::NoDecay, Array2::ones((1, width))),
            beta: store.register(format!("{name}.beta"), ParamKind::NoDecay, Array2::zeros((1, width))),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let n = s.graph.col_norm(x, NORM_EPS);
        affine(s, n, self.gamma, self.beta)
    }
}

/// Batch normalization over the rows of a batch. Training mode normalizes
/// with batch statistics and queues an update of the running statistics;
/// evaluation mode uses the running statistics.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), ParamKind::NoDecay, Array2::ones((1, width))),
            beta: store.register(format!("{name}.beta"), ParamKind::NoDecay, Array2::zeros((1, width))),
            running_mean: store.register(format!("{name}.running_mean"), ParamKind::Buffer, Array2::zeros((1, width))),
            running_var: store.register(format!("{name}.running_var"), ParamKind::Buffer, Array2::ones((1, width))),
            momentum: 0.1,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        match s.mode {
            Mode::Train => {
                let xv = s.value(x);
                let m = xv.nrows() as f64;
                let mean = xv.mean_axis(ndarray::Axis(0)).expect("non-empty batch");
                let centered = xv - &mean;
                let var_unbiased = if m > 1.0 {
                    (&centered * &centered).sum_axis(ndarray::Axis(0)) / (m - 1.0)
                } else {
                    ndarray::Array1::zeros(xv.ncols())
                };
                let store = s.store();
                let mom = self.momentum;
                let rm = store.get(self.running_mean) * (1.0 - mom) + &(mean.insert_axis(ndarray::Axis(0)) * mom);
                let rv = store.get(self.running_var) * (1.0 - mom) + &(var_unbiased.insert_axis(ndarray::Axis(0)) * mom);
                s.push_running_update(self.running_mean, rm);
                s.push_running_update(self.running_var, rv);
                let n = s.graph.col_norm(x, NORM_EPS);
                affine(s, n, self.gamma, self.beta)
            }
            Mode::Eval => {
                let store = s.store();
                let inv = store.get(self.running_var).mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
                let shift = -(store.get(self.running_mean) * &inv);
                let inv = s.constant(inv);
                let shift = s.constant(shift);
                let scaled = s.graph.mul_row(x, inv);
                let n = s.graph.add_row(scaled, shift);
                affine(s, n, self.gamma, self.beta)
            }
        }
    }
}

fn affine(s: &mut Session, x: Var, gamma: ParamId, beta: ParamId) -> Var {
    let g = s.param(gamma);
    let b = s.param(beta);
    let y = s.graph.mul_row(x, g);
    s.graph.add_row(y, b)
}

/// Sequence-axis mean pooling of an `S×d` map to `1×d`.
pub fn mean_pool(s: &mut Session, x: Var) -> Var {
    s.graph.mean_rows(x)
}

/// `out×n` averaging matrix mapping a length-`n` sequence to length `out`
/// with adaptive average pooling bins `[floor(i·n/out), ceil((i+1)·n/out))`.
pub fn adaptive_pool_matrix(n: usize, out: usize) -> Array2<f64> {
    assert!(n >= 1 && out >= 1);
    let mut m = Array2::zeros((out, n));
    for i in 0..out {
        let start = i * n / out;
        let end = ((i + 1) * n).div_ceil(out).max(start + 1);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[[i, j]] = w;
        }
    }
    m
}
