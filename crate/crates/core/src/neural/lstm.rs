//! LSTM and bidirectional LSTM over `(batch, time, feature)` sequences.
//!
//! Gate columns are laid out as `[input, forget, cell, output]`, each `H` wide.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Weights of one LSTM direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// Input weights `(D, 4H)`.
    pub w: Array2<f64>,
    /// Recurrent weights `(H, 4H)`.
    pub u: Array2<f64>,
    /// Gate biases `(4H)`.
    pub b: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: Array2::zeros((input, 4 * hidden)),
            u: Array2::zeros((hidden, 4 * hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    /// Uniform Glorot input weights, uniform `±1/√H` recurrent weights, forget
    /// bias 1.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        let a = (6.0 / (input + 4 * hidden) as f64).sqrt();
        p.w.mapv_inplace(|_| rng.random_range(-a..a));
        let r = 1.0 / (hidden as f64).sqrt();
        p.u.mapv_inplace(|_| rng.random_range(-r..r));
        p.b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        p
    }

    pub fn hidden(&self) -> usize {
        self.u.nrows()
    }

    pub fn input(&self) -> usize {
        self.w.nrows()
    }
}

/// Saved activations for one direction.
#[derive(Debug, Clone)]
pub struct LstmCache {
    /// Activated gates `(B, T, 4H)`.
    pub gates: Array3<f64>,
    pub cell: Array3<f64>,
    pub tanh_cell: Array3<f64>,
    pub hidden: Array3<f64>,
    pub reverse: bool,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn flat(x: &ArrayView3<f64>) -> Array2<f64> {
    let (b, t, d) = x.dim();
    x.as_standard_layout().into_owned().into_shape_with_order((b * t, d)).expect("flatten")
}

/// Run one direction; `reverse` walks the sequence from the last frame.
pub fn lstm_forward(x: ArrayView3<f64>, p: &LstmParams, reverse: bool) -> Result<(Array3<f64>, LstmCache)> {
    let (batch, t_len, d) = x.dim();
    if d != p.input() {
        return Err(Error::validation(format!(
            "LSTM expects {} input features, got {d}",
            p.input()
        )));
    }
    let h = p.hidden();
    let xw = (flat(&x).dot(&p.w) + &p.b)
        .into_shape_with_order((batch, t_len, 4 * h))
        .expect("reshape");
    let mut gates = Array3::<f64>::zeros((batch, t_len, 4 * h));
    let mut cell = Array3::<f64>::zeros((batch, t_len, h));
    let mut tanh_cell = Array3::<f64>::zeros((batch, t_len, h));
    let mut hidden = Array3::<f64>::zeros((batch, t_len, h));
    let mut h_prev = Array2::<f64>::zeros((batch, h));
    let mut c_prev = Array2::<f64>::zeros((batch, h));
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let z = &xw.slice(s![.., t, ..]) + &h_prev.dot(&p.u);
        let mut g = gates.slice_mut(s![.., t, ..]);
        for n in 0..batch {
            for k in 0..h {
                let i = sigmoid(z[[n, k]]);
                let f = sigmoid(z[[n, h + k]]);
                let gg = z[[n, 2 * h + k]].tanh();
                let o = sigmoid(z[[n, 3 * h + k]]);
                let c = f * c_prev[[n, k]] + i * gg;
                let tc = c.tanh();
                let hv = o * tc;
                if !hv.is_finite() || !c.is_finite() {
                    return Err(Error::Numeric(format!("non-finite LSTM activation at frame {t}")));
                }
                g[[n, k]] = i;
                g[[n, h + k]] = f;
                g[[n, 2 * h + k]] = gg;
                g[[n, 3 * h + k]] = o;
                cell[[n, t, k]] = c;
                tanh_cell[[n, t, k]] = tc;
                hidden[[n, t, k]] = hv;
                c_prev[[n, k]] = c;
                h_prev[[n, k]] = hv;
            }
        }
    }
    let cache = LstmCache {
        gates,
        cell,
        tanh_cell,
        hidden: hidden.clone(),
        reverse,
    };
    Ok((hidden, cache))
}

/// Back-propagation through time for one direction. Returns `(dx, grads)`.
pub fn lstm_backward(
    x: ArrayView3<f64>,
    p: &LstmParams,
    cache: &LstmCache,
    dh: ArrayView3<f64>,
) -> (Array3<f64>, LstmParams) {
    let (batch, t_len, d) = x.dim();
    let h = p.hidden();
    let mut dz_all = Array3::<f64>::zeros((batch, t_len, 4 * h));
    let mut grads = LstmParams::zeros(d, h);
    let mut dh_next = Array2::<f64>::zeros((batch, h));
    let mut dc_next = Array2::<f64>::zeros((batch, h));
    for step in (0..t_len).rev() {
        let t = if cache.reverse { t_len - 1 - step } else { step };
        let prev = if step == 0 {
            None
        } else if cache.reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        let mut dz = Array2::<f64>::zeros((batch, 4 * h));
        for n in 0..batch {
            for k in 0..h {
                let i = cache.gates[[n, t, k]];
                let f = cache.gates[[n, t, h + k]];
                let g = cache.gates[[n, t, 2 * h + k]];
                let o = cache.gates[[n, t, 3 * h + k]];
                let tc = cache.tanh_cell[[n, t, k]];
                let c_prev = prev.map_or(0.0, |pt| cache.cell[[n, pt, k]]);
                let dht = dh[[n, t, k]] + dh_next[[n, k]];
                let dc = dc_next[[n, k]] + dht * o * (1.0 - tc * tc);
                dz[[n, k]] = dc * g * i * (1.0 - i);
                dz[[n, h + k]] = dc * c_prev * f * (1.0 - f);
                dz[[n, 2 * h + k]] = dc * i * (1.0 - g * g);
                dz[[n, 3 * h + k]] = dht * tc * o * (1.0 - o);
                dc_next[[n, k]] = dc * f;
            }
        }
        if let Some(pt) = prev {
            let h_prev = cache.hidden.slice(s![.., pt, ..]);
            grads.u += &h_prev.t().dot(&dz);
        }
        dh_next = dz.dot(&p.u.t());
        dz_all.slice_mut(s![.., t, ..]).assign(&dz);
    }
    let dz_flat = dz_all
        .into_shape_with_order((batch * t_len, 4 * h))
        .expect("reshape");
    grads.w = flat(&x).t().dot(&dz_flat);
    grads.b = dz_flat.sum_axis(Axis(0));
    let dx = dz_flat
        .dot(&p.w.t())
        .into_shape_with_order((batch, t_len, d))
        .expect("reshape");
    (dx, grads)
}

/// Forward and backward direction weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            fwd: LstmParams::zeros(input, hidden),
            bwd: LstmParams::zeros(input, hidden),
        }
    }

    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let fwd = LstmParams::init(input, hidden, rng);
        let bwd = LstmParams::init(input, hidden, rng);
        Self { fwd, bwd }
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    pub fwd: LstmCache,
    pub bwd: LstmCache,
}

/// Output `(B, T, 2H)`: forward states in the first half, backward in the second.
pub fn bilstm_forward(x: ArrayView3<f64>, p: &BiLstmParams) -> Result<(Array3<f64>, BiLstmCache)> {
    let (hf, cf) = lstm_forward(x, &p.fwd, false)?;
    let (hb, cb) = lstm_forward(x, &p.bwd, true)?;
    let out = ndarray::concatenate(Axis(2), &[hf.view(), hb.view()]).expect("same batch and time");
    Ok((out, BiLstmCache { fwd: cf, bwd: cb }))
}

pub fn bilstm_backward(
    x: ArrayView3<f64>,
    p: &BiLstmParams,
    cache: &BiLstmCache,
    dy: ArrayView3<f64>,
) -> (Array3<f64>, BiLstmParams) {
    let h = p.fwd.hidden();
    let (dxf, gf) = lstm_backward(x, &p.fwd, &cache.fwd, dy.slice(s![.., .., ..h]));
    let (dxb, gb) = lstm_backward(x, &p.bwd, &cache.bwd, dy.slice(s![.., .., h..]));
    (dxf + dxb, BiLstmParams { fwd: gf, bwd: gb })
}
