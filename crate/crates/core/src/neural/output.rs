//! Time-distributed sigmoid output layer and masked binary cross-entropy.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` inside the loss.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `(D, K)`.
    pub w: Array2<f64>,
    /// `(K)`.
    pub b: Array1<f64>,
}

impl DenseParams {
    pub fn zeros(input: usize, classes: usize) -> Self {
        Self {
            w: Array2::zeros((input, classes)),
            b: Array1::zeros(classes),
        }
    }

    /// Uniform Glorot weights, zero bias.
    pub fn init<R: Rng>(input: usize, classes: usize, rng: &mut R) -> Self {
        let a = (6.0 / (input + classes) as f64).sqrt();
        Self {
            w: Array2::from_shape_simple_fn((input, classes), || rng.random_range(-a..a)),
            b: Array1::zeros(classes),
        }
    }
}

/// Logistic function kept strictly inside (0, 1).
pub fn sigmoid(v: f64) -> f64 {
    (1.0 / (1.0 + (-v).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn flatten(x: &ArrayView3<f64>) -> Array2<f64> {
    let (b, t, d) = x.dim();
    x.as_standard_layout().into_owned().into_shape_with_order((b * t, d)).expect("flatten")
}

/// Per-frame affine map followed by a sigmoid: `(B, T, D) -> (B, T, K)`.
pub fn output_forward(x: ArrayView3<f64>, p: &DenseParams) -> Result<Array3<f64>> {
    let (b, t, d) = x.dim();
    if d != p.w.nrows() {
        return Err(Error::validation(format!(
            "output layer expects {} features, got {d}",
            p.w.nrows()
        )));
    }
    let k = p.w.ncols();
    let logits = flatten(&x).dot(&p.w) + &p.b;
    Ok(logits.mapv(sigmoid).into_shape_with_order((b, t, k)).expect("reshape"))
}

/// Gradients of [`output_forward`] given `d loss / d prob`.
pub fn output_backward(
    x: ArrayView3<f64>,
    p: &DenseParams,
    probs: &Array3<f64>,
    dprobs: &Array3<f64>,
) -> (Array3<f64>, DenseParams) {
    let (b, t, d) = x.dim();
    let k = p.w.ncols();
    let dlogits = (dprobs * &probs.mapv(|q| q * (1.0 - q)))
        .into_shape_with_order((b * t, k))
        .expect("reshape");
    let grads = DenseParams {
        w: flatten(&x).t().dot(&dlogits),
        b: dlogits.sum_axis(Axis(0)),
    };
    let dx = dlogits.dot(&p.w.t()).into_shape_with_order((b, t, d)).expect("reshape");
    (dx, grads)
}

fn check_loss_shapes(pred: &ArrayView3<f64>, target: &ArrayView3<f64>, mask: &ArrayView2<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::validation(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if mask.dim() != (pred.dim().0, pred.dim().1) {
        return Err(Error::validation("loss mask does not match batch and time axes"));
    }
    Ok(())
}

fn active_cells(mask: &ArrayView2<f64>, classes: usize) -> f64 {
    mask.sum() * classes as f64
}

/// Binary cross-entropy averaged over unmasked `(frame, class)` cells.
/// `mask` is `(B, T)` with 1 for real frames and 0 for padding.
pub fn bce_loss(pred: ArrayView3<f64>, target: ArrayView3<f64>, mask: ArrayView2<f64>) -> Result<f64> {
    check_loss_shapes(&pred, &target, &mask)?;
    let cells = active_cells(&mask, pred.dim().2);
    if cells == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((n, t, k), &p) in pred.indexed_iter() {
        let m = mask[[n, t]];
        if m == 0.0 {
            continue;
        }
        let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        let y = target[[n, t, k]];
        total -= m * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Ok(total / cells)
}

/// Loss on a single `(T, K)` prediction with every frame counted.
pub fn bce(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    let p = pred.view().insert_axis(Axis(0));
    let y = target.view().insert_axis(Axis(0));
    let mask = Array2::ones((1, pred.nrows()));
    bce_loss(p, y, mask.view())
}

/// `d loss / d pred` for [`bce_loss`]; zero where the clip is active.
pub fn bce_backward(pred: ArrayView3<f64>, target: ArrayView3<f64>, mask: ArrayView2<f64>) -> Result<Array3<f64>> {
    check_loss_shapes(&pred, &target, &mask)?;
    let cells = active_cells(&mask, pred.dim().2);
    let mut grad = Array3::zeros(pred.dim());
    if cells == 0.0 {
        return Ok(grad);
    }
    for ((n, t, k), g) in grad.indexed_iter_mut() {
        let m = mask[[n, t]];
        let p = pred[[n, t, k]];
        if m == 0.0 || !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
            continue;
        }
        let y = target[[n, t, k]];
        *g = -m * (y / p - (1.0 - y) / (1.0 - p)) / cells;
    }
    Ok(grad)
}
