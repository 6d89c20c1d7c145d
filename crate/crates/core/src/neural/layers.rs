//! Convolutional front-end layers over `(batch, time, feature, map)` tensors.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

fn check_conv_shapes(x: &ArrayView4<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Result<()> {
    let (kh, kw, c, f) = w.dim();
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::validation(format!("kernel {kh}x{kw} must have odd sides")));
    }
    if x.dim().3 != c {
        return Err(Error::validation(format!(
            "conv input has {} layers but the kernel expects {c}",
            x.dim().3
        )));
    }
    if b.len() != f {
        return Err(Error::validation(format!("conv bias has {} entries, expected {f}", b.len())));
    }
    Ok(())
}

/// Unfold one `(T, L, C)` slab into rows of zero-padded `kh x kw x C` patches.
fn im2col(x: &[f64], dims: (usize, usize, usize), kh: usize, kw: usize, cols: &mut Array2<f64>) {
    let (t_len, l_len, c) = dims;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let width = kh * kw * c;
    let out = cols.as_slice_mut().expect("standard layout");
    out.fill(0.0);
    for t in 0..t_len {
        for l in 0..l_len {
            let row = &mut out[(t * l_len + l) * width..][..width];
            for i in 0..kh {
                let ti = t as isize + i as isize - ph;
                if ti < 0 || ti >= t_len as isize {
                    continue;
                }
                for j in 0..kw {
                    let lj = l as isize + j as isize - pw;
                    if lj < 0 || lj >= l_len as isize {
                        continue;
                    }
                    let src = (ti as usize * l_len + lj as usize) * c;
                    row[(i * kw + j) * c..][..c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
}

/// Fold patch gradients back onto the `(T, L, C)` slab, accumulating overlaps.
fn col2im(cols: &Array2<f64>, dims: (usize, usize, usize), kh: usize, kw: usize, dx: &mut [f64]) {
    let (t_len, l_len, c) = dims;
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let width = kh * kw * c;
    let src = cols.as_slice().expect("standard layout");
    for t in 0..t_len {
        for l in 0..l_len {
            let row = &src[(t * l_len + l) * width..][..width];
            for i in 0..kh {
                let ti = t as isize + i as isize - ph;
                if ti < 0 || ti >= t_len as isize {
                    continue;
                }
                for j in 0..kw {
                    let lj = l as isize + j as isize - pw;
                    if lj < 0 || lj >= l_len as isize {
                        continue;
                    }
                    let dst = (ti as usize * l_len + lj as usize) * c;
                    for (d, v) in dx[dst..dst + c].iter_mut().zip(&row[(i * kw + j) * c..][..c]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn kernel_matrix(w: &Array4<f64>) -> ArrayView2<'_, f64> {
    let (kh, kw, c, f) = w.dim();
    w.view()
        .into_shape_with_order((kh * kw * c, f))
        .expect("standard layout kernel")
}

/// 2-D cross-correlation over (time, feature) with "same" zero padding on both
/// axes. Input `(B, T, L, C)`, kernel `(kh, kw, C, F)`, output `(B, T, L, F)`.
pub fn conv2d_forward(x: ArrayView4<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Result<Array4<f64>> {
    check_conv_shapes(&x, w, b)?;
    let (batch, t_len, l_len, c) = x.dim();
    let (kh, kw, _, f) = w.dim();
    let x = x.as_standard_layout();
    let wm = kernel_matrix(w);
    let mut out = Array4::<f64>::zeros((batch, t_len, l_len, f));
    let mut cols = Array2::<f64>::zeros((t_len * l_len, kh * kw * c));
    for n in 0..batch {
        let slab = x.slice(s![n, .., .., ..]);
        im2col(slab.as_slice().expect("contiguous"), (t_len, l_len, c), kh, kw, &mut cols);
        let mut y = out
            .slice_mut(s![n, .., .., ..])
            .into_shape_with_order((t_len * l_len, f))
            .expect("contiguous output");
        y.assign(&b.broadcast((t_len * l_len, f)).expect("bias broadcast"));
        general_mat_mul(1.0, &cols, &wm, 1.0, &mut y);
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`]: `(dx, dw, db)`.
pub fn conv2d_backward(
    x: ArrayView4<f64>,
    w: &Array4<f64>,
    dy: ArrayView4<f64>,
) -> Result<(Array4<f64>, Array4<f64>, Array1<f64>)> {
    let (batch, t_len, l_len, c) = x.dim();
    let (kh, kw, wc, f) = w.dim();
    if wc != c || dy.dim() != (batch, t_len, l_len, f) {
        return Err(Error::validation("conv backward shape mismatch"));
    }
    let x = x.as_standard_layout();
    let dy = dy.as_standard_layout();
    let wm = kernel_matrix(w);
    let mut dx = Array4::<f64>::zeros(x.dim());
    let mut dwm = Array2::<f64>::zeros((kh * kw * c, f));
    let mut cols = Array2::<f64>::zeros((t_len * l_len, kh * kw * c));
    let mut dcols = Array2::<f64>::zeros((t_len * l_len, kh * kw * c));
    for n in 0..batch {
        let slab = x.slice(s![n, .., .., ..]);
        im2col(slab.as_slice().expect("contiguous"), (t_len, l_len, c), kh, kw, &mut cols);
        let g = dy
            .slice(s![n, .., .., ..])
            .into_shape_with_order((t_len * l_len, f))
            .expect("contiguous gradient");
        general_mat_mul(1.0, &cols.t(), &g, 1.0, &mut dwm);
        general_mat_mul(1.0, &g, &wm.t(), 0.0, &mut dcols);
        let mut dslab = dx.slice_mut(s![n, .., .., ..]);
        col2im(&dcols, (t_len, l_len, c), kh, kw, dslab.as_slice_mut().expect("contiguous"));
    }
    let db = dy.sum_axis(Axis(0)).sum_axis(Axis(0)).sum_axis(Axis(0));
    let dw = dwm.into_shape_with_order((kh, kw, c, f)).expect("kernel shape");
    Ok((dx, dw, db))
}

/// Per-map statistics gathered in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Biased (population) variance.
    pub var: Array1<f64>,
}

/// Saved values for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Array4<f64>,
    pub inv_std: Array1<f64>,
}

fn map_stats(x: &ArrayView4<f64>) -> Result<BatchStats> {
    let f = x.dim().3;
    let count = x.len() / f.max(1);
    if count == 0 {
        return Err(Error::validation("batch norm over an empty batch"));
    }
    let flat = x.as_standard_layout();
    let flat = flat.to_shape((count, f)).expect("flatten");
    let mean = flat.mean_axis(Axis(0)).expect("non-empty");
    let var = flat
        .rows()
        .into_iter()
        .fold(Array1::<f64>::zeros(f), |acc, r| acc + (&r - &mean).mapv(|d| d * d))
        / count as f64;
    Ok(BatchStats { mean, var })
}

/// Training-mode batch norm over `(batch, time, feature)` per map.
pub fn batchnorm_train(
    x: ArrayView4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> Result<(Array4<f64>, BatchNormCache, BatchStats)> {
    if gamma.len() != x.dim().3 || beta.len() != x.dim().3 {
        return Err(Error::validation("batch-norm parameter size mismatch"));
    }
    let stats = map_stats(&x)?;
    let inv_std = stats.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = (&x - &stats.mean) * &inv_std;
    let y = &xhat * gamma + beta;
    Ok((y, BatchNormCache { xhat, inv_std }, stats))
}

/// Inference-mode batch norm using running statistics.
pub fn batchnorm_infer(
    x: ArrayView4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running: &BatchStats,
) -> Result<Array4<f64>> {
    if gamma.len() != x.dim().3 || running.mean.len() != x.dim().3 {
        return Err(Error::validation("batch-norm parameter size mismatch"));
    }
    if x.is_empty() {
        return Err(Error::validation("batch norm over an empty batch"));
    }
    let scale = running.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt()) * gamma;
    Ok((&x - &running.mean) * &scale + beta)
}

/// Blend a batch's statistics into running statistics.
pub fn update_running(running: &mut BatchStats, batch: &BatchStats) {
    running.mean.zip_mut_with(&batch.mean, |r, b| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b);
    running.var.zip_mut_with(&batch.var, |r, b| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b);
}

/// Gradients of [`batchnorm_train`]: `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    dy: ArrayView4<f64>,
    gamma: &Array1<f64>,
    cache: &BatchNormCache,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let f = gamma.len();
    let count = (dy.len() / f) as f64;
    let sum4 = |a: &Array4<f64>| a.sum_axis(Axis(0)).sum_axis(Axis(0)).sum_axis(Axis(0));
    let dy = dy.to_owned();
    let dbeta = sum4(&dy);
    let dgamma = sum4(&(&dy * &cache.xhat));
    let dxhat = &dy * gamma;
    let sum_dxhat = sum4(&dxhat);
    let sum_dxhat_xhat = sum4(&(&dxhat * &cache.xhat));
    let dx = (dxhat * count - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat) * &(&cache.inv_std / count);
    (dx, dgamma, dbeta)
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Pass gradient where the pre-activation was positive.
pub fn relu_backward(pre: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// Max over non-overlapping windows of width `p` along the feature axis.
/// Returns the pooled tensor and, per output cell, the winning input index
/// on the feature axis.
pub fn maxpool_feature_axis(x: ArrayView4<f64>, p: usize) -> Result<(Array4<f64>, Array4<u32>)> {
    let (b, t, l, f) = x.dim();
    if p == 0 || l % p != 0 {
        return Err(Error::validation(format!(
            "pool factor {p} does not divide feature length {l}"
        )));
    }
    let lo = l / p;
    let mut out = Array4::<f64>::zeros((b, t, lo, f));
    let mut arg = Array4::<u32>::zeros((b, t, lo, f));
    for n in 0..b {
        for ti in 0..t {
            for o in 0..lo {
                for m in 0..f {
                    let mut best = o * p;
                    for k in o * p + 1..(o + 1) * p {
                        if x[[n, ti, k, m]] > x[[n, ti, best, m]] {
                            best = k;
                        }
                    }
                    out[[n, ti, o, m]] = x[[n, ti, best, m]];
                    arg[[n, ti, o, m]] = best as u32;
                }
            }
        }
    }
    Ok((out, arg))
}

/// Route pooled gradients back to the winning inputs.
pub fn maxpool_backward(dy: &Array4<f64>, arg: &Array4<u32>, input_len: usize) -> Array4<f64> {
    let (b, t, lo, f) = dy.dim();
    let mut dx = Array4::<f64>::zeros((b, t, input_len, f));
    for n in 0..b {
        for ti in 0..t {
            for o in 0..lo {
                for m in 0..f {
                    dx[[n, ti, arg[[n, ti, o, m]] as usize, m]] += dy[[n, ti, o, m]];
                }
            }
        }
    }
    dx
}

/// Inverted-dropout keep mask: each entry is 0 or `1 / (1 - rate)`.
pub fn dropout_mask<D: ndarray::Dimension, R: Rng>(
    shape: D,
    rate: f64,
    rng: &mut R,
) -> ndarray::Array<f64, D> {
    let keep = 1.0 - rate;
    ndarray::Array::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::{numeric_gradient, randn, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;


    fn conv_oracle(x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Array4<f64> {
        let (bn, t, l, c) = x.dim();
        let (kh, kw, _, f) = w.dim();
        let mut y = Array4::zeros((bn, t, l, f));
        for n in 0..bn {
            for ti in 0..t {
                for li in 0..l {
                    for m in 0..f {
                        let mut acc = b[m];
                        for i in 0..kh {
                            for j in 0..kw {
                                for ci in 0..c {
                                    let tt = ti as isize + i as isize - (kh / 2) as isize;
                                    let ll = li as isize + j as isize - (kw / 2) as isize;
                                    if tt >= 0 && ll >= 0 && (tt as usize) < t && (ll as usize) < l {
                                        acc += x[[n, tt as usize, ll as usize, ci]] * w[[i, j, ci, m]];
                                    }
                                }
                            }
                        }
                        y[[n, ti, li, m]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn((2, 8, 10, 2), &mut rng);
        let w = randn((3, 3, 2, 4), &mut rng);
        let b = randn(4, &mut rng);
        let y = conv2d_forward(x.view(), &w, &b).unwrap();
        let oracle = conv_oracle(&x, &w, &b);
        assert_eq!(y.dim(), (2, 8, 10, 4));
        for (a, o) in y.iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn((1, 5, 6, 1), &mut rng);
        let w = Array4::from_elem((1, 1, 1, 1), 1.0);
        let y = conv2d_forward(x.view(), &w, &Array1::zeros(1)).unwrap();
        assert_eq!(y, x);
        let w = Array4::zeros((3, 3, 1, 2));
        let y = conv2d_forward(x.view(), &w, &Array1::from(vec![0.5, -2.0])).unwrap();
        assert!(y.slice(s![.., .., .., 0]).iter().all(|&v| v == 0.5));
        assert!(y.slice(s![.., .., .., 1]).iter().all(|&v| v == -2.0));
        assert!(conv2d_forward(x.view(), &Array4::zeros((3, 3, 2, 1)), &Array1::zeros(1)).is_err());
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn((2, 5, 6, 2), &mut rng);
        let w = randn((3, 3, 2, 3), &mut rng);
        let b = randn(3, &mut rng);
        let r = randn((2, 5, 6, 3), &mut rng);
        let loss = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| {
            (conv2d_forward(x.view(), w, b).unwrap() * &r).sum()
        };
        let (dx, dw, db) = conv2d_backward(x.view(), &w, r.view()).unwrap();
        let nx = numeric_gradient(&x, |p| loss(p, &w, &b));
        let nw = numeric_gradient(&w, |p| loss(&x, p, &b));
        let nb = numeric_gradient(&b, |p| loss(&x, &w, p));
        assert!(relative_error(dx.as_slice().unwrap(), nx.as_slice().unwrap()) < 1e-4);
        assert!(relative_error(dw.as_slice().unwrap(), nw.as_slice().unwrap()) < 1e-4);
        assert!(relative_error(db.as_slice().unwrap(), nb.as_slice().unwrap()) < 1e-4);
    }

    #[test]
    fn batchnorm_normalizes_each_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn((3, 6, 4, 2), &mut rng) * 3.0 + 7.0;
        let (y, _, stats) = batchnorm_train(x.view(), &Array1::ones(2), &Array1::zeros(2)).unwrap();
        for m in 0..2 {
            let col = y.slice(s![.., .., .., m]);
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let inferred = batchnorm_infer(x.view(), &Array1::ones(2), &Array1::zeros(2), &stats).unwrap();
        for (a, b) in inferred.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }
        let flat = Array4::from_elem((2, 3, 2, 1), 4.2);
        let (y, _, _) = batchnorm_train(flat.view(), &Array1::ones(1), &Array1::from(vec![0.3])).unwrap();
        assert!(y.iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(batchnorm_train(Array4::<f64>::zeros((0, 3, 2, 1)).view(), &Array1::ones(1), &Array1::zeros(1)).is_err());
    }

    #[test]
    fn running_stats_update() {
        let mut running = BatchStats { mean: Array1::zeros(1), var: Array1::ones(1) };
        update_running(&mut running, &BatchStats { mean: Array1::from(vec![1.0]), var: Array1::from(vec![3.0]) });
        assert!((running.mean[0] - 0.1).abs() < 1e-15);
        assert!((running.var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn((2, 4, 3, 2), &mut rng);
        let g = randn(2, &mut rng);
        let be = randn(2, &mut rng);
        let r = randn((2, 4, 3, 2), &mut rng);
        let loss = |x: &Array4<f64>, g: &Array1<f64>, be: &Array1<f64>| {
            (batchnorm_train(x.view(), g, be).unwrap().0 * &r).sum()
        };
        let (_, cache, _) = batchnorm_train(x.view(), &g, &be).unwrap();
        let (dx, dg, db) = batchnorm_backward(r.view(), &g, &cache);
        let nx = numeric_gradient(&x, |p| loss(p, &g, &be));
        let ng = numeric_gradient(&g, |p| loss(&x, p, &be));
        let nb = numeric_gradient(&be, |p| loss(&x, &g, p));
        assert!(relative_error(dx.as_slice().unwrap(), nx.as_slice().unwrap()) < 1e-4);
        assert!(relative_error(dg.as_slice().unwrap(), ng.as_slice().unwrap()) < 1e-4);
        assert!(relative_error(db.as_slice().unwrap(), nb.as_slice().unwrap()) < 1e-4);
    }

    #[test]
    fn pooling_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn((1, 3, 40, 2), &mut rng);
        let (same, _) = maxpool_feature_axis(x.view(), 1).unwrap();
        assert_eq!(same, x);
        let mut v = x.clone();
        for p in [2, 2, 2] {
            v = maxpool_feature_axis(v.view(), p).unwrap().0;
        }
        assert_eq!(v.dim(), (1, 3, 5, 2));
        assert!(maxpool_feature_axis(x.view(), 3).is_err());

        let ramp = Array4::from_shape_fn((1, 2, 6, 1), |(_, t, l, _)| (t * 10 + l) as f64);
        let (pooled, _) = maxpool_feature_axis(ramp.view(), 3).unwrap();
        assert_eq!(pooled[[0, 0, 0, 0]], 2.0);
        assert_eq!(pooled[[0, 1, 1, 0]], 15.0);
    }

    #[test]
    fn pooling_and_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn((2, 3, 6, 2), &mut rng);
        let r = randn((2, 3, 3, 2), &mut rng);
        let (_, arg) = maxpool_feature_axis(x.view(), 2).unwrap();
        let dx = maxpool_backward(&r, &arg, 6);
        let nx = numeric_gradient(&x, |p| (maxpool_feature_axis(p.view(), 2).unwrap().0 * &r).sum());
        assert!(relative_error(dx.as_slice().unwrap(), nx.as_slice().unwrap()) < 1e-4);

        let r = randn((2, 3, 6, 2), &mut rng);
        let dx = relu_backward(&x, &r);
        let nx = numeric_gradient(&x, |p| (relu(p) * &r).sum());
        assert!(relative_error(dx.as_slice().unwrap(), nx.as_slice().unwrap()) < 1e-4);
    }

    #[test]
    fn dropout_mask_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = dropout_mask(ndarray::Ix2(100, 100), 0.5, &mut rng);
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((4500..5500).contains(&kept));
        let all = dropout_mask(ndarray::Ix1(50), 0.0, &mut rng);
        assert!(all.iter().all(|&v| v == 1.0));
    }
}
