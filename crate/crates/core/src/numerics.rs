//! Dense math used by the encoder and trainer: a row-major matrix, softmax,
//! layer normalization, inverted dropout, Adam, and a central-difference
//! gradient checker.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = x · w` for a row vector `x` and `w` of shape `x.len() × out.len()`.
pub fn vec_mat(x: &[f64], w: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(w.rows(), x.len());
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, w.row(i), out);
        }
    }
}

/// Backward of [`vec_mat`]: accumulates `dx += dy · wᵀ` and `dw += xᵀ dy`.
pub fn vec_mat_backward(x: &[f64], w: &Matrix, dy: &[f64], dx: &mut [f64], dw: &mut Matrix) {
    for (i, &xi) in x.iter().enumerate() {
        dx[i] += dot(dy, w.row(i));
        if xi != 0.0 {
            axpy(xi, dy, dw.row_mut(i));
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // every entry is -inf (fully masked) or the row is empty
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Normalizes `x` to zero mean and unit variance, then applies `gain`/`bias`.
/// Writes the pre-affine values to `xhat` and returns `1/sqrt(var + eps)`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = xhat[i] * gain[i] + bias[i];
    }
    rstd
}

/// Backward of [`layer_norm`]. Accumulates into `dx`, `dgain` and `dbias`.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    gain: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let d = dy.len() as f64;
    let mut mean_g = 0.0;
    let mut mean_gx = 0.0;
    for i in 0..dy.len() {
        let g = dy[i] * gain[i];
        mean_g += g;
        mean_gx += g * xhat[i];
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
    }
    mean_g /= d;
    mean_gx /= d;
    for i in 0..dy.len() {
        dx[i] += rstd * (dy[i] * gain[i] - mean_g - xhat[i] * mean_gx);
    }
}

/// Inverted-dropout multipliers: each entry is `0` with probability `rate`
/// and `1/(1-rate)` otherwise. Returns `None` when `rate == 0`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Option<Vec<f64>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments for parameter arrays of the given lengths, with the
    /// usual defaults (`beta1=0.9`, `beta2=0.999`, `eps=1e-8`).
    pub fn new(shapes: &[usize], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update over every parameter array.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} arrays, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(Error::Shape(format!(
                    "array {i}: state {} params {} grads {}",
                    self.first[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Flat coordinate access for gradient checking.
pub trait FlatParams {
    fn num_params(&self) -> usize;
    fn get(&self, i: usize) -> f64;
    fn set(&mut self, i: usize, v: f64);
}

impl FlatParams for Vec<f64> {
    fn num_params(&self) -> usize {
        self.len()
    }

    fn get(&self, i: usize) -> f64 {
        self[i]
    }

    fn set(&mut self, i: usize, v: f64) {
        self[i] = v;
    }
}

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst: usize,
    pub probed: usize,
}

/// Compares `analytic` against central differences of `loss_fn` at
/// `probe_count` random coordinates (all of them if fewer exist).
///
/// Error per coordinate is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn gradient_check<P, F, R>(
    params: &mut P,
    analytic: &[f64],
    probe_count: usize,
    rng: &mut R,
    mut loss_fn: F,
) -> Result<GradCheck>
where
    P: FlatParams,
    F: FnMut(&P) -> f64,
    R: Rng + ?Sized,
{
    let total = params.num_params();
    if analytic.len() != total {
        return Err(Error::Shape(format!(
            "{} analytic gradients for {total} parameters",
            analytic.len()
        )));
    }
    let coords: Vec<usize> = if probe_count >= total {
        (0..total).collect()
    } else {
        let mut c = index::sample(rng, total, probe_count).into_vec();
        c.sort_unstable();
        c
    };

    let mut eval = |p: &P, coord: usize| -> Result<f64> {
        let l = loss_fn(p);
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::NonFinite {
                what: "loss",
                detail: format!("{l} while probing coordinate {coord}"),
            })
        }
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: 0,
        probed: coords.len(),
    };
    for &i in &coords {
        let orig = params.get(i);
        params.set(i, orig + GRAD_CHECK_STEP);
        let plus = eval(params, i)?;
        params.set(i, orig - GRAD_CHECK_STEP);
        let minus = eval(params, i)?;
        params.set(i, orig);
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_for_constant_input() {
        for c in [-3.0, 0.0, 7.5, 1e4] {
            for p in softmax(&[c, c, c]) {
                assert!(close(p, 1.0 / 3.0, 1e-12));
            }
        }
    }

    #[test]
    fn softmax_ln2() {
        let p = softmax(&[0.0, 2f64.ln()]);
        assert!(close(p[0], 1.0 / 3.0, 1e-12));
        assert!(close(p[1], 2.0 / 3.0, 1e-12));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1e4, -1e4, 9999.0]);
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(close(p.iter().sum(), 1.0, 1e-9));
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        assert_eq!(softmax(&[f64::NEG_INFINITY; 3]), vec![0.0; 3]);
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = [3.0, -1.0, 4.0, 1.0, -5.0, 9.0];
        let ones = [1.0; 6];
        let zeros = [0.0; 6];
        let mut xhat = [0.0; 6];
        let mut out = [0.0; 6];
        layer_norm(&x, &ones, &zeros, &mut xhat, &mut out);
        let mean: f64 = out.iter().sum::<f64>() / 6.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        assert!(close(mean, 0.0, 1e-6));
        assert!(close(var, 1.0, 1e-6));
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = vec![0.3, -1.2, 2.0, 0.7];
        let gain = vec![1.5, 0.5, -0.7, 2.0];
        let bias = vec![0.1, 0.2, 0.3, 0.4];
        let weights = [0.9, -0.4, 1.3, 0.2];
        let loss = |x: &Vec<f64>| {
            let mut xhat = vec![0.0; 4];
            let mut out = vec![0.0; 4];
            layer_norm(x, &gain, &bias, &mut xhat, &mut out);
            dot(&out, &weights)
        };
        let mut xhat = vec![0.0; 4];
        let mut out = vec![0.0; 4];
        let rstd = layer_norm(&x, &gain, &bias, &mut xhat, &mut out);
        let mut dx = vec![0.0; 4];
        let (mut dg, mut db) = (vec![0.0; 4], vec![0.0; 4]);
        layer_norm_backward(&weights, &xhat, rstd, &gain, &mut dx, &mut dg, &mut db);
        let mut p = x.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let check = gradient_check(&mut p, &dx, 4, &mut rng, loss).unwrap();
        assert!(check.max_rel_error < 1e-7, "{check:?}");
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(dropout_mask(10, 0.0, &mut rng).is_none());
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask = dropout_mask(20_000, 0.7, &mut rng).unwrap();
        let keep = 1.0 / 0.3;
        assert!(mask.iter().all(|&m| m == 0.0 || close(m, keep, 1e-12)));
        // inverted dropout preserves the expectation
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!(close(mean, 1.0, 0.05), "{mean}");
    }

    #[test]
    fn adam_fixed_point_on_zero_gradient() {
        let mut p = vec![0.5, -2.0];
        let mut state = AdamState::new(&[2], 0.001);
        state.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn adam_first_step_oracle() {
        // hand-computed: m=0.1, v=0.001; bias-corrected both are 1,
        // update = lr * 1 / (1 + 1e-8)
        let lr = 0.001;
        let expected = 1.0 - lr * 1.0 / (1.0 + 1e-8);
        let mut p = vec![1.0];
        let mut state = AdamState::new(&[1], lr);
        state.step(&mut [&mut p], &[&[1.0]]).unwrap();
        assert!(close(p[0], expected, 1e-15), "{}", p[0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_identical_copies_are_bit_identical() {
        let grads = [0.3, -1.7, 4e-3];
        let mut a = vec![0.1, 0.2, 0.3];
        let mut b = a.clone();
        let mut sa = AdamState::new(&[3], 0.01);
        let mut sb = sa.clone();
        for _ in 0..5 {
            sa.step(&mut [&mut a], &[&grads]).unwrap();
            sb.step(&mut [&mut b], &[&grads]).unwrap();
        }
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(sa, sb);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = vec![0.0; 3];
        let mut state = AdamState::new(&[2], 0.01);
        assert!(matches!(state.step(&mut [&mut p], &[&[0.0; 3]]), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_check_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let analytic = p.clone();
        let check = gradient_check(&mut p, &analytic, 50, &mut rng, |p| 0.5 * dot(p, p)).unwrap();
        assert!(check.max_rel_error < 1e-7, "{check:?}");
        assert_eq!(check.probed, 50);
    }

    #[test]
    fn gradient_check_constant_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = vec![1.0, 2.0, 3.0];
        let check = gradient_check(&mut p, &[0.0; 3], 3, &mut rng, |_| 4.2).unwrap();
        assert_eq!(check.max_rel_error, 0.0);
    }

    #[test]
    fn gradient_check_rejects_non_finite_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = vec![1.0];
        let err = gradient_check(&mut p, &[0.0], 1, &mut rng, |_| f64::NAN).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn vec_mat_backward_matches_finite_differences() {
        let w = Matrix::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]).unwrap();
        let x = vec![0.2, -0.4, 1.5];
        let dy = [1.0, -2.0];
        let mut dx = vec![0.0; 3];
        let mut dw = Matrix::zeros(3, 2);
        vec_mat_backward(&x, &w, &dy, &mut dx, &mut dw);
        let mut p = x.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let check = gradient_check(&mut p, &dx, 3, &mut rng, |x| {
            let mut y = [0.0; 2];
            vec_mat(x, &w, &mut y);
            dot(&y, &dy)
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-7);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution(row in prop::collection::vec(-1e4f64..1e4, 1..40)) {
                let p = softmax(&row);
                prop_assert!(p.iter().all(|v| *v >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn softmax_shift_invariant(row in prop::collection::vec(-50f64..50.0, 1..20), c in -100f64..100.0) {
                let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
                for (a, b) in softmax(&row).iter().zip(softmax(&shifted)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
