//! Dense row-major tensor and the raw compute kernels behind the tape ops.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Dim(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    /// Xavier-uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| F::lit(rng.range(-a, a)))
            .collect();
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::lit(rng.range(lo, hi))).collect();
        Tensor { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret as a matrix: returns (rows, cols). 1-D tensors count as a
    /// single row; higher ranks flatten all leading dims into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.len() / cols.max(1), cols)
            }
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_data(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::lit(v.to_f64x())).collect(),
        }
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

/// C += A[m×k] · B[k×n]. The i-k-j loop keeps the inner loop contiguous.
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// C = A[m×k] · B[k×n].
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// C += A[m×k] · B[n×k]ᵀ (B stored row-major as n×k).
pub fn matmul_nt_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            out[i * n + j] += s;
        }
    }
}

pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    matmul_nt_acc(a, b, m, k, n, &mut out);
    out
}

/// C += A[k×m]ᵀ · B[k×n].
pub fn matmul_tn_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    matmul_tn_acc(a, b, m, k, n, &mut out);
    out
}

pub fn transpose<F: Scalar>(a: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Row-wise softmax with max-subtraction. `mask`, when given, marks the
/// attendable columns; masked columns get probability zero.
pub fn softmax_rows_masked<F: Scalar>(x: &[F], m: usize, n: usize, mask: Option<&[bool]>) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let live = |j: usize| mask.is_none_or(|mk| mk[j]);
        let mut max = F::neg_infinity();
        for j in 0..n {
            if live(j) && row[j] > max {
                max = row[j];
            }
        }
        let mut sum = F::zero();
        let o_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            if live(j) {
                let e = (row[j] - max).exp();
                o_row[j] = e;
                sum += e;
            }
        }
        for v in o_row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// GELU, tanh approximation.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit(0.7978845608028654); // sqrt(2/pi)
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit(0.7978845608028654);
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    let three = F::lit(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + three * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Layer norm over each row of x[m×c]; returns (output, xhat, inv_std).
pub fn layer_norm_fwd<F: Scalar>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    m: usize,
    c: usize,
    eps: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut out = vec![F::zero(); m * c];
    let mut xhat = vec![F::zero(); m * c];
    let mut inv_std = vec![F::zero(); m];
    let cf = F::lit(c as f64);
    for i in 0..m {
        let row = &x[i * c..(i + 1) * c];
        let mean = row.iter().copied().sum::<F>() / cf;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<F>()
            / cf;
        let istd = F::one() / (var + eps).sqrt();
        inv_std[i] = istd;
        for j in 0..c {
            let h = (row[j] - mean) * istd;
            xhat[i * c + j] = h;
            out[i * c + j] = gamma[j] * h + beta[j];
        }
    }
    (out, xhat, inv_std)
}

/// Same-size cross-correlation of a single-channel image with an odd
/// s×s kernel; zero padding of (s-1)/2 on every side.
pub fn conv2d_same<F: Scalar>(x: &[F], h: usize, w: usize, kernel: &[F], s: usize, bias: F) -> Vec<F> {
    debug_assert!(s % 2 == 1);
    let p = (s - 1) / 2;
    let mut out = vec![bias; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = F::zero();
            for u in 0..s {
                let ii = i as isize + u as isize - p as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for v in 0..s {
                    let jj = j as isize + v as isize - p as isize;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    acc += x[ii as usize * w + jj as usize] * kernel[u * s + v];
                }
            }
            out[i * w + j] += acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let id = Tensor::<f64>::eye(2);
        let out = matmul(&id.data, &a, 2, 2, 2);
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = vec![0.0; 4];
        let b = vec![5.0, -6.0, 7.0, 8.0];
        assert_eq!(matmul(&z, &b, 2, 2, 2), vec![0.0; 4]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let mut rng = Rng::new(3);
        let a: Vec<f64> = (0..12).map(|_| rng.range(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.range(-1.0, 1.0)).collect();
        // a: 3x4, b: 4x5
        let base = matmul(&a, &b, 3, 4, 5);
        let bt = transpose(&b, 4, 5);
        let at = transpose(&a, 3, 4);
        let v1 = matmul_nt(&a, &bt, 3, 4, 5);
        let v2 = matmul_tn(&at, &b, 3, 4, 5);
        for i in 0..15 {
            assert!((base[i] - v1[i]).abs() < 1e-12);
            assert!((base[i] - v2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetric_and_closed_form() {
        let out = softmax_rows_masked(&[0.0_f64, 0.0], 1, 2, None);
        assert!((out[0] - 0.5).abs() < 1e-12);
        let out = softmax_rows_masked(&[(2.0_f64).ln(), 0.0], 1, 2, None);
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((out[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logit_stable() {
        let out = softmax_rows_masked(&[1000.0_f64, 0.0], 1, 2, None);
        assert!(out[0].is_finite() && out[1].is_finite());
        assert!(out[0] > 0.999999);
        assert!(out[1] < 1e-6);
    }

    #[test]
    fn conv_identity_kernel() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let out = conv2d_same(&x, 3, 4, &k, 3, 0.0);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_ones_kernel_edges() {
        let x = vec![1.0; 9];
        let k = vec![1.0; 9];
        let out = conv2d_same(&x, 3, 3, &k, 3, 0.0);
        assert_eq!(out[4], 9.0); // interior
        assert_eq!(out[0], 4.0); // corner
        assert_eq!(out[1], 6.0); // edge
    }

    #[test]
    fn conv_zero_image_gives_bias() {
        let x = vec![0.0; 16];
        let k = vec![0.3; 25];
        let out = conv2d_same(&x, 4, 4, &k, 5, 2.5);
        assert!(out.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn tensor_shape_mismatch_names_shapes() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains('5'), "{msg}");
    }
}
