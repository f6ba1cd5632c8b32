//! Dense row-major `f64` tensors and the raw kernels the tape is built on.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} must be a non-empty list of positive dimensions"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn with_shape(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::with_shape(vec![m, n], out))
}

/// `out += a[m×k] · b[k×n]`
///
/// Register-tiled in 4×4 output blocks. Every output element accumulates
/// its products in increasing `p` order starting from its current value,
/// so the three layouts below agree bitwise with one another and with the
/// naive triple loop.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const T: usize = 4;
    let (mb, nb) = (m / T * T, n / T * T);
    // b as column panels of width T, one [f64; T] per p
    let bpanels: Vec<[f64; T]> = (0..nb / T)
        .flat_map(|jb| (0..k).map(move |p| b[p * n + jb * T..][..T].try_into().expect("tile")))
        .collect();
    let mut apanel = vec![[0.0f64; T]; k];
    for i0 in (0..mb).step_by(T) {
        for (p, v) in apanel.iter_mut().enumerate() {
            *v = std::array::from_fn(|r| a[(i0 + r) * k + p]);
        }
        for j0 in (0..nb).step_by(T) {
            let mut acc = [[0.0f64; T]; T];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..][..T]);
            }
            for (av, bv) in apanel.iter().zip(&bpanels[j0 / T * k..(j0 / T + 1) * k]) {
                for r in 0..T {
                    for c in 0..T {
                        acc[r][c] += av[r] * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..][..T].copy_from_slice(row);
            }
        }
        for r in 0..T {
            for j in nb..n {
                let mut v = out[(i0 + r) * n + j];
                for (p, av) in apanel.iter().enumerate() {
                    v += av[r] * b[p * n + j];
                }
                out[(i0 + r) * n + j] = v;
            }
        }
    }
    for i in mb..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let mut v = out[i * n + j];
            for (p, &av) in arow.iter().enumerate() {
                v += av * b[p * n + j];
            }
            out[i * n + j] = v;
        }
    }
}

fn transpose_into(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; src.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = src[i * cols + j];
        }
    }
    t
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn(a, &transpose_into(b, n, k), out, m, k, n);
}

/// `out += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn(&transpose_into(a, k, m), b, out, m, k, n);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn reference(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn identity_products() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut r = rng::stream(3, "mm", &[]);
        let a = Tensor::matrix(4, 3, rng::gaussian_vec(&mut r, 12, 1.0)).unwrap();
        let b = Tensor::matrix(3, 5, rng::gaussian_vec(&mut r, 15, 1.0)).unwrap();
        let got = matmul(&a, &b).unwrap();
        for (g, w) in got.data().iter().zip(reference(&a, &b)) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn tiled_kernel_is_bitwise_the_triple_loop_at_ragged_sizes() {
        let mut r = rng::stream(5, "mm", &[]);
        for (m, k, n) in [(7, 5, 9), (4, 4, 4), (1, 3, 2), (9, 1, 6)] {
            let a = Tensor::matrix(m, k, rng::gaussian_vec(&mut r, m * k, 1.0)).unwrap();
            let b = Tensor::matrix(k, n, rng::gaussian_vec(&mut r, k * n, 1.0)).unwrap();
            assert_eq!(matmul(&a, &b).unwrap().data(), &reference(&a, &b)[..]);
            let bt = transpose_into(b.data(), k, n);
            let mut nt = vec![0.0; m * n];
            gemm_nt(a.data(), &bt, &mut nt, m, k, n);
            assert_eq!(nt, reference(&a, &b));
            let at = transpose_into(a.data(), m, k);
            let mut tn = vec![0.0; m * n];
            gemm_tn(&at, b.data(), &mut tn, m, k, n);
            assert_eq!(tn, reference(&a, &b));
        }
    }

    #[test]
    fn transposed_kernels_agree() {
        let mut r = rng::stream(4, "mm", &[]);
        let a = rng::gaussian_vec(&mut r, 6, 1.0); // 2×3
        let b = rng::gaussian_vec(&mut r, 12, 1.0); // 4×3
        let mut nt = vec![0.0; 8];
        gemm_nt(&a, &b, &mut nt, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert!((nt[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        let c = rng::gaussian_vec(&mut r, 8, 1.0); // 2×4
        let mut tn = vec![0.0; 12];
        gemm_tn(&a, &c, &mut tn, 3, 2, 4);
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|p| a[p * 3 + i] * c[p * 4 + j]).sum();
                assert!((tn[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }
}
