//! Minimal dense f64 tensor plus the handful of matmul kernels the encoder
//! towers need. Row-major layout throughout.

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let numel = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { dims: vec![], data: vec![value] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "dims/data mismatch");
        Tensor { dims: dims.to_vec(), data }
    }

    /// Gaussian init, mean 0.
    pub fn randn(dims: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel: usize = dims.iter().product();
        let data = (0..numel).map(|_| rng.next_normal() * std).collect();
        Tensor { dims: dims.to_vec(), data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn set_item(&mut self, value: f64) {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0] = value;
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.dims.len(), 2);
        let cols = self.dims[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }
}

/// out[m,n] += a[m,k] . b[k,n]
pub fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// a[m,k] . b[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

/// a[m,k] . b[n,k]^T -> [m,n]; b given row-major as n rows of length k.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    }
    out
}

/// out[k,n] += a[m,k]^T . b[m,n]; a given row-major as m rows of length k.
pub fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = Rng::new(1);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 4, 5), (7, 2, 9), (8, 8, 8)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.next_normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.next_normal()).collect();
            let got = matmul(&a, &b, m, k, n);
            let want = naive_matmul(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_nt_is_b_transposed() {
        let mut rng = Rng::new(2);
        let (m, k, n) = (4usize, 6usize, 3usize);
        let a: Vec<f64> = (0..m * k).map(|_| rng.next_normal()).collect();
        let b: Vec<f64> = (0..n * k).map(|_| rng.next_normal()).collect();
        // transpose b into [k,n] and use plain matmul as the oracle
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for kk in 0..k {
                bt[kk * n + j] = b[j * k + kk];
            }
        }
        let got = matmul_nt(&a, &b, m, k, n);
        let want = naive_matmul(&a, &bt, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_tn_is_a_transposed() {
        let mut rng = Rng::new(3);
        let (m, k, n) = (5usize, 4usize, 6usize);
        let a: Vec<f64> = (0..m * k).map(|_| rng.next_normal()).collect();
        let b: Vec<f64> = (0..m * n).map(|_| rng.next_normal()).collect();
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let mut got = vec![0.0; k * n];
        matmul_tn_acc(&mut got, &a, &b, m, k, n);
        let want = naive_matmul(&at, &b, k, m, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn randn_respects_std() {
        let mut rng = Rng::new(4);
        let t = Tensor::randn(&[100, 100], 0.02, &mut rng);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        let var = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - 0.02).abs() < 2e-3);
    }

    #[test]
    fn scalar_tensor_roundtrip() {
        let mut t = Tensor::scalar(1.5);
        assert_eq!(t.item(), 1.5);
        t.set_item(-2.0);
        assert_eq!(t.item(), -2.0);
        assert_eq!(t.dims(), &[] as &[usize]);
        assert_eq!(t.numel(), 1);
    }
}
