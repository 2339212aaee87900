use std::sync::Arc;

use super::{BackwardFn, Tensor};
use crate::error::{Error, Result};

/// `c = op(a) * op(b) + beta * c` for row-major storage, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. A transposed operand is stored as its
/// transpose (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// `[N, K] x [K, M] -> [N, M]`
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), rhs.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        let (n, k, m) = (a_shape[0], a_shape[1], b_shape[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.data(), false, rhs.data(), false, 0.0, &mut out);

        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        let backward: Option<BackwardFn> = (need_a || need_b).then(|| {
            let a = Arc::clone(&self.0.data);
            let b = Arc::clone(&rhs.0.data);
            Box::new(move |g: &[f64]| {
                let da = need_a.then(|| {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g, false, &b, true, 0.0, &mut da);
                    da
                });
                let db = need_b.then(|| {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, &a, true, g, false, 0.0, &mut db);
                    db
                });
                vec![da, db]
            }) as BackwardFn
        });
        Ok(Tensor::from_op(
            "matmul",
            vec![n, m],
            out,
            vec![self.clone(), rhs.clone()],
            backward,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 || bias.shape() != [shape[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: shape.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = bias.data();
        let out: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[(i / inner) % channels])
            .collect();
        let (need_x, need_b) = (self.requires_grad(), bias.requires_grad());
        let backward: Option<BackwardFn> = (need_x || need_b).then(|| {
            Box::new(move |g: &[f64]| {
                let db = need_b.then(|| {
                    let mut db = vec![0.0; channels];
                    for (i, gi) in g.iter().enumerate() {
                        db[(i / inner) % channels] += gi;
                    }
                    db
                });
                vec![need_x.then(|| g.to_vec()), db]
            }) as BackwardFn
        });
        Ok(Tensor::from_op(
            "add_channel_bias",
            shape.to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            backward,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    c[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        c
    }

    #[test]
    fn identity_product() {
        let i2 = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&x).unwrap().data(), x.data());
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = Tensor::new(&[3, 4], a.clone())
            .unwrap()
            .matmul(&Tensor::new(&[4, 2], b.clone()).unwrap())
            .unwrap();
        for (x, y) in c.data().iter().zip(naive(&a, &b, 3, 4, 2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_extent_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn transposed_gemm_layouts() {
        // a stored 3x2 (so op(a) = 2x3), b stored 4x3 (op(b) = 3x4)
        let a_st: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let b_st: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        let mut a = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                a[i * 3 + p] = a_st[p * 2 + i];
            }
        }
        let mut b = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                b[p * 4 + j] = b_st[j * 3 + p];
            }
        }
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a_st, true, &b_st, true, 0.0, &mut c);
        assert_eq!(c, naive(&a, &b, 2, 3, 4));
    }
}
