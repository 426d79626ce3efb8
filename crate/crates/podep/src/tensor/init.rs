//! Parameter initializers.
//!
//! All randomness is drawn in `f64` and cast to the target scalar afterwards,
//! so an `f32` and an `f64` model built from the same seed hold the same
//! values and consume the same RNG stream.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::Scalar;

/// Zero-mean Gaussian entries with the given standard deviation.
pub fn gaussian<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("gaussian: bad std");
    let data = (0..shape.iter().product())
        .map(|_| T::from(normal.sample(rng)).unwrap())
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random square orthogonal matrix from the QR decomposition of a Gaussian
/// matrix, with column signs fixed to the sign of R's diagonal.
pub fn orthogonal<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor<T> {
    let a = gaussian::<f64, R>(&[n, n], 1.0, rng);
    let (q, r) = householder_qr(&a);
    let mut q = q;
    for j in 0..n {
        if r.at2(j, j) < 0.0 {
            for i in 0..n {
                let v = q.at2(i, j);
                q.set2(i, j, -v);
            }
        }
    }
    let data = q.data().iter().map(|&v| T::from(v).unwrap()).collect();
    Tensor::from_vec(&[n, n], data).unwrap()
}

/// Constant-filled tensor, for biases with a fixed starting offset.
pub fn constant<T: Scalar>(shape: &[usize], value: f64) -> Tensor<T> {
    Tensor::filled(shape, T::from(value).unwrap())
}

fn householder_qr(a: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut r = a.clone();
    let mut q = Tensor::zeros(&[n, n]);
    for i in 0..n {
        q.set2(i, i, 1.0);
    }
    for k in 0..n {
        let norm: f64 = (k..n).map(|i| r.at2(i, k) * r.at2(i, k)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r.at2(k, k) > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| r.at2(i, k)).collect();
        v[0] -= alpha;
        let vnorm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm < f64::EPSILON {
            continue;
        }
        for x in &mut v {
            *x /= vnorm;
        }
        // R <- H R on the trailing block.
        for j in k..n {
            let s: f64 = (k..n).map(|i| v[i - k] * r.at2(i, j)).sum();
            for i in k..n {
                let cur = r.at2(i, j);
                r.set2(i, j, cur - 2.0 * s * v[i - k]);
            }
        }
        // Q <- Q H.
        for i in 0..n {
            let s: f64 = (k..n).map(|j| q.at2(i, j) * v[j - k]).sum();
            for j in k..n {
                let cur = q.at2(i, j);
                q.set2(i, j, cur - 2.0 * s * v[j - k]);
            }
        }
    }
    (q, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let q = orthogonal::<f64, _>(16, &mut rng);
        let qtq = q.transpose().matmul(&q).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (qtq.at2(i, j) - expect).abs() < 1e-6,
                    "Q^T Q [{},{}] = {}",
                    i,
                    j,
                    qtq.at2(i, j)
                );
            }
        }
    }

    #[test]
    fn same_seed_gives_same_values_in_both_precisions() {
        let mut rng32 = ChaCha8Rng::seed_from_u64(9);
        let mut rng64 = ChaCha8Rng::seed_from_u64(9);
        let a: Tensor<f32> = gaussian(&[3, 4], 0.01, &mut rng32);
        let b: Tensor<f64> = gaussian(&[3, 4], 0.01, &mut rng64);
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn gaussian_std_is_roughly_right() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = gaussian(&[10_000], 0.01, &mut rng);
        let mean: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let var: f64 =
            t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - 0.01).abs() < 1e-3);
    }
}
