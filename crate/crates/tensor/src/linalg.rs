//! Small dense linear algebra used by the invertible channel mixing and the
//! Jacobian oracles: LU with partial pivoting, determinants, inverses and
//! random rotations.

use rand::Rng;

use crate::{Matrix, Scalar, TensorError};

/// `P·A = L·U` packed into one matrix (unit-diagonal `L` below, `U` on and above).
#[derive(Clone, Debug)]
pub struct Lu<F> {
    lu: Matrix<F>,
    perm: Vec<usize>,
    sign: F,
}

impl<F: Scalar> Lu<F> {
    pub fn new(a: &Matrix<F>) -> Result<Self, TensorError> {
        let n = a.rows();
        if n != a.cols() {
            return Err(TensorError::Shape(format!("LU of non-square {}x{}", a.rows(), a.cols())));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = F::one();
        for k in 0..n {
            let mut piv = k;
            let mut best = lu[(k, k)].abs();
            for r in k + 1..n {
                let v = lu[(r, k)].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best == F::zero() || !best.is_finite() {
                return Err(TensorError::Singular { pivot: k, condition: F::infinity().f64() });
            }
            if piv != k {
                for c in 0..n {
                    let tmp = lu[(k, c)];
                    lu[(k, c)] = lu[(piv, c)];
                    lu[(piv, c)] = tmp;
                }
                perm.swap(k, piv);
                sign = -sign;
            }
            let d = lu[(k, k)];
            for r in k + 1..n {
                let f = lu[(r, k)] / d;
                lu[(r, k)] = f;
                if f != F::zero() {
                    for c in k + 1..n {
                        let u = lu[(k, c)];
                        lu[(r, c)] -= f * u;
                    }
                }
            }
        }
        Ok(Self { lu, perm, sign })
    }

    /// `(sign(det), log|det|)`.
    pub fn sign_log_det(&self) -> (F, F) {
        let mut sign = self.sign;
        let mut log = F::zero();
        for i in 0..self.lu.rows() {
            let d = self.lu[(i, i)];
            if d < F::zero() {
                sign = -sign;
            }
            log += d.abs().ln();
        }
        (sign, log)
    }

    pub fn det(&self) -> F {
        let (s, l) = self.sign_log_det();
        s * l.exp()
    }

    /// Ratio of largest to smallest |pivot|; a cheap conditioning indicator.
    pub fn pivot_ratio(&self) -> f64 {
        let piv: Vec<f64> = (0..self.lu.rows()).map(|i| self.lu[(i, i)].abs().f64()).collect();
        let max = piv.iter().cloned().fold(0.0, f64::max);
        let min = piv.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }

    /// Solves `A x = b` for every column of `b`.
    pub fn solve(&self, b: &Matrix<F>) -> Matrix<F> {
        let n = self.lu.rows();
        assert_eq!(b.rows(), n, "solve rhs rows");
        let mut x = Matrix::from_fn(n, b.cols(), |r, c| b[(self.perm[r], c)]);
        for c in 0..b.cols() {
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.lu[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s -= self.lu[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.lu[(i, i)];
            }
        }
        x
    }

    pub fn inverse(&self) -> Matrix<F> {
        self.solve(&Matrix::identity(self.lu.rows()))
    }
}

pub fn inverse<F: Scalar>(a: &Matrix<F>) -> Result<Matrix<F>, TensorError> {
    Ok(Lu::new(a)?.inverse())
}

pub fn log_abs_det<F: Scalar>(a: &Matrix<F>) -> Result<F, TensorError> {
    Ok(Lu::new(a)?.sign_log_det().1)
}

/// Random orthogonal matrix with determinant +1 (Gram–Schmidt on a Gaussian
/// draw, first column negated when the determinant comes out negative).
pub fn random_rotation<F: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix<F> {
    loop {
        let g = Matrix::<f64>::randn(n, n, 1.0, rng);
        let mut q = Matrix::<f64>::zeros(n, n);
        let mut ok = true;
        for j in 0..n {
            let mut v: Vec<f64> = (0..n).map(|i| g[(i, j)]).collect();
            for _ in 0..2 {
                for p in 0..j {
                    let dot: f64 = (0..n).map(|i| v[i] * q[(i, p)]).sum();
                    for (i, vi) in v.iter_mut().enumerate() {
                        *vi -= dot * q[(i, p)];
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for (i, vi) in v.iter().enumerate() {
                q[(i, j)] = vi / norm;
            }
        }
        if !ok {
            continue;
        }
        let det = Lu::new(&q).map(|lu| lu.det()).unwrap_or(0.0);
        if det < 0.0 {
            for i in 0..n {
                q[(i, 0)] = -q[(i, 0)];
            }
        }
        return q.cast();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn det_of_diagonal_and_permutation() {
        let d = Matrix::<f64>::from_fn(3, 3, |r, c| if r == c { 2.0 } else { 0.0 });
        let lu = Lu::new(&d).unwrap();
        assert!((lu.sign_log_det().1 - 3.0 * 2f64.ln()).abs() < 1e-12);
        let p = Matrix::<f64>::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!((Lu::new(&p).unwrap().det() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::<f64>::randn(6, 6, 1.0, &mut rng);
        let inv = inverse(&a).unwrap();
        let eye = a.matmul(&inv);
        assert!(eye.max_abs_diff(&Matrix::identity(6)) < 1e-10);
    }

    #[test]
    fn singular_is_reported() {
        let a = Matrix::<f64>::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(Lu::new(&a), Err(TensorError::Singular { .. })));
    }

    #[test]
    fn rotations_are_orthogonal_with_positive_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 5, 16] {
            let q: Matrix<f64> = random_rotation(n, &mut rng);
            let qtq = q.matmul_t(true, &q, false);
            assert!(qtq.max_abs_diff(&Matrix::identity(n)) < 1e-10);
            assert!((Lu::new(&q).unwrap().det() - 1.0).abs() < 1e-9);
        }
    }
}
