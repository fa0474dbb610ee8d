//! Small dense kernels for the hot paths.
//!
//! Systems here are at most `(p + 1) × (p + 1)` and are solved thousands of
//! times per bootstrap block, so they work on flat row-major buffers instead
//! of going through a general-purpose matrix type.

/// Inner product with four independent accumulators, which lets the
/// compiler keep several additions in flight.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub(crate) struct Cholesky {
    dim: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factors the row-major `dim × dim` matrix `a`.
    ///
    /// Returns `None` when a pivot falls below `rel_tol` times the largest
    /// diagonal entry, i.e. the matrix is singular to working precision.
    pub(crate) fn new(mut a: Vec<f64>, dim: usize, rel_tol: f64) -> Option<Self> {
        debug_assert_eq!(a.len(), dim * dim);
        let scale = (0..dim).map(|i| a[i * dim + i]).fold(0.0_f64, f64::max);
        if !(scale > 0.0) || !scale.is_finite() {
            return None;
        }
        let floor = rel_tol * scale;
        for j in 0..dim {
            let mut d = a[j * dim + j];
            for k in 0..j {
                d -= a[j * dim + k] * a[j * dim + k];
            }
            if !(d > floor) {
                return None;
            }
            let d = d.sqrt();
            a[j * dim + j] = d;
            for i in j + 1..dim {
                let mut s = a[i * dim + j];
                for k in 0..j {
                    s -= a[i * dim + k] * a[j * dim + k];
                }
                a[i * dim + j] = s / d;
            }
        }
        Some(Self { dim, l: a })
    }

    pub(crate) fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        let l = &self.l;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * n + k] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut out = b.to_vec();
        self.solve_in_place(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn cholesky_matches_lu() {
        let a = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let b = [1.0, -2.0, 0.5];
        let x = Cholesky::new(a.clone(), 3, 1e-12).unwrap().solve(&b);
        let lu = DMatrix::from_row_slice(3, 3, &a)
            .lu()
            .solve(&DVector::from_row_slice(&b))
            .unwrap();
        for i in 0..3 {
            assert!((x[i] - lu[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn cholesky_flags_singular() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(Cholesky::new(a, 2, 1e-12).is_none());
        assert!(Cholesky::new(vec![0.0], 1, 1e-12).is_none());
    }
}
