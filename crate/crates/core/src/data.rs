//! Core records shared by every stage of the pipeline.
//!
//! Covariates are stored column-major (`n × p`) so that a single covariate is a
//! contiguous slice. Internally indices are 0-based; anything that leaves the
//! library through a report converts to 1-based covariate numbers.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest sample size accepted by [`Dataset::validate`].
pub const MIN_ROWS: usize = 4;

/// Outcome, binary treatment, covariates and an optional known propensity.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<f64>,
    x: DMatrix<f64>,
    q0: Option<Vec<f64>>,
    names: Vec<String>,
}

impl Dataset {
    /// Builds and validates a dataset.
    pub fn new(
        y: Vec<f64>,
        a: Vec<f64>,
        x: DMatrix<f64>,
        q0: Option<Vec<f64>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if a.len() != n {
            return Err(Error::LengthMismatch {
                what: "treatment",
                expected: n,
                found: a.len(),
            });
        }
        if x.nrows() != n {
            return Err(Error::LengthMismatch {
                what: "covariate rows",
                expected: n,
                found: x.nrows(),
            });
        }
        if names.len() != x.ncols() {
            return Err(Error::LengthMismatch {
                what: "covariate names",
                expected: x.ncols(),
                found: names.len(),
            });
        }
        if let Some(q) = &q0 {
            if q.len() != n {
                return Err(Error::LengthMismatch {
                    what: "propensity",
                    expected: n,
                    found: q.len(),
                });
            }
        }
        Self {
            y,
            a,
            x,
            q0,
            names,
        }
        .validate()
    }

    /// Builds a dataset without checking invariants.
    ///
    /// Used for bootstrap resamples and simulated data, whose rows are drawn
    /// from an already validated source. The `n >= 4` rule in particular does
    /// not apply to internal resamples.
    pub fn from_parts_unchecked(
        y: Vec<f64>,
        a: Vec<f64>,
        x: DMatrix<f64>,
        q0: Option<Vec<f64>>,
        names: Vec<String>,
    ) -> Self {
        debug_assert_eq!(y.len(), a.len());
        debug_assert_eq!(y.len(), x.nrows());
        debug_assert_eq!(names.len(), x.ncols());
        Self {
            y,
            a,
            x,
            q0,
            names,
        }
    }

    /// Returns the dataset unchanged if every invariant holds.
    pub fn validate(self) -> Result<Self> {
        let n = self.y.len();
        if n < MIN_ROWS {
            return Err(Error::TooFewRows { n, min: MIN_ROWS });
        }
        if self.x.ncols() == 0 {
            return Err(Error::NoCovariates);
        }
        if let Some(row) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                column: "outcome".into(),
                row,
            });
        }
        for (row, &v) in self.a.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    column: "treatment".into(),
                    row,
                });
            }
            if v != 0.0 && v != 1.0 {
                return Err(Error::TreatmentNotBinary { row, value: v });
            }
        }
        for k in 0..self.p() {
            if let Some(row) = self.column(k).iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    column: self.names[k].clone(),
                    row,
                });
            }
        }
        if let Some(q) = &self.q0 {
            for (row, &v) in q.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue {
                        column: "propensity".into(),
                        row,
                    });
                }
                if v <= 0.0 || v >= 1.0 {
                    return Err(Error::PropensityOutOfRange { row, value: v });
                }
            }
        }
        let mut seen = HashSet::with_capacity(self.names.len());
        for name in &self.names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateName(name.clone()));
            }
        }
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn q0(&self) -> Option<&[f64]> {
        self.q0.as_deref()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Covariate `k` (0-based) as a contiguous slice.
    pub fn column(&self, k: usize) -> &[f64] {
        let n = self.n();
        &self.x.as_slice()[k * n..(k + 1) * n]
    }

    /// Replaces (or attaches) the propensity column.
    pub fn with_propensity(mut self, q0: Option<Vec<f64>>) -> Result<Self> {
        self.q0 = q0;
        self.validate()
    }

    /// New dataset whose rows are `rows` of this one, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let n = self.n();
        let m = rows.len();
        let p = self.p();
        let src = self.x.as_slice();
        let mut xs = Vec::with_capacity(m * p);
        for k in 0..p {
            let col = &src[k * n..(k + 1) * n];
            xs.extend(rows.iter().map(|&i| col[i]));
        }
        Dataset {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            a: rows.iter().map(|&i| self.a[i]).collect(),
            x: DMatrix::from_vec(m, p, xs),
            q0: self
                .q0
                .as_ref()
                .map(|q| rows.iter().map(|&i| q[i]).collect()),
            names: self.names.clone(),
        }
    }

    /// New dataset whose covariate `j` is covariate `order[j]` of this one.
    pub fn select_columns(&self, order: &[usize]) -> Dataset {
        let n = self.n();
        let mut xs = Vec::with_capacity(n * order.len());
        for &k in order {
            xs.extend_from_slice(self.column(k));
        }
        Dataset {
            y: self.y.clone(),
            a: self.a.clone(),
            x: DMatrix::from_vec(n, order.len(), xs),
            q0: self.q0.clone(),
            names: order.iter().map(|&k| self.names[k].clone()).collect(),
        }
    }

    /// Copy with every covariate centred, scaled to unit (1/n) standard
    /// deviation and oriented so its first clearly nonzero entry is positive,
    /// plus the signed scales used. Constant columns become zero.
    pub fn standardized(&self) -> (Dataset, Vec<f64>) {
        let n = self.n();
        let mut x = self.x.clone();
        let mut scales = Vec::with_capacity(self.p());
        for mut col in x.column_iter_mut() {
            let size = col.amax();
            let mean = col.mean();
            col.add_scalar_mut(-mean);
            let sd = (col.norm_squared() / n as f64).sqrt();
            // Rounding leaves a residue of order ε·|x| in a constant column.
            if sd <= 1e-12 * size {
                col.fill(0.0);
                scales.push(1.0);
            } else {
                let first = col.iter().copied().find(|v| v.abs() > 1e-8 * sd).unwrap_or(1.0);
                let s = sd.copysign(first);
                col /= s;
                scales.push(s);
            }
        }
        let out = Dataset {
            x,
            ..self.clone()
        };
        (out, scales)
    }

    /// Column order that sorts covariates by name.
    pub fn name_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.p()).collect();
        order.sort_by(|&i, &j| self.names[i].cmp(&self.names[j]));
        order
    }
}

/// Selected set `J`, remaining candidates `Jᶜ`, and the augmented design
/// `[1, X_J]` for one step of the forward procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContext {
    j_set: Vec<usize>,
    jc_set: Vec<usize>,
    xtilde: DMatrix<f64>,
}

impl StepContext {
    /// Context with nothing selected yet.
    pub fn initial(data: &Dataset) -> Self {
        Self::new(data, Vec::new()).expect("empty selection is always valid")
    }

    pub fn new(data: &Dataset, j_set: Vec<usize>) -> Result<Self> {
        let p = data.p();
        let mut seen = vec![false; p];
        for &j in &j_set {
            if j >= p || seen[j] {
                return Err(Error::Invariant(format!(
                    "selected index {j} is out of range or repeated"
                )));
            }
            seen[j] = true;
        }
        let jc_set = (0..p).filter(|&k| !seen[k]).collect();
        let n = data.n();
        let mut xs = Vec::with_capacity(n * (j_set.len() + 1));
        xs.resize(n, 1.0);
        for &j in &j_set {
            xs.extend_from_slice(data.column(j));
        }
        let xtilde = DMatrix::from_vec(n, j_set.len() + 1, xs);
        Ok(Self {
            j_set,
            jc_set,
            xtilde,
        })
    }

    /// Same selection rebuilt on another dataset with the same columns.
    pub fn rebind(&self, data: &Dataset) -> Result<Self> {
        Self::new(data, self.j_set.clone())
    }

    /// Context after moving `k` from the candidates into the selected set.
    pub fn advance(&self, data: &Dataset, k: usize) -> Result<Self> {
        if !self.jc_set.contains(&k) {
            return Err(Error::Invariant(format!("{k} is not a candidate")));
        }
        let mut j = self.j_set.clone();
        j.push(k);
        Self::new(data, j)
    }

    pub fn j_set(&self) -> &[usize] {
        &self.j_set
    }

    pub fn jc_set(&self) -> &[usize] {
        &self.jc_set
    }

    pub fn xtilde(&self) -> &DMatrix<f64> {
        &self.xtilde
    }
}

/// Where a [`Residualized`] pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualSource {
    /// `W = A - q0(X)`, `r = Y - phî(X)`.
    Rct,
    /// `Ŵ = A - q̂(X)`, `r = Y - ĥ(X)`.
    DoublyRobust,
}

/// Treatment residual `w` and outcome residual `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residualized {
    pub w: Vec<f64>,
    pub r: Vec<f64>,
    pub source: ResidualSource,
}

/// `W = A - q` elementwise.
pub fn compute_w(a: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if a.len() != q.len() {
        return Err(Error::LengthMismatch {
            what: "propensity",
            expected: a.len(),
            found: q.len(),
        });
    }
    a.iter()
        .zip(q)
        .enumerate()
        .map(|(row, (&ai, &qi))| {
            if !(qi > 0.0 && qi < 1.0) {
                Err(Error::PropensityOutOfRange { row, value: qi })
            } else {
                Ok(ai - qi)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(p: usize) -> Vec<String> {
        (1..=p).map(|k| format!("x{k}")).collect()
    }

    #[test]
    fn standardized_columns_have_unit_scale() {
        let x = DMatrix::from_vec(4, 2, vec![1.0, 3.0, 5.0, 7.0, 2.5, 2.5, 2.5, 2.5]);
        let d = Dataset::new(vec![0.0; 4], vec![0.0, 1.0, 0.0, 1.0], x, None, names(2)).unwrap();
        let (s, scales) = d.standardized();
        // The first centred entry is negative, so the column is flipped.
        assert!((scales[0] + 5f64.sqrt()).abs() < 1e-12);
        assert!(s.column(0)[0] > 0.0);
        let flipped = d.select_columns(&[0, 1]);
        let neg = Dataset::new(vec![0.0; 4], vec![0.0, 1.0, 0.0, 1.0], -flipped.x().clone(), None, names(2)).unwrap();
        assert_eq!(neg.standardized().0.column(0), s.column(0));
        assert_eq!(scales[1], 1.0);
        assert!(s.column(0).iter().sum::<f64>().abs() < 1e-12);
        assert!((s.column(0).iter().map(|v| v * v).sum::<f64>() - 4.0).abs() < 1e-12);
        assert!(s.column(1).iter().all(|&v| v == 0.0));
    }

    fn small() -> Dataset {
        Dataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.0, 1.0, 0.0, 1.0],
            DMatrix::from_vec(4, 1, vec![0.5, -1.0, 2.0, 0.0]),
            None,
            names(1),
        )
        .unwrap()
    }

    #[test]
    fn valid_dataset_passes() {
        let d = small();
        assert_eq!(d.n(), 4);
        assert_eq!(d.p(), 1);
    }

    #[test]
    fn non_binary_treatment_rejected() {
        let err = Dataset::new(
            vec![1.0; 4],
            vec![0.0, 1.0, 2.0, 1.0],
            DMatrix::zeros(4, 1),
            None,
            names(1),
        )
        .unwrap_err();
        assert_eq!(err, Error::TreatmentNotBinary { row: 2, value: 2.0 });
    }

    #[test]
    fn propensity_must_be_interior() {
        let err = Dataset::new(
            vec![1.0; 4],
            vec![0.0, 1.0, 0.0, 1.0],
            DMatrix::zeros(4, 1),
            Some(vec![0.5, 0.5, 1.0, 0.5]),
            names(1),
        )
        .unwrap_err();
        assert_eq!(err, Error::PropensityOutOfRange { row: 2, value: 1.0 });
    }

    #[test]
    fn other_validation_errors() {
        let e = Dataset::new(
            vec![1.0, f64::NAN, 0.0, 0.0],
            vec![0.0; 4],
            DMatrix::zeros(4, 1),
            None,
            names(1),
        )
        .unwrap_err();
        assert!(matches!(e, Error::NonFiniteValue { row: 1, .. }));
        let e = Dataset::new(
            vec![0.0; 4],
            vec![0.0; 4],
            DMatrix::zeros(4, 2),
            None,
            vec!["a".into(), "a".into()],
        )
        .unwrap_err();
        assert_eq!(e, Error::DuplicateName("a".into()));
        let e = Dataset::new(vec![0.0; 3], vec![0.0; 3], DMatrix::zeros(3, 1), None, names(1))
            .unwrap_err();
        assert!(matches!(e, Error::TooFewRows { n: 3, .. }));
        let mut x = DMatrix::zeros(4, 1);
        x[(3, 0)] = f64::INFINITY;
        let e = Dataset::new(vec![0.0; 4], vec![0.0; 4], x, None, names(1)).unwrap_err();
        assert_eq!(
            e,
            Error::NonFiniteValue {
                column: "x1".into(),
                row: 3
            }
        );
    }

    #[test]
    fn compute_w_examples() {
        assert_eq!(
            compute_w(&[1.0, 0.0, 1.0, 0.0], &[0.5; 4]).unwrap(),
            vec![0.5, -0.5, 0.5, -0.5]
        );
        let w = compute_w(&[1.0, 0.0], &[0.8, 0.2]).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-15 && (w[1] + 0.2).abs() < 1e-15);
        assert!(compute_w(&[1.0], &[0.0]).is_err());
        assert!(compute_w(&[1.0, 0.0], &[0.5]).is_err());
    }

    #[test]
    fn step_context_layout() {
        let d = Dataset::new(
            vec![0.0; 4],
            vec![0.0, 1.0, 0.0, 1.0],
            DMatrix::from_vec(4, 3, (0..12).map(f64::from).collect()),
            None,
            names(3),
        )
        .unwrap();
        let s = StepContext::initial(&d).advance(&d, 2).unwrap();
        assert_eq!(s.j_set(), &[2]);
        assert_eq!(s.jc_set(), &[0, 1]);
        assert!(s.xtilde().column(0).iter().all(|&v| v == 1.0));
        assert_eq!(s.xtilde().column(1).as_slice(), d.column(2));
        assert!(s.advance(&d, 2).is_err());
    }

    #[test]
    fn row_and_column_selection() {
        let d = small();
        let r = d.select_rows(&[3, 3, 0]);
        assert_eq!(r.y(), &[4.0, 4.0, 1.0]);
        assert_eq!(r.column(0), &[0.0, 0.0, 0.5]);
        let ident = d.select_rows(&[0, 1, 2, 3]);
        assert_eq!(ident, d);
    }

    proptest! {
        #[test]
        fn w_in_open_interval(a in proptest::collection::vec(0u8..2, 1..40),
                              q in proptest::collection::vec(0.001f64..0.999, 40)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let q = &q[..a.len()];
            for w in compute_w(&a, q).unwrap() {
                prop_assert!(w > -1.0 && w < 1.0 && w != 0.0);
            }
        }

        #[test]
        fn validate_is_idempotent(ys in proptest::collection::vec(-5.0f64..5.0, 4..20)) {
            let n = ys.len();
            let a: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
            let x = DMatrix::from_fn(n, 2, |i, j| (i * 3 + j) as f64);
            let d = Dataset::new(ys, a, x, None, names(2)).unwrap();
            prop_assert_eq!(d.clone().validate().unwrap(), d);
        }
    }
}
