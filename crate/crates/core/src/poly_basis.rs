//! Multivariate polynomial bases of fixed total degree.
//!
//! A basis is the set of products `∏_i b_{α_i}(z_i)` over all multi-indices
//! `α` with `|α| ≤ degree`, where `b_e` is either the monomial `z^e` or the
//! Chebyshev polynomial of the first kind `T_e`. Multi-indices are stored in
//! graded-lexicographic order: ascending total degree, and within one degree
//! a larger exponent on an earlier coordinate comes first. The constant term
//! is always index 0.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{PpouError, Result};

static OUT_OF_RANGE_EVALS: AtomicU64 = AtomicU64::new(0);

/// Number of Chebyshev evaluations with a coordinate outside `[-1, 1]`
/// since process start. Such points are still evaluated by the recurrence.
pub fn out_of_range_count() -> u64 {
    OUT_OF_RANGE_EVALS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Monomial,
    #[default]
    Chebyshev,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolyBasis {
    latent_dim: usize,
    degree: usize,
    family: BasisFamily,
    exponents: Vec<Vec<u32>>,
}

/// `binomial(latent_dim + degree, degree)`: the number of multi-indices of
/// total degree at most `degree` in `latent_dim` variables.
pub fn basis_size(latent_dim: usize, degree: usize) -> usize {
    // C(n, k) built incrementally stays integral at every step.
    let mut acc: usize = 1;
    for i in 1..=degree {
        acc = acc * (latent_dim + i) / i;
    }
    acc
}

fn graded_lex(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn fill(prefix: &mut Vec<u32>, remaining_dims: usize, total: u32, out: &mut Vec<Vec<u32>>) {
        if remaining_dims == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=total).rev() {
            prefix.push(e);
            fill(prefix, remaining_dims - 1, total - e, out);
            prefix.pop();
        }
    }
    let mut out = Vec::with_capacity(basis_size(dim, degree));
    for total in 0..=degree as u32 {
        fill(&mut Vec::with_capacity(dim), dim, total, &mut out);
    }
    out
}

impl PolyBasis {
    pub fn new(latent_dim: usize, degree: usize, family: BasisFamily) -> Result<Self> {
        if latent_dim == 0 {
            return Err(PpouError::invalid("polynomial basis needs latent_dim >= 1"));
        }
        Ok(Self {
            latent_dim,
            degree,
            family,
            exponents: graded_lex(latent_dim, degree),
        })
    }

    /// Rebuilds a basis from a stored exponent table, checking that it is the
    /// canonical table for the given dimension and degree.
    pub fn from_exponents(
        latent_dim: usize,
        degree: usize,
        family: BasisFamily,
        exponents: Vec<Vec<u32>>,
    ) -> Result<Self> {
        let basis = Self::new(latent_dim, degree, family)?;
        if basis.exponents != exponents {
            return Err(PpouError::Format(
                "stored exponent table does not match graded-lex order".into(),
            ));
        }
        Ok(basis)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn family(&self) -> BasisFamily {
        self.family
    }

    /// Number of basis polynomials `K`.
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.latent_dim {
            return Err(PpouError::invalid(format!(
                "basis expects {}-dimensional points, got {got}",
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Fills `vals[e]` with `b_e(x)` and, if given, `ders[e]` with `b_e'(x)`
    /// for `e = 0..=degree`.
    fn univariate(&self, x: f64, vals: &mut [f64], ders: Option<&mut [f64]>) {
        let p = self.degree;
        vals[0] = 1.0;
        match self.family {
            BasisFamily::Monomial => {
                for e in 1..=p {
                    vals[e] = vals[e - 1] * x;
                }
                if let Some(d) = ders {
                    d[0] = 0.0;
                    for e in 1..=p {
                        d[e] = e as f64 * vals[e - 1];
                    }
                }
            }
            BasisFamily::Chebyshev => {
                if !(-1.0..=1.0).contains(&x) {
                    OUT_OF_RANGE_EVALS.fetch_add(1, Ordering::Relaxed);
                }
                if p >= 1 {
                    vals[1] = x;
                }
                for e in 2..=p {
                    vals[e] = 2.0 * x * vals[e - 1] - vals[e - 2];
                }
                if let Some(d) = ders {
                    d[0] = 0.0;
                    if p >= 1 {
                        d[1] = 1.0;
                    }
                    for e in 2..=p {
                        d[e] = 2.0 * vals[e - 1] + 2.0 * x * d[e - 1] - d[e - 2];
                    }
                }
            }
        }
    }

    /// Values of all `K` basis polynomials at `point`.
    pub fn eval(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(point.len())?;
        let mut out = vec![0.0; self.len()];
        self.eval_into(point, &mut out, None);
        Ok(out)
    }

    /// Values and the `K × d′` Jacobian (row-major) at `point`.
    pub fn eval_with_jacobian(&self, point: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(point.len())?;
        let mut vals = vec![0.0; self.len()];
        let mut jac = vec![0.0; self.len() * self.latent_dim];
        self.eval_into(point, &mut vals, Some(&mut jac));
        Ok((vals, jac))
    }

    /// Unchecked evaluation; `point.len()` must equal `latent_dim`.
    pub(crate) fn eval_into(&self, point: &[f64], out: &mut [f64], jac: Option<&mut [f64]>) {
        let d = self.latent_dim;
        let stride = self.degree + 1;
        let mut table = vec![0.0; d * stride];
        let want_jac = jac.is_some();
        let mut dtable = if want_jac { vec![0.0; d * stride] } else { Vec::new() };
        for (i, &xi) in point.iter().enumerate() {
            let vals = &mut table[i * stride..(i + 1) * stride];
            if want_jac {
                self.univariate(xi, vals, Some(&mut dtable[i * stride..(i + 1) * stride]));
            } else {
                self.univariate(xi, vals, None);
            }
        }
        for (k, alpha) in self.exponents.iter().enumerate() {
            out[k] = alpha
                .iter()
                .enumerate()
                .map(|(i, &e)| table[i * stride + e as usize])
                .product();
        }
        if let Some(jac) = jac {
            for (k, alpha) in self.exponents.iter().enumerate() {
                for m in 0..d {
                    let mut prod = 1.0;
                    for (i, &e) in alpha.iter().enumerate() {
                        let idx = i * stride + e as usize;
                        prod *= if i == m { dtable[idx] } else { table[idx] };
                    }
                    jac[k * d + m] = prod;
                }
            }
        }
    }

    /// Design matrix with row `n` equal to `eval(points[n])`.
    pub fn design_matrix(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(points.ncols())?;
        let mut out = Array2::zeros((points.nrows(), self.len()));
        for (row, mut dst) in points.rows().into_iter().zip(out.rows_mut()) {
            let src = row.to_vec();
            self.eval_into(&src, dst.as_slice_mut().expect("standard layout"), None);
        }
        Ok(out)
    }
}

/// Evaluates the basis at a point. Free-function form of [`PolyBasis::eval`].
pub fn eval_basis(point: &[f64], basis: &PolyBasis) -> Result<Vec<f64>> {
    basis.eval(point)
}

pub fn design_matrix(points: ArrayView2<'_, f64>, basis: &PolyBasis) -> Result<Array2<f64>> {
    basis.design_matrix(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn sizes() {
        assert_eq!(basis_size(1, 3), 4);
        assert_eq!(basis_size(2, 2), 6);
        assert_eq!(basis_size(4, 3), 35);
        assert_eq!(basis_size(3, 0), 1);
        for d in 1..5 {
            for p in 0..5 {
                let b = PolyBasis::new(d, p, BasisFamily::Monomial).unwrap();
                assert_eq!(b.len(), basis_size(d, p));
            }
        }
    }

    #[test]
    fn exponent_table_order() {
        let b = PolyBasis::new(2, 2, BasisFamily::Monomial).unwrap();
        let expected: Vec<Vec<u32>> = vec![
            vec![0, 0],
            vec![1, 0],
            vec![0, 1],
            vec![2, 0],
            vec![1, 1],
            vec![0, 2],
        ];
        assert_eq!(b.exponents(), expected.as_slice());
    }

    #[test]
    fn exponent_table_graded_and_unique() {
        let b = PolyBasis::new(3, 4, BasisFamily::Chebyshev).unwrap();
        let degs: Vec<u32> = b.exponents().iter().map(|a| a.iter().sum()).collect();
        assert!(degs.windows(2).all(|w| w[0] <= w[1]));
        assert!(degs.iter().all(|&s| s <= 4));
        let mut sorted = b.exponents().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), b.len());
        assert!(b.exponents()[0].iter().all(|&e| e == 0));
    }

    #[test]
    fn eval_examples() {
        let b = PolyBasis::new(2, 2, BasisFamily::Monomial).unwrap();
        assert_eq!(b.eval(&[0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let c = PolyBasis::new(1, 2, BasisFamily::Chebyshev).unwrap();
        let v = c.eval(&[0.5]).unwrap();
        assert_eq!(v, vec![1.0, 0.5, -0.5]);

        let m = PolyBasis::new(2, 1, BasisFamily::Monomial).unwrap();
        assert_eq!(m.eval(&[2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let b = PolyBasis::new(2, 2, BasisFamily::Monomial).unwrap();
        assert!(matches!(b.eval(&[1.0]), Err(PpouError::InvalidArgument(_))));
        let pts = Array2::<f64>::zeros((3, 3));
        assert!(b.design_matrix(pts.view()).is_err());
        assert!(PolyBasis::new(0, 2, BasisFamily::Monomial).is_err());
    }

    #[test]
    fn design_matrix_vandermonde_and_empty() {
        let b = PolyBasis::new(1, 1, BasisFamily::Monomial).unwrap();
        let pts = array![[0.5], [-2.0], [3.0]];
        let p = b.design_matrix(pts.view()).unwrap();
        assert_eq!(p, array![[1.0, 0.5], [1.0, -2.0], [1.0, 3.0]]);

        let empty = Array2::<f64>::zeros((0, 1));
        let p = b.design_matrix(empty.view()).unwrap();
        assert_eq!(p.dim(), (0, 2));
    }

    #[test]
    fn design_matrix_matches_rowwise_eval() {
        let pts = array![
            [0.1, -0.7],
            [0.9, 0.3],
            [-0.4, -0.2],
            [0.0, 1.0],
            [-1.0, 0.55]
        ];
        let b = PolyBasis::new(2, 2, BasisFamily::Chebyshev).unwrap();
        let p = b.design_matrix(pts.view()).unwrap();
        for (n, row) in pts.rows().into_iter().enumerate() {
            let direct = b.eval(&row.to_vec()).unwrap();
            assert_eq!(p.row(n).to_vec(), direct);
        }
    }

    #[test]
    fn out_of_range_chebyshev_is_counted() {
        let b = PolyBasis::new(1, 3, BasisFamily::Chebyshev).unwrap();
        let before = out_of_range_count();
        let v = b.eval(&[2.0]).unwrap();
        // T_3(2) = 4*8 - 3*2 = 26
        assert_eq!(v, vec![1.0, 2.0, 7.0, 26.0]);
        assert!(out_of_range_count() > before);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for family in [BasisFamily::Monomial, BasisFamily::Chebyshev] {
            let b = PolyBasis::new(3, 3, family).unwrap();
            let z = [0.3, -0.6, 0.45];
            let (_, jac) = b.eval_with_jacobian(&z).unwrap();
            let h = 1e-6;
            for m in 0..3 {
                let mut zp = z;
                let mut zm = z;
                zp[m] += h;
                zm[m] -= h;
                let vp = b.eval(&zp).unwrap();
                let vm = b.eval(&zm).unwrap();
                for k in 0..b.len() {
                    let fd = (vp[k] - vm[k]) / (2.0 * h);
                    assert!((fd - jac[k * 3 + m]).abs() < 1e-8, "k={k} m={m}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn constant_term_is_one(point in prop::collection::vec(-3.0f64..3.0, 1..5), degree in 0usize..5) {
            for family in [BasisFamily::Monomial, BasisFamily::Chebyshev] {
                let b = PolyBasis::new(point.len(), degree, family).unwrap();
                prop_assert_eq!(b.eval(&point).unwrap()[0], 1.0);
            }
        }

        #[test]
        fn chebyshev_matches_trig_form(x in -1.0f64..=1.0, e in 0usize..12) {
            let b = PolyBasis::new(1, e, BasisFamily::Chebyshev).unwrap();
            let v = b.eval(&[x]).unwrap();
            let expected = (e as f64 * x.acos()).cos();
            prop_assert!((v[e] - expected).abs() <= 1e-12);
        }
    }
}
