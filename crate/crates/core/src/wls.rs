//! Weighted least squares for one cluster's polynomial coefficients.
//!
//! Minimizes `Σ_n w_n (y_n − P[n]·c)² + λ‖c‖²`. Rows are scaled by `√w_n`
//! and the scaled system is solved through a thin SVD, which also gives the
//! effective rank. A rank-deficient system without an explicit ridge gets
//! an automatic ridge of `1e-10 · s_max²`.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;

use crate::error::{PpouError, Result};

/// Relative threshold on the summed weights below which a cluster is empty.
pub const EMPTY_CLUSTER_REL: f64 = 1e-10;

/// Relative size of the automatic ridge, in units of the largest squared
/// singular value.
pub const AUTO_RIDGE_REL: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct WlsProblem<'a> {
    pub design: ArrayView2<'a, f64>,
    pub weights: &'a [f64],
    pub targets: &'a [f64],
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsDiagnostics {
    pub effective_rank: usize,
    /// `‖√W (y − P c)‖₂`.
    pub residual_norm: f64,
    pub used_ridge: bool,
    /// Ridge actually applied (explicit or automatic).
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WlsOutcome {
    Solved {
        coeffs: Vec<f64>,
        diagnostics: WlsDiagnostics,
    },
    /// Total weight below `EMPTY_CLUSTER_REL · N`; the caller keeps its
    /// previous coefficients.
    EmptyCluster { total_weight: f64 },
}

impl WlsOutcome {
    pub fn coeffs(&self) -> Option<&[f64]> {
        match self {
            WlsOutcome::Solved { coeffs, .. } => Some(coeffs),
            WlsOutcome::EmptyCluster { .. } => None,
        }
    }
}

pub fn solve(problem: &WlsProblem<'_>) -> Result<WlsOutcome> {
    let (n, k) = problem.design.dim();
    if n == 0 || k == 0 {
        return Err(PpouError::invalid(format!("wls needs N >= 1 and K >= 1, got {n}x{k}")));
    }
    if problem.weights.len() != n || problem.targets.len() != n {
        return Err(PpouError::invalid(format!(
            "wls: design has {n} rows but {} weights and {} targets",
            problem.weights.len(),
            problem.targets.len()
        )));
    }
    if !(problem.ridge >= 0.0) || !problem.ridge.is_finite() {
        return Err(PpouError::invalid("wls ridge must be finite and nonnegative"));
    }
    if let Some(i) = problem.weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(PpouError::numeric(
            "wls",
            format!("weight {i} is {} (must be finite and >= 0)", problem.weights[i]),
        ));
    }
    if let Some(i) = problem.targets.iter().position(|y| !y.is_finite()) {
        return Err(PpouError::numeric("wls", format!("target {i} is not finite")));
    }
    if problem.design.iter().any(|v| !v.is_finite()) {
        return Err(PpouError::numeric("wls", "design matrix has non-finite entries"));
    }

    let total_weight: f64 = problem.weights.iter().sum();
    if total_weight < EMPTY_CLUSTER_REL * n as f64 {
        return Ok(WlsOutcome::EmptyCluster { total_weight });
    }

    let active: Vec<usize> = (0..n).filter(|&i| problem.weights[i] > 0.0).collect();
    let m = active.len();
    let mut a = DMatrix::<f64>::zeros(m, k);
    let mut b = DVector::<f64>::zeros(m);
    for (r, &i) in active.iter().enumerate() {
        let sw = problem.weights[i].sqrt();
        for c in 0..k {
            a[(r, c)] = sw * problem.design[(i, c)];
        }
        b[r] = sw * problem.targets[i];
    }

    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    let tol = s_max * (m.max(k) as f64) * f64::EPSILON;
    let effective_rank = s.iter().filter(|&&si| si > tol).count();

    let mut ridge = problem.ridge;
    let mut used_ridge = ridge > 0.0;
    if ridge == 0.0 && effective_rank < k {
        ridge = AUTO_RIDGE_REL * s_max * s_max;
        used_ridge = true;
    }

    let utb = u.transpose() * &b;
    let mut scaled = DVector::<f64>::zeros(s.len());
    for i in 0..s.len() {
        let si = s[i];
        scaled[i] = if ridge > 0.0 {
            si / (si * si + ridge) * utb[i]
        } else if si > tol {
            utb[i] / si
        } else {
            0.0
        };
    }
    let c = v_t.transpose() * scaled;
    let resid = &b - &a * &c;
    let coeffs: Vec<f64> = c.iter().cloned().collect();
    if coeffs.iter().any(|v| !v.is_finite()) {
        return Err(PpouError::numeric("wls", "solution has non-finite coefficients"));
    }
    Ok(WlsOutcome::Solved {
        coeffs,
        diagnostics: WlsDiagnostics {
            effective_rank,
            residual_norm: resid.norm(),
            used_ridge,
            ridge,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Forms `PᵀWP c = PᵀW y` and solves it by Gaussian elimination with
    /// partial pivoting.
    pub(crate) fn normal_equation_oracle(p: &Array2<f64>, w: &[f64], y: &[f64]) -> Vec<f64> {
        let (n, k) = p.dim();
        let mut a = vec![vec![0.0; k + 1]; k];
        for r in 0..k {
            for c in 0..k {
                a[r][c] = (0..n).map(|i| w[i] * p[(i, r)] * p[(i, c)]).sum();
            }
            a[r][k] = (0..n).map(|i| w[i] * p[(i, r)] * y[i]).sum();
        }
        for col in 0..k {
            let piv = (col..k)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in col + 1..k {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
        let mut x = vec![0.0; k];
        for r in (0..k).rev() {
            let s: f64 = (r + 1..k).map(|c| a[r][c] * x[c]).sum();
            x[r] = (a[r][k] - s) / a[r][r];
        }
        x
    }

    fn solved(p: &Array2<f64>, w: &[f64], y: &[f64], ridge: f64) -> (Vec<f64>, WlsDiagnostics) {
        match solve(&WlsProblem {
            design: p.view(),
            weights: w,
            targets: y,
            ridge,
        })
        .unwrap()
        {
            WlsOutcome::Solved { coeffs, diagnostics } => (coeffs, diagnostics),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn random_problem(seed: u64, n: usize, k: usize) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0));
        let w = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
        let y = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        (p, w, y)
    }

    #[test]
    fn constant_basis_gives_weighted_mean() {
        let p = Array2::from_elem((4, 1), 1.0);
        let w = [1.0, 2.0, 3.0, 4.0];
        let y = [4.0, 3.0, 2.0, 1.0];
        let (c, _) = solved(&p, &w, &y, 0.0);
        assert!((c[0] - 20.0 / 10.0).abs() < 1e-14);
    }

    #[test]
    fn square_vandermonde_interpolates() {
        let xs: [f64; 4] = [-1.0, -0.3, 0.4, 1.0];
        let p = Array2::from_shape_fn((4, 4), |(i, j)| xs[i].powi(j as i32));
        let y = [2.0, -1.0, 0.5, 3.0];
        let (c, d) = solved(&p, &[1.0; 4], &y, 0.0);
        assert!(d.residual_norm < 1e-10);
        assert_eq!(d.effective_rank, 4);
        for i in 0..4 {
            let fit: f64 = (0..4).map(|j| c[j] * p[(i, j)]).sum();
            assert!((fit - y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_normal_equation_oracle() {
        let (p, w, y) = random_problem(3, 50, 6);
        let (c, d) = solved(&p, &w, &y, 0.0);
        let oracle = normal_equation_oracle(&p, &w, &y);
        assert!(!d.used_ridge);
        for (a, b) in c.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{c:?} vs {oracle:?}");
        }
    }

    #[test]
    fn empty_cluster_is_signalled() {
        let p = Array2::from_elem((3, 2), 1.0);
        let out = solve(&WlsProblem {
            design: p.view(),
            weights: &[0.0, 1e-12, 0.0],
            targets: &[1.0, 2.0, 3.0],
            ridge: 0.0,
        })
        .unwrap();
        assert!(matches!(out, WlsOutcome::EmptyCluster { .. }));
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let p = array![[1.0, 0.0], [1.0, 1.0]];
        let r = solve(&WlsProblem {
            design: p.view(),
            weights: &[1.0, 1.0],
            targets: &[f64::NAN, 1.0],
            ridge: 0.0,
        });
        assert!(matches!(r, Err(PpouError::Numeric { .. })));
        let r = solve(&WlsProblem {
            design: p.view(),
            weights: &[1.0, -1.0],
            targets: &[0.0, 1.0],
            ridge: 0.0,
        });
        assert!(r.is_err());
    }

    #[test]
    fn rank_deficient_gets_auto_ridge() {
        // Two identical columns.
        let p = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let (c, d) = solved(&p, &[1.0; 3], &[1.0, 2.0, 3.0], 0.0);
        assert!(d.used_ridge);
        assert_eq!(d.effective_rank, 1);
        assert!((c[0] - 0.5).abs() < 1e-6 && (c[1] - 0.5).abs() < 1e-6, "{c:?}");
    }

    #[test]
    fn residual_is_weighted_orthogonal_to_design() {
        let (p, w, y) = random_problem(17, 80, 7);
        let (c, _) = solved(&p, &w, &y, 0.0);
        let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let yn = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for col in 0..7 {
            let g: f64 = (0..80)
                .map(|i| {
                    let fit: f64 = (0..7).map(|j| p[(i, j)] * c[j]).sum();
                    p[(i, col)] * w[i] * (y[i] - fit)
                })
                .sum();
            assert!(g.abs() <= 1e-8 * pn * yn);
        }
    }

    proptest! {
        #[test]
        fn weight_scaling_invariance(seed in 0u64..1000, scale in 1e-3f64..1e3) {
            let (p, w, y) = random_problem(seed, 30, 4);
            let (c1, _) = solved(&p, &w, &y, 0.0);
            let ws: Vec<f64> = w.iter().map(|v| v * scale).collect();
            let (c2, _) = solved(&p, &ws, &y, 0.0);
            for (a, b) in c1.iter().zip(&c2) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn zero_weight_rows_have_no_influence(seed in 0u64..1000) {
            let (p, mut w, y) = random_problem(seed, 25, 4);
            for i in (0..25).step_by(3) {
                w[i] = 0.0;
            }
            let (c_full, _) = solved(&p, &w, &y, 0.0);
            let keep: Vec<usize> = (0..25).filter(|i| w[*i] > 0.0).collect();
            let p2 = Array2::from_shape_fn((keep.len(), 4), |(r, c)| p[(keep[r], c)]);
            let w2: Vec<f64> = keep.iter().map(|&i| w[i]).collect();
            let y2: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
            let (c_del, _) = solved(&p2, &w2, &y2, 0.0);
            for (a, b) in c_full.iter().zip(&c_del) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn ridge_never_increases_norm(seed in 0u64..1000, ridge in 1e-6f64..10.0) {
            let (p, w, y) = random_problem(seed, 20, 5);
            let (c0, _) = solved(&p, &w, &y, 0.0);
            let (cr, d) = solved(&p, &w, &y, ridge);
            prop_assert!(d.used_ridge);
            let n0 = c0.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nr = cr.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(nr <= n0 * (1.0 + 1e-12));
        }
    }
}
