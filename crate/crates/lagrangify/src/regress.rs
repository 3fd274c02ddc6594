//! Ridge least squares and sequential threshold sparse regression.
//!
//! The solver alternates least squares refits with hard thresholding of
//! small coefficients until the support stabilizes. Refits always run on
//! unit-RMS rescaled columns, which conditions the spectrum; the threshold
//! reads original-unit coefficients by default, or the rescaled ones with
//! `column_scaling`, which makes one threshold meaningful across bases of
//! very different magnitudes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tuning knobs of the sequential threshold solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StlsqOptions {
    /// Hard threshold: coefficients with magnitude below this are dropped.
    /// Reads original-unit coefficients, or the unit-RMS rescaled ones when
    /// `column_scaling` is on.
    pub lambda: f64,
    /// Tikhonov regularization added to the normal equations.
    pub ridge: f64,
    /// Upper bound on threshold-refit rounds.
    pub max_iterations: usize,
    /// Apply the threshold to the unit-RMS rescaled coefficients instead
    /// of the original-unit ones. Off by default; useful when the
    /// dictionary mixes bases of wildly different magnitudes.
    pub column_scaling: bool,
    /// Relative singular value cutoff for the refit solves. When positive,
    /// each least squares step uses a truncated pseudo-inverse that drops
    /// directions with singular values below `svd_cutoff * s_max`, so
    /// near-dependent basis families cannot amplify target noise into
    /// large canceling coefficients. Zero keeps the plain ridge solve.
    #[serde(default)]
    pub svd_cutoff: f64,
}

impl Default for StlsqOptions {
    fn default() -> Self {
        StlsqOptions {
            lambda: 0.1,
            ridge: 1e-10,
            max_iterations: 20,
            column_scaling: false,
            svd_cutoff: 0.0,
        }
    }
}

impl StlsqOptions {
    pub fn with_lambda(lambda: f64) -> Self {
        StlsqOptions { lambda, ..StlsqOptions::default() }
    }
}

/// Regression failure.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressError {
    #[error("matrix has {rows_a} rows but the target has {rows_y}")]
    ShapeMismatch { rows_a: usize, rows_y: usize },
    #[error("system has no usable columns (all identically zero)")]
    AllColumnsDegenerate,
    #[error("threshold {lambda} eliminated every candidate term")]
    EmptySupport { lambda: f64 },
    #[error("support did not stabilize within {max_iterations} iterations")]
    NoConvergence { max_iterations: usize, last_support: Vec<usize> },
    #[error("linear solve failed despite regularization")]
    NumericalFailure,
}

/// Dense least squares fit.
#[derive(Debug, Clone)]
pub struct LsFit {
    pub theta: DVector<f64>,
    pub residual_norm: f64,
    /// Set when `ridge == 0` and the system is numerically rank deficient.
    pub rank_deficient: bool,
}

/// Solves `min |A theta - y|^2 + ridge |theta|^2`.
///
/// With positive ridge the normal equations are solved by Cholesky, falling
/// back to a filtered SVD if the factorization fails. With zero ridge the
/// minimum-norm solution comes from a truncated SVD and rank deficiency is
/// reported through the fit.
pub fn least_squares(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    ridge: f64,
) -> Result<LsFit, RegressError> {
    if a.nrows() != y.nrows() {
        return Err(RegressError::ShapeMismatch { rows_a: a.nrows(), rows_y: y.nrows() });
    }
    if a.ncols() == 0 {
        return Err(RegressError::AllColumnsDegenerate);
    }
    let theta;
    let mut rank_deficient = false;
    if ridge > 0.0 {
        let mut gram = a.tr_mul(a);
        for i in 0..gram.nrows() {
            gram[(i, i)] += ridge;
        }
        let rhs = a.tr_mul(y);
        theta = match nalgebra::Cholesky::new(gram) {
            Some(chol) => chol.solve(&rhs),
            None => ridge_solve_svd(a, y, ridge)?,
        };
    } else {
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        let eps = smax * a.nrows().max(a.ncols()) as f64 * f64::EPSILON;
        let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
        rank_deficient = rank < a.ncols();
        theta = svd.solve(y, eps).map_err(|_| RegressError::NumericalFailure)?;
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(RegressError::NumericalFailure);
    }
    let residual_norm = (a * &theta - y).norm();
    Ok(LsFit { theta, residual_norm, rank_deficient })
}

/// Solves `min |A theta - y|^2` by a truncated pseudo-inverse.
///
/// Directions with singular values below `cutoff * s_max` are removed from
/// the solve entirely, returning the minimum-norm solution on the retained
/// subspace. Unlike a ridge penalty this leaves well-conditioned directions
/// unbiased while contributing nothing along near-dependent ones.
pub fn truncated_least_squares(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    cutoff: f64,
) -> Result<LsFit, RegressError> {
    if a.nrows() != y.nrows() {
        return Err(RegressError::ShapeMismatch { rows_a: a.nrows(), rows_y: y.nrows() });
    }
    if a.ncols() == 0 {
        return Err(RegressError::AllColumnsDegenerate);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let eps = smax * cutoff.max(a.nrows().max(a.ncols()) as f64 * f64::EPSILON);
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let theta = svd.solve(y, eps).map_err(|_| RegressError::NumericalFailure)?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(RegressError::NumericalFailure);
    }
    let residual_norm = (a * &theta - y).norm();
    Ok(LsFit { theta, residual_norm, rank_deficient: rank < a.ncols() })
}

/// Tikhonov solve through the SVD of `A`: filter factors `s / (s^2 + ridge)`.
fn ridge_solve_svd(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    ridge: f64,
) -> Result<DVector<f64>, RegressError> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or(RegressError::NumericalFailure)?;
    let vt = svd.v_t.as_ref().ok_or(RegressError::NumericalFailure)?;
    let uty = u.tr_mul(y);
    let mut coeffs = DVector::zeros(svd.singular_values.len());
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        coeffs[i] = uty[i] * s / (s * s + ridge);
    }
    Ok(vt.tr_mul(&coeffs))
}

/// A sparse coefficient vector over the columns of the regression matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSolution {
    /// One coefficient per input column; zero off the support.
    pub theta: Vec<f64>,
    /// Indices of the surviving columns, ascending.
    pub support: Vec<usize>,
    /// Number of least squares solves performed.
    pub iterations: usize,
    /// Root-mean-square of `A theta - y` over the full system.
    pub residual_rms: f64,
    /// `|A theta - y| / |y|`.
    pub relative_residual: f64,
}

/// Sequential threshold least squares.
pub fn stlsq(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    opts: &StlsqOptions,
) -> Result<SparseSolution, RegressError> {
    stlsq_traced(a, y, opts).map(|(sol, _)| sol)
}

/// Like [`stlsq`], also returning the support after each refit round.
pub fn stlsq_traced(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    opts: &StlsqOptions,
) -> Result<(SparseSolution, Vec<Vec<usize>>), RegressError> {
    if a.nrows() != y.nrows() {
        return Err(RegressError::ShapeMismatch { rows_a: a.nrows(), rows_y: y.nrows() });
    }
    let n = a.nrows() as f64;

    // Identically zero columns can never enter the model; drop them, then
    // rescale the survivors to unit RMS. The solve always runs in the
    // rescaled system (it preconditions the spectrum, which the truncated
    // pseudo-inverse needs to be meaningful); `column_scaling` only decides
    // whether the threshold reads rescaled or original coefficients.
    let rms: Vec<f64> = (0..a.ncols())
        .map(|j| (a.column(j).norm_squared() / n).sqrt())
        .collect();
    let candidates: Vec<usize> = (0..a.ncols()).filter(|&j| rms[j] > 0.0).collect();
    if candidates.is_empty() {
        return Err(RegressError::AllColumnsDegenerate);
    }
    let scale: Vec<f64> = candidates.iter().map(|&j| rms[j]).collect();
    let mut asc = a.select_columns(&candidates);
    for (c, s) in scale.iter().enumerate() {
        let mut col = asc.column_mut(c);
        col /= *s;
    }

    let mut support: Vec<usize> = (0..candidates.len()).collect();
    let mut trace: Vec<Vec<usize>> = vec![support.iter().map(|&c| candidates[c]).collect()];

    for iter in 1..=opts.max_iterations {
        let sub = asc.select_columns(&support);
        let fit = if opts.svd_cutoff > 0.0 {
            truncated_least_squares(&sub, y, opts.svd_cutoff)?
        } else {
            least_squares(&sub, y, opts.ridge)?
        };
        let kept: Vec<usize> = support
            .iter()
            .enumerate()
            .filter(|&(i, &c)| {
                let size = if opts.column_scaling {
                    fit.theta[i].abs()
                } else {
                    fit.theta[i].abs() / scale[c]
                };
                size >= opts.lambda
            })
            .map(|(_, &c)| c)
            .collect();
        if kept.is_empty() {
            return Err(RegressError::EmptySupport { lambda: opts.lambda });
        }
        if kept.len() == support.len() {
            let mut theta = vec![0.0; a.ncols()];
            for (i, &c) in support.iter().enumerate() {
                theta[candidates[c]] = fit.theta[i] / scale[c];
            }
            let ynorm = y.norm();
            let relative_residual = if ynorm > 0.0 {
                fit.residual_norm / ynorm
            } else if fit.residual_norm == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            let sol = SparseSolution {
                theta,
                support: support.iter().map(|&c| candidates[c]).collect(),
                iterations: iter,
                residual_rms: fit.residual_norm / n.sqrt(),
                relative_residual,
            };
            return Ok((sol, trace));
        }
        support = kept;
        trace.push(support.iter().map(|&c| candidates[c]).collect());
    }
    Err(RegressError::NoConvergence {
        max_iterations: opts.max_iterations,
        last_support: support.iter().map(|&c| candidates[c]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn least_squares_matches_normal_equation_oracle() {
        let mut rng = StdRng::seed_from_u64(42);
        let a = random_matrix(&mut rng, 30, 5);
        let y = DVector::from_fn(30, |_, _| rng.gen_range(-1.0..1.0));
        let ridge = 1e-10;
        let fit = least_squares(&a, &y, ridge).unwrap();
        // Independent oracle: explicit inverse of the regularized Gram matrix.
        let mut gram = a.transpose() * &a;
        for i in 0..5 {
            gram[(i, i)] += ridge;
        }
        let oracle = gram.try_inverse().unwrap() * a.transpose() * &y;
        assert!((fit.theta - oracle).norm() < 1e-8);
    }

    #[test]
    fn least_squares_recovers_exact_coefficients() {
        let mut rng = StdRng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 50, 4);
        let truth = DVector::from_vec(vec![3.0, -2.0, 0.5, 10.0]);
        let y = &a * &truth;
        let fit = least_squares(&a, &y, 0.0).unwrap();
        assert!(!fit.rank_deficient);
        assert!((fit.theta - truth).norm() < 1e-10);
        assert!(fit.residual_norm < 1e-10);
    }

    #[test]
    fn rank_deficiency_is_flagged_without_ridge() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut a = random_matrix(&mut rng, 20, 3);
        let dup = a.column(0).clone_owned();
        a.set_column(2, &dup); // third column duplicates the first
        let y = DVector::from_fn(20, |_, _| rng.gen_range(-1.0..1.0));
        let fit = least_squares(&a, &y, 0.0).unwrap();
        assert!(fit.rank_deficient);
        let fit_ridge = least_squares(&a, &y, 1e-10).unwrap();
        assert!(fit_ridge.theta.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn truncated_solve_damps_near_dependent_columns() {
        // Columns 0 and 1 differ by 1e-5; the target carries a component the
        // model cannot explain. The ridge solve amplifies it along the
        // near-null direction into huge canceling coefficients, while the
        // truncated solve drops that direction and stays modest.
        let n = 400;
        let a = DMatrix::from_fn(n, 3, |i, j| {
            let t = i as f64 / n as f64;
            match j {
                0 => (2.0 * t).sin(),
                1 => (2.0 * t).sin() + 1e-5 * (30.0 * t).cos(),
                _ => (2.0 * t).cos(),
            }
        });
        let y = DVector::from_fn(n, |i, _| {
            let t = i as f64 / n as f64;
            2.0 * (2.0 * t).cos() + 1e-2 * (31.0 * t).sin()
        });
        let ridge = least_squares(&a, &y, 1e-10).unwrap();
        assert!(ridge.theta[0].abs() > 1e2);
        let truncated = truncated_least_squares(&a, &y, 1e-3).unwrap();
        assert!(truncated.rank_deficient);
        assert!(truncated.theta[0].abs() < 1.0);
        assert!((truncated.theta[2] - 2.0).abs() < 0.1);
        // Residuals stay comparable: the dropped direction buys little fit.
        assert!(truncated.residual_norm < 2.0 * ridge.residual_norm + 1e-6);
    }

    #[test]
    fn truncated_solve_matches_plain_least_squares_when_well_conditioned() {
        let mut rng = StdRng::seed_from_u64(19);
        let a = random_matrix(&mut rng, 60, 5);
        let y = DVector::from_fn(60, |_, _| rng.gen_range(-1.0..1.0));
        let plain = least_squares(&a, &y, 0.0).unwrap();
        let truncated = truncated_least_squares(&a, &y, 1e-8).unwrap();
        assert!(!truncated.rank_deficient);
        assert!((plain.theta - truncated.theta).norm() < 1e-8);
    }

    #[test]
    fn stlsq_recovers_planted_sparse_model() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 200, 8);
        let mut truth = DVector::zeros(8);
        truth[1] = 3.0;
        truth[5] = -2.0;
        let y = &a * &truth;
        let sol = stlsq(&a, &y, &StlsqOptions::with_lambda(0.5)).unwrap();
        assert_eq!(sol.support, vec![1, 5]);
        assert!((sol.theta[1] - 3.0).abs() < 1e-8);
        assert!((sol.theta[5] + 2.0).abs() < 1e-8);
        assert!(sol.relative_residual < 1e-10);
    }

    #[test]
    fn thresholding_removes_small_contributions() {
        let mut rng = StdRng::seed_from_u64(13);
        let a = random_matrix(&mut rng, 300, 6);
        let mut truth = DVector::zeros(6);
        truth[0] = 5.0;
        truth[3] = 0.01; // well below the threshold
        let y = &a * &truth;
        let sol = stlsq(&a, &y, &StlsqOptions::with_lambda(0.5)).unwrap();
        assert_eq!(sol.support, vec![0]);
        assert!((sol.theta[0] - 5.0).abs() < 0.05);
    }

    #[test]
    fn empty_support_is_an_error() {
        let mut rng = StdRng::seed_from_u64(17);
        let a = random_matrix(&mut rng, 40, 4);
        let y = &a * &DVector::from_vec(vec![0.1, 0.0, 0.0, 0.0]);
        let err = stlsq(&a, &y, &StlsqOptions::with_lambda(1e6)).unwrap_err();
        assert!(matches!(err, RegressError::EmptySupport { .. }));
    }

    #[test]
    fn zero_columns_are_pruned_not_fatal() {
        let mut rng = StdRng::seed_from_u64(19);
        let mut a = random_matrix(&mut rng, 60, 5);
        a.set_column(2, &DVector::zeros(60));
        let mut truth = DVector::zeros(5);
        truth[4] = 2.0;
        let y = &a * &truth;
        let sol = stlsq(&a, &y, &StlsqOptions::with_lambda(0.5)).unwrap();
        assert_eq!(sol.support, vec![4]);
        assert_eq!(sol.theta[2], 0.0);
        let zeros = DMatrix::zeros(10, 3);
        let yz = DVector::zeros(10);
        assert_eq!(
            stlsq(&zeros, &yz, &StlsqOptions::default()).unwrap_err(),
            RegressError::AllColumnsDegenerate
        );
    }

    #[test]
    fn column_scaling_equalizes_disparate_magnitudes() {
        // One relevant column is 1e6 times smaller than a distractor;
        // without rescaling a single threshold cannot treat both fairly.
        let mut rng = StdRng::seed_from_u64(23);
        let raw = random_matrix(&mut rng, 400, 3);
        let mut a = raw.clone();
        for r in 0..400 {
            a[(r, 1)] *= 1e-6;
        }
        let mut truth = DVector::zeros(3);
        truth[1] = 2e6; // unit-scale contribution through a tiny column
        let y = &a * &truth;
        let opts = StlsqOptions { column_scaling: true, ..StlsqOptions::with_lambda(0.5) };
        let sol = stlsq(&a, &y, &opts).unwrap();
        assert_eq!(sol.support, vec![1]);
        assert!((sol.theta[1] - 2e6).abs() / 2e6 < 1e-8);
    }

    #[test]
    fn restricting_to_the_support_is_idempotent() {
        let mut rng = StdRng::seed_from_u64(31);
        let a = random_matrix(&mut rng, 150, 7);
        let mut truth = DVector::zeros(7);
        truth[0] = 2.5;
        truth[4] = -1.5;
        truth[6] = 0.9;
        let y = &a * &truth;
        let opts = StlsqOptions::with_lambda(0.4);
        let sol = stlsq(&a, &y, &opts).unwrap();
        let sub = a.select_columns(&sol.support);
        let again = stlsq(&sub, &y, &opts).unwrap();
        assert_eq!(again.support, (0..sol.support.len()).collect::<Vec<_>>());
        for (i, &c) in sol.support.iter().enumerate() {
            assert!((again.theta[i] - sol.theta[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_inputs_give_bit_identical_solutions() {
        let mut rng = StdRng::seed_from_u64(37);
        let a = random_matrix(&mut rng, 80, 6);
        let y = DVector::from_fn(80, |_, _| rng.gen_range(-2.0..2.0));
        let opts = StlsqOptions::with_lambda(0.2);
        let s1 = stlsq(&a, &y, &opts).unwrap();
        let s2 = stlsq(&a, &y, &opts).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.theta.iter().zip(&s2.theta).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    /// Brute-force reference: among all non-empty supports whose restricted
    /// least squares fit keeps every coefficient at or above `lambda` in
    /// magnitude, return the one with the smallest residual.
    fn best_subset(a: &DMatrix<f64>, y: &DVector<f64>, opts: &StlsqOptions) -> Option<Vec<usize>> {
        let k = a.ncols();
        assert!(k <= 12, "exhaustive search is exponential in the column count");
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 1u32..(1 << k) {
            let cols: Vec<usize> = (0..k).filter(|j| mask >> j & 1 == 1).collect();
            let sub = a.select_columns(&cols);
            let Ok(fit) = least_squares(&sub, y, opts.ridge) else { continue };
            if fit.theta.iter().any(|t| t.abs() < opts.lambda) {
                continue;
            }
            let better = match &best {
                None => true,
                Some((r, s)) => {
                    fit.residual_norm < r - 1e-9
                        || (fit.residual_norm < r + 1e-9 && cols.len() < s.len())
                }
            };
            if better {
                best = Some((fit.residual_norm, cols));
            }
        }
        best.map(|(_, s)| s)
    }

    #[test]
    fn stlsq_matches_exhaustive_best_subset_on_small_instances() {
        for seed in 0..20u64 {
            let mut rng = StdRng::seed_from_u64(1000 + seed);
            let rows = 80;
            let cols = rng.gen_range(4..=9);
            let a = random_matrix(&mut rng, rows, cols);
            let mut truth = DVector::zeros(cols);
            let planted = rng.gen_range(1..=3.min(cols));
            for _ in 0..planted {
                let j = rng.gen_range(0..cols);
                truth[j] = rng.gen_range(1.0..4.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            }
            let y = &a * &truth;
            let opts = StlsqOptions::with_lambda(0.5);
            let sol = stlsq(&a, &y, &opts).unwrap();
            let oracle = best_subset(&a, &y, &opts)
                .expect("a feasible support exists because the planted one is");
            assert_eq!(sol.support, oracle, "seed {seed}");
        }
    }

    #[test]
    fn trace_reports_shrinking_supports() {
        let mut rng = StdRng::seed_from_u64(29);
        let a = random_matrix(&mut rng, 120, 6);
        let mut truth = DVector::zeros(6);
        truth[2] = 4.0;
        let y = &a * &truth;
        let (sol, trace) = stlsq_traced(&a, &y, &StlsqOptions::with_lambda(0.5)).unwrap();
        assert_eq!(trace[0].len(), 6);
        assert_eq!(*trace.last().unwrap(), sol.support);
        for pair in trace.windows(2) {
            assert!(pair[1].iter().all(|c| pair[0].contains(c)));
            assert!(pair[1].len() < pair[0].len());
        }
        assert_eq!(sol.iterations, trace.len());
    }

    proptest! {
        #[test]
        fn support_never_grows(seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed);
            let rows = rng.gen_range(20..60);
            let cols = rng.gen_range(2..8);
            let a = random_matrix(&mut rng, rows, cols);
            let mut truth = DVector::zeros(cols);
            let k = rng.gen_range(1..=cols);
            for _ in 0..k {
                let j = rng.gen_range(0..cols);
                truth[j] = rng.gen_range(-5.0..5.0);
            }
            let mut y = &a * &truth;
            for v in y.iter_mut() {
                *v += rng.gen_range(-1e-4..1e-4);
            }
            let opts = StlsqOptions::with_lambda(rng.gen_range(0.01..2.0));
            if let Ok((sol, trace)) = stlsq_traced(&a, &y, &opts) {
                prop_assert!(sol.iterations <= opts.max_iterations);
                for pair in trace.windows(2) {
                    prop_assert!(pair[1].iter().all(|c| pair[0].contains(c)));
                }
                for (j, &t) in sol.theta.iter().enumerate() {
                    prop_assert_eq!(sol.support.contains(&j), t != 0.0);
                }
            }
        }

        #[test]
        fn target_scaling_rescales_theta(seed in 0u64..200, log_c in -3.0f64..3.0) {
            // Scale covariance: lambda lives in target units, so scaling y
            // by c together with lambda by c scales theta by c and leaves
            // the support alone.
            let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
            let a = random_matrix(&mut rng, 60, 6);
            let mut truth = DVector::zeros(6);
            truth[0] = 1.5;
            truth[3] = -2.5;
            let mut y = &a * &truth;
            for v in y.iter_mut() {
                *v += rng.gen_range(-1e-6..1e-6);
            }
            let c = 10f64.powf(log_c);
            let yc = &y * c;
            let base = StlsqOptions::with_lambda(0.5);
            let scaled = StlsqOptions { lambda: base.lambda * c, ..base };
            match (stlsq(&a, &y, &base), stlsq(&a, &yc, &scaled)) {
                (Ok(s1), Ok(s2)) => {
                    prop_assert_eq!(&s1.support, &s2.support);
                    for j in 0..6 {
                        prop_assert!(
                            (s1.theta[j] * c - s2.theta[j]).abs()
                                <= 1e-6 * (s1.theta[j] * c).abs().max(1e-9),
                            "col {}: {} vs {}", j, s1.theta[j] * c, s2.theta[j]
                        );
                    }
                }
                (Err(e1), Err(e2)) => prop_assert_eq!(e1, e2),
                (a, b) => prop_assert!(false, "diverged: {:?} vs {:?}", a, b),
            }
        }

        #[test]
        fn column_units_do_not_change_the_selected_model(seed in 0u64..200) {
            // With column scaling on, multiplying column j by d_j (a change
            // of units for that basis) must leave the support unchanged and
            // divide the coefficient by d_j.
            let mut rng = StdRng::seed_from_u64(seed ^ 0xabcd);
            let a = random_matrix(&mut rng, 50, 5);
            let mut truth = DVector::zeros(5);
            truth[1] = 2.0;
            truth[4] = -3.0;
            let y = &a * &truth;
            let d: Vec<f64> = (0..5).map(|_| 10f64.powf(rng.gen_range(-3.0..3.0))).collect();
            let mut ad = a.clone();
            for (j, dj) in d.iter().enumerate() {
                let mut col = ad.column_mut(j);
                col *= *dj;
            }
            let opts = StlsqOptions { column_scaling: true, ..StlsqOptions::with_lambda(0.5) };
            match (stlsq(&a, &y, &opts), stlsq(&ad, &y, &opts)) {
                (Ok(s1), Ok(s2)) => {
                    prop_assert_eq!(&s1.support, &s2.support);
                    for j in 0..5 {
                        let back = s2.theta[j] * d[j];
                        prop_assert!(
                            (s1.theta[j] - back).abs() <= 1e-6 * s1.theta[j].abs().max(1e-9),
                            "col {}: {} vs {}", j, s1.theta[j], back
                        );
                    }
                }
                (Err(e1), Err(e2)) => prop_assert_eq!(e1, e2),
                (a, b) => prop_assert!(false, "diverged: {:?} vs {:?}", a, b),
            }
        }
    }
}
