//! Lagrangian discovery from a single trajectory.
//!
//! For each coordinate the kinetic basis `v_i^2` maps through the
//! Euler-Lagrange operator to `2 a_i`, which becomes the regression target;
//! the sparse combination of the remaining transformed bases that matches it
//! yields a per-coordinate Lagrangian. Per-coordinate results are finally
//! assembled into one mass-weighted total with coupling terms reconciled.

use crate::dictionary::{euler_lagrange_matrix, DictError, Dictionary, DiffOrder};
use crate::expr::{EvalContext, EvalError, Expr};
use crate::regress::{stlsq, RegressError, SparseSolution, StlsqOptions};
use crate::sim::Trajectory;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Knobs for a discovery run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscoverOptions {
    pub stlsq: StlsqOptions,
    pub diff_order: DiffOrder,
    /// Largest tolerated Euler-Lagrange residual of a reconstruction,
    /// relative to the RMS of the regression target. Exceeding it means the
    /// dictionary cannot express the dynamics.
    pub residual_tolerance: f64,
}

impl Default for DiscoverOptions {
    fn default() -> Self {
        DiscoverOptions {
            stlsq: StlsqOptions::default(),
            diff_order: DiffOrder::Two,
            residual_tolerance: 1e-2,
        }
    }
}

/// Discovery failure.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiscoverError {
    #[error(transparent)]
    Dictionary(#[from] DictError),
    #[error("regression failed for coordinate {coord}: {source}")]
    Regression { coord: usize, source: RegressError },
    #[error(
        "coordinate {coord}: Euler-Lagrange residual {residual:.3e} exceeds \
         tolerance {tolerance:.3e}; the dictionary cannot express these dynamics"
    )]
    ResidualTooLarge { coord: usize, residual: f64, tolerance: f64 },
    #[error("expected {expected} mass weights, got {got}")]
    WrongWeightCount { expected: usize, got: usize },
    #[error("mass weights must be positive and finite")]
    BadWeights,
    #[error(
        "coupling term {label} implies inconsistent coefficients across \
         coordinates: {implied:?} (spread {spread:.1}%)"
    )]
    InconsistentCoupling { label: String, implied: Vec<f64>, spread: f64 },
}

/// Sparse model and reconstructed Lagrangian of one coordinate.
#[derive(Debug, Clone)]
pub struct DofLagrangian {
    pub coord: usize,
    /// Coefficients indexed by dictionary position; the kinetic basis is
    /// excluded from the candidate set and always reads zero here.
    pub solution: SparseSolution,
    /// `0.5 * (v_i^2 - sum theta_k l_k)`, simplified.
    pub expr: Expr,
    /// Euler-Lagrange residual of `expr` relative to the target RMS.
    pub el_residual: f64,
}

impl DofLagrangian {
    /// Labels of the surviving bases.
    pub fn support_labels<'d>(&self, dict: &'d Dictionary) -> Vec<&'d str> {
        self.solution.support.iter().map(|&k| dict.labels[k].as_str()).collect()
    }
}

/// A potential basis selected by more than one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedTerm {
    pub label: String,
    /// Weighted coefficient implied by each coordinate that selected the
    /// basis, as `(coord, w_i * theta_i / 2)` pairs.
    pub implied: Vec<(usize, f64)>,
    /// Mean of the implied values; the coefficient used in the total.
    pub reconciled: f64,
    /// Largest relative deviation from the mean, in percent.
    pub spread_percent: f64,
}

/// Assembled total Lagrangian plus the coupling reconciliation record.
#[derive(Debug, Clone)]
pub struct SystemLagrangian {
    pub expr: Expr,
    pub shared_terms: Vec<SharedTerm>,
}

/// Per-coordinate models plus the dictionary they index into.
#[derive(Debug, Clone)]
pub struct DiscoveredLagrangian {
    pub dict: Dictionary,
    pub dofs: Vec<DofLagrangian>,
}

impl DiscoveredLagrangian {
    /// Total Lagrangian with every coordinate weighted equally.
    pub fn total_equal_mass(&self) -> Result<SystemLagrangian, DiscoverError> {
        self.total(&vec![1.0; self.dofs.len()])
    }

    /// Mass-weighted total Lagrangian.
    ///
    /// Coordinate `i`'s model is scaled by `weights[i]` (its mass, if the
    /// data was recorded in physical units). A coupling basis appearing in
    /// several coordinate models must imply the same weighted coefficient
    /// from each; the implied values are averaged into a single term, and a
    /// spread above 5% is reported as [`DiscoverError::InconsistentCoupling`].
    pub fn total(&self, weights: &[f64]) -> Result<SystemLagrangian, DiscoverError> {
        assemble(&self.dict, &self.dofs, weights)
    }
}

/// Discovers a sparse Lagrangian model for every coordinate.
pub fn discover_lagrangian(
    tr: &Trajectory,
    dict: &Dictionary,
    opts: &DiscoverOptions,
) -> Result<DiscoveredLagrangian, DiscoverError> {
    let coords: Vec<usize> = (0..dict.spec.coords).collect();
    discover_coords(tr, dict, &coords, opts)
}

/// Discovers sparse models for a chosen subset of coordinates.
///
/// Coordinates are independent regressions and run on the rayon pool. The
/// result keeps the order of `coords`, and on failure the error of the
/// first failing coordinate in that order is returned, so the outcome does
/// not depend on scheduling.
pub fn discover_coords(
    tr: &Trajectory,
    dict: &Dictionary,
    coords: &[usize],
    opts: &DiscoverOptions,
) -> Result<DiscoveredLagrangian, DiscoverError> {
    let results: Vec<Result<DofLagrangian, DiscoverError>> =
        coords.par_iter().map(|&coord| discover_coord(tr, dict, coord, opts)).collect();
    let mut dofs = Vec::with_capacity(coords.len());
    for result in results {
        dofs.push(result?);
    }
    Ok(DiscoveredLagrangian { dict: dict.clone(), dofs })
}

/// Discovers the sparse model of a single coordinate.
pub fn discover_coord(
    tr: &Trajectory,
    dict: &Dictionary,
    coord: usize,
    opts: &DiscoverOptions,
) -> Result<DofLagrangian, DiscoverError> {
    let el = euler_lagrange_matrix(dict, tr, coord, opts.diff_order)?;
    let kin = dict.kinetic_index(coord);
    let y = el.a.column(kin).clone_owned();
    // The kinetic column is the target, not a candidate: zero it so the
    // solver prunes it with the other structurally empty columns.
    let mut a = el.a;
    a.column_mut(kin).fill(0.0);
    let solution =
        stlsq(&a, &y, &opts.stlsq).map_err(|source| DiscoverError::Regression { coord, source })?;
    // EL[expr] = (y - A theta) / 2, so the reconstruction's residual in
    // target-RMS units is half the regression's relative residual.
    let el_residual = 0.5 * solution.relative_residual;
    if !(el_residual <= opts.residual_tolerance) {
        return Err(DiscoverError::ResidualTooLarge {
            coord,
            residual: el_residual,
            tolerance: opts.residual_tolerance,
        });
    }
    let expr = reconstruct_lagrangian(dict, coord, &solution);
    Ok(DofLagrangian { coord, solution, expr, el_residual })
}

/// Builds `0.5 * (v_i^2 - sum theta_k l_k)` from a sparse solution.
///
/// Because the regression enforced `EL_i[v_i^2] = sum theta_k EL_i[l_k]`,
/// this expression satisfies its own Euler-Lagrange equation on the data up
/// to half the regression residual.
pub fn reconstruct_lagrangian(
    dict: &Dictionary,
    coord: usize,
    solution: &SparseSolution,
) -> Expr {
    let mut terms = vec![Expr::scaled(0.5, Expr::power(Expr::v(coord), 2))];
    for &k in &solution.support {
        terms.push(Expr::scaled(-0.5 * solution.theta[k], dict.basis[k].clone()));
    }
    Expr::sum(terms).simplify()
}

/// Relative L2 distance between two Lagrangians sampled along a trajectory,
/// `|L_a - L_truth|_2 / |L_a|_2`.
pub fn lagrangian_error(
    approx: &Expr,
    truth: &Expr,
    tr: &Trajectory,
) -> Result<f64, EvalError> {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for n in 0..tr.len() {
        let (x, v, f) = tr.sample(n);
        let ctx = EvalContext { x, v, f };
        let a = approx.eval(&ctx)?;
        let t = truth.eval(&ctx)?;
        diff += (a - t) * (a - t);
        norm += a * a;
    }
    if norm == 0.0 {
        return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((diff / norm).sqrt())
}

/// Coordinates a basis depends on.
fn touched_coords(basis: &Expr, m: usize) -> Vec<usize> {
    (0..m).filter(|&c| basis.depends_on_coord(c)).collect()
}

/// Largest relative deviation from the mean, as a percentage.
fn spread_percent(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean == 0.0 {
        return if values.iter().all(|&v| v == 0.0) { 0.0 } else { f64::INFINITY };
    }
    values
        .iter()
        .map(|v| ((v - mean) / mean).abs())
        .fold(0.0f64, f64::max)
        * 100.0
}

const COUPLING_SPREAD_LIMIT_PERCENT: f64 = 5.0;

fn assemble(
    dict: &Dictionary,
    dofs: &[DofLagrangian],
    weights: &[f64],
) -> Result<SystemLagrangian, DiscoverError> {
    let m = dict.spec.coords;
    if weights.len() != m || dofs.len() != m {
        return Err(DiscoverError::WrongWeightCount { expected: m, got: weights.len() });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(DiscoverError::BadWeights);
    }

    let mut terms: Vec<Expr> = Vec::new();
    // Weighted potential coefficient implied for each coupling basis by each
    // coordinate that selected it.
    let mut couplings: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dict.len()];

    for dof in dofs {
        let w = weights[dof.coord];
        terms.push(Expr::scaled(0.5 * w, Expr::power(Expr::v(dof.coord), 2)));
        for &k in &dof.solution.support {
            let theta = dof.solution.theta[k];
            if touched_coords(&dict.basis[k], m).len() > 1 {
                couplings[k].push((dof.coord, w * theta / 2.0));
            } else {
                terms.push(Expr::scaled(-0.5 * w * theta, dict.basis[k].clone()));
            }
        }
    }

    let mut shared_terms = Vec::new();
    for (k, implied) in couplings.iter().enumerate() {
        if implied.is_empty() {
            continue;
        }
        let values: Vec<f64> = implied.iter().map(|&(_, v)| v).collect();
        let spread = spread_percent(&values);
        if spread > COUPLING_SPREAD_LIMIT_PERCENT {
            return Err(DiscoverError::InconsistentCoupling {
                label: dict.labels[k].clone(),
                implied: values,
                spread,
            });
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        terms.push(Expr::scaled(-mean, dict.basis[k].clone()));
        shared_terms.push(SharedTerm {
            label: dict.labels[k].clone(),
            implied: implied.clone(),
            reconciled: mean,
            spread_percent: spread,
        });
    }

    Ok(SystemLagrangian { expr: Expr::sum(terms).simplify(), shared_terms })
}
