//! Hamiltonians and equations of motion from discovered Lagrangians.
//!
//! The Legendre transform turns a Lagrangian into its conserved energy, and
//! the diagonal quadratic kinetic structure guaranteed by the dictionary
//! lets the Euler-Lagrange equations be solved for the accelerations in
//! closed form.

use crate::expr::{CompiledExpr, EvalContext, EvalError, Expr, Var, VarKind};
use crate::sim::{Rhs, Trajectory};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use thiserror::Error;

/// Where a system of equations came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Truth,
    DerivedFromLagrangian,
}

/// Derivation failure.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeriveError {
    #[error("velocity term {term} is not a diagonal quadratic; cannot invert the kinetic form")]
    NonDiagonalKinetic { term: String },
    #[error("no kinetic term for coordinate {coord}")]
    MissingKinetic { coord: usize },
    #[error("expression references coordinate {coord} but the system has {coords}")]
    CoordOutOfRange { coord: usize, coords: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Explicit second-order equations of motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSystem {
    pub m: usize,
    /// Acceleration of each coordinate as a function of (x, v, optional f).
    pub rhs: Vec<Expr>,
    pub provenance: Provenance,
}

impl OdeSystem {
    /// Validates coordinate references and wraps the expressions.
    pub fn new(m: usize, rhs: Vec<Expr>, provenance: Provenance) -> Result<Self, DeriveError> {
        for e in &rhs {
            if let Some(c) = e.max_coord() {
                if c >= m {
                    return Err(DeriveError::CoordOutOfRange { coord: c, coords: m });
                }
            }
        }
        Ok(OdeSystem { m, rhs, provenance })
    }

    /// Whether any equation reads a forcing channel.
    pub fn needs_forcing(&self) -> bool {
        self.rhs.iter().any(|e| e.needs_forcing())
    }

    /// Rendered right-hand sides, one per coordinate.
    pub fn rendered(&self) -> Vec<String> {
        self.rhs.iter().map(|e| e.render()).collect()
    }

    /// Compiles the system for numerical integration.
    pub fn compile(&self) -> Result<CompiledOdeSystem, DeriveError> {
        let forcing = self.needs_forcing();
        let compiled = self
            .rhs
            .iter()
            .map(|e| e.compile(self.m, forcing))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CompiledOdeSystem {
            compiled,
            forcing,
            scratch: RefCell::new(Vec::new()),
        })
    }
}

/// A compiled [`OdeSystem`] usable with the integrator.
///
/// Holds a reusable evaluation stack, so a given instance must stay on one
/// thread; compile one per worker when parallelizing.
pub struct CompiledOdeSystem {
    compiled: Vec<CompiledExpr>,
    forcing: bool,
    scratch: RefCell<Vec<f64>>,
}

impl Rhs for CompiledOdeSystem {
    fn dim(&self) -> usize {
        self.compiled.len()
    }

    fn accel(&self, _t: f64, x: &[f64], v: &[f64], f: Option<&[f64]>, out: &mut [f64]) {
        let mut scratch = self.scratch.borrow_mut();
        for (i, c) in self.compiled.iter().enumerate() {
            out[i] = c.eval_with(x, v, f, &mut scratch);
        }
    }

    fn needs_forcing(&self) -> bool {
        self.forcing
    }
}

/// Energy function obtained by Legendre transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianExpr {
    pub expr: Expr,
}

impl HamiltonianExpr {
    /// Evaluates the energy along a trajectory, aligned with its time axis.
    pub fn series(&self, tr: &Trajectory) -> Result<Vec<f64>, EvalError> {
        (0..tr.len())
            .map(|n| {
                let (x, v, f) = tr.sample(n);
                self.expr.eval(&EvalContext { x, v, f })
            })
            .collect()
    }
}

/// Legendre transform `H = sum_i dL/dv_i * v_i - L`, simplified.
///
/// For `L = T - U` with `T` quadratic in the velocities this returns
/// `T + U`, the total energy.
pub fn hamiltonian(lagrangian: &Expr) -> HamiltonianExpr {
    let top = lagrangian.max_coord().map_or(0, |c| c + 1);
    let mut out = Vec::with_capacity(top + 1);
    for i in 0..top {
        let dldv = lagrangian.partial(Var::v(i));
        out.push(Expr::product(vec![dldv, Expr::v(i)]));
    }
    // Negate term by term so like terms cancel during simplification.
    for t in terms(lagrangian) {
        out.push(Expr::neg(t.clone()));
    }
    HamiltonianExpr { expr: Expr::sum(out).simplify() }
}

/// Terms of a simplified expression.
fn terms(e: &Expr) -> &[Expr] {
    match e {
        Expr::Sum(ts) => ts,
        _ => std::slice::from_ref(e),
    }
}

/// Whether the expression reads any velocity variable.
fn uses_velocity(e: &Expr) -> bool {
    match e {
        Expr::Const(_) | Expr::Forcing(_) => false,
        Expr::Var(v) => v.kind == VarKind::Velocity,
        Expr::AbsDiff { a, b } => a.kind == VarKind::Velocity || b.kind == VarKind::Velocity,
        Expr::Sum(ts) | Expr::Product(ts) => ts.iter().any(uses_velocity),
        Expr::Power { base, .. } => uses_velocity(base),
        Expr::Sin(inner) | Expr::Cos(inner) => uses_velocity(inner),
    }
}

/// Matches `c * v_i^2` and returns `(i, c)`.
fn as_kinetic_term(e: &Expr) -> Option<(usize, f64)> {
    let square = |e: &Expr| match e {
        Expr::Power { base, exp: 2 } => match **base {
            Expr::Var(v) if v.kind == VarKind::Velocity => Some(v.coord),
            _ => None,
        },
        _ => None,
    };
    match e {
        Expr::Power { .. } => square(e).map(|i| (i, 1.0)),
        Expr::Product(fs) if fs.len() == 2 => match (&fs[0], &fs[1]) {
            (Expr::Const(c), p) => square(p).map(|i| (i, *c)),
            _ => None,
        },
        _ => None,
    }
}

/// Coefficients `c_i` of the kinetic part `sum_i (1/2) c_i v_i^2`.
///
/// Fails if any velocity-dependent term is not a diagonal square, or if a
/// coordinate below `m` has no kinetic term at all.
pub fn kinetic_coefficients(lagrangian: &Expr, m: usize) -> Result<Vec<f64>, DeriveError> {
    let mut half_c = vec![0.0; m];
    for term in terms(lagrangian) {
        if !uses_velocity(term) {
            continue;
        }
        let Some((i, c)) = as_kinetic_term(term) else {
            return Err(DeriveError::NonDiagonalKinetic { term: term.render() });
        };
        if i >= m {
            return Err(DeriveError::CoordOutOfRange { coord: i, coords: m });
        }
        half_c[i] += c;
    }
    for (i, h) in half_c.iter().enumerate() {
        if *h <= 0.0 {
            return Err(DeriveError::MissingKinetic { coord: i });
        }
    }
    Ok(half_c.into_iter().map(|h| 2.0 * h).collect())
}

/// Solves the Euler-Lagrange equations for the accelerations.
///
/// With kinetic part `sum (1/2) c_i v_i^2` the equations reduce to
/// `a_i = (1/c_i) dL/dx_i`; the result carries forcing signals symbolically.
pub fn equations_of_motion(lagrangian: &Expr, m: usize) -> Result<OdeSystem, DeriveError> {
    let c = kinetic_coefficients(lagrangian, m)?;
    let mut rhs = Vec::with_capacity(m);
    for i in 0..m {
        let dldx = lagrangian.partial(Var::x(i));
        rhs.push(Expr::scaled(1.0 / c[i], dldx).simplify());
    }
    OdeSystem::new(m, rhs, Provenance::DerivedFromLagrangian)
}

/// Mean absolute relative deviation between two energy series along `tr`.
///
/// Samples where the reference is exactly zero are skipped unless both
/// series vanish there.
pub fn hamiltonian_error(
    h: &HamiltonianExpr,
    truth: &Expr,
    tr: &Trajectory,
) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for n in 0..tr.len() {
        let (x, v, f) = tr.sample(n);
        let ctx = EvalContext { x, v, f };
        let a = h.expr.eval(&ctx)?;
        let t = truth.eval(&ctx)?;
        if t == 0.0 {
            if a == 0.0 {
                count += 1;
            }
            continue;
        }
        sum += ((a - t) / t).abs();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Peak-to-peak variation of a series relative to the magnitude of its mean.
pub fn peak_to_peak_relative(series: &[f64]) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let max = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = series.iter().cloned().fold(f64::INFINITY, f64::min);
    if mean == 0.0 {
        return if max == min { 0.0 } else { f64::INFINITY };
    }
    (max - min) / mean.abs()
}
