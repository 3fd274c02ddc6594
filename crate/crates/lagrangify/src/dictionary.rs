//! Candidate basis dictionaries and their Euler-Lagrange images.
//!
//! A [`DictionarySpec`] describes which symbolic families to enumerate;
//! [`build_dictionary`] expands it into concrete expressions, and
//! [`euler_lagrange_matrix`] maps every basis through the per-coordinate
//! Euler-Lagrange operator using temporal central differences.

use crate::expr::{Expr, Var};
use crate::sim::{Trajectory, TrajectoryError};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Declarative description of a candidate basis library.
///
/// The enumeration order is fixed: constant, position monomials, velocity
/// monomials, position-velocity cross monomials, position harmonics,
/// velocity harmonics, powers of pairwise position differences, powers of
/// second differences over coordinate triples, and position-forcing
/// couplings. Unused families are simply absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionarySpec {
    /// Number of generalized coordinates.
    pub coords: usize,
    /// Highest monomial degree; must be at least 2 so the kinetic bases exist.
    pub poly_degree: u32,
    /// Include `x_i^a * v_i^b` with `a, b >= 1` and `a + b <= poly_degree`.
    pub cross_terms: bool,
    /// Include `sin(x_i)` and `cos(x_i)`.
    pub harmonics: bool,
    /// Include `sin(v_i)` and `cos(v_i)`.
    pub velocity_harmonics: bool,
    /// Include powers of `x_j - x_i` for coordinate pairs.
    pub pairwise_differences: bool,
    /// Highest power of each pairwise difference.
    pub diff_poly_degree: u32,
    /// Only couple coordinates at most this far apart; `None` means all pairs.
    pub diff_window: Option<usize>,
    /// Include powers of the second difference `x_{i-1} - 2 x_i + x_{i+1}`
    /// for every interior coordinate. Powers start at 2 because the first
    /// power is a linear combination of monomials already in the library.
    pub curvature_differences: bool,
    /// Include `x_i * f_i` couplings to external forcing channels.
    pub forcing_coupling: bool,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        DictionarySpec {
            coords: 1,
            poly_degree: 2,
            cross_terms: false,
            harmonics: false,
            velocity_harmonics: false,
            pairwise_differences: false,
            diff_poly_degree: 2,
            diff_window: None,
            curvature_differences: false,
            forcing_coupling: false,
        }
    }
}

/// Hard cap on the number of enumerated bases.
pub const MAX_BASES: usize = 100_000;

/// Invalid dictionary construction or an incompatible trajectory.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DictError {
    #[error("dictionary needs at least one coordinate")]
    ZeroCoords,
    #[error("poly_degree must be at least 2 so the kinetic bases v_i^2 exist")]
    PolyDegreeTooLow,
    #[error("diff_poly_degree must be at least 1 when pairwise differences are enabled")]
    DiffDegreeZero,
    #[error("diff_window must be at least 1 when given")]
    ZeroWindow,
    #[error("curvature differences need at least 3 coordinates and diff_poly_degree >= 2")]
    CurvatureUnderdetermined,
    #[error("dictionary would contain {k} bases, exceeding the cap of {MAX_BASES}")]
    TooLarge { k: usize },
    #[error("trajectory has {got} coordinates, dictionary expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dictionary contains forcing couplings but the trajectory has no forcing data")]
    MissingForcing,
    #[error("coordinate {coord} out of range for {coords} coordinates")]
    CoordOutOfRange { coord: usize, coords: usize },
    #[error("trajectory too short: differencing needs {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// An expanded basis library plus bookkeeping for discovery.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub spec: DictionarySpec,
    /// Enumerated bases in canonical order.
    pub basis: Vec<Expr>,
    /// Rendered form of each basis, aligned with `basis`.
    pub labels: Vec<String>,
    /// Index of the kinetic basis `v_i^2` per coordinate.
    kinetic: Vec<usize>,
}

impl Dictionary {
    /// Number of bases.
    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    /// Index of `v_i^2` in the basis list.
    pub fn kinetic_index(&self, coord: usize) -> usize {
        self.kinetic[coord]
    }

    /// Whether any basis reads a forcing channel.
    pub fn needs_forcing(&self) -> bool {
        self.basis.iter().any(|b| b.needs_forcing())
    }
}

/// Number of bases a spec will expand into.
fn basis_count(spec: &DictionarySpec) -> usize {
    let m = spec.coords;
    let rho = spec.poly_degree as usize;
    let mut k = 1 + 2 * m * rho;
    if spec.cross_terms {
        // Pairs (a, b) with a, b >= 1 and a + b <= rho.
        k += m * (rho * (rho - 1)) / 2;
    }
    if spec.harmonics {
        k += 2 * m;
    }
    if spec.velocity_harmonics {
        k += 2 * m;
    }
    if spec.pairwise_differences {
        let window = spec.diff_window.unwrap_or(m);
        let pairs: usize = (1..m).map(|i| i.min(window)).sum();
        k += pairs * spec.diff_poly_degree as usize;
    }
    if spec.curvature_differences {
        k += (m - 2) * (spec.diff_poly_degree as usize - 1);
    }
    if spec.forcing_coupling {
        k += m;
    }
    k
}

/// Expands a spec into concrete basis expressions.
pub fn build_dictionary(spec: &DictionarySpec) -> Result<Dictionary, DictError> {
    if spec.coords == 0 {
        return Err(DictError::ZeroCoords);
    }
    if spec.poly_degree < 2 {
        return Err(DictError::PolyDegreeTooLow);
    }
    if spec.pairwise_differences && spec.diff_poly_degree == 0 {
        return Err(DictError::DiffDegreeZero);
    }
    if spec.diff_window == Some(0) {
        return Err(DictError::ZeroWindow);
    }
    if spec.curvature_differences && (spec.coords < 3 || spec.diff_poly_degree < 2) {
        return Err(DictError::CurvatureUnderdetermined);
    }
    let k = basis_count(spec);
    if k > MAX_BASES {
        return Err(DictError::TooLarge { k });
    }

    let m = spec.coords;
    let rho = spec.poly_degree;
    let mut basis: Vec<Expr> = Vec::with_capacity(k);
    let mut kinetic = vec![usize::MAX; m];

    basis.push(Expr::constant(1.0));
    for i in 0..m {
        for p in 1..=rho {
            basis.push(monomial(Var::x(i), p));
        }
    }
    for i in 0..m {
        for p in 1..=rho {
            if p == 2 {
                kinetic[i] = basis.len();
            }
            basis.push(monomial(Var::v(i), p));
        }
    }
    if spec.cross_terms {
        for i in 0..m {
            for a in 1..rho {
                for b in 1..=(rho - a) {
                    basis.push(Expr::product(vec![
                        monomial(Var::x(i), a),
                        monomial(Var::v(i), b),
                    ]));
                }
            }
        }
    }
    if spec.harmonics {
        for i in 0..m {
            basis.push(Expr::sin(Expr::x(i)));
            basis.push(Expr::cos(Expr::x(i)));
        }
    }
    if spec.velocity_harmonics {
        for i in 0..m {
            basis.push(Expr::sin(Expr::v(i)));
            basis.push(Expr::cos(Expr::v(i)));
        }
    }
    if spec.pairwise_differences {
        let window = spec.diff_window.unwrap_or(m);
        for i in 0..m {
            for j in (i + 1)..m.min(i + window + 1) {
                for p in 1..=spec.diff_poly_degree {
                    let diff = Expr::position_diff(j, i);
                    basis.push(if p == 1 { diff } else { Expr::power(diff, p) });
                }
            }
        }
    }
    if spec.curvature_differences {
        for i in 1..m - 1 {
            for p in 2..=spec.diff_poly_degree {
                basis.push(Expr::power(second_difference(i), p));
            }
        }
    }
    if spec.forcing_coupling {
        for i in 0..m {
            basis.push(Expr::product(vec![Expr::x(i), Expr::forcing(i)]));
        }
    }

    debug_assert_eq!(basis.len(), k);
    let labels = basis.iter().map(|b| b.render()).collect();
    Ok(Dictionary { spec: spec.clone(), basis, labels, kinetic })
}

fn monomial(var: Var, p: u32) -> Expr {
    if p == 1 {
        Expr::Var(var)
    } else {
        Expr::power(Expr::Var(var), p)
    }
}

/// The discrete curvature `x_{i-1} - 2 x_i + x_{i+1}` around coordinate `i`.
fn second_difference(i: usize) -> Expr {
    Expr::sum(vec![
        Expr::x(i - 1),
        Expr::product(vec![Expr::constant(-2.0), Expr::x(i)]),
        Expr::x(i + 1),
    ])
}

/// Evaluates every basis at every sample: an `N x K` matrix with one row
/// per sample in trajectory order.
pub fn evaluate_dictionary(dict: &Dictionary, tr: &Trajectory) -> Result<DMatrix<f64>, DictError> {
    check_compatible(dict, tr)?;
    let n = tr.len();
    let k = dict.len();
    let has_f = tr.f.is_some();
    let mut out = DMatrix::zeros(n, k);
    let mut scratch = Vec::new();
    for (kk, b) in dict.basis.iter().enumerate() {
        let compiled = b
            .compile(dict.spec.coords, has_f)
            .expect("built bases stay in range");
        for nn in 0..n {
            let (xs, vs, fs) = tr.sample(nn);
            out[(nn, kk)] = compiled.eval_with(xs, vs, fs, &mut scratch);
        }
    }
    Ok(out)
}

fn check_compatible(dict: &Dictionary, tr: &Trajectory) -> Result<(), DictError> {
    if tr.coords() != dict.spec.coords {
        return Err(DictError::DimensionMismatch {
            expected: dict.spec.coords,
            got: tr.coords(),
        });
    }
    if dict.needs_forcing() && tr.f.is_none() {
        return Err(DictError::MissingForcing);
    }
    Ok(())
}

/// Order of accuracy of the temporal central-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffOrder {
    Two,
    Four,
    Six,
    Eight,
}

impl DiffOrder {
    /// Samples lost on each side of the series.
    pub fn halfwidth(self) -> usize {
        match self {
            DiffOrder::Two => 1,
            DiffOrder::Four => 2,
            DiffOrder::Six => 3,
            DiffOrder::Eight => 4,
        }
    }

    /// Central first derivative of a uniform series; writes
    /// `g.len() - 2 * halfwidth` values.
    pub fn differentiate(self, g: &[f64], dt: f64, out: &mut Vec<f64>) {
        let w = self.halfwidth();
        out.clear();
        assert!(g.len() > 2 * w, "series too short for stencil");
        match self {
            DiffOrder::Two => {
                let s = 1.0 / (2.0 * dt);
                for i in w..g.len() - w {
                    out.push((g[i + 1] - g[i - 1]) * s);
                }
            }
            DiffOrder::Four => {
                let s = 1.0 / (12.0 * dt);
                for i in w..g.len() - w {
                    out.push((-g[i + 2] + 8.0 * g[i + 1] - 8.0 * g[i - 1] + g[i - 2]) * s);
                }
            }
            DiffOrder::Six => {
                let s = 1.0 / (60.0 * dt);
                for i in w..g.len() - w {
                    out.push(
                        (g[i + 3] - 9.0 * g[i + 2] + 45.0 * g[i + 1]
                            - 45.0 * g[i - 1]
                            + 9.0 * g[i - 2]
                            - g[i - 3])
                            * s,
                    );
                }
            }
            DiffOrder::Eight => {
                let s = 1.0 / (840.0 * dt);
                for i in w..g.len() - w {
                    out.push(
                        (-3.0 * g[i + 4] + 32.0 * g[i + 3] - 168.0 * g[i + 2]
                            + 672.0 * g[i + 1]
                            - 672.0 * g[i - 1]
                            + 168.0 * g[i - 2]
                            - 32.0 * g[i - 3]
                            + 3.0 * g[i - 4])
                            * s,
                    );
                }
            }
        }
    }
}

/// The dictionary pushed through one coordinate's Euler-Lagrange operator.
///
/// Row `r` corresponds to trajectory sample `r + trim`; column `k` holds
/// `d/dt (d l_k / d v_i) - d l_k / d x_i` for basis `l_k`.
#[derive(Debug, Clone)]
pub struct ElMatrix {
    pub coord: usize,
    pub a: DMatrix<f64>,
    /// Samples dropped at each end by the differencing stencil.
    pub trim: usize,
    /// Time axis of the retained rows.
    pub t: Vec<f64>,
    /// Whether each column is structurally nonzero (basis touches `coord`).
    pub active: Vec<bool>,
}

/// Applies the Euler-Lagrange operator of one coordinate to every basis.
///
/// The velocity partial of each basis is evaluated along the trajectory
/// and differentiated in time with the requested stencil; the position
/// partial is subtracted at the retained samples. Bases that do not touch
/// the coordinate produce exact zero columns and are skipped.
pub fn euler_lagrange_matrix(
    dict: &Dictionary,
    tr: &Trajectory,
    coord: usize,
    order: DiffOrder,
) -> Result<ElMatrix, DictError> {
    check_compatible(dict, tr)?;
    let m = dict.spec.coords;
    if coord >= m {
        return Err(DictError::CoordOutOfRange { coord, coords: m });
    }
    let dt = tr.uniform_dt()?;
    let n = tr.len();
    let w = order.halfwidth();
    if n <= 2 * w {
        return Err(DictError::TooFewSamples { needed: 2 * w + 1, got: n });
    }
    let rows = n - 2 * w;
    let has_f = tr.f.is_some();

    let mut a = DMatrix::zeros(rows, dict.len());
    let mut active = vec![false; dict.len()];
    let mut g = vec![0.0; n];
    let mut dg = Vec::with_capacity(rows);
    let mut scratch = Vec::new();

    for (k, b) in dict.basis.iter().enumerate() {
        if !b.depends_on_coord(coord) || is_null_image(b, coord, m) {
            continue;
        }
        active[k] = true;
        let dldv = b.partial(Var::v(coord)).simplify();
        let dldx = b.partial(Var::x(coord)).simplify();

        if !matches!(dldv, Expr::Const(c) if c == 0.0) {
            let compiled = dldv
                .compile(m, has_f)
                .expect("partials of built bases stay in range");
            for (nn, gv) in g.iter_mut().enumerate() {
                let (xs, vs, fs) = tr.sample(nn);
                *gv = compiled.eval_with(xs, vs, fs, &mut scratch);
            }
            order.differentiate(&g, dt, &mut dg);
            for r in 0..rows {
                a[(r, k)] = dg[r];
            }
        }
        if !matches!(dldx, Expr::Const(c) if c == 0.0) {
            let compiled = dldx
                .compile(m, has_f)
                .expect("partials of built bases stay in range");
            for r in 0..rows {
                let (xs, vs, fs) = tr.sample(r + w);
                a[(r, k)] -= compiled.eval_with(xs, vs, fs, &mut scratch);
            }
        }
    }

    let t = tr.t[w..n - w].to_vec();
    Ok(ElMatrix { coord, a, trim: w, t, active })
}

/// Whether a basis maps to the identically zero function under the
/// Euler-Lagrange operator of `coord`.
///
/// Total time derivatives such as `x^a * v = d/dt x^(a+1)/(a+1)` are
/// dynamically inert: they drop out of the action along every trajectory.
/// Their numerical columns would contain nothing but differencing error,
/// which a least-squares solve can fit with arbitrarily large coefficients,
/// so they are detected symbolically and excluded up front.
fn is_null_image(basis: &Expr, coord: usize, m: usize) -> bool {
    let dldv = basis.partial(Var::v(coord)).simplify();
    // If d(dldv)/dv_j is nonzero anywhere, d/dt dldv involves an
    // acceleration and cannot cancel against the position partial.
    for j in 0..m {
        if !is_zero(&dldv.partial(Var::v(j)).simplify()) {
            return false;
        }
    }
    // With no acceleration terms, d/dt dldv = sum_j d(dldv)/dx_j * v_j;
    // the image vanishes when that matches dldx identically.
    let mut terms = vec![Expr::product(vec![Expr::constant(-1.0), basis.partial(Var::x(coord))])];
    for j in 0..m {
        let gj = dldv.partial(Var::x(j)).simplify();
        if !is_zero(&gj) {
            terms.push(Expr::product(vec![gj, Expr::v(j)]));
        }
    }
    is_zero(&Expr::sum(terms).simplify())
}

fn is_zero(e: &Expr) -> bool {
    matches!(e, Expr::Const(c) if *c == 0.0)
}

/// Applies the Euler-Lagrange operator of one coordinate to an arbitrary
/// expression along a trajectory.
///
/// Returns the residual series at the interior samples (the same trim as
/// [`euler_lagrange_matrix`]); useful for checking how well a reconstructed
/// Lagrangian satisfies its own equation of motion on data.
pub fn euler_lagrange_series(
    expr: &Expr,
    tr: &Trajectory,
    coord: usize,
    order: DiffOrder,
) -> Result<Vec<f64>, DictError> {
    let m = tr.x.nrows();
    if coord >= m || expr.max_coord().is_some_and(|c| c >= m) {
        return Err(DictError::CoordOutOfRange { coord, coords: m });
    }
    let has_f = tr.f.is_some();
    if expr.needs_forcing() && !has_f {
        return Err(DictError::MissingForcing);
    }
    let dt = tr.uniform_dt()?;
    let n = tr.len();
    let w = order.halfwidth();
    if n <= 2 * w {
        return Err(DictError::TooFewSamples { needed: 2 * w + 1, got: n });
    }
    let rows = n - 2 * w;

    let mut out = vec![0.0; rows];
    let mut scratch = Vec::new();
    let dldv = expr.partial(Var::v(coord)).simplify();
    let dldx = expr.partial(Var::x(coord)).simplify();

    if !matches!(dldv, Expr::Const(c) if c == 0.0) {
        let compiled = dldv.compile(m, has_f).expect("coordinates checked above");
        let mut g = vec![0.0; n];
        for (nn, gv) in g.iter_mut().enumerate() {
            let (xs, vs, fs) = tr.sample(nn);
            *gv = compiled.eval_with(xs, vs, fs, &mut scratch);
        }
        let mut dg = Vec::with_capacity(rows);
        order.differentiate(&g, dt, &mut dg);
        out.copy_from_slice(&dg);
    }
    if !matches!(dldx, Expr::Const(c) if c == 0.0) {
        let compiled = dldx.compile(m, has_f).expect("coordinates checked above");
        for (r, ov) in out.iter_mut().enumerate() {
            let (xs, vs, fs) = tr.sample(r + w);
            *ov -= compiled.eval_with(xs, vs, fs, &mut scratch);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::EvalContext;
    use std::collections::HashSet;

    fn spec_single_dof(forcing: bool) -> DictionarySpec {
        DictionarySpec {
            coords: 1,
            poly_degree: 5,
            cross_terms: true,
            harmonics: true,
            velocity_harmonics: true,
            pairwise_differences: false,
            forcing_coupling: forcing,
            ..DictionarySpec::default()
        }
    }

    fn spec_mdof(coords: usize) -> DictionarySpec {
        DictionarySpec {
            coords,
            poly_degree: 5,
            harmonics: true,
            pairwise_differences: true,
            diff_poly_degree: 5,
            ..DictionarySpec::default()
        }
    }

    fn spec_field(coords: usize, window: usize) -> DictionarySpec {
        DictionarySpec {
            coords,
            poly_degree: 2,
            pairwise_differences: true,
            diff_poly_degree: 2,
            diff_window: Some(window),
            ..DictionarySpec::default()
        }
    }

    fn cos_trajectory(omega: f64, dt: f64, n: usize) -> Trajectory {
        let t: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let x = DMatrix::from_iterator(1, n, t.iter().map(|&t| (omega * t).cos()));
        let v = DMatrix::from_iterator(1, n, t.iter().map(|&t| -omega * (omega * t).sin()));
        Trajectory::new(t, x, v, None).unwrap()
    }

    fn spec_beam(coords: usize) -> DictionarySpec {
        DictionarySpec {
            coords,
            poly_degree: 2,
            curvature_differences: true,
            diff_poly_degree: 2,
            ..DictionarySpec::default()
        }
    }

    #[test]
    fn counts_match_documented_sizes() {
        assert_eq!(build_dictionary(&spec_single_dof(false)).unwrap().len(), 25);
        assert_eq!(build_dictionary(&spec_single_dof(true)).unwrap().len(), 26);
        assert_eq!(build_dictionary(&spec_mdof(3)).unwrap().len(), 52);
        assert_eq!(build_dictionary(&spec_field(50, 1)).unwrap().len(), 299);
        assert_eq!(build_dictionary(&spec_field(50, 2)).unwrap().len(), 395);
        assert_eq!(build_dictionary(&spec_beam(50)).unwrap().len(), 249);
    }

    #[test]
    fn kinetic_indices_point_at_squared_velocities() {
        let dict = build_dictionary(&spec_mdof(3)).unwrap();
        for i in 0..3 {
            let k = dict.kinetic_index(i);
            assert_eq!(dict.basis[k], Expr::power(Expr::v(i), 2));
            assert_eq!(dict.labels[k], format!("v{i}^2"));
        }
    }

    #[test]
    fn labels_are_unique() {
        for spec in [spec_single_dof(true), spec_mdof(3), spec_field(5, 2)] {
            let dict = build_dictionary(&spec).unwrap();
            let set: HashSet<&String> = dict.labels.iter().collect();
            assert_eq!(set.len(), dict.len());
        }
    }

    #[test]
    fn build_rejects_bad_specs() {
        let mut s = DictionarySpec { coords: 0, ..DictionarySpec::default() };
        assert_eq!(build_dictionary(&s), Err(DictError::ZeroCoords));
        s.coords = 1;
        s.poly_degree = 1;
        assert_eq!(build_dictionary(&s), Err(DictError::PolyDegreeTooLow));
        s.poly_degree = 2;
        s.pairwise_differences = true;
        s.diff_poly_degree = 0;
        assert_eq!(build_dictionary(&s), Err(DictError::DiffDegreeZero));
        s.diff_poly_degree = 2;
        s.diff_window = Some(0);
        assert_eq!(build_dictionary(&s), Err(DictError::ZeroWindow));
        let flat = DictionarySpec { coords: 2, ..spec_beam(2) };
        assert_eq!(build_dictionary(&flat), Err(DictError::CurvatureUnderdetermined));
        let linear = DictionarySpec { diff_poly_degree: 1, ..spec_beam(4) };
        assert_eq!(build_dictionary(&linear), Err(DictError::CurvatureUnderdetermined));
        let huge = DictionarySpec { coords: 50_000, ..DictionarySpec::default() };
        assert!(matches!(build_dictionary(&huge), Err(DictError::TooLarge { .. })));
    }

    #[test]
    fn window_limits_coupling_range() {
        // 5 coords, window 2: pairs (01 02 12 13 23 24 34) + .. count:
        // i=0: j=1,2; i=1: j=2,3; i=2: j=3,4; i=3: j=4 -> 7 pairs, 2 powers.
        let dict = build_dictionary(&spec_field(5, 2)).unwrap();
        let base = 1 + 2 * 5 * 2;
        assert_eq!(dict.len(), base + 7 * 2);
        let all = build_dictionary(&DictionarySpec {
            diff_window: None,
            ..spec_field(5, 2)
        })
        .unwrap();
        assert_eq!(all.len(), base + 10 * 2);
    }

    #[test]
    fn curvature_bases_cover_interior_triples() {
        let spec = DictionarySpec { diff_poly_degree: 3, ..spec_beam(5) };
        let dict = build_dictionary(&spec).unwrap();
        // Constant + monomials + 3 interior centers with powers 2 and 3.
        assert_eq!(dict.len(), 1 + 2 * 5 * 2 + 3 * 2);
        for label in [
            "(x0 + x2 - 2*x1)^2",
            "(x0 + x2 - 2*x1)^3",
            "(x1 + x3 - 2*x2)^2",
            "(x2 + x4 - 2*x3)^3",
        ] {
            assert!(dict.labels.iter().any(|l| l == label), "missing {label}");
        }
    }

    #[test]
    fn curvature_el_columns_match_hand_derivatives() {
        // EL_i of (x0 + x2 - 2 x1)^2 has no velocity part, so the columns
        // are exact: -2k for the outer coordinates and +4k for the center,
        // where k is the second difference itself.
        let dict = build_dictionary(&spec_beam(3)).unwrap();
        let n = 40;
        let t: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        let x = DMatrix::from_fn(3, n, |i, j| ((i + 1) as f64 * t[j]).cos());
        let v = DMatrix::from_fn(3, n, |i, j| -((i + 1) as f64) * ((i + 1) as f64 * t[j]).sin());
        let tr = Trajectory::new(t, x, v, None).unwrap();
        let k_curv = dict
            .labels
            .iter()
            .position(|l| l == "(x0 + x2 - 2*x1)^2")
            .unwrap();
        for (coord, gain) in [(0, -2.0), (1, 4.0), (2, -2.0)] {
            let el = euler_lagrange_matrix(&dict, &tr, coord, DiffOrder::Two).unwrap();
            assert!(el.active[k_curv]);
            for r in 0..el.a.nrows() {
                let (xs, _, _) = tr.sample(r + el.trim);
                let kappa = xs[0] + xs[2] - 2.0 * xs[1];
                assert!((el.a[(r, k_curv)] - gain * kappa).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn evaluate_matches_direct_expression_evaluation() {
        let spec = spec_single_dof(true);
        let dict = build_dictionary(&spec).unwrap();
        let n = 6;
        let t: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let x = DMatrix::from_iterator(1, n, t.iter().map(|&t| 0.3 + t * t));
        let v = DMatrix::from_iterator(1, n, t.iter().map(|&t| 2.0 * t));
        let f = DMatrix::from_iterator(1, n, t.iter().map(|&t| t.sin()));
        let tr = Trajectory::new(t, x, v, Some(f)).unwrap();
        let theta = evaluate_dictionary(&dict, &tr).unwrap();
        assert_eq!(theta.nrows(), n);
        assert_eq!(theta.ncols(), 26);
        for nn in 0..n {
            let (xs, vs, fs) = tr.sample(nn);
            let ctx = EvalContext { x: xs, v: vs, f: fs };
            for (k, b) in dict.basis.iter().enumerate() {
                assert_eq!(theta[(nn, k)], b.eval(&ctx).unwrap());
            }
        }
        // Constant column is all ones; forcing column is x * f.
        for nn in 0..n {
            assert_eq!(theta[(nn, 0)], 1.0);
            let (xs, _, fs) = tr.sample(nn);
            assert_eq!(theta[(nn, 25)], xs[0] * fs.unwrap()[0]);
        }
    }

    #[test]
    fn evaluate_requires_forcing_channels() {
        let dict = build_dictionary(&spec_single_dof(true)).unwrap();
        let tr = cos_trajectory(1.0, 0.1, 8);
        assert_eq!(evaluate_dictionary(&dict, &tr), Err(DictError::MissingForcing));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let dict = build_dictionary(&spec_mdof(3)).unwrap();
        let tr = cos_trajectory(1.0, 0.1, 8);
        assert!(matches!(
            euler_lagrange_matrix(&dict, &tr, 0, DiffOrder::Two),
            Err(DictError::DimensionMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn stencils_converge_at_their_order() {
        // Steps are kept coarse enough that truncation error dominates
        // float rounding even for the sixth-order stencil.
        let err = |order: DiffOrder, dt: f64| -> f64 {
            let n = (10.0 / dt) as usize;
            let g: Vec<f64> = (0..n).map(|i| (i as f64 * dt).sin()).collect();
            let mut dg = Vec::new();
            order.differentiate(&g, dt, &mut dg);
            let w = order.halfwidth();
            dg.iter()
                .enumerate()
                .map(|(i, d)| (d - ((i + w) as f64 * dt).cos()).abs())
                .fold(0.0f64, f64::max)
        };
        for (order, expected) in [
            (DiffOrder::Two, 4.0),
            (DiffOrder::Four, 16.0),
            (DiffOrder::Six, 64.0),
            (DiffOrder::Eight, 256.0),
        ] {
            let ratio = err(order, 0.2) / err(order, 0.1);
            assert!(
                (expected * 0.5..expected * 2.0).contains(&ratio),
                "{order:?}: ratio {ratio:.1}, expected ~{expected}"
            );
        }
    }

    #[test]
    fn total_time_derivatives_are_excluded_symbolically() {
        // v and x^a * v are total time derivatives: their Euler-Lagrange
        // image vanishes on every trajectory, so the columns are exact
        // zeros instead of differencing noise.
        let dict = build_dictionary(&spec_single_dof(false)).unwrap();
        let tr = cos_trajectory(3.0, 0.01, 60);
        let el = euler_lagrange_matrix(&dict, &tr, 0, DiffOrder::Two).unwrap();
        for label in ["v0", "v0*x0", "v0*x0^2", "v0*x0^3", "v0*x0^4"] {
            let k = dict.labels.iter().position(|l| l == label).unwrap();
            assert!(!el.active[k], "{label} should be inert");
            assert!(el.a.column(k).iter().all(|&v| v == 0.0), "{label}");
        }
        // Bases at least quadratic in velocity carry dynamics.
        for label in ["v0^2", "x0*v0^2", "sin(v0)"] {
            let k = dict.labels.iter().position(|l| l == label).unwrap();
            assert!(el.active[k], "{label} should stay active");
            assert!(el.a.column(k).iter().any(|&v| v != 0.0), "{label}");
        }
    }

    #[test]
    fn el_of_position_square_is_exact() {
        // EL_i[x^2] = -2x with no differencing error: the velocity partial
        // vanishes identically.
        let dict = build_dictionary(&spec_single_dof(false)).unwrap();
        let tr = cos_trajectory(3.0, 0.01, 50);
        let el = euler_lagrange_matrix(&dict, &tr, 0, DiffOrder::Two).unwrap();
        let k_x2 = dict
            .labels
            .iter()
            .position(|l| l == "x0^2")
            .unwrap();
        for r in 0..el.a.nrows() {
            let (xs, _, _) = tr.sample(r + el.trim);
            assert!((el.a[(r, k_x2)] - (-2.0 * xs[0])).abs() < 1e-14);
        }
    }

    #[test]
    fn el_of_kinetic_basis_approximates_twice_acceleration() {
        let omega: f64 = 500f64.sqrt();
        let dt = 1e-3;
        let dict = build_dictionary(&spec_single_dof(false)).unwrap();
        let tr = cos_trajectory(omega, dt, 1001);
        let el = euler_lagrange_matrix(&dict, &tr, 0, DiffOrder::Two).unwrap();
        let k = dict.kinetic_index(0);
        // Leading differencing bias is (omega dt)^2 / 6 of the signal.
        let bias = (omega * dt).powi(2) / 6.0 * 2.0 * omega * omega;
        let mut max_err = 0.0f64;
        for r in 0..el.a.nrows() {
            let t = el.t[r];
            let exact = -2.0 * omega * omega * (omega * t).cos();
            max_err = max_err.max((el.a[(r, k)] - exact).abs());
        }
        assert!(max_err < 1.5 * bias, "err {max_err:.3e}, bias {bias:.3e}");
        assert!(max_err > 0.1 * bias, "err suspiciously small: {max_err:.3e}");
    }

    #[test]
    fn higher_order_stencils_cut_the_kinetic_bias() {
        let omega: f64 = 500f64.sqrt();
        let dt = 1e-3;
        let dict = build_dictionary(&spec_single_dof(false)).unwrap();
        let tr = cos_trajectory(omega, dt, 1001);
        let k = dict.kinetic_index(0);
        let max_err = |order: DiffOrder| -> f64 {
            let el = euler_lagrange_matrix(&dict, &tr, 0, order).unwrap();
            (0..el.a.nrows())
                .map(|r| {
                    let exact = -2.0 * omega * omega * (omega * el.t[r]).cos();
                    (el.a[(r, k)] - exact).abs()
                })
                .fold(0.0f64, f64::max)
        };
        let e2 = max_err(DiffOrder::Two);
        let e4 = max_err(DiffOrder::Four);
        let e6 = max_err(DiffOrder::Six);
        assert!(e4 < e2 / 50.0, "order four barely helped: {e2:.2e} -> {e4:.2e}");
        assert!(e6 < e4 / 10.0, "order six barely helped: {e4:.2e} -> {e6:.2e}");
    }

    #[test]
    fn unrelated_coordinates_give_exact_zero_columns() {
        let dict = build_dictionary(&spec_mdof(2)).unwrap();
        let n = 50;
        let t: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        let x = DMatrix::from_fn(2, n, |i, j| ((i + 1) as f64 * t[j]).cos());
        let v = DMatrix::from_fn(2, n, |i, j| -((i + 1) as f64) * ((i + 1) as f64 * t[j]).sin());
        let tr = Trajectory::new(t, x, v, None).unwrap();
        let el = euler_lagrange_matrix(&dict, &tr, 0, DiffOrder::Two).unwrap();
        let k_x1sq = dict.labels.iter().position(|l| l == "x1^2").unwrap();
        assert!(!el.active[k_x1sq]);
        assert!(el.a.column(k_x1sq).iter().all(|&v| v == 0.0));
        // Coupling terms touch both coordinates and stay active.
        let k_diff = dict.labels.iter().position(|l| l == "(x1 - x0)^2").unwrap();
        assert!(el.active[k_diff]);
        assert!(el.a.column(k_diff).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn trim_matches_stencil_halfwidth() {
        let dict = build_dictionary(&spec_single_dof(false)).unwrap();
        let tr = cos_trajectory(2.0, 0.01, 30);
        for (order, w) in [
            (DiffOrder::Two, 1),
            (DiffOrder::Four, 2),
            (DiffOrder::Six, 3),
            (DiffOrder::Eight, 4),
        ] {
            let el = euler_lagrange_matrix(&dict, &tr, 0, order).unwrap();
            assert_eq!(el.trim, w);
            assert_eq!(el.a.nrows(), 30 - 2 * w);
            assert_eq!(el.t.len(), 30 - 2 * w);
            assert_eq!(el.t[0], tr.t[w]);
        }
    }

    #[test]
    fn spec_serde_roundtrip_and_unknown_field_rejection() {
        let spec = spec_mdof(3);
        let json = serde_json::to_string(&spec).unwrap();
        let back: DictionarySpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
        let bad = r#"{"coords": 2, "polynomial_order": 3}"#;
        assert!(serde_json::from_str::<DictionarySpec>(bad).is_err());
        // Omitted fields fall back to defaults.
        let minimal: DictionarySpec = serde_json::from_str(r#"{"coords": 4}"#).unwrap();
        assert_eq!(minimal.coords, 4);
        assert_eq!(minimal.poly_degree, 2);
        assert!(!minimal.pairwise_differences);
    }
}
