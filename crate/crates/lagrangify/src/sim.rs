//! Reference simulators, the fixed-step RK4 integrator and noise injection.
//!
//! All benchmark data is produced here: linear oscillator networks, the
//! nonlinear pendulum, and method-of-lines discretizations of the string and
//! the cantilever blade. Systems are integrated in mass-normalized second
//! order form `x'' = a(t, x, x')`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Uniformly sampled state history of an `m`-DOF system.
///
/// Channels are stored sample-major: `x` and `v` are `m x N` matrices whose
/// column `n` is the state at `t[n]`; `f` carries forcing channels when the
/// system is driven.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub f: Option<DMatrix<f64>>,
}

/// Violation of the trajectory data contract.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("trajectory needs at least {min} samples, got {got}")]
    TooShort { min: usize, got: usize },
    #[error("time grid is not uniform at sample {index}")]
    NonUniformTimeGrid { index: usize },
    #[error("channel matrices disagree with the time axis: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in channel data at sample {index}")]
    NonFinite { index: usize },
}

const MIN_SAMPLES: usize = 5;

impl Trajectory {
    /// Validates and wraps raw channel data.
    pub fn new(
        t: Vec<f64>,
        x: DMatrix<f64>,
        v: DMatrix<f64>,
        f: Option<DMatrix<f64>>,
    ) -> Result<Self, TrajectoryError> {
        let n = t.len();
        if n < MIN_SAMPLES {
            return Err(TrajectoryError::TooShort { min: MIN_SAMPLES, got: n });
        }
        let m = x.nrows();
        if x.ncols() != n || v.ncols() != n || v.nrows() != m {
            return Err(TrajectoryError::ShapeMismatch(format!(
                "x is {}x{}, v is {}x{}, t has {} samples",
                x.nrows(),
                x.ncols(),
                v.nrows(),
                v.ncols(),
                n
            )));
        }
        if let Some(fm) = &f {
            if fm.ncols() != n || fm.nrows() != m {
                return Err(TrajectoryError::ShapeMismatch(format!(
                    "f is {}x{}, expected {}x{}",
                    fm.nrows(),
                    fm.ncols(),
                    m,
                    n
                )));
            }
        }
        let tr = Trajectory { t, x, v, f };
        tr.uniform_dt()?;
        for n in 0..tr.len() {
            let (xs, vs, fs) = tr.sample(n);
            let finite = xs.iter().chain(vs.iter()).all(|c| c.is_finite())
                && fs.map_or(true, |fs| fs.iter().all(|c| c.is_finite()));
            if !finite {
                return Err(TrajectoryError::NonFinite { index: n });
            }
        }
        Ok(tr)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Number of degrees of freedom.
    pub fn coords(&self) -> usize {
        self.x.nrows()
    }

    /// Uniform sampling interval, re-checked against the stored time axis.
    pub fn uniform_dt(&self) -> Result<f64, TrajectoryError> {
        let dt = self.t[1] - self.t[0];
        if !(dt.is_finite() && dt > 0.0) {
            return Err(TrajectoryError::NonUniformTimeGrid { index: 1 });
        }
        for i in 2..self.t.len() {
            let step = self.t[i] - self.t[i - 1];
            if (step - dt).abs() > 1e-9 * dt.abs() {
                return Err(TrajectoryError::NonUniformTimeGrid { index: i });
            }
        }
        Ok(dt)
    }

    /// State slices at sample `n`: positions, velocities, forcing.
    pub fn sample(&self, n: usize) -> (&[f64], &[f64], Option<&[f64]>) {
        let m = self.coords();
        let xs = &self.x.as_slice()[n * m..(n + 1) * m];
        let vs = &self.v.as_slice()[n * m..(n + 1) * m];
        let fs = self.f.as_ref().map(|fm| &fm.as_slice()[n * m..(n + 1) * m]);
        (xs, vs, fs)
    }
}

/// Right-hand side of a second order system in mass-normalized form.
pub trait Rhs {
    /// Number of degrees of freedom.
    fn dim(&self) -> usize;
    /// Writes accelerations for the given state into `out`.
    fn accel(&self, t: f64, x: &[f64], v: &[f64], f: Option<&[f64]>, out: &mut [f64]);
    /// Whether the system consumes forcing channels.
    fn needs_forcing(&self) -> bool {
        false
    }
}

/// Time-dependent forcing: fills one value per coordinate at time `t`.
pub type ForcingFn<'a> = &'a (dyn Fn(f64, &mut [f64]) + Sync);

/// Integration failure.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("state became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("time step must be positive and t_end >= 4 steps")]
    BadTimeGrid,
    #[error("initial condition has wrong dimension: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(
        "explicit integration unstable: omega_max*dt = {omega_dt:.3} exceeds {limit}; \
         use at least {required_substeps} substeps"
    )]
    StabilityViolation { omega_dt: f64, limit: f64, required_substeps: usize },
    #[error("CFL condition violated: c*dt/delta = {ratio:.3} > 1")]
    CflViolation { ratio: f64 },
    #[error("invalid trajectory produced: {0}")]
    Trajectory(#[from] TrajectoryError),
}

/// Largest stable `omega * h` for classical RK4 on an undamped oscillation.
pub const RK4_STABILITY_LIMIT: f64 = 2.828;

/// Classical fixed-step RK4 for `x'' = a(t, x, x')`.
///
/// Samples are recorded every `dt`; each recording interval is integrated
/// with `substeps` internal RK4 steps of size `dt / substeps`, which keeps
/// stiff semi-discretized systems inside the stability region while
/// honoring the requested output rate. `N = floor(t_end/dt) + 1` samples
/// are produced, with `t[n] = n*dt` exactly.
pub fn rk4_integrate(
    rhs: &dyn Rhs,
    x0: &[f64],
    v0: &[f64],
    dt: f64,
    t_end: f64,
    substeps: usize,
    forcing: Option<ForcingFn>,
) -> Result<Trajectory, SimError> {
    let m = rhs.dim();
    if x0.len() != m {
        return Err(SimError::DimensionMismatch { expected: m, got: x0.len() });
    }
    if v0.len() != m {
        return Err(SimError::DimensionMismatch { expected: m, got: v0.len() });
    }
    if !(dt > 0.0 && dt.is_finite() && t_end.is_finite()) {
        return Err(SimError::BadTimeGrid);
    }
    let steps = (t_end / dt + 0.5).floor() as usize;
    let n_samples = steps + 1;
    if n_samples < MIN_SAMPLES {
        return Err(SimError::BadTimeGrid);
    }
    let substeps = substeps.max(1);
    let h = dt / substeps as f64;

    let mut x = x0.to_vec();
    let mut v = v0.to_vec();
    let mut xs = DMatrix::zeros(m, n_samples);
    let mut vs = DMatrix::zeros(m, n_samples);
    let mut fs = forcing.map(|_| DMatrix::zeros(m, n_samples));
    let mut t_axis = Vec::with_capacity(n_samples);

    let mut work = Rk4Work::new(m);
    record(&mut xs, &mut vs, fs.as_mut(), 0, &x, &v, forcing, 0.0, &mut work.fbuf);
    t_axis.push(0.0);

    for step in 1..n_samples {
        let t0 = (step - 1) as f64 * dt;
        for sub in 0..substeps {
            let t = t0 + sub as f64 * h;
            rk4_step(rhs, t, h, &mut x, &mut v, forcing, &mut work);
        }
        let t_now = step as f64 * dt;
        if !(x.iter().all(|c| c.is_finite()) && v.iter().all(|c| c.is_finite())) {
            return Err(SimError::NonFinite { step });
        }
        record(&mut xs, &mut vs, fs.as_mut(), step, &x, &v, forcing, t_now, &mut work.fbuf);
        t_axis.push(t_now);
    }

    Ok(Trajectory::new(t_axis, xs, vs, fs)?)
}

struct Rk4Work {
    k1v: Vec<f64>,
    k2v: Vec<f64>,
    k3v: Vec<f64>,
    k4v: Vec<f64>,
    xt: Vec<f64>,
    vt: Vec<f64>,
    fbuf: Vec<f64>,
}

impl Rk4Work {
    fn new(m: usize) -> Self {
        Rk4Work {
            k1v: vec![0.0; m],
            k2v: vec![0.0; m],
            k3v: vec![0.0; m],
            k4v: vec![0.0; m],
            xt: vec![0.0; m],
            vt: vec![0.0; m],
            fbuf: vec![0.0; m],
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn record(
    xs: &mut DMatrix<f64>,
    vs: &mut DMatrix<f64>,
    fs: Option<&mut DMatrix<f64>>,
    n: usize,
    x: &[f64],
    v: &[f64],
    forcing: Option<ForcingFn>,
    t: f64,
    fbuf: &mut [f64],
) {
    xs.column_mut(n).copy_from_slice(x);
    vs.column_mut(n).copy_from_slice(v);
    if let (Some(fm), Some(fun)) = (fs, forcing) {
        fun(t, fbuf);
        fm.column_mut(n).copy_from_slice(fbuf);
    }
}

fn rk4_step(
    rhs: &dyn Rhs,
    t: f64,
    h: f64,
    x: &mut [f64],
    v: &mut [f64],
    forcing: Option<ForcingFn>,
    w: &mut Rk4Work,
) {
    let m = x.len();
    let eval = |t: f64, xt: &[f64], vt: &[f64], fbuf: &mut [f64], out: &mut [f64]| {
        let f = forcing.map(|fun| {
            fun(t, fbuf);
            &*fbuf
        });
        rhs.accel(t, xt, vt, f, out);
    };

    // Stage 1 at (t, x, v).
    {
        let (fbuf, out) = (&mut w.fbuf, &mut w.k1v);
        eval(t, x, v, fbuf, out);
    }
    // Stage 2 at t + h/2.
    for i in 0..m {
        w.xt[i] = x[i] + 0.5 * h * v[i];
        w.vt[i] = v[i] + 0.5 * h * w.k1v[i];
    }
    {
        let (fbuf, out) = (&mut w.fbuf, &mut w.k2v);
        eval(t + 0.5 * h, &w.xt, &w.vt, fbuf, out);
    }
    // Stage 3 at t + h/2 using stage-2 slopes.
    for i in 0..m {
        w.xt[i] = x[i] + 0.5 * h * (v[i] + 0.5 * h * w.k1v[i]);
        w.vt[i] = v[i] + 0.5 * h * w.k2v[i];
    }
    {
        let (fbuf, out) = (&mut w.fbuf, &mut w.k3v);
        eval(t + 0.5 * h, &w.xt, &w.vt, fbuf, out);
    }
    // Stage 4 at t + h.
    for i in 0..m {
        w.xt[i] = x[i] + h * (v[i] + 0.5 * h * w.k2v[i]);
        w.vt[i] = v[i] + h * w.k3v[i];
    }
    {
        let (fbuf, out) = (&mut w.fbuf, &mut w.k4v);
        eval(t + h, &w.xt, &w.vt, fbuf, out);
    }

    // Position update combines the four velocity slopes; velocity update the
    // four acceleration slopes.
    for i in 0..m {
        let kx1 = v[i];
        let kx2 = v[i] + 0.5 * h * w.k1v[i];
        let kx3 = v[i] + 0.5 * h * w.k2v[i];
        let kx4 = v[i] + h * w.k3v[i];
        x[i] += h / 6.0 * (kx1 + 2.0 * kx2 + 2.0 * kx3 + kx4);
        v[i] += h / 6.0 * (w.k1v[i] + 2.0 * w.k2v[i] + 2.0 * w.k3v[i] + w.k4v[i]);
    }
}

/// `x'' = -A x + f`, the general linear oscillator network.
pub struct LinearRhs {
    /// Mass-normalized stiffness matrix (`m x m`).
    pub a: DMatrix<f64>,
    pub forced: bool,
}

impl Rhs for LinearRhs {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn accel(&self, _t: f64, x: &[f64], _v: &[f64], f: Option<&[f64]>, out: &mut [f64]) {
        let m = self.dim();
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..m {
                acc -= self.a[(i, j)] * x[j];
            }
            if let Some(fv) = f {
                acc += fv[i];
            }
            out[i] = acc;
        }
    }

    fn needs_forcing(&self) -> bool {
        self.forced
    }
}

/// Plane pendulum `theta'' = -(g/l) sin(theta)`.
pub struct PendulumRhs {
    pub g_over_l: f64,
}

impl Rhs for PendulumRhs {
    fn dim(&self) -> usize {
        1
    }

    fn accel(&self, _t: f64, x: &[f64], _v: &[f64], _f: Option<&[f64]>, out: &mut [f64]) {
        out[0] = -self.g_over_l * x[0].sin();
    }
}

/// Free-free chain of point masses joined by identical springs; also the
/// semi-discrete transversal string when all masses are equal.
pub struct ChainRhs {
    /// Spring constant between neighbors.
    pub k: f64,
    /// One mass per node.
    pub masses: Vec<f64>,
}

impl Rhs for ChainRhs {
    fn dim(&self) -> usize {
        self.masses.len()
    }

    fn accel(&self, _t: f64, x: &[f64], _v: &[f64], _f: Option<&[f64]>, out: &mut [f64]) {
        let m = self.masses.len();
        for i in 0..m {
            let mut force = 0.0;
            if i > 0 {
                force += self.k * (x[i - 1] - x[i]);
            }
            if i + 1 < m {
                force += self.k * (x[i + 1] - x[i]);
            }
            out[i] = force / self.masses[i];
        }
    }
}

/// Semi-discrete string (free ends): `u_i'' = (c^2/d^2) * (second difference)`.
pub struct WaveRhs {
    pub nodes: usize,
    /// `c^2 / delta^2`.
    pub q: f64,
}

impl Rhs for WaveRhs {
    fn dim(&self) -> usize {
        self.nodes
    }

    fn accel(&self, _t: f64, x: &[f64], _v: &[f64], _f: Option<&[f64]>, out: &mut [f64]) {
        let m = self.nodes;
        for i in 0..m {
            let left = if i > 0 { x[i - 1] - x[i] } else { 0.0 };
            let right = if i + 1 < m { x[i + 1] - x[i] } else { 0.0 };
            out[i] = self.q * (left + right);
        }
    }
}

/// Curvature stencils of the discrete cantilever with `m` free nodes.
///
/// The wall carries the clamped boundary: node 0 of the returned list is the
/// wall curvature `2 u_1` (zero displacement, mirrored slope), node 1 is
/// `u_2 - 2 u_1`, and interior rows are the plain second difference. The
/// elastic energy is `(s/2) * sum(kappa^2)`, giving the equation of motion
/// `u'' = -s C^T C u`.
pub fn blade_stencils(m: usize) -> Vec<Vec<(usize, f64)>> {
    let mut rows = Vec::with_capacity(m);
    rows.push(vec![(0, 2.0)]);
    if m >= 2 {
        rows.push(vec![(0, -2.0), (1, 1.0)]);
    }
    for j in 2..m {
        rows.push(vec![(j - 2, 1.0), (j - 1, -2.0), (j, 1.0)]);
    }
    rows
}

/// Discrete Euler-Bernoulli cantilever: `u'' = -s C^T C u` with
/// `s = c^2 / delta^4` and `C` the curvature stencil list.
pub struct BladeRhs {
    pub s: f64,
    stencils: Vec<Vec<(usize, f64)>>,
    nodes: usize,
}

impl BladeRhs {
    pub fn new(nodes: usize, s: f64) -> Self {
        BladeRhs { s, stencils: blade_stencils(nodes), nodes }
    }

    /// The stiffness matrix `C^T C` assembled from the stencil list.
    pub fn operator(&self) -> DMatrix<f64> {
        let m = self.nodes;
        let mut c = DMatrix::zeros(self.stencils.len(), m);
        for (r, row) in self.stencils.iter().enumerate() {
            for (j, w) in row {
                c[(r, *j)] = *w;
            }
        }
        c.transpose() * &c
    }

    /// Largest eigenvalue of `C^T C`, governing the stiffest mode.
    pub fn lambda_max(&self) -> f64 {
        self.operator()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &b| a.max(b))
    }
}

impl Rhs for BladeRhs {
    fn dim(&self) -> usize {
        self.nodes
    }

    fn accel(&self, _t: f64, x: &[f64], _v: &[f64], _f: Option<&[f64]>, out: &mut [f64]) {
        out.fill(0.0);
        for row in &self.stencils {
            let mut kappa = 0.0;
            for (j, w) in row {
                kappa += w * x[*j];
            }
            let scale = self.s * kappa;
            for (j, w) in row {
                out[*j] -= scale * w;
            }
        }
    }
}

/// Simulates the transversal string benchmark: `nodes` grid points spaced
/// `delta` apart with free ends, released from `u(x, 0) = cos(2 pi x)`.
///
/// The stiffest grid mode sits right at `omega dt = c dt / delta`, where
/// the local RK4 error is far above the discretization floor; `substeps`
/// internal steps per recorded sample keep the recorded data an accurate
/// solution of the semi-discrete system.
pub fn simulate_wave(
    c: f64,
    delta: f64,
    nodes: usize,
    dt: f64,
    t_end: f64,
    substeps: usize,
) -> Result<Trajectory, SimError> {
    let h = dt / substeps.max(1) as f64;
    let ratio = c * h / delta;
    if ratio > 1.0 {
        return Err(SimError::CflViolation { ratio });
    }
    let rhs = WaveRhs { nodes, q: c * c / (delta * delta) };
    let x0: Vec<f64> = (0..nodes)
        .map(|i| (2.0 * std::f64::consts::PI * i as f64 * delta).cos())
        .collect();
    let v0 = vec![0.0; nodes];
    rk4_integrate(&rhs, &x0, &v0, dt, t_end, substeps, None)
}

/// Analytic cantilever mode shape evaluated at `x/l`, unit tip deflection.
pub fn cantilever_mode(xi: f64, mode: usize) -> f64 {
    // Roots of cosh(b) cos(b) = -1.
    const BETA_L: [f64; 3] = [1.875_104_068_711_96, 4.694_091_132_974_17, 7.854_757_438_237_61];
    let bl = BETA_L[mode - 1];
    let sigma = (bl.cosh() + bl.cos()) / (bl.sinh() + bl.sin());
    let shape = |z: f64| (z.cosh() - z.cos()) - sigma * (z.sinh() - z.sin());
    shape(bl * xi) / shape(bl)
}

/// Simulates the cantilever blade released from an analytic mode shape.
///
/// The sampling interval `dt` is much coarser than the stability limit of
/// the stiff fourth-order operator, so each interval is integrated with
/// `substeps` internal steps; the stability of the internal step is checked
/// against the spectrum of the discrete operator.
///
/// The sampled analytic shape is not an exact discrete eigenvector; its
/// mismatch spreads over every discrete mode, and components faster than
/// the recording rate would fold into alias noise that dominates the
/// recorded acceleration. The initial shape is therefore projected onto
/// the discrete modes that stay temporally resolved, `omega * dt <= 1/2`.
pub fn simulate_blade(
    c: f64,
    delta: f64,
    nodes: usize,
    dt: f64,
    t_end: f64,
    substeps: usize,
    mode: usize,
) -> Result<Trajectory, SimError> {
    let s = c * c / delta.powi(4);
    let rhs = BladeRhs::new(nodes, s);
    let omega_max = (s * rhs.lambda_max()).sqrt();
    let h = dt / substeps.max(1) as f64;
    let omega_dt = omega_max * h;
    if omega_dt > RK4_STABILITY_LIMIT {
        let required = (omega_max * dt / RK4_STABILITY_LIMIT).ceil() as usize;
        return Err(SimError::StabilityViolation {
            omega_dt,
            limit: RK4_STABILITY_LIMIT,
            required_substeps: required,
        });
    }
    let l = nodes as f64 * delta;
    let sampled: Vec<f64> = (0..nodes)
        .map(|j| cantilever_mode((j + 1) as f64 * delta / l, mode))
        .collect();
    let eig = rhs.operator().symmetric_eigen();
    let shape = DVector::from_column_slice(&sampled);
    let mut x0 = DVector::zeros(nodes);
    for k in 0..nodes {
        let omega = (s * eig.eigenvalues[k].max(0.0)).sqrt();
        if omega * dt <= 0.5 {
            let phi = eig.eigenvectors.column(k);
            x0 += phi * phi.dot(&shape);
        }
    }
    let v0 = vec![0.0; nodes];
    rk4_integrate(&rhs, x0.as_slice(), &v0, dt, t_end, substeps, None)
}

/// Noise model: i.i.d. Gaussian perturbation per channel, with standard
/// deviation `percent/100` of that channel's empirical standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    pub percent: f64,
    pub seed: u64,
}

/// Population standard deviation of one matrix row.
fn row_stddev(mat: &DMatrix<f64>, i: usize) -> f64 {
    let n = mat.ncols() as f64;
    let mean = mat.row(i).iter().sum::<f64>() / n;
    (mat.row(i).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Adds seeded Gaussian noise to the position and velocity channels.
/// Forcing channels are treated as known inputs and left untouched.
/// A zero level returns the data unchanged without consuming randomness.
pub fn add_noise(tr: &Trajectory, spec: NoiseSpec) -> Trajectory {
    if spec.percent == 0.0 {
        return tr.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = tr.clone();
    for mat in [&mut out.x, &mut out.v] {
        for i in 0..mat.nrows() {
            let sigma = spec.percent / 100.0 * row_stddev(mat, i);
            if sigma == 0.0 {
                continue;
            }
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for j in 0..mat.ncols() {
                mat[(i, j)] += normal.sample(&mut rng);
            }
        }
    }
    out
}
