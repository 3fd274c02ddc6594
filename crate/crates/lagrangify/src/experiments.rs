//! Benchmark presets, end-to-end pipeline runs, and study drivers.
//!
//! Each preset bundles a reference system with the sampling grid, candidate
//! dictionary and solver knobs that recover it from one trajectory. On top
//! of the single-run benchmark sit drivers for noise robustness, long
//! horizon prediction, unseen initial conditions, and scaled-up chains.

use crate::derive::{
    equations_of_motion, hamiltonian, hamiltonian_error, peak_to_peak_relative, DeriveError,
};
use crate::dictionary::{build_dictionary, DictError, DictionarySpec, DiffOrder};
use crate::discover::{
    discover_coords, lagrangian_error, DiscoverError, DiscoverOptions, DiscoveredLagrangian,
};
use crate::expr::{EvalError, Expr};
use crate::io::IoError;
use crate::regress::StlsqOptions;
use crate::sim::{
    add_noise, blade_stencils, rk4_integrate, simulate_blade, simulate_wave, ChainRhs, LinearRhs,
    NoiseSpec, PendulumRhs, Rhs, SimError, Trajectory,
};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::time::Instant;
use thiserror::Error;

/// Seed used by the study drivers when the caller does not supply one.
pub const DEFAULT_SEED: u64 = 0x4c61_6772;

/// Noise levels of the standard robustness study, in percent.
pub const NOISE_LEVELS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

/// Systems exercised by the standard robustness study.
pub const NOISE_PRESETS: [PresetName; 3] =
    [PresetName::HarmonicFree, PresetName::ThreeDof, PresetName::Triatomic];

/// Identifies one of the built-in benchmark systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetName {
    HarmonicFree,
    HarmonicForced,
    Pendulum,
    ThreeDof,
    Triatomic,
    TransversalWave,
    BladeFlexion,
}

impl PresetName {
    /// All built-in benchmarks in canonical order.
    pub const ALL: [PresetName; 7] = [
        PresetName::HarmonicFree,
        PresetName::HarmonicForced,
        PresetName::Pendulum,
        PresetName::ThreeDof,
        PresetName::Triatomic,
        PresetName::TransversalWave,
        PresetName::BladeFlexion,
    ];

    /// Kebab-case name used in files and on the command line.
    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::HarmonicFree => "harmonic-free",
            PresetName::HarmonicForced => "harmonic-forced",
            PresetName::Pendulum => "pendulum",
            PresetName::ThreeDof => "three-dof",
            PresetName::Triatomic => "triatomic",
            PresetName::TransversalWave => "transversal-wave",
            PresetName::BladeFlexion => "blade-flexion",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PresetName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = PresetName::ALL.iter().map(|p| p.as_str()).collect();
                format!("unknown preset '{s}'; expected one of {}", names.join(", "))
            })
    }
}

/// Reference dynamics behind a preset, with its initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SystemSpec {
    /// `x'' = -A x (+ f)`; a sinusoidal drive on the first coordinate when
    /// `forcing_amplitude` is set, recorded as a forcing channel.
    Linear {
        matrix: Vec<Vec<f64>>,
        x0: Vec<f64>,
        v0: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        forcing_amplitude: Option<f64>,
    },
    /// Plane pendulum `x'' = -(g/l) sin(x)`.
    Pendulum { g_over_l: f64, x0: f64, v0: f64 },
    /// Free chain of point masses joined by identical springs; node masses
    /// are the preset's weight vector.
    Chain { k: f64, x0: Vec<f64>, v0: Vec<f64> },
    /// Semi-discrete string with free ends released from a cosine shape.
    Wave { c: f64, delta: f64, nodes: usize },
    /// Clamped-free bending chain released from one cantilever mode.
    Blade { c: f64, delta: f64, nodes: usize, mode: usize },
}

impl SystemSpec {
    /// Number of coordinates the system produces.
    pub fn dim(&self) -> usize {
        match self {
            SystemSpec::Linear { matrix, .. } => matrix.len(),
            SystemSpec::Pendulum { .. } => 1,
            SystemSpec::Chain { x0, .. } => x0.len(),
            SystemSpec::Wave { nodes, .. } | SystemSpec::Blade { nodes, .. } => *nodes,
        }
    }
}

/// One ready-to-run benchmark: system, sampling grid, dictionary, solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPreset {
    pub name: PresetName,
    /// Short rationale for the recorded knobs.
    pub comment: String,
    pub system: SystemSpec,
    /// Recording interval of the training data.
    pub dt: f64,
    pub t_end: f64,
    /// Internal integration steps per recorded sample.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub dict: DictionarySpec,
    /// Sparsity threshold handed to the sequential solver.
    pub lambda: f64,
    pub diff_order: DiffOrder,
    /// Rescale candidate columns to unit RMS before thresholding.
    pub column_scaling: bool,
    /// Relative singular value cutoff of the refit solves; zero keeps the
    /// plain ridge solve.
    #[serde(default)]
    pub svd_cutoff: f64,
    /// Inclusive coordinate range handed to discovery; `None` means all.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub discover_coords: Option<(usize, usize)>,
    /// Mass of each coordinate, used to weight the assembled total; empty
    /// means unit masses.
    #[serde(default)]
    pub masses: Vec<f64>,
}

fn default_substeps() -> usize {
    1
}

impl BenchmarkPreset {
    /// The frozen configuration of a built-in benchmark.
    pub fn builtin(name: PresetName) -> BenchmarkPreset {
        match name {
            PresetName::HarmonicFree => BenchmarkPreset {
                name,
                comment: "Stiffness 500 on unit mass sampled at 1 kHz for 1 s. \
                          Original-unit threshold: the stiffness reads 500 while \
                          noise-driven pickups on the energy-shell aliases stay \
                          small in these units; lambda 50 separates them across \
                          the noise ladder. The SVD cutoff keeps the on-shell \
                          degeneracies from amplifying into the iterates."
                    .into(),
                system: SystemSpec::Linear {
                    matrix: vec![vec![500.0]],
                    x0: vec![1.0],
                    v0: vec![0.0],
                    forcing_amplitude: None,
                },
                dt: 1e-3,
                t_end: 1.0,
                substeps: 1,
                dict: dict_single_dof(false),
                lambda: 50.0,
                diff_order: DiffOrder::Two,
                column_scaling: false,
                svd_cutoff: 1e-2,
                discover_coords: None,
                masses: vec![1.0],
            },
            PresetName::HarmonicForced => BenchmarkPreset {
                name,
                comment: "Mass 10 under a unit mass-normalized sinusoidal drive, \
                          sampled at 2 kHz for 2 s so the beat between drive and \
                          natural frequency is covered. The drive coupling has a \
                          small rescaled coefficient, so the threshold drops to 1."
                    .into(),
                system: SystemSpec::Linear {
                    matrix: vec![vec![500.0]],
                    x0: vec![1.0],
                    v0: vec![0.0],
                    forcing_amplitude: Some(1.0),
                },
                dt: 5e-4,
                t_end: 2.0,
                substeps: 1,
                dict: dict_single_dof(true),
                lambda: 1.0,
                diff_order: DiffOrder::Two,
                column_scaling: true,
                svd_cutoff: 0.0,
                discover_coords: None,
                masses: vec![10.0],
            },
            PresetName::Pendulum => BenchmarkPreset {
                name,
                comment: "Released from 0.5 rad and sampled at 1 kHz for 10 s; the \
                          long window separates cos(x) from its small-angle \
                          polynomial shadows. Rescaled threshold window is wide, \
                          lambda 1 sits inside it."
                    .into(),
                system: SystemSpec::Pendulum { g_over_l: 9.81, x0: 0.5, v0: 0.0 },
                dt: 1e-3,
                t_end: 10.0,
                substeps: 1,
                dict: dict_single_dof(false),
                lambda: 1.0,
                diff_order: DiffOrder::Two,
                column_scaling: true,
                svd_cutoff: 0.0,
                discover_coords: None,
                masses: vec![1.0],
            },
            PresetName::ThreeDof => BenchmarkPreset {
                name,
                comment: "Three equal masses on a wall-anchored spring chain, \
                          released from a unit kick of the first mass; 1 kHz for \
                          1 s covers all three modes. Original-unit threshold: \
                          every spring coefficient reads 500, so lambda 200 \
                          clears noise pickups while holding the full support. \
                          The SVD cutoff suppresses the on-shell polynomial \
                          degeneracies of each coordinate."
                    .into(),
                system: SystemSpec::Linear {
                    matrix: vec![
                        vec![1000.0, -500.0, 0.0],
                        vec![-500.0, 1000.0, -500.0],
                        vec![0.0, -500.0, 500.0],
                    ],
                    x0: vec![1.0, 0.0, 0.0],
                    v0: vec![0.0, 0.0, 0.0],
                    forcing_amplitude: None,
                },
                dt: 1e-3,
                t_end: 1.0,
                substeps: 1,
                dict: dict_chain_3dof(),
                lambda: 200.0,
                diff_order: DiffOrder::Two,
                column_scaling: false,
                svd_cutoff: 1e-2,
                discover_coords: None,
                masses: vec![10.0, 10.0, 10.0],
            },
            PresetName::Triatomic => BenchmarkPreset {
                name,
                comment: "Light-heavy-light molecule (masses 1, 2, 1) with bond \
                          stiffness 1870, released from a unit stretch of one \
                          outer atom. The stiffer frequencies need the \
                          fourth-order time stencil. Original-unit threshold: \
                          bond terms read 1870 (outer) and 935 (heavy middle), \
                          so lambda 250 keeps both while rejecting pickups; the \
                          wider SVD cutoff tames the offset-broken parities."
                    .into(),
                system: SystemSpec::Chain {
                    k: 1870.0,
                    x0: vec![1.0, 0.0, 0.0],
                    v0: vec![0.0, 0.0, 0.0],
                },
                dt: 1e-3,
                t_end: 1.0,
                substeps: 1,
                dict: dict_chain_3dof(),
                lambda: 250.0,
                diff_order: DiffOrder::Four,
                column_scaling: false,
                svd_cutoff: 2e-2,
                discover_coords: None,
                masses: vec![1.0, 2.0, 1.0],
            },
            PresetName::TransversalWave => BenchmarkPreset {
                name,
                comment: "50-node string, c = 25, spacing 0.01, released from one \
                          cosine period and recorded at 10 kHz. Four internal \
                          steps per sample keep the stiffest resolved mode on the \
                          recorded grid accurate; the eighth-order stencil keeps \
                          its differentiation bias below the fit residual."
                    .into(),
                system: SystemSpec::Wave { c: 25.0, delta: 0.01, nodes: 50 },
                dt: 1e-4,
                t_end: 1.0,
                substeps: 4,
                dict: dict_wave(50),
                lambda: 1.0e4,
                diff_order: DiffOrder::Eight,
                column_scaling: true,
                svd_cutoff: 0.0,
                discover_coords: None,
                masses: Vec::new(),
            },
            PresetName::BladeFlexion => BenchmarkPreset {
                name,
                comment: "50-node clamped bending chain released from its first \
                          cantilever mode, 1 kHz for 2 s. Discovery keeps the 40 \
                          interior coordinates: near the wall the quadratic mode \
                          shape makes junk bases nearly collinear with the \
                          curvature bases, and at the free end the curvature \
                          columns vanish, so both ends are excluded from the \
                          aggregate."
                    .into(),
                system: SystemSpec::Blade { c: 1.0, delta: 0.01, nodes: 50, mode: 1 },
                dt: 1e-3,
                t_end: 2.0,
                substeps: 50,
                dict: dict_blade(50),
                lambda: 300.0,
                diff_order: DiffOrder::Eight,
                column_scaling: true,
                svd_cutoff: 0.0,
                discover_coords: Some((7, 46)),
                masses: Vec::new(),
            },
        }
    }

    /// Number of generalized coordinates.
    pub fn coords(&self) -> usize {
        self.dict.coords
    }

    /// Coordinates handed to discovery, in order.
    pub fn discover_set(&self) -> Vec<usize> {
        match self.discover_coords {
            Some((lo, hi)) => (lo..=hi).collect(),
            None => (0..self.coords()).collect(),
        }
    }

    /// Assembly weights: the recorded masses, or unit weights when empty.
    pub fn weights(&self) -> Vec<f64> {
        if self.masses.is_empty() {
            vec![1.0; self.coords()]
        } else {
            self.masses.clone()
        }
    }

    /// Solver options implied by the preset.
    pub fn discover_options(&self) -> DiscoverOptions {
        DiscoverOptions {
            stlsq: StlsqOptions {
                lambda: self.lambda,
                column_scaling: self.column_scaling,
                svd_cutoff: self.svd_cutoff,
                ..StlsqOptions::default()
            },
            diff_order: self.diff_order,
            ..DiscoverOptions::default()
        }
    }

    /// Checks internal consistency of (possibly hand-written) preset data.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let m = self.coords();
        let bad = |detail: String| Err(ExperimentError::BadInput { detail });
        if self.system.dim() != m {
            return bad(format!(
                "system has {} coordinates but the dictionary expects {m}",
                self.system.dim()
            ));
        }
        if let SystemSpec::Linear { matrix, x0, v0, .. } = &self.system {
            if matrix.iter().any(|row| row.len() != matrix.len()) {
                return bad("stiffness matrix is not square".into());
            }
            if x0.len() != matrix.len() || v0.len() != matrix.len() {
                return bad("initial state does not match the stiffness matrix".into());
            }
        }
        if let SystemSpec::Chain { x0, v0, .. } = &self.system {
            if v0.len() != x0.len() {
                return bad("initial velocity does not match the initial position".into());
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite() && self.t_end > self.dt) {
            return bad("time grid must satisfy 0 < dt < t_end".into());
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive and finite".into());
        }
        if !(0.0..1.0).contains(&self.svd_cutoff) {
            return bad("svd_cutoff must lie in [0, 1)".into());
        }
        if !self.masses.is_empty() {
            if self.masses.len() != m {
                return bad(format!("expected {m} masses, got {}", self.masses.len()));
            }
            if self.masses.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
                return bad("masses must be positive and finite".into());
            }
        }
        if let Some((lo, hi)) = self.discover_coords {
            if lo > hi || hi >= m {
                return bad(format!("discover range ({lo}, {hi}) outside 0..{m}"));
            }
        }
        Ok(())
    }

    /// Parses a preset from JSON and validates it.
    pub fn from_json(json: &str) -> Result<BenchmarkPreset, ExperimentError> {
        let preset: BenchmarkPreset =
            serde_json::from_str(json).map_err(|e| ExperimentError::BadInput {
                detail: format!("preset JSON: {e}"),
            })?;
        preset.validate()?;
        Ok(preset)
    }

    /// Serializes the preset to pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("presets always serialize")
    }
}

fn dict_single_dof(forcing: bool) -> DictionarySpec {
    DictionarySpec {
        coords: 1,
        poly_degree: 5,
        cross_terms: true,
        harmonics: true,
        velocity_harmonics: true,
        forcing_coupling: forcing,
        ..DictionarySpec::default()
    }
}

fn dict_chain_3dof() -> DictionarySpec {
    DictionarySpec {
        coords: 3,
        poly_degree: 5,
        harmonics: true,
        pairwise_differences: true,
        diff_poly_degree: 5,
        ..DictionarySpec::default()
    }
}

fn dict_wave(nodes: usize) -> DictionarySpec {
    DictionarySpec {
        coords: nodes,
        poly_degree: 2,
        pairwise_differences: true,
        diff_poly_degree: 2,
        diff_window: Some(1),
        ..DictionarySpec::default()
    }
}

fn dict_blade(nodes: usize) -> DictionarySpec {
    DictionarySpec {
        coords: nodes,
        poly_degree: 2,
        curvature_differences: true,
        diff_poly_degree: 2,
        ..DictionarySpec::default()
    }
}

/// Study failure, wrapping the stage that raised it.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dict(#[from] DictError),
    #[error(transparent)]
    Discover(#[from] DiscoverError),
    #[error(transparent)]
    Derive(#[from] DeriveError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("invalid input: {detail}")]
    BadInput { detail: String },
    #[error("study '{study}' does not apply to preset '{preset}'")]
    Unsupported { study: String, preset: String },
    #[error("discovered structure does not generalize: {detail}")]
    TemplateMismatch { detail: String },
}

/// Simulates a preset's training trajectory.
pub fn simulate(preset: &BenchmarkPreset) -> Result<Trajectory, SimError> {
    match &preset.system {
        SystemSpec::Linear { matrix, x0, v0, forcing_amplitude } => {
            let n = matrix.len();
            let a = DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
            let rhs = LinearRhs { a, forced: forcing_amplitude.is_some() };
            match forcing_amplitude {
                Some(amp) => {
                    let amp = *amp;
                    let drive = move |t: f64, out: &mut [f64]| {
                        out.fill(0.0);
                        out[0] = amp * (2.0 * std::f64::consts::PI * t).sin();
                    };
                    rk4_integrate(
                        &rhs,
                        x0,
                        v0,
                        preset.dt,
                        preset.t_end,
                        preset.substeps,
                        Some(&drive),
                    )
                }
                None => {
                    rk4_integrate(&rhs, x0, v0, preset.dt, preset.t_end, preset.substeps, None)
                }
            }
        }
        SystemSpec::Pendulum { g_over_l, x0, v0 } => {
            let rhs = PendulumRhs { g_over_l: *g_over_l };
            rk4_integrate(&rhs, &[*x0], &[*v0], preset.dt, preset.t_end, preset.substeps, None)
        }
        SystemSpec::Chain { k, x0, v0 } => {
            let rhs = ChainRhs { k: *k, masses: preset.weights() };
            rk4_integrate(&rhs, x0, v0, preset.dt, preset.t_end, preset.substeps, None)
        }
        SystemSpec::Wave { c, delta, nodes } => {
            simulate_wave(*c, *delta, *nodes, preset.dt, preset.t_end, preset.substeps)
        }
        SystemSpec::Blade { c, delta, nodes, mode } => {
            simulate_blade(*c, *delta, *nodes, preset.dt, preset.t_end, preset.substeps, *mode)
        }
    }
}

/// Closed-form reference for a preset.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub lagrangian: Expr,
    pub hamiltonian: Expr,
    /// Expected support labels per discovered coordinate, aligned with
    /// [`BenchmarkPreset::discover_set`] and in dictionary order.
    pub supports: Vec<Vec<String>>,
}

/// Builds the closed-form reference of a preset from its system constants.
pub fn ground_truth(preset: &BenchmarkPreset) -> GroundTruth {
    let w = preset.weights();
    let mut kinetic: Vec<Expr> =
        w.iter().enumerate().map(|(i, &wi)| half_sq(wi, Expr::v(i))).collect();
    let mut potential: Vec<Expr> = Vec::new();
    let mut drive: Vec<Expr> = Vec::new();

    match &preset.system {
        SystemSpec::Linear { matrix, forcing_amplitude, .. } => {
            let n = matrix.len();
            for i in 0..n {
                for j in 0..n {
                    let c = 0.5 * w[i] * matrix[i][j];
                    if c != 0.0 {
                        potential.push(Expr::scaled(
                            c,
                            Expr::product(vec![Expr::x(i), Expr::x(j)]),
                        ));
                    }
                }
            }
            if forcing_amplitude.is_some() {
                // The recorded channel already carries the mass-normalized
                // drive, so the physical work term is just w * x * f.
                drive.push(Expr::scaled(
                    w[0],
                    Expr::product(vec![Expr::x(0), Expr::forcing(0)]),
                ));
            }
        }
        SystemSpec::Pendulum { g_over_l, .. } => {
            potential.push(Expr::scaled(-w[0] * g_over_l, Expr::cos(Expr::x(0))));
        }
        SystemSpec::Chain { k, .. } => {
            for i in 0..preset.coords() - 1 {
                potential.push(half_sq(*k, neighbor_diff(i)));
            }
        }
        SystemSpec::Wave { c, delta, nodes } => {
            let q = c * c / (delta * delta);
            for i in 0..nodes - 1 {
                potential.push(half_sq(q, neighbor_diff(i)));
            }
        }
        SystemSpec::Blade { c, delta, nodes, .. } => {
            let s = c * c / delta.powi(4);
            for row in blade_stencils(*nodes) {
                potential.push(half_sq(s, stencil_expr(&row)));
            }
        }
    }

    let mut l_terms = kinetic.clone();
    l_terms.extend(potential.iter().map(|p| Expr::scaled(-1.0, p.clone())));
    l_terms.extend(drive.iter().cloned());
    let mut h_terms = std::mem::take(&mut kinetic);
    h_terms.extend(potential.into_iter());
    h_terms.extend(drive.into_iter().map(|d| Expr::scaled(-1.0, d)));

    GroundTruth {
        lagrangian: Expr::sum(l_terms).simplify(),
        hamiltonian: Expr::sum(h_terms).simplify(),
        supports: truth_supports(preset),
    }
}

fn half_sq(c: f64, e: Expr) -> Expr {
    Expr::scaled(0.5 * c, Expr::power(e, 2))
}

fn neighbor_diff(i: usize) -> Expr {
    Expr::sum(vec![Expr::x(i + 1), Expr::scaled(-1.0, Expr::x(i))])
}

fn stencil_expr(row: &[(usize, f64)]) -> Expr {
    Expr::sum(row.iter().map(|&(j, c)| Expr::scaled(c, Expr::x(j))).collect())
}

fn diff_label(i: usize) -> String {
    format!("(x{} - x{})^2", i + 1, i)
}

fn curvature_label(center: usize) -> String {
    format!("(x{} + x{} - 2*x{})^2", center - 1, center + 1, center)
}

fn truth_supports(preset: &BenchmarkPreset) -> Vec<Vec<String>> {
    match preset.name {
        PresetName::HarmonicFree => vec![vec!["x0^2".into()]],
        PresetName::HarmonicForced => vec![vec!["x0^2".into(), "x0*f0".into()]],
        PresetName::Pendulum => vec![vec!["cos(x0)".into()]],
        PresetName::ThreeDof => vec![
            vec!["x0^2".into(), diff_label(0)],
            vec![diff_label(0), diff_label(1)],
            vec![diff_label(1)],
        ],
        PresetName::Triatomic => vec![
            vec![diff_label(0)],
            vec![diff_label(0), diff_label(1)],
            vec![diff_label(1)],
        ],
        PresetName::TransversalWave => {
            let m = preset.coords();
            (0..m)
                .map(|i| {
                    let mut labels = Vec::new();
                    if i > 0 {
                        labels.push(diff_label(i - 1));
                    }
                    if i + 1 < m {
                        labels.push(diff_label(i));
                    }
                    labels
                })
                .collect()
        }
        PresetName::BladeFlexion => preset
            .discover_set()
            .iter()
            .map(|&i| vec![curvature_label(i - 1), curvature_label(i), curvature_label(i + 1)])
            .collect(),
    }
}

/// Sparse model recovered for one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordSupport {
    pub coord: usize,
    /// Labels of the surviving bases, in dictionary order.
    pub labels: Vec<String>,
    /// Coefficients aligned with `labels`.
    pub theta: Vec<f64>,
    pub el_residual: f64,
}

/// One recovered physical parameter with its reference value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub name: String,
    pub truth: f64,
    pub estimate: f64,
    pub rel_error_percent: f64,
}

/// Wall-clock stage times in milliseconds. Kept out of serialized reports
/// so persisted output is reproducible bit for bit.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub simulate_ms: f64,
    pub discover_ms: f64,
    pub derive_ms: f64,
    pub resimulate_ms: f64,
}

/// Everything one benchmark run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub preset: PresetName,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noise: Option<NoiseSpec>,
    /// `None` on success; diagnostics of the failing stage otherwise.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
    pub supports: Vec<CoordSupport>,
    /// Whether the recovered structure matches the reference exactly, with
    /// no extra and no missing terms on any coordinate.
    pub supports_exact: bool,
    pub params: Vec<ParamReport>,
    pub lagrangian: Option<String>,
    pub lagrangian_error_percent: Option<f64>,
    pub hamiltonian: Option<String>,
    pub hamiltonian_error_percent: Option<f64>,
    /// Peak-to-peak energy variation of the re-simulated model, percent of
    /// mean; only for conservative systems.
    pub hamiltonian_drift_percent: Option<f64>,
    pub resimulation_error_percent: Option<f64>,
    #[serde(skip)]
    pub runtime: StageTimes,
}

impl BenchmarkReport {
    fn failed(preset: PresetName, noise: Option<NoiseSpec>, error: &ExperimentError) -> Self {
        BenchmarkReport {
            preset,
            noise,
            failure: Some(error.to_string()),
            supports: Vec::new(),
            supports_exact: false,
            params: Vec::new(),
            lagrangian: None,
            lagrangian_error_percent: None,
            hamiltonian: None,
            hamiltonian_error_percent: None,
            hamiltonian_drift_percent: None,
            resimulation_error_percent: None,
            runtime: StageTimes::default(),
        }
    }
}

/// Serializes a report to pretty JSON (stage times excluded).
pub fn report_to_json(report: &BenchmarkReport) -> String {
    serde_json::to_string_pretty(report).expect("reports always serialize")
}

/// Parses a report from JSON.
pub fn report_from_json(json: &str) -> Result<BenchmarkReport, IoError> {
    Ok(serde_json::from_str(json)?)
}

/// Runs a built-in benchmark end to end.
///
/// A failing stage is recorded in the report's `failure` field instead of
/// propagating, so a suite of runs always yields a full set of reports.
pub fn run_benchmark(name: PresetName, noise: Option<NoiseSpec>) -> BenchmarkReport {
    run_preset(&BenchmarkPreset::builtin(name), noise)
}

/// Runs an arbitrary preset end to end; see [`run_benchmark`].
pub fn run_preset(preset: &BenchmarkPreset, noise: Option<NoiseSpec>) -> BenchmarkReport {
    match try_run(preset, noise) {
        Ok(report) => report,
        Err(error) => BenchmarkReport::failed(preset.name, noise, &error),
    }
}

fn elapsed_ms(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}

fn matrix_column(mat: &DMatrix<f64>, j: usize) -> Vec<f64> {
    mat.column(j).iter().copied().collect()
}

fn try_run(
    preset: &BenchmarkPreset,
    noise: Option<NoiseSpec>,
) -> Result<BenchmarkReport, ExperimentError> {
    preset.validate()?;
    let mut runtime = StageTimes::default();

    let t0 = Instant::now();
    let clean = simulate(preset)?;
    let data = match noise {
        Some(spec) => add_noise(&clean, spec),
        None => clean.clone(),
    };
    runtime.simulate_ms = elapsed_ms(t0);

    let t0 = Instant::now();
    let dict = build_dictionary(&preset.dict)?;
    let mut opts = preset.discover_options();
    if noise.is_some() {
        // Noise inflates the Euler-Lagrange residual roughly in proportion
        // to the noise level even when the recovered structure is right, so
        // the expressiveness check only applies to clean data; noisy runs
        // are judged on the recovered structure instead.
        opts.residual_tolerance = f64::INFINITY;
    }
    let coords = preset.discover_set();
    let found = discover_coords(&data, &dict, &coords, &opts)?;
    let supports = collect_supports(&found);
    runtime.discover_ms = elapsed_ms(t0);

    let truth = ground_truth(preset);
    let supports_exact = supports.iter().map(|s| &s.labels).eq(truth.supports.iter());
    let params = extract_params(preset, &truth.supports, &supports);

    let t0 = Instant::now();
    let fitted = fitted_lagrangian(preset, &found, &params)?;
    let lagrangian_error_percent =
        Some(lagrangian_error(&fitted, &truth.lagrangian, &clean)? * 100.0);
    let h = hamiltonian(&fitted);
    let hamiltonian_error_percent =
        Some(hamiltonian_error(&h, &truth.hamiltonian, &clean)? * 100.0);
    runtime.derive_ms = elapsed_ms(t0);

    let t0 = Instant::now();
    let eom = equations_of_motion(&fitted, preset.coords())?;
    let compiled = eom.compile()?;
    let x0 = matrix_column(&clean.x, 0);
    let v0 = matrix_column(&clean.v, 0);
    let resim = integrate_model(preset, &compiled, &x0, &v0, preset.dt, preset.t_end)?;
    let resimulation_error_percent = Some(relative_l2(&resim.x, &clean.x) * 100.0);
    let hamiltonian_drift_percent = if conservative(preset) {
        Some(peak_to_peak_relative(&h.series(&resim)?) * 100.0)
    } else {
        None
    };
    runtime.resimulate_ms = elapsed_ms(t0);

    Ok(BenchmarkReport {
        preset: preset.name,
        noise,
        failure: None,
        supports,
        supports_exact,
        params,
        lagrangian: Some(fitted.render()),
        lagrangian_error_percent,
        hamiltonian: Some(h.expr.render()),
        hamiltonian_error_percent,
        hamiltonian_drift_percent,
        resimulation_error_percent,
        runtime,
    })
}

fn conservative(preset: &BenchmarkPreset) -> bool {
    !matches!(preset.system, SystemSpec::Linear { forcing_amplitude: Some(_), .. })
}

fn collect_supports(found: &DiscoveredLagrangian) -> Vec<CoordSupport> {
    found
        .dofs
        .iter()
        .map(|dof| CoordSupport {
            coord: dof.coord,
            labels: dof.support_labels(&found.dict).iter().map(|s| s.to_string()).collect(),
            theta: dof.solution.support.iter().map(|&k| dof.solution.theta[k]).collect(),
            el_residual: dof.el_residual,
        })
        .collect()
}

fn theta_of(supports: &[CoordSupport], coord: usize, label: &str) -> Option<f64> {
    let s = supports.iter().find(|s| s.coord == coord)?;
    let k = s.labels.iter().position(|l| l == label)?;
    Some(s.theta[k])
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Collects the coefficients of every expected (coordinate, basis) pair
/// that actually survived, optionally weighted by the coordinate's mass.
fn expected_thetas(
    preset: &BenchmarkPreset,
    truth_supports: &[Vec<String>],
    supports: &[CoordSupport],
    weighted: bool,
) -> Vec<f64> {
    let w = preset.weights();
    let mut vals = Vec::new();
    for (pos, &coord) in preset.discover_set().iter().enumerate() {
        for label in &truth_supports[pos] {
            if let Some(theta) = theta_of(supports, coord, label) {
                vals.push(if weighted { w[coord] * theta } else { theta });
            }
        }
    }
    vals
}

fn extract_params(
    preset: &BenchmarkPreset,
    truth_supports: &[Vec<String>],
    supports: &[CoordSupport],
) -> Vec<ParamReport> {
    let mut out = Vec::new();
    let mut push = |name: &str, truth: f64, estimate: Option<f64>| {
        if let Some(estimate) = estimate {
            let rel_error_percent = ((estimate - truth) / truth).abs() * 100.0;
            out.push(ParamReport { name: name.into(), truth, estimate, rel_error_percent });
        }
    };
    match (preset.name, &preset.system) {
        (PresetName::HarmonicFree, SystemSpec::Linear { matrix, .. }) => {
            push("k/m", matrix[0][0], theta_of(supports, 0, "x0^2"));
        }
        (PresetName::HarmonicForced, SystemSpec::Linear { matrix, forcing_amplitude, .. }) => {
            push("k/m", matrix[0][0], theta_of(supports, 0, "x0^2"));
            // The basis enters the per-coordinate model as -theta/2 * x*f,
            // so the recovered drive amplitude is -theta/2.
            let amp = forcing_amplitude.unwrap_or(1.0);
            push("F/m", amp, theta_of(supports, 0, "x0*f0").map(|t| -t / 2.0));
        }
        (PresetName::Pendulum, SystemSpec::Pendulum { g_over_l, .. }) => {
            push("g/l", *g_over_l, theta_of(supports, 0, "cos(x0)").map(|t| -t / 2.0));
        }
        (PresetName::ThreeDof, SystemSpec::Linear { matrix, .. }) => {
            let vals = expected_thetas(preset, truth_supports, supports, false);
            push("k/m", 0.5 * matrix[0][0], mean(&vals));
        }
        (PresetName::Triatomic, SystemSpec::Chain { k, .. }) => {
            let vals = expected_thetas(preset, truth_supports, supports, true);
            push("k", *k, mean(&vals));
        }
        (PresetName::TransversalWave, SystemSpec::Wave { c, delta, .. }) => {
            let vals = expected_thetas(preset, truth_supports, supports, false);
            push("c", *c, mean(&vals).map(|q| delta * q.sqrt()));
        }
        (PresetName::BladeFlexion, SystemSpec::Blade { c, delta, .. }) => {
            let vals = expected_thetas(preset, truth_supports, supports, false);
            let s_hat = mean(&vals);
            push("s", c * c / delta.powi(4), s_hat);
            push("c", *c, s_hat.map(|s| delta * delta * s.sqrt()));
        }
        _ => {}
    }
    out
}

/// The system Lagrangian implied by a run: the mass-weighted assembly, or
/// for the bending chain the curvature template filled with the aggregated
/// stiffness, since only interior coordinates are regressed there.
fn fitted_lagrangian(
    preset: &BenchmarkPreset,
    found: &DiscoveredLagrangian,
    params: &[ParamReport],
) -> Result<Expr, ExperimentError> {
    match preset.name {
        PresetName::BladeFlexion => {
            let s_hat = params
                .iter()
                .find(|p| p.name == "s")
                .map(|p| p.estimate)
                .ok_or_else(|| ExperimentError::TemplateMismatch {
                    detail: "no curvature stiffness recovered".into(),
                })?;
            Ok(blade_lagrangian(preset.coords(), s_hat))
        }
        _ => Ok(found.total(&preset.weights())?.expr),
    }
}

/// Bending-chain Lagrangian with one shared curvature stiffness:
/// `sum(v_i^2)/2 - (s/2) * sum(kappa_j^2)` over the clamped-free stencils.
pub fn blade_lagrangian(nodes: usize, s: f64) -> Expr {
    let mut terms: Vec<Expr> =
        (0..nodes).map(|i| Expr::scaled(0.5, Expr::power(Expr::v(i), 2))).collect();
    for row in blade_stencils(nodes) {
        terms.push(Expr::scaled(-0.5 * s, Expr::power(stencil_expr(&row), 2)));
    }
    Expr::sum(terms).simplify()
}

/// Integrates a fitted model on the preset's grid, re-applying the drive
/// for forced presets.
fn integrate_model(
    preset: &BenchmarkPreset,
    rhs: &dyn Rhs,
    x0: &[f64],
    v0: &[f64],
    record_dt: f64,
    t_end: f64,
) -> Result<Trajectory, SimError> {
    let substeps = model_substeps(preset, record_dt);
    match &preset.system {
        SystemSpec::Linear { forcing_amplitude: Some(amp), .. } => {
            let amp = *amp;
            let drive = move |t: f64, out: &mut [f64]| {
                out.fill(0.0);
                out[0] = amp * (2.0 * std::f64::consts::PI * t).sin();
            };
            rk4_integrate(rhs, x0, v0, record_dt, t_end, substeps, Some(&drive))
        }
        _ => rk4_integrate(rhs, x0, v0, record_dt, t_end, substeps, None),
    }
}

/// Internal steps per recorded sample needed to keep the preset's internal
/// step size when recording on a possibly coarser grid.
fn model_substeps(preset: &BenchmarkPreset, record_dt: f64) -> usize {
    let ratio = (record_dt / preset.dt).round().max(1.0) as usize;
    ratio * preset.substeps
}

/// Relative Frobenius distance `|a - truth| / |truth|` between two equally
/// shaped channel matrices.
pub fn relative_l2(a: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), truth.shape(), "relative_l2 needs equal shapes");
    let denom = truth.norm();
    if denom == 0.0 {
        return if (a - truth).norm() == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (a - truth).norm() / denom
}

/// Outcome of one noisy discovery run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCell {
    pub preset: PresetName,
    pub percent: f64,
    pub seed: u64,
    /// Whether the recovered structure matched the reference exactly; a
    /// run that errors out counts as incorrect.
    pub support_exact: bool,
    /// Lagrangian error on the clean evaluation points; only reported when
    /// the structure was exactly right.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lagrangian_error_percent: Option<f64>,
}

/// Deterministic per-system seed derived from the base seed.
fn preset_seed(base: u64, preset_index: usize) -> u64 {
    base ^ ((preset_index as u64) << 32)
}

/// Runs the noise robustness grid: every preset at every level. A system
/// keeps one seed across its levels, so raising the level rescales a common
/// noise realization and level-to-level comparisons are paired. Cells are
/// independent and run in parallel; the output order is presets-major
/// regardless of scheduling.
pub fn noise_study(presets: &[PresetName], levels: &[f64], base_seed: u64) -> Vec<NoiseCell> {
    let jobs: Vec<(usize, usize)> = (0..presets.len())
        .flat_map(|pi| (0..levels.len()).map(move |li| (pi, li)))
        .collect();
    jobs.par_iter()
        .map(|&(pi, li)| {
            let seed = preset_seed(base_seed, pi);
            let percent = levels[li];
            let report = run_benchmark(presets[pi], Some(NoiseSpec { percent, seed }));
            let support_exact = report.failure.is_none() && report.supports_exact;
            NoiseCell {
                preset: presets[pi],
                percent,
                seed,
                support_exact,
                lagrangian_error_percent: if support_exact {
                    report.lagrangian_error_percent
                } else {
                    None
                },
            }
        })
        .collect()
}

/// The standard robustness grid with the default seed.
pub fn standard_noise_study() -> Vec<NoiseCell> {
    noise_study(&NOISE_PRESETS, &NOISE_LEVELS, DEFAULT_SEED)
}

/// Long-horizon forecast of a fitted model against a fresh reference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub preset: PresetName,
    pub horizon: f64,
    pub record_dt: f64,
    pub substeps: usize,
    /// Largest pointwise error over all nodes and samples, in percent of
    /// the initial amplitude.
    pub max_abs_error_percent: f64,
    pub rel_l2_percent: f64,
    /// The same forecast integrated with twice the internal step; the gap
    /// to `max_abs_error_percent` isolates the integrator's contribution.
    pub doubled_step_max_abs_error_percent: f64,
    /// `(t, max-over-nodes |error|)` per sample, for plotting.
    pub error_series: Vec<(f64, f64)>,
}

/// Forecasts a preset far beyond its training window.
///
/// The model is rediscovered from the training trajectory, its equations of
/// motion are integrated for `horizon` seconds recording every `record_dt`,
/// and the reference system is integrated on the same grid with the same
/// internal step so the comparison isolates the identified coefficients.
/// `substeps` only needs to keep the stiffest mode inside the RK4 stability
/// region. A model that diverges surfaces as a non-finite integration
/// error.
pub fn perpetual_prediction(
    name: PresetName,
    horizon: f64,
    record_dt: f64,
    substeps: usize,
) -> Result<PredictionReport, ExperimentError> {
    let preset = BenchmarkPreset::builtin(name);
    let SystemSpec::Wave { c, delta, nodes } = preset.system else {
        return Err(ExperimentError::Unsupported {
            study: "perpetual-prediction".into(),
            preset: name.to_string(),
        });
    };
    if !(record_dt > 0.0 && horizon >= 4.0 * record_dt) || substeps == 0 {
        return Err(ExperimentError::BadInput {
            detail: "need record_dt > 0, substeps >= 1 and a horizon of at least 4 samples"
                .into(),
        });
    }

    let compiled = fit_model(&preset)?;
    let truth = simulate_wave(c, delta, nodes, record_dt, horizon, substeps)?;
    let x0 = matrix_column(&truth.x, 0);
    let v0 = matrix_column(&truth.v, 0);
    let forecast = rk4_integrate(&compiled, &x0, &v0, record_dt, horizon, substeps, None)?;
    let coarse =
        rk4_integrate(&compiled, &x0, &v0, record_dt, horizon, substeps.div_ceil(2), None)?;

    let amplitude = x0.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let error_series: Vec<(f64, f64)> = truth
        .t
        .iter()
        .enumerate()
        .map(|(n, &t)| {
            let worst = (0..nodes)
                .map(|i| (forecast.x[(i, n)] - truth.x[(i, n)]).abs())
                .fold(0.0f64, f64::max);
            (t, worst)
        })
        .collect();
    let max_abs = error_series.iter().fold(0.0f64, |a, &(_, e)| a.max(e));
    let coarse_max = (0..truth.len())
        .flat_map(|n| (0..nodes).map(move |i| (i, n)))
        .map(|(i, n)| (coarse.x[(i, n)] - truth.x[(i, n)]).abs())
        .fold(0.0f64, f64::max);

    Ok(PredictionReport {
        preset: name,
        horizon,
        record_dt,
        substeps,
        max_abs_error_percent: max_abs / amplitude * 100.0,
        rel_l2_percent: relative_l2(&forecast.x, &truth.x) * 100.0,
        doubled_step_max_abs_error_percent: coarse_max / amplitude * 100.0,
        error_series,
    })
}

/// Discovers a preset's model from clean training data and compiles its
/// equations of motion.
fn fit_model(preset: &BenchmarkPreset) -> Result<crate::derive::CompiledOdeSystem, ExperimentError> {
    let clean = simulate(preset)?;
    let dict = build_dictionary(&preset.dict)?;
    let found = discover_coords(&clean, &dict, &preset.discover_set(), &preset.discover_options())?;
    let supports = collect_supports(&found);
    let truth = ground_truth(preset);
    let params = extract_params(preset, &truth.supports, &supports);
    let fitted = fitted_lagrangian(preset, &found, &params)?;
    let eom = equations_of_motion(&fitted, preset.coords())?;
    Ok(eom.compile()?)
}

/// Forecast of a fitted model from an initial condition it never saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub preset: PresetName,
    pub description: String,
    pub horizon: f64,
    pub rel_l2_percent: f64,
    /// Largest pointwise error in percent of the unseen state's amplitude.
    pub max_abs_error_percent: f64,
}

/// Runs the canonical unseen-state study of a preset: the bending chain is
/// released from its third mode, the pendulum from a doubled amplitude.
pub fn zero_shot(name: PresetName) -> Result<ZeroShotReport, ExperimentError> {
    match name {
        PresetName::BladeFlexion => zero_shot_blade(3),
        PresetName::Pendulum => zero_shot_pendulum(1.0),
        _ => Err(ExperimentError::Unsupported {
            study: "zero-shot".into(),
            preset: name.to_string(),
        }),
    }
}

/// Integrates the bending-chain model, trained on the first mode only,
/// from another cantilever mode and compares against the reference system.
pub fn zero_shot_blade(mode: usize) -> Result<ZeroShotReport, ExperimentError> {
    let preset = BenchmarkPreset::builtin(PresetName::BladeFlexion);
    let SystemSpec::Blade { c, delta, nodes, .. } = preset.system else {
        unreachable!("builtin blade preset always carries a blade system");
    };
    let compiled = fit_model(&preset)?;
    let truth = simulate_blade(c, delta, nodes, preset.dt, preset.t_end, preset.substeps, mode)?;
    let x0 = matrix_column(&truth.x, 0);
    let v0 = matrix_column(&truth.v, 0);
    let forecast =
        rk4_integrate(&compiled, &x0, &v0, preset.dt, preset.t_end, preset.substeps, None)?;
    Ok(zero_shot_report(
        PresetName::BladeFlexion,
        format!("released from cantilever mode {mode}, trained on mode 1"),
        preset.t_end,
        &forecast,
        &truth,
    ))
}

/// Integrates the pendulum model from an unseen release angle and compares
/// against the reference dynamics over ten seconds.
pub fn zero_shot_pendulum(x0: f64) -> Result<ZeroShotReport, ExperimentError> {
    let preset = BenchmarkPreset::builtin(PresetName::Pendulum);
    let SystemSpec::Pendulum { g_over_l, .. } = preset.system else {
        unreachable!("builtin pendulum preset always carries a pendulum system");
    };
    let compiled = fit_model(&preset)?;
    let rhs = PendulumRhs { g_over_l };
    let truth =
        rk4_integrate(&rhs, &[x0], &[0.0], preset.dt, preset.t_end, preset.substeps, None)?;
    let forecast =
        rk4_integrate(&compiled, &[x0], &[0.0], preset.dt, preset.t_end, preset.substeps, None)?;
    Ok(zero_shot_report(
        PresetName::Pendulum,
        format!("released from {x0} rad, trained on 0.5 rad"),
        preset.t_end,
        &forecast,
        &truth,
    ))
}

fn zero_shot_report(
    preset: PresetName,
    description: String,
    horizon: f64,
    forecast: &Trajectory,
    truth: &Trajectory,
) -> ZeroShotReport {
    let amplitude = truth.x.column(0).iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let max_abs = (forecast.x.clone() - &truth.x).abs().max();
    ZeroShotReport {
        preset,
        description,
        horizon,
        rel_l2_percent: relative_l2(&forecast.x, &truth.x) * 100.0,
        max_abs_error_percent: max_abs / amplitude * 100.0,
    }
}

/// Translation-invariant nearest-neighbor unit read off a discovered chain:
/// alternating masses and one shared coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainTemplate {
    /// Mass of even-numbered atoms.
    pub light: f64,
    /// Mass of odd-numbered atoms.
    pub heavy: f64,
    /// Spring constant between neighbors, in physical units.
    pub coupling: f64,
}

/// Extracts the repeating unit from a discovered chain model.
///
/// Every coordinate must have selected exactly its neighbor-difference
/// bases, and the mass-weighted coefficients a shared bond implies from
/// both of its atoms must agree (the assembly enforces a 5% spread limit);
/// anything else refuses with [`ExperimentError::TemplateMismatch`].
pub fn extract_chain_template(
    found: &DiscoveredLagrangian,
    weights: &[f64],
) -> Result<ChainTemplate, ExperimentError> {
    let m = weights.len();
    if m < 3 || found.dofs.len() != m {
        return Err(ExperimentError::TemplateMismatch {
            detail: format!("need a full chain of at least 3 coordinates, got {}", m.min(found.dofs.len())),
        });
    }
    for (i, dof) in found.dofs.iter().enumerate() {
        let mut expected = Vec::new();
        if i > 0 {
            expected.push(diff_label(i - 1));
        }
        if i + 1 < m {
            expected.push(diff_label(i));
        }
        let got: Vec<String> =
            dof.support_labels(&found.dict).iter().map(|s| s.to_string()).collect();
        if got != expected {
            return Err(ExperimentError::TemplateMismatch {
                detail: format!(
                    "coordinate {i} selected [{}], expected its neighbor differences [{}]",
                    got.join(", "),
                    expected.join(", ")
                ),
            });
        }
    }
    let total = found.total(weights)?;
    let couplings: Vec<f64> = total.shared_terms.iter().map(|s| 2.0 * s.reconciled).collect();
    let coupling = mean(&couplings).ok_or_else(|| ExperimentError::TemplateMismatch {
        detail: "no shared bond terms in the assembled total".into(),
    })?;
    Ok(ChainTemplate { light: weights[0], heavy: weights[1], coupling })
}

/// A template scaled up to a longer chain, with its forecast quality.
#[derive(Debug, Clone)]
pub struct ChainStudy {
    /// Equations of motion of the scaled-up model.
    pub system: crate::derive::OdeSystem,
    /// The model's trajectory from a unit kick of the first atom.
    pub trajectory: Trajectory,
    /// Reference trajectory with the true parameters.
    pub truth: Trajectory,
    pub rel_l2_percent: f64,
}

/// True bond stiffness of the molecular chain benchmarks.
pub const CHAIN_TRUE_COUPLING: f64 = 1870.0;

/// Builds an `n_atoms` alternating chain from the template, derives its
/// equations of motion, and compares a forecast against the reference
/// chain with the true stiffness. `n_atoms = 3` reproduces the triatomic
/// benchmark geometry.
pub fn generalize_chain(
    template: &ChainTemplate,
    n_atoms: usize,
) -> Result<ChainStudy, ExperimentError> {
    if n_atoms < 3 {
        return Err(ExperimentError::TemplateMismatch {
            detail: format!("a chain needs at least 3 atoms, got {n_atoms}"),
        });
    }
    let masses: Vec<f64> = (0..n_atoms)
        .map(|i| if i % 2 == 0 { template.light } else { template.heavy })
        .collect();
    let mut terms: Vec<Expr> =
        masses.iter().enumerate().map(|(i, &w)| half_sq(w, Expr::v(i))).collect();
    for i in 0..n_atoms - 1 {
        terms.push(Expr::scaled(-1.0, half_sq(template.coupling, neighbor_diff(i))));
    }
    let lagrangian = Expr::sum(terms).simplify();
    let system = equations_of_motion(&lagrangian, n_atoms)?;
    let compiled = system.compile()?;

    let mut x0 = vec![0.0; n_atoms];
    x0[0] = 1.0;
    let v0 = vec![0.0; n_atoms];
    let (dt, t_end) = (1e-3, 1.0);
    let trajectory = rk4_integrate(&compiled, &x0, &v0, dt, t_end, 1, None)?;
    let reference = ChainRhs { k: CHAIN_TRUE_COUPLING, masses };
    let truth = rk4_integrate(&reference, &x0, &v0, dt, t_end, 1, None)?;
    let rel_l2_percent = relative_l2(&trajectory.x, &truth.x) * 100.0;
    Ok(ChainStudy { system, trajectory, truth, rel_l2_percent })
}

fn cell(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the flat benchmark summary: one row per recovered parameter with
/// the run's quality metrics alongside.
pub fn write_summary_csv<W: Write>(w: W, reports: &[BenchmarkReport]) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "preset",
        "parameter",
        "true_value",
        "estimate",
        "param_error_percent",
        "support_exact",
        "lagrangian_error_percent",
        "hamiltonian_error_percent",
        "hamiltonian_drift_percent",
        "resimulation_error_percent",
        "failure",
    ])?;
    for report in reports {
        let shared = [
            report.supports_exact.to_string(),
            cell(report.lagrangian_error_percent),
            cell(report.hamiltonian_error_percent),
            cell(report.hamiltonian_drift_percent),
            cell(report.resimulation_error_percent),
            report.failure.clone().unwrap_or_default(),
        ];
        let params: Vec<[String; 4]> = if report.params.is_empty() {
            vec![[String::new(), String::new(), String::new(), String::new()]]
        } else {
            report
                .params
                .iter()
                .map(|p| {
                    [
                        p.name.clone(),
                        p.truth.to_string(),
                        p.estimate.to_string(),
                        p.rel_error_percent.to_string(),
                    ]
                })
                .collect()
        };
        for param in params {
            let mut row = vec![report.preset.to_string()];
            row.extend(param);
            row.extend(shared.iter().cloned());
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Writes the noise robustness grid as flat CSV.
pub fn write_noise_csv<W: Write>(w: W, cells: &[NoiseCell]) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["preset", "noise_percent", "seed", "support_exact", "lagrangian_error_percent"])?;
    for c in cells {
        wtr.write_record([
            c.preset.to_string(),
            c.percent.to_string(),
            c.seed.to_string(),
            c.support_exact.to_string(),
            cell(c.lagrangian_error_percent),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes a `(t, error)` series as flat CSV for plotting.
pub fn write_error_series_csv<W: Write>(w: W, series: &[(f64, f64)]) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", "error"])?;
    for &(t, e) in series {
        wtr.write_record([t.to_string(), e.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
