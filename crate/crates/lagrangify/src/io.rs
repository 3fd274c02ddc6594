//! File formats: trajectory CSV, expression and preset JSON, reports.
//!
//! Trajectories travel as CSV with a `t,x0..,v0..[,f0..]` header; symbolic
//! expressions and dictionary specifications as JSON mirroring their
//! in-memory structure. Discovery results serialize to a single report
//! carrying rendered expressions next to the raw coefficients.

use crate::dictionary::{Dictionary, DictionarySpec};
use crate::discover::{DiscoveredLagrangian, SharedTerm, SystemLagrangian};
use crate::expr::{Expr, InvalidExpr};
use crate::sim::{Trajectory, TrajectoryError};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Serialization or validation failure.
#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("bad CSV header: {detail}")]
    BadHeader { detail: String },
    #[error("row {row}: expected {expected} fields, got {got}")]
    BadRow { row: usize, expected: usize, got: usize },
    #[error("row {row}, column {column}: {value:?} is not a number")]
    BadNumber { row: usize, column: String, value: String },
    #[error("no data rows")]
    Empty,
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    InvalidExpr(#[from] InvalidExpr),
}

/// Writes a trajectory as `t,x0..,v0..[,f0..]` CSV.
pub fn write_trajectory_csv<W: Write>(w: W, tr: &Trajectory) -> Result<(), IoError> {
    let m = tr.coords();
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((0..m).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("v{i}")));
    if tr.f.is_some() {
        header.extend((0..m).map(|i| format!("f{i}")));
    }
    wtr.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for n in 0..tr.len() {
        record.clear();
        record.push(tr.t[n].to_string());
        let (xs, vs, fs) = tr.sample(n);
        record.extend(xs.iter().map(f64::to_string));
        record.extend(vs.iter().map(f64::to_string));
        if let Some(fs) = fs {
            record.extend(fs.iter().map(f64::to_string));
        }
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a trajectory from `t,x0..,v0..[,f0..]` CSV.
pub fn read_trajectory_csv<R: Read>(r: R) -> Result<Trajectory, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> =
        rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let m = parse_header(&header)?;
    let has_f = header.len() == 1 + 3 * m;
    let width = header.len();

    let mut t = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); width - 1];
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let row = idx + 2; // header is line 1
        if record.len() != width {
            return Err(IoError::BadRow { row, expected: width, got: record.len() });
        }
        for (c, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| IoError::BadNumber {
                row,
                column: header[c].clone(),
                value: field.to_string(),
            })?;
            if c == 0 {
                t.push(value);
            } else {
                cols[c - 1].push(value);
            }
        }
    }
    if t.is_empty() {
        return Err(IoError::Empty);
    }

    let n = t.len();
    let matrix = |offset: usize| {
        DMatrix::from_fn(m, n, |i, j| cols[offset + i][j])
    };
    let x = matrix(0);
    let v = matrix(m);
    let f = has_f.then(|| matrix(2 * m));
    Ok(Trajectory::new(t, x, v, f)?)
}

/// Validates the column layout and returns the coordinate count.
fn parse_header(header: &[String]) -> Result<usize, IoError> {
    if header.first().map(String::as_str) != Some("t") {
        return Err(IoError::BadHeader { detail: "first column must be t".into() });
    }
    let cols = header.len() - 1;
    let m = match cols {
        0 => 0,
        c if c % 2 == 0 && check_block(header, 1, c / 2) => c / 2,
        c if c % 3 == 0 && check_block(header, 1, c / 3) => c / 3,
        _ => 0,
    };
    if m == 0 {
        return Err(IoError::BadHeader {
            detail: format!(
                "expected t,x0..,v0..[,f0..] for some coordinate count, got {:?}",
                header
            ),
        });
    }
    Ok(m)
}

/// Checks `x0..x{m-1},v0..v{m-1}[,f0..f{m-1}]` starting at `from`.
fn check_block(header: &[String], from: usize, m: usize) -> bool {
    let want: Vec<String> = ["x", "v", "f"]
        .iter()
        .flat_map(|p| (0..m).map(move |i| format!("{p}{i}")))
        .collect();
    header[from..].iter().zip(&want).all(|(h, w)| h == w)
        && (header.len() - from == 2 * m || header.len() - from == 3 * m)
}

/// Reads a trajectory CSV file.
pub fn read_trajectory_file(path: &Path) -> Result<Trajectory, IoError> {
    read_trajectory_csv(std::fs::File::open(path)?)
}

/// Writes a trajectory CSV file.
pub fn write_trajectory_file(path: &Path, tr: &Trajectory) -> Result<(), IoError> {
    write_trajectory_csv(std::fs::File::create(path)?, tr)
}

/// Writes an energy time series as `t,h` CSV.
pub fn write_energy_csv<W: Write>(w: W, t: &[f64], h: &[f64]) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", "h"])?;
    for (tv, hv) in t.iter().zip(h) {
        wtr.write_record([tv.to_string(), hv.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parses a validated expression from JSON.
pub fn expr_from_json(json: &str) -> Result<Expr, IoError> {
    let expr: Expr = serde_json::from_str(json)?;
    expr.validate()?;
    Ok(expr)
}

/// Serializes an expression to pretty JSON.
pub fn expr_to_json(expr: &Expr) -> String {
    serde_json::to_string_pretty(expr).expect("expressions always serialize")
}

/// Parses a dictionary specification from JSON.
pub fn dictionary_spec_from_json(json: &str) -> Result<DictionarySpec, IoError> {
    Ok(serde_json::from_str(json)?)
}

/// Serializes a dictionary specification to pretty JSON.
pub fn dictionary_spec_to_json(spec: &DictionarySpec) -> String {
    serde_json::to_string_pretty(spec).expect("specs always serialize")
}

/// One coordinate's model in a discovery report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DofReport {
    pub coord: usize,
    /// Labels of the surviving bases.
    pub support: Vec<String>,
    /// Coefficients aligned with `support`.
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub residual_rms: f64,
    pub relative_residual: f64,
    pub el_residual: f64,
    /// Rendered per-coordinate Lagrangian.
    pub lagrangian: String,
}

/// Serializable summary of a discovery run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    /// Rendered total Lagrangian.
    pub lagrangian: String,
    pub dofs: Vec<DofReport>,
    pub shared_terms: Vec<SharedTerm>,
    /// Relative L2 distance to a supplied ground truth, when available.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lagrangian_error: Option<f64>,
}

/// Builds the serializable report for a discovery result.
pub fn discovery_report(
    found: &DiscoveredLagrangian,
    total: &SystemLagrangian,
    lagrangian_error: Option<f64>,
) -> DiscoveryReport {
    let dict: &Dictionary = &found.dict;
    let dofs = found
        .dofs
        .iter()
        .map(|dof| DofReport {
            coord: dof.coord,
            support: dof.support_labels(dict).iter().map(|s| s.to_string()).collect(),
            theta: dof.solution.support.iter().map(|&k| dof.solution.theta[k]).collect(),
            iterations: dof.solution.iterations,
            residual_rms: dof.solution.residual_rms,
            relative_residual: dof.solution.relative_residual,
            el_residual: dof.el_residual,
            lagrangian: dof.expr.render(),
        })
        .collect();
    DiscoveryReport {
        lagrangian: total.expr.render(),
        dofs,
        shared_terms: total.shared_terms.clone(),
        lagrangian_error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_dictionary, DiffOrder};
    use crate::discover::{discover_lagrangian, DiscoverOptions};
    use crate::regress::StlsqOptions;
    use crate::sim::{rk4_integrate, LinearRhs};

    fn sample_trajectory(forced: bool) -> Trajectory {
        let rhs = LinearRhs { a: DMatrix::from_element(1, 1, 500.0), forced };
        let forcing = |t: f64, out: &mut [f64]| out[0] = (2.0 * std::f64::consts::PI * t).sin();
        rk4_integrate(
            &rhs,
            &[1.0],
            &[0.0],
            1e-3,
            0.05,
            1,
            forced.then_some(&forcing as &(dyn Fn(f64, &mut [f64]) + Sync)),
        )
        .unwrap()
    }

    #[test]
    fn trajectory_csv_roundtrips_exactly() {
        for forced in [false, true] {
            let tr = sample_trajectory(forced);
            let mut buf = Vec::new();
            write_trajectory_csv(&mut buf, &tr).unwrap();
            let back = read_trajectory_csv(buf.as_slice()).unwrap();
            assert_eq!(back.t, tr.t);
            assert_eq!(back.x, tr.x);
            assert_eq!(back.v, tr.v);
            assert_eq!(back.f, tr.f);
        }
    }

    #[test]
    fn trajectory_csv_header_is_validated() {
        let missing_t = "x0,v0\n1.0,2.0\n";
        assert!(matches!(
            read_trajectory_csv(missing_t.as_bytes()),
            Err(IoError::BadHeader { .. })
        ));
        let wrong_order = "t,v0,x0\n0.0,1.0,2.0\n";
        assert!(matches!(
            read_trajectory_csv(wrong_order.as_bytes()),
            Err(IoError::BadHeader { .. })
        ));
        let incomplete = "t,x0,x1,v0\n0.0,1.0,2.0,3.0\n";
        assert!(matches!(
            read_trajectory_csv(incomplete.as_bytes()),
            Err(IoError::BadHeader { .. })
        ));
    }

    #[test]
    fn trajectory_csv_rejects_bad_cells() {
        let bad_number = "t,x0,v0\n0.0,1.0,2.0\n0.001,oops,0.0\n";
        match read_trajectory_csv(bad_number.as_bytes()) {
            Err(IoError::BadNumber { row: 3, column, value }) => {
                assert_eq!(column, "x0");
                assert_eq!(value, "oops");
            }
            other => panic!("expected BadNumber, got {other:?}"),
        }
        let empty = "t,x0,v0\n";
        assert!(matches!(read_trajectory_csv(empty.as_bytes()), Err(IoError::Empty)));
    }

    #[test]
    fn short_or_irregular_data_fails_validation() {
        let short = "t,x0,v0\n0.0,1.0,0.0\n0.001,1.0,0.0\n";
        assert!(matches!(
            read_trajectory_csv(short.as_bytes()),
            Err(IoError::Trajectory(TrajectoryError::TooShort { .. }))
        ));
        let irregular =
            "t,x0,v0\n0.0,1,0\n0.001,1,0\n0.002,1,0\n0.004,1,0\n0.005,1,0\n0.006,1,0\n";
        assert!(matches!(
            read_trajectory_csv(irregular.as_bytes()),
            Err(IoError::Trajectory(TrajectoryError::NonUniformTimeGrid { .. }))
        ));
    }

    #[test]
    fn expr_json_roundtrips_and_validates() {
        let expr = Expr::sum(vec![
            Expr::scaled(0.5, Expr::power(Expr::v(0), 2)),
            Expr::scaled(-250.0, Expr::power(Expr::x(0), 2)),
        ])
        .simplify();
        let json = expr_to_json(&expr);
        let back = expr_from_json(&json).unwrap();
        assert_eq!(back, expr);

        // A power of zero is structurally invalid and must be rejected even
        // though it deserializes.
        let bad = json.replace("\"exp\": 2", "\"exp\": 0");
        assert!(matches!(expr_from_json(&bad), Err(IoError::InvalidExpr(_))));

        let garbage = "{\"power\": []}";
        assert!(matches!(expr_from_json(garbage), Err(IoError::Json(_))));
    }

    #[test]
    fn dictionary_spec_json_roundtrips() {
        let spec = DictionarySpec {
            coords: 3,
            poly_degree: 3,
            pairwise_differences: true,
            diff_poly_degree: 3,
            ..DictionarySpec::default()
        };
        let json = dictionary_spec_to_json(&spec);
        assert_eq!(dictionary_spec_from_json(&json).unwrap(), spec);
        assert!(dictionary_spec_from_json("{\"coords\": 1, \"bogus\": 2}").is_err());
    }

    #[test]
    fn energy_csv_has_two_columns() {
        let mut buf = Vec::new();
        write_energy_csv(&mut buf, &[0.0, 0.1, 0.2], &[1.0, 1.0, 1.0]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,h"));
        assert_eq!(lines.next(), Some("0,1"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn discovery_report_carries_labels_and_coefficients() {
        let rhs = LinearRhs { a: DMatrix::from_element(1, 1, 500.0), forced: false };
        let tr = rk4_integrate(&rhs, &[1.0], &[0.0], 1e-3, 1.0, 1, None).unwrap();
        let dict = build_dictionary(&crate::dictionary::DictionarySpec {
            coords: 1,
            poly_degree: 5,
            cross_terms: true,
            harmonics: true,
            velocity_harmonics: true,
            ..Default::default()
        })
        .unwrap();
        let opts = DiscoverOptions {
            stlsq: StlsqOptions { column_scaling: true, ..StlsqOptions::with_lambda(200.0) },
            diff_order: DiffOrder::Two,
            ..DiscoverOptions::default()
        };
        let found = discover_lagrangian(&tr, &dict, &opts).unwrap();
        let total = found.total_equal_mass().unwrap();
        let report = discovery_report(&found, &total, Some(1.5e-4));

        assert_eq!(report.dofs.len(), 1);
        assert_eq!(report.dofs[0].support, vec!["x0^2"]);
        assert!((report.dofs[0].theta[0] - 500.0).abs() < 1.0);
        assert!(report.lagrangian.starts_with("0.5*v0^2"));
        assert_eq!(report.lagrangian_error, Some(1.5e-4));

        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: DiscoveryReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(value.get("lagrangian").is_some());
        assert!(value["dofs"][0].get("residual_rms").is_some());
    }
}
