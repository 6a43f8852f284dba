//! Report rows, CSV tables and the `report.json` layout.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::stats::{trend_gate, Direction, Estimate};

/// Where a target value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Provenance {
    /// A constant or identity stated in the source theory.
    Paper,
    /// Follows from the definitions alone.
    Trivial,
    /// Computed independently from the model, e.g. a closed-form moment.
    Derived,
}

/// One statistic with its gate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub target: Option<f64>,
    pub provenance: Provenance,
    pub pass: bool,
    pub rule: String,
    /// Ungated rows are reported but do not affect the exit code.
    pub gated: bool,
}

fn fmt_list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

impl Row {
    fn new(name: impl Into<String>, estimate: f64, provenance: Provenance, pass: bool, rule: String) -> Self {
        Self { name: name.into(), estimate, se: None, target: None, provenance, pass, rule, gated: true }
    }

    /// `|estimate − target| ≤ k·se`.
    pub fn z(name: impl Into<String>, est: Estimate, target: f64, k: f64, provenance: Provenance) -> Self {
        Self::z_raw(name, est.mean, est.se, target, k, provenance)
    }

    pub fn z_raw(name: impl Into<String>, mean: f64, se: f64, target: f64, k: f64, provenance: Provenance) -> Self {
        let pass = se.is_finite() && (mean - target).abs() <= k * se;
        let mut row = Self::new(name, mean, provenance, pass, format!("|estimate - target| <= {k} se"));
        row.se = Some(se);
        row.target = Some(target);
        row
    }

    /// `|estimate / target − 1| ≤ tol`.
    pub fn relative(name: impl Into<String>, est: Estimate, target: f64, tol: f64, provenance: Provenance) -> Self {
        let pass = ((est.mean - target) / target).abs() <= tol;
        let mut row = Self::new(name, est.mean, provenance, pass, format!("within {}% of target", tol * 100.0));
        row.se = Some(est.se);
        row.target = Some(target);
        row
    }

    pub fn exact(name: impl Into<String>, estimate: f64, target: f64, provenance: Provenance) -> Self {
        let mut row = Self::new(name, estimate, provenance, estimate == target, "exact equality".into());
        row.target = Some(target);
        row
    }

    pub fn below(name: impl Into<String>, estimate: f64, threshold: f64, provenance: Provenance) -> Self {
        Self::new(name, estimate, provenance, estimate < threshold, format!("estimate < {threshold}"))
    }

    pub fn above(name: impl Into<String>, estimate: f64, threshold: f64, provenance: Provenance) -> Self {
        Self::new(name, estimate, provenance, estimate > threshold, format!("estimate > {threshold}"))
    }

    pub fn window(name: impl Into<String>, estimate: f64, lo: f64, hi: f64, provenance: Provenance) -> Self {
        let pass = estimate >= lo && estimate <= hi;
        Self::new(name, estimate, provenance, pass, format!("estimate in [{lo}, {hi}]"))
    }

    /// Strict monotonicity of `series`; the estimate is its last point.
    pub fn trend(name: impl Into<String>, series: &[f64], direction: Direction, provenance: Provenance) -> Self {
        let word = match direction {
            Direction::Increasing => "increasing",
            Direction::Decreasing => "decreasing",
        };
        let pass = trend_gate(series, direction);
        let last = series.last().copied().unwrap_or(f64::NAN);
        Self::new(name, last, provenance, pass, format!("strictly {word}: {}", fmt_list(series)))
    }

    pub fn custom(name: impl Into<String>, estimate: f64, provenance: Provenance, pass: bool, rule: String) -> Self {
        Self::new(name, estimate, provenance, pass, rule)
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.target = Some(target);
        self
    }

    pub fn with_se(mut self, se: f64) -> Self {
        self.se = Some(se);
        self
    }

    pub fn ungated(mut self) -> Self {
        self.gated = false;
        self
    }

    /// Informational value without a gate.
    pub fn info(name: impl Into<String>, estimate: f64, provenance: Provenance) -> Self {
        Self::new(name, estimate, provenance, true, "reported only".into()).ungated()
    }
}

/// A CSV table. Numbers are written in shortest round-trip form.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: impl Into<String>, header: &[&'static str]) -> Self {
        Self { name: name.into(), header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, fields: Vec<String>) {
        debug_assert_eq!(fields.len(), self.header.len());
        self.rows.push(fields);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Formats a cell.
#[macro_export]
macro_rules! cells {
    ($($x:expr),* $(,)?) => { vec![$(format!("{}", $x)),*] };
}

/// The outcome of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub experiment: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub passed: bool,
    pub rows: Vec<Row>,
    /// File names of the CSV tables written next to `report.json`.
    pub tables: Vec<String>,
    #[serde(skip)]
    pub data: Vec<Table>,
}

impl RunReport {
    pub fn new(experiment: &str, seed: u64, rows: Vec<Row>, data: Vec<Table>, wall_clock_seconds: f64) -> Self {
        let passed = rows.iter().all(|r| r.pass || !r.gated);
        let tables = data.iter().map(|t| format!("{experiment}_{}.csv", t.name)).collect();
        Self { experiment: experiment.to_string(), seed, wall_clock_seconds, passed, rows, tables, data }
    }

    pub fn failed_rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.gated && !r.pass)
    }
}

/// What one invocation writes to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub experiment: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    pub passed: bool,
    pub runs: Vec<RunReport>,
}

impl Report {
    pub fn new(experiment: &str, seed: u64, runs: Vec<RunReport>, wall_clock_seconds: f64) -> Self {
        let passed = runs.iter().all(|r| r.passed);
        Self { experiment: experiment.to_string(), seed, wall_clock_seconds, passed, runs }
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &Row)> {
        self.runs.iter().flat_map(|r| r.rows.iter().map(move |row| (r.experiment.as_str(), row)))
    }

    /// Writes `report.json` and every table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for run in &self.runs {
            for (table, file) in run.data.iter().zip(&run.tables) {
                fs::write(dir.join(file), table.to_csv())?;
            }
        }
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join("report.json"), json)?;
        Ok(())
    }

    /// One line per row, failures marked.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for run in &self.runs {
            let _ = writeln!(
                out,
                "{} [{}] {:.1}s",
                run.experiment,
                if run.passed { "pass" } else { "FAIL" },
                run.wall_clock_seconds
            );
            for row in &run.rows {
                let mark = match (row.gated, row.pass) {
                    (false, _) => "info",
                    (true, true) => "ok",
                    (true, false) => "FAIL",
                };
                let _ = write!(out, "  {mark:<4} {}: {:.6}", row.name, row.estimate);
                if let Some(se) = row.se {
                    let _ = write!(out, " ± {se:.2e}");
                }
                if let Some(t) = row.target {
                    let _ = write!(out, " (target {t:.6})");
                }
                let _ = writeln!(out, "  [{}]", row.rule);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gates() {
        let e = Estimate { mean: 1.0, se: 0.1, n: 10 };
        assert!(Row::z("x", e, 1.0, 4.0, Provenance::Trivial).pass);
        assert!(!Row::z("x", e, 1.5, 4.0, Provenance::Trivial).pass);
        assert!(Row::trend("t", &[3.0, 2.0, 1.0], Direction::Decreasing, Provenance::Trivial).pass);
        assert!(!Row::trend("t", &[3.0, 2.0], Direction::Decreasing, Provenance::Trivial).pass);
        assert!(Row::relative("r", e, 1.04, 0.05, Provenance::Derived).pass);
        assert!(!Row::window("w", 0.4, 0.45, 0.9, Provenance::Paper).pass);
    }

    #[test]
    fn ungated_failures_do_not_fail_the_run() {
        let rows = vec![Row::below("a", 2.0, 1.0, Provenance::Trivial).ungated(), Row::info("b", 1.0, Provenance::Derived)];
        assert!(RunReport::new("x", 1, rows, vec![], 0.0).passed);
    }

    #[test]
    fn provenance_serialises_upper_case() {
        assert_eq!(serde_json::to_string(&Provenance::Derived).unwrap(), "\"DERIVED\"");
    }

    #[test]
    fn writes_tables_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new("values", &["i", "x"]);
        t.push(cells![0, 0.5]);
        let run = RunReport::new("demo", 3, vec![Row::info("n", 1.0, Provenance::Trivial)], vec![t], 0.1);
        Report::new("demo", 3, vec![run], 0.1).write(dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("demo_values.csv")).unwrap(), "i,x\n0,0.5\n");
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json["runs"][0]["rows"][0]["provenance"], "TRIVIAL");
    }
}
