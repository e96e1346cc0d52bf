//! File formats: trajectory CSV and versioned JSON reports.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// The seeker trajectory columns.
pub const SEEKER_HEADER: [&str; 18] = [
    "t", "p1", "p2", "p3", "q1", "q2", "q3", "q4", "q5", "q6", "q7", "q8", "q9", "y1", "y2", "c_at_center", "V_c",
    "manifold_residual",
];

/// 17 significant digits: enough to read every `f64` back exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| fmt_f64(*v))).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// A CSV read back: header plus numeric rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// Parses a trajectory CSV and checks that time increases strictly.
pub fn read_csv(path: &Path) -> Result<Table, CliError> {
    let mut r = csv::ReaderBuilder::new().from_path(path).map_err(|e| CliError::io(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| CliError::io(path, e))?.iter().map(str::to_owned).collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(CliError::Validation(format!("{}: first column must be 't'", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    if rows.windows(2).any(|w| w[1][0] <= w[0][0]) {
        return Err(CliError::Validation(format!("{}: time column is not increasing", path.display())));
    }
    Ok(Table { header, rows })
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema_version: u32,
    command: String,
    report: T,
}

pub fn write_report<T: Serialize>(path: &Path, command: &str, report: &T) -> Result<(), CliError> {
    let env = Envelope { schema_version: SCHEMA_VERSION, command: command.to_owned(), report };
    let mut text = serde_json::to_string_pretty(&env).map_err(|e| CliError::Validation(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a report written by [`write_report`], checking the schema version.
pub fn read_report<T: DeserializeOwned>(path: &Path) -> Result<(String, T), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(CliError::Validation(format!("{}: unsupported schema_version {}", path.display(), env.schema_version)));
    }
    Ok((env.command, env.report))
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let header: Vec<String> = ["t", "a"].iter().map(|s| s.to_string()).collect();
        let rows = vec![vec![0.0, 0.1], vec![1.0 / 3.0, -3.135494215929149e-7], vec![2.0, f64::MAX]];
        write_csv(&path, &header, &rows).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(!bytes.contains(&b'\r'));
        let t = read_csv(&path).unwrap();
        assert_eq!(t.header, header);
        assert_eq!(t.rows, rows);
    }

    #[test]
    fn non_monotone_time_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "t,a\n0,1\n0,2\n").unwrap();
        assert!(read_csv(&path).is_err());
    }

    #[test]
    fn reports_carry_a_schema_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_report(&path, "demo", &vec![0.1, 1e-300]).unwrap();
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw["schema_version"], 1);
        let (cmd, back): (String, Vec<f64>) = read_report(&path).unwrap();
        assert_eq!(cmd, "demo");
        assert_eq!(back, vec![0.1, 1e-300]);
    }
}
