//! Run reports and their CSV rendering.
//!
//! `summary.csv` has one row per check with columns
//! `experiment_id,kind,value,std_error,tolerance,pass,seconds`; `std_error`
//! and `tolerance` are empty when not applicable, `seconds` is empty unless
//! timings were requested (wall times would break byte-identical reruns).
//! Detail files are named `<experiment_id>.csv` (or with a suffix for
//! experiments that write several).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use glevy_core::csvfmt::fmt12;

use crate::error::CliError;

/// One summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub experiment_id: String,
    pub kind: &'static str,
    pub value: f64,
    pub std_error: Option<f64>,
    pub tolerance: Option<f64>,
    pub pass: bool,
    pub seconds: f64,
}

/// A detail CSV: file stem and full contents (header included).
#[derive(Debug, Clone, PartialEq)]
pub struct Detail {
    pub name: String,
    pub contents: String,
}

impl Detail {
    pub fn new(name: impl Into<String>, header: &str) -> Self {
        let mut contents = String::from(header);
        contents.push('\n');
        Self {
            name: name.into(),
            contents,
        }
    }

    /// Appends one row of already formatted fields.
    pub fn row(&mut self, fields: &[String]) {
        self.contents.push_str(&fields.join(","));
        self.contents.push('\n');
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<Row>,
    pub details: Vec<Detail>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> Vec<&Row> {
        self.rows.iter().filter(|r| !r.pass).collect()
    }

    pub fn row(&self, id: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.experiment_id == id)
    }

    pub fn summary_csv(&self, timings: bool) -> String {
        let mut s = String::from("experiment_id,kind,value,std_error,tolerance,pass,seconds\n");
        let opt = |x: Option<f64>| x.map(fmt12).unwrap_or_default();
        for r in &self.rows {
            let seconds = if timings {
                format!("{:.3}", r.seconds)
            } else {
                String::new()
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.experiment_id,
                r.kind,
                fmt12(r.value),
                opt(r.std_error),
                opt(r.tolerance),
                r.pass,
                seconds
            );
        }
        s
    }
}

/// Writes `summary.csv` and every detail file into `dir`, creating it if
/// needed; returns the written paths, summary first.
pub fn emit_csv(report: &RunReport, dir: &Path, timings: bool) -> Result<Vec<PathBuf>, CliError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut out = Vec::with_capacity(report.details.len() + 1);
    let summary = dir.join("summary.csv");
    std::fs::write(&summary, report.summary_csv(timings)).map_err(io(&summary))?;
    out.push(summary);
    for d in &report.details {
        let path = dir.join(format!("{}.csv", d.name));
        std::fs::write(&path, &d.contents).map_err(io(&path))?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> RunReport {
        RunReport {
            rows: vec![Row {
                experiment_id: "a".into(),
                kind: "pide",
                value: 0.896361676485673,
                std_error: None,
                tolerance: Some(0.02),
                pass: true,
                seconds: 1.25,
            }],
            details: vec![],
        }
    }

    #[test]
    fn summary_schema() {
        let s = report().summary_csv(false);
        let mut lines = s.lines();
        assert_eq!(
            lines.next(),
            Some("experiment_id,kind,value,std_error,tolerance,pass,seconds")
        );
        assert_eq!(lines.next(), Some("a,pide,0.896361676486,,0.02,true,"));
        assert!(report().summary_csv(true).contains("true,1.250"));
    }

    #[test]
    fn empty_report_passes() {
        assert!(RunReport::default().passed());
    }
}
