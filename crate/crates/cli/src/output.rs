//! Distribution files written by `evaluate` and read back by `compare`.

use std::fmt::Write as _;

use repeater_core::evaluator::LinkState;
use repeater_core::keyrate::SecretKeyReport;
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;

pub const CSV_HEADER: &str = "t,pmf,cdf,werner,fidelity";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Row {
    pub t: usize,
    pub pmf: f64,
    pub cdf: f64,
    pub werner: f64,
    pub fidelity: f64,
}

/// JSON form of an evaluation: the CSV rows plus the run's reports.
#[derive(Debug, Serialize)]
pub struct EvaluationFile {
    pub rows: Vec<Row>,
    pub report: Option<SecretKeyReport>,
    pub manifest: RunManifest,
}

#[derive(Deserialize)]
struct RowsOnly {
    rows: Vec<Row>,
}

/// Rows for `t = 1..=ttr`; nothing can be delivered at `t = 0`.
pub fn rows(ls: &LinkState) -> Vec<Row> {
    let cdf = ls.distribution().cdf();
    let fid = ls.fidelity();
    (1..ls.len())
        .map(|t| Row {
            t,
            pmf: ls.pmf()[t],
            cdf: cdf[t],
            werner: ls.werner()[t],
            fidelity: fid[t],
        })
        .collect()
}

/// CSV with 17 significant digits, enough to round-trip every `f64`.
pub fn to_csv(rows: &[Row]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.t, r.pmf, r.cdf, r.werner, r.fidelity
        );
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<Row>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        Some(h) => return Err(format!("unexpected header {h:?}; expected {CSV_HEADER:?}")),
        None => return Err("empty file".into()),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(format!(
                "line {}: expected 5 fields, found {}",
                i + 2,
                fields.len()
            ));
        }
        let num = |k: usize| -> Result<f64, String> {
            fields[k]
                .trim()
                .parse()
                .map_err(|e| format!("line {}: field {}: {e}", i + 2, k + 1))
        };
        rows.push(Row {
            t: fields[0]
                .trim()
                .parse()
                .map_err(|e| format!("line {}: field 1: {e}", i + 2))?,
            pmf: num(1)?,
            cdf: num(2)?,
            werner: num(3)?,
            fidelity: num(4)?,
        });
    }
    Ok(rows)
}

/// Rebuilds a link state from rows; missing times carry no mass.
pub fn link_state(rows: &[Row]) -> Result<LinkState, String> {
    let ttr = rows.iter().map(|r| r.t).max().ok_or("no rows")?;
    let mut pmf = vec![0.0; ttr + 1];
    let mut werner = vec![0.0; ttr + 1];
    for r in rows {
        pmf[r.t] = r.pmf;
        werner[r.t] = r.werner;
    }
    LinkState::new(pmf, werner).map_err(|e| e.to_string())
}

/// Reads either output format of `evaluate`.
pub fn read_distribution(text: &str) -> Result<LinkState, String> {
    let rows = if text.trim_start().starts_with('{') {
        serde_json::from_str::<RowsOnly>(text)
            .map_err(|e| e.to_string())?
            .rows
    } else {
        parse_csv(text)?
    };
    link_state(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_bit_exactly() {
        let ls = LinkState::new(
            vec![0.0, 0.1, 1.0 / 3.0, 0.2],
            vec![0.0, 0.97, 0.5 + 1e-17, 0.123_456_789_012_345_68],
        )
        .unwrap();
        let back = link_state(&parse_csv(&to_csv(&rows(&ls))).unwrap()).unwrap();
        assert_eq!(back.pmf(), ls.pmf());
        assert_eq!(back.werner(), ls.werner());
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(parse_csv("t,pmf\n1,0.5\n").is_err());
    }
}
