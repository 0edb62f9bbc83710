//! Audit tables from CSV: a header naming the prediction, label and group
//! columns, then one `0`/`1` row per audited prediction.

use std::path::Path;

use querykernel_core::fairness::{AuditRow, AuditTable};

const PRED: [&str; 4] = ["pred", "prediction", "y_hat", "yhat"];
const ACTUAL: [&str; 4] = ["actual", "label", "y", "truth"];
const GROUP: [&str; 4] = ["group", "s", "sensitive", "attribute"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{path}:{line}: {message}")]
pub struct CsvError {
    pub path: String,
    pub line: u64,
    pub message: String,
}

pub fn read_audit_csv(path: &Path) -> Result<AuditTable, CsvError> {
    let fail = |line: u64, message: String| CsvError {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fail(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| fail(1, e.to_string()))?.clone();
    let find = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
            .ok_or_else(|| fail(1, format!("no column named any of {names:?}")))
    };
    let cols = [find(&PRED)?, find(&ACTUAL)?, find(&GROUP)?];
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| fail(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let mut v = [0u8; 3];
        for (slot, &c) in v.iter_mut().zip(&cols) {
            let cell = record.get(c).unwrap_or("");
            *slot = match cell {
                "0" => 0,
                "1" => 1,
                other => return Err(fail(line, format!("expected 0 or 1 in column {:?}, got {other:?}", &headers[c]))),
            };
        }
        rows.push(AuditRow::new(v[0], v[1], v[2]).map_err(|e| fail(line, e.to_string()))?);
    }
    Ok(AuditTable::new(rows))
}
