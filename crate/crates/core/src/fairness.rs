//! Group-fairness metrics on binary predictions with a binary sensitive attribute.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One audited prediction: `ŷ`, `y` and group `s`, each in `{0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub pred: u8,
    pub actual: u8,
    pub group: u8,
}

impl AuditRow {
    pub fn new(pred: u8, actual: u8, group: u8) -> Result<Self> {
        if pred > 1 || actual > 1 || group > 1 {
            return Err(Error::InvalidArgument(format!(
                "audit row ({pred}, {actual}, {group}) has a value outside {{0, 1}}"
            )));
        }
        Ok(Self { pred, actual, group })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditTable {
    rows: Vec<AuditRow>,
}

/// Per-group counts reported next to the metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub rows: usize,
    pub predicted_positive: usize,
    pub actual_positive: usize,
    pub true_positive: usize,
}

impl AuditTable {
    pub fn new(rows: Vec<AuditRow>) -> Self {
        Self { rows }
    }

    /// Rows as `(pred, actual, group)` triples, validated.
    pub fn from_triples(rows: &[(u8, u8, u8)]) -> Result<Self> {
        rows.iter()
            .map(|&(p, a, g)| AuditRow::new(p, a, g))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn rows(&self) -> &[AuditRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn group_counts(&self) -> [GroupCounts; 2] {
        let mut c = [GroupCounts::default(); 2];
        for r in &self.rows {
            let g = &mut c[r.group as usize];
            g.rows += 1;
            g.predicted_positive += r.pred as usize;
            g.actual_positive += r.actual as usize;
            g.true_positive += (r.pred & r.actual) as usize;
        }
        c
    }
}

/// `|a/n − b/m|` as the single fraction `|a·m − b·n| / (n·m)`, so the result
/// is the exact rational rounded once (exactly, while both integers stay
/// below 2⁵³).
fn rate_gap(a: usize, n: usize, b: usize, m: usize) -> f64 {
    let (a, n, b, m) = (a as u128, n as u128, b as u128, m as u128);
    (a * m).abs_diff(b * n) as f64 / (n * m) as f64
}

/// `|P̂(ŷ=1 | s=0) − P̂(ŷ=1 | s=1)|`.
pub fn statistical_parity(table: &AuditTable) -> Result<f64> {
    let c = table.group_counts();
    for (s, g) in c.iter().enumerate() {
        if g.rows == 0 {
            return Err(Error::UndefinedMetric(format!("statistical parity: group {s} has no rows")));
        }
    }
    Ok(rate_gap(c[0].predicted_positive, c[0].rows, c[1].predicted_positive, c[1].rows))
}

/// `|P̂(ŷ=1 | y=1, s=0) − P̂(ŷ=1 | y=1, s=1)|`.
pub fn equal_opportunity(table: &AuditTable) -> Result<f64> {
    let c = table.group_counts();
    for (s, g) in c.iter().enumerate() {
        if g.actual_positive == 0 {
            return Err(Error::UndefinedMetric(format!(
                "equal opportunity: group {s} has no rows with actual = 1"
            )));
        }
    }
    Ok(rate_gap(
        c[0].true_positive,
        c[0].actual_positive,
        c[1].true_positive,
        c[1].actual_positive,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub delta_sp: f64,
    pub delta_eo: f64,
    pub group_counts: [GroupCounts; 2],
}

/// Both metrics plus group counts; fails if either metric is undefined.
pub fn audit(table: &AuditTable) -> Result<AuditReport> {
    Ok(AuditReport {
        delta_sp: statistical_parity(table)?,
        delta_eo: equal_opportunity(table)?,
        group_counts: table.group_counts(),
    })
}
