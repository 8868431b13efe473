//! Reward breakdown in the comparison-table layout: signed contributions
//! to the episode total.

use millforge_core::env::RewardBreakdown;
use serde::Serialize;

pub const COLUMNS: [&str; 5] = ["time", "deviation", "mrv", "force", "total"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TableRow {
    pub time: f64,
    pub deviation: f64,
    pub mrv: f64,
    pub force: f64,
    /// Includes any safety penalty.
    pub total: f64,
}

impl TableRow {
    pub fn values(&self) -> [f64; 5] {
        [self.time, self.deviation, self.mrv, self.force, self.total]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self { time: v[0], deviation: v[1], mrv: v[2], force: v[3], total: v[4] }
    }
}

impl From<&RewardBreakdown> for TableRow {
    fn from(r: &RewardBreakdown) -> Self {
        Self { time: -r.time_term, deviation: -r.deviation_term, mrv: r.mrv_term, force: -r.force_term, total: r.total }
    }
}

/// Column means and standard errors; the standard error is absent below
/// two rows.
pub fn summarize(rows: &[TableRow]) -> (TableRow, Option<TableRow>) {
    let n = rows.len();
    let mut mean = [0.0; 5];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v / n as f64;
        }
    }
    if n < 2 {
        return (TableRow::from_values(mean), None);
    }
    let mut se = [0.0; 5];
    for r in rows {
        for (k, v) in r.values().iter().enumerate() {
            se[k] += (v - mean[k]).powi(2);
        }
    }
    for s in &mut se {
        *s = (*s / (n - 1) as f64).sqrt() / (n as f64).sqrt();
    }
    (TableRow::from_values(mean), Some(TableRow::from_values(se)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signs_sum_to_total() {
        let r = RewardBreakdown::new(1.5, 0.25, 0.125, 0.5, 0.0);
        let t = TableRow::from(&r);
        assert_eq!(t.time + t.deviation + t.mrv + t.force, t.total);
    }

    #[test]
    fn single_row_has_no_stderr() {
        let r = TableRow::from(&RewardBreakdown::new(1.0, 0.0, 0.0, 0.0, 0.0));
        let (m, se) = summarize(&[r]);
        assert_eq!(m, r);
        assert!(se.is_none());
    }

    #[test]
    fn stderr_of_two_rows() {
        let a = TableRow::from_values([1.0; 5]);
        let b = TableRow::from_values([3.0; 5]);
        let (m, se) = summarize(&[a, b]);
        assert_eq!(m.total, 2.0);
        // sample sd sqrt(2), divided by sqrt(2)
        assert!((se.unwrap().total - 1.0).abs() < 1e-15);
    }
}
