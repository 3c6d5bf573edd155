//! Accuracy prior over width paths.
//!
//! A small measured table maps complete width paths to top-1 accuracy. For
//! a partially executed request the prior is a nearest-neighbour lookup
//! over the executed prefix, which gives the router a dense mid-episode
//! accuracy signal; final correctness is a Bernoulli draw against the
//! full-path entry.

use crate::types::{WidthRatio, NUM_SEGMENTS};
use rand::Rng;
use std::sync::OnceLock;
use thiserror::Error;

/// Measured top-1 accuracies bundled with the crate.
const PUBLISHED_CSV: &str = include_str!("../data/accuracy_table.csv");

/// Two rows whose prefix distance falls below this are both "exact" and
/// their accuracies are averaged.
const EXACT_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AccuracyError {
    #[error("line {line}: expected 5 comma-separated fields, got {got}")]
    FieldCount { line: usize, got: usize },
    #[error("line {line}: {0:?} is not a number", .field)]
    BadNumber { line: usize, field: String },
    #[error("line {line}: bad width: {msg}")]
    BadWidth { line: usize, msg: String },
    #[error("line {line}: accuracy must be in [0, 1], got {value}")]
    BadAccuracy { line: usize, value: f64 },
    #[error("line {line}: duplicate width path")]
    DuplicatePath { line: usize },
    #[error("table has no rows")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub widths: [WidthRatio; NUM_SEGMENTS],
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    rows: Vec<TableRow>,
    mean: f64,
}

impl AccuracyTable {
    /// Parses `w1,w2,w3,w4,top1_fraction` lines; `#` starts a comment and
    /// blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, AccuracyError> {
        let mut rows: Vec<TableRow> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(AccuracyError::FieldCount {
                    line,
                    got: fields.len(),
                });
            }
            let mut nums = [0.0f64; 5];
            for (i, f) in fields.iter().enumerate() {
                nums[i] = f.parse().map_err(|_| AccuracyError::BadNumber {
                    line,
                    field: f.to_string(),
                })?;
            }
            let mut widths = [WidthRatio::new(1.0).unwrap(); NUM_SEGMENTS];
            for (i, &v) in nums[..NUM_SEGMENTS].iter().enumerate() {
                widths[i] = WidthRatio::new(v).map_err(|e| AccuracyError::BadWidth {
                    line,
                    msg: e.to_string(),
                })?;
            }
            let accuracy = nums[4];
            if !(0.0..=1.0).contains(&accuracy) {
                return Err(AccuracyError::BadAccuracy {
                    line,
                    value: accuracy,
                });
            }
            if rows.iter().any(|r| r.widths == widths) {
                return Err(AccuracyError::DuplicatePath { line });
            }
            rows.push(TableRow { widths, accuracy });
        }
        if rows.is_empty() {
            return Err(AccuracyError::Empty);
        }
        let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
        Ok(AccuracyTable { rows, mean })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// The table shipped with the crate.
    pub fn published() -> &'static AccuracyTable {
        static TABLE: OnceLock<AccuracyTable> = OnceLock::new();
        TABLE.get_or_init(|| AccuracyTable::parse(PUBLISHED_CSV).expect("bundled table parses"))
    }

    pub fn rows(&self) -> &[TableRow] {
        &self.rows
    }

    /// Mean accuracy across all rows; the centering baseline.
    pub fn mean_accuracy(&self) -> f64 {
        self.mean
    }

    pub fn exact_lookup(&self, widths: &[WidthRatio; NUM_SEGMENTS]) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.widths == *widths)
            .map(|r| r.accuracy)
    }

    /// Prior accuracy of a partial width path.
    ///
    /// Each table row is compared to the prefix by Euclidean distance over
    /// the first `prefix.len()` components. If any rows match the prefix
    /// exactly their accuracies are averaged; otherwise the row at minimal
    /// distance wins, ties broken toward the lexicographically smallest
    /// width path.
    pub fn prior_lookup(&self, prefix: &[WidthRatio]) -> f64 {
        assert!(
            !prefix.is_empty() && prefix.len() <= NUM_SEGMENTS,
            "prefix length must be in 1..={NUM_SEGMENTS}, got {}",
            prefix.len()
        );
        let dist = |row: &TableRow| {
            prefix
                .iter()
                .zip(row.widths.iter())
                .map(|(a, b)| (a.get() - b.get()).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let d_min = self
            .rows
            .iter()
            .map(dist)
            .min_by(f64::total_cmp)
            .expect("table is non-empty");
        if d_min < EXACT_EPS {
            let exact: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| dist(r) < EXACT_EPS)
                .map(|r| r.accuracy)
                .collect();
            return exact.iter().sum::<f64>() / exact.len() as f64;
        }
        self.rows
            .iter()
            .filter(|r| dist(r) == d_min)
            .min_by(|a, b| a.widths.cmp(&b.widths))
            .expect("at least one row at minimal distance")
            .accuracy
    }

    /// `prior_lookup` shifted by the table mean, so "an average path" reads
    /// as zero reward.
    pub fn centered_prior(&self, prefix: &[WidthRatio]) -> f64 {
        self.prior_lookup(prefix) - self.mean
    }
}

/// One Bernoulli draw: did this request classify correctly? `p` is clamped
/// into [0, 1] so centered inputs cannot panic the RNG.
pub fn sample_correctness(p: f64, rng: &mut impl Rng) -> bool {
    rng.gen_bool(p.clamp(0.0, 1.0))
}
