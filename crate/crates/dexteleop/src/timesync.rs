//! Per-frame multi-source timestamp validation and episode-level
//! synchronization metrics.
//!
//! Every control cycle gathers one timestamp per active source. A frame
//! passes when every timestamp is fresh relative to the validation clock and
//! the max pairwise spread stays under the tolerance. The verdict travels
//! with the frame as a [`SyncBundle`] so datasets stay filterable after the
//! fact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("empty timestamp set")]
    EmptySet,
    #[error("empty bundle sequence")]
    EmptySequence,
    #[error("no valid bundles")]
    NoValidBundles,
    #[error("percentile must be in (0, 100], got {0}")]
    BadPercentile(f64),
    #[error("invalid sync policy: {0}")]
    BadPolicy(String),
}

/// Monotonic time source; the simulated variant is advanced by its owner.
#[derive(Debug)]
pub enum ClockSource {
    /// Wall-adjacent monotonic clock, seconds since clock creation.
    RealMonotonic(std::time::Instant),
    Simulated(f64),
}

impl ClockSource {
    pub fn real() -> Self {
        Self::RealMonotonic(std::time::Instant::now())
    }

    pub fn simulated() -> Self {
        Self::Simulated(0.0)
    }

    pub fn now(&self) -> f64 {
        match self {
            Self::RealMonotonic(start) => start.elapsed().as_secs_f64(),
            Self::Simulated(t) => *t,
        }
    }

    /// Move a simulated clock forward; never backwards.
    pub fn advance_to(&mut self, t: f64) {
        if let Self::Simulated(cur) = self {
            if t > *cur {
                *cur = t;
            }
        }
    }
}

/// Freshness window and consistency tolerance, seconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SyncPolicy {
    pub freshness_window: f64,
    pub tolerance: f64,
}

impl Default for SyncPolicy {
    fn default() -> Self {
        Self {
            freshness_window: 1.0,
            tolerance: 0.100,
        }
    }
}

impl SyncPolicy {
    pub fn validate(&self) -> Result<(), SyncError> {
        if self.freshness_window <= 0.0 || self.tolerance <= 0.0 {
            return Err(SyncError::BadPolicy(
                "freshness_window and tolerance must be strictly positive".into(),
            ));
        }
        if self.tolerance > self.freshness_window {
            return Err(SyncError::BadPolicy(
                "tolerance must not exceed freshness_window".into(),
            ));
        }
        Ok(())
    }
}

/// One timestamp per source for a single frame, seconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimestampSet {
    pub entries: BTreeMap<String, f64>,
}

impl TimestampSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, source: impl Into<String>, t: f64) {
        self.entries.insert(source.into(), t);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SyncFailure {
    None,
    /// A source's timestamp fell outside the freshness window; carries the
    /// first offender in source-name order.
    Stale(String),
    Inconsistent,
}

/// Per-frame validation verdict plus the evidence it was based on.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncBundle {
    pub is_valid: bool,
    pub max_diff: f64,
    pub timestamps: TimestampSet,
    pub checked_at: f64,
    pub failure: SyncFailure,
}

/// Run the freshness check then the consistency check on one frame's
/// timestamps. Freshness uses |now - t| so slightly-ahead timestamps from
/// skewed clocks are treated symmetrically. `max_diff` is always reported.
pub fn validate(policy: &SyncPolicy, now: f64, set: &TimestampSet) -> Result<SyncBundle, SyncError> {
    if set.entries.is_empty() {
        return Err(SyncError::EmptySet);
    }
    let min = set.entries.values().cloned().fold(f64::INFINITY, f64::min);
    let max = set.entries.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_diff = max - min;

    // BTreeMap iteration gives the deterministic lexicographic tie-break.
    let stale = set
        .entries
        .iter()
        .find(|(_, t)| (now - **t).abs() > policy.freshness_window)
        .map(|(s, _)| s.clone());

    let failure = match stale {
        Some(source) => SyncFailure::Stale(source),
        None if max_diff > policy.tolerance => SyncFailure::Inconsistent,
        None => SyncFailure::None,
    };
    Ok(SyncBundle {
        is_valid: failure == SyncFailure::None,
        max_diff,
        timestamps: set.clone(),
        checked_at: now,
        failure,
    })
}

/// Percentage of valid bundles.
pub fn sync_success_rate(bundles: &[SyncBundle]) -> Result<f64, SyncError> {
    if bundles.is_empty() {
        return Err(SyncError::EmptySequence);
    }
    let flags: Vec<(bool, f64)> = bundles.iter().map(|b| (b.is_valid, b.max_diff)).collect();
    Ok(success_rate_from_rows(&flags).unwrap())
}

/// Mean max_diff over valid bundles, milliseconds.
pub fn avg_sync_error(bundles: &[SyncBundle]) -> Result<f64, SyncError> {
    let flags: Vec<(bool, f64)> = bundles.iter().map(|b| (b.is_valid, b.max_diff)).collect();
    avg_error_ms_from_rows(&flags).ok_or(SyncError::NoValidBundles)
}

/// Nearest-rank percentile of max_diff over valid bundles, milliseconds.
pub fn percentile_sync_error(bundles: &[SyncBundle], p: f64) -> Result<f64, SyncError> {
    let flags: Vec<(bool, f64)> = bundles.iter().map(|b| (b.is_valid, b.max_diff)).collect();
    percentile_error_ms_from_rows(&flags, p)
}

/// Metric kernels shared with dataset validation, which reads (flag,
/// max_diff) rows back from telemetry rather than full bundles.
pub fn success_rate_from_rows(rows: &[(bool, f64)]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let valid = rows.iter().filter(|(v, _)| *v).count();
    Some(100.0 * valid as f64 / rows.len() as f64)
}

pub fn avg_error_ms_from_rows(rows: &[(bool, f64)]) -> Option<f64> {
    let valid: Vec<f64> = rows.iter().filter(|(v, _)| *v).map(|(_, d)| *d).collect();
    if valid.is_empty() {
        return None;
    }
    Some(1000.0 * valid.iter().sum::<f64>() / valid.len() as f64)
}

pub fn percentile_error_ms_from_rows(rows: &[(bool, f64)], p: f64) -> Result<f64, SyncError> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(SyncError::BadPercentile(p));
    }
    let mut valid: Vec<f64> = rows.iter().filter(|(v, _)| *v).map(|(_, d)| *d).collect();
    if valid.is_empty() {
        return Err(SyncError::NoValidBundles);
    }
    valid.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * valid.len() as f64).ceil() as usize;
    Ok(1000.0 * valid[rank.max(1) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn set(entries: &[(&str, f64)]) -> TimestampSet {
        let mut s = TimestampSet::new();
        for (name, t) in entries {
            s.insert(*name, *t);
        }
        s
    }

    fn bundle(valid: bool, max_diff: f64) -> SyncBundle {
        SyncBundle {
            is_valid: valid,
            max_diff,
            timestamps: set(&[("a", 0.0)]),
            checked_at: 0.0,
            failure: if valid {
                SyncFailure::None
            } else {
                SyncFailure::Inconsistent
            },
        }
    }

    #[test]
    fn validate_consistent_set() {
        let policy = SyncPolicy::default();
        let s = set(&[("arm", 10.00), ("cam", 10.08), ("hand", 10.05)]);
        let b = validate(&policy, 10.10, &s).unwrap();
        assert!(b.is_valid);
        assert_relative_eq!(b.max_diff, 0.08, epsilon = 1e-12);
        assert_eq!(b.failure, SyncFailure::None);
    }

    #[test]
    fn validate_stale_source() {
        let policy = SyncPolicy::default();
        let s = set(&[("arm", 10.00), ("hand", 11.99)]);
        let b = validate(&policy, 12.00, &s).unwrap();
        assert!(!b.is_valid);
        assert_eq!(b.failure, SyncFailure::Stale("arm".into()));
    }

    #[test]
    fn validate_identical_timestamps() {
        let policy = SyncPolicy::default();
        let s = set(&[("arm", 5.0), ("cam", 5.0), ("hand", 5.0)]);
        let b = validate(&policy, 5.0, &s).unwrap();
        assert!(b.is_valid);
        assert_eq!(b.max_diff, 0.0);
    }

    #[test]
    fn validate_inconsistent() {
        let policy = SyncPolicy::default();
        let s = set(&[("arm", 10.00), ("cam", 10.15)]);
        let b = validate(&policy, 10.2, &s).unwrap();
        assert_eq!(b.failure, SyncFailure::Inconsistent);
        assert!(!b.is_valid);
    }

    #[test]
    fn validate_empty_set() {
        assert_eq!(
            validate(&SyncPolicy::default(), 0.0, &TimestampSet::new()),
            Err(SyncError::EmptySet)
        );
    }

    #[test]
    fn stale_offender_is_first_in_name_order() {
        let policy = SyncPolicy::default();
        let s = set(&[("zed", 1.0), ("alpha", 1.5), ("beta", 0.5)]);
        let b = validate(&policy, 5.0, &s).unwrap();
        assert_eq!(b.failure, SyncFailure::Stale("alpha".into()));
    }

    #[test]
    fn success_rate_examples() {
        let all = vec![bundle(true, 0.01); 4];
        assert_eq!(sync_success_rate(&all).unwrap(), 100.0);
        let mut one_bad = all.clone();
        one_bad[2] = bundle(false, 0.2);
        assert_eq!(sync_success_rate(&one_bad).unwrap(), 75.0);
        assert_eq!(sync_success_rate(&[]), Err(SyncError::EmptySequence));
    }

    #[test]
    fn avg_error_excludes_invalid() {
        let bundles = vec![bundle(true, 0.04), bundle(true, 0.06)];
        assert_relative_eq!(avg_sync_error(&bundles).unwrap(), 50.0, epsilon = 1e-12);
        let mixed = vec![bundle(true, 0.08), bundle(false, 0.5), bundle(false, 0.9)];
        assert_relative_eq!(avg_sync_error(&mixed).unwrap(), 80.0, epsilon = 1e-12);
        assert_eq!(avg_sync_error(&[bundle(false, 0.5)]), Err(SyncError::NoValidBundles));
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_relative_eq!(
            percentile_sync_error(&[bundle(true, 0.05)], 99.0).unwrap(),
            50.0,
            epsilon = 1e-12
        );
        let ladder: Vec<SyncBundle> = (1..=10).map(|k| bundle(true, 0.01 * k as f64)).collect();
        assert_relative_eq!(percentile_sync_error(&ladder, 50.0).unwrap(), 50.0, epsilon = 1e-9);
        assert_relative_eq!(percentile_sync_error(&ladder, 99.0).unwrap(), 100.0, epsilon = 1e-9);
        assert!(percentile_sync_error(&ladder, 0.0).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(SyncPolicy::default().validate().is_ok());
        assert!(SyncPolicy { freshness_window: 0.05, tolerance: 0.1 }.validate().is_err());
        assert!(SyncPolicy { freshness_window: -1.0, tolerance: 0.1 }.validate().is_err());
    }
}
