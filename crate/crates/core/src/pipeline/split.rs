use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::AugmentedHousehold;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// How a household is divided into training and test periods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    /// Test on the final `test_span_s` seconds.
    Chronological { test_span_s: f64 },
    /// Test on the first `test_span_s` seconds.
    TestInitial { test_span_s: f64 },
    /// Test on a centred block of `test_span_s` seconds.
    TestMiddle { test_span_s: f64 },
    /// One fold per UTC calendar day.
    LeaveOneDayOut,
}

impl Default for SplitMode {
    fn default() -> Self {
        SplitMode::Chronological {
            test_span_s: SECONDS_PER_DAY,
        }
    }
}

/// One train/test partition. Training data may be two disjoint segments
/// (before and after the test block); windows are cut per segment so none
/// crosses a boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub index: usize,
    pub test_range: Range<usize>,
    pub train_ranges: Vec<Range<usize>>,
    pub test: AugmentedHousehold,
    pub train: Vec<AugmentedHousehold>,
}

/// Partitions `h` according to `mode`, returning one fold per test block.
pub fn split_dataset(h: &AugmentedHousehold, mode: SplitMode) -> Result<Vec<Fold>> {
    let len = h.len();
    let grid = h.grid();
    let test_ranges: Vec<Range<usize>> = match mode {
        SplitMode::Chronological { test_span_s }
        | SplitMode::TestInitial { test_span_s }
        | SplitMode::TestMiddle { test_span_s } => {
            if !(test_span_s.is_finite() && test_span_s > 0.0) {
                return Err(Error::invalid("test_span_s", format!("{test_span_s} is not > 0")));
            }
            let span = (test_span_s / grid.period).round() as usize;
            if span == 0 || span >= len {
                return Err(Error::SpanExceedsDataset { span, len });
            }
            let start = match mode {
                SplitMode::Chronological { .. } => len - span,
                SplitMode::TestInitial { .. } => 0,
                _ => (len - span) / 2,
            };
            vec![start..start + span]
        }
        SplitMode::LeaveOneDayOut => {
            let days = day_ranges(h);
            if days.len() < 2 {
                return Err(Error::SpanExceedsDataset { span: len, len });
            }
            days
        }
    };

    test_ranges
        .into_iter()
        .enumerate()
        .map(|(index, test_range)| {
            let train_ranges: Vec<Range<usize>> = [0..test_range.start, test_range.end..len]
                .into_iter()
                .filter(|r| !r.is_empty())
                .collect();
            Ok(Fold {
                index,
                test: h.slice(test_range.clone())?,
                train: train_ranges
                    .iter()
                    .map(|r| h.slice(r.clone()))
                    .collect::<Result<_>>()?,
                test_range,
                train_ranges,
            })
        })
        .collect()
}

/// Contiguous sample ranges sharing a UTC calendar day.
pub fn day_ranges(h: &AugmentedHousehold) -> Vec<Range<usize>> {
    let grid = h.grid();
    let day_of = |i: usize| (grid.time_at(i) / SECONDS_PER_DAY).floor() as i64;
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..grid.len {
        if day_of(i) != day_of(i - 1) {
            out.push(start..i);
            start = i;
        }
    }
    out.push(start..grid.len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synthesize_household;
    use crate::types::{ApplianceSpec, InjectionProfile, PowerSeries};

    /// `days` days of hourly samples starting at midnight UTC.
    fn days(days: usize) -> AugmentedHousehold {
        let n = days * 24;
        let start = 19_000.0 * SECONDS_PER_DAY;
        let a = PowerSeries::new("a", start, 3600.0, (0..n).map(|i| i as f64).collect(), None).unwrap();
        let pv = PowerSeries::new("pv", start, 3600.0, vec![0.0; n], None).unwrap();
        let inj = InjectionProfile::new(pv, 10.0, 0.96).unwrap();
        let spec = ApplianceSpec::appliance("a", 1.0, 1.0).unwrap();
        synthesize_household(&[a], &[spec], None, &inj).unwrap()
    }

    /// 1-based day number of an hourly sample.
    fn day_number(sample: usize) -> usize {
        sample / 24 + 1
    }

    #[test]
    fn chronological_three_day_test() {
        let h = days(10);
        let folds = split_dataset(&h, SplitMode::Chronological { test_span_s: 3.0 * SECONDS_PER_DAY }).unwrap();
        assert_eq!(folds.len(), 1);
        let f = &folds[0];
        assert_eq!(f.train_ranges, vec![0..7 * 24]);
        assert_eq!(f.test_range, 7 * 24..10 * 24);
        assert_eq!(day_number(f.test_range.start), 8);
        assert_eq!(f.test.len(), 72);
        assert_eq!(f.train[0].len(), 168);
    }

    #[test]
    fn test_middle_on_three_days() {
        let h = days(3);
        let folds = split_dataset(&h, SplitMode::TestMiddle { test_span_s: SECONDS_PER_DAY }).unwrap();
        let f = &folds[0];
        assert_eq!(f.test_range, 24..48);
        assert_eq!(f.train_ranges, vec![0..24, 48..72]);
        assert_eq!(f.test.aggregate.active()[0], 24.0);
    }

    #[test]
    fn test_initial() {
        let h = days(4);
        let f = &split_dataset(&h, SplitMode::TestInitial { test_span_s: SECONDS_PER_DAY }).unwrap()[0];
        assert_eq!(f.test_range, 0..24);
        assert_eq!(f.train_ranges, vec![24..96]);
    }

    #[test]
    fn leave_one_day_out_ten_days() {
        let h = days(10);
        let folds = split_dataset(&h, SplitMode::LeaveOneDayOut).unwrap();
        assert_eq!(folds.len(), 10);
        for (d, f) in folds.iter().enumerate() {
            assert_eq!(f.test_range, d * 24..(d + 1) * 24);
            let covered: usize = f.train_ranges.iter().map(|r| r.len()).sum::<usize>() + f.test_range.len();
            assert_eq!(covered, 240);
            for r in &f.train_ranges {
                assert!(r.end <= f.test_range.start || r.start >= f.test_range.end);
            }
        }
        assert_eq!(folds[0].train_ranges.len(), 1);
        assert_eq!(folds[4].train_ranges.len(), 2);
    }

    #[test]
    fn span_too_long_is_rejected() {
        let h = days(2);
        let err = split_dataset(&h, SplitMode::Chronological { test_span_s: 2.0 * SECONDS_PER_DAY }).unwrap_err();
        assert!(matches!(err, Error::SpanExceedsDataset { .. }));
        assert!(split_dataset(&days(1), SplitMode::LeaveOneDayOut).is_err());
    }

    #[test]
    fn serde_shape() {
        let m: SplitMode = toml::from_str("mode = \"test_middle\"\ntest_span_s = 86400.0").unwrap();
        assert_eq!(m, SplitMode::TestMiddle { test_span_s: 86400.0 });
        let m: SplitMode = toml::from_str("mode = \"leave_one_day_out\"").unwrap();
        assert_eq!(m, SplitMode::LeaveOneDayOut);
    }
}
