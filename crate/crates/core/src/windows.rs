//! Sliding-window samples, recurrent / non-recurrent labels and the
//! chronological train / validation / test split.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::features::FeatureTensor;
use crate::{Error, Result};

pub const NETWORK_INCIDENT: &str = "network_incident";
pub const LINK_INCIDENT: &str = "link_incident";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Recurrent,
    NonRecurrent,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Recurrent => "recurrent",
            Self::NonRecurrent => "nonrecurrent",
        }
    }
}

/// One `(context, prediction)` sample of a single link, stored as an index
/// into the feature tensor. Context covers in-day steps `start..start + c`
/// and the prediction window the following `h` steps of the same day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSlice {
    pub link: usize,
    pub day: usize,
    pub start: usize,
    pub condition: Condition,
}

impl WindowSlice {
    /// Flat grid index of the first context step.
    pub fn context_flat(&self, ft: &FeatureTensor) -> usize {
        ft.grid().flat(self.day, self.start)
    }

    /// Flat grid index of the first prediction step.
    pub fn t0_flat(&self, ft: &FeatureTensor, c: usize) -> usize {
        self.context_flat(ft) + c
    }

    /// Values of one variable over the full `c + h` window.
    pub fn series(&self, ft: &FeatureTensor, var: usize, len: usize) -> Vec<f64> {
        let s = self.context_flat(ft);
        (s..s + len).map(|t| ft.value(self.link, t, var)).collect()
    }

    /// The `c` past target values (standardized).
    pub fn past_target(&self, ft: &FeatureTensor, c: usize) -> Vec<f64> {
        self.series(ft, ft.target_index(), c)
    }

    /// The `h` future target values in mph.
    pub fn target_mph(&self, ft: &FeatureTensor, c: usize, h: usize) -> Vec<f64> {
        let t0 = self.t0_flat(ft, c);
        (t0..t0 + h).map(|t| ft.speed_mph(self.link, t)).collect()
    }

    /// The `h` future target values (standardized).
    pub fn target(&self, ft: &FeatureTensor, c: usize, h: usize) -> Vec<f64> {
        let t0 = self.t0_flat(ft, c);
        let v = ft.target_index();
        (t0..t0 + h).map(|t| ft.value(self.link, t, v)).collect()
    }
}

/// Prose rule: a window is non-recurrent iff the network incident indicator
/// is set anywhere in its prediction window (positions `c..c + h`).
pub fn label_condition(network: &[f64], c: usize) -> Condition {
    if network[c..].iter().any(|&v| v > 0.5) {
        Condition::NonRecurrent
    } else {
        Condition::Recurrent
    }
}

/// Every in-day window of every link, ordered by link, day, start.
pub fn slice_windows(ft: &FeatureTensor, c: usize, h: usize) -> Result<Vec<WindowSlice>> {
    let spd = ft.grid().steps_per_day();
    if c == 0 || h == 0 {
        return Err(Error::Config("context and horizon lengths must be positive".into()));
    }
    if c + h > spd {
        return Err(Error::Config(format!(
            "context {c} + horizon {h} exceeds the {spd} steps of a day"
        )));
    }
    let net = ft.var_index(NETWORK_INCIDENT).ok_or_else(|| {
        Error::Data(format!("feature tensor lacks the {NETWORK_INCIDENT} variable"))
    })?;
    let per_day = spd - c - h + 1;
    let mut out = Vec::with_capacity(ft.n_links() * ft.grid().n_days() * per_day);
    for link in 0..ft.n_links() {
        for day in 0..ft.grid().n_days() {
            let base = ft.grid().flat(day, 0);
            let indicator: Vec<f64> = (0..spd).map(|s| ft.value(link, base + s, net)).collect();
            for start in 0..per_day {
                out.push(WindowSlice {
                    link,
                    day,
                    start,
                    condition: label_condition(&indicator[start..start + c + h], c),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

/// Contiguous day ranges of the three partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaySplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        let f = [self.train_frac, self.val_frac, self.test_frac];
        if f.iter().any(|&x| x.is_nan() || x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {f:?}"
            )));
        }
        Ok(())
    }

    /// Oldest days train, newest days test. Validation and test get the
    /// nearest whole number of days (at least one each).
    pub fn split_days(&self, n_days: usize) -> Result<DaySplit> {
        self.validate()?;
        if n_days < 3 {
            return Err(Error::Split(format!("need at least 3 days to split, got {n_days}")));
        }
        let val = ((self.val_frac * n_days as f64).round() as usize).max(1);
        let test = ((self.test_frac * n_days as f64).round() as usize).max(1);
        if val + test >= n_days {
            return Err(Error::Split(format!(
                "{n_days} days leave no training day after {val} validation and {test} test days"
            )));
        }
        let train_end = n_days - val - test;
        Ok(DaySplit {
            train: 0..train_end,
            val: train_end..train_end + val,
            test: train_end + val..n_days,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partitions {
    pub train: Vec<WindowSlice>,
    pub val: Vec<WindowSlice>,
    pub test: Vec<WindowSlice>,
}

/// Assigns every slice to the partition containing its prediction window.
pub fn chronological_split(slices: &[WindowSlice], days: &DaySplit) -> Partitions {
    let mut p = Partitions::default();
    for s in slices {
        if days.train.contains(&s.day) {
            p.train.push(*s);
        } else if days.val.contains(&s.day) {
            p.val.push(*s);
        } else if days.test.contains(&s.day) {
            p.test.push(*s);
        }
    }
    p
}

pub fn filter_condition(slices: &[WindowSlice], cond: Condition) -> Vec<WindowSlice> {
    slices.iter().filter(|s| s.condition == cond).copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub first_day: String,
    pub last_day: String,
    pub days: usize,
    pub recurrent: usize,
    pub nonrecurrent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub c: usize,
    pub h: usize,
    pub split: DaySplit,
    pub train: PartitionCounts,
    pub val: PartitionCounts,
    pub test: PartitionCounts,
}

impl SplitManifest {
    pub fn new(ft: &FeatureTensor, c: usize, h: usize, split: &DaySplit, parts: &Partitions) -> Self {
        let counts = |days: &Range<usize>, slices: &[WindowSlice]| PartitionCounts {
            first_day: ft.grid().days()[days.start].to_string(),
            last_day: ft.grid().days()[days.end - 1].to_string(),
            days: days.len(),
            recurrent: slices.iter().filter(|s| s.condition == Condition::Recurrent).count(),
            nonrecurrent: slices
                .iter()
                .filter(|s| s.condition == Condition::NonRecurrent)
                .count(),
        };
        Self {
            c,
            h,
            split: split.clone(),
            train: counts(&split.train, &parts.train),
            val: counts(&split.val, &parts.val),
            test: counts(&split.test, &parts.test),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_days_split_eight_one_one() {
        let s = SplitSpec::default().split_days(10).unwrap();
        assert_eq!(s, DaySplit { train: 0..8, val: 8..9, test: 9..10 });
    }

    #[test]
    fn three_days_split_one_each() {
        let s = SplitSpec::default().split_days(3).unwrap();
        assert_eq!(s, DaySplit { train: 0..1, val: 1..2, test: 2..3 });
    }

    #[test]
    fn too_few_days_is_a_split_error() {
        assert!(matches!(SplitSpec::default().split_days(2), Err(Error::Split(_))));
        let bad = SplitSpec { train_frac: 0.5, val_frac: 0.1, test_frac: 0.1 };
        assert!(matches!(bad.split_days(10), Err(Error::Config(_))));
    }

    #[test]
    fn four_canonical_cases() {
        // c = 4, h = 2
        assert_eq!(label_condition(&[0.0; 6], 4), Condition::Recurrent);
        assert_eq!(label_condition(&[1., 1., 0., 0., 0., 0.], 4), Condition::Recurrent);
        assert_eq!(label_condition(&[0., 0., 0., 0., 0., 1.], 4), Condition::NonRecurrent);
        assert_eq!(label_condition(&[0., 0., 1., 1., 1., 0.], 4), Condition::NonRecurrent);
    }
}
