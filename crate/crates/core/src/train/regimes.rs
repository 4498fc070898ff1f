//! Named train/test splits: the full-history split, two stress regimes,
//! and high-volatility runs detected from the series itself.

use chrono::NaiveDate;

use super::metrics::nearest_rank_percentile;
use crate::error::DataError;
use crate::surface::{DatasetSplit, DateRange, Series};

/// Percentile of daily mean vol above which a day counts as high-vol.
pub const HIGH_VOL_PERCENTILE: f64 = 95.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeSplit {
    pub name: String,
    pub train: DateRange,
    pub test: DateRange,
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

fn named(name: &str, train: (NaiveDate, NaiveDate), test: (NaiveDate, NaiveDate)) -> RegimeSplit {
    RegimeSplit {
        name: name.into(),
        train: DateRange {
            start: train.0,
            end: train.1,
        },
        test: DateRange {
            start: test.0,
            end: test.1,
        },
    }
}

/// `main`, `subprime` and `covid` on the index-option history.
pub fn standard_regimes() -> Vec<RegimeSplit> {
    vec![
        named("main", (ymd(2004, 1, 5), ymd(2019, 12, 31)), (ymd(2020, 1, 1), ymd(2021, 8, 13))),
        named("subprime", (ymd(2004, 1, 5), ymd(2008, 9, 25)), (ymd(2008, 9, 26), ymd(2009, 5, 11))),
        named("covid", (ymd(2009, 5, 12), ymd(2020, 3, 4)), (ymd(2020, 3, 5), ymd(2020, 4, 21))),
    ]
}

fn coverage(dates: &[NaiveDate]) -> String {
    match (dates.first(), dates.last()) {
        (Some(a), Some(b)) => format!("{a}..={b}"),
        _ => "no days".into(),
    }
}

/// Error unless the series starts on or before `range.start` and ends on
/// or after `range.end`.
pub fn check_coverage(dates: &[NaiveDate], range: &DateRange, what: &str) -> Result<(), DataError> {
    match (dates.first(), dates.last()) {
        (Some(first), Some(last)) if *first <= range.start && *last >= range.end => Ok(()),
        _ => Err(DataError::Coverage {
            what: what.into(),
            start: range.start,
            end: range.end,
            have: coverage(dates),
        }),
    }
}

/// Check coverage of both ranges and carve out validation days.
pub fn resolve_split(dates: &[NaiveDate], regime: &RegimeSplit) -> Result<DatasetSplit, DataError> {
    check_coverage(dates, &regime.train, &format!("{} training range", regime.name))?;
    check_coverage(dates, &regime.test, &format!("{} test range", regime.name))?;
    DatasetSplit::with_validation(dates, regime.train, regime.test)
}

/// Threshold of daily mean vol and the days above it.
#[derive(Clone, Debug, PartialEq)]
pub struct VolThreshold {
    pub percentile: f64,
    pub threshold: f64,
    pub daily_means: Vec<f64>,
    /// Indices of days whose mean vol is strictly above the threshold.
    pub high_days: Vec<usize>,
}

pub fn vol_threshold(series: &Series, percentile: f64) -> Result<VolThreshold, DataError> {
    let daily_means: Vec<f64> = series.grids.iter().map(|g| g.mean()).collect();
    let threshold = nearest_rank_percentile(&daily_means, percentile)
        .ok_or_else(|| DataError::Format("series is empty".into()))?;
    let high_days = (0..daily_means.len()).filter(|&i| daily_means[i] > threshold).collect();
    Ok(VolThreshold {
        percentile,
        threshold,
        daily_means,
        high_days,
    })
}

/// Maximal runs of consecutive day indices.
pub fn contiguous_runs(days: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &d in days {
        match runs.last_mut() {
            Some((_, end)) if *end + 1 == d => *end = d,
            _ => runs.push((d, d)),
        }
    }
    runs
}

/// One split per high-vol run of at least `min_len` days: train on
/// everything before the run, test on the run. Named `shock1`, `shock2`, ...
pub fn detected_regimes(series: &Series, percentile: f64, min_len: usize) -> Result<Vec<RegimeSplit>, DataError> {
    let vt = vol_threshold(series, percentile)?;
    let dates = series.dates();
    let out = contiguous_runs(&vt.high_days)
        .into_iter()
        .filter(|(a, b)| b - a + 1 >= min_len.max(1) && *a >= 2)
        .enumerate()
        .map(|(i, (a, b))| {
            named(&format!("shock{}", i + 1), (dates[0], dates[a - 1]), (dates[a], dates[b]))
        })
        .collect();
    Ok(out)
}

/// Look up a regime by name: the standard splits first, then detected runs.
pub fn find_regime(series: &Series, name: &str, window: usize) -> Result<RegimeSplit, DataError> {
    if let Some(r) = standard_regimes().into_iter().find(|r| r.name == name) {
        return Ok(r);
    }
    if name.starts_with("shock") {
        let detected = detected_regimes(series, HIGH_VOL_PERCENTILE, window + 1)?;
        return detected.into_iter().find(|r| r.name == name).ok_or_else(|| {
            DataError::Format(format!("series has no high-vol run named {name} of at least {} days", window + 1))
        });
    }
    Err(DataError::Format(format!(
        "unknown split '{name}' (expected main, subprime, covid or shock<N>)"
    )))
}
