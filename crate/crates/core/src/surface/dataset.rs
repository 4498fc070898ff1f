use std::sync::Arc;

use chrono::NaiveDate;
use volcast_autodiff::Tensor;

use super::{shared, KnotAxes, MarketMatrices, Series, VolSurfaceGrid};
use crate::error::DataError;

/// Share of the training days held out (latest first) for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Inclusive calendar range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self, DataError> {
        if start > end {
            return Err(DataError::Format(format!("empty date range {start}..={end}")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

impl std::fmt::Display for DateRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}..={}", self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: DateRange,
    pub validation: DateRange,
    pub test: DateRange,
}

impl DatasetSplit {
    pub fn new(train: DateRange, validation: DateRange, test: DateRange) -> Result<Self, DataError> {
        if !(train.end < validation.start && validation.end < test.start) {
            return Err(DataError::Format(format!(
                "split ranges must be disjoint and ordered: train {train}, validation {validation}, test {test}"
            )));
        }
        Ok(Self {
            train,
            validation,
            test,
        })
    }

    /// Hold out the latest 20% of the series days inside `train` as validation.
    pub fn with_validation(dates: &[NaiveDate], train: DateRange, test: DateRange) -> Result<Self, DataError> {
        let in_train: Vec<NaiveDate> = dates.iter().copied().filter(|d| train.contains(*d)).collect();
        if in_train.len() < 2 {
            return Err(DataError::Format(format!(
                "training range {train} holds {} series days; need at least 2",
                in_train.len()
            )));
        }
        let n_val = ((in_train.len() as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, in_train.len() - 1);
        let cut = in_train.len() - n_val;
        Self::new(
            DateRange::new(train.start, in_train[cut - 1])?,
            DateRange::new(in_train[cut], train.end)?,
            test,
        )
    }

    /// Last `test_fraction` of the days for testing, the rest for training
    /// with the usual validation hold-out.
    pub fn by_fraction(dates: &[NaiveDate], test_fraction: f64) -> Result<Self, DataError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(DataError::Format(format!("test fraction {test_fraction} not in (0, 1)")));
        }
        if dates.len() < 3 {
            return Err(DataError::Format(format!("{} days cannot be split three ways", dates.len())));
        }
        let n_test = ((dates.len() as f64 * test_fraction).round() as usize).clamp(1, dates.len() - 2);
        let cut = dates.len() - n_test;
        Self::with_validation(
            dates,
            DateRange::new(dates[0], dates[cut - 1])?,
            DateRange::new(dates[cut], dates[dates.len() - 1])?,
        )
    }
}

/// `n` consecutive input days and the day that follows.
#[derive(Clone, Debug)]
pub struct WindowedSample {
    pub inputs: Vec<Arc<VolSurfaceGrid>>,
    pub target: Arc<VolSurfaceGrid>,
    pub market: MarketMatrices,
}

impl WindowedSample {
    pub fn input_tensors(&self) -> Vec<Tensor> {
        self.inputs.iter().map(|g| g.to_tensor()).collect()
    }

    pub fn last_input(&self) -> &VolSurfaceGrid {
        self.inputs.last().expect("window is nonempty")
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub axes: KnotAxes,
    pub window: usize,
    /// Every series day inside each range, windowed or not.
    pub train_days: Vec<Arc<VolSurfaceGrid>>,
    pub validation_days: Vec<Arc<VolSurfaceGrid>>,
    pub test_days: Vec<Arc<VolSurfaceGrid>>,
    pub train: Vec<WindowedSample>,
    pub validation: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
    /// Splits too short to hold a single window.
    pub warnings: Vec<String>,
}

/// Slide a `window + 1` day frame through each split; frames never cross a
/// split boundary.
pub fn build_dataset(series: &Series, split: &DatasetSplit, window: usize) -> Result<Dataset, DataError> {
    if window == 0 {
        return Err(DataError::Format("window length must be at least 1".into()));
    }
    series.validate()?;
    let grids = shared(&series.grids);
    let mut warnings = Vec::new();
    let days_in = |range: &DateRange| -> Vec<Arc<VolSurfaceGrid>> {
        grids.iter().filter(|g| range.contains(g.date)).cloned().collect()
    };
    let mut windows = |name: &str, days: &[Arc<VolSurfaceGrid>], range: &DateRange| {
        if days.len() < window + 1 {
            let msg = format!(
                "{name} split {range} has {} days, fewer than window + 1 = {}; no samples",
                days.len(),
                window + 1
            );
            log::warn!("{msg}");
            warnings.push(msg);
            return Vec::new();
        }
        days.windows(window + 1)
            .map(|w| {
                let target = Arc::clone(&w[window]);
                WindowedSample {
                    inputs: w[..window].to_vec(),
                    market: MarketMatrices::for_grid(&series.axes, &target),
                    target,
                }
            })
            .collect()
    };
    let (train_days, validation_days, test_days) = (days_in(&split.train), days_in(&split.validation), days_in(&split.test));
    let train = windows("train", &train_days, &split.train);
    let validation = windows("validation", &validation_days, &split.validation);
    let test = windows("test", &test_days, &split.test);
    Ok(Dataset {
        axes: series.axes.clone(),
        window,
        train_days,
        validation_days,
        test_days,
        train,
        validation,
        test,
        warnings,
    })
}
