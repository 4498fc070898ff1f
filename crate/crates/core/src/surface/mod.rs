//! Daily implied-volatility grids on a fixed moneyness x maturity lattice,
//! plus quote ingestion, synthetic generation, storage and windowing.

mod dataset;
mod interpolate;
mod io;
mod synthetic;

use std::sync::Arc;

use chrono::NaiveDate;
use volcast_autodiff::Tensor;

use crate::black_scholes::MarketPoint;
use crate::error::DataError;

pub use dataset::{build_dataset, Dataset, DatasetSplit, DateRange, WindowedSample};
pub use interpolate::{ingest_quotes, interpolate_surface, OptionQuote};
pub use io::{load_series, read_quotes, save_series, write_series, read_series, FORMAT_TAG, FORMAT_VERSION};
pub use synthetic::{synthetic_series, Shock, SyntheticConfig};

/// Knots per axis.
pub const GRID: usize = 20;
pub const GRID_CELLS: usize = GRID * GRID;
pub const VOL_MIN: f64 = 0.01;
pub const VOL_MAX: f64 = 2.0;

/// Moneyness rows and maturity columns shared by every grid of a series.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotAxes {
    pub moneyness: Vec<f64>,
    pub maturity: Vec<f64>,
}

impl KnotAxes {
    /// 20 moneyness knots on [0.9, 1.1] and 20 maturities 0.05, 0.10, ..., 1.0.
    pub fn standard() -> Self {
        let moneyness = (0..GRID).map(|i| 0.9 + 0.2 * i as f64 / (GRID - 1) as f64).collect();
        let maturity = (1..=GRID).map(|j| j as f64 / GRID as f64).collect();
        Self { moneyness, maturity }
    }

    pub fn new(moneyness: Vec<f64>, maturity: Vec<f64>) -> Result<Self, DataError> {
        let axes = Self { moneyness, maturity };
        axes.validate()?;
        Ok(axes)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|x| x.is_finite() && *x > 0.0);
        if self.moneyness.len() != GRID || self.maturity.len() != GRID {
            return Err(DataError::Format(format!(
                "axes must have {GRID} knots each, got {} x {}",
                self.moneyness.len(),
                self.maturity.len()
            )));
        }
        if !increasing(&self.moneyness) || !increasing(&self.maturity) {
            return Err(DataError::Format("axes must be positive and strictly increasing".into()));
        }
        Ok(())
    }
}

/// One day's surface. `values` is row-major: row `i` is moneyness knot `i`,
/// column `j` is maturity knot `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolSurfaceGrid {
    pub date: NaiveDate,
    pub values: Vec<f64>,
    pub spot: f64,
    pub rate: f64,
}

impl VolSurfaceGrid {
    pub fn new(date: NaiveDate, values: Vec<f64>, spot: f64, rate: f64) -> Result<Self, DataError> {
        let grid = Self {
            date,
            values,
            spot,
            rate,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |message: String| {
            Err(DataError::Grid {
                date: self.date,
                message,
            })
        };
        if self.values.len() != GRID_CELLS {
            return fail(format!("expected {GRID_CELLS} values, got {}", self.values.len()));
        }
        if let Some(v) = self.values.iter().find(|v| !(VOL_MIN..=VOL_MAX).contains(*v)) {
            return fail(format!("volatility {v} outside [{VOL_MIN}, {VOL_MAX}]"));
        }
        if !(self.spot.is_finite() && self.spot > 0.0 && self.rate.is_finite()) {
            return fail(format!("invalid spot {} or rate {}", self.spot, self.rate));
        }
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * GRID + j]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Single-channel `[1, 20, 20]` map.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, GRID, GRID], self.values.clone()).expect("grid holds 400 values")
    }
}

/// An ordered run of grids on shared axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub axes: KnotAxes,
    pub grids: Vec<VolSurfaceGrid>,
}

impl Series {
    pub fn new(axes: KnotAxes, grids: Vec<VolSurfaceGrid>) -> Result<Self, DataError> {
        let s = Self { axes, grids };
        s.validate()?;
        Ok(s)
    }

    /// Axes valid, every grid valid, dates strictly increasing.
    pub fn validate(&self) -> Result<(), DataError> {
        self.axes.validate()?;
        for g in &self.grids {
            g.validate()?;
        }
        if let Some(w) = self.grids.windows(2).find(|w| w[0].date >= w[1].date) {
            return Err(DataError::Grid {
                date: w[1].date,
                message: format!("dates not strictly increasing after {}", w[0].date),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.grids.iter().map(|g| g.date).collect()
    }
}

/// Target-day tau, spot, rate and strike matrices, row-major like the grids.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketMatrices {
    pub tau: Vec<f64>,
    pub spot: Vec<f64>,
    pub rate: Vec<f64>,
    pub strike: Vec<f64>,
}

impl MarketMatrices {
    /// Broadcast the day's spot and rate over the knots; strike = m * S.
    pub fn from_day(axes: &KnotAxes, spot: f64, rate: f64) -> Self {
        let mut tau = Vec::with_capacity(GRID_CELLS);
        let mut strike = Vec::with_capacity(GRID_CELLS);
        for &m in &axes.moneyness {
            for &t in &axes.maturity {
                tau.push(t);
                strike.push(m * spot);
            }
        }
        Self {
            tau,
            spot: vec![spot; GRID_CELLS],
            rate: vec![rate; GRID_CELLS],
            strike,
        }
    }

    pub fn for_grid(axes: &KnotAxes, grid: &VolSurfaceGrid) -> Self {
        Self::from_day(axes, grid.spot, grid.rate)
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn point(&self, cell: usize, vol: f64) -> MarketPoint {
        MarketPoint {
            spot: self.spot[cell],
            strike: self.strike[cell],
            rate: self.rate[cell],
            tau: self.tau[cell],
            vol,
        }
    }

    /// Positive entries, tau in (0, 1], strike/spot on the moneyness axis.
    pub fn validate(&self, axes: &KnotAxes) -> Result<(), DataError> {
        let n = self.tau.len();
        if [self.spot.len(), self.rate.len(), self.strike.len()].iter().any(|&l| l != n) || n != GRID_CELLS {
            return Err(DataError::Format("market matrices must each hold 400 cells".into()));
        }
        for cell in 0..n {
            let (t, s, k) = (self.tau[cell], self.spot[cell], self.strike[cell]);
            if !(t > 0.0 && t <= 1.0) || s <= 0.0 || k <= 0.0 || self.rate[cell] < 0.0 {
                return Err(DataError::Format(format!("invalid market entry at cell {cell}")));
            }
            let m = axes.moneyness[cell / GRID];
            if (k / s - m).abs() > 1e-9 {
                return Err(DataError::Format(format!(
                    "strike/spot {} does not match moneyness knot {m} at cell {cell}",
                    k / s
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn shared(grids: &[VolSurfaceGrid]) -> Vec<Arc<VolSurfaceGrid>> {
    grids.iter().cloned().map(Arc::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_axes() {
        let a = KnotAxes::standard();
        assert_eq!(a.moneyness.len(), 20);
        assert!((a.moneyness[0] - 0.9).abs() < 1e-15 && (a.moneyness[19] - 1.1).abs() < 1e-15);
        assert!((a.maturity[0] - 0.05).abs() < 1e-15 && a.maturity[19] == 1.0);
        a.validate().unwrap();
    }

    #[test]
    fn grid_rejects_out_of_range() {
        let d = NaiveDate::from_ymd_opt(2020, 1, 2).unwrap();
        assert!(VolSurfaceGrid::new(d, vec![0.2; 399], 100.0, 0.01).is_err());
        let mut v = vec![0.2; 400];
        v[7] = 2.5;
        assert!(VolSurfaceGrid::new(d, v, 100.0, 0.01).is_err());
    }

    #[test]
    fn market_matrices_follow_axes() {
        let a = KnotAxes::standard();
        let mm = MarketMatrices::from_day(&a, 3000.0, 0.02);
        mm.validate(&a).unwrap();
        assert_eq!(mm.tau[1], a.maturity[1]);
        assert!((mm.strike[GRID * 3] - a.moneyness[3] * 3000.0).abs() < 1e-9);
    }
}
