//! Seeded synthetic surfaces: a parametric smile whose level mean-reverts
//! towards a slowly oscillating target, with optional regime shocks.

use std::f64::consts::PI;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{KnotAxes, Series, VolSurfaceGrid, VOL_MAX, VOL_MIN};
use crate::error::DataError;

const TRADING_DAYS: f64 = 252.0;

/// Adds `size` to the level target on days `start_day..start_day + length`.
#[derive(Clone, Debug, PartialEq)]
pub struct Shock {
    pub start_day: usize,
    pub length: usize,
    pub size: f64,
}

impl Shock {
    pub fn covers(&self, day: usize) -> bool {
        day >= self.start_day && day < self.start_day + self.length
    }
}

/// `sigma(m, tau) = level_t + curvature_t (m - 1)^2 + slope_t tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub days: usize,
    pub start_date: NaiveDate,
    /// Long-run level.
    pub level: f64,
    pub curvature: f64,
    pub slope: f64,
    /// Fraction of the gap to the target closed per day.
    pub mean_reversion: f64,
    /// Daily standard deviation of the level innovation.
    pub noise: f64,
    /// Swing of the level target around `level`.
    pub drift_amplitude: f64,
    /// Period of the target, curvature and slope oscillations, in days.
    pub drift_period: f64,
    pub curvature_amplitude: f64,
    pub slope_amplitude: f64,
    pub shocks: Vec<Shock>,
    pub spot0: f64,
    pub rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            days: 500,
            start_date: NaiveDate::from_ymd_opt(2015, 1, 2).expect("valid date"),
            level: 0.2,
            curvature: 1.5,
            slope: 0.03,
            mean_reversion: 0.05,
            noise: 0.004,
            drift_amplitude: 0.02,
            drift_period: 126.0,
            curvature_amplitude: 0.3,
            slope_amplitude: 0.01,
            shocks: Vec::new(),
            spot0: 3000.0,
            rate: 0.02,
        }
    }
}

impl SyntheticConfig {
    /// Rejects parameters whose noise-free envelope leaves the vol range.
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Generator(m));
        if self.days == 0 {
            return fail("days must be positive".into());
        }
        if !(self.mean_reversion > 0.0 && self.mean_reversion <= 1.0) {
            return fail(format!("mean_reversion {} not in (0, 1]", self.mean_reversion));
        }
        if !(self.noise >= 0.0 && self.drift_period > 0.0 && self.spot0 > 0.0 && self.rate >= 0.0) {
            return fail("noise and rate must be nonnegative, drift_period and spot0 positive".into());
        }
        let shock_lo = self.shocks.iter().map(|s| s.size).fold(0.0, f64::min);
        let shock_hi = self.shocks.iter().map(|s| s.size).fold(0.0, f64::max);
        let level_lo = self.level - self.drift_amplitude.abs() + shock_lo;
        let level_hi = self.level + self.drift_amplitude.abs() + shock_hi;
        let axes = KnotAxes::standard();
        let dm2 = axes.moneyness.iter().map(|m| (m - 1.0).powi(2)).fold(0.0, f64::max);
        let curv = [
            (self.curvature - self.curvature_amplitude.abs()) * dm2,
            (self.curvature + self.curvature_amplitude.abs()) * dm2,
            0.0,
        ];
        let tau_max = axes.maturity[axes.maturity.len() - 1];
        let slope = [
            (self.slope - self.slope_amplitude.abs()) * tau_max,
            (self.slope + self.slope_amplitude.abs()) * tau_max,
            0.0,
        ];
        let lo = level_lo + curv.iter().copied().fold(f64::INFINITY, f64::min) + slope.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = level_hi + curv.iter().copied().fold(f64::NEG_INFINITY, f64::max) + slope.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo < VOL_MIN || hi > VOL_MAX {
            return fail(format!(
                "surface envelope [{lo:.4}, {hi:.4}] leaves [{VOL_MIN}, {VOL_MAX}]"
            ));
        }
        Ok(())
    }

    fn phase(&self, day: usize) -> f64 {
        2.0 * PI * day as f64 / self.drift_period
    }

    /// Level target on `day`, shocks included.
    pub fn target(&self, day: usize) -> f64 {
        let shock: f64 = self.shocks.iter().filter(|s| s.covers(day)).map(|s| s.size).sum();
        self.level + self.drift_amplitude * self.phase(day).sin() + shock
    }

    pub fn curvature_at(&self, day: usize) -> f64 {
        self.curvature + self.curvature_amplitude * (self.phase(day) + PI / 3.0).sin()
    }

    pub fn slope_at(&self, day: usize) -> f64 {
        self.slope + self.slope_amplitude * self.phase(day).cos()
    }
}

/// Weekdays starting at `start` (rolled forward off a weekend).
pub(crate) fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

pub fn synthetic_series(config: &SyntheticConfig, seed: u64) -> Result<Series, DataError> {
    config.validate()?;
    let axes = KnotAxes::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / TRADING_DAYS;
    let mut level = config.target(0);
    let mut spot = config.spot0;
    let mut grids = Vec::with_capacity(config.days);
    for (day, date) in business_days(config.start_date, config.days).into_iter().enumerate() {
        let (curv, slope) = (config.curvature_at(day), config.slope_at(day));
        let values = axes
            .moneyness
            .iter()
            .flat_map(|&m| {
                axes.maturity
                    .iter()
                    .map(move |&t| (level + curv * (m - 1.0).powi(2) + slope * t).clamp(VOL_MIN, VOL_MAX))
            })
            .collect();
        grids.push(VolSurfaceGrid::new(date, values, spot, config.rate)?);

        let z_level: f64 = StandardNormal.sample(&mut rng);
        let z_spot: f64 = StandardNormal.sample(&mut rng);
        level += config.mean_reversion * (config.target(day + 1) - level) + config.noise * z_level;
        level = level.clamp(VOL_MIN, VOL_MAX);
        let vol = level.max(VOL_MIN);
        spot *= ((config.rate - 0.5 * vol * vol) * dt + vol * dt.sqrt() * z_spot).exp();
    }
    Series::new(axes, grids)
}
