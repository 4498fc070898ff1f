//! Percentage errors on volatility grids and on the call prices they imply.

use crate::error::Error;
use crate::models::piconvtf::call_prices;
use crate::surface::MarketMatrices;

/// Percentage of call prices at or below which cells are dropped.
pub const CALL_FILTER_PERCENTILE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mape {
    /// Percent; zero when no cell was usable.
    pub value: f64,
    pub used: usize,
    /// Cells skipped because the truth was zero.
    pub excluded: usize,
}

/// `100 * mean(|pred - truth| / |truth|)`, skipping zero-truth cells.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<Mape, Error> {
    if pred.len() != truth.len() {
        return Err(Error::config(format!(
            "prediction has {} cells, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for (p, t) in pred.iter().zip(truth) {
        if *t == 0.0 {
            continue;
        }
        sum += ((p - t) / t).abs();
        used += 1;
    }
    let excluded = pred.len() - used;
    if excluded > 0 {
        log::debug!("MAPE skipped {excluded} zero-truth cells");
    }
    Ok(Mape {
        value: if used == 0 { 0.0 } else { 100.0 * sum / used as f64 },
        used,
        excluded,
    })
}

/// Nearest-rank percentile: the `ceil(p / 100 * n)`-th smallest value
/// (1-based, at least the first). `None` on empty input.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Indices of the values strictly above their `p`-th percentile.
pub fn retained_above_percentile(values: &[f64], p: f64) -> Vec<usize> {
    let Some(threshold) = nearest_rank_percentile(values, p) else {
        return Vec::new();
    };
    (0..values.len()).filter(|&i| values[i] > threshold).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilteredMape {
    pub mape: Mape,
    pub retained: usize,
}

/// Price both grids, keep the cells whose true price lies above the day's
/// `percentile`-th true price, and take the MAPE over those.
pub fn call_price_filtered_mape(
    sigma_pred: &[f64],
    sigma_true: &[f64],
    market: &MarketMatrices,
    percentile: f64,
) -> Result<FilteredMape, Error> {
    let c_pred = call_prices(sigma_pred, market)?;
    let c_true = call_prices(sigma_true, market)?;
    let keep = retained_above_percentile(&c_true, percentile);
    let pred: Vec<f64> = keep.iter().map(|&i| c_pred[i]).collect();
    let truth: Vec<f64> = keep.iter().map(|&i| c_true[i]).collect();
    Ok(FilteredMape {
        mape: mape(&pred, &truth)?,
        retained: keep.len(),
    })
}
