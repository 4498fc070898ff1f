//! PI-ConvTF: the convolutional transformer trained with an extra
//! Black-Scholes residual penalty on the call prices implied by its
//! predicted surface.

use std::cell::Cell;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use volcast_autodiff::{ParamSet, Tape, Tensor, Var};

use super::convtf::{ConvTf, ConvTfConfig};
use super::{accumulate_per_sample, mae, run_frozen, Forecaster, InputScaling, ModelKind, ModelSettings, Result};
use crate::black_scholes::bs_price;
use crate::error::ModelError;
use crate::surface::{Dataset, MarketMatrices, VolSurfaceGrid, WindowedSample, GRID, GRID_CELLS};

/// Vols below this are lifted to it before pricing.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    /// Closed-form Greeks per cell.
    PointwiseAnalytic,
    /// Finite differences across the priced grid, strike derivatives
    /// turned into spot derivatives by homogeneity.
    GridHomogeneity,
}

impl DerivativeMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::PointwiseAnalytic => "pointwise_analytic",
            Self::GridHomogeneity => "grid_homogeneity",
        }
    }
}

impl FromStr for DerivativeMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointwise_analytic" => Ok(Self::PointwiseAnalytic),
            "grid_homogeneity" => Ok(Self::GridHomogeneity),
            _ => Err(ModelError::config(format!(
                "unknown derivative mode '{s}' (expected pointwise_analytic or grid_homogeneity)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicsLossConfig {
    pub lambda: f64,
    pub mode: DerivativeMode,
}

impl Default for PhysicsLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            mode: DerivativeMode::PointwiseAnalytic,
        }
    }
}

impl PhysicsLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::config(format!("lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Call prices implied by a vol grid, plus the pieces the residual reuses.
#[derive(Clone, Copy, Debug)]
pub struct CallGrid {
    /// `[20, 20]` prices.
    pub price: Var,
    /// `[20, 20]` vols after flooring.
    pub sigma: Var,
    /// `[20, 20]` d1 values.
    pub d1: Var,
    /// Cells whose vol was raised to the floor.
    pub clamped: usize,
}

fn cells(values: &[f64]) -> Tensor {
    Tensor::new(&[GRID, GRID], values.to_vec()).expect("400 cells")
}

fn check_market(market: &MarketMatrices) -> Result<()> {
    if [&market.tau, &market.spot, &market.rate, &market.strike]
        .iter()
        .any(|v| v.len() != GRID_CELLS)
    {
        return Err(ModelError::config("market matrices must each hold 400 cells"));
    }
    Ok(())
}

/// Closed-form call price per cell, differentiable in `sigma` (any shape
/// holding 400 values).
pub fn eval_call_grid(tape: &Tape, sigma: Var, market: &MarketMatrices) -> Result<CallGrid> {
    check_market(market)?;
    let sigma = tape.reshape(sigma, &[GRID, GRID])?;
    let clamped = tape.value_ref(sigma).data().iter().filter(|&&s| !(s >= SIGMA_FLOOR)).count();
    if clamped > 0 {
        log::warn!("{clamped} predicted vols below {SIGMA_FLOOR} were floored before pricing");
    }
    let sigma = tape.clamp_min(sigma, SIGMA_FLOOR);

    let spot = tape.constant(cells(&market.spot));
    let log_moneyness: Vec<f64> = market.spot.iter().zip(&market.strike).map(|(s, k)| (s / k).ln()).collect();
    let sqrt_tau: Vec<f64> = market.tau.iter().map(|t| t.sqrt()).collect();
    let discounted: Vec<f64> = (0..GRID_CELLS)
        .map(|c| market.strike[c] * (-market.rate[c] * market.tau[c]).exp())
        .collect();

    let sd = tape.mul(sigma, tape.constant(cells(&sqrt_tau)))?;
    let half_var = tape.scale(tape.square(sigma), 0.5);
    let drift = tape.mul(tape.add(half_var, tape.constant(cells(&market.rate)))?, tape.constant(cells(&market.tau)))?;
    let d1 = tape.div(tape.add(tape.constant(cells(&log_moneyness)), drift)?, sd)?;
    let d2 = tape.sub(d1, sd)?;
    let price = tape.sub(
        tape.mul(spot, tape.norm_cdf(d1))?,
        tape.mul(tape.constant(cells(&discounted)), tape.norm_cdf(d2))?,
    )?;
    Ok(CallGrid {
        price,
        sigma,
        d1,
        clamped,
    })
}

/// Closed-form call prices for plain vol values, floored like
/// [`eval_call_grid`].
pub fn call_prices(sigma: &[f64], market: &MarketMatrices) -> Result<Vec<f64>> {
    check_market(market)?;
    if sigma.len() != GRID_CELLS {
        return Err(ModelError::config(format!("expected 400 vols, got {}", sigma.len())));
    }
    sigma
        .iter()
        .enumerate()
        .map(|(c, &s)| Ok(bs_price(&market.point(c, s.max(SIGMA_FLOOR)))?))
        .collect()
}

/// Divide spot and strike by spot so each cell prices in units of its
/// underlying.
fn spot_normalized(market: &MarketMatrices) -> MarketMatrices {
    MarketMatrices {
        tau: market.tau.clone(),
        spot: vec![1.0; market.spot.len()],
        rate: market.rate.clone(),
        strike: market.strike.iter().zip(&market.spot).map(|(k, s)| k / s).collect(),
    }
}

/// Mean absolute pricing-equation residual over the grid, computed on
/// spot-normalized prices. Returns the loss and the floored-vol count.
pub fn physics_loss(tape: &Tape, sigma: Var, market: &MarketMatrices, mode: DerivativeMode) -> Result<(Var, usize)> {
    let market = spot_normalized(market);
    let grid = eval_call_grid(tape, sigma, &market)?;
    let rate = tape.constant(cells(&market.rate));
    let half_var = tape.scale(tape.square(grid.sigma), 0.5);
    let (theta, delta, gamma) = match mode {
        DerivativeMode::PointwiseAnalytic => {
            let sqrt_tau = tape.constant(cells(&market.tau.iter().map(|t| t.sqrt()).collect::<Vec<_>>()));
            let sd = tape.mul(grid.sigma, sqrt_tau)?;
            let pdf = tape.norm_pdf(grid.d1);
            let d2 = tape.sub(grid.d1, sd)?;
            let discounted: Vec<f64> = (0..GRID_CELLS)
                .map(|c| market.rate[c] * market.strike[c] * (-market.rate[c] * market.tau[c]).exp())
                .collect();
            let theta = tape.add(
                tape.div(tape.mul(pdf, grid.sigma)?, tape.scale(sqrt_tau, 2.0))?,
                tape.mul(tape.constant(cells(&discounted)), tape.norm_cdf(d2))?,
            )?;
            (theta, tape.norm_cdf(grid.d1), tape.div(pdf, sd)?)
        }
        DerivativeMode::GridHomogeneity => {
            let m: Vec<f64> = (0..GRID).map(|i| market.strike[i * GRID]).collect();
            let t: Vec<f64> = market.tau[..GRID].to_vec();
            let (d1, d2) = (first_difference(&m), second_difference(&m));
            let c_k = tape.matmul(tape.constant(d1), grid.price)?;
            let c_kk = tape.matmul(tape.constant(d2), grid.price)?;
            let c_t = tape.matmul(grid.price, tape.constant(first_difference(&t).transpose_2d()))?;
            let col = |f: fn(f64) -> f64| tape.constant(Tensor::new(&[GRID, 1], m.iter().map(|&x| f(x)).collect()).expect("20 rows"));
            let delta = tape.sub(grid.price, tape.mul(col(|x| x), c_k)?)?;
            let gamma = tape.mul(col(|x| x * x), c_kk)?;
            (c_t, delta, gamma)
        }
    };
    // With S = 1: -C_tau - rC + r C_S + sigma^2 C_SS / 2.
    let residual = tape.add(
        tape.sub(tape.mul(rate, tape.sub(delta, grid.price)?)?, theta)?,
        tape.mul(half_var, gamma)?,
    )?;
    Ok((tape.mean(tape.abs(residual)), grid.clamped))
}

/// Data MAE plus `lambda` times the physics loss.
pub fn piconvtf_loss(
    tape: &Tape,
    sigma_pred: Var,
    truth: &VolSurfaceGrid,
    market: &MarketMatrices,
    config: &PhysicsLossConfig,
) -> Result<(Var, usize)> {
    let data = mae(tape, sigma_pred, truth)?;
    let (phys, clamped) = physics_loss(tape, sigma_pred, market, config.mode)?;
    Ok((tape.add(data, tape.scale(phys, config.lambda))?, clamped))
}

/// Rows: d/dx on a nonuniform axis, central inside and one-sided at the ends.
fn first_difference(x: &[f64]) -> Tensor {
    let n = x.len();
    let mut t = Tensor::zeros(&[n, n]);
    let a = t.data_mut();
    for i in 0..n {
        let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
        let h = x[hi] - x[lo];
        a[i * n + hi] += 1.0 / h;
        a[i * n + lo] -= 1.0 / h;
    }
    t
}

/// Rows: d2/dx2 on a nonuniform axis; end rows reuse their neighbour's stencil.
fn second_difference(x: &[f64]) -> Tensor {
    let n = x.len();
    let mut t = Tensor::zeros(&[n, n]);
    let a = t.data_mut();
    for i in 0..n {
        let c = i.clamp(1, n - 2);
        let (hm, hp) = (x[c] - x[c - 1], x[c + 1] - x[c]);
        let s = 2.0 / (hm + hp);
        a[i * n + c - 1] += s / hm;
        a[i * n + c] -= s * (1.0 / hm + 1.0 / hp);
        a[i * n + c + 1] += s / hp;
    }
    t
}

trait Transpose2d {
    fn transpose_2d(&self) -> Tensor;
}

impl Transpose2d for Tensor {
    fn transpose_2d(&self) -> Tensor {
        let (r, c) = (self.shape()[0], self.shape()[1]);
        Tensor::from_fn(&[c, r], |k| self.data()[(k % r) * c + k / r])
    }
}

/// ConvTF plus the physics-informed loss. Built from the same seed, its
/// parameters coincide with a plain [`ConvTf`].
#[derive(Clone, Debug)]
pub struct PiConvTf {
    pub inner: ConvTf,
    pub physics: PhysicsLossConfig,
    clamp_events: Cell<usize>,
}

impl PiConvTf {
    pub fn new(settings: &ModelSettings, scaling: InputScaling, window: usize, seed: u64) -> Result<Self> {
        let config = ConvTfConfig::from_settings(settings, window)?;
        Self::with_config(settings, config, scaling, seed)
    }

    pub fn with_config(settings: &ModelSettings, config: ConvTfConfig, scaling: InputScaling, seed: u64) -> Result<Self> {
        let physics = PhysicsLossConfig {
            lambda: settings.lambda,
            mode: settings.derivative_mode,
        };
        physics.validate()?;
        let inner = ConvTf::with_config(ModelKind::PiConvTf, settings, config, scaling, seed)?;
        Ok(Self {
            inner,
            physics,
            clamp_events: Cell::new(0),
        })
    }

    /// Vol cells floored before pricing so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events.get()
    }
}

impl Forecaster for PiConvTf {
    fn kind(&self) -> ModelKind {
        ModelKind::PiConvTf
    }

    fn params(&self) -> &ParamSet {
        self.inner.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.inner.params_mut()
    }

    fn settings(&self) -> &ModelSettings {
        self.inner.settings()
    }

    fn scaling(&self) -> &InputScaling {
        self.inner.scaling()
    }

    fn units(&self, data: &Dataset) -> usize {
        data.train.len()
    }

    fn accumulate_batch(&mut self, data: &Dataset, batch: &[usize]) -> Result<f64> {
        accumulate_per_sample(self, batch, |m, tape, bound, i| {
            let sample = &data.train[i];
            let pred = m.inner.forward(tape, bound, sample)?;
            let (loss, clamped) = piconvtf_loss(tape, pred, &sample.target, &sample.market, &m.physics)?;
            m.clamp_events.set(m.clamp_events.get() + clamped);
            Ok(loss)
        })
    }

    fn predict(&self, sample: &WindowedSample) -> Result<Vec<f64>> {
        run_frozen(self.inner.params(), |tape, bound| self.inner.forward(tape, bound, sample))
    }
}
