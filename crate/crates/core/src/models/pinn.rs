//! Physics-informed network: one net for the call price and one for the
//! volatility, each with a single softplus hidden layer, fitted to observed
//! vols plus the pricing-equation residual of the price net.
//!
//! Inputs are rows `(S / S_ref, tau, m, r)`. The price net works in units
//! of `S_ref`, so its residual is the usual one divided by `S_ref`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volcast_autodiff::{Bound, ParamId, ParamSet, Tape, Tensor, Var};

use super::{Builder, Forecaster, Init, InputScaling, ModelKind, ModelSettings, Result};
use crate::error::ModelError;
use crate::surface::{Dataset, VolSurfaceGrid, WindowedSample, GRID, GRID_CELLS};

pub const PINN_INPUTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinnConfig {
    pub hidden: usize,
}

impl PinnConfig {
    pub fn from_settings(s: &ModelSettings) -> Result<Self> {
        if s.hidden == 0 {
            return Err(ModelError::config("PINN hidden width must be positive"));
        }
        Ok(Self { hidden: s.hidden })
    }
}

/// `input -> hidden (softplus) -> 1`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    fn build(b: &mut Builder, name: &str, hidden: usize) -> Result<Self> {
        Ok(Self {
            w1: b.uniform(&format!("{name}.w1"), &[PINN_INPUTS, hidden], PINN_INPUTS, Init::Fan)?,
            b1: b.fill(&format!("{name}.b1"), &[1, hidden], 0.0)?,
            w2: b.uniform(&format!("{name}.w2"), &[hidden, 1], hidden, Init::Fan)?,
            b2: b.fill(&format!("{name}.b2"), &[1, 1], 0.0)?,
        })
    }

    fn apply(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.softplus(tape.add(tape.matmul(x, bound.get(self.w1))?, bound.get(self.b1))?);
        Ok(tape.add(tape.matmul(h, bound.get(self.w2))?, bound.get(self.b2))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PinnNets {
    pub c_net: Mlp,
    pub sigma_net: Mlp,
    /// Spot that divides S in the inputs and scales prices.
    pub spot_ref: f64,
}

/// Price, its derivatives and the vol, each `[B, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct PinnOutputs {
    pub c: Var,
    pub c_tau: Var,
    pub c_s: Var,
    pub c_ss: Var,
    pub sigma: Var,
}

/// `(C, sigma)` for a `[B, 4]` input batch; sigma passes through softplus.
pub fn pinn_forward(tape: &Tape, nets: &PinnNets, bound: &Bound, x: Var) -> Result<(Var, Var)> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != PINN_INPUTS {
        return Err(ModelError::config(format!("PINN inputs must be [B, {PINN_INPUTS}], got {s:?}")));
    }
    let c = nets.c_net.apply(tape, bound, x)?;
    let sigma = tape.softplus(nets.sigma_net.apply(tape, bound, x)?);
    Ok((c, sigma))
}

/// `dC/dtau`, `dC/dS` and `d2C/dS2` of a `[B, 1]` price built row by row
/// from the leaf `x`. Moneyness is an input, so spot derivatives are taken
/// at fixed strike: `d/dS|K = d/dS|m - (m / S) d/dm|S`.
pub fn price_derivatives(tape: &Tape, c: Var, x: Var) -> Result<(Var, Var, Var)> {
    let s = tape.slice(x, 1, 0, 1)?;
    let m_over_s = tape.div(tape.slice(x, 1, 2, 1)?, s)?;
    // Rows are independent, so the gradient of the sum holds each row's own derivative.
    let spot_derivative = |f: Var| -> Result<(Var, Var)> {
        let g = tape.grad_graph(tape.sum(f), &[x])?[0];
        let fixed_k = tape.sub(tape.slice(g, 1, 0, 1)?, tape.mul(m_over_s, tape.slice(g, 1, 2, 1)?)?)?;
        Ok((fixed_k, g))
    };
    let (c_s, g) = spot_derivative(c)?;
    let c_tau = tape.slice(g, 1, 1, 1)?;
    let (c_ss, _) = spot_derivative(c_s)?;
    Ok((c_tau, c_s, c_ss))
}

/// Forward pass plus the price derivatives; `x` must be a tape leaf.
pub fn pinn_outputs(tape: &Tape, nets: &PinnNets, bound: &Bound, x: Var) -> Result<PinnOutputs> {
    let (c, sigma) = pinn_forward(tape, nets, bound, x)?;
    let (c_tau, c_s, c_ss) = price_derivatives(tape, c, x)?;
    Ok(PinnOutputs {
        c,
        c_tau,
        c_s,
        c_ss,
        sigma,
    })
}

/// Mean absolute vol error plus mean absolute pricing residual. `x` holds
/// the same rows the outputs were computed from.
pub fn pinn_loss(tape: &Tape, out: &PinnOutputs, x: &Tensor, sigma_true: &[f64]) -> Result<Var> {
    let b = x.shape()[0];
    if sigma_true.len() != b || b == 0 {
        return Err(ModelError::config(format!(
            "PINN batch has {b} rows but {} target vols",
            sigma_true.len()
        )));
    }
    let column = |j: usize| tape.constant(Tensor::from_fn(&[b, 1], |i| x.data()[i * PINN_INPUTS + j]));
    let (s, r) = (column(0), column(3));
    let truth = tape.constant(Tensor::new(&[b, 1], sigma_true.to_vec())?);
    let vol_term = tape.mean(tape.abs(tape.sub(out.sigma, truth)?));

    // -C_tau - rC + r S C_S + sigma^2 S^2 C_SS / 2
    let carry = tape.mul(r, tape.sub(tape.mul(s, out.c_s)?, out.c)?)?;
    let diffusion = tape.scale(tape.mul(tape.square(tape.mul(out.sigma, s)?), out.c_ss)?, 0.5);
    let residual = tape.add(tape.sub(carry, out.c_tau)?, diffusion)?;
    Ok(tape.add(vol_term, tape.mean(tape.abs(residual)))?)
}

/// Input rows for every knot of a day.
pub fn day_inputs(grid: &VolSurfaceGrid, scaling: &InputScaling) -> Tensor {
    Tensor::from_fn(&[GRID_CELLS, PINN_INPUTS], |k| point_input(grid, scaling, k / PINN_INPUTS)[k % PINN_INPUTS])
}

fn point_input(grid: &VolSurfaceGrid, scaling: &InputScaling, cell: usize) -> [f64; PINN_INPUTS] {
    [
        grid.spot / scaling.spot_ref,
        scaling.maturity[cell % GRID],
        scaling.moneyness[cell / GRID],
        grid.rate,
    ]
}

#[derive(Clone, Debug)]
pub struct Pinn {
    settings: ModelSettings,
    scaling: InputScaling,
    params: ParamSet,
    pub config: PinnConfig,
    pub nets: PinnNets,
}

impl Pinn {
    pub fn new(settings: &ModelSettings, scaling: InputScaling, seed: u64) -> Result<Self> {
        let config = PinnConfig::from_settings(settings)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut rng);
        let nets = PinnNets {
            c_net: Mlp::build(&mut b, "c", config.hidden)?,
            sigma_net: Mlp::build(&mut b, "sigma", config.hidden)?,
            spot_ref: scaling.spot_ref,
        };
        Ok(Self {
            settings: settings.clone(),
            scaling,
            params: b.params,
            config,
            nets,
        })
    }

    /// Input rows and target vols for training points; point `i` is knot
    /// `i % 400` of training day `i / 400`.
    pub fn batch(&self, data: &Dataset, points: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let mut x = Vec::with_capacity(points.len() * PINN_INPUTS);
        let mut sigma = Vec::with_capacity(points.len());
        for &p in points {
            let day = data
                .train_days
                .get(p / GRID_CELLS)
                .ok_or_else(|| ModelError::config(format!("training point {p} out of range")))?;
            x.extend(point_input(day, &self.scaling, p % GRID_CELLS));
            sigma.push(day.values[p % GRID_CELLS]);
        }
        Ok((Tensor::new(&[points.len(), PINN_INPUTS], x)?, sigma))
    }

    /// Vols for a day's market state (400 values).
    pub fn predict_day(&self, grid: &VolSurfaceGrid) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let x = tape.constant(day_inputs(grid, &self.scaling));
        let (_, sigma) = pinn_forward(&tape, &self.nets, &bound, x)?;
        Ok(tape.value(sigma).into_data())
    }
}

impl Forecaster for Pinn {
    fn kind(&self) -> ModelKind {
        ModelKind::Pinn
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn settings(&self) -> &ModelSettings {
        &self.settings
    }

    fn scaling(&self) -> &InputScaling {
        &self.scaling
    }

    fn units(&self, data: &Dataset) -> usize {
        data.train_days.len() * GRID_CELLS
    }

    fn epoch_units(&self, data: &Dataset) -> usize {
        match self.settings.points_per_epoch {
            0 => self.units(data),
            n => n.min(self.units(data)),
        }
    }

    fn accumulate_batch(&mut self, data: &Dataset, batch: &[usize]) -> Result<f64> {
        let (x, sigma_true) = self.batch(data, batch)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let xv = tape.leaf(x.clone());
        let out = pinn_outputs(&tape, &self.nets, &bound, xv)?;
        let loss = pinn_loss(&tape, &out, &x, &sigma_true)?;
        let value = tape.value_ref(loss).item()?;
        let grads = tape.backward(loss)?;
        self.params.accumulate(&bound, &grads, 1.0);
        Ok(value)
    }

    /// Uses the target day's spot and rate as the market state.
    fn predict(&self, sample: &WindowedSample) -> Result<Vec<f64>> {
        self.predict_day(&sample.target)
    }
}
