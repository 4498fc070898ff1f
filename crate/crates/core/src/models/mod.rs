//! The five forecasters and the pieces they share.

pub mod convtf;
pub mod piconvtf;
pub mod pinn;
pub mod recurrent;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use volcast_autodiff::{Bound, ParamId, ParamSet, Tape, Tensor, Var};

use crate::error::ModelError;
use crate::surface::{Dataset, KnotAxes, VolSurfaceGrid, WindowedSample, GRID, GRID_CELLS};

pub use convtf::{ConvTf, ConvTfConfig, Head, SffnConfig};
pub use piconvtf::{DerivativeMode, PhysicsLossConfig, PiConvTf};
pub use pinn::{Pinn, PinnConfig, PinnNets};
pub use recurrent::{RecurrentConfig, RecurrentModel};

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Pinn,
    ConvLstm,
    SaConvLstm,
    ConvTf,
    PiConvTf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Pinn,
        ModelKind::ConvLstm,
        ModelKind::SaConvLstm,
        ModelKind::ConvTf,
        ModelKind::PiConvTf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pinn => "pinn",
            Self::ConvLstm => "convlstm",
            Self::SaConvLstm => "sa_convlstm",
            Self::ConvTf => "convtf",
            Self::PiConvTf => "piconvtf",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::config(format!("unknown model '{s}' (expected pinn, convlstm, sa_convlstm, convtf or piconvtf)")))
    }
}

/// Hyperparameters for any model kind; fields irrelevant to a kind are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Hidden channels (recurrent models, ConvTF `d`) or PINN width.
    pub hidden: usize,
    pub kernel: usize,
    pub layers: usize,
    pub heads: usize,
    /// Query/key channels of the self-attention memory.
    pub attn_channels: usize,
    pub gate_bias: bool,
    /// Five-channel `[tau; sigma; S'; r; K']` inputs.
    pub augmented: bool,
    pub head: Head,
    pub sffn_layers: usize,
    pub sffn_peak: usize,
    pub sffn_kernel: usize,
    pub lambda: f64,
    pub derivative_mode: DerivativeMode,
    /// PINN training cycles; the LR schedule restarts at each.
    pub cycles: usize,
    /// PINN points per epoch; 0 means every (day, knot) pair.
    pub points_per_epoch: usize,
}

impl ModelSettings {
    /// Best configurations per model.
    pub fn defaults(kind: ModelKind) -> Self {
        let base = Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.001,
            hidden: 64,
            kernel: 3,
            layers: 1,
            heads: 4,
            attn_channels: 8,
            gate_bias: true,
            augmented: false,
            head: Head::Sffn,
            sffn_layers: 30,
            sffn_peak: 128,
            sffn_kernel: 1,
            lambda: 0.1,
            derivative_mode: DerivativeMode::PointwiseAnalytic,
            cycles: 2,
            points_per_epoch: 0,
        };
        match kind {
            ModelKind::Pinn => Self {
                epochs: 2000,
                batch_size: 256,
                lr: 0.1,
                hidden: 10_000,
                ..base
            },
            ModelKind::ConvLstm | ModelKind::SaConvLstm => base,
            ModelKind::ConvTf | ModelKind::PiConvTf => Self {
                batch_size: 16,
                hidden: 32,
                ..base
            },
        }
    }
}

/// Input standardisation fitted on the training days. Vol channels are
/// mapped to `(v - mean) / std`, predictions mapped back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub vol_mean: f64,
    pub vol_std: f64,
    /// First training day's spot; divides S and K in augmented inputs and
    /// the PINN's spot input.
    pub spot_ref: f64,
    pub moneyness: Vec<f64>,
    pub maturity: Vec<f64>,
}

impl InputScaling {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let first = data
            .train_days
            .first()
            .ok_or_else(|| ModelError::config("training split has no days"))?;
        let n = (data.train_days.len() * GRID_CELLS) as f64;
        let mean = data.train_days.iter().flat_map(|g| g.values.iter()).sum::<f64>() / n;
        let var = data
            .train_days
            .iter()
            .flat_map(|g| g.values.iter())
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n;
        Ok(Self {
            vol_mean: mean,
            vol_std: var.sqrt().max(1e-3),
            spot_ref: first.spot,
            moneyness: data.axes.moneyness.clone(),
            maturity: data.axes.maturity.clone(),
        })
    }

    /// Identity vol scaling on the standard axes.
    pub fn identity(spot_ref: f64) -> Self {
        let axes = KnotAxes::standard();
        Self {
            vol_mean: 0.0,
            vol_std: 1.0,
            spot_ref,
            moneyness: axes.moneyness,
            maturity: axes.maturity,
        }
    }

    pub fn channels(augmented: bool) -> usize {
        if augmented {
            5
        } else {
            1
        }
    }

    /// `[1, 20, 20]` standardised vols, or `[5, 20, 20]`
    /// `[tau; sigma; S / S_ref; r; K / S_ref]` when augmented.
    pub fn encode(&self, grid: &VolSurfaceGrid, augmented: bool) -> Tensor {
        let vols = grid.values.iter().map(|v| (v - self.vol_mean) / self.vol_std);
        if !augmented {
            return Tensor::new(&[1, GRID, GRID], vols.collect()).expect("400 cells");
        }
        let mut data = Vec::with_capacity(5 * GRID_CELLS);
        data.extend(self.moneyness.iter().flat_map(|_| self.maturity.iter().copied()));
        data.extend(vols);
        data.extend(std::iter::repeat_n(grid.spot / self.spot_ref, GRID_CELLS));
        data.extend(std::iter::repeat_n(grid.rate, GRID_CELLS));
        data.extend(self.moneyness.iter().flat_map(|&m| std::iter::repeat_n(m * grid.spot / self.spot_ref, GRID)));
        Tensor::new(&[5, GRID, GRID], data).expect("2000 cells")
    }

    pub fn encode_window(&self, sample: &WindowedSample, augmented: bool) -> Vec<Tensor> {
        sample.inputs.iter().map(|g| self.encode(g, augmented)).collect()
    }

    /// Map a standardised prediction back to vol units.
    pub fn decode(&self, tape: &Tape, y: Var) -> Var {
        tape.offset(tape.scale(y, self.vol_std), self.vol_mean)
    }
}

/// Common interface of the trained forecasters.
pub trait Forecaster {
    fn kind(&self) -> ModelKind;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn settings(&self) -> &ModelSettings;
    fn scaling(&self) -> &InputScaling;
    /// Training units in the dataset (windows, or surface points for the PINN).
    fn units(&self, data: &Dataset) -> usize;
    /// Units drawn per epoch from a fresh shuffle of all units.
    fn epoch_units(&self, data: &Dataset) -> usize {
        self.units(data)
    }
    /// Add the gradient of the batch-mean loss to the parameter gradient
    /// slots and return the batch-mean loss.
    fn accumulate_batch(&mut self, data: &Dataset, batch: &[usize]) -> Result<f64>;
    /// Next-day volatility grid (400 values, row-major).
    fn predict(&self, sample: &WindowedSample) -> Result<Vec<f64>>;
}

/// Fresh model of the given kind.
pub fn build_model(
    kind: ModelKind,
    settings: &ModelSettings,
    scaling: InputScaling,
    window: usize,
    seed: u64,
) -> Result<Box<dyn Forecaster>> {
    Ok(match kind {
        ModelKind::Pinn => Box::new(Pinn::new(settings, scaling, seed)?),
        ModelKind::ConvLstm | ModelKind::SaConvLstm => Box::new(RecurrentModel::new(kind, settings, scaling, seed)?),
        ModelKind::ConvTf => Box::new(ConvTf::new(settings, scaling, window, seed)?),
        ModelKind::PiConvTf => Box::new(PiConvTf::new(settings, scaling, window, seed)?),
    })
}

/// Shared per-sample accumulation for the window models: one tape per
/// sample, gradients scaled by `1 / batch`.
pub(crate) fn accumulate_per_sample<M, F>(model: &mut M, batch: &[usize], loss: F) -> Result<f64>
where
    M: Forecaster + ?Sized,
    F: Fn(&M, &Tape, &Bound, usize) -> Result<Var>,
{
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &i in batch {
        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let l = loss(model, &tape, &bound, i)?;
        total += tape.value_ref(l).item()?;
        let grads = tape.backward(l)?;
        model.params_mut().accumulate(&bound, &grads, scale);
    }
    Ok(total * scale)
}

/// Mean absolute error between a prediction and a grid, both `[1, 20, 20]`.
pub(crate) fn mae(tape: &Tape, pred: Var, truth: &VolSurfaceGrid) -> Result<Var> {
    let t = tape.constant(truth.to_tensor());
    Ok(tape.mean(tape.abs(tape.sub(pred, t)?)))
}

pub(crate) fn run_frozen<F>(params: &ParamSet, f: F) -> Result<Vec<f64>>
where
    F: FnOnce(&Tape, &Bound) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let out = f(&tape, &bound)?;
    Ok(tape.value(out).into_data())
}

/// A convolution with optional bias and "same" zero padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn apply(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let k = bound.get(self.kernel);
        let size = tape.shape(k)[2];
        Ok(tape.conv2d(x, k, bound.opt(self.bias), size / 2)?)
    }
}

/// Kernel initialisation bounds.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Uniform in +-1/sqrt(fan_in).
    Fan,
    /// Uniform in +-sqrt(6/fan_in), for deep rectifier stacks.
    He,
    Zero,
}

pub(crate) struct Builder<'a> {
    pub params: ParamSet,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params: ParamSet::new(),
            rng,
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<ParamId> {
        let bound = match init {
            Init::Fan => 1.0 / (fan_in as f64).sqrt(),
            Init::He => (6.0 / fan_in as f64).sqrt(),
            Init::Zero => return self.fill(name, shape, 0.0),
        };
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        Ok(self.params.insert(name, t)?)
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.params.insert(name, Tensor::full(shape, value))?)
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool, init: Init) -> Result<Conv> {
        if k % 2 == 0 {
            return Err(ModelError::config(format!("{name}: kernel size {k} must be odd")));
        }
        let kernel = self.uniform(&format!("{name}.w"), &[c_out, c_in, k, k], c_in * k * k, init)?;
        let bias = if bias {
            Some(self.fill(&format!("{name}.b"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Conv { kernel, bias })
    }
}
