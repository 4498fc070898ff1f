//! ConvLSTM and SA-ConvLSTM: convolutional LSTM cells, optionally followed
//! by a self-attention memory, stacked in layers and projected to one map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volcast_autodiff::{Bound, ParamSet, Tape, Tensor, Var};

use super::{
    accumulate_per_sample, mae, run_frozen, Builder, Conv, Forecaster, Init, InputScaling, ModelKind, ModelSettings, Result,
};
use crate::error::ModelError;
use crate::surface::{Dataset, WindowedSample};

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentConfig {
    pub input_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub layers: usize,
    pub self_attention: bool,
    /// Query and key channels of the memory module.
    pub attn_channels: usize,
    pub gate_bias: bool,
}

impl RecurrentConfig {
    pub fn from_settings(kind: ModelKind, s: &ModelSettings) -> Result<Self> {
        let self_attention = match kind {
            ModelKind::ConvLstm => false,
            ModelKind::SaConvLstm => true,
            other => return Err(ModelError::config(format!("{other} is not a recurrent model"))),
        };
        let c = Self {
            input_channels: InputScaling::channels(s.augmented),
            hidden: s.hidden,
            kernel: s.kernel,
            layers: s.layers,
            self_attention,
            attn_channels: s.attn_channels,
            gate_bias: s.gate_bias,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(ModelError::config("recurrent model needs at least one layer"));
        }
        if self.hidden == 0 || self.input_channels == 0 || (self.self_attention && self.attn_channels == 0) {
            return Err(ModelError::config("channel counts must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Gates {
    pub f: Var,
    pub i: Var,
    pub g: Var,
    pub o: Var,
}

/// One convolution over `[x; h]` producing the f, i, g, o pre-activations.
#[derive(Clone, Copy, Debug)]
pub struct CellWeights {
    pub conv: Conv,
    pub hidden: usize,
}

pub fn convlstm_cell_step(
    tape: &Tape,
    bound: &Bound,
    x: Var,
    prev: &ConvLstmState,
    w: &CellWeights,
) -> Result<(ConvLstmState, Gates)> {
    let (xs, hs) = (tape.shape(x), tape.shape(prev.h));
    if xs.len() != 3 || hs.len() != 3 || xs[1..] != hs[1..] || hs[0] != w.hidden || tape.shape(prev.c) != hs {
        return Err(ModelError::config(format!(
            "cell input {xs:?} and state {hs:?} do not fit hidden size {}",
            w.hidden
        )));
    }
    let z = w.conv.apply(tape, bound, tape.concat(&[x, prev.h], 0)?)?;
    let part = |k: usize| tape.slice(z, 0, k * w.hidden, w.hidden);
    let gates = Gates {
        f: tape.sigmoid(part(0)?),
        i: tape.sigmoid(part(1)?),
        g: tape.tanh(part(2)?),
        o: tape.sigmoid(part(3)?),
    };
    let c = tape.add(tape.mul(gates.f, prev.c)?, tape.mul(gates.i, gates.g)?)?;
    let h = tape.mul(gates.o, tape.tanh(c))?;
    Ok((ConvLstmState { h, c }, gates))
}

/// 1x1 projections and gate convolution of the self-attention memory.
#[derive(Clone, Copy, Debug)]
pub struct SaWeights {
    pub q: Conv,
    pub k_h: Conv,
    pub v_h: Conv,
    pub k_m: Conv,
    pub v_m: Conv,
    /// `2C -> C` fusion of the two attention outputs.
    pub z: Conv,
    /// `[Z; H] -> [o; g; i]`.
    pub gates: Conv,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SaStep {
    pub h_out: Var,
    pub m_next: Var,
    /// `[N, N]` attention over spatial positions, rows are queries.
    pub attn_h: Var,
    pub attn_m: Var,
    pub input_gate: Var,
}

fn flat(tape: &Tape, v: Var) -> Result<Var> {
    let s = tape.shape(v);
    Ok(tape.reshape(v, &[s[0], s[1] * s[2]])?)
}

pub fn sa_memory_step(tape: &Tape, bound: &Bound, h_in: Var, m_prev: Var, w: &SaWeights) -> Result<SaStep> {
    let shape = tape.shape(h_in);
    if shape.len() != 3 || shape[0] != w.hidden || tape.shape(m_prev) != shape {
        return Err(ModelError::config(format!(
            "memory step: hidden {shape:?} and memory {:?} must both be [{}, h, w]",
            tape.shape(m_prev),
            w.hidden
        )));
    }
    let q = flat(tape, w.q.apply(tape, bound, h_in)?)?;
    let qt = tape.transpose(q)?;
    let attend = |k: Conv, v: Conv, src: Var| -> Result<(Var, Var)> {
        let k = flat(tape, k.apply(tape, bound, src)?)?;
        let v = flat(tape, v.apply(tape, bound, src)?)?;
        let a = tape.softmax(tape.matmul(qt, k)?, 1)?;
        Ok((tape.matmul(v, tape.transpose(a)?)?, a))
    };
    let (z_h, attn_h) = attend(w.k_h, w.v_h, h_in)?;
    let (z_m, attn_m) = attend(w.k_m, w.v_m, m_prev)?;
    let z = tape.reshape(tape.concat(&[z_h, z_m], 0)?, &[2 * w.hidden, shape[1], shape[2]])?;
    let z = w.z.apply(tape, bound, z)?;

    let pre = w.gates.apply(tape, bound, tape.concat(&[z, h_in], 0)?)?;
    let part = |k: usize| tape.slice(pre, 0, k * w.hidden, w.hidden);
    let o = tape.sigmoid(part(0)?);
    let g = tape.tanh(part(1)?);
    let i = tape.sigmoid(part(2)?);
    let keep = tape.mul(tape.offset(tape.neg(i), 1.0), m_prev)?;
    let m_next = tape.add(keep, tape.mul(i, g)?)?;
    let h_out = tape.mul(o, m_next)?;
    Ok(SaStep {
        h_out,
        m_next,
        attn_h,
        attn_m,
        input_gate: i,
    })
}

/// Forward trace of a rollout.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// Standardised `[1, h, w]` prediction.
    pub output: Var,
    /// Channel count of the inputs each layer consumed.
    pub layer_input_channels: Vec<usize>,
    pub attention: Vec<Var>,
    pub gates: Vec<Gates>,
    pub hidden: Vec<Var>,
    pub memory: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct RecurrentModel {
    kind: ModelKind,
    settings: ModelSettings,
    scaling: InputScaling,
    pub config: RecurrentConfig,
    params: ParamSet,
    pub cells: Vec<CellWeights>,
    pub memories: Vec<SaWeights>,
    /// Bias-free 1x1 projection of the last hidden map.
    pub w_final: Conv,
}

impl RecurrentModel {
    pub fn new(kind: ModelKind, settings: &ModelSettings, scaling: InputScaling, seed: u64) -> Result<Self> {
        let config = RecurrentConfig::from_settings(kind, settings)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut rng);
        let hd = config.hidden;
        let mut cells = Vec::new();
        let mut memories = Vec::new();
        for l in 0..config.layers {
            let c_in = if l == 0 { config.input_channels } else { hd };
            let conv = b.conv(&format!("l{l}.cell"), c_in + hd, 4 * hd, config.kernel, false, Init::Fan)?;
            let bias = if config.gate_bias {
                let mut init = vec![0.0; 4 * hd];
                init[..hd].iter_mut().for_each(|v| *v = 1.0);
                Some(b.params.insert(format!("l{l}.cell.b"), Tensor::new(&[4 * hd], init)?)?)
            } else {
                None
            };
            cells.push(CellWeights {
                conv: Conv { bias, ..conv },
                hidden: hd,
            });
            if config.self_attention {
                let a = config.attn_channels;
                let p = |b: &mut Builder, n: &str, i: usize, o: usize| b.conv(&format!("l{l}.sa.{n}"), i, o, 1, false, Init::Fan);
                memories.push(SaWeights {
                    q: p(&mut b, "q", hd, a)?,
                    k_h: p(&mut b, "k_h", hd, a)?,
                    v_h: p(&mut b, "v_h", hd, hd)?,
                    k_m: p(&mut b, "k_m", hd, a)?,
                    v_m: p(&mut b, "v_m", hd, hd)?,
                    z: p(&mut b, "z", 2 * hd, hd)?,
                    gates: b.conv(&format!("l{l}.sa.gates"), 2 * hd, 3 * hd, 1, config.gate_bias, Init::Fan)?,
                    hidden: hd,
                });
            }
        }
        let w_final = b.conv("final", hd, 1, 1, false, Init::Fan)?;
        Ok(Self {
            kind,
            settings: settings.clone(),
            scaling,
            config,
            params: b.params,
            cells,
            memories,
            w_final,
        })
    }

    pub fn rollout(&self, tape: &Tape, bound: &Bound, window: &[Var]) -> Result<Rollout> {
        let first = window.first().ok_or_else(|| ModelError::config("empty input window"))?;
        let shape = tape.shape(*first);
        if shape.len() != 3 || shape[0] != self.config.input_channels {
            return Err(ModelError::config(format!(
                "inputs must be [{}, h, w], got {shape:?}",
                self.config.input_channels
            )));
        }
        let zeros = tape.constant(Tensor::zeros(&[self.config.hidden, shape[1], shape[2]]));
        let mut trace = Rollout {
            output: zeros,
            layer_input_channels: Vec::new(),
            attention: Vec::new(),
            gates: Vec::new(),
            hidden: Vec::new(),
            memory: Vec::new(),
        };
        let mut inputs = window.to_vec();
        for (l, cell) in self.cells.iter().enumerate() {
            trace.layer_input_channels.push(tape.shape(inputs[0])[0]);
            let mut state = ConvLstmState { h: zeros, c: zeros };
            let mut m = zeros;
            let mut outs = Vec::with_capacity(inputs.len());
            for &x in &inputs {
                let (next, gates) = convlstm_cell_step(tape, bound, x, &state, cell)?;
                trace.gates.push(gates);
                state = next;
                if let Some(sa) = self.memories.get(l) {
                    let step = sa_memory_step(tape, bound, state.h, m, sa)?;
                    trace.attention.extend([step.attn_h, step.attn_m]);
                    m = step.m_next;
                    trace.memory.push(m);
                    state.h = step.h_out;
                }
                trace.hidden.push(state.h);
                outs.push(state.h);
            }
            inputs = outs;
        }
        trace.output = self.w_final.apply(tape, bound, *inputs.last().expect("nonempty window"))?;
        Ok(trace)
    }

    fn sample_loss(&self, tape: &Tape, bound: &Bound, sample: &WindowedSample) -> Result<Var> {
        let pred = self.forward(tape, bound, sample)?;
        mae(tape, pred, &sample.target)
    }

    /// Prediction in vol units, `[1, 20, 20]`.
    pub fn forward(&self, tape: &Tape, bound: &Bound, sample: &WindowedSample) -> Result<Var> {
        let xs: Vec<Var> = self
            .scaling
            .encode_window(sample, self.settings.augmented)
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        let y = self.rollout(tape, bound, &xs)?.output;
        Ok(self.scaling.decode(tape, y))
    }
}

impl Forecaster for RecurrentModel {
    fn kind(&self) -> ModelKind {
        self.kind
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
        data.train.len()
    }

    fn accumulate_batch(&mut self, data: &Dataset, batch: &[usize]) -> Result<f64> {
        accumulate_per_sample(self, batch, |m, tape, bound, i| m.sample_loss(tape, bound, &data.train[i]))
    }

    fn predict(&self, sample: &WindowedSample) -> Result<Vec<f64>> {
        run_frozen(&self.params, |tape, bound| self.forward(tape, bound, sample))
    }
}
