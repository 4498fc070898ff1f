//! Convolutional transformer: convolutional embedding, sinusoidal slot
//! encoding, multi-head convolutional attention with per-pixel softmax over
//! sequence slots, an encoder/decoder stack and an SFFN prediction head.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use volcast_autodiff::{Bound, ParamId, ParamSet, Tape, Tensor, Var, LEAKY_SLOPE};

use super::{
    accumulate_per_sample, mae, run_frozen, Builder, Conv, Forecaster, Init, InputScaling, ModelKind, ModelSettings, Result,
};
use crate::error::ModelError;
use crate::surface::{Dataset, WindowedSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Sffn,
    /// A single bias-free 1x1 convolution.
    Conv,
}

impl FromStr for Head {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sffn" => Ok(Self::Sffn),
            "conv" => Ok(Self::Conv),
            _ => Err(ModelError::config(format!("unknown head '{s}' (expected sffn or conv)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SffnConfig {
    pub layers: usize,
    pub peak: usize,
    pub kernel: usize,
}

impl Default for SffnConfig {
    fn default() -> Self {
        Self {
            layers: 30,
            peak: 128,
            kernel: 1,
        }
    }
}

pub const SFFN_LAYERS: usize = 30;

/// Output width of every SFFN layer. The first half doubles from `d` up to
/// `peak`, the second half halves back down, and the last layer has one
/// channel.
pub fn sffn_schedule(d: usize, cfg: &SffnConfig) -> Result<Vec<usize>> {
    if cfg.layers != SFFN_LAYERS {
        return Err(ModelError::config(format!(
            "SFFN must have {SFFN_LAYERS} layers, got {}",
            cfg.layers
        )));
    }
    if cfg.peak < d || !cfg.peak.is_power_of_two() && cfg.peak != d {
        return Err(ModelError::config(format!(
            "SFFN peak {} must be at least d = {d} and reachable by doubling",
            cfg.peak
        )));
    }
    let mut rise = Vec::new();
    let mut w = d * 2;
    while w <= cfg.peak {
        rise.push(w);
        w *= 2;
    }
    if rise.last() != Some(&cfg.peak) {
        if d == cfg.peak {
            rise = vec![d];
        } else {
            return Err(ModelError::config(format!("SFFN peak {} is not d = {d} times a power of two", cfg.peak)));
        }
    }
    let mut fall = Vec::new();
    let mut w = cfg.peak / 2;
    while w >= 2 {
        fall.push(w);
        w /= 2;
    }
    let rise_layers = cfg.layers / 2;
    let fall_layers = cfg.layers - rise_layers - 1;
    if fall.len() > fall_layers || rise.len() > rise_layers {
        return Err(ModelError::config("SFFN peak too wide for the layer budget"));
    }
    let mut out = spread(&rise, rise_layers, false);
    out.extend(spread(&fall, fall_layers, true));
    out.push(1);
    Ok(out)
}

/// Repeat each level so the total is `n`; leftover repeats go to the last
/// levels, or the first ones when `front`.
fn spread(levels: &[usize], n: usize, front: bool) -> Vec<usize> {
    if levels.is_empty() {
        return Vec::new();
    }
    let (q, r) = (n / levels.len(), n % levels.len());
    levels
        .iter()
        .enumerate()
        .flat_map(|(i, &w)| {
            let extra = if front { i < r } else { i >= levels.len() - r };
            std::iter::repeat_n(w, q + usize::from(extra))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTfConfig {
    pub window: usize,
    pub input_channels: usize,
    /// Hidden channels `d`.
    pub d: usize,
    pub heads: usize,
    /// Encoder and decoder layer count.
    pub layers: usize,
    pub kernel: usize,
    pub head: Head,
    pub sffn: SffnConfig,
    /// Shortcuts around each attention block and each SFFN layer but the
    /// last. SFFN shortcuts repeat channels when the width doubles and
    /// average channel pairs when it halves.
    pub residual: bool,
}

impl ConvTfConfig {
    pub fn from_settings(s: &ModelSettings, window: usize) -> Result<Self> {
        let c = Self {
            window,
            input_channels: InputScaling::channels(s.augmented),
            d: s.hidden,
            heads: s.heads,
            layers: s.layers,
            kernel: s.kernel,
            head: s.head,
            sffn: SffnConfig {
                layers: s.sffn_layers,
                peak: s.sffn_peak,
                kernel: s.sffn_kernel,
            },
            residual: true,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::config(format!(
                "heads {} must divide hidden channels {}",
                self.heads, self.d
            )));
        }
        if self.d < 8 || self.d % 8 != 0 {
            return Err(ModelError::config(format!(
                "hidden channels {} must be a positive multiple of 8 for the d/8, d/4, d/2, d embedding",
                self.d
            )));
        }
        if self.window == 0 || self.layers == 0 {
            return Err(ModelError::config("window and layer count must be positive"));
        }
        if self.head == Head::Sffn {
            sffn_schedule(self.d, &self.sffn)?;
        }
        Ok(())
    }

    pub fn embed_schedule(&self) -> [usize; 4] {
        [self.d / 8, self.d / 4, self.d / 2, self.d]
    }
}

/// Sinusoidal encoding of slot `pos`, one value per channel.
pub fn positional_encoding(pos: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[d, 1, 1], |c| {
        let angle = pos as f64 / 10_000f64.powf((c - c % 2) as f64 / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Multi-head convolutional attention. Per head `j`, `Q = W1_j * I_k`,
/// `K_i = V_i = W2_j * I_i` (d/h channels each), scores
/// `H_i = W3_j * [Q; K_i]` (one channel), softmax over slots per pixel and
/// `O_j = sum_i A_i K_i`. Head outputs are concatenated back to `d`.
#[derive(Clone, Debug)]
pub struct MultiConvAttn {
    /// All heads' query kernels stacked, `d -> d`.
    pub w1: Conv,
    /// All heads' key/value kernels stacked, `d -> d`.
    pub w2: Conv,
    /// Per-head score kernels `[1, 2 d/h, k, k]`.
    pub w3: Vec<ParamId>,
    pub d: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttnOutput {
    pub outputs: Vec<Var>,
    /// `[query][head]`, each `[n, h, w]`.
    pub weights: Vec<Vec<Var>>,
    /// `[head][slot]` value maps.
    pub values: Vec<Vec<Var>>,
    /// `[query][head]` head outputs.
    pub head_outputs: Vec<Vec<Var>>,
}

impl MultiConvAttn {
    fn build(b: &mut Builder, name: &str, d: usize, heads: usize, k: usize) -> Result<Self> {
        let dh = d / heads;
        let w1 = b.conv(&format!("{name}.w1"), d, d, k, false, Init::Fan)?;
        let w2 = b.conv(&format!("{name}.w2"), d, d, k, false, Init::Fan)?;
        let w3 = (0..heads)
            .map(|j| b.uniform(&format!("{name}.w3.{j}"), &[1, 2 * dh, k, k], 2 * dh * k * k, Init::Fan))
            .collect::<Result<_>>()?;
        Ok(Self { w1, w2, w3, d, heads })
    }

    /// Fresh attention block with parameters `{name}.w1`, `{name}.w2`,
    /// `{name}.w3.{j}` added to `params`.
    pub fn new(params: &mut ParamSet, name: &str, d: usize, heads: usize, kernel: usize, seed: u64) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(ModelError::config(format!("heads {heads} must divide channels {d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut rng);
        b.params = std::mem::take(params);
        let attn = Self::build(&mut b, name, d, heads, kernel);
        *params = b.params;
        attn
    }

    pub fn head_channels(&self) -> usize {
        self.d / self.heads
    }

    pub fn apply(&self, tape: &Tape, bound: &Bound, queries: &[Var], kv: &[Var]) -> Result<Vec<Var>> {
        Ok(self.apply_traced(tape, bound, queries, kv)?.outputs)
    }

    pub fn apply_traced(&self, tape: &Tape, bound: &Bound, queries: &[Var], kv: &[Var]) -> Result<AttnOutput> {
        if kv.is_empty() {
            return Err(ModelError::config("attention needs at least one key/value slot"));
        }
        for &v in queries.iter().chain(kv) {
            let s = tape.shape(v);
            if s.len() != 3 || s[0] != self.d {
                return Err(ModelError::config(format!("attention inputs must be [{}, h, w], got {s:?}", self.d)));
            }
        }
        let dh = self.head_channels();
        // Splitting W3 over [Q; K] lets the key half be computed once per slot.
        let w3: Vec<(Var, Var, usize)> = self
            .w3
            .iter()
            .map(|&id| {
                let w = bound.get(id);
                let k = tape.shape(w)[2];
                Ok((tape.slice(w, 1, 0, dh)?, tape.slice(w, 1, dh, dh)?, k / 2))
            })
            .collect::<Result<_>>()?;
        let keys: Vec<Var> = kv.iter().map(|&x| self.w2.apply(tape, bound, x)).collect::<Result<_>>()?;
        let mut values = vec![Vec::with_capacity(kv.len()); self.heads];
        let mut key_scores = vec![Vec::with_capacity(kv.len()); self.heads];
        for &k in &keys {
            for (j, &(_, w3b, pad)) in w3.iter().enumerate() {
                let kj = tape.slice(k, 0, j * dh, dh)?;
                key_scores[j].push(tape.conv2d(kj, w3b, None, pad)?);
                values[j].push(kj);
            }
        }

        let mut out = AttnOutput {
            outputs: Vec::with_capacity(queries.len()),
            weights: Vec::with_capacity(queries.len()),
            values,
            head_outputs: Vec::with_capacity(queries.len()),
        };
        for &q in queries {
            let q_all = self.w1.apply(tape, bound, q)?;
            let mut heads = Vec::with_capacity(self.heads);
            let mut weights = Vec::with_capacity(self.heads);
            for (j, &(w3a, _, pad)) in w3.iter().enumerate() {
                let qj = tape.slice(q_all, 0, j * dh, dh)?;
                let qs = tape.conv2d(qj, w3a, None, pad)?;
                let scores = key_scores[j].iter().map(|&ks| tape.add(qs, ks)).collect::<volcast_autodiff::Result<Vec<_>>>()?;
                let a = tape.softmax(tape.concat(&scores, 0)?, 0)?;
                let mut acc = None;
                for (i, &v) in out.values[j].iter().enumerate() {
                    let term = tape.mul(tape.slice(a, 0, i, 1)?, v)?;
                    acc = Some(match acc {
                        None => term,
                        Some(s) => tape.add(s, term)?,
                    });
                }
                heads.push(acc.expect("nonempty slots"));
                weights.push(a);
            }
            out.outputs.push(tape.concat(&heads, 0)?);
            out.head_outputs.push(heads);
            out.weights.push(weights);
        }
        Ok(out)
    }
}

/// Map `x` to `width` channels: unchanged, repeated twice, or pairwise
/// averaged.
fn sffn_shortcut(tape: &Tape, x: Var, width: usize) -> Result<Var> {
    let c = tape.shape(x)[0];
    Ok(if width == c {
        x
    } else if width == 2 * c {
        tape.concat(&[x, x], 0)?
    } else if 2 * width == c {
        tape.scale(tape.add(tape.slice(x, 0, 0, width)?, tape.slice(x, 0, width, width)?)?, 0.5)
    } else {
        return Err(ModelError::config(format!("SFFN width {c} -> {width} is not a doubling or halving")));
    })
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiConvAttn,
    pub w_enc: Conv,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiConvAttn,
    pub cross_attn: MultiConvAttn,
    pub w_dec: Conv,
}

/// Forward trace of [`ConvTf::run`].
#[derive(Clone, Debug)]
pub struct ConvTfTrace {
    /// Standardised `[1, h, w]` prediction.
    pub output: Var,
    pub embedded: Vec<Var>,
    /// Every attention weight tensor, `[n, h, w]` with the slot axis first.
    pub attention: Vec<Var>,
    pub decoder_output: Var,
}

#[derive(Clone, Debug)]
pub struct ConvTf {
    kind: ModelKind,
    settings: ModelSettings,
    scaling: InputScaling,
    pub config: ConvTfConfig,
    params: ParamSet,
    pub embed: Vec<Conv>,
    pub encoders: Vec<EncoderLayer>,
    pub decoders: Vec<DecoderLayer>,
    /// SFFN layers, or the single final convolution.
    pub head: Vec<Conv>,
}

impl ConvTf {
    pub fn new(settings: &ModelSettings, scaling: InputScaling, window: usize, seed: u64) -> Result<Self> {
        let config = ConvTfConfig::from_settings(settings, window)?;
        Self::with_config(ModelKind::ConvTf, settings, config, scaling, seed)
    }

    pub fn with_config(
        kind: ModelKind,
        settings: &ModelSettings,
        config: ConvTfConfig,
        scaling: InputScaling,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut rng);
        let (d, k) = (config.d, config.kernel);

        let mut embed = Vec::new();
        let mut c_in = config.input_channels;
        for (i, c_out) in config.embed_schedule().into_iter().enumerate() {
            embed.push(b.conv(&format!("embed.{i}"), c_in, c_out, k, true, Init::He)?);
            c_in = c_out;
        }
        let mut encoders = Vec::new();
        for l in 0..config.layers {
            encoders.push(EncoderLayer {
                attn: MultiConvAttn::build(&mut b, &format!("enc{l}.attn"), d, config.heads, k)?,
                w_enc: b.conv(&format!("enc{l}.w"), d, d, k, true, Init::Fan)?,
            });
        }
        let mut decoders = Vec::new();
        for l in 0..config.layers {
            decoders.push(DecoderLayer {
                self_attn: MultiConvAttn::build(&mut b, &format!("dec{l}.attn2"), d, config.heads, k)?,
                cross_attn: MultiConvAttn::build(&mut b, &format!("dec{l}.attn3"), d, config.heads, k)?,
                w_dec: b.conv(&format!("dec{l}.w"), d, d, k, true, Init::Fan)?,
            });
        }
        let head = match config.head {
            Head::Conv => vec![b.conv("final", d, 1, 1, false, Init::Fan)?],
            Head::Sffn => {
                let widths = sffn_schedule(d, &config.sffn)?;
                let last = widths.len() - 1;
                let mut c_in = d;
                let mut layers = Vec::new();
                for (i, &w) in widths.iter().enumerate() {
                    let init = match (i == last, config.residual) {
                        (true, _) => Init::Fan,
                        (false, true) => Init::Zero,
                        (false, false) => Init::He,
                    };
                    layers.push(b.conv(&format!("sffn.{i}"), c_in, w, config.sffn.kernel, true, init)?);
                    c_in = w;
                }
                layers
            }
        };
        Ok(Self {
            kind,
            settings: settings.clone(),
            scaling,
            config,
            params: b.params,
            embed,
            encoders,
            decoders,
            head,
        })
    }

    pub fn feature_embed(&self, tape: &Tape, bound: &Bound, xs: &[Var]) -> Result<Vec<Var>> {
        xs.iter()
            .enumerate()
            .map(|(pos, &x)| {
                let mut h = x;
                for conv in &self.embed {
                    h = tape.leaky_relu(conv.apply(tape, bound, h)?, LEAKY_SLOPE);
                }
                let pe = tape.constant(positional_encoding(pos, self.config.d));
                Ok(tape.add(h, pe)?)
            })
            .collect()
    }

    pub fn sffn_forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let last = self.head.len() - 1;
        let mut h = x;
        for (i, conv) in self.head.iter().enumerate() {
            let y = conv.apply(tape, bound, h)?;
            h = if i == last {
                y
            } else {
                let y = tape.leaky_relu(y, LEAKY_SLOPE);
                if self.config.residual {
                    tape.add(sffn_shortcut(tape, h, tape.shape(y)[0])?, y)?
                } else {
                    y
                }
            };
        }
        Ok(h)
    }

    fn shortcut(&self, tape: &Tape, x: Var, y: Var) -> Result<Var> {
        Ok(if self.config.residual { tape.add(x, y)? } else { y })
    }

    pub fn run(&self, tape: &Tape, bound: &Bound, xs: &[Var]) -> Result<ConvTfTrace> {
        let last = *xs.last().ok_or_else(|| ModelError::config("empty input window"))?;
        let s = tape.shape(last);
        if s.len() != 3 || s[0] != self.config.input_channels {
            return Err(ModelError::config(format!(
                "inputs must be [{}, h, w], got {s:?}",
                self.config.input_channels
            )));
        }
        let embedded = self.feature_embed(tape, bound, xs)?;
        let mut attention = Vec::new();

        let mut enc = embedded.clone();
        for layer in &self.encoders {
            let a = layer.attn.apply_traced(tape, bound, &enc, &enc)?;
            attention.extend(a.weights.iter().flatten().copied());
            enc = enc
                .iter()
                .zip(&a.outputs)
                .map(|(&x, &o)| {
                    let y = self.shortcut(tape, x, o)?;
                    Ok(tape.leaky_relu(layer.w_enc.apply(tape, bound, y)?, LEAKY_SLOPE))
                })
                .collect::<Result<_>>()?;
        }

        let mut q = *embedded.last().expect("nonempty window");
        for layer in &self.decoders {
            let a2 = layer.self_attn.apply_traced(tape, bound, &[q], &[q])?;
            let u = self.shortcut(tape, q, a2.outputs[0])?;
            let a3 = layer.cross_attn.apply_traced(tape, bound, &[u], &enc)?;
            let v = self.shortcut(tape, u, a3.outputs[0])?;
            attention.extend(a2.weights.iter().chain(&a3.weights).flatten().copied());
            q = tape.leaky_relu(layer.w_dec.apply(tape, bound, v)?, LEAKY_SLOPE);
        }
        let output = self.sffn_forward(tape, bound, q)?;
        Ok(ConvTfTrace {
            output,
            embedded,
            attention,
            decoder_output: q,
        })
    }

    /// Prediction in vol units, `[1, 20, 20]`.
    pub fn forward(&self, tape: &Tape, bound: &Bound, sample: &WindowedSample) -> Result<Var> {
        let xs: Vec<Var> = self
            .scaling
            .encode_window(sample, self.settings.augmented)
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        let y = self.run(tape, bound, &xs)?.output;
        Ok(self.scaling.decode(tape, y))
    }
}

impl Forecaster for ConvTf {
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
        accumulate_per_sample(self, batch, |m, tape, bound, i| {
            let sample = &data.train[i];
            mae(tape, m.forward(tape, bound, sample)?, &sample.target)
        })
    }

    fn predict(&self, sample: &WindowedSample) -> Result<Vec<f64>> {
        run_frozen(&self.params, |tape, bound| self.forward(tape, bound, sample))
    }
}
