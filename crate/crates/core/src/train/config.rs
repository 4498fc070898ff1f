//! Experiment configuration: a flat `key = value` file.
//!
//! Model keys (`epochs`, `lr`, `hidden`, ...) set every model and may be
//! overridden for one model with a `<model>.` prefix, e.g.
//! `convtf.sffn_peak = 16`. Generator keys take a `synthetic.` prefix.
//! `#` starts a comment. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;

use super::fit::TrainOptions;
use super::metrics::CALL_FILTER_PERCENTILE;
use crate::error::Error;
use crate::models::{ModelKind, ModelSettings};
use crate::surface::{DateRange, Shock, SyntheticConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// A series file written by `save_series`.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Latest share of days held out for testing.
    Fraction(f64),
    Dates { train: DateRange, test: DateRange },
    /// `main`, `subprime`, `covid`, or `shock<N>` for the N-th high-vol
    /// run of the series.
    Regime(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub models: Vec<ModelKind>,
    pub settings: BTreeMap<ModelKind, ModelSettings>,
    pub window: usize,
    pub seed: u64,
    pub data: DataSource,
    pub synthetic: SyntheticConfig,
    /// Generator seed; defaults to `seed`.
    pub data_seed: u64,
    pub split: SplitSpec,
    pub output_dir: PathBuf,
    pub plots: bool,
    pub max_steps: usize,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub lr_floor: f64,
    pub call_percentile: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            models: ModelKind::ALL.to_vec(),
            settings: ModelKind::ALL.into_iter().map(|k| (k, ModelSettings::defaults(k))).collect(),
            window: 10,
            seed: 42,
            data: DataSource::Synthetic,
            synthetic: SyntheticConfig::default(),
            data_seed: 42,
            split: SplitSpec::Fraction(0.2),
            output_dir: PathBuf::from("out"),
            plots: true,
            max_steps: 0,
            lr_patience: 5,
            lr_factor: 0.5,
            lr_floor: 1e-6,
            call_percentile: CALL_FILTER_PERCENTILE,
        }
    }
}

const MODEL_KEYS: [&str; 18] = [
    "epochs",
    "batch_size",
    "lr",
    "hidden",
    "kernel",
    "layers",
    "heads",
    "attn_channels",
    "gate_bias",
    "augmented",
    "head",
    "sffn_layers",
    "sffn_peak",
    "sffn_kernel",
    "lambda",
    "derivative_mode",
    "cycles",
    "points_per_epoch",
];

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn fail(&self, message: impl Display) -> Error {
        Error::config(format!("line {}: {}: {message}", self.line, self.key))
    }

    fn parse<T: FromStr>(&self) -> Result<T, Error>
    where
        T::Err: Display,
    {
        self.value.parse().map_err(|e| self.fail(format!("invalid value '{}': {e}", self.value)))
    }

    fn flag(&self) -> Result<bool, Error> {
        match self.value {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(self.fail(format!("expected true or false, got '{v}'"))),
        }
    }

    fn date(&self) -> Result<NaiveDate, Error> {
        NaiveDate::parse_from_str(self.value, "%Y-%m-%d").map_err(|e| self.fail(format!("expected YYYY-MM-DD: {e}")))
    }
}

impl ExperimentConfig {
    /// Read a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let (DataSource::File(p), Some(dir)) = (&cfg.data, path.parent()) {
            if p.is_relative() {
                cfg.data = DataSource::File(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
            entries.push(Entry {
                line: i + 1,
                key: key.trim(),
                value: value.trim(),
            });
        }

        let mut cfg = Self::default();
        let mut dates: [Option<NaiveDate>; 4] = [None; 4];
        let mut data_seed = None;
        // Model-wide keys first, so prefixed overrides win wherever they appear.
        let mut overrides = Vec::new();
        for e in &entries {
            match e.key.split_once('.') {
                Some(("synthetic", "seed")) => data_seed = Some(e.parse()?),
                Some(("synthetic", key)) => cfg.set_synthetic(e, key)?,
                Some((model, key)) => {
                    let kind: ModelKind = model.parse().map_err(|err| e.fail(err))?;
                    if !MODEL_KEYS.contains(&key) {
                        return Err(e.fail("unknown model key"));
                    }
                    overrides.push((kind, key, e));
                }
                None if MODEL_KEYS.contains(&e.key) => {
                    for s in cfg.settings.values_mut() {
                        set_model_key(s, e, e.key)?;
                    }
                }
                None => cfg.set_global(e, &mut dates)?,
            }
        }
        cfg.data_seed = data_seed.unwrap_or(cfg.seed);
        for (kind, key, e) in overrides {
            set_model_key(cfg.settings.get_mut(&kind).expect("every kind has settings"), e, key)?;
        }

        match dates {
            [None, None, None, None] => {}
            [Some(a), Some(b), Some(c), Some(d)] => {
                if !matches!(cfg.split, SplitSpec::Fraction(_)) {
                    return Err(Error::config("give either split or train/test dates, not both"));
                }
                let range = |s, e| DateRange::new(s, e).map_err(|err| Error::config(err.to_string()));
                cfg.split = SplitSpec::Dates {
                    train: range(a, b)?,
                    test: range(c, d)?,
                };
            }
            _ => return Err(Error::config("train_start, train_end, test_start and test_end must be given together")),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_global(&mut self, e: &Entry, dates: &mut [Option<NaiveDate>; 4]) -> Result<(), Error> {
        match e.key {
            "models" | "model" => {
                self.models = e
                    .value
                    .split(',')
                    .map(|m| m.trim().parse::<ModelKind>().map_err(|err| e.fail(err)))
                    .collect::<Result<_, _>>()?;
                if self.models.is_empty() {
                    return Err(e.fail("no models given"));
                }
            }
            "window" => self.window = e.parse()?,
            "seed" => self.seed = e.parse()?,
            "data" => {
                self.data = match e.value {
                    "synthetic" => DataSource::Synthetic,
                    path => DataSource::File(PathBuf::from(path)),
                }
            }
            "split" => {
                if !matches!(self.split, SplitSpec::Fraction(f) if f == 0.2) {
                    return Err(e.fail("conflicts with an earlier split or test_fraction"));
                }
                self.split = SplitSpec::Regime(e.value.to_string());
            }
            "test_fraction" => {
                if matches!(self.split, SplitSpec::Regime(_)) {
                    return Err(e.fail("conflicts with split"));
                }
                self.split = SplitSpec::Fraction(e.parse()?);
            }
            "train_start" => dates[0] = Some(e.date()?),
            "train_end" => dates[1] = Some(e.date()?),
            "test_start" => dates[2] = Some(e.date()?),
            "test_end" => dates[3] = Some(e.date()?),
            "output_dir" => self.output_dir = PathBuf::from(e.value),
            "plots" => self.plots = e.flag()?,
            "max_steps" => self.max_steps = e.parse()?,
            "lr_patience" => self.lr_patience = e.parse()?,
            "lr_factor" => self.lr_factor = e.parse()?,
            "lr_floor" => self.lr_floor = e.parse()?,
            "call_percentile" => self.call_percentile = e.parse()?,
            _ => return Err(e.fail("unknown key")),
        }
        Ok(())
    }

    fn set_synthetic(&mut self, e: &Entry, key: &str) -> Result<(), Error> {
        let s = &mut self.synthetic;
        match key {
            "days" => s.days = e.parse()?,
            "start_date" => s.start_date = e.date()?,
            "level" => s.level = e.parse()?,
            "curvature" => s.curvature = e.parse()?,
            "slope" => s.slope = e.parse()?,
            "mean_reversion" => s.mean_reversion = e.parse()?,
            "noise" => s.noise = e.parse()?,
            "drift_amplitude" => s.drift_amplitude = e.parse()?,
            "drift_period" => s.drift_period = e.parse()?,
            "curvature_amplitude" => s.curvature_amplitude = e.parse()?,
            "slope_amplitude" => s.slope_amplitude = e.parse()?,
            "spot0" => s.spot0 = e.parse()?,
            "rate" => s.rate = e.parse()?,
            "shocks" => s.shocks = parse_shocks(e)?,
            _ => return Err(e.fail("unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.window == 0 {
            return Err(Error::config("window must be at least 1"));
        }
        if !(self.call_percentile >= 0.0 && self.call_percentile < 100.0) {
            return Err(Error::config("call_percentile must lie in [0, 100)"));
        }
        if let SplitSpec::Fraction(f) = self.split {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("test_fraction {f} not in (0, 1)")));
            }
        }
        for kind in &self.models {
            self.train_options(*kind).validate().map_err(|e| Error::config(format!("{kind}: {e}")))?;
            let s = self.settings(*kind);
            if !(s.lambda >= 0.0 && s.lambda.is_finite()) {
                return Err(Error::config(format!("{kind}: lambda must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    pub fn settings(&self, kind: ModelKind) -> &ModelSettings {
        &self.settings[&kind]
    }

    pub fn train_options(&self, kind: ModelKind) -> TrainOptions {
        let s = self.settings(kind);
        TrainOptions {
            // The rate schedule restarts per cycle only for the PINN.
            cycles: if kind == ModelKind::Pinn { s.cycles.max(1) } else { 1 },
            max_steps: self.max_steps,
            lr_patience: self.lr_patience,
            lr_factor: self.lr_factor,
            lr_floor: self.lr_floor,
            ..TrainOptions::from_settings(s, self.seed)
        }
    }
}

fn set_model_key(s: &mut ModelSettings, e: &Entry, key: &str) -> Result<(), Error> {
    match key {
        "epochs" => s.epochs = e.parse()?,
        "batch_size" => s.batch_size = e.parse()?,
        "lr" => s.lr = e.parse()?,
        "hidden" => s.hidden = e.parse()?,
        "kernel" => s.kernel = e.parse()?,
        "layers" => s.layers = e.parse()?,
        "heads" => s.heads = e.parse()?,
        "attn_channels" => s.attn_channels = e.parse()?,
        "gate_bias" => s.gate_bias = e.flag()?,
        "augmented" => s.augmented = e.flag()?,
        "head" => s.head = e.parse()?,
        "sffn_layers" => s.sffn_layers = e.parse()?,
        "sffn_peak" => s.sffn_peak = e.parse()?,
        "sffn_kernel" => s.sffn_kernel = e.parse()?,
        "lambda" => s.lambda = e.parse()?,
        "derivative_mode" => s.derivative_mode = e.parse()?,
        "cycles" => s.cycles = e.parse()?,
        "points_per_epoch" => s.points_per_epoch = e.parse()?,
        _ => return Err(e.fail("unknown model key")),
    }
    Ok(())
}

/// `start:length:size` triples separated by `;`.
fn parse_shocks(e: &Entry) -> Result<Vec<Shock>, Error> {
    e.value
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|part| {
            let fields: Vec<&str> = part.split(':').map(str::trim).collect();
            let bad = || e.fail(format!("shock '{part}' is not start:length:size"));
            if fields.len() != 3 {
                return Err(bad());
            }
            Ok(Shock {
                start_day: fields[0].parse().map_err(|_| bad())?,
                length: fields[1].parse().map_err(|_| bad())?,
                size: fields[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
