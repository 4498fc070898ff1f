//! End-to-end runs: load or generate data, train, score the test days and
//! write the metric files.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{DataSource, ExperimentConfig, SplitSpec};
use super::fit::{train_model, EpochLog, TrainOutcome};
use super::metrics::{call_price_filtered_mape, mape};
use super::plot::{line_chart, Line};
use super::regimes::{find_regime, resolve_split};
use crate::error::{DataError, Error};
use crate::models::{build_model, Forecaster, InputScaling, ModelKind};
use crate::surface::{build_dataset, load_series, synthetic_series, Dataset, DatasetSplit, Series, WindowedSample};

pub const PERSISTENCE: &str = "persistence";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyMetrics {
    pub date: NaiveDate,
    pub vol_mape_pct: f64,
    pub call_mape_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub vol_mape_pct: f64,
    pub call_mape_pct: f64,
}

impl SummaryRow {
    pub fn from_daily(model: &str, daily: &[DailyMetrics]) -> Self {
        let n = daily.len().max(1) as f64;
        Self {
            model: model.into(),
            vol_mape_pct: daily.iter().map(|d| d.vol_mape_pct).sum::<f64>() / n,
            call_mape_pct: daily.iter().map(|d| d.call_mape_pct).sum::<f64>() / n,
        }
    }
}

/// Score one prediction against its sample's target day.
pub fn score_day(pred: &[f64], sample: &WindowedSample, call_percentile: f64) -> Result<DailyMetrics, Error> {
    let truth = &sample.target.values;
    Ok(DailyMetrics {
        date: sample.target.date,
        vol_mape_pct: mape(pred, truth)?.value,
        call_mape_pct: call_price_filtered_mape(pred, truth, &sample.market, call_percentile)?.mape.value,
    })
}

pub fn evaluate(model: &dyn Forecaster, samples: &[WindowedSample], call_percentile: f64) -> Result<Vec<DailyMetrics>, Error> {
    samples.iter().map(|s| score_day(&model.predict(s)?, s, call_percentile)).collect()
}

/// Tomorrow's surface predicted as today's.
pub fn evaluate_persistence(samples: &[WindowedSample], call_percentile: f64) -> Result<Vec<DailyMetrics>, Error> {
    samples.iter().map(|s| score_day(&s.last_input().values, s, call_percentile)).collect()
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(DataError::Format(format!("{}: {other:?}", path.display()))),
    }
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), Error>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_daily_csv(path: &Path, daily: &[DailyMetrics]) -> Result<(), Error> {
    write_rows(
        path,
        &["date", "vol_mape_pct", "call_mape_pct"],
        daily.iter().map(|d| [d.date.to_string(), fmt(d.vol_mape_pct), fmt(d.call_mape_pct)]),
    )
}

pub fn read_daily_csv(path: &Path) -> Result<Vec<DailyMetrics>, Error> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), Error> {
    write_rows(
        path,
        &["model", "vol_mape_pct", "call_mape_pct"],
        rows.iter().map(|r| [r.model.clone(), fmt(r.vol_mape_pct), fmt(r.call_mape_pct)]),
    )
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<(), Error> {
    write_rows(
        path,
        &["epoch", "cycle", "train_loss", "val_loss", "lr", "steps"],
        log.iter().map(|e| {
            [
                e.epoch.to_string(),
                e.cycle.to_string(),
                format!("{:.9}", e.train_loss),
                fmt(e.val_loss),
                format!("{:e}", e.lr),
                e.steps.to_string(),
            ]
        }),
    )
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Series, Error> {
    Ok(match &cfg.data {
        DataSource::Synthetic => synthetic_series(&cfg.synthetic, cfg.data_seed)?,
        DataSource::File(p) => load_series(p)?,
    })
}

pub fn resolve_dataset_split(cfg: &ExperimentConfig, series: &Series) -> Result<DatasetSplit, Error> {
    let dates = series.dates();
    Ok(match &cfg.split {
        SplitSpec::Fraction(f) => DatasetSplit::by_fraction(&dates, *f)?,
        SplitSpec::Dates { train, test } => {
            let regime = super::regimes::RegimeSplit {
                name: "configured".into(),
                train: *train,
                test: *test,
            };
            resolve_split(&dates, &regime)?
        }
        SplitSpec::Regime(name) => resolve_split(&dates, &find_regime(series, name, cfg.window)?)?,
    })
}

pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset, Error> {
    let series = load_data(cfg)?;
    let split = resolve_dataset_split(cfg, &series)?;
    let data = build_dataset(&series, &split, cfg.window)?;
    if data.test.is_empty() {
        return Err(Error::Data(DataError::Format(format!(
            "test split {} holds no windows of {} + 1 days",
            split.test, cfg.window
        ))));
    }
    Ok(data)
}

pub struct Trained {
    pub model: Box<dyn Forecaster>,
    pub outcome: TrainOutcome,
    pub checkpoint: Checkpoint,
}

/// Train one model. The checkpoint is written even when training diverges
/// (holding the last good parameters) before the error is returned.
pub fn train_kind(cfg: &ExperimentConfig, kind: ModelKind, data: &Dataset, ckpt_path: Option<&Path>) -> Result<Trained, Error> {
    let scaling = InputScaling::fit(data)?;
    let mut model = build_model(kind, cfg.settings(kind), scaling, cfg.window, cfg.seed)?;
    match train_model(&mut *model, data, &cfg.train_options(kind)) {
        Ok(outcome) => {
            let checkpoint = Checkpoint::from_model(&*model, cfg.window, cfg.seed, outcome.best_epoch, outcome.best_val_loss);
            if let Some(p) = ckpt_path {
                checkpoint.save(p)?;
            }
            Ok(Trained {
                model,
                outcome,
                checkpoint,
            })
        }
        Err(e) => {
            if let (Error::Diverged { .. }, Some(p)) = (&e, ckpt_path) {
                Checkpoint::from_model(&*model, cfg.window, cfg.seed, 0, f64::MAX).save(p)?;
            }
            Err(e)
        }
    }
}

/// File locations inside an output directory.
#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, Error> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn checkpoint(&self, model: &str) -> PathBuf {
        self.dir.join(format!("{model}.ckpt.json"))
    }

    pub fn train_log(&self, model: &str) -> PathBuf {
        self.dir.join(format!("{model}_train_log.csv"))
    }

    pub fn daily(&self, model: &str) -> PathBuf {
        self.dir.join(format!("{model}_daily.csv"))
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.csv")
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub summary: Vec<SummaryRow>,
    pub daily: Vec<(String, Vec<DailyMetrics>)>,
    pub logs: Vec<(ModelKind, Vec<EpochLog>)>,
    pub output_dir: PathBuf,
}

/// Score a trained model and the persistence baseline on the test days and
/// write `<model>_daily.csv`, `persistence_daily.csv` and `summary.csv`.
pub fn write_evaluation(
    out: &OutputPaths,
    data: &Dataset,
    models: &[&dyn Forecaster],
    call_percentile: f64,
) -> Result<Vec<(String, Vec<DailyMetrics>)>, Error> {
    let mut daily = Vec::new();
    for m in models {
        daily.push((m.kind().to_string(), evaluate(*m, &data.test, call_percentile)?));
    }
    daily.push((PERSISTENCE.to_string(), evaluate_persistence(&data.test, call_percentile)?));
    for (name, rows) in &daily {
        write_daily_csv(&out.daily(name), rows)?;
    }
    let summary: Vec<SummaryRow> = daily.iter().map(|(n, d)| SummaryRow::from_daily(n, d)).collect();
    write_summary_csv(&out.summary(), &summary)?;
    Ok(daily)
}

/// Train every configured model, evaluate, and write metrics and plots.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, Error> {
    let data = prepare_dataset(cfg)?;
    for w in &data.warnings {
        log::warn!("{w}");
    }
    let out = OutputPaths::new(&cfg.output_dir)?;
    let mut trained = Vec::new();
    for &kind in &cfg.models {
        log::info!("training {kind}");
        let t = train_kind(cfg, kind, &data, Some(&out.checkpoint(kind.name())))?;
        write_train_log(&out.train_log(kind.name()), &t.outcome.log)?;
        trained.push(t);
    }
    let models: Vec<&dyn Forecaster> = trained.iter().map(|t| &*t.model).collect();
    let daily = write_evaluation(&out, &data, &models, cfg.call_percentile)?;
    let summary: Vec<SummaryRow> = daily.iter().map(|(n, d)| SummaryRow::from_daily(n, d)).collect();
    if cfg.plots {
        write_daily_plots(&out.dir, &daily)?;
        let logs: Vec<(String, Vec<EpochLog>)> = trained.iter().map(|t| (t.model.kind().to_string(), t.outcome.log.clone())).collect();
        write_loss_plot(&out.dir.join("validation_loss.svg"), &logs)?;
    }
    Ok(ExperimentReport {
        summary,
        daily,
        logs: trained.iter().map(|t| (t.model.kind(), t.outcome.log.clone())).collect(),
        output_dir: out.dir,
    })
}

/// `daily_vol_mape.svg` and `daily_call_mape.svg` with one line per model.
pub fn write_daily_plots(dir: &Path, daily: &[(String, Vec<DailyMetrics>)]) -> Result<(), Error> {
    let labels: Vec<String> = daily.first().map(|(_, d)| d.iter().map(|m| m.date.to_string()).collect()).unwrap_or_default();
    for (file, title, pick) in [
        ("daily_vol_mape.svg", "Daily volatility MAPE (%)", (|m: &DailyMetrics| m.vol_mape_pct) as fn(&DailyMetrics) -> f64),
        ("daily_call_mape.svg", "Daily call-price MAPE (%)", |m: &DailyMetrics| m.call_mape_pct),
    ] {
        let lines: Vec<Line> = daily
            .iter()
            .map(|(name, d)| Line {
                name: name.clone(),
                values: d.iter().map(pick).collect(),
            })
            .collect();
        let path = dir.join(file);
        fs::write(&path, line_chart(title, &labels, &lines)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn write_loss_plot(path: &Path, logs: &[(String, Vec<EpochLog>)]) -> Result<(), Error> {
    let longest = logs.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
    let labels: Vec<String> = (1..=longest).map(|e| e.to_string()).collect();
    let lines: Vec<Line> = logs
        .iter()
        .map(|(name, l)| Line {
            name: name.clone(),
            values: l.iter().map(|e| e.val_loss).collect(),
        })
        .collect();
    fs::write(path, line_chart("Validation MAPE (%) by epoch", &labels, &lines)).map_err(|e| Error::io(path, e))
}
