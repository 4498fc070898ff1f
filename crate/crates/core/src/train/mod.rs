//! Training loop, metrics, checkpoints, configuration and experiment runs.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod fit;
pub mod metrics;
pub mod optim;
pub mod plot;
pub mod regimes;

pub use checkpoint::{Checkpoint, ParamRecord};
pub use config::{DataSource, ExperimentConfig, SplitSpec};
pub use experiment::{
    evaluate, evaluate_persistence, prepare_dataset, run_experiment, train_kind, DailyMetrics, ExperimentReport, OutputPaths,
    SummaryRow, PERSISTENCE,
};
pub use fit::{mean_vol_mape, train_model, EpochLog, TrainOptions, TrainOutcome};
pub use metrics::{
    call_price_filtered_mape, mape, nearest_rank_percentile, retained_above_percentile, FilteredMape, Mape,
    CALL_FILTER_PERCENTILE,
};
pub use optim::{Adam, Plateau};
pub use regimes::{standard_regimes, vol_threshold, RegimeSplit};
