//! Mini-batch training with validation-driven rate decay and best-epoch
//! selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use volcast_autodiff::ParamSet;

use super::metrics::mape;
use super::optim::{Adam, Plateau};
use crate::error::Error;
use crate::models::{Forecaster, ModelSettings};
use crate::surface::{Dataset, WindowedSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs are split evenly over the cycles; each cycle restarts the
    /// rate schedule and the optimizer state from the current weights.
    pub cycles: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub lr_floor: f64,
}

impl TrainOptions {
    pub fn from_settings(s: &ModelSettings, seed: u64) -> Self {
        Self {
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            cycles: s.cycles.max(1),
            seed,
            max_steps: 0,
            lr_patience: 5,
            lr_factor: 0.5,
            lr_floor: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.epochs == 0 || self.batch_size == 0 || self.cycles == 0 {
            return Err(Error::config("epochs, batch_size and cycles must be positive"));
        }
        if self.cycles > self.epochs {
            return Err(Error::config(format!("{} cycles exceed {} epochs", self.cycles, self.epochs)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_factor > 0.0 && self.lr_factor < 1.0) || self.lr_floor < 0.0 {
            return Err(Error::config("lr must be positive, lr_factor in (0, 1), lr_floor nonnegative"));
        }
        if self.lr_patience == 0 {
            return Err(Error::config("lr_patience must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based, counted across cycles.
    pub epoch: usize,
    pub cycle: usize,
    pub train_loss: f64,
    /// Mean daily vol MAPE (percent) over the validation samples.
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: usize,
}

/// Mean daily vol MAPE of a model over samples.
pub fn mean_vol_mape(model: &dyn Forecaster, samples: &[WindowedSample]) -> Result<f64, Error> {
    if samples.is_empty() {
        return Err(Error::config("no samples to evaluate"));
    }
    let mut total = 0.0;
    for s in samples {
        total += mape(&model.predict(s)?, &s.target.values)?.value;
    }
    Ok(total / samples.len() as f64)
}

/// Train in place. On return the model holds the parameters of the epoch
/// with the lowest validation loss. If a loss or weight goes non-finite the
/// best parameters so far (or the initial ones) are restored and
/// [`Error::Diverged`] is returned.
pub fn train_model(model: &mut dyn Forecaster, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome, Error> {
    opts.validate()?;
    let units = model.units(data);
    if units == 0 {
        return Err(Error::config(format!("no {} training samples; lengthen the training range or shorten the window", model.kind())));
    }
    if data.validation.is_empty() {
        return Err(Error::config("validation split holds no samples"));
    }
    let per_epoch = model.epoch_units(data).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..units).collect();
    let mut adam = Adam::new(opts.lr);
    let mut plateau = Plateau::new(opts.lr_patience, opts.lr_factor, opts.lr_floor);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let initial = model.params().clone();
    let mut log = Vec::with_capacity(opts.epochs);
    let mut steps = 0;
    let mut epoch = 0;
    model.params_mut().zero_grad();

    'cycles: for cycle in 1..=opts.cycles {
        let cycle_epochs = opts.epochs / opts.cycles + usize::from(cycle <= opts.epochs % opts.cycles);
        adam.reset();
        plateau.reset();
        adam.lr = opts.lr;
        for _ in 0..cycle_epochs {
            epoch += 1;
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut seen = 0;
            let mut stop = false;
            for batch in order[..per_epoch].chunks(opts.batch_size) {
                let loss = model.accumulate_batch(data, batch);
                let loss = match loss {
                    Ok(l) if l.is_finite() => l,
                    Ok(l) => return diverged(model, best, &initial, epoch, steps + 1, l),
                    Err(e) => return Err(e.into()),
                };
                adam.step(model.params_mut());
                steps += 1;
                if !model.params().all_finite() {
                    return diverged(model, best, &initial, epoch, steps, f64::NAN);
                }
                loss_sum += loss * batch.len() as f64;
                seen += batch.len();
                if opts.max_steps > 0 && steps >= opts.max_steps {
                    stop = true;
                    break;
                }
            }
            let val_loss = mean_vol_mape(&*model, &data.validation)?;
            let entry = EpochLog {
                epoch,
                cycle,
                train_loss: loss_sum / seen.max(1) as f64,
                val_loss,
                lr: adam.lr,
                steps,
            };
            log::info!(
                "{} epoch {epoch}: train {:.6} val {:.4}% lr {:.2e}",
                model.kind(),
                entry.train_loss,
                val_loss,
                adam.lr
            );
            log.push(entry);
            if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
                best = Some((epoch, val_loss, model.params().clone()));
            }
            adam.lr = plateau.observe(val_loss, adam.lr);
            if stop {
                break 'cycles;
            }
        }
    }

    let (best_epoch, best_val_loss, params) = best.expect("at least one epoch ran");
    model.params_mut().load_values(&params)?;
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_loss,
        steps,
    })
}

fn diverged(
    model: &mut dyn Forecaster,
    best: Option<(usize, f64, ParamSet)>,
    initial: &ParamSet,
    epoch: usize,
    step: usize,
    loss: f64,
) -> Result<TrainOutcome, Error> {
    let keep = best.map(|(_, _, p)| p).unwrap_or_else(|| initial.clone());
    model.params_mut().load_values(&keep)?;
    model.params_mut().zero_grad();
    Err(Error::Diverged { epoch, step, loss })
}
