//! Versioned JSON dump of a trained model: kind, settings, input scaling
//! and every named parameter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volcast_autodiff::Tensor;

use crate::error::Error;
use crate::models::{build_model, Forecaster, InputScaling, ModelKind, ModelSettings};

pub const CHECKPOINT_FORMAT: &str = "volcast-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub settings: ModelSettings,
    pub window: usize,
    pub seed: u64,
    pub scaling: InputScaling,
    /// Epoch the parameters come from and its validation loss.
    pub epoch: usize,
    pub val_loss: f64,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &dyn Forecaster, window: usize, seed: u64, epoch: usize, val_loss: f64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: model.kind(),
            settings: model.settings().clone(),
            window,
            seed,
            scaling: model.scaling().clone(),
            epoch,
            val_loss,
            params: model
                .params()
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let fail = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(fail(format!(
                "unsupported format {} version {} (expected {CHECKPOINT_FORMAT} {CHECKPOINT_VERSION})",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the model and load the stored parameters by name.
    pub fn restore(&self) -> Result<Box<dyn Forecaster>, Error> {
        let mut model = build_model(self.model, &self.settings, self.scaling.clone(), self.window, self.seed)?;
        self.load_into(&mut *model)?;
        Ok(model)
    }

    /// Copy parameters into a model of the same architecture.
    pub fn load_into(&self, model: &mut dyn Forecaster) -> Result<(), Error> {
        let fail = |message: String| Error::Checkpoint {
            path: PathBuf::from(self.model.name()),
            message,
        };
        if model.kind() != self.model {
            return Err(fail(format!("checkpoint holds {} but the model is {}", self.model, model.kind())));
        }
        let params = model.params_mut();
        if params.len() != self.params.len() {
            return Err(fail(format!("checkpoint has {} parameters, model has {}", self.params.len(), params.len())));
        }
        for rec in &self.params {
            let id = params.id(&rec.name).ok_or_else(|| fail(format!("model has no parameter {}", rec.name)))?;
            let p = params.get_mut(id);
            if p.value.shape() != rec.shape.as_slice() {
                return Err(fail(format!("{}: shape {:?} does not match {:?}", rec.name, rec.shape, p.value.shape())));
            }
            p.value = Tensor::new(&rec.shape, rec.values.clone()).map_err(|e| fail(format!("{}: {e}", rec.name)))?;
        }
        Ok(())
    }
}
