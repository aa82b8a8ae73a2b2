//! The run configuration file: model keys, training keys, split ratios and
//! an optional seed, all in one flat key-value file.

use std::path::Path;

use dplet::kv::{KvMap, KvWriter};
use dplet::predictor::ModelConfig;
use dplet::training::{TrainSchedule, DEFAULT_RATIOS};
use dplet::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub ratios: [f64; 3],
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            ratios: DEFAULT_RATIOS,
            seed: None,
        }
    }
}

impl RunConfig {
    /// Defaults, overridden by `path` when given. Any key the file sets
    /// that is not understood is an error.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        Self::from_map(KvMap::load(path)?).map_err(|e| match e {
            // A malformed config is a usage problem, not a data problem.
            Error::Parse { path, line, msg } => {
                Error::Config(format!("{}: line {line}: {msg}", path.display()))
            }
            other => other,
        })
    }

    fn from_map(mut map: KvMap) -> Result<Self> {
        let model = ModelConfig::from_kv(&mut map)?;
        let schedule = TrainSchedule::from_kv(&mut map)?;
        let ratios = match map.take_list::<f64>("split_ratios")? {
            None => DEFAULT_RATIOS,
            Some(r) => <[f64; 3]>::try_from(r.as_slice())
                .map_err(|_| Error::Config(format!("split_ratios needs 3 values, got {}", r.len())))?,
        };
        let seed = map.take("seed")?;
        map.finish()?;
        Ok(RunConfig {
            model,
            schedule,
            ratios,
            seed,
        })
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        self.model.write_kv(w);
        self.schedule.write_kv(w);
        w.floats("split_ratios", &self.ratios);
    }
}
