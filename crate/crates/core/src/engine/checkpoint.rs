use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BestSnapshot, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::io::archive::{self, Archive};
use crate::network::Model;
use crate::params::ParamStore;

const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Serialize, Deserialize)]
struct Header {
    iteration: u64,
    best: Option<BestSnapshot>,
    config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.model_config())
    }
}

/// Writes config, parameters and momentum buffers atomically.
pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    let header = Header {
        iteration: state.iteration,
        best: state.best.clone(),
        config: cfg.clone(),
    };
    let mut arrays = std::collections::BTreeMap::new();
    for (name, t) in state.params.iter() {
        arrays.insert(name.to_string(), t.clone());
    }
    for (name, t) in state.momentum.iter() {
        arrays.insert(format!("{MOMENTUM_PREFIX}{name}"), t.clone());
    }
    let config = toml::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    archive::write(path, &Archive { config, arrays })
}

/// Reads a checkpoint and checks its parameters against the model its
/// config describes. Missing momentum buffers start at zero.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let a = archive::read(path)?;
    let header: Header = toml::from_str(&a.config)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {}", path.display(), e.message())))?;
    header.config.validate()?;
    let mut params = ParamStore::new();
    let mut momentum = ParamStore::new();
    for (name, t) in a.arrays {
        match name.strip_prefix(MOMENTUM_PREFIX) {
            Some(n) => momentum.insert(n, t),
            None => params.insert(name, t),
        }
    }
    let expected = Model::new(header.config.model_config())?.init_params(0);
    let mismatch: Vec<String> = expected
        .iter()
        .filter(|(n, t)| params.get(n).map(|p| p.shape()) != Some(t.shape()))
        .map(|(n, _)| n.to_string())
        .chain(params.names().filter(|n| !expected.contains(n)).map(str::to_string))
        .collect();
    if !mismatch.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: parameters do not match the configured model: {}",
            path.display(),
            mismatch.join(", ")
        )));
    }
    for (name, t) in params.iter() {
        if momentum.get(name).map(|m| m.shape()) != Some(t.shape()) {
            momentum.insert(name, crate::tensor::Tensor::zeros(t.shape()));
        }
    }
    Ok(Checkpoint {
        config: header.config,
        state: TrainState {
            iteration: header.iteration,
            params,
            momentum,
            best: header.best,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::engine::{train_step, PreparedSet};

    #[test]
    fn save_load_step_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::tiny(32)
        };
        let model = Model::new(cfg.model_config()).unwrap();
        let samples = synthetic_dataset(2, (32, 32), 4);
        let data = PreparedSet::new(&samples, &cfg).unwrap();
        let batch = data.batch(&[(0, false), (1, false)]).unwrap();
        let mut state = TrainState::init(&model, &cfg).unwrap();
        train_step(&model, &mut state, &batch, &cfg).unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &cfg, &state).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.state, state);
        let mut resumed = loaded.state;
        train_step(&model, &mut state, &batch, &cfg).unwrap();
        train_step(&model, &mut resumed, &batch, &cfg).unwrap();
        assert!(state.params.max_abs_diff(&resumed.params) <= 1e-7);
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig::tiny(32);
        let model = Model::new(cfg.model_config()).unwrap();
        let mut state = TrainState::init(&model, &cfg).unwrap();
        state.params.insert("extra.weight", crate::tensor::Tensor::scalar(1.0));
        let path = dir.path().join("bad.ckpt");
        save_checkpoint(&path, &cfg, &state).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
