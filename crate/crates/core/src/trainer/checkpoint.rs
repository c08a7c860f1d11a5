use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricRecord, TrainConfig};
use crate::container::Container;
use crate::corrnet::{CorrConfig, CorrNet};
use crate::error::{Error, Result};
use crate::genet::{FeatureNorm, GenConfig, GenNet};
use crate::numcore::{ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Correlation(CorrNet),
    Generation(GenNet),
}

/// Every random draw in training comes from streams keyed by the seed and
/// the epoch, so the seed and progress counters are the whole RNG state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epochs_completed: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub registry_hash: u64,
    pub train: Option<TrainConfig>,
    pub rng: RngState,
    pub metrics: Vec<MetricRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelHeader {
    Correlation { config: CorrConfig, trained: bool },
    Generation { config: GenConfig },
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelHeader,
    registry_hash: String,
    train: Option<TrainConfig>,
    rng: RngState,
    metrics: Vec<MetricRecord>,
}

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

impl ModelCheckpoint {
    pub fn corr(&self) -> Result<&CorrNet> {
        match &self.model {
            Model::Correlation(c) => Ok(c),
            Model::Generation(_) => Err(Error::Compatibility(
                "expected a correlation checkpoint, found a generation one".into(),
            )),
        }
    }

    pub fn gen(&self) -> Result<&GenNet> {
        match &self.model {
            Model::Generation(g) => Ok(g),
            Model::Correlation(_) => Err(Error::Compatibility(
                "expected a generation checkpoint, found a correlation one".into(),
            )),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let (model, params) = match &self.model {
            Model::Correlation(c) => (
                ModelHeader::Correlation {
                    config: c.config.clone(),
                    trained: c.trained,
                },
                &c.params,
            ),
            Model::Generation(g) => (
                ModelHeader::Generation {
                    config: g.config.clone(),
                },
                &g.params,
            ),
        };
        let header = Header {
            model,
            registry_hash: format!("{:016x}", self.registry_hash),
            train: self.train.clone(),
            rng: self.rng,
            metrics: self.metrics.clone(),
        };
        let mut c = Container::new(serde_json::to_value(&header)?);
        for (name, t) in params.iter() {
            c.push(name, t);
        }
        if let Model::Generation(g) = &self.model {
            let d = g.norm.mean.len();
            c.push(NORM_MEAN, &Tensor::new(vec![d], g.norm.mean.clone())?);
            c.push(NORM_STD, &Tensor::new(vec![d], g.norm.std.clone())?);
        }
        Ok(c)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let header: Header =
            serde_json::from_value(c.header).map_err(|e| Error::Schema(format!("checkpoint header: {e}")))?;
        let registry_hash = u64::from_str_radix(&header.registry_hash, 16)
            .map_err(|_| Error::Schema(format!("bad registry hash `{}`", header.registry_hash)))?;
        let mut arrays: std::collections::BTreeMap<String, Tensor> = c.arrays.into_iter().collect();
        let model = match header.model {
            ModelHeader::Correlation { config, trained } => {
                let template = CorrNet::init(config.clone(), 0)?;
                let params = take_params(&template.params, &mut arrays)?;
                Model::Correlation(CorrNet {
                    config,
                    params,
                    trained,
                })
            }
            ModelHeader::Generation { config } => {
                let template = GenNet::init(config.clone(), 0)?;
                let params = take_params(&template.params, &mut arrays)?;
                let mut norm_part = |name: &str| -> Result<Vec<f64>> {
                    let t = arrays
                        .remove(name)
                        .ok_or_else(|| Error::Schema(format!("checkpoint lacks `{name}`")))?;
                    if t.len() != config.feature_dim {
                        return Err(Error::Schema(format!("`{name}` has {} entries", t.len())));
                    }
                    Ok(t.into_data())
                };
                let norm = FeatureNorm {
                    mean: norm_part(NORM_MEAN)?,
                    std: norm_part(NORM_STD)?,
                };
                Model::Generation(GenNet { config, params, norm })
            }
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Schema(format!("unexpected array `{extra}` in checkpoint")));
        }
        Ok(ModelCheckpoint {
            model,
            registry_hash,
            train: header.train,
            rng: header.rng,
            metrics: header.metrics,
        })
    }
}

fn take_params(template: &ParamSet, arrays: &mut std::collections::BTreeMap<String, Tensor>) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, t) in template.iter() {
        let a = arrays
            .remove(name)
            .ok_or_else(|| Error::Schema(format!("checkpoint lacks parameter `{name}`")))?;
        if a.shape() != t.shape() {
            return Err(Error::Schema(format!(
                "parameter `{name}` has shape {:?}, config implies {:?}",
                a.shape(),
                t.shape()
            )));
        }
        out.insert(name, a);
    }
    Ok(out)
}

/// Writes the checkpoint; parameters are stored as f32.
pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    ckpt.to_container()?.save(path)
}

/// Reads a checkpoint; any structural problem is an error and no partial
/// model is returned.
pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::from_container(Container::load(path)?)
}
