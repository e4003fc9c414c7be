//! Text checkpoints: named tensors with shapes, hyperparameters, and scalers.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Granularity, ScalerTable};
use crate::error::{Error, Result};
use crate::net::{NetConfig, Network};
use crate::params::ParamSet;
use crate::training::{TrainConfig, TrainedModel};

pub const CHECKPOINT_VERSION: &str = "batchcast-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Document {
    version: String,
    network: NetConfig,
    training: TrainConfig,
    granularity: Granularity,
    scalers: ScalerTable,
    tensors: Vec<TensorRecord>,
}

pub fn to_json(model: &TrainedModel) -> Result<String> {
    let params = model.net.params();
    let tensors = params
        .layout()
        .specs()
        .iter()
        .enumerate()
        .map(|(i, s)| TensorRecord { name: s.name.clone(), shape: s.shape.clone(), values: params.as_slice()[params.layout().range(i)].to_vec() })
        .collect();
    let doc = Document {
        version: CHECKPOINT_VERSION.to_string(),
        network: model.net.config().clone(),
        training: model.config.clone(),
        granularity: model.granularity,
        scalers: model.scalers.clone(),
        tensors,
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn from_json(text: &str) -> Result<TrainedModel> {
    let doc: Document = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("version `{}` is not `{CHECKPOINT_VERSION}`", doc.version)));
    }
    let layout = Arc::new(doc.network.layout());
    if doc.tensors.len() != layout.specs().len() {
        return Err(Error::Checkpoint(format!("{} tensors stored, architecture has {}", doc.tensors.len(), layout.specs().len())));
    }
    let mut flat = Vec::with_capacity(layout.total());
    for (spec, t) in layout.specs().iter().zip(&doc.tensors) {
        if spec.name != t.name || spec.shape != t.shape {
            return Err(Error::Checkpoint(format!("tensor `{}` has shape {:?}, expected `{}` with shape {:?}", t.name, t.shape, spec.name, spec.shape)));
        }
        if t.values.len() != spec.numel() {
            return Err(Error::Checkpoint(format!("tensor `{}` stores {} values for shape {:?}", t.name, t.values.len(), t.shape)));
        }
        flat.extend_from_slice(&t.values);
    }
    let params = ParamSet::from_flat(layout, flat).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let net = Network::from_params(doc.network, params)?;
    TrainedModel::new(net, doc.training, doc.scalers, doc.granularity)
}

pub fn save(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainedModel> {
    from_json(&std::fs::read_to_string(path)?)
}

/// Verifies that a loaded model matches the architecture a configuration asks for.
pub fn check_compatible(model: &TrainedModel, network: &NetConfig, training: &TrainConfig) -> Result<()> {
    let have = model.net.config().layout();
    let want = network.layout();
    for (h, w) in have.specs().iter().zip(want.specs()) {
        if h != w {
            return Err(Error::Checkpoint(format!("checkpoint tensor `{}` has shape {:?}, configuration expects `{}` with shape {:?}", h.name, h.shape, w.name, w.shape)));
        }
    }
    if have.specs().len() != want.specs().len() {
        return Err(Error::Checkpoint(format!("checkpoint has {} tensors, configuration expects {}", have.specs().len(), want.specs().len())));
    }
    let (a, b) = (&model.config, training);
    if (a.context, a.depth, a.lengthscales.as_slice()) != (b.context, b.depth, b.lengthscales.as_slice()) {
        return Err(Error::Checkpoint(format!(
            "checkpoint trained with context {} depth {} lengthscales {:?}, configuration has {} {} {:?}",
            a.context, a.depth, a.lengthscales, b.context, b.depth, b.lengthscales
        )));
    }
    Ok(())
}
