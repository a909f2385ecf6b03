//! Checkpoint files: the raw container with the configuration and counters
//! in `meta` and one array per parameter and optimizer moment.
//!
//! Array names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>` in
//! the network's registration order. All values are stored bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{self, NamedArray};
use crate::error::{Error, Result};
use crate::nn::{EpsilonPredictor, NetworkConfig, Tensor};
use crate::trainer::{Adam, Checkpoint, TrainConfig};

const KIND: &str = "checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    network: NetworkConfig,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    optimizer_step: u64,
    /// Decimal string: JSON numbers cannot hold a `u128` portably.
    rng_word_pos: String,
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let meta = Meta {
        kind: KIND.into(),
        network: *ckpt.network.config(),
        train: ckpt.train.clone(),
        epoch: ckpt.epoch,
        step: ckpt.step,
        optimizer_step: ckpt.optimizer.step,
        rng_word_pos: ckpt.rng_word_pos.to_string(),
    };
    let params = ckpt.network.params();
    let mut arrays = Vec::with_capacity(params.len() * 3);
    for (name, t) in params.names().iter().zip(params.tensors()) {
        arrays.push(NamedArray::new(format!("param/{name}"), t.shape().to_vec(), t.data().to_vec()));
    }
    for (prefix, moments) in [("adam.m", &ckpt.optimizer.m), ("adam.v", &ckpt.optimizer.v)] {
        for ((name, t), m) in params.names().iter().zip(params.tensors()).zip(moments) {
            arrays.push(NamedArray::new(format!("{prefix}/{name}"), t.shape().to_vec(), m.clone()));
        }
    }
    let meta = serde_json::to_value(&meta).unwrap_or_else(|_| json!({}));
    container::write(path, &meta, &arrays)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut c = container::read(path)?;
    let meta: Meta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::format(path, e))?;
    if meta.kind != KIND {
        return Err(Error::format(path, format!("expected a checkpoint, found kind {:?}", meta.kind)));
    }
    let rng_word_pos = meta
        .rng_word_pos
        .parse::<u128>()
        .map_err(|e| Error::format(path, format!("rng_word_pos: {e}")))?;
    let template = EpsilonPredictor::new(meta.network, 0)?;
    let names: Vec<String> = template.params().names().to_vec();
    let mut take = |prefix: &str, name: &str| -> Result<NamedArray> {
        c.take(&format!("{prefix}/{name}"))
            .ok_or_else(|| Error::format(path, format!("missing array {prefix}/{name}")))
    };
    let mut named = Vec::with_capacity(names.len());
    for name in &names {
        let a = take("param", name)?;
        let shape: [usize; 4] = a
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::format(path, format!("param/{name} is not 4-D")))?;
        named.push((name.clone(), Tensor::from_vec(shape, a.data)));
    }
    let network = EpsilonPredictor::from_named(meta.network, named)
        .map_err(|e| Error::format(path, e))?;
    let mut optimizer = Adam::new(meta.train.adam, network.params().tensors());
    optimizer.step = meta.optimizer_step;
    for (i, name) in names.iter().enumerate() {
        let expect = network.params().tensors()[i].len();
        for (prefix, slot) in [("adam.m", &mut optimizer.m[i]), ("adam.v", &mut optimizer.v[i])] {
            let a = take(prefix, name)?;
            if a.data.len() != expect {
                return Err(Error::format(path, format!("{prefix}/{name} has the wrong length")));
            }
            *slot = a.data;
        }
    }
    Ok(Checkpoint {
        network,
        train: meta.train,
        epoch: meta.epoch,
        step: meta.step,
        optimizer,
        rng_word_pos,
    })
}

/// Load only the network from a checkpoint file.
pub fn load_network(path: &Path) -> Result<EpsilonPredictor> {
    load(path).map(|c| c.network)
}
