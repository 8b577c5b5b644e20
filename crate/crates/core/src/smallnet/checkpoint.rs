use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ArchConfig, ConvBlock, SmallNet};
use super::train::TrainHyper;
use crate::archive::Archive;
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub hyper: TrainHyper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    arch: ArchConfig,
    training: TrainingMeta,
}

/// A trained, frozen classifier with its training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    net: SmallNet,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn new(net: SmallNet, meta: TrainingMeta) -> Self {
        Self { net, meta }
    }

    pub fn net(&self) -> &SmallNet {
        &self.net
    }

    fn weights_archive(&self) -> Archive {
        let meta = CheckpointMeta { arch: self.net.arch().clone(), training: self.meta.clone() };
        let mut a = Archive::new(CHECKPOINT_KIND, serde_json::to_value(meta).unwrap());
        for (l, b) in self.net.blocks().iter().enumerate() {
            a.push(format!("block{l}.conv.weight"), b.weight.shape(), b.weight.iter().copied().collect());
            a.push(format!("block{l}.bn.gamma"), &[b.gamma.len()], b.gamma.clone());
            a.push(format!("block{l}.bn.beta"), &[b.beta.len()], b.beta.clone());
            a.push(format!("block{l}.bn.running_mean"), &[b.running_mean.len()], b.running_mean.clone());
            a.push(format!("block{l}.bn.running_var"), &[b.running_var.len()], b.running_var.clone());
        }
        let hw = &self.net.head_weight;
        a.push("head.weight", hw.shape(), hw.iter().copied().collect());
        a.push("head.bias", &[self.net.head_bias.len()], self.net.head_bias.clone());
        a
    }

    /// Hash of architecture and weights; training metadata is excluded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self.net.arch()).unwrap());
        h.update(self.weights_archive().payload_digest().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.weights_archive().to_bytes()
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected checkpoint, found `{}`", a.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(a.meta.clone())?;
        meta.arch.validate()?;
        let arch = meta.arch;
        let mut blocks = Vec::new();
        let mut cin = arch.input_channels;
        for (l, &c) in arch.block_channels.iter().enumerate() {
            let w = a.get_shaped(&format!("block{l}.conv.weight"), &[c, cin, 3, 3])?;
            let vec = |name: &str| -> Result<Vec<f64>> {
                Ok(a.get_shaped(&format!("block{l}.bn.{name}"), &[c])?.to_vec())
            };
            let block = ConvBlock {
                weight: Array4::from_shape_vec((c, cin, 3, 3), w.to_vec()).unwrap(),
                gamma: vec("gamma")?,
                beta: vec("beta")?,
                running_mean: vec("running_mean")?,
                running_var: vec("running_var")?,
            };
            if block.running_var.iter().any(|&v| v < 0.0 || !v.is_finite())
                || block.running_mean.iter().any(|v| !v.is_finite())
            {
                return Err(Error::Format(format!("block {l} has invalid BN statistics")));
            }
            blocks.push(block);
            cin = c;
        }
        let hw = a.get_shaped("head.weight", &[arch.num_classes, cin])?;
        let hb = a.get_shaped("head.bias", &[arch.num_classes])?;
        let head_weight = Array2::from_shape_vec((arch.num_classes, cin), hw.to_vec()).unwrap();
        Ok(Self {
            net: SmallNet::from_parts(arch, blocks, head_weight, hb.to_vec()),
            meta: meta.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.weights_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact { stage: "train", path: path.to_path_buf() });
        }
        Self::from_archive(&Archive::load(path)?)
    }
}
