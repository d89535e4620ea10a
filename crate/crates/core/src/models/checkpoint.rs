//! Binary container shared by model checkpoints and persisted datasets.
//!
//! Layout: the magic bytes `DDO1`, a little-endian `u32` header length, the
//! UTF-8 JSON header, then every tensor's values as little-endian `f64` in
//! declaration order (shapes are listed in the header).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArConfig, ArModel, CategoricalModel, DiffusionConfig, DiffusionModel};
use crate::error::{Error, Result};
use crate::grad::Tensor;

pub const MAGIC: &[u8; 4] = b"DDO1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: String,
    pub shapes: Vec<Vec<usize>>,
    #[serde(default)]
    pub config: serde_json::Value,
    pub seed: u64,
    pub round: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        config: serde_json::Value,
        tensors: Vec<Tensor>,
        seed: u64,
        round: u32,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                kind: kind.to_string(),
                shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
                config,
                seed,
                round,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let len = u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let n: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(8 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing DDO1 magic".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(8..8 + len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let payload = &bytes[8 + len..];
        let expected: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if payload.len() != 8 * expected {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, header declares {} values",
                payload.len(),
                expected
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let tensors = header
            .shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), values.by_ref().take(n).collect())
            })
            .collect::<crate::grad::Result<Vec<_>>>()?;
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

/// Any model the experiment runner can persist.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Categorical(CategoricalModel),
    Ar(ArModel),
    Diffusion(DiffusionModel),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Categorical(_) => "categorical",
            AnyModel::Ar(_) => "ar",
            AnyModel::Diffusion(_) => "diffusion",
        }
    }

    pub fn params(&self) -> &[Tensor] {
        match self {
            AnyModel::Categorical(m) => m.params(),
            AnyModel::Ar(m) => m.params(),
            AnyModel::Diffusion(m) => m.params(),
        }
    }

    pub fn to_checkpoint(&self, seed: u64, round: u32) -> Result<Checkpoint> {
        let config = match self {
            AnyModel::Categorical(m) => serde_json::json!({ "num_states": m.num_states() }),
            AnyModel::Ar(m) => serde_json::to_value(m.config())?,
            AnyModel::Diffusion(m) => serde_json::to_value(m.config())?,
        };
        Ok(Checkpoint::new(
            self.kind(),
            config,
            self.params().to_vec(),
            seed,
            round,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let tensors = ckpt.tensors.clone();
        match ckpt.header.kind.as_str() {
            "categorical" => {
                if tensors.len() != 1 || tensors[0].shape().len() != 1 {
                    return Err(Error::Checkpoint("categorical checkpoint needs one logit vector".into()));
                }
                Ok(AnyModel::Categorical(CategoricalModel::new(
                    tensors[0].data().to_vec(),
                )))
            }
            "ar" => {
                let config: ArConfig = serde_json::from_value(ckpt.header.config.clone())?;
                Ok(AnyModel::Ar(ArModel::from_params(config, tensors)?))
            }
            "diffusion" => {
                let config: DiffusionConfig = serde_json::from_value(ckpt.header.config.clone())?;
                Ok(AnyModel::Diffusion(DiffusionModel::from_params(config, tensors)?))
            }
            other => Err(Error::Checkpoint(format!("not a model checkpoint: kind {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path, seed: u64, round: u32) -> Result<String> {
        let ckpt = self.to_checkpoint(seed, round)?;
        ckpt.write(path)?;
        ckpt.digest()
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::read(path)?;
        Ok((Self::from_checkpoint(&ckpt)?, ckpt))
    }
}

/// Models that can be trained by the generic loops and persisted.
pub trait TrainableModel: Clone + Send + Sync {
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];
    fn to_any(&self) -> AnyModel;
    fn from_any(model: AnyModel) -> Result<Self>;
}

macro_rules! trainable {
    ($ty:ty, $variant:ident) => {
        impl TrainableModel for $ty {
            fn params(&self) -> &[Tensor] {
                <$ty>::params(self)
            }

            fn params_mut(&mut self) -> &mut [Tensor] {
                <$ty>::params_mut(self)
            }

            fn to_any(&self) -> AnyModel {
                AnyModel::$variant(self.clone())
            }

            fn from_any(model: AnyModel) -> Result<Self> {
                match model {
                    AnyModel::$variant(m) => Ok(m),
                    other => Err(Error::Checkpoint(format!(
                        "expected a {} checkpoint, found {}",
                        stringify!($variant).to_lowercase(),
                        other.kind()
                    ))),
                }
            }
        }
    };
}

trainable!(CategoricalModel, Categorical);
trainable!(ArModel, Ar);
trainable!(DiffusionModel, Diffusion);
