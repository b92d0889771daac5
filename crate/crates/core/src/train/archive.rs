//! Model checkpoints: parameters, optional optimizer moments, and a JSON
//! header echoing every setting needed to rebuild the model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TypeInventory;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, ModelParams, SpanScorer, StoredTensor};
use crate::tensor::{Scalar, Tensor};
use crate::train::config::{Precision, TrainConfig};
use crate::train::optim::AdamW;
use crate::train::vocab::Vocab;

const KIND: &str = "span-ner";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub kind: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vec<String>,
    pub types: Vec<String>,
    pub precision: Precision,
    /// Optimizer updates applied when the archive was written.
    pub step: u64,
    pub epoch: usize,
}

/// A trained model plus what is needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive<F> {
    pub header: ArchiveHeader,
    pub params: ModelParams<F>,
    pub optimizer: Option<AdamW<F>>,
}

fn precision_of<F: Scalar>() -> Precision {
    match F::DTYPE {
        crate::tensor::DType::F32 => Precision::F32,
        crate::tensor::DType::F64 => Precision::F64,
    }
}

impl<F: Scalar> ModelArchive<F> {
    pub fn new(
        model: &SpanScorer<F>,
        train: &TrainConfig,
        vocab: &Vocab,
        types: &TypeInventory,
        optimizer: Option<&AdamW<F>>,
        epoch: usize,
    ) -> Self {
        ModelArchive {
            header: ArchiveHeader {
                kind: KIND.into(),
                model: model.config.clone(),
                train: train.clone(),
                vocab: vocab.tokens().to_vec(),
                types: types.names().to_vec(),
                precision: precision_of::<F>(),
                step: optimizer.map_or(0, |o| o.step),
                epoch,
            },
            params: model.params.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn scorer(&self) -> Result<SpanScorer<F>> {
        SpanScorer::new(self.header.model.clone(), self.params.clone())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.header.vocab.clone())
    }

    pub fn types(&self) -> TypeInventory {
        TypeInventory::new(self.header.types.clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = serde_json::to_value(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        let named = self.params.named();
        let mut records: Vec<(String, StoredTensor)> =
            named.iter().map(|(n, t)| (n.clone(), StoredTensor::from_tensor(*t))).collect();
        if let Some(opt) = &self.optimizer {
            for ((n, _), (m, v)) in named.iter().zip(opt.m.iter().zip(&opt.v)) {
                records.push((format!("adam.m.{n}"), StoredTensor::from_tensor(m)));
                records.push((format!("adam.v.{n}"), StoredTensor::from_tensor(v)));
            }
        }
        Ok(Checkpoint { header, records })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header: ArchiveHeader = serde_json::from_value(ck.header.clone())
            .map_err(|e| Error::Version(format!("unrecognized checkpoint header: {e}")))?;
        if header.kind != KIND {
            return Err(Error::Version(format!("checkpoint kind {:?} is not {KIND:?}", header.kind)));
        }
        header.model.validate()?;
        if header.model.vocab_size != header.vocab.len() || header.model.num_types != header.types.len() {
            return Err(Error::Format("header vocabulary or type list disagrees with the model config".into()));
        }
        let template = ModelParams::<F>::init(&header.model, 0, Default::default())?;
        let names: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
        let fetch = |name: &str| -> Result<Tensor<F>> {
            ck.get(name)
                .map(|t| t.to_tensor())
                .ok_or_else(|| Error::Format(format!("checkpoint has no record {name}")))
        };
        let params = ModelParams::from_named(
            &header.model,
            names.iter().map(|n| fetch(n).map(|t| (n.clone(), t))).collect::<Result<_>>()?,
        )?;
        let optimizer = if ck.get(&format!("adam.m.{}", names[0])).is_some() {
            let m = names.iter().map(|n| fetch(&format!("adam.m.{n}"))).collect::<Result<Vec<_>>>()?;
            let v = names.iter().map(|n| fetch(&format!("adam.v.{n}"))).collect::<Result<Vec<_>>>()?;
            for ((mt, vt), (_, p)) in m.iter().zip(&v).zip(params.named()) {
                if mt.shape() != p.shape() || vt.shape() != p.shape() {
                    return Err(Error::Format("optimizer moment shape differs from its parameter".into()));
                }
            }
            Some(AdamW {
                m,
                v,
                step: header.step,
                weight_decay: header.train.weight_decay,
                beta1: header.train.beta1,
                beta2: header.train.beta2,
                eps: header.train.eps,
            })
        } else {
            None
        };
        Ok(ModelArchive {
            header,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Fails with a version error when `train` would build a different
    /// architecture than the one stored.
    pub fn check_compatible(&self, train: &TrainConfig) -> Result<()> {
        let expected = train.model_config(self.header.model.num_types, self.header.model.vocab_size);
        if expected != self.header.model {
            return Err(Error::Version(format!(
                "configuration builds {expected:?} but the checkpoint holds {:?}",
                self.header.model
            )));
        }
        Ok(())
    }
}

/// Stored precision of an archive without decoding its tensors twice.
pub fn archive_precision(ck: &Checkpoint) -> Result<Precision> {
    ck.header
        .get("precision")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Error::Version("checkpoint header has no precision".into()))
}
