//! JSON checkpoints. Floats are written in shortest round-trip form and parsed
//! exactly, so `load(save(m)) == m` holds bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CharVocab, InflectionModel, ModelConfig, ModelVariant};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ConfigRecord {
    hidden: usize,
    embed_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    variant: String,
    vocab: Vec<char>,
    config: ConfigRecord,
    tags: Vec<String>,
    tensors: Vec<TensorRecord>,
}

impl InflectionModel {
    pub fn to_json(&self) -> Result<String> {
        let mut tensors = Vec::with_capacity(self.store.len());
        for (_, name, t) in self.store.iter() {
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has non-finite entries"
                )));
            }
            tensors.push(TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
        let file = CheckpointFile {
            format_version: FORMAT_VERSION,
            variant: self.variant.as_str().to_string(),
            vocab: self.vocab.data_chars().to_vec(),
            config: ConfigRecord {
                hidden: self.config.hidden,
                embed_dim: self.config.embed_dim,
            },
            tags: self.tags().map(str::to_string).collect(),
            tensors,
        };
        serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct VersionProbe {
            format_version: u32,
        }
        let probe: VersionProbe = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if probe.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                probe.format_version
            )));
        }
        let file: CheckpointFile = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        let variant: ModelVariant = file.variant.parse()?;
        let vocab = CharVocab::from_chars(file.vocab.iter().copied());
        if vocab.data_chars() != file.vocab.as_slice() {
            return Err(Error::Checkpoint(
                "vocabulary must be sorted and free of duplicates".into(),
            ));
        }
        let mut store = ParamStore::new();
        for rec in file.tensors {
            let t = Tensor::new(rec.shape.clone(), rec.data).map_err(|_| {
                Error::Checkpoint(format!(
                    "tensor `{}` data length does not match shape {:?}",
                    rec.name, rec.shape
                ))
            })?;
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has non-finite entries",
                    rec.name
                )));
            }
            store
                .add(rec.name, t)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let config = ModelConfig {
            hidden: file.config.hidden,
            embed_dim: file.config.embed_dim,
        };
        InflectionModel::from_parts(vocab, config, variant, &file.tags, store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        for v in ModelVariant::ALL {
            let m = tiny(v, 17);
            let text = m.to_json().unwrap();
            let back = InflectionModel::from_json(&text).unwrap();
            assert_eq!(back, m);
            for ((_, _, a), (_, _, b)) in m.store().iter().zip(back.store().iter()) {
                let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
            assert_eq!(back.to_json().unwrap(), text);
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let text = tiny(ModelVariant::Full, 1)
            .to_json()
            .unwrap()
            .replace("\"format_version\":1", "\"format_version\":2");
        let err = InflectionModel::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("format_version 2"), "{err}");
    }

    #[test]
    fn truncated_tensor_names_the_tensor() {
        let m = tiny(ModelVariant::Full, 1);
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        let tensors = v["tensors"].as_array_mut().unwrap();
        let target = tensors
            .iter_mut()
            .find(|t| t["name"] == "head.T.out.b")
            .unwrap();
        target["data"].as_array_mut().unwrap().pop();
        let err = InflectionModel::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("head.T.out.b"), "{err}");
    }

    #[test]
    fn garbage_is_an_error() {
        assert!(InflectionModel::from_json("{not json").is_err());
        assert!(InflectionModel::from_json("{\"format_version\":1}").is_err());
    }
}
