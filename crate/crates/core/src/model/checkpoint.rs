//! Checkpoint container: a versioned JSON manifest followed by little-endian
//! `f32` tensors in manifest order.
//!
//! Computation runs in `f64`; saving rounds every value to `f32`. Loading and
//! re-saving a checkpoint reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ArchitectureConfig, ModelParams};
use super::vocab::ConceptVocabulary;
use crate::container;
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CLCK";
const VOCAB_TENSOR: &str = "vocab.embedding";
const MOMENT1_TENSOR: &str = "optim.m";
const MOMENT2_TENSOR: &str = "optim.v";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub architecture: ArchitectureConfig,
    pub schedule: ScheduleConfig,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    /// Optimizer step count when moments are stored.
    pub optimizer_step: Option<u64>,
    pub metadata: serde_json::Value,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: ConceptVocabulary,
    pub schedule: ScheduleConfig,
    /// Free-form training metadata (seeds, step counts, config echoes).
    pub metadata: serde_json::Value,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, vocab: ConceptVocabulary, schedule: ScheduleConfig) -> Self {
        Self {
            params,
            vocab,
            schedule,
            metadata: serde_json::Value::Null,
            optimizer: None,
        }
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let arch = *self.params.arch();
        if self.vocab.embed_dim() != arch.embed_dim {
            return Err(Error::Dimension {
                expected: arch.embed_dim,
                got: self.vocab.embed_dim(),
            });
        }
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, values: &[f64]| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset: payload.len(),
                len: values.len(),
            });
            payload.extend(container::f32_le_bytes(values.iter().map(|&v| v as f32)));
        };
        for spec in self.params.layout().tensors() {
            push(
                &spec.name,
                spec.shape.to_vec(),
                &self.params.values()[spec.range()],
            );
        }
        push(
            VOCAB_TENSOR,
            vec![self.vocab.len() + 1, self.vocab.embed_dim()],
            self.vocab.table(),
        );
        if let Some(opt) = &self.optimizer {
            push(MOMENT1_TENSOR, vec![opt.m.len()], &opt.m);
            push(MOMENT2_TENSOR, vec![opt.v.len()], &opt.v);
        }
        let manifest = Manifest {
            version: CHECKPOINT_FORMAT_VERSION,
            architecture: arch,
            schedule: self.schedule,
            vocabulary: self.vocab.names().to_vec(),
            tensors,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            metadata: self.metadata.clone(),
            checksum: container::sha256_hex(&payload),
        };
        let header = serde_json::to_vec(&manifest)?;
        Ok(container::encode(MAGIC, &header, &payload))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = container::decode(MAGIC, bytes)?;
        let manifest: Manifest = serde_json::from_slice(header)?;
        if manifest.version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                manifest.version
            )));
        }
        container::verify(&manifest.checksum, payload)?;

        let mut cursor = 0;
        let mut read = |entry: &TensorEntry, name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            if entry.name != name || entry.shape != shape || entry.offset != cursor {
                return Err(Error::Format(format!(
                    "unexpected tensor {} {:?} at byte {}; expected {name} {shape:?} at {cursor}",
                    entry.name, entry.shape, entry.offset
                )));
            }
            let n: usize = shape.iter().product();
            if entry.len != n || payload.len() < cursor + 4 * n {
                return Err(Error::Format(format!("tensor {name} has the wrong length")));
            }
            let out = container::f32_from_le(&payload[cursor..cursor + 4 * n])
                .into_iter()
                .map(f64::from)
                .collect();
            cursor += 4 * n;
            Ok(out)
        };

        let arch = manifest.architecture;
        let layout = arch.layout();
        let mut entries = manifest.tensors.iter();
        let mut next = || {
            entries
                .next()
                .ok_or_else(|| Error::Format("manifest lists too few tensors".into()))
        };
        let mut values = Vec::with_capacity(layout.total());
        for spec in layout.tensors() {
            values.extend(read(next()?, &spec.name, &spec.shape)?);
        }
        let params = ModelParams::from_values(arch, values)?;
        let k = manifest.vocabulary.len();
        let table = read(next()?, VOCAB_TENSOR, &[k + 1, arch.embed_dim])?;
        let vocab =
            ConceptVocabulary::from_parts(manifest.vocabulary.clone(), arch.embed_dim, table)?;
        let optimizer = match manifest.optimizer_step {
            Some(step) => {
                let n = layout.total();
                let m = read(next()?, MOMENT1_TENSOR, &[n])?;
                let v = read(next()?, MOMENT2_TENSOR, &[n])?;
                Some(OptimizerState { step, m, v })
            }
            None => None,
        };
        if next().is_ok() || cursor != payload.len() {
            return Err(Error::Format("trailing tensors or bytes".into()));
        }
        if !params.is_finite() {
            return Err(Error::Format("non-finite parameters".into()));
        }
        Ok(Self {
            params,
            vocab,
            schedule: manifest.schedule,
            metadata: manifest.metadata,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&container::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn sample() -> Checkpoint {
        let arch = ArchitectureConfig {
            hidden: 8,
            n_hidden: 2,
            embed_dim: 6,
            time_dim: 4,
            ..Default::default()
        };
        let mut rng = RngStream::new(3, 0);
        let params = ModelParams::init(arch, &mut rng).unwrap();
        let vocab = ConceptVocabulary::new(vec!["a".into(), "b".into()], 6, 1).unwrap();
        Checkpoint::new(params, vocab, ScheduleConfig::default())
            .with_metadata(serde_json::json!({"seed": 3, "steps": 0, "lr": 0.1}))
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.vocab, ck.vocab);
        assert_eq!(back.metadata, ck.metadata);
        for (a, b) in back.params.values().iter().zip(ck.params.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut ck = sample();
        let n = ck.params.len();
        ck.optimizer = Some(OptimizerState {
            step: 17,
            m: (0..n).map(|i| i as f64 * 0.5).collect(),
            v: vec![0.25; n],
        });
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        let last = bad.len() - 3;
        bad[last] ^= 0x40;
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Checksum { .. })
        ));
        assert!(Checkpoint::decode(&bytes[..bytes.len() / 2]).is_err());
        assert!(Checkpoint::decode(b"nope").is_err());
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/x.ck")),
            Err(Error::Io(_))
        ));
    }
}
