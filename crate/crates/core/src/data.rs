//! Synthetic labeled datasets drawn from a [`MixtureSpec`], and their file
//! format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::oracle::{Component, Concept, MixtureSpec, MIXTURE_FORMAT_VERSION};
use crate::rng::RngStream;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CLDS";

/// Named built-in mixtures.
pub const PRESETS: [&str; 3] = ["four-corners", "rings", "overlap"];

fn concept(name: &str, comps: &[([f64; 2], f64)], variance: f64) -> Concept {
    Concept {
        name: name.to_string(),
        components: comps
            .iter()
            .map(|(m, w)| Component {
                weight: *w,
                mean: m.to_vec(),
                variance,
            })
            .collect(),
    }
}

pub fn preset(name: &str) -> Result<MixtureSpec> {
    let (concepts, prior) = match name {
        // 16 sigma between neighbouring concept means
        "four-corners" => (
            vec![
                concept("ne", &[([4.0, 4.0], 1.0)], 0.25),
                concept("nw", &[([-4.0, 4.0], 1.0)], 0.25),
                concept("sw", &[([-4.0, -4.0], 1.0)], 0.25),
                concept("se", &[([4.0, -4.0], 1.0)], 0.25),
            ],
            // northern concepts are minorities
            vec![0.05, 0.05, 0.45, 0.45],
        ),
        // eight modes on a radius-5 ring, adjacent pairs form one concept
        "rings" => {
            let point = |i: usize| {
                let a = std::f64::consts::TAU * i as f64 / 8.0;
                [5.0 * a.cos(), 5.0 * a.sin()]
            };
            (
                (0..4)
                    .map(|k| {
                        concept(
                            &format!("arc{}", k + 1),
                            &[(point(2 * k), 0.5), (point(2 * k + 1), 0.5)],
                            0.2,
                        )
                    })
                    .collect(),
                vec![0.25; 4],
            )
        }
        // the middle component is shared by both concepts
        "overlap" => (
            vec![
                concept("left", &[([-3.0, 0.0], 0.5), ([0.0, 0.0], 0.5)], 0.3),
                concept("right", &[([0.0, 0.0], 0.5), ([3.0, 0.0], 0.5)], 0.3),
            ],
            vec![0.5, 0.5],
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {PRESETS:?}"
            )))
        }
    };
    let spec = MixtureSpec {
        version: MIXTURE_FORMAT_VERSION,
        dim: 2,
        concepts,
        prior,
    };
    spec.validate()?;
    Ok(spec)
}

/// SHA-256 of the compact JSON form.
pub fn spec_hash(spec: &MixtureSpec) -> String {
    container::sha256_hex(
        serde_json::to_string(spec)
            .expect("mixture serializes")
            .as_bytes(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_hash: String,
    pub seed: u64,
    pub n: usize,
}

/// Points are stored at `f32` precision, matching the file format.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dim: usize,
    /// Row-major `n x dim`.
    pub points: Vec<f32>,
    /// 1-based concept ids.
    pub labels: Vec<u32>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate_against(&self, spec: &MixtureSpec) -> Result<()> {
        if self.dim != spec.dim {
            return Err(Error::Dimension {
                expected: spec.dim,
                got: self.dim,
            });
        }
        let k = spec.n_concepts();
        if let Some(&bad) = self.labels.iter().find(|&&l| l == 0 || l as usize > k) {
            return Err(Error::UnknownConcept {
                id: bad as usize,
                k,
            });
        }
        Ok(())
    }
}

/// i.i.d. labeled draws: concept from the prior, component from the concept
/// weights, point from `N(mean, variance I)`.
pub fn make_mixture(spec: &MixtureSpec, seed: u64, n: usize) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let mut rng = RngStream::new(seed, 0x6461_7461);
    let mut points = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.categorical(&spec.prior);
        let concept = &spec.concepts[k];
        let weights: Vec<f64> = concept.components.iter().map(|c| c.weight).collect();
        let comp = &concept.components[rng.categorical(&weights)];
        let sd = comp.variance.sqrt();
        for d in 0..spec.dim {
            points.push((comp.mean[d] + sd * rng.normal()) as f32);
        }
        labels.push(k as u32 + 1);
    }
    Ok(LabeledDataset {
        dim: spec.dim,
        points,
        labels,
        provenance: Provenance {
            spec_hash: spec_hash(spec),
            seed,
            n,
        },
    })
}

pub fn make_preset(name: &str, seed: u64, n: usize) -> Result<(MixtureSpec, LabeledDataset)> {
    let spec = preset(name)?;
    let data = make_mixture(&spec, seed, n)?;
    Ok((spec, data))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    spec_hash: String,
    seed: u64,
    n: usize,
    dim: usize,
    checksum: String,
}

pub fn encode_dataset(data: &LabeledDataset) -> Vec<u8> {
    let mut payload = container::f32_le_bytes(data.points.iter().copied());
    payload.extend(data.labels.iter().flat_map(|&l| (l as i32).to_le_bytes()));
    let header = Header {
        version: DATASET_FORMAT_VERSION,
        spec_hash: data.provenance.spec_hash.clone(),
        seed: data.provenance.seed,
        n: data.len(),
        dim: data.dim,
        checksum: container::sha256_hex(&payload),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    container::encode(MAGIC, &header, &payload)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let (header, payload) = container::decode(MAGIC, bytes)?;
    let header: Header = serde_json::from_slice(header)?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset version {} unsupported (expected {DATASET_FORMAT_VERSION})",
            header.version
        )));
    }
    container::verify(&header.checksum, payload)?;
    let n_points = header.n * header.dim;
    if payload.len() != 4 * n_points + 4 * header.n {
        return Err(Error::Format("payload size disagrees with header".into()));
    }
    let points = container::f32_from_le(&payload[..4 * n_points]);
    let labels = payload[4 * n_points..]
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .map(|l| u32::try_from(l).map_err(|_| Error::Format(format!("negative label {l}"))))
        .collect::<Result<Vec<u32>>>()?;
    Ok(LabeledDataset {
        dim: header.dim,
        points,
        labels,
        provenance: Provenance {
            spec_hash: header.spec_hash,
            seed: header.seed,
            n: header.n,
        },
    })
}

pub fn save_dataset(path: &Path, data: &LabeledDataset) -> Result<()> {
    container::write_file(path, &encode_dataset(data))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    decode_dataset(&container::read_file(path)?)
}
