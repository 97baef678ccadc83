//! Epoch-boundary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | offset    | size | content                                  |
//! |-----------|------|------------------------------------------|
//! | 0         | 8    | magic `DNATCKPT`                         |
//! | 8         | 2    | format major version                     |
//! | 10        | 2    | format minor version                     |
//! | 12        | 8    | payload length `L`                       |
//! | 20        | L    | payload: compact UTF-8 JSON              |
//! | 20 + L    | 32   | SHA-256 of bytes `[0, 20 + L)`           |
//!
//! Tensors are stored as the IEEE-754 bit patterns of their elements, so a
//! restored state is bit-identical. Readers refuse a different major version
//! and accept any minor version of the same major.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::discretize::Decisions;
use crate::graph::{EdgeRef, Network};
use crate::mixed::{ThetaEntry, ThetaTable, Tying};
use crate::model::{LayerParams, Model};
use crate::optim::{Adam, Sgd};
use crate::tape::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{Stage, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"DNATCKPT";
pub const FORMAT_MAJOR: u16 = 1;
pub const FORMAT_MINOR: u16 = 0;
const HEADER: usize = 20;
const DIGEST: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format {found}.x is not supported by this build (expects {FORMAT_MAJOR}.x)")]
    VersionMismatch { found: u16 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint integrity check failed (checksum mismatch)")]
    Corrupted,
    #[error("malformed checkpoint payload: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    bits: Vec<u64>,
}

impl TensorRecord {
    fn of(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), bits: t.data().iter().map(|v| v.to_bits()).collect() }
    }

    fn tensor(&self) -> Result<Tensor, CheckpointError> {
        Tensor::new(self.shape.clone(), self.bits.iter().map(|&b| f64::from_bits(b)).collect()).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    id: usize,
    name: String,
    value: TensorRecord,
}

#[derive(Serialize, Deserialize)]
struct RngRecord {
    seed: String,
    stream: u64,
    /// `u128` as a decimal string.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct ThetaRecord {
    tying: Tying,
    /// `(row key, param id, identity allowed)`.
    entries: Vec<(String, usize, bool)>,
}

#[derive(Serialize, Deserialize)]
struct SgdRecord {
    lr: f64,
    momentum: f64,
    velocity: Vec<(usize, TensorRecord)>,
}

#[derive(Serialize, Deserialize)]
struct AdamRecord {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: Vec<(usize, TensorRecord, TensorRecord)>,
}

#[derive(Serialize, Deserialize)]
struct Payload {
    config_hash: String,
    config: TrainConfig,
    epoch: usize,
    stage: Stage,
    rng: RngRecord,
    original: Network,
    network: Network,
    next_param_id: usize,
    params: Vec<ParamRecord>,
    stem: (usize, usize),
    head: (usize, usize),
    edges: Vec<(String, usize, usize)>,
    theta: Option<ThetaRecord>,
    omega_opt: SgdRecord,
    theta_opt: AdamRecord,
    decisions: Option<String>,
    warnings: Vec<String>,
}

/// A training state together with the hash of the config that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    pub state: TrainState,
}

fn malformed(e: impl ToString) -> CheckpointError {
    CheckpointError::Malformed(e.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let m = &s.model;
        let payload = Payload {
            config_hash: self.config_hash.clone(),
            config: s.config,
            epoch: s.epoch,
            stage: s.stage,
            rng: RngRecord { seed: hex::encode(s.rng.get_seed()), stream: s.rng.get_stream(), word_pos: s.rng.get_word_pos().to_string() },
            original: s.original.clone(),
            network: m.network.clone(),
            next_param_id: m.params.next_id(),
            params: m.params.iter().map(|p| ParamRecord { id: p.id.0, name: p.name.clone(), value: TensorRecord::of(&p.value) }).collect(),
            stem: (m.stem.weight.0, m.stem.bias.0),
            head: (m.head.weight.0, m.head.bias.0),
            edges: m.edges.iter().map(|(at, l)| (at.to_string(), l.weight.0, l.bias.0)).collect(),
            theta: s
                .theta
                .as_ref()
                .map(|t| ThetaRecord { tying: t.tying, entries: t.entries().iter().map(|e| (e.key.to_string(), e.param.0, e.mask_id)).collect() }),
            omega_opt: SgdRecord {
                lr: s.omega_opt.lr,
                momentum: s.omega_opt.momentum,
                velocity: s.omega_opt.velocity.iter().map(|(id, v)| (id.0, TensorRecord::of(v))).collect(),
            },
            theta_opt: AdamRecord {
                lr: s.theta_opt.lr,
                beta1: s.theta_opt.beta1,
                beta2: s.theta_opt.beta2,
                eps: s.theta_opt.eps,
                t: s.theta_opt.t,
                moments: s.theta_opt.moments.iter().map(|(id, (a, b))| (id.0, TensorRecord::of(a), TensorRecord::of(b))).collect(),
            },
            decisions: s.decisions.as_ref().map(|d| d.to_json(&self.config_hash)),
            warnings: s.decisions.as_ref().map(|d| d.warnings.clone()).unwrap_or_default(),
        };
        let body = serde_json::to_vec(&payload).expect("payload serializes");
        let mut out = Vec::with_capacity(HEADER + body.len() + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_MAJOR.to_le_bytes());
        out.extend_from_slice(&FORMAT_MINOR.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER {
            return Err(CheckpointError::Truncated);
        }
        let major = u16::from_le_bytes([bytes[8], bytes[9]]);
        if major != FORMAT_MAJOR {
            return Err(CheckpointError::VersionMismatch { found: major });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let end = HEADER.checked_add(len).ok_or(CheckpointError::Corrupted)?;
        if bytes.len() < end + DIGEST {
            return Err(CheckpointError::Truncated);
        }
        if bytes.len() != end + DIGEST || Sha256::digest(&bytes[..end])[..] != bytes[end..] {
            return Err(CheckpointError::Corrupted);
        }
        let p: Payload = serde_json::from_slice(&bytes[HEADER..end]).map_err(malformed)?;
        Self::from_payload(p)
    }

    fn from_payload(p: Payload) -> Result<Self, CheckpointError> {
        let mut params = ParamStore::new();
        for r in &p.params {
            params.insert(ParamId(r.id), r.name.clone(), r.value.tensor()?);
        }
        params.set_next_id(p.next_param_id);
        let known = |id: usize| {
            if params.get(ParamId(id)).is_some() {
                Ok(ParamId(id))
            } else {
                Err(malformed(format!("unknown parameter id {id}")))
            }
        };
        let layer = |(w, b): (usize, usize)| -> Result<LayerParams, CheckpointError> { Ok(LayerParams { weight: known(w)?, bias: known(b)? }) };
        let mut edges = BTreeMap::new();
        for (key, w, b) in &p.edges {
            let at: EdgeRef = key.parse().map_err(malformed)?;
            edges.insert(at, layer((*w, *b))?);
        }
        let (stem, head) = (layer(p.stem)?, layer(p.head)?);
        let theta = match &p.theta {
            None => None,
            Some(t) => {
                let entries = t
                    .entries
                    .iter()
                    .map(|(k, id, mask)| Ok(ThetaEntry { key: k.parse().map_err(malformed)?, param: known(*id)?, mask_id: *mask }))
                    .collect::<Result<Vec<_>, CheckpointError>>()?;
                Some(ThetaTable::from_parts(t.tying, entries, &p.original).map_err(malformed)?)
            }
        };
        let model = Model::from_parts(p.network, params, stem, head, edges).map_err(malformed)?;

        let mut omega_opt = Sgd::new(p.omega_opt.lr, p.omega_opt.momentum);
        for (id, v) in &p.omega_opt.velocity {
            omega_opt.velocity.insert(ParamId(*id), v.tensor()?);
        }
        let a = &p.theta_opt;
        let mut theta_opt = Adam::new(a.lr, a.beta1, a.beta2, a.eps);
        theta_opt.t = a.t;
        for (id, m, v) in &a.moments {
            theta_opt.moments.insert(ParamId(*id), (m.tensor()?, v.tensor()?));
        }

        let seed: [u8; 32] = hex::decode(&p.rng.seed).ok().and_then(|v| v.try_into().ok()).ok_or_else(|| malformed("bad rng seed"))?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(p.rng.stream);
        rng.set_word_pos(p.rng.word_pos.parse().map_err(malformed)?);

        let decisions = match &p.decisions {
            None => None,
            Some(text) => {
                let (mut d, _) = Decisions::from_json(text).map_err(malformed)?;
                d.warnings = p.warnings.clone();
                Some(d)
            }
        };
        Ok(Self {
            config_hash: p.config_hash,
            state: TrainState {
                config: p.config,
                original: p.original,
                model,
                theta,
                omega_opt,
                theta_opt,
                epoch: p.epoch,
                stage: p.stage,
                decisions,
                rng,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Dataset, SyntheticSpec};
    use crate::graph::Shape;
    use crate::templates::{build_network, NetworkConfig, TemplateName};
    use crate::trainer::{arch_train_epoch, continue_run, TransformMode};

    fn data() -> Dataset {
        let spec = SyntheticSpec { classes: 3, train_per_class: 6, test_per_class: 2, image_size: 8, channels: 3, noise: 0.3, jitter: 2, seed: 1 };
        gen_synthetic(&spec).unwrap()
    }

    fn state() -> TrainState {
        let net = build_network(TemplateName::PlainCnn, &NetworkConfig::new(3, 3, Shape::new(3, 8, 8)).with_cells(2)).unwrap();
        let cfg = TrainConfig {
            total_epochs: 3,
            arch_epochs: 1,
            batch_size: 5,
            transform_mode: TransformMode::Full,
            augment: true,
            lr_theta: 0.1,
            ..Default::default()
        };
        TrainState::new(cfg, net).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut s = state();
        arch_train_epoch(&mut s, &data()).unwrap();
        let a = Checkpoint { config_hash: "abc".into(), state: s }.to_bytes();
        let b = Checkpoint::from_bytes(&a).unwrap().to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_is_exact() {
        let d = data();
        let mut saved = Vec::new();
        let (full, _) = continue_run(state(), &d, |s| {
            saved.push(Checkpoint { config_hash: "h".into(), state: s.clone() }.to_bytes());
            Ok(())
        })
        .unwrap();
        // boundaries: after the arch epoch, after discretization, after each network epoch
        assert_eq!(saved.len(), 4);
        for bytes in &saved[..3] {
            let restored = Checkpoint::from_bytes(bytes).unwrap();
            let (resumed, _) = continue_run(restored.state, &d, |_| Ok(())).unwrap();
            assert_eq!(resumed.test_accuracy, full.test_accuracy);
            for (a, b) in resumed.model.params.iter().zip(full.model.params.iter()) {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
            assert_eq!(resumed.decisions.choices, full.decisions.choices);
        }
    }

    #[test]
    fn corruption_and_version_detected() {
        let bytes = Checkpoint { config_hash: "h".into(), state: state() }.to_bytes();
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Corrupted)));
        let mut other = bytes.clone();
        other[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&other), Err(CheckpointError::VersionMismatch { found: 2 })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
    }
}
