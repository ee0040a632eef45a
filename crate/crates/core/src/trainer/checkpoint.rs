//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` metadata length, the
//! metadata as JSON, then every tensor payload as little-endian `f64` in
//! declaration order (model tensors, then Adam first moments, then second
//! moments). All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SymbolTable;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::adam::AdamState;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PAGESCRB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the trainer's shuffling stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, kept as text for JSON.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::Checkpoint(format!("rng state: bad {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub symbols: SymbolTable,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    symbols: SymbolTable,
    epoch: usize,
    rng: RngState,
    adam_step: u64,
    tensors: Vec<TensorMeta>,
    /// Moment lengths per tensor (0 for buffers).
    moments: Vec<usize>,
    payload_sha256: String,
}

fn put(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, symbols: &SymbolTable, optimizer: AdamState, epoch: usize, rng: RngState) -> Self {
        Self {
            config: model.config().clone(),
            symbols: symbols.clone(),
            tensors: model
                .params()
                .iter()
                .map(|(n, e)| (n.to_string(), (*e.tensor).clone()))
                .collect(),
            optimizer,
            epoch,
            rng,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_named(self.config.clone(), self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        for (_, t) in &self.tensors {
            put(&mut payload, t.data());
        }
        if self.optimizer.m.len() != self.tensors.len() || self.optimizer.v.len() != self.tensors.len() {
            return Err(Error::Checkpoint("optimizer state does not match tensors".into()));
        }
        for m in &self.optimizer.m {
            put(&mut payload, m);
        }
        for v in &self.optimizer.v {
            put(&mut payload, v);
        }
        let meta = Metadata {
            config: self.config.clone(),
            symbols: self.symbols.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            adam_step: self.optimizer.step,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorMeta {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            moments: self.optimizer.m.iter().map(Vec::len).collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "format version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(20..20 + len)
            .ok_or_else(|| bad("truncated metadata".into()))?;
        let meta: Metadata = serde_json::from_slice(json)?;
        let payload = &bytes[20 + len..];
        if hex::encode(Sha256::digest(payload)) != meta.payload_sha256 {
            return Err(bad("payload hash mismatch".into()));
        }
        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload not a whole number of f64".into()));
        }
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = floats.by_ref().take(n).collect();
            if v.len() != n {
                return Err(Error::Checkpoint("truncated payload".into()));
            }
            Ok(v)
        };
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for t in &meta.tensors {
            let n = t.shape.iter().product();
            tensors.push((t.name.clone(), Tensor::new(t.shape.clone(), take(n)?)?));
        }
        let m = meta.moments.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        let v = meta.moments.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        if floats.next().is_some() {
            return Err(bad("trailing payload".into()));
        }
        let symbols = SymbolTable::from_symbols(meta.symbols.symbols().to_vec())?;
        if symbols.content_hash() != meta.symbols.content_hash() {
            return Err(bad("symbol table hash does not match its symbols".into()));
        }
        meta.config.validate()?;
        Ok(Self {
            config: meta.config,
            symbols,
            tensors,
            optimizer: AdamState {
                step: meta.adam_step,
                m,
                v,
            },
            epoch: meta.epoch,
            rng: meta.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Loads and refuses a checkpoint trained on another symbol table.
    pub fn load_expecting(path: &Path, symbols_hash: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.symbols.content_hash() != symbols_hash {
            return Err(Error::SymbolMismatch {
                expected: symbols_hash.to_string(),
                found: c.symbols.content_hash().to_string(),
            });
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Backend;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let symbols = SymbolTable::build(&["0123456789 "]).unwrap();
        let model = Model::new(ModelConfig::toy(Backend::Blstm, symbols.n_symbols()), 4).unwrap();
        let mut state = AdamState::new(model.params());
        state.step = 3;
        state.m[0][0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        Checkpoint::from_model(&model, &symbols, state, 2, RngState::capture(&rng))
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let d = tempfile::tempdir().unwrap();
        let c = sample();
        let a = d.path().join("a.ckpt");
        c.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded, c);
        let b = d.path().join("b.ckpt");
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_version_corruption_and_wrong_symbols() {
        let c = sample();
        let mut bytes = c.to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let mut bytes = c.to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));

        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("c.ckpt");
        c.save(&p).unwrap();
        let other = SymbolTable::build(&["abc"]).unwrap();
        assert!(matches!(
            Checkpoint::load_expecting(&p, other.content_hash()),
            Err(Error::SymbolMismatch { .. })
        ));
        assert!(Checkpoint::load_expecting(&p, c.symbols.content_hash()).is_ok());
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        rng.next_u32();
        let state = RngState::capture(&rng);
        let mut again = state.restore().unwrap();
        assert_eq!(rng.next_u64(), again.next_u64());
    }

    #[test]
    fn restored_model_matches() {
        let c = sample();
        let m = c.model().unwrap();
        for ((n, t), (name, e)) in c.tensors.iter().zip(m.params().iter()) {
            assert_eq!(n, name);
            assert_eq!(t, &*e.tensor);
        }
    }
}
