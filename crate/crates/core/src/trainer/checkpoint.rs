//! Versioned binary checkpoints: magic, format version, a JSON manifest and a
//! little-endian payload holding every parameter followed by every velocity.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::autodiff::{ParamStore, SgdState};
use crate::backbone::{ModelLayout, SfeModel};
use crate::error::{ensure, Result, SfeError};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SFECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Enough to rebuild a ChaCha8 generator at the same position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; the value is a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| SfeError::config(format!("bad RNG word position '{}'", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    trainable: bool,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    dtype: DType,
    config: ExperimentConfig,
    config_hash: String,
    /// Completed epochs.
    epoch: usize,
    step: usize,
    rng: RngState,
    layout: ModelLayout,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: ExperimentConfig,
    pub model: SfeModel<T>,
    pub optimizer: SgdState<T>,
    pub epoch: usize,
    pub step: usize,
    pub rng: RngState,
}

pub fn encode_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let params = &ck.model.params;
    ensure!(
        ck.optimizer.velocity.len() == params.len(),
        SfeError::config("optimizer state does not match the parameter set")
    );
    let manifest = Manifest {
        dtype: T::DTYPE,
        config: ck.config.clone(),
        config_hash: ck.config.hash(),
        epoch: ck.epoch,
        step: ck.step,
        rng: ck.rng.clone(),
        layout: ck.model.layout(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                trainable: p.trainable,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = MAGIC.to_vec();
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    for p in params.iter() {
        out.extend(T::to_le_bytes_vec(p.value.data()));
    }
    for v in &ck.optimizer.velocity {
        out.extend(T::to_le_bytes_vec(v.data()));
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<Checkpoint<T>> {
    let bad = |msg: String| SfeError::format(origin, msg);
    ensure!(bytes.len() >= 20, bad("file is shorter than the checkpoint header".into()));
    ensure!(&bytes[..8] == MAGIC, bad("not a checkpoint (magic mismatch)".into()));
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    ensure!(
        version == FORMAT_VERSION,
        bad(format!("checkpoint format version {version}, this build reads {FORMAT_VERSION}"))
    );
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let mlen = usize::try_from(mlen).map_err(|_| bad("manifest length overflows".into()))?;
    let body = &bytes[20..];
    ensure!(body.len() >= mlen, bad("manifest is truncated".into()));
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| bad(format!("manifest: {e}")))?;
    ensure!(
        manifest.dtype == T::DTYPE,
        bad(format!("checkpoint holds {:?} tensors, requested {:?}", manifest.dtype, T::DTYPE))
    );
    ensure!(
        manifest.config.hash() == manifest.config_hash,
        bad("embedded config does not match its recorded hash".into())
    );
    let size = T::DTYPE.size();
    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let payload = &body[mlen..];
    ensure!(
        payload.len() == 2 * total * size,
        bad(format!("payload has {} bytes, manifest needs {}", payload.len(), 2 * total * size))
    );
    let mut cursor = 0;
    let mut next = |shape: &[usize]| {
        let n = shape.iter().product::<usize>() * size;
        let t = Tensor::new(shape.to_vec(), T::from_le_bytes_slice(&payload[cursor..cursor + n]));
        cursor += n;
        t
    };
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        let v = next(&e.shape)?;
        if e.trainable {
            params.register(e.name.clone(), v);
        } else {
            params.register_buffer(e.name.clone(), v);
        }
    }
    let velocity = manifest
        .tensors
        .iter()
        .map(|e| next(&e.shape))
        .collect::<Result<Vec<_>>>()?;
    let cfg = manifest.config;
    let model = SfeModel::from_parts(cfg.backbone.clone(), cfg.plan.clone(), manifest.layout, params)?;
    Ok(Checkpoint {
        config: cfg,
        model,
        optimizer: SgdState { velocity },
        epoch: manifest.epoch,
        step: manifest.step,
        rng: manifest.rng,
    })
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, ck: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ck)?;
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| SfeError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SfeError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SfeError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Load and refuse unless the checkpoint was produced by `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: impl AsRef<Path>, expected: &ExperimentConfig) -> Result<Checkpoint<T>> {
    let ck = load_checkpoint(path.as_ref())?;
    let (have, want) = (ck.config.hash(), expected.hash());
    ensure!(
        have == want,
        SfeError::config(format!(
            "checkpoint {} was written for config {have}, not {want}",
            path.as_ref().display()
        ))
    );
    Ok(ck)
}
