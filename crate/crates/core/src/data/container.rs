//! Raw tensor files: an 8-byte magic, dtype code, rank, `u64` dims and a
//! little-endian payload, plus a JSON sidecar describing the same header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result, SfeError};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SFETNSR\x01";
const MAX_RANK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum ContainerData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl ContainerData {
    pub fn dtype(&self) -> DType {
        match self {
            ContainerData::F32(_) => DType::F32,
            ContainerData::F64(_) => DType::F64,
            ContainerData::U8 { .. } => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ContainerData::F32(t) => t.shape(),
            ContainerData::F64(t) => t.shape(),
            ContainerData::U8 { shape, .. } => shape,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            ContainerData::F32(t) => f32::to_le_bytes_vec(t.data()),
            ContainerData::F64(t) => f64::to_le_bytes_vec(t.data()),
            ContainerData::U8 { data, .. } => data.clone(),
        }
    }

    /// The float tensor, converting from whichever float type was stored.
    pub fn into_tensor<T: Scalar>(self) -> Result<Tensor<T>> {
        match self {
            ContainerData::F32(t) => Ok(t.cast()),
            ContainerData::F64(t) => Ok(t.cast()),
            ContainerData::U8 { .. } => Err(SfeError::config("container holds u8 data, not floats")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub description: String,
}

pub fn encode(data: &ContainerData) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.push(data.dtype().code());
    out.push(data.shape().len() as u8);
    for &d in data.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    out.extend(data.payload());
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<ContainerData> {
    let bad = |msg: String| SfeError::format(origin, msg);
    ensure!(bytes.len() >= 10, bad(format!("{} bytes is shorter than the header", bytes.len())));
    ensure!(&bytes[..8] == MAGIC, bad("magic bytes do not match".into()));
    let dtype = DType::from_code(bytes[8]).ok_or_else(|| bad(format!("unknown dtype code {}", bytes[8])))?;
    let rank = bytes[9] as usize;
    ensure!(rank <= MAX_RANK, bad(format!("rank {rank} exceeds {MAX_RANK}")));
    let header = 10 + 8 * rank;
    ensure!(bytes.len() >= header, bad("header shorter than its declared rank".into()));
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for r in 0..rank {
        let d = u64::from_le_bytes(bytes[10 + 8 * r..18 + 8 * r].try_into().expect("8 bytes"));
        let d = usize::try_from(d).map_err(|_| bad(format!("dimension {d} too large")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| bad("element count overflows".into()))?;
        shape.push(d);
    }
    let payload = &bytes[header..];
    let expected = count.checked_mul(dtype.size()).ok_or_else(|| bad("payload size overflows".into()))?;
    ensure!(
        payload.len() == expected,
        bad(format!("payload has {} bytes, shape {shape:?} needs {expected}", payload.len()))
    );
    Ok(match dtype {
        DType::F32 => ContainerData::F32(Tensor::new(shape, f32::from_le_bytes_slice(payload))?),
        DType::F64 => ContainerData::F64(Tensor::new(shape, f64::from_le_bytes_slice(payload))?),
        DType::U8 => ContainerData::U8 {
            shape,
            data: payload.to_vec(),
        },
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_tensor_container(path: impl AsRef<Path>, data: &ContainerData, description: &str) -> Result<()> {
    let path = path.as_ref();
    if let ContainerData::U8 { shape, data } = data {
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            SfeError::shape(format!("u8 payload of {} bytes for shape {shape:?}", data.len()))
        );
    }
    fs::write(path, encode(data)).map_err(|e| SfeError::io(path, e))?;
    let side = Sidecar {
        dtype: data.dtype(),
        shape: data.shape().to_vec(),
        description: description.to_string(),
    };
    let side_path = sidecar_path(path);
    fs::write(&side_path, serde_json::to_vec_pretty(&side)?).map_err(|e| SfeError::io(side_path, e))
}

/// Read a container and cross-check its sidecar when one exists.
pub fn read_tensor_container(path: impl AsRef<Path>) -> Result<ContainerData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SfeError::io(path, e))?;
    let data = decode(&bytes, path)?;
    let side_path = sidecar_path(path);
    if side_path.is_file() {
        let raw = fs::read(&side_path).map_err(|e| SfeError::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_slice(&raw).map_err(|e| SfeError::format(&side_path, e.to_string()))?;
        ensure!(
            side.dtype == data.dtype() && side.shape == data.shape(),
            SfeError::format(&side_path, "sidecar disagrees with the container header")
        );
    }
    Ok(data)
}
