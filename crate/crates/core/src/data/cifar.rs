//! CIFAR-10 binary format: 3073-byte records, one label byte then the R, G
//! and B planes of a 32×32 image, each row-major.

use std::fs;
use std::path::{Path, PathBuf};

use super::LabeledImageDataset;
use crate::error::{ensure, Result, SfeError};

pub const RECORD_LEN: usize = 3073;
pub const SHAPE: [usize; 3] = [3, 32, 32];
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(self) -> Vec<String> {
        match self {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".into()],
        }
    }
}

pub fn parse_cifar10_bytes(bytes: &[u8], origin: &Path) -> Result<LabeledImageDataset> {
    ensure!(
        !bytes.is_empty() && bytes.len().is_multiple_of(RECORD_LEN),
        SfeError::format(
            origin,
            format!("length {} is not a positive multiple of {RECORD_LEN} (truncated file?)", bytes.len())
        )
    );
    let m = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(m);
    let mut images = Vec::with_capacity(m * (RECORD_LEN - 1));
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        ensure!(
            (rec[0] as usize) < CLASSES,
            SfeError::format(origin, format!("record {i} has label byte {} (expected 0..9)", rec[0]))
        );
        labels.push(rec[0] as usize);
        images.extend_from_slice(&rec[1..]);
    }
    LabeledImageDataset::new(images, labels, SHAPE, CLASSES, origin.display().to_string())
}

pub fn parse_cifar10_bin(path: impl AsRef<Path>) -> Result<LabeledImageDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SfeError::io(path, e))?;
    parse_cifar10_bytes(&bytes, path)
}

pub fn encode_cifar10(ds: &LabeledImageDataset) -> Result<Vec<u8>> {
    ensure!(
        ds.shape == SHAPE && ds.classes <= CLASSES,
        SfeError::data(format!("CIFAR-10 records need shape {SHAPE:?}, got {:?}", ds.shape))
    );
    let mut out = Vec::with_capacity(ds.len() * RECORD_LEN);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend_from_slice(ds.image(i));
    }
    Ok(out)
}

pub fn write_cifar10_bin(path: impl AsRef<Path>, ds: &LabeledImageDataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cifar10(ds)?).map_err(|e| SfeError::io(path, e))
}

/// Files of a split under `root` or `root/cifar-10-batches-bin`.
pub fn load_split(root: &Path, split: Split) -> Result<LabeledImageDataset> {
    let dir = [root.to_path_buf(), root.join("cifar-10-batches-bin")]
        .into_iter()
        .find(|d| d.join(&split.files()[0]).is_file())
        .ok_or_else(|| {
            SfeError::data(format!(
                "no CIFAR-10 binaries ({}) under {} (check {})",
                split.files()[0],
                root.display(),
                super::DATA_DIR_ENV
            ))
        })?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in split.files() {
        let p: PathBuf = dir.join(f);
        if !p.is_file() {
            continue;
        }
        let part = parse_cifar10_bin(&p)?;
        images.extend(part.images);
        labels.extend(part.labels);
    }
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    LabeledImageDataset::new(images, labels, SHAPE, CLASSES, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(|i| (i as u8).wrapping_add(fill)));
        r
    }

    #[test]
    fn two_records_parse_with_labels() {
        let mut bytes = record(7, 0);
        bytes.extend(record(2, 9));
        let ds = parse_cifar10_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![7, 2]);
        assert_eq!(ds.image(1)[0], 9);
        assert_eq!(encode_cifar10(&ds).unwrap(), bytes);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let mut bytes = record(1, 0);
        bytes.pop();
        let err = parse_cifar10_bytes(&bytes, Path::new("t.bin")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let err = parse_cifar10_bytes(&record(10, 0), Path::new("t.bin")).unwrap_err();
        assert!(err.to_string().contains("label byte 10"), "{err}");
        assert!(parse_cifar10_bytes(&[], Path::new("t.bin")).is_err());
    }

    #[test]
    fn split_loader_reports_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_split(dir.path(), Split::Test).unwrap_err();
        assert!(err.to_string().contains("SFE_DATA_DIR"));
        fs::write(dir.path().join("test_batch.bin"), record(3, 1)).unwrap();
        assert_eq!(load_split(dir.path(), Split::Test).unwrap().labels, vec![3]);
    }
}
