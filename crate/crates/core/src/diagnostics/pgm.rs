//! 8-bit binary greymaps (P5).

use std::fs;
use std::path::Path;

use super::cam::CamMap;
use crate::error::{ensure, Result, SfeError};

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    ensure!(
        pixels.len() == width * height && width > 0 && height > 0,
        SfeError::shape(format!("{} pixels for a {width}×{height} image", pixels.len()))
    );
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(width, height, pixels)?).map_err(|e| SfeError::io(path, e))
}

/// `round(v · 255)` per pixel.
pub fn export_cam_pgm(cam: &CamMap, path: impl AsRef<Path>) -> Result<()> {
    ensure!(
        cam.values.iter().all(|v| (0.0..=1.0).contains(v)),
        SfeError::numeric("CAM values must lie in [0, 1]")
    );
    let px: Vec<u8> = cam.values.iter().map(|v| (v * 255.0).round() as u8).collect();
    write_pgm(path, cam.width, cam.height, &px)
}

/// Parse a P5 file with maxval 255. Returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| SfeError::format(origin, m.to_string());
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        ensure!(i > start, bad("header is truncated"));
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ASCII"))?);
    }
    ensure!(fields[0] == "P5", bad("not a binary PGM (P5)"));
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number in header"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    ensure!(max == 255, bad("only maxval 255 is supported"));
    ensure!(i < bytes.len(), bad("missing pixel data"));
    let data = &bytes[i + 1..];
    ensure!(
        w.checked_mul(h) == Some(data.len()),
        bad("pixel payload does not match the header size")
    );
    Ok((w, h, data.to_vec()))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SfeError::io(path, e))?;
    decode_pgm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::CamSource;

    fn cam(values: Vec<f64>, w: usize, h: usize) -> CamMap {
        CamMap {
            values,
            height: h,
            width: w,
            class_id: 0,
            image_id: None,
            source: CamSource::JointIdentity,
        }
    }

    #[test]
    fn header_and_zero_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.pgm");
        export_cam_pgm(&cam(vec![0.0; 6], 3, 2), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[11..], &[0; 6]);
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.pgm");
        let vals: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        export_cam_pgm(&cam(vals.clone(), 5, 4), &p).unwrap();
        let (w, h, px) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (5, 4));
        for (v, q) in vals.iter().zip(px) {
            assert!((v - q as f64 / 255.0).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let o = Path::new("x.pgm");
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00", o).is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00", o).is_err());
        assert!(decode_pgm(b"P5\n2 2\n65535\n\x00\x00\x00\x00", o).is_err());
        assert!(decode_pgm(b"P5\n2", o).is_err());
        assert_eq!(decode_pgm(b"P5\n# c\n1 1\n255\n\x07", o).unwrap(), (1, 1, vec![7]));
        assert!(export_cam_pgm(&cam(vec![1.5], 1, 1), std::env::temp_dir().join("never.pgm")).is_err());
    }
}
