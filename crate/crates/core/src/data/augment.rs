//! Pad-crop-flip augmentation and per-channel normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LabeledImageDataset;
use crate::error::{ensure, Result, SfeError};
use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        ensure!(
            self.mean.len() == channels && self.std.len() == channels,
            SfeError::config(format!("normalization needs {channels} means and stds"))
        );
        ensure!(
            self.std.iter().all(|s| s.is_finite() && *s > 0.0) && self.mean.iter().all(|m| m.is_finite()),
            SfeError::config("normalization stds must be positive and finite")
        );
        Ok(())
    }
}

/// Crop offset into the padded image and flip flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentParams {
    /// Centre crop, no flip: the un-augmented image.
    pub const CENTER: AugmentParams = AugmentParams {
        dy: PAD,
        dx: PAD,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            dy: rng.gen_range(0..=2 * PAD),
            dx: rng.gen_range(0..=2 * PAD),
            flip: rng.gen_bool(0.5),
        }
    }
}

/// Write the transformed image into `out` (`C·H·W` values).
pub fn augment_into<T: Scalar>(image: &[u8], shape: [usize; 3], p: AugmentParams, norm: &Normalization, out: &mut [T]) {
    let [c, h, w] = shape;
    for ch in 0..c {
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        let zero = T::from_f64(-m / s);
        for y in 0..h {
            for x in 0..w {
                let sx = if p.flip { w - 1 - x } else { x };
                // coordinates in the zero-padded image, shifted back to the source
                let (py, px) = (y + p.dy, sx + p.dx);
                let v = if py < PAD || px < PAD || py - PAD >= h || px - PAD >= w {
                    zero
                } else {
                    let raw = image[ch * h * w + (py - PAD) * w + (px - PAD)] as f64 / 255.0;
                    T::from_f64((raw - m) / s)
                };
                out[ch * h * w + y * w + x] = v;
            }
        }
    }
}

pub fn augment<T: Scalar, R: Rng + ?Sized>(image: &[u8], shape: [usize; 3], rng: &mut R, norm: &Normalization) -> Result<Tensor<T>> {
    ensure!(shape[1] == shape[2], SfeError::shape(format!("augmentation needs square images, got {shape:?}")));
    ensure!(
        image.len() == shape.iter().product::<usize>(),
        SfeError::shape("image length does not match its shape")
    );
    norm.validate(shape[0])?;
    let mut out = vec![T::zero(); image.len()];
    augment_into(image, shape, AugmentParams::sample(rng), norm, &mut out);
    Tensor::new(shape.to_vec(), out)
}

/// Stack samples `indices` into `[B, C, H, W]`; augmented when `rng` is given.
pub fn make_batch<T: Scalar, R: Rng + ?Sized>(
    ds: &LabeledImageDataset,
    indices: &[usize],
    norm: &Normalization,
    mut rng: Option<&mut R>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    norm.validate(ds.shape[0])?;
    let n = ds.image_len();
    let mut data = vec![T::zero(); indices.len() * n];
    let mut labels = Vec::with_capacity(indices.len());
    for (slot, &i) in indices.iter().enumerate() {
        ensure!(i < ds.len(), SfeError::data(format!("sample {i} out of range ({})", ds.len())));
        let p = match rng.as_deref_mut() {
            Some(r) => AugmentParams::sample(r),
            None => AugmentParams::CENTER,
        };
        augment_into(ds.image(i), ds.shape, p, norm, &mut data[slot * n..(slot + 1) * n]);
        labels.push(ds.labels[i]);
    }
    let [c, h, w] = ds.shape;
    Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
}

/// Un-augmented (centre-crop, unflipped) batch.
pub fn plain_batch<T: Scalar>(
    ds: &LabeledImageDataset,
    indices: &[usize],
    norm: &Normalization,
) -> Result<(Tensor<T>, Vec<usize>)> {
    make_batch::<T, rand::rngs::StdRng>(ds, indices, norm, None)
}
