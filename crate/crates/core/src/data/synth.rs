//! Procedural image classes: oriented sinusoidal gratings with random phase.
//!
//! Each class owns an orientation, a spatial frequency and a colour tint.
//! The phase is drawn per image, so the class signal averages out in pixel
//! space and no linear read-out of raw pixels separates the classes, while
//! a convolution followed by rectification does.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledImageDataset;
use crate::error::{ensure, Result, SfeError};

struct Template {
    angle: f64,
    freq: f64,
    tint: Vec<f64>,
}

fn template(class: usize, classes: usize, channels: usize) -> Template {
    let angle = PI * (class as f64 + 0.25) / classes as f64;
    let freq = 1.5 + (class % 3) as f64;
    let tint = (0..channels)
        .map(|c| 0.55 + 0.45 * (2.0 * PI * (class as f64 / classes as f64 + c as f64 / channels.max(1) as f64)).cos())
        .collect();
    Template { angle, freq, tint }
}

/// `classes · per_class` images, balanced and ordered class by class.
pub fn synth_dataset(classes: usize, per_class: usize, size: [usize; 3], seed: u64) -> Result<LabeledImageDataset> {
    ensure!(classes >= 2, SfeError::config("synthetic dataset needs at least 2 classes"));
    ensure!(per_class >= 1, SfeError::config("per_class must be >= 1"));
    let [c, h, w] = size;
    ensure!(c >= 1 && h >= 2 && w >= 2, SfeError::config(format!("bad synthetic image size {size:?}")));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(classes * per_class * c * h * w);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let t = template(class, classes, c);
        let (ca, sa) = (t.angle.cos(), t.angle.sin());
        for _ in 0..per_class {
            let phase = rng.gen::<f64>() * 2.0 * PI;
            let contrast = rng.gen_range(0.7..1.0);
            for tint in &t.tint {
                for y in 0..h {
                    for x in 0..w {
                        let u = (x as f64 * ca + y as f64 * sa) / w as f64;
                        let s = (2.0 * PI * t.freq * u + phase).sin();
                        let noise = rng.gen_range(-1.0..1.0) * 18.0;
                        let v = 128.0 + 100.0 * contrast * tint * s + noise;
                        images.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            labels.push(class);
        }
    }
    LabeledImageDataset::new(images, labels, size, classes, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = synth_dataset(2, 32, [3, 8, 8], 5).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 32);
        assert_eq!(a, synth_dataset(2, 32, [3, 8, 8], 5).unwrap());
        assert_ne!(a.images, synth_dataset(2, 32, [3, 8, 8], 6).unwrap().images);
    }

    #[test]
    fn class_means_are_nearly_identical() {
        // random phase removes the class signal from the pixel means
        let ds = synth_dataset(3, 200, [1, 8, 8], 1).unwrap();
        let n = ds.image_len();
        let means: Vec<f64> = (0..3)
            .map(|c| {
                let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
                idx.iter().flat_map(|&i| ds.image(i)).map(|&p| p as f64).sum::<f64>() / (idx.len() * n) as f64
            })
            .collect();
        for m in &means {
            assert!((m - 128.0).abs() < 4.0, "{means:?}");
        }
    }

    #[test]
    fn invalid_requests_fail() {
        assert!(synth_dataset(1, 4, [1, 8, 8], 0).is_err());
        assert!(synth_dataset(2, 0, [1, 8, 8], 0).is_err());
        assert!(synth_dataset(2, 1, [0, 8, 8], 0).is_err());
    }
}
