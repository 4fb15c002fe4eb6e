//! Class activation maps: classifier weights applied channel-wise to the
//! last-stage feature map, then min-max normalized.

use serde::{Deserialize, Serialize};

use crate::backbone::SfeModel;
use crate::error::{ensure, Result, SfeError};
use crate::tensor::{Scalar, Tensor};
use crate::transform::TransformId;

/// Which classifier supplied the channel weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamSource {
    /// Identity-transform row of the last joint head.
    JointIdentity,
    SingleHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    /// Row-major `[height, width]`, in `[0, 1]`.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<usize>,
    pub source: CamSource,
}

/// `Σ_c w_c · f_c(h, w)` over a `[C, H, W]` feature, min-max normalized.
/// A constant map becomes all zeros.
pub fn cam_from_features(features: &[f64], weights: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    let hw = height * width;
    ensure!(hw > 0, SfeError::shape("empty activation map"));
    ensure!(
        features.len() == weights.len() * hw,
        SfeError::shape(format!(
            "{} feature values for {} channels of {height}×{width}",
            features.len(),
            weights.len()
        ))
    );
    let mut cam = vec![0.0; hw];
    for (plane, &w) in features.chunks(hw).zip(weights) {
        for (c, &f) in cam.iter_mut().zip(plane) {
            *c += w * f;
        }
    }
    let lo = cam.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ensure!(lo.is_finite() && hi.is_finite(), SfeError::numeric("activation map is not finite"));
    let span = hi - lo;
    if span <= f64::EPSILON * hi.abs().max(1.0) {
        return Ok(vec![0.0; hw]);
    }
    Ok(cam.iter().map(|v| (v - lo) / span).collect())
}

/// CAM of class `class_id` for one normalized image `[C, H, W]` (or `[1, C, H, W]`).
pub fn compute_cam<T: Scalar>(model: &SfeModel<T>, image: &Tensor<T>, class_id: usize) -> Result<CamMap> {
    let n = model.config.num_classes;
    ensure!(class_id < n, SfeError::config(format!("class {class_id} outside [0, {n})")));
    let x = match image.rank() {
        3 => image.clone().reshape([1, image.dim(0), image.dim(1), image.dim(2)])?,
        4 if image.dim(0) == 1 => image.clone(),
        _ => return Err(SfeError::shape(format!("CAM needs one image, got shape {:?}", image.shape()))),
    };
    let feat = model.final_features(&x)?;
    let (_, c, h, w) = feat.dims4()?;
    let (weights, source): (Vec<f64>, _) = match &model.single {
        Some(s) => {
            let row = &model.params.value(s.weight).data()[class_id * c..(class_id + 1) * c];
            (row.iter().map(|v| v.as_f64()).collect(), CamSource::SingleHead)
        }
        None => {
            let head = &model.last_head().head;
            let row = head.weight_row(&model.params, class_id, TransformId::IDENTITY)?;
            (row.iter().map(|v| v.as_f64()).collect(), CamSource::JointIdentity)
        }
    };
    Ok(CamMap {
        values: cam_from_features(&feat.to_f64_vec(), &weights, h, w)?,
        height: h,
        width: w,
        class_id,
        image_id: None,
        source,
    })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AttachmentPlan, BackboneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_channel_unit_weight_gives_the_normalized_feature() {
        let f = [1.0, 3.0, 2.0, 5.0];
        assert_eq!(cam_from_features(&f, &[1.0], 2, 2).unwrap(), vec![0.0, 0.5, 0.25, 1.0]);
    }

    #[test]
    fn zero_weights_and_constant_maps_give_zeros() {
        let f = [1.0, 3.0, 2.0, 5.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(cam_from_features(&f, &[0.0, 0.0], 2, 2).unwrap(), vec![0.0; 4]);
        assert_eq!(cam_from_features(&[2.0; 4], &[3.0], 2, 2).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn matches_a_dense_loop_and_ignores_positive_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, h, w) = (5, 3, 4);
        let f: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut raw = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    raw[y * w + x] += wt[ch] * f[ch * h * w + y * w + x];
                }
            }
        }
        let lo = raw.iter().cloned().fold(f64::MAX, f64::min);
        let hi = raw.iter().cloned().fold(f64::MIN, f64::max);
        let cam = cam_from_features(&f, &wt, h, w).unwrap();
        for (a, r) in cam.iter().zip(&raw) {
            assert!((a - (r - lo) / (hi - lo)).abs() < 1e-6);
        }
        assert_eq!(*cam.iter().max_by(|a, b| a.total_cmp(b)).unwrap(), 1.0);
        let scaled: Vec<f64> = f.iter().map(|v| v * 3.5).collect();
        let again = cam_from_features(&scaled, &wt, h, w).unwrap();
        assert!(cam.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn model_cam_uses_the_available_classifier() {
        let cfg = BackboneConfig {
            stage_channels: vec![4, 6],
            input_shape: [3, 8, 8],
            num_classes: 3,
            ..BackboneConfig::default()
        };
        let x: Tensor<f32> = Tensor::rand_normal(vec![3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let m = SfeModel::<f32>::build(&cfg, &AttachmentPlan { k: 2, ..AttachmentPlan::default() }, 0, 0).unwrap();
        let cam = compute_cam(&m, &x, 2).unwrap();
        assert_eq!((cam.height, cam.width, cam.source), (4, 4, CamSource::JointIdentity));
        assert!(cam.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(compute_cam(&m, &x, 3).is_err());
        let d = SfeModel::<f32>::build(
            &cfg,
            &AttachmentPlan {
                k: 2,
                distill: true,
                ..AttachmentPlan::default()
            },
            0,
            0,
        )
        .unwrap();
        assert_eq!(compute_cam(&d, &x, 0).unwrap().source, CamSource::SingleHead);
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
    }
}
