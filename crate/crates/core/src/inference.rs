//! Test-time schemes: single inference over the identity columns of the
//! last joint head, aggregated inference over every (head, transform) score,
//! and distilled inference through the plain classifier.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, ParamStore};
use crate::error::{ensure, Result, SfeError};
use crate::heads::{JointHead, SingleHead};
use crate::tensor::{Scalar, Tensor};
use crate::transform::TransformId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InferenceScheme {
    #[serde(rename = "si")]
    SingleInference,
    #[serde(rename = "ag")]
    AggregatedInference,
    #[serde(rename = "sd")]
    DistilledInference,
}

impl InferenceScheme {
    pub const ALL: [InferenceScheme; 3] = [
        InferenceScheme::SingleInference,
        InferenceScheme::AggregatedInference,
        InferenceScheme::DistilledInference,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            InferenceScheme::SingleInference => "si",
            InferenceScheme::AggregatedInference => "ag",
            InferenceScheme::DistilledInference => "sd",
        }
    }
}

impl fmt::Display for InferenceScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for InferenceScheme {
    type Err = SfeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "si" | "single" => Ok(InferenceScheme::SingleInference),
            "ag" | "aggregated" => Ok(InferenceScheme::AggregatedInference),
            "sd" | "distilled" => Ok(InferenceScheme::DistilledInference),
            other => Err(SfeError::config(format!("unknown inference scheme '{other}' (si|ag|sd)"))),
        }
    }
}

/// Softmax over the `N` identity-transform columns `{i·K}` of joint logits.
pub fn single_from_logits<T: Scalar>(joint_logits: &Tensor<T>, classes: usize, transforms: usize) -> Result<Tensor<T>> {
    let (b, d) = joint_logits.dims2()?;
    ensure!(
        d == classes * transforms,
        SfeError::shape(format!("joint logits have {d} columns, expected {classes}·{transforms}"))
    );
    let z: Vec<T> = (0..b)
        .flat_map(|r| (0..classes).map(move |i| joint_logits.data()[r * d + i * transforms]))
        .collect();
    Tensor::new(vec![b, classes], kernels::softmax_rows(&z, classes))
}

/// `P(i | f, j = identity)` from the last joint head.
pub fn single_inference<T: Scalar>(store: &ParamStore<T>, features: &Tensor<T>, last_head: &JointHead) -> Result<Tensor<T>> {
    let z = last_head.logits(store, features)?;
    single_from_logits(&z, last_head.classes, last_head.transforms)
}

/// Mean score `z_i` over every (head, transform) pair, from expanded logit
/// stacks laid out as `[K·B, N·K]` (block `j` = transform `j`).
pub fn aggregate_stack_logits<T: Scalar>(stacks: &[(&Tensor<T>, usize)], classes: usize) -> Result<Tensor<T>> {
    ensure!(!stacks.is_empty(), SfeError::config("aggregation needs at least one head"));
    let (rows0, _) = stacks[0].0.dims2()?;
    let batch = rows0 / stacks[0].1;
    let mut z = vec![T::zero(); batch * classes];
    let mut terms = 0usize;
    for &(logits, k) in stacks {
        let (rows, d) = logits.dims2()?;
        ensure!(
            k >= 1 && rows == k * batch && d == classes * k,
            SfeError::shape(format!(
                "logit stack {:?} does not match K={k}, B={batch}, N={classes}",
                logits.shape()
            ))
        );
        for j in 0..k {
            for b in 0..batch {
                let row = &logits.data()[(j * batch + b) * d..(j * batch + b + 1) * d];
                for i in 0..classes {
                    z[b * classes + i] = z[b * classes + i] + row[i * k + j];
                }
            }
        }
        terms += k;
    }
    let inv = T::from_f64(1.0 / terms as f64);
    z.iter_mut().for_each(|v| *v = *v * inv);
    Tensor::new(vec![batch, classes], z)
}

/// `softmax(z)` with `z_i` the uniform mean of `μ_ij·f̃_j` over all heads
/// and transforms. `features[h][j]` is head `h`'s input under transform `j`.
pub fn aggregated_inference<T: Scalar>(
    store: &ParamStore<T>,
    features: &[Vec<Tensor<T>>],
    heads: &[&JointHead],
) -> Result<Tensor<T>> {
    ensure!(
        !heads.is_empty() && features.len() == heads.len(),
        SfeError::config(format!("{} feature sets for {} heads", features.len(), heads.len()))
    );
    let classes = heads[0].classes;
    let batch = features[0].first().map(|f| f.dim(0)).unwrap_or(0);
    let mut z = vec![T::zero(); batch * classes];
    let mut terms = 0usize;
    for (feats, head) in features.iter().zip(heads) {
        ensure!(
            feats.len() == head.transforms,
            SfeError::config(format!(
                "head at stage {} needs {} transformed features, got {}",
                head.stage,
                head.transforms,
                feats.len()
            ))
        );
        ensure!(head.classes == classes, SfeError::config("heads disagree on class count"));
        for (j, f) in feats.iter().enumerate() {
            ensure!(f.dim(0) == batch, SfeError::shape("transformed features differ in batch size"));
            let logits = head.logits(store, f)?;
            let d = logits.dim(1);
            for b in 0..batch {
                for i in 0..classes {
                    z[b * classes + i] = z[b * classes + i] + logits.data()[b * d + i * head.transforms + j];
                }
            }
            terms += 1;
        }
    }
    let inv = T::from_f64(1.0 / terms as f64);
    z.iter_mut().for_each(|v| *v = *v * inv);
    Tensor::new(vec![batch, classes], kernels::softmax_rows(&z, classes))
}

/// Plain softmax of the single classifier on the original feature.
pub fn distilled_inference<T: Scalar>(
    store: &ParamStore<T>,
    features: &Tensor<T>,
    single: Option<&SingleHead>,
) -> Result<Tensor<T>> {
    let single = single.ok_or_else(|| {
        SfeError::config("distilled inference needs a model trained with a single classifier")
    })?;
    kernels::softmax(&single.logits(store, features)?)
}

/// Identity-transform feature slot helper for aggregated inference callers.
pub fn transform_ids(k: usize) -> impl Iterator<Item = TransformId> {
    (0..k).map(TransformId)
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let pred = probs.argmax_rows()?;
    ensure!(
        pred.len() == labels.len() && !labels.is_empty(),
        SfeError::shape(format!("{} predictions for {} labels", pred.len(), labels.len()))
    );
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::ChannelPartition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_picks_identity_columns() {
        // class-major layout [a0, x, a1, y] with a0 == a1
        let z = Tensor::<f64>::from_f64(vec![1, 4], &[0.7, 5.0, 0.7, -3.0]).unwrap();
        let p = single_from_logits(&z, 2, 2).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn single_matches_direct_formula() {
        let z = Tensor::<f64>::rand_uniform(vec![3, 15], -3.0, 3.0, &mut rng(1));
        let p = single_from_logits(&z, 5, 3).unwrap();
        for r in 0..3 {
            let denom: f64 = (0..5).map(|k| z.data()[r * 15 + k * 3].exp()).sum();
            for i in 0..5 {
                let direct = z.data()[r * 15 + i * 3].exp() / denom;
                assert!((p.data()[r * 5 + i] - direct).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_is_shift_invariant() {
        let z = Tensor::<f64>::rand_uniform(vec![2, 6], -1.0, 1.0, &mut rng(2));
        let p = single_from_logits(&z, 3, 2).unwrap();
        let q = single_from_logits(&z.map(|v| v + 17.0), 3, 2).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn distilled_examples() {
        let mut store = ParamStore::<f64>::new();
        let head = SingleHead::new(&mut store, "s", 2, 2, &mut rng(3));
        store.get_mut(head.weight).value.data_mut().fill(0.0);
        let f = Tensor::<f64>::rand_uniform(vec![1, 2, 2, 2], -1.0, 1.0, &mut rng(4));
        let p = distilled_inference(&store, &f, Some(&head)).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        store.get_mut(head.bias).value.data_mut().copy_from_slice(&[3f64.ln(), 0.0]);
        let p = distilled_inference(&store, &f, Some(&head)).unwrap();
        assert!((p.data()[0] - 0.75).abs() < 1e-12 && (p.data()[1] - 0.25).abs() < 1e-12);
        assert!(distilled_inference::<f64>(&store, &f, None).is_err());
    }

    #[test]
    fn aggregation_k1_equals_single() {
        let mut store = ParamStore::<f64>::new();
        let head = JointHead::new(&mut store, "h", 3, 4, 1, 0, &mut rng(5));
        let f = Tensor::<f64>::rand_uniform(vec![2, 3, 2, 2], -1.0, 1.0, &mut rng(6));
        let ag = aggregated_inference(&store, &[vec![f.clone()]], &[&head]).unwrap();
        let si = single_inference(&store, &f, &head).unwrap();
        assert_eq!(ag, si);
    }

    #[test]
    fn aggregation_matches_direct_formula() {
        let mut store = ParamStore::<f64>::new();
        let head = JointHead::new(&mut store, "h", 4, 3, 3, 0, &mut rng(7));
        let part = ChannelPartition::random(4, 2, &mut rng(8)).unwrap();
        let f = Tensor::<f64>::rand_uniform(vec![2, 4, 2, 2], -1.0, 1.0, &mut rng(9));
        let feats: Vec<Tensor<f64>> = transform_ids(3).map(|j| part.apply(&f, j).unwrap()).collect();
        let p = aggregated_inference(&store, std::slice::from_ref(&feats), &[&head]).unwrap();
        let w = store.value(head.weight).data();
        let bias = store.value(head.bias).data();
        for b in 0..2 {
            let mut z = [0.0f64; 3];
            for (j, fj) in feats.iter().enumerate() {
                let pooled: Vec<f64> = (0..4)
                    .map(|c| fj.data()[(b * 4 + c) * 4..(b * 4 + c + 1) * 4].iter().sum::<f64>() / 4.0)
                    .collect();
                for (i, zi) in z.iter_mut().enumerate() {
                    let r = i * 3 + j;
                    *zi += ((0..4).map(|c| w[r * 4 + c] * pooled[c]).sum::<f64>() + bias[r]) / 3.0;
                }
            }
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            for i in 0..3 {
                assert!((p.data()[b * 3 + i] - z[i].exp() / denom).abs() < 1e-6);
            }
        }
        // the stacked-logits route agrees
        let (e, _) = part.expand(&f).unwrap();
        let stack = head.logits(&store, &e).unwrap();
        let z = aggregate_stack_logits(&[(&stack, 3)], 3).unwrap();
        let q = kernels::softmax(&z).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_of_identical_features_equals_single() {
        let mut store = ParamStore::<f64>::new();
        let head = JointHead::new(&mut store, "h", 2, 3, 2, 0, &mut rng(10));
        // identical weights for every transform column of a class
        let w = store.get_mut(head.weight).value.data_mut();
        for i in 0..3 {
            let (a, b) = (w[(i * 2) * 2], w[(i * 2) * 2 + 1]);
            w[(i * 2 + 1) * 2] = a;
            w[(i * 2 + 1) * 2 + 1] = b;
        }
        let f = Tensor::<f64>::rand_uniform(vec![1, 2, 2, 2], -1.0, 1.0, &mut rng(11));
        let ag = aggregated_inference(&store, &[vec![f.clone(), f.clone()]], &[&head]).unwrap();
        let si = single_inference(&store, &f, &head).unwrap();
        for (a, b) in ag.data().iter().zip(si.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_needs_every_slot() {
        let mut store = ParamStore::<f64>::new();
        let head = JointHead::new(&mut store, "h", 2, 3, 3, 0, &mut rng(12));
        let f = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        assert!(aggregated_inference(&store, &[vec![f.clone(), f]], &[&head]).is_err());
    }

    #[test]
    fn accuracy_counts_hits() {
        let p = Tensor::<f64>::from_f64(vec![3, 2], &[0.9, 0.1, 0.2, 0.8, 0.6, 0.4]).unwrap();
        assert!((accuracy(&p, &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(accuracy(&p, &[0, 1]).is_err());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("ag".parse::<InferenceScheme>().unwrap(), InferenceScheme::AggregatedInference);
        assert!("xx".parse::<InferenceScheme>().is_err());
        assert_eq!(serde_json::to_string(&InferenceScheme::DistilledInference).unwrap(), "\"sd\"");
    }
}
