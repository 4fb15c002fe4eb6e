//! Joint (class × transform) classifiers, the plain classifier used for
//! self-distillation, and the losses that train them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{ensure, Result, SfeError};
use crate::tensor::{Scalar, Tensor};
use crate::transform::TransformId;

/// Pair (class `y`, transform `j`) flattened class-major as `y·K + j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointLabel {
    pub class: usize,
    pub transform: TransformId,
}

impl JointLabel {
    pub fn encode(class: usize, j: usize, n: usize, k: usize) -> Result<usize> {
        ensure!(
            class < n && j < k,
            SfeError::config(format!("joint label ({class}, {j}) out of range for N={n}, K={k}"))
        );
        Ok(class * k + j)
    }

    pub fn decode(flat: usize, n: usize, k: usize) -> Result<JointLabel> {
        ensure!(
            k >= 1 && flat < n * k,
            SfeError::config(format!("flat label {flat} out of range for N={n}, K={k}"))
        );
        Ok(JointLabel {
            class: flat / k,
            transform: TransformId(flat % k),
        })
    }

    pub fn flat(&self, k: usize) -> usize {
        self.class * k + self.transform.0
    }
}

/// Global-average-pool followed by an affine map to `N·K` joint logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
    pub transforms: usize,
    pub in_features: usize,
    /// Trunk stage (0-based) whose output this head reads.
    pub stage: usize,
}

/// He-uniform fan-in initialization for a `[d_out, d_in]` weight.
pub(crate) fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

impl JointHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        classes: usize,
        transforms: usize,
        stage: usize,
        rng: &mut R,
    ) -> Self {
        let out = classes * transforms;
        let weight = store.register(
            format!("{name}.weight"),
            he_uniform(vec![out, in_features], in_features, rng),
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(vec![out]));
        JointHead {
            weight,
            bias,
            classes,
            transforms,
            in_features,
            stage,
        }
    }

    pub fn outputs(&self) -> usize {
        self.classes * self.transforms
    }

    pub fn forward_var<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        affine_head(g, store, features, self.weight, self.bias, self.in_features)
    }

    /// Joint logits `[B, N·K]` of a `[B, C, H, W]` feature map, no tape.
    pub fn logits<T: Scalar>(&self, store: &ParamStore<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
        affine_logits(store, features, self.weight, self.bias, self.in_features)
    }

    /// Row of weights scoring class `class` under transform `j`.
    pub fn weight_row<'a, T: Scalar>(&self, store: &'a ParamStore<T>, class: usize, j: TransformId) -> Result<&'a [T]> {
        let flat = JointLabel::encode(class, j.0, self.classes, self.transforms)?;
        let w = store.value(self.weight).data();
        Ok(&w[flat * self.in_features..(flat + 1) * self.in_features])
    }
}

/// Plain `N`-way classifier on the original last-stage feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
    pub in_features: usize,
}

impl SingleHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            he_uniform(vec![classes, in_features], in_features, rng),
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(vec![classes]));
        SingleHead {
            weight,
            bias,
            classes,
            in_features,
        }
    }

    pub fn forward_var<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        affine_head(g, store, features, self.weight, self.bias, self.in_features)
    }

    pub fn logits<T: Scalar>(&self, store: &ParamStore<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
        affine_logits(store, features, self.weight, self.bias, self.in_features)
    }
}

fn affine_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    features: Var,
    weight: ParamId,
    bias: ParamId,
    in_features: usize,
) -> Result<Var> {
    let (_, c, _, _) = g.value(features).dims4()?;
    ensure!(
        c == in_features,
        SfeError::shape(format!("head expects {in_features} channels, feature map has {c}"))
    );
    let pooled = g.global_avg_pool(features)?;
    let w = g.param(store, weight);
    let b = g.param(store, bias);
    g.linear(pooled, w, Some(b))
}

fn affine_logits<T: Scalar>(
    store: &ParamStore<T>,
    features: &Tensor<T>,
    weight: ParamId,
    bias: ParamId,
    in_features: usize,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = features.dims4()?;
    ensure!(
        c == in_features,
        SfeError::shape(format!("head expects {in_features} channels, feature map has {c}"))
    );
    let pooled = kernels::global_avg_pool(features.data(), b * c, h * w);
    let wv = store.value(weight);
    let d_out = wv.dim(0);
    let data = kernels::linear_forward(&pooled, b, c, wv.data(), d_out, Some(store.value(bias).data()));
    Tensor::new(vec![b, d_out], data)
}

/// Flat joint targets for an expanded batch: row `j·B + b` gets `y_b·K + j`.
pub fn joint_targets(labels: &[usize], classes: usize, transforms: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(labels.len() * transforms);
    for j in 0..transforms {
        for &y in labels {
            out.push(JointLabel::encode(y, j, classes, transforms)?);
        }
    }
    Ok(out)
}

/// `(1/K) Σ_j CE(block j, (y, j))`, averaged over the batch. Every block has
/// `B` rows, so this is the plain mean over all `K·B` rows.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits_stack: Var,
    labels: &[usize],
    classes: usize,
    transforms: usize,
) -> Result<Var> {
    let (rows, d) = g.value(logits_stack).dims2()?;
    ensure!(
        rows == transforms * labels.len(),
        SfeError::shape(format!(
            "logit stack has {rows} rows, expected K·B = {}·{}",
            transforms,
            labels.len()
        ))
    );
    ensure!(
        d == classes * transforms,
        SfeError::shape(format!("logit stack has {d} columns, expected N·K = {}", classes * transforms))
    );
    let targets = joint_targets(labels, classes, transforms)?;
    g.cross_entropy(logits_stack, &targets)
}

/// `L_last + β · L_penultimate`.
pub fn two_classifier_loss<T: Scalar>(g: &mut Graph<T>, loss_penultimate: Var, loss_last: Var, beta: f64) -> Result<Var> {
    check_beta(beta)?;
    let weighted = g.scale(loss_penultimate, T::from_f64(beta))?;
    g.add(loss_last, weighted)
}

pub fn check_beta(beta: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&beta),
        SfeError::config(format!("beta must lie in [0, 1], got {beta}"))
    );
    Ok(())
}

/// Losses of one training step, split by term.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    /// Weighted sum of joint-head losses.
    pub joint: Var,
    pub single_ce: Option<Var>,
    pub kl: Option<Var>,
}

/// `CE(student, y) + KL(teacher ‖ softmax(student))`. The teacher is a
/// constant: no gradient reaches whatever produced it.
pub fn distillation_loss<T: Scalar>(
    g: &mut Graph<T>,
    single_logits: Var,
    labels: &[usize],
    teacher: &Tensor<T>,
) -> Result<(Var, Var, Var)> {
    let ce = g.cross_entropy(single_logits, labels)?;
    let logq = g.log_softmax(single_logits)?;
    let kl = g.kl_div(teacher, logq)?;
    let total = g.add(ce, kl)?;
    Ok((total, ce, kl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn codec_examples() {
        // N=100, K=5 spans 500 joint labels
        assert!(JointLabel::decode(499, 100, 5).is_ok());
        assert_eq!(JointLabel::encode(0, 0, 100, 5).unwrap(), 0);
        assert_eq!(JointLabel::encode(3, 2, 100, 5).unwrap(), 17);
        let d = JointLabel::decode(17, 100, 5).unwrap();
        assert_eq!((d.class, d.transform), (3, TransformId(2)));
        assert!(JointLabel::encode(100, 0, 100, 5).is_err());
        assert!(JointLabel::encode(0, 5, 100, 5).is_err());
        assert!(JointLabel::decode(500, 100, 5).is_err());
    }

    proptest! {
        #[test]
        fn codec_is_bijective(n in 1usize..=64, k in 1usize..=64, frac in 0.0f64..1.0) {
            let flat = ((n * k) as f64 * frac) as usize;
            let d = JointLabel::decode(flat, n, k).unwrap();
            prop_assert_eq!(JointLabel::encode(d.class, d.transform.0, n, k).unwrap(), flat);
            prop_assert_eq!(d.flat(k), flat);
        }
    }

    #[test]
    fn zero_head_gives_uniform_joint_softmax() {
        let mut store = ParamStore::<f64>::new();
        let head = JointHead::new(&mut store, "h", 4, 3, 2, 0, &mut rng(0));
        store.get_mut(head.weight).value.data_mut().fill(0.0);
        let f = Tensor::<f64>::rand_uniform(vec![2, 4, 3, 3], -1.0, 1.0, &mut rng(1));
        let z = head.logits(&store, &f).unwrap();
        let p = kernels::softmax(&z).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn graph_and_value_logits_agree() {
        let mut store = ParamStore::<f64>::new();
        let head = JointHead::new(&mut store, "h", 3, 2, 3, 0, &mut rng(2));
        let f = Tensor::<f64>::rand_uniform(vec![2, 3, 2, 2], -1.0, 1.0, &mut rng(3));
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let z = head.forward_var(&mut g, &store, fv).unwrap();
        assert_eq!(g.value(z), &head.logits(&store, &f).unwrap());
        assert_eq!(g.value(z).shape(), &[2, 6]);
    }

    #[test]
    fn joint_softmax_matches_direct_formula() {
        let mut store = ParamStore::<f64>::new();
        let head = JointHead::new(&mut store, "h", 5, 3, 4, 0, &mut rng(4));
        let f = Tensor::<f64>::rand_uniform(vec![1, 5, 2, 2], -1.0, 1.0, &mut rng(5));
        let p = kernels::softmax(&head.logits(&store, &f).unwrap()).unwrap();
        // direct: pooled feature, exp(μ_ij·f + b_ij) / Σ exp(...)
        let pooled: Vec<f64> = (0..5).map(|c| f.data()[c * 4..(c + 1) * 4].iter().sum::<f64>() / 4.0).collect();
        let w = store.value(head.weight).data();
        let b = store.value(head.bias).data();
        let scores: Vec<f64> = (0..12)
            .map(|r| (0..5).map(|c| w[r * 5 + c] * pooled[c]).sum::<f64>() + b[r])
            .collect();
        let denom: f64 = scores.iter().map(|s| s.exp()).sum();
        for r in 0..12 {
            assert!((p.data()[r] - scores[r].exp() / denom).abs() < 1e-6);
        }
        assert!((p.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn joint_targets_follow_block_layout() {
        assert_eq!(joint_targets(&[1, 0], 2, 3).unwrap(), vec![3, 0, 4, 1, 5, 2]);
    }

    #[test]
    fn joint_loss_k1_is_plain_cross_entropy() {
        let z = Tensor::<f64>::rand_uniform(vec![4, 5], -2.0, 2.0, &mut rng(6));
        let y = [0, 4, 2, 2];
        let mut g = Graph::new();
        let zv = g.constant(z);
        let a = joint_loss(&mut g, zv, &y, 5, 1).unwrap();
        let b = g.cross_entropy(zv, &y).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-10);
    }

    #[test]
    fn joint_loss_uniform_is_log_nk() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(vec![6, 6]));
        let l = joint_loss(&mut g, z, &[1, 0], 2, 3).unwrap();
        assert!((g.value(l).item() - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_rejects_bad_layout() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(vec![5, 6]));
        assert!(matches!(joint_loss(&mut g, z, &[1, 0], 2, 3), Err(SfeError::Shape(_))));
    }

    #[test]
    fn two_classifier_weights() {
        let mut g = Graph::<f64>::new();
        let last = g.constant(Tensor::scalar(2.0));
        let pen = g.constant(Tensor::scalar(4.0));
        let l0 = two_classifier_loss(&mut g, pen, last, 0.0).unwrap();
        let l1 = two_classifier_loss(&mut g, pen, last, 1.0).unwrap();
        let lh = two_classifier_loss(&mut g, pen, last, 0.5).unwrap();
        assert_eq!(g.value(l0).item(), 2.0);
        assert_eq!(g.value(l1).item(), 6.0);
        assert_eq!(g.value(lh).item(), 4.0);
        assert!(matches!(two_classifier_loss(&mut g, pen, last, 1.5), Err(SfeError::Config(_))));
        assert!(two_classifier_loss(&mut g, pen, last, -0.1).is_err());
    }

    #[test]
    fn distillation_with_matching_student() {
        let z = Tensor::<f64>::from_f64(vec![1, 3], &[2.0, 0.5, -1.0]).unwrap();
        let teacher = kernels::softmax(&z).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z);
        let (total, ce, kl) = distillation_loss(&mut g, zv, &[0], &teacher).unwrap();
        assert!(g.value(kl).item().abs() < 1e-12);
        assert!((g.value(total).item() - g.value(ce).item()).abs() < 1e-12);
    }

    #[test]
    fn distillation_uniform_case() {
        let teacher = Tensor::<f64>::full(vec![1, 4], 0.25);
        let mut g = Graph::new();
        let zv = g.constant(Tensor::zeros(vec![1, 4]));
        let (total, _, kl) = distillation_loss(&mut g, zv, &[2], &teacher).unwrap();
        assert!(g.value(kl).item().abs() < 1e-15);
        assert!((g.value(total).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn distillation_matches_direct_sum() {
        let z = Tensor::<f64>::rand_uniform(vec![2, 5], -2.0, 2.0, &mut rng(7));
        let teacher = kernels::softmax(&Tensor::<f64>::rand_uniform(vec![2, 5], -1.0, 1.0, &mut rng(8))).unwrap();
        let y = [3, 1];
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let (total, _, _) = distillation_loss(&mut g, zv, &y, &teacher).unwrap();
        let mut direct = 0.0;
        for r in 0..2 {
            let row = &z.data()[r * 5..(r + 1) * 5];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            direct += lse - row[y[r]];
            for i in 0..5 {
                let p = teacher.data()[r * 5 + i];
                direct += p * (p.ln() - (row[i] - lse));
            }
        }
        direct /= 2.0;
        assert!((g.value(total).item() - direct).abs() < 1e-10);
    }

    #[test]
    fn distillation_rejects_unnormalized_teacher() {
        let mut g = Graph::<f64>::new();
        let zv = g.constant(Tensor::zeros(vec![1, 2]));
        let teacher = Tensor::from_f64(vec![1, 2], &[0.7, 0.7]).unwrap();
        assert!(distillation_loss(&mut g, zv, &[0], &teacher).is_err());
    }
}
