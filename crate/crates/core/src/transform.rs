//! Channel-group masking transforms.
//!
//! A [`ChannelPartition`] splits the `C` channels of a feature map into `k`
//! disjoint groups once, at model construction. Transform `j = 0` is the
//! identity; transform `j ≥ 1` zeroes every channel of group `j − 1`. Each
//! feature map therefore yields `K = k + 1` views.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result, SfeError};
use crate::tensor::{Scalar, Tensor};

/// Transform index: 0 is the identity, `j ≥ 1` drops group `j − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransformId(pub usize);

impl TransformId {
    pub const IDENTITY: TransformId = TransformId(0);

    pub fn is_identity(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRecord", into = "PartitionRecord")]
pub struct ChannelPartition {
    channel_count: usize,
    group_count: usize,
    permutation: Vec<usize>,
    /// `group_of[c]` is the group that owns channel `c`.
    group_of: Vec<usize>,
}

/// On-disk form: `{channel_count, group_count, permutation}`.
#[derive(Serialize, Deserialize)]
struct PartitionRecord {
    channel_count: usize,
    group_count: usize,
    permutation: Vec<usize>,
}

impl TryFrom<PartitionRecord> for ChannelPartition {
    type Error = SfeError;

    fn try_from(r: PartitionRecord) -> Result<Self> {
        ChannelPartition::from_permutation(r.channel_count, r.group_count, r.permutation)
    }
}

impl From<ChannelPartition> for PartitionRecord {
    fn from(p: ChannelPartition) -> Self {
        PartitionRecord {
            channel_count: p.channel_count,
            group_count: p.group_count,
            permutation: p.permutation,
        }
    }
}

impl ChannelPartition {
    /// Shuffle the channels uniformly and cut the permutation into `k`
    /// contiguous blocks at `floor(g·C/k)`.
    pub fn random<R: Rng + ?Sized>(channel_count: usize, group_count: usize, rng: &mut R) -> Result<Self> {
        check_counts(channel_count, group_count)?;
        let mut permutation: Vec<usize> = (0..channel_count).collect();
        permutation.shuffle(rng);
        Self::from_permutation(channel_count, group_count, permutation)
    }

    pub fn from_permutation(
        channel_count: usize,
        group_count: usize,
        permutation: Vec<usize>,
    ) -> Result<Self> {
        check_counts(channel_count, group_count)?;
        ensure!(
            permutation.len() == channel_count,
            SfeError::config(format!(
                "permutation has {} entries for {channel_count} channels",
                permutation.len()
            ))
        );
        let mut group_of = vec![usize::MAX; channel_count];
        for g in 0..group_count {
            let (lo, hi) = group_bounds(channel_count, group_count, g);
            for &c in &permutation[lo..hi] {
                ensure!(
                    c < channel_count && group_of[c] == usize::MAX,
                    SfeError::config(format!("permutation is not a bijection (channel {c})"))
                );
                group_of[c] = g;
            }
        }
        Ok(ChannelPartition {
            channel_count,
            group_count,
            permutation,
            group_of,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    /// `K = k + 1`.
    pub fn transform_count(&self) -> usize {
        self.group_count + 1
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn group(&self, g: usize) -> &[usize] {
        let (lo, hi) = group_bounds(self.channel_count, self.group_count, g);
        &self.permutation[lo..hi]
    }

    pub fn groups(&self) -> impl Iterator<Item = &[usize]> {
        (0..self.group_count).map(|g| self.group(g))
    }

    pub fn group_of(&self, channel: usize) -> usize {
        self.group_of[channel]
    }

    fn check_transform(&self, j: TransformId) -> Result<()> {
        ensure!(
            j.0 < self.transform_count(),
            SfeError::config(format!(
                "transform {} out of range for K = {}",
                j.0,
                self.transform_count()
            ))
        );
        Ok(())
    }

    /// Per-channel keep flags of transform `j ≥ 1`.
    pub fn keep_flags(&self, j: TransformId) -> Result<Vec<bool>> {
        self.check_transform(j)?;
        ensure!(!j.is_identity(), SfeError::config("the identity transform has no mask"));
        Ok(self.group_of.iter().map(|&g| g != j.0 - 1).collect())
    }

    /// Keep flags for every non-identity transform, in order `j = 1..K`.
    pub fn all_keep_flags(&self) -> Vec<Vec<bool>> {
        (1..self.transform_count())
            .map(|j| self.keep_flags(TransformId(j)).unwrap())
            .collect()
    }

    /// Binary mask over channels: 0 where the channel belongs to group `j − 1`.
    pub fn mask_for<T: Scalar>(&self, j: TransformId) -> Result<Tensor<T>> {
        let keep = self.keep_flags(j)?;
        Tensor::new(
            vec![self.channel_count],
            keep.into_iter().map(|k| if k { T::one() } else { T::zero() }).collect(),
        )
    }

    /// `f ⊙ M_j` on a `[B, C, H, W]` tensor; `j = 0` returns `f` unchanged.
    pub fn apply<T: Scalar>(&self, f: &Tensor<T>, j: TransformId) -> Result<Tensor<T>> {
        let (b, c, h, w) = f.dims4()?;
        self.check_channels(c)?;
        self.check_transform(j)?;
        let mut out = f.clone();
        if j.is_identity() {
            return Ok(out);
        }
        let hw = h * w;
        for n in 0..b {
            for &ch in self.group(j.0 - 1) {
                out.data_mut()[(n * c + ch) * hw..(n * c + ch + 1) * hw].fill(T::zero());
            }
        }
        Ok(out)
    }

    /// Graph version of [`apply`](Self::apply).
    pub fn apply_var<T: Scalar>(&self, g: &mut Graph<T>, f: Var, j: TransformId) -> Result<Var> {
        let (_, c, _, _) = g.value(f).dims4()?;
        self.check_channels(c)?;
        self.check_transform(j)?;
        if j.is_identity() {
            return Ok(f);
        }
        g.channel_mask(f, &self.keep_flags(j)?)
    }

    /// `[f; f⊙M₁; …; f⊙M_k]` along the batch axis, as a graph op.
    pub fn expand_var<T: Scalar>(&self, g: &mut Graph<T>, f: Var) -> Result<(Var, ExpandedLayout)> {
        let (b, c, _, _) = g.value(f).dims4()?;
        self.check_channels(c)?;
        let out = g.expand_batch(f, &self.all_keep_flags())?;
        Ok((out, ExpandedLayout::new(b, self.transform_count())))
    }

    /// Value-only batch expansion.
    pub fn expand<T: Scalar>(&self, f: &Tensor<T>) -> Result<(Tensor<T>, ExpandedLayout)> {
        let (b, c, _, _) = f.dims4()?;
        self.check_channels(c)?;
        let blocks = (0..self.transform_count())
            .map(|j| self.apply(f, TransformId(j)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = blocks.iter().collect();
        Ok((Tensor::concat_rows(&refs)?, ExpandedLayout::new(b, self.transform_count())))
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        ensure!(
            c == self.channel_count,
            SfeError::shape(format!(
                "feature map has {c} channels, partition covers {}",
                self.channel_count
            ))
        );
        Ok(())
    }
}

fn check_counts(c: usize, k: usize) -> Result<()> {
    ensure!(
        k >= 1 && k <= c,
        SfeError::config(format!("need 1 <= k <= C for a channel partition, got k={k}, C={c}"))
    );
    Ok(())
}

fn group_bounds(c: usize, k: usize, g: usize) -> (usize, usize) {
    (g * c / k, (g + 1) * c / k)
}

/// Row layout of an expanded batch: block `j` holds samples `0..B` under
/// transform `j`, so row `r` is `(sample r mod B, transform r div B)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpandedLayout {
    pub batch: usize,
    pub transforms: usize,
}

impl ExpandedLayout {
    pub fn new(batch: usize, transforms: usize) -> Self {
        ExpandedLayout { batch, transforms }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.transforms
    }

    pub fn locate(&self, row: usize) -> (usize, TransformId) {
        (row % self.batch, TransformId(row / self.batch))
    }

    pub fn row(&self, sample: usize, j: TransformId) -> usize {
        j.0 * self.batch + sample
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_differences, max_relative_error};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn fixed_4_2() -> ChannelPartition {
        ChannelPartition::from_permutation(4, 2, vec![0, 1, 2, 3]).unwrap()
    }

    #[test]
    fn divisible_groups_are_equal() {
        let p = ChannelPartition::random(8, 4, &mut rng(0)).unwrap();
        assert!(p.groups().all(|g| g.len() == 2));
    }

    #[test]
    fn uneven_groups_use_floor_boundaries() {
        let p = ChannelPartition::random(10, 4, &mut rng(1)).unwrap();
        let sizes: Vec<usize> = p.groups().map(<[usize]>::len).collect();
        assert_eq!(sizes, vec![2, 3, 2, 3]);
    }

    #[test]
    fn singleton_groups() {
        let p = ChannelPartition::random(3, 3, &mut rng(2)).unwrap();
        let mut all: Vec<usize> = p.groups().flatten().copied().collect();
        assert!(p.groups().all(|g| g.len() == 1));
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn invalid_group_counts() {
        assert!(matches!(ChannelPartition::random(3, 4, &mut rng(0)), Err(SfeError::Config(_))));
        assert!(matches!(ChannelPartition::random(3, 0, &mut rng(0)), Err(SfeError::Config(_))));
        assert!(ChannelPartition::from_permutation(3, 1, vec![0, 0, 1]).is_err());
    }

    #[test]
    fn masks_by_definition() {
        let p = fixed_4_2();
        assert_eq!(p.mask_for::<f32>(TransformId(1)).unwrap().data(), &[0., 0., 1., 1.]);
        assert_eq!(p.mask_for::<f32>(TransformId(2)).unwrap().data(), &[1., 1., 0., 0.]);
        assert!(p.mask_for::<f32>(TransformId(0)).is_err());
        assert!(p.mask_for::<f32>(TransformId(3)).is_err());
    }

    #[test]
    fn dropped_parts_cover_every_channel_once() {
        let p = ChannelPartition::random(13, 5, &mut rng(3)).unwrap();
        let mut total = [0.0f64; 13];
        for j in 1..p.transform_count() {
            let m = p.mask_for::<f64>(TransformId(j)).unwrap();
            total.iter_mut().zip(m.data()).for_each(|(t, v)| *t += 1.0 - v);
        }
        assert!(total.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identity_is_bitwise_copy() {
        let p = fixed_4_2();
        let f = Tensor::<f32>::rand_uniform(vec![2, 4, 3, 3], -1.0, 1.0, &mut rng(4));
        assert_eq!(p.apply(&f, TransformId::IDENTITY).unwrap(), f);
    }

    #[test]
    fn apply_zeroes_group() {
        let p = fixed_4_2();
        let f = Tensor::<f32>::ones(vec![1, 4, 2, 2]);
        let out = p.apply(&f, TransformId(1)).unwrap();
        assert!(out.data()[..8].iter().all(|&v| v == 0.0));
        assert!(out.data()[8..].iter().all(|&v| v == 1.0));
        assert!(p.apply(&Tensor::<f32>::ones(vec![1, 3, 2, 2]), TransformId(1)).is_err());
    }

    #[test]
    fn expand_layout_single_sample() {
        let p = fixed_4_2();
        let f = Tensor::<f64>::rand_uniform(vec![1, 4, 2, 2], -1.0, 1.0, &mut rng(5));
        let (e, layout) = p.expand(&f).unwrap();
        assert_eq!(e.shape(), &[3, 4, 2, 2]);
        assert_eq!(e.slice_rows(0, 1).unwrap(), f);
        assert_eq!(e.slice_rows(1, 2).unwrap(), p.apply(&f, TransformId(1)).unwrap());
        assert_eq!(e.slice_rows(2, 3).unwrap(), p.apply(&f, TransformId(2)).unwrap());
        assert_eq!(layout.locate(2), (0, TransformId(2)));
    }

    #[test]
    fn expand_layout_is_transform_major() {
        let p = fixed_4_2();
        let f = Tensor::<f64>::rand_uniform(vec![2, 4, 2, 2], -1.0, 1.0, &mut rng(6));
        let (e, layout) = p.expand(&f).unwrap();
        assert_eq!(e.dim(0), 6);
        assert_eq!(layout.locate(2), (0, TransformId(1)));
        assert_eq!(layout.locate(3), (1, TransformId(1)));
        assert_eq!(e.slice_rows(2, 4).unwrap(), p.apply(&f, TransformId(1)).unwrap());
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let (ev, _) = p.expand_var(&mut g, fv).unwrap();
        assert_eq!(g.value(ev), &e);
    }

    #[test]
    fn expansion_gradient_counts_survivals() {
        let p = ChannelPartition::random(6, 3, &mut rng(7)).unwrap();
        let f = Tensor::<f64>::rand_uniform(vec![2, 6, 2, 2], -1.0, 1.0, &mut rng(8));
        let mut g = Graph::new();
        let fv = g.leaf(f.clone(), true);
        let (e, _) = p.expand_var(&mut g, fv).unwrap();
        let s = g.sum(e).unwrap();
        g.backward(s).unwrap();
        let analytic = g.grad(fv).unwrap().to_f64_vec();
        // identity plus k−1 masked copies keep each channel
        assert!(analytic.iter().all(|&v| v == 3.0));
        let numeric = central_differences(f.data(), 1e-5, |xs| {
            let t = Tensor::new(f.shape().to_vec(), xs.to_vec()).unwrap();
            p.expand(&t).unwrap().0.sum()
        });
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn same_seed_same_partition() {
        let a = ChannelPartition::random(32, 8, &mut rng(42)).unwrap();
        let b = ChannelPartition::random(32, 8, &mut rng(42)).unwrap();
        let c = ChannelPartition::random(32, 8, &mut rng(43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let p = ChannelPartition::random(10, 3, &mut rng(9)).unwrap();
        let js = serde_json::to_string(&p).unwrap();
        assert!(js.contains("\"permutation\""));
        assert!(!js.contains("group_of"));
        let back: ChannelPartition = serde_json::from_str(&js).unwrap();
        assert_eq!(back, p);
        let bad = r#"{"channel_count":3,"group_count":2,"permutation":[0,1,1]}"#;
        assert!(serde_json::from_str::<ChannelPartition>(bad).is_err());
    }

    proptest! {
        #[test]
        fn partition_property(c in 1usize..=64, kf in 0.0f64..1.0, seed in any::<u64>()) {
            let k = 1 + ((c - 1) as f64 * kf) as usize;
            let p = ChannelPartition::random(c, k, &mut rng(seed)).unwrap();
            let mut seen = vec![0; c];
            for grp in p.groups() {
                prop_assert!(!grp.is_empty());
                for &ch in grp {
                    seen[ch] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&n| n == 1));

            let f = Tensor::<f32>::rand_normal(vec![1, c, 2, 2], 1.0, &mut rng(seed ^ 1));
            let mut recon = Tensor::<f32>::zeros(f.shape().to_vec());
            for j in 1..p.transform_count() {
                let fj = p.apply(&f, TransformId(j)).unwrap();
                for ((r, &a), &b) in recon.data_mut().iter_mut().zip(f.data()).zip(fj.data()) {
                    *r += a - b;
                }
            }
            prop_assert_eq!(recon.data(), f.data());
        }

        #[test]
        fn masking_is_idempotent(c in 2usize..=16, seed in any::<u64>()) {
            let p = ChannelPartition::random(c, 2, &mut rng(seed)).unwrap();
            let f = Tensor::<f64>::rand_normal(vec![2, c, 2, 2], 1.0, &mut rng(seed ^ 2));
            for j in 0..p.transform_count() {
                let once = p.apply(&f, TransformId(j)).unwrap();
                let twice = p.apply(&once, TransformId(j)).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
