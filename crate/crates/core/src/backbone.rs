//! Pre-activation residual trunk with SFE attachment points.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, ParamId, ParamStore, Var};
use crate::error::{ensure, Result, SfeError};
use crate::heads::{self, check_beta, JointHead, LossTerms, SingleHead};
use crate::inference::{self, InferenceScheme};
use crate::tensor::{Scalar, Tensor};
use crate::transform::ChannelPartition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    BatchNorm,
    /// No normalization at all; used to compare expanded and plain forwards.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// `(C, H, W)` of one input image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_bn_eps() -> f64 {
    1e-5
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            input_shape: [3, 32, 32],
            num_classes: 10,
            norm: NormKind::BatchNorm,
            bn_momentum: default_bn_momentum(),
            bn_eps: default_bn_eps(),
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.stages() >= 2,
            SfeError::config("the backbone needs at least two stages")
        );
        ensure!(
            self.stage_channels.iter().all(|&c| c >= 1),
            SfeError::config("stage channel counts must be positive")
        );
        ensure!(self.blocks_per_stage >= 1, SfeError::config("blocks_per_stage must be >= 1"));
        ensure!(self.num_classes >= 2, SfeError::config("num_classes must be >= 2"));
        let [c, h, w] = self.input_shape;
        ensure!(c >= 1 && h >= 1 && w >= 1, SfeError::config("input shape must be positive"));
        ensure!(
            self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum),
            SfeError::config("bn_eps must be > 0 and bn_momentum in [0, 1]")
        );
        Ok(())
    }

    /// Spatial size of the output of stage `s` (every stage after the first halves it).
    pub fn stage_hw(&self, s: usize) -> (usize, usize) {
        let [_, mut h, mut w] = self.input_shape;
        for _ in 0..s {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        (h, w)
    }
}

/// Where the SFE heads sit. Serialized as `baseline`, `two`, `three` or `single@L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AttachmentMode {
    /// No SFE: one plain classifier on the last stage, cross-entropy only.
    Baseline,
    /// Joint heads on the last two stages; expanded features only reach heads.
    TwoClassifier,
    /// Expand after stage `L` (1-based) and run the expanded batch through the
    /// remaining stages into a single joint head.
    SingleClassifierAtLayer(usize),
    /// Joint heads on the last three stages.
    ThreeClassifier,
}

impl fmt::Display for AttachmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttachmentMode::Baseline => f.write_str("baseline"),
            AttachmentMode::TwoClassifier => f.write_str("two"),
            AttachmentMode::SingleClassifierAtLayer(l) => write!(f, "single@{l}"),
            AttachmentMode::ThreeClassifier => f.write_str("three"),
        }
    }
}

impl From<AttachmentMode> for String {
    fn from(m: AttachmentMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for AttachmentMode {
    type Error = SfeError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for AttachmentMode {
    type Err = SfeError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if let Some(l) = s.strip_prefix("single@") {
            let l = l
                .parse()
                .map_err(|_| SfeError::config(format!("bad layer in attachment mode '{s}'")))?;
            return Ok(AttachmentMode::SingleClassifierAtLayer(l));
        }
        match s.as_str() {
            "baseline" => Ok(AttachmentMode::Baseline),
            "two" | "two_classifier" => Ok(AttachmentMode::TwoClassifier),
            "three" | "three_classifier" => Ok(AttachmentMode::ThreeClassifier),
            _ => Err(SfeError::config(format!(
                "unknown attachment mode '{s}' (baseline|two|three|single@L)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachmentPlan {
    pub mode: AttachmentMode,
    /// Channel groups per head; `K = k + 1`.
    pub k: usize,
    pub beta: f64,
    #[serde(default)]
    pub distill: bool,
    /// Baseline only: always zero this group of the last-stage feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discard_group: Option<usize>,
}

impl Default for AttachmentPlan {
    fn default() -> Self {
        AttachmentPlan {
            mode: AttachmentMode::TwoClassifier,
            k: 8,
            beta: 0.5,
            distill: false,
            discard_group: None,
        }
    }
}

impl AttachmentPlan {
    pub fn baseline() -> Self {
        AttachmentPlan {
            mode: AttachmentMode::Baseline,
            k: 0,
            beta: 1.0,
            distill: false,
            discard_group: None,
        }
    }

    /// Transforms per joint head (1 for the baseline classifier).
    pub fn transforms(&self) -> usize {
        match self.mode {
            AttachmentMode::Baseline => 1,
            _ => self.k + 1,
        }
    }

    /// 0-based trunk stages carrying a classifier, in ascending order.
    pub fn head_stages(&self, stages: usize) -> Vec<usize> {
        match self.mode {
            AttachmentMode::Baseline | AttachmentMode::SingleClassifierAtLayer(_) => vec![stages - 1],
            AttachmentMode::TwoClassifier => vec![stages - 2, stages - 1],
            AttachmentMode::ThreeClassifier => vec![stages - 3, stages - 2, stages - 1],
        }
    }

    /// Stage after which the batch is expanded and keeps flowing through the trunk.
    pub fn propagate_stage(&self) -> Option<usize> {
        match self.mode {
            AttachmentMode::SingleClassifierAtLayer(l) => Some(l - 1),
            _ => None,
        }
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        check_beta(self.beta)?;
        let s = cfg.stages();
        match self.mode {
            AttachmentMode::Baseline => {
                if let Some(g) = self.discard_group {
                    ensure!(
                        g < self.k,
                        SfeError::config(format!("discard_group {g} needs k > {g} groups"))
                    );
                }
            }
            AttachmentMode::TwoClassifier => {}
            AttachmentMode::ThreeClassifier => ensure!(
                s >= 3,
                SfeError::config("three-classifier mode needs at least three stages")
            ),
            AttachmentMode::SingleClassifierAtLayer(l) => ensure!(
                (1..=s).contains(&l),
                SfeError::config(format!("attach layer {l} outside 1..={s}"))
            ),
        }
        if self.mode != AttachmentMode::Baseline {
            ensure!(self.k >= 1, SfeError::config("SFE modes need k >= 1"));
            ensure!(
                self.discard_group.is_none(),
                SfeError::config("discard_group only applies to the baseline mode")
            );
        }
        for st in self.partition_stages(s) {
            let c = cfg.stage_channels[st];
            ensure!(
                self.k <= c,
                SfeError::config(format!("k = {} exceeds the {c} channels of stage {}", self.k, st + 1))
            );
        }
        Ok(())
    }

    /// Stages whose output is partitioned into channel groups.
    pub fn partition_stages(&self, stages: usize) -> Vec<usize> {
        match self.mode {
            AttachmentMode::Baseline if self.discard_group.is_some() => vec![stages - 1],
            AttachmentMode::Baseline => vec![],
            AttachmentMode::SingleClassifierAtLayer(l) => vec![l - 1],
            _ => self.head_stages(stages),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConvLayer {
    weight: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    norm1: Option<Norm>,
    conv1: ConvLayer,
    norm2: Option<Norm>,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

/// A joint head plus the frozen partition that defines its transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachedHead {
    pub head: JointHead,
    /// Partition used to expand this head's input (absent for the baseline).
    pub partition: Option<ChannelPartition>,
}

struct NormUpdate<T> {
    norm: Norm,
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

/// Per-head joint logits of one training forward.
#[derive(Debug, Clone, Copy)]
pub struct HeadLogits {
    pub stage: usize,
    pub logits: Var,
    pub transforms: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub heads: Vec<HeadLogits>,
    pub single: Option<Var>,
    pub batch: usize,
    /// Output of every stage as seen by the trunk (expanded after the
    /// propagation point). The last entry is the normalized final feature.
    pub stage_features: Vec<Var>,
}

/// Backbone, joint heads, optional single classifier, and the frozen
/// channel partitions, all sharing one parameter store.
#[derive(Debug, Clone)]
pub struct SfeModel<T> {
    pub config: BackboneConfig,
    pub plan: AttachmentPlan,
    pub params: ParamStore<T>,
    stem: ConvLayer,
    stages: Vec<Vec<Block>>,
    final_norm: Option<Norm>,
    pub heads: Vec<AttachedHead>,
    pub single: Option<SingleHead>,
}

/// Architecture description sufficient to rebuild a model's layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLayout {
    stem: ConvLayer,
    stages: Vec<Vec<Block>>,
    final_norm: Option<Norm>,
    heads: Vec<AttachedHead>,
    single: Option<SingleHead>,
}

fn he_normal<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::rand_normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl<T: Scalar> SfeModel<T> {
    /// Build with separate seeds for weights and for channel partitions.
    /// Each attached stage draws its partition from its own stream.
    pub fn build(cfg: &BackboneConfig, plan: &AttachmentPlan, model_seed: u64, partition_seed: u64) -> Result<Self> {
        cfg.validate()?;
        plan.validate(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
        let mut params = ParamStore::new();
        let use_norm = cfg.norm == NormKind::BatchNorm;

        let conv = |params: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: String, cin: usize, cout: usize, k: usize, stride: usize| {
            let weight = params.register(name, he_normal(vec![cout, cin, k, k], cin * k * k, rng));
            ConvLayer {
                weight,
                stride,
                pad: k / 2,
            }
        };
        let norm = |params: &mut ParamStore<T>, name: String, c: usize| {
            use_norm.then(|| Norm {
                gamma: params.register(format!("{name}.gamma"), Tensor::ones(vec![c])),
                beta: params.register(format!("{name}.beta"), Tensor::zeros(vec![c])),
                running_mean: params.register_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![c])),
                running_var: params.register_buffer(format!("{name}.running_var"), Tensor::ones(vec![c])),
            })
        };

        let c0 = cfg.stage_channels[0];
        let stem = conv(&mut params, &mut rng, "stem.weight".into(), cfg.input_shape[0], c0, 3, 1);
        let mut stages = Vec::new();
        let mut cin = c0;
        for (s, &cout) in cfg.stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let p = format!("stage{s}.block{b}");
                let norm1 = norm(&mut params, format!("{p}.norm1"), cin);
                let conv1 = conv(&mut params, &mut rng, format!("{p}.conv1.weight"), cin, cout, 3, stride);
                let norm2 = norm(&mut params, format!("{p}.norm2"), cout);
                let conv2 = conv(&mut params, &mut rng, format!("{p}.conv2.weight"), cout, cout, 3, 1);
                let shortcut = (stride != 1 || cin != cout)
                    .then(|| conv(&mut params, &mut rng, format!("{p}.shortcut.weight"), cin, cout, 1, stride));
                blocks.push(Block {
                    norm1,
                    conv1,
                    norm2,
                    conv2,
                    shortcut,
                });
                cin = cout;
            }
            stages.push(blocks);
        }
        let final_norm = norm(&mut params, "final_norm".into(), cin);

        let n = cfg.num_classes;
        let kk = plan.transforms();
        let ns = cfg.stages();
        let partition_stages = plan.partition_stages(ns);
        let make_partition = |stage: usize| -> Result<ChannelPartition> {
            let mut prng = ChaCha8Rng::seed_from_u64(partition_seed);
            prng.set_stream(stage as u64 + 1);
            ChannelPartition::random(cfg.stage_channels[stage], plan.k, &mut prng)
        };
        let mut heads = Vec::new();
        for stage in plan.head_stages(ns) {
            let head = JointHead::new(
                &mut params,
                &format!("head{stage}"),
                cfg.stage_channels[stage],
                n,
                kk,
                stage,
                &mut rng,
            );
            let partition = match plan.mode {
                AttachmentMode::SingleClassifierAtLayer(l) => Some(make_partition(l - 1)?),
                _ if partition_stages.contains(&stage) => Some(make_partition(stage)?),
                _ => None,
            };
            heads.push(AttachedHead { head, partition });
        }
        let single = plan
            .distill
            .then(|| SingleHead::new(&mut params, "single", cfg.stage_channels[ns - 1], n, &mut rng));

        Ok(SfeModel {
            config: cfg.clone(),
            plan: plan.clone(),
            params,
            stem,
            stages,
            final_norm,
            heads,
            single,
        })
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout {
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            final_norm: self.final_norm.clone(),
            heads: self.heads.clone(),
            single: self.single.clone(),
        }
    }

    /// Reassemble a model from a saved layout and parameter values.
    pub fn from_parts(config: BackboneConfig, plan: AttachmentPlan, layout: ModelLayout, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        plan.validate(&config)?;
        Ok(SfeModel {
            config,
            plan,
            params,
            stem: layout.stem,
            stages: layout.stages,
            final_norm: layout.final_norm,
            heads: layout.heads,
            single: layout.single,
        })
    }

    pub fn transforms(&self) -> usize {
        self.plan.transforms()
    }

    pub fn last_head(&self) -> &AttachedHead {
        self.heads.last().expect("every plan has a last-stage head")
    }

    pub fn supports(&self, scheme: InferenceScheme) -> bool {
        match scheme {
            InferenceScheme::DistilledInference => self.single.is_some(),
            _ => true,
        }
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, layer: &ConvLayer) -> Result<Var> {
        let w = g.param(&self.params, layer.weight);
        g.conv2d(x, w, None, layer.stride, layer.pad)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, norm: &Option<Norm>, train: bool, updates: &mut Vec<NormUpdate<T>>) -> Result<Var> {
        let Some(n) = norm else { return Ok(x) };
        let gamma = g.param(&self.params, n.gamma);
        let beta = g.param(&self.params, n.beta);
        if train {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, self.config.bn_eps)?;
            updates.push(NormUpdate {
                norm: n.clone(),
                mean: stats.mean,
                var: stats.var,
                count: stats.count,
            });
            Ok(y)
        } else {
            let mean = self.params.value(n.running_mean).data().to_vec();
            let var = self.params.value(n.running_var).data().to_vec();
            g.batch_norm_eval(x, gamma, beta, &mean, &var, self.config.bn_eps)
        }
    }

    fn block(&self, g: &mut Graph<T>, x: Var, b: &Block, train: bool, updates: &mut Vec<NormUpdate<T>>) -> Result<Var> {
        let pre = self.norm(g, x, &b.norm1, train, updates)?;
        let pre = g.relu(pre)?;
        let h = self.conv(g, pre, &b.conv1)?;
        let h = self.norm(g, h, &b.norm2, train, updates)?;
        let h = g.relu(h)?;
        let h = self.conv(g, h, &b.conv2)?;
        let skip = match &b.shortcut {
            Some(sc) => self.conv(g, pre, sc)?,
            None => x,
        };
        g.add(h, skip)
    }

    /// Trunk output of stage `s` given its input; the last stage also gets
    /// the final normalization and activation.
    fn stage(&self, g: &mut Graph<T>, mut x: Var, s: usize, train: bool, updates: &mut Vec<NormUpdate<T>>) -> Result<Var> {
        for b in &self.stages[s] {
            x = self.block(g, x, b, train, updates)?;
        }
        if s + 1 == self.stages.len() {
            x = self.norm(g, x, &self.final_norm, train, updates)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<usize> {
        let (b, c, h, w) = g.value(x).dims4()?;
        ensure!(
            [c, h, w] == self.config.input_shape,
            SfeError::shape(format!(
                "input [{c}, {h}, {w}] does not match configured {:?}",
                self.config.input_shape
            ))
        );
        ensure!(b > 0, SfeError::shape("empty input batch"));
        Ok(b)
    }

    /// Full forward with SFE expansions. `train` selects batch statistics
    /// (and records running-stat updates) versus running statistics. Without
    /// `joint`, only the trunk and the single classifier run.
    fn run(
        &self,
        g: &mut Graph<T>,
        x: Var,
        train: bool,
        expand: bool,
        joint: bool,
    ) -> Result<(ForwardOutputs, Vec<NormUpdate<T>>)> {
        let batch = self.check_input(g, x)?;
        let mut updates = Vec::new();
        let ns = self.stages.len();
        let propagate = if expand { self.plan.propagate_stage() } else { None };
        let mut h = self.conv(g, x, &self.stem)?;
        let mut stage_features = Vec::with_capacity(ns);
        let mut heads_out = Vec::new();
        for s in 0..ns {
            h = self.stage(g, h, s, train, &mut updates)?;
            if propagate == Some(s) {
                let part = self.last_head().partition.as_ref().expect("propagate mode has a partition");
                h = part.expand_var(g, h)?.0;
            }
            stage_features.push(h);
        }
        let last = stage_features[ns - 1];
        let final_rows = g.value(last).dim(0);
        let original = if final_rows == batch { last } else { g.slice_rows(last, 0, batch)? };

        for ah in self.heads.iter().filter(|_| joint) {
            let feat = stage_features[ah.head.stage];
            let input = match (&ah.partition, self.plan.mode) {
                (Some(p), AttachmentMode::Baseline) => {
                    let g_id = self.plan.discard_group.expect("baseline partition implies a discard group");
                    g.channel_mask(feat, &p.keep_flags(crate::transform::TransformId(g_id + 1))?)?
                }
                (_, AttachmentMode::SingleClassifierAtLayer(_)) => feat,
                (Some(p), _) if expand => p.expand_var(g, feat)?.0,
                _ => feat,
            };
            let logits = ah.head.forward_var(g, &self.params, input)?;
            let transforms = if g.value(logits).dim(0) == batch { 1 } else { ah.head.transforms };
            heads_out.push(HeadLogits {
                stage: ah.head.stage,
                logits,
                transforms,
            });
        }
        let single = match &self.single {
            Some(sh) => {
                let f = match (self.plan.mode, self.plan.discard_group, &self.last_head().partition) {
                    (AttachmentMode::Baseline, Some(gid), Some(p)) => {
                        let keep = p.keep_flags(crate::transform::TransformId(gid + 1))?;
                        g.channel_mask(original, &keep)?
                    }
                    _ => original,
                };
                Some(sh.forward_var(g, &self.params, f)?)
            }
            None => None,
        };
        Ok((
            ForwardOutputs {
                heads: heads_out,
                single,
                batch,
                stage_features,
            },
            updates,
        ))
    }

    /// Training forward on the tape. Running statistics are updated.
    pub fn forward_training(&mut self, g: &mut Graph<T>, x: Var) -> Result<ForwardOutputs> {
        let (out, updates) = self.run(g, x, true, true, true)?;
        self.apply_norm_updates(updates);
        Ok(out)
    }

    /// Forward with batch statistics but without touching running statistics
    /// (for finite-difference probes of the training loss).
    pub fn forward_training_frozen(&self, g: &mut Graph<T>, x: Var) -> Result<ForwardOutputs> {
        Ok(self.run(g, x, true, true, true)?.0)
    }

    /// Eval-mode forward (running statistics). `expand` controls whether the
    /// transformed copies are produced.
    pub fn forward_inference(&self, g: &mut Graph<T>, x: Var, expand: bool) -> Result<ForwardOutputs> {
        Ok(self.run(g, x, false, expand, true)?.0)
    }

    fn apply_norm_updates(&mut self, updates: Vec<NormUpdate<T>>) {
        let m = T::from_f64(self.config.bn_momentum);
        for u in updates {
            let unbias = if u.count > 1 {
                T::from_f64(u.count as f64 / (u.count - 1) as f64)
            } else {
                T::one()
            };
            let rm = self.params.get_mut(u.norm.running_mean).value.data_mut();
            for (r, &b) in rm.iter_mut().zip(&u.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            let rv = self.params.get_mut(u.norm.running_var).value.data_mut();
            for (r, &b) in rv.iter_mut().zip(&u.var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
    }

    /// Class probabilities `[B, N]` under an inference scheme.
    pub fn forward_eval(&self, x: &Tensor<T>, scheme: InferenceScheme) -> Result<Tensor<T>> {
        ensure!(
            self.supports(scheme),
            SfeError::config(format!("scheme {scheme} is unavailable: the model has no single classifier"))
        );
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let n = self.config.num_classes;
        match scheme {
            InferenceScheme::SingleInference => {
                let out = self.forward_inference(&mut g, xv, false)?;
                let last = out.heads.last().expect("last head");
                let z = g.value(last.logits);
                inference::single_from_logits(z, n, self.last_head().head.transforms)
            }
            InferenceScheme::AggregatedInference => {
                let out = self.forward_inference(&mut g, xv, true)?;
                let z = self.aggregate(&g, &out)?;
                Tensor::new(z.shape().to_vec(), kernels::softmax_rows(z.data(), n))
            }
            InferenceScheme::DistilledInference => {
                let out = self.run(&mut g, xv, false, false, false)?.0;
                kernels::softmax(g.value(out.single.expect("checked above")))
            }
        }
    }

    /// Mean of the per-(head, transform) class scores, `[B, N]`.
    /// Needs an expanded forward.
    pub fn aggregate(&self, g: &Graph<T>, out: &ForwardOutputs) -> Result<Tensor<T>> {
        let mut stacks = Vec::with_capacity(out.heads.len());
        for (h, ah) in out.heads.iter().zip(&self.heads) {
            ensure!(
                h.transforms == ah.head.transforms,
                SfeError::shape("aggregation needs the expanded forward of every head")
            );
            stacks.push((g.value(h.logits), h.transforms));
        }
        inference::aggregate_stack_logits(&stacks, self.config.num_classes)
    }

    /// Weighted joint losses (last head 1, earlier heads β), plus
    /// distillation terms when a single classifier is present.
    pub fn training_loss(&self, g: &mut Graph<T>, out: &ForwardOutputs, labels: &[usize]) -> Result<LossTerms> {
        total_training_loss(self, g, out, labels)
    }

    /// Last-stage feature map of the original input (eval mode), `[B, C, H, W]`.
    pub fn final_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.run(&mut g, xv, false, false, false)?.0;
        Ok(g.value(*out.stage_features.last().unwrap()).clone())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Composite objective of one step.
pub fn total_training_loss<T: Scalar>(
    model: &SfeModel<T>,
    g: &mut Graph<T>,
    out: &ForwardOutputs,
    labels: &[usize],
) -> Result<LossTerms> {
    loss_with_teacher(model, g, out, labels, None)
}

/// Same objective with the distillation teacher supplied by the caller
/// instead of taken from this forward's aggregated scores.
pub fn loss_with_teacher<T: Scalar>(
    model: &SfeModel<T>,
    g: &mut Graph<T>,
    out: &ForwardOutputs,
    labels: &[usize],
    teacher: Option<&Tensor<T>>,
) -> Result<LossTerms> {
    ensure!(
        labels.len() == out.batch,
        SfeError::shape(format!("{} labels for a batch of {}", labels.len(), out.batch))
    );
    ensure!(
        out.heads.len() == model.heads.len(),
        SfeError::config("forward outputs do not match the model's heads")
    );
    ensure!(
        out.single.is_some() == model.plan.distill,
        SfeError::config("single-classifier output does not match the distillation setting")
    );
    let n = model.config.num_classes;
    let last = out.heads.len() - 1;
    let mut joint: Option<Var> = None;
    for (i, h) in out.heads.iter().enumerate() {
        let l = heads::joint_loss(g, h.logits, labels, n, h.transforms)?;
        joint = Some(match joint {
            None if i == last => l,
            None => g.scale(l, T::from_f64(model.plan.beta))?,
            Some(acc) if i == last => g.add(acc, l)?,
            Some(acc) => {
                let w = g.scale(l, T::from_f64(model.plan.beta))?;
                g.add(acc, w)?
            }
        });
    }
    let joint = joint.expect("at least one head");
    match out.single {
        Some(single) => {
            let teacher = match teacher {
                Some(t) => t.clone(),
                None => kernels::softmax(&model.aggregate(g, out)?)?,
            };
            let (distill, ce, kl) = heads::distillation_loss(g, single, labels, &teacher)?;
            let total = g.add(joint, distill)?;
            Ok(LossTerms {
                total,
                joint,
                single_ce: Some(ce),
                kl: Some(kl),
            })
        }
        None => Ok(LossTerms {
            total: joint,
            joint,
            single_ce: None,
            kl: None,
        }),
    }
}

/// Draw a label-free random batch shaped for `cfg` (tests and benchmarks).
pub fn random_input<T: Scalar, R: Rng + ?Sized>(cfg: &BackboneConfig, batch: usize, rng: &mut R) -> Tensor<T> {
    let [c, h, w] = cfg.input_shape;
    Tensor::rand_normal(vec![batch, c, h, w], 1.0, rng)
}
