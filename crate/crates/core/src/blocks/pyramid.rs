//! Multi-branch receptive-field pyramids.
//!
//! All three blocks share the *feature pyramid* stage (a set of branches,
//! each a stack of dilated convolutions or the identity) and differ in how
//! the branches are *merged*:
//!
//! | block | identity branch | merge |
//! |-------|-----------------|-------|
//! | [`Srfb`] | yes | per-channel softmax attention over branches |
//! | [`SkBlock`] | no | per-channel softmax attention over branches |
//! | [`Rfb`] | yes | concatenation + 1×1 convolution |

use serde::{Deserialize, Serialize};

use super::layers::{Conv, ConvBlock, InitRng};
use super::receptive_field::{receptive_field, BranchSpec};
use crate::autograd::{Bound, ConvOpts, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore};
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrfbConfig {
    pub branches: Vec<BranchSpec>,
    pub channels: usize,
    /// Divisor of `channels` for the attention bottleneck width.
    pub reduction_ratio: usize,
    /// Lower bound on the attention bottleneck width.
    pub min_attention_dim: usize,
}

impl SrfbConfig {
    /// Identity plus `1×1 → k×k (dilation k)` for k ∈ {3, 5, 7}: receptive
    /// fields 1, 7, 21, 43.
    pub fn srfb(channels: usize) -> Self {
        let mut branches = vec![BranchSpec::identity()];
        for k in [3, 5, 7] {
            branches.push(BranchSpec::conv([(1, 1), (k, k)]).expect("static spec"));
        }
        Self {
            branches,
            channels,
            reduction_ratio: 4,
            min_attention_dim: 16,
        }
    }

    /// Selective-kernel baseline: a 3×3 stage followed by 3×3 at dilation
    /// 2, 3, 4 (receptive fields 3, 7, 9, 11). No identity branch.
    pub fn sk(channels: usize) -> Self {
        let mut branches = vec![BranchSpec::conv([(3, 1)]).expect("static spec")];
        for d in [2, 3, 4] {
            branches.push(BranchSpec::conv([(3, 1), (3, d)]).expect("static spec"));
        }
        Self {
            branches,
            ..Self::srfb(channels)
        }
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self {
            channels,
            ..self.clone()
        }
    }

    pub fn attention_dim(&self) -> usize {
        (self.channels / self.reduction_ratio.max(1)).max(self.min_attention_dim)
    }

    pub fn receptive_fields(&self) -> Result<Vec<usize>> {
        self.branches.iter().map(receptive_field).collect()
    }

    fn validate_common(&self) -> Result<()> {
        if self.channels == 0 || self.reduction_ratio == 0 || self.min_attention_dim == 0 {
            return Err(Error::Config(
                "channels, reduction_ratio and min_attention_dim must be positive".into(),
            ));
        }
        self.branches.iter().try_for_each(BranchSpec::validate)
    }

    fn identity_count(&self) -> usize {
        self.branches.iter().filter(|b| b.identity).count()
    }

    /// Exactly one identity branch and at least two convolutional ones.
    pub fn validate_srfb(&self) -> Result<()> {
        self.validate_common()?;
        if self.identity_count() != 1 {
            return Err(Error::Config(format!(
                "SRFB needs exactly one identity branch, found {}",
                self.identity_count()
            )));
        }
        if self.branches.len() - 1 < 2 {
            return Err(Error::Config("SRFB needs at least two convolutional branches".into()));
        }
        Ok(())
    }

    /// No identity branch and at least two branches.
    pub fn validate_sk(&self) -> Result<()> {
        self.validate_common()?;
        if self.identity_count() != 0 {
            return Err(Error::Config("SK block has no identity branch".into()));
        }
        if self.branches.len() < 2 {
            return Err(Error::Config("SK block needs at least two branches".into()));
        }
        Ok(())
    }
}

/// Block families whose branch pyramids can be tabulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Srfb,
    Sk,
    Rfb,
}

impl BlockKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "srfb" => Ok(Self::Srfb),
            "sk" => Ok(Self::Sk),
            "rfb" => Ok(Self::Rfb),
            other => Err(Error::InvalidArgument(format!(
                "unknown block kind `{other}` (expected srfb, sk or rfb)"
            ))),
        }
    }

    /// The default branch set; RFB shares the SRFB pyramid.
    pub fn config(self, channels: usize) -> SrfbConfig {
        match self {
            Self::Srfb | Self::Rfb => SrfbConfig::srfb(channels),
            Self::Sk => SrfbConfig::sk(channels),
        }
    }
}

/// One row per branch (`branch`, stage list, receptive field) followed by a
/// `max` row.
pub fn rf_table(kind: BlockKind) -> Result<String> {
    let cfg = kind.config(16);
    let fields = cfg.receptive_fields()?;
    let mut out = String::from("branch\tstages\treceptive_field\n");
    for (i, (b, rf)) in cfg.branches.iter().zip(&fields).enumerate() {
        out.push_str(&format!("{i}\t{}\t{rf}\n", b.describe()));
    }
    let max = fields.iter().max().copied().unwrap_or(1);
    out.push_str(&format!("max\t-\t{max}\n"));
    Ok(out)
}

/// One branch instantiated at a channel width. Intermediate stages run at
/// half width; the last stage restores `channels`.
#[derive(Clone, Debug)]
pub(crate) struct Branch {
    stages: Vec<ConvBlock>,
}

impl Branch {
    fn new(prefix: &str, spec: &BranchSpec, channels: usize) -> Self {
        let mid = (channels / 2).max(1);
        let n = spec.stages.len();
        let stages = spec
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let cin = if i == 0 { channels } else { mid };
                let cout = if i + 1 == n { channels } else { mid };
                ConvBlock::new(
                    &format!("{prefix}.s{i}"),
                    cin,
                    cout,
                    s.kernel,
                    ConvOpts::same(s.kernel, s.dilation),
                )
            })
            .collect();
        Self { stages }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        self.stages.iter().for_each(|s| s.init(store, rng));
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.stages.iter().try_fold(x, |h, s| s.forward(g, p, h))
    }
}

fn build_branches(prefix: &str, cfg: &SrfbConfig) -> Vec<Branch> {
    cfg.branches
        .iter()
        .enumerate()
        .map(|(i, spec)| Branch::new(&format!("{prefix}.b{i}"), spec, cfg.channels))
        .collect()
}

fn check_input(g: &Graph, x: Var, channels: usize) -> Result<()> {
    let s = g.shape(x);
    if s.c != channels {
        return Err(Error::Shape(format!("block expects {channels} channels, input is {s}")));
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::Shape(format!("empty spatial extent {s}")));
    }
    Ok(())
}

fn pyramid(g: &mut Graph, p: &Bound, branches: &[Branch], x: Var) -> Result<Vec<Var>> {
    branches.iter().map(|b| b.forward(g, p, x)).collect()
}

/// Output of a selective merge.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveOutput {
    pub output: Var,
    /// `N × (K·C) × 1 × 1`: channel `c` of branch `k` at index `k·C + c`.
    pub selection: Var,
}

/// Branch pyramid merged by global selective attention: the summed branch
/// outputs are pooled, squeezed through a bottleneck and expanded to one
/// logit per (branch, channel); a softmax across branches gives the mixing
/// weights.
#[derive(Clone, Debug)]
pub struct SelectiveBlock {
    branches: Vec<Branch>,
    squeeze: Conv,
    expand: Conv,
    channels: usize,
}

impl SelectiveBlock {
    fn build(prefix: &str, cfg: &SrfbConfig) -> Self {
        let d = cfg.attention_dim();
        let k = cfg.branches.len();
        Self {
            branches: build_branches(prefix, cfg),
            squeeze: Conv::new(
                format!("{prefix}.att.squeeze"),
                cfg.channels,
                d,
                1,
                ConvOpts::same(1, 1),
                true,
            ),
            expand: Conv::new(
                format!("{prefix}.att.expand"),
                d,
                k * cfg.channels,
                1,
                ConvOpts::same(1, 1),
                true,
            ),
            channels: cfg.channels,
        }
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        self.branches.iter().for_each(|b| b.init(store, rng));
        self.squeeze.init(store, rng);
        // Small logits so selection starts close to uniform.
        let shape = Shape::new(self.expand.cout, self.expand.cin, 1, 1);
        store.insert(self.expand.weight_name(), normal(shape, 0.01, rng));
        store.insert(
            self.expand.bias_name(),
            crate::tensor::Tensor::zeros(Shape::new(1, self.expand.cout, 1, 1)),
        );
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<SelectiveOutput> {
        check_input(g, x, self.channels)?;
        let outs = pyramid(g, p, &self.branches, x)?;
        let fused = g.sum_all(&outs)?;
        let pooled = g.global_avg_pool(fused);
        let z = self.squeeze.forward(g, p, pooled)?;
        let z = g.relu(z);
        let logits = self.expand.forward(g, p, z)?;
        let selection = g.branch_softmax(logits, outs.len())?;
        let mut weighted = Vec::with_capacity(outs.len());
        for (k, &b) in outs.iter().enumerate() {
            let pk = g.narrow_channels(selection, k * self.channels, self.channels)?;
            weighted.push(g.mul(pk, b)?);
        }
        let output = g.sum_all(&weighted)?;
        Ok(SelectiveOutput { output, selection })
    }
}

/// Selective Reception Field Block.
#[derive(Clone, Debug)]
pub struct Srfb(SelectiveBlock);

impl Srfb {
    pub fn new(prefix: &str, cfg: &SrfbConfig) -> Result<Self> {
        cfg.validate_srfb()?;
        Ok(Self(SelectiveBlock::build(prefix, cfg)))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        self.0.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<SelectiveOutput> {
        self.0.forward(g, p, x)
    }
}

/// Selective Kernel baseline block.
#[derive(Clone, Debug)]
pub struct SkBlock(SelectiveBlock);

impl SkBlock {
    pub fn new(prefix: &str, cfg: &SrfbConfig) -> Result<Self> {
        cfg.validate_sk()?;
        Ok(Self(SelectiveBlock::build(prefix, cfg)))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        self.0.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<SelectiveOutput> {
        self.0.forward(g, p, x)
    }
}

/// Receptive Field Block variant: the SRFB pyramid merged by concatenation
/// and a linear 1×1 convolution, without selective attention.
#[derive(Clone, Debug)]
pub struct Rfb {
    branches: Vec<Branch>,
    merge: Conv,
    channels: usize,
}

impl Rfb {
    pub fn new(prefix: &str, cfg: &SrfbConfig) -> Result<Self> {
        cfg.validate_srfb()?;
        let k = cfg.branches.len();
        Ok(Self {
            branches: build_branches(prefix, cfg),
            merge: Conv::new(
                format!("{prefix}.merge"),
                k * cfg.channels,
                cfg.channels,
                1,
                ConvOpts::same(1, 1),
                true,
            ),
            channels: cfg.channels,
        })
    }

    pub fn merge_weight_name(&self) -> String {
        self.merge.weight_name()
    }

    pub fn merge_bias_name(&self) -> String {
        self.merge.bias_name()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        self.branches.iter().for_each(|b| b.init(store, rng));
        self.merge.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        check_input(g, x, self.channels)?;
        let outs = pyramid(g, p, &self.branches, x)?;
        let cat = g.concat_channels(&outs)?;
        self.merge.forward(g, p, cat)
    }
}
