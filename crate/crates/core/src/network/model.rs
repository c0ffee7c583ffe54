use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::backbone::{BackboneSpec, Encoder};
use super::decoder::{Ablation, AblationFlags, DecoderLevel};
use crate::autograd::{Bound, ConvOpts, Graph, Var};
use crate::blocks::{Conv, InitRng, SrfbConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    /// Widths of the five decoder levels, coarsest first.
    pub decoder_channels: [usize; LEVELS],
    /// Branch template; its channel count is replaced per level.
    pub srfb: SrfbConfig,
    /// Training resolution `(H, W)`.
    pub input_size: (usize, usize),
    pub flags: AblationFlags,
}

impl ModelConfig {
    /// ResNeXt-101 encoder, 320×320 input, full model.
    pub fn standard() -> Self {
        Self {
            backbone: BackboneSpec::resnext101(),
            decoder_channels: [256, 128, 64, 32, 32],
            srfb: SrfbConfig::srfb(256),
            input_size: (320, 320),
            flags: AblationFlags::default(),
        }
    }

    /// Scratch backbone with narrow decoders, sized for CPU experiments.
    pub fn tiny(size: usize) -> Self {
        Self {
            backbone: BackboneSpec::tiny(),
            decoder_channels: [32, 32, 16, 16, 16],
            srfb: SrfbConfig::srfb(32),
            input_size: (size, size),
            flags: AblationFlags::default(),
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.flags = ablation.flags();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.decoder_channels.contains(&0) {
            return Err(Error::Config("decoder channels must be positive".into()));
        }
        let m = self.backbone.max_stride();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "input size {h}×{w} is not divisible by the backbone stride {m}"
            )));
        }
        Ok(())
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Probabilities at native decoder resolution, coarsest first.
    pub defocus_sides: Vec<Var>,
    /// Side probabilities resized to the input resolution.
    pub defocus_sides_full: Vec<Var>,
    /// Empty without a depth head.
    pub depth_sides: Vec<Var>,
    pub depth_sides_full: Vec<Var>,
    pub defocus_final: Var,
    pub depth_final: Option<Var>,
    pub attention: Vec<Var>,
    pub selection: Vec<Var>,
}

/// Evaluated outputs of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SideOutputs {
    pub defocus_sides: Vec<Tensor>,
    pub depth_sides: Vec<Tensor>,
    /// Sides resized to the input resolution, as supervised by the loss.
    pub defocus_sides_full: Vec<Tensor>,
    pub depth_sides_full: Vec<Tensor>,
    pub defocus_final: Tensor,
    pub depth_final: Option<Tensor>,
}

impl SideOutputs {
    fn collect(g: &Graph, v: &ForwardVars) -> Self {
        let t = |x: &Var| g.value(*x).clone();
        Self {
            defocus_sides: v.defocus_sides.iter().map(t).collect(),
            depth_sides: v.depth_sides.iter().map(t).collect(),
            defocus_sides_full: v.defocus_sides_full.iter().map(t).collect(),
            depth_sides_full: v.depth_sides_full.iter().map(t).collect(),
            defocus_final: t(&v.defocus_final),
            depth_final: v.depth_final.as_ref().map(t),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    encoder: Encoder,
    levels: Vec<DecoderLevel>,
    fuse_defocus: Conv,
    fuse_depth: Option<Conv>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config.backbone)?;
        let dc = config.decoder_channels;
        let sc = config.backbone.stage_channels;
        let levels = (0..LEVELS)
            .map(|k| {
                let prev = (k > 0).then(|| dc[k - 1]);
                DecoderLevel::new(k, prev, sc[LEVELS - 1 - k], dc[k], &config.srfb, config.flags)
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = |name: &str| Conv::new(name, LEVELS, 1, 1, ConvOpts::same(1, 1), true);
        Ok(Self {
            fuse_defocus: fuse("fuse.defocus"),
            fuse_depth: config.flags.use_depth_head.then(|| fuse("fuse.depth")),
            config,
            encoder,
            levels,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fresh parameters. Fusion weights start as a plain average of the
    /// sides.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = InitRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng);
        for level in &self.levels {
            level.init(&mut store, &mut rng);
        }
        for fuse in [Some(&self.fuse_defocus), self.fuse_depth.as_ref()]
            .into_iter()
            .flatten()
        {
            fuse.init(&mut store, &mut rng);
            store
                .get_mut(&fuse.weight_name())
                .expect("just inserted")
                .data_mut()
                .fill(1.0 / LEVELS as f64);
        }
        store
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<[Var; LEVELS]> {
        self.encoder.forward(g, p, image)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<ForwardVars> {
        let s = g.shape(image);
        let taps = self.encode(g, p, image)?;
        let mut prev = None;
        let mut defocus_logits = Vec::with_capacity(LEVELS);
        let mut out = ForwardVars {
            defocus_sides: Vec::with_capacity(LEVELS),
            defocus_sides_full: Vec::with_capacity(LEVELS),
            depth_sides: Vec::new(),
            depth_sides_full: Vec::new(),
            defocus_final: image,
            depth_final: None,
            attention: Vec::new(),
            selection: Vec::new(),
        };
        for (k, level) in self.levels.iter().enumerate() {
            let o = level.forward(g, p, prev, taps[LEVELS - 1 - k])?;
            prev = Some(o.features);
            out.defocus_sides.push(o.defocus_side);
            defocus_logits.push(g.resize(o.defocus_logits, s.h, s.w));
            if let Some(d) = o.depth_side {
                out.depth_sides.push(d);
                out.depth_sides_full.push(g.resize(d, s.h, s.w));
            }
            out.attention.extend(o.attention);
            out.selection.extend(o.selection);
        }
        // Sides and the defocus fusion operate on logits so that the
        // resized probabilities stay inside (0, 1).
        for &l in &defocus_logits {
            out.defocus_sides_full.push(g.sigmoid(l));
        }
        let stacked = g.concat_channels(&defocus_logits)?;
        let fused = self.fuse_defocus.forward(g, p, stacked)?;
        out.defocus_final = g.sigmoid(fused);
        if let Some(fuse) = &self.fuse_depth {
            let stacked = g.concat_channels(&out.depth_sides_full)?;
            out.depth_final = Some(fuse.forward(g, p, stacked)?);
        }
        Ok(out)
    }

    /// Inference-mode forward of a standardized `N×3×H×W` batch.
    pub fn predict(&self, params: &ParamStore, image: &Tensor) -> Result<SideOutputs> {
        let mut g = Graph::inference();
        let p = g.bind(params);
        let x = g.constant(image.clone());
        let v = self.forward(&mut g, &p, x)?;
        Ok(SideOutputs::collect(&g, &v))
    }

    /// Native side resolutions for an input of the given size.
    pub fn side_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let st = self.config.backbone.stage_strides;
        (0..LEVELS)
            .map(|k| (h / st[LEVELS - 1 - k], w / st[LEVELS - 1 - k]))
            .collect()
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        let (h, w) = self.config.input_size;
        Shape::new(batch, 3, h, w)
    }
}
