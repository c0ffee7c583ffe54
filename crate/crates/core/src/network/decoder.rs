use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, ConvOpts, Graph, Var};
use crate::blocks::{Conv, ConvBlock, InitRng, Rfb, Sab, SkBlock, Srfb, SrfbConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Switches that select each ablation column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_depth_head: bool,
    pub use_srfb: bool,
    pub use_rfb: bool,
    pub use_sab: bool,
    /// Replace the SRFB with the selective-kernel baseline.
    #[serde(default)]
    pub use_sk: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Ablation::Full.flags()
    }
}

/// Named ablation columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Plain FCN, defocus supervision only.
    Fcn,
    /// FCN with the depth head.
    PlusD,
    PlusDSrfb,
    PlusDRfbSab,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Self::Fcn, Self::PlusD, Self::PlusDSrfb, Self::PlusDRfbSab, Self::Full];

    pub fn flags(self) -> AblationFlags {
        let f = |use_depth_head, use_srfb, use_rfb, use_sab| AblationFlags {
            use_depth_head,
            use_srfb,
            use_rfb,
            use_sab,
            use_sk: false,
        };
        match self {
            Self::Fcn => f(false, false, false, false),
            Self::PlusD => f(true, false, false, false),
            Self::PlusDSrfb => f(true, true, false, false),
            Self::PlusDRfbSab => f(true, false, true, true),
            Self::Full => f(true, true, false, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Fcn => "FCN",
            Self::PlusD => "+D",
            Self::PlusDSrfb => "+D+SRFB",
            Self::PlusDRfbSab => "+D+RFB+SA",
            Self::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcn" => Some(Self::Fcn),
            "plus-d" | "+d" => Some(Self::PlusD),
            "plus-d-srfb" | "+d+srfb" => Some(Self::PlusDSrfb),
            "plus-d-rfb-sab" | "+d+rfb+sa" => Some(Self::PlusDRfbSab),
            "full" => Some(Self::Full),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
enum Context {
    Plain(ConvBlock),
    Srfb(Srfb),
    Sk(SkBlock),
    Rfb(Rfb),
}

/// One decoder level. Parameters live under `decoder.l{index}.*`.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    index: usize,
    /// `None` on the first (coarsest) level, which has no predecessor.
    up: Option<ConvBlock>,
    merge: ConvBlock,
    context: Context,
    defocus_head: Conv,
    depth_head: Option<Conv>,
    sab: Option<Sab>,
}

#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub features: Var,
    /// Sigmoid probabilities at the skip resolution.
    pub defocus_side: Var,
    pub defocus_logits: Var,
    pub depth_side: Option<Var>,
    pub attention: Option<Var>,
    /// Branch selection weights of an SRFB / SK block.
    pub selection: Option<Var>,
}

impl DecoderLevel {
    /// `prev_channels` is `None` for the first level. `skip_channels` is the
    /// width of the encoder tap merged at this level.
    pub fn new(
        index: usize,
        prev_channels: Option<usize>,
        skip_channels: usize,
        channels: usize,
        srfb: &SrfbConfig,
        flags: AblationFlags,
    ) -> Result<Self> {
        let name = |s: &str| format!("decoder.l{index}.{s}");
        let up = prev_channels.map(|c| ConvBlock::same(&name("up"), c, channels, 3, 1));
        let merge_in = if up.is_some() {
            channels + skip_channels
        } else {
            skip_channels
        };
        let merge = ConvBlock::same(&name("merge"), merge_in, channels, 3, 1);
        let cfg = srfb.with_channels(channels);
        let context = if flags.use_sk {
            Context::Sk(SkBlock::new(&name("sk"), &cfg)?)
        } else if flags.use_srfb {
            Context::Srfb(Srfb::new(&name("srfb"), &cfg)?)
        } else if flags.use_rfb {
            Context::Rfb(Rfb::new(&name("rfb"), &cfg)?)
        } else {
            Context::Plain(ConvBlock::same(&name("plain"), channels, channels, 3, 1))
        };
        let head = |s: &str| Conv::new(name(s), channels, 1, 1, ConvOpts::same(1, 1), true);
        let depth_head = flags.use_depth_head.then(|| head("depth_head"));
        let sab = flags
            .use_sab
            .then(|| Sab::new(&name("sab"), if flags.use_depth_head { 2 } else { 1 }));
        Ok(Self {
            index,
            up,
            merge,
            context,
            defocus_head: head("defocus_head"),
            depth_head,
            sab,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        if let Some(up) = &self.up {
            up.init(store, rng);
        }
        self.merge.init(store, rng);
        match &self.context {
            Context::Plain(b) => b.init(store, rng),
            Context::Srfb(b) => b.init(store, rng),
            Context::Sk(b) => b.init(store, rng),
            Context::Rfb(b) => b.init(store, rng),
        }
        self.defocus_head.init(store, rng);
        if let Some(h) = &self.depth_head {
            h.init(store, rng);
        }
        if let Some(s) = &self.sab {
            s.init(store, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, prev: Option<Var>, skip: Var) -> Result<LevelOutput> {
        let ss = g.shape(skip);
        let merged_in = match (&self.up, prev) {
            (Some(up), Some(prev)) => {
                let ps = g.shape(prev);
                if ss.h != 2 * ps.h || ss.w != 2 * ps.w || ss.n != ps.n {
                    return Err(Error::Shape(format!(
                        "decoder level {}: skip {ss} is not twice the size of prev {ps}",
                        self.index
                    )));
                }
                let u = g.resize(prev, ss.h, ss.w);
                let u = up.forward(g, p, u)?;
                g.concat_channels(&[u, skip])?
            }
            (None, None) => skip,
            (Some(_), None) => {
                return Err(Error::Shape(format!(
                    "decoder level {} needs a previous level",
                    self.index
                )))
            }
            (None, Some(_)) => {
                return Err(Error::Shape(format!(
                    "decoder level {} takes no previous level",
                    self.index
                )))
            }
        };
        let merged = self.merge.forward(g, p, merged_in)?;
        let (features, selection) = match &self.context {
            Context::Plain(b) => (b.forward(g, p, merged)?, None),
            Context::Srfb(b) => {
                let o = b.forward(g, p, merged)?;
                (o.output, Some(o.selection))
            }
            Context::Sk(b) => {
                let o = b.forward(g, p, merged)?;
                (o.output, Some(o.selection))
            }
            Context::Rfb(b) => (b.forward(g, p, merged)?, None),
        };
        let defocus_logits = self.defocus_head.forward(g, p, features)?;
        let defocus_side = g.sigmoid(defocus_logits);
        let depth_side = match &self.depth_head {
            Some(h) => Some(h.forward(g, p, features)?),
            None => None,
        };
        let (features, attention) = match &self.sab {
            Some(sab) => {
                let mut sides = vec![defocus_side];
                sides.extend(depth_side);
                let o = sab.forward(g, p, features, &sides)?;
                (o.output, Some(o.attention))
            }
            None => (features, None),
        };
        Ok(LevelOutput {
            features,
            defocus_side,
            defocus_logits,
            depth_side,
            attention,
            selection,
        })
    }
}
