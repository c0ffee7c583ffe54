use super::layers::{Conv, ConvBlock, InitRng};
use crate::autograd::{Bound, ConvOpts, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Width of the first attention convolution.
pub const SAB_HIDDEN: usize = 8;

/// Supervision-guided attention: the level's own side predictions are
/// turned into a spatial attention map that re-weights its features.
#[derive(Clone, Debug)]
pub struct Sab {
    hidden: ConvBlock,
    out: Conv,
    side_channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SabOutput {
    pub output: Var,
    /// `N×1×H×W`, strictly inside (0, 1).
    pub attention: Var,
}

impl Sab {
    /// `side_channels` is 2 with a depth head (defocus + depth), 1 without.
    pub fn new(prefix: &str, side_channels: usize) -> Self {
        Self {
            hidden: ConvBlock::same(&format!("{prefix}.conv1"), side_channels, SAB_HIDDEN, 3, 1),
            out: Conv::new(format!("{prefix}.conv2"), SAB_HIDDEN, 1, 3, ConvOpts::same(3, 1), true),
            side_channels,
        }
    }

    pub fn output_bias_name(&self) -> String {
        self.out.bias_name()
    }

    pub fn output_weight_name(&self) -> String {
        self.out.weight_name()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        self.hidden.init(store, rng);
        self.out.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var, sides: &[Var]) -> Result<SabOutput> {
        let fs = g.shape(features);
        if sides.len() != self.side_channels {
            return Err(Error::Shape(format!(
                "SAB expects {} side maps, got {}",
                self.side_channels,
                sides.len()
            )));
        }
        for &s in sides {
            let ss = g.shape(s);
            if ss.c != 1 || ss.n != fs.n || ss.h != fs.h || ss.w != fs.w {
                return Err(Error::Shape(format!("side map {ss} does not match features {fs}")));
            }
        }
        let stacked = g.concat_channels(sides)?;
        let h = self.hidden.forward(g, p, stacked)?;
        let logits = self.out.forward(g, p, h)?;
        let attention = g.sigmoid(logits);
        let output = g.mul(features, attention)?;
        Ok(SabOutput { output, attention })
    }
}
