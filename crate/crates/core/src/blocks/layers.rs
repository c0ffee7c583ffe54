//! Parameterized building blocks shared by the network modules.
//!
//! Each layer owns only its parameter names and hyper-parameters; tensors
//! live in a [`ParamStore`] and are bound into a [`Graph`] per forward pass.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Bound, ConvOpts, Graph, Var};
use crate::error::Result;
use crate::params::{kaiming_normal, ParamStore};
use crate::tensor::{Shape, Tensor};

/// RNG type used for every parameter initialization.
pub type InitRng = ChaCha8Rng;

/// Upper bound on normalization groups; the actual count is
/// `gcd(channels, MAX_NORM_GROUPS)`.
pub const MAX_NORM_GROUPS: usize = 8;

pub fn norm_groups(channels: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    gcd(channels, MAX_NORM_GROUPS).max(1)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub opts: ConvOpts,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, opts: ConvOpts, bias: bool) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            opts,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        let shape = Shape::new(self.cout, self.cin, self.kernel, self.kernel);
        store.insert(self.weight_name(), kaiming_normal(shape, rng));
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(Shape::new(1, self.cout, 1, 1)));
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = if self.bias {
            Some(p.get(&self.bias_name())?)
        } else {
            None
        };
        g.conv2d(x, w, b, self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let shape = Shape::new(1, self.channels, 1, 1);
        store.insert(format!("{}.gamma", self.name), Tensor::full(shape, 1.0));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(shape));
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let gamma = p.get(&format!("{}.gamma", self.name))?;
        let beta = p.get(&format!("{}.beta", self.name))?;
        g.group_norm(x, gamma, beta, norm_groups(self.channels))
    }
}

/// Convolution (no bias) → group normalization → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, opts: ConvOpts) -> Self {
        Self {
            conv: Conv::new(format!("{name}.conv"), cin, cout, kernel, opts, false),
            norm: GroupNorm::new(format!("{name}.gn"), cout),
        }
    }

    /// Stride-1 block with "same" padding.
    pub fn same(name: &str, cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        Self::new(name, cin, cout, kernel, ConvOpts::same(kernel, dilation))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        self.conv.init(store, rng);
        self.norm.init(store);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.norm.forward(g, p, y)?;
        Ok(g.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups(1), 1);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(12), 4);
        assert_eq!(norm_groups(256), 8);
    }
}
