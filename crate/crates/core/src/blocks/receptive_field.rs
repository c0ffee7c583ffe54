use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One convolution stage of a branch: an odd kernel at some dilation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub kernel: usize,
    pub dilation: usize,
}

impl Stage {
    pub const fn new(kernel: usize, dilation: usize) -> Self {
        Self { kernel, dilation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::BranchSpec(format!(
                "kernel {} must be odd and positive",
                self.kernel
            )));
        }
        if self.dilation == 0 {
            return Err(Error::BranchSpec("dilation must be positive".into()));
        }
        Ok(())
    }
}

/// A pyramid branch: stride-1 convolution stages applied in order, or the
/// pass-through (identity) branch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub identity: bool,
}

impl BranchSpec {
    pub fn identity() -> Self {
        Self {
            stages: Vec::new(),
            identity: true,
        }
    }

    pub fn conv(stages: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let spec = Self {
            stages: stages.into_iter().map(|(k, d)| Stage::new(k, d)).collect(),
            identity: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.identity && !self.stages.is_empty() {
            return Err(Error::BranchSpec("identity branch must have no stages".into()));
        }
        if !self.identity && self.stages.is_empty() {
            return Err(Error::BranchSpec(
                "convolutional branch needs at least one stage".into(),
            ));
        }
        self.stages.iter().try_for_each(Stage::validate)
    }

    /// Concatenation of two stage lists (identity acts as the empty list).
    pub fn then(&self, other: &BranchSpec) -> BranchSpec {
        let stages: Vec<Stage> = self.stages.iter().chain(&other.stages).copied().collect();
        BranchSpec {
            identity: stages.is_empty(),
            stages,
        }
    }

    /// Human-readable stage list, e.g. `1x1 -> 7x7 d7`.
    pub fn describe(&self) -> String {
        if self.identity {
            return "identity".into();
        }
        self.stages
            .iter()
            .map(|s| {
                if s.dilation == 1 {
                    format!("{k}x{k}", k = s.kernel)
                } else {
                    format!("{k}x{k} d{d}", k = s.kernel, d = s.dilation)
                }
            })
            .collect::<Vec<_>>()
            .join(" -> ")
    }
}

/// Receptive field of stacked stride-1 dilated convolutions:
/// `1 + Σ (kernel − 1) · dilation`. The identity branch has field 1.
pub fn receptive_field(spec: &BranchSpec) -> Result<usize> {
    spec.validate()?;
    Ok(1 + spec.stages.iter().map(|s| (s.kernel - 1) * s.dilation).sum::<usize>())
}
