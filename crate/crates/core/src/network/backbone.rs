use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, ConvOpts, Graph, Var};
use crate::blocks::{ConvBlock, InitRng};
use crate::error::{Error, Result};
use crate::io::archive;
use crate::params::ParamStore;

/// The five encoder taps: channel width and cumulative stride of each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub stage_channels: [usize; 5],
    pub stage_strides: [usize; 5],
    /// Per-channel RGB statistics used to standardize input images.
    #[serde(default = "imagenet_mean")]
    pub mean: [f64; 3],
    #[serde(default = "imagenet_std")]
    pub std: [f64; 3],
}

fn imagenet_mean() -> [f64; 3] {
    [0.485, 0.456, 0.406]
}

fn imagenet_std() -> [f64; 3] {
    [0.229, 0.224, 0.225]
}

impl BackboneSpec {
    /// Small scratch CNN used for tests and desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            stage_channels: [8, 16, 32, 64, 128],
            stage_strides: [2, 4, 8, 16, 32],
            mean: imagenet_mean(),
            std: imagenet_std(),
        }
    }

    /// Stage outputs of ResNeXt-101 (stem, layer1..layer4).
    pub fn resnext101() -> Self {
        Self {
            name: "resnext101".into(),
            stage_channels: [64, 256, 512, 1024, 2048],
            stage_strides: [2, 4, 8, 16, 32],
            ..Self::tiny()
        }
    }

    /// VGG-19 features taken before each max-pooling layer.
    pub fn vgg19() -> Self {
        Self {
            name: "vgg19".into(),
            stage_channels: [64, 128, 256, 512, 512],
            stage_strides: [1, 2, 4, 8, 16],
            ..Self::tiny()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "resnext101" => Some(Self::resnext101()),
            "vgg19" => Some(Self::vgg19()),
            _ => None,
        }
    }

    pub fn max_stride(&self) -> usize {
        self.stage_strides[4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone stage channels must be positive".into()));
        }
        let s = self.stage_strides;
        let first_ok = s[0] == 1 || s[0] == 2;
        if !first_ok || s.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!(
                "backbone strides must start at 1 or 2 and double per stage, got {s:?}"
            )));
        }
        Ok(())
    }
}

/// Staged convolutional encoder following a [`BackboneSpec`]: each stage
/// downsamples by its stride ratio (1 or 2) and refines with a second 3×3
/// block. Parameters live under `encoder.*`.
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: BackboneSpec,
    stages: Vec<[ConvBlock; 2]>,
}

impl Encoder {
    pub fn new(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let mut cin = 3;
        let mut prev_stride = 1;
        let stages = (0..5)
            .map(|i| {
                let cout = spec.stage_channels[i];
                let step = spec.stage_strides[i] / prev_stride;
                prev_stride = spec.stage_strides[i];
                let down = ConvBlock::new(
                    &format!("encoder.stage{i}.down"),
                    cin,
                    cout,
                    3,
                    ConvOpts::strided(3, step),
                );
                let refine = ConvBlock::same(&format!("encoder.stage{i}.refine"), cout, cout, 3, 1);
                cin = cout;
                [down, refine]
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            stages,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut InitRng) {
        for [a, b] in &self.stages {
            a.init(store, rng);
            b.init(store, rng);
        }
    }

    /// Five feature maps, finest first, coarsest last.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<[Var; 5]> {
        let s = g.shape(image);
        if s.c != 3 {
            return Err(Error::Shape(format!("encoder expects a 3-channel image, got {s}")));
        }
        let m = self.spec.max_stride();
        if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(m) || !s.w.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "image {}×{} is not divisible by the backbone stride {m}",
                s.h, s.w
            )));
        }
        let mut taps = [image; 5];
        let mut h = image;
        for (i, [down, refine]) in self.stages.iter().enumerate() {
            h = down.forward(g, p, h)?;
            h = refine.forward(g, p, h)?;
            taps[i] = h;
        }
        Ok(taps)
    }
}

/// Copies matching `encoder.*` arrays from a named-array archive into
/// `store`. A missing file or missing entries leave the random
/// initialization in place and log a warning. Returns the number of arrays
/// loaded.
pub fn load_pretrained(store: &mut ParamStore, spec: &BackboneSpec, path: Option<&Path>) -> Result<usize> {
    let Some(path) = path.filter(|p| p.exists()) else {
        log::warn!(
            "no pretrained weights for backbone `{}`; encoder stays randomly initialized",
            spec.name
        );
        return Ok(0);
    };
    let arrays = archive::read(path)?.arrays;
    let mut loaded = 0;
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("encoder."))
        .map(str::to_string)
        .collect();
    for name in names {
        match arrays.get(&name) {
            Some(t) if Some(t.shape()) == store.get(&name).map(|x| x.shape()) => {
                store.insert(name, t.clone());
                loaded += 1;
            }
            Some(t) => log::warn!("pretrained `{name}` has shape {}, skipped", t.shape()),
            None => log::warn!("pretrained weights lack `{name}`"),
        }
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn presets_validate() {
        for spec in [BackboneSpec::tiny(), BackboneSpec::resnext101(), BackboneSpec::vgg19()] {
            spec.validate().unwrap();
        }
        assert_eq!(BackboneSpec::resnext101().stage_channels, [64, 256, 512, 1024, 2048]);
        let mut bad = BackboneSpec::tiny();
        bad.stage_strides = [2, 4, 4, 16, 32];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tiny_tap_shapes() {
        let enc = Encoder::new(&BackboneSpec::tiny()).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut InitRng::seed_from_u64(0));
        let mut g = Graph::inference();
        let p = g.bind(&store);
        let x = g.constant(Tensor::zeros(Shape::new(1, 3, 96, 96)));
        let taps = enc.forward(&mut g, &p, x).unwrap();
        let shapes: Vec<Shape> = taps.iter().map(|&t| g.shape(t)).collect();
        assert_eq!(
            shapes,
            vec![
                Shape::new(1, 8, 48, 48),
                Shape::new(1, 16, 24, 24),
                Shape::new(1, 32, 12, 12),
                Shape::new(1, 64, 6, 6),
                Shape::new(1, 128, 3, 3),
            ]
        );
    }

    #[test]
    fn coarsest_tap_at_320() {
        let enc = Encoder::new(&BackboneSpec::tiny()).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut InitRng::seed_from_u64(0));
        let mut g = Graph::inference();
        let p = g.bind(&store);
        let x = g.constant(Tensor::zeros(Shape::new(1, 3, 320, 320)));
        let taps = enc.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(taps[4]), Shape::new(1, 128, 10, 10));
    }

    #[test]
    fn rejects_indivisible_input() {
        let enc = Encoder::new(&BackboneSpec::tiny()).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut InitRng::seed_from_u64(0));
        let mut g = Graph::inference();
        let p = g.bind(&store);
        let x = g.constant(Tensor::zeros(Shape::new(1, 3, 100, 96)));
        assert!(matches!(enc.forward(&mut g, &p, x), Err(Error::Shape(_))));
    }

    #[test]
    fn missing_pretrained_file_degrades_to_random_init() {
        let enc = Encoder::new(&BackboneSpec::tiny()).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut InitRng::seed_from_u64(0));
        let before = store.clone();
        let n = load_pretrained(&mut store, &BackboneSpec::tiny(), Some(Path::new("/nonexistent/w.bin"))).unwrap();
        assert_eq!(n, 0);
        assert_eq!(store, before);
    }
}
