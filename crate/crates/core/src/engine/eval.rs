use std::path::Path;
use std::time::Instant;

use super::load_checkpoint;
use crate::data::{standardize, DefocusSample};
use crate::error::Result;
use crate::metrics::{evaluate_maps, EvalOptions, Latency, MetricReport};
use crate::network::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Defocus probability and depth for a `1×3×H×W` image in `[0, 1]`,
/// predicted at the model's input size and resized back to `H×W`.
pub fn predict_full_resolution(model: &Model, params: &ParamStore, image: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
    let s = image.shape();
    let (h, w) = model.config().input_size;
    let x = standardize(&image.resize_bilinear(h, w), &model.config().backbone);
    let out = model.predict(params, &x)?;
    let defocus = out.defocus_final.resize_bilinear(s.h, s.w).map(|v| v.clamp(0.0, 1.0));
    let depth = out.depth_final.map(|d| d.resize_bilinear(s.h, s.w));
    Ok((defocus, depth))
}

/// Inference over `samples`, scored against their masks at the original
/// resolution. The report carries the mean wall-clock latency per image.
pub fn evaluate_model(
    model: &Model,
    params: &ParamStore,
    samples: &[DefocusSample],
    opts: EvalOptions,
) -> Result<MetricReport> {
    let start = Instant::now();
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let (pred, _) = predict_full_resolution(model, params, &s.image)?;
        pairs.push((pred, s.mask.clone()));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let mut report = evaluate_maps(&pairs, opts)?;
    report.latency = Some(Latency::from_total(elapsed, samples.len()));
    Ok(report)
}

pub fn run_eval(checkpoint: &Path, samples: &[DefocusSample], opts: EvalOptions) -> Result<MetricReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    evaluate_model(&model, &ckpt.state.params, samples, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::engine::{save_checkpoint, TrainConfig, TrainState};

    #[test]
    fn evaluation_is_repeatable_and_timed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig::tiny(32);
        let model = Model::new(cfg.model_config()).unwrap();
        let state = TrainState::init(&model, &cfg).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &cfg, &state).unwrap();
        let samples = synthetic_dataset(3, (40, 48), 0);
        let mut a = run_eval(&path, &samples, EvalOptions::default()).unwrap();
        let mut b = run_eval(&path, &samples, EvalOptions::default()).unwrap();
        let la = a.latency.take().unwrap();
        assert!(la.seconds_per_image > 0.0 && (la.fps * la.seconds_per_image - 1.0).abs() < 1e-9);
        b.latency = None;
        assert_eq!(a, b);
        assert_eq!(a.n_images, 3);
    }

    #[test]
    fn predictions_restore_original_size() {
        let cfg = TrainConfig::tiny(32);
        let model = Model::new(cfg.model_config()).unwrap();
        let params = model.init_params(0);
        let image = Tensor::full(crate::tensor::Shape::new(1, 3, 48, 64), 0.5);
        let (d, z) = predict_full_resolution(&model, &params, &image).unwrap();
        assert_eq!((d.shape().h, d.shape().w), (48, 64));
        assert_eq!((z.unwrap().shape().h, image.shape().w), (48, 64));
    }
}
