//! Training and evaluation loops.
//!
//! Batches are a pure function of `(seed, iteration)`: sample `j` of
//! iteration `i` sits at stream position `s = i·B + j`, which falls in
//! epoch `s / n` of a per-epoch seeded permutation, and its flip is drawn
//! from an RNG seeded by `(seed, s)`. Resuming therefore needs no RNG state.

pub mod checkpoint;
pub mod config;
pub mod eval;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{preprocess, DefocusSample, Prepared};
use crate::distill::teacher_depth;
use crate::error::{Error, Result};
use crate::losses::{total_loss_var, LossBreakdown};
use crate::network::{load_pretrained, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ablation_manifest, gamma_manifest, TrainConfig, GAMMA_SWEEP};
pub use eval::{evaluate_model, predict_full_resolution, run_eval};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub iteration: u64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub iteration: u64,
    pub params: ParamStore,
    /// SGD velocity, one buffer per parameter.
    pub momentum: ParamStore,
    pub best: Option<BestSnapshot>,
}

impl TrainState {
    /// Fresh state for `model`, seeded from the config. Pretrained encoder
    /// weights are loaded for non-scratch backbones or when a file is given.
    pub fn init(model: &Model, cfg: &TrainConfig) -> Result<Self> {
        let mut params = model.init_params(cfg.seed);
        if cfg.pretrained.is_some() || cfg.backbone.name != "tiny" {
            load_pretrained(&mut params, &cfg.backbone, cfg.pretrained.as_deref())?;
        }
        Ok(Self {
            iteration: 0,
            momentum: params.zeros_like(),
            params,
            best: None,
        })
    }
}

/// One SGD step with momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
pub fn sgd_update(params: &mut ParamStore, momentum: &mut ParamStore, grads: &ParamStore, lr: f64, mu: f64, wd: f64) {
    for (name, theta) in params.iter_mut() {
        let g = grads.get(name).expect("gradient for every parameter");
        let v = momentum.get_mut(name).expect("momentum for every parameter");
        for ((t, v), g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = mu * *v + (g + wd * *t);
            *t -= lr * *v;
        }
    }
}

/// A collated training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub image: Tensor,
    pub mask: Tensor,
    pub depth: Option<Tensor>,
}

impl Batch {
    pub fn collate(items: &[&Prepared]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let stack = |f: &dyn Fn(&Prepared) -> Tensor| Tensor::stack(&items.iter().map(|p| f(p)).collect::<Vec<_>>());
        let depth = if items.iter().all(|p| p.depth.is_some()) {
            Some(stack(&|p| p.depth.clone().expect("checked"))?)
        } else {
            None
        };
        Ok(Self {
            ids: items.iter().map(|p| p.id.clone()).collect(),
            image: stack(&|p| p.image.clone())?,
            mask: stack(&|p| p.mask.clone())?,
            depth,
        })
    }
}

/// Forward, loss, backward and update. On a non-finite loss the state is
/// left untouched and the step fails with the loss breakdown.
pub fn train_step(model: &Model, state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = g.bind(&state.params);
    let x = g.constant(batch.image.clone());
    let out = model.forward(&mut g, &p, x)?;
    let teacher = if cfg.flags.use_depth_head {
        Some(
            batch
                .depth
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("batch {:?} lacks teacher depth", batch.ids)))?,
        )
    } else {
        None
    };
    let (loss, breakdown) = total_loss_var(&mut g, &out, &batch.mask, teacher, &cfg.loss)?;
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration,
            batch_ids: batch.ids.clone(),
            breakdown: serde_json::to_string(&breakdown).expect("breakdown serializes"),
        });
    }
    let grads = g.backward(loss)?;
    let grads = p.collect_grads(&g, &grads);
    sgd_update(
        &mut state.params,
        &mut state.momentum,
        &grads,
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
    );
    state.iteration += 1;
    Ok(breakdown)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^ (x >> 33)
}

/// Deterministic batch schedule over `n` samples.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    n: usize,
    batch: usize,
    seed: u64,
    augment: bool,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchSchedule {
    pub fn new(n: usize, batch: usize, seed: u64, augment: bool) -> Self {
        Self {
            n,
            batch,
            seed,
            augment,
            epoch: None,
        }
    }

    /// `(sample index, flip)` pairs of iteration `it`.
    pub fn batch(&mut self, it: u64) -> Vec<(usize, bool)> {
        (0..self.batch as u64)
            .map(|j| {
                let s = it * self.batch as u64 + j;
                let epoch = s / self.n as u64;
                if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..self.n).collect();
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, 1, epoch)));
                    self.epoch = Some((epoch, perm));
                }
                let idx = self.epoch.as_ref().expect("set above").1[(s % self.n as u64) as usize];
                let flip = self.augment && ChaCha8Rng::seed_from_u64(mix(self.seed, 2, s)).random_bool(0.5);
                (idx, flip)
            })
            .collect()
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub lr: f64,
    /// Seconds since the start of this `fit` call.
    pub wall_time: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

/// Samples preprocessed at the training resolution, with and without the
/// horizontal flip, and teacher depth filled in where the sample had none.
pub struct PreparedSet {
    items: Vec<[Prepared; 2]>,
}

impl PreparedSet {
    pub fn new(samples: &[DefocusSample], cfg: &TrainConfig) -> Result<Self> {
        let size = (cfg.input_size, cfg.input_size);
        let items = samples
            .iter()
            .map(|s| {
                let mut plain = preprocess(s, size, false, &cfg.backbone)?;
                if plain.depth.is_none() && cfg.flags.use_depth_head {
                    plain.depth = Some(teacher_depth(&s.id, &cfg.teacher, size)?.values);
                }
                let flipped = Prepared {
                    id: plain.id.clone(),
                    image: plain.image.flip_horizontal(),
                    mask: plain.mask.flip_horizontal(),
                    depth: plain.depth.as_ref().map(Tensor::flip_horizontal),
                };
                Ok([plain, flipped])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn batch(&self, picks: &[(usize, bool)]) -> Result<Batch> {
        let items: Vec<&Prepared> = picks.iter().map(|&(i, f)| &self.items[i][f as usize]).collect();
        Batch::collate(&items)
    }
}

fn open_log(path: &Path, append: bool) -> Result<std::fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Trains until `cfg.max_iterations`, starting from `resume` or a fresh
/// state. Checkpoints every `checkpoint_every` iterations and at the end
/// when a checkpoint path is configured.
pub fn fit(cfg: &TrainConfig, samples: &[DefocusSample], resume: Option<TrainState>) -> Result<FitOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let model = Model::new(cfg.model_config())?;
    let resumed = resume.is_some();
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::init(&model, cfg)?,
    };
    let data = PreparedSet::new(samples, cfg)?;
    let mut schedule = BatchSchedule::new(data.len(), cfg.batch_size, cfg.seed, cfg.augment);
    let mut log_file = match &cfg.log {
        Some(p) => Some(open_log(p, resumed)?),
        None => None,
    };
    let start = Instant::now();
    let mut log = Vec::new();
    while state.iteration < cfg.max_iterations {
        let batch = data.batch(&schedule.batch(state.iteration))?;
        let loss = train_step(&model, &mut state, &batch, cfg)?;
        let record = LogRecord {
            iteration: state.iteration,
            lr: cfg.lr,
            wall_time: start.elapsed().as_secs_f64(),
            loss,
        };
        if let (Some(f), Some(p)) = (log_file.as_mut(), cfg.log.as_ref()) {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        if cfg.log_every > 0 && state.iteration % cfg.log_every == 0 {
            log::info!(
                "iter {} loss {:.5} (defocus {:.5}, depth {:.5})",
                state.iteration,
                record.loss.total,
                record.loss.defocus_final,
                record.loss.depth_final
            );
        }
        log.push(record);
        if let Some(path) = &cfg.checkpoint {
            let periodic = cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0;
            if periodic || state.iteration == cfg.max_iterations {
                save_checkpoint(path, cfg, &state)?;
            }
        }
    }
    Ok(FitOutput { state, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::network::Ablation;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_iterations: 3,
            log_every: 0,
            ..TrainConfig::tiny(32)
        }
    }

    fn setup(cfg: &TrainConfig) -> (Model, TrainState, Batch) {
        let model = Model::new(cfg.model_config()).unwrap();
        let state = TrainState::init(&model, cfg).unwrap();
        let samples = synthetic_dataset(2, (32, 32), 1);
        let data = PreparedSet::new(&samples, cfg).unwrap();
        let batch = data.batch(&[(0, false), (1, true)]).unwrap();
        (model, state, batch)
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let cfg = TrainConfig { lr: 0.0, ..tiny_cfg() };
        let (model, mut state, batch) = setup(&cfg);
        let before = state.params.clone();
        train_step(&model, &mut state, &batch, &cfg).unwrap();
        assert_eq!(state.params, before);
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn zero_momentum_is_gradient_descent() {
        let mut params = ParamStore::new();
        params.insert(
            "w",
            Tensor::from_vec(crate::tensor::Shape::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap(),
        );
        let mut grads = params.zeros_like();
        grads.get_mut("w").unwrap().data_mut().copy_from_slice(&[0.5, 0.25]);
        let mut mom = params.zeros_like();
        for _ in 0..2 {
            sgd_update(&mut params, &mut mom, &grads, 0.1, 0.0, 0.0);
        }
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-15 && (w[1] + 2.05).abs() < 1e-15);
    }

    #[test]
    fn momentum_and_decay_formula() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(2.0));
        let mut grads = params.zeros_like();
        grads.get_mut("w").unwrap().data_mut()[0] = 1.0;
        let mut mom = params.zeros_like();
        sgd_update(&mut params, &mut mom, &grads, 0.1, 0.9, 0.01);
        // v = 1 + 0.01·2 = 1.02, θ = 2 − 0.102
        assert!((params.get("w").unwrap().data()[0] - 1.898).abs() < 1e-12);
        sgd_update(&mut params, &mut mom, &grads, 0.1, 0.9, 0.01);
        let v = 0.9 * 1.02 + 1.0 + 0.01 * 1.898;
        assert!((params.get("w").unwrap().data()[0] - (1.898 - 0.1 * v)).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_a_pure_function_of_iteration() {
        let mut a = BatchSchedule::new(5, 3, 9, true);
        let seq: Vec<_> = (0..7).map(|i| a.batch(i)).collect();
        let mut b = BatchSchedule::new(5, 3, 9, true);
        assert_eq!(b.batch(4), seq[4]);
        assert_eq!(b.batch(1), seq[1]);
        // Each epoch visits every sample exactly once.
        let flat: Vec<usize> = seq.iter().flatten().map(|p| p.0).collect();
        for epoch in flat.chunks(5).take(4) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, vec![0, 1, 2, 3, 4]);
        }
        assert!(BatchSchedule::new(5, 3, 9, false).batch(0).iter().all(|p| !p.1));
    }

    #[test]
    fn fit_is_deterministic_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synthetic_dataset(3, (32, 32), 2);
        let cfg = TrainConfig {
            log: Some(dir.path().join("train.jsonl")),
            ..tiny_cfg()
        };
        let a = fit(&cfg, &samples, None).unwrap();
        let b = fit(&cfg, &samples, None).unwrap();
        assert_eq!(
            a.log.iter().map(|r| r.loss.clone()).collect::<Vec<_>>(),
            b.log.iter().map(|r| r.loss.clone()).collect::<Vec<_>>()
        );
        assert_eq!(a.state, b.state);
        let text = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 3);
        let rec: LogRecord = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(rec.iteration, 3);
        assert_eq!(rec.loss, a.log[2].loss);
    }

    #[test]
    fn no_depth_head_logs_zero_depth_terms() {
        let samples = synthetic_dataset(2, (32, 32), 3);
        let cfg = tiny_cfg().with_ablation(Ablation::Fcn);
        let out = fit(&cfg, &samples, None).unwrap();
        assert!(out
            .log
            .iter()
            .all(|r| r.loss.depth_final == 0.0 && r.loss.depth_sides.is_empty()));
    }

    #[test]
    fn non_finite_loss_aborts_without_update() {
        let cfg = tiny_cfg();
        let (model, mut state, mut batch) = setup(&cfg);
        batch.depth.as_mut().unwrap().data_mut()[0] = f64::NAN;
        let before = state.clone();
        match train_step(&model, &mut state, &batch, &cfg) {
            Err(Error::NonFiniteLoss {
                iteration, batch_ids, ..
            }) => {
                assert_eq!(iteration, 0);
                assert_eq!(batch_ids, batch.ids);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(state, before);
    }
}
