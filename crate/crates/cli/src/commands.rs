use std::path::{Path, PathBuf};

use dbd_core::blocks::{self, BlockKind};
use dbd_core::data::{load_dataset, read_image, synthetic_dataset, write_dataset, write_gray_png, DefocusSample};
use dbd_core::engine::{fit, gamma_manifest, load_checkpoint, predict_full_resolution, run_eval, TrainConfig};
use dbd_core::error::{Error, Result};
use dbd_core::io::{pfm, write_atomic};
use dbd_core::metrics::{evaluate_dirs, EvalOptions, MetricReport};

use crate::{EvalArgs, GammaSweepArgs, InferArgs, RfTableArgs, SynthArgs, TrainArgs};

/// Stable short tag for the error line printed on failure.
pub fn error_code(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::BranchSpec(_) => "branch-spec",
        Error::Config(_) => "config",
        Error::InvalidArgument(_) => "invalid-argument",
        Error::NonBinaryMask(_) => "non-binary-mask",
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
        Error::Image { .. } => "image",
        Error::MissingGroundTruth { .. } => "missing-ground-truth",
        Error::MissingDepth { .. } => "missing-depth",
        Error::UnmatchedStems(_) => "unmatched-stems",
        Error::NonFiniteLoss { .. } => "non-finite-loss",
        Error::Checkpoint(_) => "checkpoint",
    }
}

/// `<root>/<split>` when that directory exists, else `root` itself.
fn split_dir(root: &Path, split: &str) -> PathBuf {
    let sub = root.join(split);
    if sub.is_dir() {
        sub
    } else {
        root.to_path_buf()
    }
}

fn load_split(root: &Path, split: &str) -> Result<Vec<DefocusSample>> {
    if !root.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let dir = split_dir(root, split);
    let samples = load_dataset(&dir, None)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no images under {}",
            dir.join("image").display()
        )));
    }
    log::info!("{} samples from {}", samples.len(), dir.display());
    Ok(samples)
}

fn base_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

/// Points checkpoint and log at `out` and stores the resolved config there.
fn route_outputs(cfg: &mut TrainConfig, out: &Path) -> Result<()> {
    cfg.checkpoint = Some(out.join("model.ckpt"));
    cfg.log = Some(out.join("train_log.jsonl"));
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let resume = match &a.ckpt {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let mut cfg = match (&a.config, &resume) {
        (None, Some(ck)) => ck.config.clone(),
        _ => base_config(a.config.as_deref())?,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(g) = a.gamma {
        cfg.loss.gamma = g;
    }
    match &a.out {
        Some(out) => route_outputs(&mut cfg, out)?,
        None if cfg.checkpoint.is_none() => {
            return Err(Error::InvalidArgument(
                "no checkpoint destination: pass --out or set `checkpoint`".into(),
            ))
        }
        None => {}
    }
    cfg.validate()?;
    let samples = load_split(&a.data, "train")?;
    let out = fit(&cfg, &samples, resume.map(|c| c.state))?;
    if let Some(last) = out.log.last() {
        log::info!(
            "finished at iteration {} with loss {:.5}",
            last.iteration,
            last.loss.total
        );
    }
    println!("{}", cfg.checkpoint.as_ref().expect("checkpoint path set").display());
    Ok(())
}

fn emit_report(report: &MetricReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(dir) => {
            write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
            write_atomic(&dir.join("pr_curve.csv"), report.curve_csv().as_bytes())?;
            println!(
                "f_beta {:.4} mae {:.4} images {}",
                report.f_beta, report.mae, report.n_images
            );
        }
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let report = match (&a.ckpt, &a.predictions) {
        (_, Some(pred)) => evaluate_dirs(pred, &split_dir(&a.data, "test").join("gt"), EvalOptions::default())?,
        (Some(ckpt), None) => {
            let samples = load_split(&a.data, "test")?;
            run_eval(ckpt, &samples, EvalOptions::default())?
        }
        (None, None) => unreachable!("clap requires one of --ckpt or a prediction directory"),
    };
    emit_report(&report, a.out.as_deref())
}

pub fn infer(a: InferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let model = ckpt.model()?;
    for path in &a.images {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no file stem in {}", path.display())))?;
        let image = read_image(path)?;
        let (defocus, depth) = predict_full_resolution(&model, &ckpt.state.params, &image)?;
        let png = a.out.join(format!("{stem}_defocus.png"));
        write_gray_png(&png, &defocus)?;
        match depth {
            Some(d) => pfm::write(&a.out.join(format!("{stem}_depth.pfm")), &d)?,
            None => log::warn!("model has no depth head; skipped depth for {stem}"),
        }
        println!("{}", png.display());
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.n == 0 || a.size == 0 {
        return Err(Error::InvalidArgument("--n and --size must be positive".into()));
    }
    write_dataset(&a.out, &synthetic_dataset(a.n, (a.size, a.size), a.seed))?;
    println!("{} scenes written to {}", a.n, a.out.display());
    Ok(())
}

pub fn rf_table(a: RfTableArgs) -> Result<()> {
    print!("{}", blocks::rf_table(BlockKind::parse(&a.block)?)?);
    Ok(())
}

pub fn gamma_sweep(a: GammaSweepArgs) -> Result<()> {
    let mut base = base_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        base.seed = s;
    }
    let train = load_split(&a.data, "train")?;
    let test = load_split(&a.data, "test")?;
    let mut runs = gamma_manifest(&base);
    if !a.gamma.is_empty() {
        runs = a
            .gamma
            .iter()
            .map(|&g| {
                let mut c = base.clone();
                c.loss.gamma = g;
                (g, c)
            })
            .collect();
    }
    let mut table = String::from("gamma,f_beta,mae\n");
    for (gamma, mut cfg) in runs {
        let dir = a.out.join(format!("gamma_{gamma}"));
        route_outputs(&mut cfg, &dir)?;
        cfg.validate()?;
        log::info!("training with gamma {gamma}");
        fit(&cfg, &train, None)?;
        let report = run_eval(cfg.checkpoint.as_ref().expect("routed"), &test, EvalOptions::default())?;
        write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
        table.push_str(&format!("{gamma},{},{}\n", report.f_beta, report.mae));
    }
    write_atomic(&a.out.join("gamma_sweep.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
