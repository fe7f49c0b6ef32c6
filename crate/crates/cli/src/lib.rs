//! The `cns` command line: scene synthesis, refinement, training, evaluation,
//! ablation and gradient checks, each writing into one output directory.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use cns_core::bundle::{encode_raster, read_bundle, write_bundle, Dtype};
use cns_core::eval::{confusion, latent_separation, miou, refine_report, run_ablation, text_digest};
use cns_core::nncore::{gradcheck_suite, read_checkpoint, write_checkpoint, Checkpoint, Side};
use cns_core::scenesynth::{generate_scene, run_oracles};
use cns_core::seed;
use cns_core::training::{train, write_history_csv, Source, TrainData};
use thiserror::Error;

pub use config::{ConfigError, RunConfig};

/// Tolerance of the gradient check.
pub const GRADCHECK_LIMIT: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "cns", version, about = "Cross-modal noisy supervision lab")]
pub struct Cli {
    /// Worker thread cap; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key=value` file; `--key value` flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene bundle.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Oracle labels before and after in-mask voting.
    Refine {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Two-stage training on a bundle.
    Train {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint against a bundle's ground truth.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the ablation table.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Only the first configured seed.
        #[arg(long)]
        quick: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of both losses.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        batches: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// A run that completed but whose numbers fail a hard check.
#[derive(Debug, Error)]
#[error("numerical check failed: {0}")]
pub struct NumericalFailure(pub String);

/// 0 success, 1 validation error, 2 numerical abort.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err.chain().any(|c| {
        c.downcast_ref::<NumericalFailure>().is_some()
            || c.downcast_ref::<cns_core::Error>()
                .is_some_and(cns_core::Error::is_numerical)
    });
    if numerical {
        2
    } else {
        1
    }
}

/// Moves every `--key value` whose key belongs to the config schema out of
/// the argument list so clap only sees command flags.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let keys = RunConfig::keys();
    let (mut rest, mut overrides) = (Vec::new(), Vec::new());
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let name = arg.strip_prefix("--").map(|f| f.split_once('=').map_or(f, |(k, _)| k));
        match name {
            Some(k) if keys.contains(&k) => {
                let inline = arg.contains('=');
                overrides.push(arg);
                if !inline {
                    overrides.extend(it.next());
                }
            }
            _ => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("resolved.cfg"), &cfg.resolved())
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    cfg.scene.validate()?;
    let scene = generate_scene(&cfg.scene, seed::derive(cfg.seed, "scene", 0))?;
    let rendered = scene.render()?;
    let oracles = run_oracles(&scene, &rendered, &cfg.oracle, seed::derive(cfg.seed, "oracle", 0))?;
    prepare_out(out, cfg)?;
    let manifest = write_bundle(&scene, &oracles, out, cfg.seed, &text_digest(&cfg.resolved()))?;
    println!(
        "bundle {}: {} points, {} views, {} classes, {} correspondences",
        out.display(),
        manifest.points,
        manifest.views,
        manifest.classes,
        rendered.corr.len()
    );
    Ok(())
}

pub fn cmd_refine(cfg: &RunConfig, bundle: &Path, out: &Path) -> anyhow::Result<()> {
    let (scene, oracles, _) = read_bundle(bundle)?;
    let rendered = scene.render()?;
    let report = refine_report(&scene, &rendered, &oracles)?;
    prepare_out(out, cfg)?;
    for (k, labels) in report.refined.iter().enumerate() {
        let cam = &scene.cameras[k];
        let bytes = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        let path = out.join(format!("view_{k}.refined.bin"));
        fs::write(&path, encode_raster(cam.width, cam.height, 1, Dtype::I4, bytes))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    write_text(&out.join("refine_errors.csv"), &report.error_csv())?;
    write_text(&out.join("purity.csv"), &report.purity_csv())?;
    println!(
        "pixel error: raw {} refined {} over {} visible pixels",
        opt(report.raw_error_rate()),
        opt(report.refined_error_rate()),
        report.pixels()
    );
    let impure: u32 = report.views.iter().map(|v| v.impure_masks).sum();
    if impure > 0 {
        let worst = report.views.iter().map(|v| v.min_purity).fold(1.0, f64::min);
        println!("purity: {impure} masks mix classes, worst purity {worst:.3} (see purity.csv)");
    }
    Ok(())
}

fn train_data(bundle: &Path, cfg: &RunConfig) -> anyhow::Result<TrainData> {
    let (scene, oracles, _) = read_bundle(bundle)?;
    let rendered = scene.render()?;
    Ok(TrainData::new(&scene, &rendered, &oracles, cfg.train.anchor_source)?)
}

pub fn cmd_train(cfg: &RunConfig, bundle: &Path, out: &Path) -> anyhow::Result<()> {
    let data = train_data(bundle, cfg)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed::derive(cfg.seed, "train", 0);
    prepare_out(out, cfg)?;
    let state = train(&data, &tc)?;
    write_checkpoint(
        &out.join("model.ckpt"),
        &Checkpoint {
            bundle: state.bundle.clone(),
            seed: tc.seed,
            config_hash: text_digest(&cfg.resolved()),
        },
    )?;
    write_history_csv(&out.join("metrics.csv"), &state.history)?;
    let mut draws = String::from("network,source,count\n");
    for (slot, side) in ["2d", "3d"].iter().enumerate() {
        for s in Source::ALL {
            let _ = writeln!(draws, "{side},{},{}", s.name(), state.draw_counts[slot][s.index()]);
        }
    }
    write_text(&out.join("draws.csv"), &draws)?;
    if let Some(last) = state.history.last() {
        println!(
            "trained {} epochs: mIoU 2D {} 3D {}",
            last.epoch,
            opt(last.miou2d),
            opt(last.miou3d)
        );
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, bundle: &Path, checkpoint: &Path, out: &Path) -> anyhow::Result<()> {
    let data = train_data(bundle, cfg)?;
    let ckpt = read_checkpoint(checkpoint)?;
    let model = &ckpt.bundle;
    if model.embeddings.classes != data.classes {
        return Err(cns_core::Error::Shape(format!(
            "checkpoint predicts L={} classes but the bundle has L={}",
            model.embeddings.classes, data.classes
        ))
        .into());
    }
    let objects3d: Vec<u32> = {
        let (scene, _, _) = read_bundle(bundle)?;
        scene.object_ids().to_vec()
    };
    let mut csv = String::from("side,miou,error_rate,separation,iou\n");
    for (name, side, rows, gt, objects) in [
        (
            "2d",
            Side::TwoD,
            &data.pixel_descriptors,
            &data.gt_entries,
            &data.entry_objects,
        ),
        ("3d", Side::ThreeD, &data.point_descriptors, &data.gt_points, &objects3d),
    ] {
        let pred = model.predict(side, rows)?;
        let cm = confusion(&pred, gt, data.classes)?;
        let (iou, mean) = miou(&cm);
        let latent = model.latent(side, rows)?;
        let sep = latent_separation(&latent, model.head_f2d.outputs, objects).map(|(w, c)| w - c);
        let ious: Vec<String> = iou.iter().map(|x| opt(*x)).collect();
        let _ = writeln!(
            csv,
            "{name},{},{},{},{}",
            opt(mean),
            opt(cm.error_rate()),
            opt(sep),
            ious.join(";")
        );
        println!(
            "{name}: mIoU {} error {} separation {}",
            opt(mean),
            opt(cm.error_rate()),
            opt(sep)
        );
    }
    prepare_out(out, cfg)?;
    write_text(&out.join("eval.csv"), &csv)
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, quick: bool) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    if quick {
        cfg.seeds.truncate(1);
    }
    prepare_out(out, &cfg)?;
    let report = run_ablation(&cfg.suite())?;
    write_text(&out.join("ablation.csv"), &report.to_csv())?;
    let summary = report.summary();
    write_text(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    let failed = report.outcomes.iter().filter(|o| o.result.is_err()).count();
    if failed > 0 {
        bail!("{failed} of {} ablation runs failed", report.outcomes.len());
    }
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig, batches: usize, eps: f64, out: Option<&Path>) -> anyhow::Result<()> {
    if batches == 0 || !(eps > 0.0) {
        bail!("gradcheck needs batches >= 1 and eps > 0");
    }
    let checks = gradcheck_suite(cfg.seed, batches, eps)?;
    let mut csv = String::from("loss,batch,max_rel_error,worst_group,frozen_grad_max,checked\n");
    for c in &checks {
        let r = &c.report;
        let _ = writeln!(
            csv,
            "{},{},{:e},{},{:e},{}",
            c.loss, c.batch, r.max_rel_error, r.worst_group, r.frozen_grad_max, r.checked
        );
    }
    let mut failures = Vec::new();
    for loss in ["ce2d", "ce3d", "align"] {
        let of = || checks.iter().filter(|c| c.loss == loss).map(|c| &c.report);
        let worst = of().map(|r| r.max_rel_error).fold(0.0, f64::max);
        let frozen = of().map(|r| r.frozen_grad_max).fold(0.0, f64::max);
        println!("{loss:<6} max relative error {worst:.3e} over {batches} batches, frozen-anchor gradient {frozen:e}");
        if !(worst < GRADCHECK_LIMIT) {
            failures.push(format!("{loss} error {worst:e}"));
        }
        if frozen != 0.0 {
            failures.push(format!("{loss} reaches the frozen anchor ({frozen:e})"));
        }
    }
    if let Some(out) = out {
        prepare_out(out, cfg)?;
        write_text(&out.join("gradcheck.csv"), &csv)?;
    }
    if !failures.is_empty() {
        return Err(NumericalFailure(failures.join("; ")).into());
    }
    Ok(())
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("CNS_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn dispatch(cli: Cli, overrides: &[String]) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let load = |c: &ConfigArgs| RunConfig::load(c.config.as_deref(), overrides);
    match &cli.command {
        Command::Synth { out, cfg } => cmd_synth(&load(cfg)?, out),
        Command::Refine { bundle, out, cfg } => cmd_refine(&load(cfg)?, bundle, out),
        Command::Train { bundle, out, cfg } => cmd_train(&load(cfg)?, bundle, out),
        Command::Eval {
            bundle,
            checkpoint,
            out,
            cfg,
        } => cmd_eval(&load(cfg)?, bundle, checkpoint, out),
        Command::Ablate { out, quick, cfg } => cmd_ablate(&load(cfg)?, out, *quick),
        Command::Gradcheck { batches, eps, out, cfg } => cmd_gradcheck(&load(cfg)?, *batches, *eps, out.as_deref()),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    init_logging();
    let args: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let (rest, overrides) = split_overrides(args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
