//! Command-line driver for the crossmodal pipeline.
//!
//! One binary, five subcommands, one run directory:
//!
//! ```text
//! crossmodal gen-data --config run.toml --out runs/a          # <out>/data/
//! crossmodal pretrain --config run.toml --out runs/a          # pretrain.ckpt
//! crossmodal train    --config run.toml --out runs/a \
//!                     --checkpoint runs/a/pretrain.ckpt       # joint.ckpt
//! crossmodal render   --config run.toml --out runs/a \
//!                     --checkpoint runs/a/joint.ckpt ...      # render/*.png
//! crossmodal eval     --config run.toml --out runs/a \
//!                     --checkpoint runs/a/joint.ckpt \
//!                     --experiment matrix                     # eval/*.csv
//! ```
//!
//! Every command is reproducible from (config file, seed): reruns with
//! `--threads 1` produce byte-identical datasets, checkpoints, and reports,
//! and the parallel paths are seeded per task so other thread counts match
//! too. Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crossmodal::checkpoint::Checkpoint;
use crossmodal::dataset::{build_dataset, load_dataset, write_dataset, Dataset};
use crossmodal::diffusion::{encode_sources, render_conditioning, sample, NoiseSchedule};
use crossmodal::geometry::CameraPose;
use crossmodal::metrics::{eval_fusion, eval_matrix, eval_same_viewpoint_all, EvalReport};
use crossmodal::rng::{domains, stream_rng};
use crossmodal::training::{
    bootstrap_from_eo, pretrain_eo, train_joint, Adam, StepRecord, LOSS_CSV_HEADER,
};
use crossmodal::viz;
use crossmodal::{Error, Modality, ModuleRegistry, Result, RunConfig, Tensor};

#[derive(Parser)]
#[command(
    name = "crossmodal",
    version,
    about = "Multi-modal novel view synthesis: data generation, training, rendering, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural multi-modal dataset under <out>/data.
    GenData(GenDataArgs),
    /// Pretrain the EO encoder, point decoder, and EO denoiser.
    Pretrain(TrainArgs),
    /// Bootstrap the remaining modalities and train jointly.
    Train(TrainArgs),
    /// Synthesize one novel view and write sample/feature/truth images.
    Render(RenderArgs),
    /// Run an evaluation experiment and write CSV/JSON reports.
    Eval(EvalArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; defaults apply for missing keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the run seed from the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Run directory holding the dataset, checkpoints, and outputs.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Worker threads for data generation and evaluation; any value
    /// reproduces the --threads 1 results bit-exactly.
    #[arg(long, value_name = "N", default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override the number of scenes.
    #[arg(long, value_name = "N")]
    scenes: Option<usize>,
    /// Override the number of views per scene.
    #[arg(long, value_name = "N")]
    views: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Train to this total step count (default: the config's step target).
    #[arg(long, value_name = "N")]
    steps: Option<u64>,
    /// Resume from this checkpoint instead of starting fresh (pretrain), or
    /// the checkpoint to continue from (train, required).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Override the maximum source views per training task.
    #[arg(long, value_name = "N")]
    s_max: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint to render with.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Scene to render (default: the first test scene).
    #[arg(long, value_name = "ID")]
    scene: Option<usize>,
    /// Target view id within the scene.
    #[arg(long, value_name = "ID", default_value_t = 0)]
    target_view: usize,
    /// Source view ids, comma-separated (default: the views after the
    /// target, up to the config's eval_sources).
    #[arg(long, value_name = "IDS")]
    source_views: Option<String>,
    /// Source modalities, comma-separated; one entry is broadcast to all
    /// source views.
    #[arg(long, value_name = "TAGS", default_value = "eo")]
    source_modalities: String,
    /// Modality to synthesize.
    #[arg(long, value_name = "TAG", default_value = "eo")]
    target_modality: String,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Experiment {
    /// All 16 (input modality, output modality) pairs.
    Matrix,
    /// Fused multi-view sources against per-view singletons, paired.
    Fusion,
    /// Multi-sensor sources sharing a single viewpoint.
    SameViewpoint,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Which experiment to run.
    #[arg(long, value_enum)]
    experiment: Experiment,
    /// Largest fused source count for the fusion experiment (default: the
    /// config's s_max).
    #[arg(long, value_name = "N")]
    s_max: Option<usize>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage error.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

/// Print a line to stdout, tolerating a closed pipe (e.g. `| head`).
fn emit(text: std::fmt::Arguments<'_>) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

/// Config file plus flag overrides; flags win.
fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn data_dir(common: &CommonArgs) -> PathBuf {
    common.out.join("data")
}

/// Load the run's dataset and require it to match the active config's data
/// fields, so checkpoints and datasets from different runs cannot be mixed.
fn load_run_dataset(cfg: &RunConfig, common: &CommonArgs) -> Result<Dataset> {
    let dir = data_dir(common);
    let ds = load_dataset(&dir)?;
    if ds.meta.data_hash != cfg.data_hash() {
        return Err(Error::Config(format!(
            "dataset at {} was generated under data hash {} but the active config \
             hashes to {}; regenerate the dataset or fix the config",
            dir.display(),
            &ds.meta.data_hash[..12],
            &cfg.data_hash()[..12]
        )));
    }
    Ok(ds)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(n) = args.scenes {
        cfg.n_scenes = n;
    }
    if let Some(v) = args.views {
        cfg.views_per_scene = v;
    }
    cfg.validate()?;

    let ds = build_dataset(&cfg, args.common.threads)?;
    let dir = data_dir(&args.common);
    write_dataset(&ds, &dir)?;
    emit(format_args!(
        "wrote {} scenes x {} views x {} modalities to {} (train/val/test = {}/{}/{})",
        cfg.n_scenes,
        cfg.views_per_scene,
        Modality::ALL.len(),
        dir.display(),
        ds.meta.train_scenes.len(),
        ds.meta.val_scenes.len(),
        ds.meta.test_scenes.len(),
    ));
    Ok(())
}

/// Append the records to a fresh or existing loss CSV.
fn write_loss_csv(path: &Path, records: &[StepRecord], append: bool) -> Result<()> {
    let mut text = if append && path.exists() {
        fs::read_to_string(path)?
    } else {
        format!("{LOSS_CSV_HEADER}\n")
    };
    for r in records {
        let _ = writeln!(text, "{}", r.csv_row());
    }
    fs::write(path, text)?;
    Ok(())
}

/// Progress reporting shared by both training phases: a coarse moving
/// average to stderr every `every` steps.
fn progress(total: u64, every: u64) -> impl FnMut(&StepRecord) {
    let mut recent: Vec<f64> = Vec::new();
    move |r: &StepRecord| {
        recent.push(r.loss);
        if (r.step + 1) % every == 0 || r.step + 1 == total {
            let ma = recent.iter().sum::<f64>() / recent.len() as f64;
            eprintln!("step {:>6}/{total}  loss[recent] {ma:.4}", r.step + 1);
            recent.clear();
        }
    }
}

fn cmd_pretrain(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.s_max {
        cfg.s_max = s;
    }
    cfg.validate()?;
    let ds = load_run_dataset(&cfg, &args.common)?;
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps)?;

    let (mut registry, mut opt, start) = match &args.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path, &cfg)?;
            if ckpt.joint_steps_done > 0 {
                return Err(Error::Config(
                    "checkpoint already entered joint training; use `train`".into(),
                ));
            }
            (ckpt.registry, ckpt.optimizer, ckpt.pretrain_steps_done)
        }
        None => (ModuleRegistry::init_eo(&cfg), Adam::from_config(&cfg), 0),
    };
    let total = args.steps.unwrap_or(cfg.pretrain_steps as u64);
    if start >= total {
        return Err(Error::InvalidArgument(format!(
            "checkpoint already has {start} pretraining steps; raise --steps past it"
        )));
    }

    let mut report = progress(total, 100);
    let records = pretrain_eo(
        &mut registry,
        &mut opt,
        &ds,
        &cfg,
        &sched,
        start,
        total - start,
        &mut report,
    )?;
    write_loss_csv(
        &args.common.out.join("pretrain_loss.csv"),
        &records,
        start > 0,
    )?;

    let path = args.common.out.join("pretrain.ckpt");
    Checkpoint::new(&cfg, registry, opt, total, 0).save(&path)?;
    emit(format_args!(
        "pretrained to step {total}, final loss {:.4}, wrote {}",
        records.last().map(|r| r.loss).unwrap_or(f64::NAN),
        path.display()
    ));
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.s_max {
        cfg.s_max = s;
    }
    cfg.validate()?;
    let ds = load_run_dataset(&cfg, &args.common)?;
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps)?;

    let ckpt_path = args.checkpoint.as_ref().ok_or_else(|| {
        Error::InvalidArgument("train needs --checkpoint (the pretrained EO state)".into())
    })?;
    let ckpt = Checkpoint::load(ckpt_path, &cfg)?;
    let (mut registry, mut opt) = (ckpt.registry, ckpt.optimizer);
    if registry.modalities().len() == 1 {
        bootstrap_from_eo(&mut registry)?;
    }
    let start = ckpt.joint_steps_done;
    let total = args.steps.unwrap_or(cfg.joint_steps as u64);
    if start >= total {
        return Err(Error::InvalidArgument(format!(
            "checkpoint already has {start} joint steps; raise --steps past it"
        )));
    }

    let mut report = progress(total, 100);
    let records = train_joint(
        &mut registry,
        &mut opt,
        &ds,
        &cfg,
        &sched,
        start,
        total - start,
        &mut report,
    )?;
    write_loss_csv(&args.common.out.join("joint_loss.csv"), &records, start > 0)?;

    let path = args.common.out.join("joint.ckpt");
    Checkpoint::new(&cfg, registry, opt, ckpt.pretrain_steps_done, total).save(&path)?;
    emit(format_args!(
        "jointly trained to step {total}, final loss {:.4}, wrote {}",
        records.last().map(|r| r.loss).unwrap_or(f64::NAN),
        path.display()
    ));
    Ok(())
}

fn parse_id_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad view id {s:?}")))
        })
        .collect()
}

/// Write both export forms of an image: lossless 8-bit PNG for inspection
/// and the raw little-endian f32 blob.
fn export_image(dir: &Path, stem: &str, img: &Tensor) -> Result<()> {
    viz::save_png(img, &dir.join(format!("{stem}.png")))?;
    let mut bytes = Vec::with_capacity(img.numel() * 4);
    for v in img.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    cfg.validate()?;
    let ds = load_run_dataset(&cfg, &args.common)?;
    let ckpt = Checkpoint::load(&args.checkpoint, &cfg)?;
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps)?;

    let scene = match args.scene {
        Some(s) => s,
        None => *ds.meta.test_scenes.first().ok_or_else(|| {
            Error::Data("dataset has no test scenes; pass --scene explicitly".into())
        })?,
    };
    if scene >= ds.scenes.len() || args.target_view >= ds.views_per_scene() {
        return Err(Error::InvalidArgument(format!(
            "scene {scene} view {} is outside the dataset ({} scenes x {} views)",
            args.target_view,
            ds.scenes.len(),
            ds.views_per_scene()
        )));
    }
    let source_views = match &args.source_views {
        Some(text) => parse_id_list(text)?,
        None => (0..ds.views_per_scene())
            .filter(|&v| v != args.target_view)
            .take(cfg.eval_sources)
            .collect(),
    };
    if source_views.is_empty() || source_views.iter().any(|&v| v >= ds.views_per_scene()) {
        return Err(Error::InvalidArgument(
            "source views must be nonempty and inside the dataset".into(),
        ));
    }
    let mut source_modalities: Vec<Modality> = args
        .source_modalities
        .split(',')
        .map(|s| Modality::from_str(s.trim()))
        .collect::<Result<_>>()?;
    if source_modalities.len() == 1 {
        source_modalities = vec![source_modalities[0]; source_views.len()];
    }
    if source_modalities.len() != source_views.len() {
        return Err(Error::InvalidArgument(format!(
            "{} source modalities for {} source views",
            source_modalities.len(),
            source_views.len()
        )));
    }
    let target_modality = Modality::from_str(&args.target_modality)?;

    let sources: Vec<(&Tensor, CameraPose, Modality)> = source_views
        .iter()
        .zip(&source_modalities)
        .map(|(&v, &m)| {
            let r = ds.record(scene, v, m);
            (r.image, r.pose, m)
        })
        .collect();
    let volumes = encode_sources(&ckpt.registry, &cfg, &sources)?;
    let target_pose = ds.pose(scene, args.target_view);

    // The sampler renders its conditioning from this stream first, so a
    // clone reproduces the exact feature image the sample was driven by.
    let mut rng = stream_rng(cfg.seed, domains::SAMPLER, 0);
    let mut feat_rng = rng.clone();
    let feature = render_conditioning(
        &ckpt.registry,
        &cfg,
        &volumes,
        &target_pose,
        target_modality,
        &mut feat_rng,
    )?;
    let out = sample(
        &ckpt.registry,
        &cfg,
        &sched,
        &volumes,
        &target_pose,
        target_modality,
        &mut rng,
    )?;
    let truth = ds.record(scene, args.target_view, target_modality).image;

    let dir = args.common.out.join("render");
    fs::create_dir_all(&dir)?;
    export_image(&dir, "sample", &out)?;
    export_image(&dir, "feature", &viz::feature_to_rgb(&feature.data)?)?;
    export_image(&dir, "truth", truth)?;
    let panels = viz::montage(&[sources[0].0, &feature.data, &out, truth])?;
    viz::save_png(&panels, &dir.join("montage.png"))?;
    emit(format_args!(
        "rendered scene {scene} view {} as {} from {:?} sources; wrote {}",
        args.target_view,
        target_modality,
        source_modalities.iter().map(|m| m.tag()).collect::<Vec<_>>(),
        dir.display()
    ));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    cfg.validate()?;
    let ds = load_run_dataset(&cfg, &args.common)?;
    let ckpt = Checkpoint::load(&args.checkpoint, &cfg)?;
    if ckpt.registry.modalities().len() < Modality::ALL.len() {
        return Err(Error::Config(
            "evaluation needs a jointly trained checkpoint with all modalities".into(),
        ));
    }
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps)?;
    let dir = args.common.out.join("eval");
    let threads = args.common.threads;
    let n_tasks = cfg.eval_tasks;

    let (stem, report) = match args.experiment {
        Experiment::Matrix => (
            "matrix",
            eval_matrix(&ckpt.registry, &ds, &cfg, &sched, n_tasks, threads)?,
        ),
        Experiment::Fusion => {
            let s_hi = args
                .s_max
                .unwrap_or(cfg.s_max)
                .min(ds.views_per_scene() - 1);
            if s_hi < 2 {
                return Err(Error::InvalidArgument(
                    "fusion needs s_max >= 2 and at least 3 views per scene".into(),
                ));
            }
            let mut rows = Vec::new();
            for s in 2..=s_hi {
                rows.extend(
                    eval_fusion(&ckpt.registry, &ds, &cfg, &sched, s, n_tasks, threads)?.rows,
                );
            }
            (
                "fusion",
                EvalReport {
                    experiment: "fusion".into(),
                    rows,
                },
            )
        }
        Experiment::SameViewpoint => (
            "same_viewpoint",
            eval_same_viewpoint_all(&ckpt.registry, &ds, &cfg, &sched, n_tasks, threads)?,
        ),
    };
    report.write_files(&dir, stem)?;
    emit(format_args!("{}", report.to_csv().trim_end()));
    emit(format_args!(
        "wrote {} and {}",
        dir.join(format!("{stem}.csv")).display(),
        dir.join(format!("{stem}.json")).display()
    ));
    Ok(())
}
