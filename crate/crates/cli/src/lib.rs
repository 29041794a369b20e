//! `scenebooth` command line tool: dataset preparation, two-stage training,
//! end-to-end generation, subject dragging, and evaluation.
//!
//! Every command that owns a run configuration writes the resolved TOML next
//! to its outputs, and checkpoints embed the configuration plus its hash, so
//! downstream commands (generate, drag, evaluate) reconstruct the models from
//! the checkpoints alone. Commands are reproducible: config plus seed fully
//! determines every machine-readable output. Exit codes: 0 on success, 1 for
//! runtime failures (divergence, bad data), 2 for usage and IO errors.

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use scenebooth_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use scenebooth_core::config::RunConfig;
use scenebooth_core::data::coco::ingest_coco;
use scenebooth_core::data::dataset::{load_dataset, save_dataset};
use scenebooth_core::data::synth::{self, SyntheticGrammar, ORACLE_TOL};
use scenebooth_core::data::{extract_subject, filter_and_split, SceneSample};
use scenebooth_core::encoders::VisionEncoder;
use scenebooth_core::imageio::{load_mask_png, load_png, save_mask_png, save_png, Image, Mask};
use scenebooth_core::layout::{BBox, Layout};
use scenebooth_core::layoutgen::{
    sample_layouts, train_layout_steps, LayoutDenoiser, LayoutTrainConfig,
};
use scenebooth_core::metrics::{
    average_precision, coco_thresholds, frechet_distance, max_iou_at_k, oracle_detect, ApImage,
    GaussianSummary,
};
use scenebooth_core::nn::Adam;
use scenebooth_core::paintnet::{
    generate, train_paint_base_steps, train_paintnet_steps, PaintModel, PaintTrainConfig,
};
use scenebooth_core::rng::fnv1a;
use scenebooth_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

/// Environment variable that overrides the dataset root everywhere.
pub const DATA_ENV: &str = "SCENEBOOTH_DATA";

/// Feature extractor pinned for toy-FID so reports stay comparable across
/// model configurations.
const FID_FEATURE_DIM: usize = 32;
const FID_GRID: usize = 4;
const FID_ENCODER_SEED: u64 = 0xF1D;

#[derive(Parser)]
#[command(name = "scenebooth", version, about = "Subject-preserved scene generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val/test dataset from the scene grammar.
    SynthData(SynthDataArgs),
    /// Ingest COCO-format annotation JSON into a dataset directory.
    IngestCoco(IngestCocoArgs),
    /// Train the layout diffusion model.
    TrainLayout(TrainLayoutArgs),
    /// Train the background painter (base phase, then adapter phase).
    TrainPaint(TrainPaintArgs),
    /// Sample layouts for a subject and paint composed scenes.
    Generate(GenerateArgs),
    /// Move the subject of a previous generation and repaint the background.
    Drag(DragArgs),
    /// Score layout and painting checkpoints on the test split.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct ConfigOpts {
    /// Run configuration TOML (overrides --profile).
    #[arg(long, value_name = "PATH", conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in profile: desk, paper, or smoke.
    #[arg(long, value_name = "NAME", default_value = "desk")]
    profile: String,
    /// Master seed applied to the run and every training stage.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::named_profile(&self.profile)?,
        };
        if let Some(seed) = self.seed {
            cfg.apply_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthDataArgs {
    #[command(flatten)]
    cfg: ConfigOpts,
    /// Dataset root to create; defaults to the config's data root.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestCocoArgs {
    #[command(flatten)]
    cfg: ConfigOpts,
    /// COCO instances JSON for the training source.
    #[arg(long, value_name = "PATH")]
    instances: PathBuf,
    /// COCO captions JSON for the training source.
    #[arg(long, value_name = "PATH")]
    captions: PathBuf,
    /// Instances JSON of the validation source (becomes the test split).
    #[arg(long, value_name = "PATH", requires = "val_captions")]
    val_instances: Option<PathBuf>,
    /// Captions JSON of the validation source.
    #[arg(long, value_name = "PATH", requires = "val_instances")]
    val_captions: Option<PathBuf>,
    /// Dataset root to create; defaults to the config's data root.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainLayoutArgs {
    #[command(flatten)]
    cfg: ConfigOpts,
    /// Dataset root holding train/; defaults to the config's data root.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output directory for checkpoint, loss log, and resolved config.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from an earlier layout checkpoint instead of starting fresh.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PaintPhase {
    /// Caption-conditioned base denoiser, trained from scratch.
    Base,
    /// Grounded adapters over a frozen base trunk.
    Adapters,
}

#[derive(Args)]
struct TrainPaintArgs {
    #[command(flatten)]
    cfg: ConfigOpts,
    #[arg(long, value_enum)]
    phase: PaintPhase,
    /// Dataset root holding train/; defaults to the config's data root.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output directory for checkpoint, loss log, and resolved config.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Base-phase checkpoint to start the adapter phase from.
    #[arg(long, value_name = "CKPT", conflicts_with = "resume")]
    base: Option<PathBuf>,
    /// Continue from an earlier checkpoint of the same phase.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Subject image (PNG).
    #[arg(long, value_name = "PATH")]
    subject: PathBuf,
    /// Optional subject silhouette mask (PNG); white pixels are the subject.
    #[arg(long, value_name = "PATH")]
    alpha: Option<PathBuf>,
    /// Scene caption.
    #[arg(long)]
    caption: String,
    /// Comma-separated object phrases; mark the subject with a trailing '*',
    /// e.g. "dog*,grass,sky".
    #[arg(long)]
    phrases: String,
    /// Layout model checkpoint.
    #[arg(long, value_name = "CKPT")]
    layout_ckpt: PathBuf,
    /// Painter checkpoint.
    #[arg(long, value_name = "CKPT")]
    paint_ckpt: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of layouts to sample.
    #[arg(long, value_name = "INT", default_value_t = 1)]
    k: usize,
    #[arg(long, value_name = "INT", default_value_t = 0)]
    seed: u64,
    /// Paint every sampled layout instead of only the first.
    #[arg(long)]
    emit_all: bool,
}

#[derive(Args)]
struct DragArgs {
    /// record.json of a previous generate or drag run.
    #[arg(long, value_name = "PATH")]
    record: PathBuf,
    /// Horizontal translation in normalized canvas units.
    #[arg(long, value_name = "FLOAT", allow_hyphen_values = true)]
    dx: f32,
    /// Vertical translation in normalized canvas units.
    #[arg(long, value_name = "FLOAT", allow_hyphen_values = true)]
    dy: f32,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Sampling seed; defaults to the record's seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigOpts,
    /// Dataset root holding test/; defaults to the config's data root.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Layout model checkpoint.
    #[arg(long, value_name = "CKPT")]
    layout_ckpt: PathBuf,
    /// Painter checkpoint; without it the report skips toy-FID and AP.
    #[arg(long, value_name = "CKPT")]
    paint_ckpt: Option<PathBuf>,
    /// Output directory for report.json and the resolved config.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Layouts per sample; defaults to the config's eval.k.
    #[arg(long, value_name = "INT")]
    k: Option<usize>,
    /// Worker threads; a runtime knob only, results do not depend on it.
    #[arg(long, value_name = "INT")]
    workers: Option<usize>,
    /// Score the ground-truth layouts as if generated (sanity baseline).
    #[arg(long)]
    oracle_layouts: bool,
}

/// Entry point for the binary; returns the process exit code.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => cmd_synth_data(a),
        Command::IngestCoco(a) => cmd_ingest_coco(a),
        Command::TrainLayout(a) => cmd_train_layout(a),
        Command::TrainPaint(a) => cmd_train_paint(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Drag(a) => cmd_drag(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

/// 2 for anything the caller can fix by changing arguments or files,
/// 1 for failures of the run itself.
pub fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io { .. }
        | Error::Schema { .. }
        | Error::InvalidArgument(_)
        | Error::Json(_)
        | Error::Image(_)
        | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

fn resolve_data_root(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Ok(v) = std::env::var(DATA_ENV) {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    match flag {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(&cfg.data.root),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path.display(), e))
}

// ---------------------------------------------------------------- datasets

fn cmd_synth_data(a: SynthDataArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let root = resolve_data_root(a.out.as_deref(), &cfg);
    let grammar = SyntheticGrammar {
        canvas: cfg.data.canvas,
        things_min: cfg.data.things_min,
        things_max: cfg.data.things_max,
        ..SyntheticGrammar::default()
    };
    let n = (cfg.data.train, cfg.data.val, cfg.data.test);
    // Disjoint index ranges of one generator stream keep the splits
    // independent and individually reproducible.
    let train = grammar.generate_batch(cfg.seed, 0, n.0)?;
    let val = grammar.generate_batch(cfg.seed, n.0 as u64, n.1)?;
    let test = grammar.generate_batch(cfg.seed, (n.0 + n.1) as u64, n.2)?;
    save_dataset(&root.join("train"), &train)?;
    save_dataset(&root.join("val"), &val)?;
    save_dataset(&root.join("test"), &test)?;
    cfg.save(&root.join("config.toml"))?;
    println!(
        "wrote {} train / {} val / {} test samples ({}x{} px) to {}",
        n.0,
        n.1,
        n.2,
        cfg.data.canvas,
        cfg.data.canvas,
        root.display()
    );
    Ok(())
}

fn cmd_ingest_coco(a: IngestCocoArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let root = resolve_data_root(a.out.as_deref(), &cfg);
    let (mut samples, train_stats) = ingest_coco(&a.instances, &a.captions, cfg.seed)?;
    let train_source = samples.len();
    let val_stats = match (&a.val_instances, &a.val_captions) {
        (Some(vi), Some(vc)) => {
            let (mut vs, stats) = ingest_coco(vi, vc, cfg.seed)?;
            samples.append(&mut vs);
            Some(stats)
        }
        _ => None,
    };
    let split = filter_and_split(&samples, train_source, cfg.seed);
    let pick = |idx: &[usize]| -> Vec<SceneSample> {
        idx.iter().map(|&i| samples[i].clone()).collect()
    };
    save_dataset(&root.join("train"), &pick(&split.train))?;
    save_dataset(&root.join("val"), &pick(&split.val))?;
    save_dataset(&root.join("test"), &pick(&split.test))?;
    cfg.save(&root.join("config.toml"))?;
    write_json(
        &root.join("ingest_stats.json"),
        &serde_json::json!({
            "train_source": train_stats,
            "val_source": val_stats,
            "split": {
                "train": split.train.len(),
                "val": split.val.len(),
                "test": split.test.len(),
            },
        }),
    )?;
    println!(
        "ingested {} samples -> {} train / {} val / {} test at {}",
        samples.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        root.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- training

/// JSON-lines loss log; one line per optimizer step. `wall_s` is the elapsed
/// time of this invocation when the step's chunk finished, so it is monotone
/// but only chunk-granular.
struct StepLogger {
    path: PathBuf,
    file: fs::File,
    started: Instant,
}

impl StepLogger {
    fn open(path: PathBuf, append: bool) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(StepLogger { path, file, started: Instant::now() })
    }

    fn log_chunk(&mut self, first_step: u64, losses: &[f32]) -> Result<()> {
        let wall = self.started.elapsed().as_secs_f64();
        let mut buf = String::new();
        for (i, loss) in losses.iter().enumerate() {
            let line = serde_json::json!({
                "step": first_step + i as u64,
                "loss": loss,
                "wall_s": wall,
            });
            buf.push_str(&line.to_string());
            buf.push('\n');
        }
        self.file
            .write_all(buf.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn require_model(meta: &CheckpointMeta, expected: &str, path: &Path) -> Result<()> {
    if meta.model != expected {
        return Err(Error::Checkpoint(format!(
            "{} holds model {:?}, expected {expected:?}",
            path.display(),
            meta.model
        )));
    }
    Ok(())
}

fn echoed_config(meta: &CheckpointMeta, path: &Path) -> Result<RunConfig> {
    serde_json::from_value(meta.config.clone()).map_err(|e| {
        Error::Checkpoint(format!("{}: embedded config does not parse: {e}", path.display()))
    })
}

fn require_same<T: PartialEq>(section: &str, checkpoint: &T, current: &T) -> Result<()> {
    if checkpoint != current {
        return Err(Error::InvalidArgument(format!(
            "cannot resume: {section} in the checkpoint differs from the current config"
        )));
    }
    Ok(())
}

/// Train sections may extend `steps` on resume; everything else must match.
fn require_same_but_steps<T, F>(section: &str, a: &T, b: &T, zero_steps: F) -> Result<()>
where
    T: Clone + PartialEq,
    F: Fn(&mut T),
{
    let mut a = a.clone();
    let mut b = b.clone();
    zero_steps(&mut a);
    zero_steps(&mut b);
    require_same(section, &a, &b)
}

fn cmd_train_layout(a: TrainLayoutArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    create_dir(&a.out)?;
    cfg.save(&a.out.join("config.toml"))?;
    let hash = cfg.hash();
    let root = resolve_data_root(a.data.as_deref(), &cfg);
    let train = load_dataset(&root.join("train"))?;

    let (mut model, mut adam, mut done) = match &a.resume {
        Some(path) => {
            let (meta, store, opt) = load_checkpoint::<f32>(path)?;
            require_model(&meta, "layout", path)?;
            let prev = echoed_config(&meta, path)?;
            require_same("layout_model", &prev.layout_model, &cfg.layout_model)?;
            require_same_but_steps(
                "layout_train",
                &prev.layout_train,
                &cfg.layout_train,
                |t: &mut LayoutTrainConfig| t.steps = 0,
            )?;
            let adam = opt.ok_or_else(|| {
                Error::Checkpoint(format!("{}: no optimizer state; cannot resume", path.display()))
            })?;
            let model = LayoutDenoiser::from_store(cfg.layout_model.clone(), store)?;
            (model, adam, meta.step as usize)
        }
        None => (
            LayoutDenoiser::<f32>::new(cfg.layout_model.clone(), cfg.layout_train.seed)?,
            Adam::new(cfg.layout_train.lr),
            0,
        ),
    };

    let total = cfg.layout_train.steps;
    let ckpt = a.out.join("layout.ckpt");
    if done >= total {
        save_checkpoint(&ckpt, "layout", &cfg, hash, done as u64, &model.store, Some(&adam))?;
        println!("layout checkpoint already at step {done} of {total}; nothing to train");
        return Ok(());
    }
    let mut logger = StepLogger::open(a.out.join("layout_loss.jsonl"), a.resume.is_some())?;
    while done < total {
        let n = (total - done).min(cfg.checkpoint_every.max(1));
        let tc = LayoutTrainConfig { steps: n, ..cfg.layout_train.clone() };
        let log = train_layout_steps(&mut model, &mut adam, &train, &tc, done as u64)?;
        logger.log_chunk(done as u64, &log.losses)?;
        done += n;
        save_checkpoint(&ckpt, "layout", &cfg, hash, done as u64, &model.store, Some(&adam))?;
        println!("layout step {done}/{total}  loss {:.5}", log.losses.last().copied().unwrap_or(f32::NAN));
    }
    println!("saved {}", ckpt.display());
    Ok(())
}

fn cmd_train_paint(a: TrainPaintArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    create_dir(&a.out)?;
    cfg.save(&a.out.join("config.toml"))?;
    let hash = cfg.hash();
    let root = resolve_data_root(a.data.as_deref(), &cfg);
    let train = load_dataset(&root.join("train"))?;

    let (model_name, ckpt_name, log_name, tc_all) = match a.phase {
        PaintPhase::Base => ("paint.base", "paint_base.ckpt", "paint_base_loss.jsonl", cfg.paint_train_base.clone()),
        PaintPhase::Adapters => ("paint.full", "paint.ckpt", "paint_loss.jsonl", cfg.paint_train_adapters.clone()),
    };
    let zero = |t: &mut PaintTrainConfig| t.steps = 0;

    let (mut model, mut adam, mut done) = match (&a.resume, &a.base, a.phase) {
        (Some(path), _, phase) => {
            let (meta, store, opt) = load_checkpoint::<f32>(path)?;
            require_model(&meta, model_name, path)?;
            let prev = echoed_config(&meta, path)?;
            require_same("paint_model", &prev.paint_model, &cfg.paint_model)?;
            let (prev_tc, cur_tc) = match phase {
                PaintPhase::Base => (&prev.paint_train_base, &cfg.paint_train_base),
                PaintPhase::Adapters => (&prev.paint_train_adapters, &cfg.paint_train_adapters),
            };
            require_same_but_steps("paint_train", prev_tc, cur_tc, zero)?;
            let adam = opt.ok_or_else(|| {
                Error::Checkpoint(format!("{}: no optimizer state; cannot resume", path.display()))
            })?;
            // Frozen flags ride in the checkpoint, so a resumed adapter phase
            // keeps its trained control branch; no re-adoption here.
            let model = PaintModel::from_store(cfg.paint_model.clone(), store)?;
            (model, adam, meta.step as usize)
        }
        (None, Some(path), PaintPhase::Adapters) => {
            let (meta, store, _) = load_checkpoint::<f32>(path)?;
            require_model(&meta, "paint.base", path)?;
            let prev = echoed_config(&meta, path)?;
            require_same("paint_model", &prev.paint_model, &cfg.paint_model)?;
            let mut model = PaintModel::from_store(cfg.paint_model.clone(), store)?;
            model.store.freeze_prefix("base.");
            model.adopt_base_into_control();
            (model, Adam::new(tc_all.lr), 0)
        }
        (None, Some(_), PaintPhase::Base) => {
            return Err(Error::InvalidArgument(
                "--base applies to the adapter phase only".into(),
            ));
        }
        (None, None, PaintPhase::Adapters) => {
            return Err(Error::InvalidArgument(
                "adapter phase needs --base CKPT to start or --resume CKPT to continue".into(),
            ));
        }
        (None, None, PaintPhase::Base) => (
            PaintModel::<f32>::new(cfg.paint_model.clone(), cfg.paint_train_base.seed)?,
            Adam::new(cfg.paint_train_base.lr),
            0,
        ),
    };

    let frozen0 = model.store.checksum_frozen();
    if a.phase == PaintPhase::Adapters {
        println!("frozen trunk checksum {frozen0:016x}");
    }
    let total = tc_all.steps;
    let ckpt = a.out.join(ckpt_name);
    if done >= total {
        save_checkpoint(&ckpt, model_name, &cfg, hash, done as u64, &model.store, Some(&adam))?;
        println!("paint checkpoint already at step {done} of {total}; nothing to train");
        return Ok(());
    }
    let mut logger = StepLogger::open(a.out.join(log_name), a.resume.is_some())?;
    while done < total {
        let n = (total - done).min(cfg.checkpoint_every.max(1));
        let tc = PaintTrainConfig { steps: n, ..tc_all.clone() };
        let log = match a.phase {
            PaintPhase::Base => train_paint_base_steps(&mut model, &mut adam, &train, &tc, done as u64)?,
            PaintPhase::Adapters => train_paintnet_steps(&mut model, &mut adam, &train, &tc, done as u64)?,
        };
        logger.log_chunk(done as u64, &log.losses)?;
        done += n;
        save_checkpoint(&ckpt, model_name, &cfg, hash, done as u64, &model.store, Some(&adam))?;
        println!("paint step {done}/{total}  loss {:.5}", log.losses.last().copied().unwrap_or(f32::NAN));
    }
    if a.phase == PaintPhase::Adapters && model.store.checksum_frozen() != frozen0 {
        return Err(Error::Checkpoint("frozen trunk checksum changed during training".into()));
    }
    println!("saved {}", ckpt.display());
    Ok(())
}

// ---------------------------------------------------------------- generate

/// Everything a later `drag` (or audit) needs to reproduce one generation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenRecord {
    pub caption: String,
    pub phrases: String,
    pub k: usize,
    pub seed: u64,
    /// Index of the layout the headline image used.
    pub chosen: usize,
    /// Subject PNG copied next to this record.
    pub subject: String,
    pub alpha: Option<String>,
    /// The chosen layout, embedded so drags do not depend on layouts.json.
    pub layout: Layout,
    pub layout_ckpt: PathBuf,
    pub paint_ckpt: PathBuf,
    pub layout_config_hash: String,
    pub paint_config_hash: String,
    pub canvas: usize,
}

/// "dog*,grass,sky" -> [("dog", true), ("grass", false), ("sky", false)].
/// Exactly one phrase must carry the trailing subject marker.
pub fn parse_phrases(spec: &str) -> Result<Vec<(String, bool)>> {
    let mut out = Vec::new();
    let mut subjects = 0usize;
    for raw in spec.split(',') {
        let token = raw.trim();
        if token.is_empty() {
            return Err(Error::InvalidArgument(format!("empty phrase in {spec:?}")));
        }
        let (phrase, is_subject) = match token.strip_suffix('*') {
            Some(p) => (p.trim_end(), true),
            None => (token, false),
        };
        if phrase.is_empty() {
            return Err(Error::InvalidArgument(format!("bare '*' phrase in {spec:?}")));
        }
        subjects += usize::from(is_subject);
        out.push((phrase.to_string(), is_subject));
    }
    if subjects != 1 {
        return Err(Error::InvalidArgument(format!(
            "phrases must mark exactly one subject with a trailing '*', found {subjects} in {spec:?}"
        )));
    }
    Ok(out)
}

fn load_layout_model(path: &Path) -> Result<(LayoutDenoiser<f32>, CheckpointMeta)> {
    let (meta, store, _) = load_checkpoint::<f32>(path)?;
    require_model(&meta, "layout", path)?;
    let cfg = echoed_config(&meta, path)?;
    Ok((LayoutDenoiser::from_store(cfg.layout_model, store)?, meta))
}

fn load_paint_model(path: &Path) -> Result<(PaintModel<f32>, CheckpointMeta)> {
    let (meta, store, _) = load_checkpoint::<f32>(path)?;
    if !meta.model.starts_with("paint.") {
        return Err(Error::Checkpoint(format!(
            "{} holds model {:?}, expected a paint checkpoint",
            path.display(),
            meta.model
        )));
    }
    let cfg = echoed_config(&meta, path)?;
    Ok((PaintModel::from_store(cfg.paint_model, store)?, meta))
}

fn canonical(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

fn load_subject(path: &Path, alpha: Option<&Path>) -> Result<(Image, Option<Mask>)> {
    let subject = load_png(path)?;
    let alpha = alpha.map(load_mask_png).transpose()?;
    if let Some(m) = &alpha {
        let (_, h, w) = subject.dim();
        if m.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "alpha mask {:?} does not match subject {h}x{w}",
                m.dim()
            )));
        }
    }
    Ok((subject, alpha))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let objects = parse_phrases(&a.phrases)?;
    let (subject, alpha) = load_subject(&a.subject, a.alpha.as_deref())?;
    let (layout_model, layout_meta) = load_layout_model(&a.layout_ckpt)?;
    let (paint_model, paint_meta) = load_paint_model(&a.paint_ckpt)?;

    let layouts = sample_layouts(&layout_model, &subject, &objects, &a.caption, a.k, a.seed)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("layouts.json"), &layouts)?;

    let emit: Vec<usize> = if a.emit_all { (0..a.k).collect() } else { vec![0] };
    for &i in &emit {
        let g = generate(&paint_model, &subject, alpha.as_ref(), &layouts[i], a.seed.wrapping_add(i as u64))?;
        save_png(&a.out.join(format!("image_{i:03}.png")), &g.image)?;
        save_mask_png(&a.out.join(format!("mask_{i:03}.png")), &g.subject_mask)?;
    }
    save_png(&a.out.join("subject.png"), &subject)?;
    if let Some(m) = &alpha {
        save_mask_png(&a.out.join("alpha.png"), m)?;
    }

    let record = GenRecord {
        caption: a.caption.clone(),
        phrases: a.phrases.clone(),
        k: a.k,
        seed: a.seed,
        chosen: 0,
        subject: "subject.png".into(),
        alpha: alpha.as_ref().map(|_| "alpha.png".to_string()),
        layout: layouts[0].clone(),
        layout_ckpt: canonical(&a.layout_ckpt)?,
        paint_ckpt: canonical(&a.paint_ckpt)?,
        layout_config_hash: format!("{:016x}", layout_meta.config_hash),
        paint_config_hash: format!("{:016x}", paint_meta.config_hash),
        canvas: paint_model.config.canvas,
    };
    write_json(&a.out.join("record.json"), &record)?;
    println!(
        "sampled {} layout(s), painted {} image(s) into {}",
        a.k,
        emit.len(),
        a.out.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- drag

/// Keeps the box size and pulls the center back until the box lies fully on
/// the canvas. Boxes wider or taller than the canvas center on that axis.
fn clamp_center_on_canvas(b: BBox) -> BBox {
    let clamp_axis = |c: f32, extent: f32| {
        if extent >= 1.0 {
            0.5
        } else {
            c.clamp(extent / 2.0, 1.0 - extent / 2.0)
        }
    };
    BBox { cx: clamp_axis(b.cx, b.w), cy: clamp_axis(b.cy, b.h), ..b }
}

fn cmd_drag(a: DragArgs) -> Result<()> {
    let record: GenRecord = read_json(&a.record)?;
    let record_dir = a.record.parent().map(Path::to_path_buf).unwrap_or_default();
    let (subject, alpha) = load_subject(
        &record_dir.join(&record.subject),
        record.alpha.as_ref().map(|s| record_dir.join(s)).as_deref(),
    )?;
    let (paint_model, paint_meta) = load_paint_model(&record.paint_ckpt)?;
    let found = format!("{:016x}", paint_meta.config_hash);
    if found != record.paint_config_hash {
        return Err(Error::Checkpoint(format!(
            "paint checkpoint hash {found} does not match the record's {}",
            record.paint_config_hash
        )));
    }

    let mut layout = record.layout.clone();
    let si = layout.subject_index()?;
    let b = layout.objects[si].bbox;
    let moved = BBox { cx: b.cx + a.dx, cy: b.cy + a.dy, ..b };
    let (x0, y0, x1, y1) = moved.corners();
    if x1 <= 0.0 || x0 >= 1.0 || y1 <= 0.0 || y0 >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "delta ({}, {}) moves the subject fully off the canvas",
            a.dx, a.dy
        )));
    }
    layout.objects[si].bbox = clamp_center_on_canvas(moved);
    layout.validate()?;

    let seed = a.seed.unwrap_or(record.seed);
    let g = generate(&paint_model, &subject, alpha.as_ref(), &layout, seed)?;
    create_dir(&a.out)?;
    save_png(&a.out.join("image_000.png"), &g.image)?;
    save_mask_png(&a.out.join("mask_000.png"), &g.subject_mask)?;
    save_png(&a.out.join("subject.png"), &subject)?;
    if let Some(m) = &alpha {
        save_mask_png(&a.out.join("alpha.png"), m)?;
    }
    write_json(&a.out.join("layout.json"), &layout)?;
    let new_record = GenRecord {
        seed,
        chosen: 0,
        k: 1,
        layout: layout.clone(),
        subject: "subject.png".into(),
        alpha: record.alpha.as_ref().map(|_| "alpha.png".to_string()),
        ..record
    };
    write_json(&a.out.join("record.json"), &new_record)?;
    println!(
        "moved subject by ({}, {}) to ({:.4}, {:.4}); wrote {}",
        a.dx,
        a.dy,
        layout.objects[si].bbox.cx,
        layout.objects[si].bbox.cy,
        a.out.join("image_000.png").display()
    );
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaxIouSection {
    pub at1: f64,
    pub at3: Option<f64>,
    pub at5: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkySection {
    pub checked: u64,
    pub held: u64,
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApSection {
    pub mean: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerSample {
    pub index: usize,
    pub iou1: f64,
    pub iou3: Option<f64>,
    pub iou5: Option<f64>,
}

/// Machine-readable evaluation result; see schema/report.schema.json.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub k: usize,
    pub oracle_layouts: bool,
    pub n_test: usize,
    pub painted_samples: usize,
    pub max_iou: MaxIouSection,
    pub sky_above_grass: SkySection,
    pub toy_fid: Option<f64>,
    pub ap: Option<ApSection>,
    pub per_sample: Vec<PerSample>,
}

struct PaintedEval {
    image: ApImage,
    feat: Vec<f64>,
    real_feat: Vec<f64>,
}

struct SampleEval {
    index: usize,
    iou1: f64,
    iou3: Option<f64>,
    iou5: Option<f64>,
    sky_checked: u64,
    sky_held: u64,
    painted: Option<PaintedEval>,
}

fn sky_rule(l: &Layout) -> Option<bool> {
    let sky = l.objects.iter().find(|o| o.phrase == "sky")?;
    let grass = l.objects.iter().find(|o| o.phrase == "grass")?;
    Some(sky.bbox.cy < grass.bbox.cy)
}

#[allow(clippy::too_many_arguments)]
fn eval_one(
    index: usize,
    sample: &SceneSample,
    layout_model: &LayoutDenoiser<f32>,
    paint_model: Option<&PaintModel<f32>>,
    vis: &VisionEncoder,
    k: usize,
    seed: u64,
    oracle_layouts: bool,
    want_paint: bool,
) -> Result<SampleEval> {
    let (crop, crop_mask) = extract_subject(sample)?;
    let mut tag = Vec::with_capacity(16);
    tag.extend_from_slice(&seed.to_le_bytes());
    tag.extend_from_slice(&(index as u64).to_le_bytes());
    let per_seed = fnv1a(&tag);

    let layouts = if oracle_layouts {
        vec![sample.layout.clone()]
    } else {
        let objects: Vec<(String, bool)> = sample
            .layout
            .objects
            .iter()
            .map(|o| (o.phrase.clone(), o.is_subject))
            .collect();
        sample_layouts(layout_model, &crop, &objects, &sample.caption, k, per_seed)?
    };
    let at = |j: usize| max_iou_at_k(&layouts[..j.min(layouts.len())], &sample.layout);
    let iou1 = at(1)?;
    let iou3 = if layouts.len() >= 3 { Some(at(3)?) } else { None };
    let iou5 = if layouts.len() >= 5 { Some(at(5)?) } else { None };

    let mut sky_checked = 0;
    let mut sky_held = 0;
    for l in &layouts {
        if let Some(held) = sky_rule(l) {
            sky_checked += 1;
            sky_held += u64::from(held);
        }
    }

    let painted = match paint_model {
        Some(pm) if want_paint => {
            let g = generate(pm, &crop, Some(&crop_mask), &layouts[0], per_seed)?;
            let detections = oracle_detect(&g.image, &synth::palette(), ORACLE_TOL);
            let ground_truth = layouts[0]
                .objects
                .iter()
                .map(|o| (o.bbox, o.phrase.clone()))
                .collect();
            let feat = vis.encode(&g.image)?.iter().map(|&v| v as f64).collect();
            let real_feat = vis.encode(&sample.image)?.iter().map(|&v| v as f64).collect();
            Some(PaintedEval { image: ApImage { detections, ground_truth }, feat, real_feat })
        }
        _ => None,
    };

    Ok(SampleEval { index, iou1, iou3, iou5, sky_checked, sky_held, painted })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(k) = a.k {
        cfg.eval.k = k;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    cfg.save(&a.out.join("config.toml"))?;
    let root = resolve_data_root(a.data.as_deref(), &cfg);
    let test = load_dataset(&root.join("test"))?;
    if test.is_empty() {
        return Err(Error::EmptyDataset(format!("{}", root.join("test").display())));
    }

    let (layout_model, _) = load_layout_model(&a.layout_ckpt)?;
    let paint_model = a.paint_ckpt.as_deref().map(load_paint_model).transpose()?.map(|(m, _)| m);
    let vis = VisionEncoder::new(FID_FEATURE_DIM, FID_GRID, FID_ENCODER_SEED);

    let k = cfg.eval.k;
    let seed = cfg.seed;
    let n_paint = if paint_model.is_some() { cfg.eval.fid_samples.min(test.len()) } else { 0 };
    // The flag only sizes the thread pool; per-sample work is seeded by
    // index, and aggregation below runs in index order, so results cannot
    // depend on the worker count.
    let workers = a.workers.unwrap_or(cfg.eval.workers).max(1).min(test.len());

    let mut results: Vec<Option<Result<SampleEval>>> = Vec::new();
    results.resize_with(test.len(), || None);
    let chunk = test.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, slots) in results.chunks_mut(chunk).enumerate() {
            let test = &test;
            let layout_model = &layout_model;
            let paint_model = paint_model.as_ref();
            let vis = &vis;
            handles.push(scope.spawn(move || {
                for (off, slot) in slots.iter_mut().enumerate() {
                    let i = w * chunk + off;
                    *slot = Some(eval_one(
                        i,
                        &test[i],
                        layout_model,
                        paint_model,
                        vis,
                        k,
                        seed,
                        a.oracle_layouts,
                        i < n_paint,
                    ));
                }
            }));
        }
        for h in handles {
            h.join().expect("evaluation worker panicked");
        }
    });
    let mut evals = Vec::with_capacity(test.len());
    for slot in results {
        evals.push(slot.expect("every sample evaluated")?);
    }

    let at1 = mean(evals.iter().map(|e| e.iou1)).unwrap_or(0.0);
    let at3 = mean(evals.iter().filter_map(|e| e.iou3));
    let at5 = mean(evals.iter().filter_map(|e| e.iou5));
    let checked: u64 = evals.iter().map(|e| e.sky_checked).sum();
    let held: u64 = evals.iter().map(|e| e.sky_held).sum();
    let sky = SkySection {
        checked,
        held,
        rate: if checked > 0 { Some(held as f64 / checked as f64) } else { None },
    };

    let painted: Vec<&PaintedEval> = evals.iter().filter_map(|e| e.painted.as_ref()).collect();
    let ap = if painted.is_empty() {
        None
    } else {
        let images: Vec<ApImage> = painted.iter().map(|p| p.image.clone()).collect();
        let report = average_precision(&images, &coco_thresholds());
        Some(ApSection { mean: report.mean, ap50: report.at(0.5), ap75: report.at(0.75) })
    };
    let toy_fid = if painted.len() >= 2 {
        let rows = painted.len();
        let dim = painted[0].feat.len();
        let flat_gen: Vec<f64> = painted.iter().flat_map(|p| p.feat.iter().copied()).collect();
        let flat_real: Vec<f64> = painted.iter().flat_map(|p| p.real_feat.iter().copied()).collect();
        let gen = GaussianSummary::from_samples(&Array2::from_shape_vec((rows, dim), flat_gen).unwrap())?;
        let real = GaussianSummary::from_samples(&Array2::from_shape_vec((rows, dim), flat_real).unwrap())?;
        Some(frechet_distance(&real, &gen)?)
    } else {
        None
    };

    let report = EvalReport {
        config_hash: format!("{:016x}", cfg.hash()),
        seed,
        k,
        oracle_layouts: a.oracle_layouts,
        n_test: test.len(),
        painted_samples: painted.len(),
        max_iou: MaxIouSection { at1, at3, at5 },
        sky_above_grass: sky,
        toy_fid,
        ap,
        per_sample: evals
            .iter()
            .map(|e| PerSample { index: e.index, iou1: e.iou1, iou3: e.iou3, iou5: e.iou5 })
            .collect(),
    };
    write_json(&a.out.join("report.json"), &report)?;
    println!(
        "evaluated {} samples: max_iou@1 {:.4}{}{}",
        test.len(),
        at1,
        at5.map(|v| format!(", @5 {v:.4}")).unwrap_or_default(),
        toy_fid.map(|v| format!(", toy-fid {v:.4}")).unwrap_or_default(),
    );
    println!("report: {}", a.out.join("report.json").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phrase_spec_marks_one_subject() {
        let parsed = parse_phrases("dog*, grass, sky").unwrap();
        assert_eq!(
            parsed,
            vec![
                ("dog".to_string(), true),
                ("grass".to_string(), false),
                ("sky".to_string(), false)
            ]
        );
        assert!(parse_phrases("dog, grass").is_err(), "no subject");
        assert!(parse_phrases("dog*, grass*").is_err(), "two subjects");
        assert!(parse_phrases("dog*, , sky").is_err(), "empty phrase");
        assert!(parse_phrases("*").is_err(), "bare star");
    }

    #[test]
    fn center_clamp_preserves_size_and_interior_positions() {
        let b = BBox::new(0.5, 0.5, 0.25, 0.25);
        let same = clamp_center_on_canvas(b);
        assert_eq!((same.cx, same.cy, same.w, same.h), (0.5, 0.5, 0.25, 0.25));

        let shoved = clamp_center_on_canvas(BBox::new(1.4, -0.3, 0.25, 0.25));
        assert_eq!((shoved.w, shoved.h), (0.25, 0.25));
        assert_eq!((shoved.cx, shoved.cy), (1.0 - 0.125, 0.125));

        let wide = clamp_center_on_canvas(BBox::new(0.9, 0.5, 1.5, 0.25));
        assert_eq!(wide.cx, 0.5, "over-wide boxes center on the canvas");
    }

    #[test]
    fn exit_codes_split_usage_from_runtime() {
        assert_eq!(exit_code_for(&Error::InvalidArgument("x".into())), 2);
        assert_eq!(
            exit_code_for(&Error::io("/nope", std::io::Error::from(std::io::ErrorKind::NotFound))),
            2
        );
        assert_eq!(exit_code_for(&Error::Checkpoint("bad".into())), 2);
        assert_eq!(exit_code_for(&Error::Diverged { step: 3, detail: "nan".into() }), 1);
        assert_eq!(exit_code_for(&Error::EmptyMask), 1);
    }
}
