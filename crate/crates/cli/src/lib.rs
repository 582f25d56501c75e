//! The `mrnseg` command line: slide generation, training, whole-slide
//! prediction, model comparison and gradient checks.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use mrnseg_core::eval::compare;
use mrnseg_core::gradcheck;
use mrnseg_core::models::{Model, ModelConfig, ModelKind};
use mrnseg_core::optim::AdamConfig;
use mrnseg_core::pipeline::{predict_slide, train_with, Checkpoint, TileConfig, TrainConfig};
use mrnseg_core::wsi::{
    generate_synthetic_slide, read_slide, read_slide_dir, sample_dataset, slide_seed, write_slide,
    SamplerConfig, SlidePyramid, SyntheticParams,
};
use mrnseg_core::ErrorKind;

use config::RunConfig;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mrnseg_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numerical => EXIT_NUMERICAL,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mrnseg", version, about = "Multi-resolution segmentation of pyramidal slides")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic pyramidal slides.
    Gen(GenArgs),
    /// Train a model on slides and keep the lowest-validation-loss checkpoint.
    Train(TrainArgs),
    /// Predict a whole-slide probability map.
    Predict(PredictArgs),
    /// Compare two or more checkpoints by pixel-level ROC on shared slides.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub slides: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Level-0 width and height.
    #[arg(long, default_value_t = 1024)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    /// Micrometers per pixel at level 0.
    #[arg(long, default_value_t = 0.5)]
    pub mpp0: f64,
    /// Label cells independently of context (control task).
    #[arg(long)]
    pub no_context: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of slides (or a single slide directory).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// unet, mrn-bilinear or mrn-transposed.
    #[arg(long)]
    pub model: Option<String>,
    /// Number of pyramid levels fed to the model (J).
    #[arg(long)]
    pub mpp_levels: Option<usize>,
    /// key=value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pyramid level read by single-resolution models.
    #[arg(long)]
    pub input_level: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub n_per_slide: Option<usize>,
    #[arg(long)]
    pub balance: Option<f64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub slide: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the raw float32 map.
    #[arg(long)]
    pub raw: bool,
    /// Tiles per forward pass.
    #[arg(long, default_value_t = 8)]
    pub tile_batch: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Slide directories, or directories containing slides.
    #[arg(long, num_args = 1.., required = true)]
    pub slides: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub tile_batch: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per operation.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
}

/// Applies `MRNSEG_THREADS` (0 or unset = one worker per core).
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MRNSEG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("MRNSEG_THREADS must be an integer, got '{raw}'")))?;
    if n > 0 {
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let params = SyntheticParams {
        levels: a.levels,
        mpp0: a.mpp0,
        context: !a.no_context,
        ..SyntheticParams::default()
    };
    if a.levels == 0 || a.levels > 16 {
        return Err(CliError::Usage(format!("--levels must be in 1..=16, got {}", a.levels)));
    }
    let factor = 1usize << (a.levels - 1);
    if a.size == 0 || !a.size.is_multiple_of(factor) {
        return Err(CliError::Usage(format!(
            "--size {} is not divisible by 2^(levels - 1) = {factor}",
            a.size
        )));
    }
    if a.slides == 0 {
        return Err(CliError::Usage("--slides must be at least 1".into()));
    }
    if !(a.mpp0 > 0.0 && a.mpp0.is_finite()) {
        return Err(CliError::Usage(format!("--mpp0 must be positive, got {}", a.mpp0)));
    }
    create_dir(&a.out)?;
    (0..a.slides)
        .into_par_iter()
        .map(|i| -> Result<(), CliError> {
            let mut slide = generate_synthetic_slide(slide_seed(a.seed, i), a.size, &params)?;
            slide.id = format!("slide_{i:03}");
            write_slide(&slide, &a.out.join(&slide.id))?;
            Ok(())
        })
        .collect::<Result<Vec<()>, CliError>>()?;
    let resolved = format!(
        "command=gen\nout={}\nslides={}\nseed={}\nsize={}\nlevels={}\nmpp0={}\ncontext={}\n",
        a.out.display(),
        a.slides,
        a.seed,
        a.size,
        a.levels,
        a.mpp0,
        !a.no_context
    );
    let path = a.out.join("resolved_config.txt");
    fs::write(&path, resolved).map_err(|e| CliError::io(&path, e))?;
    eprintln!("wrote {} slides to {}", a.slides, a.out.display());
    Ok(())
}

/// Accepted training settings and their built-in defaults.
pub const TRAIN_DEFAULTS: &[(&str, &str)] = &[
    ("data", ""),
    ("out", ""),
    ("model", "mrn-bilinear"),
    ("mpp_levels", "3"),
    ("input_level", "0"),
    ("depth", "3"),
    ("base_channels", "16"),
    ("size", "128"),
    ("batch_size", "4"),
    ("epochs", "50"),
    ("lambda", "0.005"),
    ("lr", "0.001"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("adam_eps", "1e-8"),
    ("seed", "0"),
    ("eval_every", "1"),
    ("n_per_slide", "10"),
    ("balance", "0.5"),
    ("validation_fraction", "0.2"),
];

fn train_flags(a: &TrainArgs) -> Vec<(&'static str, Option<String>)> {
    fn s<T: ToString>(v: &Option<T>) -> Option<String> {
        v.as_ref().map(|v| v.to_string())
    }
    vec![
        ("data", a.data.as_ref().map(|p| p.display().to_string())),
        ("out", a.out.as_ref().map(|p| p.display().to_string())),
        ("model", s(&a.model)),
        ("mpp_levels", s(&a.mpp_levels)),
        ("input_level", s(&a.input_level)),
        ("depth", s(&a.depth)),
        ("base_channels", s(&a.base_channels)),
        ("size", s(&a.size)),
        ("batch_size", s(&a.batch_size)),
        ("epochs", s(&a.epochs)),
        ("lambda", s(&a.lambda)),
        ("lr", s(&a.lr)),
        ("seed", s(&a.seed)),
        ("eval_every", s(&a.eval_every)),
        ("n_per_slide", s(&a.n_per_slide)),
        ("balance", s(&a.balance)),
        ("validation_fraction", s(&a.validation_fraction)),
    ]
}

/// Typed view of a resolved training configuration.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub data: PathBuf,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

pub fn train_plan(cfg: &RunConfig) -> Result<TrainPlan, CliError> {
    cfg.require(&["data", "out"])?;
    let kind: ModelKind = cfg
        .raw("model")
        .parse()
        .map_err(|_| CliError::Usage(format!(
            "invalid model kind '{}' (expected unet, mrn-bilinear or mrn-transposed)",
            cfg.raw("model")
        )))?;
    let resolutions: usize = cfg.get("mpp_levels")?;
    if kind == ModelKind::Unet && resolutions != 1 {
        return Err(CliError::Usage(format!(
            "unet is single-resolution; use --mpp-levels 1 (got {resolutions})"
        )));
    }
    let model = ModelConfig {
        kind,
        resolutions,
        depth: cfg.get("depth")?,
        base_channels: cfg.get("base_channels")?,
        input_size: cfg.get("size")?,
        in_channels: 3,
        input_level: cfg.get("input_level")?,
    };
    model.validate()?;
    let train = TrainConfig {
        batch_size: cfg.get("batch_size")?,
        max_epochs: cfg.get("epochs")?,
        lambda: cfg.get("lambda")?,
        adam: AdamConfig {
            eta: cfg.get("lr")?,
            beta1: cfg.get("beta1")?,
            beta2: cfg.get("beta2")?,
            eps: cfg.get("adam_eps")?,
        },
        seed: cfg.get("seed")?,
        eval_every: cfg.get("eval_every")?,
    };
    train.validate()?;
    let sampler = SamplerConfig {
        size: model.input_size,
        resolutions,
        base_level: model.input_level,
        n_per_slide: cfg.get("n_per_slide")?,
        balance: cfg.get("balance")?,
        validation_fraction: cfg.get("validation_fraction")?,
    };
    Ok(TrainPlan {
        data: PathBuf::from(cfg.raw("data")),
        out: PathBuf::from(cfg.raw("out")),
        model,
        train,
        sampler,
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(TRAIN_DEFAULTS, a.config.as_deref(), &train_flags(a))?;
    let plan = train_plan(&cfg)?;
    let slides = read_slide_dir(&plan.data)?;
    let needed = plan.model.input_level + plan.model.resolutions;
    if let Some(s) = slides.iter().find(|s| s.level_count() < needed) {
        return Err(CliError::Usage(format!(
            "the model reads {needed} pyramid levels but slide {} has {}",
            s.id,
            s.level_count()
        )));
    }
    create_dir(&plan.out)?;
    cfg.write(&plan.out)?;
    let split = sample_dataset::<f32>(&slides, &plan.sampler, plan.train.seed)?;
    eprintln!(
        "training {} (J={}) on {} examples, validating on {}",
        plan.model.kind,
        plan.model.resolutions,
        split.train.len(),
        split.validation.len()
    );
    let model = Model::<f32>::build(plan.model, plan.train.seed)?;
    let outcome = train_with(model, &split, &plan.train, |r| {
        eprintln!(
            "epoch {:>4}  train {:.6}  val {}",
            r.epoch,
            r.train_loss,
            r.val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
        );
    })?;
    outcome.best.save(&plan.out.join("best.ckpt"))?;
    outcome.last.save(&plan.out.join("last.ckpt"))?;
    let path = plan.out.join("loss.csv");
    fs::write(&path, outcome.history.to_csv()).map_err(|e| CliError::io(&path, e))?;
    eprintln!(
        "best epoch {} (validation loss {:.6}); wrote {}",
        outcome.best.epoch,
        outcome.best.val_loss,
        plan.out.display()
    );
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    if a.tile_batch == 0 {
        return Err(CliError::Usage("--tile-batch must be at least 1".into()));
    }
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let slide = read_slide(&a.slide)?;
    let map = predict_slide(&ck.model, &slide, &TileConfig { batch: a.tile_batch })?;
    create_dir(&a.out)?;
    map.write_png16(&a.out.join(format!("{}.png", slide.id)))?;
    if a.raw {
        map.write_f32(&a.out.join(format!("{}.f32", slide.id)))?;
    }
    let resolved = format!(
        "command=predict\ncheckpoint={}\nslide={}\nout={}\nraw={}\ntile_batch={}\n",
        a.checkpoint.display(),
        a.slide.display(),
        a.out.display(),
        a.raw,
        a.tile_batch
    );
    let path = a.out.join("resolved_config.txt");
    fs::write(&path, resolved).map_err(|e| CliError::io(&path, e))?;
    Ok(())
}

/// Report names: the file stem, or `parent/stem` when stems collide.
/// Report names for checkpoints: the file stem, prefixed with the parent
/// directory when stems collide, and numbered if that is still ambiguous.
/// Names are used as file names, so they never contain path separators.
pub fn checkpoint_names(paths: &[PathBuf]) -> Vec<String> {
    let stem = |p: &PathBuf| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string())
    };
    let stems: Vec<String> = paths.iter().map(stem).collect();
    let named: Vec<String> = paths
        .iter()
        .zip(&stems)
        .map(|(p, s)| {
            if stems.iter().filter(|t| *t == s).count() == 1 {
                return s.clone();
            }
            match p.parent().and_then(|d| d.file_name()) {
                Some(d) => format!("{}-{s}", d.to_string_lossy()),
                None => s.clone(),
            }
        })
        .collect();
    named
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if named.iter().filter(|t| *t == n).count() == 1 {
                n.clone()
            } else {
                format!("{n}-{}", i + 1)
            }
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    if a.checkpoints.len() < 2 {
        return Err(CliError::Usage(format!(
            "eval compares models and needs at least two --checkpoints, got {}",
            a.checkpoints.len()
        )));
    }
    if a.tile_batch == 0 {
        return Err(CliError::Usage("--tile-batch must be at least 1".into()));
    }
    let names = checkpoint_names(&a.checkpoints);
    let mut distinct = names.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.len() != names.len() {
        return Err(CliError::Usage("checkpoint names must be distinct".into()));
    }
    let checkpoints = a
        .checkpoints
        .iter()
        .map(|p| Checkpoint::<f32>::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut slides: Vec<SlidePyramid> = Vec::new();
    for dir in &a.slides {
        slides.extend(read_slide_dir(dir)?);
    }
    let models: Vec<(String, &Model<f32>)> = names
        .iter()
        .cloned()
        .zip(checkpoints.iter().map(|c| &c.model))
        .collect();
    create_dir(&a.out)?;
    let report = compare(&models, &slides, &TileConfig { batch: a.tile_batch }, Some(&a.out))?;
    let mut resolved = String::from("command=eval\n");
    for (n, p) in names.iter().zip(&a.checkpoints) {
        resolved += &format!("checkpoint.{n}={}\n", p.display());
    }
    for s in &slides {
        resolved += &format!("slide={}\n", s.id);
    }
    resolved += &format!("out={}\ntile_batch={}\n", a.out.display(), a.tile_batch);
    let path = a.out.join("resolved_config.txt");
    fs::write(&path, resolved).map_err(|e| CliError::io(&path, e))?;
    let mut stdout = std::io::stdout().lock();
    for m in &report.models {
        let _ = writeln!(stdout, "{:<24} AUC {:.4}", m.name, m.auc);
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let reports = gradcheck::run_suite(a.seed, a.seeds)?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{:<24} {:>6} {:>14}  status", "op", "seeds", "max rel err");
    for r in &reports {
        let _ = writeln!(
            stdout,
            "{:<24} {:>6} {:>14.3e}  {}",
            r.op,
            r.seeds,
            r.max_relative_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_names_are_unique_file_names() {
        let paths: Vec<PathBuf> = ["runs/unet/best.ckpt", "runs/mrn/best.ckpt", "x/last.ckpt"]
            .iter()
            .map(PathBuf::from)
            .collect();
        assert_eq!(checkpoint_names(&paths), ["unet-best", "mrn-best", "last"]);
        let twice = vec![PathBuf::from("a/m.ckpt"), PathBuf::from("a/m.ckpt")];
        assert_eq!(checkpoint_names(&twice), ["a-m-1", "a-m-2"]);
    }
}
