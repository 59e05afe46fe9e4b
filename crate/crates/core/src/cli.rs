//! Command-line entry point.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Axis};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    backend_by_name, detection_rate, eer_threshold, euclidean, fid, pair_distances, pose_error, reid_rate_folds,
    EvalReport, LandmarkDetector, PairsFile, ReidReport, SidecarLandmarks,
};
use crate::generator::ForwardOptions;
use crate::imageio::{load_png, save_gray, save_png, tile_gray, Image};
use crate::landmarks::{render_landmark_map, LandmarkSet, LandmarkSubset};
use crate::nn::array3_from_tensor;
use crate::synthetic::{make_synthetic, SyntheticConfig};
use crate::training::{fit_with, load_dataset, TrainState};
use crate::dataset::TrainingPair;

/// Environment variables with this prefix override config keys:
/// `ANONYGAN_SEED=3`, `ANONYGAN_GENERATOR__ITERATIONS=1`.
pub const ENV_PREFIX: &str = "ANONYGAN_";

#[derive(Debug, Parser)]
#[command(name = "anonygan", version, about = "Landmark-guided face anonymisation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train generator and discriminators.
    Train(TrainArgs),
    /// Replace the face in source images with a condition identity.
    Anonymize(AnonymizeArgs),
    /// Compute FID, pose error, detection and re-identification rates.
    Evaluate(EvaluateArgs),
    /// Draw every landmark heatmap channel plus a composite.
    RenderLandmarks(RenderArgs),
    /// Write the synthetic face dataset.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; every field optional, unknown keys rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint; its config hash must match.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total step budget.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Generator learning rate [default 2e-4].
    #[arg(long)]
    pub lr_generator: Option<f64>,
    /// Discriminator learning rate [default 2e-6].
    #[arg(long)]
    pub lr_discriminators: Option<f64>,
    /// Fraction of same-identity pairs per batch [default 0.75].
    #[arg(long)]
    pub same_pair_fraction: Option<f64>,
    /// Reasoning/aggregation rounds K [default 3].
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Disable landmark attention (ablation).
    #[arg(long)]
    pub no_landmark_attention: bool,
    /// Disable context matching, i.e. the feature-matching term (ablation).
    #[arg(long)]
    pub no_context_matching: bool,
    /// TOML file with `indices = [...]` selecting a landmark subset.
    #[arg(long)]
    pub landmark_subset: Option<PathBuf>,
    /// Generic override `key=value`, dotted keys for nested tables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Print a loss row every N steps (0 = silent).
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct AnonymizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source image, or a directory of PNGs for batch mode.
    #[arg(long)]
    pub source: PathBuf,
    /// Defaults to `<source>.landmarks`.
    #[arg(long)]
    pub source_landmarks: Option<PathBuf>,
    #[arg(long)]
    pub condition: PathBuf,
    /// Defaults to `<condition>.landmarks`.
    #[arg(long)]
    pub condition_landmarks: Option<PathBuf>,
    /// Output PNG, or output directory in batch mode.
    #[arg(long)]
    pub out: PathBuf,
    /// Debug: replace the attention mask by this constant in [0, 1].
    #[arg(long)]
    pub force_attention: Option<f64>,
    /// Also write the pre-blend image as `<stem>_intermediate.png`.
    #[arg(long)]
    pub save_intermediate: bool,
    /// Also write the attention mask as `<stem>_mask.png`.
    #[arg(long)]
    pub save_mask: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Real images; sub-directories name identities.
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub fake: PathBuf,
    /// TOML `[[pair]] fake = "...", source = "..."`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Embedding backend; repeat for several.
    #[arg(long = "backend", default_values_t = vec!["toy".to_string()])]
    pub backends: Vec<String>,
    #[arg(long)]
    pub report: PathBuf,
    /// Re-identification folds.
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Fixed re-identification threshold; calibrated at the equal-error
    /// point on the real set when absent.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 1.5)]
    pub sigma: f64,
    #[arg(long)]
    pub subset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub identities: usize,
    #[arg(long, default_value_t = 4)]
    pub images_per_identity: usize,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config_hash: Option<String>,
    /// `sha256("blob <len>\0" + config)`.
    pub config_content_hash: Option<String>,
    pub config: Option<String>,
    pub artifacts: Vec<PathBuf>,
}

pub const MANIFEST_NAME: &str = "run_manifest.toml";

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn content_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            seed: None,
            started_unix: now(),
            finished_unix: 0.0,
            config_hash: None,
            config_content_hash: None,
            config: None,
            artifacts: Vec::new(),
        }
    }

    /// Writes `run_manifest.toml` in `dir` through a temporary file.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = now();
        let text = toml::to_string(&self).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join(MANIFEST_NAME);
        let tmp = dir.join(format!(".{MANIFEST_NAME}.tmp"));
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

fn split_kv(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::InvalidArgument(format!("override `{s}` is not KEY=VALUE")))
}

/// Overrides from `ANONYGAN_*` variables, keys lower-cased with `__` for
/// nesting.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

/// Resolves the effective config: file (or checkpoint) < environment <
/// flags.
pub fn resolve_train_config(
    args: &TrainArgs,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<TrainConfig> {
    let base = match (&args.config, &args.resume) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(ckpt)) => {
            let c = Checkpoint::load(ckpt)?;
            TrainConfig::from_toml(&c.config_toml, ckpt)?
        }
        (None, None) => TrainConfig::default(),
    };
    let mut overrides = env_overrides(env);
    let mut flag = |k: &str, v: String| overrides.push((k.to_string(), v));
    if let Some(v) = args.seed {
        flag("seed", v.to_string());
    }
    if let Some(v) = args.steps {
        flag("steps", v.to_string());
    }
    if let Some(v) = args.batch_size {
        flag("batch_size", v.to_string());
    }
    if let Some(v) = args.lr_generator {
        flag("lr_generator", format!("{v:e}"));
    }
    if let Some(v) = args.lr_discriminators {
        flag("lr_discriminators", format!("{v:e}"));
    }
    if let Some(v) = args.same_pair_fraction {
        flag("same_pair_fraction", format!("{v:?}"));
    }
    if let Some(v) = args.iterations {
        flag("generator.iterations", v.to_string());
    }
    if args.no_landmark_attention {
        flag("landmark_attention", "false".into());
    }
    if args.no_context_matching {
        flag("context_matching", "false".into());
    }
    if let Some(p) = &args.landmark_subset {
        let s = LandmarkSubset::load(p)?;
        flag("landmark_subset", format!("{:?}", s.indices()));
    }
    for s in &args.set {
        let (k, v) = split_kv(s)?;
        flag(&k, v);
    }
    base.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut manifest = RunManifest::new("train");
    let config = resolve_train_config(args, std::env::vars())?;
    let base = args
        .config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let dataset = load_dataset(&config, &base)?;
    std::fs::create_dir_all(&args.out)?;
    let toml_text = config.to_toml()?;
    let cfg_path = args.out.join("config.toml");
    std::fs::write(&cfg_path, &toml_text)?;
    let log_every = args.log_every;
    let summary = fit_with(&config, &dataset, &args.out, args.resume.as_deref(), |r| {
        if log_every > 0 && (r.step % log_every == 0 || r.step == 1) {
            println!("{}", r.losses.log_row(r.step));
        }
    })?;
    manifest.seed = Some(config.seed);
    manifest.config_hash = Some(config.hash()?);
    manifest.config_content_hash = Some(content_hash(&toml_text));
    manifest.config = Some(toml_text);
    manifest.artifacts = vec![cfg_path, summary.log, summary.final_checkpoint.clone()];
    manifest.finish(&args.out)?;
    println!("final checkpoint: {}", summary.final_checkpoint.display());
    Ok(())
}

fn sidecar(image: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| image.with_extension("landmarks"))
}

fn pngs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    v.sort();
    Ok(v)
}

fn anonymize(args: &AnonymizeArgs) -> Result<()> {
    if let Some(a) = args.force_attention {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::InvalidArgument(format!("--force-attention {a} outside [0, 1]")));
        }
    }
    let state = TrainState::from_checkpoint(&Checkpoint::load(&args.checkpoint)?, None)?;
    let res = state.config.resolution;
    let condition_image = load_png(&args.condition)?;
    let condition_landmarks = LandmarkSet::load(&sidecar(&args.condition, args.condition_landmarks.as_deref()))?;
    let batch_mode = args.source.is_dir();
    let jobs: Vec<(PathBuf, PathBuf, PathBuf)> = if batch_mode {
        if args.source_landmarks.is_some() {
            return Err(Error::InvalidArgument(
                "--source-landmarks cannot be used with a source directory".into(),
            ));
        }
        std::fs::create_dir_all(&args.out)?;
        pngs_in(&args.source)?
            .into_iter()
            .map(|p| {
                let out = args.out.join(p.file_name().unwrap_or_default());
                (sidecar(&p, None), out, p)
            })
            .collect()
    } else {
        if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        vec![(
            sidecar(&args.source, args.source_landmarks.as_deref()),
            args.out.clone(),
            args.source.clone(),
        )]
    };
    let opts = ForwardOptions {
        force_attention: args.force_attention,
        trace: false,
    };
    let mut artifacts = Vec::new();
    for (lm_path, out_path, src_path) in jobs {
        let image = load_png(&src_path)?;
        let shape = image.shape();
        if (shape[1], shape[2]) != (res, res) || condition_image.shape() != shape {
            return Err(Error::shape(format!(
                "{}: images must be {res}x{res} to match the checkpoint",
                src_path.display()
            )));
        }
        let pair = TrainingPair {
            source_image: image,
            source_landmarks: LandmarkSet::load(&lm_path)?,
            condition_image: condition_image.clone(),
            condition_landmarks: condition_landmarks.clone(),
            same_identity: false,
        };
        let batch = state.model.assemble(std::slice::from_ref(&pair))?;
        let out = state.model.generate(&state.params, &batch.inputs, &opts)?;
        save_png(&array3_from_tensor(&out.final_image.get(0)?)?, &out_path)?;
        artifacts.push(out_path.clone());
        let stem = out_path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let dir = out_path.parent().unwrap_or(Path::new("."));
        if args.save_intermediate {
            let p = dir.join(format!("{stem}_intermediate.png"));
            save_png(&array3_from_tensor(&out.intermediate.get(0)?)?, &p)?;
            artifacts.push(p);
        }
        if args.save_mask {
            let p = dir.join(format!("{stem}_mask.png"));
            let mask = array3_from_tensor(&out.attention_mask.get(0)?)?;
            save_gray(&mask.index_axis(Axis(0), 0).to_owned(), &p)?;
            artifacts.push(p);
        }
    }
    println!("wrote {} image(s)", artifacts.len());
    if batch_mode {
        let mut m = RunManifest::new("anonymize");
        m.config_hash = Some(state.config.hash()?);
        m.artifacts = artifacts;
        m.finish(&args.out)?;
    }
    Ok(())
}

fn images_under(dir: &Path) -> Result<Vec<(PathBuf, Image)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&d)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile {
                    path: d.clone(),
                    what: "image directory".into(),
                },
                _ => Error::Io(e),
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "png") {
                let img = load_png(&p)?;
                out.push((p, img));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Evaluates generated images against real ones; returns the report.
pub fn evaluate_dirs(args: &EvaluateArgs) -> Result<EvalReport> {
    let real = images_under(&args.real)?;
    let fake = images_under(&args.fake)?;
    let pairs = PairsFile::load(&args.pairs)?;
    let real_imgs: Vec<Image> = real.iter().map(|(_, i)| i.clone()).collect();
    let fake_imgs: Vec<Image> = fake.iter().map(|(_, i)| i.clone()).collect();

    let mut pair_fake = Vec::new();
    let mut pair_src = Vec::new();
    let mut pose = Vec::new();
    for p in &pairs.pair {
        let fp = args.fake.join(&p.fake);
        let sp = args.real.join(&p.source);
        let f = load_png(&fp)?;
        let s = load_png(&sp)?;
        let size = (s.shape()[1], s.shape()[2]);
        if fp.with_extension("landmarks").exists() {
            let detected = SidecarLandmarks.detect(&fp)?;
            let reference = SidecarLandmarks.detect(&sp)?;
            pose.push(pose_error(&detected, &reference, size)?);
        }
        pair_fake.push(f);
        pair_src.push(s);
    }

    let mut report = EvalReport {
        real_count: real_imgs.len(),
        fake_count: fake_imgs.len(),
        pair_count: pairs.pair.len(),
        fid: BTreeMap::new(),
        pose_error_mean: (!pose.is_empty()).then(|| pose.iter().sum::<f64>() / pose.len() as f64),
        pose_pairs: pose.len(),
        detection_rate: BTreeMap::new(),
        reid_rate: BTreeMap::new(),
    };
    for name in &args.backends {
        let backend = backend_by_name(name)?;
        report.fid.insert(name.clone(), fid(&real_imgs, &fake_imgs, backend.as_ref())?);
        report
            .detection_rate
            .insert(name.clone(), detection_rate(&fake_imgs, backend.as_ref())?);
        let threshold = match args.threshold {
            Some(t) => t,
            None => {
                let emb: Vec<(String, Vec<f64>)> = real
                    .iter()
                    .map(|(p, img)| {
                        let id = p
                            .parent()
                            .map(|d| d.to_string_lossy().into_owned())
                            .unwrap_or_default();
                        backend.embed(img).map(|e| (id, e))
                    })
                    .collect::<Result<_>>()?;
                let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
                for i in 0..emb.len() {
                    for j in i + 1..emb.len() {
                        let d = euclidean(&emb[i].1, &emb[j].1);
                        if emb[i].0 == emb[j].0 {
                            genuine.push(d);
                        } else {
                            impostor.push(d);
                        }
                    }
                }
                eer_threshold(&genuine, &impostor).map_err(|_| {
                    Error::InvalidArgument(
                        "threshold calibration needs identities with several real images; pass --threshold".into(),
                    )
                })?
            }
        };
        let dists = pair_distances(&pair_fake, &pair_src, backend.as_ref())?;
        let stats = reid_rate_folds(&dists, threshold, args.folds.min(dists.len().max(1)))?;
        report.reid_rate.insert(
            name.clone(),
            ReidReport {
                threshold,
                mean: stats.mean,
                std: stats.std,
                folds: stats.rates.len(),
            },
        );
    }
    Ok(report)
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let report = evaluate_dirs(args)?;
    if let Some(parent) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.report, report.to_toml()?)?;
    print!("{}", report.table());
    Ok(())
}

/// Renders the channel grid; returns the number of panels.
pub fn render_landmarks(args: &RenderArgs) -> Result<usize> {
    let mut lms = LandmarkSet::load(&args.landmarks)?;
    if let Some(p) = &args.subset {
        lms = LandmarkSubset::load(p)?.apply(&lms)?;
    }
    let map = render_landmark_map(&lms, (args.resolution, args.resolution), args.sigma)?;
    let mut panels: Vec<Array2<f64>> = map.data.outer_iter().map(|c| c.to_owned()).collect();
    let composite = map.data.fold_axis(Axis(0), 0.0f64, |a, &b| a.max(b));
    panels.push(composite);
    let columns = (panels.len() as f64).sqrt().ceil() as usize;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save_gray(&tile_gray(&panels, columns)?, &args.out)?;
    Ok(panels.len())
}

fn synthetic(args: &SyntheticArgs) -> Result<()> {
    let ds = make_synthetic(&SyntheticConfig {
        identities: args.identities,
        images_per_identity: args.images_per_identity,
        resolution: args.resolution,
        seed: args.seed,
    })?;
    let manifest_path = ds.write(&args.out)?;
    let mut m = RunManifest::new("make-synthetic");
    m.seed = Some(args.seed);
    m.artifacts = vec![manifest_path.clone()];
    m.finish(&args.out)?;
    println!("wrote {} images, manifest {}", ds.len(), manifest_path.display());
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Anonymize(a) => anonymize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::RenderLandmarks(a) => {
            let n = render_landmarks(a)?;
            println!("wrote {n} panels to {}", a.out.display());
            Ok(())
        }
        Command::MakeSynthetic(a) => synthetic(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Errors go to stderr as `error[<kind>]: <message>`.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error[{}]: {e}", e.kind());
            1
        }
    }
}
