//! Command-line front end: dataset synthesis, training, prediction and
//! scoring.
//!
//! Exit codes are `0` on success, `1` for runtime failures and `2` for usage
//! or configuration errors.

pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualseg::metrics::{evaluate_cases, MetricsConfig};
use dualseg::nn::Checkpoint;
use dualseg::trainer::{evaluate_model, fit, predict_volume, run_ablation, Dataset, PredictWith, Variant};
use dualseg::volume::{
    load_labels, load_volume, save_labels, save_probs, save_volume, synth_case, CaseEntry, DatasetManifest, LabelMap,
    Shape3, SynthSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{Preset, RunConfig, RunConfigFile};

/// Default parent directory of `train` run directories.
pub const RUN_ROOT_ENV: &str = "DUALSEG_RUN_ROOT";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub(crate) fn from_io(path: &Path, e: std::io::Error, code: i32) -> Self {
        Self {
            code,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<dualseg::Error> for CliError {
    fn from(e: dualseg::Error) -> Self {
        use dualseg::Error as E;
        let code = match e {
            E::MissingFile(_) | E::Manifest(_) | E::Config(_) | E::InvalidArgument(_) => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dualseg", version, about = "Dual-stream semi-supervised 3D segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train from a run config, or run the ablation grid.
    Train(TrainArgs),
    /// Sliding-window prediction for one volume.
    Predict(PredictArgs),
    /// Score a directory of predictions against ground truth.
    Metrics(MetricsArgs),
}

fn parse_shape(s: &str) -> Result<Shape3, String> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok(Shape3::cube(n)),
        [w, h, z] => Ok(Shape3::new(w, h, z)),
        _ => Err("expected N or W,H,Z".into()),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub cases: usize,
    #[arg(long, default_value_t = 0.2)]
    pub labeled_fraction: f64,
    /// Extra labeled cases held out for evaluation.
    #[arg(long, default_value_t = 0)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_shape, default_value = "32")]
    pub shape: Shape3,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Gaussian noise sigma; defaults to the desk benchmark value.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablate {
    One(Variant),
    All,
}

fn parse_ablate(s: &str) -> Result<Ablate, String> {
    if s == "all" {
        return Ok(Ablate::All);
    }
    Variant::parse(s).map(Ablate::One).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant {s:?}; expected all or one of {}", names.join(", "))
    })
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; defaults to `$DUALSEG_RUN_ROOT/<config stem>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_ablate)]
    pub ablate: Option<Ablate>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WhichArg {
    A,
    B,
    Mean,
}

impl From<WhichArg> for PredictWith {
    fn from(w: WhichArg) -> Self {
        match w {
            WhichArg::A => PredictWith::A,
            WhichArg::B => PredictWith::B,
            WhichArg::Mean => PredictWith::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Desk,
    La,
    Pancreas,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::La => Preset::La,
            PresetArg::Pancreas => Preset::Pancreas,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    /// Output directory for `<id>_label.v3` and `<id>_prob.v3`.
    #[arg(long)]
    pub out: PathBuf,
    /// Run config supplying eval patch, stride and head.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, value_parser = parse_shape)]
    pub patch: Option<Shape3>,
    #[arg(long, value_parser = parse_shape)]
    pub stride: Option<Shape3>,
    #[arg(long, value_enum)]
    pub which: Option<WhichArg>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub sentinel: Option<f64>,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Metrics(a) => cmd_metrics(&a),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::from_io(dir, e, 1))
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::from_io(path, e, 1))
}

/// Number of labeled cases for a fraction, robust to `f * n` landing just
/// above an integer.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult {
    if a.cases < 2 {
        return Err(CliError::usage(format!("--cases must be at least 2, got {}", a.cases)));
    }
    if !(a.labeled_fraction > 0.0 && a.labeled_fraction <= 1.0) {
        return Err(CliError::usage(format!(
            "--labeled-fraction must lie in (0, 1], got {}",
            a.labeled_fraction
        )));
    }
    let mut spec = SynthSpec {
        shape: a.shape,
        classes: a.classes,
        ..SynthSpec::desk()
    };
    if let Some(s) = a.noise {
        spec.noise_sigma = s;
    }
    spec.validate()?;
    create_dir(&a.out)?;

    let n_lab = labeled_count(a.cases, a.labeled_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut manifest = DatasetManifest {
        seed: a.seed,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
        cases: Vec::new(),
        root: a.out.clone(),
    };
    for i in 0..a.cases + a.test {
        let id = format!("case{i:03}");
        let (image, label) = synth_case::<f32, _>(&mut rng, &spec)?;
        let volume = PathBuf::from(format!("{id}_image.v3"));
        save_volume(&image, a.out.join(&volume))?;
        let has_label = i < n_lab || i >= a.cases;
        let label = if has_label {
            let name = PathBuf::from(format!("{id}_label.v3"));
            save_labels(&label, a.out.join(&name))?;
            Some(name)
        } else {
            None
        };
        match i {
            i if i < n_lab => manifest.labeled.push(id.clone()),
            i if i < a.cases => manifest.unlabeled.push(id.clone()),
            _ => manifest.test.push(id.clone()),
        }
        manifest.cases.push(CaseEntry { id, volume, label });
    }
    manifest.validate()?;
    manifest.save(a.out.join("manifest.toml"))?;
    println!(
        "wrote {} cases ({} labeled, {} unlabeled, {} test) to {}",
        manifest.cases.len(),
        manifest.labeled.len(),
        manifest.unlabeled.len(),
        manifest.test.len(),
        a.out.display()
    );
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Loads and resolves a run config; `data.manifest` is made absolute.
pub fn load_run_config(path: &Path) -> CliResult<RunConfig> {
    let (file, base) = RunConfigFile::load(path)?;
    let mut r = file
        .resolve()
        .map_err(|m| CliError::usage(format!("{}: {m}", path.display())))?;
    if let Some(m) = &r.manifest {
        let joined = if m.is_absolute() { m.clone() } else { base.join(m) };
        r.manifest = Some(absolute(&joined));
    }
    Ok(r)
}

fn run_dir(a: &TrainArgs) -> CliResult<PathBuf> {
    if let Some(o) = &a.out {
        return Ok(o.clone());
    }
    let root = std::env::var_os(RUN_ROOT_ENV)
        .ok_or_else(|| CliError::usage(format!("no --out given and {RUN_ROOT_ENV} is unset")))?;
    let stem = a.config.file_stem().unwrap_or_default();
    Ok(PathBuf::from(root).join(stem))
}

pub fn cmd_train(a: &TrainArgs) -> CliResult {
    let r = load_run_config(&a.config)?;
    let manifest_path = r
        .manifest
        .clone()
        .ok_or_else(|| CliError::usage(format!("{}: data.manifest is not set", a.config.display())))?;
    if !manifest_path.is_file() {
        return Err(CliError::usage(format!("manifest not found: {}", manifest_path.display())));
    }
    let manifest = DatasetManifest::load(&manifest_path)?;
    let data = Dataset::<f32>::load(&manifest)?;
    let out = run_dir(a)?;
    create_dir(&out)?;
    write_file(&out.join(RESOLVED_CONFIG), &RunConfigFile::resolved(&r).to_toml())?;

    match a.ablate {
        Some(Ablate::All) => {
            let table = run_ablation(&r.train, &data, &r.seeds, &Variant::ALL, &r.metrics)?;
            let text = table.render();
            write_file(&out.join("ablation.txt"), &text)?;
            let json = serde_json::to_string_pretty(&table).expect("table serializes");
            write_file(&out.join("ablation.json"), &json)?;
            print!("{text}");
        }
        ablate => {
            let cfg = match ablate {
                Some(Ablate::One(v)) => v.apply(&r.train),
                _ => r.train.clone(),
            };
            let result = fit(&cfg, &data, Some(&out))?;
            if let Some(last) = result.reports.last() {
                println!(
                    "iteration {} total {:.5} L_s {:.5}/{:.5}",
                    last.iteration, last.total, last.ls_a, last.ls_b
                );
            }
            if !data.test.is_empty() {
                let report = evaluate_model(&result.model, &data.test, &cfg.eval, &r.metrics)?;
                let text = report.render();
                write_file(&out.join("metrics.txt"), &text)?;
                print!("{text}");
            }
        }
    }
    println!("run directory: {}", out.display());
    Ok(())
}

/// Case id of an image file: the file stem with a trailing `_image` removed.
pub fn case_id(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_suffix("_image").map(str::to_string).unwrap_or(stem)
}

pub fn cmd_predict(a: &PredictArgs) -> CliResult {
    let eval = match (&a.config, a.preset) {
        (Some(c), _) => load_run_config(c)?.train.eval,
        (None, p) => Preset::from(p.unwrap_or(PresetArg::Desk)).config().eval,
    };
    let patch = a.patch.unwrap_or(eval.patch);
    let stride = a.stride.unwrap_or(eval.stride);
    let which = a.which.map(PredictWith::from).unwrap_or(eval.which);
    if !a.checkpoint.is_file() {
        return Err(CliError::usage(format!("checkpoint not found: {}", a.checkpoint.display())));
    }
    let model = Checkpoint::load(&a.checkpoint)?.into_model::<f32>()?;
    let v = load_volume::<f32>(&a.volume)?;
    let (labels, probs) = predict_volume(&model, &v, patch, stride, which)?;
    create_dir(&a.out)?;
    let id = case_id(&a.volume);
    let lp = a.out.join(format!("{id}_label.v3"));
    save_labels(&labels, &lp)?;
    save_probs(&probs, a.out.join(format!("{id}_prob.v3")))?;
    println!("wrote {}", lp.display());
    Ok(())
}

fn label_files(dir: &Path) -> CliResult<Vec<String>> {
    let rd = fs::read_dir(dir).map_err(|e| CliError::from_io(dir, e, 2))?;
    let mut ids = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| CliError::from_io(dir, e, 1))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_label.v3") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn cmd_metrics(a: &MetricsArgs) -> CliResult {
    let gt_ids = label_files(&a.gt)?;
    if gt_ids.is_empty() {
        return Err(CliError::usage(format!("no *_label.v3 files in {}", a.gt.display())));
    }
    let pred_ids = label_files(&a.pred)?;
    let missing: Vec<&String> = gt_ids.iter().filter(|id| !pred_ids.contains(id)).collect();
    let extra: Vec<&String> = pred_ids.iter().filter(|id| !gt_ids.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = String::from("case ids differ between prediction and ground truth:");
        if !missing.is_empty() {
            let m: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
            msg.push_str(&format!(" missing predictions for {}", m.join(", ")));
        }
        if !extra.is_empty() {
            let e: Vec<&str> = extra.iter().map(|s| s.as_str()).collect();
            msg.push_str(&format!(" no ground truth for {}", e.join(", ")));
        }
        return Err(CliError::runtime(msg));
    }
    let load = |dir: &Path| -> CliResult<Vec<LabelMap>> {
        gt_ids
            .iter()
            .map(|id| Ok(load_labels(dir.join(format!("{id}_label.v3")))?))
            .collect()
    };
    let preds = load(&a.pred)?;
    let truths = load(&a.gt)?;
    let cfg = MetricsConfig {
        sentinel: a.sentinel.unwrap_or(MetricsConfig::default().sentinel),
    };
    let report = evaluate_cases(&gt_ids, &preds, &truths, &cfg)?;
    let text = report.render();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&a.out, &text)?;
    print!("{text}");
    Ok(())
}
