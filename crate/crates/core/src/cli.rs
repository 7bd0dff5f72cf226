//! Command-line interface: argument parsing and the subcommand drivers.
//!
//! Exit codes are 0 on success, 1 on runtime or check failures and 2 on
//! usage or configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checks;
use crate::data::checkpoint::encode_container;
use crate::data::{
    generate_synthetic, image_to_tensor, load_checkpoint, load_dataset, read_rgb, resize, save_dataset, save_png_gray,
    tensor_to_gray, Interpolation, SamplePair, Size, SynthParams,
};
use crate::error::{Error, Result};
use crate::metrics::{ablation_table, evaluate, AblationTable, AblationVariant, MetricsReport};
use crate::tensor::Fault;
use crate::training::{predict, train, TrainArtifacts, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "msunet", version, about = "Multi-stage UNet lesion segmentation")]
pub struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a cascade and write checkpoints plus a per-epoch log.
    Train(TrainArgs),
    /// Segment one image with a checkpoint.
    Predict(PredictArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write a synthetic lesion dataset.
    Synth(SynthArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train and score the four fusion/supervision variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Training dataset; overrides `data` in the config file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation dataset; overrides `val` in the config file.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory; overrides `out` in the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every stage's probability map as 8-bit grayscale.
    #[arg(long)]
    pub dump_stages: bool,
    /// Also write every stage's raw float map in the checkpoint container.
    #[arg(long)]
    pub dump_raw: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report path; the text grid goes next to it with a `.txt` extension.
    #[arg(long)]
    pub report: PathBuf,
    /// Overrides the threshold stored in the checkpoint.
    #[arg(long)]
    pub threshold: Option<f32>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Canvas as WIDTHxHEIGHT.
    #[arg(long, default_value = "64x64")]
    pub size: Size,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the network-level checks.
    #[arg(long)]
    pub operators_only: bool,
    /// Corrupt the convolution weight gradient (tests the checker itself).
    #[arg(long, hide = true)]
    pub inject_conv_fault: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Base config; fusion mode and deep supervision are overridden per variant.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Test dataset the variants are scored on.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64])]
    pub seeds: Vec<u64>,
}

/// On-disk run description: the training config plus dataset and output
/// locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub train: TrainConfig,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::InvalidArgument(_))
}

fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| Error::InvalidArgument(format!("no {name} path given (use --{name} or set it in the config)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(&args.config)?;
    let resolved = ConfigFile {
        data: Some(required(args.data, &file.data, "data")?),
        val: Some(required(args.val, &file.val, "val")?),
        out: Some(required(args.out, &file.out, "out")?),
        train: file.train,
    };
    let (data, val, out) = (
        resolved.data.as_deref().unwrap(),
        resolved.val.as_deref().unwrap(),
        resolved.out.as_deref().unwrap(),
    );
    let cfg = &resolved.train;
    let train_set = load_dataset(data, cfg.input_size)?;
    let val_set = load_dataset(val, cfg.input_size)?;
    create_dir(out)?;
    write_json(&out.join("resolved_config.json"), &resolved)?;
    let artifacts = TrainArtifacts { dir: out.to_path_buf() };
    let outcome = train(cfg, &train_set, &val_set, Some(&artifacts))?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs: final loss {:.5}, best epoch {}",
            last.epoch, last.train_loss, outcome.best_epoch
        );
    }
    Ok(())
}

pub fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (model, cfg) = load_checkpoint(&args.ckpt)?;
    let original = image_to_tensor(&read_rgb(&args.image)?);
    let native = Size::new(original.shape().w(), original.shape().h());
    let input = resize(&original, cfg.input_size, Interpolation::Bilinear)?;
    let pred = predict(&model, &cfg, &input)?;
    create_dir(&args.out)?;

    let mask = resize(&pred.mask, native, Interpolation::Nearest)?;
    save_png_gray(&args.out.join("mask.png"), &tensor_to_gray(&mask))?;
    for (s, map) in pred.stage_maps.iter().enumerate() {
        if args.dump_stages {
            let map = resize(map, native, Interpolation::Bilinear)?;
            save_png_gray(&args.out.join(format!("stage_{}.png", s + 1)), &tensor_to_gray(&map))?;
        }
        if args.dump_raw {
            let name = format!("stage_{}", s + 1);
            let meta = serde_json::json!({ "stage": s + 1, "stages": pred.stage_maps.len(), "input_size": cfg.input_size });
            let bytes = encode_container(&[(&name, map)], &meta)?;
            let path = args.out.join(format!("{name}.msun"));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (model, cfg) = load_checkpoint(&args.ckpt)?;
    let dataset = load_dataset(&args.data, cfg.input_size)?;
    let threshold = args.threshold.unwrap_or(cfg.threshold as f32);
    let report = evaluate(&model, &cfg, &dataset, threshold)?;
    write_report(&args.report, &report)?;
    print!("{}", report.render_text());
    Ok(())
}

fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(path, &report.to_json())?;
    let txt = path.with_extension("txt");
    fs::write(&txt, report.render_text()).map_err(|e| Error::io(&txt, e))
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let samples = generate_synthetic(&SynthParams::new(args.n, args.seed, args.size));
    save_dataset(&args.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

/// Returns whether every check passed.
pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let fault = args.inject_conv_fault.then_some(Fault::ConvWeightGrad);
    let reports = if args.operators_only {
        checks::operator_suite(args.seed, fault)?
    } else {
        checks::full_suite(args.seed, fault)?
    };
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut ok = true;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<width$}  max rel err {:.3e}  (tol {:.0e}, {} checked, {} skipped)  {status}",
            r.name, r.max_rel_error, r.tolerance, r.checked, r.skipped
        );
        ok &= r.passed();
    }
    if !ok {
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        eprintln!("gradient check failed: {}", failed.join(", "));
    }
    Ok(ok)
}

/// Trains every variant for every seed and scores it on `test`. When `out`
/// is given each run's checkpoints and log land in `out/<label>_seed<s>/`.
pub fn run_ablation(
    base: &TrainConfig,
    seeds: &[u64],
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    test_set: &[SamplePair],
    out: Option<&Path>,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let mut results = Vec::new();
    for variant in AblationVariant::ALL {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                fusion_mode: variant.fusion_mode,
                deep_supervision: variant.deep_supervision,
                seed,
                ..base.clone()
            };
            let artifacts = out.map(|o| TrainArtifacts {
                dir: o.join(format!("{}_seed{seed}", variant.label())),
            });
            let outcome = train(&cfg, train_set, val_set, artifacts.as_ref())?;
            let report = evaluate(&outcome.model, &cfg, test_set, cfg.threshold as f32)?;
            log::info!("{} seed {seed}: JA {:.4}", variant.label(), report.means.ja);
            runs.push((seed, report));
        }
        results.push((variant, runs));
    }
    ablation_table(&results)
}

pub fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let file = ConfigFile::load(&args.config)?;
    let data = required(args.data, &file.data, "data")?;
    let out = required(args.out, &file.out, "out")?;
    let cfg = &file.train;
    let train_set = load_dataset(&data, cfg.input_size)?;
    let val_set = match args.val.or(file.val.clone()) {
        Some(v) => load_dataset(&v, cfg.input_size)?,
        None => Vec::new(),
    };
    let test_set = load_dataset(&args.test, cfg.input_size)?;
    create_dir(&out)?;
    let table = run_ablation(cfg, &args.seeds, &train_set, &val_set, &test_set, Some(&out))?;
    write_json(&out.join("ablation.json"), &table)?;
    let text = table.render_text();
    fs::write(out.join("ablation.txt"), &text).map_err(|e| Error::io(out.join("ablation.txt"), e))?;
    print!("{text}");
    Ok(())
}

/// Runs a parsed command line and maps the outcome to an exit code.
pub fn run(cli: Cli) -> ExitCode {
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();

    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
