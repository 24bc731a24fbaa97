//! Command-line front end. Each subcommand resolves its configuration in
//! three layers (built-in defaults, then an optional JSON config file,
//! then flags), validates it in full, and only then touches the pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure. `--dry-run` stops after validation on every subcommand.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use segrobust::attack::{
    evaluate_robustness, input_saliency, AttackConfig, Recompute, Replacement, Selection,
};
use segrobust::data::{generate_synthetic, read_dataset, write_dataset, ShapeFamily, SynthConfig};
use segrobust::experiment::{
    clean_mean_dice, label_slug, run_protocol, run_sweep, write_curves_csv, write_curves_svg,
    ProtocolConfig, SweepDef, DEFAULT_MASTER_SEED, MANIFEST_FILE, OVERLAY_DISPLAY_FRACTION,
};
use segrobust::loss::LossSpec;
use segrobust::nn::{build_unet, load_model, save_model, train, TrainConfig, UNetConfig};
use segrobust::render::{overlay_pgm, write_raster_pgm};
use segrobust::rng;
use segrobust::Error;

/// Overrides the fallback output directory for every subcommand.
pub const OUTPUT_DIR_ENV: &str = "SEGROBUST_OUT";

fn fallback_out_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Runs the CLI against explicit argv and output streams, returning the
/// process exit code. `main` forwards to this; tests call it in-process.
pub fn dispatch_to<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{rendered}");
                    0
                }
                _ => {
                    let _ = write!(err, "{rendered}");
                    1
                }
            };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(CliError::Usage(problems)) => {
            for p in problems {
                let _ = writeln!(err, "{p}");
            }
            1
        }
        Err(CliError::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

enum CliError {
    /// Bad flags or configuration, reported one violation per line.
    Usage(Vec<String>),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "segrobust",
    version,
    about = "Trains small U-Net models under different loss regimes and measures robustness to gradient-guided pixel attacks"
)]
struct Cli {
    /// Cap on worker threads inside module operations.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Validate the resolved configuration, print the verdict, and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it to a directory.
    GenData(GenDataArgs),
    /// Train one model with a chosen loss and save it.
    Train(TrainArgs),
    /// Score a saved model's mean Dice on a dataset.
    Eval(EvalArgs),
    /// Write the input-saliency raster and mask overlay for one sample.
    Saliency(SaliencyArgs),
    /// Attack a dataset and report clean vs attacked mean Dice.
    Attack(AttackArgs),
    /// Run one robustness sweep for one model, writing CSV and SVG.
    Sweep(SweepArgs),
    /// Run the full protocol: train every loss regime, run every sweep.
    Protocol(ProtocolArgs),
}

fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    if cli.threads == Some(0) {
        return Err(CliError::Usage(vec!["threads: must be ≥ 1".to_string()]));
    }
    match cli.command {
        Command::GenData(args) => gen_data(args, cli.dry_run, out),
        Command::Train(args) => cmd_train(args, cli.dry_run, out),
        Command::Eval(args) => cmd_eval(args, cli.dry_run, out),
        Command::Saliency(args) => cmd_saliency(args, cli.dry_run, out),
        Command::Attack(args) => cmd_attack(args, cli.dry_run, out),
        Command::Sweep(args) => cmd_sweep(args, cli.dry_run, out),
        Command::Protocol(args) => cmd_protocol(args, cli.dry_run, out),
    }
}

// ── shared plumbing ──────────────────────────────────────────────────

fn parse_seed(s: &str) -> Result<u64, String> {
    if s == "random" {
        Ok(rand::random())
    } else {
        s.parse()
            .map_err(|_| format!("expected an unsigned integer or \"random\", got {s:?}"))
    }
}

fn parse_family(s: &str) -> Result<ShapeFamily, String> {
    match s {
        "ellipse-pair" => Ok(ShapeFamily::EllipsePair),
        "single-blob" => Ok(ShapeFamily::SingleBlob),
        _ => Err(format!("expected ellipse-pair or single-blob, got {s:?}")),
    }
}

fn parse_interval(s: &str) -> Result<(f32, f32), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<f32>().map_err(|_| format!("bad number {v:?}"));
    Ok((parse(lo)?, parse(hi)?))
}

/// Reads a JSON config file; malformed or unknown-key files are usage
/// errors, missing files are runtime errors.
fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(vec![format!("{}: {e}", path.display())]))
}

fn collect_problems(prefix: &str, r: Result<(), Error>, problems: &mut Vec<String>) {
    if let Err(e) = r {
        match e {
            Error::Config(list) => {
                problems.extend(list.into_iter().map(|p| format!("{prefix}{p}")));
            }
            other => problems.push(format!("{prefix}{other}")),
        }
    }
}

fn finish_validation(
    problems: Vec<String>,
    dry_run: bool,
    out: &mut dyn Write,
) -> Result<bool, CliError> {
    if !problems.is_empty() {
        return Err(CliError::Usage(problems));
    }
    if dry_run {
        let _ = writeln!(out, "ok");
    }
    Ok(dry_run)
}

// ── gen-data ─────────────────────────────────────────────────────────

#[derive(Args)]
struct GenDataArgs {
    /// JSON file with generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// ellipse-pair | single-blob
    #[arg(long, value_parser = parse_family)]
    family: Option<ShapeFamily>,
    /// Texture noise amplitude relative to the foreground contrast.
    #[arg(long)]
    noise: Option<f64>,
    /// Generator seed, or "random" for entropy seeding.
    #[arg(long, value_parser = parse_seed)]
    seed: Option<u64>,
    /// Output dataset directory [default: $SEGROBUST_OUT/dataset or out/dataset].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen_data(args: GenDataArgs, dry_run: bool, out: &mut dyn Write) -> CliResult {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = args.count {
        cfg.count = v;
    }
    if let Some(v) = args.height {
        cfg.height = v;
    }
    if let Some(v) = args.width {
        cfg.width = v;
    }
    if let Some(v) = args.family {
        cfg.family = v;
    }
    if let Some(v) = args.noise {
        cfg.noise = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }

    let mut problems = Vec::new();
    collect_problems("data.", cfg.validate(), &mut problems);
    if finish_validation(problems, dry_run, out)? {
        return Ok(());
    }

    let dir = args
        .out
        .unwrap_or_else(|| fallback_out_dir().join("dataset"));
    let ds = generate_synthetic(&cfg)?;
    write_dataset(&ds, &dir)?;
    let _ = writeln!(
        out,
        "wrote {} samples ({}×{}) to {}",
        ds.len(),
        ds.height(),
        ds.width(),
        dir.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

/// Optional JSON overlay for `train`: any subset of the sections.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainFile {
    model: Option<UNetConfig>,
    train: Option<TrainConfig>,
    loss: Option<String>,
    label: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset directory; defaults to scoring on the training set.
    #[arg(long)]
    val: Option<PathBuf>,
    /// JSON file with model/train/loss/label sections; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss expression, e.g. "bce+dice" or "0.5*bce+0.5*dice(eps=1e-6)".
    #[arg(long)]
    loss: Option<String>,
    /// Model label; defaults to the loss expression.
    #[arg(long)]
    label: Option<String>,
    #[arg(long = "model.depth")]
    depth: Option<usize>,
    #[arg(long = "model.base-channels")]
    base_channels: Option<usize>,
    #[arg(long = "model.kernel-size")]
    kernel_size: Option<usize>,
    #[arg(long = "train.epochs", visible_alias = "epochs")]
    epochs: Option<usize>,
    #[arg(long = "train.batch-size", visible_alias = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "train.lr", visible_alias = "lr")]
    learning_rate: Option<f64>,
    /// Seeds weight initialization and shuffling, or "random".
    #[arg(long, value_parser = parse_seed)]
    seed: Option<u64>,
    /// Model file to write [default: $SEGROBUST_OUT/<label slug>.srun].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_train(args: TrainArgs, dry_run: bool, out: &mut dyn Write) -> CliResult {
    let file: TrainFile = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainFile::default(),
    };
    let mut model_cfg = file.model.unwrap_or_default();
    let mut tc = file.train.unwrap_or_default();
    let loss_text = args
        .loss
        .or(file.loss)
        .unwrap_or_else(|| "bce+dice".to_string());
    let label = args
        .label
        .or(file.label)
        .unwrap_or_else(|| loss_text.clone());

    if let Some(v) = args.depth {
        model_cfg.depth = v;
    }
    if let Some(v) = args.base_channels {
        model_cfg.base_channels = v;
    }
    if let Some(v) = args.kernel_size {
        model_cfg.kernel_size = v;
    }
    if let Some(v) = args.epochs {
        tc.epochs = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        tc.learning_rate = v;
    }
    let seed = args.seed.unwrap_or(tc.seed);
    tc.seed = seed;

    let mut problems = Vec::new();
    let spec = match LossSpec::parse(&loss_text) {
        Ok(spec) => {
            collect_problems("loss.", spec.validate(), &mut problems);
            Some(spec)
        }
        Err(e) => {
            collect_problems("loss.", Err(e), &mut problems);
            None
        }
    };
    collect_problems("train.", tc.validate(), &mut problems);
    if label.is_empty() || label.contains(',') || label.contains('\n') {
        problems.push("label: must be nonempty without commas or newlines".to_string());
    }

    // input extent comes from the data, so shape validation needs the
    // dataset even on a dry run
    let train_set = read_dataset(&args.data)?;
    model_cfg.input_height = train_set.height();
    model_cfg.input_width = train_set.width();
    collect_problems("model.", model_cfg.validate(), &mut problems);
    if finish_validation(problems, dry_run, out)? {
        return Ok(());
    }
    let spec = spec.expect("valid spec after validation");

    let val_set = match &args.val {
        Some(dir) => read_dataset(dir)?,
        None => train_set.clone(),
    };
    let mut model = build_unet(&model_cfg, rng::derive_seed(seed, 0, 1))?;
    model.label = label.clone();
    let (model, history) = train(model, &train_set, &val_set, &spec, &tc)?;

    let path = args
        .out
        .unwrap_or_else(|| fallback_out_dir().join(format!("{}.srun", label_slug(&label))));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_model(&model, &path)?;
    let last = history.epochs.last().expect("at least one epoch");
    let _ = writeln!(
        out,
        "trained {:?} for {} epochs: train loss {}, val Dice {}; wrote {}",
        label,
        history.epochs.len(),
        last.train_loss,
        last.val_dice,
        path.display()
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Args)]
struct EvalArgs {
    /// Saved model file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory to score.
    #[arg(long)]
    data: PathBuf,
}

fn cmd_eval(args: EvalArgs, dry_run: bool, out: &mut dyn Write) -> CliResult {
    if finish_validation(Vec::new(), dry_run, out)? {
        return Ok(());
    }
    let model = load_model(&args.model)?;
    let ds = read_dataset(&args.data)?;
    let dice = clean_mean_dice(&model, &ds)?;
    let _ = writeln!(
        out,
        "model {:?}: clean mean Dice {} over {} samples",
        model.label,
        dice,
        ds.len()
    );
    Ok(())
}

// ── saliency ─────────────────────────────────────────────────────────

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample id; defaults to the first sample.
    #[arg(long)]
    sample: Option<String>,
    /// Fraction of the peak |gradient| above which overlay pixels light up.
    #[arg(long, default_value_t = OVERLAY_DISPLAY_FRACTION)]
    threshold_fraction: f32,
    /// Directory for saliency.pgm and overlay.pgm [default: $SEGROBUST_OUT].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_saliency(args: SaliencyArgs, dry_run: bool, out: &mut dyn Write) -> CliResult {
    let mut problems = Vec::new();
    if !(args.threshold_fraction.is_finite() && args.threshold_fraction >= 0.0) {
        problems.push(format!(
            "threshold-fraction: must be ≥ 0, got {}",
            args.threshold_fraction
        ));
    }
    if finish_validation(problems, dry_run, out)? {
        return Ok(());
    }

    let model = load_model(&args.model)?;
    let ds = read_dataset(&args.data)?;
    let sample = match &args.sample {
        Some(id) => ds
            .samples
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::contract(format!("no sample with id {id:?}")))?,
        None => &ds.samples[0],
    };

    let map = input_saliency(&model, sample)?;
    let dir = args.out.unwrap_or_else(fallback_out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let sal_path = dir.join("saliency.pgm");
    write_raster_pgm(&sal_path, &map.values)?;
    let lo = map.values.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.values.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);

    let peak = map.values.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let overlay = overlay_pgm(
        &sample.image,
        &sample.mask,
        &map.values,
        peak * args.threshold_fraction,
    )?;
    let overlay_path = dir.join("overlay.pgm");
    overlay.write(&overlay_path)?;
    let _ = writeln!(
        out,
        "saliency for {:?}: min {lo} max {hi}; wrote {} and {}",
        sample.id,
        sal_path.display(),
        overlay_path.display()
    );
    Ok(())
}

// ── attack ───────────────────────────────────────────────────────────

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON attack config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// How many pixels to replace.
    #[arg(long)]
    k: Option<usize>,
    /// Replace selected pixels with this fixed value.
    #[arg(long, conflicts_with = "random")]
    fixed: Option<f32>,
    /// Replace with uniform draws from "LO,HI", repeated per iteration.
    #[arg(long, value_parser = parse_interval)]
    random: Option<(f32, f32)>,
    /// Iterations to average for random replacement.
    #[arg(long)]
    iterations: Option<usize>,
    /// Seed for random replacement, or "random".
    #[arg(long, value_parser = parse_seed)]
    seed: Option<u64>,
    /// abs | signed gradient ranking.
    #[arg(long)]
    selection: Option<String>,
    /// off | per-attack saliency recomputation.
    #[arg(long)]
    recompute: Option<String>,
}

fn resolve_attack(args: &AttackArgs) -> Result<AttackConfig, CliError> {
    let mut ac: AttackConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => AttackConfig {
            k: 5,
            selection: Selection::ByAbs,
            replacement: Replacement::Fixed { value: 0.2 },
            recompute: Recompute::Off,
            retain_images: false,
        },
    };
    if let Some(k) = args.k {
        ac.k = k;
    }
    if let Some(value) = args.fixed {
        ac.replacement = Replacement::Fixed { value };
    }
    if let Some((lo, hi)) = args.random {
        let (iterations, seed) = match ac.replacement {
            Replacement::RandomUniform {
                iterations, seed, ..
            } => (iterations, seed),
            Replacement::Fixed { .. } => (100, DEFAULT_MASTER_SEED),
        };
        ac.replacement = Replacement::RandomUniform {
            lo,
            hi,
            iterations,
            seed,
        };
    }
    match (&mut ac.replacement, args.iterations, args.seed) {
        (Replacement::RandomUniform { iterations, seed, .. }, its, sd) => {
            if let Some(v) = its {
                *iterations = v;
            }
            if let Some(v) = sd {
                *seed = v;
            }
        }
        (Replacement::Fixed { .. }, None, None) => {}
        (Replacement::Fixed { .. }, _, _) => {
            return Err(CliError::Usage(vec![
                "attack.replacement: --iterations and --seed only apply to --random".to_string(),
            ]));
        }
    }
    if let Some(s) = &args.selection {
        ac.selection = match s.as_str() {
            "abs" => Selection::ByAbs,
            "signed" => Selection::BySigned,
            _ => {
                return Err(CliError::Usage(vec![format!(
                    "attack.selection: expected abs or signed, got {s:?}"
                )]))
            }
        };
    }
    if let Some(s) = &args.recompute {
        ac.recompute = match s.as_str() {
            "off" => Recompute::Off,
            "per-attack" => Recompute::PerAttack,
            _ => {
                return Err(CliError::Usage(vec![format!(
                    "attack.recompute: expected off or per-attack, got {s:?}"
                )]))
            }
        };
    }
    Ok(ac)
}

fn cmd_attack(args: AttackArgs, dry_run: bool, out: &mut dyn Write) -> CliResult {
    let ac = resolve_attack(&args)?;
    let mut problems = Vec::new();
    collect_problems("", ac.validate(), &mut problems);
    if finish_validation(problems, dry_run, out)? {
        return Ok(());
    }

    let model = load_model(&args.model)?;
    let ds = read_dataset(&args.data)?;
    let report = evaluate_robustness(&model, &ds, &ac)?;
    let _ = writeln!(
        out,
        "model {:?}: clean mean Dice {}; attacked mean Dice {} (std {}) over {} samples, k={}",
        model.label,
        report.clean_mean,
        report.attacked_mean,
        report.attacked_std,
        ds.len(),
        ac.k
    );
    Ok(())
}

// ── sweep ────────────────────────────────────────────────────────────

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// noise-level-fixed | noise-level-wide | pixel-count-fixed | pixel-count-random
    #[arg(long, default_value = "noise-level-wide", conflicts_with = "config")]
    sweep: String,
    /// JSON sweep definition replacing the named default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for the sweep's random draws, or "random".
    #[arg(long, value_parser = parse_seed, default_value = "42")]
    seed: u64,
    /// Directory for the curve CSV and chart SVG [default: $SEGROBUST_OUT].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_sweep(args: SweepArgs, dry_run: bool, out: &mut dyn Write) -> CliResult {
    let def: SweepDef = match &args.config {
        Some(path) => read_json(path)?,
        None => match args.sweep.as_str() {
            "noise-level-fixed" => SweepDef::noise_level_fixed(),
            "noise-level-wide" => SweepDef::noise_level_wide(),
            "pixel-count-fixed" => SweepDef::pixel_count_fixed(),
            "pixel-count-random" => SweepDef::pixel_count_random(),
            other => {
                return Err(CliError::Usage(vec![format!(
                    "sweep: unknown sweep {other:?}"
                )]))
            }
        },
    };
    let mut problems = Vec::new();
    collect_problems("sweep.", def.validate(), &mut problems);
    if finish_validation(problems, dry_run, out)? {
        return Ok(());
    }

    let model = load_model(&args.model)?;
    let ds = read_dataset(&args.data)?;
    let label = if model.label.is_empty() {
        "model".to_string()
    } else {
        model.label.clone()
    };
    let curve = run_sweep(&model, &label, &ds, &def, args.seed)?;

    let dir = args.out.unwrap_or_else(fallback_out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let csv = dir.join(format!("{}.csv", def.name()));
    let svg = dir.join(format!("{}.svg", def.name()));
    let curves = vec![curve];
    write_curves_csv(&csv, &curves)?;
    write_curves_svg(&svg, &curves, def.name())?;
    let _ = writeln!(
        out,
        "sweep {} for {:?}: auc {}; wrote {} and {}",
        def.name(),
        label,
        curves[0].auc(),
        csv.display(),
        svg.display()
    );
    Ok(())
}

// ── protocol ─────────────────────────────────────────────────────────

#[derive(Args)]
struct ProtocolArgs {
    /// JSON protocol config; missing sections fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, or "random".
    #[arg(long, value_parser = parse_seed)]
    seed: Option<u64>,
    /// Output directory [default: config file value, then $SEGROBUST_OUT].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "train.epochs")]
    epochs: Option<usize>,
    #[arg(long = "train.lr")]
    lr: Option<f64>,
    #[arg(long = "train.batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "model.depth")]
    depth: Option<usize>,
    #[arg(long = "model.base-channels")]
    base_channels: Option<usize>,
    #[arg(long = "data.count")]
    count: Option<usize>,
    #[arg(long = "data.val-count")]
    val_count: Option<usize>,
}

fn cmd_protocol(args: ProtocolArgs, dry_run: bool, out: &mut dyn Write) -> CliResult {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(vec![format!("{}: {e}", path.display())]))?;
            let file_sets_out = value.get("output_dir").is_some();
            let mut cfg: ProtocolConfig = serde_json::from_value(value)
                .map_err(|e| CliError::Usage(vec![format!("{}: {e}", path.display())]))?;
            if !file_sets_out {
                cfg.output_dir = fallback_out_dir();
            }
            cfg
        }
        None => ProtocolConfig {
            output_dir: fallback_out_dir(),
            ..ProtocolConfig::default()
        },
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = args.out {
        cfg.output_dir = dir;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.depth {
        cfg.model.depth = v;
    }
    if let Some(v) = args.base_channels {
        cfg.model.base_channels = v;
    }
    if args.count.is_some() || args.val_count.is_some() {
        match &mut cfg.data {
            segrobust::experiment::DataSource::Synthetic { config, val_count } => {
                if let Some(v) = args.count {
                    config.count = v;
                }
                if let Some(v) = args.val_count {
                    *val_count = v;
                }
            }
            segrobust::experiment::DataSource::Ingest { .. } => {
                return Err(CliError::Usage(vec![
                    "data.count: only applies to synthetic data sources".to_string(),
                ]));
            }
        }
    }

    let mut problems = Vec::new();
    collect_problems("", cfg.validate(), &mut problems);
    if finish_validation(problems, dry_run, out)? {
        return Ok(());
    }

    let manifest = run_protocol(&cfg)?;
    for m in &manifest.models {
        let _ = writeln!(
            out,
            "model {:?}: clean Dice {} after {} epochs",
            m.label, m.clean_val_dice, m.epochs_trained
        );
    }
    for v in &manifest.verdicts {
        match &v.degrades_faster {
            Some(loser) => {
                let _ = writeln!(
                    out,
                    "verdict {}: {} degrades faster ({} auc {} vs {} auc {})",
                    v.sweep, loser, v.model_a, v.auc_a, v.model_b, v.auc_b
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "verdict {}: {} and {} tie at auc {}",
                    v.sweep, v.model_a, v.model_b, v.auc_a
                );
            }
        }
    }
    let _ = writeln!(
        out,
        "manifest: {}",
        cfg.output_dir.join(MANIFEST_FILE).display()
    );
    Ok(())
}
