//! Protocol orchestration: train one model per loss regime, sweep attack
//! strength along several axes, and write every report artifact (curve
//! CSVs, SVG charts, saliency and prediction rasters, a run manifest).

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{
    evaluate_robustness, input_saliency, top_k_sites, AttackConfig, Recompute, Replacement,
    Selection, SCORE_THRESHOLD,
};
use crate::data::{generate_synthetic, read_dataset, sha256_hex, Dataset, SynthConfig};
use crate::loss::{dice_score, LossSpec};
use crate::nn::{
    build_unet, load_model, save_model, train, Model, OutputMode, TrainConfig, UNetConfig,
};
use crate::render::{mask_pgm, normalized_pgm, overlay_pgm, tile_horizontal, write_raster_pgm};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_MASTER_SEED: u64 = 42;

/// Fraction of the peak |saliency| above which overlay pixels light up.
pub const OVERLAY_DISPLAY_FRACTION: f32 = 0.5;

const CSV_HEADER: &str = "x,dice_mean,dice_std,model,sweep";

/// Where the train/val datasets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Generate both splits; validation reseeds from a derived stream so
    /// the splits never share samples.
    Synthetic {
        #[serde(default)]
        config: SynthConfig,
        #[serde(default = "default_val_count")]
        val_count: usize,
    },
    /// Read two previously written dataset directories.
    Ingest {
        train_dir: PathBuf,
        val_dir: PathBuf,
    },
}

fn default_val_count() -> usize {
    16
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            config: SynthConfig::default(),
            val_count: default_val_count(),
        }
    }
}

/// Loads or generates the (train, validation) pair.
pub fn load_datasets(source: &DataSource) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::Synthetic { config, val_count } => {
            let train = generate_synthetic(config)?;
            let val_config = SynthConfig {
                count: *val_count,
                seed: rng::derive_seed(config.seed, 0, 1),
                ..config.clone()
            };
            Ok((train, generate_synthetic(&val_config)?))
        }
        DataSource::Ingest { train_dir, val_dir } => {
            Ok((read_dataset(train_dir)?, read_dataset(val_dir)?))
        }
    }
}

/// One attack-strength axis. Grids default to the four standard study axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepDef {
    /// Fixed replacement value swept over the clean intensity range.
    NoiseLevelFixed {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "narrow_levels")]
        levels: Vec<f64>,
    },
    /// Fixed replacement value swept beyond the training ceiling.
    NoiseLevelWide {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "wide_levels")]
        levels: Vec<f64>,
    },
    /// Pixel count swept at one replacement value.
    PixelCountFixed {
        #[serde(default = "default_fixed_value")]
        value: f64,
        #[serde(default = "default_counts")]
        counts: Vec<usize>,
    },
    /// Pixel count swept with uniform random replacement, repeated and
    /// averaged per point.
    PixelCountRandom {
        #[serde(default)]
        lo: f64,
        #[serde(default = "default_hi")]
        hi: f64,
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default = "default_counts")]
        counts: Vec<usize>,
    },
}

fn default_k() -> usize {
    5
}
fn narrow_levels() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.15, 0.2]
}
fn wide_levels() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0]
}
fn default_fixed_value() -> f64 {
    0.2
}
fn default_counts() -> Vec<usize> {
    vec![1, 5, 10, 20, 30, 50]
}
fn default_hi() -> f64 {
    1.0
}
fn default_iterations() -> usize {
    100
}

impl SweepDef {
    pub fn noise_level_fixed() -> Self {
        SweepDef::NoiseLevelFixed {
            k: default_k(),
            levels: narrow_levels(),
        }
    }

    pub fn noise_level_wide() -> Self {
        SweepDef::NoiseLevelWide {
            k: default_k(),
            levels: wide_levels(),
        }
    }

    pub fn pixel_count_fixed() -> Self {
        SweepDef::PixelCountFixed {
            value: default_fixed_value(),
            counts: default_counts(),
        }
    }

    pub fn pixel_count_random() -> Self {
        SweepDef::PixelCountRandom {
            lo: 0.0,
            hi: default_hi(),
            iterations: default_iterations(),
            counts: default_counts(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepDef::NoiseLevelFixed { .. } => "noise-level-fixed",
            SweepDef::NoiseLevelWide { .. } => "noise-level-wide",
            SweepDef::PixelCountFixed { .. } => "pixel-count-fixed",
            SweepDef::PixelCountRandom { .. } => "pixel-count-random",
        }
    }

    /// Curve x coordinates: replacement levels or pixel counts.
    pub fn xs(&self) -> Vec<f64> {
        match self {
            SweepDef::NoiseLevelFixed { levels, .. } | SweepDef::NoiseLevelWide { levels, .. } => {
                levels.clone()
            }
            SweepDef::PixelCountFixed { counts, .. }
            | SweepDef::PixelCountRandom { counts, .. } => {
                counts.iter().map(|&n| n as f64).collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match self {
            SweepDef::NoiseLevelFixed { k, levels } | SweepDef::NoiseLevelWide { k, levels } => {
                if *k == 0 {
                    problems.push("k: must be ≥ 1".to_string());
                }
                if levels.iter().any(|v| !v.is_finite()) {
                    problems.push("levels: must be finite".to_string());
                }
                check_increasing("levels", levels, &mut problems);
            }
            SweepDef::PixelCountFixed { value, counts } => {
                if !value.is_finite() {
                    problems.push("value: must be finite".to_string());
                }
                if counts.first() == Some(&0) {
                    problems.push("counts: must be ≥ 1".to_string());
                }
                let xs: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
                check_increasing("counts", &xs, &mut problems);
            }
            SweepDef::PixelCountRandom {
                lo,
                hi,
                iterations,
                counts,
            } => {
                if !lo.is_finite() || !hi.is_finite() {
                    problems.push("lo/hi: must be finite".to_string());
                } else if lo > hi {
                    problems.push("lo: must be ≤ hi".to_string());
                }
                if *iterations == 0 {
                    problems.push("iterations: must be ≥ 1".to_string());
                }
                if counts.first() == Some(&0) {
                    problems.push("counts: must be ≥ 1".to_string());
                }
                let xs: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
                check_increasing("counts", &xs, &mut problems);
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Attack for the point at `index`; random sweeps derive the master
    /// seed for that point from `sweep_seed`.
    fn attack_at(&self, index: usize, sweep_seed: u64) -> AttackConfig {
        let (k, replacement) = match self {
            SweepDef::NoiseLevelFixed { k, levels } | SweepDef::NoiseLevelWide { k, levels } => (
                *k,
                Replacement::Fixed {
                    value: levels[index] as f32,
                },
            ),
            SweepDef::PixelCountFixed { value, counts } => (
                counts[index],
                Replacement::Fixed {
                    value: *value as f32,
                },
            ),
            SweepDef::PixelCountRandom {
                lo,
                hi,
                iterations,
                counts,
            } => (
                counts[index],
                Replacement::RandomUniform {
                    lo: *lo as f32,
                    hi: *hi as f32,
                    iterations: *iterations,
                    seed: rng::derive_seed(sweep_seed, index, 0),
                },
            ),
        };
        AttackConfig {
            k,
            selection: Selection::ByAbs,
            replacement,
            recompute: Recompute::Off,
            retain_images: false,
        }
    }
}

fn check_increasing(field: &str, xs: &[f64], problems: &mut Vec<String>) {
    if xs.is_empty() {
        problems.push(format!("{field}: must not be empty"));
    }
    if xs.windows(2).any(|p| p[1] <= p[0]) {
        problems.push(format!("{field}: must be strictly increasing"));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
}

/// One model's Dice trajectory along a sweep axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub model: String,
    pub sweep: String,
    pub points: Vec<CurvePoint>,
}

impl RobustnessCurve {
    pub fn new(model: &str, sweep: &str, points: Vec<CurvePoint>) -> Result<RobustnessCurve> {
        for name in [model, sweep] {
            if name.is_empty() || name.contains(',') || name.contains('\n') {
                return Err(Error::contract(format!(
                    "curve label {name:?} must be nonempty without commas or newlines"
                )));
            }
        }
        if points.is_empty() {
            return Err(Error::contract("a curve needs at least one point"));
        }
        if points.windows(2).any(|p| p[1].x <= p[0].x) {
            return Err(Error::contract("curve x values must be strictly increasing"));
        }
        for p in &points {
            if !(0.0..=1.0).contains(&p.dice_mean) || p.dice_std < 0.0 {
                return Err(Error::contract(format!(
                    "curve point ({}, {} ± {}) outside the Dice range",
                    p.x, p.dice_mean, p.dice_std
                )));
            }
        }
        Ok(RobustnessCurve {
            model: model.to_string(),
            sweep: sweep.to_string(),
            points,
        })
    }

    /// Trapezoidal area under (x, mean Dice). Zero for a single point.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|p| (p[1].x - p[0].x) * (p[0].dice_mean + p[1].dice_mean) / 2.0)
            .sum()
    }
}

/// Runs one sweep for one model over the validation set.
pub fn run_sweep(
    model: &Model,
    label: &str,
    dataset: &Dataset,
    def: &SweepDef,
    sweep_seed: u64,
) -> Result<RobustnessCurve> {
    def.validate()?;
    let xs = def.xs();
    let mut points = Vec::with_capacity(xs.len());
    for (index, x) in xs.into_iter().enumerate() {
        let ac = def.attack_at(index, sweep_seed);
        let report = evaluate_robustness(model, dataset, &ac)?;
        points.push(CurvePoint {
            x,
            dice_mean: report.attacked_mean,
            dice_std: report.attacked_std,
        });
    }
    RobustnessCurve::new(label, def.name(), points)
}

/// Mean Dice of thresholded predictions over a dataset.
pub fn clean_mean_dice(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.samples.is_empty() {
        return Err(Error::contract("cannot score an empty dataset"));
    }
    let mut total = 0.0;
    for sample in &dataset.samples {
        let (h, w) = (sample.height(), sample.width());
        let probs = model
            .forward(&sample.image.reshaped(&[1, h, w])?, OutputMode::Probabilities)?
            .reshaped(&[h, w])?;
        total += dice_score(&probs, &sample.mask, SCORE_THRESHOLD)?;
    }
    Ok(total / dataset.samples.len() as f64)
}

// ── Curve CSV ────────────────────────────────────────────────────────

/// Writes curves as `x,dice_mean,dice_std,model,sweep` rows, one per
/// point, '.' decimals, LF line endings.
pub fn write_curves_csv(path: &Path, curves: &[RobustnessCurve]) -> Result<()> {
    std::fs::write(path, curves_csv_bytes(curves)).map_err(|e| Error::io(path, e))
}

pub fn curves_csv_bytes(curves: &[RobustnessCurve]) -> Vec<u8> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for curve in curves {
        for p in &curve.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.x, p.dice_mean, p.dice_std, curve.model, curve.sweep
            ));
        }
    }
    out.into_bytes()
}

/// Parses a file written by [`write_curves_csv`]; curves come back in
/// first-appearance order with their exact float values.
pub fn read_curves_csv(path: &Path) -> Result<Vec<RobustnessCurve>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == CSV_HEADER => {}
        other => {
            return Err(Error::format(
                path,
                format!("expected header {CSV_HEADER:?}, got {other:?}"),
            ))
        }
    }
    let mut order: Vec<(String, String)> = Vec::new();
    let mut grouped: Vec<Vec<CurvePoint>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(
                path,
                format!("line {}: expected 5 fields, got {}", lineno + 2, fields.len()),
            ));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::format(path, format!("line {}: bad {what} {s:?}", lineno + 2))
            })
        };
        let point = CurvePoint {
            x: parse(fields[0], "x")?,
            dice_mean: parse(fields[1], "dice_mean")?,
            dice_std: parse(fields[2], "dice_std")?,
        };
        let key = (fields[3].to_string(), fields[4].to_string());
        match order.iter().position(|k| *k == key) {
            Some(i) => grouped[i].push(point),
            None => {
                order.push(key);
                grouped.push(vec![point]);
            }
        }
    }
    order
        .into_iter()
        .zip(grouped)
        .map(|((model, sweep), points)| RobustnessCurve::new(&model, &sweep, points))
        .collect()
}

// ── SVG chart ────────────────────────────────────────────────────────

const SVG_PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// One line chart with a polyline, point markers, and a legend entry per
/// curve; Dice is plotted on a fixed [0, 1] axis.
pub fn curves_svg(curves: &[RobustnessCurve], title: &str) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::contract("cannot chart zero curves"));
    }
    let (left, right, top, bottom) = (60.0, 470.0, 40.0, 400.0);
    let x_min = curves
        .iter()
        .flat_map(|c| c.points.iter())
        .map(|p| p.x)
        .fold(f64::INFINITY, f64::min);
    let x_max = curves
        .iter()
        .flat_map(|c| c.points.iter())
        .map(|p| p.x)
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let px = |x: f64| left + (x - x_min) / span * (right - left);
    let py = |dice: f64| bottom - dice * (bottom - top);

    let mut svg = String::new();
    svg.push_str(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"440\" viewBox=\"0 0 640 440\">\n",
    );
    svg.push_str("<rect width=\"640\" height=\"440\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"265\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        xml_escape(title)
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{bottom}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{bottom}\" x2=\"{right}\" y2=\"{bottom}\" stroke=\"black\"/>\n"
    ));
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = py(tick);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{left}\" y2=\"{y}\" stroke=\"black\"/>\n",
            left - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{tick}</text>\n",
            left - 8.0,
            y + 4.0
        ));
    }
    for x in [x_min, x_max] {
        let xp = px(x);
        svg.push_str(&format!(
            "<line x1=\"{xp}\" y1=\"{bottom}\" x2=\"{xp}\" y2=\"{}\" stroke=\"black\"/>\n",
            bottom + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{xp}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{x}</text>\n",
            bottom + 18.0
        ));
    }

    for (ci, curve) in curves.iter().enumerate() {
        let color = SVG_PALETTE[ci % SVG_PALETTE.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{},{}", px(p.x), py(p.dice_mean)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        for p in &curve.points {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>\n",
                px(p.x),
                py(p.dice_mean)
            ));
            if p.dice_std > 0.0 {
                let lo = py((p.dice_mean - p.dice_std).max(0.0));
                let hi = py((p.dice_mean + p.dice_std).min(1.0));
                svg.push_str(&format!(
                    "<line x1=\"{0}\" y1=\"{lo}\" x2=\"{0}\" y2=\"{hi}\" stroke=\"{color}\"/>\n",
                    px(p.x)
                ));
            }
        }
        // legend entry
        let ly = top + 10.0 + ci as f64 * 18.0;
        svg.push_str(&format!(
            "<line x1=\"485\" y1=\"{ly}\" x2=\"505\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"510\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            ly + 4.0,
            xml_escape(&curve.model)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_curves_svg(path: &Path, curves: &[RobustnessCurve], title: &str) -> Result<()> {
    std::fs::write(path, curves_svg(curves, title)?).map_err(|e| Error::io(path, e))
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

// ── Protocol configuration ───────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledLoss {
    pub label: String,
    pub spec: LossSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub model: UNetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_losses")]
    pub losses: Vec<LabeledLoss>,
    #[serde(default = "default_sweeps")]
    pub sweeps: Vec<SweepDef>,
    /// Master seed; initialization and sweep randomness derive from it.
    #[serde(default = "default_master_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_losses() -> Vec<LabeledLoss> {
    LossSpec::standard_four()
        .into_iter()
        .map(|(label, spec)| LabeledLoss { label, spec })
        .collect()
}

fn default_sweeps() -> Vec<SweepDef> {
    vec![
        SweepDef::noise_level_fixed(),
        SweepDef::noise_level_wide(),
        SweepDef::pixel_count_fixed(),
        SweepDef::pixel_count_random(),
    ]
}

fn default_master_seed() -> u64 {
    DEFAULT_MASTER_SEED
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            data: DataSource::default(),
            model: UNetConfig::default(),
            train: TrainConfig::default(),
            losses: default_losses(),
            sweeps: default_sweeps(),
            seed: default_master_seed(),
            output_dir: default_output_dir(),
        }
    }
}

impl ProtocolConfig {
    /// Collects every problem across the nested configs, each tagged with
    /// its config path.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match &self.data {
            DataSource::Synthetic { config, val_count } => {
                collect("data.", config.validate(), &mut problems);
                if *val_count == 0 {
                    problems.push("data.val_count: must be ≥ 1".to_string());
                }
                if (config.height, config.width)
                    != (self.model.input_height, self.model.input_width)
                {
                    problems.push(format!(
                        "data: {}×{} rasters do not match model input {}×{}",
                        config.height,
                        config.width,
                        self.model.input_height,
                        self.model.input_width
                    ));
                }
            }
            DataSource::Ingest { .. } => {}
        }
        collect("model.", self.model.validate(), &mut problems);
        collect("train.", self.train.validate(), &mut problems);
        if self.losses.is_empty() {
            problems.push("losses: must not be empty".to_string());
        }
        let mut seen = HashSet::new();
        for (i, labeled) in self.losses.iter().enumerate() {
            let prefix = format!("losses[{i}].");
            if labeled.label.is_empty()
                || labeled.label.contains(',')
                || labeled.label.contains('\n')
            {
                problems.push(format!(
                    "{prefix}label: must be nonempty without commas or newlines"
                ));
            }
            if !seen.insert(labeled.label.clone()) {
                problems.push(format!("{prefix}label: duplicate {:?}", labeled.label));
            }
            collect(&prefix, labeled.spec.validate(), &mut problems);
        }
        if self.sweeps.is_empty() {
            problems.push("sweeps: must not be empty".to_string());
        }
        for (i, sweep) in self.sweeps.iter().enumerate() {
            collect(&format!("sweeps[{i}]."), sweep.validate(), &mut problems);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

fn collect(prefix: &str, r: Result<()>, problems: &mut Vec<String>) {
    if let Err(e) = r {
        match e {
            Error::Config(list) => {
                problems.extend(list.into_iter().map(|p| format!("{prefix}{p}")));
            }
            other => problems.push(format!("{prefix}{other}")),
        }
    }
}

/// Identity of the experiment content: everything except where the
/// artifacts land on disk.
pub fn config_hash(cfg: &ProtocolConfig) -> String {
    #[derive(Serialize)]
    struct HashView<'a> {
        data: &'a DataSource,
        model: &'a UNetConfig,
        train: &'a TrainConfig,
        losses: &'a [LabeledLoss],
        sweeps: &'a [SweepDef],
        seed: u64,
    }
    let json = serde_json::to_string(&HashView {
        data: &cfg.data,
        model: &cfg.model,
        train: &cfg.train,
        losses: &cfg.losses,
        sweeps: &cfg.sweeps,
        seed: cfg.seed,
    })
    .expect("config serializes");
    sha256_hex(json.as_bytes())
}

/// Cache key for one trained model: sweeps do not participate, so editing
/// a sweep grid never forces retraining.
fn model_cache_key(cfg: &ProtocolConfig, labeled: &LabeledLoss) -> String {
    #[derive(Serialize)]
    struct KeyView<'a> {
        data: &'a DataSource,
        model: &'a UNetConfig,
        train: &'a TrainConfig,
        loss: &'a LabeledLoss,
        seed: u64,
    }
    let json = serde_json::to_string(&KeyView {
        data: &cfg.data,
        model: &cfg.model,
        train: &cfg.train,
        loss: labeled,
        seed: cfg.seed,
    })
    .expect("config serializes");
    sha256_hex(json.as_bytes())
}

/// Lowercased label with every non-alphanumeric run collapsed to `-`.
pub fn label_slug(label: &str) -> String {
    let mut slug = String::with_capacity(label.len());
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            slug.push(c.to_ascii_lowercase());
        } else if !slug.ends_with('-') {
            slug.push('-');
        }
    }
    slug.trim_matches('-').to_string()
}

// ── Run manifest ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub label: String,
    /// Model file path relative to the output directory.
    pub model_file: String,
    pub param_count: usize,
    pub epochs_trained: usize,
    pub final_train_loss: f64,
    pub final_val_dice: f64,
    pub clean_val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucEntry {
    pub sweep: String,
    pub model: String,
    pub auc: f64,
}

/// Pairwise robustness comparison on one sweep: the model with the
/// smaller area under its Dice curve loses performance faster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub sweep: String,
    pub model_a: String,
    pub model_b: String,
    pub auc_a: f64,
    pub auc_b: f64,
    /// Absent when the areas tie exactly.
    pub degrades_faster: Option<String>,
}

/// Wall-clock accounting, kept apart from the reproducible fields so two
/// identical runs produce manifests that differ only here.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    pub models: Vec<ModelSummary>,
    pub aucs: Vec<AucEntry>,
    pub verdicts: Vec<Verdict>,
    pub timings: Timings,
}

impl RunManifest {
    /// The manifest with wall-clock noise removed, for comparing runs.
    pub fn without_timings(&self) -> RunManifest {
        RunManifest {
            timings: Timings::default(),
            ..self.clone()
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

// ── Protocol execution ───────────────────────────────────────────────

/// Training summary cached beside each model file so reruns rebuild the
/// manifest without retraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSidecar {
    epochs_trained: usize,
    final_train_loss: f64,
    final_val_dice: f64,
}

#[derive(Default)]
struct Progress {
    models: Vec<ModelSummary>,
    aucs: Vec<AucEntry>,
    verdicts: Vec<Verdict>,
    timings: Timings,
}

/// Runs the whole protocol: datasets, one model per loss, every sweep for
/// every model, rasters, charts, and the manifest. A stage failure still
/// writes the manifest, marked incomplete with the stage name.
pub fn run_protocol(cfg: &ProtocolConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let hash = config_hash(cfg);
    for sub in ["models", "curves", "charts", "artifacts"] {
        let dir = cfg.output_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let started = Instant::now();
    let mut progress = Progress::default();
    let outcome = protocol_stages(cfg, &mut progress);
    progress.timings.total_seconds = started.elapsed().as_secs_f64();

    let (complete, failed_stage) = match &outcome {
        Ok(()) => (true, None),
        Err((stage, e)) => (false, Some(format!("{stage}: {e}"))),
    };
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: cfg.seed,
        config_hash: hash,
        complete,
        failed_stage,
        models: progress.models,
        aucs: progress.aucs,
        verdicts: progress.verdicts,
        timings: progress.timings,
    };
    let manifest_path = cfg.output_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    match outcome {
        Ok(()) => Ok(manifest),
        Err((stage, e)) => Err(stage_error(&stage, e)),
    }
}

type Staged<T> = std::result::Result<T, (String, Error)>;

fn protocol_stages(cfg: &ProtocolConfig, progress: &mut Progress) -> Staged<()> {
    let clock = |name: String, t: Instant, timings: &mut Timings| {
        timings.stages.push((name, t.elapsed().as_secs_f64()));
    };

    let t = Instant::now();
    let (train_set, val_set) =
        load_datasets(&cfg.data).map_err(|e| ("load-data".to_string(), e))?;
    clock("load-data".to_string(), t, &mut progress.timings);

    // same initial weights for every loss regime, so the comparison only
    // varies the training objective
    let init_seed = rng::derive_seed(cfg.seed, 0, 1);
    let mut models = Vec::with_capacity(cfg.losses.len());
    for labeled in &cfg.losses {
        let stage = format!("train[{}]", labeled.label);
        let t = Instant::now();
        let (model, summary) = train_or_load(cfg, labeled, init_seed, &train_set, &val_set)
            .map_err(|e| (stage.clone(), e))?;
        clock(stage, t, &mut progress.timings);
        progress.models.push(summary);
        models.push(model);
    }

    let sweep_base = rng::derive_seed(cfg.seed, 0, 2);
    for (j, def) in cfg.sweeps.iter().enumerate() {
        let stage = format!("sweep[{}]", def.name());
        let t = Instant::now();
        let mut curves = Vec::with_capacity(models.len());
        for (i, (model, labeled)) in models.iter().zip(&cfg.losses).enumerate() {
            let curve = run_sweep(
                model,
                &labeled.label,
                &val_set,
                def,
                rng::derive_seed(sweep_base, i, j),
            )
            .map_err(|e| (stage.clone(), e))?;
            progress.aucs.push(AucEntry {
                sweep: def.name().to_string(),
                model: labeled.label.clone(),
                auc: curve.auc(),
            });
            curves.push(curve);
        }
        for a in 0..curves.len() {
            for b in a + 1..curves.len() {
                progress.verdicts.push(verdict(&curves[a], &curves[b]));
            }
        }
        let csv = cfg.output_dir.join("curves").join(format!("{}.csv", def.name()));
        write_curves_csv(&csv, &curves).map_err(|e| (stage.clone(), e))?;
        let svg = cfg.output_dir.join("charts").join(format!("{}.svg", def.name()));
        write_curves_svg(&svg, &curves, def.name()).map_err(|e| (stage.clone(), e))?;
        clock(stage, t, &mut progress.timings);
    }

    for (model, labeled) in models.iter().zip(&cfg.losses) {
        let stage = format!("render[{}]", labeled.label);
        let t = Instant::now();
        render_model_artifacts(cfg, model, &labeled.label, &val_set)
            .map_err(|e| (stage.clone(), e))?;
        clock(stage, t, &mut progress.timings);
    }
    Ok(())
}

fn verdict(a: &RobustnessCurve, b: &RobustnessCurve) -> Verdict {
    let (auc_a, auc_b) = (a.auc(), b.auc());
    let degrades_faster = if auc_a < auc_b {
        Some(a.model.clone())
    } else if auc_b < auc_a {
        Some(b.model.clone())
    } else {
        None
    };
    Verdict {
        sweep: a.sweep.clone(),
        model_a: a.model.clone(),
        model_b: b.model.clone(),
        auc_a,
        auc_b,
        degrades_faster,
    }
}

fn train_or_load(
    cfg: &ProtocolConfig,
    labeled: &LabeledLoss,
    init_seed: u64,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<(Model, ModelSummary)> {
    let key = model_cache_key(cfg, labeled);
    let file_name = format!("{}-{}.srun", label_slug(&labeled.label), &key[..16]);
    let model_path = cfg.output_dir.join("models").join(&file_name);
    let sidecar_path = model_path.with_extension("train.json");

    if let (Ok(model), Ok(text)) = (
        load_model(&model_path),
        std::fs::read_to_string(&sidecar_path),
    ) {
        if model.label == labeled.label {
            if let Ok(sidecar) = serde_json::from_str::<TrainSidecar>(&text) {
                let summary = summarize(&model, labeled, &file_name, &sidecar, val_set)?;
                return Ok((model, summary));
            }
        }
    }

    let mut model = build_unet(&cfg.model, init_seed)?;
    model.label = labeled.label.clone();
    let (model, history) = train(model, train_set, val_set, &labeled.spec, &cfg.train)?;
    save_model(&model, &model_path)?;
    let last = history.epochs.last().expect("training ran at least one epoch");
    let sidecar = TrainSidecar {
        epochs_trained: history.epochs.len(),
        final_train_loss: last.train_loss,
        final_val_dice: last.val_dice,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&sidecar_path, json + "\n").map_err(|e| Error::io(&sidecar_path, e))?;
    let summary = summarize(&model, labeled, &file_name, &sidecar, val_set)?;
    Ok((model, summary))
}

fn summarize(
    model: &Model,
    labeled: &LabeledLoss,
    file_name: &str,
    sidecar: &TrainSidecar,
    val_set: &Dataset,
) -> Result<ModelSummary> {
    Ok(ModelSummary {
        label: labeled.label.clone(),
        model_file: format!("models/{file_name}"),
        param_count: model.param_count(),
        epochs_trained: sidecar.epochs_trained,
        final_train_loss: sidecar.final_train_loss,
        final_val_dice: sidecar.final_val_dice,
        clean_val_dice: clean_mean_dice(model, val_set)?,
    })
}

/// Saliency PGM, mask/saliency overlay, attacked-prediction panel, and
/// the image/prediction/mask triptych for one model's showcase sample.
fn render_model_artifacts(
    cfg: &ProtocolConfig,
    model: &Model,
    label: &str,
    val_set: &Dataset,
) -> Result<()> {
    let dir = cfg.output_dir.join("artifacts").join(label_slug(label));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let sample = &val_set.samples[0];
    let (h, w) = (sample.height(), sample.width());

    let sal = input_saliency(model, sample)?;
    write_raster_pgm(&dir.join("saliency.pgm"), &sal.values)?;

    let peak = sal.values.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let threshold = peak * OVERLAY_DISPLAY_FRACTION;
    overlay_pgm(&sample.image, &sample.mask, &sal.values, threshold)?
        .write(&dir.join("overlay.pgm"))?;

    let predict = |image: &Tensor<f32>| -> Result<Tensor<f32>> {
        model
            .forward(&image.reshaped(&[1, h, w])?, OutputMode::Probabilities)?
            .reshaped(&[h, w])
    };

    // prediction collapse across the wide noise levels, k sites from the
    // clean saliency map
    let levels = cfg
        .sweeps
        .iter()
        .find_map(|def| match def {
            SweepDef::NoiseLevelFixed { k, levels } | SweepDef::NoiseLevelWide { k, levels } => {
                Some((*k, levels.clone()))
            }
            _ => None,
        })
        .unwrap_or((default_k(), wide_levels()));
    let sites = top_k_sites(&sal, levels.0.min(h * w), Selection::ByAbs)?;
    let mut frames = Vec::new();
    for level in &levels.1 {
        let attacked = crate::attack::apply_fixed(&sample.image, &sites, *level as f32)?;
        frames.push(mask_pgm(&predict(&attacked)?, SCORE_THRESHOLD)?);
    }
    tile_horizontal(&frames, 1)?.write(&dir.join("attack-panel.pgm"))?;

    let (image_pgm, _, _) = normalized_pgm(&sample.image)?;
    let triptych = [
        image_pgm,
        mask_pgm(&predict(&sample.image)?, SCORE_THRESHOLD)?,
        mask_pgm(&sample.mask, 0.5)?,
    ];
    tile_horizontal(&triptych, 1)?.write(&dir.join("prediction.pgm"))?;
    Ok(())
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("stage {stage}: {m}")),
        Error::Contract(m) => Error::Contract(format!("stage {stage}: {m}")),
        Error::Train(m) => Error::Train(format!("stage {stage}: {m}")),
        Error::Config(v) => Error::Config(
            v.into_iter()
                .map(|p| format!("stage {stage}: {p}"))
                .collect(),
        ),
        other => other,
    }
}
