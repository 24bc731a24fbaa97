//! Input-gradient saliency maps and pixel-replacement attacks.
//!
//! An attack ranks the pixels of a clean image by the gradient of the
//! summed output probabilities with respect to the input, overwrites the
//! top k with a fixed or random value, and measures how far the Dice
//! score falls. Model parameters are never modified.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::loss::dice_score;
use crate::nn::{forward_graph, Model, OutputMode};
use crate::rng::{self, Stream};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::{Error, Result};

/// Binarization threshold applied to predictions before scoring.
pub const SCORE_THRESHOLD: f64 = 0.5;

/// Per-pixel influence of the input on the summed output probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// Signed `[H, W]` gradient raster; always finite.
    pub values: Tensor<f32>,
    pub model_label: String,
    pub sample_id: String,
}

/// 0-based raster coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelSite {
    pub row: usize,
    pub col: usize,
}

/// How pixels are ranked when choosing attack sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Largest |gradient| first.
    #[default]
    ByAbs,
    /// Most positive gradient first.
    BySigned,
}

/// What gets written into the selected pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Replacement {
    /// Every selected pixel takes the same value.
    Fixed { value: f32 },
    /// Each pixel takes an independent uniform draw in `[lo, hi]`; the
    /// whole attack repeats `iterations` times, each iteration seeded from
    /// `seed` and the (sample, iteration) position.
    RandomUniform {
        lo: f32,
        hi: f32,
        iterations: usize,
        seed: u64,
    },
}

/// Whether the saliency map is refreshed while an attack is in progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recompute {
    /// One map per clean image; all k sites come from it.
    #[default]
    Off,
    /// Greedy variant: re-derive the map after each replaced pixel and
    /// take the strongest site not yet attacked.
    PerAttack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Number of pixels to overwrite.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub selection: Selection,
    pub replacement: Replacement,
    #[serde(default)]
    pub recompute: Recompute,
    /// Keep every attacked image inside the outcome. Memory-heavy; off
    /// unless an artifact renderer needs the rasters.
    #[serde(default)]
    pub retain_images: bool,
}

fn default_k() -> usize {
    5
}

impl AttackConfig {
    /// Field-level validation; problems are reported with their config
    /// paths, all at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.k == 0 {
            problems.push("attack.k: must be ≥ 1".to_string());
        }
        match &self.replacement {
            Replacement::Fixed { value } => {
                if !value.is_finite() {
                    problems.push("attack.replacement: value must be finite".to_string());
                }
            }
            Replacement::RandomUniform {
                lo, hi, iterations, ..
            } => {
                if !lo.is_finite() || !hi.is_finite() {
                    problems.push("attack.replacement: lo and hi must be finite".to_string());
                } else if lo > hi {
                    problems.push("attack.replacement: lo must be ≤ hi".to_string());
                }
                if *iterations == 0 {
                    problems.push("attack.replacement: iterations must be ≥ 1".to_string());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn iterations(&self) -> usize {
        match &self.replacement {
            Replacement::Fixed { .. } => 1,
            Replacement::RandomUniform { iterations, .. } => *iterations,
        }
    }
}

/// Result of attacking one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub sample_id: String,
    pub original_dice: f64,
    /// One score per iteration; a single entry for fixed replacement.
    pub attacked_dice: Vec<f64>,
    /// Sites chosen for the first iteration. With single-shot saliency the
    /// same sites serve every iteration.
    pub sites: Vec<PixelSite>,
    /// One attacked image per iteration when `retain_images` is set.
    pub attacked_images: Option<Vec<Tensor<f32>>>,
}

/// Per-sample outcomes plus the dataset-level aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub outcomes: Vec<AttackOutcome>,
    /// Mean clean Dice score over samples.
    pub clean_mean: f64,
    /// Grand mean of attacked Dice over all (sample, iteration) pairs.
    pub attacked_mean: f64,
    /// Sample standard deviation of the per-iteration sample means; zero
    /// when the replacement is deterministic.
    pub attacked_std: f64,
}

/// Gradient of Σ output probabilities with respect to the input image.
pub fn input_saliency(model: &Model, sample: &Sample) -> Result<SaliencyMap> {
    let values = saliency_raster::<f32>(model, &sample.image, None)?;
    finish_map(model, sample, values)
}

/// Like [`input_saliency`] but the scalar root sums probabilities over the
/// mask region only.
pub fn input_saliency_masked(model: &Model, sample: &Sample) -> Result<SaliencyMap> {
    let values = saliency_raster::<f32>(model, &sample.image, Some(&sample.mask))?;
    finish_map(model, sample, values)
}

/// Double-precision variant of [`input_saliency`], for verifying the
/// computed gradient against finite differences.
pub fn input_saliency_double(model: &Model, sample: &Sample) -> Result<Tensor<f64>> {
    saliency_raster::<f64>(model, &sample.image, None)
}

fn finish_map(model: &Model, sample: &Sample, values: Tensor<f32>) -> Result<SaliencyMap> {
    if !values.is_finite() {
        return Err(Error::contract(format!(
            "saliency for sample {} contains non-finite values",
            sample.id
        )));
    }
    Ok(SaliencyMap {
        values,
        model_label: model.label.clone(),
        sample_id: sample.id.clone(),
    })
}

fn saliency_raster<T: Scalar>(
    model: &Model,
    image: &Tensor<f32>,
    mask: Option<&Tensor<f32>>,
) -> Result<Tensor<T>> {
    let (h, w) = raster_dims(image)?;
    if (h, w) != (model.config.input_height, model.config.input_width) {
        return Err(Error::shape(format!(
            "image is {h}×{w} but the model expects {}×{}",
            model.config.input_height, model.config.input_width
        )));
    }
    let mut tape = Tape::<T>::new();
    let params = model.input_params(&mut tape);
    let lifted = image.map(|v| T::from_f64(v as f64)).reshaped(&[1, h, w])?;
    let x = tape.input(lifted);
    let logits = forward_graph(&mut tape, &model.config, &params, x)?;
    let probs = tape.sigmoid(logits);
    let root = match mask {
        None => tape.sum(probs),
        Some(m) => {
            if m.shape() != image.shape() {
                return Err(Error::shape(format!(
                    "mask shape {:?} does not match image shape {:?}",
                    m.shape(),
                    image.shape()
                )));
            }
            let mv = tape.input(m.map(|v| T::from_f64(v as f64)).reshaped(&[1, h, w])?);
            let gated = tape.mul(probs, mv)?;
            tape.sum(gated)
        }
    };
    tape.backward(root)?;
    tape.grad(x).reshaped(&[h, w])
}

/// The k strongest sites, descending by |value| or signed value; ties go
/// to the earlier row-major position.
pub fn top_k_sites(sal: &SaliencyMap, k: usize, selection: Selection) -> Result<Vec<PixelSite>> {
    let (h, w) = raster_dims(&sal.values)?;
    if k > h * w {
        return Err(Error::contract(format!(
            "k = {k} exceeds the {h}×{w} = {} available pixels",
            h * w
        )));
    }
    Ok(site_order(&sal.values, selection)
        .take(k)
        .map(|i| PixelSite {
            row: i / w,
            col: i % w,
        })
        .collect())
}

/// Flat indices in attack priority order. Stable sort keeps row-major
/// order within tie groups.
fn site_order(values: &Tensor<f32>, selection: Selection) -> impl Iterator<Item = usize> + '_ {
    let data = values.data();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = match selection {
            Selection::ByAbs => (data[i].abs(), data[j].abs()),
            Selection::BySigned => (data[i], data[j]),
        };
        b.partial_cmp(&a).expect("saliency values are finite")
    });
    order.into_iter()
}

/// Copy of `image` with `values[i]` written at `sites[i]`; every other
/// pixel stays bit-identical.
pub fn apply_values(
    image: &Tensor<f32>,
    sites: &[PixelSite],
    values: &[f32],
) -> Result<Tensor<f32>> {
    if values.len() != sites.len() {
        return Err(Error::contract(format!(
            "{} replacement values for {} sites",
            values.len(),
            sites.len()
        )));
    }
    let (h, w) = raster_dims(image)?;
    let mut seen = HashSet::with_capacity(sites.len());
    let mut out = image.clone();
    for (site, &v) in sites.iter().zip(values) {
        if site.row >= h || site.col >= w {
            return Err(Error::contract(format!(
                "site ({}, {}) outside the {h}×{w} raster",
                site.row, site.col
            )));
        }
        if !seen.insert(*site) {
            return Err(Error::contract(format!(
                "site ({}, {}) listed twice",
                site.row, site.col
            )));
        }
        out.data_mut()[site.row * w + site.col] = v;
    }
    Ok(out)
}

/// Overwrites every site with the constant `v`.
pub fn apply_fixed(image: &Tensor<f32>, sites: &[PixelSite], v: f32) -> Result<Tensor<f32>> {
    apply_values(image, sites, &vec![v; sites.len()])
}

/// Overwrites each site with an independent uniform draw from `[lo, hi]`,
/// consuming draws in site-list order.
pub fn apply_random(
    image: &Tensor<f32>,
    sites: &[PixelSite],
    lo: f32,
    hi: f32,
    stream: &mut Stream,
) -> Result<Tensor<f32>> {
    if !(lo <= hi) {
        return Err(Error::contract(format!(
            "replacement range [{lo}, {hi}] is empty"
        )));
    }
    let values: Vec<f32> = sites
        .iter()
        .map(|_| rng::uniform_f32(stream, lo, hi))
        .collect();
    apply_values(image, sites, &values)
}

/// Attacks every sample and aggregates the Dice damage.
///
/// Per sample: saliency, top-k site selection, replacement, one forward
/// pass per iteration. Random replacement reseeds each (sample, iteration)
/// from the master seed, so results do not depend on evaluation order.
pub fn evaluate_robustness(
    model: &Model,
    dataset: &Dataset,
    ac: &AttackConfig,
) -> Result<RobustnessReport> {
    ac.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::contract("cannot attack an empty dataset"));
    }
    let iterations = ac.iterations();
    let mut outcomes = Vec::with_capacity(dataset.samples.len());
    for (index, sample) in dataset.samples.iter().enumerate() {
        let outcome = attack_sample(model, sample, index, ac, iterations)
            .map_err(|e| with_sample(&sample.id, e))?;
        outcomes.push(outcome);
    }

    let clean_mean = mean(outcomes.iter().map(|o| o.original_dice));
    let per_iter_means: Vec<f64> = (0..iterations)
        .map(|it| mean(outcomes.iter().map(|o| o.attacked_dice[it])))
        .collect();
    let attacked_mean = mean(per_iter_means.iter().copied());
    let attacked_std = if iterations > 1 {
        sample_std(&per_iter_means)
    } else {
        0.0
    };
    Ok(RobustnessReport {
        outcomes,
        clean_mean,
        attacked_mean,
        attacked_std,
    })
}

fn attack_sample(
    model: &Model,
    sample: &Sample,
    index: usize,
    ac: &AttackConfig,
    iterations: usize,
) -> Result<AttackOutcome> {
    let probs = predict_probs(model, &sample.image)?;
    let original_dice = dice_score(&probs, &sample.mask, SCORE_THRESHOLD)?;

    let clean_sites = match ac.recompute {
        Recompute::Off => {
            let sal = input_saliency(model, sample)?;
            Some(top_k_sites(&sal, ac.k, ac.selection)?)
        }
        Recompute::PerAttack => None,
    };

    let mut attacked_dice = Vec::with_capacity(iterations);
    let mut first_sites = Vec::new();
    let mut retained = ac.retain_images.then(Vec::new);
    for it in 0..iterations {
        let (attacked, sites) = match (&clean_sites, &ac.replacement) {
            (Some(sites), Replacement::Fixed { value }) => {
                (apply_fixed(&sample.image, sites, *value)?, sites.clone())
            }
            (Some(sites), Replacement::RandomUniform { lo, hi, seed, .. }) => {
                let mut stream = rng::stream(rng::derive_seed(*seed, index, it));
                (
                    apply_random(&sample.image, sites, *lo, *hi, &mut stream)?,
                    sites.clone(),
                )
            }
            (None, _) => greedy_attack(model, sample, index, it, ac)?,
        };
        let attacked_probs = predict_probs(model, &attacked)?;
        attacked_dice.push(dice_score(&attacked_probs, &sample.mask, SCORE_THRESHOLD)?);
        if it == 0 {
            first_sites = sites;
        }
        if let Some(images) = retained.as_mut() {
            images.push(attacked);
        }
    }
    Ok(AttackOutcome {
        sample_id: sample.id.clone(),
        original_dice,
        attacked_dice,
        sites: first_sites,
        attacked_images: retained,
    })
}

/// One pixel per round: refresh the saliency map, take the strongest site
/// not yet attacked, overwrite it, repeat k times. Random draws are
/// consumed one per round from the iteration's stream.
fn greedy_attack(
    model: &Model,
    sample: &Sample,
    index: usize,
    iteration: usize,
    ac: &AttackConfig,
) -> Result<(Tensor<f32>, Vec<PixelSite>)> {
    let (h, w) = raster_dims(&sample.image)?;
    if ac.k > h * w {
        return Err(Error::contract(format!(
            "k = {} exceeds the {h}×{w} = {} available pixels",
            ac.k,
            h * w
        )));
    }
    let mut stream = match &ac.replacement {
        Replacement::Fixed { .. } => None,
        Replacement::RandomUniform { seed, .. } => {
            Some(rng::stream(rng::derive_seed(*seed, index, iteration)))
        }
    };
    let mut current = sample.image.clone();
    let mut taken = HashSet::with_capacity(ac.k);
    let mut sites = Vec::with_capacity(ac.k);
    for _ in 0..ac.k {
        let raster = saliency_raster::<f32>(model, &current, None)?;
        let flat = site_order(&raster, ac.selection)
            .find(|i| !taken.contains(i))
            .expect("k ≤ H·W leaves at least one free site");
        taken.insert(flat);
        let site = PixelSite {
            row: flat / w,
            col: flat % w,
        };
        let value = match (&ac.replacement, stream.as_mut()) {
            (Replacement::Fixed { value }, _) => *value,
            (Replacement::RandomUniform { lo, hi, .. }, Some(s)) => {
                rng::uniform_f32(s, *lo, *hi)
            }
            (Replacement::RandomUniform { .. }, None) => unreachable!("stream set above"),
        };
        current.data_mut()[flat] = value;
        sites.push(site);
    }
    Ok((current, sites))
}

fn predict_probs(model: &Model, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = raster_dims(image)?;
    let out = model.forward(&image.reshaped(&[1, h, w])?, OutputMode::Probabilities)?;
    out.reshaped(&[h, w])
}

fn raster_dims(image: &Tensor<f32>) -> Result<(usize, usize)> {
    if image.rank() != 2 {
        return Err(Error::shape(format!(
            "expected a rank-2 raster, got shape {:?}",
            image.shape()
        )));
    }
    Ok((image.shape()[0], image.shape()[1]))
}

fn with_sample(id: &str, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("sample {id}: {m}")),
        Error::Contract(m) => Error::Contract(format!("sample {id}: {m}")),
        other => other,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in xs {
        sum += x;
        n += 1;
    }
    sum / n as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs.iter().copied());
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt()
}
