//! U-Net topology: parameter layout, seeded initialization, and the forward
//! graph shared by training, inference, and saliency.
//!
//! The architecture is the classic shape, kept small: `depth` encoder
//! levels of two 3×3 conv+relu each with 2×2 max-pool between, a two-conv
//! bottleneck, then mirrored decoder levels of nearest-neighbor upsample,
//! skip concatenation, and two conv+relu, finished by a 1×1 conv producing
//! a single logit map the same size as the input.

use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

fn default_depth() -> usize {
    2
}
fn default_base_channels() -> usize {
    8
}
fn default_kernel_size() -> usize {
    3
}
fn default_input_extent() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_input_extent")]
    pub input_height: usize,
    #[serde(default = "default_input_extent")]
    pub input_width: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: default_depth(),
            base_channels: default_base_channels(),
            kernel_size: default_kernel_size(),
            input_height: default_input_extent(),
            input_width: default_input_extent(),
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.depth < 1 {
            problems.push("depth: must be ≥ 1".to_string());
        }
        if self.base_channels < 1 {
            problems.push("base_channels: must be ≥ 1".to_string());
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            problems.push(format!(
                "kernel_size: must be odd, got {}",
                self.kernel_size
            ));
        }
        let modulus = 1usize << self.depth.min(31);
        if self.depth >= 1 && self.input_height % modulus != 0 {
            problems.push(format!(
                "input_height: {} is not divisible by 2^depth = {modulus}",
                self.input_height
            ));
        }
        if self.depth >= 1 && self.input_width % modulus != 0 {
            problems.push(format!(
                "input_width: {} is not divisible by 2^depth = {modulus}",
                self.input_width
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Analytic parameter count: Σ over conv layers of F·C·k² + F.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let conv = |f: usize, c: usize| f * c * k2 + f;
        let mut total = 0;
        for level in 0..self.depth {
            let ch = self.channels_at(level);
            let ch_in = if level == 0 {
                1
            } else {
                self.channels_at(level - 1)
            };
            total += conv(ch, ch_in) + conv(ch, ch);
        }
        let bottom = self.channels_at(self.depth);
        total += conv(bottom, self.channels_at(self.depth - 1)) + conv(bottom, bottom);
        for level in (0..self.depth).rev() {
            let ch = self.channels_at(level);
            let from_below = self.channels_at(level + 1);
            total += conv(ch, from_below + ch) + conv(ch, ch);
        }
        // 1×1 head
        total += self.channels_at(0) + 1;
        total
    }
}

/// Name and shape of one parameter tensor; the order of
/// [`param_specs`]'s output is the canonical parameter order everywhere
/// (initialization, the forward graph, the model file).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn param_specs(config: &UNetConfig) -> Vec<ParamSpec> {
    let k = config.kernel_size;
    let mut specs = Vec::new();
    let mut push_conv = |name: &str, f: usize, c: usize, k: usize| {
        specs.push(ParamSpec {
            name: format!("{name}.kernel"),
            shape: vec![f, c, k, k],
        });
        specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![f],
        });
    };
    for level in 0..config.depth {
        let ch = config.channels_at(level);
        let ch_in = if level == 0 {
            1
        } else {
            config.channels_at(level - 1)
        };
        push_conv(&format!("enc{level}.conv1"), ch, ch_in, k);
        push_conv(&format!("enc{level}.conv2"), ch, ch, k);
    }
    let bottom = config.channels_at(config.depth);
    push_conv("bottleneck.conv1", bottom, config.channels_at(config.depth - 1), k);
    push_conv("bottleneck.conv2", bottom, bottom, k);
    for level in (0..config.depth).rev() {
        let ch = config.channels_at(level);
        let from_below = config.channels_at(level + 1);
        push_conv(&format!("dec{level}.conv1"), ch, from_below + ch, k);
        push_conv(&format!("dec{level}.conv2"), ch, ch, k);
    }
    push_conv("head", 1, config.channels_at(0), 1);
    specs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Probabilities,
    Logits,
}

/// A U-Net with concrete parameter values. Immutable during inference;
/// training consumes and returns it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: UNetConfig,
    pub label: String,
    params: Vec<(String, Tensor<f32>)>,
}

impl Model {
    /// Reassembles a model from named tensors, enforcing the canonical
    /// parameter layout for the config.
    pub fn from_params(
        config: UNetConfig,
        label: String,
        params: Vec<(String, Tensor<f32>)>,
    ) -> Result<Model> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors for this config, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, (name, tensor)) in specs.iter().zip(&params) {
            if &spec.name != name {
                return Err(Error::contract(format!(
                    "parameter {name:?} out of order, expected {:?}",
                    spec.name
                )));
            }
            if spec.shape != tensor.shape() {
                return Err(Error::contract(format!(
                    "parameter {name}: shape {:?} does not match config shape {:?}",
                    tensor.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Model {
            config,
            label,
            params,
        })
    }

    pub fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<(String, Tensor<f32>)> {
        &mut self.params
    }

    /// Parameter count by enumeration of the stored tensors.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Runs the network on one `[1,H,W]` image.
    pub fn forward(&self, image: &Tensor<f32>, mode: OutputMode) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let vars = self.input_params(&mut tape);
        let img = tape.input(self.check_image(image)?.clone());
        let logits = forward_graph(&mut tape, &self.config, &vars, img)?;
        let out = match mode {
            OutputMode::Logits => logits,
            OutputMode::Probabilities => tape.sigmoid(logits),
        };
        Ok(tape.value(out).clone())
    }

    /// Double-precision forward pass, used when verifying gradients.
    pub fn forward_double(&self, image: &Tensor<f64>, mode: OutputMode) -> Result<Tensor<f64>> {
        let want = [1, self.config.input_height, self.config.input_width];
        if image.shape() != want {
            return Err(Error::shape(format!(
                "image shape {:?} does not match model input {want:?}",
                image.shape()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.input_params(&mut tape);
        let img = tape.input(image.clone());
        let logits = forward_graph(&mut tape, &self.config, &vars, img)?;
        let out = match mode {
            OutputMode::Logits => logits,
            OutputMode::Probabilities => tape.sigmoid(logits),
        };
        Ok(tape.value(out).clone())
    }

    pub(crate) fn check_image<'a>(&self, image: &'a Tensor<f32>) -> Result<&'a Tensor<f32>> {
        let want = [1, self.config.input_height, self.config.input_width];
        if image.shape() != want {
            return Err(Error::shape(format!(
                "image shape {:?} does not match model input {want:?}",
                image.shape()
            )));
        }
        Ok(image)
    }

    pub(crate) fn input_params<T: Scalar>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| tape.input(t.map(|v| T::from_f64(v as f64))))
            .collect()
    }
}

/// He-uniform initialization: kernels uniform in ±√(6/fan_in), biases zero,
/// all draws taken in canonical parameter order from one seeded stream.
pub fn build_unet(config: &UNetConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut stream = rng::stream(seed);
    let mut params = Vec::new();
    for spec in param_specs(config) {
        let tensor = if spec.shape.len() == 4 {
            let fan_in: usize = spec.shape[1..].iter().product();
            let limit = (6.0 / fan_in as f64).sqrt() as f32;
            let n: usize = spec.shape.iter().product();
            let data = (0..n)
                .map(|_| rng::uniform_f32(&mut stream, -limit, limit))
                .collect();
            Tensor::new(&spec.shape, data)?
        } else {
            Tensor::zeros(&spec.shape)
        };
        params.push((spec.name, tensor));
    }
    Model::from_params(*config, String::new(), params)
}

/// Emits the U-Net onto `tape`, returning the `[1,H,W]` logits node.
/// `params` must follow [`param_specs`] order.
pub fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    config: &UNetConfig,
    params: &[Var],
    image: Var,
) -> Result<Var> {
    let expected = param_specs(config).len();
    if params.len() != expected {
        return Err(Error::contract(format!(
            "forward_graph: expected {expected} parameter vars, got {}",
            params.len()
        )));
    }
    let mut next = params.iter().copied();
    let mut conv_relu = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let kernel = next.next().expect("parameter count checked above");
        let bias = next.next().expect("parameter count checked above");
        let conv = tape.conv2d(x, kernel, bias)?;
        Ok(tape.relu(conv))
    };

    let mut skips = Vec::with_capacity(config.depth);
    let mut cur = image;
    for _ in 0..config.depth {
        cur = conv_relu(tape, cur)?;
        cur = conv_relu(tape, cur)?;
        skips.push(cur);
        cur = tape.maxpool2x2(cur)?;
    }
    cur = conv_relu(tape, cur)?;
    cur = conv_relu(tape, cur)?;
    for skip in skips.into_iter().rev() {
        cur = tape.upsample2x2(cur)?;
        cur = tape.concat_channels(cur, skip)?;
        cur = conv_relu(tape, cur)?;
        cur = conv_relu(tape, cur)?;
    }
    // 1×1 head emits raw logits, no activation
    let kernel = next.next().expect("parameter count checked above");
    let bias = next.next().expect("parameter count checked above");
    tape.conv2d(cur, kernel, bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_forward_keeps_input_size() {
        let config = UNetConfig::default();
        let model = build_unet(&config, 1).unwrap();
        let image = Tensor::zeros(&[1, 32, 32]);
        let out = model.forward(&image, OutputMode::Probabilities).unwrap();
        assert_eq!(out.shape(), &[1, 32, 32]);
        assert!(out.data().iter().all(|p| (0.0..1.0).contains(p) && *p > 0.0));
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let config = UNetConfig::default();
        let a = build_unet(&config, 9).unwrap();
        let b = build_unet(&config, 9).unwrap();
        assert_eq!(a, b);
        let c = build_unet(&config, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn probabilities_are_sigmoid_of_logits() {
        let config = UNetConfig {
            input_height: 8,
            input_width: 8,
            base_channels: 4,
            ..UNetConfig::default()
        };
        let model = build_unet(&config, 3).unwrap();
        let mut stream = rng::stream(4);
        let data: Vec<f32> = (0..64).map(|_| rng::uniform_f32(&mut stream, 0.0, 0.2)).collect();
        let image = Tensor::new(&[1, 8, 8], data).unwrap();
        let probs = model.forward(&image, OutputMode::Probabilities).unwrap();
        let logits = model.forward(&image, OutputMode::Logits).unwrap();
        for (p, l) in probs.data().iter().zip(logits.data()) {
            let want = 1.0 / (1.0 + (-l).exp());
            assert!((p - want).abs() < 1e-7, "{p} vs σ({l}) = {want}");
        }
    }

    #[test]
    fn forward_rejects_wrong_input_size() {
        let model = build_unet(&UNetConfig::default(), 1).unwrap();
        let image = Tensor::zeros(&[1, 16, 16]);
        assert!(matches!(
            model.forward(&image, OutputMode::Logits),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn config_validation_reports_all_problems() {
        let bad = UNetConfig {
            depth: 2,
            base_channels: 0,
            kernel_size: 4,
            input_height: 30,
            input_width: 32,
        };
        match bad.validate() {
            Err(Error::Config(problems)) => assert_eq!(problems.len(), 3, "{problems:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn param_count_formula_matches_enumeration_over_grid() {
        for depth in [1, 2, 3] {
            for base in [4, 8, 16] {
                let extent = 1usize << (depth + 2);
                let config = UNetConfig {
                    depth,
                    base_channels: base,
                    kernel_size: 3,
                    input_height: extent,
                    input_width: extent,
                };
                let model = build_unet(&config, 0).unwrap();
                assert_eq!(
                    config.param_count(),
                    model.param_count(),
                    "depth {depth}, base {base}"
                );
            }
        }
    }

    #[test]
    fn default_param_count_is_pinned() {
        // depth 2, base 8, kernel 3: hand-summed layer by layer
        assert_eq!(UNetConfig::default().param_count(), 29_617);
    }

    #[test]
    fn from_params_rejects_reordered_or_misshaped_tensors() {
        let config = UNetConfig {
            depth: 1,
            base_channels: 2,
            kernel_size: 3,
            input_height: 8,
            input_width: 8,
        };
        let good = build_unet(&config, 5).unwrap();
        let mut swapped = good.params().to_vec();
        swapped.swap(0, 1);
        assert!(Model::from_params(config, String::new(), swapped).is_err());

        let mut misshaped = good.params().to_vec();
        misshaped[0].1 = Tensor::zeros(&[2, 1, 5, 5]);
        assert!(Model::from_params(config, String::new(), misshaped).is_err());
    }
}
