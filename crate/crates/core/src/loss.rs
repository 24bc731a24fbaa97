//! Segmentation losses and the Dice evaluation metric.
//!
//! Three base losses (binary cross-entropy, squared-denominator Dice, focal)
//! plus arbitrary positive-weighted combinations. Every loss is built as a
//! graph on a [`Tape`], so gradients come from the same reverse pass the
//! model training uses. [`LossSpec`] carries the configuration and has a
//! canonical text form (see [`LossSpec::parse`]) used by CLI flags, config
//! files, and model labels.

use std::fmt;
use std::str::FromStr;

use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Probabilities are clamped to `[CLAMP_EPS, 1 − CLAMP_EPS]` before any log.
pub const CLAMP_EPS: f64 = 1e-7;
pub const DICE_EPS_DEFAULT: f64 = 1e-6;
pub const FOCAL_ALPHA_DEFAULT: f64 = 0.25;
pub const FOCAL_GAMMA_DEFAULT: f64 = 2.0;

/// Loss selector. The text form accepted by [`LossSpec::parse`]:
///
/// ```text
/// spec   := term ('+' term)*
/// term   := [number '*'] atom
/// atom   := 'bce'
///         | 'dice' [ '(eps=' number ')' ]
///         | 'focal' [ '(' (alpha|gamma) '=' number, ... ')' ]
/// ```
///
/// Examples: `bce`, `dice(eps=1e-6)`, `bce+dice`,
/// `bce+dice+focal(alpha=0.25,gamma=2)`, `0.5*bce+2*dice`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LossSpec {
    Bce,
    Dice { eps: f64 },
    Focal { alpha: f64, gamma: f64 },
    Weighted(Vec<(f64, LossSpec)>),
}

impl LossSpec {
    pub fn dice() -> Self {
        LossSpec::Dice {
            eps: DICE_EPS_DEFAULT,
        }
    }

    pub fn focal() -> Self {
        LossSpec::Focal {
            alpha: FOCAL_ALPHA_DEFAULT,
            gamma: FOCAL_GAMMA_DEFAULT,
        }
    }

    /// The four regimes compared throughout the experiments.
    pub fn standard_four() -> Vec<(String, LossSpec)> {
        vec![
            ("BCE".into(), LossSpec::Bce),
            ("Dice".into(), LossSpec::dice()),
            (
                "BCE+Dice".into(),
                LossSpec::Weighted(vec![(1.0, LossSpec::Bce), (1.0, LossSpec::dice())]),
            ),
            (
                "BCE+Dice+Focal".into(),
                LossSpec::Weighted(vec![
                    (1.0, LossSpec::Bce),
                    (1.0, LossSpec::dice()),
                    (1.0, LossSpec::focal()),
                ]),
            ),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_at(0)
    }

    fn validate_at(&self, depth: usize) -> Result<()> {
        match self {
            LossSpec::Bce => Ok(()),
            LossSpec::Dice { eps } => {
                if !eps.is_finite() || *eps <= 0.0 {
                    return Err(Error::contract(format!(
                        "dice eps must be a positive real, got {eps}"
                    )));
                }
                Ok(())
            }
            LossSpec::Focal { alpha, gamma } => {
                if !(alpha.is_finite() && *alpha > 0.0 && *alpha < 1.0) {
                    return Err(Error::contract(format!(
                        "focal alpha must lie in (0,1), got {alpha}"
                    )));
                }
                if !gamma.is_finite() || *gamma < 0.0 {
                    return Err(Error::contract(format!(
                        "focal gamma must be ≥ 0, got {gamma}"
                    )));
                }
                Ok(())
            }
            LossSpec::Weighted(terms) => {
                if depth >= 2 {
                    return Err(Error::contract(
                        "weighted combinations may nest at most two levels deep",
                    ));
                }
                if terms.is_empty() {
                    return Err(Error::Config(vec![
                        "weighted loss combination is empty".into()
                    ]));
                }
                for (w, spec) in terms {
                    if !w.is_finite() || *w <= 0.0 {
                        return Err(Error::contract(format!(
                            "combination weight must be > 0, got {w}"
                        )));
                    }
                    spec.validate_at(depth + 1)?;
                }
                Ok(())
            }
        }
    }

    /// Emits the loss graph over probabilities `p` and binary targets `y`,
    /// returning the scalar loss node.
    pub fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: Var, y: Var) -> Result<Var> {
        self.validate()?;
        check_pair(tape.value(p), tape.value(y))?;
        self.emit(tape, p, y)
    }

    fn emit<T: Scalar>(&self, tape: &mut Tape<T>, p: Var, y: Var) -> Result<Var> {
        match self {
            LossSpec::Bce => build_bce(tape, p, y),
            LossSpec::Dice { eps } => build_dice(tape, p, y, *eps),
            LossSpec::Focal { alpha, gamma } => build_focal(tape, p, y, *alpha, *gamma),
            LossSpec::Weighted(terms) => {
                let mut total: Option<Var> = None;
                for (w, spec) in terms {
                    let part = spec.emit(tape, p, y)?;
                    let scaled = tape.scale(part, T::from_f64(*w));
                    total = Some(match total {
                        None => scaled,
                        Some(t) => tape.add(t, scaled)?,
                    });
                }
                total.ok_or_else(|| {
                    Error::Config(vec!["weighted loss combination is empty".into()])
                })
            }
        }
    }

    /// Parses the canonical text form (case-insensitive).
    pub fn parse(text: &str) -> Result<LossSpec> {
        let text = text.trim().to_ascii_lowercase();
        if text.is_empty() {
            return Err(parse_err("empty loss spec"));
        }
        let terms: Vec<(f64, LossSpec)> = split_top_level(&text)?
            .into_iter()
            .map(|t| parse_term(t.trim()))
            .collect::<Result<_>>()?;
        let spec = match terms.as_slice() {
            [(w, atom)] if *w == 1.0 => atom.clone(),
            _ => LossSpec::Weighted(terms),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_err(msg: impl fmt::Display) -> Error {
    Error::contract(format!("loss spec: {msg}"))
}

/// Splits on '+' outside parentheses, skipping '+' inside exponents (`1e+3`).
fn split_top_level(s: &str) -> Result<Vec<&str>> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let bytes = s.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'(' => depth += 1,
            b')' => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| parse_err("unbalanced ')'"))?;
            }
            b'+' if depth == 0 => {
                // `1e+3` keeps its '+': an exponent sign sits between
                // `<digit>e` and a digit, anything else is a separator
                let in_exponent = i >= 2
                    && bytes[i - 1] == b'e'
                    && (bytes[i - 2].is_ascii_digit() || bytes[i - 2] == b'.')
                    && bytes.get(i + 1).is_some_and(u8::is_ascii_digit);
                if !in_exponent {
                    parts.push(&s[start..i]);
                    start = i + 1;
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(parse_err("unbalanced '('"));
    }
    parts.push(&s[start..]);
    Ok(parts)
}

fn parse_term(term: &str) -> Result<(f64, LossSpec)> {
    if term.is_empty() {
        return Err(parse_err("empty term (stray '+')"));
    }
    let (weight, atom_text) = match term.find('*') {
        Some(pos) => {
            let w: f64 = term[..pos]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad weight '{}'", &term[..pos])))?;
            (w, term[pos + 1..].trim())
        }
        None => (1.0, term),
    };
    Ok((weight, parse_atom(atom_text)?))
}

fn parse_atom(atom: &str) -> Result<LossSpec> {
    let (name, params) = match atom.find('(') {
        Some(pos) => {
            if !atom.ends_with(')') {
                return Err(parse_err(format!("'{atom}' is missing a closing ')'")));
            }
            (atom[..pos].trim(), Some(&atom[pos + 1..atom.len() - 1]))
        }
        None => (atom.trim(), None),
    };
    let params = parse_params(params)?;
    match name {
        "bce" => {
            if !params.is_empty() {
                return Err(parse_err("bce takes no parameters"));
            }
            Ok(LossSpec::Bce)
        }
        "dice" => {
            let mut eps = DICE_EPS_DEFAULT;
            for (k, v) in params {
                match k {
                    "eps" => eps = v,
                    _ => return Err(parse_err(format!("dice has no parameter '{k}'"))),
                }
            }
            Ok(LossSpec::Dice { eps })
        }
        "focal" => {
            let (mut alpha, mut gamma) = (FOCAL_ALPHA_DEFAULT, FOCAL_GAMMA_DEFAULT);
            for (k, v) in params {
                match k {
                    "alpha" => alpha = v,
                    "gamma" => gamma = v,
                    _ => return Err(parse_err(format!("focal has no parameter '{k}'"))),
                }
            }
            Ok(LossSpec::Focal { alpha, gamma })
        }
        other => Err(parse_err(format!(
            "unknown loss '{other}' (expected bce, dice, or focal)"
        ))),
    }
}

fn parse_params(params: Option<&str>) -> Result<Vec<(&str, f64)>> {
    let Some(params) = params else {
        return Ok(Vec::new());
    };
    let params = params.trim();
    if params.is_empty() {
        return Ok(Vec::new());
    }
    params
        .split(',')
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got '{kv}'")))?;
            let value: f64 = v
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad number '{}' for '{}'", v.trim(), k.trim())))?;
            Ok((k.trim(), value))
        })
        .collect()
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::Bce => write!(f, "bce"),
            LossSpec::Dice { eps } => {
                if *eps == DICE_EPS_DEFAULT {
                    write!(f, "dice")
                } else {
                    write!(f, "dice(eps={eps})")
                }
            }
            LossSpec::Focal { alpha, gamma } => write!(f, "focal(alpha={alpha},gamma={gamma})"),
            LossSpec::Weighted(terms) => {
                for (i, (w, spec)) in terms.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    if *w != 1.0 {
                        write!(f, "{w}*")?;
                    }
                    // nested combinations need grouping the text form cannot
                    // express; they only arise from programmatic construction
                    match spec {
                        LossSpec::Weighted(_) => write!(f, "({spec})")?,
                        _ => write!(f, "{spec}")?,
                    }
                }
                Ok(())
            }
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossSpec::parse(s)
    }
}

impl TryFrom<String> for LossSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        LossSpec::parse(&s)
    }
}

impl From<LossSpec> for String {
    fn from(spec: LossSpec) -> String {
        spec.to_string()
    }
}

fn check_pair<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::shape(format!(
            "prediction shape {:?} does not match target shape {:?}",
            p.shape(),
            y.shape()
        )));
    }
    for (i, &v) in y.data().iter().enumerate() {
        if v != T::zero() && v != T::one() {
            return Err(Error::contract(format!(
                "target must be strictly binary, found {v} at flat index {i}"
            )));
        }
    }
    Ok(())
}

fn clamp_probs<T: Scalar>(tape: &mut Tape<T>, p: Var) -> Var {
    tape.clamp(p, T::from_f64(CLAMP_EPS), T::from_f64(1.0 - CLAMP_EPS))
}

/// Mean over pixels of −[y·log p + (1−y)·log(1−p)].
fn build_bce<T: Scalar>(tape: &mut Tape<T>, p: Var, y: Var) -> Result<Var> {
    let pc = clamp_probs(tape, p);
    let log_p = tape.log(pc);
    let one_minus_p = tape.one_minus(pc);
    let log_not_p = tape.log(one_minus_p);
    let not_y = tape.one_minus(y);
    let fg = tape.mul(y, log_p)?;
    let bg = tape.mul(not_y, log_not_p)?;
    let per_pixel = tape.add(fg, bg)?;
    let mean = tape.mean(per_pixel);
    Ok(tape.scale(mean, -T::one()))
}

/// 1 − (2·Σpy + ε) / (Σp² + Σy² + ε), the squared-denominator Dice form.
fn build_dice<T: Scalar>(tape: &mut Tape<T>, p: Var, y: Var, eps: f64) -> Result<Var> {
    let eps = T::from_f64(eps);
    let py = tape.mul(p, y)?;
    let inter = tape.sum(py);
    let pp = tape.mul(p, p)?;
    let yy = tape.mul(y, y)?;
    let sum_pp = tape.sum(pp);
    let sum_yy = tape.sum(yy);
    let num = tape.affine(inter, T::from_f64(2.0), eps);
    let den_raw = tape.add(sum_pp, sum_yy)?;
    let den = tape.affine(den_raw, T::one(), eps);
    let ratio = tape.div(num, den)?;
    Ok(tape.one_minus(ratio))
}

/// Mean over pixels of −α_t·(1 − p_t)^γ·log(p_t) with p_t the probability
/// assigned to the true class and α_t = α on foreground, 1−α on background.
fn build_focal<T: Scalar>(tape: &mut Tape<T>, p: Var, y: Var, alpha: f64, gamma: f64) -> Result<Var> {
    let pc = clamp_probs(tape, p);
    let not_p = tape.one_minus(pc);
    let not_y = tape.one_minus(y);
    let fg = tape.mul(y, pc)?;
    let bg = tape.mul(not_y, not_p)?;
    let p_t = tape.add(fg, bg)?;
    // α_t = α·y + (1−α)·(1−y) collapses to one affine map of y
    let alpha = T::from_f64(alpha);
    let alpha_t = tape.affine(y, alpha + alpha - T::one(), T::one() - alpha);
    let hard = tape.one_minus(p_t);
    let focus = tape.pow_const(hard, T::from_f64(gamma));
    let log_pt = tape.log(p_t);
    let weighted = tape.mul(alpha_t, focus)?;
    let per_pixel = tape.mul(weighted, log_pt)?;
    let mean = tape.mean(per_pixel);
    Ok(tape.scale(mean, -T::one()))
}

/// Overlap score on binarized predictions: 2|P∩Y| / (|P|+|Y|), where
/// P = {pred > threshold}. Both sets empty scores 1.0.
pub fn dice_score<T: Scalar>(pred: &Tensor<T>, y: &Tensor<T>, threshold: f64) -> Result<f64> {
    if pred.shape() != y.shape() {
        return Err(Error::shape(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.shape(),
            y.shape()
        )));
    }
    let mut inter = 0usize;
    let mut pred_fg = 0usize;
    let mut true_fg = 0usize;
    for (i, (&pv, &yv)) in pred.data().iter().zip(y.data()).enumerate() {
        if yv != T::zero() && yv != T::one() {
            return Err(Error::contract(format!(
                "target must be strictly binary, found {yv} at flat index {i}"
            )));
        }
        let p_in = pv.to_f64() > threshold;
        let y_in = yv == T::one();
        pred_fg += p_in as usize;
        true_fg += y_in as usize;
        inter += (p_in && y_in) as usize;
    }
    if pred_fg + true_fg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (pred_fg + true_fg) as f64)
}

/// Convenience: evaluates a loss spec on plain tensors, no graph reuse.
pub fn eval_loss<T: Scalar>(spec: &LossSpec, p: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.input(p.clone());
    let yv = tape.input(y.clone());
    let root = spec.build(&mut tape, pv, yv)?;
    Ok(tape.value(root).item().to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(p: &[f64], y: &[f64]) -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::new(&[p.len()], p.to_vec()).unwrap(),
            Tensor::new(&[y.len()], y.to_vec()).unwrap(),
        )
    }

    #[test]
    fn bce_single_pixel_half_is_ln_two() {
        let (p, y) = pair(&[0.5], &[1.0]);
        let v = eval_loss(&LossSpec::Bce, &p, &y).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let (p, y) = pair(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 0.0]);
        let v = eval_loss(&LossSpec::Bce, &p, &y).unwrap();
        assert!(v >= 0.0 && v <= 1e-5, "got {v}");
    }

    #[test]
    fn bce_rejects_shape_mismatch() {
        let p = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        let y = Tensor::new(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            eval_loss(&LossSpec::Bce, &p, &y),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn losses_reject_non_binary_target() {
        let (p, y) = pair(&[0.5], &[0.3]);
        assert!(matches!(
            eval_loss(&LossSpec::Bce, &p, &y),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dice_perfect_overlap_is_zero() {
        let (p, y) = pair(&[1.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 1.0, 1.0]);
        let v = eval_loss(&LossSpec::dice(), &p, &y).unwrap();
        assert!(v.abs() < 1e-6, "got {v}");
    }

    #[test]
    fn dice_empty_empty_is_zero_loss() {
        let (p, y) = pair(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        let v = eval_loss(&LossSpec::dice(), &p, &y).unwrap();
        assert!(v.abs() < 1e-12, "got {v}");
    }

    #[test]
    fn dice_matches_hand_computed_example() {
        let (p, y) = pair(&[0.5, 0.5], &[1.0, 0.0]);
        let v = eval_loss(&LossSpec::dice(), &p, &y).unwrap();
        // 1 − (2·0.5 + ε) / (0.25 + 0.25 + 1 + ε) with ε = 1e-6
        let eps = DICE_EPS_DEFAULT;
        let want = 1.0 - (1.0 + eps) / (1.5 + eps);
        assert!((v - want).abs() < 1e-12, "got {v}, want {want}");
        assert!((v - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn focal_matches_hand_computed_example() {
        let (p, y) = pair(&[0.9], &[1.0]);
        let spec = LossSpec::Focal {
            alpha: 0.25,
            gamma: 2.0,
        };
        let v = eval_loss(&spec, &p, &y).unwrap();
        let want = -0.25 * 0.01f64 * 0.9f64.ln();
        assert!((v - want).abs() < 1e-10, "got {v}, want {want}");
        assert!((v - 2.634e-4).abs() < 1e-6);
    }

    #[test]
    fn focal_downweights_easy_pixels_faster_than_bce() {
        let (p, y) = pair(&[0.99], &[1.0]);
        let focal = eval_loss(
            &LossSpec::Focal {
                alpha: 0.25,
                gamma: 2.0,
            },
            &p,
            &y,
        )
        .unwrap();
        let bce = eval_loss(&LossSpec::Bce, &p, &y).unwrap();
        assert!(focal / bce < 1e-3, "ratio {}", focal / bce);
    }

    #[test]
    fn singleton_combination_equals_component() {
        let (p, y) = pair(&[0.3, 0.8, 0.1], &[0.0, 1.0, 0.0]);
        let single = eval_loss(&LossSpec::Bce, &p, &y).unwrap();
        let wrapped = eval_loss(&LossSpec::Weighted(vec![(1.0, LossSpec::Bce)]), &p, &y).unwrap();
        assert_eq!(single, wrapped);
    }

    #[test]
    fn unit_combination_is_sum_of_parts() {
        let (p, y) = pair(&[0.3, 0.8, 0.1, 0.6], &[0.0, 1.0, 0.0, 1.0]);
        let bce = eval_loss(&LossSpec::Bce, &p, &y).unwrap();
        let dice = eval_loss(&LossSpec::dice(), &p, &y).unwrap();
        let both = eval_loss(
            &LossSpec::Weighted(vec![(1.0, LossSpec::Bce), (1.0, LossSpec::dice())]),
            &p,
            &y,
        )
        .unwrap();
        assert!((both - (bce + dice)).abs() < 1e-7);
    }

    #[test]
    fn empty_combination_is_rejected() {
        let (p, y) = pair(&[0.5], &[1.0]);
        assert!(matches!(
            eval_loss(&LossSpec::Weighted(vec![]), &p, &y),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deep_nesting_is_rejected() {
        let inner = LossSpec::Weighted(vec![(1.0, LossSpec::Bce)]);
        let mid = LossSpec::Weighted(vec![(1.0, inner)]);
        let outer = LossSpec::Weighted(vec![(1.0, mid)]);
        assert!(outer.validate().is_err());
        // two levels stay legal
        let two = LossSpec::Weighted(vec![(
            1.0,
            LossSpec::Weighted(vec![(1.0, LossSpec::Bce)]),
        )]);
        assert!(two.validate().is_ok());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(LossSpec::Focal {
            alpha: 0.0,
            gamma: 2.0
        }
        .validate()
        .is_err());
        assert!(LossSpec::Focal {
            alpha: 1.0,
            gamma: 2.0
        }
        .validate()
        .is_err());
        assert!(LossSpec::Focal {
            alpha: 0.25,
            gamma: -0.1
        }
        .validate()
        .is_err());
        assert!(LossSpec::Dice { eps: 0.0 }.validate().is_err());
        assert!(LossSpec::Weighted(vec![(0.0, LossSpec::Bce)])
            .validate()
            .is_err());
        assert!(LossSpec::Weighted(vec![(-1.0, LossSpec::Bce)])
            .validate()
            .is_err());
    }

    #[test]
    fn parse_accepts_canonical_forms() {
        assert_eq!(LossSpec::parse("bce").unwrap(), LossSpec::Bce);
        assert_eq!(LossSpec::parse("dice").unwrap(), LossSpec::dice());
        assert_eq!(
            LossSpec::parse("dice(eps=1e-6)").unwrap(),
            LossSpec::Dice { eps: 1e-6 }
        );
        assert_eq!(
            LossSpec::parse("focal(alpha=0.25,gamma=2)").unwrap(),
            LossSpec::Focal {
                alpha: 0.25,
                gamma: 2.0
            }
        );
        assert_eq!(
            LossSpec::parse("bce+dice").unwrap(),
            LossSpec::Weighted(vec![(1.0, LossSpec::Bce), (1.0, LossSpec::dice())])
        );
        assert_eq!(
            LossSpec::parse("bce+dice+focal(alpha=0.25,gamma=2)").unwrap(),
            LossSpec::Weighted(vec![
                (1.0, LossSpec::Bce),
                (1.0, LossSpec::dice()),
                (1.0, LossSpec::focal()),
            ])
        );
        assert_eq!(
            LossSpec::parse("0.5*bce+2*dice").unwrap(),
            LossSpec::Weighted(vec![(0.5, LossSpec::Bce), (2.0, LossSpec::dice())])
        );
        // case and whitespace are forgiven
        assert_eq!(
            LossSpec::parse(" BCE + Dice ").unwrap(),
            LossSpec::Weighted(vec![(1.0, LossSpec::Bce), (1.0, LossSpec::dice())])
        );
    }

    #[test]
    fn parse_rejects_malformed_input() {
        for bad in [
            "",
            "mse",
            "bce+",
            "+dice",
            "dice(eps=)",
            "dice(zeta=1)",
            "focal(alpha=2)",
            "bce(x=1)",
            "dice(eps=1e-6",
            "0*bce",
            "-1*dice",
            "focal(alpha)",
        ] {
            assert!(LossSpec::parse(bad).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn display_round_trips_through_parse() {
        let specs = [
            LossSpec::Bce,
            LossSpec::dice(),
            LossSpec::Dice { eps: 0.001 },
            LossSpec::Focal {
                alpha: 0.4,
                gamma: 3.0,
            },
            LossSpec::Weighted(vec![(1.0, LossSpec::Bce), (2.5, LossSpec::dice())]),
            LossSpec::Weighted(vec![
                (1.0, LossSpec::Bce),
                (1.0, LossSpec::dice()),
                (1.0, LossSpec::focal()),
            ]),
        ];
        for spec in specs {
            let text = spec.to_string();
            let back = LossSpec::parse(&text).unwrap();
            assert_eq!(back, spec, "via {text:?}");
        }
    }

    #[test]
    fn serde_uses_text_form() {
        let spec = LossSpec::parse("bce+dice").unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, "\"bce+dice\"");
        let back: LossSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<LossSpec>("\"tversky\"").is_err());
    }

    #[test]
    fn dice_score_basic_cases() {
        let y = Tensor::new(&[4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let same = Tensor::new(&[4], vec![0.9, 0.8, 0.1, 0.2]).unwrap();
        assert_eq!(dice_score(&same, &y, 0.5).unwrap(), 1.0);

        let disjoint = Tensor::new(&[4], vec![0.1, 0.2, 0.9, 0.8]).unwrap();
        assert_eq!(dice_score(&disjoint, &y, 0.5).unwrap(), 0.0);

        // |P|=2, |Y|=2, |P∩Y|=1 → 0.5
        let half = Tensor::new(&[4], vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        assert_eq!(dice_score(&half, &y, 0.5).unwrap(), 0.5);

        let empty_y = Tensor::new(&[4], vec![0.0; 4]).unwrap();
        let empty_p = Tensor::new(&[4], vec![0.1; 4]).unwrap();
        assert_eq!(dice_score(&empty_p, &empty_y, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn dice_score_threshold_is_strict() {
        let y = Tensor::new(&[1], vec![1.0]).unwrap();
        let at = Tensor::new(&[1], vec![0.5]).unwrap();
        // exactly at the threshold counts as background
        assert_eq!(dice_score(&at, &y, 0.5).unwrap(), 0.0);
    }
}
