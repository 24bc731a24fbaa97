//! Brute-force reference implementations shared by the integration tests.
//! Everything here is written directly from the defining formulas, with no
//! code shared with the library under test.

#![allow(dead_code)]

use segrobust::rng;

pub const CLAMP: f64 = 1e-7;

fn clamp(p: f64) -> f64 {
    p.max(CLAMP).min(1.0 - CLAMP)
}

/// Mean of −[y ln p + (1−y) ln(1−p)] as a plain scalar loop.
pub fn bce_oracle(p: &[f64], y: &[f64]) -> f64 {
    assert_eq!(p.len(), y.len());
    let mut total = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let pi = clamp(pi);
        total += -(yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln());
    }
    total / p.len() as f64
}

/// 1 − (2Σpy + ε)/(Σp² + Σy² + ε) as a plain scalar loop.
pub fn dice_oracle(p: &[f64], y: &[f64], eps: f64) -> f64 {
    assert_eq!(p.len(), y.len());
    let (mut inter, mut pp, mut yy) = (0.0, 0.0, 0.0);
    for (&pi, &yi) in p.iter().zip(y) {
        inter += pi * yi;
        pp += pi * pi;
        yy += yi * yi;
    }
    1.0 - (2.0 * inter + eps) / (pp + yy + eps)
}

/// Mean of −α_t (1−p_t)^γ ln(p_t) as a plain scalar loop.
pub fn focal_oracle(p: &[f64], y: &[f64], alpha: f64, gamma: f64) -> f64 {
    assert_eq!(p.len(), y.len());
    let mut total = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let pi = clamp(pi);
        let (p_t, a_t) = if yi == 1.0 {
            (pi, alpha)
        } else {
            (1.0 - pi, 1.0 - alpha)
        };
        total += -a_t * (1.0 - p_t).powf(gamma) * p_t.ln();
    }
    total / p.len() as f64
}

/// Random prediction/target pair: probabilities strictly inside (lo, hi),
/// targets fair coin flips.
pub fn random_pair(stream: &mut rng::Stream, n: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let p: Vec<f64> = (0..n).map(|_| rng::uniform_f64(stream, lo, hi)).collect();
    let y: Vec<f64> = (0..n)
        .map(|_| if rng::unit_f64(stream) < 0.5 { 0.0 } else { 1.0 })
        .collect();
    (p, y)
}
