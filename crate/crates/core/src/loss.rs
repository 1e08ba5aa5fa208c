//! Focal + λ·dice objective over valid timestamps.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 2.0,
            alpha: 0.25,
            dice_eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.gamma >= 0.0
            && self.alpha > 0.0
            && self.alpha < 1.0
            && self.dice_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("loss configuration {self:?}")))
        }
    }
}

/// Scalar loss nodes, kept separately for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub focal: Var,
    pub dice: Var,
}

fn check(tape: &Tape, probs: Var, labels: &[f64], mask: &[bool]) -> Result<usize> {
    let n = tape.value(probs).len();
    if labels.len() != n || mask.len() != n {
        return Err(Error::shape("loss", &[n], &[labels.len(), mask.len()]));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::NoValidTimestamps);
    }
    Ok(valid)
}

/// Mean over valid timestamps of
/// `−α·y·(1−O)^γ·ln O − (1−α)·(1−y)·O^γ·ln(1−O)`, with `O` clamped away from 0 and 1.
pub fn focal_loss(tape: &Tape, probs: Var, labels: &[f64], mask: &[bool], cfg: &LossConfig) -> Result<Var> {
    let valid = check(tape, probs, labels, mask)? as f64;
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let fg = tape.mul(tape.powf(q, cfg.gamma)?, tape.ln(p)?)?;
    let bg = tape.mul(tape.powf(p, cfg.gamma)?, tape.ln(q)?)?;
    let (fg_w, bg_w): (Vec<f64>, Vec<f64>) = labels
        .iter()
        .zip(mask)
        .map(|(&y, &m)| {
            if m {
                (-cfg.alpha * y / valid, -(1.0 - cfg.alpha) * (1.0 - y) / valid)
            } else {
                (0.0, 0.0)
            }
        })
        .unzip();
    let terms = tape.add(tape.mul_const(fg, &fg_w)?, tape.mul_const(bg, &bg_w)?)?;
    tape.sum(terms)
}

/// `1 − (2·Σ O·y + ε) / (Σ O + Σ y + ε)` over valid timestamps.
pub fn dice_loss(tape: &Tape, probs: Var, labels: &[f64], mask: &[bool], cfg: &LossConfig) -> Result<Var> {
    check(tape, probs, labels, mask)?;
    let masked_y: Vec<f64> = labels.iter().zip(mask).map(|(&y, &m)| if m { y } else { 0.0 }).collect();
    let mask_f: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let sum_y: f64 = masked_y.iter().sum();
    let inter = tape.sum(tape.mul_const(probs, &masked_y)?)?;
    let sum_o = tape.sum(tape.mul_const(probs, &mask_f)?)?;
    // smoothing added last on both sides so a hard exact match is exactly zero
    let num = tape.affine(tape.scale(inter, 2.0)?, 1.0, cfg.dice_eps)?;
    let den = tape.affine(tape.affine(sum_o, 1.0, sum_y)?, 1.0, cfg.dice_eps)?;
    let ratio = tape.div(num, den)?;
    tape.affine(ratio, -1.0, 1.0)
}

pub fn total_loss(tape: &Tape, probs: Var, labels: &[f64], mask: &[bool], cfg: &LossConfig) -> Result<LossTerms> {
    let focal = focal_loss(tape, probs, labels, mask, cfg)?;
    let dice = dice_loss(tape, probs, labels, mask, cfg)?;
    let total = tape.add(focal, tape.scale(dice, cfg.lambda)?)?;
    Ok(LossTerms { total, focal, dice })
}

/// Evaluates the three loss values for fixed probabilities.
pub fn loss_values(probs: &[f64], labels: &[f64], mask: &[bool], cfg: &LossConfig) -> Result<(f64, f64, f64)> {
    let tape = Tape::new();
    let o = tape.constant(Tensor::vector(probs.to_vec())?);
    let t = total_loss(&tape, o, labels, mask, cfg)?;
    Ok((tape.item(t.total), tape.item(t.focal), tape.item(t.dice)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn focal(o: &[f64], y: &[f64], cfg: &LossConfig) -> f64 {
        loss_values(o, y, &vec![true; o.len()], cfg).unwrap().1
    }

    fn dice(o: &[f64], y: &[f64], cfg: &LossConfig) -> f64 {
        loss_values(o, y, &vec![true; o.len()], cfg).unwrap().2
    }

    #[test]
    fn confident_correct_predictions_cost_nothing() {
        let y = [1.0, 0.0, 0.0, 1.0];
        let o = [1.0 - 1e-7, 1e-7, 1e-7, 1.0 - 1e-7];
        assert!(focal(&o, &y, &LossConfig::default()) <= 1e-5);
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let cfg = LossConfig {
            gamma: 0.0,
            alpha: 0.5,
            ..Default::default()
        };
        let y = [1.0, 0.0, 1.0, 0.0, 0.0];
        let o: [f64; 5] = [0.7, 0.2, 0.4, 0.9, 0.05];
        let bce: f64 = o
            .iter()
            .zip(&y)
            .map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / o.len() as f64;
        assert!((focal(&o, &y, &cfg) - 0.5 * bce).abs() < 1e-15);
    }

    #[test]
    fn focal_hand_value() {
        let cfg = LossConfig {
            gamma: 2.0,
            alpha: 0.25,
            ..Default::default()
        };
        let expected = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((focal(&[0.5], &[1.0], &cfg) - expected).abs() < 1e-15);
        assert!((expected - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn dice_values() {
        for eps in [1e-3, 1.0, 5.0] {
            let cfg = LossConfig {
                dice_eps: eps,
                ..Default::default()
            };
            let y = [0.0, 1.0, 1.0, 0.0];
            assert_eq!(dice(&y, &y, &cfg), 0.0);
            assert_eq!(dice(&[0.0; 10], &[0.0; 10], &cfg), 0.0);
        }
        let cfg = LossConfig::default();
        assert!((dice(&[1.0, 0.0], &[0.0, 1.0], &cfg) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_is_focal() {
        let cfg = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let (total, focal, _) = loss_values(&[0.3, 0.6], &[0.0, 1.0], &[true, true], &cfg).unwrap();
        assert_eq!(total, focal);
    }

    #[test]
    fn empty_mask_errors() {
        assert!(matches!(
            loss_values(&[0.5], &[1.0], &[false], &LossConfig::default()),
            Err(Error::NoValidTimestamps)
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let o: Vec<f64> = (0..12).map(|i| 0.05 + 0.07 * i as f64).collect();
        let y: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let mask: Vec<bool> = (0..12).map(|i| i != 5).collect();
        let cfg = LossConfig::default();
        let tape = Tape::new();
        let v = tape.param(&Tensor::vector(o.clone()).unwrap());
        let t = total_loss(&tape, v, &y, &mask, &cfg).unwrap();
        let g = tape.backward(t.total).unwrap();
        let analytic = g.get(v).unwrap().to_vec();
        let h = 1e-5;
        for i in 0..12 {
            let mut p = o.clone();
            p[i] += h;
            let mut m = o.clone();
            m[i] -= h;
            let num = (loss_values(&p, &y, &mask, &cfg).unwrap().0
                - loss_values(&m, &y, &mask, &cfg).unwrap().0)
                / (2.0 * h);
            let rel = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-6, "index {i}: {} vs {num}", analytic[i]);
        }
        assert_eq!(analytic[5], 0.0);
    }

    proptest! {
        #[test]
        fn padded_positions_do_not_matter(o in proptest::collection::vec(0.01f64..0.99, 8),
                                          junk in proptest::collection::vec(0.0f64..1.0, 4)) {
            let y = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
            let mask = [true, true, true, true, false, false, false, false];
            let mut o2 = o.clone();
            o2[4..].copy_from_slice(&junk);
            let cfg = LossConfig::default();
            prop_assert_eq!(loss_values(&o, &y, &mask, &cfg).unwrap(), loss_values(&o2, &y, &mask, &cfg).unwrap());
        }

        #[test]
        fn focal_decreases_toward_target(o in proptest::collection::vec(0.02f64..0.98, 6),
                                         idx in 0usize..6, step in 0.01f64..0.5) {
            let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
            let cfg = LossConfig::default();
            let mut closer = o.clone();
            let target = y[idx];
            closer[idx] = o[idx] + (target - o[idx]) * step;
            prop_assume!((closer[idx] - o[idx]).abs() > 1e-9);
            prop_assert!(focal(&closer, &y, &cfg) < focal(&o, &y, &cfg));
        }

        #[test]
        fn ranges_and_lambda_linearity(o in proptest::collection::vec(0.0f64..1.0, 10),
                                       y in proptest::collection::vec(proptest::bool::ANY, 10)) {
            let y: Vec<f64> = y.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
            let mask = vec![true; 10];
            let at = |lambda: f64| loss_values(&o, &y, &mask, &LossConfig { lambda, ..Default::default() }).unwrap();
            let (t0, _, d) = at(0.0);
            let (t1, _, _) = at(1.0);
            let (t2, _, _) = at(2.0);
            prop_assert!((0.0..1.0).contains(&d));
            prop_assert!(t1 >= 0.0);
            prop_assert!(((t2 - t0) - 2.0 * (t1 - t0)).abs() <= 1e-12);
        }
    }
}
