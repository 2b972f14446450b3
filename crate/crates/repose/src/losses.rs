//! Image-stage objective: correspondence, reconstruction, perceptual, style,
//! and adversarial terms, each exposed independently for tests and
//! ablations, plus the weighted total.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::extractor::{gram_on, PERCEPTUAL_TAPS, STYLE_TAPS};
use crate::tensor::{Id, Tape, Tensor};

/// Discriminator logits are clamped here before the sigmoid.
pub const LOGIT_CLAMP: f64 = 20.0;

/// Balancing weights of the image-stage terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_corr: f64,
    pub lambda_l1: f64,
    pub lambda_perc: f64,
    pub lambda_style: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_corr: 1.0,
            lambda_l1: 5.0,
            lambda_perc: 1.0,
            lambda_style: 100.0,
            lambda_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda_corr", self.lambda_corr),
            ("lambda_l1", self.lambda_l1),
            ("lambda_perc", self.lambda_perc),
            ("lambda_style", self.lambda_style),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Mean squared error between the styled context feature and a fixed
/// extractor tap of the target image.
pub fn correspondence_loss(tape: &mut Tape, feat: Id, target_tap: &Tensor) -> Id {
    assert_eq!(tape.value(feat).shape(), target_tap.shape(), "correspondence shapes differ");
    let t = tape.constant(target_tap.clone());
    let d = tape.sub(feat, t);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

/// Mean absolute difference between two same-shape nodes.
pub fn reconstruction_l1(tape: &mut Tape, a: Id, b: Id) -> Id {
    assert_eq!(tape.value(a).shape(), tape.value(b).shape(), "l1 shapes differ");
    let d = tape.sub(a, b);
    let ad = tape.abs(d);
    tape.mean_all(ad)
}

/// Sum over the perceptual taps of the mean absolute activation difference,
/// equal weights. `gen_taps` come from the extractor run on the generated
/// image; `target_taps` are cached plain tensors of the target image.
pub fn perceptual_loss(
    tape: &mut Tape,
    gen_taps: &BTreeMap<String, Id>,
    target_taps: &BTreeMap<String, Tensor>,
) -> Id {
    sum_tap_l1(tape, &PERCEPTUAL_TAPS, gen_taps, target_taps, false)
}

/// Sum over the style taps of the mean absolute gram-matrix difference.
/// `target_grams` hold precomputed gram matrices of the target taps.
pub fn style_loss(
    tape: &mut Tape,
    gen_taps: &BTreeMap<String, Id>,
    target_grams: &BTreeMap<String, Tensor>,
) -> Id {
    sum_tap_l1(tape, &STYLE_TAPS, gen_taps, target_grams, true)
}

fn sum_tap_l1(
    tape: &mut Tape,
    names: &[&str],
    gen_taps: &BTreeMap<String, Id>,
    targets: &BTreeMap<String, Tensor>,
    as_gram: bool,
) -> Id {
    let mut total: Option<Id> = None;
    for &name in names {
        let gen = *gen_taps
            .get(name)
            .unwrap_or_else(|| panic!("generated taps missing {name}"));
        let target = targets
            .get(name)
            .unwrap_or_else(|| panic!("target taps missing {name}"));
        let gen = if as_gram { gram_on(tape, gen) } else { gen };
        let t = tape.constant(target.clone());
        let d = tape.sub(gen, t);
        let ad = tape.abs(d);
        let m = tape.mean_all(ad);
        total = Some(match total {
            Some(acc) => tape.add(acc, m),
            None => m,
        });
    }
    total.expect("at least one tap")
}

fn mean_log_sigmoid(tape: &mut Tape, logits: Id) -> Id {
    let clamped = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
    let p = tape.sigmoid(clamped);
    let lp = tape.log(p);
    tape.mean_all(lp)
}

fn mean_log_one_minus_sigmoid(tape: &mut Tape, logits: Id) -> Id {
    // log(1 - sigmoid(x)) = log(sigmoid(-x))
    let clamped = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
    let neg = tape.mul_scalar(clamped, -1.0);
    let p = tape.sigmoid(neg);
    let lp = tape.log(p);
    tape.mean_all(lp)
}

/// Discriminator objective: `-E[log D(real)] - E[log(1 - D(fake))]`, with
/// fake logits coming from a detached generator output.
pub fn adversarial_d_loss(tape: &mut Tape, logits_real: Id, logits_fake: Id) -> Id {
    let real_term = mean_log_sigmoid(tape, logits_real);
    let fake_term = mean_log_one_minus_sigmoid(tape, logits_fake);
    let s = tape.add(real_term, fake_term);
    tape.mul_scalar(s, -1.0)
}

/// Non-saturating generator objective: `-E[log D(fake)]`.
pub fn adversarial_g_loss(tape: &mut Tape, logits_fake: Id) -> Id {
    let t = mean_log_sigmoid(tape, logits_fake);
    tape.mul_scalar(t, -1.0)
}

/// The five image-stage terms, as tape nodes.
pub struct ImageLossTerms {
    pub correspondence: Id,
    pub reconstruction: Id,
    pub perceptual: Id,
    pub style: Id,
    pub adversarial: Id,
}

/// Weighted sum of the five terms per the balancing weights.
pub fn total_image_loss(tape: &mut Tape, terms: &ImageLossTerms, w: &LossWeights) -> Id {
    let c = tape.mul_scalar(terms.correspondence, w.lambda_corr);
    let l = tape.mul_scalar(terms.reconstruction, w.lambda_l1);
    let p = tape.mul_scalar(terms.perceptual, w.lambda_perc);
    let s = tape.mul_scalar(terms.style, w.lambda_style);
    let a = tape.mul_scalar(terms.adversarial, w.lambda_adv);
    let cl = tape.add(c, l);
    let clp = tape.add(cl, p);
    let clps = tape.add(clp, s);
    tape.add(clps, a)
}
