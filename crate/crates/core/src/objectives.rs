//! Training losses, as pure functions of log-probabilities and logits.
//!
//! Stage 1 minimizes a label-smoothed KL between the smoothed target
//! distribution and the model's next-token distribution. Stage 2 adds a
//! preference objective over chosen/rejected sequence log-probability ratios
//! with a Jensen-Shannon correction, plus the KL and an SFT term:
//!
//! ```text
//! total = alpha * L_dpo + gamma * L_kl + theta * L_sft
//! ```
//!
//! The JS correction runs in three steps on the pair's log-ratios r_c, r_r:
//! raw = r_c - r_r, jsd = softplus(r_c) - softplus(r_r), corrected = raw - jsd.
//! Algebraically `corrected = log sigmoid(r_c) - log sigmoid(r_r)`; the
//! step-wise form with overflow-safe softplus is the implementation and the
//! closed form is kept as a cross-check.

use crate::error::Error;
use crate::math::{log_sum_exp, softplus};
use crate::Result;

/// Loss weights and shape parameters.
///
/// `beta` modulates preference sharpness; `alpha`, `gamma`, `theta` weigh the
/// DPO, KL and SFT terms; `epsilon_smooth` is the label-smoothing mass.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub theta: f64,
    pub epsilon_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.1,
            alpha: 1.0,
            gamma: 1.0,
            theta: 1.0,
            epsilon_smooth: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        for (name, w) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("theta", self.theta),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} {w} must be a finite non-negative weight"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.epsilon_smooth) {
            return Err(Error::Config(format!(
                "epsilon_smooth {} must lie in [0, 1)",
                self.epsilon_smooth
            )));
        }
        Ok(())
    }
}

/// The four masked sequence log-probabilities of one preference pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLogprobs {
    pub chosen_policy: f64,
    pub chosen_ref: f64,
    pub rejected_policy: f64,
    pub rejected_ref: f64,
}

impl PairLogprobs {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.chosen_policy,
            self.chosen_ref,
            self.rejected_policy,
            self.rejected_ref,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "pair logprobs",
            });
        }
        Ok(())
    }

    /// Chosen-side log-ratio `log pi(y+) - log pi_sft(y+)`.
    pub fn ratio_chosen(&self) -> f64 {
        self.chosen_policy - self.chosen_ref
    }

    /// Rejected-side log-ratio.
    pub fn ratio_rejected(&self) -> f64 {
        self.rejected_policy - self.rejected_ref
    }
}

/// Raw preference logits, the JS divergence term, and their difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsLogits {
    pub raw: f64,
    pub jsd: f64,
    pub corrected: f64,
}

/// Step-wise JS-corrected preference logits for one pair.
pub fn js_dpo_logits(p: &PairLogprobs) -> Result<JsLogits> {
    p.validate()?;
    let r_c = p.ratio_chosen();
    let r_r = p.ratio_rejected();
    let raw = r_c - r_r;
    let jsd = softplus(r_c) - softplus(r_r);
    Ok(JsLogits {
        raw,
        jsd,
        corrected: raw - jsd,
    })
}

/// `-log sigmoid(beta * corrected)` for one pair.
#[inline]
pub fn dpo_loss_of_corrected(corrected: f64, beta: f64) -> f64 {
    softplus(-beta * corrected)
}

/// Preference loss averaged over a batch of pairs.
pub fn dpo_loss(pairs: &[PairLogprobs], beta: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InputDomain("empty pair batch".to_string()));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Config(format!("beta {beta} must be positive")));
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += dpo_loss_of_corrected(js_dpo_logits(p)?.corrected, beta);
    }
    Ok(sum / pairs.len() as f64)
}

/// `L_sft = -log pi(y+ | E, x)` for one chosen sequence.
#[inline]
pub fn sft_loss(chosen_policy: f64) -> f64 {
    -chosen_policy
}

/// `sum_k P_k ln P_k` for the smoothed target distribution.
fn smoothed_target_neg_entropy(vocab: usize, eps: f64) -> f64 {
    let hit = 1.0 - eps;
    let miss = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
    let mut s = 0.0;
    if hit > 0.0 {
        s += hit * hit.ln();
    }
    if miss > 0.0 {
        s += (vocab - 1) as f64 * miss * miss.ln();
    }
    s
}

/// KL(P || softmax(z)) at one position, where P smooths the target token.
pub(crate) fn kl_at_position(logits_row: &[f64], target: usize, eps: f64) -> f64 {
    let vocab = logits_row.len();
    let lse = log_sum_exp(logits_row);
    let miss = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
    let hit = 1.0 - eps;
    // KL = sum P ln P - sum P z + lse
    let mut dot = 0.0;
    for (k, &z) in logits_row.iter().enumerate() {
        let p = if k == target { hit } else { miss };
        dot += p * z;
    }
    smoothed_target_neg_entropy(vocab, eps) - dot + lse
}

/// Label-smoothed KL averaged over masked positions.
///
/// `pred_logits` is row-major `positions x vocab`, aligned with `targets` and
/// `mask` (row `p` is the prediction whose ground truth is `targets[p]`).
/// Returns 0 when the mask is empty.
pub fn kl_label_smooth_loss(
    pred_logits: &[f64],
    vocab: usize,
    targets: &[u32],
    mask: &[bool],
    eps: f64,
) -> Result<f64> {
    let (sum, count) = kl_label_smooth_sum(pred_logits, vocab, targets, mask, eps)?;
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Sum (not mean) of the per-position KL plus the masked-position count, for
/// pooling across sequences.
pub(crate) fn kl_label_smooth_sum(
    pred_logits: &[f64],
    vocab: usize,
    targets: &[u32],
    mask: &[bool],
    eps: f64,
) -> Result<(f64, usize)> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!(
            "epsilon_smooth {eps} must lie in [0, 1)"
        )));
    }
    if targets.len() != mask.len() || pred_logits.len() != targets.len() * vocab {
        return Err(Error::InputDomain(format!(
            "misaligned KL inputs: {} logits, {} targets, {} mask entries, vocab {vocab}",
            pred_logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if target as usize >= vocab {
            return Err(Error::InputDomain(format!(
                "target {target} outside vocab {vocab}"
            )));
        }
        sum += kl_at_position(
            &pred_logits[p * vocab..(p + 1) * vocab],
            target as usize,
            eps,
        );
        count += 1;
    }
    Ok((sum, count))
}

/// Logged loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub dpo: f64,
    pub kl: f64,
    pub sft: f64,
    pub total: f64,
    /// Mean corrected preference logit over the batch (the DPO margin).
    pub mean_corrected: f64,
}

/// Per-sequence prediction for the auxiliary KL term: logits aligned with
/// their targets and loss mask (already shifted by one position).
#[derive(Debug, Clone, Copy)]
pub struct ChosenPrediction<'a> {
    pub logits: &'a [f64],
    pub targets: &'a [u32],
    pub mask: &'a [bool],
}

/// Weighted stage-2 loss over a pair batch.
///
/// A component with weight zero is skipped entirely: it contributes nothing
/// to the value or gradient and is reported as 0 in the breakdown. The KL is
/// averaged per masked position across all chosen sequences; the SFT term is
/// the mean over the batch of per-sequence log-probability sums; the DPO term
/// is the mean pair loss. The margin is always reported.
pub fn total_loss(
    pairs: &[PairLogprobs],
    chosen: &[ChosenPrediction],
    vocab: usize,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::InputDomain("empty pair batch".to_string()));
    }

    let mut corrected_sum = 0.0;
    let mut dpo_sum = 0.0;
    for p in pairs {
        let js = js_dpo_logits(p)?;
        corrected_sum += js.corrected;
        dpo_sum += dpo_loss_of_corrected(js.corrected, config.beta);
    }
    let mean_corrected = corrected_sum / pairs.len() as f64;

    let dpo = if config.alpha != 0.0 {
        dpo_sum / pairs.len() as f64
    } else {
        0.0
    };

    let kl = if config.gamma != 0.0 {
        if chosen.len() != pairs.len() {
            return Err(Error::InputDomain(format!(
                "{} chosen predictions for {} pairs",
                chosen.len(),
                pairs.len()
            )));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for pred in chosen {
            let (s, c) = kl_label_smooth_sum(
                pred.logits,
                vocab,
                pred.targets,
                pred.mask,
                config.epsilon_smooth,
            )?;
            sum += s;
            count += c;
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    } else {
        0.0
    };

    let sft = if config.theta != 0.0 {
        pairs.iter().map(|p| sft_loss(p.chosen_policy)).sum::<f64>() / pairs.len() as f64
    } else {
        0.0
    };

    for (component, value) in [("dpo", dpo), ("kl", kl), ("sft", sft)] {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                component: match component {
                    "dpo" => "dpo",
                    "kl" => "kl",
                    _ => "sft",
                },
            });
        }
    }

    let mut total = 0.0;
    if config.alpha != 0.0 {
        total += config.alpha * dpo;
    }
    if config.gamma != 0.0 {
        total += config.gamma * kl;
    }
    if config.theta != 0.0 {
        total += config.theta * sft;
    }
    Ok(LossBreakdown {
        dpo,
        kl,
        sft,
        total,
        mean_corrected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::log_sigmoid;
    use proptest::prelude::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn pair(cp: f64, cr: f64, rp: f64, rr: f64) -> PairLogprobs {
        PairLogprobs {
            chosen_policy: cp,
            chosen_ref: cr,
            rejected_policy: rp,
            rejected_ref: rr,
        }
    }

    #[test]
    fn js_identity_at_initialization() {
        let js = js_dpo_logits(&pair(-3.0, -3.0, -5.0, -5.0)).unwrap();
        assert_eq!(js.raw, 0.0);
        assert_eq!(js.jsd, 0.0);
        assert_eq!(js.corrected, 0.0);
    }

    #[test]
    fn js_worked_example() {
        // r_c = 1, r_r = -1.
        let js = js_dpo_logits(&pair(-1.0, -2.0, -3.0, -2.0)).unwrap();
        assert!((js.raw - 2.0).abs() < 1e-12);
        assert!((js.jsd - 1.0).abs() < 1e-9); // softplus(1) - softplus(-1)
        assert!((js.corrected - 1.0).abs() < 1e-9);
    }

    #[test]
    fn js_survives_extreme_ratios() {
        let js = js_dpo_logits(&pair(1000.0, 0.0, -1000.0, 0.0)).unwrap();
        assert!(js.raw.is_finite() && js.jsd.is_finite() && js.corrected.is_finite());
        let closed = log_sigmoid(1000.0) - log_sigmoid(-1000.0);
        assert!((js.corrected - closed).abs() < 1e-6);
        assert!((js.corrected - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn js_rejects_non_finite() {
        assert!(js_dpo_logits(&pair(f64::NAN, 0.0, 0.0, 0.0)).is_err());
        assert!(js_dpo_logits(&pair(f64::NEG_INFINITY, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn dpo_loss_values() {
        // corrected = 0 for every pair.
        let pairs = vec![pair(-2.0, -2.0, -4.0, -4.0); 3];
        let loss = dpo_loss(&pairs, 0.1).unwrap();
        assert!((loss - LN_2).abs() < 1e-12);

        // r_c = 1 and r_r = -1 give corrected = 1; beta = 1.
        let one = vec![pair(-1.0, -2.0, -3.0, -2.0)];
        let loss = dpo_loss(&one, 1.0).unwrap();
        assert!((loss - 0.313_262).abs() < 1e-6);

        assert!(dpo_loss(&[], 0.1).is_err());
        assert!(dpo_loss(&one, 0.0).is_err());
    }

    #[test]
    fn dpo_loss_is_monotone_in_corrected() {
        let l1 = dpo_loss_of_corrected(1.0, 0.5);
        let l2 = dpo_loss_of_corrected(2.0, 0.5);
        assert!(l2 < l1);
        assert!(l1 > 0.0 && l2 > 0.0);
    }

    #[test]
    fn sft_loss_values() {
        // Uniform model over vocab 8 with 4 masked tokens.
        let lp = -4.0 * (8f64).ln();
        assert!((sft_loss(lp) - 8.317_766).abs() < 1e-6);
        assert_eq!(sft_loss(0.0), 0.0);
        assert!(sft_loss(-0.5) >= 0.0);
    }

    #[test]
    fn kl_uniform_prediction_worked_example() {
        // V = 8, eps = 0.1, uniform prediction.
        let logits = vec![0.0; 8];
        let kl = kl_label_smooth_loss(&logits, 8, &[2], &[true], 0.1).unwrap();
        assert!((kl - 1.559_768).abs() < 1e-5, "kl={kl}");
    }

    #[test]
    fn kl_zero_when_prediction_matches_smoothed_target() {
        let vocab = 8;
        let eps = 0.1;
        let target = 3usize;
        let logits: Vec<f64> = (0..vocab)
            .map(|k| {
                let p: f64 = if k == target { 1.0 - eps } else { eps / 7.0 };
                p.ln()
            })
            .collect();
        let kl = kl_label_smooth_loss(&logits, vocab, &[target as u32], &[true], eps).unwrap();
        assert!(kl.abs() < 1e-9, "kl={kl}");
    }

    #[test]
    fn kl_at_uniform_prediction_is_logv_minus_target_entropy() {
        // Independent identity: KL(P || uniform) = ln V - H(P). At eps = 0
        // this is exactly ln V; smoothing lowers it by the target entropy.
        let vocab = 114;
        let eps = 0.1;
        let logits = vec![0.0; vocab];
        let kl = kl_label_smooth_loss(&logits, vocab, &[7], &[true], eps).unwrap();
        let miss = eps / (vocab - 1) as f64;
        let entropy = -(0.9f64 * 0.9f64.ln() + (vocab - 1) as f64 * miss * miss.ln());
        assert!((kl - ((vocab as f64).ln() - entropy)).abs() < 1e-12);

        let nll = kl_label_smooth_loss(&logits, vocab, &[7], &[true], 0.0).unwrap();
        assert!((nll - (vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_eps_matches_cross_entropy() {
        // With eps = 0 the KL reduces to -log softmax[target].
        let logits = vec![0.5, -1.0, 2.0, 0.0];
        let kl = kl_label_smooth_loss(&logits, 4, &[2], &[true], 0.0).unwrap();
        let ce = -(logits[2] - log_sum_exp(&logits));
        assert!((kl - ce).abs() < 1e-12);
    }

    #[test]
    fn kl_respects_mask_and_validates() {
        let logits = vec![0.0; 16];
        let kl = kl_label_smooth_loss(&logits, 8, &[1, 2], &[false, false], 0.1).unwrap();
        assert_eq!(kl, 0.0);
        assert!(kl_label_smooth_loss(&logits, 8, &[1, 2], &[true], 0.1).is_err());
        assert!(kl_label_smooth_loss(&logits, 8, &[9, 2], &[true, true], 0.1).is_err());
    }

    #[test]
    fn total_loss_worked_example() {
        // dpo = ln 2 (identity), kl = 1.5598 (uniform, V=8), sft = 4 ln 8.
        let lp = -4.0 * (8f64).ln();
        let pairs = vec![pair(lp, lp, lp, lp)];
        let logits = vec![0.0; 4 * 8];
        let targets = [1u32, 2, 3, 4];
        let mask = [true; 4];
        let chosen = vec![ChosenPrediction {
            logits: &logits,
            targets: &targets,
            mask: &mask,
        }];
        let cfg = LossConfig {
            beta: 1.0,
            ..LossConfig::default()
        };
        let b = total_loss(&pairs, &chosen, 8, &cfg).unwrap();
        assert!((b.dpo - LN_2).abs() < 1e-9);
        assert!((b.kl - 1.559_768).abs() < 1e-5);
        assert!((b.sft - 8.317_766).abs() < 1e-6);
        assert!((b.total - 10.5707).abs() < 1e-3);
        assert!(b.mean_corrected.abs() < 1e-12);
    }

    #[test]
    fn zero_weight_removes_component_exactly() {
        let pairs = vec![pair(-3.0, -2.5, -4.0, -3.0)];
        let logits = vec![0.3; 2 * 8];
        let targets = [1u32, 2];
        let mask = [true, true];
        let chosen = vec![ChosenPrediction {
            logits: &logits,
            targets: &targets,
            mask: &mask,
        }];
        let with_alpha0 = total_loss(
            &pairs,
            &chosen,
            8,
            &LossConfig {
                alpha: 0.0,
                ..LossConfig::default()
            },
        )
        .unwrap();
        assert_eq!(with_alpha0.dpo, 0.0);
        let manual = LossConfig::default().gamma * with_alpha0.kl
            + LossConfig::default().theta * with_alpha0.sft;
        assert!((with_alpha0.total - manual).abs() < 1e-12);
        // Margin is still reported with the DPO component off.
        assert!(with_alpha0.mean_corrected != 0.0);
    }

    #[test]
    fn doubling_all_weights_doubles_total() {
        let pairs = vec![pair(-3.0, -2.5, -4.0, -3.0), pair(-1.0, -1.5, -2.0, -1.0)];
        let logits = vec![0.1; 3 * 8];
        let targets = [1u32, 2, 3];
        let mask = [true, true, false];
        let chosen: Vec<ChosenPrediction> = (0..2)
            .map(|_| ChosenPrediction {
                logits: &logits,
                targets: &targets,
                mask: &mask,
            })
            .collect();
        let base = LossConfig::default();
        let doubled = LossConfig {
            alpha: 2.0,
            gamma: 2.0,
            theta: 2.0,
            ..base
        };
        let a = total_loss(&pairs, &chosen, 8, &base).unwrap();
        let b = total_loss(&pairs, &chosen, 8, &doubled).unwrap();
        assert_eq!(b.total, 2.0 * a.total);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            beta: 0.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            epsilon_smooth: 1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            alpha: -1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn corrected_matches_closed_form(r_c in -50.0f64..50.0, r_r in -50.0f64..50.0) {
            let p = pair(r_c, 0.0, r_r, 0.0);
            let js = js_dpo_logits(&p).unwrap();
            let closed = log_sigmoid(r_c) - log_sigmoid(r_r);
            prop_assert!((js.corrected - closed).abs() < 1e-9);
        }

        #[test]
        fn corrected_is_monotone(
            r_c in -30.0f64..30.0,
            r_r in -30.0f64..30.0,
            bump in 0.01f64..5.0,
        ) {
            let base = js_dpo_logits(&pair(r_c, 0.0, r_r, 0.0)).unwrap().corrected;
            let up_c = js_dpo_logits(&pair(r_c + bump, 0.0, r_r, 0.0)).unwrap().corrected;
            let up_r = js_dpo_logits(&pair(r_c, 0.0, r_r + bump, 0.0)).unwrap().corrected;
            prop_assert!(up_c > base);
            prop_assert!(up_r < base);
        }

        #[test]
        fn dpo_gradient_direction(
            cp in -30.0f64..0.0,
            rp in -30.0f64..0.0,
            beta in 0.05f64..2.0,
        ) {
            // Central differences on the scalar loss: raising the chosen
            // log-probability lowers the loss, raising the rejected raises it.
            let h = 1e-6;
            let loss = |cp: f64, rp: f64| {
                dpo_loss(&[pair(cp, -15.0, rp, -15.0)], beta).unwrap()
            };
            let d_chosen = (loss(cp + h, rp) - loss(cp - h, rp)) / (2.0 * h);
            let d_rejected = (loss(cp, rp + h) - loss(cp, rp - h)) / (2.0 * h);
            prop_assert!(d_chosen < 0.0);
            prop_assert!(d_rejected > 0.0);
        }

        #[test]
        fn swapping_pair_roles_negates_corrected(
            cp in -40.0f64..0.0,
            cr in -40.0f64..0.0,
            rp in -40.0f64..0.0,
            rr in -40.0f64..0.0,
        ) {
            let p = pair(cp, cr, rp, rr);
            let swapped = pair(rp, rr, cp, cr);
            let a = js_dpo_logits(&p).unwrap().corrected;
            let b = js_dpo_logits(&swapped).unwrap().corrected;
            prop_assert_eq!(a, -b);
        }

        #[test]
        fn pair_identity_gives_ln2(lp in -40.0f64..0.0, beta in 0.01f64..2.0) {
            let p = pair(lp, lp, lp - 1.0, lp - 1.0);
            let js = js_dpo_logits(&p).unwrap();
            prop_assert_eq!(js.corrected, 0.0);
            let loss = dpo_loss(&[p], beta).unwrap();
            prop_assert!((loss - LN_2).abs() < 1e-12);
        }
    }
}
