//! Reverse-mode gradients for every training loss.
//!
//! One backward pass per sequence: the per-loss logit gradients (preference,
//! label-smoothed KL, SFT) are accumulated into a single `dlogits` matrix and
//! propagated through the cached forward activations. Rows are independent,
//! so batches parallelize; the reduction over rows keeps a fixed order.
//!
//! Loss values come from [`crate::objectives`]; the finite-difference suite in
//! [`crate::gradcheck`] validates the two paths against each other.

use super::net::{forward_row, gelu_grad, logprob_from_logits, RowCache, SequenceBatch};
use super::{ModelConfig, ModelParams, Offsets};
use crate::corpus::{PreferencePair, Vocabulary};
use crate::error::Error;
use crate::exec;
use crate::math::softmax_inplace;
use crate::objectives::{
    total_loss, ChosenPrediction, LossBreakdown, LossConfig, PairLogprobs,
};
use crate::{objectives, Result};

/// Gradient arrays matching [`ModelParams`], stored flat as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    config: ModelConfig,
    data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(config: ModelConfig) -> Gradients {
        let total = config.param_count();
        Gradients {
            config,
            data: vec![0.0; total],
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn add(&mut self, other: &Gradients) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Euclidean norm over all coordinates.
    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Which objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossFn {
    LabelSmoothKl { epsilon: f64 },
    Sft,
    Dpo { beta: f64 },
    Total(LossConfig),
}

/// A batch of chosen/rejected sequences plus the frozen reference's masked
/// log-probability for each side.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub chosen: SequenceBatch,
    pub rejected: SequenceBatch,
    pub ref_chosen: Vec<f64>,
    pub ref_rejected: Vec<f64>,
}

impl PairBatch {
    pub fn new(
        chosen: SequenceBatch,
        rejected: SequenceBatch,
        ref_chosen: Vec<f64>,
        ref_rejected: Vec<f64>,
    ) -> Result<PairBatch> {
        let n = chosen.batch_size();
        if rejected.batch_size() != n || ref_chosen.len() != n || ref_rejected.len() != n {
            return Err(Error::InputDomain(format!(
                "pair batch sides disagree: {n} chosen, {} rejected, {} / {} reference values",
                rejected.batch_size(),
                ref_chosen.len(),
                ref_rejected.len()
            )));
        }
        Ok(PairBatch {
            chosen,
            rejected,
            ref_chosen,
            ref_rejected,
        })
    }

    /// Encode pairs and score both sides under the frozen reference. Both
    /// sides share the chosen side's prompt (conditioning emotion); they
    /// differ only in the speech-token target.
    pub fn from_pairs(
        vocab: &Vocabulary,
        pairs: &[&PreferencePair],
        reference: &ModelParams,
    ) -> Result<PairBatch> {
        let chosen_utts: Vec<_> = pairs.iter().map(|p| &p.chosen).collect();
        let conditioned: Vec<_> = pairs.iter().map(|p| p.conditioned_rejected()).collect();
        let rejected_utts: Vec<&crate::corpus::Utterance> = conditioned.iter().collect();
        let chosen = SequenceBatch::from_utterances(vocab, &chosen_utts, true)?;
        let rejected = SequenceBatch::from_utterances(vocab, &rejected_utts, true)?;
        let ref_chosen = super::net::sequence_logprob(reference, &chosen)?
            .iter()
            .map(|lp| lp.value)
            .collect();
        let ref_rejected = super::net::sequence_logprob(reference, &rejected)?
            .iter()
            .map(|lp| lp.value)
            .collect();
        PairBatch::new(chosen, rejected, ref_chosen, ref_rejected)
    }

    pub fn len(&self) -> usize {
        self.chosen.batch_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The data a loss is evaluated over.
#[derive(Debug, Clone, Copy)]
pub enum LossBatch<'a> {
    Sequences(&'a SequenceBatch),
    Pairs(&'a PairBatch),
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// `dx[r,i] += sum_o dy[r,o] * w[i,o]`
fn matmul_dx(dy: &[f64], w: &[f64], t: usize, din: usize, dout: usize, dx: &mut [f64]) {
    for r in 0..t {
        let dyr = &dy[r * dout..(r + 1) * dout];
        let dxr = &mut dx[r * din..(r + 1) * din];
        for i in 0..din {
            let wrow = &w[i * dout..(i + 1) * dout];
            let mut s = 0.0;
            for (o, wv) in wrow.iter().enumerate() {
                s += dyr[o] * wv;
            }
            dxr[i] += s;
        }
    }
}

/// `dw[i,o] += sum_r x[r,i] * dy[r,o]`
fn matmul_dw(x: &[f64], dy: &[f64], t: usize, din: usize, dout: usize, dw: &mut [f64]) {
    for r in 0..t {
        let xr = &x[r * din..(r + 1) * din];
        let dyr = &dy[r * dout..(r + 1) * dout];
        for (i, &xi) in xr.iter().enumerate() {
            let dwrow = &mut dw[i * dout..(i + 1) * dout];
            for (o, dv) in dyr.iter().enumerate() {
                dwrow[o] += xi * dv;
            }
        }
    }
}

/// Layer-norm input gradient given the normalized values and 1/std.
fn layer_norm_dx(d_xn: &[f64], xn: &[f64], rstd: &[f64], t: usize, d: usize, dx: &mut [f64]) {
    let dn = d as f64;
    for r in 0..t {
        let dxn_r = &d_xn[r * d..(r + 1) * d];
        let xn_r = &xn[r * d..(r + 1) * d];
        let mean_dxn = dxn_r.iter().sum::<f64>() / dn;
        let mean_dxn_xn = dxn_r.iter().zip(xn_r).map(|(a, b)| a * b).sum::<f64>() / dn;
        let rs = rstd[r];
        let out = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            out[i] += rs * (dxn_r[i] - mean_dxn - xn_r[i] * mean_dxn_xn);
        }
    }
}

/// Backward through one cached row. `dlogits` is `len x vocab`; gradients are
/// accumulated into `grad` (flat, same layout as the parameters).
fn backward_row(
    cfg: &ModelConfig,
    off: &Offsets,
    pf: &[f64],
    cache: &RowCache,
    dlogits: &[f64],
    grad: &mut [f64],
) {
    let t = cache.len();
    let d = cfg.d_model;
    let vsize = cfg.vocab_size();
    let heads = cfg.n_heads;
    let hd = d / heads;
    let f = cfg.ff_mult * d;
    let scale = 1.0 / (hd as f64).sqrt();

    // Output head: logits = final_x @ out_w + out_b.
    for r in 0..t {
        let dl = &dlogits[r * vsize..(r + 1) * vsize];
        let ob = &mut grad[off.out_b..off.out_b + vsize];
        for (v, dv) in dl.iter().enumerate() {
            ob[v] += dv;
        }
    }
    matmul_dw(
        &cache.final_x,
        dlogits,
        t,
        d,
        vsize,
        &mut grad[off.out_w..off.out_w + d * vsize],
    );
    let mut dx = vec![0.0f64; t * d];
    matmul_dx(dlogits, &pf[off.out_w..off.out_w + d * vsize], t, d, vsize, &mut dx);

    for (l, bo) in off.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[l];

        // Feed-forward residual: x_out = x_mid + gelu(normed2 @ w1 + b1) @ w2 + b2.
        for r in 0..t {
            let dxr = &dx[r * d..(r + 1) * d];
            let b2g = &mut grad[bo.b2..bo.b2 + d];
            for i in 0..d {
                b2g[i] += dxr[i];
            }
        }
        matmul_dw(
            &bc.h_act,
            &dx,
            t,
            f,
            d,
            &mut grad[bo.w2..bo.w2 + f * d],
        );
        let mut d_h_act = vec![0.0f64; t * f];
        matmul_dx(&dx, &pf[bo.w2..bo.w2 + f * d], t, f, d, &mut d_h_act);
        let mut d_h_pre = vec![0.0f64; t * f];
        for i in 0..t * f {
            d_h_pre[i] = d_h_act[i] * gelu_grad(bc.h_pre[i]);
        }
        for r in 0..t {
            let dhr = &d_h_pre[r * f..(r + 1) * f];
            let b1g = &mut grad[bo.b1..bo.b1 + f];
            for i in 0..f {
                b1g[i] += dhr[i];
            }
        }
        // normed2 = g2 .* xn2 + b2_ln is recomputed from the cache.
        let g2 = &pf[bo.ln2_g..bo.ln2_g + d];
        let b2ln = &pf[bo.ln2_b..bo.ln2_b + d];
        let mut normed2 = vec![0.0f64; t * d];
        for r in 0..t {
            for i in 0..d {
                normed2[r * d + i] = g2[i] * bc.xn2[r * d + i] + b2ln[i];
            }
        }
        matmul_dw(
            &normed2,
            &d_h_pre,
            t,
            d,
            f,
            &mut grad[bo.w1..bo.w1 + d * f],
        );
        let mut d_normed2 = vec![0.0f64; t * d];
        matmul_dx(&d_h_pre, &pf[bo.w1..bo.w1 + d * f], t, d, f, &mut d_normed2);

        let mut d_xn2 = vec![0.0f64; t * d];
        for r in 0..t {
            for i in 0..d {
                let dn = d_normed2[r * d + i];
                grad[bo.ln2_g + i] += dn * bc.xn2[r * d + i];
                grad[bo.ln2_b + i] += dn;
                d_xn2[r * d + i] = dn * g2[i];
            }
        }
        let mut dx_mid = dx; // residual path
        layer_norm_dx(&d_xn2, &bc.xn2, &bc.ln2_rstd, t, d, &mut dx_mid);

        // Attention residual: x_mid = x_in + (heads(xn1) @ wo).
        matmul_dw(
            &bc.ho,
            &dx_mid,
            t,
            d,
            d,
            &mut grad[bo.wo..bo.wo + d * d],
        );
        let mut d_ho = vec![0.0f64; t * d];
        matmul_dx(&dx_mid, &pf[bo.wo..bo.wo + d * d], t, d, d, &mut d_ho);

        let mut d_q = vec![0.0f64; t * d];
        let mut d_k = vec![0.0f64; t * d];
        let mut d_v = vec![0.0f64; t * d];
        for h in 0..heads {
            let hb = h * hd;
            for ti in 0..t {
                let arow = &bc.att[h * t * t + ti * t..h * t * t + ti * t + ti + 1];
                let dho_r = &d_ho[ti * d + hb..ti * d + hb + hd];
                // Gradient into attention weights and values.
                let mut d_a = vec![0.0f64; ti + 1];
                for s in 0..=ti {
                    let vrow = &bc.v[s * d + hb..s * d + hb + hd];
                    let mut acc = 0.0;
                    for i in 0..hd {
                        acc += dho_r[i] * vrow[i];
                    }
                    d_a[s] = acc;
                    let dvrow = &mut d_v[s * d + hb..s * d + hb + hd];
                    let a = arow[s];
                    for i in 0..hd {
                        dvrow[i] += a * dho_r[i];
                    }
                }
                // Softmax backward.
                let dot: f64 = arow.iter().zip(&d_a).map(|(a, b)| a * b).sum();
                let qrow = &bc.q[ti * d + hb..ti * d + hb + hd];
                for s in 0..=ti {
                    let ds = arow[s] * (d_a[s] - dot) * scale;
                    let krow = &bc.k[s * d + hb..s * d + hb + hd];
                    let dqrow = &mut d_q[ti * d + hb..ti * d + hb + hd];
                    for i in 0..hd {
                        dqrow[i] += ds * krow[i];
                    }
                    let dkrow = &mut d_k[s * d + hb..s * d + hb + hd];
                    for i in 0..hd {
                        dkrow[i] += ds * qrow[i];
                    }
                }
            }
        }

        // The cached q/k are post-rotation; undo the rotary map on their
        // gradients before projecting back through wq/wk.
        super::net::rope_apply(&mut d_q, t, d, heads, hd, true);
        super::net::rope_apply(&mut d_k, t, d, heads, hd, true);

        let g1 = &pf[bo.ln1_g..bo.ln1_g + d];
        let b1ln = &pf[bo.ln1_b..bo.ln1_b + d];
        let mut normed1 = vec![0.0f64; t * d];
        for r in 0..t {
            for i in 0..d {
                normed1[r * d + i] = g1[i] * bc.xn1[r * d + i] + b1ln[i];
            }
        }
        let mut d_normed1 = vec![0.0f64; t * d];
        matmul_dw(&normed1, &d_q, t, d, d, &mut grad[bo.wq..bo.wq + d * d]);
        matmul_dx(&d_q, &pf[bo.wq..bo.wq + d * d], t, d, d, &mut d_normed1);
        matmul_dw(&normed1, &d_k, t, d, d, &mut grad[bo.wk..bo.wk + d * d]);
        matmul_dx(&d_k, &pf[bo.wk..bo.wk + d * d], t, d, d, &mut d_normed1);
        matmul_dw(&normed1, &d_v, t, d, d, &mut grad[bo.wv..bo.wv + d * d]);
        matmul_dx(&d_v, &pf[bo.wv..bo.wv + d * d], t, d, d, &mut d_normed1);

        let mut d_xn1 = vec![0.0f64; t * d];
        for r in 0..t {
            for i in 0..d {
                let dn = d_normed1[r * d + i];
                grad[bo.ln1_g + i] += dn * bc.xn1[r * d + i];
                grad[bo.ln1_b + i] += dn;
                d_xn1[r * d + i] = dn * g1[i];
            }
        }
        let mut dx_in = dx_mid; // residual path
        layer_norm_dx(&d_xn1, &bc.xn1, &bc.ln1_rstd, t, d, &mut dx_in);
        dx = dx_in;
    }

    // Embeddings.
    for (r, &id) in cache.tokens.iter().enumerate() {
        let dxr = &dx[r * d..(r + 1) * d];
        let te = &mut grad[off.tok_emb + id as usize * d..off.tok_emb + (id as usize + 1) * d];
        for i in 0..d {
            te[i] += dxr[i];
        }
        let pe = &mut grad[off.pos_emb + r * d..off.pos_emb + (r + 1) * d];
        for i in 0..d {
            pe[i] += dxr[i];
        }
    }
}

// ---------------------------------------------------------------------------
// loss-specific logit gradients
// ---------------------------------------------------------------------------

/// Accumulate `weight * (softmax(logits[t-1]) - P_target)` into the masked
/// target rows of `dlogits`, where `P_target` is the one-hot target smoothed
/// by `eps`. With `eps = 0` this is the gradient of `-log pi(sequence)`.
fn accumulate_masked_rows(
    cache: &RowCache,
    tokens: &[u32],
    mask: &[bool],
    vsize: usize,
    eps: f64,
    weight: f64,
    dlogits: &mut [f64],
) {
    if weight == 0.0 {
        return;
    }
    let miss = if vsize > 1 && eps > 0.0 {
        eps / (vsize - 1) as f64
    } else {
        0.0
    };
    let hit = 1.0 - eps;
    for t in 1..tokens.len() {
        if !mask[t] {
            continue;
        }
        let mut probs = cache.logits[(t - 1) * vsize..t * vsize].to_vec();
        softmax_inplace(&mut probs);
        let drow = &mut dlogits[(t - 1) * vsize..t * vsize];
        let target = tokens[t] as usize;
        for v in 0..vsize {
            let p_tgt = if v == target { hit } else { miss };
            drow[v] += weight * (probs[v] - p_tgt);
        }
    }
}

struct EffectiveLoss {
    alpha: f64,
    gamma: f64,
    theta: f64,
    beta: f64,
    eps: f64,
}

fn pair_loss_internal(
    params: &ModelParams,
    batch: &PairBatch,
    eff: &EffectiveLoss,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let cfg = *params.config();
    let off = cfg.offsets();
    let pf = params.to_f64();
    let vsize = cfg.vocab_size();
    let n = batch.len();
    if n == 0 {
        return Err(Error::InputDomain("empty pair batch".to_string()));
    }

    // Forward both sides with caches.
    let chosen_caches: Vec<RowCache> = exec::map_range(n, |r| {
        forward_row(&cfg, &off, &pf, batch.chosen.row_tokens(r))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let rejected_caches: Vec<RowCache> = exec::map_range(n, |r| {
        forward_row(&cfg, &off, &pf, batch.rejected.row_tokens(r))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let pair_logprobs: Vec<PairLogprobs> = (0..n)
        .map(|i| {
            let cp = logprob_from_logits(
                &chosen_caches[i].logits,
                vsize,
                batch.chosen.row_tokens(i),
                batch.chosen.row_mask(i),
            );
            let rp = logprob_from_logits(
                &rejected_caches[i].logits,
                vsize,
                batch.rejected.row_tokens(i),
                batch.rejected.row_mask(i),
            );
            PairLogprobs {
                chosen_policy: cp.value,
                chosen_ref: batch.ref_chosen[i],
                rejected_policy: rp.value,
                rejected_ref: batch.ref_rejected[i],
            }
        })
        .collect();

    // Loss values come from the objectives module.
    let loss_config = LossConfig {
        beta: eff.beta,
        alpha: eff.alpha,
        gamma: eff.gamma,
        theta: eff.theta,
        epsilon_smooth: eff.eps,
    };
    let shifted_targets: Vec<&[u32]> = (0..n).map(|i| &batch.chosen.row_tokens(i)[1..]).collect();
    let shifted_masks: Vec<&[bool]> = (0..n).map(|i| &batch.chosen.row_mask(i)[1..]).collect();
    let chosen_preds: Vec<ChosenPrediction> = (0..n)
        .map(|i| {
            let len = batch.chosen.length(i);
            ChosenPrediction {
                logits: &chosen_caches[i].logits[..(len - 1) * vsize],
                targets: shifted_targets[i],
                mask: shifted_masks[i],
            }
        })
        .collect();
    let breakdown = total_loss(&pair_logprobs, &chosen_preds, vsize, &loss_config)?;

    if !want_grad {
        return Ok((breakdown, None));
    }

    // Per-pair preference weights: d L_dpo / d logprob.
    let batch_f = n as f64;
    let mut w_chosen = vec![0.0f64; n];
    let mut w_rejected = vec![0.0f64; n];
    if eff.alpha != 0.0 {
        for (i, p) in pair_logprobs.iter().enumerate() {
            let corrected = objectives::js_dpo_logits(p)?.corrected;
            let s = crate::math::sigmoid(-eff.beta * corrected) * eff.beta / batch_f;
            // d corrected / d r_c = sigmoid(-r_c); d/d r_r = -sigmoid(-r_r).
            w_chosen[i] = -s * crate::math::sigmoid(-p.ratio_chosen());
            w_rejected[i] = s * crate::math::sigmoid(-p.ratio_rejected());
        }
    }
    let total_masked: usize = (0..n)
        .map(|i| batch.chosen.row_mask(i).iter().filter(|&&m| m).count())
        .sum();
    let kl_weight = if eff.gamma != 0.0 && total_masked > 0 {
        eff.gamma / total_masked as f64
    } else {
        0.0
    };
    let sft_weight = if eff.theta != 0.0 {
        eff.theta / batch_f
    } else {
        0.0
    };

    // One backward per row; reduce in fixed order.
    let need_rejected = eff.alpha != 0.0;
    let row_grads: Vec<Vec<f64>> = exec::map_range(n, |i| {
        let mut grad = vec![0.0f64; cfg.param_count()];
        let tokens = batch.chosen.row_tokens(i);
        let mask = batch.chosen.row_mask(i);
        let len = tokens.len();
        let mut dlogits = vec![0.0f64; len * vsize];
        // Preference term pushes the chosen log-probability up, so its weight
        // enters with the opposite sign of (softmax - onehot).
        accumulate_masked_rows(
            &chosen_caches[i],
            tokens,
            mask,
            vsize,
            0.0,
            -eff.alpha * w_chosen[i],
            &mut dlogits,
        );
        accumulate_masked_rows(
            &chosen_caches[i],
            tokens,
            mask,
            vsize,
            eff.eps,
            kl_weight,
            &mut dlogits,
        );
        accumulate_masked_rows(
            &chosen_caches[i],
            tokens,
            mask,
            vsize,
            0.0,
            sft_weight,
            &mut dlogits,
        );
        backward_row(&cfg, &off, &pf, &chosen_caches[i], &dlogits, &mut grad);

        if need_rejected {
            let tokens = batch.rejected.row_tokens(i);
            let mask = batch.rejected.row_mask(i);
            let len = tokens.len();
            let mut dlogits = vec![0.0f64; len * vsize];
            accumulate_masked_rows(
                &rejected_caches[i],
                tokens,
                mask,
                vsize,
                0.0,
                -eff.alpha * w_rejected[i],
                &mut dlogits,
            );
            backward_row(&cfg, &off, &pf, &rejected_caches[i], &dlogits, &mut grad);
        }
        grad
    });

    let mut grad = Gradients::zeros(cfg);
    for rg in &row_grads {
        for (a, b) in grad.as_mut_slice().iter_mut().zip(rg) {
            *a += b;
        }
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            component: "gradients",
        });
    }
    Ok((breakdown, Some(grad)))
}

fn sequence_loss_internal(
    params: &ModelParams,
    batch: &SequenceBatch,
    loss: &LossFn,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let cfg = *params.config();
    let off = cfg.offsets();
    let pf = params.to_f64();
    let vsize = cfg.vocab_size();
    let n = batch.batch_size();

    let caches: Vec<RowCache> = exec::map_range(n, |r| {
        forward_row(&cfg, &off, &pf, batch.row_tokens(r))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let (kl_value, sft_value, eps) = match loss {
        LossFn::LabelSmoothKl { epsilon } => {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (r, cache) in caches.iter().enumerate() {
                let len = batch.length(r);
                let (s, c) = objectives::kl_label_smooth_sum(
                    &cache.logits[..(len - 1) * vsize],
                    vsize,
                    &batch.row_tokens(r)[1..],
                    &batch.row_mask(r)[1..],
                    *epsilon,
                )?;
                sum += s;
                count += c;
            }
            let value = if count == 0 { 0.0 } else { sum / count as f64 };
            (Some(value), None, *epsilon)
        }
        LossFn::Sft => {
            let mut sum = 0.0;
            for (r, cache) in caches.iter().enumerate() {
                let lp = logprob_from_logits(
                    &cache.logits,
                    vsize,
                    batch.row_tokens(r),
                    batch.row_mask(r),
                );
                sum += objectives::sft_loss(lp.value);
            }
            (None, Some(sum / n as f64), 0.0)
        }
        _ => {
            return Err(Error::InputDomain(
                "preference losses need a pair batch".to_string(),
            ))
        }
    };

    let total = kl_value.or(sft_value).unwrap_or(0.0);
    if !total.is_finite() {
        return Err(Error::NonFinite {
            component: if kl_value.is_some() { "kl" } else { "sft" },
        });
    }
    let breakdown = LossBreakdown {
        dpo: 0.0,
        kl: kl_value.unwrap_or(0.0),
        sft: sft_value.unwrap_or(0.0),
        total,
        mean_corrected: 0.0,
    };
    if !want_grad {
        return Ok((breakdown, None));
    }

    let total_masked = batch.total_masked();
    let weight = match loss {
        LossFn::LabelSmoothKl { .. } => {
            if total_masked == 0 {
                0.0
            } else {
                1.0 / total_masked as f64
            }
        }
        LossFn::Sft => 1.0 / n as f64,
        _ => unreachable!(),
    };

    let row_grads: Vec<Vec<f64>> = exec::map_range(n, |r| {
        let mut grad = vec![0.0f64; cfg.param_count()];
        let tokens = batch.row_tokens(r);
        let mask = batch.row_mask(r);
        let mut dlogits = vec![0.0f64; tokens.len() * vsize];
        accumulate_masked_rows(&caches[r], tokens, mask, vsize, eps, weight, &mut dlogits);
        backward_row(&cfg, &off, &pf, &caches[r], &dlogits, &mut grad);
        grad
    });
    let mut grad = Gradients::zeros(cfg);
    for rg in &row_grads {
        for (a, b) in grad.as_mut_slice().iter_mut().zip(rg) {
            *a += b;
        }
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            component: "gradients",
        });
    }
    Ok((breakdown, Some(grad)))
}

fn dispatch(
    params: &ModelParams,
    loss: &LossFn,
    batch: &LossBatch,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    match (loss, batch) {
        (LossFn::LabelSmoothKl { .. } | LossFn::Sft, LossBatch::Sequences(b)) => {
            sequence_loss_internal(params, b, loss, want_grad)
        }
        (LossFn::LabelSmoothKl { .. } | LossFn::Sft, LossBatch::Pairs(pb)) => {
            sequence_loss_internal(params, &pb.chosen, loss, want_grad)
        }
        (LossFn::Dpo { beta }, LossBatch::Pairs(pb)) => {
            let eff = EffectiveLoss {
                alpha: 1.0,
                gamma: 0.0,
                theta: 0.0,
                beta: *beta,
                eps: 0.0,
            };
            pair_loss_internal(params, pb, &eff, want_grad)
        }
        (LossFn::Total(cfg), LossBatch::Pairs(pb)) => {
            cfg.validate()?;
            let eff = EffectiveLoss {
                alpha: cfg.alpha,
                gamma: cfg.gamma,
                theta: cfg.theta,
                beta: cfg.beta,
                eps: cfg.epsilon_smooth,
            };
            pair_loss_internal(params, pb, &eff, want_grad)
        }
        (LossFn::Dpo { .. } | LossFn::Total(_), LossBatch::Sequences(_)) => Err(
            Error::InputDomain("preference losses need a pair batch".to_string()),
        ),
    }
}

/// Loss value (and components) without gradients.
pub fn loss_value(params: &ModelParams, loss: &LossFn, batch: &LossBatch) -> Result<LossBreakdown> {
    dispatch(params, loss, batch, false).map(|(b, _)| b)
}

/// Analytic gradients of `loss` over `batch`, with the loss breakdown.
pub fn gradients(
    params: &ModelParams,
    loss: &LossFn,
    batch: &LossBatch,
) -> Result<(LossBreakdown, Gradients)> {
    let (breakdown, grad) = dispatch(params, loss, batch, true)?;
    Ok((breakdown, grad.expect("gradients requested")))
}
