//! Forward pass, masked sequence log-probabilities and sampling.
//!
//! The decoder is pre-norm: each block applies layer norm, multi-head causal
//! self-attention and a residual add, then layer norm, a GELU feed-forward and
//! a residual add. Rows of a batch are computed independently (padding never
//! enters the computation), so batched results are bit-identical to
//! one-sequence-at-a-time results and safe to compute in parallel.

use super::{ModelConfig, ModelParams, Offsets, LN_EPS};
use crate::corpus::{encode_instruction, Utterance, Vocabulary};
use crate::error::Error;
use crate::exec;
use crate::math::log_sum_exp;
use crate::rng::Stream;
use crate::Result;

/// Padded token matrix plus loss mask and true lengths.
///
/// The mask marks loss-bearing target positions (speech tokens and the
/// terminal `</s>`); it is false at and beyond each row's length and at
/// position 0, which can never be predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    time: usize,
    tokens: Vec<u32>,
    mask: Vec<bool>,
    lengths: Vec<usize>,
}

impl SequenceBatch {
    pub fn from_rows(rows: &[(Vec<u32>, Vec<bool>)], pad_id: u32) -> Result<SequenceBatch> {
        if rows.is_empty() {
            return Err(Error::InputDomain("empty batch".to_string()));
        }
        let time = rows.iter().map(|(t, _)| t.len()).max().unwrap_or(0);
        if time == 0 {
            return Err(Error::InputDomain("batch of empty sequences".to_string()));
        }
        let mut tokens = vec![pad_id; rows.len() * time];
        let mut mask = vec![false; rows.len() * time];
        let mut lengths = Vec::with_capacity(rows.len());
        for (r, (row_tokens, row_mask)) in rows.iter().enumerate() {
            if row_tokens.is_empty() {
                return Err(Error::InputDomain(format!("row {r} is empty")));
            }
            if row_mask.len() != row_tokens.len() {
                return Err(Error::InputDomain(format!(
                    "row {r}: mask length {} does not match token length {}",
                    row_mask.len(),
                    row_tokens.len()
                )));
            }
            if row_mask[0] {
                return Err(Error::InputDomain(format!(
                    "row {r}: position 0 cannot bear loss"
                )));
            }
            tokens[r * time..r * time + row_tokens.len()].copy_from_slice(row_tokens);
            mask[r * time..r * time + row_mask.len()].copy_from_slice(row_mask);
            lengths.push(row_tokens.len());
        }
        Ok(SequenceBatch {
            time,
            tokens,
            mask,
            lengths,
        })
    }

    /// Instruction-encode utterances into one padded batch.
    pub fn from_utterances(
        vocab: &Vocabulary,
        utterances: &[&Utterance],
        include_target: bool,
    ) -> Result<SequenceBatch> {
        let rows: Vec<(Vec<u32>, Vec<bool>)> = utterances
            .iter()
            .map(|u| encode_instruction(vocab, u, include_target))
            .collect::<Result<_>>()?;
        SequenceBatch::from_rows(&rows, vocab.pad())
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn length(&self, row: usize) -> usize {
        self.lengths[row]
    }

    /// Active (unpadded) tokens of a row.
    pub fn row_tokens(&self, row: usize) -> &[u32] {
        &self.tokens[row * self.time..row * self.time + self.lengths[row]]
    }

    pub fn row_mask(&self, row: usize) -> &[bool] {
        &self.mask[row * self.time..row * self.time + self.lengths[row]]
    }

    /// Loss-bearing positions summed over all rows.
    pub fn total_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Masked log-probability of one sequence: the sum of next-token log-probs at
/// loss-bearing positions. `masked == 0` flags an all-zero mask (the value is
/// exactly zero in that case).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqLogprob {
    pub value: f64,
    pub masked: usize,
}

impl SeqLogprob {
    pub fn mask_was_empty(&self) -> bool {
        self.masked == 0
    }
}

/// Decoding policy for [`sample`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplePolicy {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

// ---------------------------------------------------------------------------
// dense helpers (row-major, f64)
// ---------------------------------------------------------------------------

/// `out[r,:] = x[r,:] @ w` with `x: t×din`, `w: din×dout`.
pub(super) fn matmul(x: &[f64], w: &[f64], t: usize, din: usize, dout: usize, out: &mut [f64]) {
    for r in 0..t {
        let xr = &x[r * din..(r + 1) * din];
        let or = &mut out[r * dout..(r + 1) * dout];
        or.fill(0.0);
        for (i, &xi) in xr.iter().enumerate() {
            let wrow = &w[i * dout..(i + 1) * dout];
            for (o, wv) in wrow.iter().enumerate() {
                or[o] += xi * wv;
            }
        }
    }
}

pub(super) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(super) const GELU_A: f64 = 0.044_715;
/// Rotary frequency ladder in exact octaves, starting at the position-parity
/// frequency pi. Octave spacing makes halved-offset relations (the content
/// channel repeats every other position) expressible as a channel shift.
pub(super) fn rope_freq(pair: usize, half: usize) -> f64 {
    let octave = pair * 8 / half.max(1);
    std::f64::consts::PI / (1u64 << octave.min(62)) as f64
}

/// Rotate query/key pairs by their position angle (rotary embedding). The
/// rotation is orthogonal, so the backward pass applies it with
/// `inverse = true` to gradients.
pub(super) fn rope_apply(
    x: &mut [f64],
    t: usize,
    d: usize,
    heads: usize,
    hd: usize,
    inverse: bool,
) {
    let half = hd / 2;
    for r in 0..t {
        for h in 0..heads {
            let base = r * d + h * hd;
            for i in 0..half {
                let freq = rope_freq(i, half);
                let angle = r as f64 * freq;
                let (sin, cos) = angle.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let a = x[base + 2 * i];
                let b = x[base + 2 * i + 1];
                x[base + 2 * i] = a * cos - b * sin;
                x[base + 2 * i + 1] = a * sin + b * cos;
            }
        }
    }
}

#[inline]
pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(super) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Per-block activations cached for the backward pass.
pub(super) struct BlockCache {
    pub xn1: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Attention weights, `heads × t × t`, zero above the diagonal.
    pub att: Vec<f64>,
    /// Concatenated head outputs before the output projection.
    pub ho: Vec<f64>,
    pub xn2: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub h_pre: Vec<f64>,
    pub h_act: Vec<f64>,
}

pub(super) struct RowCache {
    pub tokens: Vec<u32>,
    pub blocks: Vec<BlockCache>,
    pub final_x: Vec<f64>,
    pub logits: Vec<f64>,
}

impl RowCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    t: usize,
    d: usize,
    xn: &mut [f64],
    rstd: &mut [f64],
    out: &mut [f64],
) {
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let n = (row[i] - mean) * rs;
            xn[r * d + i] = n;
            out[r * d + i] = g[i] * n + b[i];
        }
    }
}

/// Full forward pass over one (unpadded) token sequence.
pub(super) fn forward_row(
    cfg: &ModelConfig,
    off: &Offsets,
    pf: &[f64],
    tokens: &[u32],
) -> Result<RowCache> {
    let t = tokens.len();
    let d = cfg.d_model;
    let vsize = cfg.vocab_size();
    let heads = cfg.n_heads;
    let hd = d / heads;
    let f = cfg.ff_mult * d;
    if t == 0 {
        return Err(Error::InputDomain("empty sequence".to_string()));
    }
    if t > cfg.max_len {
        return Err(Error::InputDomain(format!(
            "sequence length {t} exceeds max_len {}",
            cfg.max_len
        )));
    }
    for &id in tokens {
        if id as usize >= vsize {
            return Err(Error::InputDomain(format!(
                "token id {id} outside vocabulary of size {vsize}"
            )));
        }
    }

    let mut x = vec![0.0f64; t * d];
    for (r, &id) in tokens.iter().enumerate() {
        let te = &pf[off.tok_emb + id as usize * d..off.tok_emb + (id as usize + 1) * d];
        let pe = &pf[off.pos_emb + r * d..off.pos_emb + (r + 1) * d];
        for i in 0..d {
            x[r * d + i] = te[i] + pe[i];
        }
    }

    let scale = 1.0 / (hd as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for bo in &off.blocks {
        let x_in = x.clone();
        let mut xn1 = vec![0.0f64; t * d];
        let mut ln1_rstd = vec![0.0f64; t];
        let mut normed = vec![0.0f64; t * d];
        layer_norm(
            &x_in,
            &pf[bo.ln1_g..bo.ln1_g + d],
            &pf[bo.ln1_b..bo.ln1_b + d],
            t,
            d,
            &mut xn1,
            &mut ln1_rstd,
            &mut normed,
        );

        let mut q = vec![0.0f64; t * d];
        let mut k = vec![0.0f64; t * d];
        let mut v = vec![0.0f64; t * d];
        matmul(&normed, &pf[bo.wq..bo.wq + d * d], t, d, d, &mut q);
        matmul(&normed, &pf[bo.wk..bo.wk + d * d], t, d, d, &mut k);
        matmul(&normed, &pf[bo.wv..bo.wv + d * d], t, d, d, &mut v);
        rope_apply(&mut q, t, d, heads, hd, false);
        rope_apply(&mut k, t, d, heads, hd, false);

        let mut att = vec![0.0f64; heads * t * t];
        let mut ho = vec![0.0f64; t * d];
        for h in 0..heads {
            let hb = h * hd;
            for ti in 0..t {
                let qrow = &q[ti * d + hb..ti * d + hb + hd];
                let mut scores = Vec::with_capacity(ti + 1);
                for s in 0..=ti {
                    let krow = &k[s * d + hb..s * d + hb + hd];
                    let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                    scores.push(dot * scale);
                }
                let lse = log_sum_exp(&scores);
                let arow = &mut att[h * t * t + ti * t..h * t * t + ti * t + ti + 1];
                for (s, sc) in scores.iter().enumerate() {
                    arow[s] = (sc - lse).exp();
                }
                let orow = &mut ho[ti * d + hb..ti * d + hb + hd];
                for s in 0..=ti {
                    let a = arow[s];
                    let vrow = &v[s * d + hb..s * d + hb + hd];
                    for i in 0..hd {
                        orow[i] += a * vrow[i];
                    }
                }
            }
        }

        let mut attn_out = vec![0.0f64; t * d];
        matmul(&ho, &pf[bo.wo..bo.wo + d * d], t, d, d, &mut attn_out);
        let mut x_mid = vec![0.0f64; t * d];
        for i in 0..t * d {
            x_mid[i] = x_in[i] + attn_out[i];
        }

        let mut xn2 = vec![0.0f64; t * d];
        let mut ln2_rstd = vec![0.0f64; t];
        let mut normed2 = vec![0.0f64; t * d];
        layer_norm(
            &x_mid,
            &pf[bo.ln2_g..bo.ln2_g + d],
            &pf[bo.ln2_b..bo.ln2_b + d],
            t,
            d,
            &mut xn2,
            &mut ln2_rstd,
            &mut normed2,
        );

        let mut h_pre = vec![0.0f64; t * f];
        matmul(&normed2, &pf[bo.w1..bo.w1 + d * f], t, d, f, &mut h_pre);
        let b1 = &pf[bo.b1..bo.b1 + f];
        for r in 0..t {
            for i in 0..f {
                h_pre[r * f + i] += b1[i];
            }
        }
        let h_act: Vec<f64> = h_pre.iter().map(|&h| gelu(h)).collect();

        let mut ff = vec![0.0f64; t * d];
        matmul(&h_act, &pf[bo.w2..bo.w2 + f * d], t, f, d, &mut ff);
        let b2 = &pf[bo.b2..bo.b2 + d];
        let mut x_out = vec![0.0f64; t * d];
        for r in 0..t {
            for i in 0..d {
                x_out[r * d + i] = x_mid[r * d + i] + ff[r * d + i] + b2[i];
            }
        }
        x = x_out;

        blocks.push(BlockCache {
            xn1,
            ln1_rstd,
            q,
            k,
            v,
            att,
            ho,
            xn2,
            ln2_rstd,
            h_pre,
            h_act,
        });
    }

    let mut logits = vec![0.0f64; t * vsize];
    matmul(&x, &pf[off.out_w..off.out_w + d * vsize], t, d, vsize, &mut logits);
    let ob = &pf[off.out_b..off.out_b + vsize];
    for r in 0..t {
        for vcol in 0..vsize {
            logits[r * vsize + vcol] += ob[vcol];
        }
    }

    Ok(RowCache {
        tokens: tokens.to_vec(),
        blocks,
        final_x: x,
        logits,
    })
}

/// Per-position vocabulary logits for every row of the batch (row-major,
/// `length × vocab` per row). Position `t` depends only on tokens `<= t`.
pub fn forward_logits(params: &ModelParams, batch: &SequenceBatch) -> Result<Vec<Vec<f64>>> {
    let cfg = params.config();
    let off = cfg.offsets();
    let pf = params.to_f64();
    let rows: Vec<Result<Vec<f64>>> = exec::map_range(batch.batch_size(), |r| {
        forward_row(cfg, &off, &pf, batch.row_tokens(r)).map(|c| c.logits)
    });
    rows.into_iter().collect()
}

pub(super) fn logprob_from_logits(
    logits: &[f64],
    vocab_size: usize,
    tokens: &[u32],
    mask: &[bool],
) -> SeqLogprob {
    let mut value = 0.0f64;
    let mut masked = 0usize;
    for t in 1..tokens.len() {
        if mask[t] {
            let row = &logits[(t - 1) * vocab_size..t * vocab_size];
            value += row[tokens[t] as usize] - log_sum_exp(row);
            masked += 1;
        }
    }
    SeqLogprob { value, masked }
}

/// Masked log-probability of each row: the sum over loss-bearing positions of
/// `log softmax(logits[t-1])[token[t]]`.
pub fn sequence_logprob(params: &ModelParams, batch: &SequenceBatch) -> Result<Vec<SeqLogprob>> {
    let cfg = params.config();
    let off = cfg.offsets();
    let pf = params.to_f64();
    let vsize = cfg.vocab_size();
    let rows: Vec<Result<SeqLogprob>> = exec::map_range(batch.batch_size(), |r| {
        let cache = forward_row(cfg, &off, &pf, batch.row_tokens(r))?;
        Ok(logprob_from_logits(
            &cache.logits,
            vsize,
            batch.row_tokens(r),
            batch.row_mask(r),
        ))
    });
    rows.into_iter().collect()
}

fn pick_greedy(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn pick_top_k(row: &[f64], k: usize, temperature: f64, stream: &mut Stream) -> u32 {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // Ties resolve to the lower token id, matching greedy.
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    let top = &idx[..k.min(idx.len())];
    let mut probs: Vec<f64> = top.iter().map(|&i| row[i] / temperature).collect();
    crate::math::softmax_inplace(&mut probs);
    let draw = stream.next_f64();
    let mut acc = 0.0;
    for (slot, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return top[slot] as u32;
        }
    }
    top[probs.len() - 1] as u32
}

/// Autoregressively extend `prompt`, stopping at `</s>` or after `max_new`
/// tokens. The returned sequence excludes the prompt and the terminal `</s>`.
/// Sampled ids are not constrained to the speech range; evaluation counts
/// violations.
pub fn sample(
    params: &ModelParams,
    prompt: &[u32],
    policy: &SamplePolicy,
    stream: &mut Stream,
    max_new: usize,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::InputDomain("empty prompt".to_string()));
    }
    if let SamplePolicy::TopK { k, temperature } = policy {
        if *k == 0 {
            return Err(Error::InputDomain("top-k requires k >= 1".to_string()));
        }
        if !(temperature.is_finite() && *temperature > 0.0) {
            return Err(Error::InputDomain(format!(
                "temperature {temperature} must be positive"
            )));
        }
    }
    let cfg = params.config();
    let off = cfg.offsets();
    let pf = params.to_f64();
    let vsize = cfg.vocab_size();
    let eos = params.vocabulary().eos();

    let mut context = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && context.len() < cfg.max_len {
        let cache = forward_row(cfg, &off, &pf, &context)?;
        let last = &cache.logits[(context.len() - 1) * vsize..context.len() * vsize];
        let next = match policy {
            SamplePolicy::Greedy => pick_greedy(last),
            SamplePolicy::TopK { k, temperature } => pick_top_k(last, *k, *temperature, stream),
        };
        if next == eos {
            break;
        }
        out.push(next);
        context.push(next);
    }
    Ok(out)
}
