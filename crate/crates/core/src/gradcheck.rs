//! Finite-difference validation of the analytic gradients.
//!
//! Central differences on the loss value, `(f(p+h) - f(p-h)) / (p+h - (p-h))`,
//! computed entirely in 64-bit arithmetic and divided by the *achieved* step
//! (the parameters are stored as `f32`, so the requested step is quantized).
//! The suite never touches the backward pass: it perturbs a coordinate,
//! re-evaluates the loss, and compares. A coordinate passes when the relative
//! error is below the tolerance or both values agree within a small absolute
//! floor (gradients that are numerically zero on both paths).

use crate::corpus::{build_pref_corpus, build_sft_corpus, CorpusConfig};
use crate::model::grad::{gradients, loss_value, LossBatch, LossFn, PairBatch};
use crate::model::net::SequenceBatch;
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::LossConfig;
use crate::rng::Stream;
use crate::Result;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Differences below this are indistinguishable from f64 evaluation noise in
/// the central difference; they never fail a coordinate.
const ABS_FLOOR: f64 = 1e-7;
/// Gradients smaller than this have too little signal for a relative
/// comparison; they are excluded from the reported maximum.
const DENOM_FLOOR: f64 = 1e-4;

/// Result of checking one loss function.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Full gradient-check report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub checks: Vec<LossCheck>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// Central-difference derivative of the loss with respect to coordinate `k`.
fn numerical_grad(
    params: &ModelParams,
    loss: &LossFn,
    batch: &LossBatch,
    k: usize,
    step: f64,
) -> Result<f64> {
    let orig = f64::from(params.data()[k]);
    let mut plus = params.clone();
    plus.data_mut()[k] = (orig + step) as f32;
    let mut minus = params.clone();
    minus.data_mut()[k] = (orig - step) as f32;
    let achieved = f64::from(plus.data()[k]) - f64::from(minus.data()[k]);
    let f_plus = loss_value(&plus, loss, batch)?.total;
    let f_minus = loss_value(&minus, loss, batch)?.total;
    Ok((f_plus - f_minus) / achieved)
}

/// Check one loss over `coords` random coordinates; returns the worst
/// relative error among coordinates that exceeded the absolute floor.
pub fn check_loss(
    params: &ModelParams,
    loss: &LossFn,
    batch: &LossBatch,
    coords: usize,
    step: f64,
    tolerance: f64,
    stream: &mut Stream,
) -> Result<LossCheck> {
    let (_, analytic) = gradients(params, loss, batch)?;
    let total = params.len();
    // Half the coordinates come from the embedding tables, half from the
    // always-active block and head parameters.
    let emb_len = params.config().layout()[..2]
        .iter()
        .map(|s| s.len())
        .sum::<usize>();
    let mut max_rel = 0.0f64;
    let mut pass = true;
    for i in 0..coords {
        let k = if i % 2 == 0 {
            stream.choose_index(total)
        } else {
            emb_len + stream.choose_index(total - emb_len)
        };
        let numeric = numerical_grad(params, loss, batch, k, step)?;
        let a = analytic.as_slice()[k];
        let diff = (a - numeric).abs();
        let denom = a.abs().max(numeric.abs());
        if denom >= DENOM_FLOOR {
            max_rel = max_rel.max(diff / denom);
        }
        if diff >= ABS_FLOOR && diff >= tolerance * denom {
            pass = false;
        }
    }
    let name = match loss {
        LossFn::LabelSmoothKl { .. } => "kl_label_smooth",
        LossFn::Sft => "sft",
        LossFn::Dpo { .. } => "dpo",
        LossFn::Total(_) => "total",
    };
    Ok(LossCheck {
        loss: name.to_string(),
        coords,
        max_rel_err: max_rel,
        pass,
    })
}

/// A small configuration sized for fast finite differences.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        ff_mult: 2,
        max_len: 48,
        ..ModelConfig::default()
    }
}

/// Run the full suite: KL, SFT, DPO and the weighted total, each on fresh
/// random parameters and a small real batch.
pub fn run_suite(seed: u64, coords_per_loss: usize, tolerance: f64) -> Result<GradCheckReport> {
    let corpus = build_sft_corpus(&CorpusConfig {
        per_emotion: 4,
        seed,
        ..CorpusConfig::default()
    })?;
    let params = ModelParams::init(check_model_config(), &mut Stream::derive(seed, "gradcheck/init", 0))?;
    let vocab = params.vocabulary();

    let utts: Vec<_> = corpus.utterances.iter().take(3).collect();
    let seq_batch = SequenceBatch::from_utterances(&vocab, &utts, true)?;

    let pref = build_pref_corpus(&corpus)?;
    let pairs: Vec<_> = pref.pairs.iter().take(3).collect();
    // A slightly perturbed copy serves as the reference so the pair ratios
    // are non-trivial.
    let mut reference =
        ModelParams::init(check_model_config(), &mut Stream::derive(seed, "gradcheck/ref", 1))?;
    for (r, p) in reference.data_mut().iter_mut().zip(params.data()) {
        *r = 0.5 * *r + 0.5 * p;
    }
    let pair_batch = PairBatch::from_pairs(&vocab, &pairs, &reference)?;

    let total_cfg = LossConfig {
        alpha: 1.0,
        gamma: 1.0,
        theta: 1.0,
        ..LossConfig::default()
    };
    let cases: Vec<(LossFn, LossBatch)> = vec![
        (
            LossFn::LabelSmoothKl { epsilon: 0.1 },
            LossBatch::Sequences(&seq_batch),
        ),
        (LossFn::Sft, LossBatch::Sequences(&seq_batch)),
        (LossFn::Dpo { beta: 0.1 }, LossBatch::Pairs(&pair_batch)),
        (LossFn::Total(total_cfg), LossBatch::Pairs(&pair_batch)),
    ];

    let mut stream = Stream::derive(seed, "gradcheck/coords", 0);
    let mut checks = Vec::new();
    for (loss, batch) in &cases {
        checks.push(check_loss(
            &params,
            loss,
            batch,
            coords_per_loss,
            DEFAULT_STEP,
            tolerance,
            &mut stream,
        )?);
    }
    Ok(GradCheckReport {
        tolerance,
        step: DEFAULT_STEP,
        checks,
    })
}
