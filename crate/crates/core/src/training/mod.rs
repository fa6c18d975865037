//! Two-stage training: instruction tuning, then preference optimization
//! against the frozen stage-1 reference.
//!
//! Training is deterministic given `(seed, config, corpus)`: batch order comes
//! from a per-epoch seeded shuffle, the optimizer is plain Adam with fixed
//! constants, and all reductions have a fixed order. Every run keeps a copy of
//! the parameters from the last fully-finite step and falls back to it when a
//! loss, gradient or update stops being finite.

pub mod log;

use std::fmt;
use std::path::Path;
use std::time::Instant;

use crate::corpus::Corpus;
use crate::error::Error;
use crate::fsutil::atomic_write;
use crate::model::grad::{gradients, Gradients, LossBatch, LossFn, PairBatch};
use crate::model::net::{sequence_logprob, SequenceBatch};
use crate::model::{ensure_vocab_compatible, ModelConfig, ModelParams};
use crate::objectives::LossConfig;
use crate::rng::Stream;
use crate::Result;

pub use log::TrainLogger;

pub const STATE_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.txt";
pub const MOMENTS_FILE: &str = "moments.bin";
pub const REFERENCE_DIR: &str = "reference";

/// Hyperparameters for both stages.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub sft_epochs: usize,
    pub dpo_epochs: usize,
    /// Stage-2 batch size (preference pairs per step).
    pub batch_size: usize,
    /// Stage-1 batch size (sequences per step). Small batches buy more
    /// optimizer steps inside the fixed two-epoch stage-1 budget.
    pub sft_batch_size: usize,
    pub sft_lr: f64,
    pub dpo_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sft_epochs: 2,
            dpo_epochs: 3,
            batch_size: 8,
            sft_batch_size: 1,
            sft_lr: 6e-3,
            dpo_lr: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 42,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sft_epochs == 0 || self.dpo_epochs == 0 {
            return Err(Error::Config("epoch counts must be at least 1".into()));
        }
        if self.batch_size == 0 || self.sft_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        for (name, v) in [
            ("sft_lr", self.sft_lr),
            ("dpo_lr", self.dpo_lr),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} {v} must be positive")));
            }
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sft,
    Dpo,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
        })
    }
}

/// Adam first/second moments, stored `f32` like the parameters so state
/// checkpoints round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> AdamState {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub epoch: usize,
    pub dpo: f64,
    pub kl: f64,
    pub sft: f64,
    pub total: f64,
    /// Mean corrected preference logit of the batch (0 in stage 1).
    pub margin: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Everything needed to resume training mid-run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub stage: Stage,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    pub loss_sum: f64,
    pub loss_count: u64,
    /// Frozen reference for stage 2.
    pub reference: Option<ModelParams>,
}

impl TrainState {
    pub fn new(params: ModelParams, stage: Stage, seed: u64) -> TrainState {
        let n = params.len();
        TrainState {
            params,
            adam: AdamState::new(n),
            stage,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            seed,
            loss_sum: 0.0,
            loss_count: 0,
            reference: None,
        }
    }
}

/// Clip to `max_norm` in place; returns the pre-clip global norm.
pub fn clip_gradients(grad: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grad.global_norm();
    if norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

/// One Adam update (bias-corrected), computed in f64 and stored back as f32.
pub fn adam_update(
    params: &mut ModelParams,
    adam: &mut AdamState,
    grad: &Gradients,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    adam.t += 1;
    let t = adam.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let g = grad.as_slice();
    let data = params.data_mut();
    for (((p, &gi), m_slot), v_slot) in data.iter_mut().zip(g).zip(&mut adam.m).zip(&mut adam.v) {
        let m = beta1 * f64::from(*m_slot) + (1.0 - beta1) * gi;
        let v = beta2 * f64::from(*v_slot) + (1.0 - beta2) * gi * gi;
        *m_slot = m as f32;
        *v_slot = v as f32;
        let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        *p = (f64::from(*p) - update) as f32;
    }
}

fn run_step(
    state: &mut TrainState,
    loss: &LossFn,
    batch: &LossBatch,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    let start = Instant::now();
    let (breakdown, mut grad) = gradients(&state.params, loss, batch)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { component: "total" });
    }
    let grad_norm = clip_gradients(&mut grad, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            component: "grad norm",
        });
    }
    adam_update(
        &mut state.params,
        &mut state.adam,
        &grad,
        lr,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    if !state.params.all_finite() {
        return Err(Error::NonFinite {
            component: "parameters",
        });
    }
    let record = StepRecord {
        step: state.global_step,
        stage: state.stage,
        epoch: state.epoch,
        dpo: breakdown.dpo,
        kl: breakdown.kl,
        sft: breakdown.sft,
        total: breakdown.total,
        margin: breakdown.mean_corrected,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    state.global_step += 1;
    state.step_in_epoch += 1;
    state.loss_sum += breakdown.total;
    state.loss_count += 1;
    Ok(record)
}

/// One supervised step: label-smoothed KL over a sequence batch.
pub fn sft_step(
    state: &mut TrainState,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    run_step(
        state,
        &LossFn::LabelSmoothKl {
            epsilon: cfg.loss.epsilon_smooth,
        },
        &LossBatch::Sequences(batch),
        cfg.sft_lr,
        cfg,
    )
}

/// One preference step: the weighted total loss over a pair batch.
pub fn dpo_step(
    state: &mut TrainState,
    batch: &PairBatch,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    run_step(
        state,
        &LossFn::Total(cfg.loss),
        &LossBatch::Pairs(batch),
        cfg.dpo_lr,
        cfg,
    )
}

/// Outcome of a training run. On divergence `params` falls back to the last
/// fully-finite step and `diverged_at` carries the failing step index.
#[derive(Debug, Clone)]
pub struct TrainRunOutcome {
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
    pub records: Vec<StepRecord>,
    pub diverged_at: Option<u64>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Stage 1: instruction tuning with the label-smoothed KL loss over seeded,
/// freshly shuffled mini-batches.
pub fn run_sft(
    corpus: &Corpus,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut logger: Option<&mut TrainLogger>,
) -> Result<TrainRunOutcome> {
    cfg.validate()?;
    model.validate()?;
    if corpus.utterances.is_empty() {
        return Err(Error::InputDomain("empty corpus".to_string()));
    }
    ensure_vocab_compatible(&model.vocab, "model config", &corpus.config.vocab, "corpus")?;
    let vocab = corpus.vocabulary();
    let params = ModelParams::init(*model, &mut Stream::derive(cfg.seed, "init", 0))?;
    let mut state = TrainState::new(params, Stage::Sft, cfg.seed);
    let mut last_good = state.params.clone();
    let mut epoch_losses = Vec::new();
    let mut records = Vec::new();

    for epoch in 0..cfg.sft_epochs {
        state.epoch = epoch;
        state.step_in_epoch = 0;
        let mut order: Vec<usize> = (0..corpus.utterances.len()).collect();
        Stream::derive(cfg.seed, "shuffle/sft", epoch as u64).shuffle(&mut order);
        let mut epoch_totals = Vec::new();
        for chunk in order.chunks(cfg.sft_batch_size) {
            let utts: Vec<_> = chunk.iter().map(|&i| &corpus.utterances[i]).collect();
            let batch = SequenceBatch::from_utterances(&vocab, &utts, true)?;
            match sft_step(&mut state, &batch, cfg) {
                Ok(record) => {
                    epoch_totals.push(record.total);
                    if let Some(log) = logger.as_deref_mut() {
                        log.log_step(&record)?;
                    }
                    records.push(record);
                    last_good = state.params.clone();
                }
                Err(Error::NonFinite { .. }) => {
                    return Ok(TrainRunOutcome {
                        params: last_good,
                        epoch_losses,
                        records,
                        diverged_at: Some(state.global_step),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        epoch_losses.push(mean(&epoch_totals));
    }
    Ok(TrainRunOutcome {
        params: state.params,
        epoch_losses,
        records,
        diverged_at: None,
    })
}

/// Precompute the frozen reference's masked log-probabilities for both sides
/// of every pair. The rejected side is scored under the pair's conditioning
/// emotion.
fn reference_logprobs(
    reference: &ModelParams,
    pairs: &[crate::corpus::PreferencePair],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let vocab = reference.vocabulary();
    let chosen: Vec<_> = pairs.iter().map(|p| &p.chosen).collect();
    let conditioned: Vec<_> = pairs.iter().map(|p| p.conditioned_rejected()).collect();
    let rejected: Vec<&crate::corpus::Utterance> = conditioned.iter().collect();
    let cb = SequenceBatch::from_utterances(&vocab, &chosen, true)?;
    let rb = SequenceBatch::from_utterances(&vocab, &rejected, true)?;
    let ref_c = sequence_logprob(reference, &cb)?.iter().map(|l| l.value).collect();
    let ref_r = sequence_logprob(reference, &rb)?.iter().map(|l| l.value).collect();
    Ok((ref_c, ref_r))
}

/// Stage 2: preference optimization. The policy starts as a copy of `pi_sft`;
/// a second copy is frozen as the reference and hash-checked at the end.
pub fn run_dpo(
    pi_sft: &ModelParams,
    pairs: &[crate::corpus::PreferencePair],
    cfg: &TrainConfig,
    mut logger: Option<&mut TrainLogger>,
) -> Result<TrainRunOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InputDomain("empty preference set".to_string()));
    }
    if !pi_sft.all_finite() {
        return Err(Error::NonFinite {
            component: "reference parameters",
        });
    }
    let vocab = pi_sft.vocabulary();
    let reference = pi_sft.clone();
    let ref_hash = reference.content_hash();

    let (ref_chosen, ref_rejected) = reference_logprobs(&reference, pairs)?;

    let mut state = TrainState::new(pi_sft.clone(), Stage::Dpo, cfg.seed);
    state.reference = Some(reference);
    let mut last_good = state.params.clone();
    let mut epoch_losses = Vec::new();
    let mut records = Vec::new();

    for epoch in 0..cfg.dpo_epochs {
        state.epoch = epoch;
        state.step_in_epoch = 0;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        Stream::derive(cfg.seed, "shuffle/dpo", epoch as u64).shuffle(&mut order);
        let mut epoch_totals = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let chosen: Vec<_> = chunk.iter().map(|&i| &pairs[i].chosen).collect();
            let conditioned: Vec<_> = chunk
                .iter()
                .map(|&i| pairs[i].conditioned_rejected())
                .collect();
            let rejected: Vec<&crate::corpus::Utterance> = conditioned.iter().collect();
            let batch = PairBatch::new(
                SequenceBatch::from_utterances(&vocab, &chosen, true)?,
                SequenceBatch::from_utterances(&vocab, &rejected, true)?,
                chunk.iter().map(|&i| ref_chosen[i]).collect(),
                chunk.iter().map(|&i| ref_rejected[i]).collect(),
            )?;
            match dpo_step(&mut state, &batch, cfg) {
                Ok(record) => {
                    epoch_totals.push(record.total);
                    if let Some(log) = logger.as_deref_mut() {
                        log.log_step(&record)?;
                    }
                    records.push(record);
                    last_good = state.params.clone();
                }
                Err(Error::NonFinite { .. }) => {
                    epoch_losses.push(mean(&epoch_totals));
                    let diverged_at = Some(state.global_step);
                    state.params = last_good;
                    return finish_dpo(state, epoch_losses, records, diverged_at, ref_hash);
                }
                Err(e) => return Err(e),
            }
        }
        epoch_losses.push(mean(&epoch_totals));
    }
    finish_dpo(state, epoch_losses, records, None, ref_hash)
}

fn finish_dpo(
    state: TrainState,
    epoch_losses: Vec<f64>,
    records: Vec<StepRecord>,
    diverged_at: Option<u64>,
    ref_hash: u64,
) -> Result<TrainRunOutcome> {
    let reference = state.reference.as_ref().expect("stage 2 keeps a reference");
    if reference.content_hash() != ref_hash {
        return Err(Error::ReferenceMutated);
    }
    Ok(TrainRunOutcome {
        params: state.params,
        epoch_losses,
        records,
        diverged_at,
    })
}

// ---------------------------------------------------------------------------
// state checkpointing
// ---------------------------------------------------------------------------

fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn f64_from_hex(s: &str, field: &str, path: &Path) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| {
            Error::format(
                path.display().to_string(),
                format!("invalid value for '{field}'"),
            )
        })
}

/// Save a full training state: the model checkpoint files plus optimizer
/// moments and run bookkeeping, bit-exactly restorable.
pub fn checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    state.params.save(dir)?;
    let mut bytes = Vec::with_capacity((state.adam.m.len() + state.adam.v.len()) * 4);
    for v in state.adam.m.iter().chain(&state.adam.v) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(&dir.join(MOMENTS_FILE), &bytes)?;

    let mut text = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(text, "format_version = {STATE_VERSION}");
    let _ = writeln!(text, "stage = {}", state.stage);
    let _ = writeln!(text, "epoch = {}", state.epoch);
    let _ = writeln!(text, "step_in_epoch = {}", state.step_in_epoch);
    let _ = writeln!(text, "global_step = {}", state.global_step);
    let _ = writeln!(text, "adam_t = {}", state.adam.t);
    let _ = writeln!(text, "seed = {}", state.seed);
    let _ = writeln!(text, "loss_sum = {}", f64_to_hex(state.loss_sum));
    let _ = writeln!(text, "loss_count = {}", state.loss_count);
    let _ = writeln!(text, "has_reference = {}", u8::from(state.reference.is_some()));
    atomic_write(&dir.join(STATE_FILE), text.as_bytes())?;

    if let Some(reference) = &state.reference {
        reference.save(&dir.join(REFERENCE_DIR))?;
    }
    Ok(())
}

fn state_value<'a>(text: &'a str, key: &str, path: &Path) -> Result<&'a str> {
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == key {
                return Ok(v.trim());
            }
        }
    }
    Err(Error::format(
        path.display().to_string(),
        format!("missing field '{key}'"),
    ))
}

fn state_num<T: std::str::FromStr>(text: &str, key: &str, path: &Path) -> Result<T> {
    state_value(text, key, path)?.parse().map_err(|_| {
        Error::format(
            path.display().to_string(),
            format!("invalid value for '{key}'"),
        )
    })
}

/// Restore a state saved by [`checkpoint`].
pub fn restore(dir: &Path) -> Result<TrainState> {
    let params = ModelParams::load(dir)?;
    let state_path = dir.join(STATE_FILE);
    let text = std::fs::read_to_string(&state_path)?;
    let version: u32 = state_num(&text, "format_version", &state_path)?;
    if version != STATE_VERSION {
        return Err(Error::format(
            state_path.display().to_string(),
            format!("unsupported format_version {version}"),
        ));
    }
    let stage = match state_value(&text, "stage", &state_path)? {
        "sft" => Stage::Sft,
        "dpo" => Stage::Dpo,
        other => {
            return Err(Error::format(
                state_path.display().to_string(),
                format!("unknown stage '{other}'"),
            ))
        }
    };

    let n = params.len();
    let moments_path = dir.join(MOMENTS_FILE);
    let bytes = std::fs::read(&moments_path)?;
    if bytes.len() != n * 8 {
        return Err(Error::format(
            moments_path.display().to_string(),
            format!("expected {} bytes, found {}", n * 8, bytes.len()),
        ));
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let adam = AdamState {
        m: vals[..n].to_vec(),
        v: vals[n..].to_vec(),
        t: state_num(&text, "adam_t", &state_path)?,
    };

    let has_reference: u8 = state_num(&text, "has_reference", &state_path)?;
    let reference = if has_reference == 1 {
        Some(ModelParams::load(&dir.join(REFERENCE_DIR))?)
    } else {
        None
    };

    Ok(TrainState {
        params,
        adam,
        stage,
        epoch: state_num(&text, "epoch", &state_path)?,
        step_in_epoch: state_num(&text, "step_in_epoch", &state_path)?,
        global_step: state_num(&text, "global_step", &state_path)?,
        seed: state_num(&text, "seed", &state_path)?,
        loss_sum: f64_from_hex(
            state_value(&text, "loss_sum", &state_path)?,
            "loss_sum",
            &state_path,
        )?,
        loss_count: state_num(&text, "loss_count", &state_path)?,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_pref_corpus, build_sft_corpus, CorpusConfig};

    fn small_corpus(seed: u64, n: usize) -> Corpus {
        build_sft_corpus(&CorpusConfig {
            per_emotion: n,
            seed,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            ff_mult: 2,
            max_len: 48,
            ..ModelConfig::default()
        }
    }

    fn fast_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            sft_epochs: 2,
            dpo_epochs: 1,
            batch_size: 4,
            sft_lr: 3e-3,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sft_loss_decreases_across_epochs() {
        for seed in [1u64, 2, 3] {
            let corpus = small_corpus(seed, 8);
            let out = run_sft(&corpus, &small_model(), &fast_cfg(seed), None).unwrap();
            assert!(out.diverged_at.is_none());
            assert_eq!(out.epoch_losses.len(), 2);
            assert!(
                out.epoch_losses[1] < out.epoch_losses[0],
                "seed {seed}: {:?}",
                out.epoch_losses
            );
        }
    }

    #[test]
    fn sft_is_deterministic_under_seed() {
        let corpus = small_corpus(5, 6);
        let a = run_sft(&corpus, &small_model(), &fast_cfg(5), None).unwrap();
        let b = run_sft(&corpus, &small_model(), &fast_cfg(5), None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.params.content_hash(), b.params.content_hash());
        let c = run_sft(&corpus, &small_model(), &fast_cfg(6), None).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn dpo_first_step_loss_is_ln2_and_reference_frozen() {
        let corpus = small_corpus(7, 6);
        let sft = run_sft(&corpus, &small_model(), &fast_cfg(7), None).unwrap();
        let pref = build_pref_corpus(&corpus).unwrap();
        let out = run_dpo(&sft.params, &pref.pairs, &fast_cfg(7), None).unwrap();
        assert!(out.diverged_at.is_none());
        let first = &out.records[0];
        assert!(
            (first.dpo - std::f64::consts::LN_2).abs() < 1e-6,
            "first dpo = {}",
            first.dpo
        );
        assert!(first.margin.abs() < 1e-9);
    }

    #[test]
    fn dpo_with_all_zero_weights_is_a_no_op() {
        let corpus = small_corpus(9, 4);
        let sft = run_sft(&corpus, &small_model(), &fast_cfg(9), None).unwrap();
        let pref = build_pref_corpus(&corpus).unwrap();
        let cfg = TrainConfig {
            loss: LossConfig {
                alpha: 0.0,
                gamma: 0.0,
                theta: 0.0,
                ..LossConfig::default()
            },
            ..fast_cfg(9)
        };
        let out = run_dpo(&sft.params, &pref.pairs, &cfg, None).unwrap();
        assert_eq!(out.params, sft.params);
    }

    #[test]
    fn gradient_clip_bounds_global_norm() {
        let cfg = small_model();
        let mut grad = Gradients::zeros(cfg);
        for (i, g) in grad.as_mut_slice().iter_mut().enumerate() {
            *g = (i % 17) as f64 * 0.3;
        }
        let before = grad.global_norm();
        assert!(before > 1.0);
        let reported = clip_gradients(&mut grad, 1.0);
        assert_eq!(reported, before);
        assert!(grad.global_norm() <= 1.0 + 1e-9);

        // Below the threshold nothing changes.
        let mut small = Gradients::zeros(cfg);
        small.as_mut_slice()[0] = 0.5;
        clip_gradients(&mut small, 1.0);
        assert_eq!(small.as_slice()[0], 0.5);
    }

    #[test]
    fn divergence_returns_last_good_params() {
        let corpus = small_corpus(11, 4);
        // A learning rate beyond f32 range makes the first update non-finite.
        let cfg = TrainConfig {
            sft_lr: 1e39,
            ..fast_cfg(11)
        };
        let out = run_sft(&corpus, &small_model(), &cfg, None).unwrap();
        assert_eq!(out.diverged_at, Some(0));
        assert!(out.params.all_finite());
        let fresh = ModelParams::init(small_model(), &mut Stream::derive(11, "init", 0)).unwrap();
        assert_eq!(out.params, fresh);
    }

    #[test]
    fn state_checkpoint_round_trip_then_step_is_bit_exact() {
        let corpus = small_corpus(13, 4);
        let model = small_model();
        let cfg = fast_cfg(13);
        let vocab = corpus.vocabulary();
        let params = ModelParams::init(model, &mut Stream::derive(13, "init", 0)).unwrap();
        let mut state = TrainState::new(params, Stage::Sft, 13);

        // Advance a few steps so moments are non-trivial.
        let utts: Vec<_> = corpus.utterances.iter().take(4).collect();
        let batch = SequenceBatch::from_utterances(&vocab, &utts, true).unwrap();
        for _ in 0..3 {
            sft_step(&mut state, &batch, &cfg).unwrap();
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state");
        checkpoint(&state, &path).unwrap();
        let mut restored = restore(&path).unwrap();
        assert_eq!(restored, state);

        let rec_a = sft_step(&mut state, &batch, &cfg).unwrap();
        let rec_b = sft_step(&mut restored, &batch, &cfg).unwrap();
        assert_eq!(state.params, restored.params);
        assert_eq!(state.adam, restored.adam);
        assert_eq!(rec_a.total, rec_b.total);
    }

    #[test]
    fn dpo_state_checkpoint_keeps_reference_bit_exact() {
        let corpus = small_corpus(15, 4);
        let model = small_model();
        let cfg = fast_cfg(15);
        let sft = run_sft(&corpus, &model, &cfg, None).unwrap();
        let mut state = TrainState::new(sft.params.clone(), Stage::Dpo, 15);
        state.reference = Some(sft.params.clone());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state");
        checkpoint(&state, &path).unwrap();
        let restored = restore(&path).unwrap();
        assert_eq!(restored.reference.as_ref().unwrap(), &sft.params);

        // A stage-1 checkpoint restored as the reference matches in memory.
        let sft_dir = dir.path().join("sft_ckpt");
        sft.params.save(&sft_dir).unwrap();
        let loaded = ModelParams::load(&sft_dir).unwrap();
        assert_eq!(loaded, sft.params);
        assert_eq!(
            loaded.content_hash(),
            restored.reference.as_ref().unwrap().content_hash()
        );
    }

    #[test]
    fn corrupted_state_file_names_the_field() {
        let corpus = small_corpus(17, 4);
        let model = small_model();
        let params = ModelParams::init(model, &mut Stream::derive(17, "init", 0)).unwrap();
        let state = TrainState::new(params, Stage::Sft, 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state");
        checkpoint(&state, &path).unwrap();

        let state_path = path.join(STATE_FILE);
        let text = std::fs::read_to_string(&state_path).unwrap();
        std::fs::write(&state_path, text.replace("adam_t = 0", "adam_t = x")).unwrap();
        let err = restore(&path).unwrap_err();
        assert!(err.to_string().contains("adam_t"), "{err}");
        let _ = corpus;
    }

    #[test]
    fn truncated_moments_file_is_detected() {
        let model = small_model();
        let params = ModelParams::init(model, &mut Stream::derive(19, "init", 0)).unwrap();
        let state = TrainState::new(params, Stage::Sft, 19);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state");
        checkpoint(&state, &path).unwrap();
        let moments = path.join(MOMENTS_FILE);
        let bytes = std::fs::read(&moments).unwrap();
        std::fs::write(&moments, &bytes[..bytes.len() - 8]).unwrap();
        assert!(restore(&path).is_err());
    }

    #[test]
    fn vocab_mismatch_between_model_and_corpus_errors() {
        let corpus = small_corpus(21, 2);
        let model = ModelConfig {
            vocab: crate::corpus::VocabConfig {
                text_size: 16,
                ..Default::default()
            },
            ..small_model()
        };
        let err = run_sft(&corpus, &model, &fast_cfg(21), None).unwrap_err();
        assert!(matches!(err, Error::VocabMismatch { .. }));
    }
}
