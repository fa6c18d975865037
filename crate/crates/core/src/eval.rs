//! Oracle-proxy evaluation and the ablation grid.
//!
//! Generation quality is scored against the corpus's generative rule: the
//! oracle classifier recovers the emotion from the prosody channel (emotion
//! recognition proxy), the content channel gives a token error rate
//! (intelligibility proxy), and the prosody channel gives contour correlation
//! and level-histogram cosine similarities. Items are independent and may be
//! evaluated in parallel; aggregation keeps a fixed order.

use std::fmt;
use std::fmt::Write as _;

use crate::corpus::{
    build_pref_corpus, encode_instruction, oracle_classify, split_holdout, Corpus, Emotion,
    PreferencePair, Utterance, Vocabulary, EMOTIONS,
};
use crate::error::Error;
use crate::exec;
use crate::model::grad::PairBatch;
use crate::model::net::{sample, sequence_logprob, SamplePolicy};
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::{js_dpo_logits, PairLogprobs};
use crate::rng::Stream;
use crate::training::{run_dpo, run_sft, StepRecord, TrainConfig, TrainRunOutcome};
use crate::Result;

/// Desk-scale analogues of the objective evaluation axes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    /// Oracle recognition accuracy per emotion (indexed by emotion encoding).
    pub per_emotion_ser: [f64; 5],
    /// Mean of the per-emotion accuracies over emotions present in the set.
    pub macro_ser: f64,
    /// Content-channel token error rate (lower is better).
    pub cter: f64,
    /// Mean Pearson correlation between generated and reference prosody
    /// contours, in [-1, 1]; zero-variance contours score 0.
    pub prosody_corr: f64,
    /// Mean cosine similarity between 9-bin prosody-level histograms
    /// (8 levels plus out-of-range), in [0, 1].
    pub emo_hist_cos: f64,
    /// Fraction of emitted tokens outside the speech range.
    pub invalid_rate: f64,
    pub samples: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples        {}", self.samples)?;
        writeln!(f, "macro SER      {:.4}", self.macro_ser)?;
        for &e in &EMOTIONS {
            writeln!(
                f,
                "  {:<12} {:.4}",
                e.name(),
                self.per_emotion_ser[e.index()]
            )?;
        }
        writeln!(f, "CTER           {:.4}", self.cter)?;
        writeln!(f, "prosody corr   {:.4}", self.prosody_corr)?;
        writeln!(f, "emo hist cos   {:.4}", self.emo_hist_cos)?;
        write!(f, "invalid rate   {:.4}", self.invalid_rate)
    }
}

/// Per-item scores, aggregated by [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ItemMetrics {
    pub ser_correct: bool,
    pub cter: f64,
    pub prosody_corr: f64,
    pub hist_cos: f64,
    pub invalid_rate: f64,
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return 0.0;
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) || constant(ys) {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        dx += (x - mx) * (x - mx);
        dy += (y - my) * (y - my);
    }
    num / (dx * dy).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Prosody-level histogram over `expected_len` positions: 8 level bins plus
/// one out-of-range bin for missing or non-speech positions.
fn level_histogram(vocab: &Vocabulary, tokens: &[u32], expected_len: usize) -> Vec<f64> {
    let levels = vocab.config().prosody_levels as usize;
    let mut hist = vec![0.0f64; levels + 1];
    for i in 0..expected_len {
        let bin = tokens
            .get(i)
            .and_then(|&id| vocab.prosody_of(id).ok())
            .map_or(levels, |p| p as usize);
        hist[bin] += 1.0;
    }
    hist
}

/// Score one generated sequence against its reference utterance.
pub(crate) fn item_metrics(
    vocab: &Vocabulary,
    generated: &[u32],
    reference: &Utterance,
) -> ItemMetrics {
    let expected = reference.speech.len();

    let invalid = generated.iter().filter(|&&t| !vocab.is_speech(t)).count();
    let invalid_rate = if generated.is_empty() {
        0.0
    } else {
        invalid as f64 / generated.len() as f64
    };

    // Emotion recognized from the in-range tokens, in order.
    let speech_only: Vec<u32> = generated
        .iter()
        .copied()
        .filter(|&t| vocab.is_speech(t))
        .collect();
    let ser_correct = !speech_only.is_empty()
        && oracle_classify(vocab, &speech_only)
            .map(|e| e == reference.emotion)
            .unwrap_or(false);

    // Content channel: out-of-range or truncated positions count as errors.
    let mut content_errors = 0usize;
    for i in 0..expected {
        let ok = generated.get(i).is_some_and(|&g| {
            vocab.is_speech(g)
                && vocab.content_of(g).ok() == vocab.content_of(reference.speech[i]).ok()
        });
        if !ok {
            content_errors += 1;
        }
    }
    let cter = content_errors as f64 / expected.max(1) as f64;

    // Prosody contour correlation over positions where the generation is a
    // valid speech token.
    let mut gen_levels = Vec::new();
    let mut ref_levels = Vec::new();
    for (&gen_tok, &ref_tok) in generated.iter().zip(&reference.speech) {
        if let Ok(g) = vocab.prosody_of(gen_tok) {
            gen_levels.push(f64::from(g));
            ref_levels.push(f64::from(
                vocab.prosody_of(ref_tok).expect("reference is speech"),
            ));
        }
    }
    let prosody_corr = pearson(&gen_levels, &ref_levels);

    let gen_hist = level_histogram(vocab, generated, expected);
    let ref_hist = level_histogram(vocab, &reference.speech, expected);
    let hist_cos = cosine(&gen_hist, &ref_hist);

    ItemMetrics {
        ser_correct,
        cter,
        prosody_corr,
        hist_cos,
        invalid_rate,
    }
}

fn aggregate(items: &[(Emotion, ItemMetrics)]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::InputDomain("empty evaluation set".to_string()));
    }
    let mut correct = [0usize; 5];
    let mut counts = [0usize; 5];
    let mut cter = 0.0;
    let mut corr = 0.0;
    let mut cos = 0.0;
    let mut invalid = 0.0;
    for (emotion, m) in items {
        let e = emotion.index();
        counts[e] += 1;
        if m.ser_correct {
            correct[e] += 1;
        }
        cter += m.cter;
        corr += m.prosody_corr;
        cos += m.hist_cos;
        invalid += m.invalid_rate;
    }
    let mut per_emotion = [0.0f64; 5];
    let mut macro_sum = 0.0;
    let mut present = 0usize;
    for e in 0..5 {
        if counts[e] > 0 {
            per_emotion[e] = correct[e] as f64 / counts[e] as f64;
            macro_sum += per_emotion[e];
            present += 1;
        }
    }
    let n = items.len() as f64;
    Ok(EvalReport {
        per_emotion_ser: per_emotion,
        macro_ser: macro_sum / present as f64,
        cter: cter / n,
        prosody_corr: corr / n,
        emo_hist_cos: cos / n,
        invalid_rate: invalid / n,
        samples: items.len(),
    })
}

/// Generate speech tokens for each held-out utterance and score them against
/// the reference. `seed` keys the per-item sampling streams (greedy decoding
/// ignores them).
pub fn evaluate(
    params: &ModelParams,
    test: &[Utterance],
    policy: &SamplePolicy,
    seed: u64,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InputDomain("empty evaluation set".to_string()));
    }
    let vocab = params.vocabulary();
    let policy = *policy;
    let scored: Vec<Result<(Emotion, ItemMetrics)>> = exec::map_indexed(test, |idx, u| {
        let (prompt, _) = encode_instruction(&vocab, u, false)?;
        let max_new = 2 * u.text.len() + 4;
        let mut stream = Stream::derive(seed, "sample", idx as u64);
        let generated = sample(params, &prompt, &policy, &mut stream, max_new)?;
        Ok((u.emotion, item_metrics(&vocab, &generated, u)))
    });
    let scored = scored.into_iter().collect::<Result<Vec<_>>>()?;
    aggregate(&scored)
}

/// Macro oracle accuracy of an emotion-agnostic random-token generator; the
/// chance floor for the recognition proxy.
pub fn random_generation_ser(vocab: &Vocabulary, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InputDomain("empty evaluation set".to_string()));
    }
    let scored: Vec<(Emotion, ItemMetrics)> = exec::map_range(n, |i| {
        let mut stream = Stream::derive(seed, "random-gen", i as u64);
        let emotion = EMOTIONS[i % EMOTIONS.len()];
        let text_len = 3 + stream.next_below(6) as usize;
        let len = 2 * text_len;
        let tokens: Vec<u32> = (0..len)
            .map(|_| stream.next_below(u64::from(vocab.size())) as u32)
            .collect();
        let reference = Utterance {
            emotion,
            speaker: None,
            text: vec![0; text_len],
            speech: vec![vocab.speech_base(); len],
        };
        (emotion, item_metrics(vocab, &tokens, &reference))
    });
    Ok(aggregate(&scored)?.macro_ser)
}

/// Corrected-logit statistics of a policy against its frozen reference over
/// held-out pairs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MarginReport {
    pub mean: f64,
    pub median: f64,
    /// Fraction of pairs with a strictly positive margin (ties count as not
    /// positive).
    pub frac_positive: f64,
    pub pairs: usize,
}

/// Per-pair corrected preference logits of `policy` against `reference`.
pub fn pair_margins(
    policy: &ModelParams,
    reference: &ModelParams,
    pairs: &[PreferencePair],
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::InputDomain("empty pair set".to_string()));
    }
    let vocab = policy.vocabulary();
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let batch = PairBatch::from_pairs(&vocab, &refs, reference)?;
    let pol_c = sequence_logprob(policy, &batch.chosen)?;
    let pol_r = sequence_logprob(policy, &batch.rejected)?;
    (0..pairs.len())
        .map(|i| {
            let p = PairLogprobs {
                chosen_policy: pol_c[i].value,
                chosen_ref: batch.ref_chosen[i],
                rejected_policy: pol_r[i].value,
                rejected_ref: batch.ref_rejected[i],
            };
            Ok(js_dpo_logits(&p)?.corrected)
        })
        .collect()
}

pub fn margin_report(
    policy: &ModelParams,
    reference: &ModelParams,
    pairs: &[PreferencePair],
) -> Result<MarginReport> {
    let mut margins = pair_margins(policy, reference, pairs)?;
    let n = margins.len();
    let mean = margins.iter().sum::<f64>() / n as f64;
    margins.sort_by(|a, b| a.partial_cmp(b).expect("finite margins"));
    let median = if n % 2 == 1 {
        margins[n / 2]
    } else {
        0.5 * (margins[n / 2 - 1] + margins[n / 2])
    };
    let frac_positive = margins.iter().filter(|&&m| m > 0.0).count() as f64 / n as f64;
    Ok(MarginReport {
        mean,
        median,
        frac_positive,
        pairs: n,
    })
}

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

/// One trained-and-evaluated configuration of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub report: Option<EvalReport>,
    pub diverged: bool,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
    pub holdout_items: usize,
}

impl AblationGrid {
    /// Aligned text table, one row per configuration.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:>9} {:>8} {:>8} {:>8} {:>8}",
            "row", "macro_ser", "cter", "pros", "emo_cos", "invalid"
        );
        for row in &self.rows {
            match (&row.report, row.diverged) {
                (Some(r), false) => {
                    let _ = writeln!(
                        out,
                        "{:<28} {:>9.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                        row.name, r.macro_ser, r.cter, r.prosody_corr, r.emo_hist_cos,
                        r.invalid_rate
                    );
                }
                _ => {
                    let _ = writeln!(out, "{:<28} {:>9}", row.name, "FAILED");
                }
            }
        }
        out
    }

    /// Comma-separated values for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "row,macro_ser,ser_neutral,ser_angry,ser_happy,ser_sad,ser_surprise,\
             cter,prosody_corr,emo_hist_cos,invalid_rate,samples,diverged\n",
        );
        for row in &self.rows {
            match &row.report {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                        row.name,
                        r.macro_ser,
                        r.per_emotion_ser[0],
                        r.per_emotion_ser[1],
                        r.per_emotion_ser[2],
                        r.per_emotion_ser[3],
                        r.per_emotion_ser[4],
                        r.cter,
                        r.prosody_corr,
                        r.emo_hist_cos,
                        r.invalid_rate,
                        r.samples,
                        row.diverged
                    );
                }
                None => {
                    let _ = writeln!(out, "{},,,,,,,,,,,,{}", row.name, row.diverged);
                }
            }
        }
        out
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn stage2_row(
    name: &str,
    init: &ModelParams,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
    test: &[Utterance],
) -> AblationRow {
    match run_dpo(init, pairs, cfg, None) {
        Ok(out) => finish_row(name, out, test),
        Err(_) => AblationRow {
            name: name.to_string(),
            report: None,
            diverged: true,
            records: Vec::new(),
        },
    }
}

fn finish_row(name: &str, out: TrainRunOutcome, test: &[Utterance]) -> AblationRow {
    let diverged = out.diverged_at.is_some();
    let report = evaluate(&out.params, test, &SamplePolicy::Greedy, 0).ok();
    AblationRow {
        name: name.to_string(),
        report,
        diverged,
        records: out.records,
    }
}

/// Train and evaluate the six-row grid: the full objective, the three loss
/// removals (the all-losses-removed row degenerates to stage 1 only), and the
/// two rows without instruction tuning. Every row shares the same seed and
/// the same held-out split; a diverging row is marked failed and the grid
/// continues.
pub fn run_ablation(
    corpus: &Corpus,
    model: &ModelConfig,
    cfg: &TrainConfig,
    holdout_frac: f64,
) -> Result<AblationGrid> {
    cfg.validate()?;
    let (train, test) = split_holdout(corpus, holdout_frac, cfg.seed)?;
    let pref = build_pref_corpus(&train)?;

    // Rows 1-3 share the stage-1 checkpoint; rows 5-6 share the random init.
    let sft_out = run_sft(&train, model, cfg, None)?;
    let random_init = ModelParams::init(*model, &mut Stream::derive(cfg.seed, "init", 0))?;

    let with_weights = |alpha: f64, theta: f64| TrainConfig {
        loss: crate::objectives::LossConfig {
            alpha,
            theta,
            ..cfg.loss
        },
        ..*cfg
    };

    let mut rows = Vec::new();
    if sft_out.diverged_at.is_some() {
        // Stage 1 failed: every stage-2-from-sft row inherits the failure.
        for name in ["full", "-dpo", "-dpo-sft", "stage1-only"] {
            rows.push(AblationRow {
                name: name.to_string(),
                report: None,
                diverged: true,
                records: Vec::new(),
            });
        }
    } else {
        rows.push(stage2_row("full", &sft_out.params, &pref.pairs, cfg, &test.utterances));
        rows.push(stage2_row(
            "-dpo",
            &sft_out.params,
            &pref.pairs,
            &with_weights(0.0, cfg.loss.theta),
            &test.utterances,
        ));
        rows.push(stage2_row(
            "-dpo-sft",
            &sft_out.params,
            &pref.pairs,
            &with_weights(0.0, 0.0),
            &test.utterances,
        ));
        // The all-three-losses-removed row has no training signal left; it is
        // reported as the stage-1 model alone.
        rows.push(AblationRow {
            name: "stage1-only".to_string(),
            report: evaluate(&sft_out.params, &test.utterances, &SamplePolicy::Greedy, 0).ok(),
            diverged: false,
            records: sft_out.records.clone(),
        });
    }
    rows.push(stage2_row(
        "-instruction-tuning",
        &random_init,
        &pref.pairs,
        cfg,
        &test.utterances,
    ));
    rows.push(stage2_row(
        "-instruction-tuning-sft",
        &random_init,
        &pref.pairs,
        &with_weights(cfg.loss.alpha, 0.0),
        &test.utterances,
    ));

    Ok(AblationGrid {
        rows,
        holdout_items: test.utterances.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_sft_corpus, synthesize_utterance, CorpusConfig, VocabConfig};

    fn vocab() -> Vocabulary {
        Vocabulary::new(VocabConfig::default()).unwrap()
    }

    fn noiseless(emotion: Emotion, text: &[u32]) -> Utterance {
        let mut s = Stream::derive(0, "t", 0);
        synthesize_utterance(&vocab(), text, emotion, None, 0.0, &mut s).unwrap()
    }

    #[test]
    fn perfect_generation_scores_perfectly() {
        let v = vocab();
        let u = noiseless(Emotion::Happy, &[3, 14, 27, 8]);
        let m = item_metrics(&v, &u.speech, &u);
        assert!(m.ser_correct);
        assert_eq!(m.cter, 0.0);
        assert!((m.prosody_corr - 1.0).abs() < 1e-12);
        assert!((m.hist_cos - 1.0).abs() < 1e-12);
        assert_eq!(m.invalid_rate, 0.0);
    }

    #[test]
    fn constant_generation_gets_zero_prosody_credit() {
        let v = vocab();
        let u = noiseless(Emotion::Happy, &[3, 14, 27, 8]);
        let constant = vec![u.speech[0]; u.speech.len()];
        let m = item_metrics(&v, &constant, &u);
        assert_eq!(m.prosody_corr, 0.0);
    }

    #[test]
    fn truncated_and_invalid_positions_count_as_errors() {
        let v = vocab();
        let u = noiseless(Emotion::Neutral, &[5, 6]);
        // Two valid positions (one wrong content), one text token, truncation.
        let wrong_content = v
            .speech_id((v.content_of(u.speech[1]).unwrap() + 1) % 8, 3)
            .unwrap();
        let generated = vec![u.speech[0], wrong_content, 7];
        let m = item_metrics(&v, &generated, &u);
        // Positions: 0 ok, 1 wrong content, 2 non-speech, 3 missing -> 3/4.
        assert!((m.cter - 0.75).abs() < 1e-12);
        assert!((m.invalid_rate - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_generation_is_incorrect_but_defined() {
        let v = vocab();
        let u = noiseless(Emotion::Sad, &[5, 6, 7]);
        let m = item_metrics(&v, &[], &u);
        assert!(!m.ser_correct);
        assert_eq!(m.cter, 1.0);
        assert_eq!(m.prosody_corr, 0.0);
        assert_eq!(m.invalid_rate, 0.0);
    }

    #[test]
    fn evaluate_rejects_empty_test_set() {
        let params = ModelParams::zeros(ModelConfig::default()).unwrap();
        assert!(evaluate(&params, &[], &SamplePolicy::Greedy, 0).is_err());
    }

    #[test]
    fn random_generation_sits_at_chance() {
        let v = vocab();
        let ser = random_generation_ser(&v, 1000, 99).unwrap();
        assert!((ser - 0.2).abs() < 0.05, "ser={ser}");
    }

    #[test]
    fn margin_report_is_zero_at_identity_and_antisymmetric() {
        let corpus = build_sft_corpus(&CorpusConfig {
            per_emotion: 5,
            seed: 31,
            ..CorpusConfig::default()
        })
        .unwrap();
        let pref = build_pref_corpus(&corpus).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            ff_mult: 2,
            max_len: 48,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(cfg, &mut Stream::derive(5, "init", 0)).unwrap();

        // Policy equals reference.
        let r = margin_report(&params, &params, &pref.pairs).unwrap();
        assert!(r.mean.abs() < 1e-9);
        assert!(r.median.abs() < 1e-9);
        assert_eq!(r.frac_positive, 0.0);

        // Swapping the chosen/rejected roles of each scored pair negates
        // every margin, and hence the mean, exactly.
        let other = ModelParams::init(cfg, &mut Stream::derive(6, "init", 0)).unwrap();
        let margins = pair_margins(&other, &params, &pref.pairs).unwrap();
        let vocab = other.vocabulary();
        let refs: Vec<&PreferencePair> = pref.pairs.iter().collect();
        let batch = PairBatch::from_pairs(&vocab, &refs, &params).unwrap();
        let pol_c = sequence_logprob(&other, &batch.chosen).unwrap();
        let pol_r = sequence_logprob(&other, &batch.rejected).unwrap();
        for (i, &m) in margins.iter().enumerate() {
            let swapped = PairLogprobs {
                chosen_policy: pol_r[i].value,
                chosen_ref: batch.ref_rejected[i],
                rejected_policy: pol_c[i].value,
                rejected_ref: batch.ref_chosen[i],
            };
            let neg = js_dpo_logits(&swapped).unwrap().corrected;
            assert!((m + neg).abs() < 1e-9, "pair {i}: {m} vs {neg}");
        }
        assert!(margin_report(&other, &params, &[]).is_err());
    }

    #[test]
    fn diverging_rows_are_marked_failed_and_grid_continues() {
        let corpus = build_sft_corpus(&CorpusConfig {
            per_emotion: 4,
            seed: 51,
            ..CorpusConfig::default()
        })
        .unwrap();
        let model = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            ff_mult: 2,
            max_len: 48,
            ..ModelConfig::default()
        };
        // A learning rate beyond f32 range blows up every training row.
        let cfg = crate::training::TrainConfig {
            seed: 51,
            sft_epochs: 1,
            dpo_epochs: 1,
            sft_lr: 1e39,
            dpo_lr: 1e39,
            ..crate::training::TrainConfig::default()
        };
        let grid = run_ablation(&corpus, &model, &cfg, 0.25).unwrap();
        assert_eq!(grid.rows.len(), 6);
        assert!(grid.rows.iter().all(|r| r.diverged));
        assert!(grid.to_table().contains("FAILED"));
    }

    #[test]
    fn evaluate_is_deterministic_under_greedy() {
        let corpus = build_sft_corpus(&CorpusConfig {
            per_emotion: 3,
            seed: 41,
            ..CorpusConfig::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            ff_mult: 2,
            max_len: 48,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(cfg, &mut Stream::derive(7, "init", 0)).unwrap();
        let a = evaluate(&params, &corpus.utterances, &SamplePolicy::Greedy, 0).unwrap();
        let b = evaluate(&params, &corpus.utterances, &SamplePolicy::Greedy, 123).unwrap();
        assert_eq!(a, b);
    }
}
