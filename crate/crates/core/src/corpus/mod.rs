//! Synthetic emotion-labeled token corpus.
//!
//! Utterances are generated from a fixed rule so that evaluation can invert
//! it. Every speech token factorizes into a content channel (derived from the
//! text) and a prosody channel (an emotion-specific contour plus rare ±1
//! noise). The oracle classifier recovers the emotion from the prosody channel
//! alone; the content channel is noise-free so intelligibility errors are
//! always model errors.

pub mod format;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::exec;
use crate::math::round_half_up;
use crate::rng::Stream;
use crate::Result;

/// The five emotion classes, with stable integer encoding 0..4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Emotion {
    Neutral = 0,
    Angry = 1,
    Happy = 2,
    Sad = 3,
    Surprise = 4,
}

pub const EMOTIONS: [Emotion; 5] = [
    Emotion::Neutral,
    Emotion::Angry,
    Emotion::Happy,
    Emotion::Sad,
    Emotion::Surprise,
];

impl Emotion {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Emotion> {
        EMOTIONS.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Neutral => "Neutral",
            Emotion::Angry => "Angry",
            Emotion::Happy => "Happy",
            Emotion::Sad => "Sad",
            Emotion::Surprise => "Surprise",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Emotion> {
        match s.to_ascii_lowercase().as_str() {
            "neutral" => Ok(Emotion::Neutral),
            "angry" => Ok(Emotion::Angry),
            "happy" => Ok(Emotion::Happy),
            "sad" => Ok(Emotion::Sad),
            "surprise" => Ok(Emotion::Surprise),
            _ => Err(Error::InputDomain(format!("unknown emotion '{s}'"))),
        }
    }
}

/// Sizes that fix the unified token id layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VocabConfig {
    pub text_size: u32,
    pub content_levels: u32,
    pub prosody_levels: u32,
    pub speaker_slots: u32,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            text_size: 32,
            content_levels: 8,
            prosody_levels: 8,
            speaker_slots: 10,
        }
    }
}

/// What a single token id means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text(u32),
    Speech { content: u32, prosody: u32 },
    EndOfPrompt,
    Eos,
    EmotionPrompt(Emotion),
    Speaker(u32),
    Pad,
}

/// Unified token space: text ids, factorized speech ids, then the specials
/// `<endofprompt>`, `</s>`, one emotion prompt per emotion, speaker tokens and
/// pad, in that order. All ranges are contiguous and disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    cfg: VocabConfig,
}

impl Vocabulary {
    pub fn new(cfg: VocabConfig) -> Result<Vocabulary> {
        if cfg.text_size == 0 || cfg.content_levels == 0 || cfg.prosody_levels == 0 {
            return Err(Error::Config(
                "vocabulary sizes must be positive".to_string(),
            ));
        }
        Ok(Vocabulary { cfg })
    }

    pub fn config(&self) -> VocabConfig {
        self.cfg
    }

    pub fn text_size(&self) -> u32 {
        self.cfg.text_size
    }

    pub fn speech_size(&self) -> u32 {
        self.cfg.content_levels * self.cfg.prosody_levels
    }

    pub fn speech_base(&self) -> u32 {
        self.cfg.text_size
    }

    pub fn end_of_prompt(&self) -> u32 {
        self.speech_base() + self.speech_size()
    }

    pub fn eos(&self) -> u32 {
        self.end_of_prompt() + 1
    }

    pub fn emotion_token(&self, e: Emotion) -> u32 {
        self.eos() + 1 + e.index() as u32
    }

    pub fn speaker_token(&self, speaker: u32) -> Result<u32> {
        if speaker >= self.cfg.speaker_slots {
            return Err(Error::InputDomain(format!(
                "speaker {speaker} out of range (slots={})",
                self.cfg.speaker_slots
            )));
        }
        Ok(self.eos() + 1 + EMOTIONS.len() as u32 + speaker)
    }

    pub fn pad(&self) -> u32 {
        self.eos() + 1 + EMOTIONS.len() as u32 + self.cfg.speaker_slots
    }

    pub fn size(&self) -> u32 {
        self.pad() + 1
    }

    pub fn is_text(&self, id: u32) -> bool {
        id < self.cfg.text_size
    }

    pub fn is_speech(&self, id: u32) -> bool {
        id >= self.speech_base() && id < self.speech_base() + self.speech_size()
    }

    /// Speech id for `(content, prosody)`.
    pub fn speech_id(&self, content: u32, prosody: u32) -> Result<u32> {
        if content >= self.cfg.content_levels || prosody >= self.cfg.prosody_levels {
            return Err(Error::InputDomain(format!(
                "speech channels out of range: content={content} prosody={prosody}"
            )));
        }
        Ok(self.speech_base() + content * self.cfg.prosody_levels + prosody)
    }

    /// Every id decodes to exactly one token kind.
    pub fn decode(&self, id: u32) -> Result<TokenKind> {
        if self.is_text(id) {
            return Ok(TokenKind::Text(id));
        }
        if self.is_speech(id) {
            let off = id - self.speech_base();
            return Ok(TokenKind::Speech {
                content: off / self.cfg.prosody_levels,
                prosody: off % self.cfg.prosody_levels,
            });
        }
        if id == self.end_of_prompt() {
            return Ok(TokenKind::EndOfPrompt);
        }
        if id == self.eos() {
            return Ok(TokenKind::Eos);
        }
        let em_base = self.eos() + 1;
        if id >= em_base && id < em_base + EMOTIONS.len() as u32 {
            return Ok(TokenKind::EmotionPrompt(
                Emotion::from_index((id - em_base) as usize).unwrap(),
            ));
        }
        let spk_base = em_base + EMOTIONS.len() as u32;
        if id >= spk_base && id < spk_base + self.cfg.speaker_slots {
            return Ok(TokenKind::Speaker(id - spk_base));
        }
        if id == self.pad() {
            return Ok(TokenKind::Pad);
        }
        Err(Error::InputDomain(format!(
            "token id {id} outside vocabulary of size {}",
            self.size()
        )))
    }

    /// Prosody level of a speech id.
    pub fn prosody_of(&self, id: u32) -> Result<u32> {
        match self.decode(id)? {
            TokenKind::Speech { prosody, .. } => Ok(prosody),
            _ => Err(Error::InputDomain(format!("token {id} is not speech"))),
        }
    }

    /// Content level of a speech id.
    pub fn content_of(&self, id: u32) -> Result<u32> {
        match self.decode(id)? {
            TokenKind::Speech { content, .. } => Ok(content),
            _ => Err(Error::InputDomain(format!("token {id} is not speech"))),
        }
    }
}

/// One instruction-formatted example: an emotion, optional speaker, a text
/// token sequence and its speech token sequence (twice the text length).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub emotion: Emotion,
    pub speaker: Option<u32>,
    pub text: Vec<u32>,
    pub speech: Vec<u32>,
}

/// A chosen/rejected pair over identical text with different emotions. The
/// conditioning emotion of the pair is `chosen.emotion`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub chosen: Utterance,
    pub rejected: Utterance,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.chosen.text != self.rejected.text {
            return Err(Error::InputDomain(
                "preference pair texts differ".to_string(),
            ));
        }
        if self.chosen.emotion == self.rejected.emotion {
            return Err(Error::InputDomain(
                "preference pair emotions match".to_string(),
            ));
        }
        Ok(())
    }

    /// The rejected side under the pair's conditioning emotion: same prompt
    /// as the chosen side (`chosen.emotion`), with the wrong-emotion speech
    /// tokens as the target.
    pub fn conditioned_rejected(&self) -> Utterance {
        Utterance {
            emotion: self.chosen.emotion,
            speaker: self.rejected.speaker,
            text: self.rejected.text.clone(),
            speech: self.rejected.speech.clone(),
        }
    }
}

/// Configuration for corpus synthesis.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusConfig {
    /// Distinct texts per emotion; the corpus holds `5 * per_emotion` utterances.
    pub per_emotion: usize,
    pub seed: u64,
    /// Per-position probability of a ±1 prosody perturbation.
    pub p_noise: f64,
    /// Number of distinct speakers to assign. 0 disables speaker conditioning.
    pub speakers: u32,
    pub text_len_min: usize,
    pub text_len_max: usize,
    pub vocab: VocabConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            per_emotion: 200,
            seed: 42,
            p_noise: 0.05,
            speakers: 0,
            text_len_min: 3,
            text_len_max: 8,
            vocab: VocabConfig::default(),
        }
    }
}

/// A generated corpus: the config that produced it plus the utterances in
/// text-major order (all five emotions of text 0, then text 1, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.config.vocab).expect("corpus carries a valid vocab config")
    }
}

/// Preference pairs built over a corpus, with the index of each side in the
/// source corpus and the number of chosen instances skipped for lack of a
/// same-text alternative.
#[derive(Debug, Clone)]
pub struct PrefCorpus {
    pub pairs: Vec<PreferencePair>,
    pub indices: Vec<(u32, u32)>,
    pub skipped: usize,
}

/// Deterministic prosody level for `emotion` at `position` of a contour of
/// `length` points.
///
/// Contours: Neutral holds 3; Happy rises 2 to 6; Sad falls 3 to 1 (both
/// interpolated with round-half-up); Angry alternates 6,4; Surprise holds 3
/// except for the middle third, which jumps to 7.
pub fn prosody_template(emotion: Emotion, position: usize, length: usize) -> Result<u32> {
    if length == 0 || position >= length {
        return Err(Error::InputDomain(format!(
            "position {position} out of range for length {length}"
        )));
    }
    let t = if length == 1 {
        0.0
    } else {
        position as f64 / (length - 1) as f64
    };
    let level = match emotion {
        Emotion::Neutral => 3.0,
        Emotion::Happy => round_half_up(2.0 + 4.0 * t),
        Emotion::Sad => round_half_up(3.0 - 2.0 * t),
        Emotion::Angry => {
            if position.is_multiple_of(2) {
                6.0
            } else {
                4.0
            }
        }
        Emotion::Surprise => {
            let lo = length / 3;
            let hi = (2 * length).div_ceil(3);
            if position >= lo && position < hi {
                7.0
            } else {
                3.0
            }
        }
    };
    Ok(level as u32)
}

fn template_level(vocab: &Vocabulary, emotion: Emotion, position: usize, length: usize) -> Result<u32> {
    let raw = prosody_template(emotion, position, length)?;
    Ok(raw.min(vocab.config().prosody_levels - 1))
}

/// Synthesize the speech tokens for `text` under `emotion`.
///
/// `speech[i] = speech_id(text[i/2] mod content_levels, level)` where `level`
/// follows the emotion's prosody contour, perturbed by ±1 (clamped to the
/// prosody range) with probability `p_noise` per position. Noise only ever
/// touches the prosody channel. The stream is expected to be keyed by
/// `(corpus seed, utterance index)` so each utterance is independently
/// reproducible.
pub fn synthesize_utterance(
    vocab: &Vocabulary,
    text: &[u32],
    emotion: Emotion,
    speaker: Option<u32>,
    p_noise: f64,
    stream: &mut Stream,
) -> Result<Utterance> {
    if text.is_empty() {
        return Err(Error::InputDomain("empty text".to_string()));
    }
    for &id in text {
        if !vocab.is_text(id) {
            return Err(Error::InputDomain(format!("{id} is not a text token")));
        }
    }
    if let Some(s) = speaker {
        vocab.speaker_token(s)?;
    }
    let levels = vocab.config().prosody_levels;
    let length = 2 * text.len();
    let mut speech = Vec::with_capacity(length);
    for i in 0..length {
        let content = text[i / 2] % vocab.config().content_levels;
        let mut level = template_level(vocab, emotion, i, length)?;
        if stream.next_f64() < p_noise {
            let up = stream.next_below(2) == 1;
            level = if up {
                (level + 1).min(levels - 1)
            } else {
                level.saturating_sub(1)
            };
        }
        speech.push(vocab.speech_id(content, level)?);
    }
    Ok(Utterance {
        emotion,
        speaker,
        text: text.to_vec(),
        speech,
    })
}

/// Build the supervised corpus: `per_emotion` distinct random texts, each
/// synthesized under all five emotions.
pub fn build_sft_corpus(config: &CorpusConfig) -> Result<Corpus> {
    if config.per_emotion == 0 {
        return Err(Error::InputDomain(
            "per_emotion must be at least 1".to_string(),
        ));
    }
    if config.text_len_min == 0 || config.text_len_min > config.text_len_max {
        return Err(Error::Config(format!(
            "invalid text length range [{}, {}]",
            config.text_len_min, config.text_len_max
        )));
    }
    if !(0.0..=1.0).contains(&config.p_noise) {
        return Err(Error::Config(format!(
            "p_noise {} outside [0, 1]",
            config.p_noise
        )));
    }
    let vocab = Vocabulary::new(config.vocab)?;
    if config.speakers > config.vocab.speaker_slots {
        return Err(Error::Config(format!(
            "{} speakers exceed {} vocabulary slots",
            config.speakers, config.vocab.speaker_slots
        )));
    }

    let mut text_stream = Stream::derive(config.seed, "corpus/texts", 0);
    let mut texts: Vec<Vec<u32>> = Vec::with_capacity(config.per_emotion);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let span = (config.text_len_max - config.text_len_min + 1) as u64;
    while texts.len() < config.per_emotion {
        let len = config.text_len_min + text_stream.next_below(span) as usize;
        let text: Vec<u32> = (0..len)
            .map(|_| text_stream.next_below(u64::from(vocab.text_size())) as u32)
            .collect();
        if seen.insert(text.clone()) {
            texts.push(text);
        }
    }

    let mut speaker_stream = Stream::derive(config.seed, "corpus/speakers", 0);
    let speakers: Vec<Option<u32>> = (0..config.per_emotion)
        .map(|_| {
            if config.speakers == 0 {
                None
            } else {
                Some(speaker_stream.next_below(u64::from(config.speakers)) as u32)
            }
        })
        .collect();

    let total = config.per_emotion * EMOTIONS.len();
    let cfg = *config;
    let utterances = exec::map_range(total, |idx| {
        let text_idx = idx / EMOTIONS.len();
        let emotion = EMOTIONS[idx % EMOTIONS.len()];
        let mut stream = Stream::derive(cfg.seed, "corpus/utterance", idx as u64);
        synthesize_utterance(
            &vocab,
            &texts[text_idx],
            emotion,
            speakers[text_idx],
            cfg.p_noise,
            &mut stream,
        )
    });
    let utterances = utterances.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: *config,
        utterances,
    })
}

/// Build preference pairs: every utterance becomes the chosen side of one
/// pair, with the rejected side drawn uniformly (seeded per chosen index)
/// from same-text utterances of a different emotion. Chosen instances with no
/// alternative are skipped and counted.
pub fn build_pref_corpus(corpus: &Corpus) -> Result<PrefCorpus> {
    let mut by_text: HashMap<&[u32], Vec<usize>> = HashMap::new();
    for (i, u) in corpus.utterances.iter().enumerate() {
        by_text.entry(u.text.as_slice()).or_default().push(i);
    }

    let mut pairs = Vec::new();
    let mut indices = Vec::new();
    let mut skipped = 0usize;
    for (ci, chosen) in corpus.utterances.iter().enumerate() {
        let candidates: Vec<usize> = by_text[chosen.text.as_slice()]
            .iter()
            .copied()
            .filter(|&j| corpus.utterances[j].emotion != chosen.emotion)
            .collect();
        if candidates.is_empty() {
            skipped += 1;
            continue;
        }
        let mut stream = Stream::derive(corpus.config.seed, "pairs", ci as u64);
        let rj = candidates[stream.choose_index(candidates.len())];
        let pair = PreferencePair {
            chosen: chosen.clone(),
            rejected: corpus.utterances[rj].clone(),
        };
        pair.validate()?;
        pairs.push(pair);
        indices.push((ci as u32, rj as u32));
    }
    Ok(PrefCorpus {
        pairs,
        indices,
        skipped,
    })
}

/// Classify the emotion of a speech token sequence by matching its prosody
/// channel against each emotion's template contour (sum of squared
/// deviations, ties broken by the lowest emotion encoding).
pub fn oracle_classify(vocab: &Vocabulary, speech: &[u32]) -> Result<Emotion> {
    if speech.is_empty() {
        return Err(Error::InputDomain("empty speech sequence".to_string()));
    }
    let levels: Vec<u32> = speech
        .iter()
        .map(|&id| vocab.prosody_of(id))
        .collect::<Result<_>>()?;
    let length = levels.len();
    let mut best = Emotion::Neutral;
    let mut best_ssd = u64::MAX;
    for &emotion in &EMOTIONS {
        let mut ssd = 0u64;
        for (i, &level) in levels.iter().enumerate() {
            let t = template_level(vocab, emotion, i, length)?;
            let d = i64::from(level) - i64::from(t);
            ssd += (d * d) as u64;
        }
        if ssd < best_ssd {
            best_ssd = ssd;
            best = emotion;
        }
    }
    Ok(best)
}

/// Instruction encoding of an utterance plus its loss mask.
///
/// Layout: `[speaker] E <endofprompt> text... </s>` and, when `include_target`
/// is set, `speech... </s>`. The mask marks exactly the speech positions and
/// the terminal `</s>`; every prompt position (including the `</s>` closing
/// the text) is conditioning only.
pub fn encode_instruction(
    vocab: &Vocabulary,
    u: &Utterance,
    include_target: bool,
) -> Result<(Vec<u32>, Vec<bool>)> {
    let mut tokens = Vec::with_capacity(u.text.len() + u.speech.len() + 4);
    if let Some(s) = u.speaker {
        tokens.push(vocab.speaker_token(s)?);
    }
    tokens.push(vocab.emotion_token(u.emotion));
    tokens.push(vocab.end_of_prompt());
    tokens.extend_from_slice(&u.text);
    tokens.push(vocab.eos());
    let mut mask = vec![false; tokens.len()];
    if include_target {
        tokens.extend_from_slice(&u.speech);
        tokens.push(vocab.eos());
        mask.extend(std::iter::repeat_n(true, u.speech.len() + 1));
    }
    Ok((tokens, mask))
}

/// Invert [`encode_instruction`]: recover `(speaker, emotion, text, speech)`.
/// The speech part is empty for a prompt-only sequence.
pub fn decode_instruction(vocab: &Vocabulary, tokens: &[u32]) -> Result<Utterance> {
    let bad = |msg: &str| Error::InputDomain(format!("malformed instruction sequence: {msg}"));
    let mut pos = 0usize;
    let mut speaker = None;
    if let Some(&first) = tokens.first() {
        if let TokenKind::Speaker(s) = vocab.decode(first)? {
            speaker = Some(s);
            pos = 1;
        }
    }
    let emotion = match tokens.get(pos).map(|&t| vocab.decode(t)) {
        Some(Ok(TokenKind::EmotionPrompt(e))) => e,
        _ => return Err(bad("expected emotion prompt")),
    };
    pos += 1;
    if tokens.get(pos) != Some(&vocab.end_of_prompt()) {
        return Err(bad("expected <endofprompt>"));
    }
    pos += 1;
    let mut text = Vec::new();
    while let Some(&t) = tokens.get(pos) {
        if vocab.is_text(t) {
            text.push(t);
            pos += 1;
        } else {
            break;
        }
    }
    if text.is_empty() {
        return Err(bad("empty text segment"));
    }
    if tokens.get(pos) != Some(&vocab.eos()) {
        return Err(bad("expected </s> after text"));
    }
    pos += 1;
    let mut speech = Vec::new();
    if pos < tokens.len() {
        while let Some(&t) = tokens.get(pos) {
            if vocab.is_speech(t) {
                speech.push(t);
                pos += 1;
            } else {
                break;
            }
        }
        if tokens.get(pos) != Some(&vocab.eos()) {
            return Err(bad("expected terminal </s> after speech"));
        }
        pos += 1;
        if pos != tokens.len() {
            return Err(bad("trailing tokens"));
        }
    }
    Ok(Utterance {
        emotion,
        speaker,
        text,
        speech,
    })
}

/// Split a corpus by text: `holdout_frac` of the distinct texts (at least
/// one), with all their emotions, go to the held-out side. Seeded and
/// deterministic.
pub fn split_holdout(corpus: &Corpus, holdout_frac: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(0.0..1.0).contains(&holdout_frac) {
        return Err(Error::Config(format!(
            "holdout fraction {holdout_frac} outside [0, 1)"
        )));
    }
    let mut order: Vec<&[u32]> = Vec::new();
    let mut seen: HashSet<&[u32]> = HashSet::new();
    for u in &corpus.utterances {
        if seen.insert(u.text.as_slice()) {
            order.push(u.text.as_slice());
        }
    }
    let n_hold = ((order.len() as f64 * holdout_frac).round() as usize)
        .max(1)
        .min(order.len().saturating_sub(1));
    let mut idx: Vec<usize> = (0..order.len()).collect();
    Stream::derive(seed, "split", 0).shuffle(&mut idx);
    let held: HashSet<&[u32]> = idx[..n_hold].iter().map(|&i| order[i]).collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in &corpus.utterances {
        if held.contains(u.text.as_slice()) {
            test.push(u.clone());
        } else {
            train.push(u.clone());
        }
    }
    Ok((
        Corpus {
            config: corpus.config,
            utterances: train,
        },
        Corpus {
            config: corpus.config,
            utterances: test,
        },
    ))
}
