//! Corpus and preference-pair files.
//!
//! Both are line-delimited text with a header carrying the format version and
//! a config echo. Corpus records hold `emotion speaker` (speaker is -1 when
//! absent), then the text ids, then the speech ids, all as decimal integers
//! separated by single spaces with a tab between channels. Only `\n` line
//! endings are written so files are byte-identical across platforms.

use std::fmt::Write as _;
use std::path::Path;

use super::{Corpus, CorpusConfig, Emotion, PrefCorpus, Utterance, VocabConfig, Vocabulary};
use crate::error::Error;
use crate::fsutil::atomic_write;
use crate::Result;

pub const CORPUS_VERSION: u32 = 1;
pub const PAIRS_VERSION: u32 = 1;

fn fmt_ids(ids: &[u32]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{id}");
    }
    s
}

/// Render a corpus to its file bytes.
pub fn corpus_to_string(corpus: &Corpus) -> String {
    let c = &corpus.config;
    let v = &c.vocab;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "#corpus v{CORPUS_VERSION} seed={} per_emotion={} p_noise={} speakers={} \
         text_size={} content_levels={} prosody_levels={} speaker_slots={} \
         text_len_min={} text_len_max={}",
        c.seed,
        c.per_emotion,
        c.p_noise,
        c.speakers,
        v.text_size,
        v.content_levels,
        v.prosody_levels,
        v.speaker_slots,
        c.text_len_min,
        c.text_len_max,
    );
    for u in &corpus.utterances {
        let speaker = u.speaker.map_or(-1i64, i64::from);
        let _ = writeln!(
            out,
            "{} {}\t{}\t{}",
            u.emotion.index(),
            speaker,
            fmt_ids(&u.text),
            fmt_ids(&u.speech),
        );
    }
    out
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    atomic_write(path, corpus_to_string(corpus).as_bytes())
}

fn parse_kv(header: &str, key: &str, context: &Path) -> Result<String> {
    header
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(&format!("{key}=")))
        .map(str::to_string)
        .ok_or_else(|| Error::format(context.display().to_string(), format!("missing {key}=")))
}

fn parse_num<T: std::str::FromStr>(header: &str, key: &str, context: &Path) -> Result<T> {
    parse_kv(header, key, context)?.parse().map_err(|_| {
        Error::format(
            context.display().to_string(),
            format!("invalid value for {key}"),
        )
    })
}

fn parse_ids(field: &str, context: &Path, line_no: usize) -> Result<Vec<u32>> {
    field
        .split(' ')
        .map(|tok| {
            tok.parse::<u32>().map_err(|_| {
                Error::format(
                    context.display().to_string(),
                    format!("line {line_no}: bad token id '{tok}'"),
                )
            })
        })
        .collect()
}

/// Parse corpus file bytes.
pub fn corpus_from_str(text: &str, context: &Path) -> Result<Corpus> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(context.display().to_string(), "empty file"))?;
    if !header.starts_with(&format!("#corpus v{CORPUS_VERSION} ")) {
        return Err(Error::format(
            context.display().to_string(),
            format!("unsupported header '{header}'"),
        ));
    }
    let vocab_cfg = VocabConfig {
        text_size: parse_num(header, "text_size", context)?,
        content_levels: parse_num(header, "content_levels", context)?,
        prosody_levels: parse_num(header, "prosody_levels", context)?,
        speaker_slots: parse_num(header, "speaker_slots", context)?,
    };
    let config = CorpusConfig {
        per_emotion: parse_num(header, "per_emotion", context)?,
        seed: parse_num(header, "seed", context)?,
        p_noise: parse_num(header, "p_noise", context)?,
        speakers: parse_num(header, "speakers", context)?,
        text_len_min: parse_num(header, "text_len_min", context)?,
        text_len_max: parse_num(header, "text_len_max", context)?,
        vocab: vocab_cfg,
    };
    let vocab = Vocabulary::new(vocab_cfg)?;

    let mut utterances = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.is_empty() {
            continue;
        }
        let mut channels = line.split('\t');
        let (head, text_field, speech_field) =
            match (channels.next(), channels.next(), channels.next()) {
                (Some(a), Some(b), Some(c)) if channels.next().is_none() => (a, b, c),
                _ => {
                    return Err(Error::format(
                        context.display().to_string(),
                        format!("line {line_no}: expected 3 tab-separated channels"),
                    ))
                }
            };
        let mut head_parts = head.split(' ');
        let emotion_idx: usize = head_parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| {
                Error::format(
                    context.display().to_string(),
                    format!("line {line_no}: bad emotion field"),
                )
            })?;
        let emotion = Emotion::from_index(emotion_idx).ok_or_else(|| {
            Error::format(
                context.display().to_string(),
                format!("line {line_no}: emotion index {emotion_idx} out of range"),
            )
        })?;
        let speaker_raw: i64 = head_parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| {
                Error::format(
                    context.display().to_string(),
                    format!("line {line_no}: bad speaker field"),
                )
            })?;
        let speaker = if speaker_raw < 0 {
            None
        } else {
            Some(speaker_raw as u32)
        };
        let text = parse_ids(text_field, context, line_no)?;
        let speech = parse_ids(speech_field, context, line_no)?;
        for &t in &text {
            if !vocab.is_text(t) {
                return Err(Error::format(
                    context.display().to_string(),
                    format!("line {line_no}: {t} is not a text token"),
                ));
            }
        }
        for &s in &speech {
            if !vocab.is_speech(s) {
                return Err(Error::format(
                    context.display().to_string(),
                    format!("line {line_no}: {s} is not a speech token"),
                ));
            }
        }
        utterances.push(Utterance {
            emotion,
            speaker,
            text,
            speech,
        });
    }
    Ok(Corpus { config, utterances })
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    corpus_from_str(&text, path)
}

/// Render the preference-pair index (row indices into the corpus file).
pub fn pairs_to_string(pref: &PrefCorpus, seed: u64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "#pairs v{PAIRS_VERSION} seed={seed} count={} skipped={}",
        pref.indices.len(),
        pref.skipped
    );
    for (c, r) in &pref.indices {
        let _ = writeln!(out, "{c} {r}");
    }
    out
}

pub fn write_pairs(pref: &PrefCorpus, seed: u64, path: &Path) -> Result<()> {
    atomic_write(path, pairs_to_string(pref, seed).as_bytes())
}

/// Read a pair index and resolve it against its corpus.
pub fn read_pairs(path: &Path, corpus: &Corpus) -> Result<PrefCorpus> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path.display().to_string(), "empty file"))?;
    if !header.starts_with(&format!("#pairs v{PAIRS_VERSION} ")) {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported header '{header}'"),
        ));
    }
    let skipped: usize = parse_num(header, "skipped", path)?;
    let mut indices = Vec::new();
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let parse = |tok: Option<&str>| -> Result<u32> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| {
                Error::format(
                    path.display().to_string(),
                    format!("line {}: bad pair indices", i + 2),
                )
            })
        };
        let c = parse(parts.next())?;
        let r = parse(parts.next())?;
        let get = |idx: u32| -> Result<&Utterance> {
            corpus.utterances.get(idx as usize).ok_or_else(|| {
                Error::format(
                    path.display().to_string(),
                    format!("pair index {idx} outside corpus of {}", corpus.utterances.len()),
                )
            })
        };
        let pair = super::PreferencePair {
            chosen: get(c)?.clone(),
            rejected: get(r)?.clone(),
        };
        pair.validate()?;
        indices.push((c, r));
        pairs.push(pair);
    }
    Ok(PrefCorpus {
        pairs,
        indices,
        skipped,
    })
}
