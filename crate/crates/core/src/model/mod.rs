//! A small trainable causal decoder over the unified vocabulary.
//!
//! Parameters live in one flat `f32` buffer with a fixed layout derived from
//! the configuration; checkpoints, the optimizer and gradient checking all
//! address parameters through that layout. Arithmetic runs in `f64`
//! everywhere, so the stored `f32` values are exact and checkpoints round-trip
//! bit-for-bit.

pub mod grad;
pub mod net;

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{VocabConfig, Vocabulary};
use crate::error::Error;
use crate::fsutil::atomic_write;
use crate::rng::Stream;
use crate::Result;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";

pub(crate) const LN_EPS: f64 = 1e-5;

// Init scales. The positional amplitude and weight std are balanced so the
// token identity is not drowned by the sinusoidal position code early on.
const INIT_WEIGHT_STD: f64 = 0.08;
const INIT_POS_AMPLITUDE: f64 = 1.5;

/// Architecture hyperparameters. The vocabulary config pins the token space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab: VocabConfig,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_mult: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: VocabConfig::default(),
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            ff_mult: 4,
            max_len: 64,
        }
    }
}

/// One named parameter array inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArraySpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ArraySpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockOffsets>,
    pub out_w: usize,
    pub out_b: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ff_mult == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head dimension {} must be even for the rotary map",
                self.d_model / self.n_heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Vocabulary::new(self.vocab)?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        Vocabulary::new(self.vocab)
            .expect("validated vocab config")
            .size() as usize
    }

    /// Named arrays in manifest (and binary) order.
    pub fn layout(&self) -> Vec<ArraySpec> {
        let d = self.d_model;
        let v = self.vocab_size();
        let f = self.ff_mult * d;
        let mut arrays = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize| {
            arrays.push(ArraySpec {
                name,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        };
        push("tok_emb".into(), v, d);
        push("pos_emb".into(), self.max_len, d);
        for l in 0..self.n_layers {
            push(format!("block{l}.ln1_g"), d, 1);
            push(format!("block{l}.ln1_b"), d, 1);
            push(format!("block{l}.wq"), d, d);
            push(format!("block{l}.wk"), d, d);
            push(format!("block{l}.wv"), d, d);
            push(format!("block{l}.wo"), d, d);
            push(format!("block{l}.ln2_g"), d, 1);
            push(format!("block{l}.ln2_b"), d, 1);
            push(format!("block{l}.w1"), d, f);
            push(format!("block{l}.b1"), f, 1);
            push(format!("block{l}.w2"), f, d);
            push(format!("block{l}.b2"), d, 1);
        }
        push("out_w".into(), d, v);
        push("out_b".into(), v, 1);
        arrays
    }

    /// Exact trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(ArraySpec::len).sum()
    }

    pub(crate) fn offsets(&self) -> Offsets {
        let arrays = self.layout();
        let mut iter = arrays.iter();
        let mut next = || iter.next().expect("layout array").offset;
        let tok_emb = next();
        let pos_emb = next();
        let blocks = (0..self.n_layers)
            .map(|_| BlockOffsets {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln2_g: next(),
                ln2_b: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let out_w = next();
        let out_b = next();
        Offsets {
            tok_emb,
            pos_emb,
            blocks,
            out_w,
            out_b,
        }
    }
}

/// All trainable arrays of the decoder, stored flat as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    data: Vec<f32>,
}

impl ModelParams {
    /// Gaussian weights with zero-initialized residual-output projections
    /// (attention output and second feed-forward matrix), unit norm scales,
    /// zero offsets and biases, and a sinusoidal start for the positional
    /// table. Zeroing the residual writers makes each block start as the
    /// identity, which stabilizes the first optimization steps.
    pub fn init(config: ModelConfig, stream: &mut Stream) -> Result<ModelParams> {
        config.validate()?;
        let layout = config.layout();
        let total: usize = layout.iter().map(ArraySpec::len).sum();
        let mut data = vec![0.0f32; total];
        for spec in &layout {
            let slice = &mut data[spec.offset..spec.offset + spec.len()];
            if spec.name.ends_with("ln1_g") || spec.name.ends_with("ln2_g") {
                slice.fill(1.0);
            } else if spec.name.ends_with("_b")
                || spec.name.ends_with(".b1")
                || spec.name.ends_with(".b2")
                || spec.name == "out_b"
                || spec.name.ends_with(".wo")
                || spec.name.ends_with(".w2")
            {
                // offsets, biases and residual writers stay zero
            } else if spec.name == "pos_emb" {
                // Sinusoidal start for the (trainable) positional table, on
                // the same octave ladder as the rotary map: the parity and
                // half-position structure the token layout needs is available
                // from step one instead of having to emerge from noise.
                let d = config.d_model;
                for p in 0..spec.rows {
                    for i in 0..d {
                        let freq = crate::model::net::rope_freq((i / 2) % (d / 2), d / 2 / 4);
                        let angle = p as f64 * freq;
                        let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                        slice[p * d + i] = (INIT_POS_AMPLITUDE * v) as f32;
                    }
                }
            } else {
                for w in slice.iter_mut() {
                    *w = (INIT_WEIGHT_STD * stream.next_gaussian()) as f32;
                }
            }
        }
        Ok(ModelParams { config, data })
    }

    /// All-zero parameters (uniform next-token distribution everywhere).
    pub fn zeros(config: ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let total = config.param_count();
        Ok(ModelParams {
            config,
            data: vec![0.0f32; total],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.config.vocab).expect("validated vocab config")
    }

    /// Every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The flat buffer widened to `f64` for arithmetic.
    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// FNV-1a hash of the parameter bytes; used for freeze checks.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Render the checkpoint manifest.
    pub fn manifest(&self) -> String {
        let c = &self.config;
        let v = &c.vocab;
        let mut out = String::new();
        let _ = writeln!(out, "format_version = {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "text_size = {}", v.text_size);
        let _ = writeln!(out, "content_levels = {}", v.content_levels);
        let _ = writeln!(out, "prosody_levels = {}", v.prosody_levels);
        let _ = writeln!(out, "speaker_slots = {}", v.speaker_slots);
        let _ = writeln!(out, "vocab_size = {}", c.vocab_size());
        let _ = writeln!(out, "d_model = {}", c.d_model);
        let _ = writeln!(out, "n_heads = {}", c.n_heads);
        let _ = writeln!(out, "n_layers = {}", c.n_layers);
        let _ = writeln!(out, "ff_mult = {}", c.ff_mult);
        let _ = writeln!(out, "max_len = {}", c.max_len);
        let _ = writeln!(out, "param_count = {}", c.param_count());
        for spec in c.layout() {
            let _ = writeln!(out, "array = {} {} {}", spec.name, spec.rows, spec.cols);
        }
        out
    }

    /// Write `manifest.txt` and `params.bin` (little-endian f32) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        atomic_write(&dir.join(MANIFEST_FILE), self.manifest().as_bytes())?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        atomic_write(&dir.join(PARAMS_FILE), &bytes)
    }

    /// Load a checkpoint saved by [`ModelParams::save`].
    pub fn load(dir: &Path) -> Result<ModelParams> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path)?;
        let config = parse_manifest(&text, &manifest_path)?;
        let bin_path = dir.join(PARAMS_FILE);
        let bytes = std::fs::read(&bin_path)?;
        let expected = config.param_count() * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                bin_path.display().to_string(),
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(ModelParams { config, data })
    }
}

fn manifest_value<'a>(text: &'a str, key: &str, path: &Path) -> Result<&'a str> {
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

fn manifest_num<T: std::str::FromStr>(text: &str, key: &str, path: &Path) -> Result<T> {
    manifest_value(text, key, path)?.parse().map_err(|_| {
        Error::format(
            path.display().to_string(),
            format!("invalid value for '{key}'"),
        )
    })
}

fn parse_manifest(text: &str, path: &Path) -> Result<ModelConfig> {
    let version: u32 = manifest_num(text, "format_version", path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported format_version {version}"),
        ));
    }
    let config = ModelConfig {
        vocab: VocabConfig {
            text_size: manifest_num(text, "text_size", path)?,
            content_levels: manifest_num(text, "content_levels", path)?,
            prosody_levels: manifest_num(text, "prosody_levels", path)?,
            speaker_slots: manifest_num(text, "speaker_slots", path)?,
        },
        d_model: manifest_num(text, "d_model", path)?,
        n_heads: manifest_num(text, "n_heads", path)?,
        n_layers: manifest_num(text, "n_layers", path)?,
        ff_mult: manifest_num(text, "ff_mult", path)?,
        max_len: manifest_num(text, "max_len", path)?,
    };
    config.validate()?;
    let declared_vocab: usize = manifest_num(text, "vocab_size", path)?;
    if declared_vocab != config.vocab_size() {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "vocab_size {declared_vocab} inconsistent with layout ({})",
                config.vocab_size()
            ),
        ));
    }
    let declared_count: usize = manifest_num(text, "param_count", path)?;
    if declared_count != config.param_count() {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "param_count {declared_count} inconsistent with layout ({})",
                config.param_count()
            ),
        ));
    }
    // The array list must match the layout exactly.
    let declared: Vec<&str> = text
        .lines()
        .filter_map(|l| l.strip_prefix("array ="))
        .map(str::trim)
        .collect();
    let layout = config.layout();
    if declared.len() != layout.len() {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "manifest lists {} arrays, layout has {}",
                declared.len(),
                layout.len()
            ),
        ));
    }
    for (line, spec) in declared.iter().zip(&layout) {
        let expect = format!("{} {} {}", spec.name, spec.rows, spec.cols);
        if *line != expect {
            return Err(Error::format(
                path.display().to_string(),
                format!("array entry '{line}' does not match layout '{expect}'"),
            ));
        }
    }
    Ok(config)
}

/// Error unless two checkpoints agree on the vocabulary layout.
pub fn ensure_vocab_compatible(
    a: &VocabConfig,
    a_name: &str,
    b: &VocabConfig,
    b_name: &str,
) -> Result<()> {
    if a != b {
        return Err(Error::VocabMismatch {
            left: a_name.to_string(),
            right: b_name.to_string(),
            detail: format!("{a:?} vs {b:?}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_is_exact() {
        let cfg = ModelConfig::default();
        // tok 114*64 + pos 64*64 + 2 blocks + out
        let per_block = 64 + 64 + 4 * 64 * 64 + 64 + 64 + 64 * 256 + 256 + 256 * 64 + 64;
        let expected = 114 * 64 + 64 * 64 + 2 * per_block + 64 * 114 + 114;
        assert_eq!(cfg.param_count(), expected);
        let p = ModelParams::zeros(cfg).unwrap();
        assert_eq!(p.len(), expected);
    }

    #[test]
    fn layout_is_contiguous_and_ordered() {
        let cfg = ModelConfig::default();
        let layout = cfg.layout();
        let mut expected_offset = 0usize;
        for spec in &layout {
            assert_eq!(spec.offset, expected_offset, "array {}", spec.name);
            expected_offset += spec.len();
        }
        assert_eq!(expected_offset, cfg.param_count());
    }

    #[test]
    fn init_is_seeded_and_finite() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(cfg, &mut Stream::derive(3, "init", 0)).unwrap();
        let b = ModelParams::init(cfg, &mut Stream::derive(3, "init", 0)).unwrap();
        let c = ModelParams::init(cfg, &mut Stream::derive(4, "init", 0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        // Norm scales start at one.
        let off = cfg.offsets();
        assert_eq!(a.data()[off.blocks[0].ln1_g], 1.0);
        assert_eq!(a.data()[off.blocks[1].ln2_g], 1.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(cfg, &mut Stream::derive(11, "init", 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(loaded.content_hash(), params.content_hash());

        // Saving again produces identical bytes.
        let bin_a = std::fs::read(path.join(PARAMS_FILE)).unwrap();
        loaded.save(&path).unwrap();
        let bin_b = std::fs::read(path.join(PARAMS_FILE)).unwrap();
        assert_eq!(bin_a, bin_b);
    }

    #[test]
    fn corrupted_manifest_names_the_field() {
        let cfg = ModelConfig::default();
        let params = ModelParams::zeros(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        params.save(&path).unwrap();

        let manifest_path = path.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        let broken = text.replace("d_model = 64", "d_model = potato");
        std::fs::write(&manifest_path, broken).unwrap();
        let err = ModelParams::load(&path).unwrap_err();
        assert!(err.to_string().contains("d_model"), "{err}");
    }

    #[test]
    fn truncated_params_file_is_detected() {
        let cfg = ModelConfig::default();
        let params = ModelParams::zeros(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        params.save(&path).unwrap();
        let bin_path = path.join(PARAMS_FILE);
        let bytes = std::fs::read(&bin_path).unwrap();
        std::fs::write(&bin_path, &bytes[..bytes.len() - 4]).unwrap();
        let err = ModelParams::load(&path).unwrap_err();
        assert!(err.to_string().contains("bytes"), "{err}");
    }

    #[test]
    fn vocab_mismatch_is_reported() {
        let a = VocabConfig::default();
        let b = VocabConfig {
            text_size: 16,
            ..a
        };
        let err = ensure_vocab_compatible(&a, "left.manifest", &b, "right.manifest").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("left.manifest") && msg.contains("right.manifest"));
        assert!(ensure_vocab_compatible(&a, "x", &a, "y").is_ok());
    }
}
