//! Command-line entry point for corpus generation, the two training stages,
//! evaluation, the ablation grid, gradient checking and inference.
//!
//! Every command is deterministic given its resolved configuration, which is
//! written next to the command's outputs. Exit codes: 0 on success, 2 for
//! configuration or input-domain errors, 3 for I/O and file-format errors,
//! 4 for numerical failures.

mod config_file;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use emotok::corpus::{
    build_pref_corpus, build_sft_corpus, encode_instruction, format as corpus_format,
    oracle_classify, split_holdout, Corpus, Emotion, Utterance,
};
use emotok::error::Error;
use emotok::eval::{evaluate, margin_report, run_ablation};
use emotok::fsutil::atomic_write;
use emotok::gradcheck;
use emotok::model::net::{sample, SamplePolicy};
use emotok::model::{ensure_vocab_compatible, ModelParams};
use emotok::rng::Stream;
use emotok::training::{run_dpo, run_sft, StepRecord, TrainLogger, TrainRunOutcome};
use emotok::Result;

use config_file::PipelineConfig;

#[derive(Parser)]
#[command(name = "emotok", version, about = "Emotion-controllable speech-token modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Sectioned key = value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every named substream.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_file(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        cfg.sync();
        Ok(cfg)
    }
}

#[derive(Args)]
struct PolicyArgs {
    /// Sample from the k most likely tokens instead of greedy decoding.
    #[arg(long)]
    top_k: Option<usize>,
    /// Softmax temperature for top-k sampling.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

impl PolicyArgs {
    fn policy(&self) -> SamplePolicy {
        match self.top_k {
            Some(k) => SamplePolicy::TopK {
                k,
                temperature: self.temperature,
            },
            None => SamplePolicy::Greedy,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the emotion-labeled corpus and its preference-pair index.
    GenCorpus {
        /// Corpus file to write; the pair index goes to `<out>.pairs`.
        #[arg(long)]
        out: PathBuf,
        /// Distinct texts per emotion (the corpus holds five times as many
        /// utterances).
        #[arg(long)]
        per_emotion: Option<usize>,
        /// Probability of a ±1 prosody perturbation per position.
        #[arg(long)]
        noise: Option<f64>,
        /// Number of distinct speakers to assign (0 disables conditioning).
        #[arg(long)]
        speakers: Option<u32>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Stage 1: instruction tuning on the training split of a corpus.
    TrainSft {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Stage 2: preference optimization from a stage-1 checkpoint.
    TrainDpo {
        #[arg(long)]
        corpus: PathBuf,
        /// Stage-1 checkpoint directory (becomes the frozen reference).
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference checkpoint; adds corrected-logit margin statistics over
        /// held-out pairs.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Report file (JSON). Defaults to `<checkpoint>/eval_report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train and evaluate the six-row ablation grid.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for the table, CSV and per-row logs.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Validate analytic gradients against central finite differences.
    GradCheck {
        /// Coordinates checked per loss.
        #[arg(long, default_value_t = 64)]
        coords: usize,
        /// Relative-error tolerance.
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Generate speech tokens for a text under a desired emotion.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Desired emotion (Neutral, Angry, Happy, Sad, Surprise).
        #[arg(long)]
        emotion: String,
        /// Space-separated text token ids; omitted means a seeded random
        /// sentence.
        #[arg(long)]
        text: Option<String>,
        /// Speaker id for the speaker-conditioning token.
        #[arg(long)]
        speaker: Option<u32>,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        common: ConfigArgs,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InputDomain(_) | Error::Config(_) | Error::VocabMismatch { .. } => 2,
        Error::Io(_) | Error::Format { .. } => 3,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::ReferenceMutated => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus {
            out,
            per_emotion,
            noise,
            speakers,
            common,
        } => cmd_gen_corpus(&out, per_emotion, noise, speakers, &common),
        Command::TrainSft { corpus, out, common } => cmd_train_sft(&corpus, &out, &common),
        Command::TrainDpo {
            corpus,
            init,
            out,
            common,
        } => cmd_train_dpo(&corpus, &init, &out, &common),
        Command::Eval {
            corpus,
            checkpoint,
            reference,
            out,
            policy,
            common,
        } => cmd_eval(&corpus, &checkpoint, reference.as_deref(), out, &policy, &common),
        Command::Ablate { corpus, out, common } => cmd_ablate(&corpus, &out, &common),
        Command::GradCheck {
            coords,
            tolerance,
            common,
        } => cmd_grad_check(coords, tolerance, &common),
        Command::Infer {
            checkpoint,
            emotion,
            text,
            speaker,
            policy,
            common,
        } => cmd_infer(&checkpoint, &emotion, text.as_deref(), speaker, &policy, &common),
    }
}

fn write_resolved_config(cfg: &PipelineConfig, path: &Path) -> Result<()> {
    atomic_write(path, cfg.to_file_string().as_bytes())
}

fn load_corpus_with_config(path: &Path, cfg: &mut PipelineConfig) -> Result<Corpus> {
    let corpus = corpus_format::read_corpus(path)?;
    // The corpus file is authoritative for corpus settings and vocabulary.
    cfg.corpus = corpus.config;
    cfg.sync();
    Ok(corpus)
}

fn cmd_gen_corpus(
    out: &Path,
    per_emotion: Option<usize>,
    noise: Option<f64>,
    speakers: Option<u32>,
    common: &ConfigArgs,
) -> Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(n) = per_emotion {
        if n == 0 {
            return Err(Error::InputDomain(
                "--per-emotion must be at least 1".to_string(),
            ));
        }
        cfg.corpus.per_emotion = n;
    }
    if let Some(p) = noise {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InputDomain(format!("--noise {p} outside [0, 1]")));
        }
        cfg.corpus.p_noise = p;
    }
    if let Some(s) = speakers {
        cfg.corpus.speakers = s;
    }
    cfg.sync();

    let corpus = build_sft_corpus(&cfg.corpus)?;
    let pref = build_pref_corpus(&corpus)?;
    corpus_format::write_corpus(&corpus, out)?;
    let pairs_path = pairs_path_for(out);
    corpus_format::write_pairs(&pref, corpus.config.seed, &pairs_path)?;
    write_resolved_config(&cfg, &config_path_for(out))?;

    println!(
        "wrote {} utterances to {}",
        corpus.utterances.len(),
        out.display()
    );
    println!(
        "wrote {} preference pairs (skipped {}) to {}",
        pref.pairs.len(),
        pref.skipped,
        pairs_path.display()
    );
    Ok(())
}

fn sibling_with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    name.push_str(suffix);
    out.with_file_name(name)
}

fn pairs_path_for(out: &Path) -> PathBuf {
    sibling_with_suffix(out, ".pairs")
}

fn config_path_for(out: &Path) -> PathBuf {
    sibling_with_suffix(out, ".config")
}

fn print_final_record(stage: &str, record: &StepRecord) {
    println!(
        "{stage} final: step={} dpo={:.6} kl={:.6} sft={:.6} total={:.6} margin={:.6}",
        record.step, record.dpo, record.kl, record.sft, record.total, record.margin
    );
}

fn finish_training(out: &Path, outcome: &TrainRunOutcome, stage: &str) -> Result<()> {
    outcome.params.save(out)?;
    if let Some(step) = outcome.diverged_at {
        eprintln!("{stage} diverged at step {step}; last good checkpoint saved");
        return Err(Error::Diverged { step });
    }
    if let Some(last) = outcome.records.last() {
        print_final_record(stage, last);
    }
    println!("epoch losses: {:?}", outcome.epoch_losses);
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_train_sft(corpus_path: &Path, out: &Path, common: &ConfigArgs) -> Result<()> {
    let mut cfg = common.resolve()?;
    let corpus = load_corpus_with_config(corpus_path, &mut cfg)?;
    let (train, test) = split_holdout(&corpus, cfg.holdout_frac, cfg.train.seed)?;
    println!(
        "training on {} utterances, holding out {}",
        train.utterances.len(),
        test.utterances.len()
    );
    std::fs::create_dir_all(out)?;
    write_resolved_config(&cfg, &out.join("config.txt"))?;
    let mut logger = TrainLogger::create(&out.join("train.log"), &cfg)?;
    let outcome = run_sft(&train, &cfg.model, &cfg.train, Some(&mut logger))?;
    logger.flush()?;
    finish_training(out, &outcome, "sft")
}

fn cmd_train_dpo(corpus_path: &Path, init: &Path, out: &Path, common: &ConfigArgs) -> Result<()> {
    let mut cfg = common.resolve()?;
    let corpus = load_corpus_with_config(corpus_path, &mut cfg)?;
    let reference = ModelParams::load(init)?;
    ensure_vocab_compatible(
        &reference.config().vocab,
        &init.join(emotok::model::MANIFEST_FILE).display().to_string(),
        &corpus.config.vocab,
        &corpus_path.display().to_string(),
    )?;
    let (train, test) = split_holdout(&corpus, cfg.holdout_frac, cfg.train.seed)?;
    let pref = build_pref_corpus(&train)?;
    println!(
        "preference training on {} pairs ({} held-out utterances)",
        pref.pairs.len(),
        test.utterances.len()
    );
    std::fs::create_dir_all(out)?;
    write_resolved_config(&cfg, &out.join("config.txt"))?;
    let mut logger = TrainLogger::create(&out.join("train.log"), &cfg)?;
    let outcome = run_dpo(&reference, &pref.pairs, &cfg.train, Some(&mut logger))?;
    logger.flush()?;
    finish_training(out, &outcome, "dpo")
}

fn cmd_eval(
    corpus_path: &Path,
    checkpoint: &Path,
    reference: Option<&Path>,
    out: Option<PathBuf>,
    policy: &PolicyArgs,
    common: &ConfigArgs,
) -> Result<()> {
    let mut cfg = common.resolve()?;
    let corpus = load_corpus_with_config(corpus_path, &mut cfg)?;
    let params = ModelParams::load(checkpoint)?;
    ensure_vocab_compatible(
        &params.config().vocab,
        &checkpoint
            .join(emotok::model::MANIFEST_FILE)
            .display()
            .to_string(),
        &corpus.config.vocab,
        &corpus_path.display().to_string(),
    )?;
    let (_, test) = split_holdout(&corpus, cfg.holdout_frac, cfg.train.seed)?;
    let report = evaluate(&params, &test.utterances, &policy.policy(), cfg.seed)?;
    println!("{report}");

    let margins = match reference {
        Some(ref_path) => {
            let reference = ModelParams::load(ref_path)?;
            let held_pairs = build_pref_corpus(&test)?;
            let m = margin_report(&params, &reference, &held_pairs.pairs)?;
            println!(
                "margin: mean {:.6} median {:.6} frac_positive {:.3} over {} pairs",
                m.mean, m.median, m.frac_positive, m.pairs
            );
            Some(m)
        }
        None => None,
    };

    let out_path = out.unwrap_or_else(|| checkpoint.join("eval_report.json"));
    let record = serde_json::json!({ "report": report, "margin": margins });
    atomic_write(&out_path, format!("{record}\n").as_bytes())?;
    write_resolved_config(&cfg, &config_path_for(&out_path))?;
    println!("report written to {}", out_path.display());
    Ok(())
}

fn cmd_ablate(corpus_path: &Path, out: &Path, common: &ConfigArgs) -> Result<()> {
    let mut cfg = common.resolve()?;
    let corpus = load_corpus_with_config(corpus_path, &mut cfg)?;
    std::fs::create_dir_all(out)?;
    write_resolved_config(&cfg, &out.join("config.txt"))?;
    let grid = run_ablation(&corpus, &cfg.model, &cfg.train, cfg.holdout_frac)?;
    let table = grid.to_table();
    print!("{table}");
    atomic_write(&out.join("table.txt"), table.as_bytes())?;
    atomic_write(&out.join("grid.csv"), grid.to_csv().as_bytes())?;
    for row in &grid.rows {
        let mut lines = String::new();
        for record in &row.records {
            lines.push_str(
                &serde_json::to_string(record)
                    .map_err(|e| Error::format("ablation log", e.to_string()))?,
            );
            lines.push('\n');
        }
        atomic_write(&out.join(format!("{}.log", row.name)), lines.as_bytes())?;
    }
    println!("grid written to {}", out.display());
    Ok(())
}

fn cmd_grad_check(coords: usize, tolerance: f64, common: &ConfigArgs) -> Result<()> {
    let cfg = common.resolve()?;
    let report = gradcheck::run_suite(cfg.seed, coords, tolerance)?;
    for check in &report.checks {
        println!(
            "{:<16} coords={} max_rel_err={:.3e} {}",
            check.loss,
            check.coords,
            check.max_rel_err,
            if check.pass { "ok" } else { "FAIL" }
        );
    }
    println!(
        "max relative error {:.3e} (tolerance {:.1e})",
        report.max_rel_err(),
        report.tolerance
    );
    if !report.pass() {
        return Err(Error::NonFinite {
            component: "gradient check",
        });
    }
    Ok(())
}

fn cmd_infer(
    checkpoint: &Path,
    emotion: &str,
    text: Option<&str>,
    speaker: Option<u32>,
    policy: &PolicyArgs,
    common: &ConfigArgs,
) -> Result<()> {
    let cfg = common.resolve()?;
    let params = ModelParams::load(checkpoint)?;
    let vocab = params.vocabulary();
    let emotion: Emotion = emotion.parse()?;

    let text: Vec<u32> = match text {
        Some(raw) => raw
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>()
                    .map_err(|_| Error::InputDomain(format!("bad text token id '{tok}'")))
                    .and_then(|id| {
                        if vocab.is_text(id) {
                            Ok(id)
                        } else {
                            Err(Error::InputDomain(format!("{id} is not a text token")))
                        }
                    })
            })
            .collect::<Result<_>>()?,
        None => {
            let mut stream = Stream::derive(cfg.seed, "infer/text", 0);
            let len = 3 + stream.next_below(6) as usize;
            (0..len)
                .map(|_| stream.next_below(u64::from(vocab.text_size())) as u32)
                .collect()
        }
    };
    if text.is_empty() {
        return Err(Error::InputDomain("--text is empty".to_string()));
    }

    let prompt_utterance = Utterance {
        emotion,
        speaker,
        text: text.clone(),
        speech: Vec::new(),
    };
    let (prompt, _) = encode_instruction(&vocab, &prompt_utterance, false)?;
    let mut stream = Stream::derive(cfg.seed, "sample", 0);
    let generated = sample(
        &params,
        &prompt,
        &policy.policy(),
        &mut stream,
        2 * text.len() + 4,
    )?;

    println!(
        "text:   {}",
        text.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
    );
    println!(
        "speech: {}",
        generated
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    );
    let speech_only: Vec<u32> = generated
        .iter()
        .copied()
        .filter(|&t| vocab.is_speech(t))
        .collect();
    if speech_only.is_empty() {
        println!("oracle: no speech tokens generated");
    } else {
        let verdict = oracle_classify(&vocab, &speech_only)?;
        println!(
            "oracle: {verdict} ({} of {} tokens in speech range)",
            speech_only.len(),
            generated.len()
        );
    }
    Ok(())
}
