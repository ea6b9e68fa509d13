use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc::sync_channel;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fullstream_core::bench::{run_bench, run_schedule, FeedSchedule, Workload};
use fullstream_core::codec::{write_wav, CodecSpec};
use fullstream_core::corpus::{manifest_lines, CorpusSpec, Utterance};
use fullstream_core::engine::{token_log, Clock, EngineConfig, FrameOut, MonotonicClock, Prompt, StreamEngine, VirtualClock};
use fullstream_core::model::{InferenceModel, Model, ModelConfig};
use fullstream_core::trainer::{ablation, ablation_table, evaluate, make_chunks, metrics_csv, TrainConfig, Trainer};
use fullstream_core::{Error, Lexicon};
use tracing::info;

#[derive(Parser)]
#[command(name = "fullstream", version, about = "Full-stream text-to-speech toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus
    Corpus(CorpusArgs),
    /// Train a model on a generated corpus
    Train(TrainArgs),
    /// Synthesize speech from a word feed
    Synth(SynthArgs),
    /// Measure first-packet latency and real-time factor
    Bench(BenchArgs),
    /// Evaluate a checkpoint, or run the freeze_dt x use_speaker grid
    Eval(EvalArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// CorpusSpec JSON; defaults are used for missing fields
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `corpus`
    #[arg(long)]
    corpus: PathBuf,
    /// TrainConfig JSON
    #[arg(long)]
    config: Option<PathBuf>,
    /// ModelConfig JSON (toy preset when absent)
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV (step, lr, loss_tt, loss_dt)
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from a training checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    freeze_dt: bool,
    #[arg(long)]
    no_speaker: bool,
    /// Stop after this many optimizer steps
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Clone)]
struct GenArgs {
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Phoneme look-ahead (at most 10)
    #[arg(long, default_value_t = 10)]
    la_cap: usize,
    /// Use a virtual clock charging this many milliseconds per stage call
    #[arg(long)]
    virtual_ms: Option<u64>,
}

impl GenArgs {
    fn engine(&self) -> EngineConfig {
        EngineConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            seed: self.seed,
            lookahead: self.la_cap,
            ..EngineConfig::default()
        }
    }

    fn clock(&self) -> Box<dyn Clock> {
        match self.virtual_ms {
            Some(ms) => Box::new(VirtualClock::uniform(Duration::from_millis(ms))),
            None => Box::new(MonotonicClock::new()),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text released according to --interval-ms; without it words are read
    /// from stdin, one per line, until `<close>`
    #[arg(long)]
    text: Option<String>,
    /// Feed file with `offset_ms word` lines
    #[arg(long, conflicts_with = "text")]
    feed: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    interval_ms: u64,
    /// Prompt utterance record (one line of utterances.jsonl)
    #[arg(long)]
    prompt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Token log path
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    gen: GenArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Workload JSON: {"texts": [...], "interval_ms": 0}
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long, conflicts_with = "workload")]
    text: Option<String>,
    #[arg(long, default_value_t = 0)]
    interval_ms: u64,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    gen: GenArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 64)]
    chunk_frames: usize,
    /// Held-out utterances used for the free-running error rate
    #[arg(long, default_value_t = 50)]
    per_utterances: usize,
    /// Train and evaluate the four freeze_dt x use_speaker variants
    #[arg(long)]
    ablation: bool,
    /// TrainConfig JSON for the ablation runs
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io { .. } | Error::Wav(_) | Error::Checkpoint(_) => 4,
                Error::Generation(_)
                | Error::Overrun { .. }
                | Error::Sampling(_)
                | Error::NonFinite { .. }
                | Error::State(_)
                | Error::DecodeAmbiguity { .. } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(a) => cmd_corpus(a),
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_corpus(a: CorpusArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => CorpusSpec::load(p)?,
        None => CorpusSpec::default(),
    };
    if let Some(n) = a.utterances {
        spec.utterances = n;
    }
    if let Some(s) = a.speakers {
        spec.speakers = s;
        spec.held_out_speakers = spec.held_out_speakers.min(s.saturating_sub(1));
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let lex = Lexicon::builtin();
    let utts = spec.generate(&lex)?;
    create_dir(&a.out)?;
    write(&a.out.join("corpus_spec.json"), serde_json::to_string_pretty(&spec)?)?;
    write(&a.out.join("manifest.jsonl"), manifest_lines(&spec, &utts)?)?;
    let mut records = String::new();
    for u in &utts {
        records.push_str(&serde_json::to_string(u)?);
        records.push('\n');
    }
    write(&a.out.join("utterances.jsonl"), records)?;
    let held = utts.iter().filter(|u| spec.is_held_out(u.speaker_id)).count();
    println!(
        "{} utterances ({} held out), {} frames",
        utts.len(),
        held,
        utts.iter().map(|u| u.frames.len()).sum::<usize>()
    );
    Ok(())
}

struct Corpus {
    spec: CorpusSpec,
    train: Vec<Utterance>,
    held_out: Vec<Utterance>,
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    let spec = CorpusSpec::load(&dir.join("corpus_spec.json"))?;
    let path = dir.join("utterances.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let u: Utterance = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if spec.is_held_out(u.speaker_id) {
            held_out.push(u);
        } else {
            train.push(u);
        }
    }
    Ok(Corpus { spec, train, held_out })
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let mut trainer = if let Some(r) = &a.resume {
        Trainer::load(r)?
    } else {
        let mut cfg = train_config(a.config.as_deref())?;
        if let Some(e) = a.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = a.lr {
            cfg.peak_lr = lr;
        }
        if let Some(b) = a.batch_size {
            cfg.batch_size = b;
        }
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        cfg.freeze_dt |= a.freeze_dt;
        cfg.use_speaker &= !a.no_speaker;
        let model_cfg = match &a.model_config {
            Some(p) => ModelConfig::load(p)?,
            None => ModelConfig::toy(),
        };
        check_vocab(&model_cfg, &corpus.spec)?;
        let chunks = make_chunks(&corpus.train, model_cfg.acoustic_pad(), cfg.chunk_frames, cfg.seed)?;
        let model = Model::new(model_cfg, cfg.seed)?;
        Trainer::new(cfg, model, chunks.len())?
    };
    let chunks = make_chunks(
        &corpus.train,
        trainer.model.config.acoustic_pad(),
        trainer.config.chunk_frames,
        trainer.config.seed,
    )?;
    info!(
        chunks = chunks.len(),
        params = trainer.model.num_parameters(),
        steps = trainer.total_steps(),
        config = %serde_json::to_string(&trainer.config)?,
        "training"
    );
    let result = trainer.run(&chunks, a.max_steps);
    if let Some(m) = &a.metrics {
        write(m, metrics_csv(&trainer.log))?;
    }
    if let Err(e) = result {
        let snapshot = a.out.with_extension("failed.bin");
        trainer.save(&snapshot)?;
        return Err(anyhow::Error::new(e).context(format!("snapshot written to {}", snapshot.display())));
    }
    trainer.save(&a.out)?;
    if let Some(last) = trainer.log.last() {
        println!(
            "step {} loss_tt {:.4} loss_dt {:.4}",
            trainer.step, last.loss_tt, last.loss_dt
        );
    }
    Ok(())
}

fn check_vocab(model: &ModelConfig, corpus: &CorpusSpec) -> Result<()> {
    if model.semantic_vocab != corpus.semantic_vocab
        || model.acoustic_vocab != corpus.acoustic_vocab
        || model.speaker_dim != corpus.speaker_dim
    {
        return Err(Error::Validation("model and corpus vocabularies or speaker dims differ".into()).into());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::load(path)?)
}

fn read_prompt(path: &Path, pad: u16) -> Result<Prompt> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let u: Utterance = serde_json::from_str(text.trim()).map_err(Error::from)?;
    Ok(Prompt::from_utterance(&u, pad))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let im = InferenceModel::<f32>::from_model(&model)?;
    let lex = Lexicon::builtin();
    let codec = CodecSpec::new(model.config.semantic_vocab, model.config.acoustic_vocab)?;
    let mut engine = StreamEngine::new(&im, &lex, a.gen.engine())?
        .with_clock(ClockBox(a.gen.clock()))
        .with_codec(codec);
    if let Some(p) = &a.prompt {
        engine.prefill_prompt(&read_prompt(p, model.config.acoustic_pad())?)?;
    }

    // Decoded audio goes to a writer through a bounded queue.
    let (tx, rx) = sync_channel::<Vec<f32>>(32);
    let out = a.out.clone();
    let rate = codec.sample_rate;
    let writer = std::thread::spawn(move || -> fullstream_core::Result<usize> {
        let mut samples = Vec::new();
        for chunk in rx {
            samples.extend(chunk);
        }
        write_wav(&out, &samples, rate)?;
        Ok(samples.len())
    });

    let mut frames: Vec<FrameOut> = Vec::new();
    let emit = |f: FrameOut, frames: &mut Vec<FrameOut>| {
        if let Some(audio) = &f.audio {
            let _ = tx.send(audio.clone());
        }
        frames.push(f);
    };
    let result: Result<()> = (|| {
        let schedule = match (&a.text, &a.feed) {
            (Some(t), _) if a.interval_ms == 0 => Some(FeedSchedule::all_at_once(t)),
            (Some(t), _) => Some(FeedSchedule::fixed_interval(t, a.interval_ms)),
            (None, Some(p)) => Some(FeedSchedule::load(p)?),
            (None, None) => None,
        };
        match schedule {
            Some(s) => {
                for f in run_schedule(&mut engine, &s)? {
                    emit(f, &mut frames);
                }
            }
            None => {
                let stdin = std::io::stdin();
                for line in stdin.lock().lines() {
                    let line = line?;
                    let w = line.trim();
                    if w == "<close>" {
                        break;
                    }
                    if w.is_empty() {
                        continue;
                    }
                    engine.push_word(w)?;
                    while let Some(f) = engine.try_step()? {
                        if f.decodable {
                            emit(f, &mut frames);
                        }
                    }
                }
                engine.close()?;
                while let Some(f) = engine.try_step()? {
                    if f.decodable {
                        emit(f, &mut frames);
                    }
                }
            }
        }
        Ok(())
    })();
    drop(tx);
    let written = writer.join().map_err(|_| anyhow::anyhow!("audio writer panicked"))??;
    result?;
    if engine.phonemes().is_empty() {
        return Err(Error::EmptyUtterance.into());
    }
    if let Some(p) = &a.log {
        write(p, token_log(&frames, true))?;
    }
    let report = engine.latency_report().ok();
    let summary = serde_json::json!({
        "frames": frames.len(),
        "samples": written,
        "fpl_ms": report.as_ref().map(|r| r.fpl_ms),
        "rtf": report.as_ref().map(|r| r.rtf),
        "first_frame": report.as_ref().map(|r| r.first_frame),
    });
    println!("{summary}");
    std::io::stdout().flush()?;
    Ok(())
}

/// Adapts a boxed clock to the engine's generic clock parameter.
struct ClockBox(Box<dyn Clock>);

impl Clock for ClockBox {
    fn now(&self) -> Duration {
        self.0.now()
    }

    fn charge(&mut self, stage: fullstream_core::engine::Stage) {
        self.0.charge(stage)
    }

    fn wait_until(&mut self, t: Duration) {
        self.0.wait_until(t)
    }
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let im = InferenceModel::<f32>::from_model(&model)?;
    let lex = Lexicon::builtin();
    let codec = CodecSpec::new(model.config.semantic_vocab, model.config.acoustic_vocab)?;
    let workload = match (&a.workload, &a.text) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str::<Workload>(&text).map_err(Error::from)?
        }
        (None, Some(t)) => Workload {
            texts: vec![t.clone()],
            interval_ms: a.interval_ms,
        },
        (None, None) => bail!(Error::Validation("bench needs --workload or --text".into())),
    };
    let echo = serde_json::json!({
        "checkpoint": a.checkpoint,
        "engine": a.gen.engine(),
        "virtual_ms": a.gen.virtual_ms,
        "workload": workload,
        "runs": a.runs,
    });
    let gen = a.gen.clone();
    let report = run_bench(
        &im,
        &lex,
        codec,
        &workload,
        a.gen.engine(),
        a.runs,
        || ClockBox(gen.clock()),
        echo,
    )?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.out {
        write(p, &json)?;
    }
    println!(
        "fpl_ms median {:.2} p95 {:.2} | rtf median {:.4} p95 {:.4} | identity violations {} | failed runs {}",
        report.fpl_ms_median,
        report.fpl_ms_p95,
        report.rtf_median,
        report.rtf_p95,
        report.identity_violations,
        report.failed_runs
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let lex = Lexicon::builtin();
    let pad = corpus.spec.acoustic_vocab as u16;
    let held_chunks = make_chunks(&corpus.held_out, pad, a.chunk_frames, 0)?;
    let per_utts = &corpus.held_out[..a.per_utterances.min(corpus.held_out.len())];
    let json = if a.ablation {
        let mut cfg = train_config(a.config.as_deref())?;
        if let Some(e) = a.epochs {
            cfg.epochs = e;
        }
        let init = match &a.checkpoint {
            Some(p) => load_model(p)?,
            None => Model::new(ModelConfig::toy(), cfg.seed)?,
        };
        check_vocab(&init.config, &corpus.spec)?;
        let train = make_chunks(&corpus.train, pad, cfg.chunk_frames, cfg.seed)?;
        let rows = ablation(&cfg, &init, &lex, &train, &held_chunks, per_utts)?;
        print!("{}", ablation_table(&rows));
        serde_json::to_string_pretty(&serde_json::json!({ "config": cfg, "rows": rows }))?
    } else {
        let Some(p) = &a.checkpoint else {
            bail!(Error::Validation("eval needs --checkpoint".into()));
        };
        let model = load_model(p)?;
        check_vocab(&model.config, &corpus.spec)?;
        let r = evaluate(&model, &lex, &held_chunks, per_utts)?;
        println!(
            "joint_accuracy {:.4} dt_accuracy {:.4} per {:.4}",
            r.joint_accuracy, r.dt_accuracy, r.per
        );
        serde_json::to_string_pretty(&r)?
    };
    if let Some(o) = &a.out {
        write(o, json)?;
    }
    Ok(())
}
