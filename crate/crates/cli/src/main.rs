use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use segalign_core::corpus::{gen_synthetic, Archive, GenConfig, Split};
use segalign_core::encoder::detect_boundaries;
use segalign_core::eval::{emit_report, ExtractionPoint, RetrievalReport, RetrievalRow};
use segalign_core::params::ParamStore;
use segalign_core::trainer::{
    encode_utterances, external_starts, extract_features, fit, fit_twin, semantic_retrieval, Boundaries, Branch, Checkpoint,
    Pipeline, Preset, TrainConfig, TwinModel,
};
use segalign_core::{encoder::ModelConfig, Error};
use segalign_tensor::{Graph, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Segmental speech encoders aligned to frozen image and text embedding spaces.
#[derive(Debug, Parser)]
#[command(name = "segalign", version)]
struct Cli {
    /// Global seed. Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// error, warn, info, debug or trace. SEGALIGN_LOG takes precedence.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic corpus archive.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings as JSON; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Trains the audio-visual model.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Trains the twin-branch model on speech alone.
    TrainAudioOnly {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Retrieval report for a checkpoint: image-speech for audio-visual
    /// models, semantic audio retrieval for twin models.
    EvalRetrieval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "right")]
        branch: Branch,
        /// Output stem; writes `<stem>.json` and `<stem>.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Spearman similarity report on the archive's similarity pairs.
    EvalSimi {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "segment_mean")]
        point: ExtractionPoint,
        #[arg(long, default_value = "synthetic")]
        label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment starts per utterance as JSON lines. Without a checkpoint the
    /// detector runs on the raw frames.
    Segment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Threshold for raw-frame detection.
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
        #[arg(long, default_value_t = 64)]
        max_segments: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Utterance embeddings as JSON lines.
    Embed {
        #[command(flatten)]
        model: ModelArgs,
        /// Twin checkpoints: which frozen branch to read.
        #[arg(long, default_value = "right")]
        branch: Branch,
        /// Audio-visual checkpoints: which representation to read.
        #[arg(long, default_value = "sentence")]
        point: ExtractionPoint,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON configuration layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "paper")]
    preset: Preset,
    /// `key=value` override, applied last. Dotted keys reach nested fields.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

enum Loaded {
    AudioVisual(Pipeline),
    Twin(TwinModel),
}

fn load_model(args: &ModelArgs) -> segalign_core::Result<(Archive, Loaded)> {
    let archive = Archive::read(&args.data)?;
    let ck = Checkpoint::read(&args.checkpoint)?;
    let model = match ck.meta.kind.as_str() {
        "twin" => Loaded::Twin(TwinModel::from_checkpoint(&ck)?),
        _ => Loaded::AudioVisual(Pipeline::from_checkpoint(&ck, &archive)?),
    };
    Ok((archive, model))
}

fn resolve_config(run: &RunArgs, seed: Option<u64>) -> segalign_core::Result<TrainConfig> {
    let mut overrides: Vec<String> = seed.map(|s| format!("seed={s}")).into_iter().collect();
    overrides.extend(run.overrides.iter().cloned());
    TrainConfig::load(run.preset, run.config.as_deref(), &overrides)
}

fn parse_split(s: &str) -> segalign_core::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Unknown {
            kind: "split",
            name: other.into(),
            known: "train, test".into(),
        }),
    }
}

fn writer(out: Option<&Path>) -> segalign_core::Result<Box<dyn Write>> {
    match out {
        None => Ok(Box::new(std::io::stdout().lock())),
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            let f = File::create(path).map_err(|e| io_err(path, e))?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Invalid(format!("{}: {e}", path.display()))
}

fn json_lines<T: Serialize>(out: Option<&Path>, rows: impl Iterator<Item = T>) -> segalign_core::Result<()> {
    let mut w = writer(out)?;
    for r in rows {
        let line = serde_json::to_string(&r).expect("row serializes");
        writeln!(w, "{line}").map_err(|e| io_err(out.unwrap_or(Path::new("<stdout>")), e))?;
    }
    w.flush().map_err(|e| io_err(out.unwrap_or(Path::new("<stdout>")), e))
}

#[derive(Serialize)]
struct StartsLine<'a> {
    id: &'a str,
    starts: &'a [usize],
}

#[derive(Serialize)]
struct EmbeddingLine<'a> {
    id: &'a str,
    embedding: &'a [f64],
}

/// Starts detected on the encoded frames of a trained model.
fn model_starts(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    external: bool,
    archive: &Archive,
    utts: &[usize],
) -> segalign_core::Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(64) {
        let mut g = Graph::<f32>::new();
        let p = params.bind(&mut g);
        let frames: Vec<Tensor<f32>> = chunk.iter().map(|&u| archive.utterance_tensor(u)).collect();
        let ext;
        let b = if external {
            ext = external_starts(archive, chunk)?;
            Boundaries::Merge(&ext)
        } else {
            Boundaries::Detect
        };
        out.extend(encode_utterances(&mut g, &p, cfg, &frames, b)?.starts);
    }
    Ok(out)
}

fn run(cli: Cli) -> segalign_core::Result<()> {
    match cli.command {
        Command::GenSynth { out, config } => {
            let cfg: GenConfig = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config {
                        field: path.display().to_string(),
                        message: e.to_string(),
                    })?
                }
                None => GenConfig::default(),
            };
            let seed = cli.seed.unwrap_or(0);
            log::info!("generating synthetic corpus with seed {seed}: {}", serde_json::to_string(&cfg).expect("serializes"));
            let archive = gen_synthetic(&cfg, seed, &out)?;
            log::info!("wrote {} utterances to {}", archive.utterances.len(), out.display());
        }
        Command::Train { run, resume } => {
            let cfg = resolve_config(&run, cli.seed)?;
            let archive = Archive::read(&run.data)?;
            let outcome = fit(&cfg, &archive, &run.out, resume.as_deref())?;
            log::info!(
                "test speech->image R@1 {:.3}, R@10 {:.3}; report {}",
                outcome.test.speech_to_image[0],
                outcome.test.speech_to_image[2],
                outcome.report.display()
            );
        }
        Command::TrainAudioOnly { run } => {
            let cfg = resolve_config(&run, cli.seed)?;
            let archive = Archive::read(&run.data)?;
            let outcome = fit_twin(&cfg, &archive, &run.out)?;
            log::info!(
                "test semantic R@1 {:.3}; report {}",
                outcome.test.recall[0],
                outcome.report.display()
            );
        }
        Command::EvalRetrieval { model, split, branch, out } => {
            let split = parse_split(&split)?;
            let (archive, loaded) = load_model(&model)?;
            let (json, txt) = match loaded {
                Loaded::AudioVisual(pipe) => {
                    let recall = pipe.retrieval(&archive, split, 0)?;
                    let report = RetrievalReport::new(
                        Some(pipe.cfg.digest()),
                        vec![RetrievalRow {
                            label: pipe.cfg.head.clone(),
                            recall,
                        }],
                    );
                    emit_report(&report, &out)?
                }
                Loaded::Twin(twin) => emit_report(&semantic_retrieval(&twin, &archive, split, branch)?, &out)?,
            };
            log::info!("wrote {} and {}", json.display(), txt.display());
        }
        Command::EvalSimi { model, point, label, out } => {
            let (archive, loaded) = load_model(&model)?;
            let Loaded::AudioVisual(pipe) = loaded else {
                return Err(Error::Invalid("eval-simi needs an audio-visual checkpoint".into()));
            };
            let report = pipe.simi(&archive, point, &label)?;
            let (json, _) = emit_report(&report, &out)?;
            log::info!("dev {:?}, test {:?}; wrote {}", report.dev.synthetic, report.test.synthetic, json.display());
        }
        Command::Segment {
            data,
            checkpoint,
            theta,
            max_segments,
            out,
        } => {
            let archive = Archive::read(&data)?;
            let utts: Vec<usize> = (0..archive.utterances.len()).collect();
            let starts = match &checkpoint {
                None => utts
                    .iter()
                    .map(|&u| detect_boundaries(&archive.utterance_tensor(u), theta, max_segments))
                    .collect(),
                Some(path) => {
                    let ck = Checkpoint::read(path)?;
                    if ck.meta.kind == "twin" {
                        let m = TwinModel::from_checkpoint(&ck)?;
                        model_starts(&m.params, &m.cfg.model, m.cfg.external_boundaries, &archive, &utts)?
                    } else {
                        let p = Pipeline::from_checkpoint(&ck, &archive)?;
                        model_starts(&p.model.params, &p.model.cfg, p.cfg.external_boundaries, &archive, &utts)?
                    }
                }
            };
            json_lines(
                out.as_deref(),
                archive.utterances.iter().zip(&starts).map(|(u, s)| StartsLine { id: &u.id, starts: s }),
            )?;
        }
        Command::Embed {
            model,
            branch,
            point,
            out,
        } => {
            let (archive, loaded) = load_model(&model)?;
            let utts: Vec<usize> = (0..archive.utterances.len()).collect();
            let vectors = match loaded {
                Loaded::Twin(twin) => extract_features(&twin, &archive, &utts, branch)?,
                Loaded::AudioVisual(pipe) => pipe.embed(&archive, &utts)?.at(point).to_vec(),
            };
            json_lines(
                out.as_deref(),
                archive.utterances.iter().zip(&vectors).map(|(u, v)| EmbeddingLine { id: &u.id, embedding: v }),
            )?;
        }
    }
    Ok(())
}

fn init_logging(level: &str) {
    let mut b = env_logger::Builder::new();
    b.parse_filters(level);
    if let Ok(spec) = std::env::var("SEGALIGN_LOG") {
        b.parse_filters(&spec);
    }
    b.format_timestamp_secs().init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(&cli.log_level);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
