use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spoofcue::config::ExperimentConfig;
use spoofcue::datamodel::{load_manifest, EvalProtocol, Split};
use spoofcue::pipeline::{denormalize, load_image, synth_dataset, ArtifactKind, SynthConfig};
use spoofcue::scoring::{write_scores, DEFAULT_THRESHOLD};
use spoofcue::trainer::{evaluate, fit, score_image, score_samples, ThresholdPolicy, TrainState};
use spoofcue::{Error, Result};

/// Spoof-cue face anti-spoofing: training, evaluation and data tools.
///
/// Exit status is 0 on success, 2 on a usage error and 1 on any runtime error.
#[derive(Parser, Debug)]
#[command(name = "spoofcue", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train generator and classifier jointly; writes checkpoints and a step log under --out.
    Train(TrainArgs),
    /// Score the protocol's test set and write a metrics report.
    Eval(EvalArgs),
    /// Write spoof scores for manifest samples.
    Score(ScoreArgs),
    /// Generate the procedural live/spoof dataset.
    SynthData(SynthArgs),
    /// Save cue maps of images as 8-bit PNGs alongside their scores.
    ExportCues(ExportArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat key = value config file. Precedence: defaults < file < --set < --seed/--out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Protocol JSON; defaults to train/dev/test splits with no withheld attacks.
    #[arg(long)]
    protocol: Option<PathBuf>,
    /// Output directory for checkpoints and train_log.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Seed for initialisation, batch order and patch sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Extra key=value assignments applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("thr").args(["threshold", "dev_eer"])))]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    protocol: Option<PathBuf>,
    /// Fixed decision threshold on the spoof score.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Use the equal-error threshold of the development set instead.
    #[arg(long)]
    dev_eer: bool,
    /// Report path; JSON, scores and embeddings are written next to it.
    #[arg(long, default_value = "report.txt")]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Split to score: train, dev, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Output score file (one JSON record per line).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Images per class.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 96)]
    size: usize,
    /// Comma-separated artifacts: moire, color_cast, banding.
    #[arg(long, default_value = "moire,color_cast")]
    artifacts: String,
    /// Artifact strength in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated train,dev,test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    splits: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG files or directories of PNG files.
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_protocol(path: Option<&Path>) -> Result<EvalProtocol> {
    path.map_or_else(|| Ok(EvalProtocol::default()), EvalProtocol::load)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.pipeline.seed = s;
    }
    cfg.train.checkpoint_dir = a.out.clone();
    let manifest = load_manifest(&a.manifest)?;
    let protocol = load_protocol(a.protocol.as_deref())?;
    let summary = fit(&cfg, &manifest, &protocol, a.resume.as_deref())?;
    match &summary.last {
        Some(l) => println!(
            "trained {} steps; final total loss {:.6}; checkpoint {}",
            summary.global_step,
            l.total,
            summary.checkpoint.display()
        ),
        None => println!("no steps run; checkpoint {}", summary.checkpoint.display()),
    }
    Ok(())
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let protocol = load_protocol(a.protocol.as_deref())?;
    let policy = if a.dev_eer {
        ThresholdPolicy::DevEer
    } else {
        ThresholdPolicy::Fixed(a.threshold)
    };
    let ev = evaluate(&a.checkpoint, &manifest, &protocol, policy)?;
    ev.write(&a.report)?;
    let r = &ev.report;
    println!("threshold {}", r.threshold);
    for (k, v) in &r.apcer_per_pai {
        println!("APCER[{k}] {}", pct(*v));
    }
    println!("APCER {}  BPCER {}  ACER {}", pct(r.apcer), pct(r.bpcer), pct(r.acer));
    if let Some(h) = r.hter {
        println!("HTER {}", pct(h));
    }
    println!("report written to {}", a.report.display());
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let (state, cfg) = TrainState::<f32>::load(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let split = match a.split.as_str() {
        "all" => None,
        "train" => Some(Split::Train),
        "dev" => Some(Split::Dev),
        "test" => Some(Split::Test),
        other => {
            return Err(Error::Config(format!(
                "split {other:?} is not one of train, dev, test, all"
            )))
        }
    };
    let samples: Vec<_> = manifest
        .samples
        .iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .cloned()
        .collect();
    let (scores, _) = score_samples(&state.generator, &cfg.pipeline, &manifest, &samples)?;
    write_scores(&a.out, &scores)?;
    println!("{} scores written to {}", scores.len(), a.out.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let artifact_types = a
        .artifacts
        .split(',')
        .map(|s| ArtifactKind::parse(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    let fr: Vec<f64> = a
        .splits
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("split fraction {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    let split_fractions: [f64; 3] = fr
        .try_into()
        .map_err(|_| Error::Config("--splits needs three comma-separated fractions".into()))?;
    let cfg = SynthConfig {
        count: a.count,
        image_size: a.size,
        artifact_types,
        artifact_strength: a.strength,
        seed: a.seed,
        split_fractions,
    };
    let m = synth_dataset(&cfg, &a.out)?;
    println!(
        "{} samples written to {}",
        m.samples.len(),
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn collect_pngs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let (state, cfg) = TrainState::<f32>::load(&a.checkpoint)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut lines = String::new();
    let images = collect_pngs(&a.images)?;
    for path in &images {
        let img = load_image(path, None)?;
        let id = path.to_string_lossy().replace('\\', "/");
        let r = score_image(&state.generator, &cfg.pipeline, &img, &id)?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let dst = a.out.join(format!("{stem}_cue.png"));
        denormalize(r.cue.image())?
            .save(&dst)
            .map_err(|source| Error::Image {
                path: dst.clone(),
                source,
            })?;
        let rec = serde_json::json!({
            "image": id,
            "cue": dst.file_name().map(|f| f.to_string_lossy().into_owned()),
            "score": r.score,
        });
        lines.push_str(&rec.to_string());
        lines.push('\n');
    }
    let idx = a.out.join("cue_scores.jsonl");
    std::fs::write(&idx, lines).map_err(|e| Error::Io {
        path: idx.clone(),
        source: e,
    })?;
    println!("{} cue maps written to {}", images.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Score(a) => cmd_score(a),
        Command::SynthData(a) => cmd_synth(a),
        Command::ExportCues(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
