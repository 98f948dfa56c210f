use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use itov::distortion::{DistortionKind, DistortionSpec};
use itov::eval::{self, EvaluationReport};
use itov::media::{sample_clips, ClipManifest};
use itov::net::Message;
use itov::train::{train_stage, Checkpoint, TrainingConfig};

#[derive(Parser)]
#[command(name = "itov", version, about = "Blind video watermarking with image networks over folded clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue a checkpoint of the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output checkpoint; overrides the config's `checkpoint`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Bit accuracy under each distortion plus PSNR statistics.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `all` or a comma-separated list of distortion kinds.
        #[arg(long, default_value = "all")]
        distortions: String,
        #[arg(long, default_value_t = 100)]
        n_clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON report; a CSV mirror is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long)]
        dataset_id: Option<String>,
    },
    /// Bit accuracy after H.264 at a grid of CRF values.
    SweepCrf {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        min: u8,
        #[arg(long, default_value_t = 51)]
        max: u8,
        #[arg(long, default_value_t = 5)]
        step: u8,
        #[arg(long, default_value_t = 20)]
        n_clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Watermark a video file; the output is written losslessly.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Message as m/4 hex digits.
        #[arg(long)]
        message: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Recover the message from a video file.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Print the full extraction as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Apply one distortion to a video file.
    Attack {
        #[arg(long)]
        input: PathBuf,
        /// A kind name (evaluation parameters) or a JSON spec such as
        /// `{"kind":"h264","crf":30}`.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Merge evaluation reports into one comparison grid.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Writes `<out>.json` and `<out>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write procedural test videos and their manifest.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            resume,
            out,
            seed,
        } => train(&config, resume, out, seed),
        Command::Evaluate {
            model,
            manifest,
            distortions,
            n_clips,
            seed,
            out,
            model_id,
            dataset_id,
        } => {
            let ck = load_model(&model)?;
            let specs = eval::parse_distortion_list(&distortions)?;
            let manifest_data = ClipManifest::load(&manifest)?;
            let report = eval::evaluate_manifest(
                &ck.model,
                &manifest_data,
                &specs,
                n_clips,
                seed,
                &model_id.unwrap_or_else(|| stem(&model)),
                &dataset_id.unwrap_or_else(|| stem(&manifest)),
            )?;
            if let Some(out) = out {
                report.save(&out)?;
            }
            print!("{}", report.to_json()?);
            println!();
            Ok(())
        }
        Command::SweepCrf {
            model,
            manifest,
            min,
            max,
            step,
            n_clips,
            seed,
            out,
        } => {
            let crfs = eval::crf_grid(min, max, step)?;
            let ck = load_model(&model)?;
            let clips = sample_clips(&ClipManifest::load(&manifest)?, n_clips, ck.model.config().clip, seed)?;
            let points = eval::sweep_crf(&ck.model, &clips, &crfs, seed)?;
            let mut text = String::from("crf,bit_accuracy\n");
            for p in &points {
                text.push_str(&format!("{},{}\n", p.crf, p.bit_accuracy));
            }
            if let Some(out) = out {
                std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
            }
            print!("{text}");
            Ok(())
        }
        Command::Embed {
            model,
            input,
            message,
            output,
        } => {
            let ck = load_model(&model)?;
            let msg = Message::from_hex(&message, ck.model.config().message_length)?;
            eval::embed_file(&ck.model, &input, &msg, &output)?;
            Ok(())
        }
        Command::Extract { model, input, json } => {
            let ck = load_model(&model)?;
            let ex = eval::extract_file(&ck.model, &input)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&ex)?);
            } else {
                println!("bits {}", ex.bits);
                if let Some(hex) = &ex.hex {
                    println!("hex {hex}");
                }
                println!("confidence {:.4}", ex.confidence);
                let margins: Vec<String> = ex.margins.iter().map(|m| format!("{m:+.3}")).collect();
                println!("margins {}", margins.join(" "));
            }
            Ok(())
        }
        Command::Attack {
            input,
            spec,
            seed,
            output,
        } => {
            let spec = parse_spec(&spec)?;
            spec.validate()?;
            eval::attack_file(&input, &spec, seed, &output)?;
            Ok(())
        }
        Command::Report { reports, out } => {
            let loaded = reports
                .iter()
                .map(|p| EvaluationReport::load(p))
                .collect::<itov::Result<Vec<_>>>()?;
            let merged = eval::merge_reports(&loaded)?;
            if let Some(out) = out {
                let json = out.with_extension("json");
                let csv = out.with_extension("csv");
                std::fs::write(&json, serde_json::to_string_pretty(&merged)?)
                    .with_context(|| format!("writing {}", json.display()))?;
                std::fs::write(&csv, merged.to_csv()?).with_context(|| format!("writing {}", csv.display()))?;
            }
            print!("{}", merged.to_table());
            Ok(())
        }
        Command::Synth {
            dir,
            count,
            width,
            height,
            frames,
            seed,
        } => {
            let manifest = itov::synth::write_dataset(&dir, count, (width, height), frames, seed)?;
            println!("{}", manifest.display());
            Ok(())
        }
    }
}

fn train(config: &Path, resume: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = TrainingConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if out.is_some() {
        cfg.checkpoint = out;
    }
    let Some(target) = cfg.checkpoint.clone() else {
        bail!("no output checkpoint: set `checkpoint` in the config or pass --out");
    };
    let manifest_path = cfg.manifest.clone().context("the config has no `manifest`")?;
    let manifest = ClipManifest::load(&manifest_path)?;
    let init = match (resume, &cfg.init) {
        (Some(p), _) => Some(Checkpoint::load(&p).with_context(|| format!("resuming from {}", p.display()))?),
        (None, Some(p)) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        (None, None) => None,
    };
    let ck = train_stage(&cfg, &manifest, init)?;
    ck.save(&target)?;
    if let Some(last) = ck.meta.evals.last() {
        log::info!(
            "step {}: held-out accuracy {:.2}%, PSNR {}",
            last.step,
            last.bit_accuracy,
            last.psnr.map_or("inf".into(), |p| format!("{p:.2} dB"))
        );
    }
    println!("{}", target.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn parse_spec(s: &str) -> Result<DistortionSpec> {
    let s = s.trim();
    if s.starts_with('{') {
        return serde_json::from_str(s).with_context(|| format!("parsing distortion spec {s}"));
    }
    Ok(s.parse::<DistortionKind>()?.evaluation_spec())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}
