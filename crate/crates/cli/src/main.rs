use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use sidecue::detector::{parameter_report, Checkpoint};
use sidecue::encoder::{EncoderConfig, EncoderWeights};
use sidecue::imageops::psnr;
use sidecue::pipeline::affinity::{affinity_maps, dump_affinity, part_mass};
use sidecue::pipeline::data::load_split;
use sidecue::pipeline::metrics::{average_precision, video_auroc};
use sidecue::pipeline::perturb::{perturb, PerturbKind, MAX_SEVERITY};
use sidecue::pipeline::toyset::{generate, write_toyset, ToysetConfig, ToysetKind};
use sidecue::pipeline::video::{load_clip, resize_frames, select_frames, write_packed};
use sidecue::pipeline::{DatasetManifest, Split, TrainConfig, Trainer, VideoSource};
use sidecue::spatial::{mine_facial_attributes, FacialPartAttributes, MiningConfig};
use sidecue::tensor::Tensor;
use sidecue::{Error, Result};

#[derive(Parser)]
#[command(name = "sidecue", version, about = "Side-network deepfake detector on a frozen ViT encoder")]
struct Cli {
    /// Training configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Encoder archive. Without it the synthetic Tiny encoder is used.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Detector checkpoint (read by eval/score/dump-affinity, resumed by train).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Extra `key=value` configuration overrides, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine per-part encoder attributes from landmark-annotated train videos.
    Mine {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use at most this many videos.
        #[arg(long, default_value_t = 64)]
        max_videos: usize,
        /// Frames taken from each video.
        #[arg(long, default_value_t = 10)]
        max_frames: usize,
    },
    /// Train a detector; writes last.ckpt, best.ckpt and history.json.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Mined attribute archive (required when FCG is enabled).
        #[arg(long)]
        phi: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Video-level AUROC and AP on a manifest split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluate on perturbed copies of every clip.
        #[arg(long)]
        perturb: Option<String>,
        #[arg(long, default_value_t = 0)]
        severity: u8,
    },
    /// Score a single clip (packed file or frame directory).
    Score {
        #[arg(long)]
        clip: PathBuf,
    },
    /// Write perturbed copies of a clip as packed files.
    Perturb {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Kinds to emit (default: all seven).
        #[arg(long = "kind")]
        kinds: Vec<String>,
        /// Severities to emit (default: 1 to 5).
        #[arg(long = "severity")]
        severities: Vec<u8>,
    },
    /// Write per-query, per-frame attention heatmaps (PGM).
    DumpAffinity {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Average over at most this many clips.
        #[arg(long, default_value_t = 16)]
        max_clips: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trainable-parameter report (ViT-L/14 settings unless --weights is given).
    Params,
    /// Write the synthetic toyset (packed clips, landmarks, manifest).
    Toyset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Separable)]
        kind: Kind,
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 16)]
        val: usize,
        #[arg(long, default_value_t = 16)]
        test: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Separable,
    TemporalOnly,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Dimension { .. } | Error::Range(_) => 2,
        Error::NonFinite(_) | Error::Degenerate { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn encoder(cli: &Cli) -> Result<EncoderWeights> {
    match &cli.weights {
        Some(p) => EncoderWeights::load(p, None),
        None => {
            eprintln!("note: no --weights given; using the synthetic Tiny encoder");
            EncoderWeights::synthetic(&EncoderConfig::tiny(), 0)
        }
    }
}

fn checkpoint(cli: &Cli) -> Result<Checkpoint> {
    let path = cli.checkpoint.as_ref().ok_or_else(|| Error::Config("this command needs --checkpoint".into()))?;
    Checkpoint::load(path)
}

fn manifest(path: &Path, cfg: &TrainConfig) -> Result<DatasetManifest> {
    let mut m = DatasetManifest::load(path)?;
    if let Some(tag) = &cfg.loo_exclusion {
        m = m.exclude_tag(tag);
    }
    if cfg.dataset_fraction < 1.0 {
        m = m.subsample(cfg.dataset_fraction, cfg.seed)?;
    }
    Ok(m)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = train_config(&cli)?;
    match &cli.command {
        Command::Params => {
            let enc_cfg = match &cli.weights {
                Some(p) => EncoderWeights::load(p, None)?.config,
                None => EncoderConfig::vit_l14(16),
            };
            print!("{}", parameter_report(&cfg.detector_config(&enc_cfg)));
        }
        Command::Toyset { out, kind, train, val, test } => {
            let kind = match kind {
                Kind::Separable => ToysetKind::Separable,
                Kind::TemporalOnly => ToysetKind::TemporalOnly,
            };
            let tc = ToysetConfig { kind, train_videos: *train, val_videos: *val, test_videos: *test, seed: cfg.seed, ..Default::default() };
            let m = write_toyset(out, &generate(&tc)?)?;
            let suggested = format!("# settings for the synthetic toyset\nfps = {}\nframes = {}\nclips_per_video = 1\naugment = false\nepochs = 25\nmining_rounds = 4\n", tc.fps, tc.frames);
            std::fs::write(out.join("toyset.cfg"), suggested)?;
            println!("wrote {} clips and {}", m.records.len(), out.join("manifest.tsv").display());
        }
        Command::Mine { manifest: path, out, max_videos, max_frames } => {
            let enc = encoder(&cli)?;
            let m = manifest(path, &cfg)?;
            let sources = load_split(&m, Split::Train, enc.config.image_size, cfg.fps)?;
            let samples: Vec<_> = sources
                .iter()
                .filter(|s| !s.label)
                .filter_map(|s| s.mining_sample(*max_frames))
                .take(*max_videos)
                .collect::<Result<_>>()?;
            if samples.is_empty() {
                return Err(Error::Data("no real train videos with landmarks to mine from".into()));
            }
            let mc = MiningConfig { rounds: cfg.mining_rounds, gamma: cfg.gamma_s, seed: cfg.seed };
            let phi = mine_facial_attributes(&enc, &samples, &mc)?;
            phi.to_archive().save(out)?;
            println!("mined {} layers × 4 parts from {} videos into {}", phi.layers(), samples.len(), out.display());
        }
        Command::Train { manifest: path, phi, out } => {
            let enc = encoder(&cli)?;
            let m = manifest(path, &cfg)?;
            let train = load_split(&m, Split::Train, enc.config.image_size, cfg.fps)?;
            let val = load_split(&m, Split::Val, enc.config.image_size, cfg.fps)?;
            let phi = phi.as_ref().map(|p| sidecue::archive::TensorArchive::load(p).and_then(|a| FacialPartAttributes::from_archive(&a))).transpose()?;
            let mut trainer = match &cli.checkpoint {
                Some(p) => Trainer::resume(Checkpoint::load(p)?, cfg.clone(), &enc, phi.as_ref())?,
                None => Trainer::new(cfg.clone(), &enc, phi.as_ref())?,
            };
            let t0 = Instant::now();
            let outcome = trainer.fit(&train, &val, Some(out))?;
            std::fs::write(out.join("history.json"), outcome.history.to_json())?;
            for e in &outcome.history.epochs {
                println!(
                    "epoch {:>3}  step {:>6}  loss {:.4} (t {:.4} s {:.4} st {:.4} fcg {:.4})  val AUROC {:.4}",
                    e.epoch, e.steps, e.loss_total, e.loss_t, e.loss_s, e.loss_st, e.loss_fcg, e.val_auroc
                );
            }
            println!(
                "best val AUROC {:.4}{}; history hash {}; {:.1}s",
                outcome.best_val_auroc,
                if outcome.stopped_early { " (stopped early)" } else { "" },
                outcome.history.hash(),
                t0.elapsed().as_secs_f64()
            );
        }
        Command::Eval { manifest: path, split, perturb: kind, severity } => {
            let enc = encoder(&cli)?;
            let ck = checkpoint(&cli)?;
            let m = DatasetManifest::load(path)?;
            let mut sources = load_split(&m, split.parse()?, enc.config.image_size, cfg.fps)?;
            if let Some(kind) = kind {
                let kind: PerturbKind = kind.parse()?;
                for s in &mut sources {
                    let frames = perturb(&s.frames, kind, *severity, cfg.seed)?;
                    *s = VideoSource { frames: frames.into(), key: format!("{}#{}{}", s.key, kind.as_str(), severity), ..s.clone() };
                }
            }
            let trainer = Trainer::for_checkpoint(&ck, cfg.clone(), &enc)?;
            let scored = trainer.score_sources(trainer.params(), &sources)?;
            let scores: Vec<f64> = scored.iter().map(|(_, o)| o.score).collect();
            let ids: Vec<String> = scored.iter().map(|(i, _)| sources[*i].video_id.clone()).collect();
            let labels: Vec<bool> = scored.iter().map(|(i, _)| sources[*i].label).collect();
            println!("clips {}  videos {}", scores.len(), sources.len());
            println!("video AUROC {:.6}", video_auroc(&scores, &ids, &labels)?);
            println!("clip AP {:.6}", average_precision(&scores, &labels)?);
        }
        Command::Score { clip } => {
            let enc = encoder(&cli)?;
            let ck = checkpoint(&cli)?;
            let t0 = Instant::now();
            let frames = resize_frames(&load_clip(clip)?, enc.config.image_size)?;
            let source = VideoSource {
                video_id: clip.display().to_string(),
                key: clip.display().to_string(),
                label: false,
                frames: frames.into(),
                fps: cfg.fps,
                landmarks: None,
                tag: None,
            };
            let trainer = Trainer::for_checkpoint(&ck, cfg.clone(), &enc)?;
            let scored = trainer.score_sources(trainer.params(), std::slice::from_ref(&source))?;
            let n = scored.len() as f64;
            let mean = |f: &dyn Fn(&sidecue::detector::DetectorOutput) -> Option<f64>| -> Option<f64> {
                scored.iter().map(|(_, o)| f(o)).sum::<Option<f64>>().map(|s| s / n)
            };
            let out = serde_json::json!({
                "clip": clip.display().to_string(),
                "clips": scored.len(),
                "score": mean(&|o| Some(o.score)),
                "logit_t": mean(&|o| o.logit_t),
                "logit_s": mean(&|o| o.logit_s),
                "logit_st": mean(&|o| o.logit_st),
                "wall_time_s": t0.elapsed().as_secs_f64(),
            });
            println!("{out}");
        }
        Command::Perturb { clip, out, kinds, severities } => {
            let frames = load_clip(clip)?;
            let kinds: Vec<PerturbKind> = if kinds.is_empty() {
                PerturbKind::ALL.to_vec()
            } else {
                kinds.iter().map(|k| k.parse()).collect::<Result<_>>()?
            };
            let severities: Vec<u8> = if severities.is_empty() { (1..=MAX_SEVERITY).collect() } else { severities.clone() };
            std::fs::create_dir_all(out)?;
            for kind in kinds {
                for &s in &severities {
                    let p = perturb(&frames, kind, s, cfg.seed)?;
                    let path = out.join(format!("{}_s{s}.clip", kind.as_str()));
                    write_packed(&path, &p)?;
                    println!("{}  PSNR {:.2} dB", path.display(), psnr(&frames, &p));
                }
            }
        }
        Command::DumpAffinity { manifest: path, split, max_clips, out } => {
            let enc = encoder(&cli)?;
            let ck = checkpoint(&cli)?;
            let m = DatasetManifest::load(path)?;
            let sources = load_split(&m, split.parse()?, enc.config.image_size, cfg.fps)?;
            let trainer = Trainer::for_checkpoint(&ck, cfg.clone(), &enc)?;
            let mut maps: Vec<Tensor> = Vec::new();
            let mut masses: Vec<Vec<f64>> = Vec::new();
            'outer: for s in &sources {
                for w in trainer.eval_windows(s)? {
                    if maps.len() >= *max_clips {
                        break 'outer;
                    }
                    let taps = enc.encode_clip(&enc.normalize(&select_frames(&s.frames, &w)?)?)?;
                    let map = affinity_maps(&ck.config, trainer.params(), &taps)?;
                    if let Some(lm) = &s.landmarks {
                        let lm: Vec<_> = w.iter().map(|&i| lm[i].clone()).collect();
                        masses.push(part_mass(&map, &lm, &enc.config)?);
                    }
                    maps.push(map);
                }
            }
            let written = dump_affinity(&maps, out)?;
            println!("wrote {} heatmaps averaged over {} clips to {}", written.len(), maps.len(), out.display());
            if !masses.is_empty() {
                let q = masses[0].len();
                let mean: Vec<String> =
                    (0..q).map(|i| format!("{:.4}", masses.iter().map(|m| m[i]).sum::<f64>() / masses.len() as f64)).collect();
                println!(
                    "mean attention mass on own part per query: [{}] (uniform attention gives covered patches / {})",
                    mean.join(", "),
                    ck.config.patch_count
                );
            }
        }
    }
    Ok(())
}
