//! `fer` — train, predict, evaluate, and ensemble the three expression
//! models over a frames-plus-annotations dataset.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use fer_core::config::{parse_config, RunConfig};
use fer_core::dataio::{self, FrameCache, SyntheticSpec};
use fer_core::inference::{
    align_model_records, ensemble_combine, ensemble_grid_search, predict_video,
    read_predictions, write_predictions, EnsembleConfig, PredictionRecord,
};
use fer_core::metrics::evaluate_files;
use fer_core::models::{HeadKind, ModelBundle};
use fer_core::training::{fit, Dataset, FitHooks};

#[derive(Parser)]
#[command(name = "fer", version, about = "video facial expression recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Static,
    Gru,
    Transformer,
    All,
}

impl ModelArg {
    fn kinds(self) -> Vec<HeadKind> {
        match self {
            ModelArg::Static => vec![HeadKind::Static],
            ModelArg::Gru => vec![HeadKind::Gru],
            ModelArg::Transformer => vec![HeadKind::Transformer],
            ModelArg::All => vec![HeadKind::Static, HeadKind::Gru, HeadKind::Transformer],
        }
    }
}

#[derive(Parser, Debug)]
struct Common {
    /// Run configuration file (flat `section.key = value` text).
    #[arg(long)]
    config: PathBuf,
    /// Override train.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Deterministic mode (single-threaded seeded execution; also the
    /// default — the flag is recorded in the config echo).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset under the configured data paths.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Videos to generate (classes assigned round-robin).
        #[arg(long, default_value_t = 14)]
        videos: usize,
        /// Frames per video.
        #[arg(long, default_value_t = 30)]
        frames: usize,
        /// Pixel noise standard deviation.
        #[arg(long, default_value_t = 0.03)]
        noise: f64,
        /// Fraction of frames labeled invalid (-1).
        #[arg(long, default_value_t = 0.03)]
        invalid: f64,
        /// Fast blob travel per frame as a fraction of the image side.
        #[arg(long, default_value_t = 0.2)]
        blob_speed: f64,
        /// Slow blob travel per frame as a fraction of the image side.
        #[arg(long, default_value_t = 0.03)]
        blob_speed_slow: f64,
        /// Blob standard deviation as a fraction of the image side.
        #[arg(long, default_value_t = 0.15)]
        blob_sigma: f64,
    },
    /// Train one model (or all three) and write weights + checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ModelArg::All)]
        model: ModelArg,
    },
    /// Write per-frame prediction CSVs; with --model all, also the ensemble.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ModelArg::All)]
        model: ModelArg,
    },
    /// Score a prediction CSV against the annotations.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Which model's predictions to score ("all" scores the ensemble).
        #[arg(long, value_enum, default_value_t = ModelArg::All)]
        model: ModelArg,
    },
    /// Grid-search ensemble weights on the configured dataset.
    EnsembleSearch {
        #[command(flatten)]
        common: Common,
        /// Simplex step size.
        #[arg(long, default_value_t = 0.05)]
        step: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // usage errors exit 2 via clap
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = parse_config(&common.config)
        .with_context(|| format!("reading config {:?}", common.config))?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let echo = cfg.output_dir.join("config.echo.txt");
    std::fs::write(&echo, cfg.to_config_string())?;
    Ok(())
}

fn model_dir(cfg: &RunConfig, kind: HeadKind) -> PathBuf {
    cfg.output_dir.join(kind.to_string())
}

fn head_config(cfg: &RunConfig, kind: HeadKind) -> fer_core::models::TemporalHeadConfig {
    fer_core::models::TemporalHeadConfig {
        kind,
        ..cfg.head.clone()
    }
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let anns = dataio::load_annotations(&cfg.annotations_root, &cfg.frames_root)?;
    let cache = FrameCache::new(&cfg.frames_root, dataio::Normalization::default());
    Ok(Dataset::new(anns, cache))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            common,
            videos,
            frames,
            noise,
            invalid,
            blob_speed,
            blob_speed_slow,
            blob_sigma,
        } => {
            let cfg = load_config(&common)?;
            echo_config(&cfg)?;
            let out_root = synth_root(&cfg)?;
            let spec = SyntheticSpec {
                num_videos: videos,
                frames_per_video: frames,
                noise_level: noise,
                invalid_fraction: invalid,
                blob_speed,
                blob_speed_slow,
                blob_sigma,
                ..Default::default()
            };
            dataio::generate_synthetic_dataset(&spec, cfg.train.seed, &out_root)?;
            println!(
                "wrote {videos} videos x {frames} frames under {}",
                out_root.display()
            );
            Ok(())
        }
        Command::Train { common, model } => {
            let cfg = load_config(&common)?;
            cfg.validate_input_paths()?;
            echo_config(&cfg)?;
            for kind in model.kinds() {
                train_one(&cfg, kind)?;
            }
            Ok(())
        }
        Command::Predict { common, model } => {
            let cfg = load_config(&common)?;
            cfg.validate_input_paths()?;
            echo_config(&cfg)?;
            for kind in model.kinds() {
                predict_one(&cfg, kind)?;
            }
            if model == ModelArg::All {
                write_ensemble(&cfg, &cfg.ensemble)?;
            }
            Ok(())
        }
        Command::Evaluate { common, model } => {
            let cfg = load_config(&common)?;
            cfg.validate_input_paths()?;
            if let Some(lm_path) = &cfg.label_map {
                let lm = fer_core::labels::LabelMap::load(lm_path)?;
                let names: Vec<String> =
                    (0..fer_core::NUM_CLASSES).map(|c| format!("{c}={}", lm.name(c))).collect();
                println!("classes: {}", names.join(" "));
            }
            for kind in model.kinds() {
                let dir = model_dir(&cfg, kind);
                evaluate_one(&cfg, &dir.join("predictions.csv"), &kind.to_string())?;
            }
            if model == ModelArg::All {
                let csv = cfg.output_dir.join("ensemble").join("predictions.csv");
                evaluate_one(&cfg, &csv, "ensemble")?;
            }
            Ok(())
        }
        Command::EnsembleSearch { common, step } => {
            let cfg = load_config(&common)?;
            cfg.validate_input_paths()?;
            let per_model = read_all_model_predictions(&cfg)?;
            let aligned = align_model_records([
                per_model[0].as_slice(),
                per_model[1].as_slice(),
                per_model[2].as_slice(),
            ])?;
            let labels = label_lookup(&cfg)?;
            let mut frames = Vec::new();
            for (vid, frame, probs) in aligned {
                let label = *labels
                    .get(&(vid.to_string(), frame))
                    .with_context(|| format!("no annotation for {vid}:{frame}"))?;
                frames.push((probs, label));
            }
            let (best, e_total) = ensemble_grid_search(&frames, step)?;
            let w = best.weights;
            println!("best weights: static={} gru={} transformer={}", w[0], w[1], w[2]);
            println!("search-split e_total = {e_total:.6}");
            std::fs::create_dir_all(&cfg.output_dir)?;
            let out = cfg.output_dir.join("ensemble_weights.txt");
            std::fs::write(&out, format!("ensemble.weights = {},{},{}\n", w[0], w[1], w[2]))?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

/// `synth` writes `<root>/annotations` and `<root>/frames`; the config's data
/// paths must name exactly that layout so later commands find the output.
fn synth_root(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let fr = &cfg.frames_root;
    let ar = &cfg.annotations_root;
    let root = fr.parent().map(Path::to_path_buf);
    if fr.file_name().map(|n| n == "frames") != Some(true)
        || ar.file_name().map(|n| n == "annotations") != Some(true)
        || root.as_deref() != ar.parent()
        || root.is_none()
    {
        bail!(
            "synth needs paths.frames_root = <root>/frames and \
             paths.annotations_root = <root>/annotations (got {fr:?} and {ar:?})"
        );
    }
    Ok(root.unwrap())
}

fn train_one(cfg: &RunConfig, kind: HeadKind) -> anyhow::Result<()> {
    let dir = model_dir(cfg, kind);
    std::fs::create_dir_all(&dir)?;
    let mut bundle = ModelBundle::new(cfg.backbone.clone(), head_config(cfg, kind), cfg.train.seed)?;
    let mut dataset = load_dataset(cfg)?;
    let mut hooks = FitHooks {
        checkpoint_dir: Some(dir.clone()),
        log_path: Some(dir.join("train.log")),
        ..Default::default()
    };
    println!("training {kind} model ({} videos)", dataset.annotations.len());
    let logs = fit(&mut bundle, &mut dataset, &cfg.train, &mut hooks)?;
    for log in &logs {
        println!("  {log}");
    }
    bundle.save_weights(
        &dir.join("model.ferw"),
        serde_json::json!({ "model": kind.to_string(), "epochs": cfg.train.epochs }),
    )?;
    println!("wrote {}", dir.join("model.ferw").display());
    Ok(())
}

fn predict_one(cfg: &RunConfig, kind: HeadKind) -> anyhow::Result<Vec<PredictionRecord>> {
    let dir = model_dir(cfg, kind);
    let weights = dir.join("model.ferw");
    let mut bundle = ModelBundle::new(cfg.backbone.clone(), head_config(cfg, kind), cfg.train.seed)?;
    bundle
        .load_weights(&weights, false)
        .with_context(|| format!("loading {} (run `fer train` first?)", weights.display()))?;

    let mut dataset = load_dataset(cfg)?;
    let mut records = Vec::new();
    for ann in &dataset.annotations {
        let probs = predict_video(&bundle, ann, &mut dataset.cache, cfg.train.window_t)?;
        for (f, p) in probs.into_iter().enumerate() {
            records.push(PredictionRecord::from_probs(&ann.video_id, f, p));
        }
    }
    let csv = dir.join("predictions.csv");
    write_predictions(&records, &csv)?;
    println!("wrote {} ({} rows)", csv.display(), records.len());
    Ok(records)
}

fn read_all_model_predictions(cfg: &RunConfig) -> anyhow::Result<[Vec<PredictionRecord>; 3]> {
    let mut out = Vec::new();
    for kind in [HeadKind::Static, HeadKind::Gru, HeadKind::Transformer] {
        let csv = model_dir(cfg, kind).join("predictions.csv");
        out.push(
            read_predictions(&csv)
                .with_context(|| format!("reading {} (run `fer predict` first?)", csv.display()))?,
        );
    }
    Ok(out.try_into().expect("three models"))
}

fn write_ensemble(cfg: &RunConfig, weights: &EnsembleConfig) -> anyhow::Result<()> {
    let per_model = read_all_model_predictions(cfg)?;
    let aligned = align_model_records([
        per_model[0].as_slice(),
        per_model[1].as_slice(),
        per_model[2].as_slice(),
    ])?;
    let mut records = Vec::with_capacity(aligned.len());
    for (vid, frame, probs) in aligned {
        records.push(PredictionRecord::from_probs(
            vid,
            frame,
            ensemble_combine(&probs, weights)?,
        ));
    }
    let dir = cfg.output_dir.join("ensemble");
    std::fs::create_dir_all(&dir)?;
    let csv = dir.join("predictions.csv");
    write_predictions(&records, &csv)?;
    println!("wrote {} ({} rows)", csv.display(), records.len());
    Ok(())
}

fn evaluate_one(cfg: &RunConfig, csv: &Path, name: &str) -> anyhow::Result<()> {
    let report = evaluate_files(csv, &cfg.annotations_root)
        .with_context(|| format!("evaluating {}", csv.display()))?;
    println!("== {name} ==");
    println!("{report}");
    println!("{}", report.to_structured_text());
    if let Some(parent) = csv.parent() {
        std::fs::write(parent.join("metrics.txt"), report.to_structured_text())?;
    }
    Ok(())
}

fn label_lookup(
    cfg: &RunConfig,
) -> anyhow::Result<std::collections::HashMap<(String, usize), i64>> {
    let mut map = std::collections::HashMap::new();
    for ann in dataio::load_annotations(&cfg.annotations_root, &cfg.frames_root)? {
        for (f, &l) in ann.labels.iter().enumerate() {
            map.insert((ann.video_id.clone(), f), l);
        }
    }
    Ok(map)
}
