//! Command entry points: `train`, `propagate`, `eval`, `synth`. Every command
//! echoes its resolved configuration into a `run_manifest.json` beside its
//! outputs, sufficient to replay the run.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::colorspace::Image;
use crate::data::{
    generate, load_mask, load_sequence, preset_corpus, preset_drift, preset_occlusion,
    preset_translation, save_mask, save_sequence, SyntheticSpec,
};
use crate::encoder::load_checkpoint;
use crate::error::{Error, Result};
use crate::memory::BankPolicy;
use crate::metrics::{build_report, default_tolerance, evaluate_sequence, SequenceScore};
use crate::propagation::{propagate_sequence, PropagationConfig};
use crate::train::{train, RunConfig, TrainDataset};

#[derive(Debug, Parser)]
#[command(name = "memtrack", about = "Self-supervised dense tracker: train, propagate, eval, synth")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the feature encoder on a directory of frame sequences.
    Train(TrainArgs),
    /// Propagate a first-frame mask through a frame directory.
    Propagate(PropagateArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic moving-shapes dataset.
    Synth(SynthArgs),
}

fn parse_key_val(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of sequences (each `<seq>/frames/*.png` or `<seq>/*.png`).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, loss log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config overrides, repeatable: --set key=value.
    #[arg(long = "set", value_parser = parse_key_val)]
    pub overrides: Vec<(String, String)>,
    /// Seed override (shorthand for --set seed=N).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    /// Trained encoder checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of frames to track through.
    #[arg(long)]
    pub frames: PathBuf,
    /// First-frame instance mask (8-bit single-channel, label indices).
    #[arg(long)]
    pub mask0: PathBuf,
    /// Output directory for per-frame masks.
    #[arg(long)]
    pub out: PathBuf,
    /// Square size frames are resized to (0 keeps native dimensions).
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Propagation mode override: soft or hard.
    #[arg(long)]
    pub mode: Option<String>,
    /// Memory policy override: default, only_short, only_long, sized:n,m.
    #[arg(long)]
    pub memory: Option<String>,
    /// Window radius override (feature cells).
    #[arg(long)]
    pub radius: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted masks, one subdirectory per sequence.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks, one subdirectory per sequence.
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory for scores.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional split file: lines of `<sequence> seen|unseen`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Boundary tolerance in pixels (default: 0.8% of the image diagonal).
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON spec file (a single spec or an array of specs).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Built-in preset: corpus, translation, occlusion or drift.
    #[arg(long)]
    pub preset: Option<String>,
    /// Base seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of sequences (presets only).
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => run_train(&args),
        Command::Propagate(args) => run_propagate(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Synth(args) => run_synth(&args),
    }
}

fn write_manifest(out_dir: &Path, manifest: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(out_dir.join("run_manifest.json"), text)?;
    Ok(())
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|_| Error::MissingFile(dir.to_path_buf()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn frames_dir_of(seq_dir: &Path) -> PathBuf {
    let nested = seq_dir.join("frames");
    if nested.is_dir() {
        nested
    } else {
        seq_dir.to_path_buf()
    }
}

fn masks_dir_of(seq_dir: &Path) -> PathBuf {
    let nested = seq_dir.join("masks");
    if nested.is_dir() {
        nested
    } else {
        seq_dir.to_path_buf()
    }
}

/// Build the resolved `RunConfig` from defaults, config file, overrides and
/// the seed flag, in that order.
pub fn resolve_config(
    config_path: Option<&Path>,
    overrides: &[(String, String)],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        cfg.apply_file(&text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), &args.overrides, args.seed)?;
    let target = if cfg.frame_size == 0 { None } else { Some(cfg.frame_size) };
    let seq_dirs = sorted_subdirs(&args.data)?;
    if seq_dirs.is_empty() {
        return Err(Error::invalid(format!("no sequence directories in {}", args.data.display())));
    }
    let mut frame_lists: Vec<Vec<Image>> = Vec::with_capacity(seq_dirs.len());
    for dir in &seq_dirs {
        frame_lists.push(load_sequence(&frames_dir_of(dir), None, target)?.frames);
    }
    let dataset = TrainDataset::from_frame_lists(&frame_lists, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let report = train(&cfg, &dataset, &args.out)?;
    write_manifest(
        &args.out,
        &serde_json::json!({
            "command": "train",
            "config": cfg,
            "data": args.data.display().to_string(),
            "sequences": seq_dirs.len(),
            "checkpoint": report.checkpoint.display().to_string(),
            "phase1_checkpoint": report.phase1_checkpoint.display().to_string(),
            "loss_log": args.out.join("loss.csv").display().to_string(),
        }),
    )?;
    println!(
        "trained {} + {} steps on {} sequences -> {}",
        cfg.phase1_steps,
        cfg.phase2_steps,
        seq_dirs.len(),
        report.checkpoint.display()
    );
    Ok(())
}

pub fn run_propagate(args: &PropagateArgs) -> Result<()> {
    let (encoder, meta) = load_checkpoint(&args.checkpoint)?;
    let mut cfg = PropagationConfig::default();
    if let Some(space) = meta.get("input_space") {
        cfg.input_space = serde_json::from_value(space.clone())?;
    }
    if let Some(r) = meta.get("window_radius").and_then(|v| v.as_u64()) {
        cfg.radius = r as usize;
    }
    if let Some(m) = meta.get("memory") {
        cfg.policy = serde_json::from_value(m.clone())?;
    }
    if let Some(m) = meta.get("mode") {
        cfg.mode = serde_json::from_value(m.clone())?;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse()?;
    }
    if let Some(memory) = &args.memory {
        cfg.policy = BankPolicy::parse(memory)?;
    }
    if let Some(radius) = args.radius {
        cfg.radius = radius;
    }

    let target = if args.size == 0 { None } else { Some(args.size) };
    let loaded = load_sequence(&args.frames, None, target)?;
    if !args.mask0.is_file() {
        return Err(Error::MissingFile(args.mask0.clone()));
    }
    let mut mask0 = load_mask(&args.mask0)?;
    let (fh, fw) = (loaded.frames[0].height(), loaded.frames[0].width());
    if mask0.dim() != (fh, fw) {
        let buf: image::GrayImage = image::ImageBuffer::from_raw(
            mask0.dim().1 as u32,
            mask0.dim().0 as u32,
            mask0.iter().copied().collect(),
        )
        .expect("buffer matches dimensions");
        let resized =
            image::imageops::resize(&buf, fw as u32, fh as u32, image::imageops::FilterType::Nearest);
        mask0 = ndarray::Array2::from_shape_fn((fh, fw), |(y, x)| {
            resized.get_pixel(x as u32, y as u32)[0]
        });
    }

    let out = propagate_sequence(&encoder, &loaded.frames, &mask0, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    for (name, mask) in loaded.names.iter().zip(&out.masks) {
        save_mask(&args.out.join(format!("{name}.png")), mask)?;
    }
    write_manifest(
        &args.out,
        &serde_json::json!({
            "command": "propagate",
            "checkpoint": args.checkpoint.display().to_string(),
            "frames": args.frames.display().to_string(),
            "mask0": args.mask0.display().to_string(),
            "size": args.size,
            "mode": cfg.mode,
            "memory": cfg.policy,
            "radius": cfg.radius,
            "input_space": cfg.input_space,
            "frame_count": loaded.frames.len(),
        }),
    )?;
    println!("propagated {} frames -> {}", loaded.frames.len(), args.out.display());
    Ok(())
}

fn load_mask_dir(dir: &Path) -> Result<(Vec<String>, Vec<ndarray::Array2<u8>>)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|_| Error::MissingFile(dir.to_path_buf()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| ["png", "jpg", "jpeg", "bmp"].contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no mask files in {}", dir.display())));
    }
    let mut names = Vec::with_capacity(files.len());
    let mut masks = Vec::with_capacity(files.len());
    for f in files {
        names.push(f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string());
        masks.push(load_mask(&f)?);
    }
    Ok((names, masks))
}

fn parse_split_file(path: &Path) -> Result<BTreeMap<String, bool>> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split([' ', '\t', ',']).filter(|p| !p.is_empty());
        let (seq, tag) = (parts.next(), parts.next());
        match (seq, tag) {
            (Some(seq), Some("seen")) => {
                map.insert(seq.to_string(), true);
            }
            (Some(seq), Some("unseen")) => {
                map.insert(seq.to_string(), false);
            }
            _ => {
                return Err(Error::Config(format!(
                    "split file line {}: expected `<sequence> seen|unseen`",
                    lineno + 1
                )))
            }
        }
    }
    Ok(map)
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let gt_dirs = sorted_subdirs(&args.gt)?;
    if gt_dirs.is_empty() {
        return Err(Error::invalid(format!("no sequence directories in {}", args.gt.display())));
    }
    let split = args.split.as_deref().map(parse_split_file).transpose()?;
    let mut all_scores: Vec<SequenceScore> = Vec::new();
    let mut tolerance = args.tolerance;
    for gt_dir in &gt_dirs {
        let name = gt_dir
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid("sequence directory has no name"))?
            .to_string();
        let pred_dir = args.pred.join(&name);
        if !pred_dir.is_dir() {
            return Err(Error::invalid(format!(
                "no predictions for sequence `{name}` under {}",
                args.pred.display()
            )));
        }
        let (_, gt_masks) = load_mask_dir(&masks_dir_of(gt_dir))?;
        let (_, pred_masks) = load_mask_dir(&masks_dir_of(&pred_dir))?;
        if pred_masks.len() != gt_masks.len() {
            return Err(Error::shape(format!(
                "sequence `{name}`: {} predicted vs {} ground-truth masks",
                pred_masks.len(),
                gt_masks.len()
            )));
        }
        let tol = *tolerance.get_or_insert_with(|| {
            let (h, w) = gt_masks[0].dim();
            default_tolerance(h, w)
        });
        all_scores.extend(evaluate_sequence(&name, &pred_masks, &gt_masks, tol)?);
    }
    let report = build_report(all_scores, split.as_ref())?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("scores.csv"), report.to_csv())?;
    let mut summary = serde_json::to_value(&report)?;
    if let Some(obj) = summary.as_object_mut() {
        obj.remove("scores");
    }
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(args.out.join("summary.json"), text)?;
    write_manifest(
        &args.out,
        &serde_json::json!({
            "command": "eval",
            "pred": args.pred.display().to_string(),
            "gt": args.gt.display().to_string(),
            "split": args.split.as_ref().map(|p| p.display().to_string()),
            "tolerance": tolerance,
            "sequences": gt_dirs.len(),
        }),
    )?;
    println!(
        "J {:.4}  F {:.4}{}",
        report.j_overall,
        report.f_overall,
        report
            .split
            .map(|s| format!("  gen-gap {:.4}", s.gen_gap))
            .unwrap_or_default()
    );
    Ok(())
}

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    let specs: Vec<SyntheticSpec> = match (&args.spec, &args.preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.clone()))?;
            match serde_json::from_str::<Vec<SyntheticSpec>>(&text) {
                Ok(v) => v,
                Err(_) => vec![serde_json::from_str::<SyntheticSpec>(&text)?],
            }
        }
        (None, Some(preset)) => match preset.as_str() {
            "corpus" => preset_corpus(args.seed, args.count.max(1)),
            "translation" => (0..args.count.max(1))
                .map(|i| preset_translation(args.seed + i as u64))
                .collect(),
            "occlusion" => (0..args.count.max(1))
                .map(|i| preset_occlusion(args.seed + i as u64))
                .collect(),
            "drift" => (0..args.count.max(1))
                .map(|i| preset_drift(args.seed + i as u64))
                .collect(),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        },
        _ => {
            return Err(Error::Config(
                "synth needs exactly one of --spec or --preset".into(),
            ))
        }
    };
    std::fs::create_dir_all(&args.out)?;
    for (i, spec) in specs.iter().enumerate() {
        let seq = generate(spec)?;
        let dir = args.out.join(format!("seq_{i:03}"));
        save_sequence(&dir, &seq.frames, Some(&seq.masks))?;
        let mut truth = serde_json::to_string_pretty(&seq.truth)?;
        truth.push('\n');
        std::fs::write(dir.join("truth.json"), truth)?;
    }
    let mut echo = serde_json::to_string_pretty(&specs)?;
    echo.push('\n');
    std::fs::write(args.out.join("spec.json"), echo)?;
    write_manifest(
        &args.out,
        &serde_json::json!({
            "command": "synth",
            "preset": args.preset,
            "spec_file": args.spec.as_ref().map(|p| p.display().to_string()),
            "seed": args.seed,
            "sequences": specs.len(),
        }),
    )?;
    println!("wrote {} sequences -> {}", specs.len(), args.out.display());
    Ok(())
}
