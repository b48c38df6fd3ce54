//! Command implementations behind the `dseg` binary: tile, train, eval,
//! predict. Every command is deterministic given (config, seed).
//!
//! Exit codes: 0 success, 1 runtime failure (NaN, I/O), 2 usage/config error.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::data::{
    generate_synthetic_pair, load_grayscale_png, load_mask_png, save_gray_png, save_mask_png,
    split_dataset, stitch_tiles, tile_image, DataError, SourceImage, Split, SyntheticSpec,
};
use crate::model::{build_model, Arch, Model, ModelError};
use crate::tensor::{Ctx, Tensor};
use crate::train::{evaluate, fit, Sample, TrainError, TrainReport};

/// Error with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad usage or configuration: exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Runtime failure (I/O, NaN): exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptyDataset(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Seed precedence: CLI flag > config file > DSEG_SEED env > 0.
pub fn env_seed() -> Option<u64> {
    std::env::var("DSEG_SEED").ok().and_then(|v| v.parse().ok())
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read directory {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

// ---------------------------------------------------------------------------
// tile
// ---------------------------------------------------------------------------

pub struct TileArgs {
    pub images: PathBuf,
    pub masks: PathBuf,
    pub out: PathBuf,
    pub tile: usize,
    pub seed: u64,
}

pub fn cmd_tile(args: &TileArgs) -> Result<(), CliError> {
    let image_paths = list_pngs(&args.images)?;
    if image_paths.is_empty() {
        return Err(CliError::Usage(format!("no .png images in {}", args.images.display())));
    }
    let mut sources = Vec::new();
    let mut missing = Vec::new();
    for path in &image_paths {
        let img = load_grayscale_png(path)?;
        let mask_path = args.masks.join(format!("{}.png", img.id));
        if !mask_path.exists() {
            missing.push(img.id.clone());
            continue;
        }
        let (mw, mh, mask) = load_mask_png(&mask_path)?;
        if (mw, mh) != (img.width, img.height) {
            return Err(CliError::Usage(format!(
                "mask for {} is {mw}x{mh} but the image is {}x{}",
                img.id, img.width, img.height
            )));
        }
        sources.push(img.with_mask(mask)?);
    }
    if !missing.is_empty() {
        return Err(CliError::Usage(format!("missing masks for image ids: {}", missing.join(", "))));
    }
    let ids: Vec<String> = sources.iter().map(|s| s.id.clone()).collect();
    let assignment = split_dataset(&ids, (0.70, 0.20, 0.10), args.seed)?;
    let split_of = |id: &str| assignment.iter().find(|(i, _)| i == id).map(|(_, s)| *s).unwrap();

    let mut counts = [0usize; 3];
    for src in &sources {
        let split = split_of(&src.id);
        let (tiles, _grid) = tile_image(src, args.tile, 0)?;
        for tile in &tiles {
            let dir = args.out.join(split.as_str());
            let stem = format!("{}_{}_{}", tile.source_id, tile.row, tile.col);
            let px: Vec<u8> =
                tile.image.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
            save_gray_png(&px, args.tile, args.tile, &dir.join(format!("{stem}.png")))?;
            save_mask_png(
                tile.mask.as_ref().expect("tiling kept the mask"),
                args.tile,
                args.tile,
                &dir.join(format!("{stem}.mask.png")),
            )?;
            counts[match split {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            }] += 1;
        }
    }
    let mut manifest = String::new();
    for (id, split) in &assignment {
        writeln!(manifest, "{id},{}", split.as_str()).unwrap();
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("manifest.txt"), manifest)?;
    println!(
        "tiled {} images: {} train / {} val / {} test tiles",
        sources.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub arch: Option<String>,
    pub tiles: Option<PathBuf>,
    pub synthetic: Option<usize>,
    pub epochs: Option<usize>,
    pub base_width: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub log: PathBuf,
}

fn apply_overrides(cfg: &mut RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    if let Some(arch) = &args.arch {
        cfg.arch = Arch::parse(arch)?;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(bw) = args.base_width {
        cfg.base_width = bw;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    Ok(())
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(seed) = env_seed() {
        cfg.train.seed = seed;
    }
    if let Some(path) = path {
        // Parse on top of the env-seeded defaults: file values override the
        // env seed, silence keeps it.
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    Ok(cfg)
}

fn tile_to_sample(image: &[f32], mask: &[u8], side: usize) -> Sample<f32> {
    let mask_f: Vec<f32> = mask.iter().map(|&v| v as f32).collect();
    Sample {
        image: Tensor::from_vec(&[1, 1, side, side], image.to_vec()).unwrap(),
        mask: Tensor::from_vec(&[1, 1, side, side], mask_f).unwrap(),
    }
}

/// Load the tile pairs of one split from a `cmd_tile` output directory.
pub fn load_split_samples(tiles_dir: &Path, split: Split, side: usize) -> Result<Vec<Sample<f32>>, CliError> {
    let dir = tiles_dir.join(split.as_str());
    if !dir.exists() {
        return Err(CliError::Usage(format!("split directory {} does not exist", dir.display())));
    }
    let mut samples = Vec::new();
    for path in list_pngs(&dir)? {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".mask.png") {
            continue;
        }
        let img = load_grayscale_png(&path)?;
        if (img.width, img.height) != (side, side) {
            return Err(CliError::Usage(format!(
                "tile {} is {}x{}, expected {side}x{side}",
                path.display(),
                img.width,
                img.height
            )));
        }
        let mask_path = dir.join(format!("{}.mask.png", img.id));
        let (_, _, mask) = load_mask_png(&mask_path)?;
        let image: Vec<f32> = img.pixels.iter().map(|&v| v as f32 / 255.0).collect();
        samples.push(tile_to_sample(&image, &mask, side));
    }
    if samples.is_empty() {
        return Err(CliError::Usage(format!("no tiles found under {}", dir.display())));
    }
    Ok(samples)
}

/// Deterministic synthetic corpus: `n` generated source images with a
/// source-level 70/20/10 split.
pub fn synthetic_samples(
    n: usize,
    canvas: usize,
    seed: u64,
) -> Result<(Vec<Sample<f32>>, Vec<Sample<f32>>), CliError> {
    let sources: Vec<SourceImage> = (0..n)
        .map(|i| {
            generate_synthetic_pair(&SyntheticSpec {
                canvas,
                seed: seed.wrapping_add(i as u64),
                ..SyntheticSpec::default()
            })
        })
        .collect();
    let ids: Vec<String> = sources.iter().map(|s| s.id.clone()).collect();
    let assignment = split_dataset(&ids, (0.70, 0.20, 0.10), seed)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for src in &sources {
        let split = assignment.iter().find(|(i, _)| *i == src.id).map(|(_, s)| *s).unwrap();
        let image: Vec<f32> = src.pixels.iter().map(|&v| v as f32 / 255.0).collect();
        let sample = tile_to_sample(&image, src.mask.as_ref().unwrap(), canvas);
        match split {
            Split::Train => train.push(sample),
            Split::Val => val.push(sample),
            Split::Test => {}
        }
    }
    Ok((train, val))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport, CliError> {
    let mut cfg = load_run_config(args.config.as_deref())?;
    apply_overrides(&mut cfg, args)?;
    let (train_set, val_set) = match (&args.tiles, args.synthetic) {
        (Some(dir), None) => {
            let train = load_split_samples(dir, Split::Train, cfg.tile)?;
            let val = load_split_samples(dir, Split::Val, cfg.tile)?;
            (train, val)
        }
        (None, Some(n)) => synthetic_samples(n, cfg.tile, cfg.train.seed)?,
        _ => {
            return Err(CliError::Usage(
                "exactly one of --tiles and --synthetic is required".into(),
            ))
        }
    };

    let spec = cfg.model_spec();
    let model = build_model::<f32>(&spec, cfg.train.seed)?;
    println!(
        "training {} (base width {}, {} trainable parameters) on {} tiles, validating on {}",
        spec.arch.as_str(),
        cfg.base_width,
        model.param_count(),
        train_set.len(),
        val_set.len()
    );

    let mut log = std::io::BufWriter::new(std::fs::File::create(&args.log)?);
    writeln!(log, "epoch,lr,train_loss,val_dsc")?;
    let mut log_err = None;
    let report = fit(&model, &train_set, &val_set, &cfg.train, |ev| {
        if let Err(e) = writeln!(
            log,
            "{},{:.8},{:.6},{:.6}",
            ev.epoch, ev.lr, ev.train_loss, ev.val_dsc
        ) {
            log_err = Some(e);
            return false;
        }
        true
    })?;
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    save_checkpoint(&model, &args.out)?;
    println!(
        "done: {} epochs, best val DSC {:.4} at epoch {}, checkpoint {}",
        report.epochs_run,
        report.best_val_dsc,
        report.best_epoch,
        args.out.display()
    );
    Ok(report)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub tiles: PathBuf,
    pub split: Split,
    pub out: Option<PathBuf>,
    pub threshold: f64,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(f64, f64), CliError> {
    let model = load_checkpoint(&args.ckpt)?;
    let side = 128;
    let samples = load_split_samples(&args.tiles, args.split, side)?;
    let (mean, per_tile) = evaluate(&model, &samples, args.threshold)?;
    let n = per_tile.len() as f64;
    // Per-image sample standard deviation; the population is the tile set.
    let std = if per_tile.len() > 1 {
        (per_tile.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    if let Some(out) = &args.out {
        let mut csv = String::from("tile,dsc\n");
        for (i, d) in per_tile.iter().enumerate() {
            writeln!(csv, "{i},{d:.6}").unwrap();
        }
        std::fs::write(out, csv)?;
    }
    println!("{} split: mean DSC {:.5} +/- {:.5} over {} tiles", args.split.as_str(), mean, std, per_tile.len());
    Ok((mean, std))
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

pub struct PredictArgs {
    pub ckpt: PathBuf,
    pub image: PathBuf,
    pub out: PathBuf,
    pub tile: usize,
    pub threshold: f64,
}

pub fn predict_mask(model: &Model<f32>, img: &SourceImage, tile: usize, threshold: f64) -> Result<Vec<u8>, CliError> {
    let (tiles, grid) = tile_image(img, tile, 0)?;
    let ctx = Ctx::eval();
    let mut preds = Vec::with_capacity(tiles.len());
    for t in &tiles {
        let input = Tensor::from_vec(&[1, 1, tile, tile], t.image.clone())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let prob = model.forward(&ctx, &input)?;
        let mask: Vec<u8> =
            prob.data().iter().map(|&p| if (p as f64) > threshold { 1 } else { 0 }).collect();
        preds.push((mask, t.row, t.col));
    }
    Ok(stitch_tiles(&preds, &grid)?)
}

pub fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&args.ckpt)?;
    let img = load_grayscale_png(&args.image)?;
    let mask = predict_mask(&model, &img, args.tile, args.threshold)?;
    save_mask_png(&mask, img.width, img.height, &args.out)?;
    println!("wrote {} ({}x{})", args.out.display(), img.width, img.height);
    Ok(())
}
