//! Checkpoint format round trips and end-to-end CLI command behavior.

mod common;

use std::fs;
use std::path::PathBuf;

use dseg::checkpoint::{decode, encode, load_checkpoint, save_checkpoint, CheckpointError};
use dseg::cli::{
    cmd_eval, cmd_predict, cmd_tile, cmd_train, env_seed, load_run_config, predict_mask,
    synthetic_samples, CliError, EvalArgs, PredictArgs, TileArgs, TrainArgs,
};
use dseg::data::{generate_synthetic_pair, save_gray_png, save_mask_png, Split, SyntheticSpec};
use dseg::gradcheck::seeded_tensor;
use dseg::model::{build_model, Arch, ModelSpec};
use dseg::tensor::Ctx;

fn small_model(arch: Arch, seed: u64) -> dseg::model::Model<f32> {
    build_model(&ModelSpec::with_base_width(arch, 2), seed).unwrap()
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

#[test]
fn save_load_save_is_byte_identical() {
    for arch in [Arch::Proposed, Arch::Unet] {
        let model = small_model(arch, 3);
        // Make buffers non-trivial so they must round-trip too.
        let x = seeded_tensor::<f32>(1, &[2, 1, 32, 32]);
        let ctx = Ctx { tape: None, mode: dseg::tensor::Mode::Train };
        model.forward(&ctx, &x).unwrap();

        let bytes = encode(&model);
        let loaded = decode(&bytes).unwrap();
        assert_eq!(encode(&loaded), bytes, "{arch:?}: re-encode must be byte-identical");

        // The loaded model computes the same function.
        let a = model.forward(&Ctx::eval(), &x).unwrap().to_vec();
        let b = loaded.forward(&Ctx::eval(), &x).unwrap().to_vec();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn checkpoint_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = small_model(Arch::Proposed, 5);
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.spec, model.spec);
    for ((na, ta, _), (nb, tb, _)) in model.params.iter().zip(loaded.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.to_vec(), tb.to_vec());
    }
}

#[test]
fn corrupt_magic_is_rejected_at_offset_zero() {
    let mut bytes = encode(&small_model(Arch::Unet, 0));
    bytes[0] = b'X';
    match decode(&bytes).map(|_| ()) {
        Err(CheckpointError::BadMagic) => {
            assert!(CheckpointError::BadMagic.to_string().contains("offset 0"));
        }
        other => panic!("expected BadMagic, got {other:?}"),
    }
}

#[test]
fn future_version_is_rejected() {
    let mut bytes = encode(&small_model(Arch::Unet, 0));
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(decode(&bytes), Err(CheckpointError::Version(2))));
}

#[test]
fn truncation_reports_offset() {
    let bytes = encode(&small_model(Arch::Unet, 0));
    let cut = bytes.len() - 7;
    match decode(&bytes[..cut]).map(|_| ()) {
        Err(CheckpointError::Truncated { offset, needed }) => {
            assert!(offset <= cut);
            assert!(needed > 0);
        }
        other => panic!("expected Truncated, got {other:?}"),
    }
    // Empty buffer fails immediately.
    assert!(matches!(decode(&[]), Err(CheckpointError::Truncated { offset: 0, .. })));
}

#[test]
fn undercount_means_missing_entries() {
    let model = small_model(Arch::Unet, 0);
    let mut bytes = encode(&model);
    // Entry count lives after magic(4) + version(4) + arch(1) + 12 u32 fields.
    let pos = 4 + 4 + 1 + 12 * 4;
    let count = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
    bytes[pos..pos + 4].copy_from_slice(&(count - 1).to_le_bytes());
    // The reader stops one entry early; the remaining bytes are ignored and
    // the model is left incomplete.
    assert!(matches!(decode(&bytes), Err(CheckpointError::MissingEntries(1))));
}

#[test]
fn renamed_entry_is_unknown() {
    let model = small_model(Arch::Unet, 0);
    let mut bytes = encode(&model);
    // First entry name starts right after the header; flip a letter.
    let pos = 4 + 4 + 1 + 12 * 4 + 4 + 2;
    bytes[pos] = b'z';
    assert!(matches!(decode(&bytes), Err(CheckpointError::UnknownEntry(_))));
}

// ---------------------------------------------------------------------------
// CLI: tile
// ---------------------------------------------------------------------------

fn write_corpus(dir: &std::path::Path, n: usize) -> (PathBuf, PathBuf) {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for i in 0..n {
        let img = generate_synthetic_pair(&SyntheticSpec {
            canvas: 160,
            seed: 900 + i as u64,
            ..SyntheticSpec::default()
        });
        let id = format!("sample_{i:02}");
        save_gray_png(&img.pixels, img.width, img.height, &images.join(format!("{id}.png"))).unwrap();
        save_mask_png(img.mask.as_ref().unwrap(), img.width, img.height, &masks.join(format!("{id}.png")))
            .unwrap();
    }
    (images, masks)
}

#[test]
fn cmd_tile_writes_deterministic_splits() {
    let dir = tempfile::tempdir().unwrap();
    let (images, masks) = write_corpus(dir.path(), 5);
    let run = |out: PathBuf| {
        cmd_tile(&TileArgs { images: images.clone(), masks: masks.clone(), out: out.clone(), tile: 128, seed: 7 })
            .unwrap();
        let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
        let mut files: Vec<String> = Vec::new();
        for split in ["train", "val", "test"] {
            let d = out.join(split);
            if d.exists() {
                for e in fs::read_dir(&d).unwrap() {
                    files.push(format!("{split}/{}", e.unwrap().file_name().to_string_lossy()));
                }
            }
        }
        files.sort();
        (manifest, files)
    };
    let a = run(dir.path().join("out_a"));
    let b = run(dir.path().join("out_b"));
    assert_eq!(a, b);
    // 5 sources -> 4/1/1? No: cuts at floor(0.7*5+0.5)=4 and floor(0.9*5+0.5)=5.
    let counts: Vec<&str> = a.0.lines().map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(counts.iter().filter(|s| **s == "train").count(), 4);
    assert_eq!(counts.iter().filter(|s| **s == "val").count(), 1);
    // Every tile of a 160x160 image is 128x128: 2x2 grid, image + mask pairs.
    assert_eq!(a.1.len(), 5 * 4 * 2);
    assert!(a.1.iter().all(|f| f.ends_with(".png")));
}

#[test]
fn cmd_tile_missing_mask_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (images, masks) = write_corpus(dir.path(), 3);
    fs::remove_file(masks.join("sample_01.png")).unwrap();
    let err = cmd_tile(&TileArgs {
        images,
        masks,
        out: dir.path().join("out"),
        tile: 128,
        seed: 0,
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("sample_01"));
}

// ---------------------------------------------------------------------------
// CLI: train / eval / predict
// ---------------------------------------------------------------------------

fn tiny_train_config(dir: &std::path::Path) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        "arch=unet\nbase_width=2\ntile=32\nepochs=2\nlr0=0.001\nseed=11\n",
    )
    .unwrap();
    path
}

fn train_args(cfg: PathBuf, out: PathBuf, log: PathBuf) -> TrainArgs {
    TrainArgs {
        config: Some(cfg),
        arch: None,
        tiles: None,
        synthetic: Some(6),
        epochs: None,
        base_width: None,
        seed: None,
        out,
        log,
    }
}

#[test]
fn cmd_train_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(dir.path());
    let run = |tag: &str| {
        let out = dir.path().join(format!("{tag}.ckpt"));
        let log = dir.path().join(format!("{tag}.csv"));
        let report = cmd_train(&train_args(cfg.clone(), out.clone(), log.clone())).unwrap();
        (fs::read(out).unwrap(), fs::read(log).unwrap(), report.epochs_run)
    };
    let (ckpt_a, log_a, epochs_a) = run("a");
    let (ckpt_b, log_b, _) = run("b");
    assert_eq!(epochs_a, 2);
    assert_eq!(ckpt_a, ckpt_b, "checkpoints must be byte-identical across reruns");
    assert_eq!(log_a, log_b, "CSV logs must be byte-identical across reruns");
    let text = String::from_utf8(log_a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,lr,train_loss,val_dsc"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn cmd_train_requires_exactly_one_data_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(dir.path());
    let mut args = train_args(cfg, dir.path().join("x.ckpt"), dir.path().join("x.csv"));
    args.synthetic = None;
    let err = cmd_train(&args).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn cmd_train_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(dir.path());
    let mut args = train_args(cfg, dir.path().join("o.ckpt"), dir.path().join("o.csv"));
    args.epochs = Some(1);
    let report = cmd_train(&args).unwrap();
    assert_eq!(report.epochs_run, 1);
    // The saved checkpoint records the configured architecture.
    let model = load_checkpoint(&dir.path().join("o.ckpt")).unwrap();
    assert_eq!(model.spec.arch, Arch::Unet);
    assert_eq!(model.spec.base_width, 2);
}

#[test]
fn predict_roundtrip_dimensions_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(dir.path());
    let ckpt = dir.path().join("p.ckpt");
    cmd_train(&train_args(cfg, ckpt.clone(), dir.path().join("p.csv"))).unwrap();

    // A non-multiple-of-32 image exercises padding and stitching.
    let img = generate_synthetic_pair(&SyntheticSpec { canvas: 50, seed: 77, ..SyntheticSpec::default() });
    let img_path = dir.path().join("input.png");
    save_gray_png(&img.pixels, img.width, img.height, &img_path).unwrap();

    let out = dir.path().join("pred.png");
    cmd_predict(&PredictArgs { ckpt: ckpt.clone(), image: img_path, out: out.clone(), tile: 32, threshold: 0.5 })
        .unwrap();
    let (w, h, mask) = dseg::data::load_mask_png(&out).unwrap();
    assert_eq!((w, h), (50, 50));
    assert!(mask.iter().all(|&v| v <= 1));

    // Direct in-process prediction agrees with the file-based run.
    let model = load_checkpoint(&ckpt).unwrap();
    let direct = predict_mask(&model, &img, 32, 0.5).unwrap();
    assert_eq!(direct, mask);
}

#[test]
fn cmd_eval_reports_mean_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    // Build a tiled corpus at 128 and a matching model.
    let (images, masks) = write_corpus(dir.path(), 5);
    let tiles = dir.path().join("tiles");
    cmd_tile(&TileArgs { images, masks, out: tiles.clone(), tile: 128, seed: 7 }).unwrap();
    let model = small_model(Arch::Unet, 1);
    let ckpt = dir.path().join("e.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();

    let csv = dir.path().join("per_tile.csv");
    let (mean, std) = cmd_eval(&EvalArgs {
        ckpt,
        tiles,
        split: Split::Val,
        out: Some(csv.clone()),
        threshold: 0.5,
    })
    .unwrap();
    assert!((0.0..=1.0).contains(&mean));
    assert!(std >= 0.0);
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("tile,dsc"));
    assert_eq!(lines.count(), 4, "one val source image -> four 128x128 tiles");
}

#[test]
fn cmd_eval_missing_split_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(Arch::Unet, 0);
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let err = cmd_eval(&EvalArgs {
        ckpt,
        tiles: dir.path().join("nope"),
        split: Split::Test,
        out: None,
        threshold: 0.5,
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

// ---------------------------------------------------------------------------
// config and seed plumbing
// ---------------------------------------------------------------------------

#[test]
fn seed_precedence_flag_beats_file_beats_env() {
    // Run serially inside one test to avoid env races.
    std::env::set_var("DSEG_SEED", "123");
    assert_eq!(env_seed(), Some(123));
    let cfg = load_run_config(None).unwrap();
    assert_eq!(cfg.train.seed, 123);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cfg");
    fs::write(&path, "seed=456\n").unwrap();
    let cfg = load_run_config(Some(&path)).unwrap();
    assert_eq!(cfg.train.seed, 456, "file overrides env");

    fs::write(&path, "epochs=1\n").unwrap();
    let cfg = load_run_config(Some(&path)).unwrap();
    assert_eq!(cfg.train.seed, 123, "silent file keeps env seed");

    std::env::remove_var("DSEG_SEED");
    assert_eq!(env_seed(), None);
    let cfg = load_run_config(None).unwrap();
    assert_eq!(cfg.train.seed, 0, "default seed without flag, file, or env");
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "no_such_key=1\n").unwrap();
    let err = load_run_config(Some(&path)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("no_such_key"));
    match load_run_config(Some(&dir.path().join("missing.cfg"))).unwrap_err() {
        CliError::Runtime(_) => {}
        other => panic!("missing config file is a runtime error, got {other:?}"),
    }
}

#[test]
fn synthetic_samples_split_sizes() {
    let (train, val) = synthetic_samples(10, 32, 0).unwrap();
    assert_eq!(train.len(), 7);
    assert_eq!(val.len(), 2);
    // Determinism across calls.
    let (train2, _) = synthetic_samples(10, 32, 0).unwrap();
    for (a, b) in train.iter().zip(&train2) {
        assert_eq!(a.image.to_vec(), b.image.to_vec());
    }
}
