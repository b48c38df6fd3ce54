//! Data preparation: grayscale ingest, 128x128 tiling with reflect padding,
//! leakage-free source-level splitting, prediction stitching, and a synthetic
//! fractograph generator for desk-scale runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error on {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("mask validation: {0}")]
    MaskValidation(String),
    #[error("tiling config error: {0}")]
    Config(String),
    #[error("image too small to tile: {0}")]
    TooSmall(String),
    #[error("incomplete tile grid, missing cells {0:?}")]
    IncompleteGrid(Vec<(usize, usize)>),
}

/// One grayscale source image, optionally with a binary annotation mask.
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major u8 intensities.
    pub pixels: Vec<u8>,
    /// Same-size {0,1} values, 1 = deep dimple.
    pub mask: Option<Vec<u8>>,
}

impl SourceImage {
    pub fn new(id: &str, width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height);
        SourceImage { id: id.to_string(), width, height, pixels, mask: None }
    }

    pub fn with_mask(mut self, mask: Vec<u8>) -> Result<Self, DataError> {
        if mask.len() != self.width * self.height {
            return Err(DataError::MaskValidation(format!(
                "mask size {} does not match image {}x{}",
                mask.len(),
                self.width,
                self.height
            )));
        }
        if let Some(v) = mask.iter().find(|&&v| v > 1) {
            return Err(DataError::MaskValidation(format!("mask values must be 0/1, found {v}")));
        }
        self.mask = Some(mask);
        Ok(self)
    }
}

/// One cut patch: normalized image values, binary mask, and provenance.
#[derive(Debug, Clone)]
pub struct Tile {
    pub image: Vec<f32>,
    pub mask: Option<Vec<u8>>,
    pub source_id: String,
    pub row: usize,
    pub col: usize,
}

/// Grid bookkeeping needed to invert the tiling exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub tile: usize,
    pub rows: usize,
    pub cols: usize,
    pub orig_width: usize,
    pub orig_height: usize,
    pub pad_right: usize,
    pub pad_bottom: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * len - 2 - i
    }
}

/// Cut a source image into a row-major grid of `tile` x `tile` patches,
/// reflect-padding the right/bottom remainders. Pixel values are scaled to
/// [0,1]; the mask channel stays {0,1}.
pub fn tile_image(
    img: &SourceImage,
    tile: usize,
    overlap: usize,
) -> Result<(Vec<Tile>, TileGrid), DataError> {
    if tile == 0 || overlap >= tile {
        return Err(DataError::Config(format!("tile {tile} must exceed overlap {overlap}")));
    }
    if overlap != 0 {
        return Err(DataError::Config("overlapping tiles are not supported".into()));
    }
    let (w, h) = (img.width, img.height);
    let cols = w.div_ceil(tile);
    let rows = h.div_ceil(tile);
    let (pw, ph) = (cols * tile, rows * tile);
    let (pad_right, pad_bottom) = (pw - w, ph - h);
    // Reflect padding (edge excluded) needs pad <= dim-1.
    if pad_right + 1 > w || pad_bottom + 1 > h {
        return Err(DataError::TooSmall(format!(
            "{w}x{h} cannot be reflect-padded to {pw}x{ph}"
        )));
    }
    let mut tiles = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let mut image = Vec::with_capacity(tile * tile);
            let mut mask = img.mask.as_ref().map(|_| Vec::with_capacity(tile * tile));
            for ty in 0..tile {
                let sy = reflect_index(row * tile + ty, h);
                for tx in 0..tile {
                    let sx = reflect_index(col * tile + tx, w);
                    image.push(img.pixels[sy * w + sx] as f32 / 255.0);
                    if let Some(m) = &mut mask {
                        m.push(img.mask.as_ref().unwrap()[sy * w + sx]);
                    }
                }
            }
            tiles.push(Tile { image, mask, source_id: img.id.clone(), row, col });
        }
    }
    Ok((tiles, TileGrid {
        tile,
        rows,
        cols,
        orig_width: w,
        orig_height: h,
        pad_right,
        pad_bottom,
    }))
}

/// Reassemble a complete non-overlapping grid of tile masks and crop back to
/// the original size. Exact inverse of `tile_image` for the mask channel.
pub fn stitch_tiles(
    preds: &[(Vec<u8>, usize, usize)],
    grid: &TileGrid,
) -> Result<Vec<u8>, DataError> {
    let t = grid.tile;
    let (pw, ph) = (grid.cols * t, grid.rows * t);
    let mut canvas = vec![0u8; pw * ph];
    let mut seen = vec![false; grid.rows * grid.cols];
    for (mask, row, col) in preds {
        if *row >= grid.rows || *col >= grid.cols {
            return Err(DataError::Config(format!("tile ({row},{col}) outside {}x{} grid", grid.rows, grid.cols)));
        }
        if mask.len() != t * t {
            return Err(DataError::Config(format!("tile ({row},{col}) has {} values, expected {}", mask.len(), t * t)));
        }
        seen[row * grid.cols + col] = true;
        for ty in 0..t {
            let dst = (row * t + ty) * pw + col * t;
            canvas[dst..dst + t].copy_from_slice(&mask[ty * t..(ty + 1) * t]);
        }
    }
    let missing: Vec<(usize, usize)> = (0..grid.rows)
        .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
        .filter(|(r, c)| !seen[r * grid.cols + c])
        .collect();
    if !missing.is_empty() {
        return Err(DataError::IncompleteGrid(missing));
    }
    let mut out = vec![0u8; grid.orig_width * grid.orig_height];
    for y in 0..grid.orig_height {
        out[y * grid.orig_width..(y + 1) * grid.orig_width]
            .copy_from_slice(&canvas[y * pw..y * pw + grid.orig_width]);
    }
    Ok(out)
}

/// Seeded shuffle of source ids, then contiguous cuts at round(f_train*n) and
/// round((f_train+f_val)*n), nearest with ties up. Assignment is per source
/// image; tiles inherit it.
pub fn split_dataset(
    ids: &[String],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<(String, Split)>, DataError> {
    let n = ids.len();
    if n < 3 {
        return Err(DataError::Config(format!("need at least 3 source images to split, got {n}")));
    }
    let (ft, fv, fs) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fs <= 0.0 || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(DataError::Config("split fractions must be positive and sum to 1".into()));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let cut_train = (ft * n as f64 + 0.5).floor() as usize;
    let cut_val = ((ft + fv) * n as f64 + 0.5).floor() as usize;
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < cut_train {
                Split::Train
            } else if i < cut_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect())
}

/// Parameters of the synthetic fractograph generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub canvas: usize,
    pub n_dimples: (usize, usize),
    pub radius: (f32, f32),
    pub background_level: u8,
    pub dimple_level: u8,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            canvas: 128,
            n_dimples: (4, 10),
            radius: (4.0, 14.0),
            background_level: 185,
            dimple_level: 55,
            noise_sigma: 6.0,
            seed: 0,
        }
    }
}

/// Bright noisy background with dark elliptical dimples; the mask is the
/// union of the ellipse interiors. Bit-reproducible from (spec, seed).
pub fn generate_synthetic_pair(spec: &SyntheticSpec) -> SourceImage {
    let n = spec.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = if spec.n_dimples.1 > spec.n_dimples.0 {
        rng.gen_range(spec.n_dimples.0..=spec.n_dimples.1)
    } else {
        spec.n_dimples.0
    };
    let mut ellipses = Vec::with_capacity(count);
    for _ in 0..count {
        let cx = rng.gen_range(0.0..n as f32);
        let cy = rng.gen_range(0.0..n as f32);
        let rx = rng.gen_range(spec.radius.0..=spec.radius.1);
        let ry = rng.gen_range(spec.radius.0..=spec.radius.1);
        ellipses.push((cx, cy, rx, ry));
    }
    let mut mask = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let inside = ellipses.iter().any(|&(cx, cy, rx, ry)| {
                let dx = (x as f32 + 0.5 - cx) / rx;
                let dy = (y as f32 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            });
            if inside {
                mask[y * n + x] = 1;
            }
        }
    }
    // Box-Muller gaussian noise; one draw per pixel, fixed order.
    let mut pixels = vec![0u8; n * n];
    for i in 0..n * n {
        let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
        let u2: f32 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
        let level = if mask[i] == 1 { spec.dimple_level } else { spec.background_level };
        let v = level as f32 + spec.noise_sigma * z;
        pixels[i] = v.round().clamp(0.0, 255.0) as u8;
    }
    SourceImage {
        id: format!("synthetic_{:04}", spec.seed),
        width: n,
        height: n,
        pixels,
        mask: Some(mask),
    }
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source: e }
}

/// Load a PNG as grayscale. RGB inputs are converted with integer luminance
/// (299*R + 587*G + 114*B) / 1000.
pub fn load_grayscale_png(path: &Path) -> Result<SourceImage, DataError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| DataError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb = img.to_rgb8();
    let mut pixels = Vec::with_capacity(w * h);
    for p in rgb.pixels() {
        let lum = (299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32) / 1000;
        pixels.push(lum as u8);
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(SourceImage::new(&id, w, h, pixels))
}

/// Load a {0,255} mask PNG into {0,1} values. Any other pixel value is a
/// validation error.
pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let img = load_grayscale_png(path)?;
    let mut mask = Vec::with_capacity(img.pixels.len());
    for &v in &img.pixels {
        match v {
            0 => mask.push(0),
            255 => mask.push(1),
            other => {
                return Err(DataError::MaskValidation(format!(
                    "{}: mask pixel value {other} outside {{0,255}}",
                    path.display()
                )))
            }
        }
    }
    Ok((img.width, img.height, mask))
}

/// Save a {0,1} mask as a {0,255} 8-bit grayscale PNG.
pub fn save_mask_png(mask: &[u8], width: usize, height: usize, path: &Path) -> Result<(), DataError> {
    assert_eq!(mask.len(), width * height);
    let buf: Vec<u8> = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    save_gray_png(&buf, width, height, path)
}

/// Save raw 8-bit grayscale values as PNG.
pub fn save_gray_png(pixels: &[u8], width: usize, height: usize, path: &Path) -> Result<(), DataError> {
    assert_eq!(pixels.len(), width * height);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    image::GrayImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .expect("buffer size checked")
        .save(path)
        .map_err(|e| DataError::Format { path: path.display().to_string(), detail: e.to_string() })
}
