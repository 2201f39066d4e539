//! Sample IO and a synthetic scene generator.
//!
//! On-disk layout per dataset root:
//!
//! ```text
//! root/aif/<id>.png    RGB all-in-focus view
//! root/fs/<id>/NN.png  focal slices, ordered by numeric filename stem
//! root/gt/<id>.png     8-bit mask, pixel > 127 means foreground
//! root/<split>.txt     optional id list; otherwise aif/ is scanned
//! ```
//!
//! Images are rescaled to the configured square input size at load time,
//! bilinear for RGB and nearest for masks, and pixel values land in [0,1].
//! Focal stacks shorter than the configured depth T are padded by appending
//! all-zero slices; longer stacks are an error.
//!
//! The synthetic generator builds small textured scenes with one or two
//! foreground shapes at random depths, so training and metric tests can run
//! without any real light-field data.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::{GroundTruthMask, SaliencyMap};
use crate::network::ModelConfig;
use crate::tensor::Tensor;

/// Half-width of the in-focus depth band of one focal slice, as a fraction
/// of 1/T. Bands overlap so every depth is sharp in at least one slice.
const FOCUS_BAND: f64 = 0.75;

/// Gaussian defocus blur used by the synthetic generator.
const BLUR_SIGMA: f64 = 1.5;
const BLUR_RADIUS: i64 = 4;

/// Foreground area bounds enforced by the generator, as a fraction of the
/// frame. Outside this range the scene is redrawn.
const FG_FRACTION: (f64, f64) = (0.02, 0.6);

#[derive(Debug)]
pub enum DatasetError {
    Io(io::Error),
    /// A required file or slice directory does not exist.
    MissingFile(PathBuf),
    /// The file exists but could not be decoded or encoded.
    Image { path: PathBuf, detail: String },
    /// A mask or slice does not match the all-in-focus extents.
    ExtentMismatch { path: PathBuf, got: (u32, u32), want: (u32, u32) },
    /// More focal slices on disk than the configured stack depth.
    TooManySlices { id: String, got: usize, max: usize },
    /// A slice filename stem is not a unique numeric index.
    SliceName { path: PathBuf, detail: String },
    DuplicateId(String),
    UnknownId(String),
    /// Discovery found a root with no usable samples.
    NoSamples(PathBuf),
    /// The synthetic generator could not satisfy its area constraint.
    Synthesis(String),
    /// A tensor could not be interpreted as a saliency map.
    Map(String),
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::Io(e) => write!(f, "io error: {e}"),
            DatasetError::MissingFile(p) => write!(f, "missing file: {}", p.display()),
            DatasetError::Image { path, detail } => {
                write!(f, "bad image {}: {detail}", path.display())
            }
            DatasetError::ExtentMismatch { path, got, want } => write!(
                f,
                "extent mismatch {}: got {}x{}, want {}x{}",
                path.display(),
                got.0,
                got.1,
                want.0,
                want.1
            ),
            DatasetError::TooManySlices { id, got, max } => {
                write!(f, "sample {id}: {got} focal slices exceed stack depth {max}")
            }
            DatasetError::SliceName { path, detail } => {
                write!(f, "bad slice name {}: {detail}", path.display())
            }
            DatasetError::DuplicateId(id) => write!(f, "duplicate sample id {id}"),
            DatasetError::UnknownId(id) => write!(f, "unknown sample id {id}"),
            DatasetError::NoSamples(p) => write!(f, "no samples under {}", p.display()),
            DatasetError::Synthesis(s) => write!(f, "synthesis failed: {s}"),
            DatasetError::Map(s) => write!(f, "bad saliency tensor: {s}"),
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<io::Error> for DatasetError {
    fn from(e: io::Error) -> Self {
        DatasetError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}, expected train or test")),
        }
    }
}

/// The loader settings a sample depends on: the square resize target and the
/// focal stack depth T.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadConfig {
    pub input_size: usize,
    pub temporal_slices: usize,
}

impl From<&ModelConfig> for LoadConfig {
    fn from(cfg: &ModelConfig) -> Self {
        LoadConfig { input_size: cfg.input_size, temporal_slices: cfg.temporal_slices }
    }
}

/// One light-field sample, fully in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// All-in-focus view, `[3, S, S]`, values in [0,1].
    pub aif: Tensor,
    /// Focal stack, `[T, 3, S, S]`; slices past `slice_count_original` are zero.
    pub focal_stack: Tensor,
    pub gt: GroundTruthMask,
    /// Slice count before zero padding.
    pub slice_count_original: usize,
}

impl Sample {
    /// Ground truth as a `[1, S, S]` tensor of 0.0 / 1.0 for the loss.
    pub fn gt_tensor(&self) -> Tensor {
        let data = self.gt.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[1, self.gt.h, self.gt.w], data).expect("mask extents are positive")
    }
}

/// An ordered list of sample ids under one dataset root.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub ids: Vec<String>,
}

impl DatasetManifest {
    /// Reads `root/<split>.txt` if present (one id per line, `#` comments),
    /// otherwise scans `root/aif/` and sorts the stems lexicographically.
    /// Every id must resolve to an aif file, a gt file, and at least one
    /// focal slice.
    pub fn discover(root: &Path, split: Split) -> Result<Self, DatasetError> {
        let list = root.join(format!("{split}.txt"));
        let ids: Vec<String> = if list.is_file() {
            fs::read_to_string(&list)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect()
        } else {
            let aif_dir = root.join("aif");
            if !aif_dir.is_dir() {
                return Err(DatasetError::MissingFile(aif_dir));
            }
            let mut ids = Vec::new();
            for entry in fs::read_dir(&aif_dir)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) == Some("png") {
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        ids.push(stem.to_string());
                    }
                }
            }
            ids.sort();
            ids
        };
        if ids.is_empty() {
            return Err(DatasetError::NoSamples(root.to_path_buf()));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(DatasetError::DuplicateId(id.clone()));
            }
        }
        let manifest = DatasetManifest { root: root.to_path_buf(), split, ids };
        for id in &manifest.ids {
            manifest.validate_id(id)?;
        }
        Ok(manifest)
    }

    fn validate_id(&self, id: &str) -> Result<(), DatasetError> {
        for p in [self.aif_path(id), self.gt_path(id)] {
            if !p.is_file() {
                return Err(DatasetError::MissingFile(p));
            }
        }
        let dir = self.fs_dir(id);
        if !dir.is_dir() || list_slices(&dir)?.is_empty() {
            return Err(DatasetError::MissingFile(dir));
        }
        Ok(())
    }

    pub fn aif_path(&self, id: &str) -> PathBuf {
        self.root.join("aif").join(format!("{id}.png"))
    }

    pub fn gt_path(&self, id: &str) -> PathBuf {
        self.root.join("gt").join(format!("{id}.png"))
    }

    pub fn fs_dir(&self, id: &str) -> PathBuf {
        self.root.join("fs").join(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Focal slice paths sorted by the numeric value of their filename stem.
fn list_slices(dir: &Path) -> Result<Vec<(usize, PathBuf)>, DatasetError> {
    let mut slices = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let index: usize = stem.parse().map_err(|_| DatasetError::SliceName {
            path: path.clone(),
            detail: "stem is not a number".into(),
        })?;
        slices.push((index, path));
    }
    slices.sort_by_key(|(i, _)| *i);
    for pair in slices.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(DatasetError::SliceName {
                path: pair[1].1.clone(),
                detail: format!("duplicate slice index {}", pair[1].0),
            });
        }
    }
    Ok(slices)
}

fn open_image(path: &Path) -> Result<DynamicImage, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    image::open(path)
        .map_err(|e| DatasetError::Image { path: path.to_path_buf(), detail: e.to_string() })
}

fn require_extent(path: &Path, img: &DynamicImage, want: (u32, u32)) -> Result<(), DatasetError> {
    let got = (img.width(), img.height());
    if got != want {
        return Err(DatasetError::ExtentMismatch { path: path.to_path_buf(), got, want });
    }
    Ok(())
}

/// RGB image to a `[3, S, S]` tensor in [0,1], bilinear resize if needed.
fn rgb_tensor(img: &RgbImage, s: usize) -> Tensor {
    let su = s as u32;
    let resized;
    let img = if img.width() == su && img.height() == su {
        img
    } else {
        resized = imageops::resize(img, su, su, FilterType::Triangle);
        &resized
    };
    let mut data = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[(c * s + y) * s + x] = f64::from(px[c]) / 255.0;
            }
        }
    }
    Tensor::new(&[3, s, s], data).expect("extent is positive")
}

/// Grayscale mask to a binary mask, nearest resize, then threshold > 127.
fn mask_from_image(img: &GrayImage, s: usize) -> GroundTruthMask {
    let su = s as u32;
    let resized;
    let img = if img.width() == su && img.height() == su {
        img
    } else {
        resized = imageops::resize(img, su, su, FilterType::Nearest);
        &resized
    };
    let data = img.as_raw().iter().map(|&v| v > 127).collect();
    GroundTruthMask::new(s, s, data).expect("extent is positive")
}

/// Loads one sample, resizing to `cfg.input_size` and zero padding the focal
/// stack to `cfg.temporal_slices`. The gt mask and every slice must match the
/// all-in-focus extents before resizing.
pub fn load_sample(m: &DatasetManifest, id: &str, cfg: LoadConfig) -> Result<Sample, DatasetError> {
    assert!(cfg.input_size > 0 && cfg.temporal_slices > 0, "degenerate load config");
    if !m.ids.iter().any(|i| i == id) {
        return Err(DatasetError::UnknownId(id.to_string()));
    }
    let aif_path = m.aif_path(id);
    let aif_img = open_image(&aif_path)?;
    let native = (aif_img.width(), aif_img.height());

    let gt_path = m.gt_path(id);
    let gt_img = open_image(&gt_path)?;
    require_extent(&gt_path, &gt_img, native)?;

    let dir = m.fs_dir(id);
    if !dir.is_dir() {
        return Err(DatasetError::MissingFile(dir));
    }
    let slices = list_slices(&dir)?;
    if slices.is_empty() {
        return Err(DatasetError::MissingFile(dir));
    }
    let t = cfg.temporal_slices;
    if slices.len() > t {
        return Err(DatasetError::TooManySlices { id: id.to_string(), got: slices.len(), max: t });
    }

    let s = cfg.input_size;
    let aif = rgb_tensor(&aif_img.to_rgb8(), s);
    let mut focal_stack = Tensor::zeros(&[t, 3, s, s]);
    let per_slice = 3 * s * s;
    for (k, (_, path)) in slices.iter().enumerate() {
        let img = open_image(path)?;
        require_extent(path, &img, native)?;
        let slice = rgb_tensor(&img.to_rgb8(), s);
        focal_stack.data[k * per_slice..(k + 1) * per_slice].copy_from_slice(&slice.data);
    }
    let gt = mask_from_image(&gt_img.to_luma8(), s);

    Ok(Sample {
        id: id.to_string(),
        aif,
        focal_stack,
        gt,
        slice_count_original: slices.len(),
    })
}

/// Loads every sample in manifest order.
pub fn load_all(m: &DatasetManifest, cfg: LoadConfig) -> Result<Vec<Sample>, DatasetError> {
    m.ids.iter().map(|id| load_sample(m, id, cfg)).collect()
}

/// Writes a saliency map as an 8-bit grayscale PNG, value = round(255 p)
/// with halves rounding up.
pub fn write_saliency_map(p: &SaliencyMap, path: &Path) -> Result<(), DatasetError> {
    let bytes: Vec<u8> = p.data.iter().map(|&v| (255.0 * v + 0.5).floor() as u8).collect();
    let img = GrayImage::from_raw(p.w as u32, p.h as u32, bytes).expect("length matches extents");
    img.save(path)
        .map_err(|e| DatasetError::Image { path: path.to_path_buf(), detail: e.to_string() })
}

/// Reads an 8-bit grayscale image back as a saliency map in [0,1].
pub fn read_saliency_map(path: &Path) -> Result<SaliencyMap, DatasetError> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    SaliencyMap::new(w, h, data)
        .map_err(|e| DatasetError::Image { path: path.to_path_buf(), detail: e.to_string() })
}

/// Reads an 8-bit grayscale image as a binary mask (pixel > 127).
pub fn read_gt_mask(path: &Path) -> Result<GroundTruthMask, DatasetError> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v > 127).collect();
    GroundTruthMask::new(w, h, data)
        .map_err(|e| DatasetError::Image { path: path.to_path_buf(), detail: e.to_string() })
}

/// Views a `[1,H,W]` or `[H,W]` tensor in [0,1] as a saliency map.
pub fn saliency_from_tensor(t: &Tensor) -> Result<SaliencyMap, DatasetError> {
    let (h, w) = match t.shape.as_slice() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => return Err(DatasetError::Map(format!("expected [1,H,W] or [H,W], got {other:?}"))),
    };
    SaliencyMap::new(w, h, t.data.clone()).map_err(|e| DatasetError::Map(e.to_string()))
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Debug, Clone, Copy)]
enum Shape2d {
    Ellipse,
    Rect,
}

#[derive(Debug, Clone, Copy)]
struct SceneObject {
    shape: Shape2d,
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    depth: f64,
    color: [f64; 3],
    freq: f64,
    phase: f64,
}

impl SceneObject {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.shape {
            Shape2d::Ellipse => (dx / self.ax).powi(2) + (dy / self.ay).powi(2) <= 1.0,
            Shape2d::Rect => dx.abs() <= self.ax && dy.abs() <= self.ay,
        }
    }
}

/// Channel-major `[3, S, S]` image buffer the generator paints into.
struct SceneImage {
    s: usize,
    data: Vec<f64>,
}

impl SceneImage {
    fn new(s: usize) -> Self {
        SceneImage { s, data: vec![0.0; 3 * s * s] }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.s + y) * self.s + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.s + y) * self.s + x] = v;
    }
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn gaussian_blur(img: &SceneImage) -> SceneImage {
    let s = img.s as i64;
    let mut weights = Vec::with_capacity((2 * BLUR_RADIUS + 1) as usize);
    for i in -BLUR_RADIUS..=BLUR_RADIUS {
        weights.push((-((i * i) as f64) / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp());
    }
    let norm: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= norm;
    }

    let mut horizontal = SceneImage::new(img.s);
    for c in 0..3 {
        for y in 0..img.s {
            for x in 0..s {
                let mut acc = 0.0;
                for (wi, i) in (-BLUR_RADIUS..=BLUR_RADIUS).enumerate() {
                    let xi = (x + i).clamp(0, s - 1) as usize;
                    acc += weights[wi] * img.at(c, y, xi);
                }
                horizontal.set(c, y, x as usize, acc);
            }
        }
    }
    let mut out = SceneImage::new(img.s);
    for c in 0..3 {
        for y in 0..s {
            for x in 0..img.s {
                let mut acc = 0.0;
                for (wi, i) in (-BLUR_RADIUS..=BLUR_RADIUS).enumerate() {
                    let yi = (y + i).clamp(0, s - 1) as usize;
                    acc += weights[wi] * horizontal.at(c, yi, x);
                }
                out.set(c, y as usize, x, acc);
            }
        }
    }
    out
}

/// Generates `count` deterministic scenes. Each sample has a full stack of T
/// focal slices; slice k is sharp where the scene depth falls inside the band
/// around (k + 0.5)/T and defocus blurred elsewhere.
pub fn generate_synthetic(seed: u64, count: usize, cfg: LoadConfig) -> Result<Vec<Sample>, DatasetError> {
    assert!(cfg.input_size > 0 && cfg.temporal_slices > 0, "degenerate load config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| synth_scene(&mut rng, i, cfg)).collect()
}

fn synth_scene(rng: &mut ChaCha8Rng, index: usize, cfg: LoadConfig) -> Result<Sample, DatasetError> {
    let s = cfg.input_size;
    let t = cfg.temporal_slices;
    let sf = s as f64;

    // Background: a low-frequency sinusoid per channel plus its own depth.
    let bg: Vec<(f64, f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.35..0.65),
                rng.gen_range(0.10..0.25),
                rng.gen_range(1.0..4.0),
                rng.gen_range(1.0..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let bg_depth: f64 = rng.gen_range(0.0..1.0);

    // Foreground objects, redrawn until the covered fraction is reasonable.
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut mask = vec![false; s * s];
    let mut accepted = false;
    for _ in 0..1000 {
        objects.clear();
        for _ in 0..rng.gen_range(1..=2usize) {
            objects.push(SceneObject {
                shape: if rng.gen_bool(0.5) { Shape2d::Ellipse } else { Shape2d::Rect },
                cx: rng.gen_range(0.25 * sf..0.75 * sf),
                cy: rng.gen_range(0.25 * sf..0.75 * sf),
                ax: rng.gen_range(0.10 * sf..0.28 * sf),
                ay: rng.gen_range(0.10 * sf..0.28 * sf),
                depth: rng.gen_range(0.0..1.0),
                color: [
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.1..0.9),
                ],
                freq: rng.gen_range(3.0..7.0),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            });
        }
        for y in 0..s {
            for x in 0..s {
                mask[y * s + x] =
                    objects.iter().any(|o| o.contains(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        let fraction = mask.iter().filter(|&&b| b).count() as f64 / (s * s) as f64;
        if (FG_FRACTION.0..=FG_FRACTION.1).contains(&fraction) {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(DatasetError::Synthesis(format!(
            "no foreground layout within {FG_FRACTION:?} after 1000 draws"
        )));
    }

    // Sharp composite and the per-pixel depth. Later objects paint on top.
    let mut sharp = SceneImage::new(s);
    let mut depth = vec![bg_depth; s * s];
    for y in 0..s {
        for x in 0..s {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut px = [0.0; 3];
            for (c, &(base, amp, fx, fy, phase)) in bg.iter().enumerate() {
                px[c] = base + amp * (std::f64::consts::TAU * (fx * xf + fy * yf) / sf + phase).sin();
            }
            for o in &objects {
                if o.contains(xf, yf) {
                    let tex = (std::f64::consts::TAU * o.freq * (xf + yf) / sf + o.phase).sin();
                    for c in 0..3 {
                        px[c] = o.color[c] + 0.15 * (tex + (c as f64) * 0.5).sin();
                    }
                    depth[y * s + x] = o.depth;
                }
            }
            for c in 0..3 {
                sharp.set(c, y, x, px[c].clamp(0.0, 1.0));
            }
        }
    }
    let blurred = gaussian_blur(&sharp);

    let mut focal_stack = Tensor::zeros(&[t, 3, s, s]);
    let per_slice = 3 * s * s;
    let band = FOCUS_BAND / t as f64;
    for k in 0..t {
        let fk = (k as f64 + 0.5) / t as f64;
        let dst = &mut focal_stack.data[k * per_slice..(k + 1) * per_slice];
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let v = if (depth[y * s + x] - fk).abs() <= band {
                        sharp.at(c, y, x)
                    } else {
                        blurred.at(c, y, x)
                    };
                    dst[(c * s + y) * s + x] = v;
                }
            }
        }
    }

    Ok(Sample {
        id: format!("synth-{index:03}"),
        aif: Tensor::new(&[3, s, s], sharp.data).expect("extent is positive"),
        focal_stack,
        gt: GroundTruthMask::new(s, s, mask).expect("extent is positive"),
        slice_count_original: t,
    })
}
