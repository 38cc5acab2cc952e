//! Dataset ingestion for `root/{images,masks}/<id>.png` layouts and a
//! synthetic small-target generator with known ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};
use irstd_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

/// Threshold applied to 8-bit masks: values above it are foreground.
pub const MASK_THRESHOLD: u8 = 127;

/// Largest bounding box side of a small target.
pub const MAX_TARGET_EXTENT: usize = 9;

pub const METADATA_FILE: &str = "metadata.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: BinaryMask) -> Result<Self> {
        let (h, w) = image.dims2();
        if (h, w) != (mask.height, mask.width) {
            return Err(Error::Data(format!(
                "image {h}x{w} and mask {}x{} differ",
                mask.height, mask.width
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }
}

/// Stacks images into `[B, 1, H, W]`.
pub fn stack_images(samples: &[&Sample]) -> Tensor<f32> {
    let (h, w) = samples[0].image.dims2();
    let data = samples.iter().flat_map(|s| s.image.data().iter().copied()).collect();
    Tensor::from_vec([samples.len(), 1, h, w], data)
}

/// Stacks masks into `[B, 1, H, W]` of `{0, 1}`.
pub fn stack_masks(samples: &[&Sample]) -> Tensor<f32> {
    let (h, w) = (samples[0].mask.height, samples[0].mask.width);
    let data = samples
        .iter()
        .flat_map(|s| s.mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Tensor::from_vec([samples.len(), 1, h, w], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    pub resolution: usize,
    /// Inclusive range of targets per image.
    pub targets: (usize, usize),
    /// Gaussian blob spread in pixels.
    pub sigma: (f64, f64),
    /// Amplitude of the low-frequency background clutter.
    pub clutter: f64,
    /// Peak target amplitude as a multiple of `clutter`.
    pub snr: (f64, f64),
    pub seed: u64,
}

impl SynthSpec {
    /// The 64×64, one-or-two-blob set used for desk-scale runs.
    pub fn toy(count: usize, seed: u64) -> Self {
        Self {
            count,
            resolution: 64,
            targets: (1, 2),
            sigma: (1.0, 2.0),
            clutter: 0.1,
            snr: (2.5, 4.0),
            seed,
        }
    }

    /// Half-maximum radius of the widest blob.
    fn max_radius(&self) -> f64 {
        half_max_radius(self.sigma.1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.count == 0 || self.resolution == 0 {
            return bad("count and resolution must be positive".into());
        }
        if self.targets.0 == 0 || self.targets.0 > self.targets.1 {
            return bad(format!("target count range {:?} is empty or zero", self.targets));
        }
        let (s0, s1) = self.sigma;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return bad(format!("sigma range {:?} is invalid", self.sigma));
        }
        if !(self.snr.0 > 0.0 && self.snr.0 <= self.snr.1 && self.snr.1.is_finite()) {
            return bad(format!("snr range {:?} is invalid", self.snr));
        }
        if !(self.clutter > 0.0 && self.clutter.is_finite()) {
            return bad("clutter amplitude must be positive".into());
        }
        let extent = 2 * self.max_radius().floor() as usize + 1;
        if extent > MAX_TARGET_EXTENT {
            return bad(format!(
                "sigma {s1} gives a {extent}-pixel target, above the {MAX_TARGET_EXTENT}-pixel limit"
            ));
        }
        if self.cell() < 2 * self.margin() + 1 {
            return bad(format!(
                "{} targets of sigma {s1} do not fit a {0}x{0} frame",
                self.targets.1
            ));
        }
        Ok(())
    }

    /// Distance kept between a blob center and the frame edge.
    fn margin(&self) -> usize {
        (3.0 * self.sigma.1).ceil() as usize
    }

    /// Side of the grid cell that hosts at most one target.
    fn cell(&self) -> usize {
        let per_side = (self.targets.1 as f64).sqrt().ceil() as usize;
        self.resolution / per_side
    }
}

fn half_max_radius(sigma: f64) -> f64 {
    sigma * (2.0 * std::f64::consts::LN_2).sqrt()
}

/// Ground truth for one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub id: String,
    /// `(row, col)` blob centers.
    pub centroids: Vec<(f64, f64)>,
    pub sigmas: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

fn smooth_field(rng: &mut ChaCha8Rng, res: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let knots: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; res * res];
    for y in 0..res {
        let fy = y as f64 / res as f64 * cells as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..res {
            let fx = x as f64 / res as f64 * cells as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let k = |r: usize, c: usize| knots[r * g + c];
            let top = k(y0, x0) * (1.0 - tx) + k(y0, x0 + 1) * tx;
            let bot = k(y0 + 1, x0) * (1.0 - tx) + k(y0 + 1, x0 + 1) * tx;
            out[y * res + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// One synthetic sample and its metadata. Images are quantized to 8-bit
/// levels so they survive a PNG round trip unchanged.
fn synth_one(spec: &SynthSpec, index: usize, rng: &mut ChaCha8Rng) -> (Sample, SynthMeta) {
    let res = spec.resolution;
    let id = format!("synth_{index:05}");
    let base = rng.random_range(0.25..0.45);
    let field = smooth_field(rng, res, 4);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (angle.sin(), angle.cos());
    let noise_std = spec.clutter / 4.0;
    let mut img: Vec<f64> = (0..res * res)
        .map(|k| {
            let (y, x) = ((k / res) as f64 / res as f64 - 0.5, (k % res) as f64 / res as f64 - 0.5);
            let n: f64 = rng.sample(StandardNormal);
            base + spec.clutter * (0.7 * field[k] + 0.6 * (gy * y + gx * x)) + noise_std * n
        })
        .collect();

    // Targets sit in distinct grid cells, so their supports never merge.
    let n = rng.random_range(spec.targets.0..=spec.targets.1);
    let per_side = (spec.targets.1 as f64).sqrt().ceil() as usize;
    let cell = spec.cell();
    let margin = spec.margin();
    let mut cells: Vec<usize> = (0..per_side * per_side).collect();
    let mut mask = vec![false; res * res];
    let mut meta = SynthMeta {
        id: id.clone(),
        centroids: Vec::new(),
        sigmas: Vec::new(),
        amplitudes: Vec::new(),
    };
    for _ in 0..n {
        let slot = cells.swap_remove(rng.random_range(0..cells.len()));
        let (cr, cc) = (slot / per_side, slot % per_side);
        let cy = cr * cell + rng.random_range(margin..cell - margin);
        let cx = cc * cell + rng.random_range(margin..cell - margin);
        let sigma = rng.random_range(spec.sigma.0..=spec.sigma.1);
        let amp = spec.clutter * rng.random_range(spec.snr.0..=spec.snr.1);
        let r2 = half_max_radius(sigma).powi(2);
        for y in cy - margin..=cy + margin {
            for x in cx - margin..=cx + margin {
                let d2 = (y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2);
                img[y * res + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                if d2 <= r2 {
                    mask[y * res + x] = true;
                }
            }
        }
        meta.centroids.push((cy as f64, cx as f64));
        meta.sigmas.push(sigma);
        meta.amplitudes.push(amp);
    }
    let image = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0)
        .collect();
    let sample = Sample {
        id,
        image: Tensor::from_vec([res, res], image),
        mask: BinaryMask::new(res, res, mask),
    };
    (sample, meta)
}

/// Generates `spec.count` samples; fully determined by `spec.seed`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(Vec<Sample>, Vec<SynthMeta>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.count).map(|i| synth_one(spec, i, &mut rng)).unzip())
}

fn to_gray(t: &Tensor<f32>) -> GrayImage {
    let (h, w) = t.dims2();
    let px = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    ImageBuffer::from_raw(w as u32, h as u32, px).expect("buffer matches dimensions")
}

/// Writes a mask as an 8-bit PNG with values `{0, 255}`.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let px = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img: GrayImage =
        ImageBuffer::from_raw(mask.width as u32, mask.height as u32, px).expect("buffer matches dimensions");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.into_luma8())
}

/// Decodes an 8-bit mask. Masks stored as `{0, 1}` are taken as is; any other
/// encoding is thresholded at [`MASK_THRESHOLD`].
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    Ok(mask_from_gray(&read_gray(path)?))
}

fn mask_from_gray(img: &GrayImage) -> BinaryMask {
    let raw = img.as_raw();
    let unit = raw.iter().all(|&v| v <= 1);
    let data = raw.iter().map(|&v| if unit { v == 1 } else { v > MASK_THRESHOLD }).collect();
    BinaryMask::new(img.height() as usize, img.width() as usize, data)
}

/// Writes `samples` under `root` with the given named splits, plus optional
/// synthetic metadata.
pub fn write_dataset(
    root: &Path,
    samples: &[Sample],
    splits: &[(&str, Vec<String>)],
    meta: Option<&[SynthMeta]>,
) -> Result<()> {
    for dir in ["images", "masks", "splits"] {
        fs::create_dir_all(root.join(dir))?;
    }
    for s in samples {
        let file = format!("{}.png", s.id);
        let path = root.join("images").join(&file);
        to_gray(&s.image).save(&path).map_err(|source| Error::Image { path, source })?;
        save_mask(&s.mask, &root.join("masks").join(&file))?;
    }
    for (name, ids) in splits {
        let mut text = ids.join("\n");
        text.push('\n');
        fs::write(root.join("splits").join(format!("{name}.txt")), text)?;
    }
    if let Some(meta) = meta {
        let mut text = String::new();
        for m in meta {
            text.push_str(&serde_json::to_string(m)?);
            text.push('\n');
        }
        fs::write(root.join(METADATA_FILE), text)?;
    }
    Ok(())
}

/// Reads the synthetic metadata written by [`write_dataset`].
pub fn read_metadata(root: &Path) -> Result<Vec<SynthMeta>> {
    let text = fs::read_to_string(root.join(METADATA_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Ids listed in `root/splits/<split>.txt`, sorted.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<String>> {
    let path = root.join("splits").join(format!("{split}.txt"));
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("split file {}: {e}", path.display())))?;
    let mut ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.strip_suffix(".png").unwrap_or(l).to_string())
        .collect();
    if ids.is_empty() {
        return Err(Error::Data(format!("split `{split}` is empty")));
    }
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn load_pair(root: &Path, id: &str, resolution: Option<usize>) -> Result<Sample> {
    let file = format!("{id}.png");
    let (ip, mp): (PathBuf, PathBuf) = (root.join("images").join(&file), root.join("masks").join(&file));
    if !ip.is_file() || !mp.is_file() {
        return Err(Error::MissingPair(id.to_string()));
    }
    let mut img = read_gray(&ip)?;
    let mut mask_img = read_gray(&mp)?;
    if let Some(r) = resolution {
        let r = r as u32;
        if img.dimensions() != (r, r) {
            img = imageops::resize(&img, r, r, FilterType::Triangle);
        }
        if mask_img.dimensions() != (r, r) {
            // Nearest keeps the mask binary; normalize a 0/1 encoding first
            // so the threshold below sees the intended values.
            let m = mask_from_gray(&mask_img);
            let up: GrayImage = ImageBuffer::from_fn(mask_img.width(), mask_img.height(), |x, y| {
                Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }])
            });
            mask_img = imageops::resize(&up, r, r, FilterType::Nearest);
        }
    }
    let (w, h) = img.dimensions();
    let image = Tensor::from_vec(
        [h as usize, w as usize],
        img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    );
    Sample::new(id, image, mask_from_gray(&mask_img))
}

/// Loads a split, resizing to `resolution × resolution` when given. Files are
/// decoded on `workers` threads; the result is ordered by id regardless.
pub fn load_dataset(root: &Path, split: &str, resolution: Option<usize>, workers: usize) -> Result<Vec<Sample>> {
    let ids = read_split(root, split)?;
    let workers = workers.clamp(1, ids.len());
    let per = ids.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Sample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(per)
            .map(|chunk| s.spawn(move || chunk.iter().map(|id| load_pair(root, id, resolution)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(ids.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
