//! Binary-classification datasets on disk and the synthetic ground-truth task.
//!
//! Layout of a dataset root:
//!
//! ```text
//! root/labels.csv            sample_id,label,subset
//! root/images/<id>.png       8-bit, 1 or 3 channels
//! root/heatmaps/<id>.png     optional, 8-bit grayscale (or <id>.npy)
//! root/metadata.csv          synthetic sets only: generation parameters per sample
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, Luma, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cam::SalienceMap;
use crate::error::{invalid, Error, Result};
use crate::saliency_io::{load_heatmap, quantize, save_heatmap_png};

pub const LABELS_FILE: &str = "labels.csv";
pub const METADATA_FILE: &str = "metadata.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample_id: String,
    /// channels x height x width, values in `[0, 1]`
    pub image: Array3<f64>,
    pub label: usize,
    pub human_map: Option<SalienceMap>,
    pub subset: String,
}

impl LabeledSample {
    pub fn validate(&self) -> Result<()> {
        let id = &self.sample_id;
        if id.is_empty() {
            return Err(invalid!("empty sample_id"));
        }
        if self.label > 1 {
            return Err(invalid!("sample {id}: label {} is not binary", self.label));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid!("sample {id}: image values outside [0, 1]"));
        }
        if let Some(map) = &self.human_map {
            let (_, ih, iw) = self.image.dim();
            let (mh, mw) = map.dim();
            if mh * iw != mw * ih {
                return Err(invalid!(
                    "sample {id}: heatmap {mh}x{mw} does not match image aspect {ih}x{iw}"
                ));
            }
            if !map.is_normalized() {
                return Err(invalid!("sample {id}: heatmap is not normalized"));
            }
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    sample_id: String,
    label: i64,
    subset: String,
}

/// Loads every manifest row, sorted by `sample_id`.
pub fn load_dataset(root: &Path) -> Result<Vec<LabeledSample>> {
    let manifest = root.join(LABELS_FILE);
    if !manifest.is_file() {
        return Err(invalid!("missing manifest {}", manifest.display()));
    }
    let mut reader = csv::Reader::from_path(&manifest).map_err(|e| Error::csv(&manifest, e))?;
    let mut rows: Vec<ManifestRow> = Vec::new();
    for row in reader.deserialize() {
        rows.push(row.map_err(|e| Error::csv(&manifest, e))?);
    }
    rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let id = row.sample_id;
        if !seen.insert(id.clone()) {
            return Err(invalid!("sample {id}: duplicate sample_id in manifest"));
        }
        if !(0..=1).contains(&row.label) {
            return Err(invalid!("sample {id}: label {} is not binary", row.label));
        }
        let image = load_image(&root.join("images").join(format!("{id}.png")))
            .map_err(|e| invalid!("sample {id}: {e}"))?;
        let human_map = find_heatmap(root, &id)
            .map(|p| load_heatmap(&p))
            .transpose()
            .map_err(|e| invalid!("sample {id}: {e}"))?;
        let sample = LabeledSample {
            sample_id: id,
            image,
            label: row.label as usize,
            human_map,
            subset: row.subset,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

fn find_heatmap(root: &Path, id: &str) -> Option<std::path::PathBuf> {
    let dir = root.join("heatmaps");
    ["png", "npy"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Reads an 8-bit PNG as a `[0, 1]` array with 1 (gray) or 3 (color) channels.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let to_unit = |v: u8| f64::from(v) / 255.0;
    if img.color().has_color() {
        let rgb = img.into_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Array3::from_shape_fn(
            (3, h as usize, w as usize),
            |(c, y, x)| to_unit(rgb.get_pixel(x as u32, y as u32).0[c]),
        ))
    } else {
        let gray = img.into_luma8();
        let (w, h) = gray.dimensions();
        Ok(Array3::from_shape_fn(
            (1, h as usize, w as usize),
            |(_, y, x)| to_unit(gray.get_pixel(x as u32, y as u32).0[0]),
        ))
    }
}

/// Writes a `[0, 1]` image as an 8-bit PNG (`round(255 * v)`).
pub fn save_image(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = image.dim();
    let dynamic = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([quantize(image[(0, y as usize, x as usize)])])
        })),
        3 => DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|ci| quantize(image[(ci, y as usize, x as usize)])))
        })),
        _ => return Err(invalid!("cannot save an image with {c} channels")),
    };
    dynamic.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes samples in the on-disk layout read by [`load_dataset`].
pub fn save_dataset(root: &Path, samples: &[LabeledSample]) -> Result<()> {
    let images = root.join("images");
    let heatmaps = root.join("heatmaps");
    for dir in [&images, &heatmaps] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let manifest = root.join(LABELS_FILE);
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| Error::csv(&manifest, e))?;
    for s in samples {
        s.validate()?;
        save_image(&s.image, &images.join(format!("{}.png", s.sample_id)))?;
        if let Some(map) = &s.human_map {
            save_heatmap_png(map, &heatmaps.join(format!("{}.png", s.sample_id)))?;
        }
        writer
            .serialize(ManifestRow {
                sample_id: s.sample_id.clone(),
                label: s.label as i64,
                subset: s.subset.clone(),
            })
            .map_err(|e| Error::csv(&manifest, e))?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

/// Pattern drawn inside the class-1 patch. Values alternate between `+1` and `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Checkerboard { period: usize },
    Stripes { period: usize, vertical: bool },
}

impl Texture {
    pub fn name(&self) -> String {
        match self {
            Texture::Checkerboard { period } => format!("checker{period}"),
            Texture::Stripes {
                period,
                vertical: true,
            } => format!("vstripes{period}"),
            Texture::Stripes {
                period,
                vertical: false,
            } => format!("hstripes{period}"),
        }
    }

    /// `+1` or `-1` at patch-relative position `(y, x)`.
    pub fn sign(&self, y: usize, x: usize) -> f64 {
        let on = match *self {
            Texture::Checkerboard { period } => (y / period + x / period).is_multiple_of(2),
            Texture::Stripes {
                period,
                vertical: true,
            } => (x / period).is_multiple_of(2),
            Texture::Stripes {
                period,
                vertical: false,
            } => (y / period).is_multiple_of(2),
        };
        if on {
            1.0
        } else {
            -1.0
        }
    }

    /// The texture used by the `new_texture` shift: twice the period, and
    /// stripes turned by 90 degrees.
    pub fn shifted(&self) -> Texture {
        match *self {
            Texture::Checkerboard { period } => Texture::Checkerboard { period: period * 2 },
            Texture::Stripes { period, vertical } => Texture::Stripes {
                period: period * 2,
                vertical: !vertical,
            },
        }
    }

    fn period(&self) -> usize {
        match *self {
            Texture::Checkerboard { period } | Texture::Stripes { period, .. } => period,
        }
    }
}

/// Test-time distribution shift applied by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    None,
    RelocatePatch,
    NewTexture,
}

impl ShiftMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftMode::None => "none",
            ShiftMode::RelocatePatch => "relocate_patch",
            ShiftMode::NewTexture => "new_texture",
        }
    }
}

/// Parameters of the synthetic task.
///
/// Class-1 images hold a textured patch; the patch mask is the ground-truth
/// heatmap. Class-0 images have no patch and their heatmap marks a control
/// region drawn from the same location distribution. Both classes carry
/// Gaussian noise and smooth distractor blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub patch_size: usize,
    /// One subset per texture; class-1 samples cycle through them.
    pub textures: Vec<Texture>,
    /// Textures drawn by the `new_texture` shift, one per entry of
    /// `textures`. Empty means [`Texture::shifted`] of each.
    pub shifted_textures: Vec<Texture>,
    /// Half the peak-to-peak swing of the patch texture.
    pub texture_contrast: f64,
    pub noise_std: f64,
    pub distractor_count: usize,
    /// Brightness of a marker strip along the right border, as wide as the
    /// patch margin. Training patches never reach it. Without a shift
    /// it appears on exactly the class-1 images; shifted sets place it at
    /// random. Zero disables it.
    pub shortcut_strength: f64,
    pub shift_mode: ShiftMode,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            textures: vec![Texture::Checkerboard { period: 1 }],
            shifted_textures: Vec::new(),
            texture_contrast: 0.2,
            noise_std: 0.08,
            distractor_count: 3,
            shortcut_strength: 0.0,
            shift_mode: ShiftMode::None,
        }
    }
}

/// Generation record of one synthetic sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub sample_id: String,
    pub label: usize,
    pub subset: String,
    /// Top-left corner of the patch (class 1) or the control region (class 0).
    pub region_row: usize,
    pub region_col: usize,
    /// Texture actually drawn; empty for class 0.
    pub texture: String,
    pub shortcut: bool,
    pub shift_mode: ShiftMode,
}

/// In-memory result of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub samples: Vec<LabeledSample>,
    pub metadata: Vec<SyntheticMeta>,
}

impl SyntheticSpec {
    /// Three period-1 textures plus the border shortcut at strength 0.1; the
    /// setup used by `configs/synthetic.toml`.
    pub fn shortcut_task() -> Self {
        Self {
            textures: vec![
                Texture::Checkerboard { period: 1 },
                Texture::Stripes {
                    period: 1,
                    vertical: true,
                },
                Texture::Stripes {
                    period: 1,
                    vertical: false,
                },
            ],
            shortcut_strength: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = |v: f64| v >= 0.0;
        if self.patch_size == 0 || self.patch_size >= self.image_size {
            return Err(invalid!(
                "patch of {} px does not fit a {} px image",
                self.patch_size,
                self.image_size
            ));
        }
        if self.patch_size + 2 * self.margin() > self.image_size {
            return Err(invalid!(
                "patch of {} px exceeds the image bounds with its margin",
                self.patch_size
            ));
        }
        if !non_negative(self.noise_std)
            || !non_negative(self.texture_contrast)
            || !non_negative(self.shortcut_strength)
        {
            return Err(invalid!(
                "noise_std, texture_contrast and shortcut_strength must be non-negative"
            ));
        }
        if self.textures.is_empty() {
            return Err(invalid!("at least one texture is required"));
        }
        if !self.shifted_textures.is_empty() && self.shifted_textures.len() != self.textures.len() {
            return Err(invalid!(
                "{} shifted textures given for {} textures",
                self.shifted_textures.len(),
                self.textures.len()
            ));
        }
        if self
            .textures
            .iter()
            .chain(&self.shifted_textures)
            .any(|t| t.period() == 0)
        {
            return Err(invalid!("texture periods must be positive"));
        }
        Ok(())
    }

    /// Minimum distance between the patch and the image border.
    pub fn margin(&self) -> usize {
        self.patch_size / 2
    }

    /// Inclusive column range of the patch's left edge. Training data uses the
    /// left half of the admissible range; `relocate_patch` uses the right half.
    pub fn column_range(&self) -> (usize, usize) {
        let lo = self.margin();
        let hi = self.image_size - self.patch_size - self.margin();
        let mid = (lo + hi) / 2;
        match self.shift_mode {
            ShiftMode::RelocatePatch => ((mid + 1).min(hi), hi),
            _ => (lo, mid),
        }
    }

    /// Inclusive row range of the patch's top edge.
    pub fn row_range(&self) -> (usize, usize) {
        (
            self.margin(),
            self.image_size - self.patch_size - self.margin(),
        )
    }

    fn textures_in_use(&self) -> Vec<Texture> {
        match self.shift_mode {
            ShiftMode::NewTexture if !self.shifted_textures.is_empty() => {
                self.shifted_textures.clone()
            }
            ShiftMode::NewTexture => self.textures.iter().map(Texture::shifted).collect(),
            _ => self.textures.clone(),
        }
    }
}

/// Generates `count_per_class` samples of each class.
///
/// Fully determined by `(spec, count_per_class, seed)`. When `out_dir` is set
/// the dataset is also written there (see [`save_dataset`]) together with
/// `metadata.csv`. Images are quantized to 8 bits in memory as well, so a
/// reload reproduces the returned samples exactly.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    count_per_class: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<SyntheticDataset> {
    spec.validate()?;
    if count_per_class == 0 {
        return Err(invalid!("count_per_class must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let textures = spec.textures_in_use();
    let subsets: Vec<String> = textures.iter().map(Texture::name).collect();
    let size = spec.image_size;
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let (r_lo, r_hi) = spec.row_range();
    let (c_lo, c_hi) = spec.column_range();

    let mut samples = Vec::with_capacity(2 * count_per_class);
    let mut metadata = Vec::with_capacity(2 * count_per_class);
    for label in 0..2usize {
        for i in 0..count_per_class {
            let subset_index = i % textures.len();
            let sample_id = format!("{}_s{seed}_c{label}_{i:05}", spec.shift_mode.as_str());
            let mut plane = Array2::from_elem((size, size), 0.5);
            if spec.noise_std > 0.0 {
                plane.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
            for _ in 0..spec.distractor_count {
                add_blob(&mut plane, &mut rng, spec.patch_size as f64 / 4.0);
            }
            let row = rng.random_range(r_lo..=r_hi);
            let col = rng.random_range(c_lo..=c_hi);
            let texture = textures[subset_index];
            if label == 1 {
                for y in 0..spec.patch_size {
                    for x in 0..spec.patch_size {
                        plane[(row + y, col + x)] += spec.texture_contrast * texture.sign(y, x);
                    }
                }
            }
            let shortcut = spec.shortcut_strength > 0.0
                && match spec.shift_mode {
                    ShiftMode::None => label == 1,
                    _ => rng.random_bool(0.5),
                };
            if shortcut {
                let m = spec.margin();
                plane
                    .slice_mut(ndarray::s![.., size - m..])
                    .mapv_inplace(|v| v + spec.shortcut_strength);
            }
            plane.mapv_inplace(|v| f64::from(quantize(v.clamp(0.0, 1.0))) / 255.0);
            let mut mask = Array2::zeros((size, size));
            mask.slice_mut(ndarray::s![
                row..row + spec.patch_size,
                col..col + spec.patch_size
            ])
            .fill(1.0);
            let subset = subsets[subset_index].clone();
            metadata.push(SyntheticMeta {
                sample_id: sample_id.clone(),
                label,
                subset: subset.clone(),
                region_row: row,
                region_col: col,
                texture: if label == 1 {
                    texture.name()
                } else {
                    String::new()
                },
                shortcut,
                shift_mode: spec.shift_mode,
            });
            samples.push(LabeledSample {
                sample_id,
                image: plane.insert_axis(Axis(0)),
                label,
                human_map: Some(SalienceMap::normalized(mask)?),
                subset,
            });
        }
    }
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    metadata.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    if let Some(dir) = out_dir {
        save_dataset(dir, &samples)?;
        let path = dir.join(METADATA_FILE);
        let mut writer = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        for m in &metadata {
            writer.serialize(m).map_err(|e| Error::csv(&path, e))?;
        }
        writer.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(SyntheticDataset { samples, metadata })
}

/// Reads `metadata.csv` written by [`generate_synthetic`].
pub fn load_metadata(root: &Path) -> Result<Vec<SyntheticMeta>> {
    let path = root.join(METADATA_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(&path, e)))
        .collect()
}

/// Adds a Gaussian bump of random sign, amplitude and position.
fn add_blob(plane: &mut Array2<f64>, rng: &mut ChaCha8Rng, sigma: f64) {
    let (h, w) = plane.dim();
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let amplitude = rng.random_range(0.15..0.3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let denom = 2.0 * sigma * sigma;
    for ((y, x), v) in plane.indexed_iter_mut() {
        let dy = y as f64 + 0.5 - cy;
        let dx = x as f64 + 0.5 - cx;
        *v += amplitude * (-(dy * dy + dx * dx) / denom).exp();
    }
}
