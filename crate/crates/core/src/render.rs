//! CAM grids: one row per sample with the input, the true-class CAM, the
//! false-class CAM and the difference map.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};

use crate::cam::{compute_cam_pair, difference_salience, normalize_unit, SalienceMap};
use crate::datasets::LabeledSample;
use crate::error::{invalid, Error, Result};
use crate::nn::CamNet;
use crate::saliency_io::{quantize, resize_plane};

pub const PANELS_PER_ROW: usize = 4;

const BLUE: [f64; 3] = [0.0, 0.0, 255.0];
const WHITE: [f64; 3] = [255.0, 255.0, 255.0];
const RED: [f64; 3] = [255.0, 0.0, 0.0];

/// Diverging map: 0 is blue, 0.5 white, 1 red. Inputs are clamped.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
    let (from, to, t) = if v <= 0.5 {
        (BLUE, WHITE, v * 2.0)
    } else {
        (WHITE, RED, (v - 0.5) * 2.0)
    };
    std::array::from_fn(|i| (from[i] + (to[i] - from[i]) * t).round() as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    /// Side of each square panel in pixels.
    pub panel_size: usize,
    /// White space between panels and rows.
    pub gap: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            panel_size: 128,
            gap: 4,
        }
    }
}

impl RenderOptions {
    /// Pixel size `(width, height)` of a grid with `rows` rows.
    pub fn canvas_size(&self, rows: usize) -> (usize, usize) {
        let side = |n: usize| n * self.panel_size + n.saturating_sub(1) * self.gap;
        (side(PANELS_PER_ROW), side(rows))
    }
}

/// The four panels of one row, before colorizing.
#[derive(Debug, Clone, PartialEq)]
pub struct CamRow {
    /// Channels × H × W in `[0, 1]`; one or three channels.
    pub image: ndarray::Array3<f64>,
    pub true_cam: SalienceMap,
    pub false_cam: SalienceMap,
    pub difference: SalienceMap,
}

impl CamRow {
    /// Runs `model` on `sample` and normalizes each map on its own.
    pub fn from_model(model: &CamNet, sample: &LabeledSample) -> Result<Self> {
        let output = model.predict(&sample.image)?;
        let (t, f) = compute_cam_pair(&output, sample.label)?;
        Ok(Self {
            image: sample.image.clone(),
            difference: difference_salience(&t, &f)?,
            true_cam: normalize_unit(&t)?,
            false_cam: normalize_unit(&f)?,
        })
    }
}

pub fn render_rows(rows: &[CamRow], options: &RenderOptions) -> Result<RgbImage> {
    if rows.is_empty() {
        return Err(invalid!("nothing to render"));
    }
    if options.panel_size == 0 {
        return Err(invalid!("panel_size must be positive"));
    }
    let (width, height) = options.canvas_size(rows.len());
    let mut canvas = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
    let p = options.panel_size;
    let step = p + options.gap;
    for (r, row) in rows.iter().enumerate() {
        let y0 = r * step;
        draw_input(&mut canvas, &row.image, 0, y0, p)?;
        for (k, map) in [&row.true_cam, &row.false_cam, &row.difference]
            .into_iter()
            .enumerate()
        {
            if !map.is_normalized() {
                return Err(invalid!("render expects normalized maps"));
            }
            let up = resize_plane(map.values(), p, p);
            draw_colored(&mut canvas, up.view(), (k + 1) * step, y0);
        }
    }
    Ok(canvas)
}

/// Renders the named samples in the given order.
pub fn render_samples(
    model: &CamNet,
    dataset: &[LabeledSample],
    sample_ids: &[String],
    options: &RenderOptions,
) -> Result<RgbImage> {
    let rows = sample_ids
        .iter()
        .map(|id| {
            let sample = dataset
                .iter()
                .find(|s| &s.sample_id == id)
                .ok_or_else(|| invalid!("unknown sample_id {id}"))?;
            CamRow::from_model(model, sample)
        })
        .collect::<Result<Vec<_>>>()?;
    render_rows(&rows, options)
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

fn draw_input(
    canvas: &mut RgbImage,
    image: &ndarray::Array3<f64>,
    x0: usize,
    y0: usize,
    size: usize,
) -> Result<()> {
    let channels = image.dim().0;
    let planes: Vec<Array2<f64>> = match channels {
        1 | 3 => image
            .outer_iter()
            .map(|c| resize_plane(c, size, size))
            .collect(),
        n => return Err(invalid!("cannot draw an image with {n} channels")),
    };
    for y in 0..size {
        for x in 0..size {
            let px = std::array::from_fn(|i| {
                quantize(planes[if channels == 1 { 0 } else { i }][(y, x)])
            });
            canvas.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb(px));
        }
    }
    Ok(())
}

fn draw_colored(canvas: &mut RgbImage, map: ArrayView2<'_, f64>, x0: usize, y0: usize) {
    for ((y, x), v) in map.indexed_iter() {
        canvas.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb(colormap(*v)));
    }
}
