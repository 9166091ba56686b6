//! Human salience heatmaps: loading, saving, inversion, resolution alignment
//! and the synthetic edge-band maps used for passive fooling.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::{Array2, ArrayView2};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};

use crate::cam::{normalize_unit, SalienceMap};
use crate::error::{invalid, Error, Result};

/// Where a heatmap came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapSource {
    Annotation,
    EyeTracking,
    SyntheticGroundTruth,
    FoolingEdge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRecord {
    pub sample_id: String,
    pub map: SalienceMap,
    pub source: HeatmapSource,
}

impl HeatmapRecord {
    pub fn new(
        sample_id: impl Into<String>,
        map: SalienceMap,
        source: HeatmapSource,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        if sample_id.is_empty() {
            return Err(invalid!("heatmap sample_id is empty"));
        }
        if !map.is_normalized() {
            return Err(invalid!("heatmap for {sample_id} is not normalized"));
        }
        Ok(Self {
            sample_id,
            map,
            source,
        })
    }
}

fn is_npy(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("npy"))
}

/// Loads a heatmap from an 8-bit grayscale image or a 2D `.npy` float array.
///
/// Pixels map to `v / 255`. Float arrays already inside `[0, 1]` are kept as
/// they are; anything else is min-max normalized.
pub fn load_heatmap(path: &Path) -> Result<SalienceMap> {
    if is_npy(path) {
        let values = read_npy_2d(path)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("{} contains non-finite values", path.display()));
        }
        if values.iter().all(|v| (0.0..=1.0).contains(v)) {
            SalienceMap::normalized(values)
        } else {
            normalize_unit(&SalienceMap::raw(values)?)
        }
    } else {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        let values = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            f64::from(img.get_pixel(x as u32, y as u32).0[0]) / 255.0
        });
        SalienceMap::normalized(values)
    }
}

/// Reads a 2D float array, accepting `f64` or `f32` payloads.
pub(crate) fn read_npy_2d(path: &Path) -> Result<Array2<f64>> {
    let open = || {
        File::open(path)
            .map(BufReader::new)
            .map_err(|e| Error::io(path, e))
    };
    let as_f64 = Array2::<f64>::read_npy(open()?);
    match as_f64 {
        Ok(a) => Ok(a),
        Err(first) => match Array2::<f32>::read_npy(open()?) {
            Ok(a) => Ok(a.mapv(f64::from)),
            Err(_) => Err(Error::ArrayFile {
                path: path.to_path_buf(),
                message: format!("expected a 2D float array: {first}"),
            }),
        },
    }
}

/// Writes a normalized map as an 8-bit grayscale PNG (`round(255 * v)`).
pub fn save_heatmap_png(map: &SalienceMap, path: &Path) -> Result<()> {
    if !map.is_normalized() {
        return Err(invalid!(
            "only normalized maps can be exported as 8-bit images"
        ));
    }
    to_gray_image(map.values())
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub(crate) fn to_gray_image(values: ArrayView2<'_, f64>) -> GrayImage {
    let (h, w) = values.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(values[(y as usize, x as usize)])])
    })
}

pub(crate) fn quantize(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// Writes any map (raw or normalized) as a 2D `f64` `.npy` array.
pub fn save_heatmap_npy(map: &SalienceMap, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    map.values()
        .to_owned()
        .write_npy(BufWriter::new(file))
        .map_err(|e| Error::ArrayFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// `1 - h`, cellwise.
pub fn invert_map(h: &SalienceMap) -> Result<SalienceMap> {
    if !h.is_normalized() {
        return Err(invalid!("only normalized maps can be inverted"));
    }
    SalienceMap::normalized(h.values().mapv(|v| 1.0 - v))
}

/// Resamples a map to `out_h x out_w`.
///
/// Integer-factor downscaling averages each block; every other case uses
/// bilinear interpolation with pixel-centre alignment. The normalized flag is
/// kept and the values are not re-normalized.
pub fn resize_to_grid(m: &SalienceMap, out_h: usize, out_w: usize) -> Result<SalienceMap> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!(
            "target grid must be positive, got {out_h}x{out_w}"
        ));
    }
    let mut values = resize_plane(m.values(), out_h, out_w);
    if m.is_normalized() {
        values.mapv_inplace(|v| v.clamp(0.0, 1.0));
        SalienceMap::normalized(values)
    } else {
        SalienceMap::raw(values)
    }
}

/// Resamples one plane with the same rules as [`resize_to_grid`].
pub fn resize_plane(src: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    if in_h % out_h == 0 && in_w % out_w == 0 {
        area_average(src, in_h / out_h, in_w / out_w)
    } else {
        bilinear(src, out_h, out_w)
    }
}

fn area_average(src: ArrayView2<'_, f64>, fy: usize, fx: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    let area = (fy * fx) as f64;
    Array2::from_shape_fn((in_h / fy, in_w / fx), |(y, x)| {
        src.slice(ndarray::s![y * fy..(y + 1) * fy, x * fx..(x + 1) * fx])
            .sum()
            / area
    })
}

pub(crate) fn bilinear(src: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, c - lo as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, wy) = coord(y, sy, in_h);
        let (x0, x1, wx) = coord(x, sx, in_w);
        let top = src[(y0, x0)] * (1.0 - wx) + src[(y0, x1)] * wx;
        let bottom = src[(y1, x0)] * (1.0 - wx) + src[(y1, x1)] * wx;
        top * (1.0 - wy) + bottom * wy
    })
}

/// Band width in cells for [`make_edge_map`].
pub fn edge_band_width(height: usize, width: usize, band_fraction: f64) -> usize {
    (band_fraction * height.min(width) as f64).floor() as usize
}

/// Binary map that is 1 within `floor(band_fraction * min(h, w))` cells of
/// any border and 0 inside.
pub fn make_edge_map(height: usize, width: usize, band_fraction: f64) -> Result<SalienceMap> {
    if !(band_fraction > 0.0 && band_fraction < 0.5) {
        return Err(invalid!(
            "band fraction must lie in (0, 0.5), got {band_fraction}"
        ));
    }
    let band = edge_band_width(height, width, band_fraction);
    if band == 0 {
        return Err(invalid!(
            "band fraction {band_fraction} rounds to zero cells on a {height}x{width} grid"
        ));
    }
    let values = Array2::from_shape_fn((height, width), |(y, x)| {
        let d = y.min(x).min(height - 1 - y).min(width - 1 - x);
        if d < band {
            1.0
        } else {
            0.0
        }
    });
    SalienceMap::normalized(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, s};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(v: Array2<f64>) -> SalienceMap {
        SalienceMap::normalized(v).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SalienceMap {
        norm(Array2::from_shape_fn((h, w), |_| {
            rng.random_range(0.0..1.0)
        }))
    }

    #[test]
    fn gray_png_extremes() {
        let dir = tempfile::tempdir().unwrap();
        for (value, expected) in [(255u8, 1.0), (0u8, 0.0)] {
            let path = dir.path().join(format!("{value}.png"));
            GrayImage::from_pixel(5, 3, Luma([value]))
                .save(&path)
                .unwrap();
            let m = load_heatmap(&path).unwrap();
            assert_eq!(m.dim(), (3, 5));
            assert!(m.values().iter().all(|&v| v == expected));
            assert!(m.is_normalized());
        }
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..20 {
            let m = random_map(&mut rng, 9, 13);
            let path = dir.path().join(format!("m{i}.png"));
            save_heatmap_png(&m, &path).unwrap();
            let back = load_heatmap(&path).unwrap();
            for (a, b) in m.values().iter().zip(back.values().iter()) {
                assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn npy_in_range_kept_out_of_range_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let inside = norm(arr2(&[[0.2, 0.4], [0.6, 0.8]]));
        let p = dir.path().join("inside.npy");
        save_heatmap_npy(&inside, &p).unwrap();
        assert_eq!(load_heatmap(&p).unwrap(), inside);

        let outside = SalienceMap::raw(arr2(&[[-1.0, 1.0], [3.0, 1.0]])).unwrap();
        let p = dir.path().join("outside.npy");
        save_heatmap_npy(&outside, &p).unwrap();
        assert_eq!(
            load_heatmap(&p).unwrap().values(),
            arr2(&[[0.0, 0.5], [1.0, 0.5]])
        );
    }

    #[test]
    fn npy_non_2d_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cube.npy");
        let cube = ndarray::Array3::<f64>::zeros((2, 2, 2));
        cube.write_npy(File::create(&p).unwrap()).unwrap();
        assert!(load_heatmap(&p).is_err());
        assert!(load_heatmap(&dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn raw_map_cannot_be_exported_as_png() {
        let raw = SalienceMap::raw(arr2(&[[2.0]])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(save_heatmap_png(&raw, &dir.path().join("x.png")).is_err());
    }

    #[test]
    fn inversion() {
        let half = norm(Array2::from_elem((3, 3), 0.5));
        assert_eq!(invert_map(&half).unwrap(), half);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_map(&mut rng, 4, 4);
        let inv = invert_map(&m).unwrap();
        for (a, b) in m.values().iter().zip(inv.values().iter()) {
            assert_eq!(*b, 1.0 - a);
        }
        let raw = SalienceMap::raw(arr2(&[[3.0]])).unwrap();
        assert!(invert_map(&raw).is_err());
    }

    #[test]
    fn resize_blocks() {
        let ones = norm(Array2::ones((4, 4)));
        assert_eq!(
            resize_to_grid(&ones, 2, 2).unwrap().values(),
            Array2::<f64>::ones((2, 2))
        );
        let half = norm(Array2::from_shape_fn(
            (4, 4),
            |(_, x)| if x < 2 { 1.0 } else { 0.0 },
        ));
        assert_eq!(
            resize_to_grid(&half, 2, 2).unwrap().values(),
            arr2(&[[1.0, 0.0], [1.0, 0.0]])
        );
        assert!(resize_to_grid(&half, 0, 2).is_err());
    }

    #[test]
    fn resize_matches_brute_force_block_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = random_map(&mut rng, 14, 14);
            let small = resize_to_grid(&m, 7, 7).unwrap();
            for y in 0..7 {
                for x in 0..7 {
                    let block = m
                        .values()
                        .slice(s![2 * y..2 * y + 2, 2 * x..2 * x + 2])
                        .to_owned();
                    let mut sum = 0.0;
                    for v in block.iter() {
                        sum += v;
                    }
                    assert!((small.values()[(y, x)] - sum / 4.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn resize_constant_any_resolution() {
        let c = norm(Array2::from_elem((7, 5), 0.3));
        for (h, w) in [(3, 3), (14, 10), (9, 2), (1, 1), (100, 37)] {
            let r = resize_to_grid(&c, h, w).unwrap();
            assert!(r.values().iter().all(|v| (v - 0.3).abs() < 1e-9));
            assert!(r.is_normalized());
        }
        let raw = SalienceMap::raw(Array2::from_elem((3, 3), -4.0)).unwrap();
        assert!(!resize_to_grid(&raw, 5, 5).unwrap().is_normalized());
    }

    #[test]
    fn edge_map_small() {
        let m = make_edge_map(4, 4, 0.25).unwrap();
        let expected = arr2(&[
            [1.0, 1.0, 1.0, 1.0],
            [1.0, 0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0, 1.0],
        ]);
        assert_eq!(m.values(), expected);
    }

    #[test]
    fn edge_band_width_224() {
        assert_eq!(edge_band_width(224, 224, 0.1), 22);
        let m = make_edge_map(224, 224, 0.1).unwrap();
        assert_eq!(m.values()[(21, 100)], 1.0);
        assert_eq!(m.values()[(22, 100)], 0.0);
    }

    #[test]
    fn edge_map_errors() {
        assert!(make_edge_map(4, 4, 0.1).is_err());
        assert!(make_edge_map(10, 10, 0.5).is_err());
        assert!(make_edge_map(10, 10, 0.0).is_err());
    }

    #[test]
    fn edge_map_structure() {
        for (h, w, frac) in [(10, 17, 0.2), (32, 32, 0.1), (9, 40, 0.3), (224, 160, 0.1)] {
            let m = make_edge_map(h, w, frac).unwrap();
            let band = edge_band_width(h, w, frac);
            let v = m.values();
            let interior = v.slice(s![band..h - band, band..w - band]).sum();
            assert_eq!(interior, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let on_border = y < band || x < band || y >= h - band || x >= w - band;
                    if on_border {
                        assert_eq!(v[(y, x)], 1.0);
                    }
                    assert!(v[(y, x)] == 0.0 || v[(y, x)] == 1.0);
                    assert_eq!(v[(y, x)], v[(h - 1 - y, x)]);
                    assert_eq!(v[(y, x)], v[(y, w - 1 - x)]);
                }
            }
        }
    }
}
