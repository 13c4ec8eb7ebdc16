use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView3, Axis};

use super::AttributionMap;
use crate::error::{Error, Result};

/// Colour for positive attributions.
pub const POSITIVE: [u8; 3] = [255, 0, 128];
/// Colour for negative attributions.
pub const NEGATIVE: [u8; 3] = [30, 136, 229];

fn grayscale(x: ArrayView3<f64>) -> Array2<f64> {
    x.map_axis(Axis(2), |px| {
        let v = if px.len() >= 3 {
            0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
        } else {
            px.mean().unwrap_or(0.0)
        };
        (v * 255.0).clamp(0.0, 255.0)
    })
}

fn channel_sum(values: ArrayView3<f64>) -> Array2<f64> {
    values.sum_axis(Axis(2))
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Blends the grey level toward the signed colour with weight `|t|`, `t` in [-1, 1].
fn tint(gray: f64, t: f64) -> Rgb<u8> {
    let colour = if t >= 0.0 { POSITIVE } else { NEGATIVE };
    let a = t.abs().min(1.0);
    Rgb(colour.map(|c| ((1.0 - a) * gray + a * c as f64).round() as u8))
}

fn blend(gray: &Array2<f64>, signed: &Array2<f64>, limit: f64, scale: u32) -> RgbImage {
    let (h, w) = gray.dim();
    let scale = scale.max(1);
    RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let (r, c) = ((y / scale) as usize, (x / scale) as usize);
        let t = if limit > 0.0 { signed[[r, c]] / limit } else { 0.0 };
        tint(gray[[r, c]], t)
    })
}

/// Channel-summed attribution over the greyscale image on a symmetric scale
/// set by the largest magnitude; each pixel becomes a `scale`-sized block.
pub fn overlay(x: ArrayView3<f64>, values: ArrayView3<f64>, scale: u32) -> Result<RgbImage> {
    if x.dim() != values.dim() {
        return Err(Error::Shape(format!(
            "image {:?} vs attribution {:?}",
            x.dim(),
            values.dim()
        )));
    }
    let signed = channel_sum(values);
    Ok(blend(&grayscale(x), &signed, max_abs(&signed), scale))
}

/// One row per attribution: the greyscale input next to its overlay. All rows
/// share one colour scale so classes can be compared.
pub fn panel(x: ArrayView3<f64>, attrs: &[AttributionMap], scale: u32) -> Result<RgbImage> {
    let gray = grayscale(x);
    let sums: Vec<Array2<f64>> = attrs
        .iter()
        .map(|a| {
            if a.values.dim() != x.dim() {
                return Err(Error::Shape(format!(
                    "image {:?} vs attribution {:?}",
                    x.dim(),
                    a.values.dim()
                )));
            }
            Ok(channel_sum(a.values.view()))
        })
        .collect::<Result<_>>()?;
    let limit = sums.iter().map(max_abs).fold(0.0, f64::max);
    let (h, w) = gray.dim();
    let (tile_w, tile_h) = (w as u32 * scale.max(1), h as u32 * scale.max(1));
    let mut out = RgbImage::new(tile_w * 2, tile_h * attrs.len().max(1) as u32);
    let plain = blend(&gray, &Array2::zeros((h, w)), 0.0, scale);
    for (row, s) in sums.iter().enumerate() {
        let y = row as u32 * tile_h;
        image::imageops::replace(&mut out, &plain, 0, y as i64);
        image::imageops::replace(&mut out, &blend(&gray, s, limit, scale), tile_w as i64, y as i64);
    }
    Ok(out)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    })
}

pub fn render_overlay(x: ArrayView3<f64>, attr: &AttributionMap, path: &Path, scale: u32) -> Result<()> {
    save(&overlay(x, attr.values.view(), scale)?, path)
}

pub fn render_panel(x: ArrayView3<f64>, attrs: &[AttributionMap], path: &Path, scale: u32) -> Result<()> {
    save(&panel(x, attrs, scale)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn image() -> Array3<f64> {
        Array3::from_shape_fn((5, 6, 3), |(i, j, c)| ((i * 6 + j + c) % 7) as f64 / 7.0)
    }

    fn is_gray(p: &Rgb<u8>) -> bool {
        p.0[0] == p.0[1] && p.0[1] == p.0[2]
    }

    #[test]
    fn zero_attribution_is_plain_grayscale() {
        let x = image();
        let img = overlay(x.view(), Array3::zeros((5, 6, 3)).view(), 2).unwrap();
        assert_eq!(img.dimensions(), (12, 10));
        assert!(img.pixels().all(is_gray));
    }

    #[test]
    fn single_positive_pixel() {
        let x = image();
        let mut a = Array3::zeros((5, 6, 3));
        a[[2, 4, 1]] = 0.3;
        let img = overlay(x.view(), a.view(), 1).unwrap();
        let tinted: Vec<(u32, u32)> = img
            .enumerate_pixels()
            .filter(|(_, _, p)| !is_gray(p))
            .map(|(x, y, _)| (x, y))
            .collect();
        assert_eq!(tinted, [(4, 2)]);
        assert_eq!(img.get_pixel(4, 2).0, POSITIVE);
    }

    #[test]
    fn negation_swaps_colours() {
        let x = image();
        let a = Array3::from_shape_fn((5, 6, 3), |(i, j, _)| (i as f64 - 2.0) * (j as f64 - 2.5));
        let pos = overlay(x.view(), a.view(), 1).unwrap();
        let neg = overlay(x.view(), (-&a).view(), 1).unwrap();
        for ((p, n), v) in pos.pixels().zip(neg.pixels()).zip(channel_sum(a.view()).iter()) {
            if *v > 0.0 {
                assert!(p.0[0] > p.0[2] && n.0[2] > n.0[0]);
            } else if *v < 0.0 {
                assert!(n.0[0] > n.0[2] && p.0[2] > p.0[0]);
            } else {
                assert_eq!(p, n);
            }
        }
    }

    #[test]
    fn panel_has_one_row_per_class() {
        let x = image();
        let attrs: Vec<AttributionMap> = (0..3)
            .map(|c| AttributionMap {
                values: Array3::from_elem((5, 6, 3), c as f64 - 1.0),
                base_value: 0.0,
                explained_output: 0.0,
                class_index: c,
                seed: 0,
                n_samples: 1,
                background_size: 1,
            })
            .collect();
        let img = panel(x.view(), &attrs, 3).unwrap();
        assert_eq!(img.dimensions(), (36, 45));
        // middle row has zero attribution, so both of its tiles are grey
        assert!(is_gray(img.get_pixel(20, 20)));
        assert!(!is_gray(img.get_pixel(20, 2)));
        let dir = tempfile::tempdir().unwrap();
        render_panel(x.view(), &attrs, &dir.path().join("p.png"), 2).unwrap();
        assert!(render_overlay(x.view(), &attrs[0], Path::new("/nonexistent/x.png"), 1).is_err());
    }
}
