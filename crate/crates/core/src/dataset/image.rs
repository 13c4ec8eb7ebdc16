use std::path::Path;

use image::RgbImage;
use ndarray::{Array, Array2, Array3, ArrayBase, ArrayView3, Data, Dimension};

use crate::error::{Error, Result};

pub const DEFAULT_SIDE: usize = 75;

pub fn decode_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path).map(|img| img.to_rgb8()).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Pixel values `(h, w, 3)` on the 0..255 scale.
pub fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64
    })
}

/// Decodes and resizes to `(side, side, 3)`, values still on the 0..255 scale.
pub fn load_and_resize(path: &Path, side: usize) -> Result<Array3<f64>> {
    let img = decode_rgb(path)?;
    resize_bilinear(rgb_to_array(&img).view(), side, side)
}

/// Bilinear resampling with half-pixel centres and edge clamping (no
/// antialiasing), i.e. source coordinate `(dst + 0.5) * in / out - 0.5`.
pub fn resize_bilinear(src: ArrayView3<f64>, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
    let (in_h, in_w, channels) = src.dim();
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("cannot resize {in_h}x{in_w} to {out_h}x{out_w}")));
    }
    let rows = taps(in_h, out_h);
    let cols = taps(in_w, out_w);
    Ok(Array3::from_shape_fn((out_h, out_w, channels), |(y, x, c)| {
        let (y0, y1, wy) = rows[y];
        let (x0, x1, wx) = cols[x];
        let top = src[[y0, x0, c]] * (1.0 - wx) + src[[y0, x1, c]] * wx;
        let bottom = src[[y1, x0, c]] * (1.0 - wx) + src[[y1, x1, c]] * wx;
        top * (1.0 - wy) + bottom * wy
    }))
}

fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Maps 0..255 pixel values to `[0, 1]`.
pub fn normalize<S, D>(pixels: &ArrayBase<S, D>) -> Result<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    if let Some(&bad) = pixels.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::PixelRange(bad));
    }
    Ok(pixels.mapv(|v| v / 255.0))
}

pub fn encode_labels(labels: &[usize], classes: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        out[[i, y]] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::argmax_rows;
    use ndarray::{arr2, array, Axis};
    use proptest::prelude::*;

    #[test]
    fn checkerboard_upscale() {
        let src = array![[0.0, 255.0], [255.0, 0.0]].insert_axis(Axis(2));
        let got = resize_bilinear(src.view(), 4, 4).unwrap().remove_axis(Axis(2));
        // source coordinates along each axis: -0.25, 0.25, 0.75, 1.25 -> clamped weights 0, .25, .75, 1
        let expected = arr2(&[
            [0.0, 63.75, 191.25, 255.0],
            [63.75, 95.625, 159.375, 191.25],
            [191.25, 159.375, 95.625, 63.75],
            [255.0, 191.25, 63.75, 0.0],
        ]);
        assert_eq!(got, expected);
    }

    #[test]
    fn constant_image_stays_constant() {
        let src = Array3::from_shape_fn((75, 75, 3), |(_, _, c)| [12.0, 200.0, 77.0][c]);
        let out = resize_bilinear(src.view(), 75, 75).unwrap();
        assert_eq!(out, src);
        let src = Array3::from_elem((200, 200, 3), 131.0);
        let out = resize_bilinear(src.view(), 75, 75).unwrap();
        assert!(out.iter().all(|&v| v == 131.0));
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        RgbImage::from_fn(200, 200, |x, y| image::Rgb([x as u8, y as u8, 9]))
            .save(&path)
            .unwrap();
        let a = load_and_resize(&path, DEFAULT_SIDE).unwrap();
        assert_eq!(a.dim(), (75, 75, 3));
        assert_eq!(a, load_and_resize(&path, DEFAULT_SIDE).unwrap());
        let missing = load_and_resize(&dir.path().join("nope.png"), 75).unwrap_err();
        assert!(matches!(missing, Error::Decode { .. }));
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&array![255.0, 0.0, 51.0]).unwrap();
        assert_eq!(n, array![1.0, 0.0, 0.2]);
        assert!(matches!(normalize(&array![256.0]), Err(Error::PixelRange(_))));
        assert!(normalize(&array![-1.0]).is_err());
    }

    #[test]
    fn one_hot_examples() {
        let m = encode_labels(&[3], 10).unwrap();
        assert_eq!(m.row(0).sum(), 1.0);
        assert_eq!(m[[0, 3]], 1.0);
        assert_eq!(encode_labels(&[0], 1).unwrap(), array![[1.0]]);
        assert_eq!(
            encode_labels(&[2, 0, 1], 3).unwrap(),
            array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
        );
        assert!(matches!(
            encode_labels(&[0, 4], 4),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    proptest! {
        #[test]
        fn one_hot_decodes(labels in proptest::collection::vec(0usize..12, 0..50)) {
            let m = encode_labels(&labels, 12).unwrap();
            for row in m.rows() {
                prop_assert_eq!(row.sum(), 1.0);
            }
            prop_assert_eq!(argmax_rows(&m), labels);
        }

        #[test]
        fn normalize_is_monotone(a in 0u8..=255, b in 0u8..=255) {
            let n = normalize(&array![a as f64, b as f64]).unwrap();
            prop_assert_eq!(a <= b, n[0] <= n[1]);
            prop_assert!((0.0..=1.0).contains(&n[0]));
        }

        #[test]
        fn resize_is_deterministic(h in 1usize..20, w in 1usize..20, out in 1usize..20, seed in any::<u64>()) {
            let src = Array3::from_shape_fn((h, w, 3), |(i, j, c)| ((seed >> ((i + j + c) % 60)) & 0xff) as f64);
            let a = resize_bilinear(src.view(), out, out).unwrap();
            let b = resize_bilinear(src.view(), out, out).unwrap();
            prop_assert_eq!(&a, &b);
            // interpolation never leaves the source range
            let max = src.iter().copied().fold(0.0, f64::max);
            prop_assert!(a.iter().all(|&v| (0.0..=max).contains(&v)));
        }
    }
}
