//! Deterministic stand-in corpus: class `k` is a coloured vertical bar in the
//! `k`-th of `K` column bands over a dim noisy background.
//!
//! The bar hue differs per class and every bar pixel has a channel sum above
//! the largest possible background channel sum, so the per-band intensity sums
//! separate the classes linearly.

use std::fs;
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::index::{DatasetIndex, Sample};
use crate::error::{Error, Result};

const BACKGROUND_MAX: u8 = 48;
const BAR_LEVEL: f64 = 215.0;
const BAR_NOISE: u8 = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `(n, side, side, 3)`, class-major order.
    pub images: Array4<u8>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub seed: u64,
}

pub fn class_names(classes: usize) -> Vec<String> {
    let width = (classes.max(2) - 1).to_string().len();
    (0..classes).map(|k| format!("{k:0width$}")).collect()
}

/// Fully saturated hue `k / K`, scaled so the brightest channel is `level`.
fn palette(k: usize, classes: usize, level: f64) -> [f64; 3] {
    let h = 6.0 * k as f64 / classes as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r * level, g * level, b * level]
}

/// Column range of band `k` out of `classes` over `side` pixels.
pub fn band(k: usize, classes: usize, side: usize) -> (usize, usize) {
    (k * side / classes, (k + 1) * side / classes)
}

pub fn generate_synthetic(classes: usize, per_class: usize, side: usize, seed: u64) -> Result<SyntheticDataset> {
    if classes < 2 || per_class < 3 {
        return Err(Error::Config(format!(
            "synthetic data needs K >= 2 and at least 3 images per class (got K={classes}, {per_class})"
        )));
    }
    if side < classes {
        return Err(Error::Config(format!(
            "side {side} too small for {classes} column bands"
        )));
    }
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / per_class).collect();
    let mut images = Array4::<u8>::zeros((n, side, side, 3));
    images
        .outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut img)| {
            // one independent stream per image keeps generation order-free
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            img.mapv_inplace(|_| rng.gen_range(0..=BACKGROUND_MAX));
            let k = labels[i];
            let (c0, c1) = band(k, classes, side);
            let colour = palette(k, classes, BAR_LEVEL);
            let (r0, r1) = (side / 5, side - side / 5);
            for mut px in img.slice_mut(s![r0..r1, c0..c1, ..]).rows_mut() {
                for c in 0..3 {
                    px[c] = colour[c] as u8 + rng.gen_range(0..=BAR_NOISE);
                }
            }
        });
    Ok(SyntheticDataset {
        images,
        labels,
        class_names: class_names(classes),
        seed,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.dim().1
    }

    pub fn pixels(&self, i: usize) -> Array3<u8> {
        self.images.slice(s![i, .., .., ..]).to_owned()
    }

    /// Writes `<root>/<class>/<class>_<nnnnn>.png` and returns the index a
    /// fresh scan of `root` would produce.
    pub fn export(&self, root: &Path) -> Result<DatasetIndex> {
        for name in &self.class_names {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let side = self.side() as u32;
        let samples: Vec<Sample> = (0..self.len())
            .into_par_iter()
            .map(|i| {
                let name = &self.class_names[self.labels[i]];
                let rel = Path::new(name).join(format!("{name}_{i:05}.png"));
                let px = self.pixels(i);
                let img = RgbImage::from_raw(side, side, px.into_raw_vec()).expect("buffer matches dimensions");
                let full = root.join(&rel);
                img.save(&full).map_err(|e| Error::format(&full, e))?;
                Ok(Sample {
                    path: rel,
                    label: self.labels[i],
                })
            })
            .collect::<Result<_>>()?;
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            samples,
            class_names: self.class_names.clone(),
        })
    }
}
