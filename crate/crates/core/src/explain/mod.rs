//! Expected-gradients attribution.
//!
//! For a class output `f_c`, input `x` and background images `b_1..b_m`, the
//! attribution of input element `i` is
//!
//! ```text
//! phi_i = E_b E_alpha[ (x_i - b_i) * d f_c / d x_i (b + alpha (x - b)) ]
//! ```
//!
//! with `alpha ~ U[0, 1]`. The sampling budget is split evenly over the
//! backgrounds and, within one background, `alpha` is drawn one per stratum of
//! `[0, 1]` (jittered stratification). Per-background means are averaged with
//! equal weight, so an affine `f` is attributed exactly whenever every
//! background receives at least one sample.

mod overlay;

pub use overlay::{overlay, panel, render_overlay, render_panel, NEGATIVE, POSITIVE};

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis};
use ndarray_npy::{NpzReader, NpzWriter};
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageBatch, ImageSource};
use crate::error::{Error, Result};
use crate::model::ModelHandle;

pub const DEFAULT_BACKGROUND: usize = 100;
pub const DEFAULT_SAMPLES: usize = 200;
/// Gradient evaluations summed per parallel work item.
const GRADIENT_CHUNK: usize = 16;
/// Lower bound on the prediction gap used to scale the additivity tolerance,
/// in output units. For class probabilities a gap below 0.01 is judged as if
/// it were 0.01, so near-constant classes are not held to a vanishing budget.
pub const GAP_FLOOR: f64 = 1e-2;

/// A scalar-per-class model over `(h, w, c)` inputs.
pub trait Differentiable: Sync {
    fn classes(&self) -> usize;

    fn output(&self, x: ArrayView3<f64>, class: usize) -> Result<f64>;

    /// `f_c(x)` and its gradient with respect to `x`.
    fn gradient(&self, _x: ArrayView3<f64>, _class: usize) -> Result<(f64, Array3<f64>)> {
        Err(Error::Capability("model does not provide input gradients".into()))
    }

    /// Gradients at each of `xs` `(n, h, w, c)`; models that batch cheaply
    /// override this.
    fn gradient_batch(&self, xs: ArrayView4<f64>, class: usize) -> Result<Array4<f64>> {
        let mut out = Array4::zeros(xs.raw_dim());
        for (x, mut o) in xs.outer_iter().zip(out.outer_iter_mut()) {
            o.assign(&self.gradient(x, class)?.1);
        }
        Ok(out)
    }
}

impl Differentiable for ModelHandle {
    fn classes(&self) -> usize {
        ModelHandle::classes(self)
    }

    fn output(&self, x: ArrayView3<f64>, class: usize) -> Result<f64> {
        let p = self.predict_proba(x.insert_axis(Axis(0)))?;
        p.get([0, class]).copied().ok_or(Error::LabelOutOfRange {
            label: class,
            classes: self.classes(),
        })
    }

    fn gradient(&self, x: ArrayView3<f64>, class: usize) -> Result<(f64, Array3<f64>)> {
        self.class_probability_gradient(x, class)
    }

    fn gradient_batch(&self, xs: ArrayView4<f64>, class: usize) -> Result<Array4<f64>> {
        Ok(self.class_probability_gradient_batch(xs, class)?.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSet {
    /// `(m, h, w, c)`.
    pub images: Array4<f64>,
    /// Positions in the source the images were drawn from, in draw order.
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl BackgroundSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn from_images(images: Array4<f64>) -> Self {
        let m = images.len_of(Axis(0));
        Self {
            images,
            indices: (0..m).collect(),
            seed: 0,
        }
    }
}

/// Seeded uniform sample of `m` training images without replacement.
pub fn select_background<S: ImageSource + ?Sized>(train: &S, m: usize, seed: u64) -> Result<BackgroundSet> {
    let n = train.len();
    if m == 0 {
        return Err(Error::Config("background size must be at least 1".into()));
    }
    if m > n {
        return Err(Error::Config(format!(
            "background size {m} exceeds the {n} available training images"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = sample(&mut rng, n, m).into_vec();
    let batch = ImageBatch::gather(train, &indices)?;
    Ok(BackgroundSet {
        images: batch.data,
        indices,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub values: Array3<f64>,
    pub base_value: f64,
    pub explained_output: f64,
    pub class_index: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub background_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdditivityReport {
    pub residual: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl AttributionMap {
    pub fn residual(&self) -> f64 {
        (self.values.sum() + self.base_value - self.explained_output).abs()
    }
}

/// Checks `|sum(phi) + base - f(x)| <= tol_rel * max(|f(x) - base|, GAP_FLOOR)`.
pub fn verify_additivity(attr: &AttributionMap, tol_rel: f64) -> AdditivityReport {
    verify_additivity_with_floor(attr, tol_rel, GAP_FLOOR)
}

pub fn verify_additivity_with_floor(attr: &AttributionMap, tol_rel: f64, gap_floor: f64) -> AdditivityReport {
    let residual = attr.residual();
    let gap = attr.explained_output - attr.base_value;
    let tolerance = tol_rel * gap.abs().max(gap_floor);
    AdditivityReport {
        residual,
        gap,
        tolerance,
        passed: residual <= tolerance,
    }
}

/// Independent seed for the `index`-th explanation of a batch.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// Expected-gradients attribution of `model`'s class `class` at `x`.
pub fn attribute<M: Differentiable + ?Sized>(
    model: &M,
    x: ArrayView3<f64>,
    background: &BackgroundSet,
    class: usize,
    n_samples: usize,
    seed: u64,
) -> Result<AttributionMap> {
    let k = model.classes();
    if class >= k {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: k,
        });
    }
    if background.is_empty() {
        return Err(Error::Config("background set is empty".into()));
    }
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let bg_shape = background.images.index_axis(Axis(0), 0).dim();
    if bg_shape != x.dim() {
        return Err(Error::Shape(format!(
            "input {:?} vs background {:?}",
            x.dim(),
            bg_shape
        )));
    }
    let m = background.len();

    // which backgrounds are used and how many alpha samples each gets
    let used: Vec<usize> = if n_samples >= m {
        (0..m).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut picked = sample(&mut rng, m, n_samples).into_vec();
        picked.sort_unstable();
        picked
    };
    let per = n_samples / used.len();
    let extra = n_samples % used.len();
    let mut jobs = Vec::with_capacity(n_samples);
    for (slot, &b) in used.iter().enumerate() {
        let count = per + usize::from(slot < extra);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        for j in 0..count {
            let alpha = (j as f64 + rng.gen::<f64>()) / count as f64;
            jobs.push((b, alpha, count));
        }
    }

    // fixed-size chunks summed in order: the result does not depend on scheduling
    let partials: Vec<Array3<f64>> = jobs
        .par_chunks(GRADIENT_CHUNK)
        .map(|chunk| {
            let (h, w, c) = x.dim();
            let mut points = Array4::zeros((chunk.len(), h, w, c));
            for (mut p, &(b, alpha, _)) in points.outer_iter_mut().zip(chunk) {
                let bg = background.images.index_axis(Axis(0), b);
                p.assign(&(&bg + &((&x - &bg) * alpha)));
            }
            let grads = model.gradient_batch(points.view(), class)?;
            let mut acc = Array3::zeros(x.dim());
            for (g, &(b, _, count)) in grads.outer_iter().zip(chunk) {
                let delta = &x - &background.images.index_axis(Axis(0), b);
                acc += &(&g * &delta / count as f64);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut values = Array3::zeros(x.dim());
    for p in &partials {
        values += p;
    }
    values /= used.len() as f64;

    let base_value = (0..m)
        .into_par_iter()
        .map(|b| model.output(background.images.index_axis(Axis(0), b), class))
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum::<f64>()
        / m as f64;
    let explained_output = model.output(x, class)?;
    Ok(AttributionMap {
        values,
        base_value,
        explained_output,
        class_index: class,
        seed,
        n_samples,
        background_size: m,
    })
}

/// Attributions for every class of `model` at `x`.
pub fn attribute_all_classes<M: Differentiable + ?Sized>(
    model: &M,
    x: ArrayView3<f64>,
    background: &BackgroundSet,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<AttributionMap>> {
    (0..model.classes())
        .map(|c| attribute(model, x, background, c, n_samples, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSidecar {
    pub base_value: f64,
    pub explained_output: f64,
    pub class_index: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub background_size: usize,
    pub residual: f64,
    pub shape: [usize; 3],
}

impl AttributionMap {
    /// Writes the values as a compressed `.npz` and the scalars as JSON.
    pub fn save(&self, npz: &Path, json: &Path) -> Result<()> {
        let file = fs::File::create(npz).map_err(|e| Error::io(npz, e))?;
        let mut w = NpzWriter::new_compressed(file);
        w.add_array("values", &self.values).map_err(|e| Error::format(npz, e))?;
        w.finish().map_err(|e| Error::format(npz, e))?;
        let sidecar = AttributionSidecar {
            base_value: self.base_value,
            explained_output: self.explained_output,
            class_index: self.class_index,
            seed: self.seed,
            n_samples: self.n_samples,
            background_size: self.background_size,
            residual: self.residual(),
            shape: self.values.dim().into(),
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::format(json, e))?;
        fs::write(json, text + "\n").map_err(|e| Error::io(json, e))
    }

    pub fn load(npz: &Path, json: &Path) -> Result<Self> {
        let text = fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
        let meta: AttributionSidecar = serde_json::from_str(&text).map_err(|e| Error::format(json, e))?;
        let file = fs::File::open(npz).map_err(|e| Error::io(npz, e))?;
        let mut r = NpzReader::new(file).map_err(|e| Error::format(npz, e))?;
        let values: Array3<f64> = r.by_name("values").map_err(|e| Error::format(npz, e))?;
        if <[usize; 3]>::from(values.dim()) != meta.shape {
            return Err(Error::format(npz, "value shape disagrees with the sidecar"));
        }
        Ok(Self {
            values,
            base_value: meta.base_value,
            explained_output: meta.explained_output,
            class_index: meta.class_index,
            seed: meta.seed,
            n_samples: meta.n_samples,
            background_size: meta.background_size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;

    /// `f_c(x) = w_c . x + c`.
    struct Linear {
        w: Vec<Array3<f64>>,
    }

    impl Differentiable for Linear {
        fn classes(&self) -> usize {
            self.w.len()
        }
        fn output(&self, x: ArrayView3<f64>, class: usize) -> Result<f64> {
            Ok((&self.w[class] * &x).sum() + class as f64)
        }
        fn gradient(&self, x: ArrayView3<f64>, class: usize) -> Result<(f64, Array3<f64>)> {
            Ok((self.output(x, class)?, self.w[class].clone()))
        }
    }

    struct Opaque;

    impl Differentiable for Opaque {
        fn classes(&self) -> usize {
            1
        }
        fn output(&self, x: ArrayView3<f64>, _: usize) -> Result<f64> {
            Ok(x.sum())
        }
    }

    fn grid(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((4, 3, 2), || rng.gen_range(-1.0..1.0))
    }

    fn linear() -> Linear {
        Linear {
            w: vec![grid(1), grid(2)],
        }
    }

    #[test]
    fn linear_model_single_background_is_exact() {
        let model = linear();
        let x = grid(3);
        let b = grid(4);
        let bg = BackgroundSet::from_images(b.clone().insert_axis(Axis(0)));
        for n in [1, 2, 7] {
            let a = attribute(&model, x.view(), &bg, 1, n, 0).unwrap();
            let expected = (&x - &b) * &model.w[1];
            for (u, v) in a.values.iter().zip(expected.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
            assert!(a.residual() < 1e-12);
            assert!(verify_additivity(&a, 1e-10).passed);
        }
    }

    #[test]
    fn linear_model_uses_background_mean() {
        let model = linear();
        let x = grid(5);
        let imgs: Vec<Array3<f64>> = (10..13).map(grid).collect();
        let views: Vec<_> = imgs.iter().map(|i| i.view()).collect();
        let bg = BackgroundSet::from_images(ndarray::stack(Axis(0), &views).unwrap());
        let mean = bg.images.mean_axis(Axis(0)).unwrap();
        let a = attribute(&model, x.view(), &bg, 0, 10, 9).unwrap();
        let expected = (&x - &mean) * &model.w[0];
        for (u, v) in a.values.iter().zip(expected.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn input_equal_to_background_gives_zeros() {
        let model = linear();
        let x = grid(6);
        let bg = BackgroundSet::from_images(x.clone().insert_axis(Axis(0)));
        let a = attribute(&model, x.view(), &bg, 0, 5, 1).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_gradient_is_capability_error() {
        let x = grid(0);
        let bg = BackgroundSet::from_images(grid(1).insert_axis(Axis(0)));
        let err = attribute(&Opaque, x.view(), &bg, 0, 3, 0).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn zero_attribution_fails_additivity() {
        let a = AttributionMap {
            values: Array3::zeros((2, 2, 1)),
            base_value: 0.2,
            explained_output: 0.7,
            class_index: 0,
            seed: 0,
            n_samples: 1,
            background_size: 1,
        };
        let r = verify_additivity(&a, 0.01);
        assert!(!r.passed);
        assert!((r.residual - 0.5).abs() < 1e-15);
    }

    #[test]
    fn background_selection() {
        let d = generate_synthetic(2, 4, 8, 0).unwrap();
        let all = select_background(&d, 8, 3).unwrap();
        let mut sorted = all.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        assert_eq!(select_background(&d, 1, 3).unwrap().len(), 1);
        assert_eq!(
            select_background(&d, 5, 11).unwrap(),
            select_background(&d, 5, 11).unwrap()
        );
        assert!(select_background(&d, 9, 0).is_err());
        assert!(select_background(&d, 0, 0).is_err());
    }

    #[test]
    fn save_and_load() {
        let model = linear();
        let bg = BackgroundSet::from_images(grid(8).insert_axis(Axis(0)));
        let a = attribute(&model, grid(9).view(), &bg, 1, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (npz, json) = (dir.path().join("a.npz"), dir.path().join("a.json"));
        a.save(&npz, &json).unwrap();
        assert_eq!(AttributionMap::load(&npz, &json).unwrap(), a);
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(meta["class_index"], 1);
        assert!(meta["residual"].as_f64().unwrap() < 1e-12);
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..4).map(|i| derive_seed(7, i)).collect();
        let unique: std::collections::BTreeSet<_> = s.iter().collect();
        assert_eq!(unique.len(), 4);
        assert_eq!(derive_seed(7, 2), s[2]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn linear_models_are_explained_exactly(seed in 0u64..1000, extra in 0usize..40, m in 1usize..5) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |shape: (usize, usize, usize)| Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0));
            let f = Linear { w: vec![draw((3, 3, 2)), draw((3, 3, 2))] };
            let x = draw((3, 3, 2));
            let bg = Array4::from_shape_simple_fn((m, 3, 3, 2), || rng.gen_range(-1.0..1.0));
            let set = BackgroundSet::from_images(bg.clone());
            // every background is visited once n >= m
            let a = attribute(&f, x.view(), &set, 1, m + extra, seed).unwrap();
            let expected = (&x - &bg.mean_axis(ndarray::Axis(0)).unwrap()) * &f.w[1];
            for (u, v) in a.values.iter().zip(&expected) {
                proptest::prop_assert!((u - v).abs() < 1e-10);
            }
            proptest::prop_assert!(a.residual() < 1e-10);
        }
    }
}
