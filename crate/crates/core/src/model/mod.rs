//! Backbone + head assembly, parameter accounting and checkpoints.

mod backbone;
mod head;

pub use backbone::{build_backbone, Architecture, Backbone, BackboneSpec, Preprocessing, Weights, WEIGHTS_DIR_ENV};
pub use head::{Activation, Dense, Head, HeadCache, HeadGrads, HeadLayer, HeadSpec, DEFAULT_DROPOUT, DEFAULT_WIDTHS};

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeatureShape, ParamStore};

/// A frozen backbone with a trainable head on top.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHandle {
    backbone: Backbone,
    head: Head,
}

/// Builds the head for `backbone` with Glorot-uniform weights drawn from `seed`.
pub fn assemble_model(backbone: Backbone, head: HeadSpec, seed: u64) -> Result<ModelHandle> {
    let head = Head::init(head, backbone.output_shape(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    ModelHandle::from_parts(backbone, head)
}

/// `(trainable, nontrainable)` scalar counts.
pub fn count_parameters(model: &ModelHandle) -> (usize, usize) {
    (model.trainable_param_count(), model.nontrainable_param_count())
}

impl ModelHandle {
    pub fn from_parts(backbone: Backbone, head: Head) -> Result<Self> {
        if backbone.output_shape() != head.input_shape() {
            return Err(Error::Shape(format!(
                "backbone produces {} features but the head was built for {}",
                backbone.output_shape(),
                head.input_shape()
            )));
        }
        Ok(Self { backbone, head })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.backbone.input_shape()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.head.param_count()
    }

    pub fn nontrainable_param_count(&self) -> usize {
        self.backbone.param_count()
    }

    /// Backbone features for a batch, flattened to `(n, h*w*c)`.
    pub fn features(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
        let maps = self.backbone.features_batch(images)?;
        let n = maps.len_of(Axis(0));
        let per = self.backbone.output_shape().len();
        Ok(maps.into_shape((n, per)).expect("contiguous feature maps"))
    }

    /// Inference-mode class probabilities, `(n, K)`.
    pub fn predict_proba(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
        self.head.probabilities(self.features(images)?.view())
    }

    pub fn predict(&self, images: ArrayView4<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(images)?))
    }

    /// Probability of class `c` for one image and its gradient on the image,
    /// dropout disabled.
    pub fn class_probability_gradient(&self, image: ArrayView3<f64>, class: usize) -> Result<(f64, Array3<f64>)> {
        let (p, g) = self.class_probability_gradient_batch(image.insert_axis(Axis(0)), class)?;
        Ok((p[0], g.index_axis_move(Axis(0), 0)))
    }

    /// [`Self::class_probability_gradient`] for a batch `(n, h, w, c)`. The head
    /// runs once on the whole batch.
    pub fn class_probability_gradient_batch(
        &self,
        images: ArrayView4<f64>,
        class: usize,
    ) -> Result<(Vec<f64>, Array4<f64>)> {
        let k = self.classes();
        if class >= k {
            return Err(Error::LabelOutOfRange {
                label: class,
                classes: k,
            });
        }
        let n = images.len_of(Axis(0));
        let traces = images
            .outer_iter()
            .map(|im| self.backbone.trace(im))
            .collect::<Result<Vec<_>>>()?;
        let shape = self.backbone.output_shape();
        let mut flat = Array2::zeros((n, shape.len()));
        for (mut row, t) in flat.outer_iter_mut().zip(&traces) {
            row.iter_mut()
                .zip(self.backbone.network().output_of(t).iter())
                .for_each(|(d, &v)| *d = v);
        }
        let cache = self.head.forward_cached::<ChaCha8Rng>(flat.view(), None)?;
        let p = &cache.probs;
        // d p_c / d z_j = p_c (delta_cj - p_j)
        let grad_logits = Array2::from_shape_fn((n, k), |(i, j)| {
            let delta = if j == class { 1.0 } else { 0.0 };
            p[[i, class]] * (delta - p[[i, j]])
        });
        let grad_features = self.head.input_gradient(&cache, &grad_logits);
        let mut out = Array4::zeros(images.raw_dim());
        for (i, t) in traces.iter().enumerate() {
            let g = grad_features
                .row(i)
                .to_owned()
                .into_shape(shape.dim())
                .expect("feature map shape");
            out.index_axis_mut(Axis(0), i)
                .assign(&self.backbone.input_gradient(t, g)?);
        }
        Ok((p.column(class).to_vec(), out))
    }

    /// Writes head weights, both specs and the class order into `dir`.
    pub fn save_checkpoint(&self, dir: &Path, class_names: &[String]) -> Result<()> {
        if class_names.len() != self.classes() {
            return Err(Error::Contract(format!(
                "{} class names for a {}-class head",
                class_names.len(),
                self.classes()
            )));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.head.to_params().save_npz(&dir.join(HEAD_WEIGHTS))?;
        let meta = CheckpointMeta {
            backbone: self.backbone.spec().clone(),
            head: self.head.spec().clone(),
            feature_shape: self.head.input_shape().dim().into(),
            class_names: class_names.to_vec(),
        };
        let path = dir.join(CHECKPOINT_META);
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Rebuilds the backbone from its spec and restores the head weights.
    pub fn load_checkpoint(dir: &Path) -> Result<(Self, Vec<String>)> {
        let path = dir.join(CHECKPOINT_META);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        if meta.class_names.len() != meta.head.classes {
            return Err(Error::format(&path, "class name count disagrees with the head"));
        }
        let backbone = build_backbone(&meta.backbone)?;
        let params = ParamStore::load_npz(&dir.join(HEAD_WEIGHTS))?;
        let head = Head::from_params(meta.head, backbone.output_shape(), &params)?;
        Ok((Self::from_parts(backbone, head)?, meta.class_names))
    }
}

pub const HEAD_WEIGHTS: &str = "head.npz";
pub const CHECKPOINT_META: &str = "model.json";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    backbone: BackboneSpec,
    head: HeadSpec,
    feature_shape: [usize; 3],
    class_names: Vec<String>,
}

pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn tiny_model(classes: usize) -> ModelHandle {
        let mut spec = BackboneSpec::new(Architecture::Tiny, Weights::Random { seed: 5 });
        spec.input_shape = [40, 40, 3];
        let backbone = build_backbone(&spec).unwrap();
        assemble_model(backbone, HeadSpec::new(classes), 11).unwrap()
    }

    #[test]
    fn counts_follow_the_head_formula() {
        let m = tiny_model(4);
        let f = m.backbone().output_shape();
        assert_eq!(m.trainable_param_count(), HeadSpec::new(4).param_count(f));
        assert_eq!(count_parameters(&m).1, m.backbone().param_count());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::init(HeadSpec::new(3), FeatureShape::new(1, 1, 7), &mut rng).unwrap();
        let err = ModelHandle::from_parts(m.backbone().clone(), head).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn same_seed_same_head() {
        assert_eq!(tiny_model(3), tiny_model(3));
    }

    #[test]
    fn probabilities_are_normalized() {
        let m = tiny_model(3);
        let x = Array4::from_shape_fn((2, 40, 40, 3), |(n, i, j, c)| {
            ((n + i * 3 + j * 7 + c) % 11) as f64 / 10.0
        });
        let p = m.predict_proba(x.view()).unwrap();
        assert_eq!(p.dim(), (2, 3));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p, m.predict_proba(x.view()).unwrap());
    }

    #[test]
    fn class_gradient_matches_finite_differences() {
        let m = tiny_model(3);
        let x = Array3::from_shape_fn((40, 40, 3), |(i, j, c)| ((i * 5 + j * 3 + c) % 17) as f64 / 16.0);
        let (p, g) = m.class_probability_gradient(x.view(), 1).unwrap();
        let batch = |x: &Array3<f64>| x.clone().insert_axis(Axis(0));
        assert_eq!(p, m.predict_proba(batch(&x).view()).unwrap()[[0, 1]]);
        let h = 1e-5;
        for &(i, j, c) in &[(0, 0, 0), (13, 21, 1), (39, 39, 2), (20, 5, 0)] {
            let mut plus = x.clone();
            plus[[i, j, c]] += h;
            let mut minus = x.clone();
            minus[[i, j, c]] -= h;
            let fd = (m.predict_proba(batch(&plus).view()).unwrap()[[0, 1]]
                - m.predict_proba(batch(&minus).view()).unwrap()[[0, 1]])
                / (2.0 * h);
            assert!(
                (fd - g[[i, j, c]]).abs() < 1e-7,
                "({i},{j},{c}): {fd} vs {}",
                g[[i, j, c]]
            );
        }
    }

    #[test]
    fn batched_gradient_matches_single_images() {
        let m = tiny_model(3);
        let xs = Array4::from_shape_fn((3, 40, 40, 3), |(n, i, j, c)| {
            ((n * 7 + i * 5 + j * 3 + c) % 13) as f64 / 12.0
        });
        let (p, g) = m.class_probability_gradient_batch(xs.view(), 2).unwrap();
        for (n, x) in xs.outer_iter().enumerate() {
            let (p1, g1) = m.class_probability_gradient(x, 2).unwrap();
            assert!((p[n] - p1).abs() < 1e-15);
            let err = (&g.index_axis(Axis(0), n) - &g1)
                .mapv(f64::abs)
                .fold(0.0, |a: f64, &b| a.max(b));
            assert!(err < 1e-15, "{err}");
        }
        assert!(m.class_probability_gradient_batch(xs.view(), 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny_model(2);
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        m.save_checkpoint(dir.path(), &names).unwrap();
        let (back, back_names) = ModelHandle::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back_names, names);
        assert!(m.save_checkpoint(dir.path(), &names[..1]).is_err());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let m = ndarray::array![[0.2, 0.5, 0.5], [0.9, 0.05, 0.05]];
        assert_eq!(argmax_rows(&m), vec![1, 0]);
    }
}
