use ndarray::{Array2, Array3, Array4, Axis};
use rayon::prelude::*;

use super::image::{encode_labels, load_and_resize, normalize};
use super::index::DatasetIndex;
use super::synthetic::SyntheticDataset;
use crate::error::{Error, Result};

/// Random access to normalized images and their labels.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> usize;

    fn class_count(&self) -> usize;

    /// `(side, side, 3)` with values in `[0, 1]`.
    fn image(&self, i: usize) -> Result<Array3<f64>>;
}

impl ImageSource for SyntheticDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn class_count(&self) -> usize {
        self.class_names.len()
    }

    fn image(&self, i: usize) -> Result<Array3<f64>> {
        Ok(self.pixels(i).mapv(|v| v as f64 / 255.0))
    }
}

/// Images read from disk and resized on demand.
#[derive(Debug, Clone)]
pub struct DiskSource {
    pub index: DatasetIndex,
    pub side: usize,
}

impl ImageSource for DiskSource {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn label(&self, i: usize) -> usize {
        self.index.samples[i].label
    }

    fn class_count(&self) -> usize {
        self.index.class_count()
    }

    fn image(&self, i: usize) -> Result<Array3<f64>> {
        normalize(&load_and_resize(&self.index.absolute_path(i), self.side)?)
    }
}

/// A view restricted to (and reordered by) `indices`.
pub struct Subset<'a, S: ImageSource + ?Sized> {
    pub source: &'a S,
    pub indices: &'a [usize],
}

impl<'a, S: ImageSource + ?Sized> Subset<'a, S> {
    pub fn new(source: &'a S, indices: &'a [usize]) -> Self {
        Self { source, indices }
    }
}

impl<S: ImageSource + ?Sized> ImageSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn label(&self, i: usize) -> usize {
        self.source.label(self.indices[i])
    }

    fn class_count(&self) -> usize {
        self.source.class_count()
    }

    fn image(&self, i: usize) -> Result<Array3<f64>> {
        self.source.image(self.indices[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    /// `(n, h, w, 3)` in `[0, 1]`.
    pub data: Array4<f64>,
    pub labels: Vec<usize>,
    pub labels_onehot: Array2<f64>,
}

impl ImageBatch {
    /// Loads `indices` of `source` in parallel; the result does not depend on
    /// the thread count.
    pub fn gather<S: ImageSource + ?Sized>(source: &S, indices: &[usize]) -> Result<Self> {
        let images: Vec<Array3<f64>> = indices.par_iter().map(|&i| source.image(i)).collect::<Result<_>>()?;
        let labels: Vec<usize> = indices.iter().map(|&i| source.label(i)).collect();
        let labels_onehot = encode_labels(&labels, source.class_count())?;
        let Some(first) = images.first() else {
            return Ok(Self {
                data: Array4::zeros((0, 0, 0, 3)),
                labels,
                labels_onehot,
            });
        };
        let dim = first.dim();
        if let Some(bad) = images.iter().find(|im| im.dim() != dim) {
            return Err(Error::Shape(format!(
                "mixed image shapes {:?} and {:?}",
                dim,
                bad.dim()
            )));
        }
        let views: Vec<_> = images.iter().map(|im| im.view()).collect();
        let data = ndarray::stack(Axis(0), &views).expect("shapes checked");
        Ok(Self {
            data,
            labels,
            labels_onehot,
        })
    }

    pub fn all<S: ImageSource + ?Sized>(source: &S) -> Result<Self> {
        Self::gather(source, &(0..source.len()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
