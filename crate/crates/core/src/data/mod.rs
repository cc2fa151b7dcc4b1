//! Datasets: IDX loading, a procedural generator, percent-slice splits and
//! seeded batching.

mod idx;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use split::{parse_split_spec, SplitParseError, SplitParseErrorKind, SplitSpec};
pub use synthetic::{gen_synthetic, SyntheticParams};

/// An image-classification dataset. Cloning and slicing share the pixel buffer.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    height: usize,
    width: usize,
    channels: usize,
    classes: usize,
    images: Arc<Vec<u8>>,
    labels: Arc<Vec<u32>>,
    range: Range<usize>,
}

impl Dataset {
    /// `images` is `[n,h,w,c]` row-major.
    pub fn new(
        name: impl Into<String>,
        shape: [usize; 4],
        images: Vec<u8>,
        labels: Vec<u32>,
        classes: usize,
    ) -> Result<Self> {
        let [n, h, w, c] = shape;
        if images.len() != n * h * w * c {
            return Err(Error::InvalidArgument(format!(
                "image buffer has {} bytes, shape {shape:?} needs {}",
                images.len(),
                n * h * w * c
            )));
        }
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {n} images",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelRange {
                label: bad as usize,
                classes,
            });
        }
        Ok(Dataset {
            name: name.into(),
            height: h,
            width: w,
            channels: c,
            classes,
            images: Arc::new(images),
            labels: Arc::new(labels),
            range: 0..n,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(h, w, c)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Raw pixels of example `i` (relative to this view).
    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.pixels_per_image();
        let g = self.range.start + i;
        &self.images[g * p..(g + 1) * p]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[self.range.start + i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels[self.range.clone()]
    }

    /// Sub-view of examples `range` of this view, in original order.
    pub fn slice(&self, range: Range<usize>) -> Dataset {
        assert!(range.end <= self.len(), "slice out of bounds");
        let mut out = self.clone();
        out.range = self.range.start + range.start..self.range.start + range.end;
        out
    }

    pub fn apply_split(&self, spec: &SplitSpec) -> Dataset {
        self.slice(spec.index_range(self.len()))
    }

    /// Images `idx` as an f32 `[b,h,w,c]` tensor in `[-1, 1]`.
    pub fn images_f32(&self, idx: &[usize]) -> Tensor<f32> {
        let p = self.pixels_per_image();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend(self.image(i).iter().map(|&v| pixel_to_f32(v)));
        }
        Tensor::new(
            vec![idx.len(), self.height, self.width, self.channels],
            data,
        )
        .expect("gathered buffer matches shape")
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in self.labels() {
            h[l as usize] += 1;
        }
        h
    }
}

/// `x / 127.5 - 1`, mapping 0 to -1 and 255 to +1.
pub fn pixel_to_f32(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Named base splits of one data source (e.g. `train`, `validation`, `test`).
#[derive(Debug, Clone, Default)]
pub struct SplitRegistry {
    splits: BTreeMap<String, Dataset>,
}

impl SplitRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, ds: Dataset) {
        self.splits.insert(name.into(), ds);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.splits.keys().map(String::as_str)
    }

    pub fn resolve(&self, spec: &SplitSpec) -> Result<Dataset> {
        let base = self
            .splits
            .get(&spec.name)
            .ok_or_else(|| Error::UnknownSplit(spec.name.clone()))?;
        Ok(base.apply_split(spec))
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Positions within the dataset view.
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, domain::SHUFFLE, epoch, 0));
    order
}

/// Iterator over one epoch of shuffled batches; the last batch may be short.
#[derive(Debug)]
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    Ok(Batches {
        ds,
        order: epoch_permutation(ds.len(), seed, epoch),
        batch_size,
        pos: 0,
    })
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            images: self.ds.images_f32(&indices),
            labels: indices.iter().map(|&i| self.ds.label(i)).collect(),
            indices,
        })
    }
}
