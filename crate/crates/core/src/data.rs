//! In-memory labelled image sets.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images stacked as (N, C, H, W) with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape {
                op: "Dataset::new",
                axis: "rank",
                expected: 4,
                actual: images.shape().len(),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// (C, H, W) of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let per = self.images.len() / self.len();
        &self.images.data()[i * per..(i + 1) * per]
    }

    /// Image `i` as a (C, H, W) tensor.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(self.image_shape().to_vec(), self.pixels(i).to_vec()).expect("shape checked")
    }

    /// Images at `idx` stacked into an (n, C, H, W) batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<u8>) {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            data.extend_from_slice(self.pixels(i));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(vec![idx.len(), c, h, w], data).expect("shape checked"),
            labels,
        )
    }

    /// Contiguous sub-range, clamped to the dataset. Errors when empty.
    pub fn subset(&self, range: Range<usize>) -> Result<Dataset> {
        let end = range.end.min(self.len());
        let start = range.start.min(end);
        if start == end {
            return Err(Error::InvalidArgument(format!(
                "empty subset {start}..{end} of a {}-image set",
                self.len()
            )));
        }
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = self.batch(&idx);
        Ok(Dataset { images, labels })
    }

    pub fn first(&self, n: usize) -> Result<Dataset> {
        self.subset(0..n)
    }
}
