//! Procedural image corpora with known factors, planted ICA vectors, and
//! PNM image folders.

mod folder;
mod planted;
mod shapes;

use rand::Rng;

pub use folder::{load_folder, LoadReport};
pub use planted::{planted_ica, random_mixing, PlantedIca, PlantedIcaSpec};
pub use shapes::{render, shapes_dataset, Factor, FactorRole, FactorSpec, RendererGenerator, ShapeKind};

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::tensor::Matrix;

/// In-memory image corpus, one flattened image per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: ImageShape,
    pub images: Matrix,
    /// Ground-truth factors, for synthetic corpora.
    pub factors: Option<Matrix>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> Result<Image> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange { index: i, len: self.len() });
        }
        Image::new(self.shape, self.images.row(i).to_vec())
    }

    /// Uniformly drawn rows, with replacement.
    pub fn sample_batch<R: Rng>(&self, n: usize, rng: &mut R) -> Matrix {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        self.images.select_rows(&idx)
    }
}
