//! Shared fixtures for the criterion benches.

use fairtat_core::data::{make_blobs, Dataset};
use fairtat_core::{ModelDims, ModelParams, Tensor};

/// A model and one batch drawn from Gaussian blobs.
pub fn fixture(dim: usize, hidden: &[usize], classes: usize, batch: usize) -> (ModelParams, Tensor, Vec<usize>) {
    let data: Dataset = make_blobs(classes, batch.div_ceil(classes), dim, 1.0, 0.5, 7).expect("valid blob parameters");
    let indices: Vec<usize> = (0..batch).collect();
    let (x, y) = data.batch(&indices).expect("batch within the dataset");
    let dims = ModelDims::new(dim, hidden.to_vec(), classes).expect("valid dims");
    (ModelParams::init(dims, 7).expect("valid init"), x, y)
}
