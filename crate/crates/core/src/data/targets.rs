use ndarray::Array3;
use rand::seq::index;

use super::{load_image, DomainDataset, ImageBatch};
use crate::error::{Error, Result};
use crate::rng;

/// The unlabeled target samples available for adaptation (`k = 1` is the
/// one-shot setting).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub images: Vec<Array3<f64>>,
    pub k: usize,
    pub selection_seed: u64,
    pub source_dataset: String,
    /// Dataset indices the images were drawn from, in draw order.
    pub indices: Vec<usize>,
}

impl TargetSet {
    /// A batch of one holding target `i`.
    pub fn batch(&self, i: usize) -> Result<ImageBatch> {
        ImageBatch::stack(std::slice::from_ref(&self.images[i]), None)
    }
}

/// Draws `k` distinct samples uniformly without replacement, using a stream
/// that depends only on `seed`.
pub fn select_targets(dataset: &DomainDataset, k: usize, seed: u64, size: usize) -> Result<TargetSet> {
    if k == 0 {
        return Err(Error::Validation("k_targets must be at least 1".into()));
    }
    if k > dataset.len() {
        return Err(Error::Validation(format!(
            "cannot select {k} targets from `{}` with {} samples",
            dataset.domain_name,
            dataset.len()
        )));
    }
    let mut rng = rng::stream(seed, rng::TARGET_SELECTION);
    let indices = index::sample(&mut rng, dataset.len(), k).into_vec();
    let images = indices
        .iter()
        .map(|&i| load_image(&dataset.samples[i].path, size))
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetSet {
        images,
        k,
        selection_seed: seed,
        source_dataset: dataset.domain_name.clone(),
        indices,
    })
}
