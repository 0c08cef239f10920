use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::{Error, Result, Rng};

/// Batches of image indices for one epoch.
#[derive(Clone, Debug)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Shuffles `indices` with `rng` and cuts them into batches; the last batch
/// may be short.
pub fn batch_iter(indices: &[usize], batch_size: usize, rng: &mut Rng) -> Result<Batches> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::Empty("no training images in split".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(rng);
    Ok(Batches { order, batch_size, pos: 0 })
}
