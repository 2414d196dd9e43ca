//! Seeding, shuffling and mini-batch assembly shared by every trainer.

use std::ops::Range;

use comen_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageShape, LabeledImage};

/// Independent sub-seeds for the random streams of one run.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const HEADS: u64 = 5;
    pub const RANDOM_DOMAINS: u64 = 6;
    pub const PRETRAIN_SHUFFLE: u64 = 7;
}

/// splitmix64 of `seed` mixed with `tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Visiting order of `n` samples in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64 + 1));
    order.shuffle(&mut r);
    order
}

/// Consecutive ranges of at most `size`; a trailing singleton is folded
/// into the previous batch because training-mode normalization needs two
/// samples.
pub fn batch_ranges(n: usize, size: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = last.end;
    }
    out
}

/// `B×C×H×W` tensor of the selected images.
pub fn stack_images(images: &[LabeledImage], rows: &[usize], shape: ImageShape) -> Tensor {
    let per = shape.numel();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&images[r].pixels);
    }
    Tensor::new(
        &[rows.len(), shape.channels, shape.height, shape.width],
        data,
    )
    .expect("image size")
}

pub fn labels_of(images: &[LabeledImage], rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&r| images[r].class_label).collect()
}

/// Selected rows of a 2-D tensor.
pub fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), w], data).expect("row width")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_and_avoid_singletons() {
        assert_eq!(batch_ranges(5, 2), vec![0..2, 2..5]);
        assert_eq!(batch_ranges(4, 2), vec![0..2, 2..4]);
        assert_eq!(batch_ranges(1, 4), vec![0..1]);
    }

    #[test]
    fn orders_are_permutations_and_repeatable() {
        let a = epoch_order(50, 9, 3);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 9, 3));
        assert_ne!(a, epoch_order(50, 9, 4));
    }
}
