pub mod docred;
pub mod synth;

use rand::seq::SliceRandom;

use crate::tensor::init;

/// Document indices for one epoch, shuffled with a generator derived from
/// `(seed, epoch)` and cut into batches of `batch_size`.
pub fn split_and_batch(n_docs: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..n_docs).collect();
    let mut rng = init::rng(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
