use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shuffles pair indices `0..pairs` with a stream fixed by `(seed, epoch)`
/// and cuts them into batches of `batch`; the last batch may be short.
pub fn make_batches(pairs: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch >= 1, "batch size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..pairs).collect();
    order.shuffle(&mut rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_partition() {
        let b = make_batches(10, 4, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_epoch() {
        assert_eq!(make_batches(50, 8, 3, 2), make_batches(50, 8, 3, 2));
        assert_ne!(make_batches(50, 8, 3, 2), make_batches(50, 8, 3, 1));
        assert!(make_batches(0, 3, 0, 0).is_empty());
    }
}
