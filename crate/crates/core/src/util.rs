//! Seeded RNG construction and small shared helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic, portable RNG used everywhere in the engine.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix several integers into one sub-seed (splitmix64 over the sequence).
///
/// Used to derive independent per-sample / per-stage streams from one run
/// seed without the streams overlapping.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = splitmix64(h);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Thread cap for the few embarrassingly parallel loops in the engine.
///
/// Reads `FWDADAPT_THREADS`; defaults to the available parallelism, capped
/// at 8. Results never depend on the value: parallel jobs are indexed and
/// written back into their own slots.
pub fn thread_cap() -> usize {
    if let Ok(v) = std::env::var("FWDADAPT_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get().min(8))
        .unwrap_or(1)
}

/// Deterministic parallel map over an index range: `out[i] = f(i)`.
///
/// Runs on up to `threads` scoped threads; output order is by index, so the
/// result is identical to the sequential map regardless of thread count.
pub fn parallel_map_indexed<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, slots) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(t * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|s| s.expect("job completed")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_seed_distinguishes_order() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[7, 8, 9]), mix_seed(&[7, 8, 9]));
    }

    #[test]
    fn parallel_map_matches_sequential() {
        let seq: Vec<usize> = (0..97).map(|i| i * i).collect();
        for threads in [1, 2, 3, 8] {
            let par = parallel_map_indexed(97, threads, |i| i * i);
            assert_eq!(par, seq);
        }
    }
}
