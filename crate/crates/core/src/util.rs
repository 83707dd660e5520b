use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mirror an integer index into `[0, n)` without repeating the edge
/// sample: for `n = 4`, `-1 -> 1`, `4 -> 2`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Continuous counterpart of [`reflect_index`] for sample coordinates.
#[inline]
pub fn reflect_coord(c: f64, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let last = (n - 1) as f64;
    let period = 2.0 * last;
    let mut m = c.rem_euclid(period);
    if m > last {
        m = period - m;
    }
    m
}

/// SplitMix64 finalizer; decorrelates derived seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a string, stable across platforms and releases.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(0, 4), 0);
        assert_eq!(reflect_index(3, 4), 3);
        assert_eq!(reflect_index(-7, 4), 1);
        assert_eq!(reflect_index(5, 1), 0);
        assert_eq!(reflect_coord(-0.25, 4), 0.25);
        assert_eq!(reflect_coord(3.5, 4), 2.5);
    }

    proptest::proptest! {
        #[test]
        fn reflection_is_mirror_symmetric(n in 2usize..40, d in 0.0f64..1.0, frac in 0.0f64..1.0) {
            let delta = d * (n - 1) as f64;
            proptest::prop_assert!((reflect_coord(-delta, n) - delta).abs() < 1e-12);
            let i = (frac * (n - 1) as f64) as isize;
            proptest::prop_assert_eq!(reflect_index(-i, n), i as usize);
        }
    }
}
