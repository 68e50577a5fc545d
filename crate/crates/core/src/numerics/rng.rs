//! Seeded randomness. Every random draw in the crate comes from a
//! [`ChaCha8Rng`] whose seed is derived from a user seed plus a label, so
//! independent consumers never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a label and a list of integers.
pub fn derive(seed: u64, label: &str, parts: &[u64]) -> u64 {
    // FNV-1a over the label
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut z = splitmix(seed ^ h);
    for &p in parts {
        z = splitmix(z ^ p);
    }
    z
}

pub fn stream(seed: u64, label: &str, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, label, parts))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * normal(rng)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_ne!(derive(1, "a", &[]), derive(1, "b", &[]));
        assert_ne!(derive(1, "a", &[0]), derive(1, "a", &[1]));
        assert_eq!(derive(7, "x", &[3]), derive(7, "x", &[3]));
        let a = normal_tensor(&mut stream(3, "w", &[]), &[4], 1.0);
        let b = normal_tensor(&mut stream(3, "w", &[]), &[4], 1.0);
        assert_eq!(a, b);
    }
}
