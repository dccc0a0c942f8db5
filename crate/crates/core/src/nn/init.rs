//! Seeded He-uniform weight initialization for ReLU stacks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::tensor::Tensor;

/// He-uniform: U(-limit, limit) with `limit = sqrt(6 / fan_in)`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data)
}

/// Conv weight `[O,C,K,K]` with fan_in = C*K*K.
pub fn conv_weight(o: usize, c: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    he_uniform(&[o, c, k, k], c * k * k, rng)
}

/// Dense weight `[M,N]` with fan_in = N.
pub fn dense_weight(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    he_uniform(&[m, n], n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::rng_for;

    #[test]
    fn bounded_and_deterministic() {
        let a = conv_weight(4, 3, 3, &mut rng_for(1, &[0]));
        let b = conv_weight(4, 3, 3, &mut rng_for(1, &[0]));
        assert_eq!(a.data(), b.data());
        let limit = (6.0 / 27.0f64).sqrt();
        assert!(a.data().iter().all(|v| v.abs() < limit));
    }
}
