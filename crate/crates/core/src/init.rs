use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Glorot/Xavier uniform initialisation: entries uniform in `[-a, a]` with
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<T: Scalar>(
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid(
            "xavier_init",
            format!("fan values must be >= 1, got fan_in={fan_in}, fan_out={fan_out}"),
        ));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)))
}
