use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Bound of the normalized (Glorot) uniform initializer.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples a tensor i.i.d. from `U[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init<R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
    rng: &mut R,
) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::argument(
            "glorot_init",
            format!("fans must be positive, got ({fan_in}, {fan_out})"),
        ));
    }
    let b = glorot_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-b, b).map_err(|e| Error::argument("glorot_init", e.to_string()))?;
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bound_for_equal_fans_of_three_is_one() {
        assert_eq!(glorot_bound(3, 3), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = glorot_init(3, 3, &[50, 50], &mut rng).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = glorot_init(4, 7, &[7, 4], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = glorot_init(4, 7, &[7, 4], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = glorot_init(2, 4, &[10_000], &mut rng).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn zero_fan_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(glorot_init(0, 3, &[3], &mut rng).is_err());
        assert!(glorot_init(3, 0, &[3], &mut rng).is_err());
    }

    proptest::proptest! {
        #[test]
        fn samples_never_exceed_bound(fan_in in 1usize..500, fan_out in 1usize..500, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = glorot_init(fan_in, fan_out, &[64], &mut rng).unwrap();
            let b = glorot_bound(fan_in, fan_out);
            proptest::prop_assert!(t.data().iter().all(|v| v.abs() <= b));
        }
    }
}
