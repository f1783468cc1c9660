use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Glorot normal draw: i.i.d. `N(0, (gain·sqrt(2/(fan_in+fan_out)))²)`,
/// laid out `[fan_in × fan_out]` so activations multiply on the left.
pub fn xavier_normal<R: Rng>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Tensor {
    assert!(fan_in >= 1 && fan_out >= 1, "xavier_normal: fans must be positive");
    let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive fans")
}

/// Target standard deviation of [`xavier_normal`].
pub fn xavier_std(fan_in: usize, fan_out: usize, gain: f64) -> f64 {
    gain * (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Population standard deviation of a slice.
pub fn empirical_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn gain_one_matches_target_std() {
        let w = xavier_normal(512, 512, 1.0, &mut rng_for(11, "w"));
        let s = empirical_std(w.data());
        assert!((0.0429..=0.0455).contains(&s), "std {s}");
        assert!((xavier_std(512, 512, 1.0) - 0.044194).abs() < 1e-6);
    }

    #[test]
    fn zero_gain_and_determinism() {
        let w = xavier_normal(4, 3, 0.0, &mut rng_for(1, "z"));
        assert!(w.data().iter().all(|v| *v == 0.0));
        let a = xavier_normal(8, 8, 0.7, &mut rng_for(5, "same"));
        let b = xavier_normal(8, 8, 0.7, &mut rng_for(5, "same"));
        assert_eq!(a.data(), b.data());
    }
}
