use rand::Rng;
use serde::{Deserialize, Serialize};

/// Scalarization weights. `w2` and `w3` split the mass left by `w1`
/// 4:1 between size and contrastive density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl ObjectiveWeights {
    pub fn from_accuracy_weight(w1: f64) -> Self {
        Self { w1, w2: 0.8 * (1.0 - w1), w3: 0.2 * (1.0 - w1) }
    }
}

pub fn sample_weights<R: Rng + ?Sized>(rng: &mut R) -> ObjectiveWeights {
    ObjectiveWeights::from_accuracy_weight(rng.random_range(0.25..=1.0))
}

/// `max(w1 * (accuracy - acc_star), w2 * -size) + w3 * contrastive`.
pub fn scalarize(accuracy: f64, size: usize, contrastive: f64, acc_star: f64, w: ObjectiveWeights) -> f64 {
    (w.w1 * (accuracy - acc_star)).max(w.w2 * -(size as f64)) + w.w3 * contrastive
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_value() {
        let w = ObjectiveWeights { w1: 0.5, w2: 0.4, w3: 0.1 };
        assert!((scalarize(0.8, 8, 0.5, 0.8, w) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn endpoint_weights() {
        let lo = ObjectiveWeights::from_accuracy_weight(0.25);
        assert!((lo.w2 - 0.6).abs() < 1e-15 && (lo.w3 - 0.15).abs() < 1e-15);
        assert_eq!(ObjectiveWeights::from_accuracy_weight(1.0), ObjectiveWeights { w1: 1.0, w2: 0.0, w3: 0.0 });
        let one = ObjectiveWeights::from_accuracy_weight(1.0);
        assert_eq!(scalarize(0.7, 5, 0.9, 0.6, one), 0.7 - 0.6);
        assert_eq!(scalarize(0.5, 5, 0.9, 0.6, one), 0.0);
    }

    #[test]
    fn sampled_weights_cover_the_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<ObjectiveWeights> = (0..10_000).map(|_| sample_weights(&mut rng)).collect();
        let mean = draws.iter().map(|w| w.w1).sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.625).abs() < 0.01, "mean {mean}");
        for w in &draws {
            assert!((0.25..=1.0).contains(&w.w1));
            assert!((w.w1 + w.w2 + w.w3 - 1.0).abs() < 1e-12);
        }
        let again: Vec<ObjectiveWeights> =
            (0..10).map(|_| sample_weights(&mut ChaCha8Rng::seed_from_u64(7))).collect();
        assert!(again.iter().all(|w| *w == draws[0]));
    }

    proptest! {
        #[test]
        fn monotone(acc in 0.0..1.0f64, d in 0.0..0.5f64, size in 1usize..20, c in 0.0..1.0f64,
                    star in 0.0..1.0f64, w1 in 0.25..=1.0f64) {
            let w = ObjectiveWeights::from_accuracy_weight(w1);
            let g = scalarize(acc, size, c, star, w);
            prop_assert!(scalarize((acc + d).min(1.0), size, c, star, w) >= g);
            prop_assert!(scalarize(acc, size, (c + d).min(1.0), star, w) >= g);
            prop_assert!(scalarize(acc, size + 1, c, star, w) <= g);
            prop_assert!(scalarize(star, size, 0.0, star, w) == 0.0);
        }
    }
}
