//! Exact GP regression with an RBF kernel, and expected improvement.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::round::SubsetObservation;

pub const NOISE_VARIANCE: f64 = 1e-4;
const SIGNAL_FLOOR: f64 = 1e-6;
const JITTER_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SurrogateError {
    #[error("surrogate needs at least two observations, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite surrogate target")]
    NonFinite,
    #[error("kernel matrix is not positive definite even with jitter")]
    Singular,
}

/// Fitted posterior. The prior mean is the constant mean of the targets.
#[derive(Debug, Clone)]
pub struct Surrogate {
    inputs: Vec<Vec<f64>>,
    length_scale: f64,
    signal_variance: f64,
    noise_variance: f64,
    mean: f64,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Surrogate {
    pub fn fit(inputs: Vec<Vec<f64>>, targets: &[f64], length_scale: f64) -> Result<Self, SurrogateError> {
        let n = targets.len();
        if n < 2 || inputs.len() != n {
            return Err(SurrogateError::TooFewPoints(n.min(inputs.len())));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(SurrogateError::NonFinite);
        }
        let mean = targets.iter().sum::<f64>() / n as f64;
        let signal_variance = (targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64).max(SIGNAL_FLOOR);
        let gram = DMatrix::from_fn(n, n, |i, j| {
            signal_variance * (-squared_distance(&inputs[i], &inputs[j]) / (2.0 * length_scale * length_scale)).exp()
        });
        let mut noise_variance = NOISE_VARIANCE;
        let chol = match Cholesky::new(&gram + DMatrix::identity(n, n) * noise_variance) {
            Some(c) => c,
            None => {
                noise_variance *= JITTER_FACTOR;
                Cholesky::new(&gram + DMatrix::identity(n, n) * noise_variance).ok_or(SurrogateError::Singular)?
            }
        };
        let centered = DVector::from_iterator(n, targets.iter().map(|t| t - mean));
        let alpha = chol.solve(&centered);
        Ok(Self { inputs, length_scale, signal_variance, noise_variance, mean, alpha, chol })
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        self.signal_variance * (-squared_distance(a, b) / (2.0 * self.length_scale * self.length_scale)).exp()
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Posterior mean and (noise-free) variance at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|xi| self.kernel(xi, x)));
        let mu = self.mean + k.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&k).expect("cholesky factor is invertible");
        (mu, (self.signal_variance - v.dot(&v)).max(0.0))
    }
}

/// Surrogate over the membership vectors of `history`, fitted to `targets`.
pub fn fit_surrogate(
    history: &[SubsetObservation],
    targets: &[f64],
    pool_len: usize,
    length_scale: f64,
) -> Result<Surrogate, SurrogateError> {
    let inputs = history.iter().map(|o| o.subset.membership_vector(pool_len)).collect();
    Surrogate::fit(inputs, targets, length_scale)
}

/// Expected improvement of a Gaussian `N(mu, sigma^2)` over `g_plus`.
pub fn expected_improvement(mu: f64, sigma: f64, g_plus: f64) -> f64 {
    if sigma < 1e-12 {
        return (mu - g_plus).max(0.0);
    }
    let n = Normal::standard();
    let z = (mu - g_plus) / sigma;
    ((mu - g_plus) * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}
