//! Weight-distribution and robustness measurements.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binlayer::{sign, BiFCLayer};
use crate::real::Real;

/// Fraction of `weights` within `0.25·(μ₂ − μ₁)` of the midpoint of the two means. Lower
/// means fewer weights sit between the two modes.
///
/// The band is centred on the means rather than on the sample median: with unequal mixing
/// weights the median of a well-separated bimodal sample lies inside the larger cluster.
pub fn central_band_mass(weights: &[f64], mu: [f64; 2]) -> f64 {
    if weights.is_empty() {
        return f64::NAN;
    }
    let center = 0.5 * (mu[0] + mu[1]);
    let band = 0.25 * (mu[1] - mu[0]);
    weights.iter().filter(|w| (*w - center).abs() < band).count() as f64 / weights.len() as f64
}

/// Central-band mass pooled over all channels of a layer, using each channel's mixture means.
pub fn bimodality_metric<T: Real>(layer: &BiFCLayer<T>) -> f64 {
    let mut inside = 0.0;
    let mut total = 0usize;
    for (j, g) in layer.gmm().iter().enumerate() {
        let w = layer.channel_weights(j);
        inside += central_band_mass(&w, g.mu) * w.len() as f64;
        total += w.len();
    }
    if total == 0 {
        f64::NAN
    } else {
        inside / total as f64
    }
}

/// Mean fraction of latent weights whose sign changes under additive `N(0, noise_std²)` noise,
/// over `trials` independent draws.
///
/// Draws come from `rng` in a fixed order, so reseeding it before each call makes the rate
/// non-decreasing in `noise_std`.
pub fn sign_flip_rate<T: Real, R: Rng + ?Sized>(layer: &BiFCLayer<T>, noise_std: f64, trials: usize, rng: &mut R) -> f64 {
    let w = layer.weights().data();
    if w.is_empty() || trials == 0 {
        return 0.0;
    }
    let mut flips = 0u64;
    for _ in 0..trials {
        for &v in w {
            let v = v.as_f64();
            let z: f64 = StandardNormal.sample(rng);
            if sign(v) != sign(v + noise_std * z) {
                flips += 1;
            }
        }
    }
    flips as f64 / (trials * w.len()) as f64
}
