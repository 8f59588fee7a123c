use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Sample;

/// Feature-space weak and strong views.
///
/// Weak: Gaussian noise with per-coordinate sd `weak_scale · std_k`.
/// Strong: noise with sd `strong_scale · std_k`, then `⌊mask_frac · F_in⌋`
/// coordinates set to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmenter {
    std: Vec<f64>,
    pub weak_scale: f64,
    pub strong_scale: f64,
    pub mask_frac: f64,
}

impl Augmenter {
    pub const WEAK_SCALE: f64 = 0.05;
    pub const STRONG_SCALE: f64 = 0.25;
    pub const MASK_FRAC: f64 = 0.15;

    /// Per-coordinate population std over the training features.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut n = 0.0;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for s in samples {
            if sum.is_empty() {
                sum = vec![0.0; s.features.len()];
                sq = vec![0.0; s.features.len()];
            }
            n += 1.0;
            for (k, &v) in s.features.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(&s, &q)| {
                let mean = s / n;
                (q / n - mean * mean).max(0.0).sqrt()
            })
            .collect();
        Self::with_std(std)
    }

    pub fn with_std(std: Vec<f64>) -> Self {
        Augmenter {
            std,
            weak_scale: Self::WEAK_SCALE,
            strong_scale: Self::STRONG_SCALE,
            mask_frac: Self::MASK_FRAC,
        }
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn weak<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        self.jitter(x, self.weak_scale, rng)
    }

    pub fn strong<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = self.jitter(x, self.strong_scale, rng);
        let masked = (self.mask_frac * x.len() as f64).floor() as usize;
        for k in index::sample(rng, x.len(), masked.min(x.len())) {
            out[k] = 0.0;
        }
        out
    }

    fn jitter<R: Rng + ?Sized>(&self, x: &[f64], scale: f64, rng: &mut R) -> Vec<f64> {
        if scale == 0.0 {
            return x.to_vec();
        }
        x.iter()
            .zip(&self.std)
            .map(|(&v, &s)| {
                let eps: f64 = StandardNormal.sample(rng);
                v + scale * s * eps
            })
            .collect()
    }
}
