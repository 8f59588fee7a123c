use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{DimRoles, DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::rng;

const MAX_ATTEMPTS: usize = 10_000;

/// Relative per-sample wobble of the domain bias.
const BIAS_JITTER: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub num_domains: usize,
    pub signal_dims: usize,
    pub noise_dims: usize,
    pub samples_per_class_per_domain: usize,
    /// Minimum pairwise distance between class means.
    pub class_sep: f64,
    /// Norm of each domain's bias on the noise coordinates.
    pub domain_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            num_classes: 7,
            num_domains: 4,
            signal_dims: 16,
            noise_dims: 16,
            samples_per_class_per_domain: 150,
            class_sep: 3.0,
            domain_shift: 8.0,
            seed: 0,
        }
    }
}

/// Gaussian classes on the signal coordinates, shifted per domain on the
/// noise coordinates.
///
/// Class means are drawn uniformly from a box of side `class_sep` per
/// coordinate and rejected until every pair is at least `class_sep` apart.
/// Each domain gets a random bias direction of norm `domain_shift` on the
/// noise coordinates. A sample is `mean(class) ⊕ bias(domain)·(1 + 0.1ε)`
/// plus unit Gaussian noise on every coordinate.
pub fn generate_synthetic(p: &SyntheticParams) -> Result<DomainDataset> {
    if p.num_classes == 0
        || p.num_domains == 0
        || p.signal_dims == 0
        || p.noise_dims == 0
        || p.samples_per_class_per_domain == 0
    {
        return Err(Error::Parameter("synthetic counts must be at least 1".into()));
    }
    if !(p.class_sep > 0.0) || !(p.domain_shift >= 0.0) || !p.domain_shift.is_finite() {
        return Err(Error::Parameter(format!(
            "class_sep {} must be > 0 and domain_shift {} >= 0",
            p.class_sep, p.domain_shift
        )));
    }
    let mut rng = rng::stream(p.seed, &[rng::tag::INIT]);
    let half = 0.5 * p.class_sep;

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(p.num_classes);
    let mut attempts = 0;
    while means.len() < p.num_classes {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::SeparationInfeasible {
                min_sep: p.class_sep,
                attempts: MAX_ATTEMPTS,
            });
        }
        let cand: Vec<f64> = (0..p.signal_dims)
            .map(|_| rng.random_range(-half..=half))
            .collect();
        let far_enough = means.iter().all(|m| {
            m.iter()
                .zip(&cand)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= p.class_sep
        });
        if far_enough {
            means.push(cand);
        }
    }

    let biases: Vec<Vec<f64>> = (0..p.num_domains)
        .map(|_| {
            let dir: Vec<f64> = (0..p.noise_dims)
                .map(|_| gauss(&mut rng))
                .collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter().map(|v| v / norm * p.domain_shift).collect()
        })
        .collect();

    let dim = p.signal_dims + p.noise_dims;
    let mut samples = Vec::with_capacity(p.num_classes * p.num_domains * p.samples_per_class_per_domain);
    for (d, bias) in biases.iter().enumerate() {
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..p.samples_per_class_per_domain {
                let wobble = 1.0 + BIAS_JITTER * gauss(&mut rng);
                let mut features = Vec::with_capacity(dim);
                for &m in mean {
                    features.push(m + gauss(&mut rng));
                }
                for &b in bias {
                    features.push(b * wobble + gauss(&mut rng));
                }
                samples.push(Sample {
                    features,
                    class_id: c,
                    domain_id: d,
                    truth_visible: true,
                });
            }
        }
    }

    Ok(DomainDataset {
        samples,
        num_classes: p.num_classes,
        num_domains: p.num_domains,
        input_dim: dim,
        roles: Some(DimRoles {
            signal: (0..p.signal_dims).collect(),
            noise: (p.signal_dims..dim).collect(),
        }),
    })
}

fn gauss(rng: &mut rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}
