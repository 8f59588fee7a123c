//! Class prototypes, their cosine similarities, and similarity-weighted
//! average representations (SARs).

use crate::error::{Error, Result};
use crate::numerics::Array2;

/// Prototypes, clamped similarities and SARs computed once per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SarBank {
    pub prototypes: Array2,
    pub similarity: Array2,
    pub sar: Array2,
    pub epoch: usize,
}

impl SarBank {
    /// `features` is `N x F` with one class id per row.
    pub fn build(features: &Array2, labels: &[usize], num_classes: usize, epoch: usize) -> Result<Self> {
        let prototypes = compute_prototypes(features, labels, num_classes)?;
        let similarity = compute_similarity(&prototypes)?;
        let sar = compute_sar(&prototypes, &similarity)?;
        Ok(SarBank {
            prototypes,
            similarity,
            sar,
            epoch,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.sar.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.sar.cols()
    }
}

/// Mean feature of each class over all labeled samples, regardless of domain.
pub fn compute_prototypes(features: &Array2, labels: &[usize], num_classes: usize) -> Result<Array2> {
    if features.rows() != labels.len() {
        return Err(Error::dim(
            "compute_prototypes",
            format!("{} feature rows, {} labels", features.rows(), labels.len()),
        ));
    }
    let mut sums = Array2::zeros(num_classes, features.cols());
    let mut counts = vec![0usize; num_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Parameter(format!("label {c} with {num_classes} classes")));
        }
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::MissingClass(c));
        }
        sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(sums)
}

/// Cosine similarity between prototypes, with negative values clamped to 0.
pub fn compute_similarity(prototypes: &Array2) -> Result<Array2> {
    let c = prototypes.rows();
    let norms: Vec<f64> = (0..c)
        .map(|i| prototypes.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| n <= 1e-12) {
        return Err(Error::DegeneratePrototype(i));
    }
    let mut sim = Array2::zeros(c, c);
    for i in 0..c {
        sim.set(i, i, 1.0);
        for j in (i + 1)..c {
            let dot: f64 = prototypes
                .row(i)
                .iter()
                .zip(prototypes.row(j))
                .map(|(a, b)| a * b)
                .sum();
            let cos = (dot / (norms[i] * norms[j])).clamp(0.0, 1.0);
            sim.set(i, j, cos);
            sim.set(j, i, cos);
        }
    }
    Ok(sim)
}

/// `R_c = Σ_j Sim[c,j]·P_j / Σ_j Sim[c,j]`.
pub fn compute_sar(prototypes: &Array2, similarity: &Array2) -> Result<Array2> {
    let c = prototypes.rows();
    if similarity.shape() != (c, c) {
        return Err(Error::dim(
            "compute_sar",
            format!("similarity {:?} for {c} prototypes", similarity.shape()),
        ));
    }
    let mut sar = Array2::zeros(c, prototypes.cols());
    for i in 0..c {
        let weights = similarity.row(i);
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Parameter(format!("similarity row {i} has no positive weight")));
        }
        let out = sar.row_mut(i);
        for (j, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(prototypes.row(j)) {
                *o += w * p;
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
    }
    Ok(sar)
}
