//! Variance-based initialization of the modulation matrix and the
//! modulation transform `Z_m = M ⊙ Z + (1 − M) ⊙ R`.

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{ForwardMode, Model};
use crate::numerics::{Array2, Graph, ParamSet, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceInit {
    /// `C x F` modulation matrix in `[0, 1]`.
    pub matrix: Array2,
    /// Per-class population variance of each feature coordinate.
    pub variance: Array2,
    /// Every entry of the variance matrix was equal, so `matrix` is all ones.
    pub degenerate: bool,
}

/// `M = 1 − (V − min V) / (max V − min V)` with the min and max taken over
/// the whole `C x F` variance matrix.
pub fn init_from_variance(features: &Array2, labels: &[usize], num_classes: usize) -> Result<VarianceInit> {
    if features.rows() != labels.len() {
        return Err(Error::dim(
            "init_from_variance",
            format!("{} feature rows, {} labels", features.rows(), labels.len()),
        ));
    }
    let f = features.cols();
    let mut sum = Array2::zeros(num_classes, f);
    let mut counts = vec![0usize; num_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Parameter(format!("label {c} with {num_classes} classes")));
        }
        counts[c] += 1;
        for (s, v) in sum.row_mut(c).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::Parameter(format!(
            "class {c} has {} labeled features, variance needs at least 2",
            counts[c]
        )));
    }
    let mut variance = Array2::zeros(num_classes, f);
    for c in 0..num_classes {
        sum.row_mut(c).iter_mut().for_each(|v| *v /= counts[c] as f64);
    }
    for (i, &c) in labels.iter().enumerate() {
        for k in 0..f {
            let d = features.get(i, k) - sum.get(c, k);
            variance.set(c, k, variance.get(c, k) + d * d);
        }
    }
    for c in 0..num_classes {
        variance.row_mut(c).iter_mut().for_each(|v| *v /= counts[c] as f64);
    }
    Ok(from_variance(variance))
}

/// The normalization step on a ready variance matrix.
pub fn from_variance(variance: Array2) -> VarianceInit {
    let lo = variance.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = variance.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        warn!("all feature variances equal ({lo}); modulation matrix set to ones");
        return VarianceInit {
            matrix: Array2::ones(variance.rows(), variance.cols()),
            variance,
            degenerate: true,
        };
    }
    let range = hi - lo;
    let matrix = variance.map(|v| 1.0 - (v - lo) / range);
    VarianceInit {
        matrix,
        variance,
        degenerate: false,
    }
}

/// Modulates each row of `z` (`B x F`) toward every class.
///
/// Output row `b·C + j` is `M_j ⊙ z_b + (1 − M_j) ⊙ R_j`. `sar` is a
/// constant; gradients flow to `z` and `m`.
pub fn modulate(g: &mut Graph, z: Var, sar: &Array2, m: Var) -> Result<Var> {
    let (b, f) = g.value(z).shape();
    let (c, mf) = g.value(m).shape();
    if sar.shape() != (c, f) || mf != f {
        return Err(Error::dim(
            "modulate",
            format!(
                "features {b}x{f}, modulation {c}x{mf}, sar {}x{}",
                sar.rows(),
                sar.cols()
            ),
        ));
    }
    let z_rep = g.repeat_rows(z, c)?;
    let m_rep = g.tile_rows(m, b)?;
    let r_rep = g.constant(sar.tile_rows(b))?;
    let kept = g.mul(m_rep, z_rep)?;
    let neg_m = g.scale(m_rep, -1.0)?;
    let one_minus_m = g.add_scalar(neg_m, 1.0)?;
    let shifted = g.mul(one_minus_m, r_rep)?;
    g.add(kept, shifted)
}

/// Logits of `classify(modulate(extract(x)))`, shape `(B·C) x C`. Rows
/// `b·C..b·C + C` form the prediction matrix of sample `b`.
pub fn modulated_logits<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    params: &ParamSet,
    x: Var,
    sar: &Array2,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<Var> {
    let z = model.extractor.forward(g, params, x, mode, rng)?;
    let m = g.param(params, model.modulator)?;
    let zm = modulate(g, z, sar, m)?;
    model.classifier.forward(g, params, zm)
}
