//! Monte Carlo dropout pseudo-labels over modulated prediction matrices.
//!
//! The uncertainty `sigma` is the population standard deviation, across the
//! K stochastic passes, of the diagonal probability of the predicted class.

use rand::Rng;

use crate::error::{Error, Result};
use crate::modulator::modulated_logits;
use crate::network::{ForwardMode, Model};
use crate::numerics::{argmax, row_softmax, Array2, Graph};

pub const BASELINE_THRESHOLD: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabelRecord {
    pub label: usize,
    pub p_max: f64,
    pub sigma: f64,
    pub keep: bool,
    pub l_scale: f64,
}

impl PseudoLabelRecord {
    /// Applies the gate `p_max − sigma > tau` and the loss scale.
    pub fn from_confidence(label: usize, p_max: f64, sigma: f64, tau: f64) -> Result<Self> {
        let keep = p_max - sigma > tau;
        let l_scale = if keep { q_scale(p_max)? } else { 0.0 };
        Ok(PseudoLabelRecord {
            label,
            p_max,
            sigma,
            keep,
            l_scale,
        })
    }
}

/// `Q(p) = exp(p³ − 1)`.
pub fn q_scale(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("confidence {p} outside [0, 1]")));
    }
    Ok((p * p * p - 1.0).exp())
}

/// Prediction matrices for a batch: `(B·C) x C` probabilities, one `C x C`
/// block per sample. Row `j` of a block is the class distribution after
/// modulating toward class `j`.
pub fn predict_matrix<R: Rng + ?Sized>(
    model: &Model,
    sar: &Array2,
    x: &Array2,
    dropout: bool,
    rng: &mut R,
) -> Result<Array2> {
    let mode = if dropout {
        ForwardMode::McDropout
    } else {
        ForwardMode::Eval
    };
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let logits = modulated_logits(&mut g, model, &model.params, xv, sar, mode, rng)?;
    Ok(row_softmax(g.value(logits)))
}

/// Diagonal of each sample's block: `B x C`.
pub fn block_diagonals(s: &Array2, num_classes: usize) -> Array2 {
    let b = s.rows() / num_classes;
    let mut out = Array2::zeros(b, num_classes);
    for i in 0..b {
        for c in 0..num_classes {
            out.set(i, c, s.get(i * num_classes + c, c));
        }
    }
    out
}

/// Population standard deviation, exactly 0 when all values are equal.
fn population_std(values: &[f64]) -> f64 {
    if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// One record per row of `x` (weak views) from `k` dropout passes.
pub fn pseudo_label<R: Rng + ?Sized>(
    model: &Model,
    sar: &Array2,
    x: &Array2,
    k: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<PseudoLabelRecord>> {
    if k < 2 {
        return Err(Error::Parameter(format!("need at least 2 MC samples, got {k}")));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Parameter(format!("threshold {tau} outside (0, 1)")));
    }
    let c = model.num_classes();
    let runs: Vec<Array2> = (0..k)
        .map(|_| predict_matrix(model, sar, x, true, rng).map(|s| block_diagonals(&s, c)))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(x.rows());
    let mut d_mu = vec![0.0; c];
    for i in 0..x.rows() {
        for (j, d) in d_mu.iter_mut().enumerate() {
            *d = runs.iter().map(|r| r.get(i, j)).sum::<f64>() / k as f64;
        }
        let label = argmax(&d_mu);
        let samples: Vec<f64> = runs.iter().map(|r| r.get(i, label)).collect();
        let p_max = d_mu[label].clamp(0.0, 1.0);
        records.push(PseudoLabelRecord::from_confidence(label, p_max, population_std(&samples), tau)?);
    }
    Ok(records)
}

/// Plain confidence thresholding: one deterministic pass, no modulation,
/// weight 1 for kept samples.
pub fn baseline_pseudo_label(model: &Model, x: &Array2, tau: f64) -> Result<Vec<PseudoLabelRecord>> {
    let probs = plain_probabilities(model, x)?;
    Ok((0..probs.rows())
        .map(|i| {
            let label = argmax(probs.row(i));
            baseline_record(label, probs.get(i, label), tau)
        })
        .collect())
}

pub fn baseline_record(label: usize, p_max: f64, tau: f64) -> PseudoLabelRecord {
    let keep = p_max > tau;
    PseudoLabelRecord {
        label,
        p_max,
        sigma: 0.0,
        keep,
        l_scale: if keep { 1.0 } else { 0.0 },
    }
}

/// `softmax(classify(extract(x)))` in eval mode.
pub fn plain_probabilities(model: &Model, x: &Array2) -> Result<Array2> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    // Eval mode never draws from the generator.
    let mut unused = crate::rng::seeded(0);
    let z = model.extract(&mut g, xv, ForwardMode::Eval, &mut unused)?;
    let logits = model.classify(&mut g, z)?;
    Ok(row_softmax(g.value(logits)))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::network::ExtractorConfig;
    use crate::rng::seeded;

    fn model(dropout_p: f64) -> Model {
        let cfg = ExtractorConfig {
            input_dim: 4,
            hidden_dims: vec![8],
            feature_dim: 4,
            dropout_p,
            residual: true,
        };
        Model::new(cfg, 3, &mut seeded(3)).unwrap()
    }

    fn sar() -> Array2 {
        Array2::from_rows(&[[1.0, 0.0, 0.5, 0.0], [0.0, 1.0, 0.0, 0.5], [0.3, 0.3, 0.3, 0.3]]).unwrap()
    }

    fn inputs() -> Array2 {
        Array2::from_vec(5, 4, (0..20).map(|i| ((i * 13) as f64).cos() * 2.0).collect()).unwrap()
    }

    #[test]
    fn q_values() {
        assert_eq!(q_scale(1.0).unwrap(), 1.0);
        assert!((q_scale(0.0).unwrap() - 0.367_879_441_171_442_32).abs() < 1e-12);
        assert!((q_scale(0.9).unwrap() - 0.762_616_496_405_065_4).abs() < 1e-12);
        assert!((q_scale(0.75).unwrap() - 0.560_949_160_814_470_8).abs() < 1e-12);
        assert!(q_scale(1.01).is_err());
        assert!(q_scale(-0.01).is_err());
    }

    #[test]
    fn gate_examples() {
        let r = PseudoLabelRecord::from_confidence(2, 0.9, 0.05, 0.75).unwrap();
        assert!(r.keep);
        assert_eq!(r.l_scale, q_scale(0.9).unwrap());
        let r = PseudoLabelRecord::from_confidence(0, 0.76, 0.02, 0.75).unwrap();
        assert!(!r.keep);
        assert_eq!(r.l_scale, 0.0);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut m = model(0.0);
        for id in [m.classifier.affine.weight, m.classifier.affine.bias] {
            m.params.get_mut(id).value.fill(0.0);
        }
        let s = predict_matrix(&m, &sar(), &inputs(), false, &mut seeded(0)).unwrap();
        assert_eq!(s.shape(), (15, 3));
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn identity_modulation_rows_match() {
        let m = model(0.0);
        let s = predict_matrix(&m, &sar(), &inputs(), false, &mut seeded(0)).unwrap();
        for b in 0..5 {
            for j in 1..3 {
                assert_eq!(s.row(3 * b + j), s.row(3 * b));
            }
            for j in 0..3 {
                assert!((s.row(3 * b + j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_dropout_means_no_uncertainty() {
        let mut m = model(0.0);
        m.set_modulation(Array2::filled(3, 4, 0.4)).unwrap();
        let recs = pseudo_label(&m, &sar(), &inputs(), 5, 0.5, &mut seeded(1)).unwrap();
        let probs = predict_matrix(&m, &sar(), &inputs(), false, &mut seeded(0)).unwrap();
        let diag = block_diagonals(&probs, 3);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.sigma, 0.0);
            assert_eq!(r.keep, r.p_max > 0.5);
            assert_eq!(r.label, argmax(diag.row(i)));
        }
    }

    #[test]
    fn dropout_gives_positive_uncertainty() {
        let m = model(0.3);
        let recs = pseudo_label(&m, &sar(), &inputs(), 5, 0.5, &mut seeded(1)).unwrap();
        assert!(recs.iter().map(|r| r.sigma).sum::<f64>() > 0.0);
        assert!(pseudo_label(&m, &sar(), &inputs(), 1, 0.5, &mut seeded(1)).is_err());
        assert!(pseudo_label(&m, &sar(), &inputs(), 5, 1.0, &mut seeded(1)).is_err());
    }

    #[test]
    fn mc_statistics_match_recount() {
        // Re-derive mean and std from the same stream with independent passes.
        let m = model(0.2);
        let x = inputs();
        let recs = pseudo_label(&m, &sar(), &x, 4, 0.3, &mut seeded(9)).unwrap();
        let mut rng = seeded(9);
        let runs: Vec<Array2> = (0..4)
            .map(|_| block_diagonals(&predict_matrix(&m, &sar(), &x, true, &mut rng).unwrap(), 3))
            .collect();
        for (i, r) in recs.iter().enumerate() {
            let vals: Vec<f64> = runs.iter().map(|d| d.get(i, r.label)).collect();
            let mean = vals.iter().sum::<f64>() / 4.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!((r.p_max - mean).abs() < 1e-15);
            assert!((r.sigma - var.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn baseline_threshold_is_strict() {
        let mut m = model(0.0);
        for id in [m.classifier.affine.weight, m.classifier.affine.bias] {
            m.params.get_mut(id).value.fill(0.0);
        }
        let recs = baseline_pseudo_label(&m, &inputs(), BASELINE_THRESHOLD).unwrap();
        assert!(recs.iter().all(|r| !r.keep && r.l_scale == 0.0 && r.label == 0));

        let r = baseline_record(1, 0.96, BASELINE_THRESHOLD);
        assert!(r.keep && r.l_scale == 1.0);
        let r = baseline_record(1, 0.95, BASELINE_THRESHOLD);
        assert!(!r.keep && r.l_scale == 0.0);
    }

    proptest! {
        #[test]
        fn q_increasing(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            prop_assume!(a < b);
            prop_assert!(q_scale(a).unwrap() < q_scale(b).unwrap());
        }

        #[test]
        fn lower_threshold_keeps_more(
            recs in prop::collection::vec((0.0f64..=1.0, 0.0f64..0.5), 1..50),
            t1 in 0.01f64..0.99,
            t2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let count = |tau| recs
                .iter()
                .filter(|(p, s)| PseudoLabelRecord::from_confidence(0, *p, *s, tau).unwrap().keep)
                .count();
            prop_assert!(count(lo) >= count(hi));
        }

        #[test]
        fn kept_scale_in_unit_interval(p in 0.0f64..=1.0, s in 0.0f64..0.3, tau in 0.01f64..0.99) {
            let r = PseudoLabelRecord::from_confidence(1, p, s, tau).unwrap();
            prop_assert_eq!(r.keep, p - s > tau);
            if r.keep {
                prop_assert!(r.l_scale > 0.0 && r.l_scale <= 1.0);
            } else {
                prop_assert_eq!(r.l_scale, 0.0);
            }
        }
    }
}
