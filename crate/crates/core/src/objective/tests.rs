use proptest::prelude::*;

use super::*;
use crate::network::ExtractorConfig;
use crate::pseudolabel::q_scale;
use crate::rng::seeded;

fn const_loss(s: Array2, c: usize) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(s).unwrap();
    let l = diag_max_loss(&mut g, v, c, &mut ColMaxTargets::live()).unwrap();
    g.scalar(l).unwrap()
}

#[test]
fn diag_max_examples() {
    let s = Array2::from_rows(&[[-1.0, -3.0], [-2.0, -0.5]]).unwrap();
    assert_eq!(const_loss(s, 2), 0.0);
    let s = Array2::from_rows(&[[-2.0, -1.0], [-1.0, -1.0]]).unwrap();
    assert_eq!(const_loss(s, 2), 0.5);

    let mut g = Graph::new();
    let v = g.constant(Array2::ones(3, 2)).unwrap();
    assert!(diag_max_loss(&mut g, v, 2, &mut ColMaxTargets::live()).is_err());
}

#[test]
fn column_max_is_a_constant_target() {
    // Diagonal (−2, −1) below column max (−1, −1): only the diagonal moves.
    let mut ps = ParamSet::new();
    let id = ps
        .add("s", Array2::from_rows(&[[-2.0, -1.0], [-1.0, -1.0]]).unwrap(), true)
        .unwrap();
    let mut g = Graph::new();
    let v = g.param(&ps, id).unwrap();
    let l = diag_max_loss(&mut g, v, 2, &mut ColMaxTargets::live()).unwrap();
    let grads = g.gradients(l).unwrap();
    // d/dS00 of ((S00 − t0)² + (S11 − t1)²)/2 = S00 − t0 = −1.
    assert_eq!(grads.get(v).unwrap().data(), &[-1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn supervised_hand_values() {
    let mut g = Graph::new();
    let logits = g.constant(Array2::zeros(4, 4)).unwrap();
    let s = g.row_log_softmax(logits).unwrap();
    let l = supervised_loss(&mut g, s, &[3], 4, DiagNll::Raw).unwrap();
    assert!((g.scalar(l).unwrap() - 4f64.ln()).abs() < 1e-15);

    // C = 2, block rows (2, 0) and (1, 3), label 1: −log_softmax(1, 3)[1].
    let mut g = Graph::new();
    let logits = g.constant(Array2::from_rows(&[[2.0, 0.0], [1.0, 3.0]]).unwrap()).unwrap();
    let s = g.row_log_softmax(logits).unwrap();
    let l = supervised_loss(&mut g, s, &[1], 2, DiagNll::Raw).unwrap();
    let expect = -(3.0 - (1f64.exp() + 3f64.exp()).ln());
    assert!((g.scalar(l).unwrap() - expect).abs() < 1e-15);

    // Renormalized: diagonal (log σ(2), log σ(2)) → both classes at ½.
    let l = supervised_loss(&mut g, s, &[1], 2, DiagNll::Renormalized).unwrap();
    assert!((g.scalar(l).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(supervised_loss(&mut g, s, &[2], 2, DiagNll::Raw).is_err());
}

fn tiny_model() -> Model {
    let cfg = ExtractorConfig {
        input_dim: 2,
        hidden_dims: vec![3],
        feature_dim: 2,
        dropout_p: 0.0,
        residual: true,
    };
    let mut m = Model::new(cfg, 2, &mut seeded(0)).unwrap();
    let set = |m: &mut Model, name: &str, rows: &[&[f64]]| {
        let id = m.params.find(name).unwrap();
        m.params.get_mut(id).value = Array2::from_rows(rows).unwrap();
    };
    set(&mut m, "extractor.hidden0.weight", &[&[0.5, -0.3, 0.8], &[0.2, 0.7, -0.4]]);
    set(&mut m, "extractor.hidden0.bias", &[&[0.1, 0.0, -0.05]]);
    set(&mut m, "extractor.output.weight", &[&[0.3, -0.2], &[-0.1, 0.4], &[0.25, 0.15]]);
    set(&mut m, "extractor.output.bias", &[&[0.05, -0.02]]);
    set(&mut m, "classifier.weight", &[&[1.2, -0.7], &[-0.4, 0.9]]);
    set(&mut m, "classifier.bias", &[&[0.1, -0.1]]);
    set(&mut m, "modulator", &[&[0.8, 0.3], &[0.4, 0.9]]);
    m
}

fn tiny_sar() -> Array2 {
    Array2::from_rows(&[[-0.3, 0.7], [0.6, -0.2]]).unwrap()
}

/// Per-sample `C x C` log-probability block by direct arithmetic.
fn oracle_block(m: &Model, sar: &Array2, x: &[f64]) -> Vec<Vec<f64>> {
    let p = |name: &str| m.params.value(m.params.find(name).unwrap()).clone();
    let (w1, b1) = (p("extractor.hidden0.weight"), p("extractor.hidden0.bias"));
    let (w2, b2) = (p("extractor.output.weight"), p("extractor.output.bias"));
    let (wc, bc) = (p("classifier.weight"), p("classifier.bias"));
    let mm = p("modulator");
    let h: Vec<f64> = (0..3)
        .map(|k| (x[0] * w1.get(0, k) + x[1] * w1.get(1, k) + b1.get(0, k)).max(0.0))
        .collect();
    let z: Vec<f64> = (0..2)
        .map(|k| h[0] * w2.get(0, k) + h[1] * w2.get(1, k) + h[2] * w2.get(2, k) + b2.get(0, k) + x[k])
        .collect();
    (0..2)
        .map(|j| {
            let zm: Vec<f64> = (0..2)
                .map(|k| mm.get(j, k) * z[k] + (1.0 - mm.get(j, k)) * sar.get(j, k))
                .collect();
            let logits: Vec<f64> = (0..2)
                .map(|o| zm[0] * wc.get(0, o) + zm[1] * wc.get(1, o) + bc.get(0, o))
                .collect();
            let lse = (logits[0].exp() + logits[1].exp()).ln();
            logits.iter().map(|l| l - lse).collect()
        })
        .collect()
}

fn oracle_diag_mse(s: &[Vec<f64>]) -> f64 {
    let c = s.len();
    (0..c)
        .map(|k| {
            let col_max = (0..c).map(|j| s[j][k]).fold(f64::NEG_INFINITY, f64::max);
            (s[k][k] - col_max).powi(2)
        })
        .sum::<f64>()
        / c as f64
}

fn oracle_nll(s: &[Vec<f64>], y: usize, nll: DiagNll) -> f64 {
    match nll {
        DiagNll::Raw => -s[y][y],
        DiagNll::Renormalized => {
            let lse = (0..s.len()).map(|k| s[k][k].exp()).sum::<f64>().ln();
            lse - s[y][y]
        }
    }
}

fn toy_batch() -> (Array2, Vec<usize>, Array2, Vec<PseudoLabelRecord>) {
    let xl = Array2::from_rows(&[[0.9, -0.4], [-0.6, 1.1]]).unwrap();
    let xu = Array2::from_rows(&[[0.3, 0.8], [1.4, -1.0]]).unwrap();
    let recs = vec![
        PseudoLabelRecord::from_confidence(1, 0.9, 0.05, 0.75).unwrap(),
        PseudoLabelRecord::from_confidence(0, 0.7, 0.0, 0.75).unwrap(),
    ];
    (xl, vec![0, 1], xu, recs)
}

#[test]
fn toy_batch_matches_straight_line_oracle() {
    let m = tiny_model();
    let sar = tiny_sar();
    let (xl, yl, xu, recs) = toy_batch();
    for nll in [DiagNll::Renormalized, DiagNll::Raw] {
        let batch = LossBatch {
            labeled_x: &xl,
            labels: &yl,
            unlabeled_x: &xu,
            records: &recs,
        };
        let w = LossWeights { nll, ..LossWeights::default() };
        let out = total_loss(&m, &m.params, Some(&sar), &batch, w, &mut ColMaxTargets::live(), &mut seeded(0))
            .unwrap();

        let mut l_s = 0.0;
        let mut l_d = 0.0;
        for i in 0..2 {
            let s = oracle_block(&m, &sar, xl.row(i));
            l_s += oracle_nll(&s, yl[i], nll) / 2.0;
            l_d += oracle_diag_mse(&s) / 2.0;
        }
        let mut l_u = 0.0;
        let mut l_ud = 0.0;
        for i in 0..2 {
            if !recs[i].keep {
                continue;
            }
            let s = oracle_block(&m, &sar, xu.row(i));
            let y = recs[i].label;
            l_u += recs[i].l_scale * oracle_nll(&s, y, nll) / 2.0;
            l_ud += recs[i].l_scale * oracle_diag_mse(&s) / 2.0;
        }
        let total = l_s + l_u + 1.0 * l_d + 0.5 * l_ud;
        let b = out.breakdown;
        assert!(l_u > 0.0 && l_d > 0.0 && l_ud > 0.0);
        for (got, want) in [(b.l_s, l_s), (b.l_u, l_u), (b.l_d, l_d), (b.l_ud, l_ud), (b.total, total)] {
            assert!((got - want).abs() < 1e-10, "{nll}: {got} vs {want}");
        }
    }
}

fn breakdown(records: &[PseudoLabelRecord], w: LossWeights) -> LossBreakdown {
    let m = tiny_model();
    let (xl, yl, xu, _) = toy_batch();
    let batch = LossBatch {
        labeled_x: &xl,
        labels: &yl,
        unlabeled_x: &xu,
        records,
    };
    total_loss(&m, &m.params, Some(&tiny_sar()), &batch, w, &mut ColMaxTargets::live(), &mut seeded(0))
        .unwrap()
        .breakdown
}

#[test]
fn weighting_identities() {
    let none = vec![PseudoLabelRecord::from_confidence(0, 0.5, 0.0, 0.75).unwrap(); 2];
    let b = breakdown(&none, LossWeights::default());
    assert_eq!(b.l_u, 0.0);
    assert_eq!(b.l_ud, 0.0);
    assert_eq!(b.total, b.l_s + b.beta * b.l_d);

    let (_, _, _, recs) = toy_batch();
    let b = breakdown(&recs, LossWeights { beta: 0.0, gamma: 0.0, ..LossWeights::default() });
    assert!((b.total - (b.l_s + b.l_u)).abs() < 1e-15);

    let b = breakdown(&recs, LossWeights::default());
    assert!((b.total - (b.l_s + b.l_u + b.beta * b.l_d + b.gamma * b.l_ud)).abs() < 1e-12);
}

#[test]
fn unlabeled_terms_are_linear_in_scale() {
    let mk = |scale: f64| {
        vec![
            PseudoLabelRecord {
                label: 1,
                p_max: 0.9,
                sigma: 0.0,
                keep: true,
                l_scale: scale,
            },
            PseudoLabelRecord::from_confidence(0, 0.1, 0.0, 0.75).unwrap(),
        ]
    };
    let full = breakdown(&mk(1.0), LossWeights::default());
    let half = breakdown(&mk(0.5), LossWeights::default());
    assert!((half.l_u - 0.5 * full.l_u).abs() < 1e-15);
    assert!((half.l_ud - 0.5 * full.l_ud).abs() < 1e-15);
    assert_eq!(half.l_s, full.l_s);
}

#[test]
fn gate_blocks_unlabeled_gradients() {
    // Labeled rows contribute nothing when beta is 0 and the labeled losses
    // are removed by comparing against a labeled-only run.
    let m = tiny_model();
    let (xl, yl, xu, _) = toy_batch();
    let none = vec![PseudoLabelRecord::from_confidence(0, 0.5, 0.0, 0.75).unwrap(); 2];
    let grads = |recs: &[PseudoLabelRecord], xu: &Array2| {
        let mut ps = m.params.clone();
        ps.zero_grad();
        let batch = LossBatch {
            labeled_x: &xl,
            labels: &yl,
            unlabeled_x: xu,
            records: recs,
        };
        let out = total_loss(&m, &ps, Some(&tiny_sar()), &batch, LossWeights::default(), &mut ColMaxTargets::live(), &mut seeded(0))
            .unwrap();
        out.graph.backward(out.total, &mut ps).unwrap();
        ps.iter().map(|(_, p)| p.grad.clone()).collect::<Vec<_>>()
    };
    let a = grads(&none, &xu);
    let b = grads(&none, &xu.map(|v| v * 7.0 - 3.0));
    assert_eq!(a, b);
}

#[test]
fn empty_and_mismatched_batches() {
    let m = tiny_model();
    let empty = Array2::zeros(0, 2);
    let (xl, yl, xu, recs) = toy_batch();
    let batch = LossBatch {
        labeled_x: &empty,
        labels: &[],
        unlabeled_x: &xu,
        records: &recs,
    };
    let r = total_loss(&m, &m.params, Some(&tiny_sar()), &batch, LossWeights::default(), &mut ColMaxTargets::live(), &mut seeded(0));
    assert!(matches!(r, Err(Error::Empty(_))));
    let batch = LossBatch {
        labeled_x: &xl,
        labels: &yl,
        unlabeled_x: &xu,
        records: &recs[..1],
    };
    let r = total_loss(&m, &m.params, Some(&tiny_sar()), &batch, LossWeights::default(), &mut ColMaxTargets::live(), &mut seeded(0));
    assert!(matches!(r, Err(Error::Dimension { .. })));
}

#[test]
fn baseline_leaves_modulator_untouched() {
    let m = tiny_model();
    let (xl, yl, xu, _) = toy_batch();
    let recs = vec![
        crate::pseudolabel::baseline_record(1, 0.97, 0.95),
        crate::pseudolabel::baseline_record(0, 0.5, 0.95),
    ];
    let batch = LossBatch {
        labeled_x: &xl,
        labels: &yl,
        unlabeled_x: &xu,
        records: &recs,
    };
    let mut ps = m.params.clone();
    let out = total_loss(&m, &ps, None, &batch, LossWeights::default(), &mut ColMaxTargets::live(), &mut seeded(0))
        .unwrap();
    assert_eq!(out.breakdown.l_d, 0.0);
    assert_eq!(out.breakdown.l_ud, 0.0);
    assert!(out.breakdown.l_u > 0.0);
    out.graph.backward(out.total, &mut ps).unwrap();
    assert!(ps.grad(m.modulator).data().iter().all(|&g| g == 0.0));
    assert!(ps.grad(m.classifier.affine.weight).data().iter().any(|&g| g != 0.0));
}

#[test]
fn full_objective_passes_gradcheck() {
    for nll in [DiagNll::Renormalized, DiagNll::Raw] {
        let report = gradcheck_miniature(11, nll).unwrap();
        assert!(report.passed, "{nll}: {report:?}");
        assert!(report.entries_checked > 50);
    }
}

#[test]
fn q_scale_used_as_weight() {
    let (_, _, _, recs) = toy_batch();
    assert_eq!(recs[0].l_scale, q_scale(0.9).unwrap());
}

proptest! {
    #[test]
    fn diag_max_column_shift_invariant(
        v in prop::collection::vec(-5.0f64..0.0, 9),
        k in 0usize..3,
        shift in -3.0f64..3.0,
    ) {
        let s = Array2::from_vec(3, 3, v).unwrap();
        let mut shifted = s.clone();
        for j in 0..3 {
            shifted.set(j, k, s.get(j, k) + shift);
        }
        prop_assert!((const_loss(s, 3) - const_loss(shifted, 3)).abs() < 1e-9);
    }

    #[test]
    fn diag_max_nonnegative_and_zero_when_dominant(v in prop::collection::vec(-5.0f64..0.0, 9)) {
        let mut s = Array2::from_vec(3, 3, v).unwrap();
        prop_assert!(const_loss(s.clone(), 3) >= 0.0);
        for k in 0..3 {
            s.set(k, k, 1.0);
        }
        prop_assert_eq!(const_loss(s, 3), 0.0);
    }
}
