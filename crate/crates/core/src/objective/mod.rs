//! Training objective `L = L_s + L_u + β·L_d + γ·L_ud`.
//!
//! Every sample contributes a `C x C` log-probability block (row `j` is the
//! prediction after modulating toward class `j`). The negative log-likelihood
//! reads the block diagonal; the diagonal-maximizing terms pull each diagonal
//! entry toward the maximum of its column, with that maximum held constant.

use rand::Rng;

use crate::error::{Error, Result};
use crate::modulator::modulated_logits;
use crate::network::{ExtractorConfig, ForwardMode, Model};
use crate::numerics::{grad_check, Array2, GradCheckReport, Graph, ParamSet, Var};
use crate::pseudolabel::PseudoLabelRecord;
use crate::rng::seeded;

/// How the negative log-likelihood reads a sample's block diagonal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DiagNll {
    /// Diagonal log-probabilities renormalized over the classes, so raising
    /// one class's entry lowers the others.
    #[default]
    Renormalized,
    /// The diagonal log-probability of the target class as is.
    Raw,
}

impl std::str::FromStr for DiagNll {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "renormalized" => Ok(DiagNll::Renormalized),
            "raw" => Ok(DiagNll::Raw),
            other => Err(Error::Parameter(format!("unknown nll mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for DiagNll {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DiagNll::Renormalized => "renormalized",
            DiagNll::Raw => "raw",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub nll: DiagNll,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            gamma: 0.5,
            nll: DiagNll::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_u: f64,
    pub l_d: f64,
    pub l_ud: f64,
    pub total: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    /// Component-wise mean; `None` for an empty slice.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(LossBreakdown {
            l_s: avg(|b| b.l_s),
            l_u: avg(|b| b.l_u),
            l_d: avg(|b| b.l_d),
            l_ud: avg(|b| b.l_ud),
            total: avg(|b| b.total),
            beta: first.beta,
            gamma: first.gamma,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
enum TargetMode {
    #[default]
    Live,
    Record,
    Replay,
}

/// Source of the column-maximum targets.
///
/// `Live` takes them from the current values. `Record` does the same and
/// remembers them; `Replay` hands the remembered values back, which keeps
/// the targets fixed while parameters are perturbed for finite differences.
#[derive(Clone, Debug, Default)]
pub struct ColMaxTargets {
    mode: TargetMode,
    values: Vec<Vec<f64>>,
    cursor: usize,
}

impl ColMaxTargets {
    pub fn live() -> Self {
        Self::default()
    }

    pub fn recording() -> Self {
        ColMaxTargets {
            mode: TargetMode::Record,
            ..Self::default()
        }
    }

    pub fn into_replay(self) -> Self {
        ColMaxTargets {
            mode: TargetMode::Replay,
            values: self.values,
            cursor: 0,
        }
    }

    fn begin(&mut self) {
        match self.mode {
            TargetMode::Live => {}
            TargetMode::Record => self.values.clear(),
            TargetMode::Replay => self.cursor = 0,
        }
    }

    fn next(&mut self, s_log: &Array2, num_classes: usize) -> Result<Vec<f64>> {
        let live = column_max(s_log, num_classes);
        match self.mode {
            TargetMode::Live => Ok(live),
            TargetMode::Record => {
                self.values.push(live.clone());
                Ok(live)
            }
            TargetMode::Replay => {
                let v = self
                    .values
                    .get(self.cursor)
                    .cloned()
                    .ok_or_else(|| Error::Contract("no recorded column-max targets left".into()))?;
                if v.len() != live.len() {
                    return Err(Error::Contract("recorded targets do not match the batch".into()));
                }
                self.cursor += 1;
                Ok(v)
            }
        }
    }
}

/// For each block `b` and column `k`, `max_j s[b·C + j, k]`, laid out at
/// index `b·C + k` to line up with the block diagonal.
pub fn column_max(s_log: &Array2, num_classes: usize) -> Vec<f64> {
    let c = num_classes;
    let blocks = s_log.rows() / c;
    let mut out = vec![f64::NEG_INFINITY; blocks * c];
    for b in 0..blocks {
        for j in 0..c {
            for (k, &v) in s_log.row(b * c + j).iter().enumerate() {
                let slot = &mut out[b * c + k];
                *slot = slot.max(v);
            }
        }
    }
    out
}

fn diagonal_entries(blocks: usize, c: usize) -> Vec<(usize, usize)> {
    (0..blocks).flat_map(|b| (0..c).map(move |k| (b * c + k, k))).collect()
}

fn column(values: Vec<f64>) -> Result<Array2> {
    let n = values.len();
    Array2::from_vec(n, 1, values)
}

/// `Σ_i w_i · (−s[picks_i])`.
fn weighted_nll(g: &mut Graph, s_log: Var, picks: Vec<(usize, usize)>, weights: Vec<f64>) -> Result<Var> {
    let picked = g.gather(s_log, picks)?;
    let w = g.constant(column(weights.into_iter().map(|w| -w).collect())?)?;
    let weighted = g.mul(picked, w)?;
    g.sum(weighted)
}

/// `Σ_b w_b Σ_k (diag_b[k] − colmax_b[k])²` over stacked `C x C` blocks.
fn weighted_diag_max(
    g: &mut Graph,
    s_log: Var,
    num_classes: usize,
    block_weights: &[f64],
    targets: &mut ColMaxTargets,
) -> Result<Var> {
    let c = num_classes;
    let target = targets.next(g.value(s_log), c)?;
    let diag = g.gather(s_log, diagonal_entries(block_weights.len(), c))?;
    let t = g.constant(column(target)?)?;
    let diff = g.sub(diag, t)?;
    let sq = g.mul(diff, diff)?;
    let w: Vec<f64> = block_weights.iter().flat_map(|&w| std::iter::repeat_n(w, c)).collect();
    let wv = g.constant(column(w)?)?;
    let weighted = g.mul(sq, wv)?;
    g.sum(weighted)
}

/// Mean over blocks of `(1/C) Σ_k (diag[k] − colmax[k])²`.
pub fn diag_max_loss(g: &mut Graph, s_log: Var, num_classes: usize, targets: &mut ColMaxTargets) -> Result<Var> {
    let (rows, cols) = g.value(s_log).shape();
    if cols != num_classes || rows == 0 || rows % num_classes != 0 {
        return Err(Error::dim("diag_max_loss", format!("{rows}x{cols} with C = {num_classes}")));
    }
    let blocks = rows / num_classes;
    let w = vec![1.0 / (blocks * num_classes) as f64; blocks];
    weighted_diag_max(g, s_log, num_classes, &w, targets)
}

/// B x C log-probabilities of each block's diagonal renormalized over classes.
fn renormalized_diagonal(g: &mut Graph, s_log: Var, blocks: usize, c: usize) -> Result<Var> {
    let d = g.gather(s_log, diagonal_entries(blocks, c))?;
    let d = g.reshape(d, blocks, c)?;
    g.row_log_softmax(d)
}

/// Mean over blocks of the NLL of `y_b` read from block `b`'s diagonal.
pub fn supervised_loss(g: &mut Graph, s_log: Var, labels: &[usize], num_classes: usize, nll: DiagNll) -> Result<Var> {
    check_labels(labels, num_classes)?;
    let n = labels.len();
    let w = vec![1.0 / n as f64; n];
    match nll {
        DiagNll::Raw => {
            let picks = labels.iter().enumerate().map(|(b, &y)| (b * num_classes + y, y)).collect();
            weighted_nll(g, s_log, picks, w)
        }
        DiagNll::Renormalized => {
            let d = renormalized_diagonal(g, s_log, n, num_classes)?;
            weighted_nll(g, d, labels.iter().copied().enumerate().collect(), w)
        }
    }
}

fn check_labels(labels: &[usize], c: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= c) {
        Some(y) => Err(Error::Parameter(format!("label {y} with {c} classes"))),
        None => Ok(()),
    }
}

/// Inputs of one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct LossBatch<'a> {
    /// Weak views of the labeled slots.
    pub labeled_x: &'a Array2,
    pub labels: &'a [usize],
    /// Strong views, one row per unlabeled slot.
    pub unlabeled_x: &'a Array2,
    pub records: &'a [PseudoLabelRecord],
}

pub struct LossGraph {
    pub graph: Graph,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Builds the full objective. With `sar` set the modulated pipeline and all
/// four terms are used; `None` gives the plain confidence-threshold baseline
/// (`L_s + L_u` on unmodulated logits).
///
/// Unlabeled terms are averaged over every unlabeled slot. Only kept samples
/// enter the graph; with none kept the terms are the constant 0.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<R: Rng + ?Sized>(
    model: &Model,
    params: &ParamSet,
    sar: Option<&Array2>,
    batch: &LossBatch<'_>,
    weights: LossWeights,
    targets: &mut ColMaxTargets,
    rng: &mut R,
) -> Result<LossGraph> {
    let c = model.num_classes();
    let n_l = batch.labeled_x.rows();
    let n_u = batch.unlabeled_x.rows();
    if n_l == 0 {
        return Err(Error::Empty("labeled batch"));
    }
    if batch.labels.len() != n_l || batch.records.len() != n_u {
        return Err(Error::dim(
            "total_loss",
            format!(
                "{n_l} labeled rows with {} labels, {n_u} unlabeled rows with {} records",
                batch.labels.len(),
                batch.records.len()
            ),
        ));
    }
    check_labels(batch.labels, c)?;
    targets.begin();

    let mut g = Graph::new();
    // Row of sample `b`'s prediction for class `y` inside the log-probabilities.
    let row_of = |b: usize, y: usize| if sar.is_some() { b * c + y } else { b };
    let forward = |g: &mut Graph, x: &Array2, rng: &mut R| -> Result<Var> {
        let xv = g.constant(x.clone())?;
        let logits = match sar {
            Some(r) => modulated_logits(g, model, params, xv, r, ForwardMode::Train, rng)?,
            None => {
                let z = model.extractor.forward(g, params, xv, ForwardMode::Train, rng)?;
                model.classifier.forward(g, params, z)?
            }
        };
        g.row_log_softmax(logits)
    };

    // With renormalization the NLL reads a B x C matrix of diagonals instead.
    let renorm = sar.is_some() && weights.nll == DiagNll::Renormalized;
    let nll_source = |g: &mut Graph, s: Var, blocks: usize| -> Result<Var> {
        if renorm {
            renormalized_diagonal(g, s, blocks, c)
        } else {
            Ok(s)
        }
    };
    let row_of = |b: usize, y: usize| if renorm { b } else { row_of(b, y) };
    let s_log = forward(&mut g, batch.labeled_x, rng)?;
    let picks = batch
        .labels
        .iter()
        .enumerate()
        .map(|(b, &y)| (row_of(b, y), y))
        .collect();
    let src = nll_source(&mut g, s_log, n_l)?;
    let l_s = weighted_nll(&mut g, src, picks, vec![1.0 / n_l as f64; n_l])?;
    let mut total = l_s;
    let mut l_d = None;
    if sar.is_some() {
        let d = weighted_diag_max(&mut g, s_log, c, &vec![1.0 / (n_l * c) as f64; n_l], targets)?;
        let scaled = g.scale(d, weights.beta)?;
        total = g.add(total, scaled)?;
        l_d = Some(d);
    }

    let kept: Vec<usize> = (0..n_u).filter(|&i| batch.records[i].keep).collect();
    let (mut l_u, mut l_ud) = (None, None);
    if !kept.is_empty() {
        let xu = batch.unlabeled_x.select_rows(&kept);
        let su_log = forward(&mut g, &xu, rng)?;
        let scales: Vec<f64> = kept.iter().map(|&i| batch.records[i].l_scale).collect();
        let picks = kept
            .iter()
            .enumerate()
            .map(|(b, &i)| (row_of(b, batch.records[i].label), batch.records[i].label))
            .collect();
        let src = nll_source(&mut g, su_log, kept.len())?;
        let u = weighted_nll(&mut g, src, picks, scales.iter().map(|s| s / n_u as f64).collect())?;
        total = g.add(total, u)?;
        l_u = Some(u);
        if sar.is_some() {
            let w: Vec<f64> = scales.iter().map(|s| s / (n_u * c) as f64).collect();
            let ud = weighted_diag_max(&mut g, su_log, c, &w, targets)?;
            let scaled = g.scale(ud, weights.gamma)?;
            total = g.add(total, scaled)?;
            l_ud = Some(ud);
        }
    }

    let read = |v: Option<Var>| v.map_or(Ok(0.0), |v| g.scalar(v));
    let breakdown = LossBreakdown {
        l_s: g.scalar(l_s)?,
        l_u: read(l_u)?,
        l_d: read(l_d)?,
        l_ud: read(l_ud)?,
        total: g.scalar(total)?,
        beta: weights.beta,
        gamma: weights.gamma,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {breakdown:?}")));
    }
    Ok(LossGraph {
        graph: g,
        total,
        breakdown,
    })
}

/// Finite-difference check of the full objective on a C = 2, F = 4 model with
/// dropout (step 1e-5, tolerance 1e-4). Masks are frozen by reseeding and
/// column-max targets by replay.
pub fn gradcheck_miniature(seed: u64, nll: DiagNll) -> Result<GradCheckReport> {
    let cfg = ExtractorConfig {
        input_dim: 4,
        hidden_dims: vec![5],
        feature_dim: 4,
        dropout_p: 0.05,
        residual: true,
    };
    let mut m = Model::new(cfg, 2, &mut seeded(seed))?;
    m.set_modulation(Array2::from_rows(&[[0.9, 0.2, 0.6, 0.4], [0.3, 0.8, 0.5, 0.7]])?)?;
    let sar = Array2::from_rows(&[[0.5, -0.1, 0.2, 0.3], [-0.4, 0.6, 0.1, -0.2]])?;
    let xl = Array2::from_rows(&[[0.9, -0.4, 0.2, 1.0], [-0.6, 1.1, -0.3, 0.4]])?;
    let xu = Array2::from_rows(&[[0.3, 0.8, -1.2, 0.5], [1.4, -1.0, 0.6, -0.2]])?;
    let recs = vec![
        PseudoLabelRecord::from_confidence(1, 0.9, 0.05, 0.75)?,
        PseudoLabelRecord::from_confidence(0, 0.95, 0.01, 0.75)?,
    ];
    let yl = [0, 1];
    let batch = LossBatch {
        labeled_x: &xl,
        labels: &yl,
        unlabeled_x: &xu,
        records: &recs,
    };
    let w = LossWeights { nll, ..LossWeights::default() };
    let mut targets = ColMaxTargets::recording();
    total_loss(&m, &m.params, Some(&sar), &batch, w, &mut targets, &mut seeded(77))?;
    let mut targets = targets.into_replay();
    grad_check(&m.params, 1e-5, 1e-4, |g, ps| {
        let out = total_loss(&m, ps, Some(&sar), &batch, w, &mut targets, &mut seeded(77))?;
        *g = out.graph;
        Ok(out.total)
    })
}

#[cfg(test)]
mod tests;
