//! Keep rate, pseudo-label accuracy, modulator diagnostics and seed
//! aggregation.

use std::path::Path;

use crate::data::DimRoles;
use crate::error::{Error, Result};
use crate::numerics::Array2;
use crate::pseudolabel::PseudoLabelRecord;
use crate::trainer::EpochReport;

pub fn keep_rate(records: &[PseudoLabelRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("pseudo-label records"));
    }
    Ok(records.iter().filter(|r| r.keep).count() as f64 / records.len() as f64)
}

/// Fraction of kept records whose label matches the hidden class; `None`
/// when nothing was kept.
pub fn pl_accuracy(records: &[PseudoLabelRecord], truth: &[usize]) -> Result<Option<f64>> {
    if records.len() != truth.len() {
        return Err(Error::dim(
            "pl_accuracy",
            format!("{} records, {} true classes", records.len(), truth.len()),
        ));
    }
    let mut kept = 0usize;
    let mut correct = 0usize;
    for (r, &t) in records.iter().zip(truth) {
        if r.keep {
            kept += 1;
            correct += usize::from(r.label == t);
        }
    }
    Ok((kept > 0).then(|| correct as f64 / kept as f64))
}

/// Mean of `M` over signal columns minus mean over noise columns.
pub fn modulator_gap(m: &Array2, roles: Option<&DimRoles>) -> Result<f64> {
    let roles = roles.ok_or_else(|| Error::Unsupported("dimension roles unknown for this dataset".into()))?;
    if roles.signal.is_empty() || roles.noise.is_empty() {
        return Err(Error::Unsupported("need both signal and noise dimensions".into()));
    }
    let col_mean = |cols: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        for &k in cols {
            if k >= m.cols() {
                return Err(Error::dim("modulator_gap", format!("column {k} of {}", m.cols())));
            }
            total += (0..m.rows()).map(|r| m.get(r, k)).sum::<f64>();
        }
        Ok(total / (cols.len() * m.rows()) as f64)
    };
    Ok(col_mean(&roles.signal)? - col_mean(&roles.noise)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

/// One finished seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub reports: Vec<EpochReport>,
    pub modulator_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub seeds: Vec<u64>,
    pub target_acc: Stat,
    pub keep_rate: Stat,
    /// Over the seeds whose final epoch kept at least one pseudo-label.
    pub pl_acc: Option<Stat>,
    pub modulator_gap: Option<Stat>,
}

/// Final-epoch metrics across seeds.
pub fn aggregate(runs: &[SeedRun]) -> Result<RunSummary> {
    let first = runs.first().ok_or(Error::Empty("seed runs"))?;
    let epochs = first.reports.len();
    if epochs == 0 {
        return Err(Error::Empty("epoch reports"));
    }
    if let Some(bad) = runs.iter().find(|r| r.reports.len() != epochs) {
        return Err(Error::Contract(format!(
            "seed {} has {} epochs, seed {} has {epochs}",
            bad.seed,
            bad.reports.len(),
            first.seed
        )));
    }
    let last = |r: &SeedRun| r.reports[epochs - 1].clone();
    let acc: Vec<f64> = runs.iter().map(|r| last(r).target_accuracy).collect();
    let keep: Vec<f64> = runs.iter().map(|r| last(r).keep_rate).collect();
    let pl: Vec<f64> = runs.iter().filter_map(|r| last(r).pl_accuracy).collect();
    let gap: Vec<f64> = runs.iter().filter_map(|r| r.modulator_gap).collect();
    Ok(RunSummary {
        seeds: runs.iter().map(|r| r.seed).collect(),
        target_acc: Stat::of(&acc).expect("nonempty"),
        keep_rate: Stat::of(&keep).expect("nonempty"),
        pl_acc: Stat::of(&pl),
        modulator_gap: Stat::of(&gap),
    })
}

impl RunSummary {
    pub fn rows(&self) -> Vec<(&'static str, Stat)> {
        let mut out = vec![("target_acc", self.target_acc), ("keep_rate", self.keep_rate)];
        if let Some(s) = self.pl_acc {
            out.push(("pl_acc", s));
        }
        if let Some(s) = self.modulator_gap {
            out.push(("modulator_gap", s));
        }
        out
    }

    /// `metric,mean,std,n_seeds`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let io = |e: csv::Error| Error::io(path, e.into());
        w.write_record(["metric", "mean", "std", "n_seeds"]).map_err(io)?;
        for (name, s) in self.rows() {
            w.write_record([name.to_string(), s.mean.to_string(), s.std.to_string(), s.n.to_string()])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
