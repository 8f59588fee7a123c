//! Files written during a run: per-epoch metrics, checkpoints, and the
//! optional pseudo-label log and SAR / modulation dumps.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use super::EpochReport;
use crate::error::{Error, Result};
use crate::network::{write_checkpoint, Checkpoint};
use crate::numerics::Array2;
use crate::pseudolabel::PseudoLabelRecord;
use crate::sarproto::SarBank;

pub const METRICS_HEADER: [&str; 10] = [
    "epoch", "l_s", "l_u", "l_d", "l_ud", "total", "keep_rate", "pl_acc", "target_acc", "lr",
];

pub const PSEUDO_LABEL_HEADER: [&str; 8] =
    ["epoch", "sample_idx", "label", "p_max", "sigma", "keep", "l_scale", "true_class"];

/// Where and what to write. With no `run_dir` nothing touches the disk.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainOutputs {
    pub run_dir: Option<PathBuf>,
    pub dump_sar: bool,
    pub dump_modulator: bool,
    pub pseudo_label_log: bool,
}

type CsvOut = csv::Writer<File>;

pub(crate) struct RunWriter {
    dir: Option<PathBuf>,
    metrics: Option<CsvOut>,
    pseudo_labels: Option<CsvOut>,
    dump_sar: bool,
    dump_modulator: bool,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, e.into())
}

fn create(path: &Path, header: &[&str]) -> Result<CsvOut> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    Ok(w)
}

fn write_matrix(path: &Path, prefix: &str, m: &Array2) -> Result<()> {
    let mut header = vec![prefix.to_string()];
    header.extend((0..m.cols()).map(|k| format!("f{k}")));
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(&header).map_err(csv_err(path))?;
    for r in 0..m.rows() {
        let mut row = vec![r.to_string()];
        row.extend(m.row(r).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back a metrics file written by a run. Step counts are not stored,
/// so every report has `steps == 0`.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochReport>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Schema(format!("{}: unexpected header", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        let num = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|_| Error::Parse {
                line,
                msg: format!("{} is not a number: {:?}", METRICS_HEADER[k], &rec[k]),
            })
        };
        let epoch = rec[0].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad epoch {:?}", &rec[0]),
        })?;
        out.push(EpochReport {
            epoch,
            losses: crate::objective::LossBreakdown {
                l_s: num(1)?,
                l_u: num(2)?,
                l_d: num(3)?,
                l_ud: num(4)?,
                total: num(5)?,
                beta: f64::NAN,
                gamma: f64::NAN,
            },
            keep_rate: num(6)?,
            pl_accuracy: if rec[7].is_empty() { None } else { Some(num(7)?) },
            target_accuracy: num(8)?,
            lr: num(9)?,
            steps: 0,
        });
    }
    Ok(out)
}

impl TrainOutputs {
    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        TrainOutputs {
            run_dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub(crate) fn open(&self) -> Result<RunWriter> {
        let Some(dir) = &self.run_dir else {
            return Ok(RunWriter {
                dir: None,
                metrics: None,
                pseudo_labels: None,
                dump_sar: false,
                dump_modulator: false,
            });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (on, sub) in [(self.dump_sar, "sar"), (self.dump_modulator, "modulator")] {
            if on {
                let p = dir.join(sub);
                fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let pseudo_labels = if self.pseudo_label_log {
            Some(create(&dir.join("pseudo_labels.csv"), &PSEUDO_LABEL_HEADER)?)
        } else {
            None
        };
        Ok(RunWriter {
            metrics: Some(create(&dir.join("metrics.csv"), &METRICS_HEADER)?),
            pseudo_labels,
            dump_sar: self.dump_sar,
            dump_modulator: self.dump_modulator,
            dir: Some(dir.clone()),
        })
    }
}

impl RunWriter {
    pub(crate) fn epoch(
        &mut self,
        report: &EpochReport,
        records: &[PseudoLabelRecord],
        slots: &[usize],
        truth: &[usize],
        bank: Option<&SarBank>,
        modulation: &Array2,
    ) -> Result<()> {
        let Some(dir) = self.dir.clone() else {
            return Ok(());
        };
        if let Some(w) = &mut self.metrics {
            let path = dir.join("metrics.csv");
            let l = &report.losses;
            w.write_record([
                report.epoch.to_string(),
                l.l_s.to_string(),
                l.l_u.to_string(),
                l.l_d.to_string(),
                l.l_ud.to_string(),
                l.total.to_string(),
                report.keep_rate.to_string(),
                report.pl_accuracy.map_or(String::new(), |v| v.to_string()),
                report.target_accuracy.to_string(),
                report.lr.to_string(),
            ])
            .map_err(csv_err(&path))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        if let Some(w) = &mut self.pseudo_labels {
            let path = dir.join("pseudo_labels.csv");
            for ((r, &i), &t) in records.iter().zip(slots).zip(truth) {
                w.write_record([
                    report.epoch.to_string(),
                    i.to_string(),
                    r.label.to_string(),
                    r.p_max.to_string(),
                    r.sigma.to_string(),
                    u8::from(r.keep).to_string(),
                    r.l_scale.to_string(),
                    t.to_string(),
                ])
                .map_err(csv_err(&path))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        if self.dump_sar {
            if let Some(b) = bank {
                write_matrix(&dir.join(format!("sar/epoch_{:03}.csv", report.epoch)), "class", &b.sar)?;
            }
        }
        if self.dump_modulator {
            write_matrix(
                &dir.join(format!("modulator/epoch_{:03}.csv", report.epoch)),
                "class",
                modulation,
            )?;
        }
        Ok(())
    }

    pub(crate) fn checkpoint(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        match &self.dir {
            Some(dir) => write_checkpoint(ck, dir.join(name)),
            None => Ok(()),
        }
    }

    /// Leaves the current parameters and a short diagnostic next to the
    /// metrics before a run is aborted.
    pub(crate) fn abort(&self, ck: &Checkpoint, epoch: usize, step: usize, err: &Error) -> Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        self.checkpoint("abort.ckpt", ck)?;
        let path = dir.join("abort.txt");
        let text = format!("epoch {epoch}\nstep {step}\nerror {err}\n");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
