//! Text checkpoints: `meta` key/value lines followed by named arrays with
//! shape headers. Values are written in Rust's shortest round-trip form, so
//! reading a file back reproduces every `f64` bit for bit.
//!
//! ```text
//! modfeat-checkpoint 1
//! meta num_classes 7
//! array classifier.weight 32 7
//! 0.1 -0.25 ...
//! end
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Affine, Classifier, Extractor, ExtractorConfig, Model};
use crate::error::{Error, Result};
use crate::numerics::{Array2, ParamSet};

const MAGIC: &str = "modfeat-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Array2)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&Array2> {
        self.arrays.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    fn required_meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta {key}")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad meta {key}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, a) in &self.arrays {
            let _ = writeln!(out, "array {name} {} {}", a.rows(), a.cols());
            for r in 0..a.rows() {
                let row: Vec<String> = a.row(r).iter().map(|v| format!("{v:?}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(Error::Checkpoint("missing header line".into())),
        }
        let mut ck = Checkpoint::default();
        let bad = |n: usize, what: &str| Error::Checkpoint(format!("line {}: {what}", n + 1));
        while let Some((n, line)) = lines.next() {
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("end") => return Ok(ck),
                Some("meta") => {
                    let rest = parts.next().ok_or_else(|| bad(n, "empty meta"))?;
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                Some("array") => {
                    let fields: Vec<&str> = parts.next().unwrap_or("").split(' ').collect();
                    if fields.len() != 3 {
                        return Err(bad(n, "array header needs name rows cols"));
                    }
                    let rows: usize = fields[1].parse().map_err(|_| bad(n, "rows"))?;
                    let cols: usize = fields[2].parse().map_err(|_| bad(n, "cols"))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (m, row) = lines.next().ok_or_else(|| bad(n, "truncated array"))?;
                        let before = data.len();
                        for tok in row.split_whitespace() {
                            data.push(tok.parse::<f64>().map_err(|_| bad(m, "value"))?);
                        }
                        if data.len() - before != cols {
                            return Err(bad(m, "row length"));
                        }
                    }
                    ck.arrays
                        .push((fields[0].to_string(), Array2::from_vec(rows, cols, data)?));
                }
                _ => return Err(bad(n, "unknown record")),
            }
        }
        Err(Error::Checkpoint("missing end marker".into()))
    }
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ck.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::parse(&text)
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = &self.extractor.config;
        let mut ck = Checkpoint::default();
        ck.push_meta("input_dim", cfg.input_dim);
        let hidden: Vec<String> = cfg.hidden_dims.iter().map(|h| h.to_string()).collect();
        ck.push_meta("hidden_dims", hidden.join(","));
        ck.push_meta("feature_dim", cfg.feature_dim);
        ck.push_meta("dropout_p", format!("{:?}", cfg.dropout_p));
        ck.push_meta("residual", cfg.residual);
        ck.push_meta("num_classes", self.num_classes());
        for (_, p) in self.params.iter() {
            ck.arrays.push((p.name.clone(), p.value.clone()));
        }
        ck
    }

    /// Rebuilds a model from [`Model::to_checkpoint`] output. Arrays whose
    /// names are not model parameters are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let hidden_text: String = ck.required_meta("hidden_dims")?;
        let hidden_dims = if hidden_text.is_empty() {
            Vec::new()
        } else {
            hidden_text
                .split(',')
                .map(|h| h.parse().map_err(|_| Error::Checkpoint("bad hidden_dims".into())))
                .collect::<Result<Vec<usize>>>()?
        };
        let config = ExtractorConfig {
            input_dim: ck.required_meta("input_dim")?,
            hidden_dims,
            feature_dim: ck.required_meta("feature_dim")?,
            dropout_p: ck.required_meta("dropout_p")?,
            residual: ck.required_meta("residual")?,
        };
        let num_classes: usize = ck.required_meta("num_classes")?;

        // Same registration order as `Model::new`, values from the file.
        let mut params = ParamSet::new();
        let take = |params: &mut ParamSet, name: &str, shape: (usize, usize)| -> Result<_> {
            let a = ck
                .array(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if a.shape() != shape {
                return Err(Error::Checkpoint(format!("{name} has shape {:?}, expected {shape:?}", a.shape())));
            }
            params.add(name, a.clone(), true)
        };
        let mut hidden = Vec::new();
        let mut width = config.input_dim;
        for (i, &h) in config.hidden_dims.iter().enumerate() {
            let weight = take(&mut params, &format!("extractor.hidden{i}.weight"), (width, h))?;
            let bias = take(&mut params, &format!("extractor.hidden{i}.bias"), (1, h))?;
            hidden.push(Affine { weight, bias });
            width = h;
        }
        let output = Affine {
            weight: take(&mut params, "extractor.output.weight", (width, config.feature_dim))?,
            bias: take(&mut params, "extractor.output.bias", (1, config.feature_dim))?,
        };
        let cls = Affine {
            weight: take(&mut params, "classifier.weight", (config.feature_dim, num_classes))?,
            bias: take(&mut params, "classifier.bias", (1, num_classes))?,
        };
        let modulator = take(&mut params, "modulator", (num_classes, config.feature_dim))?;
        Ok(Model {
            params,
            extractor: Extractor {
                config,
                hidden,
                output,
            },
            classifier: Classifier {
                affine: cls,
                num_classes,
            },
            modulator,
        })
    }
}
