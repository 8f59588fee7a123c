//! `domain_id,class_id,f0,f1,...` files.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{DomainDataset, Sample};
use crate::error::{Error, Result};

pub fn load_csv(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub(crate) fn read_csv<R: Read>(reader: R) -> Result<DomainDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        None => return Err(Error::Schema("file is empty".into())),
        Some(r) => r.map_err(|e| csv_error(1, e))?,
    };
    if header.len() < 3 || &header[0] != "domain_id" || &header[1] != "class_id" {
        return Err(Error::Schema(
            "header must start with domain_id,class_id followed by feature columns".into(),
        ));
    }
    let input_dim = header.len() - 2;
    for (k, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{k}") {
            return Err(Error::Schema(format!("column {} should be f{k}, found {name}", k + 2)));
        }
    }

    let mut samples = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(line, e))?;
        if rec.len() != header.len() {
            return Err(Error::Schema(format!(
                "line {line} has {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        let id = |j: usize, what: &str| -> Result<usize> {
            rec[j].trim().parse::<usize>().map_err(|_| Error::Parse {
                line,
                msg: format!("{what} {:?} is not a non-negative integer", &rec[j]),
            })
        };
        let domain_id = id(0, "domain_id")?;
        let class_id = id(1, "class_id")?;
        let mut features = Vec::with_capacity(input_dim);
        for (k, field) in rec.iter().skip(2).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("feature f{k} {field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("feature f{k} is not finite"),
                });
            }
            features.push(v);
        }
        samples.push(Sample {
            features,
            class_id,
            domain_id,
            truth_visible: true,
        });
    }
    if samples.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    let num_classes = samples.iter().map(|s| s.class_id).max().unwrap_or(0) + 1;
    let num_domains = samples.iter().map(|s| s.domain_id).max().unwrap_or(0) + 1;
    Ok(DomainDataset {
        samples,
        num_classes,
        num_domains,
        input_dim,
        roles: None,
    })
}

pub fn write_csv(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_to(dataset, file).map_err(|e| Error::io(path, e))
}

fn write_to<W: Write>(dataset: &DomainDataset, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["domain_id".to_string(), "class_id".to_string()];
    header.extend((0..dataset.input_dim).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for s in &dataset.samples {
        let mut row = vec![s.domain_id.to_string(), s.class_id.to_string()];
        row.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()
}

fn csv_error(line: usize, e: csv::Error) -> Error {
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_rows() {
        let text = "domain_id,class_id,f0,f1\n0,1,0.5,-2\n1,0,1e-3,4.25\n2,2,0,0\n";
        let ds = read_csv(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_dim, 2);
        assert_eq!(ds.num_classes, 3);
        assert_eq!(ds.num_domains, 3);
        assert_eq!(ds.samples[1].features, vec![1e-3, 4.25]);
        assert!(ds.roles.is_none());
    }

    #[test]
    fn non_numeric_feature_names_line() {
        let text = "domain_id,class_id,f0\n0,0,1.0\n0,1,abc\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_inconsistent_files() {
        assert!(matches!(read_csv("".as_bytes()), Err(Error::Schema(_))));
        assert!(matches!(
            read_csv("domain_id,class_id,f0\n".as_bytes()),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            read_csv("domain_id,class_id,f0,f1\n0,0,1\n".as_bytes()),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            read_csv("dom,class_id,f0\n0,0,1\n".as_bytes()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn written_file_reads_back_exactly() {
        let text = "domain_id,class_id,f0,f1\n0,1,0.1,-0.30000000000000004\n3,0,1e300,5\n";
        let ds = read_csv(text.as_bytes()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&ds, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), ds);
    }
}
