//! In-memory datasets and delimited-text ingestion.
//!
//! Covariates are stored row-major in schema order. Categorical and binary
//! covariates hold their level index; `y` is `None` for nonrespondents.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{CovariateKind, Schema};
use crate::error::{Error, Result};

/// Recorded z-scoring of a continuous covariate: `stored = (raw - mean) / sd`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: Arc<Schema>,
    x: Vec<f64>,
    y: Vec<Option<f64>>,
    transforms: Vec<Standardization>,
}

impl Dataset {
    pub fn new(schema: Arc<Schema>, x: Vec<f64>, y: Vec<Option<f64>>) -> Result<Self> {
        let p = schema.len();
        if x.len() != p * y.len() {
            return Err(Error::spec(format!(
                "covariate buffer has {} values, expected {} rows x {p} columns",
                x.len(),
                y.len()
            )));
        }
        for (i, row) in x.chunks(p.max(1)).enumerate().take(y.len()) {
            for ((name, kind), &v) in schema.iter().zip(row) {
                let ok = match kind {
                    CovariateKind::Continuous => v.is_finite(),
                    _ => v >= 0.0 && v.fract() == 0.0 && (v as usize) < kind.level_count().unwrap_or(0),
                };
                if !ok {
                    return Err(Error::Ingest { row: i + 1, column: name.to_string(), msg: format!("invalid value {v}") });
                }
            }
        }
        if let Some(i) = y.iter().position(|v| v.is_some_and(|v| !v.is_finite())) {
            return Err(Error::Ingest { row: i + 1, column: "y".into(), msg: "non-finite outcome".into() });
        }
        Ok(Dataset { schema, x, y, transforms: Vec::new() })
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.schema.len()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn y(&self, i: usize) -> Option<f64> {
        self.y[i]
    }

    pub fn ys(&self) -> &[Option<f64>] {
        &self.y
    }

    pub fn delta(&self, i: usize) -> bool {
        self.y[i].is_some()
    }

    pub fn respondents(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.delta(i)).collect()
    }

    pub fn nonrespondents(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.delta(i)).collect()
    }

    pub fn n_respondents(&self) -> usize {
        self.y.iter().filter(|v| v.is_some()).count()
    }

    pub fn response_rate(&self) -> f64 {
        self.n_respondents() as f64 / self.n() as f64
    }

    pub fn transforms(&self) -> &[Standardization] {
        &self.transforms
    }

    /// Z-score the named continuous columns in place and record the transform.
    pub fn standardize(&mut self, columns: &[String]) -> Result<()> {
        let p = self.p();
        for name in columns {
            let j = self.schema.index_of(name).ok_or_else(|| Error::UnknownCovariate(name.clone()))?;
            if !self.schema.kind(name).is_some_and(CovariateKind::is_continuous) {
                return Err(Error::Config(format!("cannot standardize non-continuous column `{name}`")));
            }
            let col: Vec<f64> = (0..self.n()).map(|i| self.x[i * p + j]).collect();
            let mean = crate::numeric::mean(&col);
            let sd = crate::numeric::sd(&col);
            if !(sd > 0.0) {
                return Err(Error::Config(format!("column `{name}` is constant")));
            }
            for i in 0..self.n() {
                self.x[i * p + j] = (self.x[i * p + j] - mean) / sd;
            }
            self.transforms.push(Standardization { column: name.clone(), mean, sd });
        }
        Ok(())
    }
}

/// Column layout of a delimited file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub covariates: Vec<(String, CovariateKind)>,
    pub y: String,
    /// Optional explicit response indicator; must agree with `y` missingness.
    #[serde(default)]
    pub delta: Option<String>,
}

impl ColumnSpec {
    pub fn schema(&self) -> Schema {
        Schema::new(self.covariates.iter().cloned())
    }
}

fn is_missing(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || t == "NA"
}

fn sniff_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    if header.contains('\t') && !header.contains(',') {
        b'\t'
    } else {
        b','
    }
}

pub fn ingest(path: &Path, spec: &ColumnSpec) -> Result<Dataset> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    ingest_str(&text, spec)
}

pub fn ingest_str(text: &str, spec: &ColumnSpec) -> Result<Dataset> {
    let schema = Arc::new(spec.schema());
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(text))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column `{name}` not found in header")))
    };
    let cov_cols: Vec<(usize, &CovariateKind, &str)> = schema
        .iter()
        .map(|(n, k)| Ok((find(n)?, k, n)))
        .collect::<Result<_>>()?;
    let y_col = find(&spec.y)?;
    let d_col = spec.delta.as_deref().map(find).transpose()?;

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        for &(c, kind, name) in &cov_cols {
            let f = rec.get(c).unwrap_or("");
            if is_missing(f) {
                return Err(Error::Ingest { row, column: name.into(), msg: "missing covariate value".into() });
            }
            let v = match kind {
                CovariateKind::Continuous => f.parse::<f64>().map_err(|e| Error::Ingest {
                    row,
                    column: name.into(),
                    msg: format!("not a number: {e}"),
                })?,
                _ => {
                    let levels = kind.levels().expect("discrete");
                    levels.iter().position(|l| l == f).ok_or_else(|| Error::Ingest {
                        row,
                        column: name.into(),
                        msg: format!("`{f}` is not a level of {{{}}}", levels.join(", ")),
                    })? as f64
                }
            };
            x.push(v);
        }
        let yf = rec.get(y_col).unwrap_or("");
        let yv = if is_missing(yf) {
            None
        } else {
            Some(yf.parse::<f64>().map_err(|e| Error::Ingest {
                row,
                column: spec.y.clone(),
                msg: format!("not a number: {e}"),
            })?)
        };
        if let Some(dc) = d_col {
            let df = rec.get(dc).unwrap_or("");
            let d = match df {
                "1" => true,
                "0" => false,
                _ => {
                    return Err(Error::Ingest {
                        row,
                        column: headers[dc].to_string(),
                        msg: format!("response indicator must be 0 or 1, got `{df}`"),
                    })
                }
            };
            if d != yv.is_some() {
                return Err(Error::Ingest {
                    row,
                    column: headers[dc].to_string(),
                    msg: "response indicator disagrees with outcome missingness".into(),
                });
            }
        }
        y.push(yv);
    }
    let ds = Dataset::new(schema, x, y)?;
    if ds.n_respondents() == 0 {
        return Err(Error::NoRespondents);
    }
    Ok(ds)
}

/// Write a dataset as comma-separated text with `NA` for missing outcomes.
/// Values are written with round-trip precision.
pub fn emit<W: Write>(data: &Dataset, y_name: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = data.schema.names().map(str::to_string).collect();
    header.push(y_name.to_string());
    w.write_record(&header)?;
    let kinds: Vec<&CovariateKind> = data.schema.iter().map(|(_, k)| k).collect();
    for i in 0..data.n() {
        let mut rec: Vec<String> = data
            .x(i)
            .iter()
            .zip(&kinds)
            .map(|(&v, k)| match k.levels() {
                None => format!("{v:?}"),
                Some(l) => l[v as usize].clone(),
            })
            .collect();
        rec.push(data.y(i).map_or_else(|| "NA".to_string(), |v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ColumnSpec {
        ColumnSpec {
            covariates: vec![
                ("x".into(), CovariateKind::Continuous),
                ("z".into(), CovariateKind::Categorical(vec!["a".into(), "b".into()])),
            ],
            y: "y".into(),
            delta: None,
        }
    }

    #[test]
    fn three_rows_one_missing() {
        let d = ingest_str("x,z,y\n0.5,a,1.0\n-1,b,NA\n2,a,3\n", &spec()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.n_respondents(), 2);
        assert_eq!(d.x(1), &[-1.0, 1.0]);
    }

    #[test]
    fn tab_delimited_and_empty_missing() {
        let d = ingest_str("x\tz\ty\n0.5\ta\t\n1\tb\t2\n", &spec()).unwrap();
        assert_eq!(d.n_respondents(), 1);
    }

    #[test]
    fn conflicting_indicator_names_row() {
        let mut s = spec();
        s.delta = Some("d".into());
        let err = ingest_str("x,z,y,d\n0.5,a,1.0,1\n1,b,NA,1\n", &s).unwrap_err();
        assert!(matches!(err, Error::Ingest { row: 2, .. }), "{err}");
    }

    #[test]
    fn bad_values_located() {
        let err = ingest_str("x,z,y\n0.5,a,1.0\nfoo,b,2\n", &spec()).unwrap_err();
        assert!(matches!(err, Error::Ingest { row: 2, ref column, .. } if column == "x"));
        let err = ingest_str("x,z,y\n0.5,c,1.0\n", &spec()).unwrap_err();
        assert!(matches!(err, Error::Ingest { row: 1, ref column, .. } if column == "z"));
        let err = ingest_str("x,z,y\nNA,a,1.0\n", &spec()).unwrap_err();
        assert!(matches!(err, Error::Ingest { .. }));
        assert!(matches!(ingest_str("x,z,y\n1,a,NA\n", &spec()), Err(Error::NoRespondents)));
    }

    #[test]
    fn emit_roundtrip() {
        let d = ingest_str("x,z,y\n0.1,a,1.0000000000000002\n-1e-300,b,NA\n2,a,3\n", &spec()).unwrap();
        let mut buf = Vec::new();
        emit(&d, "y", &mut buf).unwrap();
        let back = ingest_str(std::str::from_utf8(&buf).unwrap(), &spec()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn standardize_records_transform() {
        let mut d = ingest_str("x,z,y\n1,a,1\n2,a,1\n3,b,1\n", &spec()).unwrap();
        d.standardize(&["x".to_string()]).unwrap();
        assert_eq!(d.transforms()[0].mean, 2.0);
        assert_eq!(d.transforms()[0].sd, 1.0);
        assert_eq!(d.x(0)[0], -1.0);
        assert!(d.standardize(&["z".to_string()]).is_err());
    }
}
