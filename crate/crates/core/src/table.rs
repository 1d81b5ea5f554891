//! Delimited feature tables: `id,label,<feature columns...>`, one row per trajectory.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::features::{extract_features, prefix_features, CategorySet};
use crate::pipeline::Dataset;
use crate::trace::Trajectory;
use crate::{fmt_real, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub feature_names: Vec<String>,
    pub ids: Vec<String>,
    pub labels: Vec<Option<bool>>,
    pub rows: Array2<f64>,
}

impl FeatureTable {
    /// Extracts features for every trajectory, in input order.
    ///
    /// With `prefix = Some(m)` each trajectory contributes its first
    /// `min(m, S)` steps.
    pub fn from_trajectories(
        ts: &[Trajectory],
        cats: &CategorySet,
        prefix: Option<usize>,
        epsilon: f64,
    ) -> Result<FeatureTable> {
        if prefix == Some(0) {
            return Err(Error::invalid("prefix length must be >= 1"));
        }
        let vectors = ts
            .par_iter()
            .map(|t| match prefix {
                Some(m) => prefix_features(t, m.min(t.num_steps().max(1)), epsilon),
                None => extract_features(t, epsilon),
            })
            .collect::<Result<Vec<_>>>()?;
        let names = cats.names();
        let d = names.len();
        let mut rows = Array2::zeros((ts.len(), d));
        for (i, v) in vectors.iter().enumerate() {
            for (j, x) in v.select(cats).into_iter().enumerate() {
                rows[[i, j]] = x;
            }
        }
        let labels = ts
            .iter()
            .map(|t| t.label.map(|l| l == 1))
            .collect();
        Ok(FeatureTable {
            feature_names: names.into_iter().map(String::from).collect(),
            ids: ts.iter().map(|t| t.id.clone()).collect(),
            labels,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(id.clone());
            rec.push(match self.labels[i] {
                Some(true) => "1".into(),
                Some(false) => "0".into(),
                None => String::new(),
            });
            rec.extend(self.rows.row(i).iter().map(|&v| fmt_real(v)));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn parse_csv(bytes: &[u8]) -> Result<FeatureTable> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
            return Err(Error::Parse {
                line: 1,
                reason: "feature table header must start with `id,label` and name at least one feature".into(),
            });
        }
        let feature_names: Vec<String> = header.iter().skip(2).map(String::from).collect();
        let d = feature_names.len();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let bad = |reason: String| Error::Parse { line, reason };
            if rec.len() != d + 2 {
                return Err(bad(format!("expected {} fields, found {}", d + 2, rec.len())));
            }
            ids.push(rec[0].to_string());
            labels.push(match &rec[1] {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                other => return Err(bad(format!("label `{other}` is not 0, 1 or empty"))),
            });
            for (j, field) in rec.iter().skip(2).enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| bad(format!("column `{}`: `{field}` is not a number", feature_names[j])))?;
                if !v.is_finite() {
                    return Err(bad(format!("column `{}` is not finite", feature_names[j])));
                }
                values.push(v);
            }
        }
        let rows = Array2::from_shape_vec((ids.len(), d), values).expect("row lengths checked");
        Ok(FeatureTable {
            feature_names,
            ids,
            labels,
            rows,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<FeatureTable> {
        Self::parse_csv(&std::fs::read(path)?)
    }

    /// Converts to a labelled dataset; every row must carry a label.
    pub fn into_dataset(self, name: impl Into<String>) -> Result<Dataset> {
        let labels = self
            .labels
            .iter()
            .zip(&self.ids)
            .map(|(l, id)| l.ok_or_else(|| Error::MissingLabel(id.clone())))
            .collect::<Result<Vec<bool>>>()?;
        Dataset::new(name, self.feature_names, self.rows, labels, self.ids)
    }
}
