//! Raw tabular input: schema files, uniform binning and dataset files.
//!
//! Continuous attributes are cut into equal-width bins between a public
//! minimum and maximum; the top edge belongs to the last bin. Values outside
//! the declared range are clamped to the boundary bin and counted.
//! Categorical attributes use their declared value list, or the order in
//! which values are first seen.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use crate::domain::{DiscreteDataset, Domain};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttributeSpec {
    Categorical {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        values: Option<Vec<String>>,
    },
    Continuous {
        name: String,
        min: f64,
        max: f64,
        #[serde(default = "default_bins")]
        bins: usize,
    },
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl AttributeSpec {
    pub fn name(&self) -> &str {
        match self {
            AttributeSpec::Categorical { name, .. } | AttributeSpec::Continuous { name, .. } => {
                name
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub attributes: Vec<AttributeSpec>,
}

impl Schema {
    pub fn load(path: &Path) -> Result<Schema> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Schema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Schema("no attributes declared".into()));
        }
        for a in &self.attributes {
            if let AttributeSpec::Continuous {
                name,
                min,
                max,
                bins,
            } = a
            {
                if !(min < max) {
                    return Err(Error::Schema(format!(
                        "'{name}': min {min} must be below max {max}"
                    )));
                }
                if *bins == 0 {
                    return Err(Error::Schema(format!("'{name}': bins must be at least 1")));
                }
            }
            if let AttributeSpec::Categorical {
                name,
                values: Some(v),
            } = a
            {
                if v.is_empty() {
                    return Err(Error::Schema(format!("'{name}': empty value list")));
                }
            }
        }
        Ok(())
    }
}

/// Uniform bin index for `value` in `[min, max]`; the boolean reports clamping.
pub fn bin_index(value: f64, min: f64, max: f64, bins: usize) -> (u32, bool) {
    if value < min {
        return (0, true);
    }
    if value > max {
        return (bins as u32 - 1, true);
    }
    let width = (max - min) / bins as f64;
    let b = ((value - min) / width).floor() as usize;
    (b.min(bins - 1) as u32, false)
}

/// A header plus string cells, as read from a delimited file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read_csv(path: &Path) -> Result<RawTable> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => Error::Csv(e),
        })?;
        let header = reader
            .headers()?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            rows.push(rec?.iter().map(|s| s.trim().to_string()).collect());
        }
        Ok(RawTable { header, rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizeReport {
    /// Per attribute, how many values fell outside `[min, max]`.
    pub clamped: Vec<usize>,
    /// Per categorical attribute, the code-to-value dictionary.
    pub categories: Vec<Option<Vec<String>>>,
}

impl DiscretizeReport {
    pub fn total_clamped(&self) -> usize {
        self.clamped.iter().sum()
    }
}

/// Category labels in code order, label lookup, and whether the list is fixed.
type Dictionary = (Vec<String>, HashMap<String, u32>, bool);

pub fn discretize(raw: &RawTable, schema: &Schema) -> Result<(DiscreteDataset, DiscretizeReport)> {
    schema.validate()?;
    let columns: Vec<usize> = schema
        .attributes
        .iter()
        .map(|a| {
            raw.header
                .iter()
                .position(|h| h == a.name())
                .ok_or_else(|| Error::Schema(format!("column '{}' missing from input", a.name())))
        })
        .collect::<Result<_>>()?;

    let d = schema.attributes.len();
    let mut dictionaries: Vec<Option<Dictionary>> = schema
        .attributes
        .iter()
        .map(|a| match a {
            AttributeSpec::Categorical { values, .. } => {
                let fixed = values.is_some();
                let list = values.clone().unwrap_or_default();
                let map = list
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v.clone(), i as u32))
                    .collect();
                Some((list, map, fixed))
            }
            AttributeSpec::Continuous { .. } => None,
        })
        .collect();

    let mut clamped = vec![0usize; d];
    let mut values = Vec::with_capacity(raw.rows.len() * d);
    for (r, row) in raw.rows.iter().enumerate() {
        for (i, spec) in schema.attributes.iter().enumerate() {
            let cell = row.get(columns[i]).ok_or_else(|| Error::InvalidRow {
                row: r,
                reason: format!("missing column '{}'", spec.name()),
            })?;
            let code = match spec {
                AttributeSpec::Continuous {
                    min,
                    max,
                    bins,
                    name,
                } => {
                    let v: f64 = cell.parse().map_err(|_| Error::InvalidRow {
                        row: r,
                        reason: format!("'{cell}' is not numeric for '{name}'"),
                    })?;
                    if v.is_nan() {
                        return Err(Error::InvalidRow {
                            row: r,
                            reason: format!("NaN for '{name}'"),
                        });
                    }
                    let (b, was_clamped) = bin_index(v, *min, *max, *bins);
                    clamped[i] += was_clamped as usize;
                    b
                }
                AttributeSpec::Categorical { name, .. } => {
                    let (list, map, fixed) = dictionaries[i].as_mut().expect("categorical");
                    match map.get(cell.as_str()) {
                        Some(&c) => c,
                        None if *fixed => {
                            return Err(Error::InvalidRow {
                                row: r,
                                reason: format!("'{cell}' is not a declared value of '{name}'"),
                            })
                        }
                        None => {
                            let c = list.len() as u32;
                            list.push(cell.clone());
                            map.insert(cell.clone(), c);
                            c
                        }
                    }
                }
            };
            values.push(code);
        }
    }

    let sizes = schema
        .attributes
        .iter()
        .zip(&dictionaries)
        .map(|(a, dict)| match a {
            AttributeSpec::Continuous { bins, .. } => *bins,
            AttributeSpec::Categorical { .. } => {
                dict.as_ref().map_or(1, |(l, _, _)| l.len().max(1))
            }
        })
        .collect();
    let names = schema
        .attributes
        .iter()
        .map(|a| a.name().to_string())
        .collect();
    let domain = Domain::new(names, sizes)?;
    let data = DiscreteDataset::from_flat(domain, values)?;
    let categories = dictionaries
        .into_iter()
        .map(|d| d.map(|(list, _, _)| list))
        .collect();
    Ok((
        data,
        DiscretizeReport {
            clamped,
            categories,
        },
    ))
}

/// Writes integer codes with a header of attribute names.
pub fn write_dataset_csv<W: std::io::Write>(data: &DiscreteDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(data.domain().names())?;
    for row in data.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<dataset>", e))?;
    Ok(())
}

/// Reads a file written by [`write_dataset_csv`]; columns are matched by name.
pub fn read_dataset_csv(path: &Path, domain: &Domain) -> Result<DiscreteDataset> {
    let raw = RawTable::read_csv(path)?;
    let columns: Vec<usize> = domain
        .names()
        .iter()
        .map(|n| {
            raw.header.iter().position(|h| h == n).ok_or_else(|| {
                Error::Schema(format!("column '{n}' missing from {}", path.display()))
            })
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(raw.rows.len() * domain.len());
    for (r, row) in raw.rows.iter().enumerate() {
        for &c in &columns {
            let cell = row.get(c).ok_or_else(|| Error::InvalidRow {
                row: r,
                reason: "short row".into(),
            })?;
            values.push(cell.parse::<u32>().map_err(|_| Error::InvalidRow {
                row: r,
                reason: format!("'{cell}' is not a code"),
            })?);
        }
    }
    DiscreteDataset::from_flat(domain.clone(), values)
}

pub fn load_domain(path: &Path) -> Result<Domain> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_boundaries() {
        assert_eq!(bin_index(0.0, 0.0, 32.0, 32), (0, false));
        assert_eq!(bin_index(32.0, 0.0, 32.0, 32), (31, false));
        assert_eq!(bin_index(15.5, 0.0, 32.0, 32), (15, false));
        assert_eq!(bin_index(-1.0, 0.0, 32.0, 32), (0, true));
        assert_eq!(bin_index(40.0, 0.0, 32.0, 32), (31, true));
        assert_eq!(bin_index(0.7, 0.0, 1.0, 1), (0, false));
    }

    fn table(rows: &[[&str; 2]]) -> RawTable {
        RawTable {
            header: vec!["color".into(), "size".into()],
            rows: rows
                .iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
        }
    }

    fn schema() -> Schema {
        serde_json::from_str(
            r#"{"attributes":[
                {"name":"size","kind":"continuous","min":0,"max":10,"bins":5},
                {"name":"color","kind":"categorical"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn discretize_mixed_table() {
        let raw = table(&[
            ["red", "0"],
            ["blue", "10"],
            ["red", "12"],
            ["green", "4.9"],
        ]);
        let (data, report) = discretize(&raw, &schema()).unwrap();
        assert_eq!(data.domain().sizes(), &[5, 3]);
        assert_eq!(
            data.domain().names(),
            &["size".to_string(), "color".to_string()]
        );
        assert_eq!(data.row(0), &[0, 0]);
        assert_eq!(data.row(1), &[4, 1]);
        assert_eq!(data.row(2), &[4, 0]);
        assert_eq!(data.row(3), &[2, 2]);
        assert_eq!(report.clamped, vec![1, 0]);
        assert_eq!(
            report.categories[1].as_deref(),
            Some(&["red".to_string(), "blue".to_string(), "green".to_string()][..])
        );
    }

    #[test]
    fn discretize_errors() {
        let raw = table(&[["red", "abc"]]);
        assert!(discretize(&raw, &schema()).is_err());
        let bad: Schema = serde_json::from_str(
            r#"{"attributes":[{"name":"size","kind":"continuous","min":3,"max":3}]}"#,
        )
        .unwrap();
        assert!(bad.validate().is_err());
        let missing: Schema =
            serde_json::from_str(r#"{"attributes":[{"name":"weight","kind":"categorical"}]}"#)
                .unwrap();
        assert!(discretize(&table(&[["red", "1"]]), &missing).is_err());
        let fixed: Schema = serde_json::from_str(
            r#"{"attributes":[{"name":"color","kind":"categorical","values":["red"]}]}"#,
        )
        .unwrap();
        assert!(discretize(&table(&[["blue", "1"]]), &fixed).is_err());
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let raw = table(&[["red", "0"], ["blue", "10"]]);
        let (data, _) = discretize(&raw, &schema()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset_csv(&data, std::fs::File::create(&path).unwrap()).unwrap();
        let back = read_dataset_csv(&path, data.domain()).unwrap();
        assert_eq!(back, data);
    }
}
