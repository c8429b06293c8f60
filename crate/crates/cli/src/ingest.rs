//! Comma-delimited input with a header row.

use std::io::Read;
use std::path::Path;

use rkd_core::Sample;
use serde::{Deserialize, Serialize};

use crate::config::ColumnMap;
use crate::CliError;

/// A data line left out of the sample; `line` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub sample: Sample,
    pub rejected: Vec<RejectedRow>,
}

pub fn ingest(path: &Path, columns: &ColumnMap) -> Result<Ingested, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    ingest_reader(file, columns)
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| CliError::Input(format!("missing column '{name}'")))
}

pub fn ingest_reader(reader: impl Read, columns: &ColumnMap) -> Result<Ingested, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("cannot read header: {e}")))?
        .clone();
    let iy = column(&headers, &columns.y)?;
    let ix = column(&headers, &columns.x)?;
    let ib = columns.b.as_deref().map(|b| column(&headers, b)).transpose()?;

    let (mut y, mut x, mut b) = (Vec::new(), Vec::new(), Vec::new());
    let mut rejected = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Input(format!("malformed input: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |i: usize, name: &str| -> Result<f64, String> {
            let raw = rec.get(i).ok_or_else(|| format!("missing value for '{name}'"))?;
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(format!("non-finite value '{raw}' in '{name}'")),
            }
        };
        let parsed = (|| {
            let yi = cell(iy, &columns.y)?;
            let xi = cell(ix, &columns.x)?;
            let bi = match (ib, columns.b.as_deref()) {
                (Some(i), Some(name)) => Some(cell(i, name)?),
                _ => None,
            };
            Ok::<_, String>((yi, xi, bi))
        })();
        match parsed {
            Ok((yi, xi, bi)) => {
                y.push(yi);
                x.push(xi);
                b.extend(bi);
            }
            Err(reason) => rejected.push(RejectedRow { line, reason }),
        }
    }
    if y.is_empty() {
        return Err(CliError::Input("no usable rows".into()));
    }
    let mut sample = Sample::new(y, x).map_err(|e| CliError::Input(e.to_string()))?;
    if ib.is_some() {
        sample = sample
            .with_treatment(b)
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    Ok(Ingested { sample, rejected })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols() -> ColumnMap {
        ColumnMap::default()
    }

    #[test]
    fn well_formed_rows() {
        let d = ingest_reader("y,x\n1,0.1\n2,-0.2\n3,0.5\n".as_bytes(), &cols()).unwrap();
        assert_eq!(d.sample.len(), 3);
        assert!(d.rejected.is_empty());
        assert_eq!(d.sample.x, vec![0.1, -0.2, 0.5]);
    }

    #[test]
    fn bad_rows_are_dropped_with_line_numbers() {
        let text = "x,y\n0.1,1\n0.2,NaN\n0.3,abc\n0.4\n0.5,inf\n0.6,2\n";
        let d = ingest_reader(text.as_bytes(), &cols()).unwrap();
        assert_eq!(d.sample.len(), 2);
        let lines: Vec<u64> = d.rejected.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![3, 4, 5, 6]);
        assert_eq!(d.sample.y, vec![1.0, 2.0]);
    }

    #[test]
    fn column_mapping_and_treatment() {
        let map = ColumnMap {
            y: "dur".into(),
            x: "earn".into(),
            b: Some("ben".into()),
        };
        let d = ingest_reader("earn,ben,dur\n1,0.5,3\n2,1,4\n".as_bytes(), &map).unwrap();
        assert_eq!(d.sample.y, vec![3.0, 4.0]);
        assert_eq!(d.sample.b.as_deref(), Some(&[0.5, 1.0][..]));
    }

    #[test]
    fn missing_column_and_empty_input_fail() {
        assert!(matches!(ingest_reader("a,x\n1,2\n".as_bytes(), &cols()), Err(CliError::Input(_))));
        assert!(matches!(ingest_reader("y,x\nNaN,1\n".as_bytes(), &cols()), Err(CliError::Input(_))));
        assert!(ingest_reader("y,x\n".as_bytes(), &cols()).is_err());
    }
}
