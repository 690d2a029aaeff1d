//! Portable text matrix format and dataset directories.
//!
//! A matrix file is UTF-8 text: the first line holds `rows,cols`, followed by
//! `rows` lines of `cols` comma-separated float64 values written in shortest
//! round-trip form.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lasso::{Dictionary, DictionaryKind};
use crate::linalg::Mat;

pub fn format_matrix(m: &Mat) -> String {
    let mut out = String::with_capacity(m.len() * 20 + 16);
    writeln!(out, "{},{}", m.nrows(), m.ncols()).unwrap();
    for row in m.row_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str) -> Result<Mat> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty matrix file".into() })?;
    let (rows, cols) = parse_header(header)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if seen == rows {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("more than the {rows} rows declared in the header"),
            });
        }
        let before = data.len();
        for tok in line.split(',') {
            let tok = tok.trim();
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("non-numeric token {tok:?}"),
            })?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {cols} values, found {}", data.len() - before),
            });
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Parse {
            line: seen + 2,
            msg: format!("header declares {rows} rows, found {seen}"),
        });
    }
    Ok(Mat::from_row_slice(rows, cols, &data))
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parse { line: 1, msg: format!("malformed header {line:?}") };
    let mut parts = line.split(',');
    let rows = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    let cols = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok((rows, cols))
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    fs::write(path, format_matrix(m))?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Mat> {
    parse_matrix(&fs::read_to_string(path)?)
}

pub const DATASET_META: &str = "dataset.json";
pub const DICTIONARY_FILE: &str = "D.mat";
pub const SAMPLES_FILE: &str = "X.mat";
pub const CODES_FILE: &str = "Z_true.mat";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: DictionaryKind,
    pub n: usize,
    pub m: usize,
    pub rho: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub seed: u64,
}

/// Dictionary D, samples X (n×N, one per column) and optionally the codes that generated them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub dict: Dictionary,
    pub samples: Mat,
    pub codes: Option<Mat>,
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(DATASET_META), serde_json::to_string_pretty(&ds.meta)? + "\n")?;
    save_matrix(dir.join(DICTIONARY_FILE), ds.dict.entries())?;
    save_matrix(dir.join(SAMPLES_FILE), &ds.samples)?;
    if let Some(z) = &ds.codes {
        save_matrix(dir.join(CODES_FILE), z)?;
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(DATASET_META))?)?;
    let dict = Dictionary::from_matrix(load_matrix(dir.join(DICTIONARY_FILE))?, meta.kind, meta.seed)?;
    let samples = load_matrix(dir.join(SAMPLES_FILE))?;
    let codes_path: PathBuf = dir.join(CODES_FILE);
    let codes = if codes_path.exists() { Some(load_matrix(codes_path)?) } else { None };
    if samples.nrows() != dict.signal_dim() {
        return Err(Error::DimensionMismatch(format!(
            "samples have {} rows, dictionary has {}",
            samples.nrows(),
            dict.signal_dim()
        )));
    }
    Ok(Dataset { meta, dict, samples, codes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse_matrix(""), Err(Error::Parse { .. })));
    }

    #[test]
    fn row_count_mismatch() {
        let err = parse_matrix("2,3\n1,2,3\n4,5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_matrix("2,3\n1,2,3\n").unwrap_err();
        assert!(err.to_string().contains("declares 2 rows"), "{err}");
    }

    #[test]
    fn bad_tokens() {
        assert!(parse_matrix("x,3\n").is_err());
        assert!(parse_matrix("1,2,3\n1,2\n").is_err());
        let err = parse_matrix("1,2\n1,abc\n").unwrap_err();
        assert!(err.to_string().contains("abc"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mat::from_row_slice(2, 3, &[1.0, -0.1, 1e-300, f64::MAX, 0.0, -0.0]);
        let path = dir.path().join("m.mat");
        save_matrix(&path, &m).unwrap();
        let back = load_matrix(&path).unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn text_round_trip_is_bitwise(
            rows in 1usize..5,
            cols in 1usize..5,
            vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 25),
        ) {
            let m = Mat::from_fn(rows, cols, |i, j| vals[i * 5 + j]);
            let back = parse_matrix(&format_matrix(&m)).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in m.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
