//! CSV ingestion, persistence of series, and contiguous splits.
//!
//! The on-disk layout is one row per timestep, one column per variate,
//! with an optional trailing 0/1 `label` column. Variate columns can have
//! any header name; only `label` is special.

use std::path::Path;

use crate::error::{Error, Result};
use crate::series::{Matrix, TimeSeries};

/// Reads a series from CSV. The file stem becomes the series id; a column
/// headed `label` (if present) becomes the 0/1 anomaly labels.
pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_col = headers.iter().position(|h| h == "label");
    let value_cols: Vec<usize> =
        (0..headers.len()).filter(|i| Some(*i) != label_col).collect();
    if value_cols.is_empty() {
        return Err(Error::EmptyInput("no variate columns in the CSV"));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); value_cols.len()];
    let mut labels: Vec<u8> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1; // 1-based data row for error messages
        if record.len() != headers.len() {
            return Err(Error::CsvFormat {
                row,
                msg: format!("{} fields, header has {}", record.len(), headers.len()),
            });
        }
        for (c, &col) in value_cols.iter().enumerate() {
            let raw = &record[col];
            let value: f64 = raw.trim().parse().map_err(|_| Error::CsvFormat {
                row,
                msg: format!("'{raw}' in column '{}' is not a number", &headers[col]),
            })?;
            if !value.is_finite() {
                return Err(Error::CsvFormat {
                    row,
                    msg: format!("non-finite value in column '{}'", &headers[col]),
                });
            }
            columns[c].push(value);
        }
        if let Some(col) = label_col {
            let raw = record[col].trim();
            let label: u8 = raw.parse().map_err(|_| Error::CsvFormat {
                row,
                msg: format!("label '{raw}' is not 0 or 1"),
            })?;
            if label > 1 {
                return Err(Error::CsvFormat {
                    row,
                    msg: format!("label '{raw}' is not 0 or 1"),
                });
            }
            labels.push(label);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::EmptyDataset);
    }
    let values = Matrix::from_rows(&columns)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    if label_col.is_some() {
        TimeSeries::with_labels(id, values, labels)
    } else {
        Ok(TimeSeries::new(id, values))
    }
}

/// Writes a series as CSV (`v0..v{d-1}` headers, plus `label` when labels
/// are present). Values print in the shortest form that parses back to
/// the identical float.
pub fn save_csv(path: impl AsRef<Path>, series: &TimeSeries) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let d = series.values.rows();
    let mut header: Vec<String> = (0..d).map(|v| format!("v{v}")).collect();
    if series.labels.is_some() {
        header.push("label".into());
    }
    writer.write_record(&header)?;
    for t in 0..series.values.cols() {
        let mut record: Vec<String> =
            (0..d).map(|v| format!("{}", series.values.get(v, t))).collect();
        if let Some(labels) = &series.labels {
            record.push(format!("{}", labels[t]));
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Splits a series into contiguous parts by fractions that must sum to 1.
/// Every part except the last gets `floor(fraction * len)` timesteps; the
/// last part absorbs the remainder. Parts are suffixed `#k`.
pub fn split_fractions(series: &TimeSeries, fractions: &[f64]) -> Result<Vec<TimeSeries>> {
    if fractions.is_empty() {
        return Err(Error::EmptyInput("no split fractions"));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::InvalidArgument("split fractions must lie in [0, 1]".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions sum to {sum}, expected 1"
        )));
    }
    let total = series.len();
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (k, f) in fractions.iter().enumerate() {
        let len = if k + 1 == fractions.len() {
            total - start
        } else {
            ((total as f64) * f).floor() as usize
        };
        if len == 0 {
            return Err(Error::InvalidArgument(format!(
                "split part {k} would be empty for length {total}"
            )));
        }
        let mut part = series.slice(start, len);
        part.id = format!("{}#{k}", series.id);
        parts.push(part);
        start += len;
    }
    Ok(parts)
}

/// The series' labels, or a clear error naming the series.
pub fn require_labels(series: &TimeSeries) -> Result<&Vec<u8>> {
    series
        .labels
        .as_ref()
        .ok_or_else(|| Error::MissingLabelColumn(series.id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_series() -> TimeSeries {
        let values = Matrix::from_rows(&[
            vec![0.1, 1.0e-17, -3.5, 2.0 / 3.0],
            vec![1.0, 2.0, 3.0, 4.25],
        ])
        .unwrap();
        TimeSeries::with_labels("sample", values, vec![0, 1, 1, 0]).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("sample.csv");
        let original = sample_series();
        save_csv(&path, &original).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded, original);
    }

    #[test]
    fn csv_without_labels_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("plain.csv");
        let series = TimeSeries::new("plain", Matrix::from_slice(&[1.5, -2.25, 0.0]));
        save_csv(&path, &series).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.values, series.values);
        assert!(loaded.labels.is_none());
    }

    #[test]
    fn non_numeric_cell_reports_its_row() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "v0,v1\n1.0,2.0\n3.0,oops\n").unwrap();
        match load_csv(&path) {
            Err(Error::CsvFormat { row: 2, .. }) => {}
            other => panic!("expected a row-2 format error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_cell_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.csv");
        std::fs::write(&path, "v0\n1.0\nNaN\n").unwrap();
        match load_csv(&path) {
            Err(Error::CsvFormat { row: 2, .. }) => {}
            other => panic!("expected a row-2 format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_label_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("label.csv");
        std::fs::write(&path, "v0,label\n1.0,0\n2.0,7\n").unwrap();
        match load_csv(&path) {
            Err(Error::CsvFormat { row: 2, .. }) => {}
            other => panic!("expected a row-2 format error, got {other:?}"),
        }
    }

    #[test]
    fn header_only_file_is_an_empty_dataset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "v0,v1\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::EmptyDataset)));
    }

    #[test]
    fn label_only_file_has_no_variates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        std::fs::write(&path, "label\n0\n1\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn missing_file_surfaces_an_io_error() {
        assert!(matches!(load_csv("/nonexistent/nope.csv"), Err(Error::Csv(_))));
    }

    #[test]
    fn fractional_split_is_contiguous_and_exact() {
        let series = TimeSeries::with_labels(
            "s",
            Matrix::from_slice(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]),
            vec![0, 0, 0, 1, 1, 0, 0, 0, 1, 0],
        )
        .unwrap();
        let parts = split_fractions(&series, &[0.5, 0.2, 0.3]).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0].len(), 5);
        assert_eq!(parts[1].len(), 2);
        assert_eq!(parts[2].len(), 3);
        assert_eq!(parts[0].id, "s#0");
        assert_eq!(parts[1].values.get(0, 0), 5.0);
        assert_eq!(parts[2].labels.as_ref().unwrap(), &vec![0, 1, 0]);
    }

    #[test]
    fn split_fractions_must_sum_to_one() {
        let series = TimeSeries::new("s", Matrix::from_slice(&[0.0; 10]));
        assert!(split_fractions(&series, &[0.5, 0.4]).is_err());
        assert!(split_fractions(&series, &[]).is_err());
        assert!(split_fractions(&series, &[1.2, -0.2]).is_err());
    }

    #[test]
    fn empty_split_part_is_rejected() {
        let series = TimeSeries::new("s", Matrix::from_slice(&[0.0, 1.0, 2.0]));
        assert!(split_fractions(&series, &[0.1, 0.9]).is_err());
    }

    #[test]
    fn labels_are_required_for_evaluation() {
        let series = TimeSeries::new("unlabeled", Matrix::from_slice(&[0.0]));
        match require_labels(&series) {
            Err(Error::MissingLabelColumn(id)) => assert_eq!(id, "unlabeled"),
            other => panic!("expected a missing-label error, got {other:?}"),
        }
    }
}
