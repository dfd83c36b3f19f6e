//! Checkpoints and result artifacts.
//!
//! A checkpoint is one JSON document holding the model parameters, the
//! normalization statistics, the calibrated thresholds and the training
//! history. Floats survive the round trip bit-exactly, so a reloaded
//! model reproduces its outputs to the last ulp. The format carries a
//! version number that is checked before anything else is parsed.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{PointDetection, SequenceDetection};
use crate::error::{Error, Result};
use crate::imputer::ImputerModel;
use crate::metrics::PrfReport;
use crate::series::AnomalyInterval;
use crate::training::EpochStats;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume detection after a restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ImputerModel,
    /// Calibrated anomaly threshold: per-timestep score for point models,
    /// window score for sequence models.
    pub threshold: f64,
    /// Residual-based threshold for sequence models (plain per-timestep
    /// scoring without warping).
    pub residual_threshold: Option<f64>,
    /// Scan stride the model was calibrated for.
    pub stride: usize,
    /// Segment count of the full-window re-imputation.
    pub segments: usize,
    pub history: Vec<EpochStats>,
}

impl Checkpoint {
    pub fn new(model: ImputerModel, threshold: f64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model,
            threshold,
            residual_threshold: None,
            stride: 8,
            segments: 8,
            history: Vec::new(),
        }
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path.as_ref())?;
    serde_json::to_writer(BufWriter::new(file), ckpt)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let file = File::open(path.as_ref())?;
    let value: serde_json::Value = serde_json::from_reader(BufReader::new(file))?;
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::InvalidArgument("file is not a checkpoint: no version field".into()))?
        as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found, expected: CHECKPOINT_VERSION });
    }
    Ok(serde_json::from_value(value)?)
}

/// `t,score,threshold,flag` rows, one per timestep.
pub fn write_point_scores_csv(path: impl AsRef<Path>, det: &PointDetection) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["t", "score", "threshold", "flag"])?;
    for (t, s) in det.scores.iter().enumerate() {
        w.write_record([
            t.to_string(),
            format!("{s}"),
            format!("{}", det.threshold),
            u8::from(*s > det.threshold).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `window_start,window_end,score,threshold,flag` rows, one per scan
/// position.
pub fn write_window_scores_csv(
    path: impl AsRef<Path>,
    det: &SequenceDetection,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["window_start", "window_end", "score", "threshold", "flag"])?;
    for ws in &det.window_scores {
        w.write_record([
            ws.start.to_string(),
            ws.end.to_string(),
            format!("{}", ws.score),
            format!("{}", det.threshold),
            u8::from(ws.flagged).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `series_id,start,end,peak_score` rows, one per detected interval.
pub fn write_intervals_csv(
    path: impl AsRef<Path>,
    series_id: &str,
    intervals: &[AnomalyInterval],
    peaks: &[f64],
) -> Result<()> {
    if intervals.len() != peaks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} intervals vs {} peak scores",
            intervals.len(),
            peaks.len()
        )));
    }
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["series_id", "start", "end", "peak_score"])?;
    for (iv, peak) in intervals.iter().zip(peaks) {
        w.write_record([
            series_id.to_string(),
            iv.start.to_string(),
            iv.end.to_string(),
            format!("{peak}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a per-timestep scores file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub t: usize,
    pub score: f64,
    pub threshold: f64,
    pub flag: u8,
}

/// Reads back a `t,score,threshold,flag` file.
pub fn load_point_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or(Error::CsvFormat {
                row,
                msg: format!("expected 4 fields, found {}", record.len()),
            })
        };
        let parse_num = |raw: &str| -> Result<f64> {
            raw.trim().parse().map_err(|_| Error::CsvFormat {
                row,
                msg: format!("'{raw}' is not a number"),
            })
        };
        rows.push(ScoreRow {
            t: parse_num(field(0)?)? as usize,
            score: parse_num(field(1)?)?,
            threshold: parse_num(field(2)?)?,
            flag: u8::from(parse_num(field(3)?)? != 0.0),
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(rows)
}

/// Reads back a `series_id,start,end,peak_score` file.
pub fn load_intervals_csv(
    path: impl AsRef<Path>,
) -> Result<Vec<(String, AnomalyInterval, f64)>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() < 4 {
            return Err(Error::CsvFormat {
                row,
                msg: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let parse_usize = |raw: &str| -> Result<usize> {
            raw.trim().parse().map_err(|_| Error::CsvFormat {
                row,
                msg: format!("'{raw}' is not an index"),
            })
        };
        let start = parse_usize(&record[1])?;
        let end = parse_usize(&record[2])?;
        let peak: f64 = record[3].trim().parse().map_err(|_| Error::CsvFormat {
            row,
            msg: format!("'{}' is not a number", &record[3]),
        })?;
        out.push((record[0].to_string(), AnomalyInterval::new(start, end)?, peak));
    }
    Ok(out)
}

/// Evaluation results in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Timestep-level precision/recall/F1.
    pub point: PrfReport,
    /// Timestep-level scores after segment adjustment, when requested.
    pub adjusted: Option<PrfReport>,
    /// Interval-level precision/recall/F1, when intervals were compared.
    pub intervals: Option<PrfReport>,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

pub fn write_metrics_json(path: impl AsRef<Path>, summary: &EvalSummary) -> Result<()> {
    let file = File::create(path.as_ref())?;
    serde_json::to_writer_pretty(BufWriter::new(file), summary)?;
    Ok(())
}

pub fn load_metrics_json(path: impl AsRef<Path>) -> Result<EvalSummary> {
    let file = File::open(path.as_ref())?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::WindowScore;
    use crate::imputer::HeadKind;
    use crate::metrics::ConfusionCounts;
    use tempfile::tempdir;

    fn checkpoint() -> Checkpoint {
        let model =
            ImputerModel::random(2, 16, 2, 3, 2, HeadKind::BidirectionalForecast, 9).unwrap();
        let mut c = Checkpoint::new(model, 1.25);
        c.residual_threshold = Some(0.75);
        c.stride = 4;
        c.segments = 4;
        c.history = vec![EpochStats { epoch: 0, train_loss: 0.5, val_loss: 0.4 }];
        c
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        let ckpt = checkpoint();
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        // serialize the reloaded checkpoint again: identical bytes
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("old.json");
        save_checkpoint(&path, &checkpoint()).unwrap();
        let mut value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        value["version"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        match load_checkpoint(&path) {
            Err(Error::VersionMismatch { found: 99, expected: 1 }) => {}
            other => panic!("expected a version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_checkpoint_fails_to_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cut.json");
        save_checkpoint(&path, &checkpoint()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn non_checkpoint_json_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("other.json");
        std::fs::write(&path, "{\"hello\": 1}").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn point_scores_csv_has_the_documented_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let det = PointDetection {
            scores: vec![0.5, 2.5],
            threshold: 1.0,
            intervals: vec![AnomalyInterval::new(1, 1).unwrap()],
        };
        write_point_scores_csv(&path, &det).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "t,score,threshold,flag\n0,0.5,1,0\n1,2.5,1,1\n");
    }

    #[test]
    fn window_scores_csv_has_the_documented_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("windows.csv");
        let det = SequenceDetection {
            window_scores: vec![
                WindowScore { start: 0, end: 15, score: 0.25, flagged: false },
                WindowScore { start: 8, end: 23, score: 4.5, flagged: true },
            ],
            threshold: 2.0,
            intervals: vec![],
            traces: vec![],
            len: 24,
        };
        write_window_scores_csv(&path, &det).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "window_start,window_end,score,threshold,flag\n0,15,0.25,2,0\n8,23,4.5,2,1\n"
        );
    }

    #[test]
    fn intervals_csv_has_the_documented_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("intervals.csv");
        let ivs = vec![AnomalyInterval::new(10, 20).unwrap()];
        write_intervals_csv(&path, "series-1", &ivs, &[3.5]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "series_id,start,end,peak_score\nseries-1,10,20,3.5\n");
    }

    #[test]
    fn score_rows_read_back_what_was_written() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let det = PointDetection {
            scores: vec![0.5, 2.5, 1.0],
            threshold: 1.0,
            intervals: vec![],
        };
        write_point_scores_csv(&path, &det).unwrap();
        let rows = load_point_scores_csv(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1], ScoreRow { t: 1, score: 2.5, threshold: 1.0, flag: 1 });
        assert_eq!(rows[2].flag, 0); // equality with the threshold is clean
    }

    #[test]
    fn interval_rows_read_back_what_was_written() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("iv.csv");
        let ivs =
            vec![AnomalyInterval::new(3, 9).unwrap(), AnomalyInterval::new(20, 21).unwrap()];
        write_intervals_csv(&path, "abc", &ivs, &[1.5, 2.5]).unwrap();
        let rows = load_intervals_csv(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, "abc");
        assert_eq!(rows[0].1, ivs[0]);
        assert_eq!(rows[1].2, 2.5);
    }

    #[test]
    fn metrics_json_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        let summary = EvalSummary {
            point: PrfReport {
                precision: 0.75,
                recall: 0.5,
                f1: 0.6,
                counts: ConfusionCounts { tp: 3, fp: 1, fn_: 3, tn: 10 },
            },
            adjusted: None,
            intervals: None,
            auroc: Some(0.9),
            auprc: Some(0.8),
        };
        write_metrics_json(&path, &summary).unwrap();
        assert_eq!(load_metrics_json(&path).unwrap(), summary);
    }
}
