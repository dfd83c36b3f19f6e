//! Command-line front end: train models, score series, refine anomaly
//! boundaries, evaluate against ground truth, generate synthetic data and
//! assemble plot-friendly tables.
//!
//! Every command prints a small JSON summary to stdout on success. On
//! failure a machine-readable `{"error": ..., "kind": ...}` object goes to
//! stderr and the exit code is nonzero.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use maskad::dataset::{load_csv, require_labels, save_csv};
use maskad::detection::{
    detect_by_residuals, detect_points, detect_sequences, intervals_from_flags, peak_scores,
    DetectionConfig, SequenceScoring,
};
use maskad::error::Error;
use maskad::imputer::HeadKind;
use maskad::masking::make_sequence_masks;
use maskad::metrics::{auprc, auroc, interval_prf, point_adjust, point_prf};
use maskad::persist::{
    load_checkpoint, load_intervals_csv, load_point_scores_csv, save_checkpoint,
    write_intervals_csv, write_metrics_json, write_point_scores_csv, write_window_scores_csv,
    Checkpoint, EvalSummary, CHECKPOINT_VERSION,
};
use maskad::scoring::{
    calibrate_point_threshold, calibrate_residual_threshold, calibrate_sequence_threshold,
};
use maskad::series::AnomalyInterval;
use maskad::synth::{generate, SyntheticSpec};
use maskad::training::{train, TrainConfig};
use maskad::Result;

#[derive(Parser)]
#[command(
    name = "maskad",
    version,
    about = "Multivariate time-series anomaly detection via masked self-imputation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Single-timestep outliers (reconstruction model).
    Point,
    /// Contiguous anomalous stretches (bidirectional forecast model).
    Sequence,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ScoringArg {
    /// Re-impute whole windows segment by segment, compare by DTW.
    Assembly,
    /// Re-impute only the trailing stripe of each window.
    Stripe,
    /// Per-timestep residuals of the full re-imputation, no warping.
    Residual,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on one or more clean series and calibrate thresholds
    Train {
        /// Training configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Input series (CSV, one per file).
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Checkpoint destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a series against a trained model and flag anomalies
    Detect {
        /// Checkpoint from `train`.
        #[arg(long)]
        model: PathBuf,
        /// Series to score (CSV).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Write per-timestep or per-window scores here (CSV).
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Write detected intervals here (CSV).
        #[arg(long)]
        intervals: Option<PathBuf>,
        /// Override the calibrated threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Override the calibrated scan stride (sequence mode).
        #[arg(long)]
        stride: Option<usize>,
        /// Skip boundary refinement: flag whole windows (sequence mode).
        #[arg(long)]
        no_localize: bool,
        /// Window scoring strategy (sequence mode).
        #[arg(long, value_enum, default_value_t = ScoringArg::Assembly)]
        scoring: ScoringArg,
    },
    /// Detect sequence anomalies and refine their start/end boundaries
    Localize {
        /// Checkpoint from `train`.
        #[arg(long)]
        model: PathBuf,
        /// Series to score (CSV).
        #[arg(long)]
        input: PathBuf,
        /// Write the refined intervals here (CSV).
        #[arg(long)]
        intervals: Option<PathBuf>,
        /// Override the calibrated threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Override the calibrated scan stride.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Compare predictions with ground-truth labels
    Eval {
        /// Per-timestep scores CSV produced by `detect`.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Intervals CSV produced by `detect`/`localize`.
        #[arg(long)]
        pred_intervals: Option<PathBuf>,
        /// Labeled series CSV with the ground truth.
        #[arg(long)]
        truth: PathBuf,
        /// Also report segment-adjusted precision/recall/F1.
        #[arg(long)]
        point_adjust: bool,
        /// Write the full metrics report here (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labeled synthetic series
    Synth {
        /// Generator specification (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Series destination (CSV, labels included).
        #[arg(long)]
        out: PathBuf,
        /// Also write the planted intervals here (CSV).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Merge a series, its scores and intervals into one tidy table
    Plotdata {
        /// The series that was scored (CSV).
        #[arg(long)]
        input: PathBuf,
        /// Scores CSV from `detect` (per-timestep or per-window).
        #[arg(long)]
        scores: PathBuf,
        /// Intervals CSV from `detect`/`localize`.
        #[arg(long)]
        intervals: Option<PathBuf>,
        /// Merged table destination (CSV).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = serde_json::json!({ "error": e.to_string(), "kind": error_kind(&e) });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::EmptyInput(_) => "empty_input",
        Error::DimensionMismatch(_) => "dimension_mismatch",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::MaskCountExceedsElements { .. } => "mask_count_exceeds_elements",
        Error::LengthNotDivisible { .. } => "length_not_divisible",
        Error::HeadMismatch { .. } => "head_mismatch",
        Error::NoContext => "no_context",
        Error::NotScalar { .. } => "not_scalar",
        Error::Divergence { .. } => "divergence",
        Error::DegenerateLabels => "degenerate_labels",
        Error::EmptyDataset => "empty_dataset",
        Error::MissingLabelColumn(_) => "missing_label_column",
        Error::CsvFormat { .. } => "csv_format",
        Error::VersionMismatch { .. } => "version_mismatch",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn require_head(ckpt: &Checkpoint, expected: HeadKind) -> Result<()> {
    if ckpt.model.head_kind() != expected {
        return Err(Error::HeadMismatch {
            expected: expected.to_string(),
            found: ckpt.model.head_kind().to_string(),
        });
    }
    Ok(())
}

fn interval_json(ivs: &[AnomalyInterval]) -> serde_json::Value {
    serde_json::json!(ivs
        .iter()
        .map(|iv| serde_json::json!({ "start": iv.start, "end": iv.end }))
        .collect::<Vec<_>>())
}

fn run(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Detect {
            model,
            input,
            mode,
            scores,
            intervals,
            threshold,
            stride,
            no_localize,
            scoring,
        } => cmd_detect(
            &model, &input, mode, scores.as_deref(), intervals.as_deref(), threshold, stride,
            no_localize, scoring,
        ),
        Command::Localize { model, input, intervals, threshold, stride } => cmd_detect(
            &model,
            &input,
            Mode::Sequence,
            None,
            intervals.as_deref(),
            threshold,
            stride,
            false,
            ScoringArg::Assembly,
        ),
        Command::Eval { pred, pred_intervals, truth, point_adjust, out } => {
            cmd_eval(pred.as_deref(), pred_intervals.as_deref(), &truth, point_adjust, out.as_deref())
        }
        Command::Synth { spec, out, truth } => cmd_synth(&spec, &out, truth.as_deref()),
        Command::Plotdata { input, scores, intervals, out } => {
            cmd_plotdata(&input, &scores, intervals.as_deref(), &out)
        }
    }
}

fn cmd_train(config: &Path, data: &[PathBuf], out: &Path) -> Result<serde_json::Value> {
    let cfg: TrainConfig = read_json(config)?;
    let series: Vec<_> = data.iter().map(load_csv).collect::<Result<_>>()?;
    let outcome = train(&series, &cfg)?;
    let stride = (cfg.window / cfg.seq_masks).max(1);
    let (threshold, residual_threshold) = match cfg.head {
        HeadKind::Reconstruction => {
            (calibrate_point_threshold(&outcome.model, &outcome.validation)?, None)
        }
        HeadKind::BidirectionalForecast => {
            let masks = make_sequence_masks(cfg.window, cfg.seq_masks)?;
            let thr =
                calibrate_sequence_threshold(&outcome.model, &outcome.validation, &masks, stride)?;
            let res = calibrate_residual_threshold(&outcome.model, &outcome.validation, &masks)?;
            (thr, Some(res))
        }
    };
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: outcome.model,
        threshold,
        residual_threshold,
        stride,
        segments: cfg.seq_masks,
        history: outcome.history.clone(),
    };
    save_checkpoint(out, &ckpt)?;
    let last = outcome.history.last().expect("at least one epoch");
    Ok(serde_json::json!({
        "checkpoint": out.display().to_string(),
        "best_epoch": outcome.best_epoch,
        "threshold": threshold,
        "residual_threshold": residual_threshold,
        "final_train_loss": last.train_loss,
        "final_val_loss": last.val_loss,
    }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_detect(
    model_path: &Path,
    input: &Path,
    mode: Mode,
    scores_path: Option<&Path>,
    intervals_path: Option<&Path>,
    threshold: Option<f64>,
    stride: Option<usize>,
    no_localize: bool,
    scoring: ScoringArg,
) -> Result<serde_json::Value> {
    let ckpt = load_checkpoint(model_path)?;
    let series = load_csv(input)?;
    match mode {
        Mode::Point => {
            require_head(&ckpt, HeadKind::Reconstruction)?;
            let thr = threshold.unwrap_or(ckpt.threshold);
            let det = detect_points(&ckpt.model, &series.values, thr)?;
            if let Some(p) = scores_path {
                write_point_scores_csv(p, &det)?;
            }
            if let Some(p) = intervals_path {
                let peaks = point_interval_peaks(&det.scores, &det.intervals);
                write_intervals_csv(p, &series.id, &det.intervals, &peaks)?;
            }
            Ok(serde_json::json!({
                "mode": "point",
                "threshold": thr,
                "flagged_timesteps": det.flags().iter().filter(|&&f| f != 0).count(),
                "intervals": interval_json(&det.intervals),
            }))
        }
        Mode::Sequence => {
            require_head(&ckpt, HeadKind::BidirectionalForecast)?;
            if scoring == ScoringArg::Residual {
                let thr = match (threshold, ckpt.residual_threshold) {
                    (Some(t), _) => t,
                    (None, Some(t)) => t,
                    (None, None) => {
                        return Err(Error::InvalidArgument(
                            "checkpoint has no residual threshold; pass --threshold".into(),
                        ))
                    }
                };
                let det = detect_by_residuals(&ckpt.model, &series.values, thr, ckpt.segments)?;
                if let Some(p) = scores_path {
                    write_point_scores_csv(p, &det)?;
                }
                if let Some(p) = intervals_path {
                    let peaks = point_interval_peaks(&det.scores, &det.intervals);
                    write_intervals_csv(p, &series.id, &det.intervals, &peaks)?;
                }
                return Ok(serde_json::json!({
                    "mode": "sequence-residual",
                    "threshold": thr,
                    "intervals": interval_json(&det.intervals),
                }));
            }
            let mut cfg = DetectionConfig::new(
                ckpt.model.meta.window,
                stride.unwrap_or(ckpt.stride),
                threshold.unwrap_or(ckpt.threshold),
            );
            cfg.localize = !no_localize;
            cfg.segments = ckpt.segments;
            cfg.scoring = match scoring {
                ScoringArg::Assembly => SequenceScoring::FullAssembly,
                ScoringArg::Stripe => SequenceScoring::TrailingStripe,
                ScoringArg::Residual => unreachable!("handled above"),
            };
            let det = detect_sequences(&ckpt.model, &series.values, &cfg)?;
            if let Some(p) = scores_path {
                write_window_scores_csv(p, &det)?;
            }
            if let Some(p) = intervals_path {
                let peaks = peak_scores(&det.intervals, &det.window_scores, det.threshold);
                write_intervals_csv(p, &series.id, &det.intervals, &peaks)?;
            }
            Ok(serde_json::json!({
                "mode": "sequence",
                "threshold": cfg.threshold,
                "stride": cfg.stride,
                "localized": cfg.localize,
                "intervals": interval_json(&det.intervals),
            }))
        }
    }
}

fn point_interval_peaks(scores: &[f64], intervals: &[AnomalyInterval]) -> Vec<f64> {
    intervals
        .iter()
        .map(|iv| scores[iv.start..=iv.end].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn cmd_eval(
    pred: Option<&Path>,
    pred_intervals: Option<&Path>,
    truth_path: &Path,
    adjust: bool,
    out: Option<&Path>,
) -> Result<serde_json::Value> {
    let truth_series = load_csv(truth_path)?;
    let labels = require_labels(&truth_series)?.clone();
    let summary = match (pred, pred_intervals) {
        (Some(scores_path), None) => {
            let rows = load_point_scores_csv(scores_path)?;
            if rows.len() != labels.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} scored timesteps vs {} labels",
                    rows.len(),
                    labels.len()
                )));
            }
            let flags: Vec<u8> = rows.iter().map(|r| r.flag).collect();
            let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
            let point = point_prf(&flags, &labels)?;
            let adjusted = if adjust {
                Some(point_prf(&point_adjust(&flags, &labels)?, &labels)?)
            } else {
                None
            };
            // ranking metrics are undefined on one-class truth; skip then
            let auroc_v = match auroc(&scores, &labels) {
                Ok(v) => Some(v),
                Err(Error::DegenerateLabels) => None,
                Err(e) => return Err(e),
            };
            let auprc_v = match auprc(&scores, &labels) {
                Ok(v) => Some(v),
                Err(Error::DegenerateLabels) => None,
                Err(e) => return Err(e),
            };
            EvalSummary { point, adjusted, intervals: None, auroc: auroc_v, auprc: auprc_v }
        }
        (None, Some(iv_path)) => {
            let rows = load_intervals_csv(iv_path)?;
            let pred_ivs: Vec<AnomalyInterval> = rows.iter().map(|r| r.1).collect();
            let mut flags = vec![0u8; labels.len()];
            for iv in &pred_ivs {
                if iv.start >= labels.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "predicted interval [{}, {}] lies outside the {}-step truth",
                        iv.start,
                        iv.end,
                        labels.len()
                    )));
                }
                for f in flags[iv.start..=iv.end.min(labels.len() - 1)].iter_mut() {
                    *f = 1;
                }
            }
            let truth_ivs = intervals_from_flags(&labels);
            let point = point_prf(&flags, &labels)?;
            let adjusted = if adjust {
                Some(point_prf(&point_adjust(&flags, &labels)?, &labels)?)
            } else {
                None
            };
            EvalSummary {
                point,
                adjusted,
                intervals: Some(interval_prf(&pred_ivs, &truth_ivs)),
                auroc: None,
                auprc: None,
            }
        }
        _ => {
            return Err(Error::InvalidArgument(
                "pass exactly one of --pred or --pred-intervals".into(),
            ))
        }
    };
    if let Some(p) = out {
        write_metrics_json(p, &summary)?;
    }
    Ok(serde_json::to_value(&summary)?)
}

fn cmd_synth(spec_path: &Path, out: &Path, truth: Option<&Path>) -> Result<serde_json::Value> {
    let spec: SyntheticSpec = read_json(spec_path)?;
    let generated = generate(&spec)?;
    save_csv(out, &generated.series)?;
    if let Some(p) = truth {
        let peaks = vec![0.0; generated.intervals.len()];
        write_intervals_csv(p, &generated.series.id, &generated.intervals, &peaks)?;
    }
    Ok(serde_json::json!({
        "series": out.display().to_string(),
        "length": generated.series.len(),
        "variates": generated.series.values.rows(),
        "sequence_anomalies": generated.intervals.len(),
        "point_anomalies": generated.points.len(),
    }))
}

fn cmd_plotdata(
    input: &Path,
    scores_path: &Path,
    intervals: Option<&Path>,
    out: &Path,
) -> Result<serde_json::Value> {
    let series = load_csv(input)?;
    let t_len = series.len();
    let d = series.values.rows();

    // per-timestep score/threshold/flag lanes, filled according to the
    // scores file flavor (timestep rows or window rows)
    let mut score: Vec<Option<f64>> = vec![None; t_len];
    let mut thr: Vec<Option<f64>> = vec![None; t_len];
    let mut flag: Vec<Option<u8>> = vec![None; t_len];
    let mut reader = csv::Reader::from_path(scores_path)?;
    let headers = reader.headers()?.clone();
    let first = headers.get(0).unwrap_or("");
    match first {
        "t" => {
            drop(reader);
            for row in load_point_scores_csv(scores_path)? {
                if row.t < t_len {
                    score[row.t] = Some(row.score);
                    thr[row.t] = Some(row.threshold);
                    flag[row.t] = Some(row.flag);
                }
            }
        }
        "window_start" => {
            // window scores land on their final timestep
            for (r, record) in reader.records().enumerate() {
                let record = record?;
                let row = r + 1;
                let parse = |raw: &str| -> Result<f64> {
                    raw.trim().parse().map_err(|_| Error::CsvFormat {
                        row,
                        msg: format!("'{raw}' is not a number"),
                    })
                };
                let end = parse(&record[1])? as usize;
                if end < t_len {
                    score[end] = Some(parse(&record[2])?);
                    thr[end] = Some(parse(&record[3])?);
                    flag[end] = Some(u8::from(parse(&record[4])? != 0.0));
                }
            }
        }
        other => {
            return Err(Error::CsvFormat {
                row: 0,
                msg: format!("unrecognized scores header starting with '{other}'"),
            })
        }
    }

    let mut in_interval = vec![0u8; t_len];
    if let Some(p) = intervals {
        for (_, iv, _) in load_intervals_csv(p)? {
            for v in in_interval[iv.start.min(t_len)..=(iv.end.min(t_len - 1))].iter_mut() {
                *v = 1;
            }
        }
    }

    let mut w = csv::Writer::from_path(out)?;
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..d).map(|v| format!("v{v}")));
    if series.labels.is_some() {
        header.push("label".into());
    }
    header.extend(["score", "threshold", "flag", "interval"].map(String::from));
    w.write_record(&header)?;
    let fmt_opt = |o: Option<f64>| o.map(|v| format!("{v}")).unwrap_or_default();
    for t in 0..t_len {
        let mut record: Vec<String> = vec![t.to_string()];
        record.extend((0..d).map(|v| format!("{}", series.values.get(v, t))));
        if let Some(labels) = &series.labels {
            record.push(labels[t].to_string());
        }
        record.push(fmt_opt(score[t]));
        record.push(fmt_opt(thr[t]));
        record.push(flag[t].map(|f| f.to_string()).unwrap_or_default());
        record.push(in_interval[t].to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(serde_json::json!({
        "table": out.display().to_string(),
        "rows": t_len,
    }))
}
