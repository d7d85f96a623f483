//! Evaluation: per-utterance decode outcomes, FRR/FAR/confusion metrics,
//! confusion matrices, threshold sweeps for ROC curves, and relative gains
//! between reports.
//!
//! Each utterance is scored once with a threshold-free peak scan (the best
//! final-node average the search ever reaches); sweeps re-threshold the
//! recorded peaks without re-decoding. A streaming decoder with trigger
//! threshold θ accepts an utterance exactly when its peak is at or above θ,
//! so a sweep row equals a full evaluate run at that θ by construction.

use rayon::prelude::*;

use crate::corpus::Manifest;
use crate::decoder::{decoder_new, peak_decode, DecoderConfig};
use crate::error::{Error, Result};
use crate::graph::DecodingGraph;
use crate::lexicon::CommandSet;
use crate::model::{forward, Mode, ModelConfig, ModelParameters};

/// One utterance's decode decision.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Outcome {
    pub utt_id: String,
    /// Command id, or `None` for a negative utterance.
    pub truth: Option<usize>,
    /// Best decoded command, or `None` when nothing triggered (reject).
    pub decoded: Option<usize>,
    /// Score of the best trigger event; absent for rejects.
    pub score: Option<f64>,
    /// 1-based frame where the decision peaked; absent for rejects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_frame: Option<usize>,
}

/// Renders triggered outcomes as the event log format:
/// one `{"utt_id":..,"command_id":..,"score":..,"end_frame":..}` per line.
pub fn format_event_log(outcomes: &[Outcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        if let (Some(command), Some(score), Some(end_frame)) = (o.decoded, o.score, o.end_frame) {
            out.push_str(
                &serde_json::json!({
                    "utt_id": o.utt_id,
                    "command_id": command,
                    "score": score,
                    "end_frame": end_frame,
                })
                .to_string(),
            );
            out.push('\n');
        }
    }
    out
}

/// Decodes every record of a manifest in order, recording each utterance's
/// peak decision. The decoder config's own trigger threshold acts as the
/// reporting floor: peaks below it are recorded as rejects.
pub fn score_dataset(
    params: &ModelParameters,
    model_config: &ModelConfig,
    graph: &DecodingGraph,
    manifest: &Manifest,
    decoder_config: &DecoderConfig,
) -> Result<Vec<Outcome>> {
    decoder_config.validate()?;
    manifest
        .records
        .par_iter()
        .map(|rec| {
            let (features, _) = manifest.load_features(rec)?;
            let (out, _) = forward(params, model_config, &features, Mode::Infer, None)?;
            let mut decoder = decoder_new(graph, *decoder_config)?;
            let peak = peak_decode(&mut decoder, &out.log_post)?
                .filter(|p| p.score >= decoder_config.trigger_threshold);
            Ok(Outcome {
                utt_id: rec.utt_id.clone(),
                truth: rec.label,
                decoded: peak.map(|p| p.command),
                score: peak.map(|p| p.score),
                end_frame: peak.map(|p| p.frame),
            })
        })
        .collect()
}

/// FRR/FAR/confusion report at one operating point.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub positives: usize,
    pub negatives: usize,
    pub rejects: usize,
    pub confusions: usize,
    pub correct: usize,
    pub false_alarms: usize,
    /// (rejects + confusions) / positives; absent when positives = 0.
    pub frr: Option<f64>,
    /// false_alarms / negatives; absent when negatives = 0.
    pub far: Option<f64>,
    /// Rows: command truths then a final negatives row; columns: decoded
    /// commands then a final reject column.
    pub confusion_matrix: Vec<Vec<u64>>,
    /// Hash of the evaluated manifest, for comparing reports.
    pub manifest_hash: String,
}

fn triggered(outcome: &Outcome, threshold: f64) -> Option<usize> {
    match (outcome.decoded, outcome.score) {
        (Some(cmd), Some(score)) if score >= threshold => Some(cmd),
        _ => None,
    }
}

/// Applies `threshold` to recorded outcomes and tallies the report.
/// `command_count` sizes the confusion matrix.
pub fn compute_metrics(
    outcomes: &[Outcome],
    threshold: f64,
    command_count: usize,
    manifest_hash: &str,
) -> MetricsReport {
    let mut report = MetricsReport {
        threshold,
        positives: 0,
        negatives: 0,
        rejects: 0,
        confusions: 0,
        correct: 0,
        false_alarms: 0,
        frr: None,
        far: None,
        confusion_matrix: vec![vec![0; command_count + 1]; command_count + 1],
        manifest_hash: manifest_hash.to_string(),
    };
    for outcome in outcomes {
        let decision = triggered(outcome, threshold);
        let row = outcome.truth.unwrap_or(command_count);
        let col = decision.unwrap_or(command_count);
        report.confusion_matrix[row][col] += 1;
        match (outcome.truth, decision) {
            (Some(truth), Some(decoded)) => {
                report.positives += 1;
                if truth == decoded {
                    report.correct += 1;
                } else {
                    report.confusions += 1;
                }
            }
            (Some(_), None) => {
                report.positives += 1;
                report.rejects += 1;
            }
            (None, Some(_)) => {
                report.negatives += 1;
                report.false_alarms += 1;
            }
            (None, None) => {
                report.negatives += 1;
            }
        }
    }
    if report.positives > 0 {
        report.frr = Some((report.rejects + report.confusions) as f64 / report.positives as f64);
    }
    if report.negatives > 0 {
        report.far = Some(report.false_alarms as f64 / report.negatives as f64);
    }
    report
}

/// One point of a threshold sweep.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: Option<f64>,
    pub frr: Option<f64>,
    pub confusions: usize,
    pub false_alarms: usize,
    pub rejects: usize,
}

/// Machine-readable sweep output (also the input of report comparison).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RocReport {
    pub manifest_hash: String,
    pub command_count: usize,
    pub points: Vec<RocPoint>,
}

/// Re-thresholds recorded outcomes at each threshold of a descending
/// sequence. Along the sweep FAR is non-decreasing and FRR non-increasing.
pub fn roc_sweep(
    outcomes: &[Outcome],
    thresholds: &[f64],
    command_count: usize,
    manifest_hash: &str,
) -> Result<RocReport> {
    if thresholds.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config(
            "sweep thresholds must be strictly descending".into(),
        ));
    }
    let points = thresholds
        .iter()
        .map(|&t| {
            let m = compute_metrics(outcomes, t, command_count, manifest_hash);
            RocPoint {
                threshold: t,
                far: m.far,
                frr: m.frr,
                confusions: m.confusions,
                false_alarms: m.false_alarms,
                rejects: m.rejects,
            }
        })
        .collect();
    Ok(RocReport {
        manifest_hash: manifest_hash.to_string(),
        command_count,
        points,
    })
}

/// Evenly spaced descending thresholds over [lo, hi].
pub fn descending_thresholds(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if steps < 2 || !(lo < hi) {
        return Err(Error::Config(format!(
            "bad sweep range [{lo}, {hi}] with {steps} steps"
        )));
    }
    Ok((0..steps)
        .map(|i| hi - (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricField {
    Frr,
    Far,
    Confusions,
}

/// Relative improvement 100·(baseline − candidate)/baseline; zero baselines
/// are undefined rather than infinite.
pub fn relative_gain_value(baseline: f64, candidate: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::Invalid(
            "relative gain undefined for zero baseline".into(),
        ));
    }
    Ok(100.0 * (baseline - candidate) / baseline)
}

/// Relative improvement of a report field.
pub fn relative_gain(
    baseline: &MetricsReport,
    candidate: &MetricsReport,
    field: MetricField,
) -> Result<f64> {
    let pick = |r: &MetricsReport| -> Option<f64> {
        match field {
            MetricField::Frr => r.frr,
            MetricField::Far => r.far,
            MetricField::Confusions => Some(r.confusions as f64),
        }
    };
    let base = pick(baseline).ok_or_else(|| Error::Invalid("baseline field undefined".into()))?;
    let cand = pick(candidate).ok_or_else(|| Error::Invalid("candidate field undefined".into()))?;
    relative_gain_value(base, cand)
}

/// Renders the sweep as `threshold,far,frr,confusions` CSV.
pub fn format_roc_csv(report: &RocReport) -> String {
    let mut out = String::from("threshold,far,frr,confusions\n");
    for p in &report.points {
        let far = p.far.map_or(String::from(""), |v| format!("{v}"));
        let frr = p.frr.map_or(String::from(""), |v| format!("{v}"));
        out.push_str(&format!("{},{},{},{}\n", p.threshold, far, frr, p.confusions));
    }
    out
}

/// Renders the confusion matrix as CSV with command texts as headers; the
/// last column is REJECT and the last row NEGATIVE.
pub fn format_confusion_csv(report: &MetricsReport, command_set: &CommandSet) -> String {
    let names: Vec<String> = command_set
        .commands
        .iter()
        .map(|c| c.text_joined())
        .collect();
    let mut out = String::from("truth\\decoded");
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push_str(",REJECT\n");
    for (r, row) in report.confusion_matrix.iter().enumerate() {
        let label = if r < names.len() {
            names[r].as_str()
        } else {
            "NEGATIVE"
        };
        out.push_str(label);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
