//! Detection quality metrics: binary confusion counts, recall / precision /
//! F1, and per-anomaly-kind breakdowns.
//!
//! The positive class is "anomalous". Ratios with a zero denominator are
//! reported as undefined (`None`), never coerced to 0 or 100 — a detector
//! that was never shown an anomaly has no recall, good or bad. Displayed
//! percentages round half-up to one decimal place.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::corpus::{AnomalyKind, FrameLabel};
use crate::error::{Error, Result};

/// Binary confusion counts; the positive class is "anomalous".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// Tallies detector verdicts against ground truth, index-aligned.
pub fn confusion(verdicts: &[bool], truth: &[bool]) -> Result<ConfusionMatrix> {
    if verdicts.len() != truth.len() {
        return Err(Error::arg(
            "confusion",
            format!("{} verdicts vs {} truth labels", verdicts.len(), truth.len()),
        ));
    }
    let mut cm = ConfusionMatrix::default();
    for (&flagged, &anomalous) in verdicts.iter().zip(truth) {
        match (flagged, anomalous) {
            (true, true) => cm.true_pos += 1,
            (true, false) => cm.false_pos += 1,
            (false, true) => cm.false_neg += 1,
            (false, false) => cm.true_neg += 1,
        }
    }
    Ok(cm)
}

/// Recall / precision / F1 as percentages in [0, 100]. `None` marks an
/// undefined ratio (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio_pct(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(100.0 * num as f64 / den as f64)
    }
}

/// Recall = TP/(TP+FN), precision = TP/(TP+FP), F1 = 2PR/(P+R), applied
/// literally to the counts.
pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let recall = ratio_pct(cm.true_pos, cm.true_pos + cm.false_neg);
    let precision = ratio_pct(cm.true_pos, cm.true_pos + cm.false_pos);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Metrics { recall, precision, f1 }
}

/// Rounds a percentage half-up to one decimal and formats it; undefined
/// ratios print as the word "undefined".
pub fn fmt_metric(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.1}", (v * 10.0 + 0.5).floor() / 10.0),
        None => "undefined".to_string(),
    }
}

/// One report row: a category (an anomaly kind, or "overall"), how many
/// frames it covers, and its metrics.
#[derive(Debug, Clone)]
pub struct CategoryRow {
    pub category: String,
    pub frames: usize,
    pub metrics: Metrics,
}

/// Per-kind rows plus the aggregate row and the overall confusion counts.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// One row per anomaly kind present in the truth labels, in kind order.
    pub rows: Vec<CategoryRow>,
    /// Aggregate over every evaluated frame.
    pub overall: CategoryRow,
    pub confusion: ConfusionMatrix,
}

/// Builds the per-kind breakdown.
///
/// Recall for a kind is restricted to that kind's frames. Precision for a
/// kind counts its detections against false alarms on the normal frames,
/// which are shared by every row — there is no way to attribute a false
/// alarm on a normal frame to one kind.
pub fn per_category_report(verdicts: &[bool], truth: &[FrameLabel]) -> Result<MetricsReport> {
    if verdicts.len() != truth.len() {
        return Err(Error::arg(
            "per_category_report",
            format!("{} verdicts vs {} truth labels", verdicts.len(), truth.len()),
        ));
    }
    let binary: Vec<bool> = truth.iter().map(|l| l.is_anomalous()).collect();
    let overall_cm = confusion(verdicts, &binary)?;

    let kinds: BTreeSet<AnomalyKind> = truth
        .iter()
        .filter_map(|l| match l {
            FrameLabel::Anomalous(k) => Some(*k),
            FrameLabel::Normal => None,
        })
        .collect();

    let shared_false_pos = overall_cm.false_pos;
    let mut rows = Vec::new();
    for kind in kinds {
        let mut tp = 0usize;
        let mut fn_count = 0usize;
        for (&flagged, label) in verdicts.iter().zip(truth) {
            if *label == FrameLabel::Anomalous(kind) {
                if flagged {
                    tp += 1;
                } else {
                    fn_count += 1;
                }
            }
        }
        let cm = ConfusionMatrix {
            true_pos: tp,
            false_pos: shared_false_pos,
            false_neg: fn_count,
            true_neg: overall_cm.true_neg,
        };
        rows.push(CategoryRow {
            category: kind.name().to_string(),
            frames: tp + fn_count,
            metrics: metrics(&cm),
        });
    }

    let overall = CategoryRow {
        category: "overall".to_string(),
        frames: truth.len(),
        metrics: metrics(&overall_cm),
    };
    Ok(MetricsReport { rows, overall, confusion: overall_cm })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# per-kind precision counts that kind's detections against false alarms\n\
             # on the normal frames, which all rows share"
        )?;
        writeln!(
            f,
            "{:<12} {:>8} {:>10} {:>10} {:>10}",
            "category", "frames", "recall%", "precision%", "f1%"
        )?;
        for row in self.rows.iter().chain(std::iter::once(&self.overall)) {
            writeln!(
                f,
                "{:<12} {:>8} {:>10} {:>10} {:>10}",
                row.category,
                row.frames,
                fmt_metric(row.metrics.recall),
                fmt_metric(row.metrics.precision),
                fmt_metric(row.metrics.f1),
            )?;
        }
        let cm = &self.confusion;
        writeln!(
            f,
            "confusion: tp={} fp={} fn={} tn={} (n={})",
            cm.true_pos,
            cm.false_pos,
            cm.false_neg,
            cm.true_neg,
            cm.total()
        )
    }
}

/// CSV form of the report: `category,frames,recall,precision,f1`, undefined
/// ratios spelled out.
pub fn write_report_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse("metrics report", e))?;
    w.write_record(["category", "frames", "recall", "precision", "f1"])
        .and_then(|_| {
            for row in report.rows.iter().chain(std::iter::once(&report.overall)) {
                w.write_record([
                    row.category.clone(),
                    row.frames.to_string(),
                    fmt_metric(row.metrics.recall),
                    fmt_metric(row.metrics.precision),
                    fmt_metric(row.metrics.f1),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::parse("metrics report", e))
}

/// CSV form of the confusion matrix, actual class per row.
pub fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse("confusion matrix", e))?;
    w.write_record(["", "predicted_anomalous", "predicted_normal"])
        .and_then(|_| {
            w.write_record([
                "actual_anomalous".to_string(),
                cm.true_pos.to_string(),
                cm.false_neg.to_string(),
            ])?;
            w.write_record([
                "actual_normal".to_string(),
                cm.false_pos.to_string(),
                cm.true_neg.to_string(),
            ])?;
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::parse("confusion matrix", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn perfect_detector_has_no_errors() {
        let truth = vec![true, false, true, true, false];
        let cm = confusion(&truth, &truth).unwrap();
        assert_eq!(cm.false_pos, 0);
        assert_eq!(cm.false_neg, 0);
        assert_eq!(cm.true_pos, 3);
        assert_eq!(cm.true_neg, 2);
        assert_eq!(cm.total(), truth.len());
    }

    #[test]
    fn all_alarms_on_normal_truth_are_false_positives() {
        let verdicts = vec![true; 7];
        let truth = vec![false; 7];
        let cm = confusion(&verdicts, &truth).unwrap();
        assert_eq!((cm.true_pos, cm.false_neg), (0, 0));
        assert_eq!(cm.false_pos, 7);
    }

    #[test]
    fn random_thousand_frames_match_independent_tally() {
        let mut rng = RngState::new(77);
        let verdicts: Vec<bool> = (0..1000).map(|_| rng.next_u32() % 3 == 0).collect();
        let truth: Vec<bool> = (0..1000).map(|_| rng.next_u32() % 4 == 0).collect();
        let cm = confusion(&verdicts, &truth).unwrap();
        // independent oracle: count each cell with a separate filter pass
        let count = |v: bool, t: bool| {
            verdicts.iter().zip(&truth).filter(|(&a, &b)| a == v && b == t).count()
        };
        assert_eq!(cm.true_pos, count(true, true));
        assert_eq!(cm.false_pos, count(true, false));
        assert_eq!(cm.false_neg, count(false, true));
        assert_eq!(cm.true_neg, count(false, false));
        assert_eq!(cm.total(), 1000);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(confusion(&[true], &[true, false]).is_err());
        assert!(per_category_report(&[true], &[]).is_err());
    }

    #[test]
    fn published_scale_counts_round_to_known_percentages() {
        let cm = ConfusionMatrix { true_pos: 3743, false_pos: 1031, false_neg: 347, true_neg: 463 };
        let m = metrics(&cm);
        assert!((m.recall.unwrap() - 91.5).abs() < 0.05);
        assert!((m.precision.unwrap() - 78.4).abs() < 0.05);
        assert_eq!(fmt_metric(m.recall), "91.5");
        assert_eq!(fmt_metric(m.precision), "78.4");
    }

    #[test]
    fn zero_denominators_are_undefined_not_zero() {
        let no_positives = ConfusionMatrix { true_neg: 10, ..Default::default() };
        let m = metrics(&no_positives);
        assert_eq!(m.recall, None);
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        assert_eq!(fmt_metric(m.recall), "undefined");
        // zero precision and recall also leave F1 undefined (0/0)
        let all_wrong = ConfusionMatrix { false_pos: 5, false_neg: 5, ..Default::default() };
        let m = metrics(&all_wrong);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.precision, Some(0.0));
        assert_eq!(m.f1, None);
    }

    #[test]
    fn balanced_counts_give_fifty_percent_everywhere() {
        let cm = ConfusionMatrix { true_pos: 50, false_pos: 50, false_neg: 50, true_neg: 0 };
        let m = metrics(&cm);
        assert_eq!(m.recall, Some(50.0));
        assert_eq!(m.precision, Some(50.0));
        assert_eq!(m.f1, Some(50.0));
    }

    #[test]
    fn display_rounds_half_up() {
        // 1/16 = 6.25% is exact in binary, so this pins the tie-break rule
        assert_eq!(fmt_metric(Some(6.25)), "6.3");
        assert_eq!(fmt_metric(Some(6.24)), "6.2");
        assert_eq!(fmt_metric(Some(100.0)), "100.0");
        assert_eq!(fmt_metric(Some(0.04)), "0.0");
    }

    #[test]
    fn confusion_is_frame_order_invariant() {
        let mut rng = RngState::new(5);
        let mut pairs: Vec<(bool, bool)> =
            (0..300).map(|_| (rng.next_u32() % 2 == 0, rng.next_u32() % 5 == 0)).collect();
        let split = |ps: &[(bool, bool)]| {
            let v: Vec<bool> = ps.iter().map(|p| p.0).collect();
            let t: Vec<bool> = ps.iter().map(|p| p.1).collect();
            confusion(&v, &t).unwrap()
        };
        let before = split(&pairs);
        rng.shuffle(&mut pairs);
        assert_eq!(split(&pairs), before);
    }

    #[test]
    fn recall_and_precision_grow_with_true_positives() {
        for fp in [0usize, 3, 10] {
            for fn_count in [0usize, 3, 10] {
                let mut last_r = -1.0;
                let mut last_p = -1.0;
                for tp in 1..20 {
                    let cm = ConfusionMatrix {
                        true_pos: tp,
                        false_pos: fp,
                        false_neg: fn_count,
                        true_neg: 4,
                    };
                    let m = metrics(&cm);
                    let (r, p) = (m.recall.unwrap(), m.precision.unwrap());
                    assert!(r >= last_r && p >= last_p, "tp={tp} fp={fp} fn={fn_count}");
                    last_r = r;
                    last_p = p;
                }
            }
        }
    }

    #[test]
    fn smoke_only_corpus_with_perfect_detector_reports_full_recall() {
        let truth = vec![
            FrameLabel::Normal,
            FrameLabel::Anomalous(AnomalyKind::Smoke),
            FrameLabel::Anomalous(AnomalyKind::Smoke),
            FrameLabel::Normal,
        ];
        let verdicts: Vec<bool> = truth.iter().map(|l| l.is_anomalous()).collect();
        let report = per_category_report(&verdicts, &truth).unwrap();
        assert_eq!(report.rows.len(), 1, "only the kind present gets a row");
        assert_eq!(report.rows[0].category, "smoke");
        assert_eq!(report.rows[0].frames, 2);
        assert_eq!(report.rows[0].metrics.recall, Some(100.0));
        assert_eq!(report.overall.metrics.recall, Some(100.0));
    }

    #[test]
    fn per_kind_true_positives_sum_to_overall() {
        let mut rng = RngState::new(31);
        let kinds = AnomalyKind::ALL;
        let truth: Vec<FrameLabel> = (0..400)
            .map(|_| {
                if rng.next_u32() % 3 == 0 {
                    FrameLabel::Anomalous(kinds[rng.below(kinds.len())])
                } else {
                    FrameLabel::Normal
                }
            })
            .collect();
        let verdicts: Vec<bool> = (0..400).map(|_| rng.next_u32() % 2 == 0).collect();
        let report = per_category_report(&verdicts, &truth).unwrap();
        let row_tp: usize = report
            .rows
            .iter()
            .map(|row| {
                // reconstruct the row's TP from its recall and frame count
                (row.metrics.recall.unwrap() / 100.0 * row.frames as f64).round() as usize
            })
            .sum();
        assert_eq!(row_tp, report.confusion.true_pos);
        let row_frames: usize = report.rows.iter().map(|r| r.frames).sum();
        assert_eq!(row_frames, truth.iter().filter(|l| l.is_anomalous()).count());
    }

    #[test]
    fn text_report_lists_rows_and_scoping_note() {
        let truth = vec![
            FrameLabel::Anomalous(AnomalyKind::Bleed),
            FrameLabel::Normal,
            FrameLabel::Anomalous(AnomalyKind::Blur),
        ];
        let report = per_category_report(&[true, true, false], &truth).unwrap();
        let text = report.to_string();
        assert!(text.contains("false alarms"), "{text}");
        assert!(text.contains("bleed"), "{text}");
        assert!(text.contains("blur"), "{text}");
        assert!(text.contains("overall"), "{text}");
        assert!(text.contains("undefined"), "blur row has zero TP and FP... {text}");
        assert!(text.contains("confusion: tp=1 fp=1 fn=1 tn=0 (n=3)"), "{text}");
    }

    #[test]
    fn csv_outputs_have_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let truth =
            vec![FrameLabel::Anomalous(AnomalyKind::Occlusion), FrameLabel::Normal, FrameLabel::Normal];
        let report = per_category_report(&[true, false, true], &truth).unwrap();

        let report_path = dir.path().join("report.csv");
        write_report_csv(&report_path, &report).unwrap();
        let text = std::fs::read_to_string(&report_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "category,frames,recall,precision,f1");
        assert_eq!(lines[1], "occlusion,1,100.0,50.0,66.7");
        assert_eq!(lines[2], "overall,3,100.0,50.0,66.7");

        let cm_path = dir.path().join("confusion.csv");
        write_confusion_csv(&cm_path, &report.confusion).unwrap();
        let text = std::fs::read_to_string(&cm_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], ",predicted_anomalous,predicted_normal");
        assert_eq!(lines[1], "actual_anomalous,1,0");
        assert_eq!(lines[2], "actual_normal,1,1");
    }
}
