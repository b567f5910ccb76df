//! Reconstruction-error scoring and the threshold decision rule.
//!
//! A frame's score is the root mean squared difference between the frame and
//! its reconstruction, folded over all pixels and channels and expressed in
//! 8-bit pixel units (0–255), so thresholds read like pixel errors. The band
//! is calibrated from normal-frame errors by nearest-rank percentiles and is
//! two-sided by default: anomalies can push the error *up* (content the model
//! cannot reconstruct) or *down* (washed-out frames such as dense smoke that
//! reconstruct unusually well).

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Element, Tensor};

/// Root mean squared error between a frame and its reconstruction, on the
/// 0–255 scale. The reconstruction is clamped to [0,1] first; the reference
/// is trusted (ingestion produces values in range).
pub fn frame_error<T: Element>(reference: &Tensor<T>, reconstruction: &Tensor<T>) -> Result<f64> {
    if reference.shape() != reconstruction.shape() {
        return Err(Error::shape(
            "frame_error",
            format!("frame {:?} vs reconstruction {:?}", reference.shape(), reconstruction.shape()),
        ));
    }
    if reference.len() == 0 {
        return Err(Error::EmptyInput { op: "frame_error" });
    }
    let mut sum_sq = 0.0f64;
    for (r, t) in reconstruction.data().iter().zip(reference.data()) {
        let diff = r.to_f64c().clamp(0.0, 1.0) - t.to_f64c();
        sum_sq += diff * diff;
    }
    Ok(255.0 * (sum_sq / reference.len() as f64).sqrt())
}

/// Score of one frame: its index in the sequence, its RMSE in 8-bit units,
/// and the wall time spent scoring it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub frame_index: usize,
    pub rmse: f64,
    pub latency_ms: f64,
}

/// Which side of the band triggered an anomaly verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Lower,
    Upper,
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bound::Lower => "lower",
            Bound::Upper => "upper",
        })
    }
}

/// Per-frame decision. A frame is anomalous exactly when a bound triggered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub frame_index: usize,
    pub bound: Option<Bound>,
}

impl Verdict {
    pub fn is_anomalous(&self) -> bool {
        self.bound.is_some()
    }

    pub fn label(&self) -> &'static str {
        if self.is_anomalous() {
            "anomalous"
        } else {
            "normal"
        }
    }

    pub fn bound_label(&self) -> &'static str {
        match self.bound {
            None => "none",
            Some(Bound::Lower) => "lower",
            Some(Bound::Upper) => "upper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Flag when the error leaves [lower, upper]; boundary values are normal.
    #[default]
    TwoSided,
    /// Flag when the error reaches the upper threshold (boundary anomalous).
    UpperOnly,
}

impl FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "two_sided" => Ok(CalibrationMode::TwoSided),
            "upper_only" => Ok(CalibrationMode::UpperOnly),
            other => Err(Error::parse(
                "calibration mode",
                format!("`{other}` is not `two-sided` or `upper-only`"),
            )),
        }
    }
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationMode::TwoSided => "two_sided",
            CalibrationMode::UpperOnly => "upper_only",
        })
    }
}

fn default_lower_percentile() -> f64 {
    1.0
}
fn default_upper_percentile() -> f64 {
    99.0
}

/// Which percentiles of the normal-error distribution become the band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    #[serde(default = "default_lower_percentile")]
    pub lower_percentile: f64,
    #[serde(default = "default_upper_percentile")]
    pub upper_percentile: f64,
    #[serde(default)]
    pub mode: CalibrationMode,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec {
            lower_percentile: default_lower_percentile(),
            upper_percentile: default_upper_percentile(),
            mode: CalibrationMode::TwoSided,
        }
    }
}

impl CalibrationSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("lower_percentile", self.lower_percentile), ("upper_percentile", self.upper_percentile)]
        {
            if !(0.0..=100.0).contains(&v) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} {v} is outside [0, 100]")));
            }
        }
        if self.lower_percentile >= self.upper_percentile {
            return Err(Error::InvalidConfig(format!(
                "lower_percentile {} must be below upper_percentile {}",
                self.lower_percentile, self.upper_percentile
            )));
        }
        Ok(())
    }
}

/// Calibrated decision band. Construction enforces `lower < upper`, so every
/// band in circulation is usable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdBand {
    TwoSided { lower: f64, upper: f64 },
    UpperOnly { upper: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BandDoc {
    mode: CalibrationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lower: Option<f64>,
    upper: f64,
}

impl ThresholdBand {
    pub fn two_sided(lower: f64, upper: f64) -> Result<Self> {
        if !lower.is_finite() || !upper.is_finite() {
            return Err(Error::NonFinite { context: "threshold band".into() });
        }
        if lower >= upper {
            return Err(Error::DegenerateBand { lower, upper });
        }
        Ok(ThresholdBand::TwoSided { lower, upper })
    }

    pub fn upper_only(upper: f64) -> Result<Self> {
        if !upper.is_finite() {
            return Err(Error::NonFinite { context: "threshold band".into() });
        }
        Ok(ThresholdBand::UpperOnly { upper })
    }

    pub fn lower(&self) -> Option<f64> {
        match self {
            ThresholdBand::TwoSided { lower, .. } => Some(*lower),
            ThresholdBand::UpperOnly { .. } => None,
        }
    }

    pub fn upper(&self) -> f64 {
        match self {
            ThresholdBand::TwoSided { upper, .. } | ThresholdBand::UpperOnly { upper } => *upper,
        }
    }

    pub fn mode(&self) -> CalibrationMode {
        match self {
            ThresholdBand::TwoSided { .. } => CalibrationMode::TwoSided,
            ThresholdBand::UpperOnly { .. } => CalibrationMode::UpperOnly,
        }
    }

    pub fn to_toml(&self) -> String {
        let doc = BandDoc { mode: self.mode(), lower: self.lower(), upper: self.upper() };
        toml::to_string(&doc).expect("band serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: BandDoc = toml::from_str(text)
            .map_err(|e| Error::parse("threshold band", e))?;
        match (doc.mode, doc.lower) {
            (CalibrationMode::TwoSided, Some(lower)) => ThresholdBand::two_sided(lower, doc.upper),
            (CalibrationMode::TwoSided, None) => {
                Err(Error::parse("threshold band", "two_sided band needs a lower threshold"))
            }
            (CalibrationMode::UpperOnly, None) => ThresholdBand::upper_only(doc.upper),
            (CalibrationMode::UpperOnly, Some(_)) => Err(Error::parse(
                "threshold band",
                "upper_only band must not carry a lower threshold",
            )),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Nearest-rank percentile of an ascending sort: value at rank
/// `ceil(n/100 × count)`, clamped to [1, count]. Always an element of `sorted`.
fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let count = sorted.len();
    let rank = (percentile / 100.0 * count as f64).ceil() as usize;
    sorted[rank.clamp(1, count) - 1]
}

/// Derives the threshold band from the error distribution of normal frames.
pub fn calibrate(normal_errors: &[f64], spec: &CalibrationSpec) -> Result<ThresholdBand> {
    spec.validate()?;
    if normal_errors.is_empty() {
        return Err(Error::EmptyInput { op: "calibrate" });
    }
    if normal_errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite { context: "calibration errors".into() });
    }
    let mut sorted = normal_errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let upper = nearest_rank(&sorted, spec.upper_percentile);
    match spec.mode {
        CalibrationMode::TwoSided => {
            let lower = nearest_rank(&sorted, spec.lower_percentile);
            ThresholdBand::two_sided(lower, upper)
        }
        CalibrationMode::UpperOnly => ThresholdBand::upper_only(upper),
    }
}

/// Applies the decision rule. Two-sided: anomalous iff the error is strictly
/// below the lower or strictly above the upper threshold. Upper-only:
/// anomalous iff the error is at or above the threshold.
pub fn classify(score: &FrameScore, band: &ThresholdBand) -> Verdict {
    let bound = match *band {
        ThresholdBand::TwoSided { lower, upper } => {
            if score.rmse < lower {
                Some(Bound::Lower)
            } else if score.rmse > upper {
                Some(Bound::Upper)
            } else {
                None
            }
        }
        ThresholdBand::UpperOnly { upper } => (score.rmse >= upper).then_some(Bound::Upper),
    };
    Verdict { frame_index: score.frame_index, bound }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredFrame {
    pub score: FrameScore,
    pub verdict: Verdict,
}

/// A frame that could not be read; the stream continues past it.
#[derive(Debug, Clone)]
pub struct FrameFailure {
    pub frame_index: usize,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct SequenceReport {
    pub scored: Vec<ScoredFrame>,
    pub failures: Vec<FrameFailure>,
}

/// Scores an ordered frame source against a frozen model. Results come out in
/// input order; unreadable frames become failure records rather than aborting
/// the stream. Model-level faults (e.g. an untrained model) abort.
pub fn score_sequence<I>(
    model: &Model<f32>,
    frames: I,
    band: &ThresholdBand,
) -> Result<SequenceReport>
where
    I: IntoIterator<Item = (usize, Result<Tensor<f32>>)>,
{
    let mut report = SequenceReport::default();
    for (frame_index, frame) in frames {
        let frame = match frame {
            Ok(f) => f,
            Err(e) => {
                report.failures.push(FrameFailure { frame_index, detail: e.to_string() });
                continue;
            }
        };
        // Accept a single C x H x W frame as a batch of one.
        let frame = match frame.shape() {
            &[c, h, w] => frame.reshape(vec![1, c, h, w])?,
            _ => frame,
        };
        let started = Instant::now();
        let recon = model.forward_infer(&frame)?;
        let rmse = frame_error(&frame, &recon)?;
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;
        let score = FrameScore { frame_index, rmse, latency_ms };
        let verdict = classify(&score, band);
        report.scored.push(ScoredFrame { score, verdict });
    }
    Ok(report)
}

/// Plot-ready error trace: `frame_index,rmse,verdict,bound`, one row per
/// scored frame.
pub fn write_error_trace(path: &Path, scored: &[ScoredFrame]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse("error trace", e))?;
    w.write_record(["frame_index", "rmse", "verdict", "bound"])
        .and_then(|_| {
            for s in scored {
                w.write_record([
                    s.score.frame_index.to_string(),
                    format!("{:.6}", s.score.rmse),
                    s.verdict.label().to_string(),
                    s.verdict.bound_label().to_string(),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::parse("error trace", e))
}

/// One row read back from an error trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub frame_index: usize,
    pub rmse: f64,
    pub anomalous: bool,
    pub bound: Option<Bound>,
}

/// Reads back an error trace written by [`write_error_trace`].
pub fn read_error_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::parse("error trace", e))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::parse("error trace", e))?;
        let field = |i: usize| -> Result<&str> {
            row.get(i).ok_or_else(|| {
                Error::parse("error trace", format!("row has {} fields, need 4", row.len()))
            })
        };
        let frame_index = field(0)?
            .parse::<usize>()
            .map_err(|e| Error::parse("error trace", format!("frame_index: {e}")))?;
        let rmse = field(1)?
            .parse::<f64>()
            .map_err(|e| Error::parse("error trace", format!("rmse: {e}")))?;
        let anomalous = field(2)? == "anomalous";
        let bound = match field(3)? {
            "lower" => Some(Bound::Lower),
            "upper" => Some(Bound::Upper),
            "none" => None,
            other => {
                return Err(Error::parse(
                    "error trace",
                    format!("bound `{other}` is not `lower`, `upper` or `none`"),
                ))
            }
        };
        out.push(TraceRow { frame_index, rmse, anomalous, bound });
    }
    Ok(out)
}
