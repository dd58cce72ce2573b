//! Pose error metrics, summary statistics and the evaluation experiments.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_image::{window_image, EventImage};
use crate::event_io::{EventWindow, PoseLabel};
use crate::model::{predict, ModelParams, PosePrediction};

/// Event fractions of the robustness sweep, 10% steps up to all events.
pub const DEFAULT_FRACTIONS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Anything that maps an event image to a pose.
pub trait PosePredictor {
    fn input_size(&self) -> (usize, usize);
    fn predict_image(&self, image: &EventImage) -> Result<PosePrediction>;
}

impl PosePredictor for ModelParams {
    fn input_size(&self) -> (usize, usize) {
        (self.config.input_h, self.config.input_w)
    }

    fn predict_image(&self, image: &EventImage) -> Result<PosePrediction> {
        predict(image, self)
    }
}

/// Euclidean distance between predicted and true positions.
pub fn position_error(pred: &PosePrediction, label: &PoseLabel) -> f64 {
    pred.p_hat
        .iter()
        .zip(&label.p)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Rotation angle in degrees between the normalized predicted quaternion and
/// the label, `2 acos(|<q_hat, q>|)`. Sign-insensitive.
pub fn orientation_error(pred: &PosePrediction, label: &PoseLabel) -> Result<f64> {
    quaternion_angle_deg(&pred.q_hat, &label.q)
}

pub fn quaternion_angle_deg(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    for (name, q) in [("prediction", a), ("label", b)] {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(Error::Precondition(format!(
                "{name} quaternion has norm {n}, expected 1"
            )));
        }
    }
    // Same angle as 2 acos(|<a, b>|), taken as 2 atan2(|v|, |w|) of the
    // relative rotation conj(a) * b. acos loses half the digits near zero;
    // this form stays accurate there and gives exactly 0 for b = -a.
    let [ax, ay, az, aw] = *a;
    let [bx, by, bz, bw] = *b;
    let w = aw * bw + ax * bx + ay * by + az * bz;
    let v = [
        aw * bx - bw * ax - (ay * bz - az * by),
        aw * by - bw * ay - (az * bx - ax * bz),
        aw * bz - bw * az - (ax * by - ay * bx),
    ];
    let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    Ok((2.0 * s.atan2(w.abs())).to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub median: f64,
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
    pub max: f64,
    pub n: usize,
}

impl ErrorSummary {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Quantile with linear interpolation between closest ranks (`h = (n-1) p`)
/// on sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(errors: &[f64]) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("no errors to summarize"));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::Numeric("NaN error value".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ErrorSummary {
        median: quantile_sorted(&sorted, 0.5),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        q1: quantile_sorted(&sorted, 0.25),
        q3: quantile_sorted(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        n: sorted.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub sequence_index: usize,
    /// Meters.
    pub position: f64,
    /// Degrees.
    pub orientation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub position: ErrorSummary,
    pub orientation: ErrorSummary,
    pub per_sample: Vec<SampleError>,
}

impl EvalReport {
    pub fn from_samples(per_sample: Vec<SampleError>) -> Result<Self> {
        let pos: Vec<f64> = per_sample.iter().map(|s| s.position).collect();
        let ori: Vec<f64> = per_sample.iter().map(|s| s.orientation).collect();
        Ok(EvalReport {
            position: summarize(&pos)?,
            orientation: summarize(&ori)?,
            per_sample,
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "sequence_index,position_error_m,orientation_error_deg")?;
        for s in &self.per_sample {
            writeln!(out, "{},{},{}", s.sequence_index, s.position, s.orientation)?;
        }
        Ok(())
    }

    /// JSON summary without the per-sample rows.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n": self.per_sample.len(),
            "position_m": self.position,
            "orientation_deg": self.orientation,
        })
    }
}

fn evaluate_at<P: PosePredictor + ?Sized>(model: &P, windows: &[EventWindow], fraction: f64) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("no test windows"));
    }
    let (h, w) = model.input_size();
    let per_sample = windows
        .iter()
        .map(|win| {
            let image = window_image(win, fraction, h, w)?;
            let pred = model.predict_image(&image)?;
            Ok(SampleError {
                sequence_index: win.sequence_index,
                position: position_error(&pred, &win.label),
                orientation: orientation_error(&pred, &win.label)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(per_sample)
}

/// Predicts every window from its full event image and summarizes errors.
pub fn evaluate<P: PosePredictor + ?Sized>(model: &P, windows: &[EventWindow]) -> Result<EvalReport> {
    evaluate_at(model, windows, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub fraction: f64,
    pub position_median: f64,
    pub orientation_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "fraction,position_median_m,orientation_median_deg")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.fraction, r.position_median, r.orientation_median)?;
        }
        Ok(())
    }
}

/// Re-evaluates with only the most recent fraction of each window's events.
/// Fractions must be strictly increasing and end at 1.0.
pub fn robustness_experiment<P: PosePredictor + ?Sized>(
    model: &P,
    windows: &[EventWindow],
    fractions: &[f64],
) -> Result<RobustnessTable> {
    if fractions.is_empty() {
        return Err(Error::EmptyInput("no fractions"));
    }
    if fractions.windows(2).any(|w| !(w[0] < w[1])) || fractions[fractions.len() - 1] != 1.0 {
        return Err(Error::Precondition(format!(
            "fractions must increase strictly and end at 1.0, got {fractions:?}"
        )));
    }
    let rows = fractions
        .iter()
        .map(|&f| {
            let rep = evaluate_at(model, windows, f)?;
            Ok(RobustnessRow {
                fraction: f,
                position_median: rep.position.median,
                orientation_median: rep.orientation.median,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessTable { rows })
}

/// Mean over per-sequence medians, the aggregation behind an "average" row
/// of a multi-sequence results table. Returns (position, orientation).
pub fn average_of_medians(per_sequence: &[EvalReport]) -> Result<(f64, f64)> {
    let pos: Vec<f64> = per_sequence.iter().map(|r| r.position.median).collect();
    let ori: Vec<f64> = per_sequence.iter().map(|r| r.orientation.median).collect();
    Ok((summarize(&pos)?.mean, summarize(&ori)?.mean))
}
