//! Evaluation protocol: angular error binned by face width or by the angle of
//! the ground-truth gaze, and the running-time cost model of one-stage versus
//! per-face pipelines.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angular_error, GazeVector};

/// Angle between a gaze and the camera-facing direction, degrees.
pub fn angle_from_frontal(g: &GazeVector) -> f64 {
    angular_error(g, &GazeVector::FRONTAL)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceEvalRecord {
    face_width: f64,
    gt: GazeVector,
    pred: GazeVector,
}

impl FaceEvalRecord {
    pub fn new(face_width: f64, gt: GazeVector, pred: GazeVector) -> Result<Self> {
        if !(face_width.is_finite() && face_width > 0.0) {
            return Err(Error::invalid(format!("face width must be > 0, got {face_width}")));
        }
        Ok(Self { face_width, gt, pred })
    }

    pub fn face_width(&self) -> f64 {
        self.face_width
    }

    pub fn gt(&self) -> &GazeVector {
        &self.gt
    }

    pub fn pred(&self) -> &GazeVector {
        &self.pred
    }

    pub fn error_deg(&self) -> f64 {
        angular_error(&self.gt, &self.pred)
    }

    pub fn gt_angle_from_frontal(&self) -> f64 {
        angle_from_frontal(&self.gt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinAxis {
    /// Face width in pixels.
    Width,
    /// Angle of the ground-truth gaze from frontal, degrees.
    Angle,
}

impl std::str::FromStr for BinAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "width" => Ok(BinAxis::Width),
            "angle" => Ok(BinAxis::Angle),
            _ => Err(Error::invalid(format!("unknown bin axis '{s}' (width|angle)"))),
        }
    }
}

/// Half-open bins `[edges[i], edges[i+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSpec {
    edges: Vec<f64>,
    labels: Vec<String>,
}

/// Where a value falls relative to a [`BinSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinSlot {
    Below,
    Bin(usize),
    Above,
}

impl BinSpec {
    pub fn new(edges: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if edges.len() < 2 || labels.len() + 1 != edges.len() {
            return Err(Error::invalid(format!(
                "{} edges need {} labels, got {}",
                edges.len(),
                edges.len().saturating_sub(1),
                labels.len()
            )));
        }
        if edges.iter().any(|e| e.is_nan()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bin edges must be strictly increasing"));
        }
        Ok(Self { edges, labels })
    }

    /// Face-width bins: 30-60, 60-90, ..., 210-240, >240 pixels.
    pub fn face_width() -> Self {
        let mut edges: Vec<f64> = (1..=8).map(|k| 30.0 * k as f64).collect();
        edges.push(f64::INFINITY);
        let mut labels: Vec<String> = edges.windows(2).take(7).map(|w| format!("{}-{}", w[0], w[1])).collect();
        labels.push(">240".into());
        Self::new(edges, labels).expect("static spec")
    }

    /// Gaze-angle bins: 0-20, 20-30, ..., 80-90 degrees.
    pub fn gaze_angle() -> Self {
        let mut edges = vec![0.0];
        edges.extend((2..=9).map(|k| 10.0 * k as f64));
        let labels = edges.windows(2).map(|w| format!("{}-{}", w[0], w[1])).collect();
        Self::new(edges, labels).expect("static spec")
    }

    pub fn for_axis(axis: BinAxis) -> Self {
        match axis {
            BinAxis::Width => Self::face_width(),
            BinAxis::Angle => Self::gaze_angle(),
        }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn assign(&self, value: f64) -> BinSlot {
        if value < self.edges[0] {
            return BinSlot::Below;
        }
        // first edge strictly greater than value closes the bin
        let upper = self.edges.partition_point(|e| *e <= value);
        if upper >= self.edges.len() {
            BinSlot::Above
        } else {
            BinSlot::Bin(upper - 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinStat {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Absent for empty bins.
    pub mean_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinnedReport {
    pub axis: BinAxis,
    pub bins: Vec<BinStat>,
    /// Records below the first edge (e.g. faces narrower than 30 px).
    pub below: usize,
    pub above: usize,
    pub total: usize,
}

pub fn binned_error(records: &[FaceEvalRecord], spec: &BinSpec, axis: BinAxis) -> BinnedReport {
    let assigned: Vec<(BinSlot, f64)> = records
        .par_iter()
        .map(|r| {
            let key = match axis {
                BinAxis::Width => r.face_width(),
                BinAxis::Angle => r.gt_angle_from_frontal(),
            };
            (spec.assign(key), r.error_deg())
        })
        .collect();

    let mut sums = vec![0.0; spec.len()];
    let mut counts = vec![0usize; spec.len()];
    let (mut below, mut above) = (0, 0);
    for (slot, err) in assigned {
        match slot {
            BinSlot::Below => below += 1,
            BinSlot::Above => above += 1,
            BinSlot::Bin(i) => {
                sums[i] += err;
                counts[i] += 1;
            }
        }
    }
    let bins = (0..spec.len())
        .map(|i| BinStat {
            label: spec.labels[i].clone(),
            lo: spec.edges[i],
            hi: spec.edges[i + 1],
            count: counts[i],
            mean_error: (counts[i] > 0).then(|| sums[i] / counts[i] as f64),
        })
        .collect();
    BinnedReport {
        axis,
        bins,
        below,
        above,
        total: records.len(),
    }
}

impl BinnedReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lo,hi,count,mean_error_deg\n");
        for b in &self.bins {
            let mean = b.mean_error.map(|m| format!("{m:.4}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", b.label, b.lo, b.hi, b.count, mean);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>12}\n", "bin", "count", "mean_err");
        for b in &self.bins {
            let mean = b.mean_error.map(|m| format!("{m:.2}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:<10} {:>8} {:>12}", b.label, b.count, mean);
        }
        let _ = writeln!(
            out,
            "total {} (below range {}, above range {})",
            self.total, self.below, self.above
        );
        out
    }
}

/// Per-image running time `base + per_face * n` in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostModel {
    pub name: String,
    pub base_ms: f64,
    pub per_face_ms: f64,
}

/// Face-detector time assumed for the per-face pipelines.
pub const DETECTOR_MS: f64 = 25.0;
/// Time per image of the one-stage model.
pub const ONE_STAGE_MS: f64 = 24.93;

impl CostModel {
    pub fn new(name: impl Into<String>, base_ms: f64, per_face_ms: f64) -> Result<Self> {
        if !(base_ms >= 0.0 && per_face_ms >= 0.0) || !base_ms.is_finite() || !per_face_ms.is_finite() {
            return Err(Error::invalid("cost model terms must be finite and >= 0"));
        }
        Ok(Self {
            name: name.into(),
            base_ms,
            per_face_ms,
        })
    }

    pub fn cost_time(&self, n_faces: usize) -> f64 {
        self.base_ms + self.per_face_ms * n_faces as f64
    }

    pub fn fps(&self, n_faces: usize) -> f64 {
        1000.0 / self.cost_time(n_faces)
    }

    /// Smallest `n >= 1` at which this model is slower than `other`, if any.
    pub fn crossover(&self, other: &CostModel) -> Option<usize> {
        let slope = self.per_face_ms - other.per_face_ms;
        let gap = other.base_ms - self.base_ms;
        if slope <= 0.0 {
            return (gap < 0.0).then_some(1);
        }
        // cost_self(n) > cost_other(n)  <=>  n > gap / slope
        let n = if gap < 0.0 {
            1
        } else {
            (gap / slope).floor() as usize + 1
        };
        Some(n.max(1))
    }

    /// Largest face count that still runs at `fps` or faster.
    pub fn max_faces_at(&self, fps: f64) -> Option<usize> {
        let budget = 1000.0 / fps;
        if self.base_ms > budget {
            return None;
        }
        if self.per_face_ms == 0.0 {
            return Some(usize::MAX);
        }
        Some(((budget - self.base_ms) / self.per_face_ms).floor() as usize)
    }
}

/// The one-stage model followed by the four per-face pipelines.
pub fn running_time_models() -> Vec<CostModel> {
    vec![
        CostModel::new("Ours (MobileNet)", ONE_STAGE_MS, 0.0).unwrap(),
        CostModel::new("Full-face", DETECTOR_MS, 1.21).unwrap(),
        CostModel::new("ETH-18", DETECTOR_MS, 3.15).unwrap(),
        CostModel::new("ETH-50", DETECTOR_MS, 6.64).unwrap(),
        CostModel::new("GazeTR", DETECTOR_MS, 9.98).unwrap(),
    ]
}
