//! JSON-lines schemas, validation and dataset statistics.
//!
//! Every reader returns the records it could parse together with a list of
//! per-line issues, so a bad file never aborts a run halfway. Angles are
//! stored in degrees; image paths are relative to the manifest's directory.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{BinSlot, BinSpec};
use crate::geometry::{GazeAngles, GazeVector};
use crate::matching::SwapMode;
use crate::normalization::{CameraIntrinsics, Landmarks68};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationIssue {
    pub field: String,
    pub message: String,
}

impl ValidationIssue {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }

    fn nested(self, prefix: &str) -> Self {
        Self {
            field: format!("{prefix}.{}", self.field),
            message: self.message,
        }
    }
}

/// Record-level invariant checks. An empty list means valid.
pub trait Validate {
    fn validate(&self) -> Vec<ValidationIssue>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IssueKind {
    Parse,
    Validation,
}

/// A problem tied to one line of an input file (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordIssue {
    pub line: usize,
    pub kind: IssueKind,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.kind, &self.field) {
            (IssueKind::Parse, _) => write!(f, "line {}: parse error: {}", self.line, self.message),
            (IssueKind::Validation, Some(field)) => {
                write!(f, "line {}: field `{}`: {}", self.line, field, self.message)
            }
            (IssueKind::Validation, None) => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

/// Parsed records with their line numbers, plus every issue found.
#[derive(Debug, Clone)]
pub struct Records<T> {
    pub records: Vec<T>,
    pub lines: Vec<usize>,
    pub issues: Vec<RecordIssue>,
}

impl<T> Records<T> {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    /// The records if no issue was found, otherwise a structured error.
    pub fn into_result(self, path: impl AsRef<Path>) -> Result<Vec<T>> {
        if self.issues.is_empty() {
            Ok(self.records)
        } else {
            Err(Error::Records {
                path: path.as_ref().display().to_string(),
                issues: self.issues,
            })
        }
    }
}

/// Parses JSON-lines text. Blank lines are skipped; records that parse but
/// fail validation are reported and dropped.
pub fn parse_jsonl<T: DeserializeOwned + Validate>(bytes: &[u8]) -> Records<T> {
    let mut out = Records {
        records: Vec::new(),
        lines: Vec::new(),
        issues: Vec::new(),
    };
    for (i, raw) in bytes.split(|b| *b == b'\n').enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if raw.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match serde_json::from_slice::<T>(raw) {
            Err(e) => out.issues.push(RecordIssue {
                line,
                kind: IssueKind::Parse,
                field: None,
                message: e.to_string(),
            }),
            Ok(rec) => {
                let problems = rec.validate();
                if problems.is_empty() {
                    out.records.push(rec);
                    out.lines.push(line);
                } else {
                    out.issues.extend(problems.into_iter().map(|p| RecordIssue {
                        line,
                        kind: IssueKind::Validation,
                        field: Some(p.field),
                        message: p.message,
                    }));
                }
            }
        }
    }
    out
}

pub fn read_jsonl<T: DeserializeOwned + Validate>(path: impl AsRef<Path>) -> Result<Records<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_jsonl(&bytes))
}

/// Reads a file and fails on the first sign of trouble, listing all issues.
pub fn read_valid<T: DeserializeOwned + Validate>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    read_jsonl(path)?.into_result(path)
}

/// One canonical line (no trailing newline). Field order follows the type's
/// declaration order.
pub fn to_line<T: Serialize>(record: &T) -> Result<String> {
    serde_json::to_string(record).map_err(|e| Error::invalid(format!("cannot serialize record: {e}")))
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&to_line(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let text = to_jsonl(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Appends records under an exclusive lock so concurrent writers never
/// interleave partial lines.
pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let text = to_jsonl(records)?;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.lock().map_err(|e| Error::io(path, e))?;
    let written = file.write_all(text.as_bytes()).and_then(|_| file.flush());
    let unlocked = file.unlock();
    written.and(unlocked).map_err(|e| Error::io(path, e))
}

/// Resolves an image reference relative to the manifest that names it.
pub fn resolve(manifest: impl AsRef<Path>, reference: &str) -> PathBuf {
    let base = manifest.as_ref().parent().unwrap_or(Path::new(""));
    base.join(reference)
}

/// Reports every id that appears on more than one line.
pub fn duplicate_ids<'a>(field: &str, ids: impl IntoIterator<Item = (usize, &'a str)>) -> Vec<RecordIssue> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut out = Vec::new();
    for (line, id) in ids {
        if let Some(first) = seen.insert(id, line) {
            seen.insert(id, first);
            out.push(RecordIssue {
                line,
                kind: IssueKind::Validation,
                field: Some(field.to_string()),
                message: format!("duplicate id '{id}' (first on line {first})"),
            });
        }
    }
    out
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn check_id(field: &str, id: &str, out: &mut Vec<ValidationIssue>) {
    if id.trim().is_empty() {
        out.push(ValidationIssue::new(field, "must not be empty"));
    }
}

fn check_bbox(bbox: &[f64; 4], width: f64, height: f64, out: &mut Vec<ValidationIssue>) {
    if !finite(bbox) {
        out.push(ValidationIssue::new("bbox", "must be finite"));
        return;
    }
    let [x0, y0, x1, y1] = *bbox;
    if x1 <= x0 || y1 <= y0 {
        out.push(ValidationIssue::new("bbox", "must satisfy x0 < x1 and y0 < y1"));
    }
    if x0 < 0.0 || y0 < 0.0 || x1 > width || y1 > height {
        out.push(ValidationIssue::new(
            "bbox",
            format!("{bbox:?} exceeds the {width}x{height} image"),
        ));
    }
}

/// Gaze as (pitch, yaw) in degrees, the on-disk form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeDegrees {
    pub pitch: f64,
    pub yaw: f64,
}

impl GazeDegrees {
    pub fn from_angles(a: &GazeAngles) -> Self {
        let (pitch, yaw) = a.to_degrees();
        Self { pitch, yaw }
    }

    pub fn from_vector(g: &GazeVector) -> Self {
        Self::from_angles(&g.to_angles())
    }

    pub fn to_angles(&self) -> Result<GazeAngles> {
        GazeAngles::from_degrees(self.pitch, self.yaw)
    }

    pub fn to_vector(&self) -> Result<GazeVector> {
        Ok(self.to_angles()?.to_vector())
    }
}

impl Validate for GazeDegrees {
    fn validate(&self) -> Vec<ValidationIssue> {
        if finite(&[self.pitch, self.yaw]) {
            Vec::new()
        } else {
            vec![ValidationIssue::new("gaze", "angles must be finite")]
        }
    }
}

/// A target-dataset face: where it is and its 68 landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub face_id: String,
    pub image: String,
    pub image_width: usize,
    pub image_height: usize,
    /// `[x0, y0, x1, y1]` pixels.
    pub bbox: [f64; 4],
    pub landmarks: Landmarks68,
    /// Defaults to `f = 1.2 * max(w, h)` at the image center when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraIntrinsics>,
}

impl FaceRecord {
    pub fn camera(&self) -> CameraIntrinsics {
        self.camera
            .unwrap_or_else(|| CameraIntrinsics::default_for_image(self.image_width, self.image_height))
    }

    pub fn width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }
}

impl Validate for FaceRecord {
    fn validate(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        check_id("face_id", &self.face_id, &mut out);
        check_id("image", &self.image, &mut out);
        if self.image_width == 0 || self.image_height == 0 {
            out.push(ValidationIssue::new("image_width", "image dimensions must be >= 1"));
        }
        check_bbox(&self.bbox, self.image_width as f64, self.image_height as f64, &mut out);
        if let Some(cam) = &self.camera {
            if let Err(e) = cam.validate() {
                out.push(ValidationIssue::new("camera", e.to_string()));
            }
        }
        out
    }
}

/// A gaze-pool face: its normalized crop and the gaze label in that crop's
/// frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub face_id: String,
    pub image: String,
    pub gaze: GazeDegrees,
}

impl Validate for GazeSample {
    fn validate(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        check_id("face_id", &self.face_id, &mut out);
        check_id("image", &self.image, &mut out);
        out.extend(self.gaze.validate());
        out
    }
}

/// Per-candidate outcome of the swap stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SwapOutcome {
    Swapped {
        wider_id: String,
        xgaze_id: String,
        mode: SwapMode,
        /// Output image holding the swapped face.
        image: String,
        bbox: [f64; 4],
        gaze: GazeDegrees,
    },
    Skipped {
        wider_id: String,
        reason: String,
    },
}

impl SwapOutcome {
    pub fn wider_id(&self) -> &str {
        match self {
            SwapOutcome::Swapped { wider_id, .. } | SwapOutcome::Skipped { wider_id, .. } => wider_id,
        }
    }
}

impl Validate for SwapOutcome {
    fn validate(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        check_id("wider_id", self.wider_id(), &mut out);
        match self {
            SwapOutcome::Swapped {
                xgaze_id,
                image,
                bbox,
                gaze,
                ..
            } => {
                check_id("xgaze_id", xgaze_id, &mut out);
                check_id("image", image, &mut out);
                check_bbox(bbox, f64::INFINITY, f64::INFINITY, &mut out);
                out.extend(gaze.validate());
            }
            SwapOutcome::Skipped { reason, .. } => check_id("reason", reason, &mut out),
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub wider_id: String,
    pub xgaze_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedFace {
    pub face_id: String,
    pub bbox: [f64; 4],
    /// 68 or 5 points.
    pub landmarks: Vec<[f64; 2]>,
    #[serde(default)]
    pub gaze: Option<GazeDegrees>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<SwapMode>,
}

impl AnnotatedFace {
    pub fn width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }
}

/// One image of a multi-person gaze dataset with all its faces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub image_id: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub faces: Vec<AnnotatedFace>,
}

impl Validate for ImageAnnotation {
    fn validate(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        check_id("image_id", &self.image_id, &mut out);
        check_id("image", &self.image, &mut out);
        if self.width == 0 || self.height == 0 {
            out.push(ValidationIssue::new("width", "image dimensions must be >= 1"));
        }
        let mut ids = std::collections::HashSet::new();
        for (i, face) in self.faces.iter().enumerate() {
            let prefix = format!("faces[{i}]");
            let mut local = Vec::new();
            check_id("face_id", &face.face_id, &mut local);
            if !ids.insert(face.face_id.as_str()) {
                local.push(ValidationIssue::new(
                    "face_id",
                    format!("duplicate id '{}'", face.face_id),
                ));
            }
            check_bbox(&face.bbox, self.width as f64, self.height as f64, &mut local);
            if face.landmarks.len() != 68 && face.landmarks.len() != 5 {
                local.push(ValidationIssue::new(
                    "landmarks",
                    format!("expected 68 or 5 points, got {}", face.landmarks.len()),
                ));
            }
            if !face.landmarks.iter().all(|p| finite(p)) {
                local.push(ValidationIssue::new("landmarks", "must be finite"));
            }
            if let Some(g) = &face.gaze {
                local.extend(g.validate());
            }
            if let Some(p) = &face.provenance {
                check_id("provenance.wider_id", &p.wider_id, &mut local);
                check_id("provenance.xgaze_id", &p.xgaze_id, &mut local);
            }
            out.extend(local.into_iter().map(|v| v.nested(&prefix)));
        }
        out
    }
}

/// Face ids repeated across images of an annotation file.
pub fn duplicate_face_ids(records: &Records<ImageAnnotation>) -> Vec<RecordIssue> {
    duplicate_ids(
        "face_id",
        records
            .records
            .iter()
            .zip(&records.lines)
            .flat_map(|(r, line)| r.faces.iter().map(move |f| (*line, f.face_id.as_str()))),
    )
}

/// A model prediction for one face, consumed by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub face_id: String,
    pub gaze: GazeDegrees,
}

impl Validate for PredictionRecord {
    fn validate(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        check_id("face_id", &self.face_id, &mut out);
        out.extend(self.gaze.validate());
        out
    }
}

/// Stages of the human annotation pipeline, in their only allowed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preliminary,
    CropAdjusted,
    ContextAdjusted,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Preliminary => "preliminary",
            Stage::CropAdjusted => "crop_adjusted",
            Stage::ContextAdjusted => "context_adjusted",
        })
    }
}

/// One stored gaze label edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub face_id: String,
    pub pitch: f64,
    pub yaw: f64,
    pub stage: Stage,
    pub editor: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl AnnotationRecord {
    pub fn gaze(&self) -> GazeDegrees {
        GazeDegrees {
            pitch: self.pitch,
            yaw: self.yaw,
        }
    }
}

impl Validate for AnnotationRecord {
    fn validate(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        check_id("face_id", &self.face_id, &mut out);
        if !self.pitch.is_finite() {
            out.push(ValidationIssue::new("pitch", "must be finite"));
        }
        if !self.yaw.is_finite() {
            out.push(ValidationIssue::new("yaw", "must be finite"));
        }
        out
    }
}

/// An importable label: stage, editor and timestamp are optional, and a
/// missing stage means preliminary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelImport {
    pub face_id: String,
    pub pitch: f64,
    pub yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub editor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl LabelImport {
    pub fn into_record(self, default_editor: &str, now_ms: u64) -> AnnotationRecord {
        AnnotationRecord {
            face_id: self.face_id,
            pitch: self.pitch,
            yaw: self.yaw,
            stage: self.stage.unwrap_or(Stage::Preliminary),
            editor: self.editor.unwrap_or_else(|| default_editor.to_string()),
            timestamp: self.timestamp.unwrap_or(now_ms),
        }
    }
}

impl Validate for LabelImport {
    fn validate(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        check_id("face_id", &self.face_id, &mut out);
        if !self.pitch.is_finite() {
            out.push(ValidationIssue::new("pitch", "must be finite"));
        }
        if !self.yaw.is_finite() {
            out.push(ValidationIssue::new("yaw", "must be finite"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WidthBinCount {
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub images: usize,
    pub faces: usize,
    pub faces_per_image_min: usize,
    pub faces_per_image_max: usize,
    pub labeled_faces: usize,
    pub candidates: usize,
    pub swapped: usize,
    pub skipped: usize,
    pub skip_reasons: BTreeMap<String, usize>,
    /// Swap modes from the outcomes when given, else from the annotations.
    pub modes: BTreeMap<String, usize>,
    pub width_histogram: Vec<WidthBinCount>,
    /// Faces narrower than the first width bin.
    pub below_min_width: usize,
}

pub fn dataset_stats(annotations: &[ImageAnnotation], outcomes: &[SwapOutcome]) -> DatasetStats {
    let spec = BinSpec::face_width();
    let mut histogram = vec![0usize; spec.len()];
    let mut below = 0;
    let mut modes = BTreeMap::new();
    let mut labeled = 0;
    for face in annotations.iter().flat_map(|a| &a.faces) {
        match spec.assign(face.width()) {
            BinSlot::Below => below += 1,
            BinSlot::Bin(i) => histogram[i] += 1,
            BinSlot::Above => {}
        }
        if let (true, Some(m)) = (outcomes.is_empty(), face.mode) {
            *modes.entry(m.to_string()).or_insert(0) += 1;
        }
        labeled += usize::from(face.gaze.is_some());
    }
    let mut skip_reasons = BTreeMap::new();
    let mut swapped = 0;
    for o in outcomes {
        match o {
            SwapOutcome::Swapped { mode, .. } => {
                swapped += 1;
                *modes.entry(mode.to_string()).or_insert(0) += 1;
            }
            SwapOutcome::Skipped { reason, .. } => *skip_reasons.entry(reason.clone()).or_insert(0) += 1,
        }
    }
    let per_image = annotations.iter().map(|a| a.faces.len());
    DatasetStats {
        images: annotations.len(),
        faces: annotations.iter().map(|a| a.faces.len()).sum(),
        faces_per_image_min: per_image.clone().min().unwrap_or(0),
        faces_per_image_max: per_image.max().unwrap_or(0),
        labeled_faces: labeled,
        candidates: outcomes.len(),
        swapped,
        skipped: outcomes.len() - swapped,
        skip_reasons,
        modes,
        width_histogram: spec
            .labels()
            .iter()
            .zip(histogram)
            .map(|(label, count)| WidthBinCount {
                label: label.clone(),
                count,
            })
            .collect(),
        below_min_width: below,
    }
}
