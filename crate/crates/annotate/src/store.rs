//! Dataset snapshot plus the append-only label log.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use gazeswap_core::dataset_io::{
    append_jsonl, duplicate_face_ids, parse_jsonl, read_jsonl, to_jsonl, AnnotatedFace, AnnotationRecord, GazeDegrees,
    ImageAnnotation, IssueKind, LabelImport, RecordIssue, Stage,
};
use gazeswap_core::geometry::{project_raw, Plane};
use gazeswap_core::normalization::{
    normalize_face, warp_image, CameraIntrinsics, FaceModel, Landmarks68, NormalizationParams, NormalizationResult,
};
use gazeswap_core::raster::Image;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "annotations.jsonl";
pub const LABEL_LOG_FILE: &str = "labels.jsonl";
/// Editor recorded for imported labels that name none.
pub const IMPORT_EDITOR: &str = "import";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("face {face_id} is at stage {current}; {requested} would move it backwards")]
    Conflict {
        face_id: String,
        current: Stage,
        requested: Stage,
    },
    #[error("{} label(s) would move a face to an earlier stage", .0.len())]
    StageConflicts(Vec<RecordIssue>),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("{} invalid record(s)", .0.len())]
    Issues(Vec<RecordIssue>),
    #[error("cannot build crop for face {face_id}: {reason}")]
    Crop { face_id: String, reason: String },
    #[error(transparent)]
    Core(#[from] gazeswap_core::Error),
}

pub type StoreResult<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageSummary {
    pub image_id: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub faces: usize,
    pub labeled: usize,
}

/// A face with its current label; label fields are null until one exists.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaceView {
    pub face_id: String,
    pub image_id: String,
    pub bbox: [f64; 4],
    /// Arrow radius: half the bbox width, original-image pixels.
    pub r: f64,
    pub pitch: Option<f64>,
    pub yaw: Option<f64>,
    pub stage: Option<Stage>,
    pub editor: Option<String>,
    pub timestamp: Option<u64>,
}

/// Where the gaze arrow goes on the normalized crop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CropView {
    pub size: usize,
    /// Crop pixels per original-image pixel at the face center.
    pub scale: f64,
    /// Arrow start, crop pixels.
    pub origin: [f64; 2],
    /// Front-plane projection of the current gaze at radius `r`,
    /// original-image pixels. Null without a label.
    pub projection: Option<[f64; 2]>,
    /// `origin + scale * projection`, crop pixels.
    pub endpoint: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaceDetail {
    #[serde(flatten)]
    pub face: FaceView,
    pub crop: Option<CropView>,
    /// Why no crop could be built, when `crop` is null.
    pub crop_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GazeEdit {
    pub pitch: f64,
    pub yaw: f64,
    pub stage: Stage,
    pub editor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportReport {
    pub imported: usize,
}

struct Location {
    image_id: String,
    index: usize,
}

pub struct Store {
    data_dir: PathBuf,
    images: BTreeMap<String, ImageAnnotation>,
    faces: HashMap<String, Location>,
    labels: RwLock<HashMap<String, AnnotationRecord>>,
    /// Serializes log appends and the stage check that precedes them.
    writer: Mutex<()>,
    model: FaceModel,
    params: NormalizationParams,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn issue(line: usize, field: &str, message: String) -> RecordIssue {
    RecordIssue {
        line,
        kind: IssueKind::Validation,
        field: Some(field.to_string()),
        message,
    }
}

impl Store {
    /// Loads the manifest and replays the label log. A missing manifest is an
    /// empty dataset; a missing log means no labels yet.
    pub fn open(data_dir: impl AsRef<Path>) -> StoreResult<Self> {
        Self::open_with(data_dir, FaceModel::default(), NormalizationParams::default())
    }

    pub fn open_with(data_dir: impl AsRef<Path>, model: FaceModel, params: NormalizationParams) -> StoreResult<Self> {
        let data_dir = data_dir.as_ref().to_path_buf();
        let manifest = data_dir.join(MANIFEST_FILE);
        let mut images = BTreeMap::new();
        let mut faces = HashMap::new();
        if manifest.exists() {
            let recs = read_jsonl::<ImageAnnotation>(&manifest)?;
            let dups = duplicate_face_ids(&recs);
            if !dups.is_empty() {
                return Err(gazeswap_core::Error::Records {
                    path: manifest.display().to_string(),
                    issues: dups,
                }
                .into());
            }
            let recs = recs.into_result(&manifest)?;
            for img in recs {
                for (index, f) in img.faces.iter().enumerate() {
                    faces.insert(
                        f.face_id.clone(),
                        Location {
                            image_id: img.image_id.clone(),
                            index,
                        },
                    );
                }
                images.insert(img.image_id.clone(), img);
            }
        }

        let mut labels = HashMap::new();
        let log = data_dir.join(LABEL_LOG_FILE);
        if log.exists() {
            let recs = read_jsonl::<AnnotationRecord>(&log)?;
            let mut issues = recs.issues.clone();
            for (rec, line) in recs.records.iter().zip(&recs.lines) {
                if !faces.contains_key(&rec.face_id) {
                    issues.push(issue(*line, "face_id", format!("unknown face '{}'", rec.face_id)));
                }
            }
            if !issues.is_empty() {
                return Err(gazeswap_core::Error::Records {
                    path: log.display().to_string(),
                    issues,
                }
                .into());
            }
            for rec in recs.records {
                labels.insert(rec.face_id.clone(), rec);
            }
        }
        log::info!(
            "loaded {} images, {} faces, {} labels from {}",
            images.len(),
            faces.len(),
            labels.len(),
            data_dir.display()
        );
        Ok(Self {
            data_dir,
            images,
            faces,
            labels: RwLock::new(labels),
            writer: Mutex::new(()),
            model,
            params,
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn read_labels(&self) -> std::sync::RwLockReadGuard<'_, HashMap<String, AnnotationRecord>> {
        self.labels.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn label(&self, face_id: &str) -> Option<AnnotationRecord> {
        self.read_labels().get(face_id).cloned()
    }

    pub fn images(&self) -> Vec<ImageSummary> {
        let labels = self.read_labels();
        self.images
            .values()
            .map(|img| ImageSummary {
                image_id: img.image_id.clone(),
                image: img.image.clone(),
                width: img.width,
                height: img.height,
                faces: img.faces.len(),
                labeled: img.faces.iter().filter(|f| labels.contains_key(&f.face_id)).count(),
            })
            .collect()
    }

    pub fn image(&self, image_id: &str) -> StoreResult<&ImageAnnotation> {
        self.images
            .get(image_id)
            .ok_or_else(|| StoreError::NotFound(format!("image '{image_id}'")))
    }

    pub fn image_path(&self, image_id: &str) -> StoreResult<PathBuf> {
        Ok(self.data_dir.join(&self.image(image_id)?.image))
    }

    fn locate(&self, face_id: &str) -> StoreResult<(&ImageAnnotation, &AnnotatedFace)> {
        let loc = self
            .faces
            .get(face_id)
            .ok_or_else(|| StoreError::NotFound(format!("face '{face_id}'")))?;
        let img = &self.images[&loc.image_id];
        Ok((img, &img.faces[loc.index]))
    }

    fn view(&self, image_id: &str, face: &AnnotatedFace, label: Option<&AnnotationRecord>) -> FaceView {
        FaceView {
            face_id: face.face_id.clone(),
            image_id: image_id.to_string(),
            bbox: face.bbox,
            r: face.width() / 2.0,
            pitch: label.map(|l| l.pitch),
            yaw: label.map(|l| l.yaw),
            stage: label.map(|l| l.stage),
            editor: label.map(|l| l.editor.clone()),
            timestamp: label.map(|l| l.timestamp),
        }
    }

    /// Faces of one image in id order.
    pub fn faces(&self, image_id: &str) -> StoreResult<Vec<FaceView>> {
        let img = self.image(image_id)?;
        let labels = self.read_labels();
        let mut out: Vec<FaceView> = img
            .faces
            .iter()
            .map(|f| self.view(&img.image_id, f, labels.get(&f.face_id)))
            .collect();
        out.sort_by(|a, b| a.face_id.cmp(&b.face_id));
        Ok(out)
    }

    pub fn face(&self, face_id: &str) -> StoreResult<FaceView> {
        let (img, face) = self.locate(face_id)?;
        Ok(self.view(&img.image_id, face, self.read_labels().get(face_id)))
    }

    fn normalization(&self, face_id: &str) -> StoreResult<(&ImageAnnotation, NormalizationResult)> {
        let (img, face) = self.locate(face_id)?;
        let crop_err = |reason: String| StoreError::Crop {
            face_id: face_id.to_string(),
            reason,
        };
        let lmk = Landmarks68::new(face.landmarks.clone())
            .map_err(|_| crop_err(format!("needs 68 landmarks, face has {}", face.landmarks.len())))?;
        let cam = CameraIntrinsics::default_for_image(img.width, img.height);
        let (_, norm) = normalize_face(&lmk, &cam, &self.model, &self.params).map_err(|e| crop_err(e.to_string()))?;
        Ok((img, norm))
    }

    pub fn detail(&self, face_id: &str) -> StoreResult<FaceDetail> {
        let face = self.face(face_id)?;
        let (crop, crop_error) = match self.normalization(face_id) {
            Ok((_, norm)) => {
                let gaze = match (face.pitch, face.yaw) {
                    (Some(p), Some(y)) => Some(GazeDegrees { pitch: p, yaw: y }),
                    _ => None,
                };
                (Some(crop_view(&norm, face.r, gaze)), None)
            }
            Err(StoreError::Crop { reason, .. }) => (None, Some(reason)),
            Err(e) => return Err(e),
        };
        Ok(FaceDetail { face, crop, crop_error })
    }

    /// The normalized crop of a face, PNG-encoded.
    pub fn crop_png(&self, face_id: &str) -> StoreResult<Vec<u8>> {
        let (img, norm) = self.normalization(face_id)?;
        let source = Image::read_png(self.data_dir.join(&img.image))?;
        let crop = warp_image(&source, &norm.warp, norm.crop_size, norm.crop_size)?;
        Ok(crop.encode_png()?)
    }

    fn checked_record(&self, rec: &AnnotationRecord, labels: &HashMap<String, AnnotationRecord>) -> StoreResult<()> {
        if !self.faces.contains_key(&rec.face_id) {
            return Err(StoreError::NotFound(format!("face '{}'", rec.face_id)));
        }
        if !(rec.pitch.is_finite() && rec.yaw.is_finite()) {
            return Err(StoreError::Invalid("pitch and yaw must be finite".into()));
        }
        if rec.editor.trim().is_empty() {
            return Err(StoreError::Invalid("editor must not be empty".into()));
        }
        if let Some(cur) = labels.get(&rec.face_id) {
            if rec.stage < cur.stage {
                return Err(StoreError::Conflict {
                    face_id: rec.face_id.clone(),
                    current: cur.stage,
                    requested: rec.stage,
                });
            }
        }
        Ok(())
    }

    fn commit(&self, records: &[AnnotationRecord]) -> StoreResult<()> {
        append_jsonl(self.data_dir.join(LABEL_LOG_FILE), records)?;
        let mut labels = self.labels.write().unwrap_or_else(|e| e.into_inner());
        for rec in records {
            labels.insert(rec.face_id.clone(), rec.clone());
        }
        Ok(())
    }

    /// Stores one edit; it becomes the face's current label.
    pub fn put_gaze(&self, face_id: &str, edit: GazeEdit) -> StoreResult<AnnotationRecord> {
        let rec = AnnotationRecord {
            face_id: face_id.to_string(),
            pitch: edit.pitch,
            yaw: edit.yaw,
            stage: edit.stage,
            editor: edit.editor,
            timestamp: now_ms(),
        };
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        self.checked_record(&rec, &self.read_labels())?;
        self.commit(std::slice::from_ref(&rec))?;
        Ok(rec)
    }

    /// Imports label lines. Lines without a stage are preliminary. Nothing is
    /// stored unless every line is acceptable.
    pub fn import(&self, body: &[u8]) -> StoreResult<ImportReport> {
        let parsed = parse_jsonl::<LabelImport>(body);
        let mut issues = parsed.issues;
        let now = now_ms();
        let records: Vec<(usize, AnnotationRecord)> = parsed
            .records
            .into_iter()
            .zip(parsed.lines)
            .map(|(l, line)| (line, l.into_record(IMPORT_EDITOR, now)))
            .collect();

        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        // later lines in the same file see the earlier ones
        let mut scratch = self.read_labels().clone();
        let mut conflicts = Vec::new();
        for (line, rec) in &records {
            match self.checked_record(rec, &scratch) {
                Ok(()) => {
                    scratch.insert(rec.face_id.clone(), rec.clone());
                }
                Err(StoreError::Conflict { .. }) => conflicts.push(issue(
                    *line,
                    "stage",
                    format!("stage {} moves face '{}' backwards", rec.stage, rec.face_id),
                )),
                Err(e) => issues.push(issue(*line, "face_id", e.to_string())),
            }
        }
        if !issues.is_empty() {
            issues.extend(conflicts);
            issues.sort_by_key(|i| i.line);
            return Err(StoreError::Issues(issues));
        }
        if !conflicts.is_empty() {
            return Err(StoreError::StageConflicts(conflicts));
        }
        let records: Vec<AnnotationRecord> = records.into_iter().map(|(_, r)| r).collect();
        if !records.is_empty() {
            self.commit(&records)?;
        }
        Ok(ImportReport {
            imported: records.len(),
        })
    }

    /// Current labels as label lines, sorted by face id.
    pub fn export_labels(&self) -> StoreResult<String> {
        let labels = self.read_labels();
        let mut recs: Vec<&AnnotationRecord> = labels.values().collect();
        recs.sort_by(|a, b| a.face_id.cmp(&b.face_id));
        let owned: Vec<AnnotationRecord> = recs.into_iter().cloned().collect();
        Ok(to_jsonl(&owned)?)
    }

    /// The dataset annotation file with each labeled face's gaze replaced by
    /// its current label.
    pub fn export_annotations(&self) -> StoreResult<String> {
        let labels = self.read_labels();
        let out: Vec<ImageAnnotation> = self
            .images
            .values()
            .map(|img| {
                let mut img = img.clone();
                for f in &mut img.faces {
                    if let Some(l) = labels.get(&f.face_id) {
                        f.gaze = Some(l.gaze());
                    }
                }
                img
            })
            .collect();
        Ok(to_jsonl(&out)?)
    }
}

/// Arrow geometry on the crop. The crop is centered on the face, so the arrow
/// starts at the crop center.
pub fn crop_view(norm: &NormalizationResult, r: f64, gaze: Option<GazeDegrees>) -> CropView {
    let size = norm.crop_size;
    let c = size as f64 / 2.0;
    let origin = [c, c];
    let scale = center_scale(norm);
    let projection = gaze.map(|g| {
        let (pitch, yaw) = (g.pitch.to_radians(), g.yaw.to_radians());
        project_raw(Plane::Front, pitch, yaw, r)
    });
    let endpoint = projection.map(|p| [origin[0] + scale * p[0], origin[1] + scale * p[1]]);
    CropView {
        size,
        scale,
        origin,
        projection,
        endpoint,
    }
}

/// Linear magnification of the warp at the pixel that lands on the crop
/// center: square root of the Jacobian determinant there.
fn center_scale(norm: &NormalizationResult) -> f64 {
    let c = norm.crop_size as f64 / 2.0;
    let h = &norm.warp;
    let Ok(inv) = norm.inverse_warp() else {
        return f64::NAN;
    };
    let p = gazeswap_core::normalization::apply_homography(&inv, [c, c]);
    let w = h[(2, 0)] * p[0] + h[(2, 1)] * p[1] + h[(2, 2)];
    let out = [c, c];
    let mut j = [[0.0; 2]; 2];
    for (i, row) in j.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = (h[(i, k)] - out[i] * h[(2, k)]) / w;
        }
    }
    (j[0][0] * j[1][1] - j[0][1] * j[1][0]).abs().sqrt()
}
