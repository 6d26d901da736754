//! Face normalization: head pose from landmarks, the normalizing warp `W`
//! and rotation `R`, image warping, and gaze label rotation.
//!
//! The normalization places a virtual camera at distance `d_norm` looking at
//! the face center, with its x-axis aligned to the head x-axis:
//!
//! ```text
//! W = C_n * S * R * C^-1,   S = diag(1, 1, d_norm / |c|)
//! ```
//!
//! where `C` is the real intrinsic matrix, `C_n` the virtual one and `c` the
//! face center in camera coordinates.

use std::path::Path;

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GazeVector;
use crate::raster::Image;

/// Tolerance on `R^T R = I` for rotation inputs.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

const GN_STEP_TOLERANCE: f64 = 1e-10;
const GN_MAX_ITERATIONS: usize = 100;

/// Indices of the six PnP landmarks in the 68-point ordering: outer/inner
/// corners of both eyes and the two mouth corners.
pub const PNP_LANDMARKS: [usize; 6] = [36, 39, 42, 45, 48, 54];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    /// Uncalibrated default: `f = 1.2 * max(w, h)`, principal point at the
    /// image center.
    pub fn default_for_image(width: usize, height: usize) -> Self {
        let f = 1.2 * width.max(height) as f64;
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy]
    }
}

/// 68 facial landmarks in image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Landmarks68(Vec<[f64; 2]>);

impl Landmarks68 {
    pub const COUNT: usize = 68;

    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != Self::COUNT {
            return Err(Error::invalid(format!("expected 68 landmarks, got {}", points.len())));
        }
        if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::invalid(format!("landmark {i} is not finite")));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.0
    }

    pub fn get(&self, i: usize) -> [f64; 2] {
        self.0[i]
    }

    /// Axis-aligned bounding box `[x0, y0, x1, y1]`.
    pub fn bbox(&self) -> [f64; 4] {
        self.0.iter().fold(
            [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            |b, p| [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])],
        )
    }

    /// Applies a pixel homography to every point.
    pub fn transformed(&self, h: &Matrix3<f64>) -> Vec<[f64; 2]> {
        self.0.iter().map(|p| apply_homography(h, *p)).collect()
    }
}

impl TryFrom<Vec<[f64; 2]>> for Landmarks68 {
    type Error = Error;

    fn try_from(v: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Landmarks68> for Vec<[f64; 2]> {
    fn from(l: Landmarks68) -> Self {
        l.0
    }
}

/// Canonical 3D landmark table (millimeters, head frame).
#[derive(Debug, Clone, PartialEq)]
pub struct FaceModel {
    points: Vec<ModelPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPoint {
    pub name: String,
    pub landmark: usize,
    pub position: Vector3<f64>,
}

const DEFAULT_MODEL: &str = include_str!("../data/face_model_6pt.txt");

fn landmark_index(name: &str) -> Option<usize> {
    match name {
        "right_eye_outer" => Some(36),
        "right_eye_inner" => Some(39),
        "left_eye_inner" => Some(42),
        "left_eye_outer" => Some(45),
        "mouth_right" => Some(48),
        "mouth_left" => Some(54),
        _ => name
            .strip_prefix("lmk")
            .and_then(|n| n.parse().ok())
            .filter(|&i: &usize| i < Landmarks68::COUNT),
    }
}

impl FaceModel {
    /// Parses `name x y z` rows; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points: Vec<ModelPoint> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                path: "<face model>".into(),
                line: lineno + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected 'name x y z', got '{line}'")));
            }
            let landmark =
                landmark_index(fields[0]).ok_or_else(|| bad(format!("unknown landmark name '{}'", fields[0])))?;
            let mut xyz = [0.0; 3];
            for (k, f) in fields[1..].iter().enumerate() {
                xyz[k] = f
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("bad coordinate '{f}'")))?;
            }
            if points.iter().any(|p| p.landmark == landmark) {
                return Err(bad(format!("duplicate landmark '{}'", fields[0])));
            }
            points.push(ModelPoint {
                name: fields[0].to_string(),
                landmark,
                position: Vector3::from(xyz),
            });
        }
        if points.len() < 6 {
            return Err(Error::invalid(format!(
                "face model needs at least 6 points, got {}",
                points.len()
            )));
        }
        Ok(Self { points })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    pub fn points(&self) -> &[ModelPoint] {
        &self.points
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().map(|p| p.position).sum::<Vector3<f64>>() / self.points.len() as f64
    }
}

impl Default for FaceModel {
    fn default() -> Self {
        Self::parse(DEFAULT_MODEL).expect("bundled face model parses")
    }
}

/// Head rotation and translation (mm) in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl HeadPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) || translation.z <= 0.0 {
            return Err(Error::invalid(format!(
                "head translation must be finite with z > 0, got {translation:?}"
            )));
        }
        Ok(Self { rotation, translation })
    }

    /// Rotation `Ry(yaw) * Rx(pitch) * Rz(roll)` (radians).
    pub fn from_euler(pitch: f64, yaw: f64, roll: f64, translation: Vector3<f64>) -> Result<Self> {
        Self::new(euler_rotation(pitch, yaw, roll), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

pub fn euler_rotation(pitch: f64, yaw: f64, roll: f64) -> Matrix3<f64> {
    let rx = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
    let ry = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), roll);
    (ry * rx * rz).into_inner()
}

/// Output of [`estimate_head_pose`].
#[derive(Debug, Clone, Copy)]
pub struct PoseEstimate {
    pub pose: HeadPose,
    /// Root-mean-square reprojection error in pixels.
    pub rmse: f64,
    pub iterations: usize,
}

/// Estimates head pose from 2D landmarks: DLT initialization followed by
/// Gauss-Newton on the reprojection error.
pub fn estimate_head_pose(lmk: &Landmarks68, cam: &CameraIntrinsics, model: &FaceModel) -> Result<PoseEstimate> {
    cam.validate()?;
    let object: Vec<Vector3<f64>> = model.points().iter().map(|p| p.position).collect();
    let image: Vec<Vector2<f64>> = model
        .points()
        .iter()
        .map(|p| Vector2::from(lmk.get(p.landmark)))
        .collect();
    check_spread(&image)?;

    let (mut rotation, mut translation) = dlt_initialize(&object, &image, cam)?;

    let mut iterations = 0;
    loop {
        if iterations == GN_MAX_ITERATIONS {
            return Err(Error::EstimationFailed(format!(
                "Gauss-Newton did not converge in {GN_MAX_ITERATIONS} iterations"
            )));
        }
        iterations += 1;
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (x, obs) in object.iter().zip(&image) {
            let rx = rotation * x;
            let pc = rx + translation;
            if pc.z <= 0.0 {
                return Err(Error::EstimationFailed("landmark projected behind the camera".into()));
            }
            let (iz, iz2) = (1.0 / pc.z, 1.0 / (pc.z * pc.z));
            let residual = Vector2::new(cam.fx * pc.x * iz + cam.cx - obs.x, cam.fy * pc.y * iz + cam.cy - obs.y);
            let dproj = SMatrix::<f64, 2, 3>::new(
                cam.fx * iz,
                0.0,
                -cam.fx * pc.x * iz2,
                0.0,
                cam.fy * iz,
                -cam.fy * pc.y * iz2,
            );
            // d(exp(w) R x)/dw = -[R x]_x
            let skew = -rx.cross_matrix();
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * skew));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            jtj += j.transpose() * j;
            jtr += j.transpose() * residual;
        }
        let step = jtj
            .cholesky()
            .map(|c| c.solve(&(-jtr)))
            .ok_or_else(|| Error::EstimationFailed("singular normal equations".into()))?;
        let dw = Vector3::new(step[0], step[1], step[2]);
        let dt = Vector3::new(step[3], step[4], step[5]);
        rotation = nalgebra::Rotation3::new(dw).into_inner() * rotation;
        translation += dt;
        if !step.iter().all(|v| v.is_finite()) {
            return Err(Error::EstimationFailed("non-finite update".into()));
        }
        if step.norm() < GN_STEP_TOLERANCE {
            break;
        }
    }

    let rotation = nearest_rotation(&rotation);
    let sq: f64 = object
        .iter()
        .zip(&image)
        .map(|(x, obs)| {
            let p = cam.project(&(rotation * x + translation));
            (p[0] - obs.x).powi(2) + (p[1] - obs.y).powi(2)
        })
        .sum();
    let pose = HeadPose::new(rotation, translation).map_err(|e| Error::EstimationFailed(e.to_string()))?;
    Ok(PoseEstimate {
        pose,
        rmse: (sq / object.len() as f64).sqrt(),
        iterations,
    })
}

/// Rejects (near-)collinear 2D point sets.
fn check_spread(points: &[Vector2<f64>]) -> Result<()> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector2<f64>>() / n;
    let mut cov = nalgebra::Matrix2::<f64>::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= 1e-9 * hi {
        return Err(Error::EstimationFailed(
            "degenerate landmark configuration (collinear points)".into(),
        ));
    }
    Ok(())
}

fn dlt_initialize(
    object: &[Vector3<f64>],
    image: &[Vector2<f64>],
    cam: &CameraIntrinsics,
) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let n = object.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (x, obs)) in object.iter().zip(image).enumerate() {
        // normalized image coordinates so the solution is [R | t] up to scale
        let u = (obs.x - cam.cx) / cam.fx;
        let v = (obs.y - cam.cy) / cam.fy;
        let xh = [x.x, x.y, x.z, 1.0];
        for k in 0..4 {
            a[(2 * i, k)] = xh[k];
            a[(2 * i, 8 + k)] = -u * xh[k];
            a[(2 * i + 1, 4 + k)] = xh[k];
            a[(2 * i + 1, 8 + k)] = -v * xh[k];
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("12 eigenvalues");
    let p = eig.eigenvectors.column(imin);
    let mut m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let mut t = Vector3::new(p[3], p[7], p[11]);

    // choose the sign that puts the object in front of the camera
    let centroid = object.iter().sum::<Vector3<f64>>() / n as f64;
    if (m * centroid + t).z < 0.0 {
        m = -m;
        t = -t;
    }
    let svd = m.svd(false, false);
    let scale = svd.singular_values.mean();
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::EstimationFailed("DLT produced a degenerate projection".into()));
    }
    let mut rotation = nearest_rotation(&(m / scale));
    let mut translation = t / scale;
    if rotation.determinant() < 0.0 {
        rotation = -rotation;
    }
    if translation.z <= 0.0 {
        translation.z = translation.z.abs().max(1.0);
    }
    Ok((rotation, translation))
}

/// Projects a matrix onto SO(3) via SVD.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("rotation has non-finite entries"));
    }
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOLERANCE || r.determinant() <= 0.0 {
        return Err(Error::invalid(format!(
            "matrix is not a proper rotation (|R^T R - I| = {err:.2e}, det = {:.6})",
            r.determinant()
        )));
    }
    Ok(())
}

/// Virtual camera parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    /// Virtual camera distance, mm.
    pub d_norm: f64,
    /// Virtual focal length, pixels.
    pub f_norm: f64,
    /// Side of the square normalized crop, pixels.
    pub crop: usize,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        Self {
            d_norm: 600.0,
            f_norm: 960.0,
            crop: 224,
        }
    }
}

impl NormalizationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_norm > 0.0 && self.f_norm > 0.0 && self.crop > 0)
            || !self.d_norm.is_finite()
            || !self.f_norm.is_finite()
        {
            return Err(Error::invalid(format!("invalid normalization params {self:?}")));
        }
        Ok(())
    }

    pub fn virtual_intrinsics(&self) -> CameraIntrinsics {
        let c = self.crop as f64 / 2.0;
        CameraIntrinsics {
            fx: self.f_norm,
            fy: self.f_norm,
            cx: c,
            cy: c,
        }
    }
}

/// Saved normalization of one face: pixel warp `W` (original image to
/// normalized crop) and camera rotation `R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationResult {
    #[serde(with = "mat3_rows")]
    pub warp: Matrix3<f64>,
    #[serde(with = "mat3_rows")]
    pub rotation: Matrix3<f64>,
    pub crop_size: usize,
    /// `d_norm / |c|`, the depth scale inside `W`.
    pub scale: f64,
}

impl NormalizationResult {
    pub fn validate(&self) -> Result<()> {
        check_rotation(&self.rotation)?;
        check_invertible(&self.warp)?;
        if self.crop_size == 0 || !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::invalid("normalization crop size and scale must be positive"));
        }
        Ok(())
    }

    pub fn inverse_warp(&self) -> Result<Matrix3<f64>> {
        check_invertible(&self.warp)?;
        self.warp
            .try_inverse()
            .ok_or_else(|| Error::invalid("warp matrix is singular"))
    }
}

/// Builds the normalizing rotation and warp for a head pose. The face center
/// is the head-frame origin.
pub fn compute_normalization(
    pose: &HeadPose,
    cam: &CameraIntrinsics,
    params: &NormalizationParams,
) -> Result<NormalizationResult> {
    cam.validate()?;
    params.validate()?;
    let center = pose.translation;
    let distance = center.norm();
    let z_axis = center / distance;
    let head_x = pose.rotation.column(0).into_owned();
    let y_axis = z_axis.cross(&head_x);
    if y_axis.norm() < 1e-9 {
        return Err(Error::invalid("head x-axis is parallel to the viewing ray"));
    }
    let y_axis = y_axis.normalize();
    let x_axis = y_axis.cross(&z_axis).normalize();
    let rotation = Matrix3::from_rows(&[x_axis.transpose(), y_axis.transpose(), z_axis.transpose()]);
    let scale = params.d_norm / distance;
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, scale));
    let cam_inv = cam
        .matrix()
        .try_inverse()
        .ok_or_else(|| Error::invalid("singular intrinsics"))?;
    let warp = params.virtual_intrinsics().matrix() * s * rotation * cam_inv;
    Ok(NormalizationResult {
        warp,
        rotation,
        crop_size: params.crop,
        scale,
    })
}

/// Pose estimation followed by normalization, for a face seen in an image.
pub fn normalize_face(
    lmk: &Landmarks68,
    cam: &CameraIntrinsics,
    model: &FaceModel,
    params: &NormalizationParams,
) -> Result<(PoseEstimate, NormalizationResult)> {
    let estimate = estimate_head_pose(lmk, cam, model)?;
    let norm = compute_normalization(&estimate.pose, cam, params)?;
    Ok((estimate, norm))
}

fn check_invertible(w: &Matrix3<f64>) -> Result<()> {
    let det = w.determinant();
    let norm = w.norm();
    if !det.is_finite() || !norm.is_finite() || det.abs() <= 1e-12 * norm.powi(3) {
        return Err(Error::invalid(format!("warp matrix is singular (det = {det:e})")));
    }
    Ok(())
}

pub fn apply_homography(h: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let q = h * Vector3::new(p[0], p[1], 1.0);
    [q.x / q.z, q.y / q.z]
}

/// Warps `img` by the forward pixel map `w` using backward mapping with
/// bilinear sampling. Also returns which output pixels had a valid source.
pub fn warp_image_with_coverage(
    img: &Image,
    w: &Matrix3<f64>,
    out_width: usize,
    out_height: usize,
) -> Result<(Image, Vec<bool>)> {
    check_invertible(w)?;
    let inv = w
        .try_inverse()
        .ok_or_else(|| Error::invalid("warp matrix is singular"))?;
    let mut out = Image::new(out_width, out_height)?;
    let mut covered = vec![false; out_width * out_height];
    out.data_mut()
        .par_chunks_mut(out_width * 3)
        .zip(covered.par_chunks_mut(out_width))
        .enumerate()
        .for_each(|(y, (row, cov))| {
            for x in 0..out_width {
                let s = inv * Vector3::new(x as f64, y as f64, 1.0);
                if s.z.abs() < f64::EPSILON {
                    continue;
                }
                if let Some(v) = img.sample_bilinear(s.x / s.z, s.y / s.z) {
                    row[3 * x..3 * x + 3].copy_from_slice(&v);
                    cov[x] = true;
                }
            }
        });
    Ok((out, covered))
}

/// Warps `img` by `w`; out-of-bounds source pixels are zero.
pub fn warp_image(img: &Image, w: &Matrix3<f64>, out_width: usize, out_height: usize) -> Result<Image> {
    warp_image_with_coverage(img, w, out_width, out_height).map(|(img, _)| img)
}

/// Rotates a gaze label into the normalized frame: `R g`.
pub fn rotate_gaze(r: &Matrix3<f64>, g: &GazeVector) -> Result<GazeVector> {
    check_rotation(r)?;
    unit_or_normalized(r * Vector3::from(g.to_array()))
}

/// Rotates a normalized-frame gaze label back: `R^-1 g = R^T g`.
pub fn denormalize_gaze(r: &Matrix3<f64>, g: &GazeVector) -> Result<GazeVector> {
    check_rotation(r)?;
    unit_or_normalized(r.transpose() * Vector3::from(g.to_array()))
}

// Keeps the exact product when it is already unit, so `R = I` is a no-op.
fn unit_or_normalized(v: Vector3<f64>) -> Result<GazeVector> {
    GazeVector::new(v.x, v.y, v.z).or_else(|_| GazeVector::normalize(v.x, v.y, v.z))
}

pub(crate) mod mat3_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|i, j| rows[i][j]))
    }
}
