//! Gaze representations and the three-plane projection geometry.
//!
//! A gaze is stored either as `(pitch, yaw)` in radians or as a unit vector in
//! the camera frame (x right, y down, z forward). The vector convention is
//!
//! ```text
//! g = (-cos(pitch) sin(yaw), -sin(pitch), -cos(pitch) cos(yaw))
//! ```
//!
//! so a frontal gaze `(0, 0)` points back at the camera, `(0, 0, -1)`. Under
//! this convention each plane projection is a plain coordinate projection of
//! `r * g`:
//!
//! | plane | u        | v       |
//! |-------|----------|---------|
//! | Front | `r g_x`  | `r g_y` |
//! | Top   | `-r g_z` | `r g_x` |
//! | Side  | `r g_z`  | `r g_y` |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-norm tolerance for [`GazeVector`].
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Pitch/yaw gaze angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeAngles {
    pitch: f64,
    yaw: f64,
}

impl GazeAngles {
    pub const FRONTAL: GazeAngles = GazeAngles { pitch: 0.0, yaw: 0.0 };

    pub fn new(pitch: f64, yaw: f64) -> Result<Self> {
        if !pitch.is_finite() || !yaw.is_finite() {
            return Err(Error::invalid(format!(
                "gaze angles must be finite (pitch={pitch}, yaw={yaw})"
            )));
        }
        Ok(Self { pitch, yaw })
    }

    pub fn from_degrees(pitch_deg: f64, yaw_deg: f64) -> Result<Self> {
        Self::new(pitch_deg.to_radians(), yaw_deg.to_radians())
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    /// `(pitch, yaw)` in degrees.
    pub fn to_degrees(&self) -> (f64, f64) {
        (self.pitch.to_degrees(), self.yaw.to_degrees())
    }

    /// True when both angles lie strictly inside (-90°, 90°).
    pub fn faces_camera(&self) -> bool {
        self.pitch.abs() < std::f64::consts::FRAC_PI_2 && self.yaw.abs() < std::f64::consts::FRAC_PI_2
    }

    pub fn to_vector(&self) -> GazeVector {
        angles_to_vector(self)
    }
}

/// Unit gaze direction in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeVector {
    x: f64,
    y: f64,
    z: f64,
}

impl GazeVector {
    pub const FRONTAL: GazeVector = GazeVector {
        x: 0.0,
        y: 0.0,
        z: -1.0,
    };

    /// Builds a vector that must already be unit length (within 1e-9).
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::invalid(format!(
                "gaze vector ({x}, {y}, {z}) is not unit length (norm {n})"
            )));
        }
        Ok(Self { x, y, z })
    }

    /// Normalizes an arbitrary non-zero finite vector.
    pub fn normalize(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::invalid(format!("cannot normalize vector ({x}, {y}, {z})")));
        }
        Ok(Self {
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &GazeVector) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn negated(&self) -> GazeVector {
        GazeVector {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn to_angles(&self) -> GazeAngles {
        vector_to_angles(self)
    }
}

/// One of the three orthogonal projection planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Plane {
    Front,
    Top,
    Side,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Front, Plane::Top, Plane::Side];

    pub fn index(self) -> usize {
        match self {
            Plane::Front => 0,
            Plane::Top => 1,
            Plane::Side => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Plane::Front => 'F',
            Plane::Top => 'T',
            Plane::Side => 'S',
        }
    }
}

impl std::str::FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f" | "front" => Ok(Plane::Front),
            "t" | "top" => Ok(Plane::Top),
            "s" | "side" => Ok(Plane::Side),
            _ => Err(Error::invalid(format!("unknown plane '{s}'"))),
        }
    }
}

/// A 2D point on one of the projection planes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanePoint {
    pub u: f64,
    pub v: f64,
    pub plane: Plane,
}

/// Half face width `r`, in the same length unit as the plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FaceRadius(f64);

impl FaceRadius {
    pub fn new(r: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::invalid(format!("face radius must be > 0, got {r}")));
        }
        Ok(Self(r))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

pub fn angles_to_vector(a: &GazeAngles) -> GazeVector {
    let (sp, cp) = a.pitch.sin_cos();
    let (sy, cy) = a.yaw.sin_cos();
    GazeVector {
        x: -cp * sy,
        y: -sp,
        z: -cp * cy,
    }
}

pub fn vector_to_angles(g: &GazeVector) -> GazeAngles {
    GazeAngles {
        pitch: -g.y.clamp(-1.0, 1.0).asin(),
        yaw: (-g.x).atan2(-g.z),
    }
}

/// Plane projection on raw angles; shared with the loss code, which works on
/// unconstrained network outputs.
pub fn project_raw(plane: Plane, pitch: f64, yaw: f64, r: f64) -> [f64; 2] {
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    match plane {
        Plane::Front => [-r * sy * cp, -r * sp],
        Plane::Top => [r * cy * cp, -r * sy * cp],
        Plane::Side => [-r * cy * cp, -r * sp],
    }
}

/// Jacobian of [`project_raw`]: `jac[k] = [d out_k / d pitch, d out_k / d yaw]`.
pub fn project_raw_jacobian(plane: Plane, pitch: f64, yaw: f64, r: f64) -> [[f64; 2]; 2] {
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    match plane {
        Plane::Front => [[r * sy * sp, -r * cy * cp], [-r * cp, 0.0]],
        Plane::Top => [[-r * cy * sp, -r * sy * cp], [r * sy * sp, -r * cy * cp]],
        Plane::Side => [[r * cy * sp, r * sy * cp], [-r * cp, 0.0]],
    }
}

pub fn project(plane: Plane, a: &GazeAngles, r: FaceRadius) -> PlanePoint {
    let [u, v] = project_raw(plane, a.pitch, a.yaw, r.get());
    PlanePoint { u, v, plane }
}

/// Inverts the front projection on the camera-facing branch.
pub fn unproject_front(p: &PlanePoint, r: FaceRadius) -> Result<GazeAngles> {
    if p.plane != Plane::Front {
        return Err(Error::invalid(format!(
            "unproject_front called with a {:?}-plane point",
            p.plane
        )));
    }
    let r = r.get();
    if !(p.u.is_finite() && p.v.is_finite()) {
        return Err(Error::invalid("plane point must be finite"));
    }
    if p.v.abs() >= r {
        return Err(Error::domain(format!("|v| = {} >= r = {r}", p.v.abs())));
    }
    let pitch = -(p.v / r).asin();
    let rc = r * pitch.cos();
    if p.u.abs() >= rc {
        return Err(Error::domain(format!("|u| = {} >= r cos(pitch) = {rc}", p.u.abs())));
    }
    let yaw = (-p.u / rc).asin();
    Ok(GazeAngles { pitch, yaw })
}

/// Gaze sensitivity `r / sqrt(r^2 - x^2)` at plane coordinate `x`.
pub fn gaze_sensitivity(x: f64, r: FaceRadius) -> Result<f64> {
    let r = r.get();
    if !x.is_finite() || x.abs() >= r {
        return Err(Error::domain(format!("|x| = {} must be < r = {r}", x.abs())));
    }
    Ok(r / (r * r - x * x).sqrt())
}

/// Sensitivity of a plane at the true projection of `a`, evaluated at the
/// projection's radial distance from the plane origin. Equals `1 / |g_n|`,
/// where `g_n` is the gaze component along the plane normal; infinite when the
/// gaze lies in the plane.
pub fn plane_sensitivity(plane: Plane, a: &GazeAngles) -> f64 {
    let g = a.to_vector();
    let normal = match plane {
        Plane::Front => g.z,
        Plane::Top => g.y,
        Plane::Side => g.x,
    };
    if normal == 0.0 {
        f64::INFINITY
    } else {
        1.0 / normal.abs()
    }
}

/// Angle between two unit gaze vectors in degrees, in [0, 180].
///
/// Evaluated as `atan2(|g1 x g2|, g1 . g2)`, which equals
/// `acos(clamp(g1 . g2))` without its loss of precision near 0° and 180°.
pub fn angular_error(g1: &GazeVector, g2: &GazeVector) -> f64 {
    let cx = g1.y * g2.z - g1.z * g2.y;
    let cy = g1.z * g2.x - g1.x * g2.z;
    let cz = g1.x * g2.y - g1.y * g2.x;
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    cross.atan2(g1.dot(g2).clamp(-1.0, 1.0)).to_degrees()
}

/// Rebuilds a gaze vector from a (possibly noisy) plane point. The lost
/// out-of-plane component takes its sign from `hint`; points that fall
/// outside the radius-`r` disc are pulled back onto its rim.
pub(crate) fn reconstruct(plane: Plane, u: f64, v: f64, r: f64, hint: &GazeVector) -> GazeVector {
    let (mut a, mut b) = (u / r, v / r);
    let in_plane = a * a + b * b;
    if in_plane > 1.0 {
        let s = in_plane.sqrt();
        a /= s;
        b /= s;
    }
    let rest = (1.0 - a * a - b * b).max(0.0).sqrt();
    let signed = |h: f64| if h < 0.0 { -rest } else { rest };
    let (x, y, z) = match plane {
        // front looks along the optical axis; the camera-facing branch is z < 0
        Plane::Front => (a, b, -rest),
        Plane::Top => (b, signed(hint.y), -a),
        Plane::Side => (signed(hint.x), b, a),
    };
    GazeVector::normalize(x, y, z).unwrap_or(*hint)
}

/// Mean angular error (degrees) caused by quantizing plane projections.
///
/// Each sample perturbs the projection of `a` on the reconstruction plane by
/// uniform noise in `[-pixel/2, pixel/2]^2` and reconstructs the 3D gaze from
/// the noisy point. With several planes, the plane with the lowest sensitivity
/// at the true projection is used.
pub fn quantization_error_mc(
    a: &GazeAngles,
    r: FaceRadius,
    pixel: f64,
    planes: &[Plane],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if planes.is_empty() {
        return Err(Error::invalid("plane set is empty"));
    }
    if samples == 0 {
        return Err(Error::invalid("samples must be >= 1"));
    }
    if !(pixel.is_finite() && pixel >= 0.0) {
        return Err(Error::invalid(format!("pixel size must be >= 0, got {pixel}")));
    }
    let plane = planes
        .iter()
        .copied()
        .min_by(|p, q| plane_sensitivity(*p, a).total_cmp(&plane_sensitivity(*q, a)))
        .expect("non-empty plane set");

    let truth = a.to_vector();
    let radius = r.get();
    let [u0, v0] = project_raw(plane, a.pitch, a.yaw, radius);
    let half = pixel / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let (du, dv) = if half > 0.0 {
            (rng.random_range(-half..=half), rng.random_range(-half..=half))
        } else {
            (0.0, 0.0)
        };
        let g = reconstruct(plane, u0 + du, v0 + dv, radius, &truth);
        total += angular_error(&g, &truth);
    }
    Ok(total / samples as f64)
}
