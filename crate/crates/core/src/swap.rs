//! Gaze swapping: back-warp a matched normalized face into the target image,
//! blend it inside an eye or face mask by solving a Poisson equation, and
//! carry its gaze label back through the inverse normalization rotation.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{FaceRecord, GazeDegrees, SwapOutcome};
use crate::error::{Error, Result};
use crate::geometry::GazeVector;
use crate::matching::{MatchResult, SwapMode};
use crate::normalization::{denormalize_gaze, warp_image_with_coverage, Landmarks68, NormalizationResult};
use crate::raster::Image;

/// Eye-mask growth as a fraction of the interocular distance.
pub const EYE_DILATION: f64 = 0.15;
/// Faces narrower than this (pixels) are not swapped.
pub const MIN_FACE_WIDTH: f64 = 30.0;
/// Faces with more than this fraction of landmarks outside their box are not
/// swapped.
pub const MAX_OUTSIDE_FRACTION: f64 = 0.3;

const EYE_REGION: std::ops::Range<usize> = 36..48;
const BROW_REGION: std::ops::Range<usize> = 17..27;

/// Binary mask aligned with a target image. Its pixels never touch the
/// image border, so every masked pixel has four in-image neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
    mode: SwapMode,
}

impl RegionMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>, mode: SwapMode) -> Result<Self> {
        if width < 3 || height < 3 || data.len() != width * height {
            return Err(Error::invalid(format!(
                "mask of {} pixels does not fit {width}x{height} (need at least 3x3)",
                data.len()
            )));
        }
        let touches_border = (0..width).any(|x| data[x] || data[(height - 1) * width + x])
            || (0..height).any(|y| data[y * width] || data[y * width + width - 1]);
        if touches_border {
            return Err(Error::invalid("mask touches the image border"));
        }
        if !data.iter().any(|b| *b) {
            return Err(Error::invalid("mask is empty"));
        }
        Ok(Self {
            width,
            height,
            data,
            mode,
        })
    }

    /// Builds a mask from a predicate, clearing the one-pixel border.
    pub fn from_fn(width: usize, height: usize, mode: SwapMode, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let data = (0..width * height)
            .map(|i| {
                let (x, y) = (i % width, i / width);
                x > 0 && y > 0 && x + 1 < width && y + 1 < height && f(x, y)
            })
            .collect();
        Self::new(width, height, data, mode)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mode(&self) -> SwapMode {
        self.mode
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// True when every pixel of `self` is also in `other`.
    pub fn is_subset_of(&self, other: &RegionMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    fn intersect(&self, keep: impl Fn(usize, usize) -> bool) -> Result<Self> {
        Self::from_fn(self.width, self.height, self.mode, |x, y| {
            self.contains(x, y) && keep(x, y)
        })
    }
}

/// Convex hull in counter-clockwise order (monotone chain); collinear
/// points are dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Signed distance-like test against a counter-clockwise convex polygon:
/// zero or negative inside, otherwise the distance to the polygon.
fn distance_outside(poly: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let n = poly.len();
    let inside = (0..n).all(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    });
    if inside {
        return 0.0;
    }
    (0..n)
        .map(|i| segment_distance(poly[i], poly[(i + 1) % n], p))
        .fold(f64::INFINITY, f64::min)
}

fn segment_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

fn hull_of(points: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let hull = convex_hull(points);
    if hull.len() < 3 || polygon_area(&hull) <= 0.0 {
        return Err(Error::invalid("landmark hull is degenerate (zero area)"));
    }
    Ok(hull)
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let s = points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

/// Distance between the two eye centres.
pub fn interocular_distance(lmk: &Landmarks68) -> f64 {
    let p = lmk.points();
    let (r, l) = (centroid(&p[36..42]), centroid(&p[42..48]));
    ((r[0] - l[0]).powi(2) + (r[1] - l[1]).powi(2)).sqrt()
}

pub fn build_mask(lmk: &Landmarks68, mode: SwapMode, width: usize, height: usize) -> Result<RegionMask> {
    build_mask_with_dilation(lmk, mode, width, height, EYE_DILATION)
}

/// Eye mode covers the hull of the eye and brow landmarks grown by
/// `dilation` times the interocular distance, kept inside the face hull.
/// Full mode covers the hull of all 68 points.
pub fn build_mask_with_dilation(
    lmk: &Landmarks68,
    mode: SwapMode,
    width: usize,
    height: usize,
    dilation: f64,
) -> Result<RegionMask> {
    if !(dilation.is_finite() && dilation >= 0.0) {
        return Err(Error::invalid(format!("dilation must be >= 0, got {dilation}")));
    }
    let (w, h) = (width as f64, height as f64);
    if let Some(i) = lmk
        .points()
        .iter()
        .position(|p| p[0] < 0.0 || p[1] < 0.0 || p[0] > w - 1.0 || p[1] > h - 1.0)
    {
        return Err(Error::invalid(format!(
            "landmark {i} at {:?} lies outside the {width}x{height} image",
            lmk.get(i)
        )));
    }
    let face = hull_of(lmk.points())?;
    match mode {
        SwapMode::Full => RegionMask::from_fn(width, height, mode, |x, y| {
            distance_outside(&face, [x as f64, y as f64]) <= 0.0
        }),
        SwapMode::Eyes => {
            let pts: Vec<[f64; 2]> = BROW_REGION.chain(EYE_REGION).map(|i| lmk.get(i)).collect();
            let eyes = hull_of(&pts)?;
            let grow = dilation * interocular_distance(lmk);
            RegionMask::from_fn(width, height, mode, |x, y| {
                let p = [x as f64, y as f64];
                distance_outside(&eyes, p) <= grow && distance_outside(&face, p) <= 0.0
            })
        }
    }
}

/// Renders the normalized source face in the target image frame with `W^-1`.
/// Pixels with no source are zero and flagged false in the coverage map.
pub fn backwarp_source(
    source_norm: &Image,
    norm: &NormalizationResult,
    width: usize,
    height: usize,
) -> Result<(Image, Vec<bool>)> {
    let inv = norm.inverse_warp()?;
    warp_image_with_coverage(source_norm, &inv, width, height)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendOptions {
    /// Stop when `|b - Ax| / |b|` falls to this value.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for BlendOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendOutput {
    pub image: Image,
    /// CG iterations per channel.
    pub iterations: [usize; 3],
    /// Final relative residual per channel.
    pub residuals: [f64; 3],
}

struct MaskSystem {
    width: usize,
    /// Pixel offset of each unknown.
    pixels: Vec<usize>,
    /// Unknown index of each pixel, or `usize::MAX`.
    index: Vec<usize>,
}

impl MaskSystem {
    fn new(mask: &RegionMask) -> Self {
        let mut index = vec![usize::MAX; mask.data.len()];
        let mut pixels = Vec::new();
        for (i, _) in mask.data.iter().enumerate().filter(|(_, m)| **m) {
            index[i] = pixels.len();
            pixels.push(i);
        }
        Self {
            width: mask.width,
            pixels,
            index,
        }
    }

    fn neighbours(&self, p: usize) -> [usize; 4] {
        [p - 1, p + 1, p - self.width, p + self.width]
    }

    /// `y = A x` with `A` the 5-point Laplacian restricted to the mask
    /// (diagonal 4, -1 for masked neighbours).
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (k, &p) in self.pixels.iter().enumerate() {
            let mut v = 4.0 * x[k];
            for q in self.neighbours(p) {
                let j = self.index[q];
                if j != usize::MAX {
                    v -= x[j];
                }
            }
            y[k] = v;
        }
    }

    /// Right-hand side: source divergence plus Dirichlet target values.
    fn rhs(&self, target: &Image, source: &Image, c: usize) -> Vec<f64> {
        let t = target.data();
        let s = source.data();
        self.pixels
            .iter()
            .map(|&p| {
                let mut b = 0.0;
                for q in self.neighbours(p) {
                    b += s[3 * p + c] - s[3 * q + c];
                    if self.index[q] == usize::MAX {
                        b += t[3 * q + c];
                    }
                }
                b
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradient from `x`; returns (iterations, relative residual).
fn conjugate_gradient(sys: &MaskSystem, b: &[f64], x: &mut [f64], opts: &BlendOptions) -> (usize, f64) {
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return (0, 0.0);
    }
    let n = b.len();
    let mut ax = vec![0.0; n];
    sys.apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = vec![0.0; n];
    let mut it = 0;
    while rr.sqrt() / b_norm > opts.tolerance && it < opts.max_iterations {
        sys.apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_new;
        it += 1;
    }
    // report the true residual, not the recursively updated one
    sys.apply(x, &mut ax);
    let true_rr: f64 = b.iter().zip(&ax).map(|(b, a)| (b - a).powi(2)).sum();
    (it, true_rr.sqrt() / b_norm)
}

/// Seamless cloning: inside the mask the output has the source's gradients,
/// on the mask border it meets the target, elsewhere it is the target.
pub fn poisson_blend(target: &Image, source: &Image, mask: &RegionMask, opts: &BlendOptions) -> Result<BlendOutput> {
    let (w, h) = (target.width(), target.height());
    if (source.width(), source.height()) != (w, h) || (mask.width, mask.height) != (w, h) {
        return Err(Error::invalid(format!(
            "blend inputs differ in size: target {w}x{h}, source {}x{}, mask {}x{}",
            source.width(),
            source.height(),
            mask.width,
            mask.height
        )));
    }
    if !(opts.tolerance > 0.0) || opts.max_iterations == 0 {
        return Err(Error::invalid("blend tolerance and iteration cap must be positive"));
    }
    let sys = MaskSystem::new(mask);
    let solved: Vec<(Vec<f64>, usize, f64)> = (0..3)
        .into_par_iter()
        .map(|c| {
            let b = sys.rhs(target, source, c);
            let mut x: Vec<f64> = sys.pixels.iter().map(|&p| target.data()[3 * p + c]).collect();
            let (it, res) = conjugate_gradient(&sys, &b, &mut x, opts);
            (x, it, res)
        })
        .collect();

    let mut out = target.clone();
    let mut iterations = [0; 3];
    let mut residuals = [0.0; 3];
    for (c, (x, it, res)) in solved.into_iter().enumerate() {
        if res > opts.tolerance {
            return Err(Error::BlendFailed {
                residual: res,
                iterations: it,
            });
        }
        iterations[c] = it;
        residuals[c] = res;
        let data = out.data_mut();
        for (k, &p) in sys.pixels.iter().enumerate() {
            data[3 * p + c] = x[k];
        }
    }
    Ok(BlendOutput {
        image: out,
        iterations,
        residuals,
    })
}

/// Largest violation of `lap(f) = lap(source)` over the mask, where `f` is a
/// blended image that equals the target outside the mask.
pub fn poisson_residual(blended: &Image, source: &Image, mask: &RegionMask) -> f64 {
    let sys = MaskSystem::new(mask);
    let (f, s) = (blended.data(), source.data());
    let mut worst: f64 = 0.0;
    for &p in &sys.pixels {
        for c in 0..3 {
            let lap = |d: &[f64]| {
                sys.neighbours(p)
                    .iter()
                    .map(|&q| d[3 * p + c] - d[3 * q + c])
                    .sum::<f64>()
            };
            worst = worst.max((lap(f) - lap(s)).abs());
        }
    }
    worst
}

/// Carries a normalized-frame gaze label back to the original camera frame.
pub fn transfer_gaze_label(g_es: &GazeVector, norm: &NormalizationResult) -> Result<GazeVector> {
    denormalize_gaze(&norm.rotation, g_es)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    TooSmall,
    LandmarksOutsideBox,
    LandmarksOutsideImage,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::TooSmall => "too_small",
            SkipReason::LandmarksOutsideBox => "landmarks_outside_box",
            SkipReason::LandmarksOutsideImage => "landmarks_outside_image",
        })
    }
}

/// Size and landmark-coverage rule deciding whether a face is swapped.
pub fn qualify(face: &FaceRecord) -> std::result::Result<(), SkipReason> {
    if face.width() < MIN_FACE_WIDTH {
        return Err(SkipReason::TooSmall);
    }
    let [x0, y0, x1, y1] = face.bbox;
    let pts = face.landmarks.points();
    let outside = pts
        .iter()
        .filter(|p| p[0] < x0 || p[0] > x1 || p[1] < y0 || p[1] > y1)
        .count();
    if outside as f64 > MAX_OUTSIDE_FRACTION * pts.len() as f64 {
        return Err(SkipReason::LandmarksOutsideBox);
    }
    let (w, h) = (face.image_width as f64, face.image_height as f64);
    if pts
        .iter()
        .any(|p| p[0] < 0.0 || p[1] < 0.0 || p[0] > w - 1.0 || p[1] > h - 1.0)
    {
        return Err(SkipReason::LandmarksOutsideImage);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapProvenance {
    pub wider_id: String,
    pub xgaze_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapResult {
    pub image: Image,
    /// Label in the target camera frame.
    pub gaze: GazeVector,
    pub bbox: [f64; 4],
    pub landmarks: Landmarks68,
    pub mode: SwapMode,
    pub provenance: SwapProvenance,
    pub mask: RegionMask,
    pub blend: BlendOutput,
}

impl SwapResult {
    pub fn outcome(&self, image_ref: impl Into<String>) -> SwapOutcome {
        SwapOutcome::Swapped {
            wider_id: self.provenance.wider_id.clone(),
            xgaze_id: self.provenance.xgaze_id.clone(),
            mode: self.mode,
            image: image_ref.into(),
            bbox: self.bbox,
            gaze: GazeDegrees::from_vector(&self.gaze),
        }
    }
}

/// Swaps one face: back-warp, mask by mode, blend, transfer the label. The
/// mask is restricted to pixels whose neighbourhood the source covers.
pub fn swap_face(
    target: &Image,
    face: &FaceRecord,
    source_norm: &Image,
    g_es: &GazeVector,
    m: &MatchResult,
    opts: &BlendOptions,
) -> Result<SwapResult> {
    if m.wider_id != face.face_id {
        return Err(Error::invalid(format!(
            "match is for face '{}' but the target face is '{}'",
            m.wider_id, face.face_id
        )));
    }
    let (w, h) = (target.width(), target.height());
    let (source, covered) = backwarp_source(source_norm, &m.norm, w, h)?;
    let covered_at = |x: usize, y: usize| covered[y * w + x];
    let mask = build_mask(&face.landmarks, m.mode, w, h)?.intersect(|x, y| {
        covered_at(x, y) && covered_at(x - 1, y) && covered_at(x + 1, y) && covered_at(x, y - 1) && covered_at(x, y + 1)
    })?;
    let blend = poisson_blend(target, &source, &mask, opts)?;
    let gaze = transfer_gaze_label(g_es, &m.norm)?;
    Ok(SwapResult {
        image: blend.image.clone(),
        gaze,
        bbox: face.bbox,
        landmarks: face.landmarks.clone(),
        mode: m.mode,
        provenance: SwapProvenance {
            wider_id: m.wider_id.clone(),
            xgaze_id: m.xgaze_id.clone(),
        },
        mask,
        blend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalization::{compute_normalization, CameraIntrinsics, HeadPose, NormalizationParams};
    use crate::synth;
    use nalgebra::{DMatrix, DVector, Vector3};

    fn frontal_face(width: usize, height: usize, depth: f64) -> (Landmarks68, HeadPose, CameraIntrinsics) {
        let cam = CameraIntrinsics::default_for_image(width, height);
        let pose = HeadPose::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, depth)).unwrap();
        (synth::project_landmarks(&pose, &cam), pose, cam)
    }

    fn dense_oracle(target: &Image, source: &Image, mask: &RegionMask, c: usize) -> Vec<f64> {
        let sys = MaskSystem::new(mask);
        let n = sys.pixels.len();
        let mut a = DMatrix::zeros(n, n);
        for (k, &p) in sys.pixels.iter().enumerate() {
            a[(k, k)] = 4.0;
            for q in sys.neighbours(p) {
                if sys.index[q] != usize::MAX {
                    a[(k, sys.index[q])] = -1.0;
                }
            }
        }
        let b = DVector::from_vec(sys.rhs(target, source, c));
        a.lu().solve(&b).unwrap().iter().copied().collect()
    }

    #[test]
    fn hull_of_square_with_interior_point() {
        let hull = convex_hull(&[[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 2.0], [1.0, 0.0]]);
        assert_eq!(hull.len(), 4);
        assert_eq!(polygon_area(&hull), 4.0);
        assert_eq!(distance_outside(&hull, [1.0, 1.0]), 0.0);
        assert_eq!(distance_outside(&hull, [3.0, 1.0]), 1.0);
    }

    #[test]
    fn full_mask_contains_landmarks() {
        let (lmk, _, _) = frontal_face(320, 240, 600.0);
        let mask = build_mask(&lmk, SwapMode::Full, 320, 240).unwrap();
        for p in lmk.points() {
            assert!(
                mask.contains(p[0].round() as usize, p[1].round() as usize) || {
                    // rounding can step just off a hull vertex
                    let hull = convex_hull(lmk.points());
                    distance_outside(&hull, *p) == 0.0
                }
            );
        }
    }

    #[test]
    fn eyes_mask_inside_full_mask_and_grows_with_dilation() {
        let (lmk, _, _) = frontal_face(320, 240, 600.0);
        let full = build_mask(&lmk, SwapMode::Full, 320, 240).unwrap();
        let eyes = build_mask(&lmk, SwapMode::Eyes, 320, 240).unwrap();
        let tight = build_mask_with_dilation(&lmk, SwapMode::Eyes, 320, 240, 0.0).unwrap();
        assert!(eyes.is_subset_of(&full));
        assert!(tight.is_subset_of(&eyes));
        assert!(eyes.count() > tight.count());
        assert!(eyes.count() < full.count());
    }

    #[test]
    fn degenerate_landmarks_rejected() {
        let lmk = Landmarks68::new(vec![[10.0, 10.0]; 68]).unwrap();
        assert!(matches!(
            build_mask(&lmk, SwapMode::Full, 50, 50),
            Err(Error::InvalidArgument(_))
        ));
        let line = Landmarks68::new((0..68).map(|i| [5.0 + i as f64 * 0.5, 20.0]).collect()).unwrap();
        assert!(build_mask(&line, SwapMode::Full, 50, 50).is_err());
    }

    #[test]
    fn landmarks_outside_image_rejected() {
        let (lmk, _, _) = frontal_face(320, 240, 600.0);
        assert!(build_mask(&lmk, SwapMode::Full, 100, 100).is_err());
    }

    #[test]
    fn border_pixels_never_masked() {
        let m = RegionMask::from_fn(6, 5, SwapMode::Full, |_, _| true).unwrap();
        assert_eq!(m.count(), 4 * 3);
        assert!(RegionMask::new(3, 3, vec![true; 9], SwapMode::Full).is_err());
    }

    #[test]
    fn identical_source_returns_target() {
        let t = synth::smooth_texture(16, 16, 9.0, 0.3);
        let mask = RegionMask::from_fn(16, 16, SwapMode::Full, |x, y| {
            (3..13).contains(&x) && (2..12).contains(&y)
        })
        .unwrap();
        let out = poisson_blend(&t, &t, &mask, &BlendOptions::default()).unwrap();
        assert!(out.image.max_abs_diff(&t) <= 1e-6);
    }

    #[test]
    fn constant_offset_source_returns_target() {
        let t = synth::smooth_texture(16, 16, 7.0, 1.1);
        let s = Image::from_fn(16, 16, |x, y| t.get(x, y).map(|v| v + 0.25)).unwrap();
        let mask = RegionMask::from_fn(16, 16, SwapMode::Eyes, |x, y| {
            (x as i32 - 8).pow(2) + (y as i32 - 8).pow(2) < 30
        })
        .unwrap();
        let out = poisson_blend(&t, &s, &mask, &BlendOptions::default()).unwrap();
        assert!(out.image.max_abs_diff(&t) <= 1e-6);
    }

    #[test]
    fn matches_dense_solve_and_keeps_outside() {
        let t = synth::smooth_texture(16, 16, 11.0, 0.0);
        let s = synth::smooth_texture(16, 16, 4.0, 2.0);
        let mask = RegionMask::from_fn(16, 16, SwapMode::Full, |x, y| {
            (2..14).contains(&x) && (4..12).contains(&y) && x + y != 9
        })
        .unwrap();
        let out = poisson_blend(&t, &s, &mask, &BlendOptions::default()).unwrap();
        let sys = MaskSystem::new(&mask);
        for c in 0..3 {
            let oracle = dense_oracle(&t, &s, &mask, c);
            for (k, &p) in sys.pixels.iter().enumerate() {
                assert!((out.image.data()[3 * p + c] - oracle[k]).abs() <= 1e-8);
            }
        }
        for y in 0..16 {
            for x in 0..16 {
                if !mask.contains(x, y) {
                    assert_eq!(out.image.get(x, y), t.get(x, y));
                }
            }
        }
        assert!(poisson_residual(&out.image, &s, &mask) <= 1e-4);
    }

    #[test]
    fn non_convergence_reported() {
        let t = synth::smooth_texture(32, 32, 11.0, 0.0);
        let s = synth::smooth_texture(32, 32, 3.0, 2.0);
        let mask = RegionMask::from_fn(32, 32, SwapMode::Full, |_, _| true).unwrap();
        let opts = BlendOptions {
            tolerance: 1e-12,
            max_iterations: 2,
        };
        assert!(matches!(
            poisson_blend(&t, &s, &mask, &opts),
            Err(Error::BlendFailed { iterations: 2, .. })
        ));
    }

    #[test]
    fn size_mismatch_rejected() {
        let t = Image::new(8, 8).unwrap();
        let s = Image::new(8, 7).unwrap();
        let mask = RegionMask::from_fn(8, 8, SwapMode::Full, |_, _| true).unwrap();
        assert!(poisson_blend(&t, &s, &mask, &BlendOptions::default()).is_err());
    }

    #[test]
    fn backwarp_round_trip_psnr() {
        let (w, h) = (320, 240);
        let (lmk, pose, cam) = frontal_face(w, h, 600.0);
        let norm = compute_normalization(&pose, &cam, &NormalizationParams::default()).unwrap();
        let original = synth::smooth_texture(w, h, 40.0, 0.5);
        let crop = crate::normalization::warp_image(&original, &norm.warp, norm.crop_size, norm.crop_size).unwrap();
        let (back, covered) = backwarp_source(&crop, &norm, w, h).unwrap();
        let face = build_mask(&lmk, SwapMode::Full, w, h).unwrap();
        let psnr = crate::raster::psnr(&original, &back, |x, y| face.contains(x, y) && covered[y * w + x]);
        assert!(psnr >= 35.0, "psnr {psnr}");
        // far corners are outside the crop's footprint
        assert!(!covered[0]);
        assert_eq!(back.get(0, 0), [0.0; 3]);
    }

    #[test]
    fn qualification_rule() {
        let (lmk, _, _) = frontal_face(320, 240, 600.0);
        let bbox = lmk.bbox();
        let mut face = FaceRecord {
            face_id: "w".into(),
            image: "w.png".into(),
            image_width: 320,
            image_height: 240,
            bbox,
            landmarks: lmk,
            camera: None,
        };
        assert_eq!(qualify(&face), Ok(()));
        face.bbox = [bbox[0], bbox[1], bbox[0] + 29.0, bbox[3]];
        assert_eq!(qualify(&face), Err(SkipReason::TooSmall));
        face.bbox = [0.0, 0.0, 40.0, 40.0];
        assert_eq!(qualify(&face), Err(SkipReason::LandmarksOutsideBox));
    }
}
