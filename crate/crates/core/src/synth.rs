//! Synthetic fixtures: a 68-point 3D face template, smooth test images, and
//! randomized attribute records. Used by tests, the acceptance suite and the
//! `synth` CLI subcommand.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matching::{AttributeRecord, Source};
use crate::normalization::{CameraIntrinsics, FaceModel, HeadPose, Landmarks68};
use crate::raster::Image;

/// 68-point face template in the head frame (mm). The six PnP points coincide
/// with the bundled [`FaceModel`].
pub fn face_template() -> Vec<Vector3<f64>> {
    use std::f64::consts::PI;
    let mut pts = vec![Vector3::zeros(); 68];
    // jaw line
    for (k, p) in pts.iter_mut().enumerate().take(17) {
        let a = PI * k as f64 / 16.0;
        *p = Vector3::new(-70.0 * a.cos(), -25.0 + 110.0 * a.sin(), 40.0 - 35.0 * a.sin());
    }
    // brows
    for k in 0..5 {
        let t = k as f64 / 4.0;
        let arch = 8.0 * (PI * t).sin();
        pts[17 + k] = Vector3::new(-60.0 + 45.0 * t, -42.0 - arch, 2.0 - 6.0 * t);
        pts[26 - k] = Vector3::new(60.0 - 45.0 * t, -42.0 - arch, 2.0 - 6.0 * t);
    }
    // nose bridge and base
    for k in 0..4 {
        let t = k as f64 / 3.0;
        pts[27 + k] = Vector3::new(0.0, -28.0 + 38.0 * t, -10.0 - 20.0 * t);
    }
    for k in 0..5 {
        let x = -15.0 + 7.5 * k as f64;
        pts[31 + k] = Vector3::new(x, 18.0, -16.0 + 0.02 * x * x);
    }
    // eyes
    let right_eye = [
        (-45.0, -20.0, 6.0),
        (-35.0, -26.0, 0.0),
        (-25.0, -26.0, -4.0),
        (-15.0, -20.0, -6.0),
        (-25.0, -15.0, -4.0),
        (-35.0, -15.0, 0.0),
    ];
    for (k, &(x, y, z)) in right_eye.iter().enumerate() {
        pts[36 + k] = Vector3::new(x, y, z);
    }
    // left eye mirrors the right one, starting from the inner corner
    let left_order = [3, 2, 1, 0, 5, 4];
    for (k, &src) in left_order.iter().enumerate() {
        let (x, y, z) = right_eye[src];
        pts[42 + k] = Vector3::new(-x, y, z);
    }
    // outer lip: 48..=54 over the top, 55..=59 back along the bottom
    for k in 0..12 {
        let a = PI - k as f64 * PI / 6.0;
        let (s, c) = a.sin_cos();
        pts[48 + k] = Vector3::new(25.0 * c, 40.0 - 10.0 * s, -6.0 * s * s);
    }
    // inner lip
    for k in 0..8 {
        let a = PI - k as f64 * PI / 4.0;
        let (s, c) = a.sin_cos();
        pts[60 + k] = Vector3::new(15.0 * c, 40.0 - 4.0 * s, -5.0);
    }
    pts
}

/// Projects the face template at `pose` into pixel landmarks.
pub fn project_landmarks(pose: &HeadPose, cam: &CameraIntrinsics) -> Landmarks68 {
    let pts = face_template()
        .iter()
        .map(|p| cam.project(&pose.transform(p)))
        .collect();
    Landmarks68::new(pts).expect("template projects to finite points")
}

/// Template points of the bundled six-point model, for cross-checks.
pub fn model_points_match_template() -> bool {
    let template = face_template();
    FaceModel::default()
        .points()
        .iter()
        .all(|p| (template[p.landmark] - p.position).norm() < 1e-12)
}

/// Smooth diagonal ramp with distinct channels.
pub fn gradient_image(width: usize, height: usize) -> Image {
    let (w, h) = (width.max(2) as f64 - 1.0, height.max(2) as f64 - 1.0);
    Image::from_fn(width, height, |x, y| {
        let (u, v) = (x as f64 / w, y as f64 / h);
        [u, v, 0.5 * (u + v)]
    })
    .expect("non-empty")
}

/// Low-frequency sinusoidal texture; `phase` varies the pattern.
pub fn smooth_texture(width: usize, height: usize, period: f64, phase: f64) -> Image {
    use std::f64::consts::TAU;
    Image::from_fn(width, height, |x, y| {
        let (u, v) = (x as f64 / period, y as f64 / period);
        [
            0.5 + 0.3 * (TAU * u + phase).sin() * (TAU * 0.7 * v).cos(),
            0.5 + 0.3 * (TAU * 0.8 * v + 2.0 * phase).sin(),
            0.5 + 0.25 * (TAU * 0.5 * (u + v) - phase).cos(),
        ]
    })
    .expect("non-empty")
}

/// Draws a crude face (skin ellipse with darker eye patches) centered on the
/// landmarks into `img`.
pub fn paint_face(img: &mut Image, lmk: &Landmarks68, skin: [f64; 3], iris: [f64; 3]) {
    let [x0, y0, x1, y1] = lmk.bbox();
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let (rx, ry) = ((x1 - x0) / 2.0 * 1.05, (y1 - y0) / 2.0 * 1.15);
    let eye = |range: std::ops::Range<usize>| {
        let n = range.len() as f64;
        let c = range.clone().fold([0.0, 0.0], |a, i| {
            let p = lmk.get(i);
            [a[0] + p[0] / n, a[1] + p[1] / n]
        });
        let w = (lmk.get(range.start)[0] - lmk.get(range.start + 3)[0]).abs();
        (c, w / 2.0)
    };
    let eyes = [eye(36..42), eye(42..48)];
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (px, py) = (x as f64, y as f64);
            let d = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
            if d > 1.0 {
                continue;
            }
            let mut c = skin;
            for (e, r) in &eyes {
                let de = ((px - e[0]).powi(2) + (py - e[1]).powi(2)).sqrt();
                if de < *r {
                    let t = 1.0 - de / r;
                    for k in 0..3 {
                        c[k] = skin[k] + (iris[k] - skin[k]) * t;
                    }
                }
            }
            img.set(x, y, c);
        }
    }
}

fn probabilities<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0f64).powi(3)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Random but valid attribute records. Landmarks scatter around the
/// normalized-frame template so that distances are comparable.
pub fn random_attribute_records(n: usize, source: Source, seed: u64) -> Vec<AttributeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = normalized_template_landmarks();
    let prefix = match source {
        Source::Wider => "w",
        Source::Xgaze => "e",
    };
    (0..n)
        .map(|i| {
            let jitter = rng.random_range(0.5..6.0);
            let a_lmk = base
                .iter()
                .map(|p| {
                    [
                        p[0] + rng.random_range(-jitter..jitter),
                        p[1] + rng.random_range(-jitter..jitter),
                    ]
                })
                .collect();
            AttributeRecord {
                face_id: format!("{prefix}{i:05}"),
                source,
                a_lmk,
                a_pose: [rng.random_range(-40.0..40.0), rng.random_range(-60.0..60.0)],
                a_age: probabilities(&mut rng, 9),
                a_race: probabilities(&mut rng, 7),
                a_gender: probabilities(&mut rng, 2),
            }
        })
        .collect()
}

/// Template landmarks seen frontally by the default virtual camera.
pub fn normalized_template_landmarks() -> Vec<[f64; 2]> {
    let params = crate::normalization::NormalizationParams::default();
    let cam = params.virtual_intrinsics();
    let pose = HeadPose::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, params.d_norm)).expect("valid pose");
    project_landmarks(&pose, &cam).points().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::Validate;

    #[test]
    fn template_agrees_with_model() {
        assert!(model_points_match_template());
    }

    #[test]
    fn template_is_left_right_symmetric() {
        let t = face_template();
        // 36 <-> 45, 39 <-> 42, 48 <-> 54, 17 <-> 26, 0 <-> 16
        for (a, b) in [(36, 45), (39, 42), (48, 54), (17, 26), (0, 16), (31, 35)] {
            assert!((t[a].x + t[b].x).abs() < 1e-9, "{a} {b}");
            assert!((t[a].y - t[b].y).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn random_records_validate() {
        for r in random_attribute_records(20, Source::Xgaze, 1) {
            assert!(r.validate().is_empty(), "{:?}", r.validate());
        }
    }
}
