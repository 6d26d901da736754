//! Synthetic end-to-end run: retrieve a donor, normalize the target face from
//! its landmarks, swap, and check the output record.

use gazeswap_core::dataset_io::{FaceRecord, SwapOutcome};
use gazeswap_core::geometry::{angular_error, GazeAngles};
use gazeswap_core::matching::{retrieve, AttributeRecord, MatchConfig, MatchResult, Source, SwapMode};
use gazeswap_core::normalization::{
    normalize_face, rotate_gaze, warp_image, CameraIntrinsics, FaceModel, HeadPose, NormalizationParams,
};
use gazeswap_core::swap::{qualify, swap_face, BlendOptions};
use gazeswap_core::synth;
use nalgebra::Vector3;

fn target_face() -> (FaceRecord, gazeswap_core::raster::Image) {
    let (w, h) = (400, 300);
    let cam = CameraIntrinsics::default_for_image(w, h);
    let pose = HeadPose::from_euler(-0.1, 0.3, 0.0, Vector3::new(-20.0, 5.0, 700.0)).unwrap();
    let lmk = synth::project_landmarks(&pose, &cam);
    let mut img = synth::smooth_texture(w, h, 60.0, 0.9);
    synth::paint_face(&mut img, &lmk, [0.75, 0.55, 0.45], [0.05, 0.05, 0.1]);
    let face = FaceRecord {
        face_id: "w7".into(),
        image: "w7.png".into(),
        image_width: w,
        image_height: h,
        bbox: lmk.bbox(),
        landmarks: lmk,
        camera: Some(cam),
    };
    (face, img)
}

fn attributes(id: &str, source: Source, lmk: Vec<[f64; 2]>, pose: [f64; 2]) -> AttributeRecord {
    AttributeRecord {
        face_id: id.into(),
        source,
        a_lmk: lmk,
        a_pose: pose,
        a_age: vec![1.0 / 9.0; 9],
        a_race: vec![1.0 / 7.0; 7],
        a_gender: vec![0.7, 0.3],
    }
}

#[test]
fn synthetic_swap_end_to_end() {
    let (face, target) = target_face();
    assert_eq!(qualify(&face), Ok(()));
    let params = NormalizationParams::default();
    let (estimate, norm) = normalize_face(&face.landmarks, &face.camera(), &FaceModel::default(), &params).unwrap();
    assert!(estimate.rmse < 1.0, "rmse {}", estimate.rmse);

    // the query's normalized landmarks; the closest donor is a small jitter of them
    let query_lmk = face.landmarks.transformed(&norm.warp);
    let near: Vec<[f64; 2]> = query_lmk.iter().map(|p| [p[0] + 0.5, p[1] - 0.5]).collect();
    let far: Vec<[f64; 2]> = query_lmk.iter().map(|p| [p[0] + 9.0, p[1] + 4.0]).collect();
    let query = attributes("w7", Source::Wider, query_lmk, [-5.0, 17.0]);
    let pool = vec![
        attributes("e_far", Source::Xgaze, far, [0.0, 0.0]),
        attributes("e_near", Source::Xgaze, near, [-5.0, 17.5]),
    ];
    let retrieval = retrieve(&query, &pool, &MatchConfig::default()).unwrap();
    assert_eq!(retrieval.xgaze_id, "e_near");
    assert_eq!(retrieval.mode, SwapMode::Eyes);
    let m = MatchResult::new("w7", &retrieval, norm);

    let donor = synth::smooth_texture(target.width(), target.height(), 25.0, 2.1);
    let source_norm = warp_image(&donor, &norm.warp, norm.crop_size, norm.crop_size).unwrap();
    let g_es = GazeAngles::from_degrees(8.0, -25.0).unwrap().to_vector();
    let out = swap_face(&target, &face, &source_norm, &g_es, &m, &BlendOptions::default()).unwrap();

    assert!(out.mask.count() > 0);
    assert!(out.blend.residuals.iter().all(|r| *r <= 1e-10));
    // rotating the label back into the normalized frame recovers g_es
    let again = rotate_gaze(&norm.rotation, &out.gaze).unwrap();
    assert!(angular_error(&again, &g_es) < 1e-9);
    for y in 0..target.height() {
        for x in 0..target.width() {
            if !out.mask.contains(x, y) {
                assert_eq!(out.image.get(x, y), target.get(x, y));
            }
        }
    }

    match out.outcome("out/w7.png") {
        SwapOutcome::Swapped {
            wider_id,
            xgaze_id,
            mode,
            bbox,
            ..
        } => {
            assert_eq!((wider_id.as_str(), xgaze_id.as_str()), ("w7", "e_near"));
            assert_eq!(mode, SwapMode::Eyes);
            assert_eq!(bbox, face.bbox);
        }
        other => panic!("unexpected outcome {other:?}"),
    }
}

#[test]
fn full_mode_covers_more_than_eyes() {
    let (face, target) = target_face();
    let (_, norm) = normalize_face(
        &face.landmarks,
        &face.camera(),
        &FaceModel::default(),
        &NormalizationParams::default(),
    )
    .unwrap();
    let donor = synth::gradient_image(target.width(), target.height());
    let source_norm = warp_image(&donor, &norm.warp, norm.crop_size, norm.crop_size).unwrap();
    let g = GazeAngles::FRONTAL.to_vector();
    let run = |mode: SwapMode, distance: f64| {
        let m = MatchResult {
            wider_id: "w7".into(),
            xgaze_id: "e1".into(),
            score: -distance,
            distance,
            mode,
            norm,
            gender_fallback: false,
        };
        swap_face(&target, &face, &source_norm, &g, &m, &BlendOptions::default()).unwrap()
    };
    let eyes = run(SwapMode::Eyes, 1.0);
    let full = run(SwapMode::Full, 3.0);
    assert!(eyes.mask.is_subset_of(&full.mask));
    assert!(full.mask.count() > eyes.mask.count());
}
