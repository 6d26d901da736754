//! A small self-consistent fixture: candidate images with painted faces, their
//! face and attribute records, a gaze pool of normalized crops, image
//! annotations and noisy predictions for `eval`.

use anyhow::{Context, Result};
use gazeswap_core::dataset_io::{
    write_jsonl, AnnotatedFace, FaceRecord, GazeDegrees, GazeSample, ImageAnnotation, PredictionRecord,
};
use gazeswap_core::geometry::GazeAngles;
use gazeswap_core::matching::Source;
use gazeswap_core::normalization::{
    normalize_face, CameraIntrinsics, FaceModel, HeadPose, Landmarks68, NormalizationParams,
};
use gazeswap_core::synth::{
    normalized_template_landmarks, paint_face, project_landmarks, random_attribute_records, smooth_texture,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::SynthArgs;

const WIDTH: usize = 480;
const HEIGHT: usize = 360;

fn random_gaze(rng: &mut ChaCha8Rng) -> Result<GazeAngles> {
    Ok(GazeAngles::from_degrees(
        rng.random_range(-30.0..30.0),
        rng.random_range(-60.0..60.0),
    )?)
}

fn skin(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let t = rng.random_range(0.0..1.0);
    [0.85 - 0.45 * t, 0.65 - 0.4 * t, 0.55 - 0.35 * t]
}

pub fn run_synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let dir = &a.out_dir;
    for sub in ["images", "pool"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraIntrinsics::default_for_image(WIDTH, HEIGHT);
    let model = FaceModel::default();
    let params = NormalizationParams::default();

    let mut faces = Vec::new();
    let mut annotations = Vec::new();
    let mut predictions = Vec::new();
    for i in 0..a.images {
        let image = format!("images/img{i:03}.png");
        let mut img = smooth_texture(WIDTH, HEIGHT, rng.random_range(40.0..90.0), rng.random_range(0.0..6.0));
        // a near face, a far one, and on even images one too small to swap
        let mut placements = vec![(-90.0, 20.0, 650.0), (350.0, -40.0, 1800.0)];
        if i % 2 == 0 {
            placements.push((0.0, -600.0, 4000.0));
        }
        let mut annotated = Vec::new();
        for (k, (x, y, z)) in placements.into_iter().enumerate() {
            let pose = HeadPose::from_euler(
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.1..0.1),
                Vector3::new(x, y, z),
            )?;
            let lmk = project_landmarks(&pose, &cam);
            paint_face(&mut img, &lmk, skin(&mut rng), [0.05, 0.05, 0.1]);
            let face_id = format!("w{i:03}_{k}");
            let gaze = random_gaze(&mut rng)?;
            let (gp, gy) = gaze.to_degrees();
            let noisy = GazeDegrees {
                pitch: gp + rng.random_range(-4.0..4.0),
                yaw: gy + rng.random_range(-4.0..4.0),
            };
            predictions.push(PredictionRecord {
                face_id: face_id.clone(),
                gaze: noisy,
            });
            annotated.push(AnnotatedFace {
                face_id: face_id.clone(),
                bbox: lmk.bbox(),
                landmarks: lmk.points().to_vec(),
                gaze: Some(GazeDegrees::from_angles(&gaze)),
                provenance: None,
                mode: None,
            });
            faces.push(FaceRecord {
                face_id,
                image: image.clone(),
                image_width: WIDTH,
                image_height: HEIGHT,
                bbox: lmk.bbox(),
                landmarks: lmk,
                camera: Some(cam),
            });
        }
        img.write_png(dir.join(&image))?;
        annotations.push(ImageAnnotation {
            image_id: format!("img{i:03}"),
            image,
            width: WIDTH,
            height: HEIGHT,
            faces: annotated,
        });
    }

    // attributes of the candidates come from their own normalized landmarks
    let mut wider = random_attribute_records(faces.len(), Source::Wider, rng.random());
    for (rec, face) in wider.iter_mut().zip(&faces) {
        let (_, norm) = normalize_face(&face.landmarks, &face.camera(), &model, &params)
            .with_context(|| format!("normalizing synthetic face '{}'", face.face_id))?;
        rec.face_id = face.face_id.clone();
        rec.a_lmk = face.landmarks.transformed(&norm.warp);
    }
    let xgaze = random_attribute_records(a.pool, Source::Xgaze, rng.random());

    let template = Landmarks68::new(normalized_template_landmarks())?;
    let mut pool = Vec::with_capacity(xgaze.len());
    for rec in &xgaze {
        let mut crop = smooth_texture(
            params.crop,
            params.crop,
            rng.random_range(20.0..50.0),
            rng.random_range(0.0..6.0),
        );
        paint_face(&mut crop, &template, skin(&mut rng), [0.1, 0.05, 0.02]);
        let image = format!("pool/{}.png", rec.face_id);
        crop.write_png(dir.join(&image))?;
        pool.push(GazeSample {
            face_id: rec.face_id.clone(),
            image,
            gaze: GazeDegrees::from_angles(&random_gaze(&mut rng)?),
        });
    }

    write_jsonl(dir.join("faces.jsonl"), &faces)?;
    write_jsonl(dir.join("wider_attrs.jsonl"), &wider)?;
    write_jsonl(dir.join("xgaze_attrs.jsonl"), &xgaze)?;
    write_jsonl(dir.join("gaze_pool.jsonl"), &pool)?;
    write_jsonl(dir.join("annotations.jsonl"), &annotations)?;
    write_jsonl(dir.join("predictions.jsonl"), &predictions)?;
    log::info!(
        "{} images, {} faces and {} gaze-pool crops written to {}",
        annotations.len(),
        faces.len(),
        pool.len(),
        dir.display()
    );
    Ok(())
}
