use std::collections::HashMap;

use anyhow::{anyhow, bail, Context, Result};
use gazeswap_core::dataset_io::{resolve, write_jsonl, FaceRecord, GazeSample, SwapOutcome};
use gazeswap_core::matching::{brute_force_retrieve, retrieve, AttributeRecord, MatchConfig, MatchResult};
use gazeswap_core::normalization::{normalize_face, FaceModel, NormalizationParams};
use gazeswap_core::raster::Image;
use gazeswap_core::swap::{qualify, swap_face, BlendOptions};
use rayon::prelude::*;

use crate::{read_records, MatchArgs, NormArgs, SwapArgs};

fn face_model(n: &NormArgs) -> Result<FaceModel> {
    match &n.face_model {
        Some(p) => FaceModel::load(p).with_context(|| format!("loading face model {}", p.display())),
        None => Ok(FaceModel::default()),
    }
}

fn norm_params(n: &NormArgs) -> Result<NormalizationParams> {
    let p = NormalizationParams {
        d_norm: n.d_norm,
        f_norm: n.f_norm,
        crop: n.crop,
    };
    p.validate()?;
    Ok(p)
}

fn index_by_id<'a, T>(items: &'a [T], id: impl Fn(&T) -> &str, what: &str) -> Result<HashMap<&'a str, &'a T>> {
    let mut map = HashMap::with_capacity(items.len());
    for it in items {
        if map.insert(id(it), it).is_some() {
            bail!("duplicate {what} id '{}'", id(it));
        }
    }
    Ok(map)
}

pub fn run_match(a: &MatchArgs) -> Result<()> {
    let faces: Vec<FaceRecord> = read_records(&a.faces)?;
    let queries: Vec<AttributeRecord> = read_records(&a.wider_attrs)?;
    let pool: Vec<AttributeRecord> = read_records(&a.xgaze_attrs)?;
    let cfg = MatchConfig {
        alpha_lmk: a.alpha_lmk,
        alpha_pose: a.alpha_pose,
        top_n: a.topn,
        beta_age: a.beta_age,
        beta_race: a.beta_race,
        eye_swap_threshold: a.eye_threshold,
    };
    cfg.validate()?;
    let model = face_model(&a.norm)?;
    let params = norm_params(&a.norm)?;
    let by_id = index_by_id(&faces, |f| &f.face_id, "face")?;
    index_by_id(&pool, |r| &r.face_id, "gaze-pool attribute")?;

    let results: Vec<Result<MatchResult>> = queries
        .par_iter()
        .map(|q| {
            let face = by_id.get(q.face_id.as_str()).ok_or_else(|| {
                anyhow!(
                    "attribute record '{}' has no face record in {}",
                    q.face_id,
                    a.faces.display()
                )
            })?;
            let (_, norm) = normalize_face(&face.landmarks, &face.camera(), &model, &params)
                .with_context(|| format!("normalizing face '{}'", q.face_id))?;
            let r = if a.brute_force {
                brute_force_retrieve(q, &pool, &cfg)
            } else {
                retrieve(q, &pool, &cfg)
            }
            .with_context(|| format!("matching face '{}'", q.face_id))?;
            if r.gender_fallback {
                log::warn!("{}: no gaze-pool face shares its gender; matched over all", q.face_id);
            }
            Ok(MatchResult::new(q.face_id.clone(), &r, norm))
        })
        .collect();
    let matches = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_jsonl(&a.out, &matches)?;
    log::info!("{} matches written to {}", matches.len(), a.out.display());
    Ok(())
}

pub fn run_swap(a: &SwapArgs) -> Result<()> {
    let faces: Vec<FaceRecord> = read_records(&a.faces)?;
    let matches: Vec<MatchResult> = read_records(&a.matches)?;
    let pool: Vec<GazeSample> = read_records(&a.gaze_pool)?;
    let opts = BlendOptions {
        tolerance: a.tolerance,
        max_iterations: a.max_iterations,
    };
    let by_match = index_by_id(&matches, |m| &m.wider_id, "match")?;
    let by_sample = index_by_id(&pool, |s| &s.face_id, "gaze-pool sample")?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let outcomes: Vec<Result<SwapOutcome>> = faces
        .par_iter()
        .map(|face| {
            let skipped = |reason: String| SwapOutcome::Skipped {
                wider_id: face.face_id.clone(),
                reason,
            };
            if let Err(reason) = qualify(face) {
                return Ok(skipped(reason.to_string()));
            }
            let Some(m) = by_match.get(face.face_id.as_str()) else {
                return Ok(skipped("no_match".into()));
            };
            let sample = by_sample.get(m.xgaze_id.as_str()).ok_or_else(|| {
                anyhow!(
                    "match for '{}' names unknown gaze-pool face '{}'",
                    face.face_id,
                    m.xgaze_id
                )
            })?;
            let target = Image::read_png(resolve(&a.faces, &face.image))?;
            if (target.width(), target.height()) != (face.image_width, face.image_height) {
                bail!(
                    "{}: image is {}x{}, face record says {}x{}",
                    face.image,
                    target.width(),
                    target.height(),
                    face.image_width,
                    face.image_height
                );
            }
            let source = Image::read_png(resolve(&a.gaze_pool, &sample.image))?;
            let g_es = sample.gaze.to_vector()?;
            let out = swap_face(&target, face, &source, &g_es, m, &opts)
                .with_context(|| format!("swapping face '{}'", face.face_id))?;
            let name = format!("{}.png", face.face_id);
            out.image.write_png(a.out_dir.join(&name))?;
            Ok(out.outcome(name))
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let path = a.out_dir.join("outcomes.jsonl");
    write_jsonl(&path, &outcomes)?;
    let swapped = outcomes
        .iter()
        .filter(|o| matches!(o, SwapOutcome::Swapped { .. }))
        .count();
    log::info!(
        "{swapped} swapped, {} skipped; outcomes in {}",
        outcomes.len() - swapped,
        path.display()
    );
    Ok(())
}
