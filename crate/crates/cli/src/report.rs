use std::collections::HashMap;
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use gazeswap_core::dataset_io::{dataset_stats, PredictionRecord, SwapOutcome};
use gazeswap_core::eval::{binned_error, BinSpec, FaceEvalRecord};
use gazeswap_core::geometry::{gaze_sensitivity, quantization_error_mc, FaceRadius, GazeAngles, GazeVector, Plane};
use gazeswap_core::loss::LossConfig;
use gazeswap_core::toy::{gradcheck, realizable_problem, toy_descent, ToyConfig};

use crate::{emit, read_annotations, read_records, EvalArgs, GradcheckArgs, GsReportArgs, StatsArgs, ToyfitArgs};

pub fn run_eval(a: &EvalArgs) -> Result<()> {
    let gt = read_annotations(&a.gt)?;
    let preds: Vec<PredictionRecord> = read_records(&a.pred)?;
    let mut by_face: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in &preds {
        if by_face.insert(&p.face_id, p).is_some() {
            bail!("{}: duplicate prediction for face '{}'", a.pred.display(), p.face_id);
        }
    }
    let mut records = Vec::new();
    let mut missing = 0;
    let mut used = 0;
    for face in gt.iter().flat_map(|img| &img.faces) {
        let Some(g) = &face.gaze else { continue };
        let Some(p) = by_face.get(face.face_id.as_str()) else {
            missing += 1;
            continue;
        };
        used += 1;
        let gt_vec: GazeVector = g.to_vector()?;
        let pred_vec = p.gaze.to_vector()?;
        records.push(FaceEvalRecord::new(face.width(), gt_vec, pred_vec)?);
    }
    if used < preds.len() {
        let known: std::collections::HashSet<&str> = gt
            .iter()
            .flat_map(|i| &i.faces)
            .filter(|f| f.gaze.is_some())
            .map(|f| f.face_id.as_str())
            .collect();
        let orphan = preds
            .iter()
            .find(|p| !known.contains(p.face_id.as_str()))
            .expect("some prediction unused");
        bail!(
            "{}: prediction for face '{}' has no labeled ground-truth face in {}",
            a.pred.display(),
            orphan.face_id,
            a.gt.display()
        );
    }
    if missing > 0 {
        log::warn!("{missing} labeled face(s) have no prediction and are left out");
    }
    let report = binned_error(&records, &BinSpec::for_axis(a.bins), a.bins);
    emit(&if a.csv { report.to_csv() } else { report.to_text() })
}

fn gs_curve_csv(r: f64) -> Result<String> {
    let radius = FaceRadius::new(r)?;
    let mut out = String::from("x_over_r,x,gs\n");
    for k in 0..100 {
        let t = k as f64 / 100.0;
        let gs = gaze_sensitivity(t * r, radius)?;
        writeln!(out, "{t:.2},{},{gs:.10}", t * r)?;
    }
    Ok(out)
}

fn quantization_csv(r: f64, pixel: f64, samples: usize, seed: u64) -> Result<String> {
    let radius = FaceRadius::new(r)?;
    let mut out = String::from("angle_deg,error_front_deg,error_three_planes_deg\n");
    for k in 0..9 {
        let deg = 5.0 + 10.0 * k as f64;
        let a = GazeAngles::from_degrees(0.0, deg)?;
        let front = quantization_error_mc(&a, radius, pixel, &[Plane::Front], samples, seed)?;
        let all = quantization_error_mc(&a, radius, pixel, &Plane::ALL, samples, seed)?;
        writeln!(out, "{deg},{front:.8},{all:.8}")?;
    }
    Ok(out)
}

pub fn run_gs_report(a: &GsReportArgs, seed: u64) -> Result<()> {
    let curve = gs_curve_csv(a.radius)?;
    let quant = quantization_csv(a.radius, a.pixel, a.samples, seed)?;
    match &a.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, text) in [("gs_curve.csv", &curve), ("quantization.csv", &quant)] {
                let p = dir.join(name);
                std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
            log::info!("wrote gs_curve.csv and quantization.csv to {}", dir.display());
        }
        None => emit(&format!("{curve}\n{quant}"))?,
    }
    Ok(())
}

pub fn run_gradcheck(a: &GradcheckArgs, seed: u64) -> Result<()> {
    let report = gradcheck(a.instances, a.anchors, seed, a.step)?;
    emit(&report.to_text())?;
    let worst = report.max_rel_error();
    if !(worst < a.max_error) {
        bail!("max relative error {worst:.3e} is not below {:e}", a.max_error);
    }
    Ok(())
}

pub fn run_toyfit(a: &ToyfitArgs, seed: u64) -> Result<()> {
    let p_floor = match a.p_floor.as_str() {
        "none" => None,
        v => Some(
            v.parse::<f64>()
                .map_err(|_| anyhow!("--p-floor expects a number or 'none', got '{v}'"))?,
        ),
    };
    let problem = realizable_problem(a.anchors, a.positives, 1.0, a.problem_seed)?;
    let cfg = ToyConfig {
        steps: a.steps,
        lr: a.lr,
        lr_p: a.lr_p,
        lr_final_fraction: a.lr_final_fraction,
        p_floor,
        seed,
        ..ToyConfig::default()
    };
    let loss_cfg = LossConfig {
        alpha: a.alpha,
        beta: a.beta,
        ..LossConfig::default()
    };
    let trace = toy_descent(&problem, &loss_cfg, &cfg)?;
    if let Some(path) = &a.trace {
        let mut out = String::from("step,loss,p_front,p_top,p_side\n");
        for (k, (l, p)) in trace.losses.iter().zip(&trace.p_history).enumerate() {
            writeln!(out, "{k},{l:.10e},{:.6},{:.6},{:.6}", p[0], p[1], p[2])?;
        }
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    }
    let mut out = String::new();
    writeln!(out, "steps {}", cfg.steps)?;
    writeln!(out, "initial loss {:.6}", trace.initial_loss())?;
    writeln!(out, "final loss {:.6e}", trace.final_loss())?;
    writeln!(out, "loss ratio {:.3e}", trace.final_loss() / trace.initial_loss())?;
    writeln!(out, "max consistency residual {:.3e}", trace.max_consistency_residual)?;
    writeln!(
        out,
        "final p (front, top, side) {:.4} {:.4} {:.4}",
        trace.final_p[0], trace.final_p[1], trace.final_p[2]
    )?;
    emit(&out)
}

pub fn run_stats(a: &StatsArgs) -> Result<()> {
    let annotations = read_annotations(&a.annotations)?;
    let outcomes: Vec<SwapOutcome> = match &a.outcomes {
        Some(p) => read_records(p)?,
        None => Vec::new(),
    };
    let stats = dataset_stats(&annotations, &outcomes);
    emit(&format!("{}\n", serde_json::to_string_pretty(&stats)?))
}
