//! Finite-difference gradient checks and a toy gradient-descent fit of an
//! affine head, used to exercise the loss end to end without a network.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{project_raw, Plane};
use crate::loss::{
    loss_face, loss_gaze, loss_self, loss_total, AnchorLabel, AnchorPrediction, AnchorTarget, Gradient, LossConfig,
    ProjectionWeights, LANDMARK_POINTS, SMOOTH_L1_BETA,
};

/// Parameter blocks in packing order, with their lengths.
pub const BLOCKS: [(&str, usize); 8] = [
    ("prob", 1),
    ("bbox", 4),
    ("landmarks", 2 * LANDMARK_POINTS),
    ("gaze", 2),
    ("proj_front", 2),
    ("proj_top", 2),
    ("proj_side", 2),
    ("p", 3),
];
const PER_ANCHOR: usize = 23;

fn pack_anchor(a: &AnchorPrediction, out: &mut Vec<f64>) {
    out.push(a.prob);
    out.extend_from_slice(&a.bbox);
    out.extend_from_slice(&a.landmarks);
    out.extend_from_slice(&a.gaze);
    for p in &a.proj {
        out.extend_from_slice(p);
    }
}

fn unpack_anchor(v: &[f64]) -> AnchorPrediction {
    let mut a = AnchorPrediction {
        prob: v[0],
        ..Default::default()
    };
    a.bbox.copy_from_slice(&v[1..5]);
    a.landmarks.copy_from_slice(&v[5..15]);
    a.gaze.copy_from_slice(&v[15..17]);
    for t in 0..3 {
        a.proj[t].copy_from_slice(&v[17 + 2 * t..19 + 2 * t]);
    }
    a
}

/// Flattens predictions followed by `p` into one parameter vector.
pub fn pack(pred: &[AnchorPrediction], p: &ProjectionWeights) -> Vec<f64> {
    let mut out = Vec::with_capacity(pred.len() * PER_ANCHOR + 3);
    for a in pred {
        pack_anchor(a, &mut out);
    }
    out.extend_from_slice(&p.0);
    out
}

pub fn unpack(v: &[f64]) -> (Vec<AnchorPrediction>, ProjectionWeights) {
    let n = (v.len() - 3) / PER_ANCHOR;
    let pred = (0..n)
        .map(|i| unpack_anchor(&v[i * PER_ANCHOR..(i + 1) * PER_ANCHOR]))
        .collect();
    let p = ProjectionWeights([v[v.len() - 3], v[v.len() - 2], v[v.len() - 1]]);
    (pred, p)
}

fn pack_gradient(g: &Gradient) -> Vec<f64> {
    pack(&g.anchors, &ProjectionWeights(g.p))
}

/// Block name of a packed parameter index.
fn block_of(index: usize, total: usize) -> &'static str {
    if index >= total - 3 {
        return "p";
    }
    let mut k = index % PER_ANCHOR;
    for (name, len) in &BLOCKS[..7] {
        if k < *len {
            return name;
        }
        k -= len;
    }
    unreachable!("per-anchor layout covers {PER_ANCHOR} slots")
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)`, with a tiny floor so two zeros compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Face,
    SelfConsistency,
    Gaze,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Face,
        LossKind::SelfConsistency,
        LossKind::Gaze,
        LossKind::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Face => "face",
            LossKind::SelfConsistency => "self",
            LossKind::Gaze => "gaze",
            LossKind::Total => "total",
        }
    }
}

/// A loss evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub pred: Vec<AnchorPrediction>,
    pub target: Vec<AnchorTarget>,
    pub p: ProjectionWeights,
    pub cfg: LossConfig,
}

impl Instance {
    pub fn evaluate(&self, kind: LossKind) -> Result<(f64, Gradient)> {
        self.evaluate_at(kind, &self.pred, &self.p)
    }

    fn evaluate_at(&self, kind: LossKind, pred: &[AnchorPrediction], p: &ProjectionWeights) -> Result<(f64, Gradient)> {
        match kind {
            LossKind::Face => loss_face(pred, &self.target, &self.cfg).map(|(t, g)| (t.total(), g)),
            LossKind::Gaze => loss_gaze(pred, &self.target, p, &self.cfg).map(|(t, g)| (t.total(), g)),
            LossKind::Total => loss_total(pred, &self.target, p, &self.cfg).map(|e| (e.total, e.grad)),
            LossKind::SelfConsistency => {
                // over positives, scattered back to full anchor indexing
                let idx: Vec<usize> = (0..pred.len()).filter(|&i| self.target[i].is_positive()).collect();
                let subset: Vec<AnchorPrediction> = idx.iter().map(|&i| pred[i]).collect();
                let (v, g) = loss_self(&subset, p, self.cfg.radius);
                let mut full = Gradient {
                    anchors: vec![AnchorPrediction::default(); pred.len()],
                    p: g.p,
                };
                for (k, &i) in idx.iter().enumerate() {
                    full.anchors[i] = g.anchors[k];
                }
                Ok((v, full))
            }
        }
    }

    /// Distance of the nearest L1 or smooth-L1 kink over all residuals.
    pub fn kink_distance(&self) -> f64 {
        let r = self.cfg.radius;
        let mut d = f64::INFINITY;
        for (a, t) in self.pred.iter().zip(&self.target) {
            if !t.is_positive() {
                continue;
            }
            let smooth = a.bbox.iter().zip(&t.bbox).chain(a.landmarks.iter().zip(&t.landmarks));
            for (x, y) in smooth {
                d = d.min(((x - y).abs() - SMOOTH_L1_BETA).abs());
            }
            for k in 0..2 {
                d = d.min((a.gaze[k] - t.gaze[k]).abs());
            }
            for plane in Plane::ALL {
                let own = project_raw(plane, a.gaze[0], a.gaze[1], r);
                let star = project_raw(plane, t.gaze[0], t.gaze[1], r);
                for k in 0..2 {
                    d = d.min((a.proj[plane.index()][k] - own[k]).abs());
                    d = d.min((a.proj[plane.index()][k] - star[k]).abs());
                }
            }
        }
        d
    }
}

/// Random instance with every residual at least `margin` from a kink and
/// probabilities inside `[0.05, 0.95]`.
pub fn random_instance(rng: &mut impl Rng, n_anchors: usize, margin: f64) -> Instance {
    loop {
        let mut pred = Vec::with_capacity(n_anchors);
        let mut target = Vec::with_capacity(n_anchors);
        for i in 0..n_anchors {
            let label = match (i, rng.random_range(0..3)) {
                (0, _) | (_, 0) => AnchorLabel::Positive,
                (_, 1) => AnchorLabel::Negative,
                _ => AnchorLabel::Ignored,
            };
            let mut t = AnchorTarget {
                label,
                ..AnchorTarget::negative()
            };
            t.bbox = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
            t.landmarks = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
            t.gaze = [rng.random_range(-0.8..0.8), rng.random_range(-1.0..1.0)];
            let g = [
                t.gaze[0] + rng.random_range(-0.3..0.3),
                t.gaze[1] + rng.random_range(-0.3..0.3),
            ];
            let mut a = AnchorPrediction {
                prob: rng.random_range(0.05..0.95),
                bbox: std::array::from_fn(|k| t.bbox[k] + rng.random_range(-2.0..2.0)),
                landmarks: std::array::from_fn(|k| t.landmarks[k] + rng.random_range(-2.0..2.0)),
                gaze: g,
                proj: [[0.0; 2]; 3],
            };
            for plane in Plane::ALL {
                let base = project_raw(plane, g[0], g[1], 1.0);
                a.proj[plane.index()] = [
                    base[0] + rng.random_range(-0.4..0.4),
                    base[1] + rng.random_range(-0.4..0.4),
                ];
            }
            pred.push(a);
            target.push(t);
        }
        let cfg = LossConfig {
            alpha: rng.random_range(0.2..2.0),
            beta: rng.random_range(0.2..2.0),
            lambda1_face: rng.random_range(0.2..2.0),
            lambda2_face: rng.random_range(0.2..2.0),
            lambda1_gaze: rng.random_range(0.2..2.0),
            lambda2_gaze: rng.random_range(0.2..2.0),
            lambda3_gaze: rng.random_range(0.2..2.0),
            radius: 1.0,
        };
        let p = ProjectionWeights(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        let inst = Instance { pred, target, p, cfg };
        if inst.kink_distance() >= margin {
            return inst;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockError {
    pub loss: LossKind,
    pub block: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub step: f64,
    pub rows: Vec<BlockError>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<8} {:<12} {:>8} {:>14}\n", "loss", "block", "checked", "max_rel_err");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:<12} {:>8} {:>14.3e}\n",
                r.loss.name(),
                r.block,
                r.checked,
                r.max_rel_error
            ));
        }
        out.push_str(&format!(
            "instances {}, h = {:e}, overall max relative error {:.3e}\n",
            self.instances,
            self.step,
            self.max_rel_error()
        ));
        out
    }
}

/// Compares analytic gradients with central differences on one instance,
/// folding the results into `rows`.
pub fn check_instance(inst: &Instance, kind: LossKind, h: f64, rows: &mut Vec<BlockError>) -> Result<()> {
    let (_, grad) = inst.evaluate(kind)?;
    let analytic = pack_gradient(&grad);
    let x = pack(&inst.pred, &inst.p);
    let numeric = central_difference(
        |v| {
            let (pred, p) = unpack(v);
            inst.evaluate_at(kind, &pred, &p).map(|(f, _)| f).unwrap_or(f64::NAN)
        },
        &x,
        h,
    );
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let block = block_of(i, x.len());
        let err = relative_error(*a, *n);
        let row = match rows.iter_mut().position(|r| r.loss == kind && r.block == block) {
            Some(k) => &mut rows[k],
            None => {
                rows.push(BlockError {
                    loss: kind,
                    block,
                    max_rel_error: 0.0,
                    checked: 0,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        // NaN must not be hidden by max()
        row.max_rel_error = if err.is_nan() {
            f64::NAN
        } else {
            row.max_rel_error.max(err)
        };
        row.checked += 1;
    }
    Ok(())
}

/// Gradient check of every loss over `instances` random instances.
pub fn gradcheck(instances: usize, n_anchors: usize, seed: u64, h: f64) -> Result<GradcheckReport> {
    if instances == 0 || n_anchors == 0 || !(h > 0.0) {
        return Err(Error::invalid("gradcheck needs instances, anchors and h > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for _ in 0..instances {
        let inst = random_instance(&mut rng, n_anchors, 1e-3);
        for kind in LossKind::ALL {
            check_instance(&inst, kind, h, &mut rows)?;
        }
    }
    Ok(GradcheckReport {
        instances,
        step: h,
        rows,
    })
}

const OUT: usize = PER_ANCHOR;
/// Class logit of the generating head.
const CLASS_LOGIT: f64 = 4.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fixed features and targets for the toy fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyProblem {
    /// One row per anchor.
    pub features: DMatrix<f64>,
    pub targets: Vec<AnchorTarget>,
}

/// Targets generated from a known affine head, so a zero-regression-loss
/// solution exists. Features are the target vectors (class logit
/// +-`CLASS_LOGIT`, offsets, angles and their exact projections), standardized
/// per component and mixed by a random orthogonal matrix; both maps are
/// invertible and affine, so the affine head can represent the targets.
pub fn realizable_problem(n_anchors: usize, n_positive: usize, radius: f64, seed: u64) -> Result<ToyProblem> {
    if n_positive == 0 || n_positive >= n_anchors {
        return Err(Error::invalid("need 1 <= positives < anchors"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = DMatrix::from_fn(OUT, OUT, |_, _| rng.random_range(-1.0..1.0));
    let mixing = gauss.qr().q();
    let mut targets = Vec::with_capacity(n_anchors);
    let mut z = DMatrix::zeros(n_anchors, OUT);
    for i in 0..n_anchors {
        let positive = i < n_positive;
        let t = AnchorTarget {
            label: if positive {
                AnchorLabel::Positive
            } else {
                AnchorLabel::Negative
            },
            bbox: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            landmarks: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            gaze: [rng.random_range(-0.6..0.6), rng.random_range(-0.8..0.8)],
        };
        let mut a = AnchorPrediction {
            prob: if positive { CLASS_LOGIT } else { -CLASS_LOGIT },
            bbox: t.bbox,
            landmarks: t.landmarks,
            gaze: t.gaze,
            proj: [[0.0; 2]; 3],
        };
        for plane in Plane::ALL {
            a.proj[plane.index()] = project_raw(plane, t.gaze[0], t.gaze[1], radius);
        }
        let mut zv = Vec::with_capacity(OUT);
        pack_anchor(&a, &mut zv);
        z.row_mut(i).copy_from_slice(&zv);
        targets.push(t);
    }
    for mut col in z.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let sd = col.norm() / (n_anchors as f64).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
    let features = z * mixing.transpose();
    Ok(ToyProblem { features, targets })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToyConfig {
    pub steps: usize,
    pub lr: f64,
    /// Learning rate for `p`.
    pub lr_p: f64,
    /// Both rates decay geometrically to this fraction of their start by the
    /// last step; 1 keeps them constant. L1 terms need the decay to settle,
    /// since their subgradient does not shrink near the optimum.
    pub lr_final_fraction: f64,
    /// Lower bound on each `p_tau` during descent; `None` leaves it free.
    pub p_floor: Option<f64>,
    /// Standard deviation scale of the initial head weights.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 0.1,
            lr_p: 0.05,
            lr_final_fraction: 1e-3,
            p_floor: Some(0.0),
            init_scale: 0.01,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyTrace {
    /// Loss before each step and after the last one.
    pub losses: Vec<f64>,
    pub p_history: Vec<[f64; 3]>,
    pub final_p: [f64; 3],
    /// Largest `|y_tau - Pi_tau(y_g)|_1` over positive anchors and planes.
    pub max_consistency_residual: f64,
}

impl ToyTrace {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trace is never empty")
    }
}

fn head_outputs(features: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> (DMatrix<f64>, Vec<AnchorPrediction>) {
    let mut raw = features * w.transpose();
    for mut row in raw.row_iter_mut() {
        row += b.transpose();
    }
    let preds = raw
        .row_iter()
        .map(|row| {
            let v: Vec<f64> = row.iter().copied().collect();
            let mut a = unpack_anchor(&v);
            a.prob = sigmoid(v[0]);
            a
        })
        .collect();
    (raw, preds)
}

fn max_consistency(preds: &[AnchorPrediction], targets: &[AnchorTarget], r: f64) -> f64 {
    preds
        .iter()
        .zip(targets)
        .filter(|(_, t)| t.is_positive())
        .flat_map(|(a, _)| {
            Plane::ALL.map(|plane| {
                let q = project_raw(plane, a.gaze[0], a.gaze[1], r);
                let y = a.proj[plane.index()];
                (y[0] - q[0]).abs() + (y[1] - q[1]).abs()
            })
        })
        .fold(0.0, f64::max)
}

/// Full-batch gradient descent of the total loss over an affine head
/// `y = sigmoid_on_class(W x + b)` and the projection weights `p`.
pub fn toy_descent(problem: &ToyProblem, loss_cfg: &LossConfig, cfg: &ToyConfig) -> Result<ToyTrace> {
    if cfg.steps == 0 {
        return Err(Error::invalid("toy descent needs steps >= 1"));
    }
    if !(cfg.lr >= 0.0 && cfg.lr_p >= 0.0 && cfg.lr.is_finite() && cfg.lr_p.is_finite()) {
        return Err(Error::invalid("learning rates must be finite and >= 0"));
    }
    if !(cfg.lr_final_fraction > 0.0 && cfg.lr_final_fraction <= 1.0) {
        return Err(Error::invalid("lr_final_fraction must lie in (0, 1]"));
    }
    loss_cfg.validate()?;
    let n = problem.features.nrows();
    if n != problem.targets.len() {
        return Err(Error::invalid("one target per feature row required"));
    }
    let d = problem.features.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = DMatrix::from_fn(OUT, d, |_, _| cfg.init_scale * rng.random_range(-1.0..1.0));
    let mut b = DVector::zeros(OUT);
    let mut p = ProjectionWeights::default();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut p_history = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let (_, preds) = head_outputs(&problem.features, &w, &b);
        let eval = loss_total(&preds, &problem.targets, &p, loss_cfg)?;
        if !eval.total.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(eval.total);
        p_history.push(p.0);
        if step == cfg.steps {
            return Ok(ToyTrace {
                losses,
                p_history,
                final_p: p.0,
                max_consistency_residual: max_consistency(&preds, &problem.targets, loss_cfg.radius),
            });
        }
        // back through the head: d out_i, then W and b
        let mut g_out = DMatrix::zeros(n, OUT);
        for (i, (a, g)) in preds.iter().zip(&eval.grad.anchors).enumerate() {
            let mut v = Vec::with_capacity(OUT);
            pack_anchor(g, &mut v);
            v[0] *= a.prob * (1.0 - a.prob);
            g_out.row_mut(i).copy_from_slice(&v);
        }
        let g_w = g_out.transpose() * &problem.features;
        let g_b = g_out.row_sum().transpose();
        let decay = cfg.lr_final_fraction.powf(step as f64 / cfg.steps as f64);
        w -= cfg.lr * decay * g_w;
        b -= cfg.lr * decay * g_b;
        for t in 0..3 {
            p.0[t] -= cfg.lr_p * decay * eval.grad.p[t];
            if let Some(floor) = cfg.p_floor {
                p.0[t] = p.0[t].max(floor);
            }
        }
        if w.iter().chain(b.iter()).chain(&p.0).any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step });
        }
    }
    unreachable!("loop returns on its last iteration")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = random_instance(&mut rng, 4, 1e-3);
        let v = pack(&inst.pred, &inst.p);
        let (pred, p) = unpack(&v);
        assert_eq!(pred, inst.pred);
        assert_eq!(p, inst.p);
        assert_eq!(block_of(0, v.len()), "prob");
        assert_eq!(block_of(PER_ANCHOR + 16, v.len()), "gaze");
        assert_eq!(block_of(PER_ANCHOR + 22, v.len()), "proj_side");
        assert_eq!(block_of(v.len() - 1, v.len()), "p");
    }

    #[test]
    fn small_gradcheck_passes() {
        let report = gradcheck(5, 5, 7, 1e-5).unwrap();
        assert!(report.max_rel_error() < 1e-4, "{}", report.to_text());
        assert_eq!(report.rows.len(), 4 * BLOCKS.len());
    }

    #[test]
    fn zero_lr_gives_constant_trace() {
        let problem = realizable_problem(30, 10, 1.0, 1).unwrap();
        let cfg = ToyConfig {
            steps: 5,
            lr: 0.0,
            lr_p: 0.0,
            ..ToyConfig::default()
        };
        let trace = toy_descent(&problem, &LossConfig::default(), &cfg).unwrap();
        assert_eq!(trace.losses.len(), 6);
        assert!(trace.losses.iter().all(|l| *l == trace.losses[0]));
    }

    #[test]
    fn overflowing_lr_reports_divergence() {
        // L1-type terms keep the loss finite for merely large steps, so the
        // step has to overflow the weights outright
        let problem = realizable_problem(30, 10, 1.0, 1).unwrap();
        let cfg = ToyConfig {
            steps: 20,
            lr: 1e307,
            ..ToyConfig::default()
        };
        let r = toy_descent(&problem, &LossConfig::default(), &cfg);
        assert!(
            matches!(r, Err(Error::Diverged { .. })),
            "{:?}",
            r.map(|t| t.final_loss())
        );
    }
}
