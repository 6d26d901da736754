//! Anchor targets and the multi-task detection + gaze loss with analytic
//! gradients.
//!
//! Per-anchor terms are evaluated in parallel and summed in anchor order, so
//! results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_raw, project_raw_jacobian, Plane};

/// Probability clipping for the classification cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;
/// Transition point of the smooth-L1 loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

pub const LANDMARK_POINTS: usize = 5;

/// Axis-aligned box `[x0, y0, x1, y1]` in pixels.
pub type BoxXyxy = [f64; 4];

pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &BoxXyxy| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub stride: usize,
}

impl Anchor {
    pub fn bbox(&self) -> BoxXyxy {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }
}

/// Pyramid strides and the square anchor sizes used at each.
pub const PYRAMID: [(usize, [f64; 2]); 3] = [(8, [16.0, 32.0]), (16, [64.0, 128.0]), (32, [256.0, 512.0])];

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn new(anchors: Vec<Anchor>) -> Result<Self> {
        if anchors
            .iter()
            .any(|a| !(a.w > 0.0 && a.h > 0.0 && a.cx.is_finite() && a.cy.is_finite()))
        {
            return Err(Error::invalid("anchors need finite centres and positive sizes"));
        }
        Ok(Self { anchors })
    }

    /// Anchors centred on every cell of each pyramid level.
    pub fn for_image(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be >= 1"));
        }
        let mut anchors = Vec::new();
        for (stride, sizes) in PYRAMID {
            let (cols, rows) = (width.div_ceil(stride), height.div_ceil(stride));
            for j in 0..rows {
                for i in 0..cols {
                    for s in sizes {
                        anchors.push(Anchor {
                            cx: (i as f64 + 0.5) * stride as f64,
                            cy: (j as f64 + 0.5) * stride as f64,
                            w: s,
                            h: s,
                            stride,
                        });
                    }
                }
            }
        }
        Self::new(anchors)
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// A ground-truth face for target assignment. Gaze is (pitch, yaw) radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtFace {
    pub bbox: BoxXyxy,
    pub landmarks: [[f64; 2]; LANDMARK_POINTS],
    pub gaze: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignored,
}

/// Starred targets for one anchor. Regression fields are meaningful only for
/// positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    pub bbox: [f64; 4],
    pub landmarks: [f64; 2 * LANDMARK_POINTS],
    pub gaze: [f64; 2],
}

impl AnchorTarget {
    pub fn negative() -> Self {
        Self {
            label: AnchorLabel::Negative,
            bbox: [0.0; 4],
            landmarks: [0.0; 2 * LANDMARK_POINTS],
            gaze: [0.0; 2],
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label == AnchorLabel::Positive
    }

    /// `y_p*`: 1 for positives, 0 otherwise.
    pub fn y_p(&self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

/// Centre/size box offsets and anchor-relative landmark offsets.
pub fn encode_targets(anchor: &Anchor, face: &GtFace) -> ([f64; 4], [f64; 2 * LANDMARK_POINTS]) {
    let b = face.bbox;
    let (gw, gh) = (b[2] - b[0], b[3] - b[1]);
    let (gx, gy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
    let bbox = [
        (gx - anchor.cx) / anchor.w,
        (gy - anchor.cy) / anchor.h,
        (gw / anchor.w).ln(),
        (gh / anchor.h).ln(),
    ];
    let mut lmk = [0.0; 2 * LANDMARK_POINTS];
    for (k, p) in face.landmarks.iter().enumerate() {
        lmk[2 * k] = (p[0] - anchor.cx) / anchor.w;
        lmk[2 * k + 1] = (p[1] - anchor.cy) / anchor.h;
    }
    (bbox, lmk)
}

/// IoU-based assignment: positive at `iou >= iou_pos` or as a face's best
/// overlapping anchor, negative below `iou_neg`, ignored in between.
pub fn assign_anchors(faces: &[GtFace], anchors: &AnchorSet, iou_pos: f64, iou_neg: f64) -> Result<Vec<AnchorTarget>> {
    if !(0.0 <= iou_neg && iou_neg <= iou_pos && iou_pos <= 1.0) {
        return Err(Error::invalid(format!(
            "need 0 <= iou_neg <= iou_pos <= 1, got {iou_neg} and {iou_pos}"
        )));
    }
    for f in faces {
        let b = f.bbox;
        if !(b.iter().all(|v| v.is_finite()) && b[2] > b[0] && b[3] > b[1]) {
            return Err(Error::invalid(format!("degenerate face box {b:?}")));
        }
    }
    let anchors = anchors.anchors();
    // best face (index, iou) per anchor, ties to the lower index
    let best_face: Vec<Option<(usize, f64)>> = anchors
        .par_iter()
        .map(|a| {
            let ab = a.bbox();
            faces.iter().enumerate().map(|(k, f)| (k, iou(&ab, &f.bbox))).fold(
                None,
                |best: Option<(usize, f64)>, (k, v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((k, v)),
                },
            )
        })
        .collect();
    let mut owner: Vec<Option<usize>> = best_face
        .iter()
        .map(|b| b.and_then(|(k, v)| (v >= iou_pos).then_some(k)))
        .collect();
    for (k, f) in faces.iter().enumerate() {
        let best = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (i, iou(&a.bbox(), &f.bbox)))
            .fold((usize::MAX, 0.0), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        if best.0 != usize::MAX {
            owner[best.0] = Some(k);
        }
    }
    Ok(anchors
        .iter()
        .zip(owner)
        .zip(&best_face)
        .map(|((a, own), best)| match own {
            Some(k) => {
                let (bbox, landmarks) = encode_targets(a, &faces[k]);
                AnchorTarget {
                    label: AnchorLabel::Positive,
                    bbox,
                    landmarks,
                    gaze: faces[k].gaze,
                }
            }
            None => {
                let max_iou = best.map_or(0.0, |(_, v)| v);
                AnchorTarget {
                    label: if max_iou < iou_neg {
                        AnchorLabel::Negative
                    } else {
                        AnchorLabel::Ignored
                    },
                    ..AnchorTarget::negative()
                }
            }
        })
        .collect())
}

/// Network outputs for one anchor. The same layout holds gradients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AnchorPrediction {
    /// Face probability `y_p`.
    pub prob: f64,
    pub bbox: [f64; 4],
    pub landmarks: [f64; 2 * LANDMARK_POINTS],
    /// `y_g` as (pitch, yaw) radians.
    pub gaze: [f64; 2],
    /// `y_F`, `y_T`, `y_S`, indexed by [`Plane::index`].
    pub proj: [[f64; 2]; 3],
}

impl AnchorPrediction {
    fn add_scaled(&mut self, other: &AnchorPrediction, k: f64) {
        self.prob += k * other.prob;
        for (a, b) in self.bbox.iter_mut().zip(&other.bbox) {
            *a += k * b;
        }
        for (a, b) in self.landmarks.iter_mut().zip(&other.landmarks) {
            *a += k * b;
        }
        for (a, b) in self.gaze.iter_mut().zip(&other.gaze) {
            *a += k * b;
        }
        for (pa, pb) in self.proj.iter_mut().zip(&other.proj) {
            for (a, b) in pa.iter_mut().zip(pb) {
                *a += k * b;
            }
        }
    }
}

/// Per-plane log-variance weights `p_F`, `p_T`, `p_S`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProjectionWeights(pub [f64; 3]);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1_face: f64,
    pub lambda2_face: f64,
    pub lambda1_gaze: f64,
    pub lambda2_gaze: f64,
    pub lambda3_gaze: f64,
    /// Projection radius in loss space.
    pub radius: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda1_face: 1.0,
            lambda2_face: 1.0,
            lambda1_gaze: 1.0,
            lambda2_gaze: 1.0,
            lambda3_gaze: 1.0,
            radius: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.alpha,
            self.beta,
            self.lambda1_face,
            self.lambda2_face,
            self.lambda1_gaze,
            self.lambda2_gaze,
            self.lambda3_gaze,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::invalid("loss radius must be > 0"));
        }
        Ok(())
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        0.5 * x * x / SMOOTH_L1_BETA
    } else {
        x.abs() - 0.5 * SMOOTH_L1_BETA
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        sign(x)
    }
}

/// `sign(0) = 0`, the subgradient used at L1 kinks.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clipped binary cross-entropy and its derivative in `p`.
pub fn bce(p: f64, y: f64) -> (f64, f64) {
    let c = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    let value = -(y * c.ln() + (1.0 - y) * (1.0 - c).ln());
    let grad = if p > BCE_EPSILON && p < 1.0 - BCE_EPSILON {
        -y / c + (1.0 - y) / (1.0 - c)
    } else {
        0.0
    };
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FaceTerms {
    pub class: f64,
    pub bbox: f64,
    pub landmark: f64,
}

impl FaceTerms {
    pub fn total(&self) -> f64 {
        self.class + self.bbox + self.landmark
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct GazeTerms {
    /// `lambda1 * L_self`.
    pub consistency: f64,
    /// `lambda2 * |y_g - y_g*|`.
    pub angles: f64,
    /// `lambda3 * sum |y_tau - Pi_tau(y_g*)|`.
    pub projections: f64,
}

impl GazeTerms {
    pub fn total(&self) -> f64 {
        self.consistency + self.angles + self.projections
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub anchors: Vec<AnchorPrediction>,
    pub p: [f64; 3],
}

impl Gradient {
    fn zeros(n: usize) -> Self {
        Self {
            anchors: vec![AnchorPrediction::default(); n],
            p: [0.0; 3],
        }
    }
}

fn check_sets(pred: &[AnchorPrediction], target: &[AnchorTarget]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    for (i, a) in pred.iter().enumerate() {
        let finite = a
            .bbox
            .iter()
            .chain(&a.landmarks)
            .chain(&a.gaze)
            .chain(a.proj.iter().flatten())
            .all(|v| v.is_finite());
        if !finite || !(0.0..=1.0).contains(&a.prob) {
            return Err(Error::invalid(format!(
                "anchor {i}: probability outside [0, 1] or non-finite output"
            )));
        }
    }
    Ok(())
}

/// Detection loss: cross-entropy averaged over non-ignored anchors plus
/// smooth-L1 box and landmark terms averaged over positives.
pub fn loss_face(
    pred: &[AnchorPrediction],
    target: &[AnchorTarget],
    cfg: &LossConfig,
) -> Result<(FaceTerms, Gradient)> {
    check_sets(pred, target)?;
    cfg.validate()?;
    let n_class = target.iter().filter(|t| t.label != AnchorLabel::Ignored).count();
    let n_pos = target.iter().filter(|t| t.is_positive()).count();
    let class_scale = if n_class > 0 { 1.0 / n_class as f64 } else { 0.0 };
    let reg_scale = if n_pos > 0 { 1.0 / n_pos as f64 } else { 0.0 };

    let per_anchor: Vec<(FaceTerms, AnchorPrediction)> = pred
        .par_iter()
        .zip(target.par_iter())
        .map(|(a, t)| {
            let mut terms = FaceTerms::default();
            let mut g = AnchorPrediction::default();
            if t.label == AnchorLabel::Ignored {
                return (terms, g);
            }
            let (v, d) = bce(a.prob, t.y_p());
            terms.class = class_scale * v;
            g.prob = class_scale * d;
            let gate = t.y_p() * reg_scale;
            if gate == 0.0 {
                return (terms, g);
            }
            for k in 0..4 {
                let e = a.bbox[k] - t.bbox[k];
                terms.bbox += cfg.lambda1_face * gate * smooth_l1(e);
                g.bbox[k] = cfg.lambda1_face * gate * smooth_l1_grad(e);
            }
            for k in 0..2 * LANDMARK_POINTS {
                let e = a.landmarks[k] - t.landmarks[k];
                terms.landmark += cfg.lambda2_face * gate * smooth_l1(e);
                g.landmarks[k] = cfg.lambda2_face * gate * smooth_l1_grad(e);
            }
            (terms, g)
        })
        .collect();

    let mut terms = FaceTerms::default();
    let mut grad = Gradient::zeros(pred.len());
    for (i, (t, g)) in per_anchor.into_iter().enumerate() {
        terms.class += t.class;
        terms.bbox += t.bbox;
        terms.landmark += t.landmark;
        grad.anchors[i] = g;
    }
    Ok((terms, grad))
}

/// Projection-consistency loss over a set of anchors:
/// `sum_tau mean_i |y_tau - Pi_tau(y_g)|_1 * exp(-p_tau) + p_tau`.
/// Only the gaze and projection fields of the inputs are read.
pub fn loss_self(pred: &[AnchorPrediction], p: &ProjectionWeights, radius: f64) -> (f64, Gradient) {
    let n = pred.len();
    let mut grad = Gradient::zeros(n);
    if n == 0 {
        return (0.0, grad);
    }
    let inv_n = 1.0 / n as f64;
    let weights = p.0.map(|v| (-v).exp());
    let per_anchor: Vec<([f64; 3], AnchorPrediction)> = pred
        .par_iter()
        .map(|a| {
            let mut s = [0.0; 3];
            let mut g = AnchorPrediction::default();
            for plane in Plane::ALL {
                let t = plane.index();
                let proj = project_raw(plane, a.gaze[0], a.gaze[1], radius);
                let jac = project_raw_jacobian(plane, a.gaze[0], a.gaze[1], radius);
                for k in 0..2 {
                    let e = a.proj[t][k] - proj[k];
                    s[t] += e.abs();
                    let d = weights[t] * inv_n * sign(e);
                    g.proj[t][k] = d;
                    g.gaze[0] -= d * jac[k][0];
                    g.gaze[1] -= d * jac[k][1];
                }
            }
            (s, g)
        })
        .collect();
    let mut s_mean = [0.0; 3];
    for (i, (s, g)) in per_anchor.into_iter().enumerate() {
        for t in 0..3 {
            s_mean[t] += s[t] * inv_n;
        }
        grad.anchors[i] = g;
    }
    let mut value = 0.0;
    for t in 0..3 {
        value += s_mean[t] * weights[t] + p.0[t];
        grad.p[t] = 1.0 - s_mean[t] * weights[t];
    }
    (value, grad)
}

/// Mean per-plane residual `s_tau` entering [`loss_self`].
pub fn self_residuals(pred: &[AnchorPrediction], radius: f64) -> [f64; 3] {
    let mut s = [0.0; 3];
    if pred.is_empty() {
        return s;
    }
    for a in pred {
        for plane in Plane::ALL {
            let proj = project_raw(plane, a.gaze[0], a.gaze[1], radius);
            let t = plane.index();
            s[t] += (a.proj[t][0] - proj[0]).abs() + (a.proj[t][1] - proj[1]).abs();
        }
    }
    s.map(|v| v / pred.len() as f64)
}

/// Gaze loss over positive anchors. With no positives it is zero and so is
/// its gradient, including the one for `p`.
pub fn loss_gaze(
    pred: &[AnchorPrediction],
    target: &[AnchorTarget],
    p: &ProjectionWeights,
    cfg: &LossConfig,
) -> Result<(GazeTerms, Gradient)> {
    check_sets(pred, target)?;
    cfg.validate()?;
    let positives: Vec<usize> = (0..target.len()).filter(|&i| target[i].is_positive()).collect();
    let mut grad = Gradient::zeros(pred.len());
    if positives.is_empty() {
        return Ok((GazeTerms::default(), grad));
    }
    let inv_n = 1.0 / positives.len() as f64;
    let r = cfg.radius;

    let subset: Vec<AnchorPrediction> = positives.iter().map(|&i| pred[i]).collect();
    let (self_value, self_grad) = loss_self(&subset, p, r);

    let per_anchor: Vec<(f64, f64, AnchorPrediction)> = positives
        .par_iter()
        .map(|&i| {
            let (a, t) = (&pred[i], &target[i]);
            let mut g = AnchorPrediction::default();
            let mut angles = 0.0;
            for k in 0..2 {
                let e = a.gaze[k] - t.gaze[k];
                angles += cfg.lambda2_gaze * inv_n * e.abs();
                g.gaze[k] = cfg.lambda2_gaze * inv_n * sign(e);
            }
            let mut projections = 0.0;
            for plane in Plane::ALL {
                let ti = plane.index();
                let star = project_raw(plane, t.gaze[0], t.gaze[1], r);
                for k in 0..2 {
                    let e = a.proj[ti][k] - star[k];
                    projections += cfg.lambda3_gaze * inv_n * e.abs();
                    g.proj[ti][k] = cfg.lambda3_gaze * inv_n * sign(e);
                }
            }
            (angles, projections, g)
        })
        .collect();

    let mut terms = GazeTerms {
        consistency: cfg.lambda1_gaze * self_value,
        ..GazeTerms::default()
    };
    for (k, (&i, (angles, projections, g))) in positives.iter().zip(per_anchor).enumerate() {
        terms.angles += angles;
        terms.projections += projections;
        let slot = &mut grad.anchors[i];
        *slot = g;
        slot.add_scaled(&self_grad.anchors[k], cfg.lambda1_gaze);
    }
    for t in 0..3 {
        grad.p[t] = cfg.lambda1_gaze * self_grad.p[t];
    }
    Ok((terms, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub total: f64,
    /// Unweighted by `alpha`.
    pub face: FaceTerms,
    /// Unweighted by `beta`.
    pub gaze: GazeTerms,
    pub grad: Gradient,
}

/// `alpha * L_face + beta * L_gaze` and its gradient.
pub fn loss_total(
    pred: &[AnchorPrediction],
    target: &[AnchorTarget],
    p: &ProjectionWeights,
    cfg: &LossConfig,
) -> Result<LossEval> {
    let (face, face_grad) = loss_face(pred, target, cfg)?;
    let (gaze, gaze_grad) = loss_gaze(pred, target, p, cfg)?;
    let mut grad = Gradient::zeros(pred.len());
    for (i, g) in grad.anchors.iter_mut().enumerate() {
        g.add_scaled(&face_grad.anchors[i], cfg.alpha);
        g.add_scaled(&gaze_grad.anchors[i], cfg.beta);
    }
    for t in 0..3 {
        grad.p[t] = cfg.beta * gaze_grad.p[t];
    }
    Ok(LossEval {
        total: cfg.alpha * face.total() + cfg.beta * gaze.total(),
        face,
        gaze,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn face_at(b: BoxXyxy, gaze: [f64; 2]) -> GtFace {
        let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
        GtFace {
            bbox: b,
            landmarks: [
                [cx - 5.0, cy - 5.0],
                [cx + 5.0, cy - 5.0],
                [cx, cy],
                [cx - 4.0, cy + 6.0],
                [cx + 4.0, cy + 6.0],
            ],
            gaze,
        }
    }

    fn anchor(b: BoxXyxy) -> Anchor {
        Anchor {
            cx: (b[0] + b[2]) / 2.0,
            cy: (b[1] + b[3]) / 2.0,
            w: b[2] - b[0],
            h: b[3] - b[1],
            stride: 8,
        }
    }

    #[test]
    fn identical_anchor_is_positive_with_zero_box_offsets() {
        let b = [10.0, 20.0, 42.0, 52.0];
        let anchors = AnchorSet::new(vec![anchor(b)]).unwrap();
        let t = assign_anchors(&[face_at(b, [0.1, -0.2])], &anchors, 0.5, 0.3).unwrap();
        assert_eq!(t[0].label, AnchorLabel::Positive);
        assert_eq!(t[0].bbox, [0.0; 4]);
        assert_eq!(t[0].gaze, [0.1, -0.2]);
    }

    #[test]
    fn labels_by_overlap() {
        let face = [0.0, 0.0, 10.0, 10.0];
        // [0,0,10,4] lies inside the face: IoU = 40 / 100 = 0.4
        let mid = [0.0, 0.0, 10.0, 4.0];
        let far = [100.0, 100.0, 110.0, 110.0];
        assert_abs_diff_eq!(iou(&face, &mid), 0.4, epsilon = 1e-15);
        let anchors = AnchorSet::new(vec![anchor(face), anchor(mid), anchor(far)]).unwrap();
        let t = assign_anchors(&[face_at(face, [0.0, 0.0])], &anchors, 0.5, 0.3).unwrap();
        let labels: Vec<_> = t.iter().map(|t| t.label).collect();
        assert_eq!(
            labels,
            vec![AnchorLabel::Positive, AnchorLabel::Ignored, AnchorLabel::Negative]
        );
    }

    #[test]
    fn best_anchor_forced_positive() {
        let face = [0.0, 0.0, 10.0, 10.0];
        let weak = [0.0, 0.0, 10.0, 2.0];
        let anchors = AnchorSet::new(vec![anchor(weak)]).unwrap();
        let t = assign_anchors(&[face_at(face, [0.0, 0.0])], &anchors, 0.5, 0.3).unwrap();
        assert_eq!(t[0].label, AnchorLabel::Positive);
    }

    #[test]
    fn no_faces_all_negative() {
        let anchors = AnchorSet::for_image(64, 48).unwrap();
        let t = assign_anchors(&[], &anchors, 0.5, 0.3).unwrap();
        assert!(t.iter().all(|t| t.label == AnchorLabel::Negative));
        // 8x6 cells at stride 8, 4x3 at 16, 2x2 at 32, two sizes each
        assert_eq!(anchors.len(), 2 * (48 + 12 + 4));
    }

    fn perfect(t: &AnchorTarget, r: f64) -> AnchorPrediction {
        let mut a = AnchorPrediction {
            prob: t.y_p(),
            bbox: t.bbox,
            landmarks: t.landmarks,
            gaze: t.gaze,
            proj: [[0.0; 2]; 3],
        };
        for plane in Plane::ALL {
            a.proj[plane.index()] = project_raw(plane, t.gaze[0], t.gaze[1], r);
        }
        a
    }

    #[test]
    fn perfect_predictions() {
        let pos = AnchorTarget {
            label: AnchorLabel::Positive,
            bbox: [0.1, -0.2, 0.3, 0.0],
            landmarks: [0.05; 10],
            gaze: [0.2, -0.4],
        };
        let targets = [pos, AnchorTarget::negative()];
        let cfg = LossConfig::default();
        let pred: Vec<_> = targets.iter().map(|t| perfect(t, cfg.radius)).collect();
        let (face, _) = loss_face(&pred, &targets, &cfg).unwrap();
        assert_eq!(face.bbox, 0.0);
        assert_eq!(face.landmark, 0.0);
        assert_abs_diff_eq!(face.class, -(1.0 - BCE_EPSILON).ln(), epsilon = 1e-18);
        let (gaze, _) = loss_gaze(&pred, &targets, &ProjectionWeights::default(), &cfg).unwrap();
        assert_eq!(gaze.total(), 0.0);
    }

    #[test]
    fn negative_anchor_regression_is_gated() {
        let targets = [AnchorTarget::negative()];
        let pred = [AnchorPrediction {
            prob: 0.3,
            bbox: [5.0; 4],
            landmarks: [-3.0; 10],
            ..Default::default()
        }];
        let (face, grad) = loss_face(&pred, &targets, &LossConfig::default()).unwrap();
        assert_eq!(face.bbox + face.landmark, 0.0);
        assert_eq!(grad.anchors[0].bbox, [0.0; 4]);
        assert_eq!(grad.anchors[0].landmarks, [0.0; 10]);
    }

    #[test]
    fn smooth_l1_box_example() {
        let t = AnchorTarget {
            label: AnchorLabel::Positive,
            ..AnchorTarget::negative()
        };
        let pred = [AnchorPrediction {
            prob: 0.5,
            bbox: [0.5; 4],
            ..Default::default()
        }];
        let cfg = LossConfig {
            lambda2_face: 0.0,
            ..LossConfig::default()
        };
        let (face, _) = loss_face(&pred, &[t], &cfg).unwrap();
        assert_eq!(face.bbox, 4.0 * (0.25 / 2.0));
    }

    #[test]
    fn misaligned_sets_rejected() {
        let r = loss_face(&[AnchorPrediction::default()], &[], &LossConfig::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        let bad = [AnchorPrediction {
            prob: 1.5,
            ..Default::default()
        }];
        assert!(loss_face(&bad, &[AnchorTarget::negative()], &LossConfig::default()).is_err());
    }

    #[test]
    fn self_loss_examples() {
        let g = [0.3, -0.5];
        let mut a = AnchorPrediction {
            gaze: g,
            ..Default::default()
        };
        for plane in Plane::ALL {
            a.proj[plane.index()] = project_raw(plane, g[0], g[1], 1.0);
        }
        let (v, _) = loss_self(&[a], &ProjectionWeights::default(), 1.0);
        assert_eq!(v, 0.0);

        // front residual L1-sum e, p_F = 1, other planes exact with p = 0
        let mut b = a;
        b.proj[0][0] += std::f64::consts::E;
        let (v, grad) = loss_self(&[b], &ProjectionWeights([1.0, 0.0, 0.0]), 1.0);
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-15);
        // p_F = ln(e) = 1 is stationary
        assert_abs_diff_eq!(grad.p[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gaze_angle_only_example() {
        let t = AnchorTarget {
            label: AnchorLabel::Positive,
            gaze: [0.2, 0.1],
            ..AnchorTarget::negative()
        };
        let pred = [AnchorPrediction {
            gaze: [0.3, 0.1],
            ..Default::default()
        }];
        let cfg = LossConfig {
            lambda1_gaze: 0.0,
            lambda3_gaze: 0.0,
            ..LossConfig::default()
        };
        let (g, grad) = loss_gaze(&pred, &[t], &ProjectionWeights::default(), &cfg).unwrap();
        assert_abs_diff_eq!(g.total(), 0.1, epsilon = 1e-15);
        assert_eq!(grad.p, [0.0; 3]);
        assert_eq!(grad.anchors[0].gaze, [1.0, 0.0]);
    }

    #[test]
    fn alpha_zero_and_beta_linearity() {
        let t = AnchorTarget {
            label: AnchorLabel::Positive,
            bbox: [0.3; 4],
            landmarks: [0.2; 10],
            gaze: [0.1, 0.2],
        };
        let pred = [AnchorPrediction {
            prob: 0.4,
            bbox: [0.1; 4],
            landmarks: [-0.1; 10],
            gaze: [0.25, -0.3],
            proj: [[0.1, 0.2], [0.9, 0.1], [-0.8, -0.3]],
        }];
        let p = ProjectionWeights([0.2, -0.1, 0.4]);
        let base = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let e1 = loss_total(&pred, &[t], &p, &base).unwrap();
        assert_eq!(e1.grad.anchors[0].prob, 0.0);
        assert_eq!(e1.grad.anchors[0].bbox, [0.0; 4]);
        let e2 = loss_total(&pred, &[t], &p, &LossConfig { beta: 2.0, ..base }).unwrap();
        for k in 0..2 {
            assert_eq!(e2.grad.anchors[0].gaze[k], 2.0 * e1.grad.anchors[0].gaze[k]);
        }
        assert_eq!(e2.grad.p[1], 2.0 * e1.grad.p[1]);
    }
}
