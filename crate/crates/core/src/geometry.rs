//! Oriented boxes, point membership, 3D IoU and one-pass-evaluation metrics.
//!
//! Box convention: in the box frame the `w` extent lies along x, `l` along
//! y and `h` along z. The yaw rotates the box frame counter-clockwise about
//! the up (z) axis.

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box size must be positive and finite, got {0:?}")]
    InvalidSize([f64; 3]),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("metric series is empty")]
    EmptySeries,
    #[error("metric series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("metric input out of range: {0}")]
    OutOfRange(String),
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box7 {
    pub center: [f64; 3],
    pub yaw: f64,
    /// `(w, l, h)`
    pub size: [f64; 3],
}

impl Box7 {
    pub fn new(center: [f64; 3], yaw: f64, size: [f64; 3]) -> Result<Self, GeometryError> {
        if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(GeometryError::InvalidSize(size));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(GeometryError::NonFinite("Box7"));
        }
        Ok(Self {
            center,
            yaw: normalize_angle(yaw),
            size,
        })
    }

    /// World point expressed in the box frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Box-frame point expressed in world coordinates.
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * q[0] - s * q[1] + self.center[0],
            s * q[0] + c * q[1] + self.center[1],
            q[2] + self.center[2],
        ]
    }

    /// Closed-box membership.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        (0..3).all(|i| q[i].abs() <= 0.5 * self.size[i])
    }

    /// Footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (hw, hl) = (0.5 * self.size[0], 0.5 * self.size[1]);
        let local = [[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]];
        local.map(|[x, y]| {
            let w = self.to_world([x, y, 0.0]);
            [w[0], w[1]]
        })
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// Re-expresses this box in the frame of `reference`.
    pub fn relative_to(&self, reference: &Box7) -> Box7 {
        Box7 {
            center: reference.to_local(self.center),
            yaw: normalize_angle(self.yaw - reference.yaw),
            size: self.size,
        }
    }

    /// Inverse of [`Box7::relative_to`].
    pub fn from_relative(&self, reference: &Box7) -> Box7 {
        Box7 {
            center: reference.to_world(self.center),
            yaw: normalize_angle(self.yaw + reference.yaw),
            size: self.size,
        }
    }

    pub fn center_distance(&self, other: &Box7) -> f64 {
        dist3(self.center, other.center)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Motion4 {
    pub translation: [f64; 3],
    pub yaw_delta: f64,
}

impl Motion4 {
    pub fn new(translation: [f64; 3], yaw_delta: f64) -> Result<Self, GeometryError> {
        if translation.iter().any(|t| !t.is_finite()) || !yaw_delta.is_finite() {
            return Err(GeometryError::NonFinite("Motion4"));
        }
        Ok(Self {
            translation,
            yaw_delta,
        })
    }

    pub fn inverse(&self) -> Self {
        Self {
            translation: self.translation.map(|t| -t),
            yaw_delta: -self.yaw_delta,
        }
    }
}

/// Translates the center and rotates the heading; the size is kept.
pub fn apply_motion(b: &Box7, m: &Motion4) -> Box7 {
    Box7 {
        center: [
            b.center[0] + m.translation[0],
            b.center[1] + m.translation[1],
            b.center[2] + m.translation[2],
        ],
        yaw: normalize_angle(b.yaw + m.yaw_delta),
        size: b.size,
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("PointCloud"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn points_in_box(pc: &PointCloud, b: &Box7) -> Vec<u8> {
    pc.points.iter().map(|&p| u8::from(b.contains(p))).collect()
}

pub fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clipping of `subject` by a convex counter-clockwise `clip`.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross2(a, b, cur), cross2(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    output.push(intersect(prev, cur, dp, dc));
                }
                output.push(cur);
            } else if dp >= 0.0 {
                output.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    0.5 * twice.abs()
}

/// Exact yaw-aware 3D IoU.
pub fn iou3d(a: &Box7, b: &Box7) -> f64 {
    let z_lo = (a.center[2] - 0.5 * a.size[2]).max(b.center[2] - 0.5 * b.size[2]);
    let z_hi = (a.center[2] + 0.5 * a.size[2]).min(b.center[2] + 0.5 * b.size[2]);
    let dz = z_hi - z_lo;
    if dz <= 0.0 {
        return 0.0;
    }
    let area = polygon_area(&clip_polygon(&a.footprint(), &b.footprint()));
    let inter = area * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub const CURVE_SAMPLES: usize = 101;
pub const MAX_CENTER_THRESHOLD: f64 = 2.0;

pub fn success_thresholds() -> impl Iterator<Item = f64> {
    (0..CURVE_SAMPLES).map(|k| k as f64 / 100.0)
}

pub fn precision_thresholds() -> impl Iterator<Item = f64> {
    (0..CURVE_SAMPLES).map(|k| MAX_CENTER_THRESHOLD * k as f64 / 100.0)
}

/// Overlaps at or above this count as complete and clear every threshold,
/// including the top one that a strict comparison could never pass.
pub const SATURATED_IOU: f64 = 1.0 - 1e-9;

/// Fraction of frames with IoU strictly above each threshold.
pub fn success_curve(ious: &[f64]) -> Vec<(f64, f64)> {
    let n = ious.len() as f64;
    success_thresholds()
        .map(|t| (t, ious.iter().filter(|&&v| v > t || v >= SATURATED_IOU).count() as f64 / n))
        .collect()
}

/// Fraction of frames with center error at most each threshold.
pub fn precision_curve(errors: &[f64]) -> Vec<(f64, f64)> {
    let n = errors.len() as f64;
    precision_thresholds()
        .map(|t| (t, errors.iter().filter(|&&e| e <= t).count() as f64 / n))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub success: f64,
    pub precision: f64,
}

/// Success and Precision AUCs in `[0, 100]`.
pub fn success_precision(ious: &[f64], center_errors: &[f64]) -> Result<Metrics, GeometryError> {
    if ious.is_empty() || center_errors.is_empty() {
        return Err(GeometryError::EmptySeries);
    }
    if ious.len() != center_errors.len() {
        return Err(GeometryError::LengthMismatch(ious.len(), center_errors.len()));
    }
    if let Some(v) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(GeometryError::OutOfRange(format!("iou {v}")));
    }
    if let Some(e) = center_errors.iter().find(|e| !(**e >= 0.0)) {
        return Err(GeometryError::OutOfRange(format!("center error {e}")));
    }
    let auc = |curve: Vec<(f64, f64)>| 100.0 * curve.iter().map(|c| c.1).sum::<f64>() / CURVE_SAMPLES as f64;
    Ok(Metrics {
        success: auc(success_curve(ious)),
        precision: auc(precision_curve(center_errors)),
    })
}
