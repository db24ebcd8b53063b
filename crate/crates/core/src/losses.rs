//! Supervision terms and their weighted total.

use serde::{Deserialize, Serialize};

use crate::geometry::normalize_angle;
use crate::tensor::{Graph, Result, Tensor, Var};
use crate::transformer::LayerState;
use crate::xrpn::ProposalVars;

/// Probability clamp used by the mask cross-entropy.
pub const CE_CLAMP: f64 = 1e-7;
/// Proposals whose center is closer than this to the target are positives.
pub const POSITIVE_RADIUS: f64 = 0.3;
/// Proposals farther than this are negatives; the band between is ignored.
pub const NEGATIVE_RADIUS: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rigidity {
    Rigid,
    NonRigid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gamma: [f64; 3],
    pub rigidity: Rigidity,
    pub huber_delta: f64,
}

impl LossWeights {
    pub fn preset(rigidity: Rigidity) -> Self {
        let gamma = match rigidity {
            Rigidity::Rigid => [0.2, 1.0, 1.5],
            Rigidity::NonRigid => [0.2, 10.0, 1.0],
        };
        Self {
            gamma,
            rigidity,
            huber_delta: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub rigidity: Rigidity,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub gamma3: Option<f64>,
    pub huber_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rigidity: Rigidity::NonRigid,
            gamma1: None,
            gamma2: None,
            gamma3: None,
            huber_delta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        let mut w = LossWeights::preset(self.rigidity);
        for (slot, over) in w.gamma.iter_mut().zip([self.gamma1, self.gamma2, self.gamma3]) {
            if let Some(v) = over {
                *slot = v;
            }
        }
        w.huber_delta = self.huber_delta;
        w
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let w = self.weights();
        if w.gamma.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(format!("loss weights must be finite and nonnegative, got {:?}", w.gamma));
        }
        if !(self.huber_delta > 0.0) {
            return Err(format!("loss.huber_delta must be positive, got {}", self.huber_delta));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of predicted targetness against 0/1 labels.
pub fn mask_ce(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var> {
    g.bce(pred, target, CE_CLAMP)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterMode {
    L2,
    Huber,
}

impl From<Rigidity> for CenterMode {
    fn from(r: Rigidity) -> Self {
        match r {
            Rigidity::Rigid => CenterMode::Huber,
            Rigidity::NonRigid => CenterMode::L2,
        }
    }
}

/// Supervised-term value plus whether the supervision set was empty.
#[derive(Clone, Copy, Debug)]
pub struct Term {
    pub value: Var,
    pub empty: bool,
}

/// Mean over supervised rows of the per-row residual penalty (squared norm,
/// or the sum of elementwise Huber terms). Each row has its own target.
pub fn center_loss_rows(
    g: &mut Graph,
    pred: Var,
    targets: &[[f64; 3]],
    inside: &[bool],
    mode: CenterMode,
    delta: f64,
) -> Result<Term> {
    let idx: Vec<usize> = inside.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Ok(Term {
            value: g.constant(Tensor::scalar(0.0)),
            empty: true,
        });
    }
    let sel = g.gather_rows(pred, &idx)?;
    let tgt: Vec<f64> = idx.iter().flat_map(|&i| targets[i]).collect();
    let tgt = g.constant(Tensor::new(&[idx.len(), 3], tgt)?);
    let res = g.sub(sel, tgt)?;
    let pen = match mode {
        CenterMode::L2 => g.square(res)?,
        CenterMode::Huber => g.huber(res, delta)?,
    };
    let s = g.sum(pen)?;
    Ok(Term {
        value: g.scale(s, 1.0 / idx.len() as f64)?,
        empty: false,
    })
}

/// [`center_loss_rows`] with one shared ground-truth center.
pub fn center_loss(
    g: &mut Graph,
    pred: Var,
    gt_center: [f64; 3],
    inside: &[bool],
    mode: CenterMode,
    delta: f64,
) -> Result<Term> {
    let targets = vec![gt_center; inside.len()];
    center_loss_rows(g, pred, &targets, inside, mode, delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

pub fn assign_label(distance: f64) -> Label {
    if distance < POSITIVE_RADIUS {
        Label::Positive
    } else if distance > NEGATIVE_RADIUS {
        Label::Negative
    } else {
        Label::Ignore
    }
}

pub fn assign_labels(centers: &[[f64; 3]], gt_center: [f64; 3]) -> Vec<Label> {
    centers
        .iter()
        .map(|c| assign_label(crate::geometry::dist3(*c, gt_center)))
        .collect()
}

/// Weighted cross-entropy on proposal logits; ignored proposals get zero weight.
pub fn score_loss(g: &mut Graph, scores: Var, labels: &[Label]) -> Result<Term> {
    let target: Vec<f64> = labels.iter().map(|l| f64::from(*l == Label::Positive)).collect();
    let weight: Vec<f64> = labels.iter().map(|l| f64::from(*l != Label::Ignore)).collect();
    let empty = weight.iter().all(|&w| w == 0.0);
    Ok(Term {
        value: g.bce_logits(scores, &target, &weight)?,
        empty,
    })
}

/// Mean Huber over positive proposals of the (center, wrapped yaw) residuals.
pub fn box_loss(
    g: &mut Graph,
    proposals: &ProposalVars,
    labels: &[Label],
    gt_center: [f64; 3],
    gt_yaw_delta: f64,
    delta: f64,
) -> Result<Term> {
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == Label::Positive)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Ok(Term {
            value: g.constant(Tensor::scalar(0.0)),
            empty: true,
        });
    }
    let c = g.gather_rows(proposals.centers, &idx)?;
    let tgt = g.constant(Tensor::new(&[idx.len(), 3], idx.iter().flat_map(|_| gt_center).collect())?);
    let dc = g.sub(c, tgt)?;
    let y = g.gather_rows(proposals.yaw, &idx)?;
    // shift each yaw residual by a constant so that it lands in (−π, π]
    let yaw_vals = g.value(y).data().to_vec();
    let shift: Vec<f64> = yaw_vals
        .iter()
        .map(|&v| {
            let r = v - gt_yaw_delta;
            normalize_angle(r) - r - gt_yaw_delta
        })
        .collect();
    let wraps: Vec<i64> = yaw_vals
        .iter()
        .map(|&v| {
            let r = v - gt_yaw_delta;
            ((normalize_angle(r) - r) / std::f64::consts::TAU).round() as i64
        })
        .collect();
    g.note_branch(wraps);
    let shift = g.constant(Tensor::new(&[idx.len(), 1], shift)?);
    let dy = g.add(y, shift)?;
    let res = g.concat_cols(&[dc, dy])?;
    let h = g.huber(res, delta)?;
    Ok(Term {
        value: g.mean(h)?,
        empty: false,
    })
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LossReport {
    pub mask: Vec<f64>,
    pub center: Vec<f64>,
    pub score: f64,
    pub bbox: f64,
    pub total: f64,
    pub empty_center: bool,
    pub empty_box: bool,
}

/// `γ1 Σ L_cm + γ2 Σ L_cc + γ3 L_rm + L_box` on plain values.
pub fn total_loss(report: &LossReport, w: &LossWeights) -> f64 {
    w.gamma[0] * report.mask.iter().sum::<f64>()
        + w.gamma[1] * report.center.iter().sum::<f64>()
        + w.gamma[2] * report.score
        + report.bbox
}

/// Ground truth for one frame pair, expressed in the same frame as the network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    /// Per row: 1 if the point lies in its own frame's ground-truth box.
    pub mask: Vec<f64>,
    /// Per row: the ground-truth center of the row's frame.
    pub centers: Vec<[f64; 3]>,
    pub gt_center: [f64; 3],
    pub gt_yaw_delta: f64,
}

/// Builds every term on the graph and returns the total with its breakdown.
pub fn training_loss(
    g: &mut Graph,
    states: &[LayerState],
    proposals: &ProposalVars,
    targets: &LossTargets,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    let inside: Vec<bool> = targets.mask.iter().map(|&m| m > 0.5).collect();
    let mode = CenterMode::from(w.rigidity);
    let mut report = LossReport::default();
    let mut mask_terms = Vec::new();
    let mut center_terms = Vec::new();
    for s in states {
        let cm = mask_ce(g, s.mask, &targets.mask)?;
        let cc = center_loss_rows(g, s.centers, &targets.centers, &inside, mode, w.huber_delta)?;
        report.mask.push(g.value(cm).item());
        report.center.push(g.value(cc.value).item());
        report.empty_center |= cc.empty;
        mask_terms.push(cm);
        center_terms.push(cc.value);
    }
    let centers: Vec<[f64; 3]> = g
        .value(proposals.centers)
        .data()
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let labels = assign_labels(&centers, targets.gt_center);
    g.note_branch(labels.iter().map(|l| *l as u8).collect::<Vec<_>>());
    let rm = score_loss(g, proposals.scores, &labels)?;
    let bx = box_loss(g, proposals, &labels, targets.gt_center, targets.gt_yaw_delta, w.huber_delta)?;
    report.score = g.value(rm.value).item();
    report.bbox = g.value(bx.value).item();
    report.empty_box = bx.empty;

    let sum_terms = |g: &mut Graph, terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    };
    let cm = sum_terms(g, &mask_terms)?;
    let cc = sum_terms(g, &center_terms)?;
    let a = g.scale(cm, w.gamma[0])?;
    let b = g.scale(cc, w.gamma[1])?;
    let c = g.scale(rm.value, w.gamma[2])?;
    let t = g.add(a, b)?;
    let t = g.add(t, c)?;
    let total = g.add(t, bx.value)?;
    report.total = g.value(total).item();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::huber;

    #[test]
    fn mask_ce_examples() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(&[4, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let l = mask_ce(&mut g, p, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let v = g.value(l).item();
        assert!(v > 0.0 && v < 2e-7, "{v}");

        let half = g.param(Tensor::full(&[3, 1], 0.5));
        let l = mask_ce(&mut g, half, &[1.0, 0.0, 1.0]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let bad = g.param(Tensor::new(&[1, 1], vec![1.0 - 1e-12]).unwrap());
        let l = mask_ce(&mut g, bad, &[0.0]).unwrap();
        let v = g.value(l).item();
        assert!(v.is_finite() && v > 15.0);
        assert!(mask_ce(&mut g, bad, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn center_loss_examples() {
        let mut g = Graph::new();
        let gt = [1.0, 2.0, 3.0];
        let pred = g.param(Tensor::new(&[2, 3], [gt, gt].concat()).unwrap());
        let t = center_loss(&mut g, pred, gt, &[true, true], CenterMode::L2, 1.0).unwrap();
        assert_eq!(g.value(t.value).item(), 0.0);

        let t = center_loss(&mut g, pred, gt, &[false, false], CenterMode::Huber, 1.0).unwrap();
        assert!(t.empty);
        assert_eq!(g.value(t.value).item(), 0.0);

        let off = g.param(Tensor::new(&[2, 3], vec![3.0, 0.0, 0.0, 50.0, 50.0, 50.0]).unwrap());
        let t = center_loss(&mut g, off, [0.0; 3], &[true, false], CenterMode::Huber, 1.0).unwrap();
        assert!((g.value(t.value).item() - 2.5).abs() < 1e-15);
        let t = center_loss(&mut g, off, [0.0; 3], &[true, false], CenterMode::L2, 1.0).unwrap();
        assert!((g.value(t.value).item() - 9.0).abs() < 1e-15);
    }

    #[test]
    fn label_examples() {
        assert_eq!(assign_label(0.2), Label::Positive);
        assert_eq!(assign_label(0.7), Label::Negative);
        assert_eq!(assign_label(0.45), Label::Ignore);
        assert_eq!(assign_label(0.3), Label::Ignore);
        assert_eq!(assign_label(0.6), Label::Ignore);
        let labels = assign_labels(&[[0.2, 0.0, 0.0], [0.0, 0.45, 0.0], [0.0, 0.0, 0.7]], [0.0; 3]);
        assert_eq!(labels, vec![Label::Positive, Label::Ignore, Label::Negative]);
    }

    #[test]
    fn labels_are_scale_consistent() {
        // scaling coordinates and thresholds together: equivalently, the
        // label depends only on distance relative to the thresholds
        for k in 1..200 {
            let d = k as f64 * 0.005;
            for s in [0.5, 2.0, 10.0] {
                let scaled = d * s;
                let l = if scaled < POSITIVE_RADIUS * s {
                    Label::Positive
                } else if scaled > NEGATIVE_RADIUS * s {
                    Label::Negative
                } else {
                    Label::Ignore
                };
                assert_eq!(assign_label(d), l);
            }
        }
    }

    fn proposals(g: &mut Graph, centers: &[[f64; 3]], yaw: &[f64]) -> ProposalVars {
        let n = centers.len();
        ProposalVars {
            centers: g.param(Tensor::new(&[n, 3], centers.concat()).unwrap()),
            yaw: g.param(Tensor::new(&[n, 1], yaw.to_vec()).unwrap()),
            scores: g.param(Tensor::zeros(&[n, 1])),
        }
    }

    #[test]
    fn box_loss_examples() {
        let mut g = Graph::new();
        let gt = [1.0, 1.0, 0.0];
        let p = proposals(&mut g, &[gt, gt], &[0.3, 0.3]);
        let t = box_loss(&mut g, &p, &[Label::Positive, Label::Positive], gt, 0.3, 1.0).unwrap();
        assert_eq!(g.value(t.value).item(), 0.0);

        let t = box_loss(&mut g, &p, &[Label::Negative, Label::Ignore], gt, 0.3, 1.0).unwrap();
        assert!(t.empty);
        assert_eq!(g.value(t.value).item(), 0.0);

        let p = proposals(&mut g, &[[1.1, 1.0, 0.0]], &[0.0]);
        let t = box_loss(&mut g, &p, &[Label::Positive], gt, 0.0, 1.0).unwrap();
        assert!((g.value(t.value).item() - 0.00125).abs() < 1e-15);
    }

    #[test]
    fn box_loss_wraps_yaw() {
        let mut g = Graph::new();
        let p = proposals(&mut g, &[[0.0; 3]], &[3.1]);
        let t = box_loss(&mut g, &p, &[Label::Positive], [0.0; 3], -3.1, 1.0).unwrap();
        let r = 2.0 * std::f64::consts::PI - 6.2;
        assert!((g.value(t.value).item() - 0.5 * r * r / 4.0).abs() < 1e-12);
    }

    #[test]
    fn score_loss_excludes_ignored() {
        let mut g = Graph::new();
        let s = g.param(Tensor::new(&[3, 1], vec![2.0, -1.0, 100.0]).unwrap());
        let t = score_loss(&mut g, s, &[Label::Positive, Label::Negative, Label::Ignore]).unwrap();
        let expect = (crate::tensor::bce_with_logit(2.0, 1.0) + crate::tensor::bce_with_logit(-1.0, 0.0)) / 2.0;
        assert!((g.value(t.value).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn presets_and_total() {
        assert_eq!(LossWeights::preset(Rigidity::Rigid).gamma, [0.2, 1.0, 1.5]);
        assert_eq!(LossWeights::preset(Rigidity::NonRigid).gamma, [0.2, 10.0, 1.0]);
        let w = LossWeights::preset(Rigidity::Rigid);
        let zero = LossReport {
            mask: vec![0.0; 4],
            center: vec![0.0; 4],
            ..Default::default()
        };
        assert_eq!(total_loss(&zero, &w), 0.0);
        let r = LossReport {
            mask: vec![1.0, 2.0],
            center: vec![0.5, 0.5],
            score: 2.0,
            bbox: 0.25,
            ..Default::default()
        };
        assert!((total_loss(&r, &w) - (0.2 * 3.0 + 1.0 + 3.0 + 0.25)).abs() < 1e-15);
        let cfg = LossConfig {
            rigidity: Rigidity::Rigid,
            gamma2: Some(4.0),
            ..Default::default()
        };
        assert_eq!(cfg.weights().gamma, [0.2, 4.0, 1.5]);
    }

    #[test]
    fn huber_bounds() {
        for k in -100..=100 {
            let e = k as f64 * 0.05;
            assert!(huber(e, 1.0) <= 0.5 * e * e + 1e-15);
            if e.abs() <= 1.0 {
                assert_eq!(huber(e, 1.0), 0.5 * e * e);
            }
        }
    }
}
