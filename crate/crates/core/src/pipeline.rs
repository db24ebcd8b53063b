//! Model assembly, training, frame-by-frame tracking and dataset evaluation.
//!
//! Every frame pair is processed in the canonical frame of the previous box:
//! both clouds are translated by its center and rotated by its heading, so the
//! previous center is the origin there. Predictions are mapped back to world
//! coordinates before they leave this module.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{extract_features, BackboneConfig, BackboneError, BackboneWeights, FeatureSet};
use crate::checkpoint::CheckpointError;
use crate::dropout::{Dropout, Mode};
use crate::geometry::{
    iou3d, normalize_angle, precision_curve, success_curve, success_precision, Box7, GeometryError, Metrics, PointCloud,
};
use crate::losses::{training_loss, LossConfig, LossReport, LossTargets};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::synth::{DataError, Sequence};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::transformer::{transformer_forward, AttentionConfig, LayerState, LayerWeights};
use crate::xrpn::{select_best, xrpn_forward, ProposalSet, Switch, XRpnConfig, XRpnOutput, XRpnWeights};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} cloud is empty")]
    EmptyCloud(&'static str),
    #[error("empty training set")]
    NoPairs,
    #[error("no sequences to evaluate")]
    NoSequences,
    #[error("sequence has {0} frames; tracking needs at least 2")]
    ShortSequence(usize),
    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite {
        what: &'static str,
        step: usize,
        detail: String,
    },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub transformer: AttentionConfig,
    pub xrpn: XRpnConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate().map_err(PipelineError::Config)?;
        self.xrpn.validate().map_err(PipelineError::Config)?;
        let b = &self.backbone;
        if b.k == 0 || b.channels.is_empty() || b.channels.contains(&0) {
            return Err(PipelineError::Config(
                "backbone needs k >= 1 and nonzero channel widths".into(),
            ));
        }
        if b.out_channels() != self.transformer.width {
            return Err(PipelineError::Config(format!(
                "backbone output width {} differs from transformer width {}",
                b.out_channels(),
                self.transformer.width
            )));
        }
        Ok(())
    }
}

/// All trainable tensors plus the handles each stage uses to find its own.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: BackboneWeights,
    pub layers: Vec<LayerWeights>,
    pub xrpn: XRpnWeights,
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let backbone = BackboneWeights::init(&mut init, &cfg.backbone);
        let layers = (0..cfg.transformer.layers)
            .map(|i| LayerWeights::init(&mut init, &format!("layer.{i}"), &cfg.transformer))
            .collect();
        let xrpn = XRpnWeights::init(&mut init, &cfg.transformer, &cfg.xrpn);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            layers,
            xrpn,
        })
    }

    /// Builds the architecture for `cfg` and fills it from named tensors,
    /// which must match the architecture name for name and shape for shape.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::init(cfg, 0)?;
        if tensors.len() != model.store.len() {
            return Err(PipelineError::Mismatch(format!(
                "{} tensors stored, architecture has {}",
                tensors.len(),
                model.store.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            let id = ParamId(i);
            if model.store.name(id) != name || model.store.get(id).shape() != t.shape() {
                return Err(PipelineError::Mismatch(format!(
                    "entry {i}: found '{name}' {:?}, expected '{}' {:?}",
                    t.shape(),
                    model.store.name(id),
                    model.store.get(id).shape()
                )));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(PipelineError::Mismatch(format!("'{name}' holds non-finite values")));
            }
            model.store.set(id, t);
        }
        Ok(model)
    }

    /// Parameters recorded as graph constants.
    pub fn frozen(&self) -> Vec<ParamId> {
        if self.cfg.xrpn.sigma_learnable {
            Vec::new()
        } else {
            vec![self.xrpn.sigma2]
        }
    }

    pub fn sigma2(&self) -> f64 {
        self.store.get(self.xrpn.sigma2).item()
    }
}

/// One frame pair in the canonical frame of the previous box.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput {
    /// Previous box in world coordinates; the canonical frame is its own.
    pub reference: Box7,
    pub prev: Vec<[f64; 3]>,
    pub prev_mask: Vec<f64>,
    pub cur: Vec<[f64; 3]>,
}

impl PairInput {
    /// The previous box expressed in its own frame.
    pub fn canonical_box(&self) -> Box7 {
        Box7 {
            center: [0.0; 3],
            yaw: 0.0,
            size: self.reference.size,
        }
    }
}

/// Targetness of every previous-frame point: 1 inside the box, 0 outside.
pub fn input_mask(prev: &PointCloud, prev_box: &Box7) -> Vec<f64> {
    prev.points.iter().map(|&p| if prev_box.contains(p) { 1.0 } else { 0.0 }).collect()
}

/// Moves a frame pair into the previous box's frame. With `context` off the
/// previous cloud is first cropped to the previous box; nothing else changes.
pub fn prepare_pair(prev: &PointCloud, prev_box: &Box7, cur: &PointCloud, context: Switch) -> Result<PairInput> {
    let mut mask = input_mask(prev, prev_box);
    let mut prev_pts: Vec<[f64; 3]> = prev.points.clone();
    if context == Switch::Off {
        prev_pts = prev_pts.into_iter().zip(&mask).filter(|(_, &m)| m > 0.5).map(|(p, _)| p).collect();
        mask = vec![1.0; prev_pts.len()];
    }
    if prev_pts.is_empty() {
        return Err(PipelineError::EmptyCloud("previous"));
    }
    if cur.is_empty() {
        return Err(PipelineError::EmptyCloud("current"));
    }
    Ok(PairInput {
        reference: *prev_box,
        prev: prev_pts.iter().map(|&p| prev_box.to_local(p)).collect(),
        prev_mask: mask,
        cur: cur.points.iter().map(|&p| prev_box.to_local(p)).collect(),
    })
}

/// Graph handles for one forward pass.
pub struct PairGraph {
    pub features: FeatureSet,
    pub states: Vec<LayerState>,
    pub head: XRpnOutput,
}

pub fn build_pair_graph(g: &mut Graph, p: &Bound, model: &Model, input: &PairInput, drop: &mut Dropout) -> Result<PairGraph> {
    let cfg = &model.cfg;
    let features = extract_features(
        g,
        p,
        &model.backbone,
        &cfg.backbone,
        &input.prev,
        &input.prev_mask,
        &input.cur,
    )?;
    let states = transformer_forward(g, p, &model.layers, &cfg.transformer, &features, drop)?;
    let last = states.last().ok_or_else(|| PipelineError::Config("transformer has no layers".into()))?;
    let head = xrpn_forward(g, p, &model.xrpn, &cfg.xrpn, last, &features, [0.0; 3], drop)?;
    Ok(PairGraph { features, states, head })
}

/// Plain values of one transformer layer, canonical frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    pub mask: Vec<f64>,
    pub centers: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairPrediction {
    /// Proposals in the canonical frame.
    pub proposals: ProposalSet,
    pub layers: Vec<LayerOutput>,
    pub boxed: Box7,
}

fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Inference on one frame pair; the returned box is in world coordinates.
pub fn forward_frame_pair(
    model: &Model,
    prev: &PointCloud,
    prev_box: &Box7,
    cur: &PointCloud,
    context: Switch,
) -> Result<PairPrediction> {
    let input = prepare_pair(prev, prev_box, cur, context)?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, &model.frozen());
    let mut drop = Dropout::inference();
    let pg = build_pair_graph(&mut g, &p, model, &input, &mut drop)?;
    let proposals = ProposalSet::from_graph(&g, &pg.head.proposals);
    let layers = pg
        .states
        .iter()
        .map(|s| LayerOutput {
            mask: g.value(s.mask).data().to_vec(),
            centers: rows3(g.value(s.centers)),
        })
        .collect();
    let local = select_best(&proposals, &input.canonical_box())?;
    Ok(PairPrediction {
        proposals,
        layers,
        boxed: local.from_relative(prev_box),
    })
}

/// Consecutive frames with their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub prev: PointCloud,
    pub prev_box: Box7,
    pub cur: PointCloud,
    pub cur_box: Box7,
}

pub fn pairs_from_sequences(seqs: &[Sequence]) -> Vec<TrainingPair> {
    seqs.iter()
        .flat_map(|s| {
            s.frames.windows(2).map(|w| TrainingPair {
                prev: w[0].cloud.clone(),
                prev_box: w[0].gt,
                cur: w[1].cloud.clone(),
                cur_box: w[1].gt,
            })
        })
        .collect()
}

/// Per-row supervision for the rows kept by the backbone's sampling.
pub fn pair_targets(input: &PairInput, fs: &FeatureSet, cur_box: &Box7) -> LossTargets {
    let cur_local = cur_box.relative_to(&input.reference);
    let mut mask: Vec<f64> = fs.mask[..fs.frame_split].to_vec();
    let mut centers = vec![[0.0; 3]; fs.frame_split];
    for &i in &fs.cur_indices {
        mask.push(if cur_local.contains(input.cur[i]) { 1.0 } else { 0.0 });
        centers.push(cur_local.center);
    }
    LossTargets {
        mask,
        centers,
        gt_center: cur_local.center,
        gt_yaw_delta: normalize_angle(cur_local.yaw),
    }
}

/// Loss of one pair on a fresh graph; returns the graph so callers can backprop.
pub fn pair_loss(
    model: &Model,
    pair: &TrainingPair,
    loss: &LossConfig,
    context: Switch,
    drop: &mut Dropout,
) -> Result<(Graph, Bound, crate::tensor::Var, LossReport)> {
    let input = prepare_pair(&pair.prev, &pair.prev_box, &pair.cur, context)?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, &model.frozen());
    let pg = build_pair_graph(&mut g, &p, model, &input, drop)?;
    let targets = pair_targets(&input, &pg.features, &pair.cur_box);
    let (total, report) = training_loss(&mut g, &pg.states, &pg.head.proposals, &targets, &loss.weights())?;
    Ok((g, p, total, report))
}

/// Mean inference-mode loss over a set of pairs.
pub fn mean_loss(model: &Model, pairs: &[TrainingPair], loss: &LossConfig, context: Switch) -> Result<f64> {
    if pairs.is_empty() {
        return Err(PipelineError::NoPairs);
    }
    let mut sum = 0.0;
    for pair in pairs {
        let (_, _, _, report) = pair_loss(model, pair, loss, context, &mut Dropout::inference())?;
        sum += report.total;
    }
    Ok(sum / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Off crops the previous cloud to the previous box.
    pub context: Switch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            context: Switch::On,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(PipelineError::Config(format!("step size {} must be finite and >= 0", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(PipelineError::Config("steps and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction and a constant step size.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `grads[i] = None` leaves parameter `i` and its moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (param, grad)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (w, &gk)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *w -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainReport {
    /// Mean training loss of each step's batch.
    pub history: Vec<f64>,
}

/// Deterministic Adam training over frame pairs with ground-truth previous boxes.
/// `on_step` sees each step index and the last report of its batch.
pub fn train(
    model: &mut Model,
    pairs: &[TrainingPair],
    loss: &LossConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<TrainReport> {
    cfg.validate()?;
    loss.validate().map_err(PipelineError::Config)?;
    if pairs.is_empty() {
        return Err(PipelineError::NoPairs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(cfg.lr, &model.store);
    let mut history = Vec::with_capacity(cfg.steps);
    let p_drop = model.cfg.transformer.dropout;

    for step in 0..cfg.steps {
        let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
        let mut batch_total = 0.0;
        let mut last = LossReport::default();
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let idx = order.pop().expect("refilled above");
            let mut drop = Dropout::new(p_drop, Mode::Train, rng.gen());
            let (mut g, p, total, report) = pair_loss(model, &pairs[idx], loss, cfg.context, &mut drop)?;
            if !report.total.is_finite() {
                return Err(PipelineError::NonFinite {
                    what: "loss",
                    step,
                    detail: format!("pair {idx}: {report:?}"),
                });
            }
            g.backward(total)?;
            for (slot, &v) in acc.iter_mut().zip(p.vars()) {
                let Some(gr) = g.grad(v) else { continue };
                *slot = Some(match slot.take() {
                    None => gr,
                    Some(mut a) => {
                        a.data_mut().iter_mut().zip(gr.data()).for_each(|(x, y)| *x += y);
                        a
                    }
                });
            }
            batch_total += report.total;
            last = report;
        }
        let scale = 1.0 / cfg.batch_size as f64;
        for (i, gr) in acc.iter_mut().enumerate() {
            if let Some(t) = gr {
                t.data_mut().iter_mut().for_each(|x| *x *= scale);
                if t.data().iter().any(|x| !x.is_finite()) {
                    return Err(PipelineError::NonFinite {
                        what: "gradient",
                        step,
                        detail: model.store.name(ParamId(i)).to_string(),
                    });
                }
            }
        }
        adam.step(&mut model.store, &acc);
        history.push(batch_total * scale);
        on_step(step, &last);
    }
    Ok(TrainReport { history })
}

/// Produces the box for frame `t` given the box assumed for frame `t - 1`.
/// Implementations may only read frames `t - 1` and `t`, except test stubs.
pub trait Predictor: Sync {
    fn predict(&self, seq: &Sequence, t: usize, prev_box: &Box7) -> Result<Box7>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub context: Switch,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, seq: &Sequence, t: usize, prev_box: &Box7) -> Result<Box7> {
        let prev = &seq.frames[t - 1].cloud;
        let cur = &seq.frames[t].cloud;
        Ok(forward_frame_pair(self.model, prev, prev_box, cur, self.context)?.boxed)
    }
}

/// Returns the ground truth; pins the top of the metric scale.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, seq: &Sequence, t: usize, _prev_box: &Box7) -> Result<Box7> {
        Ok(seq.frames[t].gt)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrackOptions {
    /// Feed the ground-truth previous box instead of the previous prediction.
    pub teacher_forcing: bool,
}

/// Per-frame results for frames `1..T`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrackResult {
    pub boxes: Vec<Box7>,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    /// Frames where a cloud was empty and the previous box was carried over.
    pub carried: Vec<bool>,
}

impl TrackResult {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn metrics(&self) -> Result<Metrics> {
        Ok(success_precision(&self.ious, &self.center_errors)?)
    }
}

pub fn track_sequence(seq: &Sequence, predictor: &dyn Predictor, opts: TrackOptions) -> Result<TrackResult> {
    if seq.len() < 2 {
        return Err(PipelineError::ShortSequence(seq.len()));
    }
    let mut res = TrackResult::default();
    let mut prev_box = seq.frames[0].gt;
    for t in 1..seq.len() {
        let frame = &seq.frames[t];
        let (b, carried) = if frame.cloud.is_empty() {
            (prev_box, true)
        } else {
            match predictor.predict(seq, t, &prev_box) {
                Ok(b) => (b, false),
                Err(PipelineError::EmptyCloud(_)) => (prev_box, true),
                Err(e) => return Err(e),
            }
        };
        res.ious.push(iou3d(&b, &frame.gt));
        res.center_errors.push(b.center_distance(&frame.gt));
        res.boxes.push(b);
        res.carried.push(carried);
        prev_box = if opts.teacher_forcing { frame.gt } else { b };
    }
    Ok(res)
}

/// Tracks through unlabelled clouds from a known first box. Returns one box
/// per frame, the first being `init`; empty frames carry the previous box.
pub fn track_clouds(model: &Model, clouds: &[PointCloud], init: Box7, context: Switch) -> Result<Vec<Box7>> {
    if clouds.len() < 2 {
        return Err(PipelineError::ShortSequence(clouds.len()));
    }
    let mut boxes = vec![init];
    for w in clouds.windows(2) {
        let prev_box = *boxes.last().expect("starts non-empty");
        let b = match forward_frame_pair(model, &w[0], &prev_box, &w[1], context) {
            Ok(p) => p.boxed,
            Err(PipelineError::EmptyCloud(_)) => prev_box,
            Err(e) => return Err(e),
        };
        boxes.push(b);
    }
    Ok(boxes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMetrics {
    pub frames: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_sequence: Vec<SequenceMetrics>,
    pub aggregate: Metrics,
    /// Pooled over all evaluated frames: `(threshold, fraction)`.
    pub success_curve: Vec<(f64, f64)>,
    pub precision_curve: Vec<(f64, f64)>,
}

/// Frame-count-weighted mean of per-sequence metrics.
pub fn weighted_aggregate(parts: &[SequenceMetrics]) -> Result<Metrics> {
    let total: usize = parts.iter().map(|s| s.frames).sum();
    if total == 0 {
        return Err(PipelineError::NoSequences);
    }
    let w = |f: fn(&Metrics) -> f64| parts.iter().map(|s| s.frames as f64 * f(&s.metrics)).sum::<f64>() / total as f64;
    Ok(Metrics {
        success: w(|m| m.success),
        precision: w(|m| m.precision),
    })
}

/// Tracks every sequence (in parallel) and aggregates in sequence order.
pub fn evaluate(seqs: &[Sequence], predictor: &dyn Predictor, opts: TrackOptions) -> Result<Evaluation> {
    if seqs.is_empty() {
        return Err(PipelineError::NoSequences);
    }
    let results: Vec<TrackResult> = seqs
        .par_iter()
        .map(|s| track_sequence(s, predictor, opts))
        .collect::<Result<_>>()?;
    let per_sequence = results
        .iter()
        .map(|r| {
            Ok(SequenceMetrics {
                frames: r.len(),
                metrics: r.metrics()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ious: Vec<f64> = results.iter().flat_map(|r| r.ious.iter().copied()).collect();
    let errs: Vec<f64> = results.iter().flat_map(|r| r.center_errors.iter().copied()).collect();
    Ok(Evaluation {
        aggregate: weighted_aggregate(&per_sequence)?,
        per_sequence,
        success_curve: success_curve(&ious),
        precision_curve: precision_curve(&errs),
    })
}
