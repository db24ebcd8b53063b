//! Self-check suites run by the command-line tool: finite-difference
//! gradient checks for every taped operation and for the full training
//! loss, plus equivalence and invariant probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{extract_features, BackboneConfig};
use crate::checkpoint;
use crate::dropout::{Dropout, Mode};
use crate::geometry::{iou3d, success_precision, Box7, PointCloud};
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::losses::{assign_label, training_loss, Label, LossWeights, Rigidity};
use crate::params::{Bound, Init, ParamStore};
use crate::pipeline::{build_pair_graph, pair_targets, prepare_pair, Model, ModelConfig};
use crate::pipeline::Result;
use crate::tensor::{Graph, Tensor, Var};
use crate::transformer::{
    attention_sublayer_semi, attention_sublayer_vanilla, multi_head_attention, positional_encoding,
    transformer_forward, AttentionConfig, LayerWeights, Variant,
};
use crate::xrpn::{local_attention, Switch, XRpnConfig, XRpnWeights};

pub const GRAD_STEP: f64 = 1e-5;
/// Single taped operations.
pub const OP_TOLERANCE: f64 = 1e-6;
/// The whole forward pass and training loss.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst measured deviation.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn new(name: &str, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            worst,
            tolerance,
            passed: worst <= tolerance,
            detail: String::new(),
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values at least `gap` away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..2.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every
/// output entry contributes a distinct gradient.
fn readout(g: &mut Graph, y: Var, seed: u64) -> crate::tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> crate::tensor::Result<Var>>;
type InputFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

fn op_cases() -> Vec<(&'static str, InputFn, OpFn)> {
    fn two(r: usize, c: usize) -> InputFn {
        Box::new(move |rng| vec![rand_tensor(rng, &[r, c], -1.5, 1.5), rand_tensor(rng, &[r, c], -1.5, 1.5)])
    }
    fn one(r: usize, c: usize) -> InputFn {
        Box::new(move |rng| vec![rand_tensor(rng, &[r, c], -1.5, 1.5)])
    }
    let bin_targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    vec![
        (
            "matmul",
            Box::new(|rng| vec![rand_tensor(rng, &[3, 4], -1.0, 1.0), rand_tensor(rng, &[4, 2], -1.0, 1.0)]),
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        ("add", two(3, 4), Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", two(3, 4), Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", two(3, 4), Box::new(|g, v| g.mul(v[0], v[1]))),
        (
            "add_row",
            Box::new(|rng| vec![rand_tensor(rng, &[3, 4], -1.0, 1.0), rand_tensor(rng, &[4], -1.0, 1.0)]),
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        (
            "mul_col",
            Box::new(|rng| vec![rand_tensor(rng, &[3, 4], -1.0, 1.0), rand_tensor(rng, &[3, 1], -1.0, 1.0)]),
            Box::new(|g, v| g.mul_col(v[0], v[1])),
        ),
        ("repeat_cols", one(4, 1), Box::new(|g, v| g.repeat_cols(v[0], 3))),
        ("scale", one(3, 4), Box::new(|g, v| g.scale(v[0], -2.5))),
        (
            "scale_by",
            Box::new(|rng| vec![rand_tensor(rng, &[3, 4], -1.0, 1.0), rand_tensor(rng, &[1, 1], 0.5, 2.0)]),
            Box::new(|g, v| g.scale_by(v[0], v[1])),
        ),
        (
            "div_by",
            Box::new(|rng| vec![rand_tensor(rng, &[3, 4], -1.0, 1.0), rand_tensor(rng, &[1, 1], 0.5, 2.0)]),
            Box::new(|g, v| g.div_by(v[0], v[1])),
        ),
        (
            "relu",
            Box::new(|rng| vec![away_from_zero(rng, &[3, 4], 1e-3)]),
            Box::new(|g, v| g.relu(v[0])),
        ),
        ("sigmoid", one(3, 4), Box::new(|g, v| g.sigmoid(v[0]))),
        ("exp", one(3, 4), Box::new(|g, v| g.exp(v[0]))),
        ("square", one(3, 4), Box::new(|g, v| g.square(v[0]))),
        (
            "huber",
            Box::new(|rng| {
                // keep clear of the quadratic/linear joint at |x| = 1
                let t = rand_tensor(rng, &[3, 4], 0.0, 1.0);
                vec![t.map(|u| if u < 0.5 { -2.5 + 2.4 * u / 0.5 } else { -0.9 + 3.4 * (u - 0.5) / 0.5 })
                    .map(|x| if (x.abs() - 1.0).abs() < 1e-3 { x * 0.9 } else { x })]
            }),
            Box::new(|g, v| g.huber(v[0], 1.0)),
        ),
        ("softmax_rows", one(3, 5), Box::new(|g, v| g.softmax_rows(v[0]))),
        (
            "layer_norm",
            Box::new(|rng| {
                vec![
                    rand_tensor(rng, &[3, 5], -2.0, 2.0),
                    rand_tensor(rng, &[5], 0.5, 1.5),
                    rand_tensor(rng, &[5], -0.5, 0.5),
                ]
            }),
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("transpose", one(3, 4), Box::new(|g, v| g.transpose(v[0]))),
        ("slice_cols", one(3, 5), Box::new(|g, v| g.slice_cols(v[0], 1, 3))),
        ("concat_cols", two(3, 2), Box::new(|g, v| g.concat_cols(&[v[0], v[1], v[0]]))),
        ("slice_rows", one(5, 3), Box::new(|g, v| g.slice_rows(v[0], 2, 2))),
        ("concat_rows", two(2, 3), Box::new(|g, v| g.concat_rows(&[v[1], v[0]]))),
        ("gather_rows", one(4, 3), Box::new(|g, v| g.gather_rows(v[0], &[3, 0, 3, 1]))),
        (
            "group_max",
            Box::new(|rng| {
                // distinct values on a 1e-2 lattice keep every group's winner unambiguous
                let mut vals: Vec<f64> = (0..18).map(|i| i as f64 * 1e-2 - 0.09).collect();
                for i in (1..vals.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    vals.swap(i, j);
                }
                vec![Tensor::new(&[6, 3], vals).unwrap()]
            }),
            Box::new(|g, v| g.group_max(v[0], 3)),
        ),
        ("sum", one(3, 4), Box::new(|g, v| g.sum(v[0]))),
        ("mean", one(3, 4), Box::new(|g, v| g.mean(v[0]))),
        ("sum_cols", one(3, 4), Box::new(|g, v| g.sum_cols(v[0]))),
        (
            "bce",
            Box::new(|rng| vec![rand_tensor(rng, &[6, 1], 0.05, 0.95)]),
            Box::new(move |g, v| g.bce(v[0], &bin_targets, 1e-7)),
        ),
        (
            "bce_logits",
            one(6, 1),
            Box::new(move |g, v| g.bce_logits(v[0], &bin_targets, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0])),
        ),
    ]
}

/// Central-difference check of each taped op on `instances` random inputs.
pub fn op_gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (k, (name, inputs, op)) in op_cases().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let s = seed.wrapping_add((k * 1000 + i) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let xs = inputs(&mut rng);
            let rep = grad_check_many(
                |g, v| {
                    let y = op(g, v)?;
                    readout(g, y, s)
                },
                &xs,
                GRAD_STEP,
            )?;
            worst = worst.max(rep.max_rel_error);
        }
        out.push(CheckOutcome::new(name, worst, OP_TOLERANCE));
    }
    Ok(out)
}

/// Small architecture used for the end-to-end gradient check.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            k: 3,
            channels: vec![6, 6, 6],
            budget: 0,
        },
        transformer: AttentionConfig {
            layers: 4,
            heads: 2,
            width: 6,
            key_width: 3,
            value_width: 3,
            dropout: 0.1,
            variant: Variant::SemiDropout,
            ffn_hidden: 8,
            head_hidden: 4,
        },
        xrpn: XRpnConfig {
            head_hidden: 4,
            sigma_learnable: true,
            ..XRpnConfig::default()
        },
    }
}

/// Toy model whose votes start close to their points and whose proposal
/// heads are nonzero, so that every loss term, the box term included, is
/// active on [`toy_pair`].
pub fn toy_model(seed: u64) -> Result<Model> {
    let mut model = Model::init(&toy_model_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70e);
    for i in 0..model.store.len() {
        let id = crate::params::ParamId(i);
        let name = model.store.name(id).to_string();
        let t = model.store.get(id).clone();
        if name.contains("center_head.1.") {
            model.store.set(id, t.map(|v| 0.05 * v));
        } else if name == "xrpn.offset.1.w" || name == "xrpn.yaw.1.w" {
            model.store.set(id, rand_tensor(&mut rng, t.shape(), -0.05, 0.05));
        }
    }
    Ok(model)
}

/// Eight-point frame pair: five target points, two of them near the box
/// center, and three clutter points 1.5 m to 3 m away, with a small rigid
/// motion between frames.
pub fn toy_pair(rng: &mut ChaCha8Rng) -> (PointCloud, Box7, PointCloud, Box7) {
    let size = [0.8, 1.0, 1.6];
    let prev_box = Box7::new([0.0, 0.0, 0.8], rng.gen_range(-3.0..3.0), size).unwrap();
    let cur_box = Box7::new(
        [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.8],
        prev_box.yaw + rng.gen_range(-0.1..0.1),
        size,
    )
    .unwrap();
    let local: Vec<[f64; 3]> = (0..5)
        .map(|i| {
            let spread = if i < 2 { 0.1 } else { 0.45 };
            [0, 1, 2].map(|a| rng.gen_range(-spread..spread) * size[a])
        })
        .collect();
    let clutter = |rng: &mut ChaCha8Rng, b: &Box7| -> Vec<[f64; 3]> {
        (0..3)
            .map(|_| {
                let r = rng.gen_range(1.5..3.0);
                let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                [b.center[0] + r * a.cos(), b.center[1] + r * a.sin(), rng.gen_range(0.0..1.6)]
            })
            .collect()
    };
    let mut prev: Vec<[f64; 3]> = local.iter().map(|&q| prev_box.to_world(q)).collect();
    prev.extend(clutter(rng, &prev_box));
    let mut cur: Vec<[f64; 3]> = local.iter().map(|&q| cur_box.to_world(q)).collect();
    cur.extend(clutter(rng, &cur_box));
    (
        PointCloud::new(prev).unwrap(),
        prev_box,
        PointCloud::new(cur).unwrap(),
        cur_box,
    )
}

/// Checks the gradient of the full training loss with respect to every
/// parameter of a toy model, dropout active with a fixed mask, on one
/// random toy pair. Returns the report and the parameter names.
pub fn composition_instance(seed: u64, rigidity: Rigidity) -> Result<(GradCheckReport, Vec<String>)> {
    let cfg = toy_model_config();
    let weights = LossWeights::preset(rigidity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = toy_model(seed)?;
    let (prev, prev_box, cur, cur_box) = toy_pair(&mut rng);
    let input = prepare_pair(&prev, &prev_box, &cur, Switch::On)?;
    let params: Vec<Tensor> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let rep = grad_check_many(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let mut drop = Dropout::new(cfg.transformer.dropout, Mode::Train, seed);
            let pg = build_pair_graph(g, &p, &model, &input, &mut drop).map_err(as_tensor_err)?;
            let targets = pair_targets(&input, &pg.features, &cur_box);
            let (total, _) = training_loss(g, &pg.states, &pg.head.proposals, &targets, &weights)?;
            Ok(total)
        },
        &params,
        GRAD_STEP,
    )?;
    Ok((rep, model.store.iter().map(|(n, _)| n.to_string()).collect()))
}

/// [`composition_instance`] over `instances` seeds, alternating the
/// non-rigid and rigid loss weights.
pub fn composition_gradient_suite(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    let (mut checked, mut straddled) = (0, 0);
    let mut resolved: f64 = 0.0;
    let mut worst_at = String::new();
    for i in 0..instances {
        let rigidity = if i % 2 == 0 { Rigidity::NonRigid } else { Rigidity::Rigid };
        let (rep, names) = composition_instance(seed.wrapping_add(i as u64), rigidity)?;
        checked += rep.checked;
        straddled += rep.straddled;
        resolved = resolved.max(rep.resolved_max_rel_error);
        if rep.max_rel_error > worst {
            worst = rep.max_rel_error;
            worst_at = format!("instance {i}, {}[{}]", names[rep.worst.0], rep.worst.1);
        }
    }
    let mut out = CheckOutcome::new("forward + total loss", worst, GRAD_TOLERANCE);
    out.detail = format!(
        "{checked} entries, {straddled} straddling a branch skipped; worst at {worst_at}; \
         worst over gradients above the rounding resolution {resolved:.2e}"
    );
    Ok(out)
}

fn as_tensor_err(e: crate::pipeline::PipelineError) -> crate::tensor::TensorError {
    match e {
        crate::pipeline::PipelineError::Tensor(t) => t,
        other => crate::tensor::TensorError::Invalid {
            op: "pipeline",
            msg: other.to_string(),
        },
    }
}

fn layer(cfg: &AttentionConfig, seed: u64) -> (ParamStore, LayerWeights) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LayerWeights::init(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "l",
        cfg,
    );
    (store, w)
}

/// Vanilla and semi-dropout sublayers with dropout off and shared weights.
pub fn variant_equivalence(seeds: usize, n: usize) -> Result<CheckOutcome> {
    let cfg = AttentionConfig {
        dropout: 0.0,
        width: 32,
        heads: 2,
        ..AttentionConfig::default()
    };
    let mut worst: f64 = 0.0;
    for s in 0..seeds as u64 {
        let (store, w) = layer(&cfg, s);
        let mut rng = ChaCha8Rng::seed_from_u64(s + 10_000);
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let x = g.constant(rand_tensor(&mut rng, &[n, cfg.width], -1.0, 1.0));
        let m = g.constant(rand_tensor(&mut rng, &[n, 1], 0.0, 1.0));
        let coords: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-2.0..2.0))).collect();
        let pe = g.constant(positional_encoding(&coords, cfg.width));
        let mut d = Dropout::new(0.0, Mode::Train, s);
        let a = attention_sublayer_vanilla(&mut g, &p, &w, x, m, pe, &mut d)?;
        let b = attention_sublayer_semi(&mut g, &p, &w, x, m, pe, &mut d)?;
        worst = worst.max(g.value(a).max_abs_diff(g.value(b)));
    }
    Ok(CheckOutcome::new("vanilla == semi-dropout at p=0", worst, 1e-10))
}

/// Local attention with an unbounded radius against plain global attention.
pub fn infinite_radius_equivalence(seeds: usize, n: usize) -> Result<CheckOutcome> {
    let acfg = AttentionConfig::default();
    let xcfg = XRpnConfig {
        radius: f64::INFINITY,
        ..XRpnConfig::default()
    };
    let mut worst: f64 = 0.0;
    for s in 0..seeds as u64 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let w = XRpnWeights::init(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            &acfg,
            &xcfg,
        );
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let feats = g.constant(rand_tensor(&mut rng, &[n, acfg.width], -1.0, 1.0));
        let comb = g.constant(rand_tensor(&mut rng, &[n, acfg.width], -1.0, 1.0));
        let coords: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-2.0..2.0))).collect();
        let votes: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-2.0..2.0))).collect();
        let neigh = crate::xrpn::center_neighborhood(&votes, xcfg.radius);
        let support = crate::xrpn::neighborhood_support(&neigh);
        let mut d = Dropout::inference();
        let local = local_attention(&mut g, &p, &w, feats, &coords, comb, Some(&support), &mut d)?;
        // global reference: same sublayer written out without any support mask
        let xbar = w.norm.forward(&mut g, &p, feats)?;
        let pe = g.constant(positional_encoding(&coords, acfg.width));
        let xqk = g.add(xbar, pe)?;
        let fa = multi_head_attention(&mut g, &p, &w.attn, xqk, xqk, xbar)?;
        let ma = multi_head_attention(&mut g, &p, &w.attn, xqk, xqk, comb)?;
        let y = g.add(feats, fa)?;
        let global = g.add(y, ma)?;
        worst = worst.max(g.value(local).max_abs_diff(g.value(global)));
    }
    Ok(CheckOutcome::new("local attention at r=inf == global", worst, 1e-10))
}

/// Clouds whose pairwise distances are all distinct with a clear margin.
pub fn distinct_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    loop {
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-2.0..2.0))).collect();
        let mut d: Vec<f64> = Vec::with_capacity(n * n / 2);
        for i in 0..n {
            for j in i + 1..n {
                d.push(crate::geometry::dist3(pts[i], pts[j]));
            }
        }
        d.sort_by(|a, b| a.total_cmp(b));
        if d.windows(2).all(|w| w[1] - w[0] > 1e-9) {
            return pts;
        }
    }
}

/// Jointly permuting each frame's points permutes every output row.
pub fn permutation_equivariance(seeds: usize, n: usize) -> Result<CheckOutcome> {
    let mcfg = ModelConfig {
        backbone: BackboneConfig {
            budget: 0,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut worst: f64 = 0.0;
    for s in 0..seeds as u64 {
        let model = Model::init(&mcfg, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s + 77);
        let prev = distinct_cloud(&mut rng, n);
        let cur = distinct_cloud(&mut rng, n);
        let mask: Vec<f64> = (0..n).map(|i| f64::from(i % 3 == 0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let run = |prev: &[[f64; 3]], mask: &[f64], cur: &[[f64; 3]]| -> Result<Vec<Tensor>> {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, &[]);
            let fs = extract_features(&mut g, &p, &model.backbone, &mcfg.backbone, prev, mask, cur)?;
            let mut d = Dropout::inference();
            let states = transformer_forward(&mut g, &p, &model.layers, &mcfg.transformer, &fs, &mut d)?;
            let mut outs = vec![g.value(fs.feats).clone()];
            for st in states {
                outs.push(g.value(st.feats).clone());
                outs.push(g.value(st.mask).clone());
                outs.push(g.value(st.centers).clone());
            }
            Ok(outs)
        };
        let base = run(&prev, &mask, &cur)?;
        let pp: Vec<[f64; 3]> = perm.iter().map(|&i| prev[i]).collect();
        let pm: Vec<f64> = perm.iter().map(|&i| mask[i]).collect();
        let pc: Vec<[f64; 3]> = perm.iter().map(|&i| cur[i]).collect();
        let permuted = run(&pp, &pm, &pc)?;
        for (a, b) in base.iter().zip(&permuted) {
            for (row_new, &i) in perm.iter().enumerate() {
                for (frame_off_new, frame_off_old) in [(0, 0), (n, n)] {
                    let ra = a.row(frame_off_old + i);
                    let rb = b.row(frame_off_new + row_new);
                    for (x, y) in ra.iter().zip(rb) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
    }
    Ok(CheckOutcome::new("backbone + transformer permutation equivariance", worst, 1e-9))
}

/// Monte-Carlo IoU inside the bounding region of both boxes.
pub fn monte_carlo_iou(a: &Box7, b: &Box7, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let r = |bx: &Box7| bx.size[0].hypot(bx.size[1]) / 2.0;
    let lo = [0, 1].map(|i| (a.center[i] - r(a)).min(b.center[i] - r(b)));
    let hi = [0, 1].map(|i| (a.center[i] + r(a)).max(b.center[i] + r(b)));
    let zlo = (a.center[2] - a.size[2] / 2.0).min(b.center[2] - b.size[2] / 2.0);
    let zhi = (a.center[2] + a.size[2] / 2.0).max(b.center[2] + b.size[2] / 2.0);
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..samples {
        let p = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), rng.gen_range(zlo..zhi)];
        let (ia, ib) = (a.contains(p), b.contains(p));
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn iou_against_sampling(pairs: usize, samples: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let size = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|_| rng.gen_range(0.5..3.0));
        let a = Box7::new([0.0, 0.0, 0.0], rng.gen_range(-3.2..3.2), size(&mut rng)).unwrap();
        let c = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
        let b = Box7::new(c, rng.gen_range(-3.2..3.2), size(&mut rng)).unwrap();
        worst = worst.max((iou3d(&a, &b) - monte_carlo_iou(&a, &b, samples, &mut rng)).abs());
    }
    CheckOutcome::new("oriented IoU vs sampling", worst, 0.01)
}

pub fn metric_grid() -> Result<Vec<CheckOutcome>> {
    let m = success_precision(&[0.5; 10], &[1.0; 10])?;
    // 50 of 101 thresholds lie strictly below 0.5; 51 distances are >= 1.0
    let perfect = success_precision(&[1.0; 10], &[0.0; 10]).unwrap();
    Ok(vec![
        CheckOutcome::new("success at constant IoU 0.5", (m.success - 5000.0 / 101.0).abs(), 0.01),
        CheckOutcome::new("precision at constant 1 m error", (m.precision - 5100.0 / 101.0).abs(), 0.01),
        CheckOutcome::new(
            "perfect tracker scores 100/100",
            (perfect.success - 100.0).abs().max((perfect.precision - 100.0).abs()),
            0.0,
        ),
    ])
}

pub fn loss_constants() -> Vec<CheckOutcome> {
    let r = LossWeights::preset(Rigidity::Rigid).gamma;
    let nr = LossWeights::preset(Rigidity::NonRigid).gamma;
    let dev = |a: [f64; 3], b: [f64; 3]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let labels = [0.2, 0.45, 0.7].map(assign_label);
    vec![
        CheckOutcome::new("rigid loss weights", dev(r, [0.2, 1.0, 1.5]), 0.0),
        CheckOutcome::new("non-rigid loss weights", dev(nr, [0.2, 10.0, 1.0]), 0.0),
        CheckOutcome::new(
            "labels at 0.2 / 0.45 / 0.7 m",
            f64::from(u8::from(labels != [Label::Positive, Label::Ignore, Label::Negative])),
            0.0,
        ),
    ]
}

pub fn checkpoint_round_trip(seed: u64) -> Result<CheckOutcome> {
    let model = Model::init(&ModelConfig::default(), seed)?;
    let tensors = checkpoint::store_tensors(&model.store);
    let bytes = checkpoint::encode(&tensors);
    let back = checkpoint::decode(&bytes)?;
    let same = back.len() == tensors.len()
        && back.iter().zip(&tensors).all(|((n1, t1), (n2, t2))| {
            n1 == n2
                && t1.shape() == t2.shape()
                && t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
    Ok(CheckOutcome::new("checkpoint round trip", f64::from(u8::from(!same)), 0.0))
}

/// Equivalence and invariant probes, cheapest first.
pub fn verify_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    out.extend(loss_constants());
    out.extend(metric_grid()?);
    out.push(checkpoint_round_trip(0)?);
    out.push(variant_equivalence(100, 64)?);
    out.push(infinite_radius_equivalence(20, 48)?);
    out.push(permutation_equivariance(5, 40)?);
    out.push(iou_against_sampling(50, 1_000_000, 0));
    Ok(out)
}

/// Every taped op plus the end-to-end loss for both rigidity presets.
pub fn gradient_suite(instances: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = op_gradient_suite(instances, 0)?;
    out.push(composition_gradient_suite(instances, 100)?);
    Ok(out)
}
