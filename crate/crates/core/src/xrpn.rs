//! Localization head over current-frame points: attention restricted to
//! neighbourhoods in voted-center space, a Gaussian prior on displacement
//! from the previous target center, and per-point box proposals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureSet;
use crate::dropout::Dropout;
use crate::geometry::{normalize_angle, Box7};
use crate::params::{Bound, Init, Linear, Mlp, Norm, ParamId};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};
use crate::transformer::{
    attention_probs, coords_tensor, positional_encoding, semi_combine, AttentionConfig, AttentionWeights,
    LayerState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XRpnConfig {
    pub radius: f64,
    pub sigma2_init: f64,
    pub sigma_learnable: bool,
    pub center_embedding: Switch,
    pub head_hidden: usize,
}

impl Default for XRpnConfig {
    fn default() -> Self {
        Self {
            radius: 0.3,
            sigma2_init: 10.0,
            sigma_learnable: false,
            center_embedding: Switch::On,
            head_hidden: 32,
        }
    }
}

impl XRpnConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.radius > 0.0) {
            return Err(format!("xrpn.radius must be positive, got {}", self.radius));
        }
        if !(self.sigma2_init > 0.0 && self.sigma2_init.is_finite()) {
            return Err(format!("xrpn.sigma2_init must be positive, got {}", self.sigma2_init));
        }
        Ok(())
    }
}

/// `N(p_i) = { j : ‖c_i − c_j‖ < r }`, listed in ascending index order.
pub fn center_neighborhood(centers: &[[f64; 3]], r: f64) -> Vec<Vec<usize>> {
    let r2 = r * r;
    centers
        .iter()
        .map(|ci| {
            centers
                .iter()
                .enumerate()
                .filter(|(_, cj)| {
                    let d2 = (ci[0] - cj[0]).powi(2) + (ci[1] - cj[1]).powi(2) + (ci[2] - cj[2]).powi(2);
                    d2 < r2
                })
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

pub fn neighborhood_support(neigh: &[Vec<usize>]) -> Vec<Vec<bool>> {
    let n = neigh.len();
    neigh
        .iter()
        .map(|set| {
            let mut row = vec![false; n];
            for &j in set {
                row[j] = true;
            }
            row
        })
        .collect()
}

/// `exp(−‖c − c̄‖² / 2σ²)` for one center.
pub fn gaussian_weight(c: [f64; 3], prev_center: [f64; 3], sigma2: f64) -> f64 {
    let d2: f64 = (0..3).map(|i| (c[i] - prev_center[i]).powi(2)).sum();
    (-d2 / (2.0 * sigma2)).exp()
}

/// Taped Gaussian center mask over `N×3` centers; `sigma2` is a `1×1` value.
pub fn gaussian_center_mask(g: &mut Graph, centers: Var, prev_center: [f64; 3], sigma2: Var) -> Result<Var> {
    let shift = g.constant(Tensor::new(&[3], prev_center.map(|v| -v).to_vec())?);
    let d = g.add_row(centers, shift)?;
    let d2 = g.square(d)?;
    let d2 = g.sum_cols(d2)?;
    let two_s = g.scale(sigma2, 2.0)?;
    let e = g.div_by(d2, two_s)?;
    let e = g.scale(e, -1.0)?;
    g.exp(e)
}

#[derive(Clone, Debug)]
pub struct XRpnWeights {
    pub attn: AttentionWeights,
    pub norm: Norm,
    pub mask_embed: Linear,
    pub center_embed: Linear,
    pub score_head: Linear,
    pub offset_head: Mlp,
    pub yaw_head: Mlp,
    pub sigma2: ParamId,
}

impl XRpnWeights {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, attn_cfg: &AttentionConfig, cfg: &XRpnConfig) -> Self {
        let c = attn_cfg.width;
        let h = cfg.head_hidden;
        let w = Self {
            attn: AttentionWeights::init(init, "xrpn.attn", attn_cfg),
            norm: init.norm("xrpn.norm", c),
            mask_embed: init.linear("xrpn.mask_embed", 1, c, true),
            center_embed: init.linear("xrpn.center_embed", 1, c, true),
            score_head: init.linear("xrpn.score", c, 1, true),
            offset_head: init.mlp("xrpn.offset", c, h, 3),
            yaw_head: init.mlp("xrpn.yaw", c, h, 1),
            sigma2: init.store.add("xrpn.sigma2", Tensor::scalar(cfg.sigma2_init)),
        };
        // proposals start on the votes with the previous heading; box
        // supervision only reaches proposals that already land near the target
        for out in [w.offset_head.out.w, w.yaw_head.out.w] {
            let shape = init.store.get(out).shape().to_vec();
            init.store.set(out, Tensor::zeros(&shape));
        }
        w
    }
}

/// `0.5·ME + 0.5·CE`, or `0.5·ME` with the center embedding switched off.
pub fn embed_and_combine(
    g: &mut Graph,
    p: &Bound,
    w: &XRpnWeights,
    mask: Var,
    center_mask: Var,
    center_embedding: Switch,
) -> Result<Var> {
    let me = w.mask_embed.forward(g, p, mask)?;
    match center_embedding {
        Switch::On => {
            let ce = w.center_embed.forward(g, p, center_mask)?;
            let sum = g.add(me, ce)?;
            g.scale(sum, 0.5)
        }
        Switch::Off => g.scale(me, 0.5),
    }
}

/// Single semi-dropout attention sublayer whose softmax runs over each
/// point's neighbourhood only; there is no feed-forward sublayer.
#[allow(clippy::too_many_arguments)]
pub fn local_attention(
    g: &mut Graph,
    p: &Bound,
    w: &XRpnWeights,
    feats: Var,
    coords: &[[f64; 3]],
    combined: Var,
    support: Option<&[Vec<bool>]>,
    drop: &mut Dropout,
) -> Result<Var> {
    let width = g.value(feats).cols();
    let xbar = w.norm.forward(g, p, feats)?;
    let pe = g.constant(positional_encoding(coords, width));
    let xqk = g.add(xbar, pe)?;
    let logits = support.map(crate::transformer::support_logits).transpose()?;
    let probs = attention_probs(g, p, &w.attn, xqk, xqk, logits.as_ref())?;
    semi_combine(g, p, &w.attn, &probs, feats, xbar, combined, drop)
}

/// Taped proposal heads, one proposal per current-frame point.
#[derive(Clone, Copy, Debug)]
pub struct ProposalVars {
    pub centers: Var,
    pub yaw: Var,
    pub scores: Var,
}

pub fn propose(g: &mut Graph, p: &Bound, w: &XRpnWeights, refined: Var, votes: Var) -> Result<ProposalVars> {
    let scores = w.score_head.forward(g, p, refined)?;
    let offset = w.offset_head.forward(g, p, refined)?;
    let centers = g.add(votes, offset)?;
    let yaw = w.yaw_head.forward(g, p, refined)?;
    Ok(ProposalVars { centers, yaw, scores })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub center: [f64; 3],
    pub yaw_delta: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn from_graph(g: &Graph, v: &ProposalVars) -> Self {
        let (c, y, s) = (g.value(v.centers), g.value(v.yaw), g.value(v.scores));
        let proposals = (0..s.rows())
            .map(|i| Proposal {
                center: [c.at(i, 0), c.at(i, 1), c.at(i, 2)],
                yaw_delta: y.at(i, 0),
                score: s.at(i, 0),
            })
            .collect();
        Self { proposals }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    /// Highest score, lowest index on ties.
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, p) in self.proposals.iter().enumerate() {
            if best.map_or(true, |b| p.score > self.proposals[b].score) {
                best = Some(i);
            }
        }
        best
    }
}

/// Box from the highest-scoring proposal: its center, the previous heading
/// plus the predicted yaw offset, and the previous size.
pub fn select_best(proposals: &ProposalSet, prev_box: &Box7) -> Result<Box7> {
    let i = proposals.best_index().ok_or_else(|| TensorError::Invalid {
        op: "select_best",
        msg: "empty proposal set".into(),
    })?;
    let best = &proposals.proposals[i];
    Ok(Box7 {
        center: best.center,
        yaw: normalize_angle(prev_box.yaw + best.yaw_delta),
        size: prev_box.size,
    })
}

pub struct XRpnOutput {
    pub proposals: ProposalVars,
    pub center_mask: Var,
    pub neighborhoods: Vec<Vec<usize>>,
}

/// Runs the head on the current-frame rows of the last transformer state.
#[allow(clippy::too_many_arguments)]
pub fn xrpn_forward(
    g: &mut Graph,
    p: &Bound,
    w: &XRpnWeights,
    cfg: &XRpnConfig,
    last: &LayerState,
    fs: &FeatureSet,
    prev_center: [f64; 3],
    drop: &mut Dropout,
) -> Result<XRpnOutput> {
    let split = fs.frame_split;
    let nt = fs.current_len();
    let feats = g.slice_rows(last.feats, split, nt)?;
    let votes = g.slice_rows(last.centers, split, nt)?;
    let mask = g.slice_rows(last.mask, split, nt)?;
    let coords = &fs.coords[split..];

    let vote_vals: Vec<[f64; 3]> = g.value(votes).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let neighborhoods = center_neighborhood(&vote_vals, cfg.radius);
    let support = neighborhood_support(&neighborhoods);
    g.note_branch(&neighborhoods);

    let center_mask = gaussian_center_mask(g, votes, prev_center, p[w.sigma2])?;
    let combined = embed_and_combine(g, p, w, mask, center_mask, cfg.center_embedding)?;
    let refined = local_attention(g, p, w, feats, coords, combined, Some(&support), drop)?;
    let proposals = propose(g, p, w, refined, votes)?;
    Ok(XRpnOutput {
        proposals,
        center_mask,
        neighborhoods,
    })
}

/// Convenience for tests: `N×3` constant of the given centers.
pub fn centers_constant(g: &mut Graph, centers: &[[f64; 3]]) -> Result<Var> {
    let t = coords_tensor(centers)?;
    Ok(g.constant(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(seed: u64) -> (ParamStore, XRpnWeights) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = XRpnWeights::init(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            &AttentionConfig::default(),
            &XRpnConfig::default(),
        );
        (store, w)
    }

    fn brute_neighbors(c: &[[f64; 3]], r: f64) -> Vec<Vec<usize>> {
        (0..c.len())
            .map(|i| {
                (0..c.len())
                    .filter(|&j| {
                        let d = ((c[i][0] - c[j][0]).powi(2) + (c[i][1] - c[j][1]).powi(2) + (c[i][2] - c[j][2]).powi(2)).sqrt();
                        d < r
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn neighborhood_examples() {
        assert_eq!(center_neighborhood(&[[1.0, 2.0, 3.0]], 0.01), vec![vec![0]]);
        let same = [[0.5; 3], [0.5; 3]];
        assert_eq!(center_neighborhood(&same, 1e-9), vec![vec![0, 1], vec![0, 1]]);
        let at_r = [[0.0; 3], [0.3, 0.0, 0.0]];
        assert_eq!(center_neighborhood(&at_r, 0.3), brute_neighbors(&at_r, 0.3));
        assert_eq!(center_neighborhood(&at_r, 0.3), vec![vec![0], vec![1]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 3]> = (0..40).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        for r in [0.1, 0.3, 0.7] {
            assert_eq!(center_neighborhood(&pts, r), brute_neighbors(&pts, r));
        }
    }

    #[test]
    fn gaussian_examples() {
        let c = [1.0, -2.0, 0.5];
        assert_eq!(gaussian_weight(c, c, 10.0), 1.0);
        let s2: f64 = 10.0;
        let d = (s2.sqrt()) * (2.0 * 2f64.ln()).sqrt();
        let v = gaussian_weight([c[0] + d, c[1], c[2]], c, s2);
        assert!((v - 0.5).abs() < 1e-12);

        let mut g = Graph::new();
        let centers = centers_constant(&mut g, &[c, [c[0] + d, c[1], c[2]], [9.0, 9.0, 9.0]]).unwrap();
        let s = g.param(Tensor::scalar(s2));
        let m = gaussian_center_mask(&mut g, centers, c, s).unwrap();
        let vals = g.value(m).data().to_vec();
        assert_eq!(vals[0], 1.0);
        assert!((vals[1] - 0.5).abs() < 1e-12);
        assert!(vals[2] > 0.0 && vals[2] < vals[1]);
    }

    #[test]
    fn center_embedding_switch() {
        let (mut store, w) = weights(1);
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let m = g.constant(Tensor::uniform(&[5, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let mc = g.constant(Tensor::uniform(&[5, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let off = embed_and_combine(&mut g, &p, &w, m, mc, Switch::Off).unwrap();
        let me = w.mask_embed.forward(&mut g, &p, m).unwrap();
        let half = g.scale(me, 0.5).unwrap();
        assert_eq!(g.value(off), g.value(half));

        // hand evaluation of both affine maps
        let on = embed_and_combine(&mut g, &p, &w, m, mc, Switch::On).unwrap();
        let (mw, cw) = (store.get(w.mask_embed.w).clone(), store.get(w.center_embed.w).clone());
        for i in 0..5 {
            for j in 0..32 {
                let e = 0.5 * (g.value(m).at(i, 0) * mw.at(0, j)) + 0.5 * (g.value(mc).at(i, 0) * cw.at(0, j));
                assert!((g.value(on).at(i, j) - e).abs() < 1e-15);
            }
        }

        // zero center weights match center embedding off
        store.set(w.center_embed.w, Tensor::zeros(&[1, 32]));
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let m = g.constant(Tensor::full(&[3, 1], 0.7));
        let mc = g.constant(Tensor::full(&[3, 1], 0.2));
        let a = embed_and_combine(&mut g, &p, &w, m, mc, Switch::On).unwrap();
        let b = embed_and_combine(&mut g, &p, &w, m, mc, Switch::Off).unwrap();
        assert_eq!(g.value(a), g.value(b));

        // identical inputs and shared weights: ME = CE
        store.set(w.center_embed.w, store.get(w.mask_embed.w).clone());
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let ones = g.constant(Tensor::full(&[3, 1], 1.0));
        let c = embed_and_combine(&mut g, &p, &w, ones, ones, Switch::On).unwrap();
        let me = w.mask_embed.forward(&mut g, &p, ones).unwrap();
        assert!(g.value(c).max_abs_diff(g.value(me)) < 1e-15);
    }

    #[test]
    fn isolated_points_attend_to_themselves() {
        let (store, w) = weights(4);
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let coords = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let feats = g.constant(Tensor::uniform(&[3, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
        let comb = g.constant(Tensor::uniform(&[3, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(6)));
        let neigh = center_neighborhood(&coords, 0.5);
        let support = neighborhood_support(&neigh);
        let y = local_attention(&mut g, &p, &w, feats, &coords, comb, Some(&support), &mut Dropout::inference()).unwrap();
        let xbar = w.norm.forward(&mut g, &p, feats).unwrap();
        let v = g.add(xbar, comb).unwrap();
        let mut heads = Vec::new();
        for &wv in &w.attn.value {
            heads.push(g.matmul(v, p[wv]).unwrap());
        }
        let cat = g.concat_cols(&heads).unwrap();
        let proj = g.matmul(cat, p[w.attn.output]).unwrap();
        let expect = g.add(feats, proj).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn infinite_radius_is_global_attention() {
        let (store, w) = weights(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coords: Vec<[f64; 3]> = (0..12).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let feats = g.constant(Tensor::uniform(&[12, 32], 1.0, &mut rng));
        let comb = g.constant(Tensor::uniform(&[12, 32], 1.0, &mut rng));
        let support = neighborhood_support(&center_neighborhood(&coords, f64::INFINITY));
        let local = local_attention(&mut g, &p, &w, feats, &coords, comb, Some(&support), &mut Dropout::inference()).unwrap();
        let global = local_attention(&mut g, &p, &w, feats, &coords, comb, None, &mut Dropout::inference()).unwrap();
        assert!(g.value(local).max_abs_diff(g.value(global)) < 1e-10);
    }

    #[test]
    fn proposal_heads_are_pointwise() {
        let (mut store, w) = weights(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let base = Tensor::uniform(&[6, 32], 1.0, &mut rng);
        let votes = Tensor::uniform(&[6, 3], 1.0, &mut rng);
        let run = |store: &ParamStore, x: &Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, &[]);
            let xv = g.constant(x.clone());
            let vv = g.constant(votes.clone());
            let pv = propose(&mut g, &p, &w, xv, vv).unwrap();
            assert_eq!(g.value(pv.scores).shape(), &[6, 1]);
            ProposalSet::from_graph(&g, &pv)
        };
        let a = run(&store, &base);
        let mut perturbed = base.clone();
        perturbed.data_mut()[3 * 32 + 5] += 0.5;
        let b = run(&store, &perturbed);
        for i in 0..6 {
            if i == 3 {
                assert_ne!(a.proposals[i], b.proposals[i]);
            } else {
                assert_eq!(a.proposals[i], b.proposals[i]);
            }
        }
        store.set(w.offset_head.out.w, Tensor::zeros(&[32, 3]));
        let c = run(&store, &base);
        for (i, prop) in c.proposals.iter().enumerate() {
            assert_eq!(prop.center.to_vec(), votes.row(i).to_vec());
        }
    }

    fn set(scores: &[f64]) -> ProposalSet {
        ProposalSet {
            proposals: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Proposal {
                    center: [i as f64, 0.0, 0.0],
                    yaw_delta: 0.1 * i as f64,
                    score: s,
                })
                .collect(),
        }
    }

    #[test]
    fn select_best_examples() {
        let prev = Box7::new([0.0; 3], 0.2, [1.0, 2.0, 3.0]).unwrap();
        let b = select_best(&set(&[-50.0]), &prev).unwrap();
        assert_eq!(b.center, [0.0; 3]);
        let b = select_best(&set(&[1.0, 3.0, 2.0]), &prev).unwrap();
        assert_eq!(b.center, [1.0, 0.0, 0.0]);
        assert!((b.yaw - 0.3).abs() < 1e-12);
        assert_eq!(b.size, prev.size);
        assert_eq!(set(&[2.0, 2.0, 2.0]).best_index(), Some(0));
        assert!(select_best(&ProposalSet::default(), &prev).is_err());
    }

    #[test]
    fn selection_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let s: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t: Vec<f64> = s.iter().map(|v| crate::tensor::sigmoid(*v) * 7.0 + v.powi(3)).collect();
            assert_eq!(set(&s).best_index(), set(&t).best_index());
        }
    }

    #[test]
    fn sigma_gradient_only_when_learnable() {
        let (store, w) = weights(12);
        for frozen in [false, true] {
            let mut g = Graph::new();
            let ids: Vec<ParamId> = if frozen { vec![w.sigma2] } else { vec![] };
            let p = store.bind(&mut g, &ids);
            let c = centers_constant(&mut g, &[[1.0, 0.0, 0.0], [0.0, 2.0, 0.5]]).unwrap();
            let m = gaussian_center_mask(&mut g, c, [0.0; 3], p[w.sigma2]).unwrap();
            let s = g.sum(m).unwrap();
            g.backward(s).unwrap();
            assert_eq!(g.grad(p[w.sigma2]).is_some(), !frozen);
        }
    }
}
