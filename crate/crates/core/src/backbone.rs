//! Simplified EdgeConv feature extractor shared by both frames.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Bound, Init, Linear};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("k = {k} must be smaller than the number of points {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("{0} point cloud is empty")]
    EmptyCloud(&'static str),
    #[error("mask length {mask} does not match {points} points")]
    MaskLength { mask: usize, points: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub k: usize,
    /// Output widths of the successive EdgeConv layers.
    pub channels: Vec<usize>,
    /// Farthest-point budget per frame; `0` keeps every point.
    pub budget: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            k: 8,
            channels: vec![32, 32, 32],
            budget: 128,
        }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(3)
    }
}

/// Indices of the `k` nearest neighbours of every point (itself excluded),
/// flattened row-major as `N×k`. Distance ties go to the lower index.
pub fn knn_graph(coords: &[[f64; 3]], k: usize) -> Result<Vec<usize>, BackboneError> {
    let n = coords.len();
    if k >= n {
        return Err(BackboneError::TooFewPoints { k, n });
    }
    let mut out = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, p) in coords.iter().enumerate() {
        cand.clear();
        cand.extend(
            coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (sq_dist(p, q), j)),
        );
        cand.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        let head = &mut cand[..k];
        head.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(out)
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Deterministic farthest-point sampling starting from index 0.
/// Returns every index when `budget` is zero or covers the cloud.
pub fn farthest_point_sample(coords: &[[f64; 3]], budget: usize) -> Vec<usize> {
    let n = coords.len();
    if budget == 0 || budget >= n {
        return (0..n).collect();
    }
    let mut picked = Vec::with_capacity(budget);
    let mut best = vec![f64::INFINITY; n];
    let mut cur = 0;
    for _ in 0..budget {
        picked.push(cur);
        let mut next = 0;
        let mut far = f64::NEG_INFINITY;
        for (j, q) in coords.iter().enumerate() {
            let d = sq_dist(&coords[cur], q);
            if d < best[j] {
                best[j] = d;
            }
            if best[j] > far {
                far = best[j];
                next = j;
            }
        }
        cur = next;
    }
    picked
}

/// One EdgeConv layer: `max_j relu(W·[x_i, x_j - x_i] + b)` over the
/// `k` neighbours listed for each point.
pub fn edge_conv(
    g: &mut Graph,
    p: &Bound,
    feats: Var,
    neighbors: &[usize],
    k: usize,
    layer: &Linear,
) -> Result<Var, BackboneError> {
    let n = g.value(feats).rows();
    if k == 0 || neighbors.len() != n * k {
        return Err(TensorError::Invalid {
            op: "edge_conv",
            msg: format!("{} neighbour indices for {n} points and k={k}", neighbors.len()),
        }
        .into());
    }
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let xi = g.gather_rows(feats, &centers)?;
    let xj = g.gather_rows(feats, neighbors)?;
    let diff = g.sub(xj, xi)?;
    let edge = g.concat_cols(&[xi, diff])?;
    let h = layer.forward(g, p, edge)?;
    let h = g.relu(h)?;
    Ok(g.group_max(h, k)?)
}

#[derive(Clone, Debug)]
pub struct BackboneWeights {
    pub layers: Vec<Linear>,
}

impl BackboneWeights {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, cfg: &BackboneConfig) -> Self {
        let mut cin = 3;
        let layers = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let l = init.linear(&format!("backbone.{i}"), 2 * cin, cout, true);
                cin = cout;
                l
            })
            .collect();
        Self { layers }
    }
}

/// Per-point features of both frames, previous frame first.
pub struct FeatureSet {
    pub coords: Vec<[f64; 3]>,
    pub feats: Var,
    pub mask: Vec<f64>,
    pub frame_split: usize,
    /// Source indices of the kept rows in each input cloud.
    pub prev_indices: Vec<usize>,
    pub cur_indices: Vec<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn current_len(&self) -> usize {
        self.coords.len() - self.frame_split
    }
}

/// Mask value assigned to current-frame rows before refinement.
pub const UNKNOWN_MASK: f64 = 0.5;

fn frame_neighbors(coords: &[[f64; 3]], k: usize, offset: usize) -> Result<Vec<usize>, BackboneError> {
    let n = coords.len();
    let nb = if n == 1 {
        vec![0; k]
    } else {
        let kk = k.min(n - 1);
        let mut nb = knn_graph(coords, kk)?;
        // pad short neighbourhoods by repeating the nearest neighbour
        if kk < k {
            nb = nb
                .chunks(kk)
                .flat_map(|c| c.iter().copied().chain(std::iter::repeat(c[0]).take(k - kk)))
                .collect();
        }
        nb
    };
    Ok(nb.into_iter().map(|j| j + offset).collect())
}

/// Runs the shared backbone on both frames and attaches targetness masks.
pub fn extract_features(
    g: &mut Graph,
    p: &Bound,
    weights: &BackboneWeights,
    cfg: &BackboneConfig,
    prev: &[[f64; 3]],
    prev_mask: &[f64],
    cur: &[[f64; 3]],
) -> Result<FeatureSet, BackboneError> {
    if prev.is_empty() {
        return Err(BackboneError::EmptyCloud("previous"));
    }
    if cur.is_empty() {
        return Err(BackboneError::EmptyCloud("current"));
    }
    if prev_mask.len() != prev.len() {
        return Err(BackboneError::MaskLength {
            mask: prev_mask.len(),
            points: prev.len(),
        });
    }
    let prev_indices = farthest_point_sample(prev, cfg.budget);
    let cur_indices = farthest_point_sample(cur, cfg.budget);
    let prev_pts: Vec<[f64; 3]> = prev_indices.iter().map(|&i| prev[i]).collect();
    let cur_pts: Vec<[f64; 3]> = cur_indices.iter().map(|&i| cur[i]).collect();
    let split = prev_pts.len();

    let mut neighbors = frame_neighbors(&prev_pts, cfg.k, 0)?;
    neighbors.extend(frame_neighbors(&cur_pts, cfg.k, split)?);

    let coords: Vec<[f64; 3]> = prev_pts.iter().chain(&cur_pts).copied().collect();
    let input = Tensor::new(&[coords.len(), 3], coords.iter().flatten().copied().collect())?;
    let mut x = g.constant(input);
    for layer in &weights.layers {
        x = edge_conv(g, p, x, &neighbors, cfg.k, layer)?;
    }

    let mut mask: Vec<f64> = prev_indices.iter().map(|&i| prev_mask[i]).collect();
    mask.extend(std::iter::repeat(UNKNOWN_MASK).take(cur_pts.len()));
    Ok(FeatureSet {
        coords,
        feats: x,
        mask,
        frame_split: split,
        prev_indices,
        cur_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(coords: &[[f64; 3]], k: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for i in 0..coords.len() {
            let mut all: Vec<(f64, usize)> = (0..coords.len())
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&coords[i], &coords[j]), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.extend(all[..k].iter().map(|a| a.1));
        }
        out
    }

    #[test]
    fn knn_two_points() {
        assert_eq!(knn_graph(&[[0.0; 3], [1.0, 0.0, 0.0]], 1).unwrap(), vec![1, 0]);
        assert!(matches!(
            knn_graph(&[[0.0; 3]], 1),
            Err(BackboneError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn knn_grid_ties_lowest_index() {
        let mut grid = Vec::new();
        for x in 0..4 {
            for y in 0..3 {
                grid.push([x as f64, y as f64, 0.0]);
            }
        }
        for k in [1, 2, 4] {
            assert_eq!(knn_graph(&grid, k).unwrap(), brute_knn(&grid, k));
        }
        // interior point 4 = (1,1): neighbours at distance 1 are 1, 3, 5, 7
        assert_eq!(knn_graph(&grid, 1).unwrap()[4], 1);
    }

    #[test]
    fn knn_duplicates_are_neighbors() {
        let pts = [[0.0; 3], [5.0, 0.0, 0.0], [0.0; 3]];
        let nb = knn_graph(&pts, 1).unwrap();
        assert_eq!((nb[0], nb[2]), (2, 0));
    }

    fn fps_reference(coords: &[[f64; 3]], budget: usize) -> Vec<usize> {
        let mut picked = vec![0usize];
        while picked.len() < budget {
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..coords.len() {
                let d = picked
                    .iter()
                    .map(|&i| sq_dist(&coords[i], &coords[j]))
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, j);
                }
            }
            picked.push(best.1);
        }
        picked
    }

    fn weights(cfg: &BackboneConfig, seed: u64) -> (ParamStore, BackboneWeights) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = BackboneWeights::init(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            cfg,
        );
        (store, w)
    }

    fn random_cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn subsampling_gathers_masks_by_fps_indices() {
        let cfg = BackboneConfig::default();
        let (store, w) = weights(&cfg, 1);
        let prev = random_cloud(512, 2);
        let cur = random_cloud(300, 3);
        let mask: Vec<f64> = (0..512).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let fs = extract_features(&mut g, &p, &w, &cfg, &prev, &mask, &cur).unwrap();
        assert_eq!(fs.prev_indices, fps_reference(&prev, 128));
        assert_eq!(fs.frame_split, 128);
        assert_eq!(fs.len(), 256);
        assert_eq!(g.value(fs.feats).shape(), &[256, 32]);
        for (row, &src) in fs.prev_indices.iter().enumerate() {
            assert_eq!(fs.mask[row], mask[src]);
        }
        assert!(fs.mask[128..].iter().all(|&m| m == UNKNOWN_MASK));
    }

    #[test]
    fn shared_weights_across_frames() {
        let cfg = BackboneConfig {
            budget: 0,
            ..Default::default()
        };
        let (store, w) = weights(&cfg, 4);
        let a = random_cloud(40, 5);
        let b = random_cloud(30, 6);
        let run = |x: &[[f64; 3]], y: &[[f64; 3]]| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, &[]);
            let fs = extract_features(&mut g, &p, &w, &cfg, x, &vec![0.0; x.len()], y).unwrap();
            g.value(fs.feats).clone()
        };
        let same = run(&a, &a);
        assert_eq!(same.data()[..40 * 32], same.data()[40 * 32..]);
        let ab = run(&a, &b);
        let ba = run(&b, &a);
        assert_eq!(ab.data()[..40 * 32], ba.data()[30 * 32..]);
        assert_eq!(ab.data()[40 * 32..], ba.data()[..30 * 32]);
    }

    #[test]
    fn edge_conv_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let b = store.add("b", Tensor::new(&[1], vec![0.1]).unwrap());
        let layer = Linear { w, b: Some(b) };
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let x = g.constant(Tensor::new(&[3, 2], vec![0.0, 1.0, 1.0, 0.5, 2.0, -1.0]).unwrap());
        // k = 1 with the point itself as neighbour
        let y = edge_conv(&mut g, &p, x, &[0, 1, 2], 1, &layer).unwrap();
        let xs = g.value(x).clone();
        for i in 0..3 {
            let pre = xs.at(i, 0) * 1.0 + xs.at(i, 1) * -2.0 + 0.1;
            assert!((g.value(y).at(i, 0) - pre.max(0.0)).abs() < 1e-15);
        }
        // 3-point line, k = 2: hand-rolled per-edge evaluation
        let nb = [1, 2, 0, 2, 1, 0];
        let y = edge_conv(&mut g, &p, x, &nb, 2, &layer).unwrap();
        for i in 0..3 {
            let mut best = f64::NEG_INFINITY;
            for &j in &nb[2 * i..2 * i + 2] {
                let e = [
                    xs.at(i, 0),
                    xs.at(i, 1),
                    xs.at(j, 0) - xs.at(i, 0),
                    xs.at(j, 1) - xs.at(i, 1),
                ];
                let v = e[0] * 1.0 + e[1] * -2.0 + e[2] * 0.5 + e[3] * 3.0 + 0.1;
                best = best.max(v.max(0.0));
            }
            assert!((g.value(y).at(i, 0) - best).abs() < 1e-15);
        }
    }

    #[test]
    fn edge_conv_constant_bias() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[4, 2]));
        let b = store.add("b", Tensor::new(&[2], vec![0.7, -0.3]).unwrap());
        let layer = Linear { w, b: Some(b) };
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = edge_conv(&mut g, &p, x, &[1, 0], 1, &layer).unwrap();
        assert_eq!(g.value(y).data(), &[0.7, 0.0, 0.7, 0.0]);
    }

    #[test]
    fn empty_cloud_rejected() {
        let cfg = BackboneConfig::default();
        let (store, w) = weights(&cfg, 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g, &[]);
        let r = extract_features(&mut g, &p, &w, &cfg, &[], &[], &[[0.0; 3]]);
        assert!(matches!(r, Err(BackboneError::EmptyCloud("previous"))));
    }
}
