//! Target-centric transformer: global attention over both frames that
//! folds the targetness mask into point features, refines the mask layer by
//! layer and votes a target center for every point.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureSet;
use crate::dropout::Dropout;
use crate::params::{Bound, Init, Linear, Mlp, Norm, ParamId};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var, MASKED_LOGIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    SemiDropout,
    Gated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub key_width: usize,
    pub value_width: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub ffn_hidden: usize,
    /// Hidden width of the per-layer mask and center heads.
    pub head_hidden: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 32,
            key_width: 16,
            value_width: 16,
            dropout: 0.1,
            variant: Variant::SemiDropout,
            ffn_hidden: 64,
            head_hidden: 32,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.layers == 0 {
            return Err("transformer.layers must be at least 1".into());
        }
        if self.heads == 0 || self.width == 0 || self.key_width == 0 || self.value_width == 0 {
            return Err("transformer widths and head count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("transformer.dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of raw coordinates. Each axis gets `width / 3`
/// columns of interleaved `sin`, `cos` pairs at frequencies
/// `10000^(-2j / (width / 3))`; the axes are concatenated and zero-padded.
pub fn positional_encoding(coords: &[[f64; 3]], width: usize) -> Tensor {
    let per_axis = width / 3;
    let bands = per_axis / 2;
    let mut data = vec![0.0; coords.len() * width];
    for (i, p) in coords.iter().enumerate() {
        let row = &mut data[i * width..(i + 1) * width];
        for (axis, &v) in p.iter().enumerate() {
            for j in 0..bands {
                let f = 10000f64.powf(-2.0 * j as f64 / per_axis as f64);
                let (s, c) = (v * f).sin_cos();
                row[axis * per_axis + 2 * j] = s;
                row[axis * per_axis + 2 * j + 1] = c;
            }
        }
    }
    Tensor::new(&[coords.len().max(1), width], data).unwrap_or_else(|_| Tensor::zeros(&[1, width]))
}

#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
}

impl AttentionWeights {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, cfg: &AttentionConfig) -> Self {
        let (c, dk, dv) = (cfg.width, cfg.key_width, cfg.value_width);
        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut value = Vec::new();
        for h in 0..cfg.heads {
            query.push(init.matrix(&format!("{name}.wq{h}"), c, dk));
            key.push(init.matrix(&format!("{name}.wk{h}"), c, dk));
            value.push(init.matrix(&format!("{name}.wv{h}"), c, dv));
        }
        let output = init.matrix(&format!("{name}.wo"), cfg.heads * dv, c);
        Self {
            query,
            key,
            value,
            output,
        }
    }
}

/// Per-head attention weights `softmax(Q Kᵀ / √d_k)`. Entries of `support`
/// that are `false` are excluded from each row's softmax.
pub fn attention_probs(
    g: &mut Graph,
    p: &Bound,
    w: &AttentionWeights,
    xq: Var,
    xk: Var,
    support: Option<&Tensor>,
) -> Result<Vec<Var>> {
    let mask = support.map(|s| g.constant(s.clone()));
    let mut probs = Vec::with_capacity(w.query.len());
    for (&wq, &wk) in w.query.iter().zip(&w.key) {
        let q = g.matmul(xq, p[wq])?;
        let k = g.matmul(xk, p[wk])?;
        let dk = g.value(k).cols() as f64;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let mut s = g.scale(s, 1.0 / dk.sqrt())?;
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        probs.push(g.softmax_rows(s)?);
    }
    Ok(probs)
}

/// `Concat_i(A_i · X_V W^V_i) W^O` for precomputed attention weights.
pub fn apply_values(g: &mut Graph, p: &Bound, w: &AttentionWeights, probs: &[Var], xv: Var) -> Result<Var> {
    let mut heads = Vec::with_capacity(probs.len());
    for (&a, &wv) in probs.iter().zip(&w.value) {
        let v = g.matmul(xv, p[wv])?;
        heads.push(g.matmul(a, v)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(cat, p[w.output])
}

pub fn multi_head_attention(
    g: &mut Graph,
    p: &Bound,
    w: &AttentionWeights,
    xq: Var,
    xk: Var,
    xv: Var,
) -> Result<Var> {
    let probs = attention_probs(g, p, w, xq, xk, None)?;
    apply_values(g, p, w, &probs, xv)
}

/// Additive logit mask: `0` where `support[i][j]`, [`MASKED_LOGIT`] elsewhere.
pub fn support_logits(support: &[Vec<bool>]) -> Result<Tensor> {
    let n = support.len();
    let data = support
        .iter()
        .flat_map(|row| row.iter().map(|&s| if s { 0.0 } else { MASKED_LOGIT }))
        .collect();
    Tensor::new(&[n, n], data)
}

#[derive(Clone, Debug)]
pub struct GateNorms {
    pub mask: Norm,
    pub feature: Norm,
    pub out: Norm,
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub attn: AttentionWeights,
    pub attn_norm: Norm,
    /// Mask embedding (vanilla and semi-dropout layers).
    pub mask_embed: Option<Linear>,
    pub gate: Option<GateNorms>,
    pub ffn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub mask_head: Mlp,
    pub center_head: Mlp,
}

impl LayerWeights {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, cfg: &AttentionConfig) -> Self {
        let c = cfg.width;
        let attn = AttentionWeights::init(init, &format!("{name}.attn"), cfg);
        let attn_norm = init.norm(&format!("{name}.attn_norm"), c);
        let (mask_embed, gate) = match cfg.variant {
            Variant::Gated => (
                None,
                Some(GateNorms {
                    mask: init.norm(&format!("{name}.gate_m"), c),
                    feature: init.norm(&format!("{name}.gate_f"), c),
                    out: init.norm(&format!("{name}.gate_o"), c),
                }),
            ),
            _ => (Some(init.linear(&format!("{name}.mask_embed"), 1, c, true)), None),
        };
        Self {
            attn,
            attn_norm,
            mask_embed,
            gate,
            ffn_norm: init.norm(&format!("{name}.ffn_norm"), c),
            ffn_in: init.linear(&format!("{name}.ffn1"), c, cfg.ffn_hidden, true),
            ffn_out: init.linear(&format!("{name}.ffn2"), cfg.ffn_hidden, c, true),
            mask_head: init.mlp(&format!("{name}.mask_head"), c, cfg.head_hidden, 1),
            center_head: init.mlp(&format!("{name}.center_head"), c, cfg.head_hidden, 3),
        }
    }
}

fn missing(what: &str) -> TensorError {
    TensorError::Invalid {
        op: "transformer",
        msg: format!("layer weights lack {what} required by the configured variant"),
    }
}

/// Normalized input plus the query/key stream shared by every variant.
fn prenorm(g: &mut Graph, p: &Bound, w: &LayerWeights, x: Var, pe: Var) -> Result<(Var, Var)> {
    let xbar = w.attn_norm.forward(g, p, x)?;
    let xqk = g.add(xbar, pe)?;
    Ok((xbar, xqk))
}

/// `x + Dropout(MHA(X̄+PE, X̄+PE, X̄+ME))`.
pub fn attention_sublayer_vanilla(
    g: &mut Graph,
    p: &Bound,
    w: &LayerWeights,
    x: Var,
    mask: Var,
    pe: Var,
    drop: &mut Dropout,
) -> Result<Var> {
    let me_proj = w.mask_embed.ok_or_else(|| missing("mask embedding"))?;
    let (xbar, xqk) = prenorm(g, p, w, x, pe)?;
    let me = me_proj.forward(g, p, mask)?;
    let xv = g.add(xbar, me)?;
    let attn = multi_head_attention(g, p, &w.attn, xqk, xqk, xv)?;
    let attn = drop.apply(g, attn)?;
    g.add(x, attn)
}

/// `x + Dropout(MHA(.., X̄)) + MHA(.., ME)` with one set of attention weights.
pub fn attention_sublayer_semi(
    g: &mut Graph,
    p: &Bound,
    w: &LayerWeights,
    x: Var,
    mask: Var,
    pe: Var,
    drop: &mut Dropout,
) -> Result<Var> {
    let me_proj = w.mask_embed.ok_or_else(|| missing("mask embedding"))?;
    let (xbar, xqk) = prenorm(g, p, w, x, pe)?;
    let me = me_proj.forward(g, p, mask)?;
    let probs = attention_probs(g, p, &w.attn, xqk, xqk, None)?;
    semi_combine(g, p, &w.attn, &probs, x, xbar, me, drop)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn semi_combine(
    g: &mut Graph,
    p: &Bound,
    attn: &AttentionWeights,
    probs: &[Var],
    x: Var,
    xbar: Var,
    embed: Var,
    drop: &mut Dropout,
) -> Result<Var> {
    let feat = apply_values(g, p, attn, probs, xbar)?;
    let feat = drop.apply(g, feat)?;
    let masked = apply_values(g, p, attn, probs, embed)?;
    let y = g.add(x, feat)?;
    g.add(y, masked)
}

/// Gated fusion: the attended mask gates the features, and the masked
/// features are attended with a residual; both branches are normalized,
/// summed and normalized again.
pub fn attention_sublayer_gated(
    g: &mut Graph,
    p: &Bound,
    w: &LayerWeights,
    x: Var,
    mask: Var,
    pe: Var,
) -> Result<Var> {
    let norms = w.gate.as_ref().ok_or_else(|| missing("gate norms"))?;
    let (xbar, xqk) = prenorm(g, p, w, x, pe)?;
    let c = g.value(xbar).cols();
    let mbar = g.repeat_cols(mask, c)?;
    let probs = attention_probs(g, p, &w.attn, xqk, xqk, None)?;

    let gate = apply_values(g, p, &w.attn, &probs, mbar)?;
    let gated = g.mul(gate, xbar)?;
    let xm = norms.mask.forward(g, p, gated)?;

    let masked = g.mul(mbar, xbar)?;
    let attended = apply_values(g, p, &w.attn, &probs, masked)?;
    let resid = g.add(attended, xbar)?;
    let xf = norms.feature.forward(g, p, resid)?;

    let sum = g.add(xf, xm)?;
    norms.out.forward(g, p, sum)
}

/// `x + Dropout(max(0, LN(x) W1 + b1) W2 + b2)`.
pub fn ffn_sublayer(g: &mut Graph, p: &Bound, w: &LayerWeights, x: Var, drop: &mut Dropout) -> Result<Var> {
    let h = w.ffn_norm.forward(g, p, x)?;
    let h = w.ffn_in.forward(g, p, h)?;
    let h = g.relu(h)?;
    let h = w.ffn_out.forward(g, p, h)?;
    let h = drop.apply(g, h)?;
    g.add(x, h)
}

/// Output of one transformer layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    pub feats: Var,
    /// `N×1`, each entry in `(0, 1)` after the first layer.
    pub mask: Var,
    /// `N×3` voted target centers.
    pub centers: Var,
}

pub fn layer_forward(
    g: &mut Graph,
    p: &Bound,
    w: &LayerWeights,
    cfg: &AttentionConfig,
    state: &LayerState,
    coords: Var,
    pe: Var,
    drop: &mut Dropout,
) -> Result<LayerState> {
    let x = match cfg.variant {
        Variant::Vanilla => attention_sublayer_vanilla(g, p, w, state.feats, state.mask, pe, drop)?,
        Variant::SemiDropout => attention_sublayer_semi(g, p, w, state.feats, state.mask, pe, drop)?,
        Variant::Gated => attention_sublayer_gated(g, p, w, state.feats, state.mask, pe)?,
    };
    let feats = ffn_sublayer(g, p, w, x, drop)?;
    let logit = w.mask_head.forward(g, p, feats)?;
    let mask = g.sigmoid(logit)?;
    let offset = w.center_head.forward(g, p, feats)?;
    let centers = g.add(coords, offset)?;
    Ok(LayerState { feats, mask, centers })
}

pub fn coords_tensor(coords: &[[f64; 3]]) -> Result<Tensor> {
    Tensor::new(&[coords.len(), 3], coords.iter().flatten().copied().collect())
}

/// Runs every layer in sequence and keeps all intermediate states.
pub fn transformer_forward(
    g: &mut Graph,
    p: &Bound,
    weights: &[LayerWeights],
    cfg: &AttentionConfig,
    fs: &FeatureSet,
    drop: &mut Dropout,
) -> Result<Vec<LayerState>> {
    if weights.len() != cfg.layers {
        return Err(TensorError::Invalid {
            op: "transformer_forward",
            msg: format!("{} weight sets for {} layers", weights.len(), cfg.layers),
        });
    }
    let n = fs.len();
    let coords = g.constant(coords_tensor(&fs.coords)?);
    let pe = g.constant(positional_encoding(&fs.coords, cfg.width));
    let mask = g.constant(Tensor::new(&[n, 1], fs.mask.clone())?);
    let mut state = LayerState {
        feats: fs.feats,
        mask,
        centers: coords,
    };
    let mut states = Vec::with_capacity(cfg.layers);
    for w in weights {
        state = layer_forward(g, p, w, cfg, &state, coords, pe, drop)?;
        states.push(state);
    }
    Ok(states)
}
