//! Graph operations over a set of per-frame nodes.
//!
//! Every operation maps a `[K_total × C_in]` node-feature matrix to a
//! `[K_total × C_out]` one; positions and frame membership never change.
//! All operations except node attention end in layer normalization followed
//! by a leaky rectifier, which [`Pass::pre_activation`] can bypass.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::engine::{layernorm_leakyrelu, top_k, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};

/// Node features plus the positional layout they live on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSet {
    /// `[K_total × C]`
    pub features: Tensor,
    /// `[K_total × 3]` normalized `(x, y, t)` centers.
    pub positions: Tensor,
    pub frame_index: Vec<usize>,
    pub frames: usize,
}

impl NodeSet {
    pub fn new(features: Tensor, positions: Tensor, frame_index: Vec<usize>, frames: usize) -> Result<Self> {
        let n = features.rows();
        if features.shape().len() != 2 || positions.shape() != [n, 3] || frame_index.len() != n {
            return Err(Error::dim(
                "node_set",
                format!("features {:?}, positions {:?}, {} frame indices", features.shape(), positions.shape(), frame_index.len()),
            ));
        }
        if positions.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("node positions must lie in [0, 1]"));
        }
        if frames == 0 || frame_index.iter().any(|&t| t >= frames) {
            return Err(Error::config("frame index out of range"));
        }
        let per_frame = n / frames;
        if per_frame * frames != n || (0..frames).any(|t| frame_index.iter().filter(|&&f| f == t).count() != per_frame) {
            return Err(Error::config("every frame must hold the same number of nodes"));
        }
        Ok(NodeSet { features, positions, frame_index, frames })
    }

    /// Frame-major layout: node `t·K + k` is node `k` of frame `t`.
    pub fn frame_major(features: Tensor, positions: Tensor, frames: usize) -> Result<Self> {
        let n = features.rows();
        let k = n / frames.max(1);
        let frame_index = (0..n).map(|i| i / k.max(1)).collect();
        Self::new(features, positions, frame_index, frames)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn layout(&self) -> Layout<'_> {
        Layout { positions: &self.positions, frame_index: &self.frame_index, frames: self.frames }
    }

    pub fn with_features(&self, features: Tensor) -> NodeSet {
        NodeSet { features, ..self.clone() }
    }
}

/// Per-frame background feature grids, `[T × h × w × C]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundMap {
    pub maps: Tensor,
}

impl BackgroundMap {
    pub fn new(maps: Tensor) -> Result<Self> {
        if maps.shape().len() != 4 {
            return Err(Error::dim("background_map", format!("expected [T,h,w,C], got {:?}", maps.shape())));
        }
        Ok(BackgroundMap { maps })
    }

    pub fn frames(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn cells(&self) -> usize {
        self.maps.shape()[1] * self.maps.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.maps.shape()[3]
    }

    /// All cells as rows, frame-major: `[T·h·w × C]`.
    pub fn as_rows(&self) -> Tensor {
        self.maps.reshape(&[self.frames() * self.cells(), self.channels()]).expect("same element count")
    }
}

/// Positional side information shared by every supernode of a sample.
#[derive(Debug, Clone, Copy)]
pub struct Layout<'n> {
    pub positions: &'n Tensor,
    pub frame_index: &'n [usize],
    pub frames: usize,
}

impl Layout<'_> {
    pub fn len(&self) -> usize {
        self.frame_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_index.is_empty()
    }

    pub fn members(&self, frame: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.frame_index[i] == frame).collect()
    }
}

/// In-graph inputs of a graph operation besides the node features.
#[derive(Clone, Copy)]
pub struct OpInput<'n> {
    pub layout: Layout<'n>,
    /// Projected background cells, `[T·h·w × C]` frame-major.
    pub background: Option<Var>,
}

/// Evaluation mode of a forward pass.
pub struct Pass<'r> {
    /// Training-mode randomness for dropout; `None` means evaluation mode.
    pub rng: Option<&'r mut dyn RngCore>,
    /// Skip the normalization + activation on every operation (test probe).
    pub pre_activation: bool,
}

impl Pass<'_> {
    pub fn eval() -> Pass<'static> {
        Pass { rng: None, pre_activation: false }
    }

    pub fn probe() -> Pass<'static> {
        Pass { rng: None, pre_activation: true }
    }
}

impl<'r> Pass<'r> {
    pub fn train(rng: &'r mut dyn RngCore) -> Pass<'r> {
        Pass { rng: Some(rng), pre_activation: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Zero,
    Identity,
    FeatureAggregation,
    DifferencePropagation,
    TemporalConvolution,
    BackgroundIncorporation,
    NodeAttention,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Zero,
        OpKind::Identity,
        OpKind::FeatureAggregation,
        OpKind::DifferencePropagation,
        OpKind::TemporalConvolution,
        OpKind::BackgroundIncorporation,
        OpKind::NodeAttention,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Identity => "identity",
            OpKind::FeatureAggregation => "feat_aggr",
            OpKind::DifferencePropagation => "diff_prop",
            OpKind::TemporalConvolution => "temp_conv",
            OpKind::BackgroundIncorporation => "back_incor",
            OpKind::NodeAttention => "node_att",
        }
    }

    pub fn uses_background(self) -> bool {
        self == OpKind::BackgroundIncorporation
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL.into_iter().find(|k| k.short_name() == s).ok_or_else(|| Error::Parse(format!("unknown graph operation '{s}'")))
    }
}

/// Shapes and hyper-parameters shared by all operations of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// `h·w` of the background grid.
    pub grid_cells: usize,
    pub kernel_size: usize,
    /// Top-M similar nodes used by node attention.
    pub attention_m: usize,
    pub identity_dropout: f64,
    pub slope: f64,
}

impl Default for OpConfig {
    fn default() -> Self {
        OpConfig { c_in: 256, c_out: 256, grid_cells: 49, kernel_size: 7, attention_m: 5, identity_dropout: 0.3, slope: LEAKY_SLOPE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Learnable parameters of one graph operation instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OperationParams {
    Zero,
    Identity,
    FeatureAggregation { w: ParamId, u: ParamId, norm: NormParams },
    DifferencePropagation { w: ParamId, u: ParamId, norm: NormParams },
    TemporalConvolution { kernel: ParamId, norm: NormParams },
    BackgroundIncorporation { u: ParamId, v: ParamId, w: ParamId, norm: NormParams },
    NodeAttention { w: ParamId },
}

impl OperationParams {
    /// Registers freshly initialized parameters for `kind` under `prefix`.
    pub fn init<R: Rng + ?Sized>(kind: OpKind, cfg: &OpConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        let (ci, co) = (cfg.c_in, cfg.c_out);
        if matches!(kind, OpKind::Identity | OpKind::NodeAttention) && ci != co {
            return Err(Error::config(format!("{kind} needs C_in == C_out, got {ci} -> {co}")));
        }
        if cfg.kernel_size.is_multiple_of(2) {
            return Err(Error::config("temporal kernel size must be odd"));
        }
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), ParamGroup::Operations, t);
        let transform_std = 1.0 / (ci as f64).sqrt();
        let affinity_std = 1.0 / ci as f64;
        let params = match kind {
            OpKind::Zero => OperationParams::Zero,
            OpKind::Identity => OperationParams::Identity,
            OpKind::FeatureAggregation | OpKind::DifferencePropagation => {
                let w = add("w", Tensor::randn(&[co, ci], transform_std, rng));
                let u = add("u", Tensor::randn(&[ci, ci], affinity_std, rng));
                let norm = NormParams { gain: add("ln_gain", Tensor::full(&[co], 1.0)), bias: add("ln_bias", Tensor::zeros(&[co])) };
                if kind == OpKind::FeatureAggregation {
                    OperationParams::FeatureAggregation { w, u, norm }
                } else {
                    OperationParams::DifferencePropagation { w, u, norm }
                }
            }
            OpKind::TemporalConvolution => {
                let k = cfg.kernel_size;
                let std = 1.0 / ((ci * k) as f64).sqrt();
                OperationParams::TemporalConvolution {
                    kernel: add("kernel", Tensor::randn(&[k, co, ci], std, rng)),
                    norm: NormParams { gain: add("ln_gain", Tensor::full(&[co], 1.0)), bias: add("ln_bias", Tensor::zeros(&[co])) },
                }
            }
            OpKind::BackgroundIncorporation => {
                let cells = cfg.grid_cells;
                OperationParams::BackgroundIncorporation {
                    u: add("u", Tensor::randn(&[ci, ci], affinity_std, rng)),
                    v: add("v", Tensor::randn(&[co, cells], 1.0 / (cells as f64).sqrt(), rng)),
                    w: add("w", Tensor::randn(&[co, ci], transform_std, rng)),
                    norm: NormParams { gain: add("ln_gain", Tensor::full(&[co], 1.0)), bias: add("ln_bias", Tensor::zeros(&[co])) },
                }
            }
            OpKind::NodeAttention => OperationParams::NodeAttention { w: add("w", Tensor::randn(&[1, 4 * cfg.attention_m], 0.01, rng)) },
        };
        Ok(params)
    }

    pub fn kind(&self) -> OpKind {
        match self {
            OperationParams::Zero => OpKind::Zero,
            OperationParams::Identity => OpKind::Identity,
            OperationParams::FeatureAggregation { .. } => OpKind::FeatureAggregation,
            OperationParams::DifferencePropagation { .. } => OpKind::DifferencePropagation,
            OperationParams::TemporalConvolution { .. } => OpKind::TemporalConvolution,
            OperationParams::BackgroundIncorporation { .. } => OpKind::BackgroundIncorporation,
            OperationParams::NodeAttention { .. } => OpKind::NodeAttention,
        }
    }

    /// Evaluates the operation on the graph.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, input: &OpInput<'_>, cfg: &OpConfig, pass: &mut Pass<'_>) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[0] != input.layout.len() {
            return Err(Error::dim("graph_op", format!("features {:?} vs {} nodes", g.shape(x), input.layout.len())));
        }
        let (pre, norm) = match *self {
            OperationParams::Zero => return zero_op(g, x, cfg.c_out),
            OperationParams::Identity => return identity_op(g, x, cfg.identity_dropout, pass),
            OperationParams::NodeAttention { w } => return node_attention(g, x, w, input.layout, cfg.attention_m),
            OperationParams::FeatureAggregation { w, u, norm } => (feature_aggregation(g, x, w, u)?, norm),
            OperationParams::DifferencePropagation { w, u, norm } => (difference_propagation(g, x, w, u)?, norm),
            OperationParams::TemporalConvolution { kernel, norm } => (temporal_convolution(g, x, kernel, input.layout)?, norm),
            OperationParams::BackgroundIncorporation { u, v, w, norm } => {
                let bg = input.background.ok_or_else(|| Error::config("background incorporation needs a background map"))?;
                (background_incorporation(g, x, bg, u, v, w, input.layout)?, norm)
            }
        };
        if pass.pre_activation {
            return Ok(pre);
        }
        let (gain, bias) = (g.param(norm.gain)?, g.param(norm.bias)?);
        layernorm_leakyrelu(g, pre, gain, bias, cfg.slope)
    }
}

/// `z_i = Σ_j a_ij W x_j`, `a_i = softmax_j(x_iᵀ U x_j)`.
fn feature_aggregation(g: &mut Graph<'_>, x: Var, w: ParamId, u: ParamId) -> Result<Var> {
    let (w, u) = (g.param(w)?, g.param(u)?);
    let xu = g.matmul(x, u)?;
    let xt = g.transpose(x)?;
    let logits = g.matmul(xu, xt)?;
    let a = g.row_softmax(logits)?;
    let h = g.matmul(a, x)?;
    let wt = g.transpose(w)?;
    g.matmul(h, wt)
}

/// `z_i = Σ_{j≠i} a_ij W (x_i − x_j)` with the diagonal masked out of the
/// affinity softmax. Pairwise differences are formed explicitly so identical
/// nodes contribute exactly zero.
fn difference_propagation(g: &mut Graph<'_>, x: Var, w: ParamId, u: ParamId) -> Result<Var> {
    let n = g.shape(x)[0];
    let w = g.param(w)?;
    if n < 2 {
        let co = g.shape(w)[0];
        return g.constant(Tensor::zeros(&[n, co]));
    }
    let u = g.param(u)?;
    let xu = g.matmul(x, u)?;
    let xt = g.transpose(x)?;
    let logits = g.matmul(xu, xt)?;
    let mask: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
    let a = g.row_softmax_masked(logits, Some(&mask))?;
    let xi = g.gather_rows(x, (0..n * n).map(|k| Some(k / n)).collect())?;
    let xj = g.gather_rows(x, (0..n * n).map(|k| Some(k % n)).collect())?;
    let diff = g.sub(xi, xj)?;
    let weighted = g.mul_col(diff, a)?;
    let d = g.sum_row_groups(weighted, n)?;
    let wt = g.transpose(w)?;
    g.matmul(d, wt)
}

/// For node `i` and frame `τ`, the index of the frame-`τ` node with the largest
/// inner product against `x_i` (ties to the lower index).
pub fn nearest_nodes(features: &Tensor, layout: Layout<'_>) -> Vec<Vec<usize>> {
    let members: Vec<Vec<usize>> = (0..layout.frames).map(|t| layout.members(t)).collect();
    (0..layout.len())
        .map(|i| {
            let xi = features.row(i);
            members
                .iter()
                .map(|frame| {
                    let mut best = frame[0];
                    let mut best_score = f64::NEG_INFINITY;
                    for &j in frame {
                        let s: f64 = xi.iter().zip(features.row(j)).map(|(a, b)| a * b).sum();
                        if s > best_score {
                            best = j;
                            best_score = s;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

/// Convolves each node's nearest-node sequence over time and reads the
/// result at the node's own frame.
fn temporal_convolution(g: &mut Graph<'_>, x: Var, kernel: ParamId, layout: Layout<'_>) -> Result<Var> {
    // Only position t_i of node i's sequence is read, so each node gathers its
    // own k-tap window and the convolution becomes one matrix product.
    let n = g.shape(x)[0];
    let t = layout.frames;
    let c = g.shape(x)[1];
    let kernel = g.param(kernel)?;
    let (k, co, ci) = match *g.shape(kernel) {
        [k, co, ci] => (k, co, ci),
        _ => return Err(Error::dim("temporal_convolution", format!("kernel {:?}", g.shape(kernel)))),
    };
    if ci != c || k % 2 == 0 {
        return Err(Error::dim("temporal_convolution", format!("kernel {:?} for {c} channels", g.shape(kernel))));
    }
    let pad = (k - 1) / 2;
    let seq = nearest_nodes(g.value(x), layout);
    let mut index = Vec::with_capacity(n * k);
    for (i, s) in seq.iter().enumerate() {
        let ti = layout.frame_index[i];
        for r in 0..k {
            let src = ti + r;
            index.push((src >= pad && src - pad < t).then(|| s[src - pad]));
        }
    }
    let windows = g.gather_rows(x, index)?;
    let windows = g.reshape(windows, &[n, k * c])?;
    let flat: Vec<usize> = (0..k).flat_map(|r| (0..ci).flat_map(move |cin| (0..co).map(move |cout| (r * co + cout) * ci + cin))).collect();
    let taps = g.gather_elems(kernel, flat, &[k * ci, co])?;
    g.matmul(windows, taps)
}

/// Relation (`V a_i`) plus aggregation (`Σ_j a_ij W y_j`) against the node's
/// own frame background cells, with `a_i = softmax_j(x_iᵀ U y_j)`.
#[allow(clippy::too_many_arguments)]
fn background_incorporation(g: &mut Graph<'_>, x: Var, bg: Var, u: ParamId, v: ParamId, w: ParamId, layout: Layout<'_>) -> Result<Var> {
    let (u, v, w) = (g.param(u)?, g.param(v)?, g.param(w)?);
    let total = g.shape(bg)[0];
    let cells = g.shape(v)[1];
    if cells * layout.frames != total {
        return Err(Error::dim("background_incorporation", format!("{total} background rows for {} frames of {cells} cells", layout.frames)));
    }
    let n = layout.len();
    let xu = g.matmul(x, u)?;
    let vt = g.transpose(v)?;
    let wt = g.transpose(w)?;
    let transformed = g.matmul(bg, wt)?;
    let mut parts = Vec::with_capacity(layout.frames);
    let mut order = Vec::with_capacity(n);
    for f in 0..layout.frames {
        let members = layout.members(f);
        if members.is_empty() {
            continue;
        }
        let rows: Vec<Option<usize>> = (f * cells..(f + 1) * cells).map(Some).collect();
        let q = g.gather_rows(xu, members.iter().map(|&i| Some(i)).collect())?;
        let keys = g.gather_rows(bg, rows.clone())?;
        let keys_t = g.transpose(keys)?;
        let logits = g.matmul(q, keys_t)?;
        let a = g.row_softmax(logits)?;
        let relation = g.matmul(a, vt)?;
        let values = g.gather_rows(transformed, rows)?;
        let aggregated = g.matmul(a, values)?;
        parts.push(g.add(relation, aggregated)?);
        order.extend(members);
    }
    let stacked = g.concat_rows(&parts)?;
    let mut inverse = vec![None; n];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = Some(pos);
    }
    g.gather_rows(stacked, inverse)
}

/// Top-M neighbours of every node by inner product, self excluded.
pub fn attention_neighbours(features: &Tensor, m: usize) -> Vec<Vec<usize>> {
    let n = features.rows();
    (0..n)
        .map(|i| {
            let scores: Vec<f64> = (0..n).map(|j| features.row(i).iter().zip(features.row(j)).map(|(a, b)| a * b).sum()).collect();
            top_k(&scores, m, Some(i))
        })
        .collect()
}

/// `z_i = σ(W [a_i; Δs_i]) · x_i` over the top-M similar nodes. Missing
/// neighbours (fewer than M+1 nodes) are zero-padded.
fn node_attention(g: &mut Graph<'_>, x: Var, w: ParamId, layout: Layout<'_>, m: usize) -> Result<Var> {
    let n = g.shape(x)[0];
    let neighbours = attention_neighbours(g.value(x), m);
    let xt = g.transpose(x)?;
    let sim = g.matmul(x, xt)?;
    let mut flat = Vec::with_capacity(n * m);
    let mut offsets = vec![0.0; n * 3 * m];
    let pos = layout.positions;
    for (i, nb) in neighbours.iter().enumerate() {
        flat.extend(nb.iter().map(|&j| i * n + j));
        for (slot, &j) in nb.iter().enumerate() {
            for d in 0..3 {
                offsets[i * 3 * m + slot * 3 + d] = pos.get2(i, d) - pos.get2(j, d);
            }
        }
    }
    let found = neighbours.first().map_or(0, Vec::len);
    let mut parts = Vec::with_capacity(3);
    if found > 0 {
        parts.push(g.gather_elems(sim, flat, &[n, found])?);
    }
    if found < m {
        parts.push(g.constant(Tensor::zeros(&[n, m - found]))?);
    }
    parts.push(g.constant(Tensor::new(vec![n, 3 * m], offsets)?)?);
    let features = g.concat_cols(&parts)?;
    let w = g.param(w)?;
    let wt = g.transpose(w)?;
    let logits = g.matmul(features, wt)?;
    let gate = g.sigmoid(logits)?;
    g.mul_col(x, gate)
}

pub fn zero_op(g: &mut Graph<'_>, x: Var, c_out: usize) -> Result<Var> {
    let n = g.shape(x)[0];
    g.constant(Tensor::zeros(&[n, c_out]))
}

pub fn identity_op(g: &mut Graph<'_>, x: Var, rate: f64, pass: &mut Pass<'_>) -> Result<Var> {
    match pass.rng.as_deref_mut() {
        Some(rng) => g.dropout(x, rate, Some(rng)),
        None => Ok(x),
    }
}

/// Per-node linear map `x W ᵀ`, `W: [C_out × C_in]`.
pub fn channel_project(g: &mut Graph<'_>, x: Var, w: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    g.matmul(x, wt)
}

/// Runs a single operation eagerly on concrete inputs.
pub fn apply(
    params: &OperationParams,
    store: &ParamStore,
    cfg: &OpConfig,
    nodes: &NodeSet,
    background: Option<&BackgroundMap>,
    pass: &mut Pass<'_>,
) -> Result<NodeSet> {
    let mut g = Graph::with_params(store);
    let x = g.input(&nodes.features)?;
    let bg_rows = background.map(BackgroundMap::as_rows);
    let bg = match &bg_rows {
        Some(rows) => Some(g.input(rows)?),
        None => None,
    };
    let input = OpInput { layout: nodes.layout(), background: bg };
    let y = params.forward(&mut g, x, &input, cfg, pass)?;
    Ok(nodes.with_features(g.value(y).clone()))
}
