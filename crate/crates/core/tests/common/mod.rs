//! Independent reference implementations and numeric checkers shared by the
//! integration tests. Oracles work on plain nested vectors and never call the
//! engine.

#![allow(dead_code)]

use graphops::engine::{Graph, ParamStore, Tensor, Var};
use graphops::graphops::{BackgroundMap, NodeSet, OpConfig, OperationParams};
use graphops::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_mat(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| {
            assert_eq!(r.len(), s.len(), "column count");
            r.iter().zip(s).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &Mat, v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn bilinear(a: &[f64], u: &Mat, b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (p, ap) in a.iter().enumerate() {
        for (q, bq) in b.iter().enumerate() {
            s += ap * u[p][q] * bq;
        }
    }
    s
}

/// Softmax over the entries with `keep[j]`; the rest get weight zero.
fn softmax(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = logits.iter().zip(keep).filter(|(_, &k)| k).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().zip(keep).map(|(l, &k)| if k { (l - max).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Small random operation instance.
pub struct Instance {
    pub frames: usize,
    pub per_frame: usize,
    pub channels: usize,
    pub grid: (usize, usize),
    pub nodes: NodeSet,
    pub background: BackgroundMap,
}

impl Instance {
    pub fn random(seed: u64, max_nodes: usize, max_frames: usize, max_channels: usize) -> Self {
        let mut r = rng(seed);
        let frames = r.random_range(1..=max_frames);
        let per_frame = r.random_range(1..=(max_nodes / frames).max(1));
        let channels = r.random_range(2..=max_channels);
        let grid = (r.random_range(1..=2), r.random_range(1..=2));
        Self::with_shape(seed, frames, per_frame, channels, grid)
    }

    pub fn with_shape(seed: u64, frames: usize, per_frame: usize, channels: usize, grid: (usize, usize)) -> Self {
        let mut r = rng(seed ^ 0x1157);
        let n = frames * per_frame;
        let feats = Tensor::randn(&[n, channels], 1.0, &mut r);
        let pos = Tensor::new(vec![n, 3], (0..n * 3).map(|_| r.random::<f64>()).collect()).unwrap();
        let nodes = NodeSet::frame_major(feats, pos, frames).unwrap();
        let maps = Tensor::randn(&[frames, grid.0, grid.1, channels], 1.0, &mut r);
        Instance { frames, per_frame, channels, grid, nodes, background: BackgroundMap::new(maps).unwrap() }
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn op_config(&self, c_out: usize, m: usize, k: usize) -> OpConfig {
        OpConfig { c_in: self.channels, c_out, grid_cells: self.cells(), kernel_size: k, attention_m: m, ..OpConfig::default() }
    }

    pub fn x(&self) -> Mat {
        to_mat(&self.nodes.features)
    }

    pub fn positions(&self) -> Mat {
        to_mat(&self.nodes.positions)
    }

    /// Background cells of frame `t`, row-major over the grid.
    pub fn frame_cells(&self, t: usize) -> Mat {
        let rows = to_mat(&self.background.as_rows());
        rows[t * self.cells()..(t + 1) * self.cells()].to_vec()
    }
}

/// `z_i = Σ_j softmax_j(x_iᵀ U x_j) W x_j`.
pub fn feature_aggregation(x: &Mat, w: &Mat, u: &Mat) -> Mat {
    let n = x.len();
    let keep = vec![true; n];
    (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..n).map(|j| bilinear(&x[i], u, &x[j])).collect();
            let a = softmax(&logits, &keep);
            let mut z = vec![0.0; w.len()];
            for j in 0..n {
                let wx = matvec(w, &x[j]);
                for (zo, v) in z.iter_mut().zip(wx) {
                    *zo += a[j] * v;
                }
            }
            z
        })
        .collect()
}

/// `z_i = Σ_{j≠i} a_ij W (x_i − x_j)` with the diagonal excluded from the softmax.
pub fn difference_propagation(x: &Mat, w: &Mat, u: &Mat) -> Mat {
    let n = x.len();
    if n < 2 {
        return vec![vec![0.0; w.len()]; n];
    }
    (0..n)
        .map(|i| {
            let keep: Vec<bool> = (0..n).map(|j| j != i).collect();
            let logits: Vec<f64> = (0..n).map(|j| bilinear(&x[i], u, &x[j])).collect();
            let a = softmax(&logits, &keep);
            let mut z = vec![0.0; w.len()];
            for j in (0..n).filter(|&j| j != i) {
                let d: Vec<f64> = x[i].iter().zip(&x[j]).map(|(p, q)| p - q).collect();
                for (zo, v) in z.iter_mut().zip(matvec(w, &d)) {
                    *zo += a[j] * v;
                }
            }
            z
        })
        .collect()
}

/// Nearest frame-`τ` node of every node by exhaustive scan (first maximum wins).
pub fn nearest_sequence(x: &Mat, frame_of: &[usize], frames: usize) -> Vec<Vec<usize>> {
    (0..x.len())
        .map(|i| {
            (0..frames)
                .map(|t| {
                    let mut best: Option<(usize, f64)> = None;
                    for j in 0..x.len() {
                        if frame_of[j] != t {
                            continue;
                        }
                        let s = dot(&x[i], &x[j]);
                        if best.is_none_or(|(_, b)| s > b) {
                            best = Some((j, s));
                        }
                    }
                    best.expect("frame has nodes").0
                })
                .collect()
        })
        .collect()
}

/// Zero-padded "same" cross-correlation of each node's nearest-node sequence
/// with `kernel[r][o][c]`, read at the node's own frame.
pub fn temporal_convolution(x: &Mat, frame_of: &[usize], frames: usize, kernel: &[Mat]) -> Mat {
    let k = kernel.len();
    let pad = (k - 1) / 2;
    let c_out = kernel[0].len();
    let seq = nearest_sequence(x, frame_of, frames);
    (0..x.len())
        .map(|i| {
            let t = frame_of[i] as isize;
            let mut z = vec![0.0; c_out];
            for (r, tap) in kernel.iter().enumerate() {
                let src = t + r as isize - pad as isize;
                if src < 0 || src >= frames as isize {
                    continue;
                }
                let v = &x[seq[i][src as usize]];
                for (zo, val) in z.iter_mut().zip(matvec(tap, v)) {
                    *zo += val;
                }
            }
            z
        })
        .collect()
}

/// `z_i = V a_i + Σ_j a_ij W y_j` over the cells `y` of node i's frame,
/// `a_i = softmax_j(x_iᵀ U y_j)`.
pub fn background_incorporation(x: &Mat, frame_of: &[usize], cells_of: &dyn Fn(usize) -> Mat, u: &Mat, v: &Mat, w: &Mat) -> Mat {
    (0..x.len())
        .map(|i| {
            let y = cells_of(frame_of[i]);
            let keep = vec![true; y.len()];
            let logits: Vec<f64> = y.iter().map(|yj| bilinear(&x[i], u, yj)).collect();
            let a = softmax(&logits, &keep);
            let mut z = matvec(v, &a);
            for (j, yj) in y.iter().enumerate() {
                for (zo, val) in z.iter_mut().zip(matvec(w, yj)) {
                    *zo += a[j] * val;
                }
            }
            z
        })
        .collect()
}

/// Top-`m` most similar other nodes by full sort: descending score, then
/// ascending index.
pub fn top_similar(x: &Mat, i: usize, m: usize) -> Vec<usize> {
    let mut others: Vec<(usize, f64)> = (0..x.len()).filter(|&j| j != i).map(|j| (j, dot(&x[i], &x[j]))).collect();
    others.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    others.into_iter().take(m).map(|(j, _)| j).collect()
}

/// Gate weights `σ(w · [similarities; position offsets])`, zero-padded to `m` slots.
pub fn attention_gates(x: &Mat, pos: &Mat, w: &[f64], m: usize) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let nb = top_similar(x, i, m);
            let mut feat = vec![0.0; 4 * m];
            for (slot, &j) in nb.iter().enumerate() {
                feat[slot] = dot(&x[i], &x[j]);
                for d in 0..3 {
                    feat[m + 3 * slot + d] = pos[i][d] - pos[j][d];
                }
            }
            1.0 / (1.0 + (-dot(w, &feat)).exp())
        })
        .collect()
}

pub fn node_attention(x: &Mat, pos: &Mat, w: &[f64], m: usize) -> Mat {
    attention_gates(x, pos, w, m).into_iter().zip(x).map(|(g, row)| row.iter().map(|v| g * v).collect()).collect()
}

/// Pre-activation oracle output of `op` on `inst`, reading its parameters from `store`.
pub fn oracle(op: &OperationParams, store: &ParamStore, inst: &Instance, cfg: &OpConfig) -> Mat {
    let p = |id| to_mat(store.get(id));
    let x = inst.x();
    let frame_of = inst.nodes.frame_index.clone();
    match *op {
        OperationParams::Zero => vec![vec![0.0; cfg.c_out]; x.len()],
        OperationParams::Identity => x,
        OperationParams::FeatureAggregation { w, u, .. } => feature_aggregation(&x, &p(w), &p(u)),
        OperationParams::DifferencePropagation { w, u, .. } => difference_propagation(&x, &p(w), &p(u)),
        OperationParams::TemporalConvolution { kernel, .. } => {
            let t = store.get(kernel);
            let (k, co, ci) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let taps: Vec<Mat> = (0..k).map(|r| (0..co).map(|o| t.data()[(r * co + o) * ci..(r * co + o + 1) * ci].to_vec()).collect()).collect();
            temporal_convolution(&x, &frame_of, inst.frames, &taps)
        }
        OperationParams::BackgroundIncorporation { u, v, w, .. } => {
            background_incorporation(&x, &frame_of, &|t| inst.frame_cells(t), &p(u), &p(v), &p(w))
        }
        OperationParams::NodeAttention { w } => node_attention(&x, &inst.positions(), store.get(w).data(), cfg.attention_m),
    }
}

/// LayerNorm over each row followed by LeakyReLU.
pub fn layernorm_leaky(z: &Mat, gain: &[f64], bias: &[f64], eps: f64, slope: f64) -> Mat {
    z.iter()
        .map(|row| {
            let c = row.len() as f64;
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            row.iter()
                .enumerate()
                .map(|(k, v)| {
                    let y = gain[k] * (v - mean) / (var + eps).sqrt() + bias[k];
                    if y > 0.0 {
                        y
                    } else {
                        slope * y
                    }
                })
                .collect()
        })
        .collect()
}

/// Variance of the per-candidate summed logits with the unbiased divisor.
pub fn variance_loss(alphas: &Mat) -> f64 {
    let o = alphas[0].len();
    let sums: Vec<f64> = (0..o).map(|k| alphas.iter().map(|r| r[k]).sum()).collect();
    let mean = sums.iter().sum::<f64>() / o as f64;
    sums.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (o as f64 - 1.0)
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / floor.max(a.abs()).max(n.abs())
}

/// Derivative of `at(δ) = (value, selection fingerprint)` at `δ = 0` from
/// central differences at `h` and `h/2`, Richardson-combined. A step whose
/// points change the selection is retried at `h/10` and `h/100`; `None` if
/// all of them do.
pub fn central_difference(h: f64, base: u64, at: &mut dyn FnMut(f64) -> (f64, u64)) -> Option<f64> {
    'step: for step in [h, h / 10.0, h / 100.0] {
        let mut d = [0.0; 2];
        for (k, s) in [step, step / 2.0].into_iter().enumerate() {
            let (up, fu) = at(s);
            let (down, fd) = at(-s);
            if fu != base || fd != base {
                continue 'step;
            }
            d[k] = (up - down) / (2.0 * s);
        }
        return Some((4.0 * d[1] - d[0]) / 3.0);
    }
    None
}

impl FdReport {
    fn record(&mut self, analytic: f64, numeric: Option<f64>, floor: f64) {
        match numeric {
            Some(n) => {
                self.checked += 1;
                self.worst = self.worst.max(rel_err(analytic, n, floor));
            }
            None => self.skipped += 1,
        }
    }
}

/// Central-difference check of `f` with respect to every coordinate of the
/// leaf `inputs` and of every parameter in `store` that `f` reads. Error is
/// `|a − n| / max(floor, |a|, |n|)`.
pub fn fd_check(store: &ParamStore, inputs: &[Tensor], h: f64, floor: f64, f: impl Fn(&mut Graph<'_>, &[Var]) -> Result<Var>) -> FdReport {
    let eval = |s: &ParamStore, ts: &[Tensor]| {
        let mut g = Graph::with_params(s);
        let vs: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
        let l = f(&mut g, &vs).unwrap();
        (g.value(l).data()[0], g.selection_fingerprint())
    };
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
    let loss = f(&mut g, &vars).unwrap();
    let base = g.selection_fingerprint();
    let back = g.backward(loss).unwrap();
    let mut pgrads = graphops::engine::Grads::zeros_like(store);
    back.accumulate_params(&g, &mut pgrads);

    let mut report = FdReport::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = back.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            let n = central_difference(h, base, &mut |d| {
                work[k].data_mut()[i] = orig + d;
                let r = eval(store, &work);
                work[k].data_mut()[i] = orig;
                r
            });
            report.record(analytic.data()[i], n, floor);
        }
    }
    let mut ws = store.clone();
    for id in store.ids() {
        let Some(analytic) = pgrads.get(id).cloned() else { continue };
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            let n = central_difference(h, base, &mut |d| {
                ws.get_mut(id).data_mut()[i] = orig + d;
                let r = eval(&ws, inputs);
                ws.get_mut(id).data_mut()[i] = orig;
                r
            });
            report.record(analytic.data()[i], n, floor);
        }
    }
    report
}

/// Scalar probe `Σ y ⊙ r` with a fixed random `r`, so every output
/// coordinate receives a distinct upstream gradient.
pub fn probe(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.shape(y), 1.0, &mut rng(seed));
    let r = g.constant(r)?;
    g.inner(y, r)
}

/// A small generated dataset that trains in well under a second.
pub fn tiny_dataset(n_samples: usize, seed: u64) -> graphops::synthdata::Dataset {
    let spec = graphops::synthdata::GeneratorSpec {
        frames: 2,
        nodes_per_frame: 2,
        channels: 4,
        grid_h: 1,
        grid_w: 2,
        n_samples,
        seed,
        ..Default::default()
    };
    graphops::synthdata::generate(&spec).unwrap()
}

/// A narrow model for `ds` with two intermediate supernodes.
pub fn tiny_model(
    ds: &graphops::synthdata::Dataset,
    variant: graphops::model::Variant,
    space: graphops::cell::SearchSpace,
    seed: u64,
) -> graphops::model::Model {
    use graphops::model::{InputShape, Model, ModelConfig};
    let config = ModelConfig {
        variant,
        hidden: 3,
        cell: graphops::cell::CellSpec { n_intermediate: 2, space },
        kernel_size: 3,
        attention_m: 2,
        ..ModelConfig::default()
    };
    Model::new(config, InputShape::of(&ds.samples[0], ds.n_classes()), seed).unwrap()
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    /// Worst relative error over the checked coordinates.
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose ±h perturbation changes a discrete selection, where
    /// the loss is only piecewise smooth.
    pub skipped: usize,
}

impl FdReport {
    pub fn merge(&mut self, o: FdReport) {
        self.worst = self.worst.max(o.worst);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }

    pub fn skipped_fraction(&self) -> f64 {
        self.skipped as f64 / (self.checked + self.skipped).max(1) as f64
    }
}

/// Checks the full training loss `L_cls + var_weight · L_var` of one sample
/// against central differences over the parameters whose name satisfies
/// `pick`. Dropout is off.
pub fn fd_model(
    model: &graphops::model::Model,
    sample: &graphops::synthdata::VideoSample,
    var_weight: f64,
    h: f64,
    floor: f64,
    pick: impl Fn(&str) -> bool,
) -> FdReport {
    use graphops::engine::Grads;
    use graphops::model::Route;
    let mut grads = Grads::zeros_like(&model.store);
    model.sample_gradients(sample, Route::Mixed, var_weight, None, &mut grads).unwrap();
    let base = model.selection_fingerprint(sample, Route::Mixed).unwrap();
    let mut work = model.clone();
    let loss = |m: &graphops::model::Model| {
        let mut scratch = Grads::zeros_like(&m.store);
        let l = m.sample_gradients(sample, Route::Mixed, var_weight, None, &mut scratch).unwrap().loss;
        (l, m.selection_fingerprint(sample, Route::Mixed).unwrap())
    };
    let mut report = FdReport::default();
    for id in model.store.ids().filter(|&id| pick(model.store.name(id))) {
        let zeros = Tensor::zeros(model.store.get(id).shape());
        let analytic = grads.get(id).unwrap_or(&zeros).clone();
        for i in 0..model.store.get(id).numel() {
            let orig = model.store.get(id).data()[i];
            let n = central_difference(h, base, &mut |d| {
                work.store.get_mut(id).data_mut()[i] = orig + d;
                let r = loss(&work);
                work.store.get_mut(id).data_mut()[i] = orig;
                r
            });
            report.record(analytic.data()[i], n, floor);
        }
    }
    report
}

/// Max-abs difference between the mixed cell and the discrete cell derived
/// from its logits, where each superedge's chosen candidate leads the
/// runner-up by exactly `margin`. Instances have `frames × per_frame` nodes
/// with `channels` features and a 2×2 background grid.
pub fn relaxation_gap(seed: u64, frames: usize, per_frame: usize, channels: usize, margin: f64) -> f64 {
    use graphops::cell::{cell_forward, derive_discrete, discrete_forward, CellParams, CellSpec, DeriveRule};
    use graphops::graphops::{OpInput, Pass};
    let inst = Instance::with_shape(seed, frames, per_frame, channels, (2, 2));
    let cfg = inst.op_config(channels, 5, 7);
    let spec = CellSpec::default();
    let mut store = ParamStore::new();
    let cell = CellParams::init(spec, &cfg, &mut store, "cell", &mut rng(seed)).unwrap();
    let n_o = spec.n_candidates();
    let mut alphas = Tensor::randn(&[spec.n_edges(), n_o], 1.0, &mut rng(seed + 1));
    for e in 0..spec.n_edges() {
        let pick = 1 + (seed as usize + e) % (n_o - 1);
        let row = &mut alphas.data_mut()[e * n_o..(e + 1) * n_o];
        let runner_up = (0..n_o).filter(|&o| o != pick).map(|o| row[o]).fold(f64::NEG_INFINITY, f64::max);
        row[pick] = runner_up + margin;
    }
    let structure = derive_discrete(&alphas, &spec, DeriveRule::default()).unwrap();
    let rows = inst.background.as_rows();
    let run = |discrete: bool| {
        let mut g = Graph::with_params(&store);
        let x = g.input(&inst.nodes.features).unwrap();
        let bg = g.input(&rows).unwrap();
        let input = OpInput { layout: inst.nodes.layout(), background: Some(bg) };
        let y = if discrete {
            discrete_forward(&mut g, x, &structure, &cell, &input, &cfg, &mut Pass::eval()).unwrap()
        } else {
            let a = g.leaf(alphas.clone()).unwrap();
            cell_forward(&mut g, x, a, &cell, &input, &cfg, &mut Pass::eval()).unwrap()
        };
        g.value(y).clone()
    };
    run(true).max_abs_diff(&run(false))
}

/// One row of the gradient suite: the checked function, its tolerance and
/// the sweep outcome merged over seeds.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: String,
    pub tolerance: f64,
    pub report: FdReport,
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_FLOOR: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
/// Tolerance for anything downstream of a layer norm.
pub const FD_TOL_NORM: f64 = 1e-3;

type GraphFn = Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>>;

fn primitive_cases(seed: u64) -> Vec<(&'static str, f64, Vec<Tensor>, GraphFn)> {
    use rand::seq::SliceRandom;
    let mut r = rng(seed ^ 0xfd);
    let (n, m, k) = (r.random_range(2..=4), r.random_range(2..=4), r.random_range(2..=4));
    let mut t = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut r);
    let a = t(&[n, m]);
    let b = t(&[n, m]);
    let c = t(&[m, k]);
    let row = t(&[1, m]);
    let col = t(&[n, 1]);
    let gains = t(&[1, m]);
    let seq = t(&[n + 2, m]);
    let kernel = t(&[3, m, m]);
    let mut perm: Vec<usize> = (0..n * m).collect();
    perm.shuffle(&mut rng(seed));
    let rows: Vec<Option<usize>> = (0..n + 1).map(|i| if i == n { None } else { Some((i * 7 + seed as usize) % n) }).collect();
    let mask: Vec<bool> = (0..n * m).map(|i| i % m != (seed as usize) % m).collect();
    let label = seed as usize % m;
    let p = move |g: &mut Graph<'_>, y: Var| probe(g, y, seed + 17);
    vec![
        (
            "matmul",
            FD_TOL,
            vec![a.clone(), c.clone()],
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                p(g, y)
            }),
        ),
        (
            "transpose",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.transpose(v[0])?;
                p(g, y)
            }),
        ),
        (
            "add",
            FD_TOL,
            vec![a.clone(), b.clone()],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                p(g, y)
            }),
        ),
        (
            "sub",
            FD_TOL,
            vec![a.clone(), b.clone()],
            Box::new(move |g, v| {
                let y = g.sub(v[0], v[1])?;
                p(g, y)
            }),
        ),
        (
            "mul",
            FD_TOL,
            vec![a.clone(), b.clone()],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                p(g, y)
            }),
        ),
        (
            "add_n",
            FD_TOL,
            vec![a.clone(), b.clone(), a.clone()],
            Box::new(move |g, v| {
                let y = g.add_n(v)?;
                p(g, y)
            }),
        ),
        (
            "add_row",
            FD_TOL,
            vec![a.clone(), row.clone()],
            Box::new(move |g, v| {
                let y = g.add_row(v[0], v[1])?;
                p(g, y)
            }),
        ),
        (
            "mul_col",
            FD_TOL,
            vec![a.clone(), col.clone()],
            Box::new(move |g, v| {
                let y = g.mul_col(v[0], v[1])?;
                p(g, y)
            }),
        ),
        (
            "scale_by",
            FD_TOL,
            vec![a.clone(), row.clone()],
            Box::new(move |g, v| {
                let y = g.scale_by(v[0], v[1], 1)?;
                p(g, y)
            }),
        ),
        (
            "scale",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7)?;
                p(g, y)
            }),
        ),
        (
            "sigmoid",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.sigmoid(v[0])?;
                p(g, y)
            }),
        ),
        (
            "leaky_relu",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.leaky_relu(v[0], 0.2)?;
                p(g, y)
            }),
        ),
        (
            "row_softmax",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.row_softmax(v[0])?;
                p(g, y)
            }),
        ),
        (
            "row_softmax_masked",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.row_softmax_masked(v[0], Some(&mask))?;
                p(g, y)
            }),
        ),
        (
            "layer_norm",
            FD_TOL_NORM,
            vec![a.clone(), gains.clone(), row.clone()],
            Box::new(move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                p(g, y)
            }),
        ),
        (
            "conv1d_same",
            FD_TOL,
            vec![seq, kernel],
            Box::new(move |g, v| {
                let y = g.conv1d_same(v[0], v[1])?;
                p(g, y)
            }),
        ),
        (
            "concat_cols",
            FD_TOL,
            vec![a.clone(), col.clone()],
            Box::new(move |g, v| {
                let y = g.concat_cols(v)?;
                p(g, y)
            }),
        ),
        (
            "concat_rows",
            FD_TOL,
            vec![a.clone(), row.clone()],
            Box::new(move |g, v| {
                let y = g.concat_rows(v)?;
                p(g, y)
            }),
        ),
        (
            "gather_rows",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.gather_rows(v[0], rows.clone())?;
                p(g, y)
            }),
        ),
        (
            "gather_elems",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.gather_elems(v[0], perm.clone(), &[m, n])?;
                p(g, y)
            }),
        ),
        (
            "reshape",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.reshape(v[0], &[m, n])?;
                p(g, y)
            }),
        ),
        (
            "sum",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum(y)
            }),
        ),
        (
            "mean",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.mean(y)
            }),
        ),
        (
            "mean_rows",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.mean_rows(v[0])?;
                p(g, y)
            }),
        ),
        (
            "sum_row_groups",
            FD_TOL,
            vec![t(&[6, m])],
            Box::new(move |g, v| {
                let y = g.sum_row_groups(v[0], 3)?;
                p(g, y)
            }),
        ),
        (
            "sum_rows",
            FD_TOL,
            vec![a.clone()],
            Box::new(move |g, v| {
                let y = g.sum_rows(v[0])?;
                p(g, y)
            }),
        ),
        ("inner", FD_TOL, vec![a.clone(), b.clone()], Box::new(move |g, v| g.inner(v[0], v[1]))),
        ("softmax_cross_entropy", FD_TOL, vec![row], Box::new(move |g, v| g.softmax_cross_entropy(v[0], label))),
        (
            "dropout",
            FD_TOL,
            vec![a],
            Box::new(move |g, v| {
                let y = g.dropout(v[0], 0.3, Some(&mut rng(seed + 5)))?;
                p(g, y)
            }),
        ),
    ]
}

const OP_KINDS: [graphops::graphops::OpKind; 5] = [
    graphops::graphops::OpKind::FeatureAggregation,
    graphops::graphops::OpKind::DifferencePropagation,
    graphops::graphops::OpKind::TemporalConvolution,
    graphops::graphops::OpKind::BackgroundIncorporation,
    graphops::graphops::OpKind::NodeAttention,
];

fn op_inputs(inst: &Instance) -> Vec<Tensor> {
    vec![inst.nodes.features.clone(), inst.background.as_rows()]
}

/// Finite-difference sweeps over every engine primitive, every graph
/// operation before and after its activation, a mixed superedge, a mixed
/// cell and the two training losses, one instance per seed.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Vec<GradCase> {
    use graphops::cell::{cell_forward, mixed_edge_forward, CellParams, CellSpec};
    use graphops::graphops::{OpInput, OperationParams, Pass};
    use graphops::model::Variant;
    use std::collections::BTreeMap;

    let mut cases: BTreeMap<String, GradCase> = BTreeMap::new();
    let mut add = |name: String, tolerance: f64, report: FdReport| {
        cases.entry(name.clone()).or_insert(GradCase { name, tolerance, report: FdReport::default() }).report.merge(report);
    };
    let empty = ParamStore::new();
    for seed in seeds {
        for (name, tol, inputs, f) in primitive_cases(seed) {
            add(format!("primitive {name}"), tol, fd_check(&empty, &inputs, FD_STEP, FD_FLOOR, f));
        }

        let inst = Instance::with_shape(seed, 2, 2 + seed as usize % 2, 3 + seed as usize % 2, (1, 2));
        for kind in OP_KINDS {
            let mut r = rng(seed + 300);
            let c_out = if kind == graphops::graphops::OpKind::NodeAttention { inst.channels } else { 3 };
            let cfg = inst.op_config(c_out, 2, 3);
            let mut store = ParamStore::new();
            let op = OperationParams::init(kind, &cfg, &mut store, "op", &mut r).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                if store.name(id).contains("ln_") {
                    store.set(id, Tensor::randn(store.get(id).shape(), 1.0, &mut r)).unwrap();
                }
            }
            let layout_nodes = inst.nodes.clone();
            for (suffix, pre, tol) in [("pre-activation", true, FD_TOL), ("activated", false, FD_TOL_NORM)] {
                let nodes = layout_nodes.clone();
                let f = move |g: &mut Graph<'_>, v: &[Var]| {
                    let input = OpInput { layout: nodes.layout(), background: Some(v[1]) };
                    let mut pass = if pre { Pass::probe() } else { Pass::eval() };
                    let y = op.forward(g, v[0], &input, &cfg, &mut pass)?;
                    probe(g, y, seed + 41)
                };
                add(format!("{kind} {suffix}"), tol, fd_check(&store, &op_inputs(&inst), FD_STEP, FD_FLOOR, f));
            }
        }

        let cfg = inst.op_config(inst.channels, 2, 3);
        let spec = CellSpec { n_intermediate: 2, ..CellSpec::default() };
        let mut store = ParamStore::new();
        let cell = CellParams::init(spec, &cfg, &mut store, "cell", &mut rng(seed + 500)).unwrap();
        let n_o = spec.n_candidates();
        let mut inputs = op_inputs(&inst);
        inputs.push(Tensor::randn(&[1, n_o], 1.0, &mut rng(seed + 501)));
        {
            let (nodes, cell) = (inst.nodes.clone(), cell.clone());
            let f = move |g: &mut Graph<'_>, v: &[Var]| {
                let input = OpInput { layout: nodes.layout(), background: Some(v[1]) };
                let y = mixed_edge_forward(g, v[0], v[2], 0, &cell, &input, &cfg, &mut Pass::eval())?;
                probe(g, y, seed + 43)
            };
            add("mixed superedge".into(), FD_TOL_NORM, fd_check(&store, &inputs, FD_STEP, FD_FLOOR, f));
        }
        inputs[2] = Tensor::randn(&[spec.n_edges(), n_o], 1.0, &mut rng(seed + 502));
        {
            let (nodes, cell) = (inst.nodes.clone(), cell.clone());
            let f = move |g: &mut Graph<'_>, v: &[Var]| {
                let input = OpInput { layout: nodes.layout(), background: Some(v[1]) };
                let y = cell_forward(g, v[0], v[2], &cell, &input, &cfg, &mut Pass::eval())?;
                probe(g, y, seed + 47)
            };
            add("mixed cell".into(), FD_TOL_NORM, fd_check(&store, &inputs, FD_STEP, FD_FLOOR, f));
        }
        let alphas = Tensor::randn(&[6, 7], 1.0, &mut rng(seed + 503));
        add("variance loss".into(), FD_TOL, fd_check(&empty, &[alphas], FD_STEP, FD_FLOOR, |g, v| graphops::search::variance_loss(g, v[0])));

        let ds = tiny_dataset(16, seed);
        let sample = &ds.samples[seed as usize % 16];
        let model = tiny_model(&ds, Variant::AdaptiveSearch, graphops::cell::SearchSpace::FixedSubstructures, seed);
        add("classification loss".into(), FD_TOL_NORM, fd_model(&model, sample, 0.0, FD_STEP, FD_FLOOR, |_| true));
        add("combined loss".into(), FD_TOL_NORM, fd_model(&model, sample, 0.1, FD_STEP, FD_FLOOR, |_| true));
    }
    cases.into_values().collect()
}
