//! Classifier variants built on the cell: baselines, single-operation probes
//! and the searched cell with fixed or adaptive structure weights.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{cell_forward, derive_discrete, discrete_forward, pool_and_classify, CellParams, CellSpec, DeriveRule, DiscreteStructure};
use crate::engine::{Grads, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphops::{channel_project, OpConfig, OpInput, OpKind, OperationParams, Pass};
use crate::search::{compute_alphas, variance_loss, StructureWeights};
use crate::synthdata::VideoSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Linear classifier on the global feature alone.
    GlobalPooling,
    /// Linear classifier on the mean of the projected node features.
    PoolingOverRois,
    /// One graph operation between projection and pooling.
    SingleOp(OpKind),
    /// Searched cell with one structure shared by all samples.
    NonAdaptiveSearch,
    /// Searched cell with per-sample structures computed from the global feature.
    AdaptiveSearch,
}

impl Variant {
    pub fn is_search(self) -> bool {
        matches!(self, Variant::NonAdaptiveSearch | Variant::AdaptiveSearch)
    }

    pub fn name(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::GlobalPooling => f.write_str("global_pooling"),
            Variant::PoolingOverRois => f.write_str("pooling_over_rois"),
            Variant::SingleOp(k) => write!(f, "single_op({k})"),
            Variant::NonAdaptiveSearch => f.write_str("non_adaptive_search"),
            Variant::AdaptiveSearch => f.write_str("adaptive_search"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_pooling" => Ok(Variant::GlobalPooling),
            "pooling_over_rois" => Ok(Variant::PoolingOverRois),
            "non_adaptive_search" => Ok(Variant::NonAdaptiveSearch),
            "adaptive_search" => Ok(Variant::AdaptiveSearch),
            _ => {
                let inner = s
                    .strip_prefix("single_op(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::Parse(format!("unknown model variant '{s}'")))?;
                Ok(Variant::SingleOp(inner.parse()?))
            }
        }
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of the projected node features and of every graph operation.
    pub hidden: usize,
    pub cell: CellSpec,
    /// Number of stacked cells; all share one set of structure weights.
    pub cells: usize,
    pub kernel_size: usize,
    pub attention_m: usize,
    pub identity_dropout: f64,
    pub derive_rule: DeriveRule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::AdaptiveSearch,
            hidden: 256,
            cell: CellSpec::default(),
            cells: 1,
            kernel_size: 7,
            attention_m: 5,
            identity_dropout: 0.3,
            derive_rule: DeriveRule::default(),
        }
    }
}

/// Input shapes the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub global_dim: usize,
    pub grid_cells: usize,
    pub n_classes: usize,
}

impl InputShape {
    pub fn of(sample: &VideoSample, n_classes: usize) -> Self {
        InputShape { channels: sample.nodes.channels(), global_dim: sample.global_feature.numel(), grid_cells: sample.background.cells(), n_classes }
    }
}

/// How the cell is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Route<'s> {
    /// Softmax mixture on every superedge.
    Mixed,
    /// The given discrete structure.
    Discrete(&'s DiscreteStructure),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub shape: InputShape,
    pub op_config: OpConfig,
    pub store: ParamStore,
    projection: Option<ParamId>,
    single: Option<OperationParams>,
    cells: Vec<CellParams>,
    /// Projections from a cell's concatenated output back to `hidden`.
    links: Vec<ParamId>,
    pub structure: Option<StructureWeights>,
    classifier_w: ParamId,
    classifier_b: ParamId,
}

/// Value of one forward pass.
pub struct Forward {
    pub logits: Var,
    pub alphas: Option<Var>,
}

/// Per-sample training statistics.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleStats {
    pub loss: f64,
    pub cls_loss: f64,
    pub var_loss: f64,
    pub correct: bool,
}

impl Model {
    pub fn new(config: ModelConfig, shape: InputShape, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.cells == 0 {
            return Err(Error::config("hidden width and cell count must be positive"));
        }
        if shape.n_classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let op_config = OpConfig {
            c_in: h,
            c_out: h,
            grid_cells: shape.grid_cells,
            kernel_size: config.kernel_size,
            attention_m: config.attention_m,
            identity_dropout: config.identity_dropout,
            ..OpConfig::default()
        };
        let uses_nodes = config.variant != Variant::GlobalPooling;
        let projection = uses_nodes.then(|| {
            let std = 1.0 / (shape.channels as f64).sqrt();
            store.add("projection", ParamGroup::Operations, Tensor::randn(&[h, shape.channels], std, &mut rng))
        });
        let mut single = None;
        let mut cells = Vec::new();
        let mut links = Vec::new();
        let mut structure = None;
        let pooled_dim = match config.variant {
            Variant::GlobalPooling => 0,
            Variant::PoolingOverRois => h,
            Variant::SingleOp(kind) => {
                single = Some(OperationParams::init(kind, &op_config, &mut store, "single", &mut rng)?);
                h
            }
            Variant::NonAdaptiveSearch | Variant::AdaptiveSearch => {
                let n = config.cell.n_intermediate;
                for c in 0..config.cells {
                    if c > 0 {
                        let std = 1.0 / ((n * h) as f64).sqrt();
                        links.push(store.add(format!("link{c}"), ParamGroup::Operations, Tensor::randn(&[h, n * h], std, &mut rng)));
                    }
                    cells.push(CellParams::init(config.cell, &op_config, &mut store, &format!("cell{c}"), &mut rng)?);
                }
                let adaptive = config.variant == Variant::AdaptiveSearch;
                structure = Some(StructureWeights::init(&config.cell, adaptive, shape.global_dim, &mut store, &mut rng)?);
                n * h
            }
        };
        let with_global = !matches!(config.variant, Variant::PoolingOverRois);
        let feat = pooled_dim + if with_global { shape.global_dim } else { 0 };
        let std = 1.0 / (feat as f64).sqrt();
        let classifier_w = store.add("classifier.w", ParamGroup::Operations, Tensor::randn(&[shape.n_classes, feat], std, &mut rng));
        let classifier_b = store.add("classifier.b", ParamGroup::Operations, Tensor::zeros(&[shape.n_classes]));
        Ok(Model { config, shape, op_config, store, projection, single, cells, links, structure, classifier_w, classifier_b })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn check_sample(&self, s: &VideoSample) -> Result<()> {
        let ok = s.nodes.channels() == self.shape.channels
            && s.global_feature.numel() == self.shape.global_dim
            && s.background.cells() == self.shape.grid_cells
            && s.label < self.shape.n_classes;
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                "model_input",
                format!(
                    "sample (C={}, C_g={}, cells={}, label={}) does not fit model {:?}",
                    s.nodes.channels(),
                    s.global_feature.numel(),
                    s.background.cells(),
                    s.label,
                    self.shape
                ),
            ))
        }
    }

    /// Builds the forward pass of one sample.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, sample: &'a VideoSample, route: Route<'_>, pass: &mut Pass<'_>) -> Result<Forward> {
        let global = g.input(&sample.global_feature)?;
        let w = g.param(self.classifier_w)?;
        let b = g.param(self.classifier_b)?;
        let Some(proj) = self.projection else {
            let row = g.reshape(global, &[1, self.shape.global_dim])?;
            let wt = g.transpose(w)?;
            let logits = g.matmul(row, wt)?;
            let logits = g.add_row(logits, b)?;
            return Ok(Forward { logits, alphas: None });
        };
        let proj = g.param(proj)?;
        let x = g.input(&sample.nodes.features)?;
        let x = channel_project(g, x, proj)?;
        let needs_bg = match self.config.variant {
            Variant::SingleOp(k) => k.uses_background(),
            Variant::NonAdaptiveSearch | Variant::AdaptiveSearch => self.config.cell.candidates().iter().any(|c| c.uses_background()),
            _ => false,
        };
        let background = if needs_bg {
            let rows = g.constant(sample.background.as_rows())?;
            Some(channel_project(g, rows, proj)?)
        } else {
            None
        };
        let input = OpInput { layout: sample.nodes.layout(), background };
        let cfg = &self.op_config;
        match self.config.variant {
            Variant::GlobalPooling => unreachable!("handled above"),
            Variant::PoolingOverRois => {
                let logits = pool_and_classify(g, x, None, w, b)?;
                Ok(Forward { logits, alphas: None })
            }
            Variant::SingleOp(_) => {
                let op = self.single.as_ref().expect("single-op params");
                let out = op.forward(g, x, &input, cfg, pass)?;
                let logits = pool_and_classify(g, out, Some(global), w, b)?;
                Ok(Forward { logits, alphas: None })
            }
            Variant::NonAdaptiveSearch | Variant::AdaptiveSearch => {
                let sw = self.structure.as_ref().expect("structure weights");
                let alphas = compute_alphas(g, global, sw)?;
                let mut h = x;
                for (c, cell) in self.cells.iter().enumerate() {
                    if c > 0 {
                        let link = g.param(self.links[c - 1])?;
                        h = channel_project(g, h, link)?;
                    }
                    h = match route {
                        Route::Mixed => cell_forward(g, h, alphas, cell, &input, cfg, pass)?,
                        Route::Discrete(s) => discrete_forward(g, h, s, cell, &input, cfg, pass)?,
                    };
                }
                let logits = pool_and_classify(g, h, Some(global), w, b)?;
                Ok(Forward { logits, alphas: Some(alphas) })
            }
        }
    }

    /// Loss `L_cls + var_weight · L_var` of one sample with parameter gradients
    /// accumulated into `grads`. `dropout_seed = None` evaluates without dropout.
    pub fn sample_gradients(
        &self,
        sample: &VideoSample,
        route: Route<'_>,
        var_weight: f64,
        dropout_seed: Option<u64>,
        grads: &mut Grads,
    ) -> Result<SampleStats> {
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut g = Graph::with_params(&self.store);
        let mut pass = Pass { rng: rng.as_mut().map(|r| r as &mut dyn rand::RngCore), pre_activation: false };
        let fwd = self.forward(&mut g, sample, route, &mut pass)?;
        let cls = g.softmax_cross_entropy(fwd.logits, sample.label)?;
        let mut loss = cls;
        let mut var_loss = 0.0;
        if let (Some(alphas), Route::Mixed) = (fwd.alphas, route) {
            let lv = variance_loss(&mut g, alphas)?;
            var_loss = g.value(lv).data()[0];
            if var_weight > 0.0 {
                let scaled = g.scale(lv, var_weight)?;
                loss = g.add(cls, scaled)?;
            }
        }
        let correct = predicted(g.value(fwd.logits)) == sample.label;
        let stats = SampleStats { loss: g.value(loss).data()[0], cls_loss: g.value(cls).data()[0], var_loss, correct };
        let back = g.backward(loss)?;
        back.accumulate_params(&g, grads);
        Ok(stats)
    }

    /// [`Graph::selection_fingerprint`] of the evaluation-mode forward pass.
    pub fn selection_fingerprint(&self, sample: &VideoSample, route: Route<'_>) -> Result<u64> {
        let mut g = Graph::with_params(&self.store);
        self.forward(&mut g, sample, route, &mut Pass::eval())?;
        Ok(g.selection_fingerprint())
    }

    /// Class logits without dropout.
    pub fn logits(&self, sample: &VideoSample, route: Route<'_>) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.store);
        let fwd = self.forward(&mut g, sample, route, &mut Pass::eval())?;
        Ok(g.value(fwd.logits).clone())
    }

    /// Evaluation loss and correctness of one sample.
    pub fn evaluate_sample(&self, sample: &VideoSample, route: Route<'_>) -> Result<(f64, bool)> {
        let logits = self.logits(sample, route)?;
        let row = logits.data();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - row[sample.label];
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "evaluate" });
        }
        Ok((loss, predicted(&logits) == sample.label))
    }

    /// Structure logits `[|E| × |O|]` of one sample.
    pub fn alphas(&self, sample: &VideoSample) -> Result<Tensor> {
        let sw = self.structure.as_ref().ok_or_else(|| Error::NotApplicable(format!("{} has no structure weights", self.variant())))?;
        let mut g = Graph::with_params(&self.store);
        let global = g.input(&sample.global_feature)?;
        let a = compute_alphas(&mut g, global, sw)?;
        Ok(g.value(a).clone())
    }

    /// Discrete structure derived from the sample's structure logits.
    pub fn derive(&self, sample: &VideoSample) -> Result<DiscreteStructure> {
        derive_discrete(&self.alphas(sample)?, &self.config.cell, self.config.derive_rule)
    }

    pub fn cell_params(&self) -> &[CellParams] {
        &self.cells
    }
}

fn predicted(logits: &Tensor) -> usize {
    crate::engine::argmax(logits.data())
}
