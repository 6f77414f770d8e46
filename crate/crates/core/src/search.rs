//! Structure weights, the diversity loss and the optimization schedule:
//! alternating search, discrete fine-tuning, structure statistics, mismatch
//! evaluation and structure transfer.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{CellSpec, DiscreteStructure};
use crate::engine::{Adam, Grads, Graph, ParamGroup, ParamId, ParamStore, Sgd, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Model, Route, SampleStats};
use crate::synthdata::{Family, VideoSample};

/// The linear map from the global feature to all superedge logits. In
/// non-adaptive mode the map acts on the constant input `1`, which makes the
/// logits a free parameter shared by every sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureWeights {
    pub param: ParamId,
    pub n_edges: usize,
    pub n_candidates: usize,
    pub adaptive: bool,
    pub global_dim: usize,
}

const STRUCTURE_INIT_STD: f64 = 1e-3;

impl StructureWeights {
    pub fn init<R: rand::Rng + ?Sized>(cell: &CellSpec, adaptive: bool, global_dim: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let (n_edges, n_candidates) = (cell.n_edges(), cell.n_candidates());
        let cols = if adaptive { global_dim } else { 1 };
        if cols == 0 {
            return Err(Error::config("global feature dimension must be positive"));
        }
        let value = Tensor::randn(&[n_edges * n_candidates, cols], STRUCTURE_INIT_STD, rng);
        let param = store.add("structure", ParamGroup::Structure, value);
        Ok(StructureWeights { param, n_edges, n_candidates, adaptive, global_dim })
    }

    pub fn input_dim(&self) -> usize {
        if self.adaptive {
            self.global_dim
        } else {
            1
        }
    }
}

/// `α = A·X` reshaped to `[|E| × |O|]` (row `e` holds the logits of superedge `e`).
pub fn compute_alphas(g: &mut Graph<'_>, global: Var, sw: &StructureWeights) -> Result<Var> {
    let a = g.param(sw.param)?;
    let flat = if sw.adaptive {
        let n = g.value(global).numel();
        if n != sw.global_dim {
            return Err(Error::dim("compute_alphas", format!("global feature has {n} entries, structure weights expect {}", sw.global_dim)));
        }
        let col = g.reshape(global, &[n, 1])?;
        g.matmul(a, col)?
    } else {
        a
    };
    g.reshape(flat, &[sw.n_edges, sw.n_candidates])
}

/// Eager `α = A·X` for a stored map `a`.
pub fn alphas_value(a: &Tensor, global: &Tensor, sw: &StructureWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let av = g.constant(a.clone())?;
    let x = g.constant(global.clone())?;
    let flat = if sw.adaptive {
        if global.numel() != sw.global_dim || a.cols() != sw.global_dim {
            return Err(Error::dim(
                "compute_alphas",
                format!("global feature has {} entries, structure weights expect {}", global.numel(), sw.global_dim),
            ));
        }
        let col = g.reshape(x, &[global.numel(), 1])?;
        g.matmul(av, col)?
    } else {
        av
    };
    let out = g.reshape(flat, &[sw.n_edges, sw.n_candidates])?;
    Ok(g.value(out).clone())
}

/// Sample variance (divisor `|O| − 1`) of the per-candidate logits summed over
/// superedges.
pub fn variance_loss(g: &mut Graph<'_>, alphas: Var) -> Result<Var> {
    let shape = g.shape(alphas).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("variance_loss", format!("expected [E, O], got {shape:?}")));
    }
    let o = shape[1];
    if o < 2 {
        return Err(Error::config("variance loss needs at least two candidates"));
    }
    let summed = g.sum_rows(alphas)?;
    let mut centering = Tensor::eye(o);
    centering.data_mut().iter_mut().for_each(|v| *v -= 1.0 / o as f64);
    let c = g.constant(centering)?;
    let centered = g.matmul(summed, c)?;
    let sq = g.mul(centered, centered)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / (o - 1) as f64)
}

pub fn variance_loss_value(alphas: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(alphas.clone())?;
    let l = variance_loss(&mut g, a)?;
    Ok(g.value(l).data()[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub lr_ops: f64,
    pub lr_structure: f64,
    pub momentum: f64,
    pub var_loss_weight: f64,
    pub batch_size: usize,
    /// Epochs per optimization phase.
    pub period_epochs: usize,
    pub min_rounds: usize,
    pub max_rounds: usize,
    /// Stop once fewer than this fraction of train signatures change in a round.
    pub churn_threshold: f64,
    /// Update operation and structure weights together instead of alternating.
    pub joint: bool,
    pub finetune_lr: f64,
    pub finetune_min_lr: f64,
    pub patience: usize,
    pub finetune_max_epochs: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lr_ops: 0.01,
            lr_structure: 1e-4,
            momentum: 0.0,
            var_loss_weight: 0.1,
            batch_size: 8,
            period_epochs: 1,
            min_rounds: 2,
            max_rounds: 50,
            churn_threshold: 0.01,
            joint: false,
            finetune_lr: 1e-3,
            finetune_min_lr: 1e-4,
            patience: 5,
            finetune_max_epochs: 50,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_ops, self.lr_structure, self.finetune_lr, self.finetune_min_lr];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(self.var_loss_weight.is_finite() && self.var_loss_weight >= 0.0) {
            return Err(Error::config("var_loss_weight must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.period_epochs == 0 || self.max_rounds == 0 || self.patience == 0 {
            return Err(Error::config("batch size, period, max_rounds and patience must be positive"));
        }
        if self.min_rounds > self.max_rounds {
            return Err(Error::config("min_rounds exceeds max_rounds"));
        }
        if self.finetune_min_lr > self.finetune_lr {
            return Err(Error::config("finetune_min_lr exceeds finetune_lr"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub round: usize,
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    #[serde(rename = "L_var")]
    pub var_loss: f64,
    pub n_distinct_signatures: usize,
}

pub const LOG_COLUMNS: [&str; 8] = ["round", "phase", "epoch", "train_loss", "val_loss", "val_acc", "L_var", "n_distinct_signatures"];

/// Structures used for a list of samples.
#[derive(Clone, Copy)]
pub enum Routes<'s> {
    Mixed,
    /// One structure per sample, aligned with the sample list.
    PerSample(&'s [DiscreteStructure]),
}

impl Routes<'_> {
    fn get(&self, i: usize) -> Route<'_> {
        match self {
            Routes::Mixed => Route::Mixed,
            Routes::PerSample(s) => Route::Discrete(&s[i]),
        }
    }
}

/// Mean statistics over an epoch or an evaluation pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub cls_loss: f64,
    pub var_loss: f64,
    pub accuracy: f64,
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(acc << 6).wrapping_add(acc >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

/// Which parameter groups a training epoch updates.
pub enum Step<'o> {
    Operations(&'o mut Sgd),
    Structure(&'o mut Adam),
    Joint(&'o mut Sgd, &'o mut Adam),
}

/// One pass over `data` in a seeded random order, updating after every
/// batch. Per-sample gradients are computed in parallel and reduced in batch
/// order, so results do not depend on the worker count.
pub fn train_epoch(
    model: &mut Model,
    data: &[&VideoSample],
    routes: Routes<'_>,
    var_weight: f64,
    batch_size: usize,
    step: &mut Step<'_>,
    seed: u64,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1])));
    let mut total = EpochStats::default();
    for (b, batch) in order.chunks(batch_size.max(1)).enumerate() {
        let model_ref = &*model;
        let results: Vec<Result<(SampleStats, Grads)>> = batch
            .par_iter()
            .map(|&i| {
                let mut grads = Grads::zeros_like(&model_ref.store);
                let dropout = mix_seed(&[seed, 2, b as u64, i as u64]);
                let stats = model_ref.sample_gradients(data[i], routes.get(i), var_weight, Some(dropout), &mut grads)?;
                Ok((stats, grads))
            })
            .collect();
        let mut grads = Grads::zeros_like(&model.store);
        for r in results {
            let (s, g) = r.map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence(format!("non-finite value in {op} at batch {b}")),
                other => other,
            })?;
            total.loss += s.loss;
            total.cls_loss += s.cls_loss;
            total.var_loss += s.var_loss;
            total.accuracy += f64::from(u8::from(s.correct));
            grads.merge(&g);
        }
        grads.scale(1.0 / batch.len() as f64);
        if !grads.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient at batch {b}")));
        }
        match step {
            Step::Operations(sgd) => sgd.step(&mut model.store, &grads, ParamGroup::Operations),
            Step::Structure(adam) => adam.step(&mut model.store, &grads, ParamGroup::Structure),
            Step::Joint(sgd, adam) => {
                sgd.step(&mut model.store, &grads, ParamGroup::Operations);
                adam.step(&mut model.store, &grads, ParamGroup::Structure);
            }
        }
    }
    let n = data.len() as f64;
    let stats = EpochStats { loss: total.loss / n, cls_loss: total.cls_loss / n, var_loss: total.var_loss / n, accuracy: total.accuracy / n };
    if !stats.loss.is_finite() {
        return Err(Error::Divergence("training loss is not finite".into()));
    }
    Ok(stats)
}

/// Mean loss and accuracy without dropout. The loss includes `var_weight · L_var`
/// under mixed routing.
pub fn evaluate(model: &Model, data: &[&VideoSample], routes: Routes<'_>, var_weight: f64) -> Result<EpochStats> {
    if data.is_empty() {
        return Ok(EpochStats::default());
    }
    let results: Vec<Result<SampleStats>> = (0..data.len())
        .into_par_iter()
        .map(|i| match routes.get(i) {
            Route::Mixed if model.variant().is_search() => {
                let mut grads = Grads::zeros_like(&model.store);
                model.sample_gradients(data[i], Route::Mixed, var_weight, None, &mut grads)
            }
            route => {
                let (loss, correct) = model.evaluate_sample(data[i], route)?;
                Ok(SampleStats { loss, cls_loss: loss, var_loss: 0.0, correct })
            }
        })
        .collect();
    let mut total = EpochStats::default();
    for r in results {
        let s = r?;
        total.loss += s.loss;
        total.cls_loss += s.cls_loss;
        total.var_loss += s.var_loss;
        total.accuracy += f64::from(u8::from(s.correct));
    }
    let n = data.len() as f64;
    Ok(EpochStats { loss: total.loss / n, cls_loss: total.cls_loss / n, var_loss: total.var_loss / n, accuracy: total.accuracy / n })
}

/// Derived structure of every sample (empty for variants without a cell).
pub fn derive_all(model: &Model, data: &[&VideoSample]) -> Result<Vec<DiscreteStructure>> {
    if !model.variant().is_search() {
        return Ok(Vec::new());
    }
    data.par_iter().map(|s| model.derive(s)).collect()
}

fn distinct(structures: &[DiscreteStructure]) -> usize {
    let mut sigs: Vec<&DiscreteStructure> = structures.iter().collect();
    sigs.sort();
    sigs.dedup();
    sigs.len()
}

/// Outcome of the mixed-structure phase.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub log: Vec<LogRow>,
    pub rounds: usize,
    /// Whether the churn criterion (rather than the round cap) ended the search.
    pub converged: bool,
    pub last_churn: f64,
}

/// Trains a search model with mixed superedges, alternating epochs of SGD on
/// the operation weights and Adam on the structure weights until the derived
/// train structures stabilize. Non-search variants get plain SGD epochs.
pub fn alternating_search(model: &mut Model, train: &[&VideoSample], val: &[&VideoSample], cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut sgd = Sgd::new(cfg.lr_ops, cfg.momentum);
    let mut adam = Adam::new(cfg.lr_structure);
    let search = model.variant().is_search();
    let w = cfg.var_loss_weight;
    let mut log = Vec::new();
    let mut prev = derive_all(model, train)?;
    let mut epoch = 0;
    let mut last_churn = 1.0;
    let mut converged = false;
    let mut rounds = 0;
    for round in 1..=cfg.max_rounds {
        rounds = round;
        let phases: &[&str] = match (search, cfg.joint) {
            (false, _) => &["train"],
            (true, true) => &["joint"],
            (true, false) => &["operations", "structure"],
        };
        for &phase in phases {
            for _ in 0..cfg.period_epochs {
                epoch += 1;
                let seed = mix_seed(&[cfg.seed, epoch as u64]);
                let mut step = match phase {
                    "structure" => Step::Structure(&mut adam),
                    "joint" => Step::Joint(&mut sgd, &mut adam),
                    _ => Step::Operations(&mut sgd),
                };
                let stats = train_epoch(model, train, Routes::Mixed, w, cfg.batch_size, &mut step, seed)?;
                let v = evaluate(model, val, Routes::Mixed, w)?;
                let derived = derive_all(model, train)?;
                log.push(LogRow {
                    round,
                    phase: phase.to_string(),
                    epoch,
                    train_loss: stats.loss,
                    val_loss: v.loss,
                    val_acc: v.accuracy,
                    var_loss: stats.var_loss,
                    n_distinct_signatures: distinct(&derived),
                });
            }
        }
        if search {
            let now = derive_all(model, train)?;
            let changed = now.iter().zip(&prev).filter(|(a, b)| a != b).count();
            last_churn = changed as f64 / now.len().max(1) as f64;
            prev = now;
            if round >= cfg.min_rounds && last_churn < cfg.churn_threshold {
                converged = true;
                break;
            }
        } else if round >= cfg.min_rounds.max(1) && round >= cfg.max_rounds {
            break;
        }
    }
    Ok(SearchOutcome { log, rounds, converged, last_churn })
}

/// Reduce-on-plateau learning-rate rule with early stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub min_lr: f64,
    pub patience: usize,
    best: f64,
    stagnant: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauAction {
    Improved,
    Continue,
    Decayed,
    Stop,
}

impl PlateauSchedule {
    pub fn new(lr: f64, min_lr: f64, patience: usize) -> Self {
        PlateauSchedule { lr, min_lr, patience, best: f64::INFINITY, stagnant: 0 }
    }

    /// Records one epoch's validation loss.
    pub fn observe(&mut self, val_loss: f64) -> PlateauAction {
        if val_loss < self.best {
            self.best = val_loss;
            self.stagnant = 0;
            return PlateauAction::Improved;
        }
        self.stagnant += 1;
        if self.stagnant < self.patience {
            return PlateauAction::Continue;
        }
        self.stagnant = 0;
        if self.lr <= self.min_lr * (1.0 + 1e-9) {
            return PlateauAction::Stop;
        }
        self.lr = (self.lr / 10.0).max(self.min_lr);
        PlateauAction::Decayed
    }
}

/// Trains operation weights under fixed per-sample structures with the
/// plateau schedule, then restores the parameters of the best validation epoch.
/// Structure weights are never touched.
#[allow(clippy::too_many_arguments)]
pub fn discrete_finetune(
    model: &mut Model,
    train: &[&VideoSample],
    val: &[&VideoSample],
    train_routes: Routes<'_>,
    val_routes: Routes<'_>,
    cfg: &SearchConfig,
    round: usize,
    first_epoch: usize,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if let Routes::PerSample(s) = train_routes {
        if s.len() != train.len() {
            return Err(Error::Contract("one structure per training sample is required".into()));
        }
    }
    let n_distinct = match train_routes {
        Routes::PerSample(s) => distinct(s),
        Routes::Mixed => 0,
    };
    let mut schedule = PlateauSchedule::new(cfg.finetune_lr, cfg.finetune_min_lr, cfg.patience);
    let mut sgd = Sgd::new(schedule.lr, cfg.momentum);
    let mut best = (evaluate(model, val, val_routes, 0.0)?.loss, model.store.clone());
    let mut log = Vec::new();
    for k in 1..=cfg.finetune_max_epochs {
        let epoch = first_epoch + k;
        sgd.lr = schedule.lr;
        let seed = mix_seed(&[cfg.seed, 0xf1, epoch as u64]);
        let stats = train_epoch(model, train, train_routes, 0.0, cfg.batch_size, &mut Step::Operations(&mut sgd), seed)?;
        let v = evaluate(model, val, val_routes, 0.0)?;
        log.push(LogRow {
            round,
            phase: "finetune".into(),
            epoch,
            train_loss: stats.loss,
            val_loss: v.loss,
            val_acc: v.accuracy,
            var_loss: 0.0,
            n_distinct_signatures: n_distinct,
        });
        if v.loss < best.0 {
            best = (v.loss, model.store.clone());
        }
        if schedule.observe(v.loss) == PlateauAction::Stop {
            break;
        }
    }
    model.store = best.1;
    Ok(log)
}

/// Counts of one derived signature.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SignatureEntry {
    pub structure: String,
    pub count: usize,
    pub by_class: BTreeMap<usize, usize>,
    pub by_group: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StructureStats {
    pub n_samples: usize,
    pub n_distinct_signatures: usize,
    /// Distinct non-identity candidates over all derived superedges.
    pub n_distinct_kinds: usize,
    /// Distinct non-identity candidates within one derived structure,
    /// averaged over samples.
    pub mean_kinds_per_structure: f64,
    /// `I(group; signature)` in bits.
    pub mutual_information_bits: f64,
    pub signatures: BTreeMap<String, SignatureEntry>,
}

/// Mutual information in bits between the two coordinates of `pairs`.
pub fn mutual_information<A: Ord + Clone, B: Ord + Clone>(pairs: &[(A, B)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let mut joint: BTreeMap<(A, B), f64> = BTreeMap::new();
    let mut pa: BTreeMap<A, f64> = BTreeMap::new();
    let mut pb: BTreeMap<B, f64> = BTreeMap::new();
    for (a, b) in pairs {
        *joint.entry((a.clone(), b.clone())).or_default() += 1.0;
        *pa.entry(a.clone()).or_default() += 1.0;
        *pb.entry(b.clone()).or_default() += 1.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|((a, b), &c)| {
            let p = c / n;
            p * (p / ((pa[a] / n) * (pb[b] / n))).log2()
        })
        .sum();
    mi.max(0.0)
}

/// Groups samples by derived signature with counts per class and per group.
pub fn structure_statistics(model: &Model, data: &[&VideoSample]) -> Result<StructureStats> {
    let structures = derive_all(model, data)?;
    if structures.is_empty() {
        return Err(Error::NotApplicable(format!("{} has no derived structures", model.variant())));
    }
    Ok(statistics_of(data, &structures))
}

pub fn statistics_of(data: &[&VideoSample], structures: &[DiscreteStructure]) -> StructureStats {
    let mut signatures: BTreeMap<String, SignatureEntry> = BTreeMap::new();
    let mut pairs = Vec::with_capacity(data.len());
    let mut kinds: Vec<&str> = Vec::new();
    let mut per_structure = 0usize;
    for (s, st) in data.iter().zip(structures) {
        let sig = st.signature();
        let group = Family::from_group_id(s.group).map_or_else(|| s.group.to_string(), |f| f.to_string());
        let e = signatures.entry(sig.clone()).or_insert_with(|| SignatureEntry { structure: st.to_text(), ..Default::default() });
        e.count += 1;
        *e.by_class.entry(s.label).or_default() += 1;
        *e.by_group.entry(group).or_default() += 1;
        pairs.push((s.group, sig));
        let mut own: Vec<&str> = st.choices.iter().map(String::as_str).filter(|c| *c != "identity" && *c != "zero").collect();
        kinds.extend(&own);
        own.sort_unstable();
        own.dedup();
        per_structure += own.len();
    }
    kinds.sort_unstable();
    kinds.dedup();
    StructureStats {
        n_samples: data.len(),
        n_distinct_signatures: signatures.len(),
        n_distinct_kinds: kinds.len(),
        mean_kinds_per_structure: if data.is_empty() { 0.0 } else { per_structure as f64 / data.len() as f64 },
        mutual_information_bits: mutual_information(&pairs),
        signatures,
    }
}

/// Accuracy of one signature group under its own and the swapped structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub signature: String,
    pub swapped_to: String,
    pub n: usize,
    pub matched_accuracy: f64,
    pub swapped_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub rows: Vec<MismatchRow>,
    /// Over samples whose structure the permutation moves.
    pub matched_accuracy: f64,
    pub swapped_accuracy: f64,
    pub n_affected: usize,
}

impl MismatchReport {
    pub fn drop(&self) -> f64 {
        self.matched_accuracy - self.swapped_accuracy
    }
}

/// Permutation exchanging the two most populous signatures.
pub fn top_two_swap(stats: &StructureStats) -> Result<BTreeMap<String, String>> {
    let mut by_count: Vec<(&String, usize)> = stats.signatures.iter().map(|(k, v)| (k, v.count)).collect();
    if by_count.len() < 2 {
        return Err(Error::NotApplicable("fewer than two distinct structures".into()));
    }
    by_count.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let (a, b) = (by_count[0].0.clone(), by_count[1].0.clone());
    Ok(BTreeMap::from([(a.clone(), b.clone()), (b, a)]))
}

/// Evaluates every signature group under its own structure and under the
/// structure `swap` maps its signature to (unmapped signatures stay put).
pub fn mismatch_evaluate(model: &Model, data: &[&VideoSample], swap: &BTreeMap<String, String>) -> Result<MismatchReport> {
    let structures = derive_all(model, data)?;
    let mut by_sig: HashMap<String, DiscreteStructure> = HashMap::new();
    for s in &structures {
        by_sig.entry(s.signature()).or_insert_with(|| s.clone());
    }
    if by_sig.len() < 2 {
        return Err(Error::NotApplicable(format!("{} distinct structure(s); mismatch needs at least two", by_sig.len())));
    }
    let mut targets: HashMap<String, DiscreteStructure> = HashMap::new();
    for sig in by_sig.keys() {
        let to = swap.get(sig).unwrap_or(sig);
        let st = match by_sig.get(to) {
            Some(s) => s.clone(),
            None => DiscreteStructure::parse(&to.replace(';', "\n"))?,
        };
        targets.insert(sig.clone(), st);
    }
    let swapped: Vec<DiscreteStructure> = structures.iter().map(|s| targets[&s.signature()].clone()).collect();
    let matched = per_sample_correct(model, data, &structures)?;
    let moved = per_sample_correct(model, data, &swapped)?;
    let mut rows: BTreeMap<String, (String, usize, usize, usize)> = BTreeMap::new();
    let (mut n_aff, mut acc_m, mut acc_s) = (0usize, 0usize, 0usize);
    for (i, st) in structures.iter().enumerate() {
        let sig = st.signature();
        let to = swapped[i].signature();
        let r = rows.entry(sig.clone()).or_insert((to.clone(), 0, 0, 0));
        r.1 += 1;
        r.2 += usize::from(matched[i]);
        r.3 += usize::from(moved[i]);
        if to != sig {
            n_aff += 1;
            acc_m += usize::from(matched[i]);
            acc_s += usize::from(moved[i]);
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    Ok(MismatchReport {
        rows: rows
            .into_iter()
            .map(|(signature, (swapped_to, n, m, s))| MismatchRow {
                signature,
                swapped_to,
                n,
                matched_accuracy: frac(m, n),
                swapped_accuracy: frac(s, n),
            })
            .collect(),
        matched_accuracy: frac(acc_m, n_aff),
        swapped_accuracy: frac(acc_s, n_aff),
        n_affected: n_aff,
    })
}

fn per_sample_correct(model: &Model, data: &[&VideoSample], structures: &[DiscreteStructure]) -> Result<Vec<bool>> {
    data.par_iter().zip(structures.par_iter()).map(|(s, st)| Ok(model.evaluate_sample(s, Route::Discrete(st))?.1)).collect()
}

/// Copies the structure weights of `source` into `target`. Both must be
/// search models over the same cell and global-feature shape.
pub fn transfer_structure_weights(source: &Model, target: &mut Model) -> Result<()> {
    let (Some(a), Some(b)) = (source.structure, target.structure) else {
        return Err(Error::NotApplicable("structure transfer needs two search models".into()));
    };
    if a.adaptive != b.adaptive || a.n_edges != b.n_edges || a.n_candidates != b.n_candidates || a.global_dim != b.global_dim {
        return Err(Error::dim("transfer_structure_weights", format!("source {a:?} is incompatible with target {b:?}")));
    }
    target.store.set(b.param, source.store.get(a.param).clone())
}

/// Retrains `model`'s operation weights with its structure weights frozen:
/// operation epochs under mixed structures, then discrete fine-tuning under the
/// (fixed) derived structures.
pub fn train_with_frozen_structure(
    model: &mut Model,
    train: &[&VideoSample],
    val: &[&VideoSample],
    cfg: &SearchConfig,
    op_epochs: usize,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let mut sgd = Sgd::new(cfg.lr_ops, cfg.momentum);
    let mut log = Vec::new();
    let train_s = derive_all(model, train)?;
    let val_s = derive_all(model, val)?;
    let n_distinct = distinct(&train_s);
    let rounds = op_epochs.max(1);
    let mut epoch = 0;
    for round in 1..=rounds {
        epoch += 1;
        let seed = mix_seed(&[cfg.seed, epoch as u64]);
        let stats = train_epoch(model, train, Routes::Mixed, cfg.var_loss_weight, cfg.batch_size, &mut Step::Operations(&mut sgd), seed)?;
        let v = evaluate(model, val, Routes::Mixed, cfg.var_loss_weight)?;
        log.push(LogRow {
            round,
            phase: "operations".into(),
            epoch,
            train_loss: stats.loss,
            val_loss: v.loss,
            val_acc: v.accuracy,
            var_loss: stats.var_loss,
            n_distinct_signatures: n_distinct,
        });
    }
    log.extend(discrete_finetune(model, train, val, Routes::PerSample(&train_s), Routes::PerSample(&val_s), cfg, rounds, epoch)?);
    Ok(log)
}
