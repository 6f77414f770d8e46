//! Experiment driver: dataset resolution, the two-stage training recipe,
//! evaluation, artifact output and ablation grids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::{DiscreteStructure, SearchSpace};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_atomic_str};
use crate::model::{InputShape, Model, ModelConfig, Variant};
use crate::search::{
    alternating_search, derive_all, discrete_finetune, evaluate, mismatch_evaluate, statistics_of, top_two_swap, LogRow, MismatchReport, Routes,
    SearchConfig, StructureStats, LOG_COLUMNS,
};
use crate::synthdata::{generate, stratified_split, Dataset, Family, GeneratorSpec, VideoSample};

/// Where the samples of an experiment come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Generate(GeneratorSpec),
    Path(PathBuf),
}

impl DataSource {
    pub fn resolve(&self) -> Result<Dataset> {
        match self {
            DataSource::Generate(spec) => generate(spec),
            DataSource::Path(p) => Dataset::load(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    /// Fraction of the non-test samples held out for early stopping.
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { test_fraction: 0.2, val_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub data: DataSource,
    pub output: PathBuf,
}

impl ExperimentSpec {
    /// Small shapes and a momentum term that train in seconds on one core.
    pub fn desk(variant: Variant, data: DataSource, output: PathBuf) -> Self {
        ExperimentSpec {
            model: ModelConfig { variant, hidden: 16, ..ModelConfig::default() },
            search: SearchConfig { momentum: 0.9, min_rounds: 3, max_rounds: 6, finetune_max_epochs: 12, ..SearchConfig::default() },
            split: SplitConfig::default(),
            data,
            output,
        }
    }

    pub fn variant_dir(&self) -> PathBuf {
        self.output.join(self.model.variant.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        let s = self.split;
        if !(0.0..1.0).contains(&s.test_fraction) || !(0.0..1.0).contains(&s.val_fraction) {
            return Err(Error::config("split fractions must lie in [0, 1)"));
        }
        if self.model.cell.n_intermediate == 0 {
            return Err(Error::config("the cell needs at least one intermediate supernode"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn config_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
        }
        Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Train/validation/test views of a dataset.
pub struct Splits<'d> {
    pub train: Vec<&'d VideoSample>,
    pub val: Vec<&'d VideoSample>,
    pub test: Vec<&'d VideoSample>,
    pub test_indices: Vec<usize>,
}

impl<'d> Splits<'d> {
    pub fn new(ds: &'d Dataset, split: SplitConfig, seed: u64) -> Result<Self> {
        let (tr, va, te) = stratified_split(ds, split.test_fraction, split.val_fraction, seed);
        if tr.is_empty() {
            return Err(Error::config("the split leaves no training samples"));
        }
        let pick = |ix: &[usize]| ix.iter().map(|&i| &ds.samples[i]).collect::<Vec<_>>();
        let (train, val, test) = (pick(&tr), pick(&va), pick(&te));
        Ok(Splits { train, val: if val.is_empty() { pick(&tr) } else { val }, test, test_indices: te })
    }
}

/// A trained model with its training log.
pub struct Fitted {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub rounds: usize,
}

/// Stage one: mixed search (or plain training for baselines). Stage two:
/// plateau fine-tuning under the derived discrete structures.
pub fn fit(config: &ModelConfig, search: &SearchConfig, train: &[&VideoSample], val: &[&VideoSample], n_classes: usize) -> Result<Fitted> {
    let first = train.first().ok_or_else(|| Error::config("empty training set"))?;
    let mut model = Model::new(config.clone(), InputShape::of(first, n_classes), search.seed)?;
    for s in train.iter().chain(val) {
        model.check_sample(s)?;
    }
    let outcome = alternating_search(&mut model, train, val, search)?;
    let mut log = outcome.log;
    let train_s = derive_all(&model, train)?;
    let val_s = derive_all(&model, val)?;
    let (tr, va) =
        if model.variant().is_search() { (Routes::PerSample(&train_s), Routes::PerSample(&val_s)) } else { (Routes::Mixed, Routes::Mixed) };
    log.extend(discrete_finetune(&mut model, train, val, tr, va, search, outcome.rounds, log.len())?);
    Ok(Fitted { model, log, rounds: outcome.rounds })
}

/// Test-set accuracy, overall and per family.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub per_family_accuracy: BTreeMap<String, f64>,
    pub per_family_count: BTreeMap<String, usize>,
}

/// Evaluates `model` on `data`, each search sample under its own derived structure.
pub fn evaluate_model(model: &Model, data: &[&VideoSample]) -> Result<Evaluation> {
    let structures = derive_all(model, data)?;
    let mut ev = Evaluation { n: data.len(), ..Default::default() };
    if data.is_empty() {
        return Ok(ev);
    }
    let routes = if model.variant().is_search() { Routes::PerSample(&structures) } else { Routes::Mixed };
    let total = evaluate(model, data, routes, 0.0)?;
    ev.loss = total.loss;
    ev.accuracy = total.accuracy;
    let mut by_family: BTreeMap<Family, Vec<&VideoSample>> = BTreeMap::new();
    let mut by_family_structs: BTreeMap<Family, Vec<DiscreteStructure>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        by_family.entry(s.family()).or_default().push(s);
        if let Some(st) = structures.get(i) {
            by_family_structs.entry(s.family()).or_default().push(st.clone());
        }
    }
    for (f, samples) in &by_family {
        let routes = match by_family_structs.get(f) {
            Some(st) => Routes::PerSample(st),
            None => Routes::Mixed,
        };
        let e = evaluate(model, samples, routes, 0.0)?;
        ev.per_family_accuracy.insert(f.to_string(), e.accuracy);
        ev.per_family_count.insert(f.to_string(), samples.len());
    }
    Ok(ev)
}

/// Distinct derived structures with their sample assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuresFile {
    pub format: String,
    pub version: u32,
    pub variant: String,
    pub n_intermediate: usize,
    pub space: SearchSpace,
    pub structures: Vec<StructureEntry>,
    /// Index into `structures` for every dataset sample.
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureEntry {
    pub signature: String,
    pub choices: Vec<String>,
    pub count: usize,
}

pub const STRUCTURES_FORMAT: &str = "graphops-structures";

impl StructuresFile {
    pub fn build(model: &Model, all: &[DiscreteStructure]) -> Self {
        let mut index: BTreeMap<&DiscreteStructure, usize> = BTreeMap::new();
        for s in all {
            let n = index.len();
            index.entry(s).or_insert(n);
        }
        let mut structures: Vec<StructureEntry> = vec![StructureEntry { signature: String::new(), choices: vec![], count: 0 }; index.len()];
        for (s, &k) in &index {
            structures[k] = StructureEntry { signature: s.signature(), choices: s.choices.clone(), count: 0 };
        }
        let assignments: Vec<usize> = all.iter().map(|s| index[s]).collect();
        for &k in &assignments {
            structures[k].count += 1;
        }
        StructuresFile {
            format: STRUCTURES_FORMAT.into(),
            version: 1,
            variant: model.variant().to_string(),
            n_intermediate: model.config.cell.n_intermediate,
            space: model.config.cell.space,
            structures,
            assignments,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: StructuresFile = serde_json::from_str(text).map_err(|e| Error::Parse(format!("structures file: {e}")))?;
        if f.format != STRUCTURES_FORMAT {
            return Err(Error::Parse(format!("unexpected format tag '{}'", f.format)));
        }
        for s in &f.structures {
            let d = s.structure();
            if d.choices.len() != crate::cell::edges(f.n_intermediate).len() || DiscreteStructure::parse(&d.to_text())? != d {
                return Err(Error::Parse(format!("malformed structure '{}'", s.signature)));
            }
        }
        if f.assignments.iter().any(|&k| k >= f.structures.len()) {
            return Err(Error::Parse("assignment points past the structure list".into()));
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_artifact(path)?)
    }

    /// One DOT digraph per distinct structure.
    pub fn to_dot(&self) -> String {
        self.structures.iter().enumerate().map(|(k, s)| s.structure().to_dot(&format!("structure_{k}"))).collect::<Vec<_>>().join("\n")
    }
}

impl StructureEntry {
    pub fn structure(&self) -> DiscreteStructure {
        let n = (1..).find(|&n| n * (n + 1) / 2 >= self.choices.len()).unwrap_or(1);
        DiscreteStructure { n_intermediate: n, choices: self.choices.clone() }
    }
}

pub fn read_artifact(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub variant: String,
    pub test: Evaluation,
    pub structure: Option<StructureStats>,
    pub mismatch: Option<MismatchReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub code_hash: String,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub experiment: ExperimentSpec,
    /// SHA-256 of every other artifact of the run.
    pub files: BTreeMap<String, String>,
}

/// Everything a run produced.
pub struct RunResult {
    pub dir: PathBuf,
    pub model: Model,
    pub log: Vec<LogRow>,
    pub stats: RunStats,
    pub structures: Option<StructuresFile>,
}

/// Runs one experiment and writes its artifacts under `<output>/<variant>/`.
pub fn run(spec: &ExperimentSpec) -> Result<RunResult> {
    spec.validate()?;
    let ds = spec.data.resolve()?;
    run_on(spec, &ds)
}

/// [`run`] on an already loaded dataset.
pub fn run_on(spec: &ExperimentSpec, ds: &Dataset) -> Result<RunResult> {
    spec.validate()?;
    let splits = Splits::new(ds, spec.split, spec.search.seed)?;
    let fitted = fit(&spec.model, &spec.search, &splits.train, &splits.val, ds.n_classes())?;
    let model = fitted.model;
    let test = evaluate_model(&model, &splits.test)?;
    let all: Vec<&VideoSample> = ds.samples.iter().collect();
    let (structure, structures, mismatch) = if model.variant().is_search() {
        let derived = derive_all(&model, &all)?;
        let stats = statistics_of(&all, &derived);
        let test_derived: Vec<DiscreteStructure> = splits.test_indices.iter().map(|&i| derived[i].clone()).collect();
        let test_stats = statistics_of(&splits.test, &test_derived);
        let mismatch = match top_two_swap(&test_stats) {
            Ok(swap) => Some(mismatch_evaluate(&model, &splits.test, &swap)?),
            Err(_) => None,
        };
        (Some(stats), Some(StructuresFile::build(&model, &derived)), mismatch)
    } else {
        (None, None, None)
    };
    let stats = RunStats { variant: model.variant().to_string(), test, structure, mismatch };
    let dir = spec.variant_dir();
    write_run(spec, ds, &dir, &model, &fitted.log, &stats, structures.as_ref())?;
    Ok(RunResult { dir, model, log: fitted.log, stats, structures })
}

pub fn metrics_csv(log: &[LogRow], test: &Evaluation) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in log {
        w.serialize(r)?;
    }
    let last = log.last().map_or((0, 0), |r| (r.round, r.epoch));
    w.serialize(LogRow {
        round: last.0,
        phase: "test".into(),
        epoch: last.1,
        train_loss: f64::NAN,
        val_loss: test.loss,
        val_acc: test.accuracy,
        var_loss: f64::NAN,
        n_distinct_signatures: 0,
    })?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

/// Parses a metrics file back into log rows (the final `test` row included).
pub fn parse_metrics(text: &str) -> Result<Vec<LogRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != LOG_COLUMNS {
        return Err(Error::Parse(format!("unexpected metrics columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::Parse(e.to_string()))).collect()
}

fn write_run(
    spec: &ExperimentSpec,
    ds: &Dataset,
    dir: &Path,
    model: &Model,
    log: &[LogRow],
    stats: &RunStats,
    structures: Option<&StructuresFile>,
) -> Result<()> {
    let mut files: Vec<(&str, Vec<u8>)> = vec![
        ("metrics.csv", metrics_csv(log, &stats.test)?.into_bytes()),
        ("stats.json", serde_json::to_vec_pretty(stats)?),
        ("model.json", serde_json::to_vec(model)?),
    ];
    let empty = StructuresFile {
        format: STRUCTURES_FORMAT.into(),
        version: 1,
        variant: model.variant().to_string(),
        n_intermediate: model.config.cell.n_intermediate,
        space: model.config.cell.space,
        structures: vec![],
        assignments: vec![],
    };
    let structures = structures.unwrap_or(&empty);
    files.push(("structures.json", serde_json::to_vec_pretty(structures)?));
    files.push(("structures.dot", structures.to_dot().into_bytes()));
    fs::create_dir_all(dir)?;
    let mut hashes = BTreeMap::new();
    for (name, bytes) in &files {
        write_atomic(&dir.join(name), bytes)?;
        hashes.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = Manifest {
        code_version: CODE_VERSION.into(),
        code_hash: sha256_hex(CODE_VERSION.as_bytes()),
        seed: spec.search.seed,
        config_hash: spec.config_hash()?,
        dataset_hash: sha256_hex(&ds.to_bytes()?),
        experiment: spec.clone(),
        files: hashes,
    };
    write_atomic_str(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)
}

/// Reloads a model written by [`run`].
pub fn load_model(dir: &Path) -> Result<Model> {
    serde_json::from_str(&read_artifact(&dir.join("model.json"))?).map_err(|e| Error::Parse(format!("model.json: {e}")))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    serde_json::from_str(&read_artifact(&dir.join("manifest.json"))?).map_err(|e| Error::Parse(format!("manifest.json: {e}")))
}

/// Axis of an ablation grid with the values to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Supernodes(Vec<usize>),
    Cells(Vec<usize>),
    VarWeight(Vec<f64>),
    Space(Vec<SearchSpace>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Supernodes(_) => "supernodes",
            AblationAxis::Cells(_) => "cells",
            AblationAxis::VarWeight(_) => "var_weight",
            AblationAxis::Space(_) => "space",
        }
    }

    /// The axis with its default sweep.
    pub fn default_for(name: &str) -> Result<Self> {
        match name {
            "supernodes" => Ok(AblationAxis::Supernodes(vec![2, 3, 4])),
            "cells" => Ok(AblationAxis::Cells(vec![1, 2])),
            "var_weight" => Ok(AblationAxis::VarWeight(vec![0.0, 0.1])),
            "space" => Ok(AblationAxis::Space(vec![SearchSpace::OriginalOps, SearchSpace::FixedSubstructures])),
            other => Err(Error::Parse(format!("unknown ablation axis '{other}'"))),
        }
    }

    fn points(&self, base: &ExperimentSpec) -> Vec<(String, ExperimentSpec)> {
        let mut out = Vec::new();
        let mut push = |label: String, f: &dyn Fn(&mut ExperimentSpec)| {
            let mut s = base.clone();
            f(&mut s);
            s.output = base.output.join(format!("{}={label}", self.name()));
            out.push((label, s));
        };
        match self {
            AblationAxis::Supernodes(v) => v.iter().for_each(|&n| push(n.to_string(), &|s| s.model.cell.n_intermediate = n)),
            AblationAxis::Cells(v) => v.iter().for_each(|&n| push(n.to_string(), &|s| s.model.cells = n)),
            AblationAxis::VarWeight(v) => v.iter().for_each(|&w| push(w.to_string(), &|s| s.search.var_loss_weight = w)),
            AblationAxis::Space(v) => v.iter().for_each(|&sp| push(sp.to_string(), &|s| s.model.cell.space = sp)),
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub axis: String,
    pub value: String,
    pub n_edges: usize,
    pub test_accuracy: f64,
    pub n_distinct_signatures: usize,
    pub n_distinct_kinds: usize,
    pub mean_kinds_per_structure: f64,
}

pub const GRID_COLUMNS: [&str; 7] =
    ["axis", "value", "n_edges", "test_accuracy", "n_distinct_signatures", "n_distinct_kinds", "mean_kinds_per_structure"];

/// Runs `base` once per axis value with a shared seed and writes
/// `<output>/ablation_<axis>.csv`.
pub fn ablation_grid(base: &ExperimentSpec, axis: &AblationAxis) -> Result<Vec<GridRow>> {
    base.validate()?;
    let ds = base.data.resolve()?;
    let mut rows = Vec::new();
    for (label, spec) in axis.points(base) {
        let r = run_on(&spec, &ds)?;
        let st = r.stats.structure.as_ref();
        rows.push(GridRow {
            axis: axis.name().into(),
            value: label,
            n_edges: spec.model.cell.n_edges(),
            test_accuracy: r.stats.test.accuracy,
            n_distinct_signatures: st.map_or(0, |s| s.n_distinct_signatures),
            n_distinct_kinds: st.map_or(0, |s| s.n_distinct_kinds),
            mean_kinds_per_structure: st.map_or(0.0, |s| s.mean_kinds_per_structure),
        });
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(GRID_COLUMNS)?;
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&base.output.join(format!("ablation_{}.csv", axis.name())), &bytes)?;
    Ok(rows)
}

/// Accuracy of single-operation models (plus the global-pooling baseline)
/// trained separately on each family of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminabilityReport {
    pub families: Vec<Family>,
    /// Column labels: model variants.
    pub columns: Vec<String>,
    /// `accuracy[family][column]` on each family's test split.
    pub accuracy: Vec<Vec<f64>>,
}

impl DiscriminabilityReport {
    pub fn get(&self, family: Family, column: &str) -> Option<f64> {
        let r = self.families.iter().position(|&f| f == family)?;
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.accuracy[r][c])
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("family\t{}", self.columns.join("\t"));
        for (f, row) in self.families.iter().zip(&self.accuracy) {
            out.push_str(&format!("\n{f}"));
            for a in row {
                out.push_str(&format!("\t{a:.3}"));
            }
        }
        out
    }
}

/// Graph operation whose mechanism matches a family's planted signal.
pub fn matching_operation(family: Family) -> crate::graphops::OpKind {
    use crate::graphops::OpKind;
    match family {
        Family::Temporal => OpKind::TemporalConvolution,
        Family::Difference => OpKind::DifferencePropagation,
        Family::Background => OpKind::BackgroundIncorporation,
        Family::Aggregation => OpKind::FeatureAggregation,
    }
}

/// Trains one model per (family, variant) pair; labels are re-indexed to the
/// two classes of the family.
pub fn family_discriminability_report(
    dataset: &Dataset,
    variants: &[Variant],
    base: &ModelConfig,
    search: &SearchConfig,
    split: SplitConfig,
) -> Result<DiscriminabilityReport> {
    let families = dataset.spec.families.clone();
    let mut accuracy = Vec::with_capacity(families.len());
    for &family in &families {
        let mut sub = dataset.family(family);
        let offset = dataset.spec.label(family, 0).expect("family of the dataset");
        sub.samples.iter_mut().for_each(|s| s.label -= offset);
        sub.spec.families = vec![family];
        let splits = Splits::new(&sub, split, search.seed)?;
        let mut row = Vec::with_capacity(variants.len());
        for &v in variants {
            let cfg = ModelConfig { variant: v, ..base.clone() };
            let fitted = fit(&cfg, search, &splits.train, &splits.val, 2)?;
            row.push(evaluate_model(&fitted.model, &splits.test)?.accuracy);
        }
        accuracy.push(row);
    }
    Ok(DiscriminabilityReport { families, columns: variants.iter().map(Variant::to_string).collect(), accuracy })
}
