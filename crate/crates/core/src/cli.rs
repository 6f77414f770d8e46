//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 divergence,
//! 4 missing artifact, 5 parse error, 1 anything else.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cell::SearchSpace;
use crate::error::{Error, Result};
use crate::io::write_atomic_str;
use crate::model::{ModelConfig, Variant};
use crate::search::{derive_all, mismatch_evaluate, statistics_of, top_two_swap, SearchConfig};
use crate::synthdata::{generate, Dataset, Family, GeneratorSpec, VideoSample};
use crate::trainer::{
    ablation_grid, evaluate_model, family_discriminability_report, load_manifest, load_model, matching_operation, run_on, AblationAxis, DataSource,
    ExperimentSpec, SplitConfig, Splits, StructuresFile,
};

pub const SEED_ENV: &str = "GRAPHOPS_SEED";

#[derive(Parser, Debug)]
#[command(name = "graphops", version, about = "Differentiable search over relational graph operations on synthetic videos")]
pub struct Cli {
    /// Worker threads for per-sample parallelism (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Generate(GenerateArgs),
    /// Search (or train a baseline) and write run artifacts.
    Search(SearchArgs),
    /// Evaluate a finished run on a dataset.
    Eval(EvalArgs),
    /// Run an ablation grid along one axis.
    Ablate(AblateArgs),
    /// Train single-operation probes per family and print the accuracy matrix.
    Report(ReportArgs),
    /// Render the structures of a run as DOT digraphs.
    ExportDot(ExportDotArgs),
}

/// JSON configuration file. Every section is optional; unknown keys are errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub generator: Option<GeneratorSpec>,
    pub model: Option<ModelConfig>,
    pub search: Option<SearchConfig>,
    pub split: Option<SplitConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// JSON configuration file (its `generator` section is used).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset path.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Dataset seed [default: 0, or $GRAPHOPS_SEED].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated families: temporal, difference, background, aggregation [default: all].
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<Family>>,
    /// Number of samples, a multiple of 2 x families [default: 2000].
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Frames per sample [default: 4].
    #[arg(long)]
    pub frames: Option<usize>,
    /// Nodes per frame, even [default: 6].
    #[arg(long)]
    pub nodes_per_frame: Option<usize>,
    /// Feature channels [default: 16].
    #[arg(long)]
    pub channels: Option<usize>,
    /// Background grid height [default: 4].
    #[arg(long)]
    pub grid_h: Option<usize>,
    /// Background grid width, even [default: 4].
    #[arg(long)]
    pub grid_w: Option<usize>,
    /// Gaussian noise standard deviation [default: 0.1].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Probability that a node is replaced by an outlier [default: 0.05].
    #[arg(long)]
    pub outlier_rate: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SpaceArg {
    OriginalOps,
    FixedSubstructures,
}

impl From<SpaceArg> for SearchSpace {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::OriginalOps => SearchSpace::OriginalOps,
            SpaceArg::FixedSubstructures => SearchSpace::FixedSubstructures,
        }
    }
}

/// Model and optimization overrides shared by `search`, `ablate` and `report`.
#[derive(Args, Debug, Default)]
pub struct TrainingArgs {
    /// JSON configuration file with optional `model`, `search` and `split` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seed (model init, split, batching) [default: 0, or $GRAPHOPS_SEED].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the structure variance loss [default: 0.1].
    #[arg(long)]
    pub var_weight: Option<f64>,
    /// Search space [default: fixed-substructures].
    #[arg(long, value_enum)]
    pub space: Option<SpaceArg>,
    /// Intermediate supernodes per cell [default: 3].
    #[arg(long)]
    pub supernodes: Option<usize>,
    /// Stacked cells [default: 1].
    #[arg(long)]
    pub cells: Option<usize>,
    /// Hidden width of every graph operation [default: 16].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Upper bound on alternation rounds [default: 6].
    #[arg(long)]
    pub max_rounds: Option<usize>,
    /// Upper bound on fine-tuning epochs [default: 12].
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// SGD momentum [default: 0.9].
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Mini-batch size [default: 8].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Update operation and structure weights together instead of alternating.
    #[arg(long)]
    pub joint: bool,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Dataset file from `generate`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory; artifacts go to `<outdir>/<variant>/`.
    #[arg(long)]
    pub outdir: PathBuf,
    /// global_pooling, pooling_over_rois, single_op(<op>), non_adaptive_search or adaptive_search [default: adaptive_search].
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Shorthand for the two search variants.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub adaptive: Option<bool>,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Test,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SwapArg {
    /// Exchange the two most populous structures.
    Top2,
    /// Keep every structure (sanity check).
    Identity,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `search` (`<outdir>/<variant>`).
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset file to evaluate on.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Which samples to evaluate [default: test].
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Print accuracy under swapped structures.
    #[arg(long)]
    pub mismatch: bool,
    /// Structure permutation used by `--mismatch`.
    #[arg(long, value_enum, default_value = "top2")]
    pub swap: SwapArg,
    /// Print the structure distribution.
    #[arg(long)]
    pub stats: bool,
    /// Print per-family accuracy.
    #[arg(long)]
    pub per_family: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub outdir: PathBuf,
    /// supernodes, cells, var_weight or space.
    #[arg(long)]
    pub axis: String,
    /// Base variant [default: adaptive_search].
    #[arg(long)]
    pub variant: Option<Variant>,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Also train every single operation, not only the matching one.
    #[arg(long)]
    pub all_ops: bool,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Debug)]
pub struct ExportDotArgs {
    /// `structures.json` of a run.
    #[arg(long)]
    pub structures: PathBuf,
    /// Output DOT file.
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Seed precedence: flag, then `$GRAPHOPS_SEED`, then the file value.
fn resolve_seed(flag: Option<u64>, file: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(file),
    }
}

fn generator_spec(a: &GenerateArgs) -> Result<GeneratorSpec> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut g = file.generator.unwrap_or_default();
    g.seed = resolve_seed(a.seed, g.seed)?;
    if let Some(f) = &a.families {
        g.families = f.clone();
    }
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { g.$field = v; } )* };
    }
    set!(n_samples, frames, nodes_per_frame, channels, grid_h, grid_w, noise, outlier_rate);
    g.validate()?;
    Ok(g)
}

/// Builds an experiment from the desk defaults, the config file and flags.
fn experiment(t: &TrainingArgs, variant: Option<Variant>, data: DataSource, output: PathBuf) -> Result<ExperimentSpec> {
    let file = FileConfig::load(t.config.as_deref())?;
    let mut spec = ExperimentSpec::desk(Variant::AdaptiveSearch, data, output);
    if let Some(m) = file.model {
        spec.model = m;
    }
    if let Some(s) = file.search {
        spec.search = s;
    }
    if let Some(s) = file.split {
        spec.split = s;
    }
    if let Some(v) = variant {
        spec.model.variant = v;
    }
    spec.search.seed = resolve_seed(t.seed, spec.search.seed)?;
    if let Some(w) = t.var_weight {
        spec.search.var_loss_weight = w;
    }
    if let Some(s) = t.space {
        spec.model.cell.space = s.into();
    }
    if let Some(n) = t.supernodes {
        spec.model.cell.n_intermediate = n;
    }
    if let Some(n) = t.cells {
        spec.model.cells = n;
    }
    if let Some(h) = t.hidden {
        spec.model.hidden = h;
    }
    if let Some(r) = t.max_rounds {
        spec.search.max_rounds = r;
        spec.search.min_rounds = spec.search.min_rounds.min(r);
    }
    if let Some(e) = t.finetune_epochs {
        spec.search.finetune_max_epochs = e;
    }
    if let Some(m) = t.momentum {
        spec.search.momentum = m;
    }
    if let Some(b) = t.batch_size {
        spec.search.batch_size = b;
    }
    if t.joint {
        spec.search.joint = true;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) => 3,
        Error::MissingArtifact(_) => 4,
        Error::Parse(_) | Error::Json(_) | Error::Csv(_) => 5,
        _ => 1,
    }
}

/// Parses `args` and runs the command, writing reports to `out`. Returns the
/// process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            let _ = writeln!(err, "error: --workers must be positive");
            return 2;
        }
        // Fails harmlessly when a pool was already installed in this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Search(a) => cmd_search(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Report(a) => cmd_report(&a, out),
        Command::ExportDot(a) => cmd_export_dot(&a, out),
    }
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let spec = generator_spec(a)?;
    let ds = generate(&spec)?;
    ds.save(&a.output)?;
    writeln!(out, "{}", ds.summary())?;
    writeln!(out, "wrote {}", a.output.display())?;
    Ok(())
}

fn search_variant(a: &SearchArgs) -> Result<Option<Variant>> {
    match (a.variant, a.adaptive) {
        (Some(v), Some(ad)) if v.is_search() && v != if ad { Variant::AdaptiveSearch } else { Variant::NonAdaptiveSearch } => {
            Err(Error::config(format!("--variant {v} contradicts --adaptive={ad}")))
        }
        (Some(v), Some(_)) if !v.is_search() => Err(Error::config(format!("--adaptive only applies to search variants, not {v}"))),
        (Some(v), _) => Ok(Some(v)),
        (None, Some(true)) => Ok(Some(Variant::AdaptiveSearch)),
        (None, Some(false)) => Ok(Some(Variant::NonAdaptiveSearch)),
        (None, None) => Ok(None),
    }
}

fn cmd_search(a: &SearchArgs, out: &mut dyn Write) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let spec = experiment(&a.training, search_variant(a)?, DataSource::Path(a.dataset.clone()), a.outdir.clone())?;
    let r = run_on(&spec, &ds)?;
    writeln!(out, "variant: {}", r.stats.variant)?;
    writeln!(out, "test accuracy: {:.4} ({} samples)", r.stats.test.accuracy, r.stats.test.n)?;
    if let Some(s) = &r.stats.structure {
        writeln!(out, "distinct structures: {}", s.n_distinct_signatures)?;
        writeln!(out, "family/structure mutual information: {:.4} bits", s.mutual_information_bits)?;
    }
    writeln!(out, "artifacts: {}", r.dir.display())?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = load_manifest(&a.run)?;
    let model = load_model(&a.run)?;
    let ds = Dataset::load(&a.dataset)?;
    let data: Vec<&VideoSample> = match a.split {
        SplitArg::All => ds.samples.iter().collect(),
        SplitArg::Test => Splits::new(&ds, manifest.experiment.split, manifest.seed)?.test,
    };
    for s in &data {
        model.check_sample(s)?;
    }
    let ev = evaluate_model(&model, &data)?;
    writeln!(out, "variant: {}", model.variant())?;
    writeln!(out, "accuracy: {:.6} ({} samples)", ev.accuracy, ev.n)?;
    if a.per_family {
        for (f, acc) in &ev.per_family_accuracy {
            writeln!(out, "family {f}: {acc:.6} ({} samples)", ev.per_family_count[f])?;
        }
    }
    if a.stats || a.mismatch {
        let derived = derive_all(&model, &data)?;
        if derived.is_empty() {
            writeln!(out, "structures: not applicable for {}", model.variant())?;
            return Ok(());
        }
        let stats = statistics_of(&data, &derived);
        if a.stats {
            writeln!(out, "distinct structures: {}", stats.n_distinct_signatures)?;
            writeln!(out, "family/structure mutual information: {:.4} bits", stats.mutual_information_bits)?;
            for (sig, e) in &stats.signatures {
                let groups: Vec<String> = e.by_group.iter().map(|(g, n)| format!("{g}={n}")).collect();
                writeln!(out, "structure {}\t{}\t{}", e.count, sig, groups.join(","))?;
            }
        }
        if a.mismatch {
            let swap = match a.swap {
                SwapArg::Identity => stats.signatures.keys().map(|k| (k.clone(), k.clone())).collect::<BTreeMap<_, _>>(),
                SwapArg::Top2 => match top_two_swap(&stats) {
                    Ok(s) => s,
                    Err(e) => {
                        writeln!(out, "mismatch: not applicable ({e})")?;
                        return Ok(());
                    }
                },
            };
            match mismatch_evaluate(&model, &data, &swap) {
                Ok(m) => {
                    for r in &m.rows {
                        writeln!(out, "mismatch\t{}\t{:.6}\t{:.6}\t{}", r.n, r.matched_accuracy, r.swapped_accuracy, r.signature)?;
                    }
                    writeln!(out, "matched accuracy: {:.6}", m.matched_accuracy)?;
                    writeln!(out, "swapped accuracy: {:.6}", m.swapped_accuracy)?;
                }
                Err(Error::NotApplicable(msg)) => writeln!(out, "mismatch: not applicable ({msg})")?,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let axis = AblationAxis::default_for(&a.axis).map_err(|e| Error::config(e.to_string()))?;
    if !a.dataset.exists() {
        return Err(Error::MissingArtifact(a.dataset.clone()));
    }
    let spec = experiment(&a.training, a.variant, DataSource::Path(a.dataset.clone()), a.outdir.clone())?;
    let rows = ablation_grid(&spec, &axis)?;
    writeln!(out, "axis\tvalue\tedges\taccuracy\tstructures\tkinds\tkinds_per_structure")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.4}\t{}\t{}\t{:.3}",
            r.axis, r.value, r.n_edges, r.test_accuracy, r.n_distinct_signatures, r.n_distinct_kinds, r.mean_kinds_per_structure
        )?;
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let spec = experiment(&a.training, None, DataSource::Path(a.dataset.clone()), PathBuf::new())?;
    let mut variants = vec![Variant::GlobalPooling];
    if a.all_ops {
        variants.extend(crate::graphops::OpKind::ALL.into_iter().map(Variant::SingleOp));
    } else {
        let mut ops: Vec<_> = ds.spec.families.iter().map(|&f| matching_operation(f)).collect();
        ops.sort();
        ops.dedup();
        variants.extend(ops.into_iter().map(Variant::SingleOp));
    }
    let report = family_discriminability_report(&ds, &variants, &spec.model, &spec.search, spec.split)?;
    writeln!(out, "{}", report.to_table())?;
    Ok(())
}

fn cmd_export_dot(a: &ExportDotArgs, out: &mut dyn Write) -> Result<()> {
    let file = StructuresFile::load(&a.structures)?;
    write_atomic_str(&a.output, &file.to_dot())?;
    writeln!(out, "wrote {} digraph(s) to {}", file.structures.len(), a.output.display())?;
    Ok(())
}
