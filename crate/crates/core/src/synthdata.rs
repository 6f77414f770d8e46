//! Planted-signal synthetic "videos".
//!
//! Each family hides its class label behind one relational mechanism so that
//! global mean pooling cannot see it:
//!
//! * `temporal`: every object drifts along a fixed direction over time; the
//!   drift sign is the class and averages out over frames.
//! * `difference`: objects form two clusters `μ ± δe`; the offset axis `e` is
//!   the class while the mean stays at `μ`.
//! * `background`: objects sit in one half of the frame; the class decides
//!   which of two background patterns lies under them. Node features carry a
//!   location code shared with the background cells of their half.
//! * `aggregation`: objects come from two of four prototypes; the class is
//!   which pairs co-occur (an XOR over the per-sample mean).
//!
//! Every family also adds a family marker to all nodes and background cells,
//! so the family (but not the class) is visible in the global feature.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::graphops::{BackgroundMap, NodeSet};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Temporal,
    Difference,
    Background,
    Aggregation,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Temporal, Family::Difference, Family::Background, Family::Aggregation];

    pub fn name(self) -> &'static str {
        match self {
            Family::Temporal => "temporal",
            Family::Difference => "difference",
            Family::Background => "background",
            Family::Aggregation => "aggregation",
        }
    }

    /// Stable group id, independent of which families a dataset contains.
    pub fn group_id(self) -> usize {
        self as usize
    }

    pub fn from_group_id(id: usize) -> Option<Family> {
        Family::ALL.get(id).copied()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| Error::Parse(format!("unknown family '{s}'")))
    }
}

pub const CLASSES_PER_FAMILY: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub families: Vec<Family>,
    pub frames: usize,
    pub nodes_per_frame: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub noise: f64,
    pub outlier_rate: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            families: Family::ALL.to_vec(),
            frames: 4,
            nodes_per_frame: 6,
            channels: 16,
            grid_h: 4,
            grid_w: 4,
            noise: 0.1,
            outlier_rate: 0.05,
            n_samples: 2000,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    /// Production-scale shapes (16 frames, 10 nodes, 256 channels, 7×7 grid).
    pub fn full_scale() -> Self {
        GeneratorSpec { frames: 16, nodes_per_frame: 10, channels: 256, grid_h: 7, grid_w: 7, ..GeneratorSpec::default() }
    }

    pub fn n_classes(&self) -> usize {
        self.families.len() * CLASSES_PER_FAMILY
    }

    pub fn global_dim(&self) -> usize {
        2 * self.channels
    }

    pub fn grid_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.families.len() * CLASSES_PER_FAMILY;
        let mut sorted = self.families.clone();
        sorted.sort();
        sorted.dedup();
        let checks: [(bool, &str); 9] = [
            (self.families.is_empty(), "at least one family is required"),
            (sorted.len() != self.families.len(), "families must be distinct"),
            (self.frames == 0, "frames must be positive"),
            (self.nodes_per_frame < 2 || !self.nodes_per_frame.is_multiple_of(2), "nodes_per_frame must be even and >= 2"),
            (self.channels < 2, "channels must be >= 2"),
            (self.grid_h == 0 || self.grid_w < 2 || !self.grid_w.is_multiple_of(2), "grid needs h >= 1 and an even width >= 2"),
            (!(self.noise >= 0.0 && self.noise.is_finite()), "noise must be finite and >= 0"),
            (!(0.0..1.0).contains(&self.outlier_rate), "outlier_rate must lie in [0, 1)"),
            (self.n_samples == 0 || cells == 0 || !self.n_samples.is_multiple_of(cells), "n_samples must be a positive multiple of 2 x families"),
        ];
        match checks.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }

    /// Dataset label for `(family, class)`.
    pub fn label(&self, family: Family, class: usize) -> Option<usize> {
        let pos = self.families.iter().position(|&f| f == family)?;
        Some(pos * CLASSES_PER_FAMILY + class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub nodes: NodeSet,
    pub background: BackgroundMap,
    /// Mean node feature ⊕ mean background cell.
    pub global_feature: Tensor,
    pub label: usize,
    pub group: usize,
}

impl VideoSample {
    pub fn family(&self) -> Family {
        Family::from_group_id(self.group).expect("valid group id")
    }

    pub fn new(nodes: NodeSet, background: BackgroundMap, label: usize, group: usize) -> Result<Self> {
        if background.frames() != nodes.frames || background.channels() != nodes.channels() {
            return Err(Error::dim("video_sample", "background frames/channels differ from nodes"));
        }
        let global_feature = global_feature(&nodes, &background);
        Ok(VideoSample { nodes, background, global_feature, label, group })
    }
}

/// Mean over all node features concatenated with the mean background cell.
pub fn global_feature(nodes: &NodeSet, background: &BackgroundMap) -> Tensor {
    let mean_rows = |t: &Tensor| -> Vec<f64> {
        let (m, c) = (t.rows(), t.cols());
        (0..c).map(|j| (0..m).map(|i| t.get2(i, j)).sum::<f64>() / m as f64).collect()
    };
    let mut g = mean_rows(&nodes.features);
    g.extend(mean_rows(&background.as_rows()));
    Tensor::new(vec![g.len()], g).expect("non-empty")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: GeneratorSpec,
    pub samples: Vec<VideoSample>,
}

/// Fixed directions shared by every sample of a dataset.
struct Directions {
    markers: Vec<Vec<f64>>,
    drift: Vec<f64>,
    cluster_axes: [Vec<f64>; 2],
    patterns: [Vec<f64>; 2],
    halves: [Vec<f64>; 2],
    prototypes: [Vec<f64>; 4],
}

impl Directions {
    fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut basis = orthonormal(15, channels, &mut rng).into_iter();
        let mut next = || basis.next().expect("15 directions");
        Directions {
            markers: (0..4).map(|_| next()).collect(),
            drift: next(),
            cluster_axes: [next(), next()],
            patterns: [next(), next()],
            halves: [next(), next()],
            prototypes: [next(), next(), next(), next()],
        }
    }
}

/// `count` unit vectors; Gram–Schmidt while the dimension allows, random after.
fn orthonormal(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        if out.len() < dim {
            for b in &out {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

const MARKER_SCALE: f64 = 1.0;
const OBJECT_SCALE: f64 = 1.5;
const DRIFT_SCALE: f64 = 1.0;
const CLUSTER_OFFSET: f64 = 1.0;
const PATTERN_SCALE: f64 = 1.5;
const HALF_SCALE: f64 = 1.5;
const PROTOTYPE_SCALE: f64 = 1.5;
const PROTOTYPE_JITTER: f64 = 0.3;
const OUTLIER_SCALE: f64 = 1.5;

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x * norm / n).collect()
}

/// Seed of sample `index` under dataset seed `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step over (seed, index)
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates the full dataset. Sample `i` belongs to the `(family, class)` cell
/// `i mod (2·|families|)`, so every cell gets exactly `n / (2·|families|)` samples.
pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let dirs = Directions::new(spec.channels, spec.seed);
    let cells = spec.n_classes();
    let samples = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| {
            let cell = i % cells;
            let family = spec.families[cell / CLASSES_PER_FAMILY];
            let class = cell % CLASSES_PER_FAMILY;
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, i));
            generate_sample(spec, &dirs, family, class, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: spec.clone(), samples })
}

/// One sample of `family`/`class`. The random stream is consumed identically
/// for both classes, so flipping `class` under the same seed changes only the
/// planted signal.
pub fn generate_one(spec: &GeneratorSpec, family: Family, class: usize, sample_seed: u64) -> Result<VideoSample> {
    spec.validate()?;
    if class >= CLASSES_PER_FAMILY || !spec.families.contains(&family) {
        return Err(Error::config(format!("no class {class} of family {family} in this spec")));
    }
    let dirs = Directions::new(spec.channels, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    generate_sample(spec, &dirs, family, class, &mut rng)
}

fn generate_sample(spec: &GeneratorSpec, dirs: &Directions, family: Family, class: usize, rng: &mut ChaCha8Rng) -> Result<VideoSample> {
    let (t_len, k_len, c) = (spec.frames, spec.nodes_per_frame, spec.channels);
    let (gh, gw) = (spec.grid_h, spec.grid_w);
    let marker = &dirs.markers[family.group_id()];
    let sign = if class == 0 { 1.0 } else { -1.0 };

    // latent draws, identical for both classes
    let objects: Vec<Vec<f64>> = (0..k_len).map(|_| random_vector(rng, c, OBJECT_SCALE)).collect();
    let centres: Vec<(f64, f64)> = (0..k_len).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    let side = rng.random_range(0..2usize);
    let pair_choice = rng.random_range(0..2usize);
    let bg_base: Vec<Vec<f64>> = (0..gh * gw).map(|_| random_vector(rng, c, 0.5)).collect();

    let mut features = vec![0.0; t_len * k_len * c];
    let mut positions = vec![0.0; t_len * k_len * 3];
    for t in 0..t_len {
        let phase = if t_len > 1 { (t as f64 - (t_len - 1) as f64 / 2.0) / ((t_len - 1) as f64 / 2.0) } else { 0.0 };
        for k in 0..k_len {
            let i = t * k_len + k;
            let x = &mut features[i * c..(i + 1) * c];
            axpy(x, MARKER_SCALE, marker);
            let (mut px, py) = centres[k];
            match family {
                Family::Temporal => {
                    axpy(x, 1.0, &objects[k]);
                    axpy(x, sign * DRIFT_SCALE * phase, &dirs.drift);
                }
                Family::Difference => {
                    // the shared centre is objects[0]; clusters split by object parity
                    axpy(x, 1.0, &objects[0]);
                    let axis = &dirs.cluster_axes[class];
                    let side = if k % 2 == 0 { 1.0 } else { -1.0 };
                    axpy(x, side * CLUSTER_OFFSET, axis);
                }
                Family::Background => {
                    axpy(x, 1.0, &objects[k]);
                    axpy(x, HALF_SCALE, &dirs.halves[side]);
                    px = (side as f64 + px) / 2.0;
                }
                Family::Aggregation => {
                    const PAIRS: [[[usize; 2]; 2]; 2] = [[[0, 1], [2, 3]], [[0, 2], [1, 3]]];
                    let pair = PAIRS[class][pair_choice];
                    let proto = &dirs.prototypes[pair[k % 2]];
                    axpy(x, PROTOTYPE_SCALE, proto);
                    axpy(x, PROTOTYPE_JITTER / OBJECT_SCALE, &objects[k]);
                }
            }
            let p = &mut positions[i * 3..(i + 1) * 3];
            p[0] = px;
            p[1] = py;
            p[2] = if t_len > 1 { t as f64 / (t_len - 1) as f64 } else { 0.0 };
        }
    }

    let mut maps = vec![0.0; t_len * gh * gw * c];
    for t in 0..t_len {
        for r in 0..gh {
            for col in 0..gw {
                let cell = r * gw + col;
                let y = &mut maps[(t * gh * gw + cell) * c..(t * gh * gw + cell + 1) * c];
                axpy(y, MARKER_SCALE, marker);
                axpy(y, 1.0, &bg_base[cell]);
                if family == Family::Background {
                    let half = usize::from(col >= gw / 2);
                    axpy(y, HALF_SCALE, &dirs.halves[half]);
                    // class 0: the objects' half carries pattern 0
                    let pattern = usize::from(half == side) ^ 1 ^ class;
                    axpy(y, PATTERN_SCALE, &dirs.patterns[pattern]);
                } else {
                    // balanced filler so every family shows both patterns
                    axpy(y, PATTERN_SCALE, &dirs.patterns[usize::from(col >= gw / 2)]);
                }
            }
        }
    }

    // outliers and noise: always drawn so the stream stays class-independent
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    for i in 0..t_len * k_len {
        let is_outlier = rng.random::<f64>() < spec.outlier_rate;
        let replacement = random_vector(rng, c, OUTLIER_SCALE);
        let (ox, oy) = (rng.random::<f64>(), rng.random::<f64>());
        if is_outlier {
            features[i * c..(i + 1) * c].copy_from_slice(&replacement);
            positions[i * 3] = ox;
            positions[i * 3 + 1] = oy;
        }
    }
    if spec.noise > 0.0 {
        features.iter_mut().for_each(|v| *v += noise.sample(rng));
        maps.iter_mut().for_each(|v| *v += noise.sample(rng));
    }

    let nodes = NodeSet::frame_major(Tensor::new(vec![t_len * k_len, c], features)?, Tensor::new(vec![t_len * k_len, 3], positions)?, t_len)?;
    let background = BackgroundMap::new(Tensor::new(vec![t_len, gh, gw, c], maps)?)?;
    let label = spec.label(family, class).expect("family in spec");
    VideoSample::new(nodes, background, label, family.group_id())
}

const MAGIC: &[u8; 8] = b"GOPSDS01";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: GeneratorSpec,
    n_samples: usize,
    labels: Vec<usize>,
    groups: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes()
    }

    /// Subset by sample indices (order preserved).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { spec: self.spec.clone(), samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }

    /// Samples of one family only, labels kept.
    pub fn family(&self, family: Family) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].family() == family).collect();
        self.subset(&idx)
    }

    /// Serializes as: 8-byte magic, `u32` LE header length, JSON header, then
    /// per sample the node features, positions, background maps and global
    /// feature as little-endian `f64`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: "graphops-dataset".into(),
            version: DATASET_FORMAT_VERSION,
            spec: self.spec.clone(),
            n_samples: self.samples.len(),
            labels: self.samples.iter().map(|s| s.label).collect(),
            groups: self.samples.iter().map(|s| s.group).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for s in &self.samples {
            for t in [&s.nodes.features, &s.nodes.positions, &s.background.maps, &s.global_feature] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Parse("not a graphops dataset (bad magic)".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| Error::Parse("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Parse(e.to_string()))?;
        if header.version != DATASET_FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported dataset version {}", header.version)));
        }
        let spec = header.spec;
        let (t, k, c) = (spec.frames, spec.nodes_per_frame, spec.channels);
        let n_nodes = t * k;
        let sizes = [n_nodes * c, n_nodes * 3, t * spec.grid_cells() * c, 2 * c];
        let per_sample: usize = sizes.iter().sum::<usize>() * 8;
        let payload = &bytes[12 + hlen..];
        if header.labels.len() != header.n_samples || header.groups.len() != header.n_samples || payload.len() != per_sample * header.n_samples {
            return Err(Error::Parse("payload size does not match header".into()));
        }
        let mut samples = Vec::with_capacity(header.n_samples);
        for (i, chunk) in payload.chunks(per_sample).enumerate() {
            let mut floats = chunk.chunks(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
            let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
            let features = Tensor::new(vec![n_nodes, c], take(sizes[0]))?;
            let positions = Tensor::new(vec![n_nodes, 3], take(sizes[1]))?;
            let maps = Tensor::new(vec![t, spec.grid_h, spec.grid_w, c], take(sizes[2]))?;
            let global = Tensor::new(vec![2 * c], take(sizes[3]))?;
            let nodes = NodeSet::frame_major(features, positions, t)?;
            samples.push(VideoSample {
                nodes,
                background: BackgroundMap::new(maps)?,
                global_feature: global,
                label: header.labels[i],
                group: header.groups[i],
            });
        }
        Ok(Dataset { spec, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut bytes = Vec::new();
        BufReader::new(file).read_to_end(&mut bytes)?;
        Dataset::from_bytes(&bytes)
    }

    /// One line per family: name, sample count and label range.
    pub fn summary(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "n_samples={} families={} classes={} frames={} nodes_per_frame={} channels={} grid={}x{}",
            self.len(),
            s.families.iter().map(|f| f.name()).collect::<Vec<_>>().join(","),
            s.n_classes(),
            s.frames,
            s.nodes_per_frame,
            s.channels,
            s.grid_h,
            s.grid_w
        );
        for f in &s.families {
            let n = self.samples.iter().filter(|x| x.family() == *f).count();
            out.push_str(&format!("\n  {f}: {n}"));
        }
        out
    }

    /// Writes a human-readable summary; used by the CLI.
    pub fn write_summary<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "{}", self.summary())?;
        Ok(())
    }
}

/// Deterministic stratified split into (train, val, test) index lists: a
/// `test_fraction` slice of every label is held out, then `val_fraction` of
/// the remainder.
pub fn stratified_split(dataset: &Dataset, test_fraction: f64, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b17);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for label in 0..dataset.n_classes() {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].label == label).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        let n_val = ((idx.len() - n_test) as f64 * val_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        val.extend_from_slice(&idx[n_test..n_test + n_val]);
        train.extend_from_slice(&idx[n_test + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}
