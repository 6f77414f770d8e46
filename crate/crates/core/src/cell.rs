//! The supernode computation cell.
//!
//! Supernode 0 is the cell input; every intermediate supernode `j` is the sum
//! of its transformed predecessors `Σ_{i<j} o_ij(X_i)`, and the cell output is
//! the channel-wise concatenation of the intermediate supernodes. Superedges
//! are all pairs `(i, j)` with `i < j`, in lexicographic order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{argmax, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphops::{OpConfig, OpInput, OpKind, OperationParams, Pass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSpace {
    /// Single graph operations plus zero and identity.
    OriginalOps,
    /// Zero, identity and three relation → aggregation → attention chains.
    FixedSubstructures,
}

impl fmt::Display for SearchSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchSpace::OriginalOps => "original_ops",
            SearchSpace::FixedSubstructures => "fixed_substructures",
        })
    }
}

impl FromStr for SearchSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original_ops" => Ok(SearchSpace::OriginalOps),
            "fixed_substructures" => Ok(SearchSpace::FixedSubstructures),
            other => Err(Error::Parse(format!("unknown search space '{other}'"))),
        }
    }
}

/// One entry of the search space: a chain of graph operations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub chain: Vec<OpKind>,
}

impl Candidate {
    fn single(kind: OpKind) -> Self {
        Candidate { id: kind.short_name().to_string(), chain: vec![kind] }
    }

    fn substructure(relation: OpKind) -> Self {
        Candidate { id: format!("{}_sub", relation.short_name()), chain: vec![relation, OpKind::FeatureAggregation, OpKind::NodeAttention] }
    }

    pub fn is_zero(&self) -> bool {
        self.chain == [OpKind::Zero]
    }

    pub fn is_identity(&self) -> bool {
        self.chain == [OpKind::Identity]
    }

    pub fn uses_background(&self) -> bool {
        self.chain.iter().any(|k| k.uses_background())
    }
}

impl SearchSpace {
    /// Candidates in canonical order.
    pub fn candidates(self) -> Vec<Candidate> {
        use OpKind::*;
        match self {
            SearchSpace::OriginalOps => {
                [Zero, Identity, FeatureAggregation, DifferencePropagation, TemporalConvolution, BackgroundIncorporation, NodeAttention]
                    .into_iter()
                    .map(Candidate::single)
                    .collect()
            }
            SearchSpace::FixedSubstructures => vec![
                Candidate::single(Zero),
                Candidate::single(Identity),
                Candidate::substructure(DifferencePropagation),
                Candidate::substructure(TemporalConvolution),
                Candidate::substructure(BackgroundIncorporation),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub n_intermediate: usize,
    pub space: SearchSpace,
}

impl Default for CellSpec {
    fn default() -> Self {
        CellSpec { n_intermediate: 3, space: SearchSpace::FixedSubstructures }
    }
}

impl CellSpec {
    pub fn edges(&self) -> Vec<(usize, usize)> {
        edges(self.n_intermediate)
    }

    pub fn n_edges(&self) -> usize {
        self.n_intermediate * (self.n_intermediate + 1) / 2
    }

    pub fn candidates(&self) -> Vec<Candidate> {
        self.space.candidates()
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates().len()
    }
}

/// All `(i, j)` with `0 ≤ i < j ≤ n`, lexicographic.
pub fn edges(n_intermediate: usize) -> Vec<(usize, usize)> {
    (0..n_intermediate).flat_map(|i| (i + 1..=n_intermediate).map(move |j| (i, j))).collect()
}

/// Parameters of one cell: for every superedge, one operation chain per candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellParams {
    pub spec: CellSpec,
    pub candidates: Vec<Candidate>,
    /// `[edge][candidate][step]`
    pub ops: Vec<Vec<Vec<OperationParams>>>,
}

impl CellParams {
    pub fn init<R: Rng + ?Sized>(spec: CellSpec, cfg: &OpConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        if spec.n_intermediate == 0 {
            return Err(Error::config("a cell needs at least one intermediate supernode"));
        }
        let candidates = spec.candidates();
        let mut ops = Vec::with_capacity(spec.n_edges());
        for (i, j) in spec.edges() {
            let mut per_edge = Vec::with_capacity(candidates.len());
            for cand in &candidates {
                let chain = cand
                    .chain
                    .iter()
                    .enumerate()
                    .map(|(s, &kind)| {
                        let name = format!("{prefix}.e{i}{j}.{}.{s}", cand.id);
                        OperationParams::init(kind, cfg, store, &name, rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                per_edge.push(chain);
            }
            ops.push(per_edge);
        }
        Ok(CellParams { spec, candidates, ops })
    }

    pub fn candidate_index(&self, id: &str) -> Result<usize> {
        self.candidates.iter().position(|c| c.id == id).ok_or_else(|| Error::Parse(format!("unknown candidate '{id}'")))
    }

    fn run_chain(
        &self,
        g: &mut Graph<'_>,
        edge: usize,
        cand: usize,
        x: Var,
        input: &OpInput<'_>,
        cfg: &OpConfig,
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let mut h = x;
        for op in &self.ops[edge][cand] {
            h = op.forward(g, h, input, cfg, pass)?;
        }
        Ok(h)
    }
}

/// `Σ_o softmax(α)_o · o(x)`, with `alphas` a `[1 × |O|]` row.
#[allow(clippy::too_many_arguments)]
pub fn mixed_edge_forward(
    g: &mut Graph<'_>,
    x: Var,
    alphas: Var,
    edge: usize,
    cell: &CellParams,
    input: &OpInput<'_>,
    cfg: &OpConfig,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let n_cand = cell.candidates.len();
    if g.value(alphas).numel() != n_cand {
        return Err(Error::dim("mixed_edge", format!("{} logits for {n_cand} candidates", g.value(alphas).numel())));
    }
    let row = g.reshape(alphas, &[1, n_cand])?;
    let weights = g.row_softmax(row)?;
    let mut terms = Vec::with_capacity(n_cand);
    for (o, cand) in cell.candidates.iter().enumerate() {
        if cand.is_zero() {
            continue;
        }
        let out = cell.run_chain(g, edge, o, x, input, cfg, pass)?;
        terms.push(g.scale_by(out, weights, o)?);
    }
    if terms.is_empty() {
        return g.constant(Tensor::zeros(&[g.shape(x)[0], cfg.c_out]));
    }
    g.add_n(&terms)
}

fn wire(g: &mut Graph<'_>, x: Var, cell: &CellParams, mut edge_fn: impl FnMut(&mut Graph<'_>, usize, Var) -> Result<Var>) -> Result<Var> {
    let n = cell.spec.n_intermediate;
    let mut supernodes = vec![x];
    let edges = cell.spec.edges();
    for j in 1..=n {
        let mut incoming = Vec::with_capacity(j);
        for (e, &(src, dst)) in edges.iter().enumerate() {
            if dst == j {
                incoming.push(edge_fn(g, e, supernodes[src])?);
            }
        }
        supernodes.push(g.add_n(&incoming)?);
    }
    g.concat_cols(&supernodes[1..])
}

/// Mixed evaluation of the whole cell; `alphas` is `[|E| × |O|]`.
pub fn cell_forward(
    g: &mut Graph<'_>,
    x: Var,
    alphas: Var,
    cell: &CellParams,
    input: &OpInput<'_>,
    cfg: &OpConfig,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let (n_e, n_o) = (cell.spec.n_edges(), cell.candidates.len());
    if g.shape(alphas) != [n_e, n_o] {
        return Err(Error::dim("cell_forward", format!("alphas {:?}, expected [{n_e}, {n_o}]", g.shape(alphas))));
    }
    wire(g, x, cell, |g, e, h| {
        let row = g.gather_rows(alphas, vec![Some(e)])?;
        mixed_edge_forward(g, h, row, e, cell, input, cfg, pass)
    })
}

/// Evaluation with one chosen candidate per superedge.
pub fn discrete_forward(
    g: &mut Graph<'_>,
    x: Var,
    structure: &DiscreteStructure,
    cell: &CellParams,
    input: &OpInput<'_>,
    cfg: &OpConfig,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    if structure.n_intermediate != cell.spec.n_intermediate {
        return Err(Error::dim(
            "discrete_forward",
            format!("structure for {} supernodes, cell has {}", structure.n_intermediate, cell.spec.n_intermediate),
        ));
    }
    let chosen = structure.choices.iter().map(|id| cell.candidate_index(id)).collect::<Result<Vec<_>>>()?;
    wire(g, x, cell, |g, e, h| {
        let c = chosen[e];
        if cell.candidates[c].is_zero() {
            return zero_like(g, h, cfg.c_out);
        }
        cell.run_chain(g, e, c, h, input, cfg, pass)
    })
}

fn zero_like(g: &mut Graph<'_>, h: Var, c: usize) -> Result<Var> {
    g.constant(Tensor::zeros(&[g.shape(h)[0], c]))
}

/// Which candidates discrete derivation may not pick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeriveRule {
    pub exclude_zero: bool,
    pub exclude_identity: bool,
}

impl Default for DeriveRule {
    fn default() -> Self {
        DeriveRule { exclude_zero: true, exclude_identity: false }
    }
}

/// Argmax candidate per superedge; ties go to the first candidate in
/// canonical order.
pub fn derive_discrete(alphas: &Tensor, spec: &CellSpec, rule: DeriveRule) -> Result<DiscreteStructure> {
    let candidates = spec.candidates();
    let (n_e, n_o) = (spec.n_edges(), candidates.len());
    if alphas.shape() != [n_e, n_o] {
        return Err(Error::dim("derive_discrete", format!("alphas {:?}, expected [{n_e}, {n_o}]", alphas.shape())));
    }
    if !alphas.is_finite() {
        return Err(Error::NonFinite { op: "derive_discrete" });
    }
    let allowed: Vec<bool> = candidates.iter().map(|c| !(rule.exclude_zero && c.is_zero() || rule.exclude_identity && c.is_identity())).collect();
    if !allowed.contains(&true) {
        return Err(Error::config("derivation rule excludes every candidate"));
    }
    let choices = (0..n_e)
        .map(|e| {
            let row: Vec<f64> = alphas.row(e).iter().zip(&allowed).map(|(&a, &ok)| if ok { a } else { f64::NEG_INFINITY }).collect();
            candidates[argmax(&row)].id.clone()
        })
        .collect();
    Ok(DiscreteStructure { n_intermediate: spec.n_intermediate, choices })
}

/// One candidate per superedge, in lexicographic edge order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DiscreteStructure {
    pub n_intermediate: usize,
    pub choices: Vec<String>,
}

impl DiscreteStructure {
    pub fn uniform(n_intermediate: usize, id: &str) -> Self {
        DiscreteStructure { n_intermediate, choices: vec![id.to_string(); n_intermediate * (n_intermediate + 1) / 2] }
    }

    /// `edge(i,j)=candidate` lines.
    pub fn to_text(&self) -> String {
        self.lines().join("\n")
    }

    /// Canonical single-line form used as a statistics key.
    pub fn signature(&self) -> String {
        self.lines().join(";")
    }

    fn lines(&self) -> Vec<String> {
        edges(self.n_intermediate).iter().zip(&self.choices).map(|((i, j), c)| format!("edge({i},{j})={c}")).collect()
    }

    /// Parses either the line form or the `;`-joined signature.
    pub fn parse(text: &str) -> Result<Self> {
        let mut found = BTreeMap::new();
        for item in text.split(['\n', ';']).map(str::trim).filter(|l| !l.is_empty()) {
            let (edge, cand) = item.split_once('=').ok_or_else(|| Error::Parse(format!("expected edge(i,j)=id, got '{item}'")))?;
            let inner = edge.strip_prefix("edge(").and_then(|s| s.strip_suffix(')')).ok_or_else(|| Error::Parse(format!("bad edge '{edge}'")))?;
            let (i, j) = inner.split_once(',').ok_or_else(|| Error::Parse(format!("bad edge '{edge}'")))?;
            let key: (usize, usize) = (
                i.trim().parse().map_err(|_| Error::Parse(format!("bad index in '{edge}'")))?,
                j.trim().parse().map_err(|_| Error::Parse(format!("bad index in '{edge}'")))?,
            );
            if cand.is_empty() || found.insert(key, cand.to_string()).is_some() {
                return Err(Error::Parse(format!("duplicate or empty entry for {edge}")));
            }
        }
        let n = found.keys().map(|&(_, j)| j).max().ok_or_else(|| Error::Parse("empty structure".into()))?;
        let expected = edges(n);
        if found.keys().copied().collect::<Vec<_>>() != expected {
            return Err(Error::Parse(format!("structure does not cover all {} superedges", expected.len())));
        }
        Ok(DiscreteStructure { n_intermediate: n, choices: found.into_values().collect() })
    }

    /// Graphviz digraph: supernodes as nodes, non-zero choices as labeled edges.
    pub fn to_dot(&self, name: &str) -> String {
        let mut out = format!("digraph \"{}\" {{\n  rankdir=LR;\n", name.replace('"', "'"));
        out.push_str("  n0 [label=\"input\"];\n");
        for j in 1..=self.n_intermediate {
            out.push_str(&format!("  n{j} [label=\"N{j}\"];\n"));
        }
        for ((i, j), c) in edges(self.n_intermediate).iter().zip(&self.choices) {
            if c != OpKind::Zero.short_name() {
                out.push_str(&format!("  n{i} -> n{j} [label=\"{c}\"];\n"));
            }
        }
        out.push_str("}\n");
        out
    }

    /// Inverse of [`to_dot`](Self::to_dot) for a single digraph; absent edges are zero.
    pub fn from_dot(text: &str) -> Result<Self> {
        let nodes = text
            .lines()
            .filter(|l| {
                let l = l.trim();
                l.starts_with('n') && l.contains("[label=") && !l.contains("->")
            })
            .count();
        if nodes < 2 {
            return Err(Error::Parse("DOT graph has no supernodes".into()));
        }
        let n = nodes - 1;
        let mut choices = vec![OpKind::Zero.short_name().to_string(); n * (n + 1) / 2];
        let all = edges(n);
        for line in text.lines().map(str::trim).filter(|l| l.contains("->")) {
            let (lhs, rest) = line.split_once("->").expect("checked");
            let (rhs, label) = rest.split_once('[').ok_or_else(|| Error::Parse(format!("edge without label: '{line}'")))?;
            let parse_node =
                |s: &str| s.trim().strip_prefix('n').and_then(|v| v.parse::<usize>().ok()).ok_or_else(|| Error::Parse(format!("bad node '{s}'")));
            let (i, j) = (parse_node(lhs)?, parse_node(rhs)?);
            let label = label
                .split_once("label=\"")
                .and_then(|(_, r)| r.split_once('"'))
                .map(|(l, _)| l)
                .ok_or_else(|| Error::Parse(format!("edge without label: '{line}'")))?;
            let e = all.iter().position(|&p| p == (i, j)).ok_or_else(|| Error::Parse(format!("edge n{i}->n{j} is not a superedge")))?;
            choices[e] = label.to_string();
        }
        Ok(DiscreteStructure { n_intermediate: n, choices })
    }
}

impl fmt::Display for DiscreteStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.signature())
    }
}

/// Mean over nodes, concatenated with `extra` when given, then `W z + b`.
pub fn pool_and_classify(g: &mut Graph<'_>, cell_out: Var, extra: Option<Var>, weight: Var, bias: Var) -> Result<Var> {
    let pooled = g.mean_rows(cell_out)?;
    let features = match extra {
        Some(e) => {
            let e = g.reshape(e, &[1, g.value(e).numel()])?;
            g.concat_cols(&[pooled, e])?
        }
        None => pooled,
    };
    let wt = g.transpose(weight)?;
    let logits = g.matmul(features, wt)?;
    g.add_row(logits, bias)
}
