//! Pairwise graph structures, the flat log-potential layout, and exact
//! inference by enumeration.
//!
//! A model over `n_nodes` variables sharing one support `0..support_size`
//! carries a table `log psi_e(x_i, x_j)` per edge `e = (i, j)`. The tables are
//! stored back to back, edge-major, each row-major over `(x_i, x_j)`, with
//! edges in lexicographic order.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const STRUCTURE_HEADER: &str = "mrf-structure v1";

/// Default cap on the number of joint states the oracles will enumerate.
pub const DEFAULT_STATE_CAP: u128 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphStructure {
    n_nodes: usize,
    support_size: usize,
    edges: Vec<(usize, usize)>,
    max_degree: usize,
}

impl GraphStructure {
    /// Builds a structure from unordered pairs. Pairs are oriented `i < j`
    /// and sorted; self-loops, duplicates and out-of-range endpoints are
    /// rejected.
    pub fn new(n_nodes: usize, support_size: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_nodes == 0 || support_size == 0 {
            return Err(Error::Config("n_nodes and support_size must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::Index(format!("edge ({a}, {b}) outside 0..{n_nodes}")));
            }
            if a == b {
                return Err(Error::Config(format!("self-loop on node {a}")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::Config(format!("duplicate edge ({a}, {b})")));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut degree = vec![0usize; n_nodes];
        for &(i, j) in &edges {
            degree[i] += 1;
            degree[j] += 1;
        }
        Ok(GraphStructure {
            n_nodes,
            support_size,
            max_degree: degree.into_iter().max().unwrap_or(0),
            edges,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn support_size(&self) -> usize {
        self.support_size
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// Length of the flat log-potential vector, `|E| * |X|^2`.
    pub fn n_params(&self) -> usize {
        self.edges.len() * self.support_size * self.support_size
    }

    pub fn param_index(&self, edge: usize, x_i: usize, x_j: usize) -> Result<usize> {
        let s = self.support_size;
        if edge >= self.edges.len() || x_i >= s || x_j >= s {
            return Err(Error::Index(format!(
                "param ({edge}, {x_i}, {x_j}) outside {} edges x {s} values",
                self.edges.len()
            )));
        }
        Ok(edge * s * s + x_i * s + x_j)
    }

    /// Neighbor lists as `(neighbor, edge index, this node is the low end)`.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize, bool)>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            adj[i].push((j, e, true));
            adj[j].push((i, e, false));
        }
        adj
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{STRUCTURE_HEADER}").unwrap();
        writeln!(s, "n_nodes={}", self.n_nodes).unwrap();
        writeln!(s, "support_size={}", self.support_size).unwrap();
        for &(i, j) in &self.edges {
            writeln!(s, "{i} {j}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == STRUCTURE_HEADER => {}
            Some((_, l)) => {
                return Err(Error::Version {
                    expected: STRUCTURE_HEADER.into(),
                    found: l.trim_end().into(),
                })
            }
            None => return Err(Error::parse(1, "empty structure file")),
        }
        let mut field = |name: &str| -> Result<usize> {
            let (ln, l) = lines.next().ok_or_else(|| Error::parse(0, format!("missing {name}")))?;
            l.trim()
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(ln, format!("expected {name}=<integer>")))
        };
        let n_nodes = field("n_nodes")?;
        let support_size = field("support_size")?;
        let mut edges = Vec::new();
        for (ln, l) in lines {
            let l = l.trim();
            if l.is_empty() {
                continue;
            }
            let mut it = l.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => edges.push((a, b)),
                _ => return Err(Error::parse(ln, format!("bad edge line {l:?}"))),
            }
        }
        GraphStructure::new(n_nodes, support_size, edges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Number of edges requested by `edge_factor * n_nodes`, rounded half away
/// from zero.
pub fn edge_count(n_nodes: usize, edge_factor: f64) -> usize {
    (edge_factor * n_nodes as f64).round() as usize
}

/// Samples `round(edge_factor * n_nodes)` distinct edges uniformly without
/// replacement.
pub fn make_random_structure(
    n_nodes: usize,
    support_size: usize,
    edge_factor: f64,
    seed: u64,
) -> Result<GraphStructure> {
    if !(edge_factor.is_finite() && edge_factor >= 0.0) {
        return Err(Error::Config(format!("edge factor {edge_factor}")));
    }
    let want = edge_count(n_nodes, edge_factor);
    let pairs = n_nodes * n_nodes.saturating_sub(1) / 2;
    if want > pairs {
        return Err(Error::Config(format!(
            "{want} edges requested but only {pairs} pairs exist among {n_nodes} nodes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = sample(&mut rng, pairs, want)
        .into_iter()
        .map(|p| pair_from_rank(p, n_nodes));
    GraphStructure::new(n_nodes, support_size, edges)
}

/// Inverse of the row-major enumeration of pairs `(i, j)`, `i < j`.
fn pair_from_rank(mut r: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if r < row {
            return (i, i + 1 + r);
        }
        r -= row;
        i += 1;
    }
}

/// 4-neighbor grid; node `(r, c)` has index `r * width + c`.
pub fn make_grid_structure(height: usize, width: usize, support_size: usize) -> Result<GraphStructure> {
    if height == 0 || width == 0 {
        return Err(Error::Config("grid dimensions must be positive".into()));
    }
    let mut edges = Vec::with_capacity(2 * height * width);
    for r in 0..height {
        for c in 0..width {
            let v = r * width + c;
            if c + 1 < width {
                edges.push((v, v + 1));
            }
            if r + 1 < height {
                edges.push((v, v + width));
            }
        }
    }
    GraphStructure::new(height * width, support_size, edges)
}

/// Flat log-potential vector paired with a structure by length.
#[derive(Clone, Debug, PartialEq)]
pub struct LogPotentials {
    values: Vec<f64>,
}

impl LogPotentials {
    pub fn new(structure: &GraphStructure, values: Vec<f64>) -> Result<Self> {
        if values.len() != structure.n_params() {
            return Err(Error::Shape(format!(
                "{} potentials for a structure with k = {}",
                values.len(),
                structure.n_params()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite log-potential".into()));
        }
        Ok(LogPotentials { values })
    }

    pub fn zeros(structure: &GraphStructure) -> Self {
        LogPotentials {
            values: vec![0.0; structure.n_params()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// One value per node, each below the support size.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn validate(&self, structure: &GraphStructure) -> Result<()> {
        if self.0.len() != structure.n_nodes() {
            return Err(Error::Shape(format!(
                "assignment of length {} for {} nodes",
                self.0.len(),
                structure.n_nodes()
            )));
        }
        if let Some(v) = self.0.iter().find(|&&v| v >= structure.support_size()) {
            return Err(Error::Index(format!(
                "value {v} outside support {}",
                structure.support_size()
            )));
        }
        Ok(())
    }
}

fn check_potentials(structure: &GraphStructure, psi: &LogPotentials) -> Result<()> {
    if psi.len() != structure.n_params() {
        return Err(Error::Shape(format!(
            "{} potentials for k = {}",
            psi.len(),
            structure.n_params()
        )));
    }
    Ok(())
}

/// `sum_e log psi_e(x_i, x_j)`: the log of the unnormalized joint.
pub fn log_score(structure: &GraphStructure, psi: &LogPotentials, x: &Assignment) -> Result<f64> {
    check_potentials(structure, psi)?;
    x.validate(structure)?;
    Ok(score_unchecked(structure, psi.values(), &x.0))
}

fn score_unchecked(structure: &GraphStructure, psi: &[f64], x: &[usize]) -> f64 {
    let s = structure.support_size();
    structure
        .edges()
        .iter()
        .enumerate()
        .map(|(e, &(i, j))| psi[e * s * s + x[i] * s + x[j]])
        .sum()
}

/// Exact per-node marginals, `n_nodes x support_size`, rows summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactMarginals {
    pub rows: Vec<Vec<f64>>,
}

fn state_count(structure: &GraphStructure, free: usize, cap: u128) -> Result<u128> {
    let states = (structure.support_size() as u128)
        .checked_pow(free as u32)
        .unwrap_or(u128::MAX);
    if states > cap {
        return Err(Error::OracleSize { states, cap });
    }
    Ok(states)
}

/// Calls `f(x, log_score)` for every joint state consistent with `evidence`.
fn enumerate(
    structure: &GraphStructure,
    psi: &[f64],
    evidence: &[Option<usize>],
    cap: u128,
    mut f: impl FnMut(&[usize], f64),
) -> Result<()> {
    let s = structure.support_size();
    let free: Vec<usize> = (0..structure.n_nodes()).filter(|&i| evidence[i].is_none()).collect();
    state_count(structure, free.len(), cap)?;
    let mut x: Vec<usize> = evidence.iter().map(|e| e.unwrap_or(0)).collect();
    loop {
        f(&x, score_unchecked(structure, psi, &x));
        let mut k = 0;
        loop {
            if k == free.len() {
                return Ok(());
            }
            let v = free[k];
            x[v] += 1;
            if x[v] < s {
                break;
            }
            x[v] = 0;
            k += 1;
        }
    }
}

fn check_evidence(structure: &GraphStructure, evidence: &[Option<usize>]) -> Result<()> {
    if evidence.len() != structure.n_nodes() {
        return Err(Error::Shape(format!(
            "evidence of length {} for {} nodes",
            evidence.len(),
            structure.n_nodes()
        )));
    }
    if evidence.iter().flatten().any(|&v| v >= structure.support_size()) {
        return Err(Error::Index("evidence value outside support".into()));
    }
    Ok(())
}

/// Exact conditional node marginals given hard evidence, by enumerating
/// every unobserved configuration.
pub fn brute_force_marginals(
    structure: &GraphStructure,
    psi: &LogPotentials,
    evidence: &[Option<usize>],
    cap: u128,
) -> Result<ExactMarginals> {
    check_potentials(structure, psi)?;
    check_evidence(structure, evidence)?;
    let (n, s) = (structure.n_nodes(), structure.support_size());
    // Pass one finds the max score so the weights cannot overflow.
    let mut max = f64::NEG_INFINITY;
    enumerate(structure, psi.values(), evidence, cap, |_, l| max = max.max(l))?;
    let mut rows = vec![vec![0.0; s]; n];
    let mut z = 0.0;
    enumerate(structure, psi.values(), evidence, cap, |x, l| {
        let w = (l - max).exp();
        z += w;
        for (i, &v) in x.iter().enumerate() {
            rows[i][v] += w;
        }
    })?;
    for row in &mut rows {
        for p in row.iter_mut() {
            *p /= z;
        }
    }
    Ok(ExactMarginals { rows })
}

/// Exact pairwise marginal table `P(X_a = u, X_b = v)`.
pub fn brute_force_pair_marginal(
    structure: &GraphStructure,
    psi: &LogPotentials,
    a: usize,
    b: usize,
    cap: u128,
) -> Result<Vec<Vec<f64>>> {
    check_potentials(structure, psi)?;
    let s = structure.support_size();
    let none = vec![None; structure.n_nodes()];
    let log_z = brute_force_log_partition(structure, psi, cap)?;
    let mut table = vec![vec![0.0; s]; s];
    enumerate(structure, psi.values(), &none, cap, |x, l| {
        table[x[a]][x[b]] += (l - log_z).exp();
    })?;
    Ok(table)
}

/// `log Z`, the log of the sum of the unnormalized joint over all states.
pub fn brute_force_log_partition(structure: &GraphStructure, psi: &LogPotentials, cap: u128) -> Result<f64> {
    check_potentials(structure, psi)?;
    let none = vec![None; structure.n_nodes()];
    let mut max = f64::NEG_INFINITY;
    enumerate(structure, psi.values(), &none, cap, |_, l| max = max.max(l))?;
    let mut acc = 0.0;
    enumerate(structure, psi.values(), &none, cap, |_, l| acc += (l - max).exp())?;
    Ok(max + acc.ln())
}

/// Every joint state with its normalized probability, in enumeration order.
pub fn brute_force_joint(structure: &GraphStructure, psi: &LogPotentials, cap: u128) -> Result<Vec<(Vec<usize>, f64)>> {
    let log_z = brute_force_log_partition(structure, psi, cap)?;
    let none = vec![None; structure.n_nodes()];
    let mut out = Vec::new();
    enumerate(structure, psi.values(), &none, cap, |x, l| {
        out.push((x.to_vec(), (l - log_z).exp()))
    })?;
    Ok(out)
}
