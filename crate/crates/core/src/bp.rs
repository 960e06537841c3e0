//! Loopy sum-product belief propagation in log space. [`inference_unrolled`]
//! records batched tensor operations on a [`Tape`] so the result can be
//! differentiated with respect to the log-potentials and unary factors;
//! [`batch_inference_raw`] evaluates the same recurrence directly.
//!
//! Each undirected edge `e = (i, j)` yields two directed messages, `2e`
//! (`i -> j`) and `2e + 1` (`j -> i`). One synchronous step computes, for
//! every directed edge `s -> r`,
//!
//! ```text
//! m'(x_r) = logsumexp_{x_s} [ psi(x_s, x_r) + u_s(x_s) + sum_{d -> s, d != r} m_d(x_s) ]
//! ```
//!
//! and then shifts each message so it log-normalizes to zero.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{GraphStructure, LogPotentials};
use crate::tensor::{self, Tensor};

/// Log-factor used in place of `-inf` for values excluded by evidence.
pub const EVIDENCE_OFF: f64 = -1e9;

/// Observations attached to a query: hard clamps and soft priors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evidence {
    hard: BTreeMap<usize, usize>,
    soft: BTreeMap<usize, Vec<f64>>,
}

impl Evidence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_hard(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Evidence {
            hard: pairs.into_iter().collect(),
            soft: BTreeMap::new(),
        }
    }

    pub fn set_hard(&mut self, node: usize, value: usize) -> Result<()> {
        if self.soft.contains_key(&node) {
            return Err(Error::Input(format!("node {node} already has soft evidence")));
        }
        self.hard.insert(node, value);
        Ok(())
    }

    pub fn set_soft(&mut self, node: usize, prior: Vec<f64>) -> Result<()> {
        if self.hard.contains_key(&node) {
            return Err(Error::Input(format!("node {node} already has hard evidence")));
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 || prior.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input(format!("soft prior on node {node} is not a distribution")));
        }
        self.soft.insert(node, prior);
        Ok(())
    }

    pub fn hard(&self) -> &BTreeMap<usize, usize> {
        &self.hard
    }

    pub fn soft(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.soft
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty() && self.soft.is_empty()
    }

    pub fn validate(&self, structure: &GraphStructure) -> Result<()> {
        let (n, s) = (structure.n_nodes(), structure.support_size());
        for (&node, &v) in &self.hard {
            if node >= n || v >= s {
                return Err(Error::Index(format!("hard evidence {node}={v}")));
            }
        }
        for (&node, prior) in &self.soft {
            if node >= n || prior.len() != s {
                return Err(Error::Shape(format!("soft evidence on node {node}")));
            }
        }
        Ok(())
    }

    /// Unary log-factors, `n_nodes * support_size` row-major.
    pub fn unary_log_factors(&self, structure: &GraphStructure) -> Result<Vec<f64>> {
        self.validate(structure)?;
        let s = structure.support_size();
        let mut u = vec![0.0; structure.n_nodes() * s];
        for (&node, &v) in &self.hard {
            for x in 0..s {
                u[node * s + x] = if x == v { 0.0 } else { EVIDENCE_OFF };
            }
        }
        for (&node, prior) in &self.soft {
            for (x, &p) in prior.iter().enumerate() {
                u[node * s + x] = if p > 0.0 {
                    p.ln().max(EVIDENCE_OFF)
                } else {
                    EVIDENCE_OFF
                };
            }
        }
        Ok(u)
    }
}

/// Per-node beliefs, one normalized row of `support_size` entries per node.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    n_nodes: usize,
    support_size: usize,
    beliefs: Vec<f64>,
}

impl Marginals {
    pub fn new(n_nodes: usize, support_size: usize, beliefs: Vec<f64>) -> Result<Self> {
        if beliefs.len() != n_nodes * support_size {
            return Err(Error::Shape(format!(
                "{} beliefs for {n_nodes} x {support_size}",
                beliefs.len()
            )));
        }
        Ok(Marginals {
            n_nodes,
            support_size,
            beliefs,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn support_size(&self) -> usize {
        self.support_size
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.beliefs[node * self.support_size..(node + 1) * self.support_size]
    }

    /// All rows concatenated in node order.
    pub fn as_flat(&self) -> &[f64] {
        &self.beliefs
    }
}

/// Index lists describing how messages move over one structure.
#[derive(Clone, Debug)]
pub struct BpPlan {
    n_nodes: usize,
    support_size: usize,
    n_params: usize,
    /// For each directed edge and `(x_r, x_s)`, the flat potential index.
    table_index: Arc<[usize]>,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    rev: Arc<[usize]>,
}

impl BpPlan {
    pub fn new(structure: &GraphStructure) -> Self {
        let s = structure.support_size();
        let n_dir = 2 * structure.n_edges();
        let mut table = Vec::with_capacity(n_dir * s * s);
        let mut src = Vec::with_capacity(n_dir);
        let mut dst = Vec::with_capacity(n_dir);
        for (e, &(i, j)) in structure.edges().iter().enumerate() {
            let base = e * s * s;
            // i -> j: receiver value indexes the column
            for xr in 0..s {
                for xs in 0..s {
                    table.push(base + xs * s + xr);
                }
            }
            // j -> i: receiver value indexes the row
            for xr in 0..s {
                for xs in 0..s {
                    table.push(base + xr * s + xs);
                }
            }
            src.extend([i, j]);
            dst.extend([j, i]);
        }
        let rev: Vec<usize> = (0..n_dir).map(|d| d ^ 1).collect();
        BpPlan {
            n_nodes: structure.n_nodes(),
            support_size: s,
            n_params: structure.n_params(),
            table_index: table.into(),
            src: src.into(),
            dst: dst.into(),
            rev: rev.into(),
        }
    }

    pub fn n_directed(&self) -> usize {
        self.src.len()
    }
}

/// Records `t` synchronous BP steps on `tape` and returns beliefs of shape
/// `B x n_nodes x support_size`.
///
/// `psi` is `P x k` and `unary` is `U x n_nodes x support_size`; `P` and `U`
/// must each be 1 or the common batch size `B`.
pub fn inference_unrolled(tape: &mut Tape, plan: &BpPlan, psi: Var, unary: Var, t: usize) -> Result<Var> {
    let (n, s, nd) = (plan.n_nodes, plan.support_size, plan.n_directed());
    let ps = tape.shape(psi).to_vec();
    let us = tape.shape(unary).to_vec();
    if ps.len() != 2 || ps[1] != plan.n_params {
        return Err(Error::Shape(format!(
            "potentials {ps:?}, expected [_, {}]",
            plan.n_params
        )));
    }
    if us.len() != 3 || us[1] != n || us[2] != s {
        return Err(Error::Shape(format!("unary {us:?}, expected [_, {n}, {s}]")));
    }
    let batch = match (ps[0], us[0]) {
        (p, u) if p == u => p,
        (1, u) => u,
        (p, 1) => p,
        (p, u) => return Err(Error::Shape(format!("batch sizes {p} and {u}"))),
    };
    if tape.value(psi).data().iter().any(|v| v.is_nan()) {
        return Err(Error::Input("NaN in log-potentials".into()));
    }
    let msg_shape = [batch, nd, s];
    let mut msgs = tape.constant(Tensor::full(&msg_shape, -(s as f64).ln()));
    if t > 0 {
        let flat = tape.gather(psi, 1, plan.table_index.clone())?;
        let table = tape.reshape(flat, &[ps[0], nd, s, s])?;
        for _ in 0..t {
            let incoming = tape.scatter_add(msgs, 1, plan.dst.clone(), n)?;
            let node_sum = tape.add(unary, incoming)?;
            let from_src = tape.gather(node_sum, 1, plan.src.clone())?;
            let back = tape.gather(msgs, 1, plan.rev.clone())?;
            let pre = tape.sub(from_src, back)?;
            let pre = tape.reshape(pre, &[batch, nd, 1, s])?;
            let pair = tape.add(table, pre)?;
            let raw = tape.logsumexp(pair, 3)?;
            let norm = tape.logsumexp(raw, 2)?;
            let norm = tape.reshape(norm, &[batch, nd, 1])?;
            msgs = tape.sub(raw, norm)?;
        }
    }
    let incoming = tape.scatter_add(msgs, 1, plan.dst.clone(), n)?;
    let node_sum = tape.add(unary, incoming)?;
    tape.softmax_last(node_sum)
}

fn marginals_from(beliefs: &Tensor, n: usize, s: usize) -> Vec<Marginals> {
    beliefs
        .data()
        .chunks(n * s)
        .map(|c| Marginals {
            n_nodes: n,
            support_size: s,
            beliefs: c.to_vec(),
        })
        .collect()
}

/// Forward-only batched BP. `psi` rows and `unary` rows broadcast as in
/// [`inference_unrolled`], and the arithmetic follows it step for step.
pub fn batch_inference_raw(plan: &BpPlan, psi: &Tensor, unary: &Tensor, t: usize) -> Result<Tensor> {
    let (n, s) = (plan.n_nodes, plan.support_size);
    let (ps, us) = (psi.shape(), unary.shape());
    if ps.len() != 2 || ps[1] != plan.n_params {
        return Err(Error::Shape(format!(
            "potentials {ps:?}, expected [_, {}]",
            plan.n_params
        )));
    }
    if us.len() != 3 || us[1] != n || us[2] != s {
        return Err(Error::Shape(format!("unary {us:?}, expected [_, {n}, {s}]")));
    }
    let batch = match (ps[0], us[0]) {
        (p, u) if p == u => p,
        (1, u) => u,
        (p, 1) => p,
        (p, u) => return Err(Error::Shape(format!("batch sizes {p} and {u}"))),
    };
    if psi.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Input("NaN in log-potentials".into()));
    }
    let (k, ns) = (plan.n_params, n * s);
    let mut out = vec![0.0; batch * ns];
    out.par_chunks_mut(ns).enumerate().for_each(|(b, row)| {
        let p = if ps[0] == 1 { 0 } else { b };
        let u = if us[0] == 1 { 0 } else { b };
        forward_one(
            plan,
            &psi.data()[p * k..(p + 1) * k],
            &unary.data()[u * ns..(u + 1) * ns],
            t,
            row,
        );
    });
    Tensor::new(vec![batch, n, s], out)
}

/// BP for a single model, writing beliefs into `out`.
fn forward_one(plan: &BpPlan, psi: &[f64], unary: &[f64], t: usize, out: &mut [f64]) {
    let (n, s, nd) = (plan.n_nodes, plan.support_size, plan.n_directed());
    let mut msgs = vec![-(s as f64).ln(); nd * s];
    let mut next = vec![0.0; nd * s];
    let mut node = vec![0.0; n * s];
    let mut pair = vec![0.0; s];
    let mut raw = vec![0.0; s];
    let gather_nodes = |msgs: &[f64], node: &mut [f64]| {
        node.fill(0.0);
        for (d, &dst) in plan.dst.iter().enumerate() {
            for x in 0..s {
                node[dst * s + x] += msgs[d * s + x];
            }
        }
        for (v, &u) in node.iter_mut().zip(unary) {
            *v = u + *v;
        }
    };
    for _ in 0..t {
        gather_nodes(&msgs, &mut node);
        for d in 0..nd {
            let (src, back) = (plan.src[d], plan.rev[d]);
            let table = &plan.table_index[d * s * s..(d + 1) * s * s];
            for xr in 0..s {
                for xs in 0..s {
                    let pre = node[src * s + xs] - msgs[back * s + xs];
                    pair[xs] = psi[table[xr * s + xs]] + pre;
                }
                raw[xr] = tensor::lse_slice(&pair);
            }
            let norm = tensor::lse_slice(&raw);
            for xr in 0..s {
                next[d * s + xr] = raw[xr] - norm;
            }
        }
        std::mem::swap(&mut msgs, &mut next);
    }
    gather_nodes(&msgs, &mut node);
    for (o, row) in out.chunks_mut(s).zip(node.chunks(s)) {
        let l = tensor::lse_slice(row);
        for (p, &v) in o.iter_mut().zip(row) {
            *p = (v - l).exp();
        }
    }
}

/// Runs BP for each row of `psi` (`B x k`), all under the same evidence or
/// each under its own (`evidence.len() == B`).
pub fn batch_inference(
    structure: &GraphStructure,
    psi: &Tensor,
    evidence: &[Evidence],
    t: usize,
) -> Result<Vec<Marginals>> {
    let plan = BpPlan::new(structure);
    let (n, s) = (structure.n_nodes(), structure.support_size());
    if psi.ndim() != 2 || psi.shape()[1] != structure.n_params() {
        return Err(Error::Shape(format!(
            "potentials {:?} for k = {}",
            psi.shape(),
            structure.n_params()
        )));
    }
    let batch = psi.shape()[0];
    if evidence.len() != 1 && evidence.len() != batch {
        return Err(Error::Shape(format!(
            "{} evidence sets for batch of {batch}",
            evidence.len()
        )));
    }
    let mut unary = Vec::with_capacity(evidence.len() * n * s);
    for ev in evidence {
        unary.extend(ev.unary_log_factors(structure)?);
    }
    let unary = Tensor::new(vec![evidence.len(), n, s], unary)?;
    let beliefs = batch_inference_raw(&plan, psi, &unary, t)?;
    Ok(marginals_from(&beliefs, n, s))
}

/// `t` steps of BP for one potential vector.
pub fn inference(structure: &GraphStructure, psi: &LogPotentials, evidence: &Evidence, t: usize) -> Result<Marginals> {
    let p = Tensor::new(vec![1, psi.len()], psi.values().to_vec())?;
    let mut out = batch_inference(structure, &p, std::slice::from_ref(evidence), t)?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{brute_force_marginals, make_random_structure, DEFAULT_STATE_CAP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psi(g: &GraphStructure, seed: u64, scale: f64) -> LogPotentials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..g.n_params()).map(|_| rng.random_range(-scale..scale)).collect();
        LogPotentials::new(g, v).unwrap()
    }

    #[test]
    fn zero_potentials_give_uniform_beliefs() {
        let g = make_random_structure(8, 3, 2.0, 1).unwrap();
        let m = inference(&g, &LogPotentials::zeros(&g), &Evidence::new(), 5).unwrap();
        for i in 0..8 {
            for &p in m.row(i) {
                assert!((p - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clamped_node_is_one_hot() {
        let g = make_random_structure(8, 2, 2.0, 3).unwrap();
        let psi = random_psi(&g, 3, 2.0);
        let ev = Evidence::from_hard([(4, 1)]);
        let m = inference(&g, &psi, &ev, 7).unwrap();
        assert_eq!(m.row(4), &[0.0, 1.0]);
    }

    #[test]
    fn zero_steps_is_unary_only() {
        let g = make_random_structure(5, 2, 1.0, 0).unwrap();
        let psi = random_psi(&g, 0, 3.0);
        let mut ev = Evidence::new();
        ev.set_soft(2, vec![0.8, 0.2]).unwrap();
        let m = inference(&g, &psi, &ev, 0).unwrap();
        assert!((m.row(2)[1] - 0.2).abs() < 1e-12);
        assert!((m.row(0)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_edge_matches_exact_after_one_step() {
        let g = GraphStructure::new(2, 2, [(0, 1)]).unwrap();
        let psi = LogPotentials::new(&g, [2.0f64, 1.0, 1.0, 2.0].map(f64::ln).to_vec()).unwrap();
        let m = inference(&g, &psi, &Evidence::from_hard([(1, 0)]), 1).unwrap();
        let exact = brute_force_marginals(&g, &psi, &[None, Some(0)], DEFAULT_STATE_CAP).unwrap();
        assert!((m.row(0)[0] - exact.rows[0][0]).abs() < 1e-12);
        assert!((m.row(0)[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nan_potentials_rejected() {
        let g = GraphStructure::new(2, 2, [(0, 1)]).unwrap();
        let plan = BpPlan::new(&g);
        let psi = Tensor::new(vec![1, 4], vec![0.0, f64::NAN, 0.0, 0.0]).unwrap();
        let u = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(batch_inference_raw(&plan, &psi, &u, 2), Err(Error::Input(_))));
    }

    #[test]
    fn shape_mismatch_is_structural_error() {
        let g = GraphStructure::new(3, 2, [(0, 1), (1, 2)]).unwrap();
        let psi = Tensor::zeros(&[2, 7]);
        assert!(matches!(
            batch_inference(&g, &psi, &[Evidence::new()], 2),
            Err(Error::Shape(_))
        ));
        let psi = Tensor::zeros(&[3, 8]);
        let ev = vec![Evidence::new(); 2];
        assert!(matches!(batch_inference(&g, &psi, &ev, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn evidence_conflicts_rejected() {
        let mut ev = Evidence::from_hard([(0, 1)]);
        assert!(ev.set_soft(0, vec![0.5, 0.5]).is_err());
        assert!(ev.set_soft(1, vec![0.5, 0.6]).is_err());
        ev.set_soft(1, vec![0.25, 0.75]).unwrap();
        assert!(ev.set_hard(1, 0).is_err());
    }

    #[test]
    fn batch_examples() {
        let g = make_random_structure(7, 3, 1.5, 9).unwrap();
        let psi = random_psi(&g, 9, 1.5);
        let ev = Evidence::from_hard([(0, 2)]);
        let single = inference(&g, &psi, &ev, 4).unwrap();
        let one = Tensor::new(vec![1, g.n_params()], psi.values().to_vec()).unwrap();
        assert_eq!(batch_inference(&g, &one, &[ev.clone()], 4).unwrap()[0], single);

        let rows: Vec<f64> = (0..8).flat_map(|_| psi.values().to_vec()).collect();
        let eight = Tensor::new(vec![8, g.n_params()], rows).unwrap();
        let out = batch_inference(&g, &eight, &[ev.clone()], 4).unwrap();
        assert!(out.iter().all(|m| *m == out[0]));

        let mut rows = Vec::new();
        let mut singles = Vec::new();
        for b in 0..70 {
            let p = random_psi(&g, 100 + b, 2.0);
            singles.push(inference(&g, &p, &ev, 4).unwrap());
            rows.extend_from_slice(p.values());
        }
        let many = Tensor::new(vec![70, g.n_params()], rows).unwrap();
        let out = batch_inference(&g, &many, &[ev], 4).unwrap();
        for (a, b) in out.iter().zip(&singles) {
            for (x, y) in a.as_flat().iter().zip(b.as_flat()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_normalized_under_extreme_potentials() {
        let g = make_random_structure(10, 3, 3.0, 5).unwrap();
        for seed in 0..5 {
            let psi = random_psi(&g, seed, 20.0);
            for t in [1, 10, 100] {
                let m = inference(&g, &psi, &Evidence::from_hard([(1, 0)]), t).unwrap();
                for i in 0..10 {
                    let sum: f64 = m.row(i).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                    assert!(m.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let g = make_random_structure(9, 2, 2.0, 2).unwrap();
        let psi = random_psi(&g, 2, 1.0);
        let a = inference(&g, &psi, &Evidence::new(), 6).unwrap();
        let b = inference(&g, &psi, &Evidence::new(), 6).unwrap();
        assert_eq!(a, b);
    }
}
