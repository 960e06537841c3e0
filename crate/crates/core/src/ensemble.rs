//! Query answering by log-linear pooling of ensemble member marginals.

use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bp::{batch_inference_raw, BpPlan};
use crate::data::{argmax, Dataset};
use crate::egm::BELIEF_FLOOR;
use crate::error::{Error, Result};
use crate::graph::GraphStructure;
use crate::nn::{sample_latents, LearnerParams};
use crate::query::{Curriculum, Query};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    /// Ensemble size M.
    pub members: usize,
    pub bp_steps: usize,
    /// Members run through BP together.
    pub member_batch: usize,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: 1000,
            bp_steps: 5,
            member_batch: 250,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 || self.member_batch == 0 {
            return Err(Error::Config("members and member_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Draws `m` latents and maps them through the learner in eval mode, `m x k`.
pub fn sample_members(learner: &LearnerParams, m: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let z = sample_latents(rng, m, learner.latent_dim());
    learner.forward_eval(&z)
}

/// Pooled prediction for the query nodes of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledPrediction {
    pub nodes: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Mean member log-belief per value, one row per node in `nodes`.
    pub scores: Vec<Vec<f64>>,
}

/// `(1/M) sum_j ln max(mu_j(x), floor)` over member belief rows, accumulated
/// in member order.
pub fn pool_log_scores(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or_else(|| Error::Input("no members to pool".into()))?;
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        if r.len() != acc.len() {
            return Err(Error::Shape("member rows differ in length".into()));
        }
        for (a, &p) in acc.iter_mut().zip(r.iter()) {
            *a += p.max(BELIEF_FLOOR).ln();
        }
    }
    let m = rows.len() as f64;
    Ok(acc.into_iter().map(|a| a / m).collect())
}

/// Per-member marginals under the query's evidence, `M x N x |X|` flattened.
fn member_beliefs(
    structure: &GraphStructure,
    plan: &BpPlan,
    members: &Tensor,
    query: &Query,
    bp_steps: usize,
    member_batch: usize,
) -> Result<Vec<f64>> {
    let (n, s) = (structure.n_nodes(), structure.support_size());
    query.validate(n)?;
    let unary = Tensor::new(vec![1, n, s], query.evidence.unary_log_factors(structure)?)?;
    let (m, k) = (members.shape()[0], members.shape()[1]);
    let mut out = Vec::with_capacity(m * n * s);
    for start in (0..m).step_by(member_batch.max(1)) {
        let len = member_batch.min(m - start);
        let chunk = Tensor::new(vec![len, k], members.data()[start * k..(start + len) * k].to_vec())?;
        out.extend(batch_inference_raw(plan, &chunk, &unary, bp_steps)?.into_data());
    }
    Ok(out)
}

fn check_members(structure: &GraphStructure, members: &Tensor) -> Result<()> {
    let sh = members.shape();
    if sh.len() != 2 || sh[1] != structure.n_params() || sh[0] == 0 {
        return Err(Error::Shape(format!(
            "members {sh:?}, expected [M >= 1, {}]",
            structure.n_params()
        )));
    }
    Ok(())
}

/// Pools the first `prefix` members of each prefix length in `prefixes`.
fn predict_prefixes(
    structure: &GraphStructure,
    beliefs: &[f64],
    query: &Query,
    prefixes: &[usize],
) -> Vec<PooledPrediction> {
    let (n, s) = (structure.n_nodes(), structure.support_size());
    let mut acc = vec![vec![0.0; s]; query.query.len()];
    let mut out = Vec::with_capacity(prefixes.len());
    let mut done = 0;
    for &p in prefixes {
        for j in done..p {
            let member = &beliefs[j * n * s..(j + 1) * n * s];
            for (a, &node) in acc.iter_mut().zip(&query.query) {
                for (x, v) in a.iter_mut().enumerate() {
                    *v += member[node * s + x].max(BELIEF_FLOOR).ln();
                }
            }
        }
        done = p;
        let scores: Vec<Vec<f64>> = acc.iter().map(|a| a.iter().map(|v| v / p as f64).collect()).collect();
        out.push(PooledPrediction {
            nodes: query.query.clone(),
            predicted: scores.iter().map(|r| argmax(r)).collect(),
            scores,
        });
    }
    out
}

/// Geometric-mean pooling over all rows of `members` (`M x k`).
pub fn pooled_predict(
    structure: &GraphStructure,
    members: &Tensor,
    query: &Query,
    bp_steps: usize,
) -> Result<PooledPrediction> {
    check_members(structure, members)?;
    let plan = BpPlan::new(structure);
    let m = members.shape()[0];
    let beliefs = member_beliefs(structure, &plan, members, query, bp_steps, m)?;
    Ok(predict_prefixes(structure, &beliefs, query, &[m]).remove(0))
}

/// Draws `n_queries` test points (without replacement while possible) and
/// turns each into a query from the curriculum.
pub fn make_queries(
    dataset: &Dataset,
    curriculum: &Curriculum,
    n_queries: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Query>> {
    let n = dataset.n_points();
    if n == 0 {
        return Err(Error::Input("empty dataset".into()));
    }
    let points: Vec<usize> = if n_queries <= n {
        index::sample(rng, n, n_queries).into_vec()
    } else {
        (0..n_queries).map(|_| rng.random_range(0..n)).collect()
    };
    points
        .into_iter()
        .map(|i| curriculum.make_query(dataset.row(i)?, dataset.support_size(), rng))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub query_id: usize,
    pub prediction: PooledPrediction,
    pub targets: Vec<usize>,
}

impl QueryOutcome {
    pub fn correct(&self) -> usize {
        self.prediction
            .predicted
            .iter()
            .zip(&self.targets)
            .filter(|(p, t)| p == t)
            .count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskReport {
    /// Percentage of query variables predicted correctly.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub outcomes: Vec<QueryOutcome>,
}

impl TaskReport {
    fn from_outcomes(outcomes: Vec<QueryOutcome>) -> TaskReport {
        let correct = outcomes.iter().map(QueryOutcome::correct).sum();
        let total = outcomes.iter().map(|o| o.targets.len()).sum::<usize>();
        TaskReport {
            accuracy: if total == 0 {
                0.0
            } else {
                100.0 * correct as f64 / total as f64
            },
            correct,
            total,
            outcomes,
        }
    }
}

/// Accuracy at each ensemble size in `sizes`, pooling prefixes of the same
/// member matrix over the same queries.
pub fn sweep_members(
    structure: &GraphStructure,
    members: &Tensor,
    queries: &[Query],
    sizes: &[usize],
    bp_steps: usize,
    member_batch: usize,
) -> Result<Vec<TaskReport>> {
    check_members(structure, members)?;
    let m = members.shape()[0];
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > m) {
        return Err(Error::Config(format!("ensemble size {bad} outside 1..={m}")));
    }
    let mut sorted: Vec<usize> = sizes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let plan = BpPlan::new(structure);
    let max = *sorted.last().unwrap_or(&0);
    let used = Tensor::new(
        vec![max, members.shape()[1]],
        members.data()[..max * members.shape()[1]].to_vec(),
    )?;
    let per_query: Vec<Vec<PooledPrediction>> = queries
        .par_iter()
        .map(|q| {
            let b = member_beliefs(structure, &plan, &used, q, bp_steps, member_batch)?;
            Ok(predict_prefixes(structure, &b, q, &sorted))
        })
        .collect::<Result<_>>()?;
    Ok(sizes
        .iter()
        .map(|size| {
            let col = sorted.binary_search(size).expect("size listed");
            let outcomes = per_query
                .iter()
                .zip(queries)
                .enumerate()
                .map(|(id, (preds, q))| QueryOutcome {
                    query_id: id,
                    prediction: preds[col].clone(),
                    targets: q.targets.clone(),
                })
                .collect();
            TaskReport::from_outcomes(outcomes)
        })
        .collect())
}

/// Pools all members for every query.
pub fn evaluate_queries(
    structure: &GraphStructure,
    members: &Tensor,
    queries: &[Query],
    bp_steps: usize,
    member_batch: usize,
) -> Result<TaskReport> {
    check_members(structure, members)?;
    let m = members.shape()[0];
    Ok(sweep_members(structure, members, queries, &[m], bp_steps, member_batch)?.remove(0))
}

/// Generates `n_queries` queries for `task` with `cfg.seed` and evaluates them.
pub fn evaluate_task(
    structure: &GraphStructure,
    members: &Tensor,
    dataset: &Dataset,
    task: &Curriculum,
    n_queries: usize,
    cfg: &EnsembleConfig,
) -> Result<TaskReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let queries = make_queries(dataset, task, n_queries, &mut rng)?;
    evaluate_queries(structure, members, &queries, cfg.bp_steps, cfg.member_batch)
}

/// One line per query node: `query_id,node,predicted,true,score_0,...`.
pub fn write_predictions_csv(mut w: impl Write, report: &TaskReport, support_size: usize) -> std::io::Result<()> {
    write!(w, "query_id,node,predicted,true")?;
    for x in 0..support_size {
        write!(w, ",score_{x}")?;
    }
    writeln!(w)?;
    for o in &report.outcomes {
        let p = &o.prediction;
        for (i, &node) in p.nodes.iter().enumerate() {
            write!(w, "{},{},{},{}", o.query_id, node, p.predicted[i], o.targets[i])?;
            for v in &p.scores[i] {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bp::{inference, Evidence};
    use crate::graph::{make_random_structure, LogPotentials};
    use crate::query::{fractional, TaskSpec};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn two_member_example_picks_first_value() {
        let s = pool_log_scores(&[&[0.9, 0.1], &[0.2, 0.8]]).unwrap();
        let geo: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        assert!((geo[0] - (0.9f64 * 0.2).sqrt()).abs() < 1e-12);
        assert!((geo[1] - (0.1f64 * 0.8).sqrt()).abs() < 1e-12);
        assert!((geo[0] - 0.424).abs() < 1e-3 && (geo[1] - 0.283).abs() < 1e-3);
        assert_eq!(argmax(&s), 0);
    }

    #[test]
    fn zero_beliefs_are_floored() {
        let s = pool_log_scores(&[&[0.0, 1.0]]).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(pool_log_scores(&[]).is_err());
    }

    fn random_members(g: &GraphStructure, m: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..m * g.n_params()).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::new(vec![m, g.n_params()], d).unwrap()
    }

    #[test]
    fn single_member_matches_bp_argmax() {
        let g = make_random_structure(7, 3, 1.5, 4).unwrap();
        let members = random_members(&g, 1, 1);
        let x = vec![0, 1, 2, 0, 1, 2, 0];
        let q = fractional(0.5, &x, &mut ChaCha8Rng::seed_from_u64(2));
        let p = pooled_predict(&g, &members, &q, 5).unwrap();
        let psi = LogPotentials::new(&g, members.data().to_vec()).unwrap();
        let m = inference(&g, &psi, &q.evidence, 5).unwrap();
        for (i, &node) in p.nodes.iter().enumerate() {
            assert_eq!(p.predicted[i], argmax(m.row(node)));
        }
    }

    #[test]
    fn identical_members_equal_one_member() {
        let g = make_random_structure(6, 2, 1.5, 5).unwrap();
        let one = random_members(&g, 1, 3);
        let mut rep = Vec::new();
        for _ in 0..4 {
            rep.extend_from_slice(one.data());
        }
        let four = Tensor::new(vec![4, g.n_params()], rep).unwrap();
        let q = fractional(0.5, &[1, 0, 1, 1, 0, 0], &mut ChaCha8Rng::seed_from_u64(0));
        let a = pooled_predict(&g, &one, &q, 5).unwrap();
        let b = pooled_predict(&g, &four, &q, 5).unwrap();
        assert_eq!(a.predicted, b.predicted);
        for (ra, rb) in a.scores.iter().zip(&b.scores) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_members_are_reproducible() {
        let learner = LearnerParams::init(8, 12, &mut ChaCha8Rng::seed_from_u64(0));
        let a = sample_members(&learner, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_members(&learner, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let zero = sample_members(&LearnerParams::zeros(8, 12), 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sweep_prefix_matches_direct_pooling() {
        let g = make_random_structure(6, 2, 1.5, 6).unwrap();
        let members = random_members(&g, 9, 7);
        let data = Dataset::from_rows(&[vec![0, 1, 0, 1, 1, 0], vec![1, 1, 1, 0, 0, 0]], 2).unwrap();
        let cur = Curriculum::single(TaskSpec::fractional(0.5)).unwrap();
        let qs = make_queries(&data, &cur, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let reports = sweep_members(&g, &members, &qs, &[9, 4], 5, 2).unwrap();
        let first4 = Tensor::new(vec![4, g.n_params()], members.data()[..4 * g.n_params()].to_vec()).unwrap();
        for (i, q) in qs.iter().enumerate() {
            let direct = pooled_predict(&g, &first4, q, 5).unwrap();
            assert_eq!(reports[1].outcomes[i].prediction.predicted, direct.predicted);
        }
        assert!(sweep_members(&g, &members, &qs, &[10], 5, 2).is_err());
    }

    #[test]
    fn perfect_predictions_score_hundred() {
        // Strong attractive couplings on a constant dataset.
        let g = GraphStructure::new(3, 2, [(0, 1), (1, 2)]).unwrap();
        let members = Tensor::new(vec![1, 8], vec![5.0, -5.0, -5.0, 5.0, 5.0, -5.0, -5.0, 5.0]).unwrap();
        let data = Dataset::from_rows(&vec![vec![1, 1, 1]; 4], 2).unwrap();
        let cur = Curriculum::single(TaskSpec::fractional(0.34)).unwrap();
        let cfg = EnsembleConfig {
            members: 1,
            ..EnsembleConfig::default()
        };
        let r = evaluate_task(&g, &members, &data, &cur, 4, &cfg).unwrap();
        assert_eq!(r.accuracy, 100.0);
        assert_eq!(r.total, 4);
        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, &r, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("query_id,node,predicted,true,score_0,score_1\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn evidence_nodes_are_one_hot_in_every_member() {
        let g = make_random_structure(5, 3, 1.5, 8).unwrap();
        let members = random_members(&g, 3, 9);
        let ev = Evidence::from_hard([(2, 1)]);
        for j in 0..3 {
            let psi = LogPotentials::new(&g, members.row(j).to_vec()).unwrap();
            let m = inference(&g, &psi, &ev, 5).unwrap();
            assert!((m.row(2)[1] - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn argmax_invariant_to_rescaling_and_order(
            rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..8),
            scales in prop::collection::vec(0.05f64..20.0, 8),
            rot in 0usize..8,
        ) {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let base = argmax(&pool_log_scores(&refs).unwrap());
            let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, c)| r.iter().map(|v| v * c).collect()).collect();
            let srefs: Vec<&[f64]> = scaled.iter().map(|r| r.as_slice()).collect();
            let s = pool_log_scores(&srefs).unwrap();
            let b = pool_log_scores(&refs).unwrap();
            // Rescaling shifts every score equally; compare gaps to the base argmax.
            let gap_ok = (0..3).all(|x| {
                let d = b[base] - b[x];
                d <= 1e-12 || s[base] - s[x] > 0.0
            });
            prop_assert!(gap_ok);
            let mut rotated = refs.clone();
            rotated.rotate_left(rot % refs.len());
            let r = pool_log_scores(&rotated).unwrap();
            prop_assert_eq!(argmax(&r), base);
        }
    }
}
