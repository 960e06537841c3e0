//! Oracle checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::VecDeque;

use agm_core::agm::{critic_objective, generator_objective, sample_critic_masks};
use agm_core::bp::{inference, BpPlan, Evidence};
use agm_core::data::argmax;
use agm_core::egm::batch_loss_and_grad;
use agm_core::ensemble::{pool_log_scores, pooled_predict};
use agm_core::gibbs::{self, GibbsConfig};
use agm_core::graph::{brute_force_marginals, make_random_structure, GraphStructure, LogPotentials, DEFAULT_STATE_CAP};
use agm_core::nn::{sample_latents, DiscriminatorParams, DropoutMasks, LearnerParams};
use agm_core::query::fractional;
use agm_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random_psi(g: &GraphStructure, rng: &mut impl Rng, scale: f64) -> LogPotentials {
    let v = (0..g.n_params()).map(|_| rng.random_range(-scale..scale)).collect();
    LogPotentials::new(g, v).unwrap()
}

/// Random recursive tree: node `i > 0` attaches to a uniform earlier node.
pub fn random_tree(n: usize, support: usize, rng: &mut impl Rng) -> GraphStructure {
    let edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    GraphStructure::new(n, support, edges).unwrap()
}

fn farthest(adj: &[Vec<usize>], from: usize) -> (usize, usize) {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[from] = 0;
    let mut q = VecDeque::from([from]);
    let mut best = (from, 0);
    while let Some(u) = q.pop_front() {
        if dist[u] > best.1 {
            best = (u, dist[u]);
        }
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                q.push_back(v);
            }
        }
    }
    best
}

/// Longest shortest path, in edges.
pub fn tree_diameter(g: &GraphStructure) -> usize {
    let mut adj = vec![Vec::new(); g.n_nodes()];
    for &(i, j) in g.edges() {
        adj[i].push(j);
        adj[j].push(i);
    }
    let (a, _) = farthest(&adj, 0);
    farthest(&adj, a).1
}

/// Largest per-entry gap between BP run for the diameter and enumeration,
/// over `trials` random trees with and without evidence.
pub fn tree_exactness(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let n = rng.random_range(2..=10);
        let s = if trial % 2 == 0 { 2 } else { 3 };
        let g = random_tree(n, s, &mut rng);
        let psi = random_psi(&g, &mut rng, 2.0);
        let t = tree_diameter(&g).max(1);
        for with_evidence in [false, true] {
            let mut hard = vec![None; n];
            let mut ev = Evidence::new();
            if with_evidence {
                for (i, slot) in hard.iter_mut().enumerate() {
                    if rng.random_bool(0.3) {
                        let v = rng.random_range(0..s);
                        *slot = Some(v);
                        ev.set_hard(i, v).unwrap();
                    }
                }
            }
            let bp = inference(&g, &psi, &ev, t).unwrap();
            let exact = brute_force_marginals(&g, &psi, &hard, DEFAULT_STATE_CAP).unwrap();
            for i in 0..n {
                for x in 0..s {
                    worst = worst.max((bp.row(i)[x] - exact.rows[i][x]).abs());
                }
            }
        }
    }
    worst
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error of the query loss gradient with respect to every
/// potential, on a small loopy model.
pub fn erm_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = GraphStructure::new(4, 3, [(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)]).unwrap();
    let psi = random_psi(&g, &mut rng, 1.0);
    let queries: Vec<_> = (0..3)
        .map(|_| {
            let x: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            fractional(0.5, &x, &mut rng)
        })
        .collect();
    let t = 4;
    let (_, grad, _) = batch_loss_and_grad(&g, &psi, &queries, t).unwrap();
    let loss_at = |v: Vec<f64>| {
        batch_loss_and_grad(&g, &LogPotentials::new(&g, v).unwrap(), &queries, t)
            .unwrap()
            .0
    };
    let mut worst: f64 = 0.0;
    for k in 0..psi.len() {
        let mut up = psi.values().to_vec();
        let mut down = up.clone();
        up[k] += FD_STEP;
        down[k] -= FD_STEP;
        let numeric = (loss_at(up) - loss_at(down)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grad[k], numeric));
    }
    worst
}

struct AgmFixture {
    structure: GraphStructure,
    plan: BpPlan,
    learner: LearnerParams,
    critic: DiscriminatorParams,
}

fn agm_fixture(rng: &mut impl Rng) -> AgmFixture {
    let structure = GraphStructure::new(4, 2, [(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
    let plan = BpPlan::new(&structure);
    let learner = LearnerParams::init(3, structure.n_params(), rng);
    let critic = DiscriminatorParams::init(8, rng);
    AgmFixture {
        structure,
        plan,
        learner,
        critic,
    }
}

/// Worst relative error of the generator-loss gradient over every entry of
/// the learner's first weight matrix and output weight matrix.
pub fn generator_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = agm_fixture(&mut rng);
    let b = 4;
    let z = sample_latents(&mut rng, b, fx.learner.latent_dim());
    let masks = DropoutMasks::sample(&mut rng, b, fx.critic.hidden_dim());
    let t = 3;
    let eval = |l: &LearnerParams| generator_objective(l, &fx.critic, &fx.plan, &fx.structure, &z, &masks, t).unwrap();
    let (_, grads, _) = eval(&fx.learner);
    let mut worst: f64 = 0.0;
    // Trainable order: w1, b1, bn_scale, bn_shift, w2, b2.
    for which in [0usize, 4] {
        let n = grads[which].numel();
        for k in 0..n {
            let mut up = fx.learner.clone();
            let mut down = fx.learner.clone();
            up.trainable_mut()[which].data_mut()[k] += FD_STEP;
            down.trainable_mut()[which].data_mut()[k] -= FD_STEP;
            let numeric = (eval(&up).0 - eval(&down).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[which].data()[k], numeric));
        }
    }
    worst
}

/// Worst relative error of the gradient-penalty gradient with respect to
/// every critic parameter. The penalty gradient is isolated as the
/// difference of objectives at penalty weights 1 and 0.
pub fn penalty_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = agm_fixture(&mut rng);
    let b = 5;
    let width = 8;
    let onehot = |rng: &mut ChaCha8Rng| {
        let mut v = Vec::with_capacity(b * width);
        for _ in 0..b * 4 {
            let p: f64 = rng.random();
            v.extend([p, 1.0 - p]);
        }
        Tensor::new(vec![b, width], v).unwrap()
    };
    let real = onehot(&mut rng);
    let fake = onehot(&mut rng);
    let eps: Vec<f64> = (0..b).map(|_| rng.random()).collect();
    let masks = sample_critic_masks(&mut rng, b, fx.critic.hidden_dim());
    let run = |c: &DiscriminatorParams, lambda: f64| critic_objective(c, &real, &fake, &eps, &masks, lambda).unwrap();
    let (_, with_pen) = run(&fx.critic, 1.0);
    let (_, without) = run(&fx.critic, 0.0);
    let mut worst: f64 = 0.0;
    for which in 0..6 {
        let analytic: Vec<f64> = with_pen[which]
            .data()
            .iter()
            .zip(without[which].data())
            .map(|(a, b)| a - b)
            .collect();
        for (k, &a) in analytic.iter().enumerate() {
            let mut up = fx.critic.clone();
            let mut down = fx.critic.clone();
            up.trainable_mut()[which].data_mut()[k] += FD_STEP;
            down.trainable_mut()[which].data_mut()[k] -= FD_STEP;
            let numeric = (run(&up, 1.0).0.penalty - run(&down, 1.0).0.penalty) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Largest gap between empirical Gibbs marginals over `sweeps` samples and
/// exact marginals on a random 5-node binary model.
pub fn gibbs_marginal_error(sweeps: usize, seed: u64) -> f64 {
    let g = make_random_structure(5, 2, 1.4, seed).unwrap();
    let psi = random_psi(&g, &mut ChaCha8Rng::seed_from_u64(seed), 1.0);
    let cfg = GibbsConfig {
        burn_in: 10,
        seed,
        ..GibbsConfig::default()
    };
    let samples = gibbs::sample(&g, &psi, &cfg, sweeps).unwrap();
    let exact = brute_force_marginals(&g, &psi, &[None; 5], DEFAULT_STATE_CAP).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        for x in 0..2 {
            let freq = samples.iter().filter(|a| a.0[i] == x).count() as f64 / sweeps as f64;
            worst = worst.max((freq - exact.rows[i][x]).abs());
        }
    }
    worst
}

#[derive(Debug, Default)]
pub struct PoolingReport {
    pub cases: usize,
    pub rescale_failures: usize,
    pub permutation_failures: usize,
    pub single_member_mismatches: usize,
}

/// Randomized pooling cases: positive per-member rescaling and member
/// permutation must keep the argmax; one member must reproduce plain BP.
pub fn pooling_invariants(cases: usize, seed: u64) -> PoolingReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = PoolingReport {
        cases,
        ..PoolingReport::default()
    };
    for _ in 0..cases {
        let m = rng.random_range(1..=12);
        let s = rng.random_range(2..=4);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..s).map(|_| rng.random_range(0.01..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            })
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
        let base = argmax(&pool_log_scores(&refs).unwrap());
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| {
                let c = rng.random_range(0.1..10.0);
                row.iter().map(|v| v * c).collect()
            })
            .collect();
        let srefs: Vec<&[f64]> = scaled.iter().map(|v| v.as_slice()).collect();
        if argmax(&pool_log_scores(&srefs).unwrap()) != base {
            r.rescale_failures += 1;
        }
        let mut perm = refs.clone();
        perm.shuffle(&mut rng);
        if argmax(&pool_log_scores(&perm).unwrap()) != base {
            r.permutation_failures += 1;
        }
    }
    for case in 0..cases.min(200) {
        let g = make_random_structure(6, 2 + case % 2, 1.5, case as u64).unwrap();
        let psi = random_psi(&g, &mut rng, 1.5);
        let x: Vec<usize> = (0..6).map(|_| rng.random_range(0..g.support_size())).collect();
        let q = fractional(0.5, &x, &mut rng);
        let members = Tensor::new(vec![1, psi.len()], psi.values().to_vec()).unwrap();
        let pooled = pooled_predict(&g, &members, &q, 5).unwrap();
        let bp = inference(&g, &psi, &q.evidence, 5).unwrap();
        for (i, &node) in pooled.nodes.iter().enumerate() {
            if pooled.predicted[i] != argmax(bp.row(node)) {
                r.single_member_mismatches += 1;
            }
        }
    }
    r
}
