//! Empirical risk minimization: one log-potential vector fitted by
//! backpropagating conditional log-likelihood through unrolled BP.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::bp::{inference_unrolled, BpPlan};
use crate::config::{set, KeyValues};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{GraphStructure, LogPotentials};
use crate::nn::Adam;
use crate::query::{Curriculum, Query, TaskList, TaskSpec};
use crate::store::{Artifact, PotentialsCheckpoint};
use crate::tensor::Tensor;

/// Beliefs are raised to at least this value before taking logs.
pub const BELIEF_FLOOR: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq)]
pub struct EgmConfig {
    pub bp_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Training curriculum, e.g. `fractional=0.5` or a mixture.
    pub tasks: TaskList,
    pub checkpoint_every: usize,
}

impl Default for EgmConfig {
    fn default() -> Self {
        EgmConfig {
            bp_steps: 25,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 128,
            total_steps: 500,
            seed: 0,
            tasks: TaskList {
                specs: vec![TaskSpec::fractional(0.5)],
                exclude: None,
            },
            checkpoint_every: 100,
        }
    }
}

const EGM_KEYS: &[&str] = &[
    "bp_steps",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "batch_size",
    "total_steps",
    "seed",
    "tasks",
    "checkpoint_every",
];

impl EgmConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(EGM_KEYS)?;
        let mut c = EgmConfig::default();
        set(&kv, "bp_steps", &mut c.bp_steps)?;
        set(&kv, "learning_rate", &mut c.learning_rate)?;
        set(&kv, "beta1", &mut c.beta1)?;
        set(&kv, "beta2", &mut c.beta2)?;
        set(&kv, "epsilon", &mut c.epsilon)?;
        set(&kv, "batch_size", &mut c.batch_size)?;
        set(&kv, "total_steps", &mut c.total_steps)?;
        set(&kv, "seed", &mut c.seed)?;
        set(&kv, "tasks", &mut c.tasks)?;
        set(&kv, "checkpoint_every", &mut c.checkpoint_every)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        format!(
            "bp_steps={}\nlearning_rate={}\nbeta1={}\nbeta2={}\nepsilon={}\nbatch_size={}\ntotal_steps={}\nseed={}\ntasks={}\ncheckpoint_every={}\n",
            self.bp_steps,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.batch_size,
            self.total_steps,
            self.seed,
            self.tasks,
            self.checkpoint_every
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size, total_steps and checkpoint_every must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.epsilon > 0.0) {
            return Err(Error::Config("learning_rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Unary log-factors for a batch of queries, `B x N x |X|`.
pub fn query_unaries(structure: &GraphStructure, queries: &[Query]) -> Result<Tensor> {
    let (n, s) = (structure.n_nodes(), structure.support_size());
    let mut data = Vec::with_capacity(queries.len() * n * s);
    for q in queries {
        q.validate(n)?;
        data.extend(q.evidence.unary_log_factors(structure)?);
    }
    Tensor::new(vec![queries.len(), n, s], data)
}

/// Records the mean over queries of the per-query mean negative log belief at
/// the targets. Returns the loss node and the number of floored beliefs.
pub fn record_batch_loss(
    tape: &mut Tape,
    structure: &GraphStructure,
    plan: &BpPlan,
    psi: Var,
    queries: &[Query],
    bp_steps: usize,
) -> Result<(Var, usize)> {
    if queries.is_empty() {
        return Err(Error::Query("empty query batch".into()));
    }
    let (n, s) = (structure.n_nodes(), structure.support_size());
    let b = queries.len();
    let mut picks = Vec::new();
    let mut weights = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        if q.query.is_empty() {
            return Err(Error::Query("query set is empty".into()));
        }
        let w = 1.0 / (b as f64 * q.query.len() as f64);
        for (&node, &target) in q.query.iter().zip(&q.targets) {
            if target >= s {
                return Err(Error::Index(format!("target {target} outside support {s}")));
            }
            picks.push(qi * n * s + node * s + target);
            weights.push(w);
        }
    }
    let unary = tape.constant(query_unaries(structure, queries)?);
    let beliefs = inference_unrolled(tape, plan, psi, unary, bp_steps)?;
    let flat = tape.reshape(beliefs, &[b * n * s])?;
    let count = picks.len();
    let picked = tape.gather(flat, 0, Arc::from(picks))?;
    let clamped = tape.value(picked).data().iter().filter(|&&p| p < BELIEF_FLOOR).count();
    let floor = tape.constant(Tensor::scalar(BELIEF_FLOOR));
    let floored = tape.maximum(picked, floor)?;
    let logs = tape.log(floored);
    let w = tape.constant(Tensor::new(vec![count], weights)?);
    let weighted = tape.mul(logs, w)?;
    let total = tape.sum(weighted);
    Ok((tape.neg(total), clamped))
}

/// Loss value with the count of beliefs that hit the floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErmLoss {
    pub value: f64,
    pub clamped: usize,
}

/// `-(1/|Q|) sum_{i in Q} log mu_i(x_i* | x_E)` for one query.
pub fn erm_loss(structure: &GraphStructure, psi: &LogPotentials, query: &Query, bp_steps: usize) -> Result<ErmLoss> {
    let (value, _, clamped) = batch_loss_and_grad(structure, psi, std::slice::from_ref(query), bp_steps)?;
    Ok(ErmLoss { value, clamped })
}

/// Batch loss, its gradient with respect to the potentials, and the floor count.
pub fn batch_loss_and_grad(
    structure: &GraphStructure,
    psi: &LogPotentials,
    queries: &[Query],
    bp_steps: usize,
) -> Result<(f64, Vec<f64>, usize)> {
    if psi.len() != structure.n_params() {
        return Err(Error::Shape(format!(
            "{} potentials for k = {}",
            psi.len(),
            structure.n_params()
        )));
    }
    let plan = BpPlan::new(structure);
    let mut tape = Tape::new();
    let p = tape.var(Tensor::new(vec![1, psi.len()], psi.values().to_vec())?);
    let (loss, clamped) = record_batch_loss(&mut tape, structure, &plan, p, queries, bp_steps)?;
    let g = tape.grad(loss, &[p])?.remove(0);
    Ok((tape.value(loss).item()?, g.into_data(), clamped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EgmOutcome {
    pub psi: LogPotentials,
    /// `(step, batch loss)` for each update.
    pub trace: Vec<(usize, f64)>,
    /// Beliefs that were floored over the whole run.
    pub clamped: usize,
}

pub fn write_egm_trace_csv(mut w: impl Write, trace: &[(usize, f64)]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (step, loss) in trace {
        writeln!(w, "{step},{loss}")?;
    }
    Ok(())
}

/// Trains from all-zero potentials (the uniform model). `on_checkpoint`
/// receives the step and potentials every `checkpoint_every` steps and after
/// the last one.
pub fn train_egm(
    dataset: &Dataset,
    structure: &GraphStructure,
    cfg: &EgmConfig,
    mut on_checkpoint: impl FnMut(usize, &LogPotentials) -> Result<()>,
) -> Result<EgmOutcome> {
    cfg.validate()?;
    if dataset.n_vars() != structure.n_nodes() || dataset.support_size() != structure.support_size() {
        return Err(Error::Shape("dataset does not match the structure".into()));
    }
    if dataset.n_points() == 0 {
        return Err(Error::Input("empty dataset".into()));
    }
    let curriculum = Curriculum::from_list(&cfg.tasks.clone().with_image_shape(dataset.image_shape()))?;
    let plan = BpPlan::new(structure);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = structure.n_params();
    let mut psi = Tensor::zeros(&[1, k]);
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, &[&[1, k]]);
    let mut trace = Vec::with_capacity(cfg.total_steps);
    let mut clamped = 0;
    let mut last_good = psi.clone();
    for step in 1..=cfg.total_steps {
        let mut queries = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..dataset.n_points());
            queries.push(curriculum.make_query(dataset.row(i)?, structure.support_size(), &mut rng)?);
        }
        let mut tape = Tape::new();
        let p = tape.var(psi.clone());
        let (loss, c) = record_batch_loss(&mut tape, structure, &plan, p, &queries, cfg.bp_steps)?;
        let value = tape.value(loss).item()?;
        let grad = tape.grad(loss, &[p])?;
        if !value.is_finite() || !grad[0].all_finite() {
            let good = LogPotentials::new(structure, last_good.into_data())?;
            return Err(Error::Divergence {
                step,
                reason: "non-finite loss".into(),
                last_good: Some(Box::new(Artifact::Potentials(PotentialsCheckpoint::new(
                    structure, "", &good,
                )))),
            });
        }
        clamped += c;
        opt.update(&mut [&mut psi], &grad)?;
        trace.push((step, value));
        if step % cfg.checkpoint_every == 0 || step == cfg.total_steps {
            last_good = psi.clone();
            on_checkpoint(step, &LogPotentials::new(structure, psi.data().to_vec())?)?;
        }
    }
    Ok(EgmOutcome {
        psi: LogPotentials::new(structure, psi.into_data())?,
        trace,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{brute_force_marginals, make_random_structure, DEFAULT_STATE_CAP};
    use crate::query::fractional;

    #[test]
    fn uniform_model_costs_log_support() {
        for s in [2usize, 3] {
            let g = make_random_structure(6, s, 1.5, 1).unwrap();
            let x: Vec<usize> = (0..6).map(|i| i % s).collect();
            let q = fractional(0.5, &x, &mut ChaCha8Rng::seed_from_u64(0));
            let l = erm_loss(&g, &LogPotentials::zeros(&g), &q, 5).unwrap();
            assert!((l.value - (s as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_beliefs_cost_nothing() {
        // A strong coupling makes the query node copy its observed neighbour.
        let g = GraphStructure::new(2, 2, [(0, 1)]).unwrap();
        let psi = LogPotentials::new(&g, vec![800.0, 0.0, 0.0, 800.0]).unwrap();
        let q = Query::from_mask(&[1, 1], &[false, true]);
        let l = erm_loss(&g, &psi, &q, 1).unwrap();
        assert!(l.value.abs() < 1e-12 && l.value >= 0.0);
        let wrong = Query::from_mask(&[1, 0], &[false, true]);
        let l = erm_loss(&g, &psi, &wrong, 1).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((l.value - 30.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn empty_query_is_rejected() {
        let g = GraphStructure::new(2, 2, [(0, 1)]).unwrap();
        let q = Query::from_mask(&[1, 1], &[false, false]);
        assert!(matches!(
            erm_loss(&g, &LogPotentials::zeros(&g), &q, 1),
            Err(Error::Query(_))
        ));
    }

    #[test]
    fn tree_loss_matches_exact_conditional() {
        let g = GraphStructure::new(5, 3, [(0, 1), (1, 2), (1, 3), (3, 4)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let psi = LogPotentials::new(&g, (0..g.n_params()).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let x = vec![2, 0, 1, 1, 0];
        let mask = [true, false, true, false, true];
        let q = Query::from_mask(&x, &mask);
        let ev: Vec<Option<usize>> = (0..5).map(|i| (!mask[i]).then_some(x[i])).collect();
        let exact = brute_force_marginals(&g, &psi, &ev, DEFAULT_STATE_CAP).unwrap();
        let want = -[0, 2, 4].iter().map(|&i| exact.rows[i][x[i]].ln()).sum::<f64>() / 3.0;
        let got = erm_loss(&g, &psi, &q, 4).unwrap().value;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = EgmConfig {
            tasks: "fractional=0.5,corrupt=0.2,exclude=corrupt=0.2".parse().unwrap(),
            seed: 9,
            ..EgmConfig::default()
        };
        assert_eq!(EgmConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(EgmConfig::from_text("tasks=blur=2").is_err());
        assert!(EgmConfig::from_text("batch_size=0").is_err());
    }

    #[test]
    fn training_is_deterministic_and_reports_checkpoints() {
        let g = make_random_structure(4, 2, 1.0, 2).unwrap();
        let data = Dataset::from_rows(&[vec![0, 1, 1, 0], vec![1, 1, 0, 0]], 2).unwrap();
        let cfg = EgmConfig {
            batch_size: 4,
            total_steps: 5,
            bp_steps: 3,
            checkpoint_every: 2,
            ..EgmConfig::default()
        };
        let mut steps = Vec::new();
        let a = train_egm(&data, &g, &cfg, |s, _| {
            steps.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(steps, vec![2, 4, 5]);
        let b = train_egm(&data, &g, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(a, b);
    }
}
