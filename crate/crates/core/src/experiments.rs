//! Sampling, distillation and timing workflows built from the other modules.

use std::io::Write;
use std::time::Instant;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bp::{batch_inference_raw, BpPlan};
use crate::data::Dataset;
use crate::egm::{train_egm, EgmConfig};
use crate::ensemble::{evaluate_task, EnsembleConfig, TaskReport};
use crate::error::{Error, Result};
use crate::graph::{make_random_structure, Assignment, GraphStructure};
use crate::nn::LearnerParams;
use crate::query::{Curriculum, TaskSpec};
use crate::tensor::Tensor;

const SAMPLE_CHUNK: usize = 250;

/// One-shot samples: per-sample node marginals and a draw from them.
#[derive(Clone, Debug, PartialEq)]
pub struct OneShotSamples {
    /// `n x (N |X|)`, node marginals under no evidence.
    pub marginals: Tensor,
    pub draws: Vec<Assignment>,
}

/// z, then potentials, then BP without evidence; each node value is drawn
/// from its own marginal.
pub fn agm_oneshot(
    learner: &LearnerParams,
    structure: &GraphStructure,
    n: usize,
    bp_steps: usize,
    rng: &mut impl Rng,
) -> Result<OneShotSamples> {
    let (nodes, s) = (structure.n_nodes(), structure.support_size());
    if learner.output_dim() != structure.n_params() {
        return Err(Error::Shape(format!(
            "learner emits {} potentials, structure needs {}",
            learner.output_dim(),
            structure.n_params()
        )));
    }
    let plan = BpPlan::new(structure);
    let unary = Tensor::zeros(&[1, nodes, s]);
    let mut marginals = Vec::with_capacity(n * nodes * s);
    for start in (0..n).step_by(SAMPLE_CHUNK) {
        let len = SAMPLE_CHUNK.min(n - start);
        let psi = crate::ensemble::sample_members(learner, len, rng)?;
        marginals.extend(batch_inference_raw(&plan, &psi, &unary, bp_steps)?.into_data());
    }
    let mut draws = Vec::with_capacity(n);
    for row in marginals.chunks(nodes * s) {
        let mut x = Vec::with_capacity(nodes);
        for node in row.chunks(s) {
            let d = WeightedIndex::new(node).map_err(|e| Error::Input(format!("bad marginal: {e}")))?;
            x.push(d.sample(rng));
        }
        draws.push(Assignment(x));
    }
    Ok(OneShotSamples {
        marginals: Tensor::new(vec![n, nodes * s], marginals)?,
        draws,
    })
}

pub fn samples_to_dataset(draws: &[Assignment], support_size: usize) -> Result<Dataset> {
    let rows: Vec<Vec<usize>> = draws.iter().map(|a| a.0.clone()).collect();
    Dataset::from_rows(&rows, support_size)
}

/// Trains a fresh EGM on `samples` and scores it on `n_queries` fractional
/// queries over `test`. The training curriculum comes from `egm_cfg.tasks`.
pub fn distill(
    samples: &Dataset,
    test: &Dataset,
    structure: &GraphStructure,
    egm_cfg: &EgmConfig,
    eval_task: &TaskSpec,
    n_queries: usize,
    eval_seed: u64,
) -> Result<TaskReport> {
    let out = train_egm(samples, structure, egm_cfg, |_, _| Ok(()))?;
    let members = Tensor::new(vec![1, structure.n_params()], out.psi.into_values())?;
    let cfg = EnsembleConfig {
        members: 1,
        bp_steps: egm_cfg.bp_steps,
        seed: eval_seed,
        ..EnsembleConfig::default()
    };
    let spec = match test.image_shape() {
        Some(shape) if eval_task.image_shape.is_none() => eval_task.clone().with_image_shape(shape),
        _ => eval_task.clone(),
    };
    let task = Curriculum::single(spec)?;
    evaluate_task(structure, &members, test, &task, n_queries, &cfg)
}

/// One timing measurement of batched BP.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub max_degree: usize,
    pub bp_steps: usize,
    pub batch: usize,
    /// Seconds per call, fastest of the repetitions.
    pub seconds: f64,
}

/// Shortest wall-clock span a single timing sample should cover.
const MIN_SAMPLE_SECONDS: f64 = 0.02;

/// Repeated BP calls over a fixed batch of random potential vectors.
struct BpTimer {
    plan: BpPlan,
    psi: Tensor,
    unary: Tensor,
    bp_steps: usize,
    calls: usize,
}

impl BpTimer {
    fn new(structure: &GraphStructure, bp_steps: usize, batch: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = structure.n_params();
        let psi = Tensor::new(
            vec![batch, k],
            (0..batch * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let mut timer = BpTimer {
            plan: BpPlan::new(structure),
            psi,
            unary: Tensor::zeros(&[1, structure.n_nodes(), structure.support_size()]),
            bp_steps,
            calls: 1,
        };
        let single = timer.sample()?.max(1e-9);
        timer.calls = ((MIN_SAMPLE_SECONDS / single).ceil() as usize).clamp(1, 1 << 20);
        Ok(timer)
    }

    /// Seconds per call over one sample of `calls` calls.
    fn sample(&self) -> Result<f64> {
        let t0 = Instant::now();
        for _ in 0..self.calls {
            std::hint::black_box(batch_inference_raw(&self.plan, &self.psi, &self.unary, self.bp_steps)?);
        }
        Ok(t0.elapsed().as_secs_f64() / self.calls as f64)
    }
}

/// Best-of-`reps` seconds per call of BP over `batch` random potential
/// vectors. Short calls are repeated within each sample until it spans
/// `MIN_SAMPLE_SECONDS`.
pub fn time_bp(structure: &GraphStructure, bp_steps: usize, batch: usize, reps: usize, seed: u64) -> Result<f64> {
    let timer = BpTimer::new(structure, bp_steps, batch, seed)?;
    (0..reps.max(1)).try_fold(f64::INFINITY, |best, _| Ok(best.min(timer.sample()?)))
}

/// Times every `(|E|, t)` pair on random structures over `n_nodes` nodes.
/// Repetitions sweep the whole grid in turn, so slow spells on the machine
/// spread over all cells instead of inflating a few.
pub fn bench_grid(
    n_nodes: usize,
    support_size: usize,
    edge_counts: &[usize],
    bp_steps: &[usize],
    batch: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut cells = Vec::new();
    for &e in edge_counts {
        let g = make_random_structure(n_nodes, support_size, e as f64 / n_nodes as f64, seed)?;
        for &t in bp_steps {
            let row = BenchRow {
                n_nodes,
                n_edges: g.n_edges(),
                max_degree: g.max_degree(),
                bp_steps: t,
                batch,
                seconds: f64::INFINITY,
            };
            cells.push((BpTimer::new(&g, t, batch, seed)?, row));
        }
    }
    for _ in 0..reps.max(1) {
        for (timer, row) in &mut cells {
            row.seconds = row.seconds.min(timer.sample()?);
        }
    }
    Ok(cells.into_iter().map(|(_, row)| row).collect())
}

pub fn write_bench_csv(mut w: impl Write, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(w, "n_nodes,n_edges,max_degree,bp_steps,batch,seconds")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.n_nodes, r.n_edges, r.max_degree, r.bp_steps, r.batch, r.seconds
        )?;
    }
    Ok(())
}

/// Ratios of consecutive timings along `t` (at each `|E|`) and along `|E|`
/// (at each `t`), for grids whose axes double.
pub fn doubling_ratios(rows: &[BenchRow]) -> (Vec<f64>, Vec<f64>) {
    let mut ts: Vec<usize> = rows.iter().map(|r| r.bp_steps).collect();
    let mut es: Vec<usize> = rows.iter().map(|r| r.n_edges).collect();
    ts.sort_unstable();
    ts.dedup();
    es.sort_unstable();
    es.dedup();
    let at = |e: usize, t: usize| {
        rows.iter()
            .find(|r| r.n_edges == e && r.bp_steps == t)
            .map(|r| r.seconds)
    };
    let mut along_t = Vec::new();
    let mut along_e = Vec::new();
    for &e in &es {
        for w in ts.windows(2) {
            if let (Some(a), Some(b)) = (at(e, w[0]), at(e, w[1])) {
                along_t.push(b / a);
            }
        }
    }
    for &t in &ts {
        for w in es.windows(2) {
            if let (Some(a), Some(b)) = (at(w[0], t), at(w[1], t)) {
                along_e.push(b / a);
            }
        }
    }
    (along_t, along_e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_grid_structure;

    #[test]
    fn oneshot_shapes_and_draw_support() {
        let g = make_grid_structure(2, 2, 2).unwrap();
        let learner = LearnerParams::init(4, g.n_params(), &mut ChaCha8Rng::seed_from_u64(0));
        let s = agm_oneshot(&learner, &g, 4, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.marginals.shape(), &[4, 8]);
        assert_eq!(s.draws.len(), 4);
        assert!(s.draws.iter().all(|a| a.0.len() == 4 && a.0.iter().all(|&v| v < 2)));
        for row in s.marginals.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distilling_a_constant_dataset_is_near_perfect() {
        let g = make_random_structure(6, 2, 1.5, 3).unwrap();
        let data = Dataset::from_rows(&vec![vec![1, 0, 1, 1, 0, 1]; 20], 2).unwrap();
        let cfg = EgmConfig {
            batch_size: 16,
            total_steps: 60,
            bp_steps: 5,
            learning_rate: 0.1,
            ..EgmConfig::default()
        };
        let r = distill(&data, &data, &g, &cfg, &TaskSpec::fractional(0.5), 20, 0).unwrap();
        assert!(r.accuracy > 95.0, "{}", r.accuracy);
    }

    #[test]
    fn ratios_follow_grid_layout() {
        let row = |e, t, s| BenchRow {
            n_nodes: 8,
            n_edges: e,
            max_degree: 1,
            bp_steps: t,
            batch: 1,
            seconds: s,
        };
        let rows = vec![row(10, 1, 1.0), row(10, 2, 2.0), row(20, 1, 3.0), row(20, 2, 6.0)];
        let (t, e) = doubling_ratios(&rows);
        assert_eq!(t, vec![2.0, 2.0]);
        assert_eq!(e, vec![3.0, 3.0]);
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("n_nodes,n_edges,max_degree,"));
    }
}
