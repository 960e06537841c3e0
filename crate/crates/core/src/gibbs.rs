//! Systematic-scan Gibbs sampling from the pairwise joint.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Assignment, GraphStructure, LogPotentials};

#[derive(Clone, Debug, PartialEq)]
pub struct GibbsConfig {
    /// Sweeps discarded before the first sample.
    pub burn_in: usize,
    /// Sweeps between emitted samples.
    pub thinning: usize,
    pub seed: u64,
    /// Starting state; uniform random per node when absent.
    pub init: Option<Vec<usize>>,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            burn_in: 0,
            thinning: 1,
            seed: 0,
            init: None,
        }
    }
}

fn check(structure: &GraphStructure, psi: &LogPotentials) -> Result<()> {
    if psi.len() != structure.n_params() {
        return Err(Error::Shape(format!(
            "{} potentials for k = {}",
            psi.len(),
            structure.n_params()
        )));
    }
    Ok(())
}

/// Writes `log p(x_i = v | rest)` up to a constant into `out`.
fn local_scores(adj: &[(usize, usize, bool)], psi: &[f64], s: usize, state: &[usize], out: &mut [f64]) {
    out.fill(0.0);
    for &(nbr, e, is_low) in adj {
        let base = e * s * s;
        let xn = state[nbr];
        for (v, o) in out.iter_mut().enumerate() {
            *o += if is_low {
                psi[base + v * s + xn]
            } else {
                psi[base + xn * s + v]
            };
        }
    }
}

fn normalize_exp(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for p in scores.iter_mut() {
        *p = (*p - max).exp();
        z += *p;
    }
    for p in scores.iter_mut() {
        *p /= z;
    }
}

/// `p(x_i | x_-i)`, which depends only on the neighbours of `i`.
pub fn conditional(structure: &GraphStructure, psi: &LogPotentials, state: &Assignment, i: usize) -> Result<Vec<f64>> {
    check(structure, psi)?;
    state.validate(structure)?;
    if i >= structure.n_nodes() {
        return Err(Error::Index(format!("node {i} of {}", structure.n_nodes())));
    }
    let adj = structure.adjacency();
    let mut out = vec![0.0; structure.support_size()];
    local_scores(&adj[i], psi.values(), structure.support_size(), &state.0, &mut out);
    normalize_exp(&mut out);
    Ok(out)
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (v, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return v;
        }
    }
    probs.len() - 1
}

/// Runs one chain and returns `n_samples` states.
pub fn sample(
    structure: &GraphStructure,
    psi: &LogPotentials,
    config: &GibbsConfig,
    n_samples: usize,
) -> Result<Vec<Assignment>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    run_chain(structure, psi, config, n_samples, &mut rng)
}

/// Runs `n_samples` independent chains, each from its own initial state,
/// and keeps the first emitted state of each. Chain `c` uses stream `c` of
/// the seeded generator, so the result does not depend on scheduling.
pub fn sample_independent(
    structure: &GraphStructure,
    psi: &LogPotentials,
    config: &GibbsConfig,
    n_samples: usize,
) -> Result<Vec<Assignment>> {
    if n_samples == 0 {
        return Err(Error::Config("at least one sample is required".into()));
    }
    (0..n_samples)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(c as u64);
            Ok(run_chain(structure, psi, config, 1, &mut rng)?.remove(0))
        })
        .collect()
}

fn run_chain(
    structure: &GraphStructure,
    psi: &LogPotentials,
    config: &GibbsConfig,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Assignment>> {
    check(structure, psi)?;
    if n_samples == 0 {
        return Err(Error::Config("at least one sample is required".into()));
    }
    if config.thinning == 0 {
        return Err(Error::Config("thinning must be at least 1".into()));
    }
    let (n, s) = (structure.n_nodes(), structure.support_size());
    let mut state = match &config.init {
        Some(init) => {
            let a = Assignment(init.clone());
            a.validate(structure)?;
            a.0
        }
        None => (0..n).map(|_| rng.random_range(0..s)).collect(),
    };
    let adj = structure.adjacency();
    let mut probs = vec![0.0; s];
    let mut sweep = |state: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
        for i in 0..n {
            local_scores(&adj[i], psi.values(), s, state, &mut probs);
            normalize_exp(&mut probs);
            state[i] = draw(&probs, rng);
        }
    };
    for _ in 0..config.burn_in {
        sweep(&mut state, rng);
    }
    let mut out = Vec::with_capacity(n_samples);
    while out.len() < n_samples {
        for _ in 0..config.thinning {
            sweep(&mut state, rng);
        }
        out.push(Assignment(state.clone()));
    }
    Ok(out)
}

/// Writes samples one per line, space separated, after a header line.
pub fn write_sample_dump(
    mut w: impl Write,
    structure_ref: &str,
    checkpoint_ref: &str,
    samples: &[Assignment],
) -> std::io::Result<()> {
    writeln!(
        w,
        "# mrf-samples v1 structure={structure_ref} checkpoint={checkpoint_ref}"
    )?;
    for a in samples {
        let line: Vec<String> = a.0.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}
