//! Adversarial training of a learner whose outputs parameterize the
//! graphical model, against a Wasserstein critic with gradient penalty.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::bp::{batch_inference_raw, inference_unrolled, BpPlan};
use crate::config::{set, KeyValues};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::GraphStructure;
use crate::nn::{
    default_latent_dim, discriminator_forward, grad_of_grad_norm, learner_forward, sample_latents, Adam, BatchStats,
    DiscriminatorParams, DropoutMasks, LearnerParams, Mode,
};
use crate::store::Artifact;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AgmConfig {
    pub lambda: f64,
    pub critic_steps: usize,
    pub bp_steps: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Latent width; derived from the variable count when absent.
    pub latent_dim: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for AgmConfig {
    fn default() -> Self {
        AgmConfig {
            lambda: 10.0,
            critic_steps: 10,
            bp_steps: 5,
            batch_size: 128,
            total_steps: 3000,
            learning_rate: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            epsilon: 1e-8,
            seed: 0,
            latent_dim: None,
            checkpoint_every: 100,
        }
    }
}

const AGM_KEYS: &[&str] = &[
    "lambda",
    "critic_steps",
    "bp_steps",
    "batch_size",
    "total_steps",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "seed",
    "latent_dim",
    "checkpoint_every",
];

impl AgmConfig {
    /// Defaults overridden by the keys present in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(AGM_KEYS)?;
        let mut c = AgmConfig::default();
        set(&kv, "lambda", &mut c.lambda)?;
        set(&kv, "critic_steps", &mut c.critic_steps)?;
        set(&kv, "bp_steps", &mut c.bp_steps)?;
        set(&kv, "batch_size", &mut c.batch_size)?;
        set(&kv, "total_steps", &mut c.total_steps)?;
        set(&kv, "learning_rate", &mut c.learning_rate)?;
        set(&kv, "beta1", &mut c.beta1)?;
        set(&kv, "beta2", &mut c.beta2)?;
        set(&kv, "epsilon", &mut c.epsilon)?;
        set(&kv, "seed", &mut c.seed)?;
        if let Some(m) = kv.get("latent_dim")? {
            c.latent_dim = Some(m);
        }
        set(&kv, "checkpoint_every", &mut c.checkpoint_every)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "lambda={}\ncritic_steps={}\nbp_steps={}\nbatch_size={}\ntotal_steps={}\nlearning_rate={}\nbeta1={}\nbeta2={}\nepsilon={}\nseed={}\ncheckpoint_every={}\n",
            self.lambda,
            self.critic_steps,
            self.bp_steps,
            self.batch_size,
            self.total_steps,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.seed,
            self.checkpoint_every
        );
        if let Some(m) = self.latent_dim {
            s.push_str(&format!("latent_dim={m}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a non-negative number");
        }
        if self.critic_steps == 0 || self.total_steps == 0 || self.checkpoint_every == 0 {
            return bad("critic_steps, total_steps and checkpoint_every must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch norm");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.epsilon > 0.0) {
            return bad("learning_rate and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.latent_dim == Some(0) {
            return bad("latent_dim must be positive");
        }
        Ok(())
    }
}

/// One line of the loss trace, recorded after each generator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// Critic objective of the last critic update before this step.
    pub critic_loss: f64,
    pub generator_loss: f64,
    /// Gradient-penalty term (before scaling by lambda) of that critic update.
    pub penalty: f64,
}

pub fn write_trace_csv(mut w: impl Write, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "step,critic_loss,generator_loss,penalty")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.critic_loss, r.generator_loss, r.penalty)?;
    }
    Ok(())
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub learner: LearnerParams,
    pub critic: DiscriminatorParams,
    pub learner_opt: Adam,
    pub critic_opt: Adam,
    /// Completed generator updates.
    pub step: usize,
    pub trace: Vec<TraceRow>,
    pub rng: ChaCha8Rng,
}

fn adam_for(shapes: Vec<Vec<usize>>, cfg: &AgmConfig) -> Adam {
    let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, &refs)
}

impl TrainState {
    /// Fresh parameters for `structure`, initialized from the config seed.
    pub fn new(structure: &GraphStructure, cfg: &AgmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let m = cfg
            .latent_dim
            .unwrap_or_else(|| default_latent_dim(structure.n_nodes()));
        let mut learner = LearnerParams::init(m, structure.n_params(), &mut rng);
        let mut critic = DiscriminatorParams::init(structure.n_nodes() * structure.support_size(), &mut rng);
        let learner_opt = adam_for(
            learner.trainable_mut().iter().map(|t| t.shape().to_vec()).collect(),
            cfg,
        );
        let critic_opt = adam_for(critic.trainable_mut().iter().map(|t| t.shape().to_vec()).collect(), cfg);
        TrainState {
            learner,
            critic,
            learner_opt,
            critic_opt,
            step: 0,
            trace: Vec::new(),
            rng,
        }
    }
}

fn empty_unary(plan_nodes: usize, support: usize) -> Tensor {
    Tensor::zeros(&[1, plan_nodes, support])
}

/// Train-mode learner outputs for `z`, without recording gradients.
fn learner_train_outputs(learner: &LearnerParams, z: Tensor) -> Result<(Tensor, BatchStats)> {
    let mut tape = Tape::new();
    let vars = learner.register(&mut tape, false);
    let zv = tape.constant(z);
    let (out, stats) = learner_forward(&mut tape, learner, &vars, zv, Mode::Train)?;
    Ok((tape.value(out).clone(), stats.expect("train mode")))
}

/// Samples `b` latents, maps them through the learner in train mode, runs BP
/// without evidence and concatenates node marginals: a `b x (N |X|)` batch.
pub fn generate_fake_batch(
    learner: &LearnerParams,
    structure: &GraphStructure,
    plan: &BpPlan,
    b: usize,
    bp_steps: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let z = sample_latents(rng, b, learner.latent_dim());
    let (psi, _) = learner_train_outputs(learner, z)?;
    let (n, s) = (structure.n_nodes(), structure.support_size());
    let beliefs = batch_inference_raw(plan, &psi, &empty_unary(n, s), bp_steps)?;
    beliefs.reshape(&[b, n * s])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticLoss {
    /// `wasserstein + lambda * penalty`.
    pub total: f64,
    /// `mean D(fake) - mean D(real)`.
    pub wasserstein: f64,
    pub penalty: f64,
}

/// Dropout masks for the real, fake and interpolated critic passes.
pub type CriticMasks = [DropoutMasks; 3];

pub fn sample_critic_masks(rng: &mut impl Rng, batch: usize, hidden: usize) -> CriticMasks {
    [
        DropoutMasks::sample(rng, batch, hidden),
        DropoutMasks::sample(rng, batch, hidden),
        DropoutMasks::sample(rng, batch, hidden),
    ]
}

/// The critic objective and its gradient with respect to the critic's
/// trainable tensors, with interpolates `eps_b x_b + (1 - eps_b) fake_b`.
pub fn critic_objective(
    critic: &DiscriminatorParams,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    masks: &CriticMasks,
    lambda: f64,
) -> Result<(CriticLoss, Vec<Tensor>)> {
    if real.shape() != fake.shape() || real.ndim() != 2 || eps.len() != real.shape()[0] {
        return Err(Error::Shape(format!(
            "real {:?}, fake {:?}, {} mixing weights",
            real.shape(),
            fake.shape(),
            eps.len()
        )));
    }
    let width = real.shape()[1];
    let mixed: Vec<f64> = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(k, (&r, &f))| {
            let e = eps[k / width];
            e * r + (1.0 - e) * f
        })
        .collect();
    let mut tape = Tape::new();
    let vars = critic.register(&mut tape, true);
    let xr = tape.constant(real.clone());
    let xf = tape.constant(fake.clone());
    let xm = tape.var(Tensor::new(real.shape().to_vec(), mixed)?);
    let d_real = discriminator_forward(&mut tape, critic, &vars, xr, Some(&masks[0]))?;
    let d_fake = discriminator_forward(&mut tape, critic, &vars, xf, Some(&masks[1]))?;
    let d_mixed = discriminator_forward(&mut tape, critic, &vars, xm, Some(&masks[2]))?;
    let mean_real = tape.mean(d_real);
    let mean_fake = tape.mean(d_fake);
    let wass = tape.sub(mean_fake, mean_real)?;
    let pen = grad_of_grad_norm(&mut tape, d_mixed, xm)?;
    let scaled = tape.scale(pen, lambda);
    let total = tape.add(wass, scaled)?;
    let grads = tape.grad(total, &[vars.w1, vars.b1, vars.w2, vars.b2, vars.w3, vars.b3])?;
    let loss = CriticLoss {
        total: tape.value(total).item()?,
        wasserstein: tape.value(wass).item()?,
        penalty: tape.value(pen).item()?,
    };
    Ok((loss, grads))
}

/// Generator loss `-mean D(fake)` for latents `z`, its gradient with respect
/// to the learner's trainable tensors, and the batch statistics observed.
pub fn generator_objective(
    learner: &LearnerParams,
    critic: &DiscriminatorParams,
    plan: &BpPlan,
    structure: &GraphStructure,
    z: &Tensor,
    masks: &DropoutMasks,
    bp_steps: usize,
) -> Result<(f64, Vec<Tensor>, BatchStats)> {
    let (n, s) = (structure.n_nodes(), structure.support_size());
    let b = z.shape()[0];
    let mut tape = Tape::new();
    let lv = learner.register(&mut tape, true);
    let cv = critic.register(&mut tape, false);
    let zv = tape.constant(z.clone());
    let (psi, stats) = learner_forward(&mut tape, learner, &lv, zv, Mode::Train)?;
    let unary = tape.constant(empty_unary(n, s));
    let beliefs = inference_unrolled(&mut tape, plan, psi, unary, bp_steps)?;
    let x = tape.reshape(beliefs, &[b, n * s])?;
    let d = discriminator_forward(&mut tape, critic, &cv, x, Some(masks))?;
    let mean = tape.mean(d);
    let loss = tape.neg(mean);
    let grads = tape.grad(loss, &[lv.w1, lv.b1, lv.bn_scale, lv.bn_shift, lv.w2, lv.b2])?;
    Ok((tape.value(loss).item()?, grads, stats.expect("train mode")))
}

fn diverged(step: usize, reason: String, last_good: &Option<TrainState>) -> Error {
    Error::Divergence {
        step,
        reason,
        last_good: last_good.clone().map(|s| Box::new(Artifact::TrainState(s))),
    }
}

/// One critic update on `real` against a fresh fake batch.
pub fn critic_step(
    state: &mut TrainState,
    structure: &GraphStructure,
    plan: &BpPlan,
    real: &Tensor,
    cfg: &AgmConfig,
) -> Result<CriticLoss> {
    let b = real.shape()[0];
    let fake = generate_fake_batch(&state.learner, structure, plan, b, cfg.bp_steps, &mut state.rng)?;
    let eps: Vec<f64> = (0..b).map(|_| state.rng.random()).collect();
    let masks = sample_critic_masks(&mut state.rng, b, state.critic.hidden_dim());
    let (loss, grads) = critic_objective(&state.critic, real, &fake, &eps, &masks, cfg.lambda)?;
    if !loss.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(diverged(state.step, "non-finite critic loss".into(), &None));
    }
    state.critic_opt.update(&mut state.critic.trainable_mut(), &grads)?;
    Ok(loss)
}

/// One learner update; the critic is left untouched.
pub fn generator_step(
    state: &mut TrainState,
    structure: &GraphStructure,
    plan: &BpPlan,
    cfg: &AgmConfig,
) -> Result<f64> {
    let z = sample_latents(&mut state.rng, cfg.batch_size, state.learner.latent_dim());
    let masks = DropoutMasks::sample(&mut state.rng, cfg.batch_size, state.critic.hidden_dim());
    let (loss, grads, stats) =
        generator_objective(&state.learner, &state.critic, plan, structure, &z, &masks, cfg.bp_steps)?;
    if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(diverged(state.step, "non-finite generator loss".into(), &None));
    }
    state.learner_opt.update(&mut state.learner.trainable_mut(), &grads)?;
    state.learner.update_running_stats(&stats);
    Ok(loss)
}

fn check_dataset(dataset: &Dataset, structure: &GraphStructure) -> Result<()> {
    if dataset.n_vars() != structure.n_nodes() || dataset.support_size() != structure.support_size() {
        return Err(Error::Shape(format!(
            "dataset over {} variables with support {} for a structure with {} nodes and support {}",
            dataset.n_vars(),
            dataset.support_size(),
            structure.n_nodes(),
            structure.support_size()
        )));
    }
    if dataset.n_points() == 0 {
        return Err(Error::Input("empty dataset".into()));
    }
    Ok(())
}

/// Trains from scratch. `on_checkpoint` sees the state every
/// `checkpoint_every` generator steps and after the last one.
pub fn train_agm(
    dataset: &Dataset,
    structure: &GraphStructure,
    cfg: &AgmConfig,
    on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    let state = TrainState::new(structure, cfg);
    resume_agm(state, dataset, structure, cfg, on_checkpoint)
}

/// Continues training `state` up to `cfg.total_steps` generator steps.
pub fn resume_agm(
    mut state: TrainState,
    dataset: &Dataset,
    structure: &GraphStructure,
    cfg: &AgmConfig,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    check_dataset(dataset, structure)?;
    let plan = BpPlan::new(structure);
    let n_points = dataset.n_points();
    let mut last_good = Some(state.clone());
    while state.step < cfg.total_steps {
        let mut critic = CriticLoss {
            total: f64::NAN,
            wasserstein: f64::NAN,
            penalty: f64::NAN,
        };
        for _ in 0..cfg.critic_steps {
            let idx: Vec<usize> = (0..cfg.batch_size)
                .map(|_| state.rng.random_range(0..n_points))
                .collect();
            let real = dataset.encode_rows(&idx);
            critic =
                critic_step(&mut state, structure, &plan, &real, cfg).map_err(|e| attach_last_good(e, &last_good))?;
        }
        let generator_loss =
            generator_step(&mut state, structure, &plan, cfg).map_err(|e| attach_last_good(e, &last_good))?;
        state.step += 1;
        state.trace.push(TraceRow {
            step: state.step,
            critic_loss: critic.total,
            generator_loss,
            penalty: critic.penalty,
        });
        if state.step % cfg.checkpoint_every == 0 || state.step == cfg.total_steps {
            last_good = Some(state.clone());
            on_checkpoint(&state)?;
        }
    }
    Ok(state)
}

fn attach_last_good(e: Error, last_good: &Option<TrainState>) -> Error {
    match e {
        Error::Divergence { step, reason, .. } => diverged(step, reason, last_good),
        other => other,
    }
}
