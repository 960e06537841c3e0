//! The learner (latent vector to log-potentials) and the critic, plus Adam.
//!
//! Linear layers compute `x W + b` with `W` stored `in x out`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const DROPOUT_RATE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Latent width for a model over `n_vars` variables.
pub fn default_latent_dim(n_vars: usize) -> usize {
    if n_vars < 500 {
        64
    } else {
        128
    }
}

fn uniform_weights(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape")
}

/// Standard-normal latent batch, `count x dim`.
pub fn sample_latents(rng: &mut impl Rng, count: usize, dim: usize) -> Tensor {
    let data = (0..count * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![count, dim], data).expect("shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub bn_scale: Tensor,
    pub bn_shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Tape handles for the trainable learner tensors.
#[derive(Clone, Copy, Debug)]
pub struct LearnerVars {
    pub w1: Var,
    pub b1: Var,
    pub bn_scale: Var,
    pub bn_shift: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Batch statistics observed by a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

impl LearnerParams {
    pub fn init(latent_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Self {
        let h = 2 * latent_dim;
        LearnerParams {
            w1: uniform_weights(rng, latent_dim, h),
            b1: Tensor::zeros(&[h]),
            bn_scale: Tensor::full(&[h], 1.0),
            bn_shift: Tensor::zeros(&[h]),
            running_mean: Tensor::zeros(&[h]),
            running_var: Tensor::full(&[h], 1.0),
            w2: uniform_weights(rng, h, output_dim),
            b2: Tensor::zeros(&[output_dim]),
        }
    }

    /// A learner whose weights and biases are all zero.
    pub fn zeros(latent_dim: usize, output_dim: usize) -> Self {
        let h = 2 * latent_dim;
        LearnerParams {
            w1: Tensor::zeros(&[latent_dim, h]),
            b1: Tensor::zeros(&[h]),
            bn_scale: Tensor::full(&[h], 1.0),
            bn_shift: Tensor::zeros(&[h]),
            running_mean: Tensor::zeros(&[h]),
            running_var: Tensor::full(&[h], 1.0),
            w2: Tensor::zeros(&[h, output_dim]),
            b2: Tensor::zeros(&[output_dim]),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Tensors in serialization order with their names.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("bn_scale", &self.bn_scale),
            ("bn_shift", &self.bn_shift),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("bn_scale", &mut self.bn_scale),
            ("bn_shift", &mut self.bn_shift),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    /// The tensors updated by gradient descent, in [`LearnerVars`] order.
    pub fn trainable_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.bn_scale,
            &mut self.bn_shift,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> LearnerVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.var(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LearnerVars {
            w1: put(&self.w1),
            b1: put(&self.b1),
            bn_scale: put(&self.bn_scale),
            bn_shift: put(&self.bn_shift),
            w2: put(&self.w2),
            b2: put(&self.b2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (m, k) = (self.latent_dim(), self.output_dim());
        let h = 2 * m;
        let ok = self.w1.shape() == [m, h]
            && self.b1.shape() == [h]
            && self.bn_scale.shape() == [h]
            && self.bn_shift.shape() == [h]
            && self.running_mean.shape() == [h]
            && self.running_var.shape() == [h]
            && self.w2.shape() == [h, k]
            && self.b2.shape() == [k];
        if !ok {
            return Err(Error::Shape("inconsistent learner tensor shapes".into()));
        }
        if self
            .running_var
            .data()
            .iter()
            .any(|&v| v.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater))
        {
            return Err(Error::Input("running variance must be positive".into()));
        }
        Ok(())
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let blend = |run: &mut Tensor, obs: &[f64]| {
            for (r, &o) in run.data_mut().iter_mut().zip(obs) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
            }
        };
        blend(&mut self.running_mean, &stats.mean);
        blend(&mut self.running_var, &stats.var);
    }

    /// Eval-mode forward without a caller-visible tape, `B x k`.
    pub fn forward_eval(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (out, _) = learner_forward(&mut tape, self, &vars, zv, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}

/// linear -> batch norm -> leaky relu -> linear. Train mode normalizes with
/// batch statistics and returns them; eval mode uses the running estimates.
pub fn learner_forward(
    tape: &mut Tape,
    params: &LearnerParams,
    vars: &LearnerVars,
    z: Var,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    let zs = tape.shape(z).to_vec();
    let m = params.latent_dim();
    if zs.len() != 2 || zs[1] != m {
        return Err(Error::Shape(format!("latent batch {zs:?}, expected [_, {m}]")));
    }
    let batch = zs[0];
    let h = tape.matmul(z, vars.w1)?;
    let h = tape.add(h, vars.b1)?;
    let (normed, stats) = match mode {
        Mode::Train => {
            if batch < 2 {
                return Err(Error::DegenerateBatch);
            }
            let inv_b = 1.0 / batch as f64;
            let sum = tape.sum_axis(h, 0)?;
            let mean = tape.scale(sum, inv_b);
            let centered = tape.sub(h, mean)?;
            let sq = tape.square(centered);
            let ss = tape.sum_axis(sq, 0)?;
            let var = tape.scale(ss, inv_b);
            let var_eps = tape.add_scalar(var, BN_EPS);
            let std = tape.sqrt(var_eps);
            let normed = tape.div(centered, std)?;
            let unbias = batch as f64 / (batch as f64 - 1.0);
            let stats = BatchStats {
                mean: tape.value(mean).data().to_vec(),
                var: tape.value(var).data().iter().map(|v| v * unbias).collect(),
            };
            (normed, Some(stats))
        }
        Mode::Eval => {
            let mean = tape.constant(params.running_mean.clone());
            let std = tape.constant(params.running_var.map(|v| (v + BN_EPS).sqrt()));
            let centered = tape.sub(h, mean)?;
            (tape.div(centered, std)?, None)
        }
    };
    let y = tape.mul(normed, vars.bn_scale)?;
    let y = tape.add(y, vars.bn_shift)?;
    let y = tape.leaky_relu(y, LEAKY_SLOPE);
    let y = tape.matmul(y, vars.w2)?;
    Ok((tape.add(y, vars.b2)?, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

/// Scaled keep-masks for the three dropout sites of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    pub masks: [Tensor; 3],
}

impl DropoutMasks {
    pub fn sample(rng: &mut impl Rng, batch: usize, hidden: usize) -> Self {
        let keep = 1.0 / (1.0 - DROPOUT_RATE);
        let mut draw = |cols: usize| {
            let data = (0..batch * cols)
                .map(|_| if rng.random::<f64>() < DROPOUT_RATE { 0.0 } else { keep })
                .collect();
            Tensor::new(vec![batch, cols], data).expect("shape")
        };
        DropoutMasks {
            masks: [draw(hidden), draw(hidden), draw(1)],
        }
    }
}

impl DiscriminatorParams {
    pub fn init(input_dim: usize, rng: &mut impl Rng) -> Self {
        let h = 2 * input_dim;
        DiscriminatorParams {
            w1: uniform_weights(rng, input_dim, h),
            b1: Tensor::zeros(&[h]),
            w2: uniform_weights(rng, h, h),
            b2: Tensor::zeros(&[h]),
            w3: uniform_weights(rng, h, 1),
            b3: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros(input_dim: usize) -> Self {
        let h = 2 * input_dim;
        DiscriminatorParams {
            w1: Tensor::zeros(&[input_dim, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, h]),
            b2: Tensor::zeros(&[h]),
            w3: Tensor::zeros(&[h, 1]),
            b3: Tensor::zeros(&[1]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w3", &mut self.w3),
            ("b3", &mut self.b3),
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> DiscriminatorVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.var(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        DiscriminatorVars {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
            w3: put(&self.w3),
            b3: put(&self.b3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, h) = (self.input_dim(), self.hidden_dim());
        let ok = h == 2 * n
            && self.b1.shape() == [h]
            && self.w2.shape() == [h, h]
            && self.b2.shape() == [h]
            && self.w3.shape() == [h, 1]
            && self.b3.shape() == [1];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inconsistent discriminator tensor shapes".into()))
        }
    }

    /// Eval-mode scores for each row of `x`.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = discriminator_forward(&mut tape, self, &vars, xv, None)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Three linear layers; after each, dropout (when `masks` is given, i.e. in
/// train mode), with leaky relu after the first two. Returns `B x 1`.
pub fn discriminator_forward(
    tape: &mut Tape,
    params: &DiscriminatorParams,
    vars: &DiscriminatorVars,
    x: Var,
    masks: Option<&DropoutMasks>,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let n = params.input_dim();
    if xs.len() != 2 || xs[1] != n {
        return Err(Error::Shape(format!("critic input {xs:?}, expected [_, {n}]")));
    }
    if let Some(m) = masks {
        let (b, h) = (xs[0], params.hidden_dim());
        if m.masks[0].shape() != [b, h] || m.masks[1].shape() != [b, h] || m.masks[2].shape() != [b, 1] {
            return Err(Error::Shape("dropout masks do not match the batch".into()));
        }
    }
    let layers = [(vars.w1, vars.b1), (vars.w2, vars.b2), (vars.w3, vars.b3)];
    let mut y = x;
    for (k, (w, b)) in layers.into_iter().enumerate() {
        y = tape.matmul(y, w)?;
        y = tape.add(y, b)?;
        if let Some(m) = masks {
            let mask = tape.constant(m.masks[k].clone());
            y = tape.mul(y, mask)?;
        }
        if k < 2 {
            y = tape.leaky_relu(y, LEAKY_SLOPE);
        }
    }
    Ok(y)
}

/// Mean over rows of `(|d out_b / d x_b| - 1)^2`, recorded on the tape so the
/// result can itself be differentiated with respect to the critic parameters.
/// `out` is `B x 1` and each row must depend only on the matching row of `x`.
pub fn grad_of_grad_norm(tape: &mut Tape, out: Var, x: Var) -> Result<Var> {
    let total = tape.sum(out);
    let g = tape.grad_graph(total, &[x])?[0];
    let norm = tape.l2_norm(g, 1)?;
    let dev = tape.add_scalar(norm, -1.0);
    let sq = tape.square(dev);
    Ok(tape.mean(sq))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, shapes: &[&[usize]]) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("optimizer slot count mismatch".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::Shape("gradient shape differs from parameter".into()));
            }
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * gv;
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * gv * gv;
                let mh = md[k] / c1;
                let vh = vd[k] / c2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
