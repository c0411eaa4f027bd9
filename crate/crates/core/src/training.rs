//! Losses, the Adam optimizer, the four per-batch updates and the epoch
//! loop.
//!
//! Each update binds only the parameter groups it changes as trainable
//! leaves, so untouched groups cannot move even by accident.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    bind_layers, init_mlp, mlp_forward, one_hot, Activation, DenseLayer, FaeModel, ModelVars, ParamGroup,
};

/// `(1/N) Σᵢ ‖Xᵢ − X̂ᵢ‖²` on the tape.
pub fn mse_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    if tape.value(x).shape() != tape.value(x_hat).shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", tape.value(x).shape(), tape.value(x_hat).shape()),
        ));
    }
    let n = tape.value(x).rows() as f64;
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.squared_norm(diff)?;
    tape.scale(sq, 1.0 / n)
}

pub fn mse(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let b = tape.constant(x_hat.clone());
    let l = mse_loss(&mut tape, a, b)?;
    Ok(tape.value(l).data()[0])
}

/// `−log softmax(ℓ)_c` for one logit vector.
pub fn cross_entropy(logits: &[f64], c: usize) -> Result<f64> {
    if c >= logits.len() {
        return Err(Error::OutOfRange {
            what: "class",
            detail: format!("{c} with {} logits", logits.len()),
        });
    }
    // log Σ exp(ℓᵢ − ℓ_max) as log1p of the non-maximal terms keeps small
    // losses accurate.
    let top = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, l)| (l - logits[top]).exp())
        .sum();
    Ok(logits[top] - logits[c] + rest.ln_1p())
}

/// Mean cross-entropy of `N×K` logits against `labels`.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = tape.value(logits).dims2();
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", format!("{n} rows, {} labels", labels.len())));
    }
    let onehot = tape.constant(one_hot(labels, k)?);
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul(ls, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Column-wise `(log σ(a), log(1 − σ(a)))` of an `N×1` logit, both stable.
fn log_sigmoid_pair(tape: &mut Tape, logit: Var) -> Result<(Var, Var)> {
    let zeros = tape.constant(Tensor::zeros(tape.value(logit).shape()));
    let both = tape.concat(&[zeros, logit], 1)?;
    let ls = tape.log_softmax(both)?;
    Ok((tape.slice(ls, 1, 1, 1)?, tape.slice(ls, 1, 0, 1)?))
}

fn mean(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).len() as f64;
    let s = tape.sum(v)?;
    tape.scale(s, 1.0 / n)
}

/// Adam moments for one list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        AdamState {
            m: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Fresh state for `groups` of `model`, in [`ParamGroup::ALL`] order.
    pub fn for_groups(model: &FaeModel, groups: &[ParamGroup]) -> Self {
        let tensors: Vec<&Tensor> = ParamGroup::ALL
            .iter()
            .filter(|g| groups.contains(g))
            .flat_map(|&g| model.group(g))
            .collect();
        AdamState::new(&tensors)
    }
}

/// Bias-corrected Adam step. `ascend` flips the sign of the update, i.e.
/// `θ ← θ + μ·m̂/(√v̂ + ε)`.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    lr: f64,
    ascend: bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moment buffers", params.len(), grads.len(), state.m.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::shape("adam_step", "parameter and gradient sizes differ"));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let sign = if ascend { 1.0 } else { -1.0 };
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w += sign * lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

fn apply(
    model: &mut FaeModel,
    groups: &[ParamGroup],
    grads: Vec<Tensor>,
    state: &mut AdamState,
    lr: f64,
    ascend: bool,
) -> Result<()> {
    let mut params = model.groups_mut(groups);
    adam_step(state, &mut params, &grads, lr, ascend)
}

fn collect(tape: &Tape, loss: Var, vars: &ModelVars, groups: &[ParamGroup]) -> Result<Vec<Tensor>> {
    let mut g = tape.backward(loss)?;
    Ok(ParamGroup::ALL
        .iter()
        .filter(|p| groups.contains(p))
        .flat_map(|&p| vars.vars(p))
        .map(|v| g.take(v))
        .collect())
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

const RECON: [ParamGroup; 3] = [ParamGroup::Encoder, ParamGroup::Embedding, ParamGroup::Decoder];
const GENERATOR: [ParamGroup; 2] = [ParamGroup::Embedding, ParamGroup::Decoder];

/// One Adam descent step on the reconstruction MSE over `(θ_e, θ_m, θ_d)`.
/// Returns the loss before the step.
pub fn reconstruction_update(
    model: &mut FaeModel,
    x: &Tensor,
    c: &[usize],
    lr: f64,
    state: &mut AdamState,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, model, &RECON);
    let input = tape.constant(x.clone());
    let x_hat = vars.reconstruct(&mut tape, input, c)?;
    let loss = mse_loss(&mut tape, input, x_hat)?;
    let value = scalar(&tape, loss);
    let grads = collect(&tape, loss, &vars, &RECON)?;
    apply(model, &RECON, grads, state, lr, false)?;
    Ok(value)
}

/// How the encoder is pushed away from the fiber classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Separate descent (classifier) and ascent (encoder) Adam steps from a
    /// single backward pass.
    #[default]
    TwoRate,
    /// A gradient reversal layer between encoder and classifier; both groups
    /// then take descent steps.
    Grl,
}

/// Optimizer states owned by [`train`], one per (objective, parameter set).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub recon: AdamState,
    pub adv_classifier: AdamState,
    pub adv_encoder: AdamState,
    pub cond_classifier: AdamState,
    pub cond_generator: AdamState,
    pub discriminator: AdamState,
    pub gan_generator: AdamState,
}

impl TrainState {
    pub fn new(model: &FaeModel) -> Self {
        TrainState {
            recon: AdamState::for_groups(model, &RECON),
            adv_classifier: AdamState::for_groups(model, &[ParamGroup::AdvClassifier]),
            adv_encoder: AdamState::for_groups(model, &[ParamGroup::Encoder]),
            cond_classifier: AdamState::for_groups(model, &[ParamGroup::CondClassifier]),
            cond_generator: AdamState::for_groups(model, &GENERATOR),
            discriminator: AdamState::for_groups(model, &[ParamGroup::Discriminator]),
            gan_generator: AdamState::for_groups(model, &RECON),
        }
    }
}

/// Condition-adversarial step on the fiber classifier `Ῡ`: `θ_ac` descends
/// and `θ_e` ascends the cross-entropy of `Ῡ(Φ₁(X))`. Returns the loss
/// before the step.
#[allow(clippy::too_many_arguments)]
pub fn cond_adv_update(
    model: &mut FaeModel,
    x: &Tensor,
    c: &[usize],
    lr_classifier: f64,
    lr_encoder: f64,
    mode: AdversarialMode,
    grl_lambda: f64,
    classifier_state: &mut AdamState,
    encoder_state: &mut AdamState,
) -> Result<f64> {
    let groups = [ParamGroup::Encoder, ParamGroup::AdvClassifier];
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, model, &groups);
    let input = tape.constant(x.clone());
    let mut f = vars.encode(&mut tape, input)?;
    if mode == AdversarialMode::Grl {
        f = tape.grad_reversal(f, grl_lambda)?;
    }
    let logits = mlp_forward(&mut tape, &vars.adv_classifier, f)?;
    let loss = cross_entropy_loss(&mut tape, logits, c)?;
    let value = scalar(&tape, loss);
    let mut grads = collect(&tape, loss, &vars, &groups)?;
    let classifier_grads = grads.split_off(model.group(ParamGroup::Encoder).len());
    apply(
        model,
        &[ParamGroup::AdvClassifier],
        classifier_grads,
        classifier_state,
        lr_classifier,
        false,
    )?;
    let ascend = mode == AdversarialMode::TwoRate;
    apply(model, &[ParamGroup::Encoder], grads, encoder_state, lr_encoder, ascend)?;
    Ok(value)
}

/// Condition-fitting step with the sample-space classifier `Υ`: `θ_c`
/// descends the cross-entropy of real samples, then `(θ_m, θ_d)` descend the
/// cross-entropy of `Υ(X̂)` so reconstructions carry their condition.
/// Returns the reconstruction cross-entropy before the generator step.
pub fn cond_fitting_update(
    model: &mut FaeModel,
    x: &Tensor,
    c: &[usize],
    lr_classifier: f64,
    lr_generator: f64,
    classifier_state: &mut AdamState,
    generator_state: &mut AdamState,
) -> Result<f64> {
    let groups = [ParamGroup::CondClassifier];
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, model, &groups);
    let input = tape.constant(x.clone());
    let logits = mlp_forward(&mut tape, &vars.cond_classifier, input)?;
    let loss = cross_entropy_loss(&mut tape, logits, c)?;
    let grads = collect(&tape, loss, &vars, &groups)?;
    apply(model, &groups, grads, classifier_state, lr_classifier, false)?;

    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, model, &GENERATOR);
    let input = tape.constant(x.clone());
    let x_hat = vars.reconstruct(&mut tape, input, c)?;
    let logits = mlp_forward(&mut tape, &vars.cond_classifier, x_hat)?;
    let loss = cross_entropy_loss(&mut tape, logits, c)?;
    let value = scalar(&tape, loss);
    let grads = collect(&tape, loss, &vars, &GENERATOR)?;
    apply(model, &GENERATOR, grads, generator_state, lr_generator, false)?;
    Ok(value)
}

/// `mean[log D(x) + log(1 − D(x̂))]` with `x̂` held fixed.
pub fn discriminator_objective(model: &FaeModel, x: &Tensor, c: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, model, &[]);
    let obj = disc_objective(&mut tape, &vars, x, c)?;
    Ok(scalar(&tape, obj))
}

fn disc_objective(tape: &mut Tape, vars: &ModelVars, x: &Tensor, c: &[usize]) -> Result<Var> {
    let input = tape.constant(x.clone());
    let x_hat = vars.reconstruct(tape, input, c)?;
    let real = mlp_forward(tape, &vars.discriminator, input)?;
    let fake = mlp_forward(tape, &vars.discriminator, x_hat)?;
    let (log_real, _) = log_sigmoid_pair(tape, real)?;
    let (_, log_not_fake) = log_sigmoid_pair(tape, fake)?;
    let both = tape.add(log_real, log_not_fake)?;
    mean(tape, both)
}

/// GAN step: `θ_Δ` ascends the discriminator objective, then
/// `(θ_e, θ_m, θ_d)` descend `mean log(1 − D(X̂))`, or `−mean log D(X̂)`
/// when `non_saturating`. Returns the discriminator objective before the
/// step.
#[allow(clippy::too_many_arguments)]
pub fn gan_update(
    model: &mut FaeModel,
    x: &Tensor,
    c: &[usize],
    lr_discriminator: f64,
    lr_generator: f64,
    non_saturating: bool,
    discriminator_state: &mut AdamState,
    generator_state: &mut AdamState,
) -> Result<f64> {
    let groups = [ParamGroup::Discriminator];
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, model, &groups);
    let obj = disc_objective(&mut tape, &vars, x, c)?;
    let value = scalar(&tape, obj);
    let grads = collect(&tape, obj, &vars, &groups)?;
    apply(model, &groups, grads, discriminator_state, lr_discriminator, true)?;

    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, model, &RECON);
    let input = tape.constant(x.clone());
    let x_hat = vars.reconstruct(&mut tape, input, c)?;
    let fake = mlp_forward(&mut tape, &vars.discriminator, x_hat)?;
    let (log_fake, log_not_fake) = log_sigmoid_pair(&mut tape, fake)?;
    let loss = if non_saturating {
        let m = mean(&mut tape, log_fake)?;
        tape.scale(m, -1.0)?
    } else {
        mean(&mut tape, log_not_fake)?
    };
    let grads = collect(&tape, loss, &vars, &RECON)?;
    apply(model, &RECON, grads, generator_state, lr_generator, false)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Shuffling seed. Run configs carry a single top-level seed instead.
    #[serde(skip)]
    pub seed: u64,
    pub lr_mse: f64,
    pub lr_ac1: f64,
    pub lr_ac2: f64,
    pub lr_c1: f64,
    pub lr_c2: f64,
    pub lr_delta1: f64,
    pub lr_delta2: f64,
    pub grl_lambda: f64,
    pub adversarial: bool,
    pub adversarial_mode: AdversarialMode,
    pub condition_fitting: bool,
    pub gan: bool,
    pub non_saturating_gan: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            seed: 0,
            lr_mse: 1e-3,
            lr_ac1: 1e-4,
            lr_ac2: 1e-4,
            lr_c1: 1e-4,
            lr_c2: 1e-4,
            lr_delta1: 1e-4,
            lr_delta2: 1e-4,
            grl_lambda: 1.0,
            adversarial: true,
            adversarial_mode: AdversarialMode::TwoRate,
            condition_fitting: true,
            gan: true,
            non_saturating_gan: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_mse", self.lr_mse),
            ("lr_ac1", self.lr_ac1),
            ("lr_ac2", self.lr_ac2),
            ("lr_c1", self.lr_c1),
            ("lr_c2", self.lr_c2),
            ("lr_delta1", self.lr_delta1),
            ("lr_delta2", self.lr_delta2),
        ];
        for (name, r) in rates {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {r}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.grl_lambda >= 0.0 && self.grl_lambda.is_finite()) {
            return Err(Error::Config(format!("grl_lambda must be >= 0, got {}", self.grl_lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Reconstruction,
    CondAdv,
    CondFitting,
    Gan,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Reconstruction => "reconstruction",
            Objective::CondAdv => "cond_adv",
            Objective::CondFitting => "cond_fitting",
            Objective::Gan => "gan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub objective: Objective,
    pub value: f64,
}

/// Per-step loss values of a [`train`] run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
}

impl TrainReport {
    /// Mean value of `objective` in each epoch that recorded it.
    pub fn epoch_means(&self, objective: Objective) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in self.records.iter().filter(|r| r.objective == objective) {
            match out.last_mut() {
                Some(last) if last.0 == r.epoch => {
                    last.1 += r.value;
                    last.2 += 1;
                }
                _ => out.push((r.epoch, r.value, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }

    /// CSV with columns `epoch,step,objective,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,objective,value\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{:e}", r.epoch, r.step, r.objective.name(), r.value);
        }
        s
    }
}

fn check(value: f64, epoch: usize, step: usize, objective: Objective, model: &FaeModel) -> Result<()> {
    let params_ok = ParamGroup::ALL
        .iter()
        .all(|&g| model.group(g).iter().all(|t| t.is_finite()));
    if value.is_finite() && params_ok {
        return Ok(());
    }
    Err(Error::NonFinite(format!(
        "{} loss {value} at epoch {epoch}, step {step}{}",
        objective.name(),
        if params_ok { "" } else { "; parameters diverged" }
    )))
}

/// Runs the full schedule: per batch, reconstruction, condition-adversarial,
/// condition-fitting and GAN updates in that order, each recomputing its
/// forward pass from the current parameters. Batches are reshuffled every
/// epoch from `config.seed`.
pub fn train(model: &mut FaeModel, data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if data.dim() != model.arch.input_dim || data.k > model.arch.conditions {
        return Err(Error::shape(
            "train",
            format!(
                "dataset D={} K={} vs model D={} K={}",
                data.dim(),
                data.k,
                model.arch.input_dim,
                model.arch.conditions
            ),
        ));
    }
    if !data.in_unit_cube() {
        log::warn!("training data leaves [0, 1]; the sigmoid decoder cannot match it");
    }
    let mut state = TrainState::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let (x, c) = data.batch(chunk);
            let mut record = |objective, value: f64, model: &FaeModel| -> Result<()> {
                check(value, epoch, step, objective, model)?;
                report.records.push(LossRecord {
                    epoch,
                    step,
                    objective,
                    value,
                });
                Ok(())
            };
            let v = reconstruction_update(model, &x, &c, config.lr_mse, &mut state.recon)?;
            record(Objective::Reconstruction, v, model)?;
            if config.adversarial {
                let v = cond_adv_update(
                    model,
                    &x,
                    &c,
                    config.lr_ac1,
                    config.lr_ac2,
                    config.adversarial_mode,
                    config.grl_lambda,
                    &mut state.adv_classifier,
                    &mut state.adv_encoder,
                )?;
                record(Objective::CondAdv, v, model)?;
            }
            if config.condition_fitting {
                let v = cond_fitting_update(
                    model,
                    &x,
                    &c,
                    config.lr_c1,
                    config.lr_c2,
                    &mut state.cond_classifier,
                    &mut state.cond_generator,
                )?;
                record(Objective::CondFitting, v, model)?;
            }
            if config.gan {
                let v = gan_update(
                    model,
                    &x,
                    &c,
                    config.lr_delta1,
                    config.lr_delta2,
                    config.non_saturating_gan,
                    &mut state.discriminator,
                    &mut state.gan_generator,
                )?;
                record(Objective::Gan, v, model)?;
            }
            step += 1;
        }
        if let Some((_, mse)) = report.epoch_means(Objective::Reconstruction).last() {
            log::debug!("epoch {epoch}: reconstruction {mse:.6}");
        }
    }
    Ok(report)
}

/// Held-out accuracy of a freshly trained classifier predicting `labels`
/// from `features`.
///
/// Rows are shuffled with `seed`, 75% train a one-hidden-layer ReLU network
/// with full-batch Adam, and the remaining 25% are scored.
pub fn probe_accuracy(features: &Tensor, labels: &[usize], classes: usize, seed: u64) -> Result<f64> {
    let (n, d) = features.dims2();
    if labels.len() != n || n < 4 {
        return Err(Error::InvalidInput(format!("probe needs ≥ 4 labeled rows, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let split = n * 3 / 4;
    let gather = |idx: &[usize]| {
        let data: Vec<f64> = idx.iter().flat_map(|&i| features.row(i).to_vec()).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        (Tensor::from_parts(vec![idx.len(), d], data), y)
    };
    let (x_train, y_train) = gather(&order[..split]);
    let (x_test, y_test) = gather(&order[split..]);

    let mut layers = init_mlp(&mut rng, d, &[32], classes, Activation::Relu, Activation::Identity);
    let shapes: Vec<Tensor> = layers.iter().flat_map(|l| [l.weights.clone(), l.bias.clone()]).collect();
    let mut state = AdamState::new(&shapes.iter().collect::<Vec<_>>());
    for _ in 0..500 {
        let mut tape = Tape::new();
        let vars = bind_layers(&mut tape, &layers, true);
        let x = tape.constant(x_train.clone());
        let logits = mlp_forward(&mut tape, &vars, x)?;
        let loss = cross_entropy_loss(&mut tape, logits, &y_train)?;
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().flat_map(|l| [g.take(l.weights), g.take(l.bias)]).collect();
        let mut params: Vec<&mut Tensor> = layers
            .iter_mut()
            .flat_map(|l: &mut DenseLayer| [&mut l.weights, &mut l.bias])
            .collect();
        adam_step(&mut state, &mut params, &grads, 1e-2, false)?;
    }
    let mut tape = Tape::new();
    let vars = bind_layers(&mut tape, &layers, false);
    let x = tape.constant(x_test);
    let logits = mlp_forward(&mut tape, &vars, x)?;
    let logits = tape.value(logits);
    let correct = (0..y_test.len())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..classes).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y_test[i]
        })
        .count();
    Ok(correct as f64 / y_test.len() as f64)
}

/// Domain-adversarial updates written two ways, used to check the gradient
/// reversal layer against the explicit update rule.
pub mod dann {
    use super::*;

    /// Feature extractor, label predictor and domain classifier.
    #[derive(Clone, Debug, PartialEq)]
    pub struct DannNets {
        pub features: Vec<DenseLayer>,
        pub label: Vec<DenseLayer>,
        pub domain: Vec<DenseLayer>,
    }

    impl DannNets {
        pub fn init(input: usize, hidden: usize, classes: usize, domains: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            DannNets {
                features: init_mlp(&mut rng, input, &[hidden], hidden, Activation::Sine, Activation::Sine),
                label: init_mlp(&mut rng, hidden, &[], classes, Activation::Relu, Activation::Identity),
                domain: init_mlp(&mut rng, hidden, &[hidden], domains, Activation::Relu, Activation::Identity),
            }
        }

        pub fn bytes(&self) -> Vec<u8> {
            [&self.features, &self.label, &self.domain]
                .iter()
                .flat_map(|ls| ls.iter())
                .flat_map(|l| [l.weights.to_le_bytes(), l.bias.to_le_bytes()].concat())
                .collect()
        }

        pub fn max_abs_diff(&self, other: &DannNets) -> f64 {
            let flat = |n: &DannNets| -> Vec<f64> {
                [&n.features, &n.label, &n.domain]
                    .iter()
                    .flat_map(|ls| ls.iter())
                    .flat_map(|l| l.weights.data().iter().chain(l.bias.data()).copied().collect::<Vec<_>>())
                    .collect()
            };
            flat(self)
                .iter()
                .zip(flat(other))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        }
    }

    fn descend(layers: &mut [DenseLayer], grads: &[Tensor], lr: f64) {
        let params = layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias]);
        for (p, g) in params.zip(grads) {
            for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * gv;
            }
        }
    }

    fn layer_grads(g: &mut crate::autodiff::Gradients, vars: &[crate::nn::LayerVars]) -> Vec<Tensor> {
        vars.iter().flat_map(|l| [g.take(l.weights), g.take(l.bias)]).collect()
    }

    /// Explicit rule with plain gradient descent:
    /// `θ_f ← θ_f − μ(∂L_y/∂θ_f − λ ∂L_d/∂θ_f)`, `θ_y ← θ_y − μ ∂L_y/∂θ_y`,
    /// `θ_d ← θ_d − μ ∂L_d/∂θ_d`, from two separate backward passes.
    pub fn explicit_step(
        nets: &mut DannNets,
        x: &Tensor,
        y: &[usize],
        domain: &[usize],
        lr: f64,
        lambda: f64,
    ) -> Result<()> {
        let mut tape = Tape::new();
        let f_vars = bind_layers(&mut tape, &nets.features, true);
        let y_vars = bind_layers(&mut tape, &nets.label, true);
        let input = tape.constant(x.clone());
        let h = mlp_forward(&mut tape, &f_vars, input)?;
        let logits = mlp_forward(&mut tape, &y_vars, h)?;
        let loss_y = cross_entropy_loss(&mut tape, logits, y)?;
        let mut g = tape.backward(loss_y)?;
        let gf_y = layer_grads(&mut g, &f_vars);
        let gy = layer_grads(&mut g, &y_vars);

        let mut tape = Tape::new();
        let f_vars = bind_layers(&mut tape, &nets.features, true);
        let d_vars = bind_layers(&mut tape, &nets.domain, true);
        let input = tape.constant(x.clone());
        let h = mlp_forward(&mut tape, &f_vars, input)?;
        let logits = mlp_forward(&mut tape, &d_vars, h)?;
        let loss_d = cross_entropy_loss(&mut tape, logits, domain)?;
        let mut g = tape.backward(loss_d)?;
        let gf_d = layer_grads(&mut g, &f_vars);
        let gd = layer_grads(&mut g, &d_vars);

        let gf: Vec<Tensor> = gf_y
            .iter()
            .zip(&gf_d)
            .map(|(a, b)| {
                let data = a.data().iter().zip(b.data()).map(|(u, v)| u - lambda * v).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            })
            .collect();
        descend(&mut nets.features, &gf, lr);
        descend(&mut nets.label, &gy, lr);
        descend(&mut nets.domain, &gd, lr);
        Ok(())
    }

    /// The same update as one descent pass on `L_y + L_d∘R_λ`.
    pub fn grl_step(
        nets: &mut DannNets,
        x: &Tensor,
        y: &[usize],
        domain: &[usize],
        lr: f64,
        lambda: f64,
    ) -> Result<()> {
        let mut tape = Tape::new();
        let f_vars = bind_layers(&mut tape, &nets.features, true);
        let y_vars = bind_layers(&mut tape, &nets.label, true);
        let d_vars = bind_layers(&mut tape, &nets.domain, true);
        let input = tape.constant(x.clone());
        let h = mlp_forward(&mut tape, &f_vars, input)?;
        let logits_y = mlp_forward(&mut tape, &y_vars, h)?;
        let loss_y = cross_entropy_loss(&mut tape, logits_y, y)?;
        let reversed = tape.grad_reversal(h, lambda)?;
        let logits_d = mlp_forward(&mut tape, &d_vars, reversed)?;
        let loss_d = cross_entropy_loss(&mut tape, logits_d, domain)?;
        let total = tape.add(loss_y, loss_d)?;
        let mut g = tape.backward(total)?;
        let gf = layer_grads(&mut g, &f_vars);
        let gy = layer_grads(&mut g, &y_vars);
        let gd = layer_grads(&mut g, &d_vars);
        descend(&mut nets.features, &gf, lr);
        descend(&mut nets.label, &gy, lr);
        descend(&mut nets.domain, &gd, lr);
        Ok(())
    }

    /// Runs both variants from the same initialization for `steps` random
    /// batches and returns the largest parameter difference seen.
    pub fn trajectory_gap(seed: u64, steps: usize, lr: f64, lambda: f64) -> Result<f64> {
        use rand::Rng;
        let (input, hidden, classes, domains, batch) = (5, 8, 3, 2, 16);
        let mut a = DannNets::init(input, hidden, classes, domains, seed);
        let mut b = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut worst: f64 = 0.0;
        for _ in 0..steps {
            let x: Vec<f64> = (0..batch * input).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::from_parts(vec![batch, input], x);
            let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
            let d: Vec<usize> = (0..batch).map(|_| rng.random_range(0..domains)).collect();
            explicit_step(&mut a, &x, &y, &d, lr, lambda)?;
            grl_step(&mut b, &x, &y, &d, lr, lambda)?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        Ok(worst)
    }
}
