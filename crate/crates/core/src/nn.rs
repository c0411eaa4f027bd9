//! Fully-connected building blocks and the fibered auto-encoder assembly.
//!
//! Parameters live in plain [`Tensor`]s owned by [`FaeModel`]. Every forward
//! pass binds the parameters it needs onto a [`Tape`] (as trainable leaves or
//! constants), which keeps the model itself free of any autodiff state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sine,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Sine => tape.sin(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// `activation(W x + b)` with `W` stored `out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.rank() != 2 || bias.rank() != 1 || bias.len() != weights.rows() {
            return Err(Error::shape(
                "dense_layer",
                format!("weights {:?} with bias {:?}", weights.shape(), bias.shape()),
            ));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LayerVars {
        let (weights, bias) = if trainable {
            (tape.parameter(self.weights.clone()), tape.parameter(self.bias.clone()))
        } else {
            (tape.constant(self.weights.clone()), tape.constant(self.bias.clone()))
        };
        LayerVars {
            weights,
            bias,
            activation: self.activation,
        }
    }
}

/// A [`DenseLayer`] bound onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weights: Var,
    pub bias: Var,
    pub activation: Activation,
}

impl LayerVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let z = tape.matmul_t(x, self.weights)?;
        let z = tape.add(z, self.bias)?;
        self.activation.apply(tape, z)
    }
}

pub fn bind_layers(tape: &mut Tape, layers: &[DenseLayer], trainable: bool) -> Vec<LayerVars> {
    layers.iter().map(|l| l.bind(tape, trainable)).collect()
}

pub fn mlp_forward(tape: &mut Tape, layers: &[LayerVars], x: Var) -> Result<Var> {
    layers.iter().try_fold(x, |h, l| l.forward(tape, h))
}

/// Gradient reversal: identity on the forward pass, `-lambda` times the
/// upstream gradient on the reverse pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientReversal {
    pub lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "gradient reversal scale must be a nonnegative real, got {lambda}"
            )));
        }
        Ok(GradientReversal { lambda })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.grad_reversal(x, self.lambda)
    }
}

/// Sizes and activations of every network in a [`FaeModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaeArchitecture {
    /// Sample dimension `D`.
    pub input_dim: usize,
    /// Fiber dimension `m` (encoder bottleneck width).
    pub fiber_dim: usize,
    /// Base dimension `n` (condition embedding width).
    pub base_dim: usize,
    /// Number of conditions `K`.
    pub conditions: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Hidden widths shared by both condition classifiers and the
    /// discriminator.
    pub classifier_hidden: Vec<usize>,
    #[serde(default = "default_omega0")]
    pub omega0: f64,
    #[serde(default = "default_decoder_output")]
    pub decoder_output: Activation,
}

fn default_omega0() -> f64 {
    1.0
}

fn default_decoder_output() -> Activation {
    Activation::Sigmoid
}

impl FaeArchitecture {
    pub fn new(input_dim: usize, fiber_dim: usize, base_dim: usize, conditions: usize) -> Self {
        FaeArchitecture {
            input_dim,
            fiber_dim,
            base_dim,
            conditions,
            encoder_hidden: vec![32, 32],
            decoder_hidden: vec![32, 32],
            classifier_hidden: vec![32],
            omega0: default_omega0(),
            decoder_output: default_decoder_output(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.fiber_dim + self.base_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.fiber_dim, self.base_dim, self.conditions];
        let hidden = self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .chain(&self.classifier_hidden);
        if dims.iter().chain(hidden).any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "all architecture dimensions must be positive: {self:?}"
            )));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::Config(format!("omega0 must be > 0, got {}", self.omega0)));
        }
        Ok(())
    }
}

/// Parameter groups, in archive order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Embedding,
    Decoder,
    AdvClassifier,
    CondClassifier,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::Embedding,
        ParamGroup::Decoder,
        ParamGroup::AdvClassifier,
        ParamGroup::CondClassifier,
        ParamGroup::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "theta_e",
            ParamGroup::Embedding => "theta_m",
            ParamGroup::Decoder => "theta_d",
            ParamGroup::AdvClassifier => "theta_ac",
            ParamGroup::CondClassifier => "theta_c",
            ParamGroup::Discriminator => "theta_delta",
        }
    }
}

/// Fibered auto-encoder: encoder, condition embedding, skip-connected
/// decoder, and the three auxiliary networks used during training.
#[derive(Clone, Debug, PartialEq)]
pub struct FaeModel {
    pub arch: FaeArchitecture,
    /// `D → … → m`, sine everywhere so the fiber lands in `[-1, 1]^m`.
    pub encoder: Vec<DenseLayer>,
    /// `K × n` table, one base point per condition.
    pub embedding: Tensor,
    /// Layer 0 reads `(f, b)`; every later layer reads `(h, f, b)`.
    pub decoder: Vec<DenseLayer>,
    /// Condition classifier over the fiber, trained adversarially.
    pub adv_classifier: Vec<DenseLayer>,
    /// Condition classifier over sample space.
    pub cond_classifier: Vec<DenseLayer>,
    /// Real-vs-reconstructed discriminator; outputs a logit.
    pub discriminator: Vec<DenseLayer>,
}

fn uniform_layer(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
    scale: f64,
) -> DenseLayer {
    let bound = (6.0 / fan_in as f64).sqrt();
    let w = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let weights: Vec<f64> = (0..fan_in * fan_out).map(|_| scale * w.sample(rng)).collect();
    let bias_bound = 1.0 / (fan_in as f64).sqrt();
    let bias: Vec<f64> = (0..fan_out)
        .map(|_| rng.random_range(-bias_bound..=bias_bound))
        .collect();
    DenseLayer {
        weights: Tensor::from_parts(vec![fan_out, fan_in], weights),
        bias: Tensor::from_parts(vec![fan_out], bias),
        activation,
    }
}

/// Fully-connected stack with the same initialization rule as
/// [`init_model`].
pub fn init_mlp(
    rng: &mut ChaCha8Rng,
    input: usize,
    hidden: &[usize],
    output: usize,
    hidden_act: Activation,
    output_act: Activation,
) -> Vec<DenseLayer> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut fan_in = input;
    for &h in hidden {
        layers.push(uniform_layer(rng, fan_in, h, hidden_act, 1.0));
        fan_in = h;
    }
    layers.push(uniform_layer(rng, fan_in, output, output_act, 1.0));
    layers
}

/// Deterministic initialization from `seed`.
///
/// Weights are uniform on `±√(6/fan_in)` (the first encoder layer is
/// additionally scaled by `omega0`), biases uniform on `±1/√fan_in`, and the
/// embedding table is drawn from `N(0, 0.1²)`.
pub fn init_model(arch: &FaeArchitecture, seed: u64) -> Result<FaeModel> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = arch.latent_dim();

    let mut encoder = Vec::new();
    let mut fan_in = arch.input_dim;
    let widths: Vec<usize> = arch
        .encoder_hidden
        .iter()
        .copied()
        .chain(std::iter::once(arch.fiber_dim))
        .collect();
    for (i, &w) in widths.iter().enumerate() {
        let scale = if i == 0 { arch.omega0 } else { 1.0 };
        encoder.push(uniform_layer(&mut rng, fan_in, w, Activation::Sine, scale));
        fan_in = w;
    }

    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let embedding: Vec<f64> = (0..arch.conditions * arch.base_dim)
        .map(|_| normal.sample(&mut rng))
        .collect();

    let mut decoder = Vec::new();
    let mut fan_in = latent;
    for &h in &arch.decoder_hidden {
        decoder.push(uniform_layer(&mut rng, fan_in, h, Activation::Sine, 1.0));
        fan_in = h + latent;
    }
    decoder.push(uniform_layer(
        &mut rng,
        fan_in,
        arch.input_dim,
        arch.decoder_output,
        1.0,
    ));

    let hidden = &arch.classifier_hidden;
    let adv_classifier = init_mlp(
        &mut rng,
        arch.fiber_dim,
        hidden,
        arch.conditions,
        Activation::Relu,
        Activation::Identity,
    );
    let cond_classifier = init_mlp(
        &mut rng,
        arch.input_dim,
        hidden,
        arch.conditions,
        Activation::Relu,
        Activation::Identity,
    );
    let discriminator = init_mlp(
        &mut rng,
        arch.input_dim,
        hidden,
        1,
        Activation::Relu,
        Activation::Identity,
    );

    Ok(FaeModel {
        arch: arch.clone(),
        encoder,
        embedding: Tensor::from_parts(vec![arch.conditions, arch.base_dim], embedding),
        decoder,
        adv_classifier,
        cond_classifier,
        discriminator,
    })
}

fn check_chain(name: &str, layers: &[DenseLayer], input: usize, output: usize) -> Result<()> {
    let mut expected = input;
    for (i, l) in layers.iter().enumerate() {
        if l.input_dim() != expected || l.bias.len() != l.output_dim() {
            return Err(Error::shape(
                "fae_model",
                format!("{name} layer {i} has input {} (expected {expected})", l.input_dim()),
            ));
        }
        expected = l.output_dim();
    }
    if layers.is_empty() || expected != output {
        return Err(Error::shape(
            "fae_model",
            format!("{name} ends with width {expected}, expected {output}"),
        ));
    }
    Ok(())
}

impl FaeModel {
    /// Checks that every parameter shape agrees with the architecture.
    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        a.validate()?;
        check_chain("encoder", &self.encoder, a.input_dim, a.fiber_dim)?;
        if self.embedding.shape() != [a.conditions, a.base_dim] {
            return Err(Error::shape(
                "fae_model",
                format!("embedding table has shape {:?}", self.embedding.shape()),
            ));
        }
        let latent = a.latent_dim();
        let mut expected = latent;
        for (i, l) in self.decoder.iter().enumerate() {
            if l.input_dim() != expected {
                return Err(Error::shape(
                    "fae_model",
                    format!("decoder layer {i} has input {} (expected {expected})", l.input_dim()),
                ));
            }
            expected = l.output_dim() + latent;
        }
        if self.decoder.last().map(|l| l.output_dim()) != Some(a.input_dim) {
            return Err(Error::shape("fae_model", "decoder output width differs from D"));
        }
        check_chain("adv_classifier", &self.adv_classifier, a.fiber_dim, a.conditions)?;
        check_chain("cond_classifier", &self.cond_classifier, a.input_dim, a.conditions)?;
        check_chain("discriminator", &self.discriminator, a.input_dim, 1)?;
        Ok(())
    }

    pub fn group(&self, group: ParamGroup) -> Vec<&Tensor> {
        fn layers(ls: &[DenseLayer]) -> Vec<&Tensor> {
            ls.iter().flat_map(|l| [&l.weights, &l.bias]).collect()
        }
        match group {
            ParamGroup::Encoder => layers(&self.encoder),
            ParamGroup::Embedding => vec![&self.embedding],
            ParamGroup::Decoder => layers(&self.decoder),
            ParamGroup::AdvClassifier => layers(&self.adv_classifier),
            ParamGroup::CondClassifier => layers(&self.cond_classifier),
            ParamGroup::Discriminator => layers(&self.discriminator),
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        fn layers(ls: &mut [DenseLayer]) -> Vec<&mut Tensor> {
            ls.iter_mut()
                .flat_map(|l| [&mut l.weights, &mut l.bias])
                .collect()
        }
        match group {
            ParamGroup::Encoder => layers(&mut self.encoder),
            ParamGroup::Embedding => vec![&mut self.embedding],
            ParamGroup::Decoder => layers(&mut self.decoder),
            ParamGroup::AdvClassifier => layers(&mut self.adv_classifier),
            ParamGroup::CondClassifier => layers(&mut self.cond_classifier),
            ParamGroup::Discriminator => layers(&mut self.discriminator),
        }
    }

    /// Mutable views of several groups at once, always in [`ParamGroup::ALL`]
    /// order regardless of the order of `groups`.
    pub fn groups_mut(&mut self, groups: &[ParamGroup]) -> Vec<&mut Tensor> {
        fn layers<'a>(out: &mut Vec<&'a mut Tensor>, ls: &'a mut [DenseLayer]) {
            out.extend(ls.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias]));
        }
        let FaeModel {
            encoder,
            embedding,
            decoder,
            adv_classifier,
            cond_classifier,
            discriminator,
            ..
        } = self;
        let mut out = Vec::new();
        if groups.contains(&ParamGroup::Encoder) {
            layers(&mut out, encoder);
        }
        if groups.contains(&ParamGroup::Embedding) {
            out.push(embedding);
        }
        if groups.contains(&ParamGroup::Decoder) {
            layers(&mut out, decoder);
        }
        if groups.contains(&ParamGroup::AdvClassifier) {
            layers(&mut out, adv_classifier);
        }
        if groups.contains(&ParamGroup::CondClassifier) {
            layers(&mut out, cond_classifier);
        }
        if groups.contains(&ParamGroup::Discriminator) {
            layers(&mut out, discriminator);
        }
        out
    }

    /// Little-endian bytes of one parameter group, for bit-exact comparisons.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        self.group(group).iter().flat_map(|t| t.to_le_bytes()).collect()
    }

    pub fn parameter_bytes(&self) -> Vec<u8> {
        ParamGroup::ALL.iter().flat_map(|&g| self.group_bytes(g)).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::shape(
                "fae_model",
                format!("sample has {} features, model expects {}", x.len(), self.arch.input_dim),
            ));
        }
        Ok(())
    }

    /// Fiber coordinates `f = Φ₁(X)`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let batch = Tensor::vector(x.to_vec())?;
        Ok(self.encode_batch(&batch)?.into_data())
    }

    /// Encodes each row of `x` (`N×D`).
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = bind_layers(&mut tape, &self.encoder, false);
        let input = tape.constant(x.clone());
        let f = mlp_forward(&mut tape, &vars, input)?;
        Ok(tape.value(f).clone())
    }

    /// Base coordinates `b = Φ₂(c)`: row `c` of the embedding table.
    pub fn embed(&self, condition: usize) -> Result<Vec<f64>> {
        if condition >= self.arch.conditions {
            return Err(Error::OutOfRange {
                what: "condition id",
                detail: format!("{condition} with K = {}", self.arch.conditions),
            });
        }
        Ok(self.embedding.row(condition).to_vec())
    }

    /// Reconstruction `Ψ(f, b)`. Fiber coordinates outside `[-1, 1]` are
    /// clamped (with a warning) before decoding.
    pub fn decode(&self, f: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.arch.fiber_dim || b.len() != self.arch.base_dim {
            return Err(Error::shape(
                "decode",
                format!(
                    "latent point ({}, {}) vs model ({}, {})",
                    f.len(),
                    b.len(),
                    self.arch.fiber_dim,
                    self.arch.base_dim
                ),
            ));
        }
        if f.iter().any(|v| v.abs() > 1.0) {
            log::warn!("fiber coordinates {f:?} leave [-1, 1]; clamping before decoding");
        }
        let z: Vec<f64> = f.iter().chain(b).copied().collect();
        let z = Tensor::matrix(1, z.len(), z)?;
        Ok(self.decode_latent_batch(&z)?.into_data())
    }

    /// Decodes each row `(f, b)` of `z` (`N×(m+n)`), clamping fibers.
    pub fn decode_latent_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = bind_layers(&mut tape, &self.decoder, false);
        let z = tape.constant(z.clone());
        let out = decode_latent(&mut tape, &vars, self.arch.fiber_dim, z)?;
        Ok(tape.value(out).clone())
    }

    /// Reconstructs samples under their own conditions.
    pub fn reconstruct(&self, x: &Tensor, conditions: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, self, &[]);
        let input = tape.constant(x.clone());
        let out = vars.reconstruct(&mut tape, input, conditions)?;
        Ok(tape.value(out).clone())
    }

    pub fn discriminator_prob(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        discriminator_prob(&self.discriminator, x)
    }
}

/// Decoder forward pass on `z = (f, b)` rows; `f` occupies the first
/// `fiber_dim` columns and is clamped to `[-1, 1]`.
pub fn decode_latent(tape: &mut Tape, layers: &[LayerVars], fiber_dim: usize, z: Var) -> Result<Var> {
    let cols = tape.value(z).cols();
    let z = if fiber_dim < cols {
        let f = tape.slice(z, 1, 0, fiber_dim)?;
        let f = tape.clamp(f, -1.0, 1.0)?;
        let b = tape.slice(z, 1, fiber_dim, cols - fiber_dim)?;
        tape.concat(&[f, b], 1)?
    } else {
        tape.clamp(z, -1.0, 1.0)?
    };
    let mut h = layers[0].forward(tape, z)?;
    for layer in &layers[1..] {
        let input = tape.concat(&[h, z], 1)?;
        h = layer.forward(tape, input)?;
    }
    Ok(h)
}

/// Unnormalized class scores; the loss applies log-softmax.
pub fn classifier_logits(layers: &[DenseLayer], input: &[f64]) -> Result<Vec<f64>> {
    match layers.first() {
        Some(l) if l.input_dim() == input.len() => {}
        _ => {
            return Err(Error::shape(
                "classifier_logits",
                format!("input of length {} does not fit the first layer", input.len()),
            ))
        }
    }
    let mut tape = Tape::new();
    let vars = bind_layers(&mut tape, layers, false);
    let x = tape.constant(Tensor::vector(input.to_vec())?);
    let out = mlp_forward(&mut tape, &vars, x)?;
    Ok(tape.value(out).data().to_vec())
}

/// Probability that `x` is a real sample: sigmoid of the discriminator
/// logit.
pub fn discriminator_prob(layers: &[DenseLayer], x: &[f64]) -> Result<f64> {
    let logit = classifier_logits(layers, x)?;
    if logit.len() != 1 {
        return Err(Error::shape("discriminator_prob", "discriminator must output one logit"));
    }
    Ok(sigmoid(logit[0]))
}

/// A [`FaeModel`] bound onto a tape, with gradients tracked only for the
/// selected groups.
pub struct ModelVars {
    pub fiber_dim: usize,
    pub conditions: usize,
    pub encoder: Vec<LayerVars>,
    pub embedding: Var,
    pub decoder: Vec<LayerVars>,
    pub adv_classifier: Vec<LayerVars>,
    pub cond_classifier: Vec<LayerVars>,
    pub discriminator: Vec<LayerVars>,
}

impl ModelVars {
    pub fn bind(tape: &mut Tape, model: &FaeModel, trainable: &[ParamGroup]) -> Self {
        let t = |g: ParamGroup| trainable.contains(&g);
        let embedding = if t(ParamGroup::Embedding) {
            tape.parameter(model.embedding.clone())
        } else {
            tape.constant(model.embedding.clone())
        };
        ModelVars {
            fiber_dim: model.arch.fiber_dim,
            conditions: model.arch.conditions,
            encoder: bind_layers(tape, &model.encoder, t(ParamGroup::Encoder)),
            embedding,
            decoder: bind_layers(tape, &model.decoder, t(ParamGroup::Decoder)),
            adv_classifier: bind_layers(tape, &model.adv_classifier, t(ParamGroup::AdvClassifier)),
            cond_classifier: bind_layers(tape, &model.cond_classifier, t(ParamGroup::CondClassifier)),
            discriminator: bind_layers(tape, &model.discriminator, t(ParamGroup::Discriminator)),
        }
    }

    /// Vars in the same order as [`FaeModel::group`].
    pub fn vars(&self, group: ParamGroup) -> Vec<Var> {
        let layers = |ls: &[LayerVars]| ls.iter().flat_map(|l| [l.weights, l.bias]).collect();
        match group {
            ParamGroup::Encoder => layers(&self.encoder),
            ParamGroup::Embedding => vec![self.embedding],
            ParamGroup::Decoder => layers(&self.decoder),
            ParamGroup::AdvClassifier => layers(&self.adv_classifier),
            ParamGroup::CondClassifier => layers(&self.cond_classifier),
            ParamGroup::Discriminator => layers(&self.discriminator),
        }
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        mlp_forward(tape, &self.encoder, x)
    }

    pub fn embed(&self, tape: &mut Tape, conditions: &[usize]) -> Result<Var> {
        let onehot = one_hot(conditions, self.conditions)?;
        let onehot = tape.constant(onehot);
        tape.matmul(onehot, self.embedding)
    }

    pub fn decode(&self, tape: &mut Tape, f: Var, b: Var) -> Result<Var> {
        let z = tape.concat(&[f, b], 1)?;
        decode_latent(tape, &self.decoder, self.fiber_dim, z)
    }

    pub fn reconstruct(&self, tape: &mut Tape, x: Var, conditions: &[usize]) -> Result<Var> {
        if tape.value(x).rows() != conditions.len() {
            return Err(Error::shape("reconstruct", "one condition per sample required"));
        }
        let f = self.encode(tape, x)?;
        let b = self.embed(tape, conditions)?;
        self.decode(tape, f, b)
    }
}

/// `N×K` indicator matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty label batch".into()));
    }
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::OutOfRange {
                what: "condition id",
                detail: format!("{c} with K = {classes}"),
            });
        }
        data[i * classes + c] = 1.0;
    }
    Ok(Tensor::from_parts(vec![labels.len(), classes], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;

    fn small_arch() -> FaeArchitecture {
        let mut a = FaeArchitecture::new(6, 2, 2, 3);
        a.encoder_hidden = vec![8];
        a.decoder_hidden = vec![8, 8];
        a.classifier_hidden = vec![5];
        a
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = small_arch();
        let a = init_model(&arch, 11).unwrap();
        let b = init_model(&arch, 11).unwrap();
        let c = init_model(&arch, 12).unwrap();
        assert_eq!(a.parameter_bytes(), b.parameter_bytes());
        assert_ne!(a.parameter_bytes(), c.parameter_bytes());
        a.validate().unwrap();
        for layers in [&a.encoder, &a.decoder, &a.adv_classifier, &a.cond_classifier, &a.discriminator] {
            for l in layers.iter() {
                let bound = (6.0 / l.input_dim() as f64).sqrt();
                assert!(l.weights.data().iter().all(|w| w.abs() <= bound));
            }
        }
    }

    #[test]
    fn omega0_scales_only_the_first_encoder_layer() {
        let mut arch = small_arch();
        let base = init_model(&arch, 3).unwrap();
        arch.omega0 = 30.0;
        let scaled = init_model(&arch, 3).unwrap();
        for (w0, w1) in base.encoder[0].weights.data().iter().zip(scaled.encoder[0].weights.data()) {
            assert!((30.0 * w0 - w1).abs() < 1e-12);
        }
        assert_eq!(base.encoder[1], scaled.encoder[1]);
    }

    #[test]
    fn encoder_output_lies_in_the_cube() {
        let model = init_model(&small_arch(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-20.0..20.0)).collect();
            let f = model.encode(&x).unwrap();
            assert_eq!(f.len(), 2);
            assert!(f.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(f, model.encode(&x).unwrap());
        }
        assert!(model.encode(&[0.0; 5]).is_err());
    }

    #[test]
    fn zero_weight_encoder_outputs_sine_of_bias() {
        let mut model = init_model(&small_arch(), 5).unwrap();
        model.encoder.truncate(1);
        model.encoder[0] = DenseLayer::new(
            Tensor::zeros(&[2, 6]),
            Tensor::vector(vec![0.3, -1.2]).unwrap(),
            Activation::Sine,
        )
        .unwrap();
        let f = model.encode(&[0.4; 6]).unwrap();
        assert_eq!(f, vec![0.3f64.sin(), (-1.2f64).sin()]);
    }

    #[test]
    fn embedding_lookup() {
        let mut model = init_model(&small_arch(), 5).unwrap();
        model.embedding.data_mut()[..2].copy_from_slice(&[0.1, -0.2]);
        assert_eq!(model.embed(0).unwrap(), vec![0.1, -0.2]);
        assert_ne!(model.embed(1).unwrap(), model.embed(2).unwrap());
        assert!(matches!(model.embed(3), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn identity_decoder_layer_gives_sigmoid_of_latent() {
        let mut arch = small_arch();
        arch.input_dim = 4;
        arch.decoder_hidden = vec![];
        let mut model = init_model(&arch, 2).unwrap();
        model.decoder = vec![DenseLayer::new(
            Tensor::identity(4),
            Tensor::zeros(&[4]),
            Activation::Sigmoid,
        )
        .unwrap()];
        let out = model.decode(&[0.5, -0.25], &[2.0, -3.0]).unwrap();
        let expect: Vec<f64> = [0.5, -0.25, 2.0, -3.0].iter().map(|&v| sigmoid(v)).collect();
        assert_eq!(out, expect);
        assert_eq!(out, model.decode(&[0.5, -0.25], &[2.0, -3.0]).unwrap());
        assert!(model.decode(&[0.5], &[2.0, -3.0]).is_err());
    }

    #[test]
    fn decode_clamps_out_of_cube_fibers() {
        let model = init_model(&small_arch(), 2).unwrap();
        let b = [0.2, 0.1];
        assert_eq!(
            model.decode(&[1.7, -3.0], &b).unwrap(),
            model.decode(&[1.0, -1.0], &b).unwrap()
        );
        let out = model.decode(&[0.3, 0.9], &b).unwrap();
        assert!(out.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn decoder_jacobian_matches_finite_differences() {
        let model = init_model(&small_arch(), 9).unwrap();
        let z0 = [0.3, -0.4, 0.05, 0.12];
        for out_idx in 0..6 {
            let mut tape = Tape::new();
            let vars = bind_layers(&mut tape, &model.decoder, false);
            let z = tape.parameter(Tensor::matrix(1, 4, z0.to_vec()).unwrap());
            let y = decode_latent(&mut tape, &vars, 2, z).unwrap();
            let pick = tape.slice(y, 1, out_idx, 1).unwrap();
            let s = tape.sum(pick).unwrap();
            let g = tape.backward(s).unwrap().wrt(z);
            let fd = finite_difference_gradient(
                |zz| Ok(model.decode(&zz[..2], &zz[2..])?[out_idx]),
                &z0,
                1e-5,
            )
            .unwrap();
            for (a, n) in g.data().iter().zip(&fd) {
                assert!((a - n).abs() / n.abs().max(1.0) < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn classifier_with_identity_layer_returns_input() {
        let layer = DenseLayer::new(Tensor::identity(3), Tensor::zeros(&[3]), Activation::Identity).unwrap();
        let logits = classifier_logits(std::slice::from_ref(&layer), &[0.2, -1.0, 4.0]).unwrap();
        assert_eq!(logits, vec![0.2, -1.0, 4.0]);
        assert!(classifier_logits(&[layer], &[1.0]).is_err());
    }

    #[test]
    fn discriminator_range() {
        let mut model = init_model(&small_arch(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let p = model.discriminator_prob(&x).unwrap();
            assert!(p > 0.0 && p < 1.0);
            assert_eq!(p, model.discriminator_prob(&x).unwrap());
        }
        let last = model.discriminator.last_mut().unwrap();
        last.weights = Tensor::zeros(last.weights.shape());
        last.bias = Tensor::zeros(last.bias.shape());
        assert_eq!(model.discriminator_prob(&[0.3; 6]).unwrap(), 0.5);
    }

    #[test]
    fn gradient_reversal_layer() {
        let grl = GradientReversal::new(2.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.parameter(Tensor::vector(vec![1.5, -2.0]).unwrap());
        let y = grl.apply(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0]);
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[-2.0, -2.0]);

        let zero = GradientReversal::new(0.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.parameter(Tensor::vector(vec![1.5, -2.0]).unwrap());
        let y = zero.apply(&mut tape, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().wrt(x);
        assert!(g.data().iter().all(|v| *v == 0.0));
        assert!(GradientReversal::new(-1.0).is_err());
    }
}
