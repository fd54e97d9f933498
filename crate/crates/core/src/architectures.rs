//! Declarative model specifications, the named presets, and the runtime
//! network that executes a specification on a tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::error::{contract, Error, Result};
use crate::layers::{
    self, soft_pca_losses, AdditiveLayer, Bindings, LinearLayer, PcaGradient, PcaLayer, PcaSchedule, SoftPcaLayer,
    LEAKY_SLOPE,
};

/// Hidden width of every additive sub-network.
pub const ADDITIVE_HIDDEN: usize = 8;

/// One element of a model's layer sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        input: usize,
        output: usize,
    },
    LeakyRelu {
        alpha: f64,
    },
    Truncate {
        level: f64,
    },
    Pca {
        input: usize,
        k: usize,
        schedule: PcaSchedule,
        #[serde(default)]
        gradient: PcaGradient,
    },
    SoftPca {
        input: usize,
        k: usize,
        var_weight: f64,
        orth_weight: f64,
        freeze_epoch: Option<usize>,
    },
    Additive {
        in_dims: Vec<usize>,
        out_dims: Vec<usize>,
    },
    /// Sums its input columns into one output column.
    SumHead {
        width: usize,
    },
    /// A `p x k` projection estimated once by PCA on a held-out slice of the
    /// training inputs and never updated afterwards.
    FixedProjection {
        input: usize,
        k: usize,
    },
    /// Linear encoder `p -> k` trained jointly with a linear decoder whose
    /// reconstruction MSE enters the auxiliary loss.
    Encoder {
        input: usize,
        k: usize,
        recon_weight: f64,
    },
}

impl LayerSpec {
    /// Output width given the incoming width, or a contract error when the
    /// widths do not chain.
    pub fn output_width(&self, width: usize) -> Result<usize> {
        let expect = |want: usize| -> Result<()> {
            contract!(want == width, "{} expects width {want}, got {width}", self.kind());
            Ok(())
        };
        Ok(match self {
            LayerSpec::Linear { input, output } => {
                expect(*input)?;
                contract!(*output > 0, "linear layer needs a positive output width");
                *output
            }
            LayerSpec::LeakyRelu { .. } | LayerSpec::Truncate { .. } => width,
            LayerSpec::Pca { input, k, .. }
            | LayerSpec::SoftPca { input, k, .. }
            | LayerSpec::FixedProjection { input, k }
            | LayerSpec::Encoder { input, k, .. } => {
                expect(*input)?;
                contract!(
                    *k >= 1 && k <= input,
                    "{} needs 1 <= k <= input (k={k}, input={input})",
                    self.kind()
                );
                *k
            }
            LayerSpec::Additive { in_dims, out_dims } => {
                layers::validate_partition(in_dims, out_dims)?;
                expect(in_dims.iter().sum())?;
                out_dims.iter().sum()
            }
            LayerSpec::SumHead { width: w } => {
                expect(*w)?;
                1
            }
        })
    }

    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Truncate { .. } => "truncate",
            LayerSpec::Pca { .. } => "pca",
            LayerSpec::SoftPca { .. } => "soft_pca",
            LayerSpec::Additive { .. } => "additive",
            LayerSpec::SumHead { .. } => "sum_head",
            LayerSpec::FixedProjection { .. } => "fixed_projection",
            LayerSpec::Encoder { .. } => "encoder",
        }
    }

    /// Number of trainable scalars this layer owns.
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Linear { input, output } => (input + 1) * output,
            LayerSpec::SoftPca { input, k, .. } => input * k,
            LayerSpec::Additive { in_dims, out_dims } => in_dims.iter().zip(out_dims).map(|(i, o)| (i + 1) * o).sum(),
            LayerSpec::Encoder { input, k, .. } => (input + 1) * k + (k + 1) * input,
            _ => 0,
        }
    }
}

/// Residual variable-selection branch: the network sees `[X C, (X − X P Pᵀ) Q]`
/// where `C` is a scheduled PCA projection and `P = √p · C` has orthonormal
/// columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfannBranch {
    pub k: usize,
    pub m: usize,
    pub l1_weight: f64,
    pub schedule: PcaSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Width of the observed input (`p`, or the factor count for oracle models).
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    /// The model consumes the latent factors instead of `X`.
    #[serde(default)]
    pub aux_inputs: bool,
    #[serde(default)]
    pub residual_branch: Option<GfannBranch>,
}

impl ModelSpec {
    /// Width entering the layer sequence.
    pub fn sequence_input_width(&self) -> usize {
        match &self.residual_branch {
            Some(b) => b.k + b.m,
            None => self.input_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        let branch = self.residual_branch.as_ref().map_or(0, |b| (self.input_dim + 1) * b.m);
        branch + self.layers.iter().map(LayerSpec::param_count).sum::<usize>()
    }
}

/// Checks that adjacent widths chain and the model ends in one column.
pub fn validate_chain(spec: &ModelSpec) -> Result<()> {
    contract!(spec.input_dim > 0, "model input width must be positive");
    contract!(!spec.layers.is_empty(), "model has no layers");
    if let Some(b) = &spec.residual_branch {
        contract!(
            b.k >= 1 && b.k <= spec.input_dim && b.m >= 1,
            "residual branch needs 1 <= k <= p and m >= 1"
        );
        contract!(!spec.aux_inputs, "a residual branch needs the observed inputs");
        b.schedule.validate()?;
    }
    let mut width = spec.sequence_input_width();
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::Pca { schedule, .. } = layer {
            schedule.validate()?;
        }
        width = layer
            .output_width(width)
            .map_err(|e| Error::Contract(format!("layer {i}: {e}")))?;
    }
    contract!(width == 1, "model must end in exactly one output column, got {width}");
    Ok(())
}

/// The named architectures.
pub const PRESETS: [&str; 13] = [
    "vanillaNN",
    "oracleNN",
    "FAR_NN",
    "SPCA_NN",
    "NN_SPCA_NN",
    "PCA_NN_PCA_ADD",
    "SPCA_NN_SPCA_ADD",
    "GFANN",
    "autoencoder",
    "PCA_NN_PCA",
    "SPCA_NN_SPCA",
    "PCA_NN_ADD_PCA",
    "SPCA_NN_ADD_SPCA",
];

/// Knobs shared by presets that are not part of the `(p, k, width, depth)`
/// signature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PresetOptions {
    pub schedule: PcaSchedule,
    pub gradient: PcaGradient,
    pub var_weight: f64,
    pub orth_weight: f64,
    pub freeze_epoch: Option<usize>,
    pub gfann_m: usize,
    pub l1_weight: f64,
    pub recon_weight: f64,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self {
            schedule: PcaSchedule::default(),
            gradient: PcaGradient::Frozen,
            var_weight: 1e-3,
            orth_weight: 1e-2,
            freeze_epoch: Some(15),
            gfann_m: 10,
            l1_weight: 1e-4,
            recon_weight: 1.0,
        }
    }
}

fn mlp(layers: &mut Vec<LayerSpec>, input: usize, width: usize, depth: usize) {
    let mut w = input;
    for _ in 0..depth {
        layers.push(LayerSpec::Linear {
            input: w,
            output: width,
        });
        layers.push(LayerSpec::LeakyRelu { alpha: LEAKY_SLOPE });
        w = width;
    }
}

fn head(layers: &mut Vec<LayerSpec>, input: usize) {
    layers.push(LayerSpec::Linear { input, output: 1 });
}

/// `blocks` sub-networks of shape `in_i -> 8 -> 8 -> 1` summed into one output.
fn additive_stack(layers: &mut Vec<LayerSpec>, in_dims: Vec<usize>) {
    let j = in_dims.len();
    let hidden = vec![ADDITIVE_HIDDEN; j];
    layers.push(LayerSpec::Additive {
        in_dims,
        out_dims: hidden.clone(),
    });
    layers.push(LayerSpec::LeakyRelu { alpha: LEAKY_SLOPE });
    layers.push(LayerSpec::Additive {
        in_dims: hidden.clone(),
        out_dims: hidden.clone(),
    });
    layers.push(LayerSpec::LeakyRelu { alpha: LEAKY_SLOPE });
    layers.push(LayerSpec::Additive {
        in_dims: hidden,
        out_dims: vec![1; j],
    });
    layers.push(LayerSpec::SumHead { width: j });
}

/// Splits `width` into `parts` contiguous blocks whose sizes differ by at most one.
fn even_partition(width: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| width / parts + usize::from(i < width % parts))
        .collect()
}

/// Builds a named architecture. Tokens read left to right: `PCA`/`SPCA` are
/// (Soft) PCA layers of width `k`, `NN` is `depth` Linear+LeakyReLU layers of
/// width `width`, `ADD` is an additive stack of singleton sub-networks.
pub fn build_preset(
    name: &str,
    p: usize,
    k: usize,
    width: usize,
    depth: usize,
    opts: &PresetOptions,
) -> Result<ModelSpec> {
    contract!(k >= 1, "factor dimension must be positive");
    contract!(k <= p, "factor dimension {k} exceeds input dimension {p}");
    contract!(width >= 1 && depth >= 1, "width and depth must be positive");
    let pca = |input: usize| LayerSpec::Pca {
        input,
        k,
        schedule: opts.schedule.clone(),
        gradient: opts.gradient,
    };
    let spca = |input: usize| LayerSpec::SoftPca {
        input,
        k,
        var_weight: opts.var_weight,
        orth_weight: opts.orth_weight,
        freeze_epoch: opts.freeze_epoch,
    };
    let mut layers = Vec::new();
    let mut input_dim = p;
    let mut aux_inputs = false;
    let mut residual_branch = None;
    match name {
        "vanillaNN" => {
            mlp(&mut layers, p, width, depth);
            head(&mut layers, width);
        }
        "oracleNN" => {
            input_dim = k;
            aux_inputs = true;
            mlp(&mut layers, k, width, depth);
            head(&mut layers, width);
        }
        "FAR_NN" => {
            layers.push(LayerSpec::FixedProjection { input: p, k });
            mlp(&mut layers, k, width, depth);
            head(&mut layers, width);
        }
        "SPCA_NN" => {
            layers.push(spca(p));
            mlp(&mut layers, k, width, depth);
            head(&mut layers, width);
        }
        "NN_SPCA_NN" => {
            mlp(&mut layers, p, width, 1);
            contract!(k <= width, "factor dimension {k} exceeds hidden width {width}");
            layers.push(spca(width));
            mlp(&mut layers, k, width, depth);
            head(&mut layers, width);
        }
        "PCA_NN_PCA_ADD" | "SPCA_NN_SPCA_ADD" | "PCA_NN_PCA" | "SPCA_NN_SPCA" => {
            contract!(k <= width, "factor dimension {k} exceeds hidden width {width}");
            let factor = |input: usize| {
                if name.starts_with("PCA") {
                    pca(input)
                } else {
                    spca(input)
                }
            };
            layers.push(factor(p));
            mlp(&mut layers, k, width, depth);
            layers.push(factor(width));
            if name.ends_with("_ADD") {
                additive_stack(&mut layers, vec![1; k]);
            } else {
                head(&mut layers, k);
            }
        }
        "PCA_NN_ADD_PCA" | "SPCA_NN_ADD_SPCA" => {
            contract!(k <= width, "factor dimension {k} exceeds hidden width {width}");
            let factor = |input: usize| {
                if name.starts_with("PCA") {
                    pca(input)
                } else {
                    spca(input)
                }
            };
            layers.push(factor(p));
            mlp(&mut layers, k, width, depth);
            let blocks = even_partition(width, k);
            let hidden = vec![ADDITIVE_HIDDEN; k];
            layers.push(LayerSpec::Additive {
                in_dims: blocks,
                out_dims: hidden.clone(),
            });
            layers.push(LayerSpec::LeakyRelu { alpha: LEAKY_SLOPE });
            layers.push(LayerSpec::Additive {
                in_dims: hidden.clone(),
                out_dims: hidden,
            });
            layers.push(LayerSpec::LeakyRelu { alpha: LEAKY_SLOPE });
            layers.push(factor(ADDITIVE_HIDDEN * k));
            head(&mut layers, k);
        }
        "GFANN" => {
            contract!(opts.gfann_m >= 1, "residual width m must be positive");
            residual_branch = Some(GfannBranch {
                k,
                m: opts.gfann_m,
                l1_weight: opts.l1_weight,
                schedule: opts.schedule.clone(),
            });
            mlp(&mut layers, k + opts.gfann_m, width, depth);
            head(&mut layers, width);
        }
        "autoencoder" => {
            layers.push(LayerSpec::Encoder {
                input: p,
                k,
                recon_weight: opts.recon_weight,
            });
            mlp(&mut layers, k, width, depth);
            head(&mut layers, width);
        }
        other => {
            return Err(Error::Contract(format!("unknown preset {other:?}")));
        }
    }
    let spec = ModelSpec {
        name: name.to_string(),
        input_dim,
        layers,
        aux_inputs,
        residual_branch,
    };
    validate_chain(&spec)?;
    Ok(spec)
}

/// Runtime state of one layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerState {
    Linear(LinearLayer),
    LeakyRelu {
        alpha: f64,
    },
    Truncate {
        level: f64,
    },
    Pca(PcaLayer),
    SoftPca(SoftPcaLayer),
    Additive(AdditiveLayer),
    SumHead,
    FixedProjection {
        input: usize,
        k: usize,
        projection: Option<Matrix>,
    },
    Encoder {
        encoder: LinearLayer,
        decoder: LinearLayer,
        recon_weight: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchState {
    pub pca: PcaLayer,
    pub selector: LinearLayer,
    pub l1_weight: f64,
}

/// Whether a forward pass is a training step or an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Training batch of a 1-based epoch.
    Train { epoch: usize, first_batch: bool },
    /// No recomputes, no auxiliary losses.
    Eval,
}

/// Nodes produced by one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    pub prediction: NodeId,
    /// Weighted sum of all auxiliary losses (1x1; zero outside training).
    pub aux: NodeId,
    pub bindings: Bindings,
}

/// A specification together with its weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    pub spec: ModelSpec,
    pub layers: Vec<LayerState>,
    pub branch: Option<BranchState>,
}

impl Network {
    /// Initializes weights from `seed`. PCA layers draw their perturbations
    /// from streams derived from the seed and their layer index.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        validate_chain(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pca_seed = |index: usize| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1);
        let branch = match &spec.residual_branch {
            Some(b) => Some(BranchState {
                pca: PcaLayer::new(
                    spec.input_dim,
                    b.k,
                    b.schedule.clone(),
                    PcaGradient::Frozen,
                    pca_seed(0),
                )?,
                selector: LinearLayer::new(spec.input_dim, b.m, &mut rng),
                l1_weight: b.l1_weight,
            }),
            None => None,
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            layers.push(match layer {
                LayerSpec::Linear { input, output } => LayerState::Linear(LinearLayer::new(*input, *output, &mut rng)),
                LayerSpec::LeakyRelu { alpha } => LayerState::LeakyRelu { alpha: *alpha },
                LayerSpec::Truncate { level } => LayerState::Truncate { level: *level },
                LayerSpec::Pca {
                    input,
                    k,
                    schedule,
                    gradient,
                } => LayerState::Pca(PcaLayer::new(*input, *k, schedule.clone(), *gradient, pca_seed(i + 1))?),
                LayerSpec::SoftPca {
                    input,
                    k,
                    var_weight,
                    orth_weight,
                    freeze_epoch,
                } => LayerState::SoftPca(SoftPcaLayer::new(
                    *input,
                    *k,
                    *var_weight,
                    *orth_weight,
                    *freeze_epoch,
                    &mut rng,
                )),
                LayerSpec::Additive { in_dims, out_dims } => {
                    LayerState::Additive(AdditiveLayer::new(in_dims, out_dims, &mut rng)?)
                }
                LayerSpec::SumHead { .. } => LayerState::SumHead,
                LayerSpec::FixedProjection { input, k } => LayerState::FixedProjection {
                    input: *input,
                    k: *k,
                    projection: None,
                },
                LayerSpec::Encoder { input, k, recon_weight } => LayerState::Encoder {
                    encoder: LinearLayer::new(*input, *k, &mut rng),
                    decoder: LinearLayer::new(*k, *input, &mut rng),
                    recon_weight: *recon_weight,
                },
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            branch,
        })
    }

    /// Estimates every fixed projection from the first half of the training
    /// inputs. Must run before training when the model has one.
    pub fn prepare(&mut self, train_x: &Matrix) -> Result<()> {
        for layer in &mut self.layers {
            if let LayerState::FixedProjection { input, k, projection } = layer {
                let half = train_x.rows() / 2;
                contract!(half >= 2, "fixed projection needs at least 4 training rows");
                let mut pca = PcaLayer::new(*input, *k, PcaSchedule::Epochs(vec![]), PcaGradient::Frozen, 0)?;
                pca.refit(&train_x.row_range(0, half))?;
                *projection = pca.projection;
            }
        }
        Ok(())
    }

    /// Every trainable matrix, in the order forward passes bind them.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if let Some(b) = &mut self.branch {
            out.extend(b.selector.params_mut());
        }
        for layer in &mut self.layers {
            match layer {
                LayerState::Linear(l) => out.extend(l.params_mut()),
                LayerState::SoftPca(s) => out.push(&mut s.weight),
                LayerState::Additive(a) => {
                    for block in &mut a.blocks {
                        out.extend(block.params_mut());
                    }
                }
                LayerState::Encoder { encoder, decoder, .. } => {
                    out.extend(encoder.params_mut());
                    out.extend(decoder.params_mut());
                }
                _ => {}
            }
        }
        out
    }

    /// Read-only view in the same order as [`Network::params_mut`].
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::new();
        if let Some(b) = &self.branch {
            out.extend([&b.selector.weight, &b.selector.bias]);
        }
        for layer in &self.layers {
            match layer {
                LayerState::Linear(l) => out.extend([&l.weight, &l.bias]),
                LayerState::SoftPca(s) => out.push(&s.weight),
                LayerState::Additive(a) => {
                    for block in &a.blocks {
                        out.extend([&block.weight, &block.bias]);
                    }
                }
                LayerState::Encoder { encoder, decoder, .. } => {
                    out.extend([&encoder.weight, &encoder.bias, &decoder.weight, &decoder.bias]);
                }
                _ => {}
            }
        }
        out
    }

    /// Clips every linear weight and bias (including additive blocks and the
    /// residual selector) to `[-bound, bound]`.
    pub fn clip_linear(&mut self, bound: f64) {
        if let Some(b) = &mut self.branch {
            b.selector.clip(bound);
        }
        for layer in &mut self.layers {
            match layer {
                LayerState::Linear(l) => l.clip(bound),
                LayerState::Additive(a) => a.blocks.iter_mut().for_each(|b| b.clip(bound)),
                _ => {}
            }
        }
    }

    pub fn pca_layers(&self) -> impl Iterator<Item = &PcaLayer> {
        self.branch
            .iter()
            .map(|b| &b.pca)
            .chain(self.layers.iter().filter_map(|l| match l {
                LayerState::Pca(p) => Some(p),
                _ => None,
            }))
    }

    /// Applies the Soft PCA freeze rule for the upcoming epoch.
    pub fn begin_epoch(&mut self, epoch: usize) {
        for layer in &mut self.layers {
            if let LayerState::SoftPca(s) = layer {
                s.update_freeze(epoch);
            }
        }
    }

    /// Runs the model on a batch. `x` is the observed input; `z` the latent
    /// factors (required by oracle models, ignored otherwise).
    pub fn forward(&mut self, tape: &mut Tape, x: &Matrix, z: Option<&Matrix>, mode: Mode) -> Result<ForwardOutput> {
        let training = matches!(mode, Mode::Train { .. });
        let mut bindings = Bindings::new();
        let mut aux_terms: Vec<NodeId> = Vec::new();
        let input = if self.spec.aux_inputs {
            let z = z.ok_or_else(|| Error::Contract(format!("{} needs the latent factors", self.spec.name)))?;
            contract!(
                z.cols() == self.spec.input_dim,
                "{} expects {} factors, got {}",
                self.spec.name,
                self.spec.input_dim,
                z.cols()
            );
            z
        } else {
            contract!(
                x.cols() == self.spec.input_dim,
                "{} expects input width {}, got {}",
                self.spec.name,
                self.spec.input_dim,
                x.cols()
            );
            x
        };
        contract!(input.rows() >= 1, "empty batch");
        let fires = |pca: &PcaLayer| match mode {
            Mode::Train { epoch, first_batch } => pca.fires(epoch, first_batch),
            Mode::Eval => false,
        };
        let mut h = tape.constant(input.clone());

        if let Some(branch) = &mut self.branch {
            let recompute = fires(&branch.pca);
            let factors = branch.pca.forward(tape, h, recompute)?;
            let c = branch.pca.projection.clone().expect("projection set by forward");
            let p = self.spec.input_dim as f64;
            // X P Pᵀ = p · (X C) Cᵀ
            let ct = tape.constant(c.transpose());
            let back = tape.matmul(factors, ct)?;
            let back = tape.scale(back, p)?;
            let residual = tape.sub(h, back)?;
            let selected = branch.selector.forward(tape, residual, &mut bindings)?;
            if training && branch.l1_weight > 0.0 {
                // The weight was bound first; its node is the first slot.
                let q = bindings.slots()[0].expect("selector weight is trainable");
                let l1 = tape.abs_sum(q)?;
                aux_terms.push(tape.scale(l1, branch.l1_weight)?);
            }
            h = tape.concat_cols(&[factors, selected])?;
        }

        for layer in &mut self.layers {
            h = match layer {
                LayerState::Linear(l) => l.forward(tape, h, &mut bindings)?,
                LayerState::LeakyRelu { alpha } => tape.leaky_relu(h, *alpha)?,
                LayerState::Truncate { level } => tape.truncate(h, *level)?,
                LayerState::Pca(pca) => {
                    let recompute = fires(pca);
                    pca.forward(tape, h, recompute)?
                }
                LayerState::SoftPca(s) => {
                    let fwd = s.forward(tape, h, &mut bindings)?;
                    if training && tape.value(h).rows() >= 2 {
                        let losses = soft_pca_losses(tape, h, fwd.projection)?;
                        if s.var_weight != 0.0 {
                            aux_terms.push(tape.scale(losses.variance, s.var_weight)?);
                        }
                        if s.orth_weight != 0.0 {
                            aux_terms.push(tape.scale(losses.orthogonality, s.orth_weight)?);
                        }
                    }
                    fwd.output
                }
                LayerState::Additive(a) => a.forward(tape, h, &mut bindings)?,
                LayerState::SumHead => {
                    let width = tape.value(h).cols();
                    let ones = tape.constant(Matrix::filled(width, 1, 1.0));
                    tape.matmul(h, ones)?
                }
                LayerState::FixedProjection { projection, .. } => {
                    let Some(c) = projection else {
                        return Err(Error::State("fixed projection used before prepare()".into()));
                    };
                    let c = tape.constant(c.clone());
                    tape.matmul(h, c)?
                }
                LayerState::Encoder {
                    encoder,
                    decoder,
                    recon_weight,
                } => {
                    let code = encoder.forward(tape, h, &mut bindings)?;
                    let recon = decoder.forward(tape, code, &mut bindings)?;
                    if training && *recon_weight != 0.0 {
                        let loss = tape.mse(recon, h)?;
                        aux_terms.push(tape.scale(loss, *recon_weight)?);
                    }
                    code
                }
            };
        }

        let mut aux = tape.constant(Matrix::scalar(0.0));
        for term in aux_terms {
            aux = tape.add(aux, term)?;
        }
        Ok(ForwardOutput {
            prediction: h,
            aux,
            bindings,
        })
    }

    /// Predictions for `x` in chunks, with no recomputes or auxiliary losses.
    pub fn predict(&mut self, x: &Matrix, z: Option<&Matrix>) -> Result<Vec<f64>> {
        const CHUNK: usize = 2048;
        let mut out = Vec::with_capacity(x.rows());
        let mut start = 0;
        while start < x.rows() {
            let end = (start + CHUNK).min(x.rows());
            let xb = x.row_range(start, end);
            let zb = z.map(|z| z.row_range(start, end));
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, &xb, zb.as_ref(), Mode::Eval)?;
            out.extend_from_slice(tape.value(fwd.prediction).data());
            start = end;
        }
        Ok(out)
    }
}
