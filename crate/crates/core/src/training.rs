//! Minibatch Adam training with early stopping, plus checkpoint files.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::{BranchState, LayerState, Mode, ModelSpec, Network, PresetOptions};
use crate::autodiff::{Matrix, Tape};
use crate::datagen::Split;
use crate::error::{contract, Error, Result};
use crate::layers::{PcaGradient, PcaSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Weights of the auxiliary losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxWeights {
    pub variance: f64,
    pub orthogonality: f64,
    pub l1: f64,
}

impl Default for AuxWeights {
    fn default() -> Self {
        let o = PresetOptions::default();
        Self {
            variance: o.var_weight,
            orthogonality: o.orth_weight,
            l1: o.l1_weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub pca_schedule: PcaSchedule,
    pub pca_gradient: PcaGradient,
    pub freeze_epoch: Option<usize>,
    pub aux_weights: AuxWeights,
    pub seed: u64,
    pub clip_bound: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 300,
            patience: 20,
            adam: AdamConfig::default(),
            pca_schedule: PcaSchedule::default(),
            pca_gradient: PcaGradient::Frozen,
            freeze_epoch: Some(15),
            aux_weights: AuxWeights::default(),
            seed: 0,
            clip_bound: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.lr.is_finite() && self.lr > 0.0, "learning rate must be positive");
        contract!(self.batch_size >= 1, "batch size must be positive");
        contract!(self.max_epochs >= 1, "max_epochs must be positive");
        contract!(
            (0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2) && self.adam.eps > 0.0,
            "Adam needs betas in [0,1) and a positive epsilon"
        );
        if let Some(b) = self.clip_bound {
            contract!(b > 0.0, "clip bound must be positive");
        }
        self.pca_schedule.validate()
    }

    /// Preset options carrying this configuration's layer settings.
    pub fn preset_options(&self) -> PresetOptions {
        PresetOptions {
            schedule: self.pca_schedule.clone(),
            gradient: self.pca_gradient,
            var_weight: self.aux_weights.variance,
            orth_weight: self.aux_weights.orthogonality,
            freeze_epoch: self.freeze_epoch,
            l1_weight: self.aux_weights.l1,
            ..PresetOptions::default()
        }
    }
}

/// One PCA recompute during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecomputeEvent {
    pub epoch: usize,
    pub batch: usize,
    /// Index among the network's PCA layers (residual branch first).
    pub layer: usize,
    pub explained_variance: f64,
    pub perturbation_rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean squared error over the epoch's training batches.
    pub train_mse: f64,
    pub valid_mse: f64,
    /// Mean weighted auxiliary loss over the epoch's batches.
    pub aux_loss: f64,
    /// Explained variance of each PCA layer at the end of the epoch.
    pub explained_variance: Vec<Option<f64>>,
    /// Seconds spent on the epoch; not serialized so logs stay reproducible.
    #[serde(skip)]
    pub wall_clock: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub recomputes: Vec<RecomputeEvent>,
}

impl TrainLog {
    pub fn valid_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.valid_mse).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation MSE.
    pub network: Network,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_valid_mse: f64,
}

pub fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    fn new(net: &Network, lr: f64, cfg: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = net.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            cfg,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn update(&mut self, params: Vec<&mut Matrix>, grads: &[Option<&Matrix>]) {
        self.step += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.step);
        let c2 = 1.0 - self.cfg.beta2.powi(self.step);
        for (i, (param, grad)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = grad else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * gj;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Row ranges of the shuffled order; a trailing single row joins the
/// previous batch so every batch has a covariance.
fn batch_bounds(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n).step_by(size).map(|s| (s, (s + size).min(n))).collect();
    if out.len() >= 2 && out.last().is_some_and(|&(s, e)| e - s == 1) {
        let (_, e) = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").1 = e;
    }
    out
}

fn needs_covariance(spec: &ModelSpec) -> bool {
    use crate::architectures::LayerSpec;
    spec.residual_branch.is_some()
        || spec
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Pca { .. } | LayerSpec::SoftPca { .. }))
}

/// Trains `spec` on `train`, selecting the epoch with the lowest MSE on
/// `valid` and stopping after `patience` epochs without improvement.
pub fn train(spec: &ModelSpec, train: &Split, valid: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    contract!(
        !train.is_empty() && !valid.is_empty(),
        "training and validation splits must be non-empty"
    );
    if needs_covariance(spec) {
        contract!(
            cfg.batch_size >= 2,
            "batch size must be at least 2 for PCA and Soft PCA layers"
        );
        contract!(
            train.len() >= 2,
            "PCA and Soft PCA layers need at least 2 training rows"
        );
    }
    let mut net = Network::new(spec, cfg.seed)?;
    net.prepare(&train.x)?;
    let mut adam = Adam::new(&net, cfg.lr, cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_BA7C4);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        net.begin_epoch(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut sq_err, mut aux_sum, mut n_batches) = (0.0, 0.0, 0);
        for (b, &(start, end)) in batch_bounds(order.len(), cfg.batch_size).iter().enumerate() {
            let rows = &order[start..end];
            let batch = train.select(rows);
            let before: Vec<usize> = net.pca_layers().map(|p| p.recompute_count).collect();
            let mut tape = Tape::new();
            let fwd = net.forward(
                &mut tape,
                &batch.x,
                batch.z.as_ref(),
                Mode::Train {
                    epoch,
                    first_batch: b == 0,
                },
            )?;
            for (layer, pca) in net.pca_layers().enumerate() {
                if pca.recompute_count > before[layer] {
                    log.recomputes.push(RecomputeEvent {
                        epoch,
                        batch: b,
                        layer,
                        explained_variance: pca.explained_variance.unwrap_or(f64::NAN),
                        perturbation_rounds: pca.last_perturbation_rounds,
                    });
                }
            }
            let target = tape.constant(Matrix::column(&batch.y));
            let fit = tape.mse(fwd.prediction, target)?;
            let loss = tape.add(fit, fwd.aux)?;
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "{}: non-finite loss at epoch {epoch}, batch {b}",
                    spec.name
                )));
            }
            tape.backward(loss)?;
            let grads: Vec<Option<&Matrix>> = fwd
                .bindings
                .slots()
                .iter()
                .map(|s| s.and_then(|id| tape.grad(id)))
                .collect();
            let params = net.params_mut();
            debug_assert_eq!(params.len(), grads.len());
            adam.update(params, &grads);
            if let Some(bound) = cfg.clip_bound {
                net.clip_linear(bound);
            }
            sq_err += tape.scalar(fit)? * rows.len() as f64;
            aux_sum += tape.scalar(fwd.aux)?;
            n_batches += 1;
        }
        let pred = net.predict(&valid.x, valid.z.as_ref())?;
        let valid_mse = mse(&pred, &valid.y);
        if !valid_mse.is_finite() {
            return Err(Error::Numeric(format!(
                "{}: non-finite validation MSE at epoch {epoch}",
                spec.name
            )));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_mse: sq_err / train.len() as f64,
            valid_mse,
            aux_loss: aux_sum / n_batches as f64,
            explained_variance: net.pca_layers().map(|p| p.explained_variance).collect(),
            wall_clock: started.elapsed().as_secs_f64(),
        });
        match &best {
            Some((b, _, _)) if valid_mse >= *b => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((valid_mse, epoch, net.clone()));
                since_best = 0;
            }
        }
    }
    let (best_valid_mse, best_epoch, network) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        network,
        log,
        best_epoch,
        best_valid_mse,
    })
}

/// Version written into every checkpoint.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub weights: Vec<LayerState>,
    pub branch: Option<BranchState>,
    pub train_log: TrainLog,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn new(outcome: &TrainOutcome) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            spec: outcome.network.spec.clone(),
            weights: outcome.network.layers.clone(),
            branch: outcome.network.branch.clone(),
            train_log: outcome.log.clone(),
            best_epoch: outcome.best_epoch,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Parses a checkpoint and checks the weights against the spec.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Format("checkpoint has no format_version".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        ckpt.network()?;
        Ok(ckpt)
    }

    /// Rebuilds the network, rejecting weights that do not fit the spec.
    pub fn network(&self) -> Result<Network> {
        let fresh = Network::new(&self.spec, 0).map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
        let net = Network {
            spec: self.spec.clone(),
            layers: self.weights.clone(),
            branch: self.branch.clone(),
        };
        let same_kinds = fresh.layers.len() == net.layers.len()
            && fresh
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(a, b)| std::mem::discriminant(a) == std::mem::discriminant(b))
            && fresh.branch.is_some() == net.branch.is_some();
        let fresh_shapes: Vec<_> = fresh.params().iter().map(|m| m.shape()).collect();
        let shapes: Vec<_> = net.params().iter().map(|m| m.shape()).collect();
        if !same_kinds || fresh_shapes != shapes {
            return Err(Error::Format("checkpoint weights do not match its spec".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
