//! Trainable building blocks: linear, PCA, Soft PCA and additive layers.
//!
//! Layers own their weights as plain matrices. A forward pass copies the
//! weights onto a [`Tape`] through a [`Bindings`] list, which records the node
//! of every parameter in a fixed order so the optimizer can pick gradients up
//! after `backward`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::eig::{self, SymEigen, Tridiagonal};
use crate::autodiff::{Matrix, NodeId, Tape};
use crate::error::{contract, Error, Result};

/// Default negative slope of LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Gaps at or below this value trigger the covariance perturbation.
pub const STABILITY_THRESHOLD: f64 = 1e-10;
/// Perturbation magnitude relative to the mean covariance diagonal.
pub const PERTURB_SCALE: f64 = 1e-4;
const MAX_PERTURBATIONS: usize = 100;

/// Parameter nodes registered during one forward pass, in the order the
/// owning model enumerates its parameters. Frozen parameters get `None`.
#[derive(Debug, Default)]
pub struct Bindings {
    slots: Vec<Option<NodeId>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, value: &Matrix, trainable: bool) -> NodeId {
        if trainable {
            let id = tape.param(value.clone());
            self.slots.push(Some(id));
            id
        } else {
            self.slots.push(None);
            tape.constant(value.clone())
        }
    }

    pub fn slots(&self) -> &[Option<NodeId>] {
        &self.slots
    }
}

/// Glorot-uniform initialisation, `U(±√(6/(fan_in+fan_out)))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound))
}

/// Affine map `A W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearLayer {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: glorot_uniform(fan_in, fan_out, rng),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn from_parts(weight: Matrix, bias: Matrix) -> Result<Self> {
        contract!(
            bias.rows() == 1 && bias.cols() == weight.cols(),
            "bias must be 1x{}, got {:?}",
            weight.cols(),
            bias.shape()
        );
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, tape: &mut Tape, input: NodeId, bindings: &mut Bindings) -> Result<NodeId> {
        contract!(
            tape.value(input).cols() == self.in_dim(),
            "linear layer expects width {}, got {}",
            self.in_dim(),
            tape.value(input).cols()
        );
        let w = bindings.bind(tape, &self.weight, true);
        let b = bindings.bind(tape, &self.bias, true);
        let xw = tape.matmul(input, w)?;
        tape.add_bias(xw, b)
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.weight, &mut self.bias]
    }

    /// Enforces `‖W‖_max ≤ bound` and `‖b‖_max ≤ bound`.
    pub fn clip(&mut self, bound: f64) {
        for m in self.params_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
        }
    }
}

/// Epochs whose first batch recomputes the default schedule.
pub const DEFAULT_SCHEDULE: [usize; 11] = [1, 3, 5, 7, 9, 11, 13, 15, 20, 30, 40];

/// When a PCA layer refreshes its projection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PcaSchedule {
    /// At the first batch of each listed epoch (1-based).
    Epochs(Vec<usize>),
    /// At every training batch.
    Always(EveryBatch),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EveryBatch {
    EveryBatch,
}

impl Default for PcaSchedule {
    fn default() -> Self {
        PcaSchedule::Epochs(DEFAULT_SCHEDULE.to_vec())
    }
}

impl PcaSchedule {
    pub fn every_batch() -> Self {
        PcaSchedule::Always(EveryBatch::EveryBatch)
    }

    pub fn fires(&self, epoch: usize, first_batch: bool) -> bool {
        match self {
            PcaSchedule::Epochs(epochs) => first_batch && epochs.contains(&epoch),
            PcaSchedule::Always(_) => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let PcaSchedule::Epochs(epochs) = self {
            contract!(
                epochs.windows(2).all(|w| w[0] < w[1]),
                "PCA schedule must be strictly ascending"
            );
            contract!(!epochs.contains(&0), "PCA schedule epochs are 1-based");
        }
        Ok(())
    }
}

/// How gradients treat the PCA projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaGradient {
    /// The projection is a constant; gradients reach the input only.
    #[default]
    Frozen,
    /// On recompute batches, gradients also flow through the eigenvectors.
    Exact,
}

/// Result of decomposing one (possibly perturbed) batch covariance.
#[derive(Clone, Debug)]
pub struct StabilizedEigen {
    /// All eigenvalues (descending) and the leading eigenvectors.
    pub eigen: SymEigen,
    /// Accumulated symmetric perturbation that was added to the covariance.
    pub perturbation: Matrix,
    /// Number of perturbation rounds.
    pub rounds: usize,
}

/// Decomposes `cov`, adding `scale · mean(diag(cov)) · U` (with `U` uniform
/// on `[0,1)`, symmetrized) until every pair of consecutive eigenvalues is
/// more than [`STABILITY_THRESHOLD`] apart.
///
/// `rank_deficient` lets the caller skip the first decomposition when the
/// spectrum is known to contain a repeated zero, which is always the case
/// for a covariance built from fewer rows than columns.
pub fn stabilized_eigen(
    cov: &Matrix,
    k: usize,
    full: bool,
    rank_deficient: bool,
    perturb_scale: f64,
    rng: &mut impl Rng,
) -> Result<StabilizedEigen> {
    let p = cov.rows();
    contract!(k <= p, "cannot take {k} components of a {p}x{p} covariance");
    let mean_diag = cov.trace() / p as f64;
    let step = perturb_scale * mean_diag;
    let mut perturbation = Matrix::zeros(p, p);
    let mut current = cov.clone();
    let mut rounds = 0;
    let mut skip = rank_deficient;
    loop {
        if !skip {
            let eigen = if full {
                eig::eig_sym(&current)?
            } else {
                let tri = Tridiagonal::reduce(&current)?;
                let values = tri.eigenvalues()?;
                if eig::min_eigengap(&values) > STABILITY_THRESHOLD {
                    let vectors = tri.eigenvectors(&values[..k])?;
                    return Ok(StabilizedEigen {
                        eigen: SymEigen { values, vectors },
                        perturbation,
                        rounds,
                    });
                }
                SymEigen {
                    values,
                    vectors: Matrix::zeros(p, 0),
                }
            };
            if full && eig::min_eigengap(&eigen.values) > STABILITY_THRESHOLD {
                return Ok(StabilizedEigen {
                    eigen,
                    perturbation,
                    rounds,
                });
            }
        }
        skip = false;
        if rounds == MAX_PERTURBATIONS {
            return Err(Error::Numeric(format!(
                "covariance still has a repeated eigenvalue after {MAX_PERTURBATIONS} perturbations"
            )));
        }
        let mut noise = Matrix::from_fn(p, p, |_, _| rng.random::<f64>());
        noise.symmetrize_in_place()?;
        perturbation.axpy(step, &noise)?;
        current = cov.add(&perturbation)?;
        rounds += 1;
    }
}

/// Projection onto the leading eigenvectors of the batch covariance,
/// recomputed only when asked (on the scheduled epochs) and constant in
/// between. The stored projection is `eigenvectors[:, :k] / √p`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaLayer {
    pub input_dim: usize,
    pub k: usize,
    pub schedule: PcaSchedule,
    pub gradient: PcaGradient,
    pub projection: Option<Matrix>,
    pub explained_variance: Option<f64>,
    #[serde(default)]
    pub recompute_count: usize,
    #[serde(default)]
    pub last_perturbation_rounds: usize,
    #[serde(skip, default = "default_rng")]
    rng: ChaCha8Rng,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl PcaLayer {
    pub fn new(input_dim: usize, k: usize, schedule: PcaSchedule, gradient: PcaGradient, seed: u64) -> Result<Self> {
        contract!(
            k >= 1 && k <= input_dim,
            "PCA layer needs 1 <= k <= p (k={k}, p={input_dim})"
        );
        schedule.validate()?;
        Ok(Self {
            input_dim,
            k,
            schedule,
            gradient,
            projection: None,
            explained_variance: None,
            recompute_count: 0,
            last_perturbation_rounds: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn is_initialized(&self) -> bool {
        self.projection.is_some()
    }

    /// Whether a training batch recomputes. An uninitialized layer always
    /// does, so a schedule that skips epoch 1 still gets a projection.
    pub fn fires(&self, epoch: usize, first_batch: bool) -> bool {
        !self.is_initialized() || self.schedule.fires(epoch, first_batch)
    }

    /// Signed permutation `Q` (k x k) that relabels new eigenvectors so each
    /// one lands in the slot of the previous component it overlaps most,
    /// pointing the same way. Slots are filled greedily by largest overlap.
    /// `None` when there is no previous projection or `Q` is the identity.
    fn continuity_map(&self, top: &Matrix) -> Option<Matrix> {
        let prev = self.projection.as_ref()?;
        let k = self.k;
        let overlap = prev.t_matmul(top).ok()?;
        let mut pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
        pairs.sort_by(|a, b| {
            overlap
                .get(b.0, b.1)
                .abs()
                .total_cmp(&overlap.get(a.0, a.1).abs())
                .then(a.cmp(b))
        });
        let (mut slot_used, mut comp_used) = (vec![false; k], vec![false; k]);
        let mut q = Matrix::zeros(k, k);
        for (slot, comp) in pairs {
            if slot_used[slot] || comp_used[comp] {
                continue;
            }
            slot_used[slot] = true;
            comp_used[comp] = true;
            q.set(comp, slot, if overlap.get(slot, comp) < 0.0 { -1.0 } else { 1.0 });
        }
        let identity = (0..k).all(|i| q.get(i, i) == 1.0);
        (!identity).then_some(q)
    }

    fn install(&mut self, cov: &Matrix, stab: &StabilizedEigen) -> Result<Matrix> {
        let p = self.input_dim;
        let mut top = stab.eigen.vectors.slice_cols(0, self.k)?;
        if let Some(q) = self.continuity_map(&top) {
            top = top.matmul(&q)?;
        }
        // Rayleigh quotients on the unperturbed covariance.
        let sv = cov.matmul(&top)?;
        let captured: f64 = (0..self.k)
            .map(|c| (0..p).map(|r| top.get(r, c) * sv.get(r, c)).sum::<f64>())
            .sum();
        let total = cov.trace();
        self.explained_variance = Some(if total > 0.0 {
            (captured / total).clamp(0.0, 1.0)
        } else {
            0.0
        });
        self.recompute_count += 1;
        self.last_perturbation_rounds = stab.rounds;
        let projection = top.scale(1.0 / (p as f64).sqrt());
        self.projection = Some(projection.clone());
        Ok(projection)
    }

    /// Recomputes the projection from a batch without touching any tape.
    pub fn refit(&mut self, batch: &Matrix) -> Result<()> {
        contract!(batch.rows() >= 2, "PCA recompute needs at least 2 rows");
        contract!(
            batch.cols() == self.input_dim,
            "PCA layer expects width {}",
            self.input_dim
        );
        let cov = batch.sample_covariance()?;
        let rank_deficient = batch.rows() < self.input_dim;
        let stab = stabilized_eigen(&cov, self.k, false, rank_deficient, PERTURB_SCALE, &mut self.rng)?;
        self.install(&cov, &stab)?;
        Ok(())
    }

    pub fn forward(&mut self, tape: &mut Tape, input: NodeId, recompute: bool) -> Result<NodeId> {
        let a = tape.value(input);
        contract!(
            a.cols() == self.input_dim,
            "PCA layer expects width {}, got {}",
            self.input_dim,
            a.cols()
        );
        if recompute {
            contract!(a.rows() >= 2, "PCA recompute needs at least 2 rows, got {}", a.rows());
            if self.gradient == PcaGradient::Exact {
                let cov_node = tape.sample_covariance(input)?;
                let cov = tape.value(cov_node).clone();
                let stab = stabilized_eigen(&cov, self.k, true, false, PERTURB_SCALE, &mut self.rng)?;
                let decomposed = if stab.rounds > 0 {
                    let noise = tape.constant(stab.perturbation.clone());
                    tape.add(cov_node, noise)?
                } else {
                    cov_node
                };
                let scale = 1.0 / (self.input_dim as f64).sqrt();
                let mut c = tape.eig_top_k(decomposed, self.k, scale)?;
                if let Some(q) = self.continuity_map(tape.value(c)) {
                    let q = tape.constant(q);
                    c = tape.matmul(c, q)?;
                }
                self.install(&cov, &stab)?;
                return tape.matmul(input, c);
            }
            let batch = a.clone();
            self.refit(&batch)?;
        }
        let Some(projection) = &self.projection else {
            return Err(Error::State("PCA layer used before its first recompute".into()));
        };
        let c = tape.constant(projection.clone());
        tape.matmul(input, c)
    }
}

/// Trainable `p x k` projection regularized toward variance preservation and
/// decorrelated outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPcaLayer {
    pub weight: Matrix,
    pub var_weight: f64,
    pub orth_weight: f64,
    pub freeze_epoch: Option<usize>,
    #[serde(default)]
    pub frozen: bool,
}

/// The two auxiliary losses of a Soft PCA layer.
#[derive(Clone, Copy, Debug)]
pub struct SoftPcaLosses {
    pub variance: NodeId,
    pub orthogonality: NodeId,
}

impl SoftPcaLayer {
    pub fn new(
        input_dim: usize,
        k: usize,
        var_weight: f64,
        orth_weight: f64,
        freeze_epoch: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: glorot_uniform(input_dim, k, rng),
            var_weight,
            orth_weight,
            freeze_epoch,
            frozen: false,
        }
    }

    /// Freezes the layer once `epoch` is past the freeze epoch.
    pub fn update_freeze(&mut self, epoch: usize) {
        if let Some(fe) = self.freeze_epoch {
            if epoch > fe {
                self.frozen = true;
            }
        }
    }

    /// `1/√p`, the same normalization the PCA layer applies to its
    /// eigenvectors.
    pub fn output_scale(&self) -> f64 {
        1.0 / (self.weight.rows() as f64).sqrt()
    }

    /// Returns the raw projection `X W`, on which the auxiliary losses are
    /// defined, and the layer output `X W / √p`.
    pub fn forward(&self, tape: &mut Tape, input: NodeId, bindings: &mut Bindings) -> Result<SoftPcaForward> {
        contract!(
            tape.value(input).cols() == self.weight.rows(),
            "Soft PCA layer expects width {}, got {}",
            self.weight.rows(),
            tape.value(input).cols()
        );
        let w = bindings.bind(tape, &self.weight, !self.frozen);
        let projection = tape.matmul(input, w)?;
        let output = tape.scale(projection, self.output_scale())?;
        Ok(SoftPcaForward { projection, output })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SoftPcaForward {
    pub projection: NodeId,
    pub output: NodeId,
}

/// Sum of per-column sample variances, built from tape primitives.
pub fn total_variance(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let n = tape.value(x).rows();
    contract!(n >= 2, "total variance needs at least 2 rows, got {n}");
    let mean = tape.column_mean(x)?;
    let neg = tape.scale(mean, -1.0)?;
    let centered = tape.add_bias(x, neg)?;
    let sq = tape.square(centered)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / (n as f64 - 1.0))
}

/// `L_variance = (totalvar(X_in) − totalvar(X_out))²` and
/// `L_orth = ‖Σ_out − diag(Σ_out)‖_F²`.
pub fn soft_pca_losses(tape: &mut Tape, x_in: NodeId, x_out: NodeId) -> Result<SoftPcaLosses> {
    let n = tape.value(x_in).rows();
    contract!(n >= 2, "Soft PCA losses need at least 2 rows, got {n}");
    contract!(
        tape.value(x_out).rows() == n,
        "Soft PCA input and output row counts differ"
    );
    let tv_in = total_variance(tape, x_in)?;
    let tv_out = total_variance(tape, x_out)?;
    let diff = tape.sub(tv_in, tv_out)?;
    let variance = tape.square(diff)?;
    let cov = tape.sample_covariance(x_out)?;
    let diag = tape.diag_extract(cov)?;
    let off = tape.sub(cov, diag)?;
    let orthogonality = tape.frobenius_sq(off)?;
    Ok(SoftPcaLosses {
        variance,
        orthogonality,
    })
}

/// Block-diagonal layer: input column block `i` feeds only output block `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveLayer {
    pub in_dims: Vec<usize>,
    pub out_dims: Vec<usize>,
    pub blocks: Vec<LinearLayer>,
}

impl AdditiveLayer {
    pub fn new(in_dims: &[usize], out_dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        validate_partition(in_dims, out_dims)?;
        let blocks = in_dims
            .iter()
            .zip(out_dims)
            .map(|(&i, &o)| LinearLayer::new(i, o, rng))
            .collect();
        Ok(Self {
            in_dims: in_dims.to_vec(),
            out_dims: out_dims.to_vec(),
            blocks,
        })
    }

    pub fn from_blocks(blocks: Vec<LinearLayer>) -> Result<Self> {
        let in_dims: Vec<usize> = blocks.iter().map(LinearLayer::in_dim).collect();
        let out_dims: Vec<usize> = blocks.iter().map(LinearLayer::out_dim).collect();
        validate_partition(&in_dims, &out_dims)?;
        Ok(Self {
            in_dims,
            out_dims,
            blocks,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dims.iter().sum()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dims.iter().sum()
    }

    pub fn forward(&self, tape: &mut Tape, input: NodeId, bindings: &mut Bindings) -> Result<NodeId> {
        let width = tape.value(input).cols();
        contract!(
            width == self.in_dim(),
            "additive layer expects width {}, got {width}",
            self.in_dim()
        );
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut start = 0;
        for (block, &w) in self.blocks.iter().zip(&self.in_dims) {
            let part = tape.slice_cols(input, start, start + w)?;
            outputs.push(block.forward(tape, part, bindings)?);
            start += w;
        }
        tape.concat_cols(&outputs)
    }
}

pub(crate) fn validate_partition(in_dims: &[usize], out_dims: &[usize]) -> Result<()> {
    contract!(!in_dims.is_empty(), "additive layer needs at least one block");
    contract!(
        in_dims.len() == out_dims.len(),
        "input and output dimension lists differ in length ({} vs {})",
        in_dims.len(),
        out_dims.len()
    );
    contract!(
        in_dims.iter().chain(out_dims).all(|&d| d > 0),
        "additive block dimensions must be positive"
    );
    Ok(())
}

/// Diagnostics for the diversified-projection conditions that can be checked
/// from the matrices alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversifiedReport {
    pub bounded: bool,
    pub max_abs: f64,
    /// Smallest singular value of `p⁻¹ WᵀB`.
    pub significance: f64,
    /// `p^{-1/2}`, the scale significance should dominate.
    pub reference: f64,
}

/// Checks boundedness (`‖W‖_max ≤ c1`) and reports the significance of a
/// `p x k̄` projection `W` against a `p x k` loading matrix `B`.
pub fn check_diversified(w: &Matrix, b: &Matrix, c1: f64) -> Result<DiversifiedReport> {
    let p = w.rows();
    contract!(b.rows() == p, "W and B must have the same number of rows");
    contract!(
        w.cols() >= b.cols(),
        "projection width {} is smaller than the factor count {}",
        w.cols(),
        b.cols()
    );
    let h = w.t_matmul(b)?.scale(1.0 / p as f64);
    let gram = h.t_matmul(&h)?;
    let values = eig::eig_sym(&gram)?.values;
    let smallest = values.last().copied().unwrap_or(0.0).max(0.0);
    let max_abs = w.max_abs();
    Ok(DiversifiedReport {
        bounded: max_abs <= c1,
        max_abs,
        significance: smallest.sqrt(),
        reference: 1.0 / (p as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn additive_block_selection() {
        let blocks = vec![
            LinearLayer::from_parts(Matrix::column(&[1.0, 0.0]), Matrix::zeros(1, 1)).unwrap(),
            LinearLayer::from_parts(Matrix::column(&[1.0, 0.0]), Matrix::zeros(1, 1)).unwrap(),
        ];
        let layer = AdditiveLayer::from_blocks(blocks).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::row(&[1.0, 2.0, 3.0, 4.0]));
        let out = layer.forward(&mut tape, a, &mut Bindings::new()).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 3.0]);
    }

    #[test]
    fn additive_block_isolation() {
        let layer = AdditiveLayer::new(&[2, 3], &[4, 2], &mut rng()).unwrap();
        let x = Matrix::from_fn(3, 5, |i, j| (i + 2 * j) as f64 * 0.3 - 1.0);
        let mut y = x.clone();
        for r in 0..3 {
            for c in 2..5 {
                y.set(r, c, y.get(r, c) + 0.77);
            }
        }
        let run = |m: &Matrix| {
            let mut tape = Tape::new();
            let a = tape.constant(m.clone());
            let o = layer.forward(&mut tape, a, &mut Bindings::new()).unwrap();
            tape.value(o).slice_cols(0, 4).unwrap()
        };
        assert_eq!(run(&x).bit_hash(), run(&y).bit_hash());
    }

    #[test]
    fn single_block_matches_linear() {
        let lin = LinearLayer::new(4, 3, &mut rng());
        let add = AdditiveLayer::from_blocks(vec![lin.clone()]).unwrap();
        let x = Matrix::from_fn(5, 4, |i, j| (i * j) as f64 * 0.1 - 0.2);
        let mut t1 = Tape::new();
        let a = t1.constant(x.clone());
        let o1 = lin.forward(&mut t1, a, &mut Bindings::new()).unwrap();
        let mut t2 = Tape::new();
        let b = t2.constant(x);
        let o2 = add.forward(&mut t2, b, &mut Bindings::new()).unwrap();
        assert_eq!(t1.value(o1).bit_hash(), t2.value(o2).bit_hash());
    }

    #[test]
    fn additive_width_mismatch() {
        assert!(AdditiveLayer::new(&[1, 2], &[1], &mut rng()).is_err());
        let layer = AdditiveLayer::new(&[1, 2], &[1, 1], &mut rng()).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 4));
        assert!(matches!(
            layer.forward(&mut tape, a, &mut Bindings::new()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn soft_pca_loss_values() {
        // Perfectly correlated unit-variance columns: Σ = [[1,1],[1,1]].
        let mut tape = Tape::new();
        let out = tape.constant(Matrix::from_rows(&[[-1.0, -1.0], [0.0, 0.0], [1.0, 1.0]]).unwrap());
        let losses = soft_pca_losses(&mut tape, out, out).unwrap();
        assert_eq!(tape.scalar(losses.orthogonality).unwrap(), 2.0);
        assert_eq!(tape.scalar(losses.variance).unwrap(), 0.0);

        let diag = tape.constant(Matrix::from_rows(&[[-1.0, 1.0], [0.0, -2.0], [1.0, 1.0]]).unwrap());
        let losses = soft_pca_losses(&mut tape, diag, diag).unwrap();
        assert_eq!(tape.scalar(losses.orthogonality).unwrap(), 0.0);

        let one = tape.constant(Matrix::column(&[1.0]));
        assert!(soft_pca_losses(&mut tape, one, one).is_err());
    }

    #[test]
    fn pca_requires_initialization() {
        let mut layer = PcaLayer::new(3, 1, PcaSchedule::Epochs(vec![1]), PcaGradient::Frozen, 0).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(4, 3));
        assert!(matches!(layer.forward(&mut tape, a, false), Err(Error::State(_))));
        assert!(PcaLayer::new(3, 4, PcaSchedule::Epochs(vec![]), PcaGradient::Frozen, 0).is_err());
    }

    #[test]
    fn pca_identity_covariance_triggers_perturbation() {
        // Rows ±e_i give a covariance proportional to the identity.
        let p = 4;
        let mut rows = Vec::new();
        for i in 0..p {
            let mut r = vec![0.0; p];
            r[i] = 1.0;
            rows.push(r.clone());
            r[i] = -1.0;
            rows.push(r);
        }
        let a = Matrix::from_rows(&rows).unwrap();
        let cov = a.sample_covariance().unwrap();
        assert!(cov.sub(&Matrix::identity(p).scale(cov.get(0, 0))).unwrap().max_abs() < 1e-15);
        let mut layer = PcaLayer::new(p, 2, PcaSchedule::Epochs(vec![1]), PcaGradient::Frozen, 3).unwrap();
        layer.refit(&a).unwrap();
        assert!(layer.last_perturbation_rounds >= 1);
    }

    #[test]
    fn pca_rank_k_batch_explains_everything() {
        let mut r = rng();
        let n = 40;
        let z = Matrix::from_fn(n, 2, |_, _| r.random_range(-1.0..1.0));
        let b = Matrix::from_fn(2, 10, |_, _| r.random_range(-1.0..1.0));
        let a = z.matmul(&b).unwrap();
        let mut layer = PcaLayer::new(10, 2, PcaSchedule::Epochs(vec![1]), PcaGradient::Frozen, 1).unwrap();
        layer.refit(&a).unwrap();
        assert!((layer.explained_variance.unwrap() - 1.0).abs() < 1e-9);
        let c = layer.projection.clone().unwrap();
        let ctc = c.t_matmul(&c).unwrap();
        assert!(ctc.sub(&Matrix::identity(2).scale(0.1)).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn recompute_keeps_component_slots() {
        let mut r = rng();
        let z = Matrix::from_fn(60, 2, |_, _| r.random_range(-1.0..1.0));
        let b = Matrix::from_rows(&[[3.0, 0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0]]).unwrap();
        let a = z.matmul(&b).unwrap();
        for gradient in [PcaGradient::Frozen, PcaGradient::Exact] {
            let mut layer = PcaLayer::new(5, 2, PcaSchedule::every_batch(), gradient, 1).unwrap();
            layer.refit(&a).unwrap();
            let fresh = layer.projection.clone().unwrap();
            // Swap the stored components and negate one; the next recompute
            // must follow both.
            let prev = Matrix::from_fn(5, 2, |i, j| if j == 0 { -fresh.get(i, 1) } else { fresh.get(i, 0) });
            layer.projection = Some(prev.clone());
            let mut tape = Tape::new();
            let x = tape.constant(a.clone());
            let out = layer.forward(&mut tape, x, true).unwrap();
            let now = layer.projection.clone().unwrap();
            // The stabilizing perturbation moves the vectors slightly.
            assert!(now.sub(&prev).unwrap().max_abs() < 1e-3, "{gradient:?}");
            let direct = a.matmul(&now).unwrap();
            assert!(tape.value(out).sub(&direct).unwrap().max_abs() < 1e-9);
        }
    }

    #[test]
    fn perturbation_is_symmetric() {
        let cov = Matrix::identity(5);
        let stab = stabilized_eigen(&cov, 2, true, false, PERTURB_SCALE, &mut rng()).unwrap();
        assert!(stab.rounds >= 1);
        assert_eq!(stab.perturbation.asymmetry(), 0.0);
    }

    #[test]
    fn soft_pca_freezes_after_epoch() {
        let mut layer = SoftPcaLayer::new(4, 2, 1.0, 1.0, Some(3), &mut rng());
        layer.update_freeze(3);
        assert!(!layer.frozen);
        layer.update_freeze(4);
        assert!(layer.frozen);
        let mut tape = Tape::new();
        let mut bind = Bindings::new();
        let a = tape.constant(Matrix::zeros(2, 4));
        layer.forward(&mut tape, a, &mut bind).unwrap();
        assert_eq!(bind.slots(), &[None]);
    }

    #[test]
    fn diversified_checks() {
        let p = 6;
        let b = Matrix::from_fn(p, 2, |i, j| ((i + 1) * (j + 2)) as f64 % 5.0 - 2.0);
        let zero = Matrix::zeros(p, 2);
        let rep = check_diversified(&zero, &b, 1.0).unwrap();
        assert_eq!(rep.significance, 0.0);
        assert!(rep.bounded);
        let wide = Matrix::filled(p, 3, 0.5);
        assert!(check_diversified(&wide, &b, 0.4).map(|r| !r.bounded).unwrap());
        assert!(check_diversified(&Matrix::zeros(p, 1), &b, 1.0).is_err());
    }
}
