//! Potential-driven flows: Euler trajectories of `v = -grad U / lambda`,
//! the kinetic running cost, the generator objective and the adversarial
//! training loop.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, Tape, Var};
use crate::datasets::{sample_reference, DatasetError};
use crate::divergence::{DivergenceError, Discriminator};
use crate::nn::{Activation, AdamConfig, BoundMlp, MlpParams, MlpSpec, NnError};

mod checkpoint;
mod train;

pub use checkpoint::{read_potential, write_potential, POTENTIAL_MAGIC};
pub use train::{batch_seed, train, train_with, MetricsRecord, Termination, TrainOutcome};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("non-finite position at step {step}")]
    NonFinitePosition { step: usize },
    #[error("sample dimension {got} does not match the potential's {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Which proximal terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain f-divergence terminal cost, no kinetic term.
    Unregularized,
    /// Kinetic term, unconstrained discriminator.
    W2Only,
    /// Lipschitz discriminator, no kinetic term.
    W1Only,
    /// Kinetic term and Lipschitz discriminator.
    W1W2,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Unregularized, Mode::W2Only, Mode::W1Only, Mode::W1W2];

    /// Whether the kinetic energy enters the generator objective.
    pub fn kinetic(self) -> bool {
        matches!(self, Mode::W2Only | Mode::W1W2)
    }

    /// Whether the discriminator is Lipschitz-constrained.
    pub fn lipschitz(self) -> bool {
        matches!(self, Mode::W1Only | Mode::W1W2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Unregularized => "unregularized",
            Mode::W2Only => "w2_only",
            Mode::W1Only => "w1_only",
            Mode::W1W2 => "w1w2",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| FlowError::UnknownMode(s.trim().to_owned()))
    }
}

/// Thresholds for early termination on the optimality indicators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub window: usize,
    pub residual: f64,
    pub terminal: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            window: 50,
            residual: 1e-2,
            terminal: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Kinetic weight `lambda`.
    pub lambda: f64,
    /// Terminal time `T`.
    pub horizon: f64,
    /// Euler steps `K`; the step size is `T / K`.
    pub steps: usize,
    pub mode: Mode,
    /// Trajectories per batch.
    pub batch: usize,
    /// Target samples per batch.
    pub target_batch: usize,
    /// Outer (generator) iterations.
    pub iterations: usize,
    pub seed: u64,
    pub potential_widths: Vec<usize>,
    pub potential_activation: Activation,
    /// Factor on the potential's initial output weights; small values start
    /// the flow near the identity map.
    pub potential_init_scale: f64,
    pub discriminator_widths: Vec<usize>,
    pub discriminator_activation: Activation,
    /// Optimizer for the potential.
    pub adam: AdamConfig,
    /// `|dual estimate|` above which a run is declared blown up.
    pub blowup_threshold: f64,
    /// Record the optimality indicators every iteration.
    pub indicators: bool,
    /// Stop early once the indicators settle.
    pub stop: Option<StopRule>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            horizon: 5.0,
            steps: 5,
            mode: Mode::W1W2,
            batch: 256,
            target_batch: 256,
            iterations: 2000,
            seed: 0,
            potential_widths: vec![64, 64],
            potential_activation: Activation::Softplus,
            potential_init_scale: 1.0,
            discriminator_widths: vec![64, 64],
            discriminator_activation: Activation::Softplus,
            adam: AdamConfig::default(),
            blowup_threshold: 1e3,
            indicators: true,
            stop: None,
        }
    }
}

impl FlowConfig {
    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlowError::Config(m.to_owned()));
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.horizon > 0.0) {
            return bad("terminal time must be positive");
        }
        if self.steps == 0 {
            return bad("at least one Euler step is required");
        }
        if self.batch == 0 || self.target_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.potential_init_scale >= 0.0) {
            return bad("potential init scale must be non-negative");
        }
        if self.potential_widths.is_empty() || self.discriminator_widths.is_empty() {
            return bad("networks need at least one hidden layer");
        }
        Ok(())
    }
}

/// A scalar potential `U(x, t)` that can be placed on a tape.
pub trait Field {
    /// Spatial dimension.
    fn dim(&self) -> usize;
    /// `U` at each row of `x` (`n x d`) and time column `t` (`n x 1`),
    /// giving `n x 1`.
    fn eval<'t>(&self, x: Var<'t>, t: Var<'t>) -> Var<'t>;
}

/// [`Field`] from a closure, mostly for hand-built potentials.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

/// Wraps `f(x, t)` as a [`Field`] on `R^dim`.
pub fn field_fn<F>(dim: usize, f: F) -> FnField<F>
where
    F: for<'t> Fn(Var<'t>, Var<'t>) -> Var<'t>,
{
    FnField { dim, f }
}

impl<F> Field for FnField<F>
where
    F: for<'t> Fn(Var<'t>, Var<'t>) -> Var<'t>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval<'t>(&self, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        (self.f)(x, t)
    }
}

/// MLP potential on `(x, t / T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    pub net: MlpParams,
    pub horizon: f64,
}

impl Potential {
    pub fn new(d: usize, widths: &[usize], activation: Activation, horizon: f64, seed: u64) -> Result<Self> {
        let net = MlpParams::init(MlpSpec::new(d + 1, widths.to_vec(), activation), seed)?;
        Ok(Self { net, horizon })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundPotential<'t> {
        BoundPotential {
            net: self.net.bind(tape, trainable),
            horizon: self.horizon,
        }
    }
}

impl Field for Potential {
    fn dim(&self) -> usize {
        self.net.spec().in_dim - 1
    }

    fn eval<'t>(&self, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        self.bind(x.tape(), false).eval(x, t)
    }
}

/// A [`Potential`] placed on a tape.
pub struct BoundPotential<'t> {
    pub net: BoundMlp<'t>,
    pub horizon: f64,
}

impl<'t> BoundPotential<'t> {
    pub fn eval(&self, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        self.net.forward(x.concat_cols(t.scale(1.0 / self.horizon)))
    }
}

/// `grad_x U` and optionally `d_t U` at `(x, t)` for every row, as tape
/// nodes that can be differentiated again.
pub(crate) fn field_gradients<'t, F>(u: F, x: Var<'t>, t: f64, with_time: bool) -> std::result::Result<(Var<'t>, Option<Var<'t>>), AutodiffError>
where
    F: Fn(Var<'t>, Var<'t>) -> Var<'t>,
{
    let tape = x.tape();
    let time = tape.constant(Array2::from_elem((x.shape().0, 1), t));
    let total = u(x, time).sum();
    if with_time {
        let g = tape.gradient(total, &[x, time])?;
        Ok((g[0], Some(g[1])))
    } else {
        Ok((tape.gradient(total, &[x])?[0], None))
    }
}

/// Trajectories on a tape: `points[k]` is `Y_k`, `grads[k]` is
/// `grad_x U(Y_k, k h)`.
pub(crate) struct Unrolled<'t> {
    pub points: Vec<Var<'t>>,
    pub grads: Vec<Var<'t>>,
}

pub(crate) fn unroll<'t, F>(u: F, start: Var<'t>, lambda: f64, horizon: f64, steps: usize) -> std::result::Result<Unrolled<'t>, AutodiffError>
where
    F: Fn(Var<'t>, Var<'t>) -> Var<'t> + Copy,
{
    let h = horizon / steps as f64;
    let mut points = vec![start];
    let mut grads = Vec::with_capacity(steps);
    let mut y = start;
    for k in 0..steps {
        let (g, _) = field_gradients(u, y, k as f64 * h, false)?;
        y = y - g.scale(h / lambda);
        points.push(y);
        grads.push(g);
    }
    Ok(Unrolled { points, grads })
}

/// Stored Euler trajectories and the potential gradients that drove them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    /// `K + 1` position matrices, each `M x d`.
    pub points: Vec<Matrix>,
    /// `K` gradient matrices `grad_x U(Y_k, k h)`, each `M x d`.
    pub grads: Vec<Matrix>,
    pub step: f64,
    pub lambda: f64,
}

impl TrajectoryBatch {
    pub fn steps(&self) -> usize {
        self.grads.len()
    }

    pub fn len(&self) -> usize {
        self.points[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start(&self) -> &Matrix {
        &self.points[0]
    }

    pub fn endpoints(&self) -> &Matrix {
        self.points.last().expect("at least the initial points")
    }

    /// Positions of trajectory `m`, one row per time step.
    pub fn trajectory(&self, m: usize) -> Matrix {
        let d = self.points[0].ncols();
        Array2::from_shape_fn((self.points.len(), d), |(k, j)| self.points[k][[m, j]])
    }
}

fn check_dim<F: Field + ?Sized>(u: &F, x: ArrayView2<'_, f64>) -> Result<()> {
    if x.ncols() != u.dim() {
        return Err(FlowError::DimensionMismatch {
            expected: u.dim(),
            got: x.ncols(),
        });
    }
    Ok(())
}

/// `-grad_x U(x, t) / lambda` at a single point.
pub fn velocity<F: Field + ?Sized>(u: &F, x: &[f64], t: f64, lambda: f64) -> Result<Vec<f64>> {
    let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    check_dim(u, row.view())?;
    let tape = Tape::new();
    let (g, _) = field_gradients(|a, b| u.eval(a, b), tape.constant(row), t, false)?;
    Ok(g.value().iter().map(|v| -v / lambda).collect())
}

/// Forward Euler from `initial` with `steps` steps of size `horizon / steps`.
pub fn simulate_steps<F: Field + ?Sized>(
    u: &F,
    initial: ArrayView2<'_, f64>,
    lambda: f64,
    horizon: f64,
    steps: usize,
) -> Result<TrajectoryBatch> {
    check_dim(u, initial)?;
    let h = horizon / steps as f64;
    let mut points = vec![initial.to_owned()];
    let mut grads = Vec::with_capacity(steps);
    for k in 0..steps {
        // a fresh tape per step keeps memory flat
        let tape = Tape::new();
        let y = tape.constant(points[k].clone());
        let (g, _) = field_gradients(|a, b| u.eval(a, b), y, k as f64 * h, false)?;
        let g = g.value();
        let next = &points[k] - &(&g * (h / lambda));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinitePosition { step: k + 1 });
        }
        points.push(next);
        grads.push(g);
    }
    Ok(TrajectoryBatch {
        points,
        grads,
        step: h,
        lambda,
    })
}

/// [`simulate_steps`] with the step count and horizon of `cfg`.
pub fn simulate<F: Field + ?Sized>(u: &F, initial: ArrayView2<'_, f64>, cfg: &FlowConfig) -> Result<TrajectoryBatch> {
    simulate_steps(u, initial, cfg.lambda, cfg.horizon, cfg.steps)
}

/// `(h / (2 lambda M)) sum_m sum_k |grad U(Y_k, k h)|^2`.
pub fn kinetic_energy(traj: &TrajectoryBatch, lambda: f64) -> f64 {
    let m = traj.len();
    if m == 0 {
        return 0.0;
    }
    let total: f64 = traj.grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    traj.step * total / (2.0 * lambda * m as f64)
}

/// Endpoints of `n` fresh reference draws integrated with `steps` Euler
/// steps over `[0, horizon]`.
pub fn generate<F: Field + ?Sized>(u: &F, n: usize, steps: usize, lambda: f64, horizon: f64, seed: u64) -> Result<Matrix> {
    if steps == 0 {
        return Err(FlowError::Config("at least one Euler step is required".into()));
    }
    let initial = sample_reference(u.dim(), n, seed);
    if n == 0 {
        return Ok(initial);
    }
    let traj = simulate_steps(u, initial.view(), lambda, horizon, steps)?;
    Ok(traj.endpoints().clone())
}

/// Generator objective for a frozen discriminator: the dual estimate at
/// the endpoints plus, in kinetic modes, the kinetic energy.
pub fn generator_objective(
    disc: &Discriminator,
    traj: &TrajectoryBatch,
    target: ArrayView2<'_, f64>,
    mode: Mode,
) -> Result<f64> {
    let dual = crate::divergence::dual_estimate(disc, traj.endpoints().view(), target)?;
    let kinetic = if mode.kinetic() { kinetic_energy(traj, traj.lambda) } else { 0.0 };
    Ok(dual + kinetic)
}

/// Value and parameter gradient of the generator objective, differentiated
/// through every Euler step. Also returns the stored trajectories.
pub fn generator_objective_grad(
    potential: &Potential,
    disc: &Discriminator,
    initial: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    cfg: &FlowConfig,
) -> Result<(f64, Vec<f64>, TrajectoryBatch)> {
    check_dim(potential, initial)?;
    let target_term = target_conjugate_mean(disc, target)?;
    let tape = Tape::new();
    let bound = potential.bind(&tape, true);
    let phi = disc.bind(&tape, false);
    let eval = |x, t| bound.eval(x, t);
    let path = unroll(&eval, tape.constant(initial.to_owned()), cfg.lambda, cfg.horizon, cfg.steps)?;
    let end = *path.points.last().expect("endpoints");
    let mut objective = phi.phi(end).mean().shift(-target_term);
    if cfg.mode.kinetic() {
        objective = objective + kinetic_var(&path.grads, cfg.step_size(), cfg.lambda);
    }
    tape.check()?;
    let grads = tape.gradient(objective, &bound.net.params())?;
    tape.check()?;
    let traj = TrajectoryBatch {
        points: path.points.iter().map(|p| p.value()).collect(),
        grads: path.grads.iter().map(|g| g.value()).collect(),
        step: cfg.step_size(),
        lambda: cfg.lambda,
    };
    Ok((objective.scalar(), BoundMlp::flatten(&grads), traj))
}

fn kinetic_var<'t>(grads: &[Var<'t>], h: f64, lambda: f64) -> Var<'t> {
    let m = grads[0].shape().0 as f64;
    let mut total = grads[0].square().sum();
    for g in &grads[1..] {
        total = total + g.square().sum();
    }
    total.scale(h / (2.0 * lambda * m))
}

fn target_conjugate_mean(disc: &Discriminator, target: ArrayView2<'_, f64>) -> Result<f64> {
    let values = disc.evaluate(target)?;
    let mut total = 0.0;
    for (sample, &value) in values.iter().enumerate() {
        if !disc.f.in_domain(value, 0.0) {
            return Err(DivergenceError::Domain { sample, value }.into());
        }
        total += disc.f.f_star(value);
    }
    Ok(total / values.len().max(1) as f64)
}

/// Per trajectory, the largest distance of an intermediate point from the
/// chord `Y_0 + (k/K)(Y_K - Y_0)` divided by `|Y_K - Y_0|`. Trajectories that
/// move less than `min_length` are skipped.
pub fn chord_deviation_ratios(traj: &TrajectoryBatch, min_length: f64) -> Vec<f64> {
    let k_total = traj.steps() as f64;
    let start = traj.start();
    let end = traj.endpoints();
    let mut out = Vec::new();
    for m in 0..traj.len() {
        let chord = &end.row(m) - &start.row(m);
        let length = chord.dot(&chord).sqrt();
        if length < min_length {
            continue;
        }
        let mut worst: f64 = 0.0;
        for (k, p) in traj.points.iter().enumerate() {
            let on_chord = &start.row(m) + &(&chord * (k as f64 / k_total));
            let diff = &p.row(m) - &on_chord;
            worst = worst.max(diff.dot(&diff).sqrt());
        }
        out.push(worst / length);
    }
    out
}

/// Mean distance between matching rows of `a` and `b`.
pub fn mean_displacement(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let diff = &a - &b;
    diff.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / n as f64
}

/// Mean polygonal path length of the trajectories.
pub fn mean_path_length(traj: &TrajectoryBatch) -> f64 {
    traj.points
        .windows(2)
        .map(|w| mean_displacement(w[1].view(), w[0].view()))
        .sum()
}
