//! Lipschitz-regularized f-divergences in dual form.
//!
//! The divergence between generated samples `Y` and target samples `X` is
//! estimated as `sup_phi (1/M) sum phi(Y) - (1/N) sum f*(phi(X))` over
//! `L`-Lipschitz discriminators `phi`. The Lipschitz bound is enforced with
//! a one-sided gradient penalty at random interpolates of `Y` and `X`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, Tape, Var};
use crate::nn::{Activation, Adam, AdamConfig, BoundMlp, Direction, MlpParams, MlpSpec, NnError};

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error("discriminator value {value} at sample {sample} is outside the domain of f*")]
    Domain { sample: usize, value: f64 },
    #[error("empty sample set")]
    EmptySamples,
    #[error("sample dimension {got} does not match discriminator input {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite discriminator objective at inner iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("unknown f-divergence `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, DivergenceError>;

/// Convex generator `f` of the f-divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FKind {
    /// `f(x) = -log x`
    ReverseKl,
    /// `f(x) = x log x`
    Kl,
}

impl FKind {
    pub fn f(self, x: f64) -> f64 {
        match self {
            FKind::ReverseKl => -x.ln(),
            FKind::Kl if x == 0.0 => 0.0,
            FKind::Kl => x * x.ln(),
        }
    }

    /// Convex conjugate; `+inf` outside its domain.
    pub fn f_star(self, y: f64) -> f64 {
        match self {
            FKind::ReverseKl if y < 0.0 => -1.0 - (-y).ln(),
            FKind::ReverseKl => f64::INFINITY,
            FKind::Kl => (y - 1.0).exp(),
        }
    }

    /// Derivative of the conjugate, `None` outside its domain.
    pub fn f_star_prime(self, y: f64) -> Option<f64> {
        match self {
            FKind::ReverseKl if y < 0.0 => Some(-1.0 / y),
            FKind::ReverseKl => None,
            FKind::Kl => Some((y - 1.0).exp()),
        }
    }

    /// Whether `f*(y)` is finite with at least `margin` to spare.
    pub fn in_domain(self, y: f64, margin: f64) -> bool {
        match self {
            FKind::ReverseKl => y < -margin,
            FKind::Kl => y.is_finite(),
        }
    }

    /// `f*` applied elementwise on the tape.
    pub fn f_star_var<'t>(self, y: Var<'t>) -> Var<'t> {
        match self {
            FKind::ReverseKl => (-(y.neg().ln())).shift(-1.0),
            FKind::Kl => y.shift(-1.0).exp(),
        }
    }

    /// The constant discriminator value that is optimal when the two
    /// distributions coincide (it makes the dual objective exactly 0).
    pub fn neutral_value(self) -> f64 {
        match self {
            FKind::ReverseKl => -1.0,
            FKind::Kl => 1.0,
        }
    }
}

impl fmt::Display for FKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FKind::ReverseKl => "reverse_kl",
            FKind::Kl => "kl",
        })
    }
}

impl FromStr for FKind {
    type Err = DivergenceError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "reverse_kl" => Ok(FKind::ReverseKl),
            "kl" => Ok(FKind::Kl),
            other => Err(DivergenceError::UnknownKind(other.to_owned())),
        }
    }
}

/// `f*(y)`, reporting a domain violation when `y` is within `margin` of the
/// domain boundary.
pub fn f_star_checked(f: FKind, y: f64, margin: f64) -> Result<f64> {
    if f.in_domain(y, margin) {
        Ok(f.f_star(y))
    } else {
        Err(DivergenceError::Domain { sample: 0, value: y })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceConfig {
    pub f: FKind,
    /// Lipschitz bound `L`.
    pub lipschitz: f64,
    /// Weight of the gradient penalty; 0 leaves the discriminator unconstrained.
    pub penalty_weight: f64,
    /// Ascent steps per call to [`DiscriminatorTrainer::train`].
    pub inner_iters: usize,
    pub domain_margin: f64,
    pub adam: AdamConfig,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            f: FKind::ReverseKl,
            lipschitz: 1.0,
            penalty_weight: 10.0,
            inner_iters: 5,
            domain_margin: 1e-3,
            adam: AdamConfig::default(),
        }
    }
}

/// Network plus output transform.
///
/// For reverse KL the network output `n(x)` is mapped to
/// `phi(x) = -softplus(n(x)) - margin`, so `phi < -margin` everywhere and
/// `f*(phi)` is always finite. For KL `phi` is the raw output.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: MlpParams,
    pub f: FKind,
    pub margin: f64,
}

impl Discriminator {
    /// Fresh discriminator whose output bias puts `phi` at the neutral value
    /// (dual objective 0 when the two sample sets coincide).
    pub fn new(spec: MlpSpec, f: FKind, margin: f64, seed: u64) -> Result<Self> {
        let mut net = MlpParams::init(spec, seed)?;
        let bias = match f {
            // softplus(b) = 1 - margin  =>  phi = -1
            FKind::ReverseKl => (1.0 - margin).exp_m1().ln(),
            FKind::Kl => f.neutral_value(),
        };
        net.set_output_bias(bias);
        Ok(Self { net, f, margin })
    }

    pub fn from_net(net: MlpParams, f: FKind, margin: f64) -> Self {
        Self { net, f, margin }
    }

    pub fn in_dim(&self) -> usize {
        self.net.spec().in_dim
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundDiscriminator<'t> {
        BoundDiscriminator {
            net: self.net.bind(tape, trainable),
            f: self.f,
            margin: self.margin,
        }
    }

    fn check_dim(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(DivergenceError::DimensionMismatch {
                expected: self.in_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// `phi` at every row of `x`.
    pub fn evaluate(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(x)?;
        let raw = self.net.evaluate(x)?;
        Ok(match self.f {
            FKind::ReverseKl => raw.mapv(|n| -crate::autodiff::softplus(n) - self.margin),
            FKind::Kl => raw,
        })
    }

    /// `grad_x phi` at every row of `x`.
    pub fn input_gradient(&self, x: ArrayView2<'_, f64>) -> Result<Matrix> {
        self.check_dim(x)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let input = tape.constant(x.to_owned());
        let out = bound.phi(input).sum();
        let g = tape.gradient(out, &[input])?;
        Ok(g[0].value())
    }
}

/// A [`Discriminator`] placed on a tape.
pub struct BoundDiscriminator<'t> {
    pub net: BoundMlp<'t>,
    pub f: FKind,
    pub margin: f64,
}

impl<'t> BoundDiscriminator<'t> {
    /// Composed discriminator output, `n x d -> n x 1`.
    pub fn phi(&self, x: Var<'t>) -> Var<'t> {
        let raw = self.net.forward(x);
        match self.f {
            FKind::ReverseKl => (-raw.softplus()).shift(-self.margin),
            FKind::Kl => raw,
        }
    }

    /// `mean phi(gen) - mean f*(phi(target))`.
    pub fn dual_objective(&self, gen: Var<'t>, target: Var<'t>) -> Var<'t> {
        let on_gen = self.phi(gen).mean();
        let on_target = self.f.f_star_var(self.phi(target)).mean();
        on_gen - on_target
    }

    /// `-sum_n max(|grad phi(z_n)|^2 - L^2, 0)` at the interpolates `z`.
    pub fn penalty(&self, interpolates: Var<'t>, lipschitz: f64) -> Result<Var<'t>> {
        let tape = interpolates.tape();
        let out = self.phi(interpolates).sum();
        let grad = tape.gradient(out, &[interpolates])?[0];
        let excess = grad.row_norms_sq().shift(-lipschitz * lipschitz);
        Ok(-excess.relu().sum())
    }
}

fn check_samples(disc: &Discriminator, gen: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<()> {
    if gen.nrows() == 0 || target.nrows() == 0 {
        return Err(DivergenceError::EmptySamples);
    }
    disc.check_dim(gen)?;
    disc.check_dim(target)
}

/// Plug-in estimate of `E_gen[phi] - E_target[f*(phi)]`.
pub fn dual_estimate(disc: &Discriminator, gen: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    check_samples(disc, gen, target)?;
    let on_gen = disc.evaluate(gen)?;
    let on_target = disc.evaluate(target)?;
    let mut conj = 0.0;
    for (sample, &value) in on_target.iter().enumerate() {
        if !disc.f.in_domain(value, 0.0) {
            return Err(DivergenceError::Domain { sample, value });
        }
        conj += disc.f.f_star(value);
    }
    Ok(on_gen.mean().expect("nonempty") - conj / on_target.len() as f64)
}

/// Rows `c_n y_n + (1 - c_n) x_n` for `n < min(M, N)` with `c_n ~ U[0, 1]`.
pub fn interpolates<R: Rng>(gen: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, rng: &mut R) -> Matrix {
    let n = gen.nrows().min(target.nrows());
    let d = gen.ncols();
    let mut z = Array2::zeros((n, d));
    for i in 0..n {
        let c: f64 = rng.gen();
        for j in 0..d {
            z[[i, j]] = c * gen[[i, j]] + (1.0 - c) * target[[i, j]];
        }
    }
    z
}

/// Gradient penalty value for a fixed discriminator, with the interpolation
/// weights drawn from `seed`. Always `<= 0`.
pub fn gradient_penalty(
    disc: &Discriminator,
    gen: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    lipschitz: f64,
    seed: u64,
) -> Result<f64> {
    check_samples(disc, gen, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = interpolates(gen, target, &mut rng);
    let tape = Tape::new();
    let bound = disc.bind(&tape, false);
    let p = bound.penalty(tape.constant(z), lipschitz)?;
    tape.check()?;
    Ok(p.scalar())
}

/// Progress of one [`DiscriminatorTrainer::train`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerStats {
    /// Dual estimate before the last ascent step.
    pub dual: f64,
    /// Penalty before the last ascent step (0 when unconstrained).
    pub penalty: f64,
}

/// Warm-startable discriminator ascent.
#[derive(Debug, Clone)]
pub struct DiscriminatorTrainer {
    pub disc: Discriminator,
    pub config: DivergenceConfig,
    adam: Adam,
}

impl DiscriminatorTrainer {
    pub fn new(disc: Discriminator, config: DivergenceConfig) -> Self {
        let adam = Adam::new(disc.net.len(), config.adam);
        Self { disc, config, adam }
    }

    /// `config.inner_iters` ascent steps on
    /// `dual + penalty_weight * penalty`.
    pub fn train<R: Rng>(&mut self, gen: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, rng: &mut R) -> Result<InnerStats> {
        check_samples(&self.disc, gen, target)?;
        let cfg = self.config;
        let mut stats = InnerStats { dual: 0.0, penalty: 0.0 };
        let gen_m = gen.to_owned();
        let target_m = target.to_owned();
        for iteration in 0..cfg.inner_iters {
            let tape = Tape::new();
            let bound = self.disc.bind(&tape, true);
            let dual = bound.dual_objective(tape.constant(gen_m.clone()), tape.constant(target_m.clone()));
            let mut objective = dual;
            let mut penalty_value = 0.0;
            if cfg.penalty_weight > 0.0 {
                let z = interpolates(gen, target, rng);
                let penalty = bound.penalty(tape.constant(z), cfg.lipschitz)?;
                penalty_value = penalty.scalar();
                objective = objective + penalty.scale(cfg.penalty_weight);
            }
            if tape.check().is_err() || !objective.scalar().is_finite() {
                return Err(DivergenceError::NonFinite { iteration });
            }
            let grads = tape.gradient(objective, &bound.net.params())?;
            tape.check().map_err(|_| DivergenceError::NonFinite { iteration })?;
            let flat = BoundMlp::flatten(&grads);
            self.adam
                .step(self.disc.net.flat_mut(), &flat, Direction::Ascent)
                .map_err(|_| DivergenceError::NonFinite { iteration })?;
            stats = InnerStats {
                dual: dual.scalar(),
                penalty: penalty_value,
            };
        }
        Ok(stats)
    }
}

/// Runs `cfg.inner_iters` ascent steps from `init` with a fresh optimizer.
pub fn train_discriminator(
    gen: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    cfg: DivergenceConfig,
    init: Discriminator,
    seed: u64,
) -> Result<Discriminator> {
    let mut trainer = DiscriminatorTrainer::new(init, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trainer.train(gen, target, &mut rng)?;
    Ok(trainer.disc)
}

/// `(f*)'(phi(x) - c)`: the likelihood ratio of the intermediate measure
/// with respect to the target at `x`.
pub fn sigma_likelihood_ratio(disc: &Discriminator, x: &[f64], c: f64) -> Result<f64> {
    let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|_| DivergenceError::DimensionMismatch {
        expected: disc.in_dim(),
        got: x.len(),
    })?;
    let value = disc.evaluate(row.view())?[0] - c;
    disc.f
        .f_star_prime(value)
        .ok_or(DivergenceError::Domain { sample: 0, value })
}

/// Shift `c` for which the likelihood ratio averages to 1 over `target`,
/// found by bisection.
pub fn normalize_ratio_shift(disc: &Discriminator, target: ArrayView2<'_, f64>) -> Result<f64> {
    if target.nrows() == 0 {
        return Err(DivergenceError::EmptySamples);
    }
    let phi = disc.evaluate(target)?;
    let mean_ratio = |c: f64| -> f64 {
        phi.iter()
            .map(|&p| disc.f.f_star_prime(p - c).unwrap_or(f64::INFINITY))
            .sum::<f64>()
            / phi.len() as f64
    };
    // the mean ratio decreases in c for both generators
    let top = phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = match disc.f {
        FKind::ReverseKl => (top, top + 1.0),
        FKind::Kl => (top - 1.0, top + 1.0),
    };
    while mean_ratio(hi) > 1.0 {
        hi += 2.0 * (hi - lo);
    }
    if disc.f == FKind::Kl {
        while mean_ratio(lo) < 1.0 {
            lo -= 2.0 * (hi - lo);
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_ratio(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Default discriminator architecture helper.
pub fn discriminator_spec(d: usize, widths: &[usize], activation: Activation) -> MlpSpec {
    MlpSpec::new(d, widths.to_vec(), activation)
}

#[cfg(test)]
mod tests;
