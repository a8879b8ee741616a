use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generator_objective_grad, kinetic_energy, FlowConfig, Potential, Result};
use crate::datasets::{sample_reference, TargetSampler};
use crate::divergence::{Discriminator, DiscriminatorTrainer, DivergenceConfig};
use crate::indicators::{hj_residual, should_stop, terminal_error, ResidualSign};
use crate::nn::{Adam, Direction, MlpSpec};

/// One outer iteration of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    /// Dual estimate of the terminal cost at this iteration's endpoints.
    pub dual_estimate: f64,
    pub kinetic_energy: f64,
    pub hj_residual: Option<f64>,
    pub terminal_error: Option<f64>,
    pub wallclock_s: f64,
}

/// Why a training run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    /// Ran every outer iteration.
    Completed,
    /// The indicators stayed below the stop thresholds.
    Converged { iteration: usize },
    /// `|dual estimate|` exceeded the blow-up threshold.
    BlowUp { iteration: usize, estimate: f64 },
    /// Some quantity became NaN or infinite.
    NonFinite { iteration: usize, detail: String },
}

impl Termination {
    /// Blow-up and numerical breakdown both count as divergence.
    pub fn diverged(&self) -> bool {
        matches!(self, Termination::BlowUp { .. } | Termination::NonFinite { .. })
    }

    pub fn iteration(&self) -> Option<usize> {
        match self {
            Termination::Completed => None,
            Termination::Converged { iteration }
            | Termination::BlowUp { iteration, .. }
            | Termination::NonFinite { iteration, .. } => Some(*iteration),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub potential: Potential,
    pub discriminator: Discriminator,
    pub history: Vec<MetricsRecord>,
    pub termination: Termination,
}

/// Seed of the reference batch drawn at outer iteration `iter`.
pub fn batch_seed(seed: u64, iter: usize) -> u64 {
    let mut z = seed ^ (iter as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Alternating training of discriminator and potential.
pub fn train(target: &dyn TargetSampler, cfg: &FlowConfig, div: &DivergenceConfig) -> Result<TrainOutcome> {
    train_with(target, cfg, div, |_| {})
}

/// [`train`], calling `observe` with every record as soon as it exists.
pub fn train_with(
    target: &dyn TargetSampler,
    cfg: &FlowConfig,
    div: &DivergenceConfig,
    mut observe: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d = target.dim();
    let mut div = *div;
    if !cfg.mode.lipschitz() {
        div.penalty_weight = 0.0;
    } else if !(div.lipschitz > 0.0) {
        return Err(super::FlowError::Config("Lipschitz modes need a positive bound".into()));
    }

    let mut potential = Potential::new(d, &cfg.potential_widths, cfg.potential_activation, cfg.horizon, cfg.seed)?;
    potential.net.scale_output_weights(cfg.potential_init_scale);
    let disc_spec = MlpSpec::new(d, cfg.discriminator_widths.clone(), cfg.discriminator_activation);
    let disc = Discriminator::new(disc_spec, div.f, div.domain_margin, cfg.seed.wrapping_add(1))?;
    let mut trainer = DiscriminatorTrainer::new(disc, div);
    let mut adam = Adam::new(potential.net.len(), cfg.adam);

    let mut target_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    target_rng.set_stream(1);
    let mut penalty_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    penalty_rng.set_stream(2);

    let clock = Instant::now();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut termination = Termination::Completed;

    for iter in 0..cfg.iterations {
        let start = sample_reference(d, cfg.batch, batch_seed(cfg.seed, iter));
        let x = target.draw(cfg.target_batch, &mut target_rng);

        let endpoints = match super::simulate(&potential, start.view(), cfg) {
            Ok(traj) => traj.endpoints().clone(),
            Err(e) => {
                termination = non_finite(iter, e);
                break;
            }
        };
        if let Err(e) = trainer.train(endpoints.view(), x.view(), &mut penalty_rng) {
            termination = non_finite(iter, e);
            break;
        }

        let (objective, grad, traj) = match generator_objective_grad(&potential, &trainer.disc, start.view(), x.view(), cfg) {
            Ok(v) => v,
            Err(e) => {
                termination = non_finite(iter, e);
                break;
            }
        };
        let kinetic = kinetic_energy(&traj, cfg.lambda);
        let dual = if cfg.mode.kinetic() { objective - kinetic } else { objective };

        let (hj, term) = if cfg.indicators {
            let hj = hj_residual(&potential, &traj, cfg.lambda, ResidualSign::Optimality).ok();
            let te = terminal_error(&potential, &trainer.disc, traj.endpoints().view(), cfg.horizon).ok();
            (hj, te)
        } else {
            (None, None)
        };

        let record = MetricsRecord {
            iter,
            dual_estimate: dual,
            kinetic_energy: kinetic,
            hj_residual: hj,
            terminal_error: term,
            wallclock_s: clock.elapsed().as_secs_f64(),
        };
        observe(&record);
        history.push(record);

        if !dual.is_finite() {
            termination = Termination::NonFinite {
                iteration: iter,
                detail: "dual estimate".into(),
            };
            break;
        }
        if dual.abs() > cfg.blowup_threshold {
            termination = Termination::BlowUp {
                iteration: iter,
                estimate: dual,
            };
            break;
        }
        if let Err(e) = adam.step(potential.net.flat_mut(), &grad, Direction::Descent) {
            termination = non_finite(iter, e);
            break;
        }
        if let Some(rule) = cfg.stop {
            if cfg.indicators && should_stop(&history, &rule) {
                termination = Termination::Converged { iteration: iter };
                break;
            }
        }
    }

    Ok(TrainOutcome {
        potential,
        discriminator: trainer.disc,
        history,
        termination,
    })
}

fn non_finite(iteration: usize, e: impl std::fmt::Display) -> Termination {
    Termination::NonFinite {
        iteration,
        detail: e.to_string(),
    }
}
