//! Longer training checks that sit outside the numbered acceptance list.

use ndarray::{Array2, Axis};
use proxflow::datasets::{sample_reference, sample_target, TargetKind};
use proxflow::divergence::{interpolates, train_discriminator, Discriminator, DivergenceConfig};
use proxflow::flow::{generate, train, FlowConfig, Mode, TrainOutcome};
use proxflow::nn::{Activation, AdamConfig, MlpSpec};
use proxflow::oracles::empirical_w1_exact;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(seed: u64, iterations: usize) -> FlowConfig {
    FlowConfig {
        mode: Mode::W1W2,
        seed,
        iterations,
        potential_widths: vec![64, 64],
        discriminator_widths: vec![64, 64],
        adam: AdamConfig::with_lr(1e-4),
        potential_init_scale: 0.1,
        ..FlowConfig::default()
    }
}

fn divergence() -> DivergenceConfig {
    DivergenceConfig {
        adam: AdamConfig::with_lr(1e-3),
        ..DivergenceConfig::default()
    }
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn endpoints(out: &TrainOutcome, cfg: &FlowConfig, n: usize, seed: u64) -> Array2<f64> {
    generate(&out.potential, n, cfg.steps, cfg.lambda, cfg.horizon, seed).unwrap()
}

#[test]
fn identity_target_needs_no_transport() {
    let cfg = config(5, 500);
    let out = train(&TargetKind::gaussian(vec![0.0, 0.0], 1.0), &cfg, &divergence()).unwrap();
    assert!(!out.termination.diverged());
    let last = out.history.last().unwrap();
    assert!(last.dual_estimate <= 0.05, "{last:?}");
    assert!(last.kinetic_energy <= 0.05, "{last:?}");
}

#[test]
fn mean_shift_runs_agree_with_each_other() {
    let target = TargetKind::gaussian(vec![3.0, 0.0], 1.0);
    let runs: Vec<_> = [1, 2]
        .iter()
        .map(|&seed| {
            let cfg = config(seed, 2000);
            let out = train(&target, &cfg, &divergence()).unwrap();
            assert!(!out.termination.diverged(), "{:?}", out.termination);
            endpoints(&out, &cfg, 256, 900)
        })
        .collect();

    let mean = runs[0].mean_axis(Axis(0)).unwrap();
    let off = ((mean[0] - 3.0).powi(2) + mean[1].powi(2)).sqrt();
    assert!(off <= 0.3, "endpoint mean {mean}");

    // the two learned flows land as close to each other as to the target
    let draw = sample_target(&target, 256, 901);
    let between = empirical_w1_exact(&rows(&runs[0]), &rows(&runs[1])).unwrap();
    let to_target = runs
        .iter()
        .map(|r| empirical_w1_exact(&rows(r), &rows(&draw)).unwrap())
        .fold(0.0, f64::max);
    assert!(between <= to_target + 0.15, "between {between}, to target {to_target}");
}

#[test]
fn trained_discriminator_respects_lipschitz_bound() {
    let gen = sample_reference(2, 128, 1);
    let target = sample_target(&TargetKind::circle(1.0, 0.0, 2), 128, 2);
    let cfg = DivergenceConfig {
        inner_iters: 2000,
        adam: AdamConfig::with_lr(1e-3),
        ..DivergenceConfig::default()
    };
    let init = Discriminator::new(MlpSpec::new(2, vec![32, 32], Activation::Softplus), cfg.f, cfg.domain_margin, 3).unwrap();
    let disc = train_discriminator(gen.view(), target.view(), cfg, init, 4).unwrap();

    let z = interpolates(gen.view(), target.view(), &mut ChaCha8Rng::seed_from_u64(5));
    let grads = disc.input_gradient(z.view()).unwrap();
    let mut norms: Vec<f64> = grads.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    norms.sort_by(f64::total_cmp);
    let q99 = norms[(0.99 * (norms.len() - 1) as f64).round() as usize];
    assert!(q99 <= 1.1 * cfg.lipschitz, "0.99 quantile {q99}");
}
