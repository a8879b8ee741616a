use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::oracles::{conjugate_check, finite_diff_grad, ConjugateGrid};

const EPS: f64 = 1e-3;

fn linear_1d(slope: f64) -> Discriminator {
    // relu(x) and relu(-x) recombined: phi(x) = slope * x
    let spec = MlpSpec::new(1, vec![2], Activation::Relu);
    let net = MlpParams::from_flat(spec, vec![1.0, -1.0, 0.0, 0.0, slope, -slope, 0.0], 0).unwrap();
    Discriminator::from_net(net, FKind::Kl, EPS)
}

fn constant(f: FKind, value: f64) -> Discriminator {
    let mut net = MlpParams::zeros(MlpSpec::new(2, vec![4], Activation::Softplus)).unwrap();
    let bias = match f {
        FKind::ReverseKl => (-value - EPS).exp_m1().ln(),
        FKind::Kl => value,
    };
    net.set_output_bias(bias);
    Discriminator::from_net(net, f, EPS)
}

fn random_points(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.gen_range(-2.0..2.0))
}

#[test]
fn conjugate_values() {
    assert_eq!(FKind::ReverseKl.f_star(-1.0), -1.0);
    assert_eq!(FKind::Kl.f_star(1.0), 1.0);
    assert_eq!(FKind::ReverseKl.f_star(0.0), f64::INFINITY);
    assert!(matches!(f_star_checked(FKind::ReverseKl, -1e-4, EPS), Err(DivergenceError::Domain { .. })));
    let grid = ConjugateGrid::default();
    assert!((conjugate_check(FKind::ReverseKl, -1.0, grid) + 1.0).abs() < 1e-3);
    assert!((conjugate_check(FKind::Kl, 1.0, grid) - 1.0).abs() < 1e-3);
    for f in [FKind::ReverseKl, FKind::Kl] {
        assert_eq!(f.f(1.0), 0.0);
        assert_eq!(f.to_string().parse::<FKind>().unwrap(), f);
    }
    assert!("js".parse::<FKind>().is_err());
}

#[test]
fn output_transform() {
    let x = array![[0.3, -1.0], [2.0, 5.0]];
    let zero = MlpParams::zeros(MlpSpec::new(2, vec![3], Activation::Tanh)).unwrap();
    let rkl = Discriminator::from_net(zero.clone(), FKind::ReverseKl, EPS).evaluate(x.view()).unwrap();
    for v in rkl.iter() {
        assert!((v + 2f64.ln() + EPS).abs() < 1e-15);
        assert!((v + 0.6941).abs() < 1e-4);
    }
    let kl = Discriminator::from_net(zero, FKind::Kl, EPS).evaluate(x.view()).unwrap();
    assert!(kl.iter().all(|&v| v == 0.0));
}

#[test]
fn composed_input_gradient() {
    let net = MlpParams::init(MlpSpec::new(3, vec![6, 5], Activation::Softplus), 4).unwrap();
    let disc = Discriminator::from_net(net.clone(), FKind::ReverseKl, EPS);
    let x = [0.4, -0.7, 1.1];
    let row = Array2::from_shape_vec((1, 3), x.to_vec()).unwrap();
    let g = disc.input_gradient(row.view()).unwrap();

    let raw = |p: &[f64]| net.evaluate(Array2::from_shape_vec((1, 3), p.to_vec()).unwrap().view()).unwrap()[0];
    let sig = crate::autodiff::sigmoid(raw(&x));
    let raw_grad = finite_diff_grad(raw, &x, 1e-6);
    let phi_fd = finite_diff_grad(
        |p| disc.evaluate(Array2::from_shape_vec((1, 3), p.to_vec()).unwrap().view()).unwrap()[0],
        &x,
        1e-6,
    );
    for j in 0..3 {
        assert!((g[[0, j]] + sig * raw_grad[j]).abs() < 1e-8);
        assert!((g[[0, j]] - phi_fd[j]).abs() < 1e-8);
    }
}

#[test]
fn constant_discriminators_give_zero() {
    let a = random_points(7, 2, 1);
    let b = random_points(3, 2, 2);
    for (f, v) in [(FKind::ReverseKl, -1.0), (FKind::Kl, 1.0)] {
        let disc = constant(f, v);
        let phi = disc.evaluate(a.view()).unwrap();
        assert!(phi.iter().all(|p| (p - v).abs() < 1e-12));
        assert!(dual_estimate(&disc, a.view(), b.view()).unwrap().abs() < 1e-12);
    }
    let disc = constant(FKind::Kl, 1.0);
    assert!(matches!(
        dual_estimate(&disc, a.view(), Array2::zeros((0, 2)).view()),
        Err(DivergenceError::EmptySamples)
    ));
    assert!(matches!(
        dual_estimate(&disc, a.view(), random_points(2, 3, 0).view()),
        Err(DivergenceError::DimensionMismatch { .. })
    ));
}

#[test]
fn ratio_domain_violation() {
    let disc = constant(FKind::ReverseKl, -1.0);
    assert!(matches!(
        sigma_likelihood_ratio(&disc, &[0.0, 0.0], -5.0),
        Err(DivergenceError::Domain { value, .. }) if (value - 4.0).abs() < 1e-12
    ));
}

#[test]
fn penalty_on_linear_functions() {
    let gen = array![[-1.5], [0.3], [2.0], [0.7]];
    let target = array![[0.5], [1.7], [-0.9], [3.1], [4.0]];
    let shallow = gradient_penalty(&linear_1d(0.5), gen.view(), target.view(), 1.0, 7).unwrap();
    assert_eq!(shallow, 0.0);
    let steep = gradient_penalty(&linear_1d(2.0), gen.view(), target.view(), 1.0, 7).unwrap();
    // min(M, N) = 4 interpolates
    assert!((steep + 12.0).abs() < 1e-12, "{steep}");
}

#[test]
fn penalty_parameter_gradient() {
    let spec = MlpSpec::new(2, vec![5, 4], Activation::Softplus);
    let mut net = MlpParams::init(spec.clone(), 9).unwrap();
    for w in net.flat_mut() {
        *w *= 3.0;
    }
    let disc = Discriminator::from_net(net.clone(), FKind::ReverseKl, EPS);
    let gen = random_points(6, 2, 3);
    let target = random_points(6, 2, 4);
    let lipschitz = 0.1;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = interpolates(gen.view(), target.view(), &mut rng);
    let tape = Tape::new();
    let bound = disc.bind(&tape, true);
    let p = bound.penalty(tape.constant(z), lipschitz).unwrap();
    assert!(p.scalar() < 0.0);
    let analytic = BoundMlp::flatten(&tape.gradient(p, &bound.net.params()).unwrap());

    let numeric = finite_diff_grad(
        |theta| {
            let d = Discriminator::from_net(MlpParams::from_flat(spec.clone(), theta.to_vec(), 0).unwrap(), FKind::ReverseKl, EPS);
            gradient_penalty(&d, gen.view(), target.view(), lipschitz, 5).unwrap()
        },
        net.flat(),
        1e-6,
    );
    for (a, n) in analytic.iter().zip(&numeric) {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-2);
        assert!(rel < 1e-5, "{a} vs {n}");
    }
}

#[test]
fn ratio_values() {
    let rkl = constant(FKind::ReverseKl, -1.5);
    assert!((sigma_likelihood_ratio(&rkl, &[0.2, 0.1], -0.5).unwrap() - 1.0).abs() < 1e-12);
    let kl = constant(FKind::Kl, 3.0);
    assert!((sigma_likelihood_ratio(&kl, &[0.2, 0.1], 2.0).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(
        sigma_likelihood_ratio(&kl, &[0.2], 0.0),
        Err(DivergenceError::DimensionMismatch { .. })
    ));
}

#[test]
fn normalized_ratio_averages_to_one() {
    let target = random_points(300, 2, 8);
    for f in [FKind::ReverseKl, FKind::Kl] {
        let disc = Discriminator::new(MlpSpec::new(2, vec![8, 8], Activation::Tanh), f, EPS, 3).unwrap();
        let c = normalize_ratio_shift(&disc, target.view()).unwrap();
        let mean: f64 = target
            .rows()
            .into_iter()
            .map(|r| sigma_likelihood_ratio(&disc, r.as_slice().unwrap(), c).unwrap())
            .sum::<f64>()
            / 300.0;
        assert!((mean - 1.0).abs() < 0.05, "{f}: {mean}");
    }
}

#[test]
fn identical_sets_stay_near_zero() {
    let x = random_points(64, 2, 10);
    let spec = MlpSpec::new(2, vec![16, 16], Activation::Softplus);
    let cfg = DivergenceConfig {
        inner_iters: 200,
        adam: AdamConfig::with_lr(1e-3),
        ..DivergenceConfig::default()
    };
    let disc = train_discriminator(x.view(), x.view(), cfg, Discriminator::new(spec, cfg.f, EPS, 1).unwrap(), 2).unwrap();
    let est = dual_estimate(&disc, x.view(), x.view()).unwrap();
    assert!(est.abs() <= 0.05, "{est}");
}

#[test]
fn warm_started_trainer_improves_separation() {
    let gen = Array2::zeros((32, 1));
    let target = Array2::from_elem((32, 1), 0.5);
    let spec = MlpSpec::new(1, vec![16, 16], Activation::Softplus);
    let cfg = DivergenceConfig {
        adam: AdamConfig::with_lr(1e-3),
        ..DivergenceConfig::default()
    };
    let mut trainer = DiscriminatorTrainer::new(Discriminator::new(spec, cfg.f, EPS, 4).unwrap(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = trainer.train(gen.view(), target.view(), &mut rng).unwrap();
    for _ in 0..100 {
        trainer.train(gen.view(), target.view(), &mut rng).unwrap();
    }
    let later = dual_estimate(&trainer.disc, gen.view(), target.view()).unwrap();
    assert!(later > first.dual + 0.1, "{} -> {later}", first.dual);
    assert!(later <= 0.5 + 0.05);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conjugate_matches_brute_force(y in -6.0f64..-0.05, z in -4.0f64..2.5) {
        let grid = ConjugateGrid::default();
        prop_assert!((FKind::ReverseKl.f_star(y) - conjugate_check(FKind::ReverseKl, y, grid)).abs() < 1e-3);
        prop_assert!((FKind::Kl.f_star(z) - conjugate_check(FKind::Kl, z, grid)).abs() < 1e-3);
    }

    #[test]
    fn penalty_is_non_positive(seed in 0u64..500, lipschitz in 0.05f64..3.0) {
        let disc = Discriminator::new(MlpSpec::new(2, vec![6], Activation::Tanh), FKind::ReverseKl, EPS, seed).unwrap();
        let p = gradient_penalty(&disc, random_points(5, 2, seed).view(), random_points(9, 2, seed + 1).view(), lipschitz, seed).unwrap();
        prop_assert!(p <= 0.0);
    }
}
