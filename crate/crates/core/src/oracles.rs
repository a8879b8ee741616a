//! Independent ground truth: closed forms and brute-force solvers.
//!
//! Nothing in here touches the tape, the networks or the training loop.
//! The test suites use these functions to check the estimators, so they
//! are written for clarity over speed.

use thiserror::Error;

use crate::divergence::FKind;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("variance entry {index} is not positive ({value})")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("point sets must have equal size ({0} vs {1})")]
    UnequalSizes(usize, usize),
    #[error("assignment oracle is capped at n = {cap}, got {n}")]
    TooLarge { n: usize, cap: usize },
}

/// Largest instance the exact assignment oracle accepts.
pub const ASSIGNMENT_CAP: usize = 256;

fn check_gaussians(m1: &[f64], c1: &[f64], m2: &[f64], c2: &[f64]) -> Result<(), OracleError> {
    let d = m1.len();
    for len in [c1.len(), m2.len(), c2.len()] {
        if len != d {
            return Err(OracleError::DimensionMismatch(d, len));
        }
    }
    for (index, &value) in c1.iter().chain(c2).enumerate() {
        if !(value > 0.0) {
            return Err(OracleError::NonPositiveVariance {
                index: index % d,
                value,
            });
        }
    }
    Ok(())
}

/// Squared 2-Wasserstein distance between Gaussians with diagonal
/// covariances (variances `c1`, `c2`).
pub fn gaussian_w2_squared(m1: &[f64], c1: &[f64], m2: &[f64], c2: &[f64]) -> Result<f64, OracleError> {
    check_gaussians(m1, c1, m2, c2)?;
    let mean: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    let cov: f64 = c1.iter().zip(c2).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    Ok(mean + cov)
}

/// `KL(N(m1, C1) || N(m2, C2))` for diagonal covariances.
pub fn gaussian_kl(m1: &[f64], c1: &[f64], m2: &[f64], c2: &[f64]) -> Result<f64, OracleError> {
    check_gaussians(m1, c1, m2, c2)?;
    let mut total = 0.0;
    for i in 0..m1.len() {
        total += c1[i] / c2[i] + (m2[i] - m1[i]).powi(2) / c2[i] - 1.0 + (c2[i] / c1[i]).ln();
    }
    Ok(0.5 * total)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Minimum-cost perfect matching on a dense square cost matrix.
///
/// Shortest augmenting paths with row/column potentials, O(n^3).
/// Returns `assignment[row] = column`.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = free)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact empirical 1-Wasserstein distance between two equal-size point
/// clouds: `(1/n) min_sigma sum_i |a_i - b_sigma(i)|`.
pub fn empirical_w1_exact(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, OracleError> {
    if a.len() != b.len() {
        return Err(OracleError::UnequalSizes(a.len(), b.len()));
    }
    let n = a.len();
    if n > ASSIGNMENT_CAP {
        return Err(OracleError::TooLarge {
            n,
            cap: ASSIGNMENT_CAP,
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let d = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|p| p.len() != d) {
        return Err(OracleError::DimensionMismatch(d, bad.len()));
    }
    let cost: Vec<Vec<f64>> = a
        .iter()
        .map(|x| b.iter().map(|y| euclidean(x, y)).collect())
        .collect();
    let assignment = solve_assignment(&cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(total / n as f64)
}

/// Minimizes a unimodal function on `[lo, hi]` by golden-section search.
pub fn golden_section_min<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    // the endpoints are candidates too: the minimizer may sit on the boundary
    let mut best = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    for x in [lo, hi] {
        let fx = f(x);
        if fx < best.1 {
            best = (x, fx);
        }
    }
    best
}

/// Closed form of the Lipschitz-regularized divergence between two Diracs
/// a distance `dist` apart, generated mass at one point and target at
/// the other.
pub fn fgamma_two_dirac_closed_form(f: FKind, lipschitz: f64, dist: f64) -> f64 {
    let ld = lipschitz * dist;
    match f {
        FKind::ReverseKl if ld > 1.0 => 1.0 + ld.ln(),
        FKind::ReverseKl | FKind::Kl => ld,
    }
}

/// Same quantity computed as the primal infimum over the mass `a` that
/// is moved onto the target, by golden-section search.
///
/// For reverse KL the cost is `-log a + L a dist` over `a in (0, 1]`.
/// For KL absolute continuity forces all of the mass over (`a = 1`).
pub fn fgamma_two_dirac(f: FKind, lipschitz: f64, dist: f64) -> f64 {
    match f {
        FKind::ReverseKl => {
            let cost = |a: f64| -a.ln() + lipschitz * a * dist;
            golden_section_min(cost, 1e-12, 1.0, 1e-12).1
        }
        FKind::Kl => lipschitz * dist,
    }
}

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Log-spaced search grid for [`conjugate_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConjugateGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for ConjugateGrid {
    fn default() -> Self {
        Self {
            lo: 1e-6,
            hi: 1e6,
            points: 100_000,
        }
    }
}

/// Brute-force convex conjugate `sup_x { x y - f(x) }` over a log grid.
///
/// Returns `+inf` when the maximum sits on the upper end of the grid,
/// which is how an unbounded supremum shows up.
pub fn conjugate_check(f: FKind, y: f64, grid: ConjugateGrid) -> f64 {
    let (llo, lhi) = (grid.lo.ln(), grid.hi.ln());
    let step = (lhi - llo) / (grid.points - 1) as f64;
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for i in 0..grid.points {
        let x = (llo + step * i as f64).exp();
        let val = x * y - f.f(x);
        if val > best {
            best = val;
            arg = i;
        }
    }
    if arg == grid.points - 1 {
        f64::INFINITY
    } else {
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn w2_closed_forms() {
        assert_eq!(gaussian_w2_squared(&[0.0, 0.0], &[1.0, 1.0], &[3.0, 0.0], &[1.0, 1.0]).unwrap(), 9.0);
        assert_eq!(gaussian_w2_squared(&[0.0], &[1.0], &[0.0], &[4.0]).unwrap(), 1.0);
        assert_eq!(gaussian_w2_squared(&[1.0, 2.0], &[0.5, 3.0], &[1.0, 2.0], &[0.5, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(gaussian_kl(&[0.3], &[2.0], &[0.3], &[2.0]).unwrap(), 0.0);
        assert!((gaussian_kl(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        let expect = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((gaussian_kl(&[0.0], &[4.0], &[0.0], &[1.0]).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn gaussian_oracles_reject_bad_variance() {
        assert!(matches!(
            gaussian_w2_squared(&[0.0], &[0.0], &[0.0], &[1.0]),
            Err(OracleError::NonPositiveVariance { .. })
        ));
        assert!(gaussian_kl(&[0.0], &[1.0], &[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn w1_small_cases() {
        assert_eq!(empirical_w1_exact(&[vec![0.0]], &[vec![3.0]]).unwrap(), 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cloud(&mut rng, 20, 3);
        assert_eq!(empirical_w1_exact(&a, &a).unwrap(), 0.0);
        assert!(matches!(
            empirical_w1_exact(&a, &a[..5]),
            Err(OracleError::UnequalSizes(20, 5))
        ));
    }

    #[test]
    fn w1_matches_permutation_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = cloud(&mut rng, 5, 2);
            let b = cloud(&mut rng, 5, 2);
            let brute = (0..5)
                .permutations(5)
                .map(|perm| perm.iter().enumerate().map(|(i, &j)| euclidean(&a[i], &b[j])).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                / 5.0;
            let fast = empirical_w1_exact(&a, &b).unwrap();
            assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}");
        }
    }

    #[test]
    fn two_dirac_values() {
        assert_eq!(fgamma_two_dirac(FKind::ReverseKl, 1.0, 0.0), 0.0);
        assert!((fgamma_two_dirac(FKind::ReverseKl, 1.0, 0.5) - 0.5).abs() < 1e-9);
        assert!((fgamma_two_dirac(FKind::ReverseKl, 1.0, std::f64::consts::E) - 2.0).abs() < 1e-9);
        assert_eq!(fgamma_two_dirac(FKind::Kl, 2.0, 3.0), 6.0);
        for d in [0.0, 0.3, 1.0, 1.7, 5.0, 40.0] {
            let closed = fgamma_two_dirac_closed_form(FKind::ReverseKl, 1.0, d);
            assert!((fgamma_two_dirac(FKind::ReverseKl, 1.0, d) - closed).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_basics() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let z = finite_diff_grad(|_| 4.2, &[1.0, -3.0, 0.5], 1e-5);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conjugate_grid_values() {
        let g = ConjugateGrid::default();
        assert!((conjugate_check(FKind::ReverseKl, -1.0, g) + 1.0).abs() < 1e-3);
        assert!((conjugate_check(FKind::Kl, 1.0, g) - 1.0).abs() < 1e-3);
        assert_eq!(conjugate_check(FKind::ReverseKl, 0.5, g), f64::INFINITY);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn w1_is_a_metric(seed in 0u64..10_000, n in 1usize..32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, n, 2);
            let b = cloud(&mut rng, n, 2);
            let c = cloud(&mut rng, n, 2);
            let ab = empirical_w1_exact(&a, &b).unwrap();
            let ba = empirical_w1_exact(&b, &a).unwrap();
            let bc = empirical_w1_exact(&b, &c).unwrap();
            let ac = empirical_w1_exact(&a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ac <= ab + bc + 1e-9);
            // a permuted copy is the same multiset
            let mut shuffled = a.clone();
            shuffled.reverse();
            prop_assert!(empirical_w1_exact(&a, &shuffled).unwrap() < 1e-12);
        }

        #[test]
        fn two_dirac_bounded_and_monotone(l in 0.1f64..5.0, d in 0.0f64..10.0, dd in 0.0f64..2.0, dl in 0.0f64..2.0) {
            for f in [FKind::ReverseKl, FKind::Kl] {
                let base = fgamma_two_dirac(f, l, d);
                prop_assert!(base <= l * d + 1e-9);
                prop_assert!(fgamma_two_dirac(f, l, d + dd) >= base - 1e-9);
                prop_assert!(fgamma_two_dirac(f, l + dl, d) >= base - 1e-9);
            }
        }

        #[test]
        fn w2_symmetric(m1 in prop::collection::vec(-5.0f64..5.0, 3), m2 in prop::collection::vec(-5.0f64..5.0, 3),
                        c1 in prop::collection::vec(0.1f64..4.0, 3), c2 in prop::collection::vec(0.1f64..4.0, 3)) {
            let ab = gaussian_w2_squared(&m1, &c1, &m2, &c2).unwrap();
            let ba = gaussian_w2_squared(&m2, &c2, &m1, &c1).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert_eq!(gaussian_w2_squared(&m1, &c1, &m1, &c1).unwrap(), 0.0);
        }
    }
}
