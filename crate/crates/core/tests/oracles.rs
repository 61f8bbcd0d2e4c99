use mlaqp_core::drift::{ks_statistic, ks_threshold, AnswerEcdf, WorkloadStats};
use mlaqp_core::gbdt::{fit, FeatureMatrix, GbdtConfig, Loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest CDF gap, checked at every sample point by counting.
fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |s: &[f64], y: f64| s.iter().filter(|v| **v <= y).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&y| (cdf(a, y) - cdf(b, y)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn ks_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..300 {
        let n = rng.random_range(1..40);
        let m = rng.random_range(1..40);
        // integer draws give plenty of ties
        let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8))).collect();
        let b: Vec<f64> = (0..m).map(|_| f64::from(rng.random_range(0..8u8)) + 0.5 * f64::from(rng.random_range(0..2u8))).collect();
        let got = ks_statistic(&AnswerEcdf::new(a.clone()).unwrap(), &AnswerEcdf::new(b.clone()).unwrap()).unwrap();
        assert!((got - ks_brute(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn ks_threshold_examples() {
    // c(0.05) = 1.3581, sqrt(2/500) = 0.063246
    let t = ks_threshold(0.05, 500, 500).unwrap();
    assert!((t - 0.085894).abs() < 1e-5, "{t}");
    assert!(ks_threshold(0.0, 5, 5).is_err());
    assert!(ks_threshold(0.05, 0, 5).is_err());
}

fn invert(a: &[f64], d: usize) -> Vec<f64> {
    let mut m: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut row = a[i * d..(i + 1) * d].to_vec();
            row.extend((0..d).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..d {
        let p = (c..d).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..d {
            if r != c {
                let f = m[r][c];
                let src = m[c].clone();
                for (v, s) in m[r].iter_mut().zip(src) {
                    *v -= f * s;
                }
            }
        }
    }
    m.into_iter().flat_map(|row| row[d..].to_vec()).collect()
}

#[test]
fn mahalanobis_matches_explicit_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for d in [1, 2, 4, 7] {
        let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        // A A^T + I is symmetric positive definite
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
            }
        }
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let stats = WorkloadStats::from_moments(mean.clone(), cov.clone(), mean.clone(), 100).unwrap();
        let mut reg = cov.clone();
        for i in 0..d {
            reg[i * d + i] += stats.ridge();
        }
        let inv = invert(&reg, d);
        for _ in 0..20 {
            let m: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
            let diff: Vec<f64> = m.iter().zip(&mean).map(|(x, u)| x - u).collect();
            let q: f64 = (0..d)
                .map(|i| (0..d).map(|j| diff[i] * inv[i * d + j] * diff[j]).sum::<f64>())
                .sum();
            let got = stats.mahalanobis(&m).unwrap();
            assert!((got - q.sqrt()).abs() < 1e-8 * (1.0 + got), "d={d}: {got} vs {}", q.sqrt());
        }
    }
}

#[test]
fn mahalanobis_identity_is_euclidean() {
    let stats = WorkloadStats::from_moments(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 10).unwrap();
    assert!((stats.mahalanobis(&[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-5);
}

#[test]
fn pinball_constant_is_empirical_quantile() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(5..60);
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t = rng.random_range(0.02..0.98);
        let loss = |c: f64| -> f64 { ys.iter().map(|&y| if y >= c { t * (y - c) } else { (1.0 - t) * (c - y) }).sum() };
        // the minimum of a piecewise-linear convex function sits on a sample
        let best = ys.iter().map(|&c| loss(c)).fold(f64::INFINITY, f64::min);
        let x = FeatureMatrix::from_rows(&vec![vec![1.0]; n]);
        let model = fit(&x, &ys, &GbdtConfig::stump(), Loss::Pinball { level: t }).unwrap();
        assert!(loss(model.base_score) <= best + 1e-9, "t={t}");
    }
}
