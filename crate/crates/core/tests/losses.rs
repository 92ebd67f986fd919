use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use simvae::losses::*;
use simvae::tensor::{Graph, Tensor};

/// Monte-Carlo estimate of KL(N(mu, s^2) || N(0, 1)) = E_q[log q(z) - log p(z)]
/// with its standard error.
fn mc_kl(mu: f64, logvar: f64, samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let s = (0.5 * logvar).exp();
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let e: f64 = rng.sample(StandardNormal);
        let z = mu + s * e;
        // log q - log p, constants cancel
        let v = -0.5 * e * e - 0.5 * logvar + 0.5 * z * z;
        sum += v;
        sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn kl_matches_monte_carlo_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let mu: f64 = rng.random_range(-2.0..2.0);
        let lv: f64 = rng.random_range(-2.0..1.5);
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![1, 1], vec![mu]).unwrap());
        let l = g.constant(Tensor::new(vec![1, 1], vec![lv]).unwrap());
        let k = kl_gaussian(&mut g, m, l).unwrap();
        let analytic = g.value(k).item();
        let (est, se) = mc_kl(mu, lv, 1_000_000, &mut rng);
        assert!((analytic - est).abs() <= 3.0 * se, "mu {mu} lv {lv}: {analytic} vs {est} ± {se}");
    }
}

fn two_pass(z: &[f64], y: &[f64]) -> f64 {
    let n = z.len() as f64;
    let (mz, my) = (z.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = z.iter().zip(y).map(|(a, b)| (a - mz) * (b - my)).sum();
    let vz: f64 = z.iter().map(|a| (a - mz).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vz.sqrt() * vy.sqrt())
}

#[test]
fn pearson_matches_two_pass_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.random_range(3..200);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = z.iter().map(|v| 0.3 * v + rng.random_range(0.0..85.0)).collect();
        assert!((pearson(&z, &y).unwrap().r - two_pass(&z, &y)).abs() <= 1e-12);
    }
}

#[test]
fn graph_similarity_equals_minus_mean_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..85.0)).collect();
    let mut g = Graph::new();
    let zv = g.param(Tensor::new(vec![12, 2], z.clone()).unwrap());
    let s = similarity_loss(&mut g, zv, &y, &PearsonSimilarity::default()).unwrap();
    let col = |k: usize| (0..12).map(|i| z[i * 2 + k]).collect::<Vec<_>>();
    let expected = -0.5 * (two_pass(&col(0), &y) + two_pass(&col(1), &y));
    assert!((g.value(s).item() - expected).abs() < 1e-12);
}

#[test]
fn negative_weights_rejected() {
    let x = Tensor::new(vec![3, 1, 1, 1, 1], vec![0.1, 0.2, 0.3]).unwrap();
    let mu = Tensor::new(vec![3, 1], vec![0.1, 0.5, 0.9]).unwrap();
    let m = PearsonSimilarity::default();
    let w = LossWeights { beta: -1.0, alpha: 0.0 };
    assert!(evaluate_loss(&x, &x, &mu, &mu, &mu, &[1.0, 2.0, 3.0], w, &m).is_err());
}

proptest! {
    #[test]
    fn kl_is_non_negative(mu in prop::collection::vec(-3.0f64..3.0, 6), lv in prop::collection::vec(-3.0f64..3.0, 6)) {
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![2, 3], mu).unwrap());
        let l = g.constant(Tensor::new(vec![2, 3], lv).unwrap());
        let k = kl_gaussian(&mut g, m, l).unwrap();
        prop_assert!(g.value(k).item() >= 0.0);
    }

    #[test]
    fn pearson_is_bounded_and_affine_invariant(
        z in prop::collection::vec(-10.0f64..10.0, 3..40),
        a in 0.1f64..10.0,
        b in -10.0f64..10.0,
    ) {
        let y: Vec<f64> = z.iter().enumerate().map(|(i, v)| v * v + i as f64).collect();
        let c = pearson(&z, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c.r));
        prop_assume!(!c.degenerate);
        let za: Vec<f64> = z.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson(&za, &y).unwrap().r - c.r).abs() < 1e-9);
    }
}
