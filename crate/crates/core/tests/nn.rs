use knolling::nn::gmm::GmmParams;
use knolling::nn::ops::{log_softmax, masked_cross_entropy, softmax};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

fn mixture() -> GmmParams {
    GmmParams {
        weights: vec![0.5, 0.3, 0.2],
        means: vec![[0.0, 0.0], [2.0, 1.0], [-1.5, 2.5]],
        stds: vec![[0.5, 0.8], [0.3, 0.3], [1.0, 0.4]],
    }
}

fn cell_probability(g: &GmmParams, x: (f64, f64), y: (f64, f64), temperature: f64) -> f64 {
    (0..g.k())
        .map(|j| {
            let nx = Normal::new(g.means[j][0], g.stds[j][0] * temperature).unwrap();
            let ny = Normal::new(g.means[j][1], g.stds[j][1] * temperature).unwrap();
            g.weights[j] * (nx.cdf(x.1) - nx.cdf(x.0)) * (ny.cdf(y.1) - ny.cdf(y.0))
        })
        .sum()
}

/// Histogram of draws over a grid (plus one catch-all cell) against the
/// mixture's own cell probabilities.
fn chi_square_p_value(temperature: f64, seed: u64) -> f64 {
    let g = mixture();
    let (x0, x1, y0, y1, n_cells) = (-4.0, 4.0, -3.0, 5.0, 16usize);
    let edges = |lo: f64, hi: f64| -> Vec<f64> { (0..=n_cells).map(|i| lo + (hi - lo) * i as f64 / n_cells as f64).collect() };
    let (ex, ey) = (edges(x0, x1), edges(y0, y1));
    let mut counts = vec![0usize; n_cells * n_cells + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = 100_000;
    for _ in 0..draws {
        let [x, y] = g.sample(temperature, &mut rng);
        let cell = if x < x0 || x >= x1 || y < y0 || y >= y1 {
            n_cells * n_cells
        } else {
            let i = (((x - x0) / (x1 - x0)) * n_cells as f64) as usize;
            let j = (((y - y0) / (y1 - y0)) * n_cells as f64) as usize;
            i.min(n_cells - 1) * n_cells + j.min(n_cells - 1)
        };
        counts[cell] += 1;
    }
    let mut probs = Vec::with_capacity(counts.len());
    for i in 0..n_cells {
        for j in 0..n_cells {
            probs.push(cell_probability(&g, (ex[i], ex[i + 1]), (ey[j], ey[j + 1]), temperature));
        }
    }
    probs.push(1.0 - probs.iter().sum::<f64>());
    // Pool sparse cells so every expected count is at least 5.
    let (mut stat, mut df, mut pool_o, mut pool_e) = (0.0, 0usize, 0.0, 0.0);
    for (&o, &p) in counts.iter().zip(&probs) {
        let e = p * draws as f64;
        if e < 5.0 {
            pool_o += o as f64;
            pool_e += e;
            continue;
        }
        stat += (o as f64 - e).powi(2) / e;
        df += 1;
    }
    if pool_e > 0.0 {
        stat += (pool_o - pool_e).powi(2) / pool_e.max(1e-12);
        df += 1;
    }
    1.0 - ChiSquared::new((df - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn samples_follow_the_mixture_density() {
    let p = chi_square_p_value(1.0, 2024);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn temperature_scales_the_spread() {
    let p = chi_square_p_value(0.5, 77);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn zero_temperature_returns_heaviest_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(mixture().sample(0.0, &mut rng), [0.0, 0.0]);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0..50.0f64, 1..10)) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let lp = log_softmax(&v);
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a.ln() - b).abs() < 1e-9 || *a < 1e-300);
        }
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero(logits in prop::collection::vec(-5.0..5.0f64, 8), labels in prop::collection::vec(0usize..2, 4)) {
        let mask = [true, true, false, true];
        let (loss, grad) = masked_cross_entropy(&logits, 2, &labels, &mask).unwrap();
        prop_assert!(loss >= 0.0);
        for r in 0..4 {
            let s = grad[2 * r] + grad[2 * r + 1];
            prop_assert!(s.abs() < 1e-12);
            if !mask[r] {
                prop_assert_eq!(grad[2 * r], 0.0);
            }
        }
    }
}
