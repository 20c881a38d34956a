use msnerf::sampling::Histogram;
use msnerf::training::{interlevel_loss, interlevel_loss_grad, spectral_mse_loss};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn three_band_loss_is_rgb_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let n = rng.random_range(1..500);
        let pred: Vec<f64> = (0..n * 3).map(|_| rng.random()).collect();
        let truth: Vec<f64> = (0..n * 3).map(|_| rng.random()).collect();
        let (loss, _) = spectral_mse_loss(&pred, &truth, 3).unwrap();
        // Per-pixel channel average of squared error, then averaged over pixels.
        let rgb: f64 = (0..n)
            .map(|p| {
                let (r, g, b) = (pred[3 * p] - truth[3 * p], pred[3 * p + 1] - truth[3 * p + 1], pred[3 * p + 2] - truth[3 * p + 2]);
                (r * r + g * g + b * b) / 3.0
            })
            .sum::<f64>()
            / n as f64;
        assert!((loss - rgb).abs() <= 1e-12);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let pred: Vec<f64> = (0..60).map(|_| rng.random()).collect();
    let truth: Vec<f64> = (0..60).map(|_| rng.random()).collect();
    let (_, g) = spectral_mse_loss(&pred, &truth, 6).unwrap();
    let h = 1e-6;
    for k in 0..60 {
        let (mut p, mut m) = (pred.clone(), pred.clone());
        p[k] += h;
        m[k] -= h;
        let numeric = (spectral_mse_loss(&p, &truth, 6).unwrap().0 - spectral_mse_loss(&m, &truth, 6).unwrap().0) / (2.0 * h);
        assert!((g[k] - numeric).abs() < 1e-9);
    }
}

#[test]
fn every_band_count_is_accepted() {
    for bands in [1usize, 3, 6, 12] {
        let pred = vec![0.25f32; 10 * bands];
        let truth = vec![0.75f32; 10 * bands];
        let (loss, g) = spectral_mse_loss(&pred, &truth, bands).unwrap();
        assert_eq!(loss, 0.25);
        assert_eq!(g.len(), 10 * bands);
    }
    assert!(spectral_mse_loss(&[0.0f32; 10], &[0.0; 10], 3).is_err());
}

fn random_hist(rng: &mut ChaCha8Rng, lo: f64, hi: f64, bins: usize) -> Histogram<f64> {
    let mut cuts: Vec<f64> = (0..bins - 1).map(|_| rng.random_range(lo..hi)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut edges = vec![lo];
    edges.extend(cuts);
    edges.push(hi);
    let raw: Vec<f64> = (0..bins).map(|_| rng.random::<f64>().powi(2)).collect();
    let s: f64 = raw.iter().sum();
    Histogram { edges, weights: raw.iter().map(|w| w / s).collect() }
}

/// Interlevel loss by checking every pair of bins for overlap.
fn brute_force_interlevel(fin: &Histogram<f64>, prop: &Histogram<f64>) -> f64 {
    let eps = f32::EPSILON as f64;
    let mut loss = 0.0;
    for i in 0..fin.weights.len() {
        let (lo, hi) = (fin.edges[i], fin.edges[i + 1]);
        let mut outer = 0.0;
        for j in 0..prop.weights.len() {
            if prop.edges[j] < hi && prop.edges[j + 1] > lo {
                outer += prop.weights[j];
            }
        }
        let w = fin.weights[i];
        let gap = (w - outer).max(0.0);
        loss += gap * gap / (w + eps);
    }
    loss
}

proptest! {
    #[test]
    fn interlevel_matches_pairwise_overlap(seed in any::<u64>(), nf in 1usize..40, np in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fin = random_hist(&mut rng, 0.5, 6.0, nf);
        let prop = random_hist(&mut rng, 0.5, 6.0, np);
        let (loss, _) = interlevel_loss_grad(&fin, &prop);
        prop_assert!((loss - brute_force_interlevel(&fin, &prop)).abs() <= 1e-12 * (1.0 + loss));
    }

    #[test]
    fn interlevel_gradient_matches_finite_differences(seed in any::<u64>(), nf in 1usize..20, np in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fin = random_hist(&mut rng, 0.0, 1.0, nf);
        let prop = random_hist(&mut rng, 0.0, 1.0, np);
        let (_, g) = interlevel_loss_grad(&fin, &prop);
        let h = 1e-7;
        for k in 0..np {
            let (mut p, mut m) = (prop.clone(), prop.clone());
            p.weights[k] += h;
            m.weights[k] -= h;
            let numeric = (brute_force_interlevel(&fin, &p) - brute_force_interlevel(&fin, &m)) / (2.0 * h);
            prop_assert!((g[k] - numeric).abs() <= 1e-5 * (1.0 + numeric.abs()), "bin {}: {} vs {}", k, g[k], numeric);
        }
    }

    #[test]
    fn covering_proposal_costs_nothing(seed in any::<u64>(), nf in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fin = random_hist(&mut rng, 1.0, 3.0, nf);
        let wide = Histogram { edges: vec![0.0, 10.0], weights: vec![1.0] };
        prop_assert_eq!(interlevel_loss(&fin, &[wide.clone(), wide]), 0.0);
    }
}
