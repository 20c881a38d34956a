use msnerf::rays::{Ray, Vec3};
use msnerf::sampling::{piecewise_initial_samples, pdf_resample, resample_edges, HISTOGRAM_PADDING};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Inverse CDF by linear scan over the padded, normalized histogram.
fn brute_force_quantile(edges: &[f64], weights: &[f64], u: f64) -> f64 {
    let k = weights.len();
    if weights.iter().all(|w| *w <= 0.0) {
        return edges[0] + (edges[k] - edges[0]) * u;
    }
    let pad = HISTOGRAM_PADDING / k as f64;
    let mut cum = vec![0.0];
    let mut acc = 0.0;
    for w in weights {
        acc += w.max(0.0) + pad;
        cum.push(acc);
    }
    let cdf: Vec<f64> = cum.iter().map(|c| c / acc).collect();
    let mut j = 0;
    for i in 0..k {
        if cdf[i] <= u {
            j = i;
        }
    }
    let frac = ((u - cdf[j]) / (cdf[j + 1] - cdf[j])).clamp(0.0, 1.0);
    edges[j] + frac * (edges[j + 1] - edges[j])
}

fn random_histogram(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let k = rng.random_range(1..40);
    let mut edges = vec![rng.random_range(0.0..2.0)];
    for _ in 0..k {
        let last = *edges.last().unwrap();
        edges.push(last + rng.random_range(1e-3..1.0));
    }
    let weights = (0..k)
        .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>().powi(3) })
        .collect();
    (edges, weights)
}

#[test]
fn pdf_resample_equals_brute_force_inverse_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let (edges, weights) = random_histogram(&mut rng);
        let m = rng.random_range(1..64);
        let got = pdf_resample::<f64, ChaCha8Rng>(&edges, &weights, m, None);
        assert_eq!(got.len(), m);
        for (k, t) in got.iter().enumerate() {
            let u = (k as f64 + 0.5) / m as f64;
            assert_eq!(t.to_bits(), brute_force_quantile(&edges, &weights, u).to_bits());
        }
    }
}

#[test]
fn half_of_the_initial_samples_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let near = rng.random_range(0.0..2.0);
        let scale = rng.random_range(0.1..3.0);
        let far = near + scale + rng.random_range(0.01..50.0);
        let n = 2 * rng.random_range(1..64);
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), near, far);
        let split = near + scale;
        for jitter in [false, true] {
            let s = if jitter {
                piecewise_initial_samples(&ray, n, scale, Some(&mut rng)).unwrap()
            } else {
                piecewise_initial_samples::<ChaCha8Rng>(&ray, n, scale, None).unwrap()
            };
            assert_eq!(s.t_values().iter().filter(|t| **t <= split).count(), n / 2);
            assert_eq!(s.edges()[n / 2], split);
        }
    }
}

/// Kolmogorov-Smirnov statistic of samples against U(0, 1).
fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn jitter_is_uniform_within_uniform_bins() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let ray = Ray::new(Vec3::zeros(), Vec3::z(), 0.5, 10.0);
    let mut fracs = Vec::new();
    for _ in 0..500 {
        let s = piecewise_initial_samples(&ray, 16, 2.0, Some(&mut rng)).unwrap();
        let e = s.edges();
        for i in 0..8 {
            fracs.push((s.t_values()[i] - e[i]) / (e[i + 1] - e[i]));
        }
    }
    // Critical value at alpha = 0.001 is 1.95 / sqrt(n).
    let n = fracs.len() as f64;
    assert!(ks_uniform(fracs) < 1.95 / n.sqrt());
}

#[test]
fn jitter_is_uniform_in_disparity_within_outer_bins() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let ray = Ray::new(Vec3::zeros(), Vec3::z(), 0.5, 10.0);
    let mut fracs = Vec::new();
    for _ in 0..500 {
        let s = piecewise_initial_samples(&ray, 16, 2.0, Some(&mut rng)).unwrap();
        let e = s.edges();
        for i in 8..16 {
            let (a, b) = (1.0 / e[i], 1.0 / e[i + 1]);
            fracs.push((1.0 / s.t_values()[i] - a) / (b - a));
        }
    }
    let n = fracs.len() as f64;
    assert!(ks_uniform(fracs) < 1.95 / n.sqrt());
}

#[test]
fn stratified_quantiles_are_uniform_over_a_flat_histogram() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let edges: Vec<f64> = (0..=10).map(|i| i as f64).collect();
    let weights = vec![1.0; 10];
    let mut xs = Vec::new();
    for _ in 0..200 {
        xs.extend(pdf_resample(&edges, &weights, 16, Some(&mut rng)).iter().map(|t| t / 10.0));
    }
    let n = xs.len() as f64;
    assert!(ks_uniform(xs) < 1.95 / n.sqrt());
}

proptest! {
    #[test]
    fn resampled_edges_stay_sorted_inside_support(seed in any::<u64>(), n in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (edges, weights) = random_histogram(&mut rng);
        let out = resample_edges(&edges, &weights, n, Some(&mut rng));
        prop_assert_eq!(out.len(), n + 1);
        prop_assert_eq!(out[0], edges[0]);
        prop_assert_eq!(out[n], *edges.last().unwrap());
        prop_assert!(out.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn resampling_never_leaves_the_histogram(seed in any::<u64>(), m in 1usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (edges, weights) = random_histogram(&mut rng);
        let out = pdf_resample(&edges, &weights, m, Some(&mut rng));
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(out.iter().all(|t| *t >= edges[0] && *t <= *edges.last().unwrap()));
    }
}
