//! Kolmogorov–Smirnov distances.

use std::cmp::Ordering;

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    v
}

/// Exact sup-norm distance between the empirical CDFs of two samples.
///
/// The supremum is attained at a sample point, so a single merged sweep over
/// both sorted samples visits every candidate; tied values are consumed
/// together before the CDFs are compared.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.is_empty() && b.is_empty() { 0.0 } else { 1.0 };
    }
    let a = sorted(a);
    let b = sorted(b);
    ks_distance_sorted(&a, &b)
}

/// [`ks_distance`] for samples that are already sorted ascending.
pub fn ks_distance_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best = 0.0_f64;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// Survival function of the Kolmogorov distribution, `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test of `sample` against U(0, 1).
///
/// Returns the statistic `D` and an asymptotic p-value using Stephens'
/// small-sample correction.
pub fn ks_test_uniform(sample: &[f64]) -> (f64, f64) {
    let xs = sorted(sample);
    let n = xs.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = x.clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    (d, kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Brute force: evaluate both ECDFs at every pooled point.
    fn brute(a: &[f64], b: &[f64]) -> f64 {
        let ecdf = |s: &[f64], t: f64| s.iter().filter(|&&v| v <= t).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b)
            .map(|&t| (ecdf(a, t) - ecdf(b, t)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn matches_brute_force_with_ties() {
        let a = [0.1, 0.5, 0.5, 0.9, 2.0, -1.0];
        let b = [0.5, 0.5, 3.0, -2.0];
        assert!((ks_distance(&a, &b) - brute(&a, &b)).abs() < 1e-15);
        assert_eq!(ks_distance(&a, &a), 0.0);
        assert_eq!(ks_distance(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // Classical critical points of the limiting distribution.
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn uniform_grid_is_accepted() {
        let s: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let (d, p) = ks_test_uniform(&s);
        assert!(d <= 0.0005 + 1e-12);
        assert!(p > 0.99);
        let skew: Vec<f64> = s.iter().map(|v| v * v).collect();
        assert!(ks_test_uniform(&skew).1 < 1e-6);
    }
}
