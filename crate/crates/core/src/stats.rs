//! Small estimation utilities: moments, batch-means errors, sup-CDF
//! distances and Kolmogorov critical values.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Naive standard error sd / sqrt(n), valid for independent samples.
pub fn standard_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Standard error of the mean from `batches` contiguous batch means.
/// Absorbs autocorrelation shorter than the batch length.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let batches = batches.max(2);
    let len = xs.len() / batches;
    if len == 0 {
        return standard_error(xs);
    }
    let means: Vec<f64> = xs.chunks_exact(len).take(batches).map(mean).collect();
    standard_error(&means)
}

/// Cross-covariance of two equally long samples.
pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return f64::NAN;
    }
    let (mx, my) = (mean(&xs[..n]), mean(&ys[..n]));
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1) as f64
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    covariance(xs, ys) / (variance(xs) * variance(ys)).sqrt()
}

pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolated quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// sup_z |F_n(z) - F(z)| for a continuous reference CDF, accounting for ties.
pub fn sup_distance_to_cdf(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let s = sorted(xs);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0;
    while i < s.len() {
        let v = s[i];
        let mut k = i;
        while k < s.len() && s[k] == v {
            k += 1;
        }
        let f = cdf(v);
        let below = i as f64 / n;
        let at = k as f64 / n;
        d = d.max((f - below).abs()).max((at - f).abs());
        i = k;
    }
    d
}

/// Two-sample sup distance between empirical CDFs.
pub fn two_sample_sup_distance(xs: &[f64], ys: &[f64]) -> f64 {
    let a = sorted(xs);
    let b = sorted(ys);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut k) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && k < b.len() {
        let v = a[i].min(b[k]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while k < b.len() && b[k] <= v {
            k += 1;
        }
        d = d.max((i as f64 / na - k as f64 / nb).abs());
    }
    d
}

/// Survival function of the Kolmogorov distribution,
/// Q(x) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 x^2).
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * x * x).exp();
        sum += if (k as u64) % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Critical sup distance for `n` samples at significance `alpha`, using the
/// asymptotic Kolmogorov law with the Stephens finite-sample correction.
pub fn ks_critical(alpha: f64, n: usize) -> f64 {
    let (mut lo, mut hi) = (0.2, 5.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_survival(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    let rn = (n as f64).sqrt();
    lambda / (rn + 0.12 + 0.11 / rn)
}

/// Two-sided normal quantile for the given confidence level.
pub fn z_value(confidence: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(0.5 + 0.5 * confidence)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_critical_values() {
        // Tabulated asymptotic quantiles.
        assert!((ks_critical(0.05, 1_000_000) * 1000.0 - 1.3581).abs() < 2e-3);
        assert!((ks_critical(0.01, 1_000_000) * 1000.0 - 1.6276).abs() < 2e-3);
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn sup_distance_handles_ties() {
        // Point mass at 0 against Exp(1): the jump at 0 is the whole distance.
        let d = sup_distance_to_cdf(&[0.0, 0.0, 0.0, 0.0], |z| 1.0 - (-z).exp());
        assert!((d - 1.0).abs() < 1e-12);
        let d = sup_distance_to_cdf(&[0.5], |z| z.clamp(0.0, 1.0));
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_sample_distance() {
        assert_eq!(two_sample_sup_distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(two_sample_sup_distance(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        assert!((two_sample_sup_distance(&[1.0, 2.0, 3.0, 4.0], &[2.5]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quantiles_and_moments() {
        let s = sorted(&[3.0, 1.0, 2.0, 4.0]);
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(mean(&s), 2.5);
        assert!((variance(&s) - 5.0 / 3.0).abs() < 1e-12);
        assert!((z_value(0.95) - 1.959964).abs() < 1e-5);
        assert!((correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
    }
}
