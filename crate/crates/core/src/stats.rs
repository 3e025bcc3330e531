//! Small statistical estimators shared by the Monte Carlo modules.

use statrs::distribution::{Beta, ContinuousCDF};

/// Welford running mean and variance.
///
/// The mean of a constant sequence is that constant exactly, which keeps
/// centred estimators of constant observables at exactly zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for Running {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut r = Running::new();
        for x in iter {
            r.push(x);
        }
        r
    }
}

/// Mean and standard error of the mean of a list of batch estimates.
pub fn batch_summary(batch_values: &[f64]) -> (f64, f64) {
    let r: Running = batch_values.iter().copied().collect();
    (r.mean(), r.std_error())
}

/// Batch-means estimate for a correlated sequence: split into `n_batches`
/// contiguous batches (the last absorbs the remainder), average each, and
/// report the mean of all samples with the standard error of the batch means.
pub fn batch_means(samples: &[f64], n_batches: usize) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = samples.iter().copied().collect::<Running>().mean();
    let b = n_batches.clamp(1, n);
    if b < 2 {
        return (mean, 0.0);
    }
    let size = n / b;
    let batch: Vec<f64> = (0..b)
        .map(|i| {
            let end = if i + 1 == b { n } else { (i + 1) * size };
            samples[i * size..end].iter().copied().collect::<Running>().mean()
        })
        .collect();
    (mean, batch_summary(&batch).1)
}

/// Half-open index ranges of `n_batches` contiguous, nearly equal batches.
pub fn batch_ranges(n: usize, n_batches: usize) -> Vec<std::ops::Range<usize>> {
    let b = n_batches.clamp(1, n.max(1));
    let base = n / b;
    let extra = n % b;
    let mut start = 0;
    (0..b)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Ordinary least-squares line through `(x, y)`; returns `(intercept, slope)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - mx) * (xi - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// Kolmogorov–Smirnov distance between the empirical distribution of
/// `samples` and a continuous CDF.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// One-sided Clopper–Pearson lower confidence bound for a binomial
/// proportion with `successes` out of `trials` at confidence `1 - alpha`.
pub fn clopper_pearson_lower(successes: u64, trials: u64, alpha: f64) -> f64 {
    if successes == 0 || trials == 0 {
        return 0.0;
    }
    let k = successes as f64;
    let n = trials as f64;
    match Beta::new(k, n - k + 1.0) {
        Ok(beta) => beta.inverse_cdf(alpha),
        Err(_) => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_constant_is_exact() {
        let r: Running = std::iter::repeat(0.1).take(7).collect();
        assert_eq!(r.mean(), 0.1);
        assert_eq!(r.variance(), 0.0);
    }

    #[test]
    fn running_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 8.5, 3.25];
        let r: Running = xs.iter().copied().collect();
        let m = xs.iter().sum::<f64>() / 5.0;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        assert!((r.mean() - m).abs() < 1e-14);
        assert!((r.variance() - v).abs() < 1e-12);
    }

    #[test]
    fn batch_ranges_cover() {
        let r = batch_ranges(23, 5);
        assert_eq!(r.len(), 5);
        assert_eq!(r[0].start, 0);
        assert_eq!(r.last().unwrap().end, 23);
        assert!(r.windows(2).all(|w| w[0].end == w[1].start));
        assert_eq!(batch_ranges(3, 20).len(), 3);
    }

    #[test]
    fn linear_fit_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|t| 2.0 - 0.5 * t).collect();
        let (a, b) = linear_fit(&x, &y);
        assert!((a - 2.0).abs() < 1e-14 && (b + 0.5).abs() < 1e-14);
    }

    #[test]
    fn ks_uniform_grid() {
        let samples: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let d = ks_distance(&samples, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.005).abs() < 1e-12);
    }

    #[test]
    fn clopper_pearson_known_values() {
        // All successes: lower bound alpha^(1/n).
        let lb = clopper_pearson_lower(10, 10, 0.05);
        assert!((lb - 0.05f64.powf(0.1)).abs() < 1e-8, "{lb}");
        assert_eq!(clopper_pearson_lower(0, 10, 0.05), 0.0);
        let mid = clopper_pearson_lower(50, 100, 0.05);
        assert!(mid > 0.4 && mid < 0.5);
    }
}
