//! Small statistical helpers shared by the harness and the test suites:
//! binomial standard errors, chi-square goodness of fit, KS statistics, and
//! ordinary least squares for log-log slope fits.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Standard error of a binomial proportion estimate.
pub fn binomial_stderr(p_hat: f64, n: u64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    (p_hat * (1.0 - p_hat) / n as f64).sqrt()
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::INFINITY);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Pearson chi-square p-value for observed counts against expected counts.
/// Bins with expected count below `min_expected` are pooled into their
/// neighbor to keep the asymptotic approximation honest.
pub fn chi_square_pvalue(observed: &[f64], expected: &[f64], min_expected: f64) -> f64 {
    assert_eq!(observed.len(), expected.len());
    // Pool small-expectation bins left to right.
    let mut obs_pooled = Vec::with_capacity(observed.len());
    let mut exp_pooled = Vec::with_capacity(expected.len());
    let (mut acc_o, mut acc_e) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        acc_o += o;
        acc_e += e;
        if acc_e >= min_expected {
            obs_pooled.push(acc_o);
            exp_pooled.push(acc_e);
            acc_o = 0.0;
            acc_e = 0.0;
        }
    }
    if acc_e > 0.0 {
        if let (Some(o), Some(e)) = (obs_pooled.last_mut(), exp_pooled.last_mut()) {
            *o += acc_o;
            *e += acc_e;
        } else {
            obs_pooled.push(acc_o);
            exp_pooled.push(acc_e);
        }
    }
    if obs_pooled.len() < 2 {
        return 1.0;
    }
    let stat: f64 = obs_pooled
        .iter()
        .zip(&exp_pooled)
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum();
    let dof = (obs_pooled.len() - 1) as f64;
    let dist = ChiSquared::new(dof).expect("dof >= 1");
    1.0 - dist.cdf(stat)
}

/// Two-sample chi-square p-value on shared bins.
pub fn chi_square_two_sample_pvalue(a: &[f64], b: &[f64], min_expected: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let na: f64 = a.iter().sum();
    let nb: f64 = b.iter().sum();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    // Expected counts under homogeneity, then a plain goodness-of-fit on the
    // concatenated table (dof handled by the pooled helper is slightly
    // conservative, which is the safe direction for assertions).
    let mut obs = Vec::with_capacity(2 * a.len());
    let mut exp = Vec::with_capacity(2 * a.len());
    for (&oa, &ob) in a.iter().zip(b) {
        let tot = oa + ob;
        obs.push(oa);
        exp.push(tot * na / (na + nb));
        obs.push(ob);
        exp.push(tot * nb / (na + nb));
    }
    chi_square_pvalue(&obs, &exp, min_expected)
}

/// Kolmogorov-Smirnov statistic of samples against a CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        ks = ks.max((f - lo).abs()).max((hi - f).abs());
    }
    ks
}

/// OLS fit y = a + b x; returns (slope, slope standard error).
/// Input rows are sorted internally so the result does not depend on order.
pub fn ols_slope(xy: &[(f64, f64)]) -> Option<(f64, f64)> {
    if xy.len() < 3 {
        return None;
    }
    let mut rows: Vec<(f64, f64)> = xy.to_vec();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = rows.len() as f64;
    let mx = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let my = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let sxx: f64 = rows.iter().map(|r| (r.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = rows.iter().map(|r| (r.0 - mx) * (r.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = rows
        .iter()
        .map(|r| (r.1 - intercept - slope * r.0).powi(2))
        .sum();
    let dof = (rows.len() as f64 - 2.0).max(1.0);
    let se = (ssr / dof / sxx).sqrt();
    Some((slope, se))
}
