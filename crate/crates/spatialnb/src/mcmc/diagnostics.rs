//! Convergence and distribution diagnostics: Gelman-Rubin potential scale
//! reduction, Geyer-style effective sample size, and Kolmogorov-Smirnov
//! tests used by the sampler validation harness.

use crate::error::{Error, Result};

/// Gelman-Rubin potential scale reduction factor over ≥ 2 chains.
///
/// R̂ = √(V̂ / W) with V̂ = (n−1)/n·W + B/n; identical chains give
/// √((n−1)/n) < 1, wildly separated chains give values ≫ 1.1.
pub fn psrf(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::invalid("psrf needs at least two chains"));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 10 {
        return Err(Error::invalid("psrf needs at least 10 draws per chain"));
    }
    let m = chains.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c[..n].iter().sum::<f64>() / nf)
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let b_over_n = means.iter().map(|&x| (x - grand).powi(2)).sum::<f64>() / (m - 1.0);
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| c[..n].iter().map(|&x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        // degenerate chains with zero within-variance
        return Ok(if b_over_n > 0.0 { f64::INFINITY } else { 1.0 });
    }
    let v_hat = (nf - 1.0) / nf * w + b_over_n;
    Ok((v_hat / w).sqrt())
}

/// Effective sample size of a single chain by Geyer's initial positive
/// sequence on the empirical autocorrelations.
pub fn ess(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 4 {
        return n as f64;
    }
    let nf = n as f64;
    let mean = chain.iter().sum::<f64>() / nf;
    let var = chain.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / nf;
    if var <= 0.0 {
        return nf;
    }
    let max_lag = (n / 3).min(1000);
    let rho = |lag: usize| -> f64 {
        let mut acc = 0.0;
        for t in 0..n - lag {
            acc += (chain[t] - mean) * (chain[t + lag] - mean);
        }
        acc / (nf * var)
    };
    let mut sum_pairs = 0.0;
    let mut lag = 1;
    while lag + 1 <= max_lag {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum_pairs += pair;
        lag += 2;
    }
    nf / (1.0 + 2.0 * sum_pairs)
}

/// Monte-Carlo standard error of the pooled mean of several chains.
pub fn mcse(chains: &[Vec<f64>]) -> f64 {
    let total_ess: f64 = chains.iter().map(|c| ess(c)).sum();
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let nf = all.len() as f64;
    let mean = all.iter().sum::<f64>() / nf;
    let var = all.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    (var / total_ess.max(1.0)).sqrt()
}

/// Asymptotic Kolmogorov survival function Q(λ) = 2 Σ (−1)^{j−1} e^{−2j²λ²}.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut s = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        s += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test of `sample` against the CDF `cdf`.
/// Returns (D, p).
pub fn ks_test<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> (f64, f64) {
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite sample"));
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}

/// Two-sample Kolmogorov-Smirnov test. Returns (D, p).
pub fn ks_test_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.partial_cmp(q).expect("finite sample"));
    xb.sort_by(|p, q| p.partial_cmp(q).expect("finite sample"));
    let (na, nb) = (xa.len(), xb.len());
    let mut i = 0;
    let mut j = 0;
    let mut d = 0.0f64;
    while i < na && j < nb {
        let x = xa[i].min(xb[j]);
        while i < na && xa[i] <= x {
            i += 1;
        }
        while j < nb && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na as f64 * nb as f64) / (na as f64 + nb as f64);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}
