//! Latent table-count distribution restoring conjugacy of the NB dispersion.
//!
//! A count y can be written as a Poisson number L of logarithmic summands,
//! and conditionally on the data L follows the discrete distribution
//! R(y, j) ∝ F(y, j) rʲ over j ∈ {0, …, y}, where F obeys the triangular
//! recursion F(m, j) = ((m−1)/m) F(m−1, j) + (1/m) F(m−1, j−1) with
//! F(1, 1) = 1. F is independent of r, so the table is built once per
//! dataset (up to max y) and reused by every sweep and grid worker; only the
//! rʲ weighting is applied per call. Everything is kept in log space — F
//! decays factorially.

use rand::Rng;

/// Memoised log F(m, j) triangle for m = 1..=max_y.
#[derive(Clone, Debug)]
pub struct CrtTable {
    max_y: usize,
    /// log_f[m-1][j-1] = ln F(m, j), j = 1..=m
    log_f: Vec<Vec<f64>>,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

impl CrtTable {
    pub fn new(max_y: usize) -> Self {
        let mut log_f: Vec<Vec<f64>> = Vec::with_capacity(max_y);
        if max_y >= 1 {
            log_f.push(vec![0.0]); // F(1,1) = 1
            for m in 2..=max_y {
                let prev = &log_f[m - 2];
                let mf = m as f64;
                let keep = ((mf - 1.0) / mf).ln();
                let open = -(mf.ln());
                let mut row = vec![f64::NEG_INFINITY; m];
                for j in 1..=m {
                    let a = if j <= m - 1 {
                        keep + prev[j - 1]
                    } else {
                        f64::NEG_INFINITY
                    };
                    let b = if j >= 2 && j - 1 <= m - 1 {
                        open + prev[j - 2]
                    } else if j == 1 {
                        f64::NEG_INFINITY
                    } else {
                        f64::NEG_INFINITY
                    };
                    row[j - 1] = log_add(a, b);
                }
                log_f.push(row);
            }
        }
        CrtTable { max_y, log_f }
    }

    pub fn max_y(&self) -> usize {
        self.max_y
    }

    /// P(L = j | y, r) for j = 0..=y. For y = 0 the mass sits on j = 0; for
    /// y ≥ 1 it is spread over j = 1..=y.
    pub fn pmf(&self, y: usize, r: f64) -> Vec<f64> {
        debug_assert!(r > 0.0);
        debug_assert!(y <= self.max_y, "y={y} exceeds table max {}", self.max_y);
        if y == 0 {
            return vec![1.0];
        }
        let ln_r = r.ln();
        let row = &self.log_f[y - 1];
        let mut logits: Vec<f64> = (1..=y)
            .map(|j| row[j - 1] + j as f64 * ln_r)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - m).exp();
            z += *l;
        }
        let mut pmf = Vec::with_capacity(y + 1);
        pmf.push(0.0);
        for l in logits {
            pmf.push(l / z);
        }
        pmf
    }

    /// E[L | y, r] = Σ j R(y, j).
    pub fn expected_count(&self, y: usize, r: f64) -> f64 {
        self.pmf(y, r)
            .iter()
            .enumerate()
            .map(|(j, p)| j as f64 * p)
            .sum()
    }

    /// One draw from R(y, ·) by inverse-CDF on the memoised pmf.
    pub fn sample<R: Rng + ?Sized>(&self, y: usize, r: f64, rng: &mut R) -> usize {
        sample_from_pmf(&self.pmf(y, r), rng)
    }
}

/// Inverse-CDF draw from a normalised pmf indexed from 0.
pub fn sample_from_pmf<R: Rng + ?Sized>(pmf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in pmf.iter().enumerate() {
        acc += p;
        if u <= acc {
            return j;
        }
    }
    pmf.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, RngStream};
    use approx::assert_abs_diff_eq;

    /// Unsigned Stirling numbers of the first kind, exact integers.
    fn stirling_first(max_m: usize) -> Vec<Vec<u128>> {
        let mut s = vec![vec![0u128; max_m + 1]; max_m + 1];
        s[0][0] = 1;
        for m in 1..=max_m {
            for j in 1..=m {
                s[m][j] = (m as u128 - 1) * s[m - 1][j] + s[m - 1][j - 1];
            }
        }
        s
    }

    #[test]
    fn f_recursion_matches_stirling_numbers() {
        // F(m, j) = |s(m, j)| / m!
        let table = CrtTable::new(20);
        let s = stirling_first(20);
        let mut ln_fact = 0.0;
        for m in 1..=20usize {
            ln_fact += (m as f64).ln();
            for j in 1..=m {
                let expect = (s[m][j] as f64).ln() - ln_fact;
                assert_abs_diff_eq!(table.log_f[m - 1][j - 1], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn pmf_sums_to_one() {
        let table = CrtTable::new(50);
        for &r in &[0.5, 1.5, 5.0] {
            for y in 0..=50 {
                let s: f64 = table.pmf(y, r).iter().sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn expected_count_matches_bernoulli_closed_form() {
        // the sequential construction gives E[L] = Σ_{t=0}^{y-1} r/(r+t)
        let table = CrtTable::new(60);
        for &r in &[0.3, 1.5, 7.0] {
            for &y in &[1usize, 2, 5, 17, 60] {
                let closed: f64 = (0..y).map(|t| r / (r + t as f64)).sum();
                assert_abs_diff_eq!(table.expected_count(y, r), closed, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_counts() {
        let table = CrtTable::new(5);
        let mut rng = RngStream::new(2, streams::TEST);
        for _ in 0..100 {
            assert_eq!(table.sample(0, 1.5, &mut rng), 0);
            assert_eq!(table.sample(1, 0.7, &mut rng), 1);
        }
    }

    #[test]
    fn empirical_pmf_matches_recursion() {
        let table = CrtTable::new(10);
        let (y, r) = (3usize, 1.5f64);
        let pmf = table.pmf(y, r);
        let n = 100_000usize;
        let mut counts = vec![0usize; y + 1];
        let mut rng = RngStream::new(3, streams::TEST);
        for _ in 0..n {
            counts[table.sample(y, r, &mut rng)] += 1;
        }
        for j in 0..=y {
            let p_hat = counts[j] as f64 / n as f64;
            let se = (pmf[j] * (1.0 - pmf[j]) / n as f64).sqrt();
            assert!(
                (p_hat - pmf[j]).abs() <= 3.0 * se + 1e-12,
                "category {j}: empirical {p_hat} vs {} (3se = {})",
                pmf[j],
                3.0 * se
            );
        }
    }

    #[test]
    fn pmf_matches_sequential_construction_monte_carlo() {
        // independent oracle: simulate L as a sum of Bernoulli(r/(r+t))
        let table = CrtTable::new(6);
        let (y, r) = (6usize, 0.8f64);
        let pmf = table.pmf(y, r);
        let mut rng = RngStream::new(4, streams::TEST);
        let n = 200_000usize;
        let mut counts = vec![0usize; y + 1];
        for _ in 0..n {
            let mut l = 0usize;
            for t in 0..y {
                if rng.random::<f64>() < r / (r + t as f64) {
                    l += 1;
                }
            }
            counts[l] += 1;
        }
        for j in 1..=y {
            let p_hat = counts[j] as f64 / n as f64;
            let se = (pmf[j].max(1e-12) * (1.0 - pmf[j]) / n as f64).sqrt();
            assert!(
                (p_hat - pmf[j]).abs() <= 4.0 * se + 1e-6,
                "category {j}: sequential {p_hat} vs recursion {}",
                pmf[j]
            );
        }
    }
}
