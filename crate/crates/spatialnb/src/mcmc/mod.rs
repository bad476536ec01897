//! Gibbs sampling for the spatial NB model: configuration, the multi-chain
//! runner, posterior draw storage, and diagnostics.

pub mod diagnostics;
pub mod geweke;
pub mod sweep;

pub use diagnostics::{ess, ks_test, ks_test_two_sample, mcse, psrf};
pub use sweep::{adapt_step, GibbsSampler};

use crate::error::{Error, Result};
use crate::model::{Dataset, Hyperparams, McmcState};
use crate::rng::{streams, RngStream};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const ADAPT_WINDOW: usize = 50;

/// Chain count, iteration budget and retention policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub target_accept: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_chains: 2,
            n_iter: 40_000,
            burn_in: 20_000,
            thin: 5,
            target_accept: 0.44,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains < 1 {
            return Err(Error::invalid("n_chains must be >= 1"));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::invalid("burn_in must be smaller than n_iter"));
        }
        if self.thin < 1 {
            return Err(Error::invalid("thin must be >= 1"));
        }
        if (self.n_iter - self.burn_in) % self.thin != 0 {
            return Err(Error::invalid(
                "retention span n_iter - burn_in must be a multiple of thin",
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::invalid("target_accept must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Retained draws per chain: (n_iter − burn_in) / thin.
    pub fn retained_per_chain(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

/// Retained draws of one chain.
#[derive(Clone, Debug)]
pub struct ChainDraws {
    pub gamma: Array2<f64>,
    pub mu: Array2<f64>,
    /// √diag(Σ) per draw
    pub sigma_tilde: Array2<f64>,
    pub tau: Vec<f64>,
    pub sigma: Vec<f64>,
    pub r: Vec<f64>,
    pub h: Vec<f64>,
    /// linear predictor per draw, kept × N
    pub psi: Array2<f64>,
    pub accept_rate_tau: f64,
    phi_sum: Array1<f64>,
    phi_sumsq: Array1<f64>,
}

impl ChainDraws {
    fn with_capacity(kept: usize, q: usize, k: usize, n: usize) -> Self {
        ChainDraws {
            gamma: Array2::zeros((kept, q)),
            mu: Array2::zeros((kept, k)),
            sigma_tilde: Array2::zeros((kept, k)),
            tau: Vec::with_capacity(kept),
            sigma: Vec::with_capacity(kept),
            r: Vec::with_capacity(kept),
            h: Vec::with_capacity(kept),
            psi: Array2::zeros((kept, n)),
            accept_rate_tau: 0.0,
            phi_sum: Array1::zeros(n),
            phi_sumsq: Array1::zeros(n),
        }
    }

    pub fn kept(&self) -> usize {
        self.tau.len()
    }

    pub fn phi_mean(&self) -> Array1<f64> {
        &self.phi_sum / self.kept() as f64
    }

    pub fn phi_sd(&self) -> Array1<f64> {
        let n = self.kept() as f64;
        let mean = self.phi_mean();
        Array1::from_iter(
            self.phi_sumsq
                .iter()
                .zip(mean.iter())
                .map(|(&sq, &m)| ((sq / n - m * m).max(0.0)).sqrt()),
        )
    }
}

/// Posterior draws of all chains with retrieval by parameter name
/// (`gamma_1`, …, `mu_1`, …, `sigma_tilde_1`, …, `tau`, `sigma`, `r`, `h`).
#[derive(Clone, Debug)]
pub struct PosteriorDraws {
    pub q: usize,
    pub k: usize,
    pub n: usize,
    pub chains: Vec<ChainDraws>,
    pub accept_rate_tau: f64,
    pub config: McmcConfig,
}

impl PosteriorDraws {
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        names.extend((1..=self.q).map(|j| format!("gamma_{j}")));
        names.extend((1..=self.k).map(|j| format!("mu_{j}")));
        names.extend((1..=self.k).map(|j| format!("sigma_tilde_{j}")));
        names.extend(["tau", "sigma", "r", "h"].map(String::from));
        names
    }

    /// Per-chain kept series of a scalar parameter.
    pub fn chains_for(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let col = |get: &dyn Fn(&ChainDraws) -> Vec<f64>| -> Option<Vec<Vec<f64>>> {
            Some(self.chains.iter().map(get).collect())
        };
        if let Some(idx) = name.strip_prefix("gamma_") {
            let j: usize = idx.parse().ok()?;
            if j == 0 || j > self.q {
                return None;
            }
            return col(&|c| c.gamma.column(j - 1).to_vec());
        }
        if let Some(idx) = name.strip_prefix("mu_") {
            let j: usize = idx.parse().ok()?;
            if j == 0 || j > self.k {
                return None;
            }
            return col(&|c| c.mu.column(j - 1).to_vec());
        }
        if let Some(idx) = name.strip_prefix("sigma_tilde_") {
            let j: usize = idx.parse().ok()?;
            if j == 0 || j > self.k {
                return None;
            }
            return col(&|c| c.sigma_tilde.column(j - 1).to_vec());
        }
        match name {
            "tau" => col(&|c| c.tau.clone()),
            "sigma" => col(&|c| c.sigma.clone()),
            "r" => col(&|c| c.r.clone()),
            "h" => col(&|c| c.h.clone()),
            _ => None,
        }
    }

    pub fn pooled(&self, name: &str) -> Option<Vec<f64>> {
        Some(self.chains_for(name)?.into_iter().flatten().collect())
    }

    pub fn posterior_mean(&self, name: &str) -> Option<f64> {
        let xs = self.pooled(name)?;
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn posterior_sd(&self, name: &str) -> Option<f64> {
        let xs = self.pooled(name)?;
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        Some((xs.iter().map(|&x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    }

    /// Monte-Carlo standard error of the pooled posterior mean.
    pub fn mcse(&self, name: &str) -> Option<f64> {
        Some(mcse(&self.chains_for(name)?))
    }

    pub fn psrf(&self, name: &str) -> Result<f64> {
        let chains = self
            .chains_for(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        psrf(&chains)
    }

    /// All (ψ draw, r draw) pairs across chains, for scoring.
    pub fn psi_r_draws(&self) -> impl Iterator<Item = (ArrayView1<'_, f64>, f64)> {
        self.chains
            .iter()
            .flat_map(|c| c.psi.rows().into_iter().zip(c.r.iter().copied()))
    }

    pub fn total_kept(&self) -> usize {
        self.chains.iter().map(|c| c.kept()).sum()
    }

    /// Posterior mean/sd of the spatial effects pooled over chains.
    pub fn phi_summary(&self) -> (Array1<f64>, Array1<f64>) {
        let kept_total = self.total_kept() as f64;
        let mut mean = Array1::<f64>::zeros(self.n);
        let mut sumsq = Array1::<f64>::zeros(self.n);
        for c in &self.chains {
            mean += &c.phi_sum;
            sumsq += &c.phi_sumsq;
        }
        mean /= kept_total;
        let sd = Array1::from_iter(
            (0..self.n).map(|i| ((sumsq[i] / kept_total - mean[i] * mean[i]).max(0.0)).sqrt()),
        );
        (mean, sd)
    }

    /// Stream the retained draws to one CSV per parameter block plus a
    /// per-unit summary of the spatial effect.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let write_block =
            |name: &str, dim: usize, get: &dyn Fn(&ChainDraws, usize, usize) -> f64| -> Result<()> {
                let mut f = std::io::BufWriter::new(std::fs::File::create(
                    dir.join(format!("draws_{name}.csv")),
                )?);
                if dim == 1 {
                    writeln!(f, "chain,iteration,{name}")?;
                } else {
                    let cols: Vec<String> = (1..=dim).map(|j| format!("{name}_{j}")).collect();
                    writeln!(f, "chain,iteration,{}", cols.join(","))?;
                }
                for (ci, c) in self.chains.iter().enumerate() {
                    for it in 0..c.kept() {
                        let vals: Vec<String> =
                            (0..dim).map(|j| get(c, it, j).to_string()).collect();
                        writeln!(f, "{},{},{}", ci, it, vals.join(","))?;
                    }
                }
                Ok(())
            };
        write_block("gamma", self.q, &|c, it, j| c.gamma[[it, j]])?;
        write_block("mu", self.k, &|c, it, j| c.mu[[it, j]])?;
        write_block("sigma_tilde", self.k, &|c, it, j| c.sigma_tilde[[it, j]])?;
        write_block("tau", 1, &|c, it, _| c.tau[it])?;
        write_block("sigma", 1, &|c, it, _| c.sigma[it])?;
        write_block("r", 1, &|c, it, _| c.r[it])?;
        write_block("h", 1, &|c, it, _| c.h[it])?;

        let (mean, sd) = self.phi_summary();
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("phi_summary.csv"))?);
        writeln!(f, "unit,mean,sd")?;
        for i in 0..self.n {
            writeln!(f, "{},{},{}", i, mean[i], sd[i])?;
        }
        Ok(())
    }
}

/// Run `config.n_chains` independent chains (one worker each, independent
/// RNG streams), apply burn-in and thinning, and pool the results.
pub fn run_mcmc(
    data: &Dataset,
    hyper: &Hyperparams,
    config: &McmcConfig,
) -> Result<PosteriorDraws> {
    crate::init_blas_single_thread();
    config.validate()?;
    let kept = config.retained_per_chain();
    let chain_results: Vec<Result<ChainDraws>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.n_chains)
            .map(|chain_id| {
                scope.spawn(move || run_chain(data, hyper, config, chain_id, kept))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    });
    let mut chains = Vec::with_capacity(config.n_chains);
    for res in chain_results {
        chains.push(res?);
    }
    let accept_rate_tau =
        chains.iter().map(|c| c.accept_rate_tau).sum::<f64>() / chains.len() as f64;
    Ok(PosteriorDraws {
        q: data.q(),
        k: data.k(),
        n: data.n(),
        chains,
        accept_rate_tau,
        config: config.clone(),
    })
}

fn run_chain(
    data: &Dataset,
    hyper: &Hyperparams,
    config: &McmcConfig,
    chain_id: usize,
    kept: usize,
) -> Result<ChainDraws> {
    let mut rng = RngStream::new(config.seed, streams::MCMC_CHAIN + chain_id as u64);
    let mut state = McmcState::init(data, hyper);
    let mut sampler = GibbsSampler::new(data, hyper, &state)?;
    let mut draws = ChainDraws::with_capacity(kept, data.q(), data.k(), data.n());

    let mut step_scale = 1.0f64;
    let mut window_accepts = 0usize;
    let mut post_accepts = 0usize;
    let mut post_total = 0usize;
    let mut kept_idx = 0usize;

    for t in 0..config.n_iter {
        let accepted = sampler.sweep(&mut state, step_scale, &mut rng)?;
        if t < config.burn_in {
            if accepted {
                window_accepts += 1;
            }
            if (t + 1) % ADAPT_WINDOW == 0 {
                let window_index = (t + 1) / ADAPT_WINDOW;
                let rate = window_accepts as f64 / ADAPT_WINDOW as f64;
                step_scale = adapt_step(step_scale, window_index, rate, config.target_accept);
                window_accepts = 0;
            }
        } else {
            post_total += 1;
            if accepted {
                post_accepts += 1;
            }
            if (t - config.burn_in) % config.thin == 0 {
                draws.gamma.row_mut(kept_idx).assign(&state.gamma);
                draws.mu.row_mut(kept_idx).assign(&state.mu);
                for j in 0..data.k() {
                    draws.sigma_tilde[[kept_idx, j]] = state.sigma_mat[[j, j]].sqrt();
                }
                draws.tau.push(state.tau);
                draws.sigma.push(state.sigma2.sqrt());
                draws.r.push(state.r);
                draws.h.push(state.h);
                draws.psi.row_mut(kept_idx).assign(sampler.psi());
                for i in 0..data.n() {
                    draws.phi_sum[i] += state.phi[i];
                    draws.phi_sumsq[i] += state.phi[i] * state.phi[i];
                }
                kept_idx += 1;
            }
        }
    }
    debug_assert_eq!(kept_idx, kept);
    draws.accept_rate_tau = post_accepts as f64 / post_total.max(1) as f64;
    Ok(draws)
}
