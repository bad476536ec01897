//! Data, hyperparameter and latent-state containers shared by both
//! estimators, plus likelihood evaluation.

use crate::dist::{log1pexp, pg_mean};
use crate::error::{Error, Result};
use crate::linalg::chol_small;
use crate::spatial::SpatialWeights;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::path::Path;

/// Observed counts with their fixed- and random-effect designs and the
/// spatial weight matrix.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// counts, length N
    pub y: Vec<u64>,
    /// fixed-effect design, N×Q, first column all ones
    pub m: Array2<f64>,
    /// random-effect design rows X_i, N×K
    pub x: Array2<f64>,
    pub w: SpatialWeights,
}

impl Dataset {
    pub fn new(y: Vec<u64>, m: Array2<f64>, x: Array2<f64>, w: SpatialWeights) -> Result<Self> {
        let n = y.len();
        if m.nrows() != n || x.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "y has {n} rows, M has {}, X has {}",
                m.nrows(),
                x.nrows()
            )));
        }
        if w.n() != n {
            return Err(Error::DimensionMismatch(format!(
                "weight matrix is {}x{0} but N = {n}",
                w.n()
            )));
        }
        Ok(Dataset { y, m, x, w })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn q(&self) -> usize {
        self.m.ncols()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn max_y(&self) -> usize {
        self.y.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn y_f64(&self) -> Array1<f64> {
        Array1::from_iter(self.y.iter().map(|&v| v as f64))
    }

    /// Write the data table as CSV with columns y, M1..MQ, X1..XK.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.q()).map(|j| format!("M{j}")));
        header.extend((1..=self.k()).map(|j| format!("X{j}")));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.y[i].to_string()];
            rec.extend(self.m.row(i).iter().map(|v| v.to_string()));
            rec.extend(self.x.row(i).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read a dataset from the CSV table plus the weight-matrix file.
    pub fn load_csv(data_path: &Path, weights_path: &Path) -> Result<Self> {
        let w = SpatialWeights::load(weights_path)?;
        let mut rdr = csv::Reader::from_path(data_path)?;
        let header = rdr.headers()?.clone();
        let q = header.iter().filter(|h| h.starts_with('M')).count();
        let k = header.iter().filter(|h| h.starts_with('X')).count();
        if q == 0 {
            return Err(Error::Parse("no M columns in dataset CSV".into()));
        }
        let mut y = Vec::new();
        let mut m_flat = Vec::new();
        let mut x_flat = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 1 + q + k {
                return Err(Error::Parse(format!(
                    "expected {} fields, got {}",
                    1 + q + k,
                    rec.len()
                )));
            }
            y.push(
                rec[0]
                    .parse::<u64>()
                    .map_err(|e| Error::Parse(format!("count column: {e}")))?,
            );
            for j in 0..q {
                m_flat.push(
                    rec[1 + j]
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("M column: {e}")))?,
                );
            }
            for j in 0..k {
                x_flat.push(
                    rec[1 + q + j]
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("X column: {e}")))?,
                );
            }
        }
        let n = y.len();
        let m = Array2::from_shape_vec((n, q), m_flat)
            .map_err(|e| Error::Parse(format!("M shape: {e}")))?;
        let x = Array2::from_shape_vec((n, k), x_flat)
            .map_err(|e| Error::Parse(format!("X shape: {e}")))?;
        Dataset::new(y, m, x, w)
    }
}

/// Prior constants. Scale matrices must be SPD and all rate/shape constants
/// positive; `validate` enforces this.
#[derive(Clone, Debug)]
pub struct Hyperparams {
    pub zeta_mu: Array1<f64>,
    pub delta_mu: Array2<f64>,
    pub zeta_gamma: Array1<f64>,
    pub delta_gamma: Array2<f64>,
    pub zeta_tau: f64,
    pub sigma2_tau: f64,
    pub b_sigma2: f64,
    pub c_sigma2: f64,
    pub r0: f64,
    pub b0: f64,
    pub c0: f64,
    pub nu: f64,
    /// half-t scales A_k
    pub a_scale: Array1<f64>,
}

impl Hyperparams {
    /// Weakly informative defaults: zero prior means, 10·I prior covariances,
    /// Gamma(0.01, 0.01) rates, ν = 2, A_k = 5.
    pub fn default_for(q: usize, k: usize) -> Self {
        Hyperparams {
            zeta_mu: Array1::zeros(k),
            delta_mu: Array2::eye(k) * 10.0,
            zeta_gamma: Array1::zeros(q),
            delta_gamma: Array2::eye(q) * 10.0,
            zeta_tau: 0.0,
            sigma2_tau: 1.0,
            b_sigma2: 0.01,
            c_sigma2: 0.01,
            r0: 0.01,
            b0: 0.01,
            c0: 0.01,
            nu: 2.0,
            a_scale: Array1::from_elem(k, 5.0),
        }
    }

    pub fn k(&self) -> usize {
        self.zeta_mu.len()
    }

    pub fn q(&self) -> usize {
        self.zeta_gamma.len()
    }

    /// IW prior degrees of freedom ρ = ν + K − 1.
    pub fn rho(&self) -> f64 {
        self.nu + self.k() as f64 - 1.0
    }

    /// Gamma shape of the half-t auxiliary scales (s = 1/2).
    pub fn half_t_shape(&self) -> f64 {
        0.5
    }

    /// Gamma rate η_k = A_k⁻² of the half-t auxiliary scales.
    pub fn eta(&self) -> Array1<f64> {
        self.a_scale.mapv(|a| 1.0 / (a * a))
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_mu.nrows() != self.k() || self.delta_gamma.nrows() != self.q() {
            return Err(Error::DimensionMismatch(
                "prior covariance dimensions do not match prior means".into(),
            ));
        }
        chol_small(&self.delta_mu.view(), "Delta_mu")?;
        chol_small(&self.delta_gamma.view(), "Delta_gamma")?;
        for (name, v) in [
            ("sigma2_tau", self.sigma2_tau),
            ("b_sigma2", self.b_sigma2),
            ("c_sigma2", self.c_sigma2),
            ("r0", self.r0),
            ("b0", self.b0),
            ("c0", self.c0),
            ("nu", self.nu),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.a_scale.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid("half-t scales A_k must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&HyperparamsConfig::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: HyperparamsConfig = serde_json::from_str(s)?;
        cfg.into_hyperparams()
    }
}

/// Flat JSON form of [`Hyperparams`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperparamsConfig {
    pub zeta_mu: Vec<f64>,
    pub delta_mu: Vec<Vec<f64>>,
    pub zeta_gamma: Vec<f64>,
    pub delta_gamma: Vec<Vec<f64>>,
    pub zeta_tau: f64,
    pub sigma2_tau: f64,
    pub b_sigma2: f64,
    pub c_sigma2: f64,
    pub r0: f64,
    pub b0: f64,
    pub c0: f64,
    pub nu: f64,
    pub a_scale: Vec<f64>,
}

impl From<&Hyperparams> for HyperparamsConfig {
    fn from(h: &Hyperparams) -> Self {
        let mat = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect();
        HyperparamsConfig {
            zeta_mu: h.zeta_mu.to_vec(),
            delta_mu: mat(&h.delta_mu),
            zeta_gamma: h.zeta_gamma.to_vec(),
            delta_gamma: mat(&h.delta_gamma),
            zeta_tau: h.zeta_tau,
            sigma2_tau: h.sigma2_tau,
            b_sigma2: h.b_sigma2,
            c_sigma2: h.c_sigma2,
            r0: h.r0,
            b0: h.b0,
            c0: h.c0,
            nu: h.nu,
            a_scale: h.a_scale.to_vec(),
        }
    }
}

impl HyperparamsConfig {
    pub fn into_hyperparams(self) -> Result<Hyperparams> {
        let mat = |rows: Vec<Vec<f64>>, name: &str| -> Result<Array2<f64>> {
            let n = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            if flat.len() != n * n {
                return Err(Error::Parse(format!("{name} is not square")));
            }
            Array2::from_shape_vec((n, n), flat).map_err(|e| Error::Parse(format!("{name}: {e}")))
        };
        let h = Hyperparams {
            zeta_mu: Array1::from_vec(self.zeta_mu),
            delta_mu: mat(self.delta_mu, "delta_mu")?,
            zeta_gamma: Array1::from_vec(self.zeta_gamma),
            delta_gamma: mat(self.delta_gamma, "delta_gamma")?,
            zeta_tau: self.zeta_tau,
            sigma2_tau: self.sigma2_tau,
            b_sigma2: self.b_sigma2,
            c_sigma2: self.c_sigma2,
            r0: self.r0,
            b0: self.b0,
            c0: self.c0,
            nu: self.nu,
            a_scale: Array1::from_vec(self.a_scale),
        };
        h.validate()?;
        Ok(h)
    }
}

/// One full draw of the latent set.
#[derive(Clone, Debug)]
pub struct McmcState {
    pub phi: Array1<f64>,
    pub gamma: Array1<f64>,
    /// β_i as rows, N×K
    pub beta: Array2<f64>,
    pub mu: Array1<f64>,
    pub a: Array1<f64>,
    pub sigma_mat: Array2<f64>,
    pub sigma2: f64,
    pub omega: Array1<f64>,
    pub r: f64,
    pub h: f64,
    pub tau: f64,
    pub l: Vec<u64>,
}

impl McmcState {
    /// Neutral start inside every prior's support: zero location parameters,
    /// Σ = I, σ² = 0.1, r = 1, τ = 0, ω_i = E[PG(y_i + 1, 0)], and prior
    /// means for the blocks with no natural zero (h, a).
    pub fn init(data: &Dataset, hyper: &Hyperparams) -> Self {
        let n = data.n();
        let k = data.k();
        McmcState {
            phi: Array1::zeros(n),
            gamma: Array1::zeros(data.q()),
            beta: Array2::zeros((n, k)),
            mu: Array1::zeros(k),
            a: hyper.a_scale.mapv(|a| a * a / 2.0),
            sigma_mat: Array2::eye(k),
            sigma2: 0.1,
            omega: Array1::from_iter(data.y.iter().map(|&y| pg_mean(y as f64 + 1.0, 0.0))),
            r: 1.0,
            h: hyper.b0 / hyper.c0,
            tau: 0.0,
            l: vec![0; n],
        }
    }

    /// ψ = Mγ + Xβ + φ with the block-diagonal X product reduced to row dots.
    pub fn linear_predictor(&self, data: &Dataset) -> Array1<f64> {
        let mut psi = data.m.dot(&self.gamma);
        for i in 0..data.n() {
            psi[i] += data.x.row(i).dot(&self.beta.row(i)) + self.phi[i];
        }
        psi
    }
}

/// Linear predictor with its success probabilities.
#[derive(Clone, Debug)]
pub struct LinkState {
    pub psi: Array1<f64>,
    pub p: Array1<f64>,
}

/// exp(ψ)/(1+exp(ψ)) evaluated overflow-safely; satisfies
/// sigmoid(-ψ) = 1 - sigmoid(ψ) exactly in floating point.
pub fn sigmoid(psi: f64) -> f64 {
    if psi >= 0.0 {
        1.0 / (1.0 + (-psi).exp())
    } else {
        let e = psi.exp();
        e / (1.0 + e)
    }
}

impl LinkState {
    pub fn new(psi: Array1<f64>) -> Self {
        let p = psi.mapv(sigmoid);
        LinkState { psi, p }
    }
}

/// NB log-likelihood Σᵢ [lnΓ(yᵢ+r) − lnΓ(r) − lnΓ(yᵢ+1) + yᵢψᵢ − (yᵢ+r)·ln(1+e^ψᵢ)].
pub fn log_likelihood(data: &Dataset, psi: &Array1<f64>, r: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("r must be positive and finite, got {r}")));
    }
    if psi.len() != data.n() {
        return Err(Error::DimensionMismatch("psi length != N".into()));
    }
    let mut total = 0.0;
    let lg_r = ln_gamma(r);
    for (i, &y) in data.y.iter().enumerate() {
        let p = psi[i];
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("psi[{i}]")));
        }
        let yf = y as f64;
        total += ln_gamma(yf + r) - lg_r - ln_gamma(yf + 1.0) + yf * p - (yf + r) * log1pexp(p);
    }
    Ok(total)
}

/// The heteroskedastic Gaussian kernel −½ Σ ωᵢ (ψᵢ − Zᵢ)², up to the
/// additive constant the conditionals drop.
pub fn augmented_gaussian_loglik(
    z: &Array1<f64>,
    psi: &Array1<f64>,
    omega: &Array1<f64>,
) -> Result<f64> {
    if z.len() != psi.len() || z.len() != omega.len() {
        return Err(Error::DimensionMismatch("augmented likelihood inputs".into()));
    }
    let mut total = 0.0;
    for i in 0..z.len() {
        if !(omega[i] > 0.0) {
            return Err(Error::invalid(format!("omega[{i}] must be positive")));
        }
        let d = psi[i] - z[i];
        total -= 0.5 * omega[i] * d * d;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, RngStream};
    use crate::spatial::knn_weight_matrix;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn tiny_dataset(y: Vec<u64>) -> Dataset {
        let n = y.len();
        let mut rng = RngStream::new(31, streams::TEST);
        let pts: Vec<[f64; 2]> = (0..n.max(3))
            .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let w = knn_weight_matrix(&pts[..n.max(3)], 1).unwrap();
        // shrink w to n if needed — tests only use n >= 3
        assert!(n >= 3);
        let m = Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { 1.0 } else { 0.3 });
        let x = Array2::from_shape_fn((n, 1), |_| 0.5);
        Dataset::new(y, m, x, w).unwrap()
    }

    #[test]
    fn single_count_closed_form() {
        // y = 2, ψ = 0, r = 1: NB pmf = (1/2)^2·(1/2) → ln = −3 ln 2
        let d = tiny_dataset(vec![2, 0, 0]);
        let psi = array![0.0, -50.0, -50.0];
        let ll = log_likelihood(&d, &psi, 1.0).unwrap();
        // units 2 and 3 contribute ≈ 0
        assert_abs_diff_eq!(ll, -3.0 * std::f64::consts::LN_2, epsilon = 1e-10);
    }

    #[test]
    fn zero_count_far_left_tail_is_certain() {
        let d = tiny_dataset(vec![0, 0, 0]);
        let psi = array![-50.0, -50.0, -50.0];
        let ll = log_likelihood(&d, &psi, 1.0).unwrap();
        // bounded by ln-gamma round-off at the integer arguments
        assert!(ll.abs() < 1e-12, "ll = {ll}");
    }

    #[test]
    fn matches_naive_pmf_oracle() {
        // pointwise pmf assembled the long way round: binomial coefficient
        // via ln_gamma, probability via the stable sigmoid
        let y = vec![3u64, 0, 7, 1, 12];
        let d = tiny_dataset(y.clone());
        let psi = array![0.3, -1.0, 1.7, 0.0, 2.2];
        let r = 1.7;
        let mut oracle = 0.0;
        for i in 0..5 {
            let p = sigmoid(psi[i]);
            let yf = y[i] as f64;
            let ln_coef = ln_gamma(yf + r) - ln_gamma(r) - ln_gamma(yf + 1.0);
            oracle += ln_coef + yf * p.ln() + r * (1.0 - p).ln();
        }
        let ll = log_likelihood(&d, &psi, r).unwrap();
        assert_abs_diff_eq!(ll, oracle, epsilon = 1e-10);
    }

    #[test]
    fn pointwise_maximiser_is_log_y_over_r() {
        let d = tiny_dataset(vec![4, 4, 4]);
        let r = 2.0;
        let at = |v: f64| {
            let psi = array![v, 0.0, 0.0];
            log_likelihood(&d, &psi, r).unwrap()
        };
        let peak = (4.0f64 / r).ln();
        let best = at(peak);
        for delta in [0.1, 0.5, 2.0] {
            assert!(at(peak + delta) < best);
            assert!(at(peak - delta) < best);
        }
    }

    #[test]
    fn augmented_kernel_examples() {
        let z = array![1.0, 2.0];
        let psi = z.clone();
        let om = array![2.0, 3.0];
        assert_abs_diff_eq!(
            augmented_gaussian_loglik(&z, &psi, &om).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        let z1 = array![0.0];
        let psi1 = array![1.0];
        let om1 = array![2.0];
        assert_abs_diff_eq!(
            augmented_gaussian_loglik(&z1, &psi1, &om1).unwrap(),
            -1.0,
            epsilon = 1e-15
        );
        // permutation invariance
        let z = array![0.3, -1.0, 2.0];
        let psi = array![1.0, 0.0, 1.5];
        let om = array![0.5, 1.5, 2.5];
        let zp = array![2.0, 0.3, -1.0];
        let psip = array![1.5, 1.0, 0.0];
        let omp = array![2.5, 0.5, 1.5];
        assert_abs_diff_eq!(
            augmented_gaussian_loglik(&z, &psi, &om).unwrap(),
            augmented_gaussian_loglik(&zp, &psip, &omp).unwrap(),
            epsilon = 1e-15
        );
        let bad = array![0.0];
        assert!(augmented_gaussian_loglik(&z1, &psi1, &bad).is_err());
    }

    #[test]
    fn sigmoid_complement_identity() {
        let mut rng = RngStream::new(9, streams::TEST);
        for _ in 0..10_000 {
            let psi = (rng.random::<f64>() - 0.5) * 80.0;
            let lhs = sigmoid(-psi);
            let rhs = 1.0 - sigmoid(psi);
            assert!((lhs - rhs).abs() <= 1e-15, "psi={psi}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn link_state_probability_accuracy() {
        let psi = array![-3.0, 0.0, 0.4, 8.0];
        let link = LinkState::new(psi.clone());
        for i in 0..psi.len() {
            let direct = psi[i].exp() / (1.0 + psi[i].exp());
            assert_abs_diff_eq!(link.p[i], direct, epsilon = 1e-14);
        }
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let d = tiny_dataset(vec![5, 0, 2, 9]);
        let dir = std::env::temp_dir().join("spatialnb_model_test");
        std::fs::create_dir_all(&dir).unwrap();
        let data_path = dir.join("data.csv");
        let w_path = dir.join("weights.txt");
        d.save_csv(&data_path).unwrap();
        d.w.save(&w_path).unwrap();
        let d2 = Dataset::load_csv(&data_path, &w_path).unwrap();
        assert_eq!(d.y, d2.y);
        assert_eq!(d.m, d2.m);
        assert_eq!(d.x, d2.x);
        assert_eq!(d.w.n(), d2.w.n());
    }

    #[test]
    fn hyperparams_json_roundtrip_and_validation() {
        let h = Hyperparams::default_for(4, 3);
        let json = h.to_json().unwrap();
        let h2 = Hyperparams::from_json(&json).unwrap();
        assert_eq!(h.zeta_mu, h2.zeta_mu);
        assert_eq!(h.delta_gamma, h2.delta_gamma);
        assert_eq!(h.nu, h2.nu);

        let mut bad = Hyperparams::default_for(2, 2);
        bad.b_sigma2 = -1.0;
        assert!(bad.validate().is_err());
    }
}
