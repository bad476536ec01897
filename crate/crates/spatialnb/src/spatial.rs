//! Spatial weight construction and the matrix-exponential spatial operator.
//!
//! The spatial dependence model works with S = exp(τW) for a row-normalised
//! sparse weight matrix W with zero diagonal, which gives det(S) = 1 exactly.
//! The public [`matrix_exponential`] builds S by Padé-13 scaling-and-squaring.
//! The samplers use the power-series routines [`mess_dense`] /
//! [`mess_action`] instead: with at most k nonzeros per row and ‖τW‖ ≤ |τ|
//! the series hits machine precision in ~20 terms, far cheaper than dense
//! Padé at N in the hundreds. Both paths are pinned against each other in
//! the tests.

use crate::error::{Error, Result};
use crate::linalg::gram;
use ndarray::{Array1, Array2, ArrayView1};
use ndarray_linalg::Inverse;
use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

const ROW_SUM_TOL: f64 = 1e-12;

/// Row-normalised sparse spatial weight matrix (CSR layout).
#[derive(Clone, Debug)]
pub struct SpatialWeights {
    n: usize,
    k: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SpatialWeights {
    /// Build from CSR parts, enforcing the row-sum and zero-diagonal
    /// invariants.
    pub fn from_csr(
        n: usize,
        k: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != n + 1 || *row_ptr.last().unwrap_or(&0) != col_idx.len() {
            return Err(Error::invalid("inconsistent CSR structure"));
        }
        if col_idx.len() != values.len() {
            return Err(Error::invalid("CSR index/value length mismatch"));
        }
        let w = SpatialWeights {
            n,
            k,
            row_ptr,
            col_idx,
            values,
        };
        w.validate()?;
        Ok(w)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            let mut sum = 0.0;
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[e] as usize;
                if j >= self.n {
                    return Err(Error::invalid(format!("column index {j} out of range")));
                }
                if j == i {
                    return Err(Error::invalid(format!("nonzero diagonal at row {i}")));
                }
                let v = self.values[e];
                if !(v >= 0.0) {
                    return Err(Error::invalid(format!("negative weight at row {i}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!(
                    "row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn neighbor_count(&self) -> usize {
        self.k
    }

    pub fn nnz_row(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// Iterate the nonzeros of row i as (column, weight).
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |e| (self.col_idx[e] as usize, self.values[e]))
    }

    /// Dense copy of W.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::<f64>::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[[i, j]] = v;
            }
        }
        d
    }

    /// y = W x.
    pub fn matvec(&self, x: ArrayView1<f64>, y: &mut Array1<f64>) {
        debug_assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let mut s = 0.0;
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[e] * x[self.col_idx[e] as usize];
            }
            y[i] = s;
        }
    }

    /// out[:, 0..width] = W · x[:, 0..width] for dense row-major x.
    fn mul_dense_cols(&self, x: &Array2<f64>, out: &mut Array2<f64>, width: usize) {
        let ncol = x.ncols();
        let xs = x.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        for i in 0..self.n {
            let orow = &mut os[i * ncol..i * ncol + width];
            orow.fill(0.0);
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                let v = self.values[e];
                let j = self.col_idx[e] as usize;
                let xrow = &xs[j * ncol..j * ncol + width];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += v * xv;
                }
            }
        }
    }

    /// Serialise in the coordinate-list text format: header `n k`, then one
    /// `i j w` line per nonzero (0-based indices).
    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.n, self.k)?;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                writeln!(w, "{} {} {}", i, j, v)?;
            }
        }
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty weight file".into()))??;
        let mut it = header.split_whitespace();
        let n: usize = it
            .next()
            .ok_or_else(|| Error::Parse("missing n in weight header".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("weight header n: {e}")))?;
        let k: usize = it
            .next()
            .ok_or_else(|| Error::Parse("missing k in weight header".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("weight header k: {e}")))?;
        let mut entries: Vec<(usize, u32, f64)> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse_err = |what: &str| Error::Parse(format!("weight entry missing {what}: {line}"));
            let i: usize = it
                .next()
                .ok_or_else(|| parse_err("row"))?
                .parse()
                .map_err(|e| Error::Parse(format!("weight row: {e}")))?;
            let j: u32 = it
                .next()
                .ok_or_else(|| parse_err("col"))?
                .parse()
                .map_err(|e| Error::Parse(format!("weight col: {e}")))?;
            let v: f64 = it
                .next()
                .ok_or_else(|| parse_err("value"))?
                .parse()
                .map_err(|e| Error::Parse(format!("weight value: {e}")))?;
            entries.push((i, j, v));
        }
        entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _, _) in &entries {
            if i >= n {
                return Err(Error::Parse(format!("row index {i} out of range")));
            }
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = entries.iter().map(|&(_, j, _)| j).collect();
        let values = entries.iter().map(|&(_, _, v)| v).collect();
        SpatialWeights::from_csr(n, k, row_ptr, col_idx, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.to_writer(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(f)
    }
}

/// k-nearest-neighbour row-normalised weight matrix over 2-D points.
///
/// Row i puts weight 1/k on the k nearest other points by Euclidean
/// distance; distance ties are broken by the lower point index so the result
/// is deterministic under duplicated coordinates.
pub fn knn_weight_matrix(points: &[[f64; 2]], k: usize) -> Result<SpatialWeights> {
    let n = points.len();
    if k < 1 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let distinct: HashSet<(u64, u64)> = points
        .iter()
        .map(|p| (p[0].to_bits(), p[1].to_bits()))
        .collect();
    if distinct.len() < k + 1 {
        return Err(Error::invalid(format!(
            "need at least {} distinct points for k = {k}, got {}",
            k + 1,
            distinct.len()
        )));
    }

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(n * k);
    let mut values = Vec::with_capacity(n * k);
    row_ptr.push(0);
    let w = 1.0 / k as f64;
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        for (j, p) in points.iter().enumerate() {
            if j == i {
                continue;
            }
            let dx = p[0] - points[i][0];
            let dy = p[1] - points[i][1];
            cand.push((dx * dx + dy * dy, j));
        }
        cand.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let mut picked: Vec<usize> = cand.iter().take(k).map(|&(_, j)| j).collect();
        picked.sort_unstable();
        for j in picked {
            col_idx.push(j as u32);
            values.push(w);
        }
        row_ptr.push(col_idx.len());
    }
    SpatialWeights::from_csr(n, k, row_ptr, col_idx, values)
}

/// The MESS operator S = exp(τW), stored dense.
#[derive(Clone, Debug)]
pub struct MessOperator {
    pub tau: f64,
    pub s: Array2<f64>,
    pub n: usize,
}

// Padé-13 numerator coefficients (Higham 2005, scaling-and-squaring).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn one_norm(a: &Array2<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

fn expm_pade13(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let norm = one_norm(a);
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as u32
    } else {
        0
    };
    let a = a / 2f64.powi(s as i32);
    let eye = Array2::<f64>::eye(n);
    let a2 = a.dot(&a);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);

    let u_inner = &a6 * PADE13[13] + &a4 * PADE13[11] + &a2 * PADE13[9];
    let u_poly =
        u_inner.dot(&a6) + &a6 * PADE13[7] + &a4 * PADE13[5] + &a2 * PADE13[3] + &eye * PADE13[1];
    let u = a.dot(&u_poly);

    let v_inner = &a6 * PADE13[12] + &a4 * PADE13[10] + &a2 * PADE13[8];
    let v =
        v_inner.dot(&a6) + &a6 * PADE13[6] + &a4 * PADE13[4] + &a2 * PADE13[2] + &eye * PADE13[0];

    let denom = &v - &u;
    let numer = &v + &u;
    let denom_inv = denom
        .inv()
        .map_err(|_| Error::Linalg("Padé denominator is singular".into()))?;
    let mut x = denom_inv.dot(&numer);
    for _ in 0..s {
        x = x.dot(&x);
    }
    Ok(x)
}

/// exp(τW) by Padé-13 scaling-and-squaring on the dense τW.
pub fn matrix_exponential(tau: f64, w: &SpatialWeights) -> Result<MessOperator> {
    if !tau.is_finite() {
        return Err(Error::NonFinite("tau".into()));
    }
    let a = w.to_dense() * tau;
    let s = expm_pade13(&a)?;
    Ok(MessOperator {
        tau,
        s,
        n: w.n(),
    })
}

/// Ω̃ = SᵀS / σ², the spatial precision of the MESS error.
pub fn spatial_precision(s: &MessOperator, sigma2: f64) -> Result<Array2<f64>> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(gram(&s.s) / sigma2)
}

const SERIES_MAX_TERMS: usize = 96;

/// y = exp(τW) x through the truncated power series, using W's sparsity.
pub fn mess_action(tau: f64, w: &SpatialWeights, x: ArrayView1<f64>) -> Array1<f64> {
    let n = w.n();
    let mut acc = x.to_owned();
    let mut cur = x.to_owned();
    let mut next = Array1::<f64>::zeros(n);
    let mut tiny_streak = 0;
    for k in 1..=SERIES_MAX_TERMS {
        w.matvec(cur.view(), &mut next);
        let scale = tau / k as f64;
        next *= scale;
        acc += &next;
        std::mem::swap(&mut cur, &mut next);
        let term_max = cur.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let acc_max = acc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if term_max <= 1e-17 * acc_max.max(1e-300) {
            tiny_streak += 1;
            if tiny_streak >= 2 {
                break;
            }
        } else {
            tiny_streak = 0;
        }
    }
    acc
}

/// Dense exp(τW) through the same power series, column-blocked for cache
/// friendliness. Matches the Padé path to ~1e-13 on the |τ| ≤ 1.5 range the
/// model uses (see tests); preferred inside the samplers where S is rebuilt
/// thousands of times.
pub fn mess_dense(tau: f64, w: &SpatialWeights) -> Array2<f64> {
    let n = w.n();
    let block = 512usize.min(n);
    let mut acc = Array2::<f64>::eye(n);
    let mut cur = Array2::<f64>::zeros((n, block));
    let mut next = Array2::<f64>::zeros((n, block));
    let mut c0 = 0;
    while c0 < n {
        let width = block.min(n - c0);
        cur.fill(0.0);
        for c in 0..width {
            cur[[c0 + c, c]] = 1.0;
        }
        let mut tiny_streak = 0;
        for k in 1..=SERIES_MAX_TERMS {
            w.mul_dense_cols(&cur, &mut next, width);
            let scale = tau / k as f64;
            let mut term_max = 0.0f64;
            for i in 0..n {
                for c in 0..width {
                    let v = scale * next[[i, c]];
                    cur[[i, c]] = v;
                    acc[[i, c0 + c]] += v;
                    term_max = term_max.max(v.abs());
                }
            }
            if term_max <= 1e-17 {
                tiny_streak += 1;
                if tiny_streak >= 2 {
                    break;
                }
            } else {
                tiny_streak = 0;
            }
        }
        c0 += width;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, RngStream};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use ndarray_linalg::Determinant;
    use rand::Rng;

    /// 60-term power-series oracle with plain dense matmuls; independent of
    /// both production paths.
    fn expm_series_oracle(a: &Array2<f64>) -> Array2<f64> {
        let n = a.nrows();
        let mut acc = Array2::<f64>::eye(n);
        let mut term = Array2::<f64>::eye(n);
        for k in 1..=60 {
            term = term.dot(a) / k as f64;
            acc = acc + &term;
        }
        acc
    }

    fn random_row_normalised(n: usize, seed: u64) -> SpatialWeights {
        let mut rng = RngStream::new(seed, streams::TEST);
        let mut row_ptr = vec![0usize];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            let mut cols: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            // keep ~4 random neighbours
            while cols.len() > 4 {
                let drop = rng.random_range(0..cols.len());
                cols.swap_remove(drop);
            }
            cols.sort_unstable();
            let raw: Vec<f64> = cols.iter().map(|_| rng.random::<f64>() + 0.1).collect();
            let sum: f64 = raw.iter().sum();
            for (j, v) in cols.iter().zip(raw) {
                col_idx.push(*j as u32);
                values.push(v / sum);
            }
            row_ptr.push(col_idx.len());
        }
        SpatialWeights::from_csr(n, 4, row_ptr, col_idx, values).unwrap()
    }

    #[test]
    fn knn_collinear_points() {
        // x = 0, 1, 3 with k = 1: nearest of 0 is 1, of 1 is 0, of 3 is 1
        let pts = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        let w = knn_weight_matrix(&pts, 1).unwrap();
        let expect = [(0usize, 1usize), (1, 0), (2, 1)];
        for &(i, j) in &expect {
            let row: Vec<(usize, f64)> = w.row(i).collect();
            assert_eq!(row, vec![(j, 1.0)]);
        }
    }

    #[test]
    fn knn_row_sums_and_counts() {
        let mut rng = RngStream::new(42, streams::TEST);
        let pts: Vec<[f64; 2]> = (0..1000)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let w = knn_weight_matrix(&pts, 8).unwrap();
        for i in 0..w.n() {
            assert_eq!(w.nnz_row(i), 8);
            let sum: f64 = w.row(i).map(|(_, v)| v).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn knn_tie_broken_by_lowest_index() {
        // three coincident candidates at distance 1; k = 2 must pick indices 1, 2
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [5.0, 5.0]];
        let w = knn_weight_matrix(&pts, 2).unwrap();
        let row: Vec<usize> = w.row(0).map(|(j, _)| j).collect();
        assert_eq!(row, vec![1, 2]);
    }

    #[test]
    fn knn_too_few_points_errors() {
        let pts = [[0.0, 0.0], [1.0, 0.0]];
        assert!(knn_weight_matrix(&pts, 2).is_err());
        // duplicates don't count towards the distinct minimum
        let dup = [[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        assert!(knn_weight_matrix(&dup, 2).is_err());
    }

    #[test]
    fn expm_zero_tau_is_identity() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let w = knn_weight_matrix(&pts, 2).unwrap();
        let m = matrix_exponential(0.0, &w).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(m.s[[i, j]], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn expm_symmetric_two_by_two_closed_form() {
        // W = [[0,1],[1,0]], exp(τW) = [[cosh τ, sinh τ], [sinh τ, cosh τ]]
        let w = SpatialWeights::from_csr(2, 1, vec![0, 1, 2], vec![1, 0], vec![1.0, 1.0]).unwrap();
        let tau = 0.5;
        let m = matrix_exponential(tau, &w).unwrap();
        assert_abs_diff_eq!(m.s[[0, 0]], tau.cosh(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.s[[0, 1]], tau.sinh(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.s[[1, 0]], tau.sinh(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.s[[1, 1]], tau.cosh(), epsilon = 1e-12);
    }

    #[test]
    fn expm_matches_series_oracle() {
        let w = random_row_normalised(10, 7);
        for &tau in &[-0.7, 0.3, 1.4] {
            let m = matrix_exponential(tau, &w).unwrap();
            let oracle = expm_series_oracle(&(w.to_dense() * tau));
            let scale = one_norm(&oracle);
            let diff = one_norm(&(&m.s - &oracle));
            assert!(diff / scale <= 1e-10, "tau={tau}: rel err {}", diff / scale);
        }
    }

    #[test]
    fn expm_rejects_nonfinite_tau() {
        let w = random_row_normalised(4, 8);
        assert!(matrix_exponential(f64::NAN, &w).is_err());
        assert!(matrix_exponential(f64::INFINITY, &w).is_err());
    }

    #[test]
    fn series_paths_match_pade() {
        let w = random_row_normalised(23, 11);
        let mut rng = RngStream::new(12, streams::TEST);
        for &tau in &[-1.4, -0.7, 0.0, 0.9] {
            let pade = matrix_exponential(tau, &w).unwrap().s;
            let dense = mess_dense(tau, &w);
            let diff = one_norm(&(&pade - &dense));
            assert!(diff <= 1e-12 * one_norm(&pade).max(1.0), "tau={tau}");

            let x = Array1::from_iter((0..23).map(|_| rng.random::<f64>() - 0.5));
            let via_action = mess_action(tau, &w, x.view());
            let via_pade = pade.dot(&x);
            for i in 0..23 {
                assert_abs_diff_eq!(via_action[i], via_pade[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn unit_determinant_and_semigroup() {
        let w = random_row_normalised(20, 21);
        for &tau in &[-1.4, 0.6] {
            let m = matrix_exponential(tau, &w).unwrap();
            let (sign, ln_det) = m.s.sln_det().unwrap();
            assert!(sign > 0.0);
            assert!(ln_det.abs() < 1e-8, "log-det {ln_det} at tau={tau}");
        }
        let (t1, t2) = (-0.9, 0.4);
        let a = matrix_exponential(t1, &w).unwrap().s;
        let b = matrix_exponential(t2, &w).unwrap().s;
        let ab = a.dot(&b);
        let c = matrix_exponential(t1 + t2, &w).unwrap().s;
        assert!(one_norm(&(&ab - &c)) < 1e-9);
    }

    #[test]
    fn precision_identity_case_and_logdet() {
        let w = random_row_normalised(12, 31);
        let eye_op = MessOperator {
            tau: 0.0,
            s: Array2::eye(5),
            n: 5,
        };
        let p = spatial_precision(&eye_op, 4.0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 0.25 } else { 0.0 };
                assert_abs_diff_eq!(p[[i, j]], expect, epsilon = 1e-15);
            }
        }
        assert!(spatial_precision(&eye_op, 0.0).is_err());
        assert!(spatial_precision(&eye_op, -1.0).is_err());

        // log-det(Ω̃) = -N ln σ², independent of τ
        for &(tau, sigma2) in &[(0.8, 0.04), (-1.2, 0.3)] {
            let m = matrix_exponential(tau, &w).unwrap();
            let p = spatial_precision(&m, sigma2).unwrap();
            let (sign, ln_det) = p.sln_det().unwrap();
            assert!(sign > 0.0);
            assert_abs_diff_eq!(ln_det, -(12.0) * sigma2.ln(), epsilon = 1e-8);
        }
    }

    #[test]
    fn precision_is_choleskyable() {
        let w = random_row_normalised(5, 77);
        let m = matrix_exponential(-0.6, &w).unwrap();
        let p = spatial_precision(&m, 0.2).unwrap();
        assert!(crate::linalg::chol_lower(&p, "precision").is_ok());
    }

    #[test]
    fn weight_file_roundtrip() {
        let pts = [[0.1, 0.2], [0.9, 0.4], [0.5, 0.5], [0.3, 0.8], [0.7, 0.1]];
        let w = knn_weight_matrix(&pts, 2).unwrap();
        let mut buf = Vec::new();
        w.to_writer(&mut buf).unwrap();
        let w2 = SpatialWeights::from_reader(&buf[..]).unwrap();
        assert_eq!(w.n(), w2.n());
        assert_eq!(w.neighbor_count(), w2.neighbor_count());
        for i in 0..w.n() {
            let a: Vec<(usize, f64)> = w.row(i).collect();
            let b: Vec<(usize, f64)> = w2.row(i).collect();
            assert_eq!(a, b);
        }
    }
}
