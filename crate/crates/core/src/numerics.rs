//! Complex linear algebra, random streams and special functions.
//!
//! Only the kernels the simulator needs live here: a dense complex matrix,
//! a cyclic Jacobi eigensolver for Hermitian matrices, a one-sided Jacobi
//! SVD, the Moore–Penrose pseudo-inverse and the chi-squared quantile.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{invalid, Result};

pub type C64 = Complex64;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Dense complex matrix, row-major, one flat buffer of interleaved (re, im) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CMat { rows, cols, data }
    }

    /// Builds a matrix from a row-major buffer. Fails if the length does not
    /// match or any entry is not finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            ));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return invalid("matrix entries must be finite");
        }
        Ok(CMat { rows, cols, data })
    }

    /// Column vector (n x 1).
    pub fn column(v: &[C64]) -> Self {
        CMat {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// Outer product `u v^T` (no conjugation).
    pub fn outer(u: &[C64], v: &[C64]) -> Self {
        CMat::from_fn(u.len(), v.len(), |r, c| u[r] * v[c])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, v: &[C64]) {
        for (r, &z) in v.iter().enumerate() {
            self[(r, c)] = z;
        }
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &CMat) -> CMat {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = CMat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == ZERO {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scale(&self, s: f64) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn sub(&self, other: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Whether `self` is square and `‖m − m^H‖_max ≤ tol·‖m‖_F`.
    pub fn is_hermitian(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let bound = tol * self.frobenius_norm().max(f64::MIN_POSITIVE);
        for r in 0..self.rows {
            for c in r..self.cols {
                if (self[(r, c)] - self[(c, r)].conj()).norm() > bound {
                    return false;
                }
            }
        }
        true
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = C64;

    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Inner product `u^H v`.
pub fn dot_h(u: &[C64], v: &[C64]) -> C64 {
    u.iter().zip(v).map(|(a, b)| a.conj() * b).sum()
}

pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Pairwise (cascade) summation; fixed reduction order for reproducible sums.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Reproducible random stream. The pair (seed, stream id) selects a ChaCha
/// key/nonce combination, so distinct stream ids give independent sequences
/// and results do not depend on the order in which streams are consumed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Derives an independent child stream; same (seed, stream, tag) gives the same child.
    pub fn fork(&self, tag: u64) -> RngStream {
        let mixed = splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        RngStream::new(self.seed, mixed)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// One draw from CN(0, 1).
    pub fn cnormal(&mut self) -> C64 {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        C64::new(self.standard_normal() * s, self.standard_normal() * s)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// `n` draws from the circularly-symmetric complex normal CN(mean, variance).
pub fn sample_cnormal(rng: &mut RngStream, mean: C64, variance: f64, n: usize) -> Result<Vec<C64>> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return invalid(format!("variance must be a finite value >= 0, got {variance}"));
    }
    let sd = variance.sqrt();
    Ok((0..n).map(|_| mean + rng.cnormal() * sd).collect())
}

/// Eigen-decomposition of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermitianEig {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Unit-norm eigenvectors as columns, in the order of `values`.
    pub vectors: CMat,
}

/// Applies `A <- A U` on columns (p, q) for the 2x2 block `u = [[upp, upq], [uqp, uqq]]`.
fn rotate_cols(a: &mut CMat, p: usize, q: usize, u: [[C64; 2]; 2]) {
    for r in 0..a.rows() {
        let (ap, aq) = (a[(r, p)], a[(r, q)]);
        a[(r, p)] = ap * u[0][0] + aq * u[1][0];
        a[(r, q)] = ap * u[0][1] + aq * u[1][1];
    }
}

/// Applies `A <- U^H A` on rows (p, q).
fn rotate_rows_adjoint(a: &mut CMat, p: usize, q: usize, u: [[C64; 2]; 2]) {
    for c in 0..a.cols() {
        let (ap, aq) = (a[(p, c)], a[(q, c)]);
        a[(p, c)] = u[0][0].conj() * ap + u[1][0].conj() * aq;
        a[(q, c)] = u[0][1].conj() * ap + u[1][1].conj() * aq;
    }
}

/// Unitary 2x2 block that first rotates the phase of index `q` by `-phase`
/// and then applies the real rotation with tangent `t`.
fn jacobi_block(t: f64, phase: C64) -> [[C64; 2]; 2] {
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let e = phase.conj();
    [[C64::new(c, 0.0), C64::new(s, 0.0)], [-e * s, e * c]]
}

/// Cyclic Jacobi eigensolver for Hermitian matrices.
pub fn hermitian_eig(m: &CMat) -> Result<HermitianEig> {
    if m.rows() != m.cols() {
        return invalid(format!("eigensolver needs a square matrix, got {}x{}", m.rows(), m.cols()));
    }
    if !m.is_hermitian(1e-10) {
        return invalid("eigensolver input is not Hermitian");
    }
    let n = m.rows();
    // Symmetrize so that round-off asymmetry in the input does not leak in.
    let mut a = CMat::from_fn(n, n, |r, c| 0.5 * (m[(r, c)] + m[(c, r)].conj()));
    let mut v = CMat::identity(n);
    let scale = a.frobenius_norm();
    if scale > 0.0 {
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
                .map(|(r, c)| a[(r, c)].norm_sqr())
                .sum::<f64>()
                .sqrt();
            if off <= 1e-15 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    let mag = apq.norm();
                    if mag <= 1e-300 || mag <= 1e-18 * scale {
                        continue;
                    }
                    let phase = apq / mag;
                    let theta = (a[(q, q)].re - a[(p, p)].re) / (2.0 * mag);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let u = jacobi_block(t, phase);
                    rotate_cols(&mut a, p, q, u);
                    rotate_rows_adjoint(&mut a, p, q, u);
                    a[(p, q)] = ZERO;
                    a[(q, p)] = ZERO;
                    a[(p, p)] = C64::new(a[(p, p)].re, 0.0);
                    a[(q, q)] = C64::new(a[(q, q)].re, 0.0);
                    rotate_cols(&mut v, p, q, u);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].re.total_cmp(&a[(i, i)].re));
    let values = order.iter().map(|&i| a[(i, i)].re).collect();
    let vectors = CMat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(HermitianEig { values, vectors })
}

/// Thin singular value decomposition `m = U diag(s) V^H`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMat,
    /// Singular values, descending.
    pub s: Vec<f64>,
    pub v: CMat,
}

/// One-sided (Hestenes) Jacobi SVD. Singular values are accurate to
/// working precision relative to the largest one, so rank deficiency shows
/// up as values near `1e-16 * s[0]`.
pub fn svd(m: &CMat) -> Svd {
    if m.rows() < m.cols() {
        let t = svd(&m.adjoint());
        return Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        };
    }
    let (rows, n) = (m.rows(), m.cols());
    let mut a = m.clone();
    let mut v = CMat::identity(n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, ZERO);
                for r in 0..rows {
                    let (ai, aj) = (a[(r, i)], a[(r, j)]);
                    alpha += ai.norm_sqr();
                    beta += aj.norm_sqr();
                    gamma += ai.conj() * aj;
                }
                let g = gamma.norm();
                if g <= 1e-15 * (alpha * beta).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * g);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let u = jacobi_block(t, gamma / g);
                rotate_cols(&mut a, i, j, u);
                rotate_cols(&mut v, i, j, u);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|c| norm(&a.col(c))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let s: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let u = CMat::from_fn(rows, n, |r, c| {
        let k = order[c];
        if norms[k] > 0.0 {
            a[(r, k)] / norms[k]
        } else {
            ZERO
        }
    });
    let v = CMat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Svd { u, s, v }
}

/// Moore–Penrose pseudo-inverse through the SVD.
pub fn pseudo_inverse(m: &CMat) -> CMat {
    let d = svd(m);
    let smax = d.s.first().copied().unwrap_or(0.0);
    let tol = smax * f64::EPSILON * (m.rows().max(m.cols()) as f64);
    let k = d.s.len();
    // pinv = V diag(1/s) U^H
    CMat::from_fn(m.cols(), m.rows(), |r, c| {
        let mut acc = ZERO;
        for i in 0..k {
            if d.s[i] > tol {
                acc += d.v[(r, i)] * d.u[(c, i)].conj() / d.s[i];
            }
        }
        acc
    })
}

/// CDF of the chi-squared distribution with `dof` degrees of freedom.
pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_lr(dof as f64 / 2.0, x / 2.0)
}

fn chi2_log_pdf(dof: usize, x: f64) -> f64 {
    let k = dof as f64 / 2.0;
    (k - 1.0) * x.ln() - x / 2.0 - k * std::f64::consts::LN_2 - ln_gamma(k)
}

/// Quantile of the chi-squared distribution: the `τ` with `CDF(τ) = p`.
///
/// Bracketing bisection on the regularized lower incomplete gamma function,
/// polished with safeguarded Newton steps.
pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 {
        return invalid("chi-squared quantile needs dof >= 1");
    }
    if !(p > 0.0 && p < 1.0) {
        return invalid(format!("probability must lie in (0, 1), got {p}"));
    }
    let (mut lo, mut hi) = (0.0_f64, (dof as f64).max(1.0));
    while chi2_cdf(dof, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = chi2_cdf(dof, x) - p;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dens = chi2_log_pdf(dof, x).exp();
        let newton = x - f / dens;
        x = if dens > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (hi - lo) <= 1e-15 * x.abs() || (f / dens).abs() <= 1e-15 * x.abs() {
            break;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_hermitian(rng: &mut RngStream, n: usize) -> CMat {
        let g = CMat::from_fn(n, n, |_, _| rng.cnormal());
        let mut h = g.add(&g.adjoint()).scale(0.5);
        for i in 0..n {
            h[(i, i)] = C64::new(h[(i, i)].re, 0.0);
        }
        h
    }

    fn reconstruct(e: &HermitianEig) -> CMat {
        let n = e.values.len();
        let mut d = CMat::zeros(n, n);
        for i in 0..n {
            d[(i, i)] = C64::new(e.values[i], 0.0);
        }
        e.vectors.matmul(&d).matmul(&e.vectors.adjoint())
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let mut rng = RngStream::new(3, 0);
        let z = sample_cnormal(&mut rng, C64::new(0.0, 0.0), 0.0, 3).unwrap();
        assert_eq!(z, vec![ZERO; 3]);
    }

    #[test]
    fn cnormal_power_matches_variance() {
        let mut rng = RngStream::new(11, 2);
        let z = sample_cnormal(&mut rng, ZERO, 2.0, 100_000).unwrap();
        let p = z.iter().map(|v| v.norm_sqr()).sum::<f64>() / z.len() as f64;
        assert!((1.96..=2.04).contains(&p), "mean power {p}");
        let re = z.iter().map(|v| v.re * v.re).sum::<f64>() / z.len() as f64;
        assert!((re - 1.0).abs() < 0.03, "real-part variance {re}");
    }

    #[test]
    fn streams_are_deterministic() {
        let a = sample_cnormal(&mut RngStream::new(1, 7), ZERO, 1.0, 16).unwrap();
        let b = sample_cnormal(&mut RngStream::new(1, 7), ZERO, 1.0, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 100_000;
        let a = sample_cnormal(&mut RngStream::new(5, 1), ZERO, 1.0, n).unwrap();
        let b = sample_cnormal(&mut RngStream::new(5, 2), ZERO, 1.0, n).unwrap();
        let rho = dot_h(&a, &b).norm() / (norm(&a) * norm(&b));
        assert!(rho < 0.01, "cross-correlation {rho}");
    }

    #[test]
    fn negative_variance_rejected() {
        let mut rng = RngStream::new(0, 0);
        assert!(sample_cnormal(&mut rng, ZERO, -1.0, 2).is_err());
    }

    #[test]
    fn eig_identity() {
        let e = hermitian_eig(&CMat::identity(4)).unwrap();
        for v in e.values {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn eig_rank_one_projector() {
        let mut rng = RngStream::new(9, 0);
        let a: Vec<C64> = (0..6).map(|_| rng.cnormal()).collect();
        let na = norm(&a);
        let a: Vec<C64> = a.iter().map(|z| z / na).collect();
        let p = CMat::from_fn(6, 6, |r, c| a[r] * a[c].conj());
        let e = hermitian_eig(&p).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-12);
        for v in &e.values[1..] {
            assert!(v.abs() < 1e-12);
        }
        let u0 = e.vectors.col(0);
        assert!((dot_h(&u0, &a).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_rejects_non_hermitian() {
        let mut m = CMat::identity(3);
        m[(0, 1)] = C64::new(1.0, 0.0);
        assert!(hermitian_eig(&m).is_err());
    }

    #[test]
    fn eig_reconstructs_random_8x8() {
        let mut rng = RngStream::new(21, 4);
        let h = random_hermitian(&mut rng, 8);
        let e = hermitian_eig(&h).unwrap();
        let err = reconstruct(&e).sub(&h).frobenius_norm();
        assert!(err <= 1e-8 * h.frobenius_norm(), "reconstruction error {err}");
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn eig_pairs_hold(seed in any::<u64>(), n in 1usize..=16) {
            let mut rng = RngStream::new(seed, 0);
            let h = random_hermitian(&mut rng, n);
            let e = hermitian_eig(&h).unwrap();
            let scale = h.frobenius_norm();
            for i in 0..n {
                let u = e.vectors.col(i);
                prop_assert!((norm(&u) - 1.0).abs() < 1e-10);
                let hu = h.matvec(&u);
                let resid: f64 = hu.iter().zip(&u).map(|(a, b)| (a - b * e.values[i]).norm_sqr()).sum::<f64>().sqrt();
                prop_assert!(resid <= 1e-8 * scale);
            }
            prop_assert!(reconstruct(&e).sub(&h).frobenius_norm() <= 1e-8 * scale);
        }
    }

    #[test]
    fn svd_reconstructs_and_detects_rank() {
        let mut rng = RngStream::new(4, 4);
        let m = CMat::from_fn(5, 3, |_, _| rng.cnormal());
        let d = svd(&m);
        let mut s = CMat::zeros(3, 3);
        for i in 0..3 {
            s[(i, i)] = C64::new(d.s[i], 0.0);
        }
        let back = d.u.matmul(&s).matmul(&d.v.adjoint());
        assert!(back.sub(&m).frobenius_norm() < 1e-12);

        let u: Vec<C64> = (0..4).map(|_| rng.cnormal()).collect();
        let w: Vec<C64> = (0..7).map(|_| rng.cnormal()).collect();
        let r1 = CMat::outer(&u, &w);
        let s = svd(&r1).s;
        assert!(s[1] < 1e-14 * s[0]);
    }

    fn assert_close(a: &CMat, b: &CMat, tol: f64) {
        let err = a.sub(b).frobenius_norm();
        assert!(err <= tol, "matrices differ by {err}");
    }

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let m = CMat::from_vec(
            2,
            2,
            vec![C64::new(2.0, 1.0), C64::new(0.5, 0.0), C64::new(-1.0, 0.0), C64::new(1.0, -1.0)],
        )
        .unwrap();
        let p = pseudo_inverse(&m);
        assert_close(&m.matmul(&p), &CMat::identity(2), 1e-12);
    }

    #[test]
    fn pinv_of_column_vector() {
        let a = [C64::new(1.0, 2.0), C64::new(-0.5, 0.25), C64::new(0.0, 3.0)];
        let p = pseudo_inverse(&CMat::column(&a));
        let n2: f64 = a.iter().map(|z| z.norm_sqr()).sum();
        let expect = CMat::column(&a).adjoint().scale(1.0 / n2);
        assert_close(&p, &expect, 1e-12);
    }

    #[test]
    fn pinv_matches_normal_equations() {
        let mut rng = RngStream::new(8, 1);
        let m = CMat::from_fn(4, 2, |_, _| rng.cnormal());
        let mh = m.adjoint();
        let g = mh.matmul(&m);
        // closed-form 2x2 inverse as the oracle
        let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
        let ginv = CMat::from_vec(2, 2, vec![g[(1, 1)] / det, -g[(0, 1)] / det, -g[(1, 0)] / det, g[(0, 0)] / det]).unwrap();
        assert_close(&pseudo_inverse(&m), &ginv.matmul(&mh), 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pinv_satisfies_penrose_identities(seed in any::<u64>(), r in 1usize..6, c in 1usize..6, rank in 1usize..4) {
            let mut rng = RngStream::new(seed, 3);
            let k = rank.min(r).min(c);
            let a = CMat::from_fn(r, k, |_, _| rng.cnormal());
            let b = CMat::from_fn(k, c, |_, _| rng.cnormal());
            let m = a.matmul(&b);
            let p = pseudo_inverse(&m);
            let tol = 1e-8 * m.frobenius_norm().max(1.0) * p.frobenius_norm().max(1.0);
            prop_assert!(m.matmul(&p).matmul(&m).sub(&m).frobenius_norm() <= tol);
            prop_assert!(p.matmul(&m).matmul(&p).sub(&p).frobenius_norm() <= tol);
            let mp = m.matmul(&p);
            prop_assert!(mp.sub(&mp.adjoint()).frobenius_norm() <= tol);
            let pm = p.matmul(&m);
            prop_assert!(pm.sub(&pm.adjoint()).frobenius_norm() <= tol);
        }
    }

    /// Composite Simpson quadrature of the chi-squared density on [0, x].
    fn chi2_cdf_quadrature(dof: usize, x: f64) -> f64 {
        let k = dof as f64 / 2.0;
        let n = 400_000;
        let h = x / n as f64;
        let f = |t: f64| {
            if t <= 0.0 {
                if dof == 2 { 0.5 } else { 0.0 }
            } else {
                ((k - 1.0) * t.ln() - t / 2.0 - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
            }
        };
        let mut acc = f(0.0) + f(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn chi2_quantile_dof2_closed_form() {
        let p = 1.0 - (-1.0_f64).exp();
        let q = chi2_quantile(2, p).unwrap();
        assert!((q - 2.0).abs() < 1e-10, "{q}");
    }

    #[test]
    fn chi2_quantile_dof32() {
        let q = chi2_quantile(32, 0.99).unwrap();
        // bisection directly on the incomplete gamma function
        let (mut lo, mut hi) = (0.0, 200.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gamma_lr(16.0, mid / 2.0) < 0.99 { lo = mid } else { hi = mid }
        }
        assert!((q - 0.5 * (lo + hi)).abs() < 1e-9 * q);
        assert!((q - 53.486).abs() < 1e-3, "{q}");
    }

    #[test]
    fn chi2_quantile_matches_quadrature() {
        for (dof, p) in [(480usize, 0.99), (32, 0.99), (30, 0.5)] {
            let q = chi2_quantile(dof, p).unwrap();
            let cdf = chi2_cdf_quadrature(dof, q);
            assert!(((cdf - p) / p).abs() < 1e-6, "dof {dof}: cdf {cdf} vs {p}");
            assert!(((chi2_cdf(dof, q) - p) / p).abs() < 1e-8);
        }
    }

    #[test]
    fn chi2_quantile_rejects_bad_probability() {
        assert!(chi2_quantile(4, 0.0).is_err());
        assert!(chi2_quantile(4, 1.0).is_err());
        assert!(chi2_quantile(0, 0.5).is_err());
    }

    #[test]
    fn chi2_quantile_is_monotone() {
        let ps = [0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999];
        for dof in [1usize, 2, 5, 32, 100, 480] {
            let qs: Vec<f64> = ps.iter().map(|&p| chi2_quantile(dof, p).unwrap()).collect();
            assert!(qs.windows(2).all(|w| w[0] < w[1]), "dof {dof}: {qs:?}");
        }
        for p in ps {
            let qs: Vec<f64> = [1usize, 2, 4, 16, 64, 256].iter().map(|&d| chi2_quantile(d, p).unwrap()).collect();
            assert!(qs.windows(2).all(|w| w[0] < w[1]), "p {p}: {qs:?}");
        }
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert!((pairwise_sum(&xs) - xs.iter().sum::<f64>()).abs() < 1e-10);
    }
}
