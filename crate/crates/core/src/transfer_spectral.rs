//! Fourier–Galerkin discretization of the twisted transfer operator
//! `L_ν u(x) = Σ_{F(y)=x} e^{iντ(y)} u(y) / det DF(y)` and its leading
//! spectrum.
//!
//! Entry `(m, k)` is `∫ e^{-2πi m·F(y)} e^{iντ(y)} e^{2πi k·y} dy`, the
//! duality form of the operator, computed by one 2D FFT per row.

use std::f64::consts::TAU;

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SvphError};
use crate::fourier::{FftPlan, FourierTable, ModeBasis, C64};
use crate::observable::Observable;
use crate::torus_maps::{MapSpec, TorusPoint};

/// Matrices above this dimension use block subspace iteration.
pub const DENSE_LIMIT: usize = 5000;
/// `|λ| > 1 − gap_tol` counts as peripheral.
pub const DEFAULT_GAP_TOL: f64 = 5e-3;
/// Largest tolerated entry change when `Q` is doubled.
pub const ALIASING_TOL: f64 = 1e-6;
/// Residuals must stay below this multiple of `‖M‖_F`.
pub const RESIDUAL_FACTOR: f64 = 1e-8;
pub const OVERLAP_THRESHOLD: f64 = 0.9;
/// Default finite-difference step for the twisted curves.
pub const DEFAULT_STEP: f64 = 0.02;
pub const RICHARDSON_TOL: f64 = 1e-4;
/// `max |λ(ν)| ≥ 1 − UNIT_DISK_FLAG` flags lattice or coboundary structure.
pub const UNIT_DISK_FLAG: f64 = 1e-4;

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration types serialize");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    pub basis: ModeBasis,
    pub quadrature: usize,
    pub nu: f64,
    entries: Vec<C64>,
    pub map_hash: String,
    pub obs_hash: String,
    /// Max entry change against an assembly at `2Q`, when checked.
    pub aliasing_change: Option<f64>,
}

impl OperatorMatrix {
    /// Builds a matrix directly from row-major entries.
    pub fn from_entries(basis: ModeBasis, entries: Vec<C64>) -> Result<Self> {
        if entries.len() != basis.dim() * basis.dim() {
            return Err(SvphError::Precondition(format!(
                "expected {} entries, got {}",
                basis.dim() * basis.dim(),
                entries.len()
            )));
        }
        Ok(Self {
            basis,
            quadrature: 0,
            nu: 0.0,
            entries,
            map_hash: String::new(),
            obs_hash: String::new(),
            aliasing_change: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn cutoff(&self) -> usize {
        self.basis.cutoff
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.entries[row * self.dim() + col]
    }

    /// Entry `[(m), (k)]` by mode labels.
    pub fn entry(&self, m: (i32, i32), k: (i32, i32)) -> Option<C64> {
        let r = self.basis.index(m.0, m.1)?;
        let c = self.basis.index(k.0, k.1)?;
        Some(self.get(r, c))
    }

    pub fn entries(&self) -> &[C64] {
        &self.entries
    }

    pub fn apply(&self, u: &[C64]) -> Vec<C64> {
        let n = self.dim();
        assert_eq!(u.len(), n);
        self.entries
            .par_chunks(n)
            .map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Mᴴ w`.
    pub fn apply_adjoint(&self, w: &[C64]) -> Vec<C64> {
        let n = self.dim();
        assert_eq!(w.len(), n);
        let mut out = vec![C64::default(); n];
        for (row, wi) in self.entries.chunks(n).zip(w) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a.conj() * wi;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn to_faer(&self) -> Mat<C64> {
        let n = self.dim();
        Mat::from_fn(n, n, |i, j| self.entries[i * n + j])
    }
}

struct Sample {
    fx: f64,
    fth: f64,
    twist: C64,
}

fn samples(spec: &MapSpec, tau: &FourierTable, nu: f64, q: usize) -> Vec<Sample> {
    let mut out = Vec::with_capacity(q * q);
    for i in 0..q {
        for j in 0..q {
            let (x, th) = (i as f64 / q as f64, j as f64 / q as f64);
            let (fx, fth) = spec.lift(x, th);
            let twist = if nu == 0.0 {
                C64::new(1.0, 0.0)
            } else {
                C64::from_polar(1.0, nu * tau.value(x, th))
            };
            out.push(Sample {
                fx: fx.rem_euclid(1.0),
                fth: fth.rem_euclid(1.0),
                twist,
            });
        }
    }
    out
}

fn assemble_entries(spec: &MapSpec, tau: &FourierTable, nu: f64, basis: ModeBasis, q: usize) -> Vec<C64> {
    let pts = samples(spec, tau, nu, q);
    let plan = FftPlan::new(q);
    let dim = basis.dim();
    let qi = q as i32;
    let rows: Vec<Vec<C64>> = (0..dim)
        .into_par_iter()
        .map(|r| {
            let (m1, m2) = basis.mode(r);
            let (m1, m2) = (f64::from(m1), f64::from(m2));
            let mut data: Vec<C64> = pts
                .iter()
                .map(|s| {
                    let phase = (m1 * s.fx + m2 * s.fth).rem_euclid(1.0);
                    C64::from_polar(1.0, -TAU * phase) * s.twist
                })
                .collect();
            plan.forward(&mut data);
            (0..dim)
                .map(|c| {
                    let (k1, k2) = basis.mode(c);
                    data[((-k1).rem_euclid(qi) * qi + (-k2).rem_euclid(qi)) as usize]
                })
                .collect()
        })
        .collect();
    rows.concat()
}

fn twist_table(obs: &Observable, nu: f64) -> Result<FourierTable> {
    if nu != 0.0 {
        obs.require_smooth()?;
    }
    Ok(obs.effective_table())
}

/// Assembles `L_ν` on the mode box of cutoff `k` with a `q × q` lattice.
pub fn assemble(spec: &MapSpec, obs: &Observable, nu: f64, k: usize, q: usize) -> Result<OperatorMatrix> {
    if !q.is_power_of_two() || q < 2 * (2 * k + 1) {
        return Err(SvphError::Precondition(format!(
            "Q must be a power of two with Q >= 2(2K+1) = {}, got {q}",
            2 * (2 * k + 1)
        )));
    }
    if !nu.is_finite() {
        return Err(SvphError::Precondition("nu must be finite".into()));
    }
    let tau = twist_table(obs, nu)?;
    let basis = ModeBasis::new(k);
    Ok(OperatorMatrix {
        basis,
        quadrature: q,
        nu,
        entries: assemble_entries(spec, &tau, nu, basis, q),
        map_hash: digest(spec),
        obs_hash: digest(obs),
        aliasing_change: None,
    })
}

/// [`assemble`] plus a comparison against the `2Q` assembly.
pub fn assemble_checked(spec: &MapSpec, obs: &Observable, nu: f64, k: usize, q: usize) -> Result<OperatorMatrix> {
    let mut m = assemble(spec, obs, nu, k, q)?;
    let tau = twist_table(obs, nu)?;
    let fine = assemble_entries(spec, &tau, nu, m.basis, 2 * q);
    let change = m
        .entries
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    if change > ALIASING_TOL {
        return Err(SvphError::AliasingSuspected { max_change: change });
    }
    m.aliasing_change = Some(change);
    Ok(m)
}

/// Matrix-free `(L_ν u)(p)` by summing over preimages.
pub fn pointwise_apply(
    spec: &MapSpec,
    obs: &Observable,
    nu: f64,
    basis: &ModeBasis,
    u: &[C64],
    p: TorusPoint,
) -> Result<C64> {
    let tau = twist_table(obs, nu)?;
    let mut acc = C64::default();
    for y in spec.preimages(p)? {
        let det = spec.differential(y).det;
        let twist = C64::from_polar(1.0, nu * tau.value(y.x(), y.theta()));
        acc += basis.synthesize(u, y.x(), y.theta()) * twist / det;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Dense,
    Subspace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralData {
    pub basis: ModeBasis,
    pub nu: f64,
    pub eigenvalues: Vec<C64>,
    pub right_vectors: Vec<Vec<C64>>,
    pub left_vectors: Vec<Vec<C64>>,
    pub peripheral_count: usize,
    /// Eigenvalues with `|λ − 1| < gap_tol`.
    pub unit_count: usize,
    pub gap: Option<f64>,
    pub residuals: Vec<f64>,
    pub gap_tol: f64,
    pub matrix_norm: f64,
    /// Left vectors satisfy `⟨w_i, v_j⟩ = δ_ij`.
    pub biorthogonal: bool,
    pub method: SolverMethod,
    pub map_hash: String,
    pub obs_hash: String,
}

impl SpectralData {
    pub fn max_modulus(&self) -> f64 {
        self.eigenvalues.first().map_or(0.0, |l| l.norm())
    }

    /// Indices of the eigenvalues in the unit cluster.
    pub fn unit_indices(&self) -> Vec<usize> {
        (0..self.eigenvalues.len())
            .filter(|&i| (self.eigenvalues[i] - 1.0).norm() < self.gap_tol)
            .collect()
    }
}

fn normalize_phase(v: &mut [C64]) {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .unwrap_or(C64::new(1.0, 0.0));
    if norm == 0.0 || pivot.norm() == 0.0 {
        return;
    }
    let s = pivot.conj() / (pivot.norm() * norm);
    v.iter_mut().for_each(|c| *c *= s);
}

fn column(m: &Mat<C64>, j: usize) -> Vec<C64> {
    (0..m.nrows()).map(|i| m[(i, j)]).collect()
}

fn order_by_modulus(vals: &[C64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| {
        vals[b]
            .norm()
            .total_cmp(&vals[a].norm())
            .then(vals[b].re.total_cmp(&vals[a].re))
            .then(vals[b].im.total_cmp(&vals[a].im))
    });
    idx
}

fn dense_eig(a: &Mat<C64>) -> Result<(Vec<C64>, Mat<C64>)> {
    let evd = a
        .eigen()
        .map_err(|e| SvphError::EigenSolverDiverged(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let vals: Vec<C64> = (0..a.nrows()).map(|i| s[i]).collect();
    Ok((vals, evd.U().to_owned()))
}

/// Orthonormalizes the columns of `x` in place.
fn orthonormalize(x: &Mat<C64>) -> Mat<C64> {
    x.qr().compute_thin_Q()
}

/// Leading Ritz pairs of `apply` by block subspace iteration.
fn subspace_eig(
    apply: &(dyn Fn(&Mat<C64>) -> Mat<C64> + Sync),
    n: usize,
    count: usize,
    tol: f64,
    seed: u64,
) -> Result<(Vec<C64>, Vec<Vec<C64>>)> {
    let block = (count + 10).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Mat::from_fn(n, block, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    x = orthonormalize(&x);
    for _ in 0..5000 {
        let ax = apply(&x);
        let h = x.adjoint() * &ax;
        let (vals, y) = dense_eig(&h)?;
        let order = order_by_modulus(&vals);
        let ritz = &x * &y;
        let aritz = &ax * &y;
        let mut worst: f64 = 0.0;
        for &j in order.iter().take(count) {
            let v = column(&ritz, j);
            let av = column(&aritz, j);
            let nv = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            let r = av
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - vals[j] * b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            worst = worst.max(r / nv);
        }
        if worst < tol {
            let mut out_vals = Vec::with_capacity(count);
            let mut out_vecs = Vec::with_capacity(count);
            for &j in order.iter().take(count) {
                out_vals.push(vals[j]);
                out_vecs.push(column(&ritz, j));
            }
            return Ok((out_vals, out_vecs));
        }
        x = orthonormalize(&ax);
    }
    Err(SvphError::EigenSolverDiverged("subspace iteration did not converge".into()))
}

fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Leading `count` eigenpairs of `m` with the default peripheral tolerance.
pub fn spectrum(m: &OperatorMatrix, count: usize) -> Result<SpectralData> {
    spectrum_with_tol(m, count, DEFAULT_GAP_TOL)
}

pub fn spectrum_with_tol(m: &OperatorMatrix, count: usize, gap_tol: f64) -> Result<SpectralData> {
    let n = m.dim();
    if count == 0 || count > n {
        return Err(SvphError::Precondition(format!("count must lie in 1..={n}, got {count}")));
    }
    let norm = m.frobenius_norm();
    let (values, mut right, mut left, method) = if n <= DENSE_LIMIT {
        let a = m.to_faer();
        let (vals, u) = dense_eig(&a)?;
        let order = order_by_modulus(&vals);
        let (lvals, lu) = dense_eig(&a.adjoint().to_owned())?;
        let mut used = vec![false; n];
        let mut values = Vec::with_capacity(count);
        let mut right = Vec::with_capacity(count);
        let mut left = Vec::with_capacity(count);
        for &j in order.iter().take(count) {
            let lambda = vals[j];
            let best = (0..n)
                .filter(|&i| !used[i])
                .min_by(|&a, &b| {
                    (lvals[a].conj() - lambda)
                        .norm()
                        .total_cmp(&(lvals[b].conj() - lambda).norm())
                })
                .expect("enough left eigenvalues");
            used[best] = true;
            values.push(lambda);
            right.push(column(&u, j));
            left.push(column(&lu, best));
        }
        (values, right, left, SolverMethod::Dense)
    } else {
        let tol = RESIDUAL_FACTOR * norm * 0.1;
        let a = m.to_faer();
        let at = a.adjoint().to_owned();
        let fwd = |x: &Mat<C64>| &a * x;
        let adj = |x: &Mat<C64>| &at * x;
        let (values, right) = subspace_eig(&fwd, n, count, tol, 0x5eed)?;
        let (lvals, lvecs) = subspace_eig(&adj, n, count, tol, 0x5eee)?;
        let mut used = vec![false; count];
        let mut left = Vec::with_capacity(count);
        for lambda in &values {
            let best = (0..count)
                .filter(|&i| !used[i])
                .min_by(|&a, &b| {
                    (lvals[a].conj() - lambda)
                        .norm()
                        .total_cmp(&(lvals[b].conj() - lambda).norm())
                })
                .expect("enough left Ritz values");
            used[best] = true;
            left.push(lvecs[best].clone());
        }
        (values, right, left, SolverMethod::Subspace)
    };

    right.iter_mut().for_each(|v| normalize_phase(v));
    left.iter_mut().for_each(|v| normalize_phase(v));

    let mut residuals = Vec::with_capacity(count);
    for (lambda, v) in values.iter().zip(&right) {
        let mv = m.apply(v);
        let r = mv
            .iter()
            .zip(v)
            .map(|(a, b)| (a - lambda * b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        if !(r <= RESIDUAL_FACTOR * norm.max(1.0)) {
            return Err(SvphError::EigenSolverDiverged(format!(
                "residual {r:e} for eigenvalue {lambda} exceeds {:e}",
                RESIDUAL_FACTOR * norm.max(1.0)
            )));
        }
        residuals.push(r);
    }

    // Dual basis: W ← W (WᴴV)^{-H} so that WᴴV = I.
    let k = values.len();
    let s = Mat::from_fn(k, k, |i, j| inner(&left[i], &right[j]));
    let sinv = s.full_piv_lu().inverse();
    let mut biorthogonal = false;
    let mut sinv_max: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            sinv_max = sinv_max.max(sinv[(i, j)].norm());
        }
    }
    if sinv_max.is_finite() && sinv_max < 1e8 {
        let dual: Vec<Vec<C64>> = (0..k)
            .map(|j| {
                let mut w = vec![C64::default(); n];
                for i in 0..k {
                    // column j of W S^{-H}: Σ_i W_i conj(S^{-1}_{j i})
                    let c = sinv[(j, i)].conj();
                    for (o, x) in w.iter_mut().zip(&left[i]) {
                        *o += x * c;
                    }
                }
                w
            })
            .collect();
        let err = (0..k)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .map(|(i, j)| {
                let target = if i == j { 1.0 } else { 0.0 };
                (inner(&dual[i], &right[j]) - target).norm()
            })
            .fold(0.0, f64::max);
        if err < 1e-6 {
            left = dual;
            biorthogonal = true;
        }
    }

    let peripheral_count = values.iter().filter(|l| l.norm() > 1.0 - gap_tol).count();
    let unit_count = values.iter().filter(|l| (*l - 1.0).norm() < gap_tol).count();
    let gap = values.iter().map(|l| l.norm()).find(|r| *r <= 1.0 - gap_tol);

    Ok(SpectralData {
        basis: m.basis,
        nu: m.nu,
        eigenvalues: values,
        right_vectors: right,
        left_vectors: left,
        peripheral_count,
        unit_count,
        gap,
        residuals,
        gap_tol,
        matrix_norm: norm,
        biorthogonal,
        method,
        map_hash: m.map_hash.clone(),
        obs_hash: m.obs_hash.clone(),
    })
}

/// Nonzero entries of a coefficient vector as `[m1, m2, re, im]` rows.
pub fn mode_table(v: &[C64], basis: &ModeBasis, tol: f64) -> Vec<[f64; 4]> {
    v.iter()
        .enumerate()
        .filter(|(_, c)| c.norm() > tol)
        .map(|(i, c)| {
            let (m1, m2) = basis.mode(i);
            [f64::from(m1), f64::from(m2), c.re, c.im]
        })
        .collect()
}

/// `(Σ (1+|m|²)^s |v_m|²)^{1/2}`.
pub fn sobolev_norm(v: &[C64], basis: &ModeBasis, s: f64) -> f64 {
    v.iter()
        .enumerate()
        .map(|(i, c)| {
            let (m1, m2) = basis.mode(i);
            let w = 1.0 + f64::from(m1 * m1 + m2 * m2);
            w.powf(s) * c.norm_sqr()
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwistedCurve {
    pub nu_grid: Vec<f64>,
    /// `branches[k][i]` is `λ_k(nu_grid[i])`.
    pub branches: Vec<Vec<C64>>,
    pub matched: bool,
    pub min_overlap: f64,
    pub mu_tau: Vec<C64>,
    pub sigma2: Vec<f64>,
    pub step: f64,
    /// `|σ²(h) − σ²(h/2)|` per branch when the grid allows it.
    pub richardson_diff: Vec<Option<f64>>,
    /// `max |λ_k(−ν) − conj λ_k(ν)|`.
    pub conjugate_error: f64,
}

/// The default symmetric grid `{0, ±h/2, ±h, ±2h}`.
pub fn default_nu_grid(h: f64) -> Vec<f64> {
    vec![-2.0 * h, -h, -0.5 * h, 0.0, 0.5 * h, h, 2.0 * h]
}

fn find(grid: &[f64], v: f64) -> Option<usize> {
    grid.iter().position(|g| (g - v).abs() < 1e-12)
}

fn five_point(l: [C64; 5], h: f64) -> (C64, C64) {
    let [m2, m1, z, p1, p2] = l;
    let d1 = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
    let d2 = (-p2 + 16.0 * p1 - 30.0 * z + 16.0 * m1 - m2) / (12.0 * h * h);
    (d1, d2)
}

/// `(iμ, σ²)` from derivatives of `λ` at 0: `σ² = −(log λ)''(0)`.
fn log_derivatives(l0: C64, d1: C64, d2: C64) -> (C64, f64) {
    let g1 = d1 / l0;
    let g2 = d2 / l0 - g1 * g1;
    (g1 / C64::new(0.0, 1.0), -g2.re)
}

/// Follows the `ell` leading eigenvalues of `L_ν` across `nu_grid`.
pub fn twisted_curve(
    spec: &MapSpec,
    obs: &Observable,
    nu_grid: &[f64],
    k: usize,
    q: usize,
    ell: usize,
) -> Result<TwistedCurve> {
    obs.require_smooth()?;
    let mut grid = nu_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let zero = find(&grid, 0.0).ok_or_else(|| SvphError::Precondition("nu_grid must contain 0".into()))?;
    if grid.iter().any(|v| find(&grid, -v).is_none()) {
        return Err(SvphError::Precondition("nu_grid must be symmetric about 0".into()));
    }
    if grid.windows(2).any(|w| w[1] - w[0] > 0.05 + 1e-12) {
        return Err(SvphError::Precondition("nu_grid spacing must be <= 0.05".into()));
    }
    let h = grid
        .iter()
        .copied()
        .filter(|v| *v > 0.0 && find(&grid, 2.0 * v).is_some())
        .fold(f64::INFINITY, f64::min);
    if !h.is_finite() {
        return Err(SvphError::Precondition("nu_grid needs points 0, ±h, ±2h".into()));
    }
    if ell == 0 {
        return Err(SvphError::Precondition("ell must be positive".into()));
    }

    let count = (ell + 4).min(ModeBasis::new(k).dim());
    let spectra: Vec<Result<SpectralData>> = grid
        .par_iter()
        .map(|&nu| spectrum(&assemble(spec, obs, nu, k, q)?, count))
        .collect();
    let mut spectra_ok = Vec::with_capacity(spectra.len());
    for s in spectra {
        spectra_ok.push(s?);
    }

    let mut branches = vec![vec![C64::default(); grid.len()]; ell];
    let mut min_overlap: f64 = 1.0;
    for b in 0..ell {
        branches[b][zero] = spectra_ok[zero].eigenvalues[b];
    }
    for dir in [1isize, -1] {
        let mut prev: Vec<(C64, Vec<C64>)> = (0..ell)
            .map(|b| {
                (
                    spectra_ok[zero].eigenvalues[b],
                    spectra_ok[zero].right_vectors[b].clone(),
                )
            })
            .collect();
        let mut i = zero as isize + dir;
        while i >= 0 && (i as usize) < grid.len() {
            let s = &spectra_ok[i as usize];
            let mut taken = vec![false; s.eigenvalues.len()];
            let mut next = Vec::with_capacity(ell);
            for (b, (lp, vp)) in prev.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (j, v) in s.right_vectors.iter().enumerate() {
                    if taken[j] {
                        continue;
                    }
                    let ov = inner(vp, v).norm();
                    best = match best {
                        Some((bj, bo)) if ov < bo - 1e-3 => Some((bj, bo)),
                        Some((bj, bo)) if ov <= bo + 1e-3 => {
                            let closer = (s.eigenvalues[j] - lp).norm() < (s.eigenvalues[bj] - lp).norm();
                            if closer {
                                Some((j, ov))
                            } else {
                                Some((bj, bo))
                            }
                        }
                        _ => Some((j, ov)),
                    };
                }
                let (j, ov) = best.expect("spectrum has candidates");
                if ov < OVERLAP_THRESHOLD {
                    return Err(SvphError::BranchMatchingFailed {
                        nu: grid[i as usize],
                        overlap: ov,
                    });
                }
                min_overlap = min_overlap.min(ov);
                taken[j] = true;
                branches[b][i as usize] = s.eigenvalues[j];
                next.push((s.eigenvalues[j], s.right_vectors[j].clone()));
            }
            prev = next;
            i += dir;
        }
    }

    let at = |b: usize, v: f64| find(&grid, v).map(|i| branches[b][i]);
    let mut mu_tau = Vec::with_capacity(ell);
    let mut sigma2 = Vec::with_capacity(ell);
    let mut richardson_diff = Vec::with_capacity(ell);
    for b in 0..ell {
        let stencil = |step: f64| -> Option<[C64; 5]> {
            Some([
                at(b, -2.0 * step)?,
                at(b, -step)?,
                at(b, 0.0)?,
                at(b, step)?,
                at(b, 2.0 * step)?,
            ])
        };
        let l = stencil(h).expect("h chosen so that the stencil exists");
        let (d1, d2) = five_point(l, h);
        let (mu, s2) = log_derivatives(l[2], d1, d2);
        mu_tau.push(mu);
        sigma2.push(s2);
        richardson_diff.push(stencil(0.5 * h).map(|l| {
            let (d1, d2) = five_point(l, 0.5 * h);
            (log_derivatives(l[2], d1, d2).1 - s2).abs()
        }));
    }
    let mut conjugate_error: f64 = 0.0;
    for b in 0..ell {
        for (i, &v) in grid.iter().enumerate() {
            if v > 0.0 {
                let j = find(&grid, -v).expect("symmetric grid");
                conjugate_error = conjugate_error.max((branches[b][j] - branches[b][i].conj()).norm());
            }
        }
    }

    Ok(TwistedCurve {
        nu_grid: grid,
        branches,
        matched: true,
        min_overlap,
        mu_tau,
        sigma2,
        step: h,
        richardson_diff,
        conjugate_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitDiskRow {
    pub nu: f64,
    pub max_modulus: f64,
    pub flagged: bool,
}

/// Largest `|λ|` of `L_ν` for each `ν ≠ 0`.
pub fn unit_disk_diagnostic(
    spec: &MapSpec,
    obs: &Observable,
    nu_list: &[f64],
    k: usize,
    q: usize,
) -> Result<Vec<UnitDiskRow>> {
    if nu_list.iter().any(|v| *v == 0.0) {
        return Err(SvphError::Precondition("nu_list must exclude 0".into()));
    }
    nu_list
        .par_iter()
        .map(|&nu| {
            let m = assemble(spec, obs, nu, k, q)?;
            let s = spectrum(&m, 4.min(m.dim()))?;
            let max_modulus = s.max_modulus();
            Ok(UnitDiskRow {
                nu,
                max_modulus,
                flagged: max_modulus >= 1.0 - UNIT_DISK_FLAG,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixing() -> MapSpec {
        MapSpec::skew_linear(2, FourierTable::cos(0.1, 1, 0)).unwrap()
    }

    fn cos_obs() -> Observable {
        Observable::new(FourierTable::cos(1.0, 1, 0))
    }

    #[test]
    fn product_map_mode_mapping() {
        let spec = MapSpec::skew_linear(2, FourierTable::zero()).unwrap();
        let m = assemble(&spec, &cos_obs(), 0.0, 4, 32).unwrap();
        let b = m.basis;
        for r in 0..b.dim() {
            for c in 0..b.dim() {
                let (m1, m2) = b.mode(r);
                let (k1, k2) = b.mode(c);
                let expect = if k2 == m2 && k1 == 2 * m1 { 1.0 } else { 0.0 };
                assert!((m.get(r, c) - expect).norm() < 1e-12, "{:?} {:?}", (m1, m2), (k1, k2));
            }
        }
    }

    #[test]
    fn mass_row_and_constant_invariance() {
        let spec = mixing();
        let m = assemble(&spec, &cos_obs(), 0.0, 6, 64).unwrap();
        let z = m.basis.zero_index();
        for c in 0..m.dim() {
            let expect = if c == z { 1.0 } else { 0.0 };
            assert!((m.get(z, c) - expect).norm() < 1e-8);
        }
        let mut e = vec![C64::default(); m.dim()];
        e[z] = C64::new(1.0, 0.0);
        let out = m.apply(&e);
        for (i, v) in out.iter().enumerate() {
            let expect = if i == z { 1.0 } else { 0.0 };
            assert!((v - expect).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_twist_ignores_observable() {
        let spec = mixing();
        let a = assemble(&spec, &cos_obs(), 0.0, 3, 16).unwrap();
        let b = assemble(&spec, &Observable::new(FourierTable::zero()), 0.0, 3, 16).unwrap();
        assert_eq!(a.entries(), b.entries());
    }

    #[test]
    fn precondition_on_quadrature() {
        let spec = mixing();
        assert!(assemble(&spec, &cos_obs(), 0.0, 8, 32).is_err());
        assert!(assemble(&spec, &cos_obs(), 0.0, 8, 48).is_err());
        assert!(assemble(&spec, &cos_obs(), 0.0, 8, 64).is_ok());
    }

    #[test]
    fn pointwise_oracle_agrees() {
        let spec = mixing();
        let obs = cos_obs();
        let basis = ModeBasis::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // band-limited u supported on |m1| ≤ 2 so that L u stays in the box
        let u: Vec<C64> = basis
            .modes()
            .map(|(m1, m2)| {
                if m1.abs() <= 2 && m2.abs() <= 2 {
                    C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
                } else {
                    C64::default()
                }
            })
            .collect();
        for nu in [0.0, 0.7] {
            let m = assemble(&spec, &obs, nu, 4, 64).unwrap();
            let mu = m.apply(&u);
            // the truncated image misses modes outside the box; compare
            // against a large box instead
            let big = assemble(&spec, &obs, nu, 12, 64).unwrap();
            let mut ub = vec![C64::default(); big.dim()];
            for (i, (m1, m2)) in basis.modes().enumerate() {
                ub[big.basis.index(m1, m2).unwrap()] = u[i];
            }
            let mub = big.apply(&ub);
            for _ in 0..10 {
                let p = TorusPoint::new(rng.random(), rng.random());
                let direct = pointwise_apply(&spec, &obs, nu, &basis, &u, p).unwrap();
                let synth = big.basis.synthesize(&mub, p.x(), p.theta());
                assert!((direct - synth).norm() < 1e-8, "nu={nu}: {direct} vs {synth}");
            }
            assert_eq!(mu.len(), m.dim());
        }
    }

    #[test]
    fn aliasing_self_check() {
        let spec = mixing();
        let m = assemble_checked(&spec, &cos_obs(), 0.7, 4, 32).unwrap();
        assert!(m.aliasing_change.unwrap() < 1e-10);
    }

    #[test]
    fn product_map_unit_multiplicity() {
        let spec = MapSpec::skew_linear(2, FourierTable::zero()).unwrap();
        let m = assemble(&spec, &cos_obs(), 0.0, 8, 64).unwrap();
        let s = spectrum(&m, 20).unwrap();
        assert_eq!(s.unit_count, 17);
        assert!(s.eigenvalues[..17].iter().all(|l| (l - 1.0).norm() < 1e-10));
    }

    #[test]
    fn mixing_spectrum_is_simple() {
        let spec = mixing();
        let m = assemble(&spec, &cos_obs(), 0.0, 8, 64).unwrap();
        let s = spectrum(&m, 6).unwrap();
        assert!((s.eigenvalues[0] - 1.0).norm() < 1e-8);
        assert_eq!(s.unit_count, 1);
        assert!(s.max_modulus() <= 1.0 + 1e-6);
        let v = &s.right_vectors[0];
        assert!((v[s.basis.zero_index()].norm() - 1.0).abs() < 1e-6);
        assert!(s.biorthogonal);
        let gap = s.gap.unwrap();
        assert!(gap > 0.5 && gap < 1.0);
    }

    #[test]
    fn subspace_matches_dense() {
        let spec = mixing();
        let m = assemble(&spec, &cos_obs(), 0.3, 5, 32).unwrap();
        let dense = spectrum(&m, 3).unwrap();
        let a = m.to_faer();
        let f = |x: &Mat<C64>| &a * x;
        let (vals, _) = subspace_eig(&f, m.dim(), 3, 1e-11, 1).unwrap();
        for (x, y) in vals.iter().zip(&dense.eigenvalues) {
            assert!((x - y).norm() < 1e-8);
        }
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        let f = |x: f64| C64::new(1.0 + 2.0 * x - 3.0 * x * x + 0.5 * x.powi(3) + x.powi(4), 0.0);
        let h = 0.1;
        let (d1, d2) = five_point([f(-2.0 * h), f(-h), f(0.0), f(h), f(2.0 * h)], h);
        assert!((d1.re - 2.0).abs() < 1e-12);
        assert!((d2.re + 6.0).abs() < 1e-10);
    }

    #[test]
    fn constant_observable_stays_on_circle() {
        let spec = mixing();
        let obs = Observable::new(FourierTable::constant(0.3));
        let rows = unit_disk_diagnostic(&spec, &obs, &[0.5, 2.0], 4, 32).unwrap();
        for r in rows {
            assert!((r.max_modulus - 1.0).abs() < 1e-10);
            assert!(r.flagged);
        }
    }

    #[test]
    fn digest_is_stable() {
        let a = digest(&mixing());
        assert_eq!(a, digest(&mixing()));
        assert_eq!(a.len(), 64);
    }
}
