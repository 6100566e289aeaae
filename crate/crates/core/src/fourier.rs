//! Finite two-dimensional Fourier series on the torus.
//!
//! A [`FourierTable`] is a sparse list of integer modes `(k1, k2)` with
//! complex coefficients representing the real function
//! `g(x, θ) = Σ c_k exp(2πi (k1 x + k2 θ))`. A [`ModeBasis`] is the dense
//! square truncation `max(|m1|, |m2|) ≤ K` used for operator matrices.

use std::f64::consts::TAU;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvphError};

pub type C64 = Complex64;

/// Relative tolerance for the Hermitian-symmetry check on load.
pub const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub k1: i32,
    pub k2: i32,
    pub c: C64,
}

/// Value and first partial derivatives of a real Fourier series.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Eval {
    pub value: f64,
    pub dx: f64,
    pub dtheta: f64,
}

/// Sparse Fourier coefficient table of a real-valued function.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 4]>", into = "Vec<[f64; 4]>")]
pub struct FourierTable {
    terms: Vec<Term>,
    // Terms with (k1, k2) > (0, 0) lexicographically, weighted by 2, plus the mean.
    half: Vec<Term>,
    mean: f64,
}

impl FourierTable {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Builds a table, merging duplicate modes and dropping exact zeros.
    pub fn new(terms: impl IntoIterator<Item = Term>) -> Result<Self> {
        let mut terms: Vec<Term> = terms.into_iter().collect();
        terms.sort_by_key(|t| (t.k1, t.k2));
        let mut merged: Vec<Term> = Vec::with_capacity(terms.len());
        for t in terms {
            match merged.last_mut() {
                Some(last) if last.k1 == t.k1 && last.k2 == t.k2 => last.c += t.c,
                _ => merged.push(t),
            }
        }
        merged.retain(|t| t.c != C64::new(0.0, 0.0));
        let scale = merged.iter().map(|t| t.c.norm()).fold(0.0, f64::max);
        for t in &merged {
            let partner = merged
                .binary_search_by_key(&(-t.k1, -t.k2), |u| (u.k1, u.k2))
                .ok()
                .map(|i| merged[i].c)
                .unwrap_or_default();
            if (partner - t.c.conj()).norm() > HERMITIAN_TOL * scale.max(1.0) {
                return Err(SvphError::InvalidSpec(format!(
                    "coefficient table is not Hermitian at mode ({}, {})",
                    t.k1, t.k2
                )));
            }
        }
        let mean = merged
            .iter()
            .find(|t| t.k1 == 0 && t.k2 == 0)
            .map(|t| t.c.re)
            .unwrap_or(0.0);
        let half = merged
            .iter()
            .filter(|t| (t.k1, t.k2) > (0, 0))
            .map(|t| Term { c: 2.0 * t.c, ..*t })
            .collect();
        Ok(Self {
            terms: merged,
            half,
            mean,
        })
    }

    /// `amp · cos(2π (k1 x + k2 θ))`.
    pub fn cos(amp: f64, k1: i32, k2: i32) -> Self {
        Self::trig(amp, 0.0, k1, k2)
    }

    /// `amp · sin(2π (k1 x + k2 θ))`.
    pub fn sin(amp: f64, k1: i32, k2: i32) -> Self {
        Self::trig(0.0, amp, k1, k2)
    }

    /// `a cos(2π k·y) + b sin(2π k·y)`.
    pub fn trig(a: f64, b: f64, k1: i32, k2: i32) -> Self {
        if k1 == 0 && k2 == 0 {
            return Self::constant(a);
        }
        let c = C64::new(a / 2.0, -b / 2.0);
        Self::new([
            Term { k1, k2, c },
            Term {
                k1: -k1,
                k2: -k2,
                c: c.conj(),
            },
        ])
        .expect("trig terms are Hermitian by construction")
    }

    pub fn constant(value: f64) -> Self {
        Self::new([Term {
            k1: 0,
            k2: 0,
            c: C64::new(value, 0.0),
        }])
        .expect("a real constant is Hermitian")
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn coefficient(&self, k1: i32, k2: i32) -> C64 {
        self.terms
            .binary_search_by_key(&(k1, k2), |t| (t.k1, t.k2))
            .map(|i| self.terms[i].c)
            .unwrap_or_default()
    }

    /// Largest `|k1|` and `|k2|` present.
    pub fn band(&self) -> (i32, i32) {
        self.terms.iter().fold((0, 0), |(b1, b2), t| {
            (b1.max(t.k1.abs()), b2.max(t.k2.abs()))
        })
    }

    /// True when no term depends on θ.
    pub fn independent_of_theta(&self) -> bool {
        self.terms.iter().all(|t| t.k2 == 0)
    }

    /// `Σ |c_k|`, an upper bound for the sup norm.
    pub fn l1_norm(&self) -> f64 {
        self.terms.iter().map(|t| t.c.norm()).sum()
    }

    /// `Σ 2π|k1| |c_k|`, an upper bound for `‖∂_x g‖_∞`.
    pub fn dx_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| TAU * f64::from(t.k1.abs()) * t.c.norm())
            .sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.terms.iter().map(|t| Term { c: t.c * s, ..*t }))
            .expect("scaling keeps Hermitian symmetry")
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(self.terms.iter().chain(other.terms.iter()).copied())
            .expect("sum of Hermitian tables is Hermitian")
    }

    /// Pointwise product of two tables (exact, no truncation).
    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                out.push(Term {
                    k1: a.k1 + b.k1,
                    k2: a.k2 + b.k2,
                    c: a.c * b.c,
                });
            }
        }
        let table = Self::new(out).expect("product of Hermitian tables is Hermitian");
        table.pruned(1e-300)
    }

    /// Drops terms with `|c| ≤ tol`.
    pub fn pruned(&self, tol: f64) -> Self {
        Self::new(self.terms.iter().filter(|t| t.c.norm() > tol).copied())
            .expect("pruning symmetric pairs keeps symmetry")
    }

    #[inline]
    pub fn value(&self, x: f64, theta: f64) -> f64 {
        let mut acc = self.mean;
        for t in &self.half {
            let phase = TAU * (f64::from(t.k1) * x + f64::from(t.k2) * theta);
            let (s, c) = phase.sin_cos();
            acc += t.c.re * c - t.c.im * s;
        }
        acc
    }

    /// Value together with the exact partial derivatives.
    #[inline]
    pub fn eval(&self, x: f64, theta: f64) -> Eval {
        let mut out = Eval {
            value: self.mean,
            ..Eval::default()
        };
        for t in &self.half {
            let phase = TAU * (f64::from(t.k1) * x + f64::from(t.k2) * theta);
            let (s, c) = phase.sin_cos();
            let re = t.c.re * c - t.c.im * s;
            // d/dφ Re(c e^{iφ}) = -Im(c e^{iφ})
            let im = t.c.re * s + t.c.im * c;
            out.value += re;
            out.dx -= TAU * f64::from(t.k1) * im;
            out.dtheta -= TAU * f64::from(t.k2) * im;
        }
        out
    }

    /// Dense coefficient vector in `basis` (modes outside the box are dropped).
    pub fn to_vector(&self, basis: &ModeBasis) -> Vec<C64> {
        let mut v = vec![C64::default(); basis.dim()];
        for t in &self.terms {
            if let Some(i) = basis.index(t.k1, t.k2) {
                v[i] += t.c;
            }
        }
        v
    }

    /// Table from a dense vector, keeping the real part of the synthesized
    /// function (symmetrizes the coefficients).
    pub fn from_vector(v: &[C64], basis: &ModeBasis, tol: f64) -> Self {
        let mut terms = Vec::new();
        for (i, (m1, m2)) in basis.modes().enumerate() {
            let j = basis.index(-m1, -m2).expect("box basis is symmetric");
            let c = 0.5 * (v[i] + v[j].conj());
            if c.norm() > tol {
                terms.push(Term { k1: m1, k2: m2, c });
            }
        }
        Self::new(terms).expect("symmetrized coefficients are Hermitian")
    }
}

impl TryFrom<Vec<[f64; 4]>> for FourierTable {
    type Error = SvphError;

    fn try_from(rows: Vec<[f64; 4]>) -> Result<Self> {
        let mut terms = Vec::with_capacity(rows.len());
        for [k1, k2, re, im] in rows {
            if k1.fract() != 0.0 || k2.fract() != 0.0 || k1.abs() > 1e6 || k2.abs() > 1e6 {
                return Err(SvphError::InvalidSpec(format!(
                    "mode indices must be integers, got ({k1}, {k2})"
                )));
            }
            if !re.is_finite() || !im.is_finite() {
                return Err(SvphError::InvalidSpec("non-finite coefficient".into()));
            }
            terms.push(Term {
                k1: k1 as i32,
                k2: k2 as i32,
                c: C64::new(re, im),
            });
        }
        Self::new(terms)
    }
}

impl From<FourierTable> for Vec<[f64; 4]> {
    fn from(t: FourierTable) -> Self {
        t.terms
            .iter()
            .map(|t| [f64::from(t.k1), f64::from(t.k2), t.c.re + 0.0, t.c.im + 0.0])
            .collect()
    }
}

/// Square mode box `max(|m1|, |m2|) ≤ K`, indexed row-major in `m1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeBasis {
    pub cutoff: usize,
}

impl ModeBasis {
    pub fn new(cutoff: usize) -> Self {
        Self { cutoff }
    }

    pub fn side(&self) -> usize {
        2 * self.cutoff + 1
    }

    pub fn dim(&self) -> usize {
        self.side() * self.side()
    }

    #[inline]
    pub fn index(&self, m1: i32, m2: i32) -> Option<usize> {
        let k = self.cutoff as i32;
        if m1.abs() > k || m2.abs() > k {
            return None;
        }
        Some(((m1 + k) as usize) * self.side() + (m2 + k) as usize)
    }

    #[inline]
    pub fn mode(&self, i: usize) -> (i32, i32) {
        let k = self.cutoff as i32;
        ((i / self.side()) as i32 - k, (i % self.side()) as i32 - k)
    }

    pub fn modes(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        (0..self.dim()).map(|i| self.mode(i))
    }

    pub fn zero_index(&self) -> usize {
        self.index(0, 0).expect("origin is always in the box")
    }

    /// Index permutation `m ↦ -m`.
    pub fn reversal(&self) -> Vec<usize> {
        (0..self.dim())
            .map(|i| {
                let (a, b) = self.mode(i);
                self.index(-a, -b).expect("box basis is symmetric")
            })
            .collect()
    }

    /// Evaluates `Σ v_m e^{2πi m·p}` at a point.
    pub fn synthesize(&self, v: &[C64], x: f64, theta: f64) -> C64 {
        let k = self.cutoff as i32;
        let ex: Vec<C64> = (-k..=k).map(|m| C64::from_polar(1.0, TAU * f64::from(m) * x)).collect();
        let et: Vec<C64> = (-k..=k)
            .map(|m| C64::from_polar(1.0, TAU * f64::from(m) * theta))
            .collect();
        let side = self.side();
        let mut acc = C64::default();
        for (a, exa) in ex.iter().enumerate() {
            let row = &v[a * side..(a + 1) * side];
            let inner: C64 = row.iter().zip(&et).map(|(c, e)| c * e).sum();
            acc += exa * inner;
        }
        acc
    }

    /// `𝔪(f g) = Σ_m f_{-m} g_m` for coefficient vectors of two functions.
    pub fn pairing(&self, f: &[C64], g: &[C64]) -> C64 {
        let rev = self.reversal();
        (0..self.dim()).map(|i| f[rev[i]] * g[i]).sum()
    }

    /// Truncated product of two functions given by coefficient vectors.
    pub fn multiply(&self, f: &[C64], g: &[C64]) -> Vec<C64> {
        let k = self.cutoff as i32;
        let mut out = vec![C64::default(); self.dim()];
        let nz: Vec<(i32, i32, C64)> = f
            .iter()
            .enumerate()
            .filter(|(_, c)| c.norm() > 0.0)
            .map(|(i, c)| {
                let (a, b) = self.mode(i);
                (a, b, *c)
            })
            .collect();
        for (j, gc) in g.iter().enumerate() {
            if gc.norm() == 0.0 {
                continue;
            }
            let (c1, c2) = self.mode(j);
            for &(a, b, fc) in &nz {
                let (m1, m2) = (a + c1, b + c2);
                if m1.abs() <= k && m2.abs() <= k {
                    out[self.index(m1, m2).unwrap()] += fc * gc;
                }
            }
        }
        out
    }

    /// Values of the real part of the synthesized function on a `g × g`
    /// lattice of points `(i/g, j/g)`, row-major in `x`.
    pub fn grid_values(&self, v: &[C64], g: usize) -> Vec<f64> {
        let mut grid = Grid2::zeros(g.max(self.side()));
        let n = grid.q;
        let k = self.cutoff as i32;
        for (i, c) in v.iter().enumerate() {
            let (m1, m2) = self.mode(i);
            let r = m1.rem_euclid(n as i32) as usize;
            let s = m2.rem_euclid(n as i32) as usize;
            grid.data[r * n + s] += *c;
        }
        let _ = k;
        grid.inverse();
        if n == g {
            grid.data.iter().map(|c| c.re).collect()
        } else {
            // The padded grid is finer than requested; evaluate directly.
            let mut out = Vec::with_capacity(g * g);
            for i in 0..g {
                for j in 0..g {
                    out.push(self.synthesize(v, i as f64 / g as f64, j as f64 / g as f64).re);
                }
            }
            out
        }
    }
}

/// Square complex grid with 2D FFTs normalized so that the forward
/// transform returns Fourier coefficients.
#[derive(Clone)]
pub struct Grid2 {
    pub q: usize,
    pub data: Vec<C64>,
}

impl Grid2 {
    pub fn zeros(q: usize) -> Self {
        Self {
            q,
            data: vec![C64::default(); q * q],
        }
    }

    pub fn from_fn(q: usize, mut f: impl FnMut(f64, f64) -> C64) -> Self {
        let mut data = Vec::with_capacity(q * q);
        for i in 0..q {
            for j in 0..q {
                data.push(f(i as f64 / q as f64, j as f64 / q as f64));
            }
        }
        Self { q, data }
    }

    /// Replaces samples by coefficients: `out[p] = Q⁻² Σ_y g(y) e^{-2πi p·y}`.
    pub fn forward(&mut self) {
        let plan = FftPlan::new(self.q);
        plan.forward(&mut self.data);
    }

    /// Replaces coefficients by samples.
    pub fn inverse(&mut self) {
        let plan = FftPlan::new(self.q);
        plan.inverse(&mut self.data);
    }

    /// Coefficient of mode `(p1, p2)` after [`forward`](Self::forward).
    #[inline]
    pub fn coefficient(&self, p1: i32, p2: i32) -> C64 {
        let q = self.q as i32;
        self.data[(p1.rem_euclid(q) * q + p2.rem_euclid(q)) as usize]
    }
}

/// Cached forward/inverse FFT plans for a `q × q` grid.
#[derive(Clone)]
pub struct FftPlan {
    q: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl FftPlan {
    pub fn new(q: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            q,
            fwd: planner.plan_fft_forward(q),
            inv: planner.plan_fft_inverse(q),
        }
    }

    pub fn forward(&self, data: &mut [C64]) {
        self.transform(data, &self.fwd);
        let s = 1.0 / (self.q * self.q) as f64;
        data.iter_mut().for_each(|c| *c *= s);
    }

    pub fn inverse(&self, data: &mut [C64]) {
        self.transform(data, &self.inv);
    }

    fn transform(&self, data: &mut [C64], fft: &Arc<dyn Fft<f64>>) {
        let q = self.q;
        debug_assert_eq!(data.len(), q * q);
        // rows: transform along θ for each x
        fft.process(data);
        // columns: transpose, transform, transpose back
        let mut t = vec![C64::default(); q * q];
        transpose(data, &mut t, q);
        fft.process(&mut t);
        transpose(&t, data, q);
    }
}

fn transpose(src: &[C64], dst: &mut [C64], q: usize) {
    for i in 0..q {
        for j in 0..q {
            dst[j * q + i] = src[i * q + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trig_constructors_evaluate() {
        let c = FourierTable::cos(0.3, 1, 0);
        assert!((c.value(0.0, 0.7) - 0.3).abs() < 1e-15);
        let s = FourierTable::sin(0.05, 1, 0);
        assert!((s.value(0.25, 0.0) - 0.05).abs() < 1e-15);
        let e = s.eval(0.0, 0.0);
        assert!((e.dx - 0.05 * TAU).abs() < 1e-14);
        assert_eq!(e.dtheta, 0.0);
    }

    #[test]
    fn rejects_non_hermitian() {
        let rows = vec![[1.0, 0.0, 0.5, 0.0]];
        assert!(FourierTable::try_from(rows).is_err());
        let rows = vec![[1.0, 0.0, 0.5, 0.1], [-1.0, 0.0, 0.5, -0.1]];
        assert!(FourierTable::try_from(rows).is_ok());
    }

    #[test]
    fn rejects_fractional_modes() {
        assert!(FourierTable::try_from(vec![[0.5, 0.0, 1.0, 0.0]]).is_err());
    }

    #[test]
    fn json_shape() {
        let t = FourierTable::cos(1.0, 1, 0);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, "[[-1.0,0.0,0.5,0.0],[1.0,0.0,0.5,0.0]]");
        let back: FourierTable = serde_json::from_str("[[1,0,0.5,0],[-1,0,0.5,0]]").unwrap();
        assert_eq!(back, FourierTable::cos(1.0, 1, 0));
    }

    #[test]
    fn product_of_cosines() {
        let c = FourierTable::cos(1.0, 1, 0);
        let p = c.mul(&c);
        assert!((p.mean() - 0.5).abs() < 1e-15);
        assert!((p.value(0.1, 0.0) - (TAU * 0.1).cos().powi(2)).abs() < 1e-14);
    }

    #[test]
    fn basis_indexing_roundtrip() {
        let b = ModeBasis::new(3);
        for i in 0..b.dim() {
            let (m1, m2) = b.mode(i);
            assert_eq!(b.index(m1, m2), Some(i));
        }
        assert_eq!(b.index(4, 0), None);
        assert_eq!(b.mode(b.zero_index()), (0, 0));
    }

    #[test]
    fn synthesis_matches_dense_grid() {
        let t = FourierTable::new([
            Term { k1: 2, k2: -1, c: C64::new(0.3, -0.2) },
            Term { k1: -2, k2: 1, c: C64::new(0.3, 0.2) },
            Term { k1: 0, k2: 3, c: C64::new(-0.1, 0.05) },
            Term { k1: 0, k2: -3, c: C64::new(-0.1, -0.05) },
            Term { k1: 0, k2: 0, c: C64::new(0.7, 0.0) },
        ])
        .unwrap();
        let b = ModeBasis::new(4);
        let v = t.to_vector(&b);
        let g = 16;
        let vals = b.grid_values(&v, g);
        for i in 0..g {
            for j in 0..g {
                let (x, th) = (i as f64 / g as f64, j as f64 / g as f64);
                assert!((vals[i * g + j] - t.value(x, th)).abs() < 1e-12);
                assert!((b.synthesize(&v, x, th).re - t.value(x, th)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_transform_recovers_coefficients() {
        let t = FourierTable::trig(0.4, -0.3, 3, 2);
        let mut g = Grid2::from_fn(16, |x, th| C64::new(t.value(x, th), 0.0));
        g.forward();
        assert!((g.coefficient(3, 2) - t.coefficient(3, 2)).norm() < 1e-14);
        assert!((g.coefficient(-3, -2) - t.coefficient(-3, -2)).norm() < 1e-14);
        assert!(g.coefficient(1, 1).norm() < 1e-15);
    }

    #[test]
    fn pairing_is_lebesgue_integral_of_product() {
        let b = ModeBasis::new(3);
        let f = FourierTable::cos(1.0, 1, 0).add(&FourierTable::constant(0.5));
        let g = FourierTable::cos(2.0, 1, 0);
        let p = b.pairing(&f.to_vector(&b), &g.to_vector(&b));
        assert!((p.re - 1.0).abs() < 1e-15 && p.im.abs() < 1e-15);
        let prod = b.multiply(&f.to_vector(&b), &g.to_vector(&b));
        assert!((prod[b.zero_index()].re - 1.0).abs() < 1e-15);
    }
}
