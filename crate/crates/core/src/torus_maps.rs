//! Skew-form endomorphisms `F(x, θ) = (f(x, θ), θ + ω(x, θ))` of the
//! 2-torus with `f = ℓx + f̃`, `f̃` and `ω` finite Fourier series.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SvphError};
use crate::fourier::{FourierTable, Grid2, C64};
use crate::observable::Observable;

/// Default seed-grid multiplier for the Newton preimage search.
pub const SEEDS_PER_DEGREE: usize = 8;
/// Roots closer than this (toroidal sup distance) are the same preimage.
pub const PREIMAGE_DEDUP: f64 = 1e-8;
/// Required forward residual of every returned preimage.
pub const PREIMAGE_RESIDUAL: f64 = 1e-10;
const DEGREE_QUADRATURE_TOL: f64 = 1e-8;
const DET_SAMPLE_GRID: usize = 64;

#[inline]
fn reduce(v: f64) -> f64 {
    let r = v.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed representative of `d` in `[-1/2, 1/2)`.
#[inline]
pub fn wrap(d: f64) -> f64 {
    d - (d + 0.5).floor()
}

/// A point of 𝕋², always stored with coordinates in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    x: f64,
    theta: f64,
}

impl TorusPoint {
    pub fn new(x: f64, theta: f64) -> Self {
        Self {
            x: reduce(x),
            theta: reduce(theta),
        }
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.x
    }

    #[inline]
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Toroidal sup distance `max_i min(|d_i|, 1 - |d_i|)`.
    pub fn distance(&self, other: &TorusPoint) -> f64 {
        wrap(self.x - other.x).abs().max(wrap(self.theta - other.theta).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// `f(x, θ) = ℓx`, integer `ℓ ≥ 2`.
    SkewLinear,
    /// `f = ℓx + f̃(x, θ)`.
    SkewGeneral,
    /// `f = ℓx + f̃(x, θ)` and the fibre displacement is `ε ω`.
    FastSlow,
}

/// Differential of `F` at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobian2 {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub det: f64,
}

impl Jacobian2 {
    pub fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Self {
            a11,
            a12,
            a21,
            a22,
            det: a11 * a22 - a12 * a21,
        }
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 1.0)
    }

    #[inline]
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.a11 * v[0] + self.a12 * v[1],
            self.a21 * v[0] + self.a22 * v[1],
        ]
    }

    /// `self · rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &Jacobian2) -> Jacobian2 {
        Jacobian2::new(
            self.a11 * rhs.a11 + self.a12 * rhs.a21,
            self.a11 * rhs.a12 + self.a12 * rhs.a22,
            self.a21 * rhs.a11 + self.a22 * rhs.a21,
            self.a21 * rhs.a12 + self.a22 * rhs.a22,
        )
    }

    pub fn inverse(&self) -> Jacobian2 {
        let d = self.det;
        Jacobian2::new(self.a22 / d, -self.a12 / d, -self.a21 / d, self.a11 / d)
    }

    pub fn scaled(&self, s: f64) -> Jacobian2 {
        Jacobian2::new(self.a11 * s, self.a12 * s, self.a21 * s, self.a22 * s)
    }

    pub fn max_abs(&self) -> f64 {
        self.a11
            .abs()
            .max(self.a12.abs())
            .max(self.a21.abs())
            .max(self.a22.abs())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MapSpecDoc {
    kind: MapKind,
    ell: u32,
    #[serde(default)]
    f_coeffs: FourierTable,
    #[serde(default)]
    omega_coeffs: FourierTable,
    #[serde(default)]
    epsilon: f64,
}

/// A validated map of the family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapSpecDoc", into = "MapSpecDoc")]
pub struct MapSpec {
    kind: MapKind,
    ell: u32,
    f_coeffs: FourierTable,
    omega_coeffs: FourierTable,
    epsilon: f64,
    degree: usize,
}

impl TryFrom<MapSpecDoc> for MapSpec {
    type Error = SvphError;

    fn try_from(d: MapSpecDoc) -> Result<Self> {
        MapSpec::new(d.kind, d.ell, d.f_coeffs, d.omega_coeffs, d.epsilon)
    }
}

impl From<MapSpec> for MapSpecDoc {
    fn from(m: MapSpec) -> Self {
        MapSpecDoc {
            kind: m.kind,
            ell: m.ell,
            f_coeffs: m.f_coeffs,
            omega_coeffs: m.omega_coeffs,
            epsilon: m.epsilon,
        }
    }
}

impl MapSpec {
    pub fn new(
        kind: MapKind,
        ell: u32,
        f_coeffs: FourierTable,
        omega_coeffs: FourierTable,
        epsilon: f64,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        match kind {
            MapKind::SkewLinear => {
                if ell < 2 {
                    problems.push(format!("skew_linear requires ell >= 2, got {ell}"));
                }
                if !f_coeffs.is_empty() {
                    problems.push("skew_linear takes no f_coeffs".to_string());
                }
            }
            MapKind::SkewGeneral | MapKind::FastSlow => {
                if ell < 1 {
                    problems.push("ell must be at least 1".to_string());
                }
            }
        }
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            problems.push(format!("epsilon must be finite and >= 0, got {epsilon}"));
        }
        if !problems.is_empty() {
            return Err(SvphError::Validation(problems));
        }
        let mut spec = Self {
            kind,
            ell,
            f_coeffs,
            omega_coeffs,
            epsilon,
            degree: ell as usize,
        };
        spec.degree = spec.verify_degree()?;
        spec.verify_positive_determinant(DET_SAMPLE_GRID)?;
        Ok(spec)
    }

    /// `F(x, θ) = (ℓx, θ + ω(x, θ))`.
    pub fn skew_linear(ell: u32, omega: FourierTable) -> Result<Self> {
        Self::new(MapKind::SkewLinear, ell, FourierTable::zero(), omega, 0.0)
    }

    pub fn skew_general(ell: u32, f_tilde: FourierTable, omega: FourierTable) -> Result<Self> {
        Self::new(MapKind::SkewGeneral, ell, f_tilde, omega, 0.0)
    }

    pub fn fast_slow(
        ell: u32,
        f_tilde: FourierTable,
        omega: FourierTable,
        epsilon: f64,
    ) -> Result<Self> {
        Self::new(MapKind::FastSlow, ell, f_tilde, omega, epsilon)
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn ell(&self) -> u32 {
        self.ell
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn f_coeffs(&self) -> &FourierTable {
        &self.f_coeffs
    }

    pub fn omega_coeffs(&self) -> &FourierTable {
        &self.omega_coeffs
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Factor applied to `ω` at evaluation time.
    #[inline]
    pub fn omega_scale(&self) -> f64 {
        match self.kind {
            MapKind::FastSlow => self.epsilon,
            _ => 1.0,
        }
    }

    /// True when the base coordinate evolves as `x ↦ ℓx` exactly.
    pub fn has_linear_base(&self) -> bool {
        self.f_coeffs.is_empty()
    }

    /// True when `x' ` does not depend on `θ`.
    pub fn base_is_autonomous(&self) -> bool {
        self.f_coeffs.independent_of_theta()
    }

    /// True when `ω ≡ 0` (after scaling).
    pub fn is_product(&self) -> bool {
        self.omega_coeffs.is_empty() || self.omega_scale() == 0.0
    }

    /// Unreduced image `(f(x, θ), θ + ω(x, θ))`.
    #[inline]
    pub fn lift(&self, x: f64, theta: f64) -> (f64, f64) {
        let fx = f64::from(self.ell) * x + self.f_coeffs.value(x, theta);
        let th = theta + self.omega_scale() * self.omega_coeffs.value(x, theta);
        (fx, th)
    }

    #[inline]
    pub fn eval(&self, p: TorusPoint) -> TorusPoint {
        let (a, b) = self.lift(p.x, p.theta);
        TorusPoint::new(a, b)
    }

    /// Analytic differential without the sign check.
    #[inline]
    pub fn differential(&self, p: TorusPoint) -> Jacobian2 {
        let f = self.f_coeffs.eval(p.x, p.theta);
        let w = self.omega_coeffs.eval(p.x, p.theta);
        let s = self.omega_scale();
        Jacobian2::new(
            f64::from(self.ell) + f.dx,
            f.dtheta,
            s * w.dx,
            1.0 + s * w.dtheta,
        )
    }

    /// Analytic differential; fails when `det DF ≤ 0`.
    pub fn jacobian(&self, p: TorusPoint) -> Result<Jacobian2> {
        let j = self.differential(p);
        if j.det <= 0.0 {
            return Err(SvphError::NonPositiveDeterminant {
                x: p.x,
                theta: p.theta,
                det: j.det,
            });
        }
        Ok(j)
    }

    /// `D_p F^n` as the ordered product of one-step differentials.
    pub fn jacobian_n(&self, p: TorusPoint, n: usize) -> Jacobian2 {
        let mut acc = Jacobian2::identity();
        let mut q = p;
        for _ in 0..n {
            acc = self.differential(q).compose(&acc);
            q = self.eval(q);
        }
        acc
    }

    /// Lattice size on which trigonometric quadrature of `det DF` is exact.
    fn exact_quadrature_size(&self) -> usize {
        let (f1, f2) = self.f_coeffs.band();
        let (w1, w2) = self.omega_coeffs.band();
        let band = (f1 + w1).max(f2 + w2) as usize;
        (2 * band + 2).next_power_of_two().max(8)
    }

    /// `∫ det DF d𝔪` by exact lattice quadrature.
    pub fn det_integral(&self) -> f64 {
        let q = self.exact_quadrature_size();
        let mut acc = 0.0;
        for i in 0..q {
            for j in 0..q {
                let p = TorusPoint::new(i as f64 / q as f64, j as f64 / q as f64);
                acc += self.differential(p).det;
            }
        }
        acc / (q * q) as f64
    }

    fn verify_degree(&self) -> Result<usize> {
        let integral = self.det_integral();
        let rounded = integral.round();
        if (integral - rounded).abs() > DEGREE_QUADRATURE_TOL || rounded < 1.0 {
            return Err(SvphError::InvalidSpec(format!(
                "det DF integrates to {integral}, not a positive integer"
            )));
        }
        if rounded as u32 != self.ell {
            return Err(SvphError::InvalidSpec(format!(
                "degree {rounded} from quadrature disagrees with ell = {}",
                self.ell
            )));
        }
        Ok(rounded as usize)
    }

    fn verify_positive_determinant(&self, grid: usize) -> Result<()> {
        for i in 0..grid {
            for j in 0..grid {
                let p = TorusPoint::new(
                    (i as f64 + 0.5) / grid as f64,
                    (j as f64 + 0.5) / grid as f64,
                );
                self.jacobian(p)?;
            }
        }
        Ok(())
    }

    /// All `degree` points `y` with `F(y) = p`, sorted by `(x, θ)`.
    ///
    /// Linear bases use the closed-form branches `x_j = (x + j)/ℓ` and solve
    /// the monotone fibre equation; general maps run damped Newton from a
    /// seed lattice, retrying with denser seeds before giving up.
    pub fn preimages(&self, p: TorusPoint) -> Result<Vec<TorusPoint>> {
        if self.has_linear_base() {
            return Ok(self.preimages_linear_base(p));
        }
        let base = SEEDS_PER_DEGREE * self.degree;
        let mut last = None;
        for factor in [1, 2, 4] {
            match self.preimages_newton(p, base * factor) {
                Ok(v) => return Ok(v),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn preimages_linear_base(&self, p: TorusPoint) -> Vec<TorusPoint> {
        let ell = f64::from(self.ell);
        let s = self.omega_scale();
        let theta_free = self.omega_coeffs.independent_of_theta();
        let mut out: Vec<TorusPoint> = (0..self.ell)
            .map(|j| {
                let x = (p.x + f64::from(j)) / ell;
                let th = if theta_free {
                    p.theta - s * self.omega_coeffs.value(x, 0.0)
                } else {
                    self.solve_fibre(x, p.theta)
                };
                TorusPoint::new(x, th)
            })
            .collect();
        out.sort_by(|a, b| (a.x, a.theta).partial_cmp(&(b.x, b.theta)).unwrap());
        out
    }

    /// Solves `t + sω(x, t) ≡ θ (mod 1)`; the left side is increasing in `t`
    /// because `det DF = ℓ(1 + s∂_θω) > 0`.
    fn solve_fibre(&self, x: f64, theta: f64) -> f64 {
        let s = self.omega_scale();
        let h = |t: f64| {
            let e = self.omega_coeffs.eval(x, t);
            (t + s * e.value - theta, 1.0 + s * e.dtheta)
        };
        let w = s * self.omega_coeffs.l1_norm() + 1e-12;
        let (mut lo, mut hi) = (theta - w, theta + w);
        let mut t = theta - s * self.omega_coeffs.value(x, theta);
        for _ in 0..200 {
            let (v, dv) = h(t);
            if v.abs() < 1e-15 {
                break;
            }
            if v > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let newton = t - v / dv;
            t = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo < 1e-16 {
                break;
            }
        }
        t
    }

    fn preimages_newton(&self, p: TorusPoint, seeds: usize) -> Result<Vec<TorusPoint>> {
        let mut roots: Vec<TorusPoint> = Vec::with_capacity(self.degree);
        for i in 0..seeds {
            for j in 0..seeds {
                let z0 = (
                    (i as f64 + 0.5) / seeds as f64,
                    (j as f64 + 0.5) / seeds as f64,
                );
                if let Some(z) = self.newton_root(p, z0) {
                    if roots.iter().all(|r| r.distance(&z) >= PREIMAGE_DEDUP) {
                        roots.push(z);
                    }
                }
            }
            if roots.len() > self.degree {
                break;
            }
        }
        if roots.len() != self.degree {
            return Err(SvphError::RootCountMismatch {
                expected: self.degree,
                found: roots.len(),
                seeds,
            });
        }
        roots.sort_by(|a, b| (a.x, a.theta).partial_cmp(&(b.x, b.theta)).unwrap());
        Ok(roots)
    }

    fn residual(&self, p: TorusPoint, z: (f64, f64)) -> (f64, f64) {
        let (a, b) = self.lift(z.0, z.1);
        (wrap(a - p.x), wrap(b - p.theta))
    }

    fn newton_root(&self, p: TorusPoint, mut z: (f64, f64)) -> Option<TorusPoint> {
        let norm = |r: (f64, f64)| r.0.abs().max(r.1.abs());
        let mut r = self.residual(p, z);
        for _ in 0..60 {
            if norm(r) < 1e-14 {
                break;
            }
            let j = self.differential(TorusPoint::new(z.0, z.1));
            if j.det.abs() < 1e-300 {
                return None;
            }
            let inv = j.inverse();
            let d = inv.apply([r.0, r.1]);
            let mut step = 1.0;
            loop {
                let cand = (z.0 - step * d[0], z.1 - step * d[1]);
                let rc = self.residual(p, cand);
                if norm(rc) < norm(r) || step < 1e-6 {
                    z = cand;
                    r = rc;
                    break;
                }
                step *= 0.5;
            }
        }
        let y = TorusPoint::new(z.0, z.1);
        let res = self.eval(y).distance(&p);
        (res < PREIMAGE_RESIDUAL).then_some(y)
    }

    /// `[p, F(p), …, F^n(p)]`.
    pub fn orbit(&self, p: TorusPoint, n: usize) -> Vec<TorusPoint> {
        let mut out = Vec::with_capacity(n + 1);
        let mut q = p;
        out.push(q);
        for _ in 0..n {
            q = self.eval(q);
            out.push(q);
        }
        out
    }

    /// `τ_n(p) = Σ_{k<n} τ(F^k p)`.
    ///
    /// With per-basin offsets the offset of the basin containing `p` is
    /// used along the whole orbit; basins are invariant.
    pub fn birkhoff_sum(&self, obs: &Observable, p: TorusPoint, n: usize) -> f64 {
        let offset = obs.offset_at(p);
        let mut q = p;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += obs.raw_value(q);
            q = self.eval(q);
        }
        acc - n as f64 * offset
    }

    /// Samples `g(F(y))` style compositions on a `q × q` lattice; used by
    /// tests and the grid-synthesis consistency check.
    pub fn lattice<T>(&self, q: usize, mut f: impl FnMut(TorusPoint) -> T) -> Vec<T> {
        let mut out = Vec::with_capacity(q * q);
        for i in 0..q {
            for j in 0..q {
                out.push(f(TorusPoint::new(i as f64 / q as f64, j as f64 / q as f64)));
            }
        }
        out
    }

    /// Fourier coefficients of `Ψ∘F − Ψ` for a real table `Ψ`, computed on a
    /// `q × q` lattice and pruned at `tol`. Produces coboundary observables.
    pub fn coboundary(&self, psi: &FourierTable, q: usize, tol: f64) -> FourierTable {
        let mut g = Grid2::from_fn(q, |x, th| {
            let y = self.eval(TorusPoint::new(x, th));
            C64::new(psi.value(y.x, y.theta) - psi.value(x, th), 0.0)
        });
        g.forward();
        let half = (q / 2) as i32;
        let mut terms = Vec::new();
        for k1 in -half + 1..half {
            for k2 in -half + 1..half {
                let c = g.coefficient(k1, k2);
                if c.norm() > tol {
                    terms.push(crate::fourier::Term { k1, k2, c });
                }
            }
        }
        // Symmetrize against round-off before validation.
        let sym: Vec<_> = terms
            .iter()
            .map(|t| crate::fourier::Term {
                c: 0.5 * (t.c + g.coefficient(-t.k1, -t.k2).conj()),
                ..*t
            })
            .collect();
        FourierTable::new(sym).expect("symmetrized coefficients are Hermitian")
    }
}
