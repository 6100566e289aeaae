//! Sampled audit of the partial-hyperbolicity assumptions: positivity of
//! the determinant, cone invariance and growth rates, pinching, the
//! expansion-domination margin, and the transversality growth of
//! preimage branches.
//!
//! Everything here is an estimate on finite lattices and random samples.
//! Reports carry the raw per-n statistics so a reader can judge the fits.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvphError};
use crate::torus_maps::{Jacobian2, MapSpec, TorusPoint};

/// Smoothness used for the pinching exponent unless told otherwise.
pub const DEFAULT_SMOOTHNESS: u32 = 4;
/// Preimage-tree enumeration budget `degree^n · samples`.
pub const ENUMERATION_BUDGET: f64 = 1e7;
/// Number of candidate lines per sample for `Ñ_F`.
pub const DEFAULT_LINE_GRID: usize = 256;
/// `a6_ok` requires the last rate below `1 - A6_MARGIN`.
pub const A6_MARGIN: f64 = 1e-3;

/// `ζ_r = 6 (r+1)!`, computed exactly.
pub fn zeta(r: u32) -> u128 {
    6 * (1..=u128::from(r) + 1).product::<u128>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    pub chi_u: f64,
    pub chi_c: f64,
}

impl ConeParams {
    pub fn new(chi_u: f64, chi_c: f64) -> Result<Self> {
        let p = Self { chi_u, chi_c };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.chi_u > 0.0 && self.chi_u < 1.0) {
            problems.push(format!("chi_u must lie in (0,1), got {}", self.chi_u));
        }
        if !(self.chi_c > 0.0 && self.chi_c <= 1.0) {
            problems.push(format!("chi_c must lie in (0,1], got {}", self.chi_c));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SvphError::Validation(problems))
        }
    }
}

impl Default for ConeParams {
    fn default() -> Self {
        Self {
            chi_u: 0.8,
            chi_c: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterminantAudit {
    pub a1_ok: bool,
    pub min_det: f64,
    /// `min (∂_x f − max{2(1 + ‖∂_x ω‖_∞), |∂_θ f|})` over the lattice.
    pub a5_margin: f64,
    pub a5_ok: bool,
    pub grid: usize,
}

/// Checks `det DF > 0` and the domination margin of `∂_x f` on a
/// `grid × grid` lattice.
pub fn check_a1_a5(spec: &MapSpec, grid: usize) -> Result<DeterminantAudit> {
    if grid < 16 {
        return Err(SvphError::Precondition(format!("grid must be >= 16, got {grid}")));
    }
    let jacs = spec.lattice(grid, |p| spec.differential(p));
    let min_det = jacs.iter().map(|j| j.det).fold(f64::INFINITY, f64::min);
    let dx_omega_sup = jacs.iter().map(|j| j.a21.abs()).fold(0.0, f64::max);
    let floor = 2.0 * (1.0 + dx_omega_sup);
    let a5_margin = jacs
        .iter()
        .map(|j| j.a11 - floor.max(j.a12.abs()))
        .fold(f64::INFINITY, f64::min);
    Ok(DeterminantAudit {
        a1_ok: min_det > 0.0,
        min_det,
        a5_margin,
        a5_ok: a5_margin > 0.0,
        grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeReport {
    pub cones: ConeParams,
    pub grid: usize,
    pub n_max: usize,
    pub smoothness: u32,
    pub zeta_r: u128,
    pub a1_ok: bool,
    /// Worst slope contraction of both cones under one step.
    pub iota_star: f64,
    pub iota_unstable: f64,
    pub iota_central: f64,
    pub lambda_minus_n: Vec<f64>,
    pub lambda_plus_n: Vec<f64>,
    pub lambda_c_minus_n: Vec<f64>,
    pub lambda_c_plus_n: Vec<f64>,
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub lambda_upper: f64,
    pub lambda_c_plus: f64,
    pub lambda_c_minus: f64,
    #[serde(rename = "C_star")]
    pub c_star: f64,
    pub lambda_c: f64,
    /// `log λ − ζ_r log λ_c^+`.
    pub pinching_margin: f64,
    pub a5_margin: f64,
    pub a2_ok: bool,
    pub a3_structural: bool,
    pub a4_ok: bool,
    pub a5_ok: bool,
}

/// Extremes of `‖B v‖` over unit `v` with angle in `[c − h, c + h]`.
fn arc_extremes(b: &Jacobian2, center: f64, half: f64) -> (f64, f64) {
    // S = BᵀB
    let s11 = b.a11 * b.a11 + b.a21 * b.a21;
    let s12 = b.a11 * b.a12 + b.a21 * b.a22;
    let s22 = b.a12 * b.a12 + b.a22 * b.a22;
    let q = |phi: f64| {
        let (s, c) = phi.sin_cos();
        (s11 * c * c + 2.0 * s12 * c * s + s22 * s * s).max(0.0).sqrt()
    };
    let mut lo = q(center - half).min(q(center + half));
    let mut hi = q(center - half).max(q(center + half));
    // critical directions of the quadratic form: tan 2φ = 2 s12 / (s11 − s22)
    let phi0 = 0.5 * (2.0 * s12).atan2(s11 - s22);
    for phi in [phi0, phi0 + FRAC_PI_2] {
        let d = wrap_pi(phi - center);
        if d.abs() <= half {
            let v = q(phi);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

/// Representative of an angle modulo π in `[-π/2, π/2)`.
#[inline]
pub fn wrap_pi(a: f64) -> f64 {
    a - PI * ((a + FRAC_PI_2) / PI).floor()
}

/// Least-squares slope and intercept of `y` against `x`.
pub(crate) fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return (if mx != 0.0 { my / mx } else { 0.0 }, 0.0);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Cone invariance and growth audit with the default smoothness `r = 4`.
pub fn check_cones(spec: &MapSpec, cones: ConeParams, grid: usize, n_max: usize) -> Result<ConeReport> {
    check_cones_with_smoothness(spec, cones, grid, n_max, DEFAULT_SMOOTHNESS)
}

pub fn check_cones_with_smoothness(
    spec: &MapSpec,
    cones: ConeParams,
    grid: usize,
    n_max: usize,
    smoothness: u32,
) -> Result<ConeReport> {
    cones.validate()?;
    if n_max == 0 || n_max > 30 {
        return Err(SvphError::Precondition(format!("n_max must lie in 1..=30, got {n_max}")));
    }
    if grid == 0 {
        return Err(SvphError::Precondition("grid must be positive".into()));
    }
    let points = spec.lattice(grid, |p| p);

    struct PointStats {
        iota_u: f64,
        iota_c: f64,
        det_min: f64,
        dxf_min: f64,
        // per n: log λ⁻, log λ⁺, log λ_c⁻, log λ_c⁺
        logs: Vec<[f64; 4]>,
    }

    let unstable_half = (1.0 / cones.chi_c).atan();
    let central_half = cones.chi_c.atan();

    let per_point: Vec<Result<PointStats>> = points
        .par_iter()
        .map(|&z| {
            let j = spec.differential(z);
            let mut iota_u: f64 = 0.0;
            for s in [-cones.chi_u, cones.chi_u] {
                let w = j.apply([1.0, s]);
                let ratio = if w[0] > 0.0 {
                    (w[1] / w[0]).abs() / cones.chi_u
                } else {
                    f64::INFINITY
                };
                if ratio >= 1.0 {
                    return Err(SvphError::ConeNotInvariant {
                        x: z.x(),
                        theta: z.theta(),
                        ratio,
                    });
                }
                iota_u = iota_u.max(ratio);
            }
            let inv = j.inverse();
            let mut iota_c: f64 = 0.0;
            for s in [-cones.chi_c, cones.chi_c] {
                let w = inv.apply([s, 1.0]);
                let ratio = if w[1] > 0.0 {
                    (w[0] / w[1]).abs() / cones.chi_c
                } else {
                    f64::INFINITY
                };
                iota_c = iota_c.max(ratio);
            }

            let mut logs = Vec::with_capacity(n_max);
            let mut b = Jacobian2::identity();
            let mut log_scale = 0.0;
            let mut q = z;
            for _ in 0..n_max {
                b = spec.differential(q).compose(&b);
                let m = b.max_abs();
                b = b.scaled(1.0 / m);
                log_scale += m.ln();
                q = spec.eval(q);
                let (u_lo, u_hi) = arc_extremes(&b, 0.0, unstable_half);
                let (c_lo, c_hi) = arc_extremes(&b.inverse(), FRAC_PI_2, central_half);
                logs.push([
                    log_scale + u_lo.ln(),
                    log_scale + u_hi.ln(),
                    c_lo.ln() - log_scale,
                    c_hi.ln() - log_scale,
                ]);
            }
            Ok(PointStats {
                iota_u,
                iota_c,
                det_min: j.det,
                dxf_min: j.a11,
                logs,
            })
        })
        .collect();

    let mut stats = Vec::with_capacity(per_point.len());
    for r in per_point {
        stats.push(r?);
    }

    let iota_unstable = stats.iter().map(|s| s.iota_u).fold(0.0, f64::max);
    let iota_central = stats.iter().map(|s| s.iota_c).fold(0.0, f64::max);
    let det_min = stats.iter().map(|s| s.det_min).fold(f64::INFINITY, f64::min);
    let dxf_min = stats.iter().map(|s| s.dxf_min).fold(f64::INFINITY, f64::min);

    let mut lm = vec![f64::INFINITY; n_max];
    let mut lp = vec![f64::NEG_INFINITY; n_max];
    let mut cm = vec![f64::INFINITY; n_max];
    let mut cp = vec![f64::NEG_INFINITY; n_max];
    for s in &stats {
        for (n, l) in s.logs.iter().enumerate() {
            lm[n] = lm[n].min(l[0]);
            lp[n] = lp[n].max(l[1]);
            cm[n] = cm[n].min(l[2]);
            cp[n] = cp[n].max(l[3]);
        }
    }

    let start = n_max.div_ceil(2).max(1);
    let ns: Vec<f64> = (start..=n_max).map(|n| n as f64).collect();
    let tail = |v: &[f64]| v[start - 1..].to_vec();
    let rate = |v: &[f64]| linear_fit(&ns, &tail(v)).0;
    let (log_lambda, log_upper) = (rate(&lm), rate(&lp));
    let (log_c_minus, log_c_plus) = (rate(&cm), rate(&cp));

    let mut log_c_star: f64 = 0.0;
    for n in 0..n_max {
        let k = (n + 1) as f64;
        log_c_star = log_c_star
            .max(k * log_lambda - lm[n])
            .max(lp[n] - k * log_upper)
            .max(k * log_c_minus - cm[n])
            .max(cp[n] - k * log_c_plus);
    }

    let lambda = log_lambda.exp();
    let lambda_c_plus = log_c_plus.exp();
    let lambda_c_minus = log_c_minus.exp();
    let lambda_c = lambda_c_plus.max(1.0 / lambda_c_minus).max(1.0);
    let zeta_r = zeta(smoothness);
    let pinching_margin = log_lambda - zeta_r as f64 * log_c_plus;
    let audit = check_a1_a5(spec, grid.max(16))?;
    let iota_star = iota_unstable.max(iota_central);

    Ok(ConeReport {
        cones,
        grid,
        n_max,
        smoothness,
        zeta_r,
        a1_ok: det_min > 0.0 && audit.a1_ok,
        iota_star,
        iota_unstable,
        iota_central,
        lambda_minus_n: lm.iter().map(|v| v.exp()).collect(),
        lambda_plus_n: lp.iter().map(|v| v.exp()).collect(),
        lambda_c_minus_n: cm.iter().map(|v| v.exp()).collect(),
        lambda_c_plus_n: cp.iter().map(|v| v.exp()).collect(),
        lambda,
        lambda_upper: log_upper.exp(),
        lambda_c_plus,
        lambda_c_minus,
        c_star: log_c_star.exp(),
        lambda_c,
        pinching_margin,
        a5_margin: audit.a5_margin,
        a2_ok: iota_star < 1.0 && lambda > 1.0 && lambda > lambda_c_plus,
        a3_structural: dxf_min > 0.0,
        a4_ok: pinching_margin > 0.0,
        a5_ok: audit.a5_ok,
    })
}

/// Closed interval of directions modulo π, stored with `lo ≤ hi` around a
/// centre in `[-π/2, π/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleInterval {
    pub lo: f64,
    pub hi: f64,
}

impl AngleInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// The unstable cone `|η| ≤ χ|ξ|` itself.
    pub fn cone(chi: f64) -> Self {
        let a = chi.atan();
        Self { lo: -a, hi: a }
    }

    /// Image of the directions in `self` under `j` (`det j > 0`).
    pub fn push(&self, j: &Jacobian2) -> Self {
        let dir = |a: f64| {
            let w = j.apply([a.cos(), a.sin()]);
            w[1].atan2(w[0])
        };
        let c = wrap_pi(dir(self.center()));
        let lo = c + wrap_pi(dir(self.lo) - c);
        let hi = c + wrap_pi(dir(self.hi) - c);
        Self { lo, hi }
    }

    /// This interval shifted by a multiple of π to sit nearest `reference`.
    fn near(&self, reference: f64) -> Self {
        let shift = wrap_pi(self.center() - reference) - (self.center() - reference);
        Self {
            lo: self.lo + shift,
            hi: self.hi + shift,
        }
    }

    /// True when the two closed direction sets share a line.
    pub fn intersects(&self, other: &Self) -> bool {
        let o = other.near(self.center());
        self.lo.max(o.lo) <= self.hi.min(o.hi)
    }

    pub fn contains(&self, angle: f64) -> bool {
        let a = self.center() + wrap_pi(angle - self.center());
        a >= self.lo && a <= self.hi
    }
}

/// Directions spanned by `D_z F^n C_u`.
pub fn image_cone_angles(spec: &MapSpec, z: TorusPoint, n: usize, chi_u: f64) -> AngleInterval {
    let mut b = Jacobian2::identity();
    let mut q = z;
    for _ in 0..n {
        b = spec.differential(q).compose(&b);
        b = b.scaled(1.0 / b.max_abs());
        q = spec.eval(q);
    }
    AngleInterval::cone(chi_u).push(&b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransversalityRow {
    pub n: usize,
    /// Max over samples of `𝒩_F(n, y, z₁)` maximized over `z₁`.
    pub n_f: f64,
    /// Max over samples of `Ñ_F(n, y, L)` maximized over the line grid.
    pub n_tilde: f64,
    pub samples: usize,
    pub line_grid: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransversalityReport {
    pub n_values: Vec<usize>,
    #[serde(rename = "N_F")]
    pub n_f: Vec<f64>,
    #[serde(rename = "N_tilde")]
    pub n_tilde: Vec<f64>,
    pub rate: Vec<f64>,
    pub a6_ok: bool,
    pub samples: usize,
    pub seed: u64,
    /// Sup over `y` is replaced by a max over random samples.
    pub estimate: bool,
}

struct Branch {
    interval: AngleInterval,
    weight: f64,
}

/// Leaves of the preimage tree `F^{-n}(y)` with their pushed cones and
/// `|det D F^n|^{-1}`.
fn preimage_branches(spec: &MapSpec, y: TorusPoint, n: usize, chi_u: f64) -> Result<Vec<Branch>> {
    let mut level = vec![y];
    for _ in 0..n {
        let mut next = Vec::with_capacity(level.len() * spec.degree());
        for p in &level {
            next.extend(spec.preimages(*p)?);
        }
        level = next;
    }
    Ok(level
        .into_iter()
        .map(|z| {
            let mut b = Jacobian2::identity();
            let mut det = 1.0;
            let mut q = z;
            for _ in 0..n {
                let j = spec.differential(q);
                det *= j.det;
                b = j.compose(&b);
                b = b.scaled(1.0 / b.max_abs());
                q = spec.eval(q);
            }
            Branch {
                interval: AngleInterval::cone(chi_u).push(&b),
                weight: 1.0 / det,
            }
        })
        .collect())
}

fn sample_sums(branches: &[Branch], line_grid: usize) -> (f64, f64) {
    let mut n_f: f64 = 0.0;
    for b1 in branches {
        let s: f64 = branches
            .iter()
            .filter(|b2| b1.interval.intersects(&b2.interval))
            .map(|b2| b2.weight)
            .sum();
        n_f = n_f.max(s);
    }
    let reference = branches[0].interval.center();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for b in branches {
        let i = b.interval.near(reference);
        lo = lo.min(i.lo);
        hi = hi.max(i.hi);
    }
    if hi - lo >= PI {
        lo = reference - FRAC_PI_2;
        hi = reference + FRAC_PI_2;
    }
    let mut n_tilde: f64 = 0.0;
    for k in 0..line_grid {
        let a = if line_grid == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * k as f64 / (line_grid - 1) as f64
        };
        let s: f64 = branches
            .iter()
            .filter(|b| b.interval.contains(a))
            .map(|b| b.weight)
            .sum();
        n_tilde = n_tilde.max(s);
    }
    (n_f, n_tilde)
}

/// Estimates `𝒩_F(n)` and `Ñ_F(n)` from `samples` uniform random `y`.
pub fn transversality_sums(
    spec: &MapSpec,
    cones: ConeParams,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<TransversalityRow> {
    transversality_sums_with_lines(spec, cones, n, samples, seed, DEFAULT_LINE_GRID)
}

pub fn transversality_sums_with_lines(
    spec: &MapSpec,
    cones: ConeParams,
    n: usize,
    samples: usize,
    seed: u64,
    line_grid: usize,
) -> Result<TransversalityRow> {
    cones.validate()?;
    let required = (spec.degree() as f64).powi(n as i32) * samples as f64;
    if required > ENUMERATION_BUDGET {
        return Err(SvphError::BudgetExceeded {
            required,
            budget: ENUMERATION_BUDGET,
        });
    }
    if samples == 0 || line_grid == 0 {
        return Err(SvphError::Precondition("samples and line_grid must be positive".into()));
    }
    let rows: Vec<Result<(f64, f64)>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let y = TorusPoint::new(rng.random(), rng.random());
            let branches = preimage_branches(spec, y, n, cones.chi_u)?;
            Ok(sample_sums(&branches, line_grid))
        })
        .collect();
    let mut n_f: f64 = 0.0;
    let mut n_tilde: f64 = 0.0;
    for r in rows {
        let (a, b) = r?;
        n_f = n_f.max(a);
        n_tilde = n_tilde.max(b);
    }
    Ok(TransversalityRow {
        n,
        n_f,
        n_tilde,
        samples,
        line_grid,
        seed,
    })
}

/// `Ñ_F(n)^{1/n}` over an increasing list of `n`.
pub fn a6_rate(
    spec: &MapSpec,
    cones: ConeParams,
    n_range: &[usize],
    samples: usize,
    seed: u64,
) -> Result<TransversalityReport> {
    if n_range.is_empty() || n_range.windows(2).any(|w| w[0] >= w[1]) || n_range[0] == 0 {
        return Err(SvphError::Precondition("n_range must be positive and increasing".into()));
    }
    let mut report = TransversalityReport {
        n_values: n_range.to_vec(),
        n_f: Vec::new(),
        n_tilde: Vec::new(),
        rate: Vec::new(),
        a6_ok: false,
        samples,
        seed,
        estimate: true,
    };
    for &n in n_range {
        let row = transversality_sums(spec, cones, n, samples, seed)?;
        report.n_f.push(row.n_f);
        report.n_tilde.push(row.n_tilde);
        report.rate.push(row.n_tilde.powf(1.0 / n as f64));
    }
    report.a6_ok = *report.rate.last().unwrap() < 1.0 - A6_MARGIN;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::FourierTable;
    use std::f64::consts::TAU;

    fn doubling(omega: FourierTable) -> MapSpec {
        MapSpec::skew_linear(2, omega).unwrap()
    }

    #[test]
    fn zeta_values() {
        assert_eq!(zeta(4), 720);
        assert_eq!(zeta(1), 12);
        assert_eq!(zeta(0), 6);
    }

    #[test]
    fn a5_examples() {
        let m = MapSpec::skew_linear(3, FourierTable::sin(0.05, 1, 0)).unwrap();
        let a = check_a1_a5(&m, 32).unwrap();
        assert!(a.a1_ok);
        assert!((a.a5_margin - (3.0 - 2.0 * (1.0 + 0.1 * PI))).abs() < 1e-12);
        assert!(a.a5_ok);

        let m = doubling(FourierTable::zero());
        let a = check_a1_a5(&m, 16).unwrap();
        assert_eq!(a.a5_margin, 0.0);
        assert!(!a.a5_ok);

        assert!(check_a1_a5(&m, 8).is_err());
    }

    #[test]
    fn a5_margin_matches_direct_grid_evaluation() {
        let m = MapSpec::skew_linear(4, FourierTable::cos(0.1, 1, 0)).unwrap();
        let g = 40;
        // independent evaluation: ∂_x ω = -0.2π sin(2πx)
        let mut sup: f64 = 0.0;
        for i in 0..g {
            sup = sup.max((0.2 * PI * (TAU * i as f64 / g as f64).sin()).abs());
        }
        let expect = 4.0 - 2.0 * (1.0 + sup);
        let a = check_a1_a5(&m, g).unwrap();
        assert!((a.a5_margin - expect).abs() < 1e-12);
        assert!(a.a5_margin > 0.0);
    }

    #[test]
    fn product_map_cones() {
        let m = doubling(FourierTable::zero());
        let r = check_cones(&m, ConeParams::new(0.5, 1.0).unwrap(), 16, 20).unwrap();
        assert!(r.lambda_c_plus_n.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        assert_eq!(r.lambda_c_plus, 1.0);
        assert_eq!(r.zeta_r, 720);
        assert!((r.pinching_margin - 2f64.ln()).abs() < 1e-6);
        assert!(r.iota_star < 1.0 && r.a2_ok && r.a4_ok);
    }

    #[test]
    fn slope_contraction_oracle() {
        // DF(1, s) = (2, ω' + s): image slope (ω'(x) + s)/2, ω' = -0.2π sin(2πx).
        let m = doubling(FourierTable::cos(0.1, 1, 0));
        let chi = 0.8;
        let g = 24;
        let mut expect: f64 = 0.0;
        for i in 0..g {
            let wp = -0.2 * PI * (TAU * i as f64 / g as f64).sin();
            for s in [-chi, chi] {
                expect = expect.max(((wp + s) / 2.0).abs() / chi);
            }
        }
        let r = check_cones(&m, ConeParams::new(chi, 1.0).unwrap(), g, 6).unwrap();
        assert!((r.iota_unstable - expect).abs() < 1e-12);
        assert!(r.iota_star < 1.0);
    }

    #[test]
    fn narrow_cone_is_not_invariant_for_large_shear() {
        // slope bound (0.2π + 0.2)/2 exceeds 0.2
        let m = doubling(FourierTable::cos(0.1, 1, 0));
        let e = check_cones(&m, ConeParams::new(0.2, 1.0).unwrap(), 16, 4);
        assert!(matches!(e, Err(SvphError::ConeNotInvariant { .. })));
    }

    #[test]
    fn identity_like_map_has_no_invariant_cone() {
        let m = MapSpec::skew_general(1, FourierTable::zero(), FourierTable::zero()).unwrap();
        let e = check_cones(&m, ConeParams::new(0.2, 1.0).unwrap(), 16, 4);
        assert!(matches!(e, Err(SvphError::ConeNotInvariant { .. })));
    }

    #[test]
    fn angle_interval_examples() {
        let m = doubling(FourierTable::zero());
        let i = image_cone_angles(&m, TorusPoint::new(0.3, 0.6), 3, 0.2);
        assert!((i.hi - 0.025f64.atan()).abs() < 1e-15);
        assert!((i.lo + 0.025f64.atan()).abs() < 1e-15);
        assert!((i.lo + i.hi).abs() < 1e-15);
    }

    #[test]
    fn angle_intervals_compose() {
        let m = MapSpec::skew_general(
            2,
            FourierTable::sin(0.03, 1, 1),
            FourierTable::cos(0.1, 1, 0).add(&FourierTable::sin(0.02, 1, 1)),
        )
        .unwrap();
        let z = TorusPoint::new(0.123, 0.456);
        let chi = 0.5;
        let mut step = AngleInterval::cone(chi);
        let mut q = z;
        for n in 1..=6 {
            step = step.push(&m.differential(q));
            q = m.eval(q);
            let direct = image_cone_angles(&m, z, n, chi);
            assert!((direct.lo - step.lo).abs() < 1e-10 && (direct.hi - step.hi).abs() < 1e-10);
            assert!(direct.width() < FRAC_PI_2);
        }
    }

    #[test]
    fn interval_arithmetic_mod_pi() {
        let a = AngleInterval { lo: 1.5, hi: 1.6 };
        let b = AngleInterval {
            lo: 1.55 - PI,
            hi: 1.58 - PI,
        };
        assert!(a.intersects(&b) && b.intersects(&a));
        assert!(a.contains(1.57 - PI));
        let c = AngleInterval { lo: 0.0, hi: 0.1 };
        assert!(!a.intersects(&c));
        // touching intervals share a line
        let d = AngleInterval { lo: 0.1, hi: 0.2 };
        assert!(c.intersects(&d));
    }

    #[test]
    fn product_map_transversality_is_exactly_one() {
        let m = doubling(FourierTable::zero());
        for n in [1, 3, 5] {
            let r = transversality_sums(&m, ConeParams::new(0.2, 1.0).unwrap(), n, 4, 1).unwrap();
            assert_eq!(r.n_tilde, 1.0);
            assert_eq!(r.n_f, 1.0);
        }
    }

    #[test]
    fn degree_one_branch() {
        let m = MapSpec::skew_general(1, FourierTable::zero(), FourierTable::cos(0.1, 1, 0)).unwrap();
        let r = transversality_sums(&m, ConeParams::new(0.2, 1.0).unwrap(), 4, 3, 0).unwrap();
        assert_eq!(r.n_f, 1.0);
    }

    #[test]
    fn budget_guard() {
        let m = doubling(FourierTable::zero());
        let e = transversality_sums(&m, ConeParams::default(), 20, 64, 0);
        assert!(matches!(e, Err(SvphError::BudgetExceeded { .. })));
    }
}
