//! Diffusion coefficients and Monte-Carlo checks of the central and local
//! limit theorems for Birkhoff sums.
//!
//! The limiting law is the Gaussian mixture `Σ_k c_k N(0, σ_k²)`, one
//! component per ergodic acip, weighted by the initial measure.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::ergodic_decomp::{histogram_add, ErgodicDecomposition, HIST_BINS};
use crate::error::{Result, SvphError};
use crate::fourier::{FourierTable, ModeBasis, C64};
use crate::observable::{BasinLabel, Observable};
use crate::simulation::{stream_rng, Walker};
use crate::torus_maps::{MapSpec, TorusPoint};
use crate::transfer_spectral::OperatorMatrix;

/// Default Green–Kubo truncation.
pub const DEFAULT_J: usize = 32;
pub const MAX_J: usize = 64;
/// Components with `σ_k` below this are treated as degenerate.
pub const DEGENERATE_SIGMA: f64 = 1e-6;
/// Default triangle width for the local limit theorem.
pub const DEFAULT_BUMP_WIDTH: f64 = 1.0;

/// Standard normal density `𝔫`.
#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Initial probability density `f_m` with respect to Lebesgue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialMeasure {
    pub density: FourierTable,
    pub sup_bound: f64,
}

impl InitialMeasure {
    pub fn uniform() -> Self {
        Self {
            density: FourierTable::constant(1.0),
            sup_bound: 1.0,
        }
    }

    /// Validates mass one and non-negativity on a 128² lattice and sets
    /// the rejection bound from the lattice maximum.
    pub fn new(density: FourierTable) -> Result<Self> {
        let mass = density.mean();
        if (mass - 1.0).abs() > 1e-8 {
            return Err(SvphError::InvalidObservable(format!("initial density has mass {mass}")));
        }
        let g = 128;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for i in 0..g {
            for j in 0..g {
                let v = density.value(i as f64 / g as f64, j as f64 / g as f64);
                min = min.min(v);
                max = max.max(v);
            }
        }
        if min < -1e-9 {
            return Err(SvphError::InvalidObservable(format!("initial density is negative ({min})")));
        }
        let sup_bound = if density.terms().iter().all(|t| t.k1 == 0 && t.k2 == 0) {
            max
        } else {
            // the lattice can miss the peak; the l1 norm never does
            (max * 1.05).min(density.l1_norm())
        };
        Ok(Self { density, sup_bound })
    }

    pub fn is_uniform(&self) -> bool {
        self.density.terms().iter().all(|t| t.k1 == 0 && t.k2 == 0)
    }

    pub fn coefficients(&self, basis: &ModeBasis) -> Vec<C64> {
        self.density.to_vector(basis)
    }

    /// Draws one point by rejection; returns the point and the number of
    /// proposals used.
    pub fn draw(&self, rng: &mut impl Rng) -> (TorusPoint, usize) {
        let mut tries = 0;
        loop {
            tries += 1;
            let p = TorusPoint::new(rng.random(), rng.random());
            if self.is_uniform() {
                return (p, tries);
            }
            let u: f64 = rng.random::<f64>() * self.sup_bound;
            if u < self.density.value(p.x(), p.theta()) {
                return (p, tries);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    pub points: Vec<TorusPoint>,
    pub acceptance_rate: f64,
}

/// `n` i.i.d. points from `m`; point `i` uses stream `i` of `seed`.
pub fn sample_initial(m: &InitialMeasure, n: usize, seed: u64) -> Samples {
    let draws: Vec<(TorusPoint, usize)> = (0..n)
        .into_par_iter()
        .map(|i| m.draw(&mut stream_rng(seed, i as u64)))
        .collect();
    let tries: usize = draws.iter().map(|d| d.1).sum();
    Samples {
        acceptance_rate: n as f64 / tries.max(1) as f64,
        points: draws.into_iter().map(|d| d.0).collect(),
    }
}

/// Sets `centered_offsets[k]` to the mean of `τ` under the physical
/// measure of acip `k`.
pub fn center(obs: &Observable, dec: &ErgodicDecomposition) -> Result<Observable> {
    obs.require_smooth()?;
    let tau = obs.coeffs.to_vector(&dec.basis);
    let offsets: Vec<f64> = (0..dec.ell).map(|k| dec.physical_mean(k, &tau)).collect();
    let mut out = obs.clone();
    out.centered_offsets = Some(offsets);
    out.basins = if dec.ell > 1 { Some(dec.basins.clone()) } else { None };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenKubo {
    pub k: usize,
    pub sigma2: f64,
    pub tail_estimate: f64,
    /// `C_j = μ_k(τ·τ∘F^j)` for `j = 0..=J`, with `τ` centred on acip `k`.
    pub correlations: Vec<f64>,
    /// The same sum without centring.
    pub sigma2_raw: f64,
    pub correlations_raw: Vec<f64>,
    pub offset: f64,
    pub rate: f64,
}

fn correlations(m0: &OperatorMatrix, tau: &[C64], rho: &[C64], mass: f64, j_max: usize) -> Vec<f64> {
    let basis = m0.basis;
    let mut u = basis.multiply(tau, rho);
    let mut out = Vec::with_capacity(j_max + 1);
    for j in 0..=j_max {
        if j > 0 {
            u = m0.apply(&u);
        }
        out.push(basis.pairing(tau, &u).re / mass);
    }
    out
}

/// `σ_k² = μ_k(τ²) + 2 Σ_{j=1}^J μ_k(τ·τ∘F^j)` with the correlations
/// computed as `𝔪(τ · M^j(τρ_k)) / 𝔪(ρ_k)`.
///
/// `rate` is the modulus of the first sub-peripheral eigenvalue and sets
/// the geometric tail estimate.
pub fn green_kubo(
    m0: &OperatorMatrix,
    obs: &Observable,
    dec: &ErgodicDecomposition,
    k: usize,
    j_max: usize,
    rate: f64,
) -> Result<GreenKubo> {
    obs.require_smooth()?;
    if m0.nu != 0.0 || m0.basis != dec.basis {
        return Err(SvphError::Precondition(
            "Green-Kubo needs the untwisted operator on the decomposition's basis".into(),
        ));
    }
    if j_max == 0 || j_max > MAX_J {
        return Err(SvphError::Precondition(format!("J must lie in 1..={MAX_J}, got {j_max}")));
    }
    if k >= dec.ell {
        return Err(SvphError::Precondition(format!("acip index {k} out of range")));
    }
    let basis = dec.basis;
    let raw = obs.coeffs.to_vector(&basis);
    let offset = match &obs.centered_offsets {
        Some(o) if o.len() == 1 => o[0],
        Some(o) => o.get(k).copied().unwrap_or(0.0),
        None => 0.0,
    };
    let mut centred = raw.clone();
    centred[basis.zero_index()] -= offset;

    let mass = dec.rho_mass[k];
    let c = correlations(m0, &centred, &dec.rho[k], mass, j_max);
    let c_raw = correlations(m0, &raw, &dec.rho[k], mass, j_max);
    let sum = |c: &[f64]| c[0] + 2.0 * c[1..].iter().sum::<f64>();

    let negligible = 1e-12 * c[0].abs().max(1e-300);
    if j_max > 5 {
        let c5 = c[5].abs();
        let last = c[j_max].abs();
        if c5 > negligible && last > negligible && last >= c5 {
            return Err(SvphError::NonDecayingCorrelations { c5, last });
        }
    }
    let r = rate.clamp(0.0, 1.0 - 1e-12);
    Ok(GreenKubo {
        k,
        sigma2: sum(&c),
        tail_estimate: (2.0 * c[j_max]).abs() * r / (1.0 - r),
        correlations: c,
        sigma2_raw: sum(&c_raw),
        correlations_raw: c_raw,
        offset,
        rate,
    })
}

/// Orbit sampling for [`green_kubo_orbits`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitalParams {
    pub orbits: usize,
    pub burn: usize,
    pub len: usize,
    pub seed: u64,
}

impl Default for OrbitalParams {
    fn default() -> Self {
        Self {
            orbits: 256,
            burn: 2000,
            len: 20_000,
            seed: 0x6b75,
        }
    }
}

/// The Green–Kubo sums of every acip with `μ_k` realised as time
/// averages along orbits.
///
/// Orbits start uniformly on the torus and are assigned to an acip by
/// their own histogram after the burn-in, so the estimate follows the
/// physical measures even when basins are intermingled or the spectral
/// `ρ_k` is not a genuine density. The offset of each acip is its orbit
/// mean of `τ`.
pub fn green_kubo_orbits(
    spec: &MapSpec,
    obs: &Observable,
    dec: &ErgodicDecomposition,
    j_max: usize,
    rate: f64,
    params: OrbitalParams,
) -> Result<Vec<GreenKubo>> {
    if j_max == 0 || j_max > MAX_J {
        return Err(SvphError::Precondition(format!("J must lie in 1..={MAX_J}, got {j_max}")));
    }
    if params.orbits == 0 || params.len <= j_max {
        return Err(SvphError::Precondition("need orbits > 0 and len > J".into()));
    }
    let runs: Vec<(BasinLabel, Vec<f64>)> = (0..params.orbits)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(params.seed, i as u64);
            let start = TorusPoint::new(rng.random(), rng.random());
            let mut w = Walker::new(spec, start, rng);
            for _ in 0..params.burn {
                w.step();
            }
            let mut h = vec![0.0; 2 * HIST_BINS];
            let series = (0..params.len)
                .map(|_| {
                    let p = w.point();
                    histogram_add(&mut h, p);
                    w.step();
                    obs.raw_value(p)
                })
                .collect();
            h.iter_mut().for_each(|v| *v /= params.len as f64);
            (dec.classify_histogram(&h), series)
        })
        .collect();
    let r = rate.clamp(0.0, 1.0 - 1e-12);
    let mut out = Vec::with_capacity(dec.ell);
    for k in 0..dec.ell {
        let series: Vec<&Vec<f64>> = runs
            .iter()
            .filter(|(l, _)| *l == Some(k as u16))
            .map(|(_, s)| s)
            .collect();
        if series.is_empty() {
            return Err(SvphError::Precondition(format!("no sampled orbit settled on acip {k}")));
        }
        let total = (series.len() * params.len) as f64;
        let mean = series.iter().map(|s| s.iter().sum::<f64>()).sum::<f64>() / total;
        let lagged = |shift: f64| -> Vec<f64> {
            let per: Vec<Vec<f64>> = series
                .par_iter()
                .map(|s| {
                    (0..=j_max)
                        .map(|j| {
                            let n = s.len() - j;
                            (0..n).map(|t| (s[t] - shift) * (s[t + j] - shift)).sum::<f64>() / n as f64
                        })
                        .collect()
                })
                .collect();
            (0..=j_max)
                .map(|j| per.iter().map(|v| v[j]).sum::<f64>() / per.len() as f64)
                .collect()
        };
        let c = lagged(mean);
        let c_raw = lagged(0.0);
        let sum = |c: &[f64]| c[0] + 2.0 * c[1..].iter().sum::<f64>();
        out.push(GreenKubo {
            k,
            sigma2: sum(&c),
            tail_estimate: (2.0 * c[j_max]).abs() * r / (1.0 - r),
            correlations: c,
            sigma2_raw: sum(&c_raw),
            correlations_raw: c_raw,
            offset: mean,
            rate,
        });
    }
    Ok(out)
}

/// Birkhoff sums `τ_n(p_i)` of an ensemble of starting points, recorded
/// at increasing checkpoints `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub checkpoints: Vec<usize>,
    /// `sums[c][i]` is `τ_{checkpoints[c]}` for sample `i`.
    pub sums: Vec<Vec<f64>>,
    /// Basin label of each starting point (all `Some(0)` without basins).
    pub labels: Vec<BasinLabel>,
    pub samples: usize,
    pub seed: u64,
    pub acceptance_rate: f64,
}

/// Runs `samples` orbits from `m` up to the last checkpoint. Sample `i`
/// draws its start and all base digits from stream `i` of `seed`.
pub fn simulate_ensemble(
    spec: &MapSpec,
    obs: &Observable,
    m: &InitialMeasure,
    checkpoints: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Ensemble> {
    if checkpoints.is_empty() || checkpoints[0] == 0 || checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SvphError::Precondition("checkpoints must be positive and increasing".into()));
    }
    if samples == 0 {
        return Err(SvphError::Precondition("N must be positive".into()));
    }
    let nc = checkpoints.len();
    let n_max = *checkpoints.last().expect("non-empty");
    let skip_fibre = !obs.depends_on_theta();
    let mut flat = vec![0.0; samples * nc];
    let mut labels = vec![None; samples];
    let mut tries = vec![0usize; samples];
    flat.par_chunks_mut(nc)
        .zip(labels.par_iter_mut())
        .zip(tries.par_iter_mut())
        .enumerate()
        .for_each(|(i, ((row, label), t))| {
            let mut rng = stream_rng(seed, i as u64);
            let (start, used) = m.draw(&mut rng);
            *t = used;
            *label = match &obs.basins {
                Some(b) => b.label_at(start),
                None => Some(0),
            };
            let offset = obs.offset_at(start);
            let mut w = Walker::new(spec, start, rng);
            if skip_fibre {
                w = w.without_fibre();
            }
            let mut acc = 0.0;
            let mut c = 0;
            for step in 1..=n_max {
                acc += obs.raw_value(w.point());
                w.step();
                if step == checkpoints[c] {
                    row[c] = acc - step as f64 * offset;
                    c += 1;
                }
            }
        });
    let sums = (0..nc)
        .map(|c| (0..samples).map(|i| flat[i * nc + c]).collect())
        .collect();
    let total: usize = tries.iter().sum();
    Ok(Ensemble {
        checkpoints: checkpoints.to_vec(),
        sums,
        labels,
        samples,
        seed,
        acceptance_rate: samples as f64 / total as f64,
    })
}

impl Ensemble {
    pub fn at(&self, n: usize) -> Option<&[f64]> {
        self.checkpoints.iter().position(|c| *c == n).map(|i| self.sums[i].as_slice())
    }

    /// The first `samples` orbits, as if simulated on their own.
    pub fn truncated(&self, samples: usize) -> Ensemble {
        let s = samples.min(self.samples);
        Ensemble {
            checkpoints: self.checkpoints.clone(),
            sums: self.sums.iter().map(|v| v[..s].to_vec()).collect(),
            labels: self.labels[..s].to_vec(),
            samples: s,
            seed: self.seed,
            acceptance_rate: self.acceptance_rate,
        }
    }

    /// Fraction of starting points in each basin.
    pub fn label_fractions(&self, ell: usize) -> Vec<f64> {
        let mut out = vec![0.0; ell];
        for l in self.labels.iter().flatten() {
            if (*l as usize) < ell {
                out[*l as usize] += 1.0;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.samples as f64);
        out
    }
}

/// One Gaussian component of the limit law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub c: f64,
    pub sigma: f64,
}

impl Component {
    pub fn degenerate(&self) -> bool {
        self.sigma < DEGENERATE_SIGMA
    }
}

/// `Σ c_k Φ(z/σ_k)`, with a unit step for degenerate components.
pub fn mixture_cdf(components: &[Component], z: f64) -> f64 {
    components
        .iter()
        .map(|k| {
            let f = if k.degenerate() {
                if z >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                normal_cdf(z / k.sigma)
            };
            k.c * f
        })
        .sum()
}

/// Kolmogorov–Smirnov distance of `values` to `cdf`.
pub fn ks_distance(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let f = cdf(*x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// Asymptotic standard deviation of the KS statistic under the null.
pub fn ks_stderr(samples: usize) -> f64 {
    let var = PI * PI / 12.0 - PI / 2.0 * std::f64::consts::LN_2.powi(2);
    var.sqrt() / (samples as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsRow {
    pub n: usize,
    pub ks: f64,
    pub ks_stderr: f64,
    /// `Var(τ_n)/n` over the ensemble.
    pub variance_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub components: Vec<Component>,
    pub rows: Vec<KsRow>,
    pub samples: usize,
    pub seed: u64,
    /// Components skipped as degenerate.
    pub degenerate: Vec<usize>,
    /// `Σ c_k σ_k²`, the predicted limit of `Var(τ_n)/n`.
    pub predicted_variance: f64,
}

/// KS distance of `τ_n/√n` to the mixture at every checkpoint.
pub fn clt_from_ensemble(ens: &Ensemble, components: &[Component]) -> CltReport {
    let rows = ens
        .checkpoints
        .iter()
        .zip(&ens.sums)
        .map(|(&n, sums)| {
            let scale = 1.0 / (n as f64).sqrt();
            let z: Vec<f64> = sums.iter().map(|s| s * scale).collect();
            KsRow {
                n,
                ks: ks_distance(&z, |v| mixture_cdf(components, v)),
                ks_stderr: ks_stderr(z.len()),
                variance_ratio: variance(sums) / n as f64,
            }
        })
        .collect();
    CltReport {
        components: components.to_vec(),
        rows,
        samples: ens.samples,
        seed: ens.seed,
        degenerate: components
            .iter()
            .enumerate()
            .filter(|(_, c)| c.degenerate())
            .map(|(i, _)| i)
            .collect(),
        predicted_variance: components.iter().map(|c| c.c * c.sigma * c.sigma).sum(),
    }
}

/// Simulates and runs [`clt_from_ensemble`].
#[allow(clippy::too_many_arguments)]
pub fn clt_experiment(
    spec: &MapSpec,
    obs: &Observable,
    m: &InitialMeasure,
    n_list: &[usize],
    samples: usize,
    components: &[Component],
    seed: u64,
) -> Result<CltReport> {
    let ens = simulate_ensemble(spec, obs, m, n_list, samples, seed)?;
    Ok(clt_from_ensemble(&ens, components))
}

/// Smallest KS distance over single centred Gaussians, by grid search.
pub fn best_single_gaussian(values: &[f64], lo: f64, hi: f64, steps: usize) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut best = (f64::INFINITY, lo);
    for i in 0..=steps {
        let s = lo + (hi - lo) * i as f64 / steps as f64;
        let d = ks_distance(&v, |z| normal_cdf(z / s));
        if d < best.0 {
            best = (d, s);
        }
    }
    best
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerryEsseenFit {
    #[serde(rename = "C")]
    pub c: f64,
    pub exponent: f64,
    pub exponent_stderr: f64,
    pub log_c_stderr: f64,
    /// 95% confidence interval of the exponent.
    pub exponent_ci: (f64, f64),
    pub points: usize,
}

/// Least-squares fit of `log D(n) = log C − e log n`.
pub fn berry_esseen_fit(ns: &[usize], ds: &[f64]) -> Result<BerryEsseenFit> {
    if ns.len() != ds.len() || ns.len() < 5 {
        return Err(SvphError::Precondition("need at least 5 (n, D) pairs".into()));
    }
    if ds.iter().any(|d| !(*d > 0.0)) {
        return Err(SvphError::Precondition("KS distances must be positive".into()));
    }
    let x: Vec<f64> = ns.iter().map(|n| (*n as f64).ln()).collect();
    let y: Vec<f64> = ds.iter().map(|d| d.ln()).collect();
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let s2 = rss / (k - 2.0);
    let se_slope = (s2 / sxx).sqrt();
    let se_intercept = (s2 * (1.0 / k + mx * mx / sxx)).sqrt();
    let t = StudentsT::new(0.0, 1.0, k - 2.0)
        .map(|d| d.inverse_cdf(0.975))
        .unwrap_or(1.96);
    let e = -slope;
    Ok(BerryEsseenFit {
        c: intercept.exp(),
        exponent: e,
        exponent_stderr: se_slope,
        log_c_stderr: se_intercept,
        exponent_ci: (e - t * se_slope, e + t * se_slope),
        points: ns.len(),
    })
}

/// Triangle bump `g(z) = max(0, 1 − |z|/w)`, `Leb(g) = w`.
#[inline]
pub fn triangle(z: f64, width: f64) -> f64 {
    (1.0 - z.abs() / width).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LltPoint {
    pub z: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: f64,
    pub within_3se: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LltReport {
    pub n: usize,
    pub width: f64,
    pub points: Vec<LltPoint>,
    pub sup_error: f64,
    pub samples: usize,
    pub skipped_degenerate: Vec<usize>,
}

/// `√n 𝔼 g(τ_n − z)` against `Leb(g) Σ_k c_k σ_k⁻¹ 𝔫(z/(σ_k√n))`.
pub fn llt_from_sums(sums: &[f64], n: usize, z_grid: &[f64], width: f64, components: &[Component]) -> LltReport {
    let sn = (n as f64).sqrt();
    let count = sums.len() as f64;
    let points = z_grid
        .iter()
        .map(|&z| {
            let vals: Vec<f64> = sums.iter().map(|s| triangle(s - z, width)).collect();
            let mean = vals.iter().sum::<f64>() / count;
            let sd = variance(&vals).sqrt();
            let lhs = sn * mean;
            let stderr = sn * sd / count.sqrt();
            let rhs = width
                * components
                    .iter()
                    .filter(|c| !c.degenerate())
                    .map(|c| c.c / c.sigma * normal_pdf(z / (c.sigma * sn)))
                    .sum::<f64>();
            LltPoint {
                z,
                lhs,
                rhs,
                stderr,
                within_3se: (lhs - rhs).abs() <= 3.0 * stderr,
            }
        })
        .collect::<Vec<_>>();
    LltReport {
        n,
        width,
        sup_error: points.iter().map(|p| (p.lhs - p.rhs).abs()).fold(0.0, f64::max),
        points,
        samples: sums.len(),
        skipped_degenerate: components
            .iter()
            .enumerate()
            .filter(|(_, c)| c.degenerate())
            .map(|(i, _)| i)
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn llt_experiment(
    spec: &MapSpec,
    obs: &Observable,
    m: &InitialMeasure,
    width: f64,
    z_grid: &[f64],
    n: usize,
    samples: usize,
    components: &[Component],
    seed: u64,
) -> Result<LltReport> {
    if !(width > 0.0) {
        return Err(SvphError::Precondition("bump width must be positive".into()));
    }
    let ens = simulate_ensemble(spec, obs, m, &[n], samples, seed)?;
    Ok(llt_from_sums(&ens.sums[0], n, z_grid, width, components))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub n: usize,
    pub lhs: f64,
    pub predicted: f64,
    pub bound: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalLltReport {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub rows: Vec<IntervalRow>,
    /// `max lhs/bound` over the first half of the `n` sweep.
    pub fitted_c: f64,
    /// Second half satisfies `lhs ≤ C·bound + 3·stderr`.
    pub holds: bool,
}

/// `|ℙ(τ_n/√n ∈ [a,b]) − Σ c_k ∫_a^b σ_k⁻¹𝔫(y/σ_k) dy|` against
/// `max_k 𝔫(a/σ_k) n^{1/δ−1/2} + (b−a)/√n` across the ensemble
/// checkpoints.
pub fn interval_llt(ens: &Ensemble, a: f64, b: f64, delta: f64, components: &[Component]) -> Result<IntervalLltReport> {
    if !(b > a && b - a < 1.0) || !(delta > 2.0) {
        return Err(SvphError::Precondition("need 0 < b-a < 1 and delta > 2".into()));
    }
    let active: Vec<&Component> = components.iter().filter(|c| !c.degenerate()).collect();
    let predicted: f64 = components
        .iter()
        .map(|c| {
            if c.degenerate() {
                if a <= 0.0 && 0.0 <= b {
                    c.c
                } else {
                    0.0
                }
            } else {
                c.c * (normal_cdf(b / c.sigma) - normal_cdf(a / c.sigma))
            }
        })
        .sum();
    let peak = active.iter().map(|c| normal_pdf(a / c.sigma)).fold(0.0, f64::max);
    let rows: Vec<IntervalRow> = ens
        .checkpoints
        .iter()
        .zip(&ens.sums)
        .map(|(&n, sums)| {
            let sn = (n as f64).sqrt();
            let hits = sums.iter().filter(|s| (a..=b).contains(&(*s / sn))).count() as f64;
            let p = hits / sums.len() as f64;
            IntervalRow {
                n,
                lhs: (p - predicted).abs(),
                predicted,
                bound: peak / (n as f64).powf(0.5 - 1.0 / delta) + (b - a) / sn,
                stderr: (p * (1.0 - p) / sums.len() as f64).sqrt(),
            }
        })
        .collect();
    // binomial resolution floor for empty or full intervals
    let samples = ens.samples as f64;
    let half = rows.len().div_ceil(2);
    let fitted_c = rows[..half].iter().map(|r| r.lhs / r.bound).fold(0.0, f64::max);
    let holds = rows[half..]
        .iter()
        .all(|r| r.lhs <= fitted_c * r.bound + 3.0 * r.stderr.max(1.0 / samples));
    Ok(IntervalLltReport {
        a,
        b,
        delta,
        rows,
        fitted_c,
        holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_helpers() {
        assert!((normal_pdf(0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.96) - 0.975_002_104_851_780).abs() < 1e-9);
    }

    #[test]
    fn synthetic_berry_esseen_fit() {
        let ns: Vec<usize> = (6..=12).map(|k| 1 << k).collect();
        let ds: Vec<f64> = ns.iter().map(|n| 0.3 / (*n as f64).sqrt()).collect();
        let f = berry_esseen_fit(&ns, &ds).unwrap();
        assert!((f.exponent - 0.5).abs() < 1e-12);
        assert!((f.c - 0.3).abs() < 1e-12);
        let flat = vec![0.1; ns.len()];
        assert!(berry_esseen_fit(&ns, &flat).unwrap().exponent.abs() < 1e-12);
        assert!(berry_esseen_fit(&ns[..4], &ds[..4]).is_err());
    }

    #[test]
    fn ks_of_exact_quantiles_is_half_step() {
        let n = 1000;
        let v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_distance(&v, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.5 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn mixture_with_degenerate_component() {
        let comps = [Component { c: 0.5, sigma: 1.0 }, Component { c: 0.5, sigma: 0.0 }];
        assert!((mixture_cdf(&comps, -1e-9) - 0.25).abs() < 1e-6);
        assert!((mixture_cdf(&comps, 0.0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn uniform_sampling() {
        let s = sample_initial(&InitialMeasure::uniform(), 20_000, 7);
        let mean = s.points.iter().map(|p| p.x()).sum::<f64>() / 20_000.0;
        // 3σ band of a uniform mean
        assert!((mean - 0.5).abs() < 3.0 * (1.0 / 12.0f64 / 20_000.0).sqrt());
        assert_eq!(s.acceptance_rate, 1.0);
        assert_eq!(s, sample_initial(&InitialMeasure::uniform(), 20_000, 7));
    }

    #[test]
    fn smoothed_half_density_sampling() {
        // truncated square wave in θ, damped enough to stay positive
        let mut t = FourierTable::constant(1.0);
        let mut lower_half = 0.5;
        for q in [1, 3, 5, 7] {
            let a = 0.8 * 4.0 / PI / f64::from(q);
            t = t.add(&FourierTable::sin(a, 0, q));
            lower_half += a / (PI * f64::from(q));
        }
        let m = InitialMeasure::new(t).unwrap();
        let n = 20_000;
        let s = sample_initial(&m, n, 1);
        let frac = s.points.iter().filter(|p| p.theta() < 0.5).count() as f64 / n as f64;
        let se = (lower_half * (1.0 - lower_half) / n as f64).sqrt();
        assert!((frac - lower_half).abs() < 4.0 * se, "{frac} vs {lower_half}");
        assert!(s.acceptance_rate > 0.0 && s.acceptance_rate <= 1.0);
    }

    #[test]
    fn rejects_bad_initial_density() {
        assert!(InitialMeasure::new(FourierTable::constant(2.0)).is_err());
        let t = FourierTable::constant(1.0).add(&FourierTable::cos(1.5, 1, 0));
        assert!(InitialMeasure::new(t).is_err());
    }

    #[test]
    fn interval_report_deep_tail() {
        let ens = Ensemble {
            checkpoints: vec![4, 16],
            sums: vec![vec![0.1, -0.3, 0.5], vec![0.2, 1.0, -1.0]],
            labels: vec![Some(0); 3],
            samples: 3,
            seed: 0,
            acceptance_rate: 1.0,
        };
        let comps = [Component { c: 1.0, sigma: 1.0 }];
        let r = interval_llt(&ens, -10.0, -9.9, 3.0, &comps).unwrap();
        assert!(r.rows.iter().all(|row| row.lhs < 1e-15));
    }

    #[test]
    fn llt_far_tail_is_zero() {
        let sums = vec![0.0, 1.0, -1.0];
        let comps = [Component { c: 1.0, sigma: 1.0 }];
        let r = llt_from_sums(&sums, 100, &[100.0], 1.0, &comps);
        assert!(r.points[0].lhs == 0.0 && r.points[0].rhs < 1e-20);
    }
}
