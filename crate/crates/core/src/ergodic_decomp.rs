//! Ergodic decomposition: the invariant densities `ρ_k`, their dual basin
//! functionals, the basin labelling of the torus, and the CLT weights.
//!
//! Basins come from orbit statistics. Every cell of a `G × G` grid is
//! iterated, the empirical `x`- and `θ`-marginals of the orbit are binned,
//! and the histograms are clustered. The densities are the spectral
//! projections of the basin indicators onto the eigenvalue-1 cluster.

use std::f64::consts::TAU;

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvphError};
use crate::fourier::{FftPlan, ModeBasis, C64};
use crate::observable::{BasinGrid, BasinLabel};
use crate::simulation::{stream_rng, Walker};
use crate::torus_maps::{MapSpec, TorusPoint};
use crate::transfer_spectral::SpectralData;

/// Bins per marginal histogram.
pub const HIST_BINS: usize = 8;
/// L¹ distance below which two orbit histograms belong to the same basin.
pub const CLUSTER_THRESHOLD: f64 = 0.2;
/// Clusters holding fewer cells than this fraction are discarded.
pub const MIN_CLUSTER_FRACTION: f64 = 0.005;
/// Negativity (relative to the mean) tolerated without error in strict mode.
pub const NEGATIVITY_TOL: f64 = 1e-3;
/// `|c_k − basin mass|` tolerance for [`clt_weights`].
pub const WEIGHT_TOL: f64 = 1e-3;
/// Default seed for orbit clustering.
pub const DEFAULT_SEED: u64 = 0x0b17;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecomposeParams {
    pub grid: usize,
    pub burn: usize,
    pub orbit_len: usize,
    pub seed: u64,
    /// Raise `DensityNegative` instead of reporting the negativity.
    pub strict: bool,
}

impl DecomposeParams {
    pub fn new(grid: usize, burn: usize, orbit_len: usize) -> Self {
        Self {
            grid,
            burn,
            orbit_len,
            seed: DEFAULT_SEED,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErgodicDecomposition {
    pub ell: usize,
    pub basis: ModeBasis,
    /// Invariant densities, `𝔪(ρ_k) = μ_*(E_k)`.
    pub rho: Vec<Vec<C64>>,
    /// Dual functionals: `μ_k(f) = Σ_m conj(mu[k]_m) f_m`, with
    /// `μ_k(ρ_j) = δ_kj`.
    pub mu: Vec<Vec<C64>>,
    pub basins: BasinGrid,
    /// Fraction of grid cells in each basin.
    pub mass: Vec<f64>,
    pub coverage: f64,
    /// `𝔪(ρ_k)`.
    pub rho_mass: Vec<f64>,
    /// `μ_k(1)`, the scale left after enforcing biorthogonality.
    pub mu_of_one: Vec<f64>,
    pub biorthogonality_error: f64,
    /// `max(0, −min ρ_k) / 𝔪(ρ_k)` on the evaluation grid.
    pub negativity: Vec<f64>,
    /// `𝔪(|ρ_k||ρ_j|)` normalized by the masses, largest over `k ≠ j`.
    pub support_overlap: f64,
    pub unit_eigenvalues: Vec<C64>,
    pub peripheral_extras: Vec<C64>,
    pub roots_of_unity_ok: bool,
    /// Mean `θ` and `x` of each cluster's histogram centroid.
    pub cluster_theta_mode: Vec<f64>,
    /// Mean orbit histogram of each cluster (`x` bins then `θ` bins).
    pub centroids: Vec<Vec<f64>>,
    pub params: DecomposeParams,
}

fn bin(v: f64) -> usize {
    (((v + 0.5 / HIST_BINS as f64) * HIST_BINS as f64).floor() as usize) % HIST_BINS
}

type Hist = [f64; 2 * HIST_BINS];

fn distance(a: &Hist, b: &Hist) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Histogram of the orbit of a uniformly random point of cell `cell`.
fn orbit_histogram(spec: &MapSpec, g: usize, burn: usize, len: usize, seed: u64, cell: usize) -> Hist {
    let mut rng = stream_rng(seed, cell as u64);
    let (u, v): (f64, f64) = (rng.random(), rng.random());
    let start = TorusPoint::new(((cell / g) as f64 + u) / g as f64, ((cell % g) as f64 + v) / g as f64);
    let mut w = Walker::new(spec, start, rng);
    for _ in 0..burn {
        w.step();
    }
    let mut h = [0.0; 2 * HIST_BINS];
    for _ in 0..len {
        let p = w.point();
        h[bin(p.x())] += 1.0;
        h[HIST_BINS + bin(p.theta())] += 1.0;
        w.step();
    }
    h.iter_mut().for_each(|v| *v /= len as f64);
    h
}

/// Labels grid cells by clustering orbit histograms. Returns the labels
/// and the centroid histograms.
pub fn cluster_orbits(spec: &MapSpec, params: &DecomposeParams) -> (Vec<BasinLabel>, Vec<Hist>) {
    let g = params.grid;
    let hists: Vec<Hist> = (0..g * g)
        .into_par_iter()
        .map(|c| orbit_histogram(spec, g, params.burn, params.orbit_len, params.seed, c))
        .collect();

    // leader pass
    let mut leaders: Vec<Hist> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (c, h) in hists.iter().enumerate() {
        let nearest = leaders
            .iter()
            .enumerate()
            .map(|(i, l)| (i, distance(h, l)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match nearest {
            Some((i, d)) if d < CLUSTER_THRESHOLD => members[i].push(c),
            _ => {
                leaders.push(*h);
                members.push(vec![c]);
            }
        }
    }
    // merge leaders whose member centroids are close
    let centroid = |m: &[usize]| {
        let mut acc = [0.0; 2 * HIST_BINS];
        for &c in m {
            for (a, v) in acc.iter_mut().zip(&hists[c]) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= m.len() as f64);
        acc
    };
    loop {
        let cents: Vec<Hist> = members.iter().map(|m| centroid(m)).collect();
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..cents.len() {
            for j in i + 1..cents.len() {
                let d = distance(&cents[i], &cents[j]);
                if d < CLUSTER_THRESHOLD && best.is_none_or(|b| d < b.2) {
                    best = Some((i, j, d));
                }
            }
        }
        match best {
            Some((i, j, _)) => {
                let moved = members.remove(j);
                members[i].extend(moved);
            }
            None => break,
        }
    }
    let min_size = (MIN_CLUSTER_FRACTION * (g * g) as f64).ceil() as usize;
    let centroids: Vec<Hist> = members
        .iter()
        .filter(|m| m.len() >= min_size.max(1))
        .map(|m| centroid(m))
        .collect();

    let labels = hists
        .par_iter()
        .map(|h| {
            centroids
                .iter()
                .enumerate()
                .map(|(i, c)| (i, distance(h, c)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .filter(|(_, d)| *d < CLUSTER_THRESHOLD)
                .map(|(i, _)| i as u16)
        })
        .collect();
    (labels, centroids)
}

/// Truncated Fourier coefficients of the indicator of cells labelled `k`.
fn indicator_coefficients(labels: &[BasinLabel], g: usize, k: u16, basis: &ModeBasis) -> Vec<C64> {
    let mut data: Vec<C64> = labels
        .iter()
        .map(|l| if *l == Some(k) { C64::new(1.0, 0.0) } else { C64::default() })
        .collect();
    FftPlan::new(g).forward(&mut data);
    let gi = g as i32;
    basis
        .modes()
        .map(|(m1, m2)| {
            if m1.abs() * 2 >= gi || m2.abs() * 2 >= gi {
                return C64::default();
            }
            let c = data[(m1.rem_euclid(gi) * gi + m2.rem_euclid(gi)) as usize];
            // samples sit at cell centres
            c * C64::from_polar(1.0, -TAU * f64::from(m1 + m2) * 0.5 / g as f64)
        })
        .collect()
}

fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn symmetrize(v: &mut [C64], basis: &ModeBasis) {
    let rev = basis.reversal();
    let orig = v.to_vec();
    for (i, c) in v.iter_mut().enumerate() {
        *c = 0.5 * (orig[i] + orig[rev[i]].conj());
    }
}

fn small_inverse(m: &[Vec<C64>]) -> Mat<C64> {
    let k = m.len();
    Mat::from_fn(k, k, |i, j| m[i][j]).full_piv_lu().inverse()
}

/// Values of a coefficient vector at the centres of a `g × g` grid.
pub fn cell_values(v: &[C64], basis: &ModeBasis, g: usize) -> Vec<f64> {
    let shifted: Vec<C64> = v
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (m1, m2) = basis.mode(i);
            c * C64::from_polar(1.0, TAU * f64::from(m1 + m2) * 0.5 / g as f64)
        })
        .collect();
    basis.grid_values(&shifted, g)
}

/// Splits the eigenvalue-1 cluster of `spectral` into ergodic components.
pub fn decompose(spec: &MapSpec, spectral: &SpectralData, params: DecomposeParams) -> Result<ErgodicDecomposition> {
    let basis = spectral.basis;
    if spectral.nu != 0.0 {
        return Err(SvphError::Precondition("decomposition needs the untwisted spectrum".into()));
    }
    if spectral.eigenvalues.len() <= spectral.peripheral_count {
        return Err(SvphError::Precondition(
            "spectrum must include at least one sub-peripheral eigenvalue".into(),
        ));
    }
    if params.grid < basis.side() || params.orbit_len == 0 {
        return Err(SvphError::Precondition(format!(
            "grid must be >= 2K+1 = {} and orbit_len positive",
            basis.side()
        )));
    }
    let unit = spectral.unit_indices();
    let ell = unit.len();
    if ell == 0 {
        return Err(SvphError::DecompositionInconsistent {
            spectral: 0,
            clusters: 0,
        });
    }

    let (labels, centroids) = cluster_orbits(spec, &params);
    if centroids.len() != ell {
        return Err(SvphError::DecompositionInconsistent {
            spectral: ell,
            clusters: centroids.len(),
        });
    }
    let g = params.grid;
    let basins = BasinGrid::new(g, labels.clone())?;

    // spectral projector P = V (WᴴV)⁻¹ Wᴴ on the unit cluster
    let v: Vec<&Vec<C64>> = unit.iter().map(|&i| &spectral.right_vectors[i]).collect();
    let w: Vec<&Vec<C64>> = unit.iter().map(|&i| &spectral.left_vectors[i]).collect();
    let s: Vec<Vec<C64>> = (0..ell).map(|i| (0..ell).map(|j| inner(w[i], v[j])).collect()).collect();
    let sinv = small_inverse(&s);
    let project = |f: &[C64]| -> Vec<C64> {
        let wf: Vec<C64> = w.iter().map(|wi| inner(wi, f)).collect();
        let coef: Vec<C64> = (0..ell).map(|i| (0..ell).map(|j| sinv[(i, j)] * wf[j]).sum()).collect();
        let mut out = vec![C64::default(); f.len()];
        for (c, vi) in coef.iter().zip(&v) {
            for (o, x) in out.iter_mut().zip(vi.iter()) {
                *o += c * x;
            }
        }
        out
    };

    let z = basis.zero_index();
    let mut rho = Vec::with_capacity(ell);
    for k in 0..ell {
        let seed = indicator_coefficients(&labels, g, k as u16, &basis);
        let mut r = project(&seed);
        symmetrize(&mut r, &basis);
        rho.push(r);
    }
    let rho_mass: Vec<f64> = rho.iter().map(|r| r[z].re).collect();

    // dual functionals H = W (WᴴR)^{-H}
    let wr: Vec<Vec<C64>> = (0..ell).map(|i| (0..ell).map(|j| inner(w[i], &rho[j])).collect()).collect();
    let wr_inv = small_inverse(&wr);
    let mu: Vec<Vec<C64>> = (0..ell)
        .map(|k| {
            let mut h = vec![C64::default(); basis.dim()];
            for i in 0..ell {
                let c = wr_inv[(k, i)].conj();
                for (o, x) in h.iter_mut().zip(w[i].iter()) {
                    *o += x * c;
                }
            }
            h
        })
        .collect();
    let mut biorthogonality_error: f64 = 0.0;
    for k in 0..ell {
        for j in 0..ell {
            let target = if k == j { 1.0 } else { 0.0 };
            biorthogonality_error = biorthogonality_error.max((inner(&mu[k], &rho[j]) - target).norm());
        }
    }
    let mu_of_one: Vec<f64> = mu.iter().map(|h| h[z].conj().re).collect();

    let eval_grid = (4 * basis.side()).next_power_of_two().max(64);
    let values: Vec<Vec<f64>> = rho.iter().map(|r| basis.grid_values(r, eval_grid)).collect();
    let mut negativity = Vec::with_capacity(ell);
    for (k, vals) in values.iter().enumerate() {
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let neg = (-min).max(0.0) / rho_mass[k].abs().max(f64::MIN_POSITIVE);
        if params.strict && neg > NEGATIVITY_TOL {
            return Err(SvphError::DensityNegative {
                index: k,
                negativity: neg,
            });
        }
        negativity.push(neg);
    }
    let mut support_overlap: f64 = 0.0;
    for k in 0..ell {
        for j in k + 1..ell {
            let o = values[k]
                .iter()
                .zip(&values[j])
                .map(|(a, b)| a.abs() * b.abs())
                .sum::<f64>()
                / values[k].len() as f64;
            support_overlap = support_overlap.max(o / (rho_mass[k] * rho_mass[j]).abs().max(f64::MIN_POSITIVE));
        }
    }

    let mass: Vec<f64> = (0..ell).map(|k| basins.mass(k as u16)).collect();
    let unit_eigenvalues: Vec<C64> = unit.iter().map(|&i| spectral.eigenvalues[i]).collect();
    let peripheral_extras: Vec<C64> = spectral
        .eigenvalues
        .iter()
        .filter(|l| l.norm() > 1.0 - spectral.gap_tol && (*l - 1.0).norm() >= spectral.gap_tol)
        .copied()
        .collect();
    let roots_of_unity_ok = peripheral_extras
        .iter()
        .all(|l| (1..=24).any(|p| (l.powu(p) - 1.0).norm() < 1e-3));
    let cluster_theta_mode = centroids
        .iter()
        .map(|c| {
            let (b, _) = c[HIST_BINS..]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty histogram");
            b as f64 / HIST_BINS as f64
        })
        .collect();

    Ok(ErgodicDecomposition {
        ell,
        basis,
        rho,
        mu,
        coverage: basins.coverage(),
        basins,
        mass,
        rho_mass,
        mu_of_one,
        biorthogonality_error,
        negativity,
        support_overlap,
        unit_eigenvalues,
        peripheral_extras,
        roots_of_unity_ok,
        cluster_theta_mode,
        centroids: centroids.iter().map(|c| c.to_vec()).collect(),
        params,
    })
}

/// Adds `p` to a `2 · HIST_BINS` orbit histogram.
#[inline]
pub fn histogram_add(h: &mut [f64], p: TorusPoint) {
    h[bin(p.x())] += 1.0;
    h[HIST_BINS + bin(p.theta())] += 1.0;
}

impl ErgodicDecomposition {
    /// Cluster of a normalised orbit histogram, if one lies within
    /// `CLUSTER_THRESHOLD`.
    pub fn classify_histogram(&self, h: &[f64]) -> BasinLabel {
        self.centroids
            .iter()
            .enumerate()
            .map(|(i, c)| (i, 0.5 * c.iter().zip(h).map(|(a, b)| (a - b).abs()).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .filter(|(_, d)| *d < CLUSTER_THRESHOLD)
            .map(|(i, _)| i as u16)
    }

    /// `μ_k(f)` through the dual functional.
    pub fn functional(&self, k: usize, f: &[C64]) -> f64 {
        inner(&self.mu[k], f).re
    }

    /// Mean of `f` under the physical measure `ρ_k 𝔪 / 𝔪(ρ_k)`.
    pub fn physical_mean(&self, k: usize, f: &[C64]) -> f64 {
        self.basis.pairing(f, &self.rho[k]).re / self.rho_mass[k]
    }

    /// `𝔪(f 1_{D_j})` by quadrature over the basin cells.
    pub fn basin_integrals(&self, f: &[C64]) -> Vec<f64> {
        let g = self.basins.size();
        let vals = cell_values(f, &self.basis, g);
        let mut out = vec![0.0; self.ell];
        for (v, l) in vals.iter().zip(self.basins.labels()) {
            if let Some(k) = l {
                out[*k as usize] += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= (g * g) as f64);
        out
    }
}

/// `Π f = Σ_j 𝔪(f 1_{D_j}) ρ_j / μ_*(E_j)` with basin quadrature.
pub fn project(f: &[C64], dec: &ErgodicDecomposition) -> Vec<C64> {
    let weights = dec.basin_integrals(f);
    combine(dec, weights.iter().enumerate().map(|(j, w)| w / dec.rho_mass[j]))
}

/// `Π f = Σ_j μ_j(f) ρ_j` through the dual functionals.
pub fn project_spectral(f: &[C64], dec: &ErgodicDecomposition) -> Vec<C64> {
    combine(dec, (0..dec.ell).map(|j| dec.functional(j, f)))
}

fn combine(dec: &ErgodicDecomposition, coef: impl Iterator<Item = f64>) -> Vec<C64> {
    let mut out = vec![C64::default(); dec.basis.dim()];
    for (c, r) in coef.zip(&dec.rho) {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x * c;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltWeights {
    /// `c_k = 𝔪(ρ_k) μ_k(f_m)`.
    pub c: Vec<f64>,
    /// `𝔪(f_m 1_{D_k})` by basin counting.
    pub basin_mass: Vec<f64>,
    pub max_mismatch: f64,
}

/// CLT weights of the initial density `f_m`, cross-checked against the
/// basin masses.
pub fn clt_weights(dec: &ErgodicDecomposition, f_m: &[C64]) -> Result<CltWeights> {
    let z = dec.basis.zero_index();
    if (f_m[z] - 1.0).norm() > 1e-8 {
        return Err(SvphError::Precondition(format!("f_m must have unit mass, got {}", f_m[z])));
    }
    let vals = dec.basis.grid_values(f_m, 64.max(dec.basis.side()));
    if vals.iter().any(|v| *v < -1e-9) {
        return Err(SvphError::Precondition("f_m must be non-negative".into()));
    }
    let c: Vec<f64> = (0..dec.ell)
        .map(|k| dec.rho_mass[k] * dec.functional(k, f_m))
        .collect();
    let basin_mass = dec.basin_integrals(f_m);
    let mut max_mismatch: f64 = 0.0;
    for k in 0..dec.ell {
        let d = (c[k] - basin_mass[k]).abs();
        max_mismatch = max_mismatch.max(d);
        if d > WEIGHT_TOL {
            return Err(SvphError::WeightMismatch {
                index: k,
                weight: c[k],
                basin_mass: basin_mass[k],
            });
        }
    }
    Ok(CltWeights {
        c,
        basin_mass,
        max_mismatch,
    })
}

/// Uniform initial density as a coefficient vector.
pub fn lebesgue(basis: &ModeBasis) -> Vec<C64> {
    let mut v = vec![C64::default(); basis.dim()];
    v[basis.zero_index()] = C64::new(1.0, 0.0);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::FourierTable;
    use crate::observable::Observable;
    use crate::transfer_spectral::{assemble, spectrum};

    fn mixing_dec() -> ErgodicDecomposition {
        let spec = MapSpec::skew_linear(2, FourierTable::cos(0.1, 1, 0)).unwrap();
        let m = assemble(&spec, &Observable::new(FourierTable::zero()), 0.0, 6, 32).unwrap();
        let s = spectrum(&m, 6).unwrap();
        decompose(&spec, &s, DecomposeParams::new(32, 200, 10_000)).unwrap()
    }

    #[test]
    fn histogram_bins_are_centred() {
        assert_eq!(bin(0.0), 0);
        assert_eq!(bin(0.99), 0);
        assert_eq!(bin(0.06), 0);
        assert_eq!(bin(0.07), 1);
        assert_eq!(bin(0.5), 4);
    }

    #[test]
    fn mixing_map_has_one_lebesgue_component() {
        let d = mixing_dec();
        assert_eq!(d.ell, 1);
        assert_eq!(d.coverage, 1.0);
        assert!((d.rho_mass[0] - 1.0).abs() < 1e-12);
        let z = d.basis.zero_index();
        for (i, c) in d.rho[0].iter().enumerate() {
            let expect = if i == z { 1.0 } else { 0.0 };
            assert!((c - expect).norm() < 1e-8);
        }
        assert!(d.biorthogonality_error < 1e-10);
        assert!((d.mu_of_one[0] - 1.0).abs() < 1e-8);
        assert!(d.negativity[0] < 1e-6);
    }

    #[test]
    fn projection_properties() {
        let d = mixing_dec();
        let one = lebesgue(&d.basis);
        let p1 = project(&one, &d);
        assert!((p1[d.basis.zero_index()].re - 1.0).abs() < 1e-10);
        let f: Vec<C64> = FourierTable::cos(0.3, 1, 2)
            .add(&FourierTable::constant(0.7))
            .to_vector(&d.basis);
        let pf = project(&f, &d);
        let ppf = project(&pf, &d);
        assert!(pf.iter().zip(&ppf).all(|(a, b)| (a - b).norm() < 1e-6));
        let rho = d.rho[0].clone();
        let pr = project_spectral(&rho, &d);
        assert!(pr.iter().zip(&rho).all(|(a, b)| (a - b).norm() < 1e-10));
    }

    #[test]
    fn weights_for_uniform_start() {
        let d = mixing_dec();
        let w = clt_weights(&d, &lebesgue(&d.basis)).unwrap();
        assert!((w.c[0] - 1.0).abs() < 1e-8);
        assert!(w.max_mismatch < 1e-8);
        let mut bad = lebesgue(&d.basis);
        bad[d.basis.zero_index()] = C64::new(2.0, 0.0);
        assert!(clt_weights(&d, &bad).is_err());
    }

    #[test]
    fn product_map_is_flagged() {
        let spec = MapSpec::skew_linear(2, FourierTable::zero()).unwrap();
        let m = assemble(&spec, &Observable::new(FourierTable::zero()), 0.0, 4, 32).unwrap();
        let s = spectrum(&m, 12).unwrap();
        let e = decompose(&spec, &s, DecomposeParams::new(32, 100, 500));
        assert!(matches!(e, Err(SvphError::DecompositionInconsistent { spectral: 9, .. })));
    }
}
