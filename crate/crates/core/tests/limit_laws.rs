use std::f64::consts::{PI, TAU};

use svph_core::ergodic_decomp::{decompose, DecomposeParams, ErgodicDecomposition};
use svph_core::limit_laws::{
    center, clt_from_ensemble, green_kubo, green_kubo_orbits, interval_llt, llt_from_sums, simulate_ensemble,
    Component, InitialMeasure, OrbitalParams, DEFAULT_J, MAX_J,
};
use svph_core::transfer_spectral::{assemble, default_nu_grid, spectrum, twisted_curve};
use svph_core::{FourierTable, MapSpec, Observable, OperatorMatrix, SpectralData};

fn doubling() -> MapSpec {
    MapSpec::skew_linear(2, FourierTable::cos(0.1, 1, 0)).unwrap()
}

fn mixing_setup(obs: &Observable, k: usize) -> (OperatorMatrix, SpectralData, ErgodicDecomposition) {
    let spec = doubling();
    let m = assemble(&spec, obs, 0.0, k, 64).unwrap();
    let s = spectrum(&m, 10).unwrap();
    let dec = decompose(&spec, &s, DecomposeParams::new(32, 200, 10_000)).unwrap();
    (m, s, dec)
}

/// `∫₀¹ cos(2πx) cos(2π 2ʲ x) dx` by the midpoint rule on 4096 nodes.
fn quadrature_correlation(j: u32) -> f64 {
    let n = 4096;
    (0..n)
        .map(|i| {
            let x = (i as f64 + 0.5) / n as f64;
            (TAU * x).cos() * (TAU * f64::from(1u32 << j) * x).cos()
        })
        .sum::<f64>()
        / n as f64
}

#[test]
fn green_kubo_matches_quadrature_correlations() {
    let obs = Observable::new(FourierTable::cos(1.0, 1, 0));
    let (m, s, dec) = mixing_setup(&obs, 8);
    let c = center(&obs, &dec).unwrap();
    assert!(c.centered_offsets.as_ref().unwrap()[0].abs() < 1e-10);
    let gk = green_kubo(&m, &c, &dec, 0, DEFAULT_J, s.gap.unwrap()).unwrap();
    for j in 0..=6u32 {
        let oracle = quadrature_correlation(j);
        assert!((gk.correlations[j as usize] - oracle).abs() < 1e-6, "j = {j}");
    }
    assert!((gk.sigma2 - 0.5).abs() < 1e-6, "{}", gk.sigma2);
    assert!(gk.tail_estimate < 1e-6);
    assert!((gk.sigma2_raw - gk.sigma2).abs() < 1e-9);
}

#[test]
fn twisted_curve_agrees_with_green_kubo() {
    let spec = doubling();
    let obs = Observable::new(FourierTable::cos(1.0, 1, 0));
    let curve = twisted_curve(&spec, &obs, &default_nu_grid(0.02), 8, 64, 1).unwrap();
    assert!((curve.sigma2[0] - 0.5).abs() < 1e-2);
    assert!(curve.mu_tau[0].norm() < 1e-8);
}

#[test]
fn zero_and_constant_observables_have_zero_variance() {
    let zero = Observable::new(FourierTable::zero());
    let (m, s, dec) = mixing_setup(&zero, 6);
    let gk = green_kubo(&m, &center(&zero, &dec).unwrap(), &dec, 0, DEFAULT_J, s.gap.unwrap()).unwrap();
    assert_eq!(gk.sigma2, 0.0);

    let five = Observable::new(FourierTable::constant(5.0));
    let c = center(&five, &dec).unwrap();
    assert!((c.centered_offsets.as_ref().unwrap()[0] - 5.0).abs() < 1e-10);
    assert!(c.value(svph_core::TorusPoint::new(0.3, 0.7)).abs() < 1e-10);
    let gk = green_kubo(&m, &c, &dec, 0, DEFAULT_J, s.gap.unwrap()).unwrap();
    assert!(gk.sigma2.abs() < 1e-10);
    assert!((gk.sigma2_raw - 25.0 * (1.0 + 2.0 * DEFAULT_J as f64)).abs() < 1e-6);
}

#[test]
fn coboundaries_are_degenerate() {
    let spec = doubling();
    // Ψ = sin(2πx): Ψ∘F − Ψ = sin(4πx) − sin(2πx) exactly
    let exact = FourierTable::sin(1.0, 2, 0).add(&FourierTable::sin(-1.0, 1, 0));
    let from_helper = spec.coboundary(&FourierTable::sin(1.0, 1, 0), 64, 1e-12);
    let obs = Observable::new(exact.clone());
    assert!(exact.add(&from_helper.scaled(-1.0)).l1_norm() < 1e-10);
    let (m, s, dec) = mixing_setup(&obs, 8);
    let gk = green_kubo(&m, &center(&obs, &dec).unwrap(), &dec, 0, DEFAULT_J, s.gap.unwrap()).unwrap();
    assert!(gk.sigma2.abs() < 1e-3, "{}", gk.sigma2);

    // a fibre-dependent Ψ = cos(2πθ)
    let tau = spec.coboundary(&FourierTable::cos(1.0, 0, 1), 64, 1e-13);
    let obs = Observable::new(tau);
    let (m, s, dec) = mixing_setup(&obs, 12);
    // the fibre mixes slowly (second modulus ≈ 0.91), so the sum needs the long window
    let gk = green_kubo(&m, &center(&obs, &dec).unwrap(), &dec, 0, MAX_J, s.gap.unwrap()).unwrap();
    assert!(gk.sigma2.abs() < 1e-3, "{}", gk.sigma2);
}

#[test]
fn coboundary_clt_collapses_and_flags_degenerate() {
    let spec = doubling();
    let obs = Observable::new(FourierTable::sin(1.0, 2, 0).add(&FourierTable::sin(-1.0, 1, 0)));
    let ens = simulate_ensemble(&spec, &obs, &InitialMeasure::uniform(), &[1024], 5000, 3).unwrap();
    // τ_n = Ψ(F^n p) − Ψ(p) stays bounded by 2
    assert!(ens.sums[0].iter().all(|s| s.abs() <= 2.0 + 1e-9));
    let positive = clt_from_ensemble(&ens, &[Component { c: 1.0, sigma: 0.7 }]);
    assert!(positive.rows[0].ks > 0.4);
    let degenerate = clt_from_ensemble(&ens, &[Component { c: 1.0, sigma: 0.0 }]);
    assert_eq!(degenerate.degenerate, vec![0]);
}

#[test]
fn scale_equivariance() {
    let obs = Observable::new(FourierTable::cos(1.0, 1, 0).add(&FourierTable::sin(0.3, 1, 1)));
    let (m, s, dec) = mixing_setup(&obs, 8);
    let one = green_kubo(&m, &center(&obs, &dec).unwrap(), &dec, 0, DEFAULT_J, s.gap.unwrap()).unwrap();
    let double = obs.scaled(2.0);
    let two = green_kubo(&m, &center(&double, &dec).unwrap(), &dec, 0, DEFAULT_J, s.gap.unwrap()).unwrap();
    assert!((two.sigma2.sqrt() / one.sigma2.sqrt() - 2.0).abs() < 0.02);
}

#[test]
fn lattice_observable_breaks_llt() {
    // sign(cos 2πx) is ±1, so τ_n lives on 2ℤ for even n
    let spec = doubling();
    let obs = Observable::sign_of(FourierTable::cos(1.0, 1, 0));
    let n = 1024;
    let ens = simulate_ensemble(&spec, &obs, &InitialMeasure::uniform(), &[n], 100_000, 5).unwrap();
    assert!(ens.sums[0].iter().all(|s| s.rem_euclid(2.0) == 0.0));
    // digits d₁ = d₂ decide the sign, so the correlations vanish and σ = 1
    let comp = [Component { c: 1.0, sigma: 1.0 }];
    let r = llt_from_sums(&ens.sums[0], n, &[0.0, 0.5, 1.0], 1.0, &comp);
    let at = |z: f64| r.points.iter().find(|p| p.z == z).unwrap();
    assert!(!at(0.0).within_3se);
    assert!(!at(1.0).within_3se);
    // the lattice spacing 2 doubles the mass at even integers
    assert!((at(0.0).lhs / at(0.0).rhs - 2.0).abs() < 0.2);
}

#[test]
fn interval_lhs_shrinks_with_width() {
    let spec = doubling();
    let obs = Observable::new(FourierTable::cos(1.0, 1, 0));
    let ens = simulate_ensemble(&spec, &obs, &InitialMeasure::uniform(), &[256, 512], 40_000, 9).unwrap();
    let comp = [Component { c: 1.0, sigma: 0.5f64.sqrt() }];
    let wide = interval_llt(&ens, 0.0, 0.5, 3.0, &comp).unwrap();
    let narrow = interval_llt(&ens, 0.0, 0.01, 3.0, &comp).unwrap();
    let w = wide.rows.iter().map(|r| r.lhs).fold(0.0, f64::max);
    let nw = narrow.rows.iter().map(|r| r.lhs).fold(0.0, f64::max);
    assert!(nw < w || nw < 3.0 * narrow.rows[0].stderr);
    assert!(narrow.rows[0].predicted < 0.01 / (2.0 * PI * 0.5).sqrt() + 1e-12);
}

#[test]
fn ensembles_are_reproducible_and_prefix_stable() {
    let spec = doubling();
    let obs = Observable::new(FourierTable::cos(1.0, 1, 0));
    let m = InitialMeasure::uniform();
    let a = simulate_ensemble(&spec, &obs, &m, &[16, 64], 2000, 4).unwrap();
    let b = simulate_ensemble(&spec, &obs, &m, &[16, 64], 2000, 4).unwrap();
    assert_eq!(a, b);
    let small = simulate_ensemble(&spec, &obs, &m, &[16, 64], 500, 4).unwrap();
    assert_eq!(a.truncated(500), small);
}

#[test]
fn two_basin_orbit_route_sees_the_invariant_circles() {
    // both circles θ = 0 and θ = 1/2 attract transversally; the physical
    // measures are Lebesgue on each circle
    let spec = MapSpec::skew_linear(2, FourierTable::cos(0.025, 1, -1).add(&FourierTable::cos(-0.025, 1, 1))).unwrap();
    let tau = FourierTable::cos(1.0, 1, 0)
        .add(&FourierTable::cos(0.25, 1, 1))
        .add(&FourierTable::cos(0.25, 1, -1));
    let obs = Observable::new(tau);
    let m = assemble(&spec, &obs, 0.0, 8, 64).unwrap();
    let s = spectrum(&m, 12).unwrap();
    let dec = decompose(&spec, &s, DecomposeParams::new(128, 1500, 500)).unwrap();
    assert_eq!(dec.ell, 2);
    let c = center(&obs, &dec).unwrap();
    let params = OrbitalParams {
        orbits: 128,
        ..OrbitalParams::default()
    };
    let gk = green_kubo_orbits(&spec, &c, &dec, DEFAULT_J, s.gap.unwrap(), params).unwrap();
    // on θ = 0 the observable is 1.5 cos(2πx), on θ = 1/2 it is 0.5 cos(2πx)
    let mut got: Vec<(f64, f64)> = dec
        .cluster_theta_mode
        .iter()
        .zip(&gk)
        .map(|(t, g)| (*t, g.sigma2))
        .collect();
    got.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!((got[0].1 - 1.125).abs() < 0.03, "{got:?}");
    assert!((got[1].1 - 0.125).abs() < 0.01, "{got:?}");

    // τ = cos(2πθ): orbit means are ±1, spectral means follow ρ_k
    let cos_theta = Observable::new(FourierTable::cos(1.0, 0, 1));
    let spectral = center(&cos_theta, &dec).unwrap();
    let offsets = spectral.centered_offsets.unwrap();
    let v = cos_theta.coeffs.to_vector(&dec.basis);
    let g = 64;
    let vals = svph_core::ergodic_decomp::cell_values(&v, &dec.basis, g);
    for k in 0..2 {
        let rho = svph_core::ergodic_decomp::cell_values(&dec.rho[k], &dec.basis, g);
        let num: f64 = vals.iter().zip(&rho).map(|(a, b)| a * b).sum();
        let den: f64 = rho.iter().sum();
        assert!((num / den - offsets[k]).abs() < 1e-6);
    }
    let orbital = green_kubo_orbits(&spec, &cos_theta, &dec, 4, 0.9, params).unwrap();
    for (k, g) in orbital.iter().enumerate() {
        let expected = if dec.cluster_theta_mode[k] == 0.0 { 1.0 } else { -1.0 };
        assert!((g.offset - expected).abs() < 0.02, "{k}: {}", g.offset);
    }
}
