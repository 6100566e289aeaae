//! Experiment configuration, the end-to-end pipeline and report writers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ergodic_decomp::{
    clt_weights, decompose, CltWeights, DecomposeParams, ErgodicDecomposition, DEFAULT_SEED, NEGATIVITY_TOL,
};
use crate::error::{Result, SvphError};
use crate::fourier::{FourierTable, C64};
use crate::hyperbolicity::{a6_rate, check_a1_a5, check_cones, ConeParams, ConeReport, DeterminantAudit, TransversalityReport};
use crate::limit_laws::{
    berry_esseen_fit, best_single_gaussian, center, clt_from_ensemble, green_kubo, interval_llt, ks_distance,
    llt_from_sums, mixture_cdf, simulate_ensemble, BerryEsseenFit, CltReport, Component, Ensemble, GreenKubo,
    InitialMeasure, IntervalLltReport, LltReport, OrbitalParams, DEFAULT_J, green_kubo_orbits,
};
use crate::observable::Observable;
use crate::torus_maps::MapSpec;
use crate::transfer_spectral::{
    assemble, default_nu_grid, mode_table, spectrum, twisted_curve, SolverMethod, SpectralData, TwistedCurve,
    DEFAULT_STEP,
};

/// An inline value or a path to a JSON file holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Inline(T),
    File(PathBuf),
}

impl<T: serde::de::DeserializeOwned + Clone> Source<T> {
    pub fn load(&self, base: Option<&Path>) -> Result<T> {
        match self {
            Source::Inline(v) => Ok(v.clone()),
            Source::File(p) => {
                let path = resolve(p, base);
                let text = fs::read_to_string(&path)?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }
}

fn resolve(p: &Path, base: Option<&Path>) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

/// Initial measure: `"uniform"` or a density table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitConfig {
    #[default]
    Uniform,
    Density(FourierTable),
}

impl InitConfig {
    pub fn measure(&self) -> Result<InitialMeasure> {
        match self {
            InitConfig::Uniform => Ok(InitialMeasure::uniform()),
            InitConfig::Density(t) => InitialMeasure::new(t.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub grid: usize,
    pub n_max: usize,
    pub transversality_n: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    pub grid: usize,
    pub burn: usize,
    pub orbit_len: usize,
    #[serde(default = "default_dec_seed")]
    pub seed: u64,
}

fn default_dec_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    #[serde(rename = "J")]
    pub j: usize,
    pub twist_step: f64,
    #[serde(default)]
    pub orbital: OrbitalParams,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            j: DEFAULT_J,
            twist_step: DEFAULT_STEP,
            orbital: OrbitalParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub n_list: Vec<usize>,
    #[serde(rename = "N")]
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LltConfig {
    pub width: f64,
    pub z_grid: Vec<f64>,
    pub n: usize,
    #[serde(rename = "N")]
    pub samples: usize,
    pub delta: f64,
    pub intervals: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub map: Source<MapSpec>,
    pub observable: Source<Observable>,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub cones: ConeParams,
    pub check: CheckConfig,
    pub spectral: SpectralConfig,
    pub decomposition: DecompositionConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    pub montecarlo: MonteCarloConfig,
    pub llt: LltConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Named benchmark configurations.
pub const PRESETS: [&str; 3] = ["doubling_skew", "two_basin", "fast_slow"];

fn geometric(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|k| 1usize << k).collect()
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let cos_x = FourierTable::cos(1.0, 1, 0);
        let (map, obs, dec) = match name {
            "doubling_skew" => (
                MapSpec::skew_linear(2, FourierTable::cos(0.1, 1, 0))?,
                Observable::new(cos_x),
                DecompositionConfig {
                    grid: 32,
                    burn: 200,
                    orbit_len: 10_000,
                    seed: DEFAULT_SEED,
                },
            ),
            "two_basin" => {
                // 0.05 sin(2πx) sin(2πθ) and cos(2πx)(1 + 0.5 cos(2πθ))
                let omega = FourierTable::cos(0.025, 1, -1).add(&FourierTable::cos(-0.025, 1, 1));
                let tau = cos_x
                    .add(&FourierTable::cos(0.25, 1, 1))
                    .add(&FourierTable::cos(0.25, 1, -1));
                (
                    MapSpec::skew_linear(2, omega)?,
                    Observable::new(tau),
                    DecompositionConfig {
                        grid: 128,
                        burn: 1500,
                        orbit_len: 500,
                        seed: DEFAULT_SEED,
                    },
                )
            }
            "fast_slow" => (
                MapSpec::fast_slow(3, FourierTable::sin(0.05, 1, 1), FourierTable::cos(1.0, 1, 0), 0.1)?,
                Observable::new(cos_x),
                DecompositionConfig {
                    grid: 32,
                    burn: 200,
                    orbit_len: 10_000,
                    seed: DEFAULT_SEED,
                },
            ),
            other => {
                return Err(SvphError::Validation(vec![format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESETS.join(", ")
                )]))
            }
        };
        // the general-base walker is several times slower per step
        let mc_samples = if name == "fast_slow" { 20_000 } else { 100_000 };
        Ok(Self {
            name: name.to_string(),
            map: Source::Inline(map),
            observable: Source::Inline(obs),
            init: InitConfig::Uniform,
            cones: ConeParams::default(),
            check: CheckConfig {
                grid: 64,
                n_max: 8,
                transversality_n: vec![2, 4, 6, 8],
                samples: 16,
                seed: 11,
            },
            spectral: SpectralConfig { k: 8, q: 64, count: 12 },
            decomposition: dec,
            diffusion: DiffusionConfig::default(),
            montecarlo: MonteCarloConfig {
                n_list: geometric(6, 12),
                samples: mc_samples,
                seed: 7,
            },
            llt: LltConfig {
                width: 1.0,
                z_grid: vec![-60.0, -30.0, -10.0, 0.0, 10.0, 30.0, 60.0],
                n: 4096,
                samples: mc_samples,
                delta: 3.0,
                intervals: vec![[0.0, 0.1], [-10.0, -9.9]],
            },
            output: OutputConfig::default(),
        })
    }

    /// Reads a config file; relative `map`/`observable` paths resolve
    /// against the file's directory.
    pub fn from_file(path: &Path) -> Result<(Self, Option<PathBuf>)> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok((cfg, path.parent().map(Path::to_path_buf)))
    }

    /// Every offending field, or `Ok` when the config can run.
    pub fn validate(&self, base: Option<&Path>) -> Result<()> {
        let mut p = Vec::new();
        for (field, src) in [("map", source_path(&self.map)), ("observable", source_path(&self.observable))] {
            if let Some(path) = src {
                if !resolve(path, base).is_file() {
                    p.push(format!("{field}: file {} does not exist", path.display()));
                }
            }
        }
        if let Err(e) = self.cones.validate() {
            p.push(format!("cones: {e}"));
        }
        if let Err(e) = self.init.measure() {
            p.push(format!("init: {e}"));
        }
        let c = &self.check;
        if c.grid < 16 {
            p.push("check.grid must be >= 16".into());
        }
        if c.n_max == 0 {
            p.push("check.n_max must be positive".into());
        }
        if !increasing(&c.transversality_n) {
            p.push("check.transversality_n must be positive and increasing".into());
        }
        if c.samples == 0 {
            p.push("check.samples must be positive".into());
        }
        let s = &self.spectral;
        if s.k == 0 {
            p.push("spectral.K must be positive".into());
        }
        if !s.q.is_power_of_two() || s.q < 2 * (2 * s.k + 1) {
            p.push(format!("spectral.Q must be a power of two >= {}", 2 * (2 * s.k + 1)));
        }
        if s.count < 2 {
            p.push("spectral.count must be >= 2".into());
        }
        let d = &self.decomposition;
        if d.grid < 2 * s.k + 1 {
            p.push(format!("decomposition.grid must be >= 2K+1 = {}", 2 * s.k + 1));
        }
        if d.orbit_len == 0 {
            p.push("decomposition.orbit_len must be positive".into());
        }
        if self.diffusion.j == 0 || self.diffusion.j > crate::limit_laws::MAX_J {
            p.push(format!("diffusion.J must lie in 1..={}", crate::limit_laws::MAX_J));
        }
        if !(self.diffusion.twist_step > 0.0 && self.diffusion.twist_step <= 0.05) {
            p.push("diffusion.twist_step must lie in (0, 0.05]".into());
        }
        let m = &self.montecarlo;
        if !increasing(&m.n_list) {
            p.push("montecarlo.n_list must be positive and increasing".into());
        }
        if m.samples == 0 {
            p.push("montecarlo.N must be positive".into());
        }
        let l = &self.llt;
        if !(l.width > 0.0) {
            p.push("llt.width must be positive".into());
        }
        if l.z_grid.is_empty() {
            p.push("llt.z_grid must not be empty".into());
        }
        if l.n == 0 || l.samples == 0 {
            p.push("llt.n and llt.N must be positive".into());
        }
        if !(l.delta > 2.0) {
            p.push("llt.delta must exceed 2".into());
        }
        for [a, b] in &l.intervals {
            if !(b > a && b - a < 1.0) {
                p.push(format!("llt.intervals: [{a}, {b}] needs 0 < b-a < 1"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(SvphError::Validation(p))
        }
    }
}

fn source_path<T>(s: &Source<T>) -> Option<&Path> {
    match s {
        Source::File(p) => Some(p),
        Source::Inline(_) => None,
    }
}

fn increasing(v: &[usize]) -> bool {
    !v.is_empty() && v[0] > 0 && v.windows(2).all(|w| w[0] < w[1])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckOutput {
    pub audit: Option<DeterminantAudit>,
    pub cones: Option<ConeReport>,
    pub transversality: Option<TransversalityReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumOutput {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    pub nu: f64,
    pub eigenvalues: Vec<C64>,
    pub moduli: Vec<f64>,
    pub peripheral_count: usize,
    pub unit_count: usize,
    pub gap: Option<f64>,
    pub residuals: Vec<f64>,
    pub method: SolverMethod,
    pub biorthogonal: bool,
    /// `max_k |M_{0,k} − δ_{0,k}|`.
    pub mass_row_error: f64,
    pub max_modulus: f64,
    /// Right eigenvectors of the peripheral eigenvalues as `[m1, m2, re, im]`.
    pub peripheral_vectors: Vec<Vec<[f64; 4]>>,
    pub map_hash: String,
    pub obs_hash: String,
}

impl SpectrumOutput {
    pub fn new(s: &SpectralData, q: usize, mass_row_error: f64) -> Self {
        Self {
            k: s.basis.cutoff,
            q,
            nu: s.nu,
            eigenvalues: s.eigenvalues.clone(),
            moduli: s.eigenvalues.iter().map(|l| l.norm()).collect(),
            peripheral_count: s.peripheral_count,
            unit_count: s.unit_count,
            gap: s.gap,
            residuals: s.residuals.clone(),
            method: s.method,
            biorthogonal: s.biorthogonal,
            mass_row_error,
            max_modulus: s.max_modulus(),
            peripheral_vectors: (0..s.peripheral_count)
                .map(|i| mode_table(&s.right_vectors[i], &s.basis, 1e-10))
                .collect(),
            map_hash: s.map_hash.clone(),
            obs_hash: s.obs_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub k: usize,
    /// Spectral Green–Kubo `σ_k²`.
    pub green_kubo: f64,
    /// Orbit-average Green–Kubo `σ_k²`, computed when the spectral
    /// densities are not genuine densities.
    pub orbital: Option<f64>,
    pub twisted: Option<f64>,
    /// `|green_kubo − twisted|`.
    pub abs_diff: Option<f64>,
    /// The `σ_k²` passed to the limit laws and the operation producing it.
    pub selected: f64,
    pub route: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionOutput {
    pub offsets: Vec<f64>,
    pub green_kubo: Vec<GreenKubo>,
    pub green_kubo_orbits: Vec<GreenKubo>,
    /// Leading branches of the twisted operator. With several acips the
    /// branches are not attributed to individual basins.
    pub twisted: Option<TwistedCurve>,
    pub sigma: Vec<SigmaEstimate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltOutput {
    pub weights: Option<CltWeights>,
    pub c: Vec<f64>,
    pub sample_fractions: Vec<f64>,
    pub report: CltReport,
    pub be_fit: Option<BerryEsseenFit>,
    pub n_max: usize,
    pub ks_mixture: f64,
    pub ks_best_single: f64,
    pub best_single_sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LltOutput {
    pub report: LltReport,
    pub intervals: Vec<IntervalLltReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub validation: bool,
    pub message: String,
}

/// A summary number with the operation that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: serde_json::Value,
    pub producer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub producer: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub ell: Option<usize>,
    pub c: Vec<f64>,
    pub sigma: Vec<f64>,
    pub metrics: Vec<Metric>,
    pub checks: Vec<Check>,
    pub errors: Vec<StageError>,
}

impl Summary {
    pub fn all_pass(&self) -> bool {
        self.errors.is_empty() && self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportBundle {
    pub config: ExperimentConfig,
    pub check: Option<CheckOutput>,
    pub spectrum: Option<SpectrumOutput>,
    pub decomposition: Option<ErgodicDecomposition>,
    pub diffusion: Option<DiffusionOutput>,
    pub clt: Option<CltOutput>,
    pub llt: Option<LltOutput>,
    pub summary: Summary,
}

struct Recorder {
    errors: Vec<StageError>,
    metrics: Vec<Metric>,
    checks: Vec<Check>,
}

impl Recorder {
    fn take<T>(&mut self, stage: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(StageError {
                    stage: stage.to_string(),
                    validation: e.is_validation(),
                    message: e.to_string(),
                });
                None
            }
        }
    }

    fn skip(&mut self, stage: &str, upstream: &str) {
        self.errors.push(StageError {
            stage: stage.to_string(),
            validation: false,
            message: format!("skipped: {upstream} unavailable"),
        });
    }

    fn metric(&mut self, name: &str, value: impl Serialize, producer: &str) {
        self.metrics.push(Metric {
            name: name.to_string(),
            value: serde_json::to_value(value).unwrap_or(serde_json::Value::Null),
            producer: producer.to_string(),
        });
    }

    fn check(&mut self, name: &str, producer: &str, pass: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            producer: producer.to_string(),
            pass,
            detail,
        });
    }
}

/// `max_k |M_{0,k} − δ_{0,k}|` for an untwisted operator.
pub fn mass_row_error(m: &crate::transfer_spectral::OperatorMatrix) -> f64 {
    let z = m.basis.zero_index();
    (0..m.dim())
        .map(|k| {
            let target = if k == z { 1.0 } else { 0.0 };
            (m.get(z, k) - target).norm()
        })
        .fold(0.0, f64::max)
}

/// Runs check, spectrum, decomposition, centring, both diffusion routes,
/// the CLT with its rate fit and the LLT. A failing stage is recorded and
/// the stages that do not depend on it still run.
pub fn run_full(config: &ExperimentConfig, base: Option<&Path>) -> Result<ReportBundle> {
    config.validate(base)?;
    let spec = config.map.load(base)?;
    let obs = config.observable.load(base)?;
    let init = config.init.measure()?;
    let mut rec = Recorder {
        errors: Vec::new(),
        metrics: Vec::new(),
        checks: Vec::new(),
    };

    // check
    let cc = &config.check;
    let audit = rec.take("check.audit", check_a1_a5(&spec, cc.grid));
    let cones = rec.take("check.cones", check_cones(&spec, config.cones, cc.grid, cc.n_max));
    let transversality = rec.take(
        "check.transversality",
        a6_rate(&spec, config.cones, &cc.transversality_n, cc.samples, cc.seed),
    );
    if let Some(a) = &audit {
        rec.metric("min_det", a.min_det, "check_a1_a5");
        rec.metric("a5_margin", a.a5_margin, "check_a1_a5");
    }
    if let Some(c) = &cones {
        rec.metric("iota_star", c.iota_star, "check_cones");
        rec.metric("pinching_margin", c.pinching_margin, "check_cones");
    }
    if let Some(t) = &transversality {
        rec.metric("transversality_rate", t.rate.last().copied(), "a6_rate");
    }
    let check = CheckOutput {
        audit,
        cones,
        transversality,
    };

    // spectrum
    let sc = config.spectral;
    let m0 = rec.take("spectrum.assemble", assemble(&spec, &obs, 0.0, sc.k, sc.q));
    let spectral = m0
        .as_ref()
        .and_then(|m| {
            let r = spectrum(m, sc.count.min(m.dim()));
            rec.take("spectrum", r)
        });
    let spectrum_out = match (&m0, &spectral) {
        (Some(m), Some(s)) => {
            let out = SpectrumOutput::new(s, sc.q, mass_row_error(m));
            rec.metric("spectral_gap", out.gap, "spectrum");
            rec.metric("unit_count", out.unit_count, "spectrum");
            rec.check(
                "mass_row_identity",
                "assemble",
                out.mass_row_error <= 1e-8,
                format!("max deviation {:.3e}", out.mass_row_error),
            );
            rec.check(
                "spectral_radius",
                "spectrum",
                out.max_modulus <= 1.0 + 1e-6,
                format!("max |lambda| = {:.12}", out.max_modulus),
            );
            Some(out)
        }
        _ => None,
    };

    // decomposition
    let dc = config.decomposition;
    let dec = match &spectral {
        Some(s) => {
            let params = DecomposeParams {
                seed: dc.seed,
                ..DecomposeParams::new(dc.grid, dc.burn, dc.orbit_len)
            };
            rec.take("decompose", decompose(&spec, s, params))
        }
        None => {
            rec.skip("decompose", "spectrum");
            None
        }
    };
    if let Some(d) = &dec {
        rec.metric("ell", d.ell, "decompose");
        rec.metric("basin_mass", &d.mass, "decompose");
        rec.check(
            "peripheral_roots_of_unity",
            "decompose",
            d.roots_of_unity_ok,
            format!("{} extra peripheral eigenvalues", d.peripheral_extras.len()),
        );
    }

    // centring and diffusion
    let mut centred = dec.as_ref().and_then(|d| {
        let r = center(&obs, d);
        rec.take("center", r)
    });
    let diffusion = match (&m0, &dec, &centred, &spectral) {
        (Some(m), Some(d), Some(c), Some(s)) => Some(run_diffusion(&mut rec, config, &spec, m, d, c, s)),
        _ => {
            rec.skip("diffusion", "decomposition");
            None
        }
    };
    // orbit means replace the spectral ones whenever the orbit route is selected
    if let (Some(c), Some(diff)) = (centred.as_mut(), &diffusion) {
        if !diff.green_kubo_orbits.is_empty() {
            c.centered_offsets = Some(diff.offsets.clone());
        }
    }

    // weights, CLT and LLT
    let weights = dec.as_ref().map(|d| {
        let f_m = init.coefficients(&d.basis);
        let w = clt_weights(d, &f_m);
        let w = rec.take("clt_weights", w);
        let c = match &w {
            Some(w) => w.c.clone(),
            None => d.basin_integrals(&f_m),
        };
        (w, c)
    });
    let components: Option<Vec<Component>> = match (&weights, &diffusion) {
        (Some((_, c)), Some(diff)) => Some(
            c.iter()
                .zip(&diff.sigma)
                .map(|(c, s)| Component {
                    c: *c,
                    sigma: s.selected.max(0.0).sqrt(),
                })
                .collect(),
        ),
        _ => None,
    };
    let mc = &config.montecarlo;
    let lc = &config.llt;
    let share = lc.samples <= mc.samples && mc.n_list.contains(&lc.n);
    let mut clt = None;
    let mut llt = None;
    if let (Some(comp), Some(obs_c), Some((w, c)), Some(d)) = (&components, &centred, &weights, &dec) {
        let ens = rec.take(
            "clt.simulate",
            simulate_ensemble(&spec, obs_c, &init, &mc.n_list, mc.samples, mc.seed),
        );
        if let Some(ens) = &ens {
            clt = Some(run_clt(&mut rec, ens, comp, w.clone(), c.clone(), d.ell));
            let llt_sums = if share {
                Some(ens.truncated(lc.samples).at(lc.n).expect("shared checkpoint").to_vec())
            } else {
                rec.take(
                    "llt.simulate",
                    simulate_ensemble(&spec, obs_c, &init, &[lc.n], lc.samples, mc.seed),
                )
                .map(|e| e.sums[0].clone())
            };
            if let Some(sums) = llt_sums {
                llt = Some(run_llt(&mut rec, config, ens, &sums, comp));
            }
        }
    } else {
        rec.skip("clt", "weights or diffusion coefficients");
        rec.skip("llt", "weights or diffusion coefficients");
    }

    let summary = Summary {
        name: config.name.clone(),
        ell: dec.as_ref().map(|d| d.ell),
        c: components.as_ref().map(|v| v.iter().map(|c| c.c).collect()).unwrap_or_default(),
        sigma: components.as_ref().map(|v| v.iter().map(|c| c.sigma).collect()).unwrap_or_default(),
        metrics: rec.metrics,
        checks: rec.checks,
        errors: rec.errors,
    };
    Ok(ReportBundle {
        config: config.clone(),
        check: Some(check),
        spectrum: spectrum_out,
        decomposition: dec,
        diffusion,
        clt,
        llt,
        summary,
    })
}

fn run_diffusion(
    rec: &mut Recorder,
    config: &ExperimentConfig,
    spec: &MapSpec,
    m0: &crate::transfer_spectral::OperatorMatrix,
    dec: &ErgodicDecomposition,
    centred: &Observable,
    spectral: &SpectralData,
) -> DiffusionOutput {
    let (out, errors) = diffusion_stage(spec, m0, dec, centred, spectral, &config.diffusion, config.spectral.q);
    rec.errors.extend(errors);
    for s in &out.sigma {
        rec.metric(&format!("sigma2_green_kubo[{}]", s.k), s.green_kubo, "green_kubo");
        if let Some(o) = s.orbital {
            rec.metric(&format!("sigma2_green_kubo_orbits[{}]", s.k), o, "green_kubo_orbits");
        }
        if let Some(t) = s.twisted {
            rec.metric(&format!("sigma2_twisted[{}]", s.k), t, "twisted_curve");
        }
        if let Some(d) = s.abs_diff {
            rec.check(
                "sigma_routes_agree",
                "green_kubo+twisted_curve",
                d <= 1e-2,
                format!("|difference| = {d:.3e}"),
            );
        }
    }
    out
}

/// Both Green–Kubo routes and the twisted curve. The orbit route runs
/// when the decomposition reports negative densities and then supplies
/// the selected `σ_k²`.
pub fn diffusion_stage(
    spec: &MapSpec,
    m0: &crate::transfer_spectral::OperatorMatrix,
    dec: &ErgodicDecomposition,
    centred: &Observable,
    spectral: &SpectralData,
    cfg: &DiffusionConfig,
    q: usize,
) -> (DiffusionOutput, Vec<StageError>) {
    let mut rec = Recorder {
        errors: Vec::new(),
        metrics: Vec::new(),
        checks: Vec::new(),
    };
    let rate = spectral.gap.unwrap_or(0.0);
    let singular = dec.negativity.iter().any(|n| *n > NEGATIVITY_TOL);
    let mut gk = Vec::with_capacity(dec.ell);
    for k in 0..dec.ell {
        let r = green_kubo(m0, centred, dec, k, cfg.j, rate);
        if let Some(g) = rec.take(&format!("green_kubo[{k}]"), r) {
            gk.push(g);
        }
    }
    let gk_orbits = if singular {
        let r = green_kubo_orbits(spec, centred, dec, cfg.j, rate, cfg.orbital);
        rec.take("green_kubo_orbits", r).unwrap_or_default()
    } else {
        Vec::new()
    };
    // a single offset keeps the twisted operator's observable smooth
    let twist_obs = if dec.ell == 1 { centred.clone() } else { Observable::new(centred.coeffs.clone()) };
    let twisted = rec.take(
        "twisted_curve",
        twisted_curve(spec, &twist_obs, &default_nu_grid(cfg.twist_step), dec.basis.cutoff, q, dec.ell),
    );
    let sigma: Vec<SigmaEstimate> = gk
        .iter()
        .map(|g| {
            let tw = if dec.ell == 1 {
                twisted.as_ref().map(|t| t.sigma2[0])
            } else {
                None
            };
            let orbital = gk_orbits.iter().find(|o| o.k == g.k).map(|o| o.sigma2);
            let (selected, route) = match orbital {
                Some(o) => (o, "green_kubo_orbits"),
                None => (g.sigma2, "green_kubo"),
            };
            SigmaEstimate {
                k: g.k,
                green_kubo: g.sigma2,
                orbital,
                twisted: tw,
                abs_diff: tw.map(|t| (t - g.sigma2).abs()),
                selected,
                route: route.to_string(),
            }
        })
        .collect();
    if sigma.len() != dec.ell || (singular && gk_orbits.len() != dec.ell) {
        rec.errors.push(StageError {
            stage: "diffusion".into(),
            validation: false,
            message: format!("{} of {} diffusion coefficients available", sigma.len(), dec.ell),
        });
    }
    (
        DiffusionOutput {
            offsets: if gk_orbits.len() == dec.ell {
                gk_orbits.iter().map(|g| g.offset).collect()
            } else {
                centred.centered_offsets.clone().unwrap_or_default()
            },
            green_kubo: gk,
            green_kubo_orbits: gk_orbits,
            twisted,
            sigma,
        },
        rec.errors,
    )
}

fn run_clt(
    rec: &mut Recorder,
    ens: &Ensemble,
    comp: &[Component],
    weights: Option<CltWeights>,
    c: Vec<f64>,
    ell: usize,
) -> CltOutput {
    let report = clt_from_ensemble(ens, comp);
    let ns: Vec<usize> = report.rows.iter().map(|r| r.n).collect();
    let ds: Vec<f64> = report.rows.iter().map(|r| r.ks).collect();
    let be_fit = if ns.len() >= 5 {
        rec.take("berry_esseen_fit", berry_esseen_fit(&ns, &ds))
    } else {
        None
    };
    let last = report.rows.last().expect("checkpoints are non-empty");
    let n_max = last.n;
    let z: Vec<f64> = ens
        .sums
        .last()
        .expect("checkpoints are non-empty")
        .iter()
        .map(|s| s / (n_max as f64).sqrt())
        .collect();
    let ks_mixture = ks_distance(&z, |v| mixture_cdf(comp, v));
    let sd_max = comp.iter().map(|c| c.sigma).fold(0.0, f64::max).max(0.1);
    let (ks_best_single, best_single_sigma) = best_single_gaussian(&z, 0.05 * sd_max, 2.0 * sd_max, 400);
    let sample_fractions = ens.label_fractions(ell);

    rec.metric("ks_at_n_max", last.ks, "clt_experiment");
    rec.check(
        "clt_ks",
        "clt_experiment",
        last.ks <= 0.02,
        format!("KS({n_max}) = {:.4} (stderr {:.4})", last.ks, last.ks_stderr),
    );
    if let Some(w) = &weights {
        rec.metric("weight_mismatch", w.max_mismatch, "clt_weights");
    }
    let class_err = c
        .iter()
        .zip(&sample_fractions)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    rec.check(
        "sample_classification",
        "simulate_ensemble",
        class_err <= 0.02,
        format!("max |c_k - sample fraction| = {class_err:.4}"),
    );
    let ratio = last.variance_ratio / report.predicted_variance.max(1e-300);
    rec.check(
        "variance_growth",
        "clt_experiment",
        (ratio - 1.0).abs() <= 0.05,
        format!("Var/n over prediction = {ratio:.4}"),
    );
    if let Some(f) = &be_fit {
        rec.metric("be_exponent", f.exponent, "berry_esseen_fit");
        rec.check(
            "berry_esseen_exponent",
            "berry_esseen_fit",
            (0.35..=0.65).contains(&f.exponent),
            format!("exponent {:.3} +- {:.3}", f.exponent, f.exponent_stderr),
        );
    }
    if ell > 1 {
        rec.check(
            "mixture_beats_single",
            "clt_experiment",
            ks_mixture < ks_best_single,
            format!("mixture {ks_mixture:.4} vs single {ks_best_single:.4}"),
        );
    }
    CltOutput {
        weights,
        c,
        sample_fractions,
        report,
        be_fit,
        n_max,
        ks_mixture,
        ks_best_single,
        best_single_sigma,
    }
}

fn run_llt(rec: &mut Recorder, config: &ExperimentConfig, ens: &Ensemble, sums: &[f64], comp: &[Component]) -> LltOutput {
    let lc = &config.llt;
    let report = llt_from_sums(sums, lc.n, &lc.z_grid, lc.width, comp);
    rec.metric("llt_sup_error", report.sup_error, "llt_experiment");
    if let Some(p) = report.points.iter().find(|p| p.z == 0.0) {
        rec.check(
            "llt_at_zero",
            "llt_experiment",
            p.within_3se,
            format!("lhs {:.4} rhs {:.4} se {:.4}", p.lhs, p.rhs, p.stderr),
        );
    }
    let mut intervals = Vec::new();
    for [a, b] in &lc.intervals {
        if let Some(r) = rec.take("interval_llt", interval_llt(ens, *a, *b, lc.delta, comp)) {
            rec.check(
                &format!("interval_llt[{a},{b}]"),
                "interval_llt",
                r.holds,
                format!("fitted C = {:.4}", r.fitted_c),
            );
            intervals.push(r);
        }
    }
    LltOutput { report, intervals }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes `bundle.json`, one JSON file per stage and the long-format CSVs.
pub fn write_bundle(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files: BTreeMap<&str, String> = BTreeMap::new();
    files.insert("bundle.json", to_json(bundle)?);
    files.insert("config.json", to_json(&bundle.config)?);
    files.insert("summary.json", to_json(&bundle.summary)?);
    files.insert("check.json", to_json(&bundle.check)?);
    files.insert("spectrum.json", to_json(&bundle.spectrum)?);
    files.insert("decomposition.json", to_json(&bundle.decomposition)?);
    files.insert("diffusion.json", to_json(&bundle.diffusion)?);
    files.insert("clt.json", to_json(&bundle.clt)?);
    files.insert("llt.json", to_json(&bundle.llt)?);
    let mut written = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
    }
    if let Some(s) = &bundle.spectrum {
        let p = dir.join("spectrum.csv");
        write_spectrum_csv(s, &p)?;
        written.push(p);
    }
    if let Some(c) = &bundle.clt {
        let p = dir.join("clt.csv");
        write_clt_csv(&c.report, &p)?;
        written.push(p);
    }
    if let Some(l) = &bundle.llt {
        let p = dir.join("llt.csv");
        write_llt_csv(&l.report, &p)?;
        written.push(p);
        let p = dir.join("interval_llt.csv");
        write_interval_csv(&l.intervals, &p)?;
        written.push(p);
    }
    if let Some(t) = bundle.check.as_ref().and_then(|c| c.transversality.as_ref()) {
        let p = dir.join("transversality.csv");
        write_transversality_csv(t, &p)?;
        written.push(p);
    }
    Ok(written)
}

pub fn write_spectrum_csv(s: &SpectrumOutput, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "re", "im", "modulus", "residual"])?;
    for (i, l) in s.eigenvalues.iter().enumerate() {
        w.write_record([
            i.to_string(),
            l.re.to_string(),
            l.im.to_string(),
            l.norm().to_string(),
            s.residuals.get(i).map(|r| r.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per `(n, k)`.
pub fn write_clt_csv(r: &CltReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "KS", "KS_stderr", "variance_ratio", "k", "sigma", "c"])?;
    for row in &r.rows {
        for (k, c) in r.components.iter().enumerate() {
            w.write_record([
                row.n.to_string(),
                row.ks.to_string(),
                row.ks_stderr.to_string(),
                row.variance_ratio.to_string(),
                k.to_string(),
                c.sigma.to_string(),
                c.c.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_llt_csv(r: &LltReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "width", "z", "lhs", "rhs", "stderr", "within_3se"])?;
    for p in &r.points {
        w.write_record([
            r.n.to_string(),
            r.width.to_string(),
            p.z.to_string(),
            p.lhs.to_string(),
            p.rhs.to_string(),
            p.stderr.to_string(),
            p.within_3se.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_interval_csv(reports: &[IntervalLltReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["a", "b", "n", "lhs", "predicted", "bound", "stderr"])?;
    for r in reports {
        for row in &r.rows {
            w.write_record([
                r.a.to_string(),
                r.b.to_string(),
                row.n.to_string(),
                row.lhs.to_string(),
                row.predicted.to_string(),
                row.bound.to_string(),
                row.stderr.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_transversality_csv(t: &TransversalityReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "N_F", "N_tilde", "rate"])?;
    for i in 0..t.n_values.len() {
        w.write_record([
            t.n_values[i].to_string(),
            t.n_f[i].to_string(),
            t.n_tilde[i].to_string(),
            t.rate[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate(None).unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
        assert!(ExperimentConfig::preset("nope").unwrap_err().is_validation());
    }

    #[test]
    fn malformed_config_lists_every_field() {
        let mut cfg = ExperimentConfig::preset("doubling_skew").unwrap();
        cfg.spectral.q = 48;
        cfg.montecarlo.n_list = vec![64, 32];
        cfg.llt.delta = 1.5;
        cfg.map = Source::File("missing-map.json".into());
        match cfg.validate(None).unwrap_err() {
            SvphError::Validation(p) => {
                assert_eq!(p.len(), 4, "{p:?}");
                assert!(p.iter().any(|s| s.starts_with("spectral.Q")));
                assert!(p.iter().any(|s| s.starts_with("montecarlo.n_list")));
                assert!(p.iter().any(|s| s.starts_with("llt.delta")));
                assert!(p.iter().any(|s| s.starts_with("map:")));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn init_config_json() {
        let u: InitConfig = serde_json::from_str("\"uniform\"").unwrap();
        assert_eq!(u, InitConfig::Uniform);
        let d: InitConfig = serde_json::from_str("{\"density\":[[0,0,1.0,0.0]]}").unwrap();
        assert!(d.measure().unwrap().is_uniform());
    }
}
