use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use svph_core::cli_report::{
    diffusion_stage, mass_row_error, to_json, write_bundle, write_clt_csv, write_llt_csv, DiffusionConfig,
    DiffusionOutput, ExperimentConfig, SpectrumOutput,
};
use svph_core::ergodic_decomp::{clt_weights, decompose, DecomposeParams, ErgodicDecomposition};
use svph_core::hyperbolicity::{a6_rate, check_a1_a5, check_cones, ConeParams};
use svph_core::limit_laws::{
    center, clt_experiment, llt_experiment, Component, InitialMeasure, DEFAULT_BUMP_WIDTH, DEFAULT_J, MAX_J,
};
use svph_core::transfer_spectral::{assemble, spectrum, SpectralData, DEFAULT_STEP};
use svph_core::{FourierTable, MapSpec, Observable, OperatorMatrix, SvphError};

type Result<T> = svph_core::Result<T>;

#[derive(Parser)]
#[command(name = "svph", version, about = "Spectral and limit-law diagnostics for skew-product torus maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Audit determinant, domination, cones and transversality.
    Check(CheckArgs),
    /// Leading spectrum of the (twisted) transfer operator.
    Spectrum(SpectrumArgs),
    /// Ergodic decomposition into acips and basins.
    Decompose(DecomposeArgs),
    /// Diffusion coefficients by Green-Kubo and by the twisted curve.
    Diffusion(DiffusionArgs),
    /// Monte-Carlo CLT against the Gaussian mixture.
    Clt(CltArgs),
    /// Monte-Carlo local limit theorem.
    Llt(LltArgs),
    /// The whole pipeline, writing a report bundle.
    Full(FullArgs),
}

#[derive(Args, Clone)]
struct Input {
    /// Map JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named benchmark supplying map, observable and defaults.
    #[arg(long)]
    preset: Option<String>,
    /// Observable JSON file.
    #[arg(long)]
    obs: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Galerkin {
    #[arg(long = "K", default_value_t = 8)]
    k: usize,
    #[arg(long = "Q", default_value_t = 64)]
    q: usize,
    #[arg(long, default_value_t = 12)]
    count: usize,
}

#[derive(Args, Clone)]
struct Decomp {
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    burn: Option<usize>,
    #[arg(long = "orbit-len")]
    orbit_len: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long, default_value_t = 8)]
    nmax: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long = "chi-u", default_value_t = 0.8)]
    chi_u: f64,
    #[arg(long = "chi-c", default_value_t = 1.0)]
    chi_c: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SpectrumArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    galerkin: Galerkin,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    nu: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    galerkin: Galerkin,
    #[command(flatten)]
    decomp: Decomp,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiffusionArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    galerkin: Galerkin,
    #[command(flatten)]
    decomp: Decomp,
    #[arg(long = "J", default_value_t = DEFAULT_J)]
    j: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    /// `uniform` or a density table JSON file.
    #[arg(long, default_value = "uniform")]
    init: String,
    #[arg(long = "N", default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct CltArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    galerkin: Galerkin,
    #[command(flatten)]
    decomp: Decomp,
    #[command(flatten)]
    mc: McArgs,
    #[arg(long = "n", value_delimiter = ',', default_value = "64,256,1024,4096")]
    n: Vec<usize>,
    /// `.csv` for the long table, anything else for JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LltArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    galerkin: Galerkin,
    #[command(flatten)]
    decomp: Decomp,
    #[command(flatten)]
    mc: McArgs,
    #[arg(long = "n", default_value_t = 4096)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_value = "0", allow_hyphen_values = true)]
    z: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_BUMP_WIDTH)]
    width: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FullArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the Monte-Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Check(a) => run_check(a),
        Command::Spectrum(a) => run_spectrum(a),
        Command::Decompose(a) => run_decompose(a),
        Command::Diffusion(a) => run_diffusion(a),
        Command::Clt(a) => run_clt(a),
        Command::Llt(a) => run_llt(a),
        Command::Full(a) => run_full(a),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

struct Loaded {
    spec: MapSpec,
    obs: Observable,
    preset: Option<ExperimentConfig>,
}

fn load(input: &Input, need_obs: bool) -> Result<Loaded> {
    let preset = input.preset.as_deref().map(ExperimentConfig::preset).transpose()?;
    let spec = match (&input.config, &preset) {
        (Some(p), _) => read_json(p)?,
        (None, Some(cfg)) => cfg.map.load(None)?,
        (None, None) => return Err(SvphError::Validation(vec!["one of --config or --preset is required".into()])),
    };
    let obs = match (&input.obs, &preset) {
        (Some(p), _) => read_json(p)?,
        (None, Some(cfg)) => cfg.observable.load(None)?,
        (None, None) if need_obs => return Err(SvphError::Validation(vec!["--obs is required".into()])),
        (None, None) => Observable::new(FourierTable::zero()),
    };
    Ok(Loaded { spec, obs, preset })
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p)
        .map_err(|e| SvphError::Validation(vec![format!("cannot read {}: {e}", p.display())]))?;
    serde_json::from_str(&text).map_err(|e| SvphError::Validation(vec![format!("{}: {e}", p.display())]))
}

fn emit<T: Serialize>(value: &T, out: &Option<PathBuf>) -> Result<()> {
    let text = to_json(value)?;
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run_check(a: CheckArgs) -> Result<ExitCode> {
    let l = load(&a.input, false)?;
    let cones = ConeParams::new(a.chi_u, a.chi_c)?;
    let audit = check_a1_a5(&l.spec, a.grid)?;
    let cone_report = check_cones(&l.spec, cones, a.grid, a.nmax)?;
    let n_range: Vec<usize> = (1..=a.nmax).collect();
    let transversality = a6_rate(&l.spec, cones, &n_range, a.samples, a.seed)?;
    #[derive(Serialize)]
    struct Out<A, C, T> {
        audit: A,
        cones: C,
        transversality: T,
        seed: u64,
    }
    emit(
        &Out {
            audit,
            cones: cone_report,
            transversality,
            seed: a.seed,
        },
        &a.out,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn untwisted(l: &Loaded, g: &Galerkin) -> Result<(OperatorMatrix, SpectralData)> {
    let m = assemble(&l.spec, &l.obs, 0.0, g.k, g.q)?;
    let s = spectrum(&m, g.count.min(m.dim()))?;
    Ok((m, s))
}

fn run_spectrum(a: SpectrumArgs) -> Result<ExitCode> {
    let l = load(&a.input, a.nu != 0.0)?;
    let g = &a.galerkin;
    let m = assemble(&l.spec, &l.obs, a.nu, g.k, g.q)?;
    let s = spectrum(&m, g.count.min(m.dim()))?;
    let mass = if a.nu == 0.0 { mass_row_error(&m) } else { f64::NAN };
    let out = SpectrumOutput::new(&s, g.q, mass);
    emit(&out, &a.out)?;
    if a.nu == 0.0 && (out.mass_row_error > 1e-8 || out.max_modulus > 1.0 + 1e-6) {
        eprintln!(
            "self-check failed: mass row {:.3e}, max modulus {:.12}",
            out.mass_row_error, out.max_modulus
        );
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn decomp_params(l: &Loaded, d: &Decomp) -> DecomposeParams {
    let base = l.preset.as_ref().map(|p| p.decomposition);
    let mut p = DecomposeParams::new(
        d.grid.or(base.map(|b| b.grid)).unwrap_or(64),
        d.burn.or(base.map(|b| b.burn)).unwrap_or(1000),
        d.orbit_len.or(base.map(|b| b.orbit_len)).unwrap_or(2000),
    );
    if let Some(b) = base {
        p.seed = b.seed;
    }
    p
}

fn run_decompose(a: DecomposeArgs) -> Result<ExitCode> {
    let l = load(&a.input, false)?;
    let (_, s) = untwisted(&l, &a.galerkin)?;
    let dec = decompose(&l.spec, &s, decomp_params(&l, &a.decomp))?;
    emit(&dec, &a.out)?;
    Ok(ExitCode::SUCCESS)
}

struct Prepared {
    dec: ErgodicDecomposition,
    centred: Observable,
    diffusion: DiffusionOutput,
}

fn prepare(l: &Loaded, g: &Galerkin, d: &Decomp, j: usize, step: f64) -> Result<Prepared> {
    let (m, s) = untwisted(l, g)?;
    let dec = decompose(&l.spec, &s, decomp_params(l, d))?;
    let mut centred = center(&l.obs, &dec)?;
    let cfg = DiffusionConfig {
        j,
        twist_step: step,
        ..DiffusionConfig::default()
    };
    let (diffusion, errors) = diffusion_stage(&l.spec, &m, &dec, &centred, &s, &cfg, g.q);
    if !diffusion.green_kubo_orbits.is_empty() {
        centred.centered_offsets = Some(diffusion.offsets.clone());
    }
    if !errors.is_empty() {
        let validation = errors.iter().all(|e| e.validation);
        let msgs: Vec<String> = errors.iter().map(|e| format!("{}: {}", e.stage, e.message)).collect();
        return Err(if validation {
            SvphError::Validation(msgs)
        } else {
            SvphError::StageFailed(msgs.join("; "))
        });
    }
    Ok(Prepared {
        diffusion,
        dec,
        centred,
    })
}

fn run_diffusion(a: DiffusionArgs) -> Result<ExitCode> {
    if !(1..=MAX_J).contains(&a.j) {
        return Err(SvphError::Validation(vec![format!("--J must lie in 1..={MAX_J}, got {}", a.j)]));
    }
    let l = load(&a.input, true)?;
    let p = prepare(&l, &a.galerkin, &a.decomp, a.j, a.step)?;
    emit(&p.diffusion, &a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn initial(spec: &str) -> Result<InitialMeasure> {
    if spec == "uniform" {
        Ok(InitialMeasure::uniform())
    } else {
        InitialMeasure::new(read_json(Path::new(spec))?)
    }
}

fn components(p: &Prepared, m: &InitialMeasure) -> Result<Vec<Component>> {
    let w = clt_weights(&p.dec, &m.coefficients(&p.dec.basis))?;
    Ok(w.c
        .iter()
        .zip(&p.diffusion.sigma)
        .map(|(c, s)| Component {
            c: *c,
            sigma: s.selected.max(0.0).sqrt(),
        })
        .collect())
}

fn is_csv(out: &Option<PathBuf>) -> bool {
    out.as_ref().and_then(|p| p.extension()).is_some_and(|e| e == "csv")
}

fn run_clt(a: CltArgs) -> Result<ExitCode> {
    let l = load(&a.input, true)?;
    let m = initial(&a.mc.init)?;
    let p = prepare(&l, &a.galerkin, &a.decomp, DEFAULT_J, DEFAULT_STEP)?;
    let comp = components(&p, &m)?;
    let report = clt_experiment(&l.spec, &p.centred, &m, &a.n, a.mc.samples, &comp, a.mc.seed)?;
    match &a.out {
        Some(path) if is_csv(&a.out) => write_clt_csv(&report, path)?,
        _ => emit(&report, &a.out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn run_llt(a: LltArgs) -> Result<ExitCode> {
    let l = load(&a.input, true)?;
    let m = initial(&a.mc.init)?;
    let p = prepare(&l, &a.galerkin, &a.decomp, DEFAULT_J, DEFAULT_STEP)?;
    let comp = components(&p, &m)?;
    let report = llt_experiment(&l.spec, &p.centred, &m, a.width, &a.z, a.n, a.mc.samples, &comp, a.mc.seed)?;
    match &a.out {
        Some(path) if is_csv(&a.out) => write_llt_csv(&report, path)?,
        _ => emit(&report, &a.out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn run_full(a: FullArgs) -> Result<ExitCode> {
    let (mut cfg, base) = match (&a.config, &a.preset) {
        (Some(p), _) => {
            let (c, b) = ExperimentConfig::from_file(p)
                .map_err(|e| SvphError::Validation(vec![format!("{}: {e}", p.display())]))?;
            (c, b)
        }
        (None, Some(name)) => (ExperimentConfig::preset(name)?, None),
        (None, None) => return Err(SvphError::Validation(vec!["one of --config or --preset is required".into()])),
    };
    if let Some(s) = a.seed {
        cfg.montecarlo.seed = s;
    }
    let dir = a
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("svph-{}", cfg.name)));
    let bundle = svph_core::run_full(&cfg, base.as_deref())?;
    write_bundle(&bundle, &dir)?;
    print!("{}", to_json(&bundle.summary)?);
    if bundle.summary.errors.iter().any(|e| !e.validation) {
        return Ok(ExitCode::from(3));
    }
    if bundle.summary.errors.iter().any(|e| e.validation) {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}
