//! Transfer-operator spectra, ergodic decomposition and limit-law checks
//! for skew-product endomorphisms of the 2-torus.

pub mod cli_report;
pub mod ergodic_decomp;
pub mod error;
pub mod fourier;
pub mod hyperbolicity;
pub mod limit_laws;
pub mod observable;
pub mod simulation;
pub mod torus_maps;
pub mod transfer_spectral;

pub use cli_report::{run_full, ExperimentConfig, ReportBundle, Summary};
pub use ergodic_decomp::{clt_weights, decompose, CltWeights, DecomposeParams, ErgodicDecomposition};
pub use error::{Result, SvphError};
pub use fourier::{FourierTable, ModeBasis, Term, C64};
pub use hyperbolicity::{check_a1_a5, check_cones, ConeParams, ConeReport, TransversalityReport};
pub use limit_laws::{Component, GreenKubo, InitialMeasure};
pub use observable::{BasinGrid, Observable};
pub use torus_maps::{Jacobian2, MapKind, MapSpec, TorusPoint};
pub use transfer_spectral::{assemble, spectrum, OperatorMatrix, SpectralData, TwistedCurve};
