//! Real observables `τ : 𝕋² → ℝ` and the basin lookup used for
//! per-acip centring.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SvphError};
use crate::fourier::FourierTable;
use crate::torus_maps::TorusPoint;

/// Label of a basin cell; `None` marks an unassigned cell.
pub type BasinLabel = Option<u16>;

/// `G × G` cell labelling of the torus, row-major in `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RleGrid", into = "RleGrid")]
pub struct BasinGrid {
    size: usize,
    labels: Vec<BasinLabel>,
}

/// Run-length encoded labels: `runs = [[label, count], …]`, label `-1`
/// meaning unassigned.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RleGrid {
    size: usize,
    runs: Vec<[i64; 2]>,
}

impl TryFrom<RleGrid> for BasinGrid {
    type Error = SvphError;

    fn try_from(r: RleGrid) -> Result<Self> {
        let mut labels = Vec::with_capacity(r.size * r.size);
        for [label, count] in r.runs {
            let l = match label {
                -1 => None,
                l if (0..=i64::from(u16::MAX)).contains(&l) => Some(l as u16),
                l => return Err(SvphError::InvalidSpec(format!("bad basin label {l}"))),
            };
            if count < 0 {
                return Err(SvphError::InvalidSpec("negative run length".into()));
            }
            labels.extend(std::iter::repeat_n(l, count as usize));
        }
        BasinGrid::new(r.size, labels)
    }
}

impl From<BasinGrid> for RleGrid {
    fn from(g: BasinGrid) -> Self {
        let mut runs: Vec<[i64; 2]> = Vec::new();
        for l in &g.labels {
            let code = l.map_or(-1, i64::from);
            match runs.last_mut() {
                Some(last) if last[0] == code => last[1] += 1,
                _ => runs.push([code, 1]),
            }
        }
        RleGrid { size: g.size, runs }
    }
}

impl BasinGrid {
    pub fn new(size: usize, labels: Vec<BasinLabel>) -> Result<Self> {
        if size == 0 || labels.len() != size * size {
            return Err(SvphError::InvalidSpec(format!(
                "basin grid of size {size} needs {} labels, got {}",
                size * size,
                labels.len()
            )));
        }
        Ok(Self { size, labels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn labels(&self) -> &[BasinLabel] {
        &self.labels
    }

    #[inline]
    pub fn cell_of(&self, p: TorusPoint) -> usize {
        let g = self.size as f64;
        let i = ((p.x() * g) as usize).min(self.size - 1);
        let j = ((p.theta() * g) as usize).min(self.size - 1);
        i * self.size + j
    }

    #[inline]
    pub fn label_at(&self, p: TorusPoint) -> BasinLabel {
        self.labels[self.cell_of(p)]
    }

    /// Centre of cell `c`.
    pub fn cell_center(&self, c: usize) -> TorusPoint {
        let g = self.size as f64;
        TorusPoint::new(
            ((c / self.size) as f64 + 0.5) / g,
            ((c % self.size) as f64 + 0.5) / g,
        )
    }

    /// Fraction of cells carrying `label`.
    pub fn mass(&self, label: u16) -> f64 {
        self.labels.iter().filter(|l| **l == Some(label)).count() as f64 / self.labels.len() as f64
    }

    pub fn coverage(&self) -> f64 {
        self.labels.iter().filter(|l| l.is_some()).count() as f64 / self.labels.len() as f64
    }
}

/// A real observable given by a Fourier table, optionally passed through
/// `sign(·)` (a lattice-valued observable used as a negative control) and
/// optionally centred per basin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    pub coeffs: FourierTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centered_offsets: Option<Vec<f64>>,
    /// Replace `τ` by `sign(τ) ∈ {-1, 0, 1}`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub sign: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basins: Option<BasinGrid>,
}

impl Observable {
    pub fn new(coeffs: FourierTable) -> Self {
        Self {
            coeffs,
            centered_offsets: None,
            sign: false,
            basins: None,
        }
    }

    /// `sign(τ)`; not representable by a finite Fourier table, so spectral
    /// routines reject it.
    pub fn sign_of(coeffs: FourierTable) -> Self {
        Self {
            sign: true,
            ..Self::new(coeffs)
        }
    }

    pub fn is_smooth(&self) -> bool {
        !self.sign
    }

    pub fn require_smooth(&self) -> Result<()> {
        if self.sign {
            return Err(SvphError::InvalidObservable(
                "sign observables have no finite Fourier representation".into(),
            ));
        }
        Ok(())
    }

    pub fn depends_on_theta(&self) -> bool {
        !self.coeffs.independent_of_theta()
    }

    /// `τ(p)` before centring.
    #[inline]
    pub fn raw_value(&self, p: TorusPoint) -> f64 {
        let v = self.coeffs.value(p.x(), p.theta());
        if self.sign {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        } else {
            v
        }
    }

    /// Offset of the basin containing `p` (0 when uncentred or unassigned).
    pub fn offset_at(&self, p: TorusPoint) -> f64 {
        match &self.centered_offsets {
            None => 0.0,
            Some(o) if o.len() == 1 => o[0],
            Some(o) => self
                .basins
                .as_ref()
                .and_then(|b| b.label_at(p))
                .and_then(|l| o.get(l as usize).copied())
                .unwrap_or(0.0),
        }
    }

    /// `τ(p)` with the basin offset of `p` removed.
    pub fn value(&self, p: TorusPoint) -> f64 {
        self.raw_value(p) - self.offset_at(p)
    }

    /// The Fourier table of the centred observable when a single offset
    /// applies everywhere; otherwise the raw table.
    pub fn effective_table(&self) -> FourierTable {
        match &self.centered_offsets {
            Some(o) if o.len() == 1 && o[0] != 0.0 => {
                self.coeffs.add(&FourierTable::constant(-o[0]))
            }
            _ => self.coeffs.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            coeffs: self.coeffs.scaled(s),
            centered_offsets: self
                .centered_offsets
                .as_ref()
                .map(|o| o.iter().map(|v| v * s).collect()),
            ..self.clone()
        }
    }
}
