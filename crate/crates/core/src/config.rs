//! Run configuration, read from and written back to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cells::default_k_layers;
use crate::downscale::SamplingRule;
use crate::error::{Error, Result};
use crate::fem::{SolverOptions, Source};
use crate::field::GeometrySpec;
use crate::macroscale::MacroBc;
use crate::mesh::FineGrid;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum SourceSpec {
    #[default]
    One,
    Zero,
    Constant {
        value: f64,
    },
    /// `2π² sin(πx) sin(πy)`.
    Sine,
}

impl SourceSpec {
    pub fn to_source(self) -> Source {
        match self {
            SourceSpec::One => Source::Constant(1.0),
            SourceSpec::Zero => Source::Constant(0.0),
            SourceSpec::Constant { value } => Source::Constant(value),
            SourceSpec::Sine => Source::Sine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n_fine: usize,
    pub h_eps: f64,
    pub h_coarse: f64,
    /// Oversampling layers; the default rule applies when absent.
    pub k_layers: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_fine: 64,
            h_eps: 1.0 / 8.0,
            h_coarse: 1.0 / 4.0,
            k_layers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroConfig {
    /// Partition shifts `z`, each a multiple of `H_ε`.
    pub shifts: Vec<[f64; 2]>,
    pub bc: MacroBc,
    pub sampling: SamplingRule,
    /// Side length of a centred RVE window inside each coarse cell.
    pub rve_window: Option<f64>,
}

impl Default for MacroConfig {
    fn default() -> Self {
        Self {
            shifts: vec![[0.0, 0.0]],
            bc: MacroBc::Natural,
            sampling: SamplingRule::Center,
            rve_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

/// Parameter lists swept by `study`; empty lists keep the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub id: String,
    pub h_eps: Vec<f64>,
    pub h_coarse: Vec<f64>,
    pub k_layers: Vec<usize>,
    pub contrast: Vec<f64>,
    /// Run the macroscopic stage for each point.
    pub with_macro: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub medium: GeometrySpec,
    pub grid: GridConfig,
    #[serde(rename = "macro")]
    pub macro_: MacroConfig,
    pub source: SourceSpec,
    pub solver: SolverOptions,
    pub output: OutputConfig,
    pub study: StudyConfig,
}

fn multiple_of(len: f64, unit: f64) -> bool {
    let r = len / unit;
    r >= 1.0 - 1e-9 && (r - r.round()).abs() <= 1e-9 * r.max(1.0)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.medium.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Short SHA-256 of the resolved TOML with output locations cleared.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        let d = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(d.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn grid(&self) -> Result<FineGrid> {
        FineGrid::new(self.grid.n_fine)
    }

    pub fn k_layers(&self) -> usize {
        self.grid.k_layers.unwrap_or_else(|| default_k_layers(self.grid.h_eps))
    }

    /// Checks `h ≤ H_ε ≤ H ≤ 1` with each scale a multiple of the next finer
    /// one, positive tolerances and aligned shifts and windows.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.n_fine == 0 {
            return Err(Error::Config("n_fine must be positive".into()));
        }
        let h = 1.0 / g.n_fine as f64;
        let checks = [
            (g.h_eps, h, "h_eps", "the fine cell width"),
            (g.h_coarse, g.h_eps, "h_coarse", "h_eps"),
            (1.0, g.h_coarse, "the domain length", "h_coarse"),
        ];
        for (len, unit, a, b) in checks {
            if !(len.is_finite() && unit.is_finite() && unit > 0.0 && multiple_of(len, unit)) {
                return Err(Error::Config(format!("{a} = {len} is not a multiple of {b} = {unit}")));
            }
        }
        if !(self.solver.tol > 0.0 && self.solver.tol.is_finite()) {
            return Err(Error::Config(format!("solver tolerance {} must be positive", self.solver.tol)));
        }
        if self.macro_.shifts.is_empty() {
            return Err(Error::Config("at least one shift is required".into()));
        }
        for z in &self.macro_.shifts {
            for c in z {
                if *c < 0.0 || (*c != 0.0 && !multiple_of(*c, g.h_eps)) || *c >= g.h_coarse {
                    return Err(Error::Config(format!("shift component {c} must be a multiple of h_eps below h_coarse")));
                }
            }
        }
        if let Some(w) = self.macro_.rve_window {
            if !multiple_of(w, g.h_eps) || w > g.h_coarse + 1e-12 {
                return Err(Error::Config(format!("rve_window {w} must be a multiple of h_eps not exceeding h_coarse")));
            }
        }
        for v in self.study.h_eps.iter().chain(&self.study.h_coarse).chain(&self.study.contrast) {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::Config(format!("study value {v} must be positive")));
            }
        }
        Ok(())
    }

    /// Expands the study sweep into one validated configuration per point.
    pub fn sweep(&self) -> Vec<(RunConfig, Result<()>)> {
        let one = |v: &Vec<f64>, base: f64| if v.is_empty() { vec![base] } else { v.clone() };
        let ks: Vec<Option<usize>> = if self.study.k_layers.is_empty() {
            vec![self.grid.k_layers]
        } else {
            self.study.k_layers.iter().copied().map(Some).collect()
        };
        let base_contrast = self.medium.kappa_high / self.medium.kappa_low;
        let mut out = Vec::new();
        for he in one(&self.study.h_eps, self.grid.h_eps) {
            for hc in one(&self.study.h_coarse, self.grid.h_coarse) {
                for &k in &ks {
                    for z in one(&self.study.contrast, base_contrast) {
                        let mut c = self.clone();
                        c.grid.h_eps = he;
                        c.grid.h_coarse = hc;
                        c.grid.k_layers = k;
                        c.medium.kappa_high = c.medium.kappa_low * z;
                        let v = c.validate();
                        out.push((c, v));
                    }
                }
            }
        }
        out
    }
}
