//! Continuum averages and the two reconstruction (downscaling) operators.

use std::sync::Arc;

use crate::cells::{con, lin, AuxiliaryBasis, CellSolutionSet, LocalizedBasisSet, NUM_BASIS, NUM_CONTINUA};
use crate::error::{Error, Result};
use crate::fem::{BrokenFunction, CellValues, FineFunction};
use crate::mesh::{FineGrid, ShiftedPartition};

/// Per-`(subcell, continuum)` averages; `None` marks empty pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroAverages {
    pub values: Vec<[Option<f64>; NUM_CONTINUA]>,
}

impl MacroAverages {
    pub fn zeros(aux: &AuxiliaryBasis) -> Self {
        let n = aux.partition().num_cells();
        Self {
            values: (0..n)
                .map(|l| [0, 1].map(|i| (!aux.is_empty(l, i)).then_some(0.0)))
                .collect(),
        }
    }

    pub fn get(&self, subcell: usize, continuum: usize) -> Option<f64> {
        self.values[subcell][continuum]
    }

    /// `a·self + b·other` on the nonempty pieces.
    pub fn combine(&self, a: f64, other: &MacroAverages, b: f64) -> MacroAverages {
        MacroAverages {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| [0, 1].map(|i| x[i].zip(y[i]).map(|(x, y)| a * x + b * y)))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &MacroAverages) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(x, y)| (0..NUM_CONTINUA).filter_map(move |i| x[i].zip(y[i]).map(|(a, b)| (a - b).abs())))
            .fold(0.0, f64::max)
    }
}

/// Averages of `u` over every nonempty piece `K_l ∩ Ω_i` of continuum `i`.
pub fn project_continuum_average(u: &dyn CellValues, aux: &AuxiliaryBasis, i: usize) -> Vec<Option<f64>> {
    (0..aux.partition().num_cells())
        .map(|l| aux.entry(l, i).map(|e| aux.average(e, u)))
        .collect()
}

/// Averages over both continua.
pub fn project_averages(u: &dyn CellValues, aux: &AuxiliaryBasis) -> MacroAverages {
    let a0 = project_continuum_average(u, aux, 0);
    let a1 = project_continuum_average(u, aux, 1);
    MacroAverages {
        values: a0.into_iter().zip(a1).map(|(a, b)| [a, b]).collect(),
    }
}

/// `Σ U_{l,i} φ_{l,i}`.
pub fn downscale_nlmc(avgs: &MacroAverages, basis: &LocalizedBasisSet, grid: FineGrid) -> Result<FineFunction> {
    let mut u = FineFunction::zeros(grid, grid.whole().node_box());
    for (l, vals) in avgs.values.iter().enumerate() {
        for (i, v) in vals.iter().enumerate() {
            let Some(v) = v else { continue };
            let phi = basis
                .get(l, i)
                .ok_or_else(|| Error::Missing(format!("basis function for subcell {l}, continuum {i}")))?;
            u.axpy(*v, phi)?;
        }
    }
    Ok(u)
}

/// Uniform coarse Q1 mesh with `n` cells per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoarseMesh {
    pub n: usize,
}

impl CoarseMesh {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid("coarse mesh needs at least one cell".into()));
        }
        Ok(Self { n })
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn nodes_per_side(&self) -> usize {
        self.n + 1
    }

    pub fn num_nodes(&self) -> usize {
        (self.n + 1) * (self.n + 1)
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    pub fn node_coords(&self, id: usize) -> [f64; 2] {
        let np = self.n + 1;
        [(id % np) as f64 * self.h(), (id / np) as f64 * self.h()]
    }

    pub fn is_boundary(&self, id: usize) -> bool {
        let np = self.n + 1;
        let (i, j) = (id % np, id / np);
        i == 0 || j == 0 || i == self.n || j == self.n
    }

    /// Element containing `x` and the shape-function weights: node ids,
    /// values and gradients in local order `(0,0), (1,0), (0,1), (1,1)`.
    pub fn shape(&self, x: [f64; 2]) -> ([usize; 4], [f64; 4], [[f64; 2]; 4]) {
        let h = self.h();
        let loc = |t: f64| {
            let s = (t / h).floor().clamp(0.0, (self.n - 1) as f64);
            (s as usize, (t / h - s).clamp(0.0, 1.0))
        };
        let (ei, sx) = loc(x[0]);
        let (ej, sy) = loc(x[1]);
        let ids = [self.node(ei, ej), self.node(ei + 1, ej), self.node(ei, ej + 1), self.node(ei + 1, ej + 1)];
        let val = [(1.0 - sx) * (1.0 - sy), sx * (1.0 - sy), (1.0 - sx) * sy, sx * sy];
        let grad = [
            [-(1.0 - sy) / h, -(1.0 - sx) / h],
            [(1.0 - sy) / h, -sx / h],
            [-sy / h, (1.0 - sx) / h],
            [sy / h, sx / h],
        ];
        (ids, val, grad)
    }
}

type AnalyticFn = Arc<dyn Fn(usize, [f64; 2]) -> (f64, [f64; 2]) + Send + Sync>;

/// Macroscopic continuum fields `(U₀, U₁)`.
#[derive(Clone)]
pub enum MacroField {
    /// Bilinear interpolation of nodal values on a coarse mesh.
    Nodal { mesh: CoarseMesh, values: [Vec<f64>; NUM_CONTINUA] },
    /// Values and gradients given directly per cell of a partition.
    CellSampled(Vec<MacroSample>),
    /// Closed form returning value and gradient of continuum `i` at `x`.
    Analytic(AnalyticFn),
}

impl std::fmt::Debug for MacroField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MacroField::Nodal { mesh, .. } => write!(f, "Nodal({} cells per side)", mesh.n),
            MacroField::CellSampled(s) => write!(f, "CellSampled({} cells)", s.len()),
            MacroField::Analytic(_) => write!(f, "Analytic"),
        }
    }
}

/// Value and gradient of both continua at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MacroSample {
    pub value: [f64; NUM_CONTINUA],
    /// `grad[i][k] = ∂_k U_i`.
    pub grad: [[f64; 2]; NUM_CONTINUA],
}

impl MacroSample {
    /// Coefficients in cell-solution order `η₀, η₁, η₀^(1), η₀^(2), η₁^(1), η₁^(2)`.
    pub fn coefficients(&self) -> [f64; NUM_BASIS] {
        let mut e = [0.0; NUM_BASIS];
        for i in 0..NUM_CONTINUA {
            e[con(i)] = self.value[i];
            for k in 0..2 {
                e[lin(i, k)] = self.grad[i][k];
            }
        }
        e
    }
}

/// How macro values are taken on each cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingRule {
    /// Point value and gradient at the nominal cell center.
    #[default]
    Center,
    /// Cell averages of value and gradient (3×3 Gauss rule per cell).
    LocalAverage,
}

impl MacroField {
    pub fn eval(&self, x: [f64; 2]) -> Result<MacroSample> {
        match self {
            MacroField::Nodal { mesh, values } => {
                let (ids, w, dw) = mesh.shape(x);
                let mut s = MacroSample::default();
                for i in 0..NUM_CONTINUA {
                    for a in 0..4 {
                        let v = values[i][ids[a]];
                        s.value[i] += w[a] * v;
                        s.grad[i][0] += dw[a][0] * v;
                        s.grad[i][1] += dw[a][1] * v;
                    }
                }
                Ok(s)
            }
            MacroField::Analytic(f) => {
                let mut s = MacroSample::default();
                for i in 0..NUM_CONTINUA {
                    let (v, g) = f(i, x);
                    s.value[i] = v;
                    s.grad[i] = g;
                }
                Ok(s)
            }
            MacroField::CellSampled(_) => Err(Error::Missing("cell-sampled data has no point evaluation".into())),
        }
    }

    /// Samples per cell of `p`.
    pub fn sample(&self, p: &ShiftedPartition, rule: SamplingRule) -> Result<Vec<MacroSample>> {
        if let MacroField::CellSampled(s) = self {
            if s.len() != p.num_cells() {
                return Err(Error::Missing(format!(
                    "{} samples for {} cells",
                    s.len(),
                    p.num_cells()
                )));
            }
            return Ok(s.clone());
        }
        let h = p.grid().h();
        p.cells()
            .iter()
            .map(|c| match rule {
                SamplingRule::Center => self.eval(c.center),
                SamplingRule::LocalAverage => {
                    let g = [0.5 - 0.5 * (0.6f64).sqrt(), 0.5, 0.5 + 0.5 * (0.6f64).sqrt()];
                    let w = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];
                    let (x0, y0) = (c.bbox.x0 as f64 * h, c.bbox.y0 as f64 * h);
                    let (lx, ly) = (c.bbox.nx as f64 * h, c.bbox.ny as f64 * h);
                    let mut acc = MacroSample::default();
                    for (a, ga) in g.iter().enumerate() {
                        for (b, gb) in g.iter().enumerate() {
                            let s = self.eval([x0 + ga * lx, y0 + gb * ly])?;
                            let wt = w[a] * w[b];
                            for i in 0..NUM_CONTINUA {
                                acc.value[i] += wt * s.value[i];
                                acc.grad[i][0] += wt * s.grad[i][0];
                                acc.grad[i][1] += wt * s.grad[i][1];
                            }
                        }
                    }
                    Ok(acc)
                }
            })
            .collect()
    }
}

/// `Σ_cells χ_K Σ_i [U_i(x_l) η_i + Σ_k ∂_k U_i(x_l) η_i^(k)]`, broken
/// across cell faces. Continua without cell solutions contribute nothing.
pub fn downscale_linear(samples: &[MacroSample], cells: &[CellSolutionSet], grid: FineGrid) -> Result<BrokenFunction> {
    if samples.len() != cells.len() {
        return Err(Error::Missing(format!(
            "{} macro samples for {} cell solution sets",
            samples.len(),
            cells.len()
        )));
    }
    let mut out = BrokenFunction::zeros(grid);
    for (s, set) in samples.iter().zip(cells) {
        let e = s.coefficients();
        for (a, c) in e.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            if let Some(f) = set.basis(a) {
                out.add_restricted(*c, f, set.region)?;
            }
        }
    }
    Ok(out)
}
