//! Bilinear (Q1) finite elements on the fine grid.
//!
//! Functions are stored either as continuous nodal data on a node box
//! ([`FineFunction`]) or per fine cell with four independent corner values
//! ([`BrokenFunction`]). Both expose their corner values through
//! [`CellValues`], which is all the exact element integrals need.

mod assemble;
mod solve;
mod sparse;

use std::path::Path;
use std::sync::Arc;

pub use assemble::{assemble_mass, assemble_stiffness, load_vector, Boundary, DofMap, SparseOperator};
pub use solve::{
    dense_cholesky_pivoted, solve_constrained, solve_fine_reference, solve_spd, ConstraintSet, InnerSolver,
    KktMethod, KktSolution, KktSolver, SolveStats, SolverOptions, SparseRow, SpdFactor,
};
pub use sparse::CsrMatrix;

use crate::binfmt::{self, BinaryArray, Layout};
use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::mesh::{CellBox, FineGrid, NodeBox};

/// Stiffness of `∫ ∇φ_a·∇φ_b` on a square element; independent of its size
/// in two dimensions. Local order `(0,0), (1,0), (0,1), (1,1)`.
pub const ELEMENT_STIFFNESS: [[f64; 4]; 4] = {
    const D: f64 = 2.0 / 3.0;
    const E: f64 = -1.0 / 6.0;
    const O: f64 = -1.0 / 3.0;
    [[D, E, E, O], [E, D, O, E], [E, O, D, E], [O, E, E, D]]
};

/// Mass matrix of a unit-area square element, to be scaled by `h²`.
pub const ELEMENT_MASS: [[f64; 4]; 4] = {
    const D: f64 = 4.0 / 36.0;
    const E: f64 = 2.0 / 36.0;
    const O: f64 = 1.0 / 36.0;
    [[D, E, E, O], [E, D, O, E], [E, O, D, E], [O, E, E, D]]
};

#[inline]
fn quad(m: &[[f64; 4]; 4], u: &[f64; 4], v: &[f64; 4]) -> f64 {
    let mut s = 0.0;
    for a in 0..4 {
        let mut t = 0.0;
        for b in 0..4 {
            t += m[a][b] * v[b];
        }
        s += u[a] * t;
    }
    s
}

/// Corner values of a function on each fine cell.
pub trait CellValues {
    fn grid(&self) -> &FineGrid;

    /// Values at the corners of fine cell `(i, j)` in local element order.
    fn corners(&self, i: usize, j: usize) -> [f64; 4];

    /// Fine cells on which the function may be nonzero.
    fn support(&self) -> CellBox;
}

fn check_grids(a: &FineGrid, b: &FineGrid) -> Result<()> {
    if a != b {
        return Err(Error::IncompatibleGrid(a.n_per_side(), b.n_per_side()));
    }
    Ok(())
}

fn common_region(u: &dyn CellValues, v: &dyn CellValues, region: Option<CellBox>) -> Option<CellBox> {
    let r = u.support().intersect(&v.support())?;
    match region {
        Some(reg) => r.intersect(&reg),
        None => Some(r),
    }
}

/// Broken energy form `Σ_cells ∫ κ ∇u·∇v` over `region` (whole grid when
/// `None`). Exact for piecewise-constant `κ`.
pub fn apply_bilinear(
    field: &CoefficientField,
    u: &dyn CellValues,
    v: &dyn CellValues,
    region: Option<CellBox>,
) -> Result<f64> {
    check_grids(field.grid(), u.grid())?;
    check_grids(field.grid(), v.grid())?;
    let Some(r) = common_region(u, v, region) else {
        return Ok(0.0);
    };
    let g = field.grid();
    let mut s = 0.0;
    for (i, j) in r.cells() {
        s += field.value(g.cell_id(i, j)) * quad(&ELEMENT_STIFFNESS, &u.corners(i, j), &v.corners(i, j));
    }
    Ok(s)
}

/// `∫ u v` over `region`.
pub fn l2_inner(u: &dyn CellValues, v: &dyn CellValues, region: Option<CellBox>) -> Result<f64> {
    check_grids(u.grid(), v.grid())?;
    let Some(r) = common_region(u, v, region) else {
        return Ok(0.0);
    };
    let area = u.grid().cell_area();
    let mut s = 0.0;
    for (i, j) in r.cells() {
        s += quad(&ELEMENT_MASS, &u.corners(i, j), &v.corners(i, j));
    }
    Ok(s * area)
}

/// `∫ u` over the fine cells listed in `cells`.
pub fn integrate_over(u: &dyn CellValues, cells: impl IntoIterator<Item = usize>) -> f64 {
    let g = *u.grid();
    let sup = u.support();
    let mut s = 0.0;
    for id in cells {
        let (i, j) = g.cell_ij(id);
        if sup.contains(i, j) {
            s += u.corners(i, j).iter().sum::<f64>();
        }
    }
    0.25 * g.cell_area() * s
}

/// Energy and `L²` norms over a region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub energy: f64,
    pub l2: f64,
}

pub fn norms(u: &dyn CellValues, field: &CoefficientField, region: Option<CellBox>) -> Result<Norms> {
    Ok(Norms {
        energy: apply_bilinear(field, u, u, region)?.max(0.0).sqrt(),
        l2: l2_inner(u, u, region)?.max(0.0).sqrt(),
    })
}

/// Continuous piecewise-bilinear function stored on a node box and extended
/// by zero outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct FineFunction {
    grid: FineGrid,
    nodes: NodeBox,
    values: Vec<f64>,
}

impl FineFunction {
    pub fn new(grid: FineGrid, nodes: NodeBox, values: Vec<f64>) -> Result<Self> {
        if values.len() != nodes.len() {
            return Err(Error::InvalidField(format!(
                "node box holds {} values, got {}",
                nodes.len(),
                values.len()
            )));
        }
        if nodes.i0 + nodes.ni > grid.nodes_per_side() || nodes.j0 + nodes.nj > grid.nodes_per_side() {
            return Err(Error::InvalidField("node box exceeds the grid".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidField("non-finite nodal value".into()));
        }
        Ok(Self { grid, nodes, values })
    }

    pub fn zeros(grid: FineGrid, nodes: NodeBox) -> Self {
        Self {
            grid,
            nodes,
            values: vec![0.0; nodes.len()],
        }
    }

    /// Function on all grid nodes.
    pub fn global(grid: FineGrid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, grid.whole().node_box(), values)
    }

    /// Nodal interpolant of `f` on all grid nodes.
    pub fn interpolate(grid: FineGrid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let nodes = grid.whole().node_box();
        let values = nodes.nodes().map(|(i, j)| f(grid.node_coords(i, j))).collect();
        Self { grid, nodes, values }
    }

    pub fn node_box(&self) -> NodeBox {
        self.nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Value at grid node `(i, j)`, zero outside the stored box.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        match self.nodes.index(i, j) {
            Some(k) => self.values[k],
            None => 0.0,
        }
    }

    /// `self += c·other` on the nodes of `self`; `other` must fit inside.
    pub fn axpy(&mut self, c: f64, other: &FineFunction) -> Result<()> {
        check_grids(&self.grid, &other.grid)?;
        if c == 0.0 {
            return Ok(());
        }
        for (k, (i, j)) in other.nodes.nodes().enumerate() {
            let v = other.values[k];
            if v == 0.0 {
                continue;
            }
            match self.nodes.index(i, j) {
                Some(t) => self.values[t] += c * v,
                None => {
                    return Err(Error::InvalidField(format!(
                        "node ({i}, {j}) lies outside the destination box"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Maximum absolute nodal difference.
    pub fn max_abs_diff(&self, other: &FineFunction) -> f64 {
        let mut m: f64 = 0.0;
        for (i, j) in self.nodes.nodes() {
            m = m.max((self.at(i, j) - other.at(i, j)).abs());
        }
        for (i, j) in other.nodes.nodes() {
            m = m.max((self.at(i, j) - other.at(i, j)).abs());
        }
        m
    }

    pub fn to_binary(&self) -> BinaryArray {
        BinaryArray {
            layout: Layout::Nodes,
            n_per_side: self.grid.n_per_side(),
            window: [self.nodes.i0, self.nodes.j0, self.nodes.ni, self.nodes.nj],
            values: self.values.clone(),
        }
    }

    pub fn from_binary(a: &BinaryArray) -> Result<Self> {
        if a.layout != Layout::Nodes {
            return Err(Error::Format("expected a nodal payload".into()));
        }
        let grid = FineGrid::new(a.n_per_side)?;
        let [i0, j0, ni, nj] = a.window;
        Self::new(grid, NodeBox::new(i0, j0, ni, nj), a.values.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binfmt::save(path, &self.to_binary())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_binary(&binfmt::load(path)?)
    }
}

impl CellValues for FineFunction {
    fn grid(&self) -> &FineGrid {
        &self.grid
    }

    #[inline]
    fn corners(&self, i: usize, j: usize) -> [f64; 4] {
        [self.at(i, j), self.at(i + 1, j), self.at(i, j + 1), self.at(i + 1, j + 1)]
    }

    /// Cells touching the node box.
    fn support(&self) -> CellBox {
        let n = self.grid.n_per_side();
        let x0 = self.nodes.i0.saturating_sub(1);
        let y0 = self.nodes.j0.saturating_sub(1);
        let x1 = (self.nodes.i0 + self.nodes.ni).min(n);
        let y1 = (self.nodes.j0 + self.nodes.nj).min(n);
        CellBox::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
    }
}

/// Function with four independent corner values on every fine cell of the
/// grid, used for reconstructions that are discontinuous across coarse cell
/// faces.
#[derive(Debug, Clone, PartialEq)]
pub struct BrokenFunction {
    grid: FineGrid,
    corners: Vec<[f64; 4]>,
}

impl BrokenFunction {
    pub fn zeros(grid: FineGrid) -> Self {
        Self {
            grid,
            corners: vec![[0.0; 4]; grid.num_cells()],
        }
    }

    /// Restriction of a continuous function to every fine cell.
    pub fn from_continuous(u: &FineFunction) -> Self {
        let g = *u.grid();
        let mut b = Self::zeros(g);
        for (i, j) in u.support().cells() {
            b.corners[g.cell_id(i, j)] = u.corners(i, j);
        }
        b
    }

    /// Adds `c·u` on the fine cells of `region` only.
    pub fn add_restricted(&mut self, c: f64, u: &dyn CellValues, region: CellBox) -> Result<()> {
        check_grids(&self.grid, u.grid())?;
        let Some(r) = region.intersect(&u.support()) else {
            return Ok(());
        };
        for (i, j) in r.cells() {
            let v = u.corners(i, j);
            let dst = &mut self.corners[self.grid.cell_id(i, j)];
            for a in 0..4 {
                dst[a] += c * v[a];
            }
        }
        Ok(())
    }

    /// `self += c·other` on every cell.
    pub fn axpy(&mut self, c: f64, other: &BrokenFunction) -> Result<()> {
        check_grids(&self.grid, &other.grid)?;
        for (d, s) in self.corners.iter_mut().zip(&other.corners) {
            for a in 0..4 {
                d[a] += c * s[a];
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        self.corners.iter_mut().flatten().for_each(|v| *v *= c);
    }

    pub fn cell_corners(&self) -> &[[f64; 4]] {
        &self.corners
    }

    /// Flattened corner payload: cell-major, four values per cell.
    pub fn to_binary(&self) -> BinaryArray {
        let n = self.grid.n_per_side();
        BinaryArray {
            layout: Layout::CellCorners,
            n_per_side: n,
            window: [0, 0, n, n],
            values: self.corners.iter().flatten().copied().collect(),
        }
    }
}

impl CellValues for BrokenFunction {
    fn grid(&self) -> &FineGrid {
        &self.grid
    }

    #[inline]
    fn corners(&self, i: usize, j: usize) -> [f64; 4] {
        self.corners[self.grid.cell_id(i, j)]
    }

    fn support(&self) -> CellBox {
        self.grid.whole()
    }
}

/// Difference `u − v` of two cell-valued functions, evaluated lazily.
pub struct Difference<'a> {
    pub u: &'a dyn CellValues,
    pub v: &'a dyn CellValues,
}

impl CellValues for Difference<'_> {
    fn grid(&self) -> &FineGrid {
        self.u.grid()
    }

    fn corners(&self, i: usize, j: usize) -> [f64; 4] {
        let su = self.u.support();
        let sv = self.v.support();
        let a = if su.contains(i, j) { self.u.corners(i, j) } else { [0.0; 4] };
        let b = if sv.contains(i, j) { self.v.corners(i, j) } else { [0.0; 4] };
        [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
    }

    fn support(&self) -> CellBox {
        let a = self.u.support();
        let b = self.v.support();
        let x0 = a.x0.min(b.x0);
        let y0 = a.y0.min(b.y0);
        let x1 = (a.x0 + a.nx).max(b.x0 + b.nx);
        let y1 = (a.y0 + a.ny).max(b.y0 + b.ny);
        CellBox::new(x0, y0, x1 - x0, y1 - y0)
    }
}

/// Right-hand side of the fine problem.
#[derive(Clone)]
pub enum Source {
    Constant(f64),
    /// `2π² sin(πx) sin(πy)`, whose solution for `κ = 1` is `sin(πx) sin(πy)`.
    Sine,
    Nodal(FineFunction),
    Function(Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Constant(c) => write!(f, "Constant({c})"),
            Source::Sine => write!(f, "Sine"),
            Source::Nodal(_) => write!(f, "Nodal(..)"),
            Source::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl Source {
    /// Nodal interpolant on the whole grid.
    pub fn nodal(&self, grid: FineGrid) -> Result<FineFunction> {
        Ok(match self {
            Source::Constant(c) => FineFunction::interpolate(grid, |_| *c),
            Source::Sine => FineFunction::interpolate(grid, sine_source),
            Source::Function(f) => FineFunction::interpolate(grid, |x| f(x)),
            Source::Nodal(u) => {
                check_grids(&grid, u.grid())?;
                let mut g = FineFunction::zeros(grid, grid.whole().node_box());
                g.axpy(1.0, u)?;
                g
            }
        })
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Source::Constant(c) => *c == 0.0,
            Source::Nodal(u) => u.values().iter().all(|&v| v == 0.0),
            _ => false,
        }
    }
}

pub fn sine_source(x: [f64; 2]) -> f64 {
    use std::f64::consts::PI;
    2.0 * PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin()
}

pub fn sine_solution(x: [f64; 2]) -> f64 {
    use std::f64::consts::PI;
    (PI * x[0]).sin() * (PI * x[1]).sin()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_function(grid: FineGrid, seed: u64) -> FineFunction {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand::rngs::ChaCha8Rng::seed_from_u64(seed);
        let nodes = grid.whole().node_box();
        let values = (0..nodes.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        FineFunction::new(grid, nodes, values).unwrap()
    }

    #[test]
    fn element_matrices_have_constant_kernel_and_unit_mass() {
        for row in ELEMENT_STIFFNESS {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
        let total: f64 = ELEMENT_MASS.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constants_have_zero_energy() {
        let g = FineGrid::new(8).unwrap();
        let kappa = CoefficientField::new(g, (0..64).map(|k| 1.0 + k as f64).collect()).unwrap();
        let one = FineFunction::interpolate(g, |_| 1.0);
        assert!(apply_bilinear(&kappa, &one, &one, None).unwrap().abs() < 1e-12);
        let n = norms(&one, &kappa, None).unwrap();
        assert!(n.energy < 1e-6);
        assert!((n.l2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn bilinear_form_is_symmetric_and_additive() {
        let g = FineGrid::new(8).unwrap();
        let kappa = CoefficientField::new(g, (0..64).map(|k| 1.0 + (k % 7) as f64).collect()).unwrap();
        let u = random_function(g, 1);
        let v = random_function(g, 2);
        let uv = apply_bilinear(&kappa, &u, &v, None).unwrap();
        let vu = apply_bilinear(&kappa, &v, &u, None).unwrap();
        assert!((uv - vu).abs() <= 1e-14 * uv.abs().max(1.0));

        let whole = apply_bilinear(&kappa, &u, &u, None).unwrap();
        let mut parts = 0.0;
        for (x0, y0) in [(0, 0), (3, 0), (0, 5), (3, 5)] {
            let b = CellBox::new(x0, y0, if x0 == 0 { 3 } else { 5 }, if y0 == 0 { 5 } else { 3 });
            parts += apply_bilinear(&kappa, &u, &u, Some(b)).unwrap();
        }
        assert!((whole - parts).abs() <= 1e-13 * whole);
    }

    #[test]
    fn broken_restriction_reproduces_continuous_form() {
        let g = FineGrid::new(6).unwrap();
        let kappa = CoefficientField::constant(g, 2.0).unwrap();
        let u = random_function(g, 3);
        let b = BrokenFunction::from_continuous(&u);
        let a = apply_bilinear(&kappa, &u, &u, None).unwrap();
        let c = apply_bilinear(&kappa, &b, &b, None).unwrap();
        assert!((a - c).abs() <= 1e-14 * a);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let g1 = FineGrid::new(4).unwrap();
        let g2 = FineGrid::new(8).unwrap();
        let kappa = CoefficientField::constant(g1, 1.0).unwrap();
        let u = FineFunction::interpolate(g1, |_| 1.0);
        let v = FineFunction::interpolate(g2, |_| 1.0);
        assert!(matches!(
            apply_bilinear(&kappa, &u, &v, None),
            Err(Error::IncompatibleGrid(..))
        ));
    }

    #[test]
    fn patch_functions_extend_by_zero() {
        let g = FineGrid::new(8).unwrap();
        let mut u = FineFunction::zeros(g, NodeBox::new(2, 2, 3, 3));
        u.values_mut()[4] = 1.0;
        assert_eq!(u.at(3, 3), 1.0);
        assert_eq!(u.at(0, 0), 0.0);
        assert_eq!(u.support(), CellBox::new(1, 1, 4, 4));
        // Hat function: energy 8/3 for κ = 1 and integral h².
        let kappa = CoefficientField::constant(g, 1.0).unwrap();
        let e = apply_bilinear(&kappa, &u, &u, None).unwrap();
        assert!((e - 8.0 / 3.0).abs() < 1e-14);
        let all = 0..g.num_cells();
        assert!((integrate_over(&u, all) - g.cell_area()).abs() < 1e-16);
    }

    #[test]
    fn nodal_binary_round_trip() {
        let g = FineGrid::new(4).unwrap();
        let mut u = FineFunction::zeros(g, NodeBox::new(1, 2, 3, 2));
        u.values_mut().iter_mut().enumerate().for_each(|(k, v)| *v = k as f64 / 7.0);
        let back = FineFunction::from_binary(&u.to_binary()).unwrap();
        assert_eq!(u, back);
    }
}
