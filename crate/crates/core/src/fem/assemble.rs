use super::sparse::CsrMatrix;
use super::{FineFunction, ELEMENT_MASS, ELEMENT_STIFFNESS};
use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::mesh::{CellBox, FineGrid, NodeBox};

const NONE: usize = usize::MAX;

/// Treatment of the nodes on the boundary of the assembly box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Every node of the box is a dof.
    Free,
    /// Nodes on the boundary of the box are fixed to zero.
    Dirichlet,
}

/// Numbering of the degrees of freedom of a box of fine cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    grid: FineGrid,
    cells: CellBox,
    nodes: NodeBox,
    node_to_dof: Vec<usize>,
    dof_to_node: Vec<usize>,
}

impl DofMap {
    pub fn new(grid: FineGrid, cells: CellBox, bc: Boundary) -> Result<Self> {
        if cells.is_empty() || !grid.whole().contains_box(&cells) {
            return Err(Error::EmptySupport);
        }
        let nodes = cells.node_box();
        let mut node_to_dof = vec![NONE; nodes.len()];
        let mut dof_to_node = Vec::new();
        for (k, (i, j)) in nodes.nodes().enumerate() {
            if bc == Boundary::Free || !nodes.on_boundary(i, j) {
                node_to_dof[k] = dof_to_node.len();
                dof_to_node.push(k);
            }
        }
        if dof_to_node.is_empty() {
            return Err(Error::EmptySupport);
        }
        Ok(Self {
            grid,
            cells,
            nodes,
            node_to_dof,
            dof_to_node,
        })
    }

    pub fn grid(&self) -> &FineGrid {
        &self.grid
    }

    pub fn cells(&self) -> CellBox {
        self.cells
    }

    pub fn nodes(&self) -> NodeBox {
        self.nodes
    }

    pub fn len(&self) -> usize {
        self.dof_to_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dof_to_node.is_empty()
    }

    /// Dof of grid node `(i, j)`, if any.
    #[inline]
    pub fn dof(&self, i: usize, j: usize) -> Option<usize> {
        self.nodes
            .index(i, j)
            .and_then(|k| (self.node_to_dof[k] != NONE).then_some(self.node_to_dof[k]))
    }

    /// Grid node of a dof.
    pub fn node(&self, dof: usize) -> (usize, usize) {
        self.nodes.ij(self.dof_to_node[dof])
    }

    /// Expands a dof vector into a function on the node box.
    pub fn to_function(&self, x: &[f64]) -> FineFunction {
        let mut values = vec![0.0; self.nodes.len()];
        for (d, &k) in self.dof_to_node.iter().enumerate() {
            values[k] = x[d];
        }
        FineFunction::new(self.grid, self.nodes, values).expect("dof vector matches node box")
    }

    /// Samples a function at the dofs.
    pub fn restrict(&self, u: &FineFunction) -> Vec<f64> {
        (0..self.len())
            .map(|d| {
                let (i, j) = self.node(d);
                u.at(i, j)
            })
            .collect()
    }
}

fn assemble_element_matrix(
    grid: &FineGrid,
    cells: CellBox,
    bc: Boundary,
    local: &[[f64; 4]; 4],
    weight: impl Fn(usize, usize) -> f64,
) -> Result<(DofMap, CsrMatrix)> {
    let dofs = DofMap::new(*grid, cells, bc)?;
    let mut t = Vec::with_capacity(16 * cells.num_cells());
    for (i, j) in cells.cells() {
        let w = weight(i, j);
        let corners = [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)].map(|(a, b)| dofs.dof(a, b));
        for (a, ra) in corners.iter().enumerate() {
            let Some(ra) = ra else { continue };
            for (b, rb) in corners.iter().enumerate() {
                let Some(rb) = rb else { continue };
                t.push((*ra, *rb, w * local[a][b]));
            }
        }
    }
    let n = dofs.len();
    Ok((dofs, CsrMatrix::from_triplets(n, t)))
}

/// Symmetric operator together with its dof numbering.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    pub dofs: DofMap,
    pub matrix: CsrMatrix,
}

impl SparseOperator {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }
}

/// Stiffness matrix `∫ κ ∇φ_a·∇φ_b` on the cells of `support` (whole grid
/// when `None`).
pub fn assemble_stiffness(field: &CoefficientField, support: Option<CellBox>, bc: Boundary) -> Result<SparseOperator> {
    let g = field.grid();
    let cells = support.unwrap_or_else(|| g.whole());
    let (dofs, matrix) = assemble_element_matrix(g, cells, bc, &ELEMENT_STIFFNESS, |i, j| field.at(i, j))?;
    Ok(SparseOperator { dofs, matrix })
}

/// Mass matrix `∫ φ_a φ_b` on the cells of `support`.
pub fn assemble_mass(grid: &FineGrid, support: Option<CellBox>, bc: Boundary) -> Result<SparseOperator> {
    let cells = support.unwrap_or_else(|| grid.whole());
    let area = grid.cell_area();
    let (dofs, matrix) = assemble_element_matrix(grid, cells, bc, &ELEMENT_MASS, |_, _| area)?;
    Ok(SparseOperator { dofs, matrix })
}

/// Load vector `∫ f φ_a` at the dofs of `dofs`, with `f` given by its
/// nodal interpolant.
pub fn load_vector(dofs: &DofMap, f: &FineFunction) -> Vec<f64> {
    let area = dofs.grid().cell_area();
    let mut b = vec![0.0; dofs.len()];
    for (i, j) in dofs.cells().cells() {
        let fv = [f.at(i, j), f.at(i + 1, j), f.at(i, j + 1), f.at(i + 1, j + 1)];
        let corners = [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)];
        for (a, (ci, cj)) in corners.iter().enumerate() {
            if let Some(d) = dofs.dof(*ci, *cj) {
                let mut s = 0.0;
                for (bb, v) in fv.iter().enumerate() {
                    s += ELEMENT_MASS[a][bb] * v;
                }
                b[d] += area * s;
            }
        }
    }
    b
}
