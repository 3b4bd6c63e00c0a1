//! Effective tensors, load moments and the coupled two-continuum macroscopic
//! system.
//!
//! For a coarse cell `K` with cell solutions `η_a` (ordered as in
//! [`crate::cells::con`] and [`crate::cells::lin`]) the Gram matrix
//! `G_ab = ∫_K κ ∇η_a·∇η_b` carries every effective coefficient:
//!
//! ```text
//! α^{ij}_{kl} = G[lin(i,k)][lin(j,l)] / H^d
//! β^{ij}_k    = G[lin(i,k)][con(j)]   / H^d
//! γ^{ij}      = G[con(i)][con(j)]     / H^d
//! ```

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::cells::{con, lin, CellSolutionSet, NUM_BASIS, NUM_CONTINUA};
use crate::downscale::{CoarseMesh, MacroField, MacroSample};
use crate::error::{Error, Result};
use crate::fem::{apply_bilinear, l2_inner, CellValues, FineFunction, ELEMENT_STIFFNESS};
use crate::field::CoefficientField;
use crate::mesh::{CellBox, ShiftedPartition, DIM};
use crate::report::fmt_f64;

/// Where a cell's tensors were integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    FullCell,
    /// Representative window `ω ⊂ K`, in fine cells.
    Rve(CellBox),
}

/// Effective coefficients of one coarse cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTensors {
    pub cell: usize,
    pub center: [f64; 2],
    /// `alpha[i][j][k][l]`
    pub alpha: [[[[f64; 2]; 2]; 2]; 2],
    /// `beta[i][j][k]`
    pub beta: [[[f64; 2]; 2]; 2],
    /// `gamma[i][j]`
    pub gamma: [[f64; 2]; 2],
    pub provenance: Provenance,
}

impl CellTensors {
    fn from_gram(cell: usize, center: [f64; 2], g: &[[f64; NUM_BASIS]; NUM_BASIS], provenance: Provenance) -> Self {
        let mut t = CellTensors {
            cell,
            center,
            alpha: Default::default(),
            beta: Default::default(),
            gamma: Default::default(),
            provenance,
        };
        for i in 0..NUM_CONTINUA {
            for j in 0..NUM_CONTINUA {
                t.gamma[i][j] = g[con(i)][con(j)];
                for k in 0..DIM {
                    t.beta[i][j][k] = g[lin(i, k)][con(j)];
                    for l in 0..DIM {
                        t.alpha[i][j][k][l] = g[lin(i, k)][lin(j, l)];
                    }
                }
            }
        }
        t
    }

    /// The 6×6 quadratic form `Tᵀ` with `e(U)ᵀ T e(V)` the cell's
    /// contribution per unit volume.
    pub fn gram(&self) -> [[f64; NUM_BASIS]; NUM_BASIS] {
        let mut g = [[0.0; NUM_BASIS]; NUM_BASIS];
        for i in 0..NUM_CONTINUA {
            for j in 0..NUM_CONTINUA {
                g[con(i)][con(j)] = self.gamma[i][j];
                for k in 0..DIM {
                    g[lin(i, k)][con(j)] = self.beta[i][j][k];
                    g[con(j)][lin(i, k)] = self.beta[i][j][k];
                    for l in 0..DIM {
                        g[lin(i, k)][lin(j, l)] = self.alpha[i][j][k][l];
                    }
                }
            }
        }
        g
    }

    /// `e(U)ᵀ T e(V)`.
    pub fn form(&self, u: &[f64; NUM_BASIS], v: &[f64; NUM_BASIS]) -> f64 {
        let g = self.gram();
        let mut s = 0.0;
        for a in 0..NUM_BASIS {
            for b in 0..NUM_BASIS {
                s += u[a] * g[a][b] * v[b];
            }
        }
        s
    }

    fn max_abs(&self) -> f64 {
        self.gram().iter().flatten().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Largest violation of `α^{ij}_{kl} = α^{ji}_{lk}` and `γ^{ij} = γ^{ji}`,
    /// relative to the largest entry.
    pub fn symmetry_violation(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                m = m.max((self.gamma[i][j] - self.gamma[j][i]).abs());
                for k in 0..2 {
                    for l in 0..2 {
                        m = m.max((self.alpha[i][j][k][l] - self.alpha[j][i][l][k]).abs());
                    }
                }
            }
        }
        let scale = self.max_abs();
        if scale == 0.0 {
            0.0
        } else {
            m / scale
        }
    }

    /// Smallest and largest eigenvalue of the symmetrized form.
    pub fn eigen_range(&self) -> (f64, f64) {
        let g = self.gram();
        let m = DMatrix::from_fn(NUM_BASIS, NUM_BASIS, |a, b| 0.5 * (g[a][b] + g[b][a]));
        let e = SymmetricEigen::new(m).eigenvalues;
        (e.min(), e.max())
    }
}

/// Effective tensors of every cell of one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveTensors {
    /// Nominal coarse size `H`.
    pub h: f64,
    pub cells: Vec<CellTensors>,
}

impl EffectiveTensors {
    pub fn max_symmetry_violation(&self) -> f64 {
        self.cells.iter().map(CellTensors::symmetry_violation).fold(0.0, f64::max)
    }

    /// Smallest ratio `λ_min / λ_max` over cells (cells with a zero form
    /// are skipped).
    pub fn min_eigen_ratio(&self) -> f64 {
        self.cells
            .iter()
            .map(|c| c.eigen_range())
            .filter(|(_, hi)| *hi > 0.0)
            .map(|(lo, hi)| lo / hi)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Gram matrix `∫_region κ ∇η_a·∇η_b` of one cell solution set.
pub fn cell_gram(field: &CoefficientField, set: &CellSolutionSet) -> Result<[[f64; NUM_BASIS]; NUM_BASIS]> {
    let basis: Vec<Option<&FineFunction>> = (0..NUM_BASIS).map(|a| set.basis(a)).collect();
    if let Some(f) = basis.iter().flatten().next() {
        if f.grid() != field.grid() {
            return Err(Error::IncompatibleGrid(f.grid().n_per_side(), field.grid().n_per_side()));
        }
    }
    let g = field.grid();
    let mut out = [[0.0; NUM_BASIS]; NUM_BASIS];
    let mut corners = [[0.0; 4]; NUM_BASIS];
    let mut grads = [[0.0; 4]; NUM_BASIS];
    for (i, j) in set.region.cells() {
        let kappa = field.value(g.cell_id(i, j));
        for a in 0..NUM_BASIS {
            corners[a] = basis[a].map_or([0.0; 4], |f| f.corners(i, j));
            for p in 0..4 {
                grads[a][p] = (0..4).map(|q| ELEMENT_STIFFNESS[p][q] * corners[a][q]).sum();
            }
        }
        for a in 0..NUM_BASIS {
            for b in a..NUM_BASIS {
                let s: f64 = (0..4).map(|p| corners[a][p] * grads[b][p]).sum();
                out[a][b] += kappa * s;
            }
        }
    }
    for a in 0..NUM_BASIS {
        for b in 0..a {
            out[a][b] = out[b][a];
        }
    }
    Ok(out)
}

/// `(|K| / (H^d |region|)) · G` for a cell solved on `region ⊆ K`.
fn region_factor(coarse: &ShiftedPartition, set: &CellSolutionSet) -> Result<f64> {
    let g = coarse.grid();
    let k = coarse.cell(set.cell).bbox;
    if !k.contains_box(&set.region) {
        return Err(Error::InvalidPartition(format!(
            "integration window of cell {} is not inside the cell",
            set.cell
        )));
    }
    Ok(k.measure(g) / (coarse.nominal_measure() * set.region.measure(g)))
}

/// Tensors from cell solutions; integrals run over each set's region, which
/// is the full cell `K` or an RVE window inside it.
pub fn assemble_effective_tensors(
    cells: &[CellSolutionSet],
    field: &CoefficientField,
    coarse: &ShiftedPartition,
) -> Result<EffectiveTensors> {
    if cells.len() != coarse.num_cells() {
        return Err(Error::Missing(format!(
            "{} cell solution sets for {} coarse cells",
            cells.len(),
            coarse.num_cells()
        )));
    }
    let out = cells
        .iter()
        .map(|set| {
            let mut g = cell_gram(field, set)?;
            let f = region_factor(coarse, set)?;
            g.iter_mut().flatten().for_each(|v| *v *= f);
            let k = coarse.cell(set.cell);
            let prov = if set.region == k.bbox {
                Provenance::FullCell
            } else {
                Provenance::Rve(set.region)
            };
            Ok(CellTensors::from_gram(set.cell, k.center, &g, prov))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EffectiveTensors {
        h: coarse.scale(),
        cells: out,
    })
}

/// RVE variant: the sets must be solved on windows `ω ⊂ K` (one per cell).
pub fn assemble_effective_tensors_rve(
    cells: &[CellSolutionSet],
    field: &CoefficientField,
    coarse: &ShiftedPartition,
) -> Result<EffectiveTensors> {
    assemble_effective_tensors(cells, field, coarse)
}

/// `m[cell][a] = ∫ f η_a` over each set's region, rescaled to the cell like
/// the tensors (factor `|K|/|region|`).
#[derive(Debug, Clone, PartialEq)]
pub struct LoadMoments {
    pub moments: Vec<[f64; NUM_BASIS]>,
}

pub fn compute_load_moments(f: &FineFunction, cells: &[CellSolutionSet], coarse: &ShiftedPartition) -> Result<LoadMoments> {
    let g = coarse.grid();
    let moments = cells
        .iter()
        .map(|set| {
            let k = coarse.cell(set.cell).bbox;
            let scale = k.measure(g) / set.region.measure(g);
            let mut m = [0.0; NUM_BASIS];
            for (a, slot) in m.iter_mut().enumerate() {
                if let Some(eta) = set.basis(a) {
                    *slot = scale * l2_inner(f, eta, Some(set.region))?;
                }
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadMoments { moments })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacroBc {
    /// No essential condition; test space `[H¹(Ω)]²`.
    #[default]
    Natural,
    /// Both continua vanish on `∂Ω`.
    Dirichlet,
}

/// Dense coupled system on the coarse mesh; dof `i·N + node` holds `U_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroSystem {
    pub mesh: CoarseMesh,
    pub bc: MacroBc,
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Dofs fixed to zero (boundary or inactive continuum).
    pub pinned: Vec<bool>,
}

/// Maps the 8 nodal unknowns around `x` to the six evaluation functionals.
fn evaluation_operator(mesh: &CoarseMesh, x: [f64; 2]) -> ([usize; 8], [[f64; 8]; NUM_BASIS]) {
    let (ids, val, grad) = mesh.shape(x);
    let nn = mesh.num_nodes();
    let mut dofs = [0; 8];
    let mut e = [[0.0; 8]; NUM_BASIS];
    for i in 0..NUM_CONTINUA {
        for a in 0..4 {
            let col = 4 * i + a;
            dofs[col] = i * nn + ids[a];
            e[con(i)][col] = val[a];
            e[lin(i, 0)][col] = grad[a][0];
            e[lin(i, 1)][col] = grad[a][1];
        }
    }
    (dofs, e)
}

/// One shift's contribution to the macro system.
pub struct ShiftData<'a> {
    pub partition: &'a ShiftedPartition,
    pub tensors: &'a EffectiveTensors,
    pub moments: &'a LoadMoments,
}

/// Assembles `Σ_K H^d e(U)ᵀ T_K e(V) = Σ_K m_K · e(V)` with values and
/// gradients of the bilinear interpolant taken at cell centers, averaged
/// over the supplied shifts.
pub fn assemble_macro_system(shifts: &[ShiftData<'_>], mesh: CoarseMesh, bc: MacroBc) -> Result<MacroSystem> {
    if shifts.is_empty() {
        return Err(Error::Missing("no shift data for the macro system".into()));
    }
    let n = NUM_CONTINUA * mesh.num_nodes();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    let w = 1.0 / shifts.len() as f64;
    for s in shifts {
        if s.tensors.cells.len() != s.partition.num_cells() || s.moments.moments.len() != s.partition.num_cells() {
            return Err(Error::Missing("tensor or moment count does not match the partition".into()));
        }
        let hd = s.partition.nominal_measure();
        for (t, m) in s.tensors.cells.iter().zip(&s.moments.moments) {
            let (dofs, e) = evaluation_operator(&mesh, t.center);
            let g = t.gram();
            // ge[a][q] = Σ_b G[a][b] e[b][q]
            let mut ge = [[0.0; 8]; NUM_BASIS];
            for p in 0..NUM_BASIS {
                for q in 0..8 {
                    ge[p][q] = (0..NUM_BASIS).map(|r| g[p][r] * e[r][q]).sum();
                }
            }
            for p in 0..8 {
                for q in 0..8 {
                    let v: f64 = (0..NUM_BASIS).map(|r| e[r][p] * ge[r][q]).sum();
                    a[(dofs[p], dofs[q])] += w * hd * v;
                }
                let rhs: f64 = (0..NUM_BASIS).map(|r| m[r] * e[r][p]).sum();
                b[dofs[p]] += w * rhs;
            }
        }
    }
    let max_diag = (0..n).map(|k| a[(k, k)].abs()).fold(0.0, f64::max);
    let mut pinned = vec![false; n];
    for (k, pin) in pinned.iter_mut().enumerate() {
        let node = k % mesh.num_nodes();
        let boundary = bc == MacroBc::Dirichlet && mesh.is_boundary(node);
        let inactive = a[(k, k)].abs() <= 1e-14 * max_diag;
        *pin = boundary || inactive;
    }
    for k in 0..n {
        if pinned[k] {
            for q in 0..n {
                a[(k, q)] = 0.0;
                a[(q, k)] = 0.0;
            }
            a[(k, k)] = 1.0;
            b[k] = 0.0;
        }
    }
    Ok(MacroSystem {
        mesh,
        bc,
        matrix: a,
        rhs: b,
        pinned,
    })
}

/// Solution of the macro system.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroSolution {
    pub mesh: CoarseMesh,
    pub values: [Vec<f64>; NUM_CONTINUA],
    pub residual: f64,
    pub min_eig: f64,
    pub max_eig: f64,
}

impl MacroSolution {
    pub fn field(&self) -> MacroField {
        MacroField::Nodal {
            mesh: self.mesh,
            values: self.values.clone(),
        }
    }
}

/// Solves the macro system; a (near-)singular matrix is reported with its
/// extreme eigenvalues.
pub fn solve_macro(sys: &MacroSystem, tol: f64) -> Result<MacroSolution> {
    let n = sys.matrix.nrows();
    let sym = 0.5 * (&sys.matrix + sys.matrix.transpose());
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let (min_eig, max_eig) = (eig.min(), eig.max());
    let scale = eig.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    if min_eig.abs() <= 1e-12 * scale || min_eig < 0.0 {
        return Err(Error::SingularSystem { min_eig, max_eig });
    }
    let x = sys
        .matrix
        .clone()
        .lu()
        .solve(&sys.rhs)
        .ok_or(Error::SingularSystem { min_eig, max_eig })?;
    let r = &sys.matrix * &x - &sys.rhs;
    let bn = sys.rhs.norm();
    let residual = if bn == 0.0 { r.norm() } else { r.norm() / bn };
    if residual > tol {
        return Err(Error::NotConverged {
            iterations: 1,
            residual,
            tol,
        });
    }
    let nn = sys.mesh.num_nodes();
    debug_assert_eq!(n, NUM_CONTINUA * nn);
    Ok(MacroSolution {
        mesh: sys.mesh,
        values: [x.rows(0, nn).iter().copied().collect(), x.rows(nn, nn).iter().copied().collect()],
        residual,
        min_eig,
        max_eig,
    })
}

/// Continuous combination `Σ_a c_a η_a` on the patch of a set.
fn combine(set: &CellSolutionSet, c: &[f64; NUM_BASIS]) -> Option<FineFunction> {
    let first = (0..NUM_BASIS).find_map(|a| set.basis(a))?;
    let mut out = FineFunction::zeros(*first.grid(), first.node_box());
    for (a, ca) in c.iter().enumerate() {
        if let Some(f) = set.basis(a) {
            out.axpy(*ca, f).ok()?;
        }
    }
    Some(out)
}

/// Per-cell comparison of `|K|·(H^{-d}-scaled tensor form)` against the
/// broken energy `a_K(P(U), P(V))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck {
    /// Largest per-cell discrepancy relative to `√(a_K(PU,PU) a_K(PV,PV))`.
    pub max_relative: f64,
    /// Totals over all cells.
    pub lhs_total: f64,
    pub rhs_total: f64,
}

/// Evaluates both sides of the averaging identity for macro data sampled
/// per cell (`u[c]`, `v[c]`), using the tensors of the same cell solutions.
pub fn verify_averaging_identity(
    u: &[MacroSample],
    v: &[MacroSample],
    tensors: &EffectiveTensors,
    cells: &[CellSolutionSet],
    field: &CoefficientField,
    coarse: &ShiftedPartition,
) -> Result<IdentityCheck> {
    if u.len() != cells.len() || v.len() != cells.len() || tensors.cells.len() != cells.len() {
        return Err(Error::Missing("macro samples, tensors and cells must align".into()));
    }
    let hd = coarse.nominal_measure();
    let g = coarse.grid();
    let mut out = IdentityCheck {
        max_relative: 0.0,
        lhs_total: 0.0,
        rhs_total: 0.0,
    };
    for (c, set) in cells.iter().enumerate() {
        let eu = u[c].coefficients();
        let ev = v[c].coefficients();
        let k = coarse.cell(set.cell).bbox;
        let scale = k.measure(g) / set.region.measure(g);
        let lhs = hd * tensors.cells[c].form(&eu, &ev);
        let (rhs, nu, nv) = match (combine(set, &eu), combine(set, &ev)) {
            (Some(pu), Some(pv)) => (
                scale * apply_bilinear(field, &pu, &pv, Some(set.region))?,
                scale * apply_bilinear(field, &pu, &pu, Some(set.region))?,
                scale * apply_bilinear(field, &pv, &pv, Some(set.region))?,
            ),
            _ => (0.0, 0.0, 0.0),
        };
        out.lhs_total += lhs;
        out.rhs_total += rhs;
        let denom = (nu * nv).sqrt();
        let rel = if denom > 0.0 {
            (lhs - rhs).abs() / denom
        } else {
            (lhs - rhs).abs()
        };
        out.max_relative = out.max_relative.max(rel);
    }
    Ok(out)
}

/// Writes `alpha.csv`, `beta.csv` and `gamma.csv` contents.
pub fn write_tensors_csv<W: Write>(t: &EffectiveTensors, alpha: W, beta: W, gamma: W) -> Result<()> {
    let mut wa = csv::Writer::from_writer(alpha);
    let mut wb = csv::Writer::from_writer(beta);
    let mut wg = csv::Writer::from_writer(gamma);
    wa.write_record(["cell_id", "center_x", "center_y", "i", "j", "k", "l", "alpha"])?;
    wb.write_record(["cell_id", "center_x", "center_y", "i", "j", "k", "beta"])?;
    wg.write_record(["cell_id", "center_x", "center_y", "i", "j", "gamma"])?;
    for c in &t.cells {
        let head = [c.cell.to_string(), fmt_f64(c.center[0]), fmt_f64(c.center[1])];
        for i in 0..2 {
            for j in 0..2 {
                let mut r = head.to_vec();
                r.extend([i.to_string(), j.to_string(), fmt_f64(c.gamma[i][j])]);
                wg.write_record(&r)?;
                for k in 0..2 {
                    let mut r = head.to_vec();
                    r.extend([i.to_string(), j.to_string(), k.to_string(), fmt_f64(c.beta[i][j][k])]);
                    wb.write_record(&r)?;
                    for l in 0..2 {
                        let mut r = head.to_vec();
                        r.extend([
                            i.to_string(),
                            j.to_string(),
                            k.to_string(),
                            l.to_string(),
                            fmt_f64(c.alpha[i][j][k][l]),
                        ]);
                        wa.write_record(&r)?;
                    }
                }
            }
        }
    }
    wa.flush()?;
    wb.flush()?;
    wg.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("cannot parse {what} from {s:?}")))
}

fn slot(cells: &mut Vec<CellTensors>, id: usize, cx: f64, cy: f64) -> usize {
    if let Some(p) = cells.iter().position(|c| c.cell == id) {
        return p;
    }
    cells.push(CellTensors {
        cell: id,
        center: [cx, cy],
        alpha: Default::default(),
        beta: Default::default(),
        gamma: Default::default(),
        provenance: Provenance::FullCell,
    });
    cells.len() - 1
}

/// Reads tensors written by [`write_tensors_csv`].
pub fn read_tensors_csv<R: Read>(h: f64, alpha: R, beta: R, gamma: R) -> Result<EffectiveTensors> {
    let mut cells: Vec<CellTensors> = Vec::new();
    let idx = |s: &str| -> Result<usize> {
        let v: usize = parse(s, "index")?;
        if v > 1 {
            return Err(Error::Format(format!("index {v} out of range")));
        }
        Ok(v)
    };
    let mut ra = csv::Reader::from_reader(alpha);
    let mut entries_a = Vec::new();
    for rec in ra.records() {
        let r = rec?;
        if r.len() != 8 {
            return Err(Error::Format("alpha rows need 8 columns".into()));
        }
        entries_a.push((
            parse::<usize>(&r[0], "cell id")?,
            parse::<f64>(&r[1], "center")?,
            parse::<f64>(&r[2], "center")?,
            [idx(&r[3])?, idx(&r[4])?, idx(&r[5])?, idx(&r[6])?],
            parse::<f64>(&r[7], "alpha")?,
        ));
    }
    for (id, cx, cy, [i, j, k, l], v) in entries_a {
        let p = slot(&mut cells, id, cx, cy);
        cells[p].alpha[i][j][k][l] = v;
    }
    let mut rb = csv::Reader::from_reader(beta);
    for rec in rb.records() {
        let r = rec?;
        if r.len() != 7 {
            return Err(Error::Format("beta rows need 7 columns".into()));
        }
        let p = slot(&mut cells, parse(&r[0], "cell id")?, parse(&r[1], "center")?, parse(&r[2], "center")?);
        cells[p].beta[idx(&r[3])?][idx(&r[4])?][idx(&r[5])?] = parse(&r[6], "beta")?;
    }
    let mut rg = csv::Reader::from_reader(gamma);
    for rec in rg.records() {
        let r = rec?;
        if r.len() != 6 {
            return Err(Error::Format("gamma rows need 6 columns".into()));
        }
        let p = slot(&mut cells, parse(&r[0], "cell id")?, parse(&r[1], "center")?, parse(&r[2], "center")?);
        cells[p].gamma[idx(&r[3])?][idx(&r[4])?] = parse(&r[5], "gamma")?;
    }
    cells.sort_by_key(|c| c.cell);
    Ok(EffectiveTensors { h, cells })
}
