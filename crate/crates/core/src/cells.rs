//! Auxiliary basis and the constrained cell problems.
//!
//! Every cell problem minimizes the patch energy `∫ κ |∇u|²` with zero
//! values on the patch boundary, subject to prescribed averages of `u` over
//! each `(subcell, continuum)` piece of the patch. One factorized saddle-point
//! system per patch serves all targets posed on that patch.

use std::ops::Range;

use rayon::prelude::*;

use crate::cache::{Cache, CacheKey};
use crate::error::{Error, Result};
use crate::fem::{
    apply_bilinear, assemble_stiffness, integrate_over, Boundary, CellValues, ConstraintSet, DofMap, FineFunction,
    KktSolver, SolveStats, SolverOptions, SparseOperator, SparseRow,
};
use crate::field::{CoefficientField, ContinuumMap};
use crate::mesh::{oversample, oversample_block, CellBox, FineGrid, OversampledPatch, ShiftedPartition};

/// Number of continua.
pub const NUM_CONTINUA: usize = 2;

/// Number of cell solutions per coarse cell: one constant-representing and
/// two linear-representing solutions per continuum.
pub const NUM_BASIS: usize = 6;

/// Index of `η_i` among the six cell solutions.
#[inline]
pub const fn con(i: usize) -> usize {
    i
}

/// Index of `η_i^(k)` among the six cell solutions.
#[inline]
pub const fn lin(i: usize, k: usize) -> usize {
    2 + 2 * i + k
}

/// Default oversampling: `max(2, ⌈log₂(1/H_ε)⌉)` layers.
pub fn default_k_layers(h_eps: f64) -> usize {
    ((1.0 / h_eps).log2() - 1e-9).ceil().max(2.0) as usize
}

/// Indicator `ψ` of one nonempty `(subcell, continuum)` piece.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxEntry {
    pub subcell: usize,
    pub continuum: usize,
    /// Fine cell ids of `K_l ∩ Ω_i`.
    pub cells: Vec<usize>,
    /// `∫ ψ = |K_l ∩ Ω_i|`.
    pub measure: f64,
}

/// All indicator functions of a subcell partition.
#[derive(Debug, Clone)]
pub struct AuxiliaryBasis {
    sub: ShiftedPartition,
    lookup: Vec<[Option<usize>; NUM_CONTINUA]>,
    entries: Vec<AuxEntry>,
}

impl AuxiliaryBasis {
    pub fn build(sub: &ShiftedPartition, map: &ContinuumMap) -> Result<Self> {
        if map.grid() != sub.grid() {
            return Err(Error::IncompatibleGrid(map.grid().n_per_side(), sub.grid().n_per_side()));
        }
        let g = *sub.grid();
        let area = g.cell_area();
        let mut lookup = Vec::with_capacity(sub.num_cells());
        let mut entries = Vec::new();
        for c in sub.cells() {
            let mut lists: [Vec<usize>; NUM_CONTINUA] = Default::default();
            for (i, j) in c.bbox.cells() {
                let id = g.cell_id(i, j);
                lists[map.label(id) as usize].push(id);
            }
            let mut slot = [None; NUM_CONTINUA];
            for (i, cells) in lists.into_iter().enumerate() {
                if !cells.is_empty() {
                    slot[i] = Some(entries.len());
                    entries.push(AuxEntry {
                        subcell: c.id,
                        continuum: i,
                        measure: cells.len() as f64 * area,
                        cells,
                    });
                }
            }
            lookup.push(slot);
        }
        Ok(Self {
            sub: sub.clone(),
            lookup,
            entries,
        })
    }

    pub fn partition(&self) -> &ShiftedPartition {
        &self.sub
    }

    pub fn grid(&self) -> &FineGrid {
        self.sub.grid()
    }

    pub fn entries(&self) -> &[AuxEntry] {
        &self.entries
    }

    pub fn entry(&self, subcell: usize, continuum: usize) -> Option<&AuxEntry> {
        self.lookup[subcell][continuum].map(|k| &self.entries[k])
    }

    pub fn is_empty(&self, subcell: usize, continuum: usize) -> bool {
        self.lookup[subcell][continuum].is_none()
    }

    pub fn measure(&self, subcell: usize, continuum: usize) -> f64 {
        self.entry(subcell, continuum).map_or(0.0, |e| e.measure)
    }

    /// `∫ u ψ`.
    pub fn pairing(&self, e: &AuxEntry, u: &dyn CellValues) -> f64 {
        integrate_over(u, e.cells.iter().copied())
    }

    /// Average of `u` over the piece, `∫ u ψ / ∫ ψ`.
    pub fn average(&self, e: &AuxEntry, u: &dyn CellValues) -> f64 {
        self.pairing(e, u) / e.measure
    }

    /// The averaging functional of `e` restricted to the dofs of `dofs`.
    pub fn row(&self, e: &AuxEntry, dofs: &DofMap) -> SparseRow {
        let g = self.grid();
        let bbox = self.sub.cell(e.subcell).bbox;
        let nb = bbox.node_box();
        let mut acc = vec![0.0; nb.len()];
        let w = 0.25 * g.cell_area() / e.measure;
        for &id in &e.cells {
            let (i, j) = g.cell_ij(id);
            for (a, b) in [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)] {
                acc[nb.index(a, b).expect("corner inside subcell")] += w;
            }
        }
        let mut row = SparseRow::default();
        for (k, (i, j)) in nb.nodes().enumerate() {
            if acc[k] != 0.0 {
                if let Some(d) = dofs.dof(i, j) {
                    row.idx.push(d);
                    row.val.push(acc[k]);
                }
            }
        }
        let mut order: Vec<usize> = (0..row.idx.len()).collect();
        order.sort_by_key(|&k| row.idx[k]);
        SparseRow {
            idx: order.iter().map(|&k| row.idx[k]).collect(),
            val: order.iter().map(|&k| row.val[k]).collect(),
        }
    }
}

/// Factorized constrained problem on one oversampled patch.
pub struct PatchProblem {
    pub patch: OversampledPatch,
    pub op: SparseOperator,
    /// `(subcell, continuum)` of each constraint row.
    pub rows: Vec<(usize, usize)>,
    solver: KktSolver,
}

impl PatchProblem {
    pub fn new(field: &CoefficientField, aux: &AuxiliaryBasis, patch: OversampledPatch, opts: &SolverOptions) -> Result<Self> {
        let op = assemble_stiffness(field, Some(patch.cells), Boundary::Dirichlet)?;
        let mut c = ConstraintSet::default();
        let mut rows = Vec::new();
        for l in patch.member_ids() {
            for i in 0..NUM_CONTINUA {
                if let Some(e) = aux.entry(l, i) {
                    c.push(aux.row(e, &op.dofs), format!("subcell {l}, continuum {i}"));
                    rows.push((l, i));
                }
            }
        }
        let solver = KktSolver::new(&op.matrix, c, opts)?;
        Ok(Self { patch, op, rows, solver })
    }

    pub fn has_continuum(&self, i: usize) -> bool {
        self.rows.iter().any(|r| r.1 == i)
    }

    pub fn num_constraints(&self) -> usize {
        self.rows.len()
    }

    pub fn uses_dense_path(&self) -> bool {
        self.solver.uses_dense_path()
    }

    pub fn constraints(&self) -> &ConstraintSet {
        self.solver.constraints()
    }

    /// Minimizer with average `target(subcell, continuum)` on every piece.
    pub fn solve(&self, target: impl Fn(usize, usize) -> f64) -> Result<(FineFunction, SolveStats)> {
        let g: Vec<f64> = self.rows.iter().map(|&(l, i)| target(l, i)).collect();
        let sol = self.solver.solve(None, &g)?;
        Ok((self.op.dofs.to_function(&sol.u), sol.stats))
    }
}

/// `η_i`: average 1 on continuum-`i` pieces, 0 on the others.
pub fn solve_constant_cell(problem: &PatchProblem, cell: usize, i: usize) -> Result<(FineFunction, SolveStats)> {
    if !problem.has_continuum(i) {
        return Err(Error::EmptyContinuum { cell, continuum: i });
    }
    problem.solve(|_, c| if c == i { 1.0 } else { 0.0 })
}

/// `η_i^(dir)`: average `x_j^(dir) − x^(dir)` on continuum-`i` pieces, where
/// `x_j` is the nominal subcell center and `x = center`.
pub fn solve_linear_cell(
    problem: &PatchProblem,
    aux: &AuxiliaryBasis,
    cell: usize,
    i: usize,
    dir: usize,
    center: [f64; 2],
) -> Result<(FineFunction, SolveStats)> {
    if !problem.has_continuum(i) {
        return Err(Error::EmptyContinuum { cell, continuum: i });
    }
    let sub = aux.partition();
    problem.solve(|l, c| if c == i { sub.cell(l).center[dir] - center[dir] } else { 0.0 })
}

/// Cell solutions of one coarse cell (or RVE window).
#[derive(Debug, Clone, PartialEq)]
pub struct CellSolutionSet {
    pub cell: usize,
    /// Subcell index block of the target region.
    pub target: [Range<usize>; 2],
    /// Fine cells of the target region.
    pub region: CellBox,
    /// Reference point `x` of the linear targets.
    pub center: [f64; 2],
    pub patch: OversampledPatch,
    /// `[η_i, η_i^(1), η_i^(2)]` per continuum; `None` when the patch holds no
    /// piece of that continuum.
    pub solutions: [Option<[FineFunction; 3]>; NUM_CONTINUA],
    /// Largest constraint residual over all solves.
    pub constraint_residual: f64,
}

impl CellSolutionSet {
    /// Cell solution `a` in the order `η₀, η₁, η₀^(1), η₀^(2), η₁^(1), η₁^(2)`.
    pub fn basis(&self, a: usize) -> Option<&FineFunction> {
        let (i, slot) = if a < 2 { (a, 0) } else { ((a - 2) / 2, 1 + (a - 2) % 2) };
        self.solutions[i].as_ref().map(|s| &s[slot])
    }

    pub fn has_continuum(&self, i: usize) -> bool {
        self.solutions[i].is_some()
    }
}

/// Solves all cell problems posed on the target block `target` of subcells,
/// oversampled by `k` layers.
pub fn solve_cell_set(
    field: &CoefficientField,
    aux: &AuxiliaryBasis,
    cell: usize,
    target: [Range<usize>; 2],
    center: [f64; 2],
    k: usize,
    opts: &SolverOptions,
) -> Result<CellSolutionSet> {
    let sub = aux.partition();
    let patch = oversample_block(sub, target.clone(), k);
    let region = sub.block_box(&target);
    let problem = PatchProblem::new(field, aux, patch.clone(), opts)?;
    let mut solutions: [Option<[FineFunction; 3]>; NUM_CONTINUA] = Default::default();
    let mut residual: f64 = 0.0;
    for (i, slot) in solutions.iter_mut().enumerate() {
        if !problem.has_continuum(i) {
            continue;
        }
        let (c, s0) = solve_constant_cell(&problem, cell, i)?;
        let (x, s1) = solve_linear_cell(&problem, aux, cell, i, 0, center)?;
        let (y, s2) = solve_linear_cell(&problem, aux, cell, i, 1, center)?;
        residual = residual
            .max(s0.constraint_residual)
            .max(s1.constraint_residual)
            .max(s2.constraint_residual);
        *slot = Some([c, x, y]);
    }
    if solutions[0].is_none() && solutions[1].is_none() {
        return Err(Error::EmptyContinuum { cell, continuum: 0 });
    }
    Ok(CellSolutionSet {
        cell,
        target,
        region,
        center,
        patch,
        solutions,
        constraint_residual: residual,
    })
}

fn cached_or_solve<T: Send>(
    cache: Option<&Cache>,
    key: &CacheKey,
    load: impl FnOnce(Vec<Option<FineFunction>>) -> Option<T>,
    solve: impl FnOnce() -> Result<T>,
    store: impl FnOnce(&T) -> Vec<Option<FineFunction>>,
) -> Result<T> {
    if let Some(c) = cache {
        if let Some(v) = c.load(key).and_then(load) {
            return Ok(v);
        }
    }
    let v = solve()?;
    if let Some(c) = cache {
        c.store(key, &store(&v))?;
    }
    Ok(v)
}

/// Solves the cell problems of every coarse cell of `coarse` on patches
/// `K⁺` with `k` subcell layers. Cells are processed in parallel.
pub fn solve_coarse_cells(
    field: &CoefficientField,
    map: &ContinuumMap,
    aux: &AuxiliaryBasis,
    coarse: &ShiftedPartition,
    k: usize,
    opts: &SolverOptions,
    cache: Option<&Cache>,
) -> Result<Vec<CellSolutionSet>> {
    let sub = aux.partition();
    let medium = crate::field::medium_hash(field, map);
    (0..coarse.num_cells())
        .into_par_iter()
        .map(|c| {
            let target = coarse.sub_ranges(sub, c)?;
            let center = coarse.cell(c).center;
            let key = CacheKey::cell_set(&medium, sub, &target, center, k, opts.tol);
            solve_cell_set_cached(field, aux, c, target, center, k, opts, cache, &key)
        })
        .collect()
}

/// Cell solutions posed on an RVE window `ω` (a block of subcells), with
/// reference point at the window center.
#[allow(clippy::too_many_arguments)]
pub fn solve_rve_cell(
    field: &CoefficientField,
    map: &ContinuumMap,
    aux: &AuxiliaryBasis,
    cell: usize,
    window: [Range<usize>; 2],
    k: usize,
    opts: &SolverOptions,
    cache: Option<&Cache>,
) -> Result<CellSolutionSet> {
    let sub = aux.partition();
    let center = sub.block_box(&window).center(sub.grid());
    let key = CacheKey::cell_set(&crate::field::medium_hash(field, map), sub, &window, center, k, opts.tol);
    solve_cell_set_cached(field, aux, cell, window, center, k, opts, cache, &key)
}

#[allow(clippy::too_many_arguments)]
fn solve_cell_set_cached(
    field: &CoefficientField,
    aux: &AuxiliaryBasis,
    cell: usize,
    target: [Range<usize>; 2],
    center: [f64; 2],
    k: usize,
    opts: &SolverOptions,
    cache: Option<&Cache>,
    key: &CacheKey,
) -> Result<CellSolutionSet> {
    let sub = aux.partition();
    cached_or_solve(
        cache,
        key,
        |mut funcs| {
            if funcs.len() != NUM_CONTINUA * 3 {
                return None;
            }
            let mut solutions: [Option<[FineFunction; 3]>; NUM_CONTINUA] = Default::default();
            for (i, slot) in solutions.iter_mut().enumerate().rev() {
                let y = funcs.pop()?;
                let x = funcs.pop()?;
                let c = funcs.pop()?;
                *slot = match (c, x, y) {
                    (Some(c), Some(x), Some(y)) => Some([c, x, y]),
                    (None, None, None) => None,
                    _ => return None,
                };
                let _ = i;
            }
            Some(CellSolutionSet {
                cell,
                target: target.clone(),
                region: sub.block_box(&target),
                center,
                patch: oversample_block(sub, target.clone(), k),
                solutions,
                constraint_residual: 0.0,
            })
        },
        || solve_cell_set(field, aux, cell, target.clone(), center, k, opts),
        |set| {
            set.solutions
                .iter()
                .flat_map(|s| match s {
                    Some(f) => f.iter().cloned().map(Some).collect::<Vec<_>>(),
                    None => vec![None, None, None],
                })
                .collect()
        },
    )
}

/// Localized NLMC basis `φ_{l,i}` for every nonempty piece.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedBasisSet {
    pub k_layers: usize,
    /// Indexed by subcell, then continuum.
    pub phi: Vec<[Option<FineFunction>; NUM_CONTINUA]>,
}

impl LocalizedBasisSet {
    pub fn get(&self, subcell: usize, continuum: usize) -> Option<&FineFunction> {
        self.phi.get(subcell).and_then(|p| p[continuum].as_ref())
    }

    pub fn len(&self) -> usize {
        self.phi.iter().flatten().filter(|p| p.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `φ_{l,i}` on the `k`-layer patch of subcell `l`.
pub fn solve_localized_nlmc_basis(
    field: &CoefficientField,
    aux: &AuxiliaryBasis,
    l: usize,
    i: usize,
    k: usize,
    opts: &SolverOptions,
) -> Result<FineFunction> {
    if aux.is_empty(l, i) {
        return Err(Error::EmptyContinuum { cell: l, continuum: i });
    }
    let problem = PatchProblem::new(field, aux, oversample(aux.partition(), l, k), opts)?;
    Ok(problem.solve(|s, c| if s == l && c == i { 1.0 } else { 0.0 })?.0)
}

fn solve_subcell_basis(
    field: &CoefficientField,
    aux: &AuxiliaryBasis,
    l: usize,
    k: usize,
    opts: &SolverOptions,
) -> Result<[Option<FineFunction>; NUM_CONTINUA]> {
    let mut out: [Option<FineFunction>; NUM_CONTINUA] = Default::default();
    if (0..NUM_CONTINUA).all(|i| aux.is_empty(l, i)) {
        return Ok(out);
    }
    let problem = PatchProblem::new(field, aux, oversample(aux.partition(), l, k), opts)?;
    for (i, slot) in out.iter_mut().enumerate() {
        if !aux.is_empty(l, i) {
            *slot = Some(problem.solve(|s, c| if s == l && c == i { 1.0 } else { 0.0 })?.0);
        }
    }
    Ok(out)
}

/// Builds `φ_{l,i}` for every nonempty piece, in parallel over subcells.
pub fn build_localized_basis(
    field: &CoefficientField,
    map: &ContinuumMap,
    aux: &AuxiliaryBasis,
    k: usize,
    opts: &SolverOptions,
    cache: Option<&Cache>,
) -> Result<LocalizedBasisSet> {
    let sub = aux.partition();
    let medium = crate::field::medium_hash(field, map);
    let phi = (0..sub.num_cells())
        .into_par_iter()
        .map(|l| {
            let key = CacheKey::nlmc(&medium, sub, l, k, opts.tol);
            cached_or_solve(
                cache,
                &key,
                |mut v| {
                    if v.len() != NUM_CONTINUA {
                        return None;
                    }
                    let b = v.pop()?;
                    let a = v.pop()?;
                    Some([a, b])
                },
                || solve_subcell_basis(field, aux, l, k, opts),
                |p| p.to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LocalizedBasisSet { k_layers: k, phi })
}

/// Energy of `u` in each ring of subcells at Chebyshev distance
/// `0, 1, …, k` from the patch target.
pub fn decay_profile(
    u: &FineFunction,
    field: &CoefficientField,
    patch: &OversampledPatch,
    sub: &ShiftedPartition,
) -> Result<Vec<f64>> {
    let mut rings = vec![0.0; patch.k_layers + 1];
    for l in patch.member_ids() {
        let c = sub.cell(l);
        let r = patch.ring_of(c.index);
        rings[r] += apply_bilinear(field, u, u, Some(c.bbox))?;
    }
    Ok(rings)
}
