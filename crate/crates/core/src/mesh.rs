//! Structured fine grid on the unit square and the shifted rectangular
//! partitions built on top of it.
//!
//! All lengths are integer multiples of the fine cell width `h = 1/n`, so a
//! partition is described exactly by integer fine-cell counts. Partitions are
//! tensor products of one-dimensional interval partitions; boundary slivers
//! are merged per axis, which keeps every cell an axis-aligned box of fine
//! cells.

use std::io::Write;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::field::ContinuumMap;

/// Spatial dimension of the tested configuration.
pub const DIM: usize = 2;

/// Uniform grid of `n × n` square cells on `[0, 1]²` with bilinear nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FineGrid {
    n: usize,
}

impl FineGrid {
    pub fn new(n_per_side: usize) -> Result<Self> {
        if n_per_side < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 cells per side, got {n_per_side}"
            )));
        }
        Ok(Self { n: n_per_side })
    }

    pub fn n_per_side(&self) -> usize {
        self.n
    }

    /// Fine cell width.
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.h() * self.h()
    }

    pub fn num_cells(&self) -> usize {
        self.n.pow(DIM as u32)
    }

    pub fn nodes_per_side(&self) -> usize {
        self.n + 1
    }

    pub fn num_nodes(&self) -> usize {
        (self.n + 1).pow(DIM as u32)
    }

    /// Row-major cell id (x fastest).
    #[inline]
    pub fn cell_id(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    #[inline]
    pub fn cell_ij(&self, id: usize) -> (usize, usize) {
        (id % self.n, id / self.n)
    }

    /// Row-major node id (x fastest).
    #[inline]
    pub fn node_id(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    #[inline]
    pub fn node_ij(&self, id: usize) -> (usize, usize) {
        (id % (self.n + 1), id / (self.n + 1))
    }

    pub fn node_coords(&self, i: usize, j: usize) -> [f64; 2] {
        [i as f64 * self.h(), j as f64 * self.h()]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [(i as f64 + 0.5) * self.h(), (j as f64 + 0.5) * self.h()]
    }

    /// Corner node ids of cell `(i, j)` in the order
    /// `(i, j), (i+1, j), (i, j+1), (i+1, j+1)`.
    #[inline]
    pub fn cell_corner_nodes(&self, i: usize, j: usize) -> [usize; 4] {
        let base = self.node_id(i, j);
        let row = self.n + 1;
        [base, base + 1, base + row, base + row + 1]
    }

    /// The box covering the whole grid.
    pub fn whole(&self) -> CellBox {
        CellBox::new(0, 0, self.n, self.n)
    }

    /// Converts a length to a fine-cell count, rejecting lengths that do not
    /// fall on grid lines.
    pub fn snap(&self, length: f64, what: &str) -> Result<usize> {
        let cells = length * self.n as f64;
        let rounded = cells.round();
        if !cells.is_finite() || rounded < 0.0 || (cells - rounded).abs() > 1e-9 * cells.abs().max(1.0) {
            return Err(Error::NonCommensurate {
                what: what.to_string(),
                value: length,
                h: self.h(),
            });
        }
        Ok(rounded as usize)
    }
}

/// Builds a uniform fine grid with `n_per_side` cells per axis.
pub fn build_fine_grid(n_per_side: usize) -> Result<FineGrid> {
    FineGrid::new(n_per_side)
}

/// Axis-aligned block of fine cells `[x0, x0 + nx) × [y0, y0 + ny)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellBox {
    pub x0: usize,
    pub y0: usize,
    pub nx: usize,
    pub ny: usize,
}

impl CellBox {
    pub const fn new(x0: usize, y0: usize, nx: usize, ny: usize) -> Self {
        Self { x0, y0, nx, ny }
    }

    pub fn from_ranges(x: Range<usize>, y: Range<usize>) -> Self {
        Self::new(x.start, y.start, x.len(), y.len())
    }

    pub fn x_range(&self) -> Range<usize> {
        self.x0..self.x0 + self.nx
    }

    pub fn y_range(&self) -> Range<usize> {
        self.y0..self.y0 + self.ny
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.nx == 0 || self.ny == 0
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.x_range().contains(&i) && self.y_range().contains(&j)
    }

    pub fn contains_box(&self, other: &CellBox) -> bool {
        other.x0 >= self.x0
            && other.y0 >= self.y0
            && other.x0 + other.nx <= self.x0 + self.nx
            && other.y0 + other.ny <= self.y0 + self.ny
    }

    pub fn intersect(&self, other: &CellBox) -> Option<CellBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = (self.x0 + self.nx).min(other.x0 + other.nx);
        let y1 = (self.y0 + self.ny).min(other.y0 + other.ny);
        (x1 > x0 && y1 > y0).then(|| CellBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// Cells of the box in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.y_range()
            .flat_map(move |j| self.x_range().map(move |i| (i, j)))
    }

    /// Nodes touching the box, including its boundary.
    pub fn node_box(&self) -> NodeBox {
        NodeBox::new(self.x0, self.y0, self.nx + 1, self.ny + 1)
    }

    pub fn center(&self, grid: &FineGrid) -> [f64; 2] {
        let h = grid.h();
        [
            (self.x0 as f64 + 0.5 * self.nx as f64) * h,
            (self.y0 as f64 + 0.5 * self.ny as f64) * h,
        ]
    }

    pub fn measure(&self, grid: &FineGrid) -> f64 {
        self.num_cells() as f64 * grid.cell_area()
    }
}

/// Axis-aligned block of nodes `[i0, i0 + ni) × [j0, j0 + nj)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeBox {
    pub i0: usize,
    pub j0: usize,
    pub ni: usize,
    pub nj: usize,
}

impl NodeBox {
    pub const fn new(i0: usize, j0: usize, ni: usize, nj: usize) -> Self {
        Self { i0, j0, ni, nj }
    }

    pub fn len(&self) -> usize {
        self.ni * self.nj
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.i0 && j >= self.j0 && i < self.i0 + self.ni && j < self.j0 + self.nj
    }

    /// Local row-major index of node `(i, j)`, if it lies in the box.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> Option<usize> {
        self.contains(i, j)
            .then(|| (j - self.j0) * self.ni + (i - self.i0))
    }

    #[inline]
    pub fn ij(&self, local: usize) -> (usize, usize) {
        (self.i0 + local % self.ni, self.j0 + local / self.ni)
    }

    pub fn on_boundary(&self, i: usize, j: usize) -> bool {
        self.contains(i, j)
            && (i == self.i0 || j == self.j0 || i + 1 == self.i0 + self.ni || j + 1 == self.j0 + self.nj)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.j0..self.j0 + self.nj).flat_map(move |j| (self.i0..self.i0 + self.ni).map(move |i| (i, j)))
    }
}

/// One interval of a one-dimensional partition, in fine-cell units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisInterval {
    pub start: usize,
    pub end: usize,
    /// Twice the nominal center, in fine-cell units (half-integers are exact).
    pub center_x2: i64,
    /// Whether a boundary sliver was absorbed into this interval.
    pub merged: bool,
}

impl AxisInterval {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Partition of `[0, n)` into intervals of nominal length `m` whose lower
/// edges lie on `s + m·ℤ`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisPartition {
    intervals: Vec<AxisInterval>,
    owner: Vec<usize>,
}

impl AxisPartition {
    fn build(n: usize, m: usize, s: usize) -> Self {
        let mut nominal = Vec::new();
        let mut lo = s as i64 - if s > 0 { m as i64 } else { 0 };
        while lo < n as i64 {
            let hi = lo + m as i64;
            let start = lo.max(0) as usize;
            let end = hi.min(n as i64) as usize;
            let center_x2 = 2 * lo + m as i64;
            let outside = center_x2 < 0 || center_x2 > 2 * n as i64;
            let thin = 4 * (end - start) < m;
            nominal.push((AxisInterval { start, end, center_x2, merged: false }, outside || thin));
            lo = hi;
        }
        // Deficient slivers only occur at the two ends of the axis; each
        // merges into its neighbour along the axis.
        let mut intervals: Vec<AxisInterval> = Vec::with_capacity(nominal.len());
        let mut pending_start: Option<usize> = None;
        for (iv, deficient) in nominal {
            if deficient && intervals.is_empty() && pending_start.is_none() {
                pending_start = Some(iv.start);
                continue;
            }
            if deficient {
                if let Some(last) = intervals.last_mut() {
                    last.end = iv.end;
                    last.merged = true;
                    continue;
                }
            }
            let mut iv = iv;
            if let Some(st) = pending_start.take() {
                iv.start = st;
                iv.merged = true;
            }
            intervals.push(iv);
        }
        if let Some(st) = pending_start {
            // Degenerate axis where nothing survived: keep the whole range.
            intervals.push(AxisInterval {
                start: st,
                end: n,
                center_x2: n as i64,
                merged: true,
            });
        }
        let mut owner = vec![0; n];
        for (k, iv) in intervals.iter().enumerate() {
            owner[iv.start..iv.end].iter_mut().for_each(|o| *o = k);
        }
        Self { intervals, owner }
    }

    pub fn intervals(&self) -> &[AxisInterval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Index of the interval containing fine cell `i`.
    pub fn owner(&self, i: usize) -> usize {
        self.owner[i]
    }
}

/// A cell of a shifted partition.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseCell {
    pub id: usize,
    /// Interval index along each axis.
    pub index: [usize; 2],
    /// Nominal center `x_l` (the surviving cell's center after merging).
    pub center: [f64; 2],
    pub bbox: CellBox,
    /// Fine cells per continuum, populated by [`ShiftedPartition::attach`].
    pub continuum_cells: Option<[Vec<usize>; 2]>,
}

impl CoarseCell {
    /// Fine cell ids in row-major order.
    pub fn fine_cells(&self, grid: &FineGrid) -> Vec<usize> {
        self.bbox.cells().map(|(i, j)| grid.cell_id(i, j)).collect()
    }
}

/// Rectangular partition of `Ω` at a given scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedPartition {
    grid: FineGrid,
    scale_cells: usize,
    shift_cells: [usize; 2],
    axes: [AxisPartition; 2],
    cells: Vec<CoarseCell>,
}

impl ShiftedPartition {
    /// Builds the partition with mesh size `scale` and shift `z`; both must
    /// fall on fine grid lines.
    pub fn new(grid: FineGrid, scale: f64, z: [f64; 2]) -> Result<Self> {
        let m = grid.snap(scale, "partition scale")?;
        let sx = grid.snap(z[0], "shift z[0]")?;
        let sy = grid.snap(z[1], "shift z[1]")?;
        Self::from_cells(grid, m, [sx, sy])
    }

    /// Same as [`ShiftedPartition::new`] with scale and shift in fine cells.
    pub fn from_cells(grid: FineGrid, scale_cells: usize, shift_cells: [usize; 2]) -> Result<Self> {
        let n = grid.n_per_side();
        if scale_cells == 0 || scale_cells > n {
            return Err(Error::InvalidPartition(format!(
                "scale of {scale_cells} fine cells is outside 1..={n}"
            )));
        }
        if shift_cells.iter().any(|&s| s >= scale_cells) {
            return Err(Error::InvalidPartition(format!(
                "shift {shift_cells:?} must lie in [0, {scale_cells}) fine cells"
            )));
        }
        let axes = [
            AxisPartition::build(n, scale_cells, shift_cells[0]),
            AxisPartition::build(n, scale_cells, shift_cells[1]),
        ];
        let h = grid.h();
        let mut cells = Vec::with_capacity(axes[0].len() * axes[1].len());
        for (iy, ivy) in axes[1].intervals().iter().enumerate() {
            for (ix, ivx) in axes[0].intervals().iter().enumerate() {
                cells.push(CoarseCell {
                    id: cells.len(),
                    index: [ix, iy],
                    center: [0.5 * ivx.center_x2 as f64 * h, 0.5 * ivy.center_x2 as f64 * h],
                    bbox: CellBox::new(ivx.start, ivy.start, ivx.len(), ivy.len()),
                    continuum_cells: None,
                });
            }
        }
        Ok(Self {
            grid,
            scale_cells,
            shift_cells,
            axes,
            cells,
        })
    }

    pub fn grid(&self) -> &FineGrid {
        &self.grid
    }

    pub fn scale(&self) -> f64 {
        self.scale_cells as f64 * self.grid.h()
    }

    pub fn scale_cells(&self) -> usize {
        self.scale_cells
    }

    pub fn shift(&self) -> [f64; 2] {
        let h = self.grid.h();
        [self.shift_cells[0] as f64 * h, self.shift_cells[1] as f64 * h]
    }

    pub fn shift_cells(&self) -> [usize; 2] {
        self.shift_cells
    }

    pub fn axis(&self, d: usize) -> &AxisPartition {
        &self.axes[d]
    }

    /// Number of cells along each axis.
    pub fn counts(&self) -> [usize; 2] {
        [self.axes[0].len(), self.axes[1].len()]
    }

    pub fn cells(&self) -> &[CoarseCell] {
        &self.cells
    }

    pub fn cell(&self, id: usize) -> &CoarseCell {
        &self.cells[id]
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn id_of(&self, index: [usize; 2]) -> usize {
        index[1] * self.axes[0].len() + index[0]
    }

    /// Id of the cell containing fine cell `(i, j)`.
    pub fn cell_at_fine(&self, i: usize, j: usize) -> usize {
        self.id_of([self.axes[0].owner(i), self.axes[1].owner(j)])
    }

    /// The index set `I_z` of nominal cell centers.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        self.cells.iter().map(|c| c.center).collect()
    }

    /// Volume `H^d` of a nominal (unmerged) cell.
    pub fn nominal_measure(&self) -> f64 {
        self.scale().powi(DIM as i32)
    }

    /// Populates per-continuum fine-cell lists.
    pub fn attach(&mut self, map: &ContinuumMap) -> Result<()> {
        if map.grid() != &self.grid {
            return Err(Error::IncompatibleGrid(
                map.grid().n_per_side(),
                self.grid.n_per_side(),
            ));
        }
        for cell in &mut self.cells {
            let mut lists: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
            for (i, j) in cell.bbox.cells() {
                let id = self.grid.cell_id(i, j);
                lists[map.label(id) as usize].push(id);
            }
            cell.continuum_cells = Some(lists);
        }
        Ok(())
    }

    /// Ranges of `sub` interval indices covering cell `cell` of `self`.
    /// Fails if the two partitions are not nested.
    pub fn sub_ranges(&self, sub: &ShiftedPartition, cell: usize) -> Result<[Range<usize>; 2]> {
        if sub.grid != self.grid {
            return Err(Error::IncompatibleGrid(sub.grid.n_per_side(), self.grid.n_per_side()));
        }
        let c = &self.cells[cell];
        let mut out = [0..0, 0..0];
        for d in 0..DIM {
            let iv = &self.axes[d].intervals()[c.index[d]];
            let a = sub.axes[d].owner(iv.start);
            let b = sub.axes[d].owner(iv.end - 1);
            let ivs = sub.axes[d].intervals();
            if ivs[a].start != iv.start || ivs[b].end != iv.end {
                return Err(Error::InvalidPartition(format!(
                    "cell {cell} is not a union of subcells along axis {d}"
                )));
            }
            out[d] = a..b + 1;
        }
        Ok(out)
    }

    /// Fine-cell box spanned by a block of cells given as index ranges.
    pub fn block_box(&self, ranges: &[Range<usize>; 2]) -> CellBox {
        let x = &self.axes[0].intervals();
        let y = &self.axes[1].intervals();
        let x0 = x[ranges[0].start].start;
        let x1 = x[ranges[0].end - 1].end;
        let y0 = y[ranges[1].start].start;
        let y1 = y[ranges[1].end - 1].end;
        CellBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Writes one CSV row per cell: id, center, bounds and fine-cell counts
    /// per continuum (empty when no continuum map is attached).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "cell_id", "center_x", "center_y", "x_min", "x_max", "y_min", "y_max", "fine_cells_0", "fine_cells_1",
        ])?;
        let h = self.grid.h();
        for c in &self.cells {
            let (n0, n1) = match &c.continuum_cells {
                Some(l) => (l[0].len().to_string(), l[1].len().to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                c.id.to_string(),
                crate::report::fmt_f64(c.center[0]),
                crate::report::fmt_f64(c.center[1]),
                crate::report::fmt_f64(c.bbox.x0 as f64 * h),
                crate::report::fmt_f64((c.bbox.x0 + c.bbox.nx) as f64 * h),
                crate::report::fmt_f64(c.bbox.y0 as f64 * h),
                crate::report::fmt_f64((c.bbox.y0 + c.bbox.ny) as f64 * h),
                n0,
                n1,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A target block of subcells enlarged by `k_layers` rings of subcells,
/// clipped to `Ω`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OversampledPatch {
    pub target: [Range<usize>; 2],
    pub members: [Range<usize>; 2],
    pub k_layers: usize,
    /// Fine cells covered by the patch.
    pub cells: CellBox,
    sub_counts: [usize; 2],
}

impl OversampledPatch {
    /// Subcell ids of the patch, row-major.
    pub fn member_ids(&self) -> Vec<usize> {
        let nx = self.sub_counts[0];
        self.members[1]
            .clone()
            .flat_map(|iy| self.members[0].clone().map(move |ix| iy * nx + ix))
            .collect()
    }

    pub fn target_ids(&self) -> Vec<usize> {
        let nx = self.sub_counts[0];
        self.target[1]
            .clone()
            .flat_map(|iy| self.target[0].clone().map(move |ix| iy * nx + ix))
            .collect()
    }

    pub fn nodes(&self) -> NodeBox {
        self.cells.node_box()
    }

    pub fn is_boundary_node(&self, i: usize, j: usize) -> bool {
        self.nodes().on_boundary(i, j)
    }

    /// Boundary mask over the patch node box (row-major).
    pub fn boundary_mask(&self) -> Vec<bool> {
        let nb = self.nodes();
        nb.nodes().map(|(i, j)| nb.on_boundary(i, j)).collect()
    }

    /// Chebyshev distance of subcell index `idx` from the target block.
    pub fn ring_of(&self, idx: [usize; 2]) -> usize {
        (0..DIM)
            .map(|d| {
                let r = &self.target[d];
                if idx[d] < r.start {
                    r.start - idx[d]
                } else if idx[d] >= r.end {
                    idx[d] + 1 - r.end
                } else {
                    0
                }
            })
            .max()
            .unwrap_or(0)
    }
}

/// Oversampled patch around a block of subcells of `sub`.
pub fn oversample_block(sub: &ShiftedPartition, target: [Range<usize>; 2], k_layers: usize) -> OversampledPatch {
    let counts = sub.counts();
    let members = [0, 1].map(|d| {
        let r = &target[d];
        r.start.saturating_sub(k_layers)..(r.end + k_layers).min(counts[d])
    });
    let cells = sub.block_box(&members);
    OversampledPatch {
        target,
        members,
        k_layers,
        cells,
        sub_counts: counts,
    }
}

/// Oversampled patch around cell `cell_id` of `p`, enlarged by `k_layers`
/// layers of cells of `p`.
pub fn oversample(p: &ShiftedPartition, cell_id: usize, k_layers: usize) -> OversampledPatch {
    let idx = p.cell(cell_id).index;
    oversample_block(p, [idx[0]..idx[0] + 1, idx[1]..idx[1] + 1], k_layers)
}

/// Oversampled patch `K⁺` around coarse cell `cell` of `coarse`, enlarged by
/// `k_layers` layers of subcells of `sub`.
pub fn oversample_coarse(
    coarse: &ShiftedPartition,
    sub: &ShiftedPartition,
    cell: usize,
    k_layers: usize,
) -> Result<OversampledPatch> {
    let target = coarse.sub_ranges(sub, cell)?;
    Ok(oversample_block(sub, target, k_layers))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cover_counts(p: &ShiftedPartition) -> Vec<usize> {
        let g = p.grid();
        let mut hits = vec![0usize; g.num_cells()];
        for c in p.cells() {
            for id in c.fine_cells(g) {
                hits[id] += 1;
            }
        }
        hits
    }

    #[test]
    fn grid_counts() {
        let g = FineGrid::new(8).unwrap();
        assert_eq!(g.num_cells(), 64);
        assert_eq!(g.num_nodes(), 81);
        let g = FineGrid::new(2).unwrap();
        assert_eq!(g.num_cells(), 4);
        assert_eq!(g.num_nodes(), 9);
        assert!(FineGrid::new(1).is_err());
        assert!(FineGrid::new(0).is_err());
    }

    #[test]
    fn corner_nodes_follow_row_major_layout() {
        let g = FineGrid::new(256).unwrap();
        assert_eq!(g.num_cells(), 65536);
        let np = 257;
        for j in 0..256 {
            for i in 0..256 {
                let c = g.cell_corner_nodes(i, j);
                assert_eq!(c, [j * np + i, j * np + i + 1, (j + 1) * np + i, (j + 1) * np + i + 1]);
                assert_eq!(g.cell_ij(g.cell_id(i, j)), (i, j));
            }
        }
    }

    #[test]
    fn unshifted_partition_has_no_merging() {
        let g = FineGrid::new(16).unwrap();
        let p = ShiftedPartition::new(g, 0.25, [0.0, 0.0]).unwrap();
        assert_eq!(p.num_cells(), 16);
        assert!(p.cells().iter().all(|c| c.bbox.nx == 4 && c.bbox.ny == 4));
        assert!(cover_counts(&p).iter().all(|&h| h == 1));
        assert_eq!(p.cell(0).center, [0.125, 0.125]);
    }

    #[test]
    fn thin_boundary_slivers_are_merged() {
        let g = FineGrid::new(16).unwrap();
        let p = ShiftedPartition::new(g, 0.25, [1.0 / 16.0, 1.0 / 16.0]).unwrap();
        assert_eq!(p.num_cells(), 16);
        assert!(cover_counts(&p).iter().all(|&h| h == 1));
        let widths: Vec<usize> = p.axis(0).intervals().iter().map(|iv| iv.len()).collect();
        assert_eq!(widths, vec![5, 4, 4, 3]);
        // The first cell absorbed the sliver [0, 1/16) and keeps the center
        // of the nominal cell [1/16, 5/16).
        assert_eq!(p.cell(0).center, [3.0 / 16.0, 3.0 / 16.0]);
    }

    #[test]
    fn half_width_slivers_are_kept() {
        let g = FineGrid::new(16).unwrap();
        let p = ShiftedPartition::new(g, 0.25, [1.0 / 8.0, 0.0]).unwrap();
        let widths: Vec<usize> = p.axis(0).intervals().iter().map(|iv| iv.len()).collect();
        assert_eq!(widths, vec![2, 4, 4, 4, 2]);
        assert_eq!(p.num_cells(), 20);
        assert!(cover_counts(&p).iter().all(|&h| h == 1));
    }

    #[test]
    fn rejects_non_commensurate_scales() {
        let g = FineGrid::new(16).unwrap();
        assert!(matches!(
            ShiftedPartition::new(g, 0.3, [0.0, 0.0]),
            Err(Error::NonCommensurate { .. })
        ));
        assert!(ShiftedPartition::new(g, 0.25, [0.01, 0.0]).is_err());
        assert!(ShiftedPartition::new(g, 0.25, [0.25, 0.0]).is_err());
    }

    #[test]
    fn oversampling_counts() {
        let g = FineGrid::new(64).unwrap();
        let sub = ShiftedPartition::new(g, 1.0 / 16.0, [0.0, 0.0]).unwrap();
        let coarse = ShiftedPartition::new(g, 0.25, [0.0, 0.0]).unwrap();

        let interior = sub.id_of([5, 6]);
        let p0 = oversample(&sub, interior, 0);
        assert_eq!(p0.member_ids(), vec![interior]);
        assert_eq!(p0.cells, sub.cell(interior).bbox);

        let c = coarse.id_of([1, 2]);
        let p = oversample_coarse(&coarse, &sub, c, 2).unwrap();
        assert_eq!(p.member_ids().len(), 64);
        assert_eq!(p.cells.nx, 8 * 4);

        // Corner cell with three layers: clipped at two faces.
        let corner = sub.id_of([0, 0]);
        let pc = oversample(&sub, corner, 3);
        let mut expected = 0;
        for iy in 0..16usize {
            for ix in 0..16usize {
                if ix.max(iy) <= 3 {
                    expected += 1;
                }
            }
        }
        assert_eq!(pc.member_ids().len(), expected);
        assert_eq!(expected, 16);
    }

    #[test]
    fn boundary_mask_marks_patch_faces() {
        let g = FineGrid::new(16).unwrap();
        let sub = ShiftedPartition::new(g, 0.25, [0.0, 0.0]).unwrap();
        let p = oversample(&sub, 0, 1);
        let mask = p.boundary_mask();
        let nb = p.nodes();
        assert_eq!(mask.len(), 9 * 9);
        let marked = mask.iter().filter(|&&m| m).count();
        assert_eq!(marked, 4 * 8);
        assert!(mask[nb.index(0, 0).unwrap()]);
        assert!(!mask[nb.index(4, 4).unwrap()]);
    }

    #[test]
    fn nested_partitions_resolve_sub_ranges() {
        let g = FineGrid::new(64).unwrap();
        let coarse = ShiftedPartition::new(g, 0.25, [1.0 / 16.0, 0.0]).unwrap();
        let sub = ShiftedPartition::new(g, 1.0 / 16.0, [0.0, 0.0]).unwrap();
        for c in coarse.cells() {
            let r = coarse.sub_ranges(&sub, c.id).unwrap();
            assert_eq!(sub.block_box(&r), c.bbox);
        }
        let odd = ShiftedPartition::new(g, 1.0 / 8.0, [0.0, 0.0]).unwrap();
        assert!(coarse.sub_ranges(&odd, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partitions_tile_the_domain(n in 4usize..48, m_frac in 1usize..8, sx in 0usize..64, sy in 0usize..64) {
                let m = (n / m_frac).max(1);
                let g = FineGrid::new(n).unwrap();
                let p = ShiftedPartition::from_cells(g, m, [sx % m, sy % m]).unwrap();
                let hits = cover_counts(&p);
                prop_assert!(hits.iter().all(|&h| h == 1));
                let total: usize = p.cells().iter().map(|c| c.bbox.num_cells()).sum();
                prop_assert_eq!(total, n * n);
                for c in p.cells() {
                    prop_assert!(4 * c.bbox.nx >= m && 4 * c.bbox.ny >= m);
                }
            }

            #[test]
            fn oversampling_is_monotone(n in 8usize..40, m in 1usize..6, k in 0usize..5, pick in 0usize..1000) {
                let g = FineGrid::new(n).unwrap();
                let p = ShiftedPartition::from_cells(g, m.min(n), [0, 0]).unwrap();
                let cell = pick % p.num_cells();
                let a = oversample(&p, cell, k);
                let b = oversample(&p, cell, k + 1);
                prop_assert!(b.cells.contains_box(&a.cells));
                let bm = b.member_ids();
                prop_assert!(a.member_ids().iter().all(|id| bm.contains(id)));
                prop_assert!(a.member_ids().contains(&cell));
            }
        }
    }
}
