//! High-contrast coefficient fields and their two-continuum decomposition.

use std::io::Write;
use std::path::Path;

use rand::rngs::ChaCha8Rng;
use rand::{RngExt, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binfmt::{self, BinaryArray, Layout};
use crate::error::{Error, Result};
use crate::mesh::{FineGrid, ShiftedPartition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MediumKind {
    #[default]
    Constant,
    PeriodicInclusions,
    Channels,
    ChannelsWithInclusions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    #[default]
    Horizontal,
    Vertical,
    Both,
}

/// Parameters of a generated medium. Lengths are in domain units and must
/// be multiples of the fine cell width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySpec {
    pub kind: MediumKind,
    pub kappa_low: f64,
    pub kappa_high: f64,
    /// Period of the inclusion lattice.
    pub period: f64,
    /// Side length of the square inclusion centred in each period cell.
    pub inclusion: f64,
    pub channels: usize,
    pub channel_width: f64,
    pub orientation: Orientation,
    /// Maximum random displacement of each channel.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            kind: MediumKind::Constant,
            kappa_low: 1.0,
            kappa_high: 1e4,
            period: 1.0 / 16.0,
            inclusion: 1.0 / 32.0,
            channels: 2,
            channel_width: 1.0 / 32.0,
            orientation: Orientation::Horizontal,
            jitter: 0.0,
            seed: 0,
        }
    }
}

impl GeometrySpec {
    pub fn constant(kappa: f64) -> Self {
        Self {
            kind: MediumKind::Constant,
            kappa_low: kappa,
            kappa_high: kappa,
            ..Self::default()
        }
    }

    pub fn channels(count: usize, width: f64, kappa_low: f64, kappa_high: f64) -> Self {
        Self {
            kind: MediumKind::Channels,
            kappa_low,
            kappa_high,
            channels: count,
            channel_width: width,
            ..Self::default()
        }
    }

    pub fn periodic_inclusions(period: f64, inclusion: f64, kappa_low: f64, kappa_high: f64) -> Self {
        Self {
            kind: MediumKind::PeriodicInclusions,
            kappa_low,
            kappa_high,
            period,
            inclusion,
            ..Self::default()
        }
    }
}

/// Scalar coefficient `κ > 0`, constant on each fine cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    grid: FineGrid,
    values: Vec<f64>,
    min: f64,
    max: f64,
}

impl CoefficientField {
    pub fn new(grid: FineGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_cells() {
            return Err(Error::InvalidField(format!(
                "expected {} cell values, got {}",
                grid.num_cells(),
                values.len()
            )));
        }
        if let Some((k, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidField(format!("cell {k} has non-positive or non-finite value {v}")));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(0.0, f64::max);
        Ok(Self { grid, values, min, max })
    }

    pub fn constant(grid: FineGrid, kappa: f64) -> Result<Self> {
        Self::new(grid, vec![kappa; grid.num_cells()])
    }

    pub fn grid(&self) -> &FineGrid {
        &self.grid
    }

    #[inline]
    pub fn value(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.cell_id(i, j)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    /// `κ_max / κ_min`.
    pub fn contrast(&self) -> f64 {
        self.max / self.min
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.grid, self.values.iter().map(|v| v * c).collect())
    }

    pub fn to_binary(&self) -> BinaryArray {
        BinaryArray::full_cells(self.grid.n_per_side(), self.values.clone())
    }

    pub fn from_binary(a: &BinaryArray) -> Result<Self> {
        let grid = FineGrid::new(a.n_per_side)?;
        if a.layout != Layout::Cells || a.window != [0, 0, a.n_per_side, a.n_per_side] {
            return Err(Error::Format("coefficient files hold full-grid cell values".into()));
        }
        Self::new(grid, a.values.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binfmt::save(path, &self.to_binary())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_binary(&binfmt::load(path)?)
    }
}

/// `κ_max / κ_min` of a field.
pub fn contrast(field: &CoefficientField) -> f64 {
    field.contrast()
}

/// Per-fine-cell continuum label: 0 for `Ω₀` (low κ), 1 for `Ω₁` (high κ).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContinuumMap {
    grid: FineGrid,
    labels: Vec<u8>,
}

impl ContinuumMap {
    pub fn new(grid: FineGrid, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.num_cells() || labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidField("labels must be 0/1, one per fine cell".into()));
        }
        Ok(Self { grid, labels })
    }

    /// Labels cells with `κ > threshold` as continuum 1.
    pub fn from_threshold(field: &CoefficientField, threshold: f64) -> Self {
        Self {
            grid: *field.grid(),
            labels: field.values().iter().map(|&v| u8::from(v > threshold)).collect(),
        }
    }

    /// Thresholds at the geometric mean `√(κ_min κ_max)`.
    pub fn from_field(field: &CoefficientField) -> Self {
        Self::from_threshold(field, (field.min() * field.max()).sqrt())
    }

    pub fn grid(&self) -> &FineGrid {
        &self.grid
    }

    #[inline]
    pub fn label(&self, cell: usize) -> u8 {
        self.labels[cell]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, continuum: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == continuum).count()
    }

    pub fn fraction(&self, continuum: usize) -> f64 {
        self.count(continuum) as f64 / self.labels.len() as f64
    }

    /// True when `Ω₁` is empty.
    pub fn is_single_continuum(&self) -> bool {
        self.count(1) == 0
    }
}

/// Stable content hash of a medium, used to key cached cell solutions.
pub fn medium_hash(field: &CoefficientField, map: &ContinuumMap) -> String {
    let mut h = Sha256::new();
    h.update((field.grid().n_per_side() as u64).to_le_bytes());
    for v in field.values() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.update(map.labels());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `cell, i, j, kappa, label` rows.
pub fn write_field_csv<W: Write>(out: W, field: &CoefficientField, map: &ContinuumMap) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cell", "i", "j", "kappa", "label"])?;
    let g = field.grid();
    for id in 0..g.num_cells() {
        let (i, j) = g.cell_ij(id);
        w.write_record([
            id.to_string(),
            i.to_string(),
            j.to_string(),
            crate::report::fmt_f64(field.value(id)),
            map.label(id).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn snap_geom(grid: &FineGrid, length: f64, what: &str) -> Result<usize> {
    grid.snap(length, what).map_err(|e| Error::InvalidGeometry(e.to_string()))
}

/// Generates `κ` and the continuum map for `spec` on `grid`. Deterministic
/// in `(spec, grid)`.
pub fn generate_medium(spec: &GeometrySpec, grid: &FineGrid) -> Result<(CoefficientField, ContinuumMap)> {
    let lo = spec.kappa_low;
    let hi = spec.kappa_high;
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
        return Err(Error::InvalidGeometry(format!(
            "need 0 < kappa_low <= kappa_high, got {lo} and {hi}"
        )));
    }
    let n = grid.n_per_side();
    let mut high = vec![false; grid.num_cells()];

    let with_inclusions = matches!(spec.kind, MediumKind::PeriodicInclusions | MediumKind::ChannelsWithInclusions);
    let with_channels = matches!(spec.kind, MediumKind::Channels | MediumKind::ChannelsWithInclusions);

    if with_inclusions {
        let p = snap_geom(grid, spec.period, "period")?;
        let s = snap_geom(grid, spec.inclusion, "inclusion size")?;
        if p == 0 || s == 0 || s > p {
            return Err(Error::InvalidGeometry(format!(
                "inclusion of {s} cells does not fit a period of {p} cells"
            )));
        }
        let off = (p - s) / 2;
        for j in 0..n {
            for i in 0..n {
                let (a, b) = (i % p, j % p);
                if (off..off + s).contains(&a) && (off..off + s).contains(&b) {
                    high[grid.cell_id(i, j)] = true;
                }
            }
        }
    }

    if with_channels {
        let w = snap_geom(grid, spec.channel_width, "channel width")?;
        let jitter = snap_geom(grid, spec.jitter, "channel jitter")? as i64;
        let count = spec.channels;
        if w == 0 || count == 0 || count * w > n {
            return Err(Error::InvalidGeometry(format!(
                "{count} channels of width {w} cells do not fit {n} cells"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut starts = Vec::with_capacity(count);
        for c in 0..count {
            let center = (c as f64 + 0.5) * n as f64 / count as f64;
            let mut start = (center - 0.5 * w as f64).round() as i64;
            if jitter > 0 {
                start += rng.random_range(-jitter..=jitter);
            }
            starts.push(start.clamp(0, (n - w) as i64) as usize);
        }
        let horizontal = matches!(spec.orientation, Orientation::Horizontal | Orientation::Both);
        let vertical = matches!(spec.orientation, Orientation::Vertical | Orientation::Both);
        for &s in &starts {
            for t in s..s + w {
                for u in 0..n {
                    if horizontal {
                        high[grid.cell_id(u, t)] = true;
                    }
                    if vertical {
                        high[grid.cell_id(t, u)] = true;
                    }
                }
            }
        }
    }

    let values = high.iter().map(|&h| if h { hi } else { lo }).collect();
    let field = CoefficientField::new(*grid, values)?;
    let map = if hi > lo {
        ContinuumMap::from_threshold(&field, (lo * hi).sqrt())
    } else {
        ContinuumMap::new(*grid, vec![0; grid.num_cells()])?
    };
    Ok((field, map))
}

/// Measures of `K ∩ Ω_i` for one partition cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellFractions {
    pub counts: [usize; 2],
    pub measures: [f64; 2],
}

impl CellFractions {
    pub fn is_empty(&self, continuum: usize) -> bool {
        self.counts[continuum] == 0
    }

    pub fn fraction(&self, continuum: usize) -> f64 {
        self.counts[continuum] as f64 / (self.counts[0] + self.counts[1]) as f64
    }
}

/// Per-(cell, continuum) measures `|K_l ∩ Ω_i|` of a partition.
pub fn volume_fractions(map: &ContinuumMap, p: &ShiftedPartition) -> Result<Vec<CellFractions>> {
    if map.grid() != p.grid() {
        return Err(Error::IncompatibleGrid(map.grid().n_per_side(), p.grid().n_per_side()));
    }
    let g = p.grid();
    let area = g.cell_area();
    Ok(p.cells()
        .iter()
        .map(|c| {
            let mut counts = [0usize; 2];
            for (i, j) in c.bbox.cells() {
                counts[map.label(g.cell_id(i, j)) as usize] += 1;
            }
            CellFractions {
                counts,
                measures: [counts[0] as f64 * area, counts[1] as f64 * area],
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_medium_is_single_continuum() {
        let g = FineGrid::new(16).unwrap();
        let (f, m) = generate_medium(&GeometrySpec::constant(1.0), &g).unwrap();
        assert!(f.values().iter().all(|&v| v == 1.0));
        assert!(m.is_single_continuum());
        assert_eq!(contrast(&f), 1.0);
    }

    #[test]
    fn channel_fraction_matches_area() {
        let g = FineGrid::new(128).unwrap();
        let spec = GeometrySpec::channels(2, 1.0 / 32.0, 1.0, 1e4);
        let (f, m) = generate_medium(&spec, &g).unwrap();
        assert_eq!(m.fraction(1), 1.0 / 16.0);
        assert_eq!(f.contrast(), 1e4);
    }

    #[test]
    fn periodic_inclusion_fraction() {
        let g = FineGrid::new(128).unwrap();
        let spec = GeometrySpec::periodic_inclusions(1.0 / 16.0, 1.0 / 32.0, 1.0, 1e3);
        let (_, m) = generate_medium(&spec, &g).unwrap();
        assert_eq!(m.count(1), 128 * 128 / 4);
    }

    #[test]
    fn contrast_examples() {
        let g = FineGrid::new(2).unwrap();
        let f = CoefficientField::new(g, vec![1.0, 1e4, 1.0, 1.0]).unwrap();
        assert_eq!(contrast(&f), 1e4);
        let f = CoefficientField::new(g, vec![0.5, 1.0, 1e6, 1.0]).unwrap();
        assert_eq!(contrast(&f), 2e6);
        assert!(CoefficientField::new(g, vec![0.0, 1.0, 1.0, 1.0]).is_err());
        assert!(CoefficientField::new(g, vec![1.0; 3]).is_err());
    }

    #[test]
    fn rejects_unresolvable_features() {
        let g = FineGrid::new(64).unwrap();
        let spec = GeometrySpec::channels(2, 0.01, 1.0, 1e4);
        assert!(matches!(generate_medium(&spec, &g), Err(Error::InvalidGeometry(_))));
        let spec = GeometrySpec::periodic_inclusions(1.0 / 16.0, 1.0 / 8.0, 1.0, 1e4);
        assert!(generate_medium(&spec, &g).is_err());
    }

    #[test]
    fn jittered_channels_are_reproducible() {
        let g = FineGrid::new(64).unwrap();
        let mut spec = GeometrySpec::channels(3, 1.0 / 32.0, 1.0, 1e4);
        spec.jitter = 3.0 / 64.0;
        spec.seed = 7;
        let (a, _) = generate_medium(&spec, &g).unwrap();
        let (b, _) = generate_medium(&spec, &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn volume_fractions_partition_each_cell() {
        let g = FineGrid::new(64).unwrap();
        let (_, m) = generate_medium(&GeometrySpec::channels(2, 1.0 / 32.0, 1.0, 1e4), &g).unwrap();
        let p = ShiftedPartition::new(g, 1.0 / 8.0, [1.0 / 64.0, 0.0]).unwrap();
        let vf = volume_fractions(&m, &p).unwrap();
        for (c, f) in p.cells().iter().zip(&vf) {
            assert_eq!(f.counts[0] + f.counts[1], c.bbox.num_cells());
            let total = f.measures[0] + f.measures[1];
            assert!((total - c.bbox.measure(&g)).abs() < 1e-15);
        }
        // Channels occupy rows [15, 17) and [47, 49): the cell [8, 16) in y
        // sees 1 of its 8 rows inside the channel.
        let cell = p.id_of([2, 1]);
        assert_eq!(vf[cell].fraction(1), 1.0 / 8.0);
        // A cell strictly between channels has no continuum-1 part.
        assert!(vf[p.id_of([2, 3])].is_empty(1));
    }

    #[test]
    fn constant_medium_fractions_flag_empty_continuum() {
        let g = FineGrid::new(16).unwrap();
        let (_, m) = generate_medium(&GeometrySpec::constant(1.0), &g).unwrap();
        let p = ShiftedPartition::new(g, 0.25, [0.0, 0.0]).unwrap();
        let vf = volume_fractions(&m, &p).unwrap();
        assert!(vf.iter().all(|f| f.is_empty(1) && f.measures[1] == 0.0));
    }

    #[test]
    fn field_binary_round_trip() {
        let g = FineGrid::new(8).unwrap();
        let (f, _) = generate_medium(&GeometrySpec::channels(2, 1.0 / 8.0, 1.0, 1e4), &g).unwrap();
        let mut buf = Vec::new();
        binfmt::write_array(&mut buf, &f.to_binary()).unwrap();
        let back = CoefficientField::from_binary(&binfmt::read_array(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(f, back);
    }

    #[test]
    fn generation_is_pure() {
        let g = FineGrid::new(32).unwrap();
        let spec = GeometrySpec {
            kind: MediumKind::ChannelsWithInclusions,
            channels: 2,
            channel_width: 1.0 / 32.0,
            period: 1.0 / 8.0,
            inclusion: 1.0 / 16.0,
            ..GeometrySpec::default()
        };
        let a = generate_medium(&spec, &g).unwrap();
        let b = generate_medium(&spec, &g).unwrap();
        assert_eq!(a, b);
        assert_eq!(medium_hash(&a.0, &a.1), medium_hash(&b.0, &b.1));
    }
}
