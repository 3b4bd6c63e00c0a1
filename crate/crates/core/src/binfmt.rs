//! Little-endian binary container for per-cell and per-node arrays.
//!
//! Layout (all integers `u32` LE):
//!
//! ```text
//! 0   magic  b"MCHF"
//! 4   version (1)
//! 8   layout  0 = cell values, 1 = node values, 2 = four corner values per cell
//! 12  d       spatial dimension (2)
//! 16  n       fine cells per side of the parent grid
//! 20  x0, y0, nx, ny   window of the payload inside the parent grid
//! 36  payload nx·ny (·4 for corners) f64 LE, row-major with x fastest
//! ```
//!
//! A full-grid array has window `(0, 0, n, n)` for cells and
//! `(0, 0, n+1, n+1)` for nodes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MCHF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Cells = 0,
    Nodes = 1,
    /// Broken bilinear data: corner values `(i,j), (i+1,j), (i,j+1),
    /// (i+1,j+1)` of each cell in the window.
    CellCorners = 2,
}

impl Layout {
    fn per_entry(self) -> usize {
        match self {
            Layout::CellCorners => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryArray {
    pub layout: Layout,
    pub n_per_side: usize,
    /// `[x0, y0, nx, ny]`
    pub window: [usize; 4],
    pub values: Vec<f64>,
}

impl BinaryArray {
    pub fn full_cells(n_per_side: usize, values: Vec<f64>) -> Self {
        Self {
            layout: Layout::Cells,
            n_per_side,
            window: [0, 0, n_per_side, n_per_side],
            values,
        }
    }

    pub fn full_nodes(n_per_side: usize, values: Vec<f64>) -> Self {
        Self {
            layout: Layout::Nodes,
            n_per_side,
            window: [0, 0, n_per_side + 1, n_per_side + 1],
            values,
        }
    }

    fn validate(&self) -> Result<()> {
        let [x0, y0, nx, ny] = self.window;
        let extent = match self.layout {
            Layout::Cells | Layout::CellCorners => self.n_per_side,
            Layout::Nodes => self.n_per_side + 1,
        };
        if x0 + nx > extent || y0 + ny > extent {
            return Err(Error::Format(format!(
                "window {:?} exceeds grid extent {extent}",
                self.window
            )));
        }
        if nx * ny * self.layout.per_entry() != self.values.len() {
            return Err(Error::Format(format!(
                "window holds {} values but payload has {}",
                nx * ny * self.layout.per_entry(),
                self.values.len()
            )));
        }
        Ok(())
    }
}

pub fn write_array<W: Write>(mut w: W, a: &BinaryArray) -> Result<()> {
    a.validate()?;
    w.write_all(&MAGIC)?;
    let header = [
        VERSION,
        a.layout as u32,
        crate::mesh::DIM as u32,
        a.n_per_side as u32,
        a.window[0] as u32,
        a.window[1] as u32,
        a.window[2] as u32,
        a.window[3] as u32,
    ];
    for v in header {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &a.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_array<R: Read>(mut r: R) -> Result<BinaryArray> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let layout = match read_u32(&mut r)? {
        0 => Layout::Cells,
        1 => Layout::Nodes,
        2 => Layout::CellCorners,
        other => return Err(Error::Format(format!("unknown layout {other}"))),
    };
    let d = read_u32(&mut r)? as usize;
    if d != crate::mesh::DIM {
        return Err(Error::Format(format!("dimension {d} is not supported")));
    }
    let n_per_side = read_u32(&mut r)? as usize;
    let mut window = [0usize; 4];
    for w in &mut window {
        *w = read_u32(&mut r)? as usize;
    }
    let len = window[2]
        .checked_mul(window[3])
        .and_then(|v| v.checked_mul(layout.per_entry()))
        .ok_or_else(|| Error::Format("window too large".into()))?;
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let a = BinaryArray {
        layout,
        n_per_side,
        window,
        values,
    };
    a.validate()?;
    Ok(a)
}

pub fn save(path: &Path, a: &BinaryArray) -> Result<()> {
    write_array(BufWriter::new(File::create(path)?), a)
}

pub fn load(path: &Path) -> Result<BinaryArray> {
    read_array(BufReader::new(File::open(path)?))
}
