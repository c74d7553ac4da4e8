//! Uniform Cartesian grids carrying multi-component samples.
//!
//! A [`GridField`] stores `rank` scalar components per node of a rectangular
//! lattice with one shared spacing along every axis. It is the exchange type
//! between the samplers, the norm estimators, and the PDE layer: matrices are
//! stored as `rank = n*n` components, vectors as `rank = n`, and callers fix
//! the component ordering convention themselves.
//!
//! Nodes of the [`GridField::centered_cube`] constructor are cell centers, so
//! no node ever lands exactly on a coordinate hyperplane. That keeps samples
//! of weakly differentiable expressions such as `abs(x1)^0.6` away from the
//! kink where their derivative formulas degrade.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors for grid construction and serialization.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid shape must be nonempty with positive extents")]
    EmptyShape,
    #[error("vector of length {found} does not match grid dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("component index {c} out of range for rank {rank}")]
    ComponentRange { c: usize, rank: usize },
    #[error("spacing must be positive and finite, got {0}")]
    BadSpacing(f64),
    #[error("value buffer holds {found} entries, expected {expected}")]
    ValueCount { expected: usize, found: usize },
    #[error("not a grid dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Multi-component samples on a uniform rectangular lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    shape: Vec<usize>,
    spacing: f64,
    origin: Vec<f64>,
    rank: usize,
    boundary_margin: usize,
    /// Component-major storage: component `c` occupies the contiguous block
    /// `values[c * num_nodes .. (c + 1) * num_nodes]`, nodes in row-major
    /// order with the last axis fastest.
    values: Vec<f64>,
}

impl GridField {
    /// Zero-filled grid. `boundary_margin` counts cells near each face that
    /// downstream cutoffs treat as expendable; it does not affect storage.
    pub fn new(
        shape: &[usize],
        spacing: f64,
        origin: &[f64],
        rank: usize,
        boundary_margin: usize,
    ) -> Result<Self, GridError> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(GridError::EmptyShape);
        }
        if origin.len() != shape.len() {
            return Err(GridError::DimensionMismatch {
                expected: shape.len(),
                found: origin.len(),
            });
        }
        if rank == 0 {
            return Err(GridError::ZeroRank);
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(GridError::BadSpacing(spacing));
        }
        let nodes: usize = shape.iter().product();
        Ok(GridField {
            shape: shape.to_vec(),
            spacing,
            origin: origin.to_vec(),
            rank,
            boundary_margin,
            values: vec![0.0; nodes * rank],
        })
    }

    /// Cell-centered grid with `res` cells per axis covering the cube
    /// `[-half, half]^n`. Node `i` along an axis sits at
    /// `-half + (i + 1/2) * spacing`, so the cube faces and the coordinate
    /// hyperplanes fall between nodes whenever `res` is even.
    pub fn centered_cube(
        n: usize,
        half: f64,
        res: usize,
        rank: usize,
        boundary_margin: usize,
    ) -> Result<Self, GridError> {
        if n == 0 || res == 0 {
            return Err(GridError::EmptyShape);
        }
        if !(half.is_finite() && half > 0.0) {
            return Err(GridError::BadSpacing(half));
        }
        let spacing = 2.0 * half / res as f64;
        let origin = vec![-half + 0.5 * spacing; n];
        GridField::new(&vec![res; n], spacing, &origin, rank, boundary_margin)
    }

    /// Samples `f(point, out)` at every node. `out` has `rank` slots.
    pub fn from_fn(
        shape: &[usize],
        spacing: f64,
        origin: &[f64],
        rank: usize,
        boundary_margin: usize,
        mut f: impl FnMut(&[f64], &mut [f64]),
    ) -> Result<Self, GridError> {
        let mut grid = GridField::new(shape, spacing, origin, rank, boundary_margin)?;
        let nodes = grid.num_nodes();
        let mut idx = vec![0usize; grid.n()];
        let mut point = vec![0.0; grid.n()];
        let mut out = vec![0.0; rank];
        for lin in 0..nodes {
            grid.decompose(lin, &mut idx);
            grid.node_point_into(&idx, &mut point);
            f(&point, &mut out);
            for (c, &v) in out.iter().enumerate() {
                grid.values[c * nodes + lin] = v;
            }
        }
        Ok(grid)
    }

    /// Parallel variant of [`GridField::from_fn`] for expensive samplers.
    /// Output is identical to the sequential version for the same `f`.
    pub fn from_fn_par(
        shape: &[usize],
        spacing: f64,
        origin: &[f64],
        rank: usize,
        boundary_margin: usize,
        f: impl Fn(&[f64], &mut [f64]) + Sync,
    ) -> Result<Self, GridError> {
        use rayon::prelude::*;
        let mut grid = GridField::new(shape, spacing, origin, rank, boundary_margin)?;
        let nodes = grid.num_nodes();
        let n = grid.n();
        let shape = grid.shape.clone();
        let origin_v = grid.origin.clone();
        let spacing_v = grid.spacing;
        let samples: Vec<Vec<f64>> = (0..nodes)
            .into_par_iter()
            .map(|lin| {
                let mut idx = vec![0usize; n];
                let mut rem = lin;
                for a in (0..n).rev() {
                    idx[a] = rem % shape[a];
                    rem /= shape[a];
                }
                let point: Vec<f64> = (0..n)
                    .map(|a| origin_v[a] + idx[a] as f64 * spacing_v)
                    .collect();
                let mut out = vec![0.0; rank];
                f(&point, &mut out);
                out
            })
            .collect();
        for (lin, out) in samples.iter().enumerate() {
            for (c, &v) in out.iter().enumerate() {
                grid.values[c * nodes + lin] = v;
            }
        }
        Ok(grid)
    }

    /// Grid dimension (number of axes).
    pub fn n(&self) -> usize {
        self.shape.len()
    }

    /// Extents per axis.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Shared node spacing.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Coordinates of node `(0, ..., 0)`.
    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    /// Components per node.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Cells near each face reserved for cutoff or FD one-sidedness.
    pub fn boundary_margin(&self) -> usize {
        self.boundary_margin
    }

    /// Total node count.
    pub fn num_nodes(&self) -> usize {
        self.shape.iter().product()
    }

    /// Row-major stride of `axis` in node-linear index units.
    pub fn stride(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    /// Linear node index of a multi-index.
    pub fn linear(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.n());
        let mut lin = 0usize;
        for (a, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[a]);
            lin = lin * self.shape[a] + i;
        }
        lin
    }

    /// Multi-index of a linear node index, written into `out`.
    pub fn decompose(&self, mut lin: usize, out: &mut [usize]) {
        for a in (0..self.n()).rev() {
            out[a] = lin % self.shape[a];
            lin /= self.shape[a];
        }
    }

    /// Coordinates of the node at `idx`, written into `out`.
    pub fn node_point_into(&self, idx: &[usize], out: &mut [f64]) {
        for a in 0..self.n() {
            out[a] = self.origin[a] + idx[a] as f64 * self.spacing;
        }
    }

    /// Coordinates of the node at `idx`.
    pub fn node_point(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.node_point_into(idx, &mut out);
        out
    }

    /// Value of component `c` at linear node index `lin`.
    pub fn get_lin(&self, lin: usize, c: usize) -> f64 {
        self.values[c * self.num_nodes() + lin]
    }

    /// Value of component `c` at multi-index `idx`.
    pub fn get(&self, idx: &[usize], c: usize) -> f64 {
        self.get_lin(self.linear(idx), c)
    }

    /// Sets component `c` at linear node index `lin`.
    pub fn set_lin(&mut self, lin: usize, c: usize, v: f64) {
        let nodes = self.num_nodes();
        self.values[c * nodes + lin] = v;
    }

    /// Sets component `c` at multi-index `idx`.
    pub fn set(&mut self, idx: &[usize], c: usize, v: f64) {
        self.set_lin(self.linear(idx), c, v);
    }

    /// Contiguous node-major slice of one component.
    pub fn component(&self, c: usize) -> &[f64] {
        let nodes = self.num_nodes();
        &self.values[c * nodes..(c + 1) * nodes]
    }

    /// Mutable slice of one component.
    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let nodes = self.num_nodes();
        &mut self.values[c * nodes..(c + 1) * nodes]
    }

    /// Replaces the samples of component `c`.
    pub fn set_component(&mut self, c: usize, data: &[f64]) -> Result<(), GridError> {
        if c >= self.rank {
            return Err(GridError::ComponentRange { c, rank: self.rank });
        }
        if data.len() != self.num_nodes() {
            return Err(GridError::ValueCount {
                expected: self.num_nodes(),
                found: data.len(),
            });
        }
        self.component_mut(c).copy_from_slice(data);
        Ok(())
    }

    /// Full flat value buffer, component-major.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable flat value buffer, component-major.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Sup of `|value|` over all nodes and components.
    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Sup over nodes of the Euclidean norm across components.
    pub fn sup_value_norm(&self) -> f64 {
        let nodes = self.num_nodes();
        let mut best = 0.0f64;
        for lin in 0..nodes {
            let mut s = 0.0;
            for c in 0..self.rank {
                let v = self.values[c * nodes + lin];
                s += v * v;
            }
            best = best.max(s);
        }
        best.sqrt()
    }

    /// True when `idx` lies within `boundary_margin` cells of some face.
    pub fn in_margin(&self, idx: &[usize]) -> bool {
        let m = self.boundary_margin;
        idx.iter()
            .zip(&self.shape)
            .any(|(&i, &e)| i < m || i + m >= e)
    }

    /// Fourth-order finite-difference partial derivative of component `c`
    /// along `axis`, returned in node-major order. Uses the central 5-point
    /// stencil in the interior and one-sided 5-point stencils at the two
    /// nodes nearest each face; all stencils are exact on quartics.
    pub fn fd_partial(&self, c: usize, axis: usize) -> Vec<f64> {
        let e = self.shape[axis];
        assert!(
            e >= 5,
            "axis extent must be at least 5 for fourth-order differences"
        );
        let nodes = self.num_nodes();
        let src = self.component(c);
        let mut out = vec![0.0; nodes];
        let stride = self.stride(axis);
        let lines = nodes / e;
        let inv12h = 1.0 / (12.0 * self.spacing);
        // Base linear index of each 1-D line along `axis`: enumerate nodes
        // with idx[axis] = 0 by skipping the axis block structure.
        let outer: usize = self.shape[..axis].iter().product();
        let inner = stride;
        for o in 0..outer {
            for i in 0..inner {
                let base = o * e * stride + i;
                let at = |k: usize| src[base + k * stride];
                for k in 0..e {
                    let d = if k >= 2 && k + 2 < e {
                        -at(k + 2) + 8.0 * at(k + 1) - 8.0 * at(k - 1) + at(k - 2)
                    } else if k == 0 {
                        -25.0 * at(0) + 48.0 * at(1) - 36.0 * at(2) + 16.0 * at(3) - 3.0 * at(4)
                    } else if k == 1 {
                        -3.0 * at(0) - 10.0 * at(1) + 18.0 * at(2) - 6.0 * at(3) + at(4)
                    } else if k + 1 == e {
                        25.0 * at(e - 1) - 48.0 * at(e - 2) + 36.0 * at(e - 3)
                            - 16.0 * at(e - 4)
                            + 3.0 * at(e - 5)
                    } else {
                        3.0 * at(e - 1) + 10.0 * at(e - 2) - 18.0 * at(e - 3) + 6.0 * at(e - 4)
                            - at(e - 5)
                    };
                    out[base + k * stride] = d * inv12h;
                }
            }
        }
        debug_assert_eq!(outer * inner, lines);
        out
    }

    /// Multilinear interpolation of component `c` at an arbitrary point.
    /// Coordinates are clamped to the node hull, so evaluation slightly
    /// outside the grid returns the boundary extension.
    pub fn interp(&self, point: &[f64], c: usize) -> f64 {
        let n = self.n();
        debug_assert_eq!(point.len(), n);
        let nodes = self.num_nodes();
        let src = &self.values[c * nodes..(c + 1) * nodes];
        let mut i0 = vec![0usize; n];
        let mut frac = vec![0.0f64; n];
        for a in 0..n {
            let u = (point[a] - self.origin[a]) / self.spacing;
            let top = (self.shape[a] - 1) as f64;
            let u = u.clamp(0.0, top);
            let base = (u.floor() as usize).min(self.shape[a].saturating_sub(2));
            i0[a] = base;
            frac[a] = u - base as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut lin = 0usize;
            for a in 0..n {
                let hi = (corner >> a) & 1 == 1;
                let i = if self.shape[a] == 1 {
                    0
                } else {
                    i0[a] + hi as usize
                };
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
                lin = lin * self.shape[a] + i;
            }
            acc += w * src[lin];
        }
        acc
    }

    /// Writes the grid as little-endian 64-bit floats with a fixed-layout
    /// header `{n, extents, spacing, origin, rank}`, values row-major within
    /// each component and components consecutive, plus a JSON sidecar at
    /// `<path>.json` describing the layout and the boundary margin.
    pub fn write_binary(&self, path: &Path) -> Result<(), GridError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(self.n() as u64).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        w.write_all(&self.spacing.to_le_bytes())?;
        for &o in &self.origin {
            w.write_all(&o.to_le_bytes())?;
        }
        w.write_all(&(self.rank as u64).to_le_bytes())?;
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let sidecar = serde_json::json!({
            "n": self.n(),
            "extents": self.shape,
            "spacing": self.spacing,
            "origin": self.origin,
            "rank": self.rank,
            "boundary_margin": self.boundary_margin,
            "layout": "component-major, nodes row-major, last axis fastest",
            "scalar": "little-endian f64",
        });
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| GridError::Format(e.to_string()))?;
        std::fs::write(Self::sidecar_path(path), json)?;
        Ok(())
    }

    /// Reads a grid written by [`GridField::write_binary`]. The boundary
    /// margin is recovered from the sidecar when present and defaults to 0.
    pub fn read_binary(path: &Path) -> Result<Self, GridError> {
        let mut r = BufReader::new(File::open(path)?);
        let n = read_u64(&mut r)? as usize;
        if n == 0 || n > 64 {
            return Err(GridError::Format(format!("implausible dimension {n}")));
        }
        let mut shape = Vec::with_capacity(n);
        for _ in 0..n {
            shape.push(read_u64(&mut r)? as usize);
        }
        let spacing = read_f64(&mut r)?;
        let mut origin = Vec::with_capacity(n);
        for _ in 0..n {
            origin.push(read_f64(&mut r)?);
        }
        let rank = read_u64(&mut r)? as usize;
        let boundary_margin = read_sidecar_margin(path).unwrap_or(0);
        let mut grid = GridField::new(&shape, spacing, &origin, rank, boundary_margin)?;
        let count = grid.values.len();
        for slot in grid.values.iter_mut() {
            *slot = read_f64(&mut r)?;
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(GridError::Format(format!(
                "trailing bytes after {count} values"
            )));
        }
        Ok(grid)
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_os_string();
        s.push(".json");
        PathBuf::from(s)
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64, GridError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64, GridError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_sidecar_margin(path: &Path) -> Option<usize> {
    let text = std::fs::read_to_string(GridField::sidecar_path(path)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("boundary_margin")?.as_u64().map(|m| m as usize)
}
