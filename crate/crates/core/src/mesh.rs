//! Uniform quadrilateral meshes of the unit square and per-cell coefficient fields.
//!
//! Nodes are numbered row-major: node `(i, j)` (column `i`, row `j`) has index
//! `j * (n + 1) + i`. Cells follow the same convention with `n` cells per row,
//! and each cell lists its nodes counter-clockwise starting at the lower-left corner.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FineMesh {
    n: usize,
    boundary: Vec<bool>,
}

impl FineMesh {
    /// Uniform `n x n` grid on `[0, 1]^2`.
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidMesh(format!(
                "need at least 2 cells per side, got {n}"
            )));
        }
        let side = n + 1;
        let mut boundary = vec![false; side * side];
        for j in 0..side {
            for i in 0..side {
                if i == 0 || j == 0 || i == n || j == n {
                    boundary[j * side + i] = true;
                }
            }
        }
        Ok(Self { n, boundary })
    }

    /// Cells per side.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn nodes_per_side(&self) -> usize {
        self.n + 1
    }

    pub fn node_count(&self) -> usize {
        (self.n + 1) * (self.n + 1)
    }

    pub fn cell_count(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    #[inline]
    pub fn cell_index(&self, ci: usize, cj: usize) -> usize {
        cj * self.n + ci
    }

    /// Column/row position of a node.
    #[inline]
    pub fn node_position(&self, node: usize) -> (usize, usize) {
        (node % (self.n + 1), node / (self.n + 1))
    }

    pub fn node_coords(&self, node: usize) -> (f64, f64) {
        let (i, j) = self.node_position(node);
        (i as f64 * self.h(), j as f64 * self.h())
    }

    /// The four nodes of a cell, counter-clockwise from the lower-left corner.
    #[inline]
    pub fn cell_nodes(&self, cell: usize) -> [usize; 4] {
        let ci = cell % self.n;
        let cj = cell / self.n;
        [
            self.node_index(ci, cj),
            self.node_index(ci + 1, cj),
            self.node_index(ci + 1, cj + 1),
            self.node_index(ci, cj + 1),
        ]
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let ci = cell % self.n;
        let cj = cell / self.n;
        ((ci as f64 + 0.5) * self.h(), (cj as f64 + 0.5) * self.h())
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary[node]
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }

    /// Interior nodes in ascending order.
    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&k| !self.boundary[k])
            .collect()
    }

    /// Node closest to the point `(x, y)`.
    pub fn nearest_node(&self, x: f64, y: f64) -> usize {
        let clamp = |v: f64| (v * self.n as f64).round().clamp(0.0, self.n as f64) as usize;
        self.node_index(clamp(x), clamp(y))
    }
}

/// One strictly positive value per fine cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    values: Vec<f64>,
}

impl CellField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("cell field is empty".into()));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!(
                "cell field values must be finite and positive, found {bad}"
            )));
        }
        Ok(Self { values })
    }

    pub fn constant(cells: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; cells])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max / min` of the field.
    pub fn contrast(&self) -> f64 {
        self.max() / self.min()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }

    pub fn check_mesh(&self, mesh: &FineMesh) -> Result<()> {
        if self.values.len() != mesh.cell_count() {
            return Err(Error::Assembly(format!(
                "cell field has {} values but the mesh has {} cells",
                self.values.len(),
                mesh.cell_count()
            )));
        }
        Ok(())
    }

    /// Reads a grid file: a first line `nx ny` followed by `nx * ny` positive
    /// whitespace-separated values, row-major.
    pub fn parse_grid(text: &str, mesh: &FineMesh, origin: &str) -> Result<Self> {
        let load_err = |reason: String| Error::Load {
            path: origin.to_string(),
            reason,
        };
        let mut lines = text.lines();
        let header = lines
            .by_ref()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| load_err("empty file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| load_err(format!("bad header {header:?}: {e}")))?;
        let [nx, ny] = dims[..] else {
            return Err(load_err(format!("header must be `nx ny`, got {header:?}")));
        };
        if nx != mesh.n() || ny != mesh.n() {
            return Err(load_err(format!(
                "grid is {nx}x{ny} but the fine mesh has {0}x{0} cells",
                mesh.n()
            )));
        }
        let values: Vec<f64> = lines
            .flat_map(str::split_whitespace)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| load_err(format!("bad value: {e}")))?;
        if values.len() != nx * ny {
            return Err(load_err(format!(
                "expected {} values, found {}",
                nx * ny,
                values.len()
            )));
        }
        Self::new(values).map_err(|e| load_err(e.to_string()))
    }

    pub fn load_grid(path: &Path, mesh: &FineMesh) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse_grid(&text, mesh, &path.display().to_string())
    }

    /// Serializes in the grid file format, one row of cells per line.
    pub fn to_grid_string(&self, n: usize) -> String {
        let mut out = format!("{n} {n}\n");
        for row in self.values.chunks(n) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_for_small_meshes() {
        let m = FineMesh::new(2).unwrap();
        assert_eq!(m.node_count(), 9);
        assert_eq!(m.cell_count(), 4);
        assert_eq!(m.boundary_mask().iter().filter(|b| **b).count(), 8);

        let m = FineMesh::new(10).unwrap();
        assert_eq!(m.interior_nodes().len(), 81);
        assert_eq!(m.boundary_mask().iter().filter(|b| **b).count(), 40);

        let m = FineMesh::new(100).unwrap();
        assert_eq!(m.node_count(), 10201);
        assert_eq!(m.h(), 0.01);
    }

    #[test]
    fn rejects_degenerate_mesh() {
        assert!(matches!(FineMesh::new(1), Err(Error::InvalidMesh(_))));
        assert!(matches!(FineMesh::new(0), Err(Error::InvalidMesh(_))));
    }

    #[test]
    fn cells_reference_distinct_valid_nodes() {
        let m = FineMesh::new(7).unwrap();
        for c in 0..m.cell_count() {
            let nodes = m.cell_nodes(c);
            for (a, &x) in nodes.iter().enumerate() {
                assert!(x < m.node_count());
                for &y in &nodes[a + 1..] {
                    assert_ne!(x, y);
                }
            }
        }
    }

    #[test]
    fn grid_file_round_trip_and_mismatch() {
        let m = FineMesh::new(3).unwrap();
        let f = CellField::new((1..=9).map(f64::from).collect()).unwrap();
        let text = f.to_grid_string(3);
        let back = CellField::parse_grid(&text, &m, "mem").unwrap();
        assert_eq!(back, f);

        let other = FineMesh::new(4).unwrap();
        assert!(matches!(
            CellField::parse_grid(&text, &other, "mem"),
            Err(Error::Load { .. })
        ));
        assert!(CellField::parse_grid("3 3\n1 2 3", &m, "mem").is_err());
        assert!(CellField::parse_grid("3 3\n1 2 3 4 5 6 7 8 -1", &m, "mem").is_err());
    }

    #[test]
    fn contrast_of_two_valued_field() {
        let f = CellField::new(vec![2.0, 2.0, 2e6, 2.0]).unwrap();
        assert_eq!(f.contrast(), 1e6);
        assert!(CellField::new(vec![1.0, 0.0]).is_err());
    }
}
