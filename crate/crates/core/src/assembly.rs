//! Bilinear (Q1) element integrals and global assembly on a [`FineMesh`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SymOperator;
use crate::mesh::{CellField, FineMesh};

/// Which bilinear form to assemble.
#[derive(Debug, Clone, Copy)]
pub enum FormKind<'a> {
    /// `\int kappa grad u . grad v`
    Stiffness,
    /// `\int u v`
    Mass,
    /// `\int w u v`
    WeightedMass(&'a CellField),
}

const GAUSS: [(f64, f64); 2] = [
    (0.5 - 0.288_675_134_594_812_9, 0.5),
    (0.5 + 0.288_675_134_594_812_9, 0.5),
];

// reference square [0,1]^2, nodes ccw from (0,0)
const CORNERS: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];

fn shape(a: usize, x: f64, y: f64) -> f64 {
    let (cx, cy) = CORNERS[a];
    let sx = if cx == 0.0 { 1.0 - x } else { x };
    let sy = if cy == 0.0 { 1.0 - y } else { y };
    sx * sy
}

fn shape_grad(a: usize, x: f64, y: f64) -> (f64, f64) {
    let (cx, cy) = CORNERS[a];
    let (sx, dsx) = if cx == 0.0 { (1.0 - x, -1.0) } else { (x, 1.0) };
    let (sy, dsy) = if cy == 0.0 { (1.0 - y, -1.0) } else { (y, 1.0) };
    (dsx * sy, sx * dsy)
}

/// Unit-coefficient element stiffness. Independent of `h` in two dimensions.
pub fn element_stiffness() -> [[f64; 4]; 4] {
    let mut k = [[0.0; 4]; 4];
    for &(x, wx) in &GAUSS {
        for &(y, wy) in &GAUSS {
            for (a, row) in k.iter_mut().enumerate() {
                let ga = shape_grad(a, x, y);
                for (b, entry) in row.iter_mut().enumerate() {
                    let gb = shape_grad(b, x, y);
                    *entry += wx * wy * (ga.0 * gb.0 + ga.1 * gb.1);
                }
            }
        }
    }
    k
}

/// Unit-coefficient element mass for a cell of side `h`.
pub fn element_mass(h: f64) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for &(x, wx) in &GAUSS {
        for &(y, wy) in &GAUSS {
            for (a, row) in m.iter_mut().enumerate() {
                for (b, entry) in row.iter_mut().enumerate() {
                    *entry += wx * wy * h * h * shape(a, x, y) * shape(b, x, y);
                }
            }
        }
    }
    m
}

fn element_matrix_and_coefficients<'a>(
    mesh: &FineMesh,
    kappa: &'a CellField,
    kind: FormKind<'a>,
) -> Result<([[f64; 4]; 4], &'a [f64])> {
    kappa.check_mesh(mesh)?;
    Ok(match kind {
        FormKind::Stiffness => (element_stiffness(), kappa.values()),
        FormKind::Mass => (element_mass(mesh.h()), &[][..]),
        FormKind::WeightedMass(w) => {
            w.check_mesh(mesh)?;
            (element_mass(mesh.h()), w.values())
        }
    })
}

/// Global symmetric operator over all mesh nodes; Dirichlet rows are kept.
pub fn assemble(mesh: &FineMesh, kappa: &CellField, kind: FormKind<'_>) -> Result<SymOperator> {
    let (elem, coef) = element_matrix_and_coefficients(mesh, kappa, kind)?;
    let cells = mesh.cell_count();
    let mut rows = Vec::with_capacity(16 * cells);
    let mut cols = Vec::with_capacity(16 * cells);
    let mut vals = Vec::with_capacity(16 * cells);
    for c in 0..cells {
        let w = coef.get(c).copied().unwrap_or(1.0);
        let nodes = mesh.cell_nodes(c);
        for a in 0..4 {
            for b in 0..4 {
                rows.push(nodes[a]);
                cols.push(nodes[b]);
                vals.push(w * elem[a][b]);
            }
        }
    }
    SymOperator::from_triplets(mesh.node_count(), &rows, &cols, &vals)
}

/// Dense form restricted to a set of cells, indexed by the ascending node list
/// `nodes`. Element contributions to nodes outside `nodes` are dropped, which is
/// how Dirichlet nodes are clamped in local problems.
pub fn assemble_local(
    mesh: &FineMesh,
    kappa: &CellField,
    kind: FormKind<'_>,
    cells: &[usize],
    nodes: &[usize],
) -> Result<DMatrix<f64>> {
    let (elem, coef) = element_matrix_and_coefficients(mesh, kappa, kind)?;
    let mut out = DMatrix::zeros(nodes.len(), nodes.len());
    for &c in cells {
        let w = coef.get(c).copied().unwrap_or(1.0);
        let local: Vec<Option<usize>> = mesh
            .cell_nodes(c)
            .iter()
            .map(|g| nodes.binary_search(g).ok())
            .collect();
        for a in 0..4 {
            let Some(la) = local[a] else { continue };
            for b in 0..4 {
                let Some(lb) = local[b] else { continue };
                out[(la, lb)] += w * elem[a][b];
            }
        }
    }
    Ok(out)
}

/// Right-hand side `f` of the diffusion problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Constant(f64),
    /// Discrete delta: `strength` placed on a single interior node.
    Point {
        node: usize,
        strength: f64,
    },
    /// Piecewise-constant per-cell values.
    Cells(Vec<f64>),
}

/// `F_i = \int f phi_i` over all nodes (boundary entries included).
pub fn assemble_load(mesh: &FineMesh, source: &Source) -> Result<DVector<f64>> {
    let mut f = DVector::zeros(mesh.node_count());
    let quarter = 0.25 * mesh.h() * mesh.h();
    match source {
        Source::Constant(c) => {
            for cell in 0..mesh.cell_count() {
                for node in mesh.cell_nodes(cell) {
                    f[node] += c * quarter;
                }
            }
        }
        Source::Point { node, strength } => {
            if *node >= mesh.node_count() || mesh.is_boundary(*node) {
                return Err(Error::Config(format!(
                    "point source node {node} is not an interior node"
                )));
            }
            f[*node] = *strength;
        }
        Source::Cells(values) => {
            if values.len() != mesh.cell_count() {
                return Err(Error::Config(format!(
                    "source grid has {} values but the mesh has {} cells",
                    values.len(),
                    mesh.cell_count()
                )));
            }
            for (cell, v) in values.iter().enumerate() {
                for node in mesh.cell_nodes(cell) {
                    f[node] += v * quarter;
                }
            }
        }
    }
    Ok(f)
}
