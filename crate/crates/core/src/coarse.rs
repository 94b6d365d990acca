//! Coarse grid over a nested fine mesh: elements, neighborhoods of interior
//! coarse nodes, oversampled patches, coarse hat partition of unity and the
//! parity 4-coloring of neighborhoods.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::mesh::FineMesh;

/// Axis-aligned block of fine nodes `[x0, x1] x [y0, y1]` (inclusive node indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl NodeRect {
    /// All nodes of the closed rectangle, ascending.
    pub fn nodes(&self, mesh: &FineMesh) -> Vec<usize> {
        let mut out = Vec::with_capacity((self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1));
        for j in self.y0..=self.y1 {
            for i in self.x0..=self.x1 {
                out.push(mesh.node_index(i, j));
            }
        }
        out
    }

    /// Closed-rectangle nodes that are not on the domain boundary.
    pub fn free_nodes(&self, mesh: &FineMesh) -> Vec<usize> {
        self.nodes(mesh)
            .into_iter()
            .filter(|&g| !mesh.is_boundary(g))
            .collect()
    }

    /// Nodes strictly inside the rectangle (zero trace on its boundary).
    pub fn interior_nodes(&self, mesh: &FineMesh) -> Vec<usize> {
        let mut out = Vec::new();
        for j in self.y0 + 1..self.y1 {
            for i in self.x0 + 1..self.x1 {
                out.push(mesh.node_index(i, j));
            }
        }
        out
    }

    pub fn cells(&self, mesh: &FineMesh) -> Vec<usize> {
        let mut out = Vec::with_capacity((self.x1 - self.x0) * (self.y1 - self.y0));
        for cj in self.y0..self.y1 {
            for ci in self.x0..self.x1 {
                out.push(mesh.cell_index(ci, cj));
            }
        }
        out
    }

    pub fn contains_node(&self, i: usize, j: usize) -> bool {
        (self.x0..=self.x1).contains(&i) && (self.y0..=self.y1).contains(&j)
    }

    pub fn contains_rect(&self, other: &NodeRect) -> bool {
        self.x0 <= other.x0 && other.x1 <= self.x1 && self.y0 <= other.y0 && other.y1 <= self.y1
    }
}

#[derive(Debug, Clone)]
pub struct CoarseElement {
    /// Coarse cell column and row.
    pub cx: usize,
    pub cy: usize,
    pub rect: NodeRect,
    pub cells: Vec<usize>,
    /// Closed node set including domain-boundary nodes.
    pub nodes: Vec<usize>,
}

/// Neighborhood `omega_i` of an interior coarse node: the four coarse elements
/// sharing that node.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    /// Coarse node column and row.
    pub ax: usize,
    pub ay: usize,
    pub rect: NodeRect,
    /// Indices into [`CoarseDecomposition::elements`].
    pub elements: Vec<usize>,
    /// Fine nodes strictly inside the neighborhood.
    pub interior: Vec<usize>,
    pub color: u8,
}

#[derive(Debug, Clone)]
pub struct CoarseDecomposition {
    n_coarse: usize,
    ratio: usize,
    layers: usize,
    pub elements: Vec<CoarseElement>,
    pub neighborhoods: Vec<Neighborhood>,
    oversampled: Vec<NodeRect>,
}

/// Parity color of coarse node `(ax, ay)`.
pub fn parity_color(ax: usize, ay: usize) -> u8 {
    (2 * (ay % 2) + ax % 2) as u8
}

impl CoarseDecomposition {
    /// `n_coarse` coarse cells per side, patches enlarged by `layers` rings of
    /// coarse elements.
    pub fn new(mesh: &FineMesh, n_coarse: usize, layers: usize) -> Result<Self> {
        if n_coarse == 0 || !mesh.n().is_multiple_of(n_coarse) {
            return Err(Error::Decomposition(format!(
                "fine mesh with {} cells per side is not nested in a {n_coarse}x{n_coarse} coarse grid",
                mesh.n()
            )));
        }
        let ratio = mesh.n() / n_coarse;
        let mut elements = Vec::with_capacity(n_coarse * n_coarse);
        for cy in 0..n_coarse {
            for cx in 0..n_coarse {
                let rect = NodeRect {
                    x0: cx * ratio,
                    x1: (cx + 1) * ratio,
                    y0: cy * ratio,
                    y1: (cy + 1) * ratio,
                };
                elements.push(CoarseElement {
                    cx,
                    cy,
                    rect,
                    cells: rect.cells(mesh),
                    nodes: rect.nodes(mesh),
                });
            }
        }
        let mut neighborhoods = Vec::new();
        for ay in 1..n_coarse {
            for ax in 1..n_coarse {
                let rect = NodeRect {
                    x0: (ax - 1) * ratio,
                    x1: (ax + 1) * ratio,
                    y0: (ay - 1) * ratio,
                    y1: (ay + 1) * ratio,
                };
                let elems = vec![
                    (ay - 1) * n_coarse + ax - 1,
                    (ay - 1) * n_coarse + ax,
                    ay * n_coarse + ax - 1,
                    ay * n_coarse + ax,
                ];
                neighborhoods.push(Neighborhood {
                    ax,
                    ay,
                    rect,
                    elements: elems,
                    interior: rect.interior_nodes(mesh),
                    color: parity_color(ax, ay),
                });
            }
        }
        let mut decomp = Self {
            n_coarse,
            ratio,
            layers,
            elements,
            neighborhoods,
            oversampled: Vec::new(),
        };
        decomp.oversampled = (0..decomp.elements.len())
            .map(|i| decomp.oversampled_rect(i, layers))
            .collect();
        Ok(decomp)
    }

    pub fn n_coarse(&self) -> usize {
        self.n_coarse
    }

    /// Coarse mesh size `H`.
    pub fn h_coarse(&self) -> f64 {
        1.0 / self.n_coarse as f64
    }

    /// Fine cells per coarse cell side.
    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Coarse element range `[lo, hi]` (inclusive, per axis) of `K_i^+` with `layers` rings.
    pub fn oversampled_range(
        &self,
        element: usize,
        layers: usize,
    ) -> ((usize, usize), (usize, usize)) {
        let e = &self.elements[element];
        let last = self.n_coarse - 1;
        (
            (e.cx.saturating_sub(layers), (e.cx + layers).min(last)),
            (e.cy.saturating_sub(layers), (e.cy + layers).min(last)),
        )
    }

    pub fn oversampled_rect(&self, element: usize, layers: usize) -> NodeRect {
        let ((x0, x1), (y0, y1)) = self.oversampled_range(element, layers);
        NodeRect {
            x0: x0 * self.ratio,
            x1: (x1 + 1) * self.ratio,
            y0: y0 * self.ratio,
            y1: (y1 + 1) * self.ratio,
        }
    }

    /// `K_i^+` for the layer count the decomposition was built with.
    pub fn oversampled(&self, element: usize) -> &NodeRect {
        &self.oversampled[element]
    }

    /// Coarse elements contained in `K_i^+` with `layers` rings, ascending.
    pub fn elements_in_patch(&self, element: usize, layers: usize) -> Vec<usize> {
        let ((x0, x1), (y0, y1)) = self.oversampled_range(element, layers);
        let mut out = Vec::new();
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                out.push(cy * self.n_coarse + cx);
            }
        }
        out
    }

    /// Color of every neighborhood, in neighborhood order.
    pub fn colors(&self) -> Vec<u8> {
        self.neighborhoods.iter().map(|w| w.color).collect()
    }

    /// Parity color of a coarse element, used to group per-element functions.
    pub fn element_color(&self, element: usize) -> u8 {
        let e = &self.elements[element];
        parity_color(e.cx, e.cy)
    }

    /// Coarse bilinear hats sampled at fine nodes, one per coarse node
    /// (boundary coarse nodes included), ordered row-major over coarse nodes.
    pub fn partition_of_unity(&self, mesh: &FineMesh) -> Vec<DVector<f64>> {
        let side = self.n_coarse + 1;
        let r = self.ratio as f64;
        let mut out = Vec::with_capacity(side * side);
        for ay in 0..side {
            for ax in 0..side {
                let mut chi = DVector::zeros(mesh.node_count());
                let cx = (ax * self.ratio) as f64;
                let cy = (ay * self.ratio) as f64;
                let lo_x = (ax.saturating_sub(1)) * self.ratio;
                let hi_x = ((ax + 1) * self.ratio).min(mesh.n());
                let lo_y = (ay.saturating_sub(1)) * self.ratio;
                let hi_y = ((ay + 1) * self.ratio).min(mesh.n());
                for j in lo_y..=hi_y {
                    let wy = 1.0 - (j as f64 - cy).abs() / r;
                    for i in lo_x..=hi_x {
                        let wx = 1.0 - (i as f64 - cx).abs() / r;
                        chi[mesh.node_index(i, j)] = wx.max(0.0) * wy.max(0.0);
                    }
                }
                out.push(chi);
            }
        }
        out
    }

    /// `sum_i |grad chi_i|^2` at the center of every fine cell.
    pub fn pou_gradient_energy(&self, mesh: &FineMesh) -> Vec<f64> {
        let hc = self.h_coarse();
        (0..mesh.cell_count())
            .map(|c| {
                let (x, y) = mesh.cell_center(c);
                // local coordinates inside the containing coarse cell
                let s = (x / hc).fract();
                let t = (y / hc).fract();
                2.0 * ((1.0 - t).powi(2) + t * t + (1.0 - s).powi(2) + s * s) / (hc * hc)
            })
            .collect()
    }
}
