//! Constraint energy minimizing (CEM) coarse space.
//!
//! Auxiliary functions live on single coarse elements and are discontinuous
//! across element boundaries, so they are stored per element ([`ElementModes`])
//! rather than as global nodal vectors. A global nodal function enters the
//! auxiliary inner product through its restriction to each element
//! ([`BrokenField`]).

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::assembly::{assemble_local, FormKind};
use crate::coarse::CoarseDecomposition;
use crate::error::{Error, Result};
use crate::fine::FineSystem;
use crate::linalg::{fix_signs, lowest_generalized_eigen, SymOperator};
use crate::mesh::CellField;

/// Weight `kappa_tilde` of the auxiliary inner product `s(u, v) = \int kappa_tilde u v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KappaTilde {
    /// `kappa H^{-2}`
    #[default]
    CoarseScale,
    /// `kappa sum_i |grad chi_i|^2` evaluated at fine cell centers.
    PartitionOfUnity,
}

/// Spectral modes of one coarse element, with the local inner-product matrix
/// they are orthonormal in.
#[derive(Debug, Clone)]
pub struct ElementModes {
    /// Element nodes not on the Dirichlet boundary, ascending.
    pub nodes: Vec<usize>,
    /// Local inner-product matrix over `nodes`.
    pub weight: DMatrix<f64>,
    /// Kept modes as columns over `nodes`.
    pub vectors: DMatrix<f64>,
    /// Lowest eigenvalues of the local problem, ascending; one past the kept
    /// modes when the local space is large enough.
    pub spectrum: Vec<f64>,
}

impl ElementModes {
    pub fn count(&self) -> usize {
        self.vectors.ncols()
    }

    /// First discarded eigenvalue, if the local space has one.
    pub fn tail(&self) -> Option<f64> {
        self.spectrum.get(self.count()).copied()
    }

    /// `weight * vectors`: rows of the constraint functionals over `nodes`.
    pub fn functionals(&self) -> DMatrix<f64> {
        &self.weight * &self.vectors
    }
}

/// Per-element restriction of a function; part `i` is indexed like
/// `ElementModes::nodes` of element `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrokenField {
    pub parts: Vec<DVector<f64>>,
}

/// A family of element-local spectral spaces (`V_aux,1` or `V_aux,2`).
#[derive(Debug, Clone)]
pub struct LocalModeSpace {
    pub elements: Vec<ElementModes>,
    offsets: Vec<usize>,
}

impl LocalModeSpace {
    pub fn new(elements: Vec<ElementModes>) -> Self {
        let mut offsets = Vec::with_capacity(elements.len() + 1);
        offsets.push(0);
        for e in &elements {
            offsets.push(offsets.last().unwrap() + e.count());
        }
        Self { elements, offsets }
    }

    /// Total number of modes.
    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Global index of mode `j` of element `i`.
    pub fn index(&self, element: usize, mode: usize) -> usize {
        self.offsets[element] + mode
    }

    pub fn element_range(&self, element: usize) -> std::ops::Range<usize> {
        self.offsets[element]..self.offsets[element + 1]
    }

    pub fn restrict(&self, u: &DVector<f64>) -> BrokenField {
        BrokenField {
            parts: self
                .elements
                .iter()
                .map(|e| DVector::from_iterator(e.nodes.len(), e.nodes.iter().map(|&g| u[g])))
                .collect(),
        }
    }

    /// Inner products of a broken field with every mode.
    pub fn moments(&self, v: &BrokenField) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (i, (e, part)) in self.elements.iter().zip(&v.parts).enumerate() {
            let local = e.functionals().transpose() * part;
            out.rows_mut(self.offsets[i], e.count()).copy_from(&local);
        }
        out
    }

    /// Moments of a global nodal function.
    pub fn moments_of(&self, u: &DVector<f64>) -> DVector<f64> {
        self.moments(&self.restrict(u))
    }

    /// Broken field `sum_k c_k mode_k`.
    pub fn synthesize(&self, coeffs: &DVector<f64>) -> BrokenField {
        BrokenField {
            parts: self
                .elements
                .iter()
                .enumerate()
                .map(|(i, e)| &e.vectors * coeffs.rows(self.offsets[i], e.count()))
                .collect(),
        }
    }

    /// Local inner product of two broken fields.
    pub fn inner(&self, u: &BrokenField, v: &BrokenField) -> f64 {
        self.elements
            .iter()
            .zip(u.parts.iter().zip(&v.parts))
            .map(|(e, (a, b))| a.dot(&(&e.weight * b)))
            .sum()
    }

    /// Constraint matrix (one row per mode of `elements`, in that order)
    /// acting on nodal values at the ascending node list `nodes`.
    pub fn constraint_rows(&self, elements: &[usize], nodes: &[usize]) -> DMatrix<f64> {
        let rows: usize = elements.iter().map(|&i| self.elements[i].count()).sum();
        let mut c = DMatrix::zeros(rows, nodes.len());
        let mut r = 0;
        for &i in elements {
            let e = &self.elements[i];
            let f = e.functionals();
            let pos: Vec<Option<usize>> = e
                .nodes
                .iter()
                .map(|g| nodes.binary_search(g).ok())
                .collect();
            for j in 0..e.count() {
                for (k, p) in pos.iter().enumerate() {
                    if let Some(p) = p {
                        c[(r, *p)] = f[(k, j)];
                    }
                }
                r += 1;
            }
        }
        c
    }
}

/// The auxiliary space `V_aux` with its weight field.
#[derive(Debug, Clone)]
pub struct AuxSpace {
    pub modes: LocalModeSpace,
    pub kappa_tilde: CellField,
    pub weight_kind: KappaTilde,
}

impl AuxSpace {
    pub fn dim(&self) -> usize {
        self.modes.dim()
    }

    /// Coefficients of the s-orthogonal projection `Pi v` in the mode basis.
    pub fn project(&self, v: &BrokenField) -> DVector<f64> {
        self.modes.moments(v)
    }

    /// `Pi v` as a broken field.
    pub fn project_field(&self, v: &BrokenField) -> BrokenField {
        self.modes.synthesize(&self.project(v))
    }

    /// `Pi u` coefficients for a global nodal function.
    pub fn project_global(&self, u: &DVector<f64>) -> DVector<f64> {
        self.modes.moments_of(u)
    }

    pub fn s_inner(&self, u: &BrokenField, v: &BrokenField) -> f64 {
        self.modes.inner(u, v)
    }
}

/// `kappa_tilde` per fine cell.
pub fn kappa_tilde(
    system: &FineSystem,
    decomp: &CoarseDecomposition,
    kind: KappaTilde,
) -> Result<CellField> {
    let kappa = system.kappa.values();
    let values = match kind {
        KappaTilde::CoarseScale => {
            let scale = 1.0 / decomp.h_coarse().powi(2);
            kappa.iter().map(|k| k * scale).collect()
        }
        KappaTilde::PartitionOfUnity => kappa
            .iter()
            .zip(decomp.pou_gradient_energy(&system.mesh))
            .map(|(k, g)| k * g)
            .collect(),
    };
    CellField::new(values)
}

/// Solves `\int_K kappa grad psi . grad v = lambda s_K(psi, v)` on every coarse
/// element (free on interior element edges, clamped on the domain boundary)
/// and keeps the `per_element` smallest modes, s-orthonormal.
pub fn solve_aux_spectral(
    system: &FineSystem,
    decomp: &CoarseDecomposition,
    per_element: usize,
    kind: KappaTilde,
) -> Result<AuxSpace> {
    if per_element == 0 {
        return Err(Error::Config(
            "need at least one auxiliary function per element".into(),
        ));
    }
    let weight_field = kappa_tilde(system, decomp, kind)?;
    let mut elements = Vec::with_capacity(decomp.elements.len());
    for (idx, e) in decomp.elements.iter().enumerate() {
        let nodes = e.rect.free_nodes(&system.mesh);
        if per_element > nodes.len() {
            return Err(Error::Spectral {
                element: idx,
                reason: format!(
                    "requested {per_element} modes but the element has {} dofs",
                    nodes.len()
                ),
            });
        }
        let stiff = assemble_local(
            &system.mesh,
            &system.kappa,
            FormKind::Stiffness,
            &e.cells,
            &nodes,
        )?;
        let weight = assemble_local(
            &system.mesh,
            &system.kappa,
            FormKind::WeightedMass(&weight_field),
            &e.cells,
            &nodes,
        )?;
        let (values, vectors) = lowest_generalized_eigen(&stiff, &weight, per_element + 1)
            .map_err(|reason| Error::Spectral {
                element: idx,
                reason,
            })?;
        let mut kept = vectors.columns(0, per_element).into_owned();
        fix_signs(&mut kept);
        elements.push(ElementModes {
            nodes,
            weight,
            vectors: kept,
            spectrum: values.iter().copied().collect(),
        });
    }
    Ok(AuxSpace {
        modes: LocalModeSpace::new(elements),
        kappa_tilde: weight_field,
        weight_kind: kind,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceTag {
    V1Cem,
    V1Glo,
    V2First,
    V2Second,
    V2SecondGlo,
}

impl SpaceTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SpaceTag::V1Cem => "V1_cem",
            SpaceTag::V1Glo => "V1_glo",
            SpaceTag::V2First => "V2_first",
            SpaceTag::V2Second => "V2_second",
            SpaceTag::V2SecondGlo => "V2_second_glo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            SpaceTag::V1Cem,
            SpaceTag::V1Glo,
            SpaceTag::V2First,
            SpaceTag::V2Second,
            SpaceTag::V2SecondGlo,
        ]
        .into_iter()
        .find(|t| t.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisOrigin {
    /// Coarse element or neighborhood index.
    pub entity: usize,
    pub mode: usize,
    pub eigenvalue: f64,
    /// Group used for the colored decomposition.
    pub color: u8,
}

/// Columns are global nodal vectors (zero on the Dirichlet boundary).
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    pub tag: SpaceTag,
    pub vectors: DMatrix<f64>,
    pub origins: Vec<BasisOrigin>,
}

impl SubspaceBasis {
    pub fn empty(tag: SpaceTag, node_count: usize) -> Self {
        Self {
            tag,
            vectors: DMatrix::zeros(node_count, 0),
            origins: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.ncols() == 0
    }

    pub fn column(&self, k: usize) -> DVector<f64> {
        self.vectors.column(k).into_owned()
    }

    pub fn select(&self, columns: &[usize]) -> Self {
        Self {
            tag: self.tag,
            vectors: self.vectors.select_columns(columns),
            origins: columns.iter().map(|&k| self.origins[k]).collect(),
        }
    }

    /// Splits the basis by origin color; returns `(color, part)` for nonempty colors.
    pub fn by_color(&self) -> Vec<(u8, SubspaceBasis)> {
        let mut colors: Vec<u8> = self.origins.iter().map(|o| o.color).collect();
        colors.sort_unstable();
        colors.dedup();
        colors
            .into_iter()
            .map(|c| {
                let cols: Vec<usize> = (0..self.len())
                    .filter(|&k| self.origins[k].color == c)
                    .collect();
                (c, self.select(&cols))
            })
            .collect()
    }

    /// Text dump: `space <tag>`, `rows <n> cols <k>`, then one line per column.
    pub fn write_dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "space {}", self.tag.as_str())?;
        writeln!(out, "rows {} cols {}", self.vectors.nrows(), self.len())?;
        let mut line = String::new();
        for col in self.vectors.column_iter() {
            line.clear();
            for (k, v) in col.iter().enumerate() {
                if k > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{v:.17e}");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Reads a dump written by [`SubspaceBasis::write_dump`]. Origins are not stored.
    pub fn read_dump<R: BufRead>(input: R) -> Result<Self> {
        let bad = |reason: &str| Error::Load {
            path: "basis dump".into(),
            reason: reason.to_string(),
        };
        let mut lines = input.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("truncated"))?
                .map_err(Error::from)
        };
        let head = next()?;
        let tag = head
            .strip_prefix("space ")
            .and_then(SpaceTag::parse)
            .ok_or_else(|| bad("missing space tag"))?;
        let dims: Vec<usize> = next()?
            .split_whitespace()
            .filter_map(|t| t.parse().ok())
            .collect();
        let [rows, cols] = dims[..] else {
            return Err(bad("missing dimensions"));
        };
        let mut vectors = DMatrix::zeros(rows, cols);
        for k in 0..cols {
            let line = next()?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(&e.to_string()))?;
            if vals.len() != rows {
                return Err(bad("column length mismatch"));
            }
            vectors.set_column(k, &DVector::from_vec(vals));
        }
        let origins = (0..cols)
            .map(|k| BasisOrigin {
                entity: k,
                mode: 0,
                eigenvalue: f64::NAN,
                color: 0,
            })
            .collect();
        Ok(Self {
            tag,
            vectors,
            origins,
        })
    }
}

/// Minimizes `a(phi, phi)` over functions supported on the ascending node set
/// `nodes` (zero elsewhere) subject to `constraints * phi = rhs` for each
/// column of `rhs`. Returns the minimizers as columns over `nodes`.
///
/// Uses the Schur complement `C A^{-1} C^T` with unit-norm constraint rows and
/// one step of iterative refinement on the constraint residual.
pub fn constrained_energy_min(
    stiffness: &SymOperator,
    nodes: &[usize],
    constraints: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>, String> {
    let c = constraints.nrows();
    if rhs.nrows() != c {
        return Err(format!(
            "{} right-hand rows for {c} constraints",
            rhs.nrows()
        ));
    }
    let scale: Vec<f64> = constraints
        .row_iter()
        .map(|r| {
            let n = r.norm();
            if n > 0.0 {
                1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    if scale.contains(&0.0) {
        return Err("a constraint vanishes on the patch".into());
    }
    let cs = DMatrix::from_fn(c, constraints.ncols(), |i, j| {
        constraints[(i, j)] * scale[i]
    });
    let gs = DMatrix::from_fn(c, rhs.ncols(), |i, j| rhs[(i, j)] * scale[i]);

    let local = stiffness.restrict(nodes);
    let chol = local.cholesky().map_err(|e| e.to_string())?;
    let x = chol.solve_matrix(&cs.transpose());
    let mut schur = &cs * &x;
    for i in 0..c {
        for j in 0..i {
            let v = 0.5 * (schur[(i, j)] + schur[(j, i)]);
            schur[(i, j)] = v;
            schur[(j, i)] = v;
        }
    }
    let schur_chol = schur
        .cholesky()
        .ok_or_else(|| "constraint Schur complement is not positive definite".to_string())?;
    let mut y = schur_chol.solve(&gs);
    let residual = &gs - &cs * (&x * &y);
    y += schur_chol.solve(&residual);
    Ok(x * y)
}

fn scatter(
    target: &mut DMatrix<f64>,
    col: usize,
    nodes: &[usize],
    values: nalgebra::DVectorView<'_, f64>,
) {
    for (k, &g) in nodes.iter().enumerate() {
        target[(g, col)] = values[k];
    }
}

/// Localized CEM basis: for each element `K_i` and each of its auxiliary modes,
/// the energy minimizer on `K_i^+` (`layers` rings) whose projection onto the
/// auxiliary modes inside the patch equals that mode.
pub fn build_cem_basis(
    system: &FineSystem,
    decomp: &CoarseDecomposition,
    aux: &AuxSpace,
    layers: usize,
) -> Result<SubspaceBasis> {
    if layers == 0 {
        return Err(Error::Config(
            "oversampling needs at least one layer".into(),
        ));
    }
    let modes = &aux.modes;
    let mut vectors = DMatrix::zeros(system.node_count(), modes.dim());
    let mut origins = Vec::with_capacity(modes.dim());
    for i in 0..decomp.elements.len() {
        let patch_elems = decomp.elements_in_patch(i, layers);
        let nodes = decomp
            .oversampled_rect(i, layers)
            .interior_nodes(&system.mesh);
        let constraints = modes.constraint_rows(&patch_elems, &nodes);
        let own = modes.elements[i].count();
        let first_row: usize = patch_elems
            .iter()
            .take_while(|&&m| m != i)
            .map(|&m| modes.elements[m].count())
            .sum();
        let mut rhs = DMatrix::zeros(constraints.nrows(), own);
        for j in 0..own {
            rhs[(first_row + j, j)] = 1.0;
        }
        let phi = constrained_energy_min(&system.stiffness, &nodes, &constraints, &rhs).map_err(
            |reason| Error::Basis {
                element: i,
                mode: 0,
                reason,
            },
        )?;
        for j in 0..own {
            let col = modes.index(i, j);
            scatter(&mut vectors, col, &nodes, phi.column(j));
            origins.push(BasisOrigin {
                entity: i,
                mode: j,
                eigenvalue: modes.elements[i].spectrum[j],
                color: decomp.element_color(i),
            });
        }
    }
    Ok(SubspaceBasis {
        tag: SpaceTag::V1Cem,
        vectors,
        origins,
    })
}

/// Global CEM basis: the same minimization posed on the whole domain with all
/// auxiliary constraints.
pub fn build_global_cem_basis(
    system: &FineSystem,
    decomp: &CoarseDecomposition,
    aux: &AuxSpace,
) -> Result<SubspaceBasis> {
    let modes = &aux.modes;
    let all: Vec<usize> = (0..modes.elements.len()).collect();
    let nodes = system.interior();
    let constraints = modes.constraint_rows(&all, nodes);
    let rhs = DMatrix::identity(modes.dim(), modes.dim());
    let phi =
        constrained_energy_min(&system.stiffness, nodes, &constraints, &rhs).map_err(|reason| {
            Error::Basis {
                element: usize::MAX,
                mode: 0,
                reason,
            }
        })?;
    let mut vectors = DMatrix::zeros(system.node_count(), modes.dim());
    let mut origins = Vec::with_capacity(modes.dim());
    for i in all {
        for j in 0..modes.elements[i].count() {
            let col = modes.index(i, j);
            scatter(&mut vectors, col, nodes, phi.column(col));
            origins.push(BasisOrigin {
                entity: i,
                mode: j,
                eigenvalue: modes.elements[i].spectrum[j],
                color: decomp.element_color(i),
            });
        }
    }
    Ok(SubspaceBasis {
        tag: SpaceTag::V1Glo,
        vectors,
        origins,
    })
}
