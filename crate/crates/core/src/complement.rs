//! Complementary space `V_{H,2}` inside the kernel of the auxiliary projection,
//! and the constants that govern the explicit step on it.

use nalgebra::{DMatrix, DVector};

use crate::assembly::{assemble_local, FormKind};
use crate::cem::{
    constrained_energy_min, AuxSpace, BasisOrigin, ElementModes, LocalModeSpace, SpaceTag,
    SubspaceBasis,
};
use crate::coarse::CoarseDecomposition;
use crate::error::{Error, Result};
use crate::fine::FineSystem;
use crate::linalg::{
    fix_signs, largest_generalized_eigenvalue, lowest_generalized_eigen, max_principal_cosine,
    nullspace, scaled_condition, SymOperator,
};

/// Gram matrices above this scaled condition number are treated as rank deficient.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

/// A complement function is dropped when the mass-norm part of it not already
/// spanned by earlier functions falls below this fraction of its norm.
pub const DEPENDENCE_TOL: f64 = 1e-2;

/// Eigenvalue tail of one local complement problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTail {
    /// Neighborhood (first choice) or element (second choice) index.
    pub entity: usize,
    /// First eigenvalue not kept, if the local problem has one.
    pub next: Option<f64>,
    /// Requested minus delivered modes.
    pub shortfall: usize,
}

#[derive(Debug, Clone)]
pub struct ComplementSpace {
    pub basis: SubspaceBasis,
    pub tails: Vec<LocalTail>,
    /// Functions removed as numerically dependent on earlier ones.
    pub dropped: Vec<BasisOrigin>,
}

impl ComplementSpace {
    pub fn shortfall(&self) -> usize {
        self.tails.iter().map(|t| t.shortfall).sum()
    }

    pub fn max_tail(&self) -> Option<f64> {
        self.tails.iter().filter_map(|t| t.next).reduce(f64::max)
    }
}

/// First choice: on every interior coarse node's neighborhood, the lowest modes
/// of `a(xi, v) = gamma H^{-2} (xi, v)` over functions vanishing on the
/// neighborhood boundary and in the kernel of the auxiliary projection.
/// Modes are normalized to unit energy.
pub fn build_v2_first(
    system: &FineSystem,
    decomp: &CoarseDecomposition,
    aux: &AuxSpace,
    per_neighborhood: usize,
) -> Result<ComplementSpace> {
    if per_neighborhood == 0 {
        return Err(Error::Config(
            "need at least one complement function per neighborhood".into(),
        ));
    }
    let inv_h2 = decomp.h_coarse().powi(-2);
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut origins = Vec::new();
    let mut tails = Vec::new();
    for (idx, nb) in decomp.neighborhoods.iter().enumerate() {
        let fail = |reason: String| Error::Construction { node: idx, reason };
        let constraints = aux.modes.constraint_rows(&nb.elements, &nb.interior);
        let z = nullspace(&constraints).map_err(fail)?;
        let a = system.stiffness.to_dense(&nb.interior);
        let m = system.mass.to_dense(&nb.interior);
        let az = &z.transpose() * &a * &z;
        let mz = (&z.transpose() * &m * &z) * inv_h2;
        let (values, vectors) =
            lowest_generalized_eigen(&az, &mz, per_neighborhood + 1).map_err(fail)?;
        let kept = per_neighborhood.min(values.len());
        let mut xi = &z * vectors.columns(0, kept);
        for (k, mut col) in xi.column_iter_mut().enumerate() {
            let energy = (col.transpose() * &a * &col)[(0, 0)];
            if !(energy > 0.0) {
                return Err(fail(format!("mode {k} has no energy")));
            }
            col /= energy.sqrt();
        }
        fix_signs(&mut xi);
        for k in 0..kept {
            let mut full = DVector::zeros(system.node_count());
            for (p, &g) in nb.interior.iter().enumerate() {
                full[g] = xi[(p, k)];
            }
            columns.push(full);
            origins.push(BasisOrigin {
                entity: idx,
                mode: k,
                eigenvalue: values[k],
                color: nb.color,
            });
        }
        tails.push(LocalTail {
            entity: idx,
            next: values.get(kept).copied(),
            shortfall: per_neighborhood - kept,
        });
    }
    let vectors = if columns.is_empty() {
        DMatrix::zeros(system.node_count(), 0)
    } else {
        DMatrix::from_columns(&columns)
    };
    Ok(prune_dependent(
        SubspaceBasis {
            tag: SpaceTag::V2First,
            vectors,
            origins,
        },
        tails,
        &system.mass,
        DEPENDENCE_TOL,
    ))
}

/// Greedy mass-orthogonal sweep over the columns in order, dropping columns
/// whose new component is below `tol` times their norm.
///
/// At high contrast two overlapping neighborhoods can produce the same local
/// mode (one trapped in the elements they share, walled off by conductive
/// streaks); the copies differ only at the order of the inverse contrast.
pub fn prune_dependent(
    basis: SubspaceBasis,
    tails: Vec<LocalTail>,
    mass: &SymOperator,
    tol: f64,
) -> ComplementSpace {
    let mut q: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for k in 0..basis.len() {
        let x = basis.column(k);
        let norm = mass.quad_form(&x).max(0.0).sqrt();
        let mut r = x;
        for _ in 0..2 {
            let mr = mass.matvec(&r);
            let coeffs: Vec<f64> = q.iter().map(|qi| qi.dot(&mr)).collect();
            for (qi, c) in q.iter().zip(coeffs) {
                r.axpy(-c, qi, 1.0);
            }
        }
        let rest = mass.quad_form(&r).max(0.0).sqrt();
        if norm > 0.0 && rest > tol * norm {
            q.push(r / rest);
            keep.push(k);
        } else {
            dropped.push(basis.origins[k]);
        }
    }
    ComplementSpace {
        basis: basis.select(&keep),
        tails,
        dropped,
    }
}

/// How the second-choice functions are computed from their local modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Localization {
    Global,
    /// Posed on the element enlarged by this many rings.
    Oversampled(usize),
}

/// Element modes of `a(xi, v) = gamma (xi, v)` on `V(K_i)` restricted to the
/// kernel of that element's auxiliary projection, L2-normalized.
pub fn solve_second_spectral(
    system: &FineSystem,
    decomp: &CoarseDecomposition,
    aux: &AuxSpace,
    per_element: usize,
) -> Result<(LocalModeSpace, Vec<LocalTail>)> {
    if per_element == 0 {
        return Err(Error::Config(
            "need at least one complement function per element".into(),
        ));
    }
    let mut elements = Vec::with_capacity(decomp.elements.len());
    let mut tails = Vec::with_capacity(decomp.elements.len());
    for (idx, e) in decomp.elements.iter().enumerate() {
        let own = &aux.modes.elements[idx];
        let fail = |reason: String| Error::Spectral {
            element: idx,
            reason,
        };
        let z = nullspace(&own.functionals().transpose()).map_err(fail)?;
        let a = assemble_local(
            &system.mesh,
            &system.kappa,
            FormKind::Stiffness,
            &e.cells,
            &own.nodes,
        )?;
        let m = assemble_local(
            &system.mesh,
            &system.kappa,
            FormKind::Mass,
            &e.cells,
            &own.nodes,
        )?;
        let az = &z.transpose() * &a * &z;
        let mz = &z.transpose() * &m * &z;
        let (values, vectors) =
            lowest_generalized_eigen(&az, &mz, per_element + 1).map_err(fail)?;
        let kept = per_element.min(values.len());
        let mut xi = &z * vectors.columns(0, kept);
        fix_signs(&mut xi);
        tails.push(LocalTail {
            entity: idx,
            next: values.get(kept).copied(),
            shortfall: per_element - kept,
        });
        elements.push(ElementModes {
            nodes: own.nodes.clone(),
            weight: m,
            vectors: xi,
            spectrum: values.iter().copied().collect(),
        });
    }
    Ok((LocalModeSpace::new(elements), tails))
}

/// Second choice: energy minimizers that are s-orthogonal to the auxiliary
/// space and reproduce the L2 moments of one complement mode.
pub fn build_v2_second(
    system: &FineSystem,
    decomp: &CoarseDecomposition,
    aux: &AuxSpace,
    per_element: usize,
    localization: Localization,
) -> Result<ComplementSpace> {
    let (second, tails) = solve_second_spectral(system, decomp, aux, per_element)?;
    let n_elem = decomp.elements.len();
    let mut vectors = DMatrix::zeros(system.node_count(), second.dim());
    let mut origins = Vec::with_capacity(second.dim());

    let mut solve_patch = |elements: &[usize], nodes: &[usize], targets: &[usize]| -> Result<()> {
        let c1 = aux.modes.constraint_rows(elements, nodes);
        let c2 = second.constraint_rows(elements, nodes);
        let rows = c1.nrows() + c2.nrows();
        let mut c = DMatrix::zeros(rows, nodes.len());
        c.rows_mut(0, c1.nrows()).copy_from(&c1);
        c.rows_mut(c1.nrows(), c2.nrows()).copy_from(&c2);
        // right-hand sides: unit moment against the generating mode only
        let mut rhs_cols = Vec::new();
        let mut offset = c1.nrows();
        for &m in elements {
            let count = second.elements[m].count();
            if targets.contains(&m) {
                for j in 0..count {
                    let norm2 = {
                        let e = &second.elements[m];
                        let x = e.vectors.column(j);
                        (x.transpose() * &e.weight * x)[(0, 0)]
                    };
                    rhs_cols.push((offset + j, norm2, m, j));
                }
            }
            offset += count;
        }
        let mut rhs = DMatrix::zeros(rows, rhs_cols.len());
        for (k, &(row, value, _, _)) in rhs_cols.iter().enumerate() {
            rhs[(row, k)] = value;
        }
        let zeta =
            constrained_energy_min(&system.stiffness, nodes, &c, &rhs).map_err(|reason| {
                Error::Basis {
                    element: targets[0],
                    mode: 0,
                    reason,
                }
            })?;
        for (k, &(_, _, m, j)) in rhs_cols.iter().enumerate() {
            let col = second.index(m, j);
            for (p, &g) in nodes.iter().enumerate() {
                vectors[(g, col)] = zeta[(p, k)];
            }
        }
        Ok(())
    };

    match localization {
        Localization::Global => {
            let all: Vec<usize> = (0..n_elem).collect();
            solve_patch(&all, system.interior(), &all)?;
        }
        Localization::Oversampled(layers) => {
            if layers == 0 {
                return Err(Error::Config(
                    "oversampling needs at least one layer".into(),
                ));
            }
            for i in 0..n_elem {
                let patch = decomp.elements_in_patch(i, layers);
                let nodes = decomp
                    .oversampled_rect(i, layers)
                    .interior_nodes(&system.mesh);
                solve_patch(&patch, &nodes, &[i])?;
            }
        }
    }
    for i in 0..n_elem {
        for j in 0..second.elements[i].count() {
            origins.push(BasisOrigin {
                entity: i,
                mode: j,
                eigenvalue: second.elements[i].spectrum[j],
                color: decomp.element_color(i),
            });
        }
    }
    let tag = match localization {
        Localization::Global => SpaceTag::V2SecondGlo,
        Localization::Oversampled(_) => SpaceTag::V2Second,
    };
    Ok(prune_dependent(
        SubspaceBasis {
            tag,
            vectors,
            origins,
        },
        tails,
        &system.mass,
        DEPENDENCE_TOL,
    ))
}

fn checked_gram(op: &SymOperator, basis: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let g = op.gram(basis, basis);
    let cond = scaled_condition(&g);
    if cond > MAX_GRAM_CONDITION {
        return Err(Error::Conditioning(format!(
            "{what} Gram matrix has scaled condition number {cond:.3e}"
        )));
    }
    Ok(g)
}

/// Largest cosine between two subspaces in the mass inner product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineReport {
    pub value: f64,
    /// Whether the union of both bases is numerically independent.
    pub independent: bool,
}

pub fn compute_gamma(
    v1: &DMatrix<f64>,
    v2: &DMatrix<f64>,
    mass: &SymOperator,
) -> Result<CosineReport> {
    let g1 = checked_gram(mass, v1, "first space")?;
    let g2 = checked_gram(mass, v2, "second space")?;
    let cross = mass.gram(v1, v2);
    let value = max_principal_cosine(&g1, &g2, &cross).map_err(Error::Conditioning)?;
    let (k1, k2) = (g1.nrows(), g2.nrows());
    let mut joint = DMatrix::zeros(k1 + k2, k1 + k2);
    joint.view_mut((0, 0), (k1, k1)).copy_from(&g1);
    joint.view_mut((k1, k1), (k2, k2)).copy_from(&g2);
    joint.view_mut((0, k1), (k1, k2)).copy_from(&cross);
    joint
        .view_mut((k1, 0), (k2, k1))
        .copy_from(&cross.transpose());
    let independent = scaled_condition(&joint) <= MAX_GRAM_CONDITION;
    Ok(CosineReport { value, independent })
}

/// Largest pairwise cosine between differently colored parts.
pub fn compute_beta(parts: &[(u8, SubspaceBasis)], mass: &SymOperator) -> Result<f64> {
    if parts.len() < 2 {
        return Err(Error::Config(format!(
            "need at least two colored parts, got {}",
            parts.len()
        )));
    }
    let mut beta = 0.0f64;
    for a in 0..parts.len() {
        for b in a + 1..parts.len() {
            let r = compute_gamma(&parts[a].1.vectors, &parts[b].1.vectors, mass)?;
            beta = beta.max(r.value);
        }
    }
    Ok(beta)
}

/// `sup_v ||v||_a^2 / (H^{-2} ||v||^2)` over the span of `basis`.
pub fn compute_sup_g(basis: &DMatrix<f64>, system: &FineSystem, h_coarse: f64) -> Result<f64> {
    if basis.ncols() == 0 {
        return Err(Error::Config("sup G of an empty space".into()));
    }
    let a = system.stiffness.gram(basis, basis);
    let m = checked_gram(&system.mass, basis, "space")? * h_coarse.powi(-2);
    largest_generalized_eigenvalue(&a, &m).map_err(Error::Conditioning)
}

/// Which stability condition to turn into a time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauRule {
    /// Single condition on the whole complement space.
    Whole,
    /// Conditions per colored subspace.
    Colored,
}

/// Number of colors and the matching overlap exponent `ceil(log2 colors)`.
pub const COLORS: usize = 4;
pub const OVERLAP_EXPONENT: i32 = 2;

/// Largest `tau` satisfying the stability condition.
pub fn recommend_tau(
    gamma: f64,
    beta: f64,
    sup_g: f64,
    omega: f64,
    h_coarse: f64,
    rule: TauRule,
) -> Result<f64> {
    if !(gamma < 1.0) {
        return Err(Error::InfeasibleSplit { gamma });
    }
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Config(format!("omega = {omega} is outside [0, 1]")));
    }
    let inv_h2 = h_coarse.powi(-2);
    let base = (1.0 - gamma * gamma) / ((2.0 - omega) * sup_g * inv_h2);
    Ok(match rule {
        TauRule::Whole => base,
        TauRule::Colored => {
            if !(beta < 1.0) {
                return Err(Error::InfeasibleSplit { gamma: beta });
            }
            base * (1.0 - beta * beta).powi(OVERLAP_EXPONENT) / (COLORS * COLORS) as f64
        }
    })
}

/// Constants of one complement space relative to `V_{H,1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitConstants {
    pub sup_g: f64,
    pub sup_g_per_color: Vec<(u8, f64)>,
    pub gamma: CosineReport,
    pub beta: f64,
    pub max_tail: Option<f64>,
    pub shortfall: usize,
    pub dropped: usize,
    pub tau_whole: f64,
    pub tau_colored: f64,
}

impl SplitConstants {
    pub fn max_color_sup_g(&self) -> f64 {
        self.sup_g_per_color.iter().map(|c| c.1).fold(0.0, f64::max)
    }
}

pub fn split_constants(
    system: &FineSystem,
    decomp: &CoarseDecomposition,
    v1: &SubspaceBasis,
    v2: &ComplementSpace,
    omega: f64,
) -> Result<SplitConstants> {
    let h = decomp.h_coarse();
    let sup_g = compute_sup_g(&v2.basis.vectors, system, h)?;
    let parts = v2.basis.by_color();
    let mut sup_g_per_color = Vec::with_capacity(parts.len());
    for (c, part) in &parts {
        sup_g_per_color.push((*c, compute_sup_g(&part.vectors, system, h)?));
    }
    let gamma = compute_gamma(&v1.vectors, &v2.basis.vectors, &system.mass)?;
    let beta = compute_beta(&parts, &system.mass)?;
    let max_color = sup_g_per_color.iter().map(|c| c.1).fold(0.0, f64::max);
    Ok(SplitConstants {
        sup_g,
        gamma,
        beta,
        max_tail: v2.max_tail(),
        shortfall: v2.shortfall(),
        dropped: v2.dropped.len(),
        tau_whole: recommend_tau(gamma.value, beta, sup_g, omega, h, TauRule::Whole)?,
        tau_colored: recommend_tau(gamma.value, beta, max_color, omega, h, TauRule::Colored)?,
        sup_g_per_color,
    })
}

/// One row of the contrast table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsReport {
    pub contrast: f64,
    pub sup_g_v1: f64,
    pub first: SplitConstants,
    pub second: SplitConstants,
}

impl ConstantsReport {
    pub const CSV_HEADER: &'static str =
        "contrast,supG_V1,supG_V2_first,supG_V2_second,gamma,beta,tau_thm32,tau_thm33,\
gamma_second,beta_second,tau_thm32_second,tau_thm33_second";

    pub fn csv_row(&self) -> String {
        format!(
            "{:e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            self.contrast,
            self.sup_g_v1,
            self.first.sup_g,
            self.second.sup_g,
            self.first.gamma.value,
            self.first.beta,
            self.first.tau_whole,
            self.first.tau_colored,
            self.second.gamma.value,
            self.second.beta,
            self.second.tau_whole,
            self.second.tau_colored,
        )
    }

    pub fn to_csv(rows: &[ConstantsReport]) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cem::{build_cem_basis, solve_aux_spectral, KappaTilde};
    use crate::mesh::{CellField, FineMesh};

    fn setup(n: usize, nc: usize) -> (FineSystem, CoarseDecomposition, AuxSpace) {
        let mesh = FineMesh::new(n).unwrap();
        let kappa = CellField::new(
            (0..mesh.cell_count())
                .map(|c| {
                    if (c / n) % 4 == 1 && c % n > 2 {
                        1e4
                    } else {
                        1.0
                    }
                })
                .collect(),
        )
        .unwrap();
        let decomp = CoarseDecomposition::new(&mesh, nc, 1).unwrap();
        let sys = FineSystem::new(mesh, kappa).unwrap();
        let aux = solve_aux_spectral(&sys, &decomp, 2, KappaTilde::CoarseScale).unwrap();
        (sys, decomp, aux)
    }

    #[test]
    fn first_choice_counts_and_membership() {
        let (sys, decomp, aux) = setup(12, 3);
        let v2 = build_v2_first(&sys, &decomp, &aux, 2).unwrap();
        assert_eq!(v2.basis.len(), 4 * 2);
        assert_eq!(v2.shortfall(), 0);
        for k in 0..v2.basis.len() {
            let xi = v2.basis.column(k);
            assert!(aux.project_global(&xi).amax() < 1e-8);
            assert!((sys.stiffness.quad_form(&xi) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn second_choice_constraints() {
        let (sys, decomp, aux) = setup(12, 3);
        let v2 = build_v2_second(&sys, &decomp, &aux, 2, Localization::Global).unwrap();
        assert_eq!(v2.basis.len(), 9 * 2);
        for k in 0..v2.basis.len() {
            let z = v2.basis.column(k);
            let moments = aux.project_global(&z);
            assert!(moments.amax() < 1e-8, "{}", moments.amax());
        }
    }

    #[test]
    fn tau_formulas() {
        assert!(
            (recommend_tau(0.0, 0.0, 1.0, 1.0, 1.0, TauRule::Whole).unwrap() - 1.0).abs() < 1e-15
        );
        assert!(
            (recommend_tau(0.0, 0.0, 1.0, 1.0, 1.0, TauRule::Colored).unwrap() - 1.0 / 16.0).abs()
                < 1e-15
        );
        assert!(matches!(
            recommend_tau(1.0, 0.0, 1.0, 1.0, 1.0, TauRule::Whole),
            Err(Error::InfeasibleSplit { .. })
        ));
    }

    #[test]
    fn gamma_of_coincident_and_disjoint_spaces() {
        let mass = SymOperator::identity(4);
        let v1 = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        let v2 = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, 0.0]);
        let r = compute_gamma(&v1, &v2, &mass).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.independent);
        let r = compute_gamma(&v1, &v1, &mass).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        assert!(!r.independent);
    }

    #[test]
    fn split_constants_are_in_range() {
        let (sys, decomp, aux) = setup(12, 3);
        let v1 = build_cem_basis(&sys, &decomp, &aux, 1).unwrap();
        let v2 = build_v2_first(&sys, &decomp, &aux, 2).unwrap();
        let c = split_constants(&sys, &decomp, &v1, &v2, 1.0).unwrap();
        assert!(c.gamma.value < 1.0 && c.gamma.independent);
        assert!(c.beta < 1.0);
        assert!(c.tau_whole > 0.0 && c.tau_colored > 0.0);
        assert!(c.max_color_sup_g() <= c.sup_g * (1.0 + 1e-10));
    }
}
