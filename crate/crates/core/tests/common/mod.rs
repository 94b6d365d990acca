#![allow(dead_code)]

use cemsplit::cem::{solve_aux_spectral, AuxSpace, KappaTilde};
use cemsplit::coarse::CoarseDecomposition;
use cemsplit::fine::FineSystem;
use cemsplit::mesh::{CellField, FineMesh};
use cemsplit::nalgebra::{DMatrix, DVector};
use cemsplit::splitting::{ReducedSystem, SplitState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Background in [1, 2) with horizontal and vertical channels at `contrast`.
pub fn channel_kappa(n: usize, contrast: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut k: Vec<f64> = (0..n * n).map(|_| r.gen_range(1.0..2.0)).collect();
    for _ in 0..3 {
        let row = r.gen_range(1..n - 1);
        let (a, b) = (r.gen_range(0..n / 2), r.gen_range(n / 2..n));
        for c in a..b {
            if r.gen_bool(0.5) {
                k[row * n + c] = contrast;
            } else {
                k[c * n + row] = contrast;
            }
        }
    }
    k
}

pub fn setup(
    n: usize,
    n_coarse: usize,
    contrast: f64,
    seed: u64,
) -> (FineSystem, CoarseDecomposition) {
    let mesh = FineMesh::new(n).unwrap();
    let kappa = CellField::new(channel_kappa(n, contrast, seed)).unwrap();
    let decomp = CoarseDecomposition::new(&mesh, n_coarse, 1).unwrap();
    (FineSystem::new(mesh, kappa).unwrap(), decomp)
}

pub fn aux(sys: &FineSystem, decomp: &CoarseDecomposition, per: usize) -> AuxSpace {
    solve_aux_spectral(sys, decomp, per, KappaTilde::CoarseScale).unwrap()
}

pub fn random_vector(len: usize, seed: u64) -> DVector<f64> {
    let mut r = rng(seed);
    DVector::from_fn(len, |_, _| r.gen_range(-1.0..1.0))
}

/// Orthonormal basis of `{x : c x = 0}` from the eigenvectors of `c^T c`.
pub fn kernel(c: &DMatrix<f64>) -> DMatrix<f64> {
    let ctc = c.transpose() * c;
    let eig = ctc.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let cols: Vec<DVector<f64>> = (0..ctc.nrows())
        .filter(|&k| eig.eigenvalues[k] <= 1e-10 * top)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

/// All eigenpairs of `a x = lambda b x`, ascending, through `b^{-1/2} a b^{-1/2}`.
pub fn dense_pencil(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eb = b.clone().symmetric_eigen();
    let inv_sqrt = &eb.eigenvectors
        * DMatrix::from_diagonal(&eb.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * eb.eigenvectors.transpose();
    let mut c = &inv_sqrt * a * &inv_sqrt;
    c = (&c + c.transpose()) * 0.5;
    let ec = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..ec.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| ec.eigenvalues[i].total_cmp(&ec.eigenvalues[j]));
    let values = order.iter().map(|&i| ec.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| &inv_sqrt * ec.eigenvectors.column(i))
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// Element matrices of the bilinear square, nodes counter-clockwise from the lower-left.
pub fn q1_stiffness() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            4.0, -1.0, -2.0, -1.0, //
            -1.0, 4.0, -1.0, -2.0, //
            -2.0, -1.0, 4.0, -1.0, //
            -1.0, -2.0, -1.0, 4.0,
        ],
    ) / 6.0
}

pub fn q1_mass(h: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            4.0, 2.0, 1.0, 2.0, //
            2.0, 4.0, 2.0, 1.0, //
            1.0, 2.0, 4.0, 2.0, //
            2.0, 1.0, 2.0, 4.0,
        ],
    ) * (h * h / 36.0)
}

/// Dense scatter of per-cell weighted stiffness and mass over the ascending node list.
pub fn local_matrices(
    mesh: &FineMesh,
    cells: &[usize],
    nodes: &[usize],
    stiff_weight: &[f64],
    mass_weight: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (ks, ms) = (q1_stiffness(), q1_mass(mesh.h()));
    let mut a = DMatrix::zeros(nodes.len(), nodes.len());
    let mut m = DMatrix::zeros(nodes.len(), nodes.len());
    for &c in cells {
        let g = mesh.cell_nodes(c);
        for p in 0..4 {
            let Ok(i) = nodes.binary_search(&g[p]) else {
                continue;
            };
            for q in 0..4 {
                let Ok(j) = nodes.binary_search(&g[q]) else {
                    continue;
                };
                a[(i, j)] += stiff_weight[c] * ks[(p, q)];
                m[(i, j)] += mass_weight[c] * ms[(p, q)];
            }
        }
    }
    (a, m)
}

pub fn energy(sys: &FineSystem, u: &DVector<f64>) -> f64 {
    sys.stiffness.quad_form(u).max(0.0).sqrt()
}

pub type Load = (DVector<f64>, DVector<f64>);

/// One step written as a single dense system in `(u1', u2')`:
///   M11 (u1' - u1) + M12 d2 + tau (A11 u1' + A12 u2) = tau f1(t+)
///   M21 d1 + M22 (u2' - u2) + tau (A21 (w u1' + (1 - w) u1) + A22 u2) = tau f2(t)
/// with `d_i = u_i - u_i_prev` when the cross mass is lagged and `u_i' - u_i` otherwise.
pub fn oracle_step(
    r: &ReducedSystem,
    s: &SplitState,
    omega: f64,
    lagged: bool,
    f_now: &Load,
    f_next: &Load,
    tau: f64,
) -> (DVector<f64>, DVector<f64>) {
    let (k1, k2) = r.dims();
    let m21 = r.m12.transpose();
    let a21 = r.a12.transpose();
    let mut lhs = DMatrix::zeros(k1 + k2, k1 + k2);
    let mut rhs = DVector::zeros(k1 + k2);
    lhs.view_mut((0, 0), (k1, k1))
        .copy_from(&(&r.m11 + &r.a11 * tau));
    lhs.view_mut((k1, k1), (k2, k2)).copy_from(&r.m22);
    lhs.view_mut((k1, 0), (k2, k1))
        .copy_from(&(&a21 * (tau * omega)));
    let mut top = &r.m11 * &s.u1 - &r.a12 * &s.u2 * tau + &f_next.0 * tau;
    let mut bottom =
        &r.m22 * &s.u2 - (&a21 * &s.u1 * (1.0 - omega) + &r.a22 * &s.u2) * tau + &f_now.1 * tau;
    if lagged {
        top -= &r.m12 * (&s.u2 - &s.u2_prev);
        bottom -= &m21 * (&s.u1 - &s.u1_prev);
    } else {
        lhs.view_mut((0, k1), (k1, k2)).copy_from(&r.m12);
        let l21 = lhs.view((k1, 0), (k2, k1)) + &m21;
        lhs.view_mut((k1, 0), (k2, k1)).copy_from(&l21);
        top += &r.m12 * &s.u2;
        bottom += &m21 * &s.u1;
    }
    rhs.rows_mut(0, k1).copy_from(&top);
    rhs.rows_mut(k1, k2).copy_from(&bottom);
    let x = lhs.lu().solve(&rhs).unwrap();
    (x.rows(0, k1).into_owned(), x.rows(k1, k2).into_owned())
}
