//! Sparse symmetric operators, SPD solvers and the small dense kernels used by
//! the local spectral problems and the subspace constants.

use nalgebra::{DMatrix, DVector, SymmetricEigen, QR, SVD};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sparse symmetric matrix in CSR storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SymOperator {
    csr: CsrMatrix<f64>,
}

impl SymOperator {
    pub fn from_csr(csr: CsrMatrix<f64>) -> Self {
        Self { csr }
    }

    /// Sums duplicate triplets.
    pub fn from_triplets(dim: usize, rows: &[usize], cols: &[usize], vals: &[f64]) -> Result<Self> {
        let coo =
            CooMatrix::try_from_triplets(dim, dim, rows.to_vec(), cols.to_vec(), vals.to_vec())
                .map_err(|e| Error::Assembly(e.to_string()))?;
        Ok(Self {
            csr: CsrMatrix::from(&coo),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            csr: CsrMatrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.csr.nrows()
    }

    pub fn csr(&self) -> &CsrMatrix<f64> {
        &self.csr
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let r = self.csr.row(row);
        match r.col_indices().binary_search(&col) {
            Ok(k) => r.values()[k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|i| self.get(i, i)))
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim());
        self.matvec_into(x.as_slice(), y.as_mut_slice());
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        let (offsets, cols, vals) = self.csr.csr_data();
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in offsets[i]..offsets[i + 1] {
                acc += vals[k] * x[cols[k]];
            }
            *yi = acc;
        }
    }

    /// `self * dense`.
    pub fn mul_dense(&self, dense: &DMatrix<f64>) -> DMatrix<f64> {
        &self.csr * dense
    }

    /// `x^T Op y`.
    pub fn bilinear(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        x.dot(&self.matvec(y))
    }

    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        self.bilinear(x, x)
    }

    /// `V^T Op W`, dense.
    pub fn gram(&self, v: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
        v.transpose() * self.mul_dense(w)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut csr = self.csr.clone();
        csr.values_mut().iter_mut().for_each(|v| *v *= factor);
        Self { csr }
    }

    /// `self + factor * other`; both operators must share a sparsity pattern.
    pub fn add_scaled(&self, factor: f64, other: &SymOperator) -> Result<Self> {
        if self.csr.pattern() != other.csr.pattern() {
            return Err(Error::Assembly(
                "operators have different sparsity patterns".into(),
            ));
        }
        let mut csr = self.csr.clone();
        for (a, b) in csr.values_mut().iter_mut().zip(other.csr.values()) {
            *a += factor * b;
        }
        Ok(Self { csr })
    }

    /// Principal submatrix on `indices` (which must be ascending).
    pub fn restrict(&self, indices: &[usize]) -> Self {
        let mut local = vec![usize::MAX; self.dim()];
        for (k, &g) in indices.iter().enumerate() {
            local[g] = k;
        }
        let mut offsets = Vec::with_capacity(indices.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        offsets.push(0);
        for &g in indices {
            let row = self.csr.row(g);
            for (&c, &v) in row.col_indices().iter().zip(row.values()) {
                let lc = local[c];
                if lc != usize::MAX {
                    cols.push(lc);
                    vals.push(v);
                }
            }
            offsets.push(cols.len());
        }
        let csr = CsrMatrix::try_from_csr_data(indices.len(), indices.len(), offsets, cols, vals)
            .expect("restriction of a valid CSR matrix is valid");
        Self { csr }
    }

    /// Dense principal submatrix on `indices`.
    pub fn to_dense(&self, indices: &[usize]) -> DMatrix<f64> {
        let sub = self.restrict(indices);
        let mut d = DMatrix::zeros(indices.len(), indices.len());
        for (i, j, v) in sub.csr.triplet_iter() {
            d[(i, j)] = *v;
        }
        d
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.csr.values().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `||Op - Op^T||_F / ||Op||_F`.
    pub fn symmetry_error(&self) -> f64 {
        let t = self.csr.transpose();
        let mut diff = 0.0;
        for (i, j, v) in self.csr.triplet_iter() {
            let r = t.row(i);
            let tv = match r.col_indices().binary_search(&j) {
                Ok(k) => r.values()[k],
                Err(_) => 0.0,
            };
            diff += (v - tv).powi(2);
        }
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            0.0
        } else {
            diff.sqrt() / norm
        }
    }

    pub fn cholesky(&self) -> Result<SparseCholesky> {
        SparseCholesky::factor(self)
    }
}

/// Sparse Cholesky factorization for repeated solves with one SPD operator.
pub struct SparseCholesky {
    factor: CscCholesky<f64>,
    dim: usize,
}

impl SparseCholesky {
    pub fn factor(op: &SymOperator) -> Result<Self> {
        let csc = CscMatrix::from(op.csr());
        let factor = CscCholesky::factor(&csc)
            .map_err(|e| Error::Factorization(format!("sparse Cholesky: {e:?}")))?;
        Ok(Self {
            factor,
            dim: op.dim(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut b = DMatrix::from_column_slice(self.dim, 1, rhs.as_slice());
        self.factor.solve_mut(&mut b);
        DVector::from_column_slice(b.as_slice())
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut b = rhs.clone();
        self.factor.solve_mut(&mut b);
        b
    }
}

/// Preconditioned conjugate gradients with a Jacobi preconditioner.
///
/// Stops when `||op x - rhs|| <= tol ||rhs||`; the iteration cap is ten times
/// the dimension.
pub fn solve_spd(op: &SymOperator, rhs: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let n = op.dim();
    if rhs.len() != n {
        return Err(Error::Assembly(format!(
            "right-hand side has length {} but the operator has dimension {n}",
            rhs.len()
        )));
    }
    let rhs_norm = rhs.norm();
    let mut x = DVector::zeros(n);
    if rhs_norm == 0.0 {
        return Ok(x);
    }
    let inv_diag = op.diagonal().map(|d| if d > 0.0 { 1.0 / d } else { 1.0 });
    let mut r = rhs.clone();
    let mut z = r.component_mul(&inv_diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut ap = DVector::zeros(n);
    let cap = 10 * n.max(1);
    for it in 0..cap {
        let res = r.norm() / rhs_norm;
        if res <= tol {
            return Ok(x);
        }
        op.matvec_into(p.as_slice(), ap.as_mut_slice());
        let pap = p.dot(&ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::Solver {
                iterations: it,
                residual: res,
            });
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = r.component_mul(&inv_diag);
        let rz_new = r.dot(&z);
        p.axpy(1.0, &z, rz_new / rz);
        rz = rz_new;
    }
    // the recursive residual drifts; confirm with the true one
    let true_res = (rhs - op.matvec(&x)).norm() / rhs_norm;
    if true_res <= tol {
        Ok(x)
    } else {
        Err(Error::Solver {
            iterations: cap,
            residual: true_res,
        })
    }
}

/// Flips the sign of each column so its largest-magnitude entry is positive.
pub fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() + 1e-14 * best.abs().max(1e-300) {
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigenpairs of the symmetric-definite pencil `a x = lambda b x`, ascending,
/// with `b`-orthonormal eigenvectors.
pub fn generalized_eigen(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), String> {
    let n = a.nrows();
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| "right-hand matrix is not positive definite".to_string())?;
    let l = chol.l();
    let linv_a = l
        .solve_lower_triangular(a)
        .ok_or_else(|| "triangular solve failed".to_string())?;
    let mut c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| "triangular solve failed".to_string())?;
    symmetrize(&mut c);
    let eig = SymmetricEigen::try_new(c, 1e-15, 10_000)
        .ok_or_else(|| "symmetric eigensolver did not converge".to_string())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut y = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        y.set_column(k, &eig.eigenvectors.column(i));
    }
    let x = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| "back substitution failed".to_string())?;
    Ok((values, x))
}

/// The `count` lowest eigenpairs of `a x = lambda b x`, polished by shifted
/// block inverse iteration and a Rayleigh-Ritz step.
///
/// When `a` carries entries many orders of magnitude above `b`, the vectors
/// from the dense reduction can pick up large-energy components even though
/// the eigenvalues are accurate; the polish removes them.
pub fn lowest_generalized_eigen(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    count: usize,
) -> Result<(DVector<f64>, DMatrix<f64>), String> {
    let (values, vectors) = generalized_eigen(a, b)?;
    let m = (count + GUARD_VECTORS).min(values.len());
    if count == 0 || m == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(a.nrows(), 0)));
    }
    let shift = (-values[0]).max(0.0) + 1.0;
    let shifted = a + b * shift;
    let chol = shifted
        .cholesky()
        .ok_or_else(|| "shifted pencil is not positive definite".to_string())?;
    let mut x = vectors.columns(0, m).into_owned();
    let mut vals = values.rows(0, m).into_owned();
    let mut filler = ChaCha8Rng::seed_from_u64(FILLER_SEED);
    for _ in 0..INVERSE_ITERATIONS {
        let mut q = b_orthonormalize(&chol.solve(&(b * &x)), b);
        // near-duplicate starting vectors collapse under iteration; refill
        // the block with fresh directions so the lowest modes are not missed
        while q.ncols() < m {
            let r = DMatrix::from_fn(a.nrows(), m - q.ncols(), |_, _| filler.gen_range(-1.0..1.0));
            let fresh = chol.solve(&(b * r));
            let joined = DMatrix::from_columns(
                &q.column_iter()
                    .chain(fresh.column_iter())
                    .map(|c| c.into_owned())
                    .collect::<Vec<_>>(),
            );
            q = b_orthonormalize(&joined, b);
        }
        // a second pass restores orthonormality lost to small Gram eigenvalues
        let q = b_orthonormalize(&q, b);
        let mut ar = q.transpose() * a * &q;
        symmetrize(&mut ar);
        let eig = SymmetricEigen::try_new(ar, 1e-15, 10_000)
            .ok_or_else(|| "symmetric eigensolver did not converge".to_string())?;
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        vals = DVector::from_iterator(m, order.iter().map(|&i| eig.eigenvalues[i]));
        x = DMatrix::from_columns(
            &order
                .iter()
                .map(|&i| &q * eig.eigenvectors.column(i))
                .collect::<Vec<_>>(),
        );
    }
    let kept = count.min(m);
    Ok((
        vals.rows(0, kept).into_owned(),
        x.columns(0, kept).into_owned(),
    ))
}

/// `b`-orthonormal basis of the column span of `y`, dropping directions whose
/// `b`-norm is negligible against the largest.
fn b_orthonormalize(y: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = y.transpose() * b * y;
    symmetrize(&mut g);
    let eig = g.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let cols: Vec<DVector<f64>> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > RANK_TOL * top)
        .map(|k| y * eig.eigenvectors.column(k) / eig.eigenvalues[k].sqrt())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(y.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

const RANK_TOL: f64 = 1e-14;
const FILLER_SEED: u64 = 0x5eed;
const INVERSE_ITERATIONS: usize = 3;
const GUARD_VECTORS: usize = 3;

/// Largest eigenvalue of the pencil `a x = lambda b x`.
pub fn largest_generalized_eigenvalue(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, String> {
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| "right-hand matrix is not positive definite".to_string())?;
    let l = chol.l();
    let linv_a = l
        .solve_lower_triangular(a)
        .ok_or_else(|| "triangular solve failed".to_string())?;
    let mut c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| "triangular solve failed".to_string())?;
    symmetrize(&mut c);
    let values = c.symmetric_eigenvalues();
    Ok(values.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Numerical rank of `m` by singular values relative to the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = SVD::new(m.clone(), false, false).singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel_tol * top).count()
}

/// Orthonormal basis (columns) of the null space of a full-row-rank `constraints`
/// matrix (rows are constraints, columns unknowns).
pub fn nullspace(constraints: &DMatrix<f64>) -> Result<DMatrix<f64>, String> {
    let (c, p) = constraints.shape();
    if c == 0 {
        return Ok(DMatrix::identity(p, p));
    }
    if c >= p {
        return Err(format!(
            "{c} constraints leave no free directions among {p} unknowns"
        ));
    }
    let rank = numerical_rank(constraints, 1e-10);
    if rank < c {
        return Err(format!("constraint matrix has rank {rank} < {c}"));
    }
    let qr = QR::new(constraints.transpose());
    let mut qt = DMatrix::identity(p, p);
    qr.q_tr_mul(&mut qt);
    Ok(qt.rows(c, p - c).transpose())
}

/// Condition number of a Gram matrix after scaling it to unit diagonal.
pub fn scaled_condition(gram: &DMatrix<f64>) -> f64 {
    let n = gram.nrows();
    if n == 0 {
        return 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| gram[(i, i)].max(0.0).sqrt()).collect();
    if d.contains(&0.0) {
        return f64::INFINITY;
    }
    let mut s = DMatrix::from_fn(n, n, |i, j| gram[(i, j)] / (d[i] * d[j]));
    symmetrize(&mut s);
    let ev = s.symmetric_eigenvalues();
    let max = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Largest cosine of the principal angles between two subspaces given their
/// Gram matrices `g1`, `g2` and the cross Gram `cross` (`g1` rows, `g2` columns).
pub fn max_principal_cosine(
    g1: &DMatrix<f64>,
    g2: &DMatrix<f64>,
    cross: &DMatrix<f64>,
) -> Result<f64, String> {
    if g1.is_empty() || g2.is_empty() {
        return Ok(0.0);
    }
    let l1 = g1
        .clone()
        .cholesky()
        .ok_or_else(|| "first Gram matrix is not positive definite".to_string())?
        .l();
    let l2 = g2
        .clone()
        .cholesky()
        .ok_or_else(|| "second Gram matrix is not positive definite".to_string())?
        .l();
    let left = l1
        .solve_lower_triangular(cross)
        .ok_or_else(|| "triangular solve failed".to_string())?;
    let w = l2
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| "triangular solve failed".to_string())?;
    let sv = SVD::new(w, false, false).singular_values;
    Ok(sv.iter().copied().fold(0.0, f64::max).min(1.0))
}
