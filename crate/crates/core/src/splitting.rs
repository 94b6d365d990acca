//! Time steppers in reduced coordinates on `V_{H,1} + V_{H,2}`.
//!
//! A coarse function is `u_H = V1 u1 + V2 u2` where the columns of `V1`, `V2`
//! are the basis vectors. Every scheme below advances `(u1, u2)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::cem::SubspaceBasis;
use crate::error::{Error, Result};
use crate::fine::{
    checked_sqrt, FineSystem, Forcing, StepRecord, TimeGrid, Trajectory, BLOWUP_FACTOR,
};
use crate::linalg::scaled_condition;

/// Galerkin blocks of the stiffness and mass on the two spaces.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub v1: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    pub a11: DMatrix<f64>,
    pub a12: DMatrix<f64>,
    pub a22: DMatrix<f64>,
    pub m11: DMatrix<f64>,
    pub m12: DMatrix<f64>,
    pub m22: DMatrix<f64>,
}

fn sym(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn chol(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization(format!("{what} is not positive definite")))
}

impl ReducedSystem {
    pub fn new(system: &FineSystem, v1: &DMatrix<f64>, v2: &DMatrix<f64>) -> Result<Self> {
        let n = system.node_count();
        if v1.nrows() != n || v2.nrows() != n {
            return Err(Error::Config(format!(
                "basis vectors have {} and {} entries, the mesh has {n} nodes",
                v1.nrows(),
                v2.nrows()
            )));
        }
        let av1 = system.stiffness.mul_dense(v1);
        let av2 = system.stiffness.mul_dense(v2);
        let mv1 = system.mass.mul_dense(v1);
        let mv2 = system.mass.mul_dense(v2);
        let red = Self {
            a11: sym(v1.transpose() * &av1),
            a12: v1.transpose() * &av2,
            a22: sym(v2.transpose() * &av2),
            m11: sym(v1.transpose() * &mv1),
            m12: v1.transpose() * &mv2,
            m22: sym(v2.transpose() * &mv2),
            v1: v1.clone(),
            v2: v2.clone(),
        };
        for (m, what) in [(&red.m11, "first"), (&red.m22, "second")] {
            let cond = scaled_condition(m);
            if cond > crate::complement::MAX_GRAM_CONDITION {
                return Err(Error::Conditioning(format!(
                    "{what} space mass Gram has scaled condition number {cond:.3e}"
                )));
            }
        }
        Ok(red)
    }

    pub fn from_bases(system: &FineSystem, v1: &SubspaceBasis, v2: &SubspaceBasis) -> Result<Self> {
        Self::new(system, &v1.vectors, &v2.vectors)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a11.nrows(), self.a22.nrows())
    }

    /// Blocks with the stiffness removed, for pure mass dynamics.
    pub fn without_stiffness(&self) -> Self {
        let mut r = self.clone();
        r.a11.fill(0.0);
        r.a12.fill(0.0);
        r.a22.fill(0.0);
        r
    }

    fn joint(&self, b11: &DMatrix<f64>, b12: &DMatrix<f64>, b22: &DMatrix<f64>) -> DMatrix<f64> {
        let (k1, k2) = self.dims();
        let mut j = DMatrix::zeros(k1 + k2, k1 + k2);
        j.view_mut((0, 0), (k1, k1)).copy_from(b11);
        j.view_mut((0, k1), (k1, k2)).copy_from(b12);
        j.view_mut((k1, 0), (k2, k1)).copy_from(&b12.transpose());
        j.view_mut((k1, k1), (k2, k2)).copy_from(b22);
        j
    }

    pub fn joint_mass(&self) -> DMatrix<f64> {
        self.joint(&self.m11, &self.m12, &self.m22)
    }

    pub fn joint_stiffness(&self) -> DMatrix<f64> {
        self.joint(&self.a11, &self.a12, &self.a22)
    }

    pub fn reconstruct(&self, u1: &DVector<f64>, u2: &DVector<f64>) -> DVector<f64> {
        &self.v1 * u1 + &self.v2 * u2
    }

    /// `(V1^T F, V2^T F)` for a nodal load.
    pub fn reduce_load(&self, f: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (self.v1.tr_mul(f), self.v2.tr_mul(f))
    }

    fn quad(
        &self,
        b11: &DMatrix<f64>,
        b12: &DMatrix<f64>,
        b22: &DMatrix<f64>,
        u1: &DVector<f64>,
        u2: &DVector<f64>,
    ) -> f64 {
        u1.dot(&(b11 * u1)) + 2.0 * u1.dot(&(b12 * u2)) + u2.dot(&(b22 * u2))
    }

    pub fn mass_norm2(&self, u1: &DVector<f64>, u2: &DVector<f64>) -> f64 {
        self.quad(&self.m11, &self.m12, &self.m22, u1, u2)
    }

    pub fn energy_norm2(&self, u1: &DVector<f64>, u2: &DVector<f64>) -> f64 {
        self.quad(&self.a11, &self.a12, &self.a22, u1, u2)
    }
}

/// Coordinates at the current and previous time level.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitState {
    pub u1: DVector<f64>,
    pub u1_prev: DVector<f64>,
    pub u2: DVector<f64>,
    pub u2_prev: DVector<f64>,
    pub step: usize,
}

impl SplitState {
    pub fn zeros(k1: usize, k2: usize) -> Self {
        Self::at_rest(DVector::zeros(k1), DVector::zeros(k2))
    }

    /// State with history equal to the current values.
    pub fn at_rest(u1: DVector<f64>, u2: DVector<f64>) -> Self {
        Self {
            u1_prev: u1.clone(),
            u2_prev: u2.clone(),
            u1,
            u2,
            step: 0,
        }
    }

    /// `(gamma^2 / 2) sum_i ||u_i - u_i_prev||^2 + (tau / 2) ||u_H||_a^2`.
    pub fn monitor(&self, reduced: &ReducedSystem, gamma: f64, tau: f64) -> f64 {
        let d1 = &self.u1 - &self.u1_prev;
        let d2 = &self.u2 - &self.u2_prev;
        let inc = d1.dot(&(&reduced.m11 * &d1)) + d2.dot(&(&reduced.m22 * &d2));
        0.5 * gamma * gamma * inc + 0.5 * tau * reduced.energy_norm2(&self.u1, &self.u2)
    }
}

/// Coupled L2 projection of a nodal function onto `V_{H,1} + V_{H,2}`.
pub fn init_split(
    system: &FineSystem,
    reduced: &ReducedSystem,
    u0: &DVector<f64>,
) -> Result<SplitState> {
    let (k1, k2) = reduced.dims();
    let mu0 = system.mass.matvec(u0);
    let (b1, b2) = reduced.reduce_load(&mu0);
    let mut rhs = DVector::zeros(k1 + k2);
    rhs.rows_mut(0, k1).copy_from(&b1);
    rhs.rows_mut(k1, k2).copy_from(&b2);
    let c = chol(&reduced.joint_mass(), "joint mass Gram")?.solve(&rhs);
    Ok(SplitState::at_rest(
        c.rows(0, k1).into_owned(),
        c.rows(k1, k2).into_owned(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// Backward Euler on the joint space.
    ImplicitCoarse,
    /// Implicit on `V_{H,1}`, explicit on an M-orthogonal `V_{H,2}`.
    OrthogonalSplit,
    /// Lagged cross-mass terms (`mu = 0`); `omega` weights the new `u1` in the explicit equation.
    PartialExplicit { omega: f64 },
    /// Coupled cross-mass terms (`mu = 1`).
    General { omega: f64 },
}

impl Scheme {
    pub fn mu(&self) -> Option<u8> {
        match self {
            Scheme::ImplicitCoarse => None,
            Scheme::OrthogonalSplit | Scheme::General { .. } => Some(1),
            Scheme::PartialExplicit { .. } => Some(0),
        }
    }

    pub fn omega(&self) -> Option<f64> {
        match self {
            Scheme::ImplicitCoarse => None,
            Scheme::OrthogonalSplit => Some(1.0),
            Scheme::PartialExplicit { omega } | Scheme::General { omega } => Some(*omega),
        }
    }
}

/// Relative size of `M12` below which a split counts as M-orthogonal.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

enum Factors {
    Joint(Cholesky<f64, Dyn>),
    Split {
        implicit: Cholesky<f64, Dyn>,
        mass2: Cholesky<f64, Dyn>,
    },
    Coupled(LU<f64, Dyn, Dyn>),
}

/// A scheme with its matrices factorized for a fixed `tau`.
pub struct Stepper<'a> {
    reduced: &'a ReducedSystem,
    scheme: Scheme,
    tau: f64,
    factors: Factors,
}

impl<'a> Stepper<'a> {
    pub fn new(reduced: &'a ReducedSystem, scheme: Scheme, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!(
                "time step must be positive, got {tau}"
            )));
        }
        if let Some(omega) = scheme.omega() {
            if !(0.0..=1.0).contains(&omega) {
                return Err(Error::Config(format!("omega = {omega} is outside [0, 1]")));
            }
        }
        let r = reduced;
        let (k1, k2) = r.dims();
        let factors = match scheme {
            Scheme::ImplicitCoarse => {
                let lhs = r.joint_mass() + r.joint_stiffness() * tau;
                Factors::Joint(chol(&lhs, "implicit system")?)
            }
            Scheme::OrthogonalSplit | Scheme::PartialExplicit { .. } => {
                if scheme == Scheme::OrthogonalSplit {
                    let scale = (r.m11.diagonal().max() * r.m22.diagonal().max()).sqrt();
                    let off = r.m12.amax();
                    if k1 > 0 && k2 > 0 && off > ORTHOGONALITY_TOL * scale {
                        return Err(Error::Config(format!(
                            "orthogonal split needs M-orthogonal spaces; cross mass is {:.3e} relative",
                            off / scale
                        )));
                    }
                }
                Factors::Split {
                    implicit: chol(&(&r.m11 + &r.a11 * tau), "implicit block")?,
                    mass2: chol(&r.m22, "second mass block")?,
                }
            }
            Scheme::General { omega } => {
                let mut lhs = DMatrix::zeros(k1 + k2, k1 + k2);
                lhs.view_mut((0, 0), (k1, k1))
                    .copy_from(&(&r.m11 + &r.a11 * tau));
                lhs.view_mut((0, k1), (k1, k2)).copy_from(&r.m12);
                lhs.view_mut((k1, 0), (k2, k1))
                    .copy_from(&(r.m12.transpose() + r.a12.transpose() * (tau * omega)));
                lhs.view_mut((k1, k1), (k2, k2)).copy_from(&r.m22);
                let lu = lhs.lu();
                if !lu.is_invertible() {
                    return Err(Error::Factorization("coupled system is singular".into()));
                }
                Factors::Coupled(lu)
            }
        };
        Ok(Self {
            reduced,
            scheme,
            tau,
            factors,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Advances one step. `f_now` and `f_next` are the reduced loads at `t^n` and `t^{n+1}`.
    pub fn step(
        &self,
        s: &SplitState,
        f_now: &(DVector<f64>, DVector<f64>),
        f_next: &(DVector<f64>, DVector<f64>),
    ) -> SplitState {
        let r = self.reduced;
        let tau = self.tau;
        let (k1, k2) = r.dims();
        let (u1_new, u2_new) = match (&self.factors, self.scheme) {
            (Factors::Joint(c), _) => {
                let mut rhs = DVector::zeros(k1 + k2);
                rhs.rows_mut(0, k1)
                    .copy_from(&(&r.m11 * &s.u1 + &r.m12 * &s.u2 + &f_next.0 * tau));
                rhs.rows_mut(k1, k2)
                    .copy_from(&(r.m12.tr_mul(&s.u1) + &r.m22 * &s.u2 + &f_next.1 * tau));
                let x = c.solve(&rhs);
                (x.rows(0, k1).into_owned(), x.rows(k1, k2).into_owned())
            }
            (Factors::Split { implicit, mass2 }, scheme) => {
                let omega = scheme.omega().unwrap_or(1.0);
                let lagged = scheme.mu() == Some(0);
                let mut rhs1 = &r.m11 * &s.u1 - (&r.a12 * &s.u2) * tau + &f_next.0 * tau;
                if lagged {
                    rhs1 -= &r.m12 * (&s.u2 - &s.u2_prev);
                }
                let u1 = implicit.solve(&rhs1);
                let u1_mix = &s.u1 * (1.0 - omega) + &u1 * omega;
                let mut rhs2 = &r.m22 * &s.u2 - (r.a12.tr_mul(&u1_mix) + &r.a22 * &s.u2) * tau
                    + &f_now.1 * tau;
                if lagged {
                    rhs2 -= r.m12.tr_mul(&(&s.u1 - &s.u1_prev));
                }
                (u1, mass2.solve(&rhs2))
            }
            (Factors::Coupled(lu), scheme) => {
                let omega = scheme.omega().unwrap_or(1.0);
                let mut rhs = DVector::zeros(k1 + k2);
                rhs.rows_mut(0, k1).copy_from(
                    &(&r.m11 * &s.u1 + &r.m12 * &s.u2 - (&r.a12 * &s.u2) * tau + &f_next.0 * tau),
                );
                rhs.rows_mut(k1, k2).copy_from(
                    &(r.m12.tr_mul(&s.u1) + &r.m22 * &s.u2
                        - (r.a12.tr_mul(&s.u1) * (1.0 - omega) + &r.a22 * &s.u2) * tau
                        + &f_now.1 * tau),
                );
                let x = lu.solve(&rhs).expect("factorization checked invertible");
                (x.rows(0, k1).into_owned(), x.rows(k1, k2).into_owned())
            }
        };
        SplitState {
            u1_prev: s.u1.clone(),
            u2_prev: s.u2.clone(),
            u1: u1_new,
            u2: u2_new,
            step: s.step + 1,
        }
    }
}

/// Result of a reduced run: diagnostics (with full nodal snapshots at kept
/// steps) and the final state.
#[derive(Debug, Clone)]
pub struct SplitRun {
    pub trajectory: Trajectory,
    pub final_state: SplitState,
}

/// Runs `grid.steps` steps from `state0`. If `gamma` is given the stability
/// functional is recorded for each step.
pub fn run(
    system: &FineSystem,
    reduced: &ReducedSystem,
    scheme: Scheme,
    grid: TimeGrid,
    forcing: &Forcing,
    state0: SplitState,
    gamma: Option<f64>,
) -> Result<SplitRun> {
    let stepper = Stepper::new(reduced, scheme, grid.tau)?;
    let (k1, k2) = reduced.dims();
    let nodes = system.node_count();
    let load = |t: f64| {
        if forcing.is_none() {
            (DVector::zeros(k1), DVector::zeros(k2))
        } else {
            reduced.reduce_load(&forcing.at(t, nodes))
        }
    };
    let norms = |s: &SplitState| -> Result<(f64, f64)> {
        let finite = s.u1.iter().chain(s.u2.iter()).all(|v| v.is_finite());
        if !finite {
            return Ok((f64::NAN, f64::NAN));
        }
        let m = reduced.mass_norm2(&s.u1, &s.u2);
        let a = reduced.energy_norm2(&s.u1, &s.u2);
        Ok((
            checked_sqrt(m, reduced.m11.norm() + reduced.m22.norm())?,
            checked_sqrt(a, reduced.a11.norm() + reduced.a22.norm())?,
        ))
    };
    let (l2_0, _) = norms(&state0)?;
    let threshold = BLOWUP_FACTOR * l2_0.max(1.0);

    let mut traj = Trajectory::default();
    let record = |s: &SplitState, traj: &mut Trajectory| -> Result<bool> {
        let (l2, en) = norms(s)?;
        let blowup = !l2.is_finite() || l2 > threshold;
        let n = s.step;
        traj.records.push(StepRecord {
            step: n,
            time: n as f64 * grid.tau,
            l2_norm: l2,
            energy_norm: en,
            monitor: gamma.map(|g| s.monitor(reduced, g, grid.tau)),
            blowup,
        });
        let keep = n == 0 || n == grid.steps || (grid.stride > 0 && n.is_multiple_of(grid.stride));
        if keep || blowup {
            traj.snapshots.push((n, reduced.reconstruct(&s.u1, &s.u2)));
        }
        if blowup {
            traj.blowup_step = Some(n);
        }
        Ok(!blowup)
    };

    let mut state = state0;
    record(&state, &mut traj)?;
    let mut f_now = load(0.0);
    for n in 0..grid.steps {
        let f_next = load((n + 1) as f64 * grid.tau);
        state = stepper.step(&state, &f_now, &f_next);
        if !record(&state, &mut traj)? {
            break;
        }
        f_now = f_next;
    }
    Ok(SplitRun {
        trajectory: traj,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{CellField, FineMesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(seed: u64) -> (FineSystem, DMatrix<f64>, DMatrix<f64>) {
        let mesh = FineMesh::new(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kappa = CellField::new((0..36).map(|_| rng.gen_range(1.0..10.0)).collect()).unwrap();
        let sys = FineSystem::new(mesh, kappa).unwrap();
        let mut rand_basis = |k: usize| {
            let mut v = DMatrix::from_fn(sys.node_count(), k, |_, _| rng.gen_range(-1.0..1.0));
            for &b in &(0..sys.node_count())
                .filter(|&g| sys.mesh.is_boundary(g))
                .collect::<Vec<_>>()
            {
                v.row_mut(b).fill(0.0);
            }
            v
        };
        let v1 = rand_basis(3);
        let v2 = rand_basis(2);
        (sys, v1, v2)
    }

    #[test]
    fn blocks_match_dense_products() {
        let (sys, v1, v2) = random_system(1);
        let r = ReducedSystem::new(&sys, &v1, &v2).unwrap();
        let all: Vec<usize> = (0..sys.node_count()).collect();
        let a = sys.stiffness.to_dense(&all);
        let m = sys.mass.to_dense(&all);
        assert!((&r.a12 - v1.transpose() * &a * &v2).amax() < 1e-12);
        assert!((&r.m22 - v2.transpose() * &m * &v2).amax() < 1e-12);
    }

    #[test]
    fn pure_mass_dynamics_is_stationary() {
        let (sys, v1, v2) = random_system(2);
        let r = ReducedSystem::new(&sys, &v1, &v2)
            .unwrap()
            .without_stiffness();
        let s0 = SplitState::at_rest(
            DVector::from_vec(vec![1.0, -2.0, 0.5]),
            DVector::from_vec(vec![0.3, 0.1]),
        );
        for scheme in [
            Scheme::ImplicitCoarse,
            Scheme::PartialExplicit { omega: 0.5 },
            Scheme::General { omega: 1.0 },
        ] {
            let out = run(
                &sys,
                &r,
                scheme,
                TimeGrid::new(0.1, 5),
                &Forcing::None,
                s0.clone(),
                None,
            )
            .unwrap();
            assert!((&out.final_state.u1 - &s0.u1).amax() < 1e-12);
            assert!((&out.final_state.u2 - &s0.u2).amax() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_split_rejects_coupled_spaces() {
        let (sys, v1, v2) = random_system(3);
        let r = ReducedSystem::new(&sys, &v1, &v2).unwrap();
        assert!(matches!(
            Stepper::new(&r, Scheme::OrthogonalSplit, 0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn projection_residual_is_orthogonal() {
        let (sys, v1, v2) = random_system(4);
        let r = ReducedSystem::new(&sys, &v1, &v2).unwrap();
        let mut u0 = DVector::from_fn(sys.node_count(), |k, _| (k as f64 * 0.37).sin());
        sys.clamp_boundary(&mut u0);
        let s = init_split(&sys, &r, &u0).unwrap();
        let res = &u0 - r.reconstruct(&s.u1, &s.u2);
        let mres = sys.mass.matvec(&res);
        assert!(v1.tr_mul(&mres).amax() < 1e-10);
        assert!(v2.tr_mul(&mres).amax() < 1e-10);
    }
}
