//! The assembled fine-grid problem and the full-space reference time steppers.

use nalgebra::DVector;

use crate::assembly::{assemble, FormKind};
use crate::error::{Error, Result};
use crate::linalg::{SparseCholesky, SymOperator};
use crate::mesh::{CellField, FineMesh};

/// Divergence threshold shared by all steppers: a run is flagged once a norm
/// exceeds this factor times its reference size.
pub const BLOWUP_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// `(u, u)^{1/2}`
    Mass,
    /// `a(u, u)^{1/2}`
    Energy,
}

/// Mesh, coefficient, and the stiffness/mass operators over all nodes plus
/// their restrictions to interior (Dirichlet-eliminated) dofs.
#[derive(Debug, Clone)]
pub struct FineSystem {
    pub mesh: FineMesh,
    pub kappa: CellField,
    pub stiffness: SymOperator,
    pub mass: SymOperator,
    interior: Vec<usize>,
    stiffness_int: SymOperator,
    mass_int: SymOperator,
}

impl FineSystem {
    pub fn new(mesh: FineMesh, kappa: CellField) -> Result<Self> {
        let stiffness = assemble(&mesh, &kappa, FormKind::Stiffness)?;
        let mass = assemble(&mesh, &kappa, FormKind::Mass)?;
        let interior = mesh.interior_nodes();
        let stiffness_int = stiffness.restrict(&interior);
        let mass_int = mass.restrict(&interior);
        Ok(Self {
            mesh,
            kappa,
            stiffness,
            mass,
            interior,
            stiffness_int,
            mass_int,
        })
    }

    pub fn node_count(&self) -> usize {
        self.mesh.node_count()
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn stiffness_interior(&self) -> &SymOperator {
        &self.stiffness_int
    }

    pub fn mass_interior(&self) -> &SymOperator {
        &self.mass_int
    }

    pub fn to_interior(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.interior.len(), self.interior.iter().map(|&g| u[g]))
    }

    pub fn from_interior(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(self.node_count());
        for (k, &g) in self.interior.iter().enumerate() {
            full[g] = u[k];
        }
        full
    }

    /// Zeroes the Dirichlet entries of a full-length vector.
    pub fn clamp_boundary(&self, u: &mut DVector<f64>) {
        for (k, b) in self.mesh.boundary_mask().iter().enumerate() {
            if *b {
                u[k] = 0.0;
            }
        }
    }

    pub fn norm(&self, u: &DVector<f64>, which: NormKind) -> Result<f64> {
        if u.len() != self.node_count() {
            return Err(Error::Assembly(format!(
                "vector has length {} but the system has {} nodes",
                u.len(),
                self.node_count()
            )));
        }
        let op = match which {
            NormKind::Mass => &self.mass,
            NormKind::Energy => &self.stiffness,
        };
        checked_sqrt(op.quad_form(u), op.frobenius_norm() * u.norm_squared())
    }

    /// Dirichlet solve `a(u, v) = (f, v)` with the sparse Cholesky factor.
    pub fn solve_elliptic(&self, load: &DVector<f64>) -> Result<DVector<f64>> {
        let chol = self.stiffness_int.cholesky()?;
        Ok(self.from_interior(&chol.solve(&self.to_interior(load))))
    }
}

/// `sqrt(q)` for a quadratic form value that may be slightly negative from rounding.
pub(crate) fn checked_sqrt(q: f64, scale: f64) -> Result<f64> {
    if q >= 0.0 {
        Ok(q.sqrt())
    } else if q >= -1e-12 * scale.max(f64::MIN_POSITIVE) {
        Ok(0.0)
    } else {
        Err(Error::NumericalSymmetry { value: q })
    }
}

/// Time-dependent load `F(t)` over all nodes.
pub enum Forcing {
    None,
    Constant(DVector<f64>),
    Varying(Box<dyn Fn(f64) -> DVector<f64> + Send + Sync>),
}

impl Forcing {
    pub fn at(&self, t: f64, len: usize) -> DVector<f64> {
        match self {
            Forcing::None => DVector::zeros(len),
            Forcing::Constant(f) => f.clone(),
            Forcing::Varying(g) => g(t),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Forcing::None)
    }
}

impl std::fmt::Debug for Forcing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Forcing::None => write!(f, "Forcing::None"),
            Forcing::Constant(v) => write!(f, "Forcing::Constant(len {})", v.len()),
            Forcing::Varying(_) => write!(f, "Forcing::Varying(..)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub tau: f64,
    pub steps: usize,
    /// Keep the solution every `stride` steps (0 keeps only the first and last).
    pub stride: usize,
}

impl TimeGrid {
    pub fn new(tau: f64, steps: usize) -> Self {
        Self {
            tau,
            steps,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    fn keeps(&self, n: usize) -> bool {
        n == 0 || n == self.steps || (self.stride > 0 && n.is_multiple_of(self.stride))
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "time step must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub l2_norm: f64,
    pub energy_norm: f64,
    /// Stability functional of the splitting schemes; absent for full-space runs.
    pub monitor: Option<f64>,
    pub blowup: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    /// `(step, full nodal vector)` at the kept steps.
    pub snapshots: Vec<(usize, DVector<f64>)>,
    pub blowup_step: Option<usize>,
}

impl Trajectory {
    pub fn blew_up(&self) -> bool {
        self.blowup_step.is_some()
    }

    pub fn last_snapshot(&self) -> Option<&DVector<f64>> {
        self.snapshots.last().map(|(_, u)| u)
    }

    pub fn snapshot(&self, step: usize) -> Option<&DVector<f64>> {
        self.snapshots
            .binary_search_by_key(&step, |(s, _)| *s)
            .ok()
            .map(|k| &self.snapshots[k].1)
    }

    /// CSV with columns `step,time,l2_norm,energy_norm,monitor_E,blowup_flag`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,time,l2_norm,energy_norm,monitor_E,blowup_flag\n");
        for r in &self.records {
            let monitor = r.monitor.map(|m| format!("{m:.12e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e},{},{}\n",
                r.step,
                r.time,
                r.l2_norm,
                r.energy_norm,
                monitor,
                u8::from(r.blowup)
            ));
        }
        out
    }
}

struct Recorder<'a> {
    system: &'a FineSystem,
    grid: TimeGrid,
    threshold: f64,
    traj: Trajectory,
}

impl<'a> Recorder<'a> {
    fn new(system: &'a FineSystem, grid: TimeGrid, u0: &DVector<f64>) -> Result<Self> {
        let n0 = system.norm(u0, NormKind::Mass)?;
        let threshold = if n0 > 0.0 {
            BLOWUP_FACTOR * n0
        } else {
            BLOWUP_FACTOR
        };
        let mut rec = Self {
            system,
            grid,
            threshold,
            traj: Trajectory::default(),
        };
        rec.push(0, u0)?;
        Ok(rec)
    }

    /// Returns `false` once the run has diverged.
    fn push(&mut self, n: usize, u: &DVector<f64>) -> Result<bool> {
        let finite = u.iter().all(|v| v.is_finite());
        let (l2, en) = if finite {
            (
                self.system.norm(u, NormKind::Mass)?,
                self.system.norm(u, NormKind::Energy)?,
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        let blowup = !finite || l2 > self.threshold;
        self.traj.records.push(StepRecord {
            step: n,
            time: n as f64 * self.grid.tau,
            l2_norm: l2,
            energy_norm: en,
            monitor: None,
            blowup,
        });
        if self.grid.keeps(n) || blowup {
            self.traj.snapshots.push((n, u.clone()));
        }
        if blowup {
            self.traj.blowup_step = Some(n);
        }
        Ok(!blowup)
    }
}

/// Backward Euler on the full fine space:
/// `(M + tau A) u^{n+1} = M u^n + tau F(t^{n+1})`.
pub fn reference_solve(
    system: &FineSystem,
    forcing: &Forcing,
    u0: &DVector<f64>,
    grid: TimeGrid,
) -> Result<Trajectory> {
    grid.validate()?;
    let lhs = system
        .mass_interior()
        .add_scaled(grid.tau, system.stiffness_interior())?;
    let chol: SparseCholesky = lhs.cholesky()?;
    let mut rec = Recorder::new(system, grid, u0)?;
    let mut u = system.to_interior(u0);
    for n in 0..grid.steps {
        let t_next = (n + 1) as f64 * grid.tau;
        let mut rhs = system.mass_interior().matvec(&u);
        if !forcing.is_none() {
            let f = system.to_interior(&forcing.at(t_next, system.node_count()));
            rhs.axpy(grid.tau, &f, 1.0);
        }
        u = chol.solve(&rhs);
        if !rec.push(n + 1, &system.from_interior(&u))? {
            break;
        }
    }
    Ok(rec.traj)
}

/// Forward Euler on the full fine space:
/// `M u^{n+1} = M u^n - tau (A u^n - F(t^n))`. Divergence is flagged, not an error.
pub fn forward_euler_solve(
    system: &FineSystem,
    forcing: &Forcing,
    u0: &DVector<f64>,
    grid: TimeGrid,
) -> Result<Trajectory> {
    grid.validate()?;
    let chol = system.mass_interior().cholesky()?;
    let mut rec = Recorder::new(system, grid, u0)?;
    let mut u = system.to_interior(u0);
    for n in 0..grid.steps {
        let t = n as f64 * grid.tau;
        let mut r = system.stiffness_interior().matvec(&u);
        r.neg_mut();
        if !forcing.is_none() {
            let f = system.to_interior(&forcing.at(t, system.node_count()));
            r += f;
        }
        let du = chol.solve(&r);
        u.axpy(grid.tau, &du, 1.0);
        if !rec.push(n + 1, &system.from_interior(&u))? {
            break;
        }
    }
    Ok(rec.traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::solve_spd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_system(n: usize) -> FineSystem {
        let mesh = FineMesh::new(n).unwrap();
        let kappa = CellField::constant(mesh.cell_count(), 1.0).unwrap();
        FineSystem::new(mesh, kappa).unwrap()
    }

    fn random_interior(sys: &FineSystem, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = DVector::from_fn(sys.node_count(), |_, _| rng.gen_range(-1.0..1.0));
        sys.clamp_boundary(&mut u);
        u
    }

    #[test]
    fn norms_of_simple_vectors() {
        let sys = unit_system(2);
        let zero = DVector::zeros(9);
        assert_eq!(sys.norm(&zero, NormKind::Mass).unwrap(), 0.0);
        let ones = DVector::from_element(9, 1.0);
        assert!((sys.norm(&ones, NormKind::Mass).unwrap() - 1.0).abs() < 1e-14);
        assert!(sys.norm(&ones, NormKind::Energy).unwrap() < 1e-7);
        assert!(sys.norm(&DVector::zeros(4), NormKind::Mass).is_err());
    }

    #[test]
    fn pcg_matches_dense_solve_on_small_poisson() {
        let sys = unit_system(4);
        let a = sys.stiffness_interior();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = DVector::from_fn(a.dim(), |_, _| rng.gen_range(-1.0..1.0));
        let x = solve_spd(a, &b, 1e-12).unwrap();
        let idx: Vec<usize> = (0..a.dim()).collect();
        let dense = a.to_dense(&idx).lu().solve(&b).unwrap();
        assert!((x - dense).amax() < 1e-8);
    }

    #[test]
    fn zero_data_stays_zero() {
        let sys = unit_system(4);
        let u0 = DVector::zeros(sys.node_count());
        let traj = reference_solve(&sys, &Forcing::None, &u0, TimeGrid::new(0.01, 5)).unwrap();
        assert!(traj.records.iter().all(|r| r.l2_norm == 0.0));
    }

    #[test]
    fn backward_euler_energy_is_non_increasing() {
        let mesh = FineMesh::new(8).unwrap();
        let kappa = CellField::new(
            (0..64)
                .map(|c| if c % 7 == 0 { 1e4 } else { 1.0 })
                .collect(),
        )
        .unwrap();
        let sys = FineSystem::new(mesh, kappa).unwrap();
        let u0 = random_interior(&sys, 5);
        let traj = reference_solve(&sys, &Forcing::None, &u0, TimeGrid::new(1e-3, 50)).unwrap();
        for w in traj.records.windows(2) {
            assert!(w[1].energy_norm <= w[0].energy_norm * (1.0 + 1e-10));
        }
    }

    #[test]
    fn forward_euler_flags_divergence() {
        let sys = unit_system(4);
        let u0 = random_interior(&sys, 2);
        let traj = forward_euler_solve(&sys, &Forcing::None, &u0, TimeGrid::new(0.1, 200)).unwrap();
        assert!(traj.blew_up());
        let traj =
            forward_euler_solve(&sys, &Forcing::None, &u0, TimeGrid::new(1e-4, 200)).unwrap();
        assert!(!traj.blew_up());
    }

    #[test]
    fn stride_controls_snapshots() {
        let sys = unit_system(3);
        let u0 = random_interior(&sys, 3);
        let traj = reference_solve(
            &sys,
            &Forcing::None,
            &u0,
            TimeGrid::new(0.01, 10).with_stride(4),
        )
        .unwrap();
        let kept: Vec<usize> = traj.snapshots.iter().map(|(s, _)| *s).collect();
        assert_eq!(kept, vec![0, 4, 8, 10]);
        assert_eq!(traj.records.len(), 11);
    }
}
