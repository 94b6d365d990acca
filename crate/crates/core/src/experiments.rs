//! Experiment drivers: coefficient fields, the full space pipeline, parabolic
//! runs against a fine reference, contrast sweeps and the elliptic study.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{assemble_load, Source};
use crate::cem::{
    build_cem_basis, build_global_cem_basis, solve_aux_spectral, AuxSpace, KappaTilde,
    SubspaceBasis,
};
use crate::coarse::CoarseDecomposition;
use crate::complement::{
    build_v2_first, build_v2_second, compute_sup_g, split_constants, ComplementSpace,
    ConstantsReport, Localization,
};
use crate::config::{ExperimentConfig, InitialKind, SourceKind};
use crate::error::{Error, Result};
use crate::fine::{reference_solve, FineSystem, Forcing, NormKind, TimeGrid, Trajectory};
use crate::mesh::{CellField, FineMesh};
use crate::splitting::{init_split, run, ReducedSystem, Scheme};

/// Background value with horizontal and vertical one-cell-thick streaks of
/// length 10 to 40 cells (shorter on small meshes), added until at least
/// `density` of the cells carry the streak value.
pub fn generate_streak_field(
    n: usize,
    background: f64,
    streak: f64,
    seed: u64,
    density: f64,
) -> Result<CellField> {
    if !(background > 0.0 && streak > 0.0) {
        return Err(Error::Config("field values must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![background; n * n];
    let mut marked = vec![false; n * n];
    let target = (density.clamp(0.0, 1.0) * (n * n) as f64).ceil() as usize;
    let mut covered = 0;
    let mut attempts = 0;
    while covered < target && attempts < 100 * n * n {
        attempts += 1;
        let len = rng.gen_range(10..=40).min(n);
        let horizontal = rng.gen_bool(0.5);
        let (along, across) = (rng.gen_range(0..=n - len), rng.gen_range(0..n));
        for k in along..along + len {
            let (ci, cj) = if horizontal { (k, across) } else { (across, k) };
            let cell = cj * n + ci;
            if !marked[cell] {
                marked[cell] = true;
                values[cell] = streak;
                covered += 1;
            }
        }
    }
    CellField::new(values)
}

pub fn kappa_field(cfg: &ExperimentConfig, mesh: &FineMesh) -> Result<CellField> {
    match &cfg.kappa_file {
        Some(path) => CellField::load_grid(path, mesh),
        None => generate_streak_field(
            cfg.n,
            cfg.kappa_background,
            cfg.kappa_streak,
            cfg.streak_seed,
            cfg.streak_density,
        ),
    }
}

pub fn source_of(cfg: &ExperimentConfig, mesh: &FineMesh) -> Option<Source> {
    match cfg.source {
        SourceKind::None => None,
        SourceKind::Constant => Some(Source::Constant(cfg.source_value)),
        SourceKind::Point => Some(Source::Point {
            node: mesh.nearest_node(cfg.source_x, cfg.source_y),
            strength: cfg.source_strength,
        }),
    }
}

pub fn initial_of(cfg: &ExperimentConfig, system: &FineSystem) -> DVector<f64> {
    let mut u = match cfg.initial {
        InitialKind::Zero => DVector::zeros(system.node_count()),
        InitialKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.initial_seed);
            DVector::from_fn(system.node_count(), |_, _| rng.gen_range(-1.0..1.0))
        }
    };
    system.clamp_boundary(&mut u);
    u
}

/// Everything built from one coefficient field.
#[derive(Debug, Clone)]
pub struct Spaces {
    pub system: FineSystem,
    pub decomp: CoarseDecomposition,
    pub aux: AuxSpace,
    pub v1: SubspaceBasis,
    pub first: ComplementSpace,
    pub second: ComplementSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    First,
    Second,
}

impl Choice {
    pub fn label(&self) -> &'static str {
        match self {
            Choice::First => "first",
            Choice::Second => "second",
        }
    }
}

impl Spaces {
    pub fn complement(&self, choice: Choice) -> &ComplementSpace {
        match choice {
            Choice::First => &self.first,
            Choice::Second => &self.second,
        }
    }
}

pub struct SpaceParams {
    pub coarse: usize,
    pub layers: usize,
    pub aux_modes: usize,
    pub v2_modes: usize,
    pub kappa_tilde: KappaTilde,
    pub second: Localization,
}

impl SpaceParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            coarse: cfg.coarse,
            layers: cfg.layers,
            aux_modes: cfg.aux_modes,
            v2_modes: cfg.v2_modes,
            kappa_tilde: cfg.kappa_tilde,
            second: if cfg.second_global {
                Localization::Global
            } else {
                Localization::Oversampled(cfg.layers)
            },
        }
    }
}

pub fn build_spaces(mesh: FineMesh, kappa: CellField, p: &SpaceParams) -> Result<Spaces> {
    let decomp = CoarseDecomposition::new(&mesh, p.coarse, p.layers)
        .map_err(|e| e.in_stage("coarse grid"))?;
    let system = FineSystem::new(mesh, kappa).map_err(|e| e.in_stage("assembly"))?;
    let aux = solve_aux_spectral(&system, &decomp, p.aux_modes, p.kappa_tilde)
        .map_err(|e| e.in_stage("auxiliary spectral problems"))?;
    let v1 =
        build_cem_basis(&system, &decomp, &aux, p.layers).map_err(|e| e.in_stage("CEM basis"))?;
    let first = build_v2_first(&system, &decomp, &aux, p.v2_modes)
        .map_err(|e| e.in_stage("first complement"))?;
    let second = build_v2_second(&system, &decomp, &aux, p.v2_modes, p.second)
        .map_err(|e| e.in_stage("second complement"))?;
    Ok(Spaces {
        system,
        decomp,
        aux,
        v1,
        first,
        second,
    })
}

pub fn build_spaces_from_config(cfg: &ExperimentConfig) -> Result<Spaces> {
    let mesh = FineMesh::new(cfg.n)?;
    let kappa = kappa_field(cfg, &mesh)?;
    build_spaces(mesh, kappa, &SpaceParams::from_config(cfg))
}

fn relative(err: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        err / reference
    } else {
        err
    }
}

/// Relative mass and energy errors of `approx` against `reference`.
pub fn relative_errors(
    system: &FineSystem,
    reference: &DVector<f64>,
    approx: &DVector<f64>,
) -> Result<(f64, f64)> {
    let diff = reference - approx;
    Ok((
        relative(
            system.norm(&diff, NormKind::Mass)?,
            system.norm(reference, NormKind::Mass)?,
        ),
        relative(
            system.norm(&diff, NormKind::Energy)?,
            system.norm(reference, NormKind::Energy)?,
        ),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRow {
    pub step: usize,
    pub time: f64,
    /// `(L2, energy)` relative errors per method.
    pub cem: (f64, f64),
    pub implicit_extra: (f64, f64),
    pub partial: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries {
    pub choice: Choice,
    pub rows: Vec<ErrorRow>,
    pub partial_blowup: Option<usize>,
}

impl ErrorSeries {
    pub const CSV_HEADER: &'static str =
        "step,time,err_L2_cem,err_en_cem,err_L2_implicit_extra,err_en_implicit_extra,err_L2_partial,err_en_partial";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}\n",
                r.step,
                r.time,
                r.cem.0,
                r.cem.1,
                r.implicit_extra.0,
                r.implicit_extra.1,
                r.partial.0,
                r.partial.1
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&ErrorRow> {
        self.rows.last()
    }
}

fn errors_along(
    system: &FineSystem,
    reference: &Trajectory,
    run: &Trajectory,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(reference.snapshots.len());
    for (step, uref) in &reference.snapshots {
        out.push(match run.snapshot(*step) {
            Some(u) if u.iter().all(|v| v.is_finite()) => relative_errors(system, uref, u)?,
            _ => (f64::NAN, f64::NAN),
        });
    }
    Ok(out)
}

/// Parabolic comparison of the three coarse methods against backward Euler on
/// the fine grid, for both complement choices.
#[derive(Debug, Clone)]
pub struct ExampleOutcome {
    pub series: Vec<ErrorSeries>,
    pub reference: Trajectory,
}

pub fn run_example(cfg: &ExperimentConfig, spaces: &Spaces) -> Result<ExampleOutcome> {
    let system = &spaces.system;
    let forcing = match source_of(cfg, &system.mesh) {
        None => Forcing::None,
        Some(src) => {
            Forcing::Constant(assemble_load(&system.mesh, &src).map_err(|e| e.in_stage("load"))?)
        }
    };
    let u0 = initial_of(cfg, system);
    let grid = TimeGrid::new(cfg.tau, cfg.steps);
    let reference =
        reference_solve(system, &forcing, &u0, grid).map_err(|e| e.in_stage("fine reference"))?;

    let empty = DMatrix::zeros(system.node_count(), 0);
    let cem_only = ReducedSystem::new(system, &spaces.v1.vectors, &empty)
        .map_err(|e| e.in_stage("reduction"))?;
    let s0 = init_split(system, &cem_only, &u0)?;
    let cem = run(
        system,
        &cem_only,
        Scheme::ImplicitCoarse,
        grid,
        &forcing,
        s0,
        None,
    )
    .map_err(|e| e.in_stage("CEM run"))?;
    let cem_err = errors_along(system, &reference, &cem.trajectory)?;

    let mut series = Vec::new();
    for choice in [Choice::First, Choice::Second] {
        let v2 = &spaces.complement(choice).basis;
        let reduced = ReducedSystem::from_bases(system, &spaces.v1, v2)
            .map_err(|e| e.in_stage("reduction"))?;
        let s0 = init_split(system, &reduced, &u0)?;
        let implicit = run(
            system,
            &reduced,
            Scheme::ImplicitCoarse,
            grid,
            &forcing,
            s0.clone(),
            None,
        )
        .map_err(|e| e.in_stage("implicit run"))?;
        let partial = run(
            system,
            &reduced,
            Scheme::PartialExplicit { omega: cfg.omega },
            grid,
            &forcing,
            s0,
            None,
        )
        .map_err(|e| e.in_stage("partially explicit run"))?;
        let imp_err = errors_along(system, &reference, &implicit.trajectory)?;
        let par_err = errors_along(system, &reference, &partial.trajectory)?;
        let rows = reference
            .snapshots
            .iter()
            .enumerate()
            .map(|(k, (step, _))| ErrorRow {
                step: *step,
                time: *step as f64 * cfg.tau,
                cem: cem_err[k],
                implicit_extra: imp_err[k],
                partial: par_err[k],
            })
            .collect();
        series.push(ErrorSeries {
            choice,
            rows,
            partial_blowup: partial.trajectory.blowup_step,
        });
    }
    Ok(ExampleOutcome { series, reference })
}

/// Space constants for each contrast on one streak geometry
/// (background `kappa_background`, streaks `contrast * kappa_background`).
pub fn contrast_sweep(cfg: &ExperimentConfig) -> Result<Vec<ConstantsReport>> {
    if cfg.contrasts.len() < 2 {
        return Err(Error::Config("a sweep needs at least two contrasts".into()));
    }
    let mesh = FineMesh::new(cfg.n)?;
    let params = SpaceParams::from_config(cfg);
    let mut rows = Vec::with_capacity(cfg.contrasts.len());
    for &contrast in &cfg.contrasts {
        let kappa = match &cfg.kappa_file {
            Some(_) => {
                return Err(Error::Config(
                    "contrast sweeps use the streak generator, not kappa_file".into(),
                ));
            }
            None => generate_streak_field(
                cfg.n,
                cfg.kappa_background,
                contrast * cfg.kappa_background,
                cfg.streak_seed,
                cfg.streak_density,
            )?,
        };
        let spaces = build_spaces(mesh.clone(), kappa, &params)?;
        rows.push(constants_report(&spaces, contrast, cfg.omega)?);
    }
    Ok(rows)
}

pub fn constants_report(spaces: &Spaces, contrast: f64, omega: f64) -> Result<ConstantsReport> {
    let h = spaces.decomp.h_coarse();
    let sys = &spaces.system;
    Ok(ConstantsReport {
        contrast,
        sup_g_v1: compute_sup_g(&spaces.v1.vectors, sys, h)
            .map_err(|e| e.in_stage("sup G of V1"))?,
        first: split_constants(sys, &spaces.decomp, &spaces.v1, &spaces.first, omega)
            .map_err(|e| e.in_stage("first complement constants"))?,
        second: split_constants(sys, &spaces.decomp, &spaces.v1, &spaces.second, omega)
            .map_err(|e| e.in_stage("second complement constants"))?,
    })
}

/// Galerkin solution of `a(u, v) = (f, v)` on the span of `basis`.
pub fn galerkin(
    system: &FineSystem,
    basis: &DMatrix<f64>,
    load: &DVector<f64>,
) -> Result<DVector<f64>> {
    if basis.ncols() == 0 {
        return Ok(DVector::zeros(system.node_count()));
    }
    let a = system.stiffness.gram(basis, basis);
    let rhs = basis.tr_mul(load);
    let c = a
        .cholesky()
        .ok_or_else(|| Error::Factorization("Galerkin matrix is not positive definite".into()))?
        .solve(&rhs);
    Ok(basis * c)
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionErrors {
    /// Relative energy error.
    pub energy: f64,
    /// Relative L2 error.
    pub l2: f64,
    /// Relative error in the `kappa_tilde`-weighted L2 norm.
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EllipticReport {
    pub cem: ProjectionErrors,
    pub first: ProjectionErrors,
    pub second: ProjectionErrors,
    /// `||u - u_{H,1} - u_{H,2}||_a / ||u - u_{H,1}||_a` per complement choice.
    pub theta_first: f64,
    pub theta_second: f64,
    /// `(H, relative energy error of the CEM projection)`.
    pub sweep: Vec<(f64, f64)>,
    pub slope: Option<f64>,
}

fn projection_errors(
    sys: &FineSystem,
    aux: &AuxSpace,
    u: &DVector<f64>,
    uh: &DVector<f64>,
) -> Result<ProjectionErrors> {
    let (l2, energy) = relative_errors(sys, u, uh)?;
    let diff = u - uh;
    let weighted_mass = crate::assembly::assemble(
        &sys.mesh,
        &sys.kappa,
        crate::assembly::FormKind::WeightedMass(&aux.kappa_tilde),
    )?;
    let wq = |v: &DVector<f64>| weighted_mass.quad_form(v).max(0.0).sqrt();
    Ok(ProjectionErrors {
        energy,
        l2,
        weighted: relative(wq(&diff), wq(u)),
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Galerkin projections of the steady problem onto the global CEM space and
/// its two enrichments, plus the coarse-size sweep of the CEM energy error.
pub fn elliptic_projection_study(cfg: &ExperimentConfig) -> Result<EllipticReport> {
    let mesh = FineMesh::new(cfg.n)?;
    let kappa = kappa_field(cfg, &mesh)?;
    let sys = FineSystem::new(mesh, kappa).map_err(|e| e.in_stage("assembly"))?;
    let load = match source_of(cfg, &sys.mesh) {
        None => DVector::zeros(sys.node_count()),
        Some(src) => assemble_load(&sys.mesh, &src)?,
    };
    let u = sys
        .solve_elliptic(&load)
        .map_err(|e| e.in_stage("fine elliptic solve"))?;

    let decomp = CoarseDecomposition::new(&sys.mesh, cfg.coarse, cfg.layers)?;
    let aux = solve_aux_spectral(&sys, &decomp, cfg.aux_modes, cfg.kappa_tilde)
        .map_err(|e| e.in_stage("auxiliary spectral problems"))?;
    let v1 = build_global_cem_basis(&sys, &decomp, &aux).map_err(|e| e.in_stage("CEM basis"))?;
    let first = build_v2_first(&sys, &decomp, &aux, cfg.v2_modes)
        .map_err(|e| e.in_stage("first complement"))?;
    let second = build_v2_second(&sys, &decomp, &aux, cfg.v2_modes, Localization::Global)
        .map_err(|e| e.in_stage("second complement"))?;

    let u1 = galerkin(&sys, &v1.vectors, &load)?;
    let u_first = galerkin(&sys, &hstack(&v1.vectors, &first.basis.vectors), &load)?;
    let u_second = galerkin(&sys, &hstack(&v1.vectors, &second.basis.vectors), &load)?;
    let en = |v: &DVector<f64>| sys.norm(v, NormKind::Energy);
    let base = en(&(&u - &u1))?;
    let theta_first = ratio(en(&(&u - &u_first))?, base);
    let theta_second = ratio(en(&(&u - &u_second))?, base);

    let mut sweep = Vec::new();
    for &nc in &cfg.h_sweep {
        let d = CoarseDecomposition::new(&sys.mesh, nc, 1)?;
        let a = solve_aux_spectral(&sys, &d, cfg.aux_modes, cfg.kappa_tilde)?;
        let basis = build_global_cem_basis(&sys, &d, &a)?;
        let uh = galerkin(&sys, &basis.vectors, &load)?;
        let (_, energy) = relative_errors(&sys, &u, &uh)?;
        sweep.push((d.h_coarse(), energy));
    }
    let slope = loglog_slope(&sweep);
    Ok(EllipticReport {
        cem: projection_errors(&sys, &aux, &u, &u1)?,
        first: projection_errors(&sys, &aux, &u, &u_first)?,
        second: projection_errors(&sys, &aux, &u, &u_second)?,
        theta_first,
        theta_second,
        sweep,
        slope,
    })
}

impl EllipticReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("space,err_energy,err_L2,err_weighted,theta\n");
        for (name, e, theta) in [
            ("cem", &self.cem, 1.0),
            ("cem+first", &self.first, self.theta_first),
            ("cem+second", &self.second, self.theta_second),
        ] {
            out.push_str(&format!(
                "{name},{:.10e},{:.10e},{:.10e},{:.10e}\n",
                e.energy, e.l2, e.weighted, theta
            ));
        }
        out.push_str("\nH,err_energy_cem\n");
        for (h, e) in &self.sweep {
            out.push_str(&format!("{h:.10e},{e:.10e}\n"));
        }
        if let Some(s) = self.slope {
            out.push_str(&format!("\nslope,{s:.6}\n"));
        }
        out
    }
}
