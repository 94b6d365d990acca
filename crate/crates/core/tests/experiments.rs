mod common;

use cemsplit::config::{ConfigBuilder, ExperimentConfig};
use cemsplit::experiments::{
    build_spaces_from_config, contrast_sweep, elliptic_projection_study, galerkin,
    generate_streak_field, loglog_slope, run_example,
};
use cemsplit::nalgebra::DMatrix;
use common::*;

fn small(extra: &str) -> ExperimentConfig {
    let text = format!(
        "n = 20\ncoarse = 4\nlayers = 2\naux_modes = 2\nv2_modes = 2\nstreak_density = 0.1\n\
         kappa_streak = 1e4\ntau = 1e-3\nsteps = 20\ncontrasts = 1e3, 1e4\nh_sweep = 2, 4, 5\n{extra}"
    );
    ExperimentConfig::from_text(&text).unwrap()
}

#[test]
fn config_errors_are_reported_as_config_errors() {
    for text in [
        "bogus = 1",
        "n = ten",
        "n = 20\ncoarse = 3",
        "layers = 0",
        "omega = 2",
        "source = somewhere",
        "tau = 1e-3\nsteps = 10\nfinal_time = 1",
        "no equals sign",
    ] {
        let err = ExperimentConfig::from_text(text).unwrap_err();
        assert!(err.is_config(), "{text}: {err}");
    }
    let mut b = ConfigBuilder::new();
    assert!(b.set_pair("tau").unwrap_err().is_config());
}

#[test]
fn time_grid_is_completed_from_the_given_keys() {
    let c = ExperimentConfig::from_text("steps = 40\nfinal_time = 0.02").unwrap();
    assert!((c.tau - 5e-4).abs() < 1e-18);
    let c = ExperimentConfig::from_text("tau = 1e-3\nsteps = 7").unwrap();
    assert!((c.final_time - 7e-3).abs() < 1e-18);
    let c = ExperimentConfig::from_text("tau = 2e-3\nfinal_time = 0.1").unwrap();
    assert_eq!(c.steps, 50);
    let c = ExperimentConfig::from_text("# only a comment\n\n").unwrap();
    assert_eq!(c, ExperimentConfig::default());
}

#[test]
fn streak_field_is_seeded_and_dense_enough() {
    let a = generate_streak_field(50, 1.0, 1e6, 3, 0.1).unwrap();
    let b = generate_streak_field(50, 1.0, 1e6, 3, 0.1).unwrap();
    let c = generate_streak_field(50, 1.0, 1e6, 4, 0.1).unwrap();
    assert_eq!(a.values(), b.values());
    assert_ne!(a.values(), c.values());
    let streaks = a.values().iter().filter(|v| **v == 1e6).count();
    assert!(streaks >= 250);
    assert!(a.values().iter().all(|v| *v == 1.0 || *v == 1e6));
    assert_eq!(a.contrast(), 1e6);
}

#[test]
fn runs_are_deterministic() {
    let cfg = small("initial = random");
    let s1 = build_spaces_from_config(&cfg).unwrap();
    let s2 = build_spaces_from_config(&cfg).unwrap();
    assert_eq!(s1.v1.vectors, s2.v1.vectors);
    assert_eq!(s1.first.basis.vectors, s2.first.basis.vectors);
    let a = run_example(&cfg, &s1).unwrap();
    let b = run_example(&cfg, &s2).unwrap();
    for (x, y) in a.series.iter().zip(&b.series) {
        assert_eq!(x.to_csv(), y.to_csv());
    }
}

#[test]
fn zero_data_gives_zero_errors() {
    let cfg = small("source = none\ninitial = zero");
    let spaces = build_spaces_from_config(&cfg).unwrap();
    let out = run_example(&cfg, &spaces).unwrap();
    assert_eq!(out.series.len(), 2);
    for s in &out.series {
        assert!(s.partial_blowup.is_none());
        for r in &s.rows {
            for e in [r.cem, r.implicit_extra, r.partial] {
                assert_eq!(e, (0.0, 0.0));
            }
        }
    }
}

#[test]
fn enrichment_never_worsens_the_elliptic_projection() {
    for source in ["point", "constant"] {
        let cfg = small(&format!("source = {source}"));
        let r = elliptic_projection_study(&cfg).unwrap();
        assert!(r.theta_first <= 1.0 + 1e-12, "{source}: {}", r.theta_first);
        assert!(
            r.theta_second <= 1.0 + 1e-12,
            "{source}: {}",
            r.theta_second
        );
        assert!(r.first.energy <= r.cem.energy * (1.0 + 1e-12));
        assert_eq!(r.sweep.len(), 3);
        assert!(r.slope.is_some());
    }
}

#[test]
fn galerkin_error_is_energy_orthogonal_to_the_space() {
    let (sys, _) = setup(12, 3, 1e3, 4);
    let basis = DMatrix::from_fn(sys.node_count(), 4, |i, j| {
        random_vector(sys.node_count(), j as u64)[i]
    });
    let mut basis = basis;
    for j in 0..4 {
        let mut c = basis.column(j).into_owned();
        sys.clamp_boundary(&mut c);
        basis.set_column(j, &c);
    }
    let mut load = random_vector(sys.node_count(), 9);
    sys.clamp_boundary(&mut load);
    let u = sys.solve_elliptic(&load).unwrap();
    let uh = galerkin(&sys, &basis, &load).unwrap();
    let r = sys.stiffness.mul_dense(&DMatrix::from_columns(&[&u - &uh]));
    let scale = energy(&sys, &u)
        * basis
            .column_iter()
            .map(|c| energy(&sys, &c.into_owned()))
            .fold(0.0, f64::max);
    assert!((basis.transpose() * r).amax() <= 1e-9 * scale);
}

#[test]
fn loglog_slope_recovers_a_power_law() {
    let pts: Vec<(f64, f64)> = [0.5, 0.25, 0.1, 0.05]
        .iter()
        .map(|&h: &f64| (h, 3.0 * h.powf(1.5)))
        .collect();
    assert!((loglog_slope(&pts).unwrap() - 1.5).abs() < 1e-12);
    assert!(loglog_slope(&pts[..1]).is_none());
}

#[test]
fn sweep_validates_its_inputs_and_reports_each_contrast() {
    let mut cfg = small("");
    let rows = contrast_sweep(&cfg).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].contrast, 1e3);
    assert!(rows[1].sup_g_v1 > rows[0].sup_g_v1);
    cfg.contrasts = vec![1e3];
    assert!(contrast_sweep(&cfg).unwrap_err().is_config());
}
