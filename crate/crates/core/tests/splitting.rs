mod common;

use cemsplit::cem::build_cem_basis;
use cemsplit::complement::{build_v2_first, compute_gamma, compute_sup_g, recommend_tau, TauRule};
use cemsplit::fine::{FineSystem, Forcing, TimeGrid};
use cemsplit::nalgebra::{DMatrix, DVector};
use cemsplit::splitting::{init_split, run, ReducedSystem, Scheme, SplitState, Stepper};
use common::*;
use proptest::prelude::*;

fn random_reduced(seed: u64, k1: usize, k2: usize) -> (FineSystem, ReducedSystem) {
    let (sys, _) = setup(6, 2, 100.0, seed);
    let n = sys.node_count();
    let cols = |k: usize, off: u64| {
        let mut v = DMatrix::zeros(n, k);
        for j in 0..k {
            let mut c = random_vector(n, seed * 101 + off + j as u64);
            sys.clamp_boundary(&mut c);
            v.set_column(j, &c);
        }
        v
    };
    let red = ReducedSystem::new(&sys, &cols(k1, 0), &cols(k2, 50)).unwrap();
    (sys, red)
}

fn random_state(k1: usize, k2: usize, seed: u64) -> SplitState {
    SplitState {
        u1: random_vector(k1, seed),
        u1_prev: random_vector(k1, seed + 1),
        u2: random_vector(k2, seed + 2),
        u2_prev: random_vector(k2, seed + 3),
        step: 0,
    }
}

fn random_load(k1: usize, k2: usize, seed: u64) -> Load {
    (random_vector(k1, seed), random_vector(k2, seed + 1))
}

fn close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * b.amax().max(1.0)
}

#[test]
fn schemes_match_the_monolithic_oracle() {
    let (_, r) = random_reduced(1, 3, 2);
    let s = random_state(3, 2, 10);
    let (f_now, f_next) = (random_load(3, 2, 20), random_load(3, 2, 30));
    let tau = 0.37;
    for omega in [0.0, 0.5, 1.0] {
        for (scheme, lagged) in [
            (Scheme::PartialExplicit { omega }, true),
            (Scheme::General { omega }, false),
        ] {
            let got = Stepper::new(&r, scheme, tau)
                .unwrap()
                .step(&s, &f_now, &f_next);
            let (u1, u2) = oracle_step(&r, &s, omega, lagged, &f_now, &f_next, tau);
            assert!(close(&got.u1, &u1, 1e-12), "{scheme:?}");
            assert!(close(&got.u2, &u2, 1e-12), "{scheme:?}");
            assert_eq!(got.u1_prev, s.u1);
            assert_eq!(got.step, 1);
        }
    }

    // backward Euler on the joint space
    let got = Stepper::new(&r, Scheme::ImplicitCoarse, tau)
        .unwrap()
        .step(&s, &f_now, &f_next);
    let m = r.joint_mass();
    let u = DVector::from_iterator(5, s.u1.iter().chain(s.u2.iter()).copied());
    let f = DVector::from_iterator(5, f_next.0.iter().chain(f_next.1.iter()).copied());
    let x = (&m + r.joint_stiffness() * tau)
        .lu()
        .solve(&(&m * u + f * tau))
        .unwrap();
    assert!(close(&got.u1, &x.rows(0, 3).into_owned(), 1e-12));
    assert!(close(&got.u2, &x.rows(3, 2).into_owned(), 1e-12));
}

#[test]
fn empty_second_space_reduces_to_backward_euler() {
    let (_, r) = random_reduced(2, 4, 0);
    let s = random_state(4, 0, 1);
    let (f_now, f_next) = (random_load(4, 0, 5), random_load(4, 0, 6));
    let be = Stepper::new(&r, Scheme::ImplicitCoarse, 0.1)
        .unwrap()
        .step(&s, &f_now, &f_next);
    for scheme in [
        Scheme::PartialExplicit { omega: 1.0 },
        Scheme::PartialExplicit { omega: 0.0 },
        Scheme::General { omega: 1.0 },
        Scheme::OrthogonalSplit,
    ] {
        let got = Stepper::new(&r, scheme, 0.1)
            .unwrap()
            .step(&s, &f_now, &f_next);
        assert!(close(&got.u1, &be.u1, 1e-12), "{scheme:?}");
        assert_eq!(got.u2.len(), 0);
    }
}

/// Second space made mass-orthogonal to the first.
fn orthogonalized(seed: u64) -> ReducedSystem {
    let (sys, r) = random_reduced(seed, 3, 2);
    let coef = r.m11.clone().lu().solve(&r.m12).unwrap();
    let v2 = &r.v2 - &r.v1 * coef;
    ReducedSystem::new(&sys, &r.v1, &v2).unwrap()
}

#[test]
fn orthogonal_split_equals_coupled_scheme_without_cross_mass() {
    let r = orthogonalized(3);
    assert!(r.m12.amax() < 1e-14);
    let s = random_state(3, 2, 4);
    let (f_now, f_next) = (random_load(3, 2, 7), random_load(3, 2, 8));
    let split = Stepper::new(&r, Scheme::OrthogonalSplit, 0.2)
        .unwrap()
        .step(&s, &f_now, &f_next);
    for scheme in [
        Scheme::General { omega: 1.0 },
        Scheme::PartialExplicit { omega: 1.0 },
    ] {
        let other = Stepper::new(&r, scheme, 0.2)
            .unwrap()
            .step(&s, &f_now, &f_next);
        assert!(close(&split.u1, &other.u1, 1e-12));
        assert!(close(&split.u2, &other.u2, 1e-12));
    }
    let (_, coupled) = random_reduced(3, 3, 2);
    assert!(Stepper::new(&coupled, Scheme::OrthogonalSplit, 0.2).is_err());
}

#[test]
fn invalid_steps_and_weights_are_rejected() {
    let (_, r) = random_reduced(5, 2, 2);
    assert!(Stepper::new(&r, Scheme::ImplicitCoarse, 0.0).is_err());
    assert!(Stepper::new(&r, Scheme::ImplicitCoarse, f64::NAN).is_err());
    assert!(Stepper::new(&r, Scheme::General { omega: 1.5 }, 0.1).is_err());
}

#[test]
fn stability_monitor_never_grows_at_the_recommended_step() {
    let (sys, decomp) = setup(20, 5, 1e4, 21);
    let aux = aux(&sys, &decomp, 3);
    let v1 = build_cem_basis(&sys, &decomp, &aux, 3).unwrap();
    let v2 = build_v2_first(&sys, &decomp, &aux, 2).unwrap();
    let r = ReducedSystem::from_bases(&sys, &v1, &v2.basis).unwrap();
    let h = decomp.h_coarse();
    let gamma = compute_gamma(&v1.vectors, &v2.basis.vectors, &sys.mass)
        .unwrap()
        .value;
    let sup_g = compute_sup_g(&v2.basis.vectors, &sys, h).unwrap();
    let mut u0 = random_vector(sys.node_count(), 9);
    sys.clamp_boundary(&mut u0);
    let state0 = init_split(&sys, &r, &u0).unwrap();
    for omega in [0.0, 1.0] {
        let tau = recommend_tau(gamma, 0.0, sup_g, omega, h, TauRule::Whole).unwrap();
        for scheme in [Scheme::PartialExplicit { omega }, Scheme::General { omega }] {
            let out = run(
                &sys,
                &r,
                scheme,
                TimeGrid::new(tau, 200),
                &Forcing::None,
                state0.clone(),
                Some(gamma),
            )
            .unwrap();
            assert!(out.trajectory.blowup_step.is_none());
            let monitor: Vec<f64> = out
                .trajectory
                .records
                .iter()
                .map(|r| r.monitor.unwrap())
                .collect();
            for w in monitor.windows(2) {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-10),
                    "{scheme:?}: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }
}

#[test]
fn orthogonal_split_mass_norm_decays_below_its_step_limit() {
    let r = orthogonalized(6);
    let (sys, _) = setup(6, 2, 100.0, 6);
    let h = 0.5;
    let sup_g = compute_sup_g(&r.v2, &sys, h).unwrap();
    let tau = recommend_tau(0.0, 0.0, sup_g, 1.0, h, TauRule::Whole).unwrap();
    let u0 = r.reconstruct(&random_vector(3, 1), &random_vector(2, 2));
    let state0 = init_split(&sys, &r, &u0).unwrap();
    let out = run(
        &sys,
        &r,
        Scheme::OrthogonalSplit,
        TimeGrid::new(tau, 300),
        &Forcing::None,
        state0,
        Some(0.0),
    )
    .unwrap();
    for w in out.trajectory.records.windows(2) {
        assert!(w[1].l2_norm <= w[0].l2_norm * (1.0 + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn one_step_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0, omega in 0.0f64..=1.0, which in 0usize..3) {
        let (_, r) = random_reduced(seed, 3, 2);
        let scheme = [Scheme::PartialExplicit { omega }, Scheme::General { omega }, Scheme::ImplicitCoarse][which];
        let st = Stepper::new(&r, scheme, 0.05).unwrap();
        let (s, t) = (random_state(3, 2, seed + 1), random_state(3, 2, seed + 9));
        let (f, g) = ((random_load(3, 2, seed + 20), random_load(3, 2, seed + 30)), (random_load(3, 2, seed + 40), random_load(3, 2, seed + 50)));
        let comb_state = SplitState {
            u1: &s.u1 * a + &t.u1 * b,
            u1_prev: &s.u1_prev * a + &t.u1_prev * b,
            u2: &s.u2 * a + &t.u2 * b,
            u2_prev: &s.u2_prev * a + &t.u2_prev * b,
            step: 0,
        };
        let comb = |x: &Load, y: &Load| (&x.0 * a + &y.0 * b, &x.1 * a + &y.1 * b);
        let lhs = st.step(&comb_state, &comb(&f.0, &g.0), &comb(&f.1, &g.1));
        let (p, q) = (st.step(&s, &f.0, &f.1), st.step(&t, &g.0, &g.1));
        prop_assert!(close(&lhs.u1, &(&p.u1 * a + &q.u1 * b), 1e-10));
        prop_assert!(close(&lhs.u2, &(&p.u2 * a + &q.u2 * b), 1e-10));
    }
}
