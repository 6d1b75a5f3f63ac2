use super::*;
use crate::nlp::check_gradients;
use crate::plant::build_ball_on_plate;
use crate::setgeom::{two_ellipsoid_set, Ellipsoid, RVariant};

fn benchmark_chart() -> NormalSetChart {
    NormalSetChart::star_shaped(two_ellipsoid_set(RVariant::Smooth), [0.0, 0.0], -std::f64::consts::PI).unwrap()
}

fn controller(mode: MpcMode) -> TrackingMpc {
    let plant = build_ball_on_plate(0.25).unwrap();
    let chart = (mode != MpcMode::Standard).then(benchmark_chart);
    TrackingMpc::build(plant, chart, MpcConfig::ball_on_plate(mode)).unwrap()
}

fn rest_at(y: [f64; 2]) -> DVector<f64> {
    let mut x = DVector::zeros(8);
    x[0] = y[0];
    x[2] = y[1];
    x
}

fn v2(a: f64, b: f64) -> DVector<f64> {
    DVector::from_vec(vec![a, b])
}

#[test]
fn configuration_errors() {
    let plant = build_ball_on_plate(0.25).unwrap();
    let mut c = MpcConfig::ball_on_plate(MpcMode::Standard);
    c.nc = 5;
    assert!(TrackingMpc::build_standard(plant.clone(), c).is_err());
    let mut c = MpcConfig::ball_on_plate(MpcMode::Standard);
    c.nc = 3;
    assert!(TrackingMpc::build_standard(plant.clone(), c).is_err());
    let mut c = MpcConfig::ball_on_plate(MpcMode::Standard);
    c.q = DMatrix::identity(7, 7);
    assert!(TrackingMpc::build_standard(plant.clone(), c).is_err());
    let mut c = MpcConfig::ball_on_plate(MpcMode::Standard);
    c.r = DMatrix::zeros(2, 2);
    assert!(TrackingMpc::build_standard(plant.clone(), c).is_err());
    let c = MpcConfig::ball_on_plate(MpcMode::Normal);
    assert!(TrackingMpc::build(plant.clone(), None, c.clone()).is_err());
    assert!(TrackingMpc::build_homeo(plant.clone(), benchmark_chart(), c).is_err());
    let exact = plant.with_output_set(two_ellipsoid_set(RVariant::Exact)).unwrap();
    let c = MpcConfig::ball_on_plate(MpcMode::Standard);
    assert!(TrackingMpc::build_standard(exact.clone(), c.clone()).is_err());
    let mut c = c;
    c.allow_nonsmooth = true;
    assert!(TrackingMpc::build_standard(exact, c).is_ok());
}

#[test]
fn target_outside_chart_domain_is_rejected() {
    let mpc = controller(MpcMode::Normal);
    assert!(matches!(mpc.target(&v2(0.0, 0.0)), Err(MpcError::Target(_))));
    assert!(mpc.target(&DVector::zeros(3)).is_err());
}

#[test]
fn at_target_equilibrium_cost_vanishes() {
    for mode in [MpcMode::Standard, MpcMode::Homeo, MpcMode::Normal] {
        let mpc = controller(mode);
        let y_t = v2(0.05, 0.5);
        let x = rest_at([0.05, 0.5]);
        let res = mpc
            .solve_step(&MpcQuery {
                x,
                y_t: y_t.clone(),
                warm_start: None,
            })
            .unwrap();
        assert!(!res.flagged, "{mode:?}");
        assert!(res.cost.abs() < 1e-8, "{mode:?}: {}", res.cost);
        assert!(res.u0.amax() < 1e-6, "{mode:?}: {}", res.u0);
        assert!((&res.y_s - &y_t).amax() < 1e-6, "{mode:?}");
    }
}

#[test]
fn gradients_match_differences_in_every_mode() {
    for mode in [MpcMode::Standard, MpcMode::Homeo, MpcMode::Normal] {
        let mpc = controller(mode);
        let x = DVector::from_vec(vec![-0.1, 0.02, 0.9, -0.01, 0.01, 0.005, -0.02, 0.003]);
        let query = MpcQuery {
            x,
            y_t: v2(1.0, -0.8),
            warm_start: None,
        };
        let (problem, z0) = mpc.problem(&query).unwrap();
        let mut z = z0.clone();
        for (i, v) in z.iter_mut().enumerate().take(8) {
            *v = 0.03 * ((i as f64) - 3.5) / 3.5;
        }
        let err = check_gradients(&problem, &z, 1e-6).unwrap();
        assert!(err <= 1e-4, "{mode:?}: {err}");
    }
}

#[test]
fn homeo_and_normal_costs_agree_at_fiber_extremes() {
    let homeo = controller(MpcMode::Homeo);
    let normal = controller(MpcMode::Normal);
    let chart = benchmark_chart();
    let x = rest_at([-0.1, 1.0]);
    let y_t = v2(1.0, -0.8);
    let theta = [1.2, 0.6];
    let fe = chart.fiber_extremes(&[theta[0]]).unwrap();
    let u = [0.02, -0.01, 0.0, 0.01, -0.03, 0.0, 0.01, 0.0];
    let mut zh: Vec<f64> = u.to_vec();
    zh.extend_from_slice(&theta);
    let mut zn = zh.clone();
    zn.extend_from_slice(&[fe.lo, fe.hi]);
    let ph = homeo
        .problem_at(&x, homeo.target(&y_t).unwrap(), &DVector::from_vec(zh.clone()))
        .unwrap();
    let pn = normal
        .problem_at(&x, normal.target(&y_t).unwrap(), &DVector::from_vec(zn.clone()))
        .unwrap();
    let eh = ph.evaluate(&DVector::from_vec(zh)).unwrap();
    let en = pn.evaluate(&DVector::from_vec(zn)).unwrap();
    assert!((eh.cost - en.cost).abs() <= 1e-9 * eh.cost.abs().max(1.0));
    assert!((eh.eq.rows(0, 8) - en.eq.rows(0, 8)).amax() < 1e-12);
    // the active-extreme equality holds at the envelope
    assert!(en.eq[8].abs() < 1e-8);
}

#[test]
fn offset_optimum_inside_and_outside() {
    let mpc = controller(MpcMode::Normal);
    let y_t = v2(1.0, -0.8);
    let opt = mpc.offset_optimum(&y_t).unwrap();
    assert!((&opt.y_s - &y_t).amax() < 1e-9);
    assert!(opt.cost < 1e-12);

    // straight up, beyond the envelope at radius sqrt(2)
    let far = v2(0.0, 2.0);
    let opt = mpc.offset_optimum(&far).unwrap();
    let theta = opt.theta.unwrap();
    assert!((theta[1] - 1.0).abs() < 1e-12);
    assert!((theta[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    assert!((opt.y_s[1] - 2f64.sqrt()).abs() < 1e-8);

    let standard = controller(MpcMode::Standard);
    let opt = standard.offset_optimum(&y_t).unwrap();
    assert_eq!(opt.y_s, y_t);
}

#[test]
fn standard_offset_optimum_projects_onto_disk() {
    let plant = build_ball_on_plate(0.25).unwrap();
    let disk = Ellipsoid::new(vec![0.0, 0.0], DMatrix::identity(2, 2) * 4.0)
        .unwrap()
        .into_set();
    let plant = plant.with_output_set(disk).unwrap();
    let mpc = TrackingMpc::build_standard(plant, MpcConfig::ball_on_plate(MpcMode::Standard)).unwrap();
    let opt = mpc.offset_optimum(&v2(3.0, 4.0)).unwrap();
    // closest point of the radius-0.5 disk
    assert!(
        (opt.y_s[0] - 0.3).abs() < 1e-7 && (opt.y_s[1] - 0.4).abs() < 1e-7,
        "{}",
        opt.y_s
    );
}

#[test]
fn warm_start_shifts_inputs_and_keeps_reference() {
    let mpc = controller(MpcMode::Normal);
    let query = MpcQuery {
        x: rest_at([-0.1, 1.0]),
        y_t: v2(1.0, -0.8),
        warm_start: None,
    };
    let res = mpc.solve_step(&query).unwrap();
    assert!(!res.flagged);
    let w = res.warm_start(2);
    let z = &res.nlp.z;
    assert_eq!(w.z.rows(0, 6), z.rows(2, 6));
    assert_eq!(w.z.rows(6, 2), z.rows(6, 2));
    assert_eq!(w.z.rows(8, 4), z.rows(8, 4));
}

#[test]
fn first_step_respects_bounds_and_terminal_equality() {
    for mode in [MpcMode::Standard, MpcMode::Homeo, MpcMode::Normal] {
        let mpc = controller(mode);
        let res = mpc
            .solve_step(&MpcQuery {
                x: rest_at([-0.1, 1.0]),
                y_t: v2(1.0, -0.8),
                warm_start: None,
            })
            .unwrap();
        assert!(!res.flagged, "{mode:?}");
        assert_eq!(res.nlp.status, SolveStatus::Optimal, "{mode:?}");
        assert!(res.u_seq.iter().all(|u| u.amax() <= 0.1 + 1e-12));
        assert!(res.nlp.eq.rows(0, 8).amax() <= 1e-7, "{mode:?}");
    }
}
