use nalgebra::DVector;
use nonconvex_mpc::harness::{load_scenario, Scenario};
use nonconvex_mpc::mpct::{MpcMode, MpcQuery, TrackingMpc, WarmStart};
use nonconvex_mpc::nlp::{check_gradients, NlpProblem};
use proptest::prelude::*;

fn scenario(name: &str) -> Scenario {
    load_scenario(format!("{}/scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn controller(name: &str) -> (TrackingMpc, DVector<f64>, DVector<f64>) {
    let setup = scenario(name).build().unwrap();
    (setup.mpc, setup.x0, setup.y_t)
}

const MODES: [&str; 3] = ["ballplate_standard", "ballplate_homeo", "ballplate_normal"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transcribed_gradients_match_differences(
        mode in 0usize..3,
        dx in prop::collection::vec(-0.05f64..0.05, 8),
        du in prop::collection::vec(-0.1f64..0.1, 8),
    ) {
        let (mpc, x0, y_t) = controller(MODES[mode]);
        let x = x0 + DVector::from_vec(dx);
        let query = MpcQuery { x, y_t, warm_start: None };
        let (problem, mut z) = mpc.problem(&query).unwrap();
        let (lo, hi) = problem.bounds();
        for (i, d) in du.iter().enumerate() {
            z[i] = d.clamp(lo[i], hi[i]);
        }
        let err = check_gradients(&problem, &z, 1e-6).unwrap();
        prop_assert!(err <= 1e-4, "{}: {err}", MODES[mode]);
    }
}

#[test]
fn accepted_steps_never_increase_the_merit() {
    for name in MODES {
        let (mpc, mut x, y_t) = controller(name);
        let plant = mpc.plant().clone();
        let mut warm: Option<WarmStart> = None;
        for k in 0..15 {
            let res = mpc
                .solve_step(&MpcQuery {
                    x: x.clone(),
                    y_t: y_t.clone(),
                    warm_start: warm.as_ref(),
                })
                .unwrap();
            for rec in &res.nlp.merit_history {
                assert!(rec.after <= rec.before, "{name} step {k}: {rec:?}");
            }
            x = plant.step(&x, &res.u0).unwrap();
            warm = Some(res.warm_start(plant.input_dim()));
        }
    }
}

#[test]
fn modes_share_the_decision_layout() {
    let dims: Vec<usize> = MODES.iter().map(|n| controller(n).0.dim()).collect();
    assert_eq!(dims, vec![10, 10, 12]);
    assert_eq!(controller("ballplate_normal").0.mode(), MpcMode::Normal);
}
