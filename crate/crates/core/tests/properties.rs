use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hion_core::training::{evaluate_loss, loss_and_gradient, sample_batch};
use hion_core::{Checkpoint, CostId, Cost, Jet, LossWeights, StateDistribution, SystemId, Plant, TmanoController};

fn controller(system: SystemId, cost: CostId, hidden: &[usize], seed: u64) -> TmanoController {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TmanoController::init(Plant::new(system), Cost::new(cost, 1.0).unwrap(), hidden, hidden, &mut rng).unwrap()
}

fn system_and_cost() -> impl Strategy<Value = (SystemId, CostId)> {
    prop_oneof![
        Just((SystemId::Linear2, CostId::LinearQuadratic)),
        Just((SystemId::Vanderpol, CostId::VdpMinSpeed)),
        Just((SystemId::Vanderpol, CostId::VdpTrack)),
        Just((SystemId::Vanderpol, CostId::Compare)),
    ]
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    /// Every time-derivative coefficient of every controller output equals
    /// the central difference of the coefficient below it.
    #[test]
    fn jet_coefficients_match_finite_differences(
        (system, cost) in system_and_cost(),
        seed in 0u64..1_000_000,
        frac in 0.05f64..0.95,
        p in -3.0f64..3.0,
        v in -2.0f64..2.0,
        r in -3.0f64..3.0,
    ) {
        let c = controller(system, cost, &[8, 8], seed);
        let t = frac * c.plant.t_f;
        // Fourth-order five-point stencil.
        let h = 1e-3;
        let (x_o, x_r) = ([p, v], [r]);
        let groups = |dt: f64| -> Vec<Jet<f64>> {
            let o = c.forward(t + dt, &x_o, &x_r).unwrap();
            o.states.into_iter().chain(o.controls).chain(o.costates).collect()
        };
        let mid = groups(0.0);
        let shifted: Vec<Vec<Jet<f64>>> = [2.0, 1.0, -1.0, -2.0].iter().map(|s| groups(s * h)).collect();
        for (j, m) in mid.iter().enumerate() {
            for k in 1..=m.order() {
                let at = |i: usize| shifted[i][j].coeffs()[k - 1];
                let fd = (-at(0) + 8.0 * at(1) - 8.0 * at(2) + at(3)) / (12.0 * h);
                prop_assert!(close(m.coeffs()[k], fd, 1e-6), "output {j}, order {k}: jet {} vs fd {fd}", m.coeffs()[k]);
            }
        }
    }

    /// Translating the observed position and the reference together
    /// translates the predicted position and leaves everything else alone.
    #[test]
    fn translation_invariance(seed in 0u64..1_000_000, d in -100.0f64..100.0, t in 0.0f64..2.0,
                              p in -3.0f64..3.0, v in -2.0f64..2.0, r in -3.0f64..3.0) {
        let c = controller(SystemId::Linear2, CostId::LinearQuadratic, &[8, 8], seed);
        let a = c.forward(t, &[p, v], &[r]).unwrap();
        let b = c.forward(t, &[p + d, v], &[r + d]).unwrap();
        prop_assert!((b.states[0].value() - (a.states[0].value() + d)).abs() < 1e-12);
        let rest = |o: &hion_core::ControllerOutput| -> Vec<f64> {
            let mut v: Vec<f64> = o.states[0].coeffs()[1..].to_vec();
            for j in o.states[1..].iter().chain(&o.controls).chain(&o.costates) {
                v.extend_from_slice(j.coeffs());
            }
            v
        };
        for (x, y) in rest(&a).into_iter().zip(rest(&b)) {
            prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    /// The predicted state at elapsed time zero is the observation.
    #[test]
    fn initial_condition_is_exact((system, cost) in system_and_cost(), seed in 0u64..1_000_000,
                                  p in -50.0f64..50.0, v in -20.0f64..20.0, r in -50.0f64..50.0) {
        let c = controller(system, cost, &[8, 8], seed);
        let o = c.forward(0.0, &[p, v], &[r]).unwrap();
        prop_assert!((o.states[0].value() - p).abs() <= 1e-12 * p.abs().max(1.0));
        prop_assert!((o.states[0].coeffs()[1] - v).abs() <= 1e-12 * v.abs().max(1.0));
        prop_assert!((o.states[1].value() - v).abs() <= 1e-12 * v.abs().max(1.0));
    }

    #[test]
    fn checkpoint_round_trip_is_exact((system, cost) in system_and_cost(), seed in 0u64..1_000_000) {
        let c = controller(system, cost, &[5, 3], seed);
        let ck = Checkpoint::from_controller(&c, seed, 0);
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        prop_assert_eq!(back.to_controller().unwrap(), c);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    /// Parameter gradients of the full active loss match central differences.
    #[test]
    fn gradient_matches_finite_differences((system, cost) in system_and_cost(), seed in 0u64..1_000_000) {
        let mut c = controller(system, cost, &[8, 8], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let dist = StateDistribution { position_range: (-2.0, 2.0), ..Default::default() };
        let samples = sample_batch(&dist, c.plant.t_f, 3, 3, &mut rng);
        let weights = LossWeights { terminal_state: 3.0, costate_term: 0.5, ..Default::default() };
        let (_, grad) = loss_and_gradient(&c, &samples, &weights, true).unwrap();
        let params = c.params();
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for i in 0..params.len() {
            let h = 1e-6 * params[i].abs().max(1.0);
            let mut p = params.clone();
            p[i] = params[i] + h;
            c.set_params(&p).unwrap();
            let up = evaluate_loss(&c, &samples, &weights, true).unwrap().total;
            p[i] = params[i] - h;
            c.set_params(&p).unwrap();
            let down = evaluate_loss(&c, &samples, &weights, true).unwrap().total;
            let fd = (up - down) / (2.0 * h);
            let err = (grad[i] - fd).abs();
            prop_assert!(err <= 1e-4 * grad[i].abs().max(fd.abs()).max(1e-2 * gmax),
                "param {i}: analytic {} vs fd {fd}", grad[i]);
        }
        c.set_params(&params).unwrap();
    }
}
