use std::sync::Arc;

use dequmx::deq::{
    backward_implicit, backward_jfb, core_eval, weight_tied_forward, BackwardMode, DeqLayer, DeqMode, Fault, ForwardSolver,
};
use dequmx::gradcheck::{dense_oracle_suite, Instance};
use dequmx::seqcore::Bound;
use dequmx::solvers::SolverConfig;
use dequmx::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layer(inst: &Instance, solver: ForwardSolver, backward: BackwardMode, config: SolverConfig) -> DeqLayer {
    DeqLayer::new(
        Arc::new(inst.core.clone()),
        DeqMode::Equilibrium {
            solver,
            config,
            backward,
            backward_config: SolverConfig::tight(),
        },
    )
    .unwrap()
}

fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap() / (1e-12 + b.max_abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn implicit_backward_matches_dense_solve(seed in 0u64..1_000_000, half in 2usize..6) {
        let rep = dense_oracle_suite(1, seed, 2 * half, Fault::None).unwrap();
        prop_assert!(rep.ok(), "{rep}");
    }

    #[test]
    fn broyden_reaches_equilibrium(seed in any::<u64>()) {
        let inst = Instance::random(seed, 12, 8).unwrap();
        let l = layer(&inst, ForwardSolver::Broyden, BackwardMode::Implicit, SolverConfig::tight());
        let (z, trace) = l.solve(&inst.params, &inst.x).unwrap();
        let res = inst.eval(&inst.params, &z).unwrap().sub(&z).unwrap().norm_l2();
        prop_assert!(trace.converged);
        prop_assert!(res <= 1e-8 * (1.0 + z.norm_l2()), "residual {res:e}");
    }

    #[test]
    fn tape_gradients_equal_direct_backward(seed in any::<u64>(), jfb in any::<bool>()) {
        let inst = Instance::random(seed, 10, 6).unwrap();
        let mode = if jfb { BackwardMode::Jfb } else { BackwardMode::Implicit };
        let l = layer(&inst, ForwardSolver::Broyden, mode, SolverConfig::tight());
        let u = Tensor::randn(inst.x.shape().to_vec(), &mut ChaCha8Rng::seed_from_u64(seed));

        let tape = Tape::new();
        let b = Bound::leaves(&tape, &inst.params);
        let x = tape.leaf(inst.x.clone());
        let out = l.forward(&b, x).unwrap();
        let loss = out.z_star.mul(tape.constant(u.clone())).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();

        let z = out.z_star.value();
        let direct = if jfb {
            backward_jfb(&inst.core, &inst.params, &z, &inst.x, &u).unwrap()
        } else {
            backward_implicit(&inst.core, &inst.params, &z, &inst.x, &u, &SolverConfig::tight()).unwrap()
        };
        prop_assert!(max_rel(&x.grad().unwrap(), &direct.x) < 1e-12);
        let grads = b.grads();
        for (name, g) in direct.params.iter() {
            prop_assert!(max_rel(grads.get(name).unwrap(), g) < 1e-12, "{name}");
        }
    }

    #[test]
    fn jfb_is_one_step_backprop_from_the_equilibrium(seed in any::<u64>()) {
        let inst = Instance::random(seed, 10, 6).unwrap();
        let z = inst.solve(&inst.params, &SolverConfig::tight()).unwrap();
        let u = Tensor::randn(z.shape().to_vec(), &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let tape = Tape::new();
        let b = Bound::leaves(&tape, &inst.params);
        let x = tape.leaf(inst.x.clone());
        let f = inst.core.apply(&b, tape.constant(z.clone()), x).unwrap();
        tape.backward(f.mul(tape.constant(u.clone())).unwrap().sum().unwrap()).unwrap();
        let jfb = backward_jfb(&inst.core, &inst.params, &z, &inst.x, &u).unwrap();
        prop_assert!(max_rel(&x.grad().unwrap(), &jfb.x) < 1e-12);
    }

    #[test]
    fn capped_plain_iteration_equals_unrolled_core(seed in any::<u64>(), l_max in 1usize..6) {
        let inst = Instance::random(seed, 10, 6).unwrap();
        let cfg = SolverConfig::new(1.0, f64::MIN_POSITIVE, l_max).unwrap();
        let l = layer(&inst, ForwardSolver::FixedPoint, BackwardMode::Jfb, cfg);
        let (z, trace) = l.solve(&inst.params, &inst.x).unwrap();
        prop_assert_eq!(trace.l_stop, l_max);
        let mut w = Tensor::zeros(inst.x.shape().to_vec());
        for _ in 0..l_max {
            w = core_eval(&inst.core, &inst.params, &w, &inst.x).unwrap();
        }
        prop_assert_eq!(z.data(), w.data());
    }
}

#[test]
fn equilibrium_tape_is_independent_of_iteration_count() {
    let inst = Instance::with_shape(5, 8, 6).unwrap();
    let mut deq_nodes = Vec::new();
    let mut wt_nodes = Vec::new();
    for l_max in [2, 8, 32] {
        let cfg = SolverConfig::new(1.0, f64::MIN_POSITIVE, l_max).unwrap();
        let l = layer(&inst, ForwardSolver::FixedPoint, BackwardMode::Implicit, cfg);
        let tape = Tape::new();
        let b = Bound::leaves(&tape, &inst.params);
        let x = tape.leaf(inst.x.clone());
        let before = tape.len();
        let out = l.forward(&b, x).unwrap();
        assert_eq!(out.trace.l_stop, l_max);
        deq_nodes.push(tape.len() - before);

        let tape = Tape::new();
        let b = Bound::leaves(&tape, &inst.params);
        let x = tape.leaf(inst.x.clone());
        let before = tape.len();
        weight_tied_forward(&inst.core, &b, x, l_max).unwrap();
        wt_nodes.push(tape.len() - before);
    }
    assert_eq!(deq_nodes, [1, 1, 1]);
    assert!(wt_nodes[0] < wt_nodes[1] && wt_nodes[1] < wt_nodes[2], "{wt_nodes:?}");
    // Unrolled cost is linear in the number of core applications.
    assert_eq!(wt_nodes[2] - wt_nodes[1], 4 * (wt_nodes[1] - wt_nodes[0]));
}
