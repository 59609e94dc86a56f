use dequmx::gradcheck::Instance;
use dequmx::seqcore::{Blstm, Bound, Fc, FThetaCore, GroupNorm1};
use dequmx::{ParamSet, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Worst relative error of reverse-mode gradients of `⟨u, layer(x)⟩` with
/// respect to every parameter and input entry, against central differences.
fn fd_check<F>(params: &ParamSet, x: &Tensor, layer: F, seed: u64) -> f64
where
    F: for<'t> Fn(&Bound<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let loss = |ps: &ParamSet, x: &Tensor, u: &Tensor| -> f64 {
        let tape = Tape::new();
        let b = Bound::constants(&tape, ps);
        let y = layer(&b, tape.constant(x.clone())).unwrap().value();
        y.dot(u).unwrap()
    };
    let tape = Tape::new();
    let b = Bound::leaves(&tape, params);
    let xv = tape.leaf(x.clone());
    let y = layer(&b, xv).unwrap();
    let u = Tensor::randn(y.shape(), &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let l = y.mul(tape.constant(u.clone())).unwrap().sum().unwrap();
    tape.backward(l).unwrap();
    let grads = b.grads();
    let gx = xv.grad().unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut compare = |analytic: f64, plus: f64, minus: f64| {
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((analytic - fd).abs() / (1e-3 + fd.abs()));
    };
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            let bump = |s: f64| {
                let mut ps = params.clone();
                let mut d = t.data().to_vec();
                d[i] += s;
                ps.set(name, Tensor::new(t.shape().to_vec(), d).unwrap()).unwrap();
                loss(&ps, x, &u)
            };
            compare(grads.get(name).unwrap().data()[i], bump(h), bump(-h));
        }
    }
    for i in 0..x.len() {
        let bump = |s: f64| {
            let mut d = x.data().to_vec();
            d[i] += s;
            loss(params, &Tensor::new(x.shape().to_vec(), d).unwrap(), &u)
        };
        compare(gx.data()[i], bump(h), bump(-h));
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fc_gradients(seed in any::<u64>(), frames in 1usize..5, bias in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fc = Fc::new("fc", 3, 4, bias);
        let mut ps = ParamSet::new();
        fc.init(&mut ps, &mut rng).unwrap();
        let x = Tensor::randn(vec![frames, 3], &mut rng);
        let err = fd_check(&ps, &x, |b, x| fc.apply(b, x), seed);
        prop_assert!(err < 1e-6, "{err:e}");
    }

    #[test]
    fn group_norm_gradients(seed in any::<u64>(), frames in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gn = GroupNorm1::new("gn", 6);
        let mut ps = ParamSet::new();
        gn.init(&mut ps, &mut rng).unwrap();
        ps.set("gn.gamma", Tensor::randn(vec![6], &mut rng)).unwrap();
        ps.set("gn.beta", Tensor::randn(vec![6], &mut rng)).unwrap();
        let x = Tensor::randn(vec![frames, 6], &mut rng);
        let err = fd_check(&ps, &x, |b, x| gn.apply(b, x), seed);
        prop_assert!(err < 1e-5, "{err:e}");
    }

    #[test]
    fn blstm_gradients_over_five_frames(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm = Blstm::new("lstm", 4, 3);
        let mut ps = ParamSet::new();
        lstm.init(&mut ps, &mut rng).unwrap();
        let x = Tensor::randn(vec![5, 4], &mut rng);
        let err = fd_check(&ps, &x, |b, x| lstm.apply(b, x), seed);
        prop_assert!(err < 1e-5, "{err:e}");
    }

    #[test]
    fn core_gradients_in_state_and_parameters(seed in any::<u64>(), frames in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core = FThetaCore::new("core", 4).unwrap();
        let mut ps = ParamSet::new();
        core.init(&mut ps, &mut rng).unwrap();
        let inj = Tensor::randn(vec![frames, 4], &mut rng);
        let z = Tensor::randn(vec![frames, 4], &mut rng);
        let err = fd_check(&ps, &z, |b, z| core.apply(b, z, b.tape().constant(inj.clone())), seed);
        prop_assert!(err < 1e-5, "{err:e}");
    }

    #[test]
    fn group_norm_standardizes_each_frame(seed in any::<u64>(), frames in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gn = GroupNorm1::new("gn", 8);
        let mut ps = ParamSet::new();
        gn.init(&mut ps, &mut rng).unwrap();
        let x = Tensor::randn(vec![frames, 8], &mut rng).map(|v| 10.0 * v);
        let tape = Tape::new();
        let y = gn.apply(&Bound::constants(&tape, &ps), tape.constant(x)).unwrap().value();
        for t in 0..frames {
            let row = &y.data()[t * 8..(t + 1) * 8];
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn contraction_scaled_cores_are_lipschitz_below_one() {
    let mut worst: f64 = 0.0;
    for seed in 0..40 {
        let inst = Instance::random(seed, 16, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7_000);
        let shape = inst.x.shape().to_vec();
        for k in 0..12 {
            let z1 = Tensor::randn(shape.clone(), &mut rng).map(|v| 2.0 * v);
            // Half the probes are local, half global.
            let step = if k % 2 == 0 { 1e-4 } else { 1.0 };
            let z2 = z1.axpy(step, &Tensor::randn(shape.clone(), &mut rng)).unwrap();
            let num = inst.eval(&inst.params, &z1).unwrap().sub(&inst.eval(&inst.params, &z2).unwrap()).unwrap().norm_l2();
            let den = z1.sub(&z2).unwrap().norm_l2();
            worst = worst.max(num / den);
        }
    }
    assert!(worst < 1.0, "empirical Lipschitz constant {worst}");
}

#[test]
fn core_output_is_bounded_and_shape_preserving() {
    let inst = Instance::random(3, 16, 12).unwrap();
    let z = Tensor::randn(inst.x.shape().to_vec(), &mut ChaCha8Rng::seed_from_u64(1)).map(|v| 100.0 * v);
    let y = inst.eval(&inst.params, &z).unwrap();
    assert_eq!(y.shape(), z.shape());
    // The core ends in a BLSTM, whose outputs are hidden states in (−1, 1).
    assert!(y.max_abs() < 1.0);
}
