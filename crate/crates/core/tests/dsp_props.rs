use dequmx::dsp::{generate_scene, istft, mwf, sdr, stft, SceneSpec, SourceKind, SourceSpec, StftConfig};
use dequmx::separator::toy_scene_spec;
use dequmx::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn noise(rng: &mut ChaCha8Rng, channels: usize, len: usize) -> Vec<Vec<f64>> {
    (0..channels)
        .map(|_| (0..len).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn stereo_pair(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pan: f64 = rng.random_range(0.4..0.9);
    SceneSpec {
        sample_rate: 8000,
        duration: 0.5,
        channels: 2,
        seed,
        sources: vec![
            SourceSpec {
                kind: SourceKind::Tonal {
                    f0: rng.random_range(150.0..400.0),
                    harmonics: rng.random_range(3..8),
                },
                gain: rng.random_range(0.4..0.9),
                pan: -pan,
            },
            SourceSpec {
                kind: SourceKind::Noise {
                    lo_hz: rng.random_range(100.0..800.0),
                    hi_hz: rng.random_range(1500.0..3500.0),
                },
                gain: rng.random_range(0.4..0.9),
                pan,
            },
        ],
    }
}

fn trimmed(mut w: Vec<Vec<f64>>, len: usize) -> Vec<Vec<f64>> {
    w.iter_mut().for_each(|c| c.truncate(len));
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_at_any_length(len in 1usize..700, stereo in any::<bool>(), seed in any::<u64>(), toy in any::<bool>()) {
        let cfg = if toy { StftConfig::toy() } else { StftConfig { frame_len: 512, hop: 128, sample_rate: 16_000 } };
        let x = noise(&mut ChaCha8Rng::seed_from_u64(seed), if stereo { 2 } else { 1 }, len);
        let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
        let peak = x.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in x.iter().zip(&y) {
            prop_assert!(b.len() >= len);
            for (u, v) in a.iter().zip(b) {
                prop_assert!((u - v).abs() < 1e-6 * peak);
            }
        }
    }

    #[test]
    fn wiener_estimates_sum_to_the_mixture(seed in any::<u64>(), sources in 1usize..4, zero_one in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = noise(&mut rng, 2, 300);
        let mix = stft(&x, &StftConfig::toy()).unwrap();
        let shape = vec![2, mix.frames, mix.bins()];
        let mags: Vec<Tensor> = (0..sources)
            .map(|j| {
                if zero_one && j == 0 {
                    Tensor::zeros(shape.clone())
                } else {
                    Tensor::randn(shape.clone(), &mut rng).map(f64::abs)
                }
            })
            .collect();
        let est = mwf(&mags, &mix).unwrap();
        for (i, m) in mix.data.iter().enumerate() {
            let total: num_complex::Complex64 = est.iter().map(|e| e.data[i]).sum();
            prop_assert!((total - m).norm() <= 1e-10 * (1.0 + m.norm()));
        }
    }

    #[test]
    fn sdr_of_a_scaled_reference_is_closed_form(g in -3.0f64..3.0, seed in any::<u64>()) {
        prop_assume!((g - 1.0).abs() > 1e-3);
        let s = noise(&mut ChaCha8Rng::seed_from_u64(seed), 2, 64);
        let est: Vec<Vec<f64>> = s.iter().map(|c| c.iter().map(|v| g * v).collect()).collect();
        let expected = (-10.0 * ((1.0 - g) * (1.0 - g)).log10()).min(80.0);
        prop_assert!((sdr(&s, &est).unwrap() - expected).abs() < 1e-9);
    }
}

#[test]
fn sdr_recovers_a_twenty_db_noise_floor() {
    let mut total = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = noise(&mut rng, 2, 8000);
        let power = s.iter().flatten().map(|v| v * v).sum::<f64>() / 16_000.0;
        let scale = (power * 0.01).sqrt();
        let n = noise(&mut rng, 2, 8000);
        let est: Vec<Vec<f64>> = s.iter().zip(&n).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + scale * v).collect()).collect();
        total += sdr(&s, &est).unwrap();
    }
    let mean = total / 100.0;
    assert!((mean - 20.0).abs() < 0.2, "{mean}");
}

#[test]
fn oracle_mask_separates_training_scenes() {
    let mut total = 0.0;
    for seed in 0..20 {
        let spec = toy_scene_spec(seed);
        let scene = generate_scene(&spec).unwrap();
        let cfg = StftConfig::toy();
        let mix = stft(&scene.mixture, &cfg).unwrap();
        let a = stft(&scene.sources[0], &cfg).unwrap().magnitude();
        let b = stft(&scene.sources[1], &cfg).unwrap().magnitude();
        let mask = a.zip_map(&b, "irm", |x, y| if x + y > 0.0 { x / (x + y) } else { 0.5 }).unwrap();
        let est = mix.magnitude().zip_map(&mask, "mask", |m, g| m * g).unwrap();
        let out = trimmed(istft(&mix.with_magnitude(&est).unwrap()).unwrap(), spec.samples());
        total += sdr(&scene.sources[0], &out).unwrap();
    }
    let mean = total / 20.0;
    assert!(mean > 15.0, "{mean}");
}

#[test]
fn wiener_filter_beats_masking_on_panned_pairs() {
    let scenes = 20;
    let mut wins = 0;
    for seed in 0..scenes {
        let spec = stereo_pair(100 + seed);
        let scene = generate_scene(&spec).unwrap();
        let cfg = StftConfig::toy();
        let mix = stft(&scene.mixture, &cfg).unwrap();
        // Both refinements start from the same imperfect magnitude estimates.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mags: Vec<Tensor> = scene
            .sources
            .iter()
            .map(|s| {
                let m = stft(s, &cfg).unwrap().magnitude();
                let jitter = Tensor::randn(m.shape().to_vec(), &mut rng);
                m.zip_map(&jitter, "jitter", |v, j| v * (0.5 * j).exp()).unwrap()
            })
            .collect();
        let masked = trimmed(istft(&mix.with_magnitude(&mags[0]).unwrap()).unwrap(), spec.samples());
        let wiener = trimmed(istft(&mwf(&mags, &mix).unwrap()[0]).unwrap(), spec.samples());
        let (m, w) = (sdr(&scene.sources[0], &masked).unwrap(), sdr(&scene.sources[0], &wiener).unwrap());
        if w >= m {
            wins += 1;
        }
    }
    assert!(wins * 5 >= scenes * 4, "MWF won {wins} of {scenes}");
}
