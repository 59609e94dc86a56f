//! Training examples: synthetic tone-plus-noise scenes and on-disk scene
//! directories.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::SeparatorModel;
use crate::dsp::{generate_scene, istft, read_wav, sdr, stft, Scene, SceneSpec, SourceKind, SourceSpec, Spectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A mixture and one target source, as waves and spectrograms.
#[derive(Clone, Debug)]
pub struct Example {
    pub mixture_wave: Vec<Vec<f64>>,
    pub target_wave: Vec<Vec<f64>>,
    pub mixture: Spectrogram,
    /// Sum of the non-target sources.
    pub residual: Spectrogram,
    pub target: Spectrogram,
}

impl Example {
    pub fn from_scene(scene: &Scene, target_index: usize, stft_config: &StftConfig) -> Result<Self> {
        let target = scene
            .sources
            .get(target_index)
            .ok_or_else(|| Error::invalid("example", format!("scene has no source {target_index}")))?;
        Self::from_waves(&scene.mixture, target, stft_config)
    }

    /// Example from a mixture and its target. The residual is their
    /// difference.
    pub fn from_waves(mixture: &[Vec<f64>], target: &[Vec<f64>], stft_config: &StftConfig) -> Result<Self> {
        if mixture.len() != target.len() || mixture.iter().zip(target).any(|(m, t)| m.len() != t.len()) {
            return Err(Error::invalid("example", "mixture and target shapes differ"));
        }
        let residual_wave: Vec<Vec<f64>> = mixture
            .iter()
            .zip(target)
            .map(|(m, t)| m.iter().zip(t).map(|(m, t)| m - t).collect())
            .collect();
        Ok(Self {
            mixture: stft(mixture, stft_config)?,
            residual: stft(&residual_wave, stft_config)?,
            target: stft(target, stft_config)?,
            mixture_wave: mixture.to_vec(),
            target_wave: target.to_vec(),
        })
    }

    pub fn mixture_magnitude(&self) -> Tensor {
        self.mixture.magnitude()
    }

    pub fn target_magnitude(&self) -> Tensor {
        self.target.magnitude()
    }

    /// SDR of a magnitude estimate resynthesized with the mixture phase.
    pub fn sdr_of_magnitude(&self, estimate: &Tensor) -> Result<f64> {
        let wave = istft(&self.mixture.with_magnitude(estimate)?)?;
        sdr(&self.target_wave, &wave)
    }

    /// SDR of the ideal ratio mask `|S| / (|S| + |N|)` applied to the
    /// mixture.
    pub fn oracle_sdr(&self) -> Result<f64> {
        let s = self.target.magnitude();
        let n = self.residual.magnitude();
        let m = self.mixture.magnitude();
        let data = s
            .data()
            .iter()
            .zip(n.data())
            .zip(m.data())
            .map(|((s, n), m)| if s + n > 0.0 { m * s / (s + n) } else { 0.0 })
            .collect();
        self.sdr_of_magnitude(&Tensor::new(s.shape().to_vec(), data)?)
    }

    /// SDR of the model's estimate.
    pub fn model_sdr(&self, model: &SeparatorModel) -> Result<f64> {
        let (est, _) = model.separate(&self.mixture_magnitude())?;
        self.sdr_of_magnitude(&est)
    }
}

/// Training and validation examples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
}

/// Duration of one toy scene: 100 hops of the toy framing.
pub const TOY_SECONDS: f64 = 0.4;

/// A random tone-plus-noise scene at the toy framing. Source 0 is the
/// harmonic tone, source 1 band-limited noise.
pub fn toy_scene_spec(seed: u64) -> SceneSpec {
    toy_scene_spec_with(seed, TOY_SECONDS)
}

/// [`toy_scene_spec`] with a chosen duration.
pub fn toy_scene_spec_with(seed: u64, seconds: f64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = rng.random_range(200.0..450.0);
    let harmonics = rng.random_range(3..=5);
    let lo = rng.random_range(300.0..1500.0);
    let hi: f64 = lo + rng.random_range(800.0..2000.0);
    SceneSpec {
        sample_rate: StftConfig::toy().sample_rate,
        duration: seconds,
        channels: 1,
        seed,
        sources: vec![
            SourceSpec {
                kind: SourceKind::Tonal { f0, harmonics },
                gain: rng.random_range(0.4..0.9),
                pan: 0.0,
            },
            SourceSpec {
                kind: SourceKind::Noise {
                    lo_hz: lo,
                    hi_hz: hi.min(3800.0),
                },
                gain: rng.random_range(0.4..0.9),
                pan: 0.0,
            },
        ],
    }
}

/// Toy dataset with the tone as target. Validation scenes use seeds
/// disjoint from the training scenes.
pub fn toy_dataset(n_train: usize, n_valid: usize, seed: u64) -> Result<Dataset> {
    toy_dataset_with(n_train, n_valid, seed, TOY_SECONDS, 0)
}

/// Toy sources in index order.
pub const TOY_TARGETS: [&str; 2] = ["tone", "noise"];

/// [`toy_dataset`] with a chosen scene duration and target source index.
pub fn toy_dataset_with(n_train: usize, n_valid: usize, seed: u64, seconds: f64, target_index: usize) -> Result<Dataset> {
    let stft_config = StftConfig::toy();
    let make = |s: u64| -> Result<Example> {
        Example::from_scene(&generate_scene(&toy_scene_spec_with(s, seconds))?, target_index, &stft_config)
    };
    let base = seed.wrapping_mul(1_000_000);
    Ok(Dataset {
        train: (0..n_train as u64).map(|i| make(base + i)).collect::<Result<_>>()?,
        valid: (0..n_valid as u64).map(|i| make(base + 500_000 + i)).collect::<Result<_>>()?,
    })
}

/// Load a dataset laid out as `dir/{train,valid}/<scene>/mixture.wav` and
/// `<target>.wav`. Training scenes are cut into non-overlapping segments of
/// `segment_seconds`, dropping the remainder; validation scenes are used
/// whole.
pub fn load_dataset_dir(dir: &Path, target: &str, stft_config: &StftConfig, segment_seconds: f64) -> Result<Dataset> {
    let split = |name: &str| -> Result<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> {
        let root = dir.join(name);
        let mut scenes: Vec<_> = std::fs::read_dir(&root)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", root.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        scenes.sort();
        let mut out = Vec::new();
        for scene in scenes {
            let mix = read_wav(scene.join("mixture.wav"))?;
            let tgt = read_wav(scene.join(format!("{target}.wav")))?;
            for w in [&mix, &tgt] {
                if w.sample_rate != stft_config.sample_rate {
                    return Err(Error::SpecMismatch(format!(
                        "{}: sample rate {} does not match the model's {}",
                        scene.display(),
                        w.sample_rate,
                        stft_config.sample_rate
                    )));
                }
            }
            out.push((mix.channels, tgt.channels));
        }
        Ok(out)
    };
    let seg = (segment_seconds * stft_config.sample_rate as f64).round() as usize;
    if seg == 0 {
        return Err(Error::Config("segment_seconds is shorter than one sample".into()));
    }
    let mut train = Vec::new();
    for (mix, tgt) in split("train")? {
        let len = mix.first().map_or(0, Vec::len);
        for start in (0..len / seg).map(|k| k * seg) {
            let cut = |w: &[Vec<f64>]| -> Vec<Vec<f64>> { w.iter().map(|c| c[start..start + seg].to_vec()).collect() };
            train.push(Example::from_waves(&cut(&mix), &cut(&tgt), stft_config)?);
        }
    }
    if train.is_empty() {
        return Err(Error::Config(format!(
            "no training segment of {segment_seconds} s found under {}",
            dir.join("train").display()
        )));
    }
    let valid = split("valid")?
        .iter()
        .map(|(m, t)| Example::from_waves(m, t, stft_config))
        .collect::<Result<_>>()?;
    Ok(Dataset { train, valid })
}
