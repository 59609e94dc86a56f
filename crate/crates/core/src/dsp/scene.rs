use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum SourceKind {
    /// Harmonic tone; harmonic `h` has amplitude `1 / h` and a random phase.
    Tonal { f0: f64, harmonics: usize },
    /// Gaussian noise band-limited to `[lo_hz, hi_hz]`.
    Noise { lo_hz: f64, hi_hz: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSpec {
    pub kind: SourceKind,
    /// Peak amplitude, in `[0, 1]`.
    pub gain: f64,
    /// Stereo position in `[−1, 1]`; ignored for mono.
    pub pan: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub sample_rate: u32,
    pub duration: f64,
    pub channels: usize,
    pub seed: u64,
    pub sources: Vec<SourceSpec>,
}

/// A generated scene; `mixture` is the sample-wise sum of `sources`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub mixture: Vec<Vec<f64>>,
    pub sources: Vec<Vec<Vec<f64>>>,
}

impl SceneSpec {
    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !(1..=2).contains(&self.channels) {
            return bad(format!("channels must be 1 or 2, got {}", self.channels));
        }
        if self.sources.is_empty() {
            return bad("a scene needs at least one source".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (i, s) in self.sources.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.gain) {
                return bad(format!("source.{i}.gain must be in [0, 1], got {}", s.gain));
            }
            if !(-1.0..=1.0).contains(&s.pan) {
                return bad(format!("source.{i}.pan must be in [-1, 1], got {}", s.pan));
            }
            match s.kind {
                SourceKind::Tonal { f0, harmonics } => {
                    if !(f0 > 0.0 && f0 < nyquist) || harmonics == 0 {
                        return bad(format!("source.{i}: f0 must be in (0, {nyquist}) with at least one harmonic"));
                    }
                }
                SourceKind::Noise { lo_hz, hi_hz } => {
                    if !(0.0 <= lo_hz && lo_hz < hi_hz && hi_hz <= nyquist) {
                        return bad(format!("source.{i}: need 0 <= lo_hz < hi_hz <= {nyquist}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sample_rate = None;
        let mut duration = None;
        let mut channels = 1;
        let mut seed = 0;
        let mut fields: Vec<std::collections::BTreeMap<String, String>> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| Error::Config(format!("line {}: `{key}` is not a number", lineno + 1)))
            };
            match key {
                "sample_rate" => sample_rate = Some(num(value)? as u32),
                "duration" => duration = Some(num(value)?),
                "channels" => channels = num(value)? as usize,
                "seed" => seed = value.parse().map_err(|_| Error::Config(format!("line {}: bad seed", lineno + 1)))?,
                _ => {
                    let rest = key
                        .strip_prefix("source.")
                        .ok_or_else(|| Error::Config(format!("line {}: unknown key `{key}`", lineno + 1)))?;
                    let (idx, field) = rest
                        .split_once('.')
                        .ok_or_else(|| Error::Config(format!("line {}: unknown key `{key}`", lineno + 1)))?;
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| Error::Config(format!("line {}: bad source index in `{key}`", lineno + 1)))?;
                    if !matches!(field, "kind" | "f0" | "harmonics" | "lo_hz" | "hi_hz" | "gain" | "pan") {
                        return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1)));
                    }
                    if fields.len() <= idx {
                        fields.resize(idx + 1, Default::default());
                    }
                    fields[idx].insert(field.to_string(), value.to_string());
                }
            }
        }
        let mut sources = Vec::with_capacity(fields.len());
        for (i, f) in fields.iter().enumerate() {
            let get = |k: &str| -> Result<f64> {
                f.get(k)
                    .ok_or_else(|| Error::Config(format!("source.{i}.{k} is required")))?
                    .parse()
                    .map_err(|_| Error::Config(format!("source.{i}.{k} is not a number")))
            };
            let opt = |k: &str, d: f64| -> Result<f64> { if f.contains_key(k) { get(k) } else { Ok(d) } };
            let kind = match f.get("kind").map(String::as_str) {
                Some("tonal") => SourceKind::Tonal {
                    f0: get("f0")?,
                    harmonics: opt("harmonics", 1.0)? as usize,
                },
                Some("noise") => SourceKind::Noise {
                    lo_hz: get("lo_hz")?,
                    hi_hz: get("hi_hz")?,
                },
                Some(other) => return Err(Error::Config(format!("source.{i}.kind `{other}` is not tonal or noise"))),
                None => return Err(Error::Config(format!("source.{i}.kind is required"))),
            };
            sources.push(SourceSpec {
                kind,
                gain: opt("gain", 1.0)?,
                pan: opt("pan", 0.0)?,
            });
        }
        let spec = SceneSpec {
            sample_rate: sample_rate.ok_or_else(|| Error::Config("sample_rate is required".into()))?,
            duration: duration.ok_or_else(|| Error::Config("duration is required".into()))?,
            channels,
            seed,
            sources,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sample_rate = {}", self.sample_rate);
        let _ = writeln!(s, "duration = {}", self.duration);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "seed = {}", self.seed);
        for (i, src) in self.sources.iter().enumerate() {
            match src.kind {
                SourceKind::Tonal { f0, harmonics } => {
                    let _ = writeln!(s, "source.{i}.kind = tonal\nsource.{i}.f0 = {f0}\nsource.{i}.harmonics = {harmonics}");
                }
                SourceKind::Noise { lo_hz, hi_hz } => {
                    let _ = writeln!(s, "source.{i}.kind = noise\nsource.{i}.lo_hz = {lo_hz}\nsource.{i}.hi_hz = {hi_hz}");
                }
            }
            let _ = writeln!(s, "source.{i}.gain = {}\nsource.{i}.pan = {}", src.gain, src.pan);
        }
        s
    }
}

fn tonal(f0: f64, harmonics: usize, sr: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for h in 1..=harmonics {
        let f = f0 * h as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        if f >= sr / 2.0 {
            continue;
        }
        for (i, v) in x.iter_mut().enumerate() {
            *v += (2.0 * PI * f * i as f64 / sr + phase).sin() / h as f64;
        }
    }
    x
}

fn band_noise(lo: f64, hi: f64, sr: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < lo || f > hi {
            *b = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Generate a scene. Each source is peak-normalized to its gain and then
/// panned; the mixture is the exact sum.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let n = spec.samples();
    let sr = spec.sample_rate as f64;
    let mut sources = Vec::with_capacity(spec.sources.len());
    for (i, src) in spec.sources.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let mut x = match src.kind {
            SourceKind::Tonal { f0, harmonics } => tonal(f0, harmonics, sr, n, &mut rng),
            SourceKind::Noise { lo_hz, hi_hz } => band_noise(lo_hz, hi_hz, sr, n, &mut rng),
        };
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { src.gain / peak } else { 0.0 };
        x.iter_mut().for_each(|v| *v = (*v * scale).clamp(-1.0, 1.0));
        let chans = if spec.channels == 1 {
            vec![x]
        } else {
            let theta = (src.pan + 1.0) * PI / 4.0;
            vec![x.iter().map(|v| v * theta.cos()).collect(), x.iter().map(|v| v * theta.sin()).collect()]
        };
        sources.push(chans);
    }
    let mixture = (0..spec.channels)
        .map(|c| (0..n).map(|t| sources.iter().map(|s: &Vec<Vec<f64>>| s[c][t]).sum()).collect())
        .collect();
    Ok(Scene { mixture, sources })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(gains: (f64, f64)) -> SceneSpec {
        SceneSpec {
            sample_rate: 8000,
            duration: 0.25,
            channels: 2,
            seed: 11,
            sources: vec![
                SourceSpec {
                    kind: SourceKind::Tonal { f0: 220.0, harmonics: 4 },
                    gain: gains.0,
                    pan: -0.5,
                },
                SourceSpec {
                    kind: SourceKind::Noise { lo_hz: 1000.0, hi_hz: 2500.0 },
                    gain: gains.1,
                    pan: 0.5,
                },
            ],
        }
    }

    #[test]
    fn silent_second_source_leaves_first() {
        let s = generate_scene(&pair((1.0, 0.0))).unwrap();
        assert_eq!(s.mixture, s.sources[0]);
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = generate_scene(&pair((0.8, 0.7))).unwrap();
        let b = generate_scene(&pair((0.8, 0.7))).unwrap();
        assert_eq!(a, b);
        for src in &a.sources {
            assert!(src.iter().flatten().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
        for c in 0..2 {
            for t in 0..a.mixture[c].len() {
                assert_eq!(a.mixture[c][t], a.sources[0][c][t] + a.sources[1][c][t]);
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let spec = pair((0.8, 0.7));
        assert_eq!(SceneSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn parse_rejects_unknown_keys_and_bad_values() {
        assert!(SceneSpec::parse("sample_rate = 8000\nduration = 1\nbogus = 2\nsource.0.kind = tonal\nsource.0.f0 = 100").is_err());
        assert!(SceneSpec::parse("sample_rate = 8000\nduration = 1\nsource.0.kind = tonal\nsource.0.f0 = 9000").is_err());
        assert!(SceneSpec::parse("sample_rate = 8000\nduration = 1\nsource.0.kind = drum").is_err());
        assert!(SceneSpec::parse("sample_rate = 8000\nduration = 1").is_err());
    }
}
