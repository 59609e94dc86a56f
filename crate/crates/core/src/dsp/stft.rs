use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::channel_len;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Framing parameters. The window is always a periodic Hann window and
/// signals are centered: `frame_len / 2` zeros are padded on both sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl StftConfig {
    /// 44.1 kHz, 4096 / 1024.
    pub fn full_scale() -> Self {
        Self {
            frame_len: 4096,
            hop: 1024,
            sample_rate: 44_100,
        }
    }

    /// 8 kHz, 128 / 32: 65 bins.
    pub fn toy() -> Self {
        Self {
            frame_len: 128,
            hop: 32,
            sample_rate: 8_000,
        }
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Frames produced for a signal of `samples` samples.
    pub fn frames(&self, samples: usize) -> usize {
        samples / self.hop + 1
    }

    /// Frames in `seconds` of audio.
    pub fn frames_in(&self, seconds: f64) -> usize {
        self.frames((seconds * self.sample_rate as f64).floor() as usize)
    }

    /// Center frequency of `bin` in Hz.
    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.frame_len as f64
    }

    /// Number of bins at or below `hz`.
    pub fn bins_below(&self, hz: f64) -> usize {
        ((hz * self.frame_len as f64 / self.sample_rate as f64).floor() as usize + 1).min(self.bins())
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_len as f64;
        (0..self.frame_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }

    /// Reject framings whose squared window does not overlap-add to a
    /// constant.
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || !self.frame_len.is_multiple_of(2) {
            return Err(Error::Stft(format!("frame length must be even and at least 2, got {}", self.frame_len)));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::Stft(format!("hop must be in 1..={}, got {}", self.frame_len, self.hop)));
        }
        if self.sample_rate == 0 {
            return Err(Error::Stft("sample rate must be positive".into()));
        }
        let w = self.window();
        let sums: Vec<f64> = (0..self.hop)
            .map(|k| w.iter().skip(k).step_by(self.hop).map(|v| v * v).sum())
            .collect();
        let (lo, hi) = sums.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &s| (l.min(s), h.max(s)));
        if lo <= 0.0 || hi - lo > 1e-9 * hi {
            return Err(Error::Stft(format!(
                "squared Hann window is not overlap-add constant for frame {} / hop {}",
                self.frame_len, self.hop
            )));
        }
        Ok(())
    }
}

/// Complex spectrogram, `channels × frames × bins`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub config: StftConfig,
    pub channels: usize,
    pub frames: usize,
    /// Length of the signal it was computed from.
    pub samples: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(config: StftConfig, channels: usize, frames: usize, samples: usize) -> Self {
        Self {
            config,
            channels,
            frames,
            samples,
            data: vec![Complex64::new(0.0, 0.0); channels * frames * config.bins()],
        }
    }

    pub fn bins(&self) -> usize {
        self.config.bins()
    }

    pub fn index(&self, c: usize, t: usize, f: usize) -> usize {
        (c * self.frames + t) * self.bins() + f
    }

    pub fn at(&self, c: usize, t: usize, f: usize) -> Complex64 {
        self.data[self.index(c, t, f)]
    }

    /// Magnitudes as a `channels × frames × bins` tensor.
    pub fn magnitude(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.channels, self.frames, self.bins()],
            self.data.iter().map(|z| z.norm()).collect(),
        )
    }

    /// Replace magnitudes, keeping this spectrogram's phase. Zero-magnitude
    /// bins take phase zero.
    pub fn with_magnitude(&self, mag: &Tensor) -> Result<Spectrogram> {
        let shape = [self.channels, self.frames, self.bins()];
        if mag.shape() != shape {
            return Err(Error::shape("with_magnitude", &shape, mag.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(mag.data())
            .map(|(z, &m)| {
                let n = z.norm();
                if n > 0.0 {
                    z * (m / n)
                } else {
                    Complex64::new(m, 0.0)
                }
            })
            .collect();
        Ok(Spectrogram { data, ..self.clone() })
    }

    pub fn add(&self, other: &Spectrogram) -> Result<Spectrogram> {
        if self.data.len() != other.data.len() || self.config != other.config {
            return Err(Error::Stft("spectrograms differ in shape or framing".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Spectrogram { data, ..self.clone() })
    }
}

/// Short-time Fourier transform of a multichannel signal.
pub fn stft(wave: &[Vec<f64>], config: &StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    let samples = channel_len("stft", wave)?;
    let (n, hop, bins) = (config.frame_len, config.hop, config.bins());
    let frames = config.frames(samples);
    let window = config.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut out = Spectrogram::zeros(*config, wave.len(), frames, samples);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (c, x) in wave.iter().enumerate() {
        for t in 0..frames {
            for (i, b) in buf.iter_mut().enumerate() {
                // sample index relative to the unpadded signal
                let s = (t * hop + i) as isize - (n / 2) as isize;
                let v = if s >= 0 && (s as usize) < samples { x[s as usize] } else { 0.0 };
                *b = Complex64::new(v * window[i], 0.0);
            }
            fft.process(&mut buf);
            let start = out.index(c, t, 0);
            out.data[start..start + bins].copy_from_slice(&buf[..bins]);
        }
    }
    Ok(out)
}

/// Inverse transform by weighted overlap-add, normalized by the summed
/// squared window.
pub fn istft(spec: &Spectrogram) -> Result<Vec<Vec<f64>>> {
    let config = spec.config;
    config.validate()?;
    let (n, hop, bins) = (config.frame_len, config.hop, config.bins());
    if spec.data.len() != spec.channels * spec.frames * bins {
        return Err(Error::Stft("spectrogram data does not match its shape".into()));
    }
    let window = config.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let padded = (spec.frames.saturating_sub(1)) * hop + n;
    let mut norm = vec![0.0; padded];
    for t in 0..spec.frames {
        for (i, w) in window.iter().enumerate() {
            norm[t * hop + i] += w * w;
        }
    }
    let mut out = Vec::with_capacity(spec.channels);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..spec.channels {
        let mut acc = vec![0.0; padded];
        for t in 0..spec.frames {
            let start = spec.index(c, t, 0);
            let half = &spec.data[start..start + bins];
            buf[..bins].copy_from_slice(half);
            for k in 1..n - bins + 1 {
                buf[n - k] = half[k].conj();
            }
            ifft.process(&mut buf);
            for (i, w) in window.iter().enumerate() {
                acc[t * hop + i] += buf[i].re / n as f64 * w;
            }
        }
        let x: Vec<f64> = (0..spec.samples)
            .map(|s| {
                let p = s + n / 2;
                if norm[p] > 0.0 {
                    acc[p] / norm[p]
                } else {
                    0.0
                }
            })
            .collect();
        out.push(x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cfg(n: usize, hop: usize) -> StftConfig {
        StftConfig {
            frame_len: n,
            hop,
            sample_rate: 8000,
        }
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn framing_counts() {
        assert_eq!(StftConfig::full_scale().bins(), 2049);
        assert_eq!(StftConfig::full_scale().frames_in(6.0), 259);
        assert_eq!(StftConfig::toy().bins(), 65);
    }

    #[test]
    fn non_cola_hop_is_rejected() {
        assert!(cfg(512, 128).validate().is_ok());
        assert!(cfg(512, 300).validate().is_err());
        assert!(cfg(512, 512).validate().is_err());
        assert!(stft(&[vec![0.0; 100]], &cfg(512, 300)).is_err());
    }

    #[test]
    fn white_noise_round_trip() {
        let x = noise(4000, 1);
        let c = cfg(512, 128);
        let y = istft(&stft(std::slice::from_ref(&x), &c).unwrap()).unwrap();
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = x.iter().zip(&y[0]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-6 * peak, "{err}");
    }

    #[test]
    fn constant_signal_lands_in_bin_zero() {
        let c = cfg(128, 32);
        let s = stft(&[vec![1.0; 1000]], &c).unwrap();
        let t = 10;
        let total: f64 = (0..c.bins()).map(|f| s.at(0, t, f).norm_sqr()).sum();
        assert!(s.at(0, t, 0).norm_sqr() > 0.6 * total);
        assert!(s.at(0, t, 2).norm() < 1e-9);
    }

    #[test]
    fn exact_bin_sinusoid_has_one_dominant_bin() {
        let c = cfg(128, 32);
        let k = 9;
        let x: Vec<f64> = (0..2000)
            .map(|i| (2.0 * PI * k as f64 * i as f64 / 128.0).sin())
            .collect();
        let s = stft(&[x], &c).unwrap();
        for t in 5..50 {
            let best = (0..c.bins()).max_by(|&a, &b| s.at(0, t, a).norm().total_cmp(&s.at(0, t, b).norm())).unwrap();
            assert_eq!(best, k);
        }
    }

    #[test]
    fn linearity() {
        let c = cfg(128, 32);
        let (x, y) = (noise(700, 2), noise(700, 3));
        let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let (sx, sy, sm) = (stft(&[x], &c).unwrap(), stft(&[y], &c).unwrap(), stft(&[mix], &c).unwrap());
        for i in 0..sm.data.len() {
            assert!((sm.data[i] - (sx.data[i] * 2.0 - sy.data[i] * 0.5)).norm() < 1e-10);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let c = cfg(128, 32);
        let x = noise(1000, 4);
        let s = stft(std::slice::from_ref(&x), &c).unwrap();
        let w = c.window();
        for t in 4..25 {
            let time: f64 = (0..128).map(|i| (x[t * 32 + i - 64] * w[i]).powi(2)).sum();
            let full: f64 = (0..128)
                .map(|k| if k < c.bins() { s.at(0, t, k) } else { s.at(0, t, 128 - k).conj() }.norm_sqr())
                .sum();
            assert!((full / time - 128.0).abs() < 1e-8 * 128.0);
        }
    }

    #[test]
    fn stereo_and_magnitude_replacement() {
        let c = cfg(128, 32);
        let wave = vec![noise(500, 5), noise(500, 6)];
        let s = stft(&wave, &c).unwrap();
        let same = s.with_magnitude(&s.magnitude()).unwrap();
        let back = istft(&same).unwrap();
        for ch in 0..2 {
            for (a, b) in wave[ch].iter().zip(&back[ch]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
