use std::path::Path;

use super::channel_len;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Wave {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

fn err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Wav {
        offset,
        msg: msg.into(),
    }
}

/// Encode as a RIFF/WAVE byte stream. PCM16 samples are clipped to
/// `[−1, 1]` and rounded.
pub fn write_wav_bytes(wave: &Wave, format: SampleFormat) -> Result<Vec<u8>> {
    let frames = channel_len("write_wav", &wave.channels)?;
    let ch = wave.channels.len();
    let (tag, bytes_per) = match format {
        SampleFormat::Pcm16 => (1u16, 2usize),
        SampleFormat::Float32 => (3u16, 4usize),
    };
    let data_len = frames * ch * bytes_per;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(ch as u16).to_le_bytes());
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * (ch * bytes_per) as u32).to_le_bytes());
    out.extend_from_slice(&((ch * bytes_per) as u16).to_le_bytes());
    out.extend_from_slice(&((bytes_per * 8) as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for t in 0..frames {
        for c in &wave.channels {
            let v = c[t];
            match format {
                SampleFormat::Pcm16 => {
                    let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                SampleFormat::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    Ok(out)
}

fn u16_at(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| err(at, "unexpected end of file"))
}

fn u32_at(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| err(at, "unexpected end of file"))
}

/// Decode a RIFF/WAVE byte stream holding 16-bit PCM or 32-bit float
/// samples. Unknown chunks are skipped.
pub fn read_wav_bytes(b: &[u8]) -> Result<Wave> {
    if b.get(0..4) != Some(b"RIFF") {
        return Err(err(0, "missing RIFF tag"));
    }
    if b.get(8..12) != Some(b"WAVE") {
        return Err(err(8, "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt: Option<(SampleFormat, usize, u32)> = None;
    loop {
        if pos + 8 > b.len() {
            return Err(err(pos, "no data chunk"));
        }
        let id = &b[pos..pos + 4];
        let size = u32_at(b, pos + 4)? as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 || body + size > b.len() {
                return Err(err(pos + 4, "truncated fmt chunk"));
            }
            let mut tag = u16_at(b, body)?;
            let ch = u16_at(b, body + 2)? as usize;
            let rate = u32_at(b, body + 4)?;
            let bits = u16_at(b, body + 14)?;
            if tag == 0xFFFE {
                if size < 40 {
                    return Err(err(body, "truncated extensible fmt chunk"));
                }
                tag = u16_at(b, body + 24)?;
            }
            let format = match (tag, bits) {
                (1, 16) => SampleFormat::Pcm16,
                (3, 32) => SampleFormat::Float32,
                _ => return Err(err(body, format!("unsupported encoding: format tag {tag}, {bits} bits"))),
            };
            if ch == 0 {
                return Err(err(body + 2, "zero channels"));
            }
            fmt = Some((format, ch, rate));
        } else if id == b"data" {
            let (format, ch, rate) = fmt.ok_or_else(|| err(pos, "data chunk before fmt chunk"))?;
            let width = match format {
                SampleFormat::Pcm16 => 2,
                SampleFormat::Float32 => 4,
            };
            if body + size > b.len() {
                return Err(err(b.len(), format!("data chunk declares {size} bytes, only {} present", b.len() - body)));
            }
            if !size.is_multiple_of(width * ch) {
                return Err(err(pos + 4, "data size is not a whole number of frames"));
            }
            let frames = size / (width * ch);
            let mut channels = vec![Vec::with_capacity(frames); ch];
            for t in 0..frames {
                for (c, buf) in channels.iter_mut().enumerate() {
                    let at = body + (t * ch + c) * width;
                    let v = match format {
                        SampleFormat::Pcm16 => i16::from_le_bytes([b[at], b[at + 1]]) as f64 / 32767.0,
                        SampleFormat::Float32 => f32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as f64,
                    };
                    buf.push(v);
                }
            }
            return Ok(Wave {
                sample_rate: rate,
                channels,
            });
        }
        pos = body + size + (size & 1);
    }
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Wave, format: SampleFormat) -> Result<()> {
    std::fs::write(path, write_wav_bytes(wave, format)?)?;
    Ok(())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Wave> {
    read_wav_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave() -> Wave {
        Wave {
            sample_rate: 8000,
            channels: vec![
                (0..100).map(|i| ((i as f64) * 0.1).sin() as f32 as f64).collect(),
                (0..100).map(|i| ((i as f64) * 0.07).cos() as f32 as f64 * 0.5).collect(),
            ],
        }
    }

    #[test]
    fn float32_round_trip_is_exact() {
        let w = wave();
        let bytes = write_wav_bytes(&w, SampleFormat::Float32).unwrap();
        let back = read_wav_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(write_wav_bytes(&back, SampleFormat::Float32).unwrap(), bytes);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let w = wave();
        let back = read_wav_bytes(&write_wav_bytes(&w, SampleFormat::Pcm16).unwrap()).unwrap();
        for (a, b) in w.channels.iter().flatten().zip(back.channels.iter().flatten()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn truncated_data_is_rejected_with_offset() {
        let mut bytes = write_wav_bytes(&wave(), SampleFormat::Pcm16).unwrap();
        bytes.truncate(bytes.len() - 10);
        match read_wav_bytes(&bytes) {
            Err(Error::Wav { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(read_wav_bytes(b"RIFX"), Err(Error::Wav { offset: 0, .. })));
        let mut bytes = write_wav_bytes(&wave(), SampleFormat::Pcm16).unwrap();
        bytes[34] = 24; // bits per sample
        assert!(matches!(read_wav_bytes(&bytes), Err(Error::Wav { offset: 20, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        write_wav(&p, &wave(), SampleFormat::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), wave());
    }
}
