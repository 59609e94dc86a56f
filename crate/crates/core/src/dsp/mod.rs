//! Signal processing around the networks: framing and inverse framing,
//! multichannel Wiener filtering, the SDR metric, synthetic scenes and WAV
//! files.
//!
//! Multichannel audio is a `Vec` of equal-length channel buffers.

mod mwf;
mod scene;
mod sdr;
mod stft;
mod wav;

pub use mwf::{mwf, mwf_with_iterations, MWF_REGULARIZATION};
pub use scene::{generate_scene, Scene, SceneSpec, SourceKind, SourceSpec};
pub use sdr::{sdr, SDR_CAP_DB};
pub use stft::{istft, stft, Spectrogram, StftConfig};
pub use wav::{read_wav, read_wav_bytes, write_wav, write_wav_bytes, SampleFormat, Wave};

use crate::error::{Error, Result};

/// Check that every channel has the same, nonzero length.
pub(crate) fn channel_len(op: &'static str, wave: &[Vec<f64>]) -> Result<usize> {
    let first = wave.first().ok_or_else(|| Error::invalid(op, "no channels"))?;
    for c in wave {
        if c.len() != first.len() {
            return Err(Error::shape(op, &[first.len()], &[c.len()]));
        }
    }
    Ok(first.len())
}
