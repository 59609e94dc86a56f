use super::channel_len;
use crate::error::{Error, Result};

/// Ceiling applied to [`sdr`] for (near-)exact estimates.
pub const SDR_CAP_DB: f64 = 80.0;

/// Signal-to-distortion ratio `10 log10(‖s‖² / ‖s − ŝ‖²)` in dB, over all
/// channels, capped at [`SDR_CAP_DB`].
pub fn sdr(reference: &[Vec<f64>], estimate: &[Vec<f64>]) -> Result<f64> {
    let n = channel_len("sdr", reference)?;
    let m = channel_len("sdr", estimate)?;
    if reference.len() != estimate.len() || n != m {
        return Err(Error::shape("sdr", &[reference.len(), n], &[estimate.len(), m]));
    }
    let mut signal = 0.0;
    let mut distortion = 0.0;
    for (r, e) in reference.iter().zip(estimate) {
        for (a, b) in r.iter().zip(e) {
            signal += a * a;
            distortion += (a - b) * (a - b);
        }
    }
    if signal == 0.0 {
        return Err(Error::invalid("sdr", "reference signal is all zeros"));
    }
    if distortion == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (signal / distortion).log10()).min(SDR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_estimate_hits_cap() {
        let s = vec![vec![0.3, -1.0, 2.0]];
        assert_eq!(sdr(&s, &s).unwrap(), SDR_CAP_DB);
    }

    #[test]
    fn half_scale_is_six_db() {
        let s = vec![vec![0.3, -1.0, 2.0], vec![1.0, 0.5, 0.0]];
        let h: Vec<Vec<f64>> = s.iter().map(|c| c.iter().map(|v| 0.5 * v).collect()).collect();
        assert!((sdr(&s, &h).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn zero_reference_and_length_mismatch_are_errors() {
        assert!(sdr(&[vec![0.0; 3]], &[vec![1.0; 3]]).is_err());
        assert!(sdr(&[vec![1.0; 3]], &[vec![1.0; 4]]).is_err());
    }
}
