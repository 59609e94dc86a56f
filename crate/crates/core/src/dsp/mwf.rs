use num_complex::Complex64;

use super::Spectrogram;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative size of the diagonal loading `δ = MWF_REGULARIZATION · tr(Σ R)`.
pub const MWF_REGULARIZATION: f64 = 1e-10;

type Mat = Vec<Complex64>;

fn c0() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

fn identity(n: usize) -> Mat {
    let mut m = vec![c0(); n * n];
    for i in 0..n {
        m[i * n + i] = Complex64::new(1.0, 0.0);
    }
    m
}

fn matmul(a: &Mat, b: &Mat, n: usize) -> Mat {
    let mut out = vec![c0(); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

fn matvec(a: &Mat, x: &[Complex64], n: usize) -> Vec<Complex64> {
    (0..n).map(|i| (0..n).map(|k| a[i * n + k] * x[k]).sum()).collect()
}

/// Inverse by Gauss–Jordan elimination with partial pivoting.
fn invert(a: &Mat, n: usize) -> Option<Mat> {
    let mut m = a.clone();
    let mut inv = identity(n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| m[x * n + col].norm().total_cmp(&m[y * n + col].norm()))?;
        if m[pivot * n + col].norm() == 0.0 {
            return None;
        }
        for j in 0..n {
            m.swap(col * n + j, pivot * n + j);
            inv.swap(col * n + j, pivot * n + j);
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                if f != c0() {
                    for j in 0..n {
                        let (mv, iv) = (m[col * n + j], inv[col * n + j]);
                        m[r * n + j] -= f * mv;
                        inv[r * n + j] -= f * iv;
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Wiener gains for one time–frequency point. The loading `δI` is split
/// evenly across sources so the gains sum to the identity.
fn gains(covs: &[Mat], n: usize) -> Vec<Mat> {
    let j = covs.len();
    let mut total = vec![c0(); n * n];
    for r in covs {
        for (t, v) in total.iter_mut().zip(r) {
            *t += v;
        }
    }
    let trace: f64 = (0..n).map(|i| total[i * n + i].re).sum();
    if !(trace > 0.0) {
        let share = Complex64::new(1.0 / j as f64, 0.0);
        return (0..j).map(|_| identity(n).into_iter().map(|v| v * share).collect()).collect();
    }
    let load = MWF_REGULARIZATION * trace;
    for i in 0..n {
        total[i * n + i] += load;
    }
    let inv = invert(&total, n).expect("diagonally loaded covariance is invertible");
    covs.iter()
        .map(|r| {
            let mut rl = r.clone();
            for i in 0..n {
                rl[i * n + i] += load / j as f64;
            }
            matmul(&rl, &inv, n)
        })
        .collect()
}

/// Multichannel Wiener filter with one EM refinement of the spatial
/// covariances. See [`mwf_with_iterations`].
pub fn mwf(source_magnitudes: &[Tensor], mixture: &Spectrogram) -> Result<Vec<Spectrogram>> {
    mwf_with_iterations(source_magnitudes, mixture, 1)
}

/// Multichannel Wiener filter.
///
/// Each source `j` has, per frame and bin, the power `v_j` (channel mean of
/// its squared magnitude estimate) and a per-bin spatial covariance `Φ_j`
/// starting at the identity. Each EM iteration computes posterior means
/// `ŝ_j = W_j x` with `W_j = R_j (Σ_k R_k)⁻¹`, `R_j = v_j Φ_j`, and
/// re-estimates `Φ_j = Σ_t (ŝ_j ŝ_jᴴ + (I − W_j) R_j) / Σ_t v_j`. The
/// returned estimates use the final covariances and always sum to the
/// mixture.
pub fn mwf_with_iterations(source_magnitudes: &[Tensor], mixture: &Spectrogram, iterations: usize) -> Result<Vec<Spectrogram>> {
    if source_magnitudes.is_empty() {
        return Err(Error::invalid("mwf", "at least one source is required"));
    }
    let (ch, frames, bins) = (mixture.channels, mixture.frames, mixture.bins());
    let shape = [ch, frames, bins];
    for m in source_magnitudes {
        if m.shape() != shape {
            return Err(Error::shape("mwf", &shape, m.shape()));
        }
        if m.data().iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("mwf", "source magnitudes must be finite and nonnegative"));
        }
    }
    let nsrc = source_magnitudes.len();
    // v[j][t * bins + f]
    let power: Vec<Vec<f64>> = source_magnitudes
        .iter()
        .map(|m| {
            let d = m.data();
            (0..frames * bins)
                .map(|tf| (0..ch).map(|c| d[c * frames * bins + tf].powi(2)).sum::<f64>() / ch as f64)
                .collect()
        })
        .collect();
    let mut spatial: Vec<Vec<Mat>> = vec![vec![identity(ch); bins]; nsrc];
    let mix_at = |t: usize, f: usize| -> Vec<Complex64> { (0..ch).map(|c| mixture.at(c, t, f)).collect() };
    let covs_at = |spatial: &Vec<Vec<Mat>>, t: usize, f: usize| -> Vec<Mat> {
        (0..nsrc)
            .map(|j| spatial[j][f].iter().map(|v| v * power[j][t * bins + f]).collect())
            .collect()
    };

    for _ in 0..iterations {
        let mut next = spatial.clone();
        for f in 0..bins {
            let mut acc = vec![vec![c0(); ch * ch]; nsrc];
            let mut weight = vec![0.0; nsrc];
            for t in 0..frames {
                let covs = covs_at(&spatial, t, f);
                let w = gains(&covs, ch);
                let x = mix_at(t, f);
                for j in 0..nsrc {
                    let s = matvec(&w[j], &x, ch);
                    let mut i_w = identity(ch);
                    for (a, b) in i_w.iter_mut().zip(&w[j]) {
                        *a -= b;
                    }
                    let post = matmul(&i_w, &covs[j], ch);
                    for r in 0..ch {
                        for c in 0..ch {
                            acc[j][r * ch + c] += s[r] * s[c].conj() + post[r * ch + c];
                        }
                    }
                    weight[j] += power[j][t * bins + f];
                }
            }
            for j in 0..nsrc {
                if weight[j] > 0.0 {
                    next[j][f] = acc[j].iter().map(|v| v / weight[j]).collect();
                }
            }
        }
        spatial = next;
    }

    let mut out = vec![Spectrogram::zeros(mixture.config, ch, frames, mixture.samples); nsrc];
    for t in 0..frames {
        for f in 0..bins {
            let w = gains(&covs_at(&spatial, t, f), ch);
            let x = mix_at(t, f);
            for j in 0..nsrc {
                let s = matvec(&w[j], &x, ch);
                for c in 0..ch {
                    let i = out[j].index(c, t, f);
                    out[j].data[i] = s[c];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mixture(seed: u64, channels: usize) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wave: Vec<Vec<f64>> = (0..channels).map(|_| Tensor::randn(vec![400], &mut rng).into_data()).collect();
        stft(&wave, &StftConfig::toy()).unwrap()
    }

    fn max_conservation_error(est: &[Spectrogram], mix: &Spectrogram) -> f64 {
        (0..mix.data.len())
            .map(|i| (est.iter().map(|e| e.data[i]).sum::<Complex64>() - mix.data[i]).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn conservation_with_random_powers() {
        for ch in [1, 2] {
            let mix = mixture(ch as u64, ch);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let shape = vec![ch, mix.frames, mix.bins()];
            let mags: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(shape.clone(), 1.0, &mut rng).map(f64::abs)).collect();
            let est = mwf(&mags, &mix).unwrap();
            assert!(max_conservation_error(&est, &mix) < 1e-10);
        }
    }

    #[test]
    fn all_zero_sources_split_uniformly() {
        let mix = mixture(3, 2);
        let zero = Tensor::zeros(vec![2, mix.frames, mix.bins()]);
        let est = mwf(&[zero.clone(), zero], &mix).unwrap();
        assert!(max_conservation_error(&est, &mix) < 1e-12);
        for i in 0..mix.data.len() {
            assert!((est[0].data[i] - mix.data[i] * 0.5).norm() < 1e-12);
        }
    }

    #[test]
    fn single_active_source_takes_everything() {
        let mix = mixture(4, 2);
        let on = mix.magnitude();
        let off = Tensor::zeros(on.shape().to_vec());
        let est = mwf(&[on, off], &mix).unwrap();
        for i in 0..mix.data.len() {
            assert!((est[0].data[i] - mix.data[i]).norm() < 1e-8 * (1.0 + mix.data[i].norm()));
            assert!(est[1].data[i].norm() < 1e-8 * (1.0 + mix.data[i].norm()));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mix = mixture(5, 1);
        assert!(mwf(&[], &mix).is_err());
        assert!(mwf(&[Tensor::zeros(vec![1, 2, 3])], &mix).is_err());
        let neg = Tensor::full(vec![1, mix.frames, mix.bins()], -1.0);
        assert!(mwf(&[neg], &mix).is_err());
    }

    #[test]
    fn inverse_of_small_matrix() {
        let a: Mat = vec![
            Complex64::new(2.0, 1.0),
            Complex64::new(0.5, 0.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(3.0, 0.0),
        ];
        let inv = invert(&a, 2).unwrap();
        let p = matmul(&a, &inv, 2);
        for (x, y) in p.iter().zip(identity(2)) {
            assert!((x - y).norm() < 1e-14);
        }
    }
}
