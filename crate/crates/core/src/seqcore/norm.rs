use rand::Rng;

use super::{Bound, Ctx};
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{ParamSet, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Group normalization with a single group: every frame is normalized over
/// all of its features, then scaled and shifted per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm1 {
    pub path: String,
    pub features: usize,
    pub eps: f64,
}

impl GroupNorm1 {
    pub fn new(path: impl Into<String>, features: usize) -> Self {
        Self {
            path: path.into(),
            features,
            eps: NORM_EPS,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, _rng: &mut R) -> Result<()> {
        params.insert(format!("{}.gamma", self.path), Tensor::ones(vec![self.features]))?;
        params.insert(format!("{}.beta", self.path), Tensor::zeros(vec![self.features]))
    }

    pub fn param_count(&self) -> usize {
        2 * self.features
    }

    pub fn apply<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.features) {
            return Err(Error::shape("group_norm", &shape, &[self.features]));
        }
        if self.features < 2 {
            return Err(Error::invalid("group_norm", "needs at least two features"));
        }
        x.standardize_rows(self.eps)?
            .mul(params.get(&format!("{}.gamma", self.path))?)?
            .add(params.get(&format!("{}.beta", self.path))?)
    }
}

/// Batch normalization over the frames of one sequence.
///
/// Training mode normalizes with the statistics of the current sequence and
/// reports them through [`Ctx::stats`]; evaluation mode uses the frozen
/// running statistics stored in the context buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub path: String,
    pub features: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(path: impl Into<String>, features: usize) -> Self {
        Self {
            path: path.into(),
            features,
            eps: NORM_EPS,
            momentum: 0.1,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, _rng: &mut R) -> Result<()> {
        params.insert(format!("{}.gamma", self.path), Tensor::ones(vec![self.features]))?;
        params.insert(format!("{}.beta", self.path), Tensor::zeros(vec![self.features]))
    }

    pub fn init_buffers(&self, buffers: &mut ParamSet) -> Result<()> {
        buffers.insert(self.mean_path(), Tensor::zeros(vec![self.features]))?;
        buffers.insert(self.var_path(), Tensor::ones(vec![self.features]))
    }

    pub fn mean_path(&self) -> String {
        format!("{}.running_mean", self.path)
    }

    pub fn var_path(&self) -> String {
        format!("{}.running_var", self.path)
    }

    pub fn param_count(&self) -> usize {
        2 * self.features
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.features {
            return Err(Error::shape("batch_norm", &shape, &[self.features]));
        }
        let tape = ctx.params.tape();
        let normalized = if ctx.train {
            let xv = x.value();
            let frames = shape[0];
            let mut mean = vec![0.0; self.features];
            let mut var = vec![0.0; self.features];
            for t in 0..frames {
                for (f, m) in mean.iter_mut().enumerate() {
                    *m += xv.at2(t, f) / frames as f64;
                }
            }
            for t in 0..frames {
                for (f, v) in var.iter_mut().enumerate() {
                    let d = xv.at2(t, f) - mean[f];
                    *v += d * d;
                }
            }
            // running variance tracks the unbiased estimate
            let unbiased: Vec<f64> = var.iter().map(|v| v / (frames.max(2) - 1) as f64).collect();
            ctx.stats.record(&self.path, mean, unbiased);
            x.transpose()?.standardize_rows(self.eps)?.transpose()?
        } else {
            let mean = ctx.buffers.get(&self.mean_path())?;
            let var = ctx.buffers.get(&self.var_path())?;
            let inv = var.map(|v| 1.0 / (v + self.eps).sqrt());
            x.sub(tape.constant(mean.clone()))?.mul(tape.constant(inv))?
        };
        normalized
            .mul(ctx.params.get(&format!("{}.gamma", self.path))?)?
            .add(ctx.params.get(&format!("{}.beta", self.path))?)
    }

    /// Fold one observed batch into the running statistics.
    pub fn update_running(&self, buffers: &mut ParamSet, mean: &[f64], var: &[f64]) -> Result<()> {
        let m = self.momentum;
        let rm = buffers.get(&self.mean_path())?;
        let rv = buffers.get(&self.var_path())?;
        let new_m: Vec<f64> = rm.data().iter().zip(mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
        let new_v: Vec<f64> = rv.data().iter().zip(var).map(|(r, b)| (1.0 - m) * r + m * b).collect();
        buffers.set(&self.mean_path(), Tensor::vector(new_m))?;
        buffers.set(&self.var_path(), Tensor::vector(new_v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gn_params(p: usize) -> (GroupNorm1, ParamSet) {
        let gn = GroupNorm1::new("gn", p);
        let mut ps = ParamSet::new();
        gn.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (gn, ps)
    }

    #[test]
    fn constant_frame_maps_to_zero() {
        let (gn, ps) = gn_params(4);
        let tape = Tape::new();
        let b = Bound::constants(&tape, &ps);
        let y = gn.apply(&b, tape.constant(Tensor::full(vec![3, 4], 2.5))).unwrap();
        assert!(y.value().max_abs() == 0.0);
    }

    #[test]
    fn per_frame_statistics() {
        let (gn, ps) = gn_params(16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // eps = 1e-5 only disappears from the variance once the frame
        // variance is large, so feed frames with variance around 100.
        let x = Tensor::randn(vec![7, 16], &mut rng).scale(10.0);
        let tape = Tape::new();
        let b = Bound::constants(&tape, &ps);
        let y = gn.apply(&b, tape.constant(x)).unwrap().value();
        for t in 0..7 {
            let row: Vec<f64> = (0..16).map(|f| y.at2(t, f)).collect();
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-8);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn batch_norm_train_and_eval() {
        let bn = BatchNorm::new("bn", 3);
        let mut ps = ParamSet::new();
        let mut buf = ParamSet::new();
        bn.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        bn.init_buffers(&mut buf).unwrap();
        let x = Tensor::new(vec![4, 3], vec![1.0, 2.0, 0.0, 3.0, 2.0, 0.0, 5.0, 2.0, 0.0, 7.0, 2.0, 0.0]).unwrap();
        let tape = Tape::new();
        let b = Bound::constants(&tape, &ps);
        let ctx = Ctx::new(&b, &buf, true);
        let y = bn.apply(&ctx, tape.constant(x.clone())).unwrap().value();
        // first feature has mean 4, biased variance 5
        assert!((y.at2(0, 0) + 3.0 / (5.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert_eq!(y.at2(2, 1), 0.0);
        let stats = ctx.stats.take();
        let (mean, var) = &stats["bn"];
        assert_eq!(mean, &vec![4.0, 2.0, 0.0]);
        assert!((var[0] - 20.0 / 3.0).abs() < 1e-12);
        bn.update_running(&mut buf, mean, var).unwrap();
        assert!((buf.get("bn.running_mean").unwrap().data()[0] - 0.4).abs() < 1e-15);

        let ctx = Ctx::new(&b, &buf, false);
        let zero = bn.apply(&ctx, tape.constant(Tensor::zeros(vec![2, 3]))).unwrap().value();
        assert!((zero.at2(0, 0) + 0.4 / (buf.get("bn.running_var").unwrap().data()[0] + 1e-5).sqrt()).abs() < 1e-12);
    }
}
