use std::sync::Arc;

use rand::Rng;

use super::spec::{ModelSpec, Variant};
use crate::deq::{DeqLayer, DeqMode, ForwardSolver};
use crate::error::{Error, Result};
use crate::seqcore::{BatchNorm, Bound, Ctx, FThetaCore, Fc, UmxSequenceModel};
use crate::solvers::{SolverConfig, SolverTrace};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

/// Linear-solve settings of the implicit backward pass during training.
pub const TRAIN_BACKWARD_CONFIG: SolverConfig = SolverConfig {
    alpha: 1.0,
    epsilon: 1e-6,
    l_max: 60,
};

#[derive(Clone, Debug)]
enum Sequence {
    Recurrent(UmxSequenceModel),
    Equilibrium {
        core: FThetaCore,
        layer: DeqLayer,
        skip_fc: Fc,
        skip_bn: BatchNorm,
    },
}

/// Output of one forward pass, laid out `frames × (channels · bins_total)`.
pub struct Forward<'t> {
    pub estimate: Var<'t>,
    pub mask: Var<'t>,
    /// Solver traces of the equilibrium block, one per clip.
    pub traces: Vec<SolverTrace>,
    /// Row range of each clip in the stacked outputs.
    pub bounds: Vec<(usize, usize)>,
}

/// One target's separation network.
#[derive(Clone, Debug)]
pub struct SeparatorModel {
    pub spec: ModelSpec,
    pub target: String,
    pub params: ParamSet,
    /// Batch-normalization running statistics.
    pub buffers: ParamSet,
    fc1: Fc,
    bn1: BatchNorm,
    seq: Sequence,
    fc3: Fc,
    bn3: BatchNorm,
}

/// `channels × frames × bins` to `frames × (channels · bins)`, keeping the
/// first `keep` bins of each channel.
pub fn to_frames(mag: &Tensor, keep: usize) -> Result<Tensor> {
    let s = mag.shape();
    if s.len() != 3 || keep > s[2] {
        return Err(Error::shape("to_frames", s, &[keep]));
    }
    let (c, t, f) = (s[0], s[1], s[2]);
    let d = mag.data();
    let mut out = Vec::with_capacity(t * c * keep);
    for ti in 0..t {
        for ci in 0..c {
            let start = (ci * t + ti) * f;
            out.extend_from_slice(&d[start..start + keep]);
        }
    }
    Tensor::new(vec![t, c * keep], out)
}

/// Inverse of [`to_frames`] for full-width frames.
pub fn from_frames(frames: &Tensor, channels: usize) -> Result<Tensor> {
    let (t, w) = frames.dims2()?;
    if channels == 0 || w % channels != 0 {
        return Err(Error::shape("from_frames", frames.shape(), &[channels]));
    }
    let f = w / channels;
    let d = frames.data();
    let mut out = vec![0.0; w * t];
    for ti in 0..t {
        for ci in 0..channels {
            let src = ti * w + ci * f;
            out[(ci * t + ti) * f..(ci * t + ti + 1) * f].copy_from_slice(&d[src..src + f]);
        }
    }
    Tensor::new(vec![channels, t, f], out)
}

fn tile<'t>(v: Var<'t>, times: usize) -> Result<Var<'t>> {
    if times == 1 {
        Ok(v)
    } else {
        v.tape().concat_last(&vec![v; times])
    }
}

impl SeparatorModel {
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, target: &str, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (p, c) = (spec.hidden, spec.channels);
        let fc1 = Fc::new("fc1", c * spec.bins_cropped, p, false);
        let bn1 = BatchNorm::new("bn1", p);
        let fc3 = Fc::new("fc3", p, c * spec.bins_total, false);
        let bn3 = BatchNorm::new("bn3", c * spec.bins_total);
        let seq = if let Some(layers) = spec.lstm_layers {
            Sequence::Recurrent(UmxSequenceModel::new("seq", p, layers)?)
        } else {
            let core = FThetaCore::new("core", p)?;
            let mode = match spec.variant {
                Variant::WtUmx => DeqMode::WeightTied {
                    unroll: spec.unroll_l.unwrap_or(0),
                },
                _ => Self::equilibrium_mode(spec)?,
            };
            Sequence::Equilibrium {
                layer: DeqLayer::new(Arc::new(core.clone()), mode)?,
                core,
                skip_fc: Fc::new("seq.fc", 2 * p, p, false),
                skip_bn: BatchNorm::new("seq.bn", p),
            }
        };
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        params.insert("input_mean", Tensor::zeros(vec![spec.bins_cropped]))?;
        params.insert("input_scale", Tensor::ones(vec![spec.bins_cropped]))?;
        fc1.init(&mut params, rng)?;
        bn1.init(&mut params, rng)?;
        bn1.init_buffers(&mut buffers)?;
        match &seq {
            Sequence::Recurrent(m) => m.init(&mut params, &mut buffers, rng)?,
            Sequence::Equilibrium {
                core, skip_fc, skip_bn, ..
            } => {
                core.init(&mut params, rng)?;
                skip_fc.init(&mut params, rng)?;
                skip_bn.init(&mut params, rng)?;
                skip_bn.init_buffers(&mut buffers)?;
            }
        }
        fc3.init(&mut params, rng)?;
        bn3.init(&mut params, rng)?;
        bn3.init_buffers(&mut buffers)?;
        params.insert("output_scale", Tensor::ones(vec![spec.bins_total]))?;
        params.insert("output_mean", Tensor::ones(vec![spec.bins_total]))?;
        Ok(Self {
            spec: spec.clone(),
            target: target.to_string(),
            params,
            buffers,
            fc1,
            bn1,
            seq,
            fc3,
            bn3,
        })
    }

    fn equilibrium_mode(spec: &ModelSpec) -> Result<DeqMode> {
        Ok(DeqMode::Equilibrium {
            solver: ForwardSolver::Broyden,
            config: spec
                .solver_config
                .ok_or_else(|| Error::Config("deq_umx requires a solver config".into()))?,
            backward: spec
                .backward_mode
                .ok_or_else(|| Error::Config("deq_umx requires a backward mode".into()))?,
            backward_config: TRAIN_BACKWARD_CONFIG,
        })
    }

    /// Current mode of the equilibrium block, if the model has one.
    pub fn deq_mode(&self) -> Option<DeqMode> {
        match &self.seq {
            Sequence::Equilibrium { layer, .. } => Some(layer.mode()),
            Sequence::Recurrent(_) => None,
        }
    }

    /// Switch the equilibrium block between weight-tied and equilibrium
    /// operation. Parameters are untouched.
    pub fn set_deq_mode(&mut self, mode: DeqMode) -> Result<()> {
        match &mut self.seq {
            Sequence::Equilibrium { layer, .. } => layer.set_mode(mode),
            Sequence::Recurrent(_) => Err(Error::invalid("set_deq_mode", "model has no equilibrium block")),
        }
    }

    /// The equilibrium mode the spec prescribes (for deq_umx after
    /// pretraining).
    pub fn spec_deq_mode(&self) -> Result<DeqMode> {
        Self::equilibrium_mode(&self.spec)
    }

    /// Set the input normalization from example magnitudes so that each
    /// cropped bin has zero mean and unit scale.
    pub fn fit_normalization(&mut self, mixtures: &[Tensor]) -> Result<()> {
        let bc = self.spec.bins_cropped;
        let mut sum = vec![0.0; bc];
        let mut sq = vec![0.0; bc];
        let mut n = 0usize;
        for m in mixtures {
            let fr = to_frames(m, bc)?;
            let (t, w) = fr.dims2()?;
            for r in 0..t {
                for col in 0..w {
                    let v = fr.at2(r, col);
                    sum[col % bc] += v;
                    sq[col % bc] += v * v;
                }
            }
            n += t * (w / bc);
        }
        if n == 0 {
            return Err(Error::invalid("fit_normalization", "no frames"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| 1.0 / (s / n as f64 - m * m).max(0.0).sqrt().max(1e-4))
            .collect();
        self.params.set("input_mean", Tensor::vector(mean.iter().map(|m| -m).collect()))?;
        self.params.set("input_scale", Tensor::vector(scale))
    }

    /// Make the mask exactly one everywhere.
    pub fn make_identity_mask(&mut self) -> Result<()> {
        let w = self.params.get(&self.fc3.weight_path())?.shape().to_vec();
        self.params.set(&self.fc3.weight_path(), Tensor::zeros(w))?;
        let nb = self.spec.channels * self.spec.bins_total;
        self.params.set("bn3.gamma", Tensor::zeros(vec![nb]))?;
        self.params.set("bn3.beta", Tensor::zeros(vec![nb]))?;
        self.params.set("output_scale", Tensor::zeros(vec![self.spec.bins_total]))?;
        self.params.set("output_mean", Tensor::ones(vec![self.spec.bins_total]))
    }

    fn check_input(&self, mix: &Tensor) -> Result<()> {
        let s = mix.shape();
        if s.len() != 3 || s[0] != self.spec.channels || s[2] != self.spec.bins_total || s[1] == 0 {
            return Err(Error::SpecMismatch(format!(
                "expected magnitudes of shape [{}, T, {}], got {:?}",
                self.spec.channels, self.spec.bins_total, s
            )));
        }
        if mix.data().iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("forward_separate", "magnitudes must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Record the network on `ctx`'s tape for a `channels × frames × bins`
    /// mixture magnitude.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, mix: &Tensor) -> Result<Forward<'t>> {
        self.forward_batch(ctx, std::slice::from_ref(mix))
    }

    /// Record the network for a batch of mixtures. Frame-wise layers see the
    /// frames of all clips stacked, so batch normalization uses statistics
    /// over the whole batch; recurrent and equilibrium blocks run per clip.
    /// Outputs are stacked in the same order.
    pub fn forward_batch<'t>(&self, ctx: &Ctx<'_, 't>, mixes: &[Tensor]) -> Result<Forward<'t>> {
        if mixes.is_empty() {
            return Err(Error::invalid("forward", "empty batch"));
        }
        let tape = ctx.params.tape();
        let p = ctx.params;
        let c = self.spec.channels;
        let mut cropped = Vec::with_capacity(mixes.len());
        let mut full = Vec::with_capacity(mixes.len());
        let mut bounds = Vec::with_capacity(mixes.len());
        let mut rows = 0;
        for mix in mixes {
            self.check_input(mix)?;
            cropped.push(tape.constant(to_frames(mix, self.spec.bins_cropped)?));
            full.push(tape.constant(to_frames(mix, self.spec.bins_total)?));
            let t = mix.shape()[1];
            bounds.push((rows, rows + t));
            rows += t;
        }
        let stack = |parts: &[Var<'t>]| if parts.len() == 1 { Ok(parts[0]) } else { tape.concat_rows(parts) };
        let x = stack(&cropped)?
            .add(tile(p.get("input_mean")?, c)?)?
            .mul(tile(p.get("input_scale")?, c)?)?;
        let h = self.fc1.apply(p, x)?;
        let xs = self.bn1.apply(ctx, h)?.tanh()?;
        let clips = |v: Var<'t>| -> Result<Vec<Var<'t>>> {
            if bounds.len() == 1 {
                return Ok(vec![v]);
            }
            bounds.iter().map(|&(a, b)| v.slice_rows(a, b)).collect()
        };
        let mut traces = Vec::new();
        let (inner, skip_fc, skip_bn) = match &self.seq {
            Sequence::Recurrent(m) => {
                let outs = clips(xs)?.into_iter().map(|x| m.recurrent(p, x)).collect::<Result<Vec<_>>>()?;
                (stack(&outs)?, &m.skip_fc, &m.skip_bn)
            }
            Sequence::Equilibrium {
                layer, skip_fc, skip_bn, ..
            } => {
                let mut outs = Vec::new();
                for x in clips(xs)? {
                    let out = layer.forward(p, x)?;
                    traces.push(out.trace);
                    outs.push(out.z_star);
                }
                (stack(&outs)?, skip_fc, skip_bn)
            }
        };
        let cat = tape.concat_last(&[xs, inner])?;
        let h = skip_bn.apply(ctx, skip_fc.apply(p, cat)?)?.relu()?;
        let y = self.fc3.apply(p, h)?;
        let y = self.bn3.apply(ctx, y)?;
        let mask = y
            .mul(tile(p.get("output_scale")?, c)?)?
            .add(tile(p.get("output_mean")?, c)?)?
            .relu()?;
        let estimate = mask.mul(stack(&full)?)?;
        Ok(Forward {
            estimate,
            mask,
            traces,
            bounds,
        })
    }

    /// Mean squared error between the estimate and the target over the
    /// cropped bins.
    pub fn loss<'t>(&self, estimate: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
        self.batch_loss(estimate, std::slice::from_ref(target))
    }

    /// Loss of a stacked batch estimate against its targets in order.
    pub fn batch_loss<'t>(&self, estimate: Var<'t>, targets: &[Tensor]) -> Result<Var<'t>> {
        let (bc, bt, c) = (self.spec.bins_cropped, self.spec.bins_total, self.spec.channels);
        let parts: Vec<Var<'t>> = (0..c)
            .map(|ci| estimate.slice_last(ci * bt, ci * bt + bc))
            .collect::<Result<_>>()?;
        let est = if c == 1 { parts[0] } else { estimate.tape().concat_last(&parts)? };
        let frames = targets.iter().map(|t| to_frames(t, bc)).collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(frames.iter().map(Tensor::len).sum());
        for f in &frames {
            data.extend_from_slice(f.data());
        }
        let rows = data.len() / (c * bc);
        let tgt = estimate.tape().constant(Tensor::new(vec![rows, c * bc], data)?);
        let d = est.sub(tgt)?;
        d.mul(d)?.mean()
    }

    /// Estimated source magnitude, `channels × frames × bins_total`, in
    /// evaluation mode.
    pub fn separate(&self, mix: &Tensor) -> Result<(Tensor, Option<SolverTrace>)> {
        let tape = Tape::new();
        let b = Bound::constants(&tape, &self.params);
        let ctx = Ctx::new(&b, &self.buffers, false);
        let out = self.forward(&ctx, mix)?;
        Ok((from_frames(&out.estimate.value(), self.spec.channels)?, out.traces.into_iter().next()))
    }

    /// Loss on one example in evaluation mode.
    pub fn eval_loss(&self, mix: &Tensor, target: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let b = Bound::constants(&tape, &self.params);
        let ctx = Ctx::new(&b, &self.buffers, false);
        let out = self.forward(&ctx, mix)?;
        self.loss(out.estimate, target)?.value().item()
    }

    /// Loss, parameter gradients and iteration trace on one example in
    /// training mode. Batch statistics are folded into the running
    /// statistics.
    pub fn train_step(&mut self, mix: &Tensor, target: &Tensor) -> Result<(f64, ParamSet, Option<SolverTrace>)> {
        let (loss, grads, traces) = self.train_batch(std::slice::from_ref(mix), std::slice::from_ref(target))?;
        Ok((loss, grads, traces.into_iter().next()))
    }

    /// Loss, gradients and per-clip traces of one minibatch in training
    /// mode. All clips must have the same number of frames.
    pub fn train_batch(&mut self, mixes: &[Tensor], targets: &[Tensor]) -> Result<(f64, ParamSet, Vec<SolverTrace>)> {
        if mixes.len() != targets.len() {
            return Err(Error::invalid("train_batch", "mixture and target counts differ"));
        }
        if mixes.windows(2).any(|w| w[0].shape() != w[1].shape()) {
            return Err(Error::invalid("train_batch", "clips in a batch must have equal shapes"));
        }
        let tape = Tape::new();
        let b = Bound::leaves(&tape, &self.params);
        let ctx = Ctx::new(&b, &self.buffers, true);
        let out = self.forward_batch(&ctx, mixes)?;
        let loss = self.batch_loss(out.estimate, targets)?;
        let value = loss.value().item()?;
        tape.backward(loss)?;
        let grads = b.grads();
        let stats = ctx.stats.take();
        for bn in self.batch_norms() {
            if let Some((m, v)) = stats.get(&bn.path) {
                bn.update_running(&mut self.buffers, m, v)?;
            }
        }
        Ok((value, grads, out.traces))
    }

    fn batch_norms(&self) -> Vec<BatchNorm> {
        let mut v = vec![self.bn1.clone(), self.bn3.clone()];
        match &self.seq {
            Sequence::Recurrent(m) => v.push(m.skip_bn.clone()),
            Sequence::Equilibrium { skip_bn, .. } => v.push(skip_bn.clone()),
        }
        v
    }

    /// Tape nodes recorded by one training forward and loss.
    pub fn tape_nodes(&self, mix: &Tensor, target: &Tensor) -> Result<usize> {
        let tape = Tape::new();
        let b = Bound::leaves(&tape, &self.params);
        let ctx = Ctx::new(&b, &self.buffers, true);
        let out = self.forward(&ctx, mix)?;
        self.loss(out.estimate, target)?;
        Ok(tape.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(variant: Variant) -> ModelSpec {
        let mut s = ModelSpec::toy(variant);
        s.hidden = 8;
        s
    }

    fn mix(spec: &ModelSpec, frames: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(vec![spec.channels, frames, spec.bins_total], 1.0, &mut rng).map(f64::abs)
    }

    #[test]
    fn instantiated_counts_match_closed_form() {
        for v in Variant::ALL {
            let mut spec = small(v);
            spec.channels = 2;
            let m = SeparatorModel::new(&spec, "t", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(m.params.total_count(), spec.count_params().per_target, "{v}");
        }
    }

    #[test]
    fn frame_layout_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::randn(vec![2, 3, 5], &mut rng);
        assert_eq!(from_frames(&to_frames(&m, 5).unwrap(), 2).unwrap(), m);
        assert_eq!(to_frames(&m, 2).unwrap().shape(), &[3, 4]);
    }

    #[test]
    fn identity_mask_and_zero_preservation() {
        for v in Variant::ALL {
            let spec = small(v);
            let mut m = SeparatorModel::new(&spec, "t", &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let x = mix(&spec, 6, 3);
            let (y, _) = m.separate(&x).unwrap();
            assert!(y.data().iter().all(|v| *v >= 0.0));
            let (z, _) = m.separate(&Tensor::zeros(x.shape().to_vec())).unwrap();
            assert_eq!(z.max_abs(), 0.0);
            m.make_identity_mask().unwrap();
            assert_eq!(m.separate(&x).unwrap().0, x, "{v}");
        }
    }

    #[test]
    fn rejects_wrong_shapes_and_negative_input() {
        let spec = small(Variant::Umx);
        let m = SeparatorModel::new(&spec, "t", &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(matches!(m.separate(&Tensor::zeros(vec![1, 4, 10])), Err(Error::SpecMismatch(_))));
        let neg = Tensor::full(vec![1, 4, spec.bins_total], -1.0);
        assert!(m.separate(&neg).is_err());
    }

    #[test]
    fn train_step_gradients_match_finite_differences() {
        for v in [Variant::Umx, Variant::WtUmx] {
            let spec = small(v);
            let mut m = SeparatorModel::new(&spec, "t", &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let x = mix(&spec, 4, 6);
            let y = mix(&spec, 4, 7);
            let (_, g, _) = m.clone().train_step(&x, &y).unwrap();
            for name in ["fc1.weight", "core.fc.weight", "seq.lstm0.fwd.w_ih", "fc3.weight", "output_mean"] {
                if !m.params.contains(name) {
                    continue;
                }
                let h = 1e-6;
                let eval = |d: f64| {
                    let mut mm = m.clone();
                    let mut t = mm.params.get(name).unwrap().clone();
                    t.data_mut()[1] += d;
                    mm.params.set(name, t).unwrap();
                    mm.train_step(&x, &y).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.get(name).unwrap().data()[1];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{v} {name}: {fd} vs {an}");
            }
            m.train_step(&x, &y).unwrap();
        }
    }
}
