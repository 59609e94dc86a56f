use rand::Rng;

use super::{BatchNorm, Blstm, Bound, Ctx, Fc};
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::ParamSet;

/// Baseline recurrent sequence model:
/// `tanh(x) → BLSTM stack → concat(tanh(x), ·) → FC → BN → ReLU`.
#[derive(Clone, Debug, PartialEq)]
pub struct UmxSequenceModel {
    pub path: String,
    pub width: usize,
    pub layers: Vec<Blstm>,
    pub skip_fc: Fc,
    pub skip_bn: BatchNorm,
}

impl UmxSequenceModel {
    pub fn new(path: impl Into<String>, width: usize, num_layers: usize) -> Result<Self> {
        if width < 2 || !width.is_multiple_of(2) {
            return Err(Error::invalid("umx_sequence_model", format!("width must be even, got {width}")));
        }
        if num_layers == 0 {
            return Err(Error::invalid("umx_sequence_model", "at least one BLSTM layer is required"));
        }
        let path = path.into();
        Ok(Self {
            layers: (0..num_layers)
                .map(|l| Blstm::new(format!("{path}.lstm{l}"), width, width / 2))
                .collect(),
            skip_fc: Fc::new(format!("{path}.fc"), 2 * width, width, false),
            skip_bn: BatchNorm::new(format!("{path}.bn"), width),
            width,
            path,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, buffers: &mut ParamSet, rng: &mut R) -> Result<()> {
        for l in &self.layers {
            l.init(params, rng)?;
        }
        self.skip_fc.init(params, rng)?;
        self.skip_bn.init(params, rng)?;
        self.skip_bn.init_buffers(buffers)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Blstm::param_count).sum::<usize>() + self.skip_fc.param_count() + self.skip_bn.param_count()
    }

    pub fn macs_per_frame(&self) -> u64 {
        self.layers.iter().map(Blstm::macs_per_frame).sum::<u64>() + self.skip_fc.macs_per_frame()
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let xs = x.tanh()?;
        let h = self.recurrent(ctx.params, xs)?;
        let cat = ctx.params.tape().concat_last(&[xs, h])?;
        let y = self.skip_fc.apply(ctx.params, cat)?;
        self.skip_bn.apply(ctx, y)?.relu()
    }
}

impl UmxSequenceModel {
    /// The BLSTM stack alone, applied to one clip.
    pub fn recurrent<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for l in &self.layers {
            h = l.apply(params, h)?;
        }
        Ok(h)
    }
}
