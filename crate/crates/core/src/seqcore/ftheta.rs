use rand::Rng;

use super::{rescale_spectral, Blstm, Bound, Fc, GroupNorm1};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

/// The equilibrium core
/// `f(z; x) = BLSTM(tanh(GN(FC([z, x]))))`.
///
/// Shape-preserving in `z`: with `z` and `x` both `(T × p)`, the FC maps the
/// `2p`-wide concatenation back to `p` and each BLSTM direction has `p / 2`
/// hidden units.
#[derive(Clone, Debug, PartialEq)]
pub struct FThetaCore {
    pub path: String,
    pub width: usize,
    pub fc: Fc,
    pub gn: GroupNorm1,
    pub blstm: Blstm,
}

impl FThetaCore {
    pub fn new(path: impl Into<String>, width: usize) -> Result<Self> {
        if width < 2 || !width.is_multiple_of(2) {
            return Err(Error::invalid("f_theta", format!("width must be even and at least 2, got {width}")));
        }
        let path = path.into();
        Ok(Self {
            fc: Fc::new(format!("{path}.fc"), 2 * width, width, true),
            gn: GroupNorm1::new(format!("{path}.gn"), width),
            blstm: Blstm::new(format!("{path}.blstm"), width, width / 2),
            width,
            path,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        self.fc.init(params, rng)?;
        self.gn.init(params, rng)?;
        self.blstm.init(params, rng)
    }

    /// Random initialization with every weight matrix rescaled to spectral
    /// norm `scale` and the normalization gain set to `scale`.
    pub fn init_scaled<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R, scale: f64) -> Result<()> {
        self.init(params, rng)?;
        rescale_spectral(params, &self.path, scale)?;
        params.set(&format!("{}.gamma", self.gn.path), Tensor::full(vec![self.width], scale))
    }

    pub fn param_count(&self) -> usize {
        self.fc.param_count() + self.gn.param_count() + self.blstm.param_count()
    }

    /// Matmul MACs of one evaluation, per frame.
    pub fn macs_per_frame(&self) -> u64 {
        self.fc.macs_per_frame() + self.blstm.macs_per_frame()
    }

    /// The core's own entries of a larger parameter set.
    pub fn params_of(&self, params: &ParamSet) -> ParamSet {
        params.subset(&self.path)
    }

    pub fn apply<'t>(&self, params: &Bound<'t>, z: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (zs, xs) = (z.shape(), x.shape());
        if zs != xs || zs.len() != 2 || zs[1] != self.width {
            return Err(Error::shape("f_theta", &zs, &xs));
        }
        let u = params.tape().concat_last(&[z, x])?;
        let v = self.fc.apply(params, u)?;
        let a = self.gn.apply(params, v)?.tanh()?;
        self.blstm.apply(params, a)
    }

    /// Evaluate on plain values without recording anything the caller sees.
    pub fn eval(&self, params: &ParamSet, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let b = Bound::constants(&tape, params);
        let out = self.apply(&b, tape.constant(z.clone()), tape.constant(x.clone()))?;
        Ok(out.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn odd_width_rejected() {
        assert!(FThetaCore::new("core", 5).is_err());
    }

    #[test]
    fn shape_preserving() {
        let core = FThetaCore::new("core", 6).unwrap();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        core.init(&mut ps, &mut rng).unwrap();
        assert_eq!(ps.total_count(), core.param_count());
        let z = Tensor::zeros(vec![4, 6]);
        let x = Tensor::randn(vec![4, 6], &mut rng);
        let y = core.eval(&ps, &z, &x).unwrap();
        assert_eq!(y.shape(), &[4, 6]);
        assert!(core.eval(&ps, &Tensor::zeros(vec![3, 6]), &x).is_err());
    }

    #[test]
    fn zero_weights_zero_output() {
        let core = FThetaCore::new("core", 4).unwrap();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        core.init(&mut ps, &mut rng).unwrap();
        let mut zero = ps.zeros_like();
        zero.set("core.gn.gamma", Tensor::ones(vec![4])).unwrap();
        let z = Tensor::randn(vec![5, 4], &mut rng);
        let x = Tensor::randn(vec![5, 4], &mut rng);
        assert_eq!(core.eval(&zero, &z, &x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn scaled_init_sets_spectral_norms() {
        let core = FThetaCore::new("core", 8).unwrap();
        let mut ps = ParamSet::new();
        core.init_scaled(&mut ps, &mut ChaCha8Rng::seed_from_u64(2), 0.5).unwrap();
        let s = super::super::spectral_norm(ps.get("core.fc.weight").unwrap()).unwrap();
        assert!((s - 0.5).abs() < 1e-9);
    }
}
