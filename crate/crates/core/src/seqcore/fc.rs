use rand::Rng;

use super::{init_bound, Bound};
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{ParamSet, Tensor};

/// Frame-wise affine map `y = x Wᵀ + b` with `W` stored `(out × in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Fc {
    pub path: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

impl Fc {
    pub fn new(path: impl Into<String>, input: usize, output: usize, bias: bool) -> Self {
        Self {
            path: path.into(),
            input,
            output,
            bias,
        }
    }

    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        let bound = init_bound(self.input);
        params.insert(self.weight_path(), Tensor::uniform(vec![self.output, self.input], bound, rng))?;
        if self.bias {
            params.insert(self.bias_path(), Tensor::uniform(vec![self.output], bound, rng))?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.input * self.output + if self.bias { self.output } else { 0 }
    }

    pub fn macs_per_frame(&self) -> u64 {
        (self.input * self.output) as u64
    }

    pub fn apply<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.input) {
            return Err(Error::shape("fc", &shape, &[self.output, self.input]));
        }
        let y = x.matmul_t(params.get(&self.weight_path())?)?;
        if self.bias {
            y.add(params.get(&self.bias_path())?)
        } else {
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights() {
        let fc = Fc::new("fc", 3, 3, true);
        let mut ps = ParamSet::new();
        ps.insert(fc.weight_path(), Tensor::eye(3)).unwrap();
        ps.insert(fc.bias_path(), Tensor::zeros(vec![3])).unwrap();
        let tape = Tape::new();
        let b = Bound::constants(&tape, &ps);
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let y = fc.apply(&b, tape.constant(x.clone())).unwrap();
        assert_eq!(y.value(), x);
    }

    #[test]
    fn halves_concatenated_width() {
        // 2p -> p, as used inside the equilibrium core
        let p = 6;
        let fc = Fc::new("fc", 2 * p, p, true);
        let mut ps = ParamSet::new();
        fc.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ps.total_count(), fc.param_count());
        assert_eq!(fc.param_count(), 2 * p * p + p);
        let tape = Tape::new();
        let b = Bound::constants(&tape, &ps);
        let y = fc.apply(&b, tape.constant(Tensor::zeros(vec![4, 2 * p]))).unwrap();
        assert_eq!(y.shape(), vec![4, p]);
        assert!(fc.apply(&b, tape.constant(Tensor::zeros(vec![4, p]))).is_err());
    }

    #[test]
    fn macs_over_frames() {
        let fc = Fc::new("fc", 7, 5, false);
        assert_eq!(fc.macs_per_frame() * 11, 11 * 7 * 5);
    }
}
