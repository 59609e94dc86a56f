use rand::Rng;

use super::{init_bound, Bound};
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{ParamSet, Tensor};

/// One direction of an LSTM layer. Gate blocks are stacked in the order
/// input, forget, candidate, output; two bias vectors are kept as in the
/// common reference layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmDirection {
    pub path: String,
    pub input: usize,
    pub hidden: usize,
}

impl LstmDirection {
    pub fn new(path: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            path: path.into(),
            input,
            hidden,
        }
    }

    fn p(&self, name: &str) -> String {
        format!("{}.{}", self.path, name)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        let h4 = 4 * self.hidden;
        let bound = init_bound(self.hidden);
        params.insert(self.p("w_ih"), Tensor::uniform(vec![h4, self.input], init_bound(self.input), rng))?;
        params.insert(self.p("w_hh"), Tensor::uniform(vec![h4, self.hidden], bound, rng))?;
        params.insert(self.p("b_ih"), Tensor::uniform(vec![h4], bound, rng))?;
        params.insert(self.p("b_hh"), Tensor::uniform(vec![h4], bound, rng))
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden) + 8 * self.hidden
    }

    /// Gate matmul MACs for one frame.
    pub fn macs_per_frame(&self) -> u64 {
        (4 * self.hidden * (self.input + self.hidden)) as u64
    }

    /// Run over a `(T × input)` sequence, front to back or back to front.
    /// The output keeps the input's frame order.
    pub fn apply<'t>(&self, params: &Bound<'t>, x: Var<'t>, reverse: bool) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::shape("lstm", &shape, &[self.input]));
        }
        let frames = shape[0];
        if frames == 0 {
            return Err(Error::invalid("lstm", "empty sequence"));
        }
        let h = self.hidden;
        let w_hh = params.get(&self.p("w_hh"))?;
        let projected = x
            .matmul_t(params.get(&self.p("w_ih"))?)?
            .add(params.get(&self.p("b_ih"))?)?
            .add(params.get(&self.p("b_hh"))?)?;

        let mut state: Option<(Var<'t>, Var<'t>)> = None;
        let mut outputs: Vec<Option<Var<'t>>> = vec![None; frames];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..frames).rev())
        } else {
            Box::new(0..frames)
        };
        for t in order {
            let row = projected.slice_rows(t, t + 1)?;
            // zero initial state: the recurrent terms vanish on the first step
            let gates = match state {
                Some((hp, _)) => row.add(hp.matmul_t(w_hh)?)?,
                None => row,
            };
            let i = gates.slice_last(0, h)?.sigmoid()?;
            let f = gates.slice_last(h, 2 * h)?.sigmoid()?;
            let g = gates.slice_last(2 * h, 3 * h)?.tanh()?;
            let o = gates.slice_last(3 * h, 4 * h)?.sigmoid()?;
            let c = match state {
                Some((_, cp)) => f.mul(cp)?.add(i.mul(g)?)?,
                None => i.mul(g)?,
            };
            let hn = o.mul(c.tanh()?)?;
            outputs[t] = Some(hn);
            state = Some((hn, c));
        }
        let outputs: Vec<Var<'t>> = outputs.into_iter().map(|o| o.expect("every frame visited")).collect();
        params.tape().concat_rows(&outputs)
    }
}

/// Bidirectional LSTM layer; the two directions' outputs are concatenated
/// per frame, forward first.
#[derive(Clone, Debug, PartialEq)]
pub struct Blstm {
    pub path: String,
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl Blstm {
    pub fn new(path: impl Into<String>, input: usize, hidden: usize) -> Self {
        let path = path.into();
        Self {
            forward: LstmDirection::new(format!("{path}.fwd"), input, hidden),
            backward: LstmDirection::new(format!("{path}.bwd"), input, hidden),
            path,
        }
    }

    pub fn input(&self) -> usize {
        self.forward.input
    }

    pub fn output(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        self.forward.init(params, rng)?;
        self.backward.init(params, rng)
    }

    pub fn param_count(&self) -> usize {
        self.forward.param_count() + self.backward.param_count()
    }

    pub fn macs_per_frame(&self) -> u64 {
        self.forward.macs_per_frame() + self.backward.macs_per_frame()
    }

    pub fn apply<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let f = self.forward.apply(params, x, false)?;
        let b = self.backward.apply(params, x, true)?;
        params.tape().concat_last(&[f, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(input: usize, hidden: usize, seed: u64) -> (Blstm, ParamSet) {
        let layer = Blstm::new("l", input, hidden);
        let mut ps = ParamSet::new();
        layer.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (layer, ps)
    }

    fn run(layer: &Blstm, ps: &ParamSet, x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let b = Bound::constants(&tape, ps);
        layer.apply(&b, tape.constant(x.clone())).unwrap().value()
    }

    fn reverse_frames(x: &Tensor) -> Tensor {
        let (r, c) = x.dims2().unwrap();
        let mut d = Vec::with_capacity(r * c);
        for t in (0..r).rev() {
            d.extend_from_slice(&x.data()[t * c..(t + 1) * c]);
        }
        Tensor::new(vec![r, c], d).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let (layer, ps) = setup(3, 4, 0);
        let zero = ps.zeros_like();
        let x = Tensor::randn(vec![5, 3], &mut ChaCha8Rng::seed_from_u64(1));
        let y = run(&layer, &zero, &x);
        assert_eq!(y.shape(), &[5, 8]);
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn counts() {
        let (layer, ps) = setup(6, 3, 0);
        assert_eq!(ps.total_count(), layer.param_count());
        assert_eq!(layer.macs_per_frame(), 2 * 4 * 3 * (6 + 3));
    }

    #[test]
    fn time_reversal_swaps_directions() {
        let (layer, ps) = setup(3, 2, 7);
        let mut swapped = ParamSet::new();
        for (k, v) in ps.iter() {
            let k2 = if k.contains(".fwd.") {
                k.replace(".fwd.", ".bwd.")
            } else {
                k.replace(".bwd.", ".fwd.")
            };
            swapped.insert(k2, v.clone()).unwrap();
        }
        let x = Tensor::randn(vec![6, 3], &mut ChaCha8Rng::seed_from_u64(2));
        let y = run(&layer, &ps, &x);
        let y_rev = run(&layer, &swapped, &reverse_frames(&x));
        let back = reverse_frames(&y_rev);
        for t in 0..6 {
            for j in 0..2 {
                assert!((back.at2(t, j) - y.at2(t, j + 2)).abs() < 1e-14);
                assert!((back.at2(t, j + 2) - y.at2(t, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn direction_causality() {
        let (layer, ps) = setup(2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(vec![7, 2], &mut rng);
        let y = run(&layer, &ps, &x);
        let changed = 3;
        let mut d = x.data().to_vec();
        d[changed * 2] += 0.5;
        let y2 = run(&layer, &ps, &Tensor::new(vec![7, 2], d).unwrap());
        for t in 0..7 {
            let fwd_diff: f64 = (0..3).map(|j| (y.at2(t, j) - y2.at2(t, j)).abs()).sum();
            let bwd_diff: f64 = (3..6).map(|j| (y.at2(t, j) - y2.at2(t, j)).abs()).sum();
            assert_eq!(fwd_diff == 0.0, t < changed, "forward direction at frame {t}");
            assert_eq!(bwd_diff == 0.0, t > changed, "backward direction at frame {t}");
        }
    }
}
