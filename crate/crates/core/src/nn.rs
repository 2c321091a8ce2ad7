//! Small building blocks shared by the encoders, the message-passing layer and
//! the latent heads.

use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), input, output, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, output]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, p.var(self.w))?;
        tape.add_row(xw, p.var(self.b))
    }
}

/// One-layer MLP: `relu(layer_norm(x W + b))`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub linear: Linear,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let linear = Linear::new(store, name, input, output, rng);
        let gain = store.add(format!("{name}.ln_gain"), Tensor::full(&[1, output], 1.0));
        let bias = store.add(format!("{name}.ln_bias"), Tensor::zeros(&[1, output]));
        Mlp { linear, gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let a = self.linear.forward(tape, p, x)?;
        let n = tape.layer_norm(a, p.var(self.gain), p.var(self.bias))?;
        Ok(tape.relu(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_mlp_outputs_relu_of_ln_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", 3, 4, &mut rng);
        store.get_mut(mlp.linear.w).data_mut().fill(0.0);
        store
            .get_mut(mlp.bias)
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        for input in [[1.0, 2.0, 3.0], [-5.0, 0.0, 9.0]] {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.constant(Tensor::row(input.to_vec()));
            let y = mlp.forward(&mut tape, &p, x).unwrap();
            assert_eq!(tape.value(y).data(), &[0.5, 0.0, 2.0, 0.0]);
        }
    }
}
