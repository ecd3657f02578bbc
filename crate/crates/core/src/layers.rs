//! Linear and recurrent building blocks on top of the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ndcore::{ParamId, ParamSet, Scalar, Tape, Tensor, Var};

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// Affine map `x W + b` applied to a vector or to each row of a matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), uniform(rng, &[inputs, outputs], bound));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(&[outputs])));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bound: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound[self.weight.0])?;
        match self.bias {
            None => Ok(y),
            Some(b) if tape.shape(y).len() == 1 => tape.add(y, bound[b.0]),
            Some(b) => tape.add_row(y, bound[b.0]),
        }
    }
}

/// LSTM cell with fused gate weights over `[x; h]`, gate order i, f, g, o.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            uniform(rng, &[inputs + hidden, 4 * hidden], bound),
        );
        let mut b = vec![S::zero(); 4 * hidden];
        // forget gate starts open
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = S::one());
        let bias = params.add(format!("{name}.bias"), Tensor::vector(b).expect("finite"));
        Self {
            weight,
            bias,
            inputs,
            hidden,
        }
    }

    pub fn zero_state<S: Scalar>(&self, tape: &mut Tape<S>) -> (Var, Var) {
        let h = tape.constant(Tensor::zeros(&[self.hidden]));
        let c = tape.constant(Tensor::zeros(&[self.hidden]));
        (h, c)
    }

    pub fn step<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &[Var],
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let xh = tape.concat(&[x, h])?;
        let z = tape.matmul(xh, bound[self.weight.0])?;
        let z = tape.add(z, bound[self.bias.0])?;
        let i = tape.slice(z, 0, hd)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice(z, hd, 2 * hd)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice(z, 2 * hd, 3 * hd)?;
        let g = tape.tanh(g)?;
        let o = tape.slice(z, 3 * hd, 4 * hd)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next)?;
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// Bidirectional LSTM summarizing a sequence by its two final states.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            forward: LstmCell::new(params, &format!("{name}.fwd"), inputs, hidden, rng),
            backward: LstmCell::new(params, &format!("{name}.bwd"), inputs, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    /// Concatenated final hidden states, shape `(2H,)`.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<S>, bound: &[Var], steps: &[Var]) -> Result<Var> {
        let (mut hf, mut cf) = self.forward.zero_state(tape);
        for &x in steps {
            (hf, cf) = self.forward.step(tape, bound, x, hf, cf)?;
        }
        let (mut hb, mut cb) = self.backward.zero_state(tape);
        for &x in steps.iter().rev() {
            (hb, cb) = self.backward.step(tape, bound, x, hb, cb)?;
        }
        tape.concat(&[hf, hb])
    }
}

/// Unrolled LSTM decoder fed the conditioning vector at every step.
#[derive(Clone, Debug)]
pub struct SequenceDecoder {
    pub init: Linear,
    pub cell: LstmCell,
    pub head: Linear,
}

impl SequenceDecoder {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        name: &str,
        cond_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            init: Linear::new(params, &format!("{name}.init"), cond_dim, hidden, true, rng),
            cell: LstmCell::new(params, &format!("{name}.cell"), cond_dim, hidden, rng),
            head: Linear::new(params, &format!("{name}.head"), hidden, out_dim, true, rng),
        }
    }

    /// Decodes `steps` outputs, shape `(steps, out_dim)`.
    pub fn decode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &[Var],
        cond: Var,
        steps: usize,
    ) -> Result<Var> {
        let h0 = self.init.forward(tape, bound, cond)?;
        let mut h = tape.tanh(h0)?;
        let mut c = tape.constant(Tensor::zeros(&[self.cell.hidden]));
        let mut outs = Vec::with_capacity(steps);
        for _ in 0..steps {
            (h, c) = self.cell.step(tape, bound, cond, h, c)?;
            outs.push(h);
        }
        let hs = tape.concat(&outs)?;
        let hs = tape.reshape(hs, &[steps, self.cell.hidden])?;
        self.head.forward(tape, bound, hs)
    }
}
