//! Central finite-difference checks for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per input tensor; smaller tensors are probed fully.
    pub max_coords: usize,
    /// Norm floor for the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 24,
            floor: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub index: usize,
    pub coords: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.relative_error)
            .fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from the given leaves. Per tensor, the error is
/// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, floor)` over the
/// probed coordinates.
pub fn check<S, F>(inputs: &[Tensor<S>], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.item(loss)?.as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    let mut report = Vec::new();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ti], input);
        let coords: Vec<usize> = if input.len() <= opts.max_coords {
            (0..input.len()).collect()
        } else {
            let mut c = sample(&mut rng, input.len(), opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for &c in &coords {
            let orig = input.data()[c];
            work[ti].data_mut()[c] = orig + S::lit(opts.step);
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - S::lit(opts.step);
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[c].as_f64();
            diff += (a - numeric).powi(2);
            an += a * a;
            nn += numeric * numeric;
        }
        let (an, nn) = (an.sqrt(), nn.sqrt());
        report.push(TensorCheck {
            index: ti,
            coords: coords.len(),
            analytic_norm: an,
            numeric_norm: nn,
            relative_error: diff.sqrt() / (an + nn).max(opts.floor),
        });
    }
    Ok(GradCheckReport { tensors: report })
}
