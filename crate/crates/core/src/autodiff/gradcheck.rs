//! Central finite-difference oracle for checking analytic gradients.
//!
//! Only forward evaluations are used here, so the oracle stays independent of
//! the reverse pass it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute slack for entries whose true gradient is (near) zero.
    pub abs_tol: f64,
    /// Check at most this many coordinates per input (sampled), or all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compares the reverse-mode gradient of the scalar built by `build` against
/// central differences, input by input.
pub fn check<F>(inputs: &[Tensor<f64>], build: F, opts: Options) -> Result<Report>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Report::default();
    let mut probe = inputs.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input is a trainable leaf");
        let len = inputs[input].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => (0..k).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for index in coords {
            let original = probe[input].data()[index];
            probe[input].data_mut()[index] = original + opts.step;
            let plus = evaluate(&probe, &build)?;
            probe[input].data_mut()[index] = original - opts.step;
            let minus = evaluate(&probe, &build)?;
            probe[input].data_mut()[index] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[index];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if scale > 0.0 {
                report.max_rel_error = report.max_rel_error.max(diff / scale);
            }
            report.checked += 1;
            if diff > opts.rel_tol * scale + opts.abs_tol {
                report.mismatches.push(Mismatch {
                    input,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
