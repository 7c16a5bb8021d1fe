//! Shared gradient-check cases for every differentiable op.

#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use voxkit::autodiff::{gradcheck, Tape, Tensor, Var};
use voxkit::Result;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any output to a scalar with a fixed random projection.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = uniform(&mut rng, &shape, -1.0, 1.0);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(move |tape, vars| {
            let out = f(tape, vars)?;
            project(tape, out, seed)
        }),
    }
}

fn phasors(rng: &mut ChaCha8Rng, n: usize) -> Arc<Vec<Complex<f64>>> {
    Arc::new(
        (0..n)
            .map(|_| Complex::from_polar(1.0, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)))
            .collect(),
    )
}

/// Every op of the engine, instantiated with random inputs from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        case("add", vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], seed, |t, v| {
            t.add(v[0], v[1])
        }),
        case("sub", vec![uniform(r, &[4, 1], -1.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0)], seed, |t, v| {
            t.sub(v[0], v[1])
        }),
        case("mul", vec![uniform(r, &[5, 4], -1.0, 1.0), uniform(r, &[5, 1], -1.0, 1.0)], seed, |t, v| {
            t.mul(v[0], v[1])
        }),
        case("scale", vec![uniform(r, &[6], -1.0, 1.0)], seed, |t, v| t.scale(v[0], 2.5)),
        case("offset", vec![uniform(r, &[6], -1.0, 1.0)], seed, |t, v| t.offset(v[0], -0.75)),
        case("matmul", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0)], seed, |t, v| {
            t.matmul(v[0], v[1])
        }),
        case(
            "conv1d",
            vec![
                uniform(r, &[6, 4], -1.0, 1.0),
                uniform(r, &[3, 4, 5], -1.0, 1.0),
                uniform(r, &[5], -1.0, 1.0),
            ],
            seed,
            |t, v| t.conv1d(v[0], v[1], v[2]),
        ),
        case("relu", vec![away_from_zero(r, &[12], 1e-3)], seed, |t, v| t.relu(v[0])),
        case("sigmoid", vec![uniform(r, &[8], -4.0, 4.0)], seed, |t, v| t.sigmoid(v[0])),
        case("exp", vec![uniform(r, &[8], -2.0, 2.0)], seed, |t, v| t.exp(v[0])),
        case("log", vec![uniform(r, &[8], 0.1, 3.0)], seed, |t, v| t.log(v[0])),
        case("sin", vec![uniform(r, &[8], -6.0, 6.0)], seed, |t, v| t.sin(v[0])),
        case("exp_sigmoid", vec![uniform(r, &[8], -6.0, 6.0)], seed, |t, v| t.exp_sigmoid(v[0])),
        case("clamp_min", vec![away_from_zero(r, &[10], 1e-3)], seed, |t, v| t.clamp_min(v[0], 0.0)),
        case(
            "layer_norm",
            vec![
                uniform(r, &[4, 8], -2.0, 2.0),
                uniform(r, &[8], 0.5, 1.5),
                uniform(r, &[8], -0.5, 0.5),
            ],
            seed,
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case("softmax", vec![uniform(r, &[4, 6], -3.0, 3.0)], seed, |t, v| t.softmax(v[0])),
        case("linear_interp_upsample", vec![uniform(r, &[5, 3], -1.0, 1.0)], seed, |t, v| {
            t.upsample(v[0], 4)
        }),
        case("mel_project", vec![uniform(r, &[4, 17], 0.0, 1.0)], seed, {
            let m = Arc::new(uniform(r, &[6, 17], 0.0, 1.0));
            move |t, v| t.mel_project(v[0], m.clone())
        }),
        case("sum_last", vec![uniform(r, &[3, 5], -1.0, 1.0)], seed, |t, v| t.sum_last(v[0])),
        case("slice", vec![uniform(r, &[7, 2], -1.0, 1.0)], seed, |t, v| t.slice_rows(v[0], 2, 3)),
        case(
            "concat",
            vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0)],
            seed,
            |t, v| t.concat_rows(&[v[0], v[1]]),
        ),
        case("cumsum", vec![uniform(r, &[6, 2], -1.0, 1.0)], seed, |t, v| t.cumsum(v[0], false)),
        case("cumsum_exclusive", vec![uniform(r, &[6, 2], -1.0, 1.0)], seed, |t, v| {
            t.cumsum(v[0], true)
        }),
        case("reshape", vec![uniform(r, &[2, 6], -1.0, 1.0)], seed, |t, v| t.reshape(v[0], &[3, 4])),
        case("overlap_add_istft", vec![uniform(r, &[5, 17], 0.0, 1.0)], seed, {
            let ph = phasors(r, 5 * 17);
            move |t, v| t.overlap_add_istft(v[0], ph.clone(), 32, 8, 12, 40)
        }),
        case("stft_magnitude", vec![uniform(r, &[64], -1.0, 1.0)], seed, |t, v| {
            t.stft_magnitude(v[0], 32, 24, 8)
        }),
    ];

    // l1 with operands kept apart so no tie sits inside the FD step
    let a = uniform(r, &[3, 4], -1.0, 1.0);
    let b = Tensor::new(
        vec![3, 4],
        a.data()
            .iter()
            .map(|&x| x + if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(1e-3..1.0))
            .collect(),
    )
    .unwrap();
    cases.push(OpCase {
        name: "l1_loss",
        inputs: vec![a, b],
        build: Box::new(|t, v| t.l1_loss(v[0], v[1])),
    });
    cases.push(OpCase {
        name: "sum",
        inputs: vec![uniform(r, &[2, 3], -1.0, 1.0)],
        build: Box::new(|t, v| t.sum(v[0])),
    });
    cases
}

pub fn run_case(case: &OpCase, opts: gradcheck::Options) -> gradcheck::Report {
    gradcheck::check(&case.inputs, |t, v| (case.build)(t, v), opts)
        .unwrap_or_else(|e| panic!("{} failed to evaluate: {e}", case.name))
}
