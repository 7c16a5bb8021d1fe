use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxkit::autodiff::{gradcheck, Tape, Tensor, Var};
use voxkit::net::{conv_relu_norm_block, forward_graph, CondFeatures, NetShape, NetWeights, COND_DIM};
use voxkit::pitch::F0Contour;
use voxkit::synth::{
    filterbank_tensor, harmonic_basis, harmonic_graph, initial_phases, mel_graph, noise_graph,
    noise_phases, NOISE_BINS, N_HARMONICS,
};

const FRAMES: usize = 10;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

struct Fixture {
    basis: Tensor<f64>,
    phases: Arc<Vec<rustfft::num_complex::Complex<f64>>>,
    target: Tensor<f64>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0: Vec<f64> = (0..FRAMES)
        .map(|t| if t == 3 { 0.0 } else { rng.random_range(110.0..260.0) })
        .collect();
    Fixture {
        basis: harmonic_basis(&F0Contour::from_hz(f0), &initial_phases(seed)).unwrap(),
        phases: Arc::new(noise_phases(FRAMES, seed)),
        target: uniform(&mut rng, &[FRAMES, 80], -9.0, 0.0),
    }
}

fn synth_loss(tape: &mut Tape<f64>, fx: &Fixture, a: Var, c: Var, a_n: Var) -> voxkit::Result<Var> {
    let h = harmonic_graph(tape, a, c, &fx.basis)?;
    let n = noise_graph(tape, a_n, fx.phases.clone())?;
    let y = tape.add(h, n)?;
    let mel = mel_graph(tape, y, filterbank_tensor())?;
    let t = tape.constant(fx.target.clone());
    tape.l1_loss(mel, t)
}

#[test]
fn mel_loss_gradients_wrt_synth_params() {
    for seed in 0..3 {
        let fx = fixture(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = vec![
            uniform(&mut rng, &[FRAMES], 0.05, 0.5),
            uniform(&mut rng, &[FRAMES, N_HARMONICS], 0.0, 0.1),
            uniform(&mut rng, &[FRAMES, NOISE_BINS], 0.0, 0.05),
        ];
        let report = gradcheck::check(
            &inputs,
            |tape, v| synth_loss(tape, &fx, v[0], v[1], v[2]),
            gradcheck::Options {
                max_coords: Some(150),
                seed,
                ..gradcheck::Options::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {:?}", report.mismatches);
    }
}

#[test]
fn conv_relu_norm_block_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = vec![
        uniform(&mut rng, &[4, 8], -1.0, 1.0),
        uniform(&mut rng, &[3, 8, 6], -0.5, 0.5),
        uniform(&mut rng, &[6], -0.1, 0.1),
        uniform(&mut rng, &[6], 0.5, 1.5),
        uniform(&mut rng, &[6], -0.5, 0.5),
    ];
    let proj = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    let report = gradcheck::check(
        &inputs,
        |tape, v| {
            let y = conv_relu_norm_block(tape, v[0], v[1], v[2], v[3], v[4])?;
            let p = tape.constant(proj.clone());
            let z = tape.mul(y, p)?;
            tape.sum(z)
        },
        gradcheck::Options::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.mismatches);
}

#[test]
fn full_chain_gradients_on_a_small_net() {
    let shape = NetShape {
        channels: 12,
        blocks: 2,
    };
    let weights = NetWeights::init(shape, 2);
    let fx = fixture(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cond = CondFeatures {
        frames: FRAMES,
        values: (0..FRAMES * COND_DIM).map(|_| rng.random_range(-5.0..1.0)).collect(),
    };
    let inputs: Vec<Tensor<f64>> = weights.iter().map(|(_, t)| t.clone()).collect();
    let report = gradcheck::check(
        &inputs,
        |tape, v| {
            let x = tape.constant(cond.to_tensor());
            let p = forward_graph(tape, shape, v, x)?;
            synth_loss(tape, &fx, p.a, p.c, p.a_n)
        },
        gradcheck::Options {
            max_coords: Some(40),
            ..gradcheck::Options::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.mismatches);
}
