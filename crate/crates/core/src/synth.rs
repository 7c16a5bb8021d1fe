//! Harmonic-plus-noise synthesis.
//!
//! Both branches run at 100 frames per second. Frame `t` of the parameters
//! is centred on output sample `160*t + 80`, and a render of `F` frames is
//! `F * 160` samples long.
//!
//! The graph builders ([`harmonic_graph`], [`noise_graph`], [`mel_graph`])
//! place the synthesizer on an autodiff [`Tape`]; the plain functions
//! ([`synth_harmonic`], [`synth_noise`], [`synth_dsp`]) evaluate those same
//! graphs in 64-bit and return audio.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use crate::audio::AudioBuffer;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::features::{default_filterbank, AMPLITUDE_FLOOR, MEL_HOP, MEL_WIN};
use crate::pitch::{interpolate_f0_to_samples, F0Contour};
use crate::{Error, Result, HOP, SAMPLE_RATE};

pub const N_HARMONICS: usize = 32;
pub const NOISE_FFT: usize = 1024;
pub const NOISE_BINS: usize = NOISE_FFT / 2 + 1;
/// Zeros placed on each side of a render so that log-mel frame `t` of the
/// padded signal is centred on synthesis frame `t`.
pub const ALIGN_PAD: usize = (MEL_WIN - MEL_HOP) / 2;
/// Noise frame `t` starts this many samples before `160*t`.
const NOISE_OFFSET: isize = (NOISE_FFT / 2 - HOP / 2) as isize;

/// Per-frame synthesizer controls.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub frames: usize,
    /// Global harmonic amplitude, `[frames]`.
    pub a: Vec<f64>,
    /// Harmonic distribution, `[frames, 32]`.
    pub c: Vec<f64>,
    /// Noise magnitude spectrogram, `[frames, 513]`.
    pub a_n: Vec<f64>,
}

impl SynthParams {
    pub fn zeros(frames: usize) -> Self {
        Self {
            frames,
            a: vec![0.0; frames],
            c: vec![0.0; frames * N_HARMONICS],
            a_n: vec![0.0; frames * NOISE_BINS],
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let f = self.frames;
        if self.a.len() != f {
            return Err(Error::shape("synth params A", &[f], &[self.a.len()]));
        }
        if self.c.len() != f * N_HARMONICS {
            return Err(Error::shape("synth params c", &[f, N_HARMONICS], &[self.c.len()]));
        }
        if self.a_n.len() != f * NOISE_BINS {
            return Err(Error::shape("synth params A_n", &[f, NOISE_BINS], &[self.a_n.len()]));
        }
        Ok(())
    }

    /// Checks shapes, finiteness, nonnegativity and that every row of `c`
    /// sums to 1 within 1e-6.
    ///
    /// The renderers only check shapes, so deliberately off-distribution
    /// parameters can still be synthesized.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        let all = self.a.iter().chain(&self.c).chain(&self.a_n);
        if let Some(v) = all.clone().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite synth parameter {v}")));
        }
        if let Some(v) = all.clone().find(|&&v| v < 0.0) {
            return Err(Error::Contract(format!("negative synth parameter {v}")));
        }
        for (t, row) in self.c.chunks(N_HARMONICS).enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "harmonic distribution of frame {t} sums to {total}"
                )));
            }
        }
        Ok(())
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> SynthParams {
        SynthParams {
            frames: len,
            a: self.a[start..start + len].to_vec(),
            c: self.c[start * N_HARMONICS..(start + len) * N_HARMONICS].to_vec(),
            a_n: self.a_n[start * NOISE_BINS..(start + len) * NOISE_BINS].to_vec(),
        }
    }
}

/// `phi[n] = phi0 + 2*pi*k * sum_{m<n} f0[m] / sample_rate`, unwrapped.
pub fn accumulate_phase(f0_samples: &[f64], k: usize, phi0: f64, sample_rate: u32) -> Vec<f64> {
    let mut cycles = 0.0;
    let step = k as f64 / sample_rate as f64;
    f0_samples
        .iter()
        .map(|&f| {
            let phase = phi0 + 2.0 * PI * cycles;
            cycles += f * step;
            phase
        })
        .collect()
}

/// Initial phases `phi0_k`, uniform in `[-pi, pi]`, one per harmonic.
pub fn initial_phases(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..N_HARMONICS).map(|_| rng.random_range(-PI..=PI)).collect()
}

/// Unit phasors for `frames x 513` noise bins. Bins 0 and 512 get a random
/// sign instead of a random angle so the spectrum stays Hermitian.
pub fn noise_phases<T: Real>(frames: usize, seed: u64) -> Vec<Complex<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut out = Vec::with_capacity(frames * NOISE_BINS);
    for _ in 0..frames {
        for k in 0..NOISE_BINS {
            let angle = if k == 0 || k == NOISE_BINS - 1 {
                if rng.random::<bool>() {
                    PI
                } else {
                    0.0
                }
            } else {
                rng.random_range(-PI..=PI)
            };
            out.push(Complex::new(T::of(angle.cos()), T::of(angle.sin())));
        }
    }
    out
}

/// Masked oscillator bank `sin(phi_k[n])`, `[samples, 32]`.
///
/// Entries are exactly 0 where `k*f0[n]` exceeds Nyquist or `f0[n]` is 0.
pub fn harmonic_basis(contour: &F0Contour, phi0: &[f64]) -> Result<Tensor<f64>> {
    if phi0.len() != N_HARMONICS {
        return Err(Error::shape("initial phases", &[N_HARMONICS], &[phi0.len()]));
    }
    let f0 = interpolate_f0_to_samples(contour, HOP);
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let mut basis = vec![0.0; f0.len() * N_HARMONICS];
    for (k0, &p0) in phi0.iter().enumerate() {
        let k = k0 + 1;
        let phase = accumulate_phase(&f0, k, p0, SAMPLE_RATE);
        for (n, (&f, &ph)) in f0.iter().zip(&phase).enumerate() {
            if f > 0.0 && k as f64 * f <= nyquist {
                basis[n * N_HARMONICS + k0] = ph.sin();
            }
        }
    }
    Tensor::new(vec![f0.len(), N_HARMONICS], basis)
}

/// `y[n] = A[n] * sum_k c_k[n] * basis[n, k]` with `A` (`[F]`) and `c`
/// (`[F, 32]`) linearly upsampled by 160.
pub fn harmonic_graph<T: Real>(tape: &mut Tape<T>, a: Var, c: Var, basis: &Tensor<T>) -> Result<Var> {
    let frames = tape.shape(a).first().copied().unwrap_or(0);
    if tape.shape(a) != [frames]
        || tape.shape(c) != [frames, N_HARMONICS]
        || basis.shape() != [frames * HOP, N_HARMONICS]
    {
        return Err(Error::shape("synth_harmonic", tape.shape(c), basis.shape()));
    }
    let a_up = tape.upsample(a, HOP)?;
    let c_up = tape.upsample(c, HOP)?;
    let b = tape.constant(basis.clone());
    let weighted = tape.mul(c_up, b)?;
    let summed = tape.sum_last(weighted)?;
    tape.mul(a_up, summed)
}

/// Random-phase noise: iSTFT of `A_n * e^{iP}` (`[F, 513]`), 1024-point
/// Hann frames on a 160 hop, frame `t` centred on sample `160*t + 80`.
pub fn noise_graph<T: Real>(tape: &mut Tape<T>, a_n: Var, phases: Arc<Vec<Complex<T>>>) -> Result<Var> {
    let frames = tape.shape(a_n).first().copied().unwrap_or(0);
    if tape.shape(a_n) != [frames, NOISE_BINS] {
        return Err(Error::shape("synth_noise", tape.shape(a_n), &[frames, NOISE_BINS]));
    }
    tape.overlap_add_istft(a_n, phases, NOISE_FFT, HOP, NOISE_OFFSET, frames * HOP)
}

/// Log-mel of a render padded with [`ALIGN_PAD`] zeros on both sides, so an
/// `F`-frame render yields exactly `F` mel frames.
pub fn mel_graph<T: Real>(tape: &mut Tape<T>, audio: Var, filterbank: Arc<Tensor<T>>) -> Result<Var> {
    let pad = tape.constant(Tensor::zeros(vec![ALIGN_PAD]));
    let padded = tape.concat_rows(&[pad, audio, pad])?;
    let mag = tape.stft_magnitude(padded, MEL_WIN, MEL_WIN, MEL_HOP)?;
    let mel = tape.mel_project(mag, filterbank)?;
    let floored = tape.clamp_min(mel, T::of(AMPLITUDE_FLOOR))?;
    tape.log(floored)
}

/// The 80-band filterbank as a `[80, 321]` tensor.
pub fn filterbank_tensor<T: Real>() -> Arc<Tensor<T>> {
    let fb = default_filterbank();
    Arc::new(Tensor::from_f64(vec![fb.n_mels, fb.bins], &fb.weights).expect("filterbank shape"))
}

fn params_leaves(tape: &mut Tape<f64>, params: &SynthParams) -> Result<(Var, Var, Var)> {
    params.check_shapes()?;
    let f = params.frames;
    let a = tape.constant(Tensor::new(vec![f], params.a.clone())?);
    let c = tape.constant(Tensor::new(vec![f, N_HARMONICS], params.c.clone())?);
    let a_n = tape.constant(Tensor::new(vec![f, NOISE_BINS], params.a_n.clone())?);
    Ok((a, c, a_n))
}

fn check_frames(params: &SynthParams, contour: &F0Contour) -> Result<()> {
    if params.frames != contour.frames() {
        return Err(Error::shape("synth frames", &[params.frames], &[contour.frames()]));
    }
    Ok(())
}

fn to_audio(tape: &Tape<f64>, v: Var) -> AudioBuffer {
    AudioBuffer::new(tape.value(v).data().to_vec(), SAMPLE_RATE)
}

/// Harmonic branch with explicit initial phases.
pub fn synth_harmonic_with_phases(params: &SynthParams, contour: &F0Contour, phi0: &[f64]) -> Result<AudioBuffer> {
    check_frames(params, contour)?;
    let mut tape = Tape::new();
    let (a, c, _) = params_leaves(&mut tape, params)?;
    let y = harmonic_graph(&mut tape, a, c, &harmonic_basis(contour, phi0)?)?;
    Ok(to_audio(&tape, y))
}

/// Harmonic branch with initial phases drawn from `seed`.
pub fn synth_harmonic(params: &SynthParams, contour: &F0Contour, seed: u64) -> Result<AudioBuffer> {
    synth_harmonic_with_phases(params, contour, &initial_phases(seed))
}

pub fn synth_noise(params: &SynthParams, seed: u64) -> Result<AudioBuffer> {
    let mut tape = Tape::new();
    let (_, _, a_n) = params_leaves(&mut tape, params)?;
    let y = noise_graph(&mut tape, a_n, Arc::new(noise_phases(params.frames, seed)))?;
    Ok(to_audio(&tape, y))
}

/// Sum of both branches: harmonic phases from `harmonic_seed`, noise phases
/// from `noise_seed`.
pub fn synth_dsp_seeded(
    params: &SynthParams,
    contour: &F0Contour,
    harmonic_seed: u64,
    noise_seed: u64,
) -> Result<AudioBuffer> {
    check_frames(params, contour)?;
    let mut tape = Tape::new();
    let (a, c, a_n) = params_leaves(&mut tape, params)?;
    let basis = harmonic_basis(contour, &initial_phases(harmonic_seed))?;
    let h = harmonic_graph(&mut tape, a, c, &basis)?;
    let n = noise_graph(&mut tape, a_n, Arc::new(noise_phases(params.frames, noise_seed)))?;
    let y = tape.add(h, n)?;
    Ok(to_audio(&tape, y))
}

/// `synth_harmonic(seed) + synth_noise(seed)`.
pub fn synth_dsp(params: &SynthParams, contour: &F0Contour, seed: u64) -> Result<AudioBuffer> {
    synth_dsp_seeded(params, contour, seed, seed)
}

/// Places a render inside a zero buffer of `len` samples so it lines up with
/// the audio its frames were analysed from.
pub fn align_to(render: &AudioBuffer, len: usize) -> AudioBuffer {
    let mut out = vec![0.0; len];
    for (o, &s) in out.iter_mut().skip(ALIGN_PAD).zip(&render.samples) {
        *o = s;
    }
    AudioBuffer::new(out, render.sample_rate)
}

/// Audio length whose log-mel has exactly `frames` frames and whose frames
/// line up with an `frames`-frame render placed by [`align_to`].
pub fn aligned_len(frames: usize) -> usize {
    frames * HOP + 2 * ALIGN_PAD
}
