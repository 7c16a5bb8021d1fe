//! Fitting the parameter network to one utterance, and evaluation metrics.
//!
//! Each step renders the synthesizer from the network's predictions, takes
//! the log-mel of the render and descends the mean absolute difference to
//! the target's log-mel (scaled by `lambda_dsp`) with AdamW.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioBuffer;
use crate::autodiff::{Real, Tape, Tensor};
use crate::features::{log_mel, MelSpectrogram, MEL_HOP, MEL_WIN, N_MELS};
use crate::net::{forward_graph, predict_params, CondFeatures, NetShape, NetWeights};
use crate::pitch::{extract_f0, F0Contour};
use crate::synth::{
    align_to, filterbank_tensor, harmonic_basis, harmonic_graph, initial_phases, noise_graph,
    noise_phases, synth_dsp_seeded, ALIGN_PAD, N_HARMONICS,
};
use crate::features::AMPLITUDE_FLOOR;
use crate::{Error, Result, HOP, SAMPLE_RATE};

/// Shortest utterance [`fit_utterance`] accepts, in seconds.
pub const MIN_DURATION: f64 = 0.5;
/// Extra synthesis frames rendered on each side of a training slice.
const SLICE_MARGIN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub lr: f64,
    /// Per-step multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub lambda_dsp: f64,
    pub steps: usize,
    pub seed: u64,
    /// Train on random contiguous slices of this many frames; `None` trains
    /// on the whole utterance every step.
    pub slice_frames: Option<usize>,
    pub net: NetShape,
    pub precision: Precision,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.999996,
            beta1: 0.8,
            beta2: 0.99,
            weight_decay: 0.01,
            eps: 1e-8,
            lambda_dsp: 45.0,
            steps: 2000,
            seed: 0,
            slice_frames: Some(37),
            net: NetShape::default(),
            precision: Precision::F32,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Input(format!("lr must be positive, got {}", self.lr)));
        }
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Input(format!(
                "betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Input(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 || self.lambda_dsp <= 0.0 {
            return Err(Error::Input("weight_decay, eps and lambda_dsp must be positive".into()));
        }
        if self.slice_frames == Some(0) || self.net.channels == 0 || self.net.blocks == 0 {
            return Err(Error::Input("slice_frames, channels and blocks must be nonzero".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference of two log-mel spectrograms of equal shape.
pub fn mel_l1(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.frames != b.frames || a.mels != b.mels {
        return Err(Error::shape("mel_l1", &[a.frames, a.mels], &[b.frames, b.mels]));
    }
    if a.values.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.values.len() as f64)
}

/// Unscaled mel-L1 between a target log-mel and the log-mel of `dsp_audio`.
pub fn loss_dsp(target_mel: &MelSpectrogram, dsp_audio: &AudioBuffer) -> Result<f64> {
    mel_l1(target_mel, &log_mel(dsp_audio)?)
}

/// First and second moment estimates, keyed by tensor name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update at 0-based `step_index`.
///
/// `w <- w * (1 - lr_t * wd)`, then `w <- w - lr_t * m_hat / (sqrt(v_hat) + eps)`
/// with `lr_t = lr * lr_decay^step_index` and bias correction for
/// `step_index + 1` updates.
pub fn adamw_step(
    weights: &mut NetWeights,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    config: &FitConfig,
    step_index: usize,
) -> Result<()> {
    for (name, _) in weights.iter() {
        if !grads.contains_key(name) {
            return Err(Error::Contract(format!("no gradient for weight {name}")));
        }
    }
    let lr = config.lr * config.lr_decay.powf(step_index as f64);
    let t = step_index as i32 + 1;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - lr * config.weight_decay;
    for (name, w) in weights.iter_mut() {
        let g = &grads[name];
        if g.len() != w.len() {
            return Err(Error::shape("adamw gradient", w.shape(), &[g.len()]));
        }
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        for (i, wi) in w.data_mut().iter_mut().enumerate() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *wi *= decay;
            *wi -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Target features of one utterance.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub mel: MelSpectrogram,
    pub contour: F0Contour,
    pub cond: CondFeatures,
    /// Length of the analysed audio in samples.
    pub len: usize,
}

impl Analysis {
    pub fn new(audio: &AudioBuffer) -> Result<Self> {
        if audio.sample_rate != SAMPLE_RATE {
            return Err(Error::Input(format!(
                "expected {SAMPLE_RATE} Hz audio, got {}",
                audio.sample_rate
            )));
        }
        if !audio.is_finite() {
            return Err(Error::Input("audio contains non-finite samples".into()));
        }
        let mel = log_mel(audio)?;
        let contour = extract_f0(audio)?;
        let cond = CondFeatures::new(&mel, &contour)?;
        Ok(Self {
            mel,
            contour,
            cond,
            len: audio.len(),
        })
    }

    pub fn frames(&self) -> usize {
        self.mel.frames
    }
}

/// Renders the fitted synthesizer for an analysed utterance, placed so it
/// lines up sample-for-sample with the analysed audio.
pub fn render(weights: &NetWeights, analysis: &Analysis, phase_seed: u64, noise_seed: u64) -> Result<AudioBuffer> {
    let params = predict_params(&analysis.cond, weights)?;
    let y = synth_dsp_seeded(&params, &analysis.contour, phase_seed, noise_seed)?;
    Ok(align_to(&y, analysis.len))
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub weights: NetWeights,
    /// Unscaled mel-L1 of every step's training batch.
    pub history: Vec<f64>,
    /// Seed of the harmonic initial phases used throughout.
    pub phase_seed: u64,
}

/// Frame ranges of one training step.
#[derive(Debug, Clone, Copy)]
struct Window {
    /// Target mel frames `[start, start + len)`.
    start: usize,
    len: usize,
    /// Rendered synthesis frames.
    synth: (usize, usize),
    /// Frames fed to the network (rendered frames plus receptive field).
    cond: (usize, usize),
}

fn window(frames: usize, start: usize, len: usize, receptive: usize) -> Window {
    let synth = (start.saturating_sub(SLICE_MARGIN), (start + len + SLICE_MARGIN).min(frames));
    let cond = (synth.0.saturating_sub(receptive), (synth.1 + receptive).min(frames));
    Window {
        start,
        len,
        synth,
        cond,
    }
}

/// Builds the loss graph of one window and returns the unscaled loss and
/// per-tensor gradients of the scaled loss.
fn step_graph<T: Real>(
    weights: &NetWeights,
    analysis: &Analysis,
    basis: &Tensor<f64>,
    fb: &Arc<Tensor<T>>,
    w: Window,
    noise_seed: u64,
    lambda: f64,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::<T>::new();
    let leaves = weights.leaves(&mut tape);
    let cond_len = w.cond.1 - w.cond.0;
    let cond = tape.constant(analysis.cond.slice(w.cond.0, cond_len).to_tensor());
    let p = forward_graph(&mut tape, weights.shape(), &leaves, cond)?;
    let (s0, s1) = w.synth;
    let frames = s1 - s0;
    let a = tape.slice_rows(p.a, s0 - w.cond.0, frames)?;
    let c = tape.slice_rows(p.c, s0 - w.cond.0, frames)?;
    let a_n = tape.slice_rows(p.a_n, s0 - w.cond.0, frames)?;

    let rows = &basis.data()[s0 * HOP * N_HARMONICS..s1 * HOP * N_HARMONICS];
    let basis = Tensor::from_f64(vec![frames * HOP, N_HARMONICS], rows)?;
    let h = harmonic_graph(&mut tape, a, c, &basis)?;
    let n = noise_graph(&mut tape, a_n, Arc::new(noise_phases(frames, noise_seed)))?;
    let y = tape.add(h, n)?;

    // samples [lo, hi) of the zero-padded render cover the target frames
    let total = (analysis.frames() * HOP) as isize;
    let lo = (w.start * MEL_HOP) as isize - ALIGN_PAD as isize;
    let hi = lo + ((w.len - 1) * MEL_HOP + MEL_WIN) as isize;
    let (r0, r1) = ((s0 * HOP) as isize, (s1 * HOP) as isize);
    let (take0, take1) = (lo.max(0), hi.min(total));
    debug_assert!(take0 >= r0 && take1 <= r1);
    let mut parts = Vec::new();
    if lo < 0 {
        parts.push(tape.constant(Tensor::zeros(vec![(-lo) as usize])));
    }
    parts.push(tape.slice_rows(y, (take0 - r0) as usize, (take1 - take0) as usize)?);
    if hi > total {
        parts.push(tape.constant(Tensor::zeros(vec![(hi - total) as usize])));
    }
    let padded = tape.concat_rows(&parts)?;
    let mag = tape.stft_magnitude(padded, MEL_WIN, MEL_WIN, MEL_HOP)?;
    let mel = tape.mel_project(mag, fb.clone())?;
    let mel = tape.clamp_min(mel, T::of(AMPLITUDE_FLOOR))?;
    let mel = tape.log(mel)?;
    let target = analysis.mel.slice_frames(w.start, w.len);
    let target = tape.constant(Tensor::from_f64(vec![w.len, N_MELS], &target.values)?);
    let unscaled = tape.l1_loss(mel, target)?;
    let loss = tape.scale(unscaled, T::of(lambda))?;
    let value = tape.value(unscaled).item().as_f64();
    let grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for ((name, t), v) in weights.iter().zip(&leaves) {
        let g = grads
            .get(*v)
            .map(|g| g.to_f64())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        out.insert(name.to_string(), g);
    }
    Ok((value, out))
}

/// Fits freshly initialised weights to `audio` for `config.steps` steps.
///
/// Features and F0 are extracted once. Every step draws a fresh noise seed
/// (and a slice start when slicing); the harmonic initial phases are drawn
/// once from `config.seed` for the whole utterance. The result depends only
/// on `audio` and `config`.
pub fn fit_utterance(audio: &AudioBuffer, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if audio.duration_secs() < MIN_DURATION {
        return Err(Error::Input(format!(
            "audio lasts {:.3} s, need at least {MIN_DURATION} s",
            audio.duration_secs()
        )));
    }
    let analysis = Analysis::new(audio)?;
    fit_analysis(&analysis, config)
}

/// [`fit_utterance`] on features that were already extracted.
pub fn fit_analysis(analysis: &Analysis, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let mut weights = NetWeights::init(config.net, config.seed);
    let phase_seed = config.seed;
    let basis = harmonic_basis(&analysis.contour, &initial_phases(phase_seed))?;
    let mut state = AdamState::default();
    let mut history = Vec::with_capacity(config.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let frames = analysis.frames();
    let len = config.slice_frames.unwrap_or(frames).min(frames);
    let fb32 = filterbank_tensor::<f32>();
    let fb64 = filterbank_tensor::<f64>();
    for step in 0..config.steps {
        let start = rng.random_range(0..=frames - len);
        let noise_seed = rng.random::<u64>();
        let w = window(frames, start, len, config.net.blocks);
        let (loss, grads) = match config.precision {
            Precision::F32 => step_graph(&weights, analysis, &basis, &fb32, w, noise_seed, config.lambda_dsp)?,
            Precision::F64 => step_graph(&weights, analysis, &basis, &fb64, w, noise_seed, config.lambda_dsp)?,
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "fit loss" });
        }
        adamw_step(&mut weights, &grads, &mut state, config, step)?;
        history.push(loss);
    }
    Ok(FitResult {
        weights,
        history,
        phase_seed,
    })
}

/// Population Pearson correlation of two contours over the frames voiced in
/// both. `None` when fewer than two such frames exist or either side has
/// zero variance there.
pub fn f0_pcc(a: &F0Contour, b: &F0Contour) -> Result<Option<f64>> {
    if a.frames() != b.frames() {
        return Err(Error::shape("f0_pcc", &[a.frames()], &[b.frames()]));
    }
    let pairs: Vec<(f64, f64)> = (0..a.frames())
        .filter(|&t| a.voiced[t] && b.voiced[t])
        .map(|t| (a.f0_hz[t], b.f0_hz[t]))
        .collect();
    if pairs.len() < 2 {
        return Ok(None);
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mel_l1: f64,
    pub f0_pcc: Option<f64>,
    /// Fraction of frames whose voicing decisions agree.
    pub voicing_agreement: f64,
}

impl EvalReport {
    /// `key=value` lines; an undefined correlation is written as `undefined`.
    pub fn to_kv(&self) -> String {
        let pcc = self
            .f0_pcc
            .map_or_else(|| "undefined".to_string(), |v| v.to_string());
        format!(
            "mel_l1={}\nf0_pcc={pcc}\nvoicing_agreement={}\n",
            self.mel_l1, self.voicing_agreement
        )
    }
}

/// Compares a synthesized utterance to its target over their common frames.
pub fn eval_report(target: &AudioBuffer, synth: &AudioBuffer) -> Result<EvalReport> {
    if target.sample_rate != synth.sample_rate {
        return Err(Error::Contract(format!(
            "sample rates differ: {} vs {}",
            target.sample_rate, synth.sample_rate
        )));
    }
    if target.len().abs_diff(synth.len()) >= HOP {
        return Err(Error::Contract(format!(
            "durations differ by {} samples (limit {})",
            target.len().abs_diff(synth.len()),
            HOP - 1
        )));
    }
    let (mt, ms) = (log_mel(target)?, log_mel(synth)?);
    let frames = mt.frames.min(ms.frames);
    let mel_l1 = mel_l1(&mt.slice_frames(0, frames), &ms.slice_frames(0, frames))?;
    let (ft, fs) = (extract_f0(target)?, extract_f0(synth)?);
    let frames = ft.frames().min(fs.frames());
    let (ft, fs) = (ft.slice(0, frames), fs.slice(0, frames));
    let agree = (0..frames).filter(|&t| ft.voiced[t] == fs.voiced[t]).count();
    Ok(EvalReport {
        mel_l1,
        f0_pcc: f0_pcc(&ft, &fs)?,
        voicing_agreement: agree as f64 / frames as f64,
    })
}

/// `step,unscaled_mel_l1` CSV with a header row.
pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("step,unscaled_mel_l1\n");
    for (i, v) in history.iter().enumerate() {
        let _ = writeln!(out, "{i},{v}");
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}
