//! Short-time Fourier analysis and log-mel features.
//!
//! Framing never centre-pads: frame `t` covers samples `[t*hop, t*hop + win)`,
//! so `floor((len - win) / hop) + 1` frames come out of a signal of `len`
//! samples. Mel, F0 and synthesis frames all share the 160-sample hop.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::AudioBuffer;
use crate::{Error, Result, HOP, SAMPLE_RATE};

pub const MEL_FFT: usize = 640;
pub const MEL_WIN: usize = 640;
pub const MEL_HOP: usize = HOP;
pub const N_MELS: usize = 80;
pub const MEL_FMIN: f64 = 0.0;
pub const MEL_FMAX: f64 = 8000.0;
/// Magnitude floor applied before the logarithm.
pub const AMPLITUDE_FLOOR: f64 = 1e-5;

/// Periodic Hann window of length `len`.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Number of analysis frames for a signal of `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len <= win {
        1
    } else {
        (len - win) / hop + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramComplex {
    pub frames: usize,
    pub bins: usize,
    /// Row-major `frames x bins`.
    pub values: Vec<Complex64>,
    pub fft_size: usize,
    pub hop: usize,
    pub win: usize,
}

impl SpectrogramComplex {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm()).collect()
    }
}

/// One-sided STFT with a periodic Hann window and no centre padding.
///
/// Audio shorter than `win` is zero-padded to a single frame.
pub fn stft(audio: &AudioBuffer, fft_size: usize, win: usize, hop: usize) -> Result<SpectrogramComplex> {
    if win == 0 || hop == 0 || win > fft_size {
        return Err(Error::Input(format!(
            "invalid STFT geometry fft={fft_size} win={win} hop={hop}"
        )));
    }
    if win % hop != 0 {
        return Err(Error::Input(format!("hop {hop} does not divide window {win}")));
    }
    let window = hann(win);
    let bins = fft_size / 2 + 1;
    let frames = frame_count(audio.len(), win, hop);
    let fft = FftPlanner::new().plan_fft_forward(fft_size);
    let mut values = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    for t in 0..frames {
        buf.fill(Complex64::new(0.0, 0.0));
        let start = t * hop;
        for (n, w) in window.iter().enumerate() {
            let s = audio.samples.get(start + n).copied().unwrap_or(0.0);
            buf[n] = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        values.extend_from_slice(&buf[..bins]);
    }
    Ok(SpectrogramComplex {
        frames,
        bins,
        values,
        fft_size,
        hop,
        win,
    })
}

/// Weighted overlap-add inverse of [`stft`].
///
/// Each frame is inverse transformed, multiplied by the synthesis window and
/// accumulated; the sum is divided by the accumulated squared window.
/// Output length is `(frames - 1) * hop + win`.
pub fn istft(spec: &SpectrogramComplex) -> Result<AudioBuffer> {
    let SpectrogramComplex {
        frames,
        bins,
        fft_size,
        hop,
        win,
        ..
    } = *spec;
    if bins != fft_size / 2 + 1 || spec.values.len() != frames * bins || win > fft_size {
        return Err(Error::shape(
            "istft",
            &[frames, bins],
            &[spec.values.len(), fft_size / 2 + 1],
        ));
    }
    let window = hann(win);
    let len = if frames == 0 { 0 } else { (frames - 1) * hop + win };
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let ifft = FftPlanner::new().plan_fft_inverse(fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    for t in 0..frames {
        let frame = spec.frame(t);
        buf[..bins].copy_from_slice(frame);
        for k in bins..fft_size {
            buf[k] = frame[fft_size - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for (n, w) in window.iter().enumerate() {
            out[start + n] += w * buf[n].re / fft_size as f64;
            norm[start + n] += w * w;
        }
    }
    for (o, z) in out.iter_mut().zip(&norm) {
        *o = if *z > 1e-10 { *o / z } else { 0.0 };
    }
    Ok(AudioBuffer::new(out, SAMPLE_RATE))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters on the HTK scale, stored row-major `n_mels x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
    /// Centre frequency of each filter in Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// `magnitudes` is one frame of `bins` values; writes `n_mels` outputs.
    pub fn project(&self, magnitudes: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(magnitudes).map(|(w, x)| w * x).sum();
        }
    }
}

/// Builds the filterbank. Each triangle is sampled at the bin frequencies and
/// rescaled so its largest sampled weight is exactly 1 (no area normalisation).
pub fn mel_filterbank(
    n_mels: usize,
    fft_size: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank> {
    if fmax > sample_rate as f64 / 2.0 || fmin < 0.0 || fmin >= fmax || n_mels == 0 {
        return Err(Error::Input(format!(
            "invalid mel range {fmin}..{fmax} Hz at {sample_rate} Hz"
        )));
    }
    let bins = fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut weights = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * bins..(m + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::Input(format!("mel filter {m} covers no FFT bin")));
        }
        row.iter_mut().for_each(|w| *w /= peak);
    }
    Ok(MelFilterbank {
        n_mels,
        bins,
        weights,
        centers: edges[1..=n_mels].to_vec(),
    })
}

/// The 80-band filterbank used throughout the pipeline.
pub fn default_filterbank() -> MelFilterbank {
    mel_filterbank(N_MELS, MEL_FFT, SAMPLE_RATE, MEL_FMIN, MEL_FMAX)
        .expect("default mel geometry is valid")
}

/// Natural-log mel magnitudes, `frames x 80`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub mels: usize,
    pub values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.mels..(t + 1) * self.mels]
    }

    /// Copy of frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> MelSpectrogram {
        MelSpectrogram {
            frames: len,
            mels: self.mels,
            values: self.values[start * self.mels..(start + len) * self.mels].to_vec(),
        }
    }
}

/// `ln(max(melfb . |STFT|, 1e-5))` with the 640/640/160 geometry.
pub fn log_mel(audio: &AudioBuffer) -> Result<MelSpectrogram> {
    log_mel_with(audio, &default_filterbank())
}

pub fn log_mel_with(audio: &AudioBuffer, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    if audio.sample_rate != SAMPLE_RATE {
        return Err(Error::Input(format!(
            "log-mel expects {SAMPLE_RATE} Hz audio, got {}",
            audio.sample_rate
        )));
    }
    let spec = stft(audio, MEL_FFT, MEL_WIN, MEL_HOP)?;
    let mags = spec.magnitudes();
    let mut values = vec![0.0; spec.frames * fb.n_mels];
    for t in 0..spec.frames {
        let out = &mut values[t * fb.n_mels..(t + 1) * fb.n_mels];
        fb.project(&mags[t * spec.bins..(t + 1) * spec.bins], out);
        out.iter_mut()
            .for_each(|v| *v = v.max(AMPLITUDE_FLOOR).ln());
    }
    Ok(MelSpectrogram {
        frames: spec.frames,
        mels: fb.n_mels,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, len: usize) -> AudioBuffer {
        AudioBuffer::new(
            (0..len)
                .map(|n| (2.0 * PI * freq * n as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
    }

    /// Direct O(N^2) DFT of the Hann-windowed first frame.
    fn reference_dft(x: &[f64], n_fft: usize) -> Vec<Complex64> {
        let w = hann(x.len());
        (0..=n_fft / 2)
            .map(|k| {
                x.iter()
                    .zip(&w)
                    .enumerate()
                    .map(|(n, (v, w))| {
                        Complex64::from_polar(v * w, -2.0 * PI * (k * n) as f64 / n_fft as f64)
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn silence_frame_count() {
        let spec = stft(&AudioBuffer::silence(16000, 16000), 640, 640, 160).unwrap();
        assert_eq!(spec.frames, 97);
        assert_eq!(spec.bins, 321);
        assert!(spec.values.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn empty_and_short_audio_give_one_frame() {
        let spec = stft(&AudioBuffer::silence(0, 16000), 640, 640, 160).unwrap();
        assert_eq!(spec.frames, 1);
        let spec = stft(&AudioBuffer::silence(100, 16000), 640, 640, 160).unwrap();
        assert_eq!(spec.frames, 1);
    }

    #[test]
    fn rejects_bad_geometry() {
        let a = AudioBuffer::silence(1000, 16000);
        assert!(stft(&a, 512, 640, 160).is_err());
        assert!(stft(&a, 640, 640, 150).is_err());
    }

    #[test]
    fn dc_spectrum() {
        let spec = stft(&AudioBuffer::new(vec![1.0; 640], 16000), 640, 640, 160).unwrap();
        let win_sum: f64 = hann(640).iter().sum();
        let f = spec.frame(0);
        assert!((f[0].norm() - win_sum).abs() < 1e-9);
        // the Hann window's own transform leaks into the first bin only
        assert!((f[1].norm() - win_sum / 2.0).abs() < 1e-9);
        for c in &f[2..] {
            assert!(c.norm() < 1e-9);
        }
    }

    #[test]
    fn sine_peak_matches_reference_dft() {
        let audio = tone(1000.0, 16000);
        let spec = stft(&audio, 640, 640, 160).unwrap();
        let reference = reference_dft(&audio.samples[..640], 640);
        for (a, b) in spec.frame(0).iter().zip(&reference) {
            assert!((a - b).norm() < 1e-8);
        }
        let mags: Vec<f64> = spec.frame(5).iter().map(|c| c.norm()).collect();
        let peak = (0..mags.len())
            .max_by(|&a, &b| mags[a].partial_cmp(&mags[b]).unwrap())
            .unwrap();
        assert_eq!(peak, 40);
    }

    #[test]
    fn zero_padded_window() {
        let audio = tone(440.0, 2000);
        let spec = stft(&audio, 1024, 640, 160).unwrap();
        assert_eq!(spec.bins, 513);
        let reference = reference_dft(&audio.samples[..640], 1024);
        for (a, b) in spec.frame(0).iter().zip(&reference) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let audio = tone(333.0, 2000);
        let spec = stft(&audio, 640, 640, 160).unwrap();
        let w = hann(640);
        for t in 0..spec.frames {
            let frame = spec.frame(t);
            let spectral: f64 = frame
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let weight = if k == 0 || k == 320 { 1.0 } else { 2.0 };
                    weight * c.norm_sqr()
                })
                .sum::<f64>()
                / 640.0;
            let temporal: f64 = (0..640)
                .map(|n| (audio.samples[t * 160 + n] * w[n]).powi(2))
                .sum();
            assert!((spectral - temporal).abs() / temporal < 1e-6);
        }
    }

    #[test]
    fn istft_of_zeros_is_zero() {
        let spec = stft(&AudioBuffer::silence(3200, 16000), 640, 640, 160).unwrap();
        let out = istft(&spec).unwrap();
        assert!(out.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn istft_single_dc_frame_is_constant() {
        let spec = stft(&AudioBuffer::new(vec![1.0; 640], 16000), 640, 640, 160).unwrap();
        assert_eq!(spec.frames, 1);
        let out = istft(&spec).unwrap();
        for &s in &out.samples[1..639] {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn istft_rejects_inconsistent_dims() {
        let mut spec = stft(&AudioBuffer::silence(1000, 16000), 640, 640, 160).unwrap();
        spec.bins = 100;
        assert!(matches!(istft(&spec), Err(Error::Shape { .. })));
    }

    #[test]
    fn filterbank_peaks_and_centres() {
        let fb = default_filterbank();
        assert_eq!((fb.n_mels, fb.bins), (80, 321));
        for m in 0..80 {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert_eq!(row.iter().filter(|&&w| w == 1.0).count(), 1, "filter {m}");
        }
        assert!(fb.centers.windows(2).all(|w| w[0] < w[1]));

        let nearest = (0..80)
            .min_by(|&a, &b| {
                (fb.centers[a] - 1000.0)
                    .abs()
                    .partial_cmp(&(fb.centers[b] - 1000.0).abs())
                    .unwrap()
            })
            .unwrap();
        // grid position evaluated independently from the mel map
        let step = hz_to_mel(8000.0) / 81.0;
        let grid_hz = mel_to_hz(step * (nearest + 1) as f64);
        assert!((fb.centers[nearest] - grid_hz).abs() < 1e-9);
        let peak_bin = fb.row(nearest).iter().position(|&w| w == 1.0).unwrap();
        assert!((peak_bin as f64 * 25.0 - grid_hz).abs() <= 25.0);
    }

    #[test]
    fn filterbank_rejects_fmax_above_nyquist() {
        assert!(mel_filterbank(80, 640, 16000, 0.0, 9000.0).is_err());
    }

    #[test]
    fn log_mel_of_silence_is_floor() {
        let mel = log_mel(&AudioBuffer::silence(16000, 16000)).unwrap();
        assert_eq!((mel.frames, mel.mels), (97, 80));
        let floor = (1e-5f64).ln();
        assert!((floor + 11.512_925).abs() < 1e-6);
        assert!(mel.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn log_mel_tone_peaks_at_nearest_band() {
        let fb = default_filterbank();
        let mel = log_mel(&tone(1000.0, 16000)).unwrap();
        let frame = mel.frame(40);
        let argmax = (0..80)
            .max_by(|&a, &b| frame[a].partial_cmp(&frame[b]).unwrap())
            .unwrap();
        let nearest = (0..80)
            .min_by(|&a, &b| {
                (fb.centers[a] - 1000.0)
                    .abs()
                    .partial_cmp(&(fb.centers[b] - 1000.0).abs())
                    .unwrap()
            })
            .unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn log_mel_gain_shift_is_ln2() {
        let a = tone(500.0, 4000);
        let b = AudioBuffer::new(a.samples.iter().map(|s| 2.0 * s).collect(), 16000);
        let (ma, mb) = (log_mel(&a).unwrap(), log_mel(&b).unwrap());
        let floor = AMPLITUDE_FLOOR.ln();
        for (x, y) in ma.values.iter().zip(&mb.values) {
            if *x > floor + 1.0 {
                assert!((y - x - 2f64.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn log_mel_requires_16k() {
        assert!(log_mel(&AudioBuffer::silence(1000, 8000)).is_err());
    }
}
