//! WebAssembly bindings for the demo page in `www/`.
//!
//! Three operations are exposed: rendering a steady harmonic-plus-noise
//! voice, log-mel analysis and pitch tracking. The page chains them so a
//! render can be inspected and re-analysed.

use wasm_bindgen::prelude::*;

use voxkit::audio::AudioBuffer;
use voxkit::features::log_mel;
use voxkit::pitch::{extract_f0, F0Contour};
use voxkit::synth::{synth_dsp, SynthParams, NOISE_BINS, N_HARMONICS};
use voxkit::{HOP, SAMPLE_RATE};

fn js_err(e: voxkit::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Controls for [`render_voice`], shared by the page's sliders.
#[wasm_bindgen]
#[derive(Debug, Clone, Copy)]
pub struct Voice {
    /// F0 at the start and end of the render in Hz; 0 gives an unvoiced render.
    pub f0_start: f64,
    pub f0_end: f64,
    pub amplitude: f64,
    /// Harmonic `k` gets weight `k^-tilt` before normalisation.
    pub tilt: f64,
    /// Noise magnitude per STFT bin.
    pub noise: f64,
    /// Vibrato depth as a fraction of F0, at 5 Hz.
    pub vibrato: f64,
}

#[wasm_bindgen]
impl Voice {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Voice {
        Voice {
            f0_start: 140.0,
            f0_end: 180.0,
            amplitude: 0.3,
            tilt: 1.2,
            noise: 0.01,
            vibrato: 0.0,
        }
    }
}

impl Default for Voice {
    fn default() -> Self {
        Self::new()
    }
}

fn params(voice: &Voice, frames: usize) -> (SynthParams, F0Contour) {
    let mut p = SynthParams::zeros(frames);
    let weights: Vec<f64> = (1..=N_HARMONICS).map(|k| (k as f64).powf(-voice.tilt)).collect();
    let total: f64 = weights.iter().sum();
    for t in 0..frames {
        p.a[t] = voice.amplitude.max(0.0);
        for (k, w) in weights.iter().enumerate() {
            p.c[t * N_HARMONICS + k] = w / total;
        }
        for b in 0..NOISE_BINS {
            p.a_n[t * NOISE_BINS + b] = voice.noise.max(0.0);
        }
    }
    let f0 = (0..frames)
        .map(|t| {
            let x = t as f64 / frames.max(2).saturating_sub(1) as f64;
            let base = voice.f0_start + (voice.f0_end - voice.f0_start) * x;
            let wobble = 1.0 + voice.vibrato * (2.0 * std::f64::consts::PI * 5.0 * t as f64 / 100.0).sin();
            if voice.f0_start > 0.0 && voice.f0_end > 0.0 {
                base * wobble
            } else {
                0.0
            }
        })
        .collect();
    (p, F0Contour::from_hz(f0))
}

/// Renders `seconds` of audio at 16 kHz.
#[wasm_bindgen]
pub fn render_voice(voice: &Voice, seconds: f64, seed: u64) -> Result<Vec<f32>, JsError> {
    let frames = ((seconds * SAMPLE_RATE as f64) as usize / HOP).clamp(1, 1000);
    let (p, contour) = params(voice, frames);
    let y = synth_dsp(&p, &contour, seed).map_err(js_err)?;
    Ok(y.samples.iter().map(|&v| v as f32).collect())
}

/// Natural-log mel spectrogram, frame-major with 80 bands per frame.
#[wasm_bindgen]
pub fn analyze_log_mel(samples: &[f32]) -> Result<Vec<f32>, JsError> {
    let audio = AudioBuffer::new(samples.iter().map(|&v| v as f64).collect(), SAMPLE_RATE);
    let mel = log_mel(&audio).map_err(js_err)?;
    Ok(mel.values.iter().map(|&v| v as f32).collect())
}

/// Per-frame F0 in Hz (0 where unvoiced), 100 frames per second.
#[wasm_bindgen]
pub fn track_pitch(samples: &[f32]) -> Result<Vec<f32>, JsError> {
    let audio = AudioBuffer::new(samples.iter().map(|&v| v as f64).collect(), SAMPLE_RATE);
    let contour = extract_f0(&audio).map_err(js_err)?;
    Ok(contour.f0_hz.iter().map(|&v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_seeded_and_sized() {
        let v = Voice::new();
        let a = render_voice(&v, 0.5, 1).unwrap();
        assert_eq!(a.len(), 50 * HOP);
        assert_eq!(a, render_voice(&v, 0.5, 1).unwrap());
        assert_ne!(a, render_voice(&v, 0.5, 2).unwrap());
    }

    #[test]
    fn pitch_of_a_render_follows_the_glide() {
        let v = Voice {
            noise: 0.0,
            ..Voice::new()
        };
        let y = render_voice(&v, 1.0, 0).unwrap();
        let f0 = track_pitch(&y).unwrap();
        let voiced: Vec<f32> = f0.iter().copied().filter(|&f| f > 0.0).collect();
        assert!(voiced.len() > f0.len() * 3 / 4);
        assert!((voiced[2] - 141.0).abs() < 5.0, "{}", voiced[2]);
        assert!((voiced[voiced.len() - 3] - 178.0).abs() < 5.0);
    }

    #[test]
    fn mel_has_eighty_bands_per_frame() {
        let y = render_voice(&Voice::new(), 1.0, 0).unwrap();
        let mel = analyze_log_mel(&y).unwrap();
        assert_eq!(mel.len(), 97 * 80);
    }
}
