//! Mono PCM audio buffers, WAV I/O and windowed-sinc resampling.

use std::path::Path;

use crate::{Error, Result, SAMPLE_RATE};

/// A mono signal at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.is_finite())
    }
}

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::Format(format!("truncated file: {e}")),
        hound::Error::FormatError(msg) => Error::Format(msg.into()),
        hound::Error::UnfinishedSample => Error::Format("trailing partial sample".into()),
        hound::Error::Unsupported => Error::Unsupported("unsupported WAV feature".into()),
        other => Error::Unsupported(other.to_string()),
    }
}

/// Reads a 16-bit PCM or 32-bit float WAV file, downmixes to mono and
/// resamples to 16 kHz.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    // read fully first so that any I/O error hound reports is a truncation
    let bytes = std::fs::read(path.as_ref())?;
    let mut reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::Unsupported(format!("{} channels", spec.channels)));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (format, bits) => {
            return Err(Error::Unsupported(format!("{format:?} with {bits} bits")));
        }
    };
    if interleaved.iter().any(|s| !s.is_finite()) {
        return Err(Error::Format("non-finite sample".into()));
    }
    let channels = spec.channels as usize;
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let audio = AudioBuffer::new(samples, spec.sample_rate);
    Ok(if audio.sample_rate == SAMPLE_RATE {
        audio
    } else {
        resample(&audio, SAMPLE_RATE)
    })
}

/// Writes 16-bit PCM mono; samples are clipped to [-1, 1] and scaled by 32767.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    if !audio.is_finite() {
        return Err(Error::Input("cannot write non-finite samples".into()));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::Write {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Unsupported(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &audio.samples {
        writer.write_sample(quantize(s)).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

pub(crate) fn quantize(sample: f64) -> i16 {
    (sample.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

const KERNEL_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.6;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited rate conversion with a 64-tap Kaiser-windowed sinc kernel.
///
/// The cutoff sits at 0.9 of the lower Nyquist frequency; output length is
/// `round(len * target / source)`.
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> AudioBuffer {
    assert!(target_rate > 0, "target rate must be positive");
    let source_rate = audio.sample_rate;
    if source_rate == target_rate {
        return audio.clone();
    }
    let ratio = source_rate as f64 / target_rate as f64;
    let out_len =
        (audio.len() as f64 * target_rate as f64 / source_rate as f64).round() as usize;
    // cutoff in cycles per input sample
    let cutoff = 0.9 * 0.5 * source_rate.min(target_rate) as f64 / source_rate as f64;
    let half = (KERNEL_TAPS / 2) as f64;
    let norm = bessel_i0(KAISER_BETA);
    let kernel = |d: f64| {
        let r = d / half;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
        2.0 * cutoff * sinc(2.0 * cutoff * d) * window
    };

    let input = &audio.samples;
    let samples = (0..out_len)
        .map(|m| {
            let pos = m as f64 * ratio;
            let base = pos.floor() as isize;
            let first = base - (KERNEL_TAPS as isize / 2 - 1);
            (first..first + KERNEL_TAPS as isize)
                .filter(|&i| i >= 0 && (i as usize) < input.len())
                .map(|i| input[i as usize] * kernel(pos - i as f64))
                .sum()
        })
        .collect();
    AudioBuffer::new(samples, target_rate)
}
