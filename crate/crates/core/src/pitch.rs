//! Fundamental frequency tracking.
//!
//! A reduced RAPT: per frame, the normalised cross-correlation function
//! (NCCF) is evaluated over every lag in the 50-550 Hz range on a 40 ms window,
//! its peaks above 0.3 become voiced candidates, and a Viterbi pass over the
//! candidates plus an unvoiced state picks the contour. Moving between voiced
//! candidates costs `|log2(f / f_prev)|`; switching voicing costs 0.2.

use crate::audio::AudioBuffer;
use crate::features::frame_count;
use crate::{Error, Result, HOP, SAMPLE_RATE};

pub const F0_MIN: f64 = 50.0;
pub const F0_MAX: f64 = 550.0;
/// Correlation window length (40 ms at 16 kHz); equals the mel window.
pub const CORR_WINDOW: usize = 640;
pub const NCCF_THRESHOLD: f64 = 0.3;
pub const VOICING_SWITCH_COST: f64 = 0.2;
/// Penalty slope favouring short lags, as in RAPT.
const LAG_WEIGHT: f64 = 0.3;
const MAX_CANDIDATES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct F0Contour {
    /// Per-frame F0 in Hz, exactly 0 on unvoiced frames.
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
    pub frame_rate: f64,
}

impl F0Contour {
    /// Builds a contour from raw frequencies; non-positive entries are unvoiced.
    pub fn from_hz(f0_hz: Vec<f64>) -> Self {
        let voiced = f0_hz.iter().map(|&f| f > 0.0).collect();
        let f0_hz = f0_hz.into_iter().map(|f| f.max(0.0)).collect();
        Self {
            f0_hz,
            voiced,
            frame_rate: SAMPLE_RATE as f64 / HOP as f64,
        }
    }

    pub fn unvoiced(frames: usize) -> Self {
        Self::from_hz(vec![0.0; frames])
    }

    pub fn frames(&self) -> usize {
        self.f0_hz.len()
    }

    /// Natural log of F0 on voiced frames, 0 elsewhere.
    pub fn lf0(&self) -> Vec<f64> {
        self.f0_hz
            .iter()
            .zip(&self.voiced)
            .map(|(&f, &v)| if v { f.ln() } else { 0.0 })
            .collect()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.voiced.is_empty() {
            return 0.0;
        }
        self.voiced.iter().filter(|&&v| v).count() as f64 / self.voiced.len() as f64
    }

    pub fn slice(&self, start: usize, len: usize) -> F0Contour {
        F0Contour {
            f0_hz: self.f0_hz[start..start + len].to_vec(),
            voiced: self.voiced[start..start + len].to_vec(),
            frame_rate: self.frame_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f0_hz.len() != self.voiced.len() {
            return Err(Error::shape("f0 contour", &[self.f0_hz.len()], &[self.voiced.len()]));
        }
        for (t, (&f, &v)) in self.f0_hz.iter().zip(&self.voiced).enumerate() {
            if v != (f > 0.0) || !f.is_finite() {
                return Err(Error::Contract(format!(
                    "frame {t}: f0 {f} inconsistent with voicing {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    f0: f64,
    /// Local Viterbi cost.
    cost: f64,
}

/// Lag search range in samples, one lag of slack on each side for peak picking.
fn lag_range() -> (usize, usize) {
    let sr = SAMPLE_RATE as f64;
    ((sr / F0_MAX).floor() as usize, (sr / F0_MIN).ceil() as usize)
}

/// NCCF of the window starting at `start` for lags `min_lag..=max_lag`.
/// Samples past the end of the signal read as zero.
pub fn nccf(signal: &[f64], start: usize, min_lag: usize, max_lag: usize) -> Vec<f64> {
    let at = |i: usize| signal.get(i).copied().unwrap_or(0.0);
    let reference: Vec<f64> = (start..start + CORR_WINDOW).map(at).collect();
    let e0: f64 = reference.iter().map(|v| v * v).sum();
    // energy of the lagged window, updated incrementally
    let mut e_lag: f64 = (start + min_lag..start + min_lag + CORR_WINDOW)
        .map(|i| at(i) * at(i))
        .sum();
    let mut out = Vec::with_capacity(max_lag - min_lag + 1);
    for lag in min_lag..=max_lag {
        if lag > min_lag {
            let leaving = at(start + lag - 1);
            let entering = at(start + lag + CORR_WINDOW - 1);
            e_lag += entering * entering - leaving * leaving;
            e_lag = e_lag.max(0.0);
        }
        let denom = (e0 * e_lag).sqrt();
        if denom <= 1e-12 * CORR_WINDOW as f64 {
            out.push(0.0);
            continue;
        }
        let cross: f64 = reference
            .iter()
            .enumerate()
            .map(|(n, r)| r * at(start + lag + n))
            .sum();
        out.push(cross / denom);
    }
    out
}

fn frame_candidates(signal: &[f64], start: usize) -> Vec<Candidate> {
    let (lo, hi) = lag_range();
    let min_lag = lo - 1;
    let max_lag = hi + 1;
    let values = nccf(signal, start, min_lag, max_lag);
    let sr = SAMPLE_RATE as f64;
    let mut found = Vec::new();
    for i in 1..values.len() - 1 {
        let (prev, cur, next) = (values[i - 1], values[i], values[i + 1]);
        if cur <= NCCF_THRESHOLD || cur < prev || cur <= next {
            continue;
        }
        let lag = (min_lag + i) as f64;
        let curvature = prev - 2.0 * cur + next;
        let delta = if curvature < 0.0 {
            (0.5 * (prev - next) / curvature).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let refined_lag = lag + delta;
        let peak = (cur - 0.25 * (prev - next) * delta).min(1.0);
        let f0 = sr / refined_lag;
        if !(F0_MIN..=F0_MAX).contains(&f0) {
            continue;
        }
        let score = peak * (1.0 - LAG_WEIGHT * refined_lag / max_lag as f64);
        found.push((peak, Candidate { f0, cost: 1.0 - score }));
    }
    found.sort_by(|a, b| a.1.cost.total_cmp(&b.1.cost));
    found.truncate(MAX_CANDIDATES);
    found.into_iter().map(|(_, c)| c).collect()
}

/// Tracks F0 at the 100 Hz mel frame rate; frame `t` is analysed on samples
/// `[t*160, t*160 + 640)`.
pub fn extract_f0(audio: &AudioBuffer) -> Result<F0Contour> {
    if audio.sample_rate != SAMPLE_RATE {
        return Err(Error::Input(format!(
            "pitch tracking expects {SAMPLE_RATE} Hz audio, got {}",
            audio.sample_rate
        )));
    }
    if audio.len() < CORR_WINDOW {
        return Ok(F0Contour::unvoiced(1));
    }
    let frames = frame_count(audio.len(), CORR_WINDOW, HOP);
    let mean = audio.samples.iter().sum::<f64>() / audio.len() as f64;
    let signal: Vec<f64> = audio.samples.iter().map(|s| s - mean).collect();
    let candidates: Vec<Vec<Candidate>> = (0..frames)
        .map(|t| frame_candidates(&signal, t * HOP))
        .collect();
    Ok(viterbi(&candidates))
}

fn viterbi(candidates: &[Vec<Candidate>]) -> F0Contour {
    // state 0 is unvoiced, state i > 0 is candidate i - 1
    let unvoiced_cost = |cands: &[Candidate]| {
        cands
            .iter()
            .map(|c| 1.0 - c.cost)
            .fold(0.0, f64::max)
    };
    let mut costs: Vec<f64> = std::iter::once(unvoiced_cost(&candidates[0]))
        .chain(candidates[0].iter().map(|c| c.cost))
        .collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(candidates.len());
    back.push(vec![0; costs.len()]);

    for t in 1..candidates.len() {
        let (prev, cur) = (&candidates[t - 1], &candidates[t]);
        let mut next_costs = Vec::with_capacity(cur.len() + 1);
        let mut pointers = Vec::with_capacity(cur.len() + 1);
        for state in 0..=cur.len() {
            let local = if state == 0 {
                unvoiced_cost(cur)
            } else {
                cur[state - 1].cost
            };
            let (best, arg) = (0..=prev.len())
                .map(|p| {
                    let transition = match (p, state) {
                        (0, 0) => 0.0,
                        (0, _) | (_, 0) => VOICING_SWITCH_COST,
                        (p, s) => (cur[s - 1].f0 / prev[p - 1].f0).log2().abs(),
                    };
                    (costs[p] + transition, p)
                })
                .fold((f64::INFINITY, 0), |acc, x| if x.0 < acc.0 { x } else { acc });
            next_costs.push(best + local);
            pointers.push(arg);
        }
        costs = next_costs;
        back.push(pointers);
    }

    let mut state = (0..costs.len())
        .fold(0, |best, s| if costs[s] < costs[best] { s } else { best });
    let mut f0 = vec![0.0; candidates.len()];
    for t in (0..candidates.len()).rev() {
        if state > 0 {
            f0[t] = candidates[t][state - 1].f0;
        }
        state = back[t][state];
    }
    F0Contour::from_hz(f0)
}

/// Per-sample F0 by linear interpolation between frame centres
/// (`t*hop + hop/2`).
///
/// Unvoiced frames are 0 throughout and interpolation never bridges into
/// them; beyond the outermost centres values are held. Output length is
/// `frames * hop`.
pub fn interpolate_f0_to_samples(contour: &F0Contour, hop: usize) -> Vec<f64> {
    let frames = contour.frames();
    let center = |t: usize| t as f64 * hop as f64 + hop as f64 / 2.0;
    let mut out = vec![0.0; frames * hop];
    for t in 0..frames {
        if !contour.voiced[t] {
            continue;
        }
        let f = contour.f0_hz[t];
        for n in t * hop..(t + 1) * hop {
            let pos = n as f64;
            let neighbour = if pos < center(t) {
                t.checked_sub(1)
            } else if t + 1 < frames {
                Some(t + 1)
            } else {
                None
            };
            out[n] = match neighbour {
                Some(u) if contour.voiced[u] => {
                    let alpha = (pos - center(t)) / (center(u) - center(t));
                    f + alpha * (contour.f0_hz[u] - f)
                }
                _ => f,
            };
        }
    }
    out
}
