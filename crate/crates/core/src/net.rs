//! ConvReLUNorm parameter estimator.
//!
//! A trunk of `conv1d(kernel 3) -> relu -> layer_norm` blocks maps the
//! per-frame conditioning (80 log-mel bands plus log-F0) to a hidden state,
//! and three linear heads produce the synthesizer controls.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::featfile::{read_checkpoint, write_checkpoint, NamedTensor};
use crate::features::{MelSpectrogram, N_MELS};
use crate::pitch::F0Contour;
use crate::synth::{SynthParams, NOISE_BINS, N_HARMONICS};
use crate::{Error, Result};

pub const COND_DIM: usize = N_MELS + 1;
pub const KERNEL: usize = 3;
pub const NORM_EPS: f64 = 1e-5;
const PHASE_SEED_TENSOR: &str = "meta.phase_seed";

/// `2 * sigmoid(x)^ln(10) + 1e-7`.
pub fn exp_sigmoid(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    2.0 * s.powf(std::f64::consts::LN_10) + 1e-7
}

/// Conditioning matrix, `frames x 81`: log-mel bands then log-F0
/// (0 on unvoiced frames).
#[derive(Debug, Clone, PartialEq)]
pub struct CondFeatures {
    pub frames: usize,
    pub values: Vec<f64>,
}

impl CondFeatures {
    pub fn new(mel: &MelSpectrogram, contour: &F0Contour) -> Result<Self> {
        if mel.frames != contour.frames() || mel.mels != N_MELS {
            return Err(Error::shape(
                "conditioning",
                &[mel.frames, mel.mels],
                &[contour.frames(), 1],
            ));
        }
        let lf0 = contour.lf0();
        let mut values = Vec::with_capacity(mel.frames * COND_DIM);
        for (t, &l) in lf0.iter().enumerate() {
            values.extend_from_slice(mel.frame(t));
            values.push(l);
        }
        Ok(Self {
            frames: mel.frames,
            values,
        })
    }

    pub fn slice(&self, start: usize, len: usize) -> CondFeatures {
        CondFeatures {
            frames: len,
            values: self.values[start * COND_DIM..(start + len) * COND_DIM].to_vec(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(vec![self.frames, COND_DIM], &self.values).expect("conditioning shape")
    }
}

/// Trunk width and depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub channels: usize,
    pub blocks: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            channels: 256,
            blocks: 3,
        }
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetWeights {
    shape: NetShape,
    tensors: Vec<(String, Tensor<f64>)>,
}

fn layout(shape: NetShape) -> Vec<(String, Vec<usize>)> {
    let ch = shape.channels;
    let mut out = Vec::new();
    for b in 0..shape.blocks {
        let cin = if b == 0 { COND_DIM } else { ch };
        out.push((format!("block{b}.conv.weight"), vec![KERNEL, cin, ch]));
        out.push((format!("block{b}.conv.bias"), vec![ch]));
        out.push((format!("block{b}.norm.gain"), vec![ch]));
        out.push((format!("block{b}.norm.bias"), vec![ch]));
    }
    for (head, width) in [("amp", 1), ("harm", N_HARMONICS), ("noise", NOISE_BINS)] {
        out.push((format!("head.{head}.weight"), vec![ch, width]));
        out.push((format!("head.{head}.bias"), vec![width]));
    }
    out
}

impl NetWeights {
    /// Weights uniform in `+-sqrt(1/fan_in)` (`fan_in` = input channels times
    /// taps), norm gains 1, every bias 0.
    pub fn init(shape: NetShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(shape)
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let data = if name.ends_with(".weight") {
                    let fan_in: usize = dims[..dims.len() - 1].iter().product();
                    let bound = (1.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                } else if name.ends_with(".gain") {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                };
                (name, Tensor::new(dims, data).expect("layout shape"))
            })
            .collect();
        Self { shape, tensors }
    }

    /// Every tensor zero, including the norm gains.
    pub fn zeros(shape: NetShape) -> Self {
        let tensors = layout(shape)
            .into_iter()
            .map(|(name, dims)| (name, Tensor::zeros(dims)))
            .collect();
        Self { shape, tensors }
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f64>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f64>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>> {
        self.iter_mut().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.all_finite())
    }

    /// Registers every tensor as a trainable leaf, in layout order.
    pub fn leaves<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|(_, t)| {
                let cast = Tensor::from_f64(t.shape().to_vec(), t.data()).expect("same shape");
                tape.leaf(cast)
            })
            .collect()
    }

    /// Rebuilds weights from checkpoint sections; the trunk shape is
    /// inferred and every expected tensor must be present with its shape.
    pub fn from_named(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
        };
        let first = find("block0.conv.weight")?;
        let channels = *first
            .shape
            .last()
            .ok_or_else(|| Error::Format("block0.conv.weight has rank 0".into()))?;
        let blocks = (0..)
            .take_while(|b| tensors.iter().any(|t| t.name == format!("block{b}.conv.weight")))
            .count();
        let shape = NetShape { channels, blocks };
        let mut out = Vec::new();
        for (name, dims) in layout(shape) {
            let t = find(&name)?;
            if t.shape != dims {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {dims:?}",
                    t.shape
                )));
            }
            let data = t.values.iter().map(|&v| v as f64).collect();
            out.push((name, Tensor::new(dims, data)?));
        }
        Ok(Self {
            shape,
            tensors: out,
        })
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.tensors
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect()
    }
}

/// Weights plus the seed of the harmonic initial phases they were fitted
/// with, so a later render reuses the same oscillator phases.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: NetWeights,
    pub phase_seed: u64,
}

impl Checkpoint {
    pub fn to_named(&self) -> Vec<NamedTensor> {
        let mut out = self.weights.to_named();
        // four 16-bit limbs; each is exact in f32
        let limbs = (0..4)
            .map(|i| ((self.phase_seed >> (16 * i)) & 0xffff) as f32)
            .collect();
        out.push(NamedTensor {
            name: PHASE_SEED_TENSOR.into(),
            shape: vec![4],
            values: limbs,
        });
        out
    }

    pub fn from_named(tensors: &[NamedTensor]) -> Result<Self> {
        let weights = NetWeights::from_named(tensors)?;
        let phase_seed = match tensors.iter().find(|t| t.name == PHASE_SEED_TENSOR) {
            Some(t) if t.values.len() == 4 => t
                .values
                .iter()
                .enumerate()
                .map(|(i, &v)| (v as u64 & 0xffff) << (16 * i))
                .sum(),
            Some(_) => return Err(Error::Format(format!("malformed {PHASE_SEED_TENSOR}"))),
            None => 0,
        };
        Ok(Self {
            weights,
            phase_seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.to_named())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named(&read_checkpoint(path)?)
    }
}

/// `layer_norm(relu(conv1d(x)))` over `[frames, channels]`.
pub fn conv_relu_norm_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    gain: Var,
    shift: Var,
) -> Result<Var> {
    let h = tape.conv1d(x, weight, bias)?;
    let h = tape.relu(h)?;
    tape.layer_norm(h, gain, shift, T::of(NORM_EPS))
}

/// Graph handles of the predicted controls: `a` is `[F]`, `c` is
/// `[F, 32]`, `a_n` is `[F, 513]`.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub a: Var,
    pub c: Var,
    pub a_n: Var,
}

/// Forward pass. `leaves` are the handles returned by
/// [`NetWeights::leaves`]; `cond` is `[F, 81]`.
pub fn forward_graph<T: Real>(tape: &mut Tape<T>, shape: NetShape, leaves: &[Var], cond: Var) -> Result<ParamVars> {
    let expected = 4 * shape.blocks + 6;
    if leaves.len() != expected {
        return Err(Error::shape("param-net weights", &[expected], &[leaves.len()]));
    }
    if tape.shape(cond).len() != 2 || tape.shape(cond)[0] == 0 {
        return Err(Error::shape("param-net input", tape.shape(cond), &[0, COND_DIM]));
    }
    let frames = tape.shape(cond)[0];
    let mut h = cond;
    for b in 0..shape.blocks {
        let w = &leaves[4 * b..4 * b + 4];
        h = conv_relu_norm_block(tape, h, w[0], w[1], w[2], w[3])?;
    }
    let heads = &leaves[4 * shape.blocks..];
    let linear = |tape: &mut Tape<T>, i: usize| -> Result<Var> {
        let y = tape.matmul(h, heads[2 * i])?;
        tape.add(y, heads[2 * i + 1])
    };
    let a = linear(tape, 0)?;
    let a = tape.exp_sigmoid(a)?;
    let a = tape.reshape(a, &[frames])?;
    let c = linear(tape, 1)?;
    let c = tape.softmax(c)?;
    let a_n = linear(tape, 2)?;
    let a_n = tape.exp_sigmoid(a_n)?;
    Ok(ParamVars { a, c, a_n })
}

/// Runs the network in 64-bit and returns plain synthesizer controls.
pub fn predict_params(cond: &CondFeatures, weights: &NetWeights) -> Result<SynthParams> {
    if cond.frames == 0 {
        return Err(Error::Input("no conditioning frames".into()));
    }
    let mut tape = Tape::<f64>::new();
    let leaves = weights.leaves(&mut tape);
    let x = tape.constant(cond.to_tensor());
    let p = forward_graph(&mut tape, weights.shape(), &leaves, x)?;
    Ok(SynthParams {
        frames: cond.frames,
        a: tape.value(p.a).data().to_vec(),
        c: tape.value(p.c).data().to_vec(),
        a_n: tape.value(p.a_n).data().to_vec(),
    })
}
