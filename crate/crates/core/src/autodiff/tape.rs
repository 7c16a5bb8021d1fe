use std::collections::BTreeMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Real, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Fixed FFT plan plus analysis/synthesis window shared by the spectral ops.
#[derive(Clone)]
struct SpectralPlan<T: Real> {
    size: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    window: Vec<T>,
}

enum Op<T: Real> {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Scale(Var, T),
    Offset(Var),
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    ExpSigmoid(Var),
    ClampMin(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    OverlapAdd {
        mag: Var,
        phase: Arc<Vec<Complex<T>>>,
        plan: SpectralPlan<T>,
        hop: usize,
        offset: isize,
        norm: Vec<T>,
    },
    StftMagnitude {
        x: Var,
        plan: SpectralPlan<T>,
        hop: usize,
        spectra: Vec<Complex<T>>,
    },
    MelProject {
        x: Var,
        matrix: Arc<Tensor<T>>,
    },
    L1Loss(Var, Var),
    Sum(Var),
    SumLast(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Cumsum {
        x: Var,
        exclusive: bool,
    },
    Reshape(Var),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            },
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sin(..) => "sin",
            Op::ExpSigmoid(..) => "exp_sigmoid",
            Op::ClampMin(..) => "clamp_min",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Upsample { .. } => "linear_interp_upsample",
            Op::OverlapAdd { .. } => "overlap_add_istft",
            Op::StftMagnitude { .. } => "stft_magnitude",
            Op::MelProject { .. } => "mel_project",
            Op::L1Loss(..) => "l1_loss",
            Op::Sum(..) => "sum",
            Op::SumLast(..) => "sum_last",
            Op::SliceRows { .. } => "slice",
            Op::ConcatRows(..) => "concat",
            Op::Cumsum { .. } => "cumsum",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.map.get(&var)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.map.iter().map(|(v, t)| (*v, t))
    }

    pub fn into_map(self) -> BTreeMap<Var, Tensor<T>> {
        self.map
    }
}

/// Append-only record of a forward computation.
///
/// Every op validates shapes, computes its value eagerly and appends a node
/// whose inputs all precede it, so node order is a topological order.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    planner: FftPlanner<T>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn periodic_hann<T: Real>(len: usize) -> Vec<T> {
    (0..len)
        .map(|n| T::of(0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()))
        .collect()
}

impl<T: Real> Tape<T> {
    /// New tape; finite checks are on in test (`f64`) mode.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: T::TEST_MODE,
            planner: FftPlanner::new(),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf; its gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            trainable: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                &sa,
                &sb,
            )
        })?;
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); out_shape.iter().product()];
            let (ta, tb) = (
                broadcast_strides(&sa, &out_shape),
                broadcast_strides(&sb, &out_shape),
            );
            for_each_broadcast(&out_shape, &ta, &tb, |o, i, j| out[o] = f(da[i], db[j]));
            out
        };
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::Binary { kind, a, b }, &[a, b])
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, shift: T) -> Result<Var> {
        self.unary(x, Op::Offset(x), |v| v + shift)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), T::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), T::ln)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sin(x), T::sin)
    }

    /// `2 * sigmoid(x)^ln(10) + 1e-7`, evaluated through a stable softplus.
    pub fn exp_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::ExpSigmoid(x), exp_sigmoid)
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> Result<Var> {
        self.unary(x, Op::ClampMin(x, floor), |v| v.max(floor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Stride-1 convolution over the time axis with same padding.
    ///
    /// `x` is `[frames, c_in]`, `weight` is `[taps, c_in, c_out]` with an odd
    /// tap count, `bias` is `[c_out]`.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] || sw[0] % 2 == 0 {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        if sb != [sw[2]] {
            return Err(Error::shape("conv1d bias", &sb, &sw[2..]));
        }
        let (frames, c_in, taps, c_out) = (sx[0], sx[1], sw[0], sw[2]);
        let pad = taps / 2;
        let (xd, wd, bd) = (self.data(x), self.data(weight), self.data(bias));
        let mut out = Vec::with_capacity(frames * c_out);
        for _ in 0..frames {
            out.extend_from_slice(bd);
        }
        for j in 0..taps {
            let w_tap = &wd[j * c_in * c_out..(j + 1) * c_in * c_out];
            let (t0, t1) = shifted_range(frames, j, pad);
            if t0 >= t1 {
                continue;
            }
            let src = &xd[(t0 + j - pad) * c_in..(t1 + j - pad) * c_in];
            gemm_acc(src, w_tap, &mut out[t0 * c_out..t1 * c_out], t1 - t0, c_in, c_out);
        }
        let value = Tensor::new(vec![frames, c_out], out)?;
        self.push(value, Op::Conv1d { x, weight, bias }, &[x, weight, bias])
    }

    /// Per-row normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::shape("layer_norm", &sx, &[]))?;
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(Error::shape("layer_norm", &sx, self.shape(p)));
            }
        }
        let (xd, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let n = T::of(c as f64);
        let rows = xd.len() / c.max(1);
        let mut normalized = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                normalized.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let value = Tensor::new(sx, out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push(value, op, &[x, gain, bias])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::shape("softmax", &sx, &[]))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(Tensor::new(sx, out)?, Op::Softmax(x), &[x])
    }

    /// Linear interpolation of `[frames, ...]` to `[frames * factor, ...]`.
    ///
    /// Frame `t` sits at sample `t*factor + factor/2`; samples outside the
    /// first and last centres hold the edge value.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || factor == 0 {
            return Err(Error::shape("linear_interp_upsample", &sx, &[factor]));
        }
        let frames = sx[0];
        let width = sx[1..].iter().product::<usize>();
        let xd = self.data(x);
        let mut out = vec![T::zero(); frames * factor * width];
        for n in 0..frames * factor {
            let (i, j, alpha) = interp_weights(n, frames, factor);
            let alpha = T::of(alpha);
            let dst = &mut out[n * width..(n + 1) * width];
            let (ri, rj) = (&xd[i * width..(i + 1) * width], &xd[j * width..(j + 1) * width]);
            for c in 0..width {
                dst[c] = ri[c] + alpha * (rj[c] - ri[c]);
            }
        }
        let mut shape = sx;
        shape[0] = frames * factor;
        self.push(Tensor::new(shape, out)?, Op::Upsample { x, factor }, &[x])
    }

    fn spectral_plan(&mut self, size: usize, win: usize) -> SpectralPlan<T> {
        let mut window = periodic_hann(win);
        window.resize(size, T::zero());
        SpectralPlan {
            size,
            forward: self.planner.plan_fft_forward(size),
            inverse: self.planner.plan_fft_inverse(size),
            window,
        }
    }

    /// Inverse STFT of `mag * e^{i phase}` by weighted overlap-add.
    ///
    /// `mag` is `[frames, fft_size/2 + 1]`; `phase` holds the unit phasors
    /// for the same grid and is a constant. Frame `t` starts at output sample
    /// `t*hop - offset`; frames are windowed with a periodic Hann window and
    /// the sum is divided by the accumulated squared window. Output is
    /// `[out_len]`.
    pub fn overlap_add_istft(
        &mut self,
        mag: Var,
        phase: Arc<Vec<Complex<T>>>,
        fft_size: usize,
        hop: usize,
        offset: isize,
        out_len: usize,
    ) -> Result<Var> {
        let sm = self.shape(mag).to_vec();
        let bins = fft_size / 2 + 1;
        if sm.len() != 2 || sm[1] != bins || phase.len() != sm[0] * bins {
            return Err(Error::shape("overlap_add_istft", &sm, &[phase.len() / bins, bins]));
        }
        let frames = sm[0];
        let plan = self.spectral_plan(fft_size, fft_size);
        let mut out = vec![T::zero(); out_len];
        let mut norm = vec![T::zero(); out_len];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); fft_size];
        let scale = T::one() / T::of(fft_size as f64);
        let md = self.data(mag);
        for t in 0..frames {
            let row = &md[t * bins..(t + 1) * bins];
            let ph = &phase[t * bins..(t + 1) * bins];
            for k in 0..bins {
                buf[k] = ph[k] * row[k];
            }
            for k in bins..fft_size {
                buf[k] = buf[fft_size - k].conj();
            }
            plan.inverse.process(&mut buf);
            let start = t as isize * hop as isize - offset;
            for n in 0..fft_size {
                let pos = start + n as isize;
                if pos < 0 || pos >= out_len as isize {
                    continue;
                }
                let w = plan.window[n];
                out[pos as usize] += w * buf[n].re * scale;
                norm[pos as usize] += w * w;
            }
        }
        let tiny = T::of(1e-10);
        for (o, z) in out.iter_mut().zip(norm.iter_mut()) {
            *z = if *z > tiny { T::one() / *z } else { T::zero() };
            *o *= *z;
        }
        let op = Op::OverlapAdd {
            mag,
            phase,
            plan,
            hop,
            offset,
            norm,
        };
        self.push(Tensor::new(vec![out_len], out)?, op, &[mag])
    }

    /// One-sided STFT magnitude of a 1-D signal with a periodic Hann window
    /// and no centre padding. Output is `[frames, fft_size/2 + 1]`.
    pub fn stft_magnitude(&mut self, x: Var, fft_size: usize, win: usize, hop: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 || win > fft_size || hop == 0 {
            return Err(Error::shape("stft_magnitude", &sx, &[fft_size, win, hop]));
        }
        let len = sx[0];
        let frames = crate::features::frame_count(len, win, hop);
        let bins = fft_size / 2 + 1;
        let plan = self.spectral_plan(fft_size, win);
        let xd = self.data(x);
        let mut spectra = Vec::with_capacity(frames * bins);
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); fft_size];
        for t in 0..frames {
            buf.fill(Complex::new(T::zero(), T::zero()));
            for n in 0..win {
                let s = xd.get(t * hop + n).copied().unwrap_or(T::zero());
                buf[n] = Complex::new(s * plan.window[n], T::zero());
            }
            plan.forward.process(&mut buf);
            for c in &buf[..bins] {
                out.push(c.norm());
            }
            spectra.extend_from_slice(&buf[..bins]);
        }
        let op = Op::StftMagnitude {
            x,
            plan,
            hop,
            spectra,
        };
        self.push(Tensor::new(vec![frames, bins], out)?, op, &[x])
    }

    /// Right-multiplies `[frames, bins]` by the transpose of a fixed
    /// `[mels, bins]` matrix.
    pub fn mel_project(&mut self, x: Var, matrix: Arc<Tensor<T>>) -> Result<Var> {
        let (sx, sm) = (self.shape(x).to_vec(), matrix.shape().to_vec());
        if sx.len() != 2 || sm.len() != 2 || sx[1] != sm[1] {
            return Err(Error::shape("mel_project", &sx, &sm));
        }
        let (frames, bins, mels) = (sx[0], sx[1], sm[0]);
        let (xd, md) = (self.data(x), matrix.data());
        let mut out = vec![T::zero(); frames * mels];
        for t in 0..frames {
            let row = &xd[t * bins..(t + 1) * bins];
            for m in 0..mels {
                out[t * mels + m] = dot(row, &md[m * bins..(m + 1) * bins]);
            }
        }
        self.push(Tensor::new(vec![frames, mels], out)?, Op::MelProject { x, matrix }, &[x])
    }

    /// Mean absolute difference, a scalar.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("l1_loss", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.data(a), self.data(b));
        let total: T = da.iter().zip(db).map(|(&x, &y)| (x - y).abs()).sum();
        let value = Tensor::scalar(total / T::of(da.len().max(1) as f64));
        self.push(value, Op::L1Loss(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::shape("sum_last", &sx, &[]))?;
        let out: Vec<T> = self.data(x).chunks(c).map(|r| r.iter().copied().sum()).collect();
        let value = Tensor::new(sx[..sx.len() - 1].to_vec(), out)?;
        self.push(value, Op::SumLast(x), &[x])
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || start + len > sx[0] {
            return Err(Error::shape("slice", &sx, &[start, len]));
        }
        let width = sx[1..].iter().product::<usize>();
        let data = self.data(x)[start * width..(start + len) * width].to_vec();
        let mut shape = sx;
        shape[0] = len;
        self.push(Tensor::new(shape, data)?, Op::SliceRows { x, start }, &[x])
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.is_empty() || sp[1..] != first[1..] {
                return Err(Error::shape("concat", &first, sp));
            }
            rows += sp[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = first;
        shape[0] = rows;
        self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Running sum along the leading axis; with `exclusive` the first row is
    /// zero and row `n` holds the sum of rows `0..n`.
    pub fn cumsum(&mut self, x: Var, exclusive: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(Error::shape("cumsum", &sx, &[]));
        }
        let width = sx[1..].iter().product::<usize>();
        let xd = self.data(x);
        let mut acc = vec![T::zero(); width];
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(width.max(1)) {
            if exclusive {
                out.extend_from_slice(&acc);
            }
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
            if !exclusive {
                out.extend_from_slice(&acc);
            }
        }
        self.push(Tensor::new(sx, out)?, Op::Cumsum { x, exclusive }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns a gradient for every trainable leaf recorded before `loss`
    /// (zero when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        let mut map = BTreeMap::new();
        for i in 0..=loss.0 {
            let node = &self.nodes[i];
            if !node.trainable {
                continue;
            }
            let data = grads[i]
                .take()
                .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            if self.check_finite && data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            map.insert(Var(i), Tensor::new(node.value.shape().to_vec(), data)?);
        }
        Ok(Gradients { map })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (da, db) = (self.data(a), self.data(b));
                if self.needs(a) {
                    let acc = slot(grads, a, da.len());
                    if sa == sb {
                        for n in 0..g.len() {
                            acc[n] += match kind {
                                Binary::Mul => g[n] * db[n],
                                _ => g[n],
                            };
                        }
                    } else {
                        let shape = node.value.shape();
                        let (ta, tb) = (broadcast_strides(sa, shape), broadcast_strides(sb, shape));
                        for_each_broadcast(shape, &ta, &tb, |o, ia, ib| {
                            acc[ia] += match kind {
                                Binary::Mul => g[o] * db[ib],
                                _ => g[o],
                            };
                        });
                    }
                }
                if self.needs(b) {
                    let acc = slot(grads, b, db.len());
                    let term = |go: T, xa: T| match kind {
                        Binary::Add => go,
                        Binary::Sub => -go,
                        Binary::Mul => go * xa,
                    };
                    if sa == sb {
                        for n in 0..g.len() {
                            acc[n] += term(g[n], da[n]);
                        }
                    } else {
                        let shape = node.value.shape();
                        let (ta, tb) = (broadcast_strides(sa, shape), broadcast_strides(sb, shape));
                        for_each_broadcast(shape, &ta, &tb, |o, ia, ib| {
                            acc[ib] += term(g[o], da[ia]);
                        });
                    }
                }
            }
            Op::Scale(x, factor) => {
                let acc = slot(grads, *x, g.len());
                acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v * *factor);
            }
            Op::Offset(x) | Op::Reshape(x) => {
                let acc = slot(grads, *x, g.len());
                acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                let acc = slot(grads, *x, g.len());
                for n in 0..g.len() {
                    if xd[n] > T::zero() {
                        acc[n] += g[n];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let acc = slot(grads, *x, g.len());
                for n in 0..g.len() {
                    acc[n] += g[n] * out[n] * (T::one() - out[n]);
                }
            }
            Op::Exp(x) => {
                let acc = slot(grads, *x, g.len());
                for n in 0..g.len() {
                    acc[n] += g[n] * out[n];
                }
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                let acc = slot(grads, *x, g.len());
                for n in 0..g.len() {
                    acc[n] += g[n] / xd[n];
                }
            }
            Op::Sin(x) => {
                let xd = self.data(*x);
                let acc = slot(grads, *x, g.len());
                for n in 0..g.len() {
                    acc[n] += g[n] * xd[n].cos();
                }
            }
            Op::ExpSigmoid(x) => {
                let xd = self.data(*x);
                let acc = slot(grads, *x, g.len());
                let ln10 = T::of(std::f64::consts::LN_10);
                for n in 0..g.len() {
                    // d/dx 2 s^p = 2 p s^p (1 - s)
                    let s = sigmoid(xd[n]);
                    let powered = out[n] - T::of(EXP_SIGMOID_FLOOR);
                    acc[n] += g[n] * ln10 * powered * (T::one() - s);
                }
            }
            Op::ClampMin(x, floor) => {
                let xd = self.data(*x);
                let acc = slot(grads, *x, g.len());
                for n in 0..g.len() {
                    if xd[n] > *floor {
                        acc[n] += g[n];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let bd = self.data(*b);
                    let acc = slot(grads, *a, m * k);
                    gemm_acc_bt(g, bd, acc, m, n, k);
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    let acc = slot(grads, *b, k * n);
                    gemm_acc_at(ad, g, acc, m, k, n);
                }
            }
            Op::Conv1d { x, weight, bias } => {
                let (sx, sw) = (self.shape(*x), self.shape(*weight));
                let (frames, c_in, taps, c_out) = (sx[0], sx[1], sw[0], sw[2]);
                let pad = taps / 2;
                if self.needs(*bias) {
                    let acc = slot(grads, *bias, c_out);
                    for row in g.chunks(c_out) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
                if self.needs(*x) {
                    let wd = self.data(*weight);
                    let acc = slot(grads, *x, frames * c_in);
                    for j in 0..taps {
                        let (t0, t1) = shifted_range(frames, j, pad);
                        if t0 >= t1 {
                            continue;
                        }
                        let w_tap = &wd[j * c_in * c_out..(j + 1) * c_in * c_out];
                        let dst = &mut acc[(t0 + j - pad) * c_in..(t1 + j - pad) * c_in];
                        gemm_acc_bt(&g[t0 * c_out..t1 * c_out], w_tap, dst, t1 - t0, c_out, c_in);
                    }
                }
                if self.needs(*weight) {
                    let xd = self.data(*x);
                    let acc = slot(grads, *weight, taps * c_in * c_out);
                    for j in 0..taps {
                        let (t0, t1) = shifted_range(frames, j, pad);
                        if t0 >= t1 {
                            continue;
                        }
                        let src = &xd[(t0 + j - pad) * c_in..(t1 + j - pad) * c_in];
                        let dst = &mut acc[j * c_in * c_out..(j + 1) * c_in * c_out];
                        gemm_acc_at(src, &g[t0 * c_out..t1 * c_out], dst, t1 - t0, c_in, c_out);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let c = self.shape(*gain)[0];
                let gd = self.data(*gain);
                if self.needs(*gain) {
                    let acc = slot(grads, *gain, c);
                    for (grow, hrow) in g.chunks(c).zip(normalized.chunks(c)) {
                        for i in 0..c {
                            acc[i] += grow[i] * hrow[i];
                        }
                    }
                }
                if self.needs(*bias) {
                    let acc = slot(grads, *bias, c);
                    for grow in g.chunks(c) {
                        acc.iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                    }
                }
                if self.needs(*x) {
                    let n = T::of(c as f64);
                    let acc = slot(grads, *x, g.len());
                    for (r, (grow, hrow)) in g.chunks(c).zip(normalized.chunks(c)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for i in 0..c {
                            let dh = grow[i] * gd[i];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[i];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        let dst = &mut acc[r * c..(r + 1) * c];
                        for i in 0..c {
                            let dh = grow[i] * gd[i];
                            dst[i] += inv_std[r] * (dh - mean_dh - hrow[i] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = *self.shape(*x).last().unwrap();
                let acc = slot(grads, *x, g.len());
                for (r, (grow, yrow)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                    let inner: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for i in 0..c {
                        acc[r * c + i] += yrow[i] * (grow[i] - inner);
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let sx = self.shape(*x);
                let frames = sx[0];
                let width = sx[1..].iter().product::<usize>();
                let acc = slot(grads, *x, frames * width);
                for n in 0..frames * factor {
                    let (i, j, alpha) = interp_weights(n, frames, *factor);
                    let alpha = T::of(alpha);
                    let grow = &g[n * width..(n + 1) * width];
                    for c in 0..width {
                        acc[i * width + c] += (T::one() - alpha) * grow[c];
                        acc[j * width + c] += alpha * grow[c];
                    }
                }
            }
            Op::OverlapAdd {
                mag,
                phase,
                plan,
                hop,
                offset,
                norm,
            } => {
                let size = plan.size;
                let bins = size / 2 + 1;
                let frames = self.shape(*mag)[0];
                let out_len = g.len();
                let scaled: Vec<T> = g.iter().zip(norm).map(|(&a, &b)| a * b).collect();
                let acc = slot(grads, *mag, frames * bins);
                let mut buf = vec![Complex::new(T::zero(), T::zero()); size];
                let inv_n = T::one() / T::of(size as f64);
                for t in 0..frames {
                    let start = t as isize * *hop as isize - *offset;
                    for n in 0..size {
                        let pos = start + n as isize;
                        let v = if pos < 0 || pos >= out_len as isize {
                            T::zero()
                        } else {
                            scaled[pos as usize] * plan.window[n]
                        };
                        buf[n] = Complex::new(v, T::zero());
                    }
                    // sum_n g[n] e^{+2 pi i k n / N}
                    plan.inverse.process(&mut buf);
                    let ph = &phase[t * bins..(t + 1) * bins];
                    for k in 0..bins {
                        let weight = if k == 0 || 2 * k == size { T::one() } else { T::of(2.0) };
                        acc[t * bins + k] += weight * inv_n * (ph[k] * buf[k]).re;
                    }
                }
            }
            Op::StftMagnitude {
                x,
                plan,
                hop,
                spectra,
            } => {
                let size = plan.size;
                let bins = size / 2 + 1;
                let frames = spectra.len() / bins;
                let len = self.shape(*x)[0];
                let acc = slot(grads, *x, len);
                let mut buf = vec![Complex::new(T::zero(), T::zero()); size];
                let tiny = T::min_positive_value();
                for t in 0..frames {
                    buf.fill(Complex::new(T::zero(), T::zero()));
                    for k in 0..bins {
                        let c = spectra[t * bins + k];
                        let m = c.norm();
                        if m > tiny {
                            buf[k] = c * (g[t * bins + k] / m);
                        }
                    }
                    plan.inverse.process(&mut buf);
                    for n in 0..size {
                        let pos = t * hop + n;
                        let w = plan.window[n];
                        if pos < len && w != T::zero() {
                            acc[pos] += w * buf[n].re;
                        }
                    }
                }
            }
            Op::MelProject { x, matrix } => {
                let sx = self.shape(*x);
                let (frames, bins) = (sx[0], sx[1]);
                let mels = matrix.shape()[0];
                let md = matrix.data();
                let acc = slot(grads, *x, frames * bins);
                gemm_acc(g, md, acc, frames, mels, bins);
            }
            Op::L1Loss(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let scale = g[0] / T::of(da.len().max(1) as f64);
                let sign = |d: T| {
                    if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                if self.needs(*a) {
                    let acc = slot(grads, *a, da.len());
                    for n in 0..da.len() {
                        acc[n] += scale * sign(da[n] - db[n]);
                    }
                }
                if self.needs(*b) {
                    let acc = slot(grads, *b, db.len());
                    for n in 0..db.len() {
                        acc[n] -= scale * sign(da[n] - db[n]);
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                let acc = slot(grads, *x, len);
                acc.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::SumLast(x) => {
                let c = *self.shape(*x).last().unwrap();
                let acc = slot(grads, *x, g.len() * c);
                for (row, &v) in acc.chunks_mut(c).zip(g) {
                    row.iter_mut().for_each(|a| *a += v);
                }
            }
            Op::SliceRows { x, start } => {
                let len = self.value(*x).len();
                let width = self.value(*x).row_len();
                let acc = slot(grads, *x, len);
                let dst = &mut acc[start * width..start * width + g.len()];
                dst.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
            }
            Op::ConcatRows(parts) => {
                let mut cursor = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        let acc = slot(grads, p, len);
                        acc.iter_mut()
                            .zip(&g[cursor..cursor + len])
                            .for_each(|(a, &v)| *a += v);
                    }
                    cursor += len;
                }
            }
            Op::Cumsum { x, exclusive } => {
                let width = self.value(*x).row_len().max(1);
                let acc = slot(grads, *x, g.len());
                // adjoint of a prefix sum is a suffix sum
                let mut run = vec![T::zero(); width];
                let rows = g.len() / width;
                for r in (0..rows).rev() {
                    let grow = &g[r * width..(r + 1) * width];
                    if !exclusive {
                        run.iter_mut().zip(grow).for_each(|(s, &v)| *s += v);
                    }
                    let dst = &mut acc[r * width..(r + 1) * width];
                    dst.iter_mut().zip(&run).for_each(|(a, &s)| *a += s);
                    if *exclusive {
                        run.iter_mut().zip(grow).for_each(|(s, &v)| *s += v);
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) const EXP_SIGMOID_FLOOR: f64 = 1e-7;

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn exp_sigmoid<T: Real>(v: T) -> T {
    // sigmoid(v)^p = exp(-p * softplus(-v))
    let softplus = if v > T::zero() {
        (-v).exp().ln_1p()
    } else {
        -v + v.exp().ln_1p()
    };
    let p = T::of(std::f64::consts::LN_10);
    T::of(2.0) * (-p * softplus).exp() + T::of(EXP_SIGMOID_FLOOR)
}

/// Frames whose tap `j` reads an in-range input row.
fn shifted_range(frames: usize, j: usize, pad: usize) -> (usize, usize) {
    let t0 = pad.saturating_sub(j);
    let t1 = (frames + pad).saturating_sub(j).min(frames);
    (t0, t1)
}

/// Interpolation neighbours `(i, j, alpha)` of output sample `n`.
fn interp_weights(n: usize, frames: usize, factor: usize) -> (usize, usize, f64) {
    let pos = (n as f64 - factor as f64 / 2.0) / factor as f64;
    if pos <= 0.0 {
        return (0, 0, 0.0);
    }
    let i = pos.floor() as usize;
    if i + 1 >= frames {
        return (frames - 1, frames - 1, 0.0);
    }
    (i, i + 1, pos - i as f64)
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `c[m,n] += a[m,k] * b[k,n]`.
fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`.
fn gemm_acc_bt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
fn gemm_acc_at<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}
