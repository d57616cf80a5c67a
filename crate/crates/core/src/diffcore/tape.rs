//! Reverse-mode tape over dense tensors.
//!
//! Every primitive appends one record holding its operand handles and whatever
//! intermediates the reverse sweep needs. [`Tape::backward`] walks the records
//! from the root towards the leaves exactly once, skipping any record that no
//! gradient-requiring leaf feeds into.

use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex;
use rustfft::FftPlanner;

use super::kernels::{fft2, retained_frequencies, ConvGeom, Padding};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{LadaError, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Slope of the leaky rectifier on the negative side.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn has_kink(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<T> {
    Leaf,
    Dense { x: usize, w: usize, b: usize },
    Conv2d { x: usize, k: usize, geom: ConvGeom, col: Vec<T> },
    BiasAdd { x: usize, b: usize },
    Spectral { x: usize, mix: usize, rows: Vec<usize>, cols: Vec<usize>, spec: Vec<Complex<T>> },
    Act { x: usize, kind: Activation },
    Softplus { x: usize },
    Gap { x: usize },
    Upsample2x { x: usize },
    AvgPool { x: usize, factor: usize },
    SoftmaxChannels { x: usize },
    SoftmaxCe { logits: usize, target: Vec<T>, probs: Vec<T> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { x: usize, c: T },
    Offset { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    SumSq { x: usize },
    Concat { parts: Vec<usize> },
    Channel { x: usize, c: usize },
    Modulate { x: usize, scale: usize, shift: usize },
    NoiseInject { x: usize, noise: usize, gain: usize },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Dense { x, w, b } => vec![*x, *w, *b],
            Conv2d { x, k, .. } => vec![*x, *k],
            BiasAdd { x, b } => vec![*x, *b],
            Spectral { x, mix, .. } => vec![*x, *mix],
            Act { x, .. } | Softplus { x } | Gap { x } | Upsample2x { x } | AvgPool { x, .. } => vec![*x],
            SoftmaxChannels { x } => vec![*x],
            SoftmaxCe { logits, .. } => vec![*logits],
            Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b } => vec![*a, *b],
            Scale { x, .. } | Offset { x } | Sum { x } | Mean { x } | SumSq { x } | Channel { x, .. } => vec![*x],
            Concat { parts } => parts.clone(),
            Modulate { x, scale, shift } => vec![*x, *scale, *shift],
            NoiseInject { x, noise, gain } => vec![*x, *noise, *gain],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    kink_margin: f64,
    planner: FftPlanner<T>,
}

/// Gradients produced by one reverse sweep.
pub struct Gradients<T: Real = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` does not reach the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.dims[v.idx]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        self.grads[v.idx]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.dims[v.idx]))
    }
}

fn same_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(LadaError::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
            planner: FftPlanner::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest |pre-activation| seen by any rectifier on this tape.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable from another tape");
        v.idx
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v)].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v)].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records an input tensor. Only leaves flagged here receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a value onto the tape as a constant, cutting its gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- layers ---------------------------------------------------------

    /// `W x + b` for `x: [n]`, `W: [m, n]`, `b: [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x), self.idx(w), self.idx(b));
        let (xv, wv, bv) = (&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value);
        let n = xv.len();
        let (m, wn) = match wv.dims() {
            [m, wn] => (*m, *wn),
            d => return Err(LadaError::shape("dense", format!("weight must be rank 2, got {d:?}"))),
        };
        if wn != n || bv.len() != m {
            return Err(LadaError::shape(
                "dense",
                format!("x[{n}] W{:?} b[{}]", wv.dims(), bv.len()),
            ));
        }
        let mut out = bv.data().to_vec();
        let (xd, wd) = (xv.data(), wv.data());
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wd[i * n..(i + 1) * n];
            *o = *o + row.iter().zip(xd).map(|(&a, &b)| a * b).sum::<T>();
        }
        let value = Tensor::new(&[m], out)?;
        Ok(self.push(value, Op::Dense { x: xi, w: wi, b: bi }))
    }

    /// Same-padded cross-correlation of `x: [Ci, H, W]` with `k: [Co, Ci, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xi, ki) = (self.idx(x), self.idx(k));
        let (c, h, w) = self.nodes[xi].value.chw()?;
        let (co, kh, kw) = match self.nodes[ki].value.dims() {
            [co, ci, kh, kw] if *ci == c => (*co, *kh, *kw),
            d => {
                return Err(LadaError::shape(
                    "conv2d",
                    format!("kernel {d:?} against input with {c} channels"),
                ))
            }
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(LadaError::InvalidConfig(format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(LadaError::InvalidConfig("conv2d stride must be >= 1".into()));
        }
        let geom = ConvGeom::new(c, h, w, kh, kw, stride, padding);
        let col = geom.im2col(self.nodes[xi].value.data());
        let mut out = vec![T::zero(); co * geom.cols()];
        T::gemm(
            co,
            geom.rows(),
            geom.cols(),
            T::one(),
            self.nodes[ki].value.data(),
            false,
            &col,
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(&[co, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::Conv2d { x: xi, k: ki, geom, col }))
    }

    /// Adds a per-channel bias `b: [C]` to `x: [C, H, W]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x), self.idx(b));
        let (c, h, w) = self.nodes[xi].value.chw()?;
        let bv = self.nodes[bi].value.data();
        if bv.len() != c {
            return Err(LadaError::shape("bias_add", format!("{c} channels, bias {}", bv.len())));
        }
        let mut out = self.nodes[xi].value.data().to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            for v in plane {
                *v = *v + bv[ch];
            }
        }
        let value = Tensor::new(self.nodes[xi].value.dims(), out)?;
        Ok(self.push(value, Op::BiasAdd { x: xi, b: bi }))
    }

    /// Fourier-domain channel mixing restricted to the low-frequency band.
    ///
    /// `mix` has dims `[Co, Ci, ny, nx, 2]` (real, imaginary) where `ny`/`nx`
    /// count the retained frequencies per axis; see [`spectral_mix_dims`].
    pub fn spectral_conv(&mut self, x: Var, modes: usize, mix: Var) -> Result<Var> {
        let (xi, mi) = (self.idx(x), self.idx(mix));
        let (ci, h, w) = self.nodes[xi].value.chw()?;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(LadaError::InvalidConfig(format!(
                "spectral_conv needs power-of-two extents, got {h}x{w}"
            )));
        }
        if modes > h / 2 || modes > w / 2 {
            return Err(LadaError::InvalidConfig(format!(
                "spectral_conv modes {modes} exceed half of {h}x{w}"
            )));
        }
        let rows = retained_frequencies(h, modes);
        let cols = retained_frequencies(w, modes);
        let (ny, nx) = (rows.len(), cols.len());
        let co = match self.nodes[mi].value.dims() {
            [co, c, a, b, 2] if *c == ci && *a == ny && *b == nx => *co,
            d => {
                return Err(LadaError::shape(
                    "spectral_conv",
                    format!("mix {d:?}, expected [_, {ci}, {ny}, {nx}, 2]"),
                ))
            }
        };
        let nf = ny * nx;
        let zero = Complex::new(T::zero(), T::zero());
        let mut spec = vec![zero; ci * nf];
        let mut plane = vec![zero; h * w];
        {
            let xd = self.nodes[xi].value.data();
            for c in 0..ci {
                for (p, v) in plane.iter_mut().enumerate() {
                    *v = Complex::new(xd[c * h * w + p], T::zero());
                }
                fft2(&mut self.planner, &mut plane, h, w, false);
                for (a, &ry) in rows.iter().enumerate() {
                    for (b, &rx) in cols.iter().enumerate() {
                        spec[c * nf + a * nx + b] = plane[ry * w + rx];
                    }
                }
            }
        }
        let md = self.nodes[mi].value.data();
        let norm = T::one() / T::of((h * w) as f64);
        let mut out = vec![T::zero(); co * h * w];
        for o in 0..co {
            plane.iter_mut().for_each(|v| *v = zero);
            for c in 0..ci {
                let base = (o * ci + c) * nf * 2;
                for f in 0..nf {
                    let m = Complex::new(md[base + 2 * f], md[base + 2 * f + 1]);
                    let (a, b) = (f / nx, f % nx);
                    let slot = &mut plane[rows[a] * w + cols[b]];
                    *slot = *slot + m * spec[c * nf + f];
                }
            }
            fft2(&mut self.planner, &mut plane, h, w, true);
            for (p, v) in plane.iter().enumerate() {
                out[o * h * w + p] = v.re * norm;
            }
        }
        let value = Tensor::new(&[co, h, w], out)?;
        Ok(self.push(
            value,
            Op::Spectral {
                x: xi,
                mix: mi,
                rows,
                cols,
                spec,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        if kind.has_kink() {
            let m = xv.data().iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()));
            self.kink_margin = self.kink_margin.min(m);
        }
        let slope = T::of(LEAKY_SLOPE);
        let value = match kind {
            Activation::Relu => xv.map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::LeakyRelu => xv.map(|v| if v > T::zero() { v } else { v * slope }),
            Activation::Tanh => xv.map(|v| v.tanh()),
            Activation::Sigmoid => xv.map(sigmoid),
        };
        Ok(self.push(value, Op::Act { x: xi, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let value = self.nodes[xi].value.map(softplus);
        Ok(self.push(value, Op::Softplus { x: xi }))
    }

    /// Spatial mean per channel: `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let (c, h, w) = self.nodes[xi].value.chw()?;
        let n = T::of((h * w) as f64);
        let out: Vec<T> = self.nodes[xi]
            .value
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::new(&[c], out)?;
        Ok(self.push(value, Op::Gap { x: xi }))
    }

    /// Nearest-neighbour 2x enlargement.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let (c, h, w) = self.nodes[xi].value.chw()?;
        let xd = self.nodes[xi].value.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let src = &xd[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
                let dst = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
                for (x, d) in dst.iter_mut().enumerate() {
                    *d = src[x / 2];
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample2x { x: xi }))
    }

    /// Non-overlapping mean pooling over `factor x factor` blocks.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xi = self.idx(x);
        let (c, h, w) = self.nodes[xi].value.chw()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(LadaError::shape("avg_pool", format!("{h}x{w} by factor {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let xd = self.nodes[xi].value.data();
        let norm = T::one() / T::of((factor * factor) as f64);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let o = ch * oh * ow + (y / factor) * ow + x / factor;
                    out[o] = out[o] + xd[ch * h * w + y * w + x] * norm;
                }
            }
        }
        let value = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool { x: xi, factor }))
    }

    /// Softmax across channels at each pixel of `[C, H, W]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let (c, h, w) = self.nodes[xi].value.chw()?;
        let probs = softmax_planes(self.nodes[xi].value.data(), c, h * w);
        let value = Tensor::new(&[c, h, w], probs)?;
        Ok(self.push(value, Op::SoftmaxChannels { x: xi }))
    }

    /// Mean per-pixel cross-entropy of 2-channel logits against a hard `{0,1}` label map.
    pub fn softmax_ce(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let li = self.idx(logits);
        let (c, h, w) = self.nodes[li].value.chw()?;
        if c != 2 {
            return Err(LadaError::shape("softmax_ce", format!("expected 2 channels, got {c}")));
        }
        if target.len() != h * w {
            return Err(LadaError::shape("softmax_ce", format!("target {:?} for {h}x{w}", target.dims())));
        }
        let mut soft = vec![T::zero(); 2 * h * w];
        for (p, &t) in target.data().iter().enumerate() {
            if t == T::zero() {
                soft[p] = T::one();
            } else if t == T::one() {
                soft[h * w + p] = T::one();
            } else {
                return Err(LadaError::InvalidInput(format!(
                    "softmax_ce target value {t:?} outside {{0,1}}"
                )));
            }
        }
        self.softmax_ce_impl(li, h * w, soft)
    }

    /// Cross-entropy against a per-pixel probability target `[2, H, W]` (no gradient to the target).
    pub fn softmax_ce_soft(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let li = self.idx(logits);
        let (c, h, w) = self.nodes[li].value.chw()?;
        if c != 2 {
            return Err(LadaError::shape("softmax_ce", format!("expected 2 channels, got {c}")));
        }
        same_dims("softmax_ce_soft", self.nodes[li].value.dims(), target.dims())?;
        self.softmax_ce_impl(li, h * w, target.data().to_vec())
    }

    fn softmax_ce_impl(&mut self, li: usize, n: usize, target: Vec<T>) -> Result<Var> {
        let ld = self.nodes[li].value.data();
        let mut probs = vec![T::zero(); 2 * n];
        let mut total = 0.0f64;
        for p in 0..n {
            let (a, b) = (ld[p], ld[n + p]);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let lse = m + (ea + eb).ln();
            probs[p] = ea / (ea + eb);
            probs[n + p] = eb / (ea + eb);
            total += (target[p] * (lse - a) + target[n + p] * (lse - b)).as_f64();
        }
        let value = Tensor::scalar(T::of(total / n as f64));
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits: li,
                target,
                probs,
            },
        ))
    }

    // ---- elementwise / reductions --------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let value = if av.dims() == bv.dims() {
            Tensor::new(
                av.dims(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            )?
        } else if bv.is_scalar() {
            let y = bv.item();
            av.map(|x| f(x, y))
        } else if av.is_scalar() {
            let x = av.item();
            bv.map(|y| f(x, y))
        } else {
            return Err(LadaError::shape(name, format!("{:?} vs {:?}", av.dims(), bv.dims())));
        };
        Ok((ai, bi, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a: ai, b: bi }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a: ai, b: bi }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a: ai, b: bi }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div { a: ai, b: bi }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xi = self.idx(x);
        let c = T::of(c);
        let value = self.nodes[xi].value.map(|v| v * c);
        self.push(value, Op::Scale { x: xi, c })
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let xi = self.idx(x);
        let c = T::of(c);
        let value = self.nodes[xi].value.map(|v| v + c);
        self.push(value, Op::Offset { x: xi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let value = Tensor::scalar(self.nodes[xi].value.sum());
        self.push(value, Op::Sum { x: xi })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let v = &self.nodes[xi].value;
        let value = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        self.push(value, Op::Mean { x: xi })
    }

    /// Sum of squares.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let value = Tensor::scalar(self.nodes[xi].value.data().iter().map(|&v| v * v).sum());
        self.push(value, Op::SumSq { x: xi })
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(LadaError::InvalidInput("concat of nothing".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let tail = self.nodes[idx[0]].value.dims()[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &i in &idx {
            let d = self.nodes[i].value.dims();
            if d[1..] != tail[..] {
                return Err(LadaError::shape("concat", format!("{d:?} vs trailing {tail:?}")));
            }
            lead += d[0];
            out.extend_from_slice(self.nodes[i].value.data());
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(&tail);
        let value = Tensor::new(&dims, out)?;
        Ok(self.push(value, Op::Concat { parts: idx }))
    }

    /// Selects one slice along the leading axis.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let xi = self.idx(x);
        let d = self.nodes[xi].value.dims().to_vec();
        if c >= d[0] {
            return Err(LadaError::shape("channel", format!("index {c} of {d:?}")));
        }
        let tail: Vec<usize> = if d.len() > 1 { d[1..].to_vec() } else { vec![1] };
        let n: usize = tail.iter().product();
        let data = self.nodes[xi].value.data()[c * n..(c + 1) * n].to_vec();
        let value = Tensor::new(&tail, data)?;
        Ok(self.push(value, Op::Channel { x: xi, c }))
    }

    /// `x[c] * scale[c] + shift[c]` per channel.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xi, si, ti) = (self.idx(x), self.idx(scale), self.idx(shift));
        let (c, h, w) = self.nodes[xi].value.chw()?;
        let (sv, tv) = (self.nodes[si].value.data(), self.nodes[ti].value.data());
        if sv.len() != c || tv.len() != c {
            return Err(LadaError::shape("modulate", format!("{c} channels vs {}/{}", sv.len(), tv.len())));
        }
        let mut out = self.nodes[xi].value.data().to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            for v in plane {
                *v = *v * sv[ch] + tv[ch];
            }
        }
        let value = Tensor::new(self.nodes[xi].value.dims(), out)?;
        Ok(self.push(value, Op::Modulate { x: xi, scale: si, shift: ti }))
    }

    /// `x[c] + gain[c] * noise` with one noise plane shared by all channels.
    pub fn noise_inject(&mut self, x: Var, noise: Var, gain: Var) -> Result<Var> {
        let (xi, ni, gi) = (self.idx(x), self.idx(noise), self.idx(gain));
        let (c, h, w) = self.nodes[xi].value.chw()?;
        let (nv, gv) = (self.nodes[ni].value.data(), self.nodes[gi].value.data());
        if nv.len() != h * w || gv.len() != c {
            return Err(LadaError::shape(
                "noise_inject",
                format!("{c}x{h}x{w} vs noise {} gain {}", nv.len(), gv.len()),
            ));
        }
        let mut out = self.nodes[xi].value.data().to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            for (v, &n) in plane.iter_mut().zip(nv) {
                *v = *v + gv[ch] * n;
            }
        }
        let value = Tensor::new(self.nodes[xi].value.dims(), out)?;
        Ok(self.push(value, Op::NoiseInject { x: xi, noise: ni, gain: gi }))
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.backward_seeded(root, T::one())
    }

    /// Reverse sweep with the root cotangent set to `seed` instead of one.
    pub fn backward_seeded(&self, root: Var, seed: T) -> Result<Gradients<T>> {
        if root.tape != self.id || root.idx >= self.nodes.len() {
            return Err(LadaError::InvalidInput("backward root was not recorded on this tape".into()));
        }
        if !self.nodes[root.idx].value.is_scalar() {
            return Err(LadaError::InvalidInput(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root.idx].value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.idx] = Some(Tensor::full(self.nodes[root.idx].value.dims(), seed));
        for i in (0..=root.idx).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let acc = |grads: &mut [Option<Tensor<T>>], j: usize, t: Tensor<T>| match &mut grads[j] {
            Some(e) => e.add_assign(&t),
            slot => *slot = Some(t),
        };
        let dims = |j: usize| self.val(j).dims().to_vec();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xd, wd) = (self.val(*x).data(), self.val(*w).data());
                let (m, n) = (gd.len(), xd.len());
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n];
                    for (r, &gr) in gd.iter().enumerate() {
                        for (d, &wv) in dx.iter_mut().zip(&wd[r * n..(r + 1) * n]) {
                            *d = *d + gr * wv;
                        }
                    }
                    acc(grads, *x, Tensor::new(&dims(*x), dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); m * n];
                    for (r, &gr) in gd.iter().enumerate() {
                        for (d, &xv) in dw[r * n..(r + 1) * n].iter_mut().zip(xd) {
                            *d = gr * xv;
                        }
                    }
                    acc(grads, *w, Tensor::new(&dims(*w), dw).unwrap());
                }
                if self.wants(*b) {
                    acc(grads, *b, Tensor::new(&dims(*b), gd.to_vec()).unwrap());
                }
            }
            Op::Conv2d { x, k, geom, col } => {
                let co = g.dims()[0];
                if self.wants(*k) {
                    let mut dk = vec![T::zero(); co * geom.rows()];
                    T::gemm(co, geom.cols(), geom.rows(), T::one(), gd, false, col, true, T::zero(), &mut dk);
                    acc(grads, *k, Tensor::new(&dims(*k), dk).unwrap());
                }
                if self.wants(*x) {
                    let mut dcol = vec![T::zero(); geom.rows() * geom.cols()];
                    T::gemm(
                        geom.rows(),
                        co,
                        geom.cols(),
                        T::one(),
                        self.val(*k).data(),
                        true,
                        gd,
                        false,
                        T::zero(),
                        &mut dcol,
                    );
                    acc(grads, *x, Tensor::new(&dims(*x), geom.col2im(&dcol)).unwrap());
                }
            }
            Op::BiasAdd { x, b } => {
                if self.wants(*x) {
                    acc(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let c = self.val(*b).len();
                    let db: Vec<T> = gd.chunks(gd.len() / c).map(|p| p.iter().copied().sum()).collect();
                    acc(grads, *b, Tensor::new(&dims(*b), db).unwrap());
                }
            }
            Op::Spectral { x, mix, rows, cols, spec } => {
                self.spectral_backward(*x, *mix, rows, cols, spec, g, grads);
            }
            Op::Act { x, kind } => {
                let xd = self.val(*x).data();
                let yd = self.val(i).data();
                let slope = T::of(LEAKY_SLOPE);
                let dx: Vec<T> = match kind {
                    Activation::Relu => gd
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                    Activation::LeakyRelu => gd
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > T::zero() { g } else { g * slope })
                        .collect(),
                    Activation::Tanh => gd.iter().zip(yd).map(|(&g, &y)| g * (T::one() - y * y)).collect(),
                    Activation::Sigmoid => gd.iter().zip(yd).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
                };
                acc(grads, *x, Tensor::new(&dims(*x), dx).unwrap());
            }
            Op::Softplus { x } => {
                let xd = self.val(*x).data();
                let dx = gd.iter().zip(xd).map(|(&g, &v)| g * sigmoid(v)).collect();
                acc(grads, *x, Tensor::new(&dims(*x), dx).unwrap());
            }
            Op::Gap { x } => {
                let d = dims(*x);
                let hw = self.val(*x).len() / gd.len();
                let n = T::of(hw as f64);
                let dx = gd.iter().flat_map(|&g| std::iter::repeat_n(g / n, hw)).collect();
                acc(grads, *x, Tensor::new(&d, dx).unwrap());
            }
            Op::Upsample2x { x } => {
                let (c, h, w) = self.val(*x).chw().unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let o = ch * h * w + (y / 2) * w + xx / 2;
                            dx[o] = dx[o] + gd[ch * oh * ow + y * ow + xx];
                        }
                    }
                }
                acc(grads, *x, Tensor::new(&dims(*x), dx).unwrap());
            }
            Op::AvgPool { x, factor } => {
                let (c, h, w) = self.val(*x).chw().unwrap();
                let (oh, ow) = (h / factor, w / factor);
                let norm = T::one() / T::of((factor * factor) as f64);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[ch * h * w + y * w + xx] = gd[ch * oh * ow + (y / factor) * ow + xx / factor] * norm;
                        }
                    }
                }
                acc(grads, *x, Tensor::new(&dims(*x), dx).unwrap());
            }
            Op::SoftmaxChannels { x } => {
                let x = *x;
                let s = self.val(i);
                let (c, h, w) = s.chw().unwrap();
                let n = h * w;
                let sd = s.data();
                let mut dx = vec![T::zero(); c * n];
                for p in 0..n {
                    let dot: T = (0..c).map(|k| gd[k * n + p] * sd[k * n + p]).sum();
                    for k in 0..c {
                        dx[k * n + p] = sd[k * n + p] * (gd[k * n + p] - dot);
                    }
                }
                acc(grads, x, Tensor::new(&dims(x), dx).unwrap());
            }
            Op::SoftmaxCe { logits, target, probs } => {
                let n = probs.len() / 2;
                let gs = gd[0] / T::of(n as f64);
                // soft targets need not sum to one in general, so keep the full form
                let dx = (0..2 * n)
                    .map(|q| {
                        let p = q % n;
                        let mass = target[p] + target[n + p];
                        gs * (probs[q] * mass - target[q])
                    })
                    .collect();
                acc(grads, *logits, Tensor::new(&dims(*logits), dx).unwrap());
            }
            Op::Add { a, b } => {
                self.pass_through(*a, g, T::one(), grads);
                self.pass_through(*b, g, T::one(), grads);
            }
            Op::Sub { a, b } => {
                self.pass_through(*a, g, T::one(), grads);
                self.pass_through(*b, g, -T::one(), grads);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let t = elementwise(g, bv, |g, y| g * y);
                    self.accumulate_reduced(*a, t, grads);
                }
                if self.wants(*b) {
                    let t = elementwise(g, av, |g, x| g * x);
                    self.accumulate_reduced(*b, t, grads);
                }
            }
            Op::Div { a, b } => {
                let bv = self.val(*b);
                if self.wants(*a) {
                    let t = elementwise(g, bv, |g, y| g / y);
                    self.accumulate_reduced(*a, t, grads);
                }
                if self.wants(*b) {
                    // d(a/b)/db = -out / b
                    let out = self.val(i);
                    let t = elementwise(&elementwise(g, out, |g, o| -g * o), bv, |v, y| v / y);
                    self.accumulate_reduced(*b, t, grads);
                }
            }
            Op::Scale { x, c } => {
                acc(grads, *x, g.map(|v| v * *c));
            }
            Op::Offset { x } => acc(grads, *x, g.clone()),
            Op::Sum { x } => acc(grads, *x, Tensor::full(&dims(*x), gd[0])),
            Op::Mean { x } => {
                let n = T::of(self.val(*x).len() as f64);
                acc(grads, *x, Tensor::full(&dims(*x), gd[0] / n));
            }
            Op::SumSq { x } => {
                let two = T::of(2.0);
                acc(grads, *x, self.val(*x).map(|v| two * v * gd[0]));
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    if self.wants(p) {
                        acc(grads, p, Tensor::new(&dims(p), gd[off..off + n].to_vec()).unwrap());
                    }
                    off += n;
                }
            }
            Op::Channel { x, c } => {
                let mut dx = Tensor::zeros(&dims(*x));
                let n = gd.len();
                dx.data_mut()[c * n..(c + 1) * n].copy_from_slice(gd);
                acc(grads, *x, dx);
            }
            Op::Modulate { x, scale, shift } => {
                let (c, h, w) = self.val(*x).chw().unwrap();
                let n = h * w;
                let (xd, sd) = (self.val(*x).data(), self.val(*scale).data());
                if self.wants(*x) {
                    let dx = (0..c * n).map(|q| gd[q] * sd[q / n]).collect();
                    acc(grads, *x, Tensor::new(&dims(*x), dx).unwrap());
                }
                if self.wants(*scale) {
                    let ds = (0..c)
                        .map(|ch| (0..n).map(|p| gd[ch * n + p] * xd[ch * n + p]).sum())
                        .collect();
                    acc(grads, *scale, Tensor::new(&dims(*scale), ds).unwrap());
                }
                if self.wants(*shift) {
                    let dt = gd.chunks(n).map(|p| p.iter().copied().sum()).collect();
                    acc(grads, *shift, Tensor::new(&dims(*shift), dt).unwrap());
                }
            }
            Op::NoiseInject { x, noise, gain } => {
                let (c, h, w) = self.val(*x).chw().unwrap();
                let n = h * w;
                let (nd, gn) = (self.val(*noise).data(), self.val(*gain).data());
                if self.wants(*x) {
                    acc(grads, *x, g.clone());
                }
                if self.wants(*noise) {
                    let mut dn = vec![T::zero(); n];
                    for ch in 0..c {
                        for (d, &gv) in dn.iter_mut().zip(&gd[ch * n..(ch + 1) * n]) {
                            *d = *d + gv * gn[ch];
                        }
                    }
                    acc(grads, *noise, Tensor::new(&dims(*noise), dn).unwrap());
                }
                if self.wants(*gain) {
                    let dg = (0..c)
                        .map(|ch| gd[ch * n..(ch + 1) * n].iter().zip(nd).map(|(&a, &b)| a * b).sum())
                        .collect();
                    acc(grads, *gain, Tensor::new(&dims(*gain), dg).unwrap());
                }
            }
        }
    }

    fn pass_through(&self, j: usize, g: &Tensor<T>, sign: T, grads: &mut [Option<Tensor<T>>]) {
        if !self.wants(j) {
            return;
        }
        let t = if sign == T::one() { g.clone() } else { g.map(|v| v * sign) };
        self.accumulate_reduced(j, t, grads);
    }

    /// Accumulates `t` into operand `j`, summing over a scalar broadcast if needed.
    fn accumulate_reduced(&self, j: usize, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let d = self.val(j).dims().to_vec();
        let t = if t.len() != self.val(j).len() {
            Tensor::full(&d, t.sum())
        } else {
            t
        };
        match &mut grads[j] {
            Some(e) => e.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn spectral_backward(
        &self,
        x: usize,
        mix: usize,
        rows: &[usize],
        cols: &[usize],
        spec: &[Complex<T>],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (ci, h, w) = self.val(x).chw().unwrap();
        let co = g.dims()[0];
        let nx = cols.len();
        let nf = rows.len() * nx;
        let zero = Complex::new(T::zero(), T::zero());
        let norm = T::one() / T::of((h * w) as f64);
        let mut planner = FftPlanner::new();
        let mut plane = vec![zero; h * w];
        // cotangent of the retained output spectrum: FFT(g) / (H W)
        let mut gy = vec![zero; co * nf];
        for o in 0..co {
            for (p, v) in plane.iter_mut().enumerate() {
                *v = Complex::new(g.data()[o * h * w + p], T::zero());
            }
            fft2(&mut planner, &mut plane, h, w, false);
            for f in 0..nf {
                gy[o * nf + f] = plane[rows[f / nx] * w + cols[f % nx]] * norm;
            }
        }
        let md = self.val(mix).data();
        if self.wants(mix) {
            let mut dm = vec![T::zero(); md.len()];
            for o in 0..co {
                for c in 0..ci {
                    let base = (o * ci + c) * nf * 2;
                    for f in 0..nf {
                        let v = gy[o * nf + f] * spec[c * nf + f].conj();
                        dm[base + 2 * f] = v.re;
                        dm[base + 2 * f + 1] = v.im;
                    }
                }
            }
            let d = self.val(mix).dims().to_vec();
            let t = Tensor::new(&d, dm).unwrap();
            match &mut grads[mix] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        }
        if self.wants(x) {
            let mut dx = vec![T::zero(); ci * h * w];
            for c in 0..ci {
                plane.iter_mut().for_each(|v| *v = zero);
                for o in 0..co {
                    let base = (o * ci + c) * nf * 2;
                    for f in 0..nf {
                        let m = Complex::new(md[base + 2 * f], md[base + 2 * f + 1]);
                        let slot = &mut plane[rows[f / nx] * w + cols[f % nx]];
                        *slot = *slot + gy[o * nf + f] * m.conj();
                    }
                }
                // Re(N * IFFT(.)) with the unnormalised inverse is just Re(.)
                fft2(&mut planner, &mut plane, h, w, true);
                for (p, v) in plane.iter().enumerate() {
                    dx[c * h * w + p] = v.re;
                }
            }
            let d = self.val(x).dims().to_vec();
            let t = Tensor::new(&d, dx).unwrap();
            match &mut grads[x] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        }
    }
}

/// Dims of the complex mixing tensor for a `h x w` spectral layer.
pub fn spectral_mix_dims(c_out: usize, c_in: usize, h: usize, w: usize, modes: usize) -> [usize; 5] {
    [
        c_out,
        c_in,
        retained_frequencies(h, modes).len(),
        retained_frequencies(w, modes).len(),
        2,
    ]
}

fn elementwise<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if other.len() == g.len() {
        Tensor::new(
            g.dims(),
            g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect(),
        )
        .unwrap()
    } else if other.is_scalar() {
        let y = other.item();
        g.map(|a| f(a, y))
    } else {
        // g is the scalar-broadcast side
        let a = g.item();
        other.map(|b| f(a, b))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Channel softmax over `c` planes of `n` pixels each.
pub(crate) fn softmax_planes<T: Real>(x: &[T], c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * n];
    for p in 0..n {
        let m = (0..c).fold(T::neg_infinity(), |m, k| m.max(x[k * n + p]));
        let mut z = T::zero();
        for k in 0..c {
            let e = (x[k * n + p] - m).exp();
            out[k * n + p] = e;
            z = z + e;
        }
        for k in 0..c {
            out[k * n + p] = out[k * n + p] / z;
        }
    }
    out
}
