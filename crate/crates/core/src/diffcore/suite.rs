//! The full gradient suite: every primitive (with respect to each operand) and
//! three composite micro-networks, each checked at many seeded points.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::gradcheck::{grad_check_coords, Objective};
use super::kernels::Padding;
use super::real::Real;
use super::tape::{spectral_mix_dims, Activation, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::{self, normal_tensor};

/// Tolerance every entry must meet.
pub const SUITE_TOLERANCE: f64 = 5e-3;
pub const SUITE_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    DenseX,
    DenseW,
    DenseB,
    ConvX { stride: usize, padding: Padding },
    ConvK { stride: usize, padding: Padding },
    BiasX,
    BiasB,
    SpectralX,
    SpectralMix,
    Act(Activation),
    Softplus,
    Gap,
    Upsample,
    AvgPool,
    SoftmaxChannels,
    SoftmaxCe,
    SoftmaxCeSoft,
    Add,
    Sub,
    Mul,
    DivNum,
    DivDen,
    MulScalar,
    Scale,
    Offset,
    Sum,
    Mean,
    SumSq,
    Concat,
    Channel,
    ModulateX,
    ModulateScale,
    ModulateShift,
    NoiseX,
    NoiseMap,
    NoiseGain,
    /// conv2d -> relu -> gap -> dense
    NetConvGap,
    /// dense -> tanh -> dense -> leaky -> dense
    NetMlp,
    /// spectral -> leaky -> upsample -> conv -> softmax cross-entropy
    NetSpectralSeg,
}

impl Kind {
    fn name(self) -> String {
        match self {
            Kind::ConvX { stride, padding } => format!("conv2d/x/s{stride}/{padding:?}").to_lowercase(),
            Kind::ConvK { stride, padding } => format!("conv2d/k/s{stride}/{padding:?}").to_lowercase(),
            Kind::Act(a) => format!("activation/{a:?}").to_lowercase(),
            k => format!("{k:?}")
                .chars()
                .flat_map(|c| {
                    if c.is_ascii_uppercase() {
                        vec!['_', c.to_ascii_lowercase()]
                    } else {
                        vec![c]
                    }
                })
                .collect::<String>()
                .trim_start_matches('_')
                .to_string(),
        }
    }

    fn has_kinks(self) -> bool {
        matches!(
            self,
            Kind::Act(Activation::Relu | Activation::LeakyRelu) | Kind::NetConvGap | Kind::NetMlp | Kind::NetSpectralSeg
        )
    }

    fn all() -> Vec<Kind> {
        use Kind::*;
        let mut v = vec![DenseX, DenseW, DenseB];
        for stride in [1, 2] {
            for padding in [Padding::Zero, Padding::Toroidal] {
                v.push(ConvX { stride, padding });
                v.push(ConvK { stride, padding });
            }
        }
        v.extend([BiasX, BiasB, SpectralX, SpectralMix]);
        for a in [Activation::Relu, Activation::LeakyRelu, Activation::Tanh, Activation::Sigmoid] {
            v.push(Act(a));
        }
        v.extend([
            Softplus,
            Gap,
            Upsample,
            AvgPool,
            SoftmaxChannels,
            SoftmaxCe,
            SoftmaxCeSoft,
            Add,
            Sub,
            Mul,
            DivNum,
            DivDen,
            MulScalar,
            Scale,
            Offset,
            Sum,
            Mean,
            SumSq,
            Concat,
            Channel,
            ModulateX,
            ModulateScale,
            ModulateShift,
            NoiseX,
            NoiseMap,
            NoiseGain,
            NetConvGap,
            NetMlp,
            NetSpectralSeg,
        ]);
        v
    }

    fn input_dims(self) -> Vec<usize> {
        use Kind::*;
        match self {
            DenseX => vec![5],
            DenseW => vec![3, 5],
            DenseB => vec![3],
            ConvX { .. } => vec![2, 6, 6],
            ConvK { .. } => vec![3, 2, 3, 3],
            BiasX | ModulateX | NoiseX => vec![3, 4, 4],
            BiasB | ModulateScale | ModulateShift | NoiseGain => vec![3],
            NoiseMap => vec![4, 4],
            SpectralX => vec![2, 8, 8],
            SpectralMix => spectral_mix_dims(2, 2, 8, 8, 2).to_vec(),
            SoftmaxChannels => vec![3, 3, 3],
            SoftmaxCe | SoftmaxCeSoft => vec![2, 3, 3],
            Concat => vec![2, 3],
            Channel => vec![3, 2, 2],
            Upsample | AvgPool | Gap => vec![2, 4, 4],
            MulScalar => vec![1],
            NetConvGap => vec![1, 6, 6],
            NetMlp => vec![8],
            NetSpectralSeg => vec![1, 8, 8],
            _ => vec![2, 5],
        }
    }
}

/// One probed function: the primitive applied to `x` with the other operands
/// frozen, then contracted against a fixed random tensor to make a scalar.
struct Probe {
    kind: Kind,
    fixed: Vec<Tensor<f32>>,
    proj: Option<Tensor<f32>>,
}

impl Probe {
    fn new(kind: Kind, rng: &mut impl Rng) -> Result<Self> {
        use Kind::*;
        let n = |rng: &mut _, d: &[usize]| normal_tensor(rng, d);
        let fixed = match kind {
            DenseX => vec![n(rng, &[3, 5]), n(rng, &[3])],
            DenseW => vec![n(rng, &[5]), n(rng, &[3])],
            DenseB => vec![n(rng, &[5]), n(rng, &[3, 5])],
            ConvX { .. } => vec![n(rng, &[3, 2, 3, 3])],
            ConvK { .. } => vec![n(rng, &[2, 6, 6])],
            BiasX => vec![n(rng, &[3])],
            BiasB => vec![n(rng, &[3, 4, 4])],
            SpectralX => vec![n(rng, &spectral_mix_dims(3, 2, 8, 8, 2))],
            SpectralMix => vec![n(rng, &[2, 8, 8])],
            SoftmaxCe => vec![Tensor::from_fn(&[3, 3], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })],
            SoftmaxCeSoft => {
                let p: Vec<f32> = (0..9).map(|_| rng.random_range(0.05..0.95)).collect();
                let mut t = p.iter().map(|v| 1.0 - v).collect::<Vec<_>>();
                t.extend(p);
                vec![Tensor::new(&[2, 3, 3], t)?]
            }
            Add | Sub | Mul | DivNum => vec![n(rng, &[2, 5])],
            DivDen => vec![n(rng, &[2, 5])],
            MulScalar => vec![n(rng, &[2, 5])],
            Concat => vec![n(rng, &[1, 3])],
            ModulateX => vec![n(rng, &[3]), n(rng, &[3])],
            ModulateScale => vec![n(rng, &[3, 4, 4]), n(rng, &[3])],
            ModulateShift => vec![n(rng, &[3, 4, 4]), n(rng, &[3])],
            NoiseX => vec![n(rng, &[4, 4]), n(rng, &[3])],
            NoiseMap => vec![n(rng, &[3, 4, 4]), n(rng, &[3])],
            NoiseGain => vec![n(rng, &[3, 4, 4]), n(rng, &[4, 4])],
            NetConvGap => vec![n(rng, &[4, 1, 3, 3]), n(rng, &[2, 4]), n(rng, &[2])],
            NetMlp => vec![
                n(rng, &[6, 8]),
                n(rng, &[6]),
                n(rng, &[5, 6]),
                n(rng, &[5]),
                n(rng, &[1, 5]),
                n(rng, &[1]),
            ],
            NetSpectralSeg => {
                let mut mix = n(rng, &spectral_mix_dims(3, 1, 8, 8, 2));
                mix.data_mut().iter_mut().for_each(|v| *v *= 0.5);
                let target = Tensor::from_fn(&[16, 16], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
                vec![mix, n(rng, &[2, 3, 3, 3]), target]
            }
            _ => vec![],
        };
        let mut probe = Probe {
            kind,
            fixed,
            proj: None,
        };
        let x = probe.sample(rng);
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x, false);
        let y = probe.apply(&mut tape, xv)?;
        let dims = tape.value(y).dims().to_vec();
        probe.proj = Some(normal_tensor(rng, &dims));
        Ok(probe)
    }

    fn sample(&self, rng: &mut impl Rng) -> Tensor<f32> {
        let dims = self.kind.input_dims();
        match self.kind {
            // keep the denominator away from zero
            Kind::DivDen => Tensor::from_fn(&dims, |_| {
                let m: f32 = rng.random_range(0.5..2.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }),
            _ => normal_tensor(rng, &dims),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        use Kind::*;
        let f: Vec<Var> = self.fixed.iter().map(|t| tape.constant(t.cast())).collect();
        Ok(match self.kind {
            DenseX => tape.dense(x, f[0], f[1])?,
            DenseW => tape.dense(f[0], x, f[1])?,
            DenseB => tape.dense(f[0], f[1], x)?,
            ConvX { stride, padding } => tape.conv2d(x, f[0], stride, padding)?,
            ConvK { stride, padding } => tape.conv2d(f[0], x, stride, padding)?,
            BiasX => tape.bias_add(x, f[0])?,
            BiasB => tape.bias_add(f[0], x)?,
            SpectralX => tape.spectral_conv(x, 2, f[0])?,
            SpectralMix => tape.spectral_conv(f[0], 2, x)?,
            Act(a) => tape.activation(x, a)?,
            Softplus => tape.softplus(x)?,
            Gap => tape.global_avg_pool(x)?,
            Upsample => tape.upsample2x(x)?,
            AvgPool => tape.avg_pool(x, 2)?,
            SoftmaxChannels => tape.softmax_channels(x)?,
            SoftmaxCe => tape.softmax_ce(x, &self.fixed[0].cast())?,
            SoftmaxCeSoft => tape.softmax_ce_soft(x, &self.fixed[0].cast())?,
            Add => tape.add(x, f[0])?,
            Sub => tape.sub(f[0], x)?,
            Mul => tape.mul(x, f[0])?,
            DivNum => {
                let d = tape.offset(f[0], 0.0);
                let d = tape.mul(d, d)?;
                let d = tape.offset(d, 1.0);
                tape.div(x, d)?
            }
            DivDen => tape.div(f[0], x)?,
            MulScalar => tape.mul(f[0], x)?,
            Scale => tape.scale(x, -1.7),
            Offset => {
                let y = tape.offset(x, 0.3);
                tape.mul(y, y)?
            }
            Sum => {
                let s = tape.sum(x);
                tape.mul(s, s)?
            }
            Mean => {
                let s = tape.mean(x);
                tape.mul(s, s)?
            }
            SumSq => tape.sum_sq(x),
            Concat => tape.concat(&[f[0], x])?,
            Channel => tape.channel(x, 1)?,
            ModulateX => tape.modulate(x, f[0], f[1])?,
            ModulateScale => tape.modulate(f[0], x, f[1])?,
            ModulateShift => tape.modulate(f[0], f[1], x)?,
            NoiseX => tape.noise_inject(x, f[0], f[1])?,
            NoiseMap => tape.noise_inject(f[0], x, f[1])?,
            NoiseGain => tape.noise_inject(f[0], f[1], x)?,
            NetConvGap => {
                let h = tape.conv2d(x, f[0], 1, Padding::Zero)?;
                let h = tape.relu(h)?;
                let h = tape.global_avg_pool(h)?;
                tape.dense(h, f[1], f[2])?
            }
            NetMlp => {
                let h = tape.dense(x, f[0], f[1])?;
                let h = tape.tanh(h)?;
                let h = tape.dense(h, f[2], f[3])?;
                let h = tape.leaky_relu(h)?;
                tape.dense(h, f[4], f[5])?
            }
            NetSpectralSeg => {
                let h = tape.spectral_conv(x, 2, f[0])?;
                let h = tape.leaky_relu(h)?;
                let h = tape.upsample2x(h)?;
                let h = tape.conv2d(h, f[1], 1, Padding::Zero)?;
                tape.softmax_ce(h, &self.fixed[2].cast())?
            }
        })
    }
}

impl Objective for Probe {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = self.apply(tape, x)?;
        let r = tape.constant(self.proj.as_ref().expect("projection").cast());
        let m = tape.mul(y, r)?;
        Ok(tape.sum(m))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

/// Runs every primitive and micro-net at `points` seeded inputs.
///
/// Inputs whose rectifier pre-activations fall within `10 * eps` of a kink are
/// redrawn (up to 100 times per point).
pub fn run_suite(seed: u64, points: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut entries = Vec::new();
    for (k, kind) in Kind::all().into_iter().enumerate() {
        let mut r = rng::rng(rng::split_index(seed, k as u64));
        let probe = Probe::new(kind, &mut r)?;
        let mut worst = 0.0f64;
        for _ in 0..points {
            let mut x = probe.sample(&mut r);
            if kind.has_kinks() {
                for _ in 0..100 {
                    let mut tape = Tape::<f32>::new();
                    let xv = tape.leaf(x.clone(), false);
                    probe.apply(&mut tape, xv)?;
                    if tape.kink_margin() >= 10.0 * SUITE_EPS {
                        break;
                    }
                    x = probe.sample(&mut r);
                }
            }
            let coords: Vec<usize> = (0..x.len()).collect();
            let res = grad_check_coords(&probe, &x, SUITE_EPS, &coords)?;
            worst = worst.max(res.max_rel_error);
        }
        entries.push(SuiteEntry {
            name: kind.name(),
            points,
            max_rel_error: worst,
            passed: worst < SUITE_TOLERANCE,
        });
    }
    Ok(SuiteReport {
        entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}
