//! Miniature style-based generator, its discriminator, and adversarial training.
//!
//! A latent `z` is mapped to a style vector `w` that scales and shifts every
//! synthesis block's channels, while a separate noise map per block adds
//! stochastic detail. Both `z` and the noise maps are tape leaves, which is
//! what lets the sampler ascend either domain.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffcore::{Adam, AdamConfig, Bound, Params, Real, Tape, Tensor, Var};
use crate::error::{LadaError, Result};
use crate::image::{MaskImage, CANVAS};
use crate::litho::legalize;
use crate::nn::{accumulate, add_conv, add_dense, conv, dense, scale_all};
use crate::rng::{self, normal_tensor};

pub const LATENT_DIM: usize = 64;
/// Side of each synthesis block's output.
pub const NOISE_SIZES: [usize; 4] = [8, 16, 32, 64];
const BLOCK_IN: [usize; 4] = [64, 32, 16, 16];
const BLOCK_OUT: [usize; 4] = [32, 16, 16, 8];
pub const NOISE_GAIN_INIT: f32 = 0.1;

/// One noise map per synthesis block.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBank {
    pub maps: [Tensor; 4],
}

impl NoiseBank {
    pub fn zeros() -> Self {
        NoiseBank {
            maps: NOISE_SIZES.map(|s| Tensor::zeros(&[s, s])),
        }
    }

    pub fn random(r: &mut impl Rng) -> Self {
        NoiseBank {
            maps: NOISE_SIZES.map(|s| normal_tensor(r, &[s, s])),
        }
    }

    /// Total element count (5440).
    pub fn len(&self) -> usize {
        self.maps.iter().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.maps.iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn from_flat(v: &[f32]) -> Result<Self> {
        let total: usize = NOISE_SIZES.iter().map(|s| s * s).sum();
        if v.len() != total {
            return Err(LadaError::InvalidInput(format!("noise bank needs {total} values, got {}", v.len())));
        }
        let mut off = 0;
        let maps = NOISE_SIZES.map(|s| {
            let t = Tensor::new(&[s, s], v[off..off + s * s].to_vec()).expect("sized");
            off += s * s;
            t
        });
        Ok(NoiseBank { maps })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GeneratorInit {
    /// zero both mapping layers, so `w = z`
    pub zero_mapping: bool,
    /// zero every noise gain, so the output ignores the noise bank
    pub zero_noise_gain: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub params: Params,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub params: Params,
}

impl GeneratorModel {
    pub fn init(seed: u64, opts: GeneratorInit) -> Self {
        let mut r = rng::rng(seed);
        let mut p = Params::new();
        let map_gain = if opts.zero_mapping { 0.0 } else { 0.5 };
        add_dense(&mut p, &mut r, "map1", LATENT_DIM, LATENT_DIM, map_gain);
        add_dense(&mut p, &mut r, "map2", LATENT_DIM, LATENT_DIM, map_gain);
        p.insert("const", normal_tensor(&mut r, &[BLOCK_IN[0], 4, 4]));
        for i in 0..4 {
            let (ci, co) = (BLOCK_IN[i], BLOCK_OUT[i]);
            add_conv(&mut p, &mut r, &format!("blk{i}.conv"), co, ci, 3, 1.0);
            add_dense(&mut p, &mut r, &format!("blk{i}.scale"), co, LATENT_DIM, 0.25);
            add_dense(&mut p, &mut r, &format!("blk{i}.shift"), co, LATENT_DIM, 0.25);
            let g = if opts.zero_noise_gain { 0.0 } else { NOISE_GAIN_INIT };
            p.insert(format!("blk{i}.gain"), Tensor::full(&[co], g));
        }
        add_conv(&mut p, &mut r, "out", 1, BLOCK_OUT[3], 3, 0.5);
        GeneratorModel { params: p }
    }

    /// `w = z + leaky(d2(leaky(d1(z))))`.
    pub fn map_latent<T: Real>(&self, t: &mut Tape<T>, b: &Bound, z: Var) -> Result<Var> {
        if t.value(z).len() != LATENT_DIM {
            return Err(LadaError::shape("map_latent", format!("z {:?}", t.value(z).dims())));
        }
        let h = dense(t, b, "map1", z)?;
        let h = t.leaky_relu(h)?;
        let h = dense(t, b, "map2", h)?;
        let h = t.leaky_relu(h)?;
        t.add(z, h)
    }

    /// Raw `[1, 64, 64]` image in (-1, 1).
    pub fn synthesize<T: Real>(&self, t: &mut Tape<T>, b: &Bound, z: Var, noise: &[Var; 4]) -> Result<Var> {
        let w = self.map_latent(t, b, z)?;
        let mut x = b.get("const");
        for (i, &n) in noise.iter().enumerate() {
            let u = t.upsample2x(x)?;
            let h = conv(t, b, &format!("blk{i}.conv"), u, 1)?;
            let s = dense(t, b, &format!("blk{i}.scale"), w)?;
            let s = t.offset(s, 1.0);
            let sh = dense(t, b, &format!("blk{i}.shift"), w)?;
            let h = t.modulate(h, s, sh)?;
            let h = t.noise_inject(h, n, b.get(&format!("blk{i}.gain")))?;
            x = t.leaky_relu(h)?;
        }
        let o = conv(t, b, "out", x, 1)?;
        t.tanh(o)
    }

    /// Forward pass on plain values.
    pub fn generate(&self, z: &Tensor, noise: &NoiseBank) -> Result<Tensor> {
        let mut t = Tape::<f32>::new();
        let b = self.params.bind(&mut t, false);
        let zv = t.constant(z.clone());
        let nv = noise.maps.clone().map(|m| t.constant(m));
        let out = self.synthesize(&mut t, &b, zv, &nv)?;
        Ok(t.value(out).clone())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let params = checkpoint::load(path)?;
        checkpoint::check_layout(&Self::init(0, GeneratorInit::default()).params, &params, path)?;
        Ok(GeneratorModel { params })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Zero,
    Random,
}

/// A drawn latent pair and the legalized mask it produces.
#[derive(Clone, Debug)]
pub struct Drawn {
    pub z: Tensor,
    pub noise: NoiseBank,
    pub raw: Tensor,
    pub mask: MaskImage,
}

/// `z ~ N(0, 1)`, noise zero or standard normal, mask = legalize(G(z, noise)).
pub fn sample_mask(g: &GeneratorModel, seed: u64, mode: NoiseMode) -> Result<Drawn> {
    let mut r = rng::rng(seed);
    let z = normal_tensor(&mut r, &[LATENT_DIM]);
    let noise = match mode {
        NoiseMode::Zero => NoiseBank::zeros(),
        NoiseMode::Random => NoiseBank::random(&mut r),
    };
    let raw = g.generate(&z, &noise)?;
    let mask = legalize(raw.data(), CANVAS, CANVAS)?;
    Ok(Drawn { z, noise, raw, mask })
}

impl Discriminator {
    pub fn init(seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let mut p = Params::new();
        for (i, (ci, co)) in [(1, 16), (16, 32), (32, 64), (64, 64)].into_iter().enumerate() {
            add_conv(&mut p, &mut r, &format!("d{i}"), co, ci, 3, 1.0);
        }
        add_dense(&mut p, &mut r, "logit", 1, 64, 0.5);
        Discriminator { params: p }
    }

    /// Realness logit of a `[1, 64, 64]` image.
    pub fn score<T: Real>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..4 {
            let c = conv(t, b, &format!("d{i}"), h, 2)?;
            h = t.leaky_relu(c)?;
        }
        let g = t.global_avg_pool(h)?;
        let o = dense(t, b, "logit", g)?;
        t.channel(o, 0)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let params = checkpoint::load(path)?;
        checkpoint::check_layout(&Self::init(0).params, &params, path)?;
        Ok(Discriminator { params })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    pub r1_gamma: f32,
    /// D steps between R1 evaluations
    pub r1_interval: usize,
    /// weight of the pairwise mode-seeking term in the generator loss
    pub mode_seeking: f32,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            steps: 2000,
            lr: 2e-4,
            batch: 16,
            r1_gamma: 1.0,
            r1_interval: 4,
            mode_seeking: 0.1,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LadaError::InvalidConfig(m.into()));
        if self.batch == 0 {
            return bad("gan batch must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("gan lr must be positive");
        }
        if !(self.r1_gamma >= 0.0) {
            return bad("r1_gamma must be >= 0");
        }
        if self.r1_interval == 0 {
            return bad("r1_interval must be >= 1");
        }
        if !(self.mode_seeking >= 0.0 && self.mode_seeking.is_finite()) {
            return bad("mode_seeking must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanStep {
    pub d_loss: f64,
    pub g_loss: f64,
    /// fraction of real samples scored positive
    pub d_real_acc: f64,
    /// fraction of fake samples scored negative
    pub d_fake_acc: f64,
    /// mean squared input-gradient norm on reals, when evaluated this step
    pub r1: Option<f64>,
}

/// Relative step of the central difference used for the R1 parameter gradient.
const R1_FD_STEP: f32 = 1e-2;

struct DGrad {
    grads: Vec<Tensor>,
    logit: f32,
}

fn d_pass(d: &Discriminator, x: &Tensor, seed: f32) -> Result<DGrad> {
    let mut t = Tape::<f32>::new();
    let b = d.params.bind(&mut t, true);
    let xv = t.constant(x.clone());
    let s = d.score(&mut t, &b, xv)?;
    let logit = t.value(s).item();
    let mut g = t.backward_seeded(s, seed)?;
    Ok(DGrad {
        grads: b.grads(&mut g),
        logit,
    })
}

/// Input gradient of the realness logit.
fn d_input_grad(d: &Discriminator, x: &Tensor) -> Result<Tensor> {
    let mut t = Tape::<f32>::new();
    let b = d.params.bind(&mut t, false);
    let xv = t.leaf(x.clone(), true);
    let s = d.score(&mut t, &b, xv)?;
    Ok(t.backward(s)?.wrt(xv))
}

/// Parameter gradient of `0.5 |grad_x D(x)|^2` and the squared norm itself.
///
/// The Hessian-vector product `d/dtheta grad_x D . g` is taken as a central
/// difference of parameter gradients along `g = grad_x D`, avoiding a second
/// order tape.
fn r1_grad(d: &Discriminator, x: &Tensor) -> Result<(Vec<Tensor>, f64)> {
    let g = d_input_grad(d, x)?;
    let norm2: f64 = g.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
    let norm = norm2.sqrt() as f32;
    if norm == 0.0 {
        return Ok((d.params.iter().map(|(_, t)| Tensor::zeros(t.dims())).collect(), 0.0));
    }
    let eps = R1_FD_STEP / norm;
    let shifted = |sgn: f32| {
        Tensor::new(
            x.dims(),
            x.data().iter().zip(g.data()).map(|(a, b)| a + sgn * eps * b).collect(),
        )
        .expect("same dims")
    };
    let plus = d_pass(d, &shifted(1.0), 1.0)?;
    let minus = d_pass(d, &shifted(-1.0), 1.0)?;
    let grads = plus
        .grads
        .iter()
        .zip(&minus.grads)
        .map(|(p, m)| {
            Tensor::new(
                p.dims(),
                p.data().iter().zip(m.data()).map(|(a, b)| (a - b) / (2.0 * eps)).collect(),
            )
            .expect("same dims")
        })
        .collect();
    Ok((grads, norm2))
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

struct Latents {
    z: Tensor,
    noise: NoiseBank,
}

fn draw_latents(seed: u64) -> Latents {
    let mut r = rng::rng(seed);
    Latents {
        z: normal_tensor(&mut r, &[LATENT_DIM]),
        noise: NoiseBank::random(&mut r),
    }
}

/// Generator gradient of `sum softplus(-D(G(z, noise)))` over one or two latent
/// draws; a pair also pays `mode_seeking * |z1 - z2|^2 / |G1 - G2|^2` (mean squares).
fn g_pass(
    g: &GeneratorModel,
    d: &Discriminator,
    draws: &[Latents],
    mode_seeking: f32,
    scale: f32,
) -> Result<(Vec<Tensor>, f64)> {
    let mut t = Tape::<f32>::new();
    let gb = g.params.bind(&mut t, true);
    let db = d.params.bind(&mut t, false);
    let mut loss = None;
    let mut adv = 0.0;
    let mut outs = Vec::with_capacity(draws.len());
    for l in draws {
        let z = t.constant(l.z.clone());
        let n = l.noise.maps.clone().map(|m| t.constant(m));
        let x = g.synthesize(&mut t, &gb, z, &n)?;
        outs.push(x);
        let s = d.score(&mut t, &db, x)?;
        let ns = t.scale(s, -1.0);
        let li = t.softplus(ns)?;
        adv += t.value(li).item() as f64;
        loss = Some(match loss {
            None => li,
            Some(acc) => t.add(acc, li)?,
        });
    }
    let mut loss = loss.ok_or_else(|| LadaError::InvalidInput("g_pass without draws".into()))?;
    if mode_seeking > 0.0 && draws.len() == 2 {
        let dz = draws[0]
            .z
            .data()
            .iter()
            .zip(draws[1].z.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            / LATENT_DIM as f32;
        let diff = t.sub(outs[0], outs[1])?;
        let dx = t.sum_sq(diff);
        let dx = t.scale(dx, 1.0 / (CANVAS * CANVAS) as f64);
        let dx = t.offset(dx, MODE_SEEKING_EPS);
        let num = t.constant(Tensor::scalar(dz * mode_seeking));
        let ms = t.div(num, dx)?;
        loss = t.add(loss, ms)?;
    }
    let mut gr = t.backward_seeded(loss, scale)?;
    Ok((gb.grads(&mut gr), adv))
}

const MODE_SEEKING_EPS: f64 = 1e-5;

/// Alternating non-saturating GAN training with lazy R1 on reals.
///
/// Returns one record per step; `steps = 0` leaves both networks untouched.
pub fn gan_train(
    g: &mut GeneratorModel,
    d: &mut Discriminator,
    data: &[MaskImage],
    cfg: &GanConfig,
    seed: u64,
) -> Result<Vec<GanStep>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LadaError::InvalidInput("gan_train on an empty dataset".into()));
    }
    let reals: Vec<Tensor> = data.iter().map(|m| m.encode()).collect();
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: 0.0,
        beta2: 0.99,
        eps: 1e-8,
    };
    let mut g_opt = Adam::for_params(adam, &g.params);
    let mut d_opt = Adam::for_params(adam, &d.params);
    let mut history = Vec::with_capacity(cfg.steps);
    let inv = 1.0 / cfg.batch as f32;
    for step in 0..cfg.steps {
        let s = rng::split_index(seed, step as u64);
        let mut r = rng::rng(rng::split(s, "reals"));
        let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..reals.len())).collect();
        let real_in: Vec<&Tensor> = idx.iter().map(|&i| &reals[i]).collect();

        // discriminator: softplus(D(fake)) + softplus(-D(real))
        let fakes: Vec<Tensor> = (0..cfg.batch)
            .into_par_iter()
            .map(|k| {
                let l = draw_latents(rng::split_index(rng::split(s, "d_fake"), k as u64));
                g.generate(&l.z, &l.noise)
            })
            .collect::<Result<_>>()?;
        let real_pass: Vec<DGrad> = real_in
            .par_iter()
            // unit seed; the loss derivative is applied once the logit is known
            .map(|&x| d_pass(d, x, 1.0))
            .collect::<Result<_>>()?;
        let fake_pass: Vec<DGrad> = fakes.par_iter().map(|x| d_pass(d, x, 1.0)).collect::<Result<_>>()?;
        let mut acc: Option<Vec<Tensor>> = None;
        let (mut d_loss, mut real_ok, mut fake_ok) = (0.0, 0usize, 0usize);
        for p in real_pass {
            let v = p.logit as f64;
            d_loss += softplus(-v);
            real_ok += (v > 0.0) as usize;
            let mut gr = p.grads;
            scale_all(&mut gr, (-sigmoid(-v)) as f32 * inv);
            accumulate(&mut acc, gr);
        }
        for p in fake_pass {
            let v = p.logit as f64;
            d_loss += softplus(v);
            fake_ok += (v < 0.0) as usize;
            let mut gr = p.grads;
            scale_all(&mut gr, sigmoid(v) as f32 * inv);
            accumulate(&mut acc, gr);
        }
        let mut d_grads = acc.expect("batch >= 1");
        let mut r1 = None;
        if cfg.r1_gamma > 0.0 && step % cfg.r1_interval == 0 {
            let parts: Vec<(Vec<Tensor>, f64)> = real_in.par_iter().map(|&x| r1_grad(d, x)).collect::<Result<_>>()?;
            let mut racc = None;
            let mut norm_sum = 0.0;
            for (gr, n2) in parts {
                norm_sum += n2;
                accumulate(&mut racc, gr);
            }
            let mut rg = racc.expect("batch >= 1");
            // lazy regularisation: gamma/2 * |g|^2, scaled up by the interval
            scale_all(&mut rg, cfg.r1_gamma * cfg.r1_interval as f32 * inv);
            for (a, b) in d_grads.iter_mut().zip(&rg) {
                for (u, v) in a.data_mut().iter_mut().zip(b.data()) {
                    *u += v;
                }
            }
            r1 = Some(norm_sum / cfg.batch as f64);
        }
        d_opt.step_params(&mut d.params, &d_grads);

        // generator: softplus(-D(G(z))), consecutive draws paired for the mode-seeking term
        let group = if cfg.mode_seeking > 0.0 { 2 } else { 1 };
        let starts: Vec<usize> = (0..cfg.batch).step_by(group).collect();
        let g_parts: Vec<(Vec<Tensor>, f64)> = starts
            .into_par_iter()
            .map(|k0| {
                let draws: Vec<Latents> = (k0..(k0 + group).min(cfg.batch))
                    .map(|k| draw_latents(rng::split_index(rng::split(s, "g_fake"), k as u64)))
                    .collect();
                g_pass(g, d, &draws, cfg.mode_seeking, inv)
            })
            .collect::<Result<_>>()?;
        let mut gacc = None;
        let mut g_loss = 0.0;
        for (gr, v) in g_parts {
            g_loss += v;
            accumulate(&mut gacc, gr);
        }
        g_opt.step_params(&mut g.params, &gacc.expect("batch >= 1"));

        let n = cfg.batch as f64;
        history.push(GanStep {
            d_loss: d_loss / n,
            g_loss: g_loss / n,
            d_real_acc: real_ok as f64 / n,
            d_fake_acc: fake_ok as f64 / n,
            r1,
        });
    }
    Ok(history)
}

/// Realness logits of a set of images under `d`.
pub fn score_all(d: &Discriminator, images: &[Tensor]) -> Result<Vec<f32>> {
    images
        .par_iter()
        .map(|x| {
            let mut t = Tape::<f32>::new();
            let b = d.params.bind(&mut t, false);
            let xv = t.constant(x.clone());
            let s = d.score(&mut t, &b, xv)?;
            Ok(t.value(s).item())
        })
        .collect()
}

/// Fractions of `reals` scored positive and of `n` random-noise fakes scored negative.
pub fn discriminator_accuracy(
    g: &GeneratorModel,
    d: &Discriminator,
    reals: &[MaskImage],
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if reals.is_empty() || n == 0 {
        return Err(LadaError::InvalidInput("accuracy needs reals and at least one fake".into()));
    }
    let real: Vec<Tensor> = reals.iter().map(|m| m.encode()).collect();
    let fake: Vec<Tensor> = (0..n as u64)
        .into_par_iter()
        .map(|i| Ok(sample_mask(g, rng::split_index(seed, i), NoiseMode::Random)?.raw))
        .collect::<Result<_>>()?;
    let rs = score_all(d, &real)?;
    let fs = score_all(d, &fake)?;
    let ra = rs.iter().filter(|&&s| s > 0.0).count() as f64 / rs.len() as f64;
    let fa = fs.iter().filter(|&&s| s < 0.0).count() as f64 / fs.len() as f64;
    Ok((ra, fa))
}
