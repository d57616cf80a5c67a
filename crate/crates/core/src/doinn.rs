//! DOINN-lite: the surrogate lithography model with its loss prediction head.
//!
//! Two encoders look at the mask in parallel. The local path is a pair of
//! strided convolutions; the global path low-passes the mask and mixes
//! channels in the Fourier domain. Their 16x16 outputs are fused, decoded back
//! to 64x64 two-class logits, and three mid-level feature maps feed a small
//! head that predicts the segmentation loss.

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffcore::{spectral_mix_dims, Adam, AdamConfig, Bound, Params, Real, Tape, Tensor, Var};
use crate::error::{LadaError, Result};
use crate::image::{BinaryImage, MaskImage, ResistImage, CANVAS};
use crate::nn::{accumulate, add_conv, add_dense, conv, dense, uniform};
use crate::rng;

pub const GP_MODES: usize = 8;
pub const GP_CHANNELS: usize = 16;
pub const LPM_WIDTH: usize = 32;
/// Margin of the pairwise ranking loss for the loss head.
pub const LPM_MARGIN: f64 = 0.1;
const MIX_NOISE: f32 = 0.02;

/// Channels of the LP, GP and bottleneck taps.
pub const TAP_CHANNELS: [usize; 3] = [32, GP_CHANNELS, 64];
const TAP_NAMES: [&str; 3] = ["lpm.lp", "lpm.gp", "lpm.bottleneck"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DoinnInit {
    /// zero the final 1x1 logits layer
    pub zero_head: bool,
    /// zero the last dense layer of the loss head
    pub zero_lpm: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoinnModel {
    pub params: Params,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[2, 64, 64]`; channel 0 background, channel 1 foreground
    pub logits: Var,
    pub taps: Taps,
}

/// Mid-level feature maps fed to the loss head.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    /// `[32, 16, 16]`
    pub lp: Var,
    /// `[16, 16, 16]`
    pub gp: Var,
    /// `[64, 16, 16]`
    pub bottleneck: Var,
}

impl Taps {
    fn all(&self) -> [Var; 3] {
        [self.lp, self.gp, self.bottleneck]
    }
}

fn spectral_mix(r: &mut impl rand::Rng, co: usize, ci: usize) -> Tensor {
    let h = CANVAS / 2;
    let d = spectral_mix_dims(co, ci, h, h, GP_MODES);
    let per = d[2] * d[3] * 2;
    let noise = uniform(r, &d, MIX_NOISE * 3f32.sqrt());
    Tensor::from_fn(&d, |i| {
        let (o, c, f) = (i / (ci * per), (i / per) % ci, i % per);
        let id = if o % ci == c && f % 2 == 0 { 1.0 } else { 0.0 };
        id + noise.data()[i]
    })
}

impl DoinnModel {
    pub fn init(seed: u64, opts: DoinnInit) -> Self {
        let mut r = rng::rng(seed);
        let mut p = Params::new();
        add_conv(&mut p, &mut r, "lp1", 16, 1, 3, 1.0);
        add_conv(&mut p, &mut r, "lp2", 32, 16, 3, 1.0);
        p.insert("gp1.mix", spectral_mix(&mut r, GP_CHANNELS, 1));
        p.insert("gp1.b", Tensor::zeros(&[GP_CHANNELS]));
        p.insert("gp2.mix", spectral_mix(&mut r, GP_CHANNELS, GP_CHANNELS));
        p.insert("gp2.b", Tensor::zeros(&[GP_CHANNELS]));
        add_conv(&mut p, &mut r, "fuse", 64, 48, 3, 1.0);
        add_conv(&mut p, &mut r, "ir1", 16, 64, 3, 1.0);
        // the second decoder conv also sees the encoded input mask
        add_conv(&mut p, &mut r, "ir2", 8, 17, 3, 1.0);
        add_conv(&mut p, &mut r, "head", 2, 8, 1, if opts.zero_head { 0.0 } else { 0.5 });
        for (name, &c) in TAP_NAMES.iter().zip(&TAP_CHANNELS) {
            add_dense(&mut p, &mut r, name, LPM_WIDTH, c, 1.0);
        }
        add_dense(&mut p, &mut r, "lpm.out", 1, 3 * LPM_WIDTH, if opts.zero_lpm { 0.0 } else { 0.5 });
        DoinnModel { params: p }
    }

    fn check_input<T: Real>(tape: &Tape<T>, x: Var) -> Result<()> {
        match tape.value(x).dims() {
            [1, h, w] if *h == CANVAS && *w == CANVAS => Ok(()),
            d => Err(LadaError::shape("doinn forward", format!("input {d:?}, expected [1, 64, 64]"))),
        }
    }

    fn encode<T: Real>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Taps> {
        Self::check_input(t, x)?;
        let c1 = conv(t, b, "lp1", x, 2)?;
        let c1 = t.leaky_relu(c1)?;
        let c2 = conv(t, b, "lp2", c1, 2)?;
        let lp = t.leaky_relu(c2)?;

        let p = t.avg_pool(x, 2)?;
        let g = t.spectral_conv(p, GP_MODES, b.get("gp1.mix"))?;
        let g = t.bias_add(g, b.get("gp1.b"))?;
        let g = t.leaky_relu(g)?;
        let g = t.spectral_conv(g, GP_MODES, b.get("gp2.mix"))?;
        let g = t.bias_add(g, b.get("gp2.b"))?;
        let g = t.leaky_relu(g)?;
        let gp = t.avg_pool(g, 2)?;

        let cat = t.concat(&[lp, gp])?;
        let f = conv(t, b, "fuse", cat, 1)?;
        let bottleneck = t.leaky_relu(f)?;
        Ok(Taps { lp, gp, bottleneck })
    }

    /// Full pass on an encoded `[1, 64, 64]` input.
    pub fn forward<T: Real>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Forward> {
        let taps = self.encode(t, b, x)?;
        let u = t.upsample2x(taps.bottleneck)?;
        let r = conv(t, b, "ir1", u, 1)?;
        let r = t.leaky_relu(r)?;
        let u = t.upsample2x(r)?;
        let u = t.concat(&[u, x])?;
        let r = conv(t, b, "ir2", u, 1)?;
        let r = t.leaky_relu(r)?;
        let logits = conv(t, b, "head", r, 1)?;
        Ok(Forward { logits, taps })
    }

    /// Encoder only; enough for the loss head.
    pub fn forward_taps<T: Real>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Result<Taps> {
        self.encode(t, b, x)
    }

    /// Predicted segmentation loss from the three taps.
    pub fn lpm_predict<T: Real>(&self, t: &mut Tape<T>, b: &Bound, taps: &Taps) -> Result<Var> {
        let mut parts = Vec::with_capacity(3);
        for (name, v) in TAP_NAMES.iter().zip(taps.all()) {
            let g = t.global_avg_pool(v)?;
            let h = dense(t, b, name, g)?;
            parts.push(t.relu(h)?);
        }
        let cat = t.concat(&parts)?;
        let out = dense(t, b, "lpm.out", cat)?;
        t.channel(out, 0)
    }

    /// Logits for a raw `[1, 64, 64]` input, no gradients.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut t = Tape::<f32>::new();
        let b = self.params.bind(&mut t, false);
        let x = t.constant(input.clone());
        let f = self.forward(&mut t, &b, x)?;
        Ok(t.value(f.logits).clone())
    }

    pub fn predict_resist(&self, mask: &MaskImage) -> Result<ResistImage> {
        Ok(resist_from_logits(&self.logits(&mask.encode())?))
    }

    /// Predicted loss for a raw `[1, 64, 64]` input.
    pub fn predict_loss(&self, input: &Tensor) -> Result<f32> {
        let mut t = Tape::<f32>::new();
        let b = self.params.bind(&mut t, false);
        let x = t.constant(input.clone());
        let taps = self.forward_taps(&mut t, &b, x)?;
        let l = self.lpm_predict(&mut t, &b, &taps)?;
        Ok(t.value(l).item())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let params = checkpoint::load(path)?;
        checkpoint::check_layout(&Self::init(0, DoinnInit::default()).params, &params, path)?;
        Ok(DoinnModel { params })
    }
}

/// Per-pixel argmax; ties go to background.
pub fn resist_from_logits(logits: &Tensor) -> ResistImage {
    let (_, h, w) = logits.chw().expect("logits are [2, H, W]");
    let d = logits.data();
    BinaryImage::from_fn(h, w, |y, x| d[h * w + y * w + x] > d[y * w + x])
}

/// Mean per-pixel cross-entropy against a resist label.
pub fn seg_loss<T: Real>(t: &mut Tape<T>, logits: Var, label: &ResistImage) -> Result<Var> {
    t.softmax_ce(logits, &label.to_tensor().cast())
}

/// Result of pairing a batch for the ranking loss.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingLoss<V> {
    pub loss: V,
    /// index of a trailing element left out of an odd batch
    pub dropped: Option<usize>,
}

/// Pairwise margin ranking loss over disjoint pairs `(0,1), (2,3), ...`.
///
/// Each pair contributes `max(0, -sign(l_i - l_j) (p_i - p_j) + margin)`.
pub fn lpm_train_loss<T: Real>(t: &mut Tape<T>, pred: &[Var], truth: &[f64]) -> Result<RankingLoss<Var>> {
    if pred.len() != truth.len() {
        return Err(LadaError::InvalidInput(format!(
            "{} predictions for {} losses",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(LadaError::InvalidInput("ranking loss needs at least 2 samples".into()));
    }
    let dropped = if pred.len() % 2 == 1 {
        warn!("ranking loss: odd batch of {}, dropping the last sample", pred.len());
        Some(pred.len() - 1)
    } else {
        None
    };
    let pairs = pred.len() / 2;
    let mut total: Option<Var> = None;
    for k in 0..pairs {
        let (i, j) = (2 * k, 2 * k + 1);
        let s = (truth[i] - truth[j]).signum() * ((truth[i] != truth[j]) as i32 as f64);
        let d = t.sub(pred[i], pred[j])?;
        let d = t.scale(d, -s);
        let d = t.offset(d, LPM_MARGIN);
        let term = t.relu(d)?;
        total = Some(match total {
            None => term,
            Some(acc) => t.add(acc, term)?,
        });
    }
    let loss = t.scale(total.expect("pairs >= 1"), 1.0 / pairs as f64);
    Ok(RankingLoss { loss, dropped })
}

/// Same loss on plain numbers.
pub fn ranking_loss_value(pred: &[f64], truth: &[f64]) -> f64 {
    let pairs = pred.len().min(truth.len()) / 2;
    if pairs == 0 {
        return 0.0;
    }
    (0..pairs)
        .map(|k| {
            let (i, j) = (2 * k, 2 * k + 1);
            let s = if truth[i] == truth[j] { 0.0 } else { (truth[i] - truth[j]).signum() };
            (-s * (pred[i] - pred[j]) + LPM_MARGIN).max(0.0)
        })
        .sum::<f64>()
        / pairs as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub lpm_weight: f32,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 4,
            lr: 2e-3,
            batch: 16,
            lpm_weight: 1.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(LadaError::InvalidConfig("finetune batch must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LadaError::InvalidConfig(format!("finetune lr must be positive, got {}", self.lr)));
        }
        if !(self.lpm_weight >= 0.0) {
            return Err(LadaError::InvalidConfig("lpm_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// mean segmentation loss over the epoch's samples
    pub seg: f64,
    /// mean ranking loss over batches with at least one pair
    pub lpm: f64,
}

/// A labelled training pair.
pub type Sample = (MaskImage, ResistImage);

struct SampleGrad {
    grads: Vec<Tensor>,
    seg: f64,
    taps: [Tensor; 3],
}

impl DoinnModel {
    fn sample_grad(&self, mask: &MaskImage, label: &ResistImage, scale: f32) -> Result<SampleGrad> {
        let mut t = Tape::<f32>::new();
        let b = self.params.bind(&mut t, true);
        let x = t.constant(mask.encode());
        let f = self.forward(&mut t, &b, x)?;
        let l = seg_loss(&mut t, f.logits, label)?;
        let seg = t.value(l).item() as f64;
        let mut g = t.backward_seeded(l, scale)?;
        let taps = f.taps.all().map(|v| t.value(v).clone());
        Ok(SampleGrad {
            grads: b.grads(&mut g),
            seg,
            taps,
        })
    }

    /// Loss-head gradient of the ranking loss on detached taps.
    fn lpm_grad(&self, taps: &[[Tensor; 3]], truth: &[f64], weight: f32) -> Result<(Vec<Tensor>, f64)> {
        let mut t = Tape::<f32>::new();
        let b = self.params.bind(&mut t, true);
        let mut preds = Vec::with_capacity(taps.len());
        for s in taps {
            let [lp, gp, bottleneck] = s.clone().map(|v| t.constant(v));
            preds.push(self.lpm_predict(&mut t, &b, &Taps { lp, gp, bottleneck })?);
        }
        let r = lpm_train_loss(&mut t, &preds, truth)?;
        let value = t.value(r.loss).item() as f64;
        let mut g = t.backward_seeded(r.loss, weight)?;
        Ok((b.grads(&mut g), value))
    }

    /// Trains on `data` for `cfg.epochs` shuffled passes; returns per-epoch losses.
    ///
    /// The segmentation loss is averaged over each mini-batch; the loss head
    /// sees the taps as constants, so its ranking loss shapes only the head.
    pub fn finetune(&mut self, data: &[Sample], cfg: &FinetuneConfig, seed: u64) -> Result<Vec<EpochLoss>> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(LadaError::InvalidInput("finetune on an empty dataset".into()));
        }
        let mut opt = Adam::for_params(AdamConfig::with_lr(cfg.lr), &self.params);
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng::rng(rng::split_index(seed, epoch as u64)));
            let (mut seg_sum, mut lpm_sum, mut lpm_batches) = (0.0, 0.0, 0usize);
            for chunk in order.chunks(cfg.batch) {
                let scale = 1.0 / chunk.len() as f32;
                let per: Vec<SampleGrad> = chunk
                    .par_iter()
                    .map(|&i| self.sample_grad(&data[i].0, &data[i].1, scale))
                    .collect::<Result<_>>()?;
                let mut acc = None;
                let mut taps = Vec::with_capacity(per.len());
                let mut truth = Vec::with_capacity(per.len());
                for s in per {
                    seg_sum += s.seg;
                    truth.push(s.seg);
                    taps.push(s.taps);
                    accumulate(&mut acc, s.grads);
                }
                let mut grads = acc.expect("non-empty chunk");
                if taps.len() >= 2 && cfg.lpm_weight > 0.0 {
                    let (g, v) = self.lpm_grad(&taps, &truth, cfg.lpm_weight)?;
                    for (a, b) in grads.iter_mut().zip(&g) {
                        for (u, w) in a.data_mut().iter_mut().zip(b.data()) {
                            *u += w;
                        }
                    }
                    lpm_sum += v;
                    lpm_batches += 1;
                }
                opt.step_params(&mut self.params, &grads);
            }
            history.push(EpochLoss {
                seg: seg_sum / data.len() as f64,
                lpm: if lpm_batches > 0 { lpm_sum / lpm_batches as f64 } else { 0.0 },
            });
        }
        Ok(history)
    }

    /// Segmentation loss of one labelled pair under the current parameters.
    pub fn sample_loss(&self, mask: &MaskImage, label: &ResistImage) -> Result<f64> {
        let mut t = Tape::<f32>::new();
        let b = self.params.bind(&mut t, false);
        let x = t.constant(mask.encode());
        let f = self.forward(&mut t, &b, x)?;
        let l = seg_loss(&mut t, f.logits, label)?;
        Ok(t.value(l).item() as f64)
    }
}
