//! Membership-query synthesis: gradient ascent on the generator's style latent
//! or noise maps against a criterion computed by the surrogate.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, Real, Tape, Tensor, Var};
use crate::doinn::DoinnModel;
use crate::error::{LadaError, Result};
use crate::generator::{sample_mask, GeneratorModel, NoiseBank, NoiseMode, LATENT_DIM};
use crate::image::{MaskImage, CANVAS};
use crate::litho::legalize;
use crate::pattern::{generate_pattern, DesignRules};
use crate::rng::{self, normal_tensor};

/// `0.5 ln(2 pi)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
/// Learning-rate halvings allowed over one ascent.
pub const MAX_HALVINGS: usize = 5;
/// Fresh draws tried when a proposal duplicates an earlier one in its batch.
pub const MAX_DEDUP_RETRIES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingStrategy {
    #[serde(rename = "shape")]
    Shape,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "style_dice")]
    StyleDice,
    #[serde(rename = "noise_CE")]
    NoiseCe,
    #[serde(rename = "style_pred")]
    StylePred,
    #[serde(rename = "noise_pred")]
    NoisePred,
}

impl SamplingStrategy {
    pub const ALL: [SamplingStrategy; 6] = [
        SamplingStrategy::Shape,
        SamplingStrategy::Random,
        SamplingStrategy::StyleDice,
        SamplingStrategy::NoiseCe,
        SamplingStrategy::StylePred,
        SamplingStrategy::NoisePred,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplingStrategy::Shape => "shape",
            SamplingStrategy::Random => "random",
            SamplingStrategy::StyleDice => "style_dice",
            SamplingStrategy::NoiseCe => "noise_CE",
            SamplingStrategy::StylePred => "style_pred",
            SamplingStrategy::NoisePred => "noise_pred",
        }
    }

    /// Domain and criterion of the adversarial strategies.
    pub fn ascent(self) -> Option<(Domain, CriterionKind)> {
        match self {
            SamplingStrategy::StyleDice => Some((Domain::Style, CriterionKind::Dice)),
            SamplingStrategy::NoiseCe => Some((Domain::Noise, CriterionKind::Ce)),
            SamplingStrategy::StylePred => Some((Domain::Style, CriterionKind::Pred)),
            SamplingStrategy::NoisePred => Some((Domain::Noise, CriterionKind::Pred)),
            SamplingStrategy::Shape | SamplingStrategy::Random => None,
        }
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingStrategy {
    type Err = LadaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
                LadaError::InvalidInput(format!("unknown strategy {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Style,
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    Pred,
    Dice,
    Ce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AscentConfig {
    /// prior weight in the style domain
    pub lambda1: f64,
    /// prior weight in the noise domain
    pub lambda2: f64,
    pub steps: usize,
    pub lr: f32,
    /// feed raw logits instead of probabilities to the Dice criterion
    pub dice_on_logits: bool,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig {
            lambda1: 0.1,
            lambda2: 0.1,
            steps: 50,
            lr: 0.05,
            dice_on_logits: false,
        }
    }
}

impl AscentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LadaError::InvalidConfig(format!("ascent lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(LadaError::InvalidConfig("prior weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// `(1/d) log N(v; 0, I) = -|v|^2 / (2d) - 0.5 ln 2 pi`.
pub fn log_prior<T: Real>(t: &mut Tape<T>, v: Var) -> Result<Var> {
    let d = t.value(v).len();
    if d == 0 {
        return Err(LadaError::InvalidInput("log_prior of an empty vector".into()));
    }
    let s = t.sum_sq(v);
    let s = t.scale(s, -0.5 / d as f64);
    Ok(t.offset(s, -HALF_LN_2PI))
}

pub fn log_prior_value(v: &[f32]) -> f64 {
    let s: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum();
    -0.5 * s / v.len() as f64 - HALF_LN_2PI
}

/// `-2 sum p q / (sum p^2 + sum q^2)` over two `[H, W]` fields.
pub fn dice_criterion<T: Real>(t: &mut Tape<T>, p: Var, q: Var) -> Result<Var> {
    let pq = t.mul(p, q)?;
    let num = t.sum(pq);
    let num = t.scale(num, -2.0);
    let pp = t.sum_sq(p);
    let qq = t.sum_sq(q);
    let den = t.add(pp, qq)?;
    t.div(num, den)
}

/// Criterion values on a 2-channel logit map.
pub fn dice_of_logits<T: Real>(t: &mut Tape<T>, logits: Var, on_logits: bool) -> Result<Var> {
    let src = if on_logits { logits } else { t.softmax_channels(logits)? };
    let p = t.channel(src, 0)?;
    let q = t.channel(src, 1)?;
    dice_criterion(t, p, q)
}

/// Latent point of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub z: Tensor,
    pub noise: NoiseBank,
}

/// Everything a criterion needs, with its frozen cross-entropy reference.
pub struct Criterion<'a> {
    pub f: &'a DoinnModel,
    pub g: &'a GeneratorModel,
    pub kind: CriterionKind,
    pub dice_on_logits: bool,
    /// positive factor applied to the criterion value
    pub scale: f64,
    /// softmax of F(G(z, 0)), for the cross-entropy criterion
    reference: Option<Tensor>,
}

impl<'a> Criterion<'a> {
    pub fn new(f: &'a DoinnModel, g: &'a GeneratorModel, kind: CriterionKind, z: &Tensor, dice_on_logits: bool) -> Result<Self> {
        let reference = match kind {
            CriterionKind::Ce => {
                let raw = g.generate(z, &NoiseBank::zeros())?;
                let mut t = Tape::<f32>::new();
                let logits = t.constant(f.logits(&raw)?);
                let p = t.softmax_channels(logits)?;
                Some(t.value(p).clone())
            }
            _ => None,
        };
        Ok(Criterion {
            f,
            g,
            kind,
            dice_on_logits,
            scale: 1.0,
            reference,
        })
    }

    /// Records `C(G(z, noise))` on `t` given leaves for `z` and the noise maps.
    pub fn eval<T: Real>(&self, t: &mut Tape<T>, z: Var, noise: &[Var; 4]) -> Result<Var> {
        let gb = self.g.params.bind(t, false);
        let fb = self.f.params.bind(t, false);
        let x = self.g.synthesize(t, &gb, z, noise)?;
        let c = match self.kind {
            CriterionKind::Pred => {
                let taps = self.f.forward_taps(t, &fb, x)?;
                self.f.lpm_predict(t, &fb, &taps)?
            }
            CriterionKind::Dice => {
                let out = self.f.forward(t, &fb, x)?;
                dice_of_logits(t, out.logits, self.dice_on_logits)?
            }
            CriterionKind::Ce => {
                let out = self.f.forward(t, &fb, x)?;
                let r = self.reference.as_ref().expect("built with reference");
                t.softmax_ce_soft(out.logits, &r.cast())?
            }
        };
        Ok(if self.scale == 1.0 { c } else { t.scale(c, self.scale) })
    }

    /// Criterion value at a point, no gradients.
    pub fn value(&self, p: &Latent) -> Result<f64> {
        let mut t = Tape::<f32>::new();
        let z = t.constant(p.z.clone());
        let n = p.noise.maps.clone().map(|m| t.constant(m));
        let c = self.eval(&mut t, z, &n)?;
        Ok(t.value(c).item() as f64)
    }
}

struct Eval {
    j: f64,
    c: f64,
    grad: Vec<f32>,
}

/// `J = C + lambda * log_prior(v)` and its gradient in the ascended domain.
fn objective(crit: &Criterion, p: &Latent, domain: Domain, lambda: f64) -> Result<Eval> {
    let mut t = Tape::<f32>::new();
    let style = domain == Domain::Style;
    let z = t.leaf(p.z.clone(), style);
    let n = p.noise.maps.clone().map(|m| t.leaf(m, !style));
    let c = crit.eval(&mut t, z, &n)?;
    let prior = match domain {
        Domain::Style => log_prior(&mut t, z)?,
        Domain::Noise => {
            // one prior over all noise elements jointly
            let parts: Vec<Var> = n.iter().map(|&m| t.sum_sq(m)).collect();
            let mut s = parts[0];
            for &q in &parts[1..] {
                s = t.add(s, q)?;
            }
            let total: usize = p.noise.len();
            let s = t.scale(s, -0.5 / total as f64);
            t.offset(s, -HALF_LN_2PI)
        }
    };
    let wp = t.scale(prior, lambda);
    let j = t.add(c, wp)?;
    let jv = t.value(j).item() as f64;
    let cv = t.value(c).item() as f64;
    let g = t.backward(j)?;
    let grad = match domain {
        Domain::Style => g.wrt(z).into_data(),
        Domain::Noise => n.iter().flat_map(|&m| g.wrt(m).into_data()).collect(),
    };
    Ok(Eval { j: jv, c: cv, grad })
}

#[derive(Clone, Debug)]
pub struct AscentResult {
    pub point: Latent,
    /// objective after initialisation and after every accepted step
    pub trace: Vec<f64>,
    pub criterion_init: f64,
    pub criterion_final: f64,
    pub steps_accepted: usize,
}

fn set_domain(p: &mut Latent, domain: Domain, v: &[f32]) -> Result<()> {
    match domain {
        Domain::Style => p.z = Tensor::new(&[LATENT_DIM], v.to_vec())?,
        Domain::Noise => p.noise = NoiseBank::from_flat(v)?,
    }
    Ok(())
}

fn get_domain(p: &Latent, domain: Domain) -> Vec<f32> {
    match domain {
        Domain::Style => p.z.data().to_vec(),
        Domain::Noise => p.noise.flatten(),
    }
}

/// Initial point: style ascent starts at `z ~ N(0,1)` with zero noise; noise
/// ascent freezes `z ~ N(0,1)` and starts the maps at `N(0,1)`.
pub fn initial_point(domain: Domain, seed: u64) -> Latent {
    let mut r = rng::rng(seed);
    let z = normal_tensor(&mut r, &[LATENT_DIM]);
    let noise = match domain {
        Domain::Style => NoiseBank::zeros(),
        Domain::Noise => NoiseBank::random(&mut r),
    };
    Latent { z, noise }
}

/// Adam ascent on `J` with backtracking.
///
/// A candidate step is accepted when it does not lower `J`. Otherwise it is
/// discarded (optimizer state included) and the learning rate halved; after
/// [`MAX_HALVINGS`] halvings a further rejection ends the ascent.
pub fn optimize_latent(
    f: &DoinnModel,
    g: &GeneratorModel,
    domain: Domain,
    kind: CriterionKind,
    cfg: &AscentConfig,
    seed: u64,
) -> Result<AscentResult> {
    if kind == CriterionKind::Ce && domain == Domain::Style {
        return Err(LadaError::InvalidInput(
            "the cross-entropy criterion is defined for the noise domain only".into(),
        ));
    }
    let start = initial_point(domain, seed);
    let crit = Criterion::new(f, g, kind, &start.z, cfg.dice_on_logits)?;
    ascend(&crit, domain, cfg, start)
}

/// The ascent behind [`optimize_latent`] from an explicit start point.
pub fn ascend(crit: &Criterion, domain: Domain, cfg: &AscentConfig, start: Latent) -> Result<AscentResult> {
    cfg.validate()?;
    let mut cur = start;
    let lambda = match domain {
        Domain::Style => cfg.lambda1,
        Domain::Noise => cfg.lambda2,
    };
    let mut e = objective(crit, &cur, domain, lambda)?;
    let criterion_init = e.c;
    let mut trace = vec![e.j];
    let mut v = get_domain(&cur, domain);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), [v.len()]);
    let mut halvings = 0;
    let mut accepted = 0;
    'steps: for _ in 0..cfg.steps {
        loop {
            let mut trial_opt = opt.clone();
            let mut cand = v.clone();
            let neg: Vec<f32> = e.grad.iter().map(|x| -x).collect();
            trial_opt.step(&mut [&mut cand], &[&neg]);
            let mut p = cur.clone();
            set_domain(&mut p, domain, &cand)?;
            let ne = objective(crit, &p, domain, lambda)?;
            if ne.j >= e.j {
                opt = trial_opt;
                v = cand;
                cur = p;
                e = ne;
                trace.push(e.j);
                accepted += 1;
                break;
            }
            if halvings == MAX_HALVINGS {
                break 'steps;
            }
            halvings += 1;
            opt.cfg.lr *= 0.5;
        }
    }
    Ok(AscentResult {
        point: cur,
        trace,
        criterion_init,
        criterion_final: e.c,
        steps_accepted: accepted,
    })
}

/// Sidecar record for one proposed mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: SamplingStrategy,
    pub seed: u64,
    pub steps_accepted: usize,
    pub criterion_init: Option<f64>,
    pub criterion_final: Option<f64>,
    /// still identical to an earlier mask of the batch after all retries
    #[serde(default)]
    pub duplicate: bool,
}

#[derive(Clone, Debug)]
pub struct Proposal {
    pub mask: MaskImage,
    /// generator output before legalization, when there is one
    pub raw: Option<Tensor>,
    pub provenance: Provenance,
}

/// Models and settings a batch proposal draws on.
pub struct SamplerContext<'a> {
    pub f: &'a DoinnModel,
    pub g: &'a GeneratorModel,
    pub rules: &'a DesignRules,
    pub ascent: &'a AscentConfig,
}

/// One candidate for `seed`.
pub fn propose_one(strategy: SamplingStrategy, ctx: &SamplerContext, seed: u64) -> Result<Proposal> {
    let prov = |steps, ci, cf| Provenance {
        strategy,
        seed,
        steps_accepted: steps,
        criterion_init: ci,
        criterion_final: cf,
        duplicate: false,
    };
    match strategy {
        SamplingStrategy::Shape => Ok(Proposal {
            mask: generate_pattern(ctx.rules, seed)?,
            raw: None,
            provenance: prov(0, None, None),
        }),
        SamplingStrategy::Random => {
            let d = sample_mask(ctx.g, seed, NoiseMode::Random)?;
            // scored with the loss head so batches can be compared with style_pred
            let crit = Criterion::new(ctx.f, ctx.g, CriterionKind::Pred, &d.z, false)?;
            let c = crit.value(&Latent {
                z: d.z.clone(),
                noise: d.noise.clone(),
            })?;
            Ok(Proposal {
                mask: d.mask,
                raw: Some(d.raw),
                provenance: prov(0, Some(c), Some(c)),
            })
        }
        s => {
            let (domain, kind) = s.ascent().expect("adversarial strategy");
            let res = optimize_latent(ctx.f, ctx.g, domain, kind, ctx.ascent, seed)?;
            let raw = ctx.g.generate(&res.point.z, &res.point.noise)?;
            Ok(Proposal {
                mask: legalize(raw.data(), CANVAS, CANVAS)?,
                raw: Some(raw),
                provenance: prov(res.steps_accepted, Some(res.criterion_init), Some(res.criterion_final)),
            })
        }
    }
}

/// `budget` legalized proposals. Candidate `i` uses seed `split_index(seed, i)`;
/// a mask equal to an earlier one in the batch is redrawn from
/// `split_index(seed_i, retry)`.
pub fn propose_batch(strategy: SamplingStrategy, ctx: &SamplerContext, budget: usize, seed: u64) -> Result<Vec<Proposal>> {
    if budget == 0 {
        return Err(LadaError::InvalidInput("labeling budget must be >= 1".into()));
    }
    ctx.ascent.validate()?;
    let seeds: Vec<u64> = (0..budget).map(|i| rng::split_index(seed, i as u64)).collect();
    let first: Vec<Proposal> = seeds
        .par_iter()
        .map(|&s| propose_one(strategy, ctx, s))
        .collect::<Result<_>>()?;
    let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(budget);
    let mut out = Vec::with_capacity(budget);
    for (i, mut p) in first.into_iter().enumerate() {
        let mut retry = 0;
        while seen.contains(p.mask.data()) {
            if retry == MAX_DEDUP_RETRIES {
                p.provenance.duplicate = true;
                break;
            }
            retry += 1;
            p = propose_one(strategy, ctx, rng::split_index(seeds[i], retry as u64))?;
        }
        seen.insert(p.mask.data().to_vec());
        out.push(p);
    }
    Ok(out)
}
