use lada::diffcore::suite::{SUITE_EPS, SUITE_TOLERANCE};
use lada::diffcore::{grad_check, Objective, Real, Tape, Tensor, Var};
use lada::doinn::{DoinnInit, DoinnModel};
use lada::generator::{GeneratorInit, GeneratorModel, NoiseBank, LATENT_DIM};
use lada::image::CANVAS;
use lada::pattern::{verify_rules, DesignRules};
use lada::rng;
use lada::sampler::*;
use proptest::prelude::*;

fn models(seed: u64) -> (DoinnModel, GeneratorModel) {
    (
        DoinnModel::init(seed, DoinnInit::default()),
        GeneratorModel::init(seed + 1, GeneratorInit::default()),
    )
}

fn prior_on_tape(v: &[f64]) -> f64 {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(&[v.len()], v.to_vec()).unwrap(), true);
    let p = log_prior(&mut t, x).unwrap();
    t.value(p).item()
}

#[test]
fn log_prior_closed_forms() {
    for d in [1, 4, 64] {
        assert!((prior_on_tape(&vec![0.0; d]) + 0.918_938_533_204_672_8).abs() < 1e-12);
        // |v|^2 = d
        assert!((prior_on_tape(&vec![1.0; d]) + 1.418_938_533_204_672_8).abs() < 1e-12);
        assert!((log_prior_value(&vec![1.0; d]) + 1.418_938_533_204_672_8).abs() < 1e-9);
    }
}

struct Prior;

impl Objective for Prior {
    fn eval<T: Real>(&self, t: &mut Tape<T>, x: Var) -> lada::error::Result<Var> {
        log_prior(t, x)
    }
}

#[test]
fn log_prior_gradient() {
    let v = rng::normal_tensor(&mut rng::rng(1), &[16]);
    let err = grad_check(&Prior, &v, SUITE_EPS).unwrap();
    assert!(err < SUITE_TOLERANCE, "{err}");
    let mut t = Tape::<f32>::new();
    let x = t.leaf(v.clone(), true);
    let p = log_prior(&mut t, x).unwrap();
    let g = t.backward(p).unwrap();
    for (a, b) in g.wrt(x).data().iter().zip(v.data()) {
        assert!((a + b / 16.0).abs() < 1e-6);
    }
}

fn dice(p: &[f64], q: &[f64]) -> f64 {
    let mut t = Tape::<f64>::new();
    let pv = t.leaf(Tensor::new(&[1, p.len()], p.to_vec()).unwrap(), false);
    let qv = t.leaf(Tensor::new(&[1, q.len()], q.to_vec()).unwrap(), false);
    let c = dice_criterion(&mut t, pv, qv).unwrap();
    t.value(c).item()
}

#[test]
fn dice_examples() {
    assert!((dice(&[0.5; 6], &[0.5; 6]) + 1.0).abs() < 1e-12);
    assert!(dice(&[1.0 - 1e-9; 4], &[1e-9; 4]).abs() < 1e-8);
    // -2 (0.16 + 0.21) / (0.64 + 0.09 + 0.04 + 0.49)
    let c = dice(&[0.8, 0.3], &[0.2, 0.7]);
    assert!((c + 0.587_301_587_301_587_3).abs() < 1e-12, "{c}");
}

#[test]
fn dice_on_logits_switch() {
    let l = Tensor::new(&[2, 1, 2], vec![0.0f64, 2.0, 0.0, -1.0]).unwrap();
    let run = |on: bool| {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(l.clone(), false);
        let c = dice_of_logits(&mut t, x, on).unwrap();
        t.value(c).item()
    };
    // equal logits at pixel 0 give p = q = 0.5 there
    let e2 = (2.0f64).exp();
    let e1 = (-1.0f64).exp();
    let (p1, q1) = (e2 / (e2 + e1), e1 / (e2 + e1));
    let want = -2.0 * (0.25 + p1 * q1) / (0.25 + p1 * p1 + 0.25 + q1 * q1);
    assert!((run(false) - want).abs() < 1e-12);
    // raw logits: -2 (0 - 2) / (4 + 1)
    assert!((run(true) - 0.8).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dice_bounded(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..32)) {
        prop_assume!(pairs.iter().any(|&(a, b)| a + b > 1e-6));
        let (p, q): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
        let c = dice(&p, &q);
        prop_assert!((-1.0 - 1e-12..=1e-12).contains(&c), "{}", c);
        prop_assert!((dice(&p, &p) + 1.0).abs() < 1e-12);
        if p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-3) {
            prop_assert!(c > -1.0);
        }
    }

    #[test]
    fn log_prior_decreases_with_norm(v in prop::collection::vec(-3.0f64..3.0, 1..16), k in 1.01f64..3.0) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let w: Vec<f64> = v.iter().map(|x| x * k).collect();
        prop_assert!(prior_on_tape(&w) < prior_on_tape(&v));
        prop_assert!(prior_on_tape(&v) < -0.918_938_533_204_672_8);
    }
}

#[test]
fn soft_cross_entropy_two_pixel_oracle() {
    let mut t = Tape::<f64>::new();
    let l = t.leaf(Tensor::new(&[2, 1, 2], vec![0.3, -1.2, 1.1, 0.4]).unwrap(), false);
    let target = Tensor::new(&[2, 1, 2], vec![0.25, 0.9, 0.75, 0.1]).unwrap();
    let c = t.softmax_ce_soft(l, &target).unwrap();
    // mean over the two pixels, evaluated at 40 digits
    assert!((t.value(c).item() - 1.097_500_703_418_058_3).abs() < 1e-12);
}

#[test]
fn zero_loss_head_gives_zero_pred_criterion() {
    let f = DoinnModel::init(2, DoinnInit { zero_head: false, zero_lpm: true });
    let g = GeneratorModel::init(3, GeneratorInit::default());
    for s in 0..3 {
        let p = initial_point(Domain::Noise, s);
        let c = Criterion::new(&f, &g, CriterionKind::Pred, &p.z, false).unwrap();
        assert_eq!(c.value(&p).unwrap(), 0.0);
    }
}

#[test]
fn pred_criterion_deterministic_with_latent_gradient() {
    let (f, g) = models(4);
    for s in 0..10u64 {
        let p = initial_point(Domain::Style, 100 + s);
        let c = Criterion::new(&f, &g, CriterionKind::Pred, &p.z, false).unwrap();
        assert_eq!(c.value(&p).unwrap(), c.value(&p).unwrap());
        let mut t = Tape::<f32>::new();
        let z = t.leaf(p.z.clone(), true);
        let n = p.noise.maps.clone().map(|m| t.constant(m));
        let v = c.eval(&mut t, z, &n).unwrap();
        let gr = t.backward(v).unwrap();
        assert!(gr.wrt(z).max_abs() > 0.0, "seed {s}");
    }
}

#[test]
fn cross_entropy_at_zero_noise_is_reference_entropy() {
    // a zero head makes the reference uniform
    let f = DoinnModel::init(5, DoinnInit { zero_head: true, zero_lpm: false });
    let g = GeneratorModel::init(6, GeneratorInit::default());
    let z = rng::normal_tensor(&mut rng::rng(7), &[LATENT_DIM]);
    let c = Criterion::new(&f, &g, CriterionKind::Ce, &z, false).unwrap();
    let zero = Latent { z: z.clone(), noise: NoiseBank::zeros() };
    assert!((c.value(&zero).unwrap() - std::f64::consts::LN_2).abs() < 1e-5);

    let (f, g) = models(8);
    let c = Criterion::new(&f, &g, CriterionKind::Ce, &z, false).unwrap();
    let logits = f.logits(&g.generate(&z, &NoiseBank::zeros()).unwrap()).unwrap();
    let n = CANVAS * CANVAS;
    let entropy = (0..n)
        .map(|i| {
            let (a, b) = (logits.data()[i] as f64, logits.data()[n + i] as f64);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            let (pa, pb) = ((a - lse).exp(), (b - lse).exp());
            -(pa * (a - lse) + pb * (b - lse))
        })
        .sum::<f64>()
        / n as f64;
    let at_zero = c.value(&zero).unwrap();
    assert!((at_zero - entropy).abs() < 1e-4, "{at_zero} vs {entropy}");
    // moving away from the reference raises the cross-entropy
    let loud: Vec<f32> = NoiseBank::random(&mut rng::rng(9)).flatten().iter().map(|v| 20.0 * v).collect();
    let moved = Latent { z, noise: NoiseBank::from_flat(&loud).unwrap() };
    assert!(c.value(&moved).unwrap() > at_zero);
}

#[test]
fn cross_entropy_rejected_in_style_domain() {
    let (f, g) = models(10);
    let cfg = AscentConfig::default();
    assert!(optimize_latent(&f, &g, Domain::Style, CriterionKind::Ce, &cfg, 1).is_err());
}

#[test]
fn zero_steps_return_the_start() {
    let (f, g) = models(11);
    let cfg = AscentConfig { steps: 0, ..AscentConfig::default() };
    for (d, k) in [(Domain::Style, CriterionKind::Pred), (Domain::Noise, CriterionKind::Ce)] {
        let r = optimize_latent(&f, &g, d, k, &cfg, 12).unwrap();
        assert_eq!(r.point, initial_point(d, 12));
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.steps_accepted, 0);
        assert_eq!(r.criterion_init, r.criterion_final);
    }
}

#[test]
fn ascent_trace_never_decreases() {
    let (f, g) = models(13);
    let cfg = AscentConfig { steps: 15, lr: 0.2, ..AscentConfig::default() };
    for (i, s) in SamplingStrategy::ALL.iter().filter_map(|s| s.ascent()).enumerate() {
        let r = optimize_latent(&f, &g, s.0, s.1, &cfg, 14 + i as u64).unwrap();
        assert_eq!(r.trace.len(), r.steps_accepted + 1);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]), "{s:?}: {:?}", r.trace);
        assert!(r.trace.last() >= r.trace.first());
        match s.0 {
            Domain::Style => assert!(r.point.noise.flatten().iter().all(|&v| v == 0.0)),
            Domain::Noise => assert_eq!(r.point.z, initial_point(Domain::Noise, 14 + i as u64).z),
        }
    }
}

#[test]
fn criterion_scale_with_matched_prior_keeps_ranking() {
    let (f, g) = models(15);
    let cfg = AscentConfig { steps: 10, ..AscentConfig::default() };
    let k = 4.0;
    let scaled = AscentConfig { lambda1: cfg.lambda1 * k, ..cfg.clone() };
    let run = |cfg: &AscentConfig, scale: f64| -> Vec<f64> {
        (0..5u64)
            .map(|s| {
                let start = initial_point(Domain::Style, 200 + s);
                let mut c = Criterion::new(&f, &g, CriterionKind::Pred, &start.z, false).unwrap();
                c.scale = scale;
                ascend(&c, Domain::Style, cfg, start).unwrap().criterion_final / scale
            })
            .collect()
    };
    let rank = |v: &[f64]| {
        let mut i: Vec<usize> = (0..v.len()).collect();
        i.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        i
    };
    let (a, b) = (run(&cfg, 1.0), run(&scaled, k));
    assert_eq!(rank(&a), rank(&b), "{a:?} {b:?}");
}

#[test]
fn strategy_names_round_trip() {
    let names: Vec<&str> = SamplingStrategy::ALL.iter().map(|s| s.name()).collect();
    assert_eq!(names, ["shape", "random", "style_dice", "noise_CE", "style_pred", "noise_pred"]);
    for s in SamplingStrategy::ALL {
        assert_eq!(s.name().parse::<SamplingStrategy>().unwrap(), s);
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
    }
    assert!("pool".parse::<SamplingStrategy>().is_err());
}

#[test]
fn shape_batch_follows_rules() {
    let (f, g) = models(16);
    let rules = DesignRules::training();
    let asc = AscentConfig::default();
    let ctx = SamplerContext { f: &f, g: &g, rules: &rules, ascent: &asc };
    let b = propose_batch(SamplingStrategy::Shape, &ctx, 4, 17).unwrap();
    assert_eq!(b.len(), 4);
    for p in &b {
        assert!(verify_rules(&p.mask, &rules).is_empty());
        assert!(p.raw.is_none());
    }
    assert!(propose_batch(SamplingStrategy::Shape, &ctx, 0, 17).is_err());
}

#[test]
fn every_strategy_yields_binary_canvas_masks() {
    let (f, g) = models(18);
    let rules = DesignRules::training();
    let asc = AscentConfig { steps: 3, ..AscentConfig::default() };
    let ctx = SamplerContext { f: &f, g: &g, rules: &rules, ascent: &asc };
    for s in SamplingStrategy::ALL {
        let b = propose_batch(s, &ctx, 3, 19).unwrap();
        assert_eq!(b.len(), 3);
        for (i, p) in b.iter().enumerate() {
            assert_eq!(p.mask.dims(), (CANVAS, CANVAS));
            assert!(p.mask.data().iter().all(|&v| v <= 1));
            assert_eq!(p.provenance.strategy, s);
            if !p.provenance.duplicate {
                assert!(b[..i].iter().all(|q| q.mask != p.mask));
            }
        }
        let again = propose_batch(s, &ctx, 3, 19).unwrap();
        assert!(b.iter().zip(&again).all(|(a, b)| a.mask == b.mask && a.provenance == b.provenance));
    }
}
