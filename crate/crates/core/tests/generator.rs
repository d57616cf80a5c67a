use lada::diffcore::suite::{SUITE_EPS, SUITE_TOLERANCE};
use lada::diffcore::{grad_check, grad_check_coords, Objective, Real, Tape, Tensor, Var};
use lada::generator::*;
use lada::image::CANVAS;
use lada::pattern::{generate_pattern, DesignRules};
use lada::rng;

fn masks(n: usize) -> Vec<lada::image::MaskImage> {
    (0..n as u64)
        .map(|s| generate_pattern(&DesignRules::training(), s).unwrap())
        .collect()
}

#[test]
fn noise_bank_layout() {
    let b = NoiseBank::zeros();
    assert_eq!(b.len(), 64 + 256 + 1024 + 4096);
    let dims: Vec<&[usize]> = b.maps.iter().map(|m| m.dims()).collect();
    assert_eq!(dims, vec![&[8, 8][..], &[16, 16], &[32, 32], &[64, 64]]);
    let r = NoiseBank::random(&mut rng::rng(1));
    assert_eq!(NoiseBank::from_flat(&r.flatten()).unwrap(), r);
    assert!(NoiseBank::from_flat(&[0.0; 10]).is_err());
}

#[test]
fn zero_mapping_passes_latent_through() {
    let g = GeneratorModel::init(2, GeneratorInit { zero_mapping: true, zero_noise_gain: false });
    for z in [Tensor::zeros(&[LATENT_DIM]), rng::normal_tensor(&mut rng::rng(3), &[LATENT_DIM])] {
        let mut t = Tape::<f32>::new();
        let b = g.params.bind(&mut t, false);
        let zv = t.constant(z.clone());
        let w = g.map_latent(&mut t, &b, zv).unwrap();
        assert_eq!(t.value(w).data(), z.data());
    }
}

struct MapJacobian<'a> {
    g: &'a GeneratorModel,
    proj: Tensor,
}

impl Objective for MapJacobian<'_> {
    fn eval<T: Real>(&self, t: &mut Tape<T>, z: Var) -> lada::error::Result<Var> {
        let b = self.g.params.bind(t, false);
        let w = self.g.map_latent(t, &b, z)?;
        let p = t.constant(self.proj.cast());
        let m = t.mul(w, p)?;
        Ok(t.sum(m))
    }
}

/// Mean output as a function of z (noise fixed) or of one noise map (z fixed).
struct MeanOutput<'a> {
    g: &'a GeneratorModel,
    z: Tensor,
    noise: NoiseBank,
    /// `None` differentiates z, `Some(k)` the k-th noise map
    wrt: Option<usize>,
}

impl Objective for MeanOutput<'_> {
    fn eval<T: Real>(&self, t: &mut Tape<T>, x: Var) -> lada::error::Result<Var> {
        let b = self.g.params.bind(t, false);
        let (z, noise) = match self.wrt {
            None => (x, self.noise.maps.clone().map(|m| t.constant(m.cast()))),
            Some(k) => {
                let z = t.constant(self.z.cast());
                let mut n = self.noise.maps.clone().map(|m| t.constant(m.cast()));
                n[k] = x;
                (z, n)
            }
        };
        let out = self.g.synthesize(t, &b, z, &noise)?;
        Ok(t.mean(out))
    }
}

#[test]
fn mapping_jacobian_matches_finite_differences() {
    let g = GeneratorModel::init(4, GeneratorInit::default());
    let obj = MapJacobian {
        g: &g,
        proj: rng::normal_tensor(&mut rng::rng(5), &[LATENT_DIM]),
    };
    let z = rng::normal_tensor(&mut rng::rng(6), &[LATENT_DIM]);
    let err = grad_check(&obj, &z, SUITE_EPS).unwrap();
    assert!(err < SUITE_TOLERANCE, "{err}");
}

#[test]
fn synthesis_gradients_match_finite_differences() {
    let g = GeneratorModel::init(7, GeneratorInit::default());
    let mut r = rng::rng(8);
    let z = rng::normal_tensor(&mut r, &[LATENT_DIM]);
    let noise = NoiseBank::random(&mut r);
    let obj = MeanOutput { g: &g, z: z.clone(), noise: noise.clone(), wrt: None };
    let err = grad_check(&obj, &z, SUITE_EPS).unwrap();
    assert!(err < SUITE_TOLERANCE, "z: {err}");
    for k in [0, 2] {
        let obj = MeanOutput { g: &g, z: z.clone(), noise: noise.clone(), wrt: Some(k) };
        let x = &noise.maps[k];
        let coords: Vec<usize> = (0..x.len()).step_by(x.len() / 16).collect();
        let res = grad_check_coords(&obj, x, SUITE_EPS, &coords).unwrap();
        assert!(res.max_rel_error < SUITE_TOLERANCE, "noise {k}: {res:?}");
    }
}

#[test]
fn synthesis_is_deterministic_and_bounded() {
    let g = GeneratorModel::init(9, GeneratorInit::default());
    for s in 0..5u64 {
        let mut r = rng::rng(s);
        let z = rng::normal_tensor(&mut r, &[LATENT_DIM]).map(|v| 3.0 * v);
        let n = NoiseBank::random(&mut r);
        let a = g.generate(&z, &n).unwrap();
        assert_eq!(a.dims(), &[1, CANVAS, CANVAS]);
        assert_eq!(a.data(), g.generate(&z, &n).unwrap().data());
        // f32 tanh rounds to exactly 1 once |x| > ~9
        assert!(a.max_abs() <= 1.0);
    }
}

#[test]
fn zero_noise_gain_ignores_noise() {
    let g = GeneratorModel::init(10, GeneratorInit { zero_mapping: false, zero_noise_gain: true });
    let mut r = rng::rng(11);
    let z = rng::normal_tensor(&mut r, &[LATENT_DIM]);
    let a = g.generate(&z, &NoiseBank::zeros()).unwrap();
    let b = g.generate(&z, &NoiseBank::random(&mut r)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn gradients_reach_latent_and_noise() {
    for s in 0..10u64 {
        let g = GeneratorModel::init(100 + s, GeneratorInit::default());
        let mut r = rng::rng(200 + s);
        let mut t = Tape::<f32>::new();
        let b = g.params.bind(&mut t, false);
        let z = t.leaf(rng::normal_tensor(&mut r, &[LATENT_DIM]), true);
        let n = NoiseBank::random(&mut r).maps.map(|m| t.leaf(m, true));
        let out = g.synthesize(&mut t, &b, z, &n).unwrap();
        let m = t.mean(out);
        let grads = t.backward(m).unwrap();
        assert!(grads.wrt(z).max_abs() > 0.0, "seed {s}: z");
        assert!(n.iter().any(|&v| grads.wrt(v).max_abs() > 0.0), "seed {s}: noise");
    }
}

#[test]
fn sample_mask_is_binary_and_seeded() {
    let g = GeneratorModel::init(12, GeneratorInit::default());
    for mode in [NoiseMode::Zero, NoiseMode::Random] {
        let a = sample_mask(&g, 13, mode).unwrap();
        let b = sample_mask(&g, 13, mode).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.z, b.z);
        assert!(a.mask.data().iter().all(|&v| v <= 1));
        assert_eq!(a.mask.dims(), (CANVAS, CANVAS));
    }
    let zero = sample_mask(&g, 14, NoiseMode::Zero).unwrap();
    assert!(zero.noise.flatten().iter().all(|&v| v == 0.0));
    // the latent is drawn first, so both modes share z for one seed
    assert_eq!(zero.z, sample_mask(&g, 14, NoiseMode::Random).unwrap().z);
}

#[test]
fn zero_steps_change_nothing() {
    let data = masks(64);
    let mut g = GeneratorModel::init(15, GeneratorInit::default());
    let mut d = Discriminator::init(16);
    let (g0, d0) = (g.clone(), d.clone());
    let cfg = GanConfig { steps: 0, ..GanConfig::default() };
    assert!(gan_train(&mut g, &mut d, &data, &cfg, 1).unwrap().is_empty());
    assert_eq!((g, d), (g0, d0));
}

#[test]
fn short_training_is_seeded_and_logged() {
    let data = masks(64);
    let cfg = GanConfig { steps: 4, batch: 4, ..GanConfig::default() };
    let run = || {
        let mut g = GeneratorModel::init(17, GeneratorInit::default());
        let mut d = Discriminator::init(18);
        let h = gan_train(&mut g, &mut d, &data, &cfg, 19).unwrap();
        (g, d, h)
    };
    let (g1, d1, h1) = run();
    let (g2, d2, h2) = run();
    assert_eq!(h1.len(), 4);
    assert_eq!(h1, h2);
    assert_eq!(g1, g2);
    assert_eq!(d1, d2);
    assert_ne!(g1, GeneratorModel::init(17, GeneratorInit::default()));
    // lazy R1 on steps 0 and 4, 8, ...
    assert!(h1[0].r1.is_some());
    assert!(h1[1..].iter().all(|s| s.r1.is_none()));
    assert!(h1.iter().all(|s| s.d_loss.is_finite() && s.g_loss.is_finite()));
}

#[test]
fn invalid_training_inputs_rejected() {
    let mut g = GeneratorModel::init(20, GeneratorInit::default());
    let mut d = Discriminator::init(21);
    assert!(gan_train(&mut g, &mut d, &[], &GanConfig::default(), 1).is_err());
    let bad = GanConfig { batch: 0, ..GanConfig::default() };
    assert!(gan_train(&mut g, &mut d, &masks(4), &bad, 1).is_err());
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = GeneratorModel::init(22, GeneratorInit::default());
    let d = Discriminator::init(23);
    g.save(&dir.path().join("g.ckpt")).unwrap();
    d.save(&dir.path().join("d.ckpt")).unwrap();
    assert_eq!(GeneratorModel::load(&dir.path().join("g.ckpt")).unwrap(), g);
    assert_eq!(Discriminator::load(&dir.path().join("d.ckpt")).unwrap(), d);
    assert!(GeneratorModel::load(&dir.path().join("d.ckpt")).is_err());
}
