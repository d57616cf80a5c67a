use std::fs;
use std::path::Path;

use lada::active::*;
use lada::config::RunConfig;
use lada::doinn::{DoinnInit, DoinnModel};
use lada::generator::{GeneratorInit, GeneratorModel};
use lada::litho::{build_kernels, simulate, KernelConfig};
use lada::pattern::DesignRules;
use lada::sampler::SamplingStrategy;

fn tiny(strategy: SamplingStrategy) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.gan.steps = 2;
    cfg.gan.batch = 4;
    cfg.surrogate.pretrain.epochs = 1;
    cfg.surrogate.pretrain.batch = 4;
    cfg.sampler.steps = 2;
    cfg.run.t = 2;
    cfg.run.b = 3;
    cfg.run.strategy = strategy;
    cfg.run.finetune.epochs = 1;
    cfg.run.finetune.batch = 4;
    cfg.run.initial_size = 8;
    cfg.run.test_size = 4;
    cfg.seeds.global = 5;
    cfg
}

#[test]
fn single_pair_store() {
    let dir = tempfile::tempdir().unwrap();
    let ks = build_kernels(&KernelConfig::default()).unwrap();
    let s = build_initial_dataset(dir.path(), 1, &DesignRules::training(), &ks, 1).unwrap();
    assert_eq!(s.len(), 1);
    let csv = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines, vec!["id,mask,resist,strategy,iteration,seed", &lines[1]]);
    assert!(lines[1].starts_with("000000,masks/000000.pgm,resists/000000.pgm,initial,0,"));
    // a second store in the same place is refused
    assert!(build_initial_dataset(dir.path(), 1, &DesignRules::training(), &ks, 1).is_err());
}

#[test]
fn initial_store_is_seeded_and_correctly_labeled() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ks = build_kernels(&KernelConfig::default()).unwrap();
    let rules = DesignRules::training();
    let sa = build_initial_dataset(a.path(), 12, &rules, &ks, 9).unwrap();
    build_initial_dataset(b.path(), 12, &rules, &ks, 9).unwrap();
    assert_eq!(
        fs::read(a.path().join(MANIFEST)).unwrap(),
        fs::read(b.path().join(MANIFEST)).unwrap()
    );
    assert!(sa.audit(&ks, 32, 1).is_empty());
    for (m, r) in sa.samples() {
        assert_eq!(&simulate(m, &ks), r);
    }
    let reopened = DatasetStore::open(a.path()).unwrap();
    assert_eq!(reopened.records(), sa.records());
    assert_eq!(reopened.samples(), sa.samples());
}

#[test]
fn audit_catches_a_corrupted_label() {
    let dir = tempfile::tempdir().unwrap();
    let ks = build_kernels(&KernelConfig::default()).unwrap();
    let s = build_initial_dataset(dir.path(), 4, &DesignRules::training(), &ks, 2).unwrap();
    let victim = &s.records()[2];
    let mut r = s.samples()[2].1.clone();
    r.flip(10, 10);
    r.write_pgm(&dir.path().join(&victim.resist)).unwrap();
    let s = DatasetStore::open(dir.path()).unwrap();
    assert_eq!(s.audit(&ks, 4, 3), vec![victim.id.clone()]);
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn loop_grows_store_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(SamplingStrategy::StylePred);
    let h = run_loop(&cfg, dir.path()).unwrap();
    assert_eq!(h.entries.len(), cfg.run.t + 1);
    for (t, e) in h.entries.iter().enumerate() {
        assert_eq!(e.iteration, t);
        assert_eq!(e.dataset_size, cfg.run.initial_size + t * cfg.run.b);
    }
    let store = DatasetStore::open(dir.path()).unwrap();
    assert_eq!(store.len(), 8 + 2 * 3);
    for (i, r) in store.records().iter().enumerate() {
        let (strategy, it) = if i < 8 { ("initial", 0) } else { ("style_pred", 1 + (i - 8) / 3) };
        assert_eq!((r.strategy.as_str(), r.iteration), (strategy, it));
    }
    let ks = build_kernels(&cfg.oracle).unwrap();
    assert!(store.audit(&ks, 32, 0).is_empty());
    assert_eq!(RunHistory::read(&dir.path().join("history.json")).unwrap(), h.entries);
    assert_eq!(RunConfig::from_json_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap(), cfg);
    let ck = dir.path().join("checkpoints");
    for name in ["f_0", "f_1", "f_2", "g_0", "d_0"] {
        assert!(ck.join(format!("{name}.ckpt")).exists(), "{name}");
    }
    for t in 1..=2 {
        let p: serde_json::Value = serde_json::from_slice(&read(&dir.path().join(format!("provenance/iter_{t:02}.json")))).unwrap();
        assert_eq!(p.as_array().unwrap().len(), 3);
    }
    // a finished run directory is not overwritten
    assert!(run_loop(&cfg, dir.path()).is_err());
}

#[test]
fn loop_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(SamplingStrategy::NoisePred);
    run_loop(&cfg, a.path()).unwrap();
    run_loop(&cfg, b.path()).unwrap();
    for f in ["history.json", "manifest.csv", "config.json", "checkpoints/f_2.ckpt", "provenance/iter_02.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn single_iteration_from_given_checkpoints() {
    let pre = tempfile::tempdir().unwrap();
    let f = DoinnModel::init(1, DoinnInit::default());
    let g = GeneratorModel::init(2, GeneratorInit::default());
    f.save(&checkpoint_path(pre.path(), "f", 0)).unwrap();
    g.save(&checkpoint_path(pre.path(), "g", 0)).unwrap();
    let mut cfg = tiny(SamplingStrategy::Random);
    cfg.run.t = 1;
    cfg.paths.pretrained = Some(pre.path().to_path_buf());
    let out = tempfile::tempdir().unwrap();
    let h = run_loop(&cfg, out.path()).unwrap();
    assert_eq!(h.entries.len(), 2);
    assert_eq!(h.entries[1].dataset_size, 11);
    let ck = out.path().join("checkpoints");
    assert_eq!(read(&ck.join("f_0.ckpt")), read(&checkpoint_path(pre.path(), "f", 0)));
    assert_eq!(read(&ck.join("g_0.ckpt")), read(&checkpoint_path(pre.path(), "g", 0)));
    assert_ne!(read(&ck.join("f_1.ckpt")), read(&ck.join("f_0.ckpt")));
}

#[test]
fn iterations_leave_the_generator_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(SamplingStrategy::StyleDice);
    let ks = build_kernels(&cfg.oracle).unwrap();
    let seeds = cfg.seeds.streams();
    let store = build_initial_dataset(dir.path(), 8, &cfg.rules, &ks, seeds.data).unwrap();
    let test = make_dataset(4, &cfg.rules_test, &ks, seeds.test).unwrap();
    let g = GeneratorModel::init(3, GeneratorInit::default());
    let mut state = LoopState {
        cfg: cfg.clone(),
        seeds,
        ks,
        store,
        test,
        f: DoinnModel::init(4, DoinnInit::default()),
        g: g.clone(),
        history: RunHistory::default(),
    };
    assert!(run_iteration(0, &mut state).is_err());
    assert!(run_iteration(3, &mut state).is_err());
    for t in 1..=2 {
        let before = state.store.len();
        run_iteration(t, &mut state).unwrap();
        assert_eq!(state.store.len(), before + 3);
        assert_eq!(state.g, g);
    }
    assert_eq!(state.history.entries.len(), 2);
}
