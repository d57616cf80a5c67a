//! The augmentation loop: pretrain, then repeatedly propose, label with the
//! oracle, append and finetune.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/config.json      fully materialised RunConfig
//! <run>/manifest.csv     id,mask,resist,strategy,iteration,seed
//! <run>/masks/<id>.pgm
//! <run>/resists/<id>.pgm
//! <run>/checkpoints/     f_<t>.ckpt, g_0.ckpt, d_0.ckpt
//! <run>/provenance/      iter_<t>.json, one record per proposal
//! <run>/history.json     one entry per iteration, index 0 = pretrained state
//! <run>/timings.json     wall-clock seconds per iteration
//! ```

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StreamSeeds};
use crate::doinn::{DoinnInit, DoinnModel, EpochLoss, Sample};
use crate::error::{LadaError, Result};
use crate::generator::{discriminator_accuracy, gan_train, Discriminator, GanStep, GeneratorInit, GeneratorModel};
use crate::image::BinaryImage;
use crate::litho::{build_kernels, simulate, KernelSet};
use crate::metrics::{evaluate, Evaluation};
use crate::pattern::{generate_pattern, DesignRules};
use crate::rng;
use crate::sampler::{propose_batch, Provenance, SamplerContext};

pub const MANIFEST: &str = "manifest.csv";
pub const INITIAL_STRATEGY: &str = "initial";
/// Fakes drawn when measuring discriminator accuracy after pretraining.
pub const ACCURACY_SAMPLES: usize = 256;

/// One manifest row. Paths are relative to the store root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub mask: String,
    pub resist: String,
    pub strategy: String,
    pub iteration: usize,
    pub seed: u64,
}

/// A labeled pair waiting to be stored.
#[derive(Clone, Debug)]
pub struct NewPair {
    pub mask: BinaryImage,
    pub resist: BinaryImage,
    pub strategy: String,
    pub iteration: usize,
    pub seed: u64,
}

/// Append-only dataset of mask/resist pairs backed by PGM files and a CSV manifest.
#[derive(Debug)]
pub struct DatasetStore {
    root: PathBuf,
    records: Vec<Record>,
    samples: Vec<Sample>,
}

impl DatasetStore {
    /// New empty store; refuses a directory that already holds a manifest.
    pub fn create(root: &Path) -> Result<Self> {
        let manifest = root.join(MANIFEST);
        if manifest.exists() {
            return Err(LadaError::InvalidInput(format!("{} already exists", manifest.display())));
        }
        for d in ["masks", "resists"] {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(|e| LadaError::io(&p, e))?;
        }
        let mut w = csv::Writer::from_path(&manifest)?;
        w.write_record(["id", "mask", "resist", "strategy", "iteration", "seed"])?;
        w.flush().map_err(|e| LadaError::io(&manifest, e))?;
        Ok(DatasetStore {
            root: root.to_path_buf(),
            records: Vec::new(),
            samples: Vec::new(),
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let manifest = root.join(MANIFEST);
        let mut r = csv::Reader::from_path(&manifest)?;
        let records: Vec<Record> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        let mut seen = std::collections::HashSet::new();
        for rec in &records {
            if !seen.insert(rec.id.as_str()) {
                return Err(LadaError::Format {
                    path: manifest,
                    reason: format!("duplicate id {}", rec.id),
                });
            }
        }
        let samples = records
            .par_iter()
            .map(|rec| {
                Ok((
                    BinaryImage::read_pgm(&root.join(&rec.mask))?,
                    BinaryImage::read_pgm(&root.join(&rec.resist))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(DatasetStore {
            root: root.to_path_buf(),
            records,
            samples,
        })
    }

    /// Writes the images first, then commits the rows to the manifest.
    pub fn append(&mut self, pairs: Vec<NewPair>) -> Result<()> {
        let start = self.records.len();
        let records: Vec<Record> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let id = format!("{:06}", start + i);
                Record {
                    mask: format!("masks/{id}.pgm"),
                    resist: format!("resists/{id}.pgm"),
                    id,
                    strategy: p.strategy.clone(),
                    iteration: p.iteration,
                    seed: p.seed,
                }
            })
            .collect();
        records.par_iter().zip(&pairs).try_for_each(|(rec, p)| -> Result<()> {
            p.mask.write_pgm(&self.root.join(&rec.mask))?;
            p.resist.write_pgm(&self.root.join(&rec.resist))
        })?;
        let path = self.root.join(MANIFEST);
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| LadaError::io(&path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        for rec in &records {
            w.serialize(rec)?;
        }
        w.flush().map_err(|e| LadaError::io(&path, e))?;
        self.records.extend(records);
        self.samples.extend(pairs.into_iter().map(|p| (p.mask, p.resist)));
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Re-labels `n` rows picked with `seed` and returns the ids whose stored
    /// resist differs from the oracle's.
    pub fn audit(&self, ks: &KernelSet, n: usize, seed: u64) -> Vec<String> {
        use rand::seq::index::sample;
        let n = n.min(self.len());
        let picks = sample(&mut rng::rng(seed), self.len(), n).into_vec();
        picks
            .into_iter()
            .filter(|&i| simulate(&self.samples[i].0, ks) != self.samples[i].1)
            .map(|i| self.records[i].id.clone())
            .collect()
    }
}

/// `n` rule-compliant patterns with oracle labels, in memory.
pub fn make_dataset(n: usize, rules: &DesignRules, ks: &KernelSet, seed: u64) -> Result<Vec<Sample>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let m = generate_pattern(rules, rng::split_index(seed, i))?;
            let r = simulate(&m, ks);
            Ok((m, r))
        })
        .collect()
}

/// Creates a store at `root` holding `n` labeled shape patterns.
pub fn build_initial_dataset(root: &Path, n: usize, rules: &DesignRules, ks: &KernelSet, seed: u64) -> Result<DatasetStore> {
    if n == 0 {
        return Err(LadaError::InvalidInput("initial dataset size must be >= 1".into()));
    }
    let data = make_dataset(n, rules, ks, seed)?;
    let mut store = DatasetStore::create(root)?;
    let pairs = data
        .into_iter()
        .enumerate()
        .map(|(i, (mask, resist))| NewPair {
            mask,
            resist,
            strategy: INITIAL_STRATEGY.into(),
            iteration: 0,
            seed: rng::split_index(seed, i as u64),
        })
        .collect();
    store.append(pairs)?;
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train: Evaluation,
    pub test: Evaluation,
    pub surrogate_losses: Vec<EpochLoss>,
    pub gan_last_step: Option<GanStep>,
    pub d_real_acc: f64,
    pub d_fake_acc: f64,
}

pub struct Pretrained {
    pub f: DoinnModel,
    pub g: GeneratorModel,
    pub d: Discriminator,
    pub report: PretrainReport,
}

/// Trains F from a fresh initialisation and the GAN on the store's masks.
pub fn pretrain(train: &[Sample], test: &[Sample], cfg: &RunConfig, seeds: &StreamSeeds) -> Result<Pretrained> {
    if train.is_empty() {
        return Err(LadaError::InvalidInput("pretraining needs a non-empty dataset".into()));
    }
    let mut f = DoinnModel::init(seeds.surrogate, DoinnInit::default());
    let surrogate_losses = f.finetune(train, &cfg.surrogate.pretrain, rng::split(seeds.surrogate, "pretrain"))?;
    let mut g = GeneratorModel::init(rng::split(seeds.gan, "g"), GeneratorInit::default());
    let mut d = Discriminator::init(rng::split(seeds.gan, "d"));
    let masks: Vec<BinaryImage> = train.iter().map(|(m, _)| m.clone()).collect();
    let steps = gan_train(&mut g, &mut d, &masks, &cfg.gan, rng::split(seeds.gan, "train"))?;
    let acc_reals = &masks[..masks.len().min(ACCURACY_SAMPLES)];
    let (d_real_acc, d_fake_acc) =
        discriminator_accuracy(&g, &d, acc_reals, ACCURACY_SAMPLES, rng::split(seeds.gan, "accuracy"))?;
    let report = PretrainReport {
        train: evaluate(&f, train)?,
        test: evaluate(&f, test)?,
        surrogate_losses,
        gan_last_step: steps.last().cloned(),
        d_real_acc,
        d_fake_acc,
    };
    Ok(Pretrained { f, g, d, report })
}

pub fn checkpoint_path(dir: &Path, net: &str, t: usize) -> PathBuf {
    dir.join(format!("{net}_{t}.ckpt"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub dataset_size: usize,
    pub train_fiou_pct: f64,
    pub test_fiou_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub iteration: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub entries: Vec<HistoryEntry>,
    #[serde(skip)]
    pub timings: Vec<Timing>,
}

impl RunHistory {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("history serializes") + "\n"
    }

    pub fn read(path: &Path) -> Result<Vec<HistoryEntry>> {
        let s = fs::read_to_string(path).map_err(|e| LadaError::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Everything that changes while the loop runs.
pub struct LoopState {
    pub cfg: RunConfig,
    pub seeds: StreamSeeds,
    pub ks: KernelSet,
    pub store: DatasetStore,
    pub test: Vec<Sample>,
    pub f: DoinnModel,
    pub g: GeneratorModel,
    pub history: RunHistory,
}

impl LoopState {
    fn record(&mut self, iteration: usize, started: Instant) -> Result<()> {
        let train = evaluate(&self.f, self.store.samples())?;
        let test = evaluate(&self.f, &self.test)?;
        self.history.entries.push(HistoryEntry {
            iteration,
            dataset_size: self.store.len(),
            train_fiou_pct: train.fiou_pct,
            test_fiou_pct: test.fiou_pct,
        });
        self.history.timings.push(Timing {
            iteration,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "iteration {iteration}: |D| = {}, train fIoU {:.4}%, test fIoU {:.4}%",
            self.store.len(),
            train.fiou_pct,
            test.fiou_pct
        );
        Ok(())
    }

    fn write_history(&self) -> Result<()> {
        let root = self.store.root();
        let h = root.join("history.json");
        fs::write(&h, self.history.to_json()).map_err(|e| LadaError::io(&h, e))?;
        let t = root.join("timings.json");
        let s = serde_json::to_string_pretty(&self.history.timings)? + "\n";
        fs::write(&t, s).map_err(|e| LadaError::io(&t, e))
    }
}

fn write_provenance(root: &Path, t: usize, prov: &[Provenance]) -> Result<()> {
    let dir = root.join("provenance");
    fs::create_dir_all(&dir).map_err(|e| LadaError::io(&dir, e))?;
    let p = dir.join(format!("iter_{t:02}.json"));
    fs::write(&p, serde_json::to_string_pretty(prov)? + "\n").map_err(|e| LadaError::io(&p, e))
}

/// Propose, label, append, finetune, evaluate. G stays fixed.
pub fn run_iteration(t: usize, state: &mut LoopState) -> Result<()> {
    if t == 0 || t > state.cfg.run.t {
        return Err(LadaError::InvalidInput(format!("iteration {t} outside 1..={}", state.cfg.run.t)));
    }
    let started = Instant::now();
    let cfg = &state.cfg;
    let ctx = SamplerContext {
        f: &state.f,
        g: &state.g,
        rules: &cfg.rules,
        ascent: &cfg.sampler,
    };
    let proposals = propose_batch(cfg.run.strategy, &ctx, cfg.run.b, rng::split_index(state.seeds.sampler, t as u64))?;
    let ks = &state.ks;
    let pairs: Vec<NewPair> = proposals
        .par_iter()
        .map(|p| NewPair {
            resist: simulate(&p.mask, ks),
            mask: p.mask.clone(),
            strategy: cfg.run.strategy.name().into(),
            iteration: t,
            seed: p.provenance.seed,
        })
        .collect();
    let prov: Vec<Provenance> = proposals.into_iter().map(|p| p.provenance).collect();
    write_provenance(state.store.root(), t, &prov)?;
    state.store.append(pairs)?;
    let finetune = cfg.run.finetune.clone();
    state
        .f
        .finetune(state.store.samples(), &finetune, rng::split_index(state.seeds.surrogate, t as u64))?;
    state.f.save(&checkpoint_path(&state.store.root().join("checkpoints"), "f", t))?;
    state.record(t, started)
}

/// Loads `f_0.ckpt` and `g_0.ckpt` from `dir`.
pub fn load_pretrained(dir: &Path) -> Result<(DoinnModel, GeneratorModel)> {
    Ok((
        DoinnModel::load(&checkpoint_path(dir, "f", 0))?,
        GeneratorModel::load(&checkpoint_path(dir, "g", 0))?,
    ))
}

fn prepare_run_dir(cfg: &RunConfig, out: &Path) -> Result<(StreamSeeds, KernelSet)> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| LadaError::io(out, e))?;
    if out.join(MANIFEST).exists() {
        return Err(LadaError::InvalidInput(format!("{} already holds a run", out.display())));
    }
    cfg.write(&out.join("config.json"))?;
    Ok((cfg.seeds.streams(), build_kernels(&cfg.oracle)?))
}

/// Builds the initial store and test set, pretrains F and G, and saves the
/// iteration-0 checkpoints and `pretrain.json` under `out`.
pub fn pretrain_run(cfg: &RunConfig, out: &Path) -> Result<PretrainReport> {
    let (seeds, ks) = prepare_run_dir(cfg, out)?;
    let store = build_initial_dataset(out, cfg.run.initial_size, &cfg.rules, &ks, seeds.data)?;
    let test = make_dataset(cfg.run.test_size, &cfg.rules_test, &ks, seeds.test)?;
    let pre = pretrain(store.samples(), &test, cfg, &seeds)?;
    let ck = out.join("checkpoints");
    pre.f.save(&checkpoint_path(&ck, "f", 0))?;
    pre.g.save(&checkpoint_path(&ck, "g", 0))?;
    pre.d.save(&checkpoint_path(&ck, "d", 0))?;
    let p = out.join("pretrain.json");
    fs::write(&p, serde_json::to_string_pretty(&pre.report)? + "\n").map_err(|e| LadaError::io(&p, e))?;
    Ok(pre.report)
}

/// Full loop into `out`. Starts from the checkpoints in `paths.pretrained`
/// when set, otherwise pretrains first.
pub fn run_loop(cfg: &RunConfig, out: &Path) -> Result<RunHistory> {
    let (seeds, ks) = prepare_run_dir(cfg, out)?;
    let store = build_initial_dataset(out, cfg.run.initial_size, &cfg.rules, &ks, seeds.data)?;
    let test = make_dataset(cfg.run.test_size, &cfg.rules_test, &ks, seeds.test)?;
    let started = Instant::now();
    let ck = out.join("checkpoints");
    let (f, g) = match &cfg.paths.pretrained {
        Some(dir) => {
            let (f, g) = load_pretrained(dir)?;
            f.save(&checkpoint_path(&ck, "f", 0))?;
            g.save(&checkpoint_path(&ck, "g", 0))?;
            (f, g)
        }
        None => {
            let pre = pretrain(store.samples(), &test, cfg, &seeds)?;
            pre.f.save(&checkpoint_path(&ck, "f", 0))?;
            pre.g.save(&checkpoint_path(&ck, "g", 0))?;
            pre.d.save(&checkpoint_path(&ck, "d", 0))?;
            (pre.f, pre.g)
        }
    };
    let mut state = LoopState {
        cfg: cfg.clone(),
        seeds,
        ks,
        store,
        test,
        f,
        g,
        history: RunHistory::default(),
    };
    state.record(0, started)?;
    state.write_history()?;
    for t in 1..=cfg.run.t {
        run_iteration(t, &mut state)?;
        state.write_history()?;
    }
    Ok(state.history)
}
