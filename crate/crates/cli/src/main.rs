//! `lada`: every experiment as one seeded command.
//!
//! Exit status 0 on success, 1 on a usage or validation error, 2 on a runtime
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use lada::active::{self, checkpoint_path, make_dataset, DatasetStore};
use lada::config::{parse_config, RunConfig};
use lada::diffcore::suite::run_suite;
use lada::doinn::DoinnModel;
use lada::error::{LadaError, Result};
use lada::generator::GeneratorModel;
use lada::image::{write_pgm_signed, CANVAS};
use lada::litho::build_kernels;
use lada::metrics::{attack_demo, evaluate, render_table, report, AttackReport, MetricsRow};
use lada::pattern::generate_pattern;
use lada::rng;
use lada::sampler::{propose_batch, Provenance, SamplerContext, SamplingStrategy};

#[derive(Parser)]
#[command(name = "lada", version, about = "Litho-aware data augmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing sections take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// global seed (overrides seeds.global)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory (default <paths.runs>/<unix-time>-<seed>)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// worker threads (falls back to LADA_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the initial labeled dataset
    GenData {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pretrain the surrogate and the generator; writes iteration-0 checkpoints
    Pretrain,
    /// Run the augmentation loop
    Loop {
        #[arg(long)]
        strategy: Option<SamplingStrategy>,
        #[arg(long = "T")]
        t: Option<usize>,
        #[arg(long = "B")]
        b: Option<usize>,
        /// directory with f_0.ckpt and g_0.ckpt to start from
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Propose one batch of masks from saved models
    Sample {
        #[arg(long)]
        strategy: SamplingStrategy,
        #[arg(long = "B", default_value_t = 16)]
        b: usize,
        /// surrogate checkpoint
        #[arg(long)]
        f: PathBuf,
        /// generator checkpoint
        #[arg(long)]
        g: PathBuf,
    },
    /// Evaluate finished runs and write a metrics table
    Eval {
        /// run directories; the first one supplies the pretrained rows
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
    },
    /// Pixel attack on the surrogate input, undone by legalization
    AttackDemo {
        #[arg(long)]
        f: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
    /// Finite-difference check of every differentiable primitive
    Gradcheck {
        #[arg(long, default_value_t = 25)]
        points: usize,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds.global = s;
    }
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.out.clone().unwrap_or_else(|| {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        cfg.paths.runs.join(format!("{now}-{}", cfg.seeds.global))
    })
}

fn configure_threads(c: &Common) -> Result<()> {
    let n = match c.threads {
        Some(n) => Some(n),
        None => match std::env::var("LADA_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| {
                LadaError::InvalidInput(format!("LADA_THREADS must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(LadaError::InvalidInput("thread count must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LadaError::InvalidInput(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| LadaError::io(d, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| LadaError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(&cli.common)?;
    let mut cfg = load_config(&cli.common)?;
    match cli.cmd {
        Cmd::GenData { n } => {
            if let Some(n) = n {
                cfg.run.initial_size = n;
            }
            cfg.validate()?;
            let out = out_dir(&cli.common, &cfg);
            fs::create_dir_all(&out).map_err(|e| LadaError::io(&out, e))?;
            let ks = build_kernels(&cfg.oracle)?;
            let store = active::build_initial_dataset(&out, cfg.run.initial_size, &cfg.rules, &ks, cfg.seeds.streams().data)?;
            cfg.write(&out.join("config.json"))?;
            println!("{} pairs in {}", store.len(), out.display());
        }
        Cmd::Pretrain => {
            let out = out_dir(&cli.common, &cfg);
            let r = active::pretrain_run(&cfg, &out)?;
            println!(
                "pretrained into {}: train fIoU {:.4}%, test fIoU {:.4}%, D accuracy real {:.3} fake {:.3}",
                out.display(),
                r.train.fiou_pct,
                r.test.fiou_pct,
                r.d_real_acc,
                r.d_fake_acc
            );
        }
        Cmd::Loop { strategy, t, b, pretrained } => {
            if let Some(s) = strategy {
                cfg.run.strategy = s;
            }
            if let Some(t) = t {
                cfg.run.t = t;
            }
            if let Some(b) = b {
                cfg.run.b = b;
            }
            if pretrained.is_some() {
                cfg.paths.pretrained = pretrained;
            }
            let out = out_dir(&cli.common, &cfg);
            let h = active::run_loop(&cfg, &out)?;
            for e in &h.entries {
                println!(
                    "t={} |D|={} train {:.4}% test {:.4}%",
                    e.iteration, e.dataset_size, e.train_fiou_pct, e.test_fiou_pct
                );
            }
            println!("run written to {}", out.display());
        }
        Cmd::Sample { strategy, b, f, g } => {
            cfg.validate()?;
            let out = out_dir(&cli.common, &cfg);
            let f = DoinnModel::load(&f)?;
            let g = GeneratorModel::load(&g)?;
            let ctx = SamplerContext {
                f: &f,
                g: &g,
                rules: &cfg.rules,
                ascent: &cfg.sampler,
            };
            let batch = propose_batch(strategy, &ctx, b, cfg.seeds.streams().sampler)?;
            fs::create_dir_all(&out).map_err(|e| LadaError::io(&out, e))?;
            for (i, p) in batch.iter().enumerate() {
                p.mask.write_pgm(&out.join(format!("sample_{i:04}.pgm")))?;
                if let Some(raw) = &p.raw {
                    write_pgm_signed(&out.join(format!("raw_{i:04}.pgm")), CANVAS, CANVAS, raw.data())?;
                }
            }
            let prov: Vec<&Provenance> = batch.iter().map(|p| &p.provenance).collect();
            write_json(&out.join("provenance.json"), &prov)?;
            println!("{} masks written to {}", batch.len(), out.display());
        }
        Cmd::Eval { runs } => {
            let rows = eval_runs(&runs)?;
            let out = cli.common.out.clone().unwrap_or_else(|| runs[0].join("eval"));
            report(&rows, &out)?;
            print!("{}", render_table(&rows));
        }
        Cmd::AttackDemo { f, n, step, iters } => {
            cfg.validate()?;
            let out = out_dir(&cli.common, &cfg);
            let model = DoinnModel::load(&f)?;
            fs::create_dir_all(&out).map_err(|e| LadaError::io(&out, e))?;
            let seed = rng::split(cfg.seeds.global, "attack");
            let mut reports: Vec<AttackReport> = Vec::with_capacity(n);
            for i in 0..n {
                let mask = generate_pattern(&cfg.rules, rng::split_index(seed, i as u64))?;
                let d = attack_demo(&model, &mask, step, iters)?;
                mask.write_pgm(&out.join(format!("mask_{i:02}.pgm")))?;
                write_pgm_signed(&out.join(format!("adv_{i:02}.pgm")), CANVAS, CANVAS, d.adv_raw.data())?;
                d.adv_pred.write_pgm(&out.join(format!("adv_pred_{i:02}.pgm")))?;
                d.clean_pred.write_pgm(&out.join(format!("clean_pred_{i:02}.pgm")))?;
                reports.push(d.report);
            }
            write_json(&out.join("attack.json"), &reports)?;
            let restored = reports.iter().filter(|r| r.legalized_matches).count();
            let hurt = reports.iter().filter(|r| r.adv_fiou < r.clean_fiou).count();
            println!("legalized == original: {restored}/{n}; adversarial fIoU below clean: {hurt}/{n}");
        }
        Cmd::Gradcheck { points } => {
            let rep = run_suite(cfg.seeds.global, points)?;
            for e in &rep.entries {
                println!(
                    "{:<24} {:>3} points  max rel err {:.3e}  {}",
                    e.name,
                    e.points,
                    e.max_rel_error,
                    if e.passed { "ok" } else { "FAIL" }
                );
            }
            println!("{:.1}s", rep.seconds);
            if !rep.all_passed() {
                return Err(LadaError::Failed("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

/// Pretrained train/test rows from the first run, then each run's final model on its test set.
fn eval_runs(runs: &[PathBuf]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    let mut base = 0.0;
    for (k, dir) in runs.iter().enumerate() {
        let cfg = parse_config(&dir.join("config.json"))?;
        let ks = build_kernels(&cfg.oracle)?;
        let test = make_dataset(cfg.run.test_size, &cfg.rules_test, &ks, cfg.seeds.streams().test)?;
        let ck = dir.join("checkpoints");
        if k == 0 {
            let store = DatasetStore::open(dir)?;
            let initial: Vec<_> = store
                .records()
                .iter()
                .zip(store.samples())
                .filter(|(r, _)| r.iteration == 0)
                .map(|(_, s)| s.clone())
                .collect();
            let f0 = DoinnModel::load(&checkpoint_path(&ck, "f", 0))?;
            let train = evaluate(&f0, &initial)?;
            base = train.error_pct;
            rows.push(MetricsRow::new("pretrain (train)", train.fiou_pct, base));
            rows.push(MetricsRow::new("pretrain (test)", evaluate(&f0, &test)?.fiou_pct, base));
        }
        let fin = DoinnModel::load(&checkpoint_path(&ck, "f", cfg.run.t))?;
        let name = cfg.run.strategy.name().to_string();
        rows.push(MetricsRow::new(name, evaluate(&fin, &test)?.fiou_pct, base));
    }
    Ok(rows)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
