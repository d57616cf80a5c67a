//! Run configuration: one JSON object, every section optional, every default
//! written back out so a run directory describes itself.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_path_to_error::Segment;

use crate::doinn::FinetuneConfig;
use crate::error::{LadaError, Result};
use crate::generator::GanConfig;
use crate::image::CANVAS;
use crate::litho::{build_kernels, KernelConfig};
use crate::pattern::DesignRules;
use crate::rng;
use crate::sampler::{AscentConfig, SamplingStrategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    /// pretraining schedule from a fresh initialisation
    pub pretrain: FinetuneConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            pretrain: FinetuneConfig {
                epochs: 10,
                ..FinetuneConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub strategy: SamplingStrategy,
    /// per-iteration finetuning on the whole store
    pub finetune: FinetuneConfig,
    pub initial_size: usize,
    pub test_size: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            t: 4,
            b: 128,
            strategy: SamplingStrategy::StylePred,
            finetune: FinetuneConfig {
                epochs: 2,
                lr: 5e-4,
                ..FinetuneConfig::default()
            },
            initial_size: 512,
            test_size: 128,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub global: u64,
}

/// Named sub-stream seeds of the global seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamSeeds {
    pub data: u64,
    pub test: u64,
    pub surrogate: u64,
    pub gan: u64,
    pub sampler: u64,
}

impl SeedConfig {
    pub fn streams(&self) -> StreamSeeds {
        let s = |n| rng::split(self.global, n);
        StreamSeeds {
            data: s("data"),
            test: s("test"),
            surrogate: s("surrogate"),
            gan: s("gan"),
            sampler: s("sampler"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    /// parent of generated run directories
    pub runs: PathBuf,
    /// directory holding `f_0.ckpt` and `g_0.ckpt` to start from instead of pretraining
    pub pretrained: Option<PathBuf>,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            runs: PathBuf::from("runs"),
            pretrained: None,
        }
    }
}

fn training_rules() -> DesignRules {
    DesignRules::training()
}

fn test_rules() -> DesignRules {
    DesignRules::shifted_test()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub oracle: KernelConfig,
    #[serde(default = "training_rules")]
    pub rules: DesignRules,
    #[serde(default = "test_rules")]
    pub rules_test: DesignRules,
    #[serde(default)]
    pub gan: GanConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub sampler: AscentConfig,
    #[serde(default, rename = "loop")]
    pub run: LoopConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            oracle: KernelConfig::default(),
            rules: training_rules(),
            rules_test: test_rules(),
            gan: GanConfig::default(),
            surrogate: SurrogateConfig::default(),
            sampler: AscentConfig::default(),
            run: LoopConfig::default(),
            seeds: SeedConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

fn at(pointer: &str, e: LadaError) -> LadaError {
    match e {
        LadaError::InvalidConfig(m) => LadaError::InvalidConfig(format!("{pointer}: {m}")),
        other => other,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        build_kernels(&self.oracle).map_err(|e| at("/oracle", e))?;
        for (p, r) in [("/rules", &self.rules), ("/rules_test", &self.rules_test)] {
            r.validate().map_err(|e| at(p, e))?;
            if r.canvas != [CANVAS, CANVAS] {
                return Err(LadaError::InvalidConfig(format!(
                    "{p}/canvas: the networks take {CANVAS}x{CANVAS} inputs"
                )));
            }
        }
        self.gan.validate().map_err(|e| at("/gan", e))?;
        self.surrogate.pretrain.validate().map_err(|e| at("/surrogate/pretrain", e))?;
        self.sampler.validate().map_err(|e| at("/sampler", e))?;
        self.run.finetune.validate().map_err(|e| at("/loop/finetune", e))?;
        let bad = |p: &str| Err(LadaError::InvalidConfig(format!("/loop/{p}: must be >= 1")));
        if self.run.t == 0 {
            return bad("T");
        }
        if self.run.b == 0 {
            return bad("B");
        }
        if self.run.initial_size == 0 {
            return bad("initial_size");
        }
        if self.run.test_size == 0 {
            return bad("test_size");
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            LadaError::InvalidConfig(format!("{pointer}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_string()).map_err(|e| LadaError::io(path, e))
    }
}

/// Reads and validates a config file; defaults fill every missing section.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let bytes = fs::read(path).map_err(|e| LadaError::io(path, e))?;
    let s = String::from_utf8(bytes)
        .map_err(|_| LadaError::InvalidConfig(format!("{} is not UTF-8", path.display())))?;
    RunConfig::from_json_str(&s)
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => {
                out.push('/');
                out.push_str(&key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Enum { variant } => {
                out.push('/');
                out.push_str(variant);
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        "/".into()
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointer_of_nested_field() {
        let e = RunConfig::from_json_str(r#"{"gan": {"steps": "many"}}"#).unwrap_err();
        assert!(e.to_string().contains("/gan/steps"), "{e}");
    }

    #[test]
    fn streams_differ() {
        let s = SeedConfig { global: 3 }.streams();
        let all = [s.data, s.test, s.surrogate, s.gan, s.sampler];
        for i in 0..all.len() {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
