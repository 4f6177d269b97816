//! Run configuration: one TOML file with `[run]`, `[paths]`, `[data]`,
//! `[wals]`, `[model]`, `[projectors]`, `[stage1]` and `[stage2]` sections.
//!
//! Sections that take a seed inherit `run.seed` unless they set their own.
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SyntheticConfig;
use crate::error::{Error, Result};
use crate::nanolm::ModelConfig;
use crate::train::StageConfig;
use crate::wals::WalsConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for per-example work. Results do not depend on it.
    #[serde(default = "one")]
    pub threads: usize,
    /// Whether `report` compares against the text-only baseline.
    #[serde(default = "yes")]
    pub baseline: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_report_dir")]
    pub report_dir: PathBuf,
}

fn default_data_dir() -> PathBuf {
    "data".into()
}

fn default_checkpoint_dir() -> PathBuf {
    "checkpoints".into()
}

fn default_report_dir() -> PathBuf {
    "reports".into()
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: default_data_dir(),
            checkpoint_dir: default_checkpoint_dir(),
            report_dir: default_report_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Interaction file, one user per line. Exclusive with `synthetic`.
    #[serde(default)]
    pub interactions: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    /// Template file; the built-in set when absent.
    #[serde(default)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorSection {
    /// Defaults to `model.d_model`.
    #[serde(default)]
    pub d_hidden: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub paths: PathsSection,
    pub data: DataSection,
    pub wals: WalsConfig,
    pub model: ModelConfig,
    pub projectors: ProjectorSection,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

const SEEDED: [&str; 5] = ["wals", "model", "projectors", "stage1", "stage2"];

impl RunConfig {
    /// Parses TOML text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::invalid(format!("config: {e}")))?;
        let seed = doc
            .get("run")
            .and_then(|r| r.get("seed"))
            .cloned()
            .unwrap_or(toml::Value::Integer(0));
        for name in SEEDED {
            let section = doc
                .entry(name)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let table = section
                .as_table_mut()
                .ok_or_else(|| Error::invalid(format!("config: [{name}] must be a table")))?;
            table.entry("seed").or_insert_with(|| seed.clone());
        }
        if let Some(toml::Value::Table(data)) = doc.get_mut("data") {
            if let Some(toml::Value::Table(syn)) = data.get_mut("synthetic") {
                syn.entry("seed").or_insert_with(|| seed.clone());
            }
        }
        for (name, stage) in [("stage1", 1), ("stage2", 2)] {
            if let Some(toml::Value::Table(t)) = doc.get_mut(name) {
                t.entry("stage").or_insert(toml::Value::Integer(stage));
            }
        }
        doc.entry("run")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let mut cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid(format!("config: {e}")))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.data_dir);
        fix(&mut self.paths.checkpoint_dir);
        fix(&mut self.paths.report_dir);
        if let Some(p) = self.data.interactions.as_mut() {
            fix(p);
        }
        if let Some(p) = self.data.templates.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.interactions, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::invalid(
                    "config: set either data.interactions or data.synthetic, not both",
                ))
            }
            (None, None) => {
                return Err(Error::invalid(
                    "config: data.interactions or data.synthetic is required",
                ))
            }
            (None, Some(s)) => s.validate()?,
            (Some(_), None) => {}
        }
        if self.run.threads == 0 {
            return Err(Error::invalid("config: run.threads must be at least 1"));
        }
        if self.stage1.stage != 1 || self.stage2.stage != 2 {
            return Err(Error::invalid(
                "config: [stage1] and [stage2] must carry stage = 1 and 2",
            ));
        }
        if self.projectors.d_hidden == Some(0) {
            return Err(Error::invalid(
                "config: projectors.d_hidden must be positive",
            ));
        }
        self.wals.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        let model = ModelConfig {
            vocab_size: self.model.vocab_size.max(1),
            ..self.model.clone()
        };
        model.validate()
    }

    pub fn d_hidden(&self) -> usize {
        self.projectors.d_hidden.unwrap_or(self.model.d_model)
    }

    /// History length used at evaluation time.
    pub fn eval_max_history(&self) -> usize {
        self.stage2.max_history
    }

    /// Baseline budget: the two stages' steps combined, stage 2 settings.
    pub fn baseline_stage(&self) -> StageConfig {
        StageConfig {
            steps: self.stage1.steps + self.stage2.steps,
            ..self.stage2.clone()
        }
    }

    /// SHA-256 over everything that influences results. Paths and thread
    /// count are excluded; the interaction and template file contents are
    /// covered by the data manifest instead.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Material<'a> {
            seed: u64,
            baseline: bool,
            synthetic: &'a Option<SyntheticConfig>,
            wals: &'a WalsConfig,
            model: &'a ModelConfig,
            d_hidden: usize,
            projector_seed: u64,
            stage1: &'a StageConfig,
            stage2: &'a StageConfig,
        }
        let m = Material {
            seed: self.run.seed,
            baseline: self.run.baseline,
            synthetic: &self.data.synthetic,
            wals: &self.wals,
            model: &self.model,
            d_hidden: self.d_hidden(),
            projector_seed: self.projectors.seed,
            stage1: &self.stage1,
            stage2: &self.stage2,
        };
        let json = serde_json::to_string(&m).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
seed = 7

[data.synthetic]
n_users = 20
n_items = 16
n_clusters = 4
items_per_user = 5
noise_rate = 0.2

[wals]
d_cf = 8

[model]
d_model = 16
n_heads = 2

[stage1]
steps = 3

[stage2]
steps = 2
lora = { rank = 2, alpha = 4.0 }
"#;

    #[test]
    fn seeds_inherit_the_global_seed() {
        let cfg = RunConfig::parse(MINIMAL, Path::new("/tmp/x")).unwrap();
        assert_eq!(cfg.wals.seed, 7);
        assert_eq!(cfg.model.seed, 7);
        assert_eq!(cfg.projectors.seed, 7);
        assert_eq!(cfg.stage1.seed, 7);
        assert_eq!(cfg.stage2.seed, 7);
        assert_eq!(cfg.data.synthetic.as_ref().unwrap().seed, 7);
        assert_eq!((cfg.stage1.stage, cfg.stage2.stage), (1, 2));
        assert_eq!(cfg.paths.data_dir, Path::new("/tmp/x/data"));
        assert_eq!(cfg.d_hidden(), 16);
        assert_eq!(cfg.baseline_stage().steps, 5);
        assert_eq!(cfg.baseline_stage().lora, cfg.stage2.lora);

        let own = MINIMAL.replace("[wals]\n", "[wals]\nseed = 99\n");
        assert_eq!(
            RunConfig::parse(&own, Path::new(".")).unwrap().wals.seed,
            99
        );
    }

    #[test]
    fn hash_tracks_results_not_paths() {
        let a = RunConfig::parse(MINIMAL, Path::new("/a")).unwrap();
        let b = RunConfig::parse(MINIMAL, Path::new("/b")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let threads = MINIMAL.replace("seed = 7", "seed = 7\nthreads = 3");
        assert_eq!(
            RunConfig::parse(&threads, Path::new("/a")).unwrap().hash(),
            a.hash()
        );
        let c =
            RunConfig::parse(&MINIMAL.replace("steps = 3", "steps = 4"), Path::new("/a")).unwrap();
        assert_ne!(a.hash(), c.hash());
        let d =
            RunConfig::parse(&MINIMAL.replace("seed = 7", "seed = 8"), Path::new("/a")).unwrap();
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        let base = Path::new(".");
        assert!(RunConfig::parse("not toml [", base).is_err());
        assert!(RunConfig::parse(
            &MINIMAL.replace("[stage1]\n", "[stage1]\nlora = { rank = 2 }\n"),
            base
        )
        .is_err());
        assert!(RunConfig::parse(
            &MINIMAL.replace("[stage1]\n", "[stage1]\nstage = 2\n"),
            base
        )
        .is_err());
        assert!(
            RunConfig::parse(&MINIMAL.replace("d_cf = 8", "d_cf = 8\nbogus = 1"), base).is_err()
        );
        assert!(RunConfig::parse(&MINIMAL.replace("n_heads = 2", "n_heads = 3"), base).is_err());
        let both = MINIMAL.replace(
            "[data.synthetic]",
            "[data]\ninteractions = \"x.txt\"\n[data.synthetic]",
        );
        assert!(RunConfig::parse(&both, base).is_err());
        let none = MINIMAL.replace("[data.synthetic]", "[unused]");
        assert!(RunConfig::parse(&none, base).is_err());
        let err = RunConfig::parse("[run]\nthreads = 0\n", base).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
