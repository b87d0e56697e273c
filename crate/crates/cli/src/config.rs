use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mepoi_core::geodata::WorldConfig;
use mepoi_core::pipeline::PreprocessConfig;
use mepoi_core::probes::ProbeConfig;
use mepoi_core::textalign::TextProvider;
use mepoi_core::train::{ModelConfig, PretrainConfig};
use mepoi_core::transfer::KernelConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

/// Keys filled from the global seed rather than read from the file.
const SEEDED: [(&str, &str); 2] = [("world", "seed"), ("pretrain", "seed")];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub world: PathBuf,
    pub labels: PathBuf,
    pub traces: PathBuf,
    pub visits: PathBuf,
    pub priors: PathBuf,
    pub prompts: PathBuf,
    pub checkpoint: PathBuf,
    pub embeddings: PathBuf,
    pub reports: PathBuf,
    pub log: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            world: "world.jsonl".into(),
            labels: "labels.jsonl".into(),
            traces: "traces.csv".into(),
            visits: "visits".into(),
            priors: "priors.json".into(),
            prompts: "prompts".into(),
            checkpoint: "checkpoint".into(),
            embeddings: "embeddings".into(),
            reports: "reports".into(),
            log: "pretrain.log.jsonl".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.world,
            &mut self.labels,
            &mut self.traces,
            &mut self.visits,
            &mut self.priors,
            &mut self.prompts,
            &mut self.checkpoint,
            &mut self.embeddings,
            &mut self.reports,
            &mut self.log,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    pub tasks: Vec<String>,
    pub modes: Vec<String>,
    /// Probe seeds are `seed, seed + 1, ...`.
    pub seeds: usize,
    /// Also probe frozen random embeddings of the same shape.
    pub random_control: bool,
    pub head: ProbeConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            tasks: ["open_hours", "closure", "intent", "busyness", "price"].map(String::from).to_vec(),
            modes: ["text-only", "mobility-only", "combined"].map(String::from).to_vec(),
            seeds: 5,
            random_control: true,
            head: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub paths: Paths,
    pub world: WorldConfig,
    pub preprocess: PreprocessConfig,
    pub kernel: KernelConfig,
    pub text: TextProvider,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            threads: 0,
            paths: Paths::default(),
            world: WorldConfig::default(),
            preprocess: PreprocessConfig::default(),
            kernel: KernelConfig::default(),
            text: TextProvider::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeSettings::default(),
        }
    }
}

fn template() -> Value {
    let mut v = Value::try_from(RunConfig::default()).expect("default config serializes");
    for (section, key) in SEEDED {
        v[section].as_table_mut().expect("section").remove(key);
    }
    v
}

/// The default configuration as TOML, without the derived seed keys.
pub fn default_toml() -> String {
    toml::to_string_pretty(&template()).expect("default config serializes")
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Every key of the template must be present with a compatible type.
/// Integers are accepted where floats are expected.
fn check_keys(expected: &Value, found: &Value, prefix: &str) -> Result<()> {
    let (Value::Table(exp), Value::Table(got)) = (expected, found) else {
        return Ok(());
    };
    // Tagged enums carry their own keys; let serde check those.
    if exp.contains_key("kind") {
        if !got.contains_key("kind") {
            bail!("missing config key `{prefix}kind` (expected string)");
        }
        return Ok(());
    }
    for (key, want) in exp {
        let path = format!("{prefix}{key}");
        let Some(have) = got.get(key) else {
            bail!("missing config key `{path}` (expected {})", type_name(want));
        };
        let compatible = type_name(want) == type_name(have) || matches!((want, have), (Value::Float(_), Value::Integer(_)));
        if !compatible {
            bail!("config key `{path}` expects {}, found {}", type_name(want), type_name(have));
        }
        check_keys(want, have, &format!("{path}."))?;
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut value = Value::Table(text.parse::<toml::Table>().context("config is not valid TOML")?);
        check_keys(&template(), &value, "")?;
        let seed = value.get("seed").cloned().ok_or_else(|| anyhow!("missing config key `seed` (expected integer)"))?;
        for (section, key) in SEEDED {
            let table = value[section].as_table_mut().expect("checked");
            if table.contains_key(key) {
                bail!("config key `{section}.{key}` is derived from the top-level `seed`; remove it");
            }
            table.insert(key.into(), seed.clone());
        }
        let cfg: RunConfig = value.try_into().context("invalid config")?;
        Ok(cfg)
    }

    /// Loads `path`, resolving relative artifact paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.world.seed = seed;
        self.pretrain.seed = seed;
    }
}

/// `key = default` lines for the help text.
pub fn key_listing() -> String {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Table(t) => {
                for (k, x) in t {
                    walk(x, &format!("{prefix}{k}."), out);
                }
            }
            other => out.push(format!("  {} = {}", prefix.trim_end_matches('.'), other)),
        }
    }
    let mut lines = Vec::new();
    walk(&template(), "", &mut lines);
    lines.join("\n")
}
