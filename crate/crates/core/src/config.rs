//! Declarative run configuration.
//!
//! A run is described by one TOML document:
//!
//! ```toml
//! seed = 7
//! profile = "desk"
//! output_dir = "runs/full"
//! max_hops = 3
//!
//! [data]
//! triples = "bench/triples.tsv"
//! labels = "bench/labels.tsv"
//! conversations = "bench/conversations.jsonl"
//! domains = "bench/domains.txt"
//!
//! [hyperparameters]     # any subset; the rest comes from `profile`
//! learning_rate = 1e-3
//!
//! [ablation]            # any subset; defaults give the full model
//! use_domain = false
//!
//! [embedding]
//! method = "hashed-bag-of-tokens"
//! dim = 64
//! seed = 7
//! cache = true
//! ```
//!
//! Relative data paths are resolved against the directory of the config
//! file. The effective config, with every hyperparameter spelled out, is
//! written next to the run's outputs and reproduces the run when loaded.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::synth::{CONVERSATIONS_FILE, DOMAINS_FILE, LABELS_FILE, TRIPLES_FILE};
use crate::embed::{CharTrigramProjection, Embedder, EmbeddingProvider, HashedBagOfTokens};
use crate::error::{Error, Result};
use crate::experiment::Split;
use crate::trainer::{Ablation, Hyperparameters};

/// Name of the effective config inside a run directory.
pub const EFFECTIVE_CONFIG: &str = "config.toml";

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "PRALINE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub triples: PathBuf,
    pub labels: PathBuf,
    pub conversations: PathBuf,
    pub domains: PathBuf,
}

impl DataPaths {
    /// The four files `synth` writes into `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            triples: dir.join(TRIPLES_FILE),
            labels: dir.join(LABELS_FILE),
            conversations: dir.join(CONVERSATIONS_FILE),
            domains: dir.join(DOMAINS_FILE),
        }
    }

    fn all(&self) -> [&PathBuf; 4] {
        [&self.triples, &self.labels, &self.conversations, &self.domains]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMethod {
    #[default]
    HashedBagOfTokens,
    CharTrigramProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub method: EmbeddingMethod,
    pub dim: usize,
    pub seed: u64,
    /// Keep raw vectors in `<output_dir>/embeddings.*` across runs.
    pub cache: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { method: EmbeddingMethod::default(), dim: 64, seed: 7, cache: false }
    }
}

impl EmbeddingConfig {
    pub fn provider(&self) -> Box<dyn EmbeddingProvider> {
        match self.method {
            EmbeddingMethod::HashedBagOfTokens => Box::new(HashedBagOfTokens { dim: self.dim, seed: self.seed }),
            EmbeddingMethod::CharTrigramProjection => Box::new(CharTrigramProjection { dim: self.dim, seed: self.seed }),
        }
    }

    pub fn build(&self, output_dir: &Path) -> Result<Embedder> {
        if self.cache {
            Embedder::with_cache_file(self.provider(), &output_dir.join("embeddings"))
        } else {
            Ok(Embedder::new(self.provider()))
        }
    }
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub max_hops: usize,
    pub data: DataPaths,
    pub split: Split,
    pub hyperparameters: Hyperparameters,
    pub ablation: Ablation,
    pub embedding: EmbeddingConfig,
}

/// The on-disk form: every section optional, hyperparameters partial.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    profile: Option<String>,
    output_dir: Option<PathBuf>,
    max_hops: Option<usize>,
    data: Option<DataPaths>,
    #[serde(default)]
    split: Split,
    #[serde(default)]
    hyperparameters: toml::Table,
    #[serde(default)]
    ablation: AblationTable,
    #[serde(default)]
    embedding: EmbeddingConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblationTable {
    name: Option<String>,
    history_mode: Option<crate::corpus::HistoryMode>,
    use_domain: Option<bool>,
    response_mode: Option<crate::corpus::ResponseMode>,
    training_mode: Option<crate::trainer::TrainingMode>,
}

impl AblationTable {
    fn resolve(self) -> Result<Ablation> {
        let base = match &self.name {
            Some(n) => Ablation::parse(n)?,
            None => Ablation::full(),
        };
        Ok(Ablation {
            history_mode: self.history_mode.unwrap_or(base.history_mode),
            use_domain: self.use_domain.unwrap_or(base.use_domain),
            response_mode: self.response_mode.unwrap_or(base.response_mode),
            training_mode: self.training_mode.unwrap_or(base.training_mode),
        })
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub ablation: Option<String>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub profile: Option<String>,
}

impl RunConfig {
    /// Parses `text`; relative paths are taken relative to `base_dir`.
    /// Precedence: file, then `PRALINE_SEED`, then `overrides`.
    pub fn from_toml(text: &str, base_dir: &Path, overrides: &Overrides) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let profile = overrides.profile.as_deref().or(raw.profile.as_deref()).unwrap_or("desk");
        let mut hyper = Hyperparameters::profile(profile)?;
        if !raw.hyperparameters.is_empty() {
            let mut table = toml::Table::try_from(&hyper).map_err(|e| Error::Config(e.to_string()))?;
            for (k, v) in raw.hyperparameters {
                if !table.contains_key(&k) {
                    return Err(Error::Config(format!("unknown hyperparameter `{k}`")));
                }
                table.insert(k, v);
            }
            hyper = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        }
        if let Some(e) = overrides.epochs {
            hyper.epochs = e;
        }
        if let Some(lr) = overrides.learning_rate {
            hyper.learning_rate = lr;
        }

        let seed = match (overrides.seed, seed_from_env()?) {
            (Some(s), _) | (None, Some(s)) => s,
            (None, None) => raw.seed.unwrap_or(hyper.seed),
        };
        hyper.seed = seed;

        let ablation = match &overrides.ablation {
            Some(name) => Ablation::parse(name)?,
            None => raw.ablation.resolve()?,
        };
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };
        let data = match (&overrides.data_dir, raw.data) {
            (Some(dir), _) => DataPaths::in_dir(dir),
            (None, Some(d)) => DataPaths {
                triples: resolve(d.triples),
                labels: resolve(d.labels),
                conversations: resolve(d.conversations),
                domains: resolve(d.domains),
            },
            (None, None) => return Err(Error::Config("no [data] section and no --data directory".into())),
        };
        let output_dir = match (&overrides.output_dir, raw.output_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => resolve(o),
            (None, None) => return Err(Error::Config("no output_dir and no --out directory".into())),
        };
        let config = RunConfig {
            seed,
            output_dir,
            max_hops: raw.max_hops.unwrap_or(3),
            data,
            split: raw.split,
            hyperparameters: hyper,
            ablation,
            embedding: raw.embedding,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    /// Checks values and that every data file exists.
    pub fn validate(&self) -> Result<()> {
        self.hyperparameters.validate()?;
        if !(1..=3).contains(&self.max_hops) {
            return Err(Error::Config(format!("max_hops must be 1, 2 or 3, got {}", self.max_hops)));
        }
        if self.embedding.dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        for p in self.data.all() {
            if !p.is_file() {
                return Err(Error::Config(format!("data file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    /// TOML text that [`RunConfig::from_toml`] reads back to `self`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// Writes the effective config into the output directory. Paths are
    /// made absolute first, since the copy is read back relative to the
    /// run directory rather than the original working directory.
    pub fn persist(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let abs = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
        let mut copy = self.clone();
        copy.output_dir = abs(&self.output_dir)?;
        for (dst, src) in [
            (&mut copy.data.triples, &self.data.triples),
            (&mut copy.data.labels, &self.data.labels),
            (&mut copy.data.conversations, &self.data.conversations),
            (&mut copy.data.domains, &self.data.domains),
        ] {
            *dst = abs(src)?;
        }
        let path = self.output_dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, copy.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::HistoryMode;
    use crate::trainer::TrainingMode;

    fn data_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for f in [TRIPLES_FILE, LABELS_FILE, CONVERSATIONS_FILE, DOMAINS_FILE] {
            fs::write(dir.path().join(f), "").unwrap();
        }
        dir
    }

    fn overrides(dir: &Path) -> Overrides {
        Overrides { data_dir: Some(dir.to_path_buf()), output_dir: Some(dir.join("out")), ..Overrides::default() }
    }

    #[test]
    fn partial_hyperparameters_fill_from_profile() {
        let dir = data_dir();
        let c = RunConfig::from_toml("[hyperparameters]\nlearning_rate = 0.002\n", dir.path(), &overrides(dir.path())).unwrap();
        assert_eq!(c.hyperparameters.learning_rate, 0.002);
        assert_eq!(c.hyperparameters.d_model, 64);
        assert!(RunConfig::from_toml("[hyperparameters]\nlr = 1.0\n", dir.path(), &overrides(dir.path())).is_err());
    }

    #[test]
    fn ablation_flag_maps_onto_fields() {
        let dir = data_dir();
        let o = Overrides { ablation: Some("w/o-domain".into()), ..overrides(dir.path()) };
        let c = RunConfig::from_toml("", dir.path(), &o).unwrap();
        assert!(!c.ablation.use_domain);
        let c = RunConfig::from_toml("[ablation]\nname = \"w/o-full-conv\"\ntraining_mode = \"separate\"\n", dir.path(), &overrides(dir.path())).unwrap();
        assert_eq!(c.ablation.history_mode, HistoryMode::PreviousTurnOnly);
        assert_eq!(c.ablation.training_mode, TrainingMode::Separate);
    }

    #[test]
    fn effective_config_round_trips() {
        let dir = data_dir();
        let o = Overrides { epochs: Some(3), seed: Some(11), ..overrides(dir.path()) };
        let c = RunConfig::from_toml("[embedding]\ndim = 16\n", dir.path(), &o).unwrap();
        assert_eq!((c.seed, c.hyperparameters.seed, c.hyperparameters.epochs), (11, 11, 3));
        let back = RunConfig::from_toml(&c.to_toml().unwrap(), Path::new("/elsewhere"), &Overrides::default()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_data_file_is_named() {
        let dir = data_dir();
        fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
        let err = RunConfig::from_toml("", dir.path(), &overrides(dir.path())).unwrap_err();
        assert!(err.to_string().contains(LABELS_FILE), "{err}");
    }
}
